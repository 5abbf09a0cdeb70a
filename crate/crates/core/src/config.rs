//! Flat `section.key=value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; unknown
//! keys are errors. Exactly two seeds exist: `dataset.seed` for data and
//! `train.seed` for everything else.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::encoder::{default_reduction, Architecture, EncoderModel};
use crate::episodes::{self, EpisodeSpec, LoadOptions, MetaSplit, SplitAssignment, SynthParams};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_RUNS;
use crate::losses::{LossConfig, BENCHMARK_WEIGHTS, DISASTER_WEIGHTS, DEFAULT_TAU};
use crate::seed;
use crate::trainer::{TrainConfig, DEFAULT_QUERY};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Directory,
    Bhft,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub side: usize,
    pub channels: usize,
    pub noise: f64,
    pub seed: u64,
    #[serde(skip)]
    pub split: SplitAssignment,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub latent: usize,
    /// `None` picks the per-width default.
    pub reduction: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    pub spec: EpisodeSpec,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig {
                source: DataSource::Synthetic,
                path: None,
                classes: 5,
                per_class: 40,
                side: 16,
                channels: 1,
                noise: 0.05,
                seed: 0,
                split: SplitAssignment::AIDER_RATIO,
            },
            model: ModelConfig { widths: vec![16, 32, 64], latent: 32, reduction: None },
            train: TrainConfig::default(),
            eval: EvalConfig { spec: EpisodeSpec::new(5, 1, DEFAULT_QUERY, 0), runs: DEFAULT_RUNS },
            output_dir: PathBuf::from("out"),
        }
    }
}

const KEYS: &[&str] = &[
    "dataset.source",
    "dataset.path",
    "dataset.classes",
    "dataset.per_class",
    "dataset.side",
    "dataset.channels",
    "dataset.noise",
    "dataset.seed",
    "dataset.split",
    "dataset.ratio",
    "dataset.base_classes",
    "dataset.val_classes",
    "dataset.test_classes",
    "model.widths",
    "model.latent",
    "model.reduction",
    "train.episodes",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.way",
    "train.shot",
    "train.query",
    "train.checkpoint_every",
    "train.seed",
    "train.augment",
    "loss.preset",
    "loss.tau",
    "loss.lambda1",
    "loss.lambda2",
    "loss.lambda3",
    "loss.bhs",
    "loss.cce",
    "loss.rec",
    "eval.way",
    "eval.shot",
    "eval.query",
    "eval.runs",
    "output.dir",
];

struct Entries(BTreeMap<String, String>);

impl Entries {
    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(key, format!("cannot parse `{v}`"))),
        }
    }

    fn set<T: std::str::FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.parse(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn list(&self, key: &str) -> Option<Vec<String>> {
        self.0
            .get(key)
            .map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
    }

    fn positive(&self, key: &str, slot: &mut usize) -> Result<()> {
        self.set(key, slot)?;
        if self.0.contains_key(key) && *slot == 0 {
            return Err(Error::config(key, "must be positive"));
        }
        Ok(())
    }
}

fn parse_lines(text: &str) -> Result<Entries> {
    let mut map = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", no + 1), format!("expected key=value, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(Error::config(key, "unknown key"));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::config(key, "given more than once"));
        }
    }
    Ok(Entries(map))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let e = parse_lines(text)?;
        let mut cfg = RunConfig::default();

        let d = &mut cfg.dataset;
        if let Some(src) = e.0.get("dataset.source") {
            d.source = match src.as_str() {
                "synthetic" => DataSource::Synthetic,
                "directory" => DataSource::Directory,
                "bhft" => DataSource::Bhft,
                other => return Err(Error::config("dataset.source", format!("unknown source `{other}`"))),
            };
        }
        d.path = e.0.get("dataset.path").map(PathBuf::from);
        e.positive("dataset.classes", &mut d.classes)?;
        e.positive("dataset.per_class", &mut d.per_class)?;
        e.positive("dataset.side", &mut d.side)?;
        e.positive("dataset.channels", &mut d.channels)?;
        if d.channels != 1 && d.channels != 3 {
            return Err(Error::config("dataset.channels", "must be 1 or 3"));
        }
        e.set("dataset.noise", &mut d.noise)?;
        if !(d.noise.is_finite() && d.noise >= 0.0) {
            return Err(Error::config("dataset.noise", "must be a non-negative number"));
        }
        e.set("dataset.seed", &mut d.seed)?;
        let split = e.0.get("dataset.split").map(String::as_str).unwrap_or("ratio");
        d.split = match split {
            "ratio" => {
                let text = e.0.get("dataset.ratio").map(String::as_str).unwrap_or("4:1:2");
                let parts: Vec<usize> = text
                    .split(':')
                    .map(|p| p.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::config("dataset.ratio", format!("cannot parse `{text}`")))?;
                match parts[..] {
                    [train, valid, test] if train > 0 && test > 0 => SplitAssignment::Ratio { train, valid, test },
                    _ => return Err(Error::config("dataset.ratio", "expected train:valid:test with train, test > 0")),
                }
            }
            "classes" => {
                let need = |k: &str| e.list(k).ok_or_else(|| Error::config(k, "required when dataset.split=classes"));
                SplitAssignment::Classes {
                    base: need("dataset.base_classes")?,
                    validation: e.list("dataset.val_classes").unwrap_or_default(),
                    test: need("dataset.test_classes")?,
                }
            }
            other => return Err(Error::config("dataset.split", format!("expected ratio or classes, got `{other}`"))),
        };
        match d.source {
            DataSource::Synthetic if d.classes < 2 => {
                return Err(Error::config("dataset.classes", "synthetic data needs at least 2 classes"))
            }
            DataSource::Directory | DataSource::Bhft if d.path.is_none() => {
                return Err(Error::config("dataset.path", "required for this dataset source"))
            }
            _ => {}
        }

        let m = &mut cfg.model;
        if let Some(widths) = e.list("model.widths") {
            m.widths = widths
                .iter()
                .map(|w| w.parse().ok().filter(|&w: &usize| w > 0))
                .collect::<Option<_>>()
                .filter(|w: &Vec<usize>| !w.is_empty())
                .ok_or_else(|| Error::config("model.widths", "expected comma-separated positive integers"))?;
        }
        e.positive("model.latent", &mut m.latent)?;
        m.reduction = match e.0.get("model.reduction").map(String::as_str) {
            None | Some("auto") => None,
            Some(v) => Some(
                v.parse()
                    .ok()
                    .filter(|&r: &usize| r > 0)
                    .ok_or_else(|| Error::config("model.reduction", "expected `auto` or a positive integer"))?,
            ),
        };

        let t = &mut cfg.train;
        e.set("train.episodes", &mut t.episodes)?;
        if t.episodes == 0 {
            return Err(Error::config("train.episodes", "must be at least 1"));
        }
        e.set("train.lr", &mut t.lr)?;
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        e.set("train.beta1", &mut t.adam_beta1)?;
        e.set("train.beta2", &mut t.adam_beta2)?;
        e.set("train.eps", &mut t.adam_eps)?;
        for (key, v) in [("train.beta1", t.adam_beta1), ("train.beta2", t.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if !(t.adam_eps > 0.0) {
            return Err(Error::config("train.eps", "must be positive"));
        }
        e.set("train.way", &mut t.spec.k)?;
        if t.spec.k < 2 {
            return Err(Error::config("train.way", "must be at least 2"));
        }
        e.positive("train.shot", &mut t.spec.n_shot)?;
        e.positive("train.query", &mut t.spec.n_query)?;
        e.set("train.checkpoint_every", &mut t.checkpoint_every)?;
        e.set("train.seed", &mut t.seed)?;
        e.set("train.augment", &mut t.augment)?;

        let weights = match e.0.get("loss.preset").map(String::as_str) {
            None | Some("benchmark") => BENCHMARK_WEIGHTS,
            Some("disaster") => DISASTER_WEIGHTS,
            Some(other) => return Err(Error::config("loss.preset", format!("expected benchmark or disaster, got `{other}`"))),
        };
        let mut loss = LossConfig::with_weights(weights);
        e.set("loss.tau", &mut loss.tau)?;
        e.set("loss.lambda1", &mut loss.lambda1)?;
        e.set("loss.lambda2", &mut loss.lambda2)?;
        e.set("loss.lambda3", &mut loss.lambda3)?;
        e.set("loss.bhs", &mut loss.enable_bhs)?;
        e.set("loss.cce", &mut loss.enable_cce)?;
        e.set("loss.rec", &mut loss.enable_rec)?;
        if !(loss.tau.is_finite() && loss.tau > 0.0) {
            return Err(Error::config("loss.tau", "must be positive"));
        }
        for (key, v) in [("loss.lambda1", loss.lambda1), ("loss.lambda2", loss.lambda2), ("loss.lambda3", loss.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(key, "must be a non-negative number"));
            }
        }
        cfg.train.loss = loss;

        let ev = &mut cfg.eval;
        e.set("eval.way", &mut ev.spec.k)?;
        if ev.spec.k < 2 {
            return Err(Error::config("eval.way", "must be at least 2"));
        }
        e.positive("eval.shot", &mut ev.spec.n_shot)?;
        e.positive("eval.query", &mut ev.spec.n_query)?;
        e.positive("eval.runs", &mut ev.runs)?;

        if let Some(dir) = e.0.get("output.dir") {
            cfg.output_dir = PathBuf::from(dir);
        }
        cfg.architecture().map_err(|err| Error::config("model.widths", err.to_string()))?;
        Ok(cfg)
    }

    /// Parses a file and checks that referenced paths exist. Relative dataset
    /// paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(p) = &cfg.dataset.path {
            let resolved = if p.is_relative() { path.parent().unwrap_or(Path::new(".")).join(p) } else { p.clone() };
            if !resolved.exists() {
                return Err(Error::config("dataset.path", format!("{} does not exist", resolved.display())));
            }
            cfg.dataset.path = Some(resolved);
        }
        Ok(cfg)
    }

    /// Replaces the training seed (and with it every derived stream).
    pub fn with_seed_override(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        self
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let widths = self.model.widths.clone();
        let reductions = widths.iter().map(|&w| self.model.reduction.unwrap_or_else(|| default_reduction(w))).collect();
        Architecture::with_reductions(self.dataset.channels, self.dataset.side, widths, self.model.latent, reductions)
    }

    pub fn init_model(&self) -> Result<EncoderModel> {
        Ok(EncoderModel::new(self.architecture()?, self.train.seed))
    }

    /// Seed of the evaluation episode stream.
    pub fn eval_seed(&self) -> u64 {
        seed::derive(self.train.seed, &[seed::EVAL])
    }

    pub fn synth_params(&self) -> SynthParams {
        let d = &self.dataset;
        SynthParams {
            n_classes: d.classes,
            per_class: d.per_class,
            side: d.side,
            channels: d.channels,
            noise_sigma: d.noise,
            seed: d.seed,
        }
    }

    pub fn load_data(&self) -> Result<MetaSplit> {
        let d = &self.dataset;
        let opts = LoadOptions { side: d.side, channels: d.channels };
        match d.source {
            DataSource::Synthetic => episodes::synth_meta_split(&self.synth_params()),
            DataSource::Directory => {
                episodes::load_image_directory(d.path.as_deref().expect("validated"), &d.split, &opts)
            }
            DataSource::Bhft => episodes::load_bhft_dataset(d.path.as_deref().expect("validated"), &d.split, &opts),
        }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let d = &self.dataset;
        let join = |v: &[String]| v.join(",");
        let mut lines = vec![
            format!(
                "dataset.source={}",
                match d.source {
                    DataSource::Synthetic => "synthetic",
                    DataSource::Directory => "directory",
                    DataSource::Bhft => "bhft",
                }
            ),
        ];
        if let Some(p) = &d.path {
            lines.push(format!("dataset.path={}", p.display()));
        }
        lines.extend([
            format!("dataset.classes={}", d.classes),
            format!("dataset.per_class={}", d.per_class),
            format!("dataset.side={}", d.side),
            format!("dataset.channels={}", d.channels),
            format!("dataset.noise={}", d.noise),
            format!("dataset.seed={}", d.seed),
        ]);
        match &d.split {
            SplitAssignment::Ratio { train, valid, test } => {
                lines.push("dataset.split=ratio".into());
                lines.push(format!("dataset.ratio={train}:{valid}:{test}"));
            }
            SplitAssignment::Classes { base, validation, test } => {
                lines.push("dataset.split=classes".into());
                lines.push(format!("dataset.base_classes={}", join(base)));
                lines.push(format!("dataset.val_classes={}", join(validation)));
                lines.push(format!("dataset.test_classes={}", join(test)));
            }
        }
        let m = &self.model;
        let t = &self.train;
        let l = &t.loss;
        lines.extend([
            format!("model.widths={}", m.widths.iter().map(usize::to_string).collect::<Vec<_>>().join(",")),
            format!("model.latent={}", m.latent),
            format!("model.reduction={}", m.reduction.map_or("auto".to_string(), |r| r.to_string())),
            format!("train.episodes={}", t.episodes),
            format!("train.lr={}", t.lr),
            format!("train.beta1={}", t.adam_beta1),
            format!("train.beta2={}", t.adam_beta2),
            format!("train.eps={}", t.adam_eps),
            format!("train.way={}", t.spec.k),
            format!("train.shot={}", t.spec.n_shot),
            format!("train.query={}", t.spec.n_query),
            format!("train.checkpoint_every={}", t.checkpoint_every),
            format!("train.seed={}", t.seed),
            format!("train.augment={}", t.augment),
            format!("loss.tau={}", l.tau),
            format!("loss.lambda1={}", l.lambda1),
            format!("loss.lambda2={}", l.lambda2),
            format!("loss.lambda3={}", l.lambda3),
            format!("loss.bhs={}", l.enable_bhs),
            format!("loss.cce={}", l.enable_cce),
            format!("loss.rec={}", l.enable_rec),
            format!("eval.way={}", self.eval.spec.k),
            format!("eval.shot={}", self.eval.spec.n_shot),
            format!("eval.query={}", self.eval.spec.n_query),
            format!("eval.runs={}", self.eval.runs),
            format!("output.dir={}", self.output_dir.display()),
        ]);
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

/// Defaults that must stay fixed: `(benchmark λ, disaster λ, τ, lr)`.
pub fn reference_constants() -> ((f64, f64, f64), (f64, f64, f64), f64, f64) {
    (BENCHMARK_WEIGHTS, DISASTER_WEIGHTS, DEFAULT_TAU, RunConfig::default().train.lr)
}
