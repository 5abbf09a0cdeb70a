//! Episodic training loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::{self, Checkpoint};
use crate::distributions::NoiseSource;
use crate::encoder::{split_gaussians, DecodeFrom, EncoderModel};
use crate::episodes::{self, sample_episode, Episode, EpisodeSpec, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::{episode_head, LossConfig};
use crate::optim::Adam;
use crate::seed;
use crate::tensor::Tensor;

pub const DEFAULT_EPISODES: usize = 2000;
pub const DEFAULT_LR: f64 = 0.001;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;
pub const DEFAULT_QUERY: usize = 15;

pub const LOG_HEADER: &str = "episode,bhs,cce,rec,total,acc,ms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Episode shape; the seed field is replaced per episode.
    pub spec: EpisodeSpec,
    pub loss: LossConfig,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: DEFAULT_EPISODES,
            lr: DEFAULT_LR,
            adam_beta1: DEFAULT_BETA1,
            adam_beta2: DEFAULT_BETA2,
            adam_eps: DEFAULT_EPS,
            spec: EpisodeSpec::new(5, 1, DEFAULT_QUERY, 0),
            loss: LossConfig::benchmark(),
            checkpoint_every: 0,
            seed: 0,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> Adam {
        Adam::new(self.lr, self.adam_beta1, self.adam_beta2, self.adam_eps)
    }

    /// Seeds used for episode `t`: `(sampling, noise, augmentation)`.
    pub fn episode_seeds(&self, t: u64) -> (u64, u64, u64) {
        (
            seed::derive(self.seed, &[seed::EPISODE, t]),
            seed::derive(self.seed, &[seed::NOISE, t]),
            seed::derive(self.seed, &[seed::AUGMENT, t]),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::contract("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(Error::contract("Adam needs betas in [0, 1) and eps > 0"));
        }
        self.spec.validate()?;
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub episode: u64,
    pub bhs: f64,
    pub cce: f64,
    pub rec: f64,
    pub total: f64,
    pub acc: f64,
    pub ms: f64,
}

impl TrainLogRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.episode, self.bhs, self.cce, self.rec, self.total, self.acc, self.ms
        )
    }
}

pub fn log_csv(records: &[TrainLogRecord]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Loss terms of one episode evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub bhs: f64,
    pub cce: f64,
    pub rec: f64,
    pub total: f64,
    pub acc: f64,
}

fn augmented(episode: &Episode, augment_seed: Option<u64>) -> Result<Vec<Tensor>> {
    let all = episode.support.iter().chain(&episode.query);
    match augment_seed {
        None => Ok(all.map(|i| i.image.clone()).collect()),
        Some(s) => {
            let mut rng = seed::rng(s, &[]);
            all.map(|i| episodes::augment(&i.image, &mut rng)).collect()
        }
    }
}

/// Loss terms and parameter gradients for one episode with fixed noise.
///
/// Every image is encoded once; `z = μ + ζ⊙σ` feeds only the decoder, while
/// scoring uses the encoded distributions themselves.
pub fn episode_gradients(
    model: &EncoderModel,
    episode: &Episode,
    loss: &LossConfig,
    noise_seed: u64,
    augment_seed: Option<u64>,
) -> Result<(LossTerms, Vec<Tensor>)> {
    let (terms, grads) = evaluate(model, episode, loss, noise_seed, augment_seed, true, 0)?;
    Ok((terms, grads.expect("gradients requested")))
}

/// Loss terms only, with the same noise draws `episode_gradients` would use.
pub fn episode_loss(
    model: &EncoderModel,
    episode: &Episode,
    loss: &LossConfig,
    noise_seed: u64,
    augment_seed: Option<u64>,
) -> Result<LossTerms> {
    Ok(evaluate(model, episode, loss, noise_seed, augment_seed, false, 0)?.0)
}

fn evaluate(
    model: &EncoderModel,
    episode: &Episode,
    loss: &LossConfig,
    noise_seed: u64,
    augment_seed: Option<u64>,
    with_grads: bool,
    index: usize,
) -> Result<(LossTerms, Option<Vec<Tensor>>)> {
    loss.validate()?;
    let ns = episode.support.len();
    let nq = episode.query.len();
    if ns == 0 || nq == 0 {
        return Err(Error::contract("episode needs support and query samples"));
    }
    let images = augmented(episode, augment_seed)?;
    let refs: Vec<&Tensor> = images.iter().collect();
    let batch = model.batch(&refs)?;
    let n = ns + nq;
    let d = model.latent_dim();
    let eps = Tensor::new(vec![n, d], NoiseSource::new(noise_seed).draw(n * d))?;

    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, batch, DecodeFrom::Sample(&eps))?;
    let recon = fwd.recon.expect("decoder requested");
    let gaussians = split_gaussians(tape.value(fwd.mean), tape.value(fwd.log_std))?;
    let (support, query) = gaussians.split_at(ns);
    let head = episode_head(
        support,
        &episode.support_labels(),
        query,
        &episode.query_labels(),
        episode.k(),
        loss,
    )?;

    let per: usize = model.arch().image_shape().iter().product();
    let target = |range: std::ops::Range<usize>| -> Result<Tensor> {
        let data: Vec<f64> = images[range.clone()].iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new(vec![range.len() * per], data)
    };
    let rec_s = tape.l1_mean(recon, target(0..ns)?, 0, ns)?;
    let rec_q = tape.l1_mean(recon, target(ns..n)?, ns, n)?;
    let rec = 0.5 * (tape.value(rec_s).data()[0] + tape.value(rec_q).data()[0]);

    for (term, v) in [("bhs", head.bhs), ("cce", head.cce), ("rec", rec)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term, episode: index });
        }
    }
    let total = crate::losses::total_loss(head.bhs, head.cce, rec, loss);
    if !total.is_finite() {
        return Err(Error::NonFinite { term: "total", episode: index });
    }
    let correct = head.scores.predictions().iter().zip(episode.query_labels()).filter(|(p, y)| **p == *y).count();
    let terms = LossTerms { bhs: head.bhs, cce: head.cce, rec, total, acc: correct as f64 / nq as f64 };
    if !with_grads {
        return Ok((terms, None));
    }

    let rows = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Result<Tensor> {
        Tensor::new(vec![n, d], a.iter().chain(b).flatten().copied().collect())
    };
    let g = &head.grad;
    let mut seeds = vec![
        (fwd.mean, rows(&g.support_mean, &g.query_mean)?),
        (fwd.log_std, rows(&g.support_log_std, &g.query_log_std)?),
    ];
    let (_, _, w3) = loss.effective();
    if w3 != 0.0 {
        seeds.push((rec_s, Tensor::scalar(0.5 * w3)));
        seeds.push((rec_q, Tensor::scalar(0.5 * w3)));
    }
    let mut grads = tape.backward(seeds)?;
    let out: Vec<Tensor> = fwd
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    if out.iter().any(|t| !t.all_finite()) {
        return Err(Error::NonFinite { term: "gradient", episode: index });
    }
    Ok((terms, Some(out)))
}

/// One Adam update on `episode`.
pub fn train_step(
    model: &mut EncoderModel,
    adam: &mut Adam,
    episode: &Episode,
    cfg: &TrainConfig,
    index: u64,
) -> Result<TrainLogRecord> {
    let start = Instant::now();
    let (_, noise, aug) = cfg.episode_seeds(index);
    let aug = cfg.augment.then_some(aug);
    let (terms, grads) = evaluate(model, episode, &cfg.loss, noise, aug, true, index as usize)?;
    adam.step(model.params_mut().iter_mut().map(|p| &mut p.value), &grads.expect("gradients requested"))?;
    if model.params().iter().any(|p| !p.value.all_finite()) {
        return Err(Error::NonFinite { term: "parameter", episode: index as usize });
    }
    Ok(TrainLogRecord {
        episode: index,
        bhs: terms.bhs,
        cce: terms.cce,
        rec: terms.rec,
        total: terms.total,
        acc: terms.acc,
        ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Model, optimizer, and progress counter of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: EncoderModel,
    adam: Adam,
    cfg: TrainConfig,
    done: u64,
}

impl Trainer {
    pub fn new(model: EncoderModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = cfg.adam();
        Ok(Trainer { model, adam, cfg, done: 0 })
    }

    /// Continues from a checkpoint; without optimizer state the run restarts
    /// at episode 0 with fresh moments.
    pub fn resume(ckpt: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (adam, done) = match ckpt.optimizer {
            Some(state) => (state.adam, state.episodes_done),
            None => (cfg.adam(), 0),
        };
        Ok(Trainer { model: ckpt.model, adam, cfg, done })
    }

    pub fn model(&self) -> &EncoderModel {
        &self.model
    }

    pub fn into_model(self) -> EncoderModel {
        self.model
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn episodes_done(&self) -> u64 {
        self.done
    }

    pub fn sample(&self, ds: &LabeledDataset, index: u64) -> Result<Episode> {
        let (s, _, _) = self.cfg.episode_seeds(index);
        sample_episode(ds, &self.cfg.spec.with_seed(s))
    }

    pub fn step(&mut self, ds: &LabeledDataset) -> Result<TrainLogRecord> {
        let episode = self.sample(ds, self.done)?;
        let rec = train_step(&mut self.model, &mut self.adam, &episode, &self.cfg, self.done)?;
        self.done += 1;
        Ok(rec)
    }

    /// Trains until `cfg.episodes` episodes are done, calling `on_checkpoint`
    /// every `checkpoint_every` episodes.
    pub fn run(
        &mut self,
        ds: &LabeledDataset,
        mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<Vec<TrainLogRecord>> {
        let mut log = Vec::new();
        while self.done < self.cfg.episodes as u64 {
            log.push(self.step(ds)?);
            let every = self.cfg.checkpoint_every as u64;
            if every > 0 && self.done.is_multiple_of(every) {
                on_checkpoint(self)?;
            }
        }
        Ok(log)
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.model, Some((&self.adam, self.done)))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(path, &self.model, Some((&self.adam, self.done)))
    }
}

/// Runs `cfg.episodes` training steps over freshly sampled episodes.
pub fn fit(model: EncoderModel, ds: &LabeledDataset, cfg: &TrainConfig) -> Result<(EncoderModel, Vec<TrainLogRecord>)> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let log = trainer.run(ds, |_| Ok(()))?;
    Ok((trainer.into_model(), log))
}
