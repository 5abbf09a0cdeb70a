//! Datasets, meta-splits, and k-way N-shot episode sampling.

pub mod io;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Validation,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Base => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    /// `[C, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    items: Vec<Item>,
    class_names: Vec<String>,
    split: Split,
    by_class: Vec<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(items: Vec<Item>, class_names: Vec<String>, split: Split) -> Result<Self> {
        let mut by_class = vec![Vec::new(); class_names.len()];
        let mut shape: Option<Vec<usize>> = None;
        for (i, item) in items.iter().enumerate() {
            let slot = by_class.get_mut(item.class).ok_or_else(|| {
                Error::contract(format!("item {i} has class {} but only {} classes exist", item.class, class_names.len()))
            })?;
            slot.push(i);
            if item.image.shape().len() != 3 {
                return Err(Error::contract(format!("item {i} is not a [C,H,W] image")));
            }
            match &shape {
                Some(s) if s.as_slice() != item.image.shape() => {
                    return Err(Error::contract(format!("item {i} has shape {:?}, expected {s:?}", item.image.shape())))
                }
                None => shape = Some(item.image.shape().to_vec()),
                _ => {}
            }
            if item.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::contract(format!("item {i} has pixel values outside [0, 1]")));
            }
        }
        Ok(LabeledDataset { items, class_names, split, by_class })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn class_size(&self, class: usize) -> usize {
        self.by_class.get(class).map_or(0, Vec::len)
    }

    /// `[C, H, W]` of the stored images, if any.
    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.items.first().map(|i| {
            let s = i.image.shape();
            [s[0], s[1], s[2]]
        })
    }
}

/// Base / validation / test datasets of one source.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaSplit {
    pub base: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
}

impl MetaSplit {
    /// Class-disjoint split. Fails when a class name appears in both the base
    /// and test sets.
    pub fn disjoint(base: LabeledDataset, validation: LabeledDataset, test: LabeledDataset) -> Result<Self> {
        let base_names: BTreeSet<&String> = base.class_names.iter().collect();
        if let Some(shared) = test.class_names.iter().find(|n| base_names.contains(n)) {
            return Err(Error::contract(format!("class `{shared}` is in both the base and test splits")));
        }
        Ok(MetaSplit { base, validation, test })
    }

    /// Same class set in every split, samples partitioned per class.
    pub fn supervised(base: LabeledDataset, validation: LabeledDataset, test: LabeledDataset) -> Self {
        MetaSplit { base, validation, test }
    }

    pub fn get(&self, split: Split) -> &LabeledDataset {
        match split {
            Split::Base => &self.base,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

/// How a directory's classes become splits.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitAssignment {
    /// Explicit class-name lists; base and test must be disjoint.
    Classes { base: Vec<String>, validation: Vec<String>, test: Vec<String> },
    /// Every class in every split; each class's files partitioned
    /// train:valid:test, remainder to train.
    Ratio { train: usize, valid: usize, test: usize },
}

impl SplitAssignment {
    pub const AIDER_RATIO: SplitAssignment = SplitAssignment::Ratio { train: 4, valid: 1, test: 2 };
}

/// `(train, valid, test)` counts for `n` items under a ratio.
pub fn ratio_counts(n: usize, train: usize, valid: usize, test: usize) -> (usize, usize, usize) {
    let total = train + valid + test;
    if total == 0 {
        return (n, 0, 0);
    }
    let v = n * valid / total;
    let t = n * test / total;
    (n - v - t, v, t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    pub side: usize,
    pub channels: usize,
}

fn read_image_file(path: &Path, opts: &LoadOptions) -> Result<Vec<Tensor>> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let raw = match ext.as_deref() {
        Some("pgm" | "ppm" | "pnm") => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            vec![io::decode_pnm(&bytes, path)?]
        }
        Some("bhft") => io::read_bhft(path)?,
        _ => return Ok(Vec::new()),
    };
    raw.into_iter()
        .map(|img| {
            let img = io::convert_channels(img, opts.channels).map_err(|e| Error::format(path, e.to_string()))?;
            let img = io::resize_nearest(&img, opts.side);
            if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::format(path, "pixel values must lie in [0, 1]"));
            }
            Ok(img)
        })
        .collect()
}

/// Reads `<root>/<class>/<file>` into per-class image lists, classes and
/// files in lexicographic order.
pub fn read_class_directory(root: &Path, opts: &LoadOptions) -> Result<Vec<(String, Vec<Tensor>)>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::format(root, "no class subdirectories found"));
    }
    let mut classes = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut images = Vec::new();
        for f in files {
            images.extend(read_image_file(&f, opts)?);
        }
        if images.is_empty() {
            return Err(Error::format(&dir, "class directory contains no images"));
        }
        classes.push((name, images));
    }
    Ok(classes)
}

fn dataset_from(classes: &[(String, Vec<Tensor>)], split: Split) -> Result<LabeledDataset> {
    let mut items = Vec::new();
    let mut names = Vec::new();
    for (id, (name, images)) in classes.iter().enumerate() {
        names.push(name.clone());
        items.extend(images.iter().map(|img| Item { image: img.clone(), class: id }));
    }
    LabeledDataset::new(items, names, split)
}

/// Loads a class-folder image tree and partitions it into meta-splits.
pub fn load_image_directory(root: &Path, assignment: &SplitAssignment, opts: &LoadOptions) -> Result<MetaSplit> {
    let classes = read_class_directory(root, opts)?;
    split_classes(classes, assignment)
}

pub fn split_classes(classes: Vec<(String, Vec<Tensor>)>, assignment: &SplitAssignment) -> Result<MetaSplit> {
    match assignment {
        SplitAssignment::Classes { base, validation, test } => {
            let base_set: BTreeSet<&String> = base.iter().collect();
            if let Some(shared) = test.iter().find(|n| base_set.contains(n)) {
                return Err(Error::contract(format!("class `{shared}` is in both the base and test lists")));
            }
            let pick = |names: &[String], split: Split| -> Result<LabeledDataset> {
                let chosen = names
                    .iter()
                    .map(|n| {
                        classes
                            .iter()
                            .find(|(c, _)| c == n)
                            .cloned()
                            .ok_or_else(|| Error::config(format!("dataset.{split:?}_classes").to_lowercase(), format!("unknown class `{n}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                dataset_from(&chosen, split)
            };
            MetaSplit::disjoint(pick(base, Split::Base)?, pick(validation, Split::Validation)?, pick(test, Split::Test)?)
        }
        &SplitAssignment::Ratio { train, valid, test } => {
            let mut parts: [Vec<(String, Vec<Tensor>)>; 3] = Default::default();
            for (name, images) in classes {
                let (a, b, _) = ratio_counts(images.len(), train, valid, test);
                parts[0].push((name.clone(), images[..a].to_vec()));
                parts[1].push((name.clone(), images[a..a + b].to_vec()));
                parts[2].push((name, images[a + b..].to_vec()));
            }
            Ok(MetaSplit::supervised(
                dataset_from(&parts[0], Split::Base)?,
                dataset_from(&parts[1], Split::Validation)?,
                dataset_from(&parts[2], Split::Test)?,
            ))
        }
    }
}

/// Sidecar written next to `dataset.bhft`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BhftManifest {
    pub classes: Vec<String>,
    /// Class index of each image in file order.
    pub labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthParams>,
}

pub const BHFT_DATA_FILE: &str = "dataset.bhft";
pub const BHFT_MANIFEST_FILE: &str = "manifest.json";

/// Writes `dir/dataset.bhft` and `dir/manifest.json`.
pub fn write_bhft_dataset(dir: &Path, ds: &LabeledDataset, synth: Option<&SynthParams>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let images: Vec<&Tensor> = ds.items.iter().map(|i| &i.image).collect();
    io::write_bhft(&dir.join(BHFT_DATA_FILE), &images)?;
    let manifest = BhftManifest {
        classes: ds.class_names.clone(),
        labels: ds.items.iter().map(|i| i.class).collect(),
        synth: synth.cloned(),
    };
    let path = dir.join(BHFT_MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Reads a `dataset.bhft` + `manifest.json` pair into per-class image lists.
pub fn read_bhft_dataset(dir: &Path, opts: &LoadOptions) -> Result<Vec<(String, Vec<Tensor>)>> {
    let mpath = dir.join(BHFT_MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: BhftManifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let dpath = dir.join(BHFT_DATA_FILE);
    let images = read_image_file(&dpath, opts)?;
    if images.len() != manifest.labels.len() {
        return Err(Error::format(
            &mpath,
            format!("{} labels for {} images", manifest.labels.len(), images.len()),
        ));
    }
    let mut classes: Vec<(String, Vec<Tensor>)> = manifest.classes.iter().map(|c| (c.clone(), Vec::new())).collect();
    for (img, &label) in images.into_iter().zip(&manifest.labels) {
        classes
            .get_mut(label)
            .ok_or_else(|| Error::format(&mpath, format!("label {label} has no class name")))?
            .1
            .push(img);
    }
    if let Some((name, _)) = classes.iter().find(|(_, imgs)| imgs.is_empty()) {
        return Err(Error::format(&mpath, format!("class `{name}` has no images")));
    }
    Ok(classes)
}

pub fn load_bhft_dataset(dir: &Path, assignment: &SplitAssignment, opts: &LoadOptions) -> Result<MetaSplit> {
    split_classes(read_bhft_dataset(dir, opts)?, assignment)
}

/// Parameters of the synthetic blob generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_classes: usize,
    pub per_class: usize,
    pub side: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthParams {
    pub fn new(n_classes: usize, per_class: usize, side: usize, noise_sigma: f64, seed: u64) -> Self {
        SynthParams { n_classes, per_class, side, channels: 1, noise_sigma, seed }
    }
}

const BLOBS_PER_TEMPLATE: usize = 3;
/// Reference noise level for the template separation check.
const SEPARATION_SIGMA: f64 = 0.05;
const SEPARATION_FACTOR: f64 = 5.0;
const MAX_TEMPLATE_ATTEMPTS: u64 = 64;

fn draw_template(rng: &mut impl Rng, side: usize, channels: usize) -> Tensor {
    let mut data = vec![0.0; channels * side * side];
    for ch in 0..channels {
        let background = rng.random_range(0.2..0.8);
        let plane = &mut data[ch * side * side..(ch + 1) * side * side];
        plane.fill(background);
        for _ in 0..BLOBS_PER_TEMPLATE {
            let cy = rng.random_range(0.0..side as f64);
            let cx = rng.random_range(0.0..side as f64);
            let radius = rng.random_range(side as f64 / 8.0..side as f64 / 3.0);
            let amp = rng.random_range(0.4..0.9) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            for y in 0..side {
                for x in 0..side {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    plane[y * side + x] += amp * (-d2 / (2.0 * radius * radius)).exp();
                }
            }
        }
        for v in plane.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![channels, side, side], data).expect("sized above")
}

fn l2(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean pairwise L2 distance between templates.
pub fn mean_template_distance(templates: &[Tensor]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..templates.len() {
        for j in i + 1..templates.len() {
            total += l2(&templates[i], &templates[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Class templates for `(seed, n_classes, side, channels)`. Redrawn until the
/// mean inter-template distance exceeds five times the expected norm of
/// σ = 0.05 pixel noise.
pub fn synth_templates(params: &SynthParams) -> Vec<Tensor> {
    let pixels = (params.channels * params.side * params.side) as f64;
    let needed = SEPARATION_FACTOR * SEPARATION_SIGMA * pixels.sqrt();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    for attempt in 0..MAX_TEMPLATE_ATTEMPTS {
        let mut rng = seed::rng(params.seed, &[seed::TEMPLATE, attempt]);
        let templates: Vec<Tensor> =
            (0..params.n_classes).map(|_| draw_template(&mut rng, params.side, params.channels)).collect();
        let dist = mean_template_distance(&templates);
        if dist > needed {
            return templates;
        }
        if best.as_ref().is_none_or(|(d, _)| dist > *d) {
            best = Some((dist, templates));
        }
    }
    best.map(|(_, t)| t).unwrap_or_default()
}

fn synth_split(params: &SynthParams, split: Split) -> Result<LabeledDataset> {
    if params.n_classes < 2 {
        return Err(Error::contract("synthetic data needs at least 2 classes"));
    }
    if params.side == 0 || params.channels == 0 {
        return Err(Error::contract("synthetic images need a positive size"));
    }
    let templates = synth_templates(params);
    let mut items = Vec::with_capacity(params.n_classes * params.per_class);
    for (class, template) in templates.iter().enumerate() {
        let mut rng = seed::rng(params.seed, &[seed::SAMPLE, split.tag(), class as u64]);
        for _ in 0..params.per_class {
            let data = template
                .data()
                .iter()
                .map(|v| {
                    let n: f64 = rng.sample(StandardNormal);
                    (v + params.noise_sigma * n).clamp(0.0, 1.0)
                })
                .collect();
            let image = Tensor::new(template.shape().to_vec(), data)?;
            items.push(Item { image, class });
        }
    }
    let names = (0..params.n_classes).map(|c| format!("blob{c:02}")).collect();
    LabeledDataset::new(items, names, split)
}

/// Seeded synthetic dataset: per-class template plus Gaussian pixel noise.
pub fn synth_blobs(params: &SynthParams) -> Result<LabeledDataset> {
    synth_split(params, Split::Base)
}

/// Three synthetic splits sharing templates with independent sample noise.
pub fn synth_meta_split(params: &SynthParams) -> Result<MetaSplit> {
    Ok(MetaSplit::supervised(
        synth_split(params, Split::Base)?,
        synth_split(params, Split::Validation)?,
        synth_split(params, Split::Test)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub k: usize,
    pub n_shot: usize,
    pub n_query: usize,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn new(k: usize, n_shot: usize, n_query: usize, seed: u64) -> Self {
        EpisodeSpec { k, n_shot, n_query, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::contract("episodes need at least 2 ways"));
        }
        if self.n_shot == 0 || self.n_query == 0 {
            return Err(Error::contract("episodes need at least one shot and one query per class"));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        EpisodeSpec { seed, ..self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeItem {
    pub image: Tensor,
    /// Local class index in `0..k`.
    pub label: usize,
    /// Index of the sample in the source dataset.
    pub source: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
    /// Local class index → dataset class id.
    pub class_map: Vec<usize>,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.class_map.len()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|i| i.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|i| i.label).collect()
    }
}

/// Draws one episode: `k` classes without replacement, then
/// `n_shot + n_query` distinct samples per class (shots first).
pub fn sample_episode(ds: &LabeledDataset, spec: &EpisodeSpec) -> Result<Episode> {
    spec.validate()?;
    if ds.n_classes() < spec.k {
        return Err(Error::InsufficientData(format!(
            "{}-way episodes need {} classes, dataset has {}",
            spec.k,
            spec.k,
            ds.n_classes()
        )));
    }
    let mut rng = seed::rng(spec.seed, &[seed::EPISODE]);
    let classes = sample_indices(&mut rng, ds.n_classes(), spec.k).into_vec();
    let per = spec.n_shot + spec.n_query;
    let mut support = Vec::with_capacity(spec.k * spec.n_shot);
    let mut query = Vec::with_capacity(spec.k * spec.n_query);
    let mut picks = Vec::with_capacity(spec.k);
    for &class in &classes {
        let pool = &ds.by_class[class];
        if pool.len() < per {
            return Err(Error::InsufficientData(format!(
                "class `{}` has {} samples, episode needs {per}",
                ds.class_names[class],
                pool.len()
            )));
        }
        picks.push(sample_indices(&mut rng, pool.len(), per).into_iter().map(|i| pool[i]).collect::<Vec<_>>());
    }
    for (label, chosen) in picks.iter().enumerate() {
        for (j, &src) in chosen.iter().enumerate() {
            let item = EpisodeItem { image: ds.items[src].image.clone(), label, source: src };
            if j < spec.n_shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    // Class-major order for both sets.
    query.sort_by_key(|i| i.label);
    Ok(Episode { support, query, class_map: classes })
}

/// The random choices of one augmentation call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentPlan {
    pub hflip: bool,
    pub vflip: bool,
    /// Quarter turns counter-clockwise, 1..=3.
    pub quarter_turns: Option<u8>,
}

impl AugmentPlan {
    pub const IDENTITY: AugmentPlan = AugmentPlan { hflip: false, vflip: false, quarter_turns: None };

    /// Each transform independently with probability one half.
    pub fn draw(rng: &mut impl Rng) -> Self {
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let quarter_turns = rng.random_bool(0.5).then(|| rng.random_range(1..=3u8));
        AugmentPlan { hflip, vflip, quarter_turns }
    }
}

pub fn hflip(image: &Tensor) -> Tensor {
    let [c, h, w] = [image.shape()[0], image.shape()[1], image.shape()[2]];
    let mut out = image.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.data_mut()[(ch * h + y) * w + x] = image.data()[(ch * h + y) * w + (w - 1 - x)];
            }
        }
    }
    out
}

pub fn vflip(image: &Tensor) -> Tensor {
    let [c, h, w] = [image.shape()[0], image.shape()[1], image.shape()[2]];
    let mut out = image.clone();
    for ch in 0..c {
        for y in 0..h {
            let (dst, src) = ((ch * h + y) * w, (ch * h + (h - 1 - y)) * w);
            out.data_mut()[dst..dst + w].copy_from_slice(&image.data()[src..src + w]);
        }
    }
    out
}

/// 90° counter-clockwise rotation of a square image.
pub fn rotate90(image: &Tensor) -> Result<Tensor> {
    let [c, h, w] = [image.shape()[0], image.shape()[1], image.shape()[2]];
    if h != w {
        return Err(Error::contract(format!("rotation needs a square image, got {h}×{w}")));
    }
    let mut out = image.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.data_mut()[(ch * h + (w - 1 - x)) * w + y] = image.data()[(ch * h + y) * w + x];
            }
        }
    }
    Ok(out)
}

pub fn apply_augment(image: &Tensor, plan: &AugmentPlan) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::contract(format!("augmentation needs a square [C,H,W] image, got {s:?}")));
    }
    let mut out = image.clone();
    if plan.hflip {
        out = hflip(&out);
    }
    if plan.vflip {
        out = vflip(&out);
    }
    for _ in 0..plan.quarter_turns.unwrap_or(0) {
        out = rotate90(&out)?;
    }
    Ok(out)
}

/// Random flips and quarter-turn rotation, each applied with probability ½.
pub fn augment(image: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    apply_augment(image, &AugmentPlan::draw(rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params(noise: f64, seed: u64) -> SynthParams {
        SynthParams::new(5, 20, 16, noise, seed)
    }

    #[test]
    fn synthetic_data_is_deterministic() {
        let a = synth_blobs(&small_params(0.05, 3)).unwrap();
        let b = synth_blobs(&small_params(0.05, 3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert_eq!(a.n_classes(), 5);
        let c = synth_blobs(&small_params(0.05, 4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_samples_equal_their_template() {
        let ds = synth_blobs(&small_params(0.0, 8)).unwrap();
        for class in 0..5 {
            let members: Vec<&Item> = ds.items().iter().filter(|i| i.class == class).collect();
            assert!(members.windows(2).all(|w| w[0].image == w[1].image));
        }
    }

    #[test]
    fn templates_are_well_separated() {
        let params = small_params(0.05, 11);
        let templates = synth_templates(&params);
        let ds = synth_blobs(&params).unwrap();
        // Measured intra-class deviation: RMS distance of samples to their template.
        let intra = (ds
            .items()
            .iter()
            .map(|i| l2(&i.image, &templates[i.class]).powi(2))
            .sum::<f64>()
            / ds.len() as f64)
            .sqrt();
        assert!(mean_template_distance(&templates) > 5.0 * intra);
    }

    #[test]
    fn synthetic_needs_two_classes() {
        assert!(synth_blobs(&SynthParams::new(1, 3, 8, 0.1, 0)).is_err());
    }

    #[test]
    fn episode_cardinalities() {
        let ds = synth_blobs(&SynthParams::new(6, 20, 8, 0.05, 1)).unwrap();
        let ep = sample_episode(&ds, &EpisodeSpec::new(5, 1, 15, 42)).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 75);
        let support: BTreeSet<usize> = ep.support.iter().map(|i| i.source).collect();
        assert!(ep.query.iter().all(|q| !support.contains(&q.source)));
        assert_eq!(sample_episode(&ds, &EpisodeSpec::new(5, 1, 15, 42)).unwrap(), ep);
        assert_ne!(sample_episode(&ds, &EpisodeSpec::new(5, 1, 15, 43)).unwrap(), ep);
    }

    #[test]
    fn insufficient_data_names_the_class() {
        let ds = synth_blobs(&SynthParams::new(3, 4, 8, 0.05, 1)).unwrap();
        assert!(matches!(sample_episode(&ds, &EpisodeSpec::new(4, 1, 1, 0)), Err(Error::InsufficientData(_))));
        match sample_episode(&ds, &EpisodeSpec::new(2, 2, 3, 0)) {
            Err(Error::InsufficientData(msg)) => assert!(msg.contains("blob0")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(sample_episode(&ds, &EpisodeSpec::new(1, 1, 1, 0)).is_err());
    }

    #[test]
    fn ratio_split_counts() {
        assert_eq!(ratio_counts(7, 4, 1, 2), (4, 1, 2));
        assert_eq!(ratio_counts(10, 4, 1, 2), (7, 1, 2));
        assert_eq!(ratio_counts(40, 4, 1, 2), (24, 5, 11));
    }

    #[test]
    fn augmentation_group_laws() {
        let img = Tensor::new(vec![2, 3, 3], (0..18).map(|v| v as f64 / 18.0).collect()).unwrap();
        assert_eq!(apply_augment(&img, &AugmentPlan::IDENTITY).unwrap(), img);
        assert_eq!(hflip(&hflip(&img)), img);
        assert_eq!(vflip(&vflip(&img)), img);
        let mut r = img.clone();
        for _ in 0..4 {
            r = rotate90(&r).unwrap();
        }
        assert_eq!(r, img);
        assert_ne!(rotate90(&img).unwrap(), img);
        let rect = Tensor::zeros(&[1, 2, 3]);
        assert!(apply_augment(&rect, &AugmentPlan::IDENTITY).is_err());
        let mut rng = seed::rng(0, &[]);
        for _ in 0..20 {
            assert_eq!(augment(&img, &mut rng).unwrap().shape(), img.shape());
        }
    }

    #[test]
    fn disjoint_split_rejects_overlap() {
        let ds = |names: &[&str]| LabeledDataset::new(Vec::new(), names.iter().map(|s| s.to_string()).collect(), Split::Base).unwrap();
        assert!(MetaSplit::disjoint(ds(&["a", "b"]), ds(&[]), ds(&["b", "c"])).is_err());
        assert!(MetaSplit::disjoint(ds(&["a"]), ds(&[]), ds(&["c"])).is_ok());
    }

    #[test]
    fn dataset_validation() {
        let good = Item { image: Tensor::zeros(&[1, 2, 2]), class: 0 };
        assert!(LabeledDataset::new(vec![good.clone()], vec!["a".into()], Split::Base).is_ok());
        assert!(LabeledDataset::new(vec![good.clone()], vec![], Split::Base).is_err());
        let bright = Item { image: Tensor::filled(&[1, 2, 2], 1.5), class: 0 };
        assert!(LabeledDataset::new(vec![bright], vec!["a".into()], Split::Base).is_err());
        let other = Item { image: Tensor::zeros(&[1, 3, 3]), class: 0 };
        assert!(LabeledDataset::new(vec![good, other], vec!["a".into()], Split::Base).is_err());
    }
}
