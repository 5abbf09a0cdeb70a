//! Evaluation: query accuracy over repeated episodes, confusion matrices, and
//! the Fréchet distance between embedding summaries.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::distributions::aggregate_prototype;
use crate::encoder::EncoderModel;
use crate::episodes::{sample_episode, Episode, EpisodeSpec, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::{score_queries, LossConfig};
use crate::seed;
use crate::tensor::Tensor;

pub const DEFAULT_RUNS: usize = 10;

/// Anything that labels the queries of an episode with local class indices.
pub trait EpisodeClassifier {
    fn predict(&self, episode: &Episode) -> Result<Vec<usize>>;
}

/// Prototype scoring on encoder distributions, no sampling noise.
impl EpisodeClassifier for EncoderModel {
    fn predict(&self, episode: &Episode) -> Result<Vec<usize>> {
        let support: Vec<&Tensor> = episode.support.iter().map(|i| &i.image).collect();
        let query: Vec<&Tensor> = episode.query.iter().map(|i| &i.image).collect();
        let s = self.encode_batch(&support)?;
        let q = self.encode_batch(&query)?;
        let mut prototypes = Vec::with_capacity(episode.k());
        for c in 0..episode.k() {
            let members: Vec<_> = s.iter().zip(&episode.support).filter(|(_, i)| i.label == c).map(|(g, _)| g.clone()).collect();
            prototypes.push(aggregate_prototype(&members)?);
        }
        Ok(score_queries(&q, &prototypes, &LossConfig::default())?.predictions())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_aa: f64,
    pub std_aa: f64,
    pub per_run_aa: Vec<f64>,
    /// Row-normalised, indexed by dataset class id.
    pub confusion: Vec<Vec<f64>>,
    pub per_class_acc: Vec<f64>,
    pub class_names: Vec<String>,
    pub runs: usize,
    pub spec: EpisodeSpec,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for n in &self.class_names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            out.push_str(name);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Diagonal of the row-normalised confusion matrix.
pub fn confusion_row_report(report: &EvalReport) -> Vec<f64> {
    report.confusion.iter().enumerate().map(|(i, row)| row[i]).collect()
}

fn normalise_rows(counts: &[Vec<u64>]) -> Vec<Vec<f64>> {
    counts
        .iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                vec![0.0; row.len()]
            } else {
                row.iter().map(|&c| c as f64 / total as f64).collect()
            }
        })
        .collect()
}

/// `n_runs` episodes from `ds`; run `r` uses seed `derive(seed, [EVAL, r])`.
pub fn evaluate(
    classifier: &impl EpisodeClassifier,
    ds: &LabeledDataset,
    spec: &EpisodeSpec,
    n_runs: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_runs == 0 {
        return Err(Error::contract("evaluation needs at least one run"));
    }
    let c = ds.n_classes();
    let mut counts = vec![vec![0u64; c]; c];
    let mut per_run = Vec::with_capacity(n_runs);
    for r in 0..n_runs {
        let episode = sample_episode(ds, &spec.with_seed(seed::derive(seed, &[seed::EVAL, r as u64])))?;
        let predictions = classifier.predict(&episode)?;
        if predictions.len() != episode.query.len() || predictions.iter().any(|&p| p >= episode.k()) {
            return Err(Error::contract("classifier returned malformed predictions"));
        }
        let mut correct = 0usize;
        for (q, &p) in episode.query.iter().zip(&predictions) {
            correct += usize::from(q.label == p);
            counts[episode.class_map[q.label]][episode.class_map[p]] += 1;
        }
        per_run.push(correct as f64 / episode.query.len() as f64);
    }
    let mean = per_run.iter().sum::<f64>() / n_runs as f64;
    let std = if n_runs > 1 {
        (per_run.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n_runs - 1) as f64).sqrt()
    } else {
        0.0
    };
    let confusion = normalise_rows(&counts);
    let mut report = EvalReport {
        mean_aa: mean,
        std_aa: std,
        per_run_aa: per_run,
        confusion,
        per_class_acc: Vec::new(),
        class_names: ds.class_names().to_vec(),
        runs: n_runs,
        spec: *spec,
    };
    report.per_class_acc = confusion_row_report(&report);
    Ok(report)
}

/// Mean and covariance of a set of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;
const SQRT_TOL: f64 = 1e-6;
const RESULT_TOL: f64 = 1e-8;
const COV_RIDGE: f64 = 1e-6;

impl GaussianSummary {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::contract(format!("covariance must be {d}×{d}")));
        }
        if (0..d).any(|i| (0..i).any(|j| (cov[(i, j)] - cov[(j, i)]).abs() > SYMMETRY_TOL)) {
            return Err(Error::contract("covariance is not symmetric"));
        }
        if d > 0 && SymmetricEigen::new(cov.clone()).eigenvalues.min() < -PSD_TOL {
            return Err(Error::contract("covariance is not positive semidefinite"));
        }
        Ok(GaussianSummary { mean: DVector::from_vec(mean), cov })
    }

    /// Sample mean and covariance (denominator `max(n−1, 1)`), with a
    /// `1e−6·I` ridge when there are no more samples than dimensions.
    pub fn from_samples(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map(Vec::len).ok_or_else(|| Error::contract("empty embedding set"))?;
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::contract("embeddings have inconsistent dimensions"));
        }
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = x.row_mean().transpose();
        let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let mut cov = centred.transpose() * &centred / (n.saturating_sub(1).max(1)) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        if n <= d {
            cov += DMatrix::identity(d, d) * COV_RIDGE;
        }
        GaussianSummary::new(mean.iter().copied().collect(), cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Eigen-based square root of a symmetric PSD matrix.
fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().any(|&l| l < -SQRT_TOL) {
        return Err(Error::contract("matrix square root of a non-PSD matrix"));
    }
    let roots = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * roots * eig.eigenvectors.transpose())
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^{1/2})`, with the cross term
/// taken as `Tr √(√Σ_a Σ_b √Σ_a)`.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::contract(format!("dimension mismatch: {} vs {}", a.dim(), b.dim())));
    }
    if a == b {
        return Ok(0.0);
    }
    let shift = (&a.mean - &b.mean).norm_squared();
    let ra = sym_sqrt(&a.cov)?;
    let cross = sym_sqrt(&(&ra * &b.cov * &ra))?;
    let fd = shift + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    if fd < -RESULT_TOL {
        return Err(Error::contract(format!("Fréchet distance came out negative ({fd})")));
    }
    Ok(fd.max(0.0))
}

/// Fréchet distance between encoder-mean embeddings of two image sets.
pub fn embedding_fid(model: &EncoderModel, real: &[&Tensor], generated: &[&Tensor]) -> Result<f64> {
    if real.is_empty() || generated.is_empty() {
        return Err(Error::contract("embedding sets must be non-empty"));
    }
    let embed = |set: &[&Tensor]| -> Result<GaussianSummary> {
        let rows: Vec<Vec<f64>> = model.encode_batch(set)?.into_iter().map(|g| g.mean().to_vec()).collect();
        GaussianSummary::from_samples(&rows)
    };
    frechet_distance(&embed(real)?, &embed(generated)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{synth_blobs, SynthParams};

    struct Oracle;
    impl EpisodeClassifier for Oracle {
        fn predict(&self, episode: &Episode) -> Result<Vec<usize>> {
            Ok(episode.query_labels())
        }
    }

    struct Constant;
    impl EpisodeClassifier for Constant {
        fn predict(&self, episode: &Episode) -> Result<Vec<usize>> {
            Ok(vec![0; episode.query.len()])
        }
    }

    /// Pseudo-random labels from the query sample ids.
    struct Scrambled;
    impl EpisodeClassifier for Scrambled {
        fn predict(&self, episode: &Episode) -> Result<Vec<usize>> {
            let salt = episode.class_map.iter().fold(0u64, |a, &c| a * 31 + c as u64);
            Ok(episode
                .query
                .iter()
                .map(|q| (seed::derive(salt, &[q.source as u64]) % episode.k() as u64) as usize)
                .collect())
        }
    }

    fn blobs() -> LabeledDataset {
        synth_blobs(&SynthParams::new(5, 30, 8, 0.05, 4)).unwrap()
    }

    #[test]
    fn perfect_oracle_gives_identity_confusion() {
        let r = evaluate(&Oracle, &blobs(), &EpisodeSpec::new(5, 1, 15, 0), DEFAULT_RUNS, 1).unwrap();
        assert_eq!(r.mean_aa, 1.0);
        assert_eq!(r.std_aa, 0.0);
        assert_eq!(r.runs, 10);
        for (i, row) in r.confusion.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(confusion_row_report(&r), vec![1.0; 5]);
    }

    #[test]
    fn constant_predictor_scores_one_over_k() {
        let r = evaluate(&Constant, &blobs(), &EpisodeSpec::new(5, 1, 6, 0), 4, 2).unwrap();
        assert!(r.per_run_aa.iter().all(|&a| a == 0.2));
    }

    #[test]
    fn random_predictor_is_near_chance() {
        let runs = 40;
        let r = evaluate(&Scrambled, &blobs(), &EpisodeSpec::new(5, 1, 15, 0), runs, 3).unwrap();
        let n = (runs * 75) as f64;
        let se = (0.2 * 0.8 / n).sqrt();
        assert!((r.mean_aa - 0.2).abs() < 3.0 * se, "mean_aa {}", r.mean_aa);
        for row in &r.confusion {
            let s: f64 = row.iter().sum();
            assert!(s == 0.0 || (s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_confusion_rows() {
        let counts = vec![vec![3u64; 5]; 5];
        let report = EvalReport {
            mean_aa: 0.2,
            std_aa: 0.0,
            per_run_aa: vec![0.2],
            confusion: normalise_rows(&counts),
            per_class_acc: vec![],
            class_names: (0..5).map(|i| i.to_string()).collect(),
            runs: 1,
            spec: EpisodeSpec::new(5, 1, 15, 0),
        };
        assert!(confusion_row_report(&report).iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert_eq!(normalise_rows(&[vec![0, 0]]), vec![vec![0.0, 0.0]]);
    }

    fn summary(mean: &[f64], diag: &[f64]) -> GaussianSummary {
        GaussianSummary::new(mean.to_vec(), DMatrix::from_diagonal(&DVector::from_vec(diag.to_vec()))).unwrap()
    }

    #[test]
    fn frechet_reference_cases() {
        let a = summary(&[0.0], &[1.0]);
        assert_eq!(frechet_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(frechet_distance(&a, &summary(&[1.0], &[1.0])).unwrap(), 1.0);
        let fd = frechet_distance(&summary(&[0.0, 0.0], &[1.0, 4.0]), &summary(&[0.0, 0.0], &[4.0, 1.0])).unwrap();
        assert!((fd - 2.0).abs() < 1e-8);
        assert!(frechet_distance(&a, &summary(&[0.0, 0.0], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn frechet_matches_per_dimension_formula_for_diagonals() {
        let (ma, va): ([f64; 3], [f64; 3]) = ([0.3, -1.0, 2.0], [0.5, 2.0, 1.5]);
        let (mb, vb): ([f64; 3], [f64; 3]) = ([0.0, 0.5, 2.5], [1.5, 0.25, 3.0]);
        let expected: f64 = (0..3).map(|i| (ma[i] - mb[i]).powi(2) + va[i] + vb[i] - 2.0 * (va[i] * vb[i]).sqrt()).sum();
        let fd = frechet_distance(&summary(&ma, &va), &summary(&mb, &vb)).unwrap();
        assert!((fd - expected).abs() < 1e-10);
    }

    #[test]
    fn frechet_is_symmetric() {
        let rows_a: Vec<Vec<f64>> = (0..12).map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos(), i as f64 * 0.1]).collect();
        let rows_b: Vec<Vec<f64>> = (0..9).map(|i| vec![(i as f64).cos(), 0.3 * i as f64, (i as f64 * 1.3).sin()]).collect();
        let a = GaussianSummary::from_samples(&rows_a).unwrap();
        let b = GaussianSummary::from_samples(&rows_b).unwrap();
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-8);
        assert!(ab > 0.0);
    }

    #[test]
    fn summary_validation() {
        let mut asym = DMatrix::identity(2, 2);
        asym[(0, 1)] = 0.5;
        assert!(GaussianSummary::new(vec![0.0, 0.0], asym).is_err());
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.1]));
        assert!(GaussianSummary::new(vec![0.0, 0.0], neg).is_err());
        assert!(GaussianSummary::from_samples(&[]).is_err());
        let tiny = GaussianSummary::from_samples(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(tiny.cov[(0, 0)], COV_RIDGE);
    }
}
