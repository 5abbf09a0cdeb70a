//! Query scoring and the training objective.
//!
//! A query–prototype affinity is the Bhattacharyya coefficient
//! `s = BC = 1 − D_H²`. Substituting the coefficient term by the negative
//! half square of the Hellinger similarity turns the softmax argument into
//! `s (1 − 0.5 s) / τ`, normalised over the `k` class prototypes of the
//! episode.

use serde::{Deserialize, Serialize};

use crate::distributions::{
    aggregate_prototype_traced, bhattacharyya_coefficient, bhattacharyya_coefficient_grad, DiagGaussian,
    PrototypeTrace,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Softmax temperature used throughout training.
pub const DEFAULT_TAU: f64 = 0.01;
/// `(λ₁, λ₂, λ₃)` for benchmark-style training.
pub const BENCHMARK_WEIGHTS: (f64, f64, f64) = (0.7, 0.3, 1.0);
/// `(λ₁, λ₂, λ₃)` for the disaster-imagery setting.
pub const DISASTER_WEIGHTS: (f64, f64, f64) = (1.0, 0.5, 1.0);

/// Floor for reported probabilities, so every entry stays strictly positive.
const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub enable_bhs: bool,
    pub enable_cce: bool,
    pub enable_rec: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::benchmark()
    }
}

impl LossConfig {
    pub fn with_weights((lambda1, lambda2, lambda3): (f64, f64, f64)) -> Self {
        LossConfig {
            tau: DEFAULT_TAU,
            lambda1,
            lambda2,
            lambda3,
            enable_bhs: true,
            enable_cce: true,
            enable_rec: true,
        }
    }

    pub fn benchmark() -> Self {
        Self::with_weights(BENCHMARK_WEIGHTS)
    }

    pub fn disaster() -> Self {
        Self::with_weights(DISASTER_WEIGHTS)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::contract("temperature must be positive"));
        }
        let ws = [self.lambda1, self.lambda2, self.lambda3];
        if ws.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::contract("loss weights must be finite and non-negative"));
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err(Error::contract("at least one loss weight must be positive"));
        }
        Ok(())
    }

    /// Effective weights after the ablation switches.
    pub fn effective(&self) -> (f64, f64, f64) {
        let on = |flag: bool, w: f64| if flag { w } else { 0.0 };
        (on(self.enable_bhs, self.lambda1), on(self.enable_cce, self.lambda2), on(self.enable_rec, self.lambda3))
    }
}

/// Per-query class scores. All matrices are row-major `n_query × k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub n_query: usize,
    pub k: usize,
    /// Query–prototype Bhattacharyya coefficients.
    pub affinity: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    log_probs: Vec<f64>,
}

impl ScoreMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.probabilities[i * self.k..(i + 1) * self.k]
    }

    /// Argmax per row, ties broken toward the lowest class index.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.n_query)
            .map(|i| {
                let row = &self.logits[i * self.k..(i + 1) * self.k];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Builds a score matrix directly from logits.
    pub fn from_logits(n_query: usize, k: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != n_query * k {
            return Err(Error::contract("logit matrix has the wrong size"));
        }
        let mut probabilities = Vec::with_capacity(logits.len());
        let mut log_probs = Vec::with_capacity(logits.len());
        for row in logits.chunks(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            for &l in row {
                let lp = l - lse;
                log_probs.push(lp);
                probabilities.push(lp.exp().max(PROB_FLOOR));
            }
        }
        Ok(ScoreMatrix { n_query, k, affinity: Vec::new(), logits, probabilities, log_probs })
    }
}

/// Maps a coefficient to its softmax argument `s (1 − 0.5 s) / τ`.
#[inline]
pub fn affinity_logit(s: f64, tau: f64) -> f64 {
    s * (1.0 - 0.5 * s) / tau
}

pub fn score_queries(queries: &[DiagGaussian], prototypes: &[DiagGaussian], cfg: &LossConfig) -> Result<ScoreMatrix> {
    cfg.validate()?;
    let k = prototypes.len();
    if k < 2 {
        return Err(Error::contract(format!("scoring needs at least 2 prototypes, got {k}")));
    }
    let mut affinity = Vec::with_capacity(queries.len() * k);
    for q in queries {
        for p in prototypes {
            affinity.push(bhattacharyya_coefficient(q, p)?);
        }
    }
    let logits = affinity.iter().map(|&s| affinity_logit(s, cfg.tau)).collect();
    let mut m = ScoreMatrix::from_logits(queries.len(), k, logits)?;
    m.affinity = affinity;
    Ok(m)
}

fn check_labels(scores: &ScoreMatrix, labels: &[usize]) -> Result<()> {
    if labels.len() != scores.n_query {
        return Err(Error::contract(format!(
            "{} labels for {} queries",
            labels.len(),
            scores.n_query
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= scores.k) {
        return Err(Error::contract(format!("label {bad} out of range for {} classes", scores.k)));
    }
    if labels.is_empty() {
        return Err(Error::contract("no queries to score"));
    }
    Ok(())
}

/// Mean negative log-probability of the true class.
pub fn bhs_loss(scores: &ScoreMatrix, labels: &[usize]) -> Result<f64> {
    check_labels(scores, labels)?;
    let total: f64 = labels.iter().enumerate().map(|(i, &y)| -scores.log_probs[i * scores.k + y]).sum();
    Ok((total / labels.len() as f64).max(0.0))
}

/// Categorical cross-entropy against one-hot labels, on the same
/// probabilities as [`bhs_loss`].
pub fn cce_loss(scores: &ScoreMatrix, labels: &[usize]) -> Result<f64> {
    check_labels(scores, labels)?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..scores.k {
            let target = if j == y { 1.0 } else { 0.0 };
            if target != 0.0 {
                total -= target * scores.log_probs[i * scores.k + j];
            }
        }
    }
    Ok((total / labels.len() as f64).max(0.0))
}

/// Mean absolute difference over all elements.
pub fn rec_loss(original: &Tensor, reconstructed: &Tensor) -> Result<f64> {
    if original.shape() != reconstructed.shape() {
        return Err(Error::contract(format!(
            "reconstruction shape {:?} differs from original {:?}",
            reconstructed.shape(),
            original.shape()
        )));
    }
    if original.is_empty() {
        return Err(Error::contract("empty reconstruction"));
    }
    let sum: f64 = original.data().iter().zip(reconstructed.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / original.len() as f64)
}

pub fn total_loss(bhs: f64, cce: f64, rec: f64, cfg: &LossConfig) -> f64 {
    let (w1, w2, w3) = cfg.effective();
    let term = |w: f64, v: f64| if w == 0.0 { 0.0 } else { w * v };
    term(w1, bhs) + term(w2, cce) + term(w3, rec)
}

/// Gradients of the classification part of the objective with respect to
/// every support and query distribution parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub support_mean: Vec<Vec<f64>>,
    pub support_log_std: Vec<Vec<f64>>,
    pub query_mean: Vec<Vec<f64>>,
    pub query_log_std: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub prototypes: Vec<DiagGaussian>,
    pub scores: ScoreMatrix,
    pub bhs: f64,
    pub cce: f64,
    pub grad: HeadGrad,
}

/// Builds prototypes from `support`, scores `query`, and differentiates
/// `λ₁·ℓ_BHS + λ₂·ℓ_CCE` (after ablation switches) back to the inputs.
pub fn episode_head(
    support: &[DiagGaussian],
    support_labels: &[usize],
    query: &[DiagGaussian],
    query_labels: &[usize],
    k: usize,
    cfg: &LossConfig,
) -> Result<HeadOutput> {
    if support.len() != support_labels.len() {
        return Err(Error::contract("support labels do not match support set"));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in support_labels.iter().enumerate() {
        members
            .get_mut(y)
            .ok_or_else(|| Error::contract(format!("support label {y} out of range for {k} classes")))?
            .push(i);
    }
    let traces: Vec<PrototypeTrace> = members
        .iter()
        .enumerate()
        .map(|(c, idx)| {
            if idx.is_empty() {
                return Err(Error::contract(format!("class {c} has no support samples")));
            }
            let group: Vec<DiagGaussian> = idx.iter().map(|&i| support[i].clone()).collect();
            aggregate_prototype_traced(&group)
        })
        .collect::<Result<_>>()?;
    let prototypes: Vec<DiagGaussian> = traces.iter().map(|t| t.prototype.clone()).collect();
    let scores = score_queries(query, &prototypes, cfg)?;
    let bhs = bhs_loss(&scores, query_labels)?;
    let cce = cce_loss(&scores, query_labels)?;

    let (w1, w2, _) = cfg.effective();
    let weight = (w1 + w2) / query.len() as f64;
    let d = query.first().map_or(0, |q| q.dim());
    let mut grad = HeadGrad {
        support_mean: vec![vec![0.0; d]; support.len()],
        support_log_std: vec![vec![0.0; d]; support.len()],
        query_mean: vec![vec![0.0; d]; query.len()],
        query_log_std: vec![vec![0.0; d]; query.len()],
    };
    let mut proto_mean = vec![vec![0.0; d]; k];
    let mut proto_log_std = vec![vec![0.0; d]; k];
    if weight != 0.0 {
        for (i, q) in query.iter().enumerate() {
            for (j, p) in prototypes.iter().enumerate() {
                let target = if query_labels[i] == j { 1.0 } else { 0.0 };
                let d_logit = weight * (scores.probabilities[i * k + j] - target);
                let s = scores.affinity[i * k + j];
                let d_s = d_logit * (1.0 - s) / cfg.tau;
                if d_s == 0.0 {
                    continue;
                }
                let g = bhattacharyya_coefficient_grad(q, p)?;
                for t in 0..d {
                    grad.query_mean[i][t] += d_s * g.p_mean[t];
                    grad.query_log_std[i][t] += d_s * g.p_log_std[t];
                    proto_mean[j][t] += d_s * g.q_mean[t];
                    proto_log_std[j][t] += d_s * g.q_log_std[t];
                }
            }
        }
        for (c, trace) in traces.iter().enumerate() {
            let group: Vec<DiagGaussian> = members[c].iter().map(|&i| support[i].clone()).collect();
            for (&i, (dm, dl)) in members[c].iter().zip(trace.backward(&group, &proto_mean[c], &proto_log_std[c])) {
                grad.support_mean[i] = dm;
                grad.support_log_std[i] = dl;
            }
        }
    }
    Ok(HeadOutput { prototypes, scores, bhs, cce, grad })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(mean: &[f64], log_std: &[f64]) -> DiagGaussian {
        DiagGaussian::new(mean.to_vec(), log_std.to_vec()).unwrap()
    }

    #[test]
    fn equidistant_query_scores_uniformly() {
        let q = g(&[0.0], &[0.0]);
        let protos = [g(&[1.0], &[0.0]), g(&[-1.0], &[0.0]), g(&[1.0], &[0.0])];
        let m = score_queries(&[q], &protos, &LossConfig::default()).unwrap();
        for &p in m.row(0) {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_versus_distant_prototype() {
        let tau = 0.01;
        let gap = affinity_logit(1.0, tau) - affinity_logit(1e-12, tau);
        assert!((gap - 50.0).abs() < 1e-9);
        let q = g(&[0.0, 0.0], &[-1.0, -1.0]);
        let far = g(&[40.0, -40.0], &[-1.0, -1.0]);
        let m = score_queries(&[q.clone()], &[q, far], &LossConfig::default()).unwrap();
        assert!(m.row(0)[1] > 0.0 && m.row(0)[1] < 1e-21);
        assert_eq!(m.predictions(), vec![0]);
    }

    #[test]
    fn probability_increases_with_affinity() {
        let tau = 0.01;
        let other = [affinity_logit(0.3, tau), affinity_logit(0.6, tau)];
        let mut last = 0.0;
        for step in 1..100 {
            let s = step as f64 / 100.0;
            let m = ScoreMatrix::from_logits(1, 3, vec![affinity_logit(s, tau), other[0], other[1]]).unwrap();
            assert!(m.row(0)[0] > last);
            last = m.row(0)[0];
        }
    }

    #[test]
    fn scoring_needs_two_prototypes() {
        let q = g(&[0.0], &[0.0]);
        assert!(score_queries(&[q.clone()], &[q.clone()], &LossConfig::default()).is_err());
        let wide = g(&[0.0, 1.0], &[0.0, 0.0]);
        assert!(score_queries(&[q.clone()], &[wide.clone(), wide], &LossConfig::default()).is_err());
    }

    #[test]
    fn bhs_and_cce_reference_values() {
        let uniform = ScoreMatrix::from_logits(2, 5, vec![0.0; 10]).unwrap();
        let ln5 = 5f64.ln();
        assert!((bhs_loss(&uniform, &[0, 3]).unwrap() - ln5).abs() < 1e-12);
        assert!((cce_loss(&uniform, &[4, 1]).unwrap() - ln5).abs() < 1e-12);
        assert!((ln5 - 1.609_437_9).abs() < 1e-7);

        // True-class probabilities 0.5 and 0.25.
        let logits = vec![(0.5f64).ln(), (0.5f64).ln(), (0.25f64).ln(), (0.75f64).ln()];
        let m = ScoreMatrix::from_logits(2, 2, logits).unwrap();
        let want = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((bhs_loss(&m, &[0, 0]).unwrap() - want).abs() < 1e-12);
        assert!((want - 1.039_720_8).abs() < 1e-7);
        assert_eq!(bhs_loss(&m, &[0, 0]).unwrap(), cce_loss(&m, &[0, 0]).unwrap());

        let perfect = ScoreMatrix::from_logits(1, 2, vec![0.0, -1e4]).unwrap();
        assert_eq!(bhs_loss(&perfect, &[0]).unwrap(), 0.0);
        assert_eq!(cce_loss(&perfect, &[0]).unwrap(), 0.0);
        assert!(bhs_loss(&perfect, &[2]).is_err());
        assert!(bhs_loss(&perfect, &[0, 1]).is_err());
    }

    #[test]
    fn rec_loss_reference_values() {
        let a = Tensor::new(vec![2], vec![0.0, 0.5]).unwrap();
        let b = Tensor::new(vec![2], vec![0.25, 0.25]).unwrap();
        assert_eq!(rec_loss(&a, &a).unwrap(), 0.0);
        assert!((rec_loss(&a, &b).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(rec_loss(&Tensor::zeros(&[3, 4]), &Tensor::filled(&[3, 4], 1.0)).unwrap(), 1.0);
        assert!(rec_loss(&a, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn total_loss_weight_presets() {
        assert!((total_loss(1.0, 1.0, 1.0, &LossConfig::benchmark()) - 2.0).abs() < 1e-15);
        assert!((total_loss(1.0, 1.0, 1.0, &LossConfig::disaster()) - 2.5).abs() < 1e-15);
        let rec_only = LossConfig::with_weights((0.0, 0.0, 1.0));
        assert_eq!(total_loss(3.0, 4.0, 0.125, &rec_only), 0.125);
        let mut toggled = LossConfig::benchmark();
        toggled.enable_bhs = false;
        toggled.enable_cce = false;
        assert_eq!(total_loss(3.0, 4.0, 0.5, &toggled), 0.5);
        assert!(LossConfig::with_weights((0.0, 0.0, 0.0)).validate().is_err());
        let mut bad = LossConfig::default();
        bad.tau = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn coincident_prototypes_give_ln_k() {
        let p = g(&[0.2, -0.1], &[0.0, 0.1]);
        let q = g(&[1.0, 1.0], &[-0.5, 0.3]);
        let m = score_queries(&[q.clone(), p.clone()], &[p.clone(), p.clone(), p.clone(), p], &LossConfig::default()).unwrap();
        assert!((bhs_loss(&m, &[1, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    fn flatten(support: &[DiagGaussian], query: &[DiagGaussian]) -> Vec<f64> {
        support
            .iter()
            .chain(query)
            .flat_map(|g| g.mean().iter().chain(g.log_std()).copied().collect::<Vec<_>>())
            .collect()
    }

    fn unflatten(x: &[f64], ns: usize, nq: usize, d: usize) -> (Vec<DiagGaussian>, Vec<DiagGaussian>) {
        let all: Vec<DiagGaussian> = x.chunks(2 * d).map(|c| g(&c[..d], &c[d..])).collect();
        assert_eq!(all.len(), ns + nq);
        (all[..ns].to_vec(), all[ns..].to_vec())
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let d = 3;
        let support = vec![
            g(&[0.1, 0.4, -0.3], &[-0.9, -1.1, -0.8]),
            g(&[0.3, 0.1, -0.2], &[-1.0, -0.7, -1.2]),
            g(&[-0.2, -0.3, 0.5], &[-0.6, -1.0, -0.9]),
            g(&[-0.4, -0.1, 0.2], &[-1.3, -0.8, -1.0]),
        ];
        let support_labels = [0, 0, 1, 1];
        let query = vec![g(&[0.2, 0.2, -0.1], &[-1.0, -0.9, -1.0]), g(&[-0.1, -0.2, 0.3], &[-0.8, -1.1, -0.7])];
        let query_labels = [0, 1];
        let cfg = LossConfig { tau: 0.5, ..LossConfig::disaster() };
        let objective = |x: &[f64]| {
            let (s, q) = unflatten(x, 4, 2, d);
            let out = episode_head(&s, &support_labels, &q, &query_labels, 2, &cfg).unwrap();
            total_loss(out.bhs, out.cce, 0.0, &cfg)
        };
        let out = episode_head(&support, &support_labels, &query, &query_labels, 2, &cfg).unwrap();
        let analytic: Vec<f64> = out
            .grad
            .support_mean
            .iter()
            .zip(&out.grad.support_log_std)
            .chain(out.grad.query_mean.iter().zip(&out.grad.query_log_std))
            .flat_map(|(m, l)| m.iter().chain(l).copied().collect::<Vec<_>>())
            .collect();
        let x0 = flatten(&support, &query);
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-7 * (1.0 + fd.abs()), "coordinate {i}: fd {fd} vs {}", analytic[i]);
        }
    }
}
