//! Diagonal-Gaussian latent distributions and closed-form Bhattacharyya /
//! Hellinger overlap between them.
//!
//! For one dimension with variances `s_p = σ_p²`, `s_q = σ_q²` the overlap
//! `∫√(p q) dz` equals
//!
//! ```text
//! √(2 σ_p σ_q / (s_p + s_q)) · exp(−(μ_p − μ_q)² / (4 (s_p + s_q)))
//! ```
//!
//! and the multivariate diagonal case is the product over dimensions. All
//! evaluation happens in log space and only the final coefficient is
//! exponentiated.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -7.0;
pub const LOG_STD_MAX: f64 = 7.0;
/// Lower clamp on the coefficient so `−ln BC` stays finite.
pub const BC_EPS: f64 = 1e-300;
/// Variance floor for aggregated prototypes.
pub const VAR_MIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl DiagGaussian {
    /// Builds a distribution, clamping `log_std` into
    /// `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::contract("gaussian dimension must be at least 1"));
        }
        if mean.len() != log_std.len() {
            return Err(Error::contract(format!(
                "mean has length {} but log_std has length {}",
                mean.len(),
                log_std.len()
            )));
        }
        if !mean.iter().chain(&log_std).all(|v| v.is_finite()) {
            return Err(Error::contract("gaussian parameters must be finite"));
        }
        let log_std = log_std.into_iter().map(clamp_log_std).collect();
        Ok(DiagGaussian { mean, log_std })
    }

    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![0.0; dim])
    }

    /// 1-D convenience constructor from a mean and a standard deviation.
    pub fn univariate(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) {
            return Err(Error::contract("standard deviation must be positive"));
        }
        Self::new(vec![mean], vec![std.ln()])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    #[inline]
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    #[inline]
    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    /// Restriction to a single coordinate.
    pub fn marginal(&self, i: usize) -> DiagGaussian {
        DiagGaussian { mean: vec![self.mean[i]], log_std: vec![self.log_std[i]] }
    }

    /// Density at `z`. Used by numerical oracles.
    pub fn pdf(&self, z: &[f64]) -> f64 {
        let mut log_p = 0.0;
        for ((&x, &m), &l) in z.iter().zip(&self.mean).zip(&self.log_std) {
            let s = l.exp();
            let u = (x - m) / s;
            log_p += -0.5 * u * u - l - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        log_p.exp()
    }
}

#[inline]
pub(crate) fn clamp_log_std(l: f64) -> f64 {
    l.clamp(LOG_STD_MIN, LOG_STD_MAX)
}

/// Seeded stream of standard-normal draws. One source per consumer.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    seed: u64,
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        NoiseSource { seed, rng: crate::seed::rng(seed, &[crate::seed::NOISE]) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn draw(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_normal()).collect()
    }
}

fn check_dims(p: &DiagGaussian, q: &DiagGaussian) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::contract(format!(
            "gaussian dimension mismatch: {} vs {}",
            p.dim(),
            q.dim()
        )));
    }
    Ok(())
}

/// Per-dimension log-coefficient, summed.
fn log_bc_unchecked(p: &DiagGaussian, q: &DiagGaussian) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.dim() {
        let (a, b) = (p.log_std[i], q.log_std[i]);
        let sum_var = (2.0 * a).exp() + (2.0 * b).exp();
        let delta = p.mean[i] - q.mean[i];
        acc += 0.5 * (std::f64::consts::LN_2 + a + b - sum_var.ln()) - delta * delta / (4.0 * sum_var);
    }
    acc
}

pub fn bhattacharyya_coefficient(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    check_dims(p, q)?;
    Ok(log_bc_unchecked(p, q).exp().clamp(BC_EPS, 1.0))
}

pub fn bhattacharyya_distance(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    Ok(-bhattacharyya_coefficient(p, q)?.ln())
}

/// Squared Hellinger distance, defined through `D_H² = 1 − BC`.
pub fn hellinger_sq(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    Ok(1.0 - bhattacharyya_coefficient(p, q)?)
}

/// Coefficient together with its gradient with respect to both arguments'
/// means and log standard deviations.
#[derive(Debug, Clone)]
pub struct BcGrad {
    pub bc: f64,
    pub p_mean: Vec<f64>,
    pub p_log_std: Vec<f64>,
    pub q_mean: Vec<f64>,
    pub q_log_std: Vec<f64>,
}

pub fn bhattacharyya_coefficient_grad(p: &DiagGaussian, q: &DiagGaussian) -> Result<BcGrad> {
    check_dims(p, q)?;
    let d = p.dim();
    let raw = log_bc_unchecked(p, q).exp();
    let bc = raw.clamp(BC_EPS, 1.0);
    // d BC = BC · d ln BC, zero where the clamp is active.
    let scale = if raw > BC_EPS && raw < 1.0 { bc } else { 0.0 };
    let mut g = BcGrad {
        bc,
        p_mean: vec![0.0; d],
        p_log_std: vec![0.0; d],
        q_mean: vec![0.0; d],
        q_log_std: vec![0.0; d],
    };
    if scale == 0.0 {
        return Ok(g);
    }
    for i in 0..d {
        let (a, b) = (p.log_std[i], q.log_std[i]);
        let (va, vb) = ((2.0 * a).exp(), (2.0 * b).exp());
        let s = va + vb;
        let delta = p.mean[i] - q.mean[i];
        let quad = delta * delta / (4.0 * s * s);
        g.p_mean[i] = scale * (-delta / (2.0 * s));
        g.q_mean[i] = scale * (delta / (2.0 * s));
        g.p_log_std[i] = scale * (0.5 - va / s + 2.0 * va * quad);
        g.q_log_std[i] = scale * (0.5 - vb / s + 2.0 * vb * quad);
    }
    Ok(g)
}

/// Correctly rounded sum (Shewchuk's partials). The result does not depend
/// on the order of the inputs.
pub(crate) fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // Round the expansion back to a double, following math.fsum.
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}

/// Intermediate values of [`aggregate_prototype`] kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PrototypeTrace {
    pub prototype: DiagGaussian,
    /// Variance before flooring, per dimension.
    raw_var: Vec<f64>,
    members: usize,
}

/// Moment-matched Gaussian of the uniform mixture of `members`.
pub fn aggregate_prototype(members: &[DiagGaussian]) -> Result<DiagGaussian> {
    Ok(aggregate_prototype_traced(members)?.prototype)
}

pub fn aggregate_prototype_traced(members: &[DiagGaussian]) -> Result<PrototypeTrace> {
    let first = members
        .first()
        .ok_or_else(|| Error::contract("cannot aggregate an empty member list"))?;
    let d = first.dim();
    if members.iter().any(|m| m.dim() != d) {
        return Err(Error::contract("prototype members have differing dimensions"));
    }
    let m = members.len() as f64;
    let mut mean = Vec::with_capacity(d);
    let mut log_std = Vec::with_capacity(d);
    let mut raw_var = Vec::with_capacity(d);
    for i in 0..d {
        let mu = exact_sum(members.iter().map(|g| g.mean[i])) / m;
        let second = exact_sum(members.iter().map(|g| {
            let v = (2.0 * g.log_std[i]).exp();
            v + g.mean[i] * g.mean[i]
        })) / m;
        let var = second - mu * mu;
        mean.push(mu);
        raw_var.push(var);
        log_std.push(clamp_log_std(0.5 * var.max(VAR_MIN).ln()));
    }
    Ok(PrototypeTrace {
        prototype: DiagGaussian { mean, log_std },
        raw_var,
        members: members.len(),
    })
}

impl PrototypeTrace {
    /// Propagates gradients on the prototype's mean and log-std back onto
    /// each member. Returns `(d_mean, d_log_std)` per member, in input order.
    pub fn backward(
        &self,
        members: &[DiagGaussian],
        grad_mean: &[f64],
        grad_log_std: &[f64],
    ) -> Vec<(Vec<f64>, Vec<f64>)> {
        debug_assert_eq!(members.len(), self.members);
        let m = self.members as f64;
        let d = self.prototype.dim();
        // d log_std_c / d var_c where neither the floor nor the clamp is active.
        let dl_dvar: Vec<f64> = (0..d)
            .map(|i| {
                let var = self.raw_var[i];
                let l = 0.5 * var.max(VAR_MIN).ln();
                if var > VAR_MIN && l > LOG_STD_MIN && l < LOG_STD_MAX {
                    0.5 / var
                } else {
                    0.0
                }
            })
            .collect();
        members
            .iter()
            .map(|g| {
                let mut dm = vec![0.0; d];
                let mut dl = vec![0.0; d];
                for i in 0..d {
                    let gv = grad_log_std[i] * dl_dvar[i];
                    let mu_c = self.prototype.mean[i];
                    dm[i] = grad_mean[i] / m + gv * 2.0 * (g.mean[i] - mu_c) / m;
                    let var_member = (2.0 * g.log_std[i]).exp();
                    dl[i] = gv * 2.0 * var_member / m;
                }
                (dm, dl)
            })
            .collect()
    }
}

/// `z = μ + ζ ⊙ σ` with `ζ` drawn from `noise`.
pub fn reparameterize(g: &DiagGaussian, noise: &mut NoiseSource) -> Vec<f64> {
    let eps = noise.draw(g.dim());
    reparameterize_with(g, &eps)
}

pub fn reparameterize_with(g: &DiagGaussian, eps: &[f64]) -> Vec<f64> {
    g.mean
        .iter()
        .zip(&g.log_std)
        .zip(eps)
        .map(|((&m, &l), &e)| m + e * l.exp())
        .collect()
}
