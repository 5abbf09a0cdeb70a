//! Built-in invariant suites run by `bhfa selftest`.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::reference_constants;
use crate::distributions::{bhattacharyya_coefficient, hellinger_sq, DiagGaussian};
use crate::encoder::{Architecture, EncoderModel};
use crate::episodes::{sample_episode, synth_blobs, Episode, EpisodeSpec, SynthParams};
use crate::error::Result;
use crate::losses::LossConfig;
use crate::optim::Adam;
use crate::oracle::quadrature_bc;
use crate::seed;
use crate::tensor::Tensor;
use crate::trainer::{episode_gradients, episode_loss};

/// Knobs for mutation testing of the suites themselves.
#[derive(Debug, Clone, Copy, Default)]
pub struct SelftestOptions {
    /// Adds an asymmetric term to the coefficient used by `bc-identity`.
    pub perturb_bc: bool,
}

pub type SuiteResult = std::result::Result<String, String>;

pub struct Suite {
    pub name: &'static str,
    pub run: fn(&SelftestOptions) -> SuiteResult,
}

pub const SUITES: &[Suite] = &[
    Suite { name: "bc-identity", run: bc_identity },
    Suite { name: "bc-quadrature", run: bc_quadrature },
    Suite { name: "gradients", run: gradients },
    Suite { name: "adam", run: adam },
    Suite { name: "episode-shape", run: episode_shape },
    Suite { name: "default-constants", run: constants },
];

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

pub fn run_all(opts: &SelftestOptions) -> Vec<SuiteOutcome> {
    SUITES
        .iter()
        .map(|s| {
            let start = Instant::now();
            let r = (s.run)(opts);
            let seconds = start.elapsed().as_secs_f64();
            match r {
                Ok(detail) => SuiteOutcome { name: s.name, passed: true, detail, seconds },
                Err(detail) => SuiteOutcome { name: s.name, passed: false, detail, seconds },
            }
        })
        .collect()
}

/// Random diagonal Gaussian with dimension in `1..=max_dim`.
pub fn random_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> DiagGaussian {
    let mean = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
    let log_std = (0..dim).map(|_| rng.random_range(-2.0..1.5)).collect();
    DiagGaussian::new(mean, log_std).expect("finite parameters")
}

/// Largest identity and symmetry violations over `pairs` random pairs.
pub fn identity_errors(pairs: usize, max_dim: usize, seed: u64, perturb: bool) -> Result<(f64, f64)> {
    let mut rng = seed::rng(seed, &[]);
    let bc = |p: &DiagGaussian, q: &DiagGaussian| -> Result<f64> {
        let v = bhattacharyya_coefficient(p, q)?;
        Ok(if perturb { v + 1e-9 * p.mean()[0] } else { v })
    };
    let (mut ident, mut sym) = (0.0f64, 0.0f64);
    for _ in 0..pairs {
        let dim = rng.random_range(1..=max_dim);
        let p = random_gaussian(&mut rng, dim);
        let q = random_gaussian(&mut rng, dim);
        let pq = bc(&p, &q)?;
        ident = ident.max(((1.0 - pq) - hellinger_sq(&p, &q)?).abs());
        sym = sym.max((pq - bc(&q, &p)?).abs());
    }
    Ok((ident, sym))
}

/// Largest `|closed form − quadrature|` over random 1-D and 2-D pairs.
pub fn quadrature_error(pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = seed::rng(seed, &[]);
    let mut worst = 0.0f64;
    for i in 0..pairs {
        let dim = 1 + i % 2;
        let p = random_gaussian(&mut rng, dim);
        let q = random_gaussian(&mut rng, dim);
        worst = worst.max((bhattacharyya_coefficient(&p, &q)? - quadrature_bc(&p, &q, 1e-12)).abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub max_rel: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Finite-difference step.
pub const GRAD_STEP: f64 = 1e-4;
/// Floor on the denominator of the relative error. Loss roundoff through the
/// `1/τ` logits is about 1e−14, i.e. ~1e−10 in a difference quotient, so
/// entries smaller than this cannot be resolved relatively.
pub const GRAD_REL_FLOOR: f64 = 1e-6;

/// Central differences of the total loss against the analytic gradient, for
/// every scalar parameter.
pub fn gradient_check(
    model: &EncoderModel,
    episode: &Episode,
    loss: &LossConfig,
    noise_seed: u64,
    h: f64,
) -> Result<GradientCheck> {
    let (_, analytic) = episode_gradients(model, episode, loss, noise_seed, None)?;
    let mut probe = model.clone();
    let mut out = GradientCheck { max_rel: 0.0, worst_param: String::new(), checked: 0 };
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = probe.params()[pi].value.data()[j];
            probe.params_mut()[pi].value.data_mut()[j] = orig + h;
            let up = episode_loss(&probe, episode, loss, noise_seed, None)?.total;
            probe.params_mut()[pi].value.data_mut()[j] = orig - h;
            let down = episode_loss(&probe, episode, loss, noise_seed, None)?.total;
            probe.params_mut()[pi].value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_REL_FLOOR);
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst_param = format!("{}[{j}]", model.params()[pi].name);
            }
            out.checked += 1;
        }
    }
    Ok(out)
}

/// Fixture seed with no ReLU/max-pool switching point within one step of the
/// initial parameters.
pub const MICRO_SEED: u64 = 5;

/// The d = 4, 8×8, 2-way-1-shot fixture used for gradient checks.
pub fn micro_fixture(seed: u64) -> Result<(EncoderModel, Episode)> {
    let arch = Architecture::new(1, 8, vec![4, 8], 4)?;
    let model = EncoderModel::new(arch, seed);
    let ds = synth_blobs(&SynthParams::new(2, 4, 8, 0.1, seed))?;
    let episode = sample_episode(&ds, &EpisodeSpec::new(2, 1, 1, seed))?;
    Ok((model, episode))
}

fn bc_identity(opts: &SelftestOptions) -> SuiteResult {
    let (ident, sym) = identity_errors(2000, 64, 17, opts.perturb_bc).map_err(|e| e.to_string())?;
    if ident <= 1e-12 && sym <= 1e-12 {
        Ok(format!("identity {ident:.1e}, symmetry {sym:.1e}"))
    } else {
        Err(format!("identity {ident:.3e}, symmetry {sym:.3e} (limit 1e-12)"))
    }
}

fn bc_quadrature(_: &SelftestOptions) -> SuiteResult {
    let err = quadrature_error(20, 23).map_err(|e| e.to_string())?;
    if err <= 1e-8 {
        Ok(format!("max abs error {err:.1e}"))
    } else {
        Err(format!("max abs error {err:.3e} (limit 1e-8)"))
    }
}

fn gradients(_: &SelftestOptions) -> SuiteResult {
    let (model, episode) = micro_fixture(MICRO_SEED).map_err(|e| e.to_string())?;
    let r = gradient_check(&model, &episode, &LossConfig::default(), 11, GRAD_STEP).map_err(|e| e.to_string())?;
    if r.max_rel < 1e-4 {
        Ok(format!("{} parameters, max rel error {:.1e}", r.checked, r.max_rel))
    } else {
        Err(format!("max rel error {:.3e} at {} (limit 1e-4)", r.max_rel, r.worst_param))
    }
}

/// Two unit-gradient steps from θ = 1 at lr = 0.1.
pub fn adam_two_steps() -> Result<(f64, f64)> {
    let mut theta = [Tensor::scalar(1.0)];
    let mut opt = Adam::new(0.1, 0.9, 0.999, 1e-8);
    let g = [Tensor::scalar(1.0)];
    opt.step(theta.iter_mut(), &g)?;
    let first = theta[0].data()[0];
    opt.step(theta.iter_mut(), &g)?;
    Ok((first, theta[0].data()[0]))
}

fn adam(_: &SelftestOptions) -> SuiteResult {
    let (a, b) = adam_two_steps().map_err(|e| e.to_string())?;
    if (a - 0.9).abs() <= 1e-6 && (b - 0.8).abs() <= 1e-6 {
        Ok(format!("θ₁ = {a:.7}, θ₂ = {b:.7}"))
    } else {
        Err(format!("θ₁ = {a}, θ₂ = {b}; expected 0.9, 0.8"))
    }
}

fn episode_shape(_: &SelftestOptions) -> SuiteResult {
    let ds = synth_blobs(&SynthParams::new(6, 20, 8, 0.05, 3)).map_err(|e| e.to_string())?;
    let mut rng = seed::rng(29, &[]);
    for _ in 0..200 {
        let k = rng.random_range(2..=6);
        let shot = rng.random_range(1..=5);
        let query = rng.random_range(1..=20 - shot);
        let spec = EpisodeSpec::new(k, shot, query, rng.random());
        let ep = sample_episode(&ds, &spec).map_err(|e| e.to_string())?;
        let ok = ep.support.len() == k * shot
            && ep.query.len() == k * query
            && (0..k).all(|c| {
                ep.support.iter().filter(|i| i.label == c).count() == shot
                    && ep.query.iter().filter(|i| i.label == c).count() == query
            })
            && ep.query.iter().all(|q| ep.support.iter().all(|s| s.source != q.source));
        if !ok {
            return Err(format!("malformed episode for {spec:?}"));
        }
    }
    Ok("200 random specs".into())
}

fn constants(_: &SelftestOptions) -> SuiteResult {
    let got = reference_constants();
    if got == ((0.7, 0.3, 1.0), (1.0, 0.5, 1.0), 0.01, 0.001) {
        Ok("λ, τ and lr defaults intact".into())
    } else {
        Err(format!("defaults changed: {got:?}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_contains_required_suites() {
        let names: Vec<&str> = SUITES.iter().map(|s| s.name).collect();
        for n in ["bc-identity", "bc-quadrature", "gradients", "adam", "episode-shape"] {
            assert!(names.contains(&n));
        }
    }

    #[test]
    fn perturbation_breaks_bc_identity() {
        assert!(bc_identity(&SelftestOptions::default()).is_ok());
        assert!(bc_identity(&SelftestOptions { perturb_bc: true }).is_err());
    }

    #[test]
    fn cheap_suites_pass() {
        for f in [adam, episode_shape, constants, bc_quadrature] {
            let r = f(&SelftestOptions::default());
            assert!(r.is_ok(), "{r:?}");
        }
    }
}
