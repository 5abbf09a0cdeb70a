//! Independent numerical references used by tests and `selftest`.
//!
//! Nothing here calls into the closed-form overlap code: the quadrature
//! oracle integrates `√(p(z) q(z))` from the densities directly.

use crate::distributions::DiagGaussian;

#[allow(clippy::excessive_precision)]
const KRONROD_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_5,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_48,
    0.0,
];
#[allow(clippy::excessive_precision)]
const KRONROD_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_224,
    0.063_092_092_629_978_56,
    0.104_790_010_322_250_19,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_42,
    0.204_432_940_075_298_89,
    0.209_482_141_084_727_82,
];
/// 7-point Gauss weights for the odd-indexed Kronrod nodes.
#[allow(clippy::excessive_precision)]
const GAUSS_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_64,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// 15-point Kronrod estimate and its difference from the embedded 7-point
/// Gauss rule.
fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
    let fc = f(c);
    let mut kronrod = KRONROD_WEIGHTS[7] * fc;
    let mut gauss = GAUSS_WEIGHTS[3] * fc;
    for i in 0..7 {
        let pair = f(c - h * KRONROD_NODES[i]) + f(c + h * KRONROD_NODES[i]);
        kronrod += KRONROD_WEIGHTS[i] * pair;
        if i % 2 == 1 {
            gauss += GAUSS_WEIGHTS[i / 2] * pair;
        }
    }
    (kronrod * h, (kronrod - gauss).abs() * h)
}

fn gk_step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let (value, err) = gk15(f, a, b);
    if depth == 0 || err <= tol {
        return value;
    }
    let m = 0.5 * (a + b);
    gk_step(f, a, m, 0.5 * tol, depth - 1) + gk_step(f, m, b, 0.5 * tol, depth - 1)
}

/// Adaptive Gauss–Kronrod (7/15) quadrature of `f` over `[a, b]` to absolute
/// tolerance `tol`. The range is first cut into `panels` equal pieces so
/// narrow peaks are not stepped over by the coarse initial estimate.
pub fn adaptive_quadrature(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, panels: usize) -> f64 {
    let panels = panels.max(1);
    let width = (b - a) / panels as f64;
    let panel_tol = tol / panels as f64;
    (0..panels)
        .map(|k| {
            let lo = a + width * k as f64;
            let hi = if k + 1 == panels { b } else { lo + width };
            gk_step(f, lo, hi, panel_tol, 40)
        })
        .sum()
}

/// Adaptive quadrature over consecutive segments `points[k]..points[k+1]`.
pub fn integrate_segments(f: &dyn Fn(f64) -> f64, points: &[f64], tol: f64) -> f64 {
    let per = tol / points.len().saturating_sub(1).max(1) as f64;
    points.windows(2).map(|w| gk_step(f, w[0], w[1], per, 40)).sum()
}

/// Breakpoints along coordinate `i`: both means ± 1, 2, 4, 8 and 20 standard
/// deviations, so narrow peaks always sit on short segments.
fn breakpoints(p: &DiagGaussian, q: &DiagGaussian, i: usize) -> Vec<f64> {
    let mut pts = Vec::with_capacity(22);
    for g in [p, q] {
        let (m, s) = (g.mean()[i], g.log_std()[i].exp());
        pts.push(m);
        for k in [1.0, 2.0, 4.0, 8.0, 20.0] {
            pts.push(m - k * s);
            pts.push(m + k * s);
        }
    }
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts
}

/// `∫ √(p(z) q(z)) dz` by quadrature, for 1-D or 2-D distributions.
pub fn quadrature_bc(p: &DiagGaussian, q: &DiagGaussian, tol: f64) -> f64 {
    assert_eq!(p.dim(), q.dim(), "oracle needs matching dimensions");
    match p.dim() {
        1 => {
            let f = |z: f64| (p.pdf(&[z]) * q.pdf(&[z])).sqrt();
            integrate_segments(&f, &breakpoints(p, q, 0), tol)
        }
        2 => {
            let (xs, ys) = (breakpoints(p, q, 0), breakpoints(p, q, 1));
            let inner_tol = tol / (xs[xs.len() - 1] - xs[0]);
            let outer = |x: f64| {
                let g = |y: f64| (p.pdf(&[x, y]) * q.pdf(&[x, y])).sqrt();
                integrate_segments(&g, &ys, inner_tol)
            };
            integrate_segments(&outer, &xs, tol)
        }
        d => panic!("quadrature oracle supports 1-D and 2-D only, got {d}"),
    }
}

/// Largest violation of `|analytic − numeric| / max(|analytic|, |numeric|, floor)`
/// with the index at which it happens.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .map(|(i, (a, n))| ((a - n).abs() / a.abs().max(n.abs()).max(floor), i))
        .fold((0.0, 0), |best, cur| if cur.0 > best.0 { cur } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_integrates_polynomials_and_gaussians() {
        let poly = |x: f64| x.powi(9) - 2.0 * x + 1.0;
        assert!((adaptive_quadrature(&poly, 0.0, 2.0, 1e-12, 1) - (102.4 - 4.0 + 2.0)).abs() < 1e-11);
        let g = DiagGaussian::univariate(0.5, 0.3).unwrap();
        let pdf = |x: f64| g.pdf(&[x]);
        assert!((adaptive_quadrature(&pdf, -10.0, 10.0, 1e-12, 32) - 1.0).abs() < 1e-11);
        let narrow = DiagGaussian::univariate(3.3, 0.01).unwrap();
        let spike = |x: f64| narrow.pdf(&[x]);
        let pts = breakpoints(&narrow, &narrow, 0);
        assert!((integrate_segments(&spike, &pts, 1e-12) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn oracle_reference_values() {
        let p = DiagGaussian::univariate(0.0, 1.0).unwrap();
        let wide = DiagGaussian::univariate(0.0, 2.0).unwrap();
        let shifted = DiagGaussian::univariate(2.0, 1.0).unwrap();
        assert!((quadrature_bc(&p, &p, 1e-10) - 1.0).abs() < 1e-9);
        assert!((quadrature_bc(&p, &wide, 1e-10) - 0.8f64.sqrt()).abs() < 1e-9);
        assert!((quadrature_bc(&p, &shifted, 1e-10) - (-0.5f64).exp()).abs() < 1e-9);
    }
}
