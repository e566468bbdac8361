//! Numerical checks of the `C^{2,2}` properties of a functional.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CylindricalFunctional, MeasureFunctional};
use crate::error::{Error, Result};
use crate::flow::{DiscreteMeasure, EmpiricalConditionalLaw, Measure};
use crate::seed::{self, tag};

pub const DEFAULT_FTC_NODES: usize = 32;

/// Gauss–Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = 0.5 * (1.0 - x);
        nodes[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    (nodes, weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FtcResidual {
    /// `|Φ(μ) − Φ(ν) − ∫⟨μ − ν, δΦ/δμ(λμ + (1−λ)ν)⟩dλ|`
    pub first: f64,
    /// Second-order Taylor remainder against `∫(1−s)⟨(μ−ν)⊗², δ²Φ/δμ²⟩ds`.
    pub second: f64,
    pub nodes: usize,
}

fn signed_difference(mu: &dyn Measure, nu: &dyn Measure) -> DiscreteMeasure {
    let mut out = DiscreteMeasure::from_measure(mu);
    for i in 0..nu.len() {
        out.points.extend_from_slice(nu.point(i));
        out.weights.push(-nu.weight(i));
    }
    out
}

pub fn ftc_check(
    phi: &dyn MeasureFunctional,
    mu: &dyn Measure,
    nu: &dyn Measure,
    y: &[f64],
    nodes: usize,
) -> Result<FtcResidual> {
    if mu.dim() != nu.dim() {
        return Err(Error::invalid("measures of different dimensions"));
    }
    if nodes == 0 {
        return Err(Error::invalid("quadrature needs at least one node"));
    }
    let diff = signed_difference(mu, nu);
    let delta = phi.value(mu, y)? - phi.value(nu, y)?;
    let (ls, ws) = gauss_legendre(nodes);
    let mut first = 0.0;
    let mut second = 0.0;
    for (l, w) in ls.iter().zip(&ws) {
        let at = DiscreteMeasure::mixture(mu, nu, *l)?;
        first += w
            * (phi.pair_linear_derivative(&at, y, mu)? - phi.pair_linear_derivative(&at, y, nu)?);
        second += w * (1.0 - l) * phi.pair_second_derivative(&at, y, &diff)?;
    }
    let tangent = phi.pair_linear_derivative(nu, y, mu)? - phi.pair_linear_derivative(nu, y, nu)?;
    Ok(FtcResidual {
        first: (delta - first).abs(),
        second: (delta - tangent - second).abs(),
        nodes,
    })
}

/// Relative error `|a − b| / max(|a|, |b|, 10⁻²)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Richardson-extrapolated central difference of a vector function along
/// coordinate `k`.
fn fd_partial(
    f: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    x: &[f64],
    k: usize,
    h: f64,
) -> Result<Vec<f64>> {
    let central = |h: f64| -> Result<Vec<f64>> {
        let mut z = x.to_vec();
        z[k] = x[k] + h;
        let up = f(&z)?;
        z[k] = x[k] - h;
        let dn = f(&z)?;
        Ok(up
            .iter()
            .zip(&dn)
            .map(|(u, d)| (u - d) / (2.0 * h))
            .collect())
    };
    let coarse = central(h)?;
    let fine = central(0.5 * h)?;
    Ok(fine
        .iter()
        .zip(&coarse)
        .map(|(f, c)| (4.0 * f - c) / 3.0)
        .collect())
}

/// Jacobian by finite differences, `rows(f) × len(x)` row-major.
fn fd_jac(f: &dyn Fn(&[f64]) -> Result<Vec<f64>>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let cols: Vec<Vec<f64>> = (0..x.len())
        .map(|k| fd_partial(f, x, k, h))
        .collect::<Result<_>>()?;
    let rows = cols.first().map_or(0, Vec::len);
    let mut out = vec![0.0; rows * x.len()];
    for (k, c) in cols.iter().enumerate() {
        for r in 0..rows {
            out[r * x.len() + k] = c[r];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub probes: usize,
    pub tolerance: f64,
    pub max_relative_error: BTreeMap<String, f64>,
    pub worst: f64,
    pub pass: bool,
    /// Some derivative of `f` or `g` is itself a finite difference.
    pub finite_difference_fallback: bool,
}

fn probe_measure<R: Rng>(
    rng: &mut R,
    d: usize,
    atoms: usize,
    scale: f64,
) -> EmpiricalConditionalLaw {
    let pts = (0..atoms * d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    EmpiricalConditionalLaw::from_points(d, pts).expect("nonempty probe")
}

fn uniform_vec<R: Rng>(rng: &mut R, n: usize, radius: f64) -> Vec<f64> {
    (0..n)
        .map(|_| rng.random_range(-radius..=radius))
        .collect()
}

/// Compares every analytic derivative with a finite difference of the
/// level below it on random probes in `[-radius, radius]`.
pub fn derivative_consistency(
    phi: &CylindricalFunctional,
    probes: usize,
    radius: f64,
    seed: u64,
) -> Result<ConsistencyReport> {
    const TOL: f64 = 1e-5;
    const H: f64 = 1e-3;
    let (d, dy) = (phi.x_dim, phi.y_dim);
    let mut rng = seed::rng(seed, tag::PROBES, 0);
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut note = |name: &str, a: &[f64], b: &[f64]| {
        let e = a
            .iter()
            .zip(b)
            .map(|(x, y)| relative_error(*x, *y))
            .fold(0.0, f64::max);
        let w = worst.entry(name.to_string()).or_insert(0.0);
        *w = w.max(e);
    };
    for _ in 0..probes {
        let mu = probe_measure(&mut rng, d, 5, 0.5 * radius);
        let y = uniform_vec(&mut rng, dy, radius);
        let x1 = uniform_vec(&mut rng, d, radius);
        let x2 = uniform_vec(&mut rng, d, radius);
        let fr = phi.freeze(&mu, &y)?;
        let t1 = phi.tests_at(&x1)?;
        let t2 = phi.tests_at(&x2)?;

        if dy > 0 {
            let fd = fd_jac(&|y: &[f64]| Ok(vec![phi.eval(&mu, y)?]), &y, H)?;
            note("grad_y", &fr.fy, &fd);
            let fd = fd_jac(&|y: &[f64]| phi.grad_y(&mu, y), &y, H)?;
            note("hess_y", &fr.fyy, &fd);
            let fd = fd_jac(
                &|y: &[f64]| Ok(vec![phi.linear_derivative(&mu, y, &x1)?]),
                &y,
                H,
            )?;
            note("linear_grad_y", &fr.linear_grad_y(&t1), &fd);
            // rows of ∂_y(∇_x δΦ) index x, matching the d × dy layout
            let fd = fd_jac(&|y: &[f64]| phi.linear_grad_x(&mu, y, &x1), &y, H)?;
            note("linear_grad_xy", &fr.linear_grad_xy(&t1), &fd);
        }
        let fd = fd_jac(&|x: &[f64]| Ok(vec![fr.linear(&phi.tests_at(x)?)]), &x1, H)?;
        note("linear_grad_x", &fr.linear_grad_x(&t1), &fd);
        let fd = fd_jac(&|x: &[f64]| Ok(fr.linear_grad_x(&phi.tests_at(x)?)), &x1, H)?;
        note("linear_hess_x", &fr.linear_hess_x(&t1), &fd);
        let fd = fd_jac(
            &|x: &[f64]| Ok(vec![fr.second(&phi.tests_at(x)?, &t2)]),
            &x1,
            H,
        )?;
        note("second_grad_x1", &fr.second_grad_x1(&t1, &t2), &fd);
        let fd = fd_jac(
            &|x: &[f64]| Ok(fr.second_grad_x1(&t1, &phi.tests_at(x)?)),
            &x2,
            H,
        )?;
        note("second_grad_x1x2", &fr.second_grad_x1x2(&t1, &t2), &fd);
    }
    let w = worst.values().copied().fold(0.0, f64::max);
    Ok(ConsistencyReport {
        probes,
        tolerance: TOL,
        max_relative_error: worst,
        worst: w,
        pass: w < TOL,
        finite_difference_fallback: !phi.is_analytic(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationItem {
    pub analytic: f64,
    pub extrapolated: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    /// `δΦ/δμ(x₁) − ⟨μ, δΦ/δμ⟩` against `d/dε Φ((1−ε)μ + εδ_{x₁})`.
    pub first: PerturbationItem,
    /// `δ²Φ/δμ²(x₁, x₂) − ⟨μ, δ²Φ/δμ²(x₁, ·)⟩` against
    /// `d/dε δΦ/δμ((1−ε)μ + εδ_{x₂}, x₁)`.
    pub second: PerturbationItem,
    pub tolerance: f64,
    pub pass: bool,
}

/// Derivative at `ε = 0` of `ε ↦ F(ε)` from one-sided quotients
/// `(F(ε) − F(0))/ε` extrapolated by Neville's scheme.
fn extrapolated_slope(f: &dyn Fn(f64) -> Result<f64>, eps0: f64, levels: usize) -> Result<f64> {
    let f0 = f(0.0)?;
    let eps: Vec<f64> = (0..levels)
        .map(|i| eps0 / f64::powi(2.0, i as i32))
        .collect();
    let mut t: Vec<f64> = eps
        .iter()
        .map(|e| Ok((f(*e)? - f0) / e))
        .collect::<Result<_>>()?;
    for j in 1..levels {
        for i in (j..levels).rev() {
            t[i] = t[i] + (t[i] - t[i - 1]) * eps[i] / (eps[i - j] - eps[i]);
        }
    }
    Ok(t[levels - 1])
}

pub fn perturbation_check(
    phi: &dyn MeasureFunctional,
    mu: &dyn Measure,
    y: &[f64],
    x1: &[f64],
    x2: &[f64],
) -> Result<PerturbationReport> {
    const TOL: f64 = 1e-4;
    let d = phi.x_dim();
    if mu.dim() != d || x1.len() != d || x2.len() != d {
        return Err(Error::invalid(
            "probe dimensions disagree with the functional",
        ));
    }
    let dirac1 = EmpiricalConditionalLaw::from_points(d, x1.to_vec())?;
    let dirac2 = EmpiricalConditionalLaw::from_points(d, x2.to_vec())?;

    let analytic1 = phi.linear_derivative(mu, y, x1)? - phi.pair_linear_derivative(mu, y, mu)?;
    let numeric1 = extrapolated_slope(
        &|e| phi.value(&DiscreteMeasure::mixture(mu, &dirac1, 1.0 - e)?, y),
        1e-2,
        4,
    )?;

    let mut acc = crate::stats::CompensatedSum::new();
    for i in 0..mu.len() {
        acc.add(mu.weight(i) * phi.second_linear_derivative(mu, y, x1, mu.point(i))?);
    }
    let analytic2 = phi.second_linear_derivative(mu, y, x1, x2)? - acc.value();
    let numeric2 = extrapolated_slope(
        &|e| phi.linear_derivative(&DiscreteMeasure::mixture(mu, &dirac2, 1.0 - e)?, y, x1),
        1e-2,
        4,
    )?;

    let item = |a: f64, n: f64| PerturbationItem {
        analytic: a,
        extrapolated: n,
        relative_error: relative_error(a, n),
    };
    let first = item(analytic1, numeric1);
    let second = item(analytic2, numeric2);
    Ok(PerturbationReport {
        first,
        second,
        tolerance: TOL,
        pass: first.relative_error < TOL && second.relative_error < TOL,
    })
}

pub const GROWTH_SHELLS: [f64; 4] = [1.0, 10.0, 100.0, 1000.0];
pub const GROWTH_LABELS: [&str; 5] = [
    "grad_y",
    "hess_y",
    "grad_x_linear+grad_y_linear",
    "hess_x_linear+grad_xy_linear",
    "grad_x1x2_second",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub p: f64,
    /// Constant calibrated on probes in the unit ball.
    pub c: f64,
    pub shells: Vec<f64>,
    /// `ratios[s][q]`: largest `|derivative| / (c · weight)` of inequality `q`
    /// on shell `s`.
    pub ratios: Vec<[f64; 5]>,
    pub max_ratio: f64,
    pub allowed_ratio: f64,
    pub pass: bool,
    pub finite_difference_fallback: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn on_sphere<R: Rng>(rng: &mut R, n: usize, r: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..n)
        .map(|_| -> f64 { StandardNormal.sample(rng) })
        .collect();
    let s = norm(&v);
    if s == 0.0 {
        return vec![0.0; n];
    }
    v.iter().map(|x| r * x / s).collect()
}

/// Left-hand sides and right-hand weights of the five growth inequalities.
fn growth_terms(
    phi: &CylindricalFunctional,
    mu: &dyn Measure,
    y: &[f64],
    x1: &[f64],
    x2: &[f64],
    p: f64,
) -> Result<([f64; 5], [f64; 5])> {
    let fr = phi.freeze(mu, y)?;
    let t1 = phi.tests_at(x1)?;
    let t2 = phi.tests_at(x2)?;
    let (ny, n1, n2) = (norm(y), norm(x1), norm(x2));
    let lhs = [
        norm(&fr.fy),
        norm(&fr.fyy),
        norm(&fr.linear_grad_x(&t1)) + norm(&fr.linear_grad_y(&t1)),
        norm(&fr.linear_hess_x(&t1)) + norm(&fr.linear_grad_xy(&t1)),
        norm(&fr.second_grad_x1x2(&t1, &t2)),
    ];
    let rhs = [
        1.0 + ny.powf(p - 1.0),
        1.0 + ny.powf(p - 2.0),
        1.0 + n1.powf(p - 1.0) + ny.powf(p - 1.0),
        1.0 + n1.powf(p - 2.0) + ny.powf(p - 2.0),
        1.0 + n1.powf(p - 2.0) + n2.powf(p - 2.0) + ny.powf(p - 2.0),
    ];
    Ok((lhs, rhs))
}

/// Polynomial-growth check. `c` is the largest ratio seen on `probes`
/// random points of the unit ball; each shell `|x₁| = |x₂| = |y| = r`
/// (and a measure of that spread) then reports `|lhs| / (c · rhs)`.
/// A shell ratio above `allowed_ratio` is a violation.
pub fn growth_bound_check(
    phi: &CylindricalFunctional,
    p: f64,
    probes: usize,
    seed: u64,
) -> Result<GrowthReport> {
    const ALLOWED: f64 = 10.0;
    if !(p >= 2.0) {
        return Err(Error::invalid("growth exponent p must be at least 2"));
    }
    if probes == 0 {
        return Err(Error::invalid("need at least one probe"));
    }
    let (d, dy) = (phi.x_dim, phi.y_dim);
    let mut rng = seed::rng(seed, tag::PROBES, 1);
    let mut c = 0.0f64;
    for _ in 0..probes {
        let r: f64 = rng.random_range(0.0..=1.0);
        let mu = probe_measure(&mut rng, d, 5, 1.0);
        let y = on_sphere(&mut rng, dy, r);
        let x1 = on_sphere(&mut rng, d, r);
        let r2: f64 = rng.random_range(0.0..=1.0);
        let x2 = on_sphere(&mut rng, d, r2);
        let (lhs, rhs) = growth_terms(phi, &mu, &y, &x1, &x2, p)?;
        for q in 0..5 {
            c = c.max(lhs[q] / rhs[q]);
        }
    }
    let mut ratios = Vec::with_capacity(GROWTH_SHELLS.len());
    for (s, r) in GROWTH_SHELLS.iter().enumerate() {
        let mut rng = seed::rng(seed, tag::PROBES, 2 + s as u64);
        let mut worst = [0.0f64; 5];
        for _ in 0..probes {
            let mu = probe_measure(&mut rng, d, 5, *r);
            let y = on_sphere(&mut rng, dy, *r);
            let x1 = on_sphere(&mut rng, d, *r);
            let x2 = on_sphere(&mut rng, d, *r);
            let (lhs, rhs) = growth_terms(phi, &mu, &y, &x1, &x2, p)?;
            for q in 0..5 {
                let ratio = if lhs[q] == 0.0 {
                    0.0
                } else if c == 0.0 {
                    f64::INFINITY
                } else {
                    lhs[q] / (c * rhs[q])
                };
                worst[q] = worst[q].max(ratio);
            }
        }
        ratios.push(worst);
    }
    let max_ratio = ratios.iter().flatten().copied().fold(0.0, f64::max);
    Ok(GrowthReport {
        p,
        c,
        shells: GROWTH_SHELLS.to_vec(),
        ratios,
        max_ratio,
        allowed_ratio: ALLOWED,
        pass: max_ratio <= ALLOWED,
        finite_difference_fallback: !phi.is_analytic(),
    })
}
