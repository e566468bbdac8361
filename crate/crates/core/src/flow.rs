//! Particle approximation of the conditional law flow `μ_t = Law(X_t | G_t)`
//! and checks of the stochastic-integral and bracket identities for the
//! projected process `X^G = E[X | G]`.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::copies::{copy_seed, simulate_members};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::JumpDiffusionModel;
use crate::noise::CommonNoise;
use crate::path::{common_noise, fmt_num, PathRecord};
use crate::seed::{self, tag};
use crate::stats::{self, CompensatedSum, Summary};

/// Finite weighted point cloud.
pub trait Measure {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn point(&self, i: usize) -> &[f64];
    fn weight(&self, i: usize) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `⟨μ, φ⟩`.
    fn pair(&self, phi: &dyn Fn(&[f64]) -> f64) -> Result<f64> {
        let mut acc = CompensatedSum::new();
        for i in 0..self.len() {
            let v = phi(self.point(i));
            if !v.is_finite() {
                return Err(Error::numerical(
                    0,
                    format!("test function not finite at particle {i}"),
                ));
            }
            acc.add(self.weight(i) * v);
        }
        Ok(acc.value())
    }
}

/// Uniformly weighted particle cloud at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalConditionalLaw {
    pub n: usize,
    /// `M × n`, row-major.
    pub states: Vec<f64>,
    pub common_seed: u64,
    pub node: usize,
}

impl EmpiricalConditionalLaw {
    pub fn from_points(n: usize, states: Vec<f64>) -> Result<Self> {
        if n == 0 || states.is_empty() || states.len() % n != 0 {
            return Err(Error::invalid(
                "particle array must be a nonempty multiple of the dimension",
            ));
        }
        Ok(Self {
            n,
            states,
            common_seed: 0,
            node: 0,
        })
    }
}

impl Measure for EmpiricalConditionalLaw {
    fn dim(&self) -> usize {
        self.n
    }
    fn len(&self) -> usize {
        self.states.len() / self.n
    }
    fn point(&self, i: usize) -> &[f64] {
        &self.states[i * self.n..(i + 1) * self.n]
    }
    fn weight(&self, _: usize) -> f64 {
        1.0 / self.len() as f64
    }
}

/// Weighted discrete measure (mixtures, push-forwards).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    pub n: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(n: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if n == 0 || points.len() != n * weights.len() {
            return Err(Error::invalid("points and weights disagree"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("weights must be nonnegative"));
        }
        Ok(Self { n, points, weights })
    }

    pub fn from_measure(m: &dyn Measure) -> Self {
        let n = m.dim();
        let mut points = Vec::with_capacity(m.len() * n);
        let mut weights = Vec::with_capacity(m.len());
        for i in 0..m.len() {
            points.extend_from_slice(m.point(i));
            weights.push(m.weight(i));
        }
        Self { n, points, weights }
    }

    /// `λ μ + (1 - λ) ν` as a weighted union.
    pub fn mixture(mu: &dyn Measure, nu: &dyn Measure, lambda: f64) -> Result<Self> {
        if mu.dim() != nu.dim() {
            return Err(Error::invalid(
                "mixture of measures of different dimensions",
            ));
        }
        let mut out = Self::from_measure(mu);
        out.weights.iter_mut().for_each(|w| *w *= lambda);
        for i in 0..nu.len() {
            out.points.extend_from_slice(nu.point(i));
            out.weights.push((1.0 - lambda) * nu.weight(i));
        }
        Ok(out)
    }

    pub fn total_mass(&self) -> f64 {
        stats::compensated_sum(self.weights.iter().copied())
    }
}

impl Measure for DiscreteMeasure {
    fn dim(&self) -> usize {
        self.n
    }
    fn len(&self) -> usize {
        self.weights.len()
    }
    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.n..(i + 1) * self.n]
    }
    fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }
}

/// `(1/M) Σ φ(particle)`.
pub fn pair(mu: &dyn Measure, phi: &dyn Fn(&[f64]) -> f64) -> Result<f64> {
    mu.pair(phi)
}

/// `M` particle paths on one common noise, viewed node by node.
#[derive(Debug, Clone)]
pub struct MeasureFlow {
    pub grid: TimeGrid,
    pub common: Arc<CommonNoise>,
    pub particles: Vec<PathRecord>,
}

/// Idiosyncratic seeds of the `M` particles rooted at `seed_base`:
/// the base seed itself, then its copies.
pub fn particle_seeds(seed_base: u64, m: usize) -> Vec<u64> {
    std::iter::once(seed_base)
        .chain((1..m as u64).map(|i| copy_seed(seed_base, i)))
        .collect()
}

pub fn empirical_conditional_law(
    model: &JumpDiffusionModel,
    grid: &TimeGrid,
    common_seed: u64,
    m: usize,
    seed_base: u64,
) -> Result<MeasureFlow> {
    if m == 0 {
        return Err(Error::invalid("need at least one particle"));
    }
    let common = common_noise(model, grid, common_seed)?;
    let particles = simulate_members(model, &common, &particle_seeds(seed_base, m), None)?;
    Ok(MeasureFlow {
        grid: grid.clone(),
        common,
        particles,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPath {
    pub values: Vec<f64>,
    pub left: Vec<f64>,
    /// Nodes where some particle jumps.
    pub jump_nodes: Vec<usize>,
}

impl MeasureFlow {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.particles[0].n
    }

    pub fn common_seed(&self) -> u64 {
        self.common.seed
    }

    pub fn law_at(&self, k: usize) -> EmpiricalConditionalLaw {
        self.collect(k, |p| p.value(k))
    }

    /// Cloud of left limits at node `k`.
    pub fn left_law_at(&self, k: usize) -> EmpiricalConditionalLaw {
        self.collect(k, |p| p.left(k))
    }

    fn collect<'a>(
        &'a self,
        k: usize,
        f: impl Fn(&'a PathRecord) -> &'a [f64],
    ) -> EmpiricalConditionalLaw {
        let n = self.dim();
        let mut states = Vec::with_capacity(self.len() * n);
        for p in &self.particles {
            states.extend_from_slice(f(p));
        }
        EmpiricalConditionalLaw {
            n,
            states,
            common_seed: self.common_seed(),
            node: k,
        }
    }

    /// Node-wise `⟨μ_k, φ⟩` with left values from particle left limits.
    pub fn projected_process(&self, phi: &dyn Fn(&[f64]) -> f64) -> Result<ProjectedPath> {
        let steps = self.grid.steps();
        let mut values = Vec::with_capacity(steps + 1);
        let mut left = Vec::with_capacity(steps + 1);
        let mut jump_nodes = Vec::new();
        for k in 0..=steps {
            values.push(self.law_at(k).pair(phi)?);
            if self.particles.iter().any(|p| p.jump_at(k).is_some()) {
                jump_nodes.push(k);
                left.push(self.left_law_at(k).pair(phi)?);
            } else {
                left.push(*values.last().unwrap());
            }
        }
        Ok(ProjectedPath {
            values,
            left,
            jump_nodes,
        })
    }

    /// Long format `t, particle_id, x_1..x_n`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let n = self.dim();
        let mut header = vec!["t".to_string(), "particle_id".into()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        wr.write_record(&header)?;
        for k in 0..=self.grid.steps() {
            for (pid, p) in self.particles.iter().enumerate() {
                let mut row = vec![fmt_num(self.grid.t(k)), pid.to_string()];
                row.extend(p.value(k).iter().map(|v| fmt_num(*v)));
                wr.write_record(&row)?;
            }
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Per-seed pools used by the projected-process checks: a base path, the
/// pool that forms `μ` (and hence `X^G`), and an independent copy pool.
struct Pools {
    base: PathRecord,
    flow: Vec<PathRecord>,
    copies: Vec<PathRecord>,
    common: Arc<CommonNoise>,
}

fn pools(model: &JumpDiffusionModel, grid: &TimeGrid, common_seed: u64, m: usize) -> Result<Pools> {
    let common = common_noise(model, grid, common_seed)?;
    let base_seed = seed::derive(common_seed, tag::PARTICLE, 0);
    let pool_seed = seed::derive(common_seed, tag::DISJOINT_POOL, 0);
    let mut seeds = vec![base_seed];
    seeds.extend((1..=m as u64).map(|i| copy_seed(base_seed, i)));
    seeds.extend((1..=m as u64).map(|i| copy_seed(pool_seed, i)));
    let mut all = simulate_members(model, &common, &seeds, None)?;
    let copies = all.split_off(m + 1);
    let flow = all.split_off(1);
    Ok(Pools {
        base: all.pop().unwrap(),
        flow,
        copies,
        common,
    })
}

fn mean_increments(paths: &[PathRecord], coord: usize) -> Vec<f64> {
    let steps = paths[0].steps();
    (0..steps)
        .map(|k| {
            stats::compensated_sum(
                paths
                    .iter()
                    .map(|p| p.value(k + 1)[coord] - p.value(k)[coord]),
            ) / paths.len() as f64
        })
        .collect()
}

pub type StateFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type CommonOracle = Arc<dyn Fn(&CommonNoise) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityStats {
    pub mean_residual: f64,
    pub std_error: f64,
    pub t_statistic: f64,
    /// `sqrt(mean residual²) / sqrt(mean lhs²)`, 0 when both vanish.
    pub relative_rms: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl IdentityStats {
    fn from(lhs: &[f64], rhs: &[f64], t_threshold: f64, allowance: f64) -> Self {
        let res: Vec<f64> = lhs.iter().zip(rhs).map(|(a, b)| a - b).collect();
        let s = Summary::of(&res);
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        let (num, den) = (rms(&res), rms(lhs));
        let threshold = t_threshold * s.std_error + allowance;
        Self {
            mean_residual: s.mean,
            std_error: s.std_error,
            t_statistic: s.t_statistic(),
            relative_rms: if num == 0.0 { 0.0 } else { num / den },
            threshold,
            pass: s.mean.abs() <= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    /// Slope of the estimate regressed on the oracle value, and its t-statistic against slope 1.
    pub slope: f64,
    pub slope_t_vs_one: f64,
    /// `sqrt(Σ(est - oracle)²) / sqrt(Σ oracle²)`.
    pub relative_residual: f64,
}

impl OracleComparison {
    fn from(est: &[f64], oracle: &[f64]) -> Result<Self> {
        let fit = stats::linear_fit(oracle, est)?;
        let num: f64 = est.iter().zip(oracle).map(|(e, a)| (e - a).powi(2)).sum();
        let den: f64 = oracle.iter().map(|a| a * a).sum();
        Ok(Self {
            slope: fit.slope,
            slope_t_vs_one: (fit.slope - 1.0) / fit.slope_std_error,
            relative_residual: (num / den).sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalIntegralReport {
    pub n_common: usize,
    pub particles: usize,
    /// `∫Z dX^G` against `E[∫Z dX' | F]` (copies from an independent pool).
    pub identity: IdentityStats,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    /// `∫ E[Z|G] dX^G`, the naive guess.
    pub naive: Vec<f64>,
    /// `E[∫Z dX | G]` estimated by averaging `∫Z^p dX^p` over the particles.
    pub conditional: Vec<f64>,
    pub oracle: Option<Vec<f64>>,
    pub naive_vs_oracle: Option<OracleComparison>,
    pub conditional_vs_oracle: Option<OracleComparison>,
    pub seeds: Vec<u64>,
}

/// Check `∫ Z_{s-} dX^G_s = E[∫ Z_{s-} dX'_s | F]` along simulated flows.
///
/// `integrand` maps the (possibly augmented) state to `Z`; `coord` selects
/// the coordinate playing `X`. With an `oracle` for `E[∫Z dX | G]` (a
/// function of the common noise) the naive guess and the copy-based
/// conditional expectation are also compared against it.
#[allow(clippy::too_many_arguments)]
pub fn verify_conditional_integral(
    model: &JumpDiffusionModel,
    grid: &TimeGrid,
    integrand: &StateFn,
    coord: usize,
    common_seeds: &[u64],
    m: usize,
    t_threshold: f64,
    oracle: Option<&CommonOracle>,
) -> Result<ConditionalIntegralReport> {
    if m < 2 {
        return Err(Error::InsufficientData(
            "need at least two particles per pool".into(),
        ));
    }
    if common_seeds.len() < 2 {
        return Err(Error::InsufficientData(
            "need at least two common seeds".into(),
        ));
    }
    if coord >= model.n {
        return Err(Error::invalid("coordinate out of range"));
    }
    let steps = grid.steps();
    let rows: Vec<[f64; 5]> = common_seeds
        .par_iter()
        .map(|&cs| -> Result<[f64; 5]> {
            let p = pools(model, grid, cs, m)?;
            let dxg = mean_increments(&p.flow, coord);
            let dxc = mean_increments(&p.copies, coord);
            let mut lhs = CompensatedSum::new();
            let mut rhs = CompensatedSum::new();
            let mut naive = CompensatedSum::new();
            for k in 0..steps {
                let z = integrand(p.base.value(k));
                lhs.add(z * dxg[k]);
                rhs.add(z * dxc[k]);
                let zg =
                    stats::compensated_sum(p.flow.iter().map(|q| integrand(q.value(k)))) / m as f64;
                naive.add(zg * dxg[k]);
            }
            let cond =
                stats::compensated_sum(p.flow.iter().map(|q| {
                    stats::compensated_sum((0..steps).map(|k| {
                        integrand(q.value(k)) * (q.value(k + 1)[coord] - q.value(k)[coord])
                    }))
                })) / m as f64;
            let orc = oracle.map_or(f64::NAN, |o| o(&p.common));
            Ok([lhs.value(), rhs.value(), naive.value(), cond, orc])
        })
        .collect::<Result<_>>()?;
    let col = |i: usize| rows.iter().map(|r| r[i]).collect::<Vec<f64>>();
    let (lhs, rhs, naive, conditional) = (col(0), col(1), col(2), col(3));
    let oracle_vals = oracle.map(|_| col(4));
    let (nvo, cvo) = match &oracle_vals {
        Some(o) => (
            Some(OracleComparison::from(&naive, o)?),
            Some(OracleComparison::from(&conditional, o)?),
        ),
        None => (None, None),
    };
    Ok(ConditionalIntegralReport {
        n_common: common_seeds.len(),
        particles: m,
        identity: IdentityStats::from(&lhs, &rhs, t_threshold, 0.0),
        lhs,
        rhs,
        naive,
        conditional,
        oracle: oracle_vals,
        naive_vs_oracle: nvo,
        conditional_vs_oracle: cvo,
        seeds: common_seeds.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalBracketReport {
    pub n_common: usize,
    pub particles: usize,
    /// `∫Z d[X^G, Y^G]` against `E[∫Z d[X'', Y'] | F]`.
    pub projected_pair: IdentityStats,
    /// `∫Z d[X^G, Y]` against `E[∫Z d[X', Y] | F]`.
    pub projected_base: IdentityStats,
    pub lhs_pair: Vec<f64>,
    pub rhs_pair: Vec<f64>,
    pub lhs_base: Vec<f64>,
    pub rhs_base: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// Bracket identities for coordinates `ix` (X) and `iy` (Y) of one joint
/// model, brackets realized from grid increments. The pair-bracket check
/// allows for the `O(1/M)` self-pair term carried by `[X^G, Y^G]` at
/// finite `M`, estimated from the flow pool.
#[allow(clippy::too_many_arguments)]
pub fn verify_conditional_bracket(
    model: &JumpDiffusionModel,
    grid: &TimeGrid,
    integrand: &StateFn,
    ix: usize,
    iy: usize,
    common_seeds: &[u64],
    m: usize,
    t_threshold: f64,
) -> Result<ConditionalBracketReport> {
    if m < 2 {
        return Err(Error::InsufficientData(
            "need at least two particles per pool".into(),
        ));
    }
    if common_seeds.len() < 2 {
        return Err(Error::InsufficientData(
            "need at least two common seeds".into(),
        ));
    }
    if ix >= model.n || iy >= model.n {
        return Err(Error::invalid("coordinate out of range"));
    }
    let steps = grid.steps();
    let rows: Vec<[f64; 5]> = common_seeds
        .par_iter()
        .map(|&cs| -> Result<[f64; 5]> {
            let p = pools(model, grid, cs, m)?;
            let dxg = mean_increments(&p.flow, ix);
            let dyg = mean_increments(&p.flow, iy);
            let dxc = mean_increments(&p.copies, ix);
            let mf = m as f64;
            let mut acc = [CompensatedSum::new(); 5];
            for k in 0..steps {
                let z = integrand(p.base.value(k));
                let inc = |q: &PathRecord, i: usize| q.value(k + 1)[i] - q.value(k)[i];
                acc[0].add(z * dxg[k] * dyg[k]);
                // distinct-pair average over the copy pool, via sums
                let sx = dxc[k] * mf;
                let sy = stats::compensated_sum(p.copies.iter().map(|q| inc(q, iy)));
                let diag = stats::compensated_sum(p.copies.iter().map(|q| inc(q, ix) * inc(q, iy)));
                acc[1].add(z * (sx * sy - diag) / (mf * (mf - 1.0)));
                let dy = inc(&p.base, iy);
                acc[2].add(z * dxg[k] * dy);
                acc[3].add(z * dxc[k] * dy);
                let self_pairs =
                    stats::compensated_sum(p.flow.iter().map(|q| inc(q, ix) * inc(q, iy)));
                acc[4].add(z * self_pairs / (mf * mf));
            }
            Ok(acc.map(|a| a.value()))
        })
        .collect::<Result<_>>()?;
    let col = |i: usize| rows.iter().map(|r| r[i]).collect::<Vec<f64>>();
    let allowance = stats::mean(&col(4).iter().map(|v| v.abs()).collect::<Vec<_>>());
    let (lp, rp, lb, rb) = (col(0), col(1), col(2), col(3));
    Ok(ConditionalBracketReport {
        n_common: common_seeds.len(),
        particles: m,
        projected_pair: IdentityStats::from(&lp, &rp, t_threshold, allowance),
        projected_base: IdentityStats::from(&lb, &rb, t_threshold, 0.0),
        lhs_pair: lp,
        rhs_pair: rp,
        lhs_base: lb,
        rhs_base: rb,
        seeds: common_seeds.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_time_grid;

    #[test]
    fn pair_is_arithmetic_mean() {
        let mu = EmpiricalConditionalLaw::from_points(1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(mu.pair(&|x| x[0]).unwrap(), 2.0);
        assert_eq!(mu.pair(&|_| 0.7).unwrap(), 0.7);
    }

    #[test]
    fn pair_rejects_non_finite() {
        let mu = EmpiricalConditionalLaw::from_points(1, vec![0.0]).unwrap();
        assert!(matches!(
            mu.pair(&|x| 1.0 / x[0]),
            Err(Error::NumericalFailure { .. })
        ));
    }

    #[test]
    fn single_particle_flow() {
        let g = build_time_grid(1.0, 10).unwrap();
        let m = JumpDiffusionModel::scalar(0.0, 1.0, 1.0);
        let f = empirical_conditional_law(&m, &g, 3, 1, 11).unwrap();
        let proj = f.projected_process(&|x| x[0].sin()).unwrap();
        for k in 0..=10 {
            assert_eq!(proj.values[k], f.particles[0].value(k)[0].sin());
        }
    }

    #[test]
    fn continuous_flow_has_no_projected_jumps() {
        let g = build_time_grid(1.0, 10).unwrap();
        let m = JumpDiffusionModel::scalar(0.0, 1.0, 1.0);
        let f = empirical_conditional_law(&m, &g, 3, 20, 11).unwrap();
        assert!(f
            .projected_process(&|x| x[0].tanh())
            .unwrap()
            .jump_nodes
            .is_empty());
    }

    #[test]
    fn mixture_mass_is_one() {
        let mu = EmpiricalConditionalLaw::from_points(1, vec![1.0, 2.0]).unwrap();
        let nu = EmpiricalConditionalLaw::from_points(1, vec![5.0]).unwrap();
        let mix = DiscreteMeasure::mixture(&mu, &nu, 0.3).unwrap();
        assert!((mix.total_mass() - 1.0).abs() < 1e-15);
        assert!((mix.pair(&|x| x[0]).unwrap() - (0.3 * 1.5 + 0.7 * 5.0)).abs() < 1e-14);
    }

    #[test]
    fn csv_long_format_rows() {
        let g = build_time_grid(1.0, 3).unwrap();
        let m = JumpDiffusionModel::scalar(0.0, 1.0, 0.0);
        let f = empirical_conditional_law(&m, &g, 0, 4, 1).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 1 + 4 * 4);
        assert_eq!(s.lines().next().unwrap(), "t,particle_id,x_1");
    }
}
