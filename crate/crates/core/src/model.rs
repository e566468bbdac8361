//! Jump-diffusion coefficient sets.
//!
//! `dX = b(X,a)dt + σ^V(X,a)dW + σ^W(X,a)dW0 + ∫β(X-,a,θ) Ñ(dθ,dt)`, with an
//! optional second, common, jump stream whose events hit every particle
//! sharing the common seed.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{CommonNoise, LevySpec, NoiseBundle};
use crate::seed::{self, tag};

pub type Field = Arc<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>;
pub type JumpField = Arc<dyn Fn(&[f64], f64, &[f64], &mut [f64]) + Send + Sync>;

/// A matrix-valued (or vector-valued, `cols == 1`) coefficient of `(x, a)`,
/// stored row-major.
#[derive(Clone)]
pub struct Coefficient {
    eval: Field,
    rows: usize,
    cols: usize,
    state_independent: bool,
    zero: bool,
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Coefficient")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("state_independent", &self.state_independent)
            .field("zero", &self.zero)
            .finish()
    }
}

impl Coefficient {
    pub fn zero(rows: usize, cols: usize) -> Self {
        Self {
            eval: Arc::new(|_, _, out: &mut [f64]| out.fill(0.0)),
            rows,
            cols,
            state_independent: true,
            zero: true,
        }
    }

    pub fn constant(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::affine(rows, cols, values, vec![], vec![0.0; rows * cols])
    }

    /// `offset + Σ_j x_j · slopes[j] + a · action`, each term a `rows × cols` matrix.
    pub fn affine(
        rows: usize,
        cols: usize,
        offset: Vec<f64>,
        slopes: Vec<Vec<f64>>,
        action: Vec<f64>,
    ) -> Result<Self> {
        let len = rows * cols;
        if offset.len() != len || action.len() != len || slopes.iter().any(|s| s.len() != len) {
            return Err(Error::invalid(format!(
                "affine coefficient expects {rows}x{cols} blocks"
            )));
        }
        let zero = offset
            .iter()
            .chain(action.iter())
            .chain(slopes.iter().flatten())
            .all(|v| *v == 0.0);
        let state_independent = slopes.iter().flatten().all(|v| *v == 0.0);
        let eval: Field = Arc::new(move |x: &[f64], a: f64, out: &mut [f64]| {
            for (i, o) in out.iter_mut().enumerate() {
                let mut v = offset[i] + a * action[i];
                for (xj, s) in x.iter().zip(&slopes) {
                    v += xj * s[i];
                }
                *o = v;
            }
        });
        Ok(Self {
            eval,
            rows,
            cols,
            state_independent,
            zero,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, state_independent: bool, f: Field) -> Self {
        Self {
            eval: f,
            rows,
            cols,
            state_independent,
            zero: false,
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64], a: f64, out: &mut [f64]) {
        (self.eval)(x, a, out)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn is_state_independent(&self) -> bool {
        self.state_independent
    }
}

/// Jump amplitude `β(x, a, θ)`.
#[derive(Clone)]
pub struct JumpCoefficient {
    eval: JumpField,
    n: usize,
    q: usize,
    state_independent: bool,
    /// β is affine in θ, so its mark mean is β at the mark mean.
    affine_in_mark: bool,
}

impl fmt::Debug for JumpCoefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("JumpCoefficient")
            .field("n", &self.n)
            .field("q", &self.q)
            .field("state_independent", &self.state_independent)
            .field("affine_in_mark", &self.affine_in_mark)
            .finish()
    }
}

impl JumpCoefficient {
    /// `β = B θ + offset`, with `B` an `n × q` matrix.
    pub fn additive(n: usize, q: usize, matrix: Vec<f64>, offset: Vec<f64>) -> Result<Self> {
        if matrix.len() != n * q || offset.len() != n {
            return Err(Error::invalid("additive jump coefficient: bad shapes"));
        }
        Ok(Self {
            eval: Arc::new(move |_, _, theta: &[f64], out: &mut [f64]| {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = offset[i] + (0..q).map(|j| matrix[i * q + j] * theta[j]).sum::<f64>();
                }
            }),
            n,
            q,
            state_independent: true,
            affine_in_mark: true,
        })
    }

    /// `β_i = x_i (B θ)_i`.
    pub fn proportional(n: usize, q: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != n * q {
            return Err(Error::invalid("proportional jump coefficient: bad shapes"));
        }
        Ok(Self {
            eval: Arc::new(move |x: &[f64], _, theta: &[f64], out: &mut [f64]| {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = x[i] * (0..q).map(|j| matrix[i * q + j] * theta[j]).sum::<f64>();
                }
            }),
            n,
            q,
            state_independent: false,
            affine_in_mark: true,
        })
    }

    pub fn from_fn(n: usize, q: usize, state_independent: bool, f: JumpField) -> Self {
        Self {
            eval: f,
            n,
            q,
            state_independent,
            affine_in_mark: false,
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64], a: f64, theta: &[f64], out: &mut [f64]) {
        (self.eval)(x, a, theta, out)
    }

    pub fn mark_dim(&self) -> usize {
        self.q
    }
}

#[derive(Debug, Clone)]
pub struct JumpComponent {
    pub levy: LevySpec,
    pub beta: JumpCoefficient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialLaw {
    Dirac { point: Vec<f64> },
    Normal { mean: Vec<f64>, std_dev: Vec<f64> },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            Self::Dirac { point } => point.len(),
            Self::Normal { mean, .. } => mean.len(),
        }
    }

    /// Initial state of the particle with idiosyncratic seed `idio_seed`.
    pub fn sample(&self, idio_seed: u64) -> Vec<f64> {
        match self {
            Self::Dirac { point } => point.clone(),
            Self::Normal { mean, std_dev } => {
                let mut rng: ChaCha8Rng = seed::rng(idio_seed, tag::INITIAL, 0);
                mean.iter()
                    .zip(std_dev)
                    .map(|(m, s)| {
                        let z: f64 = rng.sample(StandardNormal);
                        m + s * z
                    })
                    .collect()
            }
        }
    }
}

pub const DEFAULT_COMPENSATOR_BUDGET: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Idio,
    Common,
}

pub struct JumpDiffusionModel {
    pub n: usize,
    pub d_i: usize,
    pub d_c: usize,
    pub drift: Coefficient,
    pub sigma_v: Coefficient,
    pub sigma_w: Coefficient,
    pub idio_jumps: Option<JumpComponent>,
    pub common_jumps: Option<JumpComponent>,
    pub initial: InitialLaw,
    pub lipschitz: f64,
    pub compensator_budget: usize,
    pub compensator_seed: u64,
    marks: RwLock<HashMap<Stream, Arc<Vec<f64>>>>,
    memo: RwLock<HashMap<(Stream, u64), Arc<Vec<f64>>>>,
}

impl Clone for JumpDiffusionModel {
    fn clone(&self) -> Self {
        Self {
            n: self.n,
            d_i: self.d_i,
            d_c: self.d_c,
            drift: self.drift.clone(),
            sigma_v: self.sigma_v.clone(),
            sigma_w: self.sigma_w.clone(),
            idio_jumps: self.idio_jumps.clone(),
            common_jumps: self.common_jumps.clone(),
            initial: self.initial.clone(),
            lipschitz: self.lipschitz,
            compensator_budget: self.compensator_budget,
            compensator_seed: self.compensator_seed,
            marks: RwLock::new(HashMap::new()),
            memo: RwLock::new(HashMap::new()),
        }
    }
}

impl fmt::Debug for JumpDiffusionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("JumpDiffusionModel")
            .field("n", &self.n)
            .field("d_i", &self.d_i)
            .field("d_c", &self.d_c)
            .field("drift", &self.drift)
            .field("sigma_v", &self.sigma_v)
            .field("sigma_w", &self.sigma_w)
            .field("idio_jumps", &self.idio_jumps)
            .field("common_jumps", &self.common_jumps)
            .field("initial", &self.initial)
            .finish()
    }
}

impl JumpDiffusionModel {
    /// Pure diffusion with no noise and zero drift, started at the origin.
    pub fn new(n: usize, d_i: usize, d_c: usize) -> Self {
        Self {
            n,
            d_i,
            d_c,
            drift: Coefficient::zero(n, 1),
            sigma_v: Coefficient::zero(n, d_i),
            sigma_w: Coefficient::zero(n, d_c),
            idio_jumps: None,
            common_jumps: None,
            initial: InitialLaw::Dirac {
                point: vec![0.0; n],
            },
            lipschitz: f64::INFINITY,
            compensator_budget: DEFAULT_COMPENSATOR_BUDGET,
            compensator_seed: 0,
            marks: RwLock::new(HashMap::new()),
            memo: RwLock::new(HashMap::new()),
        }
    }

    /// One-dimensional `dX = b dt + s_v dW + s_w dW0`, constant coefficients.
    pub fn scalar(b: f64, s_v: f64, s_w: f64) -> Self {
        Self::new(1, 1, 1)
            .with_drift(Coefficient::constant(1, 1, vec![b]).unwrap())
            .with_sigma_v(Coefficient::constant(1, 1, vec![s_v]).unwrap())
            .with_sigma_w(Coefficient::constant(1, 1, vec![s_w]).unwrap())
    }

    pub fn with_drift(mut self, c: Coefficient) -> Self {
        self.drift = c;
        self
    }

    pub fn with_sigma_v(mut self, c: Coefficient) -> Self {
        self.sigma_v = c;
        self
    }

    pub fn with_sigma_w(mut self, c: Coefficient) -> Self {
        self.sigma_w = c;
        self
    }

    pub fn with_idio_jumps(mut self, levy: LevySpec, beta: JumpCoefficient) -> Self {
        self.idio_jumps = Some(JumpComponent { levy, beta });
        self
    }

    pub fn with_common_jumps(mut self, levy: LevySpec, beta: JumpCoefficient) -> Self {
        self.common_jumps = Some(JumpComponent { levy, beta });
        self
    }

    pub fn with_initial(mut self, initial: InitialLaw) -> Self {
        self.initial = initial;
        self
    }

    pub fn with_lipschitz(mut self, c1: f64) -> Self {
        self.lipschitz = c1;
        self
    }

    pub fn with_compensator(mut self, budget: usize, seed: u64) -> Self {
        self.compensator_budget = budget;
        self.compensator_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let shape = |c: &Coefficient, r: usize, k: usize, name: &str| {
            if c.rows != r || c.cols != k {
                Err(Error::invalid(format!(
                    "{name} is {}x{}, expected {r}x{k}",
                    c.rows, c.cols
                )))
            } else {
                Ok(())
            }
        };
        shape(&self.drift, self.n, 1, "drift")?;
        shape(&self.sigma_v, self.n, self.d_i, "sigma_v")?;
        shape(&self.sigma_w, self.n, self.d_c, "sigma_w")?;
        for comp in self.idio_jumps.iter().chain(self.common_jumps.iter()) {
            comp.levy.validate()?;
            if comp.beta.n != self.n || comp.beta.q != comp.levy.marks.dim() {
                return Err(Error::invalid(
                    "jump coefficient shape does not match state/mark dimensions",
                ));
            }
        }
        if self.initial.dim() != self.n {
            return Err(Error::invalid(
                "initial law dimension does not match state dimension",
            ));
        }
        if self.compensator_budget == 0 {
            return Err(Error::invalid("compensator budget must be positive"));
        }
        Ok(())
    }

    pub fn component(&self, s: Stream) -> Option<&JumpComponent> {
        match s {
            Stream::Idio => self.idio_jumps.as_ref(),
            Stream::Common => self.common_jumps.as_ref(),
        }
        .filter(|c| c.levy.is_active())
    }

    pub fn has_common_drivers(&self) -> bool {
        (self.d_c > 0 && !self.sigma_w.is_zero()) || self.component(Stream::Common).is_some()
    }

    pub fn is_trivial(&self) -> bool {
        self.drift.is_zero()
            && self.sigma_v.is_zero()
            && self.sigma_w.is_zero()
            && self.component(Stream::Idio).is_none()
            && self.component(Stream::Common).is_none()
    }

    /// Draw the noise this model consumes.
    pub fn sample_noise(&self, common: Arc<CommonNoise>, idio_seed: u64) -> Result<NoiseBundle> {
        NoiseBundle::sample_idio(
            common,
            self.d_i,
            self.component(Stream::Idio).map(|c| &c.levy),
            idio_seed,
        )
    }

    pub fn sample_common(
        &self,
        grid: &crate::grid::TimeGrid,
        common_seed: u64,
    ) -> Result<CommonNoise> {
        CommonNoise::sample(
            grid,
            self.d_c,
            self.component(Stream::Common).map(|c| &c.levy),
            common_seed,
        )
    }

    fn fixed_marks(&self, s: Stream, budget: usize, seed_tag: &str) -> Arc<Vec<f64>> {
        if let Some(m) = self.marks.read().unwrap().get(&s) {
            if m.len() == budget * self.component(s).map_or(0, |c| c.levy.marks.dim()) {
                return m.clone();
            }
        }
        let comp = self.component(s).expect("active component");
        let m = Arc::new(comp.levy.marks.fixed_marks(
            budget,
            seed::derive(self.compensator_seed, seed_tag, s as u64),
        ));
        self.marks.write().unwrap().insert(s, m.clone());
        m
    }

    /// Compensator rate `λ ∫ β(x,a,θ) ν̂(dθ)` for stream `s`, written to `out`.
    pub fn compensator(&self, s: Stream, x: &[f64], a: f64, out: &mut [f64]) {
        let Some(comp) = self.component(s) else {
            out.fill(0.0);
            return;
        };
        let lambda = comp.levy.intensity;
        if comp.beta.affine_in_mark {
            let mean = comp.levy.marks.mean();
            comp.beta.eval(x, a, &mean, out);
            out.iter_mut().for_each(|v| *v *= lambda);
            return;
        }
        let key = (s, a.to_bits());
        if comp.beta.state_independent {
            if let Some(v) = self.memo.read().unwrap().get(&key) {
                out.copy_from_slice(v);
                return;
            }
        }
        let budget = self.compensator_budget;
        let marks = self.fixed_marks(s, budget, tag::COMPENSATOR_MARKS);
        let q = comp.levy.marks.dim();
        let mut acc = vec![crate::stats::CompensatedSum::new(); self.n];
        let mut buf = vec![0.0; self.n];
        for i in 0..budget {
            comp.beta.eval(x, a, &marks[i * q..(i + 1) * q], &mut buf);
            for (c, v) in acc.iter_mut().zip(&buf) {
                c.add(*v);
            }
        }
        for (o, c) in out.iter_mut().zip(&acc) {
            *o = lambda * c.value() / budget as f64;
        }
        if comp.beta.state_independent {
            self.memo
                .write()
                .unwrap()
                .insert(key, Arc::new(out.to_vec()));
        }
    }

    /// Spot-check of the declared Lipschitz constant on random probe pairs
    /// and at the origin, for every action in `actions`.
    pub fn check_lipschitz(
        &self,
        actions: &[f64],
        probes: usize,
        radius: f64,
        probe_seed: u64,
    ) -> LipschitzReport {
        let mut rng = seed::rng(probe_seed, tag::PROBES, 1);
        let n = self.n;
        let mut worst_ratio: f64 = 0.0;
        let mut at_origin: f64 = 0.0;
        let zero = vec![0.0; n];
        for &a in actions {
            at_origin = at_origin.max(self.coefficient_distance(&zero, None, a));
            for _ in 0..probes {
                let x: Vec<f64> = (0..n)
                    .map(|_| radius * (2.0 * rng.random::<f64>() - 1.0))
                    .collect();
                let y: Vec<f64> = (0..n)
                    .map(|_| radius * (2.0 * rng.random::<f64>() - 1.0))
                    .collect();
                let dist = x
                    .iter()
                    .zip(&y)
                    .map(|(u, v)| (u - v).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if dist > 0.0 {
                    worst_ratio =
                        worst_ratio.max(self.coefficient_distance(&x, Some(&y), a) / dist);
                }
            }
        }
        LipschitzReport {
            declared: self.lipschitz,
            max_ratio: worst_ratio,
            value_at_origin: at_origin,
            pass: worst_ratio <= 1.05 * self.lipschitz && at_origin <= 1.05 * self.lipschitz,
        }
    }

    /// `|b(x)-b(y)| + |σ(x)-σ(y)| + λ E|β(x)-β(y)|` (or the size at `x` when `y` is absent).
    fn coefficient_distance(&self, x: &[f64], y: Option<&[f64]>, a: f64) -> f64 {
        let diff = |c: &Coefficient| {
            let mut u = vec![0.0; c.rows * c.cols];
            let mut v = vec![0.0; c.rows * c.cols];
            c.eval(x, a, &mut u);
            if let Some(y) = y {
                c.eval(y, a, &mut v);
            }
            u.iter().zip(&v).map(|(p, q)| (p - q).powi(2)).sum::<f64>()
        };
        let mut total =
            diff(&self.drift).sqrt() + (diff(&self.sigma_v) + diff(&self.sigma_w)).sqrt();
        for s in [Stream::Idio, Stream::Common] {
            if let Some(comp) = self.component(s) {
                let budget = 256;
                let marks = comp.levy.marks.fixed_marks(
                    budget,
                    seed::derive(self.compensator_seed, tag::OPERATOR_MARKS, 7),
                );
                let q = comp.levy.marks.dim();
                let mut u = vec![0.0; self.n];
                let mut v = vec![0.0; self.n];
                let mut acc = 0.0;
                for i in 0..budget {
                    let th = &marks[i * q..(i + 1) * q];
                    comp.beta.eval(x, a, th, &mut u);
                    match y {
                        Some(y) => comp.beta.eval(y, a, th, &mut v),
                        None => v.fill(0.0),
                    }
                    acc += u
                        .iter()
                        .zip(&v)
                        .map(|(p, q)| (p - q).powi(2))
                        .sum::<f64>()
                        .sqrt();
                }
                total += comp.levy.intensity * acc / budget as f64;
            }
        }
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub declared: f64,
    pub max_ratio: f64,
    pub value_at_origin: f64,
    pub pass: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::MarkDistribution;

    #[test]
    fn affine_coefficient_evaluates() {
        let c = Coefficient::affine(1, 1, vec![1.0], vec![vec![2.0]], vec![3.0]).unwrap();
        let mut out = [0.0];
        c.eval(&[0.5], 2.0, &mut out);
        assert_eq!(out[0], 1.0 + 1.0 + 6.0);
        assert!(!c.is_state_independent());
    }

    #[test]
    fn compensator_of_centered_marks_vanishes() {
        let m = JumpDiffusionModel::new(1, 0, 0).with_idio_jumps(
            LevySpec::new(
                2.0,
                MarkDistribution::Normal {
                    mean: vec![0.5],
                    std_dev: vec![1.0],
                },
            )
            .unwrap(),
            JumpCoefficient::additive(1, 1, vec![1.0], vec![0.0]).unwrap(),
        );
        let mut out = [0.0];
        m.compensator(Stream::Idio, &[3.0], 0.0, &mut out);
        assert_eq!(out[0], 1.0);
    }

    #[test]
    fn generic_compensator_uses_fixed_marks_and_memoizes() {
        let beta = JumpCoefficient::from_fn(
            1,
            1,
            true,
            Arc::new(|_, _, th: &[f64], out: &mut [f64]| out[0] = th[0] * th[0]),
        );
        let m = JumpDiffusionModel::new(1, 0, 0)
            .with_idio_jumps(
                LevySpec::new(
                    1.0,
                    MarkDistribution::Normal {
                        mean: vec![0.0],
                        std_dev: vec![1.0],
                    },
                )
                .unwrap(),
                beta,
            )
            .with_compensator(20_000, 5);
        let mut a = [0.0];
        let mut b = [0.0];
        m.compensator(Stream::Idio, &[0.0], 0.0, &mut a);
        m.compensator(Stream::Idio, &[9.0], 0.0, &mut b);
        assert_eq!(a, b);
        assert!((a[0] - 1.0).abs() < 0.05, "{}", a[0]);
    }

    #[test]
    fn lipschitz_spot_check() {
        let m = JumpDiffusionModel::new(1, 1, 0)
            .with_drift(Coefficient::affine(1, 1, vec![0.5], vec![vec![-1.0]], vec![0.0]).unwrap())
            .with_lipschitz(1.0);
        assert!(m.check_lipschitz(&[0.0], 50, 5.0, 1).pass);
        let tight = m.clone().with_lipschitz(0.5);
        assert!(!tight.check_lipschitz(&[0.0], 50, 5.0, 1).pass);
    }
}
