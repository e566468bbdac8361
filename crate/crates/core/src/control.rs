//! Partially observed control: closed-loop particle flows, objective
//! estimates, the generator pair `(L, M)`, the Bellman residual and a
//! brute-force check of the greedy feedback.
//!
//! The observation filtration is generated by the common Brownian motion,
//! so models with common jumps are rejected. Idiosyncratic jumps enter the
//! operators through a fixed set of marks.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cylindrical::{CylindricalFunctional, Frozen, Monomial, OuterFunction, TestFunction};
use crate::error::{Error, Result};
use crate::flow::{EmpiricalConditionalLaw, Measure, MeasureFlow};
use crate::grid::TimeGrid;
use crate::ito::{common_seeds, flow_pool_seeds, PilotConfig, PilotLevel, ToleranceBudget};
use crate::model::{JumpDiffusionModel, Stream};
use crate::path::{common_noise, fmt_num, simulate_cloud};
use crate::seed::{self, tag};
use crate::stats::{self, CompensatedSum, Summary};

pub type RunningReward = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;
pub type TerminalReward = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

pub const DEFAULT_MARK_BUDGET: usize = 10_000;
pub const MAX_BASELINE_POLICIES: usize = 100_000;
pub const MAX_SWITCH_NODES: usize = 4;

/// Hamiltonians within this relative gap of the best count as tied.
const TIE_TOL: f64 = 1e-12;

#[derive(Clone)]
pub struct ControlProblem {
    pub model: JumpDiffusionModel,
    pub actions: Vec<f64>,
    pub running: RunningReward,
    pub terminal: TerminalReward,
    /// Declared `C₂` in `|f| + |g| ≤ C₂(1 + |x|²)`.
    pub growth: f64,
    pub horizon: f64,
}

impl fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProblem")
            .field("model", &self.model)
            .field("actions", &self.actions)
            .field("growth", &self.growth)
            .field("horizon", &self.horizon)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthCheck {
    pub max_ratio: f64,
    pub pass: bool,
}

impl ControlProblem {
    pub fn new(
        model: JumpDiffusionModel,
        actions: Vec<f64>,
        running: RunningReward,
        terminal: TerminalReward,
        growth: f64,
        horizon: f64,
    ) -> Result<Self> {
        model.validate()?;
        if actions.is_empty() {
            return Err(Error::invalid("action set is empty"));
        }
        if actions.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("actions must be finite"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid("horizon must be positive"));
        }
        if !(growth >= 0.0) {
            return Err(Error::invalid("growth constant must be nonnegative"));
        }
        if model.component(Stream::Common).is_some() {
            return Err(Error::Unsupported(
                "controlled flows are observed through the common Brownian motion only; common jumps are not supported"
                    .into(),
            ));
        }
        Ok(Self {
            model,
            actions,
            running,
            terminal,
            growth,
            horizon,
        })
    }

    /// Spot-check of the quadratic growth bound on uniform probes in the
    /// cube of half-width `radius`, for every action.
    pub fn check_growth(&self, probes: usize, radius: f64, probe_seed: u64) -> GrowthCheck {
        let mut rng = seed::rng(probe_seed, tag::PROBES, 2);
        let n = self.model.n;
        let mut x = vec![0.0; n];
        let mut worst: f64 = 0.0;
        for i in 0..probes.max(1) {
            if i > 0 {
                for v in x.iter_mut() {
                    *v = radius * (2.0 * rng.random::<f64>() - 1.0);
                }
            }
            let r2: f64 = x.iter().map(|v| v * v).sum();
            let g = (self.terminal)(&x).abs();
            for &a in &self.actions {
                let lhs = (self.running)(&x, a).abs() + g;
                let ratio = if lhs == 0.0 {
                    0.0
                } else {
                    lhs / (self.growth * (1.0 + r2))
                };
                worst = worst.max(if ratio.is_nan() { f64::INFINITY } else { ratio });
            }
        }
        GrowthCheck {
            max_ratio: worst,
            pass: worst <= 1.0,
        }
    }

    fn start_of(&self, grid: &TimeGrid) -> Result<f64> {
        let start = self.horizon - grid.horizon();
        if start < -1e-12 * self.horizon {
            return Err(Error::invalid("grid extends past the problem horizon"));
        }
        Ok(start.max(0.0))
    }
}

/// What a feedback rule sees at node `node`.
pub struct PolicyInput<'a> {
    pub node: usize,
    pub t: f64,
    pub law: &'a EmpiricalConditionalLaw,
}

pub type PolicyRule = Arc<dyn Fn(&PolicyInput<'_>) -> Result<usize> + Send + Sync>;

/// A rule `(t_k, μ_k) ↦` action index. It only sees the particle cloud and
/// its common seed, so it is adapted to the common noise.
#[derive(Clone)]
pub struct FeedbackPolicy {
    pub name: String,
    rule: PolicyRule,
}

impl fmt::Debug for FeedbackPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FeedbackPolicy({})", self.name)
    }
}

impl FeedbackPolicy {
    pub fn new(name: impl Into<String>, rule: PolicyRule) -> Self {
        Self {
            name: name.into(),
            rule,
        }
    }

    pub fn decide(&self, input: &PolicyInput<'_>) -> Result<usize> {
        (self.rule)(input)
    }

    pub fn constant(index: usize) -> Self {
        Self::new(format!("constant-{index}"), Arc::new(move |_| Ok(index)))
    }

    /// Action `indices[j]` on nodes `[starts[j], starts[j+1])`; `starts[0]` must be 0.
    pub fn piecewise(starts: Vec<usize>, indices: Vec<usize>) -> Result<Self> {
        if starts.is_empty() || starts.len() != indices.len() || starts[0] != 0 {
            return Err(Error::invalid(
                "piecewise policy needs one action per segment, first segment at node 0",
            ));
        }
        if starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("segment starts must be strictly increasing"));
        }
        let name = format!("piecewise-{indices:?}");
        Ok(Self::new(
            name,
            Arc::new(move |inp| {
                let j = starts.partition_point(|s| *s <= inp.node) - 1;
                Ok(indices[j])
            }),
        ))
    }

    /// `positive` when `⟨μ, φ⟩ ≥ 0`, otherwise `negative`.
    pub fn sign_of_mean(
        phi: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
        positive: usize,
        negative: usize,
    ) -> Self {
        Self::new(
            "sign-of-mean",
            Arc::new(move |inp| {
                Ok(if inp.law.pair(&*phi)? >= 0.0 {
                    positive
                } else {
                    negative
                })
            }),
        )
    }

    /// Uniform draw per `(common seed, node)`.
    pub fn uniform_random(n_actions: usize, policy_seed: u64) -> Result<Self> {
        if n_actions == 0 {
            return Err(Error::invalid("no actions to draw from"));
        }
        Ok(Self::new(
            "uniform-random",
            Arc::new(move |inp| {
                let s = seed::derive(policy_seed, tag::POLICY, inp.law.common_seed);
                let mut rng = seed::rng(s, tag::POLICY, inp.node as u64);
                Ok(rng.random_range(0..n_actions))
            }),
        ))
    }

    /// Pointwise maximizer of the Hamiltonian of `v`, lowest index on ties.
    pub fn greedy(
        problem: Arc<ControlProblem>,
        v: ValueCandidate,
        marks: Arc<OperatorMarks>,
    ) -> Self {
        Self::new(
            "greedy",
            Arc::new(move |inp| {
                let phi = v.at(inp.t)?;
                let h = hamiltonians(&problem, &phi, inp.law, &marks)?;
                Ok(argmax_lowest(&h))
            }),
        )
    }
}

/// Index of the largest entry; near-ties go to the lowest index.
pub fn argmax_lowest(h: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in h.iter().enumerate().skip(1) {
        if *v > h[best] + TIE_TOL * h[best].abs().max(1.0) {
            best = i;
        }
    }
    best
}

pub type ValueAt = Arc<dyn Fn(f64) -> Result<CylindricalFunctional> + Send + Sync>;
pub type TimeDerivative = Arc<dyn Fn(f64, &dyn Measure) -> Result<f64> + Send + Sync>;

/// Time-indexed cylindrical candidate `v(t, ·)` with its time derivative.
#[derive(Clone)]
pub struct ValueCandidate {
    at: ValueAt,
    time_derivative: TimeDerivative,
}

impl fmt::Debug for ValueCandidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ValueCandidate")
    }
}

impl ValueCandidate {
    pub fn new(at: ValueAt, time_derivative: TimeDerivative) -> Self {
        Self {
            at,
            time_derivative,
        }
    }

    pub fn at(&self, t: f64) -> Result<CylindricalFunctional> {
        (self.at)(t)
    }

    pub fn time_derivative(&self, t: f64, mu: &dyn Measure) -> Result<f64> {
        (self.time_derivative)(t, mu)
    }

    /// `v ≡ c`.
    pub fn constant(n: usize, c: f64) -> Self {
        Self::new(
            Arc::new(move |_| {
                CylindricalFunctional::new(OuterFunction::constant(0, c), vec![], n, 0)
            }),
            Arc::new(|_, _| Ok(0.0)),
        )
    }

    /// `v(t, μ) = ⟨μ, g⟩ + rate · (T − t)`.
    pub fn affine_in_time(g: TestFunction, rate: f64, horizon: f64) -> Self {
        let n = g.dim();
        Self::new(
            Arc::new(move |t| {
                let outer = OuterFunction::polynomial(
                    1,
                    vec![
                        Monomial {
                            coef: 1.0,
                            powers: vec![1],
                        },
                        Monomial {
                            coef: rate * (horizon - t),
                            powers: vec![0],
                        },
                    ],
                );
                CylindricalFunctional::new(outer, vec![g.clone()], n, 0)
            }),
            Arc::new(move |_, _| Ok(-rate)),
        )
    }

    /// `v(t, μ) = ⟨μ, u(t, ·)⟩`.
    pub fn separable(
        n: usize,
        u: Arc<dyn Fn(f64) -> TestFunction + Send + Sync>,
        du_dt: Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>,
    ) -> Self {
        Self::new(
            Arc::new(move |t| CylindricalFunctional::linear(u(t))),
            Arc::new(move |t, mu| {
                if mu.dim() != n {
                    return Err(Error::invalid("measure dimension mismatch"));
                }
                mu.pair(&|x| du_dt(t, x))
            }),
        )
    }
}

/// Fixed idiosyncratic marks for the `ν`-integrals.
#[derive(Debug, Clone)]
pub struct OperatorMarks {
    pub intensity: f64,
    q: usize,
    marks: Arc<Vec<f64>>,
}

impl OperatorMarks {
    pub fn new(model: &JumpDiffusionModel, budget: usize, mark_seed: u64) -> Result<Self> {
        if budget == 0 {
            return Err(Error::invalid("mark budget must be positive"));
        }
        Ok(match model.component(Stream::Idio) {
            Some(c) => Self {
                intensity: c.levy.intensity,
                q: c.levy.marks.dim(),
                marks: Arc::new(
                    c.levy
                        .marks
                        .fixed_marks(budget, seed::derive(mark_seed, tag::OPERATOR_MARKS, 0)),
                ),
            },
            None => Self::none(),
        })
    }

    pub fn none() -> Self {
        Self {
            intensity: 0.0,
            q: 0,
            marks: Arc::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        if self.q == 0 {
            0
        } else {
            self.marks.len() / self.q
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.marks[i * self.q..(i + 1) * self.q]
    }
}

/// Per-particle pieces of the generator at one action.
struct PointTerms {
    local: f64,
    jump: f64,
    /// `d_c × m`: row `c` holds `(∇gᵢ(x)ᵀ σ^W(x))_c`.
    u: Vec<f64>,
    /// Mark average of `gᵢ(x + β) − gᵢ(x)`.
    dg: Vec<f64>,
}

fn point_terms(
    model: &JumpDiffusionModel,
    phi: &CylindricalFunctional,
    fr: &Frozen,
    a: f64,
    x: &[f64],
    marks: &OperatorMarks,
) -> Result<PointTerms> {
    let (n, di, dc, m) = (model.n, model.d_i, model.d_c, fr.m);
    let t = phi.tests_at(x)?;
    let grad = fr.linear_grad_x(&t);
    let hess = fr.linear_hess_x(&t);
    let mut b = vec![0.0; n];
    let mut sv = vec![0.0; n * di];
    let mut sw = vec![0.0; n * dc];
    model.drift.eval(x, a, &mut b);
    model.sigma_v.eval(x, a, &mut sv);
    model.sigma_w.eval(x, a, &mut sw);
    let mut local = grad.iter().zip(&b).map(|(p, q)| p * q).sum::<f64>();
    for k in 0..n {
        for l in 0..n {
            let cov: f64 = (0..di)
                .map(|c| sv[k * di + c] * sv[l * di + c])
                .sum::<f64>()
                + (0..dc)
                    .map(|c| sw[k * dc + c] * sw[l * dc + c])
                    .sum::<f64>();
            local += 0.5 * hess[k * n + l] * cov;
        }
    }
    let mut u = vec![0.0; dc * m];
    for c in 0..dc {
        for i in 0..m {
            u[c * m + i] = (0..n).map(|k| t.grad[i * n + k] * sw[k * dc + c]).sum();
        }
    }
    let mut jump = 0.0;
    let mut dg = vec![0.0; m];
    if marks.intensity > 0.0 && !marks.is_empty() {
        let beta = &model
            .idio_jumps
            .as_ref()
            .expect("active idiosyncratic jumps")
            .beta;
        let mut bj = vec![0.0; n];
        let mut xs = vec![0.0; n];
        let mut gv = vec![0.0; m];
        let mut acc = CompensatedSum::new();
        let mut acc_dg = vec![CompensatedSum::new(); m];
        for r in 0..marks.len() {
            beta.eval(x, a, marks.row(r), &mut bj);
            for ((s, xv), bv) in xs.iter_mut().zip(x).zip(&bj) {
                *s = xv + bv;
            }
            phi.test_values_into(&xs, &mut gv)?;
            let mut v = -grad.iter().zip(&bj).map(|(p, q)| p * q).sum::<f64>();
            for i in 0..m {
                let d = gv[i] - t.g[i];
                v += fr.fz[i] * d;
                acc_dg[i].add(d);
            }
            acc.add(v);
        }
        let len = marks.len() as f64;
        jump = marks.intensity * acc.value() / len;
        for (o, c) in dg.iter_mut().zip(&acc_dg) {
            *o = c.value() / len;
        }
    }
    if !(local.is_finite() && jump.is_finite()) {
        return Err(Error::numerical(0, "generator not finite"));
    }
    Ok(PointTerms { local, jump, u, dg })
}

fn check_phi(model: &JumpDiffusionModel, phi: &CylindricalFunctional) -> Result<()> {
    if phi.x_dim != model.n || phi.y_dim != 0 {
        return Err(Error::invalid(
            "functional must act on measures over the state space only",
        ));
    }
    Ok(())
}

/// `(L^{μ,a} Φ)(x)`.
pub fn l_operator(
    model: &JumpDiffusionModel,
    phi: &CylindricalFunctional,
    mu: &dyn Measure,
    a: f64,
    x: &[f64],
    marks: &OperatorMarks,
) -> Result<f64> {
    check_phi(model, phi)?;
    let fr = phi.freeze(mu, &[])?;
    let p = point_terms(model, phi, &fr, a, x, marks)?;
    Ok(p.local + p.jump)
}

/// `(M^{μ,a} Φ)(x, x′)`. The double mark integral carries the same factor
/// ½ as the diffusion part.
pub fn m_operator(
    model: &JumpDiffusionModel,
    phi: &CylindricalFunctional,
    mu: &dyn Measure,
    a: f64,
    x: &[f64],
    x2: &[f64],
    marks: &OperatorMarks,
) -> Result<f64> {
    check_phi(model, phi)?;
    let fr = phi.freeze(mu, &[])?;
    let p = point_terms(model, phi, &fr, a, x, marks)?;
    let q = point_terms(model, phi, &fr, a, x2, marks)?;
    let m = fr.m;
    let cross: f64 = (0..model.d_c)
        .map(|c| fr.second_from(&p.u[c * m..(c + 1) * m], &q.u[c * m..(c + 1) * m]))
        .sum();
    let lam = marks.intensity;
    let v = 0.5 * cross + 0.5 * lam * lam * fr.second_from(&p.dg, &q.dg);
    if !v.is_finite() {
        return Err(Error::numerical(0, "M operator not finite"));
    }
    Ok(v)
}

/// Cloud averages of the generator pieces at one action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTerms {
    pub running: f64,
    /// `⟨μ, ∇δΦ·b + ½∇²δΦ:σσᵀ⟩`
    pub local: f64,
    /// `⟨μ, L jump part⟩`
    pub jump: f64,
    /// Distinct-pair average of the `σ^W` part of `M`.
    pub common_cross: f64,
    /// Distinct-pair average of the double mark integral of `M`.
    pub double_jump: f64,
    /// `⟨μ, ∇δΦ·σ^W⟩`, one entry per common Brownian coordinate.
    pub common_loading: Vec<f64>,
}

impl GeneratorTerms {
    pub fn hamiltonian(&self) -> f64 {
        self.running + self.local + self.jump + self.common_cross + self.double_jump
    }
}

pub fn generator_terms(
    problem: &ControlProblem,
    phi: &CylindricalFunctional,
    fr: &Frozen,
    a: f64,
    law: &EmpiricalConditionalLaw,
    marks: &OperatorMarks,
) -> Result<GeneratorTerms> {
    let model = &problem.model;
    check_phi(model, phi)?;
    let mp = law.len();
    if mp < 2 {
        return Err(Error::InsufficientData(
            "pair averages need at least two particles".into(),
        ));
    }
    let pts = (0..mp)
        .into_par_iter()
        .map(|p| point_terms(model, phi, fr, a, law.point(p), marks))
        .collect::<Result<Vec<_>>>()?;
    let (m, dc) = (fr.m, model.d_c);
    let mean_of = |f: &dyn Fn(usize) -> f64| -> f64 {
        let mut acc = CompensatedSum::new();
        for p in 0..mp {
            acc.add(f(p));
        }
        acc.value() / mp as f64
    };
    let running = mean_of(&|p| (problem.running)(law.point(p), a));
    let local = mean_of(&|p| pts[p].local);
    let jump = mean_of(&|p| pts[p].jump);
    let pairs = (mp * (mp - 1)) as f64;
    let u_stat = |col: &dyn Fn(&PointTerms) -> &[f64]| -> f64 {
        let mut s = vec![0.0; m];
        let mut diag = 0.0;
        for pt in &pts {
            let v = col(pt);
            for (a, b) in s.iter_mut().zip(v) {
                *a += b;
            }
            diag += fr.second_from(v, v);
        }
        (fr.second_from(&s, &s) - diag) / pairs
    };
    let mut common_cross = 0.0;
    let mut common_loading = Vec::with_capacity(dc);
    for c in 0..dc {
        common_cross += 0.5 * u_stat(&|pt| &pt.u[c * m..(c + 1) * m]);
        common_loading.push(mean_of(&|p| {
            let u = &pts[p].u[c * m..(c + 1) * m];
            fr.fz.iter().zip(u).map(|(a, b)| a * b).sum()
        }));
    }
    let lam = marks.intensity;
    let double_jump = if lam > 0.0 {
        0.5 * lam * lam * u_stat(&|pt| &pt.dg)
    } else {
        0.0
    };
    let out = GeneratorTerms {
        running,
        local,
        jump,
        common_cross,
        double_jump,
        common_loading,
    };
    if !out.hamiltonian().is_finite() {
        return Err(Error::numerical(law.node, "Hamiltonian not finite"));
    }
    Ok(out)
}

/// Hamiltonian of `phi` at every action.
pub fn hamiltonians(
    problem: &ControlProblem,
    phi: &CylindricalFunctional,
    law: &EmpiricalConditionalLaw,
    marks: &OperatorMarks,
) -> Result<Vec<f64>> {
    let fr = phi.freeze(law, &[])?;
    problem
        .actions
        .iter()
        .map(|&a| Ok(generator_terms(problem, phi, &fr, a, law, marks)?.hamiltonian()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HjbReport {
    pub t: f64,
    pub time_derivative: f64,
    pub hamiltonians: Vec<f64>,
    pub best_action: usize,
    pub residual: f64,
    /// `|v(T, μ) − ⟨μ, g⟩|`
    pub terminal_gap: f64,
}

pub fn hjb_residual(
    problem: &ControlProblem,
    v: &ValueCandidate,
    t: f64,
    mu: &EmpiricalConditionalLaw,
    marks: &OperatorMarks,
) -> Result<HjbReport> {
    let phi = v.at(t)?;
    let h = hamiltonians(problem, &phi, mu, marks)?;
    let best = argmax_lowest(&h);
    let dt = v.time_derivative(t, mu)?;
    let terminal = v.at(problem.horizon)?.eval(mu, &[])?;
    let g = mu.pair(&*problem.terminal)?;
    Ok(HjbReport {
        t,
        time_derivative: dt,
        residual: dt + h[best],
        best_action: best,
        hamiltonians: h,
        terminal_gap: (terminal - g).abs(),
    })
}

/// A closed-loop flow and the actions it used.
#[derive(Debug, Clone)]
pub struct ControlledFlow {
    pub flow: MeasureFlow,
    pub action_indices: Vec<usize>,
    pub actions: Vec<f64>,
    /// Calendar time of node 0.
    pub start: f64,
}

pub fn simulate_controlled(
    problem: &ControlProblem,
    policy: &FeedbackPolicy,
    grid: &TimeGrid,
    common_seed: u64,
    m: usize,
) -> Result<ControlledFlow> {
    if m == 0 {
        return Err(Error::invalid("need at least one particle"));
    }
    simulate_controlled_with_seeds(
        problem,
        policy,
        grid,
        common_seed,
        &flow_pool_seeds(common_seed, m),
    )
}

/// As [`simulate_controlled`] with explicit idiosyncratic seeds.
pub fn simulate_controlled_with_seeds(
    problem: &ControlProblem,
    policy: &FeedbackPolicy,
    grid: &TimeGrid,
    common_seed: u64,
    idio_seeds: &[u64],
) -> Result<ControlledFlow> {
    let model = &problem.model;
    let start = problem.start_of(grid)?;
    let common = common_noise(model, grid, common_seed)?;
    let noises = idio_seeds
        .par_iter()
        .map(|&s| model.sample_noise(common.clone(), s))
        .collect::<Result<Vec<_>>>()?;
    let x0s: Vec<Vec<f64>> = idio_seeds
        .iter()
        .map(|&s| model.initial.sample(s))
        .collect();
    let n = model.n;
    let mut indices = Vec::with_capacity(grid.steps());
    let mut rule = |k: usize, states: &[&[f64]]| -> Result<f64> {
        let law = EmpiricalConditionalLaw {
            n,
            states: states.concat(),
            common_seed,
            node: k,
        };
        let i = policy.decide(&PolicyInput {
            node: k,
            t: start + grid.t(k),
            law: &law,
        })?;
        let a = *problem.actions.get(i).ok_or_else(|| {
            Error::invalid(format!("policy chose action {i} outside the action set"))
        })?;
        indices.push(i);
        Ok(a)
    };
    let particles = simulate_cloud(model, &noises, &x0s, &mut rule)?;
    let actions = indices.iter().map(|&i| problem.actions[i]).collect();
    Ok(ControlledFlow {
        flow: MeasureFlow {
            grid: grid.clone(),
            common,
            particles,
        },
        action_indices: indices,
        actions,
        start,
    })
}

/// `(1/M) Σ_p [Σ_k f(X_k, a_k) Δt + g(X_K)]` on one flow.
pub fn realized_objective(problem: &ControlProblem, cf: &ControlledFlow) -> Result<f64> {
    let dt = cf.flow.grid.dt();
    let mut acc = CompensatedSum::new();
    for p in &cf.flow.particles {
        let mut run = CompensatedSum::new();
        for (k, a) in cf.actions.iter().enumerate() {
            run.add((problem.running)(p.value(k), *a));
        }
        let v = run.value() * dt + (problem.terminal)(p.terminal());
        if !v.is_finite() {
            return Err(Error::numerical(cf.flow.grid.steps(), "reward not finite"));
        }
        acc.add(v);
    }
    Ok(acc.value() / cf.flow.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveEstimate {
    pub value: f64,
    pub std_error: f64,
    /// Half-width of the normal 95% interval.
    pub ci: f64,
    pub per_seed: Vec<f64>,
}

impl ObjectiveEstimate {
    pub fn from_values(per_seed: Vec<f64>) -> Self {
        let s = Summary::of(&per_seed);
        Self {
            value: s.mean,
            std_error: s.std_error,
            ci: 1.96 * s.std_error,
            per_seed,
        }
    }
}

/// Objective averaged over `common_seeds`, `m` particles each. The start
/// time is `T` minus the grid horizon.
pub fn objective_estimate(
    problem: &ControlProblem,
    policy: &FeedbackPolicy,
    grid: &TimeGrid,
    m: usize,
    common_seeds: &[u64],
) -> Result<ObjectiveEstimate> {
    if common_seeds.is_empty() {
        return Err(Error::invalid("objective needs at least one common seed"));
    }
    let per_seed = common_seeds
        .par_iter()
        .map(|&cs| realized_objective(problem, &simulate_controlled(problem, policy, grid, cs, m)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(ObjectiveEstimate::from_values(per_seed))
}

macro_rules! controlled_terms {
    ($($f:ident),* $(,)?) => {
        /// Accumulated right-hand side of the controlled identity.
        #[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
        pub struct ControlledTerms {
            $(pub $f: f64,)*
        }

        impl ControlledTerms {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($f)),*];

            pub fn values(&self) -> Vec<f64> {
                vec![$(self.$f),*]
            }

            fn add(&mut self, o: &Self) {
                $(self.$f += o.$f;)*
            }
        }
    };
}

controlled_terms!(
    time,
    local,
    jump_compensator,
    common_cross,
    double_jump,
    common_martingale
);

impl ControlledTerms {
    pub fn sum(&self) -> f64 {
        self.values().iter().fold(0.0, |a, b| a + b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlledLedger {
    pub common_seed: u64,
    pub steps: usize,
    pub particles: usize,
    /// `v(T, μ_T) − v(t₀, μ_{t₀})`
    pub lhs: f64,
    pub terms: ControlledTerms,
    pub residual: f64,
    pub action_indices: Vec<usize>,
}

/// Controlled Itô ledger for `v` along a closed-loop flow, integrands at
/// the left node.
pub fn controlled_ledger(
    problem: &ControlProblem,
    v: &ValueCandidate,
    cf: &ControlledFlow,
    marks: &OperatorMarks,
) -> Result<ControlledLedger> {
    let grid = &cf.flow.grid;
    let dt = grid.dt();
    let steps = grid.steps();
    let mut terms = ControlledTerms::default();
    let mut lhs = CompensatedSum::new();
    let mut law = cf.flow.law_at(0);
    let mut phi = v.at(cf.start)?;
    let mut value = phi.eval(&law, &[])?;
    let first = value;
    for k in 0..steps {
        let t = cf.start + grid.t(k);
        let fr = phi.freeze(&law, &[])?;
        let g = generator_terms(problem, &phi, &fr, cf.actions[k], &law, marks)?;
        let dw = cf.flow.common.dw_at(k);
        let step = ControlledTerms {
            time: dt * v.time_derivative(t, &law)?,
            local: dt * g.local,
            jump_compensator: dt * g.jump,
            common_cross: dt * g.common_cross,
            double_jump: dt * g.double_jump,
            common_martingale: g.common_loading.iter().zip(dw).map(|(a, b)| a * b).sum(),
        };
        terms.add(&step);
        let next_law = cf.flow.law_at(k + 1);
        let next_phi = v.at(cf.start + grid.t(k + 1))?;
        let next_value = next_phi.eval(&next_law, &[])?;
        lhs.add(next_value - value);
        law = next_law;
        phi = next_phi;
        value = next_value;
    }
    let lhs = if steps == 0 { 0.0 } else { lhs.value() };
    debug_assert!((lhs - (value - first)).abs() <= 1e-9 * (1.0 + value.abs()));
    Ok(ControlledLedger {
        common_seed: cf.flow.common_seed(),
        steps,
        particles: cf.flow.len(),
        lhs,
        residual: lhs - terms.sum(),
        terms,
        action_indices: cf.action_indices.clone(),
    })
}

/// Budget `(a, b)` for the controlled ledger from coarse pilot levels.
pub fn controlled_ledger_budget(
    problem: &ControlProblem,
    policy: &FeedbackPolicy,
    v: &ValueCandidate,
    marks: &OperatorMarks,
    cfg: &PilotConfig,
) -> Result<ToleranceBudget> {
    if cfg.ks.is_empty() || cfg.ms.is_empty() || cfg.seeds < 2 {
        return Err(Error::invalid(
            "pilot needs grid levels, particle levels and at least two seeds",
        ));
    }
    let seeds = common_seeds(seed::derive(cfg.master_seed, tag::PILOT, 1), cfg.seeds);
    let mut levels = Vec::new();
    for &k in &cfg.ks {
        let grid = TimeGrid::new(problem.horizon, k)?;
        for &m in &cfg.ms {
            let res = seeds
                .par_iter()
                .map(|&cs| {
                    let cf = simulate_controlled(problem, policy, &grid, cs, m)?;
                    Ok(controlled_ledger(problem, v, &cf, marks)?.residual)
                })
                .collect::<Result<Vec<_>>>()?;
            levels.push(PilotLevel::from_residuals(k, m, grid.dt(), &res));
        }
    }
    Ok(ToleranceBudget::fit(levels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationConfig {
    pub steps: usize,
    pub particles: usize,
    pub seeds: usize,
    pub master_seed: u64,
    /// Nodes where a baseline policy may switch action.
    pub switch_nodes: Vec<usize>,
    pub mark_budget: usize,
    pub pilot: PilotConfig,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            particles: 200,
            seeds: 64,
            master_seed: 0,
            switch_nodes: vec![10, 20, 30, 40],
            mark_budget: DEFAULT_MARK_BUDGET,
            pilot: PilotConfig {
                ks: vec![10, 20, 40],
                ms: vec![25, 100],
                seeds: 24,
                master_seed: 0,
            },
        }
    }
}

/// Segment starts and per-segment action indices of baseline policy `id`.
pub fn baseline_policy(
    id: usize,
    n_actions: usize,
    switch_nodes: &[usize],
) -> (Vec<usize>, Vec<usize>) {
    let starts: Vec<usize> = std::iter::once(0)
        .chain(switch_nodes.iter().copied())
        .collect();
    let mut rest = id;
    let indices = starts
        .iter()
        .map(|_| {
            let d = rest % n_actions;
            rest /= n_actions;
            d
        })
        .collect();
    (starts, indices)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub greedy_value: f64,
    pub ci: f64,
    pub baseline_best: f64,
    pub baseline_policy_id: usize,
    pub baseline_actions: Vec<usize>,
    pub n_baseline: usize,
    /// Mean `|residual|` of the controlled ledger along the greedy flows.
    pub ito_residual: f64,
    pub ito_threshold: f64,
    pub budget: ToleranceBudget,
    /// Greedy action paths equal the best baseline's on every seed.
    pub actions_match: bool,
    pub value_pass: bool,
    pub ito_pass: bool,
    pub pass: bool,
    #[serde(skip)]
    pub greedy_ledgers: Vec<ControlledLedger>,
}

impl VerificationReport {
    /// One row per named ledger term, averaged over seeds.
    pub fn write_terms_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["term", "mean"])?;
        let n = self.greedy_ledgers.len().max(1) as f64;
        for (j, name) in ControlledTerms::NAMES.iter().enumerate() {
            let s = stats::compensated_sum(self.greedy_ledgers.iter().map(|l| l.terms.values()[j]));
            wr.write_record([name.to_string(), fmt_num(s / n)])?;
        }
        wr.flush().map_err(|e| Error::io("terms csv", e))?;
        Ok(())
    }
}

pub fn verification_check(
    problem: Arc<ControlProblem>,
    v: &ValueCandidate,
    cfg: &VerificationConfig,
) -> Result<VerificationReport> {
    let n_actions = problem.actions.len();
    let mut switches = cfg.switch_nodes.clone();
    switches.sort_unstable();
    switches.dedup();
    if switches.len() > MAX_SWITCH_NODES {
        return Err(Error::invalid(format!(
            "at most {MAX_SWITCH_NODES} switch nodes"
        )));
    }
    if switches.iter().any(|&s| s == 0 || s >= cfg.steps) {
        return Err(Error::invalid(
            "switch nodes must lie strictly inside the grid",
        ));
    }
    let n_baseline = u32::try_from(switches.len() + 1)
        .ok()
        .and_then(|e| n_actions.checked_pow(e))
        .filter(|n| *n <= MAX_BASELINE_POLICIES)
        .ok_or_else(|| {
            Error::invalid(format!("baseline exceeds {MAX_BASELINE_POLICIES} policies"))
        })?;
    let grid = TimeGrid::new(problem.horizon, cfg.steps)?;
    let seeds = common_seeds(cfg.master_seed, cfg.seeds);
    let marks = Arc::new(OperatorMarks::new(
        &problem.model,
        cfg.mark_budget,
        cfg.master_seed,
    )?);

    let jobs: Vec<(usize, usize)> = (0..n_baseline)
        .flat_map(|p| (0..seeds.len()).map(move |s| (p, s)))
        .collect();
    let values = jobs
        .par_iter()
        .map(|&(p, s)| {
            let (starts, idx) = baseline_policy(p, n_actions, &switches);
            let pol = FeedbackPolicy::piecewise(starts, idx)?;
            realized_objective(
                &problem,
                &simulate_controlled(&problem, &pol, &grid, seeds[s], cfg.particles)?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let means: Vec<f64> = values.chunks(seeds.len()).map(stats::mean).collect();
    let best_id = argmax_lowest(&means);

    let greedy = FeedbackPolicy::greedy(problem.clone(), v.clone(), marks.clone());
    let runs = seeds
        .par_iter()
        .map(|&cs| {
            let cf = simulate_controlled(&problem, &greedy, &grid, cs, cfg.particles)?;
            let j = realized_objective(&problem, &cf)?;
            let ledger = controlled_ledger(&problem, v, &cf, &marks)?;
            Ok((j, ledger))
        })
        .collect::<Result<Vec<_>>>()?;
    let (js, ledgers): (Vec<f64>, Vec<ControlledLedger>) = runs.into_iter().unzip();
    let est = ObjectiveEstimate::from_values(js);

    let (starts, best_idx) = baseline_policy(best_id, n_actions, &switches);
    let best_path: Vec<usize> = (0..cfg.steps)
        .map(|k| best_idx[starts.partition_point(|s| *s <= k) - 1])
        .collect();
    let actions_match = ledgers.iter().all(|l| l.action_indices == best_path);

    let budget = controlled_ledger_budget(&problem, &greedy, v, &marks, &cfg.pilot)?;
    let abs: Vec<f64> = ledgers.iter().map(|l| l.residual.abs()).collect();
    let ito_residual = stats::mean(&abs);
    let ito_threshold = budget.core_threshold(grid.dt(), cfg.particles);
    let value_pass = est.value >= means[best_id] - 3.0 * est.ci;
    let ito_pass = ito_residual <= ito_threshold;
    Ok(VerificationReport {
        greedy_value: est.value,
        ci: est.ci,
        baseline_best: means[best_id],
        baseline_policy_id: best_id,
        baseline_actions: best_idx,
        n_baseline,
        ito_residual,
        ito_threshold,
        budget,
        actions_match,
        value_pass,
        ito_pass,
        pass: value_pass && ito_pass,
        greedy_ledgers: ledgers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cylindrical::Profile;
    use crate::model::{Coefficient, JumpCoefficient};
    use crate::noise::{LevySpec, MarkDistribution};

    fn clipped_x(radius: f64) -> TestFunction {
        TestFunction::scalar(Profile::ClipPoly {
            coeffs: vec![0.0, 1.0],
            radius,
            width: 1.0,
        })
    }

    fn clipped_sq(radius: f64) -> TestFunction {
        TestFunction::scalar(Profile::ClipPoly {
            coeffs: vec![0.0, 0.0, 1.0],
            radius,
            width: 1.0,
        })
    }

    fn problem(
        model: JumpDiffusionModel,
        actions: Vec<f64>,
        f: RunningReward,
        g: TerminalReward,
    ) -> ControlProblem {
        ControlProblem::new(model, actions, f, g, 10.0, 1.0).unwrap()
    }

    fn cloud(xs: &[f64]) -> EmpiricalConditionalLaw {
        EmpiricalConditionalLaw::from_points(1, xs.to_vec()).unwrap()
    }

    fn drift_problem() -> ControlProblem {
        let model = JumpDiffusionModel::new(1, 1, 1)
            .with_drift(Coefficient::affine(1, 1, vec![0.0], vec![], vec![1.0]).unwrap())
            .with_sigma_v(Coefficient::constant(1, 1, vec![0.5]).unwrap())
            .with_sigma_w(Coefficient::constant(1, 1, vec![0.5]).unwrap());
        let g = clipped_x(50.0);
        problem(
            model,
            vec![0.0, 1.0],
            Arc::new(|_, _| 0.0),
            Arc::new(move |x| g.value(x)),
        )
    }

    #[test]
    fn rejects_empty_actions_and_common_jumps() {
        let f: RunningReward = Arc::new(|_, _| 0.0);
        let g: TerminalReward = Arc::new(|_| 0.0);
        let m = JumpDiffusionModel::scalar(0.0, 1.0, 0.0);
        assert!(ControlProblem::new(m.clone(), vec![], f.clone(), g.clone(), 1.0, 1.0).is_err());
        let levy = LevySpec::new(1.0, MarkDistribution::Constant { value: vec![1.0] }).unwrap();
        let cj = m.with_common_jumps(
            levy,
            JumpCoefficient::additive(1, 1, vec![1.0], vec![0.0]).unwrap(),
        );
        assert!(matches!(
            ControlProblem::new(cj, vec![0.0], f, g, 1.0, 1.0),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn growth_check_flags_quartic_reward() {
        let m = JumpDiffusionModel::scalar(0.0, 1.0, 0.0);
        let ok = problem(
            m.clone(),
            vec![0.0],
            Arc::new(|x, _| x[0] * x[0]),
            Arc::new(|_| 1.0),
        );
        assert!(ok.check_growth(200, 10.0, 1).pass);
        let bad = problem(
            m,
            vec![0.0],
            Arc::new(|x, _| x[0].powi(4)),
            Arc::new(|_| 0.0),
        );
        assert!(!bad.check_growth(200, 10.0, 1).pass);
    }

    #[test]
    fn l_operator_closed_forms() {
        let mu = cloud(&[0.1, -0.3]);
        let sq = CylindricalFunctional::linear(clipped_sq(10.0)).unwrap();
        let diffusion = JumpDiffusionModel::scalar(0.0, 1.0, 0.0);
        let none = OperatorMarks::none();
        for x in [-2.0, 0.0, 1.5] {
            assert!(
                (l_operator(&diffusion, &sq, &mu, 0.0, &[x], &none).unwrap() - 1.0).abs() < 1e-12
            );
        }
        let transport = JumpDiffusionModel::scalar(1.0, 0.0, 0.0);
        let lin = CylindricalFunctional::linear(clipped_x(10.0)).unwrap();
        assert_eq!(
            l_operator(&transport, &lin, &mu, 0.0, &[0.7], &none).unwrap(),
            1.0
        );
    }

    #[test]
    fn l_operator_gaussian_jump_integral() {
        let levy = LevySpec::new(
            1.0,
            MarkDistribution::Normal {
                mean: vec![0.0],
                std_dev: vec![1.0],
            },
        )
        .unwrap();
        let model = JumpDiffusionModel::new(1, 1, 1).with_idio_jumps(
            levy,
            JumpCoefficient::additive(1, 1, vec![1.0], vec![0.0]).unwrap(),
        );
        let marks = OperatorMarks::new(&model, DEFAULT_MARK_BUDGET, 3).unwrap();
        let sq = CylindricalFunctional::linear(clipped_sq(100.0)).unwrap();
        let v = l_operator(&model, &sq, &cloud(&[0.0]), 0.0, &[0.2], &marks).unwrap();
        // λ E[θ²] with an empirical mark set: 3 standard errors of θ².
        assert!(
            (v - 1.0).abs() < 3.0 * (2.0f64 / DEFAULT_MARK_BUDGET as f64).sqrt(),
            "{v}"
        );
    }

    fn square_of_mean() -> CylindricalFunctional {
        CylindricalFunctional::new(
            OuterFunction::power(1, 0, 2, 1.0),
            vec![clipped_x(100.0)],
            1,
            0,
        )
        .unwrap()
    }

    #[test]
    fn m_operator_closed_forms() {
        let mu = cloud(&[0.4, -0.1]);
        let phi = square_of_mean();
        let none = OperatorMarks::none();
        let common = JumpDiffusionModel::scalar(0.0, 0.0, 1.0);
        assert!(
            (m_operator(&common, &phi, &mu, 0.0, &[0.3], &[-1.0], &none).unwrap() - 1.0).abs()
                < 1e-12
        );
        let quiet = JumpDiffusionModel::scalar(0.0, 1.0, 0.0);
        assert_eq!(
            m_operator(&quiet, &phi, &mu, 0.0, &[0.3], &[-1.0], &none).unwrap(),
            0.0
        );

        let levy = LevySpec::new(
            1.0,
            MarkDistribution::Normal {
                mean: vec![0.0],
                std_dev: vec![1.0],
            },
        )
        .unwrap();
        let jumpy = JumpDiffusionModel::new(1, 1, 1).with_idio_jumps(
            levy,
            JumpCoefficient::additive(1, 1, vec![1.0], vec![0.0]).unwrap(),
        );
        let marks = OperatorMarks::new(&jumpy, DEFAULT_MARK_BUDGET, 5).unwrap();
        let v = m_operator(&jumpy, &phi, &mu, 0.0, &[0.3], &[-1.0], &marks).unwrap();
        // antithetic marks make the mean mark, hence the term, vanish
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn hjb_constant_value_is_exact_zero() {
        let p = problem(
            JumpDiffusionModel::scalar(0.3, 1.0, 0.7),
            vec![0.0, 1.0],
            Arc::new(|_, _| 0.0),
            Arc::new(|_| 0.0),
        );
        let v = ValueCandidate::constant(1, 2.5);
        let r = hjb_residual(
            &p,
            &v,
            0.4,
            &cloud(&[0.0, 1.0, -2.0]),
            &OperatorMarks::none(),
        )
        .unwrap();
        assert_eq!(r.residual, 0.0);
        assert_eq!(r.best_action, 0);
    }

    #[test]
    fn hjb_terminal_gap_zero_when_built_from_g() {
        let p = drift_problem();
        let v = ValueCandidate::affine_in_time(clipped_x(50.0), 1.0, 1.0);
        let r = hjb_residual(
            &p,
            &v,
            1.0,
            &cloud(&[0.2, -0.4, 3.0]),
            &OperatorMarks::none(),
        )
        .unwrap();
        assert_eq!(r.terminal_gap, 0.0);
    }

    #[test]
    fn hjb_analytic_solution_for_linear_drift() {
        // v = ⟨μ,x⟩ + (T − t) solves the two-action problem exactly.
        let p = drift_problem();
        let v = ValueCandidate::affine_in_time(clipped_x(50.0), 1.0, 1.0);
        let r = hjb_residual(
            &p,
            &v,
            0.3,
            &cloud(&[0.2, -0.4, 3.0]),
            &OperatorMarks::none(),
        )
        .unwrap();
        assert_eq!(r.best_action, 1);
        assert!(r.residual.abs() < 1e-14, "{}", r.residual);
    }

    #[test]
    fn hjb_singleton_superposition() {
        let model = JumpDiffusionModel::scalar(0.0, 0.8, 0.6)
            .with_drift(Coefficient::affine(1, 1, vec![0.1], vec![vec![-0.5]], vec![0.0]).unwrap());
        let p = problem(model, vec![0.0], Arc::new(|_, _| 0.0), Arc::new(|_| 0.0));
        let u1 = TestFunction::scalar(Profile::Tanh);
        let u2 = TestFunction::scalar(Profile::Gaussian);
        let mk = |fs: Vec<TestFunction>| {
            ValueCandidate::new(
                Arc::new(move |t| {
                    let k = fs.len();
                    let coefs: Vec<f64> = (0..k).map(|_| 1.0 + t).collect();
                    CylindricalFunctional::new(OuterFunction::linear(&coefs), fs.clone(), 1, 0)
                }),
                Arc::new(|_, _| Ok(0.0)),
            )
        };
        let mu = cloud(&[0.3, -1.2, 0.8, 2.0]);
        let none = OperatorMarks::none();
        let r1 = hjb_residual(&p, &mk(vec![u1.clone()]), 0.2, &mu, &none)
            .unwrap()
            .residual;
        let r2 = hjb_residual(&p, &mk(vec![u2.clone()]), 0.2, &mu, &none)
            .unwrap()
            .residual;
        let r12 = hjb_residual(&p, &mk(vec![u1, u2]), 0.2, &mu, &none)
            .unwrap()
            .residual;
        assert!((r12 - r1 - r2).abs() < 1e-13);
    }

    #[test]
    fn out_of_range_action_is_rejected() {
        let p = drift_problem();
        let g = TimeGrid::new(1.0, 4).unwrap();
        let err = simulate_controlled(&p, &FeedbackPolicy::constant(2), &g, 1, 3).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn objective_trivial_rewards() {
        let m = JumpDiffusionModel::scalar(0.0, 1.0, 1.0);
        let g = TimeGrid::new(1.0, 16).unwrap();
        let seeds = common_seeds(4, 3);
        let p = problem(
            m.clone(),
            vec![0.0],
            Arc::new(|_, _| 0.0),
            Arc::new(|_| 1.0),
        );
        let j = objective_estimate(&p, &FeedbackPolicy::constant(0), &g, 5, &seeds).unwrap();
        assert_eq!(j.value, 1.0);
        let p = problem(m, vec![0.0], Arc::new(|_, _| 1.0), Arc::new(|_| 0.0));
        let j = objective_estimate(&p, &FeedbackPolicy::constant(0), &g, 5, &seeds).unwrap();
        assert!((j.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn piecewise_policy_segments() {
        let pol = FeedbackPolicy::piecewise(vec![0, 3, 5], vec![1, 0, 1]).unwrap();
        let law = cloud(&[0.0]);
        let got: Vec<usize> = (0..7)
            .map(|k| {
                pol.decide(&PolicyInput {
                    node: k,
                    t: 0.0,
                    law: &law,
                })
                .unwrap()
            })
            .collect();
        assert_eq!(got, vec![1, 1, 1, 0, 0, 1, 1]);
        assert!(FeedbackPolicy::piecewise(vec![1], vec![0]).is_err());
    }

    #[test]
    fn baseline_enumeration_covers_all_codes() {
        let mut seen = std::collections::BTreeSet::new();
        for id in 0..27 {
            seen.insert(baseline_policy(id, 3, &[4, 8]).1);
        }
        assert_eq!(seen.len(), 27);
        assert_eq!(baseline_policy(5, 3, &[4, 8]).1, vec![2, 1, 0]);
    }

    #[test]
    fn oversized_baseline_is_rejected() {
        let model = JumpDiffusionModel::scalar(0.0, 1.0, 0.0);
        let p = problem(
            model,
            (0..20).map(f64::from).collect(),
            Arc::new(|_, _| 0.0),
            Arc::new(|_| 0.0),
        );
        let cfg = VerificationConfig {
            switch_nodes: vec![10, 20, 30, 40],
            ..VerificationConfig::default()
        };
        let err =
            verification_check(Arc::new(p), &ValueCandidate::constant(1, 0.0), &cfg).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn controlled_ledger_closes_exactly_and_is_zero_for_constant_value() {
        let p = drift_problem();
        let g = TimeGrid::new(1.0, 20).unwrap();
        let cf = simulate_controlled(&p, &FeedbackPolicy::constant(1), &g, 9, 20).unwrap();
        let none = OperatorMarks::none();
        let l = controlled_ledger(&p, &ValueCandidate::constant(1, 3.0), &cf, &none).unwrap();
        assert_eq!(l.lhs, 0.0);
        assert_eq!(l.residual, 0.0);
        let v = ValueCandidate::affine_in_time(clipped_x(50.0), 1.0, 1.0);
        let l = controlled_ledger(&p, &v, &cf, &none).unwrap();
        assert_eq!(l.residual, l.lhs - l.terms.sum());
    }
}
