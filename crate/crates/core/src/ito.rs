//! Term-by-term evaluation of the Itô formula for `Φ(μ_t, Y_t)` along a
//! particle approximation of the conditional law flow.
//!
//! Per interval `(t_k, t_{k+1}]` the integrands are frozen at
//! `(μ_k, Y_k)`; expectations over the copies `X'`, `X''` are particle
//! averages (first order) and distinct-pair U-statistics (second order).
//! At node `k + 1` the jump block is evaluated at `(μ_{k+1-}, Y_{k+1-})` and
//! only when the common jump stream is silent on the interval; otherwise
//! the full jump of `Φ` is booked in `phi_jumps_common`.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::copies::{copy_seed, simulate_members};
use crate::cylindrical::{CylindricalFunctional, Frozen, TestEval};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{JumpDiffusionModel, Stream};
use crate::noise::CommonNoise;
use crate::path::{fmt_num, simulate_path, PathRecord};
use crate::seed::{self, tag};
use crate::stats::{self, CompensatedSum, Summary};

/// Which particles serve as the copies `X'`, `X''`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// The particles that define `μ` double as the copies.
    #[default]
    Shared,
    /// An independent pool of the same size, on the same common noise.
    Disjoint,
}

/// Estimator of `d[X', X'']^c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrossBracket {
    /// `σ^W(X') σ^W(X'')ᵀ dt`.
    #[default]
    Coefficient,
    /// `ΔX'^c (ΔX''^c)ᵀ`.
    Realized,
}

#[derive(Debug, Clone)]
pub struct LedgerSetup {
    pub phi: CylindricalFunctional,
    pub x_model: JumpDiffusionModel,
    pub y_model: Option<JumpDiffusionModel>,
    pub particles: usize,
    pub pool: PoolMode,
    pub cross: CrossBracket,
    /// Include `p = q` pairs (V-statistic, `1/M²`). This is the exact
    /// Itô formula of the empirical measure itself; with one particle it is
    /// the classical formula for `f(g(X), Y)`.
    pub self_pairs: bool,
    /// Evaluate the pair sums with the roles of `X'` and `X''` exchanged.
    pub swap_copies: bool,
}

impl LedgerSetup {
    pub fn new(phi: CylindricalFunctional, x_model: JumpDiffusionModel, particles: usize) -> Self {
        Self {
            phi,
            x_model,
            y_model: None,
            particles,
            pool: PoolMode::Shared,
            cross: CrossBracket::Coefficient,
            self_pairs: false,
            swap_copies: false,
        }
    }

    pub fn with_y(mut self, y: JumpDiffusionModel) -> Self {
        self.y_model = Some(y);
        self
    }

    pub fn with_pool(mut self, pool: PoolMode) -> Self {
        self.pool = pool;
        self
    }

    pub fn with_cross(mut self, cross: CrossBracket) -> Self {
        self.cross = cross;
        self
    }

    pub fn with_particles(mut self, m: usize) -> Self {
        self.particles = m;
        self
    }

    pub fn with_self_pairs(mut self, on: bool) -> Self {
        self.self_pairs = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.x_model.validate()?;
        if self.phi.x_dim != self.x_model.n {
            return Err(Error::invalid(format!(
                "functional acts on {}-d measures, X is {}-d",
                self.phi.x_dim, self.x_model.n
            )));
        }
        let ny = self.y_model.as_ref().map_or(0, |y| y.n);
        if self.phi.y_dim != ny {
            return Err(Error::invalid(format!(
                "functional expects y of length {}, Y is {ny}-d",
                self.phi.y_dim
            )));
        }
        if let Some(y) = &self.y_model {
            y.validate()?;
            if y.d_c != 0 && y.d_c != self.x_model.d_c {
                return Err(Error::invalid("Y must use the common Brownian motion of X"));
            }
            if let (Some(a), Some(b)) = (
                self.x_model.component(Stream::Common),
                y.component(Stream::Common),
            ) {
                if a.levy != b.levy {
                    return Err(Error::invalid("X and Y must share one common jump stream"));
                }
            }
        }
        if self.particles < 2 && !self.self_pairs {
            return Err(Error::invalid(
                "the pair estimator needs at least two copies",
            ));
        }
        if self.particles == 0 {
            return Err(Error::invalid("need at least one particle"));
        }
        Ok(())
    }

    fn has_common_drivers(&self) -> bool {
        self.x_model.has_common_drivers()
            || self
                .y_model
                .as_ref()
                .is_some_and(|y| y.has_common_drivers())
    }
}

macro_rules! ledger_terms {
    ($($name:ident),* $(,)?) => {
        /// Right-hand-side terms of the identity, in summation order.
        #[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
        pub struct LedgerTerms {
            $(pub $name: f64,)*
        }

        impl LedgerTerms {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn values(&self) -> Vec<f64> {
                vec![$(self.$name),*]
            }

            fn from_values(v: &[f64]) -> Self {
                let mut it = v.iter().copied();
                Self { $($name: it.next().expect("one value per term"),)* }
            }
        }
    };
}

ledger_terms!(
    cont_x,
    bracket_xx,
    bracket_x1x2,
    bracket_xy,
    jump_first,
    jump_second,
    jump_y,
    cont_y,
    bracket_yy,
    phi_jumps_common,
    phi_jumps_y,
);

impl LedgerTerms {
    /// Left-to-right sum in [`NAMES`](Self::NAMES) order.
    pub fn sum(&self) -> f64 {
        self.values().iter().fold(0.0, |a, b| a + b)
    }

    /// The gated jump block: first, second and `y`-mixed sub-terms.
    pub fn jump_block(&self) -> f64 {
        self.jump_first + self.jump_second + self.jump_y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub t: f64,
    pub lhs: f64,
    pub terms: LedgerTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItoLedger {
    pub common_seed: u64,
    pub steps: usize,
    pub particles: usize,
    pub dt: f64,
    /// `Φ(μ_t, Y_t) − Φ(μ_0, Y_0)`
    pub lhs: f64,
    pub terms: LedgerTerms,
    pub residual: f64,
    pub common_jump_nodes: usize,
    pub gated_jump_nodes: usize,
    /// Cumulative values at every node.
    #[serde(skip)]
    pub trace: Vec<LedgerRow>,
}

impl ItoLedger {
    /// `lhs − Σ terms`, recomputed from the stored values.
    pub fn closure_residual(&self) -> f64 {
        self.lhs - self.terms.sum()
    }

    /// The ledger stopped at node `k`.
    pub fn truncated(&self, k: usize) -> Result<ItoLedger> {
        let row = self
            .trace
            .get(k)
            .ok_or_else(|| Error::invalid(format!("node {k} outside the ledger trace")))?;
        Ok(ItoLedger {
            steps: k,
            lhs: row.lhs,
            terms: row.terms,
            residual: row.lhs - row.terms.sum(),
            trace: self.trace[..=k].to_vec(),
            ..self.clone()
        })
    }

    /// `t, lhs, <terms>, residual` per node.
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t", "lhs"];
        header.extend(LedgerTerms::NAMES);
        header.push("residual");
        wr.write_record(&header)?;
        for row in &self.trace {
            let mut rec = vec![fmt_num(row.t), fmt_num(row.lhs)];
            rec.extend(row.terms.values().iter().map(|v| fmt_num(*v)));
            rec.push(fmt_num(row.lhs - row.terms.sum()));
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// One common noise realisation restricted to what a model consumes.
fn restrict(full: &Arc<CommonNoise>, model: &JumpDiffusionModel) -> Arc<CommonNoise> {
    let keep_jumps = model.component(Stream::Common).is_some() || full.jumps.is_empty();
    if keep_jumps && model.d_c == full.d_c {
        return full.clone();
    }
    Arc::new(CommonNoise {
        seed: full.seed,
        grid: full.grid.clone(),
        d_c: model.d_c,
        dw: if model.d_c == full.d_c {
            full.dw.clone()
        } else {
            Vec::new()
        },
        jumps: if keep_jumps {
            full.jumps.clone()
        } else {
            Vec::new()
        },
    })
}

fn shared_common(setup: &LedgerSetup, grid: &TimeGrid, cs: u64) -> Result<Arc<CommonNoise>> {
    let levy = setup
        .x_model
        .component(Stream::Common)
        .or_else(|| {
            setup
                .y_model
                .as_ref()
                .and_then(|y| y.component(Stream::Common))
        })
        .map(|c| &c.levy);
    Ok(Arc::new(CommonNoise::sample(
        grid,
        setup.x_model.d_c,
        levy,
        cs,
    )?))
}

/// Idiosyncratic seeds of the particles that define `μ`.
pub fn flow_pool_seeds(common_seed: u64, m: usize) -> Vec<u64> {
    let base = seed::derive(common_seed, tag::PARTICLE, 0);
    (1..=m as u64).map(|i| copy_seed(base, i)).collect()
}

/// Idiosyncratic seeds of the independent copy pool.
pub fn disjoint_pool_seeds(common_seed: u64, m: usize) -> Vec<u64> {
    let base = seed::derive(common_seed, tag::DISJOINT_POOL, 0);
    (1..=m as u64).map(|i| copy_seed(base, i)).collect()
}

/// `Σᵢ fᵢᵢ Pᵢᵢ + Σ_{i<j} fᵢⱼ (Pᵢⱼ + Pⱼᵢ)`; `swap` uses `Pᵀ`.
fn pair_contract(fzz: &[f64], p: &[f64], m: usize, swap: bool) -> f64 {
    let at = |i: usize, j: usize| if swap { p[j * m + i] } else { p[i * m + j] };
    let mut s = 0.0;
    for i in 0..m {
        s += fzz[i * m + i] * at(i, i);
        for j in i + 1..m {
            s += fzz[i * m + j] * (at(i, j) + at(j, i));
        }
    }
    s
}

fn column_mean(rows: &[f64], width: usize, out: &mut [f64]) {
    let n = rows.len() / width.max(1);
    out.fill(0.0);
    for r in rows.chunks_exact(width) {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
}

struct YView<'a> {
    path: Option<&'a PathRecord>,
    model: Option<&'a JumpDiffusionModel>,
}

impl YView<'_> {
    fn value(&self, k: usize) -> &[f64] {
        self.path.map_or(&[], |p| p.value(k))
    }
    fn left(&self, k: usize) -> &[f64] {
        self.path.map_or(&[], |p| p.left(k))
    }
    fn jumped(&self, k: usize) -> bool {
        self.path.is_some_and(|p| p.jump_at(k).is_some())
    }
}

/// Simulate the flow, copies and `Y` for one common seed and evaluate the
/// ledger.
pub fn evaluate_identity(
    setup: &LedgerSetup,
    grid: &TimeGrid,
    common_seed: u64,
) -> Result<ItoLedger> {
    setup.validate()?;
    let xm = &setup.x_model;
    let m = setup.particles;
    let full = shared_common(setup, grid, common_seed)?;
    let cx = restrict(&full, xm);
    let flow = simulate_members(xm, &cx, &flow_pool_seeds(common_seed, m), None)?;
    let pool = match setup.pool {
        PoolMode::Shared => None,
        PoolMode::Disjoint => Some(simulate_members(
            xm,
            &cx,
            &disjoint_pool_seeds(common_seed, m),
            None,
        )?),
    };
    let y_path = match &setup.y_model {
        Some(ym) => {
            let s = seed::derive(common_seed, tag::Y_PROCESS, 0);
            let noise = ym.sample_noise(restrict(&full, ym), s)?;
            Some(simulate_path(ym, &noise, &ym.initial.sample(s), None)?)
        }
        None => None,
    };
    ledger_from_paths(setup, &full, &flow, pool.as_deref(), y_path.as_ref())
}

/// Evaluate the ledger on already simulated particles. `copies` defaults
/// to `flow`.
pub fn ledger_from_paths(
    setup: &LedgerSetup,
    common: &CommonNoise,
    flow: &[PathRecord],
    copies: Option<&[PathRecord]>,
    y_path: Option<&PathRecord>,
) -> Result<ItoLedger> {
    let phi = &setup.phi;
    let xm = &setup.x_model;
    let shared = copies.is_none();
    let copies = copies.unwrap_or(flow);
    let (mf, mc) = (flow.len(), copies.len());
    if mf == 0 || mc == 0 {
        return Err(Error::invalid("empty particle pool"));
    }
    if mc < 2 && !setup.self_pairs {
        return Err(Error::invalid(
            "the pair estimator needs at least two copies",
        ));
    }
    if setup.y_model.is_some() != y_path.is_some() {
        return Err(Error::invalid(
            "Y path and Y model must be supplied together",
        ));
    }
    let grid = &common.grid;
    let steps = grid.steps();
    let dt = grid.dt();
    let (mt, d, n) = (phi.m(), phi.x_dim, xm.n);
    let dc = xm.d_c;
    let y = YView {
        path: y_path,
        model: setup.y_model.as_ref(),
    };
    let ny = phi.y_dim;
    let ydc = y.model.map_or(0, |m| m.d_c);
    let gate = common.jump_nodes();
    let mcf = mc as f64;
    let pair_norm = if setup.self_pairs {
        mcf * mcf
    } else {
        mcf * (mcf - 1.0)
    };

    let mut te: Vec<TestEval> = (0..mc).map(|_| TestEval::zeros(mt, d)).collect();
    let mut te_next = te.clone();
    let mut flow_g = vec![0.0; mf * mt];
    let mut flow_g_next = flow_g.clone();
    let mut g_left_buf = vec![0.0; mt];

    let eval_copies = |k: usize, out: &mut [TestEval]| -> Result<()> {
        for (p, t) in copies.iter().zip(out.iter_mut()) {
            phi.tests_into(p.value(k), t)?;
        }
        Ok(())
    };
    let eval_flow = |k: usize, te: &[TestEval], out: &mut [f64]| -> Result<()> {
        if shared {
            for (row, t) in out.chunks_exact_mut(mt.max(1)).zip(te) {
                row.copy_from_slice(&t.g);
            }
            Ok(())
        } else {
            for (p, row) in flow.iter().zip(out.chunks_exact_mut(mt.max(1))) {
                phi.test_values_into(p.value(k), row)?;
            }
            Ok(())
        }
    };

    eval_copies(0, &mut te)?;
    eval_flow(0, &te, &mut flow_g)?;
    let mut z = vec![0.0; mt];
    column_mean(&flow_g, mt.max(1), &mut z);
    if mt == 0 {
        z.clear();
    }
    let phi0 = phi.eval_z(&z, y.value(0))?;

    let mut acc = vec![CompensatedSum::new(); LedgerTerms::NAMES.len()];
    let idx = |name: &str| {
        LedgerTerms::NAMES
            .iter()
            .position(|s| *s == name)
            .expect("known term")
    };
    let (i_cx, i_bxx, i_b12, i_bxy, i_jf, i_js, i_jy, i_cy, i_byy, i_pc, i_py) = (
        idx("cont_x"),
        idx("bracket_xx"),
        idx("bracket_x1x2"),
        idx("bracket_xy"),
        idx("jump_first"),
        idx("jump_second"),
        idx("jump_y"),
        idx("cont_y"),
        idx("bracket_yy"),
        idx("phi_jumps_common"),
        idx("phi_jumps_y"),
    );
    let snapshot = |acc: &[CompensatedSum]| {
        LedgerTerms::from_values(&acc.iter().map(|a| a.value()).collect::<Vec<_>>())
    };
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push(LedgerRow {
        t: grid.t(0),
        lhs: 0.0,
        terms: LedgerTerms::default(),
    });

    let mut sw = vec![0.0; n * dc];
    let mut swy = vec![0.0; ny * ydc];
    let mut v = vec![0.0; mt];
    let mut u = vec![0.0; mt * dc];
    let mut s_sum = vec![0.0; mt * dc];
    let mut diag_w = vec![0.0; mt * mt];
    let mut diag_c = vec![0.0; mt * mt];
    let mut v_sum = vec![0.0; mt];
    let mut v_diag = vec![0.0; mt * mt];
    let mut pmat = vec![0.0; mt * mt];
    let mut dx = vec![0.0; n];
    let mut z_left = vec![0.0; mt];
    let mut common_nodes = 0;
    let mut gated_nodes = 0;
    let mut lhs = 0.0;

    for k in 0..steps {
        let yk = y.value(k);
        let fr = phi.freeze_z(&z, yk)?;

        // continuous part over (t_k, t_{k+1})
        s_sum.fill(0.0);
        diag_w.fill(0.0);
        diag_c.fill(0.0);
        v_sum.fill(0.0);
        v_diag.fill(0.0);
        let mut cont = 0.0;
        let mut bxx = 0.0;
        for (p, t) in copies.iter().zip(&te) {
            let x = p.value(k);
            let xl = p.left(k + 1);
            let c = p.bracket_at(k);
            for r in 0..n {
                dx[r] = xl[r] - x[r];
            }
            if dc > 0 {
                xm.sigma_w.eval(x, p.actions[k], &mut sw);
            }
            for i in 0..mt {
                let gi = &t.grad[i * d..(i + 1) * d];
                let hi = &t.hess[i * d * d..(i + 1) * d * d];
                v[i] = gi.iter().zip(&dx).map(|(a, b)| a * b).sum();
                cont += fr.fz[i] * v[i];
                bxx += fr.fz[i] * hi.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
                for l in 0..dc {
                    u[i * dc + l] = (0..n).map(|r| gi[r] * sw[r * dc + l]).sum();
                    s_sum[i * dc + l] += u[i * dc + l];
                }
                v_sum[i] += v[i];
            }
            for i in 0..mt {
                for j in 0..mt {
                    diag_w[i * mt + j] +=
                        (0..dc).map(|l| u[i * dc + l] * u[j * dc + l]).sum::<f64>();
                    v_diag[i * mt + j] += v[i] * v[j];
                    if setup.self_pairs {
                        let gi = &t.grad[i * d..(i + 1) * d];
                        let gj = &t.grad[j * d..(j + 1) * d];
                        let mut q = 0.0;
                        for r in 0..d {
                            for s in 0..d {
                                q += gi[r] * c[r * d + s] * gj[s];
                            }
                        }
                        diag_c[i * mt + j] += q;
                    }
                }
            }
        }
        acc[i_cx].add(cont / mcf);
        acc[i_bxx].add(0.5 * bxx / mcf);

        for i in 0..mt {
            for j in 0..mt {
                pmat[i * mt + j] = match setup.cross {
                    CrossBracket::Coefficient => {
                        let ss: f64 = (0..dc).map(|l| s_sum[i * dc + l] * s_sum[j * dc + l]).sum();
                        let off = (ss - diag_w[i * mt + j]) * dt;
                        if setup.self_pairs {
                            off + diag_c[i * mt + j]
                        } else {
                            off
                        }
                    }
                    CrossBracket::Realized => {
                        let vv = v_sum[i] * v_sum[j];
                        if setup.self_pairs {
                            vv
                        } else {
                            vv - v_diag[i * mt + j]
                        }
                    }
                };
            }
        }
        acc[i_b12].add(0.5 * pair_contract(&fr.fzz, &pmat, mt, setup.swap_copies) / pair_norm);

        if let (Some(ym), Some(yp)) = (y.model, y.path) {
            if ydc > 0 && dc > 0 {
                ym.sigma_w.eval(yk, yp.actions[k], &mut swy);
                let mut bxy = 0.0;
                for i in 0..mt {
                    for a in 0..ny {
                        let su: f64 = (0..dc).map(|l| s_sum[i * dc + l] * swy[a * ydc + l]).sum();
                        bxy += fr.fzy[i * ny + a] * su;
                    }
                }
                acc[i_bxy].add(dt * bxy / mcf);
            }
            let yl = yp.left(k + 1);
            let cy: f64 = (0..ny).map(|a| fr.fy[a] * (yl[a] - yk[a])).sum();
            acc[i_cy].add(cy);
            let by = yp.bracket_at(k);
            acc[i_byy].add(0.5 * fr.fyy.iter().zip(by).map(|(a, b)| a * b).sum::<f64>());
        }

        // node k + 1
        eval_copies(k + 1, &mut te_next)?;
        eval_flow(k + 1, &te_next, &mut flow_g_next)?;
        let mut z_next = vec![0.0; mt];
        column_mean(&flow_g_next, mt.max(1), &mut z_next);
        if mt == 0 {
            z_next.clear();
        }
        let node = k + 1;
        let copy_jumps = copies.iter().any(|p| p.jump_at(node).is_some());
        let flow_jumps = flow.iter().any(|p| p.jump_at(node).is_some());
        let y_jumped = y.jumped(node);
        if gate[node] || copy_jumps || flow_jumps || y_jumped {
            // Z at the left limit: rows of jumping flow particles replaced
            let mut rows = flow_g_next.clone();
            for (p, row) in flow.iter().zip(rows.chunks_exact_mut(mt.max(1))) {
                if p.jump_at(node).is_some() {
                    phi.test_values_into(p.left(node), row)?;
                }
            }
            column_mean(&rows, mt.max(1), &mut z_left);
            if mt == 0 {
                z_left.clear();
            }
            let y_left = y.left(node);
            let y_now = y.value(node);
            if gate[node] {
                common_nodes += 1;
                acc[i_pc].add(phi.eval_z(&z_next, y_now)? - phi.eval_z(&z_left, y_left)?);
            } else {
                gated_nodes += 1;
                let fl = phi.freeze_z(&z_left, y_left)?;
                jump_block(
                    phi,
                    &fl,
                    copies,
                    &te_next,
                    node,
                    y_left,
                    y_now,
                    &mut g_left_buf,
                    setup,
                    pair_norm,
                    &mut acc,
                    [i_jf, i_js, i_jy],
                )?;
                if y_jumped {
                    acc[i_py].add(phi.eval_z(&z_left, y_now)? - phi.eval_z(&z_left, y_left)?);
                }
            }
        }

        lhs = phi.eval_z(&z_next, y.value(node))? - phi0;
        trace.push(LedgerRow {
            t: grid.t(node),
            lhs,
            terms: snapshot(&acc),
        });
        std::mem::swap(&mut te, &mut te_next);
        std::mem::swap(&mut flow_g, &mut flow_g_next);
        z = z_next;
    }

    let terms = snapshot(&acc);
    if !lhs.is_finite() || terms.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(steps, "non-finite ledger term"));
    }
    Ok(ItoLedger {
        common_seed: common.seed,
        steps,
        particles: mf,
        dt,
        lhs,
        residual: lhs - terms.sum(),
        terms,
        common_jump_nodes: common_nodes,
        gated_jump_nodes: gated_nodes,
        trace,
    })
}

#[allow(clippy::too_many_arguments)]
fn jump_block(
    phi: &CylindricalFunctional,
    fl: &Frozen,
    copies: &[PathRecord],
    te_next: &[TestEval],
    node: usize,
    y_left: &[f64],
    y_now: &[f64],
    g_left: &mut [f64],
    setup: &LedgerSetup,
    pair_norm: f64,
    acc: &mut [CompensatedSum],
    [i_jf, i_js, i_jy]: [usize; 3],
) -> Result<()> {
    let mt = phi.m();
    let ny = phi.y_dim;
    let mcf = copies.len() as f64;
    let dy: Vec<f64> = y_now.iter().zip(y_left).map(|(a, b)| a - b).collect();
    let mut big_d = vec![0.0; mt];
    let mut diag = vec![0.0; mt * mt];
    let mut first = 0.0;
    let mut mixed = 0.0;
    let mut dg = vec![0.0; mt];
    let mut any = false;
    for (p, t) in copies.iter().zip(te_next) {
        if p.jump_at(node).is_none() {
            continue;
        }
        any = true;
        phi.test_values_into(p.left(node), g_left)?;
        for i in 0..mt {
            dg[i] = t.g[i] - g_left[i];
            first += fl.fz[i] * dg[i];
            big_d[i] += dg[i];
            for a in 0..ny {
                mixed += fl.fzy[i * ny + a] * dg[i] * dy[a];
            }
        }
        for i in 0..mt {
            for j in 0..mt {
                diag[i * mt + j] += dg[i] * dg[j];
            }
        }
    }
    if !any {
        return Ok(());
    }
    let mut pm = vec![0.0; mt * mt];
    for i in 0..mt {
        for j in 0..mt {
            let dd = big_d[i] * big_d[j];
            pm[i * mt + j] = if setup.self_pairs {
                dd
            } else {
                dd - diag[i * mt + j]
            };
        }
    }
    acc[i_jf].add(first / mcf);
    acc[i_js].add(0.5 * pair_contract(&fl.fzz, &pm, mt, setup.swap_copies) / pair_norm);
    acc[i_jy].add(mixed / mcf);
    Ok(())
}

/// Ledgers for several common seeds, in seed order.
pub fn run_ledgers(
    setup: &LedgerSetup,
    grid: &TimeGrid,
    common_seeds: &[u64],
) -> Result<Vec<ItoLedger>> {
    common_seeds
        .par_iter()
        .map(|&cs| evaluate_identity(setup, grid, cs))
        .collect()
}

/// `n` common seeds drawn from a master seed.
pub fn common_seeds(master: u64, n: usize) -> Vec<u64> {
    (0..n as u64)
        .map(|i| seed::common_seed(master, i))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub n_seeds: usize,
    pub lhs: Summary,
    pub terms: BTreeMap<String, Summary>,
    pub residual: Summary,
    pub abs_residual: Summary,
}

impl LedgerSummary {
    pub fn of(ledgers: &[ItoLedger]) -> Self {
        let col =
            |f: &dyn Fn(&ItoLedger) -> f64| Summary::of(&ledgers.iter().map(f).collect::<Vec<_>>());
        let terms = LedgerTerms::NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| (name.to_string(), col(&|l: &ItoLedger| l.terms.values()[i])))
            .collect();
        Self {
            n_seeds: ledgers.len(),
            lhs: col(&|l| l.lhs),
            terms,
            residual: col(&|l| l.residual),
            abs_residual: col(&|l| l.residual.abs()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrivialSigmaReport {
    pub particles: usize,
    pub self_pairs: bool,
    pub summary: LedgerSummary,
    pub max_abs_residual: f64,
}

/// The ledger with no common drivers: every particle is independent, so
/// the empirical law of the pool approximates the deterministic
/// `Law(X_t)`. One particle switches to the self-pair form, which is the
/// classical Itô formula for `f(g(X), Y)`.
pub fn trivial_sigma_reduction(
    setup: &LedgerSetup,
    grid: &TimeGrid,
    seeds: &[u64],
) -> Result<TrivialSigmaReport> {
    if setup.has_common_drivers() {
        return Err(Error::invalid(
            "trivial-σ reduction requires σ^W = 0 and no common jumps",
        ));
    }
    let mut s = setup.clone();
    if s.particles == 1 {
        s.self_pairs = true;
    }
    let ledgers = run_ledgers(&s, grid, seeds)?;
    Ok(TrivialSigmaReport {
        particles: s.particles,
        self_pairs: s.self_pairs,
        summary: LedgerSummary::of(&ledgers),
        max_abs_residual: ledgers.iter().map(|l| l.residual.abs()).fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotConfig {
    pub ks: Vec<usize>,
    pub ms: Vec<usize>,
    pub seeds: usize,
    pub master_seed: u64,
}

impl Default for PilotConfig {
    fn default() -> Self {
        Self {
            ks: vec![25, 50, 100],
            ms: vec![50, 200],
            seeds: 40,
            master_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotLevel {
    pub k: usize,
    pub m: usize,
    pub dt: f64,
    pub mean_abs_residual: f64,
    pub sd_abs_residual: f64,
}

/// `threshold = 3 (a Δt^{1/2} + b M^{-1/2} + c n^{-1/2})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToleranceBudget {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub levels: Vec<PilotLevel>,
}

impl ToleranceBudget {
    /// Fit `(a, b)` to pilot levels; `c` is the largest seed-to-seed spread.
    pub fn fit(levels: Vec<PilotLevel>) -> Self {
        let x1: Vec<f64> = levels.iter().map(|l| l.dt.sqrt()).collect();
        let x2: Vec<f64> = levels.iter().map(|l| 1.0 / (l.m as f64).sqrt()).collect();
        let y: Vec<f64> = levels.iter().map(|l| l.mean_abs_residual).collect();
        let (a, b) = fit_nonneg_2(&x1, &x2, &y);
        let c = levels.iter().map(|l| l.sd_abs_residual).fold(0.0, f64::max);
        Self { a, b, c, levels }
    }

    pub fn threshold(&self, dt: f64, m: usize, n_seeds: usize) -> f64 {
        self.core_threshold(dt, m) + 3.0 * self.c / (n_seeds as f64).sqrt()
    }

    /// `3 (a Δt^{1/2} + b M^{-1/2})`, without the seed-averaging allowance.
    pub fn core_threshold(&self, dt: f64, m: usize) -> f64 {
        3.0 * (self.a * dt.sqrt() + self.b / (m as f64).sqrt())
    }
}

impl PilotLevel {
    pub fn from_residuals(k: usize, m: usize, dt: f64, residuals: &[f64]) -> Self {
        let abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
        Self {
            k,
            m,
            dt,
            mean_abs_residual: stats::mean(&abs),
            sd_abs_residual: stats::variance(&abs).sqrt(),
        }
    }
}

/// Nonnegative least squares for `y ≈ a x₁ + b x₂`, residuals relative
/// to `y`.
pub fn fit_nonneg_2(x1: &[f64], x2: &[f64], y: &[f64]) -> (f64, f64) {
    let w: Vec<f64> = y
        .iter()
        .map(|v| if *v > 0.0 { 1.0 / (v * v) } else { 1.0 })
        .collect();
    let dot = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).zip(&w).map(|((p, q), w)| p * q * w).sum()
    };
    let (s11, s22, s12) = (dot(x1, x1), dot(x2, x2), dot(x1, x2));
    let (r1, r2) = (dot(x1, y), dot(x2, y));
    let obj = |a: f64, b: f64| -> f64 {
        x1.iter()
            .zip(x2)
            .zip(y)
            .zip(&w)
            .map(|(((p, q), v), w)| w * (v - a * p - b * q).powi(2))
            .sum()
    };
    let mut best = (0.0, 0.0, obj(0.0, 0.0));
    let det = s11 * s22 - s12 * s12;
    if det.abs() > 1e-300 {
        let a = (r1 * s22 - r2 * s12) / det;
        let b = (r2 * s11 - r1 * s12) / det;
        if a >= 0.0 && b >= 0.0 {
            return (a, b);
        }
    }
    if s11 > 0.0 {
        let a = (r1 / s11).max(0.0);
        let o = obj(a, 0.0);
        if o < best.2 {
            best = (a, 0.0, o);
        }
    }
    if s22 > 0.0 {
        let b = (r2 / s22).max(0.0);
        let o = obj(0.0, b);
        if o < best.2 {
            best = (0.0, b, o);
        }
    }
    (best.0, best.1)
}

/// Pilot runs on a seed stream disjoint from any verification run, fitted
/// to the error model `E|residual| ≈ a Δt^{1/2} + b M^{-1/2}`.
pub fn pilot_budget(
    setup: &LedgerSetup,
    horizon: f64,
    cfg: &PilotConfig,
) -> Result<ToleranceBudget> {
    if cfg.ks.is_empty() || cfg.ms.is_empty() || cfg.seeds < 2 {
        return Err(Error::invalid(
            "pilot needs grid levels, particle levels and at least two seeds",
        ));
    }
    let seeds = common_seeds(seed::derive(cfg.master_seed, tag::PILOT, 0), cfg.seeds);
    let mut levels = Vec::new();
    for &k in &cfg.ks {
        let grid = TimeGrid::new(horizon, k)?;
        for &m in &cfg.ms {
            let ledgers = run_ledgers(&setup.clone().with_particles(m), &grid, &seeds)?;
            let res: Vec<f64> = ledgers.iter().map(|l| l.residual).collect();
            levels.push(PilotLevel::from_residuals(k, m, grid.dt(), &res));
        }
    }
    Ok(ToleranceBudget::fit(levels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    /// Grid levels of the Δt sweep.
    pub ks: Vec<usize>,
    /// Particle levels of the M sweep.
    pub ms: Vec<usize>,
    /// Particles held fixed in the Δt sweep.
    pub dt_particles: usize,
    /// Steps held fixed in the M sweep.
    pub m_steps: usize,
    pub seeds: usize,
    pub master_seed: u64,
    pub dt_pool: PoolMode,
    pub m_pool: PoolMode,
    pub m_cross: CrossBracket,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub k: usize,
    pub m: usize,
    pub mean_abs_residual: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub dt_rows: Vec<ConvergenceRow>,
    pub m_rows: Vec<ConvergenceRow>,
    /// Slope of `ln E|res|` against `ln Δt`.
    pub slope_dt: f64,
    /// Minus the slope of `ln E|res|` against `ln M` (1/2 for a CLT rate).
    pub slope_m: f64,
    pub monotone_dt: bool,
}

impl ConvergenceReport {
    /// `K, M, mean_abs_residual, ci_low, ci_high, slope_dt, slope_M`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "K",
            "M",
            "mean_abs_residual",
            "ci_low",
            "ci_high",
            "slope_dt",
            "slope_M",
        ])?;
        for r in self.dt_rows.iter().chain(&self.m_rows) {
            wr.write_record([
                r.k.to_string(),
                r.m.to_string(),
                fmt_num(r.mean_abs_residual),
                fmt_num(r.ci_low),
                fmt_num(r.ci_high),
                fmt_num(self.slope_dt),
                fmt_num(self.slope_m),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn level_row(setup: &LedgerSetup, horizon: f64, k: usize, seeds: &[u64]) -> Result<ConvergenceRow> {
    let grid = TimeGrid::new(horizon, k)?;
    let ledgers = run_ledgers(setup, &grid, seeds)?;
    let s = Summary::of(&ledgers.iter().map(|l| l.residual.abs()).collect::<Vec<_>>());
    Ok(ConvergenceRow {
        k,
        m: setup.particles,
        mean_abs_residual: s.mean,
        ci_low: s.ci_low,
        ci_high: s.ci_high,
    })
}

/// Mean `|residual|` over seeds along a Δt sweep and an M sweep, with
/// log-log slopes. Exact-zero residuals yield zero slopes.
pub fn convergence_study(
    setup: &LedgerSetup,
    horizon: f64,
    cfg: &ConvergenceConfig,
) -> Result<ConvergenceReport> {
    if cfg.ks.len() < 2 || cfg.ms.len() < 2 {
        return Err(Error::invalid(
            "convergence study needs at least two levels per sweep",
        ));
    }
    let seeds = common_seeds(cfg.master_seed, cfg.seeds);
    let dt_setup = setup
        .clone()
        .with_particles(cfg.dt_particles)
        .with_pool(cfg.dt_pool);
    let dt_rows = cfg
        .ks
        .iter()
        .map(|&k| level_row(&dt_setup, horizon, k, &seeds))
        .collect::<Result<Vec<_>>>()?;
    let m_rows = cfg
        .ms
        .iter()
        .map(|&m| {
            let s = setup
                .clone()
                .with_particles(m)
                .with_pool(cfg.m_pool)
                .with_cross(cfg.m_cross);
            level_row(&s, horizon, cfg.m_steps, &seeds)
        })
        .collect::<Result<Vec<_>>>()?;
    let slope = |x: Vec<f64>, y: Vec<f64>| -> Result<f64> {
        if y.iter().all(|v| *v == 0.0) {
            Ok(0.0)
        } else {
            stats::loglog_slope(&x, &y)
        }
    };
    let slope_dt = slope(
        dt_rows.iter().map(|r| horizon / r.k as f64).collect(),
        dt_rows.iter().map(|r| r.mean_abs_residual).collect(),
    )?;
    let slope_m = -slope(
        m_rows.iter().map(|r| r.m as f64).collect(),
        m_rows.iter().map(|r| r.mean_abs_residual).collect(),
    )?;
    let monotone_dt = dt_rows
        .windows(2)
        .all(|w| w[1].mean_abs_residual <= w[0].mean_abs_residual);
    Ok(ConvergenceReport {
        dt_rows,
        m_rows,
        slope_dt,
        slope_m: if slope_m == 0.0 { 0.0 } else { slope_m },
        monotone_dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cylindrical::{Monomial, OuterFunction, Profile, TestFunction};
    use crate::model::{Coefficient, JumpCoefficient};
    use crate::noise::{LevySpec, MarkDistribution};

    fn square_tanh() -> CylindricalFunctional {
        CylindricalFunctional::new(
            OuterFunction::power(1, 0, 2, 1.0),
            vec![TestFunction::scalar(Profile::Tanh)],
            1,
            0,
        )
        .unwrap()
    }

    fn grid(k: usize) -> TimeGrid {
        TimeGrid::new(1.0, k).unwrap()
    }

    #[test]
    fn closure_is_exact() {
        let setup = LedgerSetup::new(square_tanh(), JumpDiffusionModel::scalar(0.1, 1.0, 1.0), 20);
        let l = evaluate_identity(&setup, &grid(30), 4).unwrap();
        assert_eq!(l.residual, l.closure_residual());
        assert_eq!(l.trace.len(), 31);
        let t = l.truncated(10).unwrap();
        assert_eq!(t.residual, t.closure_residual());
    }

    #[test]
    fn constant_functional_gives_zero_ledger() {
        let phi = CylindricalFunctional::new(
            OuterFunction::constant(1, 2.5),
            vec![TestFunction::scalar(Profile::Sin)],
            1,
            0,
        )
        .unwrap();
        let model = JumpDiffusionModel::scalar(0.3, 1.0, 0.5).with_idio_jumps(
            LevySpec::new(
                2.0,
                MarkDistribution::Normal {
                    mean: vec![0.0],
                    std_dev: vec![0.5],
                },
            )
            .unwrap(),
            JumpCoefficient::additive(1, 1, vec![1.0], vec![0.0]).unwrap(),
        );
        let l = evaluate_identity(&LedgerSetup::new(phi, model, 10), &grid(40), 1).unwrap();
        assert_eq!(l.lhs, 0.0);
        assert!(l.terms.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_functional_has_no_second_order_pair_terms() {
        let phi = CylindricalFunctional::linear(TestFunction::scalar(Profile::Tanh)).unwrap();
        let model = JumpDiffusionModel::scalar(0.0, 1.0, 1.0).with_idio_jumps(
            LevySpec::new(
                3.0,
                MarkDistribution::Normal {
                    mean: vec![0.0],
                    std_dev: vec![0.5],
                },
            )
            .unwrap(),
            JumpCoefficient::additive(1, 1, vec![1.0], vec![0.0]).unwrap(),
        );
        let l = evaluate_identity(&LedgerSetup::new(phi, model, 15), &grid(50), 2).unwrap();
        assert_eq!(l.terms.bracket_x1x2, 0.0);
        assert_eq!(l.terms.jump_second, 0.0);
        assert_ne!(l.terms.jump_first, 0.0);
    }

    #[test]
    fn swapping_copies_is_exact() {
        let outer = OuterFunction::polynomial(
            2,
            vec![
                Monomial {
                    coef: 1.0,
                    powers: vec![1, 1],
                },
                Monomial {
                    coef: 0.5,
                    powers: vec![2, 0],
                },
            ],
        );
        let phi = CylindricalFunctional::new(
            outer,
            vec![
                TestFunction::scalar(Profile::Tanh),
                TestFunction::scalar(Profile::Sin),
            ],
            1,
            0,
        )
        .unwrap();
        let setup = LedgerSetup::new(phi, JumpDiffusionModel::scalar(0.0, 0.7, 1.0), 12);
        let mut swapped = setup.clone();
        swapped.swap_copies = true;
        for cross in [CrossBracket::Coefficient, CrossBracket::Realized] {
            let a = evaluate_identity(&setup.clone().with_cross(cross), &grid(20), 5).unwrap();
            let b = evaluate_identity(&swapped.clone().with_cross(cross), &grid(20), 5).unwrap();
            assert_eq!(a.terms.bracket_x1x2, b.terms.bracket_x1x2);
        }
    }

    #[test]
    fn zero_model_gives_zero_residual() {
        let model = JumpDiffusionModel::scalar(0.0, 0.0, 0.0);
        let l =
            evaluate_identity(&LedgerSetup::new(square_tanh(), model, 8), &grid(10), 3).unwrap();
        assert_eq!(l.residual, 0.0);
        assert_eq!(l.lhs, 0.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let setup = LedgerSetup::new(square_tanh(), JumpDiffusionModel::scalar(0.0, 1.0, 1.0), 16);
        let a = evaluate_identity(&setup, &grid(25), 9).unwrap();
        let b = evaluate_identity(&setup, &grid(25), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_single_copy_and_bad_dimensions() {
        let s = LedgerSetup::new(square_tanh(), JumpDiffusionModel::scalar(0.0, 1.0, 1.0), 1);
        assert!(matches!(
            evaluate_identity(&s, &grid(5), 1),
            Err(Error::InvalidArgument(_))
        ));
        let two_d = JumpDiffusionModel::new(2, 1, 1);
        let s = LedgerSetup::new(square_tanh(), two_d, 4);
        assert!(evaluate_identity(&s, &grid(5), 1).is_err());
    }

    #[test]
    fn trivial_sigma_rejects_common_drivers() {
        let s = LedgerSetup::new(square_tanh(), JumpDiffusionModel::scalar(0.0, 1.0, 1.0), 4);
        assert!(matches!(
            trivial_sigma_reduction(&s, &grid(5), &[1]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn single_particle_is_classical_ito() {
        // Φ = tanh(x)² · y with dX = dW, dY = 0.5 dB; classical Itô residual is O(Δt^{1/2})
        let outer = OuterFunction::polynomial(
            2,
            vec![Monomial {
                coef: 1.0,
                powers: vec![2, 1],
            }],
        );
        let phi =
            CylindricalFunctional::new(outer, vec![TestFunction::scalar(Profile::Tanh)], 1, 1)
                .unwrap();
        let y = JumpDiffusionModel::new(1, 1, 0)
            .with_sigma_v(Coefficient::constant(1, 1, vec![0.5]).unwrap())
            .with_initial(crate::model::InitialLaw::Dirac { point: vec![1.0] });
        let x = JumpDiffusionModel::new(1, 1, 0)
            .with_sigma_v(Coefficient::constant(1, 1, vec![1.0]).unwrap());
        let setup = LedgerSetup::new(phi, x, 1).with_y(y);
        let coarse = trivial_sigma_reduction(&setup, &grid(50), &common_seeds(1, 40)).unwrap();
        let fine = trivial_sigma_reduction(&setup, &grid(800), &common_seeds(1, 40)).unwrap();
        assert!(coarse.self_pairs);
        assert!(
            fine.summary.abs_residual.mean < 0.5 * coarse.summary.abs_residual.mean,
            "{fine:?} {coarse:?}"
        );
    }

    #[test]
    fn nonneg_fit_recovers_coefficients() {
        let x1 = [0.1, 0.2, 0.3, 0.1];
        let x2 = [0.5, 0.1, 0.2, 0.05];
        let y: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| 2.0 * a + 3.0 * b).collect();
        let (a, b) = fit_nonneg_2(&x1, &x2, &y);
        assert!((a - 2.0).abs() < 1e-10 && (b - 3.0).abs() < 1e-10);
        let y: Vec<f64> = x1
            .iter()
            .zip(&x2)
            .map(|(a, b)| 2.0 * a - 3.0 * b + 5.0 * b * b)
            .collect();
        let (a, b) = fit_nonneg_2(&x1, &x2, &y);
        assert!(a >= 0.0 && b >= 0.0);
    }

    #[test]
    fn zero_model_convergence_is_exactly_zero() {
        let setup = LedgerSetup::new(square_tanh(), JumpDiffusionModel::scalar(0.0, 0.0, 0.0), 4);
        let cfg = ConvergenceConfig {
            ks: vec![4, 8],
            ms: vec![4, 8],
            dt_particles: 4,
            m_steps: 4,
            seeds: 3,
            master_seed: 1,
            dt_pool: PoolMode::Shared,
            m_pool: PoolMode::Disjoint,
            m_cross: CrossBracket::Coefficient,
        };
        let r = convergence_study(&setup, 1.0, &cfg).unwrap();
        assert!(r
            .dt_rows
            .iter()
            .chain(&r.m_rows)
            .all(|r| r.mean_abs_residual == 0.0));
    }
}
