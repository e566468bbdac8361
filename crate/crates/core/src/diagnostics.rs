//! Semimartingale path diagnostics: H^p-type norms under the model's own
//! decomposition, jump sums, realized brackets and strong Euler error.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{JumpDiffusionModel, Stream};
use crate::noise::{CommonNoise, JumpEvent, NoiseBundle};
use crate::path::{common_noise, simulate_path, PathRecord};
use crate::seed::{self, tag};
use crate::stats::{self, Summary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    pub value: f64,
    /// Normal-approximation interval, propagated through `u ↦ u^{1/p}`.
    pub ci_low: f64,
    pub ci_high: f64,
    pub samples: usize,
}

fn lp_norm(vals: &[f64], p: f64) -> Result<NormEstimate> {
    if !(p >= 1.0) {
        return Err(Error::invalid(format!("norm order must be >= 1, got {p}")));
    }
    if vals.is_empty() {
        return Err(Error::InsufficientData("no paths".into()));
    }
    let powered: Vec<f64> = vals.iter().map(|v| v.abs().powf(p)).collect();
    let s = Summary::of(&powered);
    let root = |u: f64| u.max(0.0).powf(1.0 / p);
    Ok(NormEstimate {
        value: root(s.mean),
        ci_low: root(s.ci_low),
        ci_high: root(s.ci_high),
        samples: vals.len(),
    })
}

/// `‖ |X_0| + [M,M]_T^{1/2} + ∫|dV| ‖_{L^p}` with `M` the diffusion plus
/// compensated jumps and `V` the drift minus the compensator, evaluated
/// along each path with the actions it recorded.
pub fn hp_norm_estimate(
    model: &JumpDiffusionModel,
    paths: &[PathRecord],
    p: f64,
) -> Result<NormEstimate> {
    if !(p >= 1.0) {
        return Err(Error::invalid(format!("norm order must be >= 1, got {p}")));
    }
    check_same_grid(paths)?;
    let n = model.n;
    let mut vals = Vec::with_capacity(paths.len());
    let mut b = vec![0.0; n];
    let mut c = vec![0.0; n];
    for path in paths {
        if path.n != n {
            return Err(Error::invalid("path dimension does not match model"));
        }
        let dt = path.grid.dt();
        let x0 = norm(path.value(0));
        let mut mm = 0.0;
        let mut var = 0.0;
        for k in 0..path.steps() {
            let br = path.bracket_at(k);
            mm += (0..n).map(|i| br[i * n + i]).sum::<f64>();
            let a = path.actions[k];
            model.drift.eval(path.value(k), a, &mut b);
            for s in [Stream::Idio, Stream::Common] {
                if model.component(s).is_some() {
                    model.compensator(s, path.value(k), a, &mut c);
                    b.iter_mut().zip(&c).for_each(|(u, v)| *u -= v);
                }
            }
            var += norm(&b) * dt;
        }
        mm += path
            .jumps
            .iter()
            .map(|j| j.delta.iter().map(|d| d * d).sum::<f64>())
            .sum::<f64>();
        vals.push(x0 + mm.sqrt() + var);
    }
    lp_norm(&vals, p)
}

/// `E[(Σ|ΔX|)^p]^{1/p}`.
pub fn jump_sum_estimate(paths: &[PathRecord], p: f64) -> Result<NormEstimate> {
    check_same_grid(paths)?;
    let vals: Vec<f64> = paths
        .iter()
        .map(|path| path.jumps.iter().map(|j| norm(&j.delta)).sum())
        .collect();
    lp_norm(&vals, p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BracketKind {
    /// Products of grid increments.
    Realized,
    /// Stored `σσᵀΔt` accumulators (same path only).
    ModelImplied,
}

/// Cumulative bracket `[a, b]` on the grid, `na × nb` per node.
#[derive(Debug, Clone, PartialEq)]
pub struct BracketPath {
    pub na: usize,
    pub nb: usize,
    pub continuous: Vec<f64>,
    pub jump: Vec<f64>,
}

impl BracketPath {
    pub fn at(&self, k: usize) -> Vec<f64> {
        let w = self.na * self.nb;
        self.continuous[k * w..(k + 1) * w]
            .iter()
            .zip(&self.jump[k * w..(k + 1) * w])
            .map(|(c, j)| c + j)
            .collect()
    }

    pub fn terminal(&self) -> Vec<f64> {
        self.at(self.continuous.len() / (self.na * self.nb) - 1)
    }
}

pub fn realized_bracket(a: &PathRecord, b: &PathRecord, kind: BracketKind) -> Result<BracketPath> {
    if !a.grid.same_as(&b.grid) {
        return Err(Error::invalid("bracket of paths on different grids"));
    }
    let (na, nb) = (a.n, b.n);
    let w = na * nb;
    let steps = a.steps();
    let mut cont = vec![0.0; (steps + 1) * w];
    let mut jump = vec![0.0; (steps + 1) * w];
    if kind == BracketKind::ModelImplied && !std::ptr::eq(a, b) && a != b {
        return Err(Error::Unsupported(
            "model-implied cross bracket needs the joint model; use a joint path".into(),
        ));
    }
    for k in 0..steps {
        let (lo, hi) = cont.split_at_mut((k + 1) * w);
        let prev = &lo[k * w..];
        let cur = &mut hi[..w];
        match kind {
            BracketKind::Realized => {
                let da: Vec<f64> = a
                    .left(k + 1)
                    .iter()
                    .zip(a.value(k))
                    .map(|(u, v)| u - v)
                    .collect();
                let db: Vec<f64> = b
                    .left(k + 1)
                    .iter()
                    .zip(b.value(k))
                    .map(|(u, v)| u - v)
                    .collect();
                for i in 0..na {
                    for j in 0..nb {
                        cur[i * nb + j] = prev[i * nb + j] + da[i] * db[j];
                    }
                }
            }
            BracketKind::ModelImplied => {
                for (c, (p, inc)) in cur.iter_mut().zip(prev.iter().zip(a.bracket_at(k))) {
                    *c = p + inc;
                }
            }
        }
        let (lo, hi) = jump.split_at_mut((k + 1) * w);
        let prev = &lo[k * w..];
        let cur = &mut hi[..w];
        cur.copy_from_slice(prev);
        if let (Some(ja), Some(jb)) = (a.jump_at(k + 1), b.jump_at(k + 1)) {
            for i in 0..na {
                for j in 0..nb {
                    cur[i * nb + j] += ja.delta[i] * jb.delta[j];
                }
            }
        }
    }
    Ok(BracketPath {
        na,
        nb,
        continuous: cont,
        jump,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongOrderReport {
    pub steps: Vec<usize>,
    pub errors: Vec<Summary>,
    pub order: f64,
}

/// `E|X_T^{Δt} - X_T^{Δt/2}|` for `K ∈ levels` with coupled noise, and the
/// fitted order in `Δt`. Uses the first state coordinate.
pub fn strong_order(
    model: &JumpDiffusionModel,
    horizon: f64,
    levels: &[usize],
    n_paths: usize,
    master_seed: u64,
) -> Result<StrongOrderReport> {
    use rayon::prelude::*;
    if levels.len() < 2 {
        return Err(Error::InsufficientData(
            "need at least two grid levels".into(),
        ));
    }
    let mut errors = Vec::new();
    let mut dts = Vec::new();
    for (li, &k) in levels.iter().enumerate() {
        let fine = TimeGrid::new(horizon, 2 * k)?;
        let level_seed = seed::derive(master_seed, tag::LEVEL, li as u64);
        let diffs: Vec<f64> = (0..n_paths as u64)
            .into_par_iter()
            .map(|i| -> Result<f64> {
                let cs = seed::common_seed(level_seed, i);
                let fb = model.sample_noise(
                    common_noise(model, &fine, cs)?,
                    seed::derive(cs, tag::PARTICLE, 0),
                )?;
                let cb = coarsen(&fb)?;
                let x0 = model.initial.sample(fb.idio_seed);
                let pf = simulate_path(model, &fb, &x0, None)?;
                let pc = simulate_path(model, &cb, &x0, None)?;
                Ok((pf.terminal()[0] - pc.terminal()[0]).abs())
            })
            .collect::<Result<_>>()?;
        errors.push(Summary::of(&diffs));
        dts.push(horizon / k as f64);
    }
    let means: Vec<f64> = errors.iter().map(|s| s.mean.max(1e-300)).collect();
    Ok(StrongOrderReport {
        steps: levels.to_vec(),
        order: stats::loglog_slope(&dts, &means)?,
        errors,
    })
}

/// Same Brownian and jump realisation on a grid with half the steps.
pub fn coarsen(b: &NoiseBundle) -> Result<NoiseBundle> {
    let g = b.grid();
    if g.steps() % 2 != 0 {
        return Err(Error::invalid("coarsening needs an even number of steps"));
    }
    let coarse = TimeGrid::new(g.horizon(), g.steps() / 2)?;
    let pair_sum = |dw: &[f64], d: usize| -> Vec<f64> {
        (0..coarse.steps() * d)
            .map(|i| {
                let (k, l) = (i / d, i % d);
                dw[(2 * k) * d + l] + dw[(2 * k + 1) * d + l]
            })
            .collect()
    };
    let remap = |ev: &[JumpEvent]| -> Vec<JumpEvent> {
        ev.iter()
            .map(|e| JumpEvent {
                time: e.time,
                step: coarse.interval_of(e.time),
                mark: e.mark.clone(),
            })
            .collect()
    };
    let c = &b.common;
    let common = Arc::new(CommonNoise {
        seed: c.seed,
        grid: coarse.clone(),
        d_c: c.d_c,
        dw: pair_sum(&c.dw, c.d_c),
        jumps: remap(&c.jumps),
    });
    Ok(NoiseBundle {
        common,
        idio_seed: b.idio_seed,
        d_i: b.d_i,
        dw: pair_sum(&b.dw, b.d_i),
        jumps: remap(&b.jumps),
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_same_grid(paths: &[PathRecord]) -> Result<()> {
    if let Some(first) = paths.first() {
        if paths.iter().any(|p| !p.grid.same_as(&first.grid)) {
            return Err(Error::invalid("paths on different grids"));
        }
    }
    Ok(())
}
