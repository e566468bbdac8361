//! Euler–Maruyama simulation of jump-diffusion paths.
//!
//! Per interval `(t_k, t_{k+1}]`:
//! `X_{k+1-} = X_k + (b - λ E[β]) Δt + σ^V ΔW_k + σ^W ΔW0_k`, then every jump
//! event of the interval is applied in time order, each amplitude evaluated
//! at the state just before it.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{JumpDiffusionModel, Stream};
use crate::noise::{CommonNoise, JumpEvent, NoiseBundle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpRecord {
    pub node: usize,
    pub left: Vec<f64>,
    pub delta: Vec<f64>,
    /// At least one event at this node came from the common stream.
    pub common: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub grid: TimeGrid,
    pub n: usize,
    /// `(K+1) × n`, right-continuous node values.
    pub values: Vec<f64>,
    pub jumps: Vec<JumpRecord>,
    /// `K × n × n`, model-implied `d[X,X]^c` over each interval.
    pub bracket: Vec<f64>,
    pub common_seed: u64,
    pub idio_seed: u64,
    /// Action applied on each interval, `K` entries.
    pub actions: Vec<f64>,
    /// Node → index into `jumps`.
    jump_index: Vec<Option<u32>>,
}

impl PathRecord {
    /// A path that never moves (useful as a probe and in tests).
    pub fn constant(grid: &TimeGrid, x: &[f64]) -> Self {
        let k = grid.steps();
        let n = x.len();
        Self {
            grid: grid.clone(),
            n,
            values: x.iter().copied().cycle().take((k + 1) * n).collect(),
            jumps: Vec::new(),
            bracket: vec![0.0; k * n * n],
            common_seed: 0,
            idio_seed: 0,
            actions: vec![0.0; k],
            jump_index: vec![None; k + 1],
        }
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k * self.n..(k + 1) * self.n]
    }

    pub fn jump_at(&self, k: usize) -> Option<&JumpRecord> {
        self.jump_index[k].map(|i| &self.jumps[i as usize])
    }

    /// Left limit `X_{t_k-}`.
    pub fn left(&self, k: usize) -> &[f64] {
        match self.jump_at(k) {
            Some(j) => &j.left,
            None => self.value(k),
        }
    }

    pub fn bracket_at(&self, k: usize) -> &[f64] {
        &self.bracket[k * self.n * self.n..(k + 1) * self.n * self.n]
    }

    pub fn terminal(&self) -> &[f64] {
        self.value(self.steps())
    }

    /// Write `t, x_1..x_n, is_jump, dx_1..dx_n`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.n).map(|i| format!("x_{i}")));
        header.push("is_jump".into());
        header.extend((1..=self.n).map(|i| format!("dx_{i}")));
        wr.write_record(&header)?;
        for k in 0..=self.steps() {
            let mut row = vec![fmt_num(self.grid.t(k))];
            row.extend(self.value(k).iter().map(|v| fmt_num(*v)));
            match self.jump_at(k) {
                Some(j) => {
                    row.push("1".into());
                    row.extend(j.delta.iter().map(|v| fmt_num(*v)));
                }
                None => {
                    row.push("0".into());
                    row.extend((0..self.n).map(|_| fmt_num(0.0)));
                }
            }
            wr.write_record(&row)?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// 17 significant digits, stable across platforms.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Mutable per-particle simulation state.
struct Walker<'a> {
    model: &'a JumpDiffusionModel,
    noise: &'a NoiseBundle,
    x: Vec<f64>,
    next_idio: usize,
    next_common: usize,
    record: PathRecord,
    drift: Vec<f64>,
    sv: Vec<f64>,
    sw: Vec<f64>,
    comp: Vec<f64>,
    beta: Vec<f64>,
}

impl<'a> Walker<'a> {
    fn new(model: &'a JumpDiffusionModel, noise: &'a NoiseBundle, x0: &[f64]) -> Result<Self> {
        let n = model.n;
        if x0.len() != n {
            return Err(Error::invalid(format!(
                "initial state has dimension {}, model has {n}",
                x0.len()
            )));
        }
        if noise.d_i != model.d_i || noise.common.d_c != model.d_c {
            return Err(Error::invalid("noise dimensions do not match model"));
        }
        if model.component(Stream::Common).is_none() && !noise.common.jumps.is_empty() {
            return Err(Error::invalid(
                "common jump events supplied for a model without a common jump stream",
            ));
        }
        let grid = noise.grid();
        let k = grid.steps();
        let mut values = Vec::with_capacity((k + 1) * n);
        values.extend_from_slice(x0);
        Ok(Self {
            model,
            noise,
            x: x0.to_vec(),
            next_idio: 0,
            next_common: 0,
            record: PathRecord {
                grid: grid.clone(),
                n,
                values,
                jumps: Vec::new(),
                bracket: Vec::with_capacity(k * n * n),
                common_seed: noise.common_seed(),
                idio_seed: noise.idio_seed,
                actions: Vec::with_capacity(k),
                jump_index: vec![None; k + 1],
            },
            drift: vec![0.0; n],
            sv: vec![0.0; n * model.d_i],
            sw: vec![0.0; n * model.d_c],
            comp: vec![0.0; n],
            beta: vec![0.0; n],
        })
    }

    fn step(&mut self, k: usize, a: f64) -> Result<()> {
        let m = self.model;
        let n = m.n;
        let dt = self.noise.grid().dt();
        m.drift.eval(&self.x, a, &mut self.drift);
        m.sigma_v.eval(&self.x, a, &mut self.sv);
        m.sigma_w.eval(&self.x, a, &mut self.sw);
        check_finite(k, "drift", &self.drift)?;
        check_finite(k, "sigma_v", &self.sv)?;
        check_finite(k, "sigma_w", &self.sw)?;

        // model-implied continuous bracket at X_k
        for i in 0..n {
            for j in 0..n {
                let mut v = 0.0;
                for l in 0..m.d_i {
                    v += self.sv[i * m.d_i + l] * self.sv[j * m.d_i + l];
                }
                for l in 0..m.d_c {
                    v += self.sw[i * m.d_c + l] * self.sw[j * m.d_c + l];
                }
                self.record.bracket.push(v * dt);
            }
        }

        let dw = self.noise.dw_at(k);
        let dw0 = self.noise.dw0_at(k);
        let x_k = self.x.clone();
        for i in 0..n {
            let mut inc = self.drift[i] * dt;
            for l in 0..m.d_i {
                inc += self.sv[i * m.d_i + l] * dw[l];
            }
            for l in 0..m.d_c {
                inc += self.sw[i * m.d_c + l] * dw0[l];
            }
            self.x[i] += inc;
        }
        for s in [Stream::Idio, Stream::Common] {
            if m.component(s).is_some() {
                m.compensator(s, &x_k, a, &mut self.comp);
                check_finite(k, "compensator", &self.comp)?;
                for i in 0..n {
                    self.x[i] -= self.comp[i] * dt;
                }
            }
        }
        check_finite(k, "state", &self.x)?;

        let idio = &self.noise.jumps;
        let common = &self.noise.common.jumps;
        let mut left: Option<Vec<f64>> = None;
        let mut any_common = false;
        loop {
            let ni = idio.get(self.next_idio).filter(|e| e.step == k);
            let nc = common.get(self.next_common).filter(|e| e.step == k);
            let (event, stream): (&JumpEvent, Stream) = match (ni, nc) {
                (Some(i), Some(c)) if c.time < i.time => (c, Stream::Common),
                (Some(i), _) => (i, Stream::Idio),
                (None, Some(c)) => (c, Stream::Common),
                (None, None) => break,
            };
            match stream {
                Stream::Idio => self.next_idio += 1,
                Stream::Common => {
                    self.next_common += 1;
                    any_common = true;
                }
            }
            let comp = m.component(stream).expect("events only for active streams");
            comp.beta.eval(&self.x, a, &event.mark, &mut self.beta);
            check_finite(k, "jump amplitude", &self.beta)?;
            if left.is_none() {
                left = Some(self.x.clone());
            }
            for i in 0..n {
                self.x[i] += self.beta[i];
            }
        }
        if let Some(left) = left {
            let delta: Vec<f64> = self.x.iter().zip(&left).map(|(a, b)| a - b).collect();
            if delta.iter().any(|d| *d != 0.0) {
                self.record.jump_index[k + 1] = Some(self.record.jumps.len() as u32);
                self.record.jumps.push(JumpRecord {
                    node: k + 1,
                    left,
                    delta,
                    common: any_common,
                });
            }
        }
        self.record.values.extend_from_slice(&self.x);
        self.record.actions.push(a);
        Ok(())
    }
}

fn check_finite(step: usize, what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical(step, format!("non-finite {what}")))
    }
}

/// Action rule for a single path: `(node index, current state) -> action`.
pub type PathPolicy<'a> = &'a (dyn Fn(usize, &[f64]) -> f64 + Sync);

pub fn simulate_path(
    model: &JumpDiffusionModel,
    noise: &NoiseBundle,
    x0: &[f64],
    policy: Option<PathPolicy<'_>>,
) -> Result<PathRecord> {
    let mut w = Walker::new(model, noise, x0)?;
    for k in 0..noise.grid().steps() {
        let a = policy.map_or(0.0, |p| p(k, &w.x));
        w.step(k, a)?;
    }
    Ok(w.record)
}

/// Simulate several particles in lockstep on one common noise. `policy`
/// sees the whole cloud at node `k` (row per particle) and returns one
/// action applied to every particle on `(t_k, t_{k+1}]`.
pub fn simulate_cloud(
    model: &JumpDiffusionModel,
    noises: &[NoiseBundle],
    x0s: &[Vec<f64>],
    policy: &mut dyn FnMut(usize, &[&[f64]]) -> Result<f64>,
) -> Result<Vec<PathRecord>> {
    if noises.len() != x0s.len() || noises.is_empty() {
        return Err(Error::invalid(
            "cloud needs one noise bundle per initial state",
        ));
    }
    let common = &noises[0].common;
    if noises
        .iter()
        .any(|b| !Arc::ptr_eq(&b.common, common) && b.common != *common)
    {
        return Err(Error::invalid("cloud members must share the common noise"));
    }
    let mut walkers = noises
        .iter()
        .zip(x0s)
        .map(|(b, x)| Walker::new(model, b, x))
        .collect::<Result<Vec<_>>>()?;
    for k in 0..common.grid.steps() {
        let a = {
            let states: Vec<&[f64]> = walkers.iter().map(|w| w.x.as_slice()).collect();
            policy(k, &states)?
        };
        for w in walkers.iter_mut() {
            w.step(k, a)?;
        }
    }
    Ok(walkers.into_iter().map(|w| w.record).collect())
}

/// Common noise for a model (Brownian plus common jumps, if any).
pub fn common_noise(
    model: &JumpDiffusionModel,
    grid: &TimeGrid,
    common_seed: u64,
) -> Result<Arc<CommonNoise>> {
    Ok(Arc::new(model.sample_common(grid, common_seed)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_time_grid;
    use crate::model::{Coefficient, JumpCoefficient};
    use crate::noise::{sample_noise, LevySpec, MarkDistribution};

    fn bundle(model: &JumpDiffusionModel, grid: &TimeGrid, cs: u64, is: u64) -> NoiseBundle {
        model
            .sample_noise(common_noise(model, grid, cs).unwrap(), is)
            .unwrap()
    }

    #[test]
    fn pure_common_noise_is_cumulative_sum() {
        let g = build_time_grid(1.0, 8).unwrap();
        let m = JumpDiffusionModel::scalar(0.0, 0.0, 1.0);
        let b = bundle(&m, &g, 1, 2);
        let p = simulate_path(&m, &b, &[0.0], None).unwrap();
        let mut acc = 0.0;
        for k in 0..8 {
            acc += b.common.dw[k];
            assert_eq!(p.value(k + 1)[0], acc);
        }
    }

    #[test]
    fn deterministic_drift_reaches_one() {
        for k in [1, 3, 7, 100] {
            let g = build_time_grid(1.0, k).unwrap();
            let m = JumpDiffusionModel::scalar(1.0, 0.0, 0.0);
            let p = simulate_path(&m, &bundle(&m, &g, 0, 0), &[0.0], None).unwrap();
            assert!((p.terminal()[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn jumps_are_recorded_consistently() {
        let g = build_time_grid(1.0, 20).unwrap();
        let l = LevySpec::new(
            5.0,
            MarkDistribution::Normal {
                mean: vec![0.0],
                std_dev: vec![1.0],
            },
        )
        .unwrap();
        let m = JumpDiffusionModel::scalar(0.0, 1.0, 0.0).with_idio_jumps(
            l.clone(),
            JumpCoefficient::additive(1, 1, vec![1.0], vec![0.0]).unwrap(),
        );
        let b = sample_noise(&g, 1, 1, &l, 3, 9).unwrap();
        let p = simulate_path(&m, &b, &[0.0], None).unwrap();
        assert!(!p.jumps.is_empty());
        for j in &p.jumps {
            assert!(j.delta[0] != 0.0);
            assert_eq!(p.value(j.node)[0], j.left[0] + j.delta[0]);
        }
    }

    #[test]
    fn bracket_is_model_implied() {
        let g = build_time_grid(1.0, 4).unwrap();
        let m = JumpDiffusionModel::scalar(0.0, 2.0, 1.0);
        let p = simulate_path(&m, &bundle(&m, &g, 0, 1), &[0.0], None).unwrap();
        assert!(p.bracket.iter().all(|b| (*b - 5.0 * 0.25).abs() < 1e-15));
    }

    #[test]
    fn cloud_matches_single_paths() {
        let g = build_time_grid(1.0, 10).unwrap();
        let m = JumpDiffusionModel::new(1, 1, 1)
            .with_drift(Coefficient::affine(1, 1, vec![0.0], vec![vec![-0.5]], vec![1.0]).unwrap())
            .with_sigma_v(Coefficient::constant(1, 1, vec![0.3]).unwrap())
            .with_sigma_w(Coefficient::constant(1, 1, vec![0.7]).unwrap());
        let cn = common_noise(&m, &g, 4).unwrap();
        let bs: Vec<_> = (0..3)
            .map(|i| m.sample_noise(cn.clone(), i).unwrap())
            .collect();
        let x0s = vec![vec![0.0]; 3];
        let cloud = simulate_cloud(&m, &bs, &x0s, &mut |_, _| Ok(0.5)).unwrap();
        for (b, c) in bs.iter().zip(&cloud) {
            let p = simulate_path(&m, b, &[0.0], Some(&|_, _| 0.5)).unwrap();
            assert_eq!(&p, c);
        }
    }

    #[test]
    fn non_finite_reports_step() {
        let g = build_time_grid(1.0, 5).unwrap();
        let m = JumpDiffusionModel::new(1, 0, 0).with_drift(Coefficient::from_fn(
            1,
            1,
            false,
            Arc::new(|x: &[f64], _, out: &mut [f64]| {
                out[0] = if x[0] > 0.05 { f64::NAN } else { 0.5 }
            }),
        ));
        let err = simulate_path(&m, &bundle(&m, &g, 0, 0), &[0.0], None).unwrap_err();
        assert!(
            matches!(err, Error::NumericalFailure { step: 1, .. }),
            "{err}"
        );
    }

    #[test]
    fn csv_has_expected_columns() {
        let g = build_time_grid(1.0, 2).unwrap();
        let p = PathRecord::constant(&g, &[1.5, -2.0]);
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let first = s.lines().next().unwrap();
        assert_eq!(first, "t,x_1,x_2,is_jump,dx_1,dx_2");
        assert_eq!(s.lines().count(), 4);
        assert!(s
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("0.0000000000000000e0,1.5000000000000000e0"));
    }
}
