//! Noise realisations. The common part (Brownian increments `dW0` plus an
//! optional common jump stream) is a function of the common seed alone; the
//! idiosyncratic part is a function of the idiosyncratic seed alone.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::seed::{self, tag};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarkDistribution {
    /// Independent normal coordinates.
    Normal {
        mean: Vec<f64>,
        std_dev: Vec<f64>,
    },
    Uniform {
        low: Vec<f64>,
        high: Vec<f64>,
    },
    Constant {
        value: Vec<f64>,
    },
}

impl MarkDistribution {
    pub fn dim(&self) -> usize {
        match self {
            Self::Normal { mean, .. } => mean.len(),
            Self::Uniform { low, .. } => low.len(),
            Self::Constant { value } => value.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Normal { mean, std_dev } => {
                mean.len() == std_dev.len() && std_dev.iter().all(|s| *s >= 0.0 && s.is_finite())
            }
            Self::Uniform { low, high } => {
                low.len() == high.len() && low.iter().zip(high).all(|(l, h)| l <= h)
            }
            Self::Constant { value } => value.iter().all(|v| v.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "malformed mark distribution {self:?}"
            )))
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match self {
            Self::Normal { mean, std_dev } => {
                for (o, (m, s)) in out.iter_mut().zip(mean.iter().zip(std_dev)) {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = m + s * z;
                }
            }
            Self::Uniform { low, high } => {
                for (o, (l, h)) in out.iter_mut().zip(low.iter().zip(high)) {
                    *o = l + (h - l) * rng.random::<f64>();
                }
            }
            Self::Constant { value } => out.copy_from_slice(value),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            Self::Normal { mean, .. } => mean.clone(),
            Self::Uniform { low, high } => {
                low.iter().zip(high).map(|(l, h)| 0.5 * (l + h)).collect()
            }
            Self::Constant { value } => value.clone(),
        }
    }

    /// Centre of symmetry, if the law is symmetric under `θ ↦ 2c - θ`.
    pub fn symmetry_center(&self) -> Option<Vec<f64>> {
        match self {
            Self::Constant { .. } => None,
            _ => Some(self.mean()),
        }
    }

    /// A fixed set of `budget` marks drawn from `seed`. Antithetic pairs are
    /// used when the law is symmetric. Returned row-major, `budget × dim`.
    pub fn fixed_marks(&self, budget: usize, seed: u64) -> Vec<f64> {
        let q = self.dim();
        let mut rng = seed::rng(seed, tag::COMPENSATOR_MARKS, 0);
        let mut out = vec![0.0; budget * q];
        if let Self::Constant { value } = self {
            for row in out.chunks_mut(q.max(1)) {
                row.copy_from_slice(value);
            }
            return out;
        }
        let centre = self.symmetry_center();
        let mut i = 0;
        while i < budget {
            let (head, tail) = out.split_at_mut((i + 1) * q);
            let row = &mut head[i * q..];
            self.sample(&mut rng, row);
            i += 1;
            if let (Some(c), true) = (&centre, i < budget) {
                for ((t, r), c) in tail[..q].iter_mut().zip(row.iter()).zip(c) {
                    *t = 2.0 * c - r;
                }
                i += 1;
            }
        }
        out
    }
}

/// Finite-intensity compound Poisson specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevySpec {
    pub intensity: f64,
    pub marks: MarkDistribution,
    #[serde(default = "default_moment_bound")]
    pub moment_bound: f64,
}

fn default_moment_bound() -> f64 {
    4.0
}

impl LevySpec {
    pub fn none() -> Self {
        Self {
            intensity: 0.0,
            marks: MarkDistribution::Constant { value: vec![] },
            moment_bound: default_moment_bound(),
        }
    }

    pub fn new(intensity: f64, marks: MarkDistribution) -> Result<Self> {
        let s = Self {
            intensity,
            marks,
            moment_bound: default_moment_bound(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.intensity >= 0.0) || !self.intensity.is_finite() {
            return Err(Error::invalid(format!(
                "jump intensity must be finite and nonnegative, got {}",
                self.intensity
            )));
        }
        self.marks.validate()
    }

    pub fn is_active(&self) -> bool {
        self.intensity > 0.0
    }

    /// Empirical `p`-th absolute moment of the mark norm from `n` draws.
    /// Returns an error if it is not finite or `p` exceeds the declared bound.
    pub fn check_moment(&self, p: f64, n: usize, seed: u64) -> Result<f64> {
        if p > self.moment_bound {
            return Err(Error::invalid(format!(
                "moment order {p} exceeds declared bound {}",
                self.moment_bound
            )));
        }
        let q = self.marks.dim();
        let mut rng = seed::rng(seed, tag::PROBES, 0);
        let mut buf = vec![0.0; q];
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                self.marks.sample(&mut rng, &mut buf);
                buf.iter().map(|v| v * v).sum::<f64>().sqrt().powf(p)
            })
            .collect();
        let m = stats::mean(&vals);
        if m.is_finite() {
            Ok(m)
        } else {
            Err(Error::numerical(0, "mark moment is not finite"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub time: f64,
    /// Interval index `k`: the event lies in `(t_k, t_{k+1}]` and is applied at node `k + 1`.
    pub step: usize,
    pub mark: Vec<f64>,
}

/// The G-measurable part of a noise realisation.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonNoise {
    pub seed: u64,
    pub grid: TimeGrid,
    pub d_c: usize,
    /// `K × d_c`, row-major.
    pub dw: Vec<f64>,
    pub jumps: Vec<JumpEvent>,
}

impl CommonNoise {
    pub fn sample(
        grid: &TimeGrid,
        d_c: usize,
        levy: Option<&LevySpec>,
        common_seed: u64,
    ) -> Result<Self> {
        let dw = gaussian_increments(
            grid,
            d_c,
            &mut seed::rng(common_seed, tag::COMMON_BROWNIAN, 0),
        );
        let jumps = match levy {
            Some(l) => poisson_events(grid, l, &mut seed::rng(common_seed, tag::COMMON_JUMPS, 0))?,
            None => Vec::new(),
        };
        Ok(Self {
            seed: common_seed,
            grid: grid.clone(),
            d_c,
            dw,
            jumps,
        })
    }

    pub fn dw_at(&self, k: usize) -> &[f64] {
        &self.dw[k * self.d_c..(k + 1) * self.d_c]
    }

    /// Nodes `k + 1` that carry a common jump.
    pub fn jump_nodes(&self) -> Vec<bool> {
        let mut out = vec![false; self.grid.steps() + 1];
        for e in &self.jumps {
            out[e.step + 1] = true;
        }
        out
    }
}

/// One full noise realisation: shared common part plus idiosyncratic part.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    pub common: Arc<CommonNoise>,
    pub idio_seed: u64,
    pub d_i: usize,
    /// `K × d_i`, row-major.
    pub dw: Vec<f64>,
    pub jumps: Vec<JumpEvent>,
}

impl NoiseBundle {
    pub fn sample_idio(
        common: Arc<CommonNoise>,
        d_i: usize,
        levy: Option<&LevySpec>,
        idio_seed: u64,
    ) -> Result<Self> {
        let grid = &common.grid;
        let dw = gaussian_increments(grid, d_i, &mut seed::rng(idio_seed, tag::IDIO_BROWNIAN, 0));
        let jumps = match levy {
            Some(l) => poisson_events(grid, l, &mut seed::rng(idio_seed, tag::IDIO_JUMPS, 0))?,
            None => Vec::new(),
        };
        Ok(Self {
            common,
            idio_seed,
            d_i,
            dw,
            jumps,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.common.grid
    }

    pub fn common_seed(&self) -> u64 {
        self.common.seed
    }

    pub fn dw_at(&self, k: usize) -> &[f64] {
        &self.dw[k * self.d_i..(k + 1) * self.d_i]
    }

    pub fn dw0_at(&self, k: usize) -> &[f64] {
        self.common.dw_at(k)
    }
}

/// Noise with idiosyncratic jumps only (the common stream carries Brownian
/// increments only).
pub fn sample_noise(
    grid: &TimeGrid,
    d_i: usize,
    d_c: usize,
    levy: &LevySpec,
    common_seed: u64,
    idio_seed: u64,
) -> Result<NoiseBundle> {
    levy.validate()?;
    let common = Arc::new(CommonNoise::sample(grid, d_c, None, common_seed)?);
    NoiseBundle::sample_idio(common, d_i, Some(levy), idio_seed)
}

fn gaussian_increments(grid: &TimeGrid, d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sd = grid.dt().sqrt();
    (0..grid.steps() * d)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            sd * z
        })
        .collect()
}

fn poisson_events(
    grid: &TimeGrid,
    levy: &LevySpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<JumpEvent>> {
    if !levy.is_active() {
        return Ok(Vec::new());
    }
    let horizon = grid.horizon();
    let count = Poisson::new(levy.intensity * horizon)
        .map_err(|e| Error::invalid(format!("poisson rate: {e}")))?
        .sample(rng) as usize;
    let mut times: Vec<f64> = (0..count)
        .map(|_| horizon * (1.0 - rng.random::<f64>()))
        .collect();
    times.sort_by(f64::total_cmp);
    let q = levy.marks.dim();
    Ok(times
        .into_iter()
        .map(|time| {
            let mut mark = vec![0.0; q];
            levy.marks.sample(rng, &mut mark);
            JumpEvent {
                time,
                step: grid.interval_of(time),
                mark,
            }
        })
        .collect())
}
