//! Conditionally independent copies given the common noise.
//!
//! A copy is a path driven by the same common noise and a fresh
//! idiosyncratic seed. Checks on the construction compare copies across
//! replicate ensembles that share a common seed.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::JumpDiffusionModel;
use crate::noise::CommonNoise;
use crate::path::{common_noise, simulate_path, PathRecord};
use crate::seed::{self, tag};
use crate::stats::{self, binomial_acceptance_band, ks_two_sample, CompensatedSum, Summary};

#[derive(Debug, Clone, PartialEq)]
pub struct CopyEnsemble {
    pub common_seed: u64,
    pub base: PathRecord,
    pub copies: Vec<PathRecord>,
}

impl CopyEnsemble {
    pub fn len(&self) -> usize {
        self.copies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.copies.is_empty()
    }
}

/// Idiosyncratic seed of copy `i` (1-based) for base seed `base`.
pub fn copy_seed(base: u64, i: u64) -> u64 {
    seed::derive(base, tag::COPY, i)
}

/// Simulate one member per idiosyncratic seed on a shared common noise.
/// `actions`, if given, is a G-measurable action per interval.
pub fn simulate_members(
    model: &JumpDiffusionModel,
    common: &Arc<CommonNoise>,
    idio_seeds: &[u64],
    actions: Option<&[f64]>,
) -> Result<Vec<PathRecord>> {
    use rayon::prelude::*;
    model.validate()?;
    if let Some(a) = actions {
        if a.len() != common.grid.steps() {
            return Err(Error::invalid(
                "action path length must equal the number of steps",
            ));
        }
    }
    idio_seeds
        .par_iter()
        .map(|&s| {
            let noise = model.sample_noise(common.clone(), s)?;
            let x0 = model.initial.sample(s);
            match actions {
                Some(a) => simulate_path(model, &noise, &x0, Some(&|k, _| a[k])),
                None => simulate_path(model, &noise, &x0, None),
            }
        })
        .collect()
}

/// Base path with idiosyncratic seed `base_idio_seed` plus `n` copies.
pub fn spawn_copies(
    model: &JumpDiffusionModel,
    grid: &TimeGrid,
    common_seed: u64,
    n: usize,
    base_idio_seed: u64,
) -> Result<CopyEnsemble> {
    let seeds: Vec<u64> = (1..=n as u64)
        .map(|i| copy_seed(base_idio_seed, i))
        .collect();
    spawn_copies_with_seeds(model, grid, common_seed, base_idio_seed, &seeds, None)
}

pub fn spawn_copies_with_seeds(
    model: &JumpDiffusionModel,
    grid: &TimeGrid,
    common_seed: u64,
    base_idio_seed: u64,
    copy_seeds: &[u64],
    actions: Option<&[f64]>,
) -> Result<CopyEnsemble> {
    if copy_seeds.is_empty() {
        return Err(Error::invalid("need at least one copy"));
    }
    let common = common_noise(model, grid, common_seed)?;
    let mut all = vec![base_idio_seed];
    all.extend_from_slice(copy_seeds);
    let mut paths = simulate_members(model, &common, &all, actions)?;
    let copies = paths.split_off(1);
    Ok(CopyEnsemble {
        common_seed,
        base: paths.pop().expect("base path"),
        copies,
    })
}

pub type Statistic = Arc<dyn Fn(&PathRecord) -> f64 + Send + Sync>;

/// Terminal value of coordinate `i`.
pub fn terminal_coordinate(i: usize) -> Statistic {
    Arc::new(move |p: &PathRecord| p.terminal()[i])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CopyTestConfig {
    pub ks_alpha: f64,
    /// Coverage of the binomial acceptance band on the rejection count.
    pub band_level: f64,
    pub t_threshold: f64,
    pub min_common: usize,
}

impl Default for CopyTestConfig {
    fn default() -> Self {
        Self {
            ks_alpha: 0.01,
            band_level: 0.99,
            t_threshold: 4.0,
            min_common: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub test: String,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
    pub n_common: usize,
    pub n_copies: usize,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_seed: Vec<f64>,
}

fn check_batch(batches: &[Vec<CopyEnsemble>], cfg: &CopyTestConfig) -> Result<usize> {
    if batches.len() < cfg.min_common {
        return Err(Error::InsufficientData(format!(
            "{} common seeds, need at least {}",
            batches.len(),
            cfg.min_common
        )));
    }
    let mut reps = usize::MAX;
    for group in batches {
        if group.len() < 2 {
            return Err(Error::InsufficientData(
                "need at least two replicate ensembles per common seed".into(),
            ));
        }
        let seed0 = group[0].common_seed;
        for e in group {
            if e.common_seed != seed0 {
                return Err(Error::invalid(
                    "ensembles in one group must share the common seed",
                ));
            }
            if e.copies.len() < 2 {
                return Err(Error::InsufficientData(
                    "need at least two copies per ensemble".into(),
                ));
            }
        }
        reps = reps.min(group.len());
    }
    Ok(reps)
}

/// For every common seed, KS-compare `φ(copy 1)` against `φ(copy 2)` across
/// replicate ensembles. Passes when the number of seeds rejected at
/// `ks_alpha` falls inside the central binomial band.
pub fn check_conditional_law_equality(
    batches: &[Vec<CopyEnsemble>],
    statistic: &Statistic,
    cfg: &CopyTestConfig,
) -> Result<TestReport> {
    check_batch(batches, cfg)?;
    let mut p_values = Vec::with_capacity(batches.len());
    for group in batches {
        let a: Vec<f64> = group.iter().map(|e| statistic(&e.copies[0])).collect();
        let b: Vec<f64> = group.iter().map(|e| statistic(&e.copies[1])).collect();
        p_values.push(ks_two_sample(&a, &b)?.p_value);
    }
    let rejections = p_values.iter().filter(|p| **p < cfg.ks_alpha).count();
    let (lo, hi) =
        binomial_acceptance_band(p_values.len() as u64, cfg.ks_alpha, 1.0 - cfg.band_level);
    let frac = rejections as f64 / p_values.len() as f64;
    Ok(TestReport {
        test: "conditional_law_equality".into(),
        statistic: frac,
        threshold: hi as f64 / p_values.len() as f64,
        pass: (lo as usize..=hi as usize).contains(&rejections),
        n_common: batches.len(),
        n_copies: batches[0][0].copies.len(),
        seeds: batches.iter().map(|g| g[0].common_seed).collect(),
        per_seed: p_values,
    })
}

/// Per common seed, the covariance of `φ(copy 1)` and `ψ(copy 2)` across
/// replicates; the studentized mean of these must stay below `t_threshold`.
pub fn check_conditional_independence(
    batches: &[Vec<CopyEnsemble>],
    phi: &Statistic,
    psi: &Statistic,
    cfg: &CopyTestConfig,
) -> Result<TestReport> {
    check_batch(batches, cfg)?;
    let covs: Vec<f64> = batches
        .iter()
        .map(|group| {
            let a: Vec<f64> = group.iter().map(|e| phi(&e.copies[0])).collect();
            let b: Vec<f64> = group.iter().map(|e| psi(&e.copies[1])).collect();
            stats::covariance_plugin(&a, &b)
        })
        .collect();
    let t = Summary::of(&covs).t_statistic();
    Ok(TestReport {
        test: "conditional_independence".into(),
        statistic: t,
        threshold: cfg.t_threshold,
        pass: t.abs() < cfg.t_threshold,
        n_common: batches.len(),
        n_copies: batches[0][0].copies.len(),
        seeds: batches.iter().map(|g| g[0].common_seed).collect(),
        per_seed: covs,
    })
}

/// Function of the base path and up to two copies.
pub enum CopyFunctional<'a> {
    Base(&'a dyn Fn(&PathRecord) -> f64),
    One(&'a dyn Fn(&PathRecord, &PathRecord) -> f64),
    Two(&'a dyn Fn(&PathRecord, &PathRecord, &PathRecord) -> f64),
}

/// Estimator of `E[h(X, X', X'') | F]`: average over copies (one-copy `h`)
/// or over ordered pairs of distinct copies (two-copy `h`), base held fixed.
/// Terms are summed in sorted order, so any relabelling of the copies gives
/// the same bits.
pub fn conditional_expectation(h: CopyFunctional<'_>, ensemble: &CopyEnsemble) -> Result<f64> {
    let c = &ensemble.copies;
    let mut terms = match h {
        CopyFunctional::Base(f) => return Ok(f(&ensemble.base)),
        CopyFunctional::One(f) => {
            if c.is_empty() {
                return Err(Error::invalid(
                    "one-copy functional needs at least one copy",
                ));
            }
            c.iter().map(|x| f(&ensemble.base, x)).collect::<Vec<f64>>()
        }
        CopyFunctional::Two(f) => {
            if c.len() < 2 {
                return Err(Error::invalid(
                    "two-copy functional needs at least two copies",
                ));
            }
            let mut v = Vec::with_capacity(c.len() * (c.len() - 1));
            for (i, x1) in c.iter().enumerate() {
                for (j, x2) in c.iter().enumerate() {
                    if i != j {
                        v.push(f(&ensemble.base, x1, x2));
                    }
                }
            }
            v
        }
    };
    Ok(sorted_mean(&mut terms))
}

/// Mean that does not depend on the order of `v`.
pub fn sorted_mean(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let mut acc = CompensatedSum::new();
    for x in v.iter() {
        acc.add(*x);
    }
    acc.value() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_time_grid;

    #[test]
    fn common_noise_only_gives_identical_copies() {
        let g = build_time_grid(1.0, 10).unwrap();
        let m = JumpDiffusionModel::scalar(0.1, 0.0, 1.0);
        let e = spawn_copies(&m, &g, 3, 4, 9).unwrap();
        for c in &e.copies {
            assert_eq!(c.values, e.base.values);
        }
    }

    #[test]
    fn seeds_distinct_and_noise_shared() {
        let g = build_time_grid(1.0, 10).unwrap();
        let m = JumpDiffusionModel::scalar(0.0, 1.0, 1.0);
        let e = spawn_copies(&m, &g, 3, 5, 9).unwrap();
        let mut seeds: Vec<u64> = e.copies.iter().map(|c| c.idio_seed).collect();
        seeds.push(e.base.idio_seed);
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), 6);
        assert!(e.copies.iter().all(|c| c.common_seed == 3));
    }

    #[test]
    fn base_only_functional_is_exact() {
        let g = build_time_grid(1.0, 5).unwrap();
        let m = JumpDiffusionModel::scalar(0.0, 1.0, 1.0);
        let e = spawn_copies(&m, &g, 1, 3, 2).unwrap();
        let f = |b: &PathRecord| b.terminal()[0] * 2.0;
        assert_eq!(
            conditional_expectation(CopyFunctional::Base(&f), &e).unwrap(),
            f(&e.base)
        );
    }

    #[test]
    fn two_copy_functional_needs_two_copies() {
        let g = build_time_grid(1.0, 5).unwrap();
        let m = JumpDiffusionModel::scalar(0.0, 1.0, 1.0);
        let e = spawn_copies(&m, &g, 1, 1, 2).unwrap();
        let f = |_: &PathRecord, a: &PathRecord, b: &PathRecord| a.terminal()[0] * b.terminal()[0];
        assert!(matches!(
            conditional_expectation(CopyFunctional::Two(&f), &e),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn too_few_common_seeds() {
        let g = build_time_grid(1.0, 5).unwrap();
        let m = JumpDiffusionModel::scalar(0.0, 1.0, 1.0);
        let batch = vec![vec![
            spawn_copies(&m, &g, 1, 2, 2).unwrap(),
            spawn_copies(&m, &g, 1, 2, 3).unwrap(),
        ]];
        let r = check_conditional_law_equality(
            &batch,
            &terminal_coordinate(0),
            &CopyTestConfig::default(),
        );
        assert!(matches!(r, Err(Error::InsufficientData(_))));
    }
}
