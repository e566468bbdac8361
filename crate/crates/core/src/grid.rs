use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform time grid `0 = t_0 < ... < t_K = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    nodes: Vec<f64>,
}

pub fn build_time_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(horizon, steps)
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::invalid(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::invalid("grid needs at least one step"));
        }
        let mut nodes: Vec<f64> = (0..=steps)
            .map(|k| horizon * k as f64 / steps as f64)
            .collect();
        nodes[steps] = horizon;
        Ok(Self {
            horizon,
            steps,
            nodes,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn t(&self, k: usize) -> f64 {
        self.nodes[k]
    }

    /// Index `k` of the interval `(t_k, t_{k+1}]` containing `time`.
    pub fn interval_of(&self, time: f64) -> usize {
        let k = (time / self.dt()).ceil() as usize;
        k.saturating_sub(1).min(self.steps - 1)
    }

    /// Same horizon and step count.
    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.steps == other.steps && self.horizon == other.horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_steps() {
        let g = build_time_grid(1.0, 4).unwrap();
        assert_eq!(g.nodes(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.dt(), 0.25);
    }

    #[test]
    fn single_step() {
        assert_eq!(build_time_grid(2.0, 1).unwrap().nodes(), &[0.0, 2.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            build_time_grid(0.0, 4),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            build_time_grid(-1.0, 4),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            build_time_grid(1.0, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn interval_lookup_is_right_closed() {
        let g = build_time_grid(1.0, 4).unwrap();
        assert_eq!(g.interval_of(0.25), 0);
        assert_eq!(g.interval_of(0.2500001), 1);
        assert_eq!(g.interval_of(1.0), 3);
        assert_eq!(g.interval_of(1e-9), 0);
    }
}
