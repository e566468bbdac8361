//! The finite-dimensional approximation `f_n(μ, y) = Φ(T_n*μ, y)` of a
//! general functional on one-dimensional measures.

use std::sync::Arc;

use super::MeasureFunctional;
use crate::error::{Error, Result};
use crate::flow::{DiscreteMeasure, Measure};

/// Piecewise-linear partition of unity on `ℝ`.
///
/// Interior hats have peaks on the mesh `-n, -n + h, …, n` with
/// `h = 1/(2n)`, so each support has diameter `1/n`. The exterior
/// `ℝ \ [-n, n]` carries two functions, `ψ⁻` and `ψ⁺`, equal to one beyond
/// `∓(n + h)` and ramping linearly to zero at `∓n`. Every function has its
/// anchor at its peak, so `ψᵢ(aⱼ) = δᵢⱼ`.
#[derive(Debug, Clone, PartialEq)]
pub struct HatPartition {
    pub n: usize,
    pub h: f64,
    anchors: Vec<f64>,
}

impl HatPartition {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("partition level n must be at least 1"));
        }
        let nf = n as f64;
        let h = 1.0 / (2.0 * nf);
        let interior = 4 * n * n;
        let mut anchors = Vec::with_capacity(interior + 3);
        anchors.push(-(nf + h));
        anchors.extend((0..=interior).map(|j| -nf + j as f64 * h));
        anchors.push(nf + h);
        // pin the interior end points exactly
        anchors[1] = -nf;
        anchors[interior + 1] = nf;
        Ok(Self { n, h, anchors })
    }

    pub fn anchors(&self) -> &[f64] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// The (at most two) nonzero `ψᵢ(x)` as `(i, ψᵢ(x))`.
    pub fn weights(&self, x: f64) -> [(usize, f64); 2] {
        let a = &self.anchors;
        let last = a.len() - 1;
        if x <= a[0] {
            return [(0, 1.0), (1, 0.0)];
        }
        if x >= a[last] {
            return [(last, 1.0), (last - 1, 0.0)];
        }
        let mut j = a.partition_point(|v| *v <= x) - 1;
        j = j.min(last - 1);
        if x == a[j] {
            return [(j, 1.0), (j + 1, 0.0)];
        }
        let t = (x - a[j]) / (a[j + 1] - a[j]);
        [(j, 1.0 - t), (j + 1, t)]
    }

    /// `T_nφ(x) = Σ φ(aᵢ) ψᵢ(x)`.
    pub fn apply(&self, phi: &dyn Fn(f64) -> f64, x: f64) -> f64 {
        self.weights(x)
            .iter()
            .filter(|(_, w)| *w != 0.0)
            .map(|(i, w)| w * phi(self.anchors[*i]))
            .sum()
    }

    /// `T_n*μ = Σ ⟨μ, ψᵢ⟩ δ_{aᵢ}`, atoms in anchor order.
    pub fn push_forward(&self, mu: &dyn Measure) -> Result<DiscreteMeasure> {
        if mu.dim() != 1 {
            return Err(Error::Unsupported(
                "T_n is implemented for one-dimensional measures only".into(),
            ));
        }
        let mut mass = vec![0.0; self.len()];
        for p in 0..mu.len() {
            let w = mu.weight(p);
            for (i, psi) in self.weights(mu.point(p)[0]) {
                if psi != 0.0 {
                    mass[i] += w * psi;
                }
            }
        }
        let (points, weights): (Vec<f64>, Vec<f64>) = self
            .anchors
            .iter()
            .zip(&mass)
            .filter(|(_, m)| **m != 0.0)
            .map(|(a, m)| (*a, *m))
            .unzip();
        DiscreteMeasure::new(1, points, weights)
    }
}

/// `f_n(μ, y) = Φ(T_n*μ, y)` with
/// `δf_n/δμ = T_n(δΦ/δμ(T_n*μ, y, ·))`.
#[derive(Clone)]
pub struct ProjectedFunctional {
    pub inner: Arc<dyn MeasureFunctional>,
    pub partition: HatPartition,
}

impl std::fmt::Debug for ProjectedFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProjectedFunctional")
            .field("n", &self.partition.n)
            .finish()
    }
}

pub fn project_functional(
    phi: Arc<dyn MeasureFunctional>,
    n: usize,
) -> Result<ProjectedFunctional> {
    if phi.x_dim() != 1 {
        return Err(Error::Unsupported(format!(
            "T_n projection needs d = 1, functional has d = {}",
            phi.x_dim()
        )));
    }
    Ok(ProjectedFunctional {
        inner: phi,
        partition: HatPartition::new(n)?,
    })
}

impl MeasureFunctional for ProjectedFunctional {
    fn x_dim(&self) -> usize {
        1
    }

    fn y_dim(&self) -> usize {
        self.inner.y_dim()
    }

    fn value(&self, mu: &dyn Measure, y: &[f64]) -> Result<f64> {
        self.inner.value(&self.partition.push_forward(mu)?, y)
    }

    fn linear_derivative(&self, mu: &dyn Measure, y: &[f64], x: &[f64]) -> Result<f64> {
        let tmu = self.partition.push_forward(mu)?;
        let mut s = 0.0;
        for (i, psi) in self.partition.weights(x[0]) {
            if psi != 0.0 {
                s += psi
                    * self
                        .inner
                        .linear_derivative(&tmu, y, &[self.partition.anchors[i]])?;
            }
        }
        Ok(s)
    }

    fn second_linear_derivative(
        &self,
        mu: &dyn Measure,
        y: &[f64],
        x1: &[f64],
        x2: &[f64],
    ) -> Result<f64> {
        let tmu = self.partition.push_forward(mu)?;
        let a = &self.partition.anchors;
        let mut s = 0.0;
        for (i, p) in self.partition.weights(x1[0]) {
            for (j, q) in self.partition.weights(x2[0]) {
                if p != 0.0 && q != 0.0 {
                    s += p
                        * q
                        * self
                            .inner
                            .second_linear_derivative(&tmu, y, &[a[i]], &[a[j]])?;
                }
            }
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{CylindricalFunctional, OuterFunction, Profile, TestFunction};
    use super::*;
    use crate::flow::EmpiricalConditionalLaw;

    #[test]
    fn partition_of_unity() {
        let p = HatPartition::new(3).unwrap();
        for k in 0..2000 {
            let x = -5.0 + k as f64 * 0.005;
            let s: f64 = p.weights(x).iter().map(|w| w.1).sum();
            assert!((s - 1.0).abs() < 1e-15);
            assert!(p.weights(x).iter().all(|w| w.1 >= 0.0));
        }
        let a = p.anchors();
        assert_eq!(a[1], -3.0);
        assert_eq!(a[a.len() - 2], 3.0);
        assert!(a.windows(2).all(|w| w[1] - w[0] <= 1.0 / 3.0 / 2.0 + 1e-15));
    }

    #[test]
    fn anchors_are_fixed_points() {
        let p = HatPartition::new(2).unwrap();
        for (i, a) in p.anchors().iter().enumerate() {
            assert_eq!(p.weights(*a)[0], (i, 1.0));
        }
    }

    #[test]
    fn rejects_higher_dimensions() {
        let g = TestFunction::Bump {
            centre: vec![0.0, 0.0],
            width: 1.0,
            amp: 1.0,
        };
        let phi = CylindricalFunctional::linear(g).unwrap();
        assert!(matches!(
            project_functional(Arc::new(phi), 2),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn linear_derivative_is_interpolated() {
        let g = TestFunction::scalar(Profile::Sin);
        let phi =
            CylindricalFunctional::new(OuterFunction::power(1, 0, 2, 1.0), vec![g], 1, 0).unwrap();
        let fnn = project_functional(Arc::new(phi.clone()), 2).unwrap();
        let mu = EmpiricalConditionalLaw::from_points(1, vec![0.1, 0.77, -1.3]).unwrap();
        let tmu = fnn.partition.push_forward(&mu).unwrap();
        let x = 0.6;
        let expect = fnn
            .partition
            .apply(&|a| phi.linear_derivative(&tmu, &[], &[a]).unwrap(), x);
        let got = fnn.linear_derivative(&mu, &[], &[x]).unwrap();
        assert!((got - expect).abs() < 1e-15);
    }
}
