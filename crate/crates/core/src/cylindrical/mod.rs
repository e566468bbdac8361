//! Cylindrical functionals `Φ(μ, y) = f(⟨μ, g¹⟩, …, ⟨μ, gᵐ⟩, y)` and their
//! linear derivatives.

mod checks;
mod outer;
mod projection;
mod test_fn;

pub use checks::{
    derivative_consistency, ftc_check, gauss_legendre, growth_bound_check, perturbation_check,
    relative_error, ConsistencyReport, FtcResidual, GrowthReport, PerturbationItem,
    PerturbationReport, DEFAULT_FTC_NODES, GROWTH_LABELS, GROWTH_SHELLS,
};
pub use outer::{Monomial, OuterFunction};
pub use projection::{project_functional, HatPartition, ProjectedFunctional};
pub use test_fn::{fd_gradient, fd_jacobian, Profile, ScalarField, TestFunction, VectorField};

use crate::error::{Error, Result};
use crate::flow::Measure;

/// Functional of a measure and a finite-dimensional state, exposing the
/// first two linear derivatives.
pub trait MeasureFunctional: Send + Sync {
    fn x_dim(&self) -> usize;
    fn y_dim(&self) -> usize;
    fn value(&self, mu: &dyn Measure, y: &[f64]) -> Result<f64>;
    fn linear_derivative(&self, mu: &dyn Measure, y: &[f64], x: &[f64]) -> Result<f64>;
    fn second_linear_derivative(
        &self,
        mu: &dyn Measure,
        y: &[f64],
        x1: &[f64],
        x2: &[f64],
    ) -> Result<f64>;

    /// `⟨ν, δΦ/δμ(μ, y, ·)⟩`.
    fn pair_linear_derivative(&self, mu: &dyn Measure, y: &[f64], nu: &dyn Measure) -> Result<f64> {
        let mut acc = crate::stats::CompensatedSum::new();
        for i in 0..nu.len() {
            acc.add(nu.weight(i) * self.linear_derivative(mu, y, nu.point(i))?);
        }
        Ok(acc.value())
    }

    /// `⟨ν ⊗ ν, δ²Φ/δμ²(μ, y, ·, ·)⟩` for a signed `ν`.
    fn pair_second_derivative(&self, mu: &dyn Measure, y: &[f64], nu: &dyn Measure) -> Result<f64> {
        let mut acc = crate::stats::CompensatedSum::new();
        for i in 0..nu.len() {
            for j in 0..nu.len() {
                acc.add(
                    nu.weight(i)
                        * nu.weight(j)
                        * self.second_linear_derivative(mu, y, nu.point(i), nu.point(j))?,
                );
            }
        }
        Ok(acc.value())
    }
}

#[derive(Debug, Clone)]
pub struct CylindricalFunctional {
    pub outer: OuterFunction,
    pub tests: Vec<TestFunction>,
    pub x_dim: usize,
    pub y_dim: usize,
}

/// Values, gradients (`m × d`) and Hessians (`m × d × d`) of every test
/// function at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct TestEval {
    pub g: Vec<f64>,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

impl TestEval {
    pub fn zeros(m: usize, d: usize) -> Self {
        Self {
            g: vec![0.0; m],
            grad: vec![0.0; m * d],
            hess: vec![0.0; m * d * d],
        }
    }
}

/// Derivatives of the outer function frozen at `(Z(μ), y)`.
#[derive(Debug, Clone)]
pub struct Frozen {
    pub m: usize,
    pub d: usize,
    pub dy: usize,
    pub z: Vec<f64>,
    pub y: Vec<f64>,
    pub value: f64,
    pub fz: Vec<f64>,
    /// `m × m`
    pub fzz: Vec<f64>,
    pub fy: Vec<f64>,
    /// `dy × dy`
    pub fyy: Vec<f64>,
    /// `m × dy`
    pub fzy: Vec<f64>,
}

fn finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical(0, format!("{what} not finite")))
    }
}

impl CylindricalFunctional {
    pub fn new(
        outer: OuterFunction,
        tests: Vec<TestFunction>,
        x_dim: usize,
        y_dim: usize,
    ) -> Result<Self> {
        if x_dim == 0 {
            return Err(Error::invalid("measure dimension must be positive"));
        }
        if outer.arity() != tests.len() + y_dim {
            return Err(Error::invalid(format!(
                "outer function takes {} arguments, expected {} + {}",
                outer.arity(),
                tests.len(),
                y_dim
            )));
        }
        if let Some(g) = tests.iter().find(|g| g.dim() != x_dim) {
            return Err(Error::invalid(format!(
                "test function of dimension {} in a {x_dim}-d functional",
                g.dim()
            )));
        }
        Ok(Self {
            outer,
            tests,
            x_dim,
            y_dim,
        })
    }

    /// `⟨μ, g⟩`.
    pub fn linear(g: TestFunction) -> Result<Self> {
        let d = g.dim();
        Self::new(OuterFunction::linear(&[1.0]), vec![g], d, 0)
    }

    pub fn m(&self) -> usize {
        self.tests.len()
    }

    /// False when some derivative falls back to finite differences.
    pub fn is_analytic(&self) -> bool {
        self.outer.is_analytic() && self.tests.iter().all(TestFunction::is_analytic)
    }

    fn check_measure(&self, mu: &dyn Measure) -> Result<()> {
        if mu.dim() != self.x_dim {
            return Err(Error::invalid(format!(
                "measure of dimension {} for a {}-d functional",
                mu.dim(),
                self.x_dim
            )));
        }
        Ok(())
    }

    fn check_y(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.y_dim {
            return Err(Error::invalid(format!(
                "y has length {}, expected {}",
                y.len(),
                self.y_dim
            )));
        }
        Ok(())
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.x_dim {
            return Err(Error::invalid(format!(
                "point has length {}, expected {}",
                x.len(),
                self.x_dim
            )));
        }
        Ok(())
    }

    /// `Z(μ) = (⟨μ, gⁱ⟩)ᵢ`.
    pub fn z(&self, mu: &dyn Measure) -> Result<Vec<f64>> {
        self.check_measure(mu)?;
        self.tests
            .iter()
            .map(|g| mu.pair(&|x| g.value(x)))
            .collect()
    }

    pub fn eval(&self, mu: &dyn Measure, y: &[f64]) -> Result<f64> {
        let z = self.z(mu)?;
        self.eval_z(&z, y)
    }

    pub fn eval_z(&self, z: &[f64], y: &[f64]) -> Result<f64> {
        self.check_y(y)?;
        let w: Vec<f64> = z.iter().chain(y).copied().collect();
        let v = self.outer.value(&w);
        if !v.is_finite() {
            return Err(Error::numerical(0, "functional value not finite"));
        }
        Ok(v)
    }

    pub fn freeze(&self, mu: &dyn Measure, y: &[f64]) -> Result<Frozen> {
        let z = self.z(mu)?;
        self.freeze_z(&z, y)
    }

    pub fn freeze_z(&self, z: &[f64], y: &[f64]) -> Result<Frozen> {
        self.check_y(y)?;
        let (m, dy) = (self.m(), self.y_dim);
        if z.len() != m {
            return Err(Error::invalid("wrong number of projections"));
        }
        finite(z, "projection")?;
        let a = m + dy;
        let w: Vec<f64> = z.iter().chain(y).copied().collect();
        let mut grad = vec![0.0; a];
        let mut hess = vec![0.0; a * a];
        let value = self.outer.eval_all(&w, &mut grad, &mut hess);
        finite(&[value], "functional value")?;
        finite(&grad, "outer gradient")?;
        finite(&hess, "outer Hessian")?;
        let block = |r0: usize, nr: usize, c0: usize, nc: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(nr * nc);
            for r in 0..nr {
                out.extend_from_slice(&hess[(r0 + r) * a + c0..(r0 + r) * a + c0 + nc]);
            }
            out
        };
        Ok(Frozen {
            m,
            d: self.x_dim,
            dy,
            z: z.to_vec(),
            y: y.to_vec(),
            value,
            fz: grad[..m].to_vec(),
            fzz: block(0, m, 0, m),
            fy: grad[m..].to_vec(),
            fyy: block(m, dy, m, dy),
            fzy: block(0, m, m, dy),
        })
    }

    pub fn tests_at(&self, x: &[f64]) -> Result<TestEval> {
        let mut out = TestEval::zeros(self.m(), self.x_dim);
        self.tests_into(x, &mut out)?;
        Ok(out)
    }

    /// As [`tests_at`](Self::tests_at), reusing `out`.
    pub fn tests_into(&self, x: &[f64], out: &mut TestEval) -> Result<()> {
        self.check_x(x)?;
        let d = self.x_dim;
        for (i, g) in self.tests.iter().enumerate() {
            out.g[i] = g.eval_all(
                x,
                &mut out.grad[i * d..(i + 1) * d],
                &mut out.hess[i * d * d..(i + 1) * d * d],
            );
        }
        finite(&out.g, "test function")?;
        finite(&out.grad, "test gradient")?;
        finite(&out.hess, "test Hessian")
    }

    /// Test-function values only.
    pub fn test_values_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_x(x)?;
        for (o, g) in out.iter_mut().zip(&self.tests) {
            *o = g.value(x);
        }
        finite(out, "test function")
    }

    pub fn grad_y(&self, mu: &dyn Measure, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.freeze(mu, y)?.fy)
    }

    pub fn hess_y(&self, mu: &dyn Measure, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.freeze(mu, y)?.fyy)
    }

    pub fn linear_grad_x(&self, mu: &dyn Measure, y: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
        Ok(self.freeze(mu, y)?.linear_grad_x(&self.tests_at(x1)?))
    }

    pub fn linear_hess_x(&self, mu: &dyn Measure, y: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
        Ok(self.freeze(mu, y)?.linear_hess_x(&self.tests_at(x1)?))
    }

    pub fn linear_grad_y(&self, mu: &dyn Measure, y: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
        Ok(self.freeze(mu, y)?.linear_grad_y(&self.tests_at(x1)?))
    }

    pub fn linear_grad_xy(&self, mu: &dyn Measure, y: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
        Ok(self.freeze(mu, y)?.linear_grad_xy(&self.tests_at(x1)?))
    }

    pub fn second_grad_x1(
        &self,
        mu: &dyn Measure,
        y: &[f64],
        x1: &[f64],
        x2: &[f64],
    ) -> Result<Vec<f64>> {
        Ok(self
            .freeze(mu, y)?
            .second_grad_x1(&self.tests_at(x1)?, &self.tests_at(x2)?))
    }

    pub fn second_grad_x1x2(
        &self,
        mu: &dyn Measure,
        y: &[f64],
        x1: &[f64],
        x2: &[f64],
    ) -> Result<Vec<f64>> {
        Ok(self
            .freeze(mu, y)?
            .second_grad_x1x2(&self.tests_at(x1)?, &self.tests_at(x2)?))
    }
}

impl MeasureFunctional for CylindricalFunctional {
    fn x_dim(&self) -> usize {
        self.x_dim
    }

    fn y_dim(&self) -> usize {
        self.y_dim
    }

    fn value(&self, mu: &dyn Measure, y: &[f64]) -> Result<f64> {
        self.eval(mu, y)
    }

    fn linear_derivative(&self, mu: &dyn Measure, y: &[f64], x: &[f64]) -> Result<f64> {
        Ok(self.freeze(mu, y)?.linear(&self.tests_at(x)?))
    }

    fn second_linear_derivative(
        &self,
        mu: &dyn Measure,
        y: &[f64],
        x1: &[f64],
        x2: &[f64],
    ) -> Result<f64> {
        Ok(self
            .freeze(mu, y)?
            .second(&self.tests_at(x1)?, &self.tests_at(x2)?))
    }

    fn pair_linear_derivative(&self, mu: &dyn Measure, y: &[f64], nu: &dyn Measure) -> Result<f64> {
        let fr = self.freeze(mu, y)?;
        let zn = self.z(nu)?;
        Ok(fr.fz.iter().zip(&zn).map(|(a, b)| a * b).sum())
    }

    fn pair_second_derivative(&self, mu: &dyn Measure, y: &[f64], nu: &dyn Measure) -> Result<f64> {
        let fr = self.freeze(mu, y)?;
        let zn = self.z(nu)?;
        Ok(fr.second_from(&zn, &zn))
    }
}

impl Frozen {
    /// `δΦ/δμ(x₁) = Σ ∂_{zᵢ} f gⁱ(x₁)`.
    pub fn linear(&self, t: &TestEval) -> f64 {
        self.fz.iter().zip(&t.g).map(|(a, b)| a * b).sum()
    }

    /// `∇_{x₁} δΦ/δμ`, length `d`.
    pub fn linear_grad_x(&self, t: &TestEval) -> Vec<f64> {
        let d = self.d;
        (0..d)
            .map(|k| (0..self.m).map(|i| self.fz[i] * t.grad[i * d + k]).sum())
            .collect()
    }

    /// `∇²_{x₁} δΦ/δμ`, `d × d`.
    pub fn linear_hess_x(&self, t: &TestEval) -> Vec<f64> {
        let dd = self.d * self.d;
        (0..dd)
            .map(|kl| (0..self.m).map(|i| self.fz[i] * t.hess[i * dd + kl]).sum())
            .collect()
    }

    /// `∇_y δΦ/δμ`, length `dy`.
    pub fn linear_grad_y(&self, t: &TestEval) -> Vec<f64> {
        (0..self.dy)
            .map(|a| {
                (0..self.m)
                    .map(|i| self.fzy[i * self.dy + a] * t.g[i])
                    .sum()
            })
            .collect()
    }

    /// `∇_{x₁}∇_y δΦ/δμ`, `d × dy`.
    pub fn linear_grad_xy(&self, t: &TestEval) -> Vec<f64> {
        let (d, dy) = (self.d, self.dy);
        let mut out = vec![0.0; d * dy];
        for k in 0..d {
            for a in 0..dy {
                out[k * dy + a] = (0..self.m)
                    .map(|i| self.fzy[i * dy + a] * t.grad[i * d + k])
                    .sum();
            }
        }
        out
    }

    /// `Σᵢⱼ fzzᵢⱼ aᵢ bⱼ`, summed so that swapping `a` and `b` is bit-exact.
    pub fn second_from(&self, a: &[f64], b: &[f64]) -> f64 {
        let m = self.m;
        let mut s = 0.0;
        for i in 0..m {
            s += self.fzz[i * m + i] * (a[i] * b[i]);
            for j in i + 1..m {
                s += self.fzz[i * m + j] * (a[i] * b[j] + a[j] * b[i]);
            }
        }
        s
    }

    /// `δ²Φ/δμ²(x₁, x₂)`.
    pub fn second(&self, t1: &TestEval, t2: &TestEval) -> f64 {
        self.second_from(&t1.g, &t2.g)
    }

    /// `∇_{x₁} δ²Φ/δμ²(x₁, x₂)`, length `d`.
    pub fn second_grad_x1(&self, t1: &TestEval, t2: &TestEval) -> Vec<f64> {
        let (m, d) = (self.m, self.d);
        (0..d)
            .map(|k| {
                let mut s = 0.0;
                for i in 0..m {
                    for j in 0..m {
                        s += self.fzz[i * m + j] * t1.grad[i * d + k] * t2.g[j];
                    }
                }
                s
            })
            .collect()
    }

    /// `∇_{x₁}∇_{x₂} δ²Φ/δμ²`, `d × d` with rows indexing `x₁`.
    pub fn second_grad_x1x2(&self, t1: &TestEval, t2: &TestEval) -> Vec<f64> {
        let (m, d) = (self.m, self.d);
        let mut out = vec![0.0; d * d];
        for k in 0..d {
            for l in 0..d {
                let mut s = 0.0;
                for i in 0..m {
                    s += self.fzz[i * m + i] * (t1.grad[i * d + k] * t2.grad[i * d + l]);
                    for j in i + 1..m {
                        s += self.fzz[i * m + j]
                            * (t1.grad[i * d + k] * t2.grad[j * d + l]
                                + t1.grad[j * d + k] * t2.grad[i * d + l]);
                    }
                }
                out[k * d + l] = s;
            }
        }
        out
    }
}
