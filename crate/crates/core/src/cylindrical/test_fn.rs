//! Bounded test functions with two bounded derivatives.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Scalar profile `h` used in ridge functions `x ↦ amp · h(w·x + c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    Tanh,
    Sin,
    Cos,
    /// `exp(-s²/2)`
    Gaussian,
    /// `p(c(s))`, `p` a polynomial (ascending coefficients) and `c` the
    /// identity on `[-radius, radius]`, bent smoothly into
    /// `±(radius + width · tanh((|s| - radius)/width))` outside.
    ClipPoly {
        coeffs: Vec<f64>,
        radius: f64,
        width: f64,
    },
}

impl Profile {
    /// `(h, h', h'')` at `s`.
    pub fn eval(&self, s: f64) -> (f64, f64, f64) {
        match self {
            Self::Tanh => {
                let t = s.tanh();
                let d = 1.0 - t * t;
                (t, d, -2.0 * t * d)
            }
            Self::Sin => (s.sin(), s.cos(), -s.sin()),
            Self::Cos => (s.cos(), -s.sin(), -s.cos()),
            Self::Gaussian => {
                let e = (-0.5 * s * s).exp();
                (e, -s * e, (s * s - 1.0) * e)
            }
            Self::ClipPoly {
                coeffs,
                radius,
                width,
            } => {
                let (c, c1, c2) = clip(s, *radius, *width);
                let (p, p1, p2) = poly(coeffs, c);
                (p, p1 * c1, p2 * c1 * c1 + p1 * c2)
            }
        }
    }

    /// Sup-norms of `(h, h', h'')`.
    pub fn bounds(&self) -> (f64, f64, f64) {
        match self {
            Self::Tanh => (1.0, 1.0, 4.0 / (3.0 * 3f64.sqrt())),
            Self::Sin | Self::Cos => (1.0, 1.0, 1.0),
            Self::Gaussian => (1.0, (-0.5f64).exp(), 1.0),
            Self::ClipPoly { radius, width, .. } => {
                // h is constant-limited outside radius + a few widths; scan densely.
                let edge = radius + 20.0 * width;
                let n = 20_000;
                let mut b = (0.0f64, 0.0f64, 0.0f64);
                for i in 0..=n {
                    let s = -edge + 2.0 * edge * i as f64 / n as f64;
                    let (h, h1, h2) = self.eval(s);
                    b = (b.0.max(h.abs()), b.1.max(h1.abs()), b.2.max(h2.abs()));
                }
                // slack for the discrete scan
                (b.0 * 1.01, b.1 * 1.01, b.2 * 1.01)
            }
        }
    }
}

fn clip(s: f64, r: f64, w: f64) -> (f64, f64, f64) {
    if s.abs() <= r {
        (s, 1.0, 0.0)
    } else {
        let sign = s.signum();
        let t = ((s.abs() - r) / w).tanh();
        let d = 1.0 - t * t;
        (sign * (r + w * t), d, -sign * 2.0 * t * d / w)
    }
}

fn poly(coeffs: &[f64], x: f64) -> (f64, f64, f64) {
    let (mut p, mut p1, mut p2) = (0.0, 0.0, 0.0);
    for c in coeffs.iter().rev() {
        p2 = p2 * x + 2.0 * p1;
        p1 = p1 * x + p;
        p = p * x + c;
    }
    (p, p1, p2)
}

pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub enum TestFunction {
    /// `amp · h(w·x + c)`
    Ridge {
        profile: Profile,
        weights: Vec<f64>,
        shift: f64,
        amp: f64,
    },
    /// `amp · exp(-|x - centre|² / (2 width²))`
    Bump {
        centre: Vec<f64>,
        width: f64,
        amp: f64,
    },
    Constant {
        dim: usize,
        value: f64,
    },
    /// User-supplied function. Missing derivatives fall back to central
    /// differences; such functions are reported as non-analytic.
    Custom {
        dim: usize,
        g: ScalarField,
        grad: Option<VectorField>,
        hess: Option<VectorField>,
        bounds: (f64, f64, f64),
    },
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ridge {
                profile,
                weights,
                shift,
                amp,
            } => f
                .debug_struct("Ridge")
                .field("profile", profile)
                .field("weights", weights)
                .field("shift", shift)
                .field("amp", amp)
                .finish(),
            Self::Bump { centre, width, amp } => f
                .debug_struct("Bump")
                .field("centre", centre)
                .field("width", width)
                .field("amp", amp)
                .finish(),
            Self::Constant { dim, value } => write!(f, "Constant({dim}, {value})"),
            Self::Custom {
                dim, grad, hess, ..
            } => write!(
                f,
                "Custom(dim={dim}, analytic_grad={}, analytic_hess={})",
                grad.is_some(),
                hess.is_some()
            ),
        }
    }
}

const FD_STEP: f64 = 1e-4;

impl TestFunction {
    /// One-dimensional `h(x)`.
    pub fn scalar(profile: Profile) -> Self {
        Self::Ridge {
            profile,
            weights: vec![1.0],
            shift: 0.0,
            amp: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Ridge { weights, .. } => weights.len(),
            Self::Bump { centre, .. } => centre.len(),
            Self::Constant { dim, .. } | Self::Custom { dim, .. } => *dim,
        }
    }

    pub fn is_analytic(&self) -> bool {
        match self {
            Self::Custom { grad, hess, .. } => grad.is_some() && hess.is_some(),
            _ => true,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Self::Constant { .. })
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Self::Ridge {
                profile,
                weights,
                shift,
                amp,
            } => amp * profile.eval(dot(weights, x) + shift).0,
            Self::Bump { centre, width, amp } => {
                let r2: f64 = x.iter().zip(centre).map(|(a, c)| (a - c).powi(2)).sum();
                amp * (-0.5 * r2 / (width * width)).exp()
            }
            Self::Constant { value, .. } => *value,
            Self::Custom { g, .. } => g(x),
        }
    }

    /// Value, gradient (`d`) and Hessian (`d × d`, row-major) at `x`.
    pub fn eval_all(&self, x: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        let d = x.len();
        match self {
            Self::Ridge {
                profile,
                weights,
                shift,
                amp,
            } => {
                let (h, h1, h2) = profile.eval(dot(weights, x) + shift);
                for i in 0..d {
                    grad[i] = amp * h1 * weights[i];
                    for j in 0..d {
                        hess[i * d + j] = amp * h2 * weights[i] * weights[j];
                    }
                }
                amp * h
            }
            Self::Bump { centre, width, amp } => {
                let w2 = width * width;
                let r2: f64 = x.iter().zip(centre).map(|(a, c)| (a - c).powi(2)).sum();
                let e = amp * (-0.5 * r2 / w2).exp();
                for i in 0..d {
                    let ui = (x[i] - centre[i]) / w2;
                    grad[i] = -e * ui;
                    for j in 0..d {
                        let uj = (x[j] - centre[j]) / w2;
                        hess[i * d + j] = e * (ui * uj - if i == j { 1.0 / w2 } else { 0.0 });
                    }
                }
                e
            }
            Self::Constant { value, .. } => {
                grad.fill(0.0);
                hess.fill(0.0);
                *value
            }
            Self::Custom {
                g,
                grad: gf,
                hess: hf,
                ..
            } => {
                match gf {
                    Some(f) => f(x, grad),
                    None => fd_gradient(&|z: &[f64]| g(z), x, grad),
                }
                match hf {
                    Some(f) => f(x, hess),
                    None => {
                        let gradient = |z: &[f64], out: &mut [f64]| match gf {
                            Some(f) => f(z, out),
                            None => fd_gradient(&|w: &[f64]| g(w), z, out),
                        };
                        fd_jacobian(&gradient, x, d, hess)
                    }
                }
                g(x)
            }
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let mut g = vec![0.0; d];
        let mut h = vec![0.0; d * d];
        self.eval_all(x, &mut g, &mut h);
        g
    }

    pub fn hessian(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let mut g = vec![0.0; d];
        let mut h = vec![0.0; d * d];
        self.eval_all(x, &mut g, &mut h);
        h
    }

    /// Declared sup-bounds of `|g|`, `|∇g|`, `|∇²g|` (Euclidean / Frobenius).
    pub fn bounds(&self) -> (f64, f64, f64) {
        match self {
            Self::Ridge {
                profile,
                weights,
                amp,
                ..
            } => {
                let (b0, b1, b2) = profile.bounds();
                let w = dot(weights, weights).sqrt();
                (amp.abs() * b0, amp.abs() * b1 * w, amp.abs() * b2 * w * w)
            }
            Self::Bump { centre, width, amp } => {
                let d = centre.len() as f64;
                let a = amp.abs();
                // |∇g| peaks at e^{-1/2}/width; |∇²g| ≤ (2/e + √d)/width²
                (
                    a,
                    a * (-0.5f64).exp() / width,
                    a * (d.sqrt() + 2.0) / (width * width),
                )
            }
            Self::Constant { value, .. } => (value.abs(), 0.0, 0.0),
            Self::Custom { bounds, .. } => *bounds,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central-difference gradient.
pub fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], out: &mut [f64]) {
    let mut z = x.to_vec();
    for i in 0..x.len() {
        let h = FD_STEP * (1.0 + x[i].abs());
        z[i] = x[i] + h;
        let up = f(&z);
        z[i] = x[i] - h;
        let dn = f(&z);
        z[i] = x[i];
        out[i] = (up - dn) / (2.0 * h);
    }
}

/// Central-difference Jacobian of a vector field with `m` outputs,
/// `m × d` row-major.
pub fn fd_jacobian(f: &dyn Fn(&[f64], &mut [f64]), x: &[f64], m: usize, out: &mut [f64]) {
    let d = x.len();
    let mut z = x.to_vec();
    let mut up = vec![0.0; m];
    let mut dn = vec![0.0; m];
    for j in 0..d {
        let h = FD_STEP * (1.0 + x[j].abs());
        z[j] = x[j] + h;
        f(&z, &mut up);
        z[j] = x[j] - h;
        f(&z, &mut dn);
        z[j] = x[j];
        for i in 0..m {
            out[i * d + j] = (up[i] - dn[i]) / (2.0 * h);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_poly_is_identity_inside() {
        let p = Profile::ClipPoly {
            coeffs: vec![0.0, 0.0, 1.0],
            radius: 3.0,
            width: 1.0,
        };
        let (h, h1, h2) = p.eval(1.5);
        assert_eq!((h, h1, h2), (2.25, 3.0, 2.0));
        // continuity of the second derivative at the radius
        let a = p.eval(3.0 - 1e-9).2;
        let b = p.eval(3.0 + 1e-9).2;
        assert!((a - b).abs() < 1e-6);
        assert!(p.eval(1e6).0 <= 16.0 + 1e-9);
    }

    #[test]
    fn bump_gradient_points_to_centre() {
        let g = TestFunction::Bump {
            centre: vec![1.0, -1.0],
            width: 0.5,
            amp: 2.0,
        };
        let gr = g.gradient(&[1.5, -1.0]);
        assert!(gr[0] < 0.0);
        assert_eq!(gr[1], 0.0);
    }

    #[test]
    fn custom_without_derivatives_uses_differences() {
        let g = TestFunction::Custom {
            dim: 1,
            g: Arc::new(|x: &[f64]| x[0].sin()),
            grad: None,
            hess: None,
            bounds: (1.0, 1.0, 1.0),
        };
        assert!(!g.is_analytic());
        assert!((g.gradient(&[0.3])[0] - 0.3f64.cos()).abs() < 1e-7);
        assert!((g.hessian(&[0.3])[0] + 0.3f64.sin()).abs() < 1e-4);
    }
}
