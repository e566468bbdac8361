use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::test_fn::{fd_gradient, fd_jacobian, ScalarField, VectorField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub coef: f64,
    pub powers: Vec<u32>,
}

/// Outer function `f(z_1..z_m, y_1..y_dy)` of a cylindrical functional.
#[derive(Clone)]
pub enum OuterFunction {
    Polynomial {
        arity: usize,
        terms: Vec<Monomial>,
    },
    Custom {
        arity: usize,
        f: ScalarField,
        grad: Option<VectorField>,
        hess: Option<VectorField>,
    },
}

impl fmt::Debug for OuterFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Polynomial { arity, terms } => f
                .debug_struct("Polynomial")
                .field("arity", arity)
                .field("terms", terms)
                .finish(),
            Self::Custom {
                arity, grad, hess, ..
            } => write!(
                f,
                "Custom(arity={arity}, analytic_grad={}, analytic_hess={})",
                grad.is_some(),
                hess.is_some()
            ),
        }
    }
}

impl OuterFunction {
    pub fn polynomial(arity: usize, terms: Vec<Monomial>) -> Self {
        Self::Polynomial { arity, terms }
    }

    /// `Σ c_i w_i`.
    pub fn linear(coefs: &[f64]) -> Self {
        let arity = coefs.len();
        Self::Polynomial {
            arity,
            terms: coefs
                .iter()
                .enumerate()
                .map(|(i, c)| Monomial {
                    coef: *c,
                    powers: (0..arity).map(|j| u32::from(i == j)).collect(),
                })
                .collect(),
        }
    }

    /// `c · w_i^k` in `arity` variables.
    pub fn power(arity: usize, i: usize, k: u32, c: f64) -> Self {
        Self::Polynomial {
            arity,
            terms: vec![Monomial {
                coef: c,
                powers: (0..arity).map(|j| if j == i { k } else { 0 }).collect(),
            }],
        }
    }

    pub fn constant(arity: usize, c: f64) -> Self {
        Self::Polynomial {
            arity,
            terms: vec![Monomial {
                coef: c,
                powers: vec![0; arity],
            }],
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Self::Polynomial { arity, .. } | Self::Custom { arity, .. } => *arity,
        }
    }

    pub fn is_analytic(&self) -> bool {
        match self {
            Self::Polynomial { .. } => true,
            Self::Custom { grad, hess, .. } => grad.is_some() && hess.is_some(),
        }
    }

    /// Every monomial has total degree at most one.
    pub fn is_affine(&self) -> bool {
        match self {
            Self::Polynomial { terms, .. } => {
                terms.iter().all(|t| t.powers.iter().sum::<u32>() <= 1)
            }
            Self::Custom { .. } => false,
        }
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        match self {
            Self::Polynomial { terms, .. } => terms
                .iter()
                .map(|t| {
                    t.coef
                        * t.powers
                            .iter()
                            .zip(w)
                            .map(|(p, x)| x.powi(*p as i32))
                            .product::<f64>()
                })
                .sum(),
            Self::Custom { f, .. } => f(w),
        }
    }

    /// Value, gradient and (exactly symmetric) Hessian at `w`.
    pub fn eval_all(&self, w: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        let a = w.len();
        match self {
            Self::Polynomial { terms, .. } => {
                grad.fill(0.0);
                hess.fill(0.0);
                let mut v = 0.0;
                for t in terms {
                    let pw = |i: usize, drop: u32| -> f64 {
                        let p = t.powers[i];
                        if p < drop {
                            0.0
                        } else {
                            w[i].powi((p - drop) as i32)
                        }
                    };
                    v += t.coef * (0..a).map(|i| pw(i, 0)).product::<f64>();
                    for i in 0..a {
                        if t.powers[i] == 0 {
                            continue;
                        }
                        let rest: f64 = (0..a).filter(|&j| j != i).map(|j| pw(j, 0)).product();
                        grad[i] += t.coef * t.powers[i] as f64 * pw(i, 1) * rest;
                        for j in i..a {
                            let h = if i == j {
                                let p = t.powers[i];
                                if p < 2 {
                                    0.0
                                } else {
                                    (p * (p - 1)) as f64 * pw(i, 2) * rest
                                }
                            } else {
                                if t.powers[j] == 0 {
                                    continue;
                                }
                                let rest2: f64 = (0..a)
                                    .filter(|&l| l != i && l != j)
                                    .map(|l| pw(l, 0))
                                    .product();
                                (t.powers[i] * t.powers[j]) as f64 * pw(i, 1) * pw(j, 1) * rest2
                            };
                            hess[i * a + j] += t.coef * h;
                        }
                    }
                }
                for i in 0..a {
                    for j in 0..i {
                        hess[i * a + j] = hess[j * a + i];
                    }
                }
                v
            }
            Self::Custom {
                f,
                grad: gf,
                hess: hf,
                ..
            } => {
                match gf {
                    Some(g) => g(w, grad),
                    None => fd_gradient(&|z: &[f64]| f(z), w, grad),
                }
                match hf {
                    Some(h) => h(w, hess),
                    None => {
                        let gradient = |z: &[f64], out: &mut [f64]| match gf {
                            Some(g) => g(z, out),
                            None => fd_gradient(&|x: &[f64]| f(x), z, out),
                        };
                        fd_jacobian(&gradient, w, a, hess)
                    }
                }
                for i in 0..a {
                    for j in 0..i {
                        let s = 0.5 * (hess[i * a + j] + hess[j * a + i]);
                        hess[i * a + j] = s;
                        hess[j * a + i] = s;
                    }
                }
                f(w)
            }
        }
    }
}

impl From<(usize, Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>)> for OuterFunction {
    fn from((arity, f): (usize, Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>)) -> Self {
        Self::Custom {
            arity,
            f,
            grad: None,
            hess: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_derivatives() {
        // f = 3 z^2 y + z
        let f = OuterFunction::polynomial(
            2,
            vec![
                Monomial {
                    coef: 3.0,
                    powers: vec![2, 1],
                },
                Monomial {
                    coef: 1.0,
                    powers: vec![1, 0],
                },
            ],
        );
        let mut g = [0.0; 2];
        let mut h = [0.0; 4];
        let v = f.eval_all(&[2.0, 5.0], &mut g, &mut h);
        assert_eq!(v, 62.0);
        assert_eq!(g, [61.0, 12.0]);
        assert_eq!(h, [30.0, 12.0, 12.0, 0.0]);
    }

    #[test]
    fn affine_detection() {
        assert!(OuterFunction::linear(&[1.0, 2.0]).is_affine());
        assert!(!OuterFunction::power(1, 0, 2, 1.0).is_affine());
    }
}
