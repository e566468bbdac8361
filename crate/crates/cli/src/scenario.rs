//! Scenario files: a TOML document naming catalog entries for the model,
//! functional, rewards and experiment settings. See `scenarios/` for
//! examples and the README for the schema.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use condflow::control::{ControlProblem, RunningReward, TerminalReward, ValueCandidate};
use condflow::cylindrical::{
    CylindricalFunctional, Monomial, OuterFunction, Profile, TestFunction,
};
use condflow::flow::StateFn;
use condflow::ito::{CrossBracket, PilotConfig, PoolMode};
use condflow::model::{Coefficient, InitialLaw, JumpCoefficient, JumpDiffusionModel};
use condflow::noise::{LevySpec, MarkDistribution};
use condflow::{Error, Result};

fn one() -> f64 {
    1.0
}

fn two() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_model: Option<ModelSpec>,
    pub grid: GridSpec,
    pub particles: ParticleSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functional: Option<FunctionalSpec>,
    #[serde(default)]
    pub experiment: ExperimentSpec,
    pub seeds: SeedSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub dim: usize,
    pub idio_dim: usize,
    pub common_dim: usize,
    #[serde(default)]
    pub drift: CoefSpec,
    #[serde(default)]
    pub sigma_v: CoefSpec,
    #[serde(default)]
    pub sigma_w: CoefSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialLaw>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idio_jumps: Option<JumpSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub common_jumps: Option<JumpSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compensator_budget: Option<usize>,
}

/// Coefficient catalog; matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefSpec {
    #[default]
    Zero,
    Constant {
        values: Vec<f64>,
    },
    /// `offset + Σ_j x_j slopes[j] + a · action`
    Affine {
        offset: Vec<f64>,
        #[serde(default)]
        slopes: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        action: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpSpec {
    pub intensity: f64,
    pub marks: MarkDistribution,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moment_bound: Option<f64>,
    pub beta: BetaSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BetaSpec {
    /// `β = B θ + offset`
    Additive {
        matrix: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        offset: Option<Vec<f64>>,
    },
    /// `βᵢ = xᵢ (B θ)ᵢ`
    Proportional { matrix: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub horizon: f64,
    pub steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleSpec {
    pub m: Vec<usize>,
    #[serde(default = "two")]
    pub n_copies: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalSpec {
    pub outer: OuterSpec,
    pub tests: Vec<TestSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OuterSpec {
    Linear {
        coefs: Vec<f64>,
    },
    /// `coef · w_index^power`
    Power {
        index: usize,
        power: u32,
        #[serde(default = "one")]
        coef: f64,
    },
    Polynomial {
        terms: Vec<Monomial>,
    },
    Constant {
        value: f64,
    },
}

/// Test-function catalog. Ridge profiles act on `weights · x + shift`
/// (weights default to the first coordinate) and are scaled by `amp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestSpec {
    Tanh {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
        #[serde(default)]
        shift: f64,
        #[serde(default = "one")]
        amp: f64,
    },
    Sin {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
        #[serde(default)]
        shift: f64,
        #[serde(default = "one")]
        amp: f64,
    },
    Cos {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
        #[serde(default)]
        shift: f64,
        #[serde(default = "one")]
        amp: f64,
    },
    Gaussian {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
        #[serde(default)]
        shift: f64,
        #[serde(default = "one")]
        amp: f64,
    },
    /// Polynomial (ascending `coeffs`) of the coordinate, bent flat beyond `radius`.
    ClipPoly {
        coeffs: Vec<f64>,
        radius: f64,
        #[serde(default = "one")]
        width: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
        #[serde(default)]
        shift: f64,
        #[serde(default = "one")]
        amp: f64,
    },
    Bump {
        centre: Vec<f64>,
        width: f64,
        #[serde(default = "one")]
        amp: f64,
    },
    Constant {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    Zero,
    Constant {
        value: f64,
    },
    /// A catalog test function of the state.
    Test {
        test: TestSpec,
    },
    /// `coef · |x|²`
    SquaredNorm {
        coef: f64,
    },
    /// `coef · a²` (running reward only)
    ActionSquare {
        coef: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ValueSpec {
    Constant {
        value: f64,
    },
    /// `⟨μ, test⟩ + rate (T − t)`
    AffineInTime {
        test: TestSpec,
        rate: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ito: Option<ItoSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub copies: Option<CopiesSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condprocess: Option<CondProcessSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotSpec {
    pub ks: Vec<usize>,
    pub ms: Vec<usize>,
    pub seeds: usize,
}

impl Default for PilotSpec {
    fn default() -> Self {
        let p = PilotConfig::default();
        Self {
            ks: p.ks,
            ms: p.ms,
            seeds: p.seeds,
        }
    }
}

impl PilotSpec {
    pub fn config(&self, master: u64) -> PilotConfig {
        PilotConfig {
            ks: self.ks.clone(),
            ms: self.ms.clone(),
            seeds: self.seeds,
            master_seed: master,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ItoSpec {
    #[serde(default)]
    pub pool: PoolMode,
    #[serde(default)]
    pub cross: CrossBracket,
    #[serde(default)]
    pub self_pairs: bool,
    #[serde(default)]
    pub pilot: PilotSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSpec {
    #[serde(default)]
    pub pool: PoolMode,
    #[serde(default)]
    pub cross: CrossBracket,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_dt_band: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_m_band: Option<[f64; 2]>,
}

fn default_ks_alpha() -> f64 {
    0.01
}
fn default_band() -> f64 {
    0.99
}
fn default_t() -> f64 {
    4.0
}
fn default_replicates() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CopiesSpec {
    #[serde(default = "default_ks_alpha")]
    pub ks_alpha: f64,
    #[serde(default = "default_band")]
    pub band_level: f64,
    #[serde(default = "default_t")]
    pub t_threshold: f64,
    /// Replicate ensembles per common seed.
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Coordinate whose terminal value is tested.
    #[serde(default)]
    pub coordinate: usize,
    #[serde(default = "default_min_common")]
    pub min_common: usize,
}

fn default_min_common() -> usize {
    100
}

impl Default for CopiesSpec {
    fn default() -> Self {
        Self {
            ks_alpha: default_ks_alpha(),
            band_level: default_band(),
            t_threshold: default_t(),
            replicates: default_replicates(),
            coordinate: 0,
            min_common: default_min_common(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum IntegrandSpec {
    Constant { value: f64 },
    Coordinate { index: usize },
}

impl IntegrandSpec {
    pub fn build(&self) -> StateFn {
        match *self {
            Self::Constant { value } => Arc::new(move |_| value),
            Self::Coordinate { index } => Arc::new(move |x| x[index]),
        }
    }
}

/// Closed-form `E[∫Z dX | G]` as a function of the common noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSpec {
    /// `Σ_k t_k ΔW⁰_k` on common coordinate `index`.
    TimeWeightedCommon {
        #[serde(default)]
        index: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BracketSpec {
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondProcessSpec {
    pub integrand: IntegrandSpec,
    #[serde(default)]
    pub coordinate: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bracket: Option<BracketSpec>,
    #[serde(default = "default_t")]
    pub t_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSpec>,
    /// Minimum `|t|` of the naive estimator's slope against 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub naive_t_min: Option<f64>,
    /// Maximum relative residual of the copy estimator against the oracle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_rel_max: Option<f64>,
}

fn default_mark_budget() -> usize {
    condflow::control::DEFAULT_MARK_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    pub actions: Vec<f64>,
    pub running: RewardSpec,
    pub terminal: RewardSpec,
    pub growth: f64,
    pub value: ValueSpec,
    #[serde(default)]
    pub switch_nodes: Vec<usize>,
    #[serde(default = "default_mark_budget")]
    pub mark_budget: usize,
    #[serde(default)]
    pub pilot: PilotSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSpec {
    pub master: u64,
    #[serde(default = "default_n_common")]
    pub n_common: usize,
    #[serde(default = "one_usize")]
    pub n_repeats: usize,
}

fn default_n_common() -> usize {
    100
}
fn one_usize() -> usize {
    1
}

/// Section header in force at byte `offset` of a TOML document.
fn section_at(text: &str, offset: usize) -> String {
    text[..offset.min(text.len())]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').to_string())
        .unwrap_or_else(|| "root".into())
}

pub fn parse_scenario_str(text: &str) -> Result<Scenario> {
    let s: Scenario = toml::from_str(text).map_err(|e| {
        let section = e
            .span()
            .map_or_else(|| "root".to_string(), |sp| section_at(text, sp.start));
        let line = e
            .span()
            .map(|sp| text[..sp.start.min(text.len())].lines().count().max(1));
        let msg = match line {
            Some(l) => format!("line {l}: {}", e.message()),
            None => e.message().to_string(),
        };
        Error::scenario(section, msg)
    })?;
    s.validate()?;
    Ok(s)
}

pub fn parse_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_scenario_str(&text)
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.grid.steps.is_empty() || self.grid.steps.contains(&0) {
            return Err(Error::scenario(
                "grid",
                "steps must be a nonempty list of positive integers",
            ));
        }
        if !(self.grid.horizon > 0.0 && self.grid.horizon.is_finite()) {
            return Err(Error::scenario("grid", "horizon must be positive"));
        }
        if self.particles.m.is_empty() || self.particles.m.contains(&0) {
            return Err(Error::scenario(
                "particles",
                "m must be a nonempty list of positive integers",
            ));
        }
        self.model
            .build()
            .map_err(|e| Error::scenario("model", e.to_string()))?;
        if let Some(y) = &self.y_model {
            y.build()
                .map_err(|e| Error::scenario("y_model", e.to_string()))?;
        }
        if self.functional.is_some() {
            self.functional()?;
        }
        if let Some(c) = &self.experiment.control {
            self.control_problem(c)?;
            c.value.build(self.model.dim, self.grid.horizon)?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::scenario("root", e.to_string()))
    }

    /// SHA-256 of the canonical JSON rendering (object keys sorted).
    pub fn hash(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        let canon = serde_json::to_string(&value)?;
        let digest = Sha256::digest(canon.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn functional(&self) -> Result<CylindricalFunctional> {
        let f = self.functional.as_ref().ok_or_else(|| {
            Error::scenario("functional", "this experiment needs a [functional] section")
        })?;
        let n = self.model.dim;
        let dy = self.y_model.as_ref().map_or(0, |y| y.dim);
        let tests = f
            .tests
            .iter()
            .map(|t| t.build(n))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::scenario("functional", e.to_string()))?;
        let arity = tests.len() + dy;
        let outer = f
            .outer
            .build(arity)
            .map_err(|e| Error::scenario("functional", e.to_string()))?;
        CylindricalFunctional::new(outer, tests, n, dy)
            .map_err(|e| Error::scenario("functional", e.to_string()))
    }

    pub fn control_problem(&self, c: &ControlSpec) -> Result<ControlProblem> {
        let n = self.model.dim;
        let running = c
            .running
            .running(n)
            .map_err(|e| Error::scenario("experiment.control", e.to_string()))?;
        let terminal = c
            .terminal
            .terminal(n)
            .map_err(|e| Error::scenario("experiment.control", e.to_string()))?;
        ControlProblem::new(
            self.model.build()?,
            c.actions.clone(),
            running,
            terminal,
            c.growth,
            self.grid.horizon,
        )
        .map_err(|e| Error::scenario("experiment.control", e.to_string()))
    }

    pub fn master_seed(&self) -> u64 {
        self.seeds.master
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<JumpDiffusionModel> {
        let n = self.dim;
        if n == 0 {
            return Err(Error::invalid("dim must be positive"));
        }
        let mut m = JumpDiffusionModel::new(n, self.idio_dim, self.common_dim)
            .with_drift(self.drift.build(n, 1)?)
            .with_sigma_v(self.sigma_v.build(n, self.idio_dim)?)
            .with_sigma_w(self.sigma_w.build(n, self.common_dim)?);
        if let Some(init) = &self.initial {
            m = m.with_initial(init.clone());
        }
        if let Some(j) = &self.idio_jumps {
            let (levy, beta) = j.build(n)?;
            m = m.with_idio_jumps(levy, beta);
        }
        if let Some(j) = &self.common_jumps {
            let (levy, beta) = j.build(n)?;
            m = m.with_common_jumps(levy, beta);
        }
        if let Some(c) = self.lipschitz {
            m = m.with_lipschitz(c);
        }
        if let Some(b) = self.compensator_budget {
            m = m.with_compensator(b, 0);
        }
        m.validate()?;
        Ok(m)
    }
}

impl CoefSpec {
    pub fn build(&self, rows: usize, cols: usize) -> Result<Coefficient> {
        match self {
            Self::Zero => Ok(Coefficient::zero(rows, cols)),
            Self::Constant { values } => Coefficient::constant(rows, cols, values.clone()),
            Self::Affine {
                offset,
                slopes,
                action,
            } => Coefficient::affine(
                rows,
                cols,
                offset.clone(),
                slopes.clone(),
                action.clone().unwrap_or_else(|| vec![0.0; rows * cols]),
            ),
        }
    }
}

impl JumpSpec {
    pub fn build(&self, n: usize) -> Result<(LevySpec, JumpCoefficient)> {
        let mut levy = LevySpec::new(self.intensity, self.marks.clone())?;
        if let Some(p) = self.moment_bound {
            levy.moment_bound = p;
        }
        let q = self.marks.dim();
        let beta = match &self.beta {
            BetaSpec::Additive { matrix, offset } => JumpCoefficient::additive(
                n,
                q,
                matrix.clone(),
                offset.clone().unwrap_or_else(|| vec![0.0; n]),
            )?,
            BetaSpec::Proportional { matrix } => {
                JumpCoefficient::proportional(n, q, matrix.clone())?
            }
        };
        Ok((levy, beta))
    }
}

impl OuterSpec {
    pub fn build(&self, arity: usize) -> Result<OuterFunction> {
        Ok(match self {
            Self::Linear { coefs } => {
                if coefs.len() != arity {
                    return Err(Error::invalid(format!(
                        "linear outer needs {arity} coefficients"
                    )));
                }
                OuterFunction::linear(coefs)
            }
            Self::Power { index, power, coef } => {
                if *index >= arity {
                    return Err(Error::invalid("power index out of range"));
                }
                OuterFunction::power(arity, *index, *power, *coef)
            }
            Self::Polynomial { terms } => {
                if terms.iter().any(|t| t.powers.len() != arity) {
                    return Err(Error::invalid(format!(
                        "every monomial needs {arity} powers"
                    )));
                }
                OuterFunction::polynomial(arity, terms.clone())
            }
            Self::Constant { value } => OuterFunction::constant(arity, *value),
        })
    }
}

impl TestSpec {
    pub fn build(&self, n: usize) -> Result<TestFunction> {
        let ridge = |profile: Profile,
                     weights: &Option<Vec<f64>>,
                     shift: f64,
                     amp: f64|
         -> Result<TestFunction> {
            let w = weights.clone().unwrap_or_else(|| {
                let mut e = vec![0.0; n];
                e[0] = 1.0;
                e
            });
            if w.len() != n {
                return Err(Error::invalid(format!("ridge weights need length {n}")));
            }
            Ok(TestFunction::Ridge {
                profile,
                weights: w,
                shift,
                amp,
            })
        };
        match self {
            Self::Tanh {
                weights,
                shift,
                amp,
            } => ridge(Profile::Tanh, weights, *shift, *amp),
            Self::Sin {
                weights,
                shift,
                amp,
            } => ridge(Profile::Sin, weights, *shift, *amp),
            Self::Cos {
                weights,
                shift,
                amp,
            } => ridge(Profile::Cos, weights, *shift, *amp),
            Self::Gaussian {
                weights,
                shift,
                amp,
            } => ridge(Profile::Gaussian, weights, *shift, *amp),
            Self::ClipPoly {
                coeffs,
                radius,
                width,
                weights,
                shift,
                amp,
            } => {
                if !(*radius >= 0.0 && *width > 0.0) {
                    return Err(Error::invalid("clip_poly needs radius ≥ 0 and width > 0"));
                }
                let profile = Profile::ClipPoly {
                    coeffs: coeffs.clone(),
                    radius: *radius,
                    width: *width,
                };
                ridge(profile, weights, *shift, *amp)
            }
            Self::Bump { centre, width, amp } => {
                if centre.len() != n || !(*width > 0.0) {
                    return Err(Error::invalid(
                        "bump needs a centre in the state space and a positive width",
                    ));
                }
                Ok(TestFunction::Bump {
                    centre: centre.clone(),
                    width: *width,
                    amp: *amp,
                })
            }
            Self::Constant { value } => Ok(TestFunction::Constant {
                dim: n,
                value: *value,
            }),
        }
    }
}

impl RewardSpec {
    pub fn running(&self, n: usize) -> Result<RunningReward> {
        Ok(match self {
            Self::Zero => Arc::new(|_, _| 0.0),
            Self::Constant { value } => {
                let v = *value;
                Arc::new(move |_, _| v)
            }
            Self::Test { test } => {
                let g = test.build(n)?;
                Arc::new(move |x, _| g.value(x))
            }
            Self::SquaredNorm { coef } => {
                let c = *coef;
                Arc::new(move |x, _| c * x.iter().map(|v| v * v).sum::<f64>())
            }
            Self::ActionSquare { coef } => {
                let c = *coef;
                Arc::new(move |_, a| c * a * a)
            }
        })
    }

    pub fn terminal(&self, n: usize) -> Result<TerminalReward> {
        if let Self::ActionSquare { .. } = self {
            return Err(Error::invalid(
                "terminal reward cannot depend on the action",
            ));
        }
        let f = self.running(n)?;
        Ok(Arc::new(move |x| f(x, 0.0)))
    }
}

impl ValueSpec {
    pub fn build(&self, n: usize, horizon: f64) -> Result<ValueCandidate> {
        Ok(match self {
            Self::Constant { value } => ValueCandidate::constant(n, *value),
            Self::AffineInTime { test, rate } => {
                ValueCandidate::affine_in_time(test.build(n)?, *rate, horizon)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "minimal"

[model]
dim = 1
idio_dim = 1
common_dim = 1
sigma_v = { kind = "constant", values = [1.0] }

[grid]
horizon = 1.0
steps = [50, 100, 200]

[particles]
m = [100]

[seeds]
master = 7
"#;

    #[test]
    fn minimal_file_gets_defaults() {
        let s = parse_scenario_str(MINIMAL).unwrap();
        assert_eq!(s.particles.n_copies, 2);
        assert_eq!(s.seeds.n_common, 100);
        assert_eq!(s.model.drift, CoefSpec::Zero);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = MINIMAL.replace("sigma_v =", "sigma_typo =");
        let err = parse_scenario_str(&text).unwrap_err().to_string();
        assert!(err.contains("sigma_typo"), "{err}");
        assert!(err.contains("[model]"), "{err}");
    }

    #[test]
    fn round_trip_is_identity() {
        let s = parse_scenario_str(MINIMAL).unwrap();
        let back = parse_scenario_str(&s.to_toml().unwrap()).unwrap();
        assert_eq!(s, back);
        assert_eq!(back.grid.steps, vec![50, 100, 200]);
    }

    #[test]
    fn hash_ignores_key_order() {
        let reordered = MINIMAL.replace(
            "idio_dim = 1\ncommon_dim = 1",
            "common_dim = 1\nidio_dim = 1",
        );
        assert_ne!(reordered, MINIMAL);
        let a = parse_scenario_str(MINIMAL).unwrap().hash().unwrap();
        let b = parse_scenario_str(&reordered).unwrap().hash().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_master_seed_is_rejected() {
        let text = MINIMAL.replace("master = 7", "n_common = 3");
        assert!(parse_scenario_str(&text).is_err());
    }

    #[test]
    fn empty_step_list_is_rejected() {
        let text = MINIMAL.replace("[50, 100, 200]", "[]");
        let err = parse_scenario_str(&text).unwrap_err();
        assert!(matches!(err, Error::Scenario { ref section, .. } if section == "grid"));
    }

    #[test]
    fn unresolvable_catalog_name_is_rejected() {
        let text = MINIMAL.replace("kind = \"constant\"", "kind = \"cubic\"");
        let err = parse_scenario_str(&text).unwrap_err().to_string();
        assert!(err.contains("cubic"), "{err}");
    }
}
