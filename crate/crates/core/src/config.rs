use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregators::{Aggregator, Felicity, PiecewiseConstant};
use crate::engine::{Scheme, SolverConfig};
use crate::error::{invalid, Error, Result};
use crate::neutrality::{PairKind, Problem, TerminalSpec, Tolerances};
use crate::paths::ConsumptionPlan;
use crate::pde::tanh_aggregator;

/// Aggregator block. `beta` is a list of `(t, value)` breakpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregatorSpec {
    ExpectedUtility {
        felicity: Felicity,
        #[serde(default)]
        beta: Vec<(f64, f64)>,
    },
    LinearZ {
        felicity: Felicity,
        #[serde(default)]
        beta: Vec<(f64, f64)>,
        gamma: f64,
    },
    ChenEpstein {
        felicity: Felicity,
        #[serde(default)]
        beta: Vec<(f64, f64)>,
        k: Vec<f64>,
    },
    Quadratic {
        felicity: Felicity,
        #[serde(default)]
        beta: f64,
        alpha: f64,
    },
    /// `tanh(log c) - β y - γ tanh(z)`.
    Tanh { beta: f64, gamma: f64 },
}

fn discount(beta: &[(f64, f64)]) -> Result<PiecewiseConstant> {
    if beta.is_empty() {
        Ok(PiecewiseConstant::zero())
    } else {
        PiecewiseConstant::new(beta.to_vec())
    }
}

impl AggregatorSpec {
    pub fn build(&self) -> Result<Aggregator> {
        let agg = match self {
            AggregatorSpec::ExpectedUtility { felicity, beta } => {
                Aggregator::expected_utility(*felicity, discount(beta)?)
            }
            AggregatorSpec::LinearZ { felicity, beta, gamma } => {
                Aggregator::linear_z(*felicity, discount(beta)?, *gamma)
            }
            AggregatorSpec::ChenEpstein { felicity, beta, k } => {
                Aggregator::chen_epstein(*felicity, discount(beta)?, k.clone())
            }
            AggregatorSpec::Quadratic { felicity, beta, alpha } => Aggregator::quadratic(*felicity, *beta, *alpha),
            AggregatorSpec::Tanh { beta, gamma } => tanh_aggregator(*beta, *gamma),
        };
        agg.validate()?;
        Ok(agg)
    }

    /// Parses the short command-line form `name[:p1[,p2]]`, e.g. `linear-z:1`,
    /// `chen-epstein:0.5`, `quadratic:1`, `tanh:0.2,0.2`. Log felicity.
    pub fn parse_short(s: &str) -> Result<Self> {
        let (name, args) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let nums: Vec<f64> = match args {
            None => Vec::new(),
            Some(a) => a
                .split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| invalid(format!("bad number {x:?} in {s:?}"))))
                .collect::<Result<_>>()?,
        };
        let one = |d: f64| -> Result<f64> {
            match nums.len() {
                0 => Ok(d),
                1 => Ok(nums[0]),
                _ => Err(invalid(format!("{name} takes one parameter"))),
            }
        };
        let felicity = Felicity::Log;
        Ok(match name {
            "expected-utility" | "eu" => {
                if !nums.is_empty() {
                    return Err(invalid("expected-utility takes no parameter"));
                }
                AggregatorSpec::ExpectedUtility { felicity, beta: Vec::new() }
            }
            "linear-z" => AggregatorSpec::LinearZ { felicity, beta: Vec::new(), gamma: one(1.0)? },
            "chen-epstein" => AggregatorSpec::ChenEpstein {
                felicity,
                beta: Vec::new(),
                k: if nums.is_empty() { vec![1.0] } else { nums.clone() },
            },
            "quadratic" => AggregatorSpec::Quadratic { felicity, beta: 0.0, alpha: one(1.0)? },
            "tanh" => match nums.as_slice() {
                [] => AggregatorSpec::Tanh { beta: 0.2, gamma: 0.2 },
                [b, g] => AggregatorSpec::Tanh { beta: *b, gamma: *g },
                _ => return Err(invalid("tanh takes two parameters beta,gamma")),
            },
            other => {
                return Err(invalid(format!(
                    "unknown aggregator {other:?}; expected expected-utility, linear-z, chen-epstein, quadratic or tanh"
                )))
            }
        })
    }
}

/// Short plan names: `b`, `b-prime`, `exp:<slope>`.
pub fn parse_plan(s: &str) -> Result<ConsumptionPlan> {
    match s {
        "b" => Ok(ConsumptionPlan::b()),
        "b-prime" | "b'" => Ok(ConsumptionPlan::b_prime()),
        _ => match s.strip_prefix("exp:").map(str::parse::<f64>) {
            Some(Ok(slope)) => Ok(ConsumptionPlan::Exponential { slope }),
            _ => Err(invalid(format!("unknown plan {s:?}; expected b, b-prime or exp:<slope>"))),
        },
    }
}

fn one_f64() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairBlock {
    pub kind: PairKind,
    /// Extra pairs for the equivalence table in `battery`.
    #[serde(default)]
    pub compare: Vec<PairKind>,
}

fn default_degree() -> usize {
    3
}

fn default_ridge() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    pub paths: usize,
    pub steps: usize,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
}

fn default_scheme() -> Scheme {
    Scheme::Explicit
}

impl SolverBlock {
    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            degree: self.degree,
            ridge_factor: self.ridge,
            scheme: self.scheme,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleToggles {
    pub closed_form: bool,
    pub pde: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdeBlock {
    pub nx: usize,
    pub nt: usize,
    pub x0: f64,
    /// Domain is `x0 ± half_width·√T`.
    pub half_width: f64,
    /// Grid levels in the refinement study (each doubles nt and halves dx).
    pub levels: usize,
    pub snapshot_every: usize,
    /// Paths used to reconstruct `(N, ζ)` for the bound check.
    pub paths: usize,
    pub slack: f64,
    /// The bound check keeps `t ≤ T - t_cut`.
    pub t_cut: f64,
}

impl Default for PdeBlock {
    fn default() -> Self {
        Self {
            nx: 241,
            nt: 100,
            x0: 0.0,
            half_width: 6.0,
            levels: 3,
            snapshot_every: 10,
            paths: 10_000,
            slack: 0.05,
            t_cut: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClosedFormBlock {
    /// Evaluation times, evenly spaced on `[0, T]`.
    pub points: usize,
}

impl Default for ClosedFormBlock {
    fn default() -> Self {
        Self { points: 11 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    pub dir: PathBuf,
    /// Keep the base ensemble in `paths.bin` and reuse it when it matches.
    pub cache_paths: bool,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            cache_paths: false,
        }
    }
}

/// One experiment, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default = "one_f64")]
    pub horizon: f64,
    #[serde(default = "one_usize")]
    pub dims: usize,
    pub aggregator: AggregatorSpec,
    #[serde(default)]
    pub plan: Option<ConsumptionPlan>,
    #[serde(default)]
    pub terminal: Option<TerminalSpec>,
    pub pair: PairBlock,
    pub solver: SolverBlock,
    #[serde(default)]
    pub oracles: OracleToggles,
    #[serde(default)]
    pub pde: PdeBlock,
    #[serde(default)]
    pub closed_form: ClosedFormBlock,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub output: OutputBlock,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Semantic checks that the schema cannot express.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Error::Format(format!("field `{name}`: {msg}"));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(field("horizon", "must be positive"));
        }
        if self.dims == 0 {
            return Err(field("dims", "must be at least 1"));
        }
        if self.solver.paths < 2 {
            return Err(field("solver.paths", "must be at least 2"));
        }
        if self.solver.steps == 0 {
            return Err(field("solver.steps", "must be at least 1"));
        }
        if self.plan.is_some() && self.terminal.is_some() {
            return Err(field("plan", "give either a plan or a terminal claim, not both"));
        }
        if self.pde.levels < 3 && self.oracles.pde {
            return Err(field("pde.levels", "a refinement study needs at least 3 levels"));
        }
        if !(self.pde.half_width > 0.0) {
            return Err(field("pde.half_width", "must be positive"));
        }
        if self.closed_form.points < 1 {
            return Err(field("closed_form.points", "must be at least 1"));
        }
        self.tolerances
            .validate()
            .map_err(|e| field("tolerances", &e.to_string()))?;
        self.solver
            .solver()
            .validate()
            .map_err(|e| field("solver", &e.to_string()))?;
        self.aggregator
            .build()
            .map_err(|e| field("aggregator", &e.to_string()))?;
        Ok(())
    }

    /// Plan or terminal claim; plan `b` when neither is given.
    pub fn problem(&self) -> Problem {
        match (&self.plan, &self.terminal) {
            (_, Some(claim)) => Problem::Terminal { claim: *claim },
            (Some(plan), None) => Problem::Plan { plan: plan.clone() },
            (None, None) => Problem::Plan {
                plan: ConsumptionPlan::b(),
            },
        }
    }

    /// Plan slope used by the closed forms and the PDE.
    pub fn slope(&self) -> Result<f64> {
        match self.problem() {
            Problem::Plan {
                plan: ConsumptionPlan::Exponential { slope },
            } => Ok(slope),
            _ => Err(invalid("closed forms and the PDE need an exponential plan")),
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
