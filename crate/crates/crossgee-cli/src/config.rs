//! JSON run configuration: schema validation happens up front through serde
//! (unknown keys are rejected), then the pieces are converted into library
//! types. All index sets in config files are 1-based.

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crossgee::crossfit::{CrossFitConfig, KernelConfig, LambdaRule};
use crossgee::inference::HypothesisSpec;
use crossgee::model::{IndexSet, LinkFunction};
use crossgee::penalty::{PenaltyConfig, PenaltyKind};
use crossgee::screening::{AlphaMode, BasisFamily, ScreeningConfig};
use crossgee::sim::{CovFamily, ExperimentName, ScenarioConfig};
use crossgee::solver::{ModelSpec, SolverConfig};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type CResult<T> = Result<T, ConfigError>;

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// Convert a 1-based index list from a config file into a 0-based set.
fn index_set_from_one_based(indices: &[usize], what: &str) -> CResult<IndexSet> {
    let mut zero = Vec::with_capacity(indices.len());
    for &j in indices {
        if j == 0 {
            return Err(bad(format!("{what}: indices are 1-based, found 0")));
        }
        zero.push(j - 1);
    }
    Ok(IndexSet::new(zero))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaRuleConfig {
    pub rule: String,
    #[serde(default)]
    pub value: Option<f64>,
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default)]
    pub grid_size: Option<usize>,
    #[serde(default)]
    pub min_ratio: Option<f64>,
}

impl LambdaRuleConfig {
    pub fn to_rule(&self) -> CResult<LambdaRule<f64>> {
        match self.rule.as_str() {
            "fixed" => {
                let v = self
                    .value
                    .ok_or_else(|| bad("lambda rule 'fixed' needs a 'value'"))?;
                if v < 0.0 {
                    return Err(bad("lambda value must be >= 0"));
                }
                Ok(LambdaRule::Fixed(v))
            }
            "rate_scaled" => Ok(LambdaRule::RateScaled {
                c: self.c.unwrap_or(1.0),
            }),
            "hbic" => Ok(LambdaRule::Hbic {
                grid_size: self.grid_size.unwrap_or(12),
                min_ratio: self.min_ratio.unwrap_or(1e-2),
            }),
            other => Err(bad(format!("unknown lambda rule '{other}'"))),
        }
    }
}

fn default_lambda_rule() -> LambdaRuleConfig {
    LambdaRuleConfig {
        rule: "hbic".into(),
        value: None,
        c: None,
        grid_size: None,
        min_ratio: None,
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySection {
    #[serde(default = "default_penalty_kind")]
    pub kind: String,
    #[serde(default)]
    pub a: Option<f64>,
}

fn default_penalty_kind() -> String {
    "scad".into()
}

impl Default for PenaltySection {
    fn default() -> Self {
        PenaltySection {
            kind: default_penalty_kind(),
            a: None,
        }
    }
}

impl PenaltySection {
    pub fn to_config(&self) -> CResult<PenaltyConfig<f64>> {
        let (kind, default_a) = match self.kind.as_str() {
            "scad" => (PenaltyKind::Scad, 3.7),
            "mcp" => (PenaltyKind::Mcp, 3.0),
            other => return Err(bad(format!("unknown penalty kind '{other}'"))),
        };
        PenaltyConfig::new(kind, 0.0, self.a.unwrap_or(default_a))
            .map_err(|e| bad(e.to_string()))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub link: String,
    #[serde(default)]
    pub penalty: PenaltySection,
    #[serde(default)]
    pub m_set: Vec<usize>,
    #[serde(default = "default_lambda_rule")]
    pub lambda: LambdaRuleConfig,
}

pub fn link_from_name(name: &str) -> CResult<LinkFunction<f64>> {
    match name {
        "identity" => Ok(LinkFunction::Identity),
        "log" => Ok(LinkFunction::Log),
        "logit" => Ok(LinkFunction::Logit),
        other => Err(bad(format!("unknown link '{other}'"))),
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub max_iter: Option<usize>,
    #[serde(default)]
    pub zero_threshold: Option<f64>,
    #[serde(default)]
    pub max_step: Option<f64>,
}

impl SolverSection {
    pub fn to_config(&self) -> SolverConfig<f64> {
        let mut cfg = SolverConfig::default();
        if let Some(v) = self.tol {
            cfg.tol = v;
        }
        if let Some(v) = self.max_iter {
            cfg.max_iter = v;
        }
        if let Some(v) = self.zero_threshold {
            cfg.zero_threshold = v;
        }
        if let Some(v) = self.max_step {
            cfg.max_step = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ScreeningSection {
    #[serde(default)]
    pub basis_count: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
    /// When set, use the dimension power law `alpha_p = p^-c` instead of
    /// the fixed alpha.
    #[serde(default)]
    pub alpha_power_law_c: Option<f64>,
    #[serde(default)]
    pub lambda_grid: Option<usize>,
    #[serde(default)]
    pub lambda_min_ratio: Option<f64>,
}

impl ScreeningSection {
    pub fn to_config(&self) -> CResult<ScreeningConfig<f64>> {
        let mut cfg = ScreeningConfig::default();
        if let Some(h) = self.basis_count {
            cfg.basis = BasisFamily::polynomial(h).map_err(|e| bad(e.to_string()))?;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(c) = self.alpha_power_law_c {
            cfg.alpha_mode = AlphaMode::PowerLaw { c };
        }
        if let Some(g) = self.lambda_grid {
            cfg.lambda_grid = g;
        }
        if let Some(r) = self.lambda_min_ratio {
            cfg.lambda_min_ratio = r;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    #[serde(default)]
    pub nu: Option<f64>,
    #[serde(default)]
    pub c_h: Option<f64>,
    #[serde(default)]
    pub jitter_rel: Option<f64>,
}

impl KernelSection {
    pub fn to_config(&self) -> KernelConfig<f64> {
        let mut cfg = KernelConfig::default();
        if let Some(v) = self.nu {
            cfg.nu = v;
        }
        if let Some(v) = self.c_h {
            cfg.c_h = v;
        }
        if let Some(v) = self.jitter_rel {
            cfg.jitter_rel = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesisSection {
    pub c: Vec<Vec<f64>>,
    pub t: Vec<f64>,
    #[serde(default)]
    pub drift: Option<Vec<f64>>,
    #[serde(default)]
    pub level: Option<f64>,
}

impl HypothesisSection {
    pub fn to_spec(&self) -> CResult<HypothesisSpec<f64>> {
        let r = self.c.len();
        if r == 0 {
            return Err(bad("hypothesis matrix needs at least one row"));
        }
        let m = self.c[0].len();
        if self.c.iter().any(|row| row.len() != m) {
            return Err(bad("hypothesis matrix rows have unequal lengths"));
        }
        let c = DMatrix::from_fn(r, m, |i, j| self.c[i][j]);
        let t = DVector::from_vec(self.t.clone());
        HypothesisSpec::new(c, t).map_err(|e| bad(e.to_string()))
    }
}

/// Full run configuration for fit / screen / crossfit / test.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub screening: ScreeningSection,
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default)]
    pub hypothesis: Option<HypothesisSection>,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn parse(text: &str) -> CResult<Self> {
        serde_json::from_str(text).map_err(|e| bad(format!("config: {e}")))
    }

    pub fn model_spec(&self, p: usize) -> CResult<ModelSpec<f64>> {
        let link = link_from_name(&self.model.link)?;
        let penalty = self.model.penalty.to_config()?;
        let m_set = index_set_from_one_based(&self.model.m_set, "model.m_set")?;
        m_set
            .validate_within(p, "model.m_set")
            .map_err(|e| bad(e.to_string()))?;
        let mut spec = ModelSpec::new(link, penalty, m_set);
        if let Some(h) = &self.hypothesis {
            let hyp = h.to_spec()?;
            if hyp.m() != spec.m_set.len() {
                return Err(bad(format!(
                    "hypothesis matrix has {} columns but m_set has {} entries",
                    hyp.m(),
                    spec.m_set.len()
                )));
            }
            spec = spec.with_hypothesis(hyp);
        }
        Ok(spec)
    }

    pub fn crossfit_config(&self, seed_override: Option<u64>) -> CResult<CrossFitConfig<f64>> {
        Ok(CrossFitConfig {
            solver: self.solver.to_config(),
            screening: self.screening.to_config()?,
            kernel: self.kernel.to_config(),
            lambda: self.model.lambda.to_rule()?,
            seed: seed_override.unwrap_or(self.seed),
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySection {
    pub kind: String,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub scale: Option<f64>,
}

impl FamilySection {
    pub fn to_family(&self) -> CResult<CovFamily<f64>> {
        match self.kind.as_str() {
            "homoscedastic" => Ok(CovFamily::Homoscedastic {
                sigma: self.sigma.unwrap_or(1.0),
            }),
            "diag_exp" => Ok(CovFamily::DiagExp {
                scale: self.scale.unwrap_or(1.0),
            }),
            "exchangeable_varying" => Ok(CovFamily::ExchangeableVarying {
                scale: self.scale.unwrap_or(1.0),
            }),
            other => Err(bad(format!("unknown covariance family '{other}'"))),
        }
    }
}

/// Scenario file for the simulate command.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub experiment: String,
    pub n: usize,
    pub p: usize,
    pub l: usize,
    #[serde(default)]
    pub s: usize,
    #[serde(default)]
    pub m: usize,
    pub link: String,
    pub family: FamilySection,
    #[serde(default)]
    pub active: Vec<usize>,
    #[serde(default = "one")]
    pub signal: f64,
    #[serde(default)]
    pub m_value: f64,
    #[serde(default)]
    pub drift: Vec<f64>,
    #[serde(default)]
    pub bounded_errors: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_reps")]
    pub replications: usize,
    #[serde(default = "default_lambda_rule")]
    pub lambda: LambdaRuleConfig,
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default = "default_level")]
    pub level: f64,
}

fn one() -> f64 {
    1.0
}

fn default_reps() -> usize {
    100
}

fn default_level() -> f64 {
    0.05
}

impl ScenarioFile {
    pub fn parse(text: &str) -> CResult<Self> {
        serde_json::from_str(text).map_err(|e| bad(format!("scenario: {e}")))
    }

    pub fn experiment(&self) -> CResult<ExperimentName> {
        ExperimentName::parse(&self.experiment).map_err(|e| bad(e.to_string()))
    }

    pub fn to_scenario(&self, seed_override: Option<u64>) -> CResult<ScenarioConfig<f64>> {
        let cfg = ScenarioConfig {
            n: self.n,
            p: self.p,
            l: self.l,
            s: self.s,
            m: self.m,
            link: link_from_name(&self.link)?,
            family: self.family.to_family()?,
            active: index_set_from_one_based(&self.active, "active")?,
            signal: self.signal,
            m_value: self.m_value,
            drift: self.drift.clone(),
            bounded_errors: self.bounded_errors,
            seed: seed_override.unwrap_or(self.seed),
            replications: self.replications,
            lambda: self.lambda.to_rule()?,
            kernel: self.kernel.to_config(),
            level: self.level,
        };
        cfg.validate().map_err(|e| bad(e.to_string()))?;
        Ok(cfg)
    }
}
