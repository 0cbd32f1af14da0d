//! Declarative experiment configuration (TOML).
//!
//! Every experiment reads the top-level keys plus its own table; omitted
//! fields fall back to the reference parameter choices at desk scale.

use std::fmt;
use std::path::{Path, PathBuf};

use homog_mlmc::cell::{BoundaryCondition, TensorDefinition};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExperimentKind {
    #[serde(rename = "estimate-beta")]
    EstimateBeta,
    #[serde(rename = "coeff-1d")]
    Coeff1d,
    #[serde(rename = "coeff-2d")]
    Coeff2d,
    #[serde(rename = "solution-1d")]
    Solution1d,
    #[serde(rename = "solution-2d")]
    Solution2d,
    #[serde(rename = "weighted-cost")]
    WeightedCost,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::EstimateBeta => "estimate-beta",
            ExperimentKind::Coeff1d => "coeff-1d",
            ExperimentKind::Coeff2d => "coeff-2d",
            ExperimentKind::Solution1d => "solution-1d",
            ExperimentKind::Solution2d => "solution-2d",
            ExperimentKind::WeightedCost => "weighted-cost",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BcChoice {
    #[default]
    DirichletLinear,
    DirichletNoFlow,
}

impl From<BcChoice> for BoundaryCondition {
    fn from(b: BcChoice) -> Self {
        match b {
            BcChoice::DirichletLinear => BoundaryCondition::DirichletLinear,
            BcChoice::DirichletNoFlow => BoundaryCondition::DirichletNoFlow,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefinitionChoice {
    FluxAverage,
    #[default]
    EnergyAverage,
}

impl From<DefinitionChoice> for TensorDefinition {
    fn from(d: DefinitionChoice) -> Self {
        match d {
            DefinitionChoice::FluxAverage => TensorDefinition::FluxAverage,
            DefinitionChoice::EnergyAverage => TensorDefinition::EnergyAverage,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingChoice {
    #[default]
    Shared,
    Independent,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional; when present it must match the subcommand.
    pub experiment: Option<ExperimentKind>,
    pub nb: Option<usize>,
    pub base_seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub estimate_beta: Option<EstimateBetaConfig>,
    pub coeff_1d: Option<Coeff1dConfig>,
    pub coeff_2d: Option<Coeff2dConfig>,
    pub solution_1d: Option<Solution1dConfig>,
    pub solution_2d: Option<Solution2dConfig>,
    pub weighted_cost: Option<WeightedCostConfig>,
}

pub const DEFAULT_NB: usize = 200;

fn sqrt2() -> f64 {
    std::f64::consts::SQRT_2
}
fn corr_len() -> f64 {
    0.04
}
fn ten() -> f64 {
    10.0
}
fn fine_h() -> f64 {
    1.0 / 128.0
}
fn table_eta() -> Vec<f64> {
    vec![0.125, 0.25, 0.5]
}
fn mode_tol() -> f64 {
    1e-4
}
fn two_e() -> f64 {
    2.0 * std::f64::consts::E
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaSource {
    #[default]
    Gaussian,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateBetaConfig {
    #[serde(default)]
    pub source: BetaSource,
    #[serde(default = "sqrt2")]
    pub sigma: f64,
    /// Physical correlation length `ετ₀`.
    #[serde(default = "corr_len")]
    pub corr_len: f64,
    #[serde(default = "ten")]
    pub mean: f64,
    /// Defaults to `corr_len / √2`.
    pub epsilon: Option<f64>,
    #[serde(default = "fine_h")]
    pub h: f64,
    #[serde(default = "table_eta")]
    pub eta: Vec<f64>,
    #[serde(default = "beta_m")]
    pub m: Vec<usize>,
    #[serde(default = "mode_tol")]
    pub mode_tolerance: f64,
    #[serde(default)]
    pub bc: BcChoice,
    #[serde(default)]
    pub definition: DefinitionChoice,
    #[serde(default = "synthetic_beta")]
    pub synthetic_beta: f64,
    #[serde(default = "synthetic_ln_c")]
    pub synthetic_ln_c: f64,
    pub kl_cache: Option<PathBuf>,
}

fn beta_m() -> Vec<usize> {
    vec![200, 100, 50]
}
fn synthetic_beta() -> f64 {
    1.53
}
fn synthetic_ln_c() -> f64 {
    1.059
}

impl Default for EstimateBetaConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

impl EstimateBetaConfig {
    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or(self.corr_len / std::f64::consts::SQRT_2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family1d {
    Ex1,
    Ex2,
    Ex3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coeff1dConfig {
    pub family: Family1d,
    /// Defaults: 1 (Ex1, Ex2), 2e (Ex3).
    pub c: Option<f64>,
    #[serde(default = "n_terms")]
    pub n_terms: usize,
    #[serde(default = "three")]
    pub levels: usize,
    /// Defaults to `0.5^L / 10` (Ex1, Ex3); Ex2 has unit period.
    pub epsilon: Option<f64>,
    /// RVE right ends `b_l` of `[0, b_l]`. Defaults: `100·2^{l-1}` (Ex2), `0.5^{L+1-l}` otherwise.
    pub rve_b: Option<Vec<f64>>,
    /// Explicit counts; otherwise `ratio^{L-l} m_last`.
    pub m: Option<Vec<usize>>,
    #[serde(default = "hundred")]
    pub m_last: usize,
    /// Defaults: 2 (Ex2), 4 otherwise.
    pub m_ratio: Option<usize>,
    /// Defaults: 1 (Ex2), 2 otherwise.
    pub beta: Option<f64>,
    #[serde(default)]
    pub coupling: CouplingChoice,
    /// Also runs the independent-sample variant with the same counts.
    #[serde(default)]
    pub compare_independent: bool,
    /// Overrides the reference value of `E(A*)`.
    pub reference: Option<f64>,
    /// MC samples on the largest RVE for references without closed form (Ex1).
    #[serde(default = "thousand")]
    pub reference_samples: usize,
    /// The second RVE of the two-point correlation is `[s, s + b_l]`.
    #[serde(default)]
    pub correlation_shift: f64,
}

fn n_terms() -> usize {
    20
}
fn three() -> usize {
    3
}
fn hundred() -> usize {
    100
}
fn thousand() -> usize {
    1000
}

impl Coeff1dConfig {
    pub fn new(family: Family1d) -> Self {
        let name = match family {
            Family1d::Ex1 => "ex1",
            Family1d::Ex2 => "ex2",
            Family1d::Ex3 => "ex3",
        };
        toml::from_str(&format!("family = \"{name}\"")).expect("defaults")
    }

    pub fn c(&self) -> f64 {
        self.c.unwrap_or(match self.family {
            Family1d::Ex3 => two_e(),
            _ => 1.0,
        })
    }

    pub fn levels(&self) -> usize {
        self.rve_b.as_ref().map(|b| b.len()).or(self.m.as_ref().map(|m| m.len())).unwrap_or(self.levels)
    }

    pub fn rve_b(&self) -> Vec<f64> {
        let l = self.levels();
        self.rve_b.clone().unwrap_or_else(|| match self.family {
            Family1d::Ex2 => (0..l).map(|k| 100.0 * 2f64.powi(k as i32)).collect(),
            _ => (1..=l).map(|k| 0.5f64.powi((l + 1 - k) as i32)).collect(),
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or(match self.family {
            Family1d::Ex2 => 1.0,
            _ => 0.5f64.powi(self.levels() as i32) / 10.0,
        })
    }

    pub fn m(&self) -> Vec<usize> {
        let l = self.levels();
        let r = self.m_ratio.unwrap_or(if self.family == Family1d::Ex2 { 2 } else { 4 });
        self.m
            .clone()
            .unwrap_or_else(|| (1..=l).map(|k| r.pow((l - k) as u32) * self.m_last).collect())
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(if self.family == Family1d::Ex2 { 1.0 } else { 2.0 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family2d {
    /// `exp(ω) B(x/ε, ω′)` with a Gaussian KL field `B`.
    SeparableKl,
    /// `A₁(x₁) A₂(x₂)` with Dirichlet/no-flow RVE conditions.
    Product,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coeff2dConfig {
    pub family: Family2d,
    #[serde(default = "table_eta")]
    pub eta: Vec<f64>,
    #[serde(default = "fine_h")]
    pub h: f64,
    pub m: Option<Vec<usize>>,
    #[serde(default = "twenty")]
    pub m_last: usize,
    /// Defaults: 2 (separable, `β = 1`), 4 (product, `β = 2`).
    pub m_ratio: Option<usize>,
    pub beta: Option<f64>,
    #[serde(default = "sqrt2")]
    pub sigma: f64,
    #[serde(default = "corr_len")]
    pub corr_len: f64,
    #[serde(default = "ten")]
    pub mean: f64,
    #[serde(default = "mode_tol")]
    pub mode_tolerance: f64,
    /// Macroscopic sets `n` per repetition (separable family).
    #[serde(default = "macro_sets")]
    pub macro_samples: usize,
    /// Microscopic reference counts per level (separable family).
    #[serde(default = "m_ref")]
    pub m_ref: Vec<usize>,
    /// Product family constant, default 2e.
    #[serde(default = "two_e")]
    pub c: f64,
    /// Defaults: `corr_len / √2` (separable), `η_1 / 10` (product).
    pub epsilon: Option<f64>,
    /// Reference MC samples on the largest RVE (product family).
    #[serde(default = "product_ref")]
    pub reference_samples: usize,
    /// Midpoint cells per `ε` for the product family averages.
    #[serde(default = "eight")]
    pub quadrature_per_epsilon: usize,
    #[serde(default)]
    pub bc: BcChoice,
    #[serde(default)]
    pub definition: DefinitionChoice,
    pub kl_cache: Option<PathBuf>,
}

fn twenty() -> usize {
    20
}
fn macro_sets() -> usize {
    500
}
fn m_ref() -> Vec<usize> {
    vec![2000, 1000, 300]
}
fn product_ref() -> usize {
    20000
}
fn eight() -> usize {
    8
}

impl Coeff2dConfig {
    pub fn new(family: Family2d) -> Self {
        let name = match family {
            Family2d::SeparableKl => "separable-kl",
            Family2d::Product => "product",
        };
        toml::from_str(&format!("family = \"{name}\"")).expect("defaults")
    }

    pub fn m(&self) -> Vec<usize> {
        let l = self.eta.len();
        let r = self.m_ratio.unwrap_or(match self.family {
            Family2d::SeparableKl => 2,
            Family2d::Product => 4,
        });
        self.m
            .clone()
            .unwrap_or_else(|| (1..=l).map(|k| r.pow((l - k) as u32) * self.m_last).collect())
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(match self.family {
            Family2d::SeparableKl => 1.0,
            Family2d::Product => 2.0,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or(match self.family {
            Family2d::SeparableKl => self.corr_len / std::f64::consts::SQRT_2,
            Family2d::Product => self.eta[0] / 10.0,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Solution1dConfig {
    #[serde(default = "two_e")]
    pub c: f64,
    #[serde(default = "table_eta")]
    pub rve_b: Vec<f64>,
    /// Defaults to `b_1 / 100`.
    pub epsilon: Option<f64>,
    /// Cells of the coarsest grid; `H_l = 1 / (base_cells 2^{l-1})`.
    #[serde(default = "four")]
    pub base_cells: usize,
    pub big_m: Option<Vec<usize>>,
    #[serde(default = "ten_usize")]
    pub big_m_last: usize,
    #[serde(default = "four")]
    pub big_m_ratio: usize,
    /// Weights `α_l` of an additional weighted estimator with the same `𝔐`.
    pub weights: Option<Vec<f64>>,
}

fn four() -> usize {
    4
}
fn ten_usize() -> usize {
    10
}

impl Default for Solution1dConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

impl Solution1dConfig {
    pub fn big_m(&self) -> Vec<usize> {
        let l = self.rve_b.len();
        self.big_m.clone().unwrap_or_else(|| {
            (1..=l)
                .map(|k| self.big_m_ratio.pow((l - k) as u32) * self.big_m_last)
                .collect()
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or(self.rve_b[0] / 100.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Solution2dConfig {
    #[serde(default = "table_eta")]
    pub eta: Vec<f64>,
    #[serde(default = "fine_h")]
    pub h: f64,
    #[serde(default = "sixteen")]
    pub base_cells: usize,
    #[serde(default = "sol_big_m")]
    pub big_m: Vec<usize>,
    #[serde(default = "sol_m")]
    pub m: Vec<usize>,
    /// Log-field standard deviation.
    #[serde(default = "sqrt2")]
    pub sigma: f64,
    #[serde(default = "corr_len")]
    pub corr_len: f64,
    #[serde(default = "mode_tol")]
    pub mode_tolerance: f64,
    /// `M̃` and `m̃` of the reference solution.
    #[serde(default = "ref_macro")]
    pub reference_macro: usize,
    #[serde(default = "twenty")]
    pub reference_micro: usize,
    /// `f = source_scale (x₁ + x₂)`.
    #[serde(default = "hundred_f")]
    pub source_scale: f64,
    #[serde(default)]
    pub bc: BcChoice,
    #[serde(default)]
    pub definition: DefinitionChoice,
    pub kl_cache: Option<PathBuf>,
}

fn sixteen() -> usize {
    16
}
fn sol_big_m() -> Vec<usize> {
    vec![32, 32, 16]
}
fn sol_m() -> Vec<usize> {
    vec![50, 40, 20]
}
fn ref_macro() -> usize {
    200
}
fn hundred_f() -> f64 {
    100.0
}

impl Default for Solution2dConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

impl Solution2dConfig {
    pub fn epsilon(&self) -> f64 {
        self.corr_len / std::f64::consts::SQRT_2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedCostConfig {
    #[serde(default = "betas")]
    pub betas: Vec<f64>,
    #[serde(default = "fifteen")]
    pub max_levels: usize,
    #[serde(default = "two_u32")]
    pub dim: u32,
    /// `ε = η_1 / eps_factor`.
    #[serde(default = "ten")]
    pub eps_factor: f64,
    /// Coarsest grid `H_1`; `H_l = H_1 2^{1-l}`.
    #[serde(default = "h1")]
    pub h1: f64,
}

fn betas() -> Vec<f64> {
    vec![1.0, 2.0, 3.0]
}
fn fifteen() -> usize {
    15
}
fn two_u32() -> u32 {
    2
}
fn h1() -> f64 {
    1.0 / 16.0
}

impl Default for WeightedCostConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{s}: {}: {}", self.field, self.message)
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn nb(&self) -> usize {
        self.nb.unwrap_or(DEFAULT_NB)
    }

    /// Config for `kind` with every default filled in.
    pub fn defaults_for(kind: ExperimentKind) -> Self {
        let mut c = Self {
            experiment: Some(kind),
            base_seed: Some(1),
            ..Self::default()
        };
        match kind {
            ExperimentKind::EstimateBeta => c.estimate_beta = Some(EstimateBetaConfig::default()),
            ExperimentKind::Coeff1d => c.coeff_1d = Some(Coeff1dConfig::new(Family1d::Ex2)),
            ExperimentKind::Coeff2d => c.coeff_2d = Some(Coeff2dConfig::new(Family2d::Product)),
            ExperimentKind::Solution1d => c.solution_1d = Some(Solution1dConfig::default()),
            ExperimentKind::Solution2d => c.solution_2d = Some(Solution2dConfig::default()),
            ExperimentKind::WeightedCost => c.weighted_cost = Some(WeightedCostConfig::default()),
        }
        c
    }

    /// Experiments whose table is present, in declaration order.
    pub fn present_sections(&self) -> Vec<ExperimentKind> {
        let mut out = Vec::new();
        if self.estimate_beta.is_some() {
            out.push(ExperimentKind::EstimateBeta);
        }
        if self.coeff_1d.is_some() {
            out.push(ExperimentKind::Coeff1d);
        }
        if self.coeff_2d.is_some() {
            out.push(ExperimentKind::Coeff2d);
        }
        if self.solution_1d.is_some() {
            out.push(ExperimentKind::Solution1d);
        }
        if self.solution_2d.is_some() {
            out.push(ExperimentKind::Solution2d);
        }
        if self.weighted_cost.is_some() {
            out.push(ExperimentKind::WeightedCost);
        }
        out
    }
}

struct Checker {
    out: Vec<Diagnostic>,
}

impl Checker {
    fn push(&mut self, severity: Severity, field: &str, message: impl Into<String>) {
        self.out.push(Diagnostic {
            severity,
            field: field.to_string(),
            message: message.into(),
        });
    }

    fn error(&mut self, field: &str, message: impl Into<String>) {
        self.push(Severity::Error, field, message);
    }

    fn positive(&mut self, field: &str, v: f64) {
        if !(v > 0.0 && v.is_finite()) {
            self.error(field, format!("must be positive, got {v}"));
        }
    }

    fn increasing(&mut self, field: &str, v: &[f64]) {
        if v.is_empty() {
            self.error(field, "must not be empty");
        } else if v.windows(2).any(|w| !(w[0] < w[1])) {
            self.error(field, format!("must be strictly increasing, got {v:?}"));
        }
        if v.iter().any(|x| !(*x > 0.0)) {
            self.error(field, "entries must be positive");
        }
    }

    fn non_increasing(&mut self, field: &str, v: &[usize]) {
        if v.is_empty() {
            self.error(field, "must not be empty");
        } else if v.windows(2).any(|w| w[0] < w[1]) {
            self.error(field, format!("must be non-increasing, got {v:?}"));
        }
        if v.contains(&0) {
            self.error(field, "entries must be at least 1");
        }
    }

    fn length(&mut self, field: &str, len: usize, levels: usize) {
        if len != levels {
            self.error(field, format!("has {len} entries for {levels} levels"));
        }
    }

    fn scale_separation(&mut self, field: &str, epsilon: f64, eta1: f64) {
        self.positive(field, epsilon);
        if epsilon > eta1 / 10.0 {
            self.push(
                Severity::Warning,
                field,
                format!("epsilon = {epsilon} exceeds eta_1 / 10 = {}; weak scale separation", eta1 / 10.0),
            );
        }
    }

    fn divides(&mut self, field: &str, eta: &[f64], h: f64) {
        for (l, e) in eta.iter().enumerate() {
            let n = e / h;
            if (n - n.round()).abs() > 1e-9 || n.round() < 2.0 {
                self.error(field, format!("eta_{} = {e} is not a multiple (>= 2) of h = {h}", l + 1));
            }
        }
    }

    fn resolves(&mut self, field: &str, h: f64, corr_len: f64) {
        if h > corr_len / 2.0 {
            self.error(field, format!("h = {h} does not resolve corr_len = {corr_len} (needs h <= corr_len / 2)"));
        }
    }
}

/// Checks array shapes and monotonicity, scale separation, grid nesting and seeding.
pub fn validate(config: &ExperimentConfig) -> Vec<Diagnostic> {
    let mut c = Checker { out: Vec::new() };
    if config.base_seed.is_none() {
        c.error("base_seed", "missing; set base_seed or pass --seed");
    }
    if config.nb == Some(0) {
        c.error("nb", "must be at least 1");
    }
    if config.threads == Some(0) {
        c.error("threads", "must be at least 1");
    }
    let sections = config.present_sections();
    if sections.is_empty() {
        c.error("experiment", "no experiment table present");
    }
    if let Some(kind) = config.experiment {
        if !sections.contains(&kind) && !sections.is_empty() {
            c.push(Severity::Warning, "experiment", format!("no [{}] table; defaults apply", table_name(kind)));
        }
    }
    if let Some(s) = &config.estimate_beta {
        let l = s.eta.len();
        c.increasing("estimate_beta.eta", &s.eta);
        c.length("estimate_beta.m", s.m.len(), l);
        if l < 2 {
            c.error("estimate_beta.eta", "regression needs at least 2 RVE sizes");
        }
        if s.m.iter().any(|m| *m < 2) {
            c.error("estimate_beta.m", "each level needs at least 2 samples");
        }
        match s.source {
            BetaSource::Gaussian => {
                c.positive("estimate_beta.sigma", s.sigma);
                c.positive("estimate_beta.corr_len", s.corr_len);
                c.positive("estimate_beta.h", s.h);
                c.divides("estimate_beta.eta", &s.eta, s.h);
                c.resolves("estimate_beta.h", s.h, s.corr_len);
                if let Some(e) = s.eta.first() {
                    c.scale_separation("estimate_beta.epsilon", s.epsilon(), *e);
                }
            }
            BetaSource::Synthetic => c.positive("estimate_beta.epsilon", s.epsilon()),
        }
        if !(s.mode_tolerance > 0.0 && s.mode_tolerance < 1.0) {
            c.error("estimate_beta.mode_tolerance", "must lie in (0, 1)");
        }
    }
    if let Some(s) = &config.coeff_1d {
        let b = s.rve_b();
        let l = b.len();
        c.increasing("coeff_1d.rve_b", &b);
        c.length("coeff_1d.m", s.m().len(), l);
        c.non_increasing("coeff_1d.m", &s.m());
        c.positive("coeff_1d.c", s.c());
        c.positive("coeff_1d.beta", s.beta());
        if s.family == Family1d::Ex3 && s.c() < 2.0 * std::f64::consts::E {
            c.error("coeff_1d.c", "Ex3 needs C >= 2e for coercivity");
        }
        if s.family == Family1d::Ex1 && s.n_terms == 0 {
            c.error("coeff_1d.n_terms", "must be at least 1");
        }
        if s.family == Family1d::Ex2 {
            c.positive("coeff_1d.rve_b", b.first().copied().unwrap_or(0.0));
        } else if let Some(b1) = b.first() {
            c.scale_separation("coeff_1d.epsilon", s.epsilon(), *b1);
        }
        if s.correlation_shift < 0.0 {
            c.error("coeff_1d.correlation_shift", "must be non-negative");
        }
        if s.compare_independent && s.m().windows(2).any(|w| w[0] == w[1]) {
            c.error("coeff_1d.m", "independent coupling needs strictly decreasing counts");
        }
    }
    if let Some(s) = &config.coeff_2d {
        let l = s.eta.len();
        c.increasing("coeff_2d.eta", &s.eta);
        c.length("coeff_2d.m", s.m().len(), l);
        c.non_increasing("coeff_2d.m", &s.m());
        c.positive("coeff_2d.beta", s.beta());
        if let Some(e) = s.eta.first() {
            c.scale_separation("coeff_2d.epsilon", s.epsilon(), *e);
        }
        match s.family {
            Family2d::SeparableKl => {
                c.positive("coeff_2d.h", s.h);
                c.divides("coeff_2d.eta", &s.eta, s.h);
                c.resolves("coeff_2d.h", s.h, s.corr_len);
                c.length("coeff_2d.m_ref", s.m_ref.len(), l);
                if s.macro_samples == 0 {
                    c.error("coeff_2d.macro_samples", "must be at least 1");
                }
            }
            Family2d::Product => {
                if s.c < 2.0 * std::f64::consts::E {
                    c.error("coeff_2d.c", "product family needs C >= 2e");
                }
                if s.reference_samples == 0 || s.quadrature_per_epsilon == 0 {
                    c.error("coeff_2d.reference_samples", "reference and quadrature counts must be positive");
                }
            }
        }
    }
    if let Some(s) = &config.solution_1d {
        let l = s.rve_b.len();
        c.increasing("solution_1d.rve_b", &s.rve_b);
        c.length("solution_1d.big_m", s.big_m().len(), l);
        c.non_increasing("solution_1d.big_m", &s.big_m());
        if s.base_cells == 0 {
            c.error("solution_1d.base_cells", "must be at least 1");
        }
        if let Some(b1) = s.rve_b.first() {
            c.scale_separation("solution_1d.epsilon", s.epsilon(), *b1);
        }
        c.positive("solution_1d.c", s.c);
        if let Some(w) = &s.weights {
            c.length("solution_1d.weights", w.len(), l);
            if w.iter().any(|a| !(*a > 0.0)) {
                c.error("solution_1d.weights", "weights must be positive");
            }
        }
    }
    if let Some(s) = &config.solution_2d {
        let l = s.eta.len();
        c.increasing("solution_2d.eta", &s.eta);
        c.length("solution_2d.m", s.m.len(), l);
        c.length("solution_2d.big_m", s.big_m.len(), l);
        c.non_increasing("solution_2d.m", &s.m);
        c.non_increasing("solution_2d.big_m", &s.big_m);
        c.positive("solution_2d.h", s.h);
        c.divides("solution_2d.eta", &s.eta, s.h);
        c.resolves("solution_2d.h", s.h, s.corr_len);
        if s.base_cells == 0 {
            c.error("solution_2d.base_cells", "must be at least 1");
        }
        if let Some(e) = s.eta.first() {
            c.scale_separation("solution_2d.corr_len", s.epsilon(), *e);
        }
        if s.reference_macro == 0 || s.reference_micro == 0 {
            c.error("solution_2d.reference_macro", "reference counts must be positive");
        }
    }
    if let Some(s) = &config.weighted_cost {
        if s.betas.is_empty() || s.betas.iter().any(|b| !(*b > 0.0)) {
            c.error("weighted_cost.betas", "must be a non-empty list of positive rates");
        }
        if s.max_levels == 0 {
            c.error("weighted_cost.max_levels", "must be at least 1");
        }
        c.positive("weighted_cost.eps_factor", s.eps_factor);
        c.positive("weighted_cost.h1", s.h1);
        if s.eps_factor < 10.0 {
            c.push(Severity::Warning, "weighted_cost.eps_factor", "epsilon exceeds eta_1 / 10; weak scale separation");
        }
    }
    c.out
}

pub fn table_name(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::EstimateBeta => "estimate_beta",
        ExperimentKind::Coeff1d => "coeff_1d",
        ExperimentKind::Coeff2d => "coeff_2d",
        ExperimentKind::Solution1d => "solution_1d",
        ExperimentKind::Solution2d => "solution_2d",
        ExperimentKind::WeightedCost => "weighted_cost",
    }
}

pub fn has_errors(diagnostics: &[Diagnostic]) -> bool {
    diagnostics.iter().any(|d| d.severity == Severity::Error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solution_2d_grid_config_is_clean() {
        let text = r#"
            experiment = "solution-2d"
            base_seed = 3
            [solution_2d]
            eta = [0.125, 0.25, 0.5]
            h = 0.0078125
            base_cells = 16
            big_m = [32, 32, 16]
            m = [50, 40, 20]
        "#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        let d = validate(&c);
        assert!(!has_errors(&d));
        assert!(d.iter().all(|x| x.field == "solution_2d.corr_len"), "{d:?}");
    }

    #[test]
    fn decreasing_eta_names_the_field() {
        let text = r#"
            base_seed = 1
            [coeff_2d]
            family = "product"
            eta = [0.5, 0.25, 0.125]
        "#;
        let d = validate(&ExperimentConfig::from_toml(text).unwrap());
        assert!(d.iter().any(|d| d.severity == Severity::Error && d.field == "coeff_2d.eta"));
    }

    #[test]
    fn epsilon_equal_to_eta1_warns() {
        let text = r#"
            base_seed = 1
            [coeff_1d]
            family = "ex3"
            rve_b = [0.125, 0.25, 0.5]
            epsilon = 0.125
        "#;
        let d = validate(&ExperimentConfig::from_toml(text).unwrap());
        assert!(!has_errors(&d));
        assert!(d.iter().any(|d| d.severity == Severity::Warning && d.field == "coeff_1d.epsilon"));
    }

    #[test]
    fn missing_seed_and_unknown_keys() {
        let c = ExperimentConfig::from_toml("[weighted_cost]\n").unwrap();
        assert!(validate(&c).iter().any(|d| d.field == "base_seed"));
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn default_parameters() {
        let c = Coeff1dConfig::new(Family1d::Ex2);
        assert_eq!(c.rve_b(), vec![100.0, 200.0, 400.0]);
        assert_eq!(c.m(), vec![400, 200, 100]);
        let c = Coeff1dConfig::new(Family1d::Ex3);
        assert_eq!(c.rve_b(), vec![0.125, 0.25, 0.5]);
        assert_eq!(c.m(), vec![1600, 400, 100]);
        assert!((c.epsilon() - 0.0125).abs() < 1e-15);
        assert!((c.c() - 2.0 * std::f64::consts::E).abs() < 1e-15);
        let s = Solution1dConfig::default();
        assert_eq!(s.big_m(), vec![160, 40, 10]);
        assert!((s.epsilon() - 0.00125).abs() < 1e-15);
        for kind in [
            ExperimentKind::EstimateBeta,
            ExperimentKind::Coeff1d,
            ExperimentKind::Coeff2d,
            ExperimentKind::Solution1d,
            ExperimentKind::Solution2d,
            ExperimentKind::WeightedCost,
        ] {
            let c = ExperimentConfig::defaults_for(kind);
            assert!(!has_errors(&validate(&c)), "{kind}: {:?}", validate(&c));
            let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
            assert_eq!(back, c);
        }
    }
}
