//! Problem data: regime parameters, switching generator, Lévy measure, costs.
//!
//! Units are fixed across the crate: prices in currency per unit, reserves in
//! millions of units, extraction rates in millions of units per year, time in
//! years. Regime indices are 0-based in this API and 1-based in config files
//! and CLI output.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::levy::LevyMeasureSpec;
use crate::solver;

/// Row sums of the switching generator must vanish to this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeParams {
    /// Drift per year.
    pub mu: f64,
    /// Volatility per sqrt-year.
    pub sigma: f64,
    /// Jump intensity multiplier.
    pub gamma: f64,
}

/// Generator `Q` of the regime chain; `q[i][j]` is the rate of switching
/// from `i` to `j` per year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SwitchGenerator {
    rows: Vec<Vec<f64>>,
}

impl SwitchGenerator {
    pub fn new(rows: Vec<Vec<f64>>) -> Self {
        Self { rows }
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Total rate of leaving state `i`, `Σ_{j≠i} q_ij`.
    pub fn exit_rate(&self, i: usize) -> f64 {
        self.rows[i].iter().enumerate().filter(|&(j, _)| j != i).map(|(_, q)| q).sum()
    }

    fn violations(&self, out: &mut Vec<Violation>) {
        let m = self.rows.len();
        if m == 0 {
            out.push(Violation::new("generator", "at least one regime required"));
            return;
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != m {
                out.push(Violation::new(
                    format!("generator[{}]", i + 1),
                    format!("row has {} entries, expected {m}", row.len()),
                ));
                continue;
            }
            if row.iter().any(|q| !q.is_finite()) {
                out.push(Violation::new(format!("generator[{}]", i + 1), "entries must be finite"));
                continue;
            }
            for (j, &q) in row.iter().enumerate() {
                if j != i && q < 0.0 {
                    out.push(Violation::new(
                        format!("generator[{}][{}]", i + 1, j + 1),
                        "off-diagonal rate must be >= 0",
                    ));
                }
            }
            let sum: f64 = row.iter().sum();
            if sum.abs() > ROW_SUM_TOL {
                out.push(Violation::new(
                    format!("generator[{}]", i + 1),
                    format!("row sum nonzero ({sum:e})"),
                ));
            }
        }
    }
}

/// Cost `C(u, y) = β u² + θ u + r θ y + K` and discount rate `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub beta: f64,
    pub theta: f64,
    #[serde(rename = "K")]
    pub big_k: f64,
    pub r: f64,
}

impl CostParams {
    pub fn cost(&self, u: f64, y: f64) -> f64 {
        self.beta * u * u + self.theta * u + self.r * self.theta * y + self.big_k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketModel {
    pub regimes: Vec<RegimeParams>,
    pub switch: SwitchGenerator,
    pub levy: LevyMeasureSpec,
    pub cost: CostParams,
    /// Price impact of extraction, in `[0, 1)`.
    pub lambda: f64,
    /// `None` means the control set is unbounded.
    pub control_bounds: Option<[f64; 2]>,
}

impl MarketModel {
    pub fn regime_count(&self) -> usize {
        self.regimes.len()
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self)
    }

    /// Returns the model unchanged if it has no violations.
    pub fn checked(self) -> Result<Self> {
        let report = self.validate();
        if report.is_ok() {
            Ok(self)
        } else {
            Err(Error::InvalidModel(report.to_string()))
        }
    }
}

/// Starting point of a controlled path. `regime` is 0-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialState {
    pub x0: f64,
    pub y0: f64,
    pub regime: usize,
}

impl InitialState {
    pub fn validate(&self, m: usize, out: &mut Vec<Violation>) {
        if !self.x0.is_finite() {
            out.push(Violation::new("initial.x0", "must be finite"));
        }
        if !(self.y0 >= 0.0) || !self.y0.is_finite() {
            out.push(Violation::new("initial.y0", "y0 >= 0 required"));
        }
        if self.regime >= m {
            out.push(Violation::new(
                "initial.i0",
                format!("regime {} out of range 1..={m}", self.regime.wrapping_add(1)),
            ));
        }
    }
}

/// One violated invariant, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Non-fatal findings, such as a regime whose linear coefficient is
    /// nonnegative (discounting no longer dominates growth of `X²`).
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn mentions(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.message.contains(needle) || v.field.contains(needle))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msgs: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        f.write_str(&msgs.join("; "))
    }
}

/// Checks every standing assumption on the model. Never fails; the report
/// lists what is wrong.
pub fn validate(model: &MarketModel) -> ValidationReport {
    let mut violations = Vec::new();
    let m = model.regimes.len();
    if m == 0 {
        violations.push(Violation::new("regimes", "at least one regime required"));
    }
    for (i, reg) in model.regimes.iter().enumerate() {
        let name = format!("regimes[{}]", i + 1);
        if !(reg.mu.is_finite() && reg.sigma.is_finite() && reg.gamma.is_finite()) {
            violations.push(Violation::new(&name, "mu, sigma, gamma must be finite"));
        }
        if reg.sigma < 0.0 {
            violations.push(Violation::new(&name, "sigma >= 0 required"));
        }
    }
    model.switch.violations(&mut violations);
    if model.switch.dim() != m {
        violations.push(Violation::new(
            "generator",
            format!("dimension {} does not match {m} regimes", model.switch.dim()),
        ));
    }
    for msg in model.levy.violations() {
        violations.push(Violation::new("levy", msg));
    }
    let c = &model.cost;
    if !(c.beta > 0.0) || !c.beta.is_finite() {
        violations.push(Violation::new("cost.beta", "beta > 0 required"));
    }
    if !(c.theta > 0.0) || !c.theta.is_finite() {
        violations.push(Violation::new("cost.theta", "theta > 0 required"));
    }
    if !(c.big_k >= 0.0) || !c.big_k.is_finite() {
        violations.push(Violation::new("cost.K", "K >= 0 required"));
    }
    if !(c.r > 0.0) || !c.r.is_finite() {
        violations.push(Violation::new("cost.r", "r > 0 required"));
    }
    if !(0.0..1.0).contains(&model.lambda) {
        violations.push(Violation::new("lambda", "0 <= lambda < 1 required"));
    }
    if let Some([lo, hi]) = model.control_bounds {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            violations.push(Violation::new("control_bounds", "finite u_lo <= u_hi required"));
        }
    }

    let mut warnings = Vec::new();
    if violations.is_empty() {
        for i in 0..m {
            match solver::linear_coefficient(model, i, solver::JumpMethod::Auto) {
                Ok(b) if b >= 0.0 => warnings.push(format!(
                    "regime {}: linear coefficient b = {b:.6} >= 0; discounting does not dominate growth of X^2",
                    i + 1
                )),
                Ok(_) => {}
                Err(e) => warnings.push(format!("regime {}: linear coefficient unavailable: {e}", i + 1)),
            }
        }
    }
    ValidationReport { violations, warnings }
}

/// Serialized form of a problem instance. `i0` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub regimes: Vec<RegimeParams>,
    pub generator: Vec<Vec<f64>>,
    pub levy: LevyMeasureSpec,
    pub cost: CostParams,
    pub lambda: f64,
    #[serde(default)]
    pub control_bounds: Option<[f64; 2]>,
    pub initial: InitialConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub x0: f64,
    pub y0: f64,
    pub i0: usize,
}

impl ModelConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn from_parts(model: &MarketModel, init: &InitialState) -> Self {
        Self {
            regimes: model.regimes.clone(),
            generator: model.switch.rows().to_vec(),
            levy: model.levy.clone(),
            cost: model.cost,
            lambda: model.lambda,
            control_bounds: model.control_bounds,
            initial: InitialConfig { x0: init.x0, y0: init.y0, i0: init.regime + 1 },
        }
    }

    /// Splits into model and initial state without checking invariants.
    pub fn to_parts_unchecked(&self) -> (MarketModel, InitialState) {
        let model = MarketModel {
            regimes: self.regimes.clone(),
            switch: SwitchGenerator::new(self.generator.clone()),
            levy: self.levy.clone(),
            cost: self.cost,
            lambda: self.lambda,
            control_bounds: self.control_bounds,
        };
        let init = InitialState {
            x0: self.initial.x0,
            y0: self.initial.y0,
            // i0 = 0 is mapped out of range so validation reports it.
            regime: self.initial.i0.checked_sub(1).unwrap_or(usize::MAX),
        };
        (model, init)
    }

    pub fn validate(&self) -> ValidationReport {
        let (model, init) = self.to_parts_unchecked();
        let mut report = validate(&model);
        init.validate(model.regime_count(), &mut report.violations);
        report
    }

    /// Validated model and initial state.
    pub fn into_parts(self) -> Result<(MarketModel, InitialState)> {
        let report = self.validate();
        if !report.is_ok() {
            return Err(Error::InvalidModel(report.to_string()));
        }
        Ok(self.to_parts_unchecked())
    }
}

/// Literal coefficients and results published for a reference example,
/// kept verbatim for regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrintedFixture {
    pub example: u32,
    /// Quadratic coefficient, shared by all regimes.
    pub a: f64,
    /// Linear coefficients per regime.
    pub b: [f64; 2],
    /// Coupling rates `q12`, `q21`.
    pub cross: [f64; 2],
    pub c: f64,
    pub roots: Vec<PrintedRoot>,
    pub admissible: [f64; 2],
    pub yearly_rates: [f64; 2],
    pub daily_rates: [f64; 2],
    pub value_y_coefficient: f64,
    pub value_constant: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrintedRoot {
    pub re: [f64; 2],
    pub im: [f64; 2],
}

impl PrintedRoot {
    pub fn is_real(&self) -> bool {
        self.im == [0.0, 0.0]
    }
}

const EXAMPLE1_CONFIG: &str = include_str!("../fixtures/example1.json");
const EXAMPLE2_CONFIG: &str = include_str!("../fixtures/example2.json");
const EXAMPLE1_PRINTED: &str = include_str!("../fixtures/printed_example1.json");
const EXAMPLE2_PRINTED: &str = include_str!("../fixtures/printed_example2.json");

/// Raw JSON config of reference example `n`.
pub fn reference_config_json(n: u32) -> Result<&'static str> {
    match n {
        1 => Ok(EXAMPLE1_CONFIG),
        2 => Ok(EXAMPLE2_CONFIG),
        _ => Err(Error::UnknownExample(n)),
    }
}

/// Reference examples 1 (exponential finite-activity jumps) and 2
/// (symmetric infinite-activity jumps). Both share two regimes and the same
/// cost data; `y0 = 10⁴` (ten billion units, stored in millions).
pub fn reference_example(n: u32) -> Result<(MarketModel, InitialState, PrintedFixture)> {
    let (config, printed) = match n {
        1 => (EXAMPLE1_CONFIG, EXAMPLE1_PRINTED),
        2 => (EXAMPLE2_CONFIG, EXAMPLE2_PRINTED),
        _ => return Err(Error::UnknownExample(n)),
    };
    let (model, init) = ModelConfig::from_json_str(config)?.into_parts()?;
    let fixture: PrintedFixture = serde_json::from_str(printed)?;
    Ok((model, init, fixture))
}
