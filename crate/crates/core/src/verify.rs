//! Independent checks of a solution: HJB residual, closed-form vs quadrature
//! jump integrals, Monte-Carlo payoff vs value function, and a side-by-side
//! report of the published reference examples against recomputed values.

use std::fmt::Write as _;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::levy::{self, LevyMeasureSpec};
use crate::model::{reference_example, InitialState, MarketModel, PrintedFixture};
use crate::quad::DEFAULT_TOL;
use crate::sim::{self, PayoffEstimate, Policy, SimConfig};
use crate::solver::{self, JumpMethod, Period, QuadraticSystem, RootSet, RootVector, Solution};

/// How the nonlocal term `A(i)x²·I(γ_i)` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMethod {
    SemiAnalytic,
    Quadrature,
}

/// Default residual grid: 64 log-spaced prices in `[0.05, 20]`.
pub fn default_grid() -> Vec<f64> {
    log_grid(0.05, 20.0, 64)
}

pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let step = (hi / lo).ln() / (n - 1) as f64;
    let mut g: Vec<f64> = (0..n).map(|k| lo * (step * k as f64).exp()).collect();
    g[n - 1] = hi;
    g
}

/// Residual values are evaluated at these reserve levels; they must agree.
pub const RESIDUAL_Y: [f64; 2] = [0.0, 1e4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub grid: Vec<f64>,
    /// `residual[i][k] = max_y |H(grid[k], y, i)|`.
    pub residual: Vec<Vec<f64>>,
    pub max_abs: f64,
    /// `max |H| / (1 + x²)`.
    pub max_scaled: f64,
    /// Largest change of `H` between the two reserve levels.
    pub y_spread: f64,
    pub method: ResidualMethod,
}

/// `H(x, y, i) = rV − sup_u (L^u V + xu − C(u, y))` for
/// `V = A(i)x² + By + C`. The maximizer is `u* = (x − λV_x − V_y − θ)/(2β)`.
/// Terms are grouped so that the `y` part is `r·y·(B + θ)` and the constant
/// part `r·(C + K/r)`, both exactly zero for a solution of the stated form.
pub fn hjb_point(model: &MarketModel, sol: &Solution, jumps: &[f64], x: f64, y: f64, i: usize) -> f64 {
    let reg = &model.regimes[i];
    let c = &model.cost;
    let a = sol.a[i];
    let b_theta = sol.b + c.theta;
    let vx = 2.0 * a * x;
    let u = (x - model.lambda * vx - b_theta) / (2.0 * c.beta);
    let coupling: f64 = (0..model.regime_count())
        .filter(|&j| j != i)
        .map(|j| model.switch.rate(i, j) * (sol.a[j] - a))
        .sum();
    let x2 = x * x;
    let generator_x = (reg.mu * x - model.lambda * u) * vx
        + reg.sigma * reg.sigma * a * x2
        + a * x2 * jumps[i]
        + coupling * x2;
    let reward_x = x * u - c.beta * u * u - u * b_theta;
    let x_part = c.r * a * x2 - generator_x - reward_x;
    x_part + c.r * y * b_theta + c.r * (sol.c + c.big_k / c.r)
}

pub fn hjb_residual(model: &MarketModel, sol: &Solution, grid: &[f64], method: ResidualMethod) -> Result<ResidualReport> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("residual grid is empty".into()));
    }
    if sol.a.len() != model.regime_count() {
        return Err(Error::InvalidArgument("solution has the wrong number of regimes".into()));
    }
    if !sol.is_admissible() {
        return Err(Error::NotAdmissible(format!("A = {:?} exceeds 1/(2λ)", sol.a)));
    }
    let jm = match method {
        ResidualMethod::SemiAnalytic => JumpMethod::Auto,
        ResidualMethod::Quadrature => JumpMethod::Quadrature,
    };
    let jumps = (0..model.regime_count())
        .map(|i| solver::jump_integral(model, i, jm).map(|j| j.value))
        .collect::<Result<Vec<_>>>()?;
    let mut residual = Vec::new();
    let (mut max_abs, mut max_scaled, mut y_spread) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..model.regime_count() {
        let mut row = Vec::with_capacity(grid.len());
        for &x in grid {
            let h: Vec<f64> = RESIDUAL_Y.iter().map(|&y| hjb_point(model, sol, &jumps, x, y, i)).collect();
            let worst = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            y_spread = y_spread.max((h[0] - h[1]).abs());
            max_abs = max_abs.max(worst);
            max_scaled = max_scaled.max(worst / (1.0 + x * x));
            row.push(worst);
        }
        residual.push(row);
    }
    Ok(ResidualReport { grid: grid.to_vec(), residual, max_abs, max_scaled, y_spread, method })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosscheckRow {
    /// 1-based.
    pub regime: usize,
    pub gamma: f64,
    /// `None` when the measure has no closed form.
    pub i_closed: Option<f64>,
    pub i_quadrature: f64,
    pub quadrature_error: f64,
    pub abs_diff: Option<f64>,
    pub b_closed: Option<f64>,
    pub b_quadrature: f64,
}

/// Closed-form and quadrature jump integrals and linear coefficients, per regime.
pub fn coefficient_crosscheck(model: &MarketModel) -> Result<Vec<CrosscheckRow>> {
    (0..model.regime_count())
        .map(|i| {
            let gamma = model.regimes[i].gamma;
            let closed = match levy::integral_closed_form(&model.levy, gamma) {
                Ok(j) => Some(j.value),
                Err(Error::UnsupportedMeasure(_)) => None,
                Err(e) => return Err(e),
            };
            let quad = levy::integral_quadrature(&model.levy, gamma, DEFAULT_TOL)?;
            let b_quadrature = solver::linear_coefficient(model, i, JumpMethod::Quadrature)?;
            let b_closed = closed.map(|_| solver::linear_coefficient(model, i, JumpMethod::ClosedForm)).transpose()?;
            Ok(CrosscheckRow {
                regime: i + 1,
                gamma,
                i_closed: closed,
                i_quadrature: quad.value,
                quadrature_error: quad.est_error.unwrap_or(0.0),
                abs_diff: closed.map(|c| (c - quad.value).abs()),
                b_closed,
                b_quadrature,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McComparison {
    pub estimate: PayoffEstimate,
    /// `V(x0, y0, i0)`.
    pub value: f64,
    /// `(mean − V)/std_error`; infinite when the estimate has no spread.
    pub z_score: f64,
    /// `3·std_error + truncation_bound (+ refinement delta)`.
    pub tolerance: f64,
    /// `std_error / |V|`.
    pub relative_std_error: f64,
    /// `|mean(eps) − mean(eps/2)|` when the truncation level was refined.
    pub refinement_delta: Option<f64>,
    pub pass: bool,
}

/// Monte-Carlo payoff of the feedback policy against the closed-form value.
/// PASS iff `|mean − V| ≤ 3·std_error + truncation_bound`.
pub fn mc_vs_value(model: &MarketModel, sol: &Solution, init: &InitialState, cfg: &SimConfig) -> Result<McComparison> {
    compare(model, sol, init, cfg, false)
}

/// As [`mc_vs_value`], also rerunning at `eps/2` and adding the change of the
/// mean to the tolerance. Finite-activity measures skip the rerun.
pub fn mc_vs_value_refined(
    model: &MarketModel,
    sol: &Solution,
    init: &InitialState,
    cfg: &SimConfig,
) -> Result<McComparison> {
    compare(model, sol, init, cfg, !model.levy.is_finite_activity())
}

fn compare(model: &MarketModel, sol: &Solution, init: &InitialState, cfg: &SimConfig, refine: bool) -> Result<McComparison> {
    if !sol.is_admissible() {
        return Err(Error::NotAdmissible(format!("A = {:?}", sol.a)));
    }
    let policy = Policy::feedback(sol.clone());
    let estimate = sim::estimate_payoff(model, &policy, init, cfg)?;
    let refinement_delta = if refine {
        let half = SimConfig { eps: cfg.eps / 2.0, ..cfg.clone() };
        let fine = sim::estimate_payoff(model, &policy, init, &half)?;
        Some((fine.mean - estimate.mean).abs())
    } else {
        None
    };
    let value = sol.value_at(init.x0, init.y0, init.regime);
    let diff = estimate.mean - value;
    let tolerance = 3.0 * estimate.std_error + estimate.truncation_bound + refinement_delta.unwrap_or(0.0);
    let z_score = if estimate.std_error > 0.0 {
        diff / estimate.std_error
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    };
    Ok(McComparison {
        relative_std_error: estimate.std_error / value.abs(),
        pass: diff.abs() <= tolerance,
        estimate,
        value,
        z_score,
        tolerance,
        refinement_delta,
    })
}

/// Printed values are given to six significant digits.
pub const PRINTED_MATCH_TOL: f64 = 5e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub regime: usize,
    pub printed_b: f64,
    pub formula_b: f64,
    pub quadrature_b: f64,
    /// Jump term implied by the printed `b`: `printed_b − (formula_b − I)`.
    pub implied_jump: f64,
    pub jump_closed: Option<f64>,
    pub jump_quadrature: f64,
    /// Candidate expressions reproducing `implied_jump` to half a unit of
    /// the last printed digit; empty means unexplained.
    pub matches: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootComparison {
    pub printed: Vec<Complex64>,
    pub computed: Vec<Complex64>,
    pub max_abs_diff: f64,
    /// `max |d| / max(1, |printed|)` over components.
    pub max_rel_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub regime: usize,
    pub printed_yearly: f64,
    pub computed_yearly: f64,
    pub printed_daily: f64,
    pub computed_daily: f64,
    pub formula_yearly: Option<f64>,
    pub formula_daily: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub example: u32,
    pub printed_system: QuadraticSystem,
    pub formula_system: QuadraticSystem,
    pub coefficients: Vec<CoefficientRow>,
    pub printed_roots: RootSet,
    pub root_comparisons: Vec<RootComparison>,
    pub printed_admissible: [f64; 2],
    pub computed_admissible: Vec<f64>,
    pub rates: Vec<RateRow>,
    pub printed_value_y_coefficient: f64,
    pub computed_value_y_coefficient: f64,
    pub printed_value_constant: f64,
    pub computed_value_constant: f64,
    pub formula_roots: RootSet,
    pub formula_solution: Option<Solution>,
    pub formula_error: Option<String>,
}

fn jump_candidates(levy: &LevyMeasureSpec, gamma: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    if let Ok(j) = levy::integral_closed_form(levy, gamma) {
        out.push(("closed form", j.value));
    }
    out.push(("quadrature", levy::integral_quadrature(levy, gamma, DEFAULT_TOL)?.value));
    if let LevyMeasureSpec::ExponentialFinite { eta } = levy {
        let cm = (1.0 - (1.0 + eta) * (-eta).exp()) / eta;
        out.push(("intermediate-line expression 2g(1 - cm + g/eta^2)", 2.0 * gamma * (1.0 - cm + gamma / (eta * eta))));
    }
    if let Ok(j) = levy::integral_closed_form(levy, -gamma) {
        out.push(("closed form evaluated at -gamma", j.value));
    }
    out.push(("2 gamma^2 / e", 2.0 * gamma * gamma * levy::INV_E));
    out.push(("zero", 0.0));
    Ok(out)
}

fn match_roots(printed: &PrintedFixture, computed: &RootSet) -> Vec<RootComparison> {
    printed
        .roots
        .iter()
        .map(|p| {
            let pv: Vec<Complex64> = (0..2).map(|k| Complex64::new(p.re[k], p.im[k])).collect();
            let dist = |r: &RootVector| (0..2).map(|k| (r.a[k] - pv[k]).norm()).fold(0.0, f64::max);
            let best = computed.roots.iter().min_by(|a, b| dist(a).total_cmp(&dist(b)));
            match best {
                Some(r) => RootComparison {
                    printed: pv.clone(),
                    computed: r.a.clone(),
                    max_abs_diff: dist(r),
                    max_rel_diff: (0..2).map(|k| (r.a[k] - pv[k]).norm() / pv[k].norm().max(1.0)).fold(0.0, f64::max),
                },
                None => RootComparison {
                    printed: pv,
                    computed: Vec::new(),
                    max_abs_diff: f64::INFINITY,
                    max_rel_diff: f64::INFINITY,
                },
            }
        })
        .collect()
}

/// Solves the published system of reference example `n`, and sets it beside
/// the system assembled from the model parameters.
pub fn reproduce_example(n: u32) -> Result<DiscrepancyReport> {
    let (model, _, printed) = reference_example(n)?;
    let printed_system = QuadraticSystem::printed(&printed);
    let formula_system = QuadraticSystem::formula(&model, JumpMethod::Auto)?;
    let printed_roots = solver::solve_all_roots(&printed_system)?;
    let printed_sol = solver::select_admissible(&printed_roots, &model)?;
    let formula_roots = solver::solve_all_roots(&formula_system)?;
    let (formula_solution, formula_error) = match solver::select_admissible(&formula_roots, &model) {
        Ok(s) => (Some(s), None),
        Err(e) => (None, Some(e.to_string())),
    };

    let mut coefficients = Vec::new();
    for i in 0..2 {
        let gamma = model.regimes[i].gamma;
        let closed = levy::integral_closed_form(&model.levy, gamma).ok().map(|j| j.value);
        let quad = levy::integral_quadrature(&model.levy, gamma, DEFAULT_TOL)?.value;
        let formula_b = formula_system.b[i];
        let without_jump = formula_b - closed.unwrap_or(quad);
        let implied = printed.b[i] - without_jump;
        let matches = jump_candidates(&model.levy, gamma)?
            .into_iter()
            .filter(|(_, v)| (v - implied).abs() <= PRINTED_MATCH_TOL)
            .map(|(name, _)| name.to_string())
            .collect();
        coefficients.push(CoefficientRow {
            regime: i + 1,
            printed_b: printed.b[i],
            formula_b,
            quadrature_b: without_jump + quad,
            implied_jump: implied,
            jump_closed: closed,
            jump_quadrature: quad,
            matches,
        });
    }
    let rates = (0..2)
        .map(|i| RateRow {
            regime: i + 1,
            printed_yearly: printed.yearly_rates[i],
            computed_yearly: printed_sol.rate_at(1.0, i, Period::Yearly),
            printed_daily: printed.daily_rates[i],
            computed_daily: printed_sol.rate_at(1.0, i, Period::Daily),
            formula_yearly: formula_solution.as_ref().map(|s| s.rate_at(1.0, i, Period::Yearly)),
            formula_daily: formula_solution.as_ref().map(|s| s.rate_at(1.0, i, Period::Daily)),
        })
        .collect();
    Ok(DiscrepancyReport {
        example: n,
        root_comparisons: match_roots(&printed, &printed_roots),
        printed_admissible: printed.admissible,
        computed_admissible: printed_sol.a.clone(),
        rates,
        printed_value_y_coefficient: printed.value_y_coefficient,
        computed_value_y_coefficient: printed_sol.b,
        printed_value_constant: printed.value_constant,
        computed_value_constant: printed_sol.c,
        printed_system,
        formula_system,
        coefficients,
        printed_roots,
        formula_roots,
        formula_solution,
        formula_error,
    })
}

/// Six significant digits.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-5..=9).contains(&exp) {
        let s = format!("{v:.5e}");
        let (mantissa, e) = s.split_once('e').unwrap();
        return format!("{}e{e}", trim_zeros(mantissa));
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn complex6(z: Complex64) -> String {
    if z.im == 0.0 {
        sig6(z.re)
    } else {
        format!("{}{}{}i", sig6(z.re), if z.im < 0.0 { "-" } else { "+" }, sig6(z.im.abs()))
    }
}

impl DiscrepancyReport {
    /// Human-readable table. Published values are shown as printed,
    /// computed ones to six significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Reference example {}", self.example);
        let _ = writeln!(s);
        let _ = writeln!(s, "Linear coefficients b_i");
        let _ = writeln!(s, "{:<7} {:>12} {:>12} {:>12} {:>13}  printed jump term matches", "regime", "printed", "formula", "quadrature", "implied I");
        for c in &self.coefficients {
            let m = if c.matches.is_empty() { "unexplained".to_string() } else { c.matches.join("; ") };
            let _ = writeln!(
                s,
                "{:<7} {:>12} {:>12} {:>12} {:>13}  {}",
                c.regime,
                c.printed_b,
                sig6(c.formula_b),
                sig6(c.quadrature_b),
                sig6(c.implied_jump),
                m
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "Roots of the published system");
        let _ = writeln!(s, "{:<34} {:<34} {:>10}", "printed (A1, A2)", "computed (A1, A2)", "max |d|");
        for r in &self.root_comparisons {
            let printed = format!(
                "({}, {})",
                fmt_printed(r.printed[0]),
                fmt_printed(r.printed[1])
            );
            let computed = if r.computed.is_empty() {
                "-".to_string()
            } else {
                format!("({}, {})", complex6(r.computed[0]), complex6(r.computed[1]))
            };
            let _ = writeln!(s, "{printed:<34} {computed:<34} {:>10}", sig6(r.max_abs_diff));
        }
        let _ = writeln!(
            s,
            "admissible: printed ({}, {}), computed ({}, {})",
            self.printed_admissible[0],
            self.printed_admissible[1],
            sig6(self.computed_admissible[0]),
            sig6(self.computed_admissible[1])
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "Extraction rates per unit price");
        let _ = writeln!(
            s,
            "{:<7} {:>10} {:>10} {:>11} {:>11} {:>10} {:>11}",
            "regime", "yearly", "computed", "daily", "computed", "formula/yr", "formula/day"
        );
        for r in &self.rates {
            let _ = writeln!(
                s,
                "{:<7} {:>10} {:>10} {:>11} {:>11} {:>10} {:>11}",
                r.regime,
                r.printed_yearly,
                sig6(r.computed_yearly),
                r.printed_daily,
                sig6(r.computed_daily),
                r.formula_yearly.map_or("-".into(), sig6),
                r.formula_daily.map_or("-".into(), sig6)
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "Value function V = A(i) x^2 + B y + C");
        let _ = writeln!(
            s,
            "B: printed {}, computed {}; C: printed {}, computed {}",
            self.printed_value_y_coefficient,
            sig6(self.computed_value_y_coefficient),
            self.printed_value_constant,
            sig6(self.computed_value_constant)
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "System assembled from the model parameters");
        let _ = writeln!(
            s,
            "b = ({}, {}); roots:",
            sig6(self.formula_system.b[0]),
            sig6(self.formula_system.b[1])
        );
        for r in &self.formula_roots.roots {
            let _ = writeln!(s, "  ({}, {})", complex6(r.a[0]), complex6(r.a[1]));
        }
        match (&self.formula_solution, &self.formula_error) {
            (Some(sol), _) => {
                let _ = writeln!(s, "admissible: ({}, {})", sig6(sol.a[0]), sig6(sol.a[1]));
                for w in &sol.warnings {
                    let _ = writeln!(s, "warning: {w}");
                }
            }
            (None, Some(e)) => {
                let _ = writeln!(s, "admissible: none ({e})");
            }
            (None, None) => {}
        }
        s
    }
}

fn fmt_printed(z: Complex64) -> String {
    if z.im == 0.0 {
        format!("{}", z.re)
    } else {
        format!("{}{}{}i", z.re, if z.im < 0.0 { "-" } else { "+" }, z.im.abs())
    }
}
