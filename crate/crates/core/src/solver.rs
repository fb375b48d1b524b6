//! The coupled quadratic system for `A(1..m)`, its roots, and the admissible
//! solution.
//!
//! Regime `i` contributes
//!
//! ```text
//! a A(i)² + b_i A(i) + Σ_{j≠i} q_ij A(j) + c = 0,
//! a   = λ²/β,
//! b_i = −r + σ_i² + 2μ_i − λ/β − Σ_{j≠i} q_ij + I(γ_i),
//! c   = 1/(4β),
//! ```
//!
//! where the coupling enters as `Σ q_ij (A(j) − A(i))`, the generator of the
//! regime chain applied to `A`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::levy::{self, JumpIntegral};
use crate::model::{MarketModel, PrintedFixture};
use crate::quad::DEFAULT_TOL;

/// Roots whose imaginary parts satisfy `|Im| ≤ REAL_TOL·(1 + |Re|)` count as real.
pub const REAL_TOL: f64 = 1e-9;
/// Reported roots satisfy every equation to `RESIDUAL_TOL·max(1, ‖A‖)`.
pub const RESIDUAL_TOL: f64 = 1e-9;
/// Roots closer than this (relative) are merged.
pub const DEDUP_TOL: f64 = 1e-7;
/// Number of Newton starts for three or more regimes.
pub const MULTISTART_COUNT: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemMode {
    /// Coefficients assembled from the model parameters.
    Formula,
    /// Coefficients copied verbatim from a [`PrintedFixture`].
    Printed,
}

/// How the jump integral `I(γ)` is obtained when assembling `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpMethod {
    ClosedForm,
    Quadrature,
    /// Closed form where one exists, quadrature otherwise.
    Auto,
}

/// `I(γ_i)` for regime `i`.
pub fn jump_integral(model: &MarketModel, i: usize, method: JumpMethod) -> Result<JumpIntegral> {
    let gamma = model.regimes[i].gamma;
    match method {
        JumpMethod::ClosedForm => levy::integral_closed_form(&model.levy, gamma),
        JumpMethod::Quadrature => levy::integral_quadrature(&model.levy, gamma, DEFAULT_TOL),
        JumpMethod::Auto => match levy::integral_closed_form(&model.levy, gamma) {
            Err(Error::UnsupportedMeasure(_)) => levy::integral_quadrature(&model.levy, gamma, DEFAULT_TOL),
            other => other,
        },
    }
}

/// Linear coefficient `b_i`.
pub fn linear_coefficient(model: &MarketModel, i: usize, method: JumpMethod) -> Result<f64> {
    let reg = &model.regimes[i];
    let c = &model.cost;
    let jump = jump_integral(model, i, method)?.value;
    Ok(-c.r + reg.sigma * reg.sigma + 2.0 * reg.mu - model.lambda / c.beta - model.switch.exit_rate(i) + jump)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSystem {
    pub m: usize,
    /// Quadratic coefficients.
    pub a: Vec<f64>,
    /// Linear coefficients.
    pub b: Vec<f64>,
    /// `cross[i][j]` multiplies `A(j)` in equation `i`; the diagonal is zero.
    pub cross: Vec<Vec<f64>>,
    pub c: f64,
    pub mode: SystemMode,
}

impl QuadraticSystem {
    /// Assembles the system from model parameters.
    pub fn formula(model: &MarketModel, method: JumpMethod) -> Result<Self> {
        let m = model.regime_count();
        let beta = model.cost.beta;
        let b = (0..m).map(|i| linear_coefficient(model, i, method)).collect::<Result<Vec<_>>>()?;
        let cross = (0..m)
            .map(|i| (0..m).map(|j| if i == j { 0.0 } else { model.switch.rate(i, j) }).collect())
            .collect();
        Ok(Self {
            m,
            a: vec![model.lambda * model.lambda / beta; m],
            b,
            cross,
            c: 1.0 / (4.0 * beta),
            mode: SystemMode::Formula,
        })
    }

    /// The literal two-regime system of a reference example.
    pub fn printed(fixture: &PrintedFixture) -> Self {
        Self {
            m: 2,
            a: vec![fixture.a; 2],
            b: fixture.b.to_vec(),
            cross: vec![vec![0.0, fixture.cross[0]], vec![fixture.cross[1], 0.0]],
            c: fixture.c,
            mode: SystemMode::Printed,
        }
    }

    /// Residual of each equation at `A`.
    pub fn residuals(&self, a: &[Complex64]) -> Vec<Complex64> {
        (0..self.m)
            .map(|i| {
                let coupling: Complex64 =
                    (0..self.m).filter(|&j| j != i).map(|j| a[j] * self.cross[i][j]).sum();
                a[i] * a[i] * self.a[i] + a[i] * self.b[i] + coupling + self.c
            })
            .collect()
    }

    pub fn max_residual(&self, a: &[Complex64]) -> f64 {
        self.residuals(a).iter().map(|r| r.norm()).fold(0.0, f64::max)
    }

    fn jacobian(&self, a: &[Complex64]) -> DMatrix<Complex64> {
        DMatrix::from_fn(self.m, self.m, |i, j| {
            if i == j {
                a[i] * (2.0 * self.a[i]) + self.b[i]
            } else {
                Complex64::new(self.cross[i][j], 0.0)
            }
        })
    }

    fn is_linear(&self) -> bool {
        self.a.iter().all(|&a| a == 0.0)
    }
}

/// One solution of the system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootVector {
    #[serde(rename = "A")]
    pub a: Vec<Complex64>,
    /// Largest absolute equation residual.
    pub residual: f64,
}

impl RootVector {
    pub fn norm(&self) -> f64 {
        self.a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_real(&self) -> bool {
        self.a.iter().all(|z| z.im.abs() <= REAL_TOL * (1.0 + z.re.abs()))
    }

    pub fn real_parts(&self) -> Vec<f64> {
        self.a.iter().map(|z| z.re).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootSet {
    /// Sorted by `Re A(1)`, then `Im A(1)`.
    pub roots: Vec<RootVector>,
    pub warnings: Vec<String>,
}

/// Every root of the system.
///
/// Two regimes: `A(2)` is eliminated through equation 1 and the resulting
/// quartic in `A(1)` is solved by companion-matrix eigenvalues, then each
/// pair is polished by Newton on the full system. One regime, or a linear
/// system: direct formulas. Three or more: multistart Newton with deflation,
/// which returns real roots only.
pub fn solve_all_roots(sys: &QuadraticSystem) -> Result<RootSet> {
    if sys.m == 0 {
        return Err(Error::DegenerateSystem("no regimes".into()));
    }
    let mut warnings = Vec::new();
    let mut candidates = if sys.is_linear() {
        solve_linear(sys)?.into_iter().collect()
    } else if sys.m == 1 {
        quadratic_roots(
            Complex64::new(sys.a[0], 0.0),
            Complex64::new(sys.b[0], 0.0),
            Complex64::new(sys.c, 0.0),
        )
        .into_iter()
        .map(|z| vec![z])
        .collect()
    } else if sys.m == 2 {
        if sys.cross[0][1] == 0.0 {
            warnings.push("cross[1][2] = 0: solved equation by equation".to_string());
            triangular_pairs(sys)
        } else {
            eliminated_pairs(sys)?
        }
    } else {
        multistart(sys, &mut warnings)?
    };
    for a in &mut candidates {
        newton_polish(sys, a);
    }
    let mut roots: Vec<RootVector> = Vec::new();
    for a in candidates {
        let residual = sys.max_residual(&a);
        let scale = a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt().max(1.0);
        if !residual.is_finite() {
            continue;
        }
        if residual > RESIDUAL_TOL * scale {
            warnings.push(format!("discarded candidate with residual {residual:e}"));
            continue;
        }
        let dup = roots.iter().any(|r| {
            let d = r.a.iter().zip(&a).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>().sqrt();
            d <= DEDUP_TOL * scale
        });
        if !dup {
            roots.push(RootVector { a, residual });
        }
    }
    roots.sort_by(|p, q| p.a[0].re.total_cmp(&q.a[0].re).then(p.a[0].im.total_cmp(&q.a[0].im)));
    Ok(RootSet { roots, warnings })
}

/// Linear system `b_i A(i) + Σ q_ij A(j) + c = 0` (all `a_i = 0`).
fn solve_linear(sys: &QuadraticSystem) -> Result<Vec<Vec<Complex64>>> {
    let m = sys.m;
    let mat = DMatrix::from_fn(m, m, |i, j| if i == j { sys.b[i] } else { sys.cross[i][j] });
    let rhs = DVector::from_element(m, -sys.c);
    let sol = mat
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::DegenerateSystem("linear system is singular".into()))?;
    Ok(vec![sol.iter().map(|&v| Complex64::new(v, 0.0)).collect()])
}

/// Roots of `a z² + b z + c`, avoiding cancellation. Linear when `a = 0`.
pub fn quadratic_roots(a: Complex64, b: Complex64, c: Complex64) -> Vec<Complex64> {
    if a == Complex64::new(0.0, 0.0) {
        return if b.norm() > 0.0 { vec![-c / b] } else { Vec::new() };
    }
    let disc = (b * b - a * c * 4.0).sqrt();
    let plus = b + disc;
    let minus = b - disc;
    let q = if plus.norm() >= minus.norm() { plus * -0.5 } else { minus * -0.5 };
    if q.norm() == 0.0 {
        return vec![Complex64::new(0.0, 0.0); 2];
    }
    vec![q / a, c / q]
}

fn triangular_pairs(sys: &QuadraticSystem) -> Vec<Vec<Complex64>> {
    let re = |v: f64| Complex64::new(v, 0.0);
    let mut out = Vec::new();
    for a1 in quadratic_roots(re(sys.a[0]), re(sys.b[0]), re(sys.c)) {
        let constant = a1 * sys.cross[1][0] + sys.c;
        for a2 in quadratic_roots(re(sys.a[1]), re(sys.b[1]), constant) {
            out.push(vec![a1, a2]);
        }
    }
    out
}

/// Real polynomial coefficients, lowest degree first.
fn poly_mul(p: &[f64], q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len() + q.len() - 1];
    for (i, &pi) in p.iter().enumerate() {
        for (j, &qj) in q.iter().enumerate() {
            out[i + j] += pi * qj;
        }
    }
    out
}

/// Coefficients (lowest first) of the quartic in `A(1)` obtained by
/// substituting `A(2) = −(a₁A(1)² + b₁A(1) + c)/q₁₂` into equation 2.
pub fn eliminated_quartic(sys: &QuadraticSystem) -> Vec<f64> {
    let q12 = sys.cross[0][1];
    let p = [-sys.c / q12, -sys.b[0] / q12, -sys.a[0] / q12];
    let pp = poly_mul(&p, &p);
    let mut out = vec![0.0; 5];
    for (k, v) in pp.iter().enumerate() {
        out[k] += sys.a[1] * v;
    }
    for (k, v) in p.iter().enumerate() {
        out[k] += sys.b[1] * v;
    }
    out[1] += sys.cross[1][0];
    out[0] += sys.c;
    out
}

/// Roots of a real polynomial (lowest degree first) via the eigenvalues of
/// the companion matrix, after rescaling the variable so that the monic
/// coefficients are of order one.
pub fn polynomial_roots(coeffs: &[f64]) -> Vec<Complex64> {
    let mut coeffs = coeffs.to_vec();
    while coeffs.last() == Some(&0.0) {
        coeffs.pop();
    }
    let d = coeffs.len().saturating_sub(1);
    if d == 0 {
        return Vec::new();
    }
    let lead = coeffs[d];
    let scale = (0..d)
        .map(|k| (coeffs[k] / lead).abs().powf(1.0 / (d - k) as f64))
        .fold(0.0, f64::max);
    let scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
    // z = scale·t: monic in t with coefficients coeffs[k]·scale^(k−d)/lead.
    let monic: Vec<f64> = (0..d).map(|k| coeffs[k] / lead * scale.powi(k as i32 - d as i32)).collect();
    let companion = DMatrix::from_fn(d, d, |i, j| {
        if j == d - 1 {
            -monic[i]
        } else if i == j + 1 {
            1.0
        } else {
            0.0
        }
    });
    companion.complex_eigenvalues().iter().map(|t| t * scale).collect()
}

fn eliminated_pairs(sys: &QuadraticSystem) -> Result<Vec<Vec<Complex64>>> {
    let quartic = eliminated_quartic(sys);
    if quartic.iter().all(|&c| c == 0.0) {
        return Err(Error::DegenerateSystem("eliminated polynomial vanishes identically".into()));
    }
    let q12 = sys.cross[0][1];
    Ok(polynomial_roots(&quartic)
        .into_iter()
        .map(|a1| {
            let a2 = -(a1 * a1 * sys.a[0] + a1 * sys.b[0] + sys.c) / q12;
            vec![a1, a2]
        })
        .collect())
}

/// Plain Newton on the full system; keeps the best iterate.
fn newton_polish(sys: &QuadraticSystem, a: &mut Vec<Complex64>) {
    let mut best = sys.max_residual(a);
    for _ in 0..20 {
        if !(best > 0.0) {
            return;
        }
        let f = DVector::from_vec(sys.residuals(a));
        let Some(step) = sys.jacobian(a).lu().solve(&f) else { return };
        let trial: Vec<Complex64> = a.iter().zip(step.iter()).map(|(x, s)| x - s).collect();
        let r = sys.max_residual(&trial);
        if r.is_finite() && r < best {
            *a = trial;
            best = r;
        } else {
            return;
        }
    }
}

/// Real root search for three or more regimes: damped Newton from starts
/// along the `λ = 0` solution direction, log-spaced in magnitude, with
/// deflation of roots already found.
fn multistart(sys: &QuadraticSystem, warnings: &mut Vec<String>) -> Result<Vec<Vec<Complex64>>> {
    let m = sys.m;
    let linear = QuadraticSystem { a: vec![0.0; m], ..sys.clone() };
    let seed: Vec<f64> = match solve_linear(&linear) {
        Ok(v) => v[0].iter().map(|z| z.re).collect(),
        Err(_) => vec![1.0; m],
    };
    let seed_norm = seed.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dir: Vec<f64> = if seed_norm > 0.0 { seed.iter().map(|v| v / seed_norm).collect() } else { vec![1.0; m] };
    let amax = sys.a.iter().copied().fold(0.0, f64::max);
    let big = if amax > 0.0 {
        (0..m)
            .map(|i| (sys.b[i].abs() + sys.cross[i].iter().map(|q| q.abs()).sum::<f64>()) / sys.a[i].max(1e-300))
            .fold(0.0, f64::max)
            + (sys.c / amax).sqrt()
    } else {
        seed_norm
    };
    let lo = (1e-3 * seed_norm.max(1.0)).ln();
    let hi = (10.0 * big.max(seed_norm).max(1.0)).ln();

    let mut found: Vec<Vec<f64>> = Vec::new();
    let mut exhausted = 0usize;
    // Seed plus a low-discrepancy cover of the box: per component, a
    // log-spaced magnitude in [e^lo, e^hi] and a sign, both from Weyl
    // sequences with distinct irrational steps.
    let mut starts: Vec<Vec<f64>> = vec![seed.clone()];
    let weyl = |k: usize, j: usize, salt: f64| ((k + 1) as f64 * (0.618_033_988_749_894_9 + salt * (j as f64 + 1.0).sqrt())).fract();
    for k in 0..MULTISTART_COUNT - 1 {
        let start = (0..m)
            .map(|j| {
                let mag = (lo + (hi - lo) * weyl(k, j, 0.414_213_562_373_095)).exp();
                let positive = weyl(k, j, 0.732_050_807_568_877) < 0.5 + 0.25 * dir[j].signum();
                if positive { mag } else { -mag }
            })
            .collect();
        starts.push(start);
    }
    for start in starts {
        match deflated_newton(sys, start, &found) {
            Some(root) => {
                let scale = root.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
                let dup = found.iter().any(|r| {
                    r.iter().zip(&root).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt() <= DEDUP_TOL * scale
                });
                if !dup {
                    found.push(root);
                }
            }
            None => exhausted += 1,
        }
    }
    if exhausted > 0 {
        warnings.push(format!(
            "Newton budget exhausted for {exhausted} of {MULTISTART_COUNT} starts; root set may be partial"
        ));
    }
    Ok(found.into_iter().map(|r| r.into_iter().map(|v| Complex64::new(v, 0.0)).collect()).collect())
}

fn real_residuals(sys: &QuadraticSystem, a: &[f64]) -> DVector<f64> {
    DVector::from_fn(sys.m, |i, _| {
        let coupling: f64 = (0..sys.m).filter(|&j| j != i).map(|j| sys.cross[i][j] * a[j]).sum();
        sys.a[i] * a[i] * a[i] + sys.b[i] * a[i] + coupling + sys.c
    })
}

fn deflated_newton(sys: &QuadraticSystem, mut a: Vec<f64>, found: &[Vec<f64>]) -> Option<Vec<f64>> {
    let m = sys.m;
    // Deflation factor μ(A) = Π (1/‖A − r‖² + 1).
    let mu = |a: &[f64]| -> f64 {
        found
            .iter()
            .map(|r| 1.0 / r.iter().zip(a).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() + 1.0)
            .product()
    };
    let merit = |a: &[f64]| mu(a) * real_residuals(sys, a).norm();
    for _ in 0..100 {
        let f = real_residuals(sys, &a);
        let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
        if f.amax() <= 1e-3 * RESIDUAL_TOL * scale {
            return Some(a);
        }
        let jac = DMatrix::from_fn(m, m, |i, j| if i == j { 2.0 * sys.a[i] * a[i] + sys.b[i] } else { sys.cross[i][j] });
        let d_f = -jac.lu().solve(&f)?;
        // Newton step for μF: d = d_F / (1 − ∇log μ · d_F).
        let mut dot = 0.0;
        for r in found {
            let diff: Vec<f64> = a.iter().zip(r).map(|(p, q)| p - q).collect();
            let n2: f64 = diff.iter().map(|v| v * v).sum();
            let mk = 1.0 / n2 + 1.0;
            let grad_dot: f64 = diff.iter().zip(d_f.iter()).map(|(g, d)| -2.0 * g / (n2 * n2) * d).sum();
            dot += grad_dot / mk;
        }
        let denom = 1.0 - dot;
        let step: Vec<f64> = if denom.abs() > 1e-12 { d_f.iter().map(|d| d / denom).collect() } else { d_f.iter().copied().collect() };
        let current = merit(&a);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = a.iter().zip(&step).map(|(x, s)| x + alpha * s).collect();
            let mt = merit(&trial);
            if mt.is_finite() && mt < current {
                a = trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            let f = real_residuals(sys, &a);
            let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
            return (f.amax() <= RESIDUAL_TOL * scale).then_some(a);
        }
    }
    None
}

/// The admissible value-function coefficients and the data needed to
/// evaluate `V` and the feedback policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    /// `−θ`.
    #[serde(rename = "B")]
    pub b: f64,
    /// `−K/r`.
    #[serde(rename = "C")]
    pub c: f64,
    pub lambda: f64,
    pub beta: f64,
    pub theta: f64,
    #[serde(rename = "K")]
    pub big_k: f64,
    pub r: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Period {
    Yearly,
    Daily,
}

impl Solution {
    /// Wraps an arbitrary `A` with the model's cost data. No admissibility check.
    pub fn from_coefficients(model: &MarketModel, a: Vec<f64>) -> Self {
        let c = &model.cost;
        Self {
            a,
            b: -c.theta,
            c: -c.big_k / c.r,
            lambda: model.lambda,
            beta: c.beta,
            theta: c.theta,
            big_k: c.big_k,
            r: c.r,
            warnings: Vec::new(),
        }
    }

    /// `A(i) ≤ 1/(2λ)` for every regime, i.e. nonnegative extraction at nonnegative prices.
    pub fn is_admissible(&self) -> bool {
        self.a.iter().all(|&a| a.is_finite() && (self.lambda == 0.0 || 2.0 * self.lambda * a <= 1.0))
    }

    /// `V(x, y, i) = A(i)x² − θy − K/r`; `i` is 0-based.
    pub fn value_at(&self, x: f64, y: f64, i: usize) -> f64 {
        self.a[i] * x * x + self.b * y + self.c
    }

    /// Feedback gain `κ_i = (1 − 2λA(i))/(2β)`, so `u* = κ_i x`.
    pub fn feedback_gain(&self, i: usize) -> f64 {
        (1.0 - 2.0 * self.lambda * self.a[i]) / (2.0 * self.beta)
    }

    /// Optimal extraction rate at price `x` in regime `i`.
    pub fn rate_at(&self, x: f64, i: usize, period: Period) -> f64 {
        let yearly = self.feedback_gain(i) * x;
        match period {
            Period::Yearly => yearly,
            Period::Daily => yearly / 365.0,
        }
    }
}

/// Picks the admissible real root. Several survivors: the smallest
/// Euclidean norm wins and a warning lists all of them.
pub fn select_admissible(roots: &RootSet, model: &MarketModel) -> Result<Solution> {
    let lambda = model.lambda;
    let survivors: Vec<&RootVector> = roots
        .roots
        .iter()
        .filter(|r| r.is_real() && r.a.iter().all(|z| lambda == 0.0 || 2.0 * lambda * z.re <= 1.0))
        .collect();
    let Some(best) = survivors.iter().min_by(|p, q| p.norm().total_cmp(&q.norm())) else {
        return Err(Error::NoAdmissibleRoot { roots: roots.roots.clone() });
    };
    let mut sol = Solution::from_coefficients(model, best.real_parts());
    sol.warnings.extend(roots.warnings.iter().cloned());
    if survivors.len() > 1 {
        let listed: Vec<String> = survivors
            .iter()
            .map(|r| format!("({})", r.real_parts().iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(", ")))
            .collect();
        sol.warnings.push(format!(
            "{} admissible roots {}; chose the smallest norm",
            survivors.len(),
            listed.join(" ")
        ));
    }
    Ok(sol)
}

/// Builds, solves and selects in one go. Printed mode needs the fixture.
pub fn solve(model: &MarketModel, mode: SystemMode, printed: Option<&PrintedFixture>) -> Result<(QuadraticSystem, RootSet, Solution)> {
    let sys = match (mode, printed) {
        (SystemMode::Formula, _) => QuadraticSystem::formula(model, JumpMethod::Auto)?,
        (SystemMode::Printed, Some(p)) => QuadraticSystem::printed(p),
        (SystemMode::Printed, None) => {
            return Err(Error::InvalidArgument("printed mode requires a reference example".into()))
        }
    };
    let roots = solve_all_roots(&sys)?;
    let sol = select_admissible(&roots, model)?;
    Ok((sys, roots, sol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy::LevyMeasureSpec;
    use crate::model::{reference_example, CostParams, RegimeParams, SwitchGenerator};
    use proptest::prelude::*;

    fn close_rel(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn formula_coefficients() {
        let (m1, _, _) = reference_example(1).unwrap();
        let sys = QuadraticSystem::formula(&m1, JumpMethod::ClosedForm).unwrap();
        assert!((sys.a[0] - 1e-5).abs() < 1e-20);
        assert_eq!(sys.c, 2.5);
        assert!((sys.b[0] - -0.216_658_609_176_913_05).abs() < 1e-14, "{}", sys.b[0]);
        assert!((sys.b[1] - -0.594_054_467_059_426_94).abs() < 1e-14, "{}", sys.b[1]);
        assert_eq!(sys.cross[0][1], 0.3);
        assert_eq!(sys.cross[1][0], 0.5);
        let (m2, _, _) = reference_example(2).unwrap();
        let sys = QuadraticSystem::formula(&m2, JumpMethod::Auto).unwrap();
        assert!((sys.b[0] - -0.249_032).abs() < 1e-14);
        assert!((sys.b[1] - -0.6382).abs() < 1e-14);
    }

    #[test]
    fn printed_example_one_roots() {
        let (model, _, fx) = reference_example(1).unwrap();
        let set = solve_all_roots(&QuadraticSystem::printed(&fx)).unwrap();
        assert_eq!(set.roots.len(), 4);
        let real: Vec<_> = set.roots.iter().filter(|r| r.is_real()).collect();
        assert_eq!(real.len(), 2);
        assert!(close_rel(real[0].a[0].re, 59.178, 1e-3) && close_rel(real[0].a[1].re, 47.0599, 1e-3));
        assert!(close_rel(real[1].a[0].re, 4809.48, 1e-3) && close_rel(real[1].a[1].re, 3732.01, 1e-3));
        let sol = select_admissible(&set, &model).unwrap();
        assert!((sol.rate_at(1.0, 0, Period::Yearly) - 4.40822).abs() < 1e-4);
        assert!((sol.rate_at(1.0, 1, Period::Daily) - 0.0124093).abs() < 1e-6);
        assert!(sol.warnings.is_empty());
    }

    #[test]
    fn formula_example_one_roots() {
        // Independent reference: quartic roots by mpmath polyroots at 30 digits.
        let (model, _, _) = reference_example(1).unwrap();
        let (_, set, sol) = solve(&model, SystemMode::Formula, None).unwrap();
        assert_eq!(set.roots.len(), 4);
        let r = &set.roots[0];
        assert!((r.a[0].re - -2_580.494_361_261_703_7).abs() < 1e-7);
        assert!((r.a[1].re - -2_093.919_435_939_539_4).abs() < 1e-7);
        assert!((sol.a[0] - -109.393_742_913_978_64).abs() < 1e-9);
        assert!((sol.a[1] - -87.735_887_007_622_32).abs() < 1e-9);
        assert!(sol.warnings.iter().any(|w| w.contains("2 admissible roots")));
    }

    #[test]
    fn formula_example_two_root() {
        let (model, _, _) = reference_example(2).unwrap();
        let (_, _, sol) = solve(&model, SystemMode::Formula, None).unwrap();
        assert!((sol.a[0] - 452.660_133_621_780_92).abs() < 1e-8);
        assert!((sol.a[1] - 360.592_821_434_648_16).abs() < 1e-8);
    }

    #[test]
    fn all_complex_has_no_admissible_root() {
        let sys = QuadraticSystem { m: 1, a: vec![1.0], b: vec![0.0], cross: vec![vec![0.0]], c: 1.0, mode: SystemMode::Formula };
        let set = solve_all_roots(&sys).unwrap();
        assert_eq!(set.roots.len(), 2);
        let (model, _, _) = reference_example(1).unwrap();
        assert!(matches!(select_admissible(&set, &model), Err(Error::NoAdmissibleRoot { .. })));
    }

    #[test]
    fn triangular_fallback() {
        let sys = QuadraticSystem {
            m: 2,
            a: vec![1.0, 1.0],
            b: vec![-3.0, -5.0],
            cross: vec![vec![0.0, 0.0], vec![1.0, 0.0]],
            c: 2.0,
            mode: SystemMode::Formula,
        };
        let set = solve_all_roots(&sys).unwrap();
        assert_eq!(set.roots.len(), 4);
        assert!(set.warnings.iter().any(|w| w.contains("equation by equation")));
        for r in &set.roots {
            assert!(r.residual <= 1e-12);
        }
    }

    #[test]
    fn solution_evaluation() {
        let (model, _, _) = reference_example(1).unwrap();
        let sol = Solution::from_coefficients(&model, vec![59.178, 47.0599]);
        assert_eq!(sol.value_at(0.0, 0.0, 0), -500.0);
        assert_eq!(sol.value_at(2.0, 10.0, 1), sol.value_at(-2.0, 10.0, 1));
        assert!((sol.value_at(1.0, 100.0, 0) - (59.178 - 1.0 - 500.0)).abs() < 1e-12);
        let mut free = model.clone();
        free.lambda = 0.0;
        let sol = Solution::from_coefficients(&free, vec![123.0, -7.0]);
        assert_eq!(sol.rate_at(3.0, 0, Period::Yearly), 15.0);
        assert_eq!(sol.rate_at(3.0, 1, Period::Yearly), 15.0);
    }

    #[test]
    fn solution_json_names() {
        let (model, _, _) = reference_example(1).unwrap();
        let sol = Solution::from_coefficients(&model, vec![1.0, 2.0]);
        let v = serde_json::to_value(&sol).unwrap();
        for key in ["A", "B", "C", "lambda", "beta", "theta", "K", "r", "warnings"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    /// Finite-difference response of the admissible root to a 1e-8 bump of
    /// each parameter, against the implicit-function prediction
    /// `ΔA = −J⁻¹ ΔF(A)` built from the coefficient changes.
    #[test]
    fn continuity_matches_linear_response() {
        type Bump = fn(&mut MarketModel);
        let bumps: [(&str, Bump); 8] = [
            ("mu1", |m| m.regimes[0].mu += 1e-8),
            ("mu2", |m| m.regimes[1].mu += 1e-8),
            ("sigma1", |m| m.regimes[0].sigma += 1e-8),
            ("gamma2", |m| m.regimes[1].gamma += 1e-8),
            ("beta", |m| m.cost.beta += 1e-8),
            ("r", |m| m.cost.r += 1e-8),
            ("lambda", |m| m.lambda += 1e-8),
            ("q12", |m| {
                let mut rows = m.switch.rows().to_vec();
                rows[0][1] += 1e-8;
                rows[0][0] -= 1e-8;
                m.switch = SwitchGenerator::new(rows);
            }),
        ];
        for n in [1, 2] {
            let (model, _, _) = reference_example(n).unwrap();
            let (sys, _, base) = solve(&model, SystemMode::Formula, None).unwrap();
            let a: Vec<Complex64> = base.a.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            let jac = sys.jacobian(&a).map(|z| z.re);
            for (name, bump) in bumps {
                let mut moved_model = model.clone();
                bump(&mut moved_model);
                let (moved_sys, _, moved) = solve(&moved_model, SystemMode::Formula, None).unwrap();
                let df = DVector::from_fn(2, |i, _| {
                    let j = 1 - i;
                    (moved_sys.a[i] - sys.a[i]) * base.a[i] * base.a[i]
                        + (moved_sys.b[i] - sys.b[i]) * base.a[i]
                        + (moved_sys.cross[i][j] - sys.cross[i][j]) * base.a[j]
                        + (moved_sys.c - sys.c)
                });
                let predicted = -jac.clone().lu().solve(&df).unwrap();
                for i in 0..2 {
                    let fd = moved.a[i] - base.a[i];
                    assert!(
                        (fd - predicted[i]).abs() <= 1e-2 * predicted[i].abs() + 1e-9,
                        "example {n}, {name}, A{}: {fd:e} vs {:e}",
                        i + 1,
                        predicted[i]
                    );
                    assert!(fd.abs() <= 1e-4 * base.a[i].abs(), "example {n}, {name}: {fd:e}");
                }
            }
        }
    }

    fn three_regime_model(lambda: f64) -> MarketModel {
        MarketModel {
            regimes: vec![
                RegimeParams { mu: 0.01, sigma: 0.2, gamma: 0.02 },
                RegimeParams { mu: -0.05, sigma: 0.25, gamma: 0.01 },
                RegimeParams { mu: 0.0, sigma: 0.1, gamma: 0.03 },
            ],
            switch: SwitchGenerator::new(vec![
                vec![-0.3, 0.2, 0.1],
                vec![0.4, -0.5, 0.1],
                vec![0.2, 0.2, -0.4],
            ]),
            levy: LevyMeasureSpec::ExponentialFinite { eta: 1.0 },
            cost: CostParams { beta: 0.1, theta: 0.01, big_k: 10.0, r: 0.3 },
            lambda,
            control_bounds: None,
        }
    }

    #[test]
    fn multistart_finds_admissible_root_near_linear_solution() {
        let model = three_regime_model(0.001);
        let sys = QuadraticSystem::formula(&model, JumpMethod::Auto).unwrap();
        let set = solve_all_roots(&sys).unwrap();
        assert!(!set.roots.is_empty());
        for r in &set.roots {
            assert!(r.residual <= RESIDUAL_TOL * r.norm().max(1.0));
        }
        let sol = select_admissible(&set, &model).unwrap();
        let lin = solve_all_roots(&QuadraticSystem::formula(&three_regime_model(0.0), JumpMethod::Auto).unwrap()).unwrap();
        for i in 0..3 {
            assert!((sol.a[i] - lin.roots[0].a[i].re).abs() < 0.05 * lin.roots[0].a[i].re.abs());
        }
        // Deterministic regardless of how often it runs.
        assert_eq!(solve_all_roots(&sys).unwrap(), set);
    }

    #[test]
    fn decoupled_three_regimes_recover_every_real_root() {
        // Each row x² − 3x + 2 = 0 independently, so 2³ real roots.
        let sys = QuadraticSystem {
            m: 3,
            a: vec![1.0; 3],
            b: vec![-3.0; 3],
            cross: vec![vec![0.0; 3]; 3],
            c: 2.0,
            mode: SystemMode::Formula,
        };
        let set = solve_all_roots(&sys).unwrap();
        assert_eq!(set.roots.len(), 8, "{:?}", set.roots);
    }

    #[test]
    fn linear_single_regime_closed_form() {
        let mut model = three_regime_model(0.0);
        model.regimes.truncate(1);
        model.switch = SwitchGenerator::new(vec![vec![0.0]]);
        let sys = QuadraticSystem::formula(&model, JumpMethod::Auto).unwrap();
        let set = solve_all_roots(&sys).unwrap();
        assert_eq!(set.roots.len(), 1);
        let reg = model.regimes[0];
        let jump = levy::integral_closed_form(&model.levy, reg.gamma).unwrap().value;
        let expect = 1.0 / (4.0 * 0.1 * (0.3 - reg.sigma * reg.sigma - 2.0 * reg.mu - jump));
        assert!((set.roots[0].a[0].re - expect).abs() <= 1e-12 * expect.abs());
    }

    proptest! {
        #[test]
        fn two_regime_roots_satisfy_the_system(
            a in 1e-7f64..1e-2,
            b1 in -2.0f64..0.5,
            b2 in -2.0f64..0.5,
            q12 in 0.01f64..2.0,
            q21 in 0.0f64..2.0,
            c in 0.1f64..10.0,
        ) {
            let sys = QuadraticSystem {
                m: 2,
                a: vec![a; 2],
                b: vec![b1, b2],
                cross: vec![vec![0.0, q12], vec![q21, 0.0]],
                c,
                mode: SystemMode::Formula,
            };
            let set = solve_all_roots(&sys).unwrap();
            prop_assert!(set.roots.len() <= 4);
            for r in &set.roots {
                prop_assert!(r.residual <= RESIDUAL_TOL * r.norm().max(1.0));
                prop_assert!(sys.max_residual(&r.a) == r.residual);
            }
        }

        #[test]
        fn linear_systems_give_one_root(
            b1 in -2.0f64..-0.5,
            b2 in -2.0f64..-0.5,
            q12 in 0.0f64..0.4,
            q21 in 0.0f64..0.4,
        ) {
            let sys = QuadraticSystem {
                m: 2,
                a: vec![0.0; 2],
                b: vec![b1, b2],
                cross: vec![vec![0.0, q12], vec![q21, 0.0]],
                c: 2.5,
                mode: SystemMode::Formula,
            };
            let set = solve_all_roots(&sys).unwrap();
            prop_assert_eq!(set.roots.len(), 1);
            // Cramer's rule as the independent check.
            let det = b1 * b2 - q12 * q21;
            let a1 = (-2.5 * b2 + 2.5 * q12) / det;
            let a2 = (-2.5 * b1 + 2.5 * q21) / det;
            prop_assert!((set.roots[0].a[0].re - a1).abs() <= 1e-12 * a1.abs().max(1.0));
            prop_assert!((set.roots[0].a[1].re - a2).abs() <= 1e-12 * a2.abs().max(1.0));
        }

        #[test]
        fn admissible_rates_are_nonnegative(n in 1u32..=2, x in 0.0f64..100.0) {
            let (model, _, fx) = reference_example(n).unwrap();
            for mode in [SystemMode::Formula, SystemMode::Printed] {
                let (_, _, sol) = solve(&model, mode, Some(&fx)).unwrap();
                for i in 0..2 {
                    prop_assert!(sol.rate_at(x, i, Period::Yearly) >= 0.0);
                }
            }
        }
    }
}
