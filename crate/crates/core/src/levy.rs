//! Lévy-measure integrals and jump sampling.
//!
//! The jump integral entering the quadratic system is
//!
//! ```text
//! I(γ) = ∫ ((1 + γz)² − 1 − 1{|z|<1} 2γz) ν(dz)
//! ```
//!
//! On `|z| < 1` the integrand is rewritten exactly as `γ² z² ν(dz)`, so the
//! quadrature never subtracts nearly equal numbers and the `1/z²` singularity
//! of the infinite-activity measure disappears. For symmetric measures the
//! panels at `z` and `−z` are summed pointwise, which cancels the odd `2γz`
//! part exactly (principal value).

use std::f64::consts::E;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::{self, DEFAULT_MAX_PANELS, DEFAULT_TOL};

/// Knot count of the inverse-CDF table for the symmetric measure.
pub const TABLE_KNOTS: usize = 4096;
/// Upper end of the inverse-CDF table; the mass beyond it is below 1e-24.
pub const TABLE_Z_MAX: f64 = 50.0;
const FAST_Z_MAX: f64 = 0.3;
const FAST_CELLS: usize = 1 << 16;

/// Jump measure `ν` of the driving Lévy process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LevyMeasureSpec {
    /// `ν(dz) = η e^{−ηz} dz` on `z > 0`: finite activity, total mass 1.
    ExponentialFinite { eta: f64 },
    /// `ν(dz) = e^{−|z|} / z² dz` on `z ≠ 0`: infinite activity.
    SymmetricInfinite,
    /// Piecewise-linear density through `(z[k], density[k])`, zero outside
    /// `[z[0], z[n−1]]`. Finite activity; closed forms are unavailable.
    Tabulated { z: Vec<f64>, density: Vec<f64> },
    /// No jumps.
    None,
}

impl LevyMeasureSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::ExponentialFinite { .. } => "exponential_finite",
            Self::SymmetricInfinite => "symmetric_infinite",
            Self::Tabulated { .. } => "tabulated",
            Self::None => "none",
        }
    }

    pub fn is_finite_activity(&self) -> bool {
        !matches!(self, Self::SymmetricInfinite)
    }

    /// Lebesgue density of `ν` at `z`.
    pub fn density(&self, z: f64) -> f64 {
        match self {
            Self::ExponentialFinite { eta } => {
                if z > 0.0 {
                    eta * (-eta * z).exp()
                } else {
                    0.0
                }
            }
            Self::SymmetricInfinite => {
                if z == 0.0 {
                    0.0
                } else {
                    (-z.abs()).exp() / (z * z)
                }
            }
            Self::Tabulated { z: knots, density } => interp_linear(knots, density, z),
            Self::None => 0.0,
        }
    }

    /// Breakpoints (finite) to hand to the quadrature for the region `[lo, hi]`.
    fn breakpoints(&self, lo: f64, hi: f64, extra: &[f64]) -> Vec<f64> {
        let mut pts = vec![lo, hi];
        pts.extend(extra.iter().copied().filter(|p| *p > lo && *p < hi));
        if let Self::Tabulated { z, .. } = self {
            pts.extend(z.iter().copied().filter(|p| *p > lo && *p < hi));
        }
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        pts
    }

    /// Support of a tabulated measure.
    fn tabulated_support(&self) -> Option<(f64, f64)> {
        match self {
            Self::Tabulated { z, .. } if !z.is_empty() => Some((z[0], z[z.len() - 1])),
            _ => None,
        }
    }

    /// Integrates `g(z) ν(dz)` over the set `{lo ≤ |z| < hi}`. Symmetric
    /// measures are folded onto `z > 0` by summing `g(z) + g(−z)`, with `g`
    /// returned as `(odd, even)` parts so the odd parts cancel exactly.
    fn integrate_abs_band<G>(&self, g: G, lo: f64, hi: f64, tol: f64) -> Result<quad::Estimate>
    where
        G: Fn(f64) -> (f64, f64),
    {
        let zero = quad::Estimate { value: 0.0, error: 0.0, panels: 0 };
        if !(hi > lo) {
            return Ok(zero);
        }
        match self {
            Self::None => Ok(zero),
            Self::SymmetricInfinite => {
                let rho = |z: f64| self.density(z);
                let folded = |z: f64| {
                    let (odd_p, even_p) = g(z);
                    let (odd_m, even_m) = g(-z);
                    let r = rho(z);
                    (odd_p * r + odd_m * rho(-z)) + (even_p * r + even_m * rho(-z))
                };
                let mut pts = Vec::new();
                if lo > 0.0 {
                    // Decade breakpoints let the adaptive rule resolve the 1/z² growth.
                    let mut p = lo;
                    while p < hi.min(1.0) {
                        pts.push(p);
                        p *= 10.0;
                    }
                } else {
                    pts.push(0.0);
                }
                let upper = if hi.is_finite() { hi } else { 1.0_f64.max(lo) };
                pts.push(upper.min(1.0).max(lo));
                if hi.is_finite() {
                    pts.push(hi);
                }
                pts.sort_by(f64::total_cmp);
                pts.dedup();
                quad::integrate_pieces(folded, &pts, !hi.is_finite(), tol, DEFAULT_MAX_PANELS)
            }
            Self::ExponentialFinite { .. } => {
                let f = |z: f64| {
                    let (o, e) = g(z);
                    (o + e) * self.density(z)
                };
                let mut pts = vec![lo];
                if lo < 1.0 && hi > 1.0 {
                    pts.push(1.0);
                }
                if hi.is_finite() {
                    pts.push(hi);
                }
                quad::integrate_pieces(f, &pts, !hi.is_finite(), tol, DEFAULT_MAX_PANELS)
            }
            Self::Tabulated { .. } => {
                let (s0, s1) = self.tabulated_support().expect("tabulated");
                let f = |z: f64| {
                    let (o, e) = g(z);
                    (o + e) * self.density(z)
                };
                let mut total = quad::Estimate { value: 0.0, error: 0.0, panels: 0 };
                // Positive band [lo, hi) and negative band (−hi, −lo].
                for (a, b) in [(lo, hi), (-hi, -lo)] {
                    let a = a.max(s0);
                    let b = b.min(s1);
                    if b <= a {
                        continue;
                    }
                    let pts = self.breakpoints(a, b, &[-1.0, 0.0, 1.0]);
                    let e = quad::integrate_pieces(&f, &pts, false, tol / 2.0, DEFAULT_MAX_PANELS)?;
                    total.value += e.value;
                    total.error += e.error;
                    total.panels += e.panels;
                }
                Ok(total)
            }
        }
    }

    /// `∫ min(z², 1) ν(dz)`, by quadrature.
    pub fn integrability_mass(&self) -> Result<f64> {
        let inner = self.integrate_abs_band(|z| (0.0, z * z), 0.0, 1.0, DEFAULT_TOL)?;
        let outer = self.integrate_abs_band(|_| (0.0, 1.0), 1.0, f64::INFINITY, DEFAULT_TOL)?;
        Ok(inner.value + outer.value)
    }

    /// Violated invariants, as messages. Empty iff the measure is usable.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            Self::ExponentialFinite { eta } => {
                if !(*eta > 0.0) || !eta.is_finite() {
                    out.push("ExponentialFinite requires finite eta > 0".to_string());
                    return out;
                }
            }
            Self::Tabulated { z, density } => {
                if z.len() < 2 || z.len() != density.len() {
                    out.push("tabulated measure needs >= 2 knots and matching density values".to_string());
                    return out;
                }
                if z.iter().chain(density).any(|v| !v.is_finite()) {
                    out.push("tabulated measure values must be finite".to_string());
                    return out;
                }
                if z.windows(2).any(|w| w[1] <= w[0]) {
                    out.push("tabulated knots must be strictly increasing".to_string());
                }
                if density.iter().any(|d| *d < 0.0) {
                    out.push("tabulated density must be >= 0".to_string());
                }
                if !out.is_empty() {
                    return out;
                }
            }
            Self::SymmetricInfinite | Self::None => {}
        }
        match self.integrability_mass() {
            Ok(v) if v.is_finite() => {}
            Ok(_) | Err(_) => out.push("integrability condition ∫min(z²,1)ν(dz) < ∞ violated".to_string()),
        }
        out
    }
}

fn interp_linear(knots: &[f64], values: &[f64], z: f64) -> f64 {
    let n = knots.len();
    if n < 2 || z < knots[0] || z > knots[n - 1] {
        return 0.0;
    }
    let k = match knots.partition_point(|&p| p <= z) {
        0 => 0,
        p if p >= n => n - 2,
        p => p - 1,
    };
    let w = (z - knots[k]) / (knots[k + 1] - knots[k]);
    values[k] + w * (values[k + 1] - values[k])
}

/// How a [`JumpIntegral`] was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntegralMethod {
    ClosedForm,
    Quadrature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpIntegral {
    pub value: f64,
    pub method: IntegralMethod,
    /// Absolute error bound; `None` for closed forms.
    pub est_error: Option<f64>,
}

/// Closed-form jump integral:
/// exponential `2γ(γ + η(1+η)e^{−η})/η²`, symmetric `2γ²`, none `0`.
pub fn integral_closed_form(measure: &LevyMeasureSpec, gamma: f64) -> Result<JumpIntegral> {
    let value = if gamma == 0.0 {
        0.0
    } else {
        match measure {
            LevyMeasureSpec::ExponentialFinite { eta } => {
                2.0 * gamma * (gamma + eta * (1.0 + eta) * (-eta).exp()) / (eta * eta)
            }
            LevyMeasureSpec::SymmetricInfinite => 2.0 * gamma * gamma,
            LevyMeasureSpec::None => 0.0,
            LevyMeasureSpec::Tabulated { .. } => return Err(Error::UnsupportedMeasure("tabulated")),
        }
    };
    Ok(JumpIntegral { value, method: IntegralMethod::ClosedForm, est_error: None })
}

/// Jump integral by adaptive quadrature, to absolute tolerance `tol`.
pub fn integral_quadrature(measure: &LevyMeasureSpec, gamma: f64, tol: f64) -> Result<JumpIntegral> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be > 0, got {tol}")));
    }
    if gamma == 0.0 || matches!(measure, LevyMeasureSpec::None) {
        return Ok(JumpIntegral { value: 0.0, method: IntegralMethod::Quadrature, est_error: Some(0.0) });
    }
    if let Some(msg) = measure.violations().into_iter().next() {
        return Err(Error::InvalidMeasure(msg));
    }
    // Compensated form on |z| < 1: (1+γz)² − 1 − 2γz = γ²z².
    let small = measure.integrate_abs_band(|z| (0.0, gamma * gamma * z * z), 0.0, 1.0, tol / 2.0)?;
    let large =
        measure.integrate_abs_band(|z| (2.0 * gamma * z, gamma * gamma * z * z), 1.0, f64::INFINITY, tol / 2.0)?;
    let est_error = small.error + large.error;
    if est_error > tol {
        return Err(Error::Nonconvergence { est_error, tol, panels: small.panels + large.panels });
    }
    Ok(JumpIntegral {
        value: small.value + large.value,
        method: IntegralMethod::Quadrature,
        est_error: Some(est_error),
    })
}

/// `∫_{|z|<1} z ν(dz)`, the drift induced by compensating small jumps.
pub fn compensator_mean(measure: &LevyMeasureSpec) -> Result<f64> {
    truncated_compensator_mean(measure, 0.0)
}

/// `∫_{eps ≤ |z| < 1} z ν(dz)`: drift correction when jumps below `eps` are
/// not simulated individually.
pub fn truncated_compensator_mean(measure: &LevyMeasureSpec, eps: f64) -> Result<f64> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be >= 0, got {eps}")));
    }
    if eps >= 1.0 {
        return Ok(0.0);
    }
    Ok(match measure {
        LevyMeasureSpec::ExponentialFinite { eta } => {
            ((1.0 + eta * eps) * (-eta * eps).exp() - (1.0 + eta) * (-eta).exp()) / eta
        }
        LevyMeasureSpec::SymmetricInfinite | LevyMeasureSpec::None => 0.0,
        LevyMeasureSpec::Tabulated { .. } => {
            measure.integrate_abs_band(|z| (z, 0.0), eps, 1.0, DEFAULT_TOL)?.value
        }
    })
}

/// `ν({|z| ≥ eps})`, the arrival rate of jumps above the truncation level.
pub fn tail_mass(measure: &LevyMeasureSpec, eps: f64) -> Result<f64> {
    if eps.is_nan() {
        return Err(Error::InvalidArgument("eps is NaN".into()));
    }
    if eps == f64::INFINITY {
        return Ok(0.0);
    }
    match measure {
        LevyMeasureSpec::ExponentialFinite { eta } => Ok((-eta * eps.max(0.0)).exp()),
        LevyMeasureSpec::SymmetricInfinite => {
            if !(eps > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "eps must be > 0 for the infinite-activity measure, got {eps}"
                )));
            }
            let tol = 1e-13 * (1.0 / eps).max(1.0);
            Ok(measure.integrate_abs_band(|_| (0.0, 1.0), eps, f64::INFINITY, tol)?.value)
        }
        LevyMeasureSpec::Tabulated { .. } => {
            Ok(measure.integrate_abs_band(|_| (0.0, 1.0), eps.max(0.0), f64::INFINITY, DEFAULT_TOL)?.value)
        }
        LevyMeasureSpec::None => Ok(0.0),
    }
}

/// `∫_{|z|<eps} z² ν(dz)`, the variance rate of the truncated small jumps.
pub fn small_jump_variance(measure: &LevyMeasureSpec, eps: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps must lie in (0, 1], got {eps}")));
    }
    if eps == 0.0 {
        return Ok(0.0);
    }
    Ok(match measure {
        LevyMeasureSpec::SymmetricInfinite => -2.0 * (-eps).exp_m1(),
        LevyMeasureSpec::ExponentialFinite { eta } => {
            let x = eta * eps;
            2.0 * lower_gamma3(x) / (2.0 * eta * eta)
        }
        LevyMeasureSpec::Tabulated { .. } => measure.integrate_abs_band(|z| (0.0, z * z), 0.0, eps, DEFAULT_TOL)?.value,
        LevyMeasureSpec::None => 0.0,
    })
}

/// Lower incomplete gamma `γ(3, x) = ∫_0^x s² e^{−s} ds`.
fn lower_gamma3(x: f64) -> f64 {
    if x < 0.5 {
        // x³ Σ (−x)^k / (k! (k+3)), alternating and fast for small x.
        let mut term = 1.0;
        let mut sum = 1.0 / 3.0;
        for k in 1..40 {
            term *= -x / k as f64;
            let add = term / (k as f64 + 3.0);
            sum += add;
            if add.abs() < 1e-18 * sum.abs() {
                break;
            }
        }
        x * x * x * sum
    } else {
        2.0 - (-x).exp() * (x * x + 2.0 * x + 2.0)
    }
}

/// Truncation data for simulating jumps of a given measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpSamplerConfig {
    /// Jumps with `|z| < epsilon` are replaced by a Gaussian term.
    pub epsilon: f64,
    /// `ν({|z| ≥ epsilon})` per year.
    pub tail_rate: f64,
    /// `∫_{|z|<epsilon} z² ν(dz)`.
    pub small_var: f64,
    /// `∫_{epsilon ≤ |z| < 1} z ν(dz)`.
    pub drift_correction: f64,
}

#[derive(Debug, Clone)]
enum SamplerKind {
    Never,
    Exponential { eta: f64, eps: f64 },
    Symmetric(Arc<SymmetricTable>),
    Tabulated(Arc<SegmentTable>),
}

/// Draws jump sizes from `ν` restricted to `{|z| ≥ eps}` and normalized.
/// Built once per measure and shared read-only between paths.
#[derive(Debug, Clone)]
pub struct JumpSampler {
    config: JumpSamplerConfig,
    kind: SamplerKind,
}

impl JumpSampler {
    /// Sampler truncating at `eps`. Finite-activity measures accept `eps = 0`.
    pub fn new(measure: &LevyMeasureSpec, eps: f64) -> Result<Self> {
        let tail_rate = tail_mass(measure, eps)?;
        let small_var = if eps > 0.0 { small_jump_variance(measure, eps.min(1.0))? } else { 0.0 };
        let drift_correction = truncated_compensator_mean(measure, eps)?;
        let config = JumpSamplerConfig { epsilon: eps, tail_rate, small_var, drift_correction };
        let kind = match measure {
            LevyMeasureSpec::None => SamplerKind::Never,
            _ if tail_rate == 0.0 => SamplerKind::Never,
            LevyMeasureSpec::ExponentialFinite { eta } => SamplerKind::Exponential { eta: *eta, eps: eps.max(0.0) },
            LevyMeasureSpec::SymmetricInfinite => {
                SamplerKind::Symmetric(Arc::new(SymmetricTable::build(eps, TABLE_KNOTS)?))
            }
            LevyMeasureSpec::Tabulated { z, density } => {
                SamplerKind::Tabulated(Arc::new(SegmentTable::build(z, density, eps.max(0.0))?))
            }
        };
        Ok(Self { config, kind })
    }

    /// Sampler used by the simulator: finite-activity measures are sampled
    /// exactly (`eps = 0`), the infinite-activity one is truncated at `eps`.
    pub fn for_simulation(measure: &LevyMeasureSpec, eps: f64) -> Result<Self> {
        if measure.is_finite_activity() {
            Self::new(measure, 0.0)
        } else {
            if !(eps > 0.0 && eps <= 1.0) {
                return Err(Error::InvalidArgument(format!("eps must lie in (0, 1], got {eps}")));
            }
            Self::new(measure, eps)
        }
    }

    /// Symmetric sampler reusing a cached table from `dir` when present.
    pub fn symmetric_cached(dir: &Path, eps: f64) -> Result<Self> {
        let table = SymmetricTable::load_or_build(dir, eps, TABLE_KNOTS)?;
        let measure = LevyMeasureSpec::SymmetricInfinite;
        let config = JumpSamplerConfig {
            epsilon: eps,
            tail_rate: 2.0 * table.half_mass(),
            small_var: small_jump_variance(&measure, eps.min(1.0))?,
            drift_correction: 0.0,
        };
        Ok(Self { config, kind: SamplerKind::Symmetric(Arc::new(table)) })
    }

    pub fn config(&self) -> &JumpSamplerConfig {
        &self.config
    }

    /// Maps a uniform `u ∈ [0, 1)` to a jump size.
    pub fn sample(&self, u: f64) -> f64 {
        match &self.kind {
            SamplerKind::Never => 0.0,
            SamplerKind::Exponential { eta, eps } => eps - (-u).ln_1p() / eta,
            SamplerKind::Symmetric(table) => table.sample(u),
            SamplerKind::Tabulated(table) => table.sample(u),
        }
    }
}

/// One-off draw; builds a [`JumpSampler`] each call.
pub fn sample_jump_size(measure: &LevyMeasureSpec, eps: f64, u: f64) -> Result<f64> {
    let sampler = JumpSampler::new(measure, eps)?;
    if sampler.config.tail_rate <= 0.0 {
        return Err(Error::ZeroTailMass(eps));
    }
    Ok(sampler.sample(u))
}

/// Inverse CDF of `e^{−z}/z²` on `[eps, ∞)`: log-spaced knots on
/// `[eps, TABLE_Z_MAX]`, monotone cubic interpolation of `z` against the
/// cumulative mass, exponential tail beyond the last knot.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricTable {
    eps: f64,
    cum: Vec<f64>,
    z: Vec<f64>,
    slope: Vec<f64>,
    tail_beyond: f64,
    guide: Vec<u32>,
    // z on a uniform grid of cumulative mass over [0, fast_top]; linear
    // interpolation there is far below sampling noise and avoids the search.
    fast: Vec<f64>,
    fast_top: f64,
}

impl SymmetricTable {
    pub fn build(eps: f64, knots: usize) -> Result<Self> {
        if !(eps > 0.0 && eps < TABLE_Z_MAX) {
            return Err(Error::InvalidArgument(format!("table eps must lie in (0, {TABLE_Z_MAX}), got {eps}")));
        }
        if knots < 2 {
            return Err(Error::InvalidArgument("table needs at least 2 knots".into()));
        }
        let rho = |z: f64| (-z).exp() / (z * z);
        let ratio = (TABLE_Z_MAX / eps).ln() / (knots - 1) as f64;
        let mut z: Vec<f64> = (0..knots).map(|k| eps * (ratio * k as f64).exp()).collect();
        z[knots - 1] = TABLE_Z_MAX;
        let mut cum = Vec::with_capacity(knots);
        cum.push(0.0);
        for w in z.windows(2) {
            let (mass, _) = quad::gk21(&rho, w[0], w[1]);
            cum.push(cum.last().unwrap() + mass);
        }
        let tail_beyond = quad::integrate_to_infinity(rho, TABLE_Z_MAX, 1e-30, DEFAULT_MAX_PANELS)?.value;
        // dz/dF = 1/ρ(z), limited to keep the interpolant monotone.
        let mut slope: Vec<f64> = z.iter().map(|&zk| 1.0 / rho(zk)).collect();
        for k in 0..knots - 1 {
            let secant = (z[k + 1] - z[k]) / (cum[k + 1] - cum[k]);
            let a = slope[k] / secant;
            let b = slope[k + 1] / secant;
            let s = a * a + b * b;
            if s > 9.0 {
                let tau = 3.0 / s.sqrt();
                slope[k] = tau * a * secant;
                slope[k + 1] = tau * b * secant;
            }
        }
        let mut table = Self { eps, cum, z, slope, tail_beyond, guide: Vec::new(), fast: Vec::new(), fast_top: 0.0 };
        table.build_guide();
        Ok(table)
    }

    fn build_guide(&mut self) {
        let n = self.cum.len();
        let top = self.cum[n - 1];
        let mut guide = Vec::with_capacity(n);
        let mut k = 0usize;
        for j in 0..n {
            let target = top * j as f64 / n as f64;
            while k + 2 < n && self.cum[k + 1] <= target {
                k += 1;
            }
            guide.push(k as u32);
        }
        self.guide = guide;

        let k = self.z.partition_point(|&zk| zk < FAST_Z_MAX);
        if k == 0 || k >= n {
            return;
        }
        self.fast_top = self.cum[k];
        self.fast = (0..=FAST_CELLS).map(|j| self.invert(self.fast_top * j as f64 / FAST_CELLS as f64)).collect();
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn knots(&self) -> usize {
        self.z.len()
    }

    /// `∫_eps^∞ e^{−z}/z² dz`, the mass of one sign.
    pub fn half_mass(&self) -> f64 {
        self.cum[self.cum.len() - 1] + self.tail_beyond
    }

    /// Positive jump size whose one-sided cumulative mass is `target`.
    pub fn invert(&self, target: f64) -> f64 {
        let n = self.cum.len();
        let top = self.cum[n - 1];
        if target >= top {
            let frac = ((target - top) / self.tail_beyond).min(1.0 - f64::EPSILON);
            return TABLE_Z_MAX - (-frac).ln_1p();
        }
        let bucket = ((target / top) * n as f64) as usize;
        let mut k = self.guide[bucket.min(n - 1)] as usize;
        while k + 2 < n && self.cum[k + 1] <= target {
            k += 1;
        }
        let h = self.cum[k + 1] - self.cum[k];
        let t = ((target - self.cum[k]) / h).clamp(0.0, 1.0);
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.z[k] + h10 * h * self.slope[k] + h01 * self.z[k + 1] + h11 * h * self.slope[k + 1]
    }

    /// Signed draw: the lower half of `[0, 1)` gives negative jumps.
    pub fn sample(&self, u: f64) -> f64 {
        let v = 2.0 * u - 1.0;
        let target = v.abs() * self.half_mass();
        let z = if target < self.fast_top {
            let pos = target / self.fast_top * FAST_CELLS as f64;
            let j = (pos as usize).min(FAST_CELLS - 1);
            let w = pos - j as f64;
            self.fast[j] + w * (self.fast[j + 1] - self.fast[j])
        } else {
            self.invert(target)
        };
        z.copysign(v)
    }

    /// Cache file name for `(kind, eps, knots)`.
    pub fn cache_file_name(eps: f64, knots: usize) -> String {
        format!("symmetric-{:016x}-{knots}.lvxt", eps.to_bits())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(32 + 24 * self.z.len());
        buf.extend_from_slice(b"LVXT");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.push(1u8);
        buf.extend_from_slice(&self.eps.to_le_bytes());
        buf.extend_from_slice(&(self.z.len() as u32).to_le_bytes());
        buf.extend_from_slice(&self.tail_beyond.to_le_bytes());
        for v in self.cum.iter().chain(&self.z).chain(&self.slope) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = || Error::InvalidArgument(format!("{} is not a valid jump table", path.display()));
        if bytes.len() < 29 || &bytes[..4] != b"LVXT" || bytes[4..8] != 1u32.to_le_bytes() || bytes[8] != 1 {
            return Err(bad());
        }
        let f64_at = |off: usize| f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let eps = f64_at(9);
        let n = u32::from_le_bytes(bytes[17..21].try_into().unwrap()) as usize;
        let tail_beyond = f64_at(21);
        if bytes.len() != 29 + 24 * n || n < 2 {
            return Err(bad());
        }
        let read = |start: usize| (0..n).map(|k| f64_at(start + 8 * k)).collect::<Vec<_>>();
        let cum = read(29);
        let z = read(29 + 8 * n);
        let slope = read(29 + 16 * n);
        let mut table = Self { eps, cum, z, slope, tail_beyond, guide: Vec::new(), fast: Vec::new(), fast_top: 0.0 };
        table.build_guide();
        Ok(table)
    }

    /// Loads `(eps, knots)` from the sidecar cache in `dir`, building and
    /// writing it on a miss.
    pub fn load_or_build(dir: &Path, eps: f64, knots: usize) -> Result<Self> {
        let path: PathBuf = dir.join(Self::cache_file_name(eps, knots));
        if let Ok(t) = Self::load(&path) {
            if t.eps.to_bits() == eps.to_bits() && t.knots() == knots {
                return Ok(t);
            }
        }
        let t = Self::build(eps, knots)?;
        fs::create_dir_all(dir)?;
        t.save(&path)?;
        Ok(t)
    }
}

/// Exact inverse CDF of a piecewise-linear density with `(−eps, eps)` removed.
#[derive(Debug, Clone)]
struct SegmentTable {
    // (left end, width, density at left, density slope)
    segs: Vec<(f64, f64, f64, f64)>,
    cum: Vec<f64>,
}

impl SegmentTable {
    fn build(z: &[f64], density: &[f64], eps: f64) -> Result<Self> {
        let mut segs = Vec::new();
        for k in 0..z.len() - 1 {
            let (a, b) = (z[k], z[k + 1]);
            let slope = (density[k + 1] - density[k]) / (b - a);
            let at = |p: f64| density[k] + slope * (p - a);
            for (lo, hi) in [(a, b.min(-eps)), (a.max(eps), b)] {
                if hi > lo {
                    segs.push((lo, hi - lo, at(lo), slope));
                }
            }
        }
        segs.sort_by(|p, q| p.0.total_cmp(&q.0));
        segs.dedup_by(|p, q| p.0 == q.0);
        let mut cum = vec![0.0];
        for &(_, w, d0, s) in &segs {
            cum.push(cum.last().unwrap() + d0 * w + 0.5 * s * w * w);
        }
        if !(*cum.last().unwrap() > 0.0) {
            return Err(Error::ZeroTailMass(eps));
        }
        Ok(Self { segs, cum })
    }

    fn sample(&self, u: f64) -> f64 {
        let target = u * self.cum[self.cum.len() - 1];
        let k = self.cum.partition_point(|&c| c <= target).clamp(1, self.segs.len()) - 1;
        let (left, width, d0, s) = self.segs[k];
        let m = target - self.cum[k];
        // Solve d0·x + s·x²/2 = m on [0, width].
        let disc = (d0 * d0 + 2.0 * s * m).max(0.0);
        let denom = d0 + disc.sqrt();
        let x = if denom > 0.0 { 2.0 * m / denom } else { 0.0 };
        left + x.clamp(0.0, width)
    }
}

/// `e^{−1}`, exposed for reports that break the jump integral into parts.
pub const INV_E: f64 = 1.0 / E;
