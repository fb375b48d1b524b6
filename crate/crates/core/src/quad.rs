//! Globally adaptive Gauss–Kronrod (10/21-point) quadrature.
//!
//! Panels are kept in a max-heap keyed by their error estimate and the worst
//! one is bisected until the summed estimate drops below the absolute
//! tolerance or the panel budget runs out. Semi-infinite ranges are mapped to
//! `[0, 1)` with `z = a + t / (1 − t)`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::sum::Neumaier;

/// Default absolute tolerance for Lévy-measure integrals.
pub const DEFAULT_TOL: f64 = 1e-10;
/// Default cap on the number of panels.
pub const DEFAULT_MAX_PANELS: usize = 10_000;

const XGK: [f64; 11] = [
    0.995_657_163_025_808_1,
    0.973_906_528_517_171_7,
    0.930_157_491_355_708_2,
    0.865_063_366_688_984_5,
    0.780_817_726_586_416_9,
    0.679_409_568_299_024_4,
    0.562_757_134_668_604_7,
    0.433_395_394_129_247_2,
    0.294_392_862_701_460_2,
    0.148_874_338_981_631_2,
    0.0,
];

const WGK: [f64; 11] = [
    0.011_694_638_867_371_874,
    0.032_558_162_307_964_73,
    0.054_755_896_574_352,
    0.075_039_674_810_919_95,
    0.093_125_454_583_697_6,
    0.109_387_158_802_297_64,
    0.123_491_976_262_065_85,
    0.134_709_217_311_473_33,
    0.142_775_938_577_060_08,
    0.147_739_104_901_338_5,
    0.149_445_554_002_916_9,
];

// Gauss weights for the odd-indexed Kronrod nodes XGK[1], XGK[3], ..., XGK[9].
const WG: [f64; 5] = [
    0.066_671_344_308_688_14,
    0.149_451_349_150_580_6,
    0.219_086_362_515_982_04,
    0.269_266_719_309_996_36,
    0.295_524_224_714_752_9,
];

/// Result of an adaptive integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
    pub panels: usize,
}

#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// One Gauss–Kronrod 21-point rule on `[a, b]`, with the QUADPACK error
/// heuristic.
pub fn gk21<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let f_center = f(center);
    let mut res_k = f_center * WGK[10];
    let mut res_g = 0.0;
    let mut res_abs = res_k.abs();
    let mut fv1 = [0.0; 10];
    let mut fv2 = [0.0; 10];
    for j in 0..10 {
        let dx = half * XGK[j];
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        fv1[j] = f1;
        fv2[j] = f2;
        res_k += WGK[j] * (f1 + f2);
        res_abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            res_g += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = 0.5 * res_k;
    let mut res_asc = WGK[10] * (f_center - mean).abs();
    for j in 0..10 {
        res_asc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let value = res_k * half;
    let res_abs = res_abs * half.abs();
    let res_asc = res_asc * half.abs();
    let mut err = ((res_k - res_g) * half).abs();
    if res_asc != 0.0 && err != 0.0 {
        err = res_asc * (200.0 * err / res_asc).powf(1.5).min(1.0);
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        err = err.max(50.0 * f64::EPSILON * res_abs);
    }
    (value, err)
}

/// Integrates `f` over the finite interval `[a, b]` to absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64, max_panels: usize) -> Result<Estimate> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("quadrature tol must be > 0, got {tol}")));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidArgument("finite limits required; use integrate_to_infinity".into()));
    }
    if a == b {
        return Ok(Estimate { value: 0.0, error: 0.0, panels: 0 });
    }
    let (value, error) = gk21(&f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Panel { a, b, value, error });
    let mut total_err = error;
    loop {
        if total_err <= tol || heap.len() >= max_panels {
            break;
        }
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // Panel can no longer be split in floating point.
            heap.push(worst);
            break;
        }
        let (v1, e1) = gk21(&f, worst.a, mid);
        let (v2, e2) = gk21(&f, mid, worst.b);
        heap.push(Panel { a: worst.a, b: mid, value: v1, error: e1 });
        heap.push(Panel { a: mid, b: worst.b, value: v2, error: e2 });
        // Recompute from scratch so rounding in a running sum cannot stall convergence.
        total_err = heap.iter().map(|p| p.error).collect::<Neumaier>().total();
    }
    let mut panels: Vec<Panel> = heap.into_vec();
    panels.sort_by(|p, q| p.a.total_cmp(&q.a));
    let value = panels.iter().map(|p| p.value).collect::<Neumaier>().total();
    let error = panels.iter().map(|p| p.error).collect::<Neumaier>().total();
    let est = Estimate { value, error, panels: panels.len() };
    if error > tol {
        return Err(Error::Nonconvergence { est_error: error, tol, panels: est.panels });
    }
    Ok(est)
}

/// Integrates `f` over `[a, ∞)`.
pub fn integrate_to_infinity<F: Fn(f64) -> f64>(f: F, a: f64, tol: f64, max_panels: usize) -> Result<Estimate> {
    let g = |t: f64| {
        let s = 1.0 - t;
        let z = a + t / s;
        let v = f(z) / (s * s);
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    integrate(g, 0.0, 1.0, tol, max_panels)
}

/// Integrates over consecutive breakpoints `points[0] < points[1] < ...`,
/// optionally continuing to `+∞` from the last one. The tolerance is split
/// evenly across pieces.
pub fn integrate_pieces<F: Fn(f64) -> f64>(
    f: F,
    points: &[f64],
    to_infinity: bool,
    tol: f64,
    max_panels: usize,
) -> Result<Estimate> {
    let n_pieces = points.len().saturating_sub(1) + usize::from(to_infinity);
    if n_pieces == 0 {
        return Ok(Estimate { value: 0.0, error: 0.0, panels: 0 });
    }
    let piece_tol = tol / n_pieces as f64;
    let mut value = Neumaier::default();
    let mut error = 0.0;
    let mut panels = 0;
    for w in points.windows(2) {
        let e = integrate(&f, w[0], w[1], piece_tol, max_panels)?;
        value.add(e.value);
        error += e.error;
        panels += e.panels;
    }
    if to_infinity {
        let last = *points.last().expect("n_pieces > 0 implies a point");
        let e = integrate_to_infinity(&f, last, piece_tol, max_panels)?;
        value.add(e.value);
        error += e.error;
        panels += e.panels;
    }
    Ok(Estimate { value: value.total(), error, panels })
}
