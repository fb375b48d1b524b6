//! Monte-Carlo simulation of the controlled price/reserve dynamics and
//! estimation of the discounted payoff
//!
//! ```text
//! J = E ∫_0^T e^{−rt} (X(t)u(t) − C(u(t), Y(t))) dt.
//! ```
//!
//! Every path draws from its own ChaCha stream derived from
//! `(master_seed, path_index, stream kind)`, and per-path results are reduced
//! in index order, so estimates do not depend on the worker count.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::levy::JumpSampler;
use crate::model::{InitialState, MarketModel, SwitchGenerator};
use crate::solver::{self, JumpMethod, Solution};
use crate::sum::Neumaier;

/// Estimates are rejected when more than this fraction of paths blow up.
pub const MAX_FLAGGED_FRACTION: f64 = 1e-3;

const STREAM_REGIME: u64 = 0;
const STREAM_BROWNIAN: u64 = 1;
const STREAM_JUMPS: u64 = 2;
const STREAM_SMALL_JUMPS: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    /// `u = (1 − 2λA(i)) x / (2β)`.
    Feedback { solution: Solution },
    ConstantRate { u0: f64 },
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    /// Rates outside `[lo, hi]` are clamped. `None` leaves the control unbounded.
    pub clamp: Option<[f64; 2]>,
}

impl Policy {
    pub fn feedback(solution: Solution) -> Self {
        Self { kind: PolicyKind::Feedback { solution }, clamp: None }
    }

    pub fn constant(u0: f64) -> Self {
        Self { kind: PolicyKind::ConstantRate { u0 }, clamp: None }
    }

    pub fn zero() -> Self {
        Self { kind: PolicyKind::Zero, clamp: None }
    }

    pub fn with_clamp(mut self, lo: f64, hi: f64) -> Self {
        self.clamp = Some([lo, hi]);
        self
    }

    /// Gain `κ_i` when the policy is linear in the price.
    pub fn gain(&self, i: usize) -> Option<f64> {
        match &self.kind {
            PolicyKind::Feedback { solution } => Some(solution.feedback_gain(i)),
            PolicyKind::Zero => Some(0.0),
            PolicyKind::ConstantRate { .. } => None,
        }
    }

    /// Rate at `(x, i)` and whether the clamp was active.
    pub fn rate(&self, x: f64, i: usize) -> (f64, bool) {
        let raw = match &self.kind {
            PolicyKind::Feedback { solution } => solution.feedback_gain(i) * x,
            PolicyKind::ConstantRate { u0 } => *u0,
            PolicyKind::Zero => 0.0,
        };
        match self.clamp {
            Some([lo, hi]) => {
                let u = raw.clamp(lo, hi);
                (u, u != raw)
            }
            None => (raw, false),
        }
    }

    fn largest_abs_a(&self) -> f64 {
        match &self.kind {
            PolicyKind::Feedback { solution } => solution.a.iter().fold(0.0, |m, a| m.max(a.abs())),
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheme {
    /// Fixed-step Euler with left-point payoff accumulation.
    EulerGrid { dt: f64 },
    /// Exact geometric evolution between regime switches and jumps; the
    /// payoff integral uses the trapezoid rule on a grid of step `h`.
    ExactEvent { h: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Truncated horizon `T`, years.
    pub horizon: f64,
    pub scheme: Scheme,
    /// Jumps smaller than this are replaced by a Gaussian term
    /// (infinite-activity measures only).
    pub eps: f64,
    pub n_paths: usize,
    pub master_seed: u64,
    /// Euler only: Brownian increments are sums of increments over this finer
    /// step, so runs with different `dt` share their noise.
    #[serde(default)]
    pub noise_dt: Option<f64>,
    /// Worker threads; does not affect results.
    #[serde(skip)]
    pub workers: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            horizon: 400.0,
            scheme: Scheme::ExactEvent { h: 0.1 },
            eps: 1e-3,
            n_paths: 50_000,
            master_seed: 0,
            noise_dt: None,
            workers: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be > 0, got {}", self.horizon));
        }
        let step = match self.scheme {
            Scheme::EulerGrid { dt } => dt,
            Scheme::ExactEvent { h } => h,
        };
        if !(step > 0.0 && step.is_finite()) {
            return bad(format!("time step must be > 0, got {step}"));
        }
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return bad(format!("eps must lie in (0, 1], got {}", self.eps));
        }
        if self.n_paths == 0 {
            return bad("n_paths must be >= 1".into());
        }
        if let Some(fine) = self.noise_dt {
            if !matches!(self.scheme, Scheme::EulerGrid { .. }) {
                return bad("noise_dt applies to the Euler scheme only".into());
            }
            let (n, last) = grid(self.horizon, step);
            for h in [step, last] {
                if n > 0 && fine_count(h, fine).is_none() {
                    return bad(format!("step {h} is not a multiple of noise_dt {fine}"));
                }
            }
        }
        Ok(())
    }
}

/// Number of steps and length of the last one for `[0, T]` cut at `step`.
fn grid(horizon: f64, step: f64) -> (usize, f64) {
    let n = ((horizon / step) - 1e-9).ceil().max(1.0) as usize;
    (n, horizon - (n - 1) as f64 * step)
}

fn fine_count(h: f64, fine: f64) -> Option<usize> {
    let k = (h / fine).round();
    (k >= 1.0 && (k * fine - h).abs() <= 1e-9 * h).then_some(k as usize)
}

/// Piecewise-constant regime path: initial state plus `(time, new state)` events.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimePath {
    pub initial: usize,
    pub events: Vec<(f64, usize)>,
}

impl RegimePath {
    /// Regime in force at time `t` (right-continuous).
    pub fn state_at(&self, t: f64) -> usize {
        match self.events.partition_point(|&(s, _)| s <= t) {
            0 => self.initial,
            k => self.events[k - 1].1,
        }
    }

    /// Time spent in each of `m` states over `[0, horizon]`.
    pub fn occupation(&self, m: usize, horizon: f64) -> Vec<f64> {
        let mut out = vec![0.0; m];
        let mut t = 0.0;
        let mut state = self.initial;
        for &(s, next) in &self.events {
            out[state] += s - t;
            t = s;
            state = next;
        }
        out[state] += horizon - t;
        out
    }
}

/// Samples the regime chain on `[0, horizon]` from `rng`.
pub fn sample_regime_path_with<R: Rng>(switch: &SwitchGenerator, i0: usize, horizon: f64, rng: &mut R) -> RegimePath {
    let mut events = Vec::new();
    let mut t = 0.0;
    let mut state = i0;
    loop {
        let rate = switch.exit_rate(state);
        if !(rate > 0.0) {
            break;
        }
        let hold: f64 = Exp1.sample(rng);
        t += hold / rate;
        if t > horizon {
            break;
        }
        let mut pick = rng.random::<f64>() * rate;
        let mut next = state;
        for j in (0..switch.dim()).filter(|&j| j != state) {
            let q = switch.rate(state, j);
            next = j;
            if pick < q {
                break;
            }
            pick -= q;
        }
        // Guard against landing on a zero-rate target through rounding.
        while switch.rate(state, next) <= 0.0 && next > 0 {
            next -= 1;
        }
        state = next;
        events.push((t, state));
    }
    RegimePath { initial: i0, events }
}

/// Samples the regime chain on `[0, horizon]` from a fresh seeded stream.
pub fn sample_regime_path(switch: &SwitchGenerator, i0: usize, horizon: f64, seed: u64) -> RegimePath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_regime_path_with(switch, i0, horizon, &mut rng)
}

fn path_stream(master_seed: u64, path_index: u64, kind: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(path_index.wrapping_mul(4).wrapping_add(kind));
    rng
}

/// Outcome of one simulated path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    /// Discounted payoff over `[0, T]`.
    pub payoff: f64,
    pub x_end: f64,
    pub y_end: f64,
    pub steps: usize,
    pub clamp_steps: usize,
    /// First grid time with `Y ≤ 0`.
    pub depletion_time: Option<f64>,
    /// The price went negative at some point.
    pub negative_price: bool,
    /// Non-finite state encountered; the sample is excluded.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Fraction of Euler steps where the clamp was active.
    pub clamp_fraction: f64,
    /// Mean depletion time over depleted paths.
    pub mean_depletion_time: Option<f64>,
    pub depleted_fraction: f64,
    pub negative_price_fraction: f64,
    pub flagged_paths: usize,
    /// Sample mean of `X(T)²` and `|Y(T)|` over unflagged paths.
    pub mean_x_end_sq: f64,
    pub mean_abs_y_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffEstimate {
    pub mean: f64,
    pub std_error: f64,
    /// Half-width of the 95% confidence interval, `1.96·std_error`.
    pub ci95: f64,
    pub n_paths: usize,
    /// Bound on the discounted payoff discarded beyond `T`.
    pub truncation_bound: f64,
    pub diagnostics: Diagnostics,
    /// Per-path payoffs in path order (excluded from JSON).
    #[serde(skip)]
    pub samples: Vec<f64>,
}

/// Discount integrals over one step of length `h`, free of cancellation:
/// `S = ∫_0^h e^{−rs} ds`, `M = ∫_0^h s e^{−rs} ds`.
fn discount_moments(r: f64, h: f64) -> (f64, f64) {
    let x = r * h;
    let s = -(-x).exp_m1() / r;
    // 1 − e^{−x}(1 + x) = Σ_{n≥2} (−1)^n (n−1) x^n / n!
    let phi = if x < 0.5 {
        let mut term = x * x / 2.0;
        let mut sum = term;
        for n in 3..30 {
            term *= -x / n as f64;
            let add = term * (n - 1) as f64;
            sum += add;
            if add.abs() < 1e-18 * sum {
                break;
            }
        }
        sum
    } else {
        1.0 - (-x).exp() * (1.0 + x)
    };
    (s, phi / (r * r))
}

/// Precomputed per-run data shared by all paths.
pub struct Simulator<'a> {
    model: &'a MarketModel,
    policy: &'a Policy,
    init: InitialState,
    cfg: &'a SimConfig,
    sampler: JumpSampler,
}

impl<'a> Simulator<'a> {
    pub fn new(model: &'a MarketModel, policy: &'a Policy, init: InitialState, cfg: &'a SimConfig) -> Result<Self> {
        let sampler = JumpSampler::for_simulation(&model.levy, cfg.eps)?;
        Self::with_sampler(model, policy, init, cfg, sampler)
    }

    /// Reuses a prebuilt sampler (which must match `model.levy` and `cfg.eps`).
    pub fn with_sampler(
        model: &'a MarketModel,
        policy: &'a Policy,
        init: InitialState,
        cfg: &'a SimConfig,
        sampler: JumpSampler,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut violations = Vec::new();
        init.validate(model.regime_count(), &mut violations);
        if let Some(v) = violations.first() {
            return Err(Error::InvalidArgument(v.to_string()));
        }
        if let PolicyKind::Feedback { solution } = &policy.kind {
            if solution.a.len() != model.regime_count() {
                return Err(Error::InvalidArgument("solution has the wrong number of regimes".into()));
            }
        }
        if let Some([lo, hi]) = policy.clamp {
            if !(lo <= hi) {
                return Err(Error::InvalidArgument("clamp interval must satisfy lo <= hi".into()));
            }
        }
        if let Scheme::ExactEvent { .. } = cfg.scheme {
            if policy.clamp.is_some() || policy.gain(0).is_none() {
                return Err(Error::UnsupportedScheme(
                    "the exact scheme needs an unclamped policy linear in the price".into(),
                ));
            }
        }
        Ok(Self { model, policy, init, cfg, sampler })
    }

    pub fn sampler(&self) -> &JumpSampler {
        &self.sampler
    }

    /// Fills `out` with the Brownian increment over `h`, optionally as a sum
    /// of finer increments.
    fn increment(&self, rng: &mut ChaCha8Rng, h: f64) -> f64 {
        match self.cfg.noise_dt {
            Some(fine) => {
                let k = fine_count(h, fine).unwrap_or(1);
                let s: f64 = (0..k).map(|_| StandardNormal.sample(rng)).map(|z: f64| z).sum();
                s * fine.sqrt()
            }
            None => {
                let z: f64 = StandardNormal.sample(rng);
                z * h.sqrt()
            }
        }
    }

    /// One Euler path; `path_index` selects the random streams.
    pub fn simulate_path_euler(&self, path_index: u64) -> PathSample {
        let Scheme::EulerGrid { dt } = self.cfg.scheme else {
            panic!("simulate_path_euler called with a non-Euler scheme");
        };
        let model = self.model;
        let cost = &model.cost;
        let seed = self.cfg.master_seed;
        let horizon = self.cfg.horizon;
        let regimes = sample_regime_path_with(
            &model.switch,
            self.init.regime,
            horizon,
            &mut path_stream(seed, path_index, STREAM_REGIME),
        );
        let mut bm = path_stream(seed, path_index, STREAM_BROWNIAN);
        let mut small = path_stream(seed, path_index, STREAM_SMALL_JUMPS);
        let mut jumps = path_stream(seed, path_index, STREAM_JUMPS);
        let jc = *self.sampler.config();
        let rate = jc.tail_rate;
        let mut next_jump = if rate > 0.0 { Exp1.sample(&mut jumps) } else { f64::INFINITY };
        let next_gap = |rng: &mut ChaCha8Rng| -> f64 { Exp1.sample(rng) };

        let (n, last) = grid(horizon, dt);
        let mut x = self.init.x0;
        let mut y = self.init.y0;
        let mut payoff = Neumaier::default();
        let mut clamp_steps = 0;
        let mut depletion_time = None;
        let mut negative_price = false;
        let (s_std, _) = discount_moments(cost.r, dt);
        let (s_last, _) = discount_moments(cost.r, last);
        for k in 0..n {
            let t = k as f64 * dt;
            let (h, s) = if k + 1 == n { (last, s_last) } else { (dt, s_std) };
            let i = regimes.state_at(t);
            let reg = &model.regimes[i];
            let (u, clamped) = self.policy.rate(x, i);
            clamp_steps += usize::from(clamped);
            // Left-point integrand against the exact discount integral over the step.
            payoff.add((x * u - cost.cost(u, y)) * (-cost.r * t).exp() * s);

            let dw = self.increment(&mut bm, h);
            let mut jump_sum = 0.0;
            // Arrival times are generated in absolute time (units of 1/rate),
            // so the jump sequence does not depend on dt.
            while next_jump < (t + h) * rate {
                jump_sum += self.sampler.sample(jumps.random::<f64>());
                next_jump += next_gap(&mut jumps);
            }
            let small_term = if jc.small_var > 0.0 {
                reg.gamma * x * jc.small_var.sqrt() * self.increment(&mut small, h)
            } else {
                0.0
            };
            x += (x * reg.mu - model.lambda * u) * h + reg.sigma * x * dw - reg.gamma * x * jc.drift_correction * h
                + reg.gamma * x * jump_sum
                + small_term;
            y -= u * h;
            if !x.is_finite() || !y.is_finite() {
                return PathSample {
                    payoff: f64::NAN,
                    x_end: x,
                    y_end: y,
                    steps: k + 1,
                    clamp_steps,
                    depletion_time,
                    negative_price,
                    flagged: true,
                };
            }
            negative_price |= x < 0.0;
            if depletion_time.is_none() && y <= 0.0 {
                depletion_time = Some(t + h);
            }
        }
        let payoff = payoff.total();
        PathSample {
            payoff,
            x_end: x,
            y_end: y,
            steps: n,
            clamp_steps,
            depletion_time,
            negative_price,
            flagged: !payoff.is_finite(),
        }
    }

    /// One path of the exact scheme. The price is geometric between events
    /// (log-increment mean `(μ − λκ − σ_eff²/2 − γ·drift)Δ`, variance
    /// `σ_eff²Δ` with `σ_eff² = σ² + γ²·small_var`) and multiplied by
    /// `1 + γz` at each jump.
    pub fn simulate_path_exact(&self, path_index: u64) -> PathSample {
        let Scheme::ExactEvent { h } = self.cfg.scheme else {
            panic!("simulate_path_exact called with a non-exact scheme");
        };
        let model = self.model;
        let cost = &model.cost;
        let seed = self.cfg.master_seed;
        let horizon = self.cfg.horizon;
        let regimes = sample_regime_path_with(
            &model.switch,
            self.init.regime,
            horizon,
            &mut path_stream(seed, path_index, STREAM_REGIME),
        );
        let mut bm = path_stream(seed, path_index, STREAM_BROWNIAN);
        let mut jumps = path_stream(seed, path_index, STREAM_JUMPS);
        let jc = *self.sampler.config();
        let m = model.regime_count();
        let gains: Vec<f64> = (0..m).map(|i| self.policy.gain(i).expect("checked in constructor")).collect();
        let vols: Vec<f64> = model
            .regimes
            .iter()
            .map(|reg| (reg.sigma * reg.sigma + reg.gamma * reg.gamma * jc.small_var).sqrt())
            .collect();
        let drifts: Vec<f64> = (0..m)
            .map(|i| {
                let reg = &model.regimes[i];
                reg.mu - model.lambda * gains[i] - 0.5 * vols[i] * vols[i] - reg.gamma * jc.drift_correction
            })
            .collect();

        let (n, last) = grid(horizon, h);
        let (s_std, m_std) = discount_moments(cost.r, h);
        let (s_last, m_last) = discount_moments(cost.r, last);
        let mut x = self.init.x0;
        let mut y = self.init.y0;
        let mut event = 0usize;
        let mut state = regimes.initial;
        let mut u = gains[state] * x;
        let mut f = x * u - cost.cost(u, y);
        let mut payoff = Neumaier::default();
        let mut depletion_time = None;
        let mut negative_price = x < 0.0;
        for k in 0..n {
            let t0 = k as f64 * h;
            let step = if k + 1 == n { last } else { h };
            let t1 = if k + 1 == n { horizon } else { t0 + step };
            let mut t = t0;
            loop {
                let (seg_end, switch_to) = match regimes.events.get(event) {
                    Some(&(s, j)) if s < t1 => (s, Some(j)),
                    _ => (t1, None),
                };
                let d = seg_end - t;
                if d > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut bm);
                    x *= (drifts[state] * d + vols[state] * d.sqrt() * z).exp();
                    let gamma = model.regimes[state].gamma;
                    if jc.tail_rate > 0.0 && gamma != 0.0 {
                        let count = Poisson::new(jc.tail_rate * d).map(|p| p.sample(&mut jumps)).unwrap_or(0.0) as u64;
                        for _ in 0..count {
                            x *= 1.0 + gamma * self.sampler.sample(jumps.random::<f64>());
                        }
                        negative_price |= x < 0.0;
                    }
                }
                t = seg_end;
                match switch_to {
                    Some(j) => {
                        state = j;
                        event += 1;
                    }
                    None => break,
                }
            }
            let u1 = gains[state] * x;
            y -= 0.5 * step * (u + u1);
            let f1 = x * u1 - cost.cost(u1, y);
            let (s, mm) = if k + 1 == n { (s_last, m_last) } else { (s_std, m_std) };
            // Exact integral of the linear interpolant of f against e^{−rs}.
            payoff.add((-cost.r * t0).exp() * (s * f + mm / step * (f1 - f)));
            u = u1;
            f = f1;
            if !x.is_finite() || !y.is_finite() || !f.is_finite() {
                return PathSample {
                    payoff: f64::NAN,
                    x_end: x,
                    y_end: y,
                    steps: k + 1,
                    clamp_steps: 0,
                    depletion_time,
                    negative_price,
                    flagged: true,
                };
            }
            negative_price |= x < 0.0;
            if depletion_time.is_none() && y <= 0.0 {
                depletion_time = Some(t1);
            }
        }
        let payoff = payoff.total();
        PathSample {
            payoff,
            x_end: x,
            y_end: y,
            steps: n,
            clamp_steps: 0,
            depletion_time,
            negative_price,
            flagged: !payoff.is_finite(),
        }
    }

    pub fn simulate_path(&self, path_index: u64) -> PathSample {
        match self.cfg.scheme {
            Scheme::EulerGrid { .. } => self.simulate_path_euler(path_index),
            Scheme::ExactEvent { .. } => self.simulate_path_exact(path_index),
        }
    }

    /// All paths, in index order.
    pub fn run_paths(&self) -> Result<Vec<PathSample>> {
        let n = self.cfg.n_paths as u64;
        if self.cfg.workers <= 1 {
            return Ok((0..n).map(|p| self.simulate_path(p)).collect());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.workers)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        Ok(pool.install(|| (0..n).into_par_iter().map(|p| self.simulate_path(p)).collect()))
    }

    pub fn estimate(&self) -> Result<PayoffEstimate> {
        let samples = self.run_paths()?;
        summarize(self.model, self.policy, &self.init, self.cfg, &samples)
    }
}

/// Reduces per-path samples to an estimate, in path order.
pub fn summarize(
    model: &MarketModel,
    policy: &Policy,
    init: &InitialState,
    cfg: &SimConfig,
    samples: &[PathSample],
) -> Result<PayoffEstimate> {
    let total = samples.len();
    let good: Vec<&PathSample> = samples.iter().filter(|s| !s.flagged).collect();
    let flagged = total - good.len();
    if good.is_empty() || flagged as f64 > MAX_FLAGGED_FRACTION * total as f64 {
        return Err(Error::FlaggedPaths { flagged, total });
    }
    let n = good.len() as f64;
    let first = good[0].payoff;
    let (mean, std_error) = if good.iter().all(|s| s.payoff.to_bits() == first.to_bits()) {
        (first, 0.0)
    } else {
        let mean = good.iter().map(|s| s.payoff).collect::<Neumaier>().total() / n;
        let ss = good.iter().map(|s| (s.payoff - mean) * (s.payoff - mean)).collect::<Neumaier>().total();
        let var = if good.len() > 1 { ss / (n - 1.0) } else { 0.0 };
        (mean, (var / n).sqrt())
    };
    let steps: usize = good.iter().map(|s| s.steps).sum();
    let clamp_steps: usize = good.iter().map(|s| s.clamp_steps).sum();
    let depleted: Vec<f64> = good.iter().filter_map(|s| s.depletion_time).collect();
    let mean_x_end_sq = good.iter().map(|s| s.x_end * s.x_end).collect::<Neumaier>().total() / n;
    let mean_abs_y_end = good.iter().map(|s| s.y_end.abs()).collect::<Neumaier>().total() / n;
    let diagnostics = Diagnostics {
        clamp_fraction: if steps > 0 { clamp_steps as f64 / steps as f64 } else { 0.0 },
        mean_depletion_time: (!depleted.is_empty())
            .then(|| depleted.iter().copied().collect::<Neumaier>().total() / depleted.len() as f64),
        depleted_fraction: depleted.len() as f64 / n,
        negative_price_fraction: good.iter().filter(|s| s.negative_price).count() as f64 / n,
        flagged_paths: flagged,
        mean_x_end_sq,
        mean_abs_y_end,
    };
    let truncation_bound = truncation_bound(model, policy, init, cfg.horizon, mean_x_end_sq, mean_abs_y_end)?;
    Ok(PayoffEstimate {
        mean,
        std_error,
        ci95: 1.96 * std_error,
        n_paths: good.len(),
        truncation_bound,
        diagnostics,
        samples: samples.iter().map(|s| s.payoff).collect(),
    })
}

/// `E[X(t)²]` for a policy linear in the price: the regime-weighted second
/// moments solve `m' = m (diag(g) + Q)` with
/// `g_i = 2(μ_i − λκ_i) + σ_i² + I(γ_i)`.
pub fn second_moment(model: &MarketModel, policy: &Policy, init: &InitialState, t: f64) -> Result<Option<f64>> {
    let m = model.regime_count();
    let mut g = Vec::with_capacity(m);
    for i in 0..m {
        let Some(kappa) = policy.gain(i) else { return Ok(None) };
        let reg = &model.regimes[i];
        let jump = solver::jump_integral(model, i, JumpMethod::Auto)?.value;
        g.push(2.0 * (reg.mu - model.lambda * kappa) + reg.sigma * reg.sigma + jump);
    }
    let gen = DMatrix::from_fn(m, m, |i, j| model.switch.rate(i, j) + if i == j { g[i] } else { 0.0 });
    let prop = (gen * t).exp();
    let ones = DVector::from_element(m, 1.0);
    let row = prop.row(init.regime) * ones;
    Ok(Some(init.x0 * init.x0 * row[(0, 0)]))
}

/// Bound on `|E ∫_T^∞ e^{−rt}(Xu − C) dt|`:
/// `e^{−rT}(|A|max·E[X(T)²] + θ·E|Y(T)| + K/r)` for linear policies, with the
/// exact second moment; for a constant rate `u0`, with empirical moments,
/// `e^{−rT}((|u0|·√E[X(T)²] + βu0² + 2θ|u0|)/r + θ·E|Y(T)| + K/r)`.
pub fn truncation_bound(
    model: &MarketModel,
    policy: &Policy,
    init: &InitialState,
    horizon: f64,
    mean_x_end_sq: f64,
    mean_abs_y_end: f64,
) -> Result<f64> {
    let c = &model.cost;
    let tail = (-c.r * horizon).exp();
    let base = c.theta * mean_abs_y_end + c.big_k / c.r;
    Ok(match &policy.kind {
        PolicyKind::ConstantRate { u0 } => {
            let u = u0.abs();
            tail * ((u * mean_x_end_sq.sqrt() + c.beta * u * u + 2.0 * c.theta * u) / c.r + base)
        }
        _ => {
            let x2 = second_moment(model, policy, init, horizon)?.unwrap_or(mean_x_end_sq);
            tail * (policy.largest_abs_a() * x2 + base)
        }
    })
}

/// Runs `cfg.n_paths` paths and summarizes them.
pub fn estimate_payoff(model: &MarketModel, policy: &Policy, init: &InitialState, cfg: &SimConfig) -> Result<PayoffEstimate> {
    Simulator::new(model, policy, *init, cfg)?.estimate()
}

/// Closed-form payoff of the zero policy over `[0, T]`:
/// `−(θy0 + K/r)(1 − e^{−rT})`.
pub fn zero_policy_payoff(model: &MarketModel, init: &InitialState, horizon: f64) -> f64 {
    let c = &model.cost;
    (c.theta * init.y0 + c.big_k / c.r) * (-c.r * horizon).exp_m1()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy::LevyMeasureSpec;
    use crate::model::{reference_example, CostParams, RegimeParams};
    use crate::solver::{solve, SystemMode};

    fn single_regime(mu: f64, sigma: f64, gamma: f64, levy: LevyMeasureSpec) -> MarketModel {
        MarketModel {
            regimes: vec![RegimeParams { mu, sigma, gamma }],
            switch: SwitchGenerator::new(vec![vec![0.0]]),
            levy,
            cost: CostParams { beta: 0.1, theta: 0.01, big_k: 10.0, r: 0.02 },
            lambda: 0.001,
            control_bounds: None,
        }
    }

    fn cfg(scheme: Scheme, horizon: f64, n_paths: usize) -> SimConfig {
        SimConfig { horizon, scheme, n_paths, master_seed: 7, ..SimConfig::default() }
    }

    #[test]
    fn absorbing_chain_never_switches() {
        let path = sample_regime_path(&SwitchGenerator::new(vec![vec![0.0, 0.0], vec![1.0, -1.0]]), 0, 100.0, 3);
        assert!(path.events.is_empty());
        assert_eq!(path.state_at(50.0), 0);
    }

    #[test]
    fn long_run_occupation_matches_stationary_law() {
        let (model, _, _) = reference_example(1).unwrap();
        let path = sample_regime_path(&model.switch, 0, 1e5, 11);
        let occ = path.occupation(2, 1e5);
        assert!((occ[0] / 1e5 - 0.625).abs() < 0.005, "{occ:?}");
    }

    #[test]
    fn mean_holding_time() {
        let (model, _, _) = reference_example(1).unwrap();
        let path = sample_regime_path(&model.switch, 0, 2e5, 5);
        let mut t = 0.0;
        let mut holds = Vec::new();
        let mut state = 0;
        for &(s, next) in &path.events {
            if state == 0 {
                holds.push(s - t);
            }
            t = s;
            state = next;
        }
        let mean = holds.iter().sum::<f64>() / holds.len() as f64;
        let se = (1.0 / 0.3) / (holds.len() as f64).sqrt();
        assert!((mean - 1.0 / 0.3).abs() < 4.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn zero_policy_is_exact_for_both_schemes() {
        let (model, init, _) = reference_example(1).unwrap();
        let expect = zero_policy_payoff(&model, &init, 50.0);
        assert!((expect - -600.0 * (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        for scheme in [Scheme::EulerGrid { dt: 0.01 }, Scheme::ExactEvent { h: 0.1 }] {
            let est = estimate_payoff(&model, &Policy::zero(), &init, &cfg(scheme, 50.0, 20)).unwrap();
            assert!((est.mean - expect).abs() < 1e-12, "{scheme:?}: {} vs {expect}", est.mean);
            assert_eq!(est.std_error, 0.0);
        }
    }

    #[test]
    fn deterministic_feedback_matches_ode() {
        // σ = γ = λ = 0: X' = μX, u = x/(2β), Y' = −u; payoff integrand is
        // x²/(4β) − θx/(2β) − rθY − K, integrated here in closed form.
        let mut model = single_regime(0.03, 0.0, 0.0, LevyMeasureSpec::None);
        model.lambda = 0.0;
        let init = InitialState { x0: 2.0, y0: 100.0, regime: 0 };
        let sol = Solution::from_coefficients(&model, vec![0.0]);
        let (mu, r, beta, theta, big_k) = (0.03_f64, 0.02_f64, 0.1_f64, 0.01_f64, 10.0_f64);
        let horizon = 5.0;
        let x0 = 2.0_f64;
        let kappa = 1.0 / (2.0 * beta);
        let e = |a: f64| ((a * horizon).exp() - 1.0) / a; // ∫_0^T e^{as} ds
        // Y(t) = y0 − κx0(e^{μt} − 1)/μ
        let ey = 100.0 * e(-r) - kappa * x0 / mu * (e(mu - r) - e(-r));
        let exact = x0 * x0 * (kappa - beta * kappa * kappa) * e(2.0 * mu - r)
            - theta * kappa * x0 * e(mu - r)
            - r * theta * ey
            - big_k * e(-r);
        let policy = Policy::feedback(sol);
        let coarse = estimate_payoff(&model, &policy, &init, &cfg(Scheme::EulerGrid { dt: 0.01 }, horizon, 1)).unwrap();
        let fine = estimate_payoff(&model, &policy, &init, &cfg(Scheme::EulerGrid { dt: 0.005 }, horizon, 1)).unwrap();
        let e1 = (coarse.mean - exact).abs();
        let e2 = (fine.mean - exact).abs();
        assert!(e1 < 0.05 * exact.abs().max(1.0) * 0.01 * 10.0, "{e1}");
        assert!(e2 < 0.6 * e1, "first order: {e1} -> {e2}");
        let ex = estimate_payoff(&model, &policy, &init, &cfg(Scheme::ExactEvent { h: 0.01 }, horizon, 1)).unwrap();
        assert!((ex.mean - exact).abs() < 1e-5 * exact.abs(), "{} vs {exact}", ex.mean);
    }

    #[test]
    fn constant_rate_affine_payoff() {
        // μ = σ = γ = r = 0 is not allowed (r > 0), so use a tiny r and the
        // exact discount integral: integrand 2·1 − 0.1 − 0.01 − rθY(t) − 0.
        let mut model = single_regime(0.0, 0.0, 0.0, LevyMeasureSpec::None);
        model.lambda = 0.0;
        model.cost = CostParams { beta: 0.1, theta: 0.01, big_k: 0.0, r: 1e-9 };
        let init = InitialState { x0: 2.0, y0: 1e6, regime: 0 };
        let est = estimate_payoff(&model, &Policy::constant(1.0), &init, &cfg(Scheme::EulerGrid { dt: 0.01 }, 1.0, 1))
            .unwrap();
        let r = 1e-9_f64;
        // ∫ e^{−rt} Y dt with Y = y0 − t, to first order in r.
        let ey = 1e6 * (1.0 - 0.5 * r) - (0.5 - r / 3.0);
        let expect = 1.89 * (1.0 - 0.5 * r) - r * 0.01 * ey;
        // Left-point Y costs rθ·dt/2 in total, far below the tolerance.
        assert!((est.mean - expect).abs() < 1e-9, "{} vs {expect}", est.mean);
    }

    #[test]
    fn exact_scheme_deterministic_exponential() {
        let mut model = single_regime(0.05, 0.0, 0.0, LevyMeasureSpec::None);
        model.lambda = 0.001;
        let sol = Solution::from_coefficients(&model, vec![10.0]);
        let kappa = sol.feedback_gain(0);
        let init = InitialState { x0: 1.5, y0: 10.0, regime: 0 };
        let policy = Policy::feedback(sol);
        for t in [0.3, 1.0, 2.7] {
            let c = cfg(Scheme::ExactEvent { h: 0.1 }, t, 1);
            let s = Simulator::new(&model, &policy, init, &c).unwrap().simulate_path_exact(0);
            let expect = 1.5 * ((0.05 - 0.001 * kappa) * t).exp();
            assert!((s.x_end - expect).abs() < 1e-12 * expect, "{t}: {} vs {expect}", s.x_end);
        }
    }

    #[test]
    fn exact_scheme_second_moment() {
        let model = single_regime(0.05, 0.3, 0.0, LevyMeasureSpec::None);
        let sol = Solution::from_coefficients(&model, vec![20.0]);
        let policy = Policy::feedback(sol);
        let init = InitialState { x0: 1.0, y0: 10.0, regime: 0 };
        let c = cfg(Scheme::ExactEvent { h: 1.0 }, 1.0, 100_000);
        let sim = Simulator::new(&model, &policy, init, &c).unwrap();
        let samples = sim.run_paths().unwrap();
        let x2: Vec<f64> = samples.iter().map(|s| s.x_end * s.x_end).collect();
        let n = x2.len() as f64;
        let mean = x2.iter().sum::<f64>() / n;
        let var = x2.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let expect = second_moment(&model, &policy, &init, 1.0).unwrap().unwrap();
        let kappa = policy.gain(0).unwrap();
        let lognormal = (2.0 * (0.05 - 0.001 * kappa) + 0.09_f64).exp();
        assert!((expect - lognormal).abs() < 1e-12 * lognormal);
        assert!((mean - expect).abs() < 3.0 * (var / n).sqrt(), "{mean} vs {expect}");
    }

    #[test]
    fn second_moment_with_jumps_and_switching_matches_simulation() {
        let (model, init, _) = reference_example(1).unwrap();
        let sol = Solution::from_coefficients(&model, vec![59.178, 47.0599]);
        let policy = Policy::feedback(sol);
        let c = cfg(Scheme::ExactEvent { h: 0.5 }, 2.0, 40_000);
        let samples = Simulator::new(&model, &policy, init, &c).unwrap().run_paths().unwrap();
        let x2: Vec<f64> = samples.iter().map(|s| s.x_end * s.x_end).collect();
        let n = x2.len() as f64;
        let mean = x2.iter().sum::<f64>() / n;
        let var = x2.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let expect = second_moment(&model, &policy, &init, 2.0).unwrap().unwrap();
        assert!((mean - expect).abs() < 4.0 * (var / n).sqrt(), "{mean} vs {expect}");
    }

    #[test]
    fn bookkeeping_identity_for_reserve() {
        let (model, init, _) = reference_example(1).unwrap();
        let c = cfg(Scheme::EulerGrid { dt: 0.25 }, 10.0, 1);
        let policy = Policy::constant(3.0);
        let s = Simulator::new(&model, &policy, init, &c).unwrap().simulate_path_euler(0);
        assert_eq!(s.y_end, init.y0 - 3.0 * 10.0);
    }

    #[test]
    fn same_seed_same_bits_any_worker_count() {
        let (model, init, _) = reference_example(2).unwrap();
        let (_, _, sol) = solve(&model, SystemMode::Formula, None).unwrap();
        let policy = Policy::feedback(sol);
        let mut c = cfg(Scheme::ExactEvent { h: 0.1 }, 2.0, 64);
        c.workers = 1;
        let a = estimate_payoff(&model, &policy, &init, &c).unwrap();
        c.workers = 3;
        let b = estimate_payoff(&model, &policy, &init, &c).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn clamp_counts_and_bounds() {
        let (model, init, _) = reference_example(1).unwrap();
        let sol = Solution::from_coefficients(&model, vec![59.178, 47.0599]);
        let policy = Policy::feedback(sol).with_clamp(0.0, 1.0);
        let est = estimate_payoff(&model, &policy, &init, &cfg(Scheme::EulerGrid { dt: 0.05 }, 2.0, 50)).unwrap();
        assert!(est.diagnostics.clamp_fraction > 0.5);
        let exact = cfg(Scheme::ExactEvent { h: 0.1 }, 2.0, 1);
        assert!(matches!(Simulator::new(&model, &policy, init, &exact), Err(Error::UnsupportedScheme(_))));
    }

    #[test]
    fn exploding_paths_are_flagged() {
        let model = single_regime(5000.0, 0.0, 0.0, LevyMeasureSpec::None);
        let init = InitialState { x0: 1.0, y0: 1.0, regime: 0 };
        let sol = Solution::from_coefficients(&model, vec![0.0]);
        let res = estimate_payoff(&model, &Policy::feedback(sol), &init, &cfg(Scheme::EulerGrid { dt: 0.1 }, 10.0, 10));
        assert!(matches!(res, Err(Error::FlaggedPaths { flagged: 10, total: 10 })), "{res:?}");
    }

    #[test]
    fn common_noise_across_step_sizes() {
        let (model, init, _) = reference_example(1).unwrap();
        let sol = Solution::from_coefficients(&model, vec![59.178, 47.0599]);
        let policy = Policy::feedback(sol);
        let mut runs = Vec::new();
        for dt in [0.04, 0.02, 0.01] {
            let mut c = cfg(Scheme::EulerGrid { dt }, 4.0, 1);
            c.noise_dt = Some(0.01);
            runs.push(Simulator::new(&model, &policy, init, &c).unwrap().simulate_path_euler(3).x_end);
        }
        // Same Brownian path and jumps: endpoints differ only by discretisation
        // error, which shrinks with dt.
        assert!((runs[0] - runs[2]).abs() < 0.1 * runs[2].abs(), "{runs:?}");
        assert!((runs[1] - runs[2]).abs() < (runs[0] - runs[2]).abs(), "{runs:?}");
        let mut c = cfg(Scheme::EulerGrid { dt: 0.015 }, 4.0, 1);
        c.noise_dt = Some(0.01);
        assert!(c.validate().is_err());
    }

    #[test]
    fn discount_moment_series_matches_direct_formula() {
        for x in [0.499_f64, 0.2, 1e-3] {
            let r = 0.02;
            let h = x / r;
            let (s, m) = discount_moments(r, h);
            assert!((s - (1.0 - (-x).exp()) / r).abs() < 1e-12 * s);
            let direct = (1.0 - (-x).exp() * (1.0 + x)) / (r * r);
            assert!((m - direct).abs() < 1e-9 * m.max(1e-300) + 1e-13, "{x}");
        }
    }
}
