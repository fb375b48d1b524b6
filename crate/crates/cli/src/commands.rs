use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use levex_core::sim::{self, Scheme, SimConfig};
use levex_core::solver::{self, Period, QuadraticSystem, RootSet, Solution, SystemMode};
use levex_core::verify::{self, sig6, CrosscheckRow, McComparison, ResidualMethod, ResidualReport};
use levex_core::{json, Error, InitialState, MarketModel, ModelConfig, Policy, PrintedFixture, Result};
use serde::Serialize;

use crate::{Cli, Command, CurvesArgs, Mode, Outcome, PolicyArg, SimFlags, SimulateArgs};

/// Closed-form and quadrature jump integrals must agree this closely.
const CROSSCHECK_TOL: f64 = 1e-8;
/// Bound on `max |H| / (1 + x²)`.
const RESIDUAL_TOL: f64 = 1e-6;

pub fn run(cli: &Cli) -> Result<Outcome> {
    let mut out = Artifacts::new(&cli.out_dir)?;
    match &cli.command {
        Command::Solve { model, mode } => solve(&mut out, model, *mode),
        Command::Curves(args) => curves(&mut out, args),
        Command::Simulate(args) => simulate(&mut out, args),
        Command::Verify { model, mode, sim } => verify(&mut out, model, *mode, sim),
        Command::Reproduce { example } => reproduce(&mut out, *example),
    }
}

/// Files written by one command, followed by its manifest.
struct Artifacts {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    source: &'a str,
    mode: Option<SystemMode>,
    master_seed: Option<u64>,
    version: &'a str,
    /// Seconds since the Unix epoch. Only the manifest carries a timestamp.
    timestamp: u64,
    outputs: Vec<String>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new() })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, contents)?;
        self.written.push(path.clone());
        Ok(path)
    }

    fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        self.write(name, &json::to_string(value)?)
    }

    /// Must be the last write of a run.
    fn finish(&self, command: &str, source: &str, mode: Option<SystemMode>, master_seed: Option<u64>) -> Result<()> {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let manifest = RunManifest {
            command,
            source,
            mode,
            master_seed,
            version: env!("CARGO_PKG_VERSION"),
            timestamp,
            outputs: self.written.iter().map(|p| p.display().to_string()).collect(),
        };
        fs::write(self.dir.join(format!("{command}.manifest.json")), json::to_string(&manifest)?)?;
        Ok(())
    }
}

struct Loaded {
    model: MarketModel,
    init: InitialState,
    printed: Option<PrintedFixture>,
}

fn load_model(source: &str) -> Result<Loaded> {
    let example = match source {
        "example1" => Some(1),
        "example2" => Some(2),
        _ => None,
    };
    if let Some(n) = example {
        let (model, init, printed) = levex_core::model::reference_example(n)?;
        return Ok(Loaded { model, init, printed: Some(printed) });
    }
    let config = ModelConfig::from_path(source)
        .map_err(|e| Error::InvalidModel(format!("{source}: {e}")))?;
    let (model, init) = config.into_parts()?;
    Ok(Loaded { model, init, printed: None })
}

fn system_mode(mode: Mode) -> SystemMode {
    match mode {
        Mode::Formula => SystemMode::Formula,
        Mode::Printed => SystemMode::Printed,
    }
}

fn solve_loaded(loaded: &Loaded, mode: Mode) -> Result<(QuadraticSystem, RootSet, Solution)> {
    let result = solver::solve(&loaded.model, system_mode(mode), loaded.printed.as_ref())?;
    for w in &result.2.warnings {
        eprintln!("warning: {w}");
    }
    Ok(result)
}

fn value_formula(sol: &Solution, i: usize) -> String {
    let signed = |v: f64| if v < 0.0 { format!("- {}", sig6(-v)) } else { format!("+ {}", sig6(v)) };
    format!("V(x, y, {}) = {} x^2 {} y {}", i + 1, sig6(sol.a[i]), signed(sol.b), signed(sol.c))
}

#[derive(Serialize)]
struct RootsArtifact<'a> {
    system: &'a QuadraticSystem,
    roots: &'a RootSet,
}

fn solve(out: &mut Artifacts, source: &str, mode: Mode) -> Result<Outcome> {
    let loaded = load_model(source)?;
    let (sys, roots, sol) = solve_loaded(&loaded, mode)?;
    out.write_json("solution.json", &sol)?;
    out.write_json("roots.json", &RootsArtifact { system: &sys, roots: &roots })?;

    let a: Vec<String> = sol.a.iter().map(|&v| sig6(v)).collect();
    println!("A = ({})", a.join(", "));
    for i in 0..sol.a.len() {
        println!(
            "regime {}: u* = {} x per year, {} x per day",
            i + 1,
            sig6(sol.rate_at(1.0, i, Period::Yearly)),
            sig6(sol.rate_at(1.0, i, Period::Daily))
        );
    }
    for i in 0..sol.a.len() {
        println!("{}", value_formula(&sol, i));
    }
    out.finish("solve", source, Some(system_mode(mode)), None)?;
    Ok(Outcome::Ok)
}

/// A solution artifact when `source` is one, otherwise a model to solve.
fn load_solution(source: &str, mode: Mode) -> Result<Solution> {
    if let Ok(text) = fs::read_to_string(source) {
        if let Ok(sol) = serde_json::from_str::<Solution>(&text) {
            return Ok(sol);
        }
    }
    let loaded = load_model(source)?;
    Ok(solve_loaded(&loaded, mode)?.2)
}

fn price_grid(x_min: f64, x_max: f64, points: usize) -> Result<Vec<f64>> {
    if points == 0 || !x_min.is_finite() || !x_max.is_finite() || x_min > x_max {
        return Err(Error::InvalidArgument(format!("empty price range [{x_min}, {x_max}] with {points} points")));
    }
    if x_min == x_max || points == 1 {
        return Ok(vec![x_min]);
    }
    let step = (x_max - x_min) / (points - 1) as f64;
    let mut grid: Vec<f64> = (0..points).map(|k| x_min + step * k as f64).collect();
    grid[points - 1] = x_max;
    Ok(grid)
}

fn curves(out: &mut Artifacts, args: &CurvesArgs) -> Result<Outcome> {
    let sol = load_solution(&args.source, args.mode)?;
    let m = sol.a.len();
    let regimes: Vec<usize> = if args.regimes.is_empty() { (1..=m).collect() } else { args.regimes.clone() };
    if let Some(bad) = regimes.iter().find(|&&i| i == 0 || i > m) {
        return Err(Error::InvalidArgument(format!("regime {bad} out of range 1..={m}")));
    }
    let grid = price_grid(args.x_min, args.x_max, args.points)?;
    let mut csv = String::from("x,regime,V\n");
    for &i in &regimes {
        for &x in &grid {
            writeln!(csv, "{x},{i},{}", sol.value_at(x, args.y, i - 1)).unwrap();
        }
    }
    let path = out.write(&args.output, &csv)?;
    println!("wrote {} rows to {}", grid.len() * regimes.len(), path.display());
    out.finish("curves", &args.source, Some(system_mode(args.mode)), None)?;
    Ok(Outcome::Ok)
}

fn sim_config(flags: &SimFlags) -> SimConfig {
    let scheme = match flags.dt {
        Some(dt) => Scheme::EulerGrid { dt },
        None => Scheme::ExactEvent { h: flags.exact.unwrap_or(0.1) },
    };
    SimConfig {
        horizon: flags.horizon,
        scheme,
        eps: flags.eps,
        n_paths: flags.paths,
        master_seed: flags.seed,
        noise_dt: None,
        workers: flags.workers.max(1),
    }
}

#[derive(Serialize)]
struct EstimateArtifact<'a> {
    model: ModelConfig,
    source: &'a str,
    mode: Option<SystemMode>,
    policy: &'a Policy,
    sim: &'a SimConfig,
    estimate: &'a levex_core::PayoffEstimate,
    /// `V(x0, y0, i0)` for the feedback policy.
    value: Option<f64>,
}

fn simulate(out: &mut Artifacts, args: &SimulateArgs) -> Result<Outcome> {
    let loaded = load_model(&args.model)?;
    let cfg = sim_config(&args.sim);
    cfg.validate()?;
    let (mut policy, mode, solution) = match args.policy {
        PolicyArg::Feedback => {
            let sol = solve_loaded(&loaded, args.mode)?.2;
            (Policy::feedback(sol.clone()), Some(system_mode(args.mode)), Some(sol))
        }
        PolicyArg::Zero => (Policy::zero(), None, None),
        PolicyArg::Constant => (Policy::constant(args.u0), None, None),
    };
    let clamp = match (&args.clamp, matches!(cfg.scheme, Scheme::EulerGrid { .. })) {
        (Some(v), _) => Some([v[0], v[1]]),
        (None, true) => loaded.model.control_bounds,
        (None, false) => None,
    };
    if let Some([lo, hi]) = clamp {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!("clamp needs lo <= hi, got [{lo}, {hi}]")));
        }
        policy = policy.with_clamp(lo, hi);
    }
    let estimate = sim::estimate_payoff(&loaded.model, &policy, &loaded.init, &cfg)?;
    let value = solution.as_ref().map(|s| s.value_at(loaded.init.x0, loaded.init.y0, loaded.init.regime));

    let artifact = EstimateArtifact {
        model: ModelConfig::from_parts(&loaded.model, &loaded.init),
        source: &args.model,
        mode,
        policy: &policy,
        sim: &cfg,
        estimate: &estimate,
        value,
    };
    out.write_json("estimate.json", &artifact)?;
    if args.per_path {
        let mut csv = String::from("path_index,payoff_sample\n");
        for (k, v) in estimate.samples.iter().enumerate() {
            writeln!(csv, "{k},{v}").unwrap();
        }
        out.write("paths.csv", &csv)?;
    }

    println!(
        "mean = {} +/- {} (95%), std error {}, {} paths",
        sig6(estimate.mean),
        sig6(estimate.ci95),
        sig6(estimate.std_error),
        estimate.n_paths
    );
    println!("truncation bound beyond T = {}: {}", cfg.horizon, sig6(estimate.truncation_bound));
    if let Some(v) = value {
        println!("V(x0, y0, i0) = {}", sig6(v));
    }
    out.finish("simulate", &args.model, mode, Some(cfg.master_seed))?;
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct Check {
    name: String,
    pass: bool,
    detail: String,
}

#[derive(Serialize)]
struct VerifyArtifact<'a> {
    source: &'a str,
    mode: SystemMode,
    solution: &'a Solution,
    crosscheck: &'a [CrosscheckRow],
    residuals: &'a [ResidualReport],
    monte_carlo: &'a McComparison,
    sim: &'a SimConfig,
    checks: &'a [Check],
    pass: bool,
}

fn verify(out: &mut Artifacts, source: &str, mode: Mode, flags: &SimFlags) -> Result<Outcome> {
    let loaded = load_model(source)?;
    let cfg = sim_config(flags);
    cfg.validate()?;
    let (_, _, sol) = solve_loaded(&loaded, mode)?;
    let mut checks = Vec::new();

    let rows = verify::coefficient_crosscheck(&loaded.model)?;
    for row in &rows {
        let (pass, detail) = match row.abs_diff {
            Some(d) => (
                d <= CROSSCHECK_TOL * row.i_quadrature.abs().max(1.0),
                format!("closed {} vs quadrature {}, diff {:.3e}", sig6(row.i_closed.unwrap()), sig6(row.i_quadrature), d),
            ),
            None => (true, format!("quadrature only: {}", sig6(row.i_quadrature))),
        };
        checks.push(Check { name: format!("jump integral, regime {}", row.regime), pass, detail });
    }

    let grid = verify::default_grid();
    let mut residuals = Vec::new();
    for method in [ResidualMethod::SemiAnalytic, ResidualMethod::Quadrature] {
        let report = verify::hjb_residual(&loaded.model, &sol, &grid, method)?;
        let pass = report.max_scaled <= RESIDUAL_TOL && report.y_spread <= RESIDUAL_TOL;
        checks.push(Check {
            name: format!("HJB residual ({method:?})"),
            pass,
            detail: format!("max |H|/(1+x^2) = {:.3e}, y spread {:.3e}", report.max_scaled, report.y_spread),
        });
        residuals.push(report);
    }

    let mc = verify::mc_vs_value_refined(&loaded.model, &sol, &loaded.init, &cfg)?;
    checks.push(Check {
        name: "Monte Carlo vs V".into(),
        pass: mc.pass,
        detail: format!(
            "mean {} vs V {}, |diff| {} <= tolerance {}; std error/|V| = {}",
            sig6(mc.estimate.mean),
            sig6(mc.value),
            sig6((mc.estimate.mean - mc.value).abs()),
            sig6(mc.tolerance),
            sig6(mc.relative_std_error)
        ),
    });

    let pass = checks.iter().all(|c| c.pass);
    for c in &checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    out.write_json(
        "verify.json",
        &VerifyArtifact {
            source,
            mode: system_mode(mode),
            solution: &sol,
            crosscheck: &rows,
            residuals: &residuals,
            monte_carlo: &mc,
            sim: &cfg,
            checks: &checks,
            pass,
        },
    )?;
    out.finish("verify", source, Some(system_mode(mode)), Some(cfg.master_seed))?;
    Ok(if pass { Outcome::Ok } else { Outcome::VerifyFailed })
}

fn reproduce(out: &mut Artifacts, example: u32) -> Result<Outcome> {
    let report = verify::reproduce_example(example)?;
    print!("{}", report.to_text());
    out.write_json(&format!("reproduce-{example}.json"), &report)?;
    out.finish("reproduce", &format!("example{example}"), None, None)?;
    Ok(Outcome::Ok)
}
