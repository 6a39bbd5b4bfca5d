//! Experiment runner: loads a scenario, runs the selected verification
//! suites, and writes `<outdir>/<suite>/<name>.csv|json` plus a report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::equilibrium::{self, Ranking, Strategy};
use crate::error::{Error, Result};
use crate::filter::{self, ParticleConfig};
use crate::kernels::{self, KernelBackend, TransitionKernel};
use crate::model::{self, DerivativeBackend, ModelSpec, Scenario};
use crate::pdesolve;
use crate::simulate::{self, hex, PathEnsemble, Recording, SimConfig, TimeGrid};
use crate::stats;

pub const SCHEMA_VERSION: u32 = 1;
const ALPHA: f64 = 0.01;

#[derive(Debug, Parser)]
#[command(name = "dynbridge", version, about = "Dynamic Markov bridge simulation and verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run verification suites on a scenario.
    Run(RunArgs),
    /// Print a built-in scenario as TOML.
    Scenario {
        #[arg(value_enum)]
        preset: Preset,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Validate,
    Bridge,
    Filter,
    Pde,
    Equilibrium,
    All,
}

impl Suite {
    fn expand(self) -> Vec<Suite> {
        match self {
            Suite::All => vec![Suite::Validate, Suite::Bridge, Suite::Filter, Suite::Pde, Suite::Equilibrium],
            s => vec![s],
        }
    }

    fn name(self) -> &'static str {
        match self {
            Suite::Validate => "validate",
            Suite::Bridge => "bridge",
            Suite::Filter => "filter",
            Suite::Pde => "pde",
            Suite::Equilibrium => "equilibrium",
            Suite::All => "all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    BackPedersen,
    Static,
    SqrtQuadratic,
    Ou,
}

impl Preset {
    pub fn scenario(self) -> Scenario {
        match self {
            Preset::BackPedersen => Scenario::back_pedersen(),
            Preset::Static => Scenario::static_information(),
            Preset::SqrtQuadratic => Scenario::sqrt_quadratic(),
            Preset::Ou => Scenario::ornstein_uhlenbeck(1.0),
        }
    }
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct RunArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: Suite,
    /// Scenario TOML file or preset name (back-pedersen, static, sqrt-quadratic, ou).
    #[arg(long, default_value = "back-pedersen")]
    pub scenario: String,
    #[arg(long = "paths", default_value_t = 2000)]
    pub n_paths: usize,
    #[arg(long, default_value_t = 2048)]
    pub steps: usize,
    #[arg(long = "eps-end", default_value_t = 1e-3)]
    pub eps_end: f64,
    #[arg(long, default_value_t = 20240521)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub outdir: PathBuf,
    /// Worker threads for path-parallel sections; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

/// Fields that determine results; worker count and output location do not.
#[derive(Debug, Serialize)]
struct DigestInput<'a> {
    schema: u32,
    suite: Suite,
    scenario: &'a Scenario,
    n_paths: usize,
    steps: usize,
    eps_end: f64,
    seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub suite: String,
    pub pass: bool,
    pub checks: Vec<Check>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub schema_version: u32,
    pub config_digest: String,
    pub seed: u64,
    pub scenario: String,
    pub suites: Vec<SuiteResult>,
    pub pass: bool,
}

/// Loads a scenario from a TOML file, falling back to a preset name.
pub fn load_scenario(spec: &str) -> Result<Scenario> {
    let path = Path::new(spec);
    if path.exists() {
        let text = std::fs::read_to_string(path)?;
        return Scenario::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())));
    }
    match Preset::from_str(spec, true) {
        Ok(p) => Ok(p.scenario()),
        Err(_) => Err(Error::Config(format!("{spec} is neither a scenario file nor a preset"))),
    }
}

struct Ctx<'a> {
    args: &'a RunArgs,
    scenario: &'a Scenario,
    model: Arc<ModelSpec>,
    digest: String,
    dir: PathBuf,
    files: Vec<String>,
    checks: Vec<Check>,
}

impl Ctx<'_> {
    fn check(&mut self, name: &str, pass: bool, detail: Value) {
        self.checks.push(Check { name: name.into(), pass, detail });
    }

    fn fail(&mut self, name: &str, err: &Error) {
        self.check(name, false, json!({ "error": err.to_string() }));
    }

    fn sim(&self, n_paths: usize) -> SimConfig {
        SimConfig::new(n_paths, self.args.seed).workers(self.args.workers)
    }

    /// CSV with a `#` comment line carrying the seed and config digest.
    fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
        let path = self.dir.join(format!("{name}.csv"));
        let mut text = format!("# seed={} config_digest={}\n", self.args.seed, self.digest);
        text.push_str(&header.join(","));
        text.push('\n');
        for r in rows {
            let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        std::fs::write(&path, text)?;
        self.files.push(path.display().to_string());
        Ok(())
    }

    fn write_ensemble(&mut self, name: &str, ens: &PathEnsemble) -> Result<()> {
        let names: Vec<&str> = ens.series.keys().map(|s| s.as_str()).collect();
        let mut header = vec!["path", "t"];
        header.extend(&names);
        let mut rows = Vec::with_capacity(ens.n_paths() * ens.times.len());
        for p in 0..ens.n_paths() {
            for (k, &t) in ens.times.iter().enumerate() {
                let mut r = vec![p as f64, t];
                r.extend(names.iter().map(|n| ens.series[*n][p][k]));
                rows.push(r);
            }
        }
        self.write_csv(name, &header, &rows)
    }

    fn finish(self, suite: Suite) -> Result<SuiteResult> {
        let pass = self.checks.iter().all(|c| c.pass);
        let path = self.dir.join("summary.json");
        let mut files = self.files;
        files.push(path.display().to_string());
        let result = SuiteResult { suite: suite.name().into(), pass, checks: self.checks, files };
        let body = json!({
            "schema_version": SCHEMA_VERSION,
            "config_digest": self.digest,
            "config": self.args,
            "scenario": self.scenario,
            "result": result,
        });
        std::fs::write(&path, serde_json::to_string_pretty(&body)? + "\n")?;
        Ok(result)
    }
}

fn validate_suite(ctx: &mut Ctx) -> Result<()> {
    let report = model::validate(&ctx.model);
    for c in &report.checks {
        ctx.check(&c.name, c.pass, json!({ "value": c.value, "witness": c.witness }));
    }
    let rows: Vec<Vec<f64>> = report.checks.iter().map(|c| vec![c.pass as u8 as f64, c.value]).collect();
    ctx.write_csv("assumptions", &["pass", "value"], &rows)?;
    Ok(())
}

fn gap_table(ens: &PathEnsemble) -> Result<Vec<Vec<f64>>> {
    (0..ens.times.len())
        .map(|k| {
            let gaps: Vec<f64> = ens.column("X", k)?.iter().zip(ens.column("Z", k)?).map(|(x, z)| (x - z).abs()).collect();
            Ok(vec![ens.times[k], stats::median(&gaps), stats::mean(&gaps)])
        })
        .collect()
}

fn bridge_suite(ctx: &mut Ctx, kernel: &TransitionKernel) -> Result<()> {
    let grid = TimeGrid::geometric(ctx.args.steps, ctx.args.eps_end)?;
    let cfg = ctx.sim(ctx.args.n_paths);
    let ens = if let Some(k) = kernel.transform().ou_rate() {
        let ou = simulate::simulate_ou_bridge(kernel, &grid, &cfg)?;
        let (t, b) = simulate::ou_coupling_end(&ctx.model, k)?;
        ctx.check("coupling reaches one", (b - 1.0).abs() < 1e-8, json!({ "t": t, "b": b }));
        ou.ensemble
    } else {
        simulate::simulate_bridge(kernel, &grid, &cfg)?
    };
    let table = gap_table(&ens)?;
    let pick = |t: f64| table[ens.index_of(t)][1];
    let (g9, g99, gend) = (pick(0.9), pick(0.99), pick(grid.end()));
    ctx.check(
        "gap decays",
        g9 > g99 && g99 > gend && gend < 0.05,
        json!({ "median_0.9": g9, "median_0.99": g99, "median_end": gend, "halvings": ens.halvings, "clipped": ens.clipped }),
    );
    // In the mean-reverting case X is an OU process in its own filtration,
    // so e^{kt}·X_t is the martingale to test.
    let rate = kernel.transform().ou_rate().unwrap_or(0.0);
    let mut cols = ens.columns_at("X", &equilibrium::REGRESSION_TIMES)?;
    for (col, t) in cols.iter_mut().zip(equilibrium::REGRESSION_TIMES) {
        let t = ens.times[ens.index_of(t)];
        col.iter_mut().for_each(|x| *x *= (rate * t).exp());
    }
    let own = stats::own_past_regression(&cols, 3, ALPHA)?;
    ctx.check("own-past martingale", own.verdict.pass, serde_json::to_value(&own.verdict)?);
    if ens.series.contains_key("Y") {
        let mean_abs = |t: f64| -> Result<f64> { Ok(stats::mean(&ens.column("Y", ens.index_of(t))?.iter().map(|y| y.abs()).collect::<Vec<_>>())) };
        let (y9, y99, yend) = (mean_abs(0.9)?, mean_abs(0.99)?, mean_abs(grid.end())?);
        ctx.check("comparison process shrinks", y9 > y99 && y99 > yend, json!({ "mean_abs_0.9": y9, "mean_abs_0.99": y99, "mean_abs_end": yend }));
    }
    if ctx.model.coeff.is_constant() == Some(1.0) && kernel.transform().ou_rate().is_none() {
        let sm = simulate::supermartingale_diagnostic(&ctx.model, &ens, 2.0)?;
        ctx.check("phi supermartingale", sm.pass, json!({ "worst_rise_se": sm.worst_rise }));
    }
    ctx.write_csv("gap_decay", &["t", "median_gap", "mean_gap"], &table)?;
    ctx.write_ensemble("paths", &ens)?;
    Ok(())
}

fn filter_suite(ctx: &mut Ctx, kernel: &TransitionKernel) -> Result<()> {
    let tr = kernel.transform();
    if ctx.model.coeff.is_constant() == Some(1.0) && tr.ou_rate().is_none() {
        let grid = TimeGrid::geometric(ctx.args.steps, ctx.args.eps_end)?;
        let n = ctx.args.n_paths.min(20);
        let ens = simulate::simulate_bridge(kernel, &grid, &ctx.sim(n).recording(Recording::All))?;
        let (mut g_err, mut z_err) = (0.0f64, 0.0f64);
        for p in 0..n {
            let kb = filter::kalman_bucy(&ctx.model, &ens.times, ens.path("X", p)?)?;
            g_err = g_err.max(kb.gamma_error);
            z_err = z_err.max(kb.tracking_error);
        }
        ctx.check("kalman-bucy", g_err < 1e-10 && z_err < 1e-8, json!({ "gamma_error": g_err, "tracking_error": z_err }));
    }
    let pts = [(0.1, 0.0), (0.5, 0.7), (0.9, -1.2)];
    let ks = filter::ks_consistency(kernel, &pts)?;
    ctx.check("filtered drift", ks.max_abs < 1e-8, serde_json::to_value(&ks)?);
    if tr.b_is_time_only() {
        let grid = TimeGrid::uniform(1000, 0.2)?;
        let ens = simulate::simulate_transformed(kernel, &grid, &ctx.sim(1).recording(Recording::All))?;
        let rs = ens.path("R", 0)?;
        let out = filter::particle_filter(kernel, &ens.times, rs, &ParticleConfig::new(2000, ctx.args.seed))?;
        let mut rows = Vec::new();
        let mut worst = 0.0f64;
        for (i, &t) in ens.times.iter().enumerate() {
            let v = ctx.model.v(t);
            let (m, var) = (rs[i] + tr.b_int(t, v)?, v - t);
            let ess = if i == 0 { 2000.0 } else { out.ess[i - 1] };
            if [0.25, 0.5, 0.75].iter().any(|&c| ens.index_of(c) == i) {
                worst = worst.max((out.u_mean[i] - m).abs() / (var / ess).sqrt());
            }
            rows.push(vec![t, rs[i], out.u_mean[i], out.u_var[i], m, var, ess]);
        }
        ctx.check("particle posterior", worst < 4.0, json!({ "worst_se": worst, "min_ess": out.min_ess(), "resamples": out.resamples }));
        ctx.write_csv("particle", &["t", "R", "u_mean", "u_var", "exact_mean", "exact_var", "ess"], &rows)?;
    }
    Ok(())
}

fn pde_suite(ctx: &mut Ctx, kernel: &TransitionKernel) -> Result<()> {
    let mut rows = Vec::new();
    let coeff_tol = match ctx.scenario.derivatives {
        DerivativeBackend::Analytic => 1e-8,
        DerivativeBackend::FiniteDifference => 1e-4,
    };
    let mut worst = 0.0f64;
    for i in 0..=10 {
        for j in 0..=12 {
            let (t, z) = (i as f64 / 10.0, -3.0 + 0.5 * j as f64);
            worst = worst.max(model::pde_residual(&ctx.model.coeff, t, z).abs());
        }
    }
    let pass = worst < coeff_tol || !ctx.model.coeff.equilibrium_ready();
    ctx.check("volatility equation", pass, json!({ "max_abs": worst, "tolerance": coeff_tol }));
    rows.push(vec![0.0, worst, coeff_tol]);
    let closed = kernel.is_closed();
    let pts: Vec<(f64, f64, f64)> = if closed {
        [0.1, 0.4, 0.8].iter().flat_map(|&t| [-1.0, 0.0, 0.5].into_iter().flat_map(move |x| [-0.5, 0.3].into_iter().map(move |z| (t, x, x + z)))).collect()
    } else {
        vec![(0.2, 0.0, 0.1)]
    };
    let tol = if closed { 1e-6 } else { 5e-2 };
    let jd = pdesolve::joint_density_residual(kernel, &pts, tol)?;
    ctx.check("joint density equation", jd.pass, serde_json::to_value(&jd)?);
    rows.push(vec![1.0, jd.max_abs, jd.tolerance]);
    if closed {
        let numeric = TransitionKernel::build(kernel.transform().clone(), KernelBackend::Numeric)?;
        let (t, x, u) = (0.2, 0.1, 0.6);
        let surf = numeric.numeric_surface(t, x, u)?;
        let mut l1 = 0.0;
        for i in 0..surf.nz {
            l1 += (surf.last()[i] - kernel.gamma(t, x, u, surf.z(i))?).abs() * surf.dz;
        }
        ctx.check("numeric kernel", l1 < 1e-3, json!({ "l1": l1 }));
        rows.push(vec![2.0, l1, 1e-3]);
        if ctx.model.payoff.is_some() && ctx.model.coeff.equilibrium_ready() {
            let pricing = kernels::build_pricing(Arc::new(TransitionKernel::for_model((*ctx.model).clone())?))?;
            let pp: Vec<(f64, f64)> = [0.1, 0.5, 0.8].iter().flat_map(|&t| [-1.0, 0.0, 1.0].into_iter().map(move |x| (t, x))).collect();
            let r = pdesolve::pricing_pde_residual(&pricing, &pp, coeff_tol, PRICING_FLOOR)?;
            ctx.check("pricing equations", r.pass(), serde_json::to_value(&r)?);
            rows.push(vec![3.0, r.w.max_abs, r.w.tolerance]);
            rows.push(vec![4.0, r.h.max_abs, r.h.tolerance]);
            rows.push(vec![5.0, r.f.max_abs, r.f.tolerance]);
        }
    }
    if ctx.model.coeff.is_constant() == Some(1.0) && kernel.transform().ou_rate().is_none() {
        let pts: Vec<(f64, f64, f64)> = [0.0, 0.5, 0.9, 0.99].iter().map(|&t| (t, 0.3, -0.1)).collect();
        let r = pdesolve::phi_pde_residual(&ctx.model, &pts, 1e-7);
        ctx.check("phi equation", r.pass, serde_json::to_value(&r)?);
        rows.push(vec![6.0, r.max_abs, r.tolerance]);
    }
    ctx.write_csv("residuals", &["check", "max_abs", "tolerance"], &rows)?;
    Ok(())
}

/// Documented floor for the H and F residuals: centred differences of the
/// pricing quadrature with steps 1e-4 in t and 1e-3 in x, measured near 2e-9.
pub const PRICING_FLOOR: f64 = 1e-7;

fn equilibrium_suite(ctx: &mut Ctx, kernel: Arc<TransitionKernel>) -> Result<()> {
    if ctx.model.payoff.is_none() || ctx.model.ou_rate().is_some() {
        ctx.check("skipped", true, json!({ "reason": "scenario has no payoff or uses the mean-reverting signal" }));
        return Ok(());
    }
    if !ctx.model.coeff.equilibrium_ready() {
        ctx.check("skipped", true, json!({ "reason": "coefficient does not solve the volatility equation" }));
        return Ok(());
    }
    let pricing = kernels::build_pricing(kernel)?;
    let grid = TimeGrid::uniform(ctx.args.steps, ctx.args.eps_end)?;
    let cfg = ctx.sim(ctx.args.n_paths);
    let best = equilibrium::run_market(&pricing, &Strategy::optimal(), &grid, &cfg)?;
    let (m, se) = best.mean_wealth();
    let (psi_v, psi_se) = equilibrium::expected_value_via_psi(&pricing, 200, ctx.args.seed)?;
    let tol = 3.0 * (se * se + psi_se * psi_se).sqrt();
    ctx.check("wealth equals value", (m - psi_v).abs() <= tol, json!({ "mean": m, "se": se, "psi": psi_v, "psi_se": psi_se }));
    let br = equilibrium::brownianity_tests(&best, ALPHA)?;
    ctx.check("order flow brownian", br.pass, serde_json::to_value(&br)?);
    let s_cols = best.ensemble.columns_at("S", &equilibrium::REGRESSION_TIMES)?;
    let mut worst_p = 1.0f64;
    for k in 0..s_cols.len() - 1 {
        let inc: Vec<f64> = s_cols[k + 1].iter().zip(&s_cols[k]).map(|(b, a)| b - a).collect();
        worst_p = worst_p.min(stats::mean_zero_test(&inc, ALPHA)?.p_value);
    }
    let level = stats::bonferroni(ALPHA, s_cols.len() - 1);
    ctx.check("price martingale", worst_p > level, json!({ "min_p": worst_p, "level": level }));
    let alts = [Strategy::zero(), Strategy::scaled(0.5), Strategy::scaled(2.0), Strategy::naive()];
    let cmp = equilibrium::compare_with(&best, &pricing, &alts, &grid, &cfg, ALPHA)?;
    let not_beaten = cmp.rows.iter().all(|r| r.ranking != Ranking::AlternativeHigher);
    let beats_zero = cmp.rows[0].ranking == Ranking::OptimalHigher;
    ctx.check("optimal demand not beaten", not_beaten && beats_zero, serde_json::to_value(&cmp)?);
    let pts: Vec<(f64, f64)> = [0.2, 0.5, 0.8].iter().flat_map(|&t| [-0.5, 0.5].into_iter().map(move |x| (t, x))).collect();
    let rp = equilibrium::verify_rational_pricing(&pricing, &pts, 1000, 100, ctx.args.seed, ALPHA)?;
    ctx.check("rational pricing", rp.pass, serde_json::to_value(&rp)?);
    let alt = &best.ensemble.path_stats["wealth_alt"];
    let adm = &best.ensemble.path_stats["admissibility"];
    let rows: Vec<Vec<f64>> = best.wealth().iter().enumerate().map(|(p, w)| vec![p as f64, *w, alt[p], adm[p]]).collect();
    ctx.write_csv("wealth", &["path", "wealth", "wealth_alt", "admissibility"], &rows)?;
    let rows: Vec<Vec<f64>> = std::iter::once(vec![1.0, m, se]).chain(cmp.rows.iter().map(|r| vec![0.0, r.mean, r.se])).collect();
    ctx.write_csv("comparison", &["is_optimal", "mean_wealth", "se"], &rows)?;
    Ok(())
}

fn run_suite(ctx: &mut Ctx, suite: Suite) -> Result<()> {
    if suite == Suite::Validate {
        return validate_suite(ctx);
    }
    let kernel = Arc::new(TransitionKernel::for_model((*ctx.model).clone())?);
    match suite {
        Suite::Bridge => bridge_suite(ctx, &kernel),
        Suite::Filter => filter_suite(ctx, &kernel),
        Suite::Pde => pde_suite(ctx, &kernel),
        Suite::Equilibrium => equilibrium_suite(ctx, kernel),
        Suite::Validate | Suite::All => unreachable!("expanded before dispatch"),
    }
}

/// Runs the selected suites. Config errors come back as `Err`; suite
/// failures are recorded in the outcome.
pub fn run(args: &RunArgs) -> Result<RunOutcome> {
    if args.n_paths < stats::MIN_SAMPLES {
        return Err(Error::Config(format!("--paths must be at least {}", stats::MIN_SAMPLES)));
    }
    TimeGrid::uniform(args.steps, args.eps_end)?;
    let scenario = load_scenario(&args.scenario)?;
    let model = Arc::new(scenario.build()?);
    let digest = {
        let input = DigestInput {
            schema: SCHEMA_VERSION,
            suite: args.suite,
            scenario: &scenario,
            n_paths: args.n_paths,
            steps: args.steps,
            eps_end: args.eps_end,
            seed: args.seed,
        };
        hex(&Sha256::digest(serde_json::to_vec(&input)?))
    };
    let mut suites = Vec::new();
    for suite in args.suite.expand() {
        let dir = args.outdir.join(suite.name());
        std::fs::create_dir_all(&dir)?;
        let mut ctx = Ctx { args, scenario: &scenario, model: model.clone(), digest: digest.clone(), dir, files: Vec::new(), checks: Vec::new() };
        match run_suite(&mut ctx, suite) {
            Ok(()) => {}
            // numeric kernels are outside the path simulators by design
            Err(e @ Error::BackendMismatch(_)) => ctx.check("skipped", true, json!({ "reason": e.to_string() })),
            Err(e) => ctx.fail("suite error", &e),
        }
        suites.push(ctx.finish(suite)?);
    }
    let pass = suites.iter().all(|s| s.pass);
    let outcome = RunOutcome { schema_version: SCHEMA_VERSION, config_digest: digest, seed: args.seed, scenario: scenario.name.clone(), suites, pass };
    std::fs::write(args.outdir.join("summary.json"), serde_json::to_string_pretty(&outcome)? + "\n")?;
    std::fs::write(args.outdir.join("report.txt"), report(&outcome))?;
    Ok(outcome)
}

/// Human-readable report; the timestamp lives only here.
pub fn report(outcome: &RunOutcome) -> String {
    let secs = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let mut s = String::new();
    let _ = writeln!(s, "dynbridge report (unix time {secs})");
    let _ = writeln!(s, "scenario {}  seed {}  config {}", outcome.scenario, outcome.seed, outcome.config_digest);
    for suite in &outcome.suites {
        let _ = writeln!(s, "\n[{}] {}", suite.suite, if suite.pass { "PASS" } else { "FAIL" });
        for c in &suite.checks {
            let _ = writeln!(s, "  {:<4} {}", if c.pass { "ok" } else { "FAIL" }, c.name);
        }
    }
    let _ = writeln!(s, "\noverall: {}", if outcome.pass { "PASS" } else { "FAIL" });
    s
}

/// Entry point; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match cli.command {
        Command::Scenario { preset } => match preset.scenario().to_toml() {
            Ok(t) => {
                print!("{t}");
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
        Command::Run(args) => match run(&args) {
            Ok(outcome) => {
                for suite in &outcome.suites {
                    println!("{:<12} {}", suite.suite, if suite.pass { "PASS" } else { "FAIL" });
                    for c in suite.checks.iter().filter(|c| !c.pass) {
                        println!("  failed: {} {}", c.name, c.detail);
                    }
                }
                if outcome.pass {
                    0
                } else {
                    1
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
    }
}
