//! Command-line front end.
//!
//! The config file is flat `key = value` text with `#` comments. The
//! command itself is a config key, so a whole run is reproducible from the
//! config bytes alone; every JSON report embeds the raw config echo and
//! the effective seed. Exit codes: 0 success, 1 usage error, 2 invalid
//! config, 3 numerical failure.

use crate::dynamics::init_trajectory;
use crate::report;
use crate::rng::{derive_rng, tag};
use crate::schedule::{LogBase, StepSchedule};
use crate::stats::{
    self, run_campaign, CampaignSpec, CollectFlags, DensityExport, GaussianModel,
    MonteCarloReport, NoiseModel,
};
use crate::system::{
    self, calibrate_noise_identity_pr, random_system, NoiseSource, TwoTimeScaleSystem,
};
use crate::tdc::{self, Policy, TdcInstance, TdcNoiseMode};
use crate::theory::{
    self, compute_pack, corollary1_targets, err_rates, lower_bound, optimize_theorem1,
    theorem1_bound,
};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Usage(_) => 1,
            RunError::Config(_) => 2,
            RunError::Numeric(_) => 3,
        }
    }
}

fn config_err<E: std::fmt::Display>(e: E) -> RunError {
    RunError::Config(e.to_string())
}

fn numeric_err<E: std::fmt::Display>(e: E) -> RunError {
    RunError::Numeric(e.to_string())
}

/// Flat namespaced key = value configuration.
pub struct Config {
    values: BTreeMap<String, String>,
    /// Raw file bytes, echoed into every report.
    pub echo: String,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, RunError> {
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                RunError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Config { values, echo: text.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, RunError> {
        self.get(key).ok_or_else(|| RunError::Config(format!("missing key: {key}")))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, RunError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| RunError::Config(format!("{key}: {e}"))),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, RunError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| RunError::Config(format!("{key}: {e}"))),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, RunError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| RunError::Config(format!("{key}: {e}"))),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, RunError> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(v) => Err(RunError::Config(format!("{key}: expected bool, got {v}"))),
        }
    }

    pub fn u64_list(&self, key: &str, default: &[u64]) -> Result<Vec<u64>, RunError> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split_whitespace()
                .map(|s| s.parse().map_err(|e| RunError::Config(format!("{key}: {e}"))))
                .collect(),
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, RunError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .split_whitespace()
                .map(|s| s.parse().map_err(|e| RunError::Config(format!("{key}: {e}"))))
                .collect::<Result<Vec<f64>, RunError>>()
                .map(Some),
        }
    }
}

/// Parsed command-line surface.
pub struct CliArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub trace_stride: u64,
}

pub fn run(args: &CliArgs) -> Result<(), RunError> {
    let config = Config::load(&args.config)?;
    let command = config.require("command")?.to_string();
    let seed = match args.seed {
        Some(s) => s,
        None => config.u64_or("seed", 0)?,
    };
    std::fs::create_dir_all(&args.out)
        .map_err(|e| RunError::Config(format!("output directory: {e}")))?;

    let workers = args
        .workers
        .or_else(|| {
            std::env::var("TSALAB_WORKERS").ok().and_then(|v| v.parse().ok())
        })
        .or(config.get("workers").and_then(|v| v.parse().ok()));

    let body = || -> Result<(), RunError> {
        match command.as_str() {
            "gen-system" => cmd_gen_system(&config, seed, &args.out),
            "theory" => cmd_theory(&config, seed, &args.out),
            "simulate" => cmd_simulate(&config, seed, &args.out, args.trace_stride, false),
            "clt" => cmd_simulate(&config, seed, &args.out, args.trace_stride, true),
            "compare-schedules" => cmd_compare_schedules(&config, seed, &args.out),
            "tdc" => cmd_tdc(&config, seed, &args.out),
            "bounds" => cmd_bounds(&config, seed, &args.out),
            other => Err(RunError::Usage(format!("unknown command: {other}"))),
        }
    };
    match workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| RunError::Config(format!("worker pool: {e}")))?;
            pool.install(body)
        }
        None => body(),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), RunError> {
    std::fs::write(path, contents)
        .map_err(|e| RunError::Config(format!("cannot write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Shared builders
// ---------------------------------------------------------------------------

fn system_from_config(config: &Config, seed: u64) -> Result<TwoTimeScaleSystem, RunError> {
    if let Some(path) = config.get("system.file") {
        return system::read_system(Path::new(path)).map_err(config_err);
    }
    let dx = config.usize_or("system.dx", 5)?;
    let dy = config.usize_or("system.dy", 5)?;
    let sys_seed = config.u64_or("system.seed", seed)?;
    let lo = config.f64_or("system.spectrum_low", 0.5)?;
    let hi = config.f64_or("system.spectrum_high", 2.0)?;
    if !(lo > 0.0 && lo <= hi) {
        return Err(RunError::Config(format!(
            "system.spectrum range must satisfy 0 < low <= high, got ({lo}, {hi})"
        )));
    }
    let sys = random_system(dx, dy, sys_seed, (lo, hi)).map_err(numeric_err)?;
    if config.bool_or("system.calibrate", false)? {
        let scale = config.f64_or("system.fast_noise_scale", 1.0)?;
        calibrate_noise_identity_pr(&sys, scale).map_err(numeric_err)
    } else {
        Ok(sys)
    }
}

fn schedule_from_config(config: &Config, prefix: &str) -> Result<StepSchedule, RunError> {
    let key = |name: &str| format!("{prefix}.{name}");
    let kind = config.get(&key("kind")).unwrap_or("offset-experiment");
    let alpha1 = config.f64_or(&key("alpha1"), 0.5)?;
    let gamma1 = config.f64_or(&key("gamma1"), 0.5)?;
    match kind {
        "polynomial" => {
            let a = config.f64_or(&key("a"), 0.6)?;
            let b = config.f64_or(&key("b"), 0.65)?;
            StepSchedule::polynomial(alpha1, gamma1, a, b).map_err(config_err)
        }
        "log-corrected" => {
            let c_a = config.f64_or(&key("c_a"), 0.1)?;
            let c_b = config.f64_or(&key("c_b"), 0.2)?;
            let horizon = config.u64_or(&key("horizon"), 100_000)?;
            StepSchedule::log_corrected(alpha1, gamma1, c_a, c_b, horizon).map_err(config_err)
        }
        "offset-experiment" => {
            let c_a = config.f64_or(&key("c_a"), 0.1)?;
            let c_b = config.f64_or(&key("c_b"), 0.2)?;
            let offset = config.u64_or(&key("offset"), 1000)?;
            let base = match config.get(&key("log_base")).unwrap_or("e") {
                "e" => LogBase::Natural,
                "10" => LogBase::Ten,
                other => {
                    return Err(RunError::Config(format!(
                        "{}: log_base must be e or 10, got {other}",
                        key("log_base")
                    )))
                }
            };
            StepSchedule::offset_experiment(alpha1, gamma1, c_a, c_b, offset, base)
                .map_err(config_err)
        }
        other => Err(RunError::Config(format!("unknown schedule kind: {other}"))),
    }
}

fn campaign_from_config(
    config: &Config,
    seed: u64,
    sys: &TwoTimeScaleSystem,
) -> Result<CampaignSpec, RunError> {
    let checkpoints = config.u64_list("campaign.checkpoints", &[1000, 10_000, 100_000])?;
    let horizon =
        config.u64_or("campaign.horizon", checkpoints.last().copied().unwrap_or(0))?;
    let x0 = match config.f64_list("campaign.x0")? {
        Some(v) => v,
        None => vec![0.0; sys.dx],
    };
    let y0 = match config.f64_list("campaign.y0")? {
        Some(v) => v,
        None => vec![0.0; sys.dy],
    };
    let spec = CampaignSpec {
        trials: config.usize_or("campaign.trials", 2000)?,
        horizon,
        checkpoints,
        seed: config.u64_or("campaign.seed", seed)?,
        x0,
        y0,
        collect: CollectFlags {
            last_iterate: config.bool_or("campaign.collect_last_iterate", true)?,
            pr_average: config.bool_or("campaign.collect_pr_average", true)?,
            diagnostics: config.bool_or("campaign.collect_diagnostics", false)?,
            keep_raw: true,
        },
        burn_in: config.u64_or("campaign.burn_in", 0)?,
    };
    spec.validate(sys).map_err(config_err)?;
    Ok(spec)
}

#[derive(Serialize)]
struct TheoryReport<'a> {
    dx: usize,
    dy: usize,
    g: Vec<f64>,
    delta: Vec<f64>,
    p_ff: Vec<f64>,
    p_delta: Vec<f64>,
    mu_ff: f64,
    mu_delta: f64,
    alpha_threshold: f64,
    gamma_threshold: f64,
    sigma_ff: Vec<f64>,
    sigma_fs: Vec<f64>,
    sigma_ss: Vec<f64>,
    sigma_bar_ff: Vec<f64>,
    sigma_bar_ss: Vec<f64>,
    sigma_star: Vec<f64>,
    residuals: &'a theory::PackResiduals,
}

fn theory_report_json(sys: &TwoTimeScaleSystem, seed: u64, echo: &str) -> Result<String, RunError> {
    let pack = compute_pack(sys).map_err(numeric_err)?;
    let rep = TheoryReport {
        dx: sys.dx,
        dy: sys.dy,
        g: pack.g.data().to_vec(),
        delta: pack.delta.data().to_vec(),
        p_ff: pack.p_ff.as_matrix().data().to_vec(),
        p_delta: pack.p_delta.as_matrix().data().to_vec(),
        mu_ff: pack.mu_ff,
        mu_delta: pack.mu_delta,
        alpha_threshold: pack.alpha_threshold,
        gamma_threshold: pack.gamma_threshold,
        sigma_ff: pack.sigma_ff.data().to_vec(),
        sigma_fs: pack.sigma_fs.data().to_vec(),
        sigma_ss: pack.sigma_ss.data().to_vec(),
        sigma_bar_ff: pack.sigma_bar_ff.data().to_vec(),
        sigma_bar_ss: pack.sigma_bar_ss.data().to_vec(),
        sigma_star: pack.sigma_star.data().to_vec(),
        residuals: &pack.residuals,
    };
    Ok(report::with_provenance(&rep, seed, echo))
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_gen_system(config: &Config, seed: u64, out: &Path) -> Result<(), RunError> {
    let sys = system_from_config(config, seed)?;
    system::write_system(&sys, &out.join("system.txt")).map_err(config_err)?;
    let theory_json = theory_report_json(&sys, seed, &config.echo)?;
    write_file(&out.join("theory.json"), &theory_json)?;
    Ok(())
}

fn cmd_theory(config: &Config, seed: u64, out: &Path) -> Result<(), RunError> {
    let sys = system_from_config(config, seed)?;
    let theory_json = theory_report_json(&sys, seed, &config.echo)?;
    write_file(&out.join("theory.json"), &theory_json)?;
    Ok(())
}

fn trace_csv(
    sys: &TwoTimeScaleSystem,
    sched: &StepSchedule,
    spec: &CampaignSpec,
    stride: u64,
) -> Result<String, RunError> {
    let mut out = String::from("t");
    for i in 0..sys.dx {
        out.push_str(&format!(",x{i}"));
    }
    for j in 0..sys.dy {
        out.push_str(&format!(",y{j}"));
    }
    for i in 0..sys.dx {
        out.push_str(&format!(",x_bar{i}"));
    }
    for j in 0..sys.dy {
        out.push_str(&format!(",y_bar{j}"));
    }
    out.push('\n');
    let mut state = init_trajectory(sys, &spec.x0, &spec.y0, false).map_err(numeric_err)?;
    let model = GaussianModel { sys };
    let mut source = model.make_source(derive_rng(spec.seed, &[tag::TRIAL, 0]));
    let mut w = vec![0.0; sys.dx];
    let mut v = vec![0.0; sys.dy];
    let mut emit = |state: &crate::dynamics::TrajectoryState, out: &mut String| {
        out.push_str(&state.t.to_string());
        for val in state.x.iter().chain(&state.y).chain(&state.x_bar).chain(&state.y_bar) {
            out.push(',');
            out.push_str(&system::fmt_f64(*val));
        }
        out.push('\n');
    };
    emit(&state, &mut out);
    while state.t < spec.horizon {
        source.sample_into(state.t, &state.x, &state.y, &mut w, &mut v);
        state.advance(sys, sched, &w, &v).map_err(numeric_err)?;
        if state.t % stride == 0 || state.t == spec.horizon {
            emit(&state, &mut out);
        }
    }
    Ok(out)
}

fn densities_from_report(
    rep: &MonteCarloReport,
    coord: usize,
    bins: usize,
) -> Result<(Vec<(u64, DensityExport)>, Vec<(u64, DensityExport)>), RunError> {
    let raw = rep.raw.as_ref().ok_or_else(|| {
        RunError::Numeric("density export requires raw ensembles".to_string())
    })?;
    let mut pr = Vec::new();
    let mut last = Vec::new();
    for (k, ck) in rep.checkpoints.iter().enumerate() {
        let sqrt_n = (ck.n as f64).sqrt();
        let pr_samples: Vec<f64> =
            raw.pr_y_err[k].iter().map(|v| sqrt_n * v[coord]).collect();
        let last_samples: Vec<f64> =
            raw.last_y_err[k].iter().map(|v| sqrt_n * v[coord]).collect();
        pr.push((ck.n, stats::density_export(&pr_samples, bins).map_err(numeric_err)?));
        last.push((ck.n, stats::density_export(&last_samples, bins).map_err(numeric_err)?));
    }
    Ok((pr, last))
}

fn cmd_simulate(
    config: &Config,
    seed: u64,
    out: &Path,
    trace_stride: u64,
    with_density: bool,
) -> Result<(), RunError> {
    let sys = system_from_config(config, seed)?;
    let sched = schedule_from_config(config, "schedule")?;
    let spec = campaign_from_config(config, seed, &sys)?;
    let rep = run_campaign(&sys, &sched, &spec, &GaussianModel { sys: &sys })
        .map_err(numeric_err)?;
    write_file(&out.join("checkpoints.csv"), &report::checkpoints_csv(&rep))?;
    if with_density {
        let bins = config.usize_or("campaign.bins", 60)?;
        let (pr, last) = densities_from_report(&rep, 0, bins)?;
        write_file(&out.join("density.csv"), &report::density_csv(&pr))?;
        write_file(&out.join("density_last.csv"), &report::density_csv(&last))?;
    }
    // The JSON mirror drops the raw ensembles (they are an in-memory
    // convenience, not an interchange format).
    let mut slim = rep;
    slim.raw = None;
    write_file(
        &out.join("report.json"),
        &report::with_provenance(&slim, spec.seed, &config.echo),
    )?;
    if trace_stride > 0 {
        write_file(&out.join("trace.csv"), &trace_csv(&sys, &sched, &spec, trace_stride)?)?;
    }
    Ok(())
}

enum ComparisonSource {
    System(Box<TwoTimeScaleSystem>),
    Tdc(Box<TdcInstance>, TdcNoiseMode),
}

fn comparison_source(config: &Config, seed: u64) -> Result<ComparisonSource, RunError> {
    match config.get("compare.source").unwrap_or("system") {
        "system" => Ok(ComparisonSource::System(Box::new(system_from_config(config, seed)?))),
        "tdc" => {
            let inst = tdc_instance_from_config(config, seed)?;
            let mode = match config.get("compare.noise_mode").unwrap_or("multiplicative") {
                "multiplicative" => TdcNoiseMode::RealisticMultiplicative,
                "linearized" => TdcNoiseMode::LinearizedAdditive,
                other => {
                    return Err(RunError::Config(format!(
                        "compare.noise_mode must be multiplicative or linearized, got {other}"
                    )))
                }
            };
            Ok(ComparisonSource::Tdc(Box::new(inst), mode))
        }
        other => Err(RunError::Config(format!("compare.source must be system or tdc: {other}"))),
    }
}

struct TdcModel<'a> {
    inst: &'a TdcInstance,
    mode: TdcNoiseMode,
}

impl NoiseModel for TdcModel<'_> {
    fn make_source<'b>(&'b self, rng: rand_chacha::ChaCha8Rng) -> Box<dyn NoiseSource + 'b> {
        Box::new(self.inst.sampler(self.mode, rng))
    }
}

fn cmd_compare_schedules(config: &Config, seed: u64, out: &Path) -> Result<(), RunError> {
    let trials = config.usize_or("compare.trials", 100)?;
    let checkpoints = config.u64_list("compare.checkpoints", &[1000, 10_000, 100_000])?;
    let horizon = *checkpoints.last().ok_or_else(|| {
        RunError::Config("compare.checkpoints must be nonempty".to_string())
    })?;

    // Explicit schedule1..scheduleK blocks, or the default trio: the two
    // polynomial baselines plus the horizon-tuned rule.
    let mut schedules = Vec::new();
    let mut idx = 1;
    while config.get(&format!("schedule{idx}.kind")).is_some() {
        schedules.push(schedule_from_config(config, &format!("schedule{idx}"))?);
        idx += 1;
    }
    if schedules.is_empty() {
        schedules.push(StepSchedule::polynomial(0.5, 0.5, 0.55, 0.6).map_err(config_err)?);
        schedules.push(StepSchedule::polynomial(0.5, 0.5, 0.6, 0.65).map_err(config_err)?);
        schedules
            .push(StepSchedule::log_corrected(0.5, 0.5, 0.1, 0.2, horizon).map_err(config_err)?);
    }

    let source = comparison_source(config, seed)?;
    let (sys, model): (&TwoTimeScaleSystem, Box<dyn NoiseModel>) = match &source {
        ComparisonSource::System(sys) => (sys, Box::new(GaussianModel { sys })),
        ComparisonSource::Tdc(inst, mode) => {
            (&inst.sys, Box::new(TdcModel { inst, mode: *mode }))
        }
    };
    let x0 = vec![0.0; sys.dx];
    let y0 = vec![0.0; sys.dy];
    let table = stats::schedule_comparison(
        sys,
        &schedules,
        trials,
        &checkpoints,
        config.u64_or("compare.seed", seed)?,
        &x0,
        &y0,
        model.as_ref(),
    )
    .map_err(numeric_err)?;
    write_file(&out.join("comparison.csv"), &report::comparison_csv(&table))?;
    write_file(
        &out.join("report.json"),
        &report::with_provenance(&table, seed, &config.echo),
    )?;
    Ok(())
}

fn tdc_instance_from_config(config: &Config, seed: u64) -> Result<TdcInstance, RunError> {
    if let Some(path) = config.get("tdc.file") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read {path}: {e}")))?;
        let (mdp, phi, behavior, target) = tdc::mdp_from_string(&text).map_err(config_err)?;
        return tdc::build_tdc_system(&mdp, &phi, &behavior, &target).map_err(numeric_err);
    }
    let n_states = config.usize_or("tdc.n_states", 20)?;
    let n_actions = config.usize_or("tdc.n_actions", 4)?;
    let d = config.usize_or("tdc.d", 10)?;
    let discount = config.f64_or("tdc.discount", 0.9)?;
    let tdc_seed = config.u64_or("tdc.seed", seed)?;
    let (mdp, phi) = tdc::random_mdp(n_states, n_actions, d, discount, tdc_seed)
        .map_err(config_err)?;
    let behavior = Policy::uniform(n_states, n_actions);
    let target = match config.get("tdc.target").unwrap_or("random") {
        "random" => Policy::random(n_states, n_actions, config.u64_or("tdc.target_seed", tdc_seed ^ 0xBEEF)?),
        "uniform" => Policy::uniform(n_states, n_actions),
        other => return Err(RunError::Config(format!("tdc.target must be random or uniform: {other}"))),
    };
    tdc::build_tdc_system(&mdp, &phi, &behavior, &target).map_err(numeric_err)
}

#[derive(Serialize)]
struct TdcBuildReport<'a> {
    d: usize,
    n_states: usize,
    n_actions: usize,
    warnings: &'a crate::system::SystemWarnings,
    stationary: &'a [f64],
    solution_residual: f64,
}

fn cmd_tdc(config: &Config, seed: u64, out: &Path) -> Result<(), RunError> {
    let n_states = config.usize_or("tdc.n_states", 20)?;
    let n_actions = config.usize_or("tdc.n_actions", 4)?;
    let d = config.usize_or("tdc.d", 10)?;
    let discount = config.f64_or("tdc.discount", 0.9)?;
    let tdc_seed = config.u64_or("tdc.seed", seed)?;
    let (mdp, phi) = tdc::random_mdp(n_states, n_actions, d, discount, tdc_seed)
        .map_err(config_err)?;
    let behavior = Policy::uniform(n_states, n_actions);
    let target = match config.get("tdc.target").unwrap_or("random") {
        "random" => Policy::random(n_states, n_actions, config.u64_or("tdc.target_seed", tdc_seed ^ 0xBEEF)?),
        "uniform" => Policy::uniform(n_states, n_actions),
        other => return Err(RunError::Config(format!("tdc.target must be random or uniform: {other}"))),
    };
    let inst = tdc::build_tdc_system(&mdp, &phi, &behavior, &target).map_err(numeric_err)?;
    write_file(&out.join("mdp.txt"), &tdc::mdp_to_string(&mdp, &phi, &behavior, &target))?;
    system::write_system(&inst.sys, &out.join("system.txt")).map_err(config_err)?;
    let build = TdcBuildReport {
        d,
        n_states,
        n_actions,
        warnings: &inst.warnings,
        stationary: &inst.stationary,
        solution_residual: inst.sys.solution_residual(),
    };
    write_file(&out.join("tdc.json"), &report::with_provenance(&build, seed, &config.echo))?;
    let theory_json = theory_report_json(&inst.sys, seed, &config.echo)?;
    write_file(&out.join("theory.json"), &theory_json)?;
    Ok(())
}

#[derive(Serialize)]
struct BoundsGridCell {
    a: f64,
    b: f64,
    bound: f64,
}

#[derive(Serialize)]
struct BoundsReport {
    n_list: Vec<u64>,
    c: f64,
    grid: Vec<BoundsGridCell>,
    grid_at_n: u64,
    optimum_per_n: Vec<(u64, theory::Theorem1Optimum)>,
    err_rates_per_n: Vec<theory::RateReport>,
    lower_bounds_per_n: Vec<(u64, theory::LowerBound)>,
    corollary1: theory::Corollary1Targets,
    dimension: usize,
    timescale_gap_limit: f64,
}

fn cmd_bounds(config: &Config, seed: u64, out: &Path) -> Result<(), RunError> {
    let sys = system_from_config(config, seed)?;
    let pack = compute_pack(&sys).map_err(numeric_err)?;
    let sched = schedule_from_config(config, "schedule")?;
    let n_list = config.u64_list("bounds.n_list", &[1000, 10_000, 100_000, 1_000_000])?;
    let c = config.f64_or("bounds.c", 1.0)?;
    let grid_at_n = config.u64_or("bounds.grid_n", *n_list.last().unwrap_or(&100_000))?;
    let grid_step = config.f64_or("bounds.grid_step", 0.01)?;

    let mut grid = Vec::new();
    let mut a = 0.5 + grid_step;
    while a < 1.0 {
        let mut b = a + grid_step;
        while b < 2.0 * a - 0.5 {
            if let Ok(bound) = theorem1_bound(a, b, grid_at_n, c) {
                grid.push(BoundsGridCell { a, b, bound });
            }
            b += grid_step;
        }
        a += grid_step;
    }

    let sigma_star = crate::matlib::SpdMatrix::new(pack.sigma_star.clone())
        .map_err(|e| RunError::Numeric(format!("sigma_star not PD: {e}")))?;
    let d = sys.dim();
    let mut optimum_per_n = Vec::new();
    let mut rates = Vec::new();
    let mut lbs = Vec::new();
    for &n in &n_list {
        optimum_per_n.push((n, optimize_theorem1(n, c)));
        rates.push(err_rates(&sched, n));
        lbs.push((n, lower_bound(d, n, &sigma_star).map_err(numeric_err)?));
    }
    let rep = BoundsReport {
        n_list: n_list.clone(),
        c,
        grid,
        grid_at_n,
        optimum_per_n,
        err_rates_per_n: rates,
        lower_bounds_per_n: lbs,
        corollary1: corollary1_targets(&pack, seed).map_err(numeric_err)?,
        dimension: d,
        timescale_gap_limit: sched.timescale_gap_limit(),
    };
    write_file(&out.join("bounds.json"), &report::with_provenance(&rep, seed, &config.echo))?;
    Ok(())
}
