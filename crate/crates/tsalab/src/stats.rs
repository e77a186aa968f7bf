//! Monte-Carlo campaign engine and empirical statistics.
//!
//! A campaign runs independent trajectories with per-trial derived noise
//! streams, records scaled error statistics at a fixed set of checkpoints,
//! and aggregates them into empirical moments, expected-error estimates
//! with bootstrap standard errors, and one-dimensional distances to the
//! reference Gaussians. Reports are a pure function of (spec, seed): trial
//! results are merged in trial-index order, so worker count never changes
//! a byte of output.

use crate::dynamics::{init_trajectory, snapshot_errors, DynamicsError};
use crate::matlib::{self, Matrix};
use crate::rng::{derive_rng, tag};
use crate::schedule::StepSchedule;
use crate::system::{GaussianNoise, NoiseSource, TwoTimeScaleSystem};
use crate::theory::{compute_pack, lemma1_deviation, CovariancePack, Lemma1Deviation, TheoryError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("empty input")]
    EmptyInput,
    #[error("invalid campaign spec: {0}")]
    InvalidSpec(String),
    #[error("campaign would hold {0} reals in memory; split into smaller runs")]
    CampaignTooLarge(u64),
    #[error("{failed} of {trials} trials aborted with non-finite iterates (> 1%)")]
    TooManyFailures { failed: usize, trials: usize },
    #[error("theory error: {0}")]
    Theory(#[from] TheoryError),
    #[error("dynamics error: {0}")]
    Dynamics(#[from] DynamicsError),
}

// ---------------------------------------------------------------------------
// Standard normal quantile (AS 241, double precision)
// ---------------------------------------------------------------------------

fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// Inverse standard normal CDF, absolute error below 1e-15 on (0, 1).
pub fn norm_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0, 1)");
    const A: [f64; 8] = [
        3.3871328727963666080e0,
        1.3314166789178437745e2,
        1.9715909503065514427e3,
        1.3731693765509461125e4,
        4.5921953931549871457e4,
        6.7265770927008700853e4,
        3.3430575583588128105e4,
        2.5090809287301226727e3,
    ];
    const B: [f64; 8] = [
        1.0,
        4.2313330701600911252e1,
        6.8718700749205790830e2,
        5.3941960214247511077e3,
        2.1213794301586595867e4,
        3.9307895800092710610e4,
        2.8729085735721942674e4,
        5.2264952788528545610e3,
    ];
    const C: [f64; 8] = [
        1.42343711074968357734e0,
        4.63033784615654529590e0,
        5.76949722146069140550e0,
        3.64784832476320460504e0,
        1.27045825245236838258e0,
        2.41780725177450611770e-1,
        2.27238449892691845833e-2,
        7.74545014278341407640e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.05319162663775882187e0,
        1.67638483018380384940e0,
        6.89767334985100004550e-1,
        1.48103976427480074590e-1,
        1.51986665636164571966e-2,
        5.47593808499534494600e-4,
        1.05075007164441684324e-9,
    ];
    const E: [f64; 8] = [
        6.65790464350110377720e0,
        5.46378491116411436990e0,
        1.78482653991729133580e0,
        2.96560571828504891230e-1,
        2.65321895265761230930e-2,
        1.24266094738807843860e-3,
        2.71155556874348757815e-5,
        2.01033439929228813265e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        5.99832206555887937690e-1,
        1.36929880922735805310e-1,
        1.48753612908506148525e-2,
        7.86869131145613259100e-4,
        1.84631831751005468180e-5,
        1.42151175831644588870e-7,
        2.04426310338993978564e-15,
    ];
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * horner(&A, r) / horner(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        r -= 1.6;
        horner(&C, r) / horner(&D, r)
    } else {
        r -= 5.0;
        horner(&E, r) / horner(&F, r)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

// ---------------------------------------------------------------------------
// One-dimensional empirical statistics
// ---------------------------------------------------------------------------

/// Quantile-coupling estimate of the distance between the sample law and
/// N(0, sigma^2): sort the samples and average |s_(i) - sigma q_i| with
/// q_i the (i - 1/2)/m standard normal quantile.
pub fn empirical_w1_to_gaussian(samples: &[f64], sigma: f64) -> Result<f64, StatsError> {
    if samples.len() < 2 {
        return Err(StatsError::EmptyInput);
    }
    assert!(sigma >= 0.0);
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    let mut acc = 0.0;
    for (i, s) in sorted.iter().enumerate() {
        let q = norm_quantile((i as f64 + 0.5) / m);
        acc += (s - sigma * q).abs();
    }
    Ok(acc / m)
}

/// Mean Euclidean norm with a 1000-resample bootstrap standard error.
pub fn expected_error(
    samples: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64), StatsError> {
    if samples.len() < 2 {
        return Err(StatsError::EmptyInput);
    }
    let norms: Vec<f64> = samples.iter().map(|v| matlib::vec_norm(v)).collect();
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    let stderr = bootstrap_stderr_mean(&norms, rng);
    Ok((mean, stderr))
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

fn bootstrap_stderr_mean(values: &[f64], rng: &mut ChaCha8Rng) -> f64 {
    let n = values.len();
    let mut means = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let mut acc = 0.0;
        for _ in 0..n {
            acc += values[rng.gen_range(0..n)];
        }
        means.push(acc / n as f64);
    }
    std_dev(&means)
}

fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// 95% percentile interval of the bootstrap means.
fn bootstrap_mean_ci(values: &[f64], rng: &mut ChaCha8Rng) -> (f64, f64) {
    let n = values.len();
    let mut means = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let mut acc = 0.0;
        for _ in 0..n {
            acc += values[rng.gen_range(0..n)];
        }
        means.push(acc / n as f64);
    }
    means.sort_by(f64::total_cmp);
    (percentile_sorted(&means, 0.025), percentile_sorted(&means, 0.975))
}

fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

fn bootstrap_stderr_w1(samples: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    let n = samples.len();
    let mut resampled = vec![0.0; n];
    let mut stats = Vec::with_capacity(200);
    // 200 resamples keep the nested sort affordable; the stderr of the
    // stderr is irrelevant at the tolerance it gates.
    for _ in 0..200 {
        for r in resampled.iter_mut() {
            *r = samples[rng.gen_range(0..n)];
        }
        stats.push(empirical_w1_to_gaussian(&resampled, sigma).expect("n >= 2"));
    }
    std_dev(&stats)
}

// ---------------------------------------------------------------------------
// Histogram / density export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct DensityExport {
    pub bin_edges: Vec<f64>,
    /// Normalized bin heights (sum of height * width = 1).
    pub bin_density: Vec<f64>,
    pub grid: Vec<f64>,
    pub kde: Vec<f64>,
    pub bandwidth: f64,
}

pub const KDE_GRID_POINTS: usize = 512;

/// Equal-width histogram plus a Gaussian kernel density on a 512-point
/// grid with Silverman bandwidth 1.06 sigma m^{-1/5}. The grid extends six
/// bandwidths past the data so the trapezoid integral of the density is 1
/// to well below 1e-6.
pub fn density_export(samples: &[f64], bins: usize) -> Result<DensityExport, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    assert!(bins >= 2);
    let m = samples.len() as f64;
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = hi - lo;

    let sigma_hat = if samples.len() > 1 { std_dev(samples) } else { 0.0 };
    let floor = (spread / 1000.0).max(1e-9 * (1.0 + lo.abs().max(hi.abs())));
    let bandwidth = (1.06 * sigma_hat * m.powf(-0.2)).max(floor);

    // Histogram. Degenerate all-equal input collapses to one bin around
    // the common value.
    let (edges, density) = if spread <= 0.0 {
        let w = 2.0 * floor;
        (vec![lo - floor, lo + floor], vec![1.0 / w])
    } else {
        let width = spread / bins as f64;
        let mut counts = vec![0usize; bins];
        for &s in samples {
            let mut idx = ((s - lo) / width) as usize;
            if idx >= bins {
                idx = bins - 1;
            }
            counts[idx] += 1;
        }
        let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        let density: Vec<f64> =
            counts.iter().map(|&c| c as f64 / (m * width)).collect();
        (edges, density)
    };

    let pad = 6.0 * bandwidth;
    let g_lo = lo - pad;
    let g_hi = hi + pad;
    let dg = (g_hi - g_lo) / (KDE_GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..KDE_GRID_POINTS).map(|i| g_lo + dg * i as f64).collect();
    let norm = 1.0 / (m * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let kde: Vec<f64> = grid
        .iter()
        .map(|&gx| {
            samples
                .iter()
                .map(|&s| {
                    let z = (gx - s) / bandwidth;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    Ok(DensityExport { bin_edges: edges, bin_density: density, grid, kde, bandwidth })
}

impl DensityExport {
    pub fn kde_trapezoid_integral(&self) -> f64 {
        let mut acc = 0.0;
        for i in 1..self.grid.len() {
            acc += 0.5 * (self.kde[i] + self.kde[i - 1]) * (self.grid[i] - self.grid[i - 1]);
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// Campaign engine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CollectFlags {
    pub last_iterate: bool,
    pub pr_average: bool,
    pub diagnostics: bool,
    pub keep_raw: bool,
}

impl CollectFlags {
    pub fn standard() -> Self {
        CollectFlags { last_iterate: true, pr_average: true, diagnostics: false, keep_raw: false }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CampaignSpec {
    pub trials: usize,
    pub horizon: u64,
    pub checkpoints: Vec<u64>,
    pub seed: u64,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub collect: CollectFlags,
    /// Steps discarded before averaging starts (0 keeps the full-history
    /// average; nonzero is an exploratory knob, not part of the theory).
    pub burn_in: u64,
}

impl CampaignSpec {
    pub fn validate(&self, sys: &TwoTimeScaleSystem) -> Result<(), StatsError> {
        if self.trials < 1 {
            return Err(StatsError::InvalidSpec("trials must be >= 1".into()));
        }
        if self.checkpoints.is_empty() {
            return Err(StatsError::InvalidSpec("need at least one checkpoint".into()));
        }
        if !self.checkpoints.windows(2).all(|w| w[0] < w[1]) {
            return Err(StatsError::InvalidSpec("checkpoints must be strictly increasing".into()));
        }
        if *self.checkpoints.last().unwrap() != self.horizon {
            return Err(StatsError::InvalidSpec("horizon must equal the last checkpoint".into()));
        }
        if self.x0.len() != sys.dx || self.y0.len() != sys.dy {
            return Err(StatsError::InvalidSpec("initial point dimensions mismatch".into()));
        }
        if self.burn_in >= self.horizon {
            return Err(StatsError::InvalidSpec("burn_in must be below the horizon".into()));
        }
        let held = self.trials as u64
            * self.checkpoints.len() as u64
            * 6
            * (sys.dx + sys.dy) as u64;
        if held > 100_000_000 {
            return Err(StatsError::CampaignTooLarge(held));
        }
        Ok(())
    }
}

/// Builds one noise source per trial from a derived stream.
pub trait NoiseModel: Sync {
    fn make_source<'a>(&'a self, rng: ChaCha8Rng) -> Box<dyn NoiseSource + 'a>;
}

pub struct GaussianModel<'a> {
    pub sys: &'a TwoTimeScaleSystem,
}

impl NoiseModel for GaussianModel<'_> {
    fn make_source<'b>(&'b self, rng: ChaCha8Rng) -> Box<dyn NoiseSource + 'b> {
        Box::new(GaussianNoise::new(self.sys, rng))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VectorStats {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub per_coord_std: Vec<f64>,
    pub expected_norm: f64,
    pub expected_norm_stderr: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct NormStat {
    pub mean: f64,
    pub stderr: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct W1Stat {
    pub coord: usize,
    pub value: f64,
    pub stderr: f64,
    pub sigma_ref: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticStats {
    pub moment_x_tilde: Vec<Vec<f64>>,
    pub moment_x_hat: Vec<Vec<f64>>,
    pub moment_y_hat: Vec<Vec<f64>>,
    pub deltas: Lemma1Deviation,
    pub delta_x_tilde_over_alpha: f64,
    pub delta_x_tilde_over_alpha_stderr: f64,
    pub delta_y_over_gamma: f64,
    pub delta_y_over_gamma_stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckpointReport {
    pub n: u64,
    pub alpha_n: f64,
    pub gamma_n: f64,
    pub pr_fast_scaled: Option<VectorStats>,
    pub pr_slow_scaled: Option<VectorStats>,
    pub pr_fast_sqrtn: Option<VectorStats>,
    pub pr_slow_sqrtn: Option<VectorStats>,
    pub last_fast_scaled: Option<VectorStats>,
    pub last_slow_scaled: Option<VectorStats>,
    pub last_slow_sqrtn: Option<VectorStats>,
    pub pr_err_fast_norm: Option<NormStat>,
    pub pr_err_slow_norm: Option<NormStat>,
    pub pr_err_combined_norm: Option<NormStat>,
    pub w1_slow: Option<Vec<W1Stat>>,
    pub diag: Option<DiagnosticStats>,
}

/// Raw per-trial error vectors by checkpoint (present with keep_raw).
#[derive(Debug, Clone, Default, Serialize)]
pub struct RawEnsembles {
    pub pr_x_err: Vec<Vec<Vec<f64>>>,
    pub pr_y_err: Vec<Vec<Vec<f64>>>,
    pub last_x_err: Vec<Vec<Vec<f64>>>,
    pub last_y_err: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloReport {
    pub trials: usize,
    pub failed_trials: usize,
    pub seed: u64,
    pub schedule: StepSchedule,
    pub checkpoints: Vec<CheckpointReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw: Option<RawEnsembles>,
}

struct TrialOutcome {
    failed: bool,
    pr_x: Vec<Vec<f64>>,
    pr_y: Vec<Vec<f64>>,
    last_x: Vec<Vec<f64>>,
    last_y: Vec<Vec<f64>>,
    x_tilde: Vec<Vec<f64>>,
    x_hat: Vec<Vec<f64>>,
}

fn run_trial(
    sys: &TwoTimeScaleSystem,
    sched: &StepSchedule,
    spec: &CampaignSpec,
    model: &dyn NoiseModel,
    trial: usize,
) -> Result<TrialOutcome, StatsError> {
    let rng = derive_rng(spec.seed, &[tag::TRIAL, trial as u64]);
    let mut source = model.make_source(rng);
    let mut state = init_trajectory(sys, &spec.x0, &spec.y0, spec.collect.diagnostics)?;
    let mut w = vec![0.0; sys.dx];
    let mut v = vec![0.0; sys.dy];
    let mut out = TrialOutcome {
        failed: false,
        pr_x: Vec::with_capacity(spec.checkpoints.len()),
        pr_y: Vec::with_capacity(spec.checkpoints.len()),
        last_x: Vec::with_capacity(spec.checkpoints.len()),
        last_y: Vec::with_capacity(spec.checkpoints.len()),
        x_tilde: Vec::new(),
        x_hat: Vec::new(),
    };
    let mut next_ck = 0usize;
    // state.t counts the current iterate; checkpoint n means "after n steps
    // of averaging", i.e. the state holding (x_n, ..., xbar_n).
    if spec.checkpoints[0] == 1 {
        record_checkpoint(&state, sys, &mut out)?;
        next_ck = 1;
    }
    while next_ck < spec.checkpoints.len() {
        source.sample_into(state.t, &state.x, &state.y, &mut w, &mut v);
        match state.advance(sys, sched, &w, &v) {
            Ok(()) => {}
            Err(DynamicsError::NonFiniteIterate(_)) => {
                out.failed = true;
                return Ok(out);
            }
            Err(e) => return Err(e.into()),
        }
        if spec.burn_in > 0 && state.t == spec.burn_in + 1 {
            state.x_bar.copy_from_slice(&state.x);
            state.y_bar.copy_from_slice(&state.y);
        }
        if state.t == spec.checkpoints[next_ck] {
            record_checkpoint(&state, sys, &mut out)?;
            next_ck += 1;
        }
    }
    Ok(out)
}

fn record_checkpoint(
    state: &crate::dynamics::TrajectoryState,
    sys: &TwoTimeScaleSystem,
    out: &mut TrialOutcome,
) -> Result<(), StatsError> {
    out.pr_x.push(matlib::vec_sub(&state.x_bar, &sys.x_star));
    out.pr_y.push(matlib::vec_sub(&state.y_bar, &sys.y_star));
    out.last_x.push(matlib::vec_sub(&state.x, &sys.x_star));
    out.last_y.push(matlib::vec_sub(&state.y, &sys.y_star));
    if state.diag.is_some() {
        let snap = snapshot_errors(state, sys)?;
        out.x_tilde.push(snap.x_tilde);
        out.x_hat.push(snap.x_hat);
    }
    Ok(())
}

pub fn run_campaign(
    sys: &TwoTimeScaleSystem,
    sched: &StepSchedule,
    spec: &CampaignSpec,
    model: &dyn NoiseModel,
) -> Result<MonteCarloReport, StatsError> {
    spec.validate(sys)?;
    let pack = compute_pack(sys)?;
    let outcomes: Vec<Result<TrialOutcome, StatsError>> = (0..spec.trials)
        .into_par_iter()
        .map(|trial| run_trial(sys, sched, spec, model, trial))
        .collect();
    let mut trials_ok: Vec<TrialOutcome> = Vec::with_capacity(spec.trials);
    let mut failed = 0usize;
    for o in outcomes {
        let o = o?;
        if o.failed {
            failed += 1;
        } else {
            trials_ok.push(o);
        }
    }
    if failed * 100 > spec.trials {
        return Err(StatsError::TooManyFailures { failed, trials: spec.trials });
    }
    aggregate(sys, sched, spec, &pack, trials_ok, failed)
}

fn vector_stats(
    samples: &[Vec<f64>],
    seed: u64,
    tags: &[u64],
) -> Result<VectorStats, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let d = samples[0].len();
    let m = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        matlib::axpy(1.0, s, &mut mean);
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for s in samples {
        for i in 0..d {
            let di = s[i] - mean[i];
            for j in 0..d {
                cov[i][j] += di * (s[j] - mean[j]);
            }
        }
    }
    let denom = (m - 1.0).max(1.0);
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    let per_coord_std = (0..d).map(|i| cov[i][i].max(0.0).sqrt()).collect();
    let mut rng = derive_rng(seed, tags);
    let (expected_norm, expected_norm_stderr) = if samples.len() >= 2 {
        expected_error(samples, &mut rng)?
    } else {
        (matlib::vec_norm(&samples[0]), 0.0)
    };
    Ok(VectorStats { mean, cov, per_coord_std, expected_norm, expected_norm_stderr })
}

fn norm_stat(samples: &[Vec<f64>], seed: u64, tags: &[u64]) -> Result<NormStat, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let norms: Vec<f64> = samples.iter().map(|s| matlib::vec_norm(s)).collect();
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    let mut rng = derive_rng(seed, tags);
    let stderr = bootstrap_stderr_mean(&norms, &mut rng);
    let (ci_lo, ci_hi) = bootstrap_mean_ci(&norms, &mut rng);
    Ok(NormStat { mean, stderr, ci_lo, ci_hi })
}

fn scale_all(samples: &[Vec<f64>], c: f64) -> Vec<Vec<f64>> {
    samples.iter().map(|s| matlib::vec_scale(s, c)).collect()
}

fn map_all(samples: &[Vec<f64>], m: &Matrix, c: f64) -> Vec<Vec<f64>> {
    samples.iter().map(|s| matlib::vec_scale(&m.matvec(s), c)).collect()
}

fn mean_outer(samples: &[Vec<f64>]) -> Matrix {
    let d = samples[0].len();
    let mut acc = Matrix::zeros(d, d);
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                acc.set(i, j, acc.get(i, j) + s[i] * s[j]);
            }
        }
    }
    acc.scale(1.0 / samples.len() as f64)
}

fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| (0..m.cols()).map(|j| m.get(i, j)).collect()).collect()
}

#[allow(clippy::too_many_arguments)]
fn aggregate(
    sys: &TwoTimeScaleSystem,
    sched: &StepSchedule,
    spec: &CampaignSpec,
    pack: &CovariancePack,
    trials: Vec<TrialOutcome>,
    failed: usize,
) -> Result<MonteCarloReport, StatsError> {
    if trials.is_empty() {
        return Err(StatsError::TooManyFailures { failed, trials: spec.trials });
    }
    let slow_ref_cov =
        pack.delta.matmul(&pack.sigma_bar_ss).matmul(&pack.delta.transpose()).symmetrized();
    let mut checkpoints = Vec::with_capacity(spec.checkpoints.len());
    let mut raw = spec.collect.keep_raw.then(RawEnsembles::default);

    for (k, &n) in spec.checkpoints.iter().enumerate() {
        let (alpha_n, gamma_n) = sched.eval(n);
        let sqrt_n = (n as f64).sqrt();
        let ck = k as u64;

        let pr_x: Vec<Vec<f64>> = trials.iter().map(|t| t.pr_x[k].clone()).collect();
        let pr_y: Vec<Vec<f64>> = trials.iter().map(|t| t.pr_y[k].clone()).collect();
        let last_x: Vec<Vec<f64>> = trials.iter().map(|t| t.last_x[k].clone()).collect();
        let last_y: Vec<Vec<f64>> = trials.iter().map(|t| t.last_y[k].clone()).collect();

        let mut report = CheckpointReport {
            n,
            alpha_n,
            gamma_n,
            pr_fast_scaled: None,
            pr_slow_scaled: None,
            pr_fast_sqrtn: None,
            pr_slow_sqrtn: None,
            last_fast_scaled: None,
            last_slow_scaled: None,
            last_slow_sqrtn: None,
            pr_err_fast_norm: None,
            pr_err_slow_norm: None,
            pr_err_combined_norm: None,
            w1_slow: None,
            diag: None,
        };

        if spec.collect.pr_average {
            let fast_scaled = map_all(&pr_x, &pack.g, sqrt_n);
            let slow_scaled = map_all(&pr_y, &pack.delta, sqrt_n);
            report.pr_fast_scaled =
                Some(vector_stats(&fast_scaled, spec.seed, &[tag::BOOTSTRAP, ck, 0])?);
            report.pr_slow_scaled =
                Some(vector_stats(&slow_scaled, spec.seed, &[tag::BOOTSTRAP, ck, 1])?);
            report.pr_fast_sqrtn = Some(vector_stats(
                &scale_all(&pr_x, sqrt_n),
                spec.seed,
                &[tag::BOOTSTRAP, ck, 2],
            )?);
            report.pr_slow_sqrtn = Some(vector_stats(
                &scale_all(&pr_y, sqrt_n),
                spec.seed,
                &[tag::BOOTSTRAP, ck, 3],
            )?);
            report.pr_err_fast_norm =
                Some(norm_stat(&pr_x, spec.seed, &[tag::BOOTSTRAP, ck, 4])?);
            report.pr_err_slow_norm =
                Some(norm_stat(&pr_y, spec.seed, &[tag::BOOTSTRAP, ck, 5])?);
            let combined: Vec<Vec<f64>> = pr_x
                .iter()
                .zip(&pr_y)
                .map(|(x, y)| x.iter().chain(y.iter()).copied().collect())
                .collect();
            report.pr_err_combined_norm =
                Some(norm_stat(&combined, spec.seed, &[tag::BOOTSTRAP, ck, 6])?);

            if slow_scaled.len() >= 2 {
                let mut w1 = Vec::with_capacity(sys.dy);
                for coord in 0..sys.dy {
                    let samples: Vec<f64> = slow_scaled.iter().map(|s| s[coord]).collect();
                    let sigma_ref = slow_ref_cov.get(coord, coord).max(0.0).sqrt();
                    let value = empirical_w1_to_gaussian(&samples, sigma_ref)?;
                    let mut rng =
                        derive_rng(spec.seed, &[tag::BOOTSTRAP, ck, 16 + coord as u64]);
                    let stderr = bootstrap_stderr_w1(&samples, sigma_ref, &mut rng);
                    w1.push(W1Stat { coord, value, stderr, sigma_ref });
                }
                report.w1_slow = Some(w1);
            }
        }

        if spec.collect.last_iterate {
            report.last_fast_scaled = Some(vector_stats(
                &scale_all(&last_x, 1.0 / alpha_n.sqrt()),
                spec.seed,
                &[tag::BOOTSTRAP, ck, 7],
            )?);
            report.last_slow_scaled = Some(vector_stats(
                &scale_all(&last_y, 1.0 / gamma_n.sqrt()),
                spec.seed,
                &[tag::BOOTSTRAP, ck, 8],
            )?);
            report.last_slow_sqrtn = Some(vector_stats(
                &scale_all(&last_y, sqrt_n),
                spec.seed,
                &[tag::BOOTSTRAP, ck, 9],
            )?);
        }

        if spec.collect.diagnostics {
            let x_tilde: Vec<Vec<f64>> = trials.iter().map(|t| t.x_tilde[k].clone()).collect();
            let x_hat: Vec<Vec<f64>> = trials.iter().map(|t| t.x_hat[k].clone()).collect();
            let m_tilde = mean_outer(&x_tilde);
            let m_hat = mean_outer(&x_hat);
            let m_y = mean_outer(&last_y);
            let deltas = lemma1_deviation(&m_tilde, &m_hat, &m_y, pack, alpha_n, gamma_n)?;
            // Bootstrap over trials for the scaled deviation statistics.
            let mut rng = derive_rng(spec.seed, &[tag::BOOTSTRAP, ck, 10]);
            let mut dxs = Vec::with_capacity(200);
            let mut dys = Vec::with_capacity(200);
            let nt = x_tilde.len();
            for _ in 0..200 {
                let idx: Vec<usize> = (0..nt).map(|_| rng.gen_range(0..nt)).collect();
                let res_t: Vec<Vec<f64>> = idx.iter().map(|&i| x_tilde[i].clone()).collect();
                let res_y: Vec<Vec<f64>> = idx.iter().map(|&i| last_y[i].clone()).collect();
                let d = lemma1_deviation(
                    &mean_outer(&res_t),
                    &m_hat,
                    &mean_outer(&res_y),
                    pack,
                    alpha_n,
                    gamma_n,
                )?;
                dxs.push(d.delta_x_tilde / alpha_n);
                dys.push(d.delta_y / gamma_n);
            }
            report.diag = Some(DiagnosticStats {
                moment_x_tilde: matrix_to_rows(&m_tilde),
                moment_x_hat: matrix_to_rows(&m_hat),
                moment_y_hat: matrix_to_rows(&m_y),
                deltas,
                delta_x_tilde_over_alpha: deltas.delta_x_tilde / alpha_n,
                delta_x_tilde_over_alpha_stderr: std_dev(&dxs),
                delta_y_over_gamma: deltas.delta_y / gamma_n,
                delta_y_over_gamma_stderr: std_dev(&dys),
            });
        }

        if let Some(raw) = raw.as_mut() {
            raw.pr_x_err.push(pr_x);
            raw.pr_y_err.push(pr_y);
            raw.last_x_err.push(last_x);
            raw.last_y_err.push(last_y);
        }
        checkpoints.push(report);
    }

    Ok(MonteCarloReport {
        trials: spec.trials,
        failed_trials: failed,
        seed: spec.seed,
        schedule: sched.clone(),
        checkpoints,
        raw,
    })
}

/// Gaussian-noise convenience wrapper.
pub fn run_campaign_gaussian(
    sys: &TwoTimeScaleSystem,
    sched: &StepSchedule,
    spec: &CampaignSpec,
) -> Result<MonteCarloReport, StatsError> {
    run_campaign(sys, sched, spec, &GaussianModel { sys })
}

// ---------------------------------------------------------------------------
// Schedule comparison under common random numbers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonCell {
    pub schedule_id: usize,
    pub n: u64,
    pub mean_fast: f64,
    pub fast_ci: (f64, f64),
    pub mean_slow: f64,
    pub slow_ci: (f64, f64),
    /// Paired difference of slow errors against schedule 0 (this minus
    /// reference), with a percentile bootstrap interval.
    pub paired_slow_diff: f64,
    pub paired_slow_ci: (f64, f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonTable {
    pub schedule_names: Vec<String>,
    pub checkpoints: Vec<u64>,
    pub trials: usize,
    pub seed: u64,
    pub cells: Vec<ComparisonCell>,
}

/// Run the same trials (identical per-trial noise streams) under each
/// schedule and compare averaged-iterate errors; differences are paired.
pub fn schedule_comparison(
    sys: &TwoTimeScaleSystem,
    schedules: &[StepSchedule],
    trials: usize,
    checkpoints: &[u64],
    seed: u64,
    x0: &[f64],
    y0: &[f64],
    model: &dyn NoiseModel,
) -> Result<ComparisonTable, StatsError> {
    if schedules.len() < 2 {
        return Err(StatsError::InvalidSpec("need at least two schedules to compare".into()));
    }
    let spec_for = |sched_seed: u64| CampaignSpec {
        trials,
        horizon: *checkpoints.last().unwrap(),
        checkpoints: checkpoints.to_vec(),
        seed: sched_seed,
        x0: x0.to_vec(),
        y0: y0.to_vec(),
        collect: CollectFlags {
            last_iterate: false,
            pr_average: false,
            diagnostics: false,
            keep_raw: true,
        },
        burn_in: 0,
    };
    // Same seed for every schedule: common random numbers.
    let mut per_sched: Vec<RawEnsembles> = Vec::with_capacity(schedules.len());
    for sched in schedules {
        let spec = spec_for(seed);
        spec.validate(sys)?;
        let outcomes: Vec<Result<TrialOutcome, StatsError>> = (0..trials)
            .into_par_iter()
            .map(|trial| run_trial(sys, sched, &spec, model, trial))
            .collect();
        let mut raw = RawEnsembles::default();
        for k in 0..checkpoints.len() {
            let mut pr_x_k = Vec::with_capacity(trials);
            let mut pr_y_k = Vec::with_capacity(trials);
            let _ = k;
            pr_x_k.clear();
            pr_y_k.clear();
            raw.pr_x_err.push(pr_x_k);
            raw.pr_y_err.push(pr_y_k);
        }
        let mut collected: Vec<TrialOutcome> = Vec::with_capacity(trials);
        for o in outcomes {
            let o = o?;
            if o.failed {
                return Err(StatsError::TooManyFailures { failed: 1, trials });
            }
            collected.push(o);
        }
        for t in &collected {
            for k in 0..checkpoints.len() {
                raw.pr_x_err[k].push(t.pr_x[k].clone());
                raw.pr_y_err[k].push(t.pr_y[k].clone());
            }
        }
        per_sched.push(raw);
    }

    let mut cells = Vec::new();
    for (sid, raw) in per_sched.iter().enumerate() {
        for (k, &n) in checkpoints.iter().enumerate() {
            let fast_norms: Vec<f64> =
                raw.pr_x_err[k].iter().map(|v| matlib::vec_norm(v)).collect();
            let slow_norms: Vec<f64> =
                raw.pr_y_err[k].iter().map(|v| matlib::vec_norm(v)).collect();
            let ref_slow: Vec<f64> =
                per_sched[0].pr_y_err[k].iter().map(|v| matlib::vec_norm(v)).collect();
            let diffs: Vec<f64> =
                slow_norms.iter().zip(&ref_slow).map(|(a, b)| a - b).collect();
            let mean_fast = fast_norms.iter().sum::<f64>() / trials as f64;
            let mean_slow = slow_norms.iter().sum::<f64>() / trials as f64;
            let mut rng =
                derive_rng(seed, &[tag::BOOTSTRAP, 0xC0 + sid as u64, k as u64]);
            let fast_ci = bootstrap_mean_ci(&fast_norms, &mut rng);
            let slow_ci = bootstrap_mean_ci(&slow_norms, &mut rng);
            let paired_ci = bootstrap_mean_ci(&diffs, &mut rng);
            cells.push(ComparisonCell {
                schedule_id: sid,
                n,
                mean_fast,
                fast_ci,
                mean_slow,
                slow_ci,
                paired_slow_diff: diffs.iter().sum::<f64>() / trials as f64,
                paired_slow_ci: paired_ci,
            });
        }
    }
    Ok(ComparisonTable {
        schedule_names: schedules.iter().map(|s| format!("{s:?}")).collect(),
        checkpoints: checkpoints.to_vec(),
        trials,
        seed,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{make_system, random_system};

    #[test]
    fn quantile_reference_values() {
        assert!((norm_quantile(0.5)).abs() < 1e-15);
        // Phi^{-1}(0.975) = 1.959963984540054...
        assert!((norm_quantile(0.975) - 1.959963984540054).abs() < 1e-12);
        assert!((norm_quantile(0.025) + 1.959963984540054).abs() < 1e-12);
        // Deep tail.
        assert!((norm_quantile(1e-10) + 6.361340902404056).abs() < 1e-9);
    }

    #[test]
    fn w1_perfect_coupling_is_zero() {
        let m = 500;
        let samples: Vec<f64> =
            (0..m).map(|i| 2.5 * norm_quantile((i as f64 + 0.5) / m as f64)).collect();
        let w1 = empirical_w1_to_gaussian(&samples, 2.5).unwrap();
        assert!(w1 < 1e-12, "w1 = {w1}");
    }

    #[test]
    fn w1_of_zeros_is_mean_absolute_normal() {
        let samples = vec![0.0; 4000];
        let w1 = empirical_w1_to_gaussian(&samples, 1.0).unwrap();
        let expect = (2.0 / std::f64::consts::PI).sqrt();
        assert!((w1 - expect).abs() < 2.0 / (4000f64).sqrt(), "w1 = {w1}");
    }

    #[test]
    fn w1_of_gaussian_sample_is_small() {
        use rand_distr::StandardNormal;
        let mut rng = derive_rng(4, &[tag::TRIAL]);
        let samples: Vec<f64> =
            (0..100_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let w1 = empirical_w1_to_gaussian(&samples, 1.0).unwrap();
        assert!(w1 <= 0.02, "w1 = {w1}");
    }

    #[test]
    fn w1_rejects_tiny_input() {
        assert!(matches!(
            empirical_w1_to_gaussian(&[1.0], 1.0),
            Err(StatsError::EmptyInput)
        ));
    }

    #[test]
    fn expected_error_exact_cases() {
        let mut rng = derive_rng(1, &[tag::BOOTSTRAP]);
        let samples = vec![vec![3.0, 4.0]; 50];
        let (mean, stderr) = expected_error(&samples, &mut rng).unwrap();
        assert!((mean - 5.0).abs() < 1e-12);
        assert!(stderr.abs() < 1e-12);
    }

    #[test]
    fn expected_error_chi_mean() {
        use rand_distr::StandardNormal;
        let mut rng = derive_rng(2, &[tag::TRIAL]);
        let samples: Vec<Vec<f64>> = (0..200_000)
            .map(|_| vec![rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal)])
            .collect();
        let mut brng = derive_rng(2, &[tag::BOOTSTRAP]);
        let (mean, stderr) = expected_error(&samples, &mut brng).unwrap();
        let expect = (std::f64::consts::PI / 2.0).sqrt();
        assert!((mean - expect).abs() < 4.0 * stderr.max(5e-4), "mean {mean}");
    }

    #[test]
    fn density_integrates_to_one() {
        use rand_distr::StandardNormal;
        let mut rng = derive_rng(3, &[tag::TRIAL]);
        let samples: Vec<f64> =
            (0..100_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let d = density_export(&samples, 60).unwrap();
        let integral = d.kde_trapezoid_integral();
        assert!((integral - 1.0).abs() <= 1e-6, "integral = {integral}");
        // KDE at the mode close to the normal density there.
        let at_zero = d
            .grid
            .iter()
            .zip(&d.kde)
            .min_by(|a, b| a.0.abs().total_cmp(&b.0.abs()))
            .map(|(_, k)| *k)
            .unwrap();
        let expect = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((at_zero - expect).abs() < 0.02, "kde(0) = {at_zero}");
        // Histogram mass is 1 by construction.
        let mass: f64 = d
            .bin_density
            .iter()
            .enumerate()
            .map(|(i, h)| h * (d.bin_edges[i + 1] - d.bin_edges[i]))
            .sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn density_degenerate_and_symmetric() {
        let d = density_export(&[1.5; 100], 10).unwrap();
        assert_eq!(d.bin_density.len(), 1);
        assert!((d.kde_trapezoid_integral() - 1.0).abs() < 1e-6);

        let d2 = density_export(&[-1.0, 1.0], 2).unwrap();
        assert_eq!(d2.bin_density.len(), 2);
        assert!((d2.bin_density[0] - d2.bin_density[1]).abs() < 1e-12);
    }

    fn small_campaign_spec(seed: u64) -> CampaignSpec {
        CampaignSpec {
            trials: 8,
            horizon: 200,
            checkpoints: vec![50, 200],
            seed,
            x0: vec![1.0, -1.0],
            y0: vec![0.5, 0.25],
            collect: CollectFlags {
                last_iterate: true,
                pr_average: true,
                diagnostics: true,
                keep_raw: true,
            },
            burn_in: 0,
        }
    }

    #[test]
    fn campaign_deterministic_across_worker_counts() {
        let sys = random_system(2, 2, 88, (0.5, 2.0)).unwrap();
        let sched = StepSchedule::polynomial(0.5, 0.5, 0.6, 0.75).unwrap();
        let spec = small_campaign_spec(42);
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let r1 = pool1.install(|| run_campaign_gaussian(&sys, &sched, &spec)).unwrap();
        let r4 = pool4.install(|| run_campaign_gaussian(&sys, &sched, &spec)).unwrap();
        let j1 = serde_json::to_string(&r1).unwrap();
        let j4 = serde_json::to_string(&r4).unwrap();
        assert_eq!(j1, j4);
    }

    #[test]
    fn campaign_zero_noise_from_fixed_point_gives_zero_errors() {
        // Zero covariance is not a valid system; emulate with a noise model
        // that always returns the mean.
        struct MeanOnly<'a>(&'a TwoTimeScaleSystem);
        impl NoiseSource for MeanSource<'_> {
            fn sample_into(
                &mut self,
                _t: u64,
                _x: &[f64],
                _y: &[f64],
                w: &mut [f64],
                v: &mut [f64],
            ) {
                w.copy_from_slice(self.0.mean_w());
                v.copy_from_slice(self.0.mean_v());
            }
        }
        struct MeanSource<'a>(&'a TwoTimeScaleSystem);
        impl NoiseModel for MeanOnly<'_> {
            fn make_source<'b>(&'b self, _rng: ChaCha8Rng) -> Box<dyn NoiseSource + 'b> {
                Box::new(MeanSource(self.0))
            }
        }
        let sys = random_system(2, 2, 12, (0.5, 2.0)).unwrap();
        let spec = CampaignSpec {
            trials: 1,
            horizon: 100,
            checkpoints: vec![100],
            seed: 1,
            x0: sys.x_star.clone(),
            y0: sys.y_star.clone(),
            collect: CollectFlags {
                last_iterate: true,
                pr_average: true,
                diagnostics: false,
                keep_raw: false,
            },
            burn_in: 0,
        };
        let sched = StepSchedule::polynomial(0.5, 0.5, 0.6, 0.75).unwrap();
        let rep = run_campaign(&sys, &sched, &spec, &MeanOnly(&sys)).unwrap();
        let ck = &rep.checkpoints[0];
        assert!(ck.pr_err_slow_norm.as_ref().unwrap().mean < 1e-12);
        assert!(ck.pr_err_fast_norm.as_ref().unwrap().mean < 1e-12);
    }

    #[test]
    fn campaign_spec_validation() {
        let sys = random_system(2, 2, 12, (0.5, 2.0)).unwrap();
        let mut spec = small_campaign_spec(1);
        spec.checkpoints = vec![200, 50];
        assert!(matches!(spec.validate(&sys), Err(StatsError::InvalidSpec(_))));
        let mut spec2 = small_campaign_spec(1);
        spec2.horizon = 100;
        assert!(matches!(spec2.validate(&sys), Err(StatsError::InvalidSpec(_))));
    }

    #[test]
    fn comparison_identical_schedules_identical_columns() {
        let sys = random_system(2, 2, 5, (0.5, 2.0)).unwrap();
        let sched = StepSchedule::polynomial(0.5, 0.5, 0.6, 0.75).unwrap();
        let table = schedule_comparison(
            &sys,
            &[sched.clone(), sched],
            6,
            &[50, 100],
            9,
            &[1.0, 0.0],
            &[0.0, 1.0],
            &GaussianModel { sys: &sys },
        )
        .unwrap();
        for k in 0..2 {
            let a = &table.cells[k];
            let b = &table.cells[2 + k];
            assert_eq!(a.mean_slow, b.mean_slow);
            assert_eq!(a.mean_fast, b.mean_fast);
            assert_eq!(b.paired_slow_diff, 0.0);
        }
    }

    #[test]
    fn calibrated_campaign_slow_std_near_one() {
        // Smoke-scale version of the distributional check: the empirical
        // std of sqrt(n) (ybar - y*) should approach 1 on a calibrated
        // system.
        use crate::system::calibrate_noise_identity_pr;
        let sys = random_system(2, 2, 301, (0.5, 2.0)).unwrap();
        let sys = calibrate_noise_identity_pr(&sys, 1.0).unwrap();
        let sched = StepSchedule::offset_experiment(
            0.5,
            0.5,
            0.1,
            0.2,
            1000,
            crate::schedule::LogBase::Natural,
        )
        .unwrap();
        let spec = CampaignSpec {
            trials: 400,
            horizon: 20_000,
            checkpoints: vec![20_000],
            seed: 77,
            x0: vec![0.0; 2],
            y0: vec![0.0; 2],
            collect: CollectFlags {
                last_iterate: false,
                pr_average: true,
                diagnostics: false,
                keep_raw: false,
            },
            burn_in: 0,
        };
        let rep = run_campaign_gaussian(&sys, &sched, &spec).unwrap();
        let stats = rep.checkpoints[0].pr_slow_sqrtn.as_ref().unwrap();
        for c in 0..2 {
            let s = stats.per_coord_std[c];
            assert!((0.8..1.25).contains(&s), "std[{c}] = {s}");
        }
    }
}
