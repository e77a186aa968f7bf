//! Step-size schedules for the coupled recursion.
//!
//! Three families are supported: plain polynomial decay alpha_1 t^{-a},
//! gamma_1 t^{-b} with 1/2 < a < b < 1; the horizon-tuned log-corrected
//! rule with exponents 1/2 + c/log(n); and the offset form used in the
//! simulation studies, alpha_1/(t+offset)^{1/2 + c_a/log(t+1)}. Logs are
//! natural unless `LogBase::Ten` is selected.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("invalid schedule parameter: {0}")]
    InvalidParameter(String),
    #[error("iteration index must be >= 1")]
    InvalidTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogBase {
    Natural,
    Ten,
}

impl LogBase {
    #[inline]
    fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Ten => x.log10(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StepSchedule {
    /// alpha_t = alpha1 t^{-a}, gamma_t = gamma1 t^{-b}.
    Polynomial { alpha1: f64, gamma1: f64, a: f64, b: f64 },
    /// Exponents a = 1/2 + c_a/log(horizon), b = 1/2 + c_b/log(horizon),
    /// applied as alpha1 t^{-a}, gamma1 t^{-b}.
    LogCorrected { alpha1: f64, gamma1: f64, c_a: f64, c_b: f64, horizon: u64 },
    /// alpha1/(t+offset)^{1/2 + c_a/log(t+1)} and the gamma analogue.
    OffsetExperiment {
        alpha1: f64,
        gamma1: f64,
        c_a: f64,
        c_b: f64,
        offset: u64,
        log_base: LogBase,
    },
}

impl StepSchedule {
    pub fn polynomial(alpha1: f64, gamma1: f64, a: f64, b: f64) -> Result<Self, ScheduleError> {
        if !(alpha1 > 0.0 && gamma1 > 0.0) {
            return Err(ScheduleError::InvalidParameter("alpha1, gamma1 must be > 0".into()));
        }
        if !(0.5 < a && a < b && b < 1.0) {
            return Err(ScheduleError::InvalidParameter(format!(
                "polynomial exponents need 1/2 < a < b < 1, got a={a}, b={b}"
            )));
        }
        // gamma_t/alpha_t = (gamma1/alpha1) t^{a-b} is maximal at t = 1.
        if gamma1 > alpha1 {
            return Err(ScheduleError::InvalidParameter(
                "gamma1 must not exceed alpha1 (gamma_t <= alpha_t for all t)".into(),
            ));
        }
        Ok(StepSchedule::Polynomial { alpha1, gamma1, a, b })
    }

    /// The c_b = 2 c_a boundary is admitted: the experiment recipe
    /// (c_a, c_b) = (0.1, 0.2) sits exactly there.
    pub fn log_corrected(
        alpha1: f64,
        gamma1: f64,
        c_a: f64,
        c_b: f64,
        horizon: u64,
    ) -> Result<Self, ScheduleError> {
        if !(alpha1 > 0.0 && gamma1 > 0.0) {
            return Err(ScheduleError::InvalidParameter("alpha1, gamma1 must be > 0".into()));
        }
        if !(0.0 < c_a && c_a < c_b && c_b <= 2.0 * c_a) {
            return Err(ScheduleError::InvalidParameter(format!(
                "log-corrected constants need 0 < c_a < c_b <= 2 c_a, got c_a={c_a}, c_b={c_b}"
            )));
        }
        if horizon < 2 {
            return Err(ScheduleError::InvalidParameter("horizon must be >= 2".into()));
        }
        if gamma1 > alpha1 {
            return Err(ScheduleError::InvalidParameter(
                "gamma1 must not exceed alpha1 (gamma_t <= alpha_t for all t)".into(),
            ));
        }
        Ok(StepSchedule::LogCorrected { alpha1, gamma1, c_a, c_b, horizon })
    }

    pub fn offset_experiment(
        alpha1: f64,
        gamma1: f64,
        c_a: f64,
        c_b: f64,
        offset: u64,
        log_base: LogBase,
    ) -> Result<Self, ScheduleError> {
        if !(alpha1 > 0.0 && gamma1 > 0.0) {
            return Err(ScheduleError::InvalidParameter("alpha1, gamma1 must be > 0".into()));
        }
        if !(0.0 < c_a && c_a < c_b) {
            return Err(ScheduleError::InvalidParameter(format!(
                "offset form needs 0 < c_a < c_b, got c_a={c_a}, c_b={c_b}"
            )));
        }
        if gamma1 > alpha1 {
            return Err(ScheduleError::InvalidParameter(
                "gamma1 must not exceed alpha1 (gamma_t <= alpha_t for all t)".into(),
            ));
        }
        Ok(StepSchedule::OffsetExperiment { alpha1, gamma1, c_a, c_b, offset, log_base })
    }

    /// Effective polynomial exponents (a, b); for the offset form these are
    /// the t-dependent exponents evaluated at t.
    pub fn exponents_at(&self, t: u64) -> (f64, f64) {
        match *self {
            StepSchedule::Polynomial { a, b, .. } => (a, b),
            StepSchedule::LogCorrected { c_a, c_b, horizon, .. } => {
                let log_n = (horizon as f64).ln();
                (0.5 + c_a / log_n, 0.5 + c_b / log_n)
            }
            StepSchedule::OffsetExperiment { c_a, c_b, log_base, .. } => {
                let lg = log_base.log((t + 1) as f64);
                (0.5 + c_a / lg, 0.5 + c_b / lg)
            }
        }
    }

    pub fn step_sizes(&self, t: u64) -> Result<(f64, f64), ScheduleError> {
        if t == 0 {
            return Err(ScheduleError::InvalidTime);
        }
        Ok(self.eval(t))
    }

    #[inline]
    pub(crate) fn eval(&self, t: u64) -> (f64, f64) {
        let tf = t as f64;
        match *self {
            StepSchedule::Polynomial { alpha1, gamma1, a, b } => {
                (alpha1 * tf.powf(-a), gamma1 * tf.powf(-b))
            }
            StepSchedule::LogCorrected { alpha1, gamma1, c_a, c_b, horizon } => {
                let log_n = (horizon as f64).ln();
                (
                    alpha1 * tf.powf(-(0.5 + c_a / log_n)),
                    gamma1 * tf.powf(-(0.5 + c_b / log_n)),
                )
            }
            StepSchedule::OffsetExperiment { alpha1, gamma1, c_a, c_b, offset, log_base } => {
                let base = (t + offset) as f64;
                let lg = log_base.log(tf + 1.0);
                (
                    alpha1 * base.powf(-(0.5 + c_a / lg)),
                    gamma1 * base.powf(-(0.5 + c_b / lg)),
                )
            }
        }
    }

    /// Limit of alpha_t/gamma_t: infinite for polynomial b > a, and
    /// (alpha1/gamma1) e^{c_b - c_a} for both log-corrected forms.
    pub fn timescale_gap_limit(&self) -> f64 {
        match *self {
            StepSchedule::Polynomial { .. } => f64::INFINITY,
            StepSchedule::LogCorrected { alpha1, gamma1, c_a, c_b, .. }
            | StepSchedule::OffsetExperiment { alpha1, gamma1, c_a, c_b, .. } => {
                (alpha1 / gamma1) * (c_b - c_a).exp()
            }
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            StepSchedule::Polynomial { .. } => "polynomial",
            StepSchedule::LogCorrected { .. } => "log-corrected",
            StepSchedule::OffsetExperiment { .. } => "offset-experiment",
        }
    }
}

/// The step-exponent region where the simplified distance bound applies:
/// 1/2 < a < b < 2a - 1/2. The upper comparison carries a 1e-12 guard so
/// that decimal inputs sitting exactly on the boundary (e.g. a = 0.55,
/// b = 0.6) are excluded despite rounding in 2a - 1/2.
pub fn in_theta_region(a: f64, b: f64) -> bool {
    0.5 < a && a < b && b < 2.0 * a - 0.5 - 1e-12
}

#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    pub holds: bool,
    pub bound: f64,
    pub ratio_at_1: f64,
    pub sup_ratio: f64,
    pub first_violation: Option<u64>,
    pub note: String,
}

/// Check gamma_t/alpha_t <= (1/4) min{mu_ff/m_f, mu_ff/m_fs, mu_delta/m_s}
/// over t in [1, t_max].
///
/// The ratio is monotone in t for every kind, but not always decreasing:
/// the offset form with offset >= 1 has an increasing ratio, so the check
/// samples a logarithmic grid plus both endpoints rather than t = 1 alone.
pub fn validate_gap_condition(
    sched: &StepSchedule,
    mu_ff: f64,
    mu_delta: f64,
    m_f: f64,
    m_fs: f64,
    m_s: f64,
    t_max: u64,
) -> GapReport {
    let bound = 0.25 * (mu_ff / m_f).min(mu_ff / m_fs).min(mu_delta / m_s);
    let ratio = |t: u64| {
        let (a, g) = sched.eval(t);
        g / a
    };
    let mut grid: Vec<u64> = vec![1];
    let mut t = 1.0_f64;
    while t < t_max as f64 {
        t *= 1.3;
        let ti = (t as u64).min(t_max);
        if *grid.last().unwrap() != ti {
            grid.push(ti);
        }
    }
    if *grid.last().unwrap() != t_max {
        grid.push(t_max);
    }
    let mut sup_ratio = 0.0_f64;
    let mut first_violation = None;
    for &ti in &grid {
        let r = ratio(ti);
        sup_ratio = sup_ratio.max(r);
        if r > bound && first_violation.is_none() {
            first_violation = Some(ti);
        }
    }
    let note = match sched {
        StepSchedule::Polynomial { .. } | StepSchedule::LogCorrected { .. } => {
            "ratio gamma_t/alpha_t is nonincreasing; grid check is conservative".to_string()
        }
        StepSchedule::OffsetExperiment { .. } => {
            "offset form has a nondecreasing ratio approaching (gamma1/alpha1) e^{c_a - c_b}; grid includes t_max".to_string()
        }
    };
    GapReport { holds: first_violation.is_none(), bound, ratio_at_1: ratio(1), sup_ratio, first_violation, note }
}
