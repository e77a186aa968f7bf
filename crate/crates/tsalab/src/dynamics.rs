//! The coupled fast/slow iteration engine.
//!
//! One step from time t applies
//!     x_{t+1} = x_t - alpha_t (A_ff x_t + A_fs y_t - W_t)
//!     y_{t+1} = y_t - gamma_t (A_sf x_t + A_ss y_t - V_t)
//! and folds the new point into the running averages. With diagnostics
//! enabled the engine also tracks the decoupling sequence L_t, the
//! telescoping sums sum_t alpha_t^{-1}(x_t - x_{t+1}) (exactly the drift
//! terms, so the algebra stays at rounding level), and the noise
//! combinations that appear in the averaged-iterate identities.

use crate::matlib::{self, LuFactor, Matrix};
use crate::schedule::StepSchedule;
use crate::system::{NoiseSample, NoiseSource, TwoTimeScaleSystem};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite iterate produced at t = {0} (step size too large or unstable system)")]
    NonFiniteIterate(u64),
    #[error("decoupling update factor is numerically singular")]
    SingularUpdate,
    #[error("diagnostics are disabled for this trajectory")]
    DiagnosticsDisabled,
}

#[derive(Debug, Clone)]
pub struct Diagnostics {
    /// Current L_t (dx x dy), L_1 = 0.
    pub l: Matrix,
    /// sum_{s<t} alpha_s^{-1} (x_s - x_{s+1}).
    pub telescope_x: Vec<f64>,
    /// sum_{s<t} gamma_s^{-1} (y_s - y_{s+1}).
    pub telescope_y: Vec<f64>,
    /// sum_{s<t} (W_s - A_fs A_ss^{-1} V_s), raw noise.
    pub noise_sum_fast: Vec<f64>,
    /// sum_{s<t} (V_s - A_sf A_ff^{-1} W_s), raw noise.
    pub noise_sum_slow: Vec<f64>,
    /// Averages over 1..t-1, i.e. over exactly the steps the sums cover.
    pub prev_x_bar: Vec<f64>,
    pub prev_y_bar: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryState {
    pub t: u64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub x_bar: Vec<f64>,
    pub y_bar: Vec<f64>,
    pub diag: Option<Diagnostics>,
    scratch_x: Vec<f64>,
    scratch_y: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ErrorSnapshot {
    pub t: u64,
    /// x_t - x_infty(y_t) in the solution frame:
    /// (x_t - x*) + A_ff^{-1} A_fs (y_t - y*).
    pub x_hat: Vec<f64>,
    pub y_hat: Vec<f64>,
    /// x_hat + L_t y_hat.
    pub x_tilde: Vec<f64>,
    pub pr_x_err: Vec<f64>,
    pub pr_y_err: Vec<f64>,
}

pub fn init_trajectory(
    sys: &TwoTimeScaleSystem,
    x0: &[f64],
    y0: &[f64],
    diagnostics: bool,
) -> Result<TrajectoryState, DynamicsError> {
    if x0.len() != sys.dx || y0.len() != sys.dy {
        return Err(DynamicsError::DimensionMismatch(format!(
            "initial point must be ({}, {}), got ({}, {})",
            sys.dx,
            sys.dy,
            x0.len(),
            y0.len()
        )));
    }
    let diag = diagnostics.then(|| Diagnostics {
        l: Matrix::zeros(sys.dx, sys.dy),
        telescope_x: vec![0.0; sys.dx],
        telescope_y: vec![0.0; sys.dy],
        noise_sum_fast: vec![0.0; sys.dx],
        noise_sum_slow: vec![0.0; sys.dy],
        prev_x_bar: x0.to_vec(),
        prev_y_bar: y0.to_vec(),
    });
    Ok(TrajectoryState {
        t: 1,
        x: x0.to_vec(),
        y: y0.to_vec(),
        x_bar: x0.to_vec(),
        y_bar: y0.to_vec(),
        diag,
        scratch_x: vec![0.0; sys.dx],
        scratch_y: vec![0.0; sys.dy],
    })
}

impl TrajectoryState {
    /// Advance in place from t to t+1 using the supplied noise draw.
    pub fn advance(
        &mut self,
        sys: &TwoTimeScaleSystem,
        sched: &StepSchedule,
        w: &[f64],
        v: &[f64],
    ) -> Result<(), DynamicsError> {
        debug_assert_eq!(w.len(), sys.dx);
        debug_assert_eq!(v.len(), sys.dy);
        let t = self.t;
        let (alpha, gamma) = sched.eval(t);

        // Drifts: A_ff x + A_fs y - w and A_sf x + A_ss y - v. These equal
        // alpha^{-1}(x_t - x_{t+1}) and gamma^{-1}(y_t - y_{t+1}) exactly.
        sys.a_ff.matvec_into(&self.x, &mut self.scratch_x);
        sys.a_fs.matvec_acc(&self.y, &mut self.scratch_x);
        for (d, wi) in self.scratch_x.iter_mut().zip(w) {
            *d -= wi;
        }
        sys.a_sf.matvec_into(&self.x, &mut self.scratch_y);
        sys.a_ss.matvec_acc(&self.y, &mut self.scratch_y);
        for (d, vi) in self.scratch_y.iter_mut().zip(v) {
            *d -= vi;
        }

        if let Some(diag) = self.diag.as_mut() {
            matlib::axpy(1.0, &self.scratch_x, &mut diag.telescope_x);
            matlib::axpy(1.0, &self.scratch_y, &mut diag.telescope_y);
            // Noise combinations W - A_fs A_ss^{-1} V and V - A_sf A_ff^{-1} W.
            let mut combo_fast = sys.afs_ass_inv.matvec(v);
            for i in 0..sys.dx {
                combo_fast[i] = w[i] - combo_fast[i];
            }
            matlib::axpy(1.0, &combo_fast, &mut diag.noise_sum_fast);
            let mut combo_slow = sys.asf_aff_inv.matvec(w);
            for j in 0..sys.dy {
                combo_slow[j] = v[j] - combo_slow[j];
            }
            matlib::axpy(1.0, &combo_slow, &mut diag.noise_sum_slow);
            diag.l = update_l(&diag.l, sys, alpha, gamma)?;
            diag.prev_x_bar.copy_from_slice(&self.x_bar);
            diag.prev_y_bar.copy_from_slice(&self.y_bar);
        }

        let mut finite = true;
        for (xi, d) in self.x.iter_mut().zip(&self.scratch_x) {
            *xi -= alpha * d;
            finite &= xi.is_finite();
        }
        for (yi, d) in self.y.iter_mut().zip(&self.scratch_y) {
            *yi -= gamma * d;
            finite &= yi.is_finite();
        }
        if !finite {
            return Err(DynamicsError::NonFiniteIterate(t + 1));
        }

        let tn = (t + 1) as f64;
        for (b, xi) in self.x_bar.iter_mut().zip(&self.x) {
            *b += (xi - *b) / tn;
        }
        for (b, yi) in self.y_bar.iter_mut().zip(&self.y) {
            *b += (yi - *b) / tn;
        }
        self.t = t + 1;
        Ok(())
    }

    pub fn advance_with(
        &mut self,
        sys: &TwoTimeScaleSystem,
        sched: &StepSchedule,
        source: &mut dyn NoiseSource,
        w_buf: &mut [f64],
        v_buf: &mut [f64],
    ) -> Result<(), DynamicsError> {
        source.sample_into(self.t, &self.x, &self.y, w_buf, v_buf);
        self.advance(sys, sched, w_buf, v_buf)
    }
}

/// Pure one-step transition (clones the state; hot paths use `advance`).
pub fn step(
    state: &TrajectoryState,
    sys: &TwoTimeScaleSystem,
    sched: &StepSchedule,
    noise: &NoiseSample,
) -> Result<TrajectoryState, DynamicsError> {
    let mut next = state.clone();
    next.advance(sys, sched, &noise.w, &noise.v)?;
    Ok(next)
}

/// One decoupling-sequence update:
/// L_{t+1} (I - gamma (Delta - A_sf L_t))
///     = L_t - alpha A_ff L_t + gamma A_ff^{-1} A_fs (Delta - A_sf L_t).
pub fn update_l(
    l: &Matrix,
    sys: &TwoTimeScaleSystem,
    alpha: f64,
    gamma: f64,
) -> Result<Matrix, DynamicsError> {
    let d = sys.delta.sub(&sys.a_sf.matmul(l)); // Delta - A_sf L_t
    let m = Matrix::identity(sys.dy).sub(&d.scale(gamma)); // right factor
    let rhs = l
        .sub(&sys.a_ff.matmul(l).scale(alpha))
        .add(&sys.inv_aff_afs.matmul(&d).scale(gamma));
    // L_{t+1} = rhs m^{-1}: solve m^T X = rhs^T.
    let lu = LuFactor::new(&m.transpose()).map_err(|_| DynamicsError::SingularUpdate)?;
    if lu.pivot_ratio() < 1e-14 {
        return Err(DynamicsError::SingularUpdate);
    }
    let next = lu.solve_matrix(&rhs.transpose()).transpose();
    if !next.all_finite() {
        return Err(DynamicsError::SingularUpdate);
    }
    Ok(next)
}

pub fn snapshot_errors(
    state: &TrajectoryState,
    sys: &TwoTimeScaleSystem,
) -> Result<ErrorSnapshot, DynamicsError> {
    let diag = state.diag.as_ref().ok_or(DynamicsError::DiagnosticsDisabled)?;
    let y_hat = matlib::vec_sub(&state.y, &sys.y_star);
    let x_err = matlib::vec_sub(&state.x, &sys.x_star);
    let mut x_hat = sys.inv_aff_afs.matvec(&y_hat);
    for i in 0..sys.dx {
        x_hat[i] += x_err[i];
    }
    let mut x_tilde = diag.l.matvec(&y_hat);
    for i in 0..sys.dx {
        x_tilde[i] += x_hat[i];
    }
    Ok(ErrorSnapshot {
        t: state.t,
        x_hat,
        y_hat,
        x_tilde,
        pr_x_err: matlib::vec_sub(&state.x_bar, &sys.x_star),
        pr_y_err: matlib::vec_sub(&state.y_bar, &sys.y_star),
    })
}

/// Residuals of the averaged-iterate identities over the first n = t-1
/// steps. Both vanish pathwise up to rounding:
///   G (xbar_n - x*) = n^{-1} sum (W - A_fs A_ss^{-1} V - mean combo)
///                   + n^{-1} sum (alpha_t^{-1}(x_t - x_{t+1})
///                                 - gamma_t^{-1} A_fs A_ss^{-1}(y_t - y_{t+1}))
/// and the slow analogue
///   Delta (ybar_n - y*) = n^{-1} sum (V - A_sf A_ff^{-1} W - mean combo)
///                       + n^{-1} sum (gamma_t^{-1}(y_t - y_{t+1})
///                                     - A_sf A_ff^{-1} alpha_t^{-1}(x_t - x_{t+1})).
/// Note the minus on the slow cross-telescope term; it is forced by the
/// algebra (substituting the fast recursion into Delta y_t) and is what
/// makes the residual vanish on every path.
pub fn verify_pr_identity(
    state: &TrajectoryState,
    sys: &TwoTimeScaleSystem,
) -> Result<(f64, f64), DynamicsError> {
    let diag = state.diag.as_ref().ok_or(DynamicsError::DiagnosticsDisabled)?;
    if state.t < 2 {
        return Err(DynamicsError::DimensionMismatch(
            "identity check needs at least one completed step".into(),
        ));
    }
    let n = (state.t - 1) as f64;

    // Mean of the fast noise combination equals G x*, slow equals Delta y*.
    let mut mean_fast = sys.afs_ass_inv.matvec(sys.mean_v());
    for i in 0..sys.dx {
        mean_fast[i] = sys.mean_w()[i] - mean_fast[i];
    }
    let mut mean_slow = sys.asf_aff_inv.matvec(sys.mean_w());
    for j in 0..sys.dy {
        mean_slow[j] = sys.mean_v()[j] - mean_slow[j];
    }

    let pr_x = matlib::vec_sub(&diag.prev_x_bar, &sys.x_star);
    let lhs_fast = sys.g.matvec(&pr_x);
    let tel_fast = {
        let cross = sys.afs_ass_inv.matvec(&diag.telescope_y);
        let mut t = diag.telescope_x.clone();
        for i in 0..sys.dx {
            t[i] -= cross[i];
        }
        t
    };
    let mut res_fast = 0.0;
    for i in 0..sys.dx {
        let noise_centered = diag.noise_sum_fast[i] - n * mean_fast[i];
        let r = lhs_fast[i] - (noise_centered + tel_fast[i]) / n;
        res_fast += r * r;
    }

    let pr_y = matlib::vec_sub(&diag.prev_y_bar, &sys.y_star);
    let lhs_slow = sys.delta.matvec(&pr_y);
    let tel_slow = {
        let cross = sys.asf_aff_inv.matvec(&diag.telescope_x);
        let mut t = diag.telescope_y.clone();
        for j in 0..sys.dy {
            t[j] -= cross[j];
        }
        t
    };
    let mut res_slow = 0.0;
    for j in 0..sys.dy {
        let noise_centered = diag.noise_sum_slow[j] - n * mean_slow[j];
        let r = lhs_slow[j] - (noise_centered + tel_slow[j]) / n;
        res_slow += r * r;
    }
    Ok((res_fast.sqrt(), res_slow.sqrt()))
}
