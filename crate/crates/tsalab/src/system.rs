//! Two-time-scale problem instances.
//!
//! A system is the block matrix A = [[A_ff, A_fs], [A_sf, A_ss]], the noise
//! covariance Gamma over the stacked (W, V) noise, a constant noise mean,
//! and the exact solution (x*, y*) of A z = E[N]. Stability means both the
//! fast block A_ff and the slow Schur complement
//! Delta = A_ss - A_sf A_ff^{-1} A_fs have spectra in the open right half
//! plane.

use crate::matlib::{
    self, inverse, spectral_abscissa, sqrt_of_symmetric, Matrix, MatError,
};
use crate::rng::{derive_rng, tag};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("fast block A_ff is not stable (spectral abscissa {0:.3e} <= 0)")]
    UnstableFastBlock(f64),
    #[error("slow Schur complement is not stable (spectral abscissa {0:.3e} <= 0)")]
    UnstableSchurComplement(f64),
    #[error("noise covariance is not positive definite")]
    NoiseCovarianceNotPD,
    #[error("system matrix A is singular")]
    SingularA,
    #[error("noise calibration failed: no positive definite Gamma_ss after {0} halvings")]
    CalibrationFailed(u32),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix kernel error: {0}")]
    Mat(#[from] MatError),
    #[error("system file parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One draw of the stacked noise (W, V), mean included.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub w: Vec<f64>,
    pub v: Vec<f64>,
}

/// Anything that can feed noise into the recursion. The current iterate is
/// passed through because the multiplicative policy-evaluation model needs
/// it; the Gaussian model ignores it.
pub trait NoiseSource {
    fn sample_into(&mut self, t: u64, x: &[f64], y: &[f64], w: &mut [f64], v: &mut [f64]);
}

#[derive(Debug, Clone)]
pub struct TwoTimeScaleSystem {
    pub dx: usize,
    pub dy: usize,
    pub a_ff: Matrix,
    pub a_fs: Matrix,
    pub a_sf: Matrix,
    pub a_ss: Matrix,
    /// Symmetric (dx+dy) noise covariance; positive definite for systems
    /// built through `make_system`, possibly semidefinite for assembled
    /// policy-evaluation instances.
    pub gamma_cov: Matrix,
    pub noise_mean: Vec<f64>,
    pub x_star: Vec<f64>,
    pub y_star: Vec<f64>,
    /// Generation seed when the instance came from `random_system`.
    pub seed: Option<u64>,
    // Derived operators used throughout the engine and theory layers.
    pub delta: Matrix,       // A_ss - A_sf A_ff^{-1} A_fs
    pub g: Matrix,           // A_ff - A_fs A_ss^{-1} A_sf
    pub inv_aff_afs: Matrix, // A_ff^{-1} A_fs
    pub afs_ass_inv: Matrix, // A_fs A_ss^{-1}
    pub asf_aff_inv: Matrix, // A_sf A_ff^{-1}
    pub sqrt_gamma: Matrix,
}

impl TwoTimeScaleSystem {
    pub fn dim(&self) -> usize {
        self.dx + self.dy
    }

    pub fn a_full(&self) -> Matrix {
        Matrix::from_blocks(&self.a_ff, &self.a_fs, &self.a_sf, &self.a_ss)
    }

    pub fn gamma_ff(&self) -> Matrix {
        self.gamma_cov.block(0, 0, self.dx, self.dx)
    }

    pub fn gamma_fs(&self) -> Matrix {
        self.gamma_cov.block(0, self.dx, self.dx, self.dy)
    }

    pub fn gamma_sf(&self) -> Matrix {
        self.gamma_cov.block(self.dx, 0, self.dy, self.dx)
    }

    pub fn gamma_ss(&self) -> Matrix {
        self.gamma_cov.block(self.dx, self.dx, self.dy, self.dy)
    }

    pub fn mean_w(&self) -> &[f64] {
        &self.noise_mean[..self.dx]
    }

    pub fn mean_v(&self) -> &[f64] {
        &self.noise_mean[self.dx..]
    }

    /// Residual of A z* = E[N].
    pub fn solution_residual(&self) -> f64 {
        let a = self.a_full();
        let z: Vec<f64> = self.x_star.iter().chain(self.y_star.iter()).copied().collect();
        let az = a.matvec(&z);
        matlib::vec_norm(&matlib::vec_sub(&az, &self.noise_mean))
    }
}

/// Assembly warnings produced by the lenient constructor.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct SystemWarnings {
    pub messages: Vec<String>,
}

impl SystemWarnings {
    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}

/// Build a system enforcing every invariant: stability of A_ff and Delta,
/// positive definite Gamma, solvable A.
pub fn make_system(
    a_ff: Matrix,
    a_fs: Matrix,
    a_sf: Matrix,
    a_ss: Matrix,
    gamma_cov: Matrix,
    noise_mean: Vec<f64>,
) -> Result<TwoTimeScaleSystem, SystemError> {
    let (sys, warnings) = assemble(a_ff, a_fs, a_sf, a_ss, gamma_cov, noise_mean, None)?;
    for msg in &warnings.messages {
        if msg.contains("fast block") {
            let sa = spectral_abscissa(&sys.a_ff)?;
            return Err(SystemError::UnstableFastBlock(sa));
        }
        if msg.contains("Schur complement") {
            let sa = spectral_abscissa(&sys.delta)?;
            return Err(SystemError::UnstableSchurComplement(sa));
        }
        if msg.contains("covariance") {
            return Err(SystemError::NoiseCovarianceNotPD);
        }
    }
    Ok(sys)
}

/// Lenient constructor: dimension checks and solvability are hard errors,
/// stability and covariance definiteness come back as warnings. Used by the
/// policy-evaluation builder, which must report rather than fail.
pub fn assemble(
    a_ff: Matrix,
    a_fs: Matrix,
    a_sf: Matrix,
    a_ss: Matrix,
    gamma_cov: Matrix,
    noise_mean: Vec<f64>,
    seed: Option<u64>,
) -> Result<(TwoTimeScaleSystem, SystemWarnings), SystemError> {
    let dx = a_ff.rows();
    let dy = a_ss.rows();
    if !a_ff.is_square() || !a_ss.is_square() {
        return Err(SystemError::DimensionMismatch("A_ff and A_ss must be square".into()));
    }
    if a_fs.rows() != dx || a_fs.cols() != dy || a_sf.rows() != dy || a_sf.cols() != dx {
        return Err(SystemError::DimensionMismatch(format!(
            "cross blocks must be {dx}x{dy} and {dy}x{dx}"
        )));
    }
    if gamma_cov.rows() != dx + dy || gamma_cov.cols() != dx + dy {
        return Err(SystemError::DimensionMismatch("Gamma must be (dx+dy) square".into()));
    }
    if noise_mean.len() != dx + dy {
        return Err(SystemError::DimensionMismatch("noise mean must have length dx+dy".into()));
    }

    let mut warnings = SystemWarnings::default();

    let aff_inv = inverse(&a_ff).map_err(|_| SystemError::UnstableFastBlock(f64::NAN))?;
    let delta = a_ss.sub(&a_sf.matmul(&aff_inv).matmul(&a_fs));
    let ass_lu = matlib::LuFactor::new(&a_ss).map_err(|_| SystemError::SingularA)?;
    let ass_inv = ass_lu.inverse();
    let g = a_ff.sub(&a_fs.matmul(&ass_inv).matmul(&a_sf));

    let sa_fast = spectral_abscissa(&a_ff)?;
    if sa_fast <= 0.0 {
        warnings
            .messages
            .push(format!("fast block A_ff not certified stable: spectral abscissa {sa_fast:.6e}"));
    }
    let sa_slow = spectral_abscissa(&delta)?;
    if sa_slow <= 0.0 {
        warnings.messages.push(format!(
            "slow Schur complement not certified stable: spectral abscissa {sa_slow:.6e}"
        ));
    }
    if !gamma_cov.is_symmetric(1e-10) {
        return Err(SystemError::NoiseCovarianceNotPD);
    }
    let gamma_sym = gamma_cov.symmetrized();
    if matlib::cholesky(&gamma_sym).is_none() {
        warnings.messages.push("noise covariance is not positive definite".into());
    }
    let sqrt_gamma = sqrt_of_symmetric(&gamma_sym).map_err(|_| SystemError::NoiseCovarianceNotPD)?;

    let a = Matrix::from_blocks(&a_ff, &a_fs, &a_sf, &a_ss);
    let z_star = matlib::solve_linear(&a, &noise_mean).map_err(|_| SystemError::SingularA)?;
    let x_star = z_star[..dx].to_vec();
    let y_star = z_star[dx..].to_vec();

    let inv_aff_afs = aff_inv.matmul(&a_fs);
    let afs_ass_inv = a_fs.matmul(&ass_inv);
    let asf_aff_inv = a_sf.matmul(&aff_inv);

    Ok((
        TwoTimeScaleSystem {
            dx,
            dy,
            a_ff,
            a_fs,
            a_sf,
            a_ss,
            gamma_cov: gamma_sym,
            noise_mean,
            x_star,
            y_star,
            seed,
            delta,
            g,
            inv_aff_afs,
            afs_ass_inv,
            asf_aff_inv,
            sqrt_gamma,
        },
        warnings,
    ))
}

/// Random instance satisfying the stability assumption by construction.
///
/// A_ff = S + K with S symmetric (eigenvalues uniform in spectrum_range)
/// and K skew-symmetric scaled to half of S's smallest eigenvalue, so every
/// eigenvalue real part stays inside the range. The slow Schur complement
/// is drawn the same way and A_ss derived from it. Cross blocks are dense
/// uniform, normalized to unit spectral norm. Gamma = I, zero noise mean.
pub fn random_system(
    dx: usize,
    dy: usize,
    seed: u64,
    spectrum_range: (f64, f64),
) -> Result<TwoTimeScaleSystem, SystemError> {
    let (lo, hi) = spectrum_range;
    if dx < 1 || dy < 1 {
        return Err(SystemError::DimensionMismatch("dx, dy must be >= 1".into()));
    }
    if !(0.0 < lo && lo <= hi) {
        return Err(SystemError::DimensionMismatch(
            "spectrum range must satisfy 0 < low <= high".into(),
        ));
    }
    let mut rng = derive_rng(seed, &[tag::SYSTEM_GEN]);

    let a_ff = stable_block(dx, lo, hi, &mut rng);
    let delta_target = stable_block(dy, lo, hi, &mut rng);
    let a_sf = unit_norm_block(dy, dx, &mut rng);
    let a_fs = unit_norm_block(dx, dy, &mut rng);
    let aff_inv = inverse(&a_ff)?;
    let a_ss = delta_target.add(&a_sf.matmul(&aff_inv).matmul(&a_fs));

    let gamma = Matrix::identity(dx + dy);
    let mean = vec![0.0; dx + dy];
    let mut sys = make_system(a_ff, a_fs, a_sf, a_ss, gamma, mean)?;
    sys.seed = Some(seed);
    Ok(sys)
}

fn stable_block(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let eigs: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..=hi)).collect();
    let q = random_orthogonal(n, rng);
    let sym = q.matmul(&Matrix::diag(&eigs)).matmul(&q.transpose()).symmetrized();
    let lam_min = eigs.iter().copied().fold(f64::INFINITY, f64::min);
    if n == 1 {
        return sym;
    }
    let mut raw = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            raw.set(i, j, rng.gen_range(-1.0..1.0));
        }
    }
    let mut skew = raw.sub(&raw.transpose()).scale(0.5);
    let norm = matlib::spectral_norm(&skew);
    if norm > 0.0 {
        skew = skew.scale(0.5 * lam_min / norm);
    }
    sym.add(&skew)
}

fn unit_norm_block(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    loop {
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, rng.gen_range(-1.0..1.0));
            }
        }
        let norm = matlib::spectral_norm(&m);
        if norm > 1e-8 {
            return m.scale(1.0 / norm);
        }
    }
}

/// Orthogonal matrix from modified Gram-Schmidt on a Gaussian draw.
fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let mut ok = true;
        for j in 0..n {
            for i in 0..j {
                let proj: f64 = cols[j].iter().zip(&cols[i]).map(|(a, b)| a * b).sum();
                let (head, tail) = cols.split_at_mut(j);
                matlib::axpy(-proj, &head[i], &mut tail[0]);
            }
            let norm = matlib::vec_norm(&cols[j]);
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for v in cols[j].iter_mut() {
                *v /= norm;
            }
        }
        if !ok {
            continue;
        }
        let mut q = Matrix::zeros(n, n);
        for (j, col) in cols.iter().enumerate() {
            for i in 0..n {
                q.set(i, j, col[i]);
            }
        }
        return q;
    }
}

/// Rescale the noise so the slow Polyak-Ruppert covariance becomes the
/// identity: Gamma_fs = 0, Gamma_ff = s I, and
/// Gamma_ss = Delta Delta^T - A_sf A_ff^{-1} Gamma_ff A_ff^{-T} A_sf^T,
/// halving s until Gamma_ss is positive definite.
pub fn calibrate_noise_identity_pr(
    sys: &TwoTimeScaleSystem,
    fast_noise_scale: f64,
) -> Result<TwoTimeScaleSystem, SystemError> {
    if fast_noise_scale <= 0.0 {
        return Err(SystemError::DimensionMismatch("fast_noise_scale must be > 0".into()));
    }
    let delta_sq = sys.delta.matmul(&sys.delta.transpose());
    let cross = &sys.asf_aff_inv; // A_sf A_ff^{-1}
    let cross_gram = cross.matmul(&cross.transpose());
    let mut scale = fast_noise_scale;
    for _ in 0..=60 {
        let gamma_ss = delta_sq.sub(&cross_gram.scale(scale)).symmetrized();
        if matlib::cholesky(&gamma_ss).is_some() {
            let gamma_ff = Matrix::identity(sys.dx).scale(scale);
            let zeros_fs = Matrix::zeros(sys.dx, sys.dy);
            let gamma =
                Matrix::from_blocks(&gamma_ff, &zeros_fs, &zeros_fs.transpose(), &gamma_ss);
            return make_system(
                sys.a_ff.clone(),
                sys.a_fs.clone(),
                sys.a_sf.clone(),
                sys.a_ss.clone(),
                gamma,
                sys.noise_mean.clone(),
            )
            .map(|mut s| {
                s.seed = sys.seed;
                s
            });
        }
        scale *= 0.5;
    }
    Err(SystemError::CalibrationFailed(60))
}

/// Gaussian noise source: mean + Gamma^{1/2} z with standard normal z.
pub struct GaussianNoise<'a> {
    sys: &'a TwoTimeScaleSystem,
    rng: ChaCha8Rng,
    z: Vec<f64>,
    buf: Vec<f64>,
}

impl<'a> GaussianNoise<'a> {
    pub fn new(sys: &'a TwoTimeScaleSystem, rng: ChaCha8Rng) -> Self {
        let d = sys.dim();
        GaussianNoise { sys, rng, z: vec![0.0; d], buf: vec![0.0; d] }
    }
}

impl NoiseSource for GaussianNoise<'_> {
    fn sample_into(&mut self, _t: u64, _x: &[f64], _y: &[f64], w: &mut [f64], v: &mut [f64]) {
        for z in self.z.iter_mut() {
            *z = self.rng.sample(StandardNormal);
        }
        self.sys.sqrt_gamma.matvec_into(&self.z, &mut self.buf);
        let dx = self.sys.dx;
        for i in 0..dx {
            w[i] = self.sys.noise_mean[i] + self.buf[i];
        }
        for j in 0..self.sys.dy {
            v[j] = self.sys.noise_mean[dx + j] + self.buf[dx + j];
        }
    }
}

/// One Gaussian draw (mean + Gamma^{1/2} z).
pub fn sample_noise(sys: &TwoTimeScaleSystem, rng: &mut ChaCha8Rng) -> NoiseSample {
    let d = sys.dim();
    let z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let s = sys.sqrt_gamma.matvec(&z);
    let w = (0..sys.dx).map(|i| sys.noise_mean[i] + s[i]).collect();
    let v = (0..sys.dy).map(|j| sys.noise_mean[sys.dx + j] + s[sys.dx + j]).collect();
    NoiseSample { w, v }
}

// ---------------------------------------------------------------------------
// Text serialization: flat key = value lines, floats at 17 significant
// digits so the round trip is exact and re-serialization is byte-identical.
// ---------------------------------------------------------------------------

pub fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

fn write_floats(out: &mut String, key: &str, vals: &[f64]) {
    out.push_str(key);
    out.push_str(" =");
    for v in vals {
        out.push(' ');
        out.push_str(&fmt_f64(*v));
    }
    out.push('\n');
}

pub fn system_to_string(sys: &TwoTimeScaleSystem) -> String {
    let mut out = String::new();
    out.push_str("# two-time-scale system v1\n");
    out.push_str(&format!("dx = {}\n", sys.dx));
    out.push_str(&format!("dy = {}\n", sys.dy));
    write_floats(&mut out, "a_ff", sys.a_ff.data());
    write_floats(&mut out, "a_fs", sys.a_fs.data());
    write_floats(&mut out, "a_sf", sys.a_sf.data());
    write_floats(&mut out, "a_ss", sys.a_ss.data());
    write_floats(&mut out, "gamma", sys.gamma_cov.data());
    write_floats(&mut out, "noise_mean", &sys.noise_mean);
    match sys.seed {
        Some(s) => out.push_str(&format!("seed = {s}\n")),
        None => out.push_str("seed = none\n"),
    }
    out
}

pub fn system_from_string(text: &str) -> Result<TwoTimeScaleSystem, SystemError> {
    let mut map = std::collections::HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| SystemError::Parse(format!("expected key = value, got: {line}")))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |k: &str| {
        map.get(k).cloned().ok_or_else(|| SystemError::Parse(format!("missing key {k}")))
    };
    let dx: usize =
        get("dx")?.parse().map_err(|e| SystemError::Parse(format!("dx: {e}")))?;
    let dy: usize =
        get("dy")?.parse().map_err(|e| SystemError::Parse(format!("dy: {e}")))?;
    let floats = |k: &str, expect: usize| -> Result<Vec<f64>, SystemError> {
        let raw = get(k)?;
        let vals: Result<Vec<f64>, _> = raw.split_whitespace().map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| SystemError::Parse(format!("{k}: {e}")))?;
        if vals.len() != expect {
            return Err(SystemError::Parse(format!(
                "{k}: expected {expect} floats, got {}",
                vals.len()
            )));
        }
        Ok(vals)
    };
    let a_ff = Matrix::from_rows(dx, dx, &floats("a_ff", dx * dx)?);
    let a_fs = Matrix::from_rows(dx, dy, &floats("a_fs", dx * dy)?);
    let a_sf = Matrix::from_rows(dy, dx, &floats("a_sf", dy * dx)?);
    let a_ss = Matrix::from_rows(dy, dy, &floats("a_ss", dy * dy)?);
    let d = dx + dy;
    let gamma = Matrix::from_rows(d, d, &floats("gamma", d * d)?);
    let mean = floats("noise_mean", d)?;
    let seed = match map.get("seed").map(String::as_str) {
        Some("none") | None => None,
        Some(s) => {
            Some(s.parse::<u64>().map_err(|e| SystemError::Parse(format!("seed: {e}")))?)
        }
    };
    let (mut sys, _warnings) = assemble(a_ff, a_fs, a_sf, a_ss, gamma, mean, seed)?;
    sys.seed = seed;
    Ok(sys)
}

pub fn write_system(sys: &TwoTimeScaleSystem, path: &std::path::Path) -> Result<(), SystemError> {
    std::fs::write(path, system_to_string(sys))?;
    Ok(())
}

pub fn read_system(path: &std::path::Path) -> Result<TwoTimeScaleSystem, SystemError> {
    let text = std::fs::read_to_string(path)?;
    system_from_string(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matlib::vec_norm;

    fn identity_system() -> TwoTimeScaleSystem {
        make_system(
            Matrix::identity(2),
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 2),
            Matrix::identity(2),
            Matrix::identity(4),
            vec![0.0; 4],
        )
        .unwrap()
    }

    #[test]
    fn identity_system_solution() {
        let sys = identity_system();
        assert!(vec_norm(&sys.x_star) < 1e-14);
        assert!(vec_norm(&sys.y_star) < 1e-14);
    }

    #[test]
    fn identity_system_shifted_mean() {
        let sys = make_system(
            Matrix::identity(2),
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 2),
            Matrix::identity(2),
            Matrix::identity(4),
            vec![1.0, 1.0, 2.0, 2.0],
        )
        .unwrap();
        assert!((sys.x_star[0] - 1.0).abs() < 1e-14);
        assert!((sys.y_star[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn random_system_solution_residual() {
        let sys = random_system(5, 5, 42, (0.5, 2.0)).unwrap();
        assert!(sys.solution_residual() <= 1e-10);
        assert!(spectral_abscissa(&sys.a_ff).unwrap() >= 0.5 - 1e-9);
        assert!(spectral_abscissa(&sys.delta).unwrap() >= 0.5 - 1e-9);
    }

    #[test]
    fn random_system_deterministic_in_seed() {
        let s1 = random_system(5, 5, 7, (0.5, 2.0)).unwrap();
        let s2 = random_system(5, 5, 7, (0.5, 2.0)).unwrap();
        assert_eq!(s1.a_ff.data(), s2.a_ff.data());
        assert_eq!(s1.a_ss.data(), s2.a_ss.data());
        let s3 = random_system(5, 5, 8, (0.5, 2.0)).unwrap();
        assert_ne!(s1.a_ff.data(), s3.a_ff.data());
    }

    #[test]
    fn scalar_random_system_is_pinned_by_range() {
        let sys = random_system(1, 1, 3, (1.0, 1.0)).unwrap();
        assert!((sys.a_ff.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((sys.delta.get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn solution_linearity_under_mean_shift() {
        let sys = random_system(3, 2, 11, (0.5, 2.0)).unwrap();
        let a = sys.a_full();
        let u: Vec<f64> = (0..5).map(|i| 0.3 * (i as f64) - 0.7).collect();
        let shift = a.matvec(&u);
        let mean2: Vec<f64> =
            sys.noise_mean.iter().zip(&shift).map(|(m, s)| m + s).collect();
        let sys2 = make_system(
            sys.a_ff.clone(),
            sys.a_fs.clone(),
            sys.a_sf.clone(),
            sys.a_ss.clone(),
            sys.gamma_cov.clone(),
            mean2,
        )
        .unwrap();
        for i in 0..3 {
            assert!((sys2.x_star[i] - sys.x_star[i] - u[i]).abs() < 1e-10);
        }
        for j in 0..2 {
            assert!((sys2.y_star[j] - sys.y_star[j] - u[3 + j]).abs() < 1e-10);
        }
    }

    #[test]
    fn calibration_zero_cross_block() {
        // With A_sf = 0 the calibrated Gamma_ss is exactly Delta Delta^T.
        let a_ff = Matrix::diag(&[1.0, 2.0]);
        let a_ss = Matrix::from_rows(2, 2, &[1.5, 0.3, -0.2, 1.1]);
        let sys = make_system(
            a_ff,
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 2),
            a_ss.clone(),
            Matrix::identity(4),
            vec![0.0; 4],
        )
        .unwrap();
        let cal = calibrate_noise_identity_pr(&sys, 1.0).unwrap();
        let expect = a_ss.matmul(&a_ss.transpose());
        assert!(cal.gamma_ss().sub(&expect).frobenius_norm() < 1e-12);
        assert!(cal.gamma_fs().frobenius_norm() == 0.0);
    }

    #[test]
    fn calibration_scalar_formula() {
        // A_ff = 1, A_sf = 1, Delta = 1 (so A_ss = 1 + A_sf A_ff^{-1} A_fs).
        let a_ff = Matrix::from_rows(1, 1, &[1.0]);
        let a_fs = Matrix::from_rows(1, 1, &[1.0]);
        let a_sf = Matrix::from_rows(1, 1, &[1.0]);
        let a_ss = Matrix::from_rows(1, 1, &[2.0]); // Delta = 2 - 1 = 1
        let sys =
            make_system(a_ff, a_fs, a_sf, a_ss, Matrix::identity(2), vec![0.0, 0.0]).unwrap();
        let cal = calibrate_noise_identity_pr(&sys, 0.5).unwrap();
        assert!((cal.gamma_ss().get(0, 0) - 0.5).abs() < 1e-14);
        // Calibration identity: Delta Sbar_ss Delta^T = Gamma_ss + cross term
        // with Sbar_ss = I, i.e. Delta Delta^T.
        let lhs = cal.delta.matmul(&cal.delta.transpose());
        let cross = cal.asf_aff_inv.matmul(&cal.gamma_ff()).matmul(&cal.asf_aff_inv.transpose());
        let rhs = cal.gamma_ss().add(&cross);
        assert!(lhs.sub(&rhs).frobenius_norm() < 1e-9);
    }

    #[test]
    fn gaussian_sampling_moments() {
        let sys = identity_system();
        let mut rng = derive_rng(123, &[tag::TRIAL]);
        let n = 200_000;
        let mut mean = vec![0.0; 4];
        let mut second = vec![0.0; 16];
        for _ in 0..n {
            let s = sample_noise(&sys, &mut rng);
            let z: Vec<f64> = s.w.iter().chain(s.v.iter()).copied().collect();
            for i in 0..4 {
                mean[i] += z[i];
                for j in 0..4 {
                    second[i * 4 + j] += z[i] * z[j];
                }
            }
        }
        for i in 0..4 {
            assert!((mean[i] / n as f64).abs() < 0.01);
            for j in 0..4 {
                let cov = second[i * 4 + j] / n as f64;
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((cov - expect).abs() < 0.02, "cov[{i}][{j}] = {cov}");
            }
        }
    }

    #[test]
    fn sampling_deterministic_per_stream() {
        let sys = identity_system();
        let mut r1 = derive_rng(5, &[tag::TRIAL, 9]);
        let mut r2 = derive_rng(5, &[tag::TRIAL, 9]);
        for _ in 0..10 {
            assert_eq!(sample_noise(&sys, &mut r1), sample_noise(&sys, &mut r2));
        }
    }

    #[test]
    fn serialization_round_trip_byte_identical() {
        let sys = random_system(3, 2, 99, (0.5, 2.0)).unwrap();
        let text = system_to_string(&sys);
        let back = system_from_string(&text).unwrap();
        assert_eq!(system_to_string(&back), text);
        assert_eq!(back.a_ff.data(), sys.a_ff.data());
        assert_eq!(back.noise_mean, sys.noise_mean);
    }

    #[test]
    fn make_system_rejects_unstable_fast_block() {
        let res = make_system(
            Matrix::from_rows(1, 1, &[-1.0]),
            Matrix::zeros(1, 1),
            Matrix::zeros(1, 1),
            Matrix::identity(1),
            Matrix::identity(2),
            vec![0.0, 0.0],
        );
        assert!(matches!(res, Err(SystemError::UnstableFastBlock(_))));
    }

    #[test]
    fn make_system_rejects_indefinite_gamma() {
        let res = make_system(
            Matrix::identity(1),
            Matrix::zeros(1, 1),
            Matrix::zeros(1, 1),
            Matrix::identity(1),
            Matrix::diag(&[1.0, -0.5]),
            vec![0.0, 0.0],
        );
        assert!(matches!(res, Err(SystemError::NoiseCovarianceNotPD)));
    }
}
