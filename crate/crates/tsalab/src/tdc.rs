//! Off-policy policy evaluation with gradient correction, mapped onto the
//! two-time-scale recursion.
//!
//! With features phi(s), discount rho in (0,1) (named `discount` to avoid
//! colliding with the step size gamma_t), behavior policy pi_b and target
//! policy pi_t, the per-sample quantities under (s, a, s') drawn from the
//! behavior chain's stationary distribution are
//!     F_hat = phi phi^T,           M_hat = w phi (phi - rho phi')^T,
//!     S_hat = rho w phi' phi^T,    b_hat = w r phi,
//! where w = pi_t(a|s)/pi_b(a|s) is the importance ratio. Taking exact
//! expectations gives the system blocks
//!     A_ff = E F_hat,  A_fs = E M_hat,  A_sf = E S_hat,  A_ss = E M_hat,
//! with noise mean (E b_hat, E b_hat). The fast variable is the gradient
//! correction weight (zero at the solution); the slow variable solves the
//! projected fixed-point equation E M_hat y = E b_hat.

use crate::matlib::{self, Matrix};
use crate::rng::{derive_rng, tag};
use crate::system::{assemble, NoiseSource, SystemError, SystemWarnings, TwoTimeScaleSystem};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TdcError {
    #[error("invalid MDP parameter: {0}")]
    InvalidParameter(String),
    #[error("feature matrix is rank deficient after {0} resampling attempts")]
    RankDeficientFeatures(usize),
    #[error("behavior chain has no stationary distribution (power iteration stalled)")]
    NoStationaryDistribution,
    #[error("policy must have full support over actions")]
    DegeneratePolicy,
    #[error("system assembly error: {0}")]
    System(#[from] SystemError),
}

#[derive(Debug, Clone)]
pub struct Mdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// transition[s][a][s'] flattened row-major.
    pub transition: Vec<f64>,
    /// reward[s][a] flattened.
    pub reward: Vec<f64>,
    pub discount: f64,
}

impl Mdp {
    #[inline]
    pub fn p(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s2]
    }

    #[inline]
    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }
}

#[derive(Debug, Clone)]
pub struct FeatureMap {
    /// n_states x d, rows unit norm.
    pub phi: Matrix,
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        self.phi.cols()
    }

    pub fn row(&self, s: usize) -> &[f64] {
        let d = self.phi.cols();
        &self.phi.data()[s * d..(s + 1) * d]
    }
}

/// Row-stochastic policy matrix (n_states x n_actions).
#[derive(Debug, Clone)]
pub struct Policy(pub Matrix);

impl Policy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Policy(Matrix::from_rows(
            n_states,
            n_actions,
            &vec![p; n_states * n_actions],
        ))
    }

    /// Rows drawn uniformly from the simplex (normalized exponentials).
    pub fn random(n_states: usize, n_actions: usize, seed: u64) -> Self {
        let mut rng = derive_rng(seed, &[tag::POLICY_GEN]);
        let mut m = Matrix::zeros(n_states, n_actions);
        for s in 0..n_states {
            let mut row: Vec<f64> =
                (0..n_actions).map(|_| -(rng.gen_range(1e-12..1.0f64)).ln()).collect();
            let sum: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= sum;
            }
            for (a, v) in row.iter().enumerate() {
                m.set(s, a, *v);
            }
        }
        Policy(m)
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.0.get(s, a)
    }

    pub fn full_support(&self) -> bool {
        self.0.data().iter().all(|&p| p > 1e-12)
    }
}

/// Randomly generated MDP and feature map: transitions are row-normalized
/// exponentials of uniforms, rewards uniform in [0, 1], features Gaussian
/// rows normalized to unit length with a rank check (resampled up to 10
/// times).
pub fn random_mdp(
    n_states: usize,
    n_actions: usize,
    d: usize,
    discount: f64,
    seed: u64,
) -> Result<(Mdp, FeatureMap), TdcError> {
    if n_states < d || d < 1 {
        return Err(TdcError::InvalidParameter("need n_states >= d >= 1".into()));
    }
    if !(0.0 < discount && discount < 1.0) {
        return Err(TdcError::InvalidParameter("discount must lie in (0, 1)".into()));
    }
    let mut rng = derive_rng(seed, &[tag::MDP_GEN]);
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    for s in 0..n_states {
        for a in 0..n_actions {
            let base = (s * n_actions + a) * n_states;
            let mut sum = 0.0;
            for s2 in 0..n_states {
                let v = rng.gen_range(0.0..1.0f64).exp();
                transition[base + s2] = v;
                sum += v;
            }
            for s2 in 0..n_states {
                transition[base + s2] /= sum;
            }
        }
    }
    let reward: Vec<f64> =
        (0..n_states * n_actions).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mdp = Mdp { n_states, n_actions, transition, reward, discount };

    for _attempt in 0..10 {
        let mut phi = Matrix::zeros(n_states, d);
        for s in 0..n_states {
            let mut row: Vec<f64> =
                (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = matlib::vec_norm(&row);
            if norm < 1e-12 {
                continue;
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            for (j, v) in row.iter().enumerate() {
                phi.set(s, j, *v);
            }
        }
        let gram = phi.transpose().matmul(&phi);
        let (eigs, _) = matlib::sym_eigen(&gram).expect("Gram eigen");
        let smin = eigs.first().copied().unwrap_or(0.0).max(0.0).sqrt();
        if smin > 1e-8 {
            return Ok((mdp, FeatureMap { phi }));
        }
    }
    Err(TdcError::RankDeficientFeatures(10))
}

/// Stationary distribution of the behavior chain by power iteration to
/// 1e-12 with a 1e5 sweep cap.
pub fn stationary_distribution(mdp: &Mdp, behavior: &Policy) -> Result<Vec<f64>, TdcError> {
    let n = mdp.n_states;
    // State chain kernel K(s, s') = sum_a pi_b(a|s) P(s'|s,a).
    let mut kernel = vec![0.0; n * n];
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let pa = behavior.prob(s, a);
            for s2 in 0..n {
                kernel[s * n + s2] += pa * mdp.p(s, a, s2);
            }
        }
    }
    let mut mu = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for _ in 0..100_000 {
        for v in next.iter_mut() {
            *v = 0.0;
        }
        for s in 0..n {
            let ms = mu[s];
            for s2 in 0..n {
                next[s2] += ms * kernel[s * n + s2];
            }
        }
        let sum: f64 = next.iter().sum();
        for v in next.iter_mut() {
            *v /= sum;
        }
        let diff: f64 =
            mu.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut mu, &mut next);
        if diff < 1e-12 {
            return Ok(mu);
        }
    }
    Err(TdcError::NoStationaryDistribution)
}

/// Everything needed to sample the policy-evaluation noise.
pub struct TdcInstance {
    pub sys: TwoTimeScaleSystem,
    pub warnings: SystemWarnings,
    pub stationary: Vec<f64>,
    /// Cumulative probability per (s, a, s') triple.
    cum_probs: Vec<f64>,
    triples: Vec<(usize, usize, usize)>,
    /// Per-triple additive noise (W, V) evaluated at the solution.
    noise_table: Vec<(Vec<f64>, Vec<f64>)>,
    /// Per-triple data for the multiplicative mode.
    ratios: Vec<f64>,
    rewards: Vec<f64>,
    features: FeatureMap,
    next_features: Vec<usize>,
    states: Vec<usize>,
    discount: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TdcNoiseMode {
    /// Noise frozen at the solution: exactly constant conditional
    /// covariance, the regime the distributional theory assumes.
    LinearizedAdditive,
    /// Noise evaluated at the current iterate (the algorithm as actually
    /// run); outside the additive-noise theory.
    RealisticMultiplicative,
}

/// Assemble the exact-expectation system for gradient-corrected policy
/// evaluation under off-policy sampling. Stability is verified and
/// reported through warnings rather than failing the build.
pub fn build_tdc_system(
    mdp: &Mdp,
    features: &FeatureMap,
    behavior: &Policy,
    target: &Policy,
) -> Result<TdcInstance, TdcError> {
    if !behavior.full_support() {
        return Err(TdcError::DegeneratePolicy);
    }
    let d = features.dim();
    let mu = stationary_distribution(mdp, behavior)?;
    let rho = mdp.discount;

    let mut f = Matrix::zeros(d, d); // E[phi phi^T]
    let mut m = Matrix::zeros(d, d); // E[w phi (phi - rho phi')^T]
    let mut s_mat = Matrix::zeros(d, d); // rho E[w phi' phi^T]
    let mut b = vec![0.0; d]; // E[w r phi]

    let mut triples = Vec::new();
    let mut probs = Vec::new();
    let mut ratios = Vec::new();
    let mut rewards = Vec::new();
    let mut next_features = Vec::new();
    let mut states = Vec::new();

    for s in 0..mdp.n_states {
        let phi_s = features.row(s);
        let ws = mu[s];
        for i in 0..d {
            for j in 0..d {
                f.set(i, j, f.get(i, j) + ws * phi_s[i] * phi_s[j]);
            }
        }
        for a in 0..mdp.n_actions {
            let pb = behavior.prob(s, a);
            if pb <= 0.0 {
                continue;
            }
            let w = target.prob(s, a) / pb;
            let r = mdp.r(s, a);
            for s2 in 0..mdp.n_states {
                let p = ws * pb * mdp.p(s, a, s2);
                if p <= 0.0 {
                    continue;
                }
                let phi_n = features.row(s2);
                for i in 0..d {
                    let wpi = p * w * phi_s[i];
                    b[i] += wpi * r;
                    for j in 0..d {
                        let td = phi_s[j] - rho * phi_n[j];
                        m.set(i, j, m.get(i, j) + wpi * td);
                        s_mat.set(i, j, s_mat.get(i, j) + p * w * rho * phi_n[i] * phi_s[j]);
                    }
                }
                triples.push((s, a, s2));
                probs.push(p);
                ratios.push(w);
                rewards.push(r);
                next_features.push(s2);
                states.push(s);
            }
        }
    }

    // Exact per-sample noise at the solution and its covariance.
    // Solve the system first with a provisional Gamma, then fill Gamma in.
    let mean: Vec<f64> = b.iter().chain(b.iter()).copied().collect();
    let provisional = Matrix::identity(2 * d);
    let (sys0, _w0) = assemble(
        f.clone(),
        m.clone(),
        s_mat.clone(),
        m.clone(),
        provisional,
        mean.clone(),
        None,
    )?;
    let x_star = &sys0.x_star;
    let y_star = &sys0.y_star;

    let mut noise_table = Vec::with_capacity(triples.len());
    let mut gamma = Matrix::zeros(2 * d, 2 * d);
    let mut mean_check = vec![0.0; 2 * d];
    for (idx, &(s, _a, s2)) in triples.iter().enumerate() {
        let (w_vec, v_vec) = per_sample_update(
            features.row(s),
            features.row(s2),
            ratios[idx],
            rewards[idx],
            rho,
            &f,
            &m,
            &s_mat,
            x_star,
            y_star,
        );
        let stacked: Vec<f64> = w_vec.iter().chain(v_vec.iter()).copied().collect();
        for i in 0..2 * d {
            mean_check[i] += probs[idx] * stacked[i];
        }
        noise_table.push((w_vec, v_vec));
    }
    for (idx, (w_vec, v_vec)) in noise_table.iter().enumerate() {
        let stacked: Vec<f64> = w_vec.iter().chain(v_vec.iter()).copied().collect();
        let p = probs[idx];
        for i in 0..2 * d {
            let di = stacked[i] - mean_check[i];
            for j in 0..2 * d {
                gamma.set(i, j, gamma.get(i, j) + p * di * (stacked[j] - mean_check[j]));
            }
        }
    }

    let (sys, warnings) =
        assemble(f, m.clone(), s_mat, m, gamma.symmetrized(), mean, None)?;

    // Cumulative distribution over triples for categorical sampling.
    let mut cum_probs = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in &probs {
        acc += p;
        cum_probs.push(acc);
    }
    if let Some(last) = cum_probs.last_mut() {
        *last = 1.0;
    }

    Ok(TdcInstance {
        sys,
        warnings,
        stationary: mu,
        cum_probs,
        triples,
        noise_table,
        ratios,
        rewards,
        features: features.clone(),
        next_features,
        states,
        discount: rho,
    })
}

/// Sampled update pair (W, V) for one (s, a, s') triple evaluated at a
/// given point: the TSA-form noise making the sampled recursion exact,
/// W = (A_ff - F_hat) x + (A_fs - M_hat) y + b_hat and the slow analogue.
#[allow(clippy::too_many_arguments)]
fn per_sample_update(
    phi: &[f64],
    phi_next: &[f64],
    ratio: f64,
    reward: f64,
    rho: f64,
    a_ff: &Matrix,
    a_fs: &Matrix,
    a_sf: &Matrix,
    x: &[f64],
    y: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let d = phi.len();
    // Sampled rank-one actions.
    let phi_dot_x: f64 = phi.iter().zip(x).map(|(p, xi)| p * xi).sum();
    let td_dot_y: f64 = phi
        .iter()
        .zip(phi_next)
        .zip(y)
        .map(|((p, pn), yi)| (p - rho * pn) * yi)
        .sum();
    let mut w = a_ff.matvec(x);
    matlib::axpy(1.0, &a_fs.matvec(y), &mut w);
    let mut v = a_sf.matvec(x);
    matlib::axpy(1.0, &a_fs.matvec(y), &mut v); // A_ss = A_fs
    for i in 0..d {
        // Subtract sampled F_hat x + M_hat y, add b_hat (fast row).
        w[i] -= phi[i] * phi_dot_x + ratio * phi[i] * td_dot_y;
        w[i] += ratio * reward * phi[i];
        // Subtract sampled S_hat x + M_hat y, add b_hat (slow row).
        v[i] -= rho * ratio * phi_next[i] * phi_dot_x + ratio * phi[i] * td_dot_y;
        v[i] += ratio * reward * phi[i];
    }
    (w, v)
}

impl TdcInstance {
    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    /// Projected fixed-point solution from the d x d system E M y = E b,
    /// an independent route to the assembled system's slow solution.
    pub fn lstd_solution(&self) -> Result<Vec<f64>, TdcError> {
        matlib::solve_linear(&self.sys.a_fs, self.sys.mean_w())
            .map_err(|e| TdcError::System(SystemError::Mat(e)))
    }

    pub fn sampler(&self, mode: TdcNoiseMode, rng: ChaCha8Rng) -> TdcNoise<'_> {
        TdcNoise { inst: self, mode, rng }
    }

    fn draw_triple(&self, u: f64) -> usize {
        match self.cum_probs.binary_search_by(|c| c.total_cmp(&u)) {
            Ok(i) => i,
            Err(i) => i.min(self.cum_probs.len() - 1),
        }
    }
}

pub struct TdcNoise<'a> {
    inst: &'a TdcInstance,
    mode: TdcNoiseMode,
    rng: ChaCha8Rng,
}

impl NoiseSource for TdcNoise<'_> {
    fn sample_into(&mut self, _t: u64, x: &[f64], y: &[f64], w: &mut [f64], v: &mut [f64]) {
        let u: f64 = self.rng.gen_range(0.0..1.0);
        let idx = self.inst.draw_triple(u);
        match self.mode {
            TdcNoiseMode::LinearizedAdditive => {
                let (tw, tv) = &self.inst.noise_table[idx];
                w.copy_from_slice(tw);
                v.copy_from_slice(tv);
            }
            TdcNoiseMode::RealisticMultiplicative => {
                let s = self.inst.states[idx];
                let s2 = self.inst.next_features[idx];
                let (nw, nv) = per_sample_update(
                    self.inst.features.row(s),
                    self.inst.features.row(s2),
                    self.inst.ratios[idx],
                    self.inst.rewards[idx],
                    self.inst.discount,
                    &self.inst.sys.a_ff,
                    &self.inst.sys.a_fs,
                    &self.inst.sys.a_sf,
                    x,
                    y,
                );
                w.copy_from_slice(&nw);
                v.copy_from_slice(&nv);
            }
        }
    }
}

impl TdcInstance {
    pub fn discount(&self) -> f64 {
        self.discount
    }
}

// ---------------------------------------------------------------------------
// Text serialization, same flat key = value format as system files.
// ---------------------------------------------------------------------------

fn write_floats(out: &mut String, key: &str, vals: &[f64]) {
    out.push_str(key);
    out.push_str(" =");
    for v in vals {
        out.push(' ');
        out.push_str(&crate::system::fmt_f64(*v));
    }
    out.push('\n');
}

pub fn mdp_to_string(
    mdp: &Mdp,
    features: &FeatureMap,
    behavior: &Policy,
    target: &Policy,
) -> String {
    let mut out = String::new();
    out.push_str("# policy evaluation instance v1\n");
    out.push_str(&format!("n_states = {}\n", mdp.n_states));
    out.push_str(&format!("n_actions = {}\n", mdp.n_actions));
    out.push_str(&format!("d = {}\n", features.dim()));
    write_floats(&mut out, "discount", &[mdp.discount]);
    write_floats(&mut out, "transition", &mdp.transition);
    write_floats(&mut out, "reward", &mdp.reward);
    write_floats(&mut out, "features", features.phi.data());
    write_floats(&mut out, "behavior", behavior.0.data());
    write_floats(&mut out, "target", target.0.data());
    out
}

pub fn mdp_from_string(text: &str) -> Result<(Mdp, FeatureMap, Policy, Policy), TdcError> {
    let mut map = std::collections::HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| TdcError::InvalidParameter(format!("expected key = value: {line}")))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    let int = |k: &str| -> Result<usize, TdcError> {
        map.get(k)
            .ok_or_else(|| TdcError::InvalidParameter(format!("missing key {k}")))?
            .parse()
            .map_err(|e| TdcError::InvalidParameter(format!("{k}: {e}")))
    };
    let floats = |k: &str, expect: usize| -> Result<Vec<f64>, TdcError> {
        let raw = map
            .get(k)
            .ok_or_else(|| TdcError::InvalidParameter(format!("missing key {k}")))?;
        let vals: Result<Vec<f64>, _> = raw.split_whitespace().map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| TdcError::InvalidParameter(format!("{k}: {e}")))?;
        if vals.len() != expect {
            return Err(TdcError::InvalidParameter(format!(
                "{k}: expected {expect} floats, got {}",
                vals.len()
            )));
        }
        Ok(vals)
    };
    let n_states = int("n_states")?;
    let n_actions = int("n_actions")?;
    let d = int("d")?;
    let discount = floats("discount", 1)?[0];
    let transition = floats("transition", n_states * n_actions * n_states)?;
    let reward = floats("reward", n_states * n_actions)?;
    let phi = Matrix::from_rows(n_states, d, &floats("features", n_states * d)?);
    let behavior =
        Policy(Matrix::from_rows(n_states, n_actions, &floats("behavior", n_states * n_actions)?));
    let target =
        Policy(Matrix::from_rows(n_states, n_actions, &floats("target", n_states * n_actions)?));
    Ok((Mdp { n_states, n_actions, transition, reward, discount }, FeatureMap { phi }, behavior, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mdp_serialization_round_trip() {
        let (mdp, phi) = random_mdp(5, 2, 3, 0.87, 19).unwrap();
        let behavior = Policy::uniform(5, 2);
        let target = Policy::random(5, 2, 20);
        let text = mdp_to_string(&mdp, &phi, &behavior, &target);
        let (m2, p2, b2, t2) = mdp_from_string(&text).unwrap();
        assert_eq!(mdp_to_string(&m2, &p2, &b2, &t2), text);
        assert_eq!(m2.transition, mdp.transition);
        assert_eq!(p2.phi.data(), phi.phi.data());
    }

    #[test]
    fn transition_rows_sum_to_one() {
        let (mdp, _phi) = random_mdp(8, 3, 4, 0.9, 5).unwrap();
        for s in 0..8 {
            for a in 0..3 {
                let sum: f64 = (0..8).map(|s2| mdp.p(s, a, s2)).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mdp_deterministic_in_seed() {
        let (m1, p1) = random_mdp(6, 2, 3, 0.9, 9).unwrap();
        let (m2, p2) = random_mdp(6, 2, 3, 0.9, 9).unwrap();
        assert_eq!(m1.transition, m2.transition);
        assert_eq!(p1.phi.data(), p2.phi.data());
    }

    #[test]
    fn single_state_scalar_system() {
        // One state, one action, phi = [1], discount 0.9: blocks are
        // F = 1, M = 1 - 0.9 = 0.1, S = 0.9, A_ss = 0.1; the solution is
        // x* = 0, y* = r/(1 - 0.9).
        let mdp = Mdp {
            n_states: 1,
            n_actions: 1,
            transition: vec![1.0],
            reward: vec![0.7],
            discount: 0.9,
        };
        let phi = FeatureMap { phi: Matrix::from_rows(1, 1, &[1.0]) };
        let pol = Policy::uniform(1, 1);
        let inst = build_tdc_system(&mdp, &phi, &pol, &pol).unwrap();
        assert!((inst.sys.a_ff.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((inst.sys.a_fs.get(0, 0) - 0.1).abs() < 1e-12);
        assert!((inst.sys.a_sf.get(0, 0) - 0.9).abs() < 1e-12);
        assert!((inst.sys.a_ss.get(0, 0) - 0.1).abs() < 1e-12);
        assert!(inst.sys.x_star[0].abs() < 1e-10);
        assert!((inst.sys.y_star[0] - 7.0).abs() < 1e-9);
        // No randomness left: the sample equals its mean, zero deviation.
        let (w, v) = &inst.noise_table[0];
        assert!((w[0] - inst.sys.noise_mean[0]).abs() < 1e-12);
        assert!((v[0] - inst.sys.noise_mean[1]).abs() < 1e-12);
        assert!(inst.sys.gamma_cov.frobenius_norm() < 1e-12);
    }

    #[test]
    fn on_policy_ratios_are_one() {
        let (mdp, phi) = random_mdp(6, 3, 3, 0.85, 11).unwrap();
        let pol = Policy::uniform(6, 3);
        let inst = build_tdc_system(&mdp, &phi, &pol, &pol).unwrap();
        assert!(inst.ratios.iter().all(|&r| (r - 1.0).abs() < 1e-12));
    }

    #[test]
    fn solution_matches_projected_fixed_point() {
        let (mdp, phi) = random_mdp(12, 3, 5, 0.9, 31).unwrap();
        let behavior = Policy::uniform(12, 3);
        let target = Policy::random(12, 3, 32);
        let inst = build_tdc_system(&mdp, &phi, &behavior, &target).unwrap();
        let lstd = inst.lstd_solution().unwrap();
        for j in 0..5 {
            assert!((inst.sys.y_star[j] - lstd[j]).abs() < 1e-8, "coord {j}");
        }
        assert!(matlib::vec_norm(&inst.sys.x_star) < 1e-8);
        // The two displayed expectations vanish at the solution.
        assert!(inst.sys.solution_residual() < 1e-8);
    }

    #[test]
    fn linearized_noise_is_zero_mean() {
        let (mdp, phi) = random_mdp(8, 2, 4, 0.9, 51).unwrap();
        let behavior = Policy::uniform(8, 2);
        let target = Policy::random(8, 2, 52);
        let inst = build_tdc_system(&mdp, &phi, &behavior, &target).unwrap();
        let mut src =
            inst.sampler(TdcNoiseMode::LinearizedAdditive, derive_rng(3, &[tag::TRIAL]));
        let n = 200_000;
        let d = inst.dim();
        let mut mean = vec![0.0; 2 * d];
        let mut w = vec![0.0; d];
        let mut v = vec![0.0; d];
        let x = vec![0.0; d];
        let y = vec![0.0; d];
        for _ in 0..n {
            src.sample_into(1, &x, &y, &mut w, &mut v);
            for i in 0..d {
                mean[i] += w[i];
                mean[d + i] += v[i];
            }
        }
        for i in 0..d {
            let dev = mean[i] / n as f64 - inst.sys.noise_mean[i];
            assert!(dev.abs() < 0.01, "mean deviation {dev} at {i}");
        }
    }

    #[test]
    fn sampler_deterministic_in_stream() {
        let (mdp, phi) = random_mdp(5, 2, 3, 0.8, 71).unwrap();
        let pol = Policy::uniform(5, 2);
        let inst = build_tdc_system(&mdp, &phi, &pol, &pol).unwrap();
        let d = inst.dim();
        let (mut w1, mut v1) = (vec![0.0; d], vec![0.0; d]);
        let (mut w2, mut v2) = (vec![0.0; d], vec![0.0; d]);
        let mut s1 =
            inst.sampler(TdcNoiseMode::LinearizedAdditive, derive_rng(9, &[tag::TRIAL, 1]));
        let mut s2 =
            inst.sampler(TdcNoiseMode::LinearizedAdditive, derive_rng(9, &[tag::TRIAL, 1]));
        let x = vec![0.0; d];
        let y = vec![0.0; d];
        for _ in 0..32 {
            s1.sample_into(1, &x, &y, &mut w1, &mut v1);
            s2.sample_into(1, &x, &y, &mut w2, &mut v2);
            assert_eq!(w1, w2);
            assert_eq!(v1, v2);
        }
    }

    #[test]
    fn multiplicative_mode_matches_linearized_at_solution() {
        let (mdp, phi) = random_mdp(6, 2, 3, 0.9, 81).unwrap();
        let pol = Policy::uniform(6, 2);
        let inst = build_tdc_system(&mdp, &phi, &pol, &pol).unwrap();
        let d = inst.dim();
        let mut lin =
            inst.sampler(TdcNoiseMode::LinearizedAdditive, derive_rng(4, &[tag::TRIAL, 7]));
        let mut mult = inst
            .sampler(TdcNoiseMode::RealisticMultiplicative, derive_rng(4, &[tag::TRIAL, 7]));
        let (mut w1, mut v1) = (vec![0.0; d], vec![0.0; d]);
        let (mut w2, mut v2) = (vec![0.0; d], vec![0.0; d]);
        for _ in 0..16 {
            lin.sample_into(1, &inst.sys.x_star.clone(), &inst.sys.y_star.clone(), &mut w1, &mut v1);
            mult.sample_into(1, &inst.sys.x_star.clone(), &inst.sys.y_star.clone(), &mut w2, &mut v2);
            for i in 0..d {
                assert!((w1[i] - w2[i]).abs() < 1e-10);
                assert!((v1[i] - v2[i]).abs() < 1e-10);
            }
        }
    }
}
