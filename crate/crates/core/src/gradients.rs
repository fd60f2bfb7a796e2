//! Random-horizon policy-gradient estimators and the gradient tracker.

use crate::error::GradientError;
use crate::linalg::{axpy, dot};
use crate::policies::PolicyModel;
use crate::sampling::Trajectory;

/// Default clip for importance weights.
pub const DEFAULT_W_MAX: f64 = 100.0;

/// On-policy estimate `Σ_t γ^{t/2} r_t Σ_{τ≤t} ∇log π_θ(a_τ|s_τ)`.
///
/// `policy` must be the policy that generated `traj`.
pub fn pg_estimate(
    traj: &Trajectory,
    policy: &PolicyModel,
    gamma: f64,
) -> Result<Vec<f64>, GradientError> {
    check_behavior(traj, policy)?;
    let d = policy.dim();
    let theta = policy.theta();
    let features = policy.features();
    let (family, sigma) = (policy.family(), policy.sigma());
    let half = gamma.sqrt();

    let mut phi = vec![0.0; d];
    let mut running = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut disc = 1.0;
    for t in 0..traj.len() {
        features.features_into(traj.states[t], &mut phi);
        let c = family.score_coeff(traj.raw_actions[t] - dot(&phi, theta), sigma);
        axpy(c, &phi, &mut running);
        axpy(disc * traj.rewards[t], &running, &mut g);
        disc *= half;
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsWeights {
    /// Clipped weights `w_t ∈ [0, w_max]`.
    pub w: Vec<f64>,
    /// Unclipped cumulative log ratios.
    pub log_w: Vec<f64>,
}

impl IsWeights {
    pub fn max_log_weight(&self) -> f64 {
        self.log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Cumulative ratios `w_t = Π_{h≤t} π_old(a_h|s_h) / π_new(a_h|s_h)`,
/// computed in log space. `policy_new` must be the behavior policy of
/// `traj`; `w_max = None` disables clipping.
pub fn is_weights(
    traj: &Trajectory,
    policy_new: &PolicyModel,
    theta_old: &[f64],
    w_max: Option<f64>,
) -> Result<IsWeights, GradientError> {
    check_behavior(traj, policy_new)?;
    check_dim(policy_new, theta_old)?;
    let d = policy_new.dim();
    let features = policy_new.features();
    let theta_new = policy_new.theta();
    let (family, sigma) = (policy_new.family(), policy_new.sigma());

    let mut phi = vec![0.0; d];
    let mut acc = 0.0;
    let mut log_w = Vec::with_capacity(traj.len());
    for t in 0..traj.len() {
        features.features_into(traj.states[t], &mut phi);
        let a = traj.raw_actions[t];
        let lo = family.log_pdf(a - dot(&phi, theta_old), sigma);
        let ln = family.log_pdf(a - dot(&phi, theta_new), sigma);
        acc += lo - ln;
        log_w.push(acc);
    }
    let w = log_w.iter().map(|&l| clip_weight(l.exp(), w_max)).collect();
    Ok(IsWeights { w, log_w })
}

fn clip_weight(w: f64, w_max: Option<f64>) -> f64 {
    match w_max {
        Some(m) => w.min(m),
        None => w,
    }
}

/// Importance-sampled estimate of the gradient at `theta_old` from a
/// trajectory drawn under `policy_new`:
/// `Σ_t γ^{t/2} r_t w_t Σ_{τ≤t} ∇log π_{θ_old}(a_τ|s_τ)`.
pub fn pg_estimate_is(
    traj: &Trajectory,
    policy_new: &PolicyModel,
    theta_old: &[f64],
    gamma: f64,
    w_max: Option<f64>,
) -> Result<Vec<f64>, GradientError> {
    check_behavior(traj, policy_new)?;
    check_dim(policy_new, theta_old)?;
    let d = policy_new.dim();
    let features = policy_new.features();
    let theta_new = policy_new.theta();
    let (family, sigma) = (policy_new.family(), policy_new.sigma());
    let half = gamma.sqrt();

    let mut phi = vec![0.0; d];
    let mut running = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut disc = 1.0;
    let mut log_w = 0.0;
    for t in 0..traj.len() {
        features.features_into(traj.states[t], &mut phi);
        let a = traj.raw_actions[t];
        let r_old = a - dot(&phi, theta_old);
        let r_new = a - dot(&phi, theta_new);
        log_w += family.log_pdf(r_old, sigma) - family.log_pdf(r_new, sigma);
        let w = clip_weight(log_w.exp(), w_max);
        axpy(family.score_coeff(r_old, sigma), &phi, &mut running);
        axpy(disc * traj.rewards[t] * w, &running, &mut g);
        disc *= half;
    }
    Ok(g)
}

fn check_behavior(traj: &Trajectory, policy: &PolicyModel) -> Result<(), GradientError> {
    if traj.behavior_theta.len() != policy.dim() {
        return Err(GradientError::DimensionMismatch {
            expected: policy.dim(),
            got: traj.behavior_theta.len(),
        });
    }
    let same = traj
        .behavior_theta
        .iter()
        .zip(policy.theta())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    if same {
        Ok(())
    } else {
        Err(GradientError::OffPolicy)
    }
}

fn check_dim(policy: &PolicyModel, theta: &[f64]) -> Result<(), GradientError> {
    if theta.len() == policy.dim() {
        Ok(())
    } else {
        Err(GradientError::DimensionMismatch {
            expected: policy.dim(),
            got: theta.len(),
        })
    }
}

/// Tracked gradient `ĝ_k = (1−β)(ĝ_{k−1} − g̃_old) + g_new`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientState {
    pub g_hat: Vec<f64>,
    pub beta: f64,
    pub k: usize,
}

impl GradientState {
    /// Starts from `ĝ_0 = 0`.
    pub fn new(dim: usize, beta: f64) -> Self {
        Self {
            g_hat: vec![0.0; dim],
            beta,
            k: 0,
        }
    }

    pub fn update(&mut self, g_new: &[f64], g_old_is: &[f64]) -> Result<(), GradientError> {
        let d = self.g_hat.len();
        for v in [g_new, g_old_is] {
            if v.len() != d {
                return Err(GradientError::DimensionMismatch {
                    expected: d,
                    got: v.len(),
                });
            }
        }
        let keep = 1.0 - self.beta;
        for ((gh, n), o) in self.g_hat.iter_mut().zip(g_new).zip(g_old_is) {
            *gh = keep * (*gh - o) + n;
        }
        self.k += 1;
        Ok(())
    }

    /// Overwrites the estimate with a fresh gradient, without the recursion.
    pub fn reset_to(&mut self, g: &[f64]) {
        self.g_hat.copy_from_slice(g);
        self.k += 1;
    }
}
