//! Random-horizon trajectory generation.
//!
//! The horizon is geometric on `{1, 2, …}` with success probability
//! `p = 1 − √γ`, so `E[T] = 1/p` and `E[T²] = (2 − p)/p² = (1+√γ)/(1−√γ)²`.
//! A trajectory of horizon `T` holds the `T` decision steps
//! `t = 0, …, T−1`; then `Pr(T > t) = γ^{t/2}`, which is exactly the weight
//! that makes the `γ^{t/2}`-discounted estimators unbiased for the
//! `γ^t`-discounted objective.

use rand::Rng;
use rand_distr::{Distribution, Geometric};

use crate::envs::Environment;
use crate::policies::PolicyModel;

/// Draws `T ~ Geom(1 − √γ)` on `{1, 2, …}`.
pub fn sample_horizon<R: Rng + ?Sized>(gamma: f64, rng: &mut R) -> usize {
    assert!(gamma > 0.0 && gamma < 1.0, "discount must lie in (0, 1)");
    let p = 1.0 - gamma.sqrt();
    // `Geometric` counts failures before the first success.
    let failures = Geometric::new(p).expect("p in (0, 1]").sample(rng);
    usize::try_from(failures).unwrap_or(usize::MAX - 1) + 1
}

/// One sampled trajectory. Every per-step array has the same length, which
/// is the horizon unless the episode terminated earlier; the missing tail is
/// implicitly zero reward.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub horizon: usize,
    pub states: Vec<f64>,
    /// Actions as drawn from the policy, before clipping.
    pub raw_actions: Vec<f64>,
    pub executed_actions: Vec<f64>,
    pub rewards: Vec<f64>,
    /// `log π_{θ_b}(a_t|s_t)` at the raw action.
    pub behavior_logp: Vec<f64>,
    pub behavior_theta: Vec<f64>,
    pub final_state: f64,
    pub terminated: bool,
    pub reached_goal: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `Σ_t γ^t r_t` over the recorded steps.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        let mut disc = 1.0;
        let mut total = 0.0;
        for r in &self.rewards {
            total += disc * r;
            disc *= gamma;
        }
        total
    }

    /// Re-labels the trajectory so that estimators score the executed
    /// (clipped) actions instead of the raw draws.
    pub fn scored_at_executed(mut self, policy: &PolicyModel) -> Self {
        self.raw_actions.clone_from(&self.executed_actions);
        self.behavior_logp = self
            .states
            .iter()
            .zip(&self.raw_actions)
            .map(|(&s, &a)| policy.log_density(s, a))
            .collect();
        self
    }
}

/// Runs `policy` for up to `horizon` decision steps from a fresh reset.
/// Stops early if the environment terminates.
pub fn rollout<E, R>(env: &E, policy: &PolicyModel, horizon: usize, rng: &mut R) -> Trajectory
where
    E: Environment + ?Sized,
    R: Rng + ?Sized,
{
    assert!(horizon >= 1, "horizon must be at least 1");
    let cap = horizon.min(4096);
    let mut traj = Trajectory {
        horizon,
        states: Vec::with_capacity(cap),
        raw_actions: Vec::with_capacity(cap),
        executed_actions: Vec::with_capacity(cap),
        rewards: Vec::with_capacity(cap),
        behavior_logp: Vec::with_capacity(cap),
        behavior_theta: policy.theta().to_vec(),
        final_state: 0.0,
        terminated: false,
        reached_goal: false,
    };
    let mut s = env.reset(rng);
    for _ in 0..horizon {
        let a = policy.sample_action(s, rng);
        let out = env.step(s, a);
        traj.states.push(s);
        traj.raw_actions.push(a);
        traj.executed_actions.push(out.executed_action);
        traj.rewards.push(out.reward);
        traj.behavior_logp.push(policy.log_density(s, a));
        s = out.next_state;
        if out.terminal {
            traj.terminated = true;
            traj.reached_goal = env.is_goal(&out);
            break;
        }
    }
    traj.final_state = s;
    traj
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{ChainMdp, PathologicalMountainCar};
    use crate::policies::{Family, FeatureMap};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn moments(gamma: f64, n: usize, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let t = sample_horizon(gamma, &mut rng) as f64;
            s1 += t;
            s2 += t * t;
        }
        (s1 / n as f64, s2 / n as f64)
    }

    #[test]
    fn horizon_moments_match_geometric_law() {
        let n = 1_000_000;
        for (i, &gamma) in [0.5, 0.9, 0.97].iter().enumerate() {
            let p = 1.0 - f64::sqrt(gamma);
            let mean = 1.0 / p;
            let second = (2.0 - p) / (p * p);
            // Standard errors from Var(T) = (1−p)/p² and Var(T²) via the
            // fourth moment; tolerance is five of them.
            let var_t = (1.0 - p) / (p * p);
            let (m1, m2) = moments(gamma, n, 100 + i as u64);
            assert!(
                (m1 - mean).abs() < 5.0 * (var_t / n as f64).sqrt(),
                "γ={gamma} mean {m1} vs {mean}"
            );
            let rel = (m2 - second).abs() / second;
            assert!(rel < 0.03, "γ={gamma} E[T²] {m2} vs {second}");
        }
    }

    #[test]
    fn tiny_discount_gives_unit_horizon() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!((0..10_000).all(|_| sample_horizon(1e-12, &mut rng) == 1));
    }

    #[test]
    fn horizon_is_at_least_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!((0..100_000).all(|_| sample_horizon(0.3, &mut rng) >= 1));
    }

    fn chain_policy(sigma: f64) -> PolicyModel {
        PolicyModel::new(
            Family::Gaussian,
            vec![0.0],
            sigma,
            FeatureMap::linear(10.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn unit_horizon_at_fixed_point() {
        let env = ChainMdp::new(0.0);
        let p = chain_policy(1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = rollout(&env, &p, 1, &mut rng);
        assert_eq!(t.states, vec![0.0]);
        assert_eq!(t.rewards.len(), 1);
        assert!(t.rewards[0] <= 0.0 && t.rewards[0] > -1e-15);
        assert!(t.final_state.abs() < 1e-9);
    }

    #[test]
    fn shapes_and_logp_contract() {
        let env = PathologicalMountainCar::default();
        let fm = FeatureMap::evenly_spaced(-4.0, 3.709, 8, 1.0, 1.0).unwrap();
        let p = PolicyModel::new(Family::Cauchy, vec![0.5; 8], 1.0, fm).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let h = sample_horizon(0.97, &mut rng);
            let t = rollout(&env, &p, h, &mut rng);
            assert_eq!(t.horizon, h);
            let n = t.len();
            assert!(n >= 1 && n <= h);
            if !t.terminated {
                assert_eq!(n, h);
            }
            for v in [
                &t.raw_actions,
                &t.executed_actions,
                &t.rewards,
                &t.behavior_logp,
            ] {
                assert_eq!(v.len(), n);
            }
            for i in 0..n {
                assert_eq!(
                    t.behavior_logp[i],
                    p.log_density(t.states[i], t.raw_actions[i])
                );
            }
        }
    }

    #[test]
    fn rollout_is_deterministic_under_seed() {
        let env = ChainMdp::default();
        let p = chain_policy(0.5);
        let a = rollout(&env, &p, 50, &mut ChaCha8Rng::seed_from_u64(21));
        let b = rollout(&env, &p, 50, &mut ChaCha8Rng::seed_from_u64(21));
        assert_eq!(a, b);
    }

    #[test]
    fn executed_relabeling_rescores() {
        let env = PathologicalMountainCar::default();
        let fm = FeatureMap::evenly_spaced(-4.0, 3.709, 8, 1.0, 1.0).unwrap();
        let p = PolicyModel::new(Family::Cauchy, vec![0.0; 8], 5.0, fm).unwrap();
        let t = rollout(&env, &p, 40, &mut ChaCha8Rng::seed_from_u64(3)).scored_at_executed(&p);
        assert!(t.raw_actions.iter().all(|a| a.abs() <= 6.0));
        for i in 0..t.len() {
            assert_eq!(
                t.behavior_logp[i],
                p.log_density(t.states[i], t.raw_actions[i])
            );
        }
    }
}
