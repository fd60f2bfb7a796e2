//! Environments: the Pathological Mountain Car and a linear-quadratic
//! chain used as an analytic oracle.

use rand::Rng;

use crate::policies::PolicyModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next_state: f64,
    pub reward: f64,
    pub terminal: bool,
    /// Action that actually drove the dynamics (after clipping).
    pub executed_action: f64,
}

/// Scalar-state, scalar-action episodic environment.
pub trait Environment {
    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> f64;
    fn step(&self, s: f64, a_raw: f64) -> StepOutcome;
    /// Range over which state features are laid out.
    fn state_range(&self) -> (f64, f64);

    /// Whether `outcome` ended at the high-value goal. Only meaningful for
    /// environments that have one.
    fn is_goal(&self, _outcome: &StepOutcome) -> bool {
        false
    }
}

/// Pathological Mountain Car.
///
/// The action is the car's velocity. A small reward band sits at the
/// spurious goal near the start distribution; the large, terminal reward is
/// at the far left wall. Every step pays the energy cost `a²` of the
/// executed action.
#[derive(Debug, Clone, PartialEq)]
pub struct PathologicalMountainCar {
    pub left: f64,
    pub right: f64,
    pub dt: f64,
    pub max_action: f64,
    pub goal_band: f64,
    pub spurious_goal: f64,
    pub goal_reward: f64,
    pub spurious_reward: f64,
    pub init_low: f64,
    pub init_high: f64,
}

impl Default for PathologicalMountainCar {
    fn default() -> Self {
        Self {
            left: -4.0,
            right: 3.709,
            dt: 0.05,
            max_action: 6.0,
            goal_band: 0.05,
            spurious_goal: 2.6,
            goal_reward: 500.0,
            spurious_reward: 10.0,
            init_low: 1.15,
            init_high: 2.0,
        }
    }
}

impl PathologicalMountainCar {
    pub fn in_left_goal(&self, s: f64) -> bool {
        s <= self.left + self.goal_band
    }

    pub fn in_spurious_goal(&self, s: f64) -> bool {
        (s - self.spurious_goal).abs() <= self.goal_band
    }
}

impl Environment for PathologicalMountainCar {
    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.random_range(self.init_low..=self.init_high)
    }

    fn step(&self, s: f64, a_raw: f64) -> StepOutcome {
        let a = a_raw.clamp(-self.max_action, self.max_action);
        let next = (s + self.dt * a).clamp(self.left, self.right);
        let cost = a * a;
        let (reward, terminal) = if self.in_left_goal(next) {
            (self.goal_reward - cost, true)
        } else if self.in_spurious_goal(next) {
            (self.spurious_reward - cost, false)
        } else {
            (-cost, false)
        };
        StepOutcome {
            next_state: next,
            reward,
            terminal,
            executed_action: a,
        }
    }

    fn state_range(&self) -> (f64, f64) {
        (self.left, self.right)
    }

    fn is_goal(&self, outcome: &StepOutcome) -> bool {
        outcome.terminal
    }
}

/// `s' = 0.9·s + 0.1·a`, `r = −s² − 0.01·a²`, deterministic start, never
/// terminates. With a linear Gaussian policy its discounted value has a
/// closed form, which makes it a brute-force oracle for the estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainMdp {
    pub start: f64,
}

impl ChainMdp {
    pub const DECAY: f64 = 0.9;
    pub const GAIN: f64 = 0.1;
    pub const ACTION_COST: f64 = 0.01;

    pub fn new(start: f64) -> Self {
        Self { start }
    }
}

impl Default for ChainMdp {
    fn default() -> Self {
        Self { start: 1.0 }
    }
}

impl Environment for ChainMdp {
    fn reset<R: Rng + ?Sized>(&self, _rng: &mut R) -> f64 {
        self.start
    }

    fn step(&self, s: f64, a: f64) -> StepOutcome {
        StepOutcome {
            next_state: Self::DECAY * s + Self::GAIN * a,
            reward: -s * s - Self::ACTION_COST * a * a,
            terminal: false,
            executed_action: a,
        }
    }

    fn state_range(&self) -> (f64, f64) {
        (-2.0, 2.0)
    }
}

/// Environment selectable by name in experiment configs.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvKind {
    Pmc(PathologicalMountainCar),
    Chain(ChainMdp),
}

impl EnvKind {
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "pmc" => Some(EnvKind::Pmc(PathologicalMountainCar::default())),
            "chain" => Some(EnvKind::Chain(ChainMdp::default())),
            _ => None,
        }
    }
}

impl Environment for EnvKind {
    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            EnvKind::Pmc(e) => e.reset(rng),
            EnvKind::Chain(e) => e.reset(rng),
        }
    }

    fn step(&self, s: f64, a_raw: f64) -> StepOutcome {
        match self {
            EnvKind::Pmc(e) => e.step(s, a_raw),
            EnvKind::Chain(e) => e.step(s, a_raw),
        }
    }

    fn state_range(&self) -> (f64, f64) {
        match self {
            EnvKind::Pmc(e) => e.state_range(),
            EnvKind::Chain(e) => e.state_range(),
        }
    }

    fn is_goal(&self, outcome: &StepOutcome) -> bool {
        match self {
            EnvKind::Pmc(e) => e.is_goal(outcome),
            EnvKind::Chain(e) => e.is_goal(outcome),
        }
    }
}

/// Discount below which a rollout is truncated for value estimation.
pub const VALUE_TRUNCATION: f64 = 1e-8;

/// Result of one value-estimation rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeReturn {
    pub discounted_return: f64,
    pub reached_goal: bool,
}

/// One full-length rollout, truncated once `γ^t < 1e−8` or on termination.
pub fn discounted_episode<E, R>(
    env: &E,
    policy: &PolicyModel,
    gamma: f64,
    rng: &mut R,
) -> EpisodeReturn
where
    E: Environment + ?Sized,
    R: Rng + ?Sized,
{
    let mut s = env.reset(rng);
    let mut discount = 1.0;
    let mut total = 0.0;
    let mut reached_goal = false;
    while discount >= VALUE_TRUNCATION {
        let a = policy.sample_action(s, rng);
        let out = env.step(s, a);
        total += discount * out.reward;
        if out.terminal {
            reached_goal = env.is_goal(&out);
            break;
        }
        s = out.next_state;
        discount *= gamma;
    }
    EpisodeReturn {
        discounted_return: total,
        reached_goal,
    }
}

/// Monte-Carlo estimate of `J(θ) = E[Σ γ^t r_t]` over `n_traj` rollouts.
pub fn estimate_value<E, R>(
    env: &E,
    policy: &PolicyModel,
    gamma: f64,
    n_traj: usize,
    rng: &mut R,
) -> f64
where
    E: Environment + ?Sized,
    R: Rng + ?Sized,
{
    assert!(gamma > 0.0 && gamma < 1.0, "discount must lie in (0, 1)");
    if n_traj == 0 {
        return 0.0;
    }
    let sum: f64 = (0..n_traj)
        .map(|_| discounted_episode(env, policy, gamma, rng).discounted_return)
        .sum();
    sum / n_traj as f64
}
