//! Optimization loops: SRMA, plain stochastic mirror ascent (SMA), vanilla
//! random-horizon policy gradient (RPG), and STORM (SRMA restricted to the
//! Euclidean geometry), plus the step-size rule that guarantees the
//! stationarity rate.
//!
//! All loops share one driver. Per iteration `k`:
//!
//! 1. draw `T_k` and one trajectory under `θ_k` (or a batch sharing `T_k`);
//! 2. estimate `g_new = ∇J(θ_k)` and, for the tracking variants, the
//!    importance-weighted `g̃_old = ∇̃J(θ_{k−1})` on the same trajectory;
//! 3. update the search direction `ĝ_k`;
//! 4. take the prox step `θ_{k+1} = argmax ⟨ĝ_k, θ⟩ − D_ψ(θ, θ_k)/η`.
//!
//! RNG draws depend only on the sampled trajectories, never on the
//! algorithm, so SRMA with `β = 1`, Euclidean SMA and RPG produce identical
//! iterates from the same seed.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{discounted_episode, Environment};
use crate::error::{AlgoError, MirrorError};
use crate::gradients::{pg_estimate, pg_estimate_is, GradientState, DEFAULT_W_MAX};
use crate::linalg::{all_finite, norm};
use crate::mirror::{BregmanGeometry, GeometryKind, InnerSolver};
use crate::policies::{Family, FeatureMap, PolicyModel};
use crate::sampling::{rollout, sample_horizon};

/// Iterates whose norm exceeds this are treated as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Srma,
    Sma,
    Rpg,
    Storm,
}

impl Algorithm {
    pub fn tracks(self) -> bool {
        matches!(self, Algorithm::Srma | Algorithm::Storm)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Srma => "srma",
            Algorithm::Sma => "sma",
            Algorithm::Rpg => "rpg",
            Algorithm::Storm => "storm",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "srma" => Ok(Algorithm::Srma),
            "sma" => Ok(Algorithm::Sma),
            "rpg" => Ok(Algorithm::Rpg),
            "storm" => Ok(Algorithm::Storm),
            other => Err(format!(
                "unknown algorithm '{other}' (expected srma|sma|rpg|storm)"
            )),
        }
    }
}

/// How the tracked gradient is formed at the first iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackerInit {
    /// `ĝ_1 = ∇J(θ_1)`.
    FirstGradient,
    /// `ĝ_0 = 0` and the recursion applied from `k = 1` with `θ_0 = θ_1`,
    /// which gives `ĝ_1 = β ∇J(θ_1)`.
    Zero,
}

/// Which action the score is evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreAt {
    /// The policy's own (unclipped) draw.
    Raw,
    /// The clipped action the environment executed.
    Executed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgoConfig {
    pub algorithm: Algorithm,
    pub eta: f64,
    /// Tracking step; ignored by SMA and RPG.
    pub beta: f64,
    pub gamma: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub geometry: GeometryKind,
    pub solver: InnerSolver,
    pub family: Family,
    pub sigma: f64,
    pub seed: u64,
    /// Importance-weight clip; `None` disables clipping.
    pub w_max: Option<f64>,
    /// Evaluate every this many iterations (and at the last); 0 disables.
    pub eval_every: usize,
    pub eval_rollouts: usize,
    pub tracker_init: TrackerInit,
    pub score_at: ScoreAt,
    /// Starting point; zeros when `None`.
    pub theta0: Option<Vec<f64>>,
}

impl AlgoConfig {
    /// Defaults for environment runs: `η = 0.005`, `γ = 0.97`, one
    /// trajectory per iteration.
    pub fn new(algorithm: Algorithm, family: Family) -> Self {
        Self {
            algorithm,
            eta: 0.005,
            beta: 0.5,
            gamma: 0.97,
            iterations: 500,
            batch_size: 1,
            geometry: match algorithm {
                Algorithm::Srma | Algorithm::Sma => GeometryKind::PolicyKl,
                Algorithm::Rpg | Algorithm::Storm => GeometryKind::Euclidean,
            },
            solver: InnerSolver::default(),
            family,
            sigma: 1.0,
            seed: 0,
            w_max: Some(DEFAULT_W_MAX),
            eval_every: 25,
            eval_rollouts: 20,
            tracker_init: TrackerInit::FirstGradient,
            score_at: ScoreAt::Raw,
            theta0: None,
        }
    }

    pub fn validate(&self) -> Result<(), AlgoError> {
        let bad = |m: String| Err(AlgoError::InvalidConfig(m));
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!(
                "eta must be a nonnegative finite number, got {}",
                self.eta
            ));
        }
        if self.algorithm.tracks() && !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad(format!("beta must lie in (0, 1], got {}", self.beta));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if let Some(w) = self.w_max {
            if w.is_nan() || w <= 0.0 {
                return bad(format!("w_max must be positive, got {w}"));
            }
        }
        if self.algorithm == Algorithm::Storm && self.geometry != GeometryKind::Euclidean {
            return bad("storm is defined for the euclidean geometry only".into());
        }
        if self.geometry == GeometryKind::PolicyKl
            && self.algorithm != Algorithm::Rpg
            && self.eta == 0.0
        {
            return bad("the policy_kl prox needs eta > 0".into());
        }
        Ok(())
    }

    /// Geometry actually used for the prox step.
    pub fn effective_geometry(&self) -> GeometryKind {
        match self.algorithm {
            Algorithm::Rpg | Algorithm::Storm => GeometryKind::Euclidean,
            _ => self.geometry,
        }
    }
}

/// One iteration's draw from a gradient source.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub g_new: Vec<f64>,
    /// Correction term at the previous iterate; present when requested.
    pub g_old: Option<Vec<f64>>,
    pub return_estimate: f64,
    /// States visited, used as the batch for the policy-KL geometry.
    pub states: Vec<f64>,
    pub reached_goal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub mean_return: f64,
    /// Fraction of evaluation rollouts that reached the goal.
    pub goal_rate: f64,
}

/// Anything that yields stochastic gradients of an objective to maximize.
pub trait GradientSource {
    fn dim(&self) -> usize;

    /// Draws `g_new` at `theta` and, when `theta_prev` is given, the
    /// correction at `theta_prev` from the same randomness.
    fn sample<R: Rng + ?Sized>(
        &mut self,
        theta: &[f64],
        theta_prev: Option<&[f64]>,
        rng: &mut R,
    ) -> Result<Sample, AlgoError>;

    fn evaluate<R: Rng + ?Sized>(
        &self,
        theta: &[f64],
        rng: &mut R,
    ) -> Result<Evaluation, AlgoError>;

    fn geometry(
        &self,
        kind: GeometryKind,
        solver: InnerSolver,
        sample: &Sample,
    ) -> Result<BregmanGeometry, AlgoError>;
}

/// Policy-gradient source over an environment.
#[derive(Debug, Clone)]
pub struct EnvProblem<E> {
    pub env: E,
    pub template: PolicyModel,
    pub gamma: f64,
    pub batch_size: usize,
    pub w_max: Option<f64>,
    pub score_at: ScoreAt,
    pub eval_rollouts: usize,
}

/// Eight radial-basis features spread evenly over the state range,
/// bandwidth 1, norm cap 1.
pub fn default_features<E: Environment>(env: &E) -> FeatureMap {
    let (lo, hi) = env.state_range();
    FeatureMap::evenly_spaced(lo, hi, 8, 1.0, 1.0).expect("valid default feature map")
}

impl<E: Environment> EnvProblem<E> {
    pub fn from_config(env: E, cfg: &AlgoConfig) -> Result<Self, AlgoError> {
        let features = default_features(&env);
        Self::with_features(env, features, cfg)
    }

    pub fn with_features(
        env: E,
        features: FeatureMap,
        cfg: &AlgoConfig,
    ) -> Result<Self, AlgoError> {
        let d = features.dim();
        let template = PolicyModel::new(cfg.family, vec![0.0; d], cfg.sigma, features)?;
        Ok(Self {
            env,
            template,
            gamma: cfg.gamma,
            batch_size: cfg.batch_size,
            w_max: cfg.w_max,
            score_at: cfg.score_at,
            eval_rollouts: cfg.eval_rollouts,
        })
    }
}

impl<E: Environment> GradientSource for EnvProblem<E> {
    fn dim(&self) -> usize {
        self.template.dim()
    }

    fn sample<R: Rng + ?Sized>(
        &mut self,
        theta: &[f64],
        theta_prev: Option<&[f64]>,
        rng: &mut R,
    ) -> Result<Sample, AlgoError> {
        let policy = self.template.with_theta(theta.to_vec())?;
        let d = policy.dim();
        let horizon = sample_horizon(self.gamma, rng);
        let mut out = Sample {
            g_new: vec![0.0; d],
            g_old: theta_prev.map(|_| vec![0.0; d]),
            return_estimate: 0.0,
            states: Vec::new(),
            reached_goal: false,
        };
        for _ in 0..self.batch_size {
            let mut traj = rollout(&self.env, &policy, horizon, rng);
            if self.score_at == ScoreAt::Executed {
                traj = traj.scored_at_executed(&policy);
            }
            let g = pg_estimate(&traj, &policy, self.gamma)?;
            crate::linalg::axpy(1.0, &g, &mut out.g_new);
            if let (Some(prev), Some(acc)) = (theta_prev, out.g_old.as_mut()) {
                let go = pg_estimate_is(&traj, &policy, prev, self.gamma, self.w_max)?;
                crate::linalg::axpy(1.0, &go, acc);
            }
            out.return_estimate += traj.discounted_return(self.gamma);
            out.reached_goal |= traj.reached_goal;
            out.states.extend_from_slice(&traj.states);
        }
        if self.batch_size > 1 {
            let inv = 1.0 / self.batch_size as f64;
            out.g_new.iter_mut().for_each(|v| *v *= inv);
            if let Some(acc) = out.g_old.as_mut() {
                acc.iter_mut().for_each(|v| *v *= inv);
            }
            out.return_estimate *= inv;
        }
        Ok(out)
    }

    fn evaluate<R: Rng + ?Sized>(
        &self,
        theta: &[f64],
        rng: &mut R,
    ) -> Result<Evaluation, AlgoError> {
        let policy = self.template.with_theta(theta.to_vec())?;
        let n = self.eval_rollouts.max(1);
        let (mut total, mut goals) = (0.0, 0usize);
        for _ in 0..n {
            let ep = discounted_episode(&self.env, &policy, self.gamma, rng);
            total += ep.discounted_return;
            goals += usize::from(ep.reached_goal);
        }
        Ok(Evaluation {
            mean_return: total / n as f64,
            goal_rate: goals as f64 / n as f64,
        })
    }

    fn geometry(
        &self,
        kind: GeometryKind,
        solver: InnerSolver,
        sample: &Sample,
    ) -> Result<BregmanGeometry, AlgoError> {
        match kind {
            GeometryKind::Euclidean => Ok(BregmanGeometry::euclidean()),
            GeometryKind::PolicyKl => Ok(BregmanGeometry::policy_kl(
                self.template.family(),
                self.template.sigma(),
                self.template.features(),
                &sample.states,
                solver,
            )?),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// 1-based iteration index.
    pub k: usize,
    /// Discounted return of the fresh training trajectory.
    pub return_estimate: f64,
    pub eval: Option<Evaluation>,
    /// `‖𝒢_{η,ĝ_k}(θ_k)‖`.
    pub breg_grad_norm: f64,
    pub ghat_norm: f64,
    /// `‖θ_{k+1}‖`.
    pub theta_norm: f64,
    pub wall_ms: f64,
    pub diverged: bool,
    pub reached_goal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub k: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub records: Vec<IterationRecord>,
    /// Final iterate (the last finite one when the run diverged).
    pub theta: Vec<f64>,
    /// Every iterate `θ_1, …, θ_{K+1}` when requested.
    pub trajectory: Option<Vec<Vec<f64>>>,
    pub divergence: Option<Divergence>,
}

impl Run {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    pub fn final_eval(&self) -> Option<Evaluation> {
        self.records.iter().rev().find_map(|r| r.eval)
    }
}

/// Options of the shared driver not covered by [`AlgoConfig`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DriverOptions {
    pub keep_iterates: bool,
}

/// Runs `cfg.algorithm` on an arbitrary gradient source.
pub fn run_with_source<S: GradientSource>(
    cfg: &AlgoConfig,
    source: &mut S,
    opts: DriverOptions,
) -> Result<Run, AlgoError> {
    cfg.validate()?;
    let d = source.dim();
    let mut theta = match &cfg.theta0 {
        Some(t) if t.len() != d => {
            return Err(AlgoError::InvalidConfig(format!(
                "theta0 has dimension {}, problem has {d}",
                t.len()
            )))
        }
        Some(t) => t.clone(),
        None => vec![0.0; d],
    };
    let mut theta_prev = theta.clone();
    let mut tracker = GradientState::new(d, cfg.beta);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    eval_rng.set_stream(1);

    let geometry_kind = cfg.effective_geometry();
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut iterates = opts.keep_iterates.then(|| vec![theta.clone()]);

    for k in 1..=cfg.iterations {
        let start = Instant::now();
        let prev = cfg.algorithm.tracks().then_some(theta_prev.as_slice());
        let sample = source.sample(&theta, prev, &mut rng)?;

        let direction: &[f64] = if cfg.algorithm.tracks() {
            match (k, cfg.tracker_init) {
                (1, TrackerInit::FirstGradient) => tracker.reset_to(&sample.g_new),
                _ => {
                    let g_old = sample
                        .g_old
                        .as_deref()
                        .expect("tracking variants request g_old");
                    tracker.update(&sample.g_new, g_old)?;
                }
            }
            &tracker.g_hat
        } else {
            &sample.g_new
        };
        let ghat_norm = norm(direction);

        let mut record = IterationRecord {
            k,
            return_estimate: sample.return_estimate,
            eval: None,
            breg_grad_norm: f64::NAN,
            ghat_norm,
            theta_norm: norm(&theta),
            wall_ms: 0.0,
            diverged: false,
            reached_goal: sample.reached_goal,
        };

        let stepped = if all_finite(direction) {
            source
                .geometry(geometry_kind, cfg.solver, &sample)
                .and_then(|geom| {
                    prox_with_gradient(&geom, direction, &theta, cfg.eta).map_err(AlgoError::from)
                })
        } else {
            Err(AlgoError::Mirror(MirrorError::NonFinite))
        };
        let (next, breg) = match stepped {
            Ok(v) => v,
            Err(AlgoError::Mirror(e)) => {
                record.diverged = true;
                record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
                records.push(record);
                return Ok(Run {
                    records,
                    theta,
                    trajectory: iterates,
                    divergence: Some(Divergence {
                        k,
                        reason: e.to_string(),
                    }),
                });
            }
            Err(e) => return Err(e),
        };
        record.breg_grad_norm = norm(&breg);
        let next_norm = norm(&next);
        record.theta_norm = next_norm;

        if !all_finite(&next) || next_norm > DIVERGENCE_THRESHOLD {
            record.diverged = true;
            record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
            records.push(record);
            let reason = AlgoError::NumericalDivergence {
                k,
                theta_norm: next_norm,
            }
            .to_string();
            return Ok(Run {
                records,
                theta,
                trajectory: iterates,
                divergence: Some(Divergence { k, reason }),
            });
        }

        if cfg.eval_every > 0 && (k % cfg.eval_every == 0 || k == cfg.iterations) {
            record.eval = Some(source.evaluate(&next, &mut eval_rng)?);
        }
        record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        records.push(record);

        theta_prev = std::mem::replace(&mut theta, next);
        if let Some(it) = iterates.as_mut() {
            it.push(theta.clone());
        }
    }
    Ok(Run {
        records,
        theta,
        trajectory: iterates,
        divergence: None,
    })
}

/// Prox step and the generalized gradient from a single solve.
pub fn prox_with_gradient(
    geom: &BregmanGeometry,
    g: &[f64],
    theta: &[f64],
    eta: f64,
) -> Result<(Vec<f64>, Vec<f64>), MirrorError> {
    let next = geom.prox_step(g, theta, eta)?;
    let breg = match geom.kind() {
        GeometryKind::Euclidean => g.to_vec(),
        GeometryKind::PolicyKl => next.iter().zip(theta).map(|(n, t)| (n - t) / eta).collect(),
    };
    Ok((next, breg))
}

fn run_env<E: Environment>(
    cfg: &AlgoConfig,
    env: E,
    algorithm: Algorithm,
) -> Result<Run, AlgoError> {
    let mut cfg = cfg.clone();
    cfg.algorithm = algorithm;
    let mut source = EnvProblem::from_config(env, &cfg)?;
    run_with_source(&cfg, &mut source, DriverOptions::default())
}

/// Stochastic recursive mirror ascent.
pub fn srma_run<E: Environment>(cfg: &AlgoConfig, env: E) -> Result<Run, AlgoError> {
    run_env(cfg, env, Algorithm::Srma)
}

/// Stochastic mirror ascent with the fresh gradient as search direction.
pub fn sma_run<E: Environment>(cfg: &AlgoConfig, env: E) -> Result<Run, AlgoError> {
    run_env(cfg, env, Algorithm::Sma)
}

/// Plain ascent `θ ← θ + η ∇J(θ, ξ)`.
pub fn rpg_run<E: Environment>(cfg: &AlgoConfig, env: E) -> Result<Run, AlgoError> {
    run_env(cfg, env, Algorithm::Rpg)
}

/// SRMA with the Euclidean geometry.
pub fn storm_run<E: Environment>(cfg: &AlgoConfig, env: E) -> Result<Run, AlgoError> {
    run_env(cfg, env, Algorithm::Storm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSizeMode {
    /// First bound taken literally as `ζL′/10`.
    Literal,
    /// First bound as the conventional `ζ/(10L′)`.
    Corrected,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizeInputs {
    pub zeta: f64,
    pub l_prime: f64,
    /// `m̃₃ = 2(2 + m₃)`.
    pub m3_tilde: f64,
    pub c1: f64,
    pub mode: StepSizeMode,
}

/// `η = min(first, ζ/(8 m̃₃ C₁²))`, `β = min(C₁η, 1)`.
pub fn step_size_rule(inputs: StepSizeInputs) -> Result<(f64, f64), AlgoError> {
    let StepSizeInputs {
        zeta,
        l_prime,
        m3_tilde,
        c1,
        mode,
    } = inputs;
    for (name, v) in [
        ("zeta", zeta),
        ("L'", l_prime),
        ("m3_tilde", m3_tilde),
        ("C1", c1),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(AlgoError::InvalidConfig(format!(
                "{name} must be positive, got {v}"
            )));
        }
    }
    if c1 <= 2.0 / zeta {
        return Err(AlgoError::InvalidConfig(format!(
            "C1 = {c1} must exceed 2/ζ = {}",
            2.0 / zeta
        )));
    }
    let first = match mode {
        StepSizeMode::Literal => zeta * l_prime / 10.0,
        StepSizeMode::Corrected => zeta / (10.0 * l_prime),
    };
    let second = zeta / (8.0 * m3_tilde * c1 * c1);
    let eta = first.min(second);
    Ok((eta, (c1 * eta).min(1.0)))
}
