//! Side computations: exploration tolerance by quadrature, the smoothness and
//! variance constants of the RL setting, a finite-difference oracle, a
//! synthetic nonconvex objective with a tunable noise level, and an
//! empirical probe of the gradient-tracking error.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::algorithms::{
    run_with_source, AlgoConfig, Algorithm, DriverOptions, Evaluation, GradientSource, Sample,
    TrackerInit,
};
use crate::error::{AlgoError, AnalysisError};
use crate::gradients::GradientState;
use crate::linalg::{axpy, dist, norm_sq};
use crate::mirror::{BregmanGeometry, GeometryKind, InnerSolver};
use crate::policies::{Family, PolicyModel};
use crate::quadrature::{adaptive_simpson, integrate_geometric_panels};

/// Absolute tolerance of the tail quadrature.
pub const LAMBDA_TOL: f64 = 1e-10;

/// `∫_{|a − μ(s)| > c} ‖∇ log π(a|s)‖ π(a|s) da` at the policy's current
/// parameters.
///
/// Each tail is split at `c + c·{1, 2, 4, …}` up to `c + 64σ`; the rest of
/// the tail is mapped onto a bounded interval with `r = 1/u`.
pub fn exploration_tolerance(p: &PolicyModel, s: f64, c: f64) -> Result<f64, AnalysisError> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(AnalysisError::InvalidInput(format!(
            "half width must be positive, got {c}"
        )));
    }
    let family = p.family();
    let sigma = p.sigma();
    let phi_norm = norm_sq(&p.features().features(s)).sqrt();
    // Both families are symmetric about the mean, but integrate each tail
    // separately anyway.
    let integrand = |r: f64| {
        if !r.is_finite() {
            return 0.0;
        }
        family.score_coeff(r, sigma).abs() * phi_norm * family.log_pdf(r, sigma).exp()
    };
    let reach = 64.0 * sigma;
    let width = c.min(sigma);
    let mut total = 0.0;
    for sign in [1.0, -1.0] {
        let f = |r: f64| integrand(sign * r);
        let near = integrate_geometric_panels(f, c, width, reach, 0.25 * LAMBDA_TOL)?;
        let cut = c + reach;
        let far = adaptive_simpson(
            |u: f64| {
                if u <= 0.0 {
                    0.0
                } else {
                    f(1.0 / u) / (u * u)
                }
            },
            0.0,
            1.0 / cut,
            0.25 * LAMBDA_TOL,
        )?;
        total += near + far;
    }
    Ok(total)
}

/// Closed form of [`exploration_tolerance`] for a feature vector of norm
/// `phi_norm`: `2‖φ‖ϕ(c/σ)/σ` (Gaussian), `2‖φ‖/(πσ(1 + (c/σ)²))` (Cauchy).
pub fn exploration_tolerance_closed_form(family: Family, sigma: f64, phi_norm: f64, c: f64) -> f64 {
    let z = c / sigma;
    match family {
        Family::Gaussian => {
            2.0 * phi_norm * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt() / sigma
        }
        Family::Cauchy => 2.0 * phi_norm / (std::f64::consts::PI * sigma * (1.0 + z * z)),
    }
}

/// `Pr(|a − μ| > c)`.
pub fn tail_probability(family: Family, sigma: f64, c: f64) -> f64 {
    let z = c / sigma;
    match family {
        Family::Gaussian => libm::erfc(z / std::f64::consts::SQRT_2),
        Family::Cauchy => 1.0 - 2.0 * z.atan() / std::f64::consts::PI,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessConstants {
    /// Score bound `D/σ`.
    pub b: f64,
    pub l_pi: f64,
    pub l: f64,
    /// Gradient-noise level; an assumption, never derived here.
    pub m0: Option<f64>,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub m3_tilde: f64,
    pub e_t: f64,
    pub e_t2: f64,
    pub l1: f64,
    pub c_w: f64,
}

impl SmoothnessConstants {
    /// `key=value` lines in a fixed order.
    pub fn to_lines(&self) -> Vec<String> {
        let f = crate::harness::fmt_num;
        let mut out = vec![
            format!("B={}", f(self.b)),
            format!("L_pi={}", f(self.l_pi)),
            format!("L={}", f(self.l)),
        ];
        if let Some(m0) = self.m0 {
            out.push(format!("m0={}", f(m0)));
        }
        out.extend([
            format!("m1={}", f(self.m1)),
            format!("m2={}", f(self.m2)),
            format!("m3={}", f(self.m3)),
            format!("m3_tilde={}", f(self.m3_tilde)),
            format!("E_T={}", f(self.e_t)),
            format!("E_T2={}", f(self.e_t2)),
            format!("L1={}", f(self.l1)),
            format!("C_w={}", f(self.c_w)),
        ]);
        out
    }
}

/// Constants of the RL setting for score bound `D/σ`, reward bound `U_R`
/// and discount `γ`. `γ = 0` is accepted as the degenerate one-step case.
pub fn smoothness_constants(
    d: f64,
    sigma: f64,
    u_r: f64,
    gamma: f64,
    c_w: f64,
) -> Result<SmoothnessConstants, AnalysisError> {
    for (name, v) in [("D", d), ("sigma", sigma), ("U_R", u_r), ("C_w", c_w)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(AnalysisError::InvalidInput(format!(
                "{name} must be positive, got {v}"
            )));
        }
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(AnalysisError::InvalidInput(format!(
            "gamma must lie in [0, 1), got {gamma}"
        )));
    }
    let b = d / sigma;
    let s2 = sigma * sigma;
    let l_pi = 2.0 * d * d / s2 + 7.0 * d / s2 + 1.0;
    let one_m = 1.0 - gamma;
    let l = u_r * l_pi / one_m.powi(2) + (1.0 + gamma) * u_r * b * b / one_m.powi(3);
    let sg = gamma.sqrt();
    let horizon_factor = (1.0 + sg) / (one_m * (1.0 - sg).powi(2));
    let m2 = 2.0 * u_r * b * horizon_factor;
    let m3 = 2.0;
    let l1 = 2.0 * l * l + 2.0 * c_w * u_r * u_r * b * b * horizon_factor;
    Ok(SmoothnessConstants {
        b,
        l_pi,
        l,
        m0: None,
        m1: 0.0,
        m2,
        m3,
        m3_tilde: 2.0 * (2.0 + m3),
        e_t: 1.0 / (1.0 - sg),
        e_t2: (1.0 + sg) / (1.0 - sg).powi(2),
        l1,
        c_w,
    })
}

/// Central differences, one coordinate at a time.
pub fn finite_diff_grad<F: Fn(&[f64]) -> f64>(f: F, theta: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `F(θ) = −½ θᵀAθ + Σᵢ cos θᵢ` with `A ⪰ 0`, `‖A‖ + 1 = L`.
///
/// Stochastic gradients add isotropic Gaussian noise with per-coordinate
/// variance `m0`, so `E‖∇F(θ, ξ) − ∇F(θ)‖² = d·m0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticObjective {
    pub d: usize,
    pub l: f64,
    pub m0: f64,
    a: DMatrix<f64>,
}

/// Random rotation of a spectrum spread over `[0, L − 1]`, top eigenvalue
/// exactly `L − 1`.
pub fn make_synthetic(
    d: usize,
    l: f64,
    m0: f64,
    seed: u64,
) -> Result<SyntheticObjective, AnalysisError> {
    if d == 0 {
        return Err(AnalysisError::InvalidInput(
            "dimension must be at least 1".into(),
        ));
    }
    if !(l >= 1.0 && l.is_finite()) {
        return Err(AnalysisError::InvalidInput(format!(
            "L must be at least 1, got {l}"
        )));
    }
    if !(m0 >= 0.0 && m0.is_finite()) {
        return Err(AnalysisError::InvalidInput(format!(
            "m0 must be nonnegative, got {m0}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    let top = l - 1.0;
    let spectrum = DVector::from_fn(d, |i, _| {
        if i == 0 {
            top
        } else {
            top * rng.random::<f64>()
        }
    });
    let a = &q * DMatrix::from_diagonal(&spectrum) * q.transpose();
    let a = (&a + a.transpose()) * 0.5;
    Ok(SyntheticObjective { d, l, m0, a })
}

impl SyntheticObjective {
    /// Objective with a given symmetric PSD matrix.
    pub fn from_matrix(a: DMatrix<f64>, m0: f64) -> Result<Self, AnalysisError> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(AnalysisError::InvalidInput(
                "A must be square and nonempty".into(),
            ));
        }
        let eig = SymmetricEigen::new(a.clone()).eigenvalues;
        if eig.iter().any(|&v| v < -1e-12) {
            return Err(AnalysisError::InvalidInput(
                "A must be positive semidefinite".into(),
            ));
        }
        let top = eig.iter().cloned().fold(0.0, f64::max);
        Ok(Self {
            d: a.nrows(),
            l: top + 1.0,
            m0,
            a,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let t = DVector::from_column_slice(theta);
        -0.5 * t.dot(&(&self.a * &t)) + theta.iter().map(|x| x.cos()).sum::<f64>()
    }

    pub fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let t = DVector::from_column_slice(theta);
        let at = &self.a * &t;
        theta
            .iter()
            .zip(at.iter())
            .map(|(x, ax)| -ax - x.sin())
            .collect()
    }

    pub fn noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let sd = self.m0.sqrt();
        (0..self.d)
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn stochastic_grad<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> Vec<f64> {
        let mut g = self.grad(theta);
        axpy(1.0, &self.noise(rng), &mut g);
        g
    }
}

/// Gradient source over a synthetic objective. The correction term at the
/// previous iterate reuses the same noise draw, the analogue of scoring the
/// same trajectory twice.
#[derive(Debug, Clone)]
pub struct SyntheticProblem {
    pub obj: SyntheticObjective,
}

impl GradientSource for SyntheticProblem {
    fn dim(&self) -> usize {
        self.obj.d
    }

    fn sample<R: Rng + ?Sized>(
        &mut self,
        theta: &[f64],
        theta_prev: Option<&[f64]>,
        rng: &mut R,
    ) -> Result<Sample, AlgoError> {
        let xi = self.obj.noise(rng);
        let with_noise = |t: &[f64]| {
            let mut g = self.obj.grad(t);
            axpy(1.0, &xi, &mut g);
            g
        };
        Ok(Sample {
            g_new: with_noise(theta),
            g_old: theta_prev.map(with_noise),
            return_estimate: self.obj.value(theta),
            states: Vec::new(),
            reached_goal: false,
        })
    }

    fn evaluate<R: Rng + ?Sized>(
        &self,
        theta: &[f64],
        _rng: &mut R,
    ) -> Result<Evaluation, AlgoError> {
        Ok(Evaluation {
            mean_return: self.obj.value(theta),
            goal_rate: 0.0,
        })
    }

    fn geometry(
        &self,
        kind: GeometryKind,
        _solver: InnerSolver,
        _sample: &Sample,
    ) -> Result<BregmanGeometry, AlgoError> {
        match kind {
            GeometryKind::Euclidean => Ok(BregmanGeometry::euclidean()),
            GeometryKind::PolicyKl => Err(AlgoError::InvalidConfig(
                "synthetic objectives support the euclidean geometry only".into(),
            )),
        }
    }
}

/// `min_k ‖𝒢_k‖²` of one Euclidean run on a synthetic objective.
pub fn min_breg_grad_sq(
    obj: &SyntheticObjective,
    algorithm: Algorithm,
    iterations: usize,
    eta: f64,
    beta: f64,
    theta0: Vec<f64>,
    seed: u64,
) -> Result<f64, AlgoError> {
    let cfg = AlgoConfig {
        eta,
        beta,
        iterations,
        geometry: GeometryKind::Euclidean,
        eval_every: 0,
        seed,
        theta0: Some(theta0),
        ..AlgoConfig::new(algorithm, Family::Gaussian)
    };
    let mut src = SyntheticProblem { obj: obj.clone() };
    let run = run_with_source(&cfg, &mut src, DriverOptions::default())?;
    Ok(run
        .records
        .iter()
        .map(|r| r.breg_grad_norm * r.breg_grad_norm)
        .fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOptions {
    pub replicates: usize,
    /// Common starting point; all ones when `None`.
    pub theta0: Option<Vec<f64>>,
    pub tracker_init: TrackerInit,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            replicates: 200,
            theta0: None,
            tracker_init: TrackerInit::Zero,
        }
    }
}

/// Replicate average of `‖ĝ_k − ∇F(θ_k)‖²` with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingProbe {
    pub eps: Vec<f64>,
    pub std_err: Vec<f64>,
}

/// Tracking error of the SRMA recursion with Euclidean steps on `obj`.
pub fn tracking_error_probe(
    obj: &SyntheticObjective,
    beta: f64,
    eta: f64,
    k: usize,
    seed: u64,
) -> TrackingProbe {
    tracking_error_probe_with(obj, beta, eta, k, seed, &ProbeOptions::default())
}

pub fn tracking_error_probe_with(
    obj: &SyntheticObjective,
    beta: f64,
    eta: f64,
    k: usize,
    seed: u64,
    opts: &ProbeOptions,
) -> TrackingProbe {
    assert!(beta > 0.0 && beta <= 1.0, "beta must lie in (0, 1]");
    let theta0 = opts.theta0.clone().unwrap_or_else(|| vec![1.0; obj.d]);
    assert_eq!(theta0.len(), obj.d, "theta0 dimension");
    let n = opts.replicates.max(1);
    let runs: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(rep as u64);
            let mut theta = theta0.clone();
            let mut prev = theta0.clone();
            let mut tracker = GradientState::new(obj.d, beta);
            let mut errs = Vec::with_capacity(k);
            for step in 1..=k {
                let xi = obj.noise(&mut rng);
                let exact = obj.grad(&theta);
                let mut g_new = exact.clone();
                axpy(1.0, &xi, &mut g_new);
                let mut g_old = obj.grad(&prev);
                axpy(1.0, &xi, &mut g_old);
                if step == 1 && opts.tracker_init == TrackerInit::FirstGradient {
                    tracker.reset_to(&g_new);
                } else {
                    tracker.update(&g_new, &g_old).expect("dimensions agree");
                }
                errs.push(dist(&tracker.g_hat, &exact).powi(2));
                let mut next = theta.clone();
                axpy(eta, &tracker.g_hat, &mut next);
                prev = std::mem::replace(&mut theta, next);
            }
            errs
        })
        .collect();
    let mut eps = vec![0.0; k];
    let mut sq = vec![0.0; k];
    for run in &runs {
        for (i, e) in run.iter().enumerate() {
            eps[i] += e;
            sq[i] += e * e;
        }
    }
    let nf = n as f64;
    let std_err = eps
        .iter_mut()
        .zip(&sq)
        .map(|(m, s)| {
            *m /= nf;
            if n > 1 {
                ((s / nf - *m * *m).max(0.0) * nf / (nf - 1.0) / nf).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    TrackingProbe { eps, std_err }
}
