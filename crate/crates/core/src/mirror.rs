//! Bregman geometries, the mirror-ascent prox step and the generalized
//! (Bregman) gradient.
//!
//! Sign convention: the generalized gradient is the ascent displacement per
//! unit step, `𝒢 = (prox(θ) − θ)/η`, so that `θ⁺ = θ + η𝒢` and the
//! Euclidean geometry gives `𝒢 = g`. Writing it as `(θ − prox(θ))/η` would
//! contradict the update `θ⁺ = θ + η𝒢`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::MirrorError;
use crate::linalg::{all_finite, dot, norm, norm_sq};
use crate::policies::{Family, FeatureMap};

/// Floor applied to estimated strong-convexity moduli.
pub const ZETA_FLOOR: f64 = 1e-3;
/// Radius of the ball in which the policy-KL modulus is probed.
pub const ZETA_PROBE_RADIUS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryKind {
    Euclidean,
    PolicyKl,
}

impl std::str::FromStr for GeometryKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euclidean" => Ok(GeometryKind::Euclidean),
            "policy_kl" => Ok(GeometryKind::PolicyKl),
            other => Err(format!(
                "unknown geometry '{other}' (expected euclidean|policy_kl)"
            )),
        }
    }
}

/// Settings of the iterative prox solver used for non-Euclidean geometries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerSolver {
    pub steps: usize,
    /// Inner step is `step_size_factor · η`.
    pub step_size_factor: f64,
    /// Stop once the prox-objective gradient norm falls below this.
    pub tol: f64,
    /// The prox is solved over the ball `‖x − θ‖ ≤ trust_radius`, the
    /// region in which `ζ` is certified. The Cauchy KL grows only
    /// logarithmically, so without the ball the prox objective is unbounded
    /// once `‖g‖ > 1/(2ση)`.
    pub trust_radius: f64,
}

impl Default for InnerSolver {
    fn default() -> Self {
        Self {
            steps: 50,
            step_size_factor: 0.1,
            tol: 1e-8,
            trust_radius: ZETA_PROBE_RADIUS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Divergence {
    Euclidean,
    PolicyKl {
        family: Family,
        sigma: f64,
        /// Features of the state batch, one row per state.
        phis: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BregmanGeometry {
    divergence: Divergence,
    zeta: f64,
    pub solver: InnerSolver,
}

impl BregmanGeometry {
    pub fn euclidean() -> Self {
        Self {
            divergence: Divergence::Euclidean,
            zeta: 1.0,
            solver: InnerSolver::default(),
        }
    }

    /// Mean policy KL over `states`, with `ζ` estimated from the batch.
    pub fn policy_kl(
        family: Family,
        sigma: f64,
        features: &FeatureMap,
        states: &[f64],
        solver: InnerSolver,
    ) -> Result<Self, MirrorError> {
        if states.is_empty() {
            return Err(MirrorError::EmptyStateBatch);
        }
        let phis = states.iter().map(|&s| features.features(s)).collect();
        let mut geom = Self {
            divergence: Divergence::PolicyKl {
                family,
                sigma,
                phis,
            },
            zeta: 1.0,
            solver,
        };
        geom.zeta = geom.estimate_zeta();
        Ok(geom)
    }

    pub fn kind(&self) -> GeometryKind {
        match self.divergence {
            Divergence::Euclidean => GeometryKind::Euclidean,
            Divergence::PolicyKl { .. } => GeometryKind::PolicyKl,
        }
    }

    /// Strong-convexity modulus `ζ` of the divergence.
    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    fn dim(&self) -> Option<usize> {
        match &self.divergence {
            Divergence::Euclidean => None,
            Divergence::PolicyKl { phis, .. } => Some(phis[0].len()),
        }
    }

    fn check_dims(&self, vs: &[&[f64]]) -> Result<(), MirrorError> {
        let expected = self.dim().unwrap_or(vs[0].len());
        for v in vs {
            if v.len() != expected {
                return Err(MirrorError::DimensionMismatch {
                    expected,
                    got: v.len(),
                });
            }
        }
        Ok(())
    }

    /// `D_ψ(x, y)`.
    pub fn bregman_div(&self, x: &[f64], y: &[f64]) -> Result<f64, MirrorError> {
        self.check_dims(&[x, y])?;
        Ok(self.div_unchecked(x, y))
    }

    fn div_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match &self.divergence {
            Divergence::Euclidean => {
                0.5 * x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            }
            Divergence::PolicyKl {
                family,
                sigma,
                phis,
            } => {
                let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
                let total: f64 = phis
                    .iter()
                    .map(|phi| family.kl_shift(dot(phi, &diff), *sigma))
                    .sum();
                total / phis.len() as f64
            }
        }
    }

    /// `∇_x D_ψ(x, y)`.
    fn div_grad_x(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        match &self.divergence {
            Divergence::Euclidean => x.iter().zip(y).map(|(a, b)| a - b).collect(),
            Divergence::PolicyKl {
                family,
                sigma,
                phis,
            } => {
                let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
                let mut grad = vec![0.0; x.len()];
                let inv_n = 1.0 / phis.len() as f64;
                for phi in phis {
                    let c = family.kl_shift_derivative(dot(phi, &diff), *sigma) * inv_n;
                    for (g, p) in grad.iter_mut().zip(phi) {
                        *g += c * p;
                    }
                }
                grad
            }
        }
    }

    /// `argmax_x { ⟨g, x⟩ − D_ψ(x, θ)/η }`.
    ///
    /// Exact for the Euclidean geometry. Otherwise gradient ascent on the
    /// prox objective from the Euclidean step `θ + ηg`.
    pub fn prox_step(&self, g: &[f64], theta: &[f64], eta: f64) -> Result<Vec<f64>, MirrorError> {
        self.check_dims(&[g, theta])?;
        if !all_finite(g) || !all_finite(theta) || !eta.is_finite() {
            return Err(MirrorError::NonFinite);
        }
        match &self.divergence {
            Divergence::Euclidean => {
                if eta < 0.0 {
                    return Err(MirrorError::NonPositiveStep(eta));
                }
                Ok(theta.iter().zip(g).map(|(t, gi)| t + eta * gi).collect())
            }
            Divergence::PolicyKl { .. } => {
                if eta <= 0.0 {
                    return Err(MirrorError::NonPositiveStep(eta));
                }
                self.solve_prox(g, theta, eta)
            }
        }
    }

    fn prox_objective(&self, g: &[f64], x: &[f64], theta: &[f64], eta: f64) -> f64 {
        dot(g, x) - self.div_unchecked(x, theta) / eta
    }

    fn solve_prox(&self, g: &[f64], theta: &[f64], eta: f64) -> Result<Vec<f64>, MirrorError> {
        let InnerSolver {
            steps,
            step_size_factor,
            tol,
            trust_radius,
        } = self.solver;
        let alpha = step_size_factor * eta;
        let project = |x: &mut [f64]| {
            let r = x
                .iter()
                .zip(theta)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if r > trust_radius {
                let shrink = trust_radius / r;
                for (xi, t) in x.iter_mut().zip(theta) {
                    *xi = t + (*xi - t) * shrink;
                }
            }
        };
        let mut x: Vec<f64> = theta.iter().zip(g).map(|(t, gi)| t + eta * gi).collect();
        project(&mut x);
        let mut obj = self.prox_objective(g, &x, theta, eta);
        let mut decreases = 0;
        for step in 0..steps {
            let dg = self.div_grad_x(&x, theta);
            let mut cand: Vec<f64> = x
                .iter()
                .zip(g.iter().zip(&dg))
                .map(|(xi, (gi, d))| xi + alpha * (gi - d / eta))
                .collect();
            project(&mut cand);
            // Projected-gradient norm; zero exactly at the constrained argmax.
            let moved = cand
                .iter()
                .zip(&x)
                .map(|(c, xi)| (c - xi) * (c - xi))
                .sum::<f64>()
                .sqrt()
                / alpha;
            if moved < tol {
                break;
            }
            x = cand;
            let next = self.prox_objective(g, &x, theta, eta);
            if !next.is_finite() {
                return Err(MirrorError::InnerSolverDiverged { step });
            }
            if next < obj - tol * (1.0 + obj.abs()) {
                decreases += 1;
                if decreases >= 2 {
                    return Err(MirrorError::InnerSolverDiverged { step });
                }
            } else {
                decreases = 0;
            }
            obj = next;
        }
        Ok(x)
    }

    /// `𝒢 = (prox(θ) − θ)/η`; exactly `g` for the Euclidean geometry.
    pub fn bregman_gradient(
        &self,
        g: &[f64],
        theta: &[f64],
        eta: f64,
    ) -> Result<Vec<f64>, MirrorError> {
        match self.divergence {
            Divergence::Euclidean => {
                self.check_dims(&[g, theta])?;
                if !all_finite(g) {
                    return Err(MirrorError::NonFinite);
                }
                Ok(g.to_vec())
            }
            Divergence::PolicyKl { .. } => {
                let next = self.prox_step(g, theta, eta)?;
                Ok(next.iter().zip(theta).map(|(n, t)| (n - t) / eta).collect())
            }
        }
    }

    /// Smallest Rayleigh quotient `2 D(θ+u, θ)/‖u‖²` for `‖u‖ ≤ 0.5`.
    ///
    /// The same-scale policy KL depends only on `u`, so the estimate is
    /// independent of `θ`. Probes: eigenvectors of the curvature at `u = 0`,
    /// random directions, then a projected-descent refinement on the sphere
    /// of the largest radius (the quotient is nonincreasing in the radius
    /// for both families).
    fn estimate_zeta(&self) -> f64 {
        let Divergence::PolicyKl {
            family,
            sigma,
            phis,
        } = &self.divergence
        else {
            return 1.0;
        };
        let d = phis[0].len();
        let zero = vec![0.0; d];
        let quotient = |u: &[f64]| 2.0 * self.div_unchecked(u, &zero) / norm_sq(u);

        let curvature = match family {
            Family::Gaussian => 1.0 / (sigma * sigma),
            Family::Cauchy => 1.0 / (2.0 * sigma * sigma),
        };
        let mut gram = DMatrix::<f64>::zeros(d, d);
        for phi in phis {
            for i in 0..d {
                for j in 0..d {
                    gram[(i, j)] += phi[i] * phi[j];
                }
            }
        }
        gram *= curvature / phis.len() as f64;
        let eig = SymmetricEigen::new(gram);

        let r = ZETA_PROBE_RADIUS;
        let mut best = f64::INFINITY;
        let mut best_dir = vec![0.0; d];
        let consider = |dir: Vec<f64>, best: &mut f64, best_dir: &mut Vec<f64>| {
            let n = norm(&dir);
            if n == 0.0 {
                return;
            }
            for radius in [r / 8.0, r / 4.0, r / 2.0, r] {
                let u: Vec<f64> = dir.iter().map(|v| v * radius / n).collect();
                let q = quotient(&u);
                if q < *best {
                    *best = q;
                    *best_dir = dir.iter().map(|v| v / n).collect();
                }
            }
        };
        for k in 0..d {
            let col: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            consider(col, &mut best, &mut best_dir);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_2e7a);
        for _ in 0..64 {
            let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            consider(dir, &mut best, &mut best_dir);
        }

        // Projected descent on the outer sphere.
        let mut u: Vec<f64> = best_dir.iter().map(|v| v * r).collect();
        let mut q = quotient(&u);
        let mut step = 0.1 * r;
        let h = 1e-6;
        for _ in 0..200 {
            let mut grad = vec![0.0; d];
            for i in 0..d {
                let mut up = u.clone();
                let mut dn = u.clone();
                up[i] += h;
                dn[i] -= h;
                grad[i] = (quotient(&up) - quotient(&dn)) / (2.0 * h);
            }
            let radial = dot(&grad, &u) / norm_sq(&u);
            let tangent: Vec<f64> = grad.iter().zip(&u).map(|(g, ui)| g - radial * ui).collect();
            let tn = norm(&tangent);
            if tn < 1e-14 {
                break;
            }
            let mut cand: Vec<f64> = u
                .iter()
                .zip(&tangent)
                .map(|(ui, t)| ui - step * t / tn)
                .collect();
            let cn = norm(&cand);
            cand.iter_mut().for_each(|v| *v *= r / cn);
            let qc = quotient(&cand);
            if qc < q {
                u = cand;
                q = qc;
            } else {
                step *= 0.5;
                if step < 1e-10 {
                    break;
                }
            }
        }
        best.min(q).max(ZETA_FLOOR)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sub;
    use proptest::prelude::*;

    fn pmc_features() -> FeatureMap {
        FeatureMap::evenly_spaced(-4.0, 3.709, 8, 1.0, 1.0).unwrap()
    }

    fn spread_states(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| -4.0 + 7.709 * i as f64 / (n - 1) as f64)
            .collect()
    }

    #[test]
    fn euclidean_divergence_and_prox() {
        let e = BregmanGeometry::euclidean();
        assert_eq!(e.zeta(), 1.0);
        assert_eq!(e.bregman_div(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 12.5);
        assert_eq!(e.bregman_div(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert_eq!(
            e.prox_step(&[0.0, 0.0], &[1.0, 2.0], 0.3).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            e.prox_step(&[1.0, 2.0], &[0.0, 0.0], 0.1).unwrap(),
            vec![0.1, 0.2]
        );
        assert_eq!(
            e.bregman_gradient(&[1.0, -7.0], &[0.3, 0.3], 0.01).unwrap(),
            vec![1.0, -7.0]
        );
        assert!(e.bregman_div(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn policy_kl_needs_states() {
        let r = BregmanGeometry::policy_kl(
            Family::Gaussian,
            1.0,
            &pmc_features(),
            &[],
            InnerSolver::default(),
        );
        assert_eq!(r, Err(MirrorError::EmptyStateBatch));
    }

    #[test]
    fn policy_kl_gaussian_unit_shift() {
        let fm = FeatureMap::radial_basis(vec![0.0], 1.0, 1.0).unwrap();
        let g =
            BregmanGeometry::policy_kl(Family::Gaussian, 1.0, &fm, &[0.0], InnerSolver::default())
                .unwrap();
        assert!((g.bregman_div(&[1.0], &[0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(g.bregman_div(&[0.4], &[0.4]).unwrap(), 0.0);
        // Quadratic divergence with curvature 1: ζ = 1 exactly.
        assert!((g.zeta() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn prox_requires_positive_step() {
        let g = BregmanGeometry::policy_kl(
            Family::Cauchy,
            1.0,
            &pmc_features(),
            &[0.0],
            InnerSolver::default(),
        )
        .unwrap();
        assert!(matches!(
            g.prox_step(&[0.0; 8], &[0.0; 8], 0.0),
            Err(MirrorError::NonPositiveStep(_))
        ));
    }

    #[test]
    fn zero_gradient_keeps_theta() {
        let g = BregmanGeometry::policy_kl(
            Family::Cauchy,
            1.0,
            &pmc_features(),
            &spread_states(10),
            InnerSolver::default(),
        )
        .unwrap();
        let th = vec![0.2; 8];
        assert_eq!(g.prox_step(&[0.0; 8], &th, 0.1).unwrap(), th);
        assert!(g
            .bregman_gradient(&[0.0; 8], &th, 0.1)
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
    }

    /// Brute-force argmax over a 2-D box; with a two-center map the KL prox
    /// is a genuinely 2-D problem.
    #[test]
    fn policy_kl_prox_matches_grid_search() {
        let fm = FeatureMap::radial_basis(vec![-1.0, 1.0], 1.0, 1.0).unwrap();
        let states = [-1.5, -0.5, 0.0, 0.7, 1.3];
        for family in [Family::Gaussian, Family::Cauchy] {
            let solver = InnerSolver {
                steps: 20_000,
                step_size_factor: 1.0,
                tol: 1e-12,
                ..InnerSolver::default()
            };
            let geom = BregmanGeometry::policy_kl(family, 1.0, &fm, &states, solver).unwrap();
            let theta = [0.3, -0.2];
            let g = [0.8, 0.5];
            let eta = 0.05;
            let x = geom.prox_step(&g, &theta, eta).unwrap();

            let objective = |p: &[f64]| dot(&g, p) - geom.bregman_div(p, &theta).unwrap() / eta;
            let (mut best, mut arg) = (f64::NEG_INFINITY, [0.0, 0.0]);
            let (mut lo, mut width) = ([theta[0] - 1.0, theta[1] - 1.0], 2.0);
            // Successive zooming grid search.
            for _ in 0..6 {
                let n = 200;
                for i in 0..=n {
                    for j in 0..=n {
                        let p = [
                            lo[0] + width * i as f64 / n as f64,
                            lo[1] + width * j as f64 / n as f64,
                        ];
                        let v = objective(&p);
                        if v > best {
                            best = v;
                            arg = p;
                        }
                    }
                }
                width /= 20.0;
                lo = [arg[0] - width / 2.0, arg[1] - width / 2.0];
            }
            let err = crate::linalg::dist(&x, &arg);
            assert!(err < 1e-3, "{family:?}: solver {x:?} grid {arg:?}");
        }
    }

    #[test]
    fn cauchy_prox_stays_in_trust_region() {
        // ‖g‖ far above 1/(2ση): the unconstrained objective has no maximum.
        let geom = BregmanGeometry::policy_kl(
            Family::Cauchy,
            1.0,
            &pmc_features(),
            &spread_states(12),
            InnerSolver::default(),
        )
        .unwrap();
        let theta = vec![0.1; 8];
        let g: Vec<f64> = (0..8).map(|i| 400.0 * (i as f64 - 3.5)).collect();
        let x = geom.prox_step(&g, &theta, 0.005).unwrap();
        let r = crate::linalg::dist(&x, &theta);
        assert!(r <= ZETA_PROBE_RADIUS * (1.0 + 1e-12), "{r}");
        assert!(r > 0.9 * ZETA_PROBE_RADIUS, "{r}");
        let b = geom.bregman_gradient(&g, &theta, 0.005).unwrap();
        assert!(dot(&g, &b) >= geom.zeta() * norm_sq(&b));
    }

    #[test]
    fn tiny_steps_follow_inverse_curvature() {
        // Small η: prox ≈ θ + η H⁻¹ g with H the KL curvature at θ.
        let fm = FeatureMap::radial_basis(vec![-1.0, 1.0], 1.0, 1.0).unwrap();
        let states = [-1.5, -0.5, 0.0, 0.7, 1.3];
        let solver = InnerSolver {
            steps: 20_000,
            step_size_factor: 1.0,
            tol: 1e-13,
            ..InnerSolver::default()
        };
        let geom = BregmanGeometry::policy_kl(Family::Cauchy, 1.0, &fm, &states, solver).unwrap();
        let mut h = [[0.0; 2]; 2];
        for &s in &states {
            let phi = fm.features(s);
            for i in 0..2 {
                for j in 0..2 {
                    h[i][j] += phi[i] * phi[j] / (2.0 * states.len() as f64);
                }
            }
        }
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        let g = [0.3, -0.4];
        let dir = [
            (h[1][1] * g[0] - h[0][1] * g[1]) / det,
            (-h[1][0] * g[0] + h[0][0] * g[1]) / det,
        ];
        let eta = 1e-3;
        let x = geom.prox_step(&g, &[0.0, 0.0], eta).unwrap();
        let pred = [eta * dir[0], eta * dir[1]];
        assert!(crate::linalg::dist(&x, &pred) < 1e-3 * eta.max(crate::linalg::norm(&pred)));
    }

    #[test]
    fn aggressive_inner_step_is_flagged() {
        let fm = FeatureMap::radial_basis(vec![0.0], 1.0, 1.0).unwrap();
        let solver = InnerSolver {
            steps: 50,
            step_size_factor: 50.0,
            tol: 1e-12,
            trust_radius: f64::INFINITY,
        };
        let geom = BregmanGeometry::policy_kl(Family::Gaussian, 0.2, &fm, &[0.0], solver).unwrap();
        let r = geom.prox_step(&[1.0], &[0.0], 0.5);
        assert!(
            matches!(r, Err(MirrorError::InnerSolverDiverged { .. })),
            "{r:?}"
        );
    }

    proptest! {
        #[test]
        fn strong_convexity_certificate(
            fam in prop_oneof![Just(Family::Gaussian), Just(Family::Cauchy)],
            x in proptest::collection::vec(-1.0f64..1.0, 8),
            dir in proptest::collection::vec(-1.0f64..1.0, 8),
            radius in 0.01f64..0.5,
        ) {
            let geom = BregmanGeometry::policy_kl(
                fam, 1.0, &pmc_features(), &spread_states(16), InnerSolver::default()).unwrap();
            let n = norm(&dir);
            prop_assume!(n > 1e-3);
            let y: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + radius * b / n).collect();
            let d = geom.bregman_div(&y, &x).unwrap();
            let gap = norm_sq(&sub(&y, &x));
            prop_assert!(d + 1e-12 >= 0.5 * geom.zeta() * gap, "D={} ζ={} gap={}", d, geom.zeta(), gap);
        }

        #[test]
        fn euclidean_is_exact(
            g in proptest::collection::vec(-5.0f64..5.0, 4),
            th in proptest::collection::vec(-5.0f64..5.0, 4),
            eta in 1e-4f64..1.0,
        ) {
            let e = BregmanGeometry::euclidean();
            let x = e.prox_step(&g, &th, eta).unwrap();
            for i in 0..4 {
                prop_assert_eq!(x[i].to_bits(), (th[i] + eta * g[i]).to_bits());
            }
            prop_assert_eq!(e.bregman_gradient(&g, &th, eta).unwrap(), g);
        }
    }
}
