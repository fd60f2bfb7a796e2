//! Location-scale policies over a scalar action.
//!
//! Both families put their location at the linear mean `φ(s)ᵀθ` and share
//! a fixed scale `σ`. The Gaussian score grows linearly in the residual;
//! the Cauchy score `2z/(1+z²)·φ(s)/σ` with `z = (a − φ(s)ᵀθ)/σ` is
//! uniformly bounded by `‖φ(s)‖/σ ≤ D/σ`, since `2z/(1+z²) ≤ 1`.

use std::f64::consts::PI;

use rand::distr::Open01;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::PolicyError;
use crate::linalg::dot;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
enum FeatureKind {
    RadialBasis {
        centers: Vec<f64>,
        bandwidth: f64,
    },
    /// `φ(s) = [s]`, used by the linear-quadratic oracle environment.
    Linear,
}

/// Bounded state features. Every output is rescaled by
/// `D / max(D, ‖raw‖)`, so `‖φ(s)‖ ≤ D` holds exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    kind: FeatureKind,
    norm_cap: f64,
}

impl FeatureMap {
    pub fn radial_basis(
        centers: Vec<f64>,
        bandwidth: f64,
        norm_cap: f64,
    ) -> Result<Self, PolicyError> {
        if centers.is_empty() {
            return Err(PolicyError::InvalidFeatures("no centers".into()));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(PolicyError::InvalidFeatures(format!(
                "bandwidth {bandwidth}"
            )));
        }
        if !centers.iter().all(|c| c.is_finite()) {
            return Err(PolicyError::InvalidFeatures("non-finite center".into()));
        }
        Self::check_cap(norm_cap)?;
        Ok(Self {
            kind: FeatureKind::RadialBasis { centers, bandwidth },
            norm_cap,
        })
    }

    /// `n` centers evenly spaced over `[lo, hi]` (endpoints included).
    pub fn evenly_spaced(
        lo: f64,
        hi: f64,
        n: usize,
        bandwidth: f64,
        norm_cap: f64,
    ) -> Result<Self, PolicyError> {
        let centers = match n {
            0 => Vec::new(),
            1 => vec![0.5 * (lo + hi)],
            _ => (0..n)
                .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                .collect(),
        };
        Self::radial_basis(centers, bandwidth, norm_cap)
    }

    pub fn linear(norm_cap: f64) -> Result<Self, PolicyError> {
        Self::check_cap(norm_cap)?;
        Ok(Self {
            kind: FeatureKind::Linear,
            norm_cap,
        })
    }

    fn check_cap(norm_cap: f64) -> Result<(), PolicyError> {
        if norm_cap > 0.0 && norm_cap.is_finite() {
            Ok(())
        } else {
            Err(PolicyError::InvalidFeatures(format!("norm cap {norm_cap}")))
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            FeatureKind::RadialBasis { centers, .. } => centers.len(),
            FeatureKind::Linear => 1,
        }
    }

    pub fn norm_cap(&self) -> f64 {
        self.norm_cap
    }

    pub fn features(&self, s: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.features_into(s, &mut out);
        out
    }

    pub fn features_into(&self, s: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        match &self.kind {
            FeatureKind::RadialBasis { centers, bandwidth } => {
                let inv = 1.0 / (2.0 * bandwidth * bandwidth);
                for (o, c) in out.iter_mut().zip(centers) {
                    let d = s - c;
                    *o = (-d * d * inv).exp();
                }
            }
            FeatureKind::Linear => out[0] = s,
        }
        let raw = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if raw > self.norm_cap {
            let k = self.norm_cap / raw;
            out.iter_mut().for_each(|v| *v *= k);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Cauchy,
}

/// Score-norm certificate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreBound {
    Bounded(f64),
    Unbounded,
}

impl Family {
    /// Log density of the residual `r = a − mean` at scale `sigma`.
    pub fn log_pdf(self, r: f64, sigma: f64) -> f64 {
        let z = r / sigma;
        match self {
            Family::Gaussian => -0.5 * z * z - sigma.ln() - LN_SQRT_2PI,
            Family::Cauchy => -(PI * sigma).ln() - z.ln_1p_sq(),
        }
    }

    /// Derivative of the log density with respect to the location; the
    /// score in θ is this coefficient times `φ(s)`.
    pub fn score_coeff(self, r: f64, sigma: f64) -> f64 {
        let z = r / sigma;
        match self {
            Family::Gaussian => z / sigma,
            Family::Cauchy => 2.0 * z / (1.0 + z * z) / sigma,
        }
    }

    /// Standardized draw (location 0, scale 1).
    pub fn sample_standard<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            Family::Gaussian => rng.sample(StandardNormal),
            Family::Cauchy => {
                let u: f64 = rng.sample(Open01);
                (PI * (u - 0.5)).tan()
            }
        }
    }

    /// KL divergence between two members that differ only by a location
    /// shift `delta` at common scale `sigma`.
    pub fn kl_shift(self, delta: f64, sigma: f64) -> f64 {
        match self {
            Family::Gaussian => delta * delta / (2.0 * sigma * sigma),
            Family::Cauchy => (delta * delta / (4.0 * sigma * sigma)).ln_1p(),
        }
    }

    /// `d/dδ` of [`Family::kl_shift`].
    pub fn kl_shift_derivative(self, delta: f64, sigma: f64) -> f64 {
        match self {
            Family::Gaussian => delta / (sigma * sigma),
            Family::Cauchy => 2.0 * delta / (4.0 * sigma * sigma + delta * delta),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Cauchy => "cauchy",
        }
    }
}

trait Ln1pSq {
    fn ln_1p_sq(self) -> f64;
}

impl Ln1pSq for f64 {
    /// `ln(1 + x²)` without overflow for large |x|.
    fn ln_1p_sq(self) -> f64 {
        let a = self.abs();
        if a > 1e150 {
            2.0 * a.ln()
        } else {
            (a * a).ln_1p()
        }
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Family::Gaussian),
            "cauchy" => Ok(Family::Cauchy),
            other => Err(format!(
                "unknown policy family '{other}' (expected gaussian|cauchy)"
            )),
        }
    }
}

/// A linear-mean policy `π_θ(a|s)` with fixed scale. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    family: Family,
    theta: Vec<f64>,
    sigma: f64,
    features: FeatureMap,
}

impl PolicyModel {
    pub fn new(
        family: Family,
        theta: Vec<f64>,
        sigma: f64,
        features: FeatureMap,
    ) -> Result<Self, PolicyError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(PolicyError::InvalidSigma(sigma));
        }
        if theta.len() != features.dim() {
            return Err(PolicyError::DimensionMismatch {
                expected: features.dim(),
                got: theta.len(),
            });
        }
        if !theta.iter().all(|t| t.is_finite()) {
            return Err(PolicyError::NonFiniteTheta);
        }
        Ok(Self {
            family,
            theta,
            sigma,
            features,
        })
    }

    /// Same family, scale and features, different parameters.
    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self, PolicyError> {
        Self::new(self.family, theta, self.sigma, self.features.clone())
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn mean(&self, s: f64) -> f64 {
        dot(&self.features.features(s), &self.theta)
    }

    pub fn log_density(&self, s: f64, a: f64) -> f64 {
        self.family.log_pdf(a - self.mean(s), self.sigma)
    }

    /// Raw (unclipped) action draw.
    pub fn sample_action<R: Rng + ?Sized>(&self, s: f64, rng: &mut R) -> f64 {
        self.mean(s) + self.sigma * self.family.sample_standard(rng)
    }

    /// `∇_θ log π_θ(a|s)`.
    pub fn score(&self, s: f64, a: f64) -> Vec<f64> {
        let phi = self.features.features(s);
        let c = self
            .family
            .score_coeff(a - dot(&phi, &self.theta), self.sigma);
        phi.into_iter().map(|p| c * p).collect()
    }

    pub fn score_bound(&self) -> ScoreBound {
        match self.family {
            Family::Cauchy => ScoreBound::Bounded(self.features.norm_cap() / self.sigma),
            Family::Gaussian => ScoreBound::Unbounded,
        }
    }

    /// Mean over `states` of `KL(π_{θ1}(·|s) ‖ π_{θ2}(·|s))`, using this
    /// policy's family, scale and features.
    pub fn kl_same_scale(
        &self,
        theta1: &[f64],
        theta2: &[f64],
        states: &[f64],
    ) -> Result<f64, PolicyError> {
        if states.is_empty() {
            return Err(PolicyError::EmptyStates);
        }
        let d = self.features.dim();
        for t in [theta1, theta2] {
            if t.len() != d {
                return Err(PolicyError::DimensionMismatch {
                    expected: d,
                    got: t.len(),
                });
            }
        }
        let diff: Vec<f64> = theta1.iter().zip(theta2).map(|(a, b)| a - b).collect();
        let mut phi = vec![0.0; d];
        let mut total = 0.0;
        for &s in states {
            self.features.features_into(s, &mut phi);
            total += self.family.kl_shift(dot(&phi, &diff), self.sigma);
        }
        Ok(total / states.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;
    use crate::quadrature::adaptive_simpson;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(family: Family, sigma: f64) -> PolicyModel {
        let fm = FeatureMap::radial_basis(vec![0.0], 1.0, 1.0).unwrap();
        PolicyModel::new(family, vec![0.7], sigma, fm).unwrap()
    }

    fn pmc_features() -> FeatureMap {
        FeatureMap::evenly_spaced(-4.0, 3.709, 8, 1.0, 1.0).unwrap()
    }

    #[test]
    fn feature_at_center_is_one() {
        let fm = FeatureMap::radial_basis(vec![0.5], 1.0, 1.0).unwrap();
        assert_eq!(fm.features(0.5), vec![1.0]);
    }

    #[test]
    fn two_center_bumps() {
        let fm = FeatureMap::radial_basis(vec![-1.0, 1.0], 1.0, 10.0).unwrap();
        let phi = fm.features(0.0);
        let e = (-0.5f64).exp();
        assert!((phi[0] - e).abs() < 1e-15 && (phi[1] - e).abs() < 1e-15);
    }

    #[test]
    fn norm_cap_holds_over_range() {
        let fm = pmc_features();
        assert_eq!(fm.dim(), 8);
        for i in 0..=10_000 {
            let s = -6.0 + 12.0 * i as f64 / 10_000.0;
            assert!(norm(&fm.features(s)) <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(FeatureMap::radial_basis(vec![], 1.0, 1.0).is_err());
        assert!(FeatureMap::radial_basis(vec![0.0], 0.0, 1.0).is_err());
        let fm = pmc_features();
        assert!(matches!(
            PolicyModel::new(Family::Cauchy, vec![0.0; 8], 0.0, fm.clone()),
            Err(PolicyError::InvalidSigma(_))
        ));
        assert!(matches!(
            PolicyModel::new(Family::Cauchy, vec![0.0; 3], 1.0, fm.clone()),
            Err(PolicyError::DimensionMismatch { .. })
        ));
        assert!(PolicyModel::new(Family::Cauchy, vec![f64::NAN; 8], 1.0, fm).is_err());
    }

    #[test]
    fn log_density_peaks() {
        let c = single(Family::Cauchy, 1.0);
        let m = c.mean(0.0);
        assert!((c.log_density(0.0, m) - (1.0 / PI).ln()).abs() < 1e-14);
        assert!((c.log_density(0.0, m) + 1.144_729_885_849_4).abs() < 1e-12);

        let g = single(Family::Gaussian, 1.0);
        assert!((g.log_density(0.0, m) + 0.918_938_533_204_672_8).abs() < 1e-14);

        let c2 = single(Family::Cauchy, 2.0);
        assert!((c2.log_density(0.0, m + 2.0) + (4.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn log_density_integrates_to_one() {
        for &sigma in &[0.5, 1.0, 2.0] {
            let g = single(Family::Gaussian, sigma);
            let m = g.mean(0.0);
            let mass = adaptive_simpson(
                |a| g.log_density(0.0, a).exp(),
                m - 10.0 * sigma,
                m + 10.0 * sigma,
                1e-12,
            )
            .unwrap();
            // ±10σ leaves 2·Φ(−10) ≈ 1.5e−23 outside.
            assert!((mass - 1.0).abs() < 1e-6, "gaussian mass {mass}");

            let c = single(Family::Cauchy, sigma);
            let half = 1e4 * sigma;
            let inner = crate::quadrature::integrate_geometric_panels(
                |a| c.log_density(0.0, m + a).exp(),
                0.0,
                sigma,
                half,
                1e-11,
            )
            .unwrap();
            // Both tails beyond ±half, from the arctangent CDF.
            let tail = 2.0 * (0.5 - (half / sigma).atan() / PI);
            let mass = 2.0 * inner + tail;
            assert!((mass - 1.0).abs() < 1e-6, "cauchy mass {mass}");
        }
    }

    #[test]
    fn tiny_scale_collapses_to_mean() {
        let p = single(Family::Gaussian, 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut draws: Vec<f64> = (0..101).map(|_| p.sample_action(0.0, &mut rng)).collect();
        draws.sort_by(f64::total_cmp);
        assert!((draws[50] - p.mean(0.0)).abs() < 1e-6);
    }

    #[test]
    fn cauchy_sample_quartiles() {
        let p = single(Family::Cauchy, 1.0);
        let m = p.mean(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let mut draws: Vec<f64> = (0..n).map(|_| p.sample_action(0.0, &mut rng)).collect();
        let outside = draws.iter().filter(|a| (*a - m).abs() > 1.0).count() as f64 / n as f64;
        draws.sort_by(f64::total_cmp);
        let median = draws[n / 2];
        assert!((median - m).abs() < 0.01, "median {median}");
        assert!((outside - 0.5).abs() < 0.01, "outside fraction {outside}");
    }

    #[test]
    fn score_vanishes_at_mean() {
        for fam in [Family::Gaussian, Family::Cauchy] {
            let p = PolicyModel::new(
                fam,
                vec![0.3, -1.0, 0.2, 0.0, 1.1, -0.4, 0.9, 0.5],
                0.8,
                pmc_features(),
            )
            .unwrap();
            for s in [-3.0, 0.0, 2.6] {
                assert!(p.score(s, p.mean(s)).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn cauchy_score_attains_bound_at_unit_residual() {
        let p = single(Family::Cauchy, 2.0);
        let s = 0.0;
        let sc = p.score(s, p.mean(s) + 2.0);
        assert!((sc[0] - 0.5).abs() < 1e-15);
        assert_eq!(p.score_bound(), ScoreBound::Bounded(0.5));
    }

    #[test]
    fn score_bounds() {
        let fm = FeatureMap::radial_basis(vec![0.0], 1.0, 1.0).unwrap();
        let c = |s| PolicyModel::new(Family::Cauchy, vec![0.0], s, fm.clone()).unwrap();
        assert_eq!(c(1.0).score_bound(), ScoreBound::Bounded(1.0));
        assert_eq!(c(0.5).score_bound(), ScoreBound::Bounded(2.0));
        let g = PolicyModel::new(Family::Gaussian, vec![0.0], 0.3, fm).unwrap();
        assert_eq!(g.score_bound(), ScoreBound::Unbounded);
    }

    #[test]
    fn kl_closed_forms() {
        let fm = FeatureMap::radial_basis(vec![0.0], 1.0, 1.0).unwrap();
        let g = PolicyModel::new(Family::Gaussian, vec![0.0], 1.0, fm.clone()).unwrap();
        assert_eq!(g.kl_same_scale(&[1.0], &[1.0], &[0.0]).unwrap(), 0.0);
        assert!((g.kl_same_scale(&[1.0], &[0.0], &[0.0]).unwrap() - 0.5).abs() < 1e-15);
        let c = PolicyModel::new(Family::Cauchy, vec![0.0], 1.0, fm).unwrap();
        assert!((c.kl_same_scale(&[2.0], &[0.0], &[0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(
            c.kl_same_scale(&[2.0], &[0.0], &[]),
            Err(PolicyError::EmptyStates)
        );
    }

    /// Quadrature of ∫ p log(p/q) is the reference for both closed forms.
    #[test]
    fn kl_matches_quadrature() {
        for (fam, sigma, delta) in [
            (Family::Cauchy, 1.0f64, 2.0f64),
            (Family::Cauchy, 0.5, 0.3),
            (Family::Cauchy, 2.0, 5.0),
            (Family::Gaussian, 1.0, 1.0),
            (Family::Gaussian, 0.7, 2.5),
        ] {
            let half = match fam {
                Family::Cauchy => 1e4 * sigma,
                Family::Gaussian => 10.0 * sigma + delta.abs(),
            };
            let integrand = |a: f64| {
                let lp = fam.log_pdf(a, sigma);
                let lq = fam.log_pdf(a - delta, sigma);
                lp.exp() * (lp - lq)
            };
            let pos =
                crate::quadrature::integrate_geometric_panels(integrand, 0.0, sigma, half, 1e-10)
                    .unwrap();
            let neg = crate::quadrature::integrate_geometric_panels(
                |a| integrand(-a),
                0.0,
                sigma,
                half,
                1e-10,
            )
            .unwrap();
            let quad = pos + neg;
            let closed = fam.kl_shift(delta, sigma);
            assert!(
                (quad - closed).abs() < 1e-6,
                "{fam:?} σ={sigma} Δ={delta}: {quad} vs {closed}"
            );
        }
    }

    proptest! {
        #[test]
        fn score_matches_finite_difference(
            fam in prop_oneof![Just(Family::Gaussian), Just(Family::Cauchy)],
            theta in proptest::collection::vec(-2.0f64..2.0, 8),
            s in -4.0f64..3.709,
            z in -5.0f64..5.0,
            sigma in 0.3f64..3.0,
        ) {
            let p = PolicyModel::new(fam, theta.clone(), sigma, pmc_features()).unwrap();
            let a = p.mean(s) + sigma * z;
            let sc = p.score(s, a);
            let h = 1e-5;
            for i in 0..8 {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[i] += h;
                tm[i] -= h;
                let fd = (p.with_theta(tp).unwrap().log_density(s, a)
                    - p.with_theta(tm).unwrap().log_density(s, a)) / (2.0 * h);
                let scale = sc[i].abs().max(1e-3);
                prop_assert!((fd - sc[i]).abs() / scale < 1e-6, "i={} fd={} score={}", i, fd, sc[i]);
            }
        }

        #[test]
        fn kl_nonnegative_and_zero_only_at_equality(
            fam in prop_oneof![Just(Family::Gaussian), Just(Family::Cauchy)],
            t1 in proptest::collection::vec(-2.0f64..2.0, 8),
            t2 in proptest::collection::vec(-2.0f64..2.0, 8),
            states in proptest::collection::vec(-4.0f64..3.709, 1..10),
        ) {
            let p = PolicyModel::new(fam, t1.clone(), 1.0, pmc_features()).unwrap();
            let kl = p.kl_same_scale(&t1, &t2, &states).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert_eq!(p.kl_same_scale(&t1, &t1, &states).unwrap(), 0.0);
            if t1 != t2 {
                // Gaussian bumps are strictly positive, so some state sees a shift.
                prop_assert!(kl > 0.0);
            }
        }
    }
}
