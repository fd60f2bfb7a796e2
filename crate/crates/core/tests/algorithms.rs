use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use srma::algorithms::*;
use srma::analysis::{make_synthetic, SyntheticProblem};
use srma::envs::{ChainMdp, PathologicalMountainCar};
use srma::gradients::{pg_estimate, pg_estimate_is, GradientState};
use srma::linalg::{dist, dot, norm_sq};
use srma::mirror::{BregmanGeometry, GeometryKind, InnerSolver};
use srma::policies::{Family, FeatureMap, PolicyModel};
use srma::sampling::{rollout, sample_horizon};

fn iterates(alg: Algorithm, family: Family, beta: f64, seed: u64) -> Vec<Vec<f64>> {
    let cfg = AlgoConfig {
        beta,
        iterations: 100,
        geometry: GeometryKind::Euclidean,
        eval_every: 0,
        seed,
        ..AlgoConfig::new(alg, family)
    };
    let mut src = EnvProblem::from_config(PathologicalMountainCar::default(), &cfg).unwrap();
    run_with_source(
        &cfg,
        &mut src,
        DriverOptions {
            keep_iterates: true,
        },
    )
    .unwrap()
    .trajectory
    .unwrap()
}

#[test]
fn srma_with_unit_beta_reduces_to_sma_and_rpg() {
    for family in [Family::Gaussian, Family::Cauchy] {
        for seed in [1, 2, 3] {
            let a = iterates(Algorithm::Srma, family, 1.0, seed);
            let b = iterates(Algorithm::Sma, family, 1.0, seed);
            let c = iterates(Algorithm::Rpg, family, 1.0, seed);
            assert_eq!(a.len(), 101);
            for ((x, y), z) in a.iter().zip(&b).zip(&c) {
                assert!(dist(x, y) <= 1e-12 && dist(y, z) <= 1e-12);
            }
        }
    }
}

#[test]
fn tracking_changes_the_path_when_beta_below_one() {
    let a = iterates(Algorithm::Srma, Family::Cauchy, 0.5, 7);
    let b = iterates(Algorithm::Sma, Family::Cauchy, 0.5, 7);
    assert!(a.iter().zip(&b).any(|(x, y)| dist(x, y) > 1e-9));
}

#[test]
fn runs_are_reproducible() {
    let cfg = AlgoConfig {
        iterations: 30,
        eval_every: 10,
        eval_rollouts: 3,
        seed: 11,
        ..AlgoConfig::new(Algorithm::Srma, Family::Cauchy)
    };
    let a = srma_run(&cfg, PathologicalMountainCar::default()).unwrap();
    let b = srma_run(&cfg, PathologicalMountainCar::default()).unwrap();
    assert_eq!(a.theta, b.theta);
    assert_eq!(a.records.len(), 30);
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.return_estimate.to_bits(), y.return_estimate.to_bits());
        assert_eq!(x.eval, y.eval);
    }
}

#[test]
fn storm_runs_with_euclidean_steps() {
    let cfg = AlgoConfig {
        iterations: 20,
        eval_every: 0,
        seed: 5,
        ..AlgoConfig::new(Algorithm::Storm, Family::Cauchy)
    };
    let run = storm_run(&cfg, PathologicalMountainCar::default()).unwrap();
    assert_eq!(run.records.len(), 20);
    assert!(run.records.iter().all(|r| r.breg_grad_norm.is_finite()));
    let bad = AlgoConfig {
        geometry: GeometryKind::PolicyKl,
        ..cfg
    };
    assert!(storm_run(&bad, PathologicalMountainCar::default()).is_err());
}

#[test]
fn srma_decreases_synthetic_gradient() {
    let obj = make_synthetic(6, 4.0, 0.1, 3).unwrap();
    let cfg = AlgoConfig {
        eta: 0.05,
        beta: 0.2,
        iterations: 400,
        geometry: GeometryKind::Euclidean,
        eval_every: 0,
        seed: 9,
        theta0: Some(vec![1.5; 6]),
        ..AlgoConfig::new(Algorithm::Srma, Family::Gaussian)
    };
    let run = run_with_source(
        &cfg,
        &mut SyntheticProblem { obj },
        DriverOptions::default(),
    )
    .unwrap();
    let first = run.records[0].breg_grad_norm;
    let last = run.records.last().unwrap().breg_grad_norm;
    assert!(last < 0.2 * first, "{first} -> {last}");
}

// Exact discounted value of the chain under a linear Gaussian policy
// a = θs + σz: s' = (0.9 + 0.1θ)s + 0.1σz, so E[s_t²] obeys a scalar
// linear recursion.
fn chain_value(theta: f64, sigma: f64, gamma: f64) -> f64 {
    let rho = ChainMdp::DECAY + ChainMdp::GAIN * theta;
    let q = (ChainMdp::GAIN * sigma).powi(2);
    let c = ChainMdp::ACTION_COST;
    // E[s_t²] = ρ^{2t}·s0² + q(1−ρ^{2t})/(1−ρ²); reward = −(1 + cθ²)s² − cσ².
    let s0 = 1.0;
    let r2 = rho * rho;
    let sum_s2 = s0 * s0 / (1.0 - gamma * r2)
        + q / (1.0 - r2) * (1.0 / (1.0 - gamma) - 1.0 / (1.0 - gamma * r2));
    -(1.0 + c * theta * theta) * sum_s2 - c * sigma * sigma / (1.0 - gamma)
}

#[test]
fn chain_gradient_estimate_matches_closed_form() {
    let (theta, sigma, gamma) = (-0.5, 1.0, 0.9);
    let fm = FeatureMap::linear(10.0).unwrap();
    let p = PolicyModel::new(Family::Gaussian, vec![theta], sigma, fm).unwrap();
    let env = ChainMdp::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 100_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let t = sample_horizon(gamma, &mut rng);
        acc += pg_estimate(&rollout(&env, &p, t, &mut rng), &p, gamma).unwrap()[0];
    }
    let h = 1e-5;
    let exact =
        (chain_value(theta + h, sigma, gamma) - chain_value(theta - h, sigma, gamma)) / (2.0 * h);
    let est = acc / n as f64;
    assert!(
        (est - exact).abs() <= 0.05 * exact.abs(),
        "{est} vs {exact}"
    );
}

#[test]
fn tracker_recursion_by_hand() {
    let mut st = GradientState::new(2, 0.25);
    st.reset_to(&[1.0, 2.0]);
    st.update(&[3.0, 0.0], &[1.0, 1.0]).unwrap();
    // 0.75·([1,2] − [1,1]) + [3,0]
    assert_eq!(st.g_hat, vec![3.0, 0.75]);
}

#[test]
fn is_estimate_at_behavior_parameters_is_plain_estimate() {
    let env = PathologicalMountainCar::default();
    let fm = FeatureMap::evenly_spaced(-4.0, 3.709, 8, 1.0, 1.0).unwrap();
    let p = PolicyModel::new(Family::Cauchy, vec![0.1; 8], 1.0, fm).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let t = rollout(&env, &p, 50, &mut rng);
        let a = pg_estimate(&t, &p, 0.97).unwrap();
        let b = pg_estimate_is(&t, &p, p.theta(), 0.97, None).unwrap();
        assert!(dist(&a, &b) <= 1e-12 * (1.0 + norm_sq(&a).sqrt()));
    }
}

fn kl_geometry(family: Family) -> BregmanGeometry {
    let fm = FeatureMap::radial_basis(vec![-3.0, 0.0, 3.0], 1.0, 1.0).unwrap();
    let states: Vec<f64> = (0..25).map(|i| -4.0 + 8.0 * i as f64 / 24.0).collect();
    BregmanGeometry::policy_kl(family, 1.0, &fm, &states, InnerSolver::default()).unwrap()
}

fn vec3() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-5.0f64..5.0, 3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn euclidean_generalized_gradient_is_the_gradient(theta in vec3(), g1 in vec3(), g2 in vec3(), eta in 0.001f64..1.0) {
        let geom = BregmanGeometry::euclidean();
        let b1 = geom.bregman_gradient(&g1, &theta, eta).unwrap();
        let b2 = geom.bregman_gradient(&g2, &theta, eta).unwrap();
        prop_assert!((dot(&g1, &b1) - norm_sq(&b1)).abs() <= 1e-7 * (1.0 + norm_sq(&g1)));
        prop_assert!((dist(&b1, &b2) - dist(&g1, &g2)).abs() <= 1e-7 * (1.0 + dist(&g1, &g2)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn policy_kl_generalized_gradient_contracts(
        theta in vec3(), g1 in vec3(), g2 in vec3(), eta in 0.001f64..0.1, cauchy in any::<bool>()
    ) {
        let geom = kl_geometry(if cauchy { Family::Cauchy } else { Family::Gaussian });
        let theta: Vec<f64> = theta.iter().map(|v| v / 5.0).collect();
        let z = geom.zeta();
        let b1 = geom.bregman_gradient(&g1, &theta, eta).unwrap();
        let b2 = geom.bregman_gradient(&g2, &theta, eta).unwrap();
        prop_assert!(dot(&g1, &b1) >= z * norm_sq(&b1) - 1e-7);
        prop_assert!(dist(&b1, &b2) <= dist(&g1, &g2) / z + 1e-7);
    }
}
