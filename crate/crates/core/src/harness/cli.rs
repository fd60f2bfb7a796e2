//! Command-line entry point.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fmt_num, ExperimentConfig, HarnessError};
use crate::algorithms::{
    run_with_source, AlgoConfig, Algorithm, DriverOptions, EnvProblem, TrackerInit,
};
use crate::analysis::{
    exploration_tolerance, exploration_tolerance_closed_form, make_synthetic, smoothness_constants,
    tail_probability, tracking_error_probe_with, ProbeOptions,
};
use crate::envs::ChainMdp;
use crate::gradients::is_weights;
use crate::linalg::{dist, dot, norm_sq};
use crate::mirror::{BregmanGeometry, GeometryKind};
use crate::policies::{Family, FeatureMap, PolicyModel, ScoreBound};
use crate::sampling::rollout;

#[derive(Debug, Parser)]
#[command(
    name = "srma",
    version,
    about = "Policy search with heavy-tailed policies and stochastic recursive mirror ascent"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every (algorithm, seed) pair of a config and write CSVs.
    Run { config: PathBuf },
    /// Print the smoothness and variance constants as key=value lines.
    Constants {
        #[arg(long = "D")]
        d: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long = "UR")]
        ur: f64,
        #[arg(long)]
        gamma: f64,
        #[arg(long = "Cw", default_value_t = 1.0)]
        cw: f64,
    },
    /// Print the exploration tolerance curve as CSV.
    Lambda {
        #[arg(long)]
        family: Family,
        #[arg(long)]
        sigma: f64,
        /// Comma-separated half widths.
        #[arg(long = "c-grid", value_delimiter = ',', required = true)]
        c_grid: Vec<f64>,
        /// Feature norm at the evaluated state.
        #[arg(long = "D", default_value_t = 1.0)]
        d: f64,
    },
    /// Run the tracking-error probe from the `[probe]` table of a config.
    ProbeTracking { config: PathBuf },
    /// Run a quick invariant suite.
    Selftest,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// Like `println!`, but a closed stdout (e.g. piped into `head`) ends the
// command quietly instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {
        if writeln!(std::io::stdout(), $($arg)*).is_err() {
            return Ok(0);
        }
    };
}

fn dispatch(cmd: Command) -> Result<i32, HarnessError> {
    match cmd {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = super::run_experiment(&cfg)?;
            let diverged = out.runs.iter().filter(|r| r.run.diverged()).count();
            out!("runs={} diverged={}", out.runs.len(), diverged);
            out!("raw={}", out.raw.display());
            out!("aggregate={}", out.aggregate.display());
            out!("summary={}", out.summary.display());
            Ok(0)
        }
        Command::Constants {
            d,
            sigma,
            ur,
            gamma,
            cw,
        } => match smoothness_constants(d, sigma, ur, gamma, cw) {
            Ok(c) => {
                for line in c.to_lines() {
                    out!("{line}");
                }
                Ok(0)
            }
            Err(e) => {
                eprintln!("error: {e}");
                Ok(2)
            }
        },
        Command::Lambda {
            family,
            sigma,
            c_grid,
            d,
        } => lambda_curve(family, sigma, &c_grid, d),
        Command::ProbeTracking { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let Some(p) = cfg.probe else {
                eprintln!("error: {} has no [probe] table", config.display());
                return Ok(2);
            };
            let obj = match make_synthetic(p.d, p.l, p.m0, p.objective_seed) {
                Ok(o) => o,
                Err(e) => {
                    eprintln!("error: {e}");
                    return Ok(2);
                }
            };
            let opts = ProbeOptions {
                replicates: p.replicates,
                theta0: p.theta0.map(|v| vec![v; p.d]),
                tracker_init: TrackerInit::Zero,
            };
            out!("beta,k,eps,std_err");
            for &beta in &p.betas {
                if !(beta > 0.0 && beta <= 1.0) {
                    eprintln!("error: probe beta must lie in (0, 1], got {beta}");
                    return Ok(2);
                }
                let probe =
                    tracking_error_probe_with(&obj, beta, p.eta, p.iterations, p.seed, &opts);
                for (k, (e, s)) in probe.eps.iter().zip(&probe.std_err).enumerate() {
                    out!(
                        "{},{},{},{}",
                        fmt_num(beta),
                        k + 1,
                        fmt_num(*e),
                        fmt_num(*s)
                    );
                }
            }
            Ok(0)
        }
        Command::Selftest => {
            let mut failed = 0;
            for (name, check) in selftest_checks() {
                match check() {
                    Ok(()) => out!("selftest {name}: ok"),
                    Err(msg) => {
                        failed += 1;
                        out!("selftest {name}: FAIL ({msg})");
                    }
                }
            }
            Ok(i32::from(failed > 0))
        }
    }
}

fn lambda_curve(family: Family, sigma: f64, grid: &[f64], d: f64) -> Result<i32, HarnessError> {
    let features = match FeatureMap::linear(d) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(2);
        }
    };
    let policy = match PolicyModel::new(family, vec![0.0], sigma, features) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(2);
        }
    };
    out!("c,lambda,closed_form,score_bound_times_tail");
    for &c in grid {
        let lam = match exploration_tolerance(&policy, d, c) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("error: c={c}: {e}");
                return Ok(2);
            }
        };
        let closed = exploration_tolerance_closed_form(family, sigma, d, c);
        let bound = match policy.score_bound() {
            ScoreBound::Bounded(b) => fmt_num(b * tail_probability(family, sigma, c)),
            ScoreBound::Unbounded => String::new(),
        };
        out!(
            "{},{},{},{}",
            fmt_num(c),
            fmt_num(lam),
            fmt_num(closed),
            bound
        );
    }
    Ok(0)
}

type Check = (&'static str, fn() -> Result<(), String>);

fn selftest_checks() -> Vec<Check> {
    vec![
        ("cauchy_score_bound", check_score_bound),
        ("constants_examples", check_constants),
        ("lambda_closed_form", check_lambda),
        ("is_weight_unit_mean", check_is_weights),
        ("generalized_gradient_contracts", check_prox_contracts),
        ("reduction_chain", check_reduction_chain),
        ("tracking_contraction", check_tracking),
    ]
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn check_score_bound() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let fm = FeatureMap::evenly_spaced(-4.0, 3.709, 8, 1.0, 1.0).map_err(|e| e.to_string())?;
    for sigma in [0.5, 1.0, 2.0] {
        for _ in 0..20_000 {
            let theta: Vec<f64> = (0..8).map(|_| rng.random_range(-10.0..10.0)).collect();
            let p = PolicyModel::new(Family::Cauchy, theta, sigma, fm.clone())
                .map_err(|e| e.to_string())?;
            let s = rng.random_range(-4.0..3.709);
            let a = rng.random_range(-50.0..50.0);
            let n = norm_sq(&p.score(s, a)).sqrt();
            ensure(n <= 1.0 / sigma + 1e-12, || {
                format!("‖score‖ = {n} at σ = {sigma}")
            })?;
        }
    }
    Ok(())
}

fn check_constants() -> Result<(), String> {
    let c = smoothness_constants(1.0, 1.0, 1.0, 0.0, 1.0).map_err(|e| e.to_string())?;
    ensure(c.l_pi == 10.0 && c.l == 11.0, || {
        format!("L_pi={} L={}", c.l_pi, c.l)
    })?;
    let c = smoothness_constants(1.0, 1.0, 1.0, 0.97, 1.0).map_err(|e| e.to_string())?;
    ensure((c.e_t2 - 8_688.885_052_570_071).abs() < 1e-6, || {
        format!("E_T2={}", c.e_t2)
    })
}

fn check_lambda() -> Result<(), String> {
    let p = PolicyModel::new(
        Family::Gaussian,
        vec![0.0],
        1.0,
        FeatureMap::linear(1.0).unwrap(),
    )
    .unwrap();
    for c in [0.5, 1.0, 2.0, 4.0] {
        let lam = exploration_tolerance(&p, 1.0, c).map_err(|e| e.to_string())?;
        let want = exploration_tolerance_closed_form(Family::Gaussian, 1.0, 1.0, c);
        ensure((lam - want).abs() <= 1e-8, || {
            format!("c={c}: {lam} vs {want}")
        })?;
    }
    Ok(())
}

fn check_is_weights() -> Result<(), String> {
    // One-step weights under the behavior policy average to one.
    let fm = FeatureMap::linear(10.0).unwrap();
    let p = PolicyModel::new(Family::Cauchy, vec![0.5], 1.0, fm).unwrap();
    let env = ChainMdp::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 200_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let t = rollout(&env, &p, 1, &mut rng);
        acc += is_weights(&t, &p, &[0.2], None)
            .map_err(|e| e.to_string())?
            .w[0];
    }
    let mean = acc / n as f64;
    ensure((mean - 1.0).abs() < 0.02, || format!("E[w] = {mean}"))
}

fn check_prox_contracts() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fm = FeatureMap::evenly_spaced(-4.0, 3.709, 8, 1.0, 1.0).unwrap();
    let states: Vec<f64> = (0..40).map(|i| -4.0 + 7.709 * i as f64 / 39.0).collect();
    let geoms = [
        BregmanGeometry::euclidean(),
        BregmanGeometry::policy_kl(Family::Gaussian, 1.0, &fm, &states, Default::default())
            .map_err(|e| e.to_string())?,
    ];
    for geom in &geoms {
        let z = geom.zeta();
        for _ in 0..200 {
            let theta: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g1: Vec<f64> = (0..8).map(|_| rng.random_range(-5.0..5.0)).collect();
            let g2: Vec<f64> = (0..8).map(|_| rng.random_range(-5.0..5.0)).collect();
            let eta = rng.random_range(0.001..0.1);
            let b1 = geom
                .bregman_gradient(&g1, &theta, eta)
                .map_err(|e| e.to_string())?;
            let b2 = geom
                .bregman_gradient(&g2, &theta, eta)
                .map_err(|e| e.to_string())?;
            ensure(dot(&g1, &b1) >= z * norm_sq(&b1) - 1e-7, || {
                "prop1 violated".into()
            })?;
            ensure(dist(&b1, &b2) <= dist(&g1, &g2) / z + 1e-7, || {
                "prop2 violated".into()
            })?;
        }
    }
    Ok(())
}

fn check_reduction_chain() -> Result<(), String> {
    let run = |alg: Algorithm, beta: f64| {
        let cfg = AlgoConfig {
            beta,
            gamma: 0.9,
            iterations: 50,
            geometry: GeometryKind::Euclidean,
            eval_every: 0,
            seed: 4,
            ..AlgoConfig::new(alg, Family::Gaussian)
        };
        let mut src =
            EnvProblem::from_config(ChainMdp::default(), &cfg).map_err(|e| e.to_string())?;
        run_with_source(
            &cfg,
            &mut src,
            DriverOptions {
                keep_iterates: true,
            },
        )
        .map(|r| r.trajectory.unwrap_or_default())
        .map_err(|e| e.to_string())
    };
    let a = run(Algorithm::Srma, 1.0)?;
    let b = run(Algorithm::Sma, 1.0)?;
    let c = run(Algorithm::Rpg, 1.0)?;
    for ((x, y), w) in a.iter().zip(&b).zip(&c) {
        ensure(dist(x, y) <= 1e-12 && dist(y, w) <= 1e-12, || {
            "iterates differ".into()
        })?;
    }
    Ok(())
}

fn check_tracking() -> Result<(), String> {
    let obj = make_synthetic(4, 3.0, 0.0, 0).map_err(|e| e.to_string())?;
    let probe = tracking_error_probe_with(
        &obj,
        0.5,
        0.0,
        10,
        0,
        &ProbeOptions {
            replicates: 2,
            ..Default::default()
        },
    );
    for w in probe.eps.windows(2) {
        ensure(w[1] <= 0.25 * w[0] * (1.0 + 1e-9), || {
            format!("{} -> {}", w[0], w[1])
        })?;
    }
    Ok(())
}
