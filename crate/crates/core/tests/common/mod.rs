//! Finite-difference oracles shared by the numerics and acceptance suites.
#![allow(dead_code)]

use crpcl::adapter::{AdapterBank, BaseModel, LossWeights, Sample};
use crpcl::ewc::{ConsolidationState, FisherDiagonal};
use crpcl::linalg::Matrix;
use crpcl::loss::{soft_dice_loss, soft_dice_prob_grad};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
/// Components smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR))
        .fold(0.0, f64::max)
}

pub fn central_difference(theta: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            x[i] = theta[i] + STEP;
            let up = f(&x);
            x[i] = theta[i] - STEP;
            let down = f(&x);
            x[i] = theta[i];
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Adapter loss (CE + Dice) on a random 4×4-pixel instance.
pub fn adapter_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (d_out, d_in, rank) = (4, 5, 2);
    let base = BaseModel::random(d_out, d_in, seed);
    let mut bank = AdapterBank::new(base, rank, 4.0, seed).unwrap();
    bank.allocate(0).unwrap();
    let mut theta: Vec<f64> = bank.adapter(0).unwrap().params();
    theta.iter_mut().for_each(|t| *t = r.random_range(-0.3..0.3));
    bank.adapter_mut(0).unwrap().set_params(&theta).unwrap();
    let samples: Vec<Sample> = (0..3)
        .map(|_| Sample {
            features: uniform_matrix(&mut r, 16, d_in, 1.0),
            mask: (0..16).map(|_| u8::from(r.random_bool(0.4))).collect(),
        })
        .collect();
    let weights = LossWeights::default();
    let analytic = bank.gradients(0, &samples, weights).unwrap().flat();
    let numeric = central_difference(&theta, |t| {
        let mut b = bank.clone();
        b.adapter_mut(0).unwrap().set_params(t).unwrap();
        b.gradients(0, &samples, weights).unwrap().loss
    });
    relative_error(&analytic, &numeric)
}

pub fn penalty_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = 12;
    let fisher: Vec<f64> = (0..n).map(|_| r.random_range(0.0..3.0)).collect();
    let anchor: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let theta: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut state = ConsolidationState::new(1.0);
    state
        .consolidate(
            FisherDiagonal {
                values: fisher,
                sample_count: 1,
            },
            1,
            &anchor,
        )
        .unwrap();
    let analytic = state.penalty_gradient(&theta).unwrap();
    let numeric = central_difference(&theta, |t| state.penalty(t).unwrap());
    relative_error(&analytic, &numeric)
}

pub fn dice_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let p = 16;
    let probs: Vec<f64> = (0..p).map(|_| r.random_range(0.05..0.95)).collect();
    let mask: Vec<u8> = (0..p).map(|_| u8::from(r.random_bool(0.5))).collect();
    let analytic = soft_dice_prob_grad(&probs, &mask);
    let numeric = central_difference(&probs, |q| soft_dice_loss(q, &mask));
    relative_error(&analytic, &numeric)
}

pub fn random_values(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

pub mod cli {
    use std::collections::BTreeMap;
    use std::path::{Path, PathBuf};
    use std::process::{Command, Output};

    pub fn run(out: &Path, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_crpcl"))
            .arg("--out")
            .arg(out)
            .args(["--stamp", "fixed"])
            .args(args)
            .output()
            .expect("binary runs")
    }

    /// Keeps the experiment subcommands quick.
    pub const SMALL: &[&str] = &[
        "--set",
        "experiments.seeds=2",
        "--set",
        "experiments.trials=100",
        "--set",
        "experiments.grid=[{delta=0.43,sigma_intra=0.05,sigma_inter=0.10},{delta=0.0,sigma_intra=0.05,sigma_inter=0.05}]",
        "--set",
        "world.train_size=16",
        "--set",
        "world.test_size=8",
    ];

    pub const SUBCOMMANDS: &[&str] = &[
        "gen-stream",
        "discover",
        "train",
        "evaluate",
        "ablate",
        "orders",
        "merge",
        "prop1",
        "sweep-alpha",
        "sweep-lambda",
    ];

    /// Runs `subcommand` with the small settings.
    pub fn run_small(out: &Path, subcommand: &str) -> Output {
        let mut args: Vec<&str> = SMALL.to_vec();
        args.push(subcommand);
        run(out, &args)
    }

    /// Every output file except wall-clock timings, keyed by relative path.
    pub fn data_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else if p.file_name().is_some_and(|n| n != "timing.json") {
                    out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
                }
            }
        }
        out
    }
}
