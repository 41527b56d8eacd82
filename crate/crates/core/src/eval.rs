//! Offline experiments: partition scoring, the clustering-consistency and
//! Chernoff-bound Monte Carlo, α sweeps, module ablations, task-order
//! sensitivity, and Fisher-weighted adapter merging.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crp::{CrpState, DecisionMode};
use crate::embedding::{generate_synthetic_stream, EmbeddingSource, SyntheticStreamSpec, TaskEmbedding};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::similarity::{chernoff_bound, SimilarityModel};
use crate::toy::{generate_toy_stream, ToyTask, ToyWorldConfig};
use crate::trainer::{
    average_dice, forgetting_rate, run_stream, task_dice, train_adapter, ContinualLearner, Routing, TrainConfig,
};

/// Guard in the Fisher-weighted merge denominator.
pub const MERGE_EPSILON: f64 = 1e-12;
pub const DEFAULT_READAPT_EPOCHS: usize = 5;
pub const MIN_PROP1_TRIALS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionScore {
    pub exact_match: bool,
    pub rand_index: f64,
    pub discovered_k: usize,
    pub true_k: usize,
}

fn distinct(labels: &[usize]) -> usize {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v.len()
}

/// Exact match up to relabeling, plus the unadjusted Rand index.
pub fn score_partition(assigned: &[usize], truth: &[usize]) -> Result<PartitionScore> {
    if assigned.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            found: assigned.len(),
        });
    }
    if assigned.is_empty() {
        return Err(Error::Precondition("cannot score an empty partition".into()));
    }
    let n = assigned.len();
    let mut agree = 0usize;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            pairs += 1;
            agree += usize::from((assigned[i] == assigned[j]) == (truth[i] == truth[j]));
        }
    }
    let rand_index = if pairs == 0 { 1.0 } else { agree as f64 / pairs as f64 };
    let mut forward = BTreeMap::new();
    let mut backward = BTreeMap::new();
    let exact_match = assigned
        .iter()
        .zip(truth)
        .all(|(&a, &t)| *forward.entry(a).or_insert(t) == t && *backward.entry(t).or_insert(a) == a);
    Ok(PartitionScore {
        exact_match,
        rand_index,
        discovered_k: distinct(assigned),
        true_k: distinct(truth),
    })
}

/// Runs the CRP engine alone over `embeddings` in order.
pub fn cluster_only(embeddings: &[TaskEmbedding], alpha: f64) -> Result<CrpState> {
    let mut crp = CrpState::new(alpha, SimilarityModel::default());
    for e in embeddings {
        crp.assign(e)?;
    }
    Ok(crp)
}

/// Flags wrong decisions: joining a cluster founded by another true
/// cluster, or opening a new cluster for an already-seen true cluster.
pub fn decision_outcomes(assigned: &[usize], truth: &[usize]) -> Vec<bool> {
    let mut founder: BTreeMap<usize, usize> = BTreeMap::new();
    let mut seen_truth = Vec::new();
    assigned
        .iter()
        .zip(truth)
        .map(|(&a, &t)| {
            let wrong = match founder.get(&a) {
                Some(&f) => f != t,
                None => {
                    founder.insert(a, t);
                    seen_truth.contains(&t)
                }
            };
            if !seen_truth.contains(&t) {
                seen_truth.push(t);
            }
            wrong
        })
        .collect()
}

pub fn decision_errors(assigned: &[usize], truth: &[usize]) -> usize {
    decision_outcomes(assigned, truth).into_iter().filter(|&w| w).count()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub seed: u64,
    pub exact_match: bool,
    pub rand_index: f64,
    pub discovered_k: usize,
    pub delta: Option<f64>,
    pub sigma_intra: Option<f64>,
    pub sigma_inter: Option<f64>,
}

/// Clusters one synthetic stream per seed (grouped order) and scores the
/// recovered partition.
pub fn run_recovery(
    seeds: &[u64],
    make_spec: impl Fn(u64) -> SyntheticStreamSpec + Sync,
    alpha: f64,
) -> Result<Vec<RecoveryRow>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let stream = generate_synthetic_stream(&make_spec(seed))?;
            let embeddings: Vec<TaskEmbedding> = stream.tasks.iter().map(|t| t.embedding.clone()).collect();
            let truth: Vec<usize> = stream.tasks.iter().map(|t| t.true_cluster).collect();
            let crp = cluster_only(&embeddings, alpha)?;
            let score = score_partition(&crp.labels(), &truth)?;
            Ok(RecoveryRow {
                seed,
                exact_match: score.exact_match,
                rand_index: score.rand_index,
                discovered_k: score.discovered_k,
                delta: stream.stats.delta(),
                sigma_intra: stream.stats.intra_std,
                sigma_inter: stream.stats.inter_std,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub delta: f64,
    pub sigma_intra: f64,
    pub sigma_inter: f64,
}

impl GridPoint {
    pub fn separated(&self) -> bool {
        self.delta > 2.0 * (self.sigma_intra + self.sigma_inter)
    }

    pub fn bound(&self) -> f64 {
        chernoff_bound(self.delta, self.sigma_intra, self.sigma_inter)
    }
}

/// Cross-cluster similarity mean of the controlled generator whenever Δ
/// leaves room for it.
pub const CONTROLLED_INTER_MEAN: f64 = 0.51;
/// Ceiling on the same-cluster similarity mean; larger Δ lowers the
/// cross-cluster mean instead.
pub const CONTROLLED_INTRA_CAP: f64 = 0.98;

/// `(μ_intra, μ_inter)` the controlled generator targets for a given Δ.
pub fn controlled_means(delta: f64) -> (f64, f64) {
    let inter = CONTROLLED_INTER_MEAN.min(CONTROLLED_INTRA_CAP - delta);
    (inter + delta, inter)
}

/// Task embeddings whose pairwise similarities have (approximately) the
/// requested means and spreads: same-cluster pairs around `μ_intra` with
/// spread `σ_intra`, cross-cluster pairs around `μ_inter` with `σ_inter`.
///
/// Coordinates: axis 0 is shared by every cluster with weight `√μ_inter`,
/// axis `k+1` carries cluster `k` with weight `√Δ`. Noise on the own axis
/// moves same-cluster similarities, noise on foreign axes moves
/// cross-cluster ones; a pair sums two independent noise terms, hence `√2`.
pub fn controlled_stream(point: &GridPoint, layout: &[usize], seed: u64) -> Result<(Vec<TaskEmbedding>, Vec<usize>)> {
    if !(0.0..=CONTROLLED_INTRA_CAP).contains(&point.delta) {
        return Err(Error::InfeasibleSpec(format!(
            "delta must lie in [0, {CONTROLLED_INTRA_CAP}], got {}",
            point.delta
        )));
    }
    if !(point.sigma_intra >= 0.0 && point.sigma_inter >= 0.0) {
        return Err(Error::InfeasibleSpec("similarity spreads must be non-negative".into()));
    }
    if layout.is_empty() || layout.contains(&0) {
        return Err(Error::InfeasibleSpec("every cluster needs at least one task".into()));
    }
    let k = layout.len();
    let (_, mu_inter) = controlled_means(point.delta);
    let shared = mu_inter.sqrt();
    let own = point.delta.sqrt();
    let mut embeddings = Vec::new();
    let mut truth = Vec::new();
    for (c, &count) in layout.iter().enumerate() {
        for j in 0..count {
            let mut rng = rng::stream(seed, &[tag::TASK_EMBEDDING, c as u64, j as u64]);
            let mut v = vec![0.0; k + 1];
            if own < 1e-3 {
                // Nothing separates the clusters; jitter the shared axis.
                let sd = point.sigma_intra.max(point.sigma_inter) / (shared * 2f64.sqrt());
                v[0] = shared + sd * rng.sample::<f64, _>(StandardNormal);
                v[c + 1] = own;
            } else {
                v[0] = shared;
                let sd_own = point.sigma_intra / (own * 2f64.sqrt());
                let sd_other = point.sigma_inter / (own * 2f64.sqrt());
                for (axis, x) in v.iter_mut().enumerate().skip(1) {
                    let z: f64 = rng.sample(StandardNormal);
                    *x = if axis == c + 1 { own + sd_own * z } else { sd_other * z };
                }
            }
            embeddings.push(TaskEmbedding {
                task_id: format!("k{c}-t{j}"),
                vector: v,
                source: EmbeddingSource::Synthetic,
            });
            truth.push(c);
        }
    }
    Ok((embeddings, truth))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prop1Row {
    pub delta: f64,
    pub sigma_intra: f64,
    pub sigma_inter: f64,
    pub trials: usize,
    /// Every decision, cold start included.
    pub decisions: usize,
    pub errors: usize,
    pub empirical_error: f64,
    pub std_error: f64,
    /// Decisions taken with the Gaussian likelihood ratio, which is what
    /// the bound describes.
    pub gaussian_decisions: usize,
    pub gaussian_errors: usize,
    pub gaussian_error: f64,
    pub gaussian_std_error: f64,
    pub bound: f64,
    pub separated: bool,
    pub exact_recovery_rate: f64,
    /// Overall rate within bound + 3 SE; `None` where the separation
    /// condition fails and nothing is asserted.
    pub within_bound: Option<bool>,
    /// Same check restricted to Gaussian-mode decisions.
    pub gaussian_within_bound: Option<bool>,
}

struct TrialOutcome {
    decisions: usize,
    errors: usize,
    gaussian_decisions: usize,
    gaussian_errors: usize,
    exact: bool,
}

fn prop1_trial(point: &GridPoint, layout: &[usize], alpha: f64, trial_seed: u64) -> Result<TrialOutcome> {
    let (emb, truth) = controlled_stream(point, layout, trial_seed)?;
    let mut order: Vec<usize> = (0..emb.len()).collect();
    order.shuffle(&mut rng::stream(trial_seed, &[tag::ORDER]));
    let emb: Vec<TaskEmbedding> = order.iter().map(|&i| emb[i].clone()).collect();
    let truth: Vec<usize> = order.iter().map(|&i| truth[i]).collect();
    let crp = cluster_only(&emb, alpha)?;
    let labels = crp.labels();
    let wrong = decision_outcomes(&labels, &truth);
    let gaussian: Vec<bool> = crp
        .trace
        .iter()
        .zip(&wrong)
        .filter(|(d, _)| d.mode == DecisionMode::Gaussian)
        .map(|(_, &w)| w)
        .collect();
    Ok(TrialOutcome {
        decisions: wrong.len(),
        errors: wrong.iter().filter(|&&w| w).count(),
        gaussian_decisions: gaussian.len(),
        gaussian_errors: gaussian.iter().filter(|&&w| w).count(),
        exact: score_partition(&labels, &truth)?.exact_match,
    })
}

fn rate(errors: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 0.0);
    }
    let p = errors as f64 / n as f64;
    (p, (p * (1.0 - p) / n as f64).sqrt())
}

/// Per-decision misassignment rate against the Chernoff bound at each grid
/// point. Each trial draws a fresh stream and visits it in a shuffled order.
pub fn run_proposition1(
    grid: &[GridPoint],
    trials: usize,
    layout: &[usize],
    alpha: f64,
    seed: u64,
) -> Result<Vec<Prop1Row>> {
    if trials < MIN_PROP1_TRIALS {
        return Err(Error::Config(format!(
            "proposition runs need at least {MIN_PROP1_TRIALS} trials, got {trials}"
        )));
    }
    grid.iter()
        .enumerate()
        .map(|(g, point)| {
            let outcomes = (0..trials)
                .into_par_iter()
                .map(|trial| {
                    let trial_seed = rng::derive_seed(seed, &[tag::TRIAL, g as u64, trial as u64]);
                    prop1_trial(point, layout, alpha, trial_seed)
                })
                .collect::<Result<Vec<_>>>()?;
            let sum = |f: fn(&TrialOutcome) -> usize| outcomes.iter().map(f).sum::<usize>();
            let (decisions, errors) = (sum(|o| o.decisions), sum(|o| o.errors));
            let (gaussian_decisions, gaussian_errors) = (sum(|o| o.gaussian_decisions), sum(|o| o.gaussian_errors));
            let (empirical_error, std_error) = rate(errors, decisions);
            let (gaussian_error, gaussian_std_error) = rate(gaussian_errors, gaussian_decisions);
            let bound = point.bound();
            let separated = point.separated();
            Ok(Prop1Row {
                delta: point.delta,
                sigma_intra: point.sigma_intra,
                sigma_inter: point.sigma_inter,
                trials,
                decisions,
                errors,
                empirical_error,
                std_error,
                gaussian_decisions,
                gaussian_errors,
                gaussian_error,
                gaussian_std_error,
                bound,
                separated,
                exact_recovery_rate: outcomes.iter().filter(|o| o.exact).count() as f64 / trials as f64,
                within_bound: separated.then_some(empirical_error <= bound + 3.0 * std_error),
                gaussian_within_bound: separated.then_some(gaussian_error <= bound + 3.0 * gaussian_std_error),
            })
        })
        .collect()
}

/// The default Monte-Carlo grid: Δ crossed with three spread settings.
pub fn default_prop1_grid() -> Vec<GridPoint> {
    let spreads = [(0.05, 0.10), (0.02, 0.05), (0.10, 0.10)];
    let deltas = [0.0, 0.1, 0.2, 0.3, 0.43, 0.6, 0.9];
    deltas
        .iter()
        .flat_map(|&delta| {
            spreads.iter().map(move |&(sigma_intra, sigma_inter)| GridPoint {
                delta,
                sigma_intra,
                sigma_inter,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub discovered_k: usize,
}

pub fn alpha_sweep(embeddings: &[TaskEmbedding], alphas: &[f64]) -> Result<Vec<AlphaRow>> {
    alphas
        .iter()
        .map(|&alpha| {
            Ok(AlphaRow {
                alpha,
                discovered_k: cluster_only(embeddings, alpha)?.discovered_k(),
            })
        })
        .collect()
}

/// Adjacent α pairs (sorted by α) where K decreased. Reported, not an error.
pub fn monotonicity_violations(rows: &[AlphaRow]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<&AlphaRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    sorted
        .windows(2)
        .filter(|w| w[1].discovered_k < w[0].discovered_k)
        .map(|w| (w[0].alpha, w[1].alpha))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoEwc,
    NoCrp,
    SingleAdapter,
    FrozenBase,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoEwc,
        Variant::NoCrp,
        Variant::SingleAdapter,
        Variant::FrozenBase,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEwc => "no_ewc",
            Variant::NoCrp => "no_crp",
            Variant::SingleAdapter => "single_adapter",
            Variant::FrozenBase => "frozen_base",
        }
    }

    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoEwc => c.lambda = 0.0,
            Variant::NoCrp => c.routing = Routing::Single,
            Variant::SingleAdapter => {
                c.routing = Routing::Single;
                c.lambda = 0.0;
            }
            Variant::FrozenBase => c.train_adapters = false,
        }
        c
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRow {
    pub label: String,
    pub seed: u64,
    pub avg_dice: f64,
    pub forgetting: f64,
    pub discovered_k: usize,
}

fn run_row(label: &str, seed: u64, tasks: &[ToyTask], config: &TrainConfig) -> Result<RunRow> {
    let learner = run_stream(tasks, config)?;
    Ok(RunRow {
        label: label.to_string(),
        seed,
        avg_dice: average_dice(&learner.ledger)?,
        forgetting: forgetting_rate(&learner.ledger)?,
        discovered_k: learner.crp.discovered_k(),
    })
}

/// Same seed for data, base model and adapters across one row group.
fn seeded(config: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..config.clone() }
}

fn toy_stream(spec: &SyntheticStreamSpec, world: &ToyWorldConfig, seed: u64) -> Result<Vec<ToyTask>> {
    let spec = SyntheticStreamSpec { seed, ..spec.clone() };
    let world = ToyWorldConfig { seed, ..world.clone() };
    Ok(generate_toy_stream(&spec, &world)?.tasks)
}

/// Every variant on the same stream for each seed.
pub fn run_ablation(
    spec: &SyntheticStreamSpec,
    world: &ToyWorldConfig,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<RunRow>> {
    let jobs: Vec<(u64, Variant)> = seeds
        .iter()
        .flat_map(|&s| Variant::ALL.iter().map(move |&v| (s, v)))
        .collect();
    jobs.par_iter()
        .map(|&(seed, variant)| {
            let tasks = toy_stream(spec, world, seed)?;
            run_row(variant.name(), seed, &tasks, &variant.configure(&seeded(config, seed)))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MedianRow {
    pub label: String,
    pub runs: usize,
    pub median_avg_dice: f64,
    pub median_forgetting: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-label medians, in order of first appearance.
pub fn medians(rows: &[RunRow]) -> Vec<MedianRow> {
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let group: Vec<&RunRow> = rows.iter().filter(|r| r.label == label).collect();
            MedianRow {
                label: label.to_string(),
                runs: group.len(),
                median_avg_dice: median(&group.iter().map(|r| r.avg_dice).collect::<Vec<_>>()),
                median_forgetting: median(&group.iter().map(|r| r.forgetting).collect::<Vec<_>>()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOrder {
    Grouped,
    Interleaved,
    Mixed,
    Reversed,
}

impl TaskOrder {
    pub const ALL: [TaskOrder; 4] = [
        TaskOrder::Grouped,
        TaskOrder::Interleaved,
        TaskOrder::Mixed,
        TaskOrder::Reversed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskOrder::Grouped => "grouped",
            TaskOrder::Interleaved => "interleaved",
            TaskOrder::Mixed => "mixed",
            TaskOrder::Reversed => "reversed",
        }
    }

    /// Permutation of a grouped pool. `Interleaved` takes one task per true
    /// cluster in turn; `Mixed` is a seeded shuffle.
    pub fn arrange<T: Clone>(self, grouped: &[T], cluster_of: impl Fn(&T) -> usize, seed: u64) -> Vec<T> {
        match self {
            TaskOrder::Grouped => grouped.to_vec(),
            TaskOrder::Reversed => grouped.iter().rev().cloned().collect(),
            TaskOrder::Mixed => {
                let mut v = grouped.to_vec();
                v.shuffle(&mut rng::stream(seed, &[tag::ORDER]));
                v
            }
            TaskOrder::Interleaved => {
                let mut queues: BTreeMap<usize, Vec<T>> = BTreeMap::new();
                for t in grouped {
                    queues.entry(cluster_of(t)).or_default().push(t.clone());
                }
                let mut queues: Vec<std::vec::IntoIter<T>> = queues.into_values().map(Vec::into_iter).collect();
                let mut out = Vec::with_capacity(grouped.len());
                while out.len() < grouped.len() {
                    for q in queues.iter_mut() {
                        if let Some(t) = q.next() {
                            out.push(t);
                        }
                    }
                }
                out
            }
        }
    }
}

pub fn run_order_sensitivity(
    spec: &SyntheticStreamSpec,
    world: &ToyWorldConfig,
    config: &TrainConfig,
    seeds: &[u64],
    orders: &[TaskOrder],
) -> Result<Vec<RunRow>> {
    let jobs: Vec<(u64, TaskOrder)> = seeds
        .iter()
        .flat_map(|&s| orders.iter().map(move |&o| (s, o)))
        .collect();
    jobs.par_iter()
        .map(|&(seed, order)| {
            let pool = toy_stream(spec, world, seed)?;
            let tasks = order.arrange(&pool, |t| t.true_cluster, seed);
            run_row(order.name(), seed, &tasks, &seeded(config, seed))
        })
        .collect()
}

/// Within-cluster forgetting as a function of λ on a single-cluster stream.
pub fn run_lambda_sweep(
    spec: &SyntheticStreamSpec,
    world: &ToyWorldConfig,
    config: &TrainConfig,
    seeds: &[u64],
    lambdas: &[f64],
) -> Result<Vec<RunRow>> {
    let jobs: Vec<(u64, f64)> = seeds
        .iter()
        .flat_map(|&s| lambdas.iter().map(move |&l| (s, l)))
        .collect();
    jobs.par_iter()
        .map(|&(seed, lambda)| {
            let tasks = toy_stream(spec, world, seed)?;
            let c = TrainConfig {
                lambda,
                ..seeded(config, seed)
            };
            run_row(&format!("lambda={lambda}"), seed, &tasks, &c)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeReport {
    pub seed: u64,
    pub cluster_i: usize,
    pub cluster_j: usize,
    pub metric_before: f64,
    pub metric_after: f64,
    pub delta: f64,
}

/// `θ_i + F_j ⊙ (θ_j − θ_i) ⊘ (F_i + F_j + ε)`, which equals
/// `(F_i θ_i + F_j θ_j) ⊘ (F_i + F_j + ε)` up to the ε term and returns
/// `θ_i` exactly when `F_j = 0` or `i = j`.
pub fn merge_parameters(theta_i: &[f64], fisher_i: &[f64], theta_j: &[f64], fisher_j: &[f64]) -> Result<Vec<f64>> {
    let n = theta_i.len();
    for len in [fisher_i.len(), theta_j.len(), fisher_j.len()] {
        if len != n {
            return Err(Error::LengthMismatch {
                expected: n,
                found: len,
            });
        }
    }
    Ok((0..n)
        .map(|d| theta_i[d] + fisher_j[d] * (theta_j[d] - theta_i[d]) / (fisher_i[d] + fisher_j[d] + MERGE_EPSILON))
        .collect())
}

/// Round-robin over the tasks so every mini-batch mixes them.
fn interleave<T: Clone>(groups: &[&[T]]) -> Vec<T> {
    let longest = groups.iter().map(|g| g.len()).max().unwrap_or(0);
    (0..longest)
        .flat_map(|i| groups.iter().filter_map(move |g| g.get(i).cloned()))
        .collect()
}

/// Merges clusters `i` and `j` into one adapter, re-adapts it jointly on
/// every task of both clusters, and compares mean test Dice over those
/// tasks before (own adapters) and after (merged adapter).
pub fn fisher_weighted_merge(
    learner: &ContinualLearner,
    tasks: &[ToyTask],
    cluster_i: usize,
    cluster_j: usize,
    readapt_epochs: usize,
) -> Result<MergeReport> {
    let fisher = |k: usize| {
        learner
            .consolidation
            .get(&k)
            .and_then(|s| s.fisher.as_ref())
            .map(|f| f.values.clone())
            .ok_or_else(|| Error::Precondition(format!("cluster {k} has no consolidated Fisher")))
    };
    let (fi, fj) = (fisher(cluster_i)?, fisher(cluster_j)?);
    let affected: Vec<&ToyTask> = tasks
        .iter()
        .filter(|t| matches!(learner.cluster_of(&t.task_id), Some(c) if c == cluster_i || c == cluster_j))
        .collect();
    if affected.is_empty() {
        return Err(Error::Precondition(
            "no trained tasks belong to the merged clusters".into(),
        ));
    }
    let mut before = 0.0;
    for t in &affected {
        let own = learner.cluster_of(&t.task_id).expect("filtered above");
        before += task_dice(&learner.bank, own, &t.test)?;
    }
    before /= affected.len() as f64;

    let mut bank = learner.bank.clone();
    let merged = merge_parameters(
        &bank.adapter(cluster_i)?.params(),
        &fi,
        &bank.adapter(cluster_j)?.params(),
        &fj,
    )?;
    bank.adapter_mut(cluster_i)?.set_params(&merged)?;
    let train: Vec<_> = interleave(&affected.iter().map(|t| t.train.as_slice()).collect::<Vec<_>>());
    let val: Vec<_> = interleave(&affected.iter().map(|t| t.val.as_slice()).collect::<Vec<_>>());
    let readapt = TrainConfig {
        max_epochs: readapt_epochs,
        min_epochs: readapt_epochs,
        patience: readapt_epochs + 1,
        ..learner.config.clone()
    };
    if readapt_epochs > 0 {
        train_adapter(&mut bank, cluster_i, &train, &val, &readapt, None, "merge")?;
    }
    let mut after = 0.0;
    for t in &affected {
        after += task_dice(&bank, cluster_i, &t.test)?;
    }
    after /= affected.len() as f64;
    Ok(MergeReport {
        seed: learner.config.seed,
        cluster_i,
        cluster_j,
        metric_before: before,
        metric_after: after,
        delta: after - before,
    })
}

/// Trains the full model per seed, then merges every cluster pair
/// (`i < j`) and every cluster with itself.
pub fn run_merge_experiment(
    spec: &SyntheticStreamSpec,
    world: &ToyWorldConfig,
    config: &TrainConfig,
    seeds: &[u64],
    readapt_epochs: usize,
) -> Result<Vec<MergeReport>> {
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let tasks = toy_stream(spec, world, seed)?;
            let learner = run_stream(&tasks, &seeded(config, seed))?;
            let k = learner.crp.discovered_k();
            let mut reports = Vec::new();
            for i in 0..k {
                for j in i..k {
                    reports.push(fisher_weighted_merge(&learner, &tasks, i, j, readapt_epochs)?);
                }
            }
            Ok(reports)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Writes `{experiment}-{stamp}.csv` (one row per item) and
/// `{experiment}-{stamp}.json` (the summary) into `dir`.
pub fn write_experiment<R: Serialize, S: Serialize>(
    dir: &Path,
    experiment: &str,
    stamp: &str,
    rows: &[R],
    summary: &S,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(format!("{experiment}-{stamp}.csv"));
    let mut writer = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| csv_error(&csv_path, e))?;
    }
    writer.flush().map_err(|e| Error::io(&csv_path, e))?;
    let json_path = dir.join(format!("{experiment}-{stamp}.json"));
    let body = serde_json::to_string_pretty(summary).expect("summaries serialize");
    std::fs::write(&json_path, body + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok((csv_path, json_path))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{StreamStats, TaskRecord};
    use proptest::prelude::*;

    #[test]
    fn partition_examples() {
        let truth = [0, 0, 1, 1, 2];
        let s = score_partition(&truth, &truth).unwrap();
        assert!(s.exact_match && s.rand_index == 1.0 && s.discovered_k == 3);

        let permuted = [7, 7, 3, 3, 0];
        assert!(score_partition(&permuted, &truth).unwrap().exact_match);

        // Every pair is together in one labeling and apart in the other.
        let r = score_partition(&[0, 0, 0, 0], &[0, 1, 2, 3]).unwrap();
        assert!(!r.exact_match);
        assert_eq!(r.rand_index, 0.0);

        let split = score_partition(&[0, 0, 1, 2, 2], &truth).unwrap();
        assert!(!split.exact_match);
        assert!(score_partition(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn decision_error_counting() {
        assert_eq!(decision_errors(&[0, 0, 1, 1], &[5, 5, 6, 6]), 0);
        // Joining a foreign cluster, then opening a duplicate cluster.
        assert_eq!(decision_errors(&[0, 0, 1], &[5, 6, 5]), 2);
    }

    #[test]
    fn merge_formula_edges() {
        let ti = [1.0, -2.0, 0.5];
        let tj = [3.0, 4.0, -1.0];
        assert_eq!(
            merge_parameters(&ti, &[1.0, 2.0, 3.0], &tj, &[0.0; 3]).unwrap(),
            ti.to_vec()
        );
        assert_eq!(merge_parameters(&ti, &[1.0; 3], &ti, &[1.0; 3]).unwrap(), ti.to_vec());
        let m = merge_parameters(&ti, &[1.0, 1.0, 3.0], &tj, &[1.0, 3.0, 1.0]).unwrap();
        let expect = [2.0, 2.5, 0.125];
        for (a, b) in m.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn orders_are_permutations() {
        let pool: Vec<(usize, usize)> = [(0, 0), (1, 0), (2, 1), (3, 1), (4, 1), (5, 2)].to_vec();
        let inter = TaskOrder::Interleaved.arrange(&pool, |t| t.1, 0);
        assert_eq!(inter.iter().map(|t| t.0).collect::<Vec<_>>(), vec![0, 2, 5, 1, 3, 4]);
        let rev = TaskOrder::Reversed.arrange(&pool, |t| t.1, 0);
        assert_eq!(rev[0].0, 5);
        let mut mixed = TaskOrder::Mixed.arrange(&pool, |t| t.1, 3);
        mixed.sort();
        assert_eq!(mixed, pool);
    }

    #[test]
    fn controlled_stream_rejects_infeasible_delta() {
        let p = GridPoint {
            delta: 1.5,
            sigma_intra: 0.05,
            sigma_inter: 0.1,
        };
        assert!(matches!(
            controlled_stream(&p, &[2, 2], 0),
            Err(Error::InfeasibleSpec(_))
        ));
        assert!(run_proposition1(&[], 10, &[1], 5.0, 0).is_err());
    }

    #[test]
    fn controlled_stream_hits_requested_statistics() {
        for (delta, si, se) in [(0.43, 0.05, 0.10), (0.2, 0.02, 0.05), (0.9, 0.05, 0.05)] {
            let p = GridPoint {
                delta,
                sigma_intra: si,
                sigma_inter: se,
            };
            let (emb, truth) = controlled_stream(&p, &[40, 40, 40], 9).unwrap();
            let records: Vec<TaskRecord> = emb
                .into_iter()
                .zip(truth)
                .map(|(embedding, true_cluster)| TaskRecord {
                    task_id: embedding.task_id.clone(),
                    true_cluster,
                    prompts: Vec::new(),
                    embedding,
                })
                .collect();
            let stats = StreamStats::measure(&records);
            let (mi, me) = controlled_means(delta);
            assert!((stats.intra_mean.unwrap() - mi).abs() < 0.01, "{stats:?}");
            assert!((stats.inter_mean.unwrap() - me).abs() < 0.01, "{stats:?}");
            assert!((stats.delta().unwrap() - delta).abs() < 0.01);
            assert!((stats.intra_std.unwrap() / si - 1.0).abs() < 0.15, "{stats:?}");
            assert!((stats.inter_std.unwrap() / se - 1.0).abs() < 0.15, "{stats:?}");
        }
    }

    #[test]
    fn alpha_extremes() {
        let stream = generate_synthetic_stream(&SyntheticStreamSpec::standard(4)).unwrap();
        let emb: Vec<TaskEmbedding> = stream.tasks.iter().map(|t| t.embedding.clone()).collect();
        let rows = alpha_sweep(&emb, &[1e-20, 1e6]).unwrap();
        assert_eq!(rows[0].discovered_k, 1);
        assert_eq!(rows[1].discovered_k, emb.len());
        assert!(monotonicity_violations(&rows).is_empty());
        let bumpy = [
            AlphaRow {
                alpha: 5.0,
                discovered_k: 4,
            },
            AlphaRow {
                alpha: 2.0,
                discovered_k: 5,
            },
        ];
        assert_eq!(monotonicity_violations(&bumpy), vec![(2.0, 5.0)]);
    }

    proptest! {
        #[test]
        fn partition_score_is_relabeling_invariant(
            a in proptest::collection::vec(0usize..4, 1..12),
            b in proptest::collection::vec(0usize..4, 12),
            shift in 1usize..9,
        ) {
            let b = &b[..a.len()];
            let base = score_partition(&a, b).unwrap();
            let relabeled: Vec<usize> = a.iter().map(|x| (x * 7 + shift) % 31).collect();
            let other = score_partition(&relabeled, b).unwrap();
            prop_assert_eq!(base.exact_match, other.exact_match);
            prop_assert!((base.rand_index - other.rand_index).abs() < 1e-12);
            let swapped = score_partition(b, &a).unwrap();
            prop_assert!((base.rand_index - swapped.rand_index).abs() < 1e-12);
            if base.exact_match {
                prop_assert!(base.rand_index == 1.0 && base.discovered_k == base.true_k);
            }
        }
    }
}
