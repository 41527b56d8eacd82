//! The continual-learning loop: route each task with the CRP, train that
//! cluster's adapter with CE + Dice (+ λ·EWC after its first task),
//! consolidate the Fisher, then re-score every task seen so far.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterBank, BaseModel, LossWeights, Sample};
use crate::crp::{AssignmentDecision, CrpState};
use crate::error::{Error, Result};
use crate::ewc::{estimate_fisher, ConsolidationState};
use crate::loss::{dice_score, threshold};
use crate::similarity::SimilarityModel;
use crate::toy::ToyTask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// MAP assignment under the CRP posterior.
    Crp,
    /// Every task shares cluster 0.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub fisher_samples: usize,
    pub max_epochs: usize,
    pub min_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Classical momentum coefficient; 0 disables it.
    pub momentum: f64,
    /// Output width of the frozen base layer.
    pub hidden_dim: usize,
    pub rank: usize,
    pub lora_alpha: f64,
    pub sigma_min: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub routing: Routing,
    /// When false adapters are allocated but never trained.
    pub train_adapters: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: crate::crp::DEFAULT_ALPHA,
            lambda: crate::ewc::DEFAULT_LAMBDA,
            fisher_samples: crate::ewc::DEFAULT_FISHER_SAMPLES,
            max_epochs: 60,
            min_epochs: 15,
            patience: 8,
            learning_rate: 1e-3,
            weight_decay: 8e-5,
            batch_size: 16,
            momentum: 0.0,
            hidden_dim: 8,
            rank: 4,
            lora_alpha: 16.0,
            sigma_min: crate::similarity::DEFAULT_SIGMA_MIN,
            epsilon: crate::similarity::DEFAULT_EPSILON,
            seed: 0,
            routing: Routing::Crp,
            train_adapters: true,
        }
    }
}

impl TrainConfig {
    /// Settings used by the desk-scale experiments: the toy model trains in
    /// a few epochs with a larger step and momentum.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 0.02,
            momentum: 0.9,
            max_epochs: 30,
            min_epochs: 10,
            patience: 5,
            ..TrainConfig::default()
        }
    }

    // Negated comparisons so NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.min_epochs > self.max_epochs {
            return bad("min_epochs must not exceed max_epochs".into());
        }
        if self.hidden_dim == 0 || self.rank == 0 || !(self.lora_alpha > 0.0) {
            return bad("hidden_dim, rank and lora_alpha must be positive".into());
        }
        if self.patience == 0 || self.batch_size == 0 || self.fisher_samples == 0 {
            return bad("patience, batch_size and fisher_samples must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning_rate must be positive and momentum in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.sigma_min > 0.0) || !(self.epsilon > 0.0) {
            return bad("weight_decay must be non-negative; sigma_min and epsilon positive".into());
        }
        Ok(())
    }
}

/// Mean per-image hard Dice of `cluster_id`'s adapter on `samples`.
pub fn task_dice(bank: &AdapterBank, cluster_id: usize, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for s in samples {
        let logits = bank.forward(cluster_id, &s.features)?;
        total += dice_score(&threshold(&logits), &s.mask);
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub best_val_dice: f64,
    pub final_loss: f64,
}

/// Mini-batch descent on one adapter with early stopping on validation
/// Dice. The data loss takes an explicit step (with momentum and decoupled
/// weight decay); the EWC term, when given, takes an exact proximal step so
/// that arbitrarily large λ stays stable. The best-validation parameters are
/// restored at the end.
pub fn train_adapter(
    bank: &mut AdapterBank,
    cluster_id: usize,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    ewc: Option<&ConsolidationState>,
    task_id: &str,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let lr = config.learning_rate;
    let mut theta = bank.adapter(cluster_id)?.params();
    let mut velocity = vec![0.0; theta.len()];
    let mut best_val = task_dice(bank, cluster_id, val)?;
    let mut best_theta = theta.clone();
    let mut since_best = 0;
    let mut epochs = 0;
    let mut last_loss = f64::NAN;

    for epoch in 1..=config.max_epochs {
        epochs = epoch;
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in train.chunks(config.batch_size) {
            let grads = bank.gradients(cluster_id, batch, LossWeights::default())?;
            let mut loss = grads.loss;
            if let Some(state) = ewc {
                loss += config.lambda * state.penalty(&theta)?;
            }
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    task_id: task_id.to_string(),
                    epoch,
                    loss,
                });
            }
            epoch_loss += loss;
            batches += 1;
            for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grads.flat()) {
                *v = config.momentum * *v + g;
                *t -= lr * (*v + config.weight_decay * *t);
            }
            if let Some(state) = ewc {
                state.proximal_step(&mut theta, lr, config.lambda)?;
            }
            if theta.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence {
                    task_id: task_id.to_string(),
                    epoch,
                    loss: f64::NAN,
                });
            }
            bank.adapter_mut(cluster_id)?.set_params(&theta)?;
        }
        last_loss = epoch_loss / batches as f64;
        let val_dice = task_dice(bank, cluster_id, val)?;
        if val_dice > best_val {
            best_val = val_dice;
            best_theta.clone_from(&theta);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if epoch >= config.min_epochs && since_best >= config.patience {
            break;
        }
    }
    bank.adapter_mut(cluster_id)?.set_params(&best_theta)?;
    Ok(TrainReport {
        epochs,
        best_val_dice: best_val,
        final_loss: last_loss,
    })
}

/// Per-task scores after every checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub task_ids: Vec<String>,
    /// Cluster each task was routed to.
    pub assignments: Vec<usize>,
    /// `dice[c][i]`: test Dice of task `i` right after training task `c`.
    pub dice: Vec<Vec<f64>>,
    pub k_history: Vec<usize>,
    pub epochs: Vec<usize>,
    #[serde(skip)]
    pub wall_clock_secs: Vec<f64>,
}

impl RunLedger {
    pub fn len(&self) -> usize {
        self.task_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_ids.is_empty()
    }

    /// Score observed immediately after the task's own training.
    pub fn peak(&self, i: usize) -> f64 {
        self.dice[i][i]
    }

    pub fn final_score(&self, i: usize) -> f64 {
        self.dice[self.dice.len() - 1][i]
    }

    pub fn peaks(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.peak(i)).collect()
    }

    pub fn finals(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.final_score(i)).collect()
    }
}

/// Mean final test Dice over all tasks.
pub fn average_dice(ledger: &RunLedger) -> Result<f64> {
    if ledger.is_empty() {
        return Err(Error::Domain("average Dice needs at least one task".into()));
    }
    Ok(ledger.finals().iter().sum::<f64>() / ledger.len() as f64)
}

/// Mean of `peak − final` over all but the last task. Negative terms
/// (backward transfer) are kept as-is.
pub fn forgetting_rate(ledger: &RunLedger) -> Result<f64> {
    forgetting_from(&ledger.peaks(), &ledger.finals())
}

pub fn forgetting_from(peaks: &[f64], finals: &[f64]) -> Result<f64> {
    if peaks.len() != finals.len() {
        return Err(Error::LengthMismatch {
            expected: peaks.len(),
            found: finals.len(),
        });
    }
    if peaks.len() < 2 {
        return Err(Error::Domain("forgetting rate needs at least two tasks".into()));
    }
    let m = peaks.len() - 1;
    Ok(peaks[..m].iter().zip(&finals[..m]).map(|(p, f)| p - f).sum::<f64>() / m as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub decision: AssignmentDecision,
    pub report: Option<TrainReport>,
    /// Whether the EWC term was part of the objective for this task.
    pub penalized: bool,
}

/// Complete engine state; serializes as the run checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinualLearner {
    pub config: TrainConfig,
    pub crp: CrpState,
    pub bank: AdapterBank,
    pub consolidation: BTreeMap<usize, ConsolidationState>,
    pub ledger: RunLedger,
}

impl ContinualLearner {
    pub fn new(config: TrainConfig, base: BaseModel) -> Result<Self> {
        config.validate()?;
        let crp = CrpState::new(config.alpha, SimilarityModel::new(config.sigma_min, config.epsilon));
        let bank = AdapterBank::new(base, config.rank, config.lora_alpha, config.seed)?;
        Ok(ContinualLearner {
            config,
            crp,
            bank,
            consolidation: BTreeMap::new(),
            ledger: RunLedger::default(),
        })
    }

    /// Cluster that `task_id` was routed to, if it has been trained.
    pub fn cluster_of(&self, task_id: &str) -> Option<usize> {
        self.ledger
            .task_ids
            .iter()
            .position(|t| t == task_id)
            .map(|i| self.ledger.assignments[i])
    }

    /// Routes and trains one task; does not touch the ledger's scores.
    pub fn train_task(&mut self, task: &ToyTask) -> Result<TaskOutcome> {
        let decision = match self.config.routing {
            Routing::Crp => self.crp.assign(&task.embedding)?,
            Routing::Single => {
                let target = (self.crp.discovered_k() > 0).then_some(0);
                self.crp.assign_forced(&task.embedding, target)?
            }
        };
        let cluster = decision.cluster_id;
        if decision.created {
            self.bank.allocate(cluster)?;
            self.consolidation
                .insert(cluster, ConsolidationState::new(self.config.lambda));
        }
        let n_k = self.crp.cluster(cluster)?.task_count;

        let mut report = None;
        let mut penalized = false;
        if self.config.train_adapters {
            let state = &self.consolidation[&cluster];
            // Ω is identically zero on a cluster's first task.
            let ewc = (n_k > 1 && self.config.lambda > 0.0 && state.fisher.is_some()).then_some(state);
            penalized = ewc.is_some();
            report = Some(train_adapter(
                &mut self.bank,
                cluster,
                &task.train,
                &task.val,
                &self.config,
                ewc,
                &task.task_id,
            )?);
            let fisher = estimate_fisher(&self.bank, cluster, &task.train, self.config.fisher_samples)?;
            let theta = self.bank.adapter(cluster)?.params();
            self.consolidation
                .get_mut(&cluster)
                .expect("allocated with the adapter")
                .consolidate(fisher, n_k, &theta)?;
        }

        self.ledger.task_ids.push(task.task_id.clone());
        self.ledger.assignments.push(cluster);
        self.ledger.k_history.push(self.crp.discovered_k());
        self.ledger.epochs.push(report.as_ref().map_or(0, |r| r.epochs));
        Ok(TaskOutcome {
            decision,
            report,
            penalized,
        })
    }

    /// Scores every trained task on its test split with the adapter of the
    /// cluster it was routed to. `seen` must start with the trained tasks in
    /// order.
    pub fn record_checkpoint(&mut self, seen: &[ToyTask]) -> Result<()> {
        let n = self.ledger.len();
        if seen.len() < n {
            return Err(Error::Precondition(format!(
                "checkpoint needs the {n} trained tasks, got {}",
                seen.len()
            )));
        }
        let bank = &self.bank;
        let scores = seen[..n]
            .par_iter()
            .zip(&self.ledger.assignments)
            .map(|(task, &cluster)| task_dice(bank, cluster, &task.test))
            .collect::<Result<Vec<_>>>()?;
        self.ledger.dice.push(scores);
        Ok(())
    }

    /// Processes `tasks` in order, skipping those already in the ledger
    /// (which must match the stream prefix).
    pub fn run(&mut self, tasks: &[ToyTask]) -> Result<()> {
        let done = self.ledger.len();
        if tasks.len() < done {
            return Err(Error::Precondition(format!(
                "stream has {} tasks but the checkpoint already trained {done}",
                tasks.len()
            )));
        }
        for (i, (trained, task)) in self.ledger.task_ids.iter().zip(tasks).enumerate() {
            if trained != &task.task_id {
                return Err(Error::Precondition(format!(
                    "checkpoint task {i} is {trained} but the stream has {}",
                    task.task_id
                )));
            }
        }
        for i in done..tasks.len() {
            let start = Instant::now();
            let outcome = self.train_task(&tasks[i])?;
            self.record_checkpoint(&tasks[..=i])?;
            self.ledger.wall_clock_secs.push(start.elapsed().as_secs_f64());
            log::info!(
                "task {} -> cluster {}{} (K = {}, peak dice {:.3})",
                tasks[i].task_id,
                outcome.decision.cluster_id,
                if outcome.decision.created { " (new)" } else { "" },
                self.crp.discovered_k(),
                self.ledger.peak(i)
            );
        }
        Ok(())
    }

    pub fn summary(&self) -> Result<RunSummary> {
        RunSummary::from_learner(self)
    }
}

/// Fresh learner whose base model is drawn from `config.seed` with the
/// tasks' feature width.
pub fn learner_for(tasks: &[ToyTask], config: &TrainConfig) -> Result<ContinualLearner> {
    // An empty stream never evaluates the base model; any valid width works.
    let d_in = feature_width(tasks)?.unwrap_or(config.hidden_dim);
    ContinualLearner::new(config.clone(), BaseModel::random(config.hidden_dim, d_in, config.seed))
}

/// Trains a fresh learner on `tasks`.
pub fn run_stream(tasks: &[ToyTask], config: &TrainConfig) -> Result<ContinualLearner> {
    let mut learner = learner_for(tasks, config)?;
    learner.run(tasks)?;
    Ok(learner)
}

/// Common per-pixel feature width of every sample in `tasks`.
pub fn feature_width(tasks: &[ToyTask]) -> Result<Option<usize>> {
    let mut samples = tasks.iter().flat_map(|t| t.train.iter().chain(&t.val).chain(&t.test));
    let Some(first) = samples.next() else {
        return Ok(None);
    };
    let d_in = first.features.cols;
    for s in samples {
        if s.features.cols != d_in {
            return Err(Error::DimensionMismatch {
                expected: d_in,
                found: s.features.cols,
            });
        }
    }
    Ok(Some(d_in))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: String,
    pub cluster_id: usize,
    pub peak_dice: f64,
    pub final_dice: f64,
    pub forgetting: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_id: usize,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub avg_dice: Option<f64>,
    /// `None` when fewer than two tasks were trained.
    pub forgetting_rate: Option<f64>,
    pub discovered_k: usize,
    pub tasks: Vec<TaskSummary>,
    pub clusters: Vec<ClusterSummary>,
    pub trace: Vec<AssignmentDecision>,
}

impl RunSummary {
    fn from_learner(learner: &ContinualLearner) -> Result<Self> {
        let ledger = &learner.ledger;
        let tasks = (0..ledger.len())
            .map(|i| TaskSummary {
                task_id: ledger.task_ids[i].clone(),
                cluster_id: ledger.assignments[i],
                peak_dice: ledger.peak(i),
                final_dice: ledger.final_score(i),
                forgetting: ledger.peak(i) - ledger.final_score(i),
            })
            .collect();
        Ok(RunSummary {
            avg_dice: average_dice(ledger).ok(),
            forgetting_rate: forgetting_rate(ledger).ok(),
            discovered_k: learner.crp.discovered_k(),
            tasks,
            clusters: learner
                .crp
                .clusters
                .iter()
                .map(|c| ClusterSummary {
                    cluster_id: c.cluster_id,
                    members: c.member_task_ids.clone(),
                })
                .collect(),
            trace: learner.crp.trace.clone(),
        })
    }
}

impl RunSummary {
    /// Human-readable table: headline metrics, per-task scores, membership.
    pub fn render(&self) -> String {
        let fmt = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let mut out = String::new();
        out += &format!("Tasks: {}\n", self.tasks.len());
        out += &format!("Discovered K: {}\n", self.discovered_k);
        out += &format!("Avg Dice: {}\n", fmt(self.avg_dice));
        out += &format!("FR: {}\n", fmt(self.forgetting_rate));
        if !self.tasks.is_empty() {
            let width = self.tasks.iter().map(|t| t.task_id.len()).max().unwrap_or(0).max(4);
            out += &format!(
                "\n{:<width$}  {:>7}  {:>6}  {:>6}  {:>10}\n",
                "task", "cluster", "peak", "final", "forgetting"
            );
            for t in &self.tasks {
                out += &format!(
                    "{:<width$}  {:>7}  {:>6.4}  {:>6.4}  {:>+10.4}\n",
                    t.task_id, t.cluster_id, t.peak_dice, t.final_dice, t.forgetting
                );
            }
        }
        if !self.clusters.is_empty() {
            out += "\nClusters:\n";
            for c in &self.clusters {
                out += &format!("  {}: {}\n", c.cluster_id, c.members.join(", "));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ledger(peaks: &[f64], finals: &[f64]) -> RunLedger {
        let n = peaks.len();
        let mut dice = Vec::new();
        for c in 0..n {
            let row: Vec<f64> = (0..=c).map(|i| if c == n - 1 { finals[i] } else { peaks[i] }).collect();
            dice.push(row);
        }
        // The last checkpoint row holds the finals; the peak of the last
        // task is its final score by definition.
        RunLedger {
            task_ids: (0..n).map(|i| i.to_string()).collect(),
            assignments: vec![0; n],
            dice,
            k_history: vec![1; n],
            epochs: vec![0; n],
            wall_clock_secs: vec![],
        }
    }

    #[test]
    fn forgetting_examples() {
        let l = ledger(&[0.8, 0.9, 0.7], &[0.7, 0.9, 0.7]);
        assert!((forgetting_rate(&l).unwrap() - 0.05).abs() < 1e-12);
        assert!((average_dice(&l).unwrap() - (0.7 + 0.9 + 0.7) / 3.0).abs() < 1e-12);
        let same = ledger(&[0.8, 0.9, 0.7], &[0.8, 0.9, 0.7]);
        assert_eq!(forgetting_rate(&same).unwrap(), 0.0);
        let backward = ledger(&[0.6, 0.9, 0.7], &[0.8, 0.9, 0.7]);
        assert!((forgetting_rate(&backward).unwrap() - (-0.1)).abs() < 1e-12);
    }

    #[test]
    fn metric_domains() {
        let one = ledger(&[0.8], &[0.8]);
        assert!(matches!(forgetting_rate(&one), Err(Error::Domain(_))));
        assert!(average_dice(&one).is_ok());
        assert!(matches!(average_dice(&RunLedger::default()), Err(Error::Domain(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let neg = TrainConfig {
            lambda: -1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(neg.validate(), Err(Error::Config(_))));
        let epochs = TrainConfig {
            min_epochs: 70,
            ..TrainConfig::default()
        };
        assert!(epochs.validate().is_err());
    }
}
