//! Online MAP assignment of tasks to clusters under a Chinese Restaurant
//! Process prior with a similarity likelihood.

use serde::{Deserialize, Serialize};

use crate::embedding::TaskEmbedding;
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::similarity::{LikelihoodMode, SimilarityModel};

pub const DEFAULT_ALPHA: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityCluster {
    pub cluster_id: usize,
    #[serde(rename = "n")]
    pub task_count: usize,
    pub centroid: Vec<f64>,
    #[serde(rename = "members")]
    pub member_task_ids: Vec<String>,
}

impl ModalityCluster {
    fn founded_by(cluster_id: usize, e: &TaskEmbedding) -> Self {
        ModalityCluster {
            cluster_id,
            task_count: 1,
            centroid: e.vector.clone(),
            member_task_ids: vec![e.task_id.clone()],
        }
    }
}

/// Running-mean centroid update; `task_count` must already include the new
/// member. The centroid is not renormalized.
pub fn update_centroid(cluster: &mut ModalityCluster, e: &TaskEmbedding) {
    let n = cluster.task_count as f64;
    let keep = (n - 1.0) / n;
    for (c, x) in cluster.centroid.iter_mut().zip(&e.vector) {
        *c = keep * *c + x / n;
    }
}

/// Target of an assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Existing(usize),
    New,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionMode {
    ColdStart,
    Gaussian,
    /// Routing imposed by the caller (single-cluster ablations).
    Forced,
}

impl From<LikelihoodMode> for DecisionMode {
    fn from(m: LikelihoodMode) -> Self {
        match m {
            LikelihoodMode::ColdStart => DecisionMode::ColdStart,
            LikelihoodMode::Gaussian => DecisionMode::Gaussian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentDecision {
    pub task_id: String,
    /// Cluster id the task ended up in.
    pub cluster_id: usize,
    pub created: bool,
    pub per_cluster_log_posterior: Vec<(usize, f64)>,
    pub new_log_posterior: f64,
    pub similarities: Vec<(usize, f64)>,
    pub mode: DecisionMode,
}

impl AssignmentDecision {
    pub fn choice(&self) -> Choice {
        if self.created {
            Choice::New
        } else {
            Choice::Existing(self.cluster_id)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrpState {
    pub alpha: f64,
    pub tasks_seen: usize,
    pub clusters: Vec<ModalityCluster>,
    pub similarity_model: SimilarityModel,
    pub trace: Vec<AssignmentDecision>,
}

impl CrpState {
    pub fn new(alpha: f64, similarity_model: SimilarityModel) -> Self {
        CrpState {
            alpha,
            tasks_seen: 0,
            clusters: Vec::new(),
            similarity_model,
            trace: Vec::new(),
        }
    }

    pub fn with_alpha(alpha: f64) -> Self {
        CrpState::new(alpha, SimilarityModel::default())
    }

    pub fn discovered_k(&self) -> usize {
        self.clusters.len()
    }

    pub fn cluster(&self, id: usize) -> Result<&ModalityCluster> {
        self.clusters.get(id).ok_or(Error::UnknownCluster(id))
    }

    /// Log CRP prior for the next task (the `tasks_seen + 1`-th).
    pub fn log_prior(&self, choice: Choice) -> Result<f64> {
        let denom = (self.tasks_seen as f64 + self.alpha).ln();
        match choice {
            Choice::Existing(k) => Ok((self.cluster(k)?.task_count as f64).ln() - denom),
            Choice::New => Ok(self.alpha.ln() - denom),
        }
    }

    /// Plain dot product against every stored centroid.
    pub fn similarity_to_clusters(&self, e: &TaskEmbedding) -> Result<Vec<(usize, f64)>> {
        self.clusters
            .iter()
            .map(|c| {
                if c.centroid.len() != e.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: c.centroid.len(),
                        found: e.dim(),
                    });
                }
                Ok((c.cluster_id, dot(&e.vector, &c.centroid)))
            })
            .collect()
    }

    /// Scores every option without mutating the state.
    pub fn score(&self, e: &TaskEmbedding) -> Result<AssignmentDecision> {
        let similarities = self.similarity_to_clusters(e)?;
        let model = &self.similarity_model;
        let mode = model.mode();
        let mut per_cluster = Vec::with_capacity(similarities.len());
        for &(k, s) in &similarities {
            per_cluster.push((k, self.log_prior(Choice::Existing(k))? + model.evaluate(s)));
        }
        // k* = argmax_k s_{t,k}; first index wins ties.
        let best_sim = similarities
            .iter()
            .fold(None::<f64>, |best, &(_, s)| Some(best.map_or(s, |b| b.max(s))));
        let new_log_posterior = match best_sim {
            None => 0.0,
            Some(s) => self.log_prior(Choice::New)? - model.evaluate(s),
        };
        // Existing clusters win exact ties against NEW; lower ids win among
        // existing clusters.
        let mut chosen = Choice::New;
        let mut best = new_log_posterior;
        for &(k, lp) in &per_cluster {
            let better = match chosen {
                Choice::New => lp >= best,
                Choice::Existing(_) => lp > best,
            };
            if better {
                chosen = Choice::Existing(k);
                best = lp;
            }
        }
        let (cluster_id, created) = match chosen {
            Choice::Existing(k) => (k, false),
            Choice::New => (self.clusters.len(), true),
        };
        Ok(AssignmentDecision {
            task_id: e.task_id.clone(),
            cluster_id,
            created,
            per_cluster_log_posterior: per_cluster,
            new_log_posterior,
            similarities,
            mode: mode.into(),
        })
    }

    /// MAP assignment of one task. Updates the centroid or creates a
    /// cluster, then feeds the similarity model; the decision itself uses
    /// the statistics from before this task.
    pub fn assign(&mut self, e: &TaskEmbedding) -> Result<AssignmentDecision> {
        let decision = self.score(e)?;
        self.commit(e, decision)
    }

    /// Routes `e` to `target` (or a new cluster) regardless of the posterior.
    pub fn assign_forced(&mut self, e: &TaskEmbedding, target: Option<usize>) -> Result<AssignmentDecision> {
        let mut decision = self.score(e)?;
        match target {
            Some(k) => {
                self.cluster(k)?;
                decision.cluster_id = k;
                decision.created = false;
            }
            None => {
                decision.cluster_id = self.clusters.len();
                decision.created = true;
            }
        }
        decision.mode = DecisionMode::Forced;
        self.commit(e, decision)
    }

    fn commit(&mut self, e: &TaskEmbedding, decision: AssignmentDecision) -> Result<AssignmentDecision> {
        let assigned_sim = (!decision.created).then(|| {
            decision
                .similarities
                .iter()
                .find(|(k, _)| *k == decision.cluster_id)
                .map(|&(_, s)| s)
                .expect("existing cluster has a similarity")
        });
        let others: Vec<f64> = decision
            .similarities
            .iter()
            .filter(|(k, _)| decision.created || *k != decision.cluster_id)
            .map(|&(_, s)| s)
            .collect();
        // Validate the observations before touching any cluster.
        let mut model = self.similarity_model.clone();
        model.record_assignment(assigned_sim, &others)?;

        if decision.created {
            self.clusters.push(ModalityCluster::founded_by(decision.cluster_id, e));
        } else {
            let cluster = &mut self.clusters[decision.cluster_id];
            cluster.task_count += 1;
            cluster.member_task_ids.push(e.task_id.clone());
            update_centroid(cluster, e);
        }
        self.similarity_model = model;
        self.tasks_seen += 1;
        self.trace.push(decision.clone());
        Ok(decision)
    }

    /// Cluster label of each task in trace order.
    pub fn labels(&self) -> Vec<usize> {
        self.trace.iter().map(|d| d.cluster_id).collect()
    }
}
