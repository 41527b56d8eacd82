//! Synthetic segmentation tasks with a shared labeling rule per cluster.
//!
//! Each true cluster owns a ground-truth linear head `(W*, v*)`; a task in
//! that cluster labels pixel `p` positive iff `v*·((W* + τΔ_task) f_p) > 0`,
//! with a fixed per-task Gaussian perturbation `Δ_task`. Tasks in the same
//! cluster therefore share most of their rule, and tasks in different
//! clusters conflict.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::Sample;
use crate::embedding::{generate_synthetic_stream, StreamStats, SyntheticStreamSpec, TaskEmbedding, TaskRecord};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::rng::{self, tag};

pub use crate::loss::{cross_entropy_loss, dice_score, soft_dice_loss};

const MAX_MASK_RETRIES: usize = 10;
const MAX_TRUTH_DRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyWorldConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub pixels: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Per-task perturbation relative to the RMS entry of `W*`.
    pub tau_scale: f64,
    /// Minimum Frobenius distance between the `W*` of distinct clusters.
    pub truth_separation: f64,
    pub seed: u64,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        ToyWorldConfig {
            d_in: 16,
            d_out: 8,
            pixels: 64,
            train_size: 48,
            val_size: 16,
            test_size: 32,
            tau_scale: 0.1,
            truth_separation: 4.0,
            seed: 0,
        }
    }
}

impl ToyWorldConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 || self.pixels == 0 {
            return Err(Error::Config("toy dimensions must be positive".into()));
        }
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return Err(Error::Config("every split needs at least one sample".into()));
        }
        if !(self.tau_scale >= 0.0) {
            return Err(Error::Config("tau_scale must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterGroundTruth {
    pub w_star: Matrix,
    pub readout: Vec<f64>,
    pub tau: f64,
}

impl ClusterGroundTruth {
    /// `tau = tau_scale · ‖W*‖_F / √(d_out·d_in)`.
    pub fn new(w_star: Matrix, readout: Vec<f64>, tau_scale: f64) -> Self {
        let rms = w_star.frobenius_norm() / ((w_star.rows * w_star.cols) as f64).sqrt();
        ClusterGroundTruth {
            w_star,
            readout,
            tau: tau_scale * rms,
        }
    }
}

/// One ground truth per true cluster, pairwise at least
/// `truth_separation` apart in Frobenius norm; the readout is shared.
pub fn generate_ground_truths(world: &ToyWorldConfig, clusters: usize) -> Result<Vec<ClusterGroundTruth>> {
    let mut rng = rng::stream(world.seed, &[tag::GROUND_TRUTH]);
    let readout: Vec<f64> = (0..world.d_out).map(|_| rng.sample(StandardNormal)).collect();
    let mut out: Vec<ClusterGroundTruth> = Vec::with_capacity(clusters);
    let mut draws = 0;
    while out.len() < clusters {
        if draws >= MAX_TRUTH_DRAWS {
            return Err(Error::Generation(format!(
                "could not place {clusters} ground truths {} apart",
                world.truth_separation
            )));
        }
        draws += 1;
        let data = (0..world.d_out * world.d_in)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let w = Matrix::from_vec(world.d_out, world.d_in, data)?;
        let far = out.iter().all(|t| {
            let d: f64 = t.w_star.data.iter().zip(&w.data).map(|(a, b)| (a - b).powi(2)).sum();
            d.sqrt() >= world.truth_separation
        });
        if far {
            out.push(ClusterGroundTruth::new(w, readout.clone(), world.tau_scale));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub task_id: String,
    /// Hidden from the learner; used only for scoring.
    pub true_cluster: usize,
    pub embedding: TaskEmbedding,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Effective labeling vector of a task: `(W* + τΔ)ᵀ v*`.
pub fn task_rule(truth: &ClusterGroundTruth, seed: u64, true_cluster: usize, task_index: usize) -> Vec<f64> {
    let mut rng = rng::stream(seed, &[tag::TOY_TASK, true_cluster as u64, task_index as u64, 0]);
    let mut w = truth.w_star.clone();
    for x in w.data.iter_mut() {
        *x += truth.tau * rng.sample::<f64, _>(StandardNormal);
    }
    w.transpose_mul_vec(&truth.readout)
}

fn draw_split<R: Rng>(rng: &mut R, rule: &[f64], count: usize, pixels: usize) -> Result<Vec<Sample>> {
    let d_in = rule.len();
    (0..count)
        .map(|_| {
            for _ in 0..=MAX_MASK_RETRIES {
                let data: Vec<f64> = (0..pixels * d_in).map(|_| rng.sample(StandardNormal)).collect();
                let features = Matrix::from_vec(pixels, d_in, data)?;
                let mask: Vec<u8> = (0..pixels)
                    .map(|p| u8::from(dot(rule, features.row(p)) > 0.0))
                    .collect();
                let positives = mask.iter().filter(|&&y| y == 1).count();
                if positives > 0 && positives < pixels {
                    return Ok(Sample { features, mask });
                }
            }
            Err(Error::Generation(format!(
                "mask stayed single-class after {MAX_MASK_RETRIES} retries"
            )))
        })
        .collect()
}

/// Draws train/val/test splits for task `task_index` of a cluster.
pub fn generate_toy_task(
    truth: &ClusterGroundTruth,
    record: &TaskRecord,
    task_index: usize,
    world: &ToyWorldConfig,
) -> Result<ToyTask> {
    let rule = task_rule(truth, world.seed, record.true_cluster, task_index);
    let mut rng = rng::stream(
        world.seed,
        &[tag::TOY_TASK, record.true_cluster as u64, task_index as u64, 1],
    );
    Ok(ToyTask {
        task_id: record.task_id.clone(),
        true_cluster: record.true_cluster,
        embedding: record.embedding.clone(),
        train: draw_split(&mut rng, &rule, world.train_size, world.pixels)?,
        val: draw_split(&mut rng, &rule, world.val_size, world.pixels)?,
        test: draw_split(&mut rng, &rule, world.test_size, world.pixels)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyStream {
    pub tasks: Vec<ToyTask>,
    pub truths: Vec<ClusterGroundTruth>,
    pub embedding_stats: StreamStats,
}

/// Embedding stream plus segmentation data, in grouped order.
pub fn generate_toy_stream(spec: &SyntheticStreamSpec, world: &ToyWorldConfig) -> Result<ToyStream> {
    world.validate()?;
    let stream = generate_synthetic_stream(spec)?;
    let truths = generate_ground_truths(world, spec.true_cluster_count)?;
    let mut per_cluster = vec![0usize; spec.true_cluster_count];
    let tasks = stream
        .tasks
        .iter()
        .map(|rec| {
            let j = per_cluster[rec.true_cluster];
            per_cluster[rec.true_cluster] += 1;
            generate_toy_task(&truths[rec.true_cluster], rec, j, world)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyStream {
        tasks,
        truths,
        embedding_stats: stream.stats,
    })
}

/// Writes one JSON file per task, prefixed with its stream position.
pub fn dump_tasks(tasks: &[ToyTask], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, t) in tasks.iter().enumerate() {
        let path = dir.join(format!("{i:03}-{}.json", t.task_id));
        let body = serde_json::to_string(t).expect("tasks serialize");
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_task_dump(dir: &Path) -> Result<Vec<ToyTask>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let body = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&body).map_err(|e| Error::Json {
                path: p.clone(),
                source: e,
            })
        })
        .collect()
}
