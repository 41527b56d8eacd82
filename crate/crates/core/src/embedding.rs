//! Task-level embeddings: ingestion of pre-encoded prompt vectors and a
//! synthetic generator of cluster-structured streams.

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::rng::{self, tag};

/// Norm below which a task embedding is considered degenerate.
pub const DEGENERATE_NORM: f64 = 1e-6;

/// A single unit-norm prompt vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    pub prompt_id: String,
    pub vector: Vec<f64>,
}

impl PromptEmbedding {
    /// L2-normalizes `raw`. Zero or non-finite vectors are rejected.
    pub fn normalized(prompt_id: impl Into<String>, raw: Vec<f64>) -> Result<Self> {
        let prompt_id = prompt_id.into();
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(Error::DegenerateInput(format!(
                "prompt {prompt_id} has non-finite components"
            )));
        }
        let n = norm(&raw);
        if n == 0.0 {
            return Err(Error::DegenerateInput(format!("prompt {prompt_id} is the zero vector")));
        }
        Ok(PromptEmbedding {
            prompt_id,
            vector: raw.into_iter().map(|x| x / n).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    File,
    Synthetic,
}

/// Mean of a task's normalized prompt vectors. Deliberately not renormalized:
/// its norm reflects how coherent the prompts are.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbedding {
    pub task_id: String,
    pub vector: Vec<f64>,
    pub source: EmbeddingSource,
}

impl TaskEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.vector)
    }

    pub fn is_degenerate(&self) -> bool {
        self.norm() < DEGENERATE_NORM
    }
}

/// Averages prompt vectors into a task embedding.
pub fn task_embedding(
    task_id: impl Into<String>,
    prompts: &[PromptEmbedding],
    source: EmbeddingSource,
) -> Result<TaskEmbedding> {
    let task_id = task_id.into();
    let first = prompts.first().ok_or(Error::EmptyTask)?;
    let dim = first.dim();
    let mut mean = vec![0.0; dim];
    for p in prompts {
        if p.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: p.dim(),
            });
        }
        for (m, x) in mean.iter_mut().zip(&p.vector) {
            *m += x;
        }
    }
    let count = prompts.len() as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    let out = TaskEmbedding {
        task_id,
        vector: mean,
        source,
    };
    if out.is_degenerate() {
        log::warn!(
            "task {} has a near-zero mean embedding (norm {:.3e}); prompts cancel out",
            out.task_id,
            out.norm()
        );
    }
    Ok(out)
}

#[derive(Deserialize)]
struct JsonlLine {
    task_id: String,
    prompt_id: String,
    vector: Vec<f64>,
}

/// Prompts grouped by task, in file order.
pub type PromptGroups = Vec<(String, Vec<PromptEmbedding>)>;

pub fn load_prompt_embeddings(path: &Path) -> Result<PromptGroups> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_prompt_embeddings(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses the JSONL prompt format: one `{"task_id", "prompt_id", "vector"}`
/// object per line, lines of a task contiguous. Duplicate prompt ids within a
/// task keep their first occurrence.
pub fn read_prompt_embeddings<R: BufRead>(reader: R) -> Result<PromptGroups> {
    let mut groups: PromptGroups = Vec::new();
    let mut finished: HashSet<String> = HashSet::new();
    let mut seen_prompts: HashSet<String> = HashSet::new();
    let mut dim: Option<usize> = None;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        match dim {
            None => dim = Some(rec.vector.len()),
            Some(d) if d != rec.vector.len() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: rec.vector.len(),
                })
            }
            _ => {}
        }
        let prompt = PromptEmbedding::normalized(rec.prompt_id, rec.vector).map_err(|e| match e {
            Error::DegenerateInput(msg) => Error::DegenerateInput(format!("line {line_no}: {msg}")),
            other => other,
        })?;

        let same_task = groups.last().is_some_and(|(id, _)| *id == rec.task_id);
        if !same_task {
            if finished.contains(&rec.task_id) {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("lines of task {} are not contiguous", rec.task_id),
                });
            }
            if let Some((prev, _)) = groups.last() {
                finished.insert(prev.clone());
            }
            seen_prompts.clear();
            groups.push((rec.task_id.clone(), Vec::new()));
        }
        if seen_prompts.insert(prompt.prompt_id.clone()) {
            groups.last_mut().expect("group pushed above").1.push(prompt);
        }
    }
    Ok(groups)
}

/// Parameters of a synthetic cluster-structured embedding stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticStreamSpec {
    pub true_cluster_count: usize,
    pub tasks_per_cluster: Vec<usize>,
    pub embedding_dim: usize,
    pub intra_spread: f64,
    /// Upper bound on the pairwise cosine between true centroids.
    pub centroid_min_separation: f64,
    pub prompts_per_task: usize,
    pub seed: u64,
}

impl Default for SyntheticStreamSpec {
    fn default() -> Self {
        SyntheticStreamSpec::standard(0)
    }
}

const MAX_CENTROID_DRAWS: usize = 10_000;

impl SyntheticStreamSpec {
    /// Five clusters with the 1/5/1/7/2 task layout of a 16-task stream.
    pub fn standard(seed: u64) -> Self {
        SyntheticStreamSpec {
            true_cluster_count: 5,
            tasks_per_cluster: vec![1, 5, 1, 7, 2],
            embedding_dim: 512,
            intra_spread: 0.02,
            centroid_min_separation: 0.3,
            prompts_per_task: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InfeasibleSpec(m.to_string()));
        if self.true_cluster_count == 0 {
            return bad("true_cluster_count must be positive");
        }
        if self.tasks_per_cluster.len() != self.true_cluster_count {
            return bad("tasks_per_cluster must list one count per cluster");
        }
        if self.tasks_per_cluster.contains(&0) {
            return bad("every cluster needs at least one task");
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive");
        }
        if !(self.intra_spread > 0.0 && self.intra_spread.is_finite()) {
            return bad("intra_spread must be positive");
        }
        if !(-1.0..=1.0).contains(&self.centroid_min_separation) {
            return bad("centroid_min_separation must lie in [-1, 1]");
        }
        if self.prompts_per_task == 0 {
            return bad("prompts_per_task must be positive");
        }
        Ok(())
    }

    pub fn task_count(&self) -> usize {
        self.tasks_per_cluster.iter().sum()
    }
}

/// One task of a stream at the embedding level. `true_cluster` is for
/// evaluation only and never reaches the CRP engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub true_cluster: usize,
    pub prompts: Vec<PromptEmbedding>,
    pub embedding: TaskEmbedding,
}

/// Pairwise task-embedding similarity statistics of a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamStats {
    pub intra_mean: Option<f64>,
    pub intra_std: Option<f64>,
    pub inter_mean: Option<f64>,
    pub inter_std: Option<f64>,
    pub intra_pairs: usize,
    pub inter_pairs: usize,
}

impl StreamStats {
    pub fn delta(&self) -> Option<f64> {
        Some(self.intra_mean? - self.inter_mean?)
    }

    /// `Δ > 2(σ_intra + σ_inter)`.
    pub fn separated(&self) -> bool {
        match (self.delta(), self.intra_std, self.inter_std) {
            (Some(d), Some(si), Some(se)) => d > 2.0 * (si + se),
            _ => false,
        }
    }

    pub fn measure(tasks: &[TaskRecord]) -> Self {
        let mut intra = Vec::new();
        let mut inter = Vec::new();
        for (i, a) in tasks.iter().enumerate() {
            for b in &tasks[i + 1..] {
                let s = dot(&a.embedding.vector, &b.embedding.vector);
                if a.true_cluster == b.true_cluster {
                    intra.push(s);
                } else {
                    inter.push(s);
                }
            }
        }
        let (intra_mean, intra_std) = mean_std(&intra);
        let (inter_mean, inter_std) = mean_std(&inter);
        StreamStats {
            intra_mean,
            intra_std,
            inter_mean,
            inter_std,
            intra_pairs: intra.len(),
            inter_pairs: inter.len(),
        }
    }
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStream {
    pub centroids: Vec<Vec<f64>>,
    pub tasks: Vec<TaskRecord>,
    pub stats: StreamStats,
}

fn gaussian_vec<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn sample_centroids(spec: &SyntheticStreamSpec) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng::stream(spec.seed, &[tag::CENTROIDS]);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(spec.true_cluster_count);
    let mut draws = 0;
    while centroids.len() < spec.true_cluster_count {
        if draws >= MAX_CENTROID_DRAWS {
            return Err(Error::InfeasibleSpec(format!(
                "could not place {} centroids with pairwise cosine <= {} in dimension {} \
                 after {MAX_CENTROID_DRAWS} draws",
                spec.true_cluster_count, spec.centroid_min_separation, spec.embedding_dim
            )));
        }
        draws += 1;
        let mut c = gaussian_vec(&mut rng, spec.embedding_dim);
        let n = norm(&c);
        if n == 0.0 {
            continue;
        }
        c.iter_mut().for_each(|x| *x /= n);
        if centroids.iter().all(|o| dot(o, &c) <= spec.centroid_min_separation) {
            centroids.push(c);
        }
    }
    Ok(centroids)
}

/// Draws a cluster-structured stream in grouped order (all tasks of cluster
/// 0, then cluster 1, ...). Each prompt is `normalize(c + σ·z)` and the task
/// embedding is the mean of `prompts_per_task` prompts.
pub fn generate_synthetic_stream(spec: &SyntheticStreamSpec) -> Result<SyntheticStream> {
    spec.validate()?;
    let centroids = sample_centroids(spec)?;
    let mut tasks = Vec::with_capacity(spec.task_count());
    for (k, (&count, centroid)) in spec.tasks_per_cluster.iter().zip(&centroids).enumerate() {
        for j in 0..count {
            let mut rng = rng::stream(spec.seed, &[tag::TASK_EMBEDDING, k as u64, j as u64]);
            let task_id = format!("k{k}-t{j}");
            let prompts = (0..spec.prompts_per_task)
                .map(|m| {
                    let raw: Vec<f64> = centroid
                        .iter()
                        .map(|&c| c + spec.intra_spread * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    PromptEmbedding::normalized(format!("p{m}"), raw)
                })
                .collect::<Result<Vec<_>>>()?;
            let embedding = task_embedding(task_id.clone(), &prompts, EmbeddingSource::Synthetic)?;
            tasks.push(TaskRecord {
                task_id,
                true_cluster: k,
                prompts,
                embedding,
            });
        }
    }
    let stats = StreamStats::measure(&tasks);
    Ok(SyntheticStream {
        centroids,
        tasks,
        stats,
    })
}
