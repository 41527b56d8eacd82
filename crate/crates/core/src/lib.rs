//! Online task-structure discovery with a Chinese Restaurant Process and
//! structure-aware continual learning with per-cluster low-rank adapters
//! and intra-cluster elastic weight consolidation.

pub mod adapter;
pub mod config;
pub mod crp;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod ewc;
pub mod linalg;
pub mod loss;
pub mod rng;
pub mod similarity;
pub mod toy;
pub mod trainer;

pub use crate::adapter::{AdapterBank, BaseModel, LossWeights, LowRankAdapter, Sample};
pub use crate::crp::{AssignmentDecision, Choice, CrpState, ModalityCluster};
pub use crate::embedding::{
    generate_synthetic_stream, load_prompt_embeddings, task_embedding, PromptEmbedding, SyntheticStreamSpec,
    TaskEmbedding,
};
pub use crate::error::{Error, ErrorClass, Result};
pub use crate::ewc::{ConsolidationState, FisherDiagonal};
pub use crate::similarity::{SimilarityModel, WelfordAccumulator};
pub use crate::toy::{generate_toy_stream, ToyTask, ToyWorldConfig};
pub use crate::trainer::{average_dice, forgetting_rate, run_stream, ContinualLearner, RunLedger, TrainConfig};
