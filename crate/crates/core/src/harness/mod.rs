//! Episodes, the assembled model, training, evaluation, checkpoints and ablations.

pub mod ablation;
mod checkpoint;
mod config;
mod episode;
mod eval;
mod model;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{RunConfig, Variant};
pub use episode::{sample_episode, Episode, EpisodeImage};
pub use eval::{evaluate, evaluate_episodes, EpisodeRecord, EvalEpisodes, EvalReport, Prediction, Predictor};
pub use model::{
    check_pipeline_gradients, episode_loss, forward, model_layout, pipeline_loss, Bound, Forward, LossTerms, Model,
};
pub use train::{train, train_model, StepLog, TrainReport};
