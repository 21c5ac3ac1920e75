//! Knowledge tracing: mastery-conditioned correctness and code prediction.

pub mod autodiff;
pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod model;
pub mod tokenizer;
pub mod tracker;
pub mod train;

pub use autodiff::{Grads, Matrix, ParamSet, Tape, Var};
pub use backbone::{Backbone, BackboneConfig, TinyTransformer};
pub use baselines::{baseline_predict, BaselineKind};
pub use checkpoint::{
    load_checkpoint, mastery_report, prediction_dump, save_checkpoint, write_atomic,
    write_mastery_csv, write_prediction_csv, CheckpointMeta, MasteryRecord, PredictionRecord,
};
pub use model::{
    aggregate_kc_mastery, bce_loss, soften_mastery, total_loss, KcgenKt, LossBreakdown,
    StudentPrediction, SubmissionGraph,
};
pub use tokenizer::Tokenizer;
pub use tracker::{LstmTracker, TrackerState};
pub use train::{train, EpochLog, TrainingConfig};
