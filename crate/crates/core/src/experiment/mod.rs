//! Training, adaptation, evaluation and the fold-level experiment driver.

mod adapt;
mod eval;
mod report;
mod run;
mod sweep;
mod train;

pub use adapt::{adapt, AdaptConfig, AdaptMode};
pub use eval::{
    confusion_matrix, evaluate_per_frame, evaluate_voted, majority_vote, predictions, score, voted_accuracy,
    EvalResult, WindowAccuracy,
};
pub use report::{
    compare, improvement, improvements_csv, EvalReport, FoldFailure, GroupSummary, Improvement, MeanStd, ResultRow,
    Summary, CSV_HEADER, UNADAPTED,
};
pub use run::{run_experiment, AdaptedModel, ExperimentOutcome, ExperimentSpec, FoldOutcome};
pub use sweep::{parse_k_range, transfusion_sweep, SweepCell, SweepTable, EPOCH_CHECKPOINTS};
pub use train::{
    loss_and_accuracy, train, train_guarded, EarlyStopping, EpochLog, EpochRecord, LeakGuard, StopDecision,
    TrainConfig, Trained, EVAL_CHUNK,
};
