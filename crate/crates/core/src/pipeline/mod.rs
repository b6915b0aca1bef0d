//! Model assembly, training, evaluation, checkpoints and ablation runs.

mod ablation;
mod checkpoint;
mod eval;
mod gradcheck;
mod model;
mod train;

pub use ablation::{ablation_matrix, loss_matrix, mean_accuracy, table2, table2_rows, table3, to_csv, AblationRow, AblationRun, CSV_HEADER};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{evaluate, predict_all, segment_accuracy, EvalReport};
pub use gradcheck::{gradcheck_model, ModuleError, GRADCHECK_TOL};
pub use model::{build_model, CereSet, EscmParams, ForwardOutput, HeadOutput, HeadParams, Model};
pub use train::{train, EpochRecord, TrainOutcome, Trainer, TRAIN_STREAM};
