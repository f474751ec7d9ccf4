//! Run configuration, the training loop, and the commands behind the CLI.

mod commands;
mod config;
mod train;

pub use commands::{
    ablation_grid, cell_dir, cmd_ablate, cmd_embed, cmd_eval, cmd_gen_data, cmd_train, load_dataset, load_run, windows_of,
    AblationRow, AblationSummary, CellResult, DataPart, Dataset, EmbedSummary, GenDataSummary, InferenceArgs,
    LoadedRun, TrainSummary, ABLATION_FILE, ABLATION_TABLE_FILE, BETA_SWEEP_FILE, CHECKPOINT_FILE, CONFIG_FILE,
    DATASET_FILE, EMBEDDINGS_FILE, EPOCH_LOG_FILE, LAST_CHECKPOINT_FILE, METRICS_JSON_FILE, METRICS_TEXT_FILE,
    MODEL_FILE, PREDICTIONS_FILE, TRAIN_LOG_FILE, VOCAB_FILE,
};
pub use config::{DataSection, EvalSection, LossSection, ModelSection, OptimSection, Regime, RunConfig};
pub use train::{
    build_step, train, validation_error, EpochReport, Generator, StepGraph, StepReport, StepRngs, TrainOutcome,
};
