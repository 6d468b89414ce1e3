//! Experiment grid over reference-loss weight and target data size, objective
//! evaluation and report emitters.

mod eval;
mod grid;
mod report;

pub use eval::{eval_model, eval_objective, target_speaker_ref, Metrics};
pub use grid::{
    median, median_mse, run_grid, Cell, CellRecord, CellScores, GridResult, GridSpec, SIZE_MAPPING,
};
pub use report::{emit_spectrogram_image, emit_table, emit_timing, emit_trend_chart, CSV_HEADER};
