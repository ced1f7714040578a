//! Experiment configuration, the end-to-end pipeline and the report bundle.

mod config;
mod pipeline;
mod report;

pub use config::{default_arms, ExperimentConfig};
pub use pipeline::{
    arm_log_path, evaluate, fit, mean_one_deviation, normalized_level_variance, read_log_file, run_arm,
    run_pipeline, run_pipeline_with, run_to_dir, save_log, save_simulation, simulate_warmup,
    within_cell_reorderings, ArmOutcome,
    EvalContext, Fitted, Simulation, ARMS_DIR, MODEL_FILE, SCHEMA_FILE, TABLE_FILE, UNIVERSE_FILE, WARMUP_LOG,
};
pub use report::{
    fig3_csv, fig4_calibration_csv, fig4_shift_csv, table1_csv, ArmRow, Check, DeltaRow, Diagnostics,
    ModeCalibration, ModeLevels, ModeShift, Report, TABLE1_HEADER,
};
