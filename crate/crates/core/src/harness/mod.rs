//! Experiment sweeps: config files, run execution, CSV output, plots and the
//! dry-run report behind the command-line tool.

mod config;
mod output;
mod plot;
mod run;
mod validate;

use thiserror::Error;

use crate::dataio::DataError;
use crate::engine::EngineError;
use crate::graphs::GraphError;
use crate::models::ModelError;

pub use config::{
    AutoTag, DataSeed, ExperimentSpec, GridSpec, LibsvmSpec, MnistSpec, OrAuto, OutputSpec, PartitionScheme, RunSpec,
    RunTag, StoppingSpec, SyntheticLogisticSpec, SyntheticMulticlassSpec, TopologySpec, Workload,
};
pub use output::{
    aggregate, read_aggregate_csv, read_run_csv, read_threshold_summary, run_csv_name, threshold_summary,
    write_atomic, AggregateRow, ThresholdSummary, AGGREGATE_FILE, METRIC_COLUMNS, RUN_COLUMNS, SUMMARY_FILE,
    THRESHOLDS_FILE,
};
pub use plot::{emit_plots, plot_run_dir, PLOT_DIR};
pub use run::{
    build_mixing, estimate_sigma, prepare_workload, run_experiment, running_average, Experiment, PreparedWorkload,
    RunRecord, ThresholdHit, RESOLVED_FILE,
};
pub use validate::{validate, CellReport, ValidationReport};

/// Process exit status for each error class.
pub mod exit_code {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const ASSUMPTION: i32 = 4;
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("assumption violated: {0}")]
    Assumption(String),
    #[error("output error: {0}")]
    Output(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => exit_code::CONFIG,
            HarnessError::Data(_) => exit_code::DATA,
            HarnessError::Assumption(_) => exit_code::ASSUMPTION,
            HarnessError::Output(_) => exit_code::FAILURE,
        }
    }
}

impl From<DataError> for HarnessError {
    fn from(e: DataError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

impl From<GraphError> for HarnessError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::Io(_)
            | GraphError::Parse { .. }
            | GraphError::NotDoublyStochastic(_)
            | GraphError::PatternViolation { .. } => HarnessError::Data(e.to_string()),
            GraphError::Domain { name: "lambda_p", .. } => HarnessError::Assumption(e.to_string()),
            _ => HarnessError::Config(e.to_string()),
        }
    }
}

impl From<EngineError> for HarnessError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Assumption(msg) => HarnessError::Assumption(msg),
            EngineError::Config(msg) => HarnessError::Config(msg),
            EngineError::Model(m) => m.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
