//! Config-driven pipeline: pretrain, subspace, inference and evaluation per
//! trial, plus plot data and comparison tables built from the artifacts.

mod artifacts;
mod compare;
mod config;
mod plot;
mod run;

pub use artifacts::{
    mean_std, Aggregate, InferenceSummary, ResultRecord, StageTimes, TrialPaths, TrialRecord,
};
pub use compare::{compare, Cell, Comparison, Metric};
pub use config::{
    blob_hash, Algorithm, DataSection, ExperimentConfig, ExperimentSection, InferenceSection,
    Method, NetworkSection, PcaPrior, Stage, SubspaceSection,
};
pub use plot::{plot_data, BandRow, Grid, PlotData};
pub use run::{run_experiment, trial_data, trial_seed, RunOptions, TrialData, TrialPredictor};
