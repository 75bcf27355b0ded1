//! Experiment harness: config loading, synthetic workloads, cost counters,
//! experiment orchestration and report emission.

mod config;
mod experiment;
mod macs;
mod report;
mod workload;

pub use config::{
    load_config, parse_config, ExperimentConfig, ExperimentGrid, LayoutConfig, PolicySection,
    ValidationSection, WorkloadSection,
};
pub use experiment::{run_experiment, run_validation, ValidationEntry};
pub use macs::{estimate_macs, estimate_prefill_macs_layered, MacEstimate, Phase};
pub use report::{emit_report, format_sig6, render_report, CellMetrics, MetricsReport, ReportFormat};
pub use workload::{decode_inputs, generate_workload, salient_recall, Workload, WorkloadSpec};
