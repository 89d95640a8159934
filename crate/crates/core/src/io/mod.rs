//! File formats: configuration, event and covariate tables, counts, and
//! reports.

mod ingest;
mod report;

pub use ingest::{
    ingest, ingest_readers, read_counts, read_events, write_events, write_subjects, CovariateRule,
    IngestConfig, Ingested,
};
pub use report::{
    BaselineRow, Comparison, CountRow, FitSection, Inputs, ModelRow, ParamRow, Report,
    SimulationSection, SCHEMA_VERSION,
};
