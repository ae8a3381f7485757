//! Data ingestion, the evaluation protocol, metrics, and report output.

pub mod panel;
pub mod protocol;
pub mod report;

pub use panel::{emit_csv, ingest_csv, ClockTime, CurvePanel, PanelDay, SchemaConfig};
pub use protocol::{cover_width, run_protocol, BandConfig, DimSpec, ProtocolConfig, TrainingMode};
pub use report::{emit_report, DayOutcome, EvalReport, ReportFormat, SummaryStats};
