//! Ablation suites, result tables and plots over completed runs.

pub mod plot;
pub mod report;
pub mod suite;

pub use plot::{line_chart, Series};
pub use report::{collect_runs, read_run, render_csv, render_markdown, summarize, ReportRow, RunRecord, Stat};
pub use suite::{apply_delta, run_suite, slug, AblationSuite, CellOutcome, CellSpec, SuiteRow, CELL_FILE};
