//! Benchmark harness for the neighborhood attention strategies: expand a
//! problem grid, gate a subsample against the reference, time every strategy
//! and summarize the results as "matched or outperformed" matrices and
//! improvement breakdowns.

pub mod emit;
pub mod grid;
pub mod run;
pub mod summary;

pub use emit::{emit, render_markdown, Dump, Environment, Format};
pub use grid::{CausalSpec, GridSpec, PassKind, ProblemId, Strategy};
pub use run::{run_grid, BenchError, BenchRecord, CoreRunner, RunOptions, RunReport, Runner};
pub use summary::{improvement_pct, summarize, SummaryTables};
