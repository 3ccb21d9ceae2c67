//! Output formats: CSV (one row per record), markdown tables, and a JSON dump
//! that can be re-summarized.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::grid::{join, GridSpec, Strategy};
use crate::run::{BenchRecord, RunReport};
use crate::summary::{summarize, SummaryError, SummaryTables, IMPROVEMENT_PAIRS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
    Json,
}

impl Format {
    pub fn file_name(self) -> &'static str {
        match self {
            Format::Csv => "records.csv",
            Format::Markdown => "summary.md",
            Format::Json => "records.json",
        }
    }
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "csv" => Ok(Format::Csv),
            "markdown" | "md" => Ok(Format::Markdown),
            "json" => Ok(Format::Json),
            other => Err(format!(
                "unknown format `{other}` (expected csv, markdown or json)"
            )),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EmitError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Summary(#[from] SummaryError),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> EmitError + '_ {
    move |source| EmitError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub cpu_model: String,
    pub threads: usize,
    pub version: String,
    pub os: String,
    pub arch: String,
    pub deterministic: bool,
}

impl Environment {
    pub fn detect(deterministic: bool) -> Self {
        let cpu_model = fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|info| {
                info.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_owned())
            })
            .unwrap_or_else(|| "unknown".to_owned());
        Self {
            cpu_model,
            threads: rayon::current_num_threads(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            os: std::env::consts::OS.to_owned(),
            arch: std::env::consts::ARCH.to_owned(),
            deterministic,
        }
    }
}

/// Everything a run produced. Written as `records.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dump {
    pub environment: Environment,
    pub grid: GridSpec,
    pub report: RunReport,
    pub summary: Option<SummaryTables>,
}

impl Dump {
    pub fn load(path: &Path) -> Result<Self, EmitError> {
        let text = fs::read_to_string(path).map_err(io(path))?;
        serde_json::from_str(&text).map_err(|source| EmitError::Json {
            path: path.to_owned(),
            source,
        })
    }
}

/// Column order of the CSV output.
pub const CSV_HEADER: [&str; 20] = [
    "strategy",
    "pass",
    "dtype",
    "rank",
    "batch",
    "heads",
    "extents",
    "head_dim",
    "window",
    "dilation",
    "causal",
    "median_seconds",
    "repeats",
    "peak_transient_bytes",
    "flops",
    "bytes",
    "intensity",
    "q_tile",
    "kv_tile",
    "problem",
];

fn csv_row(r: &BenchRecord) -> [String; 20] {
    let p = &r.problem;
    let axes = |f: fn(&nattn_core::autotune::AxisKey) -> String| {
        p.axes.iter().map(f).collect::<Vec<_>>().join("x")
    };
    [
        r.strategy.to_string(),
        r.pass.to_string(),
        p.dtype.to_string(),
        p.rank().to_string(),
        p.batch.to_string(),
        p.heads.to_string(),
        join(&p.extents),
        p.head_dim.to_string(),
        axes(|a| a.window.to_string()),
        axes(|a| a.dilation.to_string()),
        axes(|a| u8::from(a.causal).to_string()),
        r.median_seconds.to_string(),
        r.repeats.to_string(),
        r.peak_transient_bytes
            .map(|b| b.to_string())
            .unwrap_or_default(),
        r.flops.to_string(),
        r.bytes.to_string(),
        r.intensity.to_string(),
        join(&r.q_tile),
        join(&r.kv_tile),
        p.to_string(),
    ]
}

pub fn write_csv(records: &[BenchRecord], path: &Path) -> Result<(), EmitError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record(csv_row(r))?;
    }
    w.flush().map_err(io(path))?;
    Ok(())
}

/// Percent cell of the matched matrix: one decimal, e.g. `98.7 %`.
pub fn percent_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.1} %"))
        .unwrap_or_else(|| "-".to_owned())
}

/// Improvement cell: rounded to a whole percent without the sign of zero,
/// e.g. `548` for +548 %.
pub fn improvement_cell(v: f64) -> String {
    let r = v.round();
    if r == 0.0 {
        "0".to_owned()
    } else {
        format!("{r:.0}")
    }
}

fn rank_title(rank: usize) -> String {
    format!("{rank}-dimensional neighborhood attention")
}

pub fn render_markdown(tables: &SummaryTables) -> String {
    let mut md = String::new();
    for section in &tables.sections {
        let _ = writeln!(md, "# {} pass, {}\n", section.pass, section.dtype);
        let _ = writeln!(md, "## % of problems matched or outperformed\n");
        for rank in &section.ranks {
            let _ = writeln!(
                md,
                "### {} ({} problems)\n",
                rank_title(rank.rank),
                rank.problems
            );
            let labels: Vec<&str> = rank.strategies.iter().map(|s| s.label()).collect();
            let _ = writeln!(md, "| NA kernel | {} |", labels.join(" | "));
            let _ = writeln!(md, "|---|{}", "---|".repeat(labels.len()));
            for (a, row) in rank.strategies.iter().zip(&rank.matched) {
                let cells: Vec<String> = row.iter().map(|&c| percent_cell(c)).collect();
                let _ = writeln!(md, "| **{}** | {} |", a.label(), cells.join(" | "));
            }
            md.push('\n');
        }
        let _ = writeln!(md, "## Improvement breakdown (%)\n");
        let mut head = String::from("| Dim |");
        let mut sub = String::from("| |");
        for (new, base) in IMPROVEMENT_PAIRS {
            let _ = write!(
                head,
                " {} over {} | | |",
                new.label(),
                if base == Strategy::Naive {
                    "naive"
                } else {
                    base.label()
                }
            );
            sub.push_str(" Average | Min | Max |");
        }
        let _ = writeln!(
            md,
            "{head}\n|---|{}\n{sub}",
            "---|".repeat(3 * IMPROVEMENT_PAIRS.len())
        );
        for rank in &section.ranks {
            let _ = write!(md, "| **{}-D** |", rank.rank);
            for imp in &rank.improvements {
                match &imp.stats {
                    Some(s) => {
                        let _ = write!(
                            md,
                            " {} | {} | {} |",
                            improvement_cell(s.average),
                            improvement_cell(s.min),
                            improvement_cell(s.max)
                        );
                    }
                    None => md.push_str(" - | - | - |"),
                }
            }
            md.push('\n');
        }
        md.push('\n');
    }
    md
}

/// Writes each requested format into `dir` and returns the written paths.
pub fn emit(dump: &Dump, formats: &[Format], dir: &Path) -> Result<Vec<PathBuf>, EmitError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut written = Vec::new();
    for &f in formats {
        let path = dir.join(f.file_name());
        match f {
            Format::Csv => write_csv(&dump.report.records, &path)?,
            Format::Markdown => {
                let tables = match &dump.summary {
                    Some(t) => t.clone(),
                    None => summarize(&dump.report.records)?,
                };
                fs::write(&path, render_markdown(&tables)).map_err(io(&path))?;
            }
            Format::Json => {
                let text =
                    serde_json::to_string_pretty(dump).map_err(|source| EmitError::Json {
                        path: path.clone(),
                        source,
                    })?;
                fs::write(&path, text).map_err(io(&path))?;
            }
        }
        written.push(path);
    }
    Ok(written)
}
