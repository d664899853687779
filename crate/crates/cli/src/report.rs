//! Run comparison built only from persisted artifacts.
//!
//! `report.csv` has one row per run with these columns, in this order:
//!
//! | column | content |
//! |---|---|
//! | `run` | run directory name |
//! | `method` | `moss`, `fedavg_homogeneous` or `logit_distillation` |
//! | `tag` | method plus active ablations, e.g. `moss-no-file` |
//! | `tiers` | tier architectures, `;`-separated |
//! | `convergence_rounds` | per tier, `none` if the plateau rule never fired |
//! | `final_accuracy` | per tier, last round, 4 decimals |
//! | `mean_final_accuracy` | mean over tiers, 4 decimals |
//! | `cumulative_mb` | total traffic in MB (10^6 bytes), 3 decimals |

use std::fs;
use std::path::{Path, PathBuf};

use hetfl::orchestrator::records::{ROUNDS_FILE, SUMMARY_FILE};
use hetfl::orchestrator::{read_records, read_summary, write_atomic, RoundRecord, RunSummary};

use crate::commands::{CliError, CliResult};
use crate::plot;

pub const COLUMNS: [&str; 8] = [
    "run",
    "method",
    "tag",
    "tiers",
    "convergence_rounds",
    "final_accuracy",
    "mean_final_accuracy",
    "cumulative_mb",
];

pub struct RunData {
    pub name: String,
    pub summary: RunSummary,
    pub records: Vec<RoundRecord>,
}

fn artifact(dir: &Path, file: &str) -> CliResult<PathBuf> {
    let path = dir.join(file);
    if !path.is_file() {
        return Err(CliError::Path {
            path,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "run artifact not found"),
        });
    }
    Ok(path)
}

pub fn load_run(dir: &Path) -> CliResult<RunData> {
    if !dir.is_dir() {
        return Err(CliError::Path {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found"),
        });
    }
    let summary_path = artifact(dir, SUMMARY_FILE)?;
    let rounds_path = artifact(dir, ROUNDS_FILE)?;
    let summary = read_summary(&summary_path).map_err(|e| CliError::Artifact {
        path: summary_path,
        message: e.to_string(),
    })?;
    let records = read_records(&rounds_path).map_err(|e| CliError::Artifact {
        path: rounds_path,
        message: e.to_string(),
    })?;
    let name = dir
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| dir.display().to_string());
    Ok(RunData { name, summary, records })
}

fn method_name(run: &RunData) -> String {
    serde_json::to_value(run.summary.method)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub fn row(run: &RunData) -> [String; 8] {
    let s = &run.summary;
    let convergence = match &s.converged {
        None => String::new(),
        Some(c) => c
            .iter()
            .map(|r| r.map_or("none".to_string(), |t| t.to_string()))
            .collect::<Vec<_>>()
            .join(";"),
    };
    [
        run.name.clone(),
        method_name(run),
        s.tag.clone(),
        s.tiers.join(";"),
        convergence,
        s.final_accuracy.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(";"),
        s.mean_final_accuracy.map_or(String::new(), |a| format!("{a:.4}")),
        format!("{:.3}", s.cumulative_bytes as f64 / 1e6),
    ]
}

pub fn csv_text(runs: &[RunData]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for r in runs {
        w.write_record(row(r))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("CSV of UTF-8 fields"))
}

pub fn text_table(runs: &[RunData]) -> String {
    let rows: Vec<[String; 8]> = runs.iter().map(row).collect();
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([COLUMNS[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(COLUMNS.to_vec());
    out.push('\n');
    out.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    out.push('\n');
    for r in &rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub fn write_report(dirs: &[PathBuf], out: &Path) -> CliResult<()> {
    let runs = dirs.iter().map(|d| load_run(d)).collect::<CliResult<Vec<_>>>()?;
    fs::create_dir_all(out).map_err(|source| CliError::Path { path: out.to_path_buf(), source })?;
    let table = text_table(&runs);
    write_atomic(&out.join("report.csv"), csv_text(&runs)?.as_bytes())?;
    write_atomic(&out.join("report.txt"), table.as_bytes())?;
    write_atomic(&out.join("accuracy.svg"), plot::accuracy_svg(&runs).as_bytes())?;
    print!("{table}");
    Ok(())
}
