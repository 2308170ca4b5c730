//! `fedhtl compare`: per-client improvement of one run over a baseline run.

use std::path::{Path, PathBuf};

use serde::Serialize;

use fedhtl::evaluation::{build_report, read_results_csv, ClientResult, EvalReport};

use crate::output::ArtifactDir;
use crate::CliError;

#[derive(Debug, Clone)]
pub struct CompareArgs {
    pub baseline: PathBuf,
    pub method: PathBuf,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct ClientImprovement {
    pub client_id: u32,
    pub improvement_pct: f64,
}

#[derive(Debug, Serialize)]
pub struct Overall {
    pub baseline: String,
    pub method: String,
    pub overall_improvement_pct: f64,
    pub clients: Vec<ClientImprovement>,
}

/// Reads `results.csv` from a run directory (or a results file directly).
pub fn read_results(path: &Path) -> Result<Vec<ClientResult>, CliError> {
    let file = if path.is_dir() { path.join("results.csv") } else { path.to_path_buf() };
    let f = std::fs::File::open(&file).map_err(|e| CliError::config(format!("{}: {e}", file.display())))?;
    let results = read_results_csv(f).map_err(|e| CliError::config(format!("{}: {e}", file.display())))?;
    if results.is_empty() {
        return Err(CliError::config(format!("{}: no client rows", file.display())));
    }
    Ok(results)
}

pub fn compare(baseline: &[ClientResult], method: &[ClientResult], baseline_name: &str) -> Result<EvalReport, CliError> {
    let base: Vec<ClientResult> = baseline.iter().map(|r| ClientResult { baseline: None, ..r.clone() }).collect();
    let run: Vec<ClientResult> = method.iter().map(|r| ClientResult { baseline: None, ..r.clone() }).collect();
    build_report(&run, Some((baseline_name, &base)), None).map_err(CliError::config)
}

pub fn cmd_compare(args: &CompareArgs) -> Result<(PathBuf, Overall), CliError> {
    let report = compare(
        &read_results(&args.baseline)?,
        &read_results(&args.method)?,
        &args.baseline.display().to_string(),
    )?;
    let out = args.out.clone().unwrap_or_else(|| args.method.join("compare"));
    let mut dir = ArtifactDir::create(&out)?;
    let mut table = Vec::new();
    report.write_csv(&mut table).map_err(CliError::config)?;
    dir.write("improvements.csv", &table)?;
    let mut bars = Vec::new();
    report.write_bar_chart(&mut bars).map_err(CliError::config)?;
    dir.write("bars.csv", &bars)?;
    let overall = Overall {
        baseline: args.baseline.display().to_string(),
        method: args.method.display().to_string(),
        overall_improvement_pct: report.aggregates.overall_improvement.expect("every client has a baseline"),
        clients: report
            .results
            .iter()
            .zip(&report.improvements)
            .map(|(r, i)| ClientImprovement {
                client_id: r.client_id,
                improvement_pct: i.expect("every client has a baseline"),
            })
            .collect(),
    };
    dir.write_json("overall.json", &overall)?;
    Ok((out, overall))
}
