//! `fedhtl run`: repeats an experiment and writes its artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use fedhtl::evaluation::{build_report, mean_std, AggregateRecord, ClientResult, EvalReport, MetricKind};
use fedhtl::runtime::{run_experiment, Federation, History, RunErrorKind};

use crate::config::{self, Experiment};
use crate::output::{sha256_hex, ArtifactDir};
use crate::{exit, CliError};

#[derive(Debug, Clone)]
pub struct RunArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// What a successful run produced.
#[derive(Debug)]
pub struct RunSummary {
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub summary: Summary,
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClientSummary {
    pub client_id: u32,
    pub metric: MetricKind,
    pub value: MeanStd,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub strategy: String,
    pub seeds: Vec<u64>,
    pub equal: MeanStd,
    pub data_weighted: MeanStd,
    pub custom: Option<MeanStd>,
    pub clients: Vec<ClientSummary>,
    /// Same layout for FedMAML's results without evaluation-time adaptation.
    pub unadapted: Option<Vec<ClientSummary>>,
}

fn output_dir(args: &RunArgs, exp: &Experiment) -> PathBuf {
    if let Some(o) = &args.out {
        return o.clone();
    }
    if let Some(o) = &exp.file.output {
        return o.clone();
    }
    let stem = args.config.file_stem().and_then(|s| s.to_str()).unwrap_or("experiment");
    Path::new("runs").join(stem)
}

fn report(results: &[ClientResult], custom: Option<&[f64]>) -> Result<EvalReport, CliError> {
    build_report(results, None, custom).map_err(|e| CliError {
        code: exit::NUMERIC,
        message: format!("report: {e}"),
    })
}

fn csv_bytes(report: &EvalReport) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    report.write_csv(&mut buf).map_err(CliError::config)?;
    Ok(buf)
}

fn write_history(dir: &mut ArtifactDir, history: &History, payloads: bool) -> Result<(), CliError> {
    let mut tsv = Vec::new();
    history.write_tsv(&mut tsv)?;
    dir.write("history.tsv", &tsv)?;
    let mut log = Vec::new();
    history.write_log(&mut log)?;
    dir.write("comm.log", &log)?;
    if payloads {
        let mut text = String::from("round\tsender\treceiver\tkind\tpayload\n");
        for t in &history.transfers {
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                t.round,
                t.sender,
                t.receiver,
                t.kind.as_str(),
                hex::encode(&t.payload)
            ));
        }
        dir.write("payloads.log", text.as_bytes())?;
    }
    Ok(())
}

fn failure_code(kind: &RunErrorKind) -> u8 {
    match kind {
        RunErrorKind::Config(_) => exit::CONFIG,
        RunErrorKind::Violation { .. } => exit::VIOLATION,
        RunErrorKind::Numeric { .. } | RunErrorKind::Strategy { .. } => exit::NUMERIC,
    }
}

fn summarize(runs: &[(Vec<ClientResult>, Option<Vec<ClientResult>>)]) -> Vec<ClientSummary> {
    runs[0]
        .0
        .iter()
        .enumerate()
        .map(|(i, r)| ClientSummary {
            client_id: r.client_id,
            metric: r.metric,
            value: MeanStd::of(&runs.iter().map(|x| x.0[i].value).collect::<Vec<_>>()),
        })
        .collect()
}

/// Mean per-client results in the per-repeat table format.
fn mean_results(runs: &[Vec<ClientResult>]) -> Vec<ClientResult> {
    runs[0]
        .iter()
        .enumerate()
        .map(|(i, r)| ClientResult {
            value: mean_std(&runs.iter().map(|x| x[i].value).collect::<Vec<_>>()).0,
            ..r.clone()
        })
        .collect()
}

pub fn cmd_run(args: &RunArgs) -> Result<RunSummary, CliError> {
    let exp = config::load(&args.config, args.seed)?;
    Federation::new(&exp.repeat_config(0), exp.datasets.clone()).map_err(|e| CliError::config(e.kind))?;

    let config_hash = sha256_hex(&exp.bytes);
    let out = output_dir(args, &exp);
    let mut top = ArtifactDir::create(&out)?;
    let custom = exp.file.custom_weights.as_deref();
    let mut runs = Vec::new();
    let mut aggregates: Vec<AggregateRecord> = Vec::new();
    let seeds: Vec<u64> = (0..exp.file.repeats).map(|r| exp.seed_of(r)).collect();

    for (r, &seed) in seeds.iter().enumerate() {
        let cfg = exp.repeat_config(r as u32);
        let name = format!("seed-{seed}");
        let mut dir = ArtifactDir::create(&out.join(&name))?;
        match run_experiment(&cfg, exp.datasets.clone()) {
            Ok(outcome) => {
                write_history(&mut dir, &outcome.history, cfg.record_payloads)?;
                let rep = report(&outcome.results, custom)?;
                dir.write("results.csv", &csv_bytes(&rep)?)?;
                let mut agg = BTreeMap::new();
                agg.insert("adapted", rep.aggregates.clone());
                if let Some(u) = &outcome.unadapted {
                    let urep = report(u, custom)?;
                    dir.write("results_unadapted.csv", &csv_bytes(&urep)?)?;
                    agg.insert("unadapted", urep.aggregates);
                }
                dir.write_json("aggregate.json", &agg)?;
                let dir = dir.finish(&config_hash, seed, "ok")?;
                top.adopt(&name, &dir);
                aggregates.push(rep.aggregates);
                runs.push((outcome.results, outcome.unadapted));
            }
            Err(err) => {
                write_history(&mut dir, &err.history, cfg.record_payloads)?;
                dir.write_json(
                    "error.json",
                    &serde_json::json!({ "error": err.kind.to_string(), "detail": &err.kind }),
                )?;
                let code = failure_code(&err.kind);
                let dir = dir.finish(&config_hash, seed, "failed")?;
                top.adopt(&name, &dir);
                top.finish(&config_hash, exp.seed, "failed")?;
                return Err(CliError {
                    code,
                    message: format!("seed {seed}: {}", err.kind),
                });
            }
        }
    }

    let col = |f: fn(&AggregateRecord) -> f64| MeanStd::of(&aggregates.iter().map(f).collect::<Vec<_>>());
    let unadapted: Option<Vec<_>> = runs.iter().map(|r| r.1.clone()).collect();
    let summary = Summary {
        strategy: exp.file.strategy.kind.as_str().to_string(),
        seeds: seeds.clone(),
        equal: col(|a| a.equal),
        data_weighted: col(|a| a.data_weighted),
        custom: custom.map(|_| col(|a| a.custom.unwrap_or(f64::NAN))),
        clients: summarize(&runs),
        unadapted: unadapted.as_ref().map(|u| {
            let pairs: Vec<_> = u.iter().map(|x| (x.clone(), None)).collect();
            summarize(&pairs)
        }),
    };
    top.write_json("summary.json", &summary)?;
    let primary: Vec<Vec<ClientResult>> = runs.iter().map(|r| r.0.clone()).collect();
    top.write("results.csv", &csv_bytes(&report(&mean_results(&primary), custom)?)?)?;
    if let Some(u) = &unadapted {
        top.write("results_unadapted.csv", &csv_bytes(&report(&mean_results(u), custom)?)?)?;
    }
    top.finish(&config_hash, exp.seed, "ok")?;
    Ok(RunSummary { out, seeds, summary })
}
