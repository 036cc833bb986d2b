use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSample, EOS};
use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::nn::rng::derive_seed;
use crate::spec::{complete_round_count, generate, measure_tau, speedup_proxy, AcceptanceRecord, SpecConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TrainingFree,
    FullFt,
    EdaBase,
    EdaSelfgenSelected,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::TrainingFree,
        Method::FullFt,
        Method::EdaBase,
        Method::EdaSelfgenSelected,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::TrainingFree => "training_free",
            Method::FullFt => "full_ft",
            Method::EdaBase => "eda_base",
            Method::EdaSelfgenSelected => "eda_selfgen_selected",
        }
    }
}

/// One evaluated cell. `study` says which comparison the row belongs to
/// (`methods`, `sweep` or `transfer`) and `selection` how its training data
/// was chosen (or, for `transfer` rows, which target was paired).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: Method,
    pub domain_tag: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub temperature: f64,
    pub tau: f64,
    pub speedup_proxy: f64,
    pub trainable_params: usize,
    pub train_steps: usize,
    pub data_fraction: f64,
    pub study: String,
    pub selection: String,
}

pub const CSV_HEADER: &str = "method,domain_tag,K,temperature,tau,speedup_proxy,trainable_params,train_steps,data_fraction,study,selection";

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub tau: f64,
    pub speedup_proxy: f64,
    pub complete_rounds: usize,
    pub records: Vec<AcceptanceRecord>,
}

/// Upper bound on passes over the prompt list when chasing `min_rounds`.
const MAX_PASSES: usize = 50;

/// Speculative generation over every prompt, revisiting the list with fresh
/// seeds until `min_rounds` complete rounds are collected. Prompt `i` of
/// pass `p` always uses seed `derive_seed(seed, p·N + i)`, so two drafts
/// evaluated with the same `seed` see the same schedule.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_cell(
    target: &dyn LanguageModel,
    draft: &dyn LanguageModel,
    prompts: &[CorpusSample],
    k: usize,
    temperature: f64,
    min_rounds: usize,
    max_new_tokens: usize,
    draft_cost_ratio: f64,
    seed: u64,
) -> Result<CellResult> {
    if prompts.is_empty() {
        return Err(Error::Validation("no evaluation prompts".into()));
    }
    let n = prompts.len() as u64;
    let mut records = Vec::new();
    for pass in 0..MAX_PASSES as u64 {
        for (i, p) in prompts.iter().enumerate() {
            let cfg = SpecConfig {
                k,
                temperature,
                max_new_tokens,
                seed: derive_seed(seed, pass * n + i as u64),
                eos: Some(EOS),
            };
            records.push(generate(target, draft, &p.prompt_tokens, &cfg)?.record);
        }
        if complete_round_count(&records) >= min_rounds {
            break;
        }
    }
    Ok(CellResult {
        tau: measure_tau(&records)?,
        speedup_proxy: speedup_proxy(&records, draft_cost_ratio)?,
        complete_rounds: complete_round_count(&records),
        records,
    })
}

/// Writes `metrics.csv` and `plotdata.json` into `out_dir`.
pub fn emit_report(rows: &[MetricsRow], out_dir: &Path, manifest_hash: &str) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Validation("no metrics rows to report".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let plot_path = out_dir.join("plotdata.json");
    let text = serde_json::to_string_pretty(&plot_data(rows, manifest_hash)).expect("plot data serialises");
    std::fs::write(&plot_path, text + "\n").map_err(|e| Error::io(&plot_path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(Error::Format(format!("unexpected header {header:?}")));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct Point {
    x: f64,
    tau: f64,
    speedup_proxy: f64,
}

/// Rows regrouped per figure: method bars per (K, T), one budget curve per
/// selection strategy, and the base-versus-domain pairing bars.
fn plot_data(rows: &[MetricsRow], manifest_hash: &str) -> serde_json::Value {
    let cell = |r: &MetricsRow| format!("K={} T={}", r.k, r.temperature);
    let mut bars: BTreeMap<String, BTreeMap<&str, f64>> = BTreeMap::new();
    let mut curves: BTreeMap<String, Vec<Point>> = BTreeMap::new();
    let mut transfer: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for r in rows {
        match r.study.as_str() {
            "methods" => {
                bars.entry(cell(r)).or_default().insert(r.method.name(), r.tau);
            }
            "sweep" => curves.entry(r.selection.clone()).or_default().push(Point {
                x: r.data_fraction,
                tau: r.tau,
                speedup_proxy: r.speedup_proxy,
            }),
            _ => {
                transfer.entry(cell(r)).or_default().insert(r.selection.clone(), r.tau);
            }
        }
    }
    for c in curves.values_mut() {
        c.sort_by(|a, b| a.x.total_cmp(&b.x));
    }
    let domain = rows.first().map(|r| r.domain_tag.clone()).unwrap_or_default();
    serde_json::json!({
        "manifest_hash": manifest_hash,
        "domain_tag": domain,
        "method_comparison": bars,
        "budget_sweep": curves,
        "transfer_gap": transfer,
    })
}
