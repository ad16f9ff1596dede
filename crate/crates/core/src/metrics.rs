//! Accuracy, prototype-distance and fairness diagnostics, and the on-disk run
//! format (`metrics.csv` + `summary.json`).
//!
//! Nothing here feeds back into training: the federation loop calls into this
//! module only after a round's model and prototypes are final.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{FedError, Result};
use crate::model::ModelParams;
use crate::numerics::{argmax, l2_distance};
use crate::prototypes::GlobalPrototypes;

pub const CSV_SCHEMA_VERSION: &str = "1";
pub const SUMMARY_SCHEMA_VERSION: &str = "fedhpro-summary-v1";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.csv";

/// Correct/total counts of a test pass, broken down by domain and class.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    /// `[domain][class]`; a dataset without domain ids is domain 0.
    pub cell_correct: Vec<Vec<usize>>,
    pub cell_total: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    pub fn domains(&self) -> usize {
        self.cell_total.len()
    }

    pub fn classes(&self) -> usize {
        self.cell_total.first().map_or(0, Vec::len)
    }

    pub fn class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.classes())
            .map(|c| {
                let n: usize = self.cell_total.iter().map(|r| r[c]).sum();
                let k: usize = self.cell_correct.iter().map(|r| r[c]).sum();
                (n > 0).then(|| k as f64 / n as f64)
            })
            .collect()
    }

    pub fn domain_accuracy(&self) -> Vec<Option<f64>> {
        self.cell_total
            .iter()
            .zip(&self.cell_correct)
            .map(|(t, k)| {
                let n: usize = t.iter().sum();
                (n > 0).then(|| k.iter().sum::<usize>() as f64 / n as f64)
            })
            .collect()
    }

    pub fn domain_counts(&self) -> Vec<usize> {
        self.cell_total.iter().map(|r| r.iter().sum()).collect()
    }

    /// Expected accuracy for a client whose data has the given `(domain,
    /// class)` counts. Cells missing from the test set fall back to the
    /// class-level accuracy.
    pub fn weighted_accuracy(&self, client: &LabeledDataset) -> f64 {
        let class_acc = self.class_accuracy();
        let mut acc = 0.0;
        for i in 0..client.len() {
            let d = client.domain(i).unwrap_or(0);
            let c = client.y(i);
            let cell = self
                .cell_total
                .get(d)
                .filter(|row| row[c] > 0)
                .map(|row| self.cell_correct[d][c] as f64 / row[c] as f64);
            acc += cell.or(class_acc[c]).unwrap_or(0.0);
        }
        acc / client.len() as f64
    }
}

/// Top-1 accuracy of `params` on `ds`; argmax ties go to the lowest class id.
pub fn evaluate(params: &ModelParams, ds: &LabeledDataset) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(FedError::Empty("evaluation set"));
    }
    let domains = ds.domains().map_or(1, |d| d.iter().max().map_or(1, |m| m + 1));
    let classes = ds.classes();
    let mut ev = Evaluation {
        correct: 0,
        total: ds.len(),
        cell_correct: vec![vec![0; classes]; domains],
        cell_total: vec![vec![0; classes]; domains],
    };
    for i in 0..ds.len() {
        let fwd = params.forward(ds.x(i))?;
        let y = ds.y(i);
        let d = ds.domain(i).unwrap_or(0);
        ev.cell_total[d][y] += 1;
        if argmax(&fwd.logits) == y {
            ev.correct += 1;
            ev.cell_correct[d][y] += 1;
        }
    }
    Ok(ev)
}

pub fn accuracy_from_logits(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(FedError::shape("accuracy_from_logits", logits.len(), labels.len()));
    }
    let correct = logits.iter().zip(labels).filter(|(l, &y)| argmax(l) == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Per-class `‖bankᶜ − cenᶜ‖₂`; `None` where either side lacks the class.
pub fn bank_distances(bank: &GlobalPrototypes, centralized: &GlobalPrototypes) -> Vec<Option<f64>> {
    (0..centralized.classes())
        .map(|c| match (bank.get(c), centralized.get(c)) {
            (Some(a), Some(b)) => Some(l2_distance(a, b)),
            _ => None,
        })
        .collect()
}

pub fn mean_present(xs: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = xs.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeDistances {
    pub global: Vec<Option<f64>>,
    pub hyper: Vec<Option<f64>>,
    pub global_mean: Option<f64>,
    pub hyper_mean: Option<f64>,
}

/// Distances of `ℙ` and (when present) `H` to the centralized prototypes.
pub fn prototype_distances(
    global: &GlobalPrototypes,
    hyper: Option<&GlobalPrototypes>,
    centralized: &GlobalPrototypes,
) -> PrototypeDistances {
    let g = bank_distances(global, centralized);
    let h = hyper.map_or_else(|| vec![None; centralized.classes()], |h| bank_distances(h, centralized));
    PrototypeDistances {
        global_mean: mean_present(&g),
        hyper_mean: mean_present(&h),
        global: g,
        hyper: h,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FairnessStats {
    pub mean: f64,
    /// Mean of the lowest `⌈0.1·K⌉` accuracies.
    pub worst: f64,
    pub best: f64,
    /// Population variance.
    pub variance: f64,
}

pub fn fairness(per_client: &[f64]) -> Result<FairnessStats> {
    if per_client.is_empty() {
        return Err(FedError::Empty("fairness"));
    }
    let mut sorted = per_client.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let decile = ((0.1 * n as f64).ceil() as usize).max(1);
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let variance = sorted.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
    let worst = sorted[..decile].iter().sum::<f64>() / decile as f64;
    let best = sorted[n - decile..].iter().sum::<f64>() / decile as f64;
    Ok(FairnessStats {
        mean,
        worst,
        best,
        variance,
    })
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: usize,
    pub train_ce: f64,
    pub train_hpcl: f64,
    pub train_hpal: f64,
    pub train_proto: f64,
    /// Mean per-class matching loss before / after this round's inner optimization.
    pub gm_loss_start: Option<f64>,
    pub gm_loss: Option<f64>,
    pub test_accuracy: f64,
    pub domain_accuracy: Vec<Option<f64>>,
    pub fairness: FairnessStats,
    pub proto_l2: Vec<Option<f64>>,
    pub hyper_l2: Vec<Option<f64>>,
    pub proto_l2_mean: Option<f64>,
    pub hyper_l2_mean: Option<f64>,
}

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

fn csv_header(domains: usize, classes: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "schema_version",
        "round",
        "participants",
        "train_ce",
        "train_hpcl",
        "train_hpal",
        "train_proto",
        "gm_loss_start",
        "gm_loss",
        "test_acc",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..domains).map(|d| format!("acc_domain_{d}")));
    h.extend(
        [
            "fair_mean",
            "fair_worst",
            "fair_best",
            "fair_var",
            "proto_l2_mean",
            "hyper_l2_mean",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    h.extend((0..classes).map(|c| format!("proto_l2_c{c}")));
    h.extend((0..classes).map(|c| format!("hyper_l2_c{c}")));
    h
}

/// Fixed column order; floats carry 17 significant digits and missing
/// values are empty fields.
pub fn records_to_csv(records: &[RoundRecord]) -> Result<String> {
    let first = records.first().ok_or(FedError::Empty("metrics records"))?;
    let domains = first.domain_accuracy.len();
    let classes = first.proto_l2.len();
    let mut out = csv_header(domains, classes).join(",");
    out.push('\n');
    let mut last_round = 0;
    for r in records {
        if r.domain_accuracy.len() != domains || r.proto_l2.len() != classes || r.hyper_l2.len() != classes {
            return Err(FedError::shape("metrics row", classes, r.proto_l2.len()));
        }
        if r.round <= last_round {
            return Err(FedError::InvalidConfig(format!("rounds out of order at {}", r.round)));
        }
        last_round = r.round;
        let mut row = vec![
            CSV_SCHEMA_VERSION.to_string(),
            r.round.to_string(),
            r.participants.to_string(),
            fmt_f(r.train_ce),
            fmt_f(r.train_hpcl),
            fmt_f(r.train_hpal),
            fmt_f(r.train_proto),
            fmt_opt(r.gm_loss_start),
            fmt_opt(r.gm_loss),
            fmt_f(r.test_accuracy),
        ];
        row.extend(r.domain_accuracy.iter().map(|v| fmt_opt(*v)));
        row.extend([
            fmt_f(r.fairness.mean),
            fmt_f(r.fairness.worst),
            fmt_f(r.fairness.best),
            fmt_f(r.fairness.variance),
            fmt_opt(r.proto_l2_mean),
            fmt_opt(r.hyper_l2_mean),
        ]);
        row.extend(r.proto_l2.iter().map(|v| fmt_opt(*v)));
        row.extend(r.hyper_l2.iter().map(|v| fmt_opt(*v)));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<RoundRecord>> {
    let text = fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
    let err = |line: u64, msg: String| FedError::Csv {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.first().map(String::as_str) != Some("schema_version") {
        return Err(err(1, "missing schema_version column".into()));
    }
    let domains = header.iter().filter(|h| h.starts_with("acc_domain_")).count();
    let classes = header.iter().filter(|h| h.starts_with("proto_l2_c")).count();
    if header != csv_header(domains, classes) {
        return Err(err(1, "unexpected column layout".into()));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| err(line, e.to_string()))?;
        if &rec[0] != CSV_SCHEMA_VERSION {
            return Err(FedError::SchemaVersion {
                found: rec[0].to_string(),
                expected: CSV_SCHEMA_VERSION.to_string(),
            });
        }
        let f = |j: usize| -> Result<f64> {
            rec[j]
                .parse()
                .map_err(|_| err(line, format!("bad number in column {}", header[j])))
        };
        let o = |j: usize| -> Result<Option<f64>> {
            if rec[j].is_empty() {
                Ok(None)
            } else {
                f(j).map(Some)
            }
        };
        let u = |j: usize| -> Result<usize> {
            rec[j]
                .parse()
                .map_err(|_| err(line, format!("bad integer in column {}", header[j])))
        };
        let mut j = 10;
        let domain_accuracy = (0..domains).map(|d| o(j + d)).collect::<Result<Vec<_>>>()?;
        j += domains;
        let fairness = FairnessStats {
            mean: f(j)?,
            worst: f(j + 1)?,
            best: f(j + 2)?,
            variance: f(j + 3)?,
        };
        let proto_l2_mean = o(j + 4)?;
        let hyper_l2_mean = o(j + 5)?;
        j += 6;
        let proto_l2 = (0..classes).map(|c| o(j + c)).collect::<Result<Vec<_>>>()?;
        j += classes;
        let hyper_l2 = (0..classes).map(|c| o(j + c)).collect::<Result<Vec<_>>>()?;
        out.push(RoundRecord {
            round: u(1)?,
            participants: u(2)?,
            train_ce: f(3)?,
            train_hpcl: f(4)?,
            train_hpal: f(5)?,
            train_proto: f(6)?,
            gm_loss_start: o(7)?,
            gm_loss: o(8)?,
            test_accuracy: f(9)?,
            domain_accuracy,
            fairness,
            proto_l2,
            hyper_l2,
            proto_l2_mean,
            hyper_l2_mean,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub test_accuracy: f64,
    pub class_accuracy: Vec<Option<f64>>,
    pub domain_accuracy: Vec<Option<f64>>,
    pub fairness: FairnessStats,
    pub proto_l2_mean: Option<f64>,
    pub hyper_l2_mean: Option<f64>,
    pub gm_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: String,
    pub build: String,
    pub preset: String,
    pub strategy: String,
    pub seed: u64,
    pub rounds: usize,
    pub config: serde_json::Value,
    #[serde(rename = "final")]
    pub final_metrics: FinalMetrics,
}

impl RunSummary {
    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
        let v: serde_json::Value = serde_json::from_str(&s)?;
        let found = v.get("schema_version").and_then(|x| x.as_str()).unwrap_or("");
        if found != SUMMARY_SCHEMA_VERSION {
            return Err(FedError::SchemaVersion {
                found: found.to_string(),
                expected: SUMMARY_SCHEMA_VERSION.to_string(),
            });
        }
        Ok(serde_json::from_value(v)?)
    }
}

/// Writes `metrics.csv` and `summary.json` into `dir`.
pub fn persist(records: &[RoundRecord], summary: &RunSummary, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FedError::io(dir, e))?;
    let csv_path = dir.join(METRICS_FILE);
    fs::write(&csv_path, records_to_csv(records)?).map_err(|e| FedError::io(&csv_path, e))?;
    let json_path = dir.join(SUMMARY_FILE);
    let mut json = serde_json::to_string_pretty(summary)?;
    json.push('\n');
    fs::write(&json_path, json).map_err(|e| FedError::io(&json_path, e))
}

/// Per-round wall-clock seconds, kept apart from the deterministic files.
pub fn write_timing(seconds: &[f64], dir: &Path) -> Result<()> {
    let mut out = String::from("round,seconds\n");
    for (i, s) in seconds.iter().enumerate() {
        out.push_str(&format!("{},{s:.6}\n", i + 1));
    }
    let path = dir.join(TIMING_FILE);
    fs::write(&path, out).map_err(|e| FedError::io(&path, e))
}
