//! Named desk-scale scenarios, config resolution, the run matrix and the
//! cross-run comparison used by the CLI and the acceptance suite.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{
    apply_domain_transform, make_longtail, partition_iid, partition_nid1, partition_nid2, uniform_domain_assignment,
    BlobGenerator, DomainTransform, LabeledDataset, PartitionSpec, NID2_CLIENTS,
};
use crate::error::{FedError, Result};
use crate::federation::{run_federation, FederationConfig, FederationOutcome};
use crate::losses::Strategy;
use crate::metrics::{self, FinalMetrics, RoundRecord, RunSummary, SUMMARY_SCHEMA_VERSION};
use crate::numerics::{stream_id, SimRng};

pub const COMPLETE_MARKER: &str = "COMPLETE";
pub const MODEL_FILE: &str = "model.json";
pub const HYPER_FILE: &str = "hyperprototypes.json";

/// Build identifier recorded in every summary.
pub const BUILD: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("FEDHPRO_GIT_DESCRIBE"), ")");

const PURPOSE_DATA: u64 = 10;
const DATA_MEANS: u64 = 0;
const DATA_TRAIN: u64 = 1;
const DATA_TEST: u64 = 2;
const DATA_PARTITION: u64 = 3;
const DATA_DOMAINS: u64 = 4;

fn data_rng(seed: u64, which: u64) -> SimRng {
    SimRng::new(seed, stream_id(PURPOSE_DATA, which, 0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Nid1,
    Nid2,
    Longtail,
    Domain2,
    Domain4,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Nid1,
        Preset::Nid2,
        Preset::Longtail,
        Preset::Domain2,
        Preset::Domain4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Nid1 => "nid1",
            Preset::Nid2 => "nid2",
            Preset::Longtail => "longtail",
            Preset::Domain2 => "domain2",
            Preset::Domain4 => "domain4",
        }
    }

    pub fn domains(self) -> Option<usize> {
        match self {
            Preset::Domain2 => Some(2),
            Preset::Domain4 => Some(4),
            _ => None,
        }
    }

    pub fn valid_names() -> String {
        Preset::ALL.map(Preset::name).join(", ")
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Preset {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            FedError::InvalidConfig(format!(
                "unknown preset '{s}' (valid presets: {})",
                Preset::valid_names()
            ))
        })
    }
}

/// Knobs of the synthetic blob generator shared by all presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub in_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Class means are drawn from `N(0, mean_scale²·I)`.
    pub mean_scale: f64,
    pub spread: f64,
    /// Scale of the random translation in each domain's affine map.
    pub domain_shift: f64,
    /// Client → domain map; uniform round-robin when absent.
    pub domain_assignment: Option<Vec<usize>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 10,
            in_dim: 16,
            train_per_class: 200,
            test_per_class: 100,
            mean_scale: 0.3,
            spread: 0.3,
            domain_shift: 1.0,
            domain_assignment: None,
        }
    }
}

/// A fully resolved experiment: one scenario, a strategy list and a seed list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub preset: Preset,
    pub alpha: f64,
    pub rho: f64,
    pub clients: usize,
    pub data: DataConfig,
    pub federation: FederationConfig,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
}

/// Client shards plus the pooled held-out test set of one scenario draw.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub clients: Vec<LabeledDataset>,
    pub test: LabeledDataset,
}

impl Experiment {
    /// Desk-scale defaults: R = 30, K = 10, E = 5, C = 10, d = 16, 200 train
    /// samples per class.
    pub fn preset(preset: Preset) -> Self {
        let mut federation = FederationConfig {
            rounds: 30,
            local_epochs: 5,
            ..FederationConfig::default()
        };
        let data = DataConfig::default();
        federation.model.in_dim = data.in_dim;
        federation.model.classes = data.classes;
        Experiment {
            preset,
            alpha: 0.5,
            rho: 10.0,
            clients: if preset == Preset::Nid2 { NID2_CLIENTS } else { 10 },
            data,
            federation,
            strategies: vec![Strategy::FedAvg, Strategy::FedHPro],
            seeds: vec![1, 2, 3],
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        match self.preset {
            Preset::Nid1 => PartitionSpec::Nid1 { alpha: self.alpha },
            Preset::Nid2 => PartitionSpec::Nid2,
            Preset::Longtail => PartitionSpec::LongTail {
                rho: self.rho,
                alpha: self.alpha,
            },
            Preset::Domain2 | Preset::Domain4 => {
                let domains = self.preset.domains().expect("domain preset");
                PartitionSpec::DomainSkew {
                    domains,
                    assignment: self
                        .data
                        .domain_assignment
                        .clone()
                        .unwrap_or_else(|| uniform_domain_assignment(self.clients, domains)),
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.preset == Preset::Nid2 && self.clients != NID2_CLIENTS {
            return Err(FedError::InvalidConfig(format!(
                "the nid2 preset always has {NID2_CLIENTS} clients, got {}",
                self.clients
            )));
        }
        if self.data.train_per_class == 0 || self.data.test_per_class == 0 {
            return Err(FedError::InvalidConfig("per-class sample counts must be >= 1".into()));
        }
        if self.data.classes != self.federation.model.classes || self.data.in_dim != self.federation.model.in_dim {
            return Err(FedError::InvalidConfig(format!(
                "data is {} classes x {} features but the model expects {} x {}",
                self.data.classes, self.data.in_dim, self.federation.model.classes, self.federation.model.in_dim
            )));
        }
        if self.strategies.is_empty() || self.seeds.is_empty() {
            return Err(FedError::InvalidConfig(
                "need at least one strategy and one seed".into(),
            ));
        }
        self.partition_spec().validate(self.clients)?;
        self.federation.validate()
    }

    /// Short scenario label used in output directory names.
    pub fn tag(&self) -> String {
        match self.preset {
            Preset::Nid1 => format!("nid1-a{}", self.alpha),
            Preset::Longtail => format!("longtail-r{}-a{}", self.rho, self.alpha),
            p => p.name().to_string(),
        }
    }

    pub fn cell_name(&self, strategy: Strategy, seed: u64) -> String {
        format!("{}_{}_s{}", self.tag(), strategy, seed)
    }

    pub fn cells(&self) -> Vec<(Strategy, u64)> {
        self.strategies
            .iter()
            .flat_map(|&s| self.seeds.iter().map(move |&seed| (s, seed)))
            .collect()
    }

    pub fn cell_config(&self, strategy: Strategy, seed: u64) -> FederationConfig {
        FederationConfig {
            strategy,
            seed,
            ..self.federation.clone()
        }
    }

    /// Draws the scenario for `seed`. Every strategy sees the same data for a
    /// given seed.
    pub fn build_data(&self, seed: u64) -> Result<ScenarioData> {
        self.validate()?;
        let d = &self.data;
        let generator = BlobGenerator::new(d.classes, d.in_dim, d.mean_scale, &mut data_rng(seed, DATA_MEANS))?;
        let train = generator.sample(d.train_per_class, d.spread, &mut data_rng(seed, DATA_TRAIN))?;
        let test = generator.sample(d.test_per_class, d.spread, &mut data_rng(seed, DATA_TEST))?;
        let mut rng = data_rng(seed, DATA_PARTITION);
        let (clients, test) = match self.partition_spec() {
            PartitionSpec::Nid1 { alpha } => (partition_nid1(&train, self.clients, alpha, &mut rng)?, test),
            PartitionSpec::Nid2 => (partition_nid2(&train, &mut rng)?, test),
            PartitionSpec::LongTail { rho, alpha } => (
                partition_nid1(&make_longtail(&train, rho)?, self.clients, alpha, &mut rng)?,
                test,
            ),
            PartitionSpec::DomainSkew { domains, assignment } => {
                let mut drng = data_rng(seed, DATA_DOMAINS);
                let maps: Vec<DomainTransform> = (0..domains)
                    .map(|_| DomainTransform::random(d.in_dim, d.domain_shift, &mut drng))
                    .collect();
                let shards = partition_iid(&train, self.clients, &mut rng)?;
                let clients = shards
                    .iter()
                    .zip(&assignment)
                    .map(|(s, &dom)| apply_domain_transform(s, dom, &maps[dom]))
                    .collect::<Result<Vec<_>>>()?;
                let tests = maps
                    .iter()
                    .enumerate()
                    .map(|(dom, m)| apply_domain_transform(&test, dom, m))
                    .collect::<Result<Vec<_>>>()?;
                (clients, LabeledDataset::concat(&tests)?)
            }
        };
        Ok(ScenarioData { clients, test })
    }

    pub fn run_cell(
        &self,
        strategy: Strategy,
        seed: u64,
        workers: usize,
        on_round: impl FnMut(&RoundRecord),
    ) -> Result<FederationOutcome> {
        let data = self.build_data(seed)?;
        let cfg = FederationConfig {
            workers,
            ..self.cell_config(strategy, seed)
        };
        run_federation(&data.clients, &data.test, &cfg, on_round)
    }

    /// Effective configuration of one cell, as echoed into `summary.json`.
    pub fn echo(&self, strategy: Strategy, seed: u64) -> Value {
        json!({
            "preset": self.preset,
            "alpha": self.alpha,
            "rho": self.rho,
            "clients": self.clients,
            "partition": self.partition_spec(),
            "data": self.data,
            "federation": self.cell_config(strategy, seed),
        })
    }

    pub fn summary(&self, strategy: Strategy, seed: u64, outcome: &FederationOutcome) -> RunSummary {
        let last = outcome.records.last().expect("at least one round");
        RunSummary {
            schema_version: SUMMARY_SCHEMA_VERSION.to_string(),
            build: BUILD.to_string(),
            preset: self.tag(),
            strategy: strategy.to_string(),
            seed,
            rounds: outcome.records.len(),
            config: self.echo(strategy, seed),
            final_metrics: FinalMetrics {
                test_accuracy: last.test_accuracy,
                class_accuracy: outcome.evaluation.class_accuracy(),
                domain_accuracy: last.domain_accuracy.clone(),
                fairness: last.fairness,
                proto_l2_mean: last.proto_l2_mean,
                hyper_l2_mean: last.hyper_l2_mean,
                gm_loss: last.gm_loss,
            },
        }
    }
}

/// Partial settings read from a TOML file or the command line. Later layers
/// win: preset defaults < config file < CLI flags.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub preset: Option<String>,
    pub alpha: Option<f64>,
    pub rho: Option<f64>,
    pub strategy: Option<String>,
    pub strategies: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub rounds: Option<usize>,
    pub clients: Option<usize>,
    pub epochs: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub force: Option<bool>,
    pub workers: Option<usize>,
    /// Partial `DataConfig` table.
    pub data: Option<toml::Table>,
    /// Partial `FederationConfig` table.
    pub federation: Option<toml::Table>,
}

impl Overrides {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
        toml::from_str(&text).map_err(|e| FedError::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FedError::InvalidConfig(e.to_string()))
    }

    /// `self` layered on top of `base`.
    pub fn over(self, base: Overrides) -> Overrides {
        let merge_tables = |top: Option<toml::Table>, bottom: Option<toml::Table>| match (top, bottom) {
            (Some(t), Some(mut b)) => {
                b.extend(t);
                Some(b)
            }
            (t, b) => t.or(b),
        };
        Overrides {
            preset: self.preset.or(base.preset),
            alpha: self.alpha.or(base.alpha),
            rho: self.rho.or(base.rho),
            strategy: self.strategy.or(base.strategy),
            strategies: self.strategies.or(base.strategies),
            seed: self.seed.or(base.seed),
            seeds: self.seeds.or(base.seeds),
            rounds: self.rounds.or(base.rounds),
            clients: self.clients.or(base.clients),
            epochs: self.epochs.or(base.epochs),
            out_dir: self.out_dir.or(base.out_dir),
            force: self.force.or(base.force),
            workers: self.workers.or(base.workers),
            data: merge_tables(self.data, base.data),
            federation: merge_tables(self.federation, base.federation),
        }
    }

    pub fn resolve(&self) -> Result<Experiment> {
        let preset: Preset = self.preset.as_deref().unwrap_or("nid1").parse()?;
        let mut exp = Experiment::preset(preset);
        if let Some(t) = &self.data {
            exp.data = overlay(&exp.data, t)?;
        }
        if let Some(t) = &self.federation {
            exp.federation = overlay(&exp.federation, t)?;
        }
        exp.federation.model.in_dim = exp.data.in_dim;
        exp.federation.model.classes = exp.data.classes;
        if let Some(a) = self.alpha {
            exp.alpha = a;
        }
        if let Some(r) = self.rho {
            exp.rho = r;
        }
        if let Some(k) = self.clients {
            exp.clients = k;
        }
        if let Some(r) = self.rounds {
            exp.federation.rounds = r;
        }
        if let Some(e) = self.epochs {
            exp.federation.local_epochs = e;
        }
        match (&self.strategies, &self.strategy) {
            (Some(list), _) => exp.strategies = list.iter().map(|s| s.parse()).collect::<Result<_>>()?,
            (None, Some(s)) => exp.strategies = vec![s.parse()?],
            _ => {}
        }
        match (&self.seeds, self.seed) {
            (Some(list), _) => exp.seeds = list.clone(),
            (None, Some(s)) => exp.seeds = vec![s],
            _ => {}
        }
        exp.validate()?;
        Ok(exp)
    }
}

fn overlay<T: Serialize + for<'de> Deserialize<'de>>(base: &T, table: &toml::Table) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    merge_json(&mut v, serde_json::to_value(table)?, "")?;
    serde_json::from_value(v).map_err(|e| FedError::InvalidConfig(e.to_string()))
}

fn merge_json(dst: &mut Value, src: Value, path: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, val) in s {
                let key = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match d.get_mut(&k) {
                    Some(slot) if slot.is_object() => merge_json(slot, val, &key)?,
                    Some(slot) => *slot = val,
                    None => return Err(FedError::InvalidConfig(format!("unknown config key '{key}'"))),
                }
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

/// Writes one finished cell. Files go to a sibling staging directory that is
/// renamed into place only after the completion marker is written.
pub fn write_cell(
    dir: &Path,
    records: &[RoundRecord],
    summary: &RunSummary,
    outcome: &FederationOutcome,
    force: bool,
) -> Result<()> {
    if dir.exists() && !force {
        return Err(FedError::InvalidConfig(format!(
            "{} already exists (use --force to overwrite)",
            dir.display()
        )));
    }
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| FedError::io(parent, e))?;
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("run");
    let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| FedError::io(&staging, e))?;
    }
    let result = (|| {
        metrics::persist(records, summary, &staging)?;
        metrics::write_timing(&outcome.round_seconds, &staging)?;
        outcome.params.to_tensor_file().save(&staging.join(MODEL_FILE))?;
        if let Some(h) = &outcome.hyper {
            h.to_tensor_file().save(&staging.join(HYPER_FILE))?;
        }
        let marker = staging.join(COMPLETE_MARKER);
        fs::write(&marker, format!("{}\n", summary.rounds)).map_err(|e| FedError::io(&marker, e))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| FedError::io(dir, e))?;
        }
        fs::rename(&staging, dir).map_err(|e| FedError::io(dir, e))
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

pub fn is_complete(dir: &Path) -> bool {
    dir.join(COMPLETE_MARKER).is_file()
}

/// Completed cell directories named directly or found one level below.
pub fn collect_run_dirs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if !p.is_dir() {
            return Err(FedError::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found"),
            ));
        }
        if p.join(metrics::SUMMARY_FILE).exists() {
            if !is_complete(p) {
                return Err(FedError::InvalidConfig(format!(
                    "{} is not a completed run",
                    p.display()
                )));
            }
            out.push(p.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = fs::read_dir(p)
            .map_err(|e| FedError::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|c| is_complete(c))
            .collect();
        if children.is_empty() {
            return Err(FedError::InvalidConfig(format!(
                "{} contains no completed runs",
                p.display()
            )));
        }
        children.sort();
        out.extend(children);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub strategy: String,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    /// `mean − mean(first strategy)`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub baseline: String,
    pub rows: Vec<CompareRow>,
}

/// Final test accuracy grouped by strategy in order of first appearance.
pub fn compare_runs(dirs: &[PathBuf]) -> Result<Comparison> {
    let mut groups: Vec<(String, Vec<u64>, Vec<f64>)> = Vec::new();
    for d in dirs {
        let summary = RunSummary::load(&d.join(metrics::SUMMARY_FILE))?;
        let records = metrics::read_metrics_csv(&d.join(metrics::METRICS_FILE))?;
        let last = records.last().ok_or(FedError::Empty("metrics.csv"))?;
        if last.test_accuracy.to_bits() != summary.final_metrics.test_accuracy.to_bits() {
            return Err(FedError::InvalidConfig(format!(
                "{}: summary and metrics disagree on final accuracy",
                d.display()
            )));
        }
        match groups.iter_mut().find(|g| g.0 == summary.strategy) {
            Some(g) => {
                g.1.push(summary.seed);
                g.2.push(last.test_accuracy);
            }
            None => groups.push((summary.strategy.clone(), vec![summary.seed], vec![last.test_accuracy])),
        }
    }
    let base = groups.first().ok_or(FedError::Empty("compare"))?;
    let base_mean = mean(&base.2);
    Ok(Comparison {
        baseline: base.0.clone(),
        rows: groups
            .iter()
            .map(|(s, seeds, accs)| CompareRow {
                strategy: s.clone(),
                runs: accs.len(),
                seeds: seeds.clone(),
                mean: mean(accs),
                std: sample_std(accs),
                delta: mean(accs) - base_mean,
            })
            .collect(),
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<18} {:>4} {:>18} {:>9}",
            "strategy", "runs", "final acc (%)", "delta"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<18} {:>4} {:>10.2} ± {:<5.2} {:>+9.2}",
                r.strategy,
                r.runs,
                100.0 * r.mean,
                100.0 * r.std,
                100.0 * r.delta
            )?;
        }
        Ok(())
    }
}
