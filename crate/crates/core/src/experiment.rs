//! Experiment plumbing behind the command line: the TOML config schema,
//! repeated seeded runs, scenario presets, and on-disk artifacts.
//!
//! Every artifact file name starts with the first twelve hex digits of the
//! SHA-256 of the rendered config, so outputs of different configs never
//! collide. All files are written to a temporary name and renamed into place.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    gen_synthetic, load_matrix_file, split_anomaly, AnomalySplit, PartitionPolicy, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::eval::{auroc, score_model, summarize, SummaryRow};
use crate::model::{ArchSpec, Autoencoder, DEFAULT_CODE_DIM, DEFAULT_DROPOUT, DEFAULT_HIDDEN};
use crate::seed::derive_seed;
use crate::simnet::{
    run_training, BroadcastCounting, CostModel, EpochRecord, FailureEvent, FailureSchedule,
    HeadPolicy, PostFailurePolicy, Protocol, RunConfig, RunTrace, ServerDownPolicy,
};

pub const TRACE_SCHEMA: &str = "tolfl.trace/1";
pub const PROVENANCE_SCHEMA: &str = "tolfl.provenance/1";
pub const SUMMARY_HEADER: &str = "method,dataset,scenario,auroc_mean,auroc_std,runs";
/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "TOLFL_OUT_DIR";

pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_ALPHA: f64 = 1e-3;
pub const DEFAULT_HOLDOUT: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    File(PathBuf),
}

impl DatasetSource {
    pub fn label(&self) -> String {
        match self {
            DatasetSource::Synthetic(_) => "synthetic".into(),
            DatasetSource::File(p) => p
                .file_stem()
                .map_or_else(|| "file".into(), |s| s.to_string_lossy().into_owned()),
        }
    }
}

/// A validated experiment description with every default filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub n_devices: usize,
    /// Cluster count the protocol actually runs with (1 for FL and batch,
    /// N for SBT).
    pub k: usize,
    pub epochs: usize,
    pub alpha: f64,
    pub local_epochs: usize,
    pub local_lr: f64,
    pub dropout: f64,
    pub hidden: Vec<usize>,
    pub code_dim: usize,
    pub dataset: DatasetSource,
    /// `None` means the highest class id present.
    pub anomaly_classes: Option<Vec<u32>>,
    pub holdout_frac: f64,
    pub partition: PartitionPolicy,
    pub head_policy: HeadPolicy,
    pub failures: Vec<FailureEvent>,
    pub post_failure: ServerDownPolicy,
    pub costs: CostModel,
    pub broadcast: BroadcastCounting,
    pub repetitions: usize,
    pub seed: u64,
    pub scenario: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    protocol: Option<Protocol>,
    #[serde(rename = "N")]
    n: Option<usize>,
    k: Option<usize>,
    epochs: Option<usize>,
    alpha: Option<f64>,
    #[serde(rename = "E")]
    local_epochs: Option<usize>,
    local_lr: Option<f64>,
    dropout: Option<f64>,
    holdout_frac: Option<f64>,
    anomaly_classes: Option<Vec<u32>>,
    partition: Option<PartitionPolicy>,
    head_policy: Option<HeadPolicy>,
    post_failure: Option<ServerDownPolicy>,
    broadcast: Option<BroadcastCounting>,
    repetitions: Option<usize>,
    seed: Option<u64>,
    scenario: Option<String>,
    arch: Option<RawArch>,
    dataset: Option<RawDataset>,
    costs: Option<CostModel>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    failures: Vec<FailureEvent>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArch {
    hidden: Option<Vec<usize>>,
    code: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    path: Option<PathBuf>,
    feature_dim: Option<usize>,
    num_classes: Option<usize>,
    samples_per_class: Option<usize>,
    class_mean_separation: Option<f64>,
    noise_scale: Option<f64>,
}

/// Names the key a toml error is about: the first back-quoted name in the
/// message (unknown or missing fields), else the key on the offending line.
fn key_of(err: &toml::de::Error, text: &str) -> String {
    if let Some(quoted) = err.message().split('`').nth(1) {
        return quoted.to_string();
    }
    err.span()
        .and_then(|span| {
            let start = text[..span.start].rfind('\n').map_or(0, |i| i + 1);
            let line = &text[start..];
            line.split_once('=').map(|(key, _)| key.trim().to_string())
        })
        .filter(|k| !k.is_empty())
        .unwrap_or_else(|| "config".into())
}

fn require<T>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| Error::config(key, "required key is missing"))
}

fn positive(value: f64, key: &str) -> Result<f64> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(Error::config(
            key,
            format!("must be a positive number, got {value}"),
        ))
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML config.
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::config(key_of(&e, text), e.message()))?;
        Self::from_raw(raw)
    }

    /// Reads a config file; a relative dataset path is resolved against the
    /// file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let DatasetSource::File(p) = &mut cfg.dataset {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    fn from_raw(raw: RawConfig) -> Result<Self> {
        let protocol = require(raw.protocol, "protocol")?;
        let n_devices = require(raw.n, "N")?;
        if n_devices == 0 {
            return Err(Error::config("N", "must be at least 1"));
        }
        let k = match (protocol, raw.k) {
            (Protocol::Tolfl, None) => return Err(Error::config("k", "tolfl requires k")),
            (Protocol::Tolfl, Some(k)) if k == 0 || k > n_devices => {
                return Err(Error::config(
                    "k",
                    format!("must satisfy 1 <= k <= N = {n_devices}, got {k}"),
                ))
            }
            (Protocol::Tolfl, Some(k)) => k,
            (Protocol::Fl | Protocol::Batch, None | Some(1)) => 1,
            (Protocol::Sbt, None) => n_devices,
            (Protocol::Sbt, Some(k)) if k == n_devices => k,
            (p, Some(k)) => {
                let want = if p == Protocol::Sbt {
                    "N".to_string()
                } else {
                    "1".into()
                };
                return Err(Error::config(
                    "k",
                    format!("{p} runs with k = {want}; got k = {k}"),
                ));
            }
        };
        let epochs = raw.epochs.unwrap_or(DEFAULT_EPOCHS);
        if epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        let repetitions = raw.repetitions.unwrap_or(1);
        if repetitions == 0 {
            return Err(Error::config("repetitions", "must be at least 1"));
        }
        let alpha = positive(raw.alpha.unwrap_or(DEFAULT_ALPHA), "alpha")?;
        let local_lr = positive(raw.local_lr.unwrap_or(alpha), "local_lr")?;
        let local_epochs = raw.local_epochs.unwrap_or(1);
        if local_epochs == 0 {
            return Err(Error::config("E", "must be at least 1"));
        }
        let dropout = raw.dropout.unwrap_or(DEFAULT_DROPOUT);
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::config(
                "dropout",
                format!("must lie in [0, 1), got {dropout}"),
            ));
        }
        let holdout_frac = raw.holdout_frac.unwrap_or(DEFAULT_HOLDOUT);
        if !(holdout_frac > 0.0 && holdout_frac < 1.0) {
            return Err(Error::config(
                "holdout_frac",
                format!("must lie in (0, 1), got {holdout_frac}"),
            ));
        }
        let seed = raw.seed.unwrap_or(0);
        if seed > i64::MAX as u64 {
            return Err(Error::config("seed", "must fit in a signed 64-bit integer"));
        }

        let arch = raw.arch.unwrap_or_default();
        let hidden = arch.hidden.unwrap_or_else(|| DEFAULT_HIDDEN.to_vec());
        let code_dim = arch.code.unwrap_or(DEFAULT_CODE_DIM);

        let ds = raw.dataset.unwrap_or_default();
        let dataset = match ds.path {
            Some(path) => {
                let synthetic_keys = [
                    ds.feature_dim.map(|_| "dataset.feature_dim"),
                    ds.num_classes.map(|_| "dataset.num_classes"),
                    ds.samples_per_class.map(|_| "dataset.samples_per_class"),
                    ds.class_mean_separation
                        .map(|_| "dataset.class_mean_separation"),
                    ds.noise_scale.map(|_| "dataset.noise_scale"),
                ];
                if let Some(key) = synthetic_keys.into_iter().flatten().next() {
                    return Err(Error::config(key, "cannot be combined with dataset.path"));
                }
                DatasetSource::File(path)
            }
            None => {
                let d = SyntheticSpec::default();
                let spec = SyntheticSpec {
                    feature_dim: ds.feature_dim.unwrap_or(d.feature_dim),
                    num_classes: ds.num_classes.unwrap_or(d.num_classes),
                    samples_per_class: ds.samples_per_class.unwrap_or(d.samples_per_class),
                    class_mean_separation: ds
                        .class_mean_separation
                        .unwrap_or(d.class_mean_separation),
                    noise_scale: ds.noise_scale.unwrap_or(d.noise_scale),
                };
                spec.validate()
                    .map_err(|e| Error::config("dataset", e.to_string()))?;
                DatasetSource::Synthetic(spec)
            }
        };
        if let DatasetSource::Synthetic(spec) = &dataset {
            ArchSpec::new(spec.feature_dim, hidden.clone(), code_dim, dropout)
                .map_err(|e| Error::config("arch", e.to_string()))?;
        }

        FailureSchedule::new(raw.failures.clone())
            .and_then(|s| s.validate_for(n_devices))
            .map_err(|e| Error::config("failures", e.to_string()))?;
        if let Some(e) = raw.failures.iter().find(|e| e.epoch > epochs) {
            return Err(Error::config(
                "failures",
                format!(
                    "device {} fails at epoch {} after the last epoch {epochs}",
                    e.device, e.epoch
                ),
            ));
        }
        let costs = raw.costs.unwrap_or_default();
        if !(costs.per_sample >= 0.0 && costs.per_message >= 0.0) {
            return Err(Error::config("costs", "costs must be non-negative"));
        }
        let mut failures = raw.failures;
        failures.sort_by_key(|e| (e.epoch, e.device));

        Ok(Self {
            protocol,
            n_devices,
            k,
            epochs,
            alpha,
            local_epochs,
            local_lr,
            dropout,
            hidden,
            code_dim,
            dataset,
            anomaly_classes: raw.anomaly_classes.map(|mut v| {
                v.sort_unstable();
                v.dedup();
                v
            }),
            holdout_frac,
            partition: raw.partition.unwrap_or(PartitionPolicy::ClassOrdered),
            head_policy: raw.head_policy.unwrap_or_default(),
            failures,
            post_failure: raw.post_failure.unwrap_or_default(),
            costs,
            broadcast: raw.broadcast.unwrap_or_default(),
            repetitions,
            seed,
            scenario: raw.scenario.unwrap_or_else(|| "custom".into()),
        })
    }

    /// Canonical TOML text; `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let dataset = match &self.dataset {
            DatasetSource::File(path) => RawDataset {
                path: Some(path.clone()),
                ..RawDataset::default()
            },
            DatasetSource::Synthetic(s) => RawDataset {
                path: None,
                feature_dim: Some(s.feature_dim),
                num_classes: Some(s.num_classes),
                samples_per_class: Some(s.samples_per_class),
                class_mean_separation: Some(s.class_mean_separation),
                noise_scale: Some(s.noise_scale),
            },
        };
        let raw = RawConfig {
            protocol: Some(self.protocol),
            n: Some(self.n_devices),
            k: Some(self.k),
            epochs: Some(self.epochs),
            alpha: Some(self.alpha),
            local_epochs: Some(self.local_epochs),
            local_lr: Some(self.local_lr),
            dropout: Some(self.dropout),
            holdout_frac: Some(self.holdout_frac),
            anomaly_classes: self.anomaly_classes.clone(),
            partition: Some(self.partition),
            head_policy: Some(self.head_policy),
            post_failure: Some(self.post_failure),
            broadcast: Some(self.broadcast),
            repetitions: Some(self.repetitions),
            seed: Some(self.seed),
            scenario: Some(self.scenario.clone()),
            arch: Some(RawArch {
                hidden: Some(self.hidden.clone()),
                code: Some(self.code_dim),
            }),
            dataset: Some(dataset),
            costs: Some(self.costs),
            failures: self.failures.clone(),
        };
        toml::to_string(&raw).expect("config always serializes")
    }

    /// Hex SHA-256 of the rendered config.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }

    pub fn rep_seed(&self, rep: usize) -> u64 {
        derive_seed(&[self.seed, 0x5e9, rep as u64])
    }

    pub fn run_config(&self, input_dim: usize, rep: usize) -> Result<RunConfig> {
        Ok(RunConfig {
            protocol: self.protocol,
            n_devices: self.n_devices,
            k: self.k,
            epochs: self.epochs,
            alpha: self.alpha,
            local_epochs: self.local_epochs,
            local_lr: self.local_lr,
            dropout_enabled: self.dropout > 0.0,
            arch: ArchSpec::new(input_dim, self.hidden.clone(), self.code_dim, self.dropout)?,
            partition: self.partition,
            head_policy: self.head_policy,
            failures: FailureSchedule::new(self.failures.clone())?,
            post_failure: PostFailurePolicy {
                fl_server_down: self.post_failure,
            },
            costs: self.costs,
            broadcast: self.broadcast,
            seed: self.rep_seed(rep),
        })
    }

    /// Loads or generates the dataset and splits off the test sets. The split
    /// depends only on the config seed, so every repetition sees the same data.
    pub fn prepare_data(&self) -> Result<AnomalySplit> {
        let ds = match &self.dataset {
            DatasetSource::Synthetic(spec) => {
                gen_synthetic(spec, derive_seed(&[self.seed, 0xda7a]))?
            }
            DatasetSource::File(path) => load_matrix_file(path)?,
        };
        let anomaly: BTreeSet<u32> = match &self.anomaly_classes {
            Some(v) => v.iter().copied().collect(),
            None => ds.class_ids().into_iter().next_back().into_iter().collect(),
        };
        split_anomaly(
            &ds,
            &anomaly,
            self.holdout_frac,
            derive_seed(&[self.seed, 0x5b1]),
        )
    }
}

/// Result of one seeded repetition.
#[derive(Debug, Clone)]
pub struct RepOutcome {
    pub rep: usize,
    pub seed: u64,
    pub trace: RunTrace,
    /// Mean AUROC over the final models (one per device after a server
    /// failure under local training, otherwise the single global model).
    pub auroc: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub reps: Vec<RepOutcome>,
    pub summary: SummaryRow,
}

impl ExperimentResult {
    pub fn summary_line(&self) -> String {
        summary_csv_row(
            self.config.protocol.label(),
            &self.config.dataset.label(),
            &self.config.scenario,
            &self.summary,
        )
    }
}

fn summary_csv_row(method: &str, dataset: &str, scenario: &str, row: &SummaryRow) -> String {
    format!(
        "{method},{dataset},{scenario},{:.6},{:.6},{}",
        row.mean, row.std, row.runs
    )
}

pub fn run_repetition(
    cfg: &ExperimentConfig,
    data: &AnomalySplit,
    rep: usize,
) -> Result<RepOutcome> {
    let run_cfg = cfg.run_config(data.train.feature_dim(), rep)?;
    let trace = run_training(&run_cfg, &data.train)?;
    let model = Autoencoder::new(run_cfg.arch.clone())?;
    let mut total = 0.0;
    for fm in &trace.final_models {
        let scores = score_model(&model, &fm.params, &data.test_normal, &data.test_anomalous)?;
        total += auroc(&scores)?;
    }
    let auroc = if trace.final_models.is_empty() {
        0.5
    } else {
        total / trace.final_models.len() as f64
    };
    Ok(RepOutcome {
        rep,
        seed: run_cfg.seed,
        trace,
        auroc,
    })
}

/// Runs every repetition in memory.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let data = cfg.prepare_data()?;
    let reps = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| run_repetition(cfg, &data, rep))
        .collect::<Result<Vec<_>>>()?;
    let aurocs: Vec<f64> = reps.iter().map(|r| r.auroc).collect();
    let summary = summarize(&aurocs, cfg.protocol.label())?;
    Ok(ExperimentResult {
        config: cfg.clone(),
        reps,
        summary,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum TraceLine {
    Epoch(EpochRecord),
    Summary(TraceSummary),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub schema: String,
    pub config_hash: String,
    pub protocol: Protocol,
    pub dataset: String,
    pub scenario: String,
    pub rep: usize,
    pub seed: u64,
    pub n_devices: usize,
    pub k: usize,
    pub epochs: usize,
    pub param_count: usize,
    pub auroc: f64,
    pub final_train_loss: Option<f64>,
    pub total_messages: u64,
    pub total_bytes: u64,
    pub virtual_time: f64,
}

fn trace_text(cfg: &ExperimentConfig, hash: &str, rep: &RepOutcome) -> Result<String> {
    let mut out = String::new();
    for e in &rep.trace.epochs {
        out.push_str(&serde_json::to_string(&TraceLine::Epoch(e.clone()))?);
        out.push('\n');
    }
    let comms = rep.trace.total_comms();
    let summary = TraceSummary {
        schema: TRACE_SCHEMA.into(),
        config_hash: hash.into(),
        protocol: cfg.protocol,
        dataset: cfg.dataset.label(),
        scenario: cfg.scenario.clone(),
        rep: rep.rep,
        seed: rep.seed,
        n_devices: cfg.n_devices,
        k: rep.trace.k,
        epochs: cfg.epochs,
        param_count: rep.trace.param_count,
        auroc: rep.auroc,
        final_train_loss: rep.trace.epochs.iter().rev().find_map(|e| e.train_loss),
        total_messages: comms.total_messages(),
        total_bytes: comms.total_bytes(),
        virtual_time: rep.trace.total_time(),
    };
    out.push_str(&serde_json::to_string(&TraceLine::Summary(summary))?);
    out.push('\n');
    Ok(out)
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension()
            .map(|e| e.to_string_lossy())
            .unwrap_or_default()
    ));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone)]
pub struct Artifacts {
    pub traces: Vec<PathBuf>,
    pub summary: PathBuf,
    pub provenance: PathBuf,
}

#[derive(Serialize)]
struct Provenance<'a> {
    schema: &'a str,
    config_hash: &'a str,
    config: &'a str,
    seeds: Vec<u64>,
    traces: Vec<String>,
    summary: String,
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned()
}

/// Writes traces, summary table and provenance for a finished experiment.
pub fn write_artifacts(result: &ExperimentResult, out_dir: &Path) -> Result<Artifacts> {
    ensure_dir(out_dir)?;
    let cfg = &result.config;
    let hash = cfg.hash();
    let short = &hash[..12];
    let mut traces = Vec::new();
    for rep in &result.reps {
        let path = out_dir.join(format!(
            "{short}-{}-rep{}.trace.jsonl",
            cfg.protocol, rep.rep
        ));
        write_atomic(&path, &trace_text(cfg, &hash, rep)?)?;
        traces.push(path);
    }
    let summary = out_dir.join(format!("{short}-summary.csv"));
    write_atomic(
        &summary,
        &format!("{SUMMARY_HEADER}\n{}\n", result.summary_line()),
    )?;
    let provenance = out_dir.join(format!("{short}-provenance.json"));
    let record = Provenance {
        schema: PROVENANCE_SCHEMA,
        config_hash: &hash,
        config: &cfg.render(),
        seeds: result.reps.iter().map(|r| r.seed).collect(),
        traces: traces.iter().map(|p| file_name(p)).collect(),
        summary: file_name(&summary),
    };
    write_atomic(
        &provenance,
        &(serde_json::to_string_pretty(&record)? + "\n"),
    )?;
    Ok(Artifacts {
        traces,
        summary,
        provenance,
    })
}

/// Runs a config and writes its artifacts under `out_dir`.
pub fn execute(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(ExperimentResult, Artifacts)> {
    let result = evaluate(cfg)?;
    let artifacts = write_artifacts(&result, out_dir)?;
    Ok((result, artifacts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Clean,
    ClientFail,
    ServerFail,
}

impl Preset {
    pub fn label(self) -> &'static str {
        match self {
            Preset::Clean => "clean",
            Preset::ClientFail => "client-fail",
            Preset::ServerFail => "server-fail",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Preset::Clean),
            "client-fail" | "client-failure" => Ok(Preset::ClientFail),
            "server-fail" | "server-failure" => Ok(Preset::ServerFail),
            other => Err(Error::config(
                "preset",
                format!("unknown preset `{other}` (expected clean, client-fail or server-fail)"),
            )),
        }
    }
}

/// Knobs of a scenario suite. Defaults: N = 10, k = 2, 100 epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub n_devices: usize,
    pub k: usize,
    pub epochs: usize,
    pub seed: u64,
    pub repetitions: usize,
    pub alpha: f64,
    pub dataset: DatasetSource,
    /// Overrides the preset's choice of failing device.
    pub fail_device: Option<usize>,
    pub post_failure: ServerDownPolicy,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            n_devices: 10,
            k: 2,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            repetitions: 3,
            alpha: DEFAULT_ALPHA,
            dataset: DatasetSource::Synthetic(SyntheticSpec::default()),
            fail_device: None,
            post_failure: ServerDownPolicy::LocalTraining,
        }
    }
}

/// Epoch at which preset failures strike: the device trains through the
/// first half of the run and is gone from then on.
pub fn preset_failure_epoch(epochs: usize) -> usize {
    epochs / 2 + 1
}

/// The device a preset takes down. Client failure removes the highest-id
/// non-head device (the highest-id device when every device is a head);
/// server failure removes the head of the first cluster.
pub fn preset_failure_device(
    preset: Preset,
    protocol: Protocol,
    n: usize,
    k: usize,
) -> Option<usize> {
    let k = protocol.effective_k(n, k);
    let heads: BTreeSet<usize> = crate::data::cluster_assignment(n, k)
        .ok()?
        .iter()
        .enumerate()
        .fold(BTreeMap::new(), |mut m, (d, &c)| {
            m.entry(c).or_insert(d);
            m
        })
        .into_values()
        .collect();
    match preset {
        Preset::Clean => None,
        Preset::ClientFail => (0..n)
            .rev()
            .find(|d| !heads.contains(d))
            .or(n.checked_sub(1)),
        Preset::ServerFail => heads.first().copied(),
    }
}

pub fn preset_config(
    preset: Preset,
    protocol: Protocol,
    opts: &SuiteOptions,
) -> Result<ExperimentConfig> {
    let k = match protocol {
        Protocol::Tolfl => opts.k,
        _ => protocol.effective_k(opts.n_devices, opts.k),
    };
    let failures = match preset {
        Preset::Clean => Vec::new(),
        _ => {
            let device = opts
                .fail_device
                .or_else(|| preset_failure_device(preset, protocol, opts.n_devices, k))
                .into_iter();
            device
                .map(|device| FailureEvent {
                    device,
                    epoch: preset_failure_epoch(opts.epochs),
                })
                .collect()
        }
    };
    let raw = RawConfig {
        protocol: Some(protocol),
        n: Some(opts.n_devices),
        k: Some(k),
        epochs: Some(opts.epochs),
        alpha: Some(opts.alpha),
        repetitions: Some(opts.repetitions),
        seed: Some(opts.seed),
        post_failure: Some(opts.post_failure),
        scenario: Some(preset.label().into()),
        failures,
        ..RawConfig::default()
    };
    let mut cfg = ExperimentConfig::from_raw(raw)?;
    cfg.dataset = opts.dataset.clone();
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub preset: Preset,
    pub experiments: Vec<ExperimentResult>,
    pub summary_path: Option<PathBuf>,
}

impl SuiteResult {
    pub fn summary_text(&self) -> String {
        let mut out = format!("{SUMMARY_HEADER}\n");
        for e in &self.experiments {
            out.push_str(&e.summary_line());
            out.push('\n');
        }
        out
    }
}

/// Runs all four protocols under a preset. With `out_dir`, per-protocol
/// artifacts and a combined summary are written there.
pub fn suite(preset: Preset, opts: &SuiteOptions, out_dir: Option<&Path>) -> Result<SuiteResult> {
    let configs = Protocol::ALL
        .iter()
        .map(|&p| preset_config(preset, p, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut experiments = Vec::new();
    for cfg in &configs {
        let result = evaluate(cfg)?;
        if let Some(dir) = out_dir {
            write_artifacts(&result, dir)?;
        }
        experiments.push(result);
    }
    let mut result = SuiteResult {
        preset,
        experiments,
        summary_path: None,
    };
    if let Some(dir) = out_dir {
        let joint = Sha256::digest(
            configs
                .iter()
                .map(|c| c.hash())
                .collect::<Vec<_>>()
                .join("\n")
                .as_bytes(),
        );
        let tag: String = joint[..6].iter().map(|b| format!("{b:02x}")).collect();
        let path = dir.join(format!("suite-{}-{tag}-summary.csv", preset.label()));
        write_atomic(&path, &result.summary_text())?;
        result.summary_path = Some(path);
    }
    Ok(result)
}

/// Reads every `*.trace.jsonl` under `dir` and summarizes AUROC per
/// (method, dataset, scenario), in sorted order.
pub fn report(dir: &Path) -> Result<String> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".trace.jsonl"))
        .collect();
    entries.sort();
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for path in &entries {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TraceLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if let TraceLine::Summary(s) = parsed {
                if s.schema != TRACE_SCHEMA {
                    return Err(Error::Parse {
                        path: path.clone(),
                        line: i + 1,
                        message: format!("unsupported schema `{}`", s.schema),
                    });
                }
                groups
                    .entry((s.protocol.label().into(), s.dataset, s.scenario))
                    .or_default()
                    .push(s.auroc);
            }
        }
    }
    if groups.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "no trace summaries found in {}",
            dir.display()
        )));
    }
    let mut out = format!("{SUMMARY_HEADER}\n");
    for ((method, dataset, scenario), values) in &groups {
        let row = summarize(values, method.clone())?;
        out.push_str(&summary_csv_row(method, dataset, scenario, &row));
        out.push('\n');
    }
    Ok(out)
}
