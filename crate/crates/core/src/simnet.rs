//! The virtual network: topology and head election, failure injection,
//! per-round message accounting, virtual time, and the epoch loop that drives
//! a protocol over a partitioned dataset.
//!
//! Failure semantics follow the cluster structure. A non-head device that
//! fails only removes its own data and compute. A failed head cuts off its
//! whole cluster for the rest of the run (there is no re-election). With a
//! single cluster the head is the FL server, and its loss hands control to
//! the [`PostFailurePolicy`].

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{partition, LabeledDataset, Partition, PartitionPolicy};
use crate::error::{Error, Result};
use crate::model::{ArchSpec, Autoencoder, ParamVector, Sample};
use crate::protocols::{batch_round, sbt_round, tolfl_round, ClusterView, Device, RoundConfig};
use crate::seed::{derive_seed, rng_from};

/// Bytes per parameter on the wire (64-bit reals).
pub const BYTES_PER_PARAM: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Batch,
    Fl,
    Sbt,
    Tolfl,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [
        Protocol::Batch,
        Protocol::Fl,
        Protocol::Sbt,
        Protocol::Tolfl,
    ];

    /// Cluster count the protocol runs with on `n` devices.
    pub fn effective_k(self, n: usize, k: usize) -> usize {
        match self {
            Protocol::Batch | Protocol::Fl => 1,
            Protocol::Sbt => n,
            Protocol::Tolfl => k,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Protocol::Batch => "batch",
            Protocol::Fl => "fl",
            Protocol::Sbt => "sbt",
            Protocol::Tolfl => "tolfl",
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Protocol::Batch),
            "fl" => Ok(Protocol::Fl),
            "sbt" => Ok(Protocol::Sbt),
            "tolfl" => Ok(Protocol::Tolfl),
            other => Err(Error::config(
                "protocol",
                format!("unknown protocol `{other}` (expected batch, fl, sbt or tolfl)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Client,
    ClusterHead,
    FlServer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadPolicy {
    #[default]
    LowestId,
    /// Seeded uniform choice among each cluster's members.
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    cluster_of_device: Vec<usize>,
    head_of_cluster: Vec<usize>,
    live: Vec<bool>,
}

impl Topology {
    /// Balanced contiguous clusters over `n` devices, heads chosen by `policy`.
    pub fn build(n: usize, k: usize, policy: HeadPolicy, seed: u64) -> Result<Self> {
        let assignment = crate::data::cluster_assignment(n, k)
            .map_err(|e| Error::InvalidTopology(e.to_string()))?;
        Self::from_assignment(assignment, policy, seed)
    }

    pub fn from_assignment(
        cluster_of_device: Vec<usize>,
        policy: HeadPolicy,
        seed: u64,
    ) -> Result<Self> {
        let k = cluster_of_device.iter().max().map_or(0, |c| c + 1);
        if k == 0 {
            return Err(Error::InvalidTopology(
                "topology needs at least one device".into(),
            ));
        }
        let mut rng = rng_from(&[seed, 0x4ead]);
        let mut head_of_cluster = Vec::with_capacity(k);
        for c in 0..k {
            let members: Vec<usize> = (0..cluster_of_device.len())
                .filter(|&d| cluster_of_device[d] == c)
                .collect();
            let head = match policy {
                HeadPolicy::LowestId => members.first().copied(),
                HeadPolicy::Random => members.choose(&mut rng).copied(),
            }
            .ok_or_else(|| Error::InvalidTopology(format!("cluster {c} has no devices")))?;
            head_of_cluster.push(head);
        }
        let n = cluster_of_device.len();
        Ok(Self {
            cluster_of_device,
            head_of_cluster,
            live: vec![true; n],
        })
    }

    pub fn num_devices(&self) -> usize {
        self.cluster_of_device.len()
    }

    pub fn num_clusters(&self) -> usize {
        self.head_of_cluster.len()
    }

    pub fn cluster_of(&self, device: usize) -> usize {
        self.cluster_of_device[device]
    }

    pub fn head_of(&self, cluster: usize) -> usize {
        self.head_of_cluster[cluster]
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.num_devices())
            .filter(|&d| self.cluster_of_device[d] == cluster)
            .collect()
    }

    pub fn is_live(&self, device: usize) -> bool {
        self.live[device]
    }

    pub fn is_head(&self, device: usize) -> bool {
        self.head_of_cluster[self.cluster_of_device[device]] == device
    }

    pub fn role(&self, device: usize) -> Role {
        if !self.is_head(device) {
            Role::Client
        } else if self.num_clusters() == 1 {
            Role::FlServer
        } else {
            Role::ClusterHead
        }
    }

    pub fn cluster_live(&self, cluster: usize) -> bool {
        self.live[self.head_of_cluster[cluster]]
    }

    /// A device takes part in collaborative training iff it and its head are up.
    pub fn participates(&self, device: usize) -> bool {
        self.live[device] && self.cluster_live(self.cluster_of_device[device])
    }

    pub fn participants(&self) -> Vec<usize> {
        (0..self.num_devices())
            .filter(|&d| self.participates(d))
            .collect()
    }

    pub fn live_devices(&self) -> Vec<usize> {
        (0..self.num_devices()).filter(|&d| self.live[d]).collect()
    }

    pub fn live_clusters(&self) -> Vec<usize> {
        (0..self.num_clusters())
            .filter(|&c| self.cluster_live(c))
            .collect()
    }

    /// True when there is a single cluster and its head (the server) is down.
    pub fn fl_server_down(&self) -> bool {
        self.num_clusters() == 1 && !self.cluster_live(0)
    }

    /// Applies every event scheduled for `epoch`. Failing an already-dead
    /// device is a no-op that is reported with a warning.
    pub fn inject_failures(
        &self,
        schedule: &FailureSchedule,
        epoch: usize,
    ) -> (Topology, Vec<FailureRecord>) {
        let mut next = self.clone();
        let mut records = Vec::new();
        for event in schedule.events().iter().filter(|e| e.epoch == epoch) {
            let device = event.device;
            let kind = match self.role(device) {
                Role::Client => FailureKind::Client,
                Role::ClusterHead | Role::FlServer => FailureKind::Head,
            };
            let warning = if next.live[device] {
                next.live[device] = false;
                None
            } else {
                Some(format!("device {device} was already down"))
            };
            records.push(FailureRecord {
                epoch,
                device,
                cluster: self.cluster_of(device),
                kind,
                warning,
            });
        }
        (next, records)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureEvent {
    pub device: usize,
    /// First epoch in which the device is gone.
    pub epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    Client,
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub epoch: usize,
    pub device: usize,
    pub cluster: usize,
    pub kind: FailureKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Failure events sorted by epoch.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FailureSchedule {
    events: Vec<FailureEvent>,
}

impl FailureSchedule {
    pub fn new(mut events: Vec<FailureEvent>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &events {
            if e.epoch == 0 {
                return Err(Error::InvalidSchedule(format!(
                    "device {}: epochs start at 1",
                    e.device
                )));
            }
            if !seen.insert(e.device) {
                return Err(Error::InvalidSchedule(format!(
                    "device {} has more than one failure event",
                    e.device
                )));
            }
        }
        events.sort_by_key(|e| (e.epoch, e.device));
        Ok(Self { events })
    }

    /// Schedule without the duplicate check, so the topology can be fed a
    /// repeated failure and report it.
    pub fn unchecked(mut events: Vec<FailureEvent>) -> Self {
        events.sort_by_key(|e| (e.epoch, e.device));
        Self { events }
    }

    pub fn events(&self) -> &[FailureEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn validate_for(&self, n: usize) -> Result<()> {
        match self.events.iter().find(|e| e.device >= n) {
            Some(e) => Err(Error::InvalidSchedule(format!(
                "device {} does not exist in a network of {n}",
                e.device
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServerDownPolicy {
    Halt,
    #[default]
    LocalTraining,
}

/// What the remaining devices do once the single server is gone. Batch
/// training always halts: its server holds all the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PostFailurePolicy {
    pub fl_server_down: ServerDownPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BroadcastCounting {
    /// One wireless broadcast reaches everyone.
    #[default]
    Single,
    /// One message per receiving device.
    PerRecipient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChannelCount {
    pub messages: u64,
    pub bytes: u64,
}

/// Messages and bytes per channel for one round. Every message carries one
/// full model or gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommsReport {
    /// Head to head.
    pub s2s: ChannelCount,
    /// Client to or from its head/server.
    pub c2s: ChannelCount,
    /// Device to device in a flat ring.
    pub c2c: ChannelCount,
    pub model_size_bytes: u64,
}

impl CommsReport {
    fn new(s2s: u64, c2s: u64, c2c: u64, model_size_bytes: u64) -> Self {
        let ch = |messages| ChannelCount {
            messages,
            bytes: messages * model_size_bytes,
        };
        Self {
            s2s: ch(s2s),
            c2s: ch(c2s),
            c2c: ch(c2c),
            model_size_bytes,
        }
    }

    pub fn total_messages(&self) -> u64 {
        self.s2s.messages + self.c2s.messages + self.c2c.messages
    }

    pub fn total_bytes(&self) -> u64 {
        self.s2s.bytes + self.c2s.bytes + self.c2c.bytes
    }

    pub fn add(&mut self, other: &CommsReport) {
        for (a, b) in [
            (&mut self.s2s, &other.s2s),
            (&mut self.c2s, &other.c2s),
            (&mut self.c2c, &other.c2c),
        ] {
            a.messages += b.messages;
            a.bytes += b.bytes;
        }
        self.model_size_bytes = other.model_size_bytes.max(self.model_size_bytes);
    }
}

/// Messages for one collaborative round on the current topology.
///
/// * FL: every participating device downloads the model and uploads its
///   update through the server, `2P`.
/// * SBT: `P - 1` ring handoffs plus the broadcast of the new model.
/// * Tol-FL: `2 (m_c - 1)` client/head messages inside each live cluster,
///   `C - 1` head-to-head handoffs and the final broadcast.
/// * Batch: none.
pub fn account_round(
    topo: &Topology,
    protocol: Protocol,
    param_count: usize,
    broadcast: BroadcastCounting,
) -> CommsReport {
    let size = param_count as u64 * BYTES_PER_PARAM;
    let participants = topo.participants().len() as u64;
    if participants == 0 {
        return CommsReport::new(0, 0, 0, size);
    }
    let bcast = match broadcast {
        BroadcastCounting::Single => 1,
        BroadcastCounting::PerRecipient => participants - 1,
    };
    match protocol {
        Protocol::Batch => CommsReport::new(0, 0, 0, size),
        Protocol::Fl => CommsReport::new(0, 2 * participants, 0, size),
        Protocol::Sbt => CommsReport::new(0, 0, participants - 1 + bcast, size),
        Protocol::Tolfl => {
            let clusters = topo.live_clusters();
            let c2s: u64 = clusters
                .iter()
                .map(|&c| {
                    let m = topo
                        .members(c)
                        .into_iter()
                        .filter(|&d| topo.participates(d))
                        .count();
                    2 * (m as u64 - 1)
                })
                .sum();
            CommsReport::new(clusters.len() as u64 - 1 + bcast, c2s, 0, size)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    /// Time to push one sample through forward and backward.
    pub per_sample: f64,
    /// Time for one model-sized message hop.
    pub per_message: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            per_sample: 1.0,
            per_message: 1.0,
        }
    }
}

/// Virtual duration of one collaborative round. Parallel phases cost the
/// maximum over their branches, sequential phases the sum of their steps.
///
/// * Batch: the server processes every live sample, `s`.
/// * FL: slowest device, then `2P` messages serialised at the server.
/// * SBT: slowest device, then `P - 1` handoffs and one broadcast.
/// * Tol-FL: slowest cluster (its slowest member plus `2 (m_c - 1)` messages
///   at its head), then `C - 1` handoffs and one broadcast.
pub fn virtual_time(
    topo: &Topology,
    protocol: Protocol,
    samples_of_device: &[usize],
    costs: &CostModel,
) -> f64 {
    let participants = topo.participants();
    if participants.is_empty() {
        return 0.0;
    }
    let compute = |d: usize| samples_of_device[d] as f64 * costs.per_sample;
    let slowest = participants.iter().map(|&d| compute(d)).fold(0.0, f64::max);
    let p = participants.len() as f64;
    match protocol {
        Protocol::Batch => participants.iter().map(|&d| compute(d)).sum(),
        Protocol::Fl => slowest + 2.0 * p * costs.per_message,
        Protocol::Sbt => slowest + p * costs.per_message,
        Protocol::Tolfl => {
            let clusters = topo.live_clusters();
            let parallel = clusters
                .iter()
                .map(|&c| {
                    let members: Vec<usize> = topo
                        .members(c)
                        .into_iter()
                        .filter(|&d| topo.participates(d))
                        .collect();
                    let slowest = members.iter().map(|&d| compute(d)).fold(0.0, f64::max);
                    slowest + 2.0 * (members.len() as f64 - 1.0) * costs.per_message
                })
                .fold(0.0, f64::max);
            parallel + clusters.len() as f64 * costs.per_message
        }
    }
}

/// Everything needed to run one seeded training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub protocol: Protocol,
    pub n_devices: usize,
    /// Cluster count for Tol-FL; other protocols derive theirs.
    pub k: usize,
    pub epochs: usize,
    pub alpha: f64,
    pub local_epochs: usize,
    pub local_lr: f64,
    pub dropout_enabled: bool,
    pub arch: ArchSpec,
    pub partition: PartitionPolicy,
    pub head_policy: HeadPolicy,
    pub failures: FailureSchedule,
    pub post_failure: PostFailurePolicy,
    pub costs: CostModel,
    pub broadcast: BroadcastCounting,
    pub seed: u64,
}

impl RunConfig {
    pub fn effective_k(&self) -> usize {
        self.protocol.effective_k(self.n_devices, self.k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_devices == 0 {
            return Err(Error::config("N", "must be at least 1"));
        }
        if self.protocol == Protocol::Tolfl && (self.k == 0 || self.k > self.n_devices) {
            return Err(Error::config(
                "k",
                format!(
                    "must satisfy 1 <= k <= N = {}, got {}",
                    self.n_devices, self.k
                ),
            ));
        }
        self.arch.validate()?;
        self.round_config(0).validate()?;
        self.failures
            .validate_for(self.n_devices)
            .map_err(|e| Error::config("failures", e.to_string()))?;
        Ok(())
    }

    fn round_config(&self, round: u64) -> RoundConfig {
        RoundConfig {
            alpha: self.alpha,
            local_epochs: self.local_epochs,
            local_lr: self.local_lr,
            dropout_enabled: self.dropout_enabled,
            seed: derive_seed(&[self.seed, 0xd409]),
            round,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunPhase {
    Collaborative,
    /// Server gone; every surviving device trains on its own data.
    Local,
    Halted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: RunPhase,
    pub live_devices: Vec<usize>,
    pub participants: Vec<usize>,
    /// Samples that contributed to this epoch's updates.
    pub live_samples: u64,
    /// Mean training loss at the parameters the epoch started from.
    pub train_loss: Option<f64>,
    /// Set when a collaborative round had nobody to aggregate.
    pub noop: bool,
    pub comms: CommsReport,
    pub virtual_time: f64,
    pub failures: Vec<FailureRecord>,
}

/// A trained model and the devices that hold it.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalModel {
    pub devices: Vec<usize>,
    pub params: ParamVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub protocol: Protocol,
    pub n_devices: usize,
    pub k: usize,
    pub param_count: usize,
    pub initial_samples: u64,
    pub samples_of_device: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
    pub final_models: Vec<FinalModel>,
}

impl RunTrace {
    pub fn total_comms(&self) -> CommsReport {
        let mut total = CommsReport::default();
        for e in &self.epochs {
            total.add(&e.comms);
        }
        total
    }

    pub fn total_time(&self) -> f64 {
        self.epochs.iter().map(|e| e.virtual_time).sum()
    }
}

enum State {
    Collaborative(ParamVector),
    Local(Vec<(usize, ParamVector)>),
    Halted(ParamVector),
}

/// Partitions `train` over the configured network and runs `cfg.epochs`
/// rounds, applying scheduled failures at the start of their epoch.
pub fn run_training(cfg: &RunConfig, train: &LabeledDataset) -> Result<RunTrace> {
    cfg.validate()?;
    if train.feature_dim() != cfg.arch.input_dim {
        return Err(Error::DimensionMismatch {
            expected: cfg.arch.input_dim,
            found: train.feature_dim(),
        });
    }
    let k = cfg.effective_k();
    let split: Partition = partition(
        train,
        cfg.n_devices,
        k,
        cfg.partition,
        derive_seed(&[cfg.seed, 0x9a27]),
    )?;
    let device_data: Vec<Vec<Sample>> = split
        .samples_of_device
        .iter()
        .map(|idx| train.subset(idx).samples().to_vec())
        .collect();
    let samples_of_device: Vec<usize> = device_data.iter().map(Vec::len).collect();
    let mut topo = Topology::from_assignment(
        split.cluster_of_device.clone(),
        cfg.head_policy,
        derive_seed(&[cfg.seed, 0x4ead]),
    )?;

    let model = Autoencoder::new(cfg.arch.clone())?;
    let param_count = model.param_count();
    let mut state = State::Collaborative(model.init_params(derive_seed(&[cfg.seed, 0x1417])));
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut batch_union: Option<Vec<Sample>> = None;

    for epoch in 1..=cfg.epochs {
        let (next, failures) = topo.inject_failures(&cfg.failures, epoch);
        if next != topo {
            batch_union = None;
        }
        topo = next;

        if topo.fl_server_down() {
            if let State::Collaborative(theta) = &state {
                state = match (cfg.protocol, cfg.post_failure.fl_server_down) {
                    (Protocol::Batch, _) | (_, ServerDownPolicy::Halt) => {
                        State::Halted(theta.clone())
                    }
                    (_, ServerDownPolicy::LocalTraining) => State::Local(
                        topo.live_devices()
                            .into_iter()
                            .map(|d| (d, theta.clone()))
                            .collect(),
                    ),
                };
            }
        }

        let rc = cfg.round_config(epoch as u64);
        let live_devices = topo.live_devices();
        let record = match &mut state {
            State::Collaborative(theta) => {
                let outcome = match cfg.protocol {
                    Protocol::Batch => {
                        let union = batch_union.get_or_insert_with(|| {
                            topo.participants()
                                .iter()
                                .flat_map(|&d| device_data[d].iter().cloned())
                                .collect()
                        });
                        if union.is_empty() {
                            None
                        } else {
                            Some(batch_round(&model, union, theta, &rc)?)
                        }
                    }
                    Protocol::Sbt => {
                        let devices: Vec<Device> = (0..topo.num_devices())
                            .map(|d| Device {
                                id: d,
                                live: topo.participates(d),
                                samples: &device_data[d],
                            })
                            .collect();
                        Some(sbt_round(&model, &devices, theta, &rc)?)
                    }
                    Protocol::Fl | Protocol::Tolfl => {
                        let clusters: Vec<ClusterView> = (0..topo.num_clusters())
                            .map(|c| ClusterView {
                                head: topo.head_of(c),
                                members: topo
                                    .members(c)
                                    .into_iter()
                                    .map(|d| Device {
                                        id: d,
                                        live: topo.is_live(d),
                                        samples: &device_data[d],
                                    })
                                    .collect(),
                            })
                            .collect();
                        Some(tolfl_round(&model, &clusters, theta, &rc)?)
                    }
                };
                let (samples, loss) = match outcome {
                    Some(out) if !out.is_noop() => {
                        *theta = out.params;
                        (out.samples, out.loss)
                    }
                    _ => (0, None),
                };
                EpochRecord {
                    epoch,
                    phase: RunPhase::Collaborative,
                    live_devices,
                    participants: topo.participants(),
                    live_samples: samples,
                    train_loss: loss,
                    noop: samples == 0,
                    comms: account_round(&topo, cfg.protocol, param_count, cfg.broadcast),
                    virtual_time: virtual_time(&topo, cfg.protocol, &samples_of_device, &cfg.costs),
                    failures,
                }
            }
            State::Local(models) => {
                models.retain(|(d, _)| topo.is_live(*d));
                let mut samples = 0u64;
                let mut weighted_loss = 0.0;
                let mut slowest: f64 = 0.0;
                for (d, params) in models.iter_mut() {
                    let data = &device_data[*d];
                    if data.is_empty() {
                        continue;
                    }
                    let local_cfg = RoundConfig {
                        seed: derive_seed(&[rc.seed, *d as u64]),
                        ..rc.clone()
                    };
                    let out = batch_round(&model, data, params, &local_cfg)?;
                    *params = out.params;
                    samples += out.samples;
                    weighted_loss += out.loss.unwrap_or(0.0) * out.samples as f64;
                    slowest = slowest.max(data.len() as f64 * cfg.costs.per_sample);
                }
                EpochRecord {
                    epoch,
                    phase: RunPhase::Local,
                    participants: models.iter().map(|(d, _)| *d).collect(),
                    live_devices,
                    live_samples: samples,
                    train_loss: (samples > 0).then(|| weighted_loss / samples as f64),
                    noop: false,
                    comms: CommsReport::new(0, 0, 0, param_count as u64 * BYTES_PER_PARAM),
                    virtual_time: slowest,
                    failures,
                }
            }
            State::Halted(_) => EpochRecord {
                epoch,
                phase: RunPhase::Halted,
                live_devices,
                participants: Vec::new(),
                live_samples: 0,
                train_loss: None,
                noop: false,
                comms: CommsReport::new(0, 0, 0, param_count as u64 * BYTES_PER_PARAM),
                virtual_time: 0.0,
                failures,
            },
        };
        if record.train_loss.is_some_and(|l| !l.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        epochs.push(record);
    }

    let final_models = match state {
        State::Collaborative(params) | State::Halted(params) => {
            if !params.is_finite() {
                return Err(Error::Diverged { epoch: cfg.epochs });
            }
            vec![FinalModel {
                devices: topo.participants(),
                params,
            }]
        }
        State::Local(models) => models
            .into_iter()
            .map(|(d, params)| FinalModel {
                devices: vec![d],
                params,
            })
            .collect(),
    };

    Ok(RunTrace {
        protocol: cfg.protocol,
        n_devices: cfg.n_devices,
        k,
        param_count,
        initial_samples: train.len() as u64,
        samples_of_device,
        epochs,
        final_models,
    })
}
