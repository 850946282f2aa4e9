//! Round functions for batch, super-batch (SBT), federated averaging (FL)
//! and the clustered hybrid (Tol-FL).
//!
//! Every round has the same shape: a parallel phase that computes
//! `(sample count, mean gradient)` pairs, then a strictly sequential merge
//! into a [`GradAccumulator`], then one step `theta - alpha * g`. Merge order
//! is fixed (device order for SBT, cluster order for Tol-FL), so results do
//! not depend on how the parallel phase is scheduled.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{apply_update, GradVector, Mode, Objective, ParamVector, Sample};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    /// Global learning rate applied by the last aggregator.
    pub alpha: f64,
    /// Local epochs per device inside FedAvg.
    pub local_epochs: usize,
    /// Device-side step size, used only when `local_epochs > 1`.
    pub local_lr: f64,
    pub dropout_enabled: bool,
    pub seed: u64,
    /// Round index, mixed into per-device dropout seeds.
    pub round: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            local_epochs: 1,
            local_lr: 1e-3,
            dropout_enabled: false,
            seed: 0,
            round: 0,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config("alpha", "must be a positive real"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("E", "must be at least 1"));
        }
        if !(self.local_lr.is_finite() && self.local_lr > 0.0) {
            return Err(Error::config("local_lr", "must be a positive real"));
        }
        Ok(())
    }

    fn mode_for(&self, device: usize, step: u64) -> Mode {
        if self.dropout_enabled {
            Mode::Train {
                mask_seed: derive_seed(&[self.seed, device as u64, self.round, step]),
            }
        } else {
            Mode::Eval
        }
    }
}

/// A device's view inside a round.
#[derive(Debug, Clone, Copy)]
pub struct Device<'a> {
    pub id: usize,
    pub live: bool,
    pub samples: &'a [Sample],
}

impl<'a> Device<'a> {
    pub fn new(id: usize, samples: &'a [Sample]) -> Self {
        Self {
            id,
            live: true,
            samples,
        }
    }
}

/// Members of one cluster, with `head` naming the aggregating device.
#[derive(Debug, Clone)]
pub struct ClusterView<'a> {
    pub head: usize,
    pub members: Vec<Device<'a>>,
}

impl ClusterView<'_> {
    pub fn head_live(&self) -> bool {
        self.members.iter().any(|d| d.id == self.head && d.live)
    }
}

/// Output of a device or cluster: sample count and mean gradient over those
/// samples. Also carries the mean training loss at the round's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterUpdate {
    pub n: u64,
    pub g: GradVector,
    pub loss: f64,
}

impl ClusterUpdate {
    pub fn empty(len: usize) -> Self {
        Self {
            n: 0,
            g: GradVector::zeros(len),
            loss: 0.0,
        }
    }
}

/// Running `(count, mean)` over merged updates.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccumulator {
    pub n: u64,
    pub g: GradVector,
    pub loss: f64,
}

impl GradAccumulator {
    pub fn new(len: usize) -> Self {
        Self {
            n: 0,
            g: GradVector::zeros(len),
            loss: 0.0,
        }
    }

    /// `n <- n + n_i; r <- n_i / n; g <- r g_i + (1 - r) g`.
    pub fn merge(mut self, upd: &ClusterUpdate) -> Result<Self> {
        if upd.g.len() != self.g.len() {
            return Err(Error::DimensionMismatch {
                expected: self.g.len(),
                found: upd.g.len(),
            });
        }
        if upd.n == 0 {
            return Ok(self);
        }
        self.n += upd.n;
        let r = upd.n as f64 / self.n as f64;
        for (acc, new) in self.g.as_mut_slice().iter_mut().zip(upd.g.as_slice()) {
            *acc = r * new + (1.0 - r) * *acc;
        }
        self.loss = r * upd.loss + (1.0 - r) * self.loss;
        Ok(self)
    }

    pub fn into_update(self) -> ClusterUpdate {
        ClusterUpdate {
            n: self.n,
            g: self.g,
            loss: self.loss,
        }
    }
}

fn merge_all<'a>(
    len: usize,
    updates: impl IntoIterator<Item = &'a ClusterUpdate>,
) -> Result<GradAccumulator> {
    updates
        .into_iter()
        .try_fold(GradAccumulator::new(len), |acc, u| acc.merge(u))
}

/// The result of one round. `samples == 0` marks a no-op round in which
/// `params` is returned unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub params: ParamVector,
    pub samples: u64,
    pub loss: Option<f64>,
}

impl RoundOutcome {
    pub fn is_noop(&self) -> bool {
        self.samples == 0
    }
}

fn finish(theta: &ParamVector, acc: GradAccumulator, alpha: f64) -> Result<RoundOutcome> {
    if acc.n == 0 {
        return Ok(RoundOutcome {
            params: theta.clone(),
            samples: 0,
            loss: None,
        });
    }
    Ok(RoundOutcome {
        params: apply_update(theta, &acc.g, alpha)?,
        samples: acc.n,
        loss: Some(acc.loss),
    })
}

/// A device's contribution for one round.
///
/// With one local epoch this is the exact mean gradient at `theta`. With
/// `E > 1` the device runs `E` full-batch SGD steps at `local_lr` and reports
/// the pseudo-gradient `(theta - theta_E) / local_lr`.
pub fn local_gradient<O: Objective>(
    obj: &O,
    device: &Device<'_>,
    theta: &ParamVector,
    cfg: &RoundConfig,
) -> Result<ClusterUpdate> {
    if !device.live || device.samples.is_empty() {
        return Ok(ClusterUpdate::empty(obj.param_len()));
    }
    let n = device.samples.len() as u64;
    let (loss, g) = obj.loss_and_grad(theta, device.samples, cfg.mode_for(device.id, 0))?;
    if cfg.local_epochs <= 1 {
        return Ok(ClusterUpdate { n, g, loss });
    }
    let mut local = apply_update(theta, &g, cfg.local_lr)?;
    for step in 1..cfg.local_epochs as u64 {
        let (_, g) = obj.loss_and_grad(&local, device.samples, cfg.mode_for(device.id, step))?;
        local = apply_update(&local, &g, cfg.local_lr)?;
    }
    let pseudo = theta
        .as_slice()
        .iter()
        .zip(local.as_slice())
        .map(|(t, l)| (t - l) / cfg.local_lr)
        .collect::<Vec<_>>();
    Ok(ClusterUpdate {
        n,
        g: GradVector::from(pseudo),
        loss,
    })
}

/// One round of super-batch training: every live device computes its plain
/// local gradient in parallel, then the gradients are merged in device order.
pub fn sbt_round<O: Objective>(
    obj: &O,
    devices: &[Device<'_>],
    theta: &ParamVector,
    cfg: &RoundConfig,
) -> Result<RoundOutcome> {
    let gradient_cfg = RoundConfig {
        local_epochs: 1,
        ..cfg.clone()
    };
    let updates = devices
        .par_iter()
        .map(|d| local_gradient(obj, d, theta, &gradient_cfg))
        .collect::<Result<Vec<_>>>()?;
    let acc = merge_all(obj.param_len(), &updates)?;
    finish(theta, acc, cfg.alpha)
}

/// FedAvg inside one cluster: sample-weighted mean of live members' updates.
/// Dead members contribute nothing; a dead head yields an empty update.
pub fn fedavg_cluster<O: Objective>(
    obj: &O,
    cluster: &ClusterView<'_>,
    theta: &ParamVector,
    cfg: &RoundConfig,
) -> Result<ClusterUpdate> {
    if !cluster.head_live() {
        return Ok(ClusterUpdate::empty(obj.param_len()));
    }
    let updates = cluster
        .members
        .par_iter()
        .map(|d| local_gradient(obj, d, theta, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(merge_all(obj.param_len(), &updates)?.into_update())
}

/// One Tol-FL round: FedAvg in every cluster in parallel, then the cluster
/// results are merged head to head in cluster order and the last head applies
/// the update. Clusters whose head is down are skipped.
pub fn tolfl_round<O: Objective>(
    obj: &O,
    clusters: &[ClusterView<'_>],
    theta: &ParamVector,
    cfg: &RoundConfig,
) -> Result<RoundOutcome> {
    let updates = clusters
        .par_iter()
        .map(|c| fedavg_cluster(obj, c, theta, cfg))
        .collect::<Result<Vec<_>>>()?;
    let acc = merge_all(obj.param_len(), &updates)?;
    finish(theta, acc, cfg.alpha)
}

/// Federated averaging over all live devices with `devices[0]` as server.
/// This is Tol-FL with a single cluster.
pub fn fl_round<O: Objective>(
    obj: &O,
    devices: &[Device<'_>],
    theta: &ParamVector,
    cfg: &RoundConfig,
) -> Result<RoundOutcome> {
    let Some(server) = devices.first() else {
        return finish(theta, GradAccumulator::new(obj.param_len()), cfg.alpha);
    };
    let cluster = ClusterView {
        head: server.id,
        members: devices.to_vec(),
    };
    tolfl_round(obj, std::slice::from_ref(&cluster), theta, cfg)
}

/// Centralised full-batch gradient step. This is the reference every
/// distributed protocol is checked against.
pub fn batch_round<O: Objective>(
    obj: &O,
    samples: &[Sample],
    theta: &ParamVector,
    cfg: &RoundConfig,
) -> Result<RoundOutcome> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mode = cfg.mode_for(0, 0);
    let (loss, g) = obj.loss_and_grad(theta, samples, mode)?;
    Ok(RoundOutcome {
        params: apply_update(theta, &g, cfg.alpha)?,
        samples: samples.len() as u64,
        loss: Some(loss),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{max_abs_diff, ArchSpec, Autoencoder};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `J(theta) = theta^2` per sample, independent of the data.
    struct Square;

    impl Objective for Square {
        fn param_len(&self) -> usize {
            1
        }

        fn loss_and_grad(
            &self,
            p: &ParamVector,
            batch: &[Sample],
            _: Mode,
        ) -> Result<(f64, GradVector)> {
            if batch.is_empty() {
                return Err(Error::EmptyBatch);
            }
            let t = p.as_slice()[0];
            Ok((t * t, GradVector::from(vec![2.0 * t])))
        }
    }

    /// `J(theta) = (theta - x)^2`, gradient `2 (theta - x)` per sample.
    struct Scalar;

    impl Objective for Scalar {
        fn param_len(&self) -> usize {
            1
        }

        fn loss_and_grad(
            &self,
            p: &ParamVector,
            batch: &[Sample],
            _: Mode,
        ) -> Result<(f64, GradVector)> {
            if batch.is_empty() {
                return Err(Error::EmptyBatch);
            }
            let t = p.as_slice()[0];
            let m = batch.len() as f64;
            let loss = batch
                .iter()
                .map(|s| (t - s.features[0]).powi(2))
                .sum::<f64>()
                / m;
            let g = batch.iter().map(|s| 2.0 * (t - s.features[0])).sum::<f64>() / m;
            Ok((loss, GradVector::from(vec![g])))
        }
    }

    fn upd(n: u64, g: Vec<f64>) -> ClusterUpdate {
        ClusterUpdate {
            n,
            g: GradVector::from(g),
            loss: 0.0,
        }
    }

    fn scalar_samples(values: &[f64]) -> Vec<Sample> {
        values.iter().map(|&v| Sample::new(vec![v], 0)).collect()
    }

    fn model() -> Autoencoder {
        Autoencoder::new(ArchSpec::new(5, vec![4, 3], 2, 0.2).unwrap()).unwrap()
    }

    fn data(m: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|_| Sample::new((0..5).map(|_| rng.gen_range(-1.0..1.0)).collect(), 0))
            .collect()
    }

    fn cfg() -> RoundConfig {
        RoundConfig {
            alpha: 0.05,
            ..RoundConfig::default()
        }
    }

    #[test]
    fn merge_examples() {
        let acc = GradAccumulator::new(2)
            .merge(&upd(4, vec![1.0, 2.0]))
            .unwrap();
        assert_eq!((acc.n, acc.g.as_slice()), (4, &[1.0, 2.0][..]));

        let acc = GradAccumulator::new(1)
            .merge(&upd(2, vec![4.0]))
            .unwrap()
            .merge(&upd(2, vec![6.0]))
            .unwrap();
        assert_eq!((acc.n, acc.g.as_slice()), (4, &[5.0][..]));

        // Per-sample gradients {0, 4, 4, 4} have mean 3.
        let acc = GradAccumulator::new(1)
            .merge(&upd(1, vec![0.0]))
            .unwrap()
            .merge(&upd(3, vec![4.0]))
            .unwrap();
        assert_eq!((acc.n, acc.g.as_slice()), (4, &[3.0][..]));
    }

    #[test]
    fn merge_ignores_empty_and_rejects_mismatch() {
        let acc = GradAccumulator::new(1).merge(&upd(2, vec![3.0])).unwrap();
        let same = acc.clone().merge(&ClusterUpdate::empty(1)).unwrap();
        assert_eq!(acc, same);
        assert!(GradAccumulator::new(1)
            .merge(&upd(1, vec![1.0, 2.0]))
            .is_err());
        assert_eq!(GradAccumulator::new(3).g.norm(), 0.0);
    }

    #[test]
    fn local_gradient_cases() {
        let theta = ParamVector::from(vec![1.5]);
        let empty = Device::new(0, &[]);
        assert_eq!(
            local_gradient(&Square, &empty, &theta, &cfg()).unwrap(),
            ClusterUpdate::empty(1)
        );

        let samples = scalar_samples(&[0.0, 0.0]);
        let mut dead = Device::new(0, &samples);
        dead.live = false;
        assert_eq!(local_gradient(&Square, &dead, &theta, &cfg()).unwrap().n, 0);

        let m = model();
        let theta = m.init_params(3);
        let batch = data(7, 1);
        let u = local_gradient(&m, &Device::new(0, &batch), &theta, &cfg()).unwrap();
        let (n, g) = m.grad(&theta, &batch, Mode::Eval).unwrap();
        assert_eq!((u.n, &u.g), (n as u64, &g));
    }

    #[test]
    fn two_local_epochs_on_square_match_closed_form() {
        // theta_2 = theta_0 (1 - 2 lr)^2, so (theta_0 - theta_2) / lr = 4 theta_0 (1 - lr).
        let theta0 = 0.8;
        let lr = 0.1;
        let c = RoundConfig {
            local_epochs: 2,
            local_lr: lr,
            ..cfg()
        };
        let samples = scalar_samples(&[0.0; 3]);
        let u = local_gradient(
            &Square,
            &Device::new(0, &samples),
            &ParamVector::from(vec![theta0]),
            &c,
        )
        .unwrap();
        let expected = 4.0 * theta0 * (1.0 - lr);
        assert!((u.g.as_slice()[0] - expected).abs() < 1e-12);
        assert_eq!(u.n, 3);
    }

    #[test]
    fn fedavg_cluster_cases() {
        let theta = ParamVector::from(vec![0.0]);
        let a = scalar_samples(&[1.0]);
        let b = scalar_samples(&[2.0, 3.0]);
        let c = scalar_samples(&[4.0, 5.0, 6.0]);

        let single = ClusterView {
            head: 0,
            members: vec![Device::new(0, &b)],
        };
        let u = fedavg_cluster(&Scalar, &single, &theta, &cfg()).unwrap();
        let d = local_gradient(&Scalar, &Device::new(0, &b), &theta, &cfg()).unwrap();
        assert_eq!(u, d);

        // Equal counts: plain average of -2*mean(b) and -2*mean(c2).
        let c2 = scalar_samples(&[7.0, 9.0]);
        let pair = ClusterView {
            head: 0,
            members: vec![Device::new(0, &b), Device::new(1, &c2)],
        };
        let u = fedavg_cluster(&Scalar, &pair, &theta, &cfg()).unwrap();
        assert!((u.g.as_slice()[0] - (-5.0 + -16.0) / 2.0).abs() < 1e-12);

        // n = 1, 2, 3: oracle over the six concatenated samples.
        let three = ClusterView {
            head: 0,
            members: vec![Device::new(0, &a), Device::new(1, &b), Device::new(2, &c)],
        };
        let u = fedavg_cluster(&Scalar, &three, &theta, &cfg()).unwrap();
        let all: Vec<f64> = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0].to_vec();
        let oracle = all.iter().map(|x| -2.0 * x).sum::<f64>() / 6.0;
        assert_eq!(u.n, 6);
        assert!((u.g.as_slice()[0] - oracle).abs() < 1e-12);

        let mut dead_head = three.clone();
        dead_head.members[0].live = false;
        assert_eq!(
            fedavg_cluster(&Scalar, &dead_head, &theta, &cfg())
                .unwrap()
                .n,
            0
        );

        let mut dead_member = three.clone();
        dead_member.members[2].live = false;
        let u = fedavg_cluster(&Scalar, &dead_member, &theta, &cfg()).unwrap();
        assert_eq!(u.n, 3);
        assert!((u.g.as_slice()[0] - (-2.0 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn sbt_matches_batch_on_union() {
        let m = model();
        let theta = m.init_params(9);
        let parts: Vec<Vec<Sample>> = (0..5).map(|i| data(3 + i, 100 + i as u64)).collect();
        let devices: Vec<Device> = parts
            .iter()
            .enumerate()
            .map(|(i, p)| Device::new(i, p))
            .collect();
        let union: Vec<Sample> = parts.concat();
        let sbt = sbt_round(&m, &devices, &theta, &cfg()).unwrap();
        let batch = batch_round(&m, &union, &theta, &cfg()).unwrap();
        assert_eq!(sbt.samples, union.len() as u64);
        assert!(max_abs_diff(sbt.params.as_slice(), batch.params.as_slice()) < 1e-9);

        let one = sbt_round(&m, &devices[..1], &theta, &cfg()).unwrap();
        let alone = batch_round(&m, &parts[0], &theta, &cfg()).unwrap();
        assert!(max_abs_diff(one.params.as_slice(), alone.params.as_slice()) < 1e-12);
    }

    #[test]
    fn sbt_with_identical_data_matches_any_device() {
        let m = model();
        let theta = m.init_params(2);
        let shared = data(6, 4);
        let devices: Vec<Device> = (0..4).map(|i| Device::new(i, &shared)).collect();
        let sbt = sbt_round(&m, &devices, &theta, &cfg()).unwrap();
        let single = batch_round(&m, &shared, &theta, &cfg()).unwrap();
        assert!(max_abs_diff(sbt.params.as_slice(), single.params.as_slice()) < 1e-12);
    }

    #[test]
    fn no_live_devices_is_a_noop() {
        let m = model();
        let theta = m.init_params(2);
        let out = sbt_round(&m, &[], &theta, &cfg()).unwrap();
        assert!(out.is_noop());
        assert_eq!(out.params, theta);

        let batch = data(3, 1);
        let mut dead = Device::new(0, &batch);
        dead.live = false;
        let cluster = ClusterView {
            head: 0,
            members: vec![dead, Device::new(1, &batch)],
        };
        let out = tolfl_round(&m, &[cluster], &theta, &cfg()).unwrap();
        assert!(out.is_noop());
        assert!(batch_round(&m, &[], &theta, &cfg()).is_err());
    }

    #[test]
    fn fl_equals_single_cluster_tolfl_and_batch() {
        let m = model();
        let theta = m.init_params(5);
        let parts: Vec<Vec<Sample>> = (0..4).map(|i| data(2 + 2 * i, 40 + i as u64)).collect();
        let devices: Vec<Device> = parts
            .iter()
            .enumerate()
            .map(|(i, p)| Device::new(i, p))
            .collect();
        let fl = fl_round(&m, &devices, &theta, &cfg()).unwrap();
        let tol = tolfl_round(
            &m,
            &[ClusterView {
                head: 0,
                members: devices.clone(),
            }],
            &theta,
            &cfg(),
        )
        .unwrap();
        assert_eq!(fl, tol);
        let batch = batch_round(&m, &parts.concat(), &theta, &cfg()).unwrap();
        assert!(max_abs_diff(fl.params.as_slice(), batch.params.as_slice()) < 1e-9);

        let one = fl_round(&m, &devices[..1], &theta, &cfg()).unwrap();
        let local = batch_round(&m, &parts[0], &theta, &cfg()).unwrap();
        assert!(max_abs_diff(one.params.as_slice(), local.params.as_slice()) < 1e-12);
    }

    #[test]
    fn batch_round_invariances() {
        let m = model();
        let theta = m.init_params(6);
        let batch = data(5, 3);
        let doubled: Vec<Sample> = batch.iter().chain(batch.iter()).cloned().collect();
        let a = batch_round(&m, &batch, &theta, &cfg()).unwrap();
        let b = batch_round(&m, &doubled, &theta, &cfg()).unwrap();
        assert!(max_abs_diff(a.params.as_slice(), b.params.as_slice()) < 1e-12);

        // At theta = x the scalar objective has zero gradient.
        let fixed = batch_round(
            &Scalar,
            &scalar_samples(&[2.0]),
            &ParamVector::from(vec![2.0]),
            &cfg(),
        )
        .unwrap();
        assert_eq!(fixed.params.as_slice(), &[2.0]);
    }

    #[test]
    fn batch_round_matches_hand_derived_least_squares_step() {
        // Two samples x = {1, 3}, theta = 0, alpha = 0.25: the mean gradient of
        // (theta - x)^2 is 2 * (0 - 2) = -4, so theta' = 0 + 0.25 * 4 = 1.
        let c = RoundConfig {
            alpha: 0.25,
            ..cfg()
        };
        let out = batch_round(
            &Scalar,
            &scalar_samples(&[1.0, 3.0]),
            &ParamVector::from(vec![0.0]),
            &c,
        )
        .unwrap();
        assert!((out.params.as_slice()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn removing_a_cluster_gives_weighted_mean_of_the_rest() {
        let theta = ParamVector::from(vec![0.0]);
        let parts = [
            scalar_samples(&[1.0, 2.0]),
            scalar_samples(&[5.0]),
            scalar_samples(&[3.0, 3.0, 9.0]),
        ];
        let mut clusters: Vec<ClusterView> = parts
            .iter()
            .enumerate()
            .map(|(i, p)| ClusterView {
                head: i,
                members: vec![Device::new(i, p)],
            })
            .collect();
        clusters[1].members[0].live = false;
        let c = RoundConfig {
            alpha: 1.0,
            ..cfg()
        };
        let out = tolfl_round(&Scalar, &clusters, &theta, &c).unwrap();
        let remaining = [1.0, 2.0, 3.0, 3.0, 9.0];
        let oracle = remaining.iter().map(|x| 2.0 * x).sum::<f64>() / 5.0;
        assert_eq!(out.samples, 5);
        assert!((out.params.as_slice()[0] - oracle).abs() < 1e-12);
    }

    #[test]
    fn splitting_a_device_in_two_changes_nothing() {
        let m = model();
        let theta = m.init_params(8);
        let full = data(10, 77);
        let whole = [Device::new(0, &full)];
        let halves = [Device::new(0, &full[..5]), Device::new(1, &full[5..])];
        let a = sbt_round(&m, &whole, &theta, &cfg()).unwrap();
        let b = sbt_round(&m, &halves, &theta, &cfg()).unwrap();
        assert!(max_abs_diff(a.params.as_slice(), b.params.as_slice()) < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn merge_order_does_not_matter(
            updates in prop::collection::vec((0u64..50, prop::collection::vec(-10.0f64..10.0, 3)), 1..8),
            rotation in 0usize..8,
        ) {
            let ups: Vec<ClusterUpdate> = updates.into_iter().map(|(n, g)| {
                if n == 0 { ClusterUpdate::empty(3) } else { upd(n, g) }
            }).collect();
            let forward = merge_all(3, &ups).unwrap();
            let mut rotated = ups.clone();
            rotated.rotate_left(rotation % ups.len());
            rotated.reverse();
            let other = merge_all(3, &rotated).unwrap();
            prop_assert_eq!(forward.n, ups.iter().map(|u| u.n).sum::<u64>());
            prop_assert_eq!(forward.n, other.n);
            prop_assert!(max_abs_diff(forward.g.as_slice(), other.g.as_slice()) < 1e-12);
            // Oracle: explicit weighted mean.
            if forward.n > 0 {
                for j in 0..3 {
                    let oracle = ups.iter().map(|u| u.n as f64 * u.g.as_slice()[j]).sum::<f64>() / forward.n as f64;
                    prop_assert!((forward.g.as_slice()[j] - oracle).abs() < 1e-12);
                }
            }
        }
    }
}
