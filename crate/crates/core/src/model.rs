//! Fully-connected autoencoder used as the anomaly detector.
//!
//! The encoder maps `input_dim -> hidden_dims[0] -> ... -> code_dim`, the
//! decoder mirrors the hidden widths back out to `input_dim`. Hidden layers
//! (including the code layer) use ReLU followed by inverted dropout in train
//! mode; the output layer is linear. All parameters live in one flat
//! [`ParamVector`] laid out layer by layer as `weights (fan_out x fan_in,
//! row-major)` followed by `biases (fan_out)`.

use std::ops::Range;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from;

pub const DEFAULT_HIDDEN: [usize; 3] = [128, 96, 64];
pub const DEFAULT_CODE_DIM: usize = 32;
pub const DEFAULT_DROPOUT: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub code_dim: usize,
    pub dropout_prob: f64,
}

impl ArchSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        code_dim: usize,
        dropout_prob: f64,
    ) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_dims,
            code_dim,
            dropout_prob,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Three hidden layers of 128/96/64 units, a 32-wide code and 0.2 dropout.
    pub fn default_for(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: DEFAULT_HIDDEN.to_vec(),
            code_dim: DEFAULT_CODE_DIM,
            dropout_prob: DEFAULT_DROPOUT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArch("input_dim must be positive".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::InvalidArch("hidden_dims must be non-empty".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArch("hidden widths must be positive".into()));
        }
        if self.code_dim == 0 || self.code_dim >= self.input_dim {
            return Err(Error::InvalidArch(format!(
                "code_dim must be in 1..{}, got {}",
                self.input_dim, self.code_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::InvalidArch(format!(
                "dropout_prob must be in [0, 1), got {}",
                self.dropout_prob
            )));
        }
        Ok(())
    }

    /// Widths of every activation from input to reconstruction.
    pub fn layer_widths(&self) -> Vec<usize> {
        let mut widths = Vec::with_capacity(2 * self.hidden_dims.len() + 3);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_dims);
        widths.push(self.code_dim);
        widths.extend(self.hidden_dims.iter().rev());
        widths.push(self.input_dim);
        widths
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths()
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// One input sample. The label is carried for evaluation only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: u32,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: u32) -> Self {
        Self { features, label }
    }
}

macro_rules! flat_vector {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(Vec<f64>);

        impl $name {
            pub fn zeros(len: usize) -> Self {
                Self(vec![0.0; len])
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.0
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }

            pub fn norm(&self) -> f64 {
                self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(values: Vec<f64>) -> Self {
                Self(values)
            }
        }
    };
}

flat_vector!(
    /// Flat vector of all model weights and biases.
    ParamVector
);
flat_vector!(
    /// Mean gradient over a sample set, same layout as [`ParamVector`].
    GradVector
);

/// Largest absolute coordinate difference between two equal-length slices.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_abs_diff on unequal lengths");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// No dropout; deterministic.
    Eval,
    /// Inverted dropout on every hidden layer with masks drawn from `mask_seed`.
    Train { mask_seed: u64 },
}

/// Location of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl LayerSlot {
    pub fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    pub fn biases(&self) -> Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }
}

/// Anything that yields a mean loss and mean gradient over a batch.
///
/// The training protocols are written against this trait so they can be
/// checked on closed-form objectives as well as the autoencoder.
pub trait Objective: Sync {
    fn param_len(&self) -> usize;

    fn loss_and_grad(
        &self,
        params: &ParamVector,
        batch: &[Sample],
        mode: Mode,
    ) -> Result<(f64, GradVector)>;
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    arch: ArchSpec,
    layers: Vec<LayerSlot>,
    param_count: usize,
}

struct Tape {
    /// Input to each layer (layer 0 gets the raw batch).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Array2<f64>>,
    /// Dropout scale per hidden layer; `None` in eval mode.
    masks: Vec<Option<Array2<f64>>>,
    output: Array2<f64>,
}

impl Autoencoder {
    pub fn new(arch: ArchSpec) -> Result<Self> {
        arch.validate()?;
        let mut layers = Vec::new();
        let mut offset = 0;
        for w in arch.layer_widths().windows(2) {
            layers.push(LayerSlot {
                fan_in: w[0],
                fan_out: w[1],
                offset,
            });
            offset += w[0] * w[1] + w[1];
        }
        Ok(Self {
            arch,
            layers,
            param_count: offset,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn layout(&self) -> &[LayerSlot] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Fan-in scaled uniform weights, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// and zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = rng_from(&[seed, 0x1417]);
        let mut values = vec![0.0; self.param_count];
        for layer in &self.layers {
            let limit = (6.0 / layer.fan_in as f64).sqrt();
            for w in &mut values[layer.weights()] {
                *w = rng.gen_range(-limit..limit);
            }
        }
        ParamVector(values)
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count {
            return Err(Error::DimensionMismatch {
                expected: self.param_count,
                found: params.len(),
            });
        }
        Ok(())
    }

    fn batch_matrix(&self, batch: &[Sample]) -> Result<Array2<f64>> {
        let d = self.arch.input_dim;
        let mut flat = Vec::with_capacity(batch.len() * d);
        for s in batch {
            if s.features.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: s.features.len(),
                });
            }
            flat.extend_from_slice(&s.features);
        }
        Ok(Array2::from_shape_vec((batch.len(), d), flat).expect("shape checked above"))
    }

    fn weights<'a>(&self, params: &'a [f64], layer: &LayerSlot) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((layer.fan_out, layer.fan_in), &params[layer.weights()])
            .expect("layout matches param count")
    }

    fn run(&self, params: &[f64], input: Array2<f64>, mode: Mode) -> Tape {
        let m = input.nrows();
        let last = self.layers.len() - 1;
        let p = self.arch.dropout_prob;
        let mut rng = match mode {
            Mode::Train { mask_seed } if p > 0.0 => Some(rng_from(&[mask_seed, 0xd0])),
            _ => None,
        };
        let keep_scale = 1.0 / (1.0 - p);

        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut masks = Vec::with_capacity(last);
        let mut current = input;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = self.weights(params, layer);
            let b = ArrayView1::from(&params[layer.biases()]);
            let z = current.dot(&w.t()) + b;
            inputs.push(current);
            if l == last {
                return Tape {
                    inputs,
                    pre,
                    masks,
                    output: z,
                };
            }
            let mut a = z.mapv(|v| v.max(0.0));
            let mask = rng.as_mut().map(|rng| {
                Array2::from_shape_fn((m, layer.fan_out), |_| {
                    if rng.gen::<f64>() < p {
                        0.0
                    } else {
                        keep_scale
                    }
                })
            });
            if let Some(mask) = &mask {
                a *= mask;
            }
            pre.push(z);
            masks.push(mask);
            current = a;
        }
        unreachable!("autoencoder always has an output layer")
    }

    pub fn forward(&self, params: &ParamVector, x: &Sample, mode: Mode) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let input = self.batch_matrix(std::slice::from_ref(x))?;
        Ok(self
            .run(params.as_slice(), input, mode)
            .output
            .into_raw_vec_and_offset()
            .0)
    }

    /// Eval-mode reconstructions for a whole batch, one row per sample.
    pub fn reconstruct(&self, params: &ParamVector, batch: &[Sample]) -> Result<Array2<f64>> {
        self.check_params(params)?;
        let input = self.batch_matrix(batch)?;
        Ok(self.run(params.as_slice(), input, Mode::Eval).output)
    }

    /// Mean gradient of the reconstruction loss over `batch`.
    pub fn grad(
        &self,
        params: &ParamVector,
        batch: &[Sample],
        mode: Mode,
    ) -> Result<(usize, GradVector)> {
        let (_, g) = self.loss_and_grad(params, batch, mode)?;
        Ok((batch.len(), g))
    }

    pub fn anomaly_score(&self, params: &ParamVector, x: &Sample) -> Result<f64> {
        let xhat = self.forward(params, x, Mode::Eval)?;
        recon_loss(&x.features, &xhat)
    }

    /// Eval-mode anomaly scores for every sample in `batch`.
    pub fn anomaly_scores(&self, params: &ParamVector, batch: &[Sample]) -> Result<Vec<f64>> {
        let out = self.reconstruct(params, batch)?;
        Ok(batch
            .iter()
            .zip(out.rows())
            .map(|(s, row)| {
                s.features
                    .iter()
                    .zip(row.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum()
            })
            .collect())
    }

    /// Eval-mode mean reconstruction loss.
    pub fn mean_loss(&self, params: &ParamVector, batch: &[Sample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let scores = self.anomaly_scores(params, batch)?;
        Ok(scores.iter().sum::<f64>() / batch.len() as f64)
    }
}

impl Objective for Autoencoder {
    fn param_len(&self) -> usize {
        self.param_count
    }

    fn loss_and_grad(
        &self,
        params: &ParamVector,
        batch: &[Sample],
        mode: Mode,
    ) -> Result<(f64, GradVector)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.check_params(params)?;
        let input = self.batch_matrix(batch)?;
        let m = batch.len() as f64;
        let theta = params.as_slice();
        let tape = self.run(theta, input.clone(), mode);

        let residual = &tape.output - &input;
        let loss = residual.iter().map(|r| r * r).sum::<f64>() / m;

        let mut grad = vec![0.0; self.param_count];
        let mut delta = residual * 2.0;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let dw = delta.t().dot(&tape.inputs[l]) / m;
            grad[layer.weights()].copy_from_slice(dw.as_slice().expect("standard layout"));
            let db = delta.sum_axis(Axis(0)) / m;
            grad[layer.biases()].copy_from_slice(db.as_slice().expect("standard layout"));
            if l == 0 {
                break;
            }
            let w = self.weights(theta, layer);
            let mut upstream = delta.dot(&w);
            upstream.zip_mut_with(&tape.pre[l - 1], |d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
            if let Some(mask) = &tape.masks[l - 1] {
                upstream *= mask;
            }
            delta = upstream;
        }
        Ok((loss, GradVector(grad)))
    }
}

/// Squared Euclidean reconstruction error.
pub fn recon_loss(x: &[f64], xhat: &[f64]) -> Result<f64> {
    if x.len() != xhat.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: xhat.len(),
        });
    }
    Ok(x.iter().zip(xhat).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Plain SGD step `params - alpha * g`.
pub fn apply_update(params: &ParamVector, g: &GradVector, alpha: f64) -> Result<ParamVector> {
    if params.len() != g.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            found: g.len(),
        });
    }
    Ok(ParamVector(
        params
            .as_slice()
            .iter()
            .zip(g.as_slice())
            .map(|(p, d)| p - alpha * d)
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Autoencoder {
        Autoencoder::new(ArchSpec::new(4, vec![3], 2, 0.0).unwrap()).unwrap()
    }

    fn random_batch(dim: usize, m: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|_| Sample::new((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(), 0))
            .collect()
    }

    /// Initial weights with nonzero biases, so no pre-activation sits exactly
    /// on the ReLU kink where finite differences are meaningless.
    fn off_kink(model: &Autoencoder, seed: u64) -> ParamVector {
        let mut params = model.init_params(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for layer in model.layout() {
            for b in &mut params.as_mut_slice()[layer.biases()] {
                *b = rng.gen_range(-0.5..0.5);
            }
        }
        params
    }

    /// Central-difference gradient of the eval-mode mean loss.
    fn finite_difference(
        model: &Autoencoder,
        params: &ParamVector,
        batch: &[Sample],
        i: usize,
    ) -> f64 {
        let h = 1e-5;
        let mut plus = params.clone();
        plus.as_mut_slice()[i] += h;
        let mut minus = params.clone();
        minus.as_mut_slice()[i] -= h;
        let lp = model.mean_loss(&plus, batch).unwrap();
        let lm = model.mean_loss(&minus, batch).unwrap();
        (lp - lm) / (2.0 * h)
    }

    #[test]
    fn param_count_matches_hand_count() {
        let model = tiny();
        assert_eq!(model.param_count(), 48);
        assert_eq!(model.init_params(7).len(), 48);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let model = tiny();
        let a = model.init_params(7);
        assert_eq!(a, model.init_params(7));
        assert_ne!(a, model.init_params(8));
        for layer in model.layout() {
            assert!(a.as_slice()[layer.biases()].iter().all(|&b| b == 0.0));
            assert!(a.as_slice()[layer.weights()].iter().any(|&w| w != 0.0));
        }
    }

    #[test]
    fn invalid_arch_is_rejected() {
        assert!(ArchSpec::new(4, vec![], 2, 0.0).is_err());
        assert!(ArchSpec::new(4, vec![3], 4, 0.0).is_err());
        assert!(ArchSpec::new(4, vec![3], 2, 1.0).is_err());
        assert!(ArchSpec::new(4, vec![0], 2, 0.0).is_err());
    }

    #[test]
    fn zero_params_reconstruct_zero() {
        let model = tiny();
        let x = Sample::new(vec![1.0, -2.0, 3.0, 0.5], 0);
        let out = model
            .forward(&ParamVector::zeros(48), &x, Mode::Eval)
            .unwrap();
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn forward_matches_hand_product_when_relu_inactive() {
        // 2 -> [2] -> 1 -> [2] -> 2 with every pre-activation positive, so the
        // network is the affine composition of its layers.
        let model = Autoencoder::new(ArchSpec::new(2, vec![2], 1, 0.0).unwrap()).unwrap();
        #[rustfmt::skip]
        let params = ParamVector::from(vec![
            // layer 0: W = [[1,2],[3,4]], b = [0.5, 0.5]
            1.0, 2.0, 3.0, 4.0, 0.5, 0.5,
            // layer 1: W = [[1,1]], b = [0]
            1.0, 1.0, 0.0,
            // layer 2: W = [[1],[2]], b = [1, 0]
            1.0, 2.0, 1.0, 0.0,
            // layer 3: W = [[1,0],[0,1]], b = [0, -1]
            1.0, 0.0, 0.0, 1.0, 0.0, -1.0,
        ]);
        let x = Sample::new(vec![1.0, 1.0], 0);
        // h1 = [3.5, 7.5]; code = 11; h2 = [12, 22]; out = [12, 21]
        let out = model.forward(&params, &x, Mode::Eval).unwrap();
        assert_eq!(out, vec![12.0, 21.0]);
    }

    #[test]
    fn recon_loss_examples() {
        assert_eq!(recon_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(recon_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(recon_loss(&[1.0, 2.0], &[3.0, 5.0]).unwrap(), 13.0);
        assert!(recon_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn dimension_errors() {
        let model = tiny();
        let p = model.init_params(1);
        let bad = Sample::new(vec![1.0; 3], 0);
        assert!(matches!(
            model.forward(&p, &bad, Mode::Eval),
            Err(Error::DimensionMismatch {
                expected: 4,
                found: 3
            })
        ));
        assert!(model
            .forward(
                &ParamVector::zeros(3),
                &Sample::new(vec![0.0; 4], 0),
                Mode::Eval
            )
            .is_err());
        assert!(matches!(
            model.grad(&p, &[], Mode::Eval),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn apply_update_examples() {
        let p = ParamVector::from(vec![1.0]);
        let g = GradVector::from(vec![2.0]);
        assert_eq!(apply_update(&p, &g, 0.5).unwrap().as_slice(), &[0.0]);
        assert_eq!(apply_update(&p, &g, 0.0).unwrap(), p);
        assert_eq!(apply_update(&p, &GradVector::zeros(1), 0.3).unwrap(), p);
        assert_eq!(p.as_slice(), &[1.0]);
        assert!(apply_update(&p, &GradVector::zeros(2), 0.1).is_err());
    }

    #[test]
    fn duplicated_sample_batch_has_same_gradient() {
        let model = tiny();
        let p = model.init_params(3);
        let one = random_batch(4, 1, 9);
        let many: Vec<_> = std::iter::repeat_n(one[0].clone(), 5).collect();
        let (n1, g1) = model.grad(&p, &one, Mode::Eval).unwrap();
        let (n5, g5) = model.grad(&p, &many, Mode::Eval).unwrap();
        assert_eq!((n1, n5), (1, 5));
        assert!(max_abs_diff(g1.as_slice(), g5.as_slice()) < 1e-12);
    }

    #[test]
    fn gradient_vanishes_at_exact_reconstruction() {
        // Zero weights and an output bias equal to x reconstruct x exactly.
        let model = tiny();
        let x = Sample::new(vec![0.3, -1.0, 2.0, 0.0], 0);
        let mut params = ParamVector::zeros(48);
        let out = model.layout().last().unwrap().biases();
        params.as_mut_slice()[out].copy_from_slice(&x.features);
        assert_eq!(model.anomaly_score(&params, &x).unwrap(), 0.0);
        let (_, g) = model.grad(&params, &[x], Mode::Eval).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn train_mode_is_reproducible_and_eval_is_mask_free() {
        let model = Autoencoder::new(ArchSpec::new(6, vec![5, 4], 3, 0.5).unwrap()).unwrap();
        let p = model.init_params(11);
        let batch = random_batch(6, 8, 2);
        let (_, a) = model
            .grad(&p, &batch, Mode::Train { mask_seed: 5 })
            .unwrap();
        let (_, b) = model
            .grad(&p, &batch, Mode::Train { mask_seed: 5 })
            .unwrap();
        let (_, c) = model
            .grad(&p, &batch, Mode::Train { mask_seed: 6 })
            .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let e1 = model.forward(&p, &batch[0], Mode::Eval).unwrap();
        let e2 = model.forward(&p, &batch[0], Mode::Eval).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(
            model.anomaly_score(&p, &batch[0]).unwrap(),
            recon_loss(&batch[0].features, &e1).unwrap()
        );
    }

    #[test]
    fn batched_scores_match_single_scores() {
        let model = Autoencoder::new(ArchSpec::new(6, vec![5], 3, 0.2).unwrap()).unwrap();
        let p = model.init_params(4);
        let batch = random_batch(6, 5, 8);
        let batched = model.anomaly_scores(&p, &batch).unwrap();
        for (s, b) in batch.iter().zip(&batched) {
            assert!((model.anomaly_score(&p, s).unwrap() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn small_step_does_not_increase_loss() {
        let model = Autoencoder::new(ArchSpec::new(5, vec![4], 2, 0.0).unwrap()).unwrap();
        let p = model.init_params(21);
        let batch = random_batch(5, 12, 22);
        let before = model.mean_loss(&p, &batch).unwrap();
        let (_, g) = model.grad(&p, &batch, Mode::Eval).unwrap();
        for alpha in [1e-3, 1e-4] {
            let after = model
                .mean_loss(&apply_update(&p, &g, alpha).unwrap(), &batch)
                .unwrap();
            assert!(after <= before, "alpha {alpha}: {after} > {before}");
        }
    }

    fn arch_strategy() -> impl Strategy<Value = ArchSpec> {
        (
            3usize..10,
            prop::collection::vec(1usize..8, 1..4),
            0.0f64..0.9,
        )
            .prop_flat_map(|(input, hidden, p)| (Just(input), Just(hidden), 1usize..input, Just(p)))
            .prop_map(|(input, hidden, code, p)| ArchSpec::new(input, hidden, code, p).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn param_count_formula_matches_init(arch in arch_strategy(), seed in any::<u64>()) {
            let model = Autoencoder::new(arch.clone()).unwrap();
            prop_assert_eq!(model.init_params(seed).len(), arch.param_count());
        }

        #[test]
        fn gradient_matches_finite_differences(
            input in 3usize..6,
            hidden in prop::collection::vec(2usize..5, 1..3),
            seed in 0u64..1000,
        ) {
            let arch = ArchSpec::new(input, hidden, input - 1, 0.3).unwrap();
            let model = Autoencoder::new(arch).unwrap();
            prop_assume!(model.param_count() <= 200);
            let params = off_kink(&model, seed);
            let batch = random_batch(input, 4, seed ^ 0xabc);
            let (_, g) = model.grad(&params, &batch, Mode::Eval).unwrap();
            for i in 0..model.param_count() {
                let fd = finite_difference(&model, &params, &batch, i);
                let an = g.as_slice()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                prop_assert!(rel < 1e-4, "coord {}: analytic {} vs fd {}", i, an, fd);
            }
        }
    }
}
