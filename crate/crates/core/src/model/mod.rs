//! The multilayer perceptron: clipped-ReLU hidden layers, a sigmoid output
//! layer, no bias terms.

mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Matrix, RngState};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, sidecar_path};

/// Default hidden width for regression.
pub const REGRESSION_HIDDEN: usize = 80;
/// Default hidden width feeding the classification head.
pub const CLASSIFICATION_HIDDEN: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

/// Fixed, untrained input transform shared by every participant.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeaturizerSpec {
    #[default]
    Identity,
    /// Seeded gaussian projection to `width` columns, then clipped ReLU.
    Projection {
        width: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_width: usize,
    pub hidden: Vec<usize>,
    pub output_width: usize,
    pub task: Task,
    #[serde(default)]
    pub featurizer: FeaturizerSpec,
}

impl Architecture {
    pub fn regression(input_width: usize, hidden: usize) -> Self {
        Architecture {
            input_width,
            hidden: vec![hidden],
            output_width: 1,
            task: Task::Regression,
            featurizer: FeaturizerSpec::Identity,
        }
    }

    pub fn classification(input_width: usize, hidden: usize, classes: usize, featurizer: FeaturizerSpec) -> Self {
        Architecture {
            input_width,
            hidden: vec![hidden],
            output_width: classes,
            task: Task::Classification,
            featurizer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::param("hidden", "need at least one hidden layer"));
        }
        if self.input_width == 0 || self.output_width == 0 || self.hidden.contains(&0) {
            return Err(Error::param("architecture", "all widths must be >= 1"));
        }
        if self.task == Task::Regression && self.output_width != 1 {
            return Err(Error::param("output_width", "regression has one output"));
        }
        if let FeaturizerSpec::Projection { width: 0, .. } = self.featurizer {
            return Err(Error::param("featurizer.width", "must be >= 1"));
        }
        Ok(())
    }

    /// Width after the featurizer.
    pub fn featurized_width(&self) -> usize {
        match self.featurizer {
            FeaturizerSpec::Identity => self.input_width,
            FeaturizerSpec::Projection { width, .. } => width,
        }
    }

    /// Width of the hidden layer feeding the output layer.
    pub fn last_hidden(&self) -> usize {
        *self.hidden.last().expect("validated architecture")
    }

    /// `(rows, cols)` of every trainable matrix, input side first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.featurized_width()];
        widths.extend(&self.hidden);
        widths.push(self.output_width);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// ReLU clipped to `[0, 1]`.
#[inline]
pub fn clipped_relu(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Sub-gradient of [`clipped_relu`]: 1 strictly inside `(0, 1)`, else 0.
#[inline]
pub fn clipped_relu_grad(x: f64) -> f64 {
    if x > 0.0 && x < 1.0 {
        1.0
    } else {
        0.0
    }
}

/// `h_p = clamp((x^T W1)_p, 0, 1)`.
pub fn forward_hidden(x: &[f64], w1: &Matrix) -> Result<Vec<f64>> {
    Ok(w1.vecmul(x)?.into_iter().map(clipped_relu).collect())
}

/// `z_j = sigmoid((h^T W2)_j)`.
pub fn forward_output(h: &[f64], w2: &Matrix) -> Result<Vec<f64>> {
    Ok(w2.vecmul(h)?.into_iter().map(sigmoid).collect())
}

/// Materialized featurizer.
#[derive(Clone, Debug, PartialEq)]
pub enum Featurizer {
    Identity,
    Projection(Matrix),
}

impl Featurizer {
    pub fn new(spec: &FeaturizerSpec, input_width: usize) -> Self {
        match *spec {
            FeaturizerSpec::Identity => Featurizer::Identity,
            FeaturizerSpec::Projection { width, seed } => {
                let mut rng = RngState::from_seed(derive_seed(seed, &[0xfea7]));
                let sd = 2.0 / (input_width as f64).sqrt();
                Featurizer::Projection(Matrix::from_fn(input_width, width, |_, _| rng.gaussian(0.0, sd)))
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Featurizer::Identity => Ok(x.to_vec()),
            Featurizer::Projection(p) => forward_hidden(x, p),
        }
    }

    pub fn apply_batch(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Featurizer::Identity => Ok(x.clone()),
            Featurizer::Projection(p) => Ok(x.matmul(p)?.map(clipped_relu)),
        }
    }
}

/// Trainable weights: hidden layers in order, then the output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<Matrix>,
}

/// Intermediate values of a batch forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Input to each hidden layer: featurized rows, then each hidden output.
    /// The last entry is the representation feeding the output layer.
    pub activations: Vec<Matrix>,
    /// Pre-activation of each hidden layer.
    pub pre: Vec<Matrix>,
    /// Output-layer logits.
    pub logits: Matrix,
}

impl Trace {
    pub fn last_hidden(&self) -> &Matrix {
        self.activations.last().expect("at least one activation")
    }
}

impl ModelParams {
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(Matrix::shape).collect()
    }

    pub fn hidden_layers(&self) -> &[Matrix] {
        &self.layers[..self.layers.len() - 1]
    }

    pub fn output_layer(&self) -> &Matrix {
        self.layers.last().expect("at least one layer")
    }

    pub fn output_layer_mut(&mut self) -> &mut Matrix {
        self.layers.last_mut().expect("at least one layer")
    }

    pub fn check_shapes(&self, arch: &Architecture) -> Result<()> {
        let expected = arch.layer_shapes();
        if self.shapes() != expected {
            return Err(Error::Data(format!(
                "parameter shapes {:?} do not match architecture {:?}",
                self.shapes(),
                expected
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Matrix::is_finite)
    }

    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(|m| m.rows() * m.cols()).sum()
    }

    /// Last hidden representation of one featurized row.
    pub fn hidden(&self, features: &[f64]) -> Result<Vec<f64>> {
        let mut h = features.to_vec();
        for w in self.hidden_layers() {
            h = forward_hidden(&h, w)?;
        }
        Ok(h)
    }

    /// Output probabilities for one featurized row.
    pub fn predict(&self, features: &[f64]) -> Result<Vec<f64>> {
        forward_output(&self.hidden(features)?, self.output_layer())
    }

    /// Batch forward pass over featurized rows.
    pub fn trace(&self, features: &Matrix) -> Result<Trace> {
        let mut activations = vec![features.clone()];
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        for w in self.hidden_layers() {
            let z = activations.last().unwrap().matmul(w)?;
            activations.push(z.map(clipped_relu));
            pre.push(z);
        }
        let logits = activations.last().unwrap().matmul(self.output_layer())?;
        Ok(Trace {
            activations,
            pre,
            logits,
        })
    }

    /// Output probabilities for every row, `n x outputs`.
    pub fn predict_batch(&self, features: &Matrix) -> Result<Matrix> {
        Ok(self.trace(features)?.logits.map(sigmoid))
    }

    /// Elementwise distance used in tests and digests.
    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// FNV-1a over the little-endian bytes of every weight.
    pub fn digest(&self) -> String {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for m in &self.layers {
            for v in m.as_slice() {
                for byte in v.to_le_bytes() {
                    hash ^= u64::from(byte);
                    hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        format!("{hash:016x}")
    }
}

/// Gaussian(0, `sd`) weights; the same seed gives the same parameters.
pub fn init_params_scaled(arch: &Architecture, seed: u64, sd: f64) -> ModelParams {
    let mut rng = RngState::from_seed(derive_seed(seed, &[0x1417]));
    let layers = arch
        .layer_shapes()
        .into_iter()
        .map(|(r, c)| Matrix::from_fn(r, c, |_, _| rng.gaussian(0.0, sd)))
        .collect();
    ModelParams { layers }
}

/// Standard-normal weights.
pub fn init_params(arch: &Architecture, seed: u64) -> ModelParams {
    init_params_scaled(arch, seed, 1.0)
}

/// Featurizes rows for `arch`.
pub fn featurize(x: &[f64], spec: &FeaturizerSpec) -> Result<Vec<f64>> {
    Featurizer::new(spec, x.len()).apply(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_input_zero_hidden() {
        let w = Matrix::from_fn(3, 4, |r, c| (r + c) as f64 - 2.0);
        assert_eq!(forward_hidden(&[0.0; 3], &w).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn hidden_is_clipped() {
        let w = Matrix::from_vec(1, 2, vec![5.0, -2.0]).unwrap();
        assert_eq!(forward_hidden(&[1.0], &w).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn output_at_zero_is_half() {
        let w = Matrix::zeros(3, 1);
        assert_eq!(forward_output(&[0.2, 0.3, 0.9], &w).unwrap(), vec![0.5]);
    }

    #[test]
    fn output_saturates_monotonically() {
        let mut last = 0.0;
        for k in 0..40 {
            let w = Matrix::from_vec(1, 1, vec![k as f64]).unwrap();
            let z = forward_output(&[1.0], &w).unwrap()[0];
            assert!(z >= last && z <= 1.0);
            last = z;
        }
        assert!(last > 1.0 - 1e-12);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let h = 1e-5;
        let slope = (sigmoid(h) - sigmoid(-h)) / (2.0 * h);
        assert!((slope - 0.25).abs() < 1e-6);
    }

    #[test]
    fn same_seed_same_params() {
        let arch = Architecture::regression(5, 8);
        assert_eq!(init_params(&arch, 7), init_params(&arch, 7));
        assert_ne!(init_params(&arch, 7), init_params(&arch, 8));
        init_params(&arch, 7).check_shapes(&arch).unwrap();
    }

    #[test]
    fn init_is_standard_normal() {
        let arch = Architecture::regression(500, 200);
        let p = init_params(&arch, 3);
        let w: Vec<f64> = p.layers[0].as_slice().to_vec();
        assert_eq!(w.len(), 100_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((sd - 1.0).abs() < 0.02, "sd {sd}");
    }

    #[test]
    fn identity_featurizer() {
        let x = [0.1, 0.7, 0.3];
        assert_eq!(featurize(&x, &FeaturizerSpec::Identity).unwrap(), x.to_vec());
    }

    #[test]
    fn projection_is_shared_and_bounded() {
        let spec = FeaturizerSpec::Projection { width: 16, seed: 4 };
        let mut rng = RngState::from_seed(1);
        for _ in 0..200 {
            let x: Vec<f64> = (0..10).map(|_| rng.next_f64()).collect();
            let a = featurize(&x, &spec).unwrap();
            let b = featurize(&x, &spec).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 16);
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn batch_trace_matches_rowwise() {
        let mut arch = Architecture::regression(4, 6);
        arch.hidden.push(3);
        let p = init_params(&arch, 2);
        let mut rng = RngState::from_seed(9);
        let x = Matrix::from_fn(5, 4, |_, _| rng.next_f64());
        let batch = p.predict_batch(&x).unwrap();
        for r in 0..5 {
            let z = p.predict(x.row(r)).unwrap();
            assert!((z[0] - batch.get(r, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn architecture_validation() {
        let mut arch = Architecture::regression(4, 6);
        arch.validate().unwrap();
        arch.hidden.clear();
        assert!(arch.validate().is_err());
        let arch = Architecture {
            output_width: 3,
            ..Architecture::regression(4, 6)
        };
        assert!(arch.validate().is_err());
    }

    proptest! {
        #[test]
        fn outputs_stay_in_range(seed in any::<u64>(), extra in 1usize..5) {
            let mut arch = Architecture::classification(5, 7, 3, FeaturizerSpec::Identity);
            arch.hidden.push(extra);
            let p = init_params_scaled(&arch, seed, 2.0);
            let mut rng = RngState::from_seed(seed);
            let x: Vec<f64> = (0..5).map(|_| rng.next_f64()).collect();
            let mut h = x.clone();
            for w in p.hidden_layers() {
                h = forward_hidden(&h, w).unwrap();
                prop_assert!(h.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            for z in p.predict(&x).unwrap() {
                prop_assert!(z > 0.0 && z < 1.0);
            }
        }
    }
}
