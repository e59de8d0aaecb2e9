use super::{default_feature_names, Dataset};
use crate::numerics::{Matrix, RngState};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Hidden ground truth of a synthetic regression task:
/// `y = sigmoid(a.(x - 1/2) + (x - 1/2)^T B (x - 1/2))`.
#[derive(Clone, Debug)]
pub struct RegressionGenerator {
    linear: Vec<f64>,
    quadratic: Matrix,
}

impl RegressionGenerator {
    pub fn new(d: usize, rng: &mut RngState) -> Self {
        let lin_sd = 3.0 / (d as f64).sqrt();
        let quad_sd = 4.0 / d as f64;
        let linear = (0..d).map(|_| rng.gaussian(0.0, lin_sd)).collect();
        let mut quadratic = Matrix::zeros(d, d);
        for j in 0..d {
            for k in j..d {
                quadratic.set(j, k, rng.gaussian(0.0, quad_sd));
            }
        }
        RegressionGenerator { linear, quadratic }
    }

    pub fn width(&self) -> usize {
        self.linear.len()
    }

    /// Noise-free label for one feature row.
    pub fn mean_label(&self, x: &[f64]) -> f64 {
        let c: Vec<f64> = x.iter().map(|v| v - 0.5).collect();
        let mut logit: f64 = self.linear.iter().zip(&c).map(|(a, v)| a * v).sum();
        for j in 0..c.len() {
            for k in j..c.len() {
                logit += self.quadratic.get(j, k) * c[j] * c[k];
            }
        }
        sigmoid(logit)
    }
}

/// `n` rows with uniform features; labels from a random generator plus
/// gaussian noise, clipped to `[y_floor, 1]`.
pub fn synth_regression(
    n: usize,
    d: usize,
    noise_sd: f64,
    y_floor: f64,
    rng: &mut RngState,
) -> (Dataset, RegressionGenerator) {
    let generator = RegressionGenerator::new(d, rng);
    let mut features = Matrix::zeros(n, d);
    let mut labels = Matrix::zeros(n, 1);
    for r in 0..n {
        for v in features.row_mut(r) {
            *v = rng.next_f64();
        }
        let mut y = generator.mean_label(features.row(r));
        if noise_sd > 0.0 {
            y += rng.gaussian(0.0, noise_sd);
        }
        labels.set(r, 0, y.clamp(y_floor, 1.0));
    }
    let ds = Dataset {
        features,
        labels,
        feature_names: default_feature_names(d),
    };
    (ds, generator)
}

/// Gaussian blobs around random class centers, one-hot labels.
pub fn synth_classification(n: usize, d: usize, classes: usize, spread: f64, rng: &mut RngState) -> Dataset {
    let centers = Matrix::from_fn(classes, d, |_, _| 0.2 + 0.6 * rng.next_f64());
    let mut features = Matrix::zeros(n, d);
    let mut labels = Matrix::zeros(n, classes);
    for r in 0..n {
        let class = rng.index(classes);
        for (j, v) in features.row_mut(r).iter_mut().enumerate() {
            *v = rng.gaussian(centers.get(class, j), spread).clamp(0.0, 1.0);
        }
        labels.set(r, class, 1.0);
    }
    Dataset {
        features,
        labels,
        feature_names: default_feature_names(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_is_exact() {
        let (ds, generator) = synth_regression(200, 5, 0.0, 0.0, &mut RngState::from_seed(3));
        for r in 0..ds.len() {
            assert_eq!(ds.label(r), generator.mean_label(ds.features.row(r)));
        }
    }

    #[test]
    fn deterministic() {
        let (a, _) = synth_regression(100, 4, 0.1, 0.05, &mut RngState::from_seed(8));
        let (b, _) = synth_regression(100, 4, 0.1, 0.05, &mut RngState::from_seed(8));
        assert_eq!(a, b);
        a.validate().unwrap();
        assert!(a.labels.as_slice().iter().all(|&y| y >= 0.05));
    }

    #[test]
    fn labels_have_spread() {
        let (ds, _) = synth_regression(5000, 8, 0.0, 0.05, &mut RngState::from_seed(1));
        let y = ds.labels.column(0);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
        assert!(sd > 0.08, "label sd {sd}");
    }

    #[test]
    fn classification_is_one_hot() {
        let ds = synth_classification(300, 6, 4, 0.1, &mut RngState::from_seed(2));
        ds.validate().unwrap();
        for r in 0..ds.len() {
            assert_eq!(ds.labels.row(r).iter().sum::<f64>(), 1.0);
        }
    }
}
