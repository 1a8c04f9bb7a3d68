//! Losses and mini-batch gradient descent.

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{backward_logits, forward, CnnParams, CnnSpec, Head, Mode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    /// weighted mean squared error
    Mse,
    /// weighted mean binary cross-entropy; needs a sigmoid head
    LogLoss,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Loss and its gradient with respect to the activated outputs.
///
/// `weights` (same shape as the targets) masks or reweights entries; the
/// loss is normalized by the total weight. Log-loss is evaluated from the
/// logits recovered from the outputs so it stays finite near 0 and 1.
pub fn loss_and_grad(
    loss: Loss,
    head: Head,
    outputs: &Array2<f64>,
    targets: &Array2<f64>,
    weights: Option<&Array2<f64>>,
) -> Result<(f64, Array2<f64>)> {
    if outputs.dim() != targets.dim() || weights.is_some_and(|w| w.dim() != targets.dim()) {
        return Err(Error::Dimension(format!(
            "outputs {:?} and targets {:?} differ",
            outputs.dim(),
            targets.dim()
        )));
    }
    if loss == Loss::LogLoss && head != Head::Sigmoid {
        return Err(Error::Config("log-loss needs a sigmoid head".into()));
    }
    let total: f64 = weights.map_or(targets.len() as f64, |w| w.sum());
    let mut grad = Array2::zeros(outputs.dim());
    if total <= 0.0 {
        return Ok((0.0, grad));
    }
    let mut value = 0.0;
    for ((idx, y), t) in outputs.indexed_iter().zip(targets.iter()) {
        let w = weights.map_or(1.0, |w| w[idx]);
        if w == 0.0 {
            continue;
        }
        match loss {
            Loss::Mse => {
                value += w * (y - t).powi(2);
                grad[idx] = 2.0 * w * (y - t) / total;
            }
            Loss::LogLoss => {
                let z = (y / (1.0 - y)).ln();
                if *t != 0.0 {
                    value += w * t * softplus(-z);
                }
                if *t != 1.0 {
                    value += w * (1.0 - t) * softplus(z);
                }
                grad[idx] = w * (y - t) / (y * (1.0 - y)) / total;
            }
        }
    }
    Ok((value / total, grad))
}

/// Gradient of the loss with respect to the pre-activation outputs, for
/// inputs already checked by [`loss_and_grad`].
fn logit_grad(
    loss: Loss,
    head: Head,
    outputs: &Array2<f64>,
    targets: &Array2<f64>,
    weights: Option<&Array2<f64>>,
) -> Array2<f64> {
    let total: f64 = weights.map_or(targets.len() as f64, |w| w.sum());
    let mut grad = Array2::zeros(outputs.dim());
    if total <= 0.0 {
        return grad;
    }
    for ((idx, y), t) in outputs.indexed_iter().zip(targets.iter()) {
        let w = weights.map_or(1.0, |w| w[idx]);
        grad[idx] = match (loss, head) {
            (Loss::Mse, Head::Linear) => 2.0 * w * (y - t) / total,
            (Loss::Mse, Head::Sigmoid) => 2.0 * w * (y - t) / total * y * (1.0 - y),
            (Loss::LogLoss, _) => w * (y - t) / total,
        };
    }
    grad
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub learning_rate: f64,
    /// the learning rate halves every this many epochs; 0 keeps it fixed
    pub halve_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            learning_rate: 1e-3,
            halve_every: 50,
            epochs: 100,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn rate_at(&self, epoch: usize) -> f64 {
        match self.halve_every {
            0 => self.learning_rate,
            e => self.learning_rate * 0.5f64.powi((epoch / e) as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub params: CnnParams,
    /// full-data inference loss after each epoch
    pub loss_curve: Vec<f64>,
}

/// Mini-batch gradient descent from a seeded He initialization.
pub fn train(
    spec: &CnnSpec,
    x: &Array4<f64>,
    y: &Array2<f64>,
    weights: Option<&Array2<f64>>,
    settings: &TrainSettings,
    loss: Loss,
) -> Result<TrainResult> {
    spec.validate()?;
    settings.validate()?;
    let n = x.dim().0;
    if n == 0 || y.dim() != (n, spec.outputs) {
        return Err(Error::Dimension(format!(
            "{n} input samples, targets {:?}, {} outputs",
            y.dim(),
            spec.outputs
        )));
    }
    if weights.is_some_and(|w| w.dim() != y.dim()) {
        return Err(Error::Dimension("weights and targets differ in shape".into()));
    }
    if loss == Loss::LogLoss && spec.head != Head::Sigmoid {
        return Err(Error::Config("log-loss needs a sigmoid head".into()));
    }
    let mut params = CnnParams::init(spec, settings.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x00c0_ffee);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        let lr = settings.rate_at(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(settings.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb = y.select(Axis(0), chunk);
            let wb = weights.map(|w| w.select(Axis(0), chunk));
            let (out, cache) = forward(spec, &params, &xb, Mode::Training { seed: rng.random() })?;
            let dz = logit_grad(loss, spec.head, &out, &yb, wb.as_ref());
            let g = backward_logits(spec, &params, &cache, &dz)?;
            params.add_scaled(&g, -lr);
        }
        let (out, _) = forward(spec, &params, x, Mode::Inference)?;
        let (value, _) = loss_and_grad(loss, spec.head, &out, y, weights)?;
        if !value.is_finite() {
            return Err(Error::Divergence(format!(
                "training loss is {value} after epoch {}",
                epoch + 1
            )));
        }
        curve.push(value);
    }
    Ok(TrainResult {
        params,
        loss_curve: curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn data(n: usize, k: usize, seed: u64) -> (Array4<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array4::from_shape_simple_fn((n, 1, 4, 4), || rng.sample(StandardNormal));
        let y = Array2::from_shape_simple_fn((n, k), || rng.random::<f64>());
        (x, y)
    }

    #[test]
    fn loss_values() {
        let out = Array2::from_shape_vec((1, 2), vec![2.0, 2.0]).unwrap();
        let t = Array2::from_shape_vec((1, 2), vec![1.0, 1.0]).unwrap();
        let (l, g) = loss_and_grad(Loss::Mse, Head::Linear, &out, &t, None).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g[[0, 0]], 1.0);
        let w = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let (l, g) = loss_and_grad(Loss::Mse, Head::Linear, &out, &t, Some(&w)).unwrap();
        assert_eq!((l, g[[0, 1]]), (1.0, 0.0));
        let p = Array2::from_shape_vec((1, 1), vec![0.5]).unwrap();
        let t = Array2::from_shape_vec((1, 1), vec![1.0]).unwrap();
        let (l, _) = loss_and_grad(Loss::LogLoss, Head::Sigmoid, &p, &t, None).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(loss_and_grad(Loss::LogLoss, Head::Linear, &p, &t, None).is_err());
    }

    #[test]
    fn zero_rate_gives_flat_curve() {
        let spec = CnnSpec::new(4, 4, 1, 2, Head::Linear);
        let (x, y) = data(10, 2, 1);
        let s = TrainSettings {
            learning_rate: 0.0,
            epochs: 5,
            ..Default::default()
        };
        let r = train(&spec, &x, &y, None, &s, Loss::Mse).unwrap();
        assert!(r.loss_curve.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn same_seed_same_curve() {
        let spec = CnnSpec::new(4, 4, 1, 2, Head::Sigmoid);
        let (x, y) = data(40, 2, 2);
        let y = y.mapv(|v| f64::from(v > 0.5));
        let s = TrainSettings {
            learning_rate: 0.05,
            epochs: 10,
            batch_size: 8,
            ..Default::default()
        };
        let a = train(&spec, &x, &y, None, &s, Loss::LogLoss).unwrap();
        let b = train(&spec, &x, &y, None, &s, Loss::LogLoss).unwrap();
        assert_eq!(a, b);
        let c = train(&spec, &x, &y, None, &TrainSettings { seed: 1, ..s }, Loss::LogLoss).unwrap();
        assert_ne!(a.loss_curve, c.loss_curve);
    }

    #[test]
    fn memorizes_four_samples() {
        let spec = CnnSpec {
            dropout: 0.0,
            filters2: 8,
            ..CnnSpec::new(4, 4, 1, 2, Head::Linear)
        };
        let (x, y) = data(4, 2, 3);
        let s = TrainSettings {
            learning_rate: 0.05,
            halve_every: 0,
            epochs: 2000,
            batch_size: 4,
            seed: 5,
        };
        let r = train(&spec, &x, &y, None, &s, Loss::Mse).unwrap();
        let last = *r.loss_curve.last().unwrap();
        assert!(last < 1e-3, "final loss {last}");
    }

    #[test]
    fn divergence_is_reported() {
        let spec = CnnSpec {
            dropout: 0.0,
            ..CnnSpec::new(4, 4, 1, 2, Head::Linear)
        };
        let (x, y) = data(8, 2, 4);
        let y = y * 1e6;
        let s = TrainSettings {
            learning_rate: 1e3,
            halve_every: 0,
            epochs: 50,
            ..Default::default()
        };
        assert!(matches!(
            train(&spec, &x, &y, None, &s, Loss::Mse),
            Err(Error::Divergence(_))
        ));
    }
}
