//! Mini-batch Adam training of a victim network under squared error.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::VictimNetwork;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_hat: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon_hat: 1e-8,
            batch_size: 64,
            epochs: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.epsilon_hat > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon_hat));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        Ok(())
    }
}

/// One Adam update at step `t` (1-based), in place.
pub fn adam_step(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &TrainConfig) {
    debug_assert!(t >= 1);
    debug_assert!(param.len() == grad.len() && m.len() == grad.len() && v.len() == grad.len());
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon_hat);
    }
}

/// Accumulated gradient of the batch loss with respect to every parameter tensor,
/// in the order of `VictimNetwork::layers()[..].params()`.
fn batch_gradients(
    net: &VictimNetwork,
    batch: &[(Tensor, f64)],
    grads: &mut [Vec<f64>],
) -> Result<f64> {
    for g in grads.iter_mut() {
        g.fill(0.0);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    for (x, label) in batch {
        let (acts, y) = net.trace(x)?;
        let err = y - label;
        loss_sum += err * err;
        let mut upstream = Tensor::vector(vec![2.0 * err * scale]);
        let mut slot = grads.len();
        for (layer, act) in net.layers().iter().zip(&acts).rev() {
            let (dx, pg) = layer.backward(act, &upstream)?;
            if let Some(pg) = pg {
                slot -= 2;
                for (a, b) in grads[slot].iter_mut().zip(pg.weight.data()) {
                    *a += b;
                }
                for (a, b) in grads[slot + 1].iter_mut().zip(pg.bias.data()) {
                    *a += b;
                }
            }
            upstream = dx;
        }
    }
    Ok(loss_sum)
}

/// Train a copy of `net` on `(image, label)` pairs.
///
/// Returns the trained network and the mean squared error of each epoch, measured
/// on each batch before its update.
pub fn train(
    net: &VictimNetwork,
    dataset: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(VictimNetwork, Vec<f64>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut net = net.clone();
    let samples: Vec<(Tensor, f64)> = dataset
        .samples
        .iter()
        .map(|s| (s.image.to_tensor(), s.label))
        .collect();
    if let Some((x, _)) = samples.iter().find(|(x, _)| x.shape() != net.input_shape()) {
        return Err(Error::ShapeMismatch {
            expected: net.input_shape().to_vec(),
            actual: x.shape().to_vec(),
        });
    }

    let sizes: Vec<usize> = net.layers().iter().flat_map(|l| l.params()).map(|p| p.len()).collect();
    let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut m: Vec<Vec<f64>> = grads.clone();
    let mut v: Vec<Vec<f64>> = grads.clone();
    let mut t = 0u64;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| samples[i].clone()));
            epoch_loss += batch_gradients(&net, &batch, &mut grads)?;
            t += 1;
            let params = net.layers_mut().iter_mut().flat_map(|l| l.params_mut());
            for (i, p) in params.enumerate() {
                adam_step(p.data_mut(), &grads[i], &mut m[i], &mut v[i], t, cfg);
            }
        }
        let mean = epoch_loss / samples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.push(mean);
    }
    Ok((net, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_dataset, Sample};
    use crate::image::ImageU8;
    use crate::model::{default_victim, PreprocessSpec};
    use crate::tensor::{Affine, Layer};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = TrainConfig::default();
        for &g in &[1.0, -3.0, 250.0, -1e4] {
            let mut p = [0.5];
            let (mut m, mut v) = ([0.0], [0.0]);
            adam_step(&mut p, &[g], &mut m, &mut v, 1, &cfg);
            let moved = 0.5 - p[0];
            assert!((moved - cfg.learning_rate * f64::signum(g)).abs() <= 1e-6 * cfg.learning_rate);
        }
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let cfg = TrainConfig::default();
        let mut p = [1.25, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &cfg);
        assert_eq!(p, [1.25, -2.0]);
    }

    #[test]
    fn scalar_quadratic_converges() {
        let cfg = TrainConfig { learning_rate: 0.1, ..TrainConfig::default() };
        let mut p = [0.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        for t in 1..=200 {
            let g = [2.0 * (p[0] - 3.0)];
            adam_step(&mut p, &g, &mut m, &mut v, t, &cfg);
        }
        assert!((p[0] - 3.0).abs() < 0.05, "{}", p[0]);
    }

    fn bias_only_net(shape: [usize; 3]) -> VictimNetwork {
        let n = shape.iter().product();
        VictimNetwork::new(
            shape,
            PreprocessSpec::new(0.0, false).unwrap(),
            vec![Layer::Affine(Affine::new(Tensor::zeros(&[1, n]), Tensor::vector(vec![0.0])).unwrap())],
        )
        .unwrap()
    }

    #[test]
    fn constant_label_is_fit() {
        let samples = (0..8)
            .map(|i| Sample { id: i.to_string(), image: ImageU8::filled([1, 1, 1], 0), label: 4.0 })
            .collect();
        let ds = LabeledDataset::new("const", 0, samples).unwrap();
        let cfg = TrainConfig { learning_rate: 0.05, batch_size: 4, epochs: 150, ..TrainConfig::default() };
        let (net, hist) = train(&bias_only_net([1, 1, 1]), &ds, &cfg).unwrap();
        assert_eq!(hist.len(), 150);
        assert!(*hist.last().unwrap() < 1e-2, "{:?}", hist.last());
        let pred = net.forward(&ImageU8::filled([1, 1, 1], 0)).unwrap();
        assert!((pred - 4.0).abs() < 0.1);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let ds = synth_dataset(5, [3, 4, 4], 0).unwrap();
        let net = bias_only_net([3, 4, 4]);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (out, hist) = train(&net, &ds, &cfg).unwrap();
        assert_eq!(out, net);
        assert!(hist.is_empty());
    }

    #[test]
    fn empty_dataset_is_error() {
        let ds = LabeledDataset::new("none", 0, vec![]).unwrap();
        assert!(matches!(
            train(&bias_only_net([1, 1, 1]), &ds, &TrainConfig::default()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn invalid_config_is_rejected() {
        for cfg in [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { beta1: 1.0, ..TrainConfig::default() },
            TrainConfig { epsilon_hat: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn training_is_reproducible_and_learns() {
        let ds = synth_dataset(96, [3, 8, 8], 4).unwrap();
        let pre = PreprocessSpec::new(crate::dataset::grand_mean(&ds).unwrap(), true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = default_victim([3, 8, 8], pre, &mut rng).unwrap();
        let cfg = TrainConfig { epochs: 15, batch_size: 16, seed: 3, ..TrainConfig::default() };
        let (a, ha) = train(&net, &ds, &cfg).unwrap();
        let (b, hb) = train(&net, &ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            ha.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            hb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(ha.last().unwrap() <= &(0.5 * ha[0]), "{ha:?}");
    }
}
