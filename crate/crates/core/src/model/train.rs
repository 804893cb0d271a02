use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{backward, forward, run_layers};
use super::spec::ModelSpec;
use super::weights::ModelWeights;
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::ops::softmax_cross_entropy;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dropout: bool,
}

impl TrainConfig {
    /// Plain SGD at learning rate 0.001 for 100 epochs.
    pub fn reference(seed: u64) -> Self {
        Self {
            learning_rate: 0.001,
            epochs: 100,
            batch_size: 1,
            seed,
            dropout: true,
        }
    }

    /// Ten epochs at a higher rate, for the small desk-scale network.
    pub fn desk(seed: u64) -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 10,
            batch_size: 8,
            seed,
            dropout: true,
        }
    }

    fn validate(&self) -> Result<()> {
        // Zero is accepted so a run can be checked to be a no-op.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be >= 1"));
        }
        Ok(())
    }
}

/// Mean training loss per epoch, as observed during the updates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

fn sample_seed(seed: u64, epoch: usize, position: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (position as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Mini-batch SGD without momentum or weight decay.
///
/// Each epoch reshuffles the data with a seeded RNG. Per-sample gradients in a
/// batch are computed in parallel and summed in sample order, so the result
/// does not depend on the thread count.
pub fn train_sgd(
    weights: &ModelWeights,
    spec: &ModelSpec,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(ModelWeights, TrainLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    if dataset.num_classes() > spec.num_classes {
        return Err(Error::arg(format!(
            "dataset has {} classes, model predicts {}",
            dataset.num_classes(),
            spec.num_classes
        )));
    }
    let mut weights = weights.clone();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let per_sample: Vec<Result<(f64, Vec<Option<Tensor>>)>> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let (image, label) = dataset.get(i);
                    let trace = if config.dropout {
                        let mut rng =
                            ChaCha8Rng::seed_from_u64(sample_seed(config.seed, epoch, b * config.batch_size + j));
                        run_layers(&weights, spec, image.clone(), Some(&mut rng))?
                    } else {
                        forward(&weights, spec, image)?
                    };
                    let (loss, grad) = softmax_cross_entropy(trace.logits(), label)?;
                    let grads = backward(&weights, spec, &trace, &grad)?;
                    Ok((loss, grads.params))
                })
                .collect();
            let mut sum: Vec<Option<Vec<f64>>> = vec![None; spec.layers.len()];
            for r in per_sample {
                let (loss, params) = r?;
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "loss became {loss} in epoch {} batch {b}",
                        epoch + 1
                    )));
                }
                epoch_loss += loss;
                for (acc, g) in sum.iter_mut().zip(params) {
                    if let Some(g) = g {
                        let acc = acc.get_or_insert_with(|| vec![0.0; g.numel()]);
                        for (a, &v) in acc.iter_mut().zip(g.data()) {
                            *a += v as f64;
                        }
                    }
                }
            }
            let step = config.learning_rate / batch.len() as f64;
            for (l, g) in sum.into_iter().enumerate() {
                if let (Some(g), Some(w)) = (g, weights.param_mut(l)) {
                    for (wv, gv) in w.data_mut().iter_mut().zip(g) {
                        *wv = (*wv as f64 - step * gv) as f32;
                    }
                    if w.data().iter().any(|v| !v.is_finite()) {
                        return Err(Error::Numerical(format!(
                            "weights of layer {l} diverged in epoch {} batch {b}",
                            epoch + 1
                        )));
                    }
                }
            }
        }
        log.epoch_losses.push(epoch_loss / dataset.len() as f64);
    }
    Ok((weights, log))
}

/// Predicted class (lowest index on ties) for every image.
pub fn predict(weights: &ModelWeights, spec: &ModelSpec, images: &[Tensor]) -> Result<Vec<usize>> {
    images
        .par_iter()
        .map(|im| forward(weights, spec, im).map(|t| t.logits().argmax()))
        .collect()
}

/// Fraction of images whose argmax logit equals the label.
pub fn evaluate_accuracy(weights: &ModelWeights, spec: &ModelSpec, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty dataset"));
    }
    let preds = predict(weights, spec, dataset.images())?;
    let correct = preds.iter().zip(dataset.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Mean cross-entropy over the dataset at inference (no dropout).
pub fn mean_loss(weights: &ModelWeights, spec: &ModelSpec, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty dataset"));
    }
    let losses: Vec<f64> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let (im, label) = dataset.get(i);
            let t = forward(weights, spec, im)?;
            Ok(softmax_cross_entropy(t.logits(), label)?.0)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synthetic_blobs, BlobConfig};
    use crate::model::build_model;

    #[test]
    fn zero_rate_leaves_weights_unchanged() {
        let spec = ModelSpec::conv_fc([1, 8, 8], 1, 2, 2);
        let w = build_model(&spec, 0).unwrap();
        let data = synthetic_blobs(&BlobConfig::new(4, 2, 8, 0)).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            batch_size: 4,
            seed: 0,
            dropout: true,
        };
        let (trained, _) = train_sgd(&w, &spec, &data, &cfg).unwrap();
        assert_eq!(trained, w);
    }

    #[test]
    fn rejects_bad_config() {
        let spec = ModelSpec::conv_fc([1, 8, 8], 1, 2, 2);
        let w = build_model(&spec, 0).unwrap();
        let data = synthetic_blobs(&BlobConfig::new(4, 2, 8, 0)).unwrap();
        let mut cfg = TrainConfig::desk(0);
        cfg.learning_rate = -1.0;
        assert!(train_sgd(&w, &spec, &data, &cfg).is_err());
        cfg.learning_rate = 0.1;
        cfg.epochs = 0;
        assert!(train_sgd(&w, &spec, &data, &cfg).is_err());
    }

    #[test]
    fn nan_loss_aborts() {
        let spec = ModelSpec::conv_fc([1, 8, 8], 1, 2, 2);
        let mut w = build_model(&spec, 0).unwrap();
        w.param_mut(5).unwrap().data_mut()[4] = f32::NAN;
        let data = synthetic_blobs(&BlobConfig::new(4, 2, 8, 0)).unwrap();
        let err = train_sgd(&w, &spec, &data, &TrainConfig::desk(0)).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }

    #[test]
    fn overflowing_update_aborts() {
        let spec = ModelSpec::conv_fc([1, 8, 8], 1, 2, 2);
        let w = build_model(&spec, 0).unwrap();
        let data = synthetic_blobs(&BlobConfig::new(8, 2, 8, 0)).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e40,
            ..TrainConfig::desk(0)
        };
        let err = train_sgd(&w, &spec, &data, &cfg).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }

    #[test]
    fn learns_two_blobs() {
        let spec = ModelSpec::conv_fc([1, 12, 12], 1, 4, 2);
        let w = build_model(&spec, 1).unwrap();
        let data = synthetic_blobs(&BlobConfig::new(200, 2, 12, 3)).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            ..TrainConfig::desk(1)
        };
        let (trained, _) = train_sgd(&w, &spec, &data, &cfg).unwrap();
        assert!(evaluate_accuracy(&trained, &spec, &data).unwrap() >= 0.95);
    }

    #[test]
    fn accuracy_on_argmax_labels_is_one() {
        let spec = ModelSpec::conv_fc([1, 8, 8], 1, 2, 3);
        let w = build_model(&spec, 2).unwrap();
        let data = synthetic_blobs(&BlobConfig::new(30, 3, 8, 1)).unwrap();
        let preds = predict(&w, &spec, data.images()).unwrap();
        let relabeled = Dataset::new(data.images().to_vec(), preds, 3).unwrap();
        assert_eq!(evaluate_accuracy(&w, &spec, &relabeled).unwrap(), 1.0);
        assert!(evaluate_accuracy(&w, &spec, &data.take(0)).is_err());
    }

    #[test]
    fn random_model_is_near_chance() {
        let spec = ModelSpec::conv_fc([1, 8, 8], 1, 4, 10);
        let data = synthetic_blobs(&BlobConfig::new(1000, 10, 8, 5)).unwrap();
        let mut accs = Vec::new();
        for seed in 0..10 {
            let w = build_model(&spec, seed).unwrap();
            accs.push(evaluate_accuracy(&w, &spec, &data).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.1).abs() <= 0.05, "{accs:?}");
    }
}
