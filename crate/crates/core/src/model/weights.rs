use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::ModelSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learned parameters: one tensor per conv/fc layer, `None` elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub seed: u64,
    params: Vec<Option<Tensor>>,
}

impl ModelWeights {
    /// Wraps per-layer parameters after checking them against `spec`.
    pub fn new(spec: &ModelSpec, seed: u64, params: Vec<Option<Tensor>>) -> Result<Self> {
        let shapes = spec.shapes()?;
        if params.len() != spec.layers.len() {
            return Err(Error::shape(format!(
                "{} parameter slots for {} layers",
                params.len(),
                spec.layers.len()
            )));
        }
        for (l, (layer, p)) in spec.layers.iter().zip(&params).enumerate() {
            let want = layer.param_shape(&spec.input_shape_of(&shapes, l));
            match (want, p) {
                (None, None) => {}
                (Some(w), Some(t)) if t.shape() == w.as_slice() => {}
                (want, got) => {
                    return Err(Error::shape(format!(
                        "layer {l}: expected parameters {want:?}, got {:?}",
                        got.as_ref().map(|t| t.shape().to_vec())
                    )))
                }
            }
        }
        Ok(Self { seed, params })
    }

    pub fn param(&self, layer: usize) -> Option<&Tensor> {
        self.params.get(layer).and_then(Option::as_ref)
    }

    pub fn param_mut(&mut self, layer: usize) -> Option<&mut Tensor> {
        self.params.get_mut(layer).and_then(Option::as_mut)
    }

    pub fn params(&self) -> &[Option<Tensor>] {
        &self.params
    }

    /// Parameterized layers in declaration order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|t| (i, t)))
    }
}

/// He-normal initialization, `N(0, 2 / fan_in)`, deterministic in `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ModelWeights> {
    let shapes = spec.shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = spec
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            layer.param_shape(&spec.input_shape_of(&shapes, l)).map(|shape| {
                let fan_in: usize = shape[1..].iter().product();
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                let n = shape.iter().product();
                let data = (0..n).map(|_| dist.sample(&mut rng) as f32).collect();
                Tensor::new(shape, data).expect("shape matches data")
            })
        })
        .collect();
    ModelWeights::new(spec, seed, params)
}
