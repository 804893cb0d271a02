use rand::Rng;

use super::spec::{Layer, ModelSpec};
use super::weights::ModelWeights;
use crate::error::{Error, Result};
use crate::ops::{self, PoolRouting};
use crate::tensor::Tensor;

/// Cached per-layer values of one forward pass.
///
/// `outputs[l]` is the output of layer `l`; its input (the pre-activation for
/// a ReLU layer) is `outputs[l - 1]`, or the network input for `l = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub input: Tensor,
    pub outputs: Vec<Tensor>,
    pub routings: Vec<Option<PoolRouting>>,
    pub(crate) dropout_masks: Vec<Option<Vec<f32>>>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn layer_input(&self, l: usize) -> &Tensor {
        if l == 0 {
            &self.input
        } else {
            &self.outputs[l - 1]
        }
    }

    pub fn output(&self, l: usize) -> &Tensor {
        &self.outputs[l]
    }

    pub fn logits(&self) -> &Tensor {
        self.outputs.last().expect("trace has at least one layer")
    }

    pub fn routing(&self, l: usize) -> Option<&PoolRouting> {
        self.routings.get(l).and_then(Option::as_ref)
    }
}

fn apply_layer(layer: &Layer, param: Option<&Tensor>, x: &Tensor) -> Result<(Tensor, Option<PoolRouting>)> {
    let missing = || Error::shape("parameterized layer without weights");
    Ok(match *layer {
        Layer::Conv { stride, padding, .. } => (
            ops::conv2d_forward(x, param.ok_or_else(missing)?, stride, padding)?,
            None,
        ),
        Layer::Fc { .. } => (ops::fc_forward(x, param.ok_or_else(missing)?)?, None),
        Layer::Relu => (ops::relu_forward(x), None),
        Layer::MaxPool { window, stride } => {
            let (y, r) = ops::maxpool_forward(x, window, stride)?;
            (y, Some(r))
        }
        Layer::Dropout { .. } => (x.clone(), None),
        Layer::Flatten => (x.reshape([x.numel()])?, None),
    })
}

pub(crate) fn run_layers<R: Rng>(
    weights: &ModelWeights,
    spec: &ModelSpec,
    input: Tensor,
    mut dropout_rng: Option<&mut R>,
) -> Result<ForwardTrace> {
    input.expect_shape(&spec.input_shape, "model input")?;
    let n = spec.layers.len();
    let mut trace = ForwardTrace {
        input,
        outputs: Vec::with_capacity(n),
        routings: Vec::with_capacity(n),
        dropout_masks: Vec::with_capacity(n),
    };
    for (l, layer) in spec.layers.iter().enumerate() {
        let x = trace.layer_input(l);
        let mut mask = None;
        let (mut y, routing) = apply_layer(layer, weights.param(l), x)?;
        if let (Layer::Dropout { rate }, Some(rng)) = (layer, dropout_rng.as_deref_mut()) {
            if *rate > 0.0 {
                let keep = (1.0 / (1.0 - rate)) as f32;
                let m: Vec<f32> = (0..y.numel())
                    .map(|_| if rng.gen::<f64>() < *rate { 0.0 } else { keep })
                    .collect();
                for (v, &k) in y.data_mut().iter_mut().zip(&m) {
                    *v *= k;
                }
                mask = Some(m);
            }
        }
        trace.outputs.push(y);
        trace.routings.push(routing);
        trace.dropout_masks.push(mask);
    }
    Ok(trace)
}

/// Inference forward pass (dropout is the identity) caching every layer output.
pub fn forward(weights: &ModelWeights, spec: &ModelSpec, input: &Tensor) -> Result<ForwardTrace> {
    run_layers::<rand_chacha::ChaCha8Rng>(weights, spec, input.clone(), None)
}

/// Continues inference from layer `layer + 1`, treating `value` as layer `layer`'s output.
///
/// Returns the outputs of layers `layer..n`: the first entry is `value` itself and
/// the last holds the logits.
pub fn forward_from(weights: &ModelWeights, spec: &ModelSpec, layer: usize, value: Tensor) -> Result<Vec<Tensor>> {
    let shapes = spec.shapes()?;
    if layer >= spec.layers.len() {
        return Err(Error::arg(format!("layer {layer} out of range")));
    }
    value.expect_shape(&shapes[layer], "replaced layer output")?;
    let mut outs = Vec::with_capacity(spec.layers.len() - layer);
    let mut cur = value;
    for l in layer + 1..spec.layers.len() {
        let (y, _) = apply_layer(&spec.layers[l], weights.param(l), &cur)?;
        outs.push(std::mem::replace(&mut cur, y));
    }
    outs.push(cur);
    Ok(outs)
}

/// Parameter gradients plus the gradient reaching the lowest processed layer's input.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Vec<Option<Tensor>>,
    pub input: Tensor,
}

/// Reverse pass over `trace` for layers `(until..n).rev()`.
fn backprop(
    weights: &ModelWeights,
    spec: &ModelSpec,
    trace: &ForwardTrace,
    grad_logits: &Tensor,
    until: usize,
    want_params: bool,
) -> Result<Gradients> {
    let n = spec.layers.len();
    if trace.len() != n {
        return Err(Error::shape(format!("trace has {} layers, model has {n}", trace.len())));
    }
    grad_logits.expect_shape(trace.logits().shape(), "logit gradient")?;
    let mut params: Vec<Option<Tensor>> = vec![None; n];
    let mut g = grad_logits.clone();
    for l in (until..n).rev() {
        let x = trace.layer_input(l);
        g = match spec.layers[l] {
            Layer::Conv { stride, padding, .. } => {
                let w = weights.param(l).ok_or_else(|| Error::shape("missing conv weights"))?;
                let (gx, gw) = ops::conv2d_backward(x, w, stride, padding, &g)?;
                if want_params {
                    params[l] = Some(gw);
                }
                gx
            }
            Layer::Fc { .. } => {
                let w = weights.param(l).ok_or_else(|| Error::shape("missing fc weights"))?;
                let (gx, gw) = ops::fc_backward(x, w, &g)?;
                if want_params {
                    params[l] = Some(gw);
                }
                gx
            }
            Layer::Relu => ops::relu_backward(x, &g)?,
            Layer::MaxPool { .. } => {
                let routing = trace
                    .routing(l)
                    .ok_or_else(|| Error::shape(format!("no pool routing cached for layer {l}")))?;
                ops::maxpool_backward(routing, &g)?
            }
            Layer::Dropout { .. } => match trace.dropout_masks.get(l).and_then(Option::as_ref) {
                Some(mask) => {
                    let mut g = g;
                    for (v, &m) in g.data_mut().iter_mut().zip(mask) {
                        *v *= m;
                    }
                    g
                }
                None => g,
            },
            Layer::Flatten => g.reshape(x.shape().to_vec())?,
        };
    }
    Ok(Gradients { params, input: g })
}

/// Full reverse pass: parameter gradients and the gradient wrt the network input.
pub fn backward(
    weights: &ModelWeights,
    spec: &ModelSpec,
    trace: &ForwardTrace,
    grad_logits: &Tensor,
) -> Result<Gradients> {
    backprop(weights, spec, trace, grad_logits, 0, true)
}

/// Gradient of `<grad_logits, logits>` with respect to the output of layer `layer`.
pub fn output_gradient(
    weights: &ModelWeights,
    spec: &ModelSpec,
    trace: &ForwardTrace,
    layer: usize,
    grad_logits: &Tensor,
) -> Result<Tensor> {
    if layer >= spec.layers.len() {
        return Err(Error::arg(format!("layer {layer} out of range")));
    }
    Ok(backprop(weights, spec, trace, grad_logits, layer + 1, false)?.input)
}
