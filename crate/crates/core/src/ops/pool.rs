use serde::{Deserialize, Serialize};

use super::conv::conv_output_len;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// For every max-pool output element, the flat input index of the selected maximum.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolRouting {
    pub input_shape: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Channel-wise max pooling without padding.
///
/// Ties resolve to the lowest flat input index inside the window.
pub fn maxpool_forward(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, PoolRouting)> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::shape(format!(
            "maxpool input must be [C,H,W], got {:?}",
            x.shape()
        )));
    };
    if window > h || window > w {
        return Err(Error::shape(format!("pool window {window} larger than {h}x{w} input")));
    }
    let oh = conv_output_len(h, window, stride, 0)?;
    let ow = conv_output_len(w, window, stride, 0)?;
    let data = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut indices = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (ch * h + oy * stride) * w + ox * stride;
                for dy in 0..window {
                    let row = (ch * h + oy * stride + dy) * w + ox * stride;
                    for idx in row..row + window {
                        // Row-major scan order visits lower flat indices first.
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                indices.push(best);
            }
        }
    }
    Ok((
        Tensor::new([c, oh, ow], out)?,
        PoolRouting {
            input_shape: x.shape().to_vec(),
            indices,
        },
    ))
}

/// Routes each upstream value to the argmax position recorded in `routing`.
pub fn maxpool_backward(routing: &PoolRouting, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.numel() != routing.indices.len() {
        return Err(Error::shape(format!(
            "maxpool upstream gradient has {} elements, routing has {}",
            grad_out.numel(),
            routing.indices.len()
        )));
    }
    let mut g = Tensor::zeros(routing.input_shape.clone());
    let gd = g.data_mut();
    for (&idx, &v) in routing.indices.iter().zip(grad_out.data()) {
        gd[idx] += v;
    }
    Ok(g)
}
