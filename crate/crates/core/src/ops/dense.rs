use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient of ReLU given the layer input `x`; passes upstream only where `x > 0`.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "relu gradient shape {:?} vs input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn fc_dims(x: &Tensor, weights: &Tensor) -> Result<(usize, usize)> {
    let &[m, n] = weights.shape() else {
        return Err(Error::shape(format!(
            "fc weights must be [M,N], got {:?}",
            weights.shape()
        )));
    };
    if x.ndim() != 1 || x.numel() != n {
        return Err(Error::shape(format!(
            "fc input {:?} does not match weights {:?}",
            x.shape(),
            weights.shape()
        )));
    }
    Ok((m, n))
}

/// Bias-free matrix-vector product `W x` for `W: [M, N]`, `x: [N]`.
pub fn fc_forward(x: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (m, n) = fc_dims(x, weights)?;
    let xd = x.data();
    let out = (0..m)
        .map(|i| {
            let row = &weights.data()[i * n..(i + 1) * n];
            row.iter().zip(xd).map(|(&w, &v)| w as f64 * v as f64).sum::<f64>() as f32
        })
        .collect();
    Tensor::new([m], out)
}

/// Returns `(grad_x, grad_w)` for `y = W x`.
pub fn fc_backward(x: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, n) = fc_dims(x, weights)?;
    grad_out.expect_shape(&[m], "fc upstream gradient")?;
    let w = weights.data();
    let g = grad_out.data();
    let xd = x.data();
    let mut gx = vec![0.0f64; n];
    let mut gw = Vec::with_capacity(m * n);
    for i in 0..m {
        let gi = g[i] as f64;
        for j in 0..n {
            gx[j] += w[i * n + j] as f64 * gi;
            gw.push((gi * xd[j] as f64) as f32);
        }
    }
    Ok((
        Tensor::new([n], gx.into_iter().map(|v| v as f32).collect())?,
        Tensor::new([m, n], gw)?,
    ))
}

/// Stabilized softmax cross-entropy; returns the loss and its gradient wrt the logits.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let k = logits.numel();
    if label >= k {
        return Err(Error::arg(format!("label {label} out of range for {k} classes")));
    }
    let z = logits.data();
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = z.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (z[label] as f64 - max);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| (e / total - if i == label { 1.0 } else { 0.0 }) as f32)
        .collect();
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}
