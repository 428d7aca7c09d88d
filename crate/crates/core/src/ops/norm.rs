//! Per-channel batch normalisation over `[n, h, w]`.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchNormMode<'a, T> {
    /// Normalise by batch statistics.
    Train,
    /// Normalise by the supplied running statistics.
    Infer { running_mean: &'a [T], running_var: &'a [T] },
}

/// Values the backward rule needs.
#[derive(Debug, Clone)]
pub struct BatchNormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

/// Batch statistics observed in train mode (biased variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub fn batch_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: BatchNormMode<'_, T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormSaved<T>, Option<BatchStats<T>>)> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("batch-norm eps must be positive, got {eps}")));
    }
    let (n, c, h, w) = x.dims4()?;
    for (name, t) in [("gamma", gamma.shape()), ("beta", beta.shape())] {
        if t != [c] {
            return Err(Error::Shape(format!("batch-norm {name} expects [{c}], got {t:?}")));
        }
    }
    if let BatchNormMode::Infer { running_mean, running_var } = mode {
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape(format!("batch-norm running statistics must have {c} channels")));
        }
    }
    let plane = h * w;
    let count = T::from_f64((n * plane) as f64);
    let eps = T::from_f64(eps);
    let data = x.data();

    let (mean, var, stats) = match mode {
        BatchNormMode::Train => {
            let mut mean = vec![T::ZERO; c];
            let mut var = vec![T::ZERO; c];
            for ch in 0..c {
                let mut s = T::ZERO;
                for b in 0..n {
                    for &v in &data[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                        s += v;
                    }
                }
                let m = s / count;
                let mut sq = T::ZERO;
                for b in 0..n {
                    for &v in &data[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                        let d = v - m;
                        sq += d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = sq / count;
            }
            let stats = BatchStats { mean: mean.clone(), var: var.clone() };
            (mean, var, Some(stats))
        }
        BatchNormMode::Infer { running_mean, running_var } => (running_mean.to_vec(), running_var.to_vec(), None),
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::ZERO; data.len()];
    let mut y = vec![T::ZERO; data.len()];
    for (i, chunk) in data.chunks(plane).enumerate() {
        let ch = i % c;
        let (m, s, g, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
        let base = i * plane;
        for (j, &v) in chunk.iter().enumerate() {
            let xh = (v - m) * s;
            xhat[base + j] = xh;
            y[base + j] = g * xh + bt;
        }
    }
    let saved = BatchNormSaved { xhat, inv_std, train: stats.is_some() };
    Ok((Tensor::from_parts(x.shape().to_vec(), y), saved, stats))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Element>(
    shape: &[usize],
    gamma: &Tensor<T>,
    saved: &BatchNormSaved<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let count = T::from_f64((n * plane) as f64);
    let g = dy.data();
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    for (i, chunk) in g.chunks(plane).enumerate() {
        let ch = i % c;
        let xh = &saved.xhat[i * plane..(i + 1) * plane];
        let (mut sg, mut sb) = (T::ZERO, T::ZERO);
        for (&d, &x) in chunk.iter().zip(xh) {
            sg += d * x;
            sb += d;
        }
        dgamma[ch] += sg;
        dbeta[ch] += sb;
    }
    let mut dx = vec![T::ZERO; g.len()];
    for (i, chunk) in g.chunks(plane).enumerate() {
        let ch = i % c;
        let gm = gamma.data()[ch];
        let s = saved.inv_std[ch];
        let xh = &saved.xhat[i * plane..(i + 1) * plane];
        let out = &mut dx[i * plane..(i + 1) * plane];
        if saved.train {
            // dx = γ·s/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
            let k = gm * s / count;
            for j in 0..plane {
                out[j] = k * (count * chunk[j] - dbeta[ch] - xh[j] * dgamma[ch]);
            }
        } else {
            for j in 0..plane {
                out[j] = gm * s * chunk[j];
            }
        }
    }
    (
        Tensor::from_parts(shape.to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}
