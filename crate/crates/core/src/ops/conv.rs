//! 2-D convolution and transposed convolution kernels (im2col + GEMM).
//!
//! Convolution is cross-correlation (no kernel flip). Weights are laid out
//! `[cout, cin, kh, kw]` for [`conv2d`] and `[cin, cout, kh, kw]` for
//! [`conv_transpose2d`], so the two are adjoint for the same weight buffer.
//! All reductions run in a fixed order; results are bitwise reproducible.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Upper bound on im2col buffer elements; larger convolutions are processed in row bands.
const COL_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Zero padding `(k - 1) / 2`; keeps extents for odd kernels at stride 1.
    Same,
    Valid,
}

/// Resolved geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn conv2d(input: &[usize], weight: &[usize], padding: Padding, stride: usize) -> Result<Self> {
        let [batch, cin, h, w] = rank4(input, "input")?;
        let [cout, wcin, kh, kw] = rank4(weight, "weight")?;
        if stride == 0 {
            return Err(Error::InvalidArgument("convolution stride must be positive".into()));
        }
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv2d channel axis: input has {cin} channels, weight expects {wcin}"
            )));
        }
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => {
                if kh != kw || kh % 2 == 0 {
                    return Err(Error::Shape(format!(
                        "same padding needs a square odd kernel, got {kh}x{kw}"
                    )));
                }
                (kh - 1) / 2
            }
        };
        if kh > h + 2 * pad {
            return Err(Error::Shape(format!("conv2d height axis: kernel {kh} exceeds padded extent {}", h + 2 * pad)));
        }
        if kw > w + 2 * pad {
            return Err(Error::Shape(format!("conv2d width axis: kernel {kw} exceeds padded extent {}", w + 2 * pad)));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom { batch, cin, h, w, cout, kh, kw, pad, stride, ho, wo })
    }

    /// Geometry of the forward convolution whose adjoint is the given transposed convolution.
    ///
    /// In the returned geometry `cin`/`h`/`w` describe the transposed conv's
    /// *output* and `cout`/`ho`/`wo` its *input*.
    pub fn conv_transpose2d(input: &[usize], weight: &[usize], stride: usize) -> Result<Self> {
        let [batch, cin, h, w] = rank4(input, "input")?;
        let [wcin, cout, kh, kw] = rank4(weight, "weight")?;
        if stride == 0 {
            return Err(Error::InvalidArgument("convolution stride must be positive".into()));
        }
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv_transpose2d channel axis: input has {cin} channels, weight expects {wcin}"
            )));
        }
        let out_h = (h - 1) * stride + kh;
        let out_w = (w - 1) * stride + kw;
        Ok(ConvGeom { batch, cin: cout, h: out_h, w: out_w, cout: cin, kh, kw, pad: 0, stride, ho: h, wo: w })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn band_rows(&self) -> usize {
        (COL_BUDGET / (self.k() * self.wo).max(1)).clamp(1, self.ho)
    }
}

fn rank4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    shape
        .try_into()
        .map_err(|_| Error::Shape(format!("{what} must be rank 4, got shape {shape:?}")))
}

/// Fills `col` (`[cin*kh*kw, rows*wo]`) for output rows `r0..r0+rows` of one image.
fn im2col<T: Element>(g: &ConvGeom, image: &[T], r0: usize, rows: usize, col: &mut [T]) {
    let p = rows * g.wo;
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut col[row * p..(row + 1) * p];
                for r in 0..rows {
                    let out = &mut dst[r * g.wo..(r + 1) * g.wo];
                    let iy = ((r0 + r) * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (c, o) in out.iter_mut().enumerate() {
                        let ix = (c * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { T::ZERO };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatters `col` back onto an image gradient (adjoint of [`im2col`]).
fn col2im<T: Element>(g: &ConvGeom, col: &[T], r0: usize, rows: usize, image: &mut [T]) {
    let p = rows * g.wo;
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &mut image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &col[row * p..(row + 1) * p];
                for r in 0..rows {
                    let iy = ((r0 + r) * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (c, &v) in src[r * g.wo..(r + 1) * g.wo].iter().enumerate() {
                        let ix = (c * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `y[b] = W · col(x[b]) + bias`, where `y` is `[batch, cout, ho, wo]`.
fn conv_core<T: Element>(g: &ConvGeom, x: &[T], weight: &[T], y: &mut [T]) {
    let k = g.k();
    let band = g.band_rows();
    let mut col = vec![T::ZERO; k * band * g.wo];
    for b in 0..g.batch {
        let image = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        let out = &mut y[b * g.cout * g.ho * g.wo..(b + 1) * g.cout * g.ho * g.wo];
        let mut r0 = 0;
        while r0 < g.ho {
            let rows = band.min(g.ho - r0);
            let p = rows * g.wo;
            im2col(g, image, r0, rows, &mut col[..k * p]);
            // SAFETY: extents and strides describe in-bounds regions of live buffers.
            unsafe {
                T::gemm(
                    g.cout,
                    k,
                    p,
                    T::ONE,
                    weight.as_ptr(),
                    k as isize,
                    1,
                    col.as_ptr(),
                    p as isize,
                    1,
                    T::ZERO,
                    out.as_mut_ptr().add(r0 * g.wo),
                    (g.ho * g.wo) as isize,
                    1,
                );
            }
            r0 += rows;
        }
    }
}

/// Accumulates `dx += Wᵀ · dy` (scattered) and `dw += dy · col(x)ᵀ`.
fn conv_core_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let k = g.k();
    let band = g.band_rows();
    let mut col = vec![T::ZERO; if dw.is_some() { k * band * g.wo } else { 0 }];
    let mut dcol = vec![T::ZERO; if dx.is_some() { k * band * g.wo } else { 0 }];
    for b in 0..g.batch {
        let grad = &dy[b * g.cout * g.ho * g.wo..(b + 1) * g.cout * g.ho * g.wo];
        let mut r0 = 0;
        while r0 < g.ho {
            let rows = band.min(g.ho - r0);
            let p = rows * g.wo;
            let grad_band = grad[r0 * g.wo..].as_ptr();
            if let Some(dw) = dw.as_deref_mut() {
                let image = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
                im2col(g, image, r0, rows, &mut col[..k * p]);
                // SAFETY: dy band is [cout, p] with row stride ho*wo; col is [k, p].
                unsafe {
                    T::gemm(
                        g.cout,
                        p,
                        k,
                        T::ONE,
                        grad_band,
                        (g.ho * g.wo) as isize,
                        1,
                        col.as_ptr(),
                        1,
                        p as isize,
                        T::ONE,
                        dw.as_mut_ptr(),
                        k as isize,
                        1,
                    );
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                // SAFETY: Wᵀ is [k, cout] via strides; dcol is [k, p].
                unsafe {
                    T::gemm(
                        k,
                        g.cout,
                        p,
                        T::ONE,
                        weight.as_ptr(),
                        1,
                        k as isize,
                        grad_band,
                        (g.ho * g.wo) as isize,
                        1,
                        T::ZERO,
                        dcol.as_mut_ptr(),
                        p as isize,
                        1,
                    );
                }
                let image_grad = &mut dx[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
                col2im(g, &dcol[..k * p], r0, rows, image_grad);
            }
            r0 += rows;
        }
    }
}

fn check_bias<T: Element>(bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(Error::Shape(format!(
            "bias axis: expected [{channels}], got {:?}",
            b.shape()
        ))),
        _ => Ok(()),
    }
}

fn add_bias<T: Element>(y: &mut [T], bias: &[T], plane: usize) {
    let channels = bias.len();
    for (i, chunk) in y.chunks_mut(plane).enumerate() {
        let b = bias[i % channels];
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad<T: Element>(dy: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::ZERO; channels];
    for (i, chunk) in dy.chunks(plane).enumerate() {
        let mut s = T::ZERO;
        for &v in chunk {
            s += v;
        }
        db[i % channels] += s;
    }
    db
}

pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: Padding,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::conv2d(input.shape(), weight.shape(), padding, stride)?;
    check_bias(bias, g.cout)?;
    let mut y = vec![T::ZERO; g.batch * g.cout * g.ho * g.wo];
    conv_core(&g, input.data(), weight.data(), &mut y);
    if let Some(b) = bias {
        add_bias(&mut y, b.data(), g.ho * g.wo);
    }
    Ok(Tensor::from_parts(vec![g.batch, g.cout, g.ho, g.wo], y))
}

/// Gradients of [`conv2d`]: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    padding: Padding,
    stride: usize,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::conv2d(input.shape(), weight.shape(), padding, stride)?;
    let mut dx = vec![T::ZERO; input.numel()];
    let mut dw = vec![T::ZERO; weight.numel()];
    conv_core_backward(&g, input.data(), weight.data(), dy.data(), Some(&mut dx), Some(&mut dw));
    let db = bias_grad(dy.data(), g.cout, g.ho * g.wo);
    Ok((
        Tensor::from_parts(input.shape().to_vec(), dx),
        Tensor::from_parts(weight.shape().to_vec(), dw),
        Tensor::from_parts(vec![g.cout], db),
    ))
}

/// Transposed convolution without padding: output extent `(h - 1) * stride + k`.
pub fn conv_transpose2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::conv_transpose2d(input.shape(), weight.shape(), stride)?;
    check_bias(bias, g.cin)?;
    // The transposed conv is the data-gradient of the adjoint forward conv,
    // whose weight [cout=input channels, cin=output channels, kh, kw] is exactly ours.
    let mut y = vec![T::ZERO; g.batch * g.cin * g.h * g.w];
    conv_core_backward(&g, &[], weight.data(), input.data(), Some(&mut y), None);
    if let Some(b) = bias {
        add_bias(&mut y, b.data(), g.h * g.w);
    }
    Ok(Tensor::from_parts(vec![g.batch, g.cin, g.h, g.w], y))
}

/// Gradients of [`conv_transpose2d`]: `(d_input, d_weight, d_bias)`.
pub fn conv_transpose2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::conv_transpose2d(input.shape(), weight.shape(), stride)?;
    // d_input = forward conv of dy; d_weight[ci, co, ..] = sum x[ci] * col(dy)[co, ..].
    let mut dx = vec![T::ZERO; input.numel()];
    conv_core(&g, dy.data(), weight.data(), &mut dx);
    let mut dw = vec![T::ZERO; weight.numel()];
    conv_core_backward(&g, dy.data(), weight.data(), input.data(), None, Some(&mut dw));
    let db = bias_grad(dy.data(), g.cin, g.h * g.w);
    Ok((
        Tensor::from_parts(input.shape().to_vec(), dx),
        Tensor::from_parts(weight.shape().to_vec(), dw),
        Tensor::from_parts(vec![g.cin], db),
    ))
}
