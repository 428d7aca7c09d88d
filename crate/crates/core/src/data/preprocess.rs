//! Resizing, min-max normalisation, label planes and thresholding.

use crate::error::{Error, Result};

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &[f32], height: usize, width: usize, new_h: usize, new_w: usize) -> Result<Vec<f32>> {
    check_extents(src.len(), height, width, new_h, new_w)?;
    if (height, width) == (new_h, new_w) {
        return Ok(src.to_vec());
    }
    let coords = |dst: usize, n_src: usize, n_dst: usize| {
        let s = ((dst as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_src - 1);
        (lo, hi, (s - lo as f64) as f32)
    };
    let cols: Vec<_> = (0..new_w).map(|x| coords(x, width, new_w)).collect();
    let mut out = Vec::with_capacity(new_h * new_w);
    for y in 0..new_h {
        let (y0, y1, fy) = coords(y, height, new_h);
        for &(x0, x1, fx) in &cols {
            let lerp = |a: f32, b: f32, f: f32| a + (b - a) * f;
            let top = lerp(src[y0 * width + x0], src[y0 * width + x1], fx);
            let bottom = lerp(src[y1 * width + x0], src[y1 * width + x1], fx);
            out.push(lerp(top, bottom, fy));
        }
    }
    Ok(out)
}

/// Nearest-neighbour resize; never introduces new values.
pub fn resize_nearest<V: Copy>(src: &[V], height: usize, width: usize, new_h: usize, new_w: usize) -> Result<Vec<V>> {
    check_extents(src.len(), height, width, new_h, new_w)?;
    let pick = |dst: usize, n_src: usize, n_dst: usize| (((dst as f64 + 0.5) * n_src as f64 / n_dst as f64) as usize).min(n_src - 1);
    let cols: Vec<usize> = (0..new_w).map(|x| pick(x, width, new_w)).collect();
    let mut out = Vec::with_capacity(new_h * new_w);
    for y in 0..new_h {
        let row = pick(y, height, new_h) * width;
        out.extend(cols.iter().map(|&x| src[row + x]));
    }
    Ok(out)
}

fn check_extents(len: usize, height: usize, width: usize, new_h: usize, new_w: usize) -> Result<()> {
    if height == 0 || width == 0 || new_h == 0 || new_w == 0 {
        return Err(Error::InvalidArgument(format!("resize extents must be positive: {height}x{width} -> {new_h}x{new_w}")));
    }
    if len != height * width {
        return Err(Error::Shape(format!("buffer of {len} pixels is not {height}x{width}")));
    }
    Ok(())
}

/// `(I − min) / (max − min)`; a constant slice maps to zeros.
pub fn normalize(image: &[f32]) -> Vec<f32> {
    let (lo, hi) = image.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![0.0; image.len()];
    }
    let range = hi - lo;
    image.iter().map(|&v| (v - lo) / range).collect()
}

/// `d` stacked indicator planes `[G == pix_i]`.
pub fn make_label_planes(mask: &[u16], pix: &[u16]) -> Result<Vec<f32>> {
    for (i, p) in pix.iter().enumerate() {
        if pix[..i].contains(p) {
            return Err(Error::InvalidArgument(format!("label value {p} listed twice")));
        }
    }
    let n = mask.len();
    let mut planes = vec![0.0f32; pix.len() * n];
    for (k, &p) in pix.iter().enumerate() {
        for (dst, &g) in planes[k * n..(k + 1) * n].iter_mut().zip(mask) {
            if g == p {
                *dst = 1.0;
            }
        }
    }
    Ok(planes)
}

/// Binary prediction `[P_raw > tau]`.
pub fn threshold_prediction<T: PartialOrd + Copy>(raw: &[T], tau: T) -> Vec<u8> {
    raw.iter().map(|&v| u8::from(v > tau)).collect()
}
