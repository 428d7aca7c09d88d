//! Paired random affine augmentation of an image and its label planes.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AugmentationParams {
    /// Degrees.
    pub rotation: f64,
    /// Fraction of the width.
    pub width_shift: f64,
    /// Fraction of the height.
    pub height_shift: f64,
    /// Degrees.
    pub shear: f64,
    pub zoom: (f64, f64),
}

impl Default for AugmentationParams {
    fn default() -> Self {
        AugmentationParams { rotation: 0.2, width_shift: 0.2, height_shift: 0.2, shear: 0.2, zoom: (0.8, 1.0) }
    }
}

impl AugmentationParams {
    pub fn identity() -> Self {
        AugmentationParams { rotation: 0.0, width_shift: 0.0, height_shift: 0.0, shear: 0.0, zoom: (1.0, 1.0) }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.zoom;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidArgument(format!("zoom range needs 0 < lo <= hi, got [{lo}, {hi}]")));
        }
        if [self.rotation, self.width_shift, self.height_shift, self.shear].iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArgument("augmentation ranges must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn symmetric(rng: &mut impl Rng, range: f64) -> f64 {
    if range > 0.0 {
        rng.gen_range(-range..=range)
    } else {
        0.0
    }
}

type Affine = [[f64; 3]; 2];

fn compose(a: &Affine, b: &Affine) -> Affine {
    let mut out = [[0.0; 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + if j == 2 { a[i][2] } else { 0.0 };
        }
    }
    out
}

/// Output-to-input map in `(row, col)` coordinates, centred on the image.
fn sample_transform(params: &AugmentationParams, height: usize, width: usize, rng: &mut impl Rng) -> Affine {
    let theta = symmetric(rng, params.rotation).to_radians();
    let tr = symmetric(rng, params.height_shift) * height as f64;
    let tc = symmetric(rng, params.width_shift) * width as f64;
    let shear = symmetric(rng, params.shear).to_radians();
    let (lo, hi) = params.zoom;
    let (zr, zc) = if hi > lo { (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)) } else { (lo, lo) };

    let rotation = [[theta.cos(), -theta.sin(), 0.0], [theta.sin(), theta.cos(), 0.0]];
    let shift = [[1.0, 0.0, tr], [0.0, 1.0, tc]];
    let shear_m = [[1.0, -shear.sin(), 0.0], [0.0, shear.cos(), 0.0]];
    let zoom = [[zr, 0.0, 0.0], [0.0, zc, 0.0]];
    let m = compose(&compose(&compose(&rotation, &shift), &shear_m), &zoom);
    let (cr, cc) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let to_centre = [[1.0, 0.0, -cr], [0.0, 1.0, -cc]];
    let back = [[1.0, 0.0, cr], [0.0, 1.0, cc]];
    compose(&compose(&back, &m), &to_centre)
}

fn is_identity(m: &Affine) -> bool {
    *m == [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
}

/// Applies one sampled affine map to `image` (bilinear) and every plane of
/// `planes` (nearest), both with zero fill. `planes` holds `d` planes of
/// `height × width`.
pub fn augment_pair(
    image: &[f32],
    planes: Option<&[f32]>,
    height: usize,
    width: usize,
    params: &AugmentationParams,
    stream: &RngStream,
) -> Result<(Vec<f32>, Option<Vec<f32>>)> {
    params.validate()?;
    let n = height * width;
    if image.len() != n || planes.is_some_and(|p| p.len() % n != 0) {
        return Err(Error::Shape(format!("augmentation inputs do not match {height}x{width}")));
    }
    let m = sample_transform(params, height, width, &mut stream.rng());
    if is_identity(&m) {
        return Ok((image.to_vec(), planes.map(<[f32]>::to_vec)));
    }
    let source = |r: usize, c: usize| {
        let (r, c) = (r as f64, c as f64);
        (m[0][0] * r + m[0][1] * c + m[0][2], m[1][0] * r + m[1][1] * c + m[1][2])
    };
    let mut out_img = vec![0.0f32; n];
    let mut out_planes = planes.map(|p| vec![0.0f32; p.len()]);
    let (hf, wf) = (height as f64, width as f64);
    for r in 0..height {
        for c in 0..width {
            let (sr, sc) = source(r, c);
            // Bilinear with zero outside the grid.
            let (r0, c0) = (sr.floor(), sc.floor());
            let (fr, fc) = (sr - r0, sc - c0);
            let mut acc = 0.0f64;
            for (dr, wr) in [(0.0, 1.0 - fr), (1.0, fr)] {
                for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
                    let (rr, cc) = (r0 + dr, c0 + dc);
                    if rr >= 0.0 && rr < hf && cc >= 0.0 && cc < wf && wr * wc != 0.0 {
                        acc += wr * wc * image[rr as usize * width + cc as usize] as f64;
                    }
                }
            }
            out_img[r * width + c] = acc as f32;
            if let (Some(src), Some(dst)) = (planes, out_planes.as_mut()) {
                let (nr, nc) = (sr.round(), sc.round());
                if nr >= 0.0 && nr < hf && nc >= 0.0 && nc < wf {
                    let s = nr as usize * width + nc as usize;
                    for k in 0..src.len() / n {
                        dst[k * n + r * width + c] = src[k * n + s];
                    }
                }
            }
        }
    }
    Ok((out_img, out_planes))
}
