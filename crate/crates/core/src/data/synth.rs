//! Synthetic slice stacks: one large organ plus lesion-like regions whose
//! cross-sections grow and shrink around the middle of the stack.

use rand::Rng;

use super::{ImageStack, LabelStack, HEART_LABELS};
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub slices: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Half-width of the uniform intensity noise.
    pub noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { slices: 60, classes: 3, height: 64, width: 64, seed: 0, noise: 60.0 }
    }
}

const BACKGROUND: f32 = 100.0;
const ORGAN: f32 = 500.0;
const LESION_BASE: f32 = 900.0;
const LESION_STEP: f32 = 350.0;
/// Bright ring near the border, present on every slice like bone in CT, so
/// per-slice min-max scaling keeps soft-tissue intensities comparable.
const BODY_WALL: f32 = 3000.0;
const WALL_INNER: f64 = 0.44;
const WALL_OUTER: f64 = 0.48;
/// Lesions span this fraction of the stack on either side of their centre.
const LESION_HALF_SPAN: f64 = 0.3;

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        self.ry > 0.0 && self.rx > 0.0 && ((y - self.cy) / self.ry).powi(2) + ((x - self.cx) / self.rx).powi(2) <= 1.0
    }
}

struct Lesion {
    angle: f64,
    offset: f64,
    zc: f64,
    radius: f64,
    aspect: f64,
    drift: f64,
}

/// Generates a stack with `classes` label values: class 1 is the organ,
/// classes 2.. are lesions inside it. Every slice is annotated.
pub fn synth_stack(config: &SynthConfig) -> Result<(ImageStack, LabelStack)> {
    let SynthConfig { slices: n, classes, height: h, width: w, seed, noise } = *config;
    if n < 10 || classes == 0 || classes > HEART_LABELS.len() || h < 8 || w < 8 {
        return Err(Error::InvalidArgument(format!(
            "synthetic stack needs >= 10 slices, 1..={} classes and >= 8x8 extent",
            HEART_LABELS.len()
        )));
    }
    let stream = RngStream::new(seed).split("synth");
    let mut geo = stream.split("geometry").rng();
    let lesions: Vec<Lesion> = (1..classes)
        .map(|k| Lesion {
            angle: std::f64::consts::TAU * k as f64 / (classes - 1) as f64 + geo.gen_range(-0.4..0.4),
            offset: geo.gen_range(0.35..0.5),
            zc: 0.5 + geo.gen_range(-0.05..0.05),
            radius: geo.gen_range(0.10..0.14) * h.min(w) as f64,
            aspect: geo.gen_range(0.75..1.3),
            drift: geo.gen_range(-0.1..0.1),
        })
        .collect();
    let organ_tilt = geo.gen_range(-0.05..0.05);

    let pix = HEART_LABELS[..classes].to_vec();
    let mut class_names = vec!["organ".to_string()];
    class_names.extend((1..classes).map(|k| format!("lesion-{k}")));

    let (hf, wf) = (h as f64, w as f64);
    let mut images = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let z = i as f64 / (n - 1) as f64;
        let swell = 0.8 + 0.2 * (std::f64::consts::PI * z).sin();
        let organ = Ellipse {
            cy: hf * (0.5 + organ_tilt * (z - 0.5)),
            cx: wf * 0.5,
            ry: 0.36 * hf * swell,
            rx: 0.32 * wf * swell,
        };
        let sections: Vec<Ellipse> = lesions
            .iter()
            .map(|l| {
                let t = (z - l.zc) / LESION_HALF_SPAN;
                let r = l.radius * (1.0 - t * t).max(0.0).sqrt();
                let a = l.angle + l.drift * (z - 0.5);
                Ellipse {
                    cy: organ.cy + l.offset * organ.ry * a.sin(),
                    cx: organ.cx + l.offset * organ.rx * a.cos(),
                    ry: r * l.aspect,
                    rx: r / l.aspect,
                }
            })
            .collect();
        let mut rng = stream.split_index("noise", i as u64).rng();
        let mut img = Vec::with_capacity(h * w);
        let mut mask = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let mut label = 0u16;
                let mut value = BACKGROUND;
                let ring = ((py / hf - 0.5).powi(2) + (px / wf - 0.5).powi(2)).sqrt();
                if (WALL_INNER..=WALL_OUTER).contains(&ring) {
                    value = BODY_WALL;
                }
                if organ.contains(py, px) {
                    label = pix[0];
                    value = ORGAN;
                    for (k, e) in sections.iter().enumerate() {
                        if e.contains(py, px) {
                            label = pix[k + 1];
                            value = LESION_BASE + LESION_STEP * k as f32;
                        }
                    }
                }
                let jitter = if noise > 0.0 { rng.gen_range(-noise..=noise) } else { 0.0 };
                img.push((value + jitter).max(0.0));
                mask.push(label);
            }
        }
        images.push(img);
        masks.push(Some(mask));
    }
    Ok((
        ImageStack { id: format!("synth-{seed}"), height: h, width: w, bit_depth: 16, first_index: 0, slices: images },
        LabelStack { pix, class_names, masks },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn area(labels: &LabelStack, slice: usize) -> usize {
        labels.masks[slice].as_ref().unwrap().iter().filter(|&&v| v != 0).count()
    }

    #[test]
    fn deterministic_and_valid() {
        let cfg = SynthConfig::default();
        let (a, la) = synth_stack(&cfg).unwrap();
        let (b, lb) = synth_stack(&cfg).unwrap();
        assert_eq!((a.clone(), la.clone()), (b, lb));
        la.validate(0).unwrap();
        assert_eq!(a.len(), 60);
        assert_ne!(synth_stack(&SynthConfig { seed: 1, ..cfg }).unwrap().0, a);
    }

    #[test]
    fn mid_stack_carries_the_rois() {
        let (_, labels) = synth_stack(&SynthConfig::default()).unwrap();
        assert!(area(&labels, 30) >= area(&labels, 0));
        assert!(area(&labels, 30) >= area(&labels, 59));
        for k in 1..3 {
            let lesion = |s: usize| labels.masks[s].as_ref().unwrap().iter().filter(|&&v| v == HEART_LABELS[k]).count();
            assert_eq!(lesion(0), 0);
            assert_eq!(lesion(59), 0);
            assert!(lesion(30) > 20, "class {k} at mid-stack: {}", lesion(30));
        }
    }

    #[test]
    fn every_slice_has_the_same_bright_wall() {
        let (imgs, _) = synth_stack(&SynthConfig { noise: 0.0, ..SynthConfig::default() }).unwrap();
        for s in &imgs.slices {
            assert_eq!(s.iter().copied().fold(0.0f32, f32::max), BODY_WALL);
        }
    }

    #[test]
    fn single_class_is_binary() {
        let (_, labels) = synth_stack(&SynthConfig { classes: 1, ..SynthConfig::default() }).unwrap();
        assert_eq!(labels.pix, vec![205]);
        assert!(labels.masks.iter().flatten().flatten().all(|&v| v == 0 || v == 205));
        assert!(synth_stack(&SynthConfig { slices: 5, ..SynthConfig::default() }).is_err());
    }
}
