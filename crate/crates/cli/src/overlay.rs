//! Class-colored mask overlays on grayscale slices.

pub type Rgb = [u8; 3];

pub const BLUE: Rgb = [0, 0, 255];
pub const RED: Rgb = [255, 0, 0];
pub const GREEN: Rgb = [0, 255, 0];

/// Organ, first lesion, second lesion; then further distinct hues.
const PALETTE: [Rgb; 7] = [BLUE, RED, GREEN, [255, 255, 0], [255, 0, 255], [0, 255, 255], [255, 128, 0]];

/// Seven-label grouping into three display planes: two red, two blue, three green.
const SEVEN_GROUPED: [Rgb; 7] = [RED, RED, BLUE, BLUE, GREEN, GREEN, GREEN];

/// Mask color per class.
pub fn color_map(classes: usize, grouped_colors: bool) -> Vec<Rgb> {
    if grouped_colors && classes == SEVEN_GROUPED.len() {
        return SEVEN_GROUPED.to_vec();
    }
    (0..classes).map(|k| PALETTE[k % PALETTE.len()]).collect()
}

/// Blends each predicted class color at half opacity over `gray` (values in
/// `[0, 1]`); later classes draw over earlier ones.
pub fn overlay(gray: &[f32], planes: &[u8], colors: &[Rgb]) -> Vec<u8> {
    let n = gray.len();
    let mut rgb = Vec::with_capacity(3 * n);
    for (p, &g) in gray.iter().enumerate() {
        let v = (g.clamp(0.0, 1.0) * 255.0).round() as u8;
        let mut px = [v, v, v];
        for (k, c) in colors.iter().enumerate() {
            if planes[k * n + p] != 0 {
                px = [0, 1, 2].map(|i| ((v as u16 + c[i] as u16) / 2) as u8);
            }
        }
        rgb.extend_from_slice(&px);
    }
    rgb
}
