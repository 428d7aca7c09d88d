//! Volumetric slice stacks: ingestion, preprocessing, splits, augmentation
//! and synthetic stacks.

mod augment;
mod png_io;
mod preprocess;
mod split;
mod synth;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

pub use augment::{augment_pair, AugmentationParams};
pub use png_io::{read_gray, write_gray16, write_gray8, write_rgb8, GrayImage};
pub use preprocess::{make_label_planes, normalize, resize_bilinear, resize_nearest, threshold_prediction};
pub use split::{sample_split, SplitConfig, SplitPlan, SplitStrategy, SplitUniverse};
pub use synth::{synth_stack, SynthConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label values of the seven heart substructures; synthetic stacks use a prefix.
pub const HEART_LABELS: [u16; 7] = [205, 420, 500, 550, 600, 820, 850];

/// Ordered slices of one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Source pixel depth, 8 or 16.
    pub bit_depth: u8,
    /// Index of the first slice; slices are contiguous from here.
    pub first_index: usize,
    pub slices: Vec<Vec<f32>>,
}

impl ImageStack {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// Per-slice masks aligned with an [`ImageStack`]; `None` marks an unannotated slice.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelStack {
    pub pix: Vec<u16>,
    pub class_names: Vec<String>,
    pub masks: Vec<Option<Vec<u16>>>,
}

impl LabelStack {
    pub fn num_classes(&self) -> usize {
        self.pix.len()
    }

    pub fn annotated(&self) -> Vec<bool> {
        self.masks.iter().map(Option::is_some).collect()
    }

    /// Checks every mask holds only 0 or a listed label value.
    pub fn validate(&self, first_index: usize) -> Result<()> {
        for (i, mask) in self.masks.iter().enumerate() {
            if let Some(mask) = mask {
                if let Some(bad) = mask.iter().find(|&&v| v != 0 && !self.pix.contains(&v)) {
                    return Err(Error::Slice {
                        index: first_index + i,
                        message: format!("mask value {bad} is not 0 or one of {:?}", self.pix),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Parses the manifest: one `pix name` pair per line, `#` comments.
pub fn parse_manifest(text: &str) -> Result<(Vec<u16>, Vec<String>)> {
    let mut pix = Vec::new();
    let mut names = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let value = parts.next().unwrap_or_default();
        let value: u16 = value
            .parse()
            .map_err(|_| Error::Data(format!("manifest line {}: `{value}` is not a 16-bit label value", n + 1)))?;
        if value == 0 || pix.contains(&value) {
            return Err(Error::Data(format!("manifest line {}: label {value} is zero or repeated", n + 1)));
        }
        let name = parts.collect::<Vec<_>>().join(" ");
        names.push(if name.is_empty() { format!("pix_{value}") } else { name });
        pix.push(value);
    }
    if pix.is_empty() {
        return Err(Error::Data("manifest lists no label values".into()));
    }
    Ok((pix, names))
}

pub fn format_manifest(pix: &[u16], names: &[String]) -> String {
    let mut out = String::from("# label-value class-name\n");
    for (p, n) in pix.iter().zip(names) {
        let _ = writeln!(out, "{p} {n}");
    }
    out
}

fn indexed_pngs(dir: &Path) -> Result<BTreeMap<usize, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let index: usize = stem
            .parse()
            .map_err(|_| Error::Data(format!("{}: file name is not a slice index", path.display())))?;
        if out.insert(index, path.clone()).is_some() {
            return Err(Error::Data(format!("{}: slice index {index} appears twice", path.display())));
        }
    }
    Ok(out)
}

/// Reads `images/NNNN.png`, `masks/NNNN.png` and `manifest` from `dir`.
pub fn load_stack(dir: impl AsRef<Path>) -> Result<(ImageStack, LabelStack)> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest");
    let manifest = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let (pix, class_names) = parse_manifest(&manifest)?;

    let images = indexed_pngs(&dir.join("images"))?;
    let (&first, _) = images
        .iter()
        .next()
        .ok_or_else(|| Error::Data(format!("{}: no slice images found", dir.join("images").display())))?;
    let last = *images.keys().next_back().unwrap();
    if let Some(missing) = (first..=last).find(|i| !images.contains_key(i)) {
        return Err(Error::Slice { index: missing, message: "slice image missing from contiguous range".into() });
    }
    let masks = indexed_pngs(&dir.join("masks"))?;
    if let Some(&stray) = masks.keys().find(|i| !images.contains_key(i)) {
        return Err(Error::Slice { index: stray, message: "mask has no matching slice image".into() });
    }

    let mut slices = Vec::with_capacity(images.len());
    let mut label_masks = Vec::with_capacity(images.len());
    let mut extent = None;
    let mut bit_depth = 8;
    for (&index, path) in &images {
        let img = read_gray(path)?;
        let ext = *extent.get_or_insert((img.height, img.width));
        if (img.height, img.width) != ext {
            return Err(Error::Slice {
                index,
                message: format!("extent {}x{} differs from {}x{}", img.height, img.width, ext.0, ext.1),
            });
        }
        bit_depth = bit_depth.max(img.bit_depth);
        slices.push(img.pixels.iter().map(|&v| v as f32).collect());
        label_masks.push(match masks.get(&index) {
            None => None,
            Some(mpath) => {
                let m = read_gray(mpath)?;
                if (m.height, m.width) != ext {
                    return Err(Error::Slice { index, message: "mask extent differs from its slice".into() });
                }
                Some(m.pixels)
            }
        });
    }
    let (height, width) = extent.unwrap();
    let id = dir.file_name().and_then(|s| s.to_str()).unwrap_or("stack").to_string();
    let labels = LabelStack { pix, class_names, masks: label_masks };
    labels.validate(first)?;
    Ok((ImageStack { id, height, width, bit_depth, first_index: first, slices }, labels))
}

/// Writes a stack in the layout [`load_stack`] reads (16-bit images and masks).
pub fn save_stack(dir: impl AsRef<Path>, images: &ImageStack, labels: &LabelStack) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let manifest = dir.join("manifest");
    std::fs::write(&manifest, format_manifest(&labels.pix, &labels.class_names)).map_err(|e| Error::io(&manifest, e))?;
    for (i, slice) in images.slices.iter().enumerate() {
        let name = format!("{:04}.png", images.first_index + i);
        let px: Vec<u16> = slice.iter().map(|&v| v.round().clamp(0.0, 65535.0) as u16).collect();
        write_gray16(&dir.join("images").join(&name), images.width, images.height, &px)?;
        if let Some(mask) = &labels.masks[i] {
            write_gray16(&dir.join("masks").join(&name), images.width, images.height, mask)?;
        }
    }
    Ok(())
}

/// A stack resized, normalised and split into label planes, ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedStack {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub class_names: Vec<String>,
    /// `[1, 1, h, w]` per slice.
    pub images: Vec<Tensor<f32>>,
    /// `[1, d, h, w]` per annotated slice.
    pub labels: Vec<Option<Tensor<f32>>>,
}

impl PreparedStack {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn annotated(&self) -> Vec<bool> {
        self.labels.iter().map(Option::is_some).collect()
    }

    /// Resizes to `height × width` (bilinear images, nearest masks), then
    /// normalises each slice and expands masks into label planes.
    pub fn prepare(images: &ImageStack, labels: &LabelStack, height: usize, width: usize) -> Result<Self> {
        if labels.masks.len() != images.len() {
            return Err(Error::Data(format!(
                "{} masks for {} slices",
                labels.masks.len(),
                images.len()
            )));
        }
        let d = labels.num_classes();
        let mut out_images = Vec::with_capacity(images.len());
        let mut out_labels = Vec::with_capacity(images.len());
        for (slice, mask) in images.slices.iter().zip(&labels.masks) {
            let resized = resize_bilinear(slice, images.height, images.width, height, width)?;
            out_images.push(Tensor::new(vec![1, 1, height, width], normalize(&resized))?);
            out_labels.push(match mask {
                None => None,
                Some(m) => {
                    let rm = resize_nearest(m, images.height, images.width, height, width)?;
                    Some(Tensor::new(vec![1, d, height, width], make_label_planes(&rm, &labels.pix)?)?)
                }
            });
        }
        Ok(PreparedStack {
            id: images.id.clone(),
            height,
            width,
            class_names: labels.class_names.clone(),
            images: out_images,
            labels: out_labels,
        })
    }
}
