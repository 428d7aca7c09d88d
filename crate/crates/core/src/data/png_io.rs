//! Grayscale and RGB PNG helpers.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// A decoded single-channel image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    /// 8 or 16.
    pub bit_depth: u8,
    pub pixels: Vec<u16>,
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => {
            return Err(Error::Image(format!("{}: expected a grayscale image, found {other:?}", path.display())));
        }
    };
    let (bit_depth, pixels) = match info.bit_depth {
        png::BitDepth::Sixteen => (
            16,
            buf[..info.buffer_size()]
                .chunks_exact(2 * channels)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect::<Vec<_>>(),
        ),
        _ => (8, buf[..info.buffer_size()].chunks_exact(channels).map(|c| c[0] as u16).collect()),
    };
    if pixels.len() != w * h {
        return Err(Error::Image(format!("{}: decoded {} pixels for {w}x{h}", path.display(), pixels.len())));
    }
    Ok(GrayImage { height: h, width: w, bit_depth, pixels })
}

fn encoder<'a>(path: &Path, width: usize, height: usize) -> Result<png::Encoder<'a, BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(png::Encoder::new(BufWriter::new(file), width as u32, height as u32))
}

fn finish(path: &Path, mut enc: png::Encoder<'_, BufWriter<File>>, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    enc.set_color(color);
    enc.set_depth(depth);
    let err = |e: png::EncodingError| Error::Image(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(err)?;
    writer.write_image_data(data).map_err(err)?;
    writer.finish().map_err(err)
}

pub fn write_gray16(path: &Path, width: usize, height: usize, pixels: &[u16]) -> Result<()> {
    let data: Vec<u8> = pixels.iter().flat_map(|p| p.to_be_bytes()).collect();
    finish(path, encoder(path, width, height)?, png::ColorType::Grayscale, png::BitDepth::Sixteen, &data)
}

pub fn write_gray8(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    finish(path, encoder(path, width, height)?, png::ColorType::Grayscale, png::BitDepth::Eight, pixels)
}

pub fn write_rgb8(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    finish(path, encoder(path, width, height)?, png::ColorType::Rgb, png::BitDepth::Eight, rgb)
}
