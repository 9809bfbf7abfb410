//! PNG reading and writing for `[0, 1]` image tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn to_u8(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write(path: &Path, w: usize, h: usize, color: ColorType, depth: BitDepth, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(bytes).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// Writes a `[3, H, W]` tensor as 8-bit RGB.
pub fn write_rgb(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w) = match *img.shape() {
        [3, h, w] => (h, w),
        _ => return Err(Error::shape("write_rgb", &[3, 0, 0], img.shape())),
    };
    let plane = h * w;
    let d = img.data();
    let bytes: Vec<u8> = (0..plane).flat_map(|k| (0..3).map(move |c| to_u8(d[c * plane + k]))).collect();
    write(path, w, h, ColorType::Rgb, BitDepth::Eight, &bytes)
}

fn gray_dims(img: &Tensor<f32>, ctx: &str) -> Result<(usize, usize)> {
    match *img.shape() {
        [h, w] | [1, h, w] => Ok((h, w)),
        _ => Err(Error::shape(ctx, &[0, 0], img.shape())),
    }
}

/// Writes an `[H, W]` (or `[1, H, W]`) tensor as 8-bit grayscale.
pub fn write_gray(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w) = gray_dims(img, "write_gray")?;
    let bytes: Vec<u8> = img.data().iter().map(|&x| to_u8(x)).collect();
    write(path, w, h, ColorType::Grayscale, BitDepth::Eight, &bytes)
}

/// Writes an `[H, W]` (or `[1, H, W]`) tensor as 16-bit grayscale.
pub fn write_gray16(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w) = gray_dims(img, "write_gray16")?;
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .flat_map(|&x| (((x.clamp(0.0, 1.0) as f64) * 65535.0).round() as u16).to_be_bytes())
        .collect();
    write(path, w, h, ColorType::Grayscale, BitDepth::Sixteen, &bytes)
}

struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    /// Samples scaled to `[0, 1]`, interleaved.
    samples: Vec<f32>,
}

fn decode(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(png_err(path, "indexed color not supported")),
    };
    let bytes = &buf[..info.buffer_size()];
    let samples = match info.bit_depth {
        BitDepth::Sixteen => bytes
            .chunks(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0)
            .collect(),
        BitDepth::Eight => bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        other => return Err(png_err(path, format!("unsupported bit depth {other:?}"))),
    };
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        samples,
    })
}

fn check_size(path: &Path, d: &Decoded, h: usize, w: usize) -> Result<()> {
    if d.height != h || d.width != w {
        return Err(png_err(path, format!("expected {h}x{w}, found {}x{}", d.height, d.width)));
    }
    Ok(())
}

/// Reads an RGB(A) or grayscale PNG as `[3, H, W]`.
pub fn read_rgb(path: &Path, h: usize, w: usize) -> Result<Tensor<f32>> {
    let d = decode(path)?;
    check_size(path, &d, h, w)?;
    let plane = h * w;
    Ok(Tensor::from_fn(&[3, h, w], |k| {
        let (c, p) = (k / plane, k % plane);
        let c = if d.channels < 3 { 0 } else { c };
        d.samples[p * d.channels + c]
    }))
}

/// Reads the first channel of a PNG as `[H, W]`.
pub fn read_gray(path: &Path, h: usize, w: usize) -> Result<Tensor<f32>> {
    let d = decode(path)?;
    check_size(path, &d, h, w)?;
    Ok(Tensor::from_fn(&[h, w], |k| d.samples[k * d.channels]))
}

/// Tiles equally sized `[3, H, W]` images into a grid with `cols` columns.
pub fn contact_sheet(images: &[Tensor<f32>], cols: usize) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Precondition("contact sheet of zero images".into()))?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols);
    let (sh, sw) = (rows * h, cols * w);
    let mut out = Tensor::zeros(&[3, sh, sw]);
    for (n, img) in images.iter().enumerate() {
        img.expect_shape(&[3, h, w], "contact_sheet")?;
        let (r0, c0) = ((n / cols) * h, (n % cols) * w);
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    out.data_mut()[(c * sh + r0 + i) * sw + c0 + j] = img.data()[(c * h + i) * w + j];
                }
            }
        }
    }
    Ok(out)
}
