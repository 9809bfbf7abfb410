//! Outpainting pre-training augmentation: the background loses a dilated
//! foreground region, the foreground is randomly cropped and resized, and
//! the model learns to reconstruct the full frame from both.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `[H, W]` mask with 1 = foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("BinaryMask", &[height, width], &[data.len()]));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::param("mask", format!("values must be 0 or 1, found {v}")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|k| f(k / width, k % width) as u8).collect();
        Self { height, width, data }
    }

    /// Thresholds a real map at `> 0.5`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match *t.shape() {
            [h, w] => Ok(Self::from_fn(h, w, |i, j| t.data()[i * w + j] > 0.5)),
            _ => Err(Error::shape("BinaryMask::from_tensor", &[0, 0], t.shape())),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Every foreground pixel of `other` is foreground here.
    pub fn contains(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a >= b)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_fn(&[self.height, self.width], |k| self.data[k] as f32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HaopParams {
    pub dilation_radius: usize,
    pub crop_scale_range: [f64; 2],
}

impl Default for HaopParams {
    fn default() -> Self {
        Self {
            dilation_radius: 2,
            crop_scale_range: [0.6, 1.0],
        }
    }
}

impl HaopParams {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::param(
                "crop_scale_range",
                format!("need 0 < low <= high <= 1, got [{lo}, {hi}]"),
            ));
        }
        Ok(())
    }
}

/// Morphological dilation with a `(2r+1)^2` square, computed as a row pass
/// followed by a column pass.
pub fn dilate_background(fg_mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return fg_mask.clone();
    }
    let (h, w) = (fg_mask.height, fg_mask.width);
    let mut rows = vec![0u8; h * w];
    for i in 0..h {
        for j in 0..w {
            let (a, b) = (j.saturating_sub(radius), (j + radius).min(w - 1));
            rows[i * w + j] = fg_mask.data[i * w + a..=i * w + b].iter().copied().max().unwrap_or(0);
        }
    }
    let mut out = vec![0u8; h * w];
    for i in 0..h {
        let (a, b) = (i.saturating_sub(radius), (i + radius).min(h - 1));
        for j in 0..w {
            out[i * w + j] = (a..=b).map(|r| rows[r * w + j]).max().unwrap_or(0);
        }
    }
    BinaryMask {
        height: h,
        width: w,
        data: out,
    }
}

/// Result of a crop/resize, with the sampled square window in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct CropOutcome {
    pub image: Tensor<f32>,
    /// `(top, left, side)`.
    pub window: (f64, f64, f64),
    /// The mask was empty and a center crop was used.
    pub fallback: bool,
}

fn image_dims(img: &Tensor<f32>, mask: &BinaryMask) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] if h == mask.height && w == mask.width => Ok((c, h, w)),
        _ => Err(Error::shape("image vs mask", &[0, mask.height, mask.width], img.shape())),
    }
}

/// Bilinear resample of the square window `(top, left, side)` to `h x w`,
/// edge-clamped. A full-frame window reproduces the input exactly.
pub fn resize_window(img: &Tensor<f32>, window: (f64, f64, f64), h: usize, w: usize) -> Tensor<f32> {
    let (c, sh, sw) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (top, left, side) = window;
    let src = img.data();
    let sample = |plane: usize, y: f64, x: f64| -> f32 {
        let y = y.clamp(0.0, (sh - 1) as f64);
        let x = x.clamp(0.0, (sw - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(sh - 1), (x0 + 1).min(sw - 1));
        let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
        let at = |i: usize, j: usize| src[(plane * sh + i) * sw + j];
        let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
        let bot = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
        top + (bot - top) * fy
    };
    Tensor::from_fn(&[c, h, w], |k| {
        let (plane, i, j) = (k / (h * w), (k / w) % h, k % w);
        let y = top + (i as f64 + 0.5) * side / h as f64 - 0.5;
        let x = left + (j as f64 + 0.5) * side / w as f64 - 0.5;
        sample(plane, y, x)
    })
}

fn window_hits(mask: &BinaryMask, top: f64, left: f64, side: f64) -> bool {
    let (i0, i1) = ((top - 0.5).ceil().max(0.0) as usize, (top + side - 0.5).floor());
    let (j0, j1) = ((left - 0.5).ceil().max(0.0) as usize, (left + side - 0.5).floor());
    if i1 < 0.0 || j1 < 0.0 {
        return false;
    }
    let i1 = (i1 as usize).min(mask.height - 1);
    let j1 = (j1 as usize).min(mask.width - 1);
    (i0..=i1).any(|i| (j0..=j1).any(|j| mask.get(i, j)))
}

/// Random square crop of relative side `s ~ U(crop_scale_range)` whose window
/// touches the foreground, resized back to the input size.
pub fn crop_resize_foreground<R: Rng>(
    f: &Tensor<f32>,
    fg_mask: &BinaryMask,
    rng: &mut R,
    params: &HaopParams,
) -> Result<CropOutcome> {
    params.validate()?;
    let (_, h, w) = image_dims(f, fg_mask)?;
    let [lo, hi] = params.crop_scale_range;
    let s = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let side = s * h.min(w) as f64;
    let (max_top, max_left) = (h as f64 - side, w as f64 - side);
    let pos = |rng: &mut R, max: f64| if max > 0.0 { rng.gen_range(0.0..=max) } else { 0.0 };
    if fg_mask.count() == 0 {
        let window = (max_top / 2.0, max_left / 2.0, side);
        return Ok(CropOutcome {
            image: resize_window(f, window, h, w),
            window,
            fallback: true,
        });
    }
    let mut window = None;
    for _ in 0..64 {
        let (top, left) = (pos(rng, max_top), pos(rng, max_left));
        if window_hits(fg_mask, top, left, side) {
            window = Some((top, left, side));
            break;
        }
    }
    let window = window.unwrap_or_else(|| {
        // Center the window on a random foreground pixel.
        let fg: Vec<usize> = (0..h * w).filter(|&k| fg_mask.data[k] == 1).collect();
        let k = fg[rng.gen_range(0..fg.len())];
        let (ci, cj) = ((k / w) as f64 + 0.5, (k % w) as f64 + 0.5);
        (
            (ci - side / 2.0).clamp(0.0, max_top.max(0.0)),
            (cj - side / 2.0).clamp(0.0, max_left.max(0.0)),
            side,
        )
    });
    Ok(CropOutcome {
        image: resize_window(f, window, h, w),
        window,
        fallback: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HaopSample {
    /// Cropped and resized foreground.
    pub f_aug: Tensor<f32>,
    /// Frame with the dilated foreground region zeroed.
    pub b_aug: Tensor<f32>,
    /// The untouched input frame.
    pub target: Tensor<f32>,
    /// The zeroed region.
    pub removed: BinaryMask,
    pub fallback: bool,
}

pub fn haop_sample<R: Rng>(frame: &Tensor<f32>, fg_mask: &BinaryMask, rng: &mut R, params: &HaopParams) -> Result<HaopSample> {
    let (c, h, w) = image_dims(frame, fg_mask)?;
    let plane = h * w;
    let fg = Tensor::from_fn(&[c, h, w], |k| frame.data()[k] * fg_mask.data[k % plane] as f32);
    let crop = crop_resize_foreground(&fg, fg_mask, rng, params)?;
    let removed = dilate_background(fg_mask, params.dilation_radius);
    let b_aug = Tensor::from_fn(&[c, h, w], |k| {
        if removed.data[k % plane] == 1 {
            0.0
        } else {
            frame.data()[k]
        }
    });
    Ok(HaopSample {
        f_aug: crop.image,
        b_aug,
        target: frame.clone(),
        removed,
        fallback: crop.fallback,
    })
}
