//! Motion-field pictures: each source location is colored by the direction
//! of its most likely displacement (hue) and its length (brightness).

use crate::error::{Error, Result};
use crate::losses::{cost_volume, motion_field, motion_temperature, MotionField};
use crate::tensor::Tensor;

/// Motion field between frames `l` and `l + 1` of `[L, D, H, W]` features.
pub fn frame_pair_field(feats: &Tensor<f32>, l: usize) -> Result<MotionField<f32>> {
    let (n, d, h, w) = match *feats.shape() {
        [n, d, h, w] => (n, d, h, w),
        _ => return Err(Error::shape("frame_pair_field", &[0, 0, 0, 0], feats.shape())),
    };
    if l + 1 >= n {
        return Err(Error::Index {
            context: "frame pair".into(),
            index: l,
            len: n.saturating_sub(1),
        });
    }
    let hwd = |f: usize| {
        let base = f * d * h * w;
        Tensor::from_fn(&[h, w, d], |k| {
            let (pix, c) = (k / d, k % d);
            feats.data()[base + c * h * w + pix]
        })
    };
    motion_field(&cost_volume(&hwd(l), &hwd(l + 1))?, motion_temperature(d))
}

/// Argmax displacement `(dy, dx)` for every source location of `[H, W, H, W]`.
pub fn argmax_displacements(field: &MotionField<f32>) -> Vec<(isize, isize)> {
    let s = field.values.shape();
    let (h, w) = (s[0], s[1]);
    let hw = h * w;
    field
        .values
        .data()
        .chunks(hw)
        .enumerate()
        .map(|(src, row)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc })
                .0;
            (
                (best / w) as isize - (src / w) as isize,
                (best % w) as isize - (src % w) as isize,
            )
        })
        .collect()
}

fn hsv_to_rgb(hue: f64, sat: f64, val: f64) -> [f64; 3] {
    let h6 = hue.rem_euclid(1.0) * 6.0;
    let c = val * sat;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r + m, g + m, b + m]
}

/// `[3, H, W]` picture of a motion field. Stationary locations are black.
pub fn motion_hue_map(field: &MotionField<f32>) -> Tensor<f32> {
    let s = field.values.shape();
    let (h, w) = (s[0], s[1]);
    let disp = argmax_displacements(field);
    let max_len = (((h - 1).pow(2) + (w - 1).pow(2)) as f64).sqrt().max(1.0);
    let mut out = Tensor::zeros(&[3, h, w]);
    for (k, &(dy, dx)) in disp.iter().enumerate() {
        let len = ((dy * dy + dx * dx) as f64).sqrt();
        if len == 0.0 {
            continue;
        }
        let hue = (dy as f64).atan2(dx as f64) / std::f64::consts::TAU;
        let rgb = hsv_to_rgb(hue, 1.0, 0.35 + 0.65 * len / max_len);
        for (c, v) in rgb.iter().enumerate() {
            out.data_mut()[c * h * w + k] = *v as f32;
        }
    }
    out
}

/// Nearest-neighbor enlargement of a `[C, H, W]` image by an integer factor.
pub fn upscale_nearest(img: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = match *img.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("upscale_nearest", &[0, 0, 0], img.shape())),
    };
    let f = factor.max(1);
    let (oh, ow) = (h * f, w * f);
    Ok(Tensor::from_fn(&[c, oh, ow], |k| {
        let (ch, rest) = (k / (oh * ow), k % (oh * ow));
        let (i, j) = (rest / ow / f, rest % ow / f);
        img.data()[(ch * h + i) * w + j]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Features that are one-hot in position, shifted right by one column
    /// between the two frames.
    fn shifted(h: usize, w: usize) -> Tensor<f32> {
        let d = h * w;
        Tensor::from_fn(&[2, d, h, w], |k| {
            let (f, rest) = (k / (d * h * w), k % (d * h * w));
            let (c, pix) = (rest / (h * w), rest % (h * w));
            let (i, j) = (pix / w, pix % w);
            let src = if f == 0 { j } else { (j + w - 1) % w };
            (c == i * w + src) as u8 as f32
        })
    }

    #[test]
    fn uniform_shift_is_recovered() {
        let field = frame_pair_field(&shifted(3, 4), 0).unwrap();
        let disp = argmax_displacements(&field);
        for (k, &(dy, dx)) in disp.iter().enumerate() {
            let expect = if k % 4 == 3 { -3 } else { 1 };
            assert_eq!((dy, dx), (0, expect), "location {k}");
        }
        let img = motion_hue_map(&field);
        assert_eq!(img.shape(), &[3, 3, 4]);
        // rightward motion is hue 0: red dominates
        assert!(img.data()[0] > img.data()[12] && img.data()[0] > img.data()[24]);
    }

    #[test]
    fn hue_wheel_primaries() {
        let close = |a: [f64; 3], b: [f64; 3]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]));
        assert!(close(hsv_to_rgb(1.0 / 3.0, 1.0, 1.0), [0.0, 1.0, 0.0]));
        assert!(close(hsv_to_rgb(2.0 / 3.0, 1.0, 1.0), [0.0, 0.0, 1.0]));
    }

    #[test]
    fn upscale_repeats_pixels() {
        let img = Tensor::from_vec(&[1, 1, 2], vec![0.25f32, 0.75]).unwrap();
        let up = upscale_nearest(&img, 2).unwrap();
        assert_eq!(up.data(), &[0.25, 0.25, 0.75, 0.75, 0.25, 0.25, 0.75, 0.75]);
    }

    #[test]
    fn last_frame_has_no_pair() {
        assert!(frame_pair_field(&shifted(2, 2), 1).is_err());
    }
}
