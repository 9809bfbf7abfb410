//! Depth rendered through a colormap so it can be denoised like an image,
//! and decoded back.

use idol::synth::{colormap_rgb, depth_to_rgb, rgb_to_depth, Colormap};
use idol::Tensor;

fn main() -> idol::Result<()> {
    for d in [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0] {
        let hot = colormap_rgb(d, Colormap::Hot);
        println!("depth {d:.1} -> hot ({:.2}, {:.2}, {:.2})", hot[0], hot[1], hot[2]);
    }
    let n = 1024;
    let ramp = Tensor::from_fn(&[1, 1, n], |k| k as f32 / (n - 1) as f32);
    for cmap in [Colormap::Grayscale, Colormap::Hot] {
        let back = rgb_to_depth(&depth_to_rgb(&ramp, cmap)?, cmap)?;
        println!("{cmap}: max round-trip error {:.2e}", back.max_abs_diff(&ramp));
    }
    Ok(())
}
