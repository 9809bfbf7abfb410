//! Renders a few synthetic scenes and writes contact sheets of the video,
//! colormapped depth and foreground mask.
//!
//! ```text
//! cargo run --release --example synthetic_scenes -- [out_dir]
//! ```

use std::path::PathBuf;

use idol::imageio::{contact_sheet, write_rgb};
use idol::synth::make_dataset;
use idol::Tensor;

fn frame(t: &Tensor<f32>, l: usize) -> idol::Result<Tensor<f32>> {
    let s = t.shape().to_vec();
    t.slice_leading(l, 1)?.reshape(&s[1..])
}

fn main() -> idol::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "scenes_out".into()));
    let ds = make_dataset(10, 0, 8, 32, 32)?;
    println!("{} train / {} eval scenes", ds.train.len(), ds.eval.len());
    for (i, s) in ds.eval.iter().enumerate() {
        let spec = &s.spec;
        println!(
            "eval {i}: {:?} color {:.2?} depth {:.2} bg {:.2?}",
            spec.sprite_shape, spec.sprite_color, spec.sprite_depth, spec.bg_gradient
        );
        let l = s.frames();
        let mut tiles = Vec::new();
        for f in 0..l {
            tiles.push(frame(&s.video, f)?);
        }
        for f in 0..l {
            tiles.push(frame(&s.depth_rgb, f)?);
        }
        for f in 0..l {
            let m = frame(&s.fg_mask, f)?;
            let (h, w) = (m.shape()[0], m.shape()[1]);
            tiles.push(Tensor::from_fn(&[3, h, w], |k| m.data()[k % (h * w)]));
        }
        write_rgb(&out.join(format!("scene_{i}.png")), &contact_sheet(&tiles, l)?)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
