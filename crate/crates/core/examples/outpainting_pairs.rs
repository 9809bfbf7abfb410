//! Stage-one training pairs: a dilated-mask background and a randomly
//! cropped foreground, with the original frame as the target.

use std::path::PathBuf;

use idol::haop::{haop_sample, BinaryMask, HaopParams};
use idol::imageio::{contact_sheet, write_rgb};
use idol::synth::make_dataset;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> idol::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "haop_out".into()));
    let ds = make_dataset(5, 1, 4, 32, 32)?;
    let scene = &ds.train[0];
    let frame = scene.video.slice_leading(0, 1)?.reshape(&[3, 32, 32])?;
    let mask = BinaryMask::from_tensor(&scene.fg_mask.slice_leading(0, 1)?.reshape(&[32, 32])?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tiles = Vec::new();
    for radius in [0, 2, 4] {
        let p = HaopParams {
            dilation_radius: radius,
            ..HaopParams::default()
        };
        let s = haop_sample(&frame, &mask, &mut rng, &p)?;
        println!(
            "radius {radius}: foreground {} px, removed {} px, crop fallback {}",
            mask.count(),
            s.removed.count(),
            s.fallback
        );
        tiles.extend([s.f_aug, s.b_aug, s.target]);
    }
    write_rgb(&out.join("haop_pairs.png"), &contact_sheet(&tiles, 3)?)?;
    println!("wrote {}", out.display());
    Ok(())
}
