//! Cost volume and motion field between two frames of features whose
//! content shifts one column to the right.

use idol::inspect::{argmax_displacements, frame_pair_field};
use idol::losses::motion_consistency_loss;
use idol::Tensor;

fn main() -> idol::Result<()> {
    let (h, w) = (3, 4);
    let d = h * w;
    // one-hot features: location (i, j) of frame 1 carries the code of (i, j-1) in frame 0
    let feats = Tensor::<f32>::from_fn(&[2, d, h, w], |k| {
        let (f, rest) = (k / (d * h * w), k % (d * h * w));
        let (c, pix) = (rest / (h * w), rest % (h * w));
        let (i, j) = (pix / w, pix % w);
        let src = if f == 0 { j } else { (j + w - 1) % w };
        (c == i * w + src) as u8 as f32
    });
    let field = frame_pair_field(&feats, 0)?;
    let row: Vec<String> = field.values.data()[..h * w].iter().map(|p| format!("{p:.3}")).collect();
    println!("motion field row for (0,0): [{}]", row.join(", "));
    println!("argmax displacements (dy, dx):");
    for i in 0..h {
        let disp = argmax_displacements(&field);
        println!("  {:?}", &disp[i * w..(i + 1) * w]);
    }
    let still = Tensor::from_fn(feats.shape(), |k| feats.data()[k % (d * h * w)]);
    let l = motion_consistency_loss(std::slice::from_ref(&feats), &[still], &[0.3])?;
    println!("motion consistency, moving vs still: {:.4}", l[0]);
    let l = motion_consistency_loss(std::slice::from_ref(&feats), std::slice::from_ref(&feats), &[0.3])?;
    println!("motion consistency, identical: {}", l[0]);
    Ok(())
}
