//! Linear noise schedule: how much signal survives at each timestep, and
//! the exact inversion of the forward process given the true noise.

use idol::schedule::{forward_diffuse, make_linear_schedule, predict_z0};
use idol::Tensor;

fn main() -> idol::Result<()> {
    let sched = make_linear_schedule(200, 1e-4, 0.02)?;
    println!("  t     beta    alpha_bar  signal  sigma");
    for t in [0, 24, 49, 99, 149, 199] {
        let ab = sched.alpha_bar()[t];
        println!("{t:>3}  {:.5}  {ab:.5}    {:.3}   {:.4}", sched.beta()[t], ab.sqrt(), sched.sigma(t));
    }
    let z0 = Tensor::<f64>::from_fn(&[4], |k| k as f64 - 1.5);
    let eps = Tensor::<f64>::from_fn(&[4], |k| 0.3 * k as f64);
    let zt = forward_diffuse(&z0, 120, &eps, &sched)?;
    let back = predict_z0(&zt, &eps, 120, &sched)?;
    println!("z0 {:?}\nzt {:?}\nrecovered {:?}", z0.data(), zt.data(), back.data());
    Ok(())
}
