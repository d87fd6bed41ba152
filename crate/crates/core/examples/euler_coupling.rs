//! Fine/coarse Euler chains driven by the same Brownian path.
//!
//! Prints the mean squared gap between the two chains at `t = 1` for levels
//! 1..=8. For the OU model it shrinks roughly like `2^-l`.

use unbiased_filter::observation::{make_benchmark, ModelName};
use unbiased_filter::rng::{RngStream, StreamKey};
use unbiased_filter::sde::{coupled_transition, CostCounter, Level};

fn main() -> unbiased_filter::Result<()> {
    let bm = make_benchmark(ModelName::Ou);
    let x0 = bm.diffusion.initial_state().to_vec();
    let paths = 20_000;
    println!("{:>3} {:>12} {:>10}", "l", "E|xf-xc|^2", "cost/path");
    for l in 1..=8 {
        let level = Level::new(l)?;
        let mut rng = RngStream::new(42, StreamKey::new(0, 0, l as u64));
        let mut cost = CostCounter::new();
        let mut gap = 0.0;
        for _ in 0..paths {
            let (f, c) = coupled_transition(&bm.diffusion, &x0, &x0, level, &mut rng, &mut cost)?;
            gap += (f[0] - c[0]).powi(2);
        }
        println!(
            "{l:>3} {:>12.3e} {:>10}",
            gap / paths as f64,
            cost.get() / paths
        );
    }
    Ok(())
}
