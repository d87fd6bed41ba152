//! Batch particle filter: one run with batches `N_0, N_1 - N_0, ...` gives the
//! estimate for every prefix size `N_p` at once, and the prefix differences
//! that the randomized estimator divides by `P_P(p)`.

use unbiased_filter::observation::{generate_data, make_benchmark, Generation, ModelName};
use unbiased_filter::particle_filter::{batch_pf_run, BatchSchedule};
use unbiased_filter::sde::Level;

fn main() -> unbiased_filter::Result<()> {
    let bm = make_benchmark(ModelName::Nld);
    let data = generate_data(&bm, 5, Generation::DEFAULT_EULER, 3)?;
    let schedule = BatchSchedule::doubling(50)?;
    let p = 6;
    let (trace, cost) = batch_pf_run(&bm, &data, &schedule, p, Level::new(3)?, 11, 0)?;
    let last = trace.last().expect("five observations");
    println!(
        "{:>3} {:>6} {:>12} {:>13}",
        "p", "N_p", "estimate", "prefix diff"
    );
    for q in 0..=p as usize {
        println!(
            "{q:>3} {:>6} {:>12.6} {:>13.3e}",
            schedule.n(q as u32),
            last.combined(q),
            last.prefix_difference(q)
        );
    }
    println!("cost: {} Euler steps", cost.get());
    Ok(())
}
