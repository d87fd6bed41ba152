//! Exact OU filter means next to a single large particle filter.

use unbiased_filter::observation::{
    generate_data, kalman_reference, make_benchmark, Generation, ModelName,
};
use unbiased_filter::particle_filter::{batch_pf_run, BatchSchedule};
use unbiased_filter::sde::Level;

fn main() -> unbiased_filter::Result<()> {
    let bm = make_benchmark(ModelName::Ou);
    let data = generate_data(&bm, 10, Generation::Exact, 1)?;
    let kalman = kalman_reference(&bm, &data)?;
    let schedule = BatchSchedule::explicit(vec![50_000])?;
    let (pf, cost) = batch_pf_run(&bm, &data, &schedule, 0, Level::new(6)?, 7, 0)?;
    println!("{:>3} {:>9} {:>10} {:>10}", "k", "y", "kalman", "pf(l=6)");
    for (k, (m, e)) in kalman.iter().zip(&pf).enumerate() {
        println!(
            "{:>3} {:>9.4} {:>10.5} {:>10.5}",
            k + 1,
            data.y(k + 1),
            m.mean,
            e.combined_all()
        );
    }
    println!("pf cost: {} Euler steps", cost.get());
    Ok(())
}
