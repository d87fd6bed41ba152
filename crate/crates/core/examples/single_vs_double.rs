//! Variance times mean cost per draw, double versus single randomization.
//! Single randomization pays for the full particle count at every level, which
//! overtakes its lower variance once `L_max` is large enough.

use unbiased_filter::observation::{generate_data, make_benchmark, Generation, ModelName};
use unbiased_filter::randomization::{
    make_truncated_plan, single_randomized_estimate, unbiased_estimate, RunOptions,
    UnbiasedEstimate,
};

fn work(est: &UnbiasedEstimate) -> f64 {
    let m = est.m as f64;
    let per_draw_variance = est.stderr().powi(2) * m;
    per_draw_variance * est.total_cost as f64 / m
}

fn main() -> unbiased_filter::Result<()> {
    let bm = make_benchmark(ModelName::Ou);
    let data = generate_data(&bm, 5, Generation::DEFAULT_EULER, 6)?;
    println!("{:>5} {:>12} {:>12}", "L_max", "double", "single");
    for l_max in [4, 6, 8] {
        let plan = make_truncated_plan(l_max, 10)?;
        let double = unbiased_estimate(&plan, &bm, &data, 4000, 1, RunOptions::threads(4))?;
        let single =
            single_randomized_estimate(&plan, &bm, &data, 4000, 1, RunOptions::threads(4))?;
        println!("{l_max:>5} {:>12.1} {:>12.1}", work(&double), work(&single));
    }
    Ok(())
}
