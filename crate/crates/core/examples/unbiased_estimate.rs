//! Doubly randomized estimate of the NLD filter mean with per-draw costs.

use std::collections::BTreeMap;

use unbiased_filter::coupled_pf::ResamplingScheme;
use unbiased_filter::observation::{generate_data, make_benchmark, Generation, ModelName};
use unbiased_filter::randomization::{
    default_n0, make_truncated_plan, unbiased_estimate, RunOptions,
};

fn main() -> unbiased_filter::Result<()> {
    let bm = make_benchmark(ModelName::Nld);
    let data = generate_data(&bm, 5, Generation::DEFAULT_EULER, 4)?;
    let plan =
        make_truncated_plan(6, default_n0(false))?.with_resampling(ResamplingScheme::Wasserstein);
    let est = unbiased_estimate(&plan, &bm, &data, 4000, 21, RunOptions::threads(4))?;
    for t in &est.per_time {
        println!("n = {}: {:.5} +- {:.5}", t.n, t.estimate, t.stderr);
    }
    let mut by_level: BTreeMap<u32, (usize, u64)> = BTreeMap::new();
    for d in &est.draws {
        let e = by_level.entry(d.l).or_default();
        e.0 += 1;
        e.1 += d.cost;
    }
    for (l, (count, cost)) in by_level {
        println!("l = {l}: {count} draws, {cost} steps");
    }
    println!(
        "total {} steps, expected {:.0} per draw",
        est.total_cost,
        plan.expected_cost(data.len())
    );
    Ok(())
}
