//! Cost the unbiased estimator needs to match the MLPF's MSE, on a small OU run.

use unbiased_filter::coupled_pf::ResamplingScheme;
use unbiased_filter::experiment::{compare_cost_ratio, mse_vs_cost};
use unbiased_filter::mlpf::{allocate, mlpf_replicates, DiffusionRegime};
use unbiased_filter::observation::{
    generate_data, kalman_reference, make_benchmark, Generation, ModelName,
};
use unbiased_filter::randomization::{make_truncated_plan, unbiased_estimate, RunOptions};

fn main() -> unbiased_filter::Result<()> {
    let bm = make_benchmark(ModelName::Ou);
    let data = generate_data(&bm, 5, Generation::Exact, 9)?;
    let truth = kalman_reference(&bm, &data)?
        .last()
        .expect("five observations")
        .mean;
    let scheme = ResamplingScheme::Wasserstein;

    let plan = make_truncated_plan(5, 10)?.with_resampling(scheme);
    let est = unbiased_estimate(&plan, &bm, &data, 40_000, 1, RunOptions::threads(4))?;
    let curve: Vec<(f64, f64)> = mse_vs_cost(&est.draws, truth, 20)
        .iter()
        .map(|(_, _, pt)| (pt.cost, pt.mse))
        .collect();

    let mut mlpf = Vec::new();
    for l in 1..=3 {
        let alloc = allocate(l, DiffusionRegime::ConstantB, 1.0)?;
        let runs = mlpf_replicates(&bm, &data, &alloc, scheme, 100, 2, 4)?;
        let mse = runs
            .iter()
            .map(|r| (r.value() - truth).powi(2))
            .sum::<f64>()
            / runs.len() as f64;
        mlpf.push((alloc.cost(data.len()) as f64, mse));
    }
    match compare_cost_ratio(&curve, &mlpf) {
        Ok(table) => {
            for r in &table.rows {
                println!(
                    "mse {:.2e}: mlpf {:.0}, unbiased {:.0}, ratio {:.2}",
                    r.mse, r.mlpf_cost, r.unbiased_cost, r.ratio
                );
            }
            println!("average ratio {:.2}", table.average);
        }
        Err(e) => println!("no overlap: {e}"),
    }
    Ok(())
}
