//! Multilevel particle filter: allocation, per-level increments and MSE
//! against the Kalman filter as `L` grows.

use unbiased_filter::coupled_pf::ResamplingScheme;
use unbiased_filter::mlpf::{allocate, mlpf_estimate, mlpf_replicates, DiffusionRegime};
use unbiased_filter::observation::{
    generate_data, kalman_reference, make_benchmark, Generation, ModelName,
};

fn main() -> unbiased_filter::Result<()> {
    let bm = make_benchmark(ModelName::Ou);
    let data = generate_data(&bm, 5, Generation::Exact, 8)?;
    let truth = kalman_reference(&bm, &data)?
        .last()
        .expect("five observations")
        .mean;
    let regime = DiffusionRegime::for_model(&bm);

    let alloc = allocate(4, regime, 1.0)?;
    let one = mlpf_estimate(&bm, &data, &alloc, ResamplingScheme::Wasserstein, 3, 0)?;
    for lv in &one.levels {
        println!(
            "l = {}: M = {:>4}, term {:+.5}",
            lv.l,
            lv.particles,
            lv.trace.last().unwrap()
        );
    }
    println!("estimate {:.5}, kalman {truth:.5}\n", one.value());

    println!("{:>2} {:>10} {:>10}", "L", "cost", "mse");
    for l in 1..=5 {
        let alloc = allocate(l, regime, 1.0)?;
        let runs = mlpf_replicates(
            &bm,
            &data,
            &alloc,
            ResamplingScheme::Wasserstein,
            100,
            10 + l as u64,
            4,
        )?;
        let mse = runs
            .iter()
            .map(|r| (r.value() - truth).powi(2))
            .sum::<f64>()
            / runs.len() as f64;
        println!("{l:>2} {:>10} {mse:>10.2e}", alloc.cost(data.len()));
    }
    Ok(())
}
