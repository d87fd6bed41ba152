//! Maximal-coupling and Wasserstein resampling of the same pair of clouds,
//! then the variance of the level increment under each scheme.

use unbiased_filter::coupled_pf::{
    maximal_coupling_resample, wasserstein_resample, ResamplingScheme,
};
use unbiased_filter::experiment::{variance_by_level, variance_slope};
use unbiased_filter::observation::{generate_data, make_benchmark, Generation, ModelName};
use unbiased_filter::rng::{RngStream, StreamKey};

fn main() -> unbiased_filter::Result<()> {
    let fine = [0.1, -0.4, 0.9, 1.3];
    let coarse = [0.2, -0.5, 1.1, 1.0];
    let wf = [0.1, 0.2, 0.3, 0.4];
    let wc = [0.25, 0.25, 0.25, 0.25];
    let mut rng = RngStream::new(5, StreamKey::new(0, 0, 0));
    let (pairs, diag) = maximal_coupling_resample(&wf, &wc, 8, &mut rng)?;
    println!(
        "maximal: alpha = {:.2}, matched = {:.2}, pairs {pairs:?}",
        diag.alpha, diag.matched_fraction
    );
    let pairs = wasserstein_resample(&fine, &wf, &coarse, &wc, 1, 8, &mut rng)?;
    println!("wasserstein: pairs {pairs:?}");

    let bm = make_benchmark(ModelName::Ou);
    let data = generate_data(&bm, 5, Generation::DEFAULT_EULER, 2)?;
    for scheme in [ResamplingScheme::Maximal, ResamplingScheme::Wasserstein] {
        let table = variance_by_level(&bm, &data, 1..=5, 100, 200, scheme, 9, 4)?;
        let vars: Vec<String> = table
            .iter()
            .map(|r| format!("{:.2e}", r.variance))
            .collect();
        println!(
            "{scheme:?}: var by level {vars:?}, slope {:.2}",
            variance_slope(&table[1..])
        );
    }
    Ok(())
}
