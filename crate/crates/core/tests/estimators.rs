mod common;

use common::{chi2_pvalue, ci_overlap, mean_se, par_map};
use unbiased_filter::coupled_pf::{batch_cpf_run, ResamplingScheme};
use unbiased_filter::mlpf::{allocate, mlpf_replicates, DiffusionRegime};
use unbiased_filter::observation::{
    generate_data, kalman_reference, make_benchmark, Generation, ModelName,
};
use unbiased_filter::particle_filter::{batch_pf_run, BatchSchedule};
use unbiased_filter::randomization::{
    draw_single_randomized, draw_xi, make_constant_diffusion_plan, make_theory_plan,
    make_truncated_plan, run_replicates, FailurePolicy, Pmf, RunOptions, XiSample,
};
use unbiased_filter::rng::{RngStream, StreamKey};
use unbiased_filter::sde::Level;
use unbiased_filter::FilterError;

fn constant_draw(key: u64, l: u32, p: u32, value: f64) -> XiSample {
    XiSample {
        replicate: key,
        l,
        p,
        trace: vec![value],
        weight: 1.0,
        cost: 1,
        retries: 0,
    }
}

fn sample_counts(pmf: &Pmf, draws: usize, seed: u64) -> (Vec<u64>, Vec<f64>) {
    let mut rng = RngStream::new(seed, StreamKey::new(0, 0, 0));
    let cells = pmf.table().len();
    let mut counts = vec![0u64; cells + 1];
    for _ in 0..draws {
        let k = pmf.sample(&mut rng) as usize;
        counts[k.min(cells)] += 1;
    }
    let mut probs: Vec<f64> = (0..cells).map(|k| pmf.mass(k as u32)).collect();
    probs.push((1.0 - probs.iter().sum::<f64>()).max(0.0));
    (counts, probs)
}

#[test]
fn pmf_sampling_matches_masses() {
    let truncated = make_truncated_plan(6, 10).unwrap();
    let theory = make_theory_plan(2.0, 0.5, 10).unwrap();
    let constant = make_constant_diffusion_plan(10).unwrap();
    let pmfs = [
        truncated.pmf_level.clone(),
        truncated.batch_pmf(0).unwrap().clone(),
        truncated.batch_pmf(4).unwrap().clone(),
        theory.pmf_level.clone(),
        theory.batch_pmf(0).unwrap().clone(),
        constant.pmf_level.clone(),
    ];
    for (i, pmf) in pmfs.iter().enumerate() {
        let (counts, probs) = sample_counts(pmf, 1_000_000, i as u64);
        let p = chi2_pvalue(&counts, &probs);
        assert!(p > 0.001, "pmf {i}: p = {p}");
    }
}

#[test]
fn trace_matches_offline_run_on_truncated_data() {
    let bm = make_benchmark(ModelName::Nld);
    let data = generate_data(&bm, 6, Generation::DEFAULT_EULER, 21).unwrap();
    let plan = make_truncated_plan(5, 50)
        .unwrap()
        .with_resampling(ResamplingScheme::Wasserstein);
    for (l, p) in [(0, 0), (0, 3), (1, 0), (2, 2), (4, 1)] {
        let online = draw_xi(&plan, &bm, &data, l, p, 5, 17).unwrap();
        for k in 1..=data.len() {
            let offline = draw_xi(&plan, &bm, &data.truncated(k), l, p, 5, 17).unwrap();
            assert_eq!(
                online.trace[k - 1].to_bits(),
                offline.xi().to_bits(),
                "(l, p) = ({l}, {p}), k = {k}"
            );
        }
    }
}

#[test]
fn level_draw_with_p_zero_is_scaled_increment() {
    let bm = make_benchmark(ModelName::Ou);
    let data = generate_data(&bm, 4, Generation::DEFAULT_EULER, 22).unwrap();
    let plan = make_truncated_plan(4, 10).unwrap();
    let draw = draw_xi(&plan, &bm, &data, 2, 0, 8, 3).unwrap();
    let (direct, _) = batch_cpf_run(
        &bm,
        &data,
        &plan.schedule,
        0,
        Level::new(2).unwrap(),
        plan.resampling,
        8,
        3,
    )
    .unwrap();
    let expected = direct.last().unwrap().increment(0) / plan.prob_batch(2, 0);
    assert_eq!(draw.xi().to_bits(), expected.to_bits());
    assert_eq!(draw.weight, 1.0 / plan.prob_level(2));
}

#[test]
fn single_randomized_level_zero_is_plain_filter() {
    let bm = make_benchmark(ModelName::Ou);
    let data = generate_data(&bm, 4, Generation::DEFAULT_EULER, 23).unwrap();
    let plan = make_truncated_plan(4, 10).unwrap();
    let draw = draw_single_randomized(&plan, &bm, &data, 0, 9, 4).unwrap();
    let schedule = BatchSchedule::explicit(vec![10]).unwrap();
    let (direct, cost) =
        batch_pf_run(&bm, &data, &schedule, 0, Level::new(0).unwrap(), 9, 4).unwrap();
    assert_eq!(
        draw.xi().to_bits(),
        direct.last().unwrap().combined_all().to_bits()
    );
    assert_eq!(draw.cost, cost.get());
}

#[test]
fn permissive_retries_are_logged_and_strict_reports_replicate() {
    let plan = make_truncated_plan(3, 10).unwrap();
    let flaky = |key: u64, l: u32, p: u32| {
        let attempt = key >> 40;
        let replicate = key & ((1 << 40) - 1);
        if replicate.is_multiple_of(3) && attempt < 2 {
            return Err(FilterError::DegenerateWeights { time: 1 });
        }
        Ok(constant_draw(key, l, p, 1.0))
    };
    let permissive = RunOptions {
        threads: 2,
        failure: FailurePolicy::Permissive { max_retries: 3 },
    };
    let draws = run_replicates(&plan, 30, 1, permissive, flaky).unwrap();
    for d in &draws {
        assert_eq!(d.retries, if d.replicate % 3 == 0 { 2 } else { 0 });
    }
    let tight = RunOptions {
        threads: 2,
        failure: FailurePolicy::Permissive { max_retries: 1 },
    };
    assert!(run_replicates(&plan, 30, 1, tight, flaky).is_err());
    match run_replicates(&plan, 30, 1, RunOptions::threads(2), flaky) {
        Err(FilterError::ReplicateFailed { replicate, .. }) => assert_eq!(replicate % 3, 0),
        other => panic!("expected ReplicateFailed, got {other:?}"),
    }
}

#[test]
fn permissive_retry_keeps_level_and_batch() {
    let plan = make_truncated_plan(5, 10).unwrap();
    let strict = run_replicates(&plan, 50, 2, RunOptions::threads(1), |key, l, p| {
        Ok(constant_draw(key, l, p, 0.0))
    })
    .unwrap();
    let permissive = RunOptions {
        threads: 1,
        failure: FailurePolicy::Permissive { max_retries: 1 },
    };
    let retried = run_replicates(&plan, 50, 2, permissive, |key, l, p| {
        if key >> 40 == 0 {
            return Err(FilterError::DegenerateWeights { time: 0 });
        }
        Ok(constant_draw(key, l, p, 0.0))
    })
    .unwrap();
    for (a, b) in strict.iter().zip(&retried) {
        assert_eq!((a.l, a.p), (b.l, b.p));
        assert_eq!(b.retries, 1);
    }
}

#[test]
fn mlpf_telescopes_to_fine_filter() {
    let bm = make_benchmark(ModelName::Ou);
    let data = generate_data(&bm, 5, Generation::DEFAULT_EULER, 24).unwrap();
    let alloc = allocate(3, DiffusionRegime::ConstantB, 16.0).unwrap();
    let big = BatchSchedule::explicit(vec![100_000]).unwrap();
    let fine: Vec<f64> = par_map(8, |r| {
        batch_pf_run(&bm, &data, &big, 0, Level::new(3).unwrap(), 6, r)
            .unwrap()
            .0
            .last()
            .unwrap()
            .combined_all()
    });
    let reference = mean_se(&fine);
    for scheme in [ResamplingScheme::Maximal, ResamplingScheme::Wasserstein] {
        let runs = mlpf_replicates(&bm, &data, &alloc, scheme, 400, 5, common::threads()).unwrap();
        let values: Vec<f64> = runs.iter().map(|r| r.value()).collect();
        let est = mean_se(&values);
        assert!(
            ci_overlap(est, reference),
            "{scheme:?}: {est:?} vs {reference:?}"
        );
    }
}

#[test]
fn mlpf_error_decays_with_level() {
    let bm = make_benchmark(ModelName::Ou);
    let data = generate_data(&bm, 5, Generation::Exact, 25).unwrap();
    let truth = kalman_reference(&bm, &data).unwrap().last().unwrap().mean;
    let mse: Vec<f64> = (1..=5)
        .map(|l| {
            let alloc = allocate(l, DiffusionRegime::ConstantB, 1.0).unwrap();
            let runs = mlpf_replicates(
                &bm,
                &data,
                &alloc,
                ResamplingScheme::Wasserstein,
                100,
                30 + l as u64,
                common::threads(),
            )
            .unwrap();
            runs.iter()
                .map(|r| (r.value() - truth).powi(2))
                .sum::<f64>()
                / runs.len() as f64
        })
        .collect();
    let inversions = mse.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(inversions <= 1, "mse by level {mse:?}");
    assert!(mse[4] < mse[0], "mse by level {mse:?}");
}
