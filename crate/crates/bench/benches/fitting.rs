use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use vocabscale_core::isoflops::{fit_power_laws, PowerLawOptions};
use vocabscale_core::parametric::{fit_params, ParamFitOptions};
use vocabscale_core::FertilityFit;

fn fits(c: &mut Criterion) {
    let records = vocabscale_bench::records();
    let optima = vocabscale_bench::optima(8);
    let fert = FertilityFit::paper_2024();

    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    group.bench_function("fit_params default grid", |b| {
        b.iter(|| fit_params(black_box(&records), &fert, &ParamFitOptions::default()))
    });
    group.bench_function("fit_power_laws 8 budgets", |b| {
        b.iter(|| fit_power_laws(black_box(&optima), &PowerLawOptions::default()))
    });
    group.finish();
}

criterion_group!(benches, fits);
criterion_main!(benches);
