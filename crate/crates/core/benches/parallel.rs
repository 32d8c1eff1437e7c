//! Sequential vs data-parallel execution of the heavy stages.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use widthbev::encoding::{pixel_refpe, width_refpe};
use widthbev::exec::{self, Exec};
use widthbev::geometry::{Axis, PerturbKind};
use widthbev::harness::scene::demo_setup;
use widthbev::harness::sweep::{run_sweep, SweepConfig};
use widthbev::harness::DEFAULT_SEED;
use widthbev::pipeline::PipelineConfig;
use widthbev::width::refine;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn stages(c: &mut Criterion) {
    let (pipeline, rig, feat) = demo_setup(&PipelineConfig::default(), DEFAULT_SEED).expect("default setup");
    let out = pipeline.run(&rig, &feat).expect("forward");
    let mut group = c.benchmark_group("stages");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::new("refine", name), |b| {
            b.iter(|| exec::scoped(mode, || refine(&out.pooled, &feat, &pipeline.refine).unwrap()))
        });
        group.bench_function(BenchmarkId::new("width_refpe", name), |b| {
            b.iter(|| {
                exec::scoped(mode, || {
                    width_refpe(&feat, &rig, &pipeline.bins, &out.coefficients, &out.heights, &pipeline.width_pe_mlp, &pipeline.encoder).unwrap()
                })
            })
        });
        group.bench_function(BenchmarkId::new("pixel_refpe", name), |b| {
            b.iter(|| {
                exec::scoped(mode, || {
                    pixel_refpe(&feat, &rig, &pipeline.bins, &out.coefficients, &pipeline.width_pe_mlp, false, &pipeline.encoder).unwrap()
                })
            })
        });
        group.bench_function(BenchmarkId::new("forward", name), |b| b.iter(|| exec::scoped(mode, || pipeline.forward(&rig, &feat).unwrap())));
    }
    group.finish();
}

fn sweep(c: &mut Criterion) {
    let config = PipelineConfig {
        cameras: 2,
        height: 8,
        width: 22,
        channels: 32,
        bev_rows: 16,
        bev_cols: 16,
        ffn_hidden: 64,
        head_hidden: 32,
        ..PipelineConfig::default()
    };
    let (pipeline, rig, feat) = demo_setup(&config, DEFAULT_SEED).expect("small setup");
    let cfg =
        SweepConfig { kinds: vec![PerturbKind::Rotation], axes: vec![Axis::Y], sigmas: vec![0.0, 0.1], trials: 4, ..SweepConfig::new(DEFAULT_SEED) };
    let mut group = c.benchmark_group("sweep");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(name, |b| b.iter(|| exec::scoped(mode, || run_sweep(&pipeline, &rig, &feat, &cfg).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, stages, sweep);
criterion_main!(benches);
