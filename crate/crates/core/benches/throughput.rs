use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pathpatch::augment::{apply_train, AugRng, AugmentConfig};
use pathpatch::compile::{compile, CompileOptions};
use pathpatch::config::{CompileConfig, LabelPolicy};
use pathpatch::manifest::{manifest_stats, Manifest};
use pathpatch::presets::DatasetKind;
use pathpatch::sampler::SampleSpec;
use pathpatch::split::{SplitPlan, SplitStrategy};
use pathpatch::stats::StatsMode;
use pathpatch::synth::{write_synthetic_corpus, SynthSpec};
use pathpatch::{Exec, Raster};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn modes() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel { threads: 0 })]
}

fn config(root: &std::path::Path) -> CompileConfig {
    CompileConfig {
        name: "bench".into(),
        kind: DatasetKind::Generic,
        corpus_root: root.to_path_buf(),
        sampling: SampleSpec::random(20, 100.0, 64),
        split: SplitPlan::new([0.8, 0.1, 0.1], SplitStrategy::SlideLevel, 0),
        labels: LabelPolicy::Organ {
            classes: vec!["kidney".into(), "liver".into(), "lung".into()],
            merge: BTreeMap::new(),
        },
        filters: BTreeMap::new(),
        rebalance: false,
        tissue: Default::default(),
        augment: None,
        seed: 1,
        jobs: 1,
        emit_tissue_masks: false,
    }
}

fn bench_compile(c: &mut Criterion) {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("corpus");
    write_synthetic_corpus(&root, &SynthSpec { slides: 12, ..SynthSpec::default() }, Exec::default()).unwrap();
    let cfg = config(&root);
    let mut g = c.benchmark_group("compile_12_slides");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_function(name, |b| {
            b.iter(|| {
                let opts = CompileOptions {
                    out: tmp.path().join(format!("out_{name}")),
                    exec,
                    force: true,
                };
                black_box(compile(&cfg, &opts).unwrap())
            })
        });
    }
    g.finish();

    let opts = CompileOptions {
        out: tmp.path().join("stats"),
        exec: Exec::default(),
        force: true,
    };
    let m: Manifest = compile(&cfg, &opts).unwrap();
    let mut g = c.benchmark_group("manifest_stats");
    for (name, exec) in modes() {
        g.bench_function(name, |b| b.iter(|| black_box(manifest_stats(&m, None, StatsMode::PerPixel, exec).unwrap())));
    }
    g.finish();
}

fn bench_augment(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let images: Vec<Raster<u8>> = (0..64).map(|_| Raster::from_fn(256, 256, 3, |_, _, _| rng.random())).collect();
    let cfg = AugmentConfig::default();
    let mut g = c.benchmark_group("augment_batch");
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::new(name, images.len()), &images, |b, imgs| {
            b.iter(|| {
                let idx: Vec<usize> = (0..imgs.len()).collect();
                black_box(exec.map(&idx, |&i| apply_train(&imgs[i], None, &cfg, &AugRng::new(0, i as u64)).unwrap()))
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_compile, bench_augment);
criterion_main!(benches);
