use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use pathpatch::compile::{compile, plan_split, CompileOptions};
use pathpatch::config::{CompileConfig, LabelPolicy};
use pathpatch::dataset::{ItemMode, ItemTarget, ManifestDataset};
use pathpatch::augment::{AugmentConfig, Normalize};
use pathpatch::manifest::{verify, FindingKind, Manifest, VerifyOptions, MANIFEST_FILE};
use pathpatch::presets::DatasetKind;
use pathpatch::sampler::{SampleSpec, Target};
use pathpatch::split::{Split, SplitPlan, SplitStrategy};
use pathpatch::synth::{write_synthetic_corpus, SynthSpec};
use pathpatch::{Error, Exec, Raster};

fn corpus(dir: &Path, spec: SynthSpec) {
    write_synthetic_corpus(dir, &spec, Exec::from_jobs(4)).unwrap();
}

fn random_config(root: &Path, patches: usize) -> CompileConfig {
    CompileConfig {
        name: "synth".into(),
        kind: DatasetKind::Generic,
        corpus_root: root.to_path_buf(),
        sampling: SampleSpec::random(patches, 100.0, 64),
        split: SplitPlan::new([0.8, 0.1, 0.1], SplitStrategy::SlideLevel, 0),
        labels: LabelPolicy::Organ {
            classes: vec!["kidney".into(), "liver".into(), "lung".into()],
            merge: BTreeMap::new(),
        },
        filters: BTreeMap::new(),
        rebalance: false,
        tissue: Default::default(),
        augment: None,
        seed: 7,
        jobs: 1,
        emit_tissue_masks: false,
    }
}

fn opts(out: &Path, jobs: usize) -> CompileOptions {
    CompileOptions {
        out: out.to_path_buf(),
        exec: Exec::from_jobs(jobs),
        force: false,
    }
}

#[test]
fn counts_follow_sampler_and_split_arithmetic() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("corpus");
    corpus(&root, SynthSpec { slides: 10, ..SynthSpec::default() });
    let m = compile(&random_config(&root, 50), &opts(&tmp.path().join("out"), 4)).unwrap();
    let h = &m.header;
    assert_eq!((h.counts.train, h.counts.val, h.counts.test), (400, 50, 50));
    assert_eq!((h.slide_counts.train, h.slide_counts.val, h.slide_counts.test), (8, 1, 1));
    assert_eq!(h.mpp, 100.0 / 64.0);
    let stats = h.stats.unwrap();
    assert_eq!(stats.count, 400 * 64 * 64);

    let report = verify(&m, VerifyOptions { hash: true });
    assert!(report.is_clean(), "{:?}", report.findings);

    let first = m.records[0].path.clone().unwrap();
    assert!(first.starts_with(&format!("{}/", m.records[0].split)));
    let reloaded = Manifest::load(&tmp.path().join("out/synth")).unwrap();
    assert_eq!(reloaded.records, m.records);
}

#[test]
fn output_is_invariant_to_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("corpus");
    corpus(&root, SynthSpec { slides: 6, ..SynthSpec::default() });
    let cfg = random_config(&root, 10);
    let mut manifests = Vec::new();
    for jobs in [1, 3, 8] {
        let out = tmp.path().join(format!("out{jobs}"));
        compile(&cfg, &opts(&out, jobs)).unwrap();
        manifests.push(std::fs::read(out.join("synth").join(MANIFEST_FILE)).unwrap());
    }
    assert!(manifests.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn existing_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("corpus");
    corpus(&root, SynthSpec { slides: 3, ..SynthSpec::default() });
    let cfg = random_config(&root, 5);
    let out = tmp.path().join("out");
    compile(&cfg, &opts(&out, 1)).unwrap();
    assert!(matches!(compile(&cfg, &opts(&out, 1)), Err(Error::ConfigConflict(_))));
    let mut o = opts(&out, 1);
    o.force = true;
    compile(&cfg, &o).unwrap();
}

#[test]
fn failure_removes_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("corpus");
    corpus(&root, SynthSpec { slides: 3, ..SynthSpec::default() });
    let mut cfg = random_config(&root, 5);
    cfg.labels = LabelPolicy::Organ {
        classes: vec!["kidney".into()],
        merge: BTreeMap::new(),
    };
    let out = tmp.path().join("out");
    let err = compile(&cfg, &opts(&out, 2)).unwrap_err();
    assert!(matches!(err, Error::Slide { .. }), "{err}");
    assert!(!out.join("synth").exists());
}

#[test]
fn verify_detects_injected_faults() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("corpus");
    corpus(&root, SynthSpec { slides: 4, ..SynthSpec::default() });
    let m = compile(&random_config(&root, 5), &opts(&tmp.path().join("out"), 2)).unwrap();

    let mut edited = m.clone();
    let other = if edited.records[0].split == Split::Train { Split::Test } else { Split::Train };
    edited.records[0].split = other;
    let kinds: BTreeSet<FindingKind> = verify(&edited, VerifyOptions::default()).findings.iter().map(|f| f.kind).collect();
    assert!(kinds.contains(&FindingKind::SlideInTwoSplits));
    assert!(verify(&edited, VerifyOptions::default()).findings.iter().any(|f| f.detail.contains("slide in two splits")));

    std::fs::remove_file(m.resolve(m.records[3].path.as_ref().unwrap())).unwrap();
    let r = verify(&m, VerifyOptions::default());
    assert!(r.findings.iter().any(|f| f.kind == FindingKind::MissingFile && f.detail.contains("missing file")));
}

#[test]
fn camelyon_rebalanced_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("corpus");
    corpus(
        &root,
        SynthSpec {
            slides: 6,
            size_px: 512,
            tumor_annotations: true,
            ..SynthSpec::default()
        },
    );
    let cfg = CompileConfig {
        sampling: SampleSpec::grid(None, 64.0, 32),
        split: SplitPlan::new([0.75, 0.25, 0.0], SplitStrategy::SourceConstrained, 0),
        labels: LabelPolicy::Camelyon { annotation_tau: 1.0 },
        rebalance: true,
        ..random_config(&root, 1)
    };
    let m = compile(&cfg, &opts(&tmp.path().join("out"), 4)).unwrap();
    for (split, classes) in &m.header.class_counts {
        let counts: BTreeSet<u64> = classes.values().copied().collect();
        assert_eq!(counts.len(), 1, "{split}: {classes:?}");
    }
    assert!(m.header.counts.test > 0);
    let test_slides: BTreeSet<&str> = m.split_records(Split::Test).map(|r| r.slide_id.as_str()).collect();
    assert!(test_slides.iter().all(|s| *s == "slide_0002" || *s == "slide_0005"));
    assert!(verify(&m, VerifyOptions::default()).is_clean());
}

#[test]
fn segmentation_masks_are_cocropped() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("corpus");
    corpus(
        &root,
        SynthSpec {
            slides: 6,
            size_px: 512,
            segmentation_masks: true,
            ..SynthSpec::default()
        },
    );
    let cfg = CompileConfig {
        sampling: SampleSpec::grid(None, 128.0, 64),
        split: SplitPlan::new([0.7, 0.15, 0.15], SplitStrategy::StratifiedIsup, 0),
        labels: LabelPolicy::Mask,
        filters: BTreeMap::from([("provider".to_string(), "Radboud".to_string())]),
        ..random_config(&root, 1)
    };
    let m = compile(&cfg, &opts(&tmp.path().join("out"), 4)).unwrap();
    assert!(m.records.iter().all(|r| r.metadata["provider"] == "Radboud"));
    assert_eq!(m.header.mask_labels.as_deref(), Some(&[0, 1, 2, 3, 4, 5][..]));
    for r in &m.records {
        let Target::Mask { file, histogram } = &r.target else { panic!("mask target expected") };
        assert!(file.ends_with("_mask.png"));
        let mask = Raster::load_png(&m.resolve(file)).unwrap();
        assert_eq!(histogram.iter().sum::<u64>(), 64 * 64);
        assert!(mask.value_set().iter().all(|v| *v <= 5));
    }
    assert!(verify(&m, VerifyOptions { hash: true }).is_clean());

    let ds = ManifestDataset::open(&m.path(), Some(Split::Train)).unwrap();
    let item = ds.get_item(0, &ItemMode::Eval(Normalize::identity())).unwrap();
    assert_eq!(item.shape, [3, 64, 64]);
    assert!(matches!(item.target, ItemTarget::Mask { height: 64, width: 64, .. }));
    let aug = AugmentConfig {
        segmentation_mode: true,
        crop_px: 32,
        ..AugmentConfig::default()
    };
    let mode = ItemMode::Train { augment: aug, epoch_seed: 3 };
    let a = ds.get_item(0, &mode).unwrap();
    assert_eq!(a, ds.get_item(0, &mode).unwrap());
    assert_eq!(a.shape, [3, 32, 32]);
}

#[test]
fn dataset_access() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("corpus");
    corpus(&root, SynthSpec { slides: 4, size_px: 512, ..SynthSpec::default() });
    let mut cfg = random_config(&root, 4);
    cfg.kind = DatasetKind::Generic;
    cfg.split = SplitPlan::new([0.5, 0.5, 0.0], SplitStrategy::SlideLevel, 0);
    let m = compile(&cfg, &opts(&tmp.path().join("out"), 2)).unwrap();

    let test = ManifestDataset::open(&m.path(), Some(Split::Test)).unwrap();
    assert!(test.is_empty());
    let val = ManifestDataset::open(&m.path(), Some(Split::Val)).unwrap();
    assert_eq!(val.len() as u64, m.header.counts.val);
    assert!(matches!(val.get_item(val.len(), &ItemMode::Eval(Normalize::identity())), Err(Error::IndexOutOfRange { .. })));

    let off = AugmentConfig {
        image_size: 64,
        rrc_scale_min: 1.0,
        rrc_ratio: [1.0, 1.0],
        jitter_p: 0.0,
        blur_p: 0.0,
        hflip_p: 0.0,
        vflip_p: 0.0,
        normalize: Normalize::HALF,
        ..AugmentConfig::default()
    };
    let item = val.get_item(0, &ItemMode::Train { augment: off, epoch_seed: 1 }).unwrap();
    let eval = val.get_item(0, &ItemMode::Eval(Normalize::HALF)).unwrap();
    assert_eq!(item, eval);
    assert!(matches!(item.target, ItemTarget::Class(_)));
    assert!(ManifestDataset::open(&tmp.path().join("missing.jsonl"), None).is_err());
}

#[test]
fn split_planning_without_compiling() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("corpus");
    corpus(&root, SynthSpec { slides: 10, size_px: 64, ..SynthSpec::default() });
    let map = plan_split(&random_config(&root, 1), Exec::Sequential).unwrap();
    let mut c = [0; 3];
    for s in map.values() {
        c[*s as usize - 1] += 1;
    }
    assert_eq!(c, [8, 1, 1]);
}
