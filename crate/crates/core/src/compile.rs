//! End-to-end dataset compilation.
//!
//! Slides are scanned and sorted by id, split, then processed one slide per
//! task: tissue detection, sampling and labeling, and later patch export.
//! Every random draw is keyed by `(seed, slide id)` and all merges happen in
//! slide order, so the output does not depend on the worker count.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::config::{CompileConfig, LabelPolicy};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::extract_normalized_patch;
use crate::manifest::{class_label, sha256_hex, summarize, Manifest, ManifestHeader, MANIFEST_CSV, SCHEMA_VERSION, TOOL_VERSION};
use crate::rng::keyed_rng;
use crate::sampler::{assign_label_camelyon, co_crop_mask, sample_slide, Annotation, CamelyonLabel, PatchRecord, Target, MASK_CLASSES};
use crate::slide::{open_slide, Slide, SlideKind, SLIDE_DESCRIPTOR};
use crate::split::{rebalance_classes, split_slides, Split, SplitMap};
use crate::stats::{merge_all, ChannelMoments};
use crate::tissue::tissue_mask;

pub const TISSUE_DIR: &str = "tissue";

#[derive(Debug, Clone)]
pub struct CompileOptions {
    /// Output root; the dataset is written to `out/{name}`.
    pub out: PathBuf,
    pub exec: Exec,
    /// Replace an existing dataset directory.
    pub force: bool,
}

/// Finds slide descriptors under `root`: pyramid directories holding
/// `slide.json` and PNG files with a JSON sidecar. Sorted by path.
pub fn scan_corpus(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(SLIDE_DESCRIPTOR).is_file() {
            found.push(dir.clone());
        }
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
                && (path.with_extension("json").is_file() || PathBuf::from(format!("{}.json", path.display())).is_file())
            {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

fn keep(slide: &Slide, filters: &BTreeMap<String, String>) -> bool {
    filters.iter().all(|(k, v)| slide.meta(k) == Some(v.as_str()))
}

/// Opens every RGB slide in the corpus that passes the filters, sorted by id.
pub fn load_corpus(cfg: &CompileConfig, exec: Exec) -> Result<Vec<Slide>> {
    let paths = scan_corpus(&cfg.corpus_root)?;
    let opened = exec.try_map(&paths, |p| open_slide(p))?;
    let mut slides: Vec<Slide> = opened
        .into_iter()
        .filter(|s| s.kind() == SlideKind::Rgb && keep(s, &cfg.filters))
        .collect();
    slides.sort_by(|a, b| a.id().cmp(b.id()));
    let mut seen = BTreeSet::new();
    for s in &slides {
        if s.id().contains(['/', '\\']) || s.id().starts_with('.') {
            return Err(Error::CorruptMetadata(format!("slide id {:?} is not a valid file name", s.id())));
        }
        if !seen.insert(s.id()) {
            return Err(Error::CorruptMetadata(format!("duplicate slide id {}", s.id())));
        }
    }
    if slides.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    log::info!("{} slides after filtering", slides.len());
    Ok(slides)
}

/// Split map for the filtered corpus.
pub fn plan_split(cfg: &CompileConfig, exec: Exec) -> Result<SplitMap> {
    cfg.validate()?;
    let slides = load_corpus(cfg, exec)?;
    split_slides(&slides, &cfg.split_plan())
}

fn open_mask_slide(slide: &Slide) -> Result<Slide> {
    let path = slide.annotation_ref().ok_or_else(|| Error::MissingAnnotation(slide.id().to_string()))?;
    let mask = open_slide(path)?;
    if mask.kind() != SlideKind::Mask {
        return Err(Error::ConfigConflict(format!("annotation of {} is not a mask pyramid", slide.id())));
    }
    Ok(mask)
}

struct SlideResult {
    records: Vec<PatchRecord>,
    tissue: Option<crate::tissue::CoverageMap>,
}

/// Tissue detection, sampling and labeling for one slide.
fn process_slide(slide: &Slide, cfg: &CompileConfig, split: Split) -> Result<SlideResult> {
    let mask = tissue_mask(slide, &cfg.tissue)?;
    let mut records = sample_slide(slide, &mask, &cfg.sample_spec())?;
    let annotation = match (&cfg.labels, slide.meta("slide_type")) {
        (LabelPolicy::Camelyon { .. }, Some("tumor")) => {
            let path = slide.annotation_ref().ok_or_else(|| Error::MissingAnnotation(slide.id().to_string()))?;
            Some(Annotation::load(path, cfg.tissue.work_mpp)?)
        }
        _ => None,
    };
    let mut kept = Vec::with_capacity(records.len());
    for mut r in records.drain(..) {
        r.split = split;
        r.target = match &cfg.labels {
            LabelPolicy::None => Target::Unlabeled,
            LabelPolicy::Organ { .. } => {
                let organ = slide
                    .meta("organ")
                    .ok_or_else(|| Error::InvalidConfig(format!("slide {} has no organ", slide.id())))?;
                let (index, name) = cfg.labels.organ_class(organ)?;
                Target::Class { index, name }
            }
            LabelPolicy::Camelyon { annotation_tau } => {
                match assign_label_camelyon(&r, slide, annotation.as_ref(), *annotation_tau)? {
                    CamelyonLabel::Reject => continue,
                    CamelyonLabel::Normal => Target::Class {
                        index: 0,
                        name: "normal".into(),
                    },
                    CamelyonLabel::Tumor => Target::Class {
                        index: 1,
                        name: "tumor".into(),
                    },
                }
            }
            LabelPolicy::Mask => Target::Mask {
                file: String::new(),
                histogram: [0; MASK_CLASSES],
            },
        };
        kept.push(r);
    }
    Ok(SlideResult {
        records: kept,
        tissue: cfg.emit_tissue_masks.then_some(mask.coverage),
    })
}

/// Per-split class rebalancing with split-specific seeds.
fn rebalance_per_split(records: Vec<PatchRecord>, seed: u64) -> Result<Vec<PatchRecord>> {
    let mut by_split: BTreeMap<Split, Vec<PatchRecord>> = BTreeMap::new();
    for r in records {
        by_split.entry(r.split).or_default().push(r);
    }
    let mut out = Vec::new();
    for (split, recs) in by_split {
        let s = keyed_rng(seed, &[b"rebalance-split", split.as_str().as_bytes()]).random::<u64>();
        out.extend(rebalance_classes(recs, s)?);
    }
    out.sort_by(|a, b| a.slide_id.cmp(&b.slide_id).then(a.index.cmp(&b.index)));
    Ok(out)
}

fn record_stem(r: &PatchRecord) -> String {
    format!("{}/{}/{}_{}", r.split, class_label(r), r.slide_id, r.index)
}

/// Extracts, encodes and writes one slide's patches. Returns the completed
/// records and the channel moments of its training patches.
fn export_slide(slide: &Slide, mut records: Vec<PatchRecord>, dir: &Path, with_masks: bool) -> Result<(Vec<PatchRecord>, ChannelMoments)> {
    let mask_slide = if with_masks { Some(open_mask_slide(slide)?) } else { None };
    let mut moments = ChannelMoments::new();
    for r in &mut records {
        let stem = record_stem(r);
        let img = extract_normalized_patch(slide, r.x0_um, r.y0_um, r.scale_um, r.out_px)?;
        if r.split == Split::Train {
            moments.update(&img)?;
        }
        let bytes = img.encode_png()?;
        let rel = format!("{stem}.png");
        write_file(&dir.join(&rel), &bytes)?;
        r.sha256 = Some(sha256_hex(&bytes));
        r.path = Some(rel);
        if let Some(ms) = &mask_slide {
            let (mask, histogram) = co_crop_mask(ms, r)?;
            let file = format!("{stem}_mask.png");
            write_file(&dir.join(&file), &mask.encode_png()?)?;
            r.target = Target::Mask { file, histogram };
        }
    }
    Ok((records, moments))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::ConfigConflict(format!("{} exists; pass --force to replace it", dir.display())));
        }
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Compiles a dataset into `opts.out/{cfg.name}` and returns its manifest.
/// On failure the partially written dataset directory is removed.
pub fn compile(cfg: &CompileConfig, opts: &CompileOptions) -> Result<Manifest> {
    cfg.validate()?;
    let slides = load_corpus(cfg, opts.exec)?;
    let split_map = split_slides(&slides, &cfg.split_plan())?;
    let dir = opts.out.join(&cfg.name);
    prepare_output(&dir, opts.force)?;
    match compile_into(cfg, &slides, &split_map, &dir, opts.exec) {
        Ok(m) => Ok(m),
        Err(e) => {
            if let Err(rm) = std::fs::remove_dir_all(&dir) {
                log::warn!("could not remove {}: {rm}", dir.display());
            }
            Err(e)
        }
    }
}

fn compile_into(cfg: &CompileConfig, slides: &[Slide], split_map: &SplitMap, dir: &Path, exec: Exec) -> Result<Manifest> {
    let results = exec.try_map(slides, |s| {
        let split = split_map.get(s.id()).copied().unwrap_or(Split::Unassigned);
        process_slide(s, cfg, split).map_err(|e| e.in_slide(s.id()))
    })?;
    if cfg.emit_tissue_masks {
        for (s, r) in slides.iter().zip(&results) {
            if let Some(t) = &r.tissue {
                let tdir = dir.join(TISSUE_DIR);
                std::fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
                t.save_png(&tdir.join(format!("{}.png", s.id())))?;
            }
        }
    }
    let mut records: Vec<PatchRecord> = results.into_iter().flat_map(|r| r.records).collect();
    log::info!("{} patches sampled", records.len());
    if cfg.rebalance {
        records = rebalance_per_split(records, cfg.seed)?;
        log::info!("{} patches after rebalancing", records.len());
    }

    let mut grouped: BTreeMap<String, Vec<PatchRecord>> = BTreeMap::new();
    for r in records {
        grouped.entry(r.slide_id.clone()).or_default().push(r);
    }
    let work: Vec<(&Slide, Vec<PatchRecord>)> = slides
        .iter()
        .filter_map(|s| grouped.remove(s.id()).map(|r| (s, r)))
        .collect();
    let with_masks = matches!(cfg.labels, LabelPolicy::Mask);
    let exported = exec.try_map(&work, |(s, recs)| {
        export_slide(s, recs.clone(), dir, with_masks).map_err(|e| e.in_slide(s.id()))
    })?;
    let moments = merge_all(exported.iter().map(|(_, m)| m));
    let records: Vec<PatchRecord> = exported.into_iter().flat_map(|(r, _)| r).collect();

    let (counts, slide_counts, class_counts) = summarize(&records);
    let header = ManifestHeader {
        schema_version: SCHEMA_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        name: cfg.name.clone(),
        kind: cfg.kind,
        scale_um: cfg.sampling.scale_um,
        out_px: cfg.sampling.out_px,
        mpp: cfg.sampling.mpp(),
        class_names: cfg.labels.class_names(),
        mask_labels: with_masks.then(|| (0..=crate::sampler::MAX_MASK_LABEL).collect()),
        seed: cfg.seed,
        config_hash: cfg.content_hash(),
        rebalanced: cfg.rebalance,
        counts,
        slide_counts,
        class_counts,
        stats: (moments.count > 0).then(|| moments.finalize()).transpose()?,
    };
    let manifest = Manifest {
        header,
        records,
        root: dir.to_path_buf(),
    };
    manifest.save_csv(&dir.join(MANIFEST_CSV))?;
    manifest.save()?;
    log::info!(
        "wrote {} patches ({} train / {} val / {} test)",
        manifest.records.len(),
        counts.train,
        counts.val,
        counts.test
    );
    Ok(manifest)
}
