//! Dataset manifest: one JSON header line followed by one JSON record per
//! line. Record paths are relative to the manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::presets::DatasetKind;
use crate::raster::{png_dimensions, Raster};
use crate::sampler::{PatchRecord, Target, MAX_MASK_LABEL};
use crate::split::Split;
use crate::stats::{merge_all, ChannelMoments, ChannelStats, StatsMode};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_CSV: &str = "manifest.csv";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Per-split totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: u64,
    pub val: u64,
    pub test: u64,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> u64 {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
            Split::Unassigned => 0,
        }
    }

    pub fn bump(&mut self, split: Split) {
        match split {
            Split::Train => self.train += 1,
            Split::Val => self.val += 1,
            Split::Test => self.test += 1,
            Split::Unassigned => {}
        }
    }

    pub fn total(&self) -> u64 {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema_version: u32,
    pub tool_version: String,
    pub name: String,
    pub kind: DatasetKind,
    pub scale_um: f64,
    pub out_px: u32,
    pub mpp: f64,
    pub class_names: Vec<String>,
    /// Declared mask labels for segmentation datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_labels: Option<Vec<u8>>,
    pub seed: u64,
    pub config_hash: String,
    pub rebalanced: bool,
    pub counts: SplitCounts,
    pub slide_counts: SplitCounts,
    /// split → class name → patch count.
    pub class_counts: BTreeMap<String, BTreeMap<String, u64>>,
    /// Channel statistics over the training split.
    pub stats: Option<ChannelStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<PatchRecord>,
    /// Directory the record paths are relative to.
    pub root: PathBuf,
}

/// Class name used for directory layout and counts.
pub fn class_label(record: &PatchRecord) -> &str {
    match &record.target {
        Target::Class { name, .. } => name,
        Target::Mask { .. } => crate::config::MASK_CLASS_DIR,
        Target::Unlabeled => crate::config::UNLABELED_CLASS_DIR,
    }
}

/// Recomputes the summary fields that depend on the records.
pub fn summarize(records: &[PatchRecord]) -> (SplitCounts, SplitCounts, BTreeMap<String, BTreeMap<String, u64>>) {
    let mut counts = SplitCounts::default();
    let mut slides: BTreeMap<Split, BTreeSet<&str>> = BTreeMap::new();
    let mut classes: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    for r in records {
        counts.bump(r.split);
        slides.entry(r.split).or_default().insert(&r.slide_id);
        *classes.entry(r.split.to_string()).or_default().entry(class_label(r).to_string()).or_default() += 1;
    }
    let mut slide_counts = SplitCounts::default();
    for (split, ids) in slides {
        for _ in ids {
            slide_counts.bump(split);
        }
    }
    (counts, slide_counts, classes)
}

impl Manifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &PatchRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Accepts a manifest file or the directory holding one.
    pub fn load(path: &Path) -> Result<Self> {
        let file_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let f = File::open(&file_path).map_err(|e| Error::io(&file_path, e))?;
        let mut lines = BufReader::new(f).lines();
        let bad = |line: usize, e: &dyn std::fmt::Display| Error::Manifest(format!("{}:{line}: {e}", file_path.display()));
        let first = lines
            .next()
            .ok_or_else(|| bad(1, &"empty manifest"))?
            .map_err(|e| Error::io(&file_path, e))?;
        let header: ManifestHeader = serde_json::from_str(&first).map_err(|e| bad(1, &e))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(bad(1, &format!("unsupported schema version {}", header.schema_version)));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(&file_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| bad(i + 2, &e))?);
        }
        let root = file_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { header, records, root })
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header).expect("header serializes");
        out.push(b'\n');
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("record serializes");
            out.push(b'\n');
        }
        out
    }

    /// Writes `manifest.jsonl` through a temporary file and a rename.
    pub fn save(&self) -> Result<()> {
        let path = self.path();
        let tmp = self.root.join(format!("{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, self.to_jsonl()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let err = |e: csv::Error| Error::Manifest(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["slide_id", "index", "split", "class", "x0_um", "y0_um", "scale_um", "out_px", "path", "mask", "sha256"])
            .map_err(err)?;
        for r in &self.records {
            let mask = match &r.target {
                Target::Mask { file, .. } => file.as_str(),
                _ => "",
            };
            w.write_record([
                r.slide_id.clone(),
                r.index.to_string(),
                r.split.to_string(),
                class_label(r).to_string(),
                r.x0_um.to_string(),
                r.y0_um.to_string(),
                r.scale_um.to_string(),
                r.out_px.to_string(),
                r.path.clone().unwrap_or_default(),
                mask.to_string(),
                r.sha256.clone().unwrap_or_default(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io("<manifest csv>", e))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(BufWriter::new(f))
    }

    /// Writes the manifest to an arbitrary file. Record paths are made
    /// absolute unless the file sits in the dataset directory.
    pub fn save_as(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let same = match (std::fs::canonicalize(dir), std::fs::canonicalize(&self.root)) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        };
        let mut m = self.clone();
        if !same {
            let root = std::fs::canonicalize(&self.root).map_err(|e| Error::io(&self.root, e))?;
            let abs = |p: &str| root.join(p).to_string_lossy().into_owned();
            for r in &mut m.records {
                r.path = r.path.as_deref().map(abs);
                if let Target::Mask { file, .. } = &mut r.target {
                    *file = abs(file);
                }
            }
        }
        let tmp = PathBuf::from(format!("{}.tmp", path.display()));
        std::fs::write(&tmp, m.to_jsonl()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Copy restricted to `records`, with summary fields recomputed.
    pub fn with_records(&self, records: Vec<PatchRecord>) -> Manifest {
        let mut header = self.header.clone();
        let (counts, slide_counts, class_counts) = summarize(&records);
        header.counts = counts;
        header.slide_counts = slide_counts;
        header.class_counts = class_counts;
        Manifest {
            header,
            records,
            root: self.root.clone(),
        }
    }
}

/// Channel statistics over the patches of one split (or all records).
/// Per-record accumulators are merged in record order.
pub fn manifest_stats(manifest: &Manifest, split: Option<Split>, mode: StatsMode, exec: Exec) -> Result<ChannelStats> {
    let records: Vec<&PatchRecord> = manifest.records.iter().filter(|r| split.is_none_or(|s| r.split == s)).collect();
    let parts = exec.try_map(&records, |r| {
        let rel = r.path.as_deref().ok_or_else(|| Error::Manifest(format!("{}#{} has no path", r.slide_id, r.index)))?;
        let mut m = ChannelMoments::new();
        m.update_mode(&Raster::load_png(&manifest.resolve(rel))?, mode)?;
        Ok::<_, Error>(m)
    })?;
    merge_all(&parts).finalize()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    CountMismatch,
    MppMismatch,
    MissingFile,
    SizeMismatch,
    SlideInTwoSplits,
    UnassignedRecord,
    ClassImbalance,
    IllegalMaskLabel,
    HashMismatch,
    UnreadableFile,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct VerifyReport {
    pub records: usize,
    pub findings: Vec<Finding>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }

    fn add(&mut self, kind: FindingKind, detail: impl Into<String>) {
        self.findings.push(Finding {
            kind,
            detail: detail.into(),
        });
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Recompute content hashes of every patch file.
    pub hash: bool,
}

/// Checks the manifest invariants against the records and the files on disk.
pub fn verify(manifest: &Manifest, opts: VerifyOptions) -> VerifyReport {
    let h = &manifest.header;
    let mut report = VerifyReport {
        records: manifest.records.len(),
        ..Default::default()
    };
    let (counts, slide_counts, class_counts) = summarize(&manifest.records);
    if counts != h.counts || slide_counts != h.slide_counts || class_counts != h.class_counts {
        report.add(
            FindingKind::CountMismatch,
            format!("header counts {:?} do not match recount {:?}", h.counts, counts),
        );
    }
    if (h.mpp - h.scale_um / h.out_px as f64).abs() > 1e-12 {
        report.add(FindingKind::MppMismatch, format!("mpp {} != {} / {}", h.mpp, h.scale_um, h.out_px));
    }

    let mut slide_split: BTreeMap<&str, Split> = BTreeMap::new();
    let mut reported = BTreeSet::new();
    for r in &manifest.records {
        let tag = format!("{}#{}", r.slide_id, r.index);
        if r.split == Split::Unassigned {
            report.add(FindingKind::UnassignedRecord, tag.clone());
        }
        match slide_split.get(r.slide_id.as_str()) {
            Some(&s) if s != r.split && reported.insert(r.slide_id.as_str()) => {
                report.add(FindingKind::SlideInTwoSplits, format!("slide in two splits: {} ({s}, {})", r.slide_id, r.split));
            }
            None => {
                slide_split.insert(&r.slide_id, r.split);
            }
            _ => {}
        }
        if r.scale_um != h.scale_um || r.out_px != h.out_px {
            report.add(FindingKind::MppMismatch, format!("{tag}: geometry {} µm / {} px", r.scale_um, r.out_px));
        }
        check_file(manifest, &mut report, &tag, r.path.as_deref(), r.out_px, r.sha256.as_deref(), opts.hash);
        if let Target::Mask { file, .. } = &r.target {
            check_file(manifest, &mut report, &tag, Some(file), r.out_px, None, false);
            let path = manifest.resolve(file);
            if path.is_file() {
                match Raster::load_png(&path) {
                    Ok(m) => {
                        if let Some(&v) = m.value_set().iter().find(|&&v| v > MAX_MASK_LABEL) {
                            report.add(FindingKind::IllegalMaskLabel, format!("{tag}: label {v} in {file}"));
                        }
                    }
                    Err(e) => report.add(FindingKind::UnreadableFile, format!("{tag}: {e}")),
                }
            }
        }
    }

    if h.rebalanced {
        for (split, classes) in &class_counts {
            let distinct: BTreeSet<u64> = classes.values().copied().collect();
            if distinct.len() > 1 {
                report.add(FindingKind::ClassImbalance, format!("{split}: {classes:?}"));
            }
        }
    }
    report
}

fn check_file(
    manifest: &Manifest,
    report: &mut VerifyReport,
    tag: &str,
    rel: Option<&str>,
    out_px: u32,
    sha: Option<&str>,
    hash: bool,
) {
    let Some(rel) = rel else {
        report.add(FindingKind::MissingFile, format!("missing file: {tag} has no path"));
        return;
    };
    let path = manifest.resolve(rel);
    if !path.is_file() {
        report.add(FindingKind::MissingFile, format!("missing file: {rel}"));
        return;
    }
    match png_dimensions(&path) {
        Ok((w, h)) if w == out_px && h == out_px => {}
        Ok((w, h)) => report.add(FindingKind::SizeMismatch, format!("{rel} is {w}x{h}, expected {out_px}")),
        Err(e) => report.add(FindingKind::UnreadableFile, format!("{tag}: {e}")),
    }
    if hash {
        match (sha, std::fs::read(&path)) {
            (Some(expected), Ok(bytes)) if sha256_hex(&bytes) != expected => {
                report.add(FindingKind::HashMismatch, format!("{rel}: content hash differs"));
            }
            (None, _) => report.add(FindingKind::HashMismatch, format!("{rel}: no recorded hash")),
            (_, Err(e)) => report.add(FindingKind::UnreadableFile, format!("{rel}: {e}")),
            _ => {}
        }
    }
}
