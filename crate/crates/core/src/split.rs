//! Slide-level dataset splits, class rebalancing and slide-based subsets.
//!
//! Every split map is a pure function of the slide id set, the slide
//! metadata and the plan: ids are sorted before any seeded shuffle.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::sampler::{PatchRecord, Target};
use crate::slide::Slide;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Unassigned,
    Train,
    Val,
    Test,
}

impl Split {
    pub const ASSIGNED: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Unassigned => "unassigned",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    #[default]
    SlideLevel,
    StratifiedIsup,
    SourceConstrained,
    /// Slide-level split run independently per organ.
    StratifiedOrgan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Train, validation and test fractions.
    pub fractions: [f64; 3],
    #[serde(default)]
    pub strategy: SplitStrategy,
    #[serde(default)]
    pub seed: u64,
}

impl SplitPlan {
    pub fn new(fractions: [f64; 3], strategy: SplitStrategy, seed: u64) -> Self {
        SplitPlan {
            fractions,
            strategy,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fractions.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
            return Err(Error::InvalidConfig(format!("negative split fraction in {:?}", self.fractions)));
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("split fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

pub type SplitMap = BTreeMap<String, Split>;

/// Largest-remainder apportionment of `n` items. Ties in the remainder go
/// to the earlier bucket.
pub fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    // nudge values like 9890.9999999 onto the integer they represent
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn shuffled_split(mut ids: Vec<&str>, fractions: &[f64; 3], seed: u64, stream: &[&[u8]]) -> SplitMap {
    ids.sort_unstable();
    ids.dedup();
    let mut parts: Vec<&[u8]> = vec![b"split"];
    parts.extend_from_slice(stream);
    ids.shuffle(&mut keyed_rng(seed, &parts));
    let counts = apportion(ids.len(), fractions);
    let mut map = SplitMap::new();
    let mut it = ids.into_iter();
    for (split, n) in Split::ASSIGNED.into_iter().zip(counts) {
        for id in it.by_ref().take(n) {
            map.insert(id.to_string(), split);
        }
    }
    map
}

pub fn slide_level_split(slides: &[Slide], plan: &SplitPlan) -> Result<SplitMap> {
    plan.validate()?;
    if slides.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(shuffled_split(slides.iter().map(Slide::id).collect(), &plan.fractions, plan.seed, &[]))
}

fn stratified_by(slides: &[Slide], plan: &SplitPlan, key: &str, missing: impl Fn(&str) -> Error) -> Result<SplitMap> {
    plan.validate()?;
    if slides.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut strata: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for s in slides {
        let v = s.meta(key).ok_or_else(|| missing(s.id()))?;
        strata.entry(v).or_default().push(s.id());
    }
    let mut map = SplitMap::new();
    for (value, ids) in strata {
        map.extend(shuffled_split(ids, &plan.fractions, plan.seed, &[key.as_bytes(), value.as_bytes()]));
    }
    Ok(map)
}

/// Independent slide-level split inside each ISUP grade.
pub fn stratified_isup_split(slides: &[Slide], plan: &SplitPlan) -> Result<SplitMap> {
    stratified_by(slides, plan, "isup", |id| Error::MissingGrade(id.to_string()))
}

pub fn stratified_organ_split(slides: &[Slide], plan: &SplitPlan) -> Result<SplitMap> {
    stratified_by(slides, plan, "organ", |id| Error::InvalidConfig(format!("slide {id} has no organ")))
}

/// Slides tagged `origin=test` go to test; `origin=train` slides are split
/// between train and validation by the renormalized train/val fractions.
pub fn source_constrained_split(slides: &[Slide], plan: &SplitPlan) -> Result<SplitMap> {
    plan.validate()?;
    if slides.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut train_origin = Vec::new();
    let mut map = SplitMap::new();
    for s in slides {
        match s.meta("origin") {
            Some("test") => {
                map.insert(s.id().to_string(), Split::Test);
            }
            Some("train") => train_origin.push(s.id()),
            _ => return Err(Error::MissingOrigin(s.id().to_string())),
        }
    }
    if map.is_empty() {
        log::warn!("no slides tagged origin=test; the test split is empty");
    }
    let tv = plan.fractions[0] + plan.fractions[1];
    if !train_origin.is_empty() {
        if tv <= 0.0 {
            return Err(Error::InvalidConfig("train and validation fractions are both zero".into()));
        }
        let fr = [plan.fractions[0] / tv, plan.fractions[1] / tv, 0.0];
        map.extend(shuffled_split(train_origin, &fr, plan.seed, &[b"origin-train"]));
    }
    Ok(map)
}

pub fn split_slides(slides: &[Slide], plan: &SplitPlan) -> Result<SplitMap> {
    match plan.strategy {
        SplitStrategy::SlideLevel => slide_level_split(slides, plan),
        SplitStrategy::StratifiedIsup => stratified_isup_split(slides, plan),
        SplitStrategy::SourceConstrained => source_constrained_split(slides, plan),
        SplitStrategy::StratifiedOrgan => stratified_organ_split(slides, plan),
    }
}

/// Drops records at random until every class has the smallest class count.
/// Surviving records keep their relative order.
pub fn rebalance_classes(records: Vec<PatchRecord>, seed: u64) -> Result<Vec<PatchRecord>> {
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        match r.target {
            Target::Class { index, .. } => by_class.entry(index).or_default().push(i),
            _ => return Err(Error::Unlabeled),
        }
    }
    let Some(min) = by_class.values().map(Vec::len).min() else {
        return Ok(records);
    };
    let mut keep = vec![false; records.len()];
    for (class, mut idx) in by_class {
        if idx.len() > min {
            idx.shuffle(&mut keyed_rng(seed, &[b"rebalance", &class.to_le_bytes()]));
            idx.truncate(min);
        }
        for i in idx {
            keep[i] = true;
        }
    }
    Ok(records.into_iter().zip(keep).filter_map(|(r, k)| k.then_some(r)).collect())
}

fn distinct_slides(records: &[PatchRecord]) -> Vec<&str> {
    records.iter().map(|r| r.slide_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Keeps all records of ⌈fraction × #slides⌉ randomly chosen slides.
pub fn fraction_subset(records: &[PatchRecord], fraction: f64, seed: u64) -> Result<Vec<PatchRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("subset fraction {fraction} outside (0, 1]")));
    }
    let mut slides = distinct_slides(records);
    let k = ((fraction * slides.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    slides.shuffle(&mut keyed_rng(seed, &[b"fraction-subset"]));
    let chosen: BTreeSet<&str> = slides.into_iter().take(k).collect();
    Ok(records.iter().filter(|r| chosen.contains(r.slide_id.as_str())).cloned().collect())
}

pub fn write_split_csv(map: &SplitMap, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Manifest(e.to_string());
    w.write_record(["slide_id", "split"]).map_err(err)?;
    for (id, split) in map {
        w.write_record([id.as_str(), split.as_str()]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("<split csv>", e))
}

pub fn save_split_csv(map: &SplitMap, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_split_csv(map, std::io::BufWriter::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;

    fn slide(id: &str, meta: &[(&str, &str)]) -> Slide {
        let m = meta.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        Slide::from_rasters(id, 1.0, vec![(1.0, Raster::filled(2, 2, 3, 0u8))], m).unwrap()
    }

    fn counts(map: &SplitMap) -> [usize; 3] {
        let mut c = [0; 3];
        for s in map.values() {
            c[*s as usize - 1] += 1;
        }
        c
    }

    #[test]
    fn apportion_examples() {
        assert_eq!(apportion(10, &[0.8, 0.1, 0.1]), vec![8, 1, 1]);
        let total = 5_110_000.0;
        let fr = [4_945_500.0 / total, 107_500.0 / total, 57_000.0 / total];
        assert_eq!(apportion(10_220, &fr), vec![9891, 215, 114]);
        assert_eq!(apportion(10, &[1.0, 0.0, 0.0]), vec![10, 0, 0]);
        assert_eq!(apportion(10, &[0.7, 0.15, 0.15]), vec![7, 2, 1]);
    }

    #[test]
    fn slide_level_counts() {
        let slides: Vec<Slide> = (0..10).map(|i| slide(&format!("s{i}"), &[])).collect();
        let map = slide_level_split(&slides, &SplitPlan::new([0.8, 0.1, 0.1], SplitStrategy::SlideLevel, 3)).unwrap();
        assert_eq!(counts(&map), [8, 1, 1]);
        let all = slide_level_split(&slides, &SplitPlan::new([1.0, 0.0, 0.0], SplitStrategy::SlideLevel, 3)).unwrap();
        assert!(all.values().all(|s| *s == Split::Train));
        assert!(matches!(
            slide_level_split(&[], &SplitPlan::new([1.0, 0.0, 0.0], SplitStrategy::SlideLevel, 3)),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn order_independent() {
        let slides: Vec<Slide> = (0..25).map(|i| slide(&format!("s{i:02}"), &[])).collect();
        let mut rev = slides.clone();
        rev.reverse();
        let plan = SplitPlan::new([0.6, 0.2, 0.2], SplitStrategy::SlideLevel, 11);
        assert_eq!(slide_level_split(&slides, &plan).unwrap(), slide_level_split(&rev, &plan).unwrap());
    }

    #[test]
    fn stratified_small() {
        let slides: Vec<Slide> = (0..60).map(|i| slide(&format!("s{i}"), &[("isup", &(i % 6).to_string())])).collect();
        let plan = SplitPlan::new([0.7, 0.15, 0.15], SplitStrategy::StratifiedIsup, 1);
        let map = stratified_isup_split(&slides, &plan).unwrap();
        for g in 0..6 {
            let mut c = [0usize; 3];
            for s in slides.iter().filter(|s| s.meta("isup") == Some(&g.to_string())) {
                c[map[s.id()] as usize - 1] += 1;
            }
            for (got, target) in c.iter().zip([7.0, 1.5, 1.5]) {
                assert!((*got as f64 - target).abs() <= 1.0, "grade {g}: {c:?}");
            }
        }
        let single: Vec<Slide> = (0..10).map(|i| slide(&format!("s{i}"), &[("isup", "2")])).collect();
        let strat = stratified_isup_split(&single, &plan).unwrap();
        assert_eq!(counts(&strat), counts(&slide_level_split(&single, &plan).unwrap()));
        let mut ungraded = single.clone();
        ungraded.push(slide("x", &[]));
        assert!(matches!(stratified_isup_split(&ungraded, &plan), Err(Error::MissingGrade(id)) if id == "x"));
    }

    #[test]
    fn source_constrained() {
        let mut slides: Vec<Slide> = (0..20).map(|i| slide(&format!("tr{i}"), &[("origin", "train")])).collect();
        slides.extend((0..10).map(|i| slide(&format!("te{i}"), &[("origin", "test")])));
        let plan = SplitPlan::new([0.6, 0.2, 0.2], SplitStrategy::SourceConstrained, 5);
        let map = source_constrained_split(&slides, &plan).unwrap();
        assert_eq!(counts(&map), [15, 5, 10]);
        assert!(map.iter().filter(|(id, _)| id.starts_with("te")).all(|(_, s)| *s == Split::Test));

        let only_train = &slides[..20];
        assert_eq!(counts(&source_constrained_split(only_train, &plan).unwrap())[2], 0);
        let mut untagged = slides.clone();
        untagged.push(slide("u", &[]));
        assert!(matches!(source_constrained_split(&untagged, &plan), Err(Error::MissingOrigin(_))));
    }

    fn rec(slide: &str, class: u32) -> PatchRecord {
        let mut r = PatchRecord::new(slide, 0, 0.0, 0.0, 200.0, 512);
        r.target = Target::Class {
            index: class,
            name: format!("c{class}"),
        };
        r
    }

    #[test]
    fn rebalance_min_count() {
        let mut recs: Vec<PatchRecord> = (0..7).map(|i| rec(&format!("t{i}"), 1)).collect();
        recs.extend((0..10).map(|i| rec(&format!("n{i}"), 0)));
        let out = rebalance_classes(recs.clone(), 9).unwrap();
        assert_eq!(out.iter().filter(|r| matches!(r.target, Target::Class { index: 1, .. })).count(), 7);
        assert_eq!(out.len(), 14);
        // order preserved: output is a subsequence of input
        let mut it = recs.iter();
        assert!(out.iter().all(|o| it.any(|r| r == o)));

        let balanced: Vec<PatchRecord> = (0..6).map(|i| rec(&format!("b{i}"), i % 2)).collect();
        assert_eq!(rebalance_classes(balanced.clone(), 1).unwrap(), balanced);

        let three: Vec<PatchRecord> = [(0, 5), (1, 9), (2, 14)]
            .iter()
            .flat_map(|&(c, n)| (0..n).map(move |i| rec(&format!("{c}-{i}"), c)))
            .collect();
        let out = rebalance_classes(three, 2).unwrap();
        for c in 0..3 {
            assert_eq!(out.iter().filter(|r| matches!(r.target, Target::Class { index, .. } if index == c)).count(), 5);
        }
        assert!(matches!(rebalance_classes(vec![PatchRecord::new("a", 0, 0.0, 0.0, 1.0, 1)], 0), Err(Error::Unlabeled)));
    }

    #[test]
    fn fraction_subset_keeps_whole_slides() {
        let recs: Vec<PatchRecord> = (0..2).flat_map(|s| (0..5).map(move |_| rec(&format!("s{s}"), 0))).collect();
        let half = fraction_subset(&recs, 0.5, 4).unwrap();
        assert_eq!(half.len(), 5);
        assert!(half.iter().all(|r| r.slide_id == half[0].slide_id));
        assert_eq!(fraction_subset(&recs, 1.0, 4).unwrap(), recs);
        assert!(fraction_subset(&recs, 0.0, 4).is_err());

        let many: Vec<PatchRecord> = (0..9891).map(|i| rec(&format!("s{i}"), 0)).collect();
        assert_eq!(fraction_subset(&many, 0.01, 1).unwrap().len(), 99);
    }

    #[test]
    fn csv_export() {
        let mut m = SplitMap::new();
        m.insert("a,b".into(), Split::Train);
        m.insert("c".into(), Split::Test);
        let mut buf = Vec::new();
        write_split_csv(&m, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "slide_id,split\n\"a,b\",train\nc,test\n");
    }
}
