//! Slide-level fold plans and leakage checks.
//!
//! Nested mode: the cohort is shuffled, cut into `n_test` equal test
//! groups, and for each test group the remaining slides are cut into `n_cv`
//! equal validation groups, giving runs `test_TT_cv_VV`. Scanner mode
//! rotates validation over one scanner's slides with no test split.
//! Splits are always made at slide granularity.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tiling::{AugmentationTag, ManifestRecord};
use crate::wsi::{Scanner, WsiRecord};

#[derive(Debug, Error, PartialEq)]
pub enum FoldError {
    #[error("cannot split {cohort} slides into {groups} equal groups ({stage})")]
    IndivisibleCohort { cohort: usize, groups: usize, stage: &'static str },
    #[error("no slides to split")]
    EmptyCohort,
    #[error("slide {0} listed twice")]
    DuplicateWsi(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldMode {
    Nested,
    ScannerCv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub name: String,
    pub test: Vec<String>,
    pub val: Vec<String>,
    pub train: Vec<String>,
    pub augment_splits: BTreeSet<Split>,
}

impl RunSpec {
    pub fn wsis(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, wsi_id: &str) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find(|&s| self.wsis(s).iter().any(|w| w == wsi_id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub mode: FoldMode,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scanner: Option<Scanner>,
    pub runs: Vec<RunSpec>,
}

impl FoldPlan {
    pub fn run(&self, name: &str) -> Option<&RunSpec> {
        self.runs.iter().find(|r| r.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes") + "\n"
    }
}

pub fn run_name(test: usize, cv: usize) -> String {
    format!("test_{test:02}_cv_{cv:02}")
}

fn is_run_name(name: &str) -> bool {
    let b = name.as_bytes();
    b.len() >= 13
        && name.starts_with("test_")
        && b[5..7].iter().all(u8::is_ascii_digit)
        && &name[7..11] == "_cv_"
        && b[11..13].iter().all(u8::is_ascii_digit)
}

fn shuffled_ids(wsis: &[&WsiRecord], seed: u64) -> Result<Vec<String>, FoldError> {
    let mut ids: Vec<String> = wsis.iter().map(|w| w.wsi_id.clone()).collect();
    ids.sort();
    if let Some(d) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(FoldError::DuplicateWsi(d[0].clone()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(ids)
}

fn equal_groups(ids: &[String], groups: usize, stage: &'static str) -> Result<Vec<Vec<String>>, FoldError> {
    if groups == 0 || ids.len() < groups || !ids.len().is_multiple_of(groups) {
        return Err(FoldError::IndivisibleCohort {
            cohort: ids.len(),
            groups,
            stage,
        });
    }
    Ok(ids.chunks(ids.len() / groups).map(|c| c.to_vec()).collect())
}

fn sorted(mut v: Vec<String>) -> Vec<String> {
    v.sort();
    v
}

fn train_only() -> BTreeSet<Split> {
    BTreeSet::from([Split::Train])
}

/// Nested cross-testing / cross-validation plan with `n_test·n_cv` runs.
pub fn build_fold_plan(wsis: &[WsiRecord], n_test: usize, n_cv: usize, seed: u64) -> Result<FoldPlan, FoldError> {
    if wsis.is_empty() {
        return Err(FoldError::EmptyCohort);
    }
    let ids = shuffled_ids(&wsis.iter().collect::<Vec<_>>(), seed)?;
    let test_groups = equal_groups(&ids, n_test, "test groups")?;
    let mut runs = Vec::with_capacity(n_test * n_cv);
    for (t, test) in test_groups.iter().enumerate() {
        let rest: Vec<String> = ids.iter().filter(|id| !test.contains(id)).cloned().collect();
        let cv_groups = equal_groups(&rest, n_cv, "validation groups")?;
        for (v, val) in cv_groups.iter().enumerate() {
            let train = rest.iter().filter(|id| !val.contains(id)).cloned().collect();
            runs.push(RunSpec {
                name: run_name(t, v),
                test: sorted(test.clone()),
                val: sorted(val.clone()),
                train: sorted(train),
                augment_splits: train_only(),
            });
        }
    }
    Ok(FoldPlan {
        mode: FoldMode::Nested,
        seed,
        scanner: None,
        runs,
    })
}

/// Per-scanner cross-validation: `n_cv` runs `test_00_cv_VV`, empty test.
pub fn build_scanner_plan(wsis: &[WsiRecord], scanner: Scanner, n_cv: usize, seed: u64) -> Result<FoldPlan, FoldError> {
    let cohort: Vec<&WsiRecord> = wsis.iter().filter(|w| w.scanner == scanner).collect();
    if cohort.is_empty() {
        return Err(FoldError::EmptyCohort);
    }
    let ids = shuffled_ids(&cohort, seed)?;
    let groups = equal_groups(&ids, n_cv, "validation groups")?;
    let runs = groups
        .iter()
        .enumerate()
        .map(|(v, val)| RunSpec {
            name: run_name(0, v),
            test: Vec::new(),
            val: sorted(val.clone()),
            train: sorted(ids.iter().filter(|id| !val.contains(id)).cloned().collect()),
            augment_splits: train_only(),
        })
        .collect();
    Ok(FoldPlan {
        mode: FoldMode::ScannerCv,
        seed,
        scanner: Some(scanner),
        runs,
    })
}

/// Patch ids per split for one run, as handed to a trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDataset {
    pub run: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl RunDataset {
    pub fn patches(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Assigns manifest patches to the splits of `run` by slide; augmented
/// patches are kept only in the run's augment splits.
pub fn materialize_run(run: &RunSpec, manifest: &[ManifestRecord]) -> RunDataset {
    let mut ds = RunDataset {
        run: run.name.clone(),
        train: vec![],
        val: vec![],
        test: vec![],
    };
    for rec in manifest {
        let Some(split) = run.split_of(&rec.wsi_id) else { continue };
        if rec.augmentation_tag != AugmentationTag::None && !run.augment_splits.contains(&split) {
            continue;
        }
        match split {
            Split::Train => ds.train.push(rec.patch_id.clone()),
            Split::Val => ds.val.push(rec.patch_id.clone()),
            Split::Test => ds.test.push(rec.patch_id.clone()),
        }
    }
    ds
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    BadRunName,
    DuplicateRunName,
    SplitOverlap,
    CohortMismatch,
    UnevenTestCoverage,
    UnknownWsi,
    DuplicatePatchId,
    MissingRunDataset,
    UnknownRun,
    UnknownPatch,
    WrongSplit,
    PatchInTwoSplits,
    AugmentedOutsideAugmentSplits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub run: Option<String>,
    pub wsi_id: Option<String>,
    pub patch_id: Option<String>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.kind)?;
        if let Some(r) = &self.run {
            write!(f, " run={r}")?;
        }
        if let Some(w) = &self.wsi_id {
            write!(f, " wsi={w}")?;
        }
        if let Some(p) = &self.patch_id {
            write!(f, " patch={p}")?;
        }
        write!(f, ": {}", self.detail)
    }
}

fn violation(kind: ViolationKind, run: Option<&str>, wsi: Option<&str>, patch: Option<&str>, detail: impl Into<String>) -> Violation {
    Violation {
        kind,
        run: run.map(str::to_string),
        wsi_id: wsi.map(str::to_string),
        patch_id: patch.map(str::to_string),
        detail: detail.into(),
    }
}

fn cohort_of(plan: &FoldPlan) -> BTreeSet<&str> {
    plan.runs
        .iter()
        .flat_map(|r| r.test.iter().chain(&r.val).chain(&r.train))
        .map(String::as_str)
        .collect()
}

/// Structural checks on the plan alone.
pub fn verify_plan_structure(plan: &FoldPlan) -> Vec<Violation> {
    use ViolationKind::*;
    let mut out = Vec::new();
    let cohort = cohort_of(plan);
    let mut names = HashSet::new();
    let mut test_counts: BTreeMap<&str, usize> = cohort.iter().map(|&w| (w, 0)).collect();
    for run in &plan.runs {
        let name = Some(run.name.as_str());
        if !is_run_name(&run.name) {
            out.push(violation(BadRunName, name, None, None, "name must match test_NN_cv_NN"));
        }
        if !names.insert(run.name.as_str()) {
            out.push(violation(DuplicateRunName, name, None, None, "run name used twice"));
        }
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for w in run.wsis(split) {
                if let Some(prev) = seen.insert(w, split) {
                    out.push(violation(SplitOverlap, name, Some(w), None, format!("in both {prev} and {split}")));
                }
            }
        }
        let covered: BTreeSet<&str> = seen.keys().copied().collect();
        if covered != cohort {
            let missing: Vec<_> = cohort.difference(&covered).collect();
            out.push(violation(CohortMismatch, name, None, None, format!("slides missing from run: {missing:?}")));
        }
        for w in &run.test {
            *test_counts.entry(w).or_default() += 1;
        }
    }
    if plan.mode == FoldMode::Nested {
        let counts: BTreeSet<usize> = test_counts.values().copied().collect();
        if counts.len() > 1 || counts.contains(&0) {
            for (w, c) in &test_counts {
                out.push(violation(UnevenTestCoverage, None, Some(w), None, format!("in {c} test splits")));
            }
        }
    }
    out
}

/// Checks explicit per-run patch assignments against the plan.
pub fn verify_assignments(plan: &FoldPlan, manifest: &[ManifestRecord], datasets: &[RunDataset]) -> Vec<Violation> {
    use ViolationKind::*;
    let mut out = Vec::new();
    let by_id: HashMap<&str, &ManifestRecord> = manifest.iter().map(|r| (r.patch_id.as_str(), r)).collect();
    for run in &plan.runs {
        if !datasets.iter().any(|d| d.run == run.name) {
            out.push(violation(MissingRunDataset, Some(&run.name), None, None, "no patch assignment"));
        }
    }
    for ds in datasets {
        let run_name = Some(ds.run.as_str());
        let Some(run) = plan.run(&ds.run) else {
            out.push(violation(UnknownRun, run_name, None, None, "run not in plan"));
            continue;
        };
        let mut placed: HashMap<&str, Split> = HashMap::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for pid in ds.patches(split) {
                let Some(rec) = by_id.get(pid.as_str()) else {
                    out.push(violation(UnknownPatch, run_name, None, Some(pid), "patch not in manifest"));
                    continue;
                };
                let wsi = Some(rec.wsi_id.as_str());
                if let Some(prev) = placed.insert(pid, split) {
                    out.push(violation(PatchInTwoSplits, run_name, wsi, Some(pid), format!("in both {prev} and {split}")));
                }
                match run.split_of(&rec.wsi_id) {
                    Some(expected) if expected != split => out.push(violation(
                        WrongSplit,
                        run_name,
                        wsi,
                        Some(pid),
                        format!("slide belongs to {expected}, patch placed in {split}"),
                    )),
                    None => out.push(violation(UnknownWsi, run_name, wsi, Some(pid), "slide not in run")),
                    _ => {}
                }
                if rec.augmentation_tag != AugmentationTag::None && !run.augment_splits.contains(&split) {
                    out.push(violation(
                        AugmentedOutsideAugmentSplits,
                        run_name,
                        wsi,
                        Some(pid),
                        format!("{} patch in {split}", rec.augmentation_tag.as_str()),
                    ));
                }
            }
        }
    }
    out
}

/// Full leakage check: plan structure, manifest coverage, and the patch
/// assignment derived from the manifest. Returns every violation found;
/// an empty list means the plan is clean.
pub fn verify_plan(plan: &FoldPlan, manifest: &[ManifestRecord]) -> Vec<Violation> {
    use ViolationKind::*;
    let mut out = verify_plan_structure(plan);
    let cohort = cohort_of(plan);
    let mut ids = HashSet::new();
    for rec in manifest {
        if !ids.insert(rec.patch_id.as_str()) {
            out.push(violation(DuplicatePatchId, None, Some(&rec.wsi_id), Some(&rec.patch_id), "patch id repeated"));
        }
        let in_scope = plan.scanner.is_none_or(|s| s == rec.scanner);
        if in_scope && !cohort.contains(rec.wsi_id.as_str()) {
            out.push(violation(UnknownWsi, None, Some(&rec.wsi_id), Some(&rec.patch_id), "slide not in plan"));
        }
    }
    let datasets: Vec<RunDataset> = plan.runs.iter().map(|r| materialize_run(r, manifest)).collect();
    out.extend(verify_assignments(plan, manifest, &datasets));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::{NormalizationTag, PatchSize};

    pub(crate) fn cohort(n: usize) -> Vec<WsiRecord> {
        (0..n)
            .map(|i| {
                let scanner = if i < n / 2 { Scanner::NanoZoomer2RS } else { Scanner::NanoZoomerS60 };
                WsiRecord {
                    wsi_id: format!("wsi_{i:02}"),
                    image_path: format!("wsi_{i:02}").into(),
                    scanner,
                    resolution_nm_per_px: scanner.nominal_resolution_nm(),
                    base_magnification: 40.0,
                    level_count: 1,
                    level_dimensions: vec![(512, 512)],
                }
            })
            .collect()
    }

    fn record(wsi: &str, k: usize, tag: AugmentationTag) -> ManifestRecord {
        let patch_id = format!("{wsi}__roi_{k}__128{}", if tag == AugmentationTag::None { String::new() } else { format!("__{}", tag.as_str()) });
        ManifestRecord {
            patch_id: patch_id.clone(),
            wsi_id: wsi.into(),
            scanner: Scanner::NanoZoomer2RS,
            origin_x: 0,
            origin_y: 0,
            level: 1,
            size: PatchSize::S128,
            context_ratio: 0.1,
            augmentation_tag: tag,
            normalization_tag: NormalizationTag::Raw,
            image_path: format!("images/{patch_id}.png"),
            mask_path: format!("masks/{patch_id}.png"),
            seed_roi: None,
            source_rois: vec![],
            duplicate_of: None,
        }
    }

    #[test]
    fn eight_slides_give_twelve_runs() {
        let plan = build_fold_plan(&cohort(8), 4, 3, 42).unwrap();
        let names: Vec<_> = plan.runs.iter().map(|r| r.name.as_str()).collect();
        let expected: Vec<String> = (0..4).flat_map(|t| (0..3).map(move |v| run_name(t, v))).collect();
        assert_eq!(names, expected);
        for r in &plan.runs {
            assert_eq!((r.test.len(), r.val.len(), r.train.len()), (2, 2, 4));
        }
        assert!(verify_plan_structure(&plan).is_empty());
        // every slide is tested in exactly n_cv runs and one test group
        for w in cohort(8) {
            assert_eq!(plan.runs.iter().filter(|r| r.test.contains(&w.wsi_id)).count(), 3);
        }
    }

    #[test]
    fn four_slides_nested_uses_singleton_groups() {
        let plan = build_fold_plan(&cohort(4), 4, 3, 1).unwrap();
        assert_eq!(plan.runs.len(), 12);
        for r in &plan.runs {
            assert_eq!((r.test.len(), r.val.len(), r.train.len()), (1, 1, 2));
        }
    }

    #[test]
    fn indivisible_cohorts_rejected() {
        assert!(matches!(build_fold_plan(&cohort(6), 4, 3, 0), Err(FoldError::IndivisibleCohort { .. })));
        assert!(matches!(build_fold_plan(&cohort(8), 4, 4, 0), Err(FoldError::IndivisibleCohort { .. })));
        assert!(matches!(build_fold_plan(&[], 4, 3, 0), Err(FoldError::EmptyCohort)));
    }

    #[test]
    fn plans_are_seed_deterministic() {
        let a = build_fold_plan(&cohort(8), 4, 3, 7).unwrap();
        let mut reversed = cohort(8);
        reversed.reverse();
        assert_eq!(a, build_fold_plan(&reversed, 4, 3, 7).unwrap());
        let b = build_fold_plan(&cohort(8), 4, 3, 8).unwrap();
        assert_ne!(a.runs, b.runs);
        assert_eq!(a.runs.len(), b.runs.len());
    }

    #[test]
    fn scanner_plan_rotates_validation() {
        let plan = build_scanner_plan(&cohort(8), Scanner::NanoZoomerS60, 4, 3).unwrap();
        let names: Vec<_> = plan.runs.iter().map(|r| r.name.clone()).collect();
        assert_eq!(names, vec!["test_00_cv_00", "test_00_cv_01", "test_00_cv_02", "test_00_cv_03"]);
        let mut vals: Vec<String> = plan.runs.iter().flat_map(|r| r.val.clone()).collect();
        vals.sort();
        assert_eq!(vals, vec!["wsi_04", "wsi_05", "wsi_06", "wsi_07"]);
        assert!(plan.runs.iter().all(|r| r.test.is_empty() && r.train.len() == 3));
        assert!(verify_plan_structure(&plan).is_empty());
        assert_eq!(build_scanner_plan(&[], Scanner::NanoZoomerS60, 4, 0), Err(FoldError::EmptyCohort));
    }

    #[test]
    fn clean_plan_has_no_violations() {
        let plan = build_fold_plan(&cohort(8), 4, 3, 42).unwrap();
        let mut manifest = Vec::new();
        for w in cohort(8) {
            manifest.push(record(&w.wsi_id, 0, AugmentationTag::None));
            manifest.push(record(&w.wsi_id, 0, AugmentationTag::CornerTL));
        }
        assert!(verify_plan(&plan, &manifest).is_empty());
        let ds = materialize_run(&plan.runs[0], &manifest);
        assert_eq!(ds.train.len(), 8);
        assert_eq!(ds.val.len(), 2);
        assert_eq!(ds.test.len(), 2);
    }

    #[test]
    fn misplaced_test_patch_is_reported() {
        let plan = build_fold_plan(&cohort(8), 4, 3, 42).unwrap();
        let manifest: Vec<_> = cohort(8).iter().map(|w| record(&w.wsi_id, 0, AugmentationTag::None)).collect();
        let mut datasets: Vec<_> = plan.runs.iter().map(|r| materialize_run(r, &manifest)).collect();
        let moved = datasets[4].test.pop().unwrap();
        datasets[4].train.push(moved.clone());
        let v = verify_assignments(&plan, &manifest, &datasets);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::WrongSplit);
        assert_eq!(v[0].run.as_deref(), Some(plan.runs[4].name.as_str()));
        assert_eq!(v[0].patch_id.as_deref(), Some(moved.as_str()));
        assert!(v[0].wsi_id.is_some());
    }

    #[test]
    fn augmented_validation_patch_is_reported() {
        let plan = build_fold_plan(&cohort(8), 4, 3, 42).unwrap();
        let val_wsi = plan.runs[0].val[0].clone();
        let manifest = vec![record(&val_wsi, 0, AugmentationTag::CornerBR)];
        let datasets = vec![RunDataset {
            run: plan.runs[0].name.clone(),
            train: vec![],
            val: vec![manifest[0].patch_id.clone()],
            test: vec![],
        }];
        let v = verify_assignments(&plan, &manifest, &datasets);
        assert!(v.iter().any(|x| x.kind == ViolationKind::AugmentedOutsideAugmentSplits));
    }

    #[test]
    fn run_name_pattern() {
        assert!(is_run_name("test_03_cv_02"));
        assert!(!is_run_name("test_3_cv_02"));
        assert!(!is_run_name("fold_03_cv_02"));
    }
}
