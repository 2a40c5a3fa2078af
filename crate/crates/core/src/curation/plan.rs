//! Record-level curation: filtering, test holdout, downsampling, augmentation
//! planning and the train/val split. No pixels are touched here.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{AugmentedSet, CurationConfig, TestMode};
use super::manifest::{Manifest, ManifestRecord, Split};
use super::records::{count_classes, extract_single_class, format_counts, ClassRecord, Counts, RawRecord};
use super::transform::{self, AugmentationParams, TransformLog};
use crate::error::{Error, Result};
use crate::rng::{indexed_stream, stream};

/// A planned image: an original or an augmentation of one.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub image_id: String,
    pub class: String,
    pub parent_id: Option<String>,
    pub transform_log: Option<TransformLog>,
}

impl Item {
    pub fn original(image_id: &str, class: &str) -> Self {
        Self {
            image_id: image_id.into(),
            class: class.into(),
            parent_id: None,
            transform_log: None,
        }
    }

    fn family(&self) -> &str {
        self.parent_id.as_deref().unwrap_or(&self.image_id)
    }
}

fn by_class(records: &[ClassRecord]) -> BTreeMap<String, Vec<ClassRecord>> {
    let mut m: BTreeMap<String, Vec<ClassRecord>> = BTreeMap::new();
    for r in records {
        m.entry(r.class.clone()).or_default().push(r.clone());
    }
    m
}

/// Drops classes with fewer than `min` records. Returns the kept records
/// and the dropped class counts.
pub fn filter_classes(records: &[ClassRecord], min: usize) -> (Vec<ClassRecord>, Counts) {
    let counts = count_classes(records.iter().map(|r| r.class.as_str()));
    let dropped: Counts = counts.into_iter().filter(|(_, n)| *n < min).collect();
    if !dropped.is_empty() {
        log::info!("dropping classes below {min} records: {}", format_counts(&dropped));
    }
    let kept = records
        .iter()
        .filter(|r| !dropped.contains_key(&r.class))
        .cloned()
        .collect();
    (kept, dropped)
}

/// Uniform seeded subsample of `class` to exactly `target` records; other
/// classes pass through. Output stays sorted by id.
pub fn downsample(records: &[ClassRecord], class: &str, target: usize, seed: u64) -> Result<Vec<ClassRecord>> {
    let mut pick: Vec<&ClassRecord> = records.iter().filter(|r| r.class == class).collect();
    if pick.len() < target {
        return Err(Error::Data(format!(
            "cannot downsample {class} to {target}: only {} available",
            pick.len()
        )));
    }
    pick.shuffle(&mut stream(seed, "curate.downsample"));
    let keep: std::collections::BTreeSet<&str> = pick[..target].iter().map(|r| r.image_id.as_str()).collect();
    Ok(records
        .iter()
        .filter(|r| r.class != class || keep.contains(r.image_id.as_str()))
        .cloned()
        .collect())
}

/// Class filtering followed by fracture downsampling to the configured size.
pub fn filter_and_downsample(records: &[ClassRecord], cfg: &CurationConfig) -> Result<Vec<ClassRecord>> {
    let (kept, _) = filter_classes(records, cfg.min_class_count);
    if !kept.iter().any(|r| r.class == cfg.fracture_class) {
        return Ok(kept);
    }
    downsample(&kept, &cfg.fracture_class, cfg.effective_fracture_target(), cfg.seed)
}

/// Splits off test originals: `floor(test_fraction · n)` of each ordinary
/// class and `test1_per_class` fractures. Returns `(pool, held_out)`.
pub fn hold_out_tests(records: &[ClassRecord], cfg: &CurationConfig) -> Result<(Vec<ClassRecord>, Vec<ClassRecord>)> {
    let mut pool = Vec::new();
    let mut test = Vec::new();
    for (class, mut recs) in by_class(records) {
        let k = if class == cfg.fracture_class {
            cfg.test1_per_class
        } else {
            (cfg.test_fraction * recs.len() as f64).floor() as usize
        };
        if k == 0 || k >= recs.len() {
            return Err(Error::Data(format!(
                "class {class} has {} records; cannot hold out {k} for testing",
                recs.len()
            )));
        }
        recs.shuffle(&mut stream(cfg.seed, &format!("curate.holdout.{class}")));
        test.extend_from_slice(&recs[..k]);
        pool.extend_from_slice(&recs[k..]);
    }
    pool.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    test.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok((pool, test))
}

/// Plans `target − parents.len()` augmentations, cycling parents in order.
/// Each record's draws come from its own stream `(seed, tag, index)`.
pub fn augment_to(
    parents: &[Item],
    target: usize,
    params: &AugmentationParams,
    resolution: usize,
    seed: u64,
    tag: &str,
) -> Result<Vec<Item>> {
    if parents.is_empty() {
        return Err(Error::Data(format!("{tag}: nothing to augment")));
    }
    if target < parents.len() {
        log::warn!(
            "{tag}: target {target} is below the {} records present; nothing added",
            parents.len()
        );
        return Ok(Vec::new());
    }
    let mut per_parent = vec![0usize; parents.len()];
    Ok((0..target - parents.len())
        .map(|k| {
            let p = k % parents.len();
            per_parent[p] += 1;
            let parent = &parents[p];
            let mut rng = indexed_stream(seed, tag, k as u64);
            Item {
                image_id: format!("{}_aug{}", parent.image_id, per_parent[p]),
                class: parent.class.clone(),
                parent_id: Some(parent.image_id.clone()),
                transform_log: Some(transform::sample(params, resolution, &mut rng)),
            }
        })
        .collect())
}

/// Per-class `floor(split_fraction · n)` train share. With `leakage_safe`,
/// whole families are placed first-fit in a seeded order, so the train share
/// may fall slightly below the target.
pub fn split_train_val(items: &[Item], cfg: &CurationConfig) -> Result<(Vec<Item>, Vec<Item>)> {
    let mut classes: BTreeMap<&str, Vec<&Item>> = BTreeMap::new();
    for it in items {
        classes.entry(&it.class).or_default().push(it);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (class, members) in classes {
        let target = (cfg.split_fraction * members.len() as f64).floor() as usize;
        let mut rng = stream(cfg.seed, &format!("curate.split.{class}"));
        let (mut t, mut v) = (Vec::new(), Vec::new());
        if cfg.leakage_safe {
            let mut families: BTreeMap<&str, Vec<&Item>> = BTreeMap::new();
            for m in &members {
                families.entry(m.family()).or_default().push(m);
            }
            let mut fams: Vec<Vec<&Item>> = families.into_values().collect();
            fams.shuffle(&mut rng);
            for f in fams {
                if t.len() + f.len() <= target {
                    t.extend(f);
                } else {
                    v.extend(f);
                }
            }
        } else {
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            v = shuffled.split_off(target);
            t = shuffled;
        }
        if t.is_empty() || v.is_empty() {
            return Err(Error::Data(format!(
                "class {class} with {} records cannot fill both train ({}) and val ({})",
                members.len(),
                t.len(),
                v.len()
            )));
        }
        train.extend(t.into_iter().cloned());
        val.extend(v.into_iter().cloned());
    }
    Ok((train, val))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationSummary {
    pub set: AugmentedSet,
    pub seed: u64,
    pub leakage_safe: bool,
    pub test_mode: TestMode,
    pub single_class: Counts,
    pub dropped_classes: Counts,
    /// Per-class size of the training pool after augmentation.
    pub augmented: Counts,
    pub train: Counts,
    pub val: Counts,
    pub test1: Counts,
    pub test2: Counts,
    pub totals: BTreeMap<String, usize>,
}

/// Record-level result of curation. `sources` maps each original id to its
/// path relative to the input image directory.
#[derive(Debug, Clone, PartialEq)]
pub struct CurationPlan {
    pub manifest: Manifest,
    pub sources: BTreeMap<String, PathBuf>,
    pub summary: CurationSummary,
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn to_record(it: Item, split: Split) -> ManifestRecord {
    let dir = if it.parent_id.is_some() { "aug" } else { "orig" };
    ManifestRecord {
        image_path: format!("{dir}/{}/{}.png", file_stem(&it.class), file_stem(&it.image_id)),
        image_id: it.image_id,
        class: it.class,
        split,
        parent_id: it.parent_id,
        transform_log: it.transform_log,
    }
}

fn originals(recs: &[ClassRecord]) -> Vec<Item> {
    recs.iter().map(|r| Item::original(&r.image_id, &r.class)).collect()
}

/// Runs every record-level step. Deterministic for a given input and seed.
pub fn plan(raw: &[RawRecord], cfg: &CurationConfig) -> Result<CurationPlan> {
    cfg.validate()?;
    let single = extract_single_class(raw, &cfg.excluded_classes)?;
    let single_counts = count_classes(single.iter().map(|r| r.class.as_str()));
    let (kept, dropped) = filter_classes(&single, cfg.min_class_count);
    if kept.is_empty() {
        return Err(Error::Data(format!(
            "every class has fewer than {} records: {}",
            cfg.min_class_count,
            format_counts(&single_counts)
        )));
    }
    let (pool, held_out) = hold_out_tests(&kept, cfg)?;
    let pool = if pool.iter().any(|r| r.class == cfg.fracture_class) {
        downsample(&pool, &cfg.fracture_class, cfg.effective_fracture_target(), cfg.seed)?
    } else {
        pool
    };
    let res = cfg.resolution;
    let aug = &cfg.augmentation;

    let mut training = Vec::new();
    for (class, recs) in by_class(&pool) {
        let parents = originals(&recs);
        let extra = if class == cfg.fracture_class {
            Vec::new()
        } else {
            match cfg.class_target(&class)? {
                Some(t) => augment_to(
                    &parents,
                    t,
                    aug,
                    res,
                    cfg.seed,
                    &format!("curate.augment.train.{class}"),
                )?,
                None => Vec::new(),
            }
        };
        training.extend(parents);
        training.extend(extra);
    }
    let augmented = count_classes(training.iter().map(|i| i.class.as_str()));
    let (train, val) = split_train_val(&training, cfg)?;

    let mut records: Vec<ManifestRecord> = train
        .into_iter()
        .map(|i| to_record(i, Split::Train))
        .chain(val.into_iter().map(|i| to_record(i, Split::Val)))
        .collect();

    for (class, recs) in by_class(&held_out) {
        let tests = originals(&recs);
        let test2: Vec<Item> = if class == cfg.fracture_class {
            let mut pick = tests.clone();
            pick.shuffle(&mut stream(cfg.seed, "curate.test2.fracture"));
            pick.truncate(cfg.test2_fracture);
            pick.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            pick
        } else {
            tests.clone()
        };
        records.extend(test2.into_iter().map(|i| to_record(i, Split::Test2)));
        if cfg.test_mode == TestMode::Augmented {
            let extra = if class == cfg.fracture_class {
                Vec::new()
            } else {
                let n = tests.len();
                let target = n * (cfg.test1_per_class / n).max(1);
                augment_to(
                    &tests,
                    target,
                    aug,
                    res,
                    cfg.seed,
                    &format!("curate.augment.test1.{class}"),
                )?
            };
            records.extend(tests.into_iter().chain(extra).map(|i| to_record(i, Split::Test1)));
        }
    }

    let manifest = Manifest::new(records);
    manifest.check(cfg.leakage_safe)?;
    let sources = kept
        .iter()
        .map(|r| (r.image_id.clone(), r.image_path.clone()))
        .collect();
    let split_counts = |s| manifest.counts(s);
    let totals = Split::ALL
        .iter()
        .map(|s| (s.to_string(), manifest.split(*s).count()))
        .chain([("augmented".to_string(), training.len())])
        .collect();
    let summary = CurationSummary {
        set: cfg.set,
        seed: cfg.seed,
        leakage_safe: cfg.leakage_safe,
        test_mode: cfg.test_mode,
        single_class: single_counts,
        dropped_classes: dropped,
        augmented,
        train: split_counts(Split::Train),
        val: split_counts(Split::Val),
        test1: split_counts(Split::Test1),
        test2: split_counts(Split::Test2),
        totals,
    };
    log::info!(
        "curated set {}: train {}, val {}, test1 {}, test2 {}",
        cfg.set,
        summary.totals["train"],
        summary.totals["val"],
        summary.totals["test1"],
        summary.totals["test2"]
    );
    Ok(CurationPlan {
        manifest,
        sources,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::records::Projection;

    fn recs(class: &str, n: usize) -> Vec<ClassRecord> {
        (0..n)
            .map(|i| ClassRecord {
                image_id: format!("{class}{i:04}"),
                image_path: format!("{class}{i:04}.png").into(),
                class: class.into(),
                projection: Projection::Unknown,
            })
            .collect()
    }

    #[test]
    fn downsample_is_exact_and_seeded() {
        let mut all = recs("fracture", 700);
        all.extend(recs("metal", 10));
        let a = downsample(&all, "fracture", 500, 7).unwrap();
        assert_eq!(a.iter().filter(|r| r.class == "fracture").count(), 500);
        assert_eq!(a.iter().filter(|r| r.class == "metal").count(), 10);
        assert_eq!(a, downsample(&all, "fracture", 500, 7).unwrap());
        assert_ne!(a, downsample(&all, "fracture", 500, 8).unwrap());
        assert_eq!(
            downsample(&all, "fracture", 701, 7).unwrap_err().kind(),
            crate::ErrorKind::Data
        );
    }

    #[test]
    fn filtering_drops_small_classes() {
        let mut all = recs("metal", 60);
        all.extend(recs("pronatorsign", 3));
        let (kept, dropped) = filter_classes(&all, 50);
        assert_eq!(kept.len(), 60);
        assert_eq!(dropped["pronatorsign"], 3);
    }

    #[test]
    fn augment_round_robin_and_idempotent() {
        let parents: Vec<Item> = (0..3).map(|i| Item::original(&format!("p{i}"), "metal")).collect();
        let p = AugmentationParams::default();
        assert!(augment_to(&parents, 3, &p, 8, 0, "t").unwrap().is_empty());
        assert!(augment_to(&parents, 2, &p, 8, 0, "t").unwrap().is_empty());
        let extra = augment_to(&parents, 10, &p, 8, 0, "t").unwrap();
        assert_eq!(extra.len(), 7);
        let parent_ids: Vec<&str> = extra.iter().map(|i| i.parent_id.as_deref().unwrap()).collect();
        assert_eq!(parent_ids, ["p0", "p1", "p2", "p0", "p1", "p2", "p0"]);
        assert_eq!(extra[6].image_id, "p0_aug3");
        assert!(augment_to(&[], 4, &p, 8, 0, "t").is_err());
    }

    #[test]
    fn split_shares() {
        let parents: Vec<Item> = (0..10).map(|i| Item::original(&format!("p{i}"), "metal")).collect();
        let mut items = parents.clone();
        items.extend(augment_to(&parents, 50, &AugmentationParams::default(), 8, 0, "t").unwrap());
        let mut cfg = CurationConfig {
            leakage_safe: false,
            ..Default::default()
        };
        let (t, v) = split_train_val(&items, &cfg).unwrap();
        assert_eq!((t.len(), v.len()), (40, 10));
        cfg.leakage_safe = true;
        let (t, v) = split_train_val(&items, &cfg).unwrap();
        assert_eq!(t.len() + v.len(), 50);
        let tf: std::collections::BTreeSet<&str> = t.iter().map(|i| i.family()).collect();
        assert!(v.iter().all(|i| !tf.contains(i.family())));
        assert!(split_train_val(&items[..1], &cfg).is_err());
    }
}
