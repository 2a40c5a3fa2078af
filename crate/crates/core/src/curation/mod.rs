//! Dataset curation: single-class extraction, class filtering, fracture
//! downsampling, augmentation to balance, train/val/test construction and
//! ZCA whitening.
//!
//! Planning ([`plan()`]) works on records only. [`render`] then writes the
//! resized originals and augmented images, and [`curate`] ties both together
//! with the manifest and whitening outputs:
//!
//! ```text
//! {out}/manifest.jsonl
//! {out}/curation_summary.json
//! {out}/curation_config.toml
//! {out}/zca.arrays            when whitening is enabled
//! {out}/orig/{class}/{id}.png
//! {out}/aug/{class}/{id}.png
//! ```

pub mod config;
pub mod fixtures;
pub mod manifest;
pub mod plan;
pub mod records;
pub mod transform;
pub mod zca;

use std::collections::BTreeMap;
use std::path::Path;

pub use config::{AugmentedSet, CurationConfig, TestMode};
pub use manifest::{Manifest, ManifestRecord, Split};
pub use plan::{
    augment_to, downsample, filter_and_downsample, filter_classes, hold_out_tests, plan, split_train_val, CurationPlan,
    CurationSummary, Item,
};
pub use records::{extract_single_class, read_annotations, ClassRecord, Counts, Projection, RawRecord};
pub use transform::{AugmentationParams, TransformLog};
pub use zca::Zca;

use crate::checkpoint::ArrayFile;
use crate::error::{Error, Result};
use crate::harness::data::{Dataset, Example};
use crate::image_io::{load_gray, resize_bilinear, save_gray};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SUMMARY_FILE: &str = "curation_summary.json";
pub const CONFIG_FILE: &str = "curation_config.toml";
pub const ZCA_FILE: &str = "zca.arrays";

fn load_square(path: &Path, resolution: usize) -> Result<Tensor> {
    let img = load_gray(path)?;
    if img.shape() == [resolution, resolution] {
        Ok(img)
    } else {
        resize_bilinear(&img, resolution, resolution)
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Writes every image the manifest references. Originals are resized to the
/// curation resolution; augmented images are derived from the resized parent.
pub fn render(plan: &CurationPlan, images_dir: &Path, out_dir: &Path, resolution: usize) -> Result<()> {
    let mut parents: BTreeMap<&str, Tensor> = BTreeMap::new();
    for rec in &plan.manifest.records {
        let id = rec.family();
        if parents.contains_key(id) {
            continue;
        }
        let src = plan
            .sources
            .get(id)
            .ok_or_else(|| Error::Data(format!("no source image for {id}")))?;
        parents.insert(id, load_square(&images_dir.join(src), resolution)?);
    }
    let mut written = std::collections::BTreeSet::new();
    for rec in &plan.manifest.records {
        if !written.insert(rec.image_path.as_str()) {
            continue;
        }
        let dst = out_dir.join(&rec.image_path);
        create_parent(&dst)?;
        let parent = &parents[rec.family()];
        match &rec.transform_log {
            Some(log) => save_gray(&dst, &transform::apply(parent, log)?)?,
            None => save_gray(&dst, parent)?,
        }
    }
    Ok(())
}

/// Fits whitening on the rendered training images.
pub fn fit_whitening(manifest: &Manifest, out_dir: &Path, epsilon: f64) -> Result<Zca> {
    let images = manifest
        .split(Split::Train)
        .map(|r| load_gray(&out_dir.join(&r.image_path)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = images.iter().collect();
    Zca::fit(&refs, epsilon)
}

/// Full pipeline from an annotation table and image directory to a curated
/// dataset directory.
pub fn curate(annotations: &Path, images_dir: &Path, out_dir: &Path, cfg: &CurationConfig) -> Result<CurationSummary> {
    let raw = read_annotations(annotations)?;
    let plan = plan::plan(&raw, cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    render(&plan, images_dir, out_dir, cfg.resolution)?;
    let zca_path = out_dir.join(ZCA_FILE);
    if cfg.augmentation.zca_whitening {
        let z = fit_whitening(&plan.manifest, out_dir, cfg.augmentation.zca_epsilon)?;
        z.to_arrays()?.write(&zca_path)?;
    } else if zca_path.exists() {
        std::fs::remove_file(&zca_path).map_err(|e| Error::io(&zca_path, e))?;
    }
    plan.manifest.write(&out_dir.join(MANIFEST_FILE))?;
    let summary_path = out_dir.join(SUMMARY_FILE);
    std::fs::write(&summary_path, serde_json::to_string_pretty(&plan.summary)? + "\n")
        .map_err(|e| Error::io(&summary_path, e))?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(plan.summary)
}

/// Loads one split of a curated manifest. Class indices follow the sorted
/// class names of the whole manifest. Whitening, when present next to the
/// manifest, is applied before resizing to `resolution`.
pub fn load_split(manifest_path: &Path, split: Split, resolution: usize) -> Result<Dataset> {
    let manifest = Manifest::read(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let zca_path = dir.join(ZCA_FILE);
    let zca = if zca_path.exists() {
        Some(Zca::from_arrays(&ArrayFile::read(&zca_path)?)?)
    } else {
        None
    };
    let classes = manifest.classes();
    let examples = manifest
        .split(split)
        .map(|r| {
            let mut img = load_gray(&dir.join(&r.image_path))?;
            if let Some(z) = &zca {
                img = z.apply(&img)?;
            }
            if img.shape() != [resolution, resolution] {
                img = resize_bilinear(&img, resolution, resolution)?;
            }
            Ok(Example {
                id: r.image_id.clone(),
                group: r.family().to_string(),
                image: img,
                label: classes.binary_search(&r.class).expect("class listed by manifest"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if examples.is_empty() {
        return Err(Error::Data(format!(
            "split {split} of {} is empty",
            manifest_path.display()
        )));
    }
    Dataset::new(classes, examples)
}
