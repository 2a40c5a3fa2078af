//! Deterministic annotation tables and images for exercising curation
//! without the real radiograph corpus.

use std::path::Path;

use rand::Rng as _;

use super::config::{AugmentedSet, CurationConfig};
use super::records::{write_annotations, Projection, RawRecord};
use crate::error::{Error, Result};
use crate::image_io::save_gray;
use crate::rng::indexed_stream;
use crate::synthetic::{texture, PATCH};
use crate::tensor::Tensor;

pub const CLASSES: [&str; 4] = ["boneanomaly", "fracture", "metal", "softtissue"];

fn record(id: String, objects: &[&str], projection: Projection) -> RawRecord {
    RawRecord {
        image_path: format!("{id}.png").into(),
        image_id: id,
        objects: objects.iter().map(|s| s.to_string()).collect(),
        projection,
    }
}

/// Builds a table from `(objects, how many)` groups with ids `{prefix}{n}`.
fn table(prefix: &str, groups: &[(&[&str], usize)]) -> Vec<RawRecord> {
    let mut out = Vec::new();
    for (objects, n) in groups {
        for _ in 0..*n {
            let i = out.len();
            let proj = if i % 2 == 0 {
                Projection::Posteroanterior
            } else {
                Projection::Lateral
            };
            out.push(record(format!("{prefix}{i:05}"), objects, proj));
        }
    }
    out
}

/// Annotation table whose single-class counts match the published curation
/// (boneanomaly 87, metal 77, softtissue 117, plenty of fractures), padded
/// with records that extraction must discard.
pub fn published_counts_table() -> Vec<RawRecord> {
    table(
        "g",
        &[
            (&["boneanomaly"], 80),
            (&["boneanomaly", "text"], 7),
            (&["fracture", "text"], 1100),
            (&["fracture"], 200),
            (&["metal", "text"], 77),
            (&["softtissue"], 117),
            (&["fracture", "softtissue"], 300),
            (&["fracture", "periostealreaction", "text"], 150),
            (&["foreignbody"], 8),
            (&["pronatorsign"], 31),
            (&["periostealreaction", "text"], 12),
            (&["boneanomaly", "metal"], 5),
            (&["text"], 4),
        ],
    )
}

/// The 200-record fixture: four classes of uneven size plus multi-object,
/// excluded and rare-class records.
pub fn synthetic_table() -> Vec<RawRecord> {
    table(
        "s",
        &[
            (&["fracture"], 60),
            (&["fracture", "text"], 10),
            (&["boneanomaly"], 30),
            (&["metal", "text"], 26),
            (&["softtissue"], 34),
            (&["foreignbody"], 8),
            (&["pronatorsign"], 4),
            (&["fracture", "metal"], 18),
            (&["softtissue", "boneanomaly", "text"], 10),
        ],
    )
}

/// Curation settings sized for [`synthetic_table`].
pub fn synthetic_config(seed: u64, leakage_safe: bool) -> CurationConfig {
    CurationConfig {
        set: AugmentedSet::Custom,
        min_class_count: 10,
        fracture_target: 40,
        per_class_target: 40,
        test1_per_class: 20,
        test2_fracture: 5,
        leakage_safe,
        seed,
        resolution: 32,
        ..CurationConfig::default()
    }
}

/// Class of a record for image synthesis: the first non-text object in
/// [`CLASSES`] order, else the first object.
fn texture_class(rec: &RawRecord) -> usize {
    CLASSES
        .iter()
        .position(|c| rec.objects.contains(*c))
        .unwrap_or(rec.objects.len() % CLASSES.len())
}

/// Writes `annotations.csv` and one `size × size` PNG per record under `dir`.
/// Each image has a smooth background and a class texture patch at a seeded
/// position.
pub fn write_fixture(dir: &Path, records: &[RawRecord], size: usize, seed: u64) -> Result<()> {
    if size < 2 * PATCH {
        return Err(Error::Config(format!(
            "fixture images need at least {} pixels",
            2 * PATCH
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("annotations.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_annotations(records, file)?;
    for (i, rec) in records.iter().enumerate() {
        let mut rng = indexed_stream(seed, "fixture.image", i as u64);
        let class = texture_class(rec);
        let base: f64 = rng.random_range(0.25..0.45);
        let (py, px) = (rng.random_range(0..=size - PATCH), rng.random_range(0..=size - PATCH));
        let mut data = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let shade = base + 0.2 * (y as f64 / size as f64) + 0.05 * rng.random::<f64>();
                data[y * size + x] = shade;
            }
        }
        for dy in 0..PATCH {
            for dx in 0..PATCH {
                data[(py + dy) * size + px + dx] = if texture(class, dy, dx) { 0.95 } else { 0.05 };
            }
        }
        save_gray(&dir.join(&rec.image_path), &Tensor::new([size, size], data)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::plan::plan;

    #[test]
    fn fixture_sizes() {
        assert_eq!(synthetic_table().len(), 200);
        let ex = crate::curation::extract_single_class(&published_counts_table(), &Default::default()).unwrap();
        let n = |c: &str| ex.iter().filter(|r| r.class == c).count();
        assert_eq!((n("boneanomaly"), n("metal"), n("softtissue")), (87, 77, 117));
        assert!(n("fracture") >= 1220);
        plan(&synthetic_table(), &synthetic_config(0, true)).unwrap();
    }
}
