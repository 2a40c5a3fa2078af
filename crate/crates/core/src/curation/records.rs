//! Annotation table input and single-class extraction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hand-side marker; never counts as a pathology.
pub const TEXT_LABEL: &str = "text";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Posteroanterior,
    Lateral,
    #[default]
    Unknown,
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "posteroanterior" | "pa" | "ap" | "frontal" => Ok(Self::Posteroanterior),
            "lateral" | "lat" => Ok(Self::Lateral),
            "" | "unknown" => Ok(Self::Unknown),
            other => Err(Error::Data(format!("unknown projection {other:?}"))),
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Posteroanterior => "posteroanterior",
            Self::Lateral => "lateral",
            Self::Unknown => "unknown",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub image_id: String,
    /// Relative to the image directory.
    pub image_path: PathBuf,
    pub objects: BTreeSet<String>,
    pub projection: Projection,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    image_id: String,
    image_path: String,
    objects: String,
    #[serde(default)]
    projection: String,
}

/// Reads `image_id,image_path,objects,projection` rows with a header line.
/// Objects are `;`-joined and lower-cased.
pub fn parse_annotations<R: Read>(reader: R) -> Result<Vec<RawRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for row in rdr.deserialize() {
        let row: Row = row?;
        let objects: BTreeSet<String> = row
            .objects
            .split(';')
            .map(|o| o.trim().to_ascii_lowercase())
            .filter(|o| !o.is_empty())
            .collect();
        if objects.is_empty() {
            return Err(Error::Data(format!("record {} lists no objects", row.image_id)));
        }
        if !seen.insert(row.image_id.clone()) {
            return Err(Error::Data(format!("duplicate image id {}", row.image_id)));
        }
        out.push(RawRecord {
            image_id: row.image_id,
            image_path: PathBuf::from(row.image_path),
            objects,
            projection: row.projection.parse()?,
        });
    }
    Ok(out)
}

pub fn read_annotations(path: &Path) -> Result<Vec<RawRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(file)
}

pub fn write_annotations<W: Write>(records: &[RawRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(Row {
            image_id: r.image_id.clone(),
            image_path: r.image_path.to_string_lossy().into_owned(),
            objects: r.objects.iter().cloned().collect::<Vec<_>>().join(";"),
            projection: r.projection.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io("<annotations>", e))?;
    Ok(())
}

/// A record carrying exactly one pathology class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRecord {
    pub image_id: String,
    pub image_path: PathBuf,
    pub class: String,
    pub projection: Projection,
}

pub type Counts = BTreeMap<String, usize>;

pub fn count_classes<'a>(classes: impl IntoIterator<Item = &'a str>) -> Counts {
    let mut c = Counts::new();
    for k in classes {
        *c.entry(k.to_string()).or_default() += 1;
    }
    c
}

pub fn format_counts(counts: &Counts) -> String {
    counts
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Keeps records whose objects, ignoring the text marker, are a single
/// non-excluded class. Output is sorted by image id.
pub fn extract_single_class(raw: &[RawRecord], excluded: &BTreeSet<String>) -> Result<Vec<ClassRecord>> {
    if raw.is_empty() {
        return Err(Error::Data("annotation table is empty".into()));
    }
    let mut out: Vec<ClassRecord> = raw
        .iter()
        .filter_map(|r| {
            let mut objs = r.objects.iter().filter(|o| o.as_str() != TEXT_LABEL);
            match (objs.next(), objs.next()) {
                (Some(class), None) if !excluded.contains(class) => Some(ClassRecord {
                    image_id: r.image_id.clone(),
                    image_path: r.image_path.clone(),
                    class: class.clone(),
                    projection: r.projection,
                }),
                _ => None,
            }
        })
        .collect();
    if out.is_empty() {
        let objects = count_classes(raw.iter().flat_map(|r| r.objects.iter().map(String::as_str)));
        return Err(Error::Data(format!(
            "no single-class records remain; object counts: {}",
            format_counts(&objects)
        )));
    }
    out.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    log::info!(
        "single-class records: {}",
        format_counts(&count_classes(out.iter().map(|r| r.class.as_str())))
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, objs: &[&str]) -> RawRecord {
        RawRecord {
            image_id: id.into(),
            image_path: format!("{id}.png").into(),
            objects: objs.iter().map(|s| s.to_string()).collect(),
            projection: Projection::Unknown,
        }
    }

    #[test]
    fn extraction_rules() {
        let excluded: BTreeSet<String> = ["foreignbody".to_string()].into();
        let raw = vec![
            rec("a", &["fracture", "softtissue"]),
            rec("b", &["fracture", "text"]),
            rec("c", &["foreignbody"]),
            rec("d", &["metal"]),
            rec("e", &["text"]),
        ];
        let got = extract_single_class(&raw, &excluded).unwrap();
        let ids: Vec<_> = got.iter().map(|r| (r.image_id.as_str(), r.class.as_str())).collect();
        assert_eq!(ids, [("b", "fracture"), ("d", "metal")]);
        let err = extract_single_class(&raw[..1], &excluded).unwrap_err();
        assert!(err.to_string().contains("fracture=1"));
        assert!(extract_single_class(&[], &excluded).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let text = "image_id,image_path,objects,projection\n\
                    p1,img/p1.png,Fracture;text,pa\n\
                    p2,img/p2.png,metal,lateral\n\
                    p3,img/p3.png,softtissue,\n";
        let recs = parse_annotations(text.as_bytes()).unwrap();
        assert_eq!(recs[0].objects, ["fracture".to_string(), "text".into()].into());
        assert_eq!(recs[0].projection, Projection::Posteroanterior);
        assert_eq!(recs[2].projection, Projection::Unknown);
        let mut buf = Vec::new();
        write_annotations(&recs, &mut buf).unwrap();
        assert_eq!(parse_annotations(buf.as_slice()).unwrap(), recs);
        assert!(parse_annotations("image_id,image_path,objects,projection\nx,x.png,,pa\n".as_bytes()).is_err());
        assert!(
            parse_annotations("image_id,image_path,objects,projection\nx,x.png,a,pa\nx,y.png,b,pa\n".as_bytes())
                .is_err()
        );
    }
}
