//! Line-delimited JSON dataset records and split files.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regions::{Region, RegionSet};
use crate::scene::SceneVector;
use crate::textmetrics::{tokenize, Vocabulary};

/// One image: its regions, captions and optional scene information.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_feature: Option<Vec<f64>>,
    pub regions: Vec<Region>,
    #[serde(default)]
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneVector>,
}

impl DatasetRecord {
    pub fn region_set(&self) -> Result<RegionSet> {
        RegionSet::new(self.regions.clone())
    }

    pub fn tokenized_captions(&self) -> Vec<Vec<String>> {
        self.captions.iter().map(|c| tokenize(c)).collect()
    }

    pub fn encoded_captions(&self, vocab: &Vocabulary) -> Vec<Vec<usize>> {
        self.tokenized_captions()
            .iter()
            .map(|t| vocab.encode(t))
            .collect()
    }

    pub fn image_size(&self) -> Result<(u32, u32)> {
        match (self.width, self.height) {
            (Some(w), Some(h)) => Ok((w, h)),
            _ => Err(Error::Config(format!(
                "record {} has no image size",
                self.image_id
            ))),
        }
    }
}

/// Checks the dataset invariants: at least one region per record, captions
/// when `need_captions`, and one feature width across the set.
pub fn validate_records(records: &[DatasetRecord], need_captions: bool) -> Result<usize> {
    let first = records.first().ok_or(Error::Empty("dataset"))?;
    let dim = first
        .regions
        .first()
        .map(|r| r.feature.len())
        .ok_or(Error::Empty("region list"))?;
    for rec in records {
        if rec.regions.is_empty() {
            return Err(Error::Empty("region list"));
        }
        if need_captions && rec.captions.iter().all(|c| tokenize(c).is_empty()) {
            return Err(Error::Config(format!("record {} has no caption", rec.image_id)));
        }
        for r in &rec.regions {
            if r.feature.len() != dim {
                return Err(Error::Dimension {
                    what: "region feature",
                    expected: dim,
                    actual: r.feature.len(),
                });
            }
        }
    }
    Ok(dim)
}

pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Split membership: lines of `<split> <image_id>`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits(pub BTreeMap<String, Vec<String>>);

impl Splits {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(split), Some(id), None) => {
                    map.entry(split.to_string()).or_default().push(id.to_string())
                }
                _ => return Err(Error::Parse(format!("split line {}: {line:?}", i + 1))),
            }
        }
        Ok(Self(map))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (split, ids) in &self.0 {
            for id in ids {
                out.push_str(&format!("{split} {id}\n"));
            }
        }
        out
    }

    /// Records of `split`, in split-file order.
    pub fn select(&self, split: &str, records: &[DatasetRecord]) -> Result<Vec<DatasetRecord>> {
        let ids = self
            .0
            .get(split)
            .ok_or_else(|| Error::Config(format!("split {split:?} not in split file")))?;
        let by_id: BTreeMap<&str, &DatasetRecord> =
            records.iter().map(|r| (r.image_id.as_str(), r)).collect();
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|r| (*r).clone())
                    .ok_or_else(|| Error::Config(format!("image {id} not in dataset")))
            })
            .collect()
    }
}
