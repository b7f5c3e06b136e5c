//! Key slice labels and their CSV format (`volume_id,key_name,slice_index`).

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_KEY_NAMES: [&str; 7] = [
    "head_end",
    "lung_apex",
    "liver_dome",
    "kidney_top",
    "kidney_bottom",
    "iliac_crest",
    "pelvis_bottom",
];

/// Ordered anatomical keys, superior to inferior, with their canonical
/// position scores.
#[derive(Clone, Debug, PartialEq)]
pub struct KeySet {
    names: Vec<String>,
    scores: Vec<f64>,
}

impl Default for KeySet {
    fn default() -> Self {
        let names = DEFAULT_KEY_NAMES.iter().map(|s| s.to_string()).collect();
        let scores = (1..=7).map(|k| 10.0 * k as f64).collect();
        Self { names, scores }
    }
}

impl KeySet {
    pub fn new(names: Vec<String>, scores: Vec<f64>) -> Result<Self> {
        if names.len() != scores.len() || names.len() < 2 {
            return Err(Error::Config(format!(
                "need matching key names and scores (at least 2), got {} names and {} scores",
                names.len(),
                scores.len()
            )));
        }
        if scores.windows(2).any(|w| !(w[0] < w[1])) || scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("key scores must be finite and strictly increasing".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !names.iter().all(|n| seen.insert(n)) {
            return Err(Error::Config("key names must be unique".into()));
        }
        Ok(Self { names, scores })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Anatomical rank of a key name.
    pub fn rank(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn score(&self, name: &str) -> Option<f64> {
        self.rank(name).map(|r| self.scores[r])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeySliceLabel {
    pub key_name: String,
    pub slice_index: usize,
}

/// Labels per volume id, each list sorted in anatomical order.
pub type LabelSet = BTreeMap<String, Vec<KeySliceLabel>>;

#[derive(Debug, Deserialize, Serialize)]
struct Row {
    volume_id: String,
    key_name: String,
    slice_index: usize,
}

/// Parses and validates label CSV. `registry` maps volume id to slice count;
/// when given, unknown volumes and out-of-range indices are rejected.
pub fn parse_labels<R: Read>(
    input: R,
    keys: &KeySet,
    registry: Option<&HashMap<String, usize>>,
) -> Result<LabelSet> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["volume_id", "key_name", "slice_index"] {
        return Err(Error::Malformed(format!(
            "label header must be `volume_id,key_name,slice_index`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = LabelSet::new();
    for row in rdr.deserialize::<Row>() {
        let row = row?;
        if keys.rank(&row.key_name).is_none() {
            return Err(Error::UnknownKey(row.key_name));
        }
        if let Some(reg) = registry {
            let n = *reg
                .get(&row.volume_id)
                .ok_or_else(|| Error::UnknownVolume(row.volume_id.clone()))?;
            if row.slice_index >= n {
                return Err(Error::IndexOutOfRange {
                    volume_id: row.volume_id,
                    index: row.slice_index,
                    n_slices: n,
                });
            }
        }
        let list = out.entry(row.volume_id.clone()).or_default();
        if list.iter().any(|l| l.key_name == row.key_name) {
            return Err(Error::DuplicateLabel {
                volume_id: row.volume_id,
                key: row.key_name,
            });
        }
        list.push(KeySliceLabel {
            key_name: row.key_name,
            slice_index: row.slice_index,
        });
    }
    for (id, list) in &mut out {
        list.sort_by_key(|l| keys.rank(&l.key_name));
        validate_order(id, list)?;
    }
    Ok(out)
}

pub(crate) fn validate_order(volume_id: &str, labels: &[KeySliceLabel]) -> Result<()> {
    if labels.windows(2).any(|w| w[0].slice_index >= w[1].slice_index) {
        return Err(Error::NonMonotoneLabels(volume_id.to_string()));
    }
    Ok(())
}

pub fn load_labels(
    path: &Path,
    keys: &KeySet,
    registry: Option<&HashMap<String, usize>>,
) -> Result<LabelSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_labels(file, keys, registry)
}

pub fn write_labels<W: Write>(out: W, labels: &LabelSet) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (id, list) in labels {
        for l in list {
            w.serialize(Row {
                volume_id: id.clone(),
                key_name: l.key_name.clone(),
                slice_index: l.slice_index,
            })?;
        }
    }
    // An empty label set still gets its header row.
    if labels.values().all(Vec::is_empty) {
        w.write_record(["volume_id", "key_name", "slice_index"])?;
    }
    w.flush().map_err(|e| Error::io("<labels>", e))?;
    Ok(())
}

pub fn save_labels(path: &Path, labels: &LabelSet) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_labels(file, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg(pairs: &[(&str, usize)]) -> HashMap<String, usize> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn accepts_in_range_row() {
        let csv = "volume_id,key_name,slice_index\nvol7,liver_dome,120\n";
        let l = parse_labels(csv.as_bytes(), &KeySet::default(), Some(&reg(&[("vol7", 200)]))).unwrap();
        assert_eq!(l["vol7"][0].slice_index, 120);
    }

    #[test]
    fn rejects_out_of_range_index() {
        let csv = "volume_id,key_name,slice_index\nvol7,liver_dome,500\n";
        let err = parse_labels(csv.as_bytes(), &KeySet::default(), Some(&reg(&[("vol7", 300)])));
        assert!(matches!(err, Err(Error::IndexOutOfRange { index: 500, n_slices: 300, .. })));
    }

    #[test]
    fn rejects_unknown_key_and_duplicates() {
        let keys = KeySet::default();
        let unknown = "volume_id,key_name,slice_index\nv,spleen,3\n";
        assert!(matches!(parse_labels(unknown.as_bytes(), &keys, None), Err(Error::UnknownKey(_))));
        let dup = "volume_id,key_name,slice_index\nv,lung_apex,3\nv,lung_apex,4\n";
        assert!(matches!(parse_labels(dup.as_bytes(), &keys, None), Err(Error::DuplicateLabel { .. })));
    }

    #[test]
    fn rejects_non_monotone_indices() {
        let csv = "volume_id,key_name,slice_index\nv,liver_dome,10\nv,lung_apex,20\n";
        assert!(matches!(
            parse_labels(csv.as_bytes(), &KeySet::default(), None),
            Err(Error::NonMonotoneLabels(_))
        ));
    }

    #[test]
    fn round_trip() {
        let csv = "volume_id,key_name,slice_index\na,lung_apex,3\na,kidney_top,9\nb,head_end,0\n";
        let keys = KeySet::default();
        let l = parse_labels(csv.as_bytes(), &keys, None).unwrap();
        let mut buf = Vec::new();
        write_labels(&mut buf, &l).unwrap();
        assert_eq!(parse_labels(buf.as_slice(), &keys, None).unwrap(), l);
    }
}
