//! Dataset manifest: one line per clip with its split, labels, and
//! subgroup tags, plus provenance digests of every input it references.

use std::collections::BTreeMap;
use std::path::Path;

use super::{io_err, sha256_hex, AgeGroup, DataError, Split};

/// One clip reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub recording_id: String,
    pub clip_index: usize,
    pub split: Split,
    pub patient_id: String,
    pub age_group: AgeGroup,
    pub icu: bool,
    /// Gold seizure-type tag for gold-positive clips.
    pub seizure_type: Option<String>,
    /// Gold seizure label when the clip was expert-labeled.
    pub gold_seizure: Option<bool>,
    /// Note-derived attribute bits, aligned with `attribute_names`.
    pub weak_labels: Vec<bool>,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    pub attribute_names: Vec<String>,
    pub rows: Vec<ManifestRow>,
    /// Free-form provenance: seeds, fractions, input digests.
    pub provenance: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn rows_in(&self, split: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    pub fn patients_are_disjoint(&self) -> bool {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for r in &self.rows {
            match seen.get(r.patient_id.as_str()) {
                Some(&s) if s != r.split => return false,
                _ => {
                    seen.insert(&r.patient_id, r.split);
                }
            }
        }
        true
    }

    fn body(&self) -> String {
        let mut out = String::new();
        out.push_str("recording_id,clip_index,split,patient_id,age_group,icu,seizure_type,gold,weak\n");
        for r in &self.rows {
            let weak: String = r
                .weak_labels
                .iter()
                .map(|&b| if b { '1' } else { '0' })
                .collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.recording_id,
                r.clip_index,
                r.split.as_str(),
                r.patient_id,
                r.age_group.as_str(),
                r.icu as u8,
                r.seizure_type.as_deref().unwrap_or(""),
                r.gold_seizure.map(|b| (b as u8).to_string()).unwrap_or_default(),
                weak,
            ));
        }
        out
    }

    /// Digest over attributes, provenance, and every row; changes iff any
    /// referenced content (recorded in provenance digests) or row changes.
    pub fn digest(&self) -> String {
        let mut text = String::new();
        text.push_str(&self.attribute_names.join(";"));
        text.push('\n');
        for (k, v) in &self.provenance {
            text.push_str(&format!("{k}={v}\n"));
        }
        text.push_str(&self.body());
        sha256_hex(text.as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        out.push_str("# onsetkit-manifest v1\n");
        out.push_str(&format!("# attributes={}\n", self.attribute_names.join(";")));
        for (k, v) in &self.provenance {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out.push_str(&format!("# digest={}\n", self.digest()));
        out.push_str(&self.body());
        std::fs::write(path, out).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut manifest = DatasetManifest::default();
        let mut saw_header = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                if let Some((k, v)) = comment.split_once('=') {
                    if k == "attributes" {
                        manifest.attribute_names =
                            v.split(';').map(|s| s.to_string()).filter(|s| !s.is_empty()).collect();
                    } else if k != "digest" {
                        manifest.provenance.insert(k.to_string(), v.to_string());
                    }
                }
                continue;
            }
            if !saw_header {
                // column header line
                saw_header = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 9 {
                return Err(DataError::BadData(format!(
                    "manifest line {}: expected 9 fields, got {}",
                    i + 1,
                    fields.len()
                )));
            }
            manifest.rows.push(ManifestRow {
                recording_id: fields[0].to_string(),
                clip_index: fields[1]
                    .parse()
                    .map_err(|_| DataError::BadData(format!("bad clip index '{}'", fields[1])))?,
                split: Split::parse(fields[2])?,
                patient_id: fields[3].to_string(),
                age_group: AgeGroup::parse(fields[4])?,
                icu: fields[5] == "1",
                seizure_type: (!fields[6].is_empty()).then(|| fields[6].to_string()),
                gold_seizure: match fields[7] {
                    "" => None,
                    "0" => Some(false),
                    "1" => Some(true),
                    other => {
                        return Err(DataError::BadData(format!("bad gold field '{other}'")))
                    }
                },
                weak_labels: fields[8].chars().map(|c| c == '1').collect(),
            });
        }
        Ok(manifest)
    }
}
