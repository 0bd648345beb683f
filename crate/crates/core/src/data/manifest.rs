//! Line-delimited JSON dataset manifests.
//!
//! Every line is one JSON object. Sample records carry `id`, `path`
//! (relative to the manifest), `label` and `split`. An optional first line
//! without an `id` declares dataset-wide settings:
//!
//! ```text
//! {"dim": 64, "label_map": {"angry": 0, "happy": 1}, "label_midpoints": {...}}
//! {"id": "utt1", "path": "feats/utt1.feat", "label": "angry", "split": "train"}
//! ```
//!
//! Without a `label_map`, classes are numbered in sorted label order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split '{other}' (expected train, dev or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    #[serde(rename = "path")]
    pub feature_path: String,
    pub label: String,
    pub split: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_map: Option<BTreeMap<String, usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_midpoints: Option<BTreeMap<String, f64>>,
}

/// One validated sample entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub feature_path: String,
    pub label: String,
    pub class: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub samples: Vec<Sample>,
    pub label_map: BTreeMap<String, usize>,
    pub label_midpoints: BTreeMap<String, f64>,
    /// Declared frame feature dimension, if any.
    pub dim: Option<usize>,
    /// Directory that feature paths are relative to.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.label_map.len()
    }

    /// Label names indexed by class.
    pub fn class_names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.label_map.len()];
        for (label, &c) in &self.label_map {
            names[c] = label.clone();
        }
        names
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn feature_path(&self, sample: &Sample) -> PathBuf {
        self.base_dir.join(&sample.feature_path)
    }

    /// Midpoint per class, `None` where the manifest defines none.
    pub fn midpoints_by_class(&self) -> Vec<Option<f64>> {
        let mut out = vec![None; self.label_map.len()];
        for (label, &c) in &self.label_map {
            out[c] = self.label_midpoints.get(label).copied();
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            dim: self.dim,
            label_map: Some(self.label_map.clone()),
            label_midpoints: (!self.label_midpoints.is_empty()).then(|| self.label_midpoints.clone()),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for s in &self.samples {
            let rec = Record {
                id: s.id.clone(),
                feature_path: s.feature_path.clone(),
                label: s.label.clone(),
                split: s.split.as_str().to_string(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, &path.display().to_string(), base)
}

/// Parses manifest text. `origin` names the source in errors; feature paths
/// resolve against `base_dir`.
pub fn parse_manifest(text: &str, origin: &str, base_dir: PathBuf) -> Result<Manifest> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut header: Option<(usize, Header)> = None;
    let mut records: Vec<(usize, Record, Split)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| parse_err(line, e.to_string()))?;
        let is_record = value.as_object().is_some_and(|o| o.contains_key("id"));
        if !value.is_object() {
            return Err(parse_err(line, "expected a JSON object".into()));
        }
        if is_record {
            let rec: Record = serde_json::from_value(value).map_err(|e| parse_err(line, e.to_string()))?;
            let split = rec.split.parse::<Split>().map_err(|e| parse_err(line, e.to_string()))?;
            records.push((line, rec, split));
        } else {
            if header.is_some() || !records.is_empty() {
                return Err(parse_err(line, "settings line must come first and appear once".into()));
            }
            let h: Header = serde_json::from_value(value).map_err(|e| parse_err(line, e.to_string()))?;
            header = Some((line, h));
        }
    }

    let mut by_id: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (line, rec, _) in &records {
        by_id.entry(rec.id.as_str()).or_default().push(*line);
    }
    let dups: Vec<String> = by_id
        .iter()
        .filter(|(_, lines)| lines.len() > 1)
        .map(|(id, lines)| {
            let l: Vec<String> = lines.iter().map(usize::to_string).collect();
            format!("'{id}' on lines {}", l.join(","))
        })
        .collect();
    if !dups.is_empty() {
        let first = by_id.values().find(|l| l.len() > 1).map_or(0, |l| l[1]);
        return Err(parse_err(first, format!("duplicate ids: {}", dups.join("; "))));
    }

    let (header_line, header) = header.unwrap_or((0, Header::default()));
    let label_map = match header.label_map {
        Some(map) => {
            let indices: BTreeSet<usize> = map.values().copied().collect();
            if indices.len() != map.len() || indices.iter().copied().ne(0..map.len()) {
                return Err(parse_err(
                    header_line,
                    "label_map indices must be distinct and contiguous from 0".into(),
                ));
            }
            map
        }
        None => records
            .iter()
            .map(|(_, r, _)| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, l)| (l, i))
            .collect(),
    };
    let label_midpoints = header.label_midpoints.unwrap_or_default();
    if let Some(bad) = label_midpoints.keys().find(|l| !label_map.contains_key(*l)) {
        return Err(parse_err(
            header_line,
            format!("midpoint given for unknown label '{bad}'"),
        ));
    }

    let mut samples = Vec::with_capacity(records.len());
    for (line, rec, split) in records {
        let class = *label_map
            .get(&rec.label)
            .ok_or_else(|| parse_err(line, format!("label '{}' is not in the label map", rec.label)))?;
        samples.push(Sample {
            id: rec.id,
            feature_path: rec.feature_path,
            label: rec.label,
            class,
            split,
        });
    }
    Ok(Manifest {
        samples,
        label_map,
        label_midpoints,
        dim: header.dim,
        base_dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Manifest> {
        parse_manifest(text, "m.jsonl", PathBuf::from("/data"))
    }

    #[test]
    fn three_records() {
        let m = parse(
            r#"{"id":"a","path":"a.feat","label":"x","split":"train"}
{"id":"b","path":"b.feat","label":"y","split":"dev"}
{"id":"c","path":"c.feat","label":"x","split":"test"}
"#,
        )
        .unwrap();
        assert_eq!(m.samples.len(), 3);
        assert_eq!(m.num_classes(), 2);
        assert_eq!(m.samples[1].class, 1);
        assert_eq!(m.feature_path(&m.samples[0]), PathBuf::from("/data/a.feat"));
    }

    #[test]
    fn duplicate_ids_name_lines() {
        let text = r#"{"id":"a","path":"a","label":"x","split":"train"}
{"id":"d","path":"b","label":"x","split":"train"}
{"id":"b","path":"b","label":"x","split":"train"}
{"id":"c","path":"b","label":"x","split":"train"}
{"id":"d","path":"b","label":"x","split":"train"}
"#;
        let msg = parse(text).unwrap_err().to_string();
        assert!(msg.contains("lines 2,5"), "{msg}");
    }

    #[test]
    fn unknown_split_is_rejected() {
        let err = parse(r#"{"id":"a","path":"a","label":"x","split":"validation"}"#).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn malformed_json_reports_line() {
        let err = parse("{\"id\":\"a\",\"path\":\"a\",\"label\":\"x\",\"split\":\"train\"}\n{oops").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn header_settings() {
        let m = parse(
            r#"{"dim":4,"label_map":{"thirties":1,"twenties":0},"label_midpoints":{"twenties":25,"thirties":35}}
{"id":"a","path":"a","label":"thirties","split":"train"}
"#,
        )
        .unwrap();
        assert_eq!(m.dim, Some(4));
        assert_eq!(m.class_names(), vec!["twenties", "thirties"]);
        assert_eq!(m.midpoints_by_class(), vec![Some(25.0), Some(35.0)]);
        let back = parse(&m.to_jsonl()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn label_map_must_cover_labels_and_be_contiguous() {
        assert!(
            parse("{\"label_map\":{\"x\":0}}\n{\"id\":\"a\",\"path\":\"a\",\"label\":\"y\",\"split\":\"train\"}")
                .is_err()
        );
        assert!(parse("{\"label_map\":{\"x\":0,\"y\":2}}").is_err());
    }
}
