use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train or test)")),
        }
    }
}

/// One manifest line. `source_id` is the zero-based position of the record in
/// its manifest and keys teacher caches and feature exports.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub source_id: usize,
    pub rel_path: String,
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

impl ImageRecord {
    pub fn load_rgb(&self) -> Result<RgbImage> {
        let img = image::open(&self.path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(&self.path, io),
            other => Error::Image(other),
        })?;
        Ok(img.to_rgb8())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<ImageRecord>,
}

impl Manifest {
    /// Reads a `relative_path<TAB>label<TAB>split` manifest. Paths resolve
    /// against the manifest's directory; image files are only touched when a
    /// record is loaded.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, root, &path.display().to_string())
    }

    pub fn parse(text: &str, root: &Path, file: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                file: file.to_string(),
                line: lineno,
                msg,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(format!(
                    "expected 3 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            let rel_path = fields[0].to_string();
            if rel_path.is_empty() {
                return Err(err("empty path".into()));
            }
            let label: usize = fields[1]
                .trim()
                .parse()
                .map_err(|_| err(format!("label `{}` is not a non-negative integer", fields[1])))?;
            let split: Split = fields[2].trim().parse().map_err(err)?;
            records.push(ImageRecord {
                source_id: records.len(),
                path: root.join(&rel_path),
                rel_path,
                label,
                split,
            });
        }
        let manifest = Manifest { records };
        let n = manifest.num_classes();
        let mut seen = vec![false; n];
        for r in &manifest.records {
            seen[r.label] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!(
                "{file}: labels must be contiguous from 0, class {missing} has no record"
            )));
        }
        Ok(manifest)
    }

    pub fn num_classes(&self) -> usize {
        self.records.iter().map(|r| r.label + 1).max().unwrap_or(0)
    }

    pub fn split(&self, split: Split) -> Vec<&ImageRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_text(&self) -> String {
        self.records
            .iter()
            .map(|r| format!("{}\t{}\t{}\n", r.rel_path, r.label, r.split))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Manifest> {
        Manifest::parse(text, Path::new("/data"), "m.tsv")
    }

    #[test]
    fn three_lines_two_classes() {
        let m = parse("a.png\t0\ttrain\nb.png\t1\ttrain\nc.png\t1\ttest\n").unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.num_classes(), 2);
        assert_eq!(m.records[2].split, Split::Test);
        assert_eq!(m.records[2].source_id, 2);
        assert_eq!(m.records[1].path, Path::new("/data/b.png"));
        assert_eq!(m.split(Split::Train).len(), 2);
    }

    #[test]
    fn empty_file_is_empty_manifest() {
        let m = parse("").unwrap();
        assert!(m.is_empty());
        assert_eq!(m.num_classes(), 0);
    }

    #[test]
    fn bad_label_names_line() {
        let err = parse("a.png\t0\ttrain\nb.png\tx1\ttrain\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse("a.png\t0\n").is_err());
        assert!(parse("a.png\t0\tval\n").is_err());
    }

    #[test]
    fn label_gap_rejected() {
        assert!(matches!(
            parse("a.png\t0\ttrain\nb.png\t2\ttrain\n"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn missing_image_fails_at_access() {
        let m = parse("nope.png\t0\ttrain\n").unwrap();
        assert!(matches!(m.records[0].load_rgb(), Err(Error::Io { .. })));
    }

    #[test]
    fn text_round_trip() {
        let text = "a.png\t0\ttrain\nb.png\t1\ttest\n";
        assert_eq!(parse(text).unwrap().to_text(), text);
    }
}
