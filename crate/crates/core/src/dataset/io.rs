//! Text feature files, corpus manifests and persisted splits.
//!
//! Feature file layout:
//!
//! ```text
//! frames=<T> dim=<D> fps=<F> classes=<K>
//! <D space-separated decimals>      (T lines)
//! <T space-separated integer labels>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetError, Features, VideoSample};

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `sample` in the text feature format.
pub fn export_features(sample: &VideoSample, n_classes: usize, path: &Path) -> Result<(), DatasetError> {
    let f = &sample.features;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "frames={} dim={} fps={} classes={}",
        f.frames, f.dim, sample.fps, n_classes
    );
    for t in 0..f.frames {
        let row: Vec<String> = f.row(t).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    let labels: Vec<String> = sample.frame_labels.iter().map(|c| c.to_string()).collect();
    out.push_str(&labels.join(" "));
    out.push('\n');
    fs::write(path, out).map_err(|e| io_err(path, e))
}

struct Header {
    frames: usize,
    dim: usize,
    fps: f64,
    classes: usize,
}

fn parse_header(line: &str, path: &str) -> Result<Header, DatasetError> {
    let err = |msg: String| DatasetError::Parse {
        path: path.to_string(),
        line: 1,
        msg,
    };
    let (mut frames, mut dim, mut fps, mut classes) = (None, None, None, None);
    for tok in line.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| err(format!("malformed header token {tok:?}")))?;
        let bad = |_| err(format!("bad value for {k}: {v:?}"));
        match k {
            "frames" => frames = Some(v.parse::<usize>().map_err(bad)?),
            "dim" => dim = Some(v.parse::<usize>().map_err(bad)?),
            "fps" => fps = Some(v.parse::<f64>().map_err(|_| err(format!("bad value for fps: {v:?}")))?),
            "classes" => classes = Some(v.parse::<usize>().map_err(bad)?),
            _ => return Err(err(format!("unknown header key {k:?}"))),
        }
    }
    match (frames, dim, fps, classes) {
        (Some(frames), Some(dim), Some(fps), Some(classes)) => Ok(Header {
            frames,
            dim,
            fps,
            classes,
        }),
        _ => Err(err("header must define frames, dim, fps and classes".into())),
    }
}

/// Parses a feature file. The sample id is the file stem.
pub fn ingest_features(path: &Path) -> Result<VideoSample, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let p = path.display().to_string();
    let mut lines = text.lines();
    let header = parse_header(lines.next().unwrap_or(""), &p)?;
    let mut data = Vec::with_capacity(header.frames * header.dim);
    for t in 0..header.frames {
        let line_no = t + 2;
        let line = lines.next().ok_or_else(|| DatasetError::Parse {
            path: p.clone(),
            line: line_no,
            msg: format!("missing feature row {}", t + 1),
        })?;
        let row: Vec<&str> = line.split_whitespace().collect();
        if row.len() != header.dim {
            return Err(DatasetError::Parse {
                path: p.clone(),
                line: line_no,
                msg: format!("feature row {} has {} columns, expected {}", t + 1, row.len(), header.dim),
            });
        }
        for v in row {
            data.push(v.parse::<f64>().map_err(|_| DatasetError::Parse {
                path: p.clone(),
                line: line_no,
                msg: format!("bad decimal {v:?}"),
            })?);
        }
    }
    let label_line = header.frames + 2;
    let labels = lines
        .next()
        .unwrap_or("")
        .split_whitespace()
        .map(|v| {
            v.parse::<usize>().map_err(|_| DatasetError::Parse {
                path: p.clone(),
                line: label_line,
                msg: format!("bad label {v:?}"),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if labels.len() != header.frames {
        return Err(DatasetError::Validation {
            path: p,
            msg: format!("{} labels for {} frames", labels.len(), header.frames),
        });
    }
    if let Some(bad) = labels.iter().find(|&&c| c >= header.classes) {
        return Err(DatasetError::Validation {
            path: p,
            msg: format!("label {bad} out of range for {} classes", header.classes),
        });
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(VideoSample {
        id,
        features: Features::new(header.frames, header.dim, data),
        frame_labels: labels,
        fps: header.fps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(entries).map_err(|e| DatasetError::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Loads every video of a manifest; relative paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<Vec<VideoSample>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| DatasetError::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    entries
        .into_iter()
        .map(|e| {
            let file = if e.path.is_absolute() { e.path } else { base.join(e.path) };
            let mut v = ingest_features(&file)?;
            v.id = e.id;
            Ok(v)
        })
        .collect()
}

/// Persisted full/weak partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRecord {
    pub seed: u64,
    pub full_ids: Vec<String>,
    pub weak_ids: Vec<String>,
}

pub fn write_split(path: &Path, split: &SplitRecord) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(split).map_err(|e| DatasetError::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

pub fn read_split(path: &Path) -> Result<SplitRecord, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Json {
        path: path.display().to_string(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_frame_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clip.txt");
        fs::write(&p, "frames=3 dim=2 fps=15 classes=4\n0.5 1\n-2 3.25\n0 0\n1 1 3\n").unwrap();
        let v = ingest_features(&p).unwrap();
        assert_eq!(v.id, "clip");
        assert_eq!(v.frames(), 3);
        assert_eq!(v.features.row(1), &[-2.0, 3.25]);
        assert_eq!(v.frame_labels, vec![1, 1, 3]);
    }

    #[test]
    fn wrong_column_count_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        fs::write(&p, "frames=2 dim=2 fps=15 classes=2\n0.5 1\n-2\n0 1\n").unwrap();
        match ingest_features(&p) {
            Err(DatasetError::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("row 2"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_count_mismatch_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        fs::write(&p, "frames=2 dim=1 fps=15 classes=2\n0.5\n1\n0\n").unwrap();
        assert!(matches!(ingest_features(&p), Err(DatasetError::Validation { .. })));
    }

    #[test]
    fn malformed_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        fs::write(&p, "frames=2 dim=1\n").unwrap();
        assert!(matches!(ingest_features(&p), Err(DatasetError::Parse { line: 1, .. })));
    }
}
