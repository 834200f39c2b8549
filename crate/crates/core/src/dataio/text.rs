//! `x y z [label]` point files and split manifests.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::PointSetBatch;
use crate::model::Task;
use crate::train::{Dataset, Sample, Split};

/// Parses one cloud. Blank lines and text after `#` are ignored. Every
/// point line has three coordinates and optionally an integer label.
pub fn parse_points(text: &str) -> Result<PointSetBatch> {
    let mut pos = Vec::new();
    let mut labels = Vec::new();
    let mut columns: Option<(usize, usize)> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if !(3..=4).contains(&tokens.len()) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected `x y z [label]`, found {} fields", tokens.len()),
            });
        }
        match columns {
            None => columns = Some((tokens.len(), line_no)),
            Some((c, first)) if c != tokens.len() => {
                return Err(Error::Format(format!(
                    "line {line_no} has {} columns but line {first} has {c}",
                    tokens.len()
                )))
            }
            _ => {}
        }
        for t in &tokens[..3] {
            let v: f64 = t.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("`{t}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("`{t}` is not finite"),
                });
            }
            pos.push(v);
        }
        if let Some(t) = tokens.get(3) {
            labels.push(t.parse::<usize>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("`{t}` is not a non-negative integer label"),
            })?);
        }
    }
    let n = pos.len() / 3;
    if n == 0 {
        return Err(Error::Data("point file contains no points".into()));
    }
    let labels = (columns.map(|c| c.0) == Some(4)).then_some(labels);
    PointSetBatch::from_positions(1, n, pos, labels)
}

pub fn read_points(path: impl AsRef<Path>) -> Result<PointSetBatch> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_points(&text)
}

/// One line per point with 17 significant digits, all clouds of the batch
/// in order.
pub fn format_points(cloud: &PointSetBatch) -> String {
    let mut s = String::with_capacity(cloud.positions().len() * 25);
    for (i, p) in cloud.positions().chunks_exact(3).enumerate() {
        s.push_str(&format!("{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]));
        if let Some(l) = cloud.labels() {
            s.push_str(&format!(" {}", l[i]));
        }
        s.push('\n');
    }
    s
}

pub fn write_points(path: impl AsRef<Path>, cloud: &PointSetBatch) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_points(cloud)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    pub path: PathBuf,
}

/// Lines `train|val|test <path>`; relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (tag, rest) = line.split_once(char::is_whitespace).ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "expected `<split> <path>`".into(),
        })?;
        let split = match tag {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("unknown split `{other}`"),
                })
            }
        };
        out.push(ManifestEntry {
            split,
            path: base.join(rest.trim()),
        });
    }
    Ok(out)
}

/// Writes entries with paths as given.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let text: String = entries
        .iter()
        .map(|e| format!("{} {}\n", e.split, e.path.display()))
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads the clouds of one split. For classification every point of a
/// cloud must carry the same label, which becomes the cloud's class.
pub fn load_manifest_split(path: impl AsRef<Path>, task: Task, split: Split) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for entry in read_manifest(path)?.into_iter().filter(|e| e.split == split) {
        let cloud = read_points(&entry.path)?;
        let labels = cloud
            .labels()
            .ok_or_else(|| Error::Data(format!("{} has no label column", entry.path.display())))?;
        let sample = match task {
            Task::Segmentation => Sample::segmentation(cloud.clone()),
            Task::Classification => {
                let class = labels[0];
                if labels.iter().any(|&l| l != class) {
                    return Err(Error::Data(format!(
                        "{} mixes labels but classification needs one per cloud",
                        entry.path.display()
                    )));
                }
                Sample::classification(cloud.clone(), class)
            }
        };
        out.push(sample);
    }
    Ok(out)
}

/// Train and val clouds listed in a manifest.
pub fn load_manifest_dataset(path: impl AsRef<Path>, task: Task) -> Result<Dataset> {
    let path = path.as_ref();
    Ok(Dataset {
        train: load_manifest_split(path, task, Split::Train)?,
        val: load_manifest_split(path, task, Split::Val)?,
    })
}
