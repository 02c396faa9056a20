//! Line-delimited dataset manifests.
//!
//! One record per line, tab-separated fields in declaration order:
//! identifier, per-view file paths (one comma-joined field with V entries),
//! frame count, resolution (`HxW`), perceptual score, mean flow, completeness
//! flag, accepted flag. Missing scores serialize as `-`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub view_paths: Vec<String>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub perceptual: Option<f64>,
    pub flow_mean: Option<f64>,
    pub completeness: Option<bool>,
    pub accepted: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn accepted(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(|r| r.accepted)
    }
}

const HEADER: &str = "id\tview_paths\tframes\tresolution\tperceptual\tflow_mean\tcompleteness\taccepted";

fn opt_f64(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:?}", x),
        None => "-".to_string(),
    }
}

fn opt_bool(v: Option<bool>) -> String {
    match v {
        Some(true) => "1".to_string(),
        Some(false) => "0".to_string(),
        None => "-".to_string(),
    }
}

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    for r in &manifest.records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}x{}\t{}\t{}\t{}\t{}\n",
            r.id,
            r.view_paths.join(","),
            r.frames,
            r.height,
            r.width,
            opt_f64(r.perceptual),
            opt_f64(r.flow_mean),
            opt_bool(r.completeness),
            if r.accepted { "1" } else { "0" },
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("{}: {}", path.display(), e)))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HEADER => {}
        other => {
            return Err(Error::data(format!(
                "{}: bad manifest header {:?}",
                path.display(),
                other
            )))
        }
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 8 {
            return Err(Error::data(format!(
                "{}: line {}: {} fields, expected 8",
                path.display(),
                lineno + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| Error::data(format!("{}: line {}: bad {}", path.display(), lineno + 2, what));
        let (h, w) = fields[3]
            .split_once('x')
            .ok_or_else(|| bad("resolution"))?;
        let parse_opt_f64 = |s: &str, what: &str| -> Result<Option<f64>> {
            if s == "-" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(what))
            }
        };
        records.push(ManifestRecord {
            id: fields[0].to_string(),
            view_paths: if fields[1].is_empty() {
                Vec::new()
            } else {
                fields[1].split(',').map(|s| s.to_string()).collect()
            },
            frames: fields[2].parse().map_err(|_| bad("frames"))?,
            height: h.parse().map_err(|_| bad("height"))?,
            width: w.parse().map_err(|_| bad("width"))?,
            perceptual: parse_opt_f64(fields[4], "perceptual")?,
            flow_mean: parse_opt_f64(fields[5], "flow_mean")?,
            completeness: match fields[6] {
                "-" => None,
                "1" => Some(true),
                "0" => Some(false),
                _ => return Err(bad("completeness")),
            },
            accepted: match fields[7] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("accepted")),
            },
        });
    }
    Ok(Manifest { records })
}
