//! A-scan files: CSV with header `sample_index,intensity`, one profile per
//! file. Lateral scans are a directory of such files plus a JSON manifest
//! mapping each file to its fiber position.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AScan, OctError};

pub const ASCAN_CSV_HEADER: &str = "sample_index,intensity";
pub const LATERAL_MANIFEST: &str = "lateral_manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum AScanIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error(transparent)]
    Invalid(#[from] OctError),
}

fn io_err(path: &Path, source: std::io::Error) -> AScanIoError {
    AScanIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn ascan_to_csv(ascan: &AScan) -> String {
    let mut out = String::with_capacity(ascan.len() * 24);
    out.push_str(ASCAN_CSV_HEADER);
    out.push('\n');
    for (i, v) in ascan.samples().iter().enumerate() {
        // shortest round-trip representation
        let _ = writeln!(out, "{i},{v:?}");
    }
    out
}

pub fn parse_ascan_csv(
    text: &str,
    path_label: &str,
    depth_per_sample: f64,
    fiber_position: f64,
) -> Result<AScan, AScanIoError> {
    let parse_err = |line: usize, msg: String| AScanIoError::Parse {
        path: path_label.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == ASCAN_CSV_HEADER => {}
        Some((_, h)) => return Err(parse_err(1, format!("expected header {ASCAN_CSV_HEADER:?}, got {h:?}"))),
        None => return Err(parse_err(1, "empty file".into())),
    }
    let mut samples = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (index, value) = line
            .split_once(',')
            .ok_or_else(|| parse_err(line_no, "expected two columns".into()))?;
        let index: usize = index
            .trim()
            .parse()
            .map_err(|e| parse_err(line_no, format!("bad sample_index: {e}")))?;
        if index != samples.len() {
            return Err(parse_err(
                line_no,
                format!("sample_index {index} out of order, expected {}", samples.len()),
            ));
        }
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|e| parse_err(line_no, format!("bad intensity: {e}")))?;
        samples.push(value);
    }
    Ok(AScan::new(samples, depth_per_sample, fiber_position)?)
}

pub fn write_ascan_csv(path: &Path, ascan: &AScan) -> Result<(), AScanIoError> {
    fs::write(path, ascan_to_csv(ascan)).map_err(|e| io_err(path, e))
}

pub fn read_ascan_csv(path: &Path, depth_per_sample: f64, fiber_position: f64) -> Result<AScan, AScanIoError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_ascan_csv(&text, &path.display().to_string(), depth_per_sample, fiber_position)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateralEntry {
    pub file: String,
    pub fiber_position_mm: f64,
}

/// Writes `scan_NNNN.csv` files and the lateral manifest into `dir`.
pub fn write_lateral_scan(dir: &Path, scans: &[AScan]) -> Result<Vec<LateralEntry>, AScanIoError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut entries = Vec::with_capacity(scans.len());
    for (i, s) in scans.iter().enumerate() {
        let file = format!("scan_{i:04}.csv");
        write_ascan_csv(&dir.join(&file), s)?;
        entries.push(LateralEntry {
            file,
            fiber_position_mm: s.fiber_position(),
        });
    }
    let manifest = dir.join(LATERAL_MANIFEST);
    let json = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    fs::write(&manifest, json).map_err(|e| io_err(&manifest, e))?;
    Ok(entries)
}

/// Reads a lateral scan back, ordered as listed in the manifest.
pub fn read_lateral_scan(dir: &Path, depth_per_sample: f64) -> Result<Vec<AScan>, AScanIoError> {
    let manifest = dir.join(LATERAL_MANIFEST);
    let text = fs::read_to_string(&manifest).map_err(|e| io_err(&manifest, e))?;
    let entries: Vec<LateralEntry> = serde_json::from_str(&text).map_err(|e| AScanIoError::Parse {
        path: manifest.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    entries
        .iter()
        .map(|e| read_ascan_csv(&dir.join(&e.file), depth_per_sample, e.fiber_position_mm))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let a = AScan::new(vec![0.0, 0.1, 1.0 / 3.0, 0.95], 0.005, 1.25).unwrap();
        let text = ascan_to_csv(&a);
        assert!(text.starts_with("sample_index,intensity\n0,0.0\n"));
        let b = parse_ascan_csv(&text, "mem", 0.005, 1.25).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_parse_errors_carry_line_numbers() {
        let err = parse_ascan_csv("sample_index,intensity\n0,0.5\n2,0.1\n", "x.csv", 0.005, 0.0).unwrap_err();
        assert!(matches!(err, AScanIoError::Parse { line: 3, .. }), "{err}");
        let err = parse_ascan_csv("idx,val\n", "x.csv", 0.005, 0.0).unwrap_err();
        assert!(matches!(err, AScanIoError::Parse { line: 1, .. }));
        let err = parse_ascan_csv("sample_index,intensity\n0,-1\n", "x.csv", 0.005, 0.0).unwrap_err();
        assert!(matches!(err, AScanIoError::Invalid(_)));
    }

    #[test]
    fn lateral_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scans: Vec<AScan> = (0..3)
            .map(|i| AScan::new(vec![0.1 * i as f64; 8], 0.01, 0.05 * i as f64).unwrap())
            .collect();
        let entries = write_lateral_scan(dir.path(), &scans).unwrap();
        assert_eq!(entries[2].file, "scan_0002.csv");
        let back = read_lateral_scan(dir.path(), 0.01).unwrap();
        assert_eq!(back, scans);
    }
}
