//! CSV and JSON file formats.
//!
//! * predictions: header `p1,...,pd,label`, labels 1-based in the file
//! * samples: header `x1,...,xq`
//! * ensemble manifest: `{"members": [["m1r1.csv", ...], ...]}` with paths
//!   relative to the manifest's directory
//!
//! Floats are written with Rust's shortest round-trip formatting, so a save
//! followed by a load reproduces every stored bit.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{EnsembleGrid, LabeledPredictionSet, SampleSet, SimplexVector};
use crate::error::{Error, Result};

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), message: message.into() }
}

fn parse_f64(path: &Path, line: u64, field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| parse_err(path, format!("row {line}: cannot parse '{field}' as a number")))
}

fn check_header(path: &Path, header: &csv::StringRecord, prefix: char, with_label: bool) -> Result<usize> {
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    let width = if with_label { cols.len().saturating_sub(1) } else { cols.len() };
    if width == 0 {
        return Err(parse_err(path, "row 1: empty header"));
    }
    for (i, c) in cols[..width].iter().enumerate() {
        if *c != format!("{prefix}{}", i + 1) {
            return Err(parse_err(path, format!("row 1: expected column '{prefix}{}', found '{c}'", i + 1)));
        }
    }
    if with_label && cols[width] != "label" {
        return Err(parse_err(path, format!("row 1: expected final column 'label', found '{}'", cols[width])));
    }
    Ok(width)
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    Ok(csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path)?)
}

/// Reads a predictions CSV (`p1..pd,label`, 1-based labels).
pub fn load_predictions(path: impl AsRef<Path>) -> Result<LabeledPredictionSet> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let d = check_header(path, &rdr.headers()?.clone(), 'p', true)?;
    let mut predictions = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != d + 1 {
            return Err(parse_err(path, format!("row {line}: expected {} fields, found {}", d + 1, rec.len())));
        }
        let probs = (0..d).map(|i| parse_f64(path, line, &rec[i])).collect::<Result<Vec<_>>>()?;
        let label: usize = rec[d]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, format!("row {line}: cannot parse label '{}'", &rec[d])))?;
        if label < 1 || label > d {
            return Err(parse_err(path, format!("row {line}: label {label} outside 1..={d}")));
        }
        let p = SimplexVector::new(probs.clone()).map_err(|_| {
            let mass: f64 = probs.iter().sum();
            if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
                parse_err(path, format!("row {line}: negative or non-finite probability"))
            } else {
                parse_err(path, format!("row {line}: mass {mass}"))
            }
        })?;
        predictions.push(p);
        labels.push(label - 1);
    }
    if predictions.is_empty() {
        return Err(parse_err(path, "no data rows"));
    }
    Ok(LabeledPredictionSet::new(predictions, labels)?.with_provenance(path.display().to_string()))
}

/// Reads a CSV of probability rows (`p1..pd`, an optional trailing `label`
/// column is ignored). Used for ensemble member predictions.
pub fn load_members(path: impl AsRef<Path>) -> Result<Vec<SimplexVector>> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let header = rdr.headers()?.clone();
    let has_label = header.iter().next_back().map(str::trim) == Some("label");
    let d = check_header(path, &header, 'p', has_label)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() < d {
            return Err(parse_err(path, format!("row {line}: expected {d} probabilities")));
        }
        let probs = (0..d).map(|i| parse_f64(path, line, &rec[i])).collect::<Result<Vec<_>>>()?;
        let mass: f64 = probs.iter().sum();
        out.push(SimplexVector::new(probs).map_err(|_| parse_err(path, format!("row {line}: mass {mass}")))?);
    }
    if out.is_empty() {
        return Err(parse_err(path, "no data rows"));
    }
    Ok(out)
}

/// Writes a predictions CSV with 1-based labels.
pub fn save_predictions(data: &LabeledPredictionSet, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    write_predictions(data, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_predictions<W: Write>(data: &LabeledPredictionSet, out: &mut W) -> Result<()> {
    let d = data.classes();
    let header: Vec<String> = (1..=d).map(|i| format!("p{i}")).chain(["label".to_string()]).collect();
    writeln!(out, "{}", header.join(","))?;
    for (p, y) in data.iter() {
        let row: Vec<String> = p.probs().iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{},{}", row.join(","), y + 1)?;
    }
    Ok(())
}

/// Reads a samples CSV (`x1..xq`).
pub fn load_sample_set(path: impl AsRef<Path>) -> Result<SampleSet> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let q = check_header(path, &rdr.headers()?.clone(), 'x', false)?;
    let mut points = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != q {
            return Err(parse_err(path, format!("row {line}: expected {q} fields, found {}", rec.len())));
        }
        let pt = rec.iter().map(|f| parse_f64(path, line, f)).collect::<Result<Vec<_>>>()?;
        if pt.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(path, format!("row {line}: non-finite value")));
        }
        points.push(pt);
    }
    if points.is_empty() {
        return Err(parse_err(path, "no data rows"));
    }
    Ok(SampleSet::new(points)?.with_id(path.display().to_string()))
}

pub fn save_sample_set(set: &SampleSet, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let header: Vec<String> = (1..=set.dim()).map(|i| format!("x{i}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for p in set.points() {
        let row: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Ensemble manifest: an m x R grid of sample-file paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub members: Vec<Vec<String>>,
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads the m x R grid named by an ensemble manifest.
pub fn load_ensemble(manifest: impl AsRef<Path>) -> Result<EnsembleGrid> {
    let manifest = manifest.as_ref();
    let text = fs::read_to_string(manifest)?;
    let parsed: EnsembleManifest =
        serde_json::from_str(&text).map_err(|e| parse_err(manifest, e.to_string()))?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    load_grid(base, &parsed.members)
}

pub(crate) fn load_grid(base: &Path, members: &[Vec<String>]) -> Result<EnsembleGrid> {
    if let Some(first) = members.first() {
        for (k, row) in members.iter().enumerate() {
            if row.len() != first.len() {
                return Err(Error::RaggedGrid(format!(
                    "member {} lists {} files, member 1 lists {}",
                    k + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
    }
    let grid = members
        .iter()
        .map(|row| row.iter().map(|f| load_sample_set(resolve(base, f))).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    EnsembleGrid::new(grid)
}

/// Writes every grid cell as `m{k}r{r}.csv` next to a `manifest.json`.
pub fn save_ensemble(grid: &EnsembleGrid, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut members = Vec::with_capacity(grid.members());
    for (k, row) in grid.rows().iter().enumerate() {
        let mut names = Vec::with_capacity(row.len());
        for (r, set) in row.iter().enumerate() {
            let name = format!("m{}r{}.csv", k + 1, r + 1);
            save_sample_set(set, dir.join(&name))?;
            names.push(name);
        }
        members.push(names);
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&EnsembleManifest { members })?)?;
    Ok(path)
}

/// One instance of an uncertainty-profile manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub id: String,
    pub members: Vec<Vec<String>>,
    #[serde(default)]
    pub target: Option<String>,
}

/// `{"instances": [{"id": .., "members": [[..]], "target": ..}, ..]}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceManifest {
    pub instances: Vec<InstanceEntry>,
}

/// A loaded instance: its id, ensemble grid, and optional target samples.
pub type LoadedInstance = (String, EnsembleGrid, Option<SampleSet>);

pub fn load_instances(manifest: impl AsRef<Path>) -> Result<Vec<LoadedInstance>> {
    let manifest = manifest.as_ref();
    let text = fs::read_to_string(manifest)?;
    let parsed: InstanceManifest =
        serde_json::from_str(&text).map_err(|e| parse_err(manifest, e.to_string()))?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    parsed
        .instances
        .iter()
        .map(|inst| {
            let grid = load_grid(base, &inst.members)?;
            let target = inst.target.as_deref().map(|t| load_sample_set(resolve(base, t))).transpose()?;
            Ok((inst.id.clone(), grid, target))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn single_row_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "p1,p2,label\n0.8,0.2,1\n");
        let data = load_predictions(&p).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data.classes(), 2);
        assert_eq!(data.labels(), &[0]);
    }

    #[test]
    fn bad_mass_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "p1,p2,label\n0.5,0.5,1\n1.0,0.5,2\n");
        let msg = load_predictions(&p).unwrap_err().to_string();
        assert!(msg.contains("row 3: mass 1.5"), "{msg}");
    }

    #[test]
    fn malformed_row_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "p1,p2,label\n0.5,abc,1\n");
        let msg = load_predictions(&p).unwrap_err().to_string();
        assert!(msg.contains("row 2"), "{msg}");
        let p = write(dir.path(), "b.csv", "p1,p2,label\n0.5,0.5\n");
        assert!(load_predictions(&p).unwrap_err().to_string().contains("row 2"));
    }

    #[test]
    fn manifest_loads_grid() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.csv", "x1,x2,x3\n1,2,3\n4,5,6\n");
        write(dir.path(), "b.csv", "x1,x2,x3\n0,0,0\n");
        let m = write(dir.path(), "m.json", r#"{"members": [["a.csv"], ["b.csv"]]}"#);
        let grid = load_ensemble(&m).unwrap();
        assert_eq!((grid.members(), grid.replicates()), (2, 1));
        assert_eq!(grid.dim(), 3);
    }

    #[test]
    fn ragged_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.csv", "x1\n1\n");
        let m = write(dir.path(), "m.json", r#"{"members": [["a.csv","a.csv"], ["a.csv","a.csv","a.csv"]]}"#);
        assert!(matches!(load_ensemble(&m), Err(Error::RaggedGrid(_))));
    }

    #[test]
    fn manifest_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.csv", "x1,x2\n1,2\n");
        write(dir.path(), "b.csv", "x1\n1\n");
        let m = write(dir.path(), "m.json", r#"{"members": [["a.csv"], ["b.csv"]]}"#);
        assert!(matches!(load_ensemble(&m), Err(Error::DimensionMismatch { .. })));
    }
}
