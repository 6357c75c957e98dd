//! Append-only JSONL metrics, atomic checkpoints, and table/curve reports.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use coboost_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_zoo::{build_client, ClientModel, ModelSpec, TrainingMetadata};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl MetricValue {
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            MetricValue::Scalar(v) => Some(*v),
            MetricValue::Vector(_) => None,
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            MetricValue::Scalar(v) => v.is_finite(),
            MetricValue::Vector(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

impl From<f64> for MetricValue {
    fn from(v: f64) -> Self {
        MetricValue::Scalar(v)
    }
}

impl From<Vec<f64>> for MetricValue {
    fn from(v: Vec<f64>) -> Self {
        MetricValue::Vector(v)
    }
}

/// One metric line. `timestamp` is the record's sequence number within the
/// run, which keeps streams comparable byte for byte across repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub epoch: u64,
    pub name: String,
    pub value: MetricValue,
    pub timestamp: u64,
}

/// Writer for one run's `metrics.jsonl`; flushes after every line.
#[derive(Debug)]
pub struct MetricsSink {
    path: PathBuf,
    file: File,
    run_id: String,
    seen: HashSet<(u64, String)>,
    next_timestamp: u64,
}

impl MetricsSink {
    /// Opens `path` for appending, resuming the key set and sequence from any
    /// records already in the file.
    pub fn open(path: impl Into<PathBuf>, run_id: impl Into<String>) -> Result<Self> {
        let path = path.into();
        let run_id = run_id.into();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let existing = if path.exists() { read_records(&path)? } else { Vec::new() };
        // drop a torn trailing line so new records start on a fresh line
        if path.exists() {
            let complete: usize = fs::read(&path)?
                .iter()
                .rposition(|&b| b == b'\n')
                .map_or(0, |p| p + 1);
            let file = OpenOptions::new().write(true).open(&path)?;
            file.set_len(complete as u64)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let mut seen = HashSet::new();
        let mut next_timestamp = 0;
        for r in existing.iter().filter(|r| r.run_id == run_id) {
            seen.insert((r.epoch, r.name.clone()));
            next_timestamp = next_timestamp.max(r.timestamp + 1);
        }
        Ok(Self {
            path,
            file,
            run_id,
            seen,
            next_timestamp,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    /// Appends `(epoch, name, value)`; a repeated `(epoch, name)` is rejected.
    pub fn append(&mut self, epoch: u64, name: &str, value: impl Into<MetricValue>) -> Result<MetricRecord> {
        let value = value.into();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("metric {name} at epoch {epoch}")));
        }
        let key = (epoch, name.to_string());
        if self.seen.contains(&key) {
            return Err(Error::DuplicateMetric {
                run_id: self.run_id.clone(),
                epoch,
                name: name.to_string(),
            });
        }
        let record = MetricRecord {
            run_id: self.run_id.clone(),
            epoch,
            name: name.to_string(),
            value,
            timestamp: self.next_timestamp,
        };
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        self.seen.insert(key);
        self.next_timestamp += 1;
        Ok(record)
    }
}

/// Reads every complete line of a metrics file. A trailing line without its
/// newline is a torn write and is ignored.
pub fn read_records(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 || !line.ends_with('\n') {
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line.trim_end())?);
    }
    Ok(records)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

/// A table row: a label and, per column, the per-seed values (empty = missing).
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub cells: Vec<Vec<f64>>,
}

/// Aligned plain-text table of `mean±std` cells, columns in the given order.
/// Values are fractions and are printed as percentages.
pub fn emit_table(columns: &[String], rows: &[TableRow]) -> String {
    let header: Vec<String> = std::iter::once(String::new()).chain(columns.iter().cloned()).collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut line = vec![r.label.clone()];
            for c in 0..columns.len() {
                let cell = r.cells.get(c).and_then(|v| mean_std(v));
                line.push(match cell {
                    Some((m, s)) => format!("{:.2}±{:.2}", 100.0 * m, 100.0 * s),
                    None => "-".to_string(),
                });
            }
            line
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            std::iter::once(&header)
                .chain(&body)
                .map(|l| l[i].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let render = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                let pad = w - c.chars().count();
                if i == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect();
        parts.join(" | ").trim_end().to_string()
    };
    let mut out = render(&header);
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    out.push('\n');
    for line in &body {
        out.push_str(&render(line));
        out.push('\n');
    }
    out
}

/// One labelled `(x, y)` series.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Writes the curves as an SVG line plot.
pub fn emit_curves(curves: &[Curve], title: &str, path: &Path) -> Result<()> {
    let (w, h, margin) = (640.0, 400.0, 50.0);
    let pts = curves.iter().flat_map(|c| c.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| margin + (x - x0) / (x1 - x0) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - y0) / (y1 - y0) * (h - 2.0 * margin);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<polyline points="{m},{t} {m},{b} {r},{b}" fill="none" stroke="black"/>"#,
        m = margin,
        t = margin,
        b = h - margin,
        r = w - margin
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}">{x0:.0}</text>"#, margin, h - margin + 15.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{x1:.0}</text>"#, w - margin, h - margin + 15.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{y0:.3}</text>"#, margin - 4.0, h - margin);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{y1:.3}</text>"#, margin - 4.0, margin + 4.0);
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = c.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            coords.join(" ")
        );
        let ly = margin + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#,
            w - margin - 150.0,
            escape(&c.label)
        );
    }
    svg.push_str("</svg>\n");
    write_atomic(path, svg.as_bytes())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `bytes` to a temp file in the target directory, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub seed: u64,
    pub client_id: usize,
    pub frozen: bool,
    pub params: Vec<Tensor>,
    pub metadata: TrainingMetadata,
}

pub fn save_checkpoint(model: &ClientModel, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        spec: model.spec.clone(),
        seed: model.seed,
        client_id: model.client_id,
        frozen: model.is_frozen(),
        params: model.network().params().iter().map(|p| (**p).clone()).collect(),
        metadata: model.metadata.clone(),
    };
    write_atomic(path, &serde_json::to_vec(&ckpt)?)
}

/// Loads a checkpoint, refusing it if its spec differs from `expected`.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelSpec>) -> Result<ClientModel> {
    let ckpt: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
    if let Some(spec) = expected {
        if *spec != ckpt.spec {
            return Err(Error::Checkpoint(format!(
                "{} holds {:?}, expected {:?}",
                path.display(),
                ckpt.spec,
                spec
            )));
        }
    }
    let mut model = build_client(&ckpt.spec, ckpt.seed, ckpt.client_id)?;
    model.set_params(ckpt.params)?;
    model.metadata = ckpt.metadata;
    model.set_frozen(ckpt.frozen);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std_cells() {
        assert_eq!(mean_std(&[0.5]), Some((0.5, 0.0)));
        let (m, s) = mean_std(&[0.1, 0.2, 0.3]).unwrap();
        assert!((m - 0.2).abs() < 1e-12 && (s - 0.1).abs() < 1e-12);
        assert_eq!(mean_std(&[]), None);
    }

    #[test]
    fn table_layout() {
        let cols: Vec<String> = ["fedavg", "fedens", "plain_distill", "co_boosting"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows = vec![TableRow {
            label: "Dir(0.1)".into(),
            cells: vec![vec![0.1, 0.2, 0.3], vec![0.5], vec![], vec![0.9, 0.9]],
        }];
        let table = emit_table(&cols, &rows);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        let header: Vec<&str> = lines[0].split('|').map(str::trim).collect();
        assert_eq!(header[1..], ["fedavg", "fedens", "plain_distill", "co_boosting"]);
        let cells: Vec<&str> = lines[2].split('|').map(str::trim).collect();
        assert_eq!(cells, ["Dir(0.1)", "20.00±10.00", "50.00±0.00", "-", "90.00±0.00"]);
    }
}
