use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::config::{ExperimentConfig, Method, Toggles, Variant};
use super::run::{run_method, Federation, RunResult, RunSummary};
use crate::data::{load_dataset, DatasetHandle};
use crate::error::Result;
use crate::metrics::{emit_curves, emit_table, write_atomic, Curve, TableRow};

pub fn open_dataset(cfg: &ExperimentConfig) -> Result<Arc<DatasetHandle>> {
    Ok(Arc::new(load_dataset(&cfg.dataset, &cfg.dataset_root)?))
}

/// Runs the config's `method` for every seed.
pub fn run_all_seeds(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    let handle = open_dataset(cfg)?;
    let variant = variant_dir(&cfg.partition.label());
    cfg.seeds
        .iter()
        .map(|&seed| {
            let fed = Federation::build(cfg, Arc::clone(&handle), seed)?;
            run_method(cfg, &fed, cfg.method, &variant)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub table: String,
    pub summaries: Vec<RunSummary>,
    /// `(variant, method, seed, error)` for every run that failed.
    pub failures: Vec<(String, Method, u64, String)>,
}

fn variant_dir(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-()".contains(c) { c } else { '_' })
        .collect()
}

/// Column label: the method, with the toggle set when it is a co-boosting
/// ablation.
fn column_label(method: Method, toggles: Toggles) -> String {
    match method {
        Method::CoBoosting if toggles != Toggles::ALL_ON => format!("{method}[{}]", toggles.tag()),
        _ => method.to_string(),
    }
}

/// Runs every (variant, seed, method) combination. Clients are trained once
/// per (variant, seed) and shared by all methods. Failed runs are recorded
/// and show up as missing cells.
pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    let methods = if cfg.sweep.methods.is_empty() {
        vec![cfg.method]
    } else {
        cfg.sweep.methods.clone()
    };
    let variants = if cfg.sweep.variants.is_empty() {
        vec![Variant {
            name: cfg.partition.label(),
            overrides: Vec::new(),
        }]
    } else {
        cfg.sweep.variants.clone()
    };
    let columns: Vec<String> = methods.iter().map(Method::to_string).collect();
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    for variant in &variants {
        let mut vcfg = cfg.with_overrides(&variant.overrides)?;
        vcfg.sweep = Default::default();
        let dir = variant_dir(&variant.name);
        let mut cells = vec![Vec::new(); methods.len()];
        let mut curves: BTreeMap<usize, Vec<Vec<(u64, f64)>>> = BTreeMap::new();
        let handle = open_dataset(&vcfg)?;
        for &seed in &vcfg.seeds {
            let fed = match Federation::build(&vcfg, Arc::clone(&handle), seed) {
                Ok(f) => f,
                Err(e) => {
                    log::warn!("{}: seed {seed}: client training failed: {e}", variant.name);
                    for &m in &methods {
                        failures.push((variant.name.clone(), m, seed, e.to_string()));
                    }
                    continue;
                }
            };
            for (col, &method) in methods.iter().enumerate() {
                let mut mcfg = vcfg.clone();
                mcfg.method = method;
                match run_method(&mcfg, &fed, method, &dir) {
                    Ok(r) => {
                        log::info!(
                            "{} {} seed {seed}: {:.4}",
                            variant.name,
                            method,
                            r.summary.final_accuracy
                        );
                        cells[col].push(r.summary.final_accuracy);
                        curves.entry(col).or_default().push(r.series("server_test_acc"));
                        summaries.push(r.summary);
                    }
                    Err(e) => {
                        log::warn!("{} {method} seed {seed} failed: {e}", variant.name);
                        failures.push((variant.name.clone(), method, seed, e.to_string()));
                    }
                }
            }
        }
        let series: Vec<Curve> = curves
            .into_iter()
            .filter(|(_, runs)| runs.iter().any(|r| r.len() > 1))
            .map(|(col, runs)| Curve {
                label: columns[col].clone(),
                points: mean_curve(&runs),
            })
            .collect();
        if !series.is_empty() {
            let path = cfg.output_dir.join(&dir).join("server_accuracy.svg");
            emit_curves(&series, &format!("server test accuracy, {}", variant.name), &path)?;
        }
        rows.push(TableRow {
            label: variant.name.clone(),
            cells,
        });
    }
    let table = emit_table(&columns, &rows);
    write_atomic(&cfg.output_dir.join("summary.txt"), table.as_bytes())?;
    Ok(SweepOutcome {
        table,
        summaries,
        failures,
    })
}

/// Seed-mean of epoch-aligned series.
fn mean_curve(runs: &[Vec<(u64, f64)>]) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for run in runs {
        for &(e, v) in run {
            let slot = acc.entry(e).or_insert((0.0, 0));
            slot.0 += v;
            slot.1 += 1;
        }
    }
    acc.into_iter().map(|(e, (s, n))| (e as f64, s / n as f64)).collect()
}

fn find_summaries(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            find_summaries(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "summary.json") {
            out.push(path);
        }
    }
    Ok(())
}

/// Builds the accuracy table from every `summary.json` under `dir`.
pub fn report(dir: &Path) -> Result<String> {
    let mut paths = Vec::new();
    find_summaries(dir, &mut paths)?;
    let mut summaries = Vec::new();
    for p in &paths {
        summaries.push(serde_json::from_str::<RunSummary>(&fs::read_to_string(p)?)?);
    }
    let mut column_keys: Vec<(Method, String)> = summaries
        .iter()
        .map(|s| (s.method, column_label(s.method, s.toggles)))
        .collect();
    column_keys.sort();
    column_keys.dedup();
    let columns: Vec<String> = column_keys.iter().map(|(_, l)| l.clone()).collect();
    let mut variants: Vec<String> = Vec::new();
    for s in &summaries {
        if !variants.contains(&s.variant) {
            variants.push(s.variant.clone());
        }
    }
    let rows: Vec<TableRow> = variants
        .iter()
        .map(|v| TableRow {
            label: v.clone(),
            cells: columns
                .iter()
                .map(|col| {
                    summaries
                        .iter()
                        .filter(|s| &s.variant == v && &column_label(s.method, s.toggles) == col)
                        .map(|s| s.final_accuracy)
                        .collect()
                })
                .collect(),
        })
        .collect();
    Ok(emit_table(&columns, &rows))
}
