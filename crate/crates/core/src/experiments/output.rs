use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::em::Engine;
use crate::error::{Error, Result};

use super::segmentation::map_axes;
use super::{ExperimentResult, RunRow};

/// Paths written by [`write_outputs`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputFiles {
    pub runs: PathBuf,
    pub summary: PathBuf,
    pub metadata: PathBuf,
    pub maps: Option<PathBuf>,
    pub curves: Option<PathBuf>,
}

/// Mean and standard deviation of each metric over datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub engine: Engine,
    pub cell: Vec<usize>,
    pub variant: usize,
    pub params: Vec<(&'static str, f64)>,
    pub count: usize,
    pub metrics: Vec<(&'static str, f64, f64)>,
}

impl SummaryRow {
    pub fn mean(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.0 == name).map(|m| m.1)
    }
}

/// Groups rows by engine, cell and variant. NaN metric values are skipped.
pub fn summarize(rows: &[RunRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(Engine, Vec<usize>, usize), Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.key.engine, r.key.cell.clone(), r.key.variant)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((engine, cell, variant), members)| {
            let metrics = members[0]
                .metrics
                .iter()
                .map(|(name, _)| {
                    let values: Vec<f64> = members.iter().filter_map(|r| r.metric(name)).filter(|v| !v.is_nan()).collect();
                    let n = values.len() as f64;
                    let mean = values.iter().sum::<f64>() / n;
                    let var = if values.len() > 1 {
                        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
                    } else {
                        0.0
                    };
                    (*name, mean, var.sqrt())
                })
                .collect();
            SummaryRow { engine, cell, variant, params: members[0].params.clone(), count: members.len(), metrics }
        })
        .collect()
}

fn names<'a>(lists: impl Iterator<Item = &'a [(&'static str, f64)]>) -> Vec<&'static str> {
    let mut out: Vec<&'static str> = Vec::new();
    for list in lists {
        for (n, _) in list {
            if !out.contains(n) {
                out.push(n);
            }
        }
    }
    out
}

fn cell_text(cell: &[usize]) -> String {
    cell.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(".")
}

fn lookup(list: &[(&'static str, f64)], name: &str) -> String {
    list.iter().find(|(n, _)| *n == name).map(|(_, v)| v.to_string()).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn io_err(e: std::io::Error) -> Error {
    Error::Io(e.to_string())
}

#[derive(Serialize)]
struct Metadata<'a> {
    scenario: &'a str,
    version: &'a str,
    config_hash: String,
    runs: usize,
    deviations: Vec<&'static str>,
    config: &'a super::ExperimentConfig,
}

/// Writes runs, summary and metadata (plus maps and likelihood curves for the
/// segmentation scenario) into `dir`.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<OutputFiles> {
    fs::create_dir_all(dir).map_err(io_err)?;
    let scenario = result.config.scenario.name();
    let files = OutputFiles {
        runs: dir.join(format!("{scenario}_runs.csv")),
        summary: dir.join(format!("{scenario}_summary.csv")),
        metadata: dir.join(format!("{scenario}_metadata.json")),
        maps: (!result.maps.is_empty()).then(|| dir.join("segmentation_maps.csv")),
        curves: (!result.maps.is_empty()).then(|| dir.join("segmentation_curves.csv")),
    };

    let params = names(result.rows.iter().map(|r| r.params.as_slice()));
    let metrics = names(result.rows.iter().map(|r| r.metrics.as_slice()));
    let mut w = csv::Writer::from_path(&files.runs).map_err(csv_err)?;
    let mut header = vec!["key", "engine", "cell", "dataset", "variant", "data_seed", "init_seed"];
    header.extend(&params);
    header.extend(&metrics);
    header.extend(["termination", "trace_hash"]);
    w.write_record(&header).map_err(csv_err)?;
    for r in &result.rows {
        let mut rec = vec![
            r.key.to_string(),
            r.key.engine.short_name().to_string(),
            cell_text(&r.key.cell),
            r.key.dataset.to_string(),
            r.key.variant.to_string(),
            r.data_seed.to_string(),
            r.init_seed.to_string(),
        ];
        rec.extend(params.iter().map(|p| lookup(&r.params, p)));
        rec.extend(metrics.iter().map(|m| lookup(&r.metrics, m)));
        rec.push(r.termination.clone());
        rec.push(r.trace_hash.clone());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(io_err)?;

    let summary = summarize(&result.rows);
    let mut w = csv::Writer::from_path(&files.summary).map_err(csv_err)?;
    let mut header: Vec<String> = ["engine", "cell", "variant", "count"].iter().map(|s| s.to_string()).collect();
    header.extend(params.iter().map(|p| p.to_string()));
    for m in &metrics {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for s in &summary {
        let mut rec = vec![s.engine.short_name().to_string(), cell_text(&s.cell), s.variant.to_string(), s.count.to_string()];
        rec.extend(params.iter().map(|p| lookup(&s.params, p)));
        for m in &metrics {
            match s.metrics.iter().find(|x| x.0 == *m) {
                Some((_, mean, std)) => rec.extend([mean.to_string(), std.to_string()]),
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(io_err)?;

    let meta = Metadata {
        scenario,
        version: env!("CARGO_PKG_VERSION"),
        config_hash: result.config.hash(),
        runs: result.rows.len(),
        deviations: result.config.deviations(),
        config: &result.config,
    };
    let file = File::create(&files.metadata).map_err(io_err)?;
    serde_json::to_writer_pretty(BufWriter::new(file), &meta).map_err(|e| Error::Io(e.to_string()))?;

    if let (Some(maps_path), Some(curves_path)) = (&files.maps, &files.curves) {
        let seg = &result.config.segmentation;
        let (xs, ys) = map_axes(seg);
        let mut w = csv::Writer::from_path(maps_path).map_err(csv_err)?;
        w.write_record(["setup", "engine", "component", "x", "y", "responsibility"]).map_err(csv_err)?;
        for m in &result.maps {
            let setup = seg.setups[m.setup].name();
            for (c, grid) in m.means.iter().enumerate() {
                for ((bx, by), v) in grid.indexed_iter() {
                    if v.is_nan() {
                        continue;
                    }
                    w.write_record([
                        setup.clone(),
                        m.engine.short_name().to_string(),
                        c.to_string(),
                        xs[bx].to_string(),
                        ys[by].to_string(),
                        v.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        w.flush().map_err(io_err)?;
        let mut w = csv::Writer::from_path(curves_path).map_err(csv_err)?;
        w.write_record(["setup", "engine", "iter", "train_loglik", "test_loglik"]).map_err(csv_err)?;
        for m in &result.maps {
            let setup = seg.setups[m.setup].name();
            for (t, train, test) in &m.curve {
                w.write_record([
                    setup.clone(),
                    m.engine.short_name().to_string(),
                    t.to_string(),
                    train.to_string(),
                    test.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(io_err)?;
    }
    Ok(files)
}
