//! Plot-ready CSV files.
//!
//! For each run: the extractor loss trace, the classifier loss trace, the
//! entropy-weight schedule and a 2-D principal-component scatter of the
//! encoded target pool. Across runs: one DBI/FMI bar row per run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dafec_core::cluster::{read_cluster_dump, ClusterModel};
use dafec_core::losses::AnnealSchedule;
use dafec_core::metrics::RunReport;
use dafec_core::numerics::pca::Pca;
use dafec_core::pipeline::features_from_dataset;
use dafec_core::sampling::load_dataset;
use dafec_core::{Error, Result};

use crate::gold::{cluster_fmi, GoldLabels};

/// Power-iteration tolerance for the scatter projection.
pub const PCA_TOL: f64 = 1e-8;
const PCA_MAX_ITER: usize = 100_000;

/// Points in the schedule CSV, endpoints included.
pub const LAMBDA_POINTS: usize = 101;

/// A finished run as read back from its output directory.
#[derive(Clone, Debug)]
pub struct PlotRun {
    pub name: String,
    pub report: RunReport,
    pub features: Option<Vec<(String, Vec<f64>)>>,
    pub clusters: Option<ClusterModel>,
}

impl PlotRun {
    /// Reads `report.json` and, when the run mined pseudo labels,
    /// `features.jsonl` and `clusters.txt` from `dir`.
    pub fn load(name: impl Into<String>, dir: &Path) -> Result<Self> {
        let report = RunReport::read(dir)?;
        let mined = report.stage_log.iter().any(|s| s == "stage3:mine-pseudo-labels");
        let (features, clusters) = if mined {
            let features = features_from_dataset(&load_dataset(&dir.join("features.jsonl"))?);
            (Some(features), Some(read_cluster_dump(&dir.join("clusters.txt"))?))
        } else {
            (None, None)
        };
        Ok(Self {
            name: name.into(),
            report,
            features,
            clusters,
        })
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// `iteration,ce,dis,enc,entropy,lambda`; ablated terms leave empty cells.
pub fn loss_trace_csv(report: &RunReport) -> String {
    let t = &report.traces.extractor;
    let mut out = String::from("iteration,ce,dis,enc,entropy,lambda\n");
    for i in 0..t.ce.len() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{}",
            t.ce[i],
            cell(t.dis.get(i).copied()),
            cell(t.enc.get(i).copied()),
            cell(t.entropy.get(i).copied()),
            cell(t.lambda.get(i).copied())
        );
    }
    out
}

pub fn classifier_trace_csv(report: &RunReport) -> String {
    let mut out = String::from("iteration,ce\n");
    for (i, ce) in report.traces.classifier_ce.iter().enumerate() {
        let _ = writeln!(out, "{i},{ce}");
    }
    out
}

/// `t,lambda` at `points` evenly spaced iterations from 0 to the horizon.
pub fn lambda_csv(schedule: &AnnealSchedule, points: usize) -> Result<String> {
    if points < 2 {
        return Err(Error::invalid("schedule plot needs at least two points"));
    }
    let horizon = schedule.horizon;
    let mut out = String::from("t,lambda\n");
    let mut last = None;
    for i in 0..points {
        let t = (horizon as u128 * i as u128 / (points - 1) as u128) as u64;
        if last == Some(t) {
            continue;
        }
        last = Some(t);
        let _ = writeln!(out, "{t},{}", schedule.lambda_at(t));
    }
    Ok(out)
}

/// `variant,dbi,fmi`, one row per run.
pub fn cluster_bars_csv(rows: &[(String, Option<f64>, Option<f64>)]) -> String {
    let mut out = String::from("variant,dbi,fmi\n");
    for (name, dbi, fmi) in rows {
        let _ = writeln!(out, "{name},{},{}", cell(*dbi), cell(*fmi));
    }
    out
}

/// `id,pc1,pc2,gold`: features projected on their top two principal
/// components; `gold` is empty without a sidecar.
pub fn pca_scatter_csv(features: &[(String, Vec<f64>)], gold: Option<&GoldLabels>) -> Result<String> {
    let rows: Vec<Vec<f64>> = features.iter().map(|(_, f)| f.clone()).collect();
    let pca = Pca::fit(&rows, 2, PCA_TOL, PCA_MAX_ITER)?;
    let mut out = String::from("id,pc1,pc2,gold\n");
    for (id, f) in features {
        let p = pca.project(f);
        let g = match gold {
            Some(g) => g
                .get(id)
                .ok_or_else(|| Error::Invariant(format!("no gold label for instance `{id}`")))?,
            None => "",
        };
        let _ = writeln!(out, "{id},{},{},{g}", p[0], p[1]);
    }
    Ok(out)
}

/// `variant,accuracy_mean,accuracy_std,dbi,fmi`, one row per variant.
pub fn ablation_table(rows: &[(&str, &RunReport)]) -> String {
    let mut out = String::from("variant,accuracy_mean,accuracy_std,dbi,fmi\n");
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{name},{:.2},{:.2},{},{}",
            r.accuracy_mean,
            r.accuracy_std,
            cell(r.dbi),
            cell(r.fmi)
        );
    }
    out
}

fn write(dir: &Path, name: &str, body: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes every plot file for `runs` into `out`; returns the paths written.
/// FMI is computed from each run's clusters when `gold` is given.
pub fn emit_plot_data(out: &Path, runs: &[PlotRun], gold: Option<&GoldLabels>) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(Error::invalid("no runs to plot"));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    let mut bars = Vec::with_capacity(runs.len());
    for run in runs {
        let name = &run.name;
        write(out, &format!("{name}.loss.csv"), &loss_trace_csv(&run.report), &mut written)?;
        write(out, &format!("{name}.classifier_loss.csv"), &classifier_trace_csv(&run.report), &mut written)?;
        let schedule = run.report.config.schedule()?;
        write(out, &format!("{name}.lambda.csv"), &lambda_csv(&schedule, LAMBDA_POINTS)?, &mut written)?;
        if let Some(features) = &run.features {
            write(out, &format!("{name}.pca.csv"), &pca_scatter_csv(features, gold)?, &mut written)?;
        }
        let fmi = match (&run.clusters, gold) {
            (Some(model), Some(g)) => Some(cluster_fmi(model, g)?),
            _ => run.report.fmi,
        };
        bars.push((name.clone(), run.report.dbi, fmi));
    }
    write(out, "cluster_bars.csv", &cluster_bars_csv(&bars), &mut written)?;
    Ok(written)
}
