//! Few-shot accuracy aggregation and cluster-quality indices.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::euclidean_sq;
use crate::pipeline::TrainConfig;
use crate::{Error, Result};

/// Fraction of positions where `preds` equals `golds`.
pub fn accuracy<L: PartialEq>(preds: &[L], golds: &[L]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::invalid("accuracy of zero predictions"));
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub correct: usize,
    pub total: usize,
    /// `(correct, total)` per episode class position.
    pub per_class: Vec<(usize, usize)>,
}

impl EpisodeResult {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Mean and population standard deviation of episode accuracies, in percent.
pub fn aggregate(results: &[EpisodeResult]) -> Result<(f64, f64)> {
    if results.is_empty() {
        return Err(Error::invalid("no episode results to aggregate"));
    }
    if let Some(bad) = results.iter().find(|r| r.total == 0 || r.correct > r.total) {
        return Err(Error::invalid(format!(
            "episode result {}/{} is not a valid count",
            bad.correct, bad.total
        )));
    }
    // Welford
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, r) in results.iter().enumerate() {
        let x = 100.0 * r.accuracy();
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    Ok((mean, (m2 / results.len() as f64).max(0.0).sqrt()))
}

/// Davies-Bouldin index: `(1/k) Σ_i max_{j≠i} (s_i + s_j) / ‖c_i − c_j‖`,
/// where `c_i` is a class mean and `s_i` the mean member distance to it.
pub fn davies_bouldin<L: Ord + Clone>(features: &[Vec<f64>], labels: &[L]) -> Result<f64> {
    if features.len() != labels.len() {
        return Err(Error::invalid("features and labels differ in length"));
    }
    let mut groups: BTreeMap<&L, Vec<&Vec<f64>>> = BTreeMap::new();
    for (f, l) in features.iter().zip(labels) {
        groups.entry(l).or_default().push(f);
    }
    if groups.len() < 2 {
        return Err(Error::invalid("Davies-Bouldin needs at least two clusters"));
    }
    let dim = features[0].len();
    let mut centroids = Vec::with_capacity(groups.len());
    let mut scatter = Vec::with_capacity(groups.len());
    for members in groups.values() {
        let mut c = vec![0.0; dim];
        for m in members {
            c.iter_mut().zip(m.iter()).for_each(|(a, x)| *a += x);
        }
        c.iter_mut().for_each(|a| *a /= members.len() as f64);
        let s = members
            .iter()
            .map(|m| euclidean_sq(m, &c).map(f64::sqrt))
            .sum::<Result<f64>>()?
            / members.len() as f64;
        centroids.push(c);
        scatter.push(s);
    }
    let k = centroids.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in (0..k).filter(|&j| j != i) {
            let d = euclidean_sq(&centroids[i], &centroids[j])?.sqrt();
            if d == 0.0 {
                return Err(Error::Numeric(format!(
                    "clusters {i} and {j} have coincident centroids; Davies-Bouldin is undefined"
                )));
            }
            worst = worst.max((scatter[i] + scatter[j]) / d);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

fn pairs(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Fowlkes-Mallows index `TP / √((TP + FP)(TP + FN))` from a contingency
/// table; 0 when no pair is co-clustered in both labelings.
pub fn fowlkes_mallows<A: Eq + Hash, B: Eq + Hash>(pred: &[A], gold: &[B]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::invalid(format!(
            "{} predicted labels for {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::invalid("Fowlkes-Mallows needs at least two points"));
    }
    let mut table: HashMap<(&A, &B), u64> = HashMap::new();
    let mut pred_sizes: HashMap<&A, u64> = HashMap::new();
    let mut gold_sizes: HashMap<&B, u64> = HashMap::new();
    for (a, b) in pred.iter().zip(gold) {
        *table.entry((a, b)).or_default() += 1;
        *pred_sizes.entry(a).or_default() += 1;
        *gold_sizes.entry(b).or_default() += 1;
    }
    let tp: u64 = table.values().map(|&n| pairs(n)).sum();
    if tp == 0 {
        return Ok(0.0);
    }
    let tp_fp: u64 = pred_sizes.values().map(|&n| pairs(n)).sum();
    let tp_fn: u64 = gold_sizes.values().map(|&n| pairs(n)).sum();
    Ok(tp as f64 / ((tp_fp as f64) * (tp_fn as f64)).sqrt())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractorTrace {
    pub ce: Vec<f64>,
    pub dis: Vec<f64>,
    pub enc: Vec<f64>,
    pub entropy: Vec<f64>,
    pub lambda: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTraces {
    pub extractor: ExtractorTrace,
    pub classifier_ce: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Setting {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub setting: Setting,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    /// DBI of the encoded target pool under its k-means clusters.
    pub dbi: Option<f64>,
    /// FMI of pseudo labels against hidden gold labels, filled in by
    /// reporting code that is allowed to read them.
    pub fmi: Option<f64>,
    pub seed: u64,
    pub config: TrainConfig,
    pub stage_log: Vec<String>,
    pub traces: LossTraces,
    pub episodes: Vec<EpisodeResult>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("malformed run report: {e}")))
    }

    /// `episode,correct,total,accuracy` per evaluation episode.
    pub fn episodes_csv(&self) -> String {
        let mut out = String::from("episode,correct,total,accuracy\n");
        for (i, r) in self.episodes.iter().enumerate() {
            writeln!(out, "{i},{},{},{:?}", r.correct, r.total, r.accuracy()).unwrap();
        }
        out
    }

    /// Writes `report.json` and `episodes.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("episodes.csv");
        std::fs::write(&csv, self.episodes_csv()).map_err(|e| Error::io(&csv, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let json = dir.join("report.json");
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        Self::from_json(&text).map_err(|e| Error::parse(&json, e.to_string()))
    }
}
