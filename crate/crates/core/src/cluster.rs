//! k-means cluster miner and pseudo-label assignment.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::numerics::euclidean_sq;
use crate::rng::Rng;
use crate::sampling::{Dataset, Instance, PSEUDO_PREFIX};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 10,
            max_iter: 300,
            tol: 1e-6,
            restarts: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Instance ids, in input order.
    pub ids: Vec<String>,
    /// Cluster index of `ids[i]`.
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroids.
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
}

impl ClusterModel {
    pub fn cluster_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id).map(|p| self.assignments[p])
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Nearest centroid by squared distance; ties go to the lowest index.
fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(points: &[&[f64]], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points.iter().map(|p| nearest(p, centroids)).unzip()
}

fn count_distinct(points: &[&[f64]]) -> usize {
    let set: HashSet<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|x| (x + 0.0).to_bits()).collect())
        .collect();
    set.len()
}

fn plus_plus_init(points: &[&[f64]], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every point already sits on a centroid
            Err(_) => rng.gen_range(0..points.len()),
        };
        centroids.push(points[next].to_vec());
        for (d, p) in d2.iter_mut().zip(points) {
            let dn: f64 = p.iter().zip(&centroids[centroids.len() - 1]).map(|(a, b)| (a - b) * (a - b)).sum();
            *d = d.min(dn);
        }
    }
    centroids
}

fn means(points: &[&[f64]], labels: &[usize], k: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        sums[l].iter_mut().zip(p.iter()).for_each(|(s, x)| *s += x);
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|x| *x /= n.max(1) as f64);
    }
    (sums, counts)
}

fn partition_inertia(points: &[&[f64]], labels: &[usize], k: usize) -> f64 {
    let dim = points[0].len();
    let (centroids, _) = means(points, labels, k, dim);
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| p.iter().zip(&centroids[l]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

/// Hartigan single-point moves: relocate a point whenever doing so lowers the
/// total inertia once both affected means are updated. Lloyd can stall in a
/// partition that such a move improves; the reverse cannot happen. Inertia
/// after each sweep that moved something is appended to `history`.
fn refine(points: &[&[f64]], labels: &mut [usize], k: usize, history: &mut Vec<f64>) {
    let dim = points[0].len();
    loop {
        let mut moved = false;
        for i in 0..points.len() {
            let (centroids, counts) = means(points, labels, k, dim);
            let from = labels[i];
            let n_from = counts[from] as f64;
            if counts[from] < 2 {
                continue;
            }
            let d = |c: usize| -> f64 { points[i].iter().zip(&centroids[c]).map(|(a, b)| (a - b) * (a - b)).sum() };
            let removal = n_from / (n_from - 1.0) * d(from);
            let mut best = (from, removal);
            for c in (0..k).filter(|&c| c != from) {
                let n = counts[c] as f64;
                let cost = n / (n + 1.0) * d(c);
                if cost < best.1 * (1.0 - 1e-12) {
                    best = (c, cost);
                }
            }
            if best.0 != from {
                labels[i] = best.0;
                moved = true;
            }
        }
        if !moved {
            return;
        }
        history.push(partition_inertia(points, labels, k));
    }
}

/// One Lloyd run from a k-means++ start, polished by Hartigan moves.
///
/// Iterates assignment and mean updates until the largest centroid shift
/// drops below `tol` or `max_iter` updates have run, then assigns once more
/// against the final centroids. An empty cluster is reseeded at the point
/// farthest from its own centroid.
pub fn kmeans(features: &[(String, Vec<f64>)], k: usize, max_iter: usize, tol: f64, rng: &mut Rng) -> Result<ClusterModel> {
    if features.is_empty() {
        return Err(Error::invalid("k-means on an empty feature set"));
    }
    if k == 0 || max_iter == 0 || !(tol >= 0.0) {
        return Err(Error::invalid(format!(
            "k-means needs k >= 1, max_iter >= 1, tol >= 0; got k={k}, max_iter={max_iter}, tol={tol}"
        )));
    }
    let dim = features[0].1.len();
    if features.iter().any(|(_, f)| f.len() != dim) {
        return Err(Error::invalid("features differ in dimension"));
    }
    let points: Vec<&[f64]> = features.iter().map(|(_, f)| f.as_slice()).collect();
    let distinct = count_distinct(&points);
    if distinct < k {
        return Err(Error::invalid(format!("{distinct} distinct points cannot form {k} clusters")));
    }

    let mut centroids = plus_plus_init(&points, k, rng);
    let mut history = Vec::new();
    let mut updates = 0;
    loop {
        let (mut labels, mut dists) = assign(&points, &centroids);
        // reseed empty clusters one at a time
        loop {
            let mut sizes = vec![0usize; k];
            labels.iter().for_each(|&l| sizes[l] += 1);
            let Some(empty) = sizes.iter().position(|&s| s == 0) else {
                break;
            };
            let far = dists
                .iter()
                .enumerate()
                .filter(|&(i, _)| sizes[labels[i]] > 1)
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("some cluster holds two points");
            centroids[empty] = points[far].to_vec();
            (labels, dists) = assign(&points, &centroids);
        }
        history.push(dists.iter().sum());

        if updates == max_iter {
            refine(&points, &mut labels, k, &mut history);
            let (centroids, _) = means(&points, &labels, k, dim);
            // centroids are now exact means, which can only lower the inertia
            let inertia = partition_inertia(&points, &labels, k).min(*history.last().expect("non-empty"));
            if inertia < *history.last().expect("non-empty") {
                history.push(inertia);
            }
            return Ok(ClusterModel {
                k,
                inertia,
                centroids,
                ids: features.iter().map(|(id, _)| id.clone()).collect(),
                assignments: labels,
                history,
            });
        }

        let (next, _) = means(&points, &labels, k, dim);
        let mut shift: f64 = 0.0;
        for (mean, c) in next.into_iter().zip(centroids.iter_mut()) {
            shift = shift.max(euclidean_sq(&mean, c)?.sqrt());
            *c = mean;
        }
        updates += 1;
        if shift < tol {
            // converged: one final assignment against the settled centroids
            updates = max_iter;
        }
    }
}

/// Best of `cfg.restarts` independent k-means runs by inertia.
pub fn kmeans_best_of(features: &[(String, Vec<f64>)], cfg: &KMeansConfig, rng: &mut Rng) -> Result<ClusterModel> {
    let mut best: Option<ClusterModel> = None;
    for _ in 0..cfg.restarts.max(1) {
        let model = kmeans(features, cfg.k, cfg.max_iter, cfg.tol, rng)?;
        if best.as_ref().map_or(true, |b| model.inertia < b.inertia) {
            best = Some(model);
        }
    }
    Ok(best.expect("at least one restart"))
}

pub fn pseudo_class_name(cluster: usize) -> String {
    format!("{PSEUDO_PREFIX}{cluster}")
}

/// Labels every target instance with its cluster's pseudo class.
pub fn assign_pseudo_labels(cm: &ClusterModel, target: &Dataset) -> Result<Dataset> {
    let lookup: HashMap<&str, usize> = cm
        .ids
        .iter()
        .map(String::as_str)
        .zip(cm.assignments.iter().copied())
        .collect();
    let instances = target
        .instances()
        .iter()
        .map(|inst| {
            let c = lookup
                .get(inst.id.as_str())
                .ok_or_else(|| Error::Invariant(format!("instance `{}` has no cluster assignment", inst.id)))?;
            Ok(Instance {
                label: Some(pseudo_class_name(*c)),
                ..inst.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(instances)
}

const DUMP_MAGIC: &str = "#dafec-cluster-dump v1";

/// Writes the cluster dump:
///
/// ```text
/// #dafec-cluster-dump v1
/// k <k> dim <d> inertia <x>
/// centroid <c> <d values>
/// assign <id> <c>
/// ```
pub fn write_cluster_dump(path: &Path, cm: &ClusterModel) -> Result<()> {
    let dim = cm.centroids.first().map_or(0, Vec::len);
    let mut out = String::new();
    writeln!(out, "{DUMP_MAGIC}").unwrap();
    writeln!(out, "k {} dim {dim} inertia {:?}", cm.k, cm.inertia).unwrap();
    for (c, mu) in cm.centroids.iter().enumerate() {
        let vals: Vec<String> = mu.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "centroid {c} {}", vals.join(" ")).unwrap();
    }
    for (id, a) in cm.ids.iter().zip(&cm.assignments) {
        if id.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!("instance id `{id}` contains whitespace")));
        }
        writeln!(out, "assign {id} {a}").unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_cluster_dump(path: &Path) -> Result<ClusterModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::parse(path, m);
    let mut lines = text.lines();
    if lines.next() != Some(DUMP_MAGIC) {
        return Err(bad(format!("missing `{DUMP_MAGIC}` header")));
    }
    let head: Vec<&str> = lines.next().unwrap_or_default().split_whitespace().collect();
    let ["k", k, "dim", dim, "inertia", inertia] = head.as_slice() else {
        return Err(bad("malformed summary line".into()));
    };
    let k: usize = k.parse().map_err(|_| bad(format!("bad k `{k}`")))?;
    let dim: usize = dim.parse().map_err(|_| bad(format!("bad dim `{dim}`")))?;
    let inertia: f64 = inertia.parse().map_err(|_| bad(format!("bad inertia `{inertia}`")))?;
    let mut centroids = Vec::with_capacity(k);
    let mut ids = Vec::new();
    let mut assignments = Vec::new();
    for line in lines {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("centroid") => {
                let vals = parts
                    .skip(1)
                    .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad value `{v}`"))))
                    .collect::<Result<Vec<_>>>()?;
                if vals.len() != dim {
                    return Err(bad(format!("centroid has {} values, expected {dim}", vals.len())));
                }
                centroids.push(vals);
            }
            Some("assign") => {
                let (Some(id), Some(c)) = (parts.next(), parts.next()) else {
                    return Err(bad(format!("malformed line `{line}`")));
                };
                let c: usize = c.parse().map_err(|_| bad(format!("bad cluster `{c}`")))?;
                if c >= k {
                    return Err(bad(format!("cluster {c} out of range")));
                }
                ids.push(id.to_string());
                assignments.push(c);
            }
            None => {}
            Some(other) => return Err(bad(format!("unexpected record `{other}`"))),
        }
    }
    if centroids.len() != k {
        return Err(bad(format!("{} centroids for k = {k}", centroids.len())));
    }
    Ok(ClusterModel {
        k,
        centroids,
        ids,
        assignments,
        inertia,
        history: vec![inertia],
    })
}
