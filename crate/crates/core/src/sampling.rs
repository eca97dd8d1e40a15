//! Datasets, episodic sampling and the pseudo-label merge.
//!
//! Dataset files are newline-delimited JSON, one instance per line:
//!
//! ```text
//! {"id":"s0-3","domain":"source","label":"s0","features":[0.1,-2.3,...]}
//! {"id":"t-17","domain":"target","label":null,"features":[...]}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::rng::Rng;
use crate::{Error, Result};

/// Reserved prefix of cluster-derived class ids.
pub const PSEUDO_PREFIX: &str = "pseudo:";

/// First line of a hidden gold-label sidecar. Dataset loading refuses any
/// file that starts with it, so sidecars cannot leak into training.
pub const GOLD_SIDECAR_MAGIC: &str = "#dafec-gold-labels v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub domain: Domain,
    pub label: Option<String>,
    pub features: Vec<f64>,
}

/// Immutable collection of instances with a class index.
///
/// Classes are kept in sorted order so that sampling is reproducible.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    instances: Vec<Instance>,
    class_index: BTreeMap<String, Vec<usize>>,
    dim: usize,
}

impl Dataset {
    pub fn new(instances: Vec<Instance>) -> Result<Self> {
        let dim = instances.first().map_or(0, |i| i.features.len());
        let mut ids = HashSet::with_capacity(instances.len());
        let mut class_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (idx, inst) in instances.iter().enumerate() {
            if inst.features.len() != dim {
                return Err(Error::invalid(format!(
                    "instance `{}` has {} features, expected {dim}",
                    inst.id,
                    inst.features.len()
                )));
            }
            if inst.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("instance `{}` has non-finite features", inst.id)));
            }
            if !ids.insert(inst.id.as_str()) {
                return Err(Error::invalid(format!("duplicate instance id `{}`", inst.id)));
            }
            if let Some(label) = &inst.label {
                if label.is_empty() {
                    return Err(Error::invalid(format!("instance `{}` has an empty label", inst.id)));
                }
                class_index.entry(label.clone()).or_default().push(idx);
            }
        }
        Ok(Self {
            instances,
            class_index,
            dim,
        })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn into_instances(self) -> Vec<Instance> {
        self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.class_index.keys().map(String::as_str)
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    /// Instance indices of `class`.
    pub fn class_members(&self, class: &str) -> Option<&[usize]> {
        self.class_index.get(class).map(Vec::as_slice)
    }

    pub fn class_ids(&self, class: &str) -> Option<Vec<&str>> {
        self.class_members(class)
            .map(|m| m.iter().map(|&i| self.instances[i].id.as_str()).collect())
    }

    /// Copy with every label removed.
    pub fn unlabeled(&self) -> Dataset {
        let instances = self
            .instances
            .iter()
            .map(|i| Instance {
                label: None,
                ..i.clone()
            })
            .collect();
        Dataset::new(instances).expect("stripping labels keeps a dataset valid")
    }

    /// Features of the given instances as matrix rows.
    pub fn features_of(&self, idx: &[usize]) -> Matrix {
        let rows: Vec<&[f64]> = idx.iter().map(|&i| self.instances[i].features.as_slice()).collect();
        Matrix::from_rows(&rows).expect("uniform dimension")
    }

    pub fn feature_matrix(&self) -> Matrix {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.features_of(&idx)
    }
}

/// One N-way-K-shot task. Indices point into the sampled [`Dataset`];
/// `support[c]` and `query[c]` belong to `classes[c]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<String>,
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.classes.len()
    }

    pub fn shot(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }

    /// Support indices, class-major.
    pub fn support_flat(&self) -> Vec<usize> {
        self.support.iter().flatten().copied().collect()
    }

    /// Query indices, class-major, with the class position of each.
    pub fn query_flat(&self) -> (Vec<usize>, Vec<usize>) {
        let mut idx = Vec::new();
        let mut labels = Vec::new();
        for (c, q) in self.query.iter().enumerate() {
            idx.extend_from_slice(q);
            labels.extend(std::iter::repeat(c).take(q.len()));
        }
        (idx, labels)
    }
}

fn check_episode_shape(n: usize, k: usize, m: usize) -> Result<()> {
    if n < 2 || k < 1 || m < 1 {
        return Err(Error::invalid(format!(
            "episode needs N >= 2, K >= 1, M >= 1; got N={n}, K={k}, M={m}"
        )));
    }
    Ok(())
}

fn check_capacity<'a>(ds: &Dataset, classes: impl Iterator<Item = &'a str>, per_class: usize) -> Result<()> {
    for c in classes {
        let have = ds.class_index[c].len();
        if have < per_class {
            return Err(Error::Capacity(format!(
                "class `{c}` has {have} instances, episode needs {per_class}"
            )));
        }
    }
    Ok(())
}

fn draw_members(ds: &Dataset, classes: Vec<String>, k: usize, m: usize, rng: &mut Rng) -> Episode {
    let mut support = Vec::with_capacity(classes.len());
    let mut query = Vec::with_capacity(classes.len());
    for c in &classes {
        let members = &ds.class_index[c];
        let picks = sample(rng, members.len(), k + m).into_vec();
        support.push(picks[..k].iter().map(|&p| members[p]).collect());
        query.push(picks[k..].iter().map(|&p| members[p]).collect());
    }
    Episode {
        classes,
        support,
        query,
    }
}

/// Samples `n` classes uniformly without replacement, then `k + m`
/// instances per class without replacement: the first `k` form the
/// support set, the rest the query set.
pub fn sample_episode(ds: &Dataset, n: usize, k: usize, m: usize, rng: &mut Rng) -> Result<Episode> {
    check_episode_shape(n, k, m)?;
    if ds.num_classes() < n {
        return Err(Error::Capacity(format!(
            "dataset has {} classes, episode needs {n}",
            ds.num_classes()
        )));
    }
    check_capacity(ds, ds.classes(), k + m)?;
    let all: Vec<&str> = ds.classes().collect();
    let classes = sample(rng, all.len(), n)
        .into_iter()
        .map(|i| all[i].to_string())
        .collect();
    Ok(draw_members(ds, classes, k, m, rng))
}

/// Like [`sample_episode`], but a fixed `pseudo_fraction` of the `n`
/// classes (rounded) is drawn from pseudo classes and the rest from the
/// remaining classes.
pub fn sample_episode_mixed(
    ds: &Dataset,
    n: usize,
    k: usize,
    m: usize,
    pseudo_fraction: f64,
    rng: &mut Rng,
) -> Result<Episode> {
    check_episode_shape(n, k, m)?;
    if !(0.0..=1.0).contains(&pseudo_fraction) {
        return Err(Error::invalid(format!("pseudo fraction {pseudo_fraction} outside [0, 1]")));
    }
    check_capacity(ds, ds.classes(), k + m)?;
    let (pseudo, real): (Vec<&str>, Vec<&str>) = ds.classes().partition(|c| c.starts_with(PSEUDO_PREFIX));
    let n_pseudo = (pseudo_fraction * n as f64).round() as usize;
    let n_real = n - n_pseudo;
    if pseudo.len() < n_pseudo || real.len() < n_real {
        return Err(Error::Capacity(format!(
            "need {n_pseudo} pseudo and {n_real} other classes, have {} and {}",
            pseudo.len(),
            real.len()
        )));
    }
    let mut classes: Vec<String> = sample(rng, real.len(), n_real)
        .into_iter()
        .map(|i| real[i].to_string())
        .collect();
    classes.extend(
        sample(rng, pseudo.len(), n_pseudo)
            .into_iter()
            .map(|i| pseudo[i].to_string()),
    );
    Ok(draw_members(ds, classes, k, m, rng))
}

/// `size` instances drawn uniformly without replacement.
pub fn sample_unlabeled<'a>(ds: &'a Dataset, size: usize, rng: &mut Rng) -> Result<Vec<&'a Instance>> {
    Ok(sample_unlabeled_indices(ds, size, rng)?
        .into_iter()
        .map(|i| &ds.instances[i])
        .collect())
}

pub fn sample_unlabeled_indices(ds: &Dataset, size: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if size > ds.len() {
        return Err(Error::Capacity(format!(
            "requested {size} instances from a dataset of {}",
            ds.len()
        )));
    }
    Ok(sample(rng, ds.len(), size).into_vec())
}

/// Union of the source dataset and a pseudo-labeled dataset.
pub fn merge_datasets(source: &Dataset, pseudo: &Dataset) -> Result<Dataset> {
    if pseudo.is_empty() {
        return Ok(source.clone());
    }
    if !source.is_empty() && source.dim() != pseudo.dim() {
        return Err(Error::invalid(format!(
            "source has {} features, pseudo-labeled data has {}",
            source.dim(),
            pseudo.dim()
        )));
    }
    if let Some(bad) = pseudo.classes().find(|c| !c.starts_with(PSEUDO_PREFIX)) {
        return Err(Error::Invariant(format!(
            "pseudo class `{bad}` lacks the `{PSEUDO_PREFIX}` namespace"
        )));
    }
    if let Some(bad) = source
        .classes()
        .find(|c| c.starts_with(PSEUDO_PREFIX) || pseudo.class_index.contains_key(*c))
    {
        return Err(Error::Invariant(format!("source class `{bad}` collides with pseudo classes")));
    }
    let mut instances = source.instances.clone();
    instances.extend(pseudo.instances.iter().cloned());
    Dataset::new(instances)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut instances = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if n == 0 && line.trim_end() == GOLD_SIDECAR_MAGIC {
            return Err(Error::parse(
                path,
                "this is a gold-label sidecar; it is not loadable as a dataset",
            ));
        }
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))?;
        instances.push(inst);
    }
    Dataset::new(instances).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_instances(path, ds.instances())
}

pub fn write_instances(path: &Path, instances: &[Instance]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for inst in instances {
        let line = serde_json::to_string(inst).expect("instance serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
