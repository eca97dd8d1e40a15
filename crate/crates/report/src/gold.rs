//! Hidden gold labels of the unlabeled target pool.
//!
//! Sidecar format: the magic line, then one `id<TAB>class` line per instance.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use dafec_core::cluster::ClusterModel;
use dafec_core::metrics::{fowlkes_mallows, RunReport};
use dafec_core::sampling::GOLD_SIDECAR_MAGIC;
use dafec_core::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GoldLabels {
    by_id: HashMap<String, String>,
}

impl GoldLabels {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        Self {
            by_id: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.by_id.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Gold classes for `ids`, failing on the first id without one.
    pub fn lookup<'a>(&'a self, ids: &[String]) -> Result<Vec<&'a str>> {
        ids.iter()
            .map(|id| {
                self.get(id)
                    .ok_or_else(|| Error::Invariant(format!("no gold label for instance `{id}`")))
            })
            .collect()
    }
}

pub fn write_gold_sidecar(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut out = String::with_capacity(pairs.len() * 16);
    out.push_str(GOLD_SIDECAR_MAGIC);
    out.push('\n');
    for (id, class) in pairs {
        if id.contains(['\t', '\n']) || class.contains(['\t', '\n']) {
            return Err(Error::InvalidArgument(format!("tab or newline in gold entry `{id}`")));
        }
        out.push_str(id);
        out.push('\t');
        out.push_str(class);
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_gold_sidecar(path: &Path) -> Result<GoldLabels> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse = |message: String| Error::parse(path, message);
    let mut lines = text.lines();
    if lines.next() != Some(GOLD_SIDECAR_MAGIC) {
        return Err(parse("missing gold sidecar header".into()));
    }
    let mut by_id = HashMap::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, class) = line
            .split_once('\t')
            .ok_or_else(|| parse(format!("line {}: expected `id<TAB>class`", n + 2)))?;
        if by_id.insert(id.to_string(), class.to_string()).is_some() {
            return Err(parse(format!("line {}: duplicate id `{id}`", n + 2)));
        }
    }
    Ok(GoldLabels { by_id })
}

/// FMI between cluster assignments and gold classes.
pub fn cluster_fmi(model: &ClusterModel, gold: &GoldLabels) -> Result<f64> {
    let truth = gold.lookup(&model.ids)?;
    fowlkes_mallows(&model.assignments, &truth)
}

pub fn fill_fmi(report: &mut RunReport, model: &ClusterModel, gold: &GoldLabels) -> Result<()> {
    report.fmi = Some(cluster_fmi(model, gold)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gold.tsv");
        let pairs = vec![("u1".to_string(), "t0".to_string()), ("u2".to_string(), "t3".to_string())];
        write_gold_sidecar(&p, &pairs).unwrap();
        let gold = read_gold_sidecar(&p).unwrap();
        assert_eq!(gold, GoldLabels::new(pairs));
        assert_eq!(gold.get("u2"), Some("t3"));
        assert!(gold.lookup(&["u9".to_string()]).is_err());
    }

    #[test]
    fn sidecar_needs_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gold.tsv");
        std::fs::write(&p, "u1\tt0\n").unwrap();
        assert!(matches!(read_gold_sidecar(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn fmi_of_perfect_clusters_is_one() {
        let model = ClusterModel {
            k: 2,
            centroids: vec![vec![0.0], vec![1.0]],
            ids: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            assignments: vec![1, 1, 0, 0],
            inertia: 0.0,
            history: vec![],
        };
        let gold = GoldLabels::new([("a", "x"), ("b", "x"), ("c", "y"), ("d", "y")].map(|(a, b)| (a.into(), b.into())));
        assert!((cluster_fmi(&model, &gold).unwrap() - 1.0).abs() < 1e-12);
    }
}
