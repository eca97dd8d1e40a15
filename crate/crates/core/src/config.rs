//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys cover both the
//! training configuration and the synthetic benchmark:
//!
//! ```text
//! # episode shape
//! n = 5
//! k = 1
//! m = 5
//! tau = 2.0
//! anneal = cosine          # cosine | linear | constant
//! anneal_t = 6000
//! entropy_sign = as_written  # as_written | negated
//! pseudo_fraction = none   # none | 0.0..1.0
//! d_in = 16                # synthetic benchmark keys
//! ```
//!
//! `seed` sets both the training and the generator seed; `data_seed` only
//! the generator's. See [`KEYS`] for the full list.

use std::path::Path;
use std::str::FromStr;

use crate::losses::EntropySign;
use crate::pipeline::{AnnealKind, TrainConfig};
use crate::synthetic::SyntheticSpec;
use crate::{Error, Result};

/// Every recognized key.
pub const KEYS: &[&str] = &[
    "n", "k", "m", "eval_n", "eval_k", "eval_m", "episodes", "tau", "anneal", "anneal_t", "constant_lambda",
    "eq9_literal", "entropy_sign", "clusters", "kmeans_max_iter", "kmeans_tol", "kmeans_restarts", "lr", "iters",
    "classifier_iters", "early_stop_patience", "hidden_dim", "feature_dim", "disc_hidden", "pseudo_fraction",
    "warm_start", "no_pseudo", "no_cpm_s", "no_cpm_a", "no_cpm_c", "seed", "d_in", "source_classes",
    "target_classes", "shared_fraction", "samples_per_class", "class_separation", "noise_sigma", "rotation",
    "translation", "test_fraction", "data_seed",
];

/// Splits config text into `(key, value)` pairs, in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(Error::invalid(format!("line {}: empty key or value", n + 1)));
        }
        pairs.push((key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("`{key}`: cannot parse `{value}`")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::invalid(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

pub fn parse_anneal(value: &str) -> Result<AnnealKind> {
    match value {
        "cosine" => Ok(AnnealKind::Cosine),
        "linear" => Ok(AnnealKind::Linear),
        "constant" => Ok(AnnealKind::Constant),
        _ => Err(Error::invalid(format!(
            "anneal mode must be cosine, linear or constant, got `{value}`"
        ))),
    }
}

pub fn parse_entropy_sign(value: &str) -> Result<EntropySign> {
    match value {
        "as_written" => Ok(EntropySign::AsWritten),
        "negated" => Ok(EntropySign::Negated),
        _ => Err(Error::invalid(format!(
            "entropy sign must be as_written or negated, got `{value}`"
        ))),
    }
}

/// Applies one key to whichever structure owns it.
pub fn apply(cfg: &mut TrainConfig, spec: &mut SyntheticSpec, key: &str, value: &str) -> Result<()> {
    let v = value;
    match key {
        "n" => cfg.way = num(key, v)?,
        "k" => cfg.shot = num(key, v)?,
        "m" => cfg.query = num(key, v)?,
        "eval_n" => cfg.eval_way = num(key, v)?,
        "eval_k" => cfg.eval_shot = num(key, v)?,
        "eval_m" => cfg.eval_query = num(key, v)?,
        "episodes" => cfg.eval_episodes = num(key, v)?,
        "tau" => cfg.tau = num(key, v)?,
        "anneal" => cfg.anneal = parse_anneal(v)?,
        "anneal_t" => cfg.anneal_horizon = num(key, v)?,
        "constant_lambda" => cfg.constant_lambda = num(key, v)?,
        "eq9_literal" => cfg.eq9_literal = flag(key, v)?,
        "entropy_sign" => cfg.entropy_sign = parse_entropy_sign(v)?,
        "clusters" => cfg.clusters = num(key, v)?,
        "kmeans_max_iter" => cfg.kmeans_max_iter = num(key, v)?,
        "kmeans_tol" => cfg.kmeans_tol = num(key, v)?,
        "kmeans_restarts" => cfg.kmeans_restarts = num(key, v)?,
        "lr" => cfg.lr = num(key, v)?,
        "iters" => cfg.total_iters = num(key, v)?,
        "classifier_iters" => cfg.classifier_iters = num(key, v)?,
        "early_stop_patience" => cfg.early_stop_patience = optional(key, v)?,
        "hidden_dim" => cfg.hidden_dim = num(key, v)?,
        "feature_dim" => cfg.feature_dim = num(key, v)?,
        "disc_hidden" => cfg.disc_hidden = num(key, v)?,
        "pseudo_fraction" => cfg.pseudo_fraction = optional(key, v)?,
        "warm_start" => cfg.warm_start = flag(key, v)?,
        "no_pseudo" => cfg.ablations.no_pseudo = flag(key, v)?,
        "no_cpm_s" => cfg.ablations.no_cpm_s = flag(key, v)?,
        "no_cpm_a" => cfg.ablations.no_cpm_a = flag(key, v)?,
        "no_cpm_c" => cfg.ablations.no_cpm_c = flag(key, v)?,
        "seed" => {
            cfg.seed = num(key, v)?;
            spec.seed = cfg.seed;
        }
        "d_in" => spec.d_in = num(key, v)?,
        "source_classes" => spec.source_classes = num(key, v)?,
        "target_classes" => spec.target_classes = num(key, v)?,
        "shared_fraction" => spec.shared_fraction = num(key, v)?,
        "samples_per_class" => spec.samples_per_class = num(key, v)?,
        "class_separation" => spec.class_separation = num(key, v)?,
        "noise_sigma" => spec.noise_sigma = num(key, v)?,
        "rotation" => spec.rotation = num(key, v)?,
        "translation" => spec.translation = num(key, v)?,
        "test_fraction" => spec.test_fraction = num(key, v)?,
        "data_seed" => spec.seed = num(key, v)?,
        _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
    }
    Ok(())
}

/// Parses `text` on top of the defaults.
pub fn from_text(text: &str) -> Result<(TrainConfig, SyntheticSpec)> {
    let mut cfg = TrainConfig::default();
    let mut spec = SyntheticSpec::default();
    for (key, value) in parse_pairs(text)? {
        apply(&mut cfg, &mut spec, &key, &value)?;
    }
    Ok((cfg, spec))
}

pub fn load(path: &Path) -> Result<(TrainConfig, SyntheticSpec)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text).map_err(|e| Error::parse(path, e.to_string()))
}

fn opt_text<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

/// Renders both structures as config text that [`from_text`] reads back.
pub fn to_text(cfg: &TrainConfig, spec: &SyntheticSpec) -> String {
    let anneal = match cfg.anneal {
        AnnealKind::Cosine => "cosine",
        AnnealKind::Linear => "linear",
        AnnealKind::Constant => "constant",
    };
    let sign = match cfg.entropy_sign {
        EntropySign::AsWritten => "as_written",
        EntropySign::Negated => "negated",
    };
    let a = &cfg.ablations;
    let rows: Vec<(&str, String)> = vec![
        ("n", cfg.way.to_string()),
        ("k", cfg.shot.to_string()),
        ("m", cfg.query.to_string()),
        ("eval_n", cfg.eval_way.to_string()),
        ("eval_k", cfg.eval_shot.to_string()),
        ("eval_m", cfg.eval_query.to_string()),
        ("episodes", cfg.eval_episodes.to_string()),
        ("tau", format!("{:?}", cfg.tau)),
        ("anneal", anneal.to_string()),
        ("anneal_t", cfg.anneal_horizon.to_string()),
        ("constant_lambda", format!("{:?}", cfg.constant_lambda)),
        ("eq9_literal", cfg.eq9_literal.to_string()),
        ("entropy_sign", sign.to_string()),
        ("clusters", cfg.clusters.to_string()),
        ("kmeans_max_iter", cfg.kmeans_max_iter.to_string()),
        ("kmeans_tol", format!("{:?}", cfg.kmeans_tol)),
        ("kmeans_restarts", cfg.kmeans_restarts.to_string()),
        ("lr", format!("{:?}", cfg.lr)),
        ("iters", cfg.total_iters.to_string()),
        ("classifier_iters", cfg.classifier_iters.to_string()),
        ("early_stop_patience", opt_text(&cfg.early_stop_patience)),
        ("hidden_dim", cfg.hidden_dim.to_string()),
        ("feature_dim", cfg.feature_dim.to_string()),
        ("disc_hidden", cfg.disc_hidden.to_string()),
        ("pseudo_fraction", opt_text(&cfg.pseudo_fraction.map(|f| format!("{f:?}")))),
        ("warm_start", cfg.warm_start.to_string()),
        ("no_pseudo", a.no_pseudo.to_string()),
        ("no_cpm_s", a.no_cpm_s.to_string()),
        ("no_cpm_a", a.no_cpm_a.to_string()),
        ("no_cpm_c", a.no_cpm_c.to_string()),
        ("seed", cfg.seed.to_string()),
        ("d_in", spec.d_in.to_string()),
        ("source_classes", spec.source_classes.to_string()),
        ("target_classes", spec.target_classes.to_string()),
        ("shared_fraction", format!("{:?}", spec.shared_fraction)),
        ("samples_per_class", spec.samples_per_class.to_string()),
        ("class_separation", format!("{:?}", spec.class_separation)),
        ("noise_sigma", format!("{:?}", spec.noise_sigma)),
        ("rotation", format!("{:?}", spec.rotation)),
        ("translation", format!("{:?}", spec.translation)),
        ("test_fraction", format!("{:?}", spec.test_fraction)),
        ("data_seed", spec.seed.to_string()),
    ];
    rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
