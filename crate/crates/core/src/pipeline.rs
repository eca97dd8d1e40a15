//! The four training stages, evaluation and the ablation grid.
//!
//! 1. train the extractor with prototypical cross-entropy plus the
//!    clustering promotion terms (adversarial alignment and similarity
//!    entropy, weighted by the annealing schedule)
//! 2. encode the unlabeled target pool
//! 3. cluster the encoded pool with k-means and turn clusters into
//!    pseudo classes
//! 4. train a fresh prototypical classifier on source plus pseudo classes
//!
//! Every stochastic step draws from a stream derived from `cfg.seed`, so a
//! run is reproducible from its datasets and config alone.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{assign_pseudo_labels, kmeans_best_of, write_cluster_dump, ClusterModel, KMeansConfig};
use crate::losses::{
    graph_discriminator_loss, graph_extractor_adv_loss, graph_proto_ce, graph_similarity_entropy, AnnealMode,
    AnnealSchedule, EntropySign,
};
use crate::metrics::{aggregate, davies_bouldin, EpisodeResult, ExtractorTrace, LossTraces, RunReport, Setting};
use crate::models::{init_extractor, sgd_step, write_checkpoint, DiscriminatorParams, ExtractorParams, OptimizerState};
use crate::numerics::{Graph, Matrix};
use crate::rng::{derive_indexed, derive_seed, rng_from_seed};
use crate::sampling::{
    merge_datasets, sample_episode, sample_episode_mixed, sample_unlabeled_indices, write_instances, Dataset, Domain,
    Episode, Instance,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnealKind {
    #[default]
    Cosine,
    Linear,
    Constant,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    pub no_pseudo: bool,
    pub no_cpm_s: bool,
    pub no_cpm_a: bool,
    pub no_cpm_c: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Training episode shape.
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    /// Evaluation episode shape and count.
    pub eval_way: usize,
    pub eval_shot: usize,
    pub eval_query: usize,
    pub eval_episodes: usize,

    pub tau: f64,
    pub anneal: AnnealKind,
    pub anneal_horizon: u64,
    /// Weight used by `anneal = constant` and by the `no_cpm_c` ablation.
    pub constant_lambda: f64,
    /// Use the uncorrected printed schedule (audit only).
    pub eq9_literal: bool,
    pub entropy_sign: EntropySign,

    pub clusters: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub kmeans_restarts: usize,

    pub lr: f64,
    pub total_iters: u64,
    pub classifier_iters: u64,
    /// Stop a training loop when cross-entropy has not improved by 1e-4
    /// for this many iterations.
    pub early_stop_patience: Option<u64>,

    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub disc_hidden: usize,

    /// Fixed share of pseudo classes per classifier episode; `None` samples
    /// uniformly from the merged label space.
    pub pseudo_fraction: Option<f64>,
    /// Initialize the classifier from the trained extractor.
    pub warm_start: bool,

    pub ablations: Ablations,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 1,
            query: 5,
            eval_way: 5,
            eval_shot: 1,
            eval_query: 5,
            eval_episodes: 1000,
            tau: 2.0,
            anneal: AnnealKind::Cosine,
            anneal_horizon: 6000,
            constant_lambda: 0.5,
            eq9_literal: false,
            entropy_sign: EntropySign::AsWritten,
            clusters: 10,
            kmeans_max_iter: 300,
            kmeans_tol: 1e-6,
            kmeans_restarts: 10,
            lr: 0.1,
            total_iters: 10_000,
            classifier_iters: 10_000,
            early_stop_patience: None,
            hidden_dim: 64,
            feature_dim: 32,
            disc_hidden: 32,
            pseudo_fraction: None,
            warm_start: false,
            ablations: Ablations::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("way", self.way),
            ("shot", self.shot),
            ("query", self.query),
            ("eval_way", self.eval_way),
            ("eval_shot", self.eval_shot),
            ("eval_query", self.eval_query),
            ("eval_episodes", self.eval_episodes),
            ("clusters", self.clusters),
            ("kmeans_max_iter", self.kmeans_max_iter),
            ("hidden_dim", self.hidden_dim),
            ("feature_dim", self.feature_dim),
            ("disc_hidden", self.disc_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("`{name}` must be positive")));
        }
        if self.way < 2 || self.eval_way < 2 {
            return Err(Error::invalid("episodes need at least two classes"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.kmeans_tol >= 0.0) {
            return Err(Error::invalid("kmeans_tol must be >= 0"));
        }
        if let Some(f) = self.pseudo_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("pseudo_fraction {f} outside [0, 1]")));
            }
        }
        self.schedule().map(|_| ())
    }

    /// The entropy-weight schedule after ablation flags are applied.
    pub fn schedule(&self) -> Result<AnnealSchedule> {
        let mode = if self.ablations.no_cpm_c {
            AnnealMode::Constant {
                lambda: self.constant_lambda,
            }
        } else if self.eq9_literal {
            AnnealMode::LiteralCosine
        } else {
            match self.anneal {
                AnnealKind::Cosine => AnnealMode::Cosine,
                AnnealKind::Linear => AnnealMode::Linear,
                AnnealKind::Constant => AnnealMode::Constant {
                    lambda: self.constant_lambda,
                },
            }
        };
        AnnealSchedule::new(mode, self.anneal_horizon)
    }

    pub fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.clusters,
            max_iter: self.kmeans_max_iter,
            tol: self.kmeans_tol,
            restarts: self.kmeans_restarts,
        }
    }

    pub fn extractor_arch(&self, d_in: usize) -> Vec<usize> {
        vec![d_in, self.hidden_dim, self.feature_dim]
    }
}

/// Stage 1 result.
#[derive(Clone, Debug)]
pub struct ExtractorOutcome {
    pub theta: ExtractorParams,
    pub phi: DiscriminatorParams,
    pub trace: ExtractorTrace,
}

fn finite(value: f64, term: &str, iteration: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric(format!("{term} loss is {value} at iteration {iteration}")))
    }
}

fn check_params(theta: &ExtractorParams, what: &str, iteration: u64) -> Result<()> {
    if theta.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} parameters became non-finite at iteration {iteration}")))
    }
}

fn require_dim(ds: &Dataset, d_in: usize, name: &str) -> Result<()> {
    if !ds.is_empty() && ds.dim() != d_in {
        return Err(Error::invalid(format!(
            "{name} has {} features, expected {d_in}",
            ds.dim()
        )));
    }
    Ok(())
}

/// Tracks "no improvement by 1e-4 for `patience` iterations".
struct Plateau {
    patience: Option<u64>,
    best: f64,
    since: u64,
}

impl Plateau {
    fn new(patience: Option<u64>) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            since: 0,
        }
    }

    fn observe(&mut self, loss: f64) -> bool {
        let Some(patience) = self.patience else {
            return false;
        };
        if loss < self.best - 1e-4 {
            self.best = loss;
            self.since = 0;
        } else {
            self.since += 1;
        }
        self.since >= patience
    }
}

/// One prototypical cross-entropy SGD step on `episode`. Returns the loss
/// before the update.
pub fn proto_step(theta: &mut ExtractorParams, ds: &Dataset, episode: &Episode, opt: OptimizerState) -> Result<f64> {
    let (query_idx, labels) = episode.query_flat();
    let mut g = Graph::new();
    let bound = theta.bind(&mut g);
    let s = g.leaf(ds.features_of(&episode.support_flat()));
    let q = g.leaf(ds.features_of(&query_idx));
    let fs = bound.forward(&mut g, s)?;
    let fq = bound.forward(&mut g, q)?;
    let ce = graph_proto_ce(&mut g, fs, episode.way(), episode.shot(), fq, labels)?;
    let loss = g.value(ce).item();
    let grads = g.backward(ce)?;
    let step = theta.grads_from(&bound, &grads);
    sgd_step(theta, &step, opt)?;
    Ok(loss)
}

/// Stage 1: episodic training of the extractor.
///
/// Per iteration `t`: sample an episode (S, Q) from the source and an
/// unlabeled batch U of `way · shot` target instances; update θ on the
/// prototypical loss; update φ on the discriminator loss over E(S), E(U);
/// update θ on `(1 − λ_t)·L_enc + λ_t·L_entropy`. Ablated terms are left out
/// of the last step and the discriminator is not trained without CPM-A.
pub fn train_extractor(source: &Dataset, target: &Dataset, cfg: &TrainConfig) -> Result<ExtractorOutcome> {
    cfg.validate()?;
    let d_in = source.dim();
    require_dim(target, d_in, "target pool")?;
    let opt = OptimizerState::sgd(cfg.lr)?;
    let schedule = cfg.schedule()?;
    let mut theta = init_extractor(&cfg.extractor_arch(d_in), derive_seed(cfg.seed, "extractor-init"))?;
    let mut phi = DiscriminatorParams::init(cfg.feature_dim, cfg.disc_hidden, derive_seed(cfg.seed, "discriminator-init"))?;
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "extractor-train"));
    let mut trace = ExtractorTrace::default();
    let use_adv = !cfg.ablations.no_cpm_a;
    let use_ent = !cfg.ablations.no_cpm_s;
    let batch = cfg.way * cfg.shot;
    let mut plateau = Plateau::new(cfg.early_stop_patience);

    for t in 0..cfg.total_iters {
        let episode = sample_episode(source, cfg.way, cfg.shot, cfg.query, &mut rng)?;
        let unlabeled = if use_adv || use_ent {
            sample_unlabeled_indices(target, batch, &mut rng)?
        } else {
            Vec::new()
        };
        let lambda = schedule.lambda_at(t);
        trace.lambda.push(lambda);

        let ce = finite(proto_step(&mut theta, source, &episode, opt)?, "cross-entropy", t)?;
        trace.ce.push(ce);
        check_params(&theta, "extractor", t)?;

        let support_x = source.features_of(&episode.support_flat());
        let target_x = target.features_of(&unlabeled);

        if use_adv {
            let fs = theta.forward_batch(&support_x)?;
            let ft = theta.forward_batch(&target_x)?;
            let mut g = Graph::new();
            let bound = phi.bind(&mut g);
            let fs = g.leaf(fs);
            let ft = g.leaf(ft);
            let ps = DiscriminatorParams::forward_graph(&bound, &mut g, fs)?;
            let pt = DiscriminatorParams::forward_graph(&bound, &mut g, ft)?;
            let dis = graph_discriminator_loss(&mut g, ps, pt);
            trace.dis.push(finite(g.value(dis).item(), "discriminator", t)?);
            let grads = g.backward(dis)?;
            let step = phi.net.grads_from(&bound, &grads);
            sgd_step(&mut phi.net, &step, opt)?;
            check_params(&phi.net, "discriminator", t)?;
        }

        if use_adv || use_ent {
            let mut g = Graph::new();
            let bt = theta.bind(&mut g);
            let tx = g.leaf(target_x);
            let ft = bt.forward(&mut g, tx)?;
            let mut terms = Vec::new();
            if use_adv {
                let bp = phi.bind(&mut g);
                let sx = g.leaf(support_x);
                let fs = bt.forward(&mut g, sx)?;
                let ps = DiscriminatorParams::forward_graph(&bp, &mut g, fs)?;
                let pt = DiscriminatorParams::forward_graph(&bp, &mut g, ft)?;
                let enc = graph_extractor_adv_loss(&mut g, ps, pt);
                trace.enc.push(finite(g.value(enc).item(), "adversarial", t)?);
                terms.push(g.scale(enc, 1.0 - lambda));
            }
            if use_ent {
                let ent = graph_similarity_entropy(&mut g, ft, cfg.tau, cfg.entropy_sign)?;
                trace.entropy.push(finite(g.value(ent).item(), "entropy", t)?);
                terms.push(g.scale(ent, lambda));
            }
            let mut total = terms[0];
            for &term in &terms[1..] {
                total = g.add(total, term)?;
            }
            let grads = g.backward(total)?;
            let step = theta.grads_from(&bt, &grads);
            sgd_step(&mut theta, &step, opt)?;
            check_params(&theta, "extractor", t)?;
        }

        if plateau.observe(ce) {
            break;
        }
    }
    Ok(ExtractorOutcome { theta, phi, trace })
}

/// Stage 2: encodes every instance of `pool`.
pub fn extract_features(theta: &ExtractorParams, pool: &Dataset) -> Result<Vec<(String, Vec<f64>)>> {
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    let encoded = theta.forward_batch(&pool.feature_matrix())?;
    Ok(pool
        .instances()
        .iter()
        .zip(encoded.iter_rows())
        .map(|(inst, f)| (inst.id.clone(), f.to_vec()))
        .collect())
}

/// Feature dump as a target dataset (one encoded instance per record).
pub fn write_feature_dump(path: &Path, features: &[(String, Vec<f64>)]) -> Result<()> {
    let records: Vec<Instance> = features
        .iter()
        .map(|(id, f)| Instance {
            id: id.clone(),
            domain: Domain::Target,
            label: None,
            features: f.clone(),
        })
        .collect();
    write_instances(path, &records)
}

pub fn features_from_dataset(ds: &Dataset) -> Vec<(String, Vec<f64>)> {
    ds.instances()
        .iter()
        .map(|i| (i.id.clone(), i.features.clone()))
        .collect()
}

/// Stage 3: k-means over the encoded pool, then pseudo labels on the
/// original (unencoded) target instances.
pub fn mine_pseudo_labels(
    features: &[(String, Vec<f64>)],
    pool: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ClusterModel, Dataset)> {
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "kmeans"));
    let model = kmeans_best_of(features, &cfg.kmeans(), &mut rng)?;
    let pseudo = assign_pseudo_labels(&model, pool)?;
    Ok((model, pseudo))
}

/// Drops pseudo classes too small to fill one training episode class.
pub fn prune_small_classes(pseudo: &Dataset, min_size: usize) -> Result<Dataset> {
    let keep: Vec<Instance> = pseudo
        .instances()
        .iter()
        .filter(|i| {
            i.label
                .as_deref()
                .and_then(|l| pseudo.class_members(l))
                .is_some_and(|m| m.len() >= min_size)
        })
        .cloned()
        .collect();
    Dataset::new(keep)
}

/// Stage 4 result.
#[derive(Clone, Debug)]
pub struct ClassifierOutcome {
    pub params: ExtractorParams,
    pub trace: Vec<f64>,
}

/// Stage 4: prototypical training of a classifier encoder on `merged`.
/// Fresh initialization unless `init` is given.
pub fn train_classifier(merged: &Dataset, cfg: &TrainConfig, init: Option<&ExtractorParams>) -> Result<ClassifierOutcome> {
    cfg.validate()?;
    let opt = OptimizerState::sgd(cfg.lr)?;
    let mut params = match init {
        Some(p) => {
            if p.input_dim() != merged.dim() {
                return Err(Error::invalid("warm-start parameters do not match the data dimension"));
            }
            p.clone()
        }
        None => init_extractor(&cfg.extractor_arch(merged.dim()), derive_seed(cfg.seed, "classifier-init"))?,
    };
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "classifier-train"));
    let mut trace = Vec::with_capacity(cfg.classifier_iters as usize);
    let mut plateau = Plateau::new(cfg.early_stop_patience);
    for t in 0..cfg.classifier_iters {
        let episode = match cfg.pseudo_fraction {
            Some(f) => sample_episode_mixed(merged, cfg.way, cfg.shot, cfg.query, f, &mut rng)?,
            None => sample_episode(merged, cfg.way, cfg.shot, cfg.query, &mut rng)?,
        };
        let ce = finite(proto_step(&mut params, merged, &episode, opt)?, "classifier cross-entropy", t)?;
        trace.push(ce);
        check_params(&params, "classifier", t)?;
        if plateau.observe(ce) {
            break;
        }
    }
    Ok(ClassifierOutcome { params, trace })
}

/// Nearest-prototype predictions for one episode; ties go to the lowest
/// class position.
pub fn classify_episode(classifier: &ExtractorParams, ds: &Dataset, episode: &Episode) -> Result<EpisodeResult> {
    let support = classifier.forward_batch(&ds.features_of(&episode.support_flat()))?;
    let (query_idx, labels) = episode.query_flat();
    let query = classifier.forward_batch(&ds.features_of(&query_idx))?;
    let shot = episode.shot();
    let way = episode.way();
    let dim = support.cols();
    let mut protos = Matrix::zeros(way, dim);
    for c in 0..way {
        for j in 0..shot {
            for (p, x) in protos.row_mut(c).iter_mut().zip(support.row(c * shot + j)) {
                *p += x / shot as f64;
            }
        }
    }
    let mut per_class = vec![(0usize, 0usize); way];
    for (row, &gold) in query.iter_rows().zip(&labels) {
        let mut best = (0usize, f64::INFINITY);
        for c in 0..way {
            let d: f64 = row.iter().zip(protos.row(c)).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (c, d);
            }
        }
        per_class[gold].1 += 1;
        if best.0 == gold {
            per_class[gold].0 += 1;
        }
    }
    Ok(EpisodeResult {
        correct: per_class.iter().map(|p| p.0).sum(),
        total: labels.len(),
        per_class,
    })
}

/// Per-episode results over `episodes` test episodes. Episode `i` draws
/// from its own seed, so the result does not depend on thread scheduling.
pub fn evaluate_episodes(
    classifier: &ExtractorParams,
    test: &Dataset,
    setting: Setting,
    seed: u64,
) -> Result<Vec<EpisodeResult>> {
    let base = derive_seed(seed, "evaluate");
    (0..setting.episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(derive_indexed(base, i as u64));
            let ep = sample_episode(test, setting.way, setting.shot, setting.query, &mut rng)?;
            classify_episode(classifier, test, &ep)
        })
        .collect()
}

/// Few-shot evaluation on a labeled test set.
pub fn evaluate(classifier: &ExtractorParams, test: &Dataset, cfg: &TrainConfig) -> Result<RunReport> {
    let setting = Setting {
        way: cfg.eval_way,
        shot: cfg.eval_shot,
        query: cfg.eval_query,
        episodes: cfg.eval_episodes,
    };
    let episodes = evaluate_episodes(classifier, test, setting, cfg.seed)?;
    let (accuracy_mean, accuracy_std) = aggregate(&episodes)?;
    Ok(RunReport {
        setting,
        accuracy_mean,
        accuracy_std,
        dbi: None,
        fmi: None,
        seed: cfg.seed,
        config: cfg.clone(),
        stage_log: vec!["evaluate".into()],
        traces: LossTraces::default(),
        episodes,
    })
}

/// Everything a full run produces.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub extractor: Option<ExtractorOutcome>,
    pub features: Option<Vec<(String, Vec<f64>)>>,
    pub clusters: Option<ClusterModel>,
    pub pseudo: Option<Dataset>,
    pub classifier: ClassifierOutcome,
}

/// Stages 1 → 4 and evaluation, honoring ablation flags. With `no_pseudo`
/// the extractor is only trained when the classifier warm-starts from it.
pub fn run_all(source: &Dataset, pool: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    require_dim(pool, source.dim(), "target pool")?;
    require_dim(test, source.dim(), "target test set")?;
    let mut log = Vec::new();
    let need_extractor = !cfg.ablations.no_pseudo || cfg.warm_start;

    let extractor = if need_extractor {
        log.push("stage1:train-extractor".to_string());
        Some(train_extractor(source, pool, cfg).map_err(|e| e.in_stage("train-extractor"))?)
    } else {
        log.push("stage1:skipped".to_string());
        None
    };

    let (features, clusters, pseudo, dbi) = if cfg.ablations.no_pseudo {
        log.push("stage2:skipped".to_string());
        log.push("stage3:skipped".to_string());
        (None, None, None, None)
    } else {
        let theta = &extractor.as_ref().expect("trained above").theta;
        log.push("stage2:extract-features".to_string());
        let features = extract_features(theta, pool).map_err(|e| e.in_stage("extract-features"))?;
        log.push("stage3:mine-pseudo-labels".to_string());
        let (model, pseudo) = mine_pseudo_labels(&features, pool, cfg).map_err(|e| e.in_stage("mine-pseudo-labels"))?;
        let feats: Vec<Vec<f64>> = features.iter().map(|(_, f)| f.clone()).collect();
        let dbi = davies_bouldin(&feats, &model.assignments).ok();
        (Some(features), Some(model), Some(pseudo), dbi)
    };

    log.push("stage4:train-classifier".to_string());
    let merged = match &pseudo {
        Some(p) => {
            let kept = prune_small_classes(p, cfg.shot + cfg.query).map_err(|e| e.in_stage("train-classifier"))?;
            merge_datasets(source, &kept).map_err(|e| e.in_stage("train-classifier"))?
        }
        None => source.clone(),
    };
    let init = if cfg.warm_start {
        extractor.as_ref().map(|e| &e.theta)
    } else {
        None
    };
    let classifier = train_classifier(&merged, cfg, init).map_err(|e| e.in_stage("train-classifier"))?;

    log.push("evaluate".to_string());
    let mut report = evaluate(&classifier.params, test, cfg).map_err(|e| e.in_stage("evaluate"))?;
    report.dbi = dbi;
    report.stage_log = log;
    report.traces = LossTraces {
        extractor: extractor.as_ref().map(|e| e.trace.clone()).unwrap_or_default(),
        classifier_ce: classifier.trace.clone(),
    };
    Ok(RunOutcome {
        report,
        extractor,
        features,
        clusters,
        pseudo,
        classifier,
    })
}

impl RunOutcome {
    /// Writes stage artifacts and the report into `dir`:
    /// `extractor.ckpt`, `features.jsonl`, `clusters.txt`, `pseudo.jsonl`,
    /// `classifier.ckpt`, `report.json`, `episodes.csv`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let Some(e) = &self.extractor {
            write_checkpoint(&dir.join("extractor.ckpt"), &[("extractor", &e.theta), ("discriminator", &e.phi.net)])?;
        }
        if let Some(f) = &self.features {
            write_feature_dump(&dir.join("features.jsonl"), f)?;
        }
        if let Some(c) = &self.clusters {
            write_cluster_dump(&dir.join("clusters.txt"), c)?;
        }
        if let Some(p) = &self.pseudo {
            write_instances(&dir.join("pseudo.jsonl"), p.instances())?;
        }
        write_checkpoint(&dir.join("classifier.ckpt"), &[("classifier", &self.classifier.params)])?;
        self.report.write(dir)
    }
}

/// The ablation grid: full, −pseudo, −CPM-S, −CPM-A, −CPM-C (constant
/// weight) and linear annealing.
pub fn ablation_grid(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let mut base = base.clone();
    base.ablations = Ablations::default();
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        ("full", base.clone()),
        ("no_pseudo", with(&|c| c.ablations.no_pseudo = true)),
        ("no_cpm_s", with(&|c| c.ablations.no_cpm_s = true)),
        ("no_cpm_a", with(&|c| c.ablations.no_cpm_a = true)),
        ("no_cpm_c", with(&|c| c.ablations.no_cpm_c = true)),
        ("linear_anneal", with(&|c| c.anneal = AnnealKind::Linear)),
    ]
}

/// Runs every variant of [`ablation_grid`] in parallel; results keep grid order.
pub fn run_ablation(
    source: &Dataset,
    pool: &Dataset,
    test: &Dataset,
    base: &TrainConfig,
) -> Result<Vec<(&'static str, RunOutcome)>> {
    ablation_grid(base)
        .into_par_iter()
        .map(|(name, cfg)| run_all(source, pool, test, &cfg).map(|o| (name, o)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SyntheticSpec};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            total_iters: 200,
            classifier_iters: 200,
            anneal_horizon: 120,
            eval_episodes: 50,
            clusters: 6,
            kmeans_restarts: 3,
            hidden_dim: 16,
            feature_dim: 8,
            disc_hidden: 8,
            ..TrainConfig::default()
        }
    }

    fn data() -> crate::synthetic::SyntheticData {
        generate(&SyntheticSpec {
            samples_per_class: 30,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn plain_protonet_ablation_lowers_ce() {
        let d = data();
        let mut cfg = small_cfg();
        cfg.ablations.no_cpm_a = true;
        cfg.ablations.no_cpm_s = true;
        let out = train_extractor(&d.source, &d.target_unlabeled, &cfg).unwrap();
        assert!(out.trace.dis.is_empty() && out.trace.entropy.is_empty());
        let head: f64 = out.trace.ce[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = out.trace.ce[150..].iter().sum::<f64>() / 50.0;
        assert!(tail < head, "ce {head} -> {tail}");
    }

    #[test]
    fn lambda_trace_follows_schedule() {
        let d = data();
        let cfg = small_cfg();
        let out = train_extractor(&d.source, &d.target_unlabeled, &cfg).unwrap();
        let sched = cfg.schedule().unwrap();
        assert_eq!(out.trace.lambda.len(), 200);
        for (t, l) in out.trace.lambda.iter().enumerate() {
            assert_eq!(*l, sched.lambda_at(t as u64));
        }
    }

    #[test]
    fn extraction_is_deterministic_and_per_instance() {
        let d = data();
        let theta = init_extractor(&[d.source.dim(), 16, 8], 3).unwrap();
        let a = extract_features(&theta, &d.target_unlabeled).unwrap();
        let b = extract_features(&theta, &d.target_unlabeled).unwrap();
        assert_eq!(a.len(), d.target_unlabeled.len());
        assert_eq!(a, b);
        for ((id, f), inst) in a.iter().zip(d.target_unlabeled.instances()) {
            assert_eq!(id, &inst.id);
            let single = crate::models::encode(&theta, &inst.features).unwrap();
            for (x, y) in f.iter().zip(&single) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_cluster_gives_one_pseudo_class() {
        let d = data();
        let mut cfg = small_cfg();
        cfg.clusters = 1;
        let feats = features_from_dataset(&d.target_unlabeled);
        let (_, pseudo) = mine_pseudo_labels(&feats, &d.target_unlabeled, &cfg).unwrap();
        assert_eq!(pseudo.num_classes(), 1);
        cfg.clusters = 10;
        let (_, pseudo) = mine_pseudo_labels(&feats, &d.target_unlabeled, &cfg).unwrap();
        assert!(pseudo.num_classes() <= 10);
    }

    #[test]
    fn classifier_is_freshly_initialized() {
        let d = data();
        let cfg = small_cfg();
        let ext = train_extractor(&d.source, &d.target_unlabeled, &cfg).unwrap();
        let clf = train_classifier(&d.source, &cfg, None).unwrap();
        let dist: f64 = ext
            .theta
            .flatten()
            .iter()
            .zip(clf.params.flatten())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        assert!(dist > 0.0);
        let head: f64 = clf.trace[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = clf.trace[150..].iter().sum::<f64>() / 50.0;
        assert!(tail < head);
    }

    #[test]
    fn collapsed_features_score_at_most_chance_share() {
        let d = data();
        let theta = init_extractor(&[d.source.dim(), 4, 2], 0).unwrap();
        let zero = theta.with_flat(&vec![0.0; theta.param_count()]).unwrap();
        let cfg = small_cfg();
        let report = evaluate(&zero, &d.target_test, &cfg).unwrap();
        assert!(report.accuracy_mean <= 100.0 * 2.0 / cfg.eval_way as f64);
        // every query lands on the first prototype
        assert!((report.accuracy_mean - 100.0 / cfg.eval_way as f64).abs() < 1e-9);
    }

    #[test]
    fn duplicated_support_query_is_always_right() {
        let d = data();
        let theta = init_extractor(&[d.source.dim(), 8, 4], 1).unwrap();
        let ds = &d.target_test;
        let mut rng = rng_from_seed(2);
        for _ in 0..20 {
            let mut ep = sample_episode(ds, 5, 1, 1, &mut rng).unwrap();
            ep.query[0] = ep.support[0].clone();
            let r = classify_episode(&theta, ds, &ep).unwrap();
            assert_eq!(r.per_class[0], (1, 1));
        }
    }

    #[test]
    fn evaluation_is_reproducible() {
        let d = data();
        let theta = init_extractor(&[d.source.dim(), 8, 4], 1).unwrap();
        let cfg = small_cfg();
        let a = evaluate(&theta, &d.target_test, &cfg).unwrap();
        let b = evaluate(&theta, &d.target_test, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.episodes_csv(), b.episodes_csv());
    }

    #[test]
    fn no_pseudo_skips_middle_stages() {
        let d = data();
        let mut cfg = small_cfg();
        cfg.ablations.no_pseudo = true;
        let out = run_all(&d.source, &d.target_unlabeled, &d.target_test, &cfg).unwrap();
        assert!(out.extractor.is_none() && out.clusters.is_none());
        assert_eq!(
            out.report.stage_log,
            vec!["stage1:skipped", "stage2:skipped", "stage3:skipped", "stage4:train-classifier", "evaluate"]
        );
    }

    #[test]
    fn full_run_writes_all_artifacts() {
        let d = data();
        let cfg = small_cfg();
        let out = run_all(&d.source, &d.target_unlabeled, &d.target_test, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.write_artifacts(dir.path()).unwrap();
        for f in ["extractor.ckpt", "features.jsonl", "clusters.txt", "pseudo.jsonl", "classifier.ckpt", "report.json", "episodes.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert_eq!(
            out.report.stage_log,
            vec![
                "stage1:train-extractor",
                "stage2:extract-features",
                "stage3:mine-pseudo-labels",
                "stage4:train-classifier",
                "evaluate"
            ]
        );
        assert!(out.report.dbi.is_some());
    }

    #[test]
    fn stage_failure_names_the_stage() {
        let d = data();
        let mut cfg = small_cfg();
        cfg.clusters = 10_000;
        let err = run_all(&d.source, &d.target_unlabeled, &d.target_test, &cfg).unwrap_err();
        assert!(err.to_string().contains("mine-pseudo-labels"), "{err}");
    }

    #[test]
    fn divergence_is_reported_as_numeric() {
        let d = data();
        let mut cfg = small_cfg();
        cfg.lr = 1e6;
        cfg.ablations.no_cpm_a = true;
        cfg.ablations.no_cpm_s = true;
        let err = train_extractor(&d.source, &d.target_unlabeled, &cfg).unwrap_err();
        assert!(err.is_numeric(), "{err}");
    }

    #[test]
    fn grid_has_six_variants() {
        let names: Vec<&str> = ablation_grid(&TrainConfig::default()).iter().map(|(n, _)| *n).collect();
        assert_eq!(names, ["full", "no_pseudo", "no_cpm_s", "no_cpm_a", "no_cpm_c", "linear_anneal"]);
    }
}
