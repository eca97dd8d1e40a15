//! Training objectives.
//!
//! Each loss exists twice: a plain function over `f64` slices, used for
//! evaluation and as a readable reference, and a `graph_*` builder that
//! records the same computation on a [`Graph`] so it can be differentiated.
//! Expectations are arithmetic means over the batch.

use serde::{Deserialize, Serialize};

use crate::models::PROB_EPS;
use crate::numerics::{euclidean_sq, logsumexp, shannon_entropy, softmax, Graph, Matrix, Var};
use crate::{Error, Result};

/// Sign applied to squared distances before the entropy softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropySign {
    /// `softmax(v / τ)` over raw distances.
    #[default]
    AsWritten,
    /// `softmax(−v / τ)`, mass on the nearest neighbours.
    Negated,
}

impl EntropySign {
    fn factor(self) -> f64 {
        match self {
            EntropySign::AsWritten => 1.0,
            EntropySign::Negated => -1.0,
        }
    }
}

/// Class prototypes: the mean of each class's support features.
pub fn prototypes<L: Clone>(support: &[(L, Vec<Vec<f64>>)]) -> Result<Vec<(L, Vec<f64>)>> {
    support
        .iter()
        .map(|(label, feats)| {
            let first = feats
                .first()
                .ok_or_else(|| Error::invalid("class with no support features"))?;
            let dim = first.len();
            let mut mean = vec![0.0; dim];
            for f in feats {
                if f.len() != dim {
                    return Err(Error::invalid("support features differ in dimension"));
                }
                mean.iter_mut().zip(f).for_each(|(m, x)| *m += x);
            }
            let k = feats.len() as f64;
            mean.iter_mut().for_each(|m| *m /= k);
            Ok((label.clone(), mean))
        })
        .collect()
}

/// `log P(y = i | q) = −d(q, c_i) − logsumexp_j(−d(q, c_j))`.
pub fn proto_log_probs(q: &[f64], protos: &[Vec<f64>]) -> Result<Vec<f64>> {
    if protos.len() < 2 {
        return Err(Error::invalid(format!("need >= 2 prototypes, got {}", protos.len())));
    }
    let neg: Vec<f64> = protos
        .iter()
        .map(|c| euclidean_sq(q, c).map(|d| -d))
        .collect::<Result<_>>()?;
    let lse = logsumexp(&neg);
    Ok(neg.into_iter().map(|x| x - lse).collect())
}

/// Mean negative log-likelihood of the queries under the support prototypes.
pub fn proto_ce_loss<L: Clone + PartialEq + std::fmt::Debug>(
    support: &[(L, Vec<Vec<f64>>)],
    queries: &[(L, Vec<f64>)],
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::invalid("no query instances"));
    }
    let protos = prototypes(support)?;
    let centers: Vec<Vec<f64>> = protos.iter().map(|(_, c)| c.clone()).collect();
    let mut total = 0.0;
    for (label, q) in queries {
        let idx = protos
            .iter()
            .position(|(l, _)| l == label)
            .ok_or_else(|| Error::invalid(format!("query label {label:?} is not in the support set")))?;
        total -= proto_log_probs(q, &centers)?[idx];
    }
    Ok(total / queries.len() as f64)
}

/// Mean over the batch of `H(softmax(sign · v(x_i) / τ))`, where `v(x_i)`
/// holds the squared distances from `x_i` to every other batch member.
pub fn similarity_entropy_loss(batch: &[Vec<f64>], tau: f64, sign: EntropySign) -> Result<f64> {
    check_entropy_args(batch.len(), tau)?;
    let mut total = 0.0;
    for (i, xi) in batch.iter().enumerate() {
        let v: Vec<f64> = batch
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, xj)| euclidean_sq(xi, xj).map(|d| sign.factor() * d))
            .collect::<Result<_>>()?;
        total += shannon_entropy(&softmax(&v, tau)?)?;
    }
    Ok(total / batch.len() as f64)
}

fn check_entropy_args(m: usize, tau: f64) -> Result<()> {
    if m < 2 {
        return Err(Error::invalid(format!("entropy batch needs >= 2 members, got {m}")));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

fn checked_probs(p: &[f64], which: &str) -> Result<Vec<f64>> {
    if p.is_empty() {
        return Err(Error::invalid(format!("{which} probabilities are empty")));
    }
    p.iter()
        .map(|&x| {
            if (0.0..=1.0).contains(&x) {
                Ok(x.clamp(PROB_EPS, 1.0 - PROB_EPS))
            } else {
                Err(Error::Numeric(format!("{which} probability {x} outside (0, 1)")))
            }
        })
        .collect()
}

fn mean(it: impl Iterator<Item = f64>, n: usize) -> f64 {
    it.sum::<f64>() / n as f64
}

/// `−mean(log D(src)) − mean(log(1 − D(tgt)))`.
pub fn discriminator_loss(src_probs: &[f64], tgt_probs: &[f64]) -> Result<f64> {
    let s = checked_probs(src_probs, "source")?;
    let t = checked_probs(tgt_probs, "target")?;
    Ok(-mean(s.iter().map(|p| p.ln()), s.len()) - mean(t.iter().map(|p| (1.0 - p).ln()), t.len()))
}

/// `−mean(log(1 − D(src))) − mean(log D(tgt))`: the discriminator objective
/// with domain labels flipped.
pub fn extractor_adv_loss(src_probs: &[f64], tgt_probs: &[f64]) -> Result<f64> {
    let s = checked_probs(src_probs, "source")?;
    let t = checked_probs(tgt_probs, "target")?;
    Ok(-mean(s.iter().map(|p| (1.0 - p).ln()), s.len()) - mean(t.iter().map(|p| p.ln()), t.len()))
}

/// `ce + (1 − λ)·adv + λ·ent`.
pub fn combined_extractor_objective(ce: f64, adv: f64, ent: f64, lambda: f64) -> f64 {
    ce + (1.0 - lambda) * adv + lambda * ent
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AnnealMode {
    /// `λ = (1 − cos(πt/T)) / 2` up to `T`, then 1.
    Cosine,
    /// `λ = min(t/T, 1)`.
    Linear,
    /// Fixed weight.
    Constant { lambda: f64 },
    /// `λ = −(cos(πt/T) + 1) / 2` up to `T`, then 1, exactly as printed in
    /// the original formulation. Audit only: starts at −1 and jumps at `T`.
    LiteralCosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub mode: AnnealMode,
    pub horizon: u64,
}

impl AnnealSchedule {
    pub fn new(mode: AnnealMode, horizon: u64) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("annealing horizon must be >= 1"));
        }
        if let AnnealMode::Constant { lambda } = mode {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::invalid(format!("constant weight {lambda} outside [0, 1]")));
            }
        }
        Ok(Self { mode, horizon })
    }

    /// Entropy weight at iteration `t`.
    pub fn lambda_at(&self, t: u64) -> f64 {
        let horizon = self.horizon as f64;
        match self.mode {
            AnnealMode::Cosine if t <= self.horizon => {
                (1.0 - (std::f64::consts::PI * t as f64 / horizon).cos()) / 2.0
            }
            AnnealMode::LiteralCosine if t <= self.horizon => {
                -((std::f64::consts::PI * t as f64 / horizon).cos() + 1.0) / 2.0
            }
            AnnealMode::Cosine | AnnealMode::LiteralCosine => 1.0,
            AnnealMode::Linear => (t as f64 / horizon).min(1.0),
            AnnealMode::Constant { lambda } => lambda,
        }
    }
}

/// Free-function form of [`AnnealSchedule::lambda_at`].
pub fn lambda_at(sched: &AnnealSchedule, t: u64) -> f64 {
    sched.lambda_at(t)
}

/// Averaging matrix `N x (N·K)` that maps class-major support rows to
/// their prototypes.
pub fn prototype_averager(n_way: usize, k_shot: usize) -> Matrix {
    let mut m = Matrix::zeros(n_way, n_way * k_shot);
    for c in 0..n_way {
        for j in 0..k_shot {
            m[(c, c * k_shot + j)] = 1.0 / k_shot as f64;
        }
    }
    m
}

/// Prototypical cross-entropy on the tape. `support` holds `n_way · k_shot`
/// feature rows, class-major; `labels[i]` is the class index of query row `i`.
pub fn graph_proto_ce(
    g: &mut Graph,
    support: Var,
    n_way: usize,
    k_shot: usize,
    query: Var,
    labels: Vec<usize>,
) -> Result<Var> {
    if g.value(support).rows() != n_way * k_shot {
        return Err(Error::invalid(format!(
            "support has {} rows, expected {}",
            g.value(support).rows(),
            n_way * k_shot
        )));
    }
    let avg = g.leaf(prototype_averager(n_way, k_shot));
    let protos = g.matmul(avg, support)?;
    let d = g.pairwise_sq_dist(query, protos)?;
    let logits = g.scale(d, -1.0);
    let logp = g.log_softmax_rows(logits);
    let picked = g.gather(logp, labels)?;
    let m = g.mean_all(picked);
    Ok(g.scale(m, -1.0))
}

/// Similarity entropy loss on the tape over the rows of `batch`.
pub fn graph_similarity_entropy(g: &mut Graph, batch: Var, tau: f64, sign: EntropySign) -> Result<Var> {
    check_entropy_args(g.value(batch).rows(), tau)?;
    let d = g.pairwise_sq_dist(batch, batch)?;
    let v = g.drop_diagonal(d)?;
    let scaled = g.scale(v, sign.factor() / tau);
    let logp = g.log_softmax_rows(scaled);
    let p = g.exp(logp);
    let plogp = g.mul(p, logp)?;
    let h = g.sum_rows(plogp);
    let m = g.mean_all(h);
    Ok(g.scale(m, -1.0))
}

/// Discriminator loss on the tape from clamped probabilities (`n x 1`).
pub fn graph_discriminator_loss(g: &mut Graph, src_probs: Var, tgt_probs: Var) -> Var {
    let ls = g.ln(src_probs);
    let ls = g.mean_all(ls);
    let one_minus = g.scale(tgt_probs, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let lt = g.ln(one_minus);
    let lt = g.mean_all(lt);
    let total = g.add(ls, lt).expect("scalars");
    g.scale(total, -1.0)
}

/// Extractor adversarial loss on the tape: domain labels flipped.
pub fn graph_extractor_adv_loss(g: &mut Graph, src_probs: Var, tgt_probs: Var) -> Var {
    graph_discriminator_loss(g, tgt_probs, src_probs)
}
