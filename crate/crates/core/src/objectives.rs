//! Loss terms and the similarity-based prediction head.
//!
//! Each term exists twice: a direct computation on plain slices (used for
//! reporting and as a cross-check) and a tape builder used in training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, norm, softmax, Graph, Tensor, Var};
use crate::taxonomy::Taxonomy;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;
/// The temperature is clamped to at least this after every optimizer step.
pub const TAU_FLOOR: f64 = 1e-4;
/// Floor on the norm product inside the training-time cosine.
pub const COSINE_EPS: f64 = 1e-12;

/// Distance used by the triplet hinges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletDistance {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_leaf: f64,
    pub lambda_sibling: f64,
    pub lambda_parent: f64,
    pub mu_match: f64,
    pub mu_path: f64,
    pub tau_init: f64,
    pub distance: TripletDistance,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_leaf: 0.2,
            lambda_sibling: 0.1,
            lambda_parent: 0.002,
            mu_match: 1.0,
            mu_path: 1.0,
            tau_init: 0.07,
            distance: TripletDistance::Euclidean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_leaf > self.lambda_sibling
            && self.lambda_sibling > self.lambda_parent
            && self.lambda_parent > 0.0)
        {
            return Err(Error::Config(format!(
                "margins must satisfy leaf > sibling > parent > 0, got {} / {} / {}",
                self.lambda_leaf, self.lambda_sibling, self.lambda_parent
            )));
        }
        if self.mu_match < 0.0 || self.mu_path < 0.0 {
            return Err(Error::Config("loss coefficients must be non-negative".into()));
        }
        if self.tau_init < TAU_FLOOR {
            return Err(Error::Config(format!(
                "initial temperature must be at least {TAU_FLOOR}"
            )));
        }
        Ok(())
    }
}

/// Negative prompts of the matching loss for a true leaf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchNegatives {
    pub parent: usize,
    pub sibling: usize,
    /// Other leaves. The sibling is left out when it is itself a leaf, unless
    /// that would leave the set empty (two-leaf trees).
    pub leaves: Vec<usize>,
}

pub fn match_negatives(t: &Taxonomy, leaf: usize) -> Result<MatchNegatives> {
    if !t.node(leaf)?.is_leaf() {
        return Err(Error::Structure(format!("true label {leaf} is not a leaf")));
    }
    let parent = t.parent_of(leaf)?.expect("a leaf of a valid tree has a parent");
    let sibling = t.sibling_of(leaf)?;
    let others: Vec<usize> = t.leaves().iter().copied().filter(|&l| l != leaf).collect();
    let without_sibling: Vec<usize> = others.iter().copied().filter(|&l| l != sibling).collect();
    let leaves = if without_sibling.is_empty() {
        others
    } else {
        without_sibling
    };
    Ok(MatchNegatives {
        parent,
        sibling,
        leaves,
    })
}

/// Softmax over leaves of `cos(t_j, g) / τ`.
pub fn predict_probs(g: &[f64], prompts: &Tensor, leaf_ids: &[usize], tau: f64) -> Result<Vec<f64>> {
    if norm(g) == 0.0 {
        return Err(Error::ZeroVector("global slide feature".into()));
    }
    let logits = leaf_ids
        .iter()
        .map(|&l| {
            let row = prompts.row(l);
            if norm(row) == 0.0 {
                return Err(Error::ZeroVector(format!("prompt embedding of node {l}")));
            }
            Ok(cosine_sim(row, g)? / tau)
        })
        .collect::<Result<Vec<f64>>>()?;
    softmax(&logits)
}

/// `−ln p_y` with `p_y` clamped to [`PROB_FLOOR`].
pub fn ce_loss(p: &[f64], y: usize) -> Result<f64> {
    let py = p
        .get(y)
        .ok_or_else(|| Error::BadLabel(format!("class {y} with {} probabilities", p.len())))?;
    Ok(-py.max(PROB_FLOOR).ln())
}

/// Mean squared distance from `g` to each prompt on `path`.
pub fn path_loss(g: &[f64], prompts: &Tensor, path: &[usize]) -> Result<f64> {
    if path.is_empty() {
        return Err(Error::EmptyPath);
    }
    let total: f64 = path
        .iter()
        .map(|&k| {
            prompts
                .row(k)
                .iter()
                .zip(g)
                .map(|(t, x)| (x - t) * (x - t))
                .sum::<f64>()
        })
        .sum();
    Ok(total / path.len() as f64)
}

fn distance(a: &[f64], b: &[f64], kind: TripletDistance) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    match kind {
        TripletDistance::Euclidean => sq.sqrt(),
        TripletDistance::SquaredEuclidean => sq,
    }
}

/// `max(0, D(g, t_pos) − D(g, t_neg) + margin)`.
pub fn triplet_loss(g: &[f64], t_pos: &[f64], t_neg: &[f64], margin: f64, kind: TripletDistance) -> f64 {
    (distance(g, t_pos, kind) - distance(g, t_neg, kind) + margin).max(0.0)
}

/// Parent hinge + sibling hinge + mean of the other-leaf hinges.
pub fn match_loss(g: &[f64], prompts: &Tensor, t: &Taxonomy, leaf: usize, cfg: &LossConfig) -> Result<f64> {
    let neg = match_negatives(t, leaf)?;
    let pos = prompts.row(leaf);
    let hinge = |n: usize, m: f64| triplet_loss(g, pos, prompts.row(n), m, cfg.distance);
    let leaves: f64 = neg.leaves.iter().map(|&l| hinge(l, cfg.lambda_leaf)).sum::<f64>()
        / neg.leaves.len() as f64;
    Ok(hinge(neg.parent, cfg.lambda_parent) + hinge(neg.sibling, cfg.lambda_sibling) + leaves)
}

pub fn total_loss(ce: f64, matching: f64, path: f64, cfg: &LossConfig) -> f64 {
    ce + cfg.mu_match * matching + cfg.mu_path * path
}

// Tape builders.

/// `1 × N` leaf probabilities.
pub fn predict_probs_graph(g: &mut Graph, global: Var, prompts: Var, leaf_ids: &[usize], tau: Var) -> Var {
    let cos: Vec<Var> = leaf_ids
        .iter()
        .map(|&l| {
            let row = g.row(prompts, l);
            g.cosine(row, global, COSINE_EPS)
        })
        .collect();
    let col = g.stack_rows(&cos);
    let logits = g.transpose(col);
    let logits = g.div_scalar(logits, tau);
    g.softmax_rows(logits)
}

pub fn ce_loss_graph(g: &mut Graph, probs: Var, y: usize) -> Var {
    let p = g.element(probs, 0, y);
    let l = g.log_clamped(p, PROB_FLOOR);
    g.scale(l, -1.0)
}

pub fn path_loss_graph(g: &mut Graph, global: Var, prompts: Var, path: &[usize]) -> Var {
    assert!(!path.is_empty(), "empty path");
    let mut terms = Vec::with_capacity(path.len());
    for &k in path {
        let t = g.row(prompts, k);
        let diff = g.sub(global, t);
        terms.push(g.sum_sq(diff));
    }
    let stacked = g.stack_rows(&terms);
    let total = g.sum_all(stacked);
    g.scale(total, 1.0 / path.len() as f64)
}

fn distance_graph(g: &mut Graph, a: Var, b: Var, kind: TripletDistance) -> Var {
    let diff = g.sub(a, b);
    match kind {
        TripletDistance::Euclidean => g.norm(diff),
        TripletDistance::SquaredEuclidean => g.sum_sq(diff),
    }
}

pub fn triplet_loss_graph(g: &mut Graph, global: Var, pos: Var, neg: Var, margin: f64, kind: TripletDistance) -> Var {
    let dp = distance_graph(g, global, pos, kind);
    let dn = distance_graph(g, global, neg, kind);
    let diff = g.sub(dp, dn);
    let shifted = g.add_const(diff, margin);
    g.relu(shifted)
}

pub fn match_loss_graph(
    g: &mut Graph,
    global: Var,
    prompts: Var,
    t: &Taxonomy,
    leaf: usize,
    cfg: &LossConfig,
) -> Result<Var> {
    let neg = match_negatives(t, leaf)?;
    let pos = g.row(prompts, leaf);
    let hinge = |g: &mut Graph, n: usize, m: f64| {
        let tn = g.row(prompts, n);
        triplet_loss_graph(g, global, pos, tn, m, cfg.distance)
    };
    let parent = hinge(g, neg.parent, cfg.lambda_parent);
    let sibling = hinge(g, neg.sibling, cfg.lambda_sibling);
    let leaf_terms: Vec<Var> = neg.leaves.iter().map(|&l| hinge(g, l, cfg.lambda_leaf)).collect();
    let stacked = g.stack_rows(&leaf_terms);
    let leaf_sum = g.sum_all(stacked);
    let leaf_mean = g.scale(leaf_sum, 1.0 / neg.leaves.len() as f64);
    let ps = g.add(parent, sibling);
    Ok(g.add(ps, leaf_mean))
}

/// `ce + μ_m · match + μ_p · path`; zero coefficients drop their term.
pub fn total_loss_graph(g: &mut Graph, ce: Var, matching: Var, path: Var, cfg: &LossConfig) -> Var {
    let mut total = ce;
    if cfg.mu_match != 0.0 {
        let m = g.scale(matching, cfg.mu_match);
        total = g.add(total, m);
    }
    if cfg.mu_path != 0.0 {
        let p = g.scale(path, cfg.mu_path);
        total = g.add(total, p);
    }
    total
}
