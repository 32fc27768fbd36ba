//! Text-guided bottom-up fusion of the per-node slide embeddings.
//!
//! Leaves keep their own embedding. Every internal node `γ` with children
//! `α` (left) and `β` (right) receives
//! `b_γ = s_α b_α + s_β b_β + i_γ`, where `(s_α, s_β)` is a two-way softmax of
//! per-child scores. The root's fused embedding is the global slide feature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, matmul_t, softmax, Graph, Tensor, Var};
use crate::taxonomy::Taxonomy;

/// Source of the child weighting scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionScores {
    /// `d_v = i_v · t_v`, the diagonal of `I · Tᵀ` computed once up front.
    #[default]
    Diagonal,
    /// `b_v · t_v` using each child's fused embedding.
    Fused,
}

/// Everything the aggregation computed, for inspection and tests.
#[derive(Debug, Clone)]
pub struct AggregationTrace {
    /// Contrast matrix `I · Tᵀ`.
    pub contrast: Tensor,
    /// Its diagonal.
    pub diagonal: Vec<f64>,
    /// Fused embedding per node id.
    pub fused: Vec<Vec<f64>>,
    /// `(node, s_left, s_right)` per fusion, in evaluation order.
    pub weights: Vec<(usize, f64, f64)>,
    pub global: Vec<f64>,
}

/// `softmax(d_α, d_β) · (b_α, b_β) + i_γ`.
pub fn fuse_children(
    b_alpha: &[f64],
    b_beta: &[f64],
    d_alpha: f64,
    d_beta: f64,
    i_gamma: &[f64],
) -> Vec<f64> {
    let s = softmax(&[d_alpha, d_beta]).expect("two scores");
    b_alpha
        .iter()
        .zip(b_beta)
        .zip(i_gamma)
        .map(|((a, b), i)| s[0] * a + s[1] * b + i)
        .collect()
}

/// Internal nodes in post-order (children before parents, left subtree first).
pub fn fusion_order(t: &Taxonomy) -> Vec<usize> {
    let mut order = Vec::with_capacity(t.internal_count());
    let mut stack = vec![(t.root(), false)];
    while let Some((id, expanded)) = stack.pop() {
        let node = &t.nodes()[id];
        if node.is_leaf() {
            continue;
        }
        if expanded {
            order.push(id);
        } else {
            stack.push((id, true));
            stack.push((node.children[1], false));
            stack.push((node.children[0], false));
        }
    }
    order
}

fn check_rows(t: &Taxonomy, prompts: &Tensor, slide: &Tensor) -> Result<()> {
    let n = t.node_count();
    if prompts.rows() != n || slide.rows() != n || prompts.cols() != slide.cols() {
        return Err(Error::ShapeMismatch(format!(
            "aggregation over {n} nodes got T {}x{} and I {}x{}",
            prompts.rows(),
            prompts.cols(),
            slide.rows(),
            slide.cols()
        )));
    }
    Ok(())
}

/// Plain-tensor aggregation; rows of `prompts` and `slide` follow node ids.
pub fn aggregate(
    t: &Taxonomy,
    prompts: &Tensor,
    slide: &Tensor,
    scores: FusionScores,
) -> Result<AggregationTrace> {
    check_rows(t, prompts, slide)?;
    let contrast = matmul_t(slide, prompts)?;
    let diagonal: Vec<f64> = (0..t.node_count()).map(|v| contrast.get(v, v)).collect();
    let mut fused: Vec<Option<Vec<f64>>> = vec![None; t.node_count()];
    for &leaf in t.leaves() {
        fused[leaf] = Some(slide.row(leaf).to_vec());
    }
    let mut weights = Vec::with_capacity(t.internal_count());
    for id in fusion_order(t) {
        let node = &t.nodes()[id];
        let (l, r) = (node.children[0], node.children[1]);
        let (bl, br) = match (&fused[l], &fused[r]) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Structure(format!("children of {id} not fused yet"))),
        };
        let (dl, dr) = match scores {
            FusionScores::Diagonal => (diagonal[l], diagonal[r]),
            FusionScores::Fused => (dot(bl, prompts.row(l)), dot(br, prompts.row(r))),
        };
        let s = softmax(&[dl, dr])?;
        let b = fuse_children(bl, br, dl, dr, slide.row(id));
        weights.push((id, s[0], s[1]));
        fused[id] = Some(b);
    }
    let fused: Vec<Vec<f64>> = fused
        .into_iter()
        .map(|f| f.expect("every node fused"))
        .collect();
    let global = fused[t.root()].clone();
    Ok(AggregationTrace {
        contrast,
        diagonal,
        fused,
        weights,
        global,
    })
}

/// Aggregation on the tape. Returns the `1 × d` global feature.
pub fn aggregate_graph(
    g: &mut Graph,
    t: &Taxonomy,
    prompts: Var,
    slide: Var,
    scores: FusionScores,
) -> Var {
    let n = t.node_count();
    let mut fused: Vec<Option<Var>> = vec![None; n];
    let mut slide_rows: Vec<Option<Var>> = vec![None; n];
    let mut row_of = |g: &mut Graph, v: usize| -> Var {
        *slide_rows[v].get_or_insert_with(|| g.row(slide, v))
    };
    for &leaf in t.leaves() {
        fused[leaf] = Some(row_of(g, leaf));
    }
    for id in fusion_order(t) {
        let node = &t.nodes()[id];
        let (l, r) = (node.children[0], node.children[1]);
        let (bl, br) = (fused[l].expect("post-order"), fused[r].expect("post-order"));
        let score = |g: &mut Graph, v: usize, b: Var, row_of: &mut dyn FnMut(&mut Graph, usize) -> Var| {
            let tv = g.row(prompts, v);
            let lhs = match scores {
                FusionScores::Diagonal => row_of(g, v),
                FusionScores::Fused => b,
            };
            g.dot(lhs, tv)
        };
        let dl = score(g, l, bl, &mut row_of);
        let dr = score(g, r, br, &mut row_of);
        // Two-way softmax: s_left = σ(d_l − d_r), s_right = σ(d_r − d_l).
        let diff = g.sub(dl, dr);
        let sl = g.sigmoid(diff);
        let neg = g.scale(diff, -1.0);
        let sr = g.sigmoid(neg);
        let wl = g.mul_scalar(bl, sl);
        let wr = g.mul_scalar(br, sr);
        let mix = g.add(wl, wr);
        let own = row_of(g, id);
        fused[id] = Some(g.add(mix, own));
    }
    fused[t.root()].expect("root fused")
}
