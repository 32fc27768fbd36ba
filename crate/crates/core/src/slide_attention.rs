//! Slide-level embeddings from a bag of patch embeddings.
//!
//! Two interchangeable producers of the `(2N − 1) × d` node-embedding matrix:
//! multi-row gated attention pooling, and one Nyström self-attention head per
//! tree node followed by average pooling and an output projection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, Bound, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatedAttentionParams {
    /// `(d/2) × d`.
    pub u1: ParamId,
    /// `(d/2) × d`.
    pub u2: ParamId,
    /// `rows × (d/2)`; one attention row per output embedding.
    pub w: ParamId,
}

impl GatedAttentionParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        rows: usize,
        seed: u64,
    ) -> Result<Self> {
        if d == 0 || d % 2 != 0 {
            return Err(Error::Config(format!(
                "gated attention needs an even embedding width, got {d}"
            )));
        }
        let h = d / 2;
        let s = 1.0 / (d as f64).sqrt();
        let sw = 1.0 / (h as f64).sqrt();
        Ok(GatedAttentionParams {
            u1: store.add_uniform(format!("{prefix}.u1"), h, d, s, seed),
            u2: store.add_uniform(format!("{prefix}.u2"), h, d, s, seed),
            w: store.add_uniform(format!("{prefix}.w"), rows, h, sw, seed),
        })
    }
}

/// Scores `A` (`rows × M`, each row a softmax over patches) and pooled
/// embeddings `I = A · X_p`.
pub fn gated_attention_graph(
    g: &mut Graph,
    bound: &Bound,
    params: &GatedAttentionParams,
    x_p: Var,
) -> (Var, Var) {
    let a = g.matmul_t(bound[params.u1], x_p);
    let a = g.tanh(a);
    let b = g.matmul_t(bound[params.u2], x_p);
    let b = g.sigmoid(b);
    let gate = g.mul(a, b);
    let raw = g.matmul(bound[params.w], gate);
    let scores = g.softmax_rows(raw);
    let pooled = g.matmul(scores, x_p);
    (scores, pooled)
}

fn check_bag(x_p: &Tensor, d: usize) -> Result<()> {
    if x_p.rows() == 0 {
        return Err(Error::EmptyBag("bag has no patches".into()));
    }
    if x_p.cols() != d {
        return Err(Error::ShapeMismatch(format!(
            "patch width {} but model width {d}",
            x_p.cols()
        )));
    }
    Ok(())
}

pub fn gated_attention(
    x_p: &Tensor,
    params: &GatedAttentionParams,
    store: &ParamStore,
) -> Result<(Tensor, Tensor)> {
    check_bag(x_p, store.value(params.u1).cols())?;
    let mut g = Graph::new();
    let bound = g.bind(store);
    let x = g.constant(x_p.clone());
    let (a, i) = gated_attention_graph(&mut g, &bound, params, x);
    Ok((g.value(a).clone(), g.value(i).clone()))
}

/// How the landmark kernel is inverted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PinvMode {
    /// Iterative Moore–Penrose approximation with the configured step count.
    /// When the landmark count reaches the bag size, exact softmax attention
    /// is used instead.
    Iterative,
    /// SVD pseudo-inverse; always evaluates the landmark formula.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NystromConfig {
    pub head_dim: usize,
    pub landmarks: usize,
    pub pinv_iters: usize,
    pub pinv: PinvMode,
}

impl Default for NystromConfig {
    fn default() -> Self {
        NystromConfig {
            head_dim: 64,
            landmarks: 64,
            pinv_iters: 6,
            pinv: PinvMode::Iterative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NystromHeadParams {
    /// `d × d_k`.
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// `d_k × d`.
    pub wo: ParamId,
}

impl NystromHeadParams {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, d_k: usize, seed: u64) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        let so = 1.0 / (d_k as f64).sqrt();
        NystromHeadParams {
            wq: store.add_uniform(format!("{prefix}.wq"), d, d_k, s, seed),
            wk: store.add_uniform(format!("{prefix}.wk"), d, d_k, s, seed),
            wv: store.add_uniform(format!("{prefix}.wv"), d, d_k, s, seed),
            wo: store.add_uniform(format!("{prefix}.wo"), d_k, d, so, seed),
        }
    }
}

/// Averaging matrix (`m × len`) whose rows are the means of `m` contiguous,
/// near-equal segments.
pub fn segment_means_matrix(m: usize, len: usize) -> Tensor {
    let mut p = Tensor::zeros(m, len);
    for s in 0..m {
        let (lo, hi) = (s * len / m, (s + 1) * len / m);
        let w = 1.0 / (hi - lo) as f64;
        for j in lo..hi {
            p.set(s, j, w);
        }
    }
    p
}

/// Iterative pseudo-inverse on the tape.
fn iterative_pinv(g: &mut Graph, k: Var, iters: usize) -> Var {
    let n = g.shape(k)[0];
    let eye = |g: &mut Graph, c: f64| g.constant(Tensor::identity(n).scale(c));
    let mut z = g.pinv_init(k);
    for _ in 0..iters {
        let kz = g.matmul(k, z);
        let i7 = eye(g, 7.0);
        let t = g.sub(i7, kz);
        let t = g.matmul(kz, t);
        let i15 = eye(g, 15.0);
        let t = g.sub(i15, t);
        let t = g.matmul(kz, t);
        let i13 = eye(g, 13.0);
        let t = g.sub(i13, t);
        let zt = g.matmul(z, t);
        z = g.scale(zt, 0.25);
    }
    z
}

/// Output of one head.
pub struct NystromOutput {
    /// `M × d_k` attended values.
    pub values: Var,
    /// Mean attention each patch receives (length `M`, normalized to sum 1).
    pub received: Vec<f64>,
}

/// One Nyström self-attention head on the tape.
pub fn nystrom_graph(
    g: &mut Graph,
    bound: &Bound,
    head: &NystromHeadParams,
    cfg: &NystromConfig,
    x: Var,
) -> NystromOutput {
    let m_rows = g.shape(x)[0];
    let d_k = g.shape(bound[head.wq])[1];
    let scale = (d_k as f64).powf(-0.25);
    let q = g.matmul(x, bound[head.wq]);
    let q = g.scale(q, scale);
    let k = g.matmul(x, bound[head.wk]);
    let k = g.scale(k, scale);
    let v = g.matmul(x, bound[head.wv]);

    let m = cfg.landmarks.clamp(1, m_rows);
    if m >= m_rows && cfg.pinv == PinvMode::Iterative {
        let logits = g.matmul_t(q, k);
        let attn = g.softmax_rows(logits);
        let values = g.matmul(attn, v);
        let received = g.value(attn).mean_rows().into_data();
        return NystromOutput { values, received };
    }

    let seg = g.constant(segment_means_matrix(m, m_rows));
    let q_l = g.matmul(seg, q);
    let k_l = g.matmul(seg, k);
    let k1 = g.matmul_t(q, k_l);
    let k1 = g.softmax_rows(k1);
    let k2 = g.matmul_t(q_l, k_l);
    let k2 = g.softmax_rows(k2);
    let k3 = g.matmul_t(q_l, k);
    let k3 = g.softmax_rows(k3);
    let z = match cfg.pinv {
        PinvMode::Iterative => iterative_pinv(g, k2, cfg.pinv_iters),
        PinvMode::Exact => g.pinv_exact(k2),
    };
    let kv = g.matmul(k3, v);
    let zkv = g.matmul(z, kv);
    let values = g.matmul(k1, zkv);

    let mean_k1 = g.value(k1).mean_rows();
    let r = matmul(&matmul(&mean_k1, g.value(z)).unwrap(), g.value(k3)).unwrap();
    NystromOutput {
        values,
        received: normalize_scores(r.data()),
    }
}

/// Clips negatives to zero and rescales to sum 1 (uniform if nothing is left).
pub fn normalize_scores(raw: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
    let s: f64 = clipped.iter().sum();
    if s > 0.0 && s.is_finite() {
        clipped.iter().map(|v| v / s).collect()
    } else {
        vec![1.0 / raw.len() as f64; raw.len()]
    }
}

/// `(2N − 1) × d` node embeddings: per head, average-pool the attended values
/// and project back to `d`. Also returns each head's per-patch surrogate scores.
pub fn multihead_embed_graph(
    g: &mut Graph,
    bound: &Bound,
    heads: &[NystromHeadParams],
    cfg: &NystromConfig,
    x_p: Var,
) -> (Var, Vec<Vec<f64>>) {
    let mut rows = Vec::with_capacity(heads.len());
    let mut scores = Vec::with_capacity(heads.len());
    for head in heads {
        let out = nystrom_graph(g, bound, head, cfg, x_p);
        let pooled = g.mean_rows(out.values);
        rows.push(g.matmul(pooled, bound[head.wo]));
        scores.push(out.received);
    }
    (g.stack_rows(&rows), scores)
}

pub fn nystrom_attention(
    x: &Tensor,
    head: &NystromHeadParams,
    cfg: &NystromConfig,
    store: &ParamStore,
) -> Result<Tensor> {
    check_bag(x, store.value(head.wq).rows())?;
    let mut g = Graph::new();
    let bound = g.bind(store);
    let xv = g.constant(x.clone());
    let out = nystrom_graph(&mut g, &bound, head, cfg, xv);
    Ok(g.value(out.values).clone())
}

pub fn multihead_embed(
    x_p: &Tensor,
    heads: &[NystromHeadParams],
    cfg: &NystromConfig,
    store: &ParamStore,
) -> Result<Tensor> {
    let first = heads
        .first()
        .ok_or_else(|| Error::Config("no attention heads".into()))?;
    check_bag(x_p, store.value(first.wq).rows())?;
    let mut g = Graph::new();
    let bound = g.bind(store);
    let x = g.constant(x_p.clone());
    let (i, _) = multihead_embed_graph(&mut g, &bound, heads, cfg, x);
    Ok(g.value(i).clone())
}
