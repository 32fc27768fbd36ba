//! Bidirectional tree GAT over the text-prompt embeddings.
//!
//! Two stacks of two single-head GAT layers run over the parent→child and
//! child→parent graphs respectively; their outputs are combined by the dual
//! interaction `T = ReLU(W1 (H1 + H2) + W2 (H1 ⊙ H2))`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Bound, Graph, ParamId, ParamStore, Tensor, Var};

/// Negative slope of the LeakyReLU applied to attention logits.
pub const ATTENTION_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatLayerParams {
    /// `d_out × d_in`.
    pub w: ParamId,
    /// `1 × d_out`.
    pub a_src: ParamId,
    /// `1 × d_out`.
    pub a_dst: ParamId,
}

impl GatLayerParams {
    pub fn register(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, seed: u64) -> Self {
        let s = 1.0 / (d_in as f64).sqrt();
        let sa = 1.0 / (d_out as f64).sqrt();
        GatLayerParams {
            w: store.add_uniform(format!("{prefix}.w"), d_out, d_in, s, seed),
            a_src: store.add_uniform(format!("{prefix}.a_src"), 1, d_out, sa, seed),
            a_dst: store.add_uniform(format!("{prefix}.a_dst"), 1, d_out, sa, seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptEncoderParams {
    /// Layers 1 and 2 over parent→child edges.
    pub down: [GatLayerParams; 2],
    /// Layers 1 and 2 over child→parent edges.
    pub up: [GatLayerParams; 2],
    pub w1: ParamId,
    pub w2: ParamId,
}

impl PromptEncoderParams {
    pub fn register(store: &mut ParamStore, d: usize, seed: u64) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        PromptEncoderParams {
            down: [
                GatLayerParams::register(store, "prompt.down1", d, d, seed),
                GatLayerParams::register(store, "prompt.down2", d, d, seed),
            ],
            up: [
                GatLayerParams::register(store, "prompt.up1", d, d, seed),
                GatLayerParams::register(store, "prompt.up2", d, d, seed),
            ],
            w1: store.add_uniform("prompt.w1", d, d, s, seed),
            w2: store.add_uniform("prompt.w2", d, d, s, seed),
        }
    }
}

/// In-neighbor masks (with self-loops) for both edge directions.
#[derive(Debug, Clone)]
pub struct TreeMasks {
    pub nodes: usize,
    pub down: Arc<[bool]>,
    pub up: Arc<[bool]>,
}

impl TreeMasks {
    pub fn new(a1: &Tensor, a2: &Tensor) -> Self {
        TreeMasks {
            nodes: a1.rows(),
            down: in_neighbor_mask(a1),
            up: in_neighbor_mask(a2),
        }
    }
}

/// `mask[v][u]` is true when `u → v` is an edge of `adj` or `u == v`.
pub fn in_neighbor_mask(adj: &Tensor) -> Arc<[bool]> {
    let n = adj.rows();
    (0..n * n)
        .map(|k| {
            let (v, u) = (k / n, k % n);
            u == v || adj.get(u, v) != 0.0
        })
        .collect()
}

/// Single-head GAT layer (pre-activation) on the tape.
pub fn gat_layer_graph(
    g: &mut Graph,
    bound: &Bound,
    layer: &GatLayerParams,
    h: Var,
    mask: &Arc<[bool]>,
) -> Var {
    let z = g.matmul_t(h, bound[layer.w]);
    let src = g.matmul_t(z, bound[layer.a_src]);
    let dst = g.matmul_t(z, bound[layer.a_dst]);
    let src_row = g.transpose(src);
    let logits = g.outer_add(dst, src_row);
    let logits = g.leaky_relu(logits, ATTENTION_LEAKY_SLOPE);
    let alpha = g.masked_softmax_rows(logits, mask.clone());
    g.matmul(alpha, z)
}

/// Hierarchy-aware prompt representations `T` on the tape.
pub fn encode_prompts_graph(
    g: &mut Graph,
    bound: &Bound,
    params: &PromptEncoderParams,
    x_t: Var,
    masks: &TreeMasks,
) -> Var {
    let branch = |g: &mut Graph, layers: &[GatLayerParams; 2], mask: &Arc<[bool]>| {
        let h1 = gat_layer_graph(g, bound, &layers[0], x_t, mask);
        let h1 = g.relu(h1);
        let h2 = gat_layer_graph(g, bound, &layers[1], h1, mask);
        g.relu(h2)
    };
    let h_down = branch(g, &params.down, &masks.down);
    let h_up = branch(g, &params.up, &masks.up);
    let sum = g.add(h_down, h_up);
    let prod = g.mul(h_down, h_up);
    let a = g.matmul_t(sum, bound[params.w1]);
    let b = g.matmul_t(prod, bound[params.w2]);
    let t = g.add(a, b);
    g.relu(t)
}

fn check_square_adj(adj: &Tensor, rows: usize) -> Result<()> {
    if adj.rows() != adj.cols() || adj.rows() != rows {
        return Err(Error::ShapeMismatch(format!(
            "adjacency {}x{} for {rows} node rows",
            adj.rows(),
            adj.cols()
        )));
    }
    Ok(())
}

/// One GAT layer on plain tensors (pre-activation).
pub fn gat_layer(
    h: &Tensor,
    adj: &Tensor,
    layer: &GatLayerParams,
    store: &ParamStore,
) -> Result<Tensor> {
    check_square_adj(adj, h.rows())?;
    if store.value(layer.w).cols() != h.cols() {
        return Err(Error::ShapeMismatch(format!(
            "GAT weight expects width {}, input has {}",
            store.value(layer.w).cols(),
            h.cols()
        )));
    }
    let mut g = Graph::new();
    let bound = g.bind(store);
    let hv = g.constant(h.clone());
    let out = gat_layer_graph(&mut g, &bound, layer, hv, &in_neighbor_mask(adj));
    Ok(g.value(out).clone())
}

/// Encodes `X_t` (rows in node-id order) on plain tensors.
pub fn encode_prompts(
    x_t: &Tensor,
    a1: &Tensor,
    a2: &Tensor,
    params: &PromptEncoderParams,
    store: &ParamStore,
) -> Result<Tensor> {
    check_square_adj(a1, x_t.rows())?;
    check_square_adj(a2, x_t.rows())?;
    let d = store.value(params.w1).rows();
    if x_t.cols() != d {
        return Err(Error::ShapeMismatch(format!(
            "prompt width {} but encoder width {d}",
            x_t.cols()
        )));
    }
    let mut g = Graph::new();
    let bound = g.bind(store);
    let x = g.constant(x_t.clone());
    let t = encode_prompts_graph(&mut g, &bound, params, x, &TreeMasks::new(a1, a2));
    Ok(g.value(t).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{softmax, Tensor};
    use crate::taxonomy::{parse_taxonomy, random_taxonomy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn leaky(x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            ATTENTION_LEAKY_SLOPE * x
        }
    }

    /// Per-node GAT written directly from the definition.
    fn gat_oracle(h: &Tensor, adj: &Tensor, w: &Tensor, a_src: &[f64], a_dst: &[f64]) -> Tensor {
        let n = h.rows();
        let d_out = w.rows();
        let z: Vec<Vec<f64>> = (0..n)
            .map(|v| {
                (0..d_out)
                    .map(|o| (0..h.cols()).map(|i| w.get(o, i) * h.get(v, i)).sum())
                    .collect()
            })
            .collect();
        let dotv = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut out = Tensor::zeros(n, d_out);
        for v in 0..n {
            let nbrs: Vec<usize> = (0..n).filter(|&u| u == v || adj.get(u, v) != 0.0).collect();
            let logits: Vec<f64> = nbrs
                .iter()
                .map(|&u| leaky(dotv(a_src, &z[u]) + dotv(a_dst, &z[v])))
                .collect();
            let alpha = softmax(&logits).unwrap();
            for (k, &u) in nbrs.iter().enumerate() {
                for o in 0..d_out {
                    let cur = out.get(v, o);
                    out.set(v, o, cur + alpha[k] * z[u][o]);
                }
            }
        }
        out
    }

    fn encoder(d: usize, seed: u64) -> (ParamStore, PromptEncoderParams) {
        let mut store = ParamStore::new();
        let p = PromptEncoderParams::register(&mut store, d, seed);
        (store, p)
    }

    #[test]
    fn isolated_node_is_plain_projection() {
        let (store, p) = encoder(4, 1);
        let h = random(1, 4, 2);
        let out = gat_layer(&h, &Tensor::zeros(1, 1), &p.down[0], &store).unwrap();
        let expect = crate::numerics::matmul_t(&h, store.value(p.down[0].w)).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn identical_mutual_neighbors_keep_their_projection() {
        let (store, p) = encoder(3, 4);
        let row = vec![0.3, -0.2, 0.9];
        let h = Tensor::from_rows(&[row.clone(), row]).unwrap();
        let adj = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let out = gat_layer(&h, &adj, &p.down[0], &store).unwrap();
        let z = crate::numerics::matmul_t(&h, store.value(p.down[0].w)).unwrap();
        assert!(out.max_abs_diff(&z) < 1e-15);
    }

    #[test]
    fn matches_neighbor_enumeration_oracle() {
        let t = random_taxonomy(3, 7);
        assert_eq!(t.node_count(), 5);
        let (store, p) = encoder(6, 3);
        let h = random(5, 6, 11);
        for adj in [t.adjacency().0, t.adjacency().1] {
            let l = &p.up[1];
            let out = gat_layer(&h, &adj, l, &store).unwrap();
            let oracle = gat_oracle(
                &h,
                &adj,
                store.value(l.w),
                store.value(l.a_src).data(),
                store.value(l.a_dst).data(),
            );
            assert!(out.max_abs_diff(&oracle) < 1e-12);
        }
    }

    #[test]
    fn zero_prompts_encode_to_zero() {
        let t = parse_taxonomy(crate::taxonomy::SYSFL_TAXONOMY).unwrap();
        let (a1, a2) = t.adjacency();
        let (store, p) = encoder(8, 5);
        let out = encode_prompts(&Tensor::zeros(13, 8), &a1, &a2, &p, &store).unwrap();
        assert_eq!(out.shape(), [13, 8]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_plain_transcription() {
        let t = random_taxonomy(3, 2);
        let (a1, a2) = t.adjacency();
        let d = 8;
        let (store, p) = encoder(d, 9);
        let x = random(5, d, 10);
        let out = encode_prompts(&x, &a1, &a2, &p, &store).unwrap();

        let relu = |t: Tensor| t.map(|v| v.max(0.0));
        let layer = |h: &Tensor, adj: &Tensor, l: &GatLayerParams| {
            gat_oracle(h, adj, store.value(l.w), store.value(l.a_src).data(), store.value(l.a_dst).data())
        };
        let h1a = relu(layer(&x, &a1, &p.down[0]));
        let h1 = relu(layer(&h1a, &a1, &p.down[1]));
        let h2a = relu(layer(&x, &a2, &p.up[0]));
        let h2 = relu(layer(&h2a, &a2, &p.up[1]));
        let (w1, w2) = (store.value(p.w1), store.value(p.w2));
        let expect = Tensor::from_fn(5, d, |v, o| {
            let mut acc = 0.0;
            for i in 0..d {
                acc += w1.get(o, i) * (h1.get(v, i) + h2.get(v, i));
                acc += w2.get(o, i) * (h1.get(v, i) * h2.get(v, i));
            }
            acc.max(0.0)
        });
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn rows_depend_only_on_in_neighbors() {
        let t = random_taxonomy(4, 3);
        let (a1, _) = t.adjacency();
        let (store, p) = encoder(5, 1);
        let h = random(7, 5, 4);
        let base = gat_layer(&h, &a1, &p.down[0], &store).unwrap();
        for v in 0..7 {
            for u in 0..7 {
                if u == v || a1.get(u, v) != 0.0 {
                    continue;
                }
                let mut h2 = h.clone();
                for x in h2.row_mut(u) {
                    *x += 3.0;
                }
                let out = gat_layer(&h2, &a1, &p.down[0], &store).unwrap();
                assert_eq!(out.row(v), base.row(v));
            }
        }
    }

    #[test]
    fn relabeling_is_equivariant() {
        let t = random_taxonomy(4, 8);
        let n = t.node_count();
        let (a1, a2) = t.adjacency();
        let (store, p) = encoder(4, 2);
        let x = random(n, 4, 6);
        let out = encode_prompts(&x, &a1, &a2, &p, &store).unwrap();

        let perm: Vec<usize> = (0..n).rev().collect();
        let pa1 = Tensor::from_fn(n, n, |i, j| a1.get(perm[i], perm[j]));
        let pa2 = pa1.transpose();
        let px = x.select_rows(&perm);
        let pout = encode_prompts(&px, &pa1, &pa2, &p, &store).unwrap();
        assert!(pout.max_abs_diff(&out.select_rows(&perm)) < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let (store, p) = encoder(4, 1);
        let x = Tensor::zeros(3, 4);
        let bad = Tensor::zeros(2, 2);
        assert!(matches!(
            encode_prompts(&x, &bad, &bad, &p, &store),
            Err(Error::ShapeMismatch(_))
        ));
        let adj = Tensor::zeros(3, 3);
        assert!(matches!(
            encode_prompts(&Tensor::zeros(3, 5), &adj, &adj, &p, &store),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
