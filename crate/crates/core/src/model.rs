//! Trainable models: the full tree-guided classifier and the attention-pooling
//! linear-probe baseline. Both implement [`SlideClassifier`], which is all the
//! trainer needs.

use serde::{Deserialize, Serialize};

use crate::aggregator::{aggregate_graph, FusionScores};
use crate::error::{Error, Result};
use crate::evaluation::argmax;
use crate::numerics::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::objectives::{
    ce_loss_graph, match_loss_graph, path_loss_graph, predict_probs_graph, total_loss_graph, LossConfig, TAU_FLOOR,
};
use crate::prompt_encoder::{encode_prompts_graph, PromptEncoderParams, TreeMasks};
use crate::slide_attention::{
    gated_attention_graph, multihead_embed_graph, GatedAttentionParams, NystromConfig, NystromHeadParams,
};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    #[default]
    Gated,
    Nystrom,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub attention: AttentionVariant,
    pub nystrom: NystromConfig,
    pub fusion: FusionScores,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    PathTree,
    LinearProbe,
}

/// Loss values of one slide.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub matching: f64,
    pub path: f64,
}

/// Inference output for one slide.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub pred_class: usize,
    /// Per-patch score rows (each sums to 1). Row `v` belongs to node `v` for
    /// the tree model; the probe has a single row.
    pub attention: Tensor,
}

pub trait SlideClassifier: Sync {
    fn kind(&self) -> ModelKind;
    fn taxonomy(&self) -> &Taxonomy;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Embedding width expected of patch rows.
    fn dim(&self) -> usize;

    /// Builds the loss of one slide on `g` using parameter values from `store`
    /// (which must share this model's layout).
    fn loss_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_p: &Tensor,
        class: usize,
        loss: &LossConfig,
    ) -> Result<(Var, [Var; 3])>;

    fn predict_with(&self, store: &ParamStore, x_p: &Tensor) -> Result<Prediction>;

    /// Projection applied after every optimizer step.
    fn after_step(&mut self) {}

    fn predict(&self, x_p: &Tensor) -> Result<Prediction> {
        self.predict_with(self.store(), x_p)
    }

    fn loss_with(&self, store: &ParamStore, x_p: &Tensor, class: usize, loss: &LossConfig) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let (total, [ce, m, p]) = self.loss_graph(&mut g, store, x_p, class, loss)?;
        Ok(LossBreakdown {
            total: g.scalar(total),
            ce: g.scalar(ce),
            matching: g.scalar(m),
            path: g.scalar(p),
        })
    }

    /// Replaces the stored gradients with those of this slide's loss.
    fn compute_gradients(&mut self, x_p: &Tensor, class: usize, loss: &LossConfig) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let (total, [ce, m, p]) = self.loss_graph(&mut g, self.store(), x_p, class, loss)?;
        let grads = g.backward(total);
        let store = self.store_mut();
        store.zero_grads();
        g.accumulate_param_grads(&grads, store);
        Ok(LossBreakdown {
            total: g.scalar(total),
            ce: g.scalar(ce),
            matching: g.scalar(m),
            path: g.scalar(p),
        })
    }

    fn parameter_count(&self) -> usize {
        self.store().scalar_count()
    }
}

fn check_input(x_p: &Tensor, d: usize, n_classes: usize, class: Option<usize>) -> Result<()> {
    if x_p.rows() == 0 {
        return Err(Error::EmptyBag("bag has no patches".into()));
    }
    if x_p.cols() != d {
        return Err(Error::DimensionMismatch(format!(
            "patch width {} but model width {d}",
            x_p.cols()
        )));
    }
    if let Some(c) = class {
        if c >= n_classes {
            return Err(Error::BadLabel(format!("class {c} with {n_classes} classes")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum SlideAttention {
    Gated(GatedAttentionParams),
    Nystrom(Vec<NystromHeadParams>),
}

/// Prompt encoder, per-node slide attention, text-guided aggregation and the
/// cosine prediction head with a learnable temperature.
#[derive(Debug, Clone)]
pub struct PathTree {
    taxonomy: Taxonomy,
    x_t: Tensor,
    masks: TreeMasks,
    config: ModelConfig,
    store: ParamStore,
    prompt: PromptEncoderParams,
    attention: SlideAttention,
    tau: ParamId,
}

/// Tape handles of one forward pass.
pub struct Forward {
    pub prompts: Var,
    pub slide: Var,
    pub global: Var,
    pub probs: Var,
    pub attention: Tensor,
}

impl PathTree {
    /// `x_t` holds one raw prompt embedding per node, in node-id order.
    pub fn new(taxonomy: Taxonomy, x_t: Tensor, config: ModelConfig, tau_init: f64, seed: u64) -> Result<Self> {
        let n = taxonomy.node_count();
        if x_t.rows() != n {
            return Err(Error::DimensionMismatch(format!(
                "prompt file has {} rows, taxonomy has {n} nodes",
                x_t.rows()
            )));
        }
        x_t.ensure_finite("prompt embeddings")?;
        let d = x_t.cols();
        if d == 0 {
            return Err(Error::DimensionMismatch("prompt embeddings have width 0".into()));
        }
        if tau_init < TAU_FLOOR {
            return Err(Error::Config(format!("initial temperature must be at least {TAU_FLOOR}")));
        }
        let (a1, a2) = taxonomy.adjacency();
        let masks = TreeMasks::new(&a1, &a2);
        let mut store = ParamStore::new();
        let prompt = PromptEncoderParams::register(&mut store, d, seed);
        let attention = match config.attention {
            AttentionVariant::Gated => {
                SlideAttention::Gated(GatedAttentionParams::register(&mut store, "attn", d, n, seed)?)
            }
            AttentionVariant::Nystrom => {
                let cfg = &config.nystrom;
                if cfg.head_dim == 0 || cfg.landmarks == 0 {
                    return Err(Error::Config("Nyström head width and landmark count must be positive".into()));
                }
                SlideAttention::Nystrom(
                    (0..n)
                        .map(|v| NystromHeadParams::register(&mut store, &format!("attn.head{v}"), d, cfg.head_dim, seed))
                        .collect(),
                )
            }
        };
        let tau = store.add("tau", Tensor::scalar(tau_init));
        Ok(PathTree {
            taxonomy,
            x_t,
            masks,
            config,
            store,
            prompt,
            attention,
            tau,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn prompt_embeddings(&self) -> &Tensor {
        &self.x_t
    }

    pub fn tau(&self) -> f64 {
        self.store.value(self.tau).item()
    }

    pub fn forward_graph(&self, g: &mut Graph, bound: &Bound, x_p: Var) -> Forward {
        let x_t = g.constant(self.x_t.clone());
        let prompts = encode_prompts_graph(g, bound, &self.prompt, x_t, &self.masks);
        let (slide, attention) = match &self.attention {
            SlideAttention::Gated(p) => {
                let (scores, pooled) = gated_attention_graph(g, bound, p, x_p);
                (pooled, g.value(scores).clone())
            }
            SlideAttention::Nystrom(heads) => {
                let (i, rows) = multihead_embed_graph(g, bound, heads, &self.config.nystrom, x_p);
                let m = rows[0].len();
                let data = rows.into_iter().flatten().collect();
                (i, Tensor::from_vec(heads.len(), m, data).expect("score rows"))
            }
        };
        let global = aggregate_graph(g, &self.taxonomy, prompts, slide, self.config.fusion);
        let probs = predict_probs_graph(g, global, prompts, self.taxonomy.leaves(), bound[self.tau]);
        Forward {
            prompts,
            slide,
            global,
            probs,
            attention,
        }
    }
}

impl SlideClassifier for PathTree {
    fn kind(&self) -> ModelKind {
        ModelKind::PathTree
    }

    fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn dim(&self) -> usize {
        self.x_t.cols()
    }

    fn loss_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_p: &Tensor,
        class: usize,
        loss: &LossConfig,
    ) -> Result<(Var, [Var; 3])> {
        check_input(x_p, self.dim(), self.taxonomy.leaf_count(), Some(class))?;
        let bound = g.bind(store);
        let x = g.constant(x_p.clone());
        let f = self.forward_graph(g, &bound, x);
        let leaf = self.taxonomy.leaf_id(class)?;
        let path = self.taxonomy.find_path(leaf)?;
        let ce = ce_loss_graph(g, f.probs, class);
        let m = match_loss_graph(g, f.global, f.prompts, &self.taxonomy, leaf, loss)?;
        let p = path_loss_graph(g, f.global, f.prompts, &path);
        let total = total_loss_graph(g, ce, m, p, loss);
        Ok((total, [ce, m, p]))
    }

    fn predict_with(&self, store: &ParamStore, x_p: &Tensor) -> Result<Prediction> {
        check_input(x_p, self.dim(), self.taxonomy.leaf_count(), None)?;
        let mut g = Graph::new();
        let bound = g.bind(store);
        let x = g.constant(x_p.clone());
        let f = self.forward_graph(&mut g, &bound, x);
        let probs = g.value(f.probs).data().to_vec();
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("predicted probabilities".into()));
        }
        Ok(Prediction {
            pred_class: argmax(&probs),
            probs,
            attention: f.attention,
        })
    }

    fn after_step(&mut self) {
        let tau = self.store.get_mut(self.tau);
        let v = tau.value.item().max(TAU_FLOOR);
        tau.value = Tensor::scalar(v);
    }
}

/// Single-row gated attention pooling followed by a linear classifier,
/// trained with cross-entropy only.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    taxonomy: Taxonomy,
    d: usize,
    store: ParamStore,
    attention: GatedAttentionParams,
    weight: ParamId,
    bias: ParamId,
}

impl LinearProbe {
    pub fn new(taxonomy: Taxonomy, d: usize, seed: u64) -> Result<Self> {
        let n = taxonomy.leaf_count();
        let mut store = ParamStore::new();
        let attention = GatedAttentionParams::register(&mut store, "probe.attn", d, 1, seed)?;
        let s = 1.0 / (d as f64).sqrt();
        let weight = store.add_uniform("probe.weight", n, d, s, seed);
        let bias = store.add("probe.bias", Tensor::zeros(1, n));
        Ok(LinearProbe {
            taxonomy,
            d,
            store,
            attention,
            weight,
            bias,
        })
    }

    fn forward_graph(&self, g: &mut Graph, bound: &Bound, x_p: Var) -> (Var, Tensor) {
        let (scores, pooled) = gated_attention_graph(g, bound, &self.attention, x_p);
        let logits = g.matmul_t(pooled, bound[self.weight]);
        let logits = g.add(logits, bound[self.bias]);
        (g.softmax_rows(logits), g.value(scores).clone())
    }
}

impl SlideClassifier for LinearProbe {
    fn kind(&self) -> ModelKind {
        ModelKind::LinearProbe
    }

    fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn loss_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_p: &Tensor,
        class: usize,
        _loss: &LossConfig,
    ) -> Result<(Var, [Var; 3])> {
        check_input(x_p, self.d, self.taxonomy.leaf_count(), Some(class))?;
        let bound = g.bind(store);
        let x = g.constant(x_p.clone());
        let (probs, _) = self.forward_graph(g, &bound, x);
        let ce = ce_loss_graph(g, probs, class);
        let zero = g.constant(Tensor::scalar(0.0));
        Ok((ce, [ce, zero, zero]))
    }

    fn predict_with(&self, store: &ParamStore, x_p: &Tensor) -> Result<Prediction> {
        check_input(x_p, self.d, self.taxonomy.leaf_count(), None)?;
        let mut g = Graph::new();
        let bound = g.bind(store);
        let x = g.constant(x_p.clone());
        let (probs, attention) = self.forward_graph(&mut g, &bound, x);
        let probs = g.value(probs).data().to_vec();
        Ok(Prediction {
            pred_class: argmax(&probs),
            probs,
            attention,
        })
    }
}

/// A model of either kind.
#[derive(Debug, Clone)]
pub enum AnyModel {
    PathTree(PathTree),
    LinearProbe(LinearProbe),
}

macro_rules! delegate {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            AnyModel::PathTree($m) => $e,
            AnyModel::LinearProbe($m) => $e,
        }
    };
}

impl SlideClassifier for AnyModel {
    fn kind(&self) -> ModelKind {
        delegate!(self, m => m.kind())
    }

    fn taxonomy(&self) -> &Taxonomy {
        delegate!(self, m => m.taxonomy())
    }

    fn store(&self) -> &ParamStore {
        delegate!(self, m => m.store())
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        delegate!(self, m => m.store_mut())
    }

    fn dim(&self) -> usize {
        delegate!(self, m => m.dim())
    }

    fn loss_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_p: &Tensor,
        class: usize,
        loss: &LossConfig,
    ) -> Result<(Var, [Var; 3])> {
        delegate!(self, m => m.loss_graph(g, store, x_p, class, loss))
    }

    fn predict_with(&self, store: &ParamStore, x_p: &Tensor) -> Result<Prediction> {
        delegate!(self, m => m.predict_with(store, x_p))
    }

    fn after_step(&mut self) {
        delegate!(self, m => m.after_step())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::aggregate;
    use crate::numerics::{grad_check, GradCheckOptions};
    use crate::objectives::{ce_loss, match_loss, path_loss, predict_probs, total_loss};
    use crate::prompt_encoder::encode_prompts;
    use crate::slide_attention::gated_attention;
    use crate::taxonomy::{parse_taxonomy, random_taxonomy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn small(variant: AttentionVariant, seed: u64) -> PathTree {
        let t = random_taxonomy(3, seed);
        let cfg = ModelConfig {
            attention: variant,
            nystrom: NystromConfig {
                head_dim: 4,
                landmarks: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        PathTree::new(t, random(5, 8, seed + 1), cfg, 0.5, seed).unwrap()
    }

    #[test]
    fn loss_matches_module_composition() {
        let model = small(AttentionVariant::Gated, 4);
        let t = model.taxonomy().clone();
        let x = random(6, 8, 9);
        let cfg = LossConfig::default();
        let store = model.store();
        let (a1, a2) = t.adjacency();
        let prompts = encode_prompts(&model.x_t, &a1, &a2, &model.prompt, store).unwrap();
        let SlideAttention::Gated(gp) = &model.attention else { unreachable!() };
        let (_, slide) = gated_attention(&x, gp, store).unwrap();
        let trace = aggregate(&t, &prompts, &slide, FusionScores::Diagonal).unwrap();
        for class in 0..3 {
            let leaf = t.leaf_id(class).unwrap();
            let probs = predict_probs(&trace.global, &prompts, t.leaves(), model.tau()).unwrap();
            let want = total_loss(
                ce_loss(&probs, class).unwrap(),
                match_loss(&trace.global, &prompts, &t, leaf, &cfg).unwrap(),
                path_loss(&trace.global, &prompts, &t.find_path(leaf).unwrap()).unwrap(),
                &cfg,
            );
            let got = model.loss_with(store, &x, class, &cfg).unwrap();
            assert!((got.total - want).abs() < 1e-10, "{} vs {want}", got.total);
            let p = model.predict(&x).unwrap();
            assert!(p.probs.iter().zip(&probs).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn gradients_pass_finite_differences() {
        for variant in [AttentionVariant::Gated, AttentionVariant::Nystrom] {
            let mut model = small(variant, 11);
            let x = random(5, 8, 12);
            let cfg = LossConfig::default();
            model.compute_gradients(&x, 1, &cfg).unwrap();
            let grads = model.store().grads();
            let report = grad_check(
                model.store(),
                &grads,
                |s| Ok(model.loss_with(s, &x, 1, &cfg)?.total),
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passed(1e-4), "{variant:?}: {}", report.max_rel_error);
        }
    }

    #[test]
    fn probe_is_smaller_than_tree_model() {
        for leaves in [2, 3, 7] {
            let t = random_taxonomy(leaves, 1);
            let n = t.node_count();
            let tree = PathTree::new(t.clone(), random(n, 16, 2), ModelConfig::default(), 0.07, 0).unwrap();
            let probe = LinearProbe::new(t, 16, 0).unwrap();
            assert!(probe.parameter_count() < tree.parameter_count());
        }
    }

    #[test]
    fn probe_gradients_pass_finite_differences() {
        let t = parse_taxonomy(crate::taxonomy::SYSFL_TAXONOMY).unwrap();
        let mut probe = LinearProbe::new(t, 6, 3).unwrap();
        let x = random(7, 6, 4);
        let cfg = LossConfig::default();
        let b = probe.compute_gradients(&x, 5, &cfg).unwrap();
        assert_eq!(b.total, b.ce);
        let grads = probe.store().grads();
        let report = grad_check(
            probe.store(),
            &grads,
            |s| Ok(probe.loss_with(s, &x, 5, &cfg)?.total),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(1e-6));
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let t = random_taxonomy(3, 0);
        assert!(matches!(
            PathTree::new(t.clone(), random(4, 8, 0), ModelConfig::default(), 0.07, 0),
            Err(Error::DimensionMismatch(_))
        ));
        let model = small(AttentionVariant::Gated, 0);
        assert!(matches!(model.predict(&random(3, 6, 0)), Err(Error::DimensionMismatch(_))));
        assert!(matches!(model.predict(&Tensor::zeros(0, 8)), Err(Error::EmptyBag(_))));
        let cfg = LossConfig::default();
        assert!(matches!(
            model.loss_with(model.store(), &random(3, 8, 0), 3, &cfg),
            Err(Error::BadLabel(_))
        ));
    }

    #[test]
    fn tau_is_clamped_after_step() {
        let mut model = small(AttentionVariant::Gated, 0);
        let id = model.tau;
        model.store_mut().get_mut(id).value = Tensor::scalar(-1.0);
        model.after_step();
        assert_eq!(model.tau(), TAU_FLOOR);
    }

    #[test]
    fn attention_rows_are_distributions() {
        for variant in [AttentionVariant::Gated, AttentionVariant::Nystrom] {
            let model = small(variant, 2);
            let p = model.predict(&random(9, 8, 3)).unwrap();
            assert_eq!(p.attention.shape(), [5, 9]);
            for r in 0..5 {
                let s: f64 = p.attention.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
            assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
