//! Training loop, model selection, checkpoint evaluation and the baseline.

pub mod checkpoint;
pub mod kfold;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC};
pub use kfold::{kfold_split, Fold};

use crate::dataio::SlideBag;
use crate::error::{Error, Result};
use crate::evaluation::{EvalRecord, MetricReport};
use crate::model::{AnyModel, LinearProbe, ModelConfig, ModelKind, PathTree, Prediction, SlideClassifier};
use crate::numerics::{Adam, AdamConfig, Tensor};
use crate::objectives::LossConfig;
use crate::par;
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Slides per optimizer step; only 1 is supported.
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub folds: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 1,
            clip_norm: 5.0,
            seed: 0,
            folds: 5,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!("batch size is fixed at 1, got {}", self.batch_size)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_wf1: f64,
    pub val_hf1: f64,
}

pub const LOG_HEADER: &str = "epoch\ttrain_loss\tval_acc\tval_wf1\tval_hf1";

impl EpochLog {
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}",
            self.epoch, self.train_loss, self.val_acc, self.val_wf1, self.val_hf1
        )
    }
}

pub fn format_log(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        s.push_str(&e.tsv_line());
        s.push('\n');
    }
    s
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Per-step losses in step order.
    pub step_losses: Vec<f64>,
    /// Best model by validation weighted F1; `None` when a resumed run never
    /// beat the metric stored in the checkpoint.
    pub best: Option<Checkpoint>,
    pub last: Checkpoint,
}

fn snapshot<M: SlideClassifier>(
    model: &M,
    meta: &CheckpointMeta,
    adam: &Adam,
    epoch: u64,
    best_metric: f64,
    best_epoch: u64,
) -> Checkpoint {
    let store = model.store();
    let tau = store.find("tau").map_or(0.0, |id| store.value(id).item());
    Checkpoint {
        taxonomy_hash: model.taxonomy().hash(),
        meta: meta.clone(),
        params: store
            .iter()
            .map(|(_, name, p)| (name.to_string(), p.value.clone()))
            .collect(),
        tau,
        adam: adam.states.clone(),
        epoch,
        seed: meta.train.seed,
        best_metric,
        best_epoch,
    }
}

/// Copies parameter values and optimizer state from `ckpt` into `model`.
pub fn restore<M: SlideClassifier>(model: &mut M, ckpt: &Checkpoint) -> Result<Adam> {
    let hash = model.taxonomy().hash();
    if ckpt.taxonomy_hash != hash {
        return Err(Error::HashMismatch {
            checkpoint: ckpt.taxonomy_hash.clone(),
            taxonomy: hash,
        });
    }
    let store = model.store_mut();
    if store.len() != ckpt.params.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, model has {}",
            ckpt.params.len(),
            store.len()
        )));
    }
    for (i, (name, value)) in ckpt.params.iter().enumerate() {
        let id = crate::numerics::ParamId(i);
        if store.name(id) != name || store.value(id).shape() != value.shape() {
            return Err(Error::Config(format!(
                "checkpoint parameter {name} {:?} does not match model parameter {} {:?}",
                value.shape(),
                store.name(id),
                store.value(id).shape()
            )));
        }
        store.get_mut(id).value = value.clone();
    }
    Ok(Adam {
        config: ckpt.meta.train.adam,
        states: ckpt.adam.clone(),
    })
}

/// Builds an untrained model of the kind described by `meta`.
pub fn build_model(meta: &CheckpointMeta, t: &Taxonomy, prompts: Option<&Tensor>) -> Result<AnyModel> {
    if t.leaf_count() != meta.leaves {
        return Err(Error::DimensionMismatch(format!(
            "checkpoint has {} leaf classes, taxonomy has {}",
            meta.leaves,
            t.leaf_count()
        )));
    }
    match meta.kind {
        ModelKind::PathTree => {
            let x_t = prompts.ok_or_else(|| Error::Config("this model needs prompt embeddings".into()))?;
            if x_t.cols() != meta.dim {
                return Err(Error::DimensionMismatch(format!(
                    "prompt width {} but checkpoint width {}",
                    x_t.cols(),
                    meta.dim
                )));
            }
            let m = PathTree::new(t.clone(), x_t.clone(), meta.model, meta.train.loss.tau_init, meta.train.seed)?;
            Ok(AnyModel::PathTree(m))
        }
        ModelKind::LinearProbe => Ok(AnyModel::LinearProbe(LinearProbe::new(t.clone(), meta.dim, meta.train.seed)?)),
    }
}

pub fn meta_for<M: SlideClassifier>(model: &M, model_cfg: ModelConfig, cfg: &TrainConfig) -> CheckpointMeta {
    CheckpointMeta {
        kind: model.kind(),
        dim: model.dim(),
        leaves: model.taxonomy().leaf_count(),
        model: model_cfg,
        train: *cfg,
    }
}

/// Predictions for `bags`, in input order.
pub fn predict_all<M: SlideClassifier>(model: &M, bags: &[SlideBag]) -> Result<Vec<Prediction>> {
    par::map_slice(bags, |b| model.predict(&b.patches)).into_iter().collect()
}

pub fn eval_records<M: SlideClassifier>(model: &M, bags: &[SlideBag]) -> Result<(Vec<EvalRecord>, Vec<Prediction>)> {
    let preds = predict_all(model, bags)?;
    let records = bags
        .iter()
        .zip(&preds)
        .map(|(b, p)| EvalRecord::new(model.taxonomy(), b.slide_id.clone(), b.class, p.probs.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok((records, preds))
}

fn check_bags<M: SlideClassifier>(model: &M, bags: &[SlideBag]) -> Result<()> {
    let n = model.taxonomy().leaf_count();
    for b in bags {
        if b.patches.cols() != model.dim() {
            return Err(Error::DimensionMismatch(format!(
                "slide {} has width {}, model expects {}",
                b.slide_id,
                b.patches.cols(),
                model.dim()
            )));
        }
        if b.class >= n {
            return Err(Error::BadLabel(format!("slide {} has class {} of {n}", b.slide_id, b.class)));
        }
    }
    Ok(())
}

/// Trains `model` for `cfg.epochs` epochs (continuing from `resume` when
/// given), selecting the best epoch by validation weighted F1.
pub fn train<M: SlideClassifier>(
    model: &mut M,
    model_cfg: ModelConfig,
    train_bags: &[SlideBag],
    val_bags: &[SlideBag],
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_bags.is_empty() {
        return Err(Error::EmptyEval);
    }
    if val_bags.is_empty() {
        return Err(Error::EmptyEval);
    }
    check_bags(model, train_bags)?;
    check_bags(model, val_bags)?;
    let meta = meta_for(model, model_cfg, cfg);
    let (mut adam, start, mut best_metric, mut best_epoch) = match resume {
        Some(c) => {
            if c.meta.kind != meta.kind || c.meta.model != meta.model || c.meta.dim != meta.dim {
                return Err(Error::Config("checkpoint was written by a different model".into()));
            }
            let mut adam = restore(model, c)?;
            adam.config = cfg.adam;
            (adam, c.epoch as usize, c.best_metric, c.best_epoch)
        }
        None => (Adam::new(cfg.adam, model.store()), 0, f64::NEG_INFINITY, 0),
    };
    let mut log = Vec::new();
    let mut step_losses = Vec::new();
    let mut best = None;
    let mut order: Vec<usize> = (0..train_bags.len()).collect();
    for epoch in start..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &i in &order {
            let bag = &train_bags[i];
            let b = model.compute_gradients(&bag.patches, bag.class, &cfg.loss)?;
            if !b.total.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "slide {} in epoch {}: loss {} (ce {}, match {}, path {})",
                    bag.slide_id,
                    epoch + 1,
                    b.total,
                    b.ce,
                    b.matching,
                    b.path
                )));
            }
            let store = model.store_mut();
            if let Some((_, name, _)) = store.iter().find(|(_, _, p)| !p.grad.is_finite()) {
                return Err(Error::NonFiniteLoss(format!(
                    "slide {} in epoch {}: gradient of {name} is not finite",
                    bag.slide_id,
                    epoch + 1
                )));
            }
            store.clip_grad_norm(cfg.clip_norm);
            adam.step(store);
            model.after_step();
            sum += b.total;
            step_losses.push(b.total);
        }
        let (records, _) = eval_records(model, val_bags)?;
        let report = MetricReport::compute(&records, None)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            train_loss: sum / train_bags.len() as f64,
            val_acc: report.planar.acc,
            val_wf1: report.planar.weighted_f1,
            val_hf1: report.h_f1,
        };
        log.push(entry);
        if entry.val_wf1 > best_metric {
            best_metric = entry.val_wf1;
            best_epoch = (epoch + 1) as u64;
            best = Some(snapshot(model, &meta, &adam, best_epoch, best_metric, best_epoch));
        }
    }
    let last = snapshot(model, &meta, &adam, cfg.epochs.max(start) as u64, best_metric, best_epoch);
    Ok(TrainOutcome {
        log,
        step_losses,
        best,
        last,
    })
}

/// Trains the attention-pooling baseline with the same optimizer and epochs.
pub fn linear_probe(
    taxonomy: &Taxonomy,
    dim: usize,
    train_bags: &[SlideBag],
    val_bags: &[SlideBag],
    cfg: &TrainConfig,
) -> Result<(LinearProbe, TrainOutcome)> {
    let mut probe = LinearProbe::new(taxonomy.clone(), dim, cfg.seed)?;
    let out = train(&mut probe, ModelConfig::default(), train_bags, val_bags, cfg, None)?;
    Ok((probe, out))
}

/// Per-slide inference output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionReport {
    pub slide_id: String,
    pub true_class: usize,
    pub probs: Vec<f64>,
    pub pred_class: usize,
    pub pred_leaf: usize,
    pub pred_leaf_name: String,
    /// Predicted hierarchical label set (root excluded).
    pub pred_set: BTreeSet<usize>,
    #[serde(skip)]
    pub attention: Tensor,
}

pub struct Evaluation {
    pub records: Vec<EvalRecord>,
    pub report: MetricReport,
    pub predictions: Vec<PredictionReport>,
}

/// Rebuilds the model stored in `ckpt` and evaluates it on `bags`.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    taxonomy: &Taxonomy,
    prompts: Option<&Tensor>,
    bags: &[SlideBag],
    grouping: Option<&[usize]>,
) -> Result<Evaluation> {
    let model = load_model(ckpt, taxonomy, prompts)?;
    evaluate_model(&model, bags, grouping)
}

pub fn load_model(ckpt: &Checkpoint, taxonomy: &Taxonomy, prompts: Option<&Tensor>) -> Result<AnyModel> {
    let hash = taxonomy.hash();
    if ckpt.taxonomy_hash != hash {
        return Err(Error::HashMismatch {
            checkpoint: ckpt.taxonomy_hash.clone(),
            taxonomy: hash,
        });
    }
    let mut model = build_model(&ckpt.meta, taxonomy, prompts)?;
    restore(&mut model, ckpt)?;
    Ok(model)
}

pub fn evaluate_model<M: SlideClassifier>(model: &M, bags: &[SlideBag], grouping: Option<&[usize]>) -> Result<Evaluation> {
    check_bags(model, bags)?;
    let (records, preds) = eval_records(model, bags)?;
    let report = MetricReport::compute(&records, grouping)?;
    let t = model.taxonomy();
    let predictions = records
        .iter()
        .zip(preds)
        .map(|(r, p)| {
            let leaf = t.leaf_id(r.pred_class)?;
            Ok(PredictionReport {
                slide_id: r.slide_id.clone(),
                true_class: r.true_class,
                probs: r.probs.clone(),
                pred_class: r.pred_class,
                pred_leaf: leaf,
                pred_leaf_name: t.node(leaf)?.name.clone(),
                pred_set: r.pred_set.clone(),
                attention: p.attention,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        records,
        report,
        predictions,
    })
}
