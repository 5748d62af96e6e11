//! Multi-task optimization: prediction loss plus the redundancy-reduction
//! loss, Adam with decoupled weight decay, validation-based model selection,
//! and seeded determinism end to end.
//!
//! Determinism contract: every random draw comes from a stream keyed by
//! (seed, purpose, epoch); per-batch work is pre-drawn sequentially, the
//! parallel sections are pure, and gradients reduce over fixed-size chunks in
//! example order, so results are bitwise identical for any thread count.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{s, Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetBundle, TrainingExample};
use crate::encoder::{
    backward, encode_train, score_all, Checkpoint, DropoutCtx, ForwardCache, ModelConfig,
    Parameters,
};
use crate::evaluator;
use crate::objectives::{self, LossBundle, ViewBatch};
use crate::pairing::{self, TargetIndex};
use crate::rng::{stream, Purpose};
use crate::{Error, ItemId, Result, UserId};

/// Gradient accumulation chunk; fixed so the floating-point reduction order
/// never depends on the thread count.
const ACCUM_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    Ce,
    Sce,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossKind::Bce => write!(f, "bce"),
            LossKind::Ce => write!(f, "ce"),
            LossKind::Sce => write!(f, "sce"),
        }
    }
}

/// Full training configuration; JSON keys mirror the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub alpha: f64,
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub sce_k: usize,
    pub bce_m: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_len: usize,
    /// Row-l2-normalize the views before column centering (the stable,
    /// projection-free normalization); configurable for ablation.
    pub bt_row_normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_kind: LossKind::Ce,
            alpha: 0.3,
            lambda: 0.1,
            lr: 0.001,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 20,
            seed: 42,
            sce_k: 256,
            bce_m: 1,
            dim: 64,
            layers: 2,
            heads: 2,
            dropout: 0.2,
            max_len: 50,
            bt_row_normalize: true,
        }
    }
}

impl TrainConfig {
    pub fn from_json(json: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig =
            serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<TrainConfig> {
        let cfg: TrainConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.lambda < 0.0 {
            return Err(Error::Config("alpha and lambda must be >= 0".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.alpha > 0.0 && self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be >= 2 when alpha > 0 (the redundancy loss needs a batch)"
                    .into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.sce_k == 0 || self.bce_m == 0 {
            return Err(Error::Config("sce_k and bce_m must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be >= 2".into()));
        }
        Ok(())
    }

    fn model_config(&self, num_items: u32) -> ModelConfig {
        ModelConfig {
            num_items,
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            max_len: self.max_len,
            dropout: self.dropout,
        }
    }
}

/// Adam with decoupled weight decay. Decay applies to embeddings and
/// projection matrices, not to biases or layer-norm parameters.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    m: Parameters,
    v: Parameters,
}

fn decays(name: &str) -> bool {
    !(name.ends_with("gain") || name.ends_with("bias") || name.ends_with("b1") || name.ends_with("b2"))
}

impl Adam {
    pub fn new(template: &Parameters, lr: f64, weight_decay: f64) -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr,
            weight_decay,
            step: 0,
            m: template.zeros_like(),
            v: template.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &Parameters) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let g_tensors = grads.tensors();
        let m_tensors = self.m.tensors_mut();
        let v_tensors = self.v.tensors_mut();
        for ((((name, p), (_, g)), (_, m)), (_, v)) in params
            .tensors_mut()
            .into_iter()
            .zip(g_tensors)
            .zip(m_tensors)
            .zip(v_tensors)
        {
            let decay = if decays(&name) { self.weight_decay } else { 0.0 };
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.epsilon);
                p[i] -= self.lr * (update + decay * p[i]);
            }
        }
    }
}

/// One epoch row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub pred_loss: f64,
    pub bt_loss: f64,
    pub total_loss: f64,
    pub val_ndcg10: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    /// Fixed-header CSV with a leading config-echo comment. Floats carry 17
    /// significant digits. `zero_wall_time` replaces the timing column with
    /// zeros for byte-reproducible artifacts.
    pub fn to_csv(&self, config_json: &str, zero_wall_time: bool) -> String {
        use crate::util::fmt_f64 as f;
        let mut out = format!("# config: {config_json}\n");
        out.push_str("epoch,pred_loss,bt_loss,total_loss,val_ndcg10,wall_time_s\n");
        for r in &self.rows {
            let wall = if zero_wall_time { 0.0 } else { r.wall_s };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch,
                f(r.pred_loss),
                f(r.bt_loss),
                f(r.total_loss),
                f(r.val_ndcg10),
                f(wall)
            ));
        }
        out
    }
}

/// Library-level switches that are not part of the experiment config.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Structurally disable the redundancy-reduction path regardless of
    /// alpha; exists so the alpha = 0 shortcut can be verified against a
    /// build with the path removed.
    pub disable_bt: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub best_val_ndcg10: f64,
    pub log: TrainLog,
}

/// Per-example gradient of the prediction loss with respect to item scores.
enum ScoreGrad {
    /// Dense over the whole catalog; index i-1 belongs to item i.
    Dense(Vec<f64>),
    Sparse(Vec<(ItemId, f64)>),
}

struct ExampleForward {
    z_a: Array1<f64>,
    cache_a: ForwardCache,
    pred_loss: f64,
    score_grad: ScoreGrad,
    dz_pred: Array1<f64>,
    z_b: Option<Array1<f64>>,
    cache_b: Option<ForwardCache>,
}

/// Everything one batch step needs, pre-drawn so the parallel part is pure.
struct BatchPlan<'a> {
    anchors: Vec<&'a TrainingExample>,
    pairs: Option<Vec<&'a TrainingExample>>,
    negatives: Option<Vec<Vec<ItemId>>>,
    shared_candidates: Option<Vec<ItemId>>,
    epoch: u64,
    batch: u64,
}

fn item_score(params: &Parameters, item: ItemId, z: &Array1<f64>) -> f64 {
    params.item_embeddings.row(item as usize).dot(z)
}

fn forward_one(
    params: &Parameters,
    cfg: &TrainConfig,
    plan: &BatchPlan,
    slot: usize,
) -> Result<ExampleForward> {
    let anchor = plan.anchors[slot];
    let dropout_a = DropoutCtx {
        seed: cfg.seed,
        epoch: plan.epoch,
        batch: plan.batch,
        slot: slot as u64,
        view: 0,
        rate: cfg.dropout,
    };
    let (z_a, cache_a) = encode_train(params, &anchor.prefix, Some(&dropout_a))?;

    let catalog = params.config.num_items;
    let (pred_loss, score_grad, dz_pred) = match cfg.loss_kind {
        LossKind::Ce => {
            let scores = score_all(params, &z_a);
            let (loss, grad) = objectives::ce_loss_grad(&scores, anchor.target);
            let grad_arr = Array1::from_vec(grad);
            let dz = params
                .item_embeddings
                .slice(s![1.., ..])
                .t()
                .dot(&grad_arr);
            (loss, ScoreGrad::Dense(grad_arr.to_vec()), dz)
        }
        LossKind::Bce => {
            let negatives = &plan.negatives.as_ref().expect("bce plan has negatives")[slot];
            let pos = item_score(params, anchor.target, &z_a.vector);
            let neg_scores: Vec<f64> = negatives
                .iter()
                .map(|&j| item_score(params, j, &z_a.vector))
                .collect();
            let (loss, d_pos, d_negs) = objectives::bce_loss_grad(pos, &neg_scores);
            let mut sparse = Vec::with_capacity(1 + negatives.len());
            sparse.push((anchor.target, d_pos));
            sparse.extend(negatives.iter().copied().zip(d_negs));
            let mut dz = Array1::zeros(params.config.dim);
            for &(item, g) in &sparse {
                dz.scaled_add(g, &params.item_embeddings.row(item as usize));
            }
            (loss, ScoreGrad::Sparse(sparse), dz)
        }
        LossKind::Sce => {
            let shared = plan
                .shared_candidates
                .as_ref()
                .expect("sce plan has candidates");
            // Per-example candidate set: the target plus the shared draws
            // (minus the target if it was drawn), so the target appears once.
            let mut items = Vec::with_capacity(shared.len() + 1);
            items.push(anchor.target);
            items.extend(shared.iter().copied().filter(|&i| i != anchor.target));
            let cand_scores: Vec<f64> = items
                .iter()
                .map(|&i| item_score(params, i, &z_a.vector))
                .collect();
            let (loss, grad) = objectives::sce_loss_grad(&cand_scores, 0)?;
            let sparse: Vec<(ItemId, f64)> = items.into_iter().zip(grad).collect();
            let mut dz = Array1::zeros(params.config.dim);
            for &(item, g) in &sparse {
                dz.scaled_add(g, &params.item_embeddings.row(item as usize));
            }
            (loss, ScoreGrad::Sparse(sparse), dz)
        }
    };
    debug_assert!(anchor.target >= 1 && anchor.target <= catalog);

    let (z_b, cache_b) = if let Some(pairs) = &plan.pairs {
        let dropout_b = DropoutCtx {
            view: 1,
            ..dropout_a
        };
        let (z, cache) = encode_train(params, &pairs[slot].prefix, Some(&dropout_b))?;
        (Some(z.vector), Some(cache))
    } else {
        (None, None)
    };

    Ok(ExampleForward {
        z_a: z_a.vector,
        cache_a,
        pred_loss,
        score_grad,
        dz_pred,
        z_b,
        cache_b,
    })
}

/// Loss and gradients for one batch. The forward fan-out is parallel per
/// example; the redundancy term couples the batch and is computed once; the
/// backward fan-out accumulates into fixed-size chunks reduced in order.
fn batch_step(
    params: &Parameters,
    cfg: &TrainConfig,
    plan: &BatchPlan,
) -> Result<(LossBundle, Parameters)> {
    let batch = plan.anchors.len();
    let dim = params.config.dim;

    let forwards: Vec<ExampleForward> = (0..batch)
        .into_par_iter()
        .map(|slot| forward_one(params, cfg, plan, slot))
        .collect::<Result<_>>()?;

    let pred_mean = forwards.iter().map(|f| f.pred_loss).sum::<f64>() / batch as f64;

    let (bt_value, d_view_a, d_view_b) = if plan.pairs.is_some() {
        let mut z_a = Array2::zeros((batch, dim));
        let mut z_b = Array2::zeros((batch, dim));
        for (slot, f) in forwards.iter().enumerate() {
            z_a.row_mut(slot).assign(&f.z_a);
            z_b.row_mut(slot)
                .assign(f.z_b.as_ref().expect("paired forward"));
        }
        let views = ViewBatch::new(z_a, z_b)?;
        let (value, da, db) = objectives::bt_loss_grad(&views, cfg.lambda, cfg.bt_row_normalize);
        (value, Some(da), Some(db))
    } else {
        (0.0, None, None)
    };

    let bundle = objectives::total_loss(pred_mean, bt_value, cfg.alpha, cfg.lambda);
    if !bundle.total.is_finite() {
        return Err(Error::Numerical {
            tensor: "loss".into(),
        });
    }

    let inv_batch = 1.0 / batch as f64;
    let chunk_grads: Vec<Parameters> = forwards
        .par_chunks(ACCUM_CHUNK)
        .enumerate()
        .map(|(chunk_idx, chunk)| -> Result<Parameters> {
            let mut grads = params.zeros_like();
            for (within, fw) in chunk.iter().enumerate() {
                let slot = chunk_idx * ACCUM_CHUNK + within;
                // Scoring path: dE_i += (g_i / B) z, dz += (g_i / B) e_i.
                match &fw.score_grad {
                    ScoreGrad::Dense(g) => {
                        for (idx, &gi) in g.iter().enumerate() {
                            grads
                                .item_embeddings
                                .row_mut(idx + 1)
                                .scaled_add(gi * inv_batch, &fw.z_a);
                        }
                    }
                    ScoreGrad::Sparse(pairs) => {
                        for &(item, gi) in pairs {
                            grads
                                .item_embeddings
                                .row_mut(item as usize)
                                .scaled_add(gi * inv_batch, &fw.z_a);
                        }
                    }
                }
                let mut dz = &fw.dz_pred * inv_batch;
                if let Some(da) = &d_view_a {
                    dz.scaled_add(cfg.alpha, &da.row(slot));
                }
                backward(params, &fw.cache_a, dz.view(), &mut grads)?;
                if let (Some(db), Some(cache_b)) = (&d_view_b, &fw.cache_b) {
                    let dzb = &db.row(slot) * cfg.alpha;
                    backward(params, cache_b, dzb.view(), &mut grads)?;
                }
            }
            Ok(grads)
        })
        .collect::<Result<_>>()?;

    let mut grads = params.zeros_like();
    for chunk in &chunk_grads {
        grads.add_assign(chunk);
    }
    Ok((bundle, grads))
}

/// Loss value only, on the identical computation path as [`batch_step`].
/// Restricted to dropout-free configs, where the training forward equals the
/// inference forward.
fn batch_loss_value(params: &Parameters, cfg: &TrainConfig, plan: &BatchPlan) -> Result<LossBundle> {
    assert!(
        cfg.dropout == 0.0,
        "value-only evaluation requires dropout = 0"
    );
    let batch = plan.anchors.len();
    let dim = params.config.dim;
    let mut pred_sum = 0.0;
    let mut z_a = Array2::zeros((batch, dim));
    let mut z_b = Array2::zeros((batch, dim));
    for slot in 0..batch {
        let anchor = plan.anchors[slot];
        let z = crate::encoder::encode(params, &anchor.prefix)?;
        pred_sum += match cfg.loss_kind {
            LossKind::Ce => {
                let scores = score_all(params, &z);
                objectives::ce_loss(&scores, anchor.target)
            }
            LossKind::Bce => {
                let negatives = &plan.negatives.as_ref().expect("bce plan")[slot];
                let pos = item_score(params, anchor.target, &z.vector);
                let negs: Vec<f64> = negatives
                    .iter()
                    .map(|&j| item_score(params, j, &z.vector))
                    .collect();
                objectives::bce_loss(pos, &negs)
            }
            LossKind::Sce => {
                let shared = plan.shared_candidates.as_ref().expect("sce plan");
                let mut items = Vec::with_capacity(shared.len() + 1);
                items.push(anchor.target);
                items.extend(shared.iter().copied().filter(|&i| i != anchor.target));
                let scores: Vec<f64> = items
                    .iter()
                    .map(|&i| item_score(params, i, &z.vector))
                    .collect();
                objectives::sce_loss(&scores, 0)?
            }
        };
        z_a.row_mut(slot).assign(&z.vector);
        if let Some(pairs) = &plan.pairs {
            let zp = crate::encoder::encode(params, &pairs[slot].prefix)?;
            z_b.row_mut(slot).assign(&zp.vector);
        }
    }
    let pred_mean = pred_sum / batch as f64;
    let bt_value = if plan.pairs.is_some() {
        let views = ViewBatch::new(z_a, z_b)?;
        objectives::bt_loss(
            &objectives::cross_correlation(&views, cfg.bt_row_normalize),
            cfg.lambda,
        )
    } else {
        0.0
    };
    Ok(objectives::total_loss(pred_mean, bt_value, cfg.alpha, cfg.lambda))
}

fn build_plan<'a>(
    cfg: &TrainConfig,
    bundle: &'a DatasetBundle,
    index: Option<&TargetIndex>,
    batch_indices: &[usize],
    epoch: usize,
    batch_idx: usize,
    neg_rng: &mut rand_chacha::ChaCha8Rng,
    cand_rng: &mut rand_chacha::ChaCha8Rng,
    pair_rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<BatchPlan<'a>> {
    let anchors: Vec<&TrainingExample> =
        batch_indices.iter().map(|&i| &bundle.examples[i]).collect();

    let negatives = if cfg.loss_kind == LossKind::Bce {
        let mut per_example = Vec::with_capacity(anchors.len());
        for anchor in &anchors {
            let set = objectives::sample_negatives(
                anchor.real_prefix(),
                anchor.target,
                bundle.num_items,
                cfg.bce_m,
                neg_rng,
            )?;
            per_example.push(set.items);
        }
        Some(per_example)
    } else {
        None
    };

    let shared_candidates = if cfg.loss_kind == LossKind::Sce {
        let k_eff = cfg.sce_k.min(bundle.num_items as usize - 1);
        let drawn = rand::seq::index::sample(cand_rng, bundle.num_items as usize, k_eff);
        Some(drawn.into_iter().map(|i| i as ItemId + 1).collect())
    } else {
        None
    };

    // The redundancy loss needs at least two rows; undersized tail batches
    // train on the prediction loss alone.
    let pairs = match index {
        Some(index) if batch_indices.len() >= 2 => {
            let mut pair_refs = Vec::with_capacity(batch_indices.len());
            for &anchor_idx in batch_indices {
                let pair_idx = index.sample_pair(anchor_idx, pair_rng)?;
                pair_refs.push(&bundle.examples[pair_idx]);
            }
            Some(pair_refs)
        }
        _ => None,
    };

    Ok(BatchPlan {
        anchors,
        pairs,
        negatives,
        shared_candidates,
        epoch: epoch as u64,
        batch: batch_idx as u64,
    })
}

fn validation_ndcg10(params: &Parameters, bundle: &DatasetBundle) -> Result<f64> {
    let users: Vec<(UserId, &[ItemId])> = bundle
        .heldout
        .iter()
        .map(|(&u, h)| (u, h.val_history.as_slice()))
        .collect();
    let (ranked, _) = evaluator::rank(params, &users, 10, false);
    if ranked.is_empty() {
        log::warn!("no validation user has a usable history; reporting ndcg@10 = 0");
        return Ok(0.0);
    }
    let truth: BTreeMap<UserId, ItemId> = bundle
        .heldout
        .iter()
        .map(|(&u, h)| (u, h.validation))
        .collect();
    evaluator::ndcg_at(&ranked, &truth, 10)
}

pub fn train(cfg: &TrainConfig, bundle: &DatasetBundle) -> Result<TrainOutcome> {
    train_with_options(cfg, bundle, TrainOptions::default())
}

pub fn train_with_options(
    cfg: &TrainConfig,
    bundle: &DatasetBundle,
    options: TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.max_len != bundle.source.max_len {
        return Err(Error::Config(format!(
            "max_len {} does not match the bundle's materialized length {}",
            cfg.max_len, bundle.source.max_len
        )));
    }
    if bundle.examples.is_empty() {
        return Err(Error::InvalidInput("no training examples in bundle".into()));
    }
    if bundle.heldout.is_empty() {
        return Err(Error::InvalidInput("no validation users in bundle".into()));
    }
    let model_cfg = cfg.model_config(bundle.num_items);
    model_cfg.validate()?;

    let bt_in_play = cfg.alpha > 0.0 && !options.disable_bt;
    let index = bt_in_play.then(|| pairing::build_index(&bundle.examples));

    let mut params = Parameters::init(model_cfg, cfg.seed);
    let mut adam = Adam::new(&params, cfg.lr, cfg.weight_decay);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, Parameters)> = None;

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..bundle.examples.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, &[epoch as u64]));
        let mut neg_rng = stream(cfg.seed, Purpose::Negatives, &[epoch as u64]);
        let mut cand_rng = stream(cfg.seed, Purpose::Candidates, &[epoch as u64]);
        let mut pair_rng = stream(cfg.seed, Purpose::Pairing, &[epoch as u64]);

        let mut pred_sum = 0.0;
        let mut bt_sum = 0.0;
        let mut total_sum = 0.0;
        let mut seen = 0usize;
        for (batch_idx, batch_indices) in order.chunks(cfg.batch_size).enumerate() {
            if batch_indices.is_empty() {
                log::warn!("epoch {epoch} batch {batch_idx}: empty batch skipped");
                continue;
            }
            let plan = build_plan(
                cfg,
                bundle,
                index.as_ref(),
                batch_indices,
                epoch,
                batch_idx,
                &mut neg_rng,
                &mut cand_rng,
                &mut pair_rng,
            )?;
            let (losses, grads) = batch_step(&params, cfg, &plan).map_err(|e| Error::Train {
                epoch,
                batch: batch_idx,
                message: e.to_string(),
            })?;
            adam.step(&mut params, &grads);
            let w = batch_indices.len() as f64;
            pred_sum += losses.pred * w;
            bt_sum += losses.bt * w;
            total_sum += losses.total * w;
            seen += batch_indices.len();
        }
        debug_assert!(params.item_embeddings.row(0).iter().all(|&v| v == 0.0));

        let val = validation_ndcg10(&params, bundle)?;
        let row = EpochRow {
            epoch,
            pred_loss: pred_sum / seen as f64,
            bt_loss: bt_sum / seen as f64,
            total_loss: total_sum / seen as f64,
            val_ndcg10: val,
            wall_s: t0.elapsed().as_secs_f64(),
        };
        if !row.pred_loss.is_finite() || !row.total_loss.is_finite() {
            return Err(Error::Train {
                epoch,
                batch: 0,
                message: "non-finite epoch loss".into(),
            });
        }
        log.rows.push(row);
        if best.as_ref().map_or(true, |(b, _, _)| val > *b) {
            best = Some((val, epoch, params.clone()));
        }
    }

    let (best_val, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            seed: cfg.seed,
            params: best_params,
        },
        best_epoch,
        best_val_ndcg10: best_val,
        log,
    })
}

/// Per-tensor result of one finite-difference comparison.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub loss_kind: LossKind,
    pub alpha: f64,
    pub lambda: f64,
    pub max_rel_err: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

/// Relative error with a floor that absorbs finite-difference noise on
/// near-zero gradients.
fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6)
}

/// Compares analytic gradients of the total loss against central finite
/// differences (step 1e-5) for every element of every parameter tensor, for
/// each prediction loss in turn. Failures are reported, never thrown.
///
/// Restricted to toy sizes: a 20-item catalog is built internally and the
/// config must keep dim <= 8.
pub fn gradcheck(cfg: &TrainConfig) -> Result<Vec<GradCheckReport>> {
    if cfg.dim > 8 {
        return Err(Error::Config(
            "gradcheck is a toy-scale tool: dim must be <= 8".into(),
        ));
    }
    let mut toy = cfg.clone();
    toy.dropout = 0.0; // keep every unit in-circuit so all tensors are probed
    toy.max_len = toy.max_len.min(8);
    toy.validate()?;

    const CATALOG: u32 = 20;
    let model_cfg = toy.model_config(CATALOG);
    model_cfg.validate()?;
    let params = Parameters::init(model_cfg, toy.seed);

    // Four anchors with shared targets so pairing draws real cross-pairs.
    let mut mk_rng = stream(toy.seed, Purpose::Synthetic, &[0xC0FFEE]);
    use rand::Rng;
    let targets: [ItemId; 4] = [3, 3, 7, 7];
    let examples: Vec<TrainingExample> = targets
        .iter()
        .map(|&target| {
            let len = mk_rng.gen_range(2..=toy.max_len.min(5));
            let prefix: Vec<ItemId> = (0..len)
                .map(|_| mk_rng.gen_range(1..=CATALOG))
                .collect();
            TrainingExample { prefix, target }
        })
        .collect();
    let index = pairing::build_index(&examples);
    let mut pair_rng = stream(toy.seed, Purpose::Pairing, &[1]);
    let pair_indices: Vec<usize> = (0..examples.len())
        .map(|a| index.sample_pair(a, &mut pair_rng))
        .collect::<Result<_>>()?;

    let mut neg_rng = stream(toy.seed, Purpose::Negatives, &[1]);
    let negatives: Vec<Vec<ItemId>> = examples
        .iter()
        .map(|e| {
            objectives::sample_negatives(e.real_prefix(), e.target, CATALOG, toy.bce_m, &mut neg_rng)
                .map(|s| s.items)
        })
        .collect::<Result<_>>()?;
    let mut cand_rng = stream(toy.seed, Purpose::Candidates, &[1]);
    let k_eff = toy.sce_k.min(CATALOG as usize - 1);
    let shared: Vec<ItemId> = rand::seq::index::sample(&mut cand_rng, CATALOG as usize, k_eff)
        .into_iter()
        .map(|i| i as ItemId + 1)
        .collect();

    let bt_active = toy.alpha > 0.0;
    let mut reports = Vec::new();
    for loss_kind in [LossKind::Bce, LossKind::Ce, LossKind::Sce] {
        let mut run_cfg = toy.clone();
        run_cfg.loss_kind = loss_kind;
        let plan = BatchPlan {
            anchors: examples.iter().collect(),
            pairs: bt_active.then(|| pair_indices.iter().map(|&i| &examples[i]).collect()),
            negatives: (loss_kind == LossKind::Bce).then(|| negatives.clone()),
            shared_candidates: (loss_kind == LossKind::Sce).then(|| shared.clone()),
            epoch: 1,
            batch: 0,
        };

        let (_, grads) = batch_step(&params, &run_cfg, &plan)?;
        let analytic: Vec<(String, Vec<f64>)> = grads
            .tensors()
            .into_iter()
            .map(|(n, s)| (n, s.to_vec()))
            .collect();

        let mut scratch = params.clone();
        let h = 1e-5;
        let mut entries = Vec::with_capacity(analytic.len());
        let mut overall: f64 = 0.0;
        for (ti, (name, values)) in analytic.iter().enumerate() {
            let mut tensor_rel: f64 = 0.0;
            let mut tensor_abs: f64 = 0.0;
            for idx in 0..values.len() {
                let orig = scratch.tensors()[ti].1[idx];
                scratch.tensors_mut()[ti].1[idx] = orig + h;
                let up = batch_loss_value(&scratch, &run_cfg, &plan)?.total;
                scratch.tensors_mut()[ti].1[idx] = orig - h;
                let down = batch_loss_value(&scratch, &run_cfg, &plan)?.total;
                scratch.tensors_mut()[ti].1[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = values[idx];
                tensor_rel = tensor_rel.max(rel_err(a, fd));
                tensor_abs = tensor_abs.max((a - fd).abs());
            }
            overall = overall.max(tensor_rel);
            entries.push(GradCheckEntry {
                tensor: name.clone(),
                max_rel_err: tensor_rel,
                max_abs_err: tensor_abs,
            });
        }
        reports.push(GradCheckReport {
            loss_kind,
            alpha: run_cfg.alpha,
            lambda: run_cfg.lambda,
            max_rel_err: overall,
            entries,
        });
    }
    Ok(reports)
}
