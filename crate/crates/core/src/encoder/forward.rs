//! Forward pass and exact reverse-mode backward pass.
//!
//! Prefixes arrive left-padded; the pass strips the padding and runs on the
//! real items only, with positional rows assigned from the start of the kept
//! window. Padding therefore never influences the output, and the padding
//! embedding row never receives gradient.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use crate::rng::unit_at;
use crate::{Error, ItemId, Result, PADDING_ID};

use super::{Parameters, SequenceEmbedding};

const LN_EPS: f64 = 1e-8;

const SITE_EMBED: u64 = 0;
const SITE_ATTN: u64 = 1;
const SITE_FFN: u64 = 2;
/// Layer coordinate for the embedding dropout site, outside any block.
const EMBED_LAYER: u64 = u64::MAX;

/// Coordinates identifying one example's dropout masks. Masks are a pure
/// function of (seed, epoch, batch, slot, view, layer, site, element), so a
/// replayed run regenerates them exactly regardless of execution order.
#[derive(Debug, Clone, Copy)]
pub struct DropoutCtx {
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
    pub slot: u64,
    pub view: u64,
    pub rate: f64,
}

impl DropoutCtx {
    /// Keep/scale factors for a (rows x cols) activation at the given site.
    fn mask(&self, layer: u64, site: u64, rows: usize, cols: usize) -> Array2<f64> {
        let keep_scale = 1.0 / (1.0 - self.rate);
        Array2::from_shape_fn((rows, cols), |(r, c)| {
            let u = unit_at(
                self.seed,
                &[
                    self.epoch,
                    self.batch,
                    self.slot,
                    self.view,
                    layer,
                    site,
                    (r * cols + c) as u64,
                ],
            );
            if u < self.rate {
                0.0
            } else {
                keep_scale
            }
        })
    }
}

struct BlockCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn_weights: Vec<Array2<f64>>,
    attn_concat: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    ln1_xhat: Array2<f64>,
    ln1_inv_std: Array1<f64>,
    h1: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_hidden: Array2<f64>,
    ffn_mask: Option<Array2<f64>>,
    ln2_xhat: Array2<f64>,
    ln2_inv_std: Array1<f64>,
}

/// Everything the backward pass needs about one recorded forward pass.
pub struct ForwardCache {
    ids: Vec<ItemId>,
    emb_mask: Option<Array2<f64>>,
    blocks: Vec<BlockCache>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Final per-position outputs of block `l` (testing hook for causality).
    pub fn block_output_rows(&self, l: usize) -> &Array2<f64> {
        // ln2_xhat scaled by gain+bias is the block output; input of the next
        // block equals it, so expose that where possible.
        if l + 1 < self.blocks.len() {
            &self.blocks[l + 1].input
        } else {
            panic!("block_output_rows only available for non-final blocks")
        }
    }
}

fn strip_padding(params: &Parameters, prefix: &[ItemId]) -> Result<Vec<ItemId>> {
    if prefix.len() > params.config.max_len {
        return Err(Error::InvalidInput(format!(
            "prefix length {} exceeds max_len {}",
            prefix.len(),
            params.config.max_len
        )));
    }
    let start = match prefix.iter().position(|&i| i != PADDING_ID) {
        Some(p) => p,
        None => {
            return Err(Error::InvalidInput(
                "prefix contains only padding ids".into(),
            ))
        }
    };
    let ids = &prefix[start..];
    for &id in ids {
        if id == PADDING_ID {
            return Err(Error::InvalidInput(
                "padding id inside the real prefix".into(),
            ));
        }
        if id > params.config.num_items {
            return Err(Error::IndexOutOfRange(format!(
                "item id {id} exceeds catalog size {}",
                params.config.num_items
            )));
        }
    }
    Ok(ids.to_vec())
}

/// y = gain * (x - mean) / sqrt(var + eps) + bias, row-wise over features.
fn layer_norm(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dim = x.ncols() as f64;
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut out = Array2::zeros(x.raw_dim());
    let mut inv_std = Array1::zeros(x.nrows());
    for (r, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / dim;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / dim;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for (c, &v) in row.iter().enumerate() {
            let h = (v - mean) * is;
            xhat[[r, c]] = h;
            out[[r, c]] = gain[c] * h + bias[c];
        }
    }
    (out, xhat, inv_std)
}

fn layer_norm_backward(
    d_out: &Array2<f64>,
    xhat: &Array2<f64>,
    inv_std: &Array1<f64>,
    gain: &Array1<f64>,
    d_gain: &mut Array1<f64>,
    d_bias: &mut Array1<f64>,
) -> Array2<f64> {
    let dim = d_out.ncols() as f64;
    let mut d_in = Array2::zeros(d_out.raw_dim());
    for r in 0..d_out.nrows() {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d_out.ncols() {
            let dy = d_out[[r, c]];
            let dxhat = dy * gain[c];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat[[r, c]];
            d_gain[c] += dy * xhat[[r, c]];
            d_bias[c] += dy;
        }
        mean_dxhat /= dim;
        mean_dxhat_xhat /= dim;
        for c in 0..d_out.ncols() {
            let dxhat = d_out[[r, c]] * gain[c];
            d_in[[r, c]] = inv_std[r] * (dxhat - mean_dxhat - xhat[[r, c]] * mean_dxhat_xhat);
        }
    }
    d_in
}

fn check_finite(tensor: &Array2<f64>, name: impl Fn() -> String) -> Result<()> {
    if tensor.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical { tensor: name() });
    }
    Ok(())
}

fn run_forward(
    params: &Parameters,
    prefix: &[ItemId],
    dropout: Option<&DropoutCtx>,
    want_cache: bool,
) -> Result<(SequenceEmbedding, Option<ForwardCache>)> {
    let ids = strip_padding(params, prefix)?;
    let len = ids.len();
    let dim = params.config.dim;
    let heads = params.config.heads;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let dropout = dropout.filter(|c| c.rate > 0.0);

    // Item embedding + positional embedding for the kept window.
    let mut x = Array2::zeros((len, dim));
    for (t, &id) in ids.iter().enumerate() {
        let e = params.item_embeddings.row(id as usize);
        let p = params.positions.row(t);
        for c in 0..dim {
            x[[t, c]] = e[c] + p[c];
        }
    }
    let emb_mask = dropout.map(|ctx| ctx.mask(EMBED_LAYER, SITE_EMBED, len, dim));
    if let Some(mask) = &emb_mask {
        x *= mask;
    }

    let mut blocks = Vec::with_capacity(if want_cache { params.blocks.len() } else { 0 });

    for (l, bp) in params.blocks.iter().enumerate() {
        let input = x;
        let q = input.dot(&bp.attn_query);
        let k = input.dot(&bp.attn_key);
        let v = input.dot(&bp.attn_value);

        let mut concat = Array2::zeros((len, dim));
        let mut attn_weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let q_h = q.slice(cols);
            let k_h = k.slice(cols);
            let v_h = v.slice(cols);
            let mut scores = q_h.dot(&k_h.t());
            scores *= scale;
            // Causal softmax: position i attends to 0..=i.
            let mut weights = Array2::zeros((len, len));
            for i in 0..len {
                let row = scores.row(i);
                let max = row
                    .slice(s![..=i])
                    .iter()
                    .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let mut sum = 0.0;
                for j in 0..=i {
                    let e = (row[j] - max).exp();
                    weights[[i, j]] = e;
                    sum += e;
                }
                for j in 0..=i {
                    weights[[i, j]] /= sum;
                }
            }
            let o_h = weights.dot(&v_h);
            concat.slice_mut(cols).assign(&o_h);
            attn_weights.push(weights);
        }
        let mut attn_out = concat.dot(&bp.attn_output);
        let attn_mask = dropout.map(|ctx| ctx.mask(l as u64, SITE_ATTN, len, dim));
        if let Some(mask) = &attn_mask {
            attn_out *= mask;
        }

        let resid1 = &input + &attn_out;
        let (h1, ln1_xhat, ln1_inv_std) = layer_norm(&resid1, &bp.ln1_gain, &bp.ln1_bias);

        let ffn_pre = h1.dot(&bp.ffn_w1) + &bp.ffn_b1.view().insert_axis(Axis(0));
        let ffn_hidden = ffn_pre.mapv(|v| v.max(0.0));
        let mut ffn_out = ffn_hidden.dot(&bp.ffn_w2) + &bp.ffn_b2.view().insert_axis(Axis(0));
        let ffn_mask = dropout.map(|ctx| ctx.mask(l as u64, SITE_FFN, len, dim));
        if let Some(mask) = &ffn_mask {
            ffn_out *= mask;
        }

        let resid2 = &h1 + &ffn_out;
        let (out, ln2_xhat, ln2_inv_std) = layer_norm(&resid2, &bp.ln2_gain, &bp.ln2_bias);
        check_finite(&out, || format!("block{l}.output"))?;

        if want_cache {
            blocks.push(BlockCache {
                input,
                q,
                k,
                v,
                attn_weights,
                attn_concat: concat,
                attn_mask,
                ln1_xhat,
                ln1_inv_std,
                h1,
                ffn_pre,
                ffn_hidden,
                ffn_mask,
                ln2_xhat,
                ln2_inv_std,
            });
        }
        x = out;
    }

    let z = SequenceEmbedding {
        vector: x.row(len - 1).to_owned(),
    };
    let cache = if want_cache {
        Some(ForwardCache {
            ids,
            emb_mask,
            blocks,
        })
    } else {
        None
    };
    Ok((z, cache))
}

/// Deterministic inference-mode forward pass (dropout off).
pub fn encode(params: &Parameters, prefix: &[ItemId]) -> Result<SequenceEmbedding> {
    run_forward(params, prefix, None, false).map(|(z, _)| z)
}

/// Training-mode forward pass that records the computation for [`backward`].
pub fn encode_train(
    params: &Parameters,
    prefix: &[ItemId],
    dropout: Option<&DropoutCtx>,
) -> Result<(SequenceEmbedding, ForwardCache)> {
    run_forward(params, prefix, dropout, true).map(|(z, cache)| (z, cache.expect("cache requested")))
}

/// Accumulates exact gradients of a scalar loss into `grads`, given the
/// loss gradient `d_z` at the final-position embedding of a recorded pass.
pub fn backward(
    params: &Parameters,
    cache: &ForwardCache,
    d_z: ArrayView1<f64>,
    grads: &mut Parameters,
) -> Result<()> {
    let len = cache.ids.len();
    let dim = params.config.dim;
    let heads = params.config.heads;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    assert_eq!(d_z.len(), dim, "loss gradient dimension mismatch");
    if d_z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            tensor: "sequence_grad".into(),
        });
    }

    let mut d_x = Array2::zeros((len, dim));
    d_x.row_mut(len - 1).assign(&d_z);

    for (l, (bp, bc)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let gb = &mut grads.blocks[l];

        let d_resid2 = layer_norm_backward(
            &d_x,
            &bc.ln2_xhat,
            &bc.ln2_inv_std,
            &bp.ln2_gain,
            &mut gb.ln2_gain,
            &mut gb.ln2_bias,
        );

        // resid2 = h1 + ffn_out
        let mut d_h1 = d_resid2.clone();
        let mut d_ffn_out = d_resid2;
        if let Some(mask) = &bc.ffn_mask {
            d_ffn_out *= mask;
        }
        gb.ffn_w2 += &bc.ffn_hidden.t().dot(&d_ffn_out);
        gb.ffn_b2 += &d_ffn_out.sum_axis(Axis(0));
        let mut d_pre = d_ffn_out.dot(&bp.ffn_w2.t());
        ndarray::Zip::from(&mut d_pre)
            .and(&bc.ffn_pre)
            .for_each(|d, &pre| {
                if pre <= 0.0 {
                    *d = 0.0;
                }
            });
        gb.ffn_w1 += &bc.h1.t().dot(&d_pre);
        gb.ffn_b1 += &d_pre.sum_axis(Axis(0));
        d_h1 += &d_pre.dot(&bp.ffn_w1.t());

        let d_resid1 = layer_norm_backward(
            &d_h1,
            &bc.ln1_xhat,
            &bc.ln1_inv_std,
            &bp.ln1_gain,
            &mut gb.ln1_gain,
            &mut gb.ln1_bias,
        );

        // resid1 = input + attn_out
        let mut d_x_in = d_resid1.clone();
        let mut d_attn_out = d_resid1;
        if let Some(mask) = &bc.attn_mask {
            d_attn_out *= mask;
        }
        gb.attn_output += &bc.attn_concat.t().dot(&d_attn_out);
        let d_concat = d_attn_out.dot(&bp.attn_output.t());

        let mut d_q = Array2::zeros((len, dim));
        let mut d_k = Array2::zeros((len, dim));
        let mut d_v = Array2::zeros((len, dim));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let d_o_h = d_concat.slice(cols);
            let weights = &bc.attn_weights[h];
            let v_h = bc.v.slice(cols);

            let d_a = d_o_h.dot(&v_h.t());
            {
                let mut dst = d_v.slice_mut(cols);
                dst += &weights.t().dot(&d_o_h);
            }

            // Softmax backward; masked cells have zero weight and stay zero.
            let mut d_s = Array2::zeros((len, len));
            for i in 0..len {
                let mut dot = 0.0;
                for j in 0..=i {
                    dot += d_a[[i, j]] * weights[[i, j]];
                }
                for j in 0..=i {
                    d_s[[i, j]] = weights[[i, j]] * (d_a[[i, j]] - dot) * scale;
                }
            }

            let q_h = bc.q.slice(cols);
            let k_h = bc.k.slice(cols);
            {
                let mut dst = d_q.slice_mut(cols);
                dst += &d_s.dot(&k_h);
            }
            {
                let mut dst = d_k.slice_mut(cols);
                dst += &d_s.t().dot(&q_h);
            }
        }
        gb.attn_query += &bc.input.t().dot(&d_q);
        gb.attn_key += &bc.input.t().dot(&d_k);
        gb.attn_value += &bc.input.t().dot(&d_v);
        d_x_in += &d_q.dot(&bp.attn_query.t());
        d_x_in += &d_k.dot(&bp.attn_key.t());
        d_x_in += &d_v.dot(&bp.attn_value.t());

        d_x = d_x_in;
    }

    if let Some(mask) = &cache.emb_mask {
        d_x *= mask;
    }
    check_finite(&d_x, || "embedding_grad".to_string())?;
    for (t, &id) in cache.ids.iter().enumerate() {
        let src = d_x.row(t);
        let mut e_row = grads.item_embeddings.row_mut(id as usize);
        e_row += &src;
        let mut p_row = grads.positions.row_mut(t);
        p_row += &src;
    }
    Ok(())
}
