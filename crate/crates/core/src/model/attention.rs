use rand::Rng;

use super::mask::MaskMatrix;
use crate::error::{Error, Result};
use crate::numeric::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::tokens::Linear;

/// Projections and post-norm of one multi-head attention sublayer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
}

impl AttentionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        AttentionParams {
            wq: store.add_weight(format!("{name}.wq"), d, d, rng),
            wk: store.add_weight(format!("{name}.wk"), d, d, rng),
            wv: store.add_weight(format!("{name}.wv"), d, d, rng),
            wo: store.add_weight(format!("{name}.wo"), d, d, rng),
            norm_gain: store.add_gain(format!("{name}.norm.gain"), d),
            norm_bias: store.add_bias(format!("{name}.norm.bias"), d),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardParams {
    pub expand: Linear,
    pub contract: Linear,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
}

impl FeedForwardParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, mult: usize, rng: &mut R) -> Self {
        FeedForwardParams {
            expand: Linear::new(store, &format!("{name}.expand"), d, d * mult, rng),
            contract: Linear::new(store, &format!("{name}.contract"), d * mult, d, rng),
            norm_gain: store.add_gain(format!("{name}.norm.gain"), d),
            norm_bias: store.add_bias(format!("{name}.norm.bias"), d),
        }
    }
}

/// One block of one stream: self-attention, cross-attention, feed-forward.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub ff: FeedForwardParams,
}

impl BlockParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, ff_mult: usize, rng: &mut R) -> Self {
        BlockParams {
            self_attn: AttentionParams::new(store, &format!("{name}.self"), d, rng),
            cross_attn: AttentionParams::new(store, &format!("{name}.cross"), d, rng),
            ff: FeedForwardParams::new(store, &format!("{name}.ff"), d, ff_mult, rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    /// Attention weights per head, one row per entry of `query_rows`.
    pub weights: Vec<Var>,
    /// Query rows that had at least one admissible key. The others skip the
    /// attention term and only pass through the residual and norm.
    pub query_rows: Vec<usize>,
}

fn norm(g: &mut Graph, store: &ParamStore, x: Var, gain: ParamId, bias: ParamId) -> Result<Var> {
    let gv = g.param(store, gain);
    let bv = g.param(store, bias);
    g.layer_norm(x, gv, bv)
}

/// `layer_norm(x_q + concat_h(softmax(Q_h K_hᵀ / √d_h + M) V_h) · W^O)`.
pub fn attention_sublayer(
    g: &mut Graph,
    store: &ParamStore,
    x_q: Var,
    x_kv: Var,
    mask: &MaskMatrix,
    params: &AttentionParams,
    heads: usize,
) -> Result<AttentionOutput> {
    let (lq, lk, d) = (g.rows(x_q), g.rows(x_kv), g.cols(x_q));
    if g.cols(x_kv) != d {
        return Err(Error::Shape(format!(
            "attention widths differ: {} vs {}",
            d,
            g.cols(x_kv)
        )));
    }
    if mask.rows() != lq || mask.cols() != lk {
        return Err(Error::Shape(format!(
            "mask is {}x{}, attention is {lq}x{lk}",
            mask.rows(),
            mask.cols()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("{d} columns do not split into {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let query_rows = mask.live_rows();
    let mut weights = Vec::with_capacity(heads);
    let attended = if query_rows.is_empty() {
        g.constant(Tensor::zeros(vec![lq, d]))
    } else {
        let xq_live = if query_rows.len() == lq {
            x_q
        } else {
            g.gather_rows(x_q, &query_rows)?
        };
        let mask_t = mask.tensor_for_rows(&query_rows);
        let (wq, wk, wv, wo) = (
            g.param(store, params.wq),
            g.param(store, params.wk),
            g.param(store, params.wv),
            g.param(store, params.wo),
        );
        let q = g.matmul(xq_live, wq)?;
        let k = g.matmul(x_kv, wk)?;
        let v = g.matmul(x_kv, wv)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let logits = g.matmul_bt(qh, kh)?;
            let logits = g.scale(logits, scale);
            let a = g.masked_softmax(logits, &mask_t)?;
            weights.push(a);
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let projected = g.matmul(cat, wo)?;
        if query_rows.len() == lq {
            projected
        } else {
            g.scatter_rows(projected, &query_rows, lq)?
        }
    };
    let residual = g.add(x_q, attended)?;
    let out = norm(g, store, residual, params.norm_gain, params.norm_bias)?;
    Ok(AttentionOutput {
        out,
        weights,
        query_rows,
    })
}

/// `layer_norm(x + W₂ gelu(W₁ x + b₁) + b₂)`.
pub fn feed_forward(g: &mut Graph, store: &ParamStore, x: Var, params: &FeedForwardParams) -> Result<Var> {
    let h = params.expand.forward(g, store, x)?;
    let h = g.gelu(h);
    let y = params.contract.forward(g, store, h)?;
    let residual = g.add(x, y)?;
    norm(g, store, residual, params.norm_gain, params.norm_bias)
}
