//! Sparse query projection and cached-bias output projection.
//!
//! Query generation is projection → RMSNorm → RoPE, all token-local, so a
//! Dispatch step can drop every query row whose block will be served from
//! cache. The output projection is linear in each head's tile and the
//! forecast is linear in the cached difference stack, so the cached heads'
//! share of `Σ_h O^h W^h` can be projected once per Update step (one matrix
//! per difference order) and forecast directly in output space.

use serde::{Deserialize, Serialize};

use crate::attention::{check_elapsed, forecast_stack, FeatureCache};
use crate::error::{OmniError, Result};
use crate::symbols::SymbolBuffer;
use crate::tensor::{matmul, rms_norm_in_place, rope_in_place, row_matmul_into, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Update,
    Dispatch,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Update => "update",
            Phase::Dispatch => "dispatch",
        }
    }
}

/// Projects one token and applies the token-local norm and rotary encoding.
fn project_token(
    x_row: &[f32],
    w: &Matrix,
    norm: Option<&[f32]>,
    eps: f32,
    position: usize,
    out: &mut [f32],
) -> Result<()> {
    row_matmul_into(x_row, w, out);
    if let Some(weight) = norm {
        rms_norm_in_place(out, weight, eps);
        rope_in_place(out, position)?;
    }
    Ok(())
}

/// Dense `rope(rmsnorm(x · w))` for every token, or plain `x · w` when `norm` is `None`.
pub fn project_dense(x: &Matrix, w: &Matrix, norm: Option<&[f32]>, eps: f32) -> Result<Matrix> {
    if x.cols() != w.rows() {
        return Err(OmniError::Shape(format!(
            "projection {:?} by {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let mut out = Matrix::zeros(x.rows(), w.cols());
    for t in 0..x.rows() {
        project_token(x.row(t), w, norm, eps, t, out.row_mut(t))?;
    }
    Ok(out)
}

/// Query projection for every head.
///
/// In the Update phase every row is computed. In the Dispatch phase rows of
/// blocks whose cache bit is 0 are left at `placeholder`. Returns the
/// per-head queries and the multiply-accumulate count.
#[allow(clippy::too_many_arguments)]
pub fn gemm_q(
    x: &Matrix,
    w_q: &[Matrix],
    q_norm: &[Vec<f32>],
    eps: f32,
    symbols: &[SymbolBuffer],
    phase: Phase,
    b_q: usize,
    placeholder: f32,
) -> Result<(Vec<Matrix>, u64)> {
    if q_norm.len() != w_q.len() || (phase == Phase::Dispatch && symbols.len() != w_q.len()) {
        return Err(OmniError::Shape(format!(
            "{} query weights, {} norms, {} symbol buffers",
            w_q.len(),
            q_norm.len(),
            symbols.len()
        )));
    }
    let n = x.rows();
    let t_q = n.div_ceil(b_q);
    let mut macs = 0u64;
    let mut heads = Vec::with_capacity(w_q.len());
    for (h, w) in w_q.iter().enumerate() {
        if x.cols() != w.rows() {
            return Err(OmniError::Shape(format!(
                "x {:?} by w_q[{h}] {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let mut q = Matrix::filled(n, w.cols(), placeholder);
        let per_row = (w.rows() * w.cols()) as u64;
        for block in 0..t_q {
            if phase == Phase::Dispatch && !symbols[h].cache_bit(block)? {
                continue;
            }
            let start = block * b_q;
            let end = (start + b_q).min(n);
            for t in start..end {
                project_token(x.row(t), w, Some(&q_norm[h]), eps, t, q.row_mut(t))?;
            }
            macs += per_row * (end - start) as u64;
        }
        heads.push(q);
    }
    Ok((heads, macs))
}

/// Output-space forecast stack for one query block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockBias {
    /// `bias_stack[d] = Σ_{h cached} Δ^d O^h · W_out^h`; empty when no head is cached.
    pub bias_stack: Vec<Matrix>,
    /// Heads computed by attention at Dispatch steps.
    pub active_heads: Vec<bool>,
}

impl BlockBias {
    pub fn active_count(&self) -> usize {
        self.active_heads.iter().filter(|a| **a).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CachedBias {
    pub blocks: Vec<BlockBias>,
    pub b_q: usize,
    pub d_model: usize,
}

/// Multiply-accumulate counts for the output projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmOCounters {
    /// Projection MACs of the step output.
    pub out_macs: u64,
    /// Extra MACs projecting difference orders ≥ 1 into the bias.
    pub bias_macs: u64,
    /// Scalar multiply-adds combining bias orders at Dispatch.
    pub combine_ops: u64,
}

fn check_output_shapes(o_heads: &[Matrix], w_out: &[Matrix], symbols: &[SymbolBuffer]) -> Result<(usize, usize)> {
    if o_heads.len() != w_out.len() || symbols.len() != w_out.len() || w_out.is_empty() {
        return Err(OmniError::Shape(format!(
            "{} head outputs, {} output weights, {} symbol buffers",
            o_heads.len(),
            w_out.len(),
            symbols.len()
        )));
    }
    let n = o_heads[0].rows();
    let d_model = w_out[0].cols();
    for (o, w) in o_heads.iter().zip(w_out) {
        if o.rows() != n || o.cols() != w.rows() || w.cols() != d_model {
            return Err(OmniError::Shape(format!(
                "head output {:?} with weight {:?}",
                o.shape(),
                w.shape()
            )));
        }
    }
    Ok((n, d_model))
}

fn active_heads(symbols: &[SymbolBuffer], block: usize) -> Result<Vec<bool>> {
    symbols.iter().map(|s| s.cache_bit(block)).collect()
}

/// `out += tile · w`.
fn accumulate_projection(out: &mut Matrix, tile: &Matrix, w: &Matrix) -> Result<()> {
    out.axpy(1.0, &matmul(tile, w)?);
    Ok(())
}

/// Update-step output projection.
///
/// Stage one projects the difference stacks of heads that the next symbols
/// mark as cached into per-block bias stacks. Stage two adds the remaining
/// heads, so the returned output covers every head for the current step.
/// `cache` must already hold this step's outputs.
pub fn gemm_o_update(
    o_heads: &[Matrix],
    w_out: &[Matrix],
    s_c_next: &[SymbolBuffer],
    cache: &FeatureCache,
    b_q: usize,
) -> Result<(Matrix, CachedBias, GemmOCounters)> {
    let (n, d_model) = check_output_shapes(o_heads, w_out, s_c_next)?;
    let t_q = n.div_ceil(b_q);
    if cache.heads() != w_out.len() || cache.blocks() != t_q {
        return Err(OmniError::Shape(format!(
            "cache is {}x{}, expected {}x{t_q}",
            cache.heads(),
            cache.blocks(),
            w_out.len()
        )));
    }

    let per_block = |i: usize| -> Result<(Matrix, BlockBias, GemmOCounters)> {
        let start = i * b_q;
        let end = (start + b_q).min(n);
        let rows = end - start;
        let active = active_heads(s_c_next, i)?;
        let mut counters = GemmOCounters::default();

        let mut bias_stack: Vec<Matrix> = Vec::new();
        for (h, _) in active.iter().enumerate().filter(|(_, a)| !**a) {
            let entry = cache.entry(h, i);
            if !entry.is_warm() {
                return Err(OmniError::State(format!("head {h} block {i} is cached but cold")));
            }
            let macs = (rows * w_out[h].rows() * d_model) as u64;
            for (d, diff) in entry.diff_stack().iter().enumerate() {
                if bias_stack.len() <= d {
                    bias_stack.push(Matrix::zeros(rows, d_model));
                }
                accumulate_projection(&mut bias_stack[d], diff, &w_out[h])?;
                if d == 0 {
                    counters.out_macs += macs;
                } else {
                    counters.bias_macs += macs;
                }
            }
        }

        let mut out = bias_stack
            .first()
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(rows, d_model));
        for (h, _) in active.iter().enumerate().filter(|(_, a)| **a) {
            accumulate_projection(&mut out, &o_heads[h].slice_rows(start, end), &w_out[h])?;
            counters.out_macs += (rows * w_out[h].rows() * d_model) as u64;
        }
        Ok((
            out,
            BlockBias {
                bias_stack,
                active_heads: active,
            },
            counters,
        ))
    };

    let results = crate::par::map_range(t_q, per_block);
    let mut out = Matrix::zeros(n, d_model);
    let mut blocks = Vec::with_capacity(t_q);
    let mut counters = GemmOCounters::default();
    for (i, r) in results.into_iter().enumerate() {
        let (tile, bias, c) = r?;
        out.write_rows(i * b_q, &tile);
        blocks.push(bias);
        counters.out_macs += c.out_macs;
        counters.bias_macs += c.bias_macs;
    }
    Ok((out, CachedBias { blocks, b_q, d_model }, counters))
}

/// Dispatch-step output projection: forecast bias plus the active heads.
///
/// Only rows of heads in each block's active set are read from `o_heads`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_o_dispatch(
    o_heads: &[Matrix],
    w_out: &[Matrix],
    s_c: &[SymbolBuffer],
    bias: &CachedBias,
    elapsed_k: usize,
    interval_n: usize,
    order_d: usize,
) -> Result<(Matrix, GemmOCounters)> {
    let (n, d_model) = check_output_shapes(o_heads, w_out, s_c)?;
    check_elapsed(elapsed_k, interval_n)?;
    let b_q = bias.b_q;
    let t_q = n.div_ceil(b_q);
    if bias.blocks.len() != t_q || bias.d_model != d_model {
        return Err(OmniError::State(format!(
            "cached bias covers {} blocks of width {}, need {t_q} of width {d_model}",
            bias.blocks.len(),
            bias.d_model
        )));
    }

    let per_block = |i: usize| -> Result<(Matrix, GemmOCounters)> {
        let start = i * b_q;
        let end = (start + b_q).min(n);
        let rows = end - start;
        let block = &bias.blocks[i];
        let active = active_heads(s_c, i)?;
        if active != block.active_heads {
            return Err(OmniError::State(format!(
                "block {i}: cache symbols differ from those the bias was built with"
            )));
        }
        let mut counters = GemmOCounters::default();
        let mut out = if block.bias_stack.is_empty() {
            Matrix::zeros(rows, d_model)
        } else {
            let used = order_d.min(block.bias_stack.len() - 1);
            counters.combine_ops = (used * rows * d_model) as u64;
            forecast_stack(&block.bias_stack, elapsed_k, interval_n, order_d)
        };
        for (h, _) in active.iter().enumerate().filter(|(_, a)| **a) {
            accumulate_projection(&mut out, &o_heads[h].slice_rows(start, end), &w_out[h])?;
            counters.out_macs += (rows * w_out[h].rows() * d_model) as u64;
        }
        Ok((out, counters))
    };

    let results = crate::par::map_range(t_q, per_block);
    let mut out = Matrix::zeros(n, d_model);
    let mut counters = GemmOCounters::default();
    for (i, r) in results.into_iter().enumerate() {
        let (tile, c) = r?;
        out.write_rows(i * b_q, &tile);
        counters.out_macs += c.out_macs;
        counters.combine_ops += c.combine_ops;
    }
    Ok((out, counters))
}
