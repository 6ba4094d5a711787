//! Brute-force references for the sparse paths.
//!
//! These deliberately take the long way round (full token-level score
//! matrices, `f64` softmax, per-head materialization) so they share no code
//! path with the tiled engine they are compared against.

use crate::attention::{op_reuse, FeatureCache};
use crate::error::{OmniError, Result};
use crate::symbols::{LogicalCacheMask, LogicalSkipMask};
use crate::tensor::{matmul, Matrix};

/// Attention of every active query block over exactly its non-skipped key blocks.
///
/// Returns one entry per query block; cached blocks map to `None`.
pub fn masked_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cache: &LogicalCacheMask,
    skip: &LogicalSkipMask,
    b_q: usize,
    b_k: usize,
) -> Vec<Option<Matrix>> {
    let n = q.rows();
    let d = q.cols();
    let scale = 1.0 / (d as f64).sqrt();
    (0..cache.len())
        .map(|i| {
            if !cache.get(i) {
                return None;
            }
            let rows = (i * b_q)..((i + 1) * b_q).min(n);
            let keys: Vec<usize> = (0..k.rows()).filter(|&t| skip.get(i, t / b_k)).collect();
            let mut tile = Matrix::zeros(rows.len(), v.cols());
            for (r, qi) in rows.enumerate() {
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&t| {
                        (0..d)
                            .map(|c| f64::from(q.get(qi, c)) * f64::from(k.get(t, c)))
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = weights.iter().sum();
                for c in 0..v.cols() {
                    let val: f64 = keys
                        .iter()
                        .zip(&weights)
                        .map(|(&t, w)| w * f64::from(v.get(t, c)))
                        .sum();
                    tile.set(r, c, (val / z) as f32);
                }
            }
            Some(tile)
        })
        .collect()
}

/// Skipped block pairs implied by a mask pair: every pair of a cached row,
/// plus the zero bits of active rows.
pub fn predicted_skipped_pairs(cache: &LogicalCacheMask, skip: &LogicalSkipMask) -> u64 {
    (0..cache.len())
        .map(|i| {
            if cache.get(i) {
                skip.row(i).iter().filter(|b| !**b).count() as u64
            } else {
                skip.cols() as u64
            }
        })
        .sum()
}

/// `Σ_h O^h · W_out^h`.
pub fn dense_output_projection(o_heads: &[Matrix], w_out: &[Matrix]) -> Result<Matrix> {
    let mut iter = o_heads.iter().zip(w_out);
    let (o0, w0) = iter
        .next()
        .ok_or_else(|| OmniError::Shape("no heads to project".into()))?;
    let mut out = matmul(o0, w0)?;
    for (o, w) in iter {
        out.axpy(1.0, &matmul(o, w)?);
    }
    Ok(out)
}

/// Forecasts every cached (head, block) tile from `cache`, splices it into
/// the head outputs, then runs the dense output projection.
#[allow(clippy::too_many_arguments)]
pub fn materialize_then_project(
    o_heads: &[Matrix],
    w_out: &[Matrix],
    cache_masks: &[LogicalCacheMask],
    cache: &FeatureCache,
    b_q: usize,
    elapsed_k: usize,
    interval_n: usize,
    order_d: usize,
) -> Result<Matrix> {
    let mut spliced = o_heads.to_vec();
    for (h, mask) in cache_masks.iter().enumerate() {
        for i in 0..mask.len() {
            if !mask.get(i) {
                let tile = op_reuse(cache.entry(h, i), elapsed_k, interval_n, order_d)?;
                spliced[h].write_rows(i * b_q, &tile);
            }
        }
    }
    dense_output_projection(&spliced, w_out)
}
