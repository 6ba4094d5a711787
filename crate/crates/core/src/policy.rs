//! Mask generation at Update steps.
//!
//! Tokens are laid out text first, then vision. The compressed attention map
//! is built from mean-pooled query and key groups; its text/vision
//! sub-blocks give two per-vision-block scores:
//!
//! - contribution `C_i`: mass the text rows place on vision column `i`
//! - guidance `G_i`: column sums of the re-softmaxed, transposed
//!   vision-row/text-column sub-block
//!
//! A vision block is cached when it sits inside the ascending cumulative
//! budget of both scores. Within active rows, key blocks are skipped in
//! ascending probability order while their cumulative mass stays within
//! `tau_kv`. All sorts break ties toward the lower index.

use serde::{Deserialize, Serialize};

use crate::error::{OmniError, Result};
use crate::symbols::{LogicalCacheMask, LogicalSkipMask};
use crate::tensor::{matmul_transposed, mean_pool_blocks, row_softmax, softmax_in_place, Matrix};

/// Row-stochastic pooled attention map plus the compressed text-block count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressedAttnMap {
    pub p_tilde: Matrix,
    pub n_t: usize,
}

impl CompressedAttnMap {
    pub fn new(p_tilde: Matrix, n_t: usize) -> Result<Self> {
        if n_t > p_tilde.rows() || n_t > p_tilde.cols() {
            return Err(OmniError::Shape(format!(
                "{n_t} text blocks in a {:?} map",
                p_tilde.shape()
            )));
        }
        Ok(Self { p_tilde, n_t })
    }

    pub fn rows(&self) -> usize {
        self.p_tilde.rows()
    }

    pub fn cols(&self) -> usize {
        self.p_tilde.cols()
    }

    pub fn vision_rows(&self) -> usize {
        self.rows() - self.n_t
    }

    pub fn vision_cols(&self) -> usize {
        self.cols() - self.n_t
    }
}

/// `softmax(pool(q) · pool(k)ᵀ / √d)` with `n_t = ⌈n_text / pool_q⌉`.
pub fn compressed_attention(
    q: &Matrix,
    k: &Matrix,
    pool_q: usize,
    pool_k: usize,
    n_text: usize,
) -> Result<CompressedAttnMap> {
    if q.cols() != k.cols() {
        return Err(OmniError::Shape(format!(
            "q width {} vs k width {}",
            q.cols(),
            k.cols()
        )));
    }
    let pq = mean_pool_blocks(q, pool_q)?;
    let pk = mean_pool_blocks(k, pool_k)?;
    let mut scores = matmul_transposed(&pq, &pk)?;
    scores.scale(1.0 / (q.cols() as f32).sqrt());
    let n_t = n_text.div_ceil(pool_q);
    if n_t > pq.rows() || n_text.div_ceil(pool_k) != n_t {
        return Err(OmniError::Shape(format!(
            "text spans {n_t} query groups and {} key groups",
            n_text.div_ceil(pool_k)
        )));
    }
    CompressedAttnMap::new(row_softmax(&scores), n_t)
}

/// `C_i = Σ_{j < n_t} P̃[j][n_t + i]` for every vision column `i`.
pub fn vision_to_text_contribution(map: &CompressedAttnMap) -> Vec<f32> {
    let n_t = map.n_t;
    (n_t..map.cols())
        .map(|col| (0..n_t).map(|row| map.p_tilde.get(row, col)).sum())
        .collect()
}

/// `G_i = Σ_{j < n_t} softmax(P̃[n_t:, :n_t]ᵀ)[j][i]` for every vision row `i`.
pub fn text_to_vision_guidance(map: &CompressedAttnMap) -> Vec<f32> {
    let n_t = map.n_t;
    let vision = map.vision_rows();
    let mut guidance = vec![0.0f32; vision];
    let mut text_row = vec![0.0f32; vision];
    for j in 0..n_t {
        for (i, v) in text_row.iter_mut().enumerate() {
            *v = map.p_tilde.get(n_t + i, j);
        }
        softmax_in_place(&mut text_row);
        for (g, b) in guidance.iter_mut().zip(&text_row) {
            *g += b;
        }
    }
    guidance
}

fn check_fraction(name: &str, tau: f32) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(OmniError::Parameter(format!("{name} = {tau} outside [0, 1]")))
    }
}

/// Indices in ascending score order, ties by lower index.
fn ascending_order(scores: &[f32], candidates: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut order: Vec<usize> = candidates.collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

/// Longest ascending prefix whose running sum stays within `budget_fraction` of the total.
///
/// The total is the sorted ascending sum, so a fraction of 1 always admits
/// every element. A zero fraction admits nothing, even zero scores.
fn ascending_prefix(scores: &[f32], order: &[usize], tau: f32, budget: f64) -> usize {
    if tau <= 0.0 {
        return 0;
    }
    let mut acc = 0.0f64;
    for (taken, &idx) in order.iter().enumerate() {
        acc += f64::from(scores[idx]);
        if acc > budget {
            return taken;
        }
    }
    order.len()
}

fn prefix_set(scores: &[f32], tau: f32) -> Vec<bool> {
    let order = ascending_order(scores, 0..scores.len());
    let total: f64 = order.iter().map(|&i| f64::from(scores[i])).sum();
    let taken = ascending_prefix(scores, &order, tau, f64::from(tau) * total);
    let mut set = vec![false; scores.len()];
    for &i in &order[..taken] {
        set[i] = true;
    }
    set
}

/// Cache mask over `n_t` text blocks followed by the vision blocks scored in `c`/`g`.
///
/// A vision block is cached (bit 0) iff it lies in both ascending prefix sets.
pub fn select_cached_blocks(c: &[f32], g: &[f32], tau_q: f32, n_t: usize) -> Result<LogicalCacheMask> {
    check_fraction("tau_q", tau_q)?;
    if c.len() != g.len() {
        return Err(OmniError::Shape(format!(
            "contribution has {} blocks, guidance {}",
            c.len(),
            g.len()
        )));
    }
    let in_c = prefix_set(c, tau_q);
    let in_g = prefix_set(g, tau_q);
    let mut bits = vec![true; n_t + c.len()];
    for i in 0..c.len() {
        bits[n_t + i] = !(in_c[i] && in_g[i]);
    }
    Ok(LogicalCacheMask::new(bits))
}

/// Compressed key column treated as the "self" block of compressed query row `row`.
pub fn diagonal_column(row: usize, rows: usize, cols: usize) -> usize {
    if rows == cols {
        row
    } else {
        (row * cols / rows).min(cols - 1)
    }
}

/// Skip mask at compressed granularity.
///
/// With `protect` set, text key columns and the diagonal column are never
/// skipped. At least one column per active row is always kept. Rows whose
/// cache bit is 0 are all zero.
pub fn select_skip_blocks(
    map: &CompressedAttnMap,
    cache_mask: &LogicalCacheMask,
    tau_kv: f32,
    protect: bool,
) -> Result<LogicalSkipMask> {
    check_fraction("tau_kv", tau_kv)?;
    let (rows, cols) = map.p_tilde.shape();
    if cache_mask.len() != rows {
        return Err(OmniError::Shape(format!(
            "cache mask has {} blocks for a map with {rows} rows",
            cache_mask.len()
        )));
    }
    let mut mask = LogicalSkipMask::all_compute(rows, cols);
    for r in 0..rows {
        if !cache_mask.get(r) {
            mask.row_mut(r).fill(false);
            continue;
        }
        let diag = diagonal_column(r, rows, cols);
        let probs = map.p_tilde.row(r);
        let order = ascending_order(probs, (0..cols).filter(|&j| !protect || (j >= map.n_t && j != diag)));
        let mut taken = ascending_prefix(probs, &order, tau_kv, f64::from(tau_kv));
        if taken == cols {
            // keep the heaviest block
            taken -= 1;
        }
        for &j in &order[..taken] {
            mask.set(r, j, false);
        }
    }
    Ok(mask)
}

/// Caches every vision block when fewer than `s_q` of them would be computed.
pub fn degrade_to_full_cache(mask: &LogicalCacheMask, n_t: usize, s_q: f32) -> LogicalCacheMask {
    let vision = mask.len().saturating_sub(n_t);
    if vision == 0 {
        return mask.clone();
    }
    let computed = (n_t..mask.len()).filter(|&i| mask.get(i)).count();
    let fraction = computed as f64 / vision as f64;
    if fraction < f64::from(s_q) {
        let mut bits = vec![true; mask.len()];
        bits[n_t..].fill(false);
        LogicalCacheMask::new(bits)
    } else {
        mask.clone()
    }
}

/// Linear warmup: `tau · min(1, step / warmup)`.
pub fn ramp_threshold(tau_target: f32, step: usize, warmup_steps: usize) -> f32 {
    if warmup_steps == 0 || step >= warmup_steps {
        tau_target
    } else {
        tau_target * (step as f32 / warmup_steps as f32)
    }
}
