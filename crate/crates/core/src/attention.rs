//! Tiled sparse attention with per-tile dispatch.
//!
//! Each query block first reads its cache bit. Cached blocks either take a
//! Taylor forecast from the feature cache or, in bias mode, are not
//! materialized at all because the output projection already carries them.
//! Active blocks decode their skip row once and run an online-softmax loop
//! over the key blocks whose bit is set.

use serde::{Deserialize, Serialize};

use crate::error::{OmniError, Result};
use crate::symbols::SymbolBuffer;
use crate::tensor::{dot, Matrix};

/// Stored output of one (head, query block) and its backward differences.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    diff_stack: Vec<Matrix>,
    last_update_step: usize,
}

impl CacheEntry {
    pub fn cold() -> Self {
        Self::default()
    }

    /// Number of populated orders (0 when cold).
    pub fn valid_orders(&self) -> usize {
        self.diff_stack.len()
    }

    pub fn is_warm(&self) -> bool {
        !self.diff_stack.is_empty()
    }

    pub fn diff(&self, order: usize) -> &Matrix {
        &self.diff_stack[order]
    }

    pub fn diff_stack(&self) -> &[Matrix] {
        &self.diff_stack
    }

    pub fn last_update_step(&self) -> usize {
        self.last_update_step
    }

    /// Overwrites every stored value with NaN. Used to prove a path never reads the entry.
    pub fn poison(&mut self) {
        for m in &mut self.diff_stack {
            m.data_mut().fill(f32::NAN);
        }
    }
}

/// Pushes a new snapshot: `stack[0] = o_new`, `stack[d] = new[d-1] - old[d-1]`.
pub fn update_cache(entry: &mut CacheEntry, o_new: Matrix, order_d: usize, step: usize) {
    let keep = (entry.valid_orders() + 1).min(order_d + 1);
    let mut next = Vec::with_capacity(keep);
    next.push(o_new);
    for d in 1..keep {
        let diff = next[d - 1].sub(&entry.diff_stack[d - 1]);
        next.push(diff);
    }
    entry.diff_stack = next;
    entry.last_update_step = step;
}

/// `c_d = (k / N)^d / d!` for `d = 0..=order`.
pub fn taylor_coefficients(elapsed_k: usize, interval_n: usize, order: usize) -> Vec<f32> {
    let x = elapsed_k as f64 / interval_n as f64;
    let mut coeffs = Vec::with_capacity(order + 1);
    let mut c = 1.0f64;
    for d in 0..=order {
        if d > 0 {
            c *= x / d as f64;
        }
        coeffs.push(c as f32);
    }
    coeffs
}

pub(crate) fn check_elapsed(elapsed_k: usize, interval_n: usize) -> Result<()> {
    if elapsed_k == 0 || elapsed_k >= interval_n {
        return Err(OmniError::Parameter(format!(
            "elapsed step {elapsed_k} outside [1, {}]",
            interval_n.saturating_sub(1)
        )));
    }
    Ok(())
}

/// Forecast `Σ_d c_d · stack[d]` up to `min(order_d, valid_orders - 1)`.
pub fn op_reuse(entry: &CacheEntry, elapsed_k: usize, interval_n: usize, order_d: usize) -> Result<Matrix> {
    if !entry.is_warm() {
        return Err(OmniError::State("forecast requested from a cold cache entry".into()));
    }
    check_elapsed(elapsed_k, interval_n)?;
    Ok(forecast_stack(entry.diff_stack(), elapsed_k, interval_n, order_d))
}

/// Linear combination shared by the tile forecast and the projected bias.
pub(crate) fn forecast_stack(stack: &[Matrix], elapsed_k: usize, interval_n: usize, order_d: usize) -> Matrix {
    let top = order_d.min(stack.len() - 1);
    let coeffs = taylor_coefficients(elapsed_k, interval_n, top);
    let mut out = stack[0].clone();
    for (d, c) in coeffs.iter().enumerate().skip(1) {
        out.axpy(*c, &stack[d]);
    }
    out
}

/// Per-head, per-query-block cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCache {
    heads: usize,
    blocks: usize,
    order_d: usize,
    entries: Vec<CacheEntry>,
}

impl FeatureCache {
    pub fn new(heads: usize, blocks: usize, order_d: usize) -> Self {
        Self {
            heads,
            blocks,
            order_d,
            entries: vec![CacheEntry::cold(); heads * blocks],
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn order_d(&self) -> usize {
        self.order_d
    }

    pub fn entry(&self, head: usize, block: usize) -> &CacheEntry {
        &self.entries[head * self.blocks + block]
    }

    pub fn entry_mut(&mut self, head: usize, block: usize) -> &mut CacheEntry {
        &mut self.entries[head * self.blocks + block]
    }

    pub fn head(&self, head: usize) -> &[CacheEntry] {
        &self.entries[head * self.blocks..(head + 1) * self.blocks]
    }

    /// Stores every tile of `o` (N×d) for `head`.
    pub fn update_head(&mut self, head: usize, o: &Matrix, b_q: usize, step: usize) {
        let order_d = self.order_d;
        for block in 0..self.blocks {
            let start = block * b_q;
            let end = (start + b_q).min(o.rows());
            update_cache(self.entry_mut(head, block), o.slice_rows(start, end), order_d, step);
        }
    }
}

/// Running max, normalizer and unnormalized accumulator of one query tile.
#[derive(Clone, Debug, PartialEq)]
pub struct OnlineSoftmaxState {
    m: Vec<f32>,
    l: Vec<f32>,
    acc: Matrix,
}

impl OnlineSoftmaxState {
    pub fn new(rows: usize, d: usize) -> Self {
        Self {
            m: vec![f32::NEG_INFINITY; rows],
            l: vec![0.0; rows],
            acc: Matrix::zeros(rows, d),
        }
    }

    /// Folds in one tile of already-scaled scores and its value block.
    pub fn update(&mut self, scores: &Matrix, v_block: &Matrix) {
        assert_eq!(scores.rows(), self.m.len(), "score tile rows");
        assert_eq!(scores.cols(), v_block.rows(), "score tile cols vs value rows");
        let mut p = vec![0.0f32; scores.cols()];
        for r in 0..scores.rows() {
            let row = scores.row(r);
            let m_new = row.iter().copied().fold(self.m[r], f32::max);
            let rescale = (self.m[r] - m_new).exp();
            let mut rowsum = 0.0f32;
            for (pj, s) in p.iter_mut().zip(row) {
                *pj = (s - m_new).exp();
                rowsum += *pj;
            }
            self.l[r] = self.l[r] * rescale + rowsum;
            let acc = self.acc.row_mut(r);
            acc.iter_mut().for_each(|a| *a *= rescale);
            for (j, pj) in p.iter().enumerate() {
                for (a, vv) in acc.iter_mut().zip(v_block.row(j)) {
                    *a += pj * vv;
                }
            }
            self.m[r] = m_new;
        }
    }

    /// `diag(l)⁻¹ · acc`.
    pub fn finalize(&self) -> Result<Matrix> {
        if self.l.iter().any(|l| *l <= 0.0) {
            return Err(OmniError::PolicyViolation(
                "finalizing a tile that saw no key block".into(),
            ));
        }
        let mut out = self.acc.clone();
        for (r, l) in self.l.iter().enumerate() {
            let inv = 1.0 / l;
            out.row_mut(r).iter_mut().for_each(|v| *v *= inv);
        }
        Ok(out)
    }
}

/// One online-softmax step: `state ← update(state, scores, v_block)`.
pub fn online_softmax_update(mut state: OnlineSoftmaxState, scores: &Matrix, v_block: &Matrix) -> OnlineSoftmaxState {
    state.update(scores, v_block);
    state
}

/// What happens to query blocks whose cache bit is 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReuseMode {
    /// Write the Taylor forecast into the output.
    Materialize,
    /// Leave the rows unwritten; the output projection adds the cached bias.
    Bias,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionParams {
    pub b_q: usize,
    pub b_k: usize,
    pub interval_n: usize,
    pub order_d: usize,
    pub mode: ReuseMode,
    /// Fill unwritten rows with NaN instead of zero.
    pub poison_unwritten: bool,
}

impl AttentionParams {
    pub fn dense(b_q: usize, b_k: usize) -> Self {
        Self {
            b_q,
            b_k,
            interval_n: 1,
            order_d: 0,
            mode: ReuseMode::Materialize,
            poison_unwritten: false,
        }
    }
}

/// Work actually performed by one attention call, in block-pair units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionCounters {
    /// Query blocks × key blocks.
    pub pairs_total: u64,
    /// Score tiles `Q_i K_jᵀ` evaluated.
    pub pairs_computed: u64,
    pub active_tiles: u64,
    pub cached_tiles: u64,
    /// Query-block rows that ran through the forecast path.
    pub forecast_tiles: u64,
}

impl AttentionCounters {
    pub fn pairs_skipped(&self) -> u64 {
        self.pairs_total - self.pairs_computed
    }

    pub fn merge(&mut self, other: &AttentionCounters) {
        self.pairs_total += other.pairs_total;
        self.pairs_computed += other.pairs_computed;
        self.active_tiles += other.active_tiles;
        self.cached_tiles += other.cached_tiles;
        self.forecast_tiles += other.forecast_tiles;
    }
}

enum Tile {
    Computed(Matrix),
    Unwritten,
}

/// Sparse attention for one head.
///
/// `cache` must hold warm entries for every cached block when `mode` is
/// [`ReuseMode::Materialize`]; it is never read in bias mode.
pub fn omni_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    symbols: &SymbolBuffer,
    cache: Option<&[CacheEntry]>,
    elapsed_k: usize,
    params: &AttentionParams,
) -> Result<(Matrix, AttentionCounters)> {
    let n = q.rows();
    let d = q.cols();
    if k.cols() != d || v.rows() != k.rows() {
        return Err(OmniError::Shape(format!(
            "attention q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let t_q = n.div_ceil(params.b_q);
    let t_kv = k.rows().div_ceil(params.b_k);
    if symbols.rows() != t_q || symbols.cols() != t_kv {
        return Err(OmniError::Shape(format!(
            "symbols sized {}x{} for {t_q}x{t_kv} blocks",
            symbols.rows(),
            symbols.cols()
        )));
    }
    let scale = 1.0 / (d as f32).sqrt();

    let run_tile = |i: usize| -> Result<(Tile, AttentionCounters)> {
        let mut counters = AttentionCounters {
            pairs_total: t_kv as u64,
            ..Default::default()
        };
        let q_start = i * params.b_q;
        let q_end = (q_start + params.b_q).min(n);
        if !symbols.cache_bit(i)? {
            counters.cached_tiles = 1;
            return match params.mode {
                ReuseMode::Bias => Ok((Tile::Unwritten, counters)),
                ReuseMode::Materialize => {
                    let entry = cache
                        .and_then(|c| c.get(i))
                        .ok_or_else(|| OmniError::State(format!("no cache entry for block {i}")))?;
                    counters.forecast_tiles = 1;
                    let tile = op_reuse(entry, elapsed_k, params.interval_n, params.order_d)?;
                    Ok((Tile::Computed(tile), counters))
                }
            };
        }
        counters.active_tiles = 1;
        let run = symbols.skip_run(i)?;
        let rows = q_end - q_start;
        let mut state = OnlineSoftmaxState::new(rows, d);
        for (j, _) in run.iter().enumerate().filter(|(_, bit)| **bit) {
            let k_start = j * params.b_k;
            let k_end = (k_start + params.b_k).min(k.rows());
            let scores = Matrix::from_fn(rows, k_end - k_start, |r, c| {
                dot(q.row(q_start + r), k.row(k_start + c)) * scale
            });
            state.update(&scores, &v.slice_rows(k_start, k_end));
            counters.pairs_computed += 1;
        }
        if counters.pairs_computed == 0 {
            return Err(OmniError::PolicyViolation(format!(
                "active query block {i} has every key block skipped"
            )));
        }
        Ok((Tile::Computed(state.finalize()?), counters))
    };

    let tiles: Vec<Result<(Tile, AttentionCounters)>> = crate::par::map_range(t_q, run_tile);

    let fill = if params.poison_unwritten { f32::NAN } else { 0.0 };
    let mut out = Matrix::filled(n, v.cols(), fill);
    let mut counters = AttentionCounters::default();
    for (i, tile) in tiles.into_iter().enumerate() {
        let (tile, c) = tile?;
        counters.merge(&c);
        if let Tile::Computed(m) = tile {
            out.write_rows(i * params.b_q, &m);
        }
    }
    Ok((out, counters))
}
