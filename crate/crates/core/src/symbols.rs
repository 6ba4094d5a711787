//! Logical block masks and their packed 8-bit symbol form.
//!
//! A cache mask holds one bit per query block (1 = compute, 0 = reuse the
//! cached output). A skip mask holds one bit per (query block, key block)
//! pair (1 = compute, 0 = skip). Both are generated at a coarser granularity
//! where `pool_n` consecutive blocks share a bit, and only that compressed
//! bit is stored.
//!
//! Layout: bits are packed MSB-first within each byte and the tail is
//! zero-padded, so compressed cache bits `[1,1,1,0,0]` pack to `0b1110_0000`
//! (224). Each compressed skip row starts on a byte boundary, which makes a
//! whole row readable as one contiguous slice.

use serde::{Deserialize, Serialize};

use crate::error::{OmniError, Result};

/// Serialization format version written into the symbol dump header.
pub const SYMBOL_FORMAT_VERSION: u32 = 1;
/// Size of the little-endian `(rows, cols, pool_n, version)` header.
pub const HEADER_LEN: usize = 16;

/// Per-query-block compute/cache bits for one head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalCacheMask {
    bits: Vec<bool>,
}

impl LogicalCacheMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn all_compute(len: usize) -> Self {
        Self { bits: vec![true; len] }
    }

    pub fn all_cached(len: usize) -> Self {
        Self { bits: vec![false; len] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, compute: bool) {
        self.bits[i] = compute;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn compute_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Replicates each bit `pool_n` times and truncates to `len` blocks.
    pub fn expand(&self, pool_n: usize, len: usize) -> Self {
        Self {
            bits: (0..len).map(|i| self.bits[i / pool_n]).collect(),
        }
    }

    /// Collapses uniform groups of `pool_n` bits into one bit each.
    pub fn compress(&self, pool_n: usize) -> Result<Vec<bool>> {
        check_pool(pool_n)?;
        self.bits
            .chunks(pool_n)
            .enumerate()
            .map(|(g, chunk)| uniform_bit(chunk, || format!("cache mask group {g}")))
            .collect()
    }
}

/// Per-(query block, key block) compute/skip bits for one head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalSkipMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl LogicalSkipMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(OmniError::Shape(format!(
                "skip mask has {} bits for {rows}x{cols}",
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn all_compute(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        Self { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, compute: bool) {
        self.bits[i * self.cols + j] = compute;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [bool] {
        &mut self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn expand(&self, pool_n: usize, rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |i, j| self.get(i / pool_n, j / pool_n))
    }

    /// Collapses uniform `pool_n × pool_n` groups; returns the compressed mask.
    pub fn compress(&self, pool_n: usize) -> Result<LogicalSkipMask> {
        check_pool(pool_n)?;
        let crow = self.rows.div_ceil(pool_n);
        let ccol = self.cols.div_ceil(pool_n);
        let mut out = LogicalSkipMask::all_compute(crow, ccol);
        for gi in 0..crow {
            for gj in 0..ccol {
                let first = self.get(gi * pool_n, gj * pool_n);
                for i in gi * pool_n..((gi + 1) * pool_n).min(self.rows) {
                    for j in gj * pool_n..((gj + 1) * pool_n).min(self.cols) {
                        if self.get(i, j) != first {
                            return Err(OmniError::Consistency(format!(
                                "skip mask group ({gi},{gj}) is not uniform"
                            )));
                        }
                    }
                }
                out.set(gi, gj, first);
            }
        }
        Ok(out)
    }
}

fn check_pool(pool_n: usize) -> Result<()> {
    if pool_n == 0 {
        Err(OmniError::Parameter("pool_n must be at least 1".into()))
    } else {
        Ok(())
    }
}

fn uniform_bit(chunk: &[bool], what: impl FnOnce() -> String) -> Result<bool> {
    let first = chunk[0];
    if chunk.iter().all(|b| *b == first) {
        Ok(first)
    } else {
        Err(OmniError::Consistency(format!("{} is not uniform", what())))
    }
}

/// Packs bits MSB-first, zero-padding the last byte.
pub fn pack_bits_msb(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (c, _) in bits.iter().enumerate().filter(|(_, b)| **b) {
        out[c / 8] |= 0x80 >> (c % 8);
    }
    out
}

#[inline]
fn bit_at(bytes: &[u8], c: usize) -> bool {
    (bytes[c / 8] >> (7 - c % 8)) & 1 == 1
}

#[inline]
fn skip_row_stride(t_kv: usize, pool_n: usize) -> usize {
    t_kv.div_ceil(pool_n).div_ceil(8)
}

pub fn encode_cache_mask(m: &LogicalCacheMask, pool_n: usize) -> Result<Vec<u8>> {
    Ok(pack_bits_msb(&m.compress(pool_n)?))
}

pub fn encode_skip_mask(m: &LogicalSkipMask, pool_n: usize) -> Result<Vec<u8>> {
    let compressed = m.compress(pool_n)?;
    let stride = skip_row_stride(m.cols, pool_n);
    let mut out = Vec::with_capacity(compressed.rows * stride);
    for r in 0..compressed.rows {
        out.extend(pack_bits_msb(compressed.row(r)));
    }
    Ok(out)
}

/// Cache bit for query block `i`.
pub fn decode_spatial(s_c: &[u8], i: usize, pool_n: usize) -> Result<bool> {
    check_pool(pool_n)?;
    let c = i / pool_n;
    if c / 8 >= s_c.len() {
        return Err(OmniError::Bounds(format!(
            "block {i} (compressed {c}) outside {}-byte cache symbols",
            s_c.len()
        )));
    }
    Ok(bit_at(s_c, c))
}

/// Skip bit for the block pair `(i, j)`; `t_kv` is the key-block count.
pub fn decode_reduction(s_s: &[u8], i: usize, j: usize, pool_n: usize, t_kv: usize) -> Result<bool> {
    check_pool(pool_n)?;
    if j >= t_kv {
        return Err(OmniError::Bounds(format!("key block {j} >= {t_kv}")));
    }
    let stride = skip_row_stride(t_kv, pool_n);
    let byte = (i / pool_n) * stride + (j / pool_n) / 8;
    if byte >= s_s.len() {
        return Err(OmniError::Bounds(format!(
            "pair ({i},{j}) outside {}-byte skip symbols",
            s_s.len()
        )));
    }
    Ok(bit_at(&s_s[(i / pool_n) * stride..], j / pool_n))
}

/// Decodes compressed skip row `row` once and expands it to `cols` per-block bits.
pub fn decode_run(s_s: &[u8], row: usize, pool_n: usize, cols: usize) -> Result<Vec<bool>> {
    check_pool(pool_n)?;
    let stride = skip_row_stride(cols, pool_n);
    let start = row * stride;
    if start + stride > s_s.len() {
        return Err(OmniError::Bounds(format!(
            "compressed row {row} outside {}-byte skip symbols",
            s_s.len()
        )));
    }
    let bytes = &s_s[start..start + stride];
    let mut out = Vec::with_capacity(cols);
    let mut j = 0;
    'bytes: for &byte in bytes {
        for shift in (0..8).rev() {
            let bit = (byte >> shift) & 1 == 1;
            for _ in 0..pool_n {
                if j == cols {
                    break 'bytes;
                }
                out.push(bit);
                j += 1;
            }
        }
    }
    Ok(out)
}

/// Packed cache and skip symbols for one head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolBuffer {
    s_c: Vec<u8>,
    s_s: Vec<u8>,
    pool_n: usize,
    /// Query-block count.
    rows: usize,
    /// Key-block count.
    cols: usize,
}

impl SymbolBuffer {
    pub fn encode(cache: &LogicalCacheMask, skip: &LogicalSkipMask, pool_n: usize) -> Result<Self> {
        if skip.rows() != cache.len() {
            return Err(OmniError::Shape(format!(
                "cache mask has {} blocks, skip mask {} rows",
                cache.len(),
                skip.rows()
            )));
        }
        Ok(Self {
            s_c: encode_cache_mask(cache, pool_n)?,
            s_s: encode_skip_mask(skip, pool_n)?,
            pool_n,
            rows: cache.len(),
            cols: skip.cols(),
        })
    }

    /// Every tile computed, every pair computed.
    pub fn all_active(rows: usize, cols: usize, pool_n: usize) -> Self {
        Self::encode(
            &LogicalCacheMask::all_compute(rows),
            &LogicalSkipMask::all_compute(rows, cols),
            pool_n,
        )
        .expect("uniform masks always encode")
    }

    /// Rebuilds a buffer from raw symbol bytes, checking lengths and padding.
    pub fn from_parts(rows: usize, cols: usize, pool_n: usize, s_c: Vec<u8>, s_s: Vec<u8>) -> Result<Self> {
        check_pool(pool_n)?;
        let crow = rows.div_ceil(pool_n);
        let ccol = cols.div_ceil(pool_n);
        let stride = ccol.div_ceil(8);
        if s_c.len() != crow.div_ceil(8) || s_s.len() != crow * stride {
            return Err(OmniError::Shape(format!(
                "symbol lengths ({}, {}) do not fit {rows}x{cols} blocks at pool {pool_n}",
                s_c.len(),
                s_s.len()
            )));
        }
        let pad_ok = |bytes: &[u8], used: usize| {
            used.is_multiple_of(8) || bytes.last().is_none_or(|b| b & (0xFFu8 >> (used % 8)) == 0)
        };
        if !pad_ok(&s_c, crow) || !(0..crow).all(|r| pad_ok(&s_s[r * stride..(r + 1) * stride], ccol)) {
            return Err(OmniError::Consistency("non-zero padding bits".into()));
        }
        Ok(Self {
            s_c,
            s_s,
            pool_n,
            rows,
            cols,
        })
    }

    pub fn s_c(&self) -> &[u8] {
        &self.s_c
    }

    pub fn s_s(&self) -> &[u8] {
        &self.s_s
    }

    pub fn pool_n(&self) -> usize {
        self.pool_n
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cache_bit(&self, i: usize) -> Result<bool> {
        if i >= self.rows {
            return Err(OmniError::Bounds(format!("query block {i} >= {}", self.rows)));
        }
        decode_spatial(&self.s_c, i, self.pool_n)
    }

    pub fn skip_bit(&self, i: usize, j: usize) -> Result<bool> {
        if i >= self.rows {
            return Err(OmniError::Bounds(format!("query block {i} >= {}", self.rows)));
        }
        decode_reduction(&self.s_s, i, j, self.pool_n, self.cols)
    }

    /// Expanded skip bits for query block `i`, decoded in one pass.
    pub fn skip_run(&self, i: usize) -> Result<Vec<bool>> {
        if i >= self.rows {
            return Err(OmniError::Bounds(format!("query block {i} >= {}", self.rows)));
        }
        decode_run(&self.s_s, i / self.pool_n, self.pool_n, self.cols)
    }

    pub fn cache_mask(&self) -> LogicalCacheMask {
        LogicalCacheMask::new((0..self.rows).map(|i| bit_at(&self.s_c, i / self.pool_n)).collect())
    }

    pub fn skip_mask(&self) -> LogicalSkipMask {
        let stride = skip_row_stride(self.cols, self.pool_n);
        LogicalSkipMask::from_fn(self.rows, self.cols, |i, j| {
            bit_at(&self.s_s[(i / self.pool_n) * stride..], j / self.pool_n)
        })
    }

    /// Number of query blocks marked compute.
    pub fn active_blocks(&self) -> usize {
        (0..self.rows).filter(|&i| bit_at(&self.s_c, i / self.pool_n)).count()
    }

    /// Header `(rows, cols, pool_n, version)` as little-endian u32, then `s_c`, then `s_s`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.s_c.len() + self.s_s.len());
        for field in [self.rows, self.cols, self.pool_n] {
            out.extend_from_slice(&(field as u32).to_le_bytes());
        }
        out.extend_from_slice(&SYMBOL_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.s_c);
        out.extend_from_slice(&self.s_s);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(OmniError::Shape(format!(
                "symbol dump shorter than header: {}",
                bytes.len()
            )));
        }
        let field = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap()) as usize;
        let (rows, cols, pool_n, version) = (field(0), field(1), field(2), field(3) as u32);
        if version != SYMBOL_FORMAT_VERSION {
            return Err(OmniError::Parameter(format!(
                "unsupported symbol format version {version}"
            )));
        }
        check_pool(pool_n)?;
        let c_len = rows.div_ceil(pool_n).div_ceil(8);
        let body = &bytes[HEADER_LEN..];
        if body.len() < c_len {
            return Err(OmniError::Shape("symbol dump truncated".into()));
        }
        Self::from_parts(rows, cols, pool_n, body[..c_len].to_vec(), body[c_len..].to_vec())
    }

    /// Payload size in bytes (both symbol arrays, no header).
    pub fn storage_bytes(&self) -> usize {
        self.s_c.len() + self.s_s.len()
    }
}
