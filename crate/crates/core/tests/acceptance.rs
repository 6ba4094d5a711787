//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Every expected value is computed here from first principles, never by
//! calling the code path under test.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use omni_core::attention::{
    omni_attention, op_reuse, update_cache, AttentionParams, CacheEntry, FeatureCache, ReuseMode,
};
use omni_core::costs::{sparsity, theoretical_speedup_gemm_o};
use omni_core::gemm::{gemm_o_dispatch, gemm_o_update, Phase};
use omni_core::pipeline::{run, run_dense, step_phase, synthetic_workload, trajectory_errors, Engine, EngineConfig};
use omni_core::policy::{select_cached_blocks, select_skip_blocks, CompressedAttnMap};
use omni_core::symbols::{
    decode_reduction, decode_spatial, encode_cache_mask, pack_bits_msb, LogicalCacheMask, LogicalSkipMask, SymbolBuffer,
};
use omni_core::tensor::dense_attention;
use omni_core::verify::{run_suite, VerifyOptions};
use omni_core::{Matrix, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn rel_err(got: &Matrix, want: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (g, w) in got.data().iter().zip(want) {
        num += (f64::from(*g) - w).powi(2);
        den += w * w;
    }
    num.sqrt() / den.sqrt().max(f64::MIN_POSITIVE)
}

fn rel_err_f32(got: &Matrix, want: &Matrix) -> f64 {
    let w: Vec<f64> = want.data().iter().map(|&x| f64::from(x)).collect();
    rel_err(got, &w)
}

/// Token-level softmax attention in `f64`, restricted to the key tokens `keys`.
fn attention_rows(q: &Matrix, k: &Matrix, v: &Matrix, rows: std::ops::Range<usize>, keys: &[usize]) -> Vec<f64> {
    let d = q.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(rows.len() * v.cols());
    for r in rows {
        let s: Vec<f64> = keys
            .iter()
            .map(|&t| {
                (0..d)
                    .map(|c| f64::from(q.get(r, c)) * f64::from(k.get(t, c)))
                    .sum::<f64>()
                    * scale
            })
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..v.cols() {
            out.push(
                keys.iter()
                    .zip(&e)
                    .map(|(&t, w)| w * f64::from(v.get(t, c)))
                    .sum::<f64>()
                    / z,
            );
        }
    }
    out
}

fn naive_matmul(a: &Matrix, b: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; a.rows() * b.cols()];
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            out[i * b.cols() + j] = (0..a.cols())
                .map(|p| f64::from(a.get(i, p)) * f64::from(b.get(p, j)))
                .sum();
        }
    }
    out
}

fn ok_or_fail(cond: bool, pass: String, fail: String) -> Outcome {
    if cond {
        Ok(pass)
    } else {
        Err(fail)
    }
}

fn speedup_formula() -> Outcome {
    let anchor = theoretical_speedup_gemm_o(6, 0.9).map_err(|e| e.to_string())?;
    if anchor != 4.0 {
        return Err(format!("(6, 0.9) gave {anchor:?}, expected exactly 4.0"));
    }
    for n in [4usize, 6, 8] {
        let mut prev = theoretical_speedup_gemm_o(n, 0.0).map_err(|e| e.to_string())?;
        if prev != 1.0 {
            return Err(format!("N={n}, s=0 gave {prev}"));
        }
        for tenth in 1..=9 {
            let s = tenth as f64 / 10.0;
            let v = theoretical_speedup_gemm_o(n, s).map_err(|e| e.to_string())?;
            let want = n as f64 / (1.0 + (n as f64 - 1.0) * (1.0 - s));
            if (v - want).abs() > 1e-12 || v <= prev || v > n as f64 {
                return Err(format!("N={n}, s={s}: {v} (prev {prev}, formula {want})"));
            }
            prev = v;
        }
    }
    Ok("(6, 0.9) = 4.0; 27-point sweep strictly increasing and bounded by N".into())
}

fn codec_anchor() -> Outcome {
    let anchor = pack_bits_msb(&[true, true, true, false, false]);
    if anchor != [224] {
        return Err(format!("[1,1,1,0,0] packed to {anchor:?}"));
    }
    let mut exhaustive = 0u64;
    for len in 1..=16usize {
        for value in 0u32..(1 << len) {
            let bits: Vec<bool> = (0..len).map(|b| value >> (len - 1 - b) & 1 == 1).collect();
            let bytes = encode_cache_mask(&LogicalCacheMask::new(bits.clone()), 1).map_err(|e| e.to_string())?;
            // independent packing: byte b holds bits 8b..8b+7, first bit in the MSB
            let mut expect = vec![0u8; len.div_ceil(8)];
            for (i, &bit) in bits.iter().enumerate() {
                if bit {
                    expect[i / 8] |= 0x80 >> (i % 8);
                }
            }
            if bytes != expect {
                return Err(format!("len {len} value {value:#x}: {bytes:?} vs {expect:?}"));
            }
            for (i, &bit) in bits.iter().enumerate() {
                if decode_spatial(&bytes, i, 1).map_err(|e| e.to_string())? != bit {
                    return Err(format!("len {len} value {value:#x}: bit {i} decodes wrong"));
                }
            }
            exhaustive += 1;
        }
    }
    let mut r = rng(2);
    let mut random = 0;
    for _ in 0..300 {
        let pool_n = [1usize, 2, 4][r.gen_range(0..3)];
        let rows = r.gen_range(1..=64usize);
        let cols = r.gen_range(1..=64usize);
        let (crow, ccol) = (rows.div_ceil(pool_n), cols.div_ceil(pool_n));
        let cache_c: Vec<bool> = (0..crow).map(|_| r.gen_bool(0.5)).collect();
        let skip_c: Vec<bool> = (0..crow * ccol).map(|_| r.gen_bool(0.5)).collect();
        let cache = LogicalCacheMask::new((0..rows).map(|i| cache_c[i / pool_n]).collect());
        let skip = LogicalSkipMask::from_fn(rows, cols, |i, j| skip_c[(i / pool_n) * ccol + j / pool_n]);
        let buf = SymbolBuffer::encode(&cache, &skip, pool_n).map_err(|e| e.to_string())?;
        let back = SymbolBuffer::from_bytes(&buf.to_bytes()).map_err(|e| e.to_string())?;
        if back.cache_mask() != cache || back.skip_mask() != skip {
            return Err(format!("{rows}x{cols} at pool {pool_n}: roundtrip differs"));
        }
        for i in 0..rows {
            for j in 0..cols {
                let got = decode_reduction(back.s_s(), i, j, pool_n, cols).map_err(|e| e.to_string())?;
                if got != skip.get(i, j) {
                    return Err(format!("{rows}x{cols} at pool {pool_n}: ({i}, {j}) decodes wrong"));
                }
            }
        }
        random += 1;
    }
    Ok(format!(
        "224 anchor; {exhaustive} exhaustive masks and {random} random masks roundtrip"
    ))
}

fn dense_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let mut trials = 0;
    for n in [32usize, 64, 128] {
        for d in [8usize, 16, 64] {
            for heads in [2usize, 4] {
                for seed in 0..100u64 {
                    let mut r = rng(seed ^ (n as u64) << 16 ^ (d as u64) << 32 ^ (heads as u64) << 48);
                    let b = [8usize, 16, 12][r.gen_range(0..3)];
                    let t = n.div_ceil(b);
                    let symbols = SymbolBuffer::all_active(t, t, 1);
                    for _ in 0..heads {
                        let (q, k, v) = (uniform(&mut r, n, d), uniform(&mut r, n, d), uniform(&mut r, n, d));
                        let (out, _) = omni_attention(&q, &k, &v, &symbols, None, 0, &AttentionParams::dense(b, b))
                            .map_err(|e| e.to_string())?;
                        let all: Vec<usize> = (0..n).collect();
                        let err = rel_err(&out, &attention_rows(&q, &k, &v, 0..n, &all));
                        let dense = dense_attention(&q, &k, &v).map_err(|e| e.to_string())?;
                        let err = err.max(rel_err_f32(&out, &dense));
                        worst = worst.max(err);
                        if err > 1e-5 {
                            return Err(format!(
                                "N={n} d={d} heads={heads} seed={seed}: relative error {err:.3e}"
                            ));
                        }
                    }
                    trials += 1;
                }
            }
        }
    }
    Ok(format!("{trials} trials, worst relative error {worst:.2e} (tol 1e-5)"))
}

fn masked_oracle() -> Outcome {
    let mut worst = 0.0f64;
    let mut pairs_checked = 0u64;
    for combo in 0..200u64 {
        let mut r = rng(1000 + combo);
        let n = r.gen_range(8..=160usize);
        let d = [4usize, 8, 16, 32][r.gen_range(0..4)];
        let b_q = r.gen_range(4..=24usize);
        let b_k = r.gen_range(4..=24usize);
        let pool_n = r.gen_range(1..=3usize);
        let (t_q, t_kv) = (n.div_ceil(b_q), n.div_ceil(b_k));
        let (crow, ccol) = (t_q.div_ceil(pool_n), t_kv.div_ceil(pool_n));
        let p_cache = r.gen_range(0.0..0.6);
        let p_skip = r.gen_range(0.0..0.9);
        let cache_c: Vec<bool> = (0..crow).map(|_| !r.gen_bool(p_cache)).collect();
        let mut skip_c: Vec<bool> = (0..crow * ccol)
            .map(|i| cache_c[i / ccol] && !r.gen_bool(p_skip))
            .collect();
        for row in 0..crow {
            if cache_c[row] && !skip_c[row * ccol..(row + 1) * ccol].contains(&true) {
                skip_c[row * ccol + r.gen_range(0..ccol)] = true;
            }
        }
        let cache = LogicalCacheMask::new((0..t_q).map(|i| cache_c[i / pool_n]).collect());
        let skip = LogicalSkipMask::from_fn(t_q, t_kv, |i, j| skip_c[(i / pool_n) * ccol + j / pool_n]);
        let symbols = SymbolBuffer::encode(&cache, &skip, pool_n).map_err(|e| e.to_string())?;
        let (q, k, v) = (uniform(&mut r, n, d), uniform(&mut r, n, d), uniform(&mut r, n, d));
        let params = AttentionParams {
            mode: ReuseMode::Bias,
            ..AttentionParams::dense(b_q, b_k)
        };
        let (out, counters) = omni_attention(&q, &k, &v, &symbols, None, 0, &params).map_err(|e| e.to_string())?;

        let mut predicted = 0u64;
        for i in 0..t_q {
            let computed = if cache.get(i) {
                (0..t_kv).filter(|&j| skip.get(i, j)).count()
            } else {
                0
            };
            predicted += (t_kv - computed) as u64;
            if !cache.get(i) {
                continue;
            }
            let rows = i * b_q..((i + 1) * b_q).min(n);
            let keys: Vec<usize> = (0..n).filter(|&t| skip.get(i, t / b_k)).collect();
            let want = attention_rows(&q, &k, &v, rows.clone(), &keys);
            let got = out.slice_rows(rows.start, rows.end);
            let err = rel_err(&got, &want);
            worst = worst.max(err);
            if err > 1e-5 {
                return Err(format!("combo {combo} block {i}: relative error {err:.3e}"));
            }
        }
        if counters.pairs_skipped() != predicted || counters.pairs_total != (t_q * t_kv) as u64 {
            return Err(format!(
                "combo {combo}: skipped {} of {}, masks predict {predicted} of {}",
                counters.pairs_skipped(),
                counters.pairs_total,
                t_q * t_kv
            ));
        }
        pairs_checked += predicted;
    }
    Ok(format!(
        "200 combos, worst relative error {worst:.2e} (tol 1e-5), {pairs_checked} skipped pairs counted exactly"
    ))
}

fn taylor_oracle(stack: &[Matrix], k: usize, big_n: usize, order: usize) -> Vec<f64> {
    let x = k as f64 / big_n as f64;
    let mut out = vec![0.0; stack[0].data().len()];
    let mut fact = 1.0;
    for (dd, m) in stack.iter().enumerate().take(order + 1) {
        if dd > 0 {
            fact *= dd as f64;
        }
        let c = x.powi(dd as i32) / fact;
        for (o, v) in out.iter_mut().zip(m.data()) {
            *o += c * f64::from(*v);
        }
    }
    out
}

fn cached_bias() -> Outcome {
    let (n, d, d_model, b_q, big_n) = (48usize, 8usize, 24usize, 8usize, 5usize);
    let t_q = n / b_q;
    let mut worst = 0.0f64;
    let mut trials = 0;
    for order in 0..=2usize {
        for heads in [2usize, 4, 8] {
            for p in 0..100u64 {
                let mut r = rng(5000 + p + 1000 * heads as u64 + 100_000 * order as u64);
                let w_out: Vec<Matrix> = (0..heads).map(|_| uniform(&mut r, d, d_model)).collect();
                let updates = r.gen_range(1..=order + 2);
                let mut cache = FeatureCache::new(heads, t_q, order);
                let mut history: Vec<Vec<Matrix>> = Vec::new();
                for u in 0..updates {
                    let o: Vec<Matrix> = (0..heads).map(|_| uniform(&mut r, n, d)).collect();
                    for (h, m) in o.iter().enumerate() {
                        cache.update_head(h, m, b_q, u * big_n);
                    }
                    history.push(o);
                }
                let masks: Vec<LogicalCacheMask> = (0..heads)
                    .map(|_| LogicalCacheMask::new((0..t_q).map(|_| r.gen_bool(0.5)).collect()))
                    .collect();
                let symbols: Vec<SymbolBuffer> = masks
                    .iter()
                    .map(|m| SymbolBuffer::encode(m, &LogicalSkipMask::from_fn(t_q, t_q, |i, _| m.get(i)), 1))
                    .collect::<Result<_>>()
                    .map_err(|e| e.to_string())?;
                let last = history.last().unwrap();
                let (_, bias, _) = gemm_o_update(last, &w_out, &symbols, &cache, b_q).map_err(|e| e.to_string())?;
                let fresh: Vec<Matrix> = (0..heads).map(|_| uniform(&mut r, n, d)).collect();
                let k = r.gen_range(1..big_n);
                let (got, _) =
                    gemm_o_dispatch(&fresh, &w_out, &symbols, &bias, k, big_n, order).map_err(|e| e.to_string())?;

                // oracle: backward differences from the raw history, Taylor forecast, splice, project
                let mut want = vec![0.0f64; n * d_model];
                for h in 0..heads {
                    let mut stack = vec![history[updates - 1][h].clone()];
                    let mut level: Vec<Matrix> = history.iter().map(|o| o[h].clone()).collect();
                    for _ in 1..=order.min(updates - 1) {
                        level = level.windows(2).map(|w| w[1].sub(&w[0])).collect();
                        stack.push(level.last().unwrap().clone());
                    }
                    let forecast = taylor_oracle(&stack, k, big_n, order);
                    let mut spliced = fresh[h].clone();
                    for i in 0..t_q {
                        if !masks[h].get(i) {
                            for t in i * b_q..(i + 1) * b_q {
                                for c in 0..d {
                                    spliced.set(t, c, forecast[t * d + c] as f32);
                                }
                            }
                        }
                    }
                    for (acc, x) in want.iter_mut().zip(naive_matmul(&spliced, &w_out[h])) {
                        *acc += x;
                    }
                }
                let err = rel_err(&got, &want);
                worst = worst.max(err);
                if err > 1e-4 {
                    return Err(format!(
                        "D={order} heads={heads} partition {p}: relative error {err:.3e}"
                    ));
                }
                trials += 1;
            }
        }
    }
    Ok(format!(
        "{trials} partitions, worst relative error {worst:.2e} (tol 1e-4)"
    ))
}

fn work_accounting() -> Outcome {
    let cfg = EngineConfig {
        steps: 14,
        warmup: 2,
        tau_kv: 0.3,
        ..EngineConfig::default()
    };
    let w = synthetic_workload(cfg.seed, &cfg, cfg.smoothness);
    let mut engine = Engine::new(&cfg, &w).map_err(|e| e.to_string())?;
    let (n, t_q, t_kv) = (cfg.tokens(), cfg.query_blocks(), cfg.key_blocks());
    let mut dispatch_skipped = 0u64;
    for t in 0..cfg.steps {
        let (_, c) = engine.step(t).map_err(|e| e.to_string())?;
        if step_phase(t, cfg.interval_n) == Phase::Update {
            continue;
        }
        let (mut masked_zero, mut active_rows) = (0u64, 0u64);
        for l in 0..cfg.layers {
            for s in &engine.layer(l).symbols {
                for i in 0..t_q {
                    let active = s.cache_bit(i).map_err(|e| e.to_string())?;
                    if active {
                        active_rows += (((i + 1) * cfg.b_q).min(n) - i * cfg.b_q) as u64;
                    }
                    for j in 0..t_kv {
                        if !(active && s.skip_bit(i, j).map_err(|e| e.to_string())?) {
                            masked_zero += 1;
                        }
                    }
                }
            }
        }
        let total = (cfg.layers * cfg.heads * t_q * t_kv) as u64;
        let measured = sparsity(c.attention.pairs_skipped(), c.attention.pairs_total).map_err(|e| e.to_string())?;
        let configured = sparsity(masked_zero, total).map_err(|e| e.to_string())?;
        if c.attention.pairs_total != total || c.attention.pairs_skipped() != masked_zero || measured != configured {
            return Err(format!(
                "step {t}: skipped {}/{} vs mask {masked_zero}/{total}",
                c.attention.pairs_skipped(),
                c.attention.pairs_total
            ));
        }
        let q_pred = active_rows * (cfg.d_model * cfg.d) as u64;
        if c.gemm_q_macs != q_pred {
            return Err(format!(
                "step {t}: gemm_q {} MACs, active rows predict {q_pred}",
                c.gemm_q_macs
            ));
        }
        dispatch_skipped += masked_zero;
    }
    if dispatch_skipped == 0 {
        return Err("configuration produced no sparsity to account".into());
    }

    let zero = EngineConfig {
        tau_q: 0.0,
        tau_kv: 0.0,
        warmup: 0,
        steps: 8,
        ..EngineConfig::default()
    };
    let w = synthetic_workload(zero.seed, &zero, zero.smoothness);
    let out = run(&zero, &w).map_err(|e| e.to_string())?;
    for c in &out.counters {
        let dense_pairs = (zero.heads * zero.query_blocks() * zero.key_blocks()) as u64;
        let dense_macs = (zero.tokens() * zero.heads * zero.d * zero.d_model) as u64;
        if c.attention.pairs_total != dense_pairs
            || c.attention.pairs_computed != dense_pairs
            || c.gemm_q_macs != dense_macs
            || c.gemm_q_macs_dense != dense_macs
            || c.gemm_o.out_macs != dense_macs
            || c.gemm_o_macs_dense != dense_macs
        {
            return Err(format!(
                "zero-sparsity step {}: actual differs from dense: {c:?}",
                c.step
            ));
        }
    }
    Ok(format!(
        "{dispatch_skipped} dispatch pairs skipped, all counts match masks exactly; zero-sparsity actual == dense"
    ))
}

fn forecast_exactness() -> Outcome {
    let mut r = rng(77);
    let mut worst = 0.0f64;
    for big_n in 2..=8usize {
        let (a, b) = (uniform(&mut r, 16, 8), uniform(&mut r, 16, 8));
        let affine = |t: usize| -> Vec<f64> {
            let x = t as f64 / big_n as f64;
            a.data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| f64::from(*p) + x * f64::from(*q))
                .collect()
        };
        let to_m = |v: Vec<f64>| Matrix::new(16, 8, v.into_iter().map(|x| x as f32).collect()).unwrap();
        let mut entry = CacheEntry::cold();
        update_cache(&mut entry, to_m(affine(0)), 1, 0);
        update_cache(&mut entry, to_m(affine(big_n)), 1, big_n);
        let mut constant = CacheEntry::cold();
        update_cache(&mut constant, a.clone(), 0, 0);
        for k in 1..big_n {
            let got = op_reuse(&entry, k, big_n, 1).map_err(|e| e.to_string())?;
            let err = rel_err(&got, &affine(big_n + k));
            let got0 = op_reuse(&constant, k, big_n, 0).map_err(|e| e.to_string())?;
            let err0 = rel_err_f32(&got0, &a);
            worst = worst.max(err).max(err0);
            if err > 1e-5 || err0 > 1e-5 {
                return Err(format!(
                    "N={big_n} k={k}: affine error {err:.3e}, constant error {err0:.3e}"
                ));
            }
        }
    }
    Ok(format!(
        "affine at order 1 and constant at order 0 exact, worst relative error {worst:.2e} (tol 1e-5)"
    ))
}

/// Ascending-prefix oracle: sort by (score, index), take while the running sum stays within budget.
fn prefix_oracle(scores: &[f32], allowed: &[bool], tau: f64, relative: bool) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| allowed[i]).collect();
    // insertion sort keeps equal scores in index order
    for a in 1..idx.len() {
        let mut b = a;
        while b > 0 && scores[idx[b - 1]] > scores[idx[b]] {
            idx.swap(b - 1, b);
            b -= 1;
        }
    }
    let total: f64 = idx.iter().map(|&i| f64::from(scores[i])).sum();
    let budget = if relative { tau * total } else { tau };
    let mut taken = vec![false; scores.len()];
    if tau == 0.0 {
        return taken;
    }
    let mut acc = 0.0;
    for &i in &idx {
        acc += f64::from(scores[i]);
        if acc > budget {
            break;
        }
        taken[i] = true;
    }
    taken
}

fn selection_oracle() -> Outcome {
    let mut r = rng(8);
    let mut subset_checks = 0;
    for trial in 0..500u64 {
        let len = r.gen_range(1..=32usize);
        let n_t = r.gen_range(0..=3usize);
        let c: Vec<f32> = (0..len)
            .map(|_| if r.gen_bool(0.2) { 0.25 } else { r.gen_range(0.0..1.0) })
            .collect();
        let g: Vec<f32> = (0..len).map(|_| r.gen_range(0.0..1.0)).collect();
        let tau = match trial % 5 {
            0 => 0.0,
            1 => 1.0,
            _ => r.gen_range(0.0..1.0f32),
        };
        let all = vec![true; len];
        let mask = select_cached_blocks(&c, &g, tau, n_t).map_err(|e| e.to_string())?;
        let (pc, pg) = (
            prefix_oracle(&c, &all, f64::from(tau), true),
            prefix_oracle(&g, &all, f64::from(tau), true),
        );
        let want: Vec<bool> = (0..n_t)
            .map(|_| true)
            .chain((0..len).map(|i| !(pc[i] && pg[i])))
            .collect();
        if mask.bits() != want.as_slice() {
            return Err(format!(
                "trial {trial}: cache mask {:?} vs oracle {want:?}",
                mask.bits()
            ));
        }
        if tau == 0.0 && mask.compute_count() != n_t + len {
            return Err(format!("trial {trial}: tau 0 cached something"));
        }
        if tau == 1.0 && mask.compute_count() != n_t {
            return Err(format!("trial {trial}: tau 1 left vision blocks computed"));
        }
        let tau2 = tau + (1.0 - tau) * r.gen_range(0.0..1.0f32);
        let wider = select_cached_blocks(&c, &g, tau2, n_t).map_err(|e| e.to_string())?;
        if (0..n_t + len).any(|i| !mask.get(i) && wider.get(i)) {
            return Err(format!(
                "trial {trial}: cached set at {tau} not inside the set at {tau2}"
            ));
        }

        // skip selection over one compressed map
        let rows = len;
        let cols = len;
        let nt = n_t.min(rows - 1).min(cols - 1);
        let p = Matrix::from_fn(rows, cols, |_, _| r.gen_range(0.01..1.0f32));
        let p = Matrix::from_fn(rows, cols, |i, j| p.get(i, j) / p.row(i).iter().sum::<f32>());
        let map = CompressedAttnMap::new(p.clone(), nt).map_err(|e| e.to_string())?;
        let cache = LogicalCacheMask::new((0..rows).map(|i| i < nt || r.gen_bool(0.7)).collect());
        let protect = trial % 2 == 0;
        let skip = select_skip_blocks(&map, &cache, tau, protect).map_err(|e| e.to_string())?;
        let wider_skip = select_skip_blocks(&map, &cache, tau2, protect).map_err(|e| e.to_string())?;
        for i in 0..rows {
            let row = p.row(i);
            let allowed: Vec<bool> = (0..cols).map(|j| !protect || (j >= nt && j != i)).collect();
            let mut skipped = prefix_oracle(row, &allowed, f64::from(tau), false);
            if skipped.iter().all(|s| *s) {
                // keep the heaviest (highest score, then highest index)
                let heavy = (0..cols)
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)))
                    .unwrap();
                skipped[heavy] = false;
            }
            for (j, &was_skipped) in skipped.iter().enumerate() {
                let want = cache.get(i) && !was_skipped;
                if skip.get(i, j) != want {
                    return Err(format!(
                        "trial {trial}: skip ({i}, {j}) is {} expected {want}",
                        skip.get(i, j)
                    ));
                }
                if !skip.get(i, j) && wider_skip.get(i, j) {
                    return Err(format!(
                        "trial {trial}: skipped set at {tau} not inside the set at {tau2}"
                    ));
                }
            }
            if cache.get(i) && !skip.row(i).contains(&true) {
                return Err(format!("trial {trial}: active row {i} keeps nothing"));
            }
        }
        subset_checks += 2;
    }
    Ok(format!(
        "500 score vectors match the prefix oracles; {subset_checks} monotonicity subset checks hold"
    ))
}

fn error_trend() -> Outcome {
    let mut means = Vec::new();
    for big_n in 3..=7usize {
        let cfg = EngineConfig {
            interval_n: big_n,
            steps: 43,
            ..EngineConfig::default()
        };
        let w = synthetic_workload(cfg.seed, &cfg, cfg.smoothness);
        let sparse = run(&cfg, &w).map_err(|e| e.to_string())?;
        let dense = run_dense(&cfg, &w).map_err(|e| e.to_string())?;
        let errs = trajectory_errors(&sparse.outputs, &dense);
        means.push(errs.iter().sum::<f64>() / errs.len() as f64);
    }
    let text = means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(" <= ");
    ok_or_fail(
        means.windows(2).all(|w| w[0] <= w[1]),
        format!("mean error for N=3..7: {text}"),
        format!("not non-decreasing: {text}"),
    )
}

fn transparency() -> Outcome {
    let cfg = EngineConfig {
        tau_q: 0.0,
        tau_kv: 0.0,
        warmup: 0,
        steps: 18,
        layers: 2,
        ..EngineConfig::default()
    };
    let w = synthetic_workload(cfg.seed, &cfg, cfg.smoothness);
    let sparse = run(&cfg, &w).map_err(|e| e.to_string())?;
    // dense oracle: an independent f64 forward pass
    let mut worst = 0.0f64;
    for (t, outs) in sparse.outputs.iter().enumerate() {
        let x0 = w.input(t);
        let mut x: Vec<f64> = x0.data().iter().map(|&v| f64::from(v)).collect();
        for (l, lw) in w.layers.iter().enumerate() {
            let xm = Matrix::new(cfg.tokens(), cfg.d_model, x.iter().map(|&v| v as f32).collect()).unwrap();
            let mut out = vec![0.0f64; cfg.tokens() * cfg.d_model];
            for h in 0..cfg.heads {
                let proj = |wm: &Matrix, norm: Option<&[f32]>, rope: bool| -> Matrix {
                    let raw = naive_matmul(&xm, wm);
                    let d = cfg.d;
                    let mut m = Matrix::zeros(cfg.tokens(), d);
                    for tok in 0..cfg.tokens() {
                        let row = &raw[tok * d..(tok + 1) * d];
                        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                        let inv = 1.0 / (ms + f64::from(w.eps)).sqrt();
                        let mut y: Vec<f64> = match norm {
                            Some(g) => row.iter().zip(g).map(|(v, g)| v * inv * f64::from(*g)).collect(),
                            None => row.to_vec(),
                        };
                        if rope {
                            for pair in 0..d / 2 {
                                let theta = tok as f64 * 10000f64.powf(-2.0 * pair as f64 / d as f64);
                                let (s, c) = theta.sin_cos();
                                let (a, b) = (y[2 * pair], y[2 * pair + 1]);
                                y[2 * pair] = a * c - b * s;
                                y[2 * pair + 1] = a * s + b * c;
                            }
                        }
                        for (col, v) in y.into_iter().enumerate() {
                            m.set(tok, col, v as f32);
                        }
                    }
                    m
                };
                let q = proj(&lw.w_q[h], Some(&lw.q_norm[h]), true);
                let k = proj(&lw.w_k[h], Some(&lw.k_norm[h]), true);
                let v = proj(&lw.w_v[h], None, false);
                let all: Vec<usize> = (0..cfg.tokens()).collect();
                let o = attention_rows(&q, &k, &v, 0..cfg.tokens(), &all);
                let om = Matrix::new(cfg.tokens(), cfg.d, o.into_iter().map(|v| v as f32).collect()).unwrap();
                for (acc, val) in out.iter_mut().zip(naive_matmul(&om, &lw.w_out[h])) {
                    *acc += val;
                }
            }
            let err = rel_err(&outs[l], &out);
            worst = worst.max(err);
            if err > 1e-5 {
                return Err(format!("step {t} layer {l}: relative error {err:.3e}"));
            }
            for (xi, oi) in x.iter_mut().zip(&out) {
                *xi += oi;
            }
        }
    }
    let results = run_suite(&EngineConfig::default(), &VerifyOptions::default()).map_err(|e| e.to_string())?;
    if let Some(bad) = results.iter().find(|r| !r.passed) {
        return Err(format!(
            "verify failed {}: {} (seed {:?})",
            bad.name, bad.detail, bad.failing_seed
        ));
    }
    Ok(format!(
        "{} steps x {} layers, worst relative error {worst:.2e} (tol 1e-5); verify suite passes on defaults",
        cfg.steps, cfg.layers
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("speedup formula", speedup_formula, Duration::from_secs(1)),
        ("symbol codec", codec_anchor, Duration::from_secs(5)),
        ("dense equivalence", dense_equivalence, Duration::from_secs(30)),
        ("masked-oracle equivalence", masked_oracle, Duration::from_secs(60)),
        ("cached-bias equivalence", cached_bias, Duration::from_secs(30)),
        ("work accounting", work_accounting, Duration::from_secs(10)),
        ("forecast exactness", forecast_exactness, Duration::from_secs(10)),
        ("selection oracle", selection_oracle, Duration::from_secs(10)),
        ("error vs interval", error_trend, Duration::from_secs(60)),
        ("end-to-end transparency", transparency, Duration::from_secs(30)),
    ];
    let mut failed = 0;
    for (i, (name, f, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if elapsed > *limit => Err(format!("{msg}; took {elapsed:.2?}, limit {limit:?}")),
            other => other,
        };
        match outcome {
            Ok(msg) => println!("criterion {:>2} PASS  {name} [{elapsed:.2?}]: {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name} [{elapsed:.2?}]: {msg}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
