//! Browser bindings: mask/symbol inspection, speedup curves and the
//! forecast-error trend. Every export returns a JSON string.

use omni_core::costs::{theoretical_speedup_attention, theoretical_speedup_gemm_o};
use omni_core::pipeline::{run, run_dense, synthetic_workload, trajectory_errors, Engine, EngineConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Small enough to rerun on every slider move.
fn demo_config(tau_q: f32, tau_kv: f32, pool_n: usize) -> EngineConfig {
    EngineConfig {
        n_text: 32,
        n_vision: 224,
        b_q: 16,
        b_k: 16,
        pool_n,
        d: 16,
        d_model: 32,
        heads: 2,
        tau_q,
        tau_kv,
        warmup: 0,
        ..EngineConfig::default()
    }
}

#[derive(Serialize)]
struct HeadSymbols {
    cache: Vec<u8>,
    /// Row-major, `rows × cols`.
    skip: Vec<u8>,
    s_c_hex: String,
    s_s_hex: String,
    storage_bytes: usize,
    sparsity: f64,
}

#[derive(Serialize)]
struct SymbolView {
    rows: usize,
    cols: usize,
    text_blocks: usize,
    heads: Vec<HeadSymbols>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

pub fn symbols_json(tau_q: f32, tau_kv: f32, pool_n: usize, seed: u64) -> Result<String, String> {
    let cfg = EngineConfig {
        seed,
        ..demo_config(tau_q, tau_kv, pool_n)
    };
    let workload = synthetic_workload(seed, &cfg, cfg.smoothness);
    let mut engine = Engine::new(&cfg, &workload).map_err(|e| e.to_string())?;
    engine.step(0).map_err(|e| e.to_string())?;
    let (rows, cols) = (cfg.query_blocks(), cfg.key_blocks());
    let heads = engine
        .layer(0)
        .symbols
        .iter()
        .map(|s| {
            let cache = s.cache_mask();
            let skip = s.skip_mask();
            let mut skipped = 0u64;
            let mut bits = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for j in 0..cols {
                    let on = cache.get(i) && skip.get(i, j);
                    skipped += u64::from(!on);
                    bits.push(u8::from(on));
                }
            }
            HeadSymbols {
                cache: cache.bits().iter().map(|b| u8::from(*b)).collect(),
                skip: bits,
                s_c_hex: hex(s.s_c()),
                s_s_hex: hex(s.s_s()),
                storage_bytes: s.storage_bytes(),
                sparsity: skipped as f64 / (rows * cols) as f64,
            }
        })
        .collect();
    json(&SymbolView {
        rows,
        cols,
        text_blocks: cfg.n_text.div_ceil(cfg.b_q),
        heads,
    })
}

#[derive(Serialize)]
struct SpeedupCurve {
    sparsity: Vec<f64>,
    gemm_o: Vec<f64>,
    /// `None` at full sparsity.
    attention: Vec<Option<f64>>,
}

pub fn speedup_json(interval_n: usize, points: usize) -> Result<String, String> {
    let points = points.max(2);
    let sparsity: Vec<f64> = (0..points).map(|i| i as f64 / (points - 1) as f64).collect();
    let gemm_o = sparsity
        .iter()
        .map(|&s| theoretical_speedup_gemm_o(interval_n, s))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let attention = sparsity
        .iter()
        .map(|&s| theoretical_speedup_attention(s).ok())
        .collect();
    json(&SpeedupCurve {
        sparsity,
        gemm_o,
        attention,
    })
}

#[derive(Serialize)]
struct TrendPoint {
    interval_n: usize,
    mean_rel_err: f64,
    per_step: Vec<f64>,
}

pub fn forecast_trend_json(order_d: usize, smoothness: f32, tau_q: f32, tau_kv: f32) -> Result<String, String> {
    let trend = (3..=7)
        .map(|interval_n| {
            let cfg = EngineConfig {
                interval_n,
                order_d,
                smoothness,
                steps: 22,
                ..demo_config(tau_q, tau_kv, 2)
            };
            let w = synthetic_workload(cfg.seed, &cfg, smoothness);
            let sparse = run(&cfg, &w).map_err(|e| e.to_string())?;
            let dense = run_dense(&cfg, &w).map_err(|e| e.to_string())?;
            let per_step = trajectory_errors(&sparse.outputs, &dense);
            Ok(TrendPoint {
                interval_n,
                mean_rel_err: per_step.iter().sum::<f64>() / per_step.len() as f64,
                per_step,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    json(&trend)
}

fn js<T>(r: Result<T, String>) -> Result<T, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

/// Cache and skip masks of every head at the first Update step.
#[wasm_bindgen]
pub fn symbols(tau_q: f32, tau_kv: f32, pool_n: usize, seed: u64) -> Result<String, JsValue> {
    js(symbols_json(tau_q, tau_kv, pool_n, seed))
}

/// Theoretical speedups over `points` evenly spaced sparsities in [0, 1].
#[wasm_bindgen]
pub fn speedup_curve(interval_n: usize, points: usize) -> Result<String, JsValue> {
    js(speedup_json(interval_n, points))
}

/// Relative error against the dense trajectory for intervals 3 through 7.
#[wasm_bindgen]
pub fn forecast_trend(order_d: usize, smoothness: f32, tau_q: f32, tau_kv: f32) -> Result<String, JsValue> {
    js(forecast_trend_json(order_d, smoothness, tau_q, tau_kv))
}
