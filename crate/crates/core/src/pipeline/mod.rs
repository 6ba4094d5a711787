//! Update/Dispatch scheduler.
//!
//! Step `t` is an Update step iff `t % interval_n == 0`. Update steps run
//! every projection and every attention tile densely, regenerate the
//! per-head symbols from the fresh queries and keys, refresh the feature
//! cache and rebuild the cached output bias. The Dispatch steps in between
//! reuse those symbols unchanged.

mod config;
mod workload;

use serde::{Deserialize, Serialize};

pub use config::{Drift, EngineConfig};
pub use workload::{random_matrix, synthetic_workload, LayerWeights, SyntheticWorkload};

use crate::attention::{omni_attention, AttentionCounters, AttentionParams, FeatureCache, ReuseMode};
use crate::error::{OmniError, Result};
use crate::gemm::{gemm_o_dispatch, gemm_o_update, gemm_q, project_dense, CachedBias, GemmOCounters, Phase};
use crate::policy::{
    compressed_attention, degrade_to_full_cache, ramp_threshold, select_cached_blocks, select_skip_blocks,
    text_to_vision_guidance, vision_to_text_contribution,
};
use crate::reference::{dense_output_projection, predicted_skipped_pairs};
use crate::symbols::SymbolBuffer;
use crate::tensor::{dense_attention, relative_error, Matrix};

/// Update or Dispatch, as a pure function of the step index.
pub fn step_phase(step: usize, interval_n: usize) -> Phase {
    if step.is_multiple_of(interval_n) {
        Phase::Update
    } else {
        Phase::Dispatch
    }
}

/// Work counters of one step, summed over layers and heads.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepCounters {
    pub step: usize,
    pub phase: Option<Phase>,
    pub elapsed_k: usize,
    pub attention: AttentionCounters,
    /// Skipped pairs implied by the governing masks.
    pub predicted_pairs_skipped: u64,
    pub gemm_q_macs: u64,
    pub gemm_q_macs_dense: u64,
    pub gemm_o: GemmOCounters,
    pub gemm_o_macs_dense: u64,
    /// Cached (head, query block) tiles at a Dispatch step.
    pub cached_tiles: u64,
}

impl StepCounters {
    fn merge(&mut self, other: &StepCounters) {
        self.attention.merge(&other.attention);
        self.predicted_pairs_skipped += other.predicted_pairs_skipped;
        self.gemm_q_macs += other.gemm_q_macs;
        self.gemm_q_macs_dense += other.gemm_q_macs_dense;
        self.gemm_o.out_macs += other.gemm_o.out_macs;
        self.gemm_o.bias_macs += other.gemm_o.bias_macs;
        self.gemm_o.combine_ops += other.gemm_o.combine_ops;
        self.gemm_o_macs_dense += other.gemm_o_macs_dense;
        self.cached_tiles += other.cached_tiles;
    }
}

/// Per-layer state carried across steps.
#[derive(Clone, Debug)]
pub struct LayerState {
    pub cache: FeatureCache,
    pub symbols: Vec<SymbolBuffer>,
    pub bias: Option<CachedBias>,
    pub updates: usize,
}

impl LayerState {
    pub fn new(cfg: &EngineConfig) -> Self {
        Self {
            cache: FeatureCache::new(cfg.heads, cfg.query_blocks(), cfg.order_d),
            symbols: Vec::new(),
            bias: None,
            updates: 0,
        }
    }
}

/// Symbols for one head from its fresh queries and keys.
pub fn generate_symbols(q: &Matrix, k: &Matrix, cfg: &EngineConfig, tau_q: f32, tau_kv: f32) -> Result<SymbolBuffer> {
    let map = compressed_attention(q, k, cfg.pool_n * cfg.b_q, cfg.pool_n * cfg.b_k, cfg.n_text)?;
    let contribution = vision_to_text_contribution(&map);
    let guidance = text_to_vision_guidance(&map);
    let cache = select_cached_blocks(&contribution, &guidance, tau_q, map.n_t)?;
    let cache = degrade_to_full_cache(&cache, map.n_t, cfg.s_q);
    let skip = select_skip_blocks(&map, &cache, tau_kv, cfg.protect_columns)?;
    let (t_q, t_kv) = (cfg.query_blocks(), cfg.key_blocks());
    SymbolBuffer::encode(
        &cache.expand(cfg.pool_n, t_q),
        &skip.expand(cfg.pool_n, t_q, t_kv),
        cfg.pool_n,
    )
}

fn project_keys_values(x: &Matrix, w: &LayerWeights, eps: f32) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let keys = w
        .w_k
        .iter()
        .zip(&w.k_norm)
        .map(|(wk, norm)| project_dense(x, wk, Some(norm), eps))
        .collect::<Result<Vec<_>>>()?;
    let values = w
        .w_v
        .iter()
        .map(|wv| project_dense(x, wv, None, eps))
        .collect::<Result<Vec<_>>>()?;
    Ok((keys, values))
}

fn dense_macs(cfg: &EngineConfig) -> u64 {
    (cfg.tokens() * cfg.heads * cfg.d * cfg.d_model) as u64
}

/// Full computation plus symbol, cache and bias refresh for one layer.
pub fn update_step(
    state: &mut LayerState,
    weights: &LayerWeights,
    x: &Matrix,
    step: usize,
    cfg: &EngineConfig,
    eps: f32,
) -> Result<(Matrix, StepCounters)> {
    let (queries, q_macs) = gemm_q(x, &weights.w_q, &weights.q_norm, eps, &[], Phase::Update, cfg.b_q, 0.0)?;
    let (keys, values) = project_keys_values(x, weights, eps)?;
    let tau_q = ramp_threshold(cfg.tau_q, step, cfg.warmup);
    let tau_kv = ramp_threshold(cfg.tau_kv, step, cfg.warmup);

    let per_head = crate::par::map_range(cfg.heads, |h| -> Result<(SymbolBuffer, Matrix)> {
        let symbols = generate_symbols(&queries[h], &keys[h], cfg, tau_q, tau_kv)?;
        let o = dense_attention(&queries[h], &keys[h], &values[h])?;
        Ok((symbols, o))
    });
    let mut symbols = Vec::with_capacity(cfg.heads);
    let mut outputs = Vec::with_capacity(cfg.heads);
    for r in per_head {
        let (s, o) = r?;
        symbols.push(s);
        outputs.push(o);
    }
    for (h, o) in outputs.iter().enumerate() {
        state.cache.update_head(h, o, cfg.b_q, step);
    }
    let (out, bias, gemm_o) = gemm_o_update(&outputs, &weights.w_out, &symbols, &state.cache, cfg.b_q)?;
    state.symbols = symbols;
    state.bias = Some(bias);
    state.updates += 1;

    let pairs = (cfg.query_blocks() * cfg.key_blocks() * cfg.heads) as u64;
    let counters = StepCounters {
        step,
        phase: Some(Phase::Update),
        elapsed_k: 0,
        attention: AttentionCounters {
            pairs_total: pairs,
            pairs_computed: pairs,
            active_tiles: (cfg.query_blocks() * cfg.heads) as u64,
            ..Default::default()
        },
        gemm_q_macs: q_macs,
        gemm_q_macs_dense: dense_macs(cfg),
        gemm_o,
        gemm_o_macs_dense: dense_macs(cfg),
        ..Default::default()
    };
    Ok((out, counters))
}

/// Sparse execution under the symbols of the governing Update step.
pub fn dispatch_step(
    state: &LayerState,
    weights: &LayerWeights,
    x: &Matrix,
    step: usize,
    elapsed_k: usize,
    cfg: &EngineConfig,
    eps: f32,
) -> Result<(Matrix, StepCounters)> {
    let bias = state
        .bias
        .as_ref()
        .ok_or_else(|| OmniError::State("dispatch step before any update step".into()))?;
    let placeholder = if cfg.debug_poison { f32::NAN } else { 0.0 };
    let (queries, q_macs) = gemm_q(
        x,
        &weights.w_q,
        &weights.q_norm,
        eps,
        &state.symbols,
        Phase::Dispatch,
        cfg.b_q,
        placeholder,
    )?;
    let (keys, values) = project_keys_values(x, weights, eps)?;
    let params = AttentionParams {
        b_q: cfg.b_q,
        b_k: cfg.b_k,
        interval_n: cfg.interval_n,
        order_d: cfg.order_d,
        mode: ReuseMode::Bias,
        poison_unwritten: cfg.debug_poison,
    };
    let per_head = crate::par::map_range(cfg.heads, |h| {
        omni_attention(
            &queries[h],
            &keys[h],
            &values[h],
            &state.symbols[h],
            None,
            elapsed_k,
            &params,
        )
    });
    let mut outputs = Vec::with_capacity(cfg.heads);
    let mut attention = AttentionCounters::default();
    for r in per_head {
        let (o, c) = r?;
        attention.merge(&c);
        outputs.push(o);
    }
    let (out, gemm_o) = gemm_o_dispatch(
        &outputs,
        &weights.w_out,
        &state.symbols,
        bias,
        elapsed_k,
        cfg.interval_n,
        cfg.order_d,
    )?;
    let predicted = state
        .symbols
        .iter()
        .map(|s| predicted_skipped_pairs(&s.cache_mask(), &s.skip_mask()))
        .sum();
    let counters = StepCounters {
        step,
        phase: Some(Phase::Dispatch),
        elapsed_k,
        cached_tiles: attention.cached_tiles,
        attention,
        predicted_pairs_skipped: predicted,
        gemm_q_macs: q_macs,
        gemm_q_macs_dense: dense_macs(cfg),
        gemm_o,
        gemm_o_macs_dense: dense_macs(cfg),
    };
    Ok((out, counters))
}

/// Outputs and counters of one run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    /// `outputs[step][layer]`: the attention block output of each layer.
    pub outputs: Vec<Vec<Matrix>>,
    pub counters: Vec<StepCounters>,
}

/// The stateful engine: one [`LayerState`] per layer.
pub struct Engine<'w> {
    cfg: EngineConfig,
    workload: &'w SyntheticWorkload,
    layers: Vec<LayerState>,
}

impl<'w> Engine<'w> {
    pub fn new(cfg: &EngineConfig, workload: &'w SyntheticWorkload) -> Result<Self> {
        cfg.validate()?;
        if workload.layers.len() != cfg.layers {
            return Err(OmniError::Parameter(format!(
                "workload has {} layers, config {}",
                workload.layers.len(),
                cfg.layers
            )));
        }
        Ok(Self {
            cfg: cfg.clone(),
            workload,
            layers: (0..cfg.layers).map(|_| LayerState::new(cfg)).collect(),
        })
    }

    pub fn layer(&self, l: usize) -> &LayerState {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerState {
        &mut self.layers[l]
    }

    /// Runs step `step` through every layer. Layers are chained residually.
    pub fn step(&mut self, step: usize) -> Result<(Vec<Matrix>, StepCounters)> {
        let cfg = &self.cfg;
        let elapsed_k = step % cfg.interval_n;
        let phase = step_phase(step, cfg.interval_n);
        let mut x = self.workload.input(step);
        let mut outs = Vec::with_capacity(cfg.layers);
        let mut total = StepCounters {
            step,
            phase: Some(phase),
            elapsed_k,
            ..Default::default()
        };
        for (state, weights) in self.layers.iter_mut().zip(&self.workload.layers) {
            let (out, c) = match phase {
                Phase::Update => update_step(state, weights, &x, step, cfg, self.workload.eps)?,
                Phase::Dispatch => dispatch_step(state, weights, &x, step, elapsed_k, cfg, self.workload.eps)?,
            };
            total.merge(&c);
            x.axpy(1.0, &out);
            outs.push(out);
        }
        Ok((outs, total))
    }
}

/// Runs every step in inference order.
pub fn run(cfg: &EngineConfig, workload: &SyntheticWorkload) -> Result<RunOutput> {
    let mut engine = Engine::new(cfg, workload)?;
    let mut outputs = Vec::with_capacity(cfg.steps);
    let mut counters = Vec::with_capacity(cfg.steps);
    for t in 0..cfg.steps {
        let (o, c) = engine.step(t)?;
        outputs.push(o);
        counters.push(c);
    }
    Ok(RunOutput { outputs, counters })
}

/// The same stack computed densely at every step: `outputs[step][layer]`.
pub fn run_dense(cfg: &EngineConfig, workload: &SyntheticWorkload) -> Result<Vec<Vec<Matrix>>> {
    cfg.validate()?;
    (0..cfg.steps)
        .map(|t| {
            let mut x = workload.input(t);
            let mut outs = Vec::with_capacity(cfg.layers);
            for w in &workload.layers {
                let mut heads = Vec::with_capacity(cfg.heads);
                for h in 0..cfg.heads {
                    let q = project_dense(&x, &w.w_q[h], Some(&w.q_norm[h]), workload.eps)?;
                    let k = project_dense(&x, &w.w_k[h], Some(&w.k_norm[h]), workload.eps)?;
                    let v = project_dense(&x, &w.w_v[h], None, workload.eps)?;
                    heads.push(dense_attention(&q, &k, &v)?);
                }
                let out = dense_output_projection(&heads, &w.w_out)?;
                x.axpy(1.0, &out);
                outs.push(out);
            }
            Ok(outs)
        })
        .collect()
}

/// Per-step relative error (max over layers) of `sparse` against `dense`.
pub fn trajectory_errors(sparse: &[Vec<Matrix>], dense: &[Vec<Matrix>]) -> Vec<f64> {
    sparse
        .iter()
        .zip(dense)
        .map(|(s, d)| s.iter().zip(d).map(|(a, b)| relative_error(a, b)).fold(0.0, f64::max))
        .collect()
}
