use serde::{Deserialize, Serialize};

use crate::error::{OmniError, Result};

/// How the synthetic input drifts across steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Drift {
    /// `base + sin(s·t)·D₁ + (1 − cos(s·t))·D₂`.
    #[default]
    Smooth,
    /// `base + (s·t)·D₁`, exactly affine in the step index.
    Linear,
    /// `base + (s·t)·D₁ + (s·t)²·D₂`.
    Quadratic,
}

/// Workload shape and sparsity hyperparameters.
///
/// Read from a flat JSON object; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub n_text: usize,
    pub n_vision: usize,
    pub b_q: usize,
    pub b_k: usize,
    /// Blocks per compressed group along each axis.
    pub pool_n: usize,
    /// Head dimension.
    pub d: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Query-side caching budget.
    pub tau_q: f32,
    /// Key/value skipping budget.
    pub tau_kv: f32,
    /// Steps per Update cycle.
    pub interval_n: usize,
    /// Forecast order.
    pub order_d: usize,
    /// Below this computed fraction of vision blocks, cache all of them.
    pub s_q: f32,
    pub steps: usize,
    /// Steps over which `tau_q` and `tau_kv` ramp up from 0.
    pub warmup: usize,
    pub seed: u64,
    #[serde(default = "one")]
    pub layers: usize,
    /// Never skip text key columns or the diagonal block.
    #[serde(default = "yes")]
    pub protect_columns: bool,
    #[serde(default = "default_smoothness")]
    pub smoothness: f32,
    #[serde(default)]
    pub drift: Drift,
    /// Fill never-read placeholder rows with NaN.
    #[serde(default)]
    pub debug_poison: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_smoothness() -> f32 {
    0.05
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            n_text: 32,
            n_vision: 224,
            b_q: 16,
            b_k: 16,
            pool_n: 2,
            d: 16,
            d_model: 64,
            heads: 4,
            tau_q: 0.5,
            tau_kv: 0.15,
            interval_n: 6,
            order_d: 1,
            s_q: 0.3,
            steps: 24,
            warmup: 6,
            seed: 42,
            layers: 1,
            protect_columns: true,
            smoothness: default_smoothness(),
            drift: Drift::Smooth,
            debug_poison: false,
        }
    }
}

impl EngineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| OmniError::Parameter(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn tokens(&self) -> usize {
        self.n_text + self.n_vision
    }

    pub fn query_blocks(&self) -> usize {
        self.tokens().div_ceil(self.b_q)
    }

    pub fn key_blocks(&self) -> usize {
        self.tokens().div_ceil(self.b_k)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(OmniError::Parameter(msg));
        if self.tokens() == 0 {
            return fail("workload has no tokens".into());
        }
        for (name, v) in [
            ("b_q", self.b_q),
            ("b_k", self.b_k),
            ("pool_n", self.pool_n),
            ("d", self.d),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("interval_n", self.interval_n),
            ("steps", self.steps),
            ("layers", self.layers),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if !self.d.is_multiple_of(2) {
            return fail(format!("head dimension {} must be even for rotary encoding", self.d));
        }
        if self.b_q != self.b_k {
            return fail(format!(
                "b_q ({}) and b_k ({}) must match so vision rows and columns of the pooled map line up",
                self.b_q, self.b_k
            ));
        }
        for (name, v) in [("tau_q", self.tau_q), ("tau_kv", self.tau_kv), ("s_q", self.s_q)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(self.smoothness.is_finite() && self.smoothness >= 0.0) {
            return fail(format!(
                "smoothness = {} must be finite and non-negative",
                self.smoothness
            ));
        }
        Ok(())
    }
}
