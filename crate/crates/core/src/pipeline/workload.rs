//! Deterministic synthetic stand-in for one DiT attention stack.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Drift, EngineConfig};
use crate::tensor::Matrix;

/// Uniform `[-scale, scale)` matrix.
pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

/// Projection weights of one layer, one matrix per head.
#[derive(Clone, Debug)]
pub struct LayerWeights {
    /// `d_model × d`
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
    /// `d × d_model`
    pub w_out: Vec<Matrix>,
    pub q_norm: Vec<Vec<f32>>,
    pub k_norm: Vec<Vec<f32>>,
}

impl LayerWeights {
    fn random(rng: &mut impl Rng, cfg: &EngineConfig) -> Self {
        let in_scale = (3.0 / cfg.d_model as f32).sqrt();
        let out_scale = (3.0 / (cfg.heads * cfg.d) as f32).sqrt();
        let mut per_head = |rows, cols, scale| -> Vec<Matrix> {
            (0..cfg.heads).map(|_| random_matrix(rng, rows, cols, scale)).collect()
        };
        let w_q = per_head(cfg.d_model, cfg.d, in_scale);
        let w_k = per_head(cfg.d_model, cfg.d, in_scale);
        let w_v = per_head(cfg.d_model, cfg.d, in_scale);
        let w_out = per_head(cfg.d, cfg.d_model, out_scale);
        let mut norms = || -> Vec<Vec<f32>> {
            (0..cfg.heads)
                .map(|_| (0..cfg.d).map(|_| rng.gen_range(1.0..2.0)).collect())
                .collect()
        };
        let q_norm = norms();
        let k_norm = norms();
        Self {
            w_q,
            w_k,
            w_v,
            w_out,
            q_norm,
            k_norm,
        }
    }
}

/// Per-step inputs plus fixed layer weights, all derived from one seed.
#[derive(Clone, Debug)]
pub struct SyntheticWorkload {
    base: Matrix,
    dir1: Matrix,
    dir2: Matrix,
    drift: Drift,
    smoothness: f32,
    pub layers: Vec<LayerWeights>,
    pub eps: f32,
}

impl SyntheticWorkload {
    /// Input of the first layer at `step`.
    pub fn input(&self, step: usize) -> Matrix {
        let u = self.smoothness * step as f32;
        let (a1, a2) = match self.drift {
            Drift::Smooth => (u.sin(), 1.0 - u.cos()),
            Drift::Linear => (u, 0.0),
            Drift::Quadratic => (u, u * u),
        };
        let mut x = self.base.clone();
        if a1 != 0.0 {
            x.axpy(a1, &self.dir1);
        }
        if a2 != 0.0 {
            x.axpy(a2, &self.dir2);
        }
        x
    }
}

/// Builds the workload for `cfg` from `seed`, overriding the config's drift amount.
pub fn synthetic_workload(seed: u64, cfg: &EngineConfig, smoothness: f32) -> SyntheticWorkload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.tokens();
    let base = random_matrix(&mut rng, n, cfg.d_model, 1.0);
    let dir1 = random_matrix(&mut rng, n, cfg.d_model, 1.0);
    let dir2 = random_matrix(&mut rng, n, cfg.d_model, 1.0);
    let layers = (0..cfg.layers).map(|_| LayerWeights::random(&mut rng, cfg)).collect();
    SyntheticWorkload {
        base,
        dir1,
        dir2,
        drift: cfg.drift,
        smoothness,
        layers,
        eps: 1e-6,
    }
}
