//! Work accounting and analytical speedup models.
//!
//! Work is counted in block pairs and multiply-accumulates, never in time.

use serde::{Deserialize, Serialize};

use crate::error::{OmniError, Result};
use crate::gemm::Phase;
use crate::pipeline::StepCounters;

/// `skipped / total`.
pub fn sparsity(skipped: u64, total: u64) -> Result<f64> {
    if total == 0 {
        return Err(OmniError::Parameter("sparsity of an empty workload".into()));
    }
    if skipped > total {
        return Err(OmniError::Parameter(format!("{skipped} skipped out of {total}")));
    }
    Ok(skipped as f64 / total as f64)
}

/// Amortized output-projection speedup over one Update cycle:
/// `N / (1 + (N − 1)(1 − s))`.
pub fn theoretical_speedup_gemm_o(interval_n: usize, s: f64) -> Result<f64> {
    if interval_n == 0 {
        return Err(OmniError::Parameter("interval must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(OmniError::Parameter(format!("sparsity {s} outside [0, 1]")));
    }
    let n = interval_n as f64;
    Ok(n / (1.0 + (n - 1.0) * (1.0 - s)))
}

/// Attention work-reduction bound `1 / (1 − s)`.
pub fn theoretical_speedup_attention(s: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&s) {
        return Err(OmniError::Parameter(format!("sparsity {s} outside [0, 1)")));
    }
    Ok(1.0 / (1.0 - s))
}

/// One row of the per-step report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCost {
    pub step: usize,
    pub phase: Phase,
    pub attn_pairs_total: u64,
    pub attn_pairs_skipped: u64,
    pub gemm_q_macs: u64,
    pub gemm_o_macs: u64,
    pub sparsity: f64,
    pub max_rel_err: f64,
}

/// Aggregate counts over a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub steps: usize,
    pub update_steps: usize,
    pub dispatch_steps: usize,
    pub attn_pairs_total: u64,
    pub attn_pairs_skipped: u64,
    pub attn_pairs_predicted_skipped: u64,
    pub gemm_q_macs_dense: u64,
    pub gemm_q_macs_actual: u64,
    pub gemm_o_macs_dense: u64,
    pub gemm_o_macs_actual: u64,
    /// Update-step MACs projecting difference orders into the cached bias.
    pub gemm_o_bias_macs: u64,
    /// Elementwise ops adding the forecast bias at Dispatch steps.
    pub gemm_o_combine_ops: u64,
    /// Pair sparsity over all steps.
    pub sparsity: f64,
    /// Pair sparsity over Dispatch steps only.
    pub dispatch_sparsity: f64,
    /// Fraction of Dispatch output-projection MACs saved.
    pub gemm_o_dispatch_sparsity: f64,
    pub speedup_attention: Option<f64>,
    pub speedup_gemm_o: f64,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
}

fn ratio_or_zero(skipped: u64, total: u64) -> Result<f64> {
    if total == 0 {
        Ok(0.0)
    } else {
        sparsity(skipped, total)
    }
}

/// Builds per-step rows and the aggregate, cross-checking instrumented
/// counters against the mask predictions.
///
/// `errors[t]` is the step's relative error against the dense trajectory.
pub fn account_run(
    counters: &[StepCounters],
    errors: &[f64],
    interval_n: usize,
) -> Result<(Vec<StepCost>, CostReport)> {
    if errors.len() != counters.len() {
        return Err(OmniError::Internal(format!(
            "{} error entries for {} steps",
            errors.len(),
            counters.len()
        )));
    }
    let mut rows = Vec::with_capacity(counters.len());
    let mut agg = CostReport {
        steps: counters.len(),
        update_steps: 0,
        dispatch_steps: 0,
        attn_pairs_total: 0,
        attn_pairs_skipped: 0,
        attn_pairs_predicted_skipped: 0,
        gemm_q_macs_dense: 0,
        gemm_q_macs_actual: 0,
        gemm_o_macs_dense: 0,
        gemm_o_macs_actual: 0,
        gemm_o_bias_macs: 0,
        gemm_o_combine_ops: 0,
        sparsity: 0.0,
        dispatch_sparsity: 0.0,
        gemm_o_dispatch_sparsity: 0.0,
        speedup_attention: None,
        speedup_gemm_o: 1.0,
        max_rel_err: 0.0,
        mean_rel_err: 0.0,
    };
    let (mut d_total, mut d_skipped, mut d_o_dense, mut d_o_actual) = (0u64, 0u64, 0u64, 0u64);
    for (c, &err) in counters.iter().zip(errors) {
        let phase = c
            .phase
            .ok_or_else(|| OmniError::Internal(format!("step {} has no phase", c.step)))?;
        let a = &c.attention;
        if a.pairs_computed > a.pairs_total {
            return Err(OmniError::Internal(format!(
                "step {}: computed pairs exceed total",
                c.step
            )));
        }
        let skipped = a.pairs_skipped();
        let predicted = match phase {
            Phase::Update => 0,
            Phase::Dispatch => c.predicted_pairs_skipped,
        };
        if skipped != predicted {
            return Err(OmniError::Internal(format!(
                "step {}: {skipped} pairs skipped, masks predict {predicted}",
                c.step
            )));
        }
        if c.gemm_q_macs > c.gemm_q_macs_dense || c.gemm_o.out_macs > c.gemm_o_macs_dense {
            return Err(OmniError::Internal(format!(
                "step {}: actual work exceeds dense",
                c.step
            )));
        }
        match phase {
            Phase::Update => agg.update_steps += 1,
            Phase::Dispatch => {
                agg.dispatch_steps += 1;
                d_total += a.pairs_total;
                d_skipped += skipped;
                d_o_dense += c.gemm_o_macs_dense;
                d_o_actual += c.gemm_o.out_macs;
            }
        }
        agg.attn_pairs_total += a.pairs_total;
        agg.attn_pairs_skipped += skipped;
        agg.attn_pairs_predicted_skipped += predicted;
        agg.gemm_q_macs_dense += c.gemm_q_macs_dense;
        agg.gemm_q_macs_actual += c.gemm_q_macs;
        agg.gemm_o_macs_dense += c.gemm_o_macs_dense;
        agg.gemm_o_macs_actual += c.gemm_o.out_macs;
        agg.gemm_o_bias_macs += c.gemm_o.bias_macs;
        agg.gemm_o_combine_ops += c.gemm_o.combine_ops;
        agg.max_rel_err = agg.max_rel_err.max(err);
        rows.push(StepCost {
            step: c.step,
            phase,
            attn_pairs_total: a.pairs_total,
            attn_pairs_skipped: skipped,
            gemm_q_macs: c.gemm_q_macs,
            gemm_o_macs: c.gemm_o.out_macs,
            sparsity: ratio_or_zero(skipped, a.pairs_total)?,
            max_rel_err: err,
        });
    }
    if !errors.is_empty() {
        agg.mean_rel_err = errors.iter().sum::<f64>() / errors.len() as f64;
    }
    agg.sparsity = ratio_or_zero(agg.attn_pairs_skipped, agg.attn_pairs_total)?;
    agg.dispatch_sparsity = ratio_or_zero(d_skipped, d_total)?;
    agg.gemm_o_dispatch_sparsity = ratio_or_zero(d_o_dense - d_o_actual, d_o_dense)?;
    agg.speedup_attention = theoretical_speedup_attention(agg.dispatch_sparsity).ok();
    agg.speedup_gemm_o = theoretical_speedup_gemm_o(interval_n, agg.gemm_o_dispatch_sparsity)?;
    Ok((rows, agg))
}
