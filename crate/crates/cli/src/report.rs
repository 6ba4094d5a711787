use omni_core::costs::{CostReport, StepCost};
use omni_core::pipeline::EngineConfig;
use serde::Serialize;

/// Everything needed to reproduce and audit one run.
#[derive(Serialize)]
pub struct RunManifest {
    pub config: EngineConfig,
    pub seed: u64,
    pub steps: Vec<StepCost>,
    pub aggregate: CostReport,
    pub max_rel_err: f64,
    /// The only field that varies between identical invocations.
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String, String> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| e.to_string())?;
        text.push('\n');
        Ok(text)
    }

    /// Per-step rows in the fixed column order of [`StepCost`].
    pub fn to_csv(&self) -> Result<String, String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.steps {
            w.serialize(row).map_err(|e| e.to_string())?;
        }
        let bytes = w.into_inner().map_err(|e| e.to_string())?;
        String::from_utf8(bytes).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use omni_core::gemm::Phase;

    fn manifest() -> RunManifest {
        let cfg = EngineConfig::default();
        let row = StepCost {
            step: 1,
            phase: Phase::Dispatch,
            attn_pairs_total: 64,
            attn_pairs_skipped: 16,
            gemm_q_macs: 10,
            gemm_o_macs: 12,
            sparsity: 0.25,
            max_rel_err: 0.5,
        };
        let (_, aggregate) = omni_core::costs::account_run(&[], &[], 6).unwrap();
        RunManifest {
            seed: cfg.seed,
            config: cfg,
            steps: vec![row],
            aggregate,
            max_rel_err: 0.5,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn csv_header_and_row() {
        let csv = manifest().to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("step,phase,attn_pairs_total,attn_pairs_skipped,gemm_q_macs,gemm_o_macs,sparsity,max_rel_err")
        );
        assert_eq!(lines.next(), Some("1,dispatch,64,16,10,12,0.25,0.5"));
    }

    #[test]
    fn json_has_aggregate_sparsity() {
        let value: serde_json::Value = serde_json::from_str(&manifest().to_json().unwrap()).unwrap();
        assert!(value["aggregate"]["sparsity"].is_number());
        assert!(value["wall_time_s"].is_number());
    }
}
