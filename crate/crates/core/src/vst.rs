//! Stitch-tree compute accounting: the extra-cost model and the
//! normalized-gain ledger, plus measured verification against instrumented
//! forward passes.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ImageBatch};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stitch::StitchTree;

/// Query for the block-execution overhead of a stitch tree.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CostQuery {
    /// Constituent model count B.
    pub branches: usize,
    /// Layers counted per model.
    pub effective_depth: usize,
    /// Shared trunk depth n.
    pub stitch_point: usize,
}

/// Extra compute of a `branches`-model stitch tree relative to one model:
/// `(B−1)·(L−n)/L` in transformer-block executions. Stitch-layer compute is
/// excluded here and reported separately by [`measured_overhead`].
pub fn vst_extra_cost(q: &CostQuery) -> Result<f64> {
    if q.branches < 1 {
        return Err(Error::Config("branches must be ≥ 1".into()));
    }
    if q.stitch_point < 1 || q.stitch_point > q.effective_depth {
        return Err(Error::Config(format!(
            "stitch point {} out of range 1..={}",
            q.stitch_point, q.effective_depth
        )));
    }
    let extra = ((q.branches - 1) * (q.effective_depth - q.stitch_point)) as f64;
    Ok(extra / q.effective_depth as f64)
}

/// One metric's (baseline, full, vst) triple.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricTriple {
    pub metric: String,
    /// Single-model baseline score A.
    pub baseline: f64,
    /// All-models score B.
    pub full: f64,
    /// Stitch-tree score D.
    pub vst: f64,
}

/// Per-metric gain entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GainRow {
    pub metric: String,
    pub delta_max: f64,
    pub delta_vst: f64,
    /// `Δ_vst / Δ_max` in percent; `None` when `Δ_max == 0`.
    pub normalized_pct: Option<f64>,
}

/// The normalized-gain ledger over a metric set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GainLedger {
    pub rows: Vec<GainRow>,
    /// Unweighted mean over defined metrics, percent.
    pub average_pct: Option<f64>,
    /// Metrics excluded because `Δ_max == 0`.
    pub excluded: Vec<String>,
}

/// Per-metric and average normalized gains. Gains may exceed 100%; a metric
/// with `Δ_max == 0` is flagged and excluded from the average rather than
/// divided.
pub fn normalized_gain(triples: &[MetricTriple]) -> GainLedger {
    let mut rows = Vec::with_capacity(triples.len());
    let mut excluded = Vec::new();
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in triples {
        let delta_max = t.full - t.baseline;
        let delta_vst = t.vst - t.baseline;
        let normalized_pct = if delta_max == 0.0 {
            excluded.push(t.metric.clone());
            None
        } else {
            let pct = delta_vst / delta_max * 100.0;
            sum += pct;
            count += 1;
            Some(pct)
        };
        rows.push(GainRow {
            metric: t.metric.clone(),
            delta_max,
            delta_vst,
            normalized_pct,
        });
    }
    GainLedger {
        rows,
        average_pct: (count > 0).then(|| sum / count as f64),
        excluded,
    }
}

/// Measured block-execution overhead of a tree against a single-backbone
/// baseline, on an instrumented forward pass. The stitch-layer application
/// count is reported alongside, not folded into the ratio.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MeasuredOverhead {
    pub tree_block_execs: u64,
    pub baseline_block_execs: u64,
    pub stitch_applications: u64,
    pub block_overhead: f64,
}

pub fn measured_overhead<T: Scalar>(
    tree: &StitchTree<T>,
    baseline: &Backbone<T>,
    x: &ImageBatch<T>,
) -> Result<MeasuredOverhead> {
    if baseline.spec.depth != tree.trunk_backbone().spec.depth {
        return Err(Error::Config(
            "baseline and tree must share model depth".into(),
        ));
    }
    tree.reset_counters();
    baseline.reset_block_execs();
    let _ = tree.forward(x)?;
    let tree_blocks = tree.block_execs();
    let stitches = tree.stitch_applications();
    let _ = baseline.run_prefix(x, baseline.spec.depth)?;
    let base_blocks = baseline.block_execs();
    let overhead = (tree_blocks as f64 - base_blocks as f64) / base_blocks as f64;
    Ok(MeasuredOverhead {
        tree_block_execs: tree_blocks,
        baseline_block_execs: base_blocks,
        stitch_applications: stitches,
        block_overhead: overhead,
    })
}

/// The appendix cost-table inputs: B ∈ {2..5} × n ∈ {6, 14, 22} at L = 23.
pub fn paper_cost_table() -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for branches in 2..=5 {
        for &n in &[6usize, 14, 22] {
            let q = CostQuery {
                branches,
                effective_depth: 23,
                stitch_point: n,
            };
            out.push((branches, n, vst_extra_cost(&q).unwrap()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(b: usize, l: usize, n: usize) -> CostQuery {
        CostQuery {
            branches: b,
            effective_depth: l,
            stitch_point: n,
        }
    }

    #[test]
    fn worked_example_27_over_23() {
        let f = vst_extra_cost(&q(4, 23, 14)).unwrap();
        assert!((f - 27.0 / 23.0).abs() < 1e-15);
        assert_eq!((f * 1000.0).round() / 10.0, 117.4);
    }

    #[test]
    fn two_models_deepest_point_costs_one_layer() {
        let f = vst_extra_cost(&q(2, 23, 22)).unwrap();
        assert!((f - 1.0 / 23.0).abs() < 1e-15);
        assert!((f * 100.0 - 4.3).abs() < 0.05);
    }

    #[test]
    fn single_model_adds_nothing() {
        assert_eq!(vst_extra_cost(&q(1, 23, 6)).unwrap(), 0.0);
        assert_eq!(vst_extra_cost(&q(1, 8, 8)).unwrap(), 0.0);
    }

    #[test]
    fn invariant_violations_are_config_errors() {
        assert!(vst_extra_cost(&q(2, 23, 0)).is_err());
        assert!(vst_extra_cost(&q(2, 23, 24)).is_err());
        assert!(vst_extra_cost(&q(0, 23, 6)).is_err());
    }

    #[test]
    fn cost_monotone_decreasing_in_n_increasing_in_b() {
        for b in 2..=5 {
            for n in 1..22 {
                let lo = vst_extra_cost(&q(b, 23, n + 1)).unwrap();
                let hi = vst_extra_cost(&q(b, 23, n)).unwrap();
                assert!(hi > lo);
            }
        }
        for n in [6, 14, 22] {
            for b in 1..5 {
                assert!(
                    vst_extra_cost(&q(b + 1, 23, n)).unwrap()
                        > vst_extra_cost(&q(b, 23, n)).unwrap()
                );
            }
        }
    }

    #[test]
    fn gain_is_zero_when_vst_equals_baseline() {
        let triples = vec![
            MetricTriple {
                metric: "m1".into(),
                baseline: 50.0,
                full: 60.0,
                vst: 50.0,
            },
            MetricTriple {
                metric: "m2".into(),
                baseline: 10.0,
                full: 30.0,
                vst: 10.0,
            },
        ];
        let ledger = normalized_gain(&triples);
        for r in &ledger.rows {
            assert_eq!(r.normalized_pct, Some(0.0));
        }
        assert_eq!(ledger.average_pct, Some(0.0));
    }

    #[test]
    fn zero_delta_max_is_flagged_not_divided() {
        let ledger = normalized_gain(&[MetricTriple {
            metric: "flat".into(),
            baseline: 5.0,
            full: 5.0,
            vst: 6.0,
        }]);
        assert_eq!(ledger.rows[0].normalized_pct, None);
        assert_eq!(ledger.excluded, vec!["flat".to_string()]);
        assert_eq!(ledger.average_pct, None);
    }

    #[test]
    fn gain_invariant_under_common_affine_rescale() {
        let base = MetricTriple {
            metric: "m".into(),
            baseline: 40.0,
            full: 55.0,
            vst: 50.0,
        };
        let g0 = normalized_gain(&[base.clone()]).rows[0]
            .normalized_pct
            .unwrap();
        let scaled = MetricTriple {
            metric: "m".into(),
            baseline: 40.0 * 3.0 + 7.0,
            full: 55.0 * 3.0 + 7.0,
            vst: 50.0 * 3.0 + 7.0,
        };
        let g1 = normalized_gain(&[scaled]).rows[0].normalized_pct.unwrap();
        assert!((g0 - g1).abs() < 1e-9);
    }
}
