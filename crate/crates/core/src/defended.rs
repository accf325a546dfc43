//! Output of the trace generators and batch bookkeeping shared by them.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::scalar::Scalar;
use crate::trace::{bandwidth_overhead, round_bursts, BurstTrace, TraceError};

/// A source trace together with the insertion-only perturbation applied to it.
#[derive(Debug, Clone, PartialEq)]
pub struct DefendedTrace<S> {
    pub original: BurstTrace<S>,
    /// Whole-packet trace actually sent: `original + delta`.
    pub defended: BurstTrace<S>,
    pub delta: Vec<S>,
    pub overhead: S,
    pub iterations_used: usize,
    pub restarts: usize,
    /// Detector confidence on the source class, measured on the working trace
    /// before rounding to whole packets.
    pub final_source_confidence: S,
    pub escaped: bool,
}

impl<S: Scalar> DefendedTrace<S> {
    /// Rounds `original + raw_delta` up to whole packets and recomputes the delta.
    pub fn package(
        original: &BurstTrace<S>,
        raw_delta: &[S],
        iterations_used: usize,
        restarts: usize,
        final_source_confidence: S,
        escaped: bool,
    ) -> Result<Self, TraceError> {
        if raw_delta.len() != original.fixed_len() {
            return Err(TraceError::LengthMismatch {
                expected: original.fixed_len(),
                actual: raw_delta.len(),
            });
        }
        let working: Vec<S> = original
            .bursts()
            .iter()
            .zip(raw_delta)
            .map(|(&o, &d)| o + d.max(S::zero()))
            .collect();
        let defended = round_bursts(&BurstTrace::from_vec(original.label, working)?);
        let delta = defended
            .bursts()
            .iter()
            .zip(original.bursts())
            .map(|(&d, &o)| d - o)
            .collect();
        let overhead = bandwidth_overhead(original, &defended)?;
        Ok(Self {
            original: original.clone(),
            defended,
            delta,
            overhead,
            iterations_used,
            restarts,
            final_source_confidence,
            escaped,
        })
    }

    pub fn report_line(&self, index: usize, mode: Option<&str>) -> ReportLine {
        ReportLine {
            index,
            label: self.original.label,
            overhead: self.overhead.to_f64_lossy(),
            iterations: self.iterations_used,
            restarts: self.restarts,
            escaped: self.escaped,
            final_confidence: self.final_source_confidence.to_f64_lossy(),
            mode: mode.map(str::to_string),
        }
    }
}

/// One line of the JSON-lines sidecar report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportLine {
    pub index: usize,
    pub label: usize,
    pub overhead: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub escaped: bool,
    pub final_confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub count: usize,
    pub failures: usize,
    pub mean_overhead: Option<f64>,
    pub p50_overhead: Option<f64>,
    pub p90_overhead: Option<f64>,
    pub max_overhead: Option<f64>,
    pub escape_rate: Option<f64>,
    /// Number of restarts (or target changes) mapped to how many traces used that many.
    pub restart_histogram: BTreeMap<usize, usize>,
}

fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

impl BatchSummary {
    pub fn from_traces<S: Scalar>(traces: &[DefendedTrace<S>], failures: usize) -> Self {
        let mut summary = Self {
            count: traces.len(),
            failures,
            ..Self::default()
        };
        if traces.is_empty() {
            return summary;
        }
        let mut overheads: Vec<f64> = traces.iter().map(|t| t.overhead.to_f64_lossy()).collect();
        overheads.sort_by(f64::total_cmp);
        let n = overheads.len() as f64;
        summary.mean_overhead = Some(overheads.iter().sum::<f64>() / n);
        summary.p50_overhead = Some(nearest_rank(&overheads, 0.5));
        summary.p90_overhead = Some(nearest_rank(&overheads, 0.9));
        summary.max_overhead = overheads.last().copied();
        summary.escape_rate = Some(traces.iter().filter(|t| t.escaped).count() as f64 / n);
        for t in traces {
            *summary.restart_histogram.entry(t.restarts).or_insert(0) += 1;
        }
        summary
    }
}

#[derive(Debug, Clone)]
pub struct BatchResult<S> {
    /// `(index in the input dataset, defended trace)`, ascending by index.
    pub traces: Vec<(usize, DefendedTrace<S>)>,
    /// `(index, error message)` for sources that could not be defended.
    pub failures: Vec<(usize, String)>,
    pub summary: BatchSummary,
}

impl<S: Scalar> BatchResult<S> {
    pub fn defended_dataset(&self, classes: usize) -> LabeledDataset<BurstTrace<S>> {
        LabeledDataset::new(
            classes,
            self.traces
                .iter()
                .map(|(_, t)| t.defended.clone())
                .collect(),
        )
    }

    pub fn report_lines(&self, mode: Option<&str>) -> Vec<ReportLine> {
        self.traces
            .iter()
            .map(|(i, t)| t.report_line(*i, mode))
            .collect()
    }
}

/// Seed for the trace at `index` of a batch seeded with `seed`.
pub fn trace_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

/// Runs `defend(index, source, seed)` over the dataset on the current rayon
/// pool. Output order and content do not depend on the number of workers.
pub fn run_batch<S, E, F>(
    dataset: &LabeledDataset<BurstTrace<S>>,
    seed: u64,
    defend: F,
) -> BatchResult<S>
where
    S: Scalar,
    E: std::fmt::Display,
    F: Fn(usize, &BurstTrace<S>, u64) -> Result<DefendedTrace<S>, E> + Sync,
{
    let outcomes: Vec<(usize, Result<DefendedTrace<S>, String>)> = dataset
        .traces
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            (
                i,
                defend(i, t, trace_seed(seed, i)).map_err(|e| e.to_string()),
            )
        })
        .collect();
    let mut traces = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for (i, r) in outcomes {
        match r {
            Ok(t) => traces.push((i, t)),
            Err(e) => failures.push((i, e)),
        }
    }
    let plain: Vec<DefendedTrace<S>> = traces.iter().map(|(_, t)| t.clone()).collect();
    let summary = BatchSummary::from_traces(&plain, failures.len());
    BatchResult {
        traces,
        failures,
        summary,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bt(v: &[f64]) -> BurstTrace<f64> {
        BurstTrace::from_values(0, v, 4).unwrap()
    }

    #[test]
    fn packaging_rounds_up_and_recomputes_delta() {
        let t = DefendedTrace::package(&bt(&[2.0, 3.0]), &[0.5, 0.0, 1.2, 0.0], 3, 1, 0.2, false)
            .unwrap();
        assert_eq!(t.defended.bursts(), &[3.0, 3.0, 2.0, 0.0]);
        assert_eq!(t.delta, vec![1.0, 0.0, 2.0, 0.0]);
        assert!((t.overhead - 0.6).abs() < 1e-12);
        let line = t.report_line(7, Some("hybrid_capped"));
        assert_eq!(line.index, 7);
        let json = serde_json::to_string(&line).unwrap();
        assert!(json.contains("\"mode\":\"hybrid_capped\""));
        let plain = serde_json::to_string(&t.report_line(7, None)).unwrap();
        assert_eq!(
            plain,
            r#"{"index":7,"label":0,"overhead":0.6,"iterations":3,"restarts":1,"escaped":false,"final_confidence":0.2}"#
        );
    }

    #[test]
    fn summary_statistics() {
        let mk = |extra: f64, restarts: usize, escaped: bool| {
            let o = BurstTrace::from_values(0, &[10.0], 1).unwrap();
            DefendedTrace::package(&o, &[extra], 1, restarts, 0.0, escaped).unwrap()
        };
        let traces = vec![
            mk(1.0, 0, true),
            mk(2.0, 0, true),
            mk(3.0, 2, false),
            mk(4.0, 0, true),
        ];
        let s = BatchSummary::from_traces(&traces, 1);
        assert_eq!(s.count, 4);
        assert!((s.mean_overhead.unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(s.p50_overhead, Some(0.2));
        assert_eq!(s.p90_overhead, Some(0.4));
        assert_eq!(s.escape_rate, Some(0.75));
        assert_eq!(s.restart_histogram.get(&0), Some(&3));
        assert_eq!(
            BatchSummary::from_traces::<f64>(&[], 0),
            BatchSummary::default()
        );
    }
}
