//! Per-scan run records and their summary.
//!
//! Condition numbers of rank-deficient problems are `+∞` in memory and
//! serialize as `null`.

use serde::Serialize;

use crate::daaskf::SlideDecision;
use crate::evaluation::ApeResult;
use crate::harness::config::RunConfig;

/// Wall-clock time of each pipeline stage, ms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimes {
    pub propagate: f64,
    pub associate: f64,
    pub select: f64,
    pub update: f64,
    pub slide: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.propagate + self.associate + self.select + self.update + self.slide
    }

    fn add(&mut self, o: &StageTimes) {
        self.propagate += o.propagate;
        self.associate += o.associate;
        self.select += o.select;
        self.update += o.update;
        self.slide += o.slide;
    }

    fn scale(&mut self, k: f64) {
        self.propagate *= k;
        self.associate *= k;
        self.select *= k;
        self.update *= k;
        self.slide *= k;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanRecord {
    pub index: usize,
    pub t: f64,
    /// Current-scan rows only, before any selection.
    pub chi_scan: f64,
    /// Current and active-pose rows before pruning.
    pub chi_pre_prune: f64,
    pub chi_post_prune: f64,
    /// Rows entering the update, fixed-pose rows included.
    pub chi_post_compensate: f64,
    pub points: usize,
    pub rows_total: usize,
    pub rows_pruned: usize,
    pub rows_compensated: usize,
    pub rows_used: usize,
    pub iterations: usize,
    pub converged: bool,
    pub slide: SlideDecision,
    pub aborted: bool,
    pub ms: f64,
    pub stages: StageTimes,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub scans: usize,
    pub aborted: usize,
    pub ape: Option<ApeResult>,
    pub mean_ms: f64,
    pub mean_stage_ms: StageTimes,
    /// The selection basis is computed once per scan, before the first iteration.
    pub selection_basis: &'static str,
    /// Single pipeline thread; results do not depend on scheduling.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub summary: RunSummary,
    pub scans: Vec<ScanRecord>,
}

impl RunReport {
    pub fn new(config: RunConfig, scans: Vec<ScanRecord>, ape: Option<ApeResult>) -> Self {
        let n = scans.len();
        let mut mean = StageTimes::default();
        for s in &scans {
            mean.add(&s.stages);
        }
        let mean_ms = if n > 0 { scans.iter().map(|s| s.ms).sum::<f64>() / n as f64 } else { 0.0 };
        if n > 0 {
            mean.scale(1.0 / n as f64);
        }
        let summary = RunSummary {
            scans: n,
            aborted: scans.iter().filter(|s| s.aborted).count(),
            ape,
            mean_ms,
            mean_stage_ms: mean,
            selection_basis: "once per scan",
            threads: 1,
        };
        Self { config, summary, scans }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Median of a sample; `+∞` entries sort last.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
