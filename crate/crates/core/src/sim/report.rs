//! Run outputs: metrics report, time series and their file renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::consensus::{decision_csv, Decision};
use crate::ids::{EdgeId, RobotId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeMetrics {
    pub edge_id: EdgeId,
    pub mean_cpu: f64,
    pub peak_cpu: f64,
    pub mean_mem: f64,
    pub peak_mem: f64,
    /// Task data received, averaged over the run, Mbps.
    pub mean_throughput_mbps: f64,
    pub messages_processed: u64,
}

/// Message accounting at the end of a run.
///
/// `queued` counts everything accepted but not yet processed, including the
/// `in_transit` share still on the wire.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageCounts {
    pub generated: u64,
    pub processed: u64,
    pub queued: u64,
    pub in_transit: u64,
    pub dropped: u64,
}

impl MessageCounts {
    pub fn conserved(&self) -> bool {
        self.generated == self.processed + self.queued + self.dropped
    }
}

/// One sampling tick for one resource.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub t: f64,
    pub edge_id: EdgeId,
    pub cpu_pct: f64,
    pub mem_pct: f64,
    pub queue_len: usize,
    pub throughput_mbps: f64,
    pub hosting: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scheme: String,
    pub seed: u64,
    pub edges: Vec<EdgeMetrics>,
    /// Seconds until the whole message budget was processed, or the run
    /// length when it was not.
    pub task_latency: f64,
    pub completed: bool,
    pub merged_outputs: u64,
    /// Merged outputs per second of task latency.
    pub processing_frequency: f64,
    pub switch_count: u64,
    pub messages: MessageCounts,
    /// Population variance of the per-edge mean CPU utilization.
    pub cpu_balance_variance: f64,
    pub spikes_injected: usize,
    pub decisions: Vec<Decision>,
    /// Every robot's executor log, keyed by robot.
    #[serde(skip)]
    pub executor_logs: BTreeMap<RobotId, Vec<Decision>>,
    #[serde(skip)]
    pub series: Vec<SeriesRow>,
}

pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

pub const METRICS_CSV_HEADER: &str = "t,edge_id,cpu_pct,mem_pct,queue_len,throughput_mbps,hosting";

impl MetricsReport {
    pub fn edge_ids(&self) -> Vec<EdgeId> {
        self.edges.iter().map(|e| e.edge_id.clone()).collect()
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_CSV_HEADER);
        out.push('\n');
        for r in &self.series {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.t,
                r.edge_id,
                r.cpu_pct,
                r.mem_pct,
                r.queue_len,
                r.throughput_mbps,
                u8::from(r.hosting)
            );
        }
        out
    }

    /// Decision CSV of the reference (first) robot's executor.
    pub fn decisions_csv(&self) -> String {
        decision_csv(&self.decisions, &self.edge_ids())
    }

    pub fn executor_csv(&self, robot: &RobotId) -> Option<String> {
        self.executor_logs
            .get(robot)
            .map(|log| decision_csv(log, &self.edge_ids()))
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scheme: {}", self.scheme);
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(
            s,
            "task latency: {:.3} s{}",
            self.task_latency,
            if self.completed { "" } else { " (budget not completed)" }
        );
        let _ = writeln!(
            s,
            "merged outputs: {} ({:.4} Hz)",
            self.merged_outputs, self.processing_frequency
        );
        let _ = writeln!(s, "switches: {}", self.switch_count);
        let m = &self.messages;
        let _ = writeln!(
            s,
            "messages: generated {} processed {} queued {} (in transit {}) dropped {}",
            m.generated, m.processed, m.queued, m.in_transit, m.dropped
        );
        let _ = writeln!(s, "cpu balance variance: {:.4}", self.cpu_balance_variance);
        let _ = writeln!(s, "spikes injected: {}", self.spikes_injected);
        let _ = writeln!(
            s,
            "{:<8} {:>9} {:>9} {:>9} {:>9} {:>10} {:>10}",
            "edge", "cpu_mean", "cpu_peak", "mem_mean", "mem_peak", "tput_mbps", "processed"
        );
        for e in &self.edges {
            let _ = writeln!(
                s,
                "{:<8} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>10.4} {:>10}",
                e.edge_id.as_str(),
                e.mean_cpu,
                e.peak_cpu,
                e.mean_mem,
                e.peak_mem,
                e.mean_throughput_mbps,
                e.messages_processed
            );
        }
        s
    }

    /// Writes the run's output files into `dir`.
    pub fn write_to(&self, dir: &std::path::Path) -> std::io::Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: String, body: String| -> std::io::Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, body)?;
            written.push(path);
            Ok(())
        };
        put("metrics.csv".into(), self.metrics_csv())?;
        put("decisions.csv".into(), self.decisions_csv())?;
        put("summary.txt".into(), self.summary_text())?;
        put("summary.json".into(), self.summary_json())?;
        for robot in self.executor_logs.keys() {
            if let Some(csv) = self.executor_csv(robot) {
                put(format!("decisions_{robot}.csv"), csv)?;
            }
        }
        Ok(written)
    }
}
