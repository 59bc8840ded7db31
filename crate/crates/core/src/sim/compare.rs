//! Multi-seed comparison of offloading schemes.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::sim::config::{ScenarioConfig, Scheme};
use crate::sim::report::MetricsReport;
use crate::sim::runner::{run_scenario, SimError};

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// The metrics a comparison reports, in table order.
pub const METRICS: [&str; 5] = [
    "task_latency",
    "frequency",
    "cpu_variance",
    "throughput_mbps",
    "switches",
];

/// Headline numbers of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub scheme: String,
    pub seed: u64,
    pub values: [f64; 5],
    pub completed: bool,
    pub conserved: bool,
}

impl RunRow {
    pub fn from_report(r: &MetricsReport) -> Self {
        let tput: f64 = r.edges.iter().map(|e| e.mean_throughput_mbps).sum();
        Self {
            scheme: r.scheme.clone(),
            seed: r.seed,
            values: [
                r.task_latency,
                r.processing_frequency,
                r.cpu_balance_variance,
                tput,
                r.switch_count as f64,
            ],
            completed: r.completed,
            conserved: r.messages.conserved(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub scheme: String,
    pub mean: [f64; 5],
    /// Sample standard deviation (n − 1); zero for a single run.
    pub std: [f64; 5],
}

/// Relative change of one scheme's mean against a baseline's mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Delta {
    pub scheme: String,
    pub baseline: String,
    pub relative: [f64; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    /// One entry per requested scheme, in request order.
    pub runs: Vec<Vec<RunRow>>,
    pub aggregates: Vec<Aggregate>,
    pub deltas: Vec<Delta>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn relative(value: f64, baseline: f64) -> f64 {
    if value == baseline {
        0.0
    } else if baseline == 0.0 {
        f64::INFINITY.copysign(value - baseline)
    } else {
        (value - baseline) / baseline.abs()
    }
}

/// Runs every scheme over every seed of `base` and aggregates.
///
/// Runs are independent and execute in parallel; results are collected in
/// request order so the output does not depend on thread scheduling.
/// Deltas are taken against every fixed scheme, or against the first scheme
/// when none is fixed.
pub fn compare_schemes(
    base: &ScenarioConfig,
    schemes: &[Scheme],
    seeds: &[u64],
) -> Result<Comparison, SimError> {
    let jobs: Vec<(usize, u64)> = (0..schemes.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let reports: Vec<MetricsReport> = jobs
        .par_iter()
        .map(|&(i, seed)| run_scenario(&base.with_scheme(schemes[i].clone()).with_seed(seed)))
        .collect::<Result<_, _>>()?;

    let mut runs: Vec<Vec<RunRow>> = vec![Vec::new(); schemes.len()];
    for (&(i, _), r) in jobs.iter().zip(&reports) {
        runs[i].push(RunRow::from_report(r));
    }
    let aggregates: Vec<Aggregate> = schemes
        .iter()
        .zip(&runs)
        .map(|(s, rows)| {
            let mut mean = [0.0; 5];
            let mut std = [0.0; 5];
            for m in 0..METRICS.len() {
                let xs: Vec<f64> = rows.iter().map(|r| r.values[m]).collect();
                (mean[m], std[m]) = mean_std(&xs);
            }
            Aggregate {
                scheme: s.label(),
                mean,
                std,
            }
        })
        .collect();

    let mut baselines: Vec<usize> = (0..schemes.len()).filter(|&i| !schemes[i].is_dynamic()).collect();
    if baselines.is_empty() && !schemes.is_empty() {
        baselines.push(0);
    }
    let mut deltas = Vec::new();
    for &b in &baselines {
        for i in 0..schemes.len() {
            if i == b {
                continue;
            }
            let mut rel = [0.0; 5];
            for (m, r) in rel.iter_mut().enumerate() {
                *r = relative(aggregates[i].mean[m], aggregates[b].mean[m]);
            }
            deltas.push(Delta {
                scheme: aggregates[i].scheme.clone(),
                baseline: aggregates[b].scheme.clone(),
                relative: rel,
            });
        }
    }
    Ok(Comparison {
        seeds: seeds.to_vec(),
        runs,
        aggregates,
        deltas,
    })
}

impl Comparison {
    pub fn aggregate(&self, label: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.scheme == label)
    }

    /// Per-run rows followed by one `mean` and one `std` row per scheme.
    pub fn runs_csv(&self) -> String {
        let mut out = format!("scheme,seed,{},completed,conserved\n", METRICS.join(","));
        for (rows, agg) in self.runs.iter().zip(&self.aggregates) {
            for r in rows {
                let vals: Vec<String> = r.values.iter().map(f64::to_string).collect();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    r.scheme,
                    r.seed,
                    vals.join(","),
                    u8::from(r.completed),
                    u8::from(r.conserved)
                );
            }
            for (name, v) in [("mean", &agg.mean), ("std", &agg.std)] {
                let vals: Vec<String> = v.iter().map(f64::to_string).collect();
                let _ = writeln!(out, "{},{},{},,", agg.scheme, name, vals.join(","));
            }
        }
        out
    }

    pub fn deltas_csv(&self) -> String {
        let mut out = format!("scheme,baseline,{}\n", METRICS.join(","));
        for d in &self.deltas {
            let vals: Vec<String> = d.relative.iter().map(f64::to_string).collect();
            let _ = writeln!(out, "{},{},{}", d.scheme, d.baseline, vals.join(","));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes") + "\n"
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<10}", "scheme");
        for m in METRICS {
            let _ = write!(s, " {m:>22}");
        }
        s.push('\n');
        for a in &self.aggregates {
            let _ = write!(s, "{:<10}", a.scheme);
            for m in 0..METRICS.len() {
                let cell = format!("{:.3}±{:.3}", a.mean[m], a.std[m]);
                let _ = write!(s, " {cell:>22}");
            }
            s.push('\n');
        }
        if !self.deltas.is_empty() {
            let _ = writeln!(s, "\nrelative change of mean vs baseline");
            let _ = write!(s, "{:<21}", "scheme vs baseline");
            for m in METRICS {
                let _ = write!(s, " {m:>15}");
            }
            s.push('\n');
            for d in &self.deltas {
                let _ = write!(s, "{:<21}", format!("{} vs {}", d.scheme, d.baseline));
                for r in d.relative {
                    let cell = format!("{:+.1}%", r * 100.0);
                    let _ = write!(s, " {cell:>15}");
                }
                s.push('\n');
            }
        }
        s
    }
}
