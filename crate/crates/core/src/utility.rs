//! Utility functions scoring how desirable a computing resource is for the
//! collaborative task.
//!
//! Three normalized components are combined with convex weights:
//!
//! * processing utility `η = (γ − β) / γ` from CPU capacity `γ` and used CPU `β`,
//! * memory utility `σ = (δ − θ − μ) / δ` from memory limit `δ`, task footprint
//!   `θ` and used memory `μ`,
//! * link utility `κ = (λ − ν) / (ρ − ν)` from the current RSSI `λ`, the
//!   offloading floor `ν` and the best achievable RSSI `ρ`.
//!
//! Every component is clamped to `[0, 1]`. The total is
//! `ω_η·η + ω_σ·σ + ω_κ·κ` with the weights on the probability simplex.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{EdgeId, RobotId};

/// Allowed deviation of the weight sum from 1.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UtilityError {
    #[error("invalid snapshot for {edge}: {reason}")]
    InvalidSnapshot { edge: EdgeId, reason: String },
    #[error("invalid network bounds: nu={nu} must be below rho={rho}")]
    InvalidBounds { nu: f64, rho: f64 },
    #[error("invalid weights ({w_cpu}, {w_mem}, {w_net}): {reason}")]
    InvalidWeights {
        w_cpu: f64,
        w_mem: f64,
        w_net: f64,
        reason: String,
    },
    #[error("utility component {name}={value} outside [0, 1]")]
    InvalidComponent { name: &'static str, value: f64 },
    #[error("no candidate resources")]
    NoCandidates,
}

/// One profiler reading of a resource's CPU and memory state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSnapshot {
    pub edge_id: EdgeId,
    /// Simulation time in seconds.
    pub t: f64,
    /// Maximal CPU, percent in (0, 100].
    pub cpu_max: f64,
    /// CPU in use, percent.
    pub cpu_used: f64,
    /// Memory limit in MB.
    pub mem_max: f64,
    /// Memory in use in MB.
    pub mem_used: f64,
}

impl DeviceSnapshot {
    pub fn validate(&self) -> Result<(), UtilityError> {
        let fail = |reason: &str| {
            Err(UtilityError::InvalidSnapshot {
                edge: self.edge_id.clone(),
                reason: reason.to_owned(),
            })
        };
        if !(self.cpu_max > 0.0 && self.cpu_max <= 100.0) {
            return fail("cpu_max must lie in (0, 100]");
        }
        if !(self.cpu_used >= 0.0 && self.cpu_used <= self.cpu_max) {
            return fail("cpu_used must lie in [0, cpu_max]");
        }
        if !(self.mem_max > 0.0) {
            return fail("mem_max must be positive");
        }
        if !(self.mem_used >= 0.0 && self.mem_used <= self.mem_max) {
            return fail("mem_used must lie in [0, mem_max]");
        }
        if !self.t.is_finite() {
            return fail("timestamp must be finite");
        }
        Ok(())
    }

    pub fn cpu_percent(&self) -> f64 {
        self.cpu_used / self.cpu_max * 100.0
    }

    pub fn mem_percent(&self) -> f64 {
        self.mem_used / self.mem_max * 100.0
    }
}

/// RSSI of the link between a robot and a resource at a point in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSnapshot {
    pub robot_id: RobotId,
    pub edge_id: EdgeId,
    pub t: f64,
    /// Received signal strength in dBm.
    pub rssi: f64,
}

/// Offloading floor `ν` and best achievable RSSI `ρ`, in dBm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkBounds {
    #[serde(default = "NetworkBounds::default_nu")]
    pub nu: f64,
    #[serde(default = "NetworkBounds::default_rho")]
    pub rho: f64,
}

impl NetworkBounds {
    fn default_nu() -> f64 {
        -85.0
    }

    fn default_rho() -> f64 {
        -30.0
    }

    pub fn new(nu: f64, rho: f64) -> Result<Self, UtilityError> {
        let bounds = Self { nu, rho };
        bounds.validate()?;
        Ok(bounds)
    }

    pub fn validate(&self) -> Result<(), UtilityError> {
        if self.nu < self.rho {
            Ok(())
        } else {
            Err(UtilityError::InvalidBounds {
                nu: self.nu,
                rho: self.rho,
            })
        }
    }
}

impl Default for NetworkBounds {
    fn default() -> Self {
        Self {
            nu: Self::default_nu(),
            rho: Self::default_rho(),
        }
    }
}

/// Convex weights over the processing, memory and link utilities.
///
/// Construction rejects weights off the simplex instead of renormalizing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights", into = "RawWeights")]
pub struct Weights {
    w_cpu: f64,
    w_mem: f64,
    w_net: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWeights {
    w_cpu: f64,
    w_mem: f64,
    w_net: f64,
}

impl TryFrom<RawWeights> for Weights {
    type Error = UtilityError;

    fn try_from(raw: RawWeights) -> Result<Self, Self::Error> {
        Weights::new(raw.w_cpu, raw.w_mem, raw.w_net)
    }
}

impl From<Weights> for RawWeights {
    fn from(w: Weights) -> Self {
        RawWeights {
            w_cpu: w.w_cpu,
            w_mem: w.w_mem,
            w_net: w.w_net,
        }
    }
}

impl Weights {
    pub fn new(w_cpu: f64, w_mem: f64, w_net: f64) -> Result<Self, UtilityError> {
        let invalid = |reason: String| UtilityError::InvalidWeights {
            w_cpu,
            w_mem,
            w_net,
            reason,
        };
        for (name, w) in [("w_cpu", w_cpu), ("w_mem", w_mem), ("w_net", w_net)] {
            if !(0.0..=1.0).contains(&w) {
                return Err(invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        let sum = w_cpu + w_mem + w_net;
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(invalid(format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self {
            w_cpu,
            w_mem,
            w_net,
        })
    }

    pub fn cpu(&self) -> f64 {
        self.w_cpu
    }

    pub fn mem(&self) -> f64 {
        self.w_mem
    }

    pub fn net(&self) -> f64 {
        self.w_net
    }
}

/// The collaborative task being placed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    /// Estimated memory the task occupies on its host, MB.
    pub mem_footprint_mb: f64,
    /// Messages per second produced by each robot.
    pub input_rate: f64,
    /// CPU-milliseconds per message at reference speed.
    pub work_per_message_ms: f64,
    /// Size of one task input message, bytes.
    #[serde(default = "TaskSpec::default_message_bytes")]
    pub message_bytes: u64,
}

impl TaskSpec {
    fn default_message_bytes() -> u64 {
        20_000
    }

    /// Messages per second one unloaded, full-capacity resource can process.
    pub fn reference_rate(&self) -> f64 {
        if self.work_per_message_ms > 0.0 {
            1000.0 / self.work_per_message_ms
        } else {
            f64::INFINITY
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("mem_footprint_mb", self.mem_footprint_mb),
            ("input_rate", self.input_rate),
            ("work_per_message_ms", self.work_per_message_ms),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("task.{name} must be a non-negative number"));
            }
        }
        Ok(())
    }
}

/// Per-resource utility components and their weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityBreakdown {
    pub edge_id: EdgeId,
    pub eta: f64,
    pub sigma: f64,
    pub kappa: f64,
    /// Weighted total, including the sticky bonus when it was applied.
    pub total: f64,
    pub sticky_applied: bool,
}

fn unit_clamp(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Processing utility: fraction of the CPU that is idle.
pub fn cpu_utility(snapshot: &DeviceSnapshot) -> Result<f64, UtilityError> {
    if !(snapshot.cpu_max > 0.0) {
        return Err(UtilityError::InvalidSnapshot {
            edge: snapshot.edge_id.clone(),
            reason: "cpu_max must be positive".into(),
        });
    }
    Ok(unit_clamp(
        (snapshot.cpu_max - snapshot.cpu_used) / snapshot.cpu_max,
    ))
}

/// Memory utility: fraction of memory left after the task footprint is placed.
pub fn memory_utility(snapshot: &DeviceSnapshot, task: &TaskSpec) -> Result<f64, UtilityError> {
    if !(snapshot.mem_max > 0.0) {
        return Err(UtilityError::InvalidSnapshot {
            edge: snapshot.edge_id.clone(),
            reason: "mem_max must be positive".into(),
        });
    }
    Ok(unit_clamp(
        (snapshot.mem_max - task.mem_footprint_mb - snapshot.mem_used) / snapshot.mem_max,
    ))
}

/// Link utility: position of the RSSI between the offloading floor and the best RSSI.
pub fn rssi_utility(
    reading: &NetworkSnapshot,
    bounds: &NetworkBounds,
) -> Result<f64, UtilityError> {
    bounds.validate()?;
    Ok(unit_clamp(
        (reading.rssi - bounds.nu) / (bounds.rho - bounds.nu),
    ))
}

/// Weighted total of the three components.
pub fn total_utility(
    eta: f64,
    sigma: f64,
    kappa: f64,
    weights: &Weights,
) -> Result<f64, UtilityError> {
    for (name, value) in [("eta", eta), ("sigma", sigma), ("kappa", kappa)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(UtilityError::InvalidComponent { name, value });
        }
    }
    Ok(weights.cpu() * eta + weights.mem() * sigma + weights.net() * kappa)
}

/// Computes every component for one resource as seen from one robot.
pub fn breakdown(
    device: &DeviceSnapshot,
    network: &NetworkSnapshot,
    task: &TaskSpec,
    bounds: &NetworkBounds,
    weights: &Weights,
) -> Result<UtilityBreakdown, UtilityError> {
    let eta = cpu_utility(device)?;
    let sigma = memory_utility(device, task)?;
    let kappa = rssi_utility(network, bounds)?;
    Ok(UtilityBreakdown {
        edge_id: device.edge_id.clone(),
        eta,
        sigma,
        kappa,
        total: total_utility(eta, sigma, kappa, weights)?,
        sticky_applied: false,
    })
}

/// Scores of every resource, keyed by resource id.
pub type UtilityTable = BTreeMap<EdgeId, f64>;

/// Sums each resource's score across all robots' tables.
///
/// A robot whose table lacks an entry contributes nothing for that resource.
pub fn sum_over_edges<'a, I>(tables: I) -> Result<UtilityTable, UtilityError>
where
    I: IntoIterator<Item = &'a UtilityTable>,
{
    let mut sums = UtilityTable::new();
    for table in tables {
        for (edge, score) in table {
            *sums.entry(edge.clone()).or_insert(0.0) += score;
        }
    }
    if sums.is_empty() {
        return Err(UtilityError::NoCandidates);
    }
    Ok(sums)
}

/// Convenience wrapper for per-robot tables keyed by robot id.
pub fn sum_robot_tables(
    tables: &BTreeMap<RobotId, UtilityTable>,
) -> Result<UtilityTable, UtilityError> {
    sum_over_edges(tables.values())
}
