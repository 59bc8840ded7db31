//! Resource profilers and per-robot gateways.
//!
//! Each resource runs a device profiler that emits [`DeviceSnapshot`]s, either
//! from a seeded synthetic load generator or by replaying a CSV trace. Each
//! robot runs a gateway that keeps the freshest reading per resource and hands
//! the scheduler an [`EdgeData`] view with ages and a staleness flag.

use std::collections::{BTreeMap, VecDeque};
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{EdgeId, RobotId};
use crate::utility::{DeviceSnapshot, NetworkSnapshot};

/// Readings older than this many sample periods are flagged stale.
pub const STALE_PERIODS: f64 = 3.0;

/// How many readings a gateway keeps per resource.
const GATEWAY_HISTORY: usize = 32;

#[derive(Debug, Error)]
pub enum ProfilingError {
    #[error("duplicate edge id {0}")]
    DuplicateEdge(EdgeId),
    #[error("no edges configured")]
    NoEdges,
    #[error("{count} trace sources for {edges} edges")]
    SourceCountMismatch { count: usize, edges: usize },
    #[error("sample_period must be positive, got {0}")]
    BadPeriod(f64),
    #[error("{file}:{line}: {reason}")]
    Trace {
        file: String,
        line: u64,
        reason: String,
    },
    #[error("{file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
}

/// A transient background load on one resource, e.g. an inference model
/// started by another tenant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Spike {
    pub edge_id: EdgeId,
    pub start: f64,
    pub duration: f64,
    /// Added CPU, percentage points.
    pub cpu_load: f64,
    /// Added memory, MB.
    #[serde(default)]
    pub mem_load: f64,
}

impl Spike {
    pub fn active_at(&self, t: f64) -> bool {
        t >= self.start && t < self.start + self.duration
    }
}

/// `clamp(base + Σ active spike loads + noise, 0, 100)` for the CPU channel.
pub fn sample_device_synthetic(base_load: f64, spikes: &[Spike], t: f64, noise: f64) -> f64 {
    let added: f64 = spikes
        .iter()
        .filter(|s| s.active_at(t))
        .map(|s| s.cpu_load)
        .sum();
    (base_load + added + noise).clamp(0.0, 100.0)
}

/// Load the hosted task adds on top of background load at sampling time.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TaskLoad {
    pub cpu_pct: f64,
    pub mem_mb: f64,
}

/// Parameters of a synthetic resource.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDevice {
    pub cpu_max: f64,
    pub mem_max: f64,
    /// Background CPU, percent.
    pub base_cpu: f64,
    /// Background memory, MB.
    pub base_mem: f64,
    /// Half-width of the uniform noise, percentage points (of capacity for memory).
    pub noise_amplitude: f64,
    pub spikes: Vec<Spike>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceKind {
    Synthetic { seed: u64, device: SyntheticDevice },
    CsvReplay { rows: Vec<DeviceSnapshot> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSource {
    pub kind: TraceKind,
    pub sample_period: f64,
}

enum Feed {
    Synthetic {
        device: SyntheticDevice,
        rng: ChaCha8Rng,
        next_t: f64,
        tick: u64,
    },
    Replay {
        rows: VecDeque<DeviceSnapshot>,
    },
}

/// Emits device snapshots for one resource.
pub struct DeviceProfiler {
    edge_id: EdgeId,
    sample_period: f64,
    feed: Feed,
}

impl DeviceProfiler {
    pub fn edge_id(&self) -> &EdgeId {
        &self.edge_id
    }

    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    /// Time of the next reading, or `None` once a replayed trace is exhausted.
    pub fn next_due(&self) -> Option<f64> {
        match &self.feed {
            Feed::Synthetic { next_t, .. } => Some(*next_t),
            Feed::Replay { rows } => rows.front().map(|r| r.t),
        }
    }

    /// Produces the reading due at [`next_due`](Self::next_due) and advances.
    ///
    /// `task` is added to synthetic readings only; replayed rows are
    /// returned exactly as recorded.
    pub fn emit(&mut self, task: TaskLoad) -> Option<DeviceSnapshot> {
        match &mut self.feed {
            Feed::Replay { rows } => rows.pop_front(),
            Feed::Synthetic {
                device,
                rng,
                next_t,
                tick,
            } => {
                let t = *next_t;
                let amp = device.noise_amplitude;
                let (cpu_noise, mem_noise) = if amp > 0.0 {
                    (rng.gen_range(-amp..=amp), rng.gen_range(-amp..=amp))
                } else {
                    (0.0, 0.0)
                };
                let cpu_pct =
                    sample_device_synthetic(device.base_cpu, &device.spikes, t, cpu_noise)
                        + task.cpu_pct;
                let spike_mem: f64 = device
                    .spikes
                    .iter()
                    .filter(|s| s.active_at(t))
                    .map(|s| s.mem_load)
                    .sum();
                let mem_used = (device.base_mem
                    + spike_mem
                    + task.mem_mb
                    + mem_noise / 100.0 * device.mem_max)
                    .clamp(0.0, device.mem_max);
                *tick += 1;
                *next_t = *tick as f64 * self.sample_period;
                Some(DeviceSnapshot {
                    edge_id: self.edge_id.clone(),
                    t,
                    cpu_max: device.cpu_max,
                    cpu_used: (cpu_pct.clamp(0.0, 100.0) / 100.0) * device.cpu_max,
                    mem_max: device.mem_max,
                    mem_used,
                })
            }
        }
    }

    /// Background `(cpu percent, memory MB)` at time `t`, excluding the task
    /// and noise. `None` for replayed traces.
    pub fn background(&self, t: f64) -> Option<(f64, f64)> {
        match &self.feed {
            Feed::Synthetic { device, .. } => {
                let cpu = sample_device_synthetic(device.base_cpu, &device.spikes, t, 0.0);
                let mem: f64 = device.base_mem
                    + device
                        .spikes
                        .iter()
                        .filter(|s| s.active_at(t))
                        .map(|s| s.mem_load)
                        .sum::<f64>();
                Some((cpu, mem.clamp(0.0, device.mem_max)))
            }
            Feed::Replay { .. } => None,
        }
    }
}

/// One profiler per resource, keyed by id.
pub struct ProfilerSet {
    profilers: BTreeMap<EdgeId, DeviceProfiler>,
}

impl ProfilerSet {
    pub fn get(&self, edge: &EdgeId) -> Option<&DeviceProfiler> {
        self.profilers.get(edge)
    }

    pub fn get_mut(&mut self, edge: &EdgeId) -> Option<&mut DeviceProfiler> {
        self.profilers.get_mut(edge)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&EdgeId, &mut DeviceProfiler)> {
        self.profilers.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.profilers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profilers.is_empty()
    }

    /// Emits every reading due at or before `until`, in time order, without
    /// task load. Intended for standalone use and tests.
    pub fn drain_until(&mut self, until: f64) -> Vec<DeviceSnapshot> {
        let mut out = Vec::new();
        loop {
            let next = self
                .profilers
                .iter()
                .filter_map(|(id, p)| p.next_due().map(|t| (t, id.clone())))
                .filter(|(t, _)| *t <= until)
                .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
            let Some((_, id)) = next else { break };
            if let Some(s) = self.profilers.get_mut(&id).and_then(|p| p.emit(TaskLoad::default())) {
                out.push(s);
            }
        }
        out
    }
}

/// Builds one profiler per resource from its trace source.
pub fn init_profilers(
    edges: &[EdgeId],
    sources: Vec<TraceSource>,
) -> Result<ProfilerSet, ProfilingError> {
    if edges.is_empty() {
        return Err(ProfilingError::NoEdges);
    }
    if edges.len() != sources.len() {
        return Err(ProfilingError::SourceCountMismatch {
            count: sources.len(),
            edges: edges.len(),
        });
    }
    let mut profilers = BTreeMap::new();
    for (edge, source) in edges.iter().zip(sources) {
        if !(source.sample_period > 0.0) {
            return Err(ProfilingError::BadPeriod(source.sample_period));
        }
        let feed = match source.kind {
            TraceKind::Synthetic { seed, device } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream_for(edge));
                Feed::Synthetic {
                    device,
                    rng,
                    next_t: 0.0,
                    tick: 0,
                }
            }
            TraceKind::CsvReplay { rows } => Feed::Replay {
                rows: rows.into_iter().filter(|r| &r.edge_id == edge).collect(),
            },
        };
        let profiler = DeviceProfiler {
            edge_id: edge.clone(),
            sample_period: source.sample_period,
            feed,
        };
        if profilers.insert(edge.clone(), profiler).is_some() {
            return Err(ProfilingError::DuplicateEdge(edge.clone()));
        }
    }
    Ok(ProfilerSet { profilers })
}

// Independent noise stream per resource, derived from its id.
fn stream_for(edge: &EdgeId) -> u64 {
    edge.as_str()
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
        })
}

/// Freshest view of one resource as held by a robot's gateway.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeData {
    pub edge_id: EdgeId,
    pub device: DeviceSnapshot,
    pub network: NetworkSnapshot,
    pub device_age: f64,
    pub network_age: f64,
    pub stale: bool,
}

/// Per-robot collector of profiler readings.
#[derive(Debug, Clone)]
pub struct Gateway {
    robot_id: RobotId,
    stale_after: f64,
    devices: BTreeMap<EdgeId, VecDeque<DeviceSnapshot>>,
    links: BTreeMap<EdgeId, VecDeque<NetworkSnapshot>>,
}

fn push_bounded<T>(buf: &mut VecDeque<T>, item: T) {
    if buf.len() == GATEWAY_HISTORY {
        buf.pop_front();
    }
    buf.push_back(item);
}

fn latest_at<T>(buf: &VecDeque<T>, now: f64, t: impl Fn(&T) -> f64) -> Option<&T> {
    // readings arrive in timestamp order, so scan from the back
    buf.iter().rev().find(|r| t(r) <= now)
}

impl Gateway {
    /// `sample_period` sets the staleness threshold of [`STALE_PERIODS`] periods.
    pub fn new(robot_id: RobotId, sample_period: f64) -> Self {
        Self {
            robot_id,
            stale_after: STALE_PERIODS * sample_period,
            devices: BTreeMap::new(),
            links: BTreeMap::new(),
        }
    }

    pub fn robot_id(&self) -> &RobotId {
        &self.robot_id
    }

    pub fn ingest_device(&mut self, snapshot: DeviceSnapshot) {
        push_bounded(self.devices.entry(snapshot.edge_id.clone()).or_default(), snapshot);
    }

    pub fn ingest_network(&mut self, reading: NetworkSnapshot) {
        debug_assert_eq!(reading.robot_id, self.robot_id);
        push_bounded(self.links.entry(reading.edge_id.clone()).or_default(), reading);
    }

    /// Latest readings per resource with ages relative to `now`.
    ///
    /// Resources without both a device and a link reading at or before `now`
    /// are absent from the result.
    pub fn collect(&self, now: f64) -> BTreeMap<EdgeId, EdgeData> {
        let mut out = BTreeMap::new();
        for (edge, devices) in &self.devices {
            let Some(device) = latest_at(devices, now, |d| d.t) else {
                continue;
            };
            let Some(network) = self
                .links
                .get(edge)
                .and_then(|l| latest_at(l, now, |n| n.t))
            else {
                continue;
            };
            let device_age = now - device.t;
            let network_age = now - network.t;
            out.insert(
                edge.clone(),
                EdgeData {
                    edge_id: edge.clone(),
                    device: device.clone(),
                    network: network.clone(),
                    device_age,
                    network_age,
                    stale: device_age > self.stale_after || network_age > self.stale_after,
                },
            );
        }
        out
    }
}

/// Convenience form of [`Gateway::collect`] over raw profiler outputs.
pub fn gateway_collect(
    robot_id: &RobotId,
    devices: &[DeviceSnapshot],
    links: &[NetworkSnapshot],
    sample_period: f64,
    now: f64,
) -> BTreeMap<EdgeId, EdgeData> {
    let mut gw = Gateway::new(robot_id.clone(), sample_period);
    // later readings could push the relevant ones out of the bounded history
    let mut devices: Vec<_> = devices.iter().filter(|d| d.t <= now).cloned().collect();
    devices.sort_by(|a, b| a.t.total_cmp(&b.t));
    for d in devices {
        gw.ingest_device(d);
    }
    let mut links: Vec<_> = links
        .iter()
        .filter(|l| &l.robot_id == robot_id && l.t <= now)
        .cloned()
        .collect();
    links.sort_by(|a, b| a.t.total_cmp(&b.t));
    for l in links {
        gw.ingest_network(l);
    }
    gw.collect(now)
}

pub const DEVICE_TRACE_HEADER: [&str; 6] =
    ["t", "edge_id", "cpu_max", "cpu_used", "mem_max", "mem_used"];
pub const NET_TRACE_HEADER: [&str; 4] = ["t", "robot_id", "edge_id", "rssi"];

fn trace_records<R: Read>(
    reader: R,
    file: &str,
    header: &[&str],
) -> Result<Vec<(u64, csv::StringRecord)>, ProfilingError> {
    let err = |line: u64, reason: String| ProfilingError::Trace {
        file: file.to_owned(),
        line,
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let found = rdr
        .headers()
        .map_err(|e| err(1, e.to_string()))?
        .clone();
    if found.iter().collect::<Vec<_>>() != header {
        return Err(err(
            1,
            format!("expected header `{}`, found `{}`", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(err(
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        out.push((line, rec));
    }
    Ok(out)
}

fn field_f64(
    rec: &csv::StringRecord,
    idx: usize,
    name: &str,
    file: &str,
    line: u64,
) -> Result<f64, ProfilingError> {
    let raw = &rec[idx];
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| ProfilingError::Trace {
            file: file.to_owned(),
            line,
            reason: format!("{name}: `{raw}` is not a finite number"),
        })
}

/// Parses a device trace (`t,edge_id,cpu_max,cpu_used,mem_max,mem_used`).
pub fn parse_device_trace<R: Read>(
    reader: R,
    file: &str,
) -> Result<Vec<DeviceSnapshot>, ProfilingError> {
    let mut last_t: BTreeMap<EdgeId, f64> = BTreeMap::new();
    let mut rows = Vec::new();
    for (line, rec) in trace_records(reader, file, &DEVICE_TRACE_HEADER)? {
        let snap = DeviceSnapshot {
            t: field_f64(&rec, 0, "t", file, line)?,
            edge_id: EdgeId::new(&rec[1]),
            cpu_max: field_f64(&rec, 2, "cpu_max", file, line)?,
            cpu_used: field_f64(&rec, 3, "cpu_used", file, line)?,
            mem_max: field_f64(&rec, 4, "mem_max", file, line)?,
            mem_used: field_f64(&rec, 5, "mem_used", file, line)?,
        };
        let bad = |reason: String| ProfilingError::Trace {
            file: file.to_owned(),
            line,
            reason,
        };
        if snap.edge_id.as_str().is_empty() {
            return Err(bad("edge_id is empty".into()));
        }
        snap.validate().map_err(|e| bad(e.to_string()))?;
        if let Some(prev) = last_t.insert(snap.edge_id.clone(), snap.t) {
            if snap.t < prev {
                return Err(bad(format!(
                    "timestamp {} goes backwards for {} (previous {prev})",
                    snap.t, snap.edge_id
                )));
            }
        }
        rows.push(snap);
    }
    Ok(rows)
}

/// Parses a network trace (`t,robot_id,edge_id,rssi`).
pub fn parse_net_trace<R: Read>(
    reader: R,
    file: &str,
) -> Result<Vec<NetworkSnapshot>, ProfilingError> {
    let mut rows = Vec::new();
    for (line, rec) in trace_records(reader, file, &NET_TRACE_HEADER)? {
        let bad = |reason: String| ProfilingError::Trace {
            file: file.to_owned(),
            line,
            reason,
        };
        let t = field_f64(&rec, 0, "t", file, line)?;
        let rssi = field_f64(&rec, 3, "rssi", file, line)?;
        if rec[1].is_empty() || rec[2].is_empty() {
            return Err(bad("robot_id and edge_id must be non-empty".into()));
        }
        if !(-120.0..=0.0).contains(&rssi) {
            return Err(bad(format!("rssi {rssi} outside [-120, 0] dBm")));
        }
        rows.push(NetworkSnapshot {
            robot_id: RobotId::new(&rec[1]),
            edge_id: EdgeId::new(&rec[2]),
            t,
            rssi,
        });
    }
    let mut last: BTreeMap<(RobotId, EdgeId), f64> = BTreeMap::new();
    for r in &rows {
        let key = (r.robot_id.clone(), r.edge_id.clone());
        if let Some(prev) = last.insert(key.clone(), r.t) {
            if r.t < prev {
                return Err(ProfilingError::Trace {
                    file: file.to_owned(),
                    line: 0,
                    reason: format!("timestamps go backwards for link {}-{}", key.0, key.1),
                });
            }
        }
    }
    Ok(rows)
}

pub fn read_device_trace(path: &Path) -> Result<Vec<DeviceSnapshot>, ProfilingError> {
    let file = path.display().to_string();
    let f = std::fs::File::open(path).map_err(|source| ProfilingError::Io {
        file: file.clone(),
        source,
    })?;
    parse_device_trace(f, &file)
}

pub fn read_net_trace(path: &Path) -> Result<Vec<NetworkSnapshot>, ProfilingError> {
    let file = path.display().to_string();
    let f = std::fs::File::open(path).map_err(|source| ProfilingError::Io {
        file: file.clone(),
        source,
    })?;
    parse_net_trace(f, &file)
}
