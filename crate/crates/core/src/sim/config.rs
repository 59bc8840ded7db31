//! Declarative scenario description.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::ids::{EdgeId, RobotId};
use crate::netsim::{LinkModel, ThroughputTable};
use crate::profiling::Spike;
use crate::utility::{NetworkBounds, TaskSpec, Weights};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("{0}")]
    Serialize(#[from] toml::ser::Error),
}

impl ConfigError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Dotted path of the offending field, when known.
    pub fn field(&self) -> Option<&str> {
        match self {
            Self::Invalid { field, .. } => Some(field),
            _ => None,
        }
    }
}

/// Weighting variant of the dynamic scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DynamicVariant {
    Cpu,
    Mem,
    Both,
    Net,
}

impl DynamicVariant {
    pub const ALL: [DynamicVariant; 4] = [Self::Cpu, Self::Mem, Self::Both, Self::Net];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cpu => "cpu",
            Self::Mem => "mem",
            Self::Both => "both",
            Self::Net => "net",
        }
    }

    /// Default weights `(cpu, mem, net)` for the variant.
    pub fn preset(self) -> Weights {
        let (c, m, n) = match self {
            Self::Cpu => (0.8, 0.1, 0.1),
            Self::Mem => (0.1, 0.8, 0.1),
            Self::Both => (0.45, 0.45, 0.1),
            Self::Net => (0.1, 0.1, 0.8),
        };
        Weights::new(c, m, n).expect("presets lie on the simplex")
    }
}

/// Where the collaborative task runs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scheme {
    /// Pinned to one resource for the whole run.
    Fixed(EdgeId),
    /// Placed by the utility scheduler and consensus executor.
    Dynamic(DynamicVariant),
}

impl Scheme {
    /// Short label, e.g. `fixed_e1` or `dyna_both`.
    pub fn label(&self) -> String {
        match self {
            Self::Fixed(e) => format!("fixed_{e}"),
            Self::Dynamic(v) => format!("dyna_{}", v.name()),
        }
    }

    pub fn is_dynamic(&self) -> bool {
        matches!(self, Self::Dynamic(_))
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fixed(e) => write!(f, "fixed:{e}"),
            Self::Dynamic(v) => write!(f, "dynamic:{}", v.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("unknown scheme `{0}`; expected fixed:<edge>, fixed_<edge>, dynamic:<cpu|mem|both|net> or dyna_<cpu|mem|both|net>")]
pub struct SchemeParseError(pub String);

impl FromStr for Scheme {
    type Err = SchemeParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let err = || SchemeParseError(s.to_owned());
        let (kind, arg) = s
            .split_once(':')
            .or_else(|| s.split_once('_'))
            .ok_or_else(err)?;
        match kind {
            "fixed" if !arg.is_empty() => Ok(Self::Fixed(EdgeId::new(arg))),
            "dynamic" | "dyna" => DynamicVariant::ALL
                .into_iter()
                .find(|v| v.name() == arg)
                .map(Self::Dynamic)
                .ok_or_else(err),
            _ => Err(err()),
        }
    }
}

impl Serialize for Scheme {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scheme {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotConfig {
    pub id: RobotId,
    /// Overrides `task.input_rate` for this robot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_rate: Option<f64>,
    /// Closed loop of `[x, y]` waypoints in meters; one point means static.
    pub waypoints: Vec<[f64; 2]>,
    /// Travel speed along the loop, m/s.
    #[serde(default)]
    pub speed: f64,
}

/// Periodic background load: `amplitude` points during the first half of
/// every `period`, shifted by `phase` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SquareWave {
    pub amplitude: f64,
    pub period: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeConfig {
    pub id: EdgeId,
    #[serde(default = "defaults::cpu_max")]
    pub cpu_max: f64,
    #[serde(default = "defaults::mem_max")]
    pub mem_max: f64,
    /// Background CPU, percent.
    #[serde(default)]
    pub base_cpu: f64,
    /// Background memory, MB.
    #[serde(default)]
    pub base_mem: f64,
    /// Processing speed relative to the reference machine.
    #[serde(default = "defaults::one")]
    pub capacity_factor: f64,
    #[serde(default)]
    pub x: f64,
    #[serde(default)]
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub square_wave: Option<SquareWave>,
}

/// Random background-load injection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeModel {
    /// Expected spikes per second across all resources.
    #[serde(default)]
    pub rate: f64,
    #[serde(default = "defaults::spike_cpu")]
    pub cpu_load: [f64; 2],
    #[serde(default = "defaults::spike_mem")]
    pub mem_load: [f64; 2],
    #[serde(default = "defaults::spike_duration")]
    pub duration: [f64; 2],
    /// Spikes placed explicitly in addition to the random ones.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fixed: Vec<Spike>,
}

impl Default for SpikeModel {
    fn default() -> Self {
        Self {
            rate: 0.0,
            cpu_load: defaults::spike_cpu(),
            mem_load: defaults::spike_mem(),
            duration: defaults::spike_duration(),
            fixed: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Fixed per-message latency, seconds.
    #[serde(default = "defaults::base_latency")]
    pub base_latency: f64,
    /// Defaults to the standard table with its floor at `bounds.nu`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub throughput: Option<ThroughputTable>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_latency: defaults::base_latency(),
            throughput: None,
        }
    }
}

/// Task execution model on a resource.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionConfig {
    /// Execution step, seconds.
    #[serde(default = "defaults::tick")]
    pub tick: f64,
    /// CPU percentage points per message/s processed, at capacity factor 1.
    #[serde(default = "defaults::cpu_per_rate")]
    pub cpu_per_rate: f64,
    /// Memory held per queued message, MB.
    #[serde(default = "defaults::mem_per_queued")]
    pub mem_per_queued_mb: f64,
    /// Window over which the processing rate is measured, seconds.
    #[serde(default = "defaults::one")]
    pub load_window: f64,
    /// Half-width of the uniform profiler noise, percentage points.
    #[serde(default = "defaults::noise")]
    pub noise_amplitude: f64,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        Self {
            tick: defaults::tick(),
            cpu_per_rate: defaults::cpu_per_rate(),
            mem_per_queued_mb: defaults::mem_per_queued(),
            load_window: defaults::one(),
            noise_amplitude: defaults::noise(),
        }
    }
}

mod defaults {
    pub fn cpu_max() -> f64 {
        100.0
    }
    pub fn mem_max() -> f64 {
        4096.0
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn spike_cpu() -> [f64; 2] {
        [40.0, 70.0]
    }
    pub fn spike_mem() -> [f64; 2] {
        [800.0, 1500.0]
    }
    pub fn spike_duration() -> [f64; 2] {
        [20.0, 60.0]
    }
    pub fn base_latency() -> f64 {
        0.005
    }
    pub fn tick() -> f64 {
        0.1
    }
    pub fn cpu_per_rate() -> f64 {
        3.0
    }
    pub fn mem_per_queued() -> f64 {
        2.0
    }
    pub fn noise() -> f64 {
        2.0
    }
    pub fn sticky() -> f64 {
        0.05
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Hard stop, seconds of simulated time.
    pub duration: f64,
    /// Seconds of input each robot produces; fixes the work budget.
    pub nominal_duration: f64,
    pub scheme: Scheme,
    #[serde(default = "defaults::sticky")]
    pub sticky_bonus: f64,
    #[serde(default = "defaults::one")]
    pub decision_period: f64,
    #[serde(default = "defaults::one")]
    pub sample_period: f64,
    /// Host before the first decision; defaults to the first edge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_edge: Option<EdgeId>,
    /// Overrides the variant preset for every dynamic scheme.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Weights>,
    /// Per-variant preset overrides, keyed by `cpu`, `mem`, `both`, `net`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub presets: BTreeMap<String, Weights>,
    pub task: TaskSpec,
    #[serde(default)]
    pub bounds: NetworkBounds,
    #[serde(default)]
    pub link: LinkModel,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub execution: ExecutionConfig,
    #[serde(default)]
    pub spikes: SpikeModel,
    pub robots: Vec<RobotConfig>,
    pub edges: Vec<EdgeConfig>,
}

fn non_negative(field: &str, v: f64) -> Result<(), ConfigError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::invalid(field, format!("must be a non-negative number, got {v}")))
    }
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::invalid(field, format!("must be positive, got {v}")))
    }
}

fn range(field: &str, r: [f64; 2]) -> Result<(), ConfigError> {
    if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] {
        Ok(())
    } else {
        Err(ConfigError::invalid(field, format!("range [{}, {}] is empty", r[0], r[1])))
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn edge_ids(&self) -> Vec<EdgeId> {
        self.edges.iter().map(|e| e.id.clone()).collect()
    }

    pub fn robot_ids(&self) -> Vec<RobotId> {
        self.robots.iter().map(|r| r.id.clone()).collect()
    }

    pub fn initial_host(&self) -> EdgeId {
        match &self.scheme {
            Scheme::Fixed(e) => e.clone(),
            Scheme::Dynamic(_) => self
                .initial_edge
                .clone()
                .unwrap_or_else(|| self.edges[0].id.clone()),
        }
    }

    /// Weights the dynamic scheduler uses under this config's scheme.
    pub fn effective_weights(&self) -> Weights {
        if let Some(w) = self.weights {
            return w;
        }
        let variant = match self.scheme {
            Scheme::Dynamic(v) => v,
            Scheme::Fixed(_) => DynamicVariant::Both,
        };
        self.presets
            .get(variant.name())
            .copied()
            .unwrap_or_else(|| variant.preset())
    }

    pub fn throughput_table(&self) -> ThroughputTable {
        self.network
            .throughput
            .clone()
            .unwrap_or_else(|| ThroughputTable::with_floor(self.bounds.nu))
    }

    pub fn robot_rate(&self, robot: &RobotConfig) -> f64 {
        robot.input_rate.unwrap_or(self.task.input_rate)
    }

    /// Messages each robot produces over the run.
    pub fn robot_budget(&self, robot: &RobotConfig) -> u64 {
        (self.robot_rate(robot) * self.nominal_duration).round() as u64
    }

    /// Total task messages: Σ input_rate × nominal_duration.
    pub fn message_budget(&self) -> u64 {
        self.robots.iter().map(|r| self.robot_budget(r)).sum()
    }

    pub fn with_scheme(&self, scheme: Scheme) -> Self {
        Self {
            scheme,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        positive("duration", self.duration)?;
        positive("nominal_duration", self.nominal_duration)?;
        positive("decision_period", self.decision_period)?;
        positive("sample_period", self.sample_period)?;
        if !(0.0..=crate::scheduler::MAX_STICKY_BONUS).contains(&self.sticky_bonus) {
            return Err(ConfigError::invalid(
                "sticky_bonus",
                format!("{} outside [0, {}]", self.sticky_bonus, crate::scheduler::MAX_STICKY_BONUS),
            ));
        }
        self.task
            .validate()
            .map_err(|m| ConfigError::invalid("task", m))?;
        if self.task.message_bytes == 0 {
            return Err(ConfigError::invalid("task.message_bytes", "must be positive"));
        }
        positive("task.work_per_message_ms", self.task.work_per_message_ms)?;
        self.bounds
            .validate()
            .map_err(|e| ConfigError::invalid("bounds", e.to_string()))?;
        self.link
            .validate()
            .map_err(|e| ConfigError::invalid("link", e.to_string()))?;
        non_negative("network.base_latency", self.network.base_latency)?;
        self.throughput_table()
            .validate()
            .map_err(|e| ConfigError::invalid("network.throughput", e.to_string()))?;
        positive("execution.tick", self.execution.tick)?;
        non_negative("execution.cpu_per_rate", self.execution.cpu_per_rate)?;
        non_negative("execution.mem_per_queued_mb", self.execution.mem_per_queued_mb)?;
        positive("execution.load_window", self.execution.load_window)?;
        non_negative("execution.noise_amplitude", self.execution.noise_amplitude)?;
        non_negative("spikes.rate", self.spikes.rate)?;
        range("spikes.cpu_load", self.spikes.cpu_load)?;
        range("spikes.mem_load", self.spikes.mem_load)?;
        range("spikes.duration", self.spikes.duration)?;
        for key in self.presets.keys() {
            if !DynamicVariant::ALL.iter().any(|v| v.name() == key) {
                return Err(ConfigError::invalid(
                    format!("presets.{key}"),
                    "unknown dynamic variant",
                ));
            }
        }

        if self.robots.is_empty() {
            return Err(ConfigError::invalid("robots", "at least one robot is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, r) in self.robots.iter().enumerate() {
            let f = |name: &str| format!("robots[{i}].{name}");
            if r.id.as_str().is_empty() || !seen.insert(r.id.as_str().to_owned()) {
                return Err(ConfigError::invalid(f("id"), format!("empty or duplicate id `{}`", r.id)));
            }
            if let Some(rate) = r.input_rate {
                non_negative(&f("input_rate"), rate)?;
            }
            if r.waypoints.is_empty() {
                return Err(ConfigError::invalid(f("waypoints"), "at least one waypoint is required"));
            }
            if r.waypoints.iter().flatten().any(|c| !c.is_finite()) {
                return Err(ConfigError::invalid(f("waypoints"), "coordinates must be finite"));
            }
            non_negative(&f("speed"), r.speed)?;
        }

        if self.edges.is_empty() {
            return Err(ConfigError::invalid("edges", "at least one edge is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, e) in self.edges.iter().enumerate() {
            let f = |name: &str| format!("edges[{i}].{name}");
            if e.id.as_str().is_empty() || !seen.insert(e.id.clone()) {
                return Err(ConfigError::invalid(f("id"), format!("empty or duplicate id `{}`", e.id)));
            }
            if !(e.cpu_max > 0.0 && e.cpu_max <= 100.0) {
                return Err(ConfigError::invalid(f("cpu_max"), "must lie in (0, 100]"));
            }
            positive(&f("mem_max"), e.mem_max)?;
            if !(0.0..=100.0).contains(&e.base_cpu) {
                return Err(ConfigError::invalid(f("base_cpu"), "must lie in [0, 100]"));
            }
            if !(0.0..=e.mem_max).contains(&e.base_mem) {
                return Err(ConfigError::invalid(f("base_mem"), "must lie in [0, mem_max]"));
            }
            positive(&f("capacity_factor"), e.capacity_factor)?;
            if !(e.x.is_finite() && e.y.is_finite()) {
                return Err(ConfigError::invalid(f("x"), "coordinates must be finite"));
            }
            if let Some(w) = e.square_wave {
                positive(&f("square_wave.period"), w.period)?;
            }
        }
        for (i, s) in self.spikes.fixed.iter().enumerate() {
            if !seen.contains(&s.edge_id) {
                return Err(ConfigError::invalid(
                    format!("spikes.fixed[{i}].edge_id"),
                    format!("unknown edge `{}`", s.edge_id),
                ));
            }
            non_negative(&format!("spikes.fixed[{i}].duration"), s.duration)?;
        }
        if let Scheme::Fixed(e) = &self.scheme {
            if !seen.contains(e) {
                return Err(ConfigError::invalid("scheme", format!("unknown edge `{e}`")));
            }
        }
        if let Some(e) = &self.initial_edge {
            if !seen.contains(e) {
                return Err(ConfigError::invalid("initial_edge", format!("unknown edge `{e}`")));
            }
        }
        Ok(())
    }
}

/// Three robots and three heterogeneous edges under random background-load
/// spikes. Edge e1 runs at half speed.
pub fn stress_scenario() -> ScenarioConfig {
    let robot = |id: &str, waypoints: Vec<[f64; 2]>| RobotConfig {
        id: RobotId::new(id),
        input_rate: None,
        waypoints,
        speed: 0.3,
    };
    let edge = |id: &str, base_cpu, base_mem, capacity_factor, x, y| EdgeConfig {
        id: EdgeId::new(id),
        cpu_max: 100.0,
        mem_max: 4096.0,
        base_cpu,
        base_mem,
        capacity_factor,
        x,
        y,
        square_wave: None,
    };
    ScenarioConfig {
        seed: 1,
        duration: 900.0,
        nominal_duration: 300.0,
        scheme: Scheme::Dynamic(DynamicVariant::Both),
        sticky_bonus: 0.05,
        decision_period: 1.0,
        sample_period: 1.0,
        initial_edge: None,
        weights: None,
        presets: BTreeMap::new(),
        task: TaskSpec {
            task_id: "map_merge".into(),
            mem_footprint_mb: 512.0,
            input_rate: 3.0,
            work_per_message_ms: 80.0,
            message_bytes: 20_000,
        },
        bounds: NetworkBounds::default(),
        link: LinkModel::default(),
        network: NetworkConfig::default(),
        execution: ExecutionConfig::default(),
        spikes: SpikeModel {
            rate: 0.02,
            ..SpikeModel::default()
        },
        robots: vec![
            robot("r1", vec![[5.0, 5.0], [20.0, 5.0], [20.0, 15.0]]),
            robot("r2", vec![[25.0, 5.0], [25.0, 20.0], [10.0, 20.0]]),
            robot("r3", vec![[10.0, 10.0], [15.0, 25.0], [5.0, 20.0]]),
        ],
        edges: vec![
            edge("e1", 15.0, 1200.0, 0.5, 0.0, 0.0),
            edge("e2", 25.0, 1400.0, 1.0, 30.0, 0.0),
            edge("e3", 20.0, 1000.0, 1.0, 15.0, 30.0),
        ],
    }
}

/// Two identical edges whose background CPU alternates by `amplitude`
/// points every sample, making utilities oscillate by `amplitude / 100`
/// under CPU-only weights. Noise, spikes and task-induced load are disabled.
pub fn flapping_scenario(sticky_bonus: f64, amplitude: f64) -> ScenarioConfig {
    let mut cfg = stress_scenario();
    cfg.duration = 120.0;
    cfg.nominal_duration = 100.0;
    cfg.sticky_bonus = sticky_bonus;
    cfg.weights = Some(Weights::new(1.0, 0.0, 0.0).expect("corner of the simplex"));
    cfg.task.input_rate = 1.0;
    cfg.task.mem_footprint_mb = 0.0;
    cfg.execution.cpu_per_rate = 0.0;
    cfg.execution.mem_per_queued_mb = 0.0;
    cfg.execution.noise_amplitude = 0.0;
    cfg.spikes = SpikeModel::default();
    cfg.link.shadowing_sigma = 0.0;
    for r in &mut cfg.robots {
        r.speed = 0.0;
    }
    let wave = |phase| SquareWave {
        amplitude,
        period: 2.0,
        phase,
    };
    cfg.edges = vec![
        EdgeConfig {
            square_wave: Some(wave(0.0)),
            ..cfg.edges[1].clone()
        },
        EdgeConfig {
            square_wave: Some(wave(1.0)),
            ..cfg.edges[2].clone()
        },
    ];
    cfg.edges[0].id = EdgeId::new("e1");
    cfg.edges[1].id = EdgeId::new("e2");
    cfg.edges[1].base_cpu = cfg.edges[0].base_cpu;
    cfg.edges[1].base_mem = cfg.edges[0].base_mem;
    cfg
}
