//! The discrete-event run loop.
//!
//! Each decision iteration `k` (period `P`) runs in three phases:
//! tables are computed and broadcast at `(k − 0.9)·P`, proposals at
//! `(k − 0.6)·P` and consensus at `(k − 0.3)·P`. Profilers sample at
//! multiples of the sample period; resources execute every `tick`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::consensus::Executor;
use crate::ids::{EdgeId, RobotId};
use crate::netsim::{rssi_at, Delivery, LinkModel, Message, NodePose, Transport};
use crate::profiling::{
    init_profilers, Gateway, ProfilerSet, SyntheticDevice, TraceKind, TraceSource,
};
use crate::scheduler::{Proposal, Scheduler, SchedulerState, UtilityMessage};
use crate::sim::config::{ConfigError, RobotConfig, ScenarioConfig, Scheme};
use crate::sim::edge::{EdgeExecutor, MergeTracker, TaskItem};
use crate::sim::queue::EventQueue;
use crate::sim::report::{population_variance, EdgeMetrics, MessageCounts, MetricsReport, SeriesRow};
use crate::sim::spikes::inject_spikes;
use crate::utility::{DeviceSnapshot, NetworkSnapshot};

const TABLE_PHASE: f64 = 0.1;
const PROPOSE_PHASE: f64 = 0.4;
const CONSENSUS_PHASE: f64 = 0.7;
/// Peer tables older than this fraction of the decision period are ignored.
const PEER_WINDOW: f64 = 0.5;
const PROPOSAL_BYTES: u64 = 64;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error("profiler setup failed: {0}")]
    Profiling(#[from] crate::profiling::ProfilingError),
    #[error("scheduler setup failed: {0}")]
    Scheduler(#[from] crate::scheduler::SchedulerError),
}

/// Recorded traces that replace the synthetic profilers and the radio model.
#[derive(Debug, Clone, Default)]
pub struct ReplayInputs {
    pub devices: Vec<DeviceSnapshot>,
    pub links: Vec<NetworkSnapshot>,
}

/// Position along a closed waypoint loop.
#[derive(Debug, Clone)]
struct Trajectory {
    points: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
    speed: f64,
}

impl Trajectory {
    fn new(cfg: &RobotConfig) -> Self {
        let points = cfg.waypoints.clone();
        let mut cumulative = vec![0.0];
        for i in 0..points.len() {
            let a = points[i];
            let b = points[(i + 1) % points.len()];
            let len = (a[0] - b[0]).hypot(a[1] - b[1]);
            cumulative.push(cumulative[i] + len);
        }
        Self {
            points,
            cumulative,
            speed: cfg.speed,
        }
    }

    fn at(&self, t: f64) -> [f64; 2] {
        let total = *self.cumulative.last().unwrap_or(&0.0);
        if self.points.len() < 2 || self.speed <= 0.0 || total <= 0.0 {
            return self.points[0];
        }
        let s = (self.speed * t).rem_euclid(total);
        let i = self.cumulative.partition_point(|&c| c <= s).saturating_sub(1);
        let i = i.min(self.points.len() - 1);
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let f = if seg > 0.0 { (s - self.cumulative[i]) / seg } else { 0.0 };
        let a = self.points[i];
        let b = self.points[(i + 1) % self.points.len()];
        [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
    }
}

enum Event {
    Profile(usize),
    ReplayLink(usize),
    Generate(usize),
    Arrive { edge: usize, item: TaskItem },
    Tick(u64),
    Sample(u64),
    Tables(u64),
    TableArrive { to: usize, msg: UtilityMessage },
    Propose(u64),
    ProposalArrive { to: usize, proposal: Proposal },
    Consensus(u64),
}

struct Robot {
    id: RobotId,
    channel: String,
    trajectory: Trajectory,
    rate: f64,
    budget: u64,
    generated: u64,
    gateway: Gateway,
    scheduler: Scheduler,
    executor: Executor,
}

struct Node {
    id: EdgeId,
    pos: [f64; 2],
    exec: EdgeExecutor,
    mem_max: f64,
    cpu_max: f64,
    /// Last replayed reading, when running from traces.
    replayed: Option<DeviceSnapshot>,
    window_bytes: u64,
    cpu_samples: Vec<f64>,
    mem_samples: Vec<f64>,
}

struct World<'a> {
    cfg: &'a ScenarioConfig,
    link: LinkModel,
    transport: Transport,
    robots: Vec<Robot>,
    edges: Vec<Node>,
    profilers: ProfilerSet,
    replay_links: Vec<NetworkSnapshot>,
    /// Latest replayed RSSI per (robot, edge).
    replay_rssi: BTreeMap<(usize, usize), f64>,
    merge: MergeTracker,
    counts: MessageCounts,
    budget: u64,
    finished_at: Option<f64>,
    switch_count: u64,
    series: Vec<SeriesRow>,
    queue: EventQueue<Event>,
}

/// Runs a scenario with synthetic profilers.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<MetricsReport, SimError> {
    run(cfg, None)
}

/// Runs a scenario driven by recorded device and network traces.
pub fn run_replay(cfg: &ScenarioConfig, inputs: &ReplayInputs) -> Result<MetricsReport, SimError> {
    run(cfg, Some(inputs))
}

fn square_wave_spikes(cfg: &ScenarioConfig) -> Vec<crate::profiling::Spike> {
    let mut out = Vec::new();
    for e in &cfg.edges {
        let Some(w) = e.square_wave else { continue };
        let mut k = 0u64;
        loop {
            let start = w.phase + k as f64 * w.period;
            if start >= cfg.duration {
                break;
            }
            out.push(crate::profiling::Spike {
                edge_id: e.id.clone(),
                start,
                duration: w.period / 2.0,
                cpu_load: w.amplitude,
                mem_load: 0.0,
            });
            k += 1;
        }
    }
    out
}

fn run(cfg: &ScenarioConfig, replay: Option<&ReplayInputs>) -> Result<MetricsReport, SimError> {
    cfg.validate()?;
    let edge_ids = cfg.edge_ids();

    // recorded traces already contain whatever load the resources saw
    let mut spikes = Vec::new();
    if replay.is_none() {
        spikes = inject_spikes(&cfg.spikes, &edge_ids, cfg.seed, cfg.duration);
    }
    let spikes_injected = spikes.len();
    if replay.is_none() {
        spikes.extend(cfg.spikes.fixed.iter().cloned());
        spikes.extend(square_wave_spikes(cfg));
    }

    let sources = cfg
        .edges
        .iter()
        .map(|e| TraceSource {
            kind: match replay {
                Some(r) => TraceKind::CsvReplay {
                    rows: r.devices.iter().filter(|d| d.edge_id == e.id).cloned().collect(),
                },
                None => TraceKind::Synthetic {
                    seed: cfg.seed,
                    device: SyntheticDevice {
                        cpu_max: e.cpu_max,
                        mem_max: e.mem_max,
                        base_cpu: e.base_cpu,
                        base_mem: e.base_mem,
                        noise_amplitude: cfg.execution.noise_amplitude,
                        spikes: spikes.iter().filter(|s| s.edge_id == e.id).cloned().collect(),
                    },
                },
            },
            sample_period: cfg.sample_period,
        })
        .collect();
    let profilers = init_profilers(&edge_ids, sources)?;

    let initial = cfg.initial_host();
    let weights = cfg.effective_weights();
    let robot_count = cfg.robots.len();
    let mut robots = Vec::with_capacity(robot_count);
    for r in &cfg.robots {
        let channel = format!("/{}/map", r.id);
        let mut state =
            SchedulerState::new(r.id.clone(), edge_ids.clone(), weights, cfg.sticky_bonus)?;
        state.set_selected(Some(initial.clone()))?;
        robots.push(Robot {
            id: r.id.clone(),
            channel,
            trajectory: Trajectory::new(r),
            rate: cfg.robot_rate(r),
            budget: cfg.robot_budget(r),
            generated: 0,
            gateway: Gateway::new(r.id.clone(), cfg.sample_period),
            scheduler: Scheduler::new(state, PEER_WINDOW * cfg.decision_period),
            executor: Executor::new(
                r.id.clone(),
                robot_count,
                &cfg.task.task_id,
                Vec::new(),
                &initial,
            ),
        });
    }
    let channels: Vec<String> = robots.iter().map(|r| r.channel.clone()).collect();
    for r in &mut robots {
        r.executor = Executor::new(
            r.id.clone(),
            robot_count,
            &cfg.task.task_id,
            channels.clone(),
            &initial,
        );
    }

    let reference_rate = cfg.task.reference_rate();
    let edges = cfg
        .edges
        .iter()
        .map(|e| Node {
            id: e.id.clone(),
            pos: [e.x, e.y],
            exec: EdgeExecutor::new(e.id.clone(), e.capacity_factor, reference_rate).with_load_model(
                cfg.execution.cpu_per_rate,
                cfg.execution.mem_per_queued_mb,
                cfg.execution.load_window,
            ),
            mem_max: e.mem_max,
            cpu_max: e.cpu_max,
            replayed: None,
            window_bytes: 0,
            cpu_samples: Vec::new(),
            mem_samples: Vec::new(),
        })
        .collect();

    let link = LinkModel {
        seed: cfg.link.seed.wrapping_add(cfg.seed),
        ..cfg.link
    };
    let mut world = World {
        cfg,
        link,
        transport: Transport::new(cfg.throughput_table(), cfg.network.base_latency),
        robots,
        edges,
        profilers,
        replay_links: replay.map(|r| r.links.clone()).unwrap_or_default(),
        replay_rssi: BTreeMap::new(),
        merge: MergeTracker::new(robot_count),
        counts: MessageCounts::default(),
        budget: cfg.message_budget(),
        finished_at: None,
        switch_count: 0,
        series: Vec::new(),
        queue: EventQueue::new(),
    };
    world.schedule_initial();
    let end = world.run_loop();
    Ok(world.into_report(end, spikes_injected))
}

impl World<'_> {
    fn schedule_initial(&mut self) {
        for i in 0..self.edges.len() {
            if let Some(t) = self.profilers.get(&self.edges[i].id).and_then(|p| p.next_due()) {
                self.queue.push(t, Event::Profile(i));
            }
        }
        let mut links: Vec<usize> = (0..self.replay_links.len()).collect();
        links.sort_by(|&a, &b| self.replay_links[a].t.total_cmp(&self.replay_links[b].t));
        for i in links {
            self.queue.push(self.replay_links[i].t, Event::ReplayLink(i));
        }
        let n = self.robots.len();
        for (i, r) in self.robots.iter().enumerate() {
            if r.budget > 0 && r.rate > 0.0 {
                // stagger robots within one inter-message gap
                let first = (i + 1) as f64 / (n + 1) as f64 / r.rate;
                self.queue.push(first, Event::Generate(i));
            }
        }
        self.queue.push(self.cfg.execution.tick, Event::Tick(1));
        self.queue.push(self.cfg.sample_period, Event::Sample(1));
        if self.cfg.scheme.is_dynamic() {
            self.queue
                .push(TABLE_PHASE * self.cfg.decision_period, Event::Tables(1));
        }
    }

    /// Returns the simulated time at which the run stopped.
    fn run_loop(&mut self) -> f64 {
        if self.budget == 0 {
            self.finished_at = Some(0.0);
            return 0.0;
        }
        let mut now = 0.0;
        while let Some((t, ev)) = self.queue.pop() {
            if t > self.cfg.duration {
                return self.cfg.duration;
            }
            now = t;
            self.handle(t, ev);
            if let Some(done) = self.finished_at {
                return done;
            }
        }
        now
    }

    fn robot_pose(&self, i: usize, t: f64) -> NodePose {
        let [x, y] = self.robots[i].trajectory.at(t);
        NodePose::new(self.robots[i].id.as_str(), x, y, t)
    }

    fn edge_pose(&self, e: usize, t: f64) -> NodePose {
        let [x, y] = self.edges[e].pos;
        NodePose::new(self.edges[e].id.as_str(), x, y, t)
    }

    fn robot_edge_rssi(&self, r: usize, e: usize, t: f64) -> f64 {
        if let Some(&rssi) = self.replay_rssi.get(&(r, e)) {
            return rssi;
        }
        rssi_at(&self.link, &self.robot_pose(r, t), &self.edge_pose(e, t))
    }

    fn host(&self) -> &EdgeId {
        self.robots[0].executor.current_host()
    }

    fn edge_index(&self, id: &EdgeId) -> Option<usize> {
        self.edges.iter().position(|e| &e.id == id)
    }

    /// Background `(cpu %, mem MB)` of a resource, excluding the task.
    fn background(&self, e: usize, t: f64) -> (f64, f64) {
        let node = &self.edges[e];
        if let Some(bg) = self.profilers.get(&node.id).and_then(|p| p.background(t)) {
            return bg;
        }
        match &node.replayed {
            Some(d) => (d.cpu_used / d.cpu_max * 100.0, d.mem_used),
            None => (0.0, 0.0),
        }
    }

    fn handle(&mut self, now: f64, ev: Event) {
        match ev {
            Event::Profile(e) => self.on_profile(e, now),
            Event::ReplayLink(i) => {
                let reading = self.replay_links[i].clone();
                let r = self.robots.iter().position(|r| r.id == reading.robot_id);
                let e = self.edge_index(&reading.edge_id);
                if let (Some(r), Some(e)) = (r, e) {
                    self.replay_rssi.insert((r, e), reading.rssi);
                    self.robots[r].gateway.ingest_network(reading);
                }
            }
            Event::Generate(r) => self.on_generate(r, now),
            Event::Arrive { edge, item } => {
                self.counts.in_transit -= 1;
                self.edges[edge].window_bytes += item.bytes;
                self.edges[edge].exec.enqueue(item);
            }
            Event::Tick(k) => self.on_tick(k, now),
            Event::Sample(k) => self.on_sample(k, now),
            Event::Tables(k) => self.on_tables(k, now),
            Event::TableArrive { to, msg } => self.robots[to].scheduler.receive(&msg, now),
            Event::Propose(k) => self.on_propose(k, now),
            Event::ProposalArrive { to, proposal } => self.robots[to].executor.receive(&proposal),
            Event::Consensus(k) => self.on_consensus(k, now),
        }
    }

    fn on_profile(&mut self, e: usize, now: f64) {
        let hosting = self.host() == &self.edges[e].id;
        let load = self.edges[e].exec.task_load(hosting, self.cfg.task.mem_footprint_mb);
        let id = self.edges[e].id.clone();
        let profiler = self.profilers.get_mut(&id).expect("one profiler per edge");
        let Some(snapshot) = profiler.emit(load) else {
            return;
        };
        let next = profiler.next_due();
        let replaying = self.profilers.get(&id).and_then(|p| p.background(now)).is_none();
        if replaying {
            self.edges[e].replayed = Some(snapshot.clone());
            for robot in &mut self.robots {
                robot.gateway.ingest_device(snapshot.clone());
            }
        } else {
            // device readings reach a robot only over a usable link
            for r in 0..self.robots.len() {
                let rssi = self.robot_edge_rssi(r, e, now);
                let robot = &mut self.robots[r];
                robot.gateway.ingest_network(NetworkSnapshot {
                    robot_id: robot.id.clone(),
                    edge_id: id.clone(),
                    t: now,
                    rssi,
                });
                if rssi >= self.cfg.bounds.nu {
                    robot.gateway.ingest_device(snapshot.clone());
                }
            }
        }
        if let Some(t) = next {
            self.queue.push(t, Event::Profile(e));
        }
    }

    fn on_generate(&mut self, r: usize, now: f64) {
        let robot = &mut self.robots[r];
        robot.generated += 1;
        self.counts.generated += 1;
        let more = robot.generated < robot.budget;
        let target = robot
            .executor
            .registry
            .resolve(&robot.channel)
            .expect("robot channel registered")
            .target
            .clone();
        let interval = 1.0 / robot.rate;
        let e = self.edge_index(&target).expect("binding targets a known edge");
        let bytes = self.cfg.task.message_bytes;
        let rssi = self.robot_edge_rssi(r, e, now);
        let msg = Message::new(self.robots[r].id.as_str(), target.as_str(), bytes, now, ())
            .expect("validated message size");
        match self.transport.send(&msg, rssi, now) {
            Delivery::Drop => {
                self.counts.dropped += 1;
                self.check_finished(now);
            }
            Delivery::Arrive { at } => {
                self.counts.in_transit += 1;
                self.queue.push(
                    at,
                    Event::Arrive {
                        edge: e,
                        item: TaskItem {
                            robot: r,
                            created_at: now,
                            bytes,
                        },
                    },
                );
            }
        }
        if more {
            self.queue.push(now + interval, Event::Generate(r));
        }
    }

    fn on_tick(&mut self, k: u64, now: f64) {
        let dt = self.cfg.execution.tick;
        for e in 0..self.edges.len() {
            let (bg_cpu, _) = self.background(e, now);
            let done = self.edges[e].exec.execute(now, dt, bg_cpu);
            for item in done {
                self.counts.processed += 1;
                self.merge.record(item.robot);
            }
        }
        self.check_finished(now);
        self.queue.push((k + 1) as f64 * dt, Event::Tick(k + 1));
    }

    fn check_finished(&mut self, now: f64) {
        if self.finished_at.is_none() && self.counts.processed + self.counts.dropped >= self.budget {
            self.finished_at = Some(now);
        }
    }

    fn on_sample(&mut self, k: u64, now: f64) {
        let period = self.cfg.sample_period;
        let host = self.host().clone();
        for e in 0..self.edges.len() {
            let (bg_cpu, bg_mem) = self.background(e, now);
            let node = &self.edges[e];
            let hosting = node.id == host;
            let load = node.exec.task_load(hosting, self.cfg.task.mem_footprint_mb);
            let cpu = (bg_cpu + load.cpu_pct).clamp(0.0, 100.0);
            let mem = ((bg_mem + load.mem_mb) / node.mem_max * 100.0).clamp(0.0, 100.0);
            let tput = node.window_bytes as f64 * 8.0 / period / 1e6;
            let row = SeriesRow {
                t: now,
                edge_id: node.id.clone(),
                cpu_pct: cpu * node.cpu_max / 100.0,
                mem_pct: mem,
                queue_len: node.exec.queue_len(),
                throughput_mbps: tput,
                hosting,
            };
            let node = &mut self.edges[e];
            node.cpu_samples.push(row.cpu_pct);
            node.mem_samples.push(row.mem_pct);
            node.window_bytes = 0;
            self.series.push(row);
        }
        self.queue.push((k + 1) as f64 * period, Event::Sample(k + 1));
    }

    fn broadcast_time(&mut self, from: usize, to: usize, bytes: u64, now: f64) -> Option<f64> {
        let rssi = rssi_at(&self.link, &self.robot_pose(from, now), &self.robot_pose(to, now));
        let msg = Message::new(
            self.robots[from].id.as_str(),
            self.robots[to].id.as_str(),
            bytes,
            now,
            (),
        )
        .ok()?;
        match self.transport.send(&msg, rssi, now) {
            Delivery::Arrive { at } => Some(at),
            Delivery::Drop => None,
        }
    }

    fn on_tables(&mut self, k: u64, now: f64) {
        let period = self.cfg.decision_period;
        for i in 0..self.robots.len() {
            let view = self.robots[i].gateway.collect(now);
            let Ok(msg) = self.robots[i].scheduler.compute_own(
                k,
                &view,
                &self.cfg.task,
                &self.cfg.bounds,
                now,
            ) else {
                continue;
            };
            for j in 0..self.robots.len() {
                if j == i {
                    continue;
                }
                if let Some(at) = self.broadcast_time(i, j, msg.wire_bytes(), now) {
                    self.queue.push(at, Event::TableArrive { to: j, msg: msg.clone() });
                }
            }
        }
        let base = (k - 1) as f64 * period;
        self.queue.push(base + PROPOSE_PHASE * period, Event::Propose(k));
        self.queue.push(base + CONSENSUS_PHASE * period, Event::Consensus(k));
        self.queue.push((k as f64 + TABLE_PHASE) * period, Event::Tables(k + 1));
    }

    fn on_propose(&mut self, k: u64, now: f64) {
        for i in 0..self.robots.len() {
            let Some(proposal) = self.robots[i].scheduler.propose(k, now) else {
                continue;
            };
            self.robots[i].executor.receive(&proposal);
            for j in 0..self.robots.len() {
                if j == i {
                    continue;
                }
                if let Some(at) = self.broadcast_time(i, j, PROPOSAL_BYTES, now) {
                    self.queue.push(
                        at,
                        Event::ProposalArrive {
                            to: j,
                            proposal: proposal.clone(),
                        },
                    );
                }
            }
        }
    }

    fn on_consensus(&mut self, k: u64, _now: f64) {
        for i in 0..self.robots.len() {
            let robot = &mut self.robots[i];
            let (decision, plan) = robot.executor.decide(k);
            robot
                .scheduler
                .state
                .set_selected(Some(decision.winner.clone()))
                .expect("winner comes from known edges");
            if i == 0 && plan.is_some() {
                self.switch_count += 1;
            }
        }
    }

    fn into_report(self, end: f64, spikes_injected: usize) -> MetricsReport {
        let mut counts = self.counts;
        counts.queued = counts.in_transit
            + self.edges.iter().map(|e| e.exec.queue_len() as u64).sum::<u64>();
        let completed = self.finished_at.is_some();
        let task_latency = self.finished_at.unwrap_or(end);
        let mean = |xs: &[f64]| {
            if xs.is_empty() {
                0.0
            } else {
                xs.iter().sum::<f64>() / xs.len() as f64
            }
        };
        let peak = |xs: &[f64]| xs.iter().copied().fold(0.0, f64::max);
        let elapsed = end.max(f64::MIN_POSITIVE);
        let edges: Vec<EdgeMetrics> = self
            .edges
            .iter()
            .map(|n| EdgeMetrics {
                edge_id: n.id.clone(),
                mean_cpu: mean(&n.cpu_samples),
                peak_cpu: peak(&n.cpu_samples),
                mean_mem: mean(&n.mem_samples),
                peak_mem: peak(&n.mem_samples),
                mean_throughput_mbps: n.exec.bytes_received as f64 * 8.0 / elapsed / 1e6,
                messages_processed: n.exec.processed_total,
            })
            .collect();
        let cpu_means: Vec<f64> = edges.iter().map(|e| e.mean_cpu).collect();
        let merged = self.merge.merged();
        let executor_logs: BTreeMap<RobotId, _> = self
            .robots
            .iter()
            .map(|r| (r.id.clone(), r.executor.log.clone()))
            .collect();
        MetricsReport {
            scheme: match &self.cfg.scheme {
                Scheme::Fixed(_) | Scheme::Dynamic(_) => self.cfg.scheme.label(),
            },
            seed: self.cfg.seed,
            cpu_balance_variance: population_variance(&cpu_means),
            edges,
            task_latency,
            completed,
            merged_outputs: merged,
            processing_frequency: if task_latency > 0.0 {
                merged as f64 / task_latency
            } else {
                0.0
            },
            switch_count: self.switch_count,
            messages: counts,
            spikes_injected,
            decisions: self.robots[0].executor.log.clone(),
            executor_logs,
            series: self.series,
        }
    }
}
