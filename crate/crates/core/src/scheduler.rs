//! Per-robot scheduler.
//!
//! Every decision iteration a robot scores each resource from its gateway
//! view, adds a sticky bonus to the resource currently hosting the task,
//! exchanges its table with peer robots, sums the tables per resource and
//! proposes the resource with the highest sum.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{EdgeId, RobotId};
use crate::profiling::EdgeData;
use crate::utility::{self, NetworkBounds, TaskSpec, UtilityError, UtilityTable, Weights};

pub const MAX_STICKY_BONUS: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedulerError {
    #[error("no candidate resources")]
    NoCandidates,
    #[error("sticky bonus {0} outside [0, {MAX_STICKY_BONUS}]")]
    BadStickyBonus(f64),
    #[error("selected edge {0} is not a known resource")]
    UnknownEdge(EdgeId),
    #[error(transparent)]
    Utility(#[from] UtilityError),
}

/// A peer's utility table as last received.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerTable {
    pub iteration: u64,
    pub table: UtilityTable,
    pub received_at: f64,
}

/// Utility table broadcast between robots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityMessage {
    pub iteration: u64,
    pub robot_id: RobotId,
    pub scores: Vec<(EdgeId, f64)>,
    pub timestamp: f64,
}

impl UtilityMessage {
    pub fn table(&self) -> UtilityTable {
        self.scores.iter().cloned().collect()
    }

    /// Approximate encoded size, used for transport timing.
    pub fn wire_bytes(&self) -> u64 {
        32 + self
            .scores
            .iter()
            .map(|(e, _)| e.as_str().len() as u64 + 8)
            .sum::<u64>()
    }
}

/// A robot's proposed host for the current iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub robot_id: RobotId,
    pub max_edge: EdgeId,
    pub iteration: u64,
    pub utility_table: UtilityTable,
}

#[derive(Debug, Clone)]
pub struct SchedulerState {
    pub robot_id: RobotId,
    pub selected_edge: Option<EdgeId>,
    pub weights: Weights,
    sticky_bonus: f64,
    known_edges: BTreeSet<EdgeId>,
    pub peer_tables: BTreeMap<RobotId, PeerTable>,
}

impl SchedulerState {
    pub fn new(
        robot_id: RobotId,
        known_edges: impl IntoIterator<Item = EdgeId>,
        weights: Weights,
        sticky_bonus: f64,
    ) -> Result<Self, SchedulerError> {
        if !(0.0..=MAX_STICKY_BONUS).contains(&sticky_bonus) {
            return Err(SchedulerError::BadStickyBonus(sticky_bonus));
        }
        Ok(Self {
            robot_id,
            selected_edge: None,
            weights,
            sticky_bonus,
            known_edges: known_edges.into_iter().collect(),
            peer_tables: BTreeMap::new(),
        })
    }

    pub fn sticky_bonus(&self) -> f64 {
        self.sticky_bonus
    }

    pub fn known_edges(&self) -> &BTreeSet<EdgeId> {
        &self.known_edges
    }

    pub fn set_selected(&mut self, edge: Option<EdgeId>) -> Result<(), SchedulerError> {
        if let Some(e) = &edge {
            if !self.known_edges.contains(e) {
                return Err(SchedulerError::UnknownEdge(e.clone()));
            }
        }
        self.selected_edge = edge;
        Ok(())
    }

    pub fn record_peer(&mut self, msg: &UtilityMessage, received_at: f64) {
        if msg.robot_id == self.robot_id {
            return;
        }
        self.peer_tables.insert(
            msg.robot_id.clone(),
            PeerTable {
                iteration: msg.iteration,
                table: msg.table(),
                received_at,
            },
        );
    }
}

/// Scores every known resource from the robot's own gateway view.
///
/// Fresh resources get the weighted utility, plus the sticky bonus when they
/// are the current selection. Stale or absent resources score exactly 0.
pub fn calculate_utility(
    state: &SchedulerState,
    edge_data: &BTreeMap<EdgeId, EdgeData>,
    task: &TaskSpec,
    bounds: &NetworkBounds,
) -> Result<UtilityTable, SchedulerError> {
    if edge_data.is_empty() {
        return Err(SchedulerError::NoCandidates);
    }
    let mut table = UtilityTable::new();
    for edge in state.known_edges.iter().chain(edge_data.keys()) {
        let score = match edge_data.get(edge) {
            Some(data) if !data.stale => {
                let b = utility::breakdown(
                    &data.device,
                    &data.network,
                    task,
                    bounds,
                    &state.weights,
                )?;
                if state.selected_edge.as_ref() == Some(edge) {
                    b.total + state.sticky_bonus
                } else {
                    b.total
                }
            }
            _ => 0.0,
        };
        table.insert(edge.clone(), score);
    }
    Ok(table)
}

/// True when every resource in the view is stale.
pub fn all_stale(edge_data: &BTreeMap<EdgeId, EdgeData>) -> bool {
    edge_data.values().all(|d| d.stale)
}

/// Sums the robot's own table with every peer table no older than `max_age`.
pub fn exchange_and_sum(
    own: &UtilityTable,
    peers: &BTreeMap<RobotId, PeerTable>,
    now: f64,
    max_age: f64,
) -> UtilityTable {
    let fresh = peers
        .values()
        .filter(|p| now - p.received_at <= max_age)
        .map(|p| &p.table);
    // own is non-empty whenever it came from calculate_utility
    utility::sum_over_edges(std::iter::once(own).chain(fresh)).unwrap_or_default()
}

/// Resource with the highest summed score; ties go to the smallest id.
pub fn select_max_edge(
    robot_id: &RobotId,
    iteration: u64,
    summed: &UtilityTable,
) -> Result<Proposal, SchedulerError> {
    let mut best: Option<(&EdgeId, f64)> = None;
    for (edge, &score) in summed {
        match best {
            Some((_, s)) if score <= s => {}
            _ => best = Some((edge, score)),
        }
    }
    let (edge, _) = best.ok_or(SchedulerError::NoCandidates)?;
    Ok(Proposal {
        robot_id: robot_id.clone(),
        max_edge: edge.clone(),
        iteration,
        utility_table: summed.clone(),
    })
}

/// The scheduler state machine one robot runs.
#[derive(Debug, Clone)]
pub struct Scheduler {
    pub state: SchedulerState,
    /// Peer tables older than this (seconds) are left out of the sum.
    pub peer_max_age: f64,
    own: Option<(u64, UtilityTable, bool)>,
}

impl Scheduler {
    pub fn new(state: SchedulerState, peer_max_age: f64) -> Self {
        Self {
            state,
            peer_max_age,
            own: None,
        }
    }

    /// Scores resources for `iteration` and returns the table to broadcast.
    pub fn compute_own(
        &mut self,
        iteration: u64,
        view: &BTreeMap<EdgeId, EdgeData>,
        task: &TaskSpec,
        bounds: &NetworkBounds,
        now: f64,
    ) -> Result<UtilityMessage, SchedulerError> {
        let table = calculate_utility(&self.state, view, task, bounds)?;
        let msg = UtilityMessage {
            iteration,
            robot_id: self.state.robot_id.clone(),
            scores: table.iter().map(|(e, s)| (e.clone(), *s)).collect(),
            timestamp: now,
        };
        self.own = Some((iteration, table, all_stale(view)));
        Ok(msg)
    }

    pub fn receive(&mut self, msg: &UtilityMessage, now: f64) {
        self.state.record_peer(msg, now);
    }

    /// Sums own and fresh peer tables and proposes the argmax.
    ///
    /// If every resource looked stale when the own table was computed, the
    /// current selection is proposed instead. Returns `None` when no own
    /// table exists for `iteration`.
    pub fn propose(&mut self, iteration: u64, now: f64) -> Option<Proposal> {
        let (it, own, stale) = self.own.as_ref()?;
        if *it != iteration {
            return None;
        }
        let summed = exchange_and_sum(own, &self.state.peer_tables, now, self.peer_max_age);
        if *stale {
            if let Some(sel) = &self.state.selected_edge {
                return Some(Proposal {
                    robot_id: self.state.robot_id.clone(),
                    max_edge: sel.clone(),
                    iteration,
                    utility_table: summed,
                });
            }
        }
        select_max_edge(&self.state.robot_id, iteration, &summed).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::utility::{DeviceSnapshot, NetworkSnapshot};

    fn data(edge: &str, cpu_used: f64, stale: bool) -> EdgeData {
        EdgeData {
            edge_id: edge.into(),
            device: DeviceSnapshot {
                edge_id: edge.into(),
                t: 0.0,
                cpu_max: 100.0,
                cpu_used,
                mem_max: 4096.0,
                mem_used: 0.0,
            },
            network: NetworkSnapshot {
                robot_id: "r1".into(),
                edge_id: edge.into(),
                t: 0.0,
                rssi: -50.0,
            },
            device_age: 0.0,
            network_age: 0.0,
            stale,
        }
    }

    fn task() -> TaskSpec {
        TaskSpec {
            task_id: "t".into(),
            mem_footprint_mb: 0.0,
            input_rate: 1.0,
            work_per_message_ms: 10.0,
            message_bytes: 100,
        }
    }

    fn state(h: f64) -> SchedulerState {
        SchedulerState::new(
            "r1".into(),
            ["e1".into(), "e2".into()],
            Weights::new(1.0, 0.0, 0.0).unwrap(),
            h,
        )
        .unwrap()
    }

    fn table(pairs: &[(&str, f64)]) -> UtilityTable {
        pairs.iter().map(|(e, s)| (EdgeId::from(*e), *s)).collect()
    }

    #[test]
    fn identical_snapshots_score_equal() {
        let view: BTreeMap<_, _> = [("e1", data("e1", 30.0, false)), ("e2", data("e2", 30.0, false))]
            .into_iter()
            .map(|(k, v)| (EdgeId::from(k), v))
            .collect();
        let t = calculate_utility(&state(0.0), &view, &task(), &NetworkBounds::default()).unwrap();
        assert_eq!(t[&EdgeId::from("e1")], t[&EdgeId::from("e2")]);
    }

    #[test]
    fn sticky_bonus_retains_selection() {
        let mut s = state(0.05);
        s.set_selected(Some("e1".into())).unwrap();
        let view: BTreeMap<_, _> = [("e1", data("e1", 50.0, false)), ("e2", data("e2", 47.0, false))]
            .into_iter()
            .map(|(k, v)| (EdgeId::from(k), v))
            .collect();
        let t = calculate_utility(&s, &view, &task(), &NetworkBounds::default()).unwrap();
        assert!((t[&EdgeId::from("e1")] - 0.55).abs() < 1e-12);
        assert!((t[&EdgeId::from("e2")] - 0.53).abs() < 1e-12);
        let p = select_max_edge(&s.robot_id, 0, &t).unwrap();
        assert_eq!(p.max_edge, EdgeId::from("e1"));
    }

    #[test]
    fn stale_and_absent_edges_score_zero() {
        let mut s = state(0.05);
        s.set_selected(Some("e2".into())).unwrap();
        let view: BTreeMap<_, _> = [("e1", data("e1", 50.0, false)), ("e2", data("e2", 0.0, true))]
            .into_iter()
            .map(|(k, v)| (EdgeId::from(k), v))
            .collect();
        let t = calculate_utility(&s, &view, &task(), &NetworkBounds::default()).unwrap();
        assert_eq!(t[&EdgeId::from("e2")], 0.0);

        let only_e1: BTreeMap<_, _> = [(EdgeId::from("e1"), data("e1", 50.0, false))].into();
        let t = calculate_utility(&s, &only_e1, &task(), &NetworkBounds::default()).unwrap();
        assert_eq!(t[&EdgeId::from("e2")], 0.0);

        assert_eq!(
            calculate_utility(&s, &BTreeMap::new(), &task(), &NetworkBounds::default()),
            Err(SchedulerError::NoCandidates)
        );
    }

    #[test]
    fn all_stale_keeps_previous_selection() {
        let mut sched = Scheduler::new(state(0.0), 0.5);
        sched.state.set_selected(Some("e2".into())).unwrap();
        let view: BTreeMap<_, _> = [("e1", data("e1", 0.0, true)), ("e2", data("e2", 0.0, true))]
            .into_iter()
            .map(|(k, v)| (EdgeId::from(k), v))
            .collect();
        sched
            .compute_own(3, &view, &task(), &NetworkBounds::default(), 3.0)
            .unwrap();
        assert_eq!(sched.propose(3, 3.1).unwrap().max_edge, EdgeId::from("e2"));
        assert!(sched.propose(4, 3.1).is_none());
    }

    #[test]
    fn exchange_examples() {
        let own = table(&[("e1", 0.4), ("e2", 0.5)]);
        assert_eq!(exchange_and_sum(&own, &BTreeMap::new(), 0.0, 1.0), own);

        let peer = |received_at| PeerTable {
            iteration: 1,
            table: table(&[("e1", 0.4), ("e2", 0.5)]),
            received_at,
        };
        let peers: BTreeMap<RobotId, _> =
            [("r2".into(), peer(10.0)), ("r3".into(), peer(10.0))].into();
        let s = exchange_and_sum(&own, &peers, 10.2, 0.5);
        assert!((s[&EdgeId::from("e1")] - 1.2).abs() < 1e-12);
        assert!((s[&EdgeId::from("e2")] - 1.5).abs() < 1e-12);

        let peers: BTreeMap<RobotId, _> =
            [("r2".into(), peer(10.0)), ("r3".into(), peer(8.0))].into();
        let s = exchange_and_sum(&own, &peers, 10.2, 0.5);
        assert!((s[&EdgeId::from("e1")] - 0.8).abs() < 1e-12);
        assert!((s[&EdgeId::from("e2")] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn select_examples() {
        let r = RobotId::from("r1");
        let p = select_max_edge(&r, 0, &table(&[("e1", 1.1), ("e2", 1.2), ("e3", 0.9)])).unwrap();
        assert_eq!(p.max_edge, EdgeId::from("e2"));
        let p = select_max_edge(&r, 0, &table(&[("e1", 0.8)])).unwrap();
        assert_eq!(p.max_edge, EdgeId::from("e1"));
        let p = select_max_edge(&r, 0, &table(&[("e2", 1.0), ("e1", 1.0)])).unwrap();
        assert_eq!(p.max_edge, EdgeId::from("e1"));
        assert_eq!(
            select_max_edge(&r, 0, &UtilityTable::new()),
            Err(SchedulerError::NoCandidates)
        );
    }

    #[test]
    fn sticky_bonus_bounds() {
        let w = Weights::new(1.0, 0.0, 0.0).unwrap();
        assert!(SchedulerState::new("r1".into(), [], w, 0.6).is_err());
        assert!(SchedulerState::new("r1".into(), [], w, -0.1).is_err());
        let mut s = SchedulerState::new("r1".into(), ["e1".into()], w, 0.5).unwrap();
        assert!(s.set_selected(Some("e9".into())).is_err());
    }

    #[test]
    fn own_messages_are_not_recorded_as_peers() {
        let mut s = state(0.0);
        s.record_peer(
            &UtilityMessage {
                iteration: 0,
                robot_id: "r1".into(),
                scores: vec![],
                timestamp: 0.0,
            },
            0.0,
        );
        assert!(s.peer_tables.is_empty());
    }
}
