//! Executor: plurality consensus over the robots' proposals, the offload
//! guard and topic remapping.
//!
//! Every robot runs its own executor over the broadcast proposals. The
//! consensus step is a pure function of the proposal set and the incumbent,
//! so executors that see the same inputs reach the same [`Decision`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{EdgeId, RobotId};
use crate::scheduler::Proposal;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConsensusError {
    #[error("quorum not met and no incumbent to retain")]
    NoIncumbent,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RemapError {
    #[error("unknown channel {0}")]
    UnknownChannel(String),
    #[error("remap plan is not a bijection: {0}")]
    NotBijective(String),
}

/// Outcome of one consensus round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub iteration: u64,
    pub winner: EdgeId,
    pub votes: BTreeMap<EdgeId, u32>,
    pub switched: bool,
    /// Quorum was not met; the incumbent was kept.
    pub deferred: bool,
}

/// Smallest number of proposals needed to decide with `robots` participants.
pub fn quorum(robots: usize) -> usize {
    robots.div_ceil(2)
}

/// Plurality vote over proposals.
///
/// Ties prefer `previous` when it is among the tied resources, otherwise the
/// smallest id. With fewer than [`quorum`] proposals the decision is deferred
/// and `previous` is retained.
pub fn consensus(
    iteration: u64,
    proposals: &BTreeMap<RobotId, EdgeId>,
    previous: Option<&EdgeId>,
    robot_count: usize,
) -> Result<Decision, ConsensusError> {
    let mut votes: BTreeMap<EdgeId, u32> = BTreeMap::new();
    for edge in proposals.values() {
        *votes.entry(edge.clone()).or_insert(0) += 1;
    }
    if proposals.len() < quorum(robot_count).max(1) {
        let winner = previous.cloned().ok_or(ConsensusError::NoIncumbent)?;
        return Ok(Decision {
            iteration,
            winner,
            votes,
            switched: false,
            deferred: true,
        });
    }
    let top = votes.values().copied().max().unwrap_or(0);
    let tied: Vec<&EdgeId> = votes
        .iter()
        .filter(|(_, &c)| c == top)
        .map(|(e, _)| e)
        .collect();
    let winner = match previous {
        Some(p) if tied.contains(&p) => p.clone(),
        // BTreeMap iteration order: first tied entry is the smallest id
        _ => tied[0].clone(),
    };
    Ok(Decision {
        iteration,
        switched: previous != Some(&winner),
        winner,
        votes,
        deferred: false,
    })
}

/// Channel renames that retarget a task to a new host.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemapPlan {
    pub task_id: String,
    pub target: EdgeId,
    pub in_topics: Vec<String>,
    pub out_topics: Vec<String>,
    pub mapping: BTreeMap<String, String>,
}

impl RemapPlan {
    /// Plan that moves every listed channel to `target`.
    pub fn retarget(task_id: &str, target: &EdgeId, channels: &[String]) -> Self {
        let out_topics: Vec<String> = channels.iter().map(|c| remapped_name(target, c)).collect();
        Self {
            task_id: task_id.to_owned(),
            target: target.clone(),
            in_topics: channels.to_vec(),
            mapping: channels.iter().cloned().zip(out_topics.iter().cloned()).collect(),
            out_topics,
        }
    }

    fn check_bijection(&self) -> Result<(), RemapError> {
        let ins: BTreeSet<_> = self.in_topics.iter().collect();
        let outs: BTreeSet<_> = self.out_topics.iter().collect();
        let mapped_outs: BTreeSet<_> = self.mapping.values().collect();
        if ins.len() != self.in_topics.len()
            || outs.len() != self.out_topics.len()
            || self.mapping.len() != self.in_topics.len()
            || !self.in_topics.iter().all(|i| self.mapping.contains_key(i))
            || mapped_outs != outs
        {
            return Err(RemapError::NotBijective(self.task_id.clone()));
        }
        Ok(())
    }
}

/// Name of `channel` once addressed at `target`.
pub fn remapped_name(target: &EdgeId, channel: &str) -> String {
    let channel = channel.strip_prefix('/').unwrap_or(channel);
    format!("/{target}/{channel}")
}

/// Where a logical channel currently points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub target: EdgeId,
    pub channel: String,
}

/// Logical channel → current binding.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChannelRegistry {
    bindings: BTreeMap<String, Binding>,
}

impl ChannelRegistry {
    /// Registry with every channel bound to `host`.
    pub fn bound_to(host: &EdgeId, channels: &[String]) -> Self {
        Self {
            bindings: channels
                .iter()
                .map(|c| {
                    (
                        c.clone(),
                        Binding {
                            target: host.clone(),
                            channel: remapped_name(host, c),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn resolve(&self, channel: &str) -> Option<&Binding> {
        self.bindings.get(channel)
    }

    pub fn len(&self) -> usize {
        self.bindings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bindings.is_empty()
    }
}

/// Rebinds every channel in the plan, or none of them.
pub fn apply_remap(plan: &RemapPlan, registry: &mut ChannelRegistry) -> Result<usize, RemapError> {
    plan.check_bijection()?;
    if let Some(missing) = plan
        .in_topics
        .iter()
        .find(|c| !registry.bindings.contains_key(*c))
    {
        return Err(RemapError::UnknownChannel(missing.clone()));
    }
    let mut changed = 0;
    for (input, output) in &plan.mapping {
        let binding = Binding {
            target: plan.target.clone(),
            channel: output.clone(),
        };
        let slot = registry.bindings.get_mut(input).expect("checked above");
        if *slot != binding {
            *slot = binding;
            changed += 1;
        }
    }
    Ok(changed)
}

/// Past allocations of the task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AllocationMemory {
    pub history: Vec<(u64, EdgeId)>,
    pub last_remapped: Option<EdgeId>,
}

impl AllocationMemory {
    pub fn starting_at(host: &EdgeId) -> Self {
        Self {
            history: Vec::new(),
            last_remapped: Some(host.clone()),
        }
    }

    fn record(&mut self, iteration: u64, winner: &EdgeId) {
        match self.history.last() {
            Some((last, _)) if *last >= iteration => {}
            _ => self.history.push((iteration, winner.clone())),
        }
    }
}

/// Emits a plan only when the decision switched hosts and the winner is not
/// where the task was last remapped to.
pub fn decide_offload(
    decision: &Decision,
    memory: &mut AllocationMemory,
    task_id: &str,
    channels: &[String],
) -> Option<RemapPlan> {
    memory.record(decision.iteration, &decision.winner);
    if !decision.switched || memory.last_remapped.as_ref() == Some(&decision.winner) {
        return None;
    }
    memory.last_remapped = Some(decision.winner.clone());
    Some(RemapPlan::retarget(task_id, &decision.winner, channels))
}

/// One robot's executor.
#[derive(Debug, Clone)]
pub struct Executor {
    pub robot_id: RobotId,
    robot_count: usize,
    task_id: String,
    channels: Vec<String>,
    previous: EdgeId,
    pub memory: AllocationMemory,
    pub registry: ChannelRegistry,
    inbox: BTreeMap<u64, BTreeMap<RobotId, EdgeId>>,
    pub log: Vec<Decision>,
    pub plans_emitted: u64,
}

impl Executor {
    pub fn new(
        robot_id: RobotId,
        robot_count: usize,
        task_id: &str,
        channels: Vec<String>,
        initial_host: &EdgeId,
    ) -> Self {
        Self {
            robot_id,
            robot_count,
            task_id: task_id.to_owned(),
            registry: ChannelRegistry::bound_to(initial_host, &channels),
            channels,
            previous: initial_host.clone(),
            memory: AllocationMemory::starting_at(initial_host),
            inbox: BTreeMap::new(),
            log: Vec::new(),
            plans_emitted: 0,
        }
    }

    pub fn current_host(&self) -> &EdgeId {
        &self.previous
    }

    pub fn receive(&mut self, proposal: &Proposal) {
        self.inbox
            .entry(proposal.iteration)
            .or_default()
            .insert(proposal.robot_id.clone(), proposal.max_edge.clone());
    }

    /// Runs consensus for `iteration`, applies any resulting remap and logs
    /// the decision.
    pub fn decide(&mut self, iteration: u64) -> (Decision, Option<RemapPlan>) {
        let proposals = self.inbox.remove(&iteration).unwrap_or_default();
        // older iterations can never be decided now
        self.inbox.retain(|&it, _| it > iteration);
        let decision = consensus(iteration, &proposals, Some(&self.previous), self.robot_count)
            .expect("incumbent always present");
        let plan = decide_offload(&decision, &mut self.memory, &self.task_id, &self.channels);
        if let Some(plan) = &plan {
            apply_remap(plan, &mut self.registry).expect("plan built from registry channels");
            self.plans_emitted += 1;
        }
        self.previous = decision.winner.clone();
        self.log.push(decision.clone());
        (decision, plan)
    }
}

pub fn decision_csv_header(edges: &[EdgeId]) -> String {
    let mut s = String::from("iteration,winner");
    for e in edges {
        let _ = write!(s, ",votes_{e}");
    }
    s.push_str(",switched");
    s
}

/// `iteration,winner,votes_<edge>...,switched`
pub fn decision_csv_row(d: &Decision, edges: &[EdgeId]) -> String {
    let mut s = format!("{},{}", d.iteration, d.winner);
    for e in edges {
        let _ = write!(s, ",{}", d.votes.get(e).copied().unwrap_or(0));
    }
    let _ = write!(s, ",{}", d.switched);
    s
}

pub fn decision_csv(log: &[Decision], edges: &[EdgeId]) -> String {
    let mut out = decision_csv_header(edges);
    out.push('\n');
    for d in log {
        out.push_str(&decision_csv_row(d, edges));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn props(pairs: &[(&str, &str)]) -> BTreeMap<RobotId, EdgeId> {
        pairs
            .iter()
            .map(|(r, e)| (RobotId::from(*r), EdgeId::from(*e)))
            .collect()
    }

    #[test]
    fn plurality_examples() {
        let d = consensus(1, &props(&[("r1", "e2"), ("r2", "e2"), ("r3", "e1")]), None, 3).unwrap();
        assert_eq!(d.winner, EdgeId::from("e2"));
        assert_eq!(d.votes[&EdgeId::from("e2")], 2);
        assert_eq!(d.votes[&EdgeId::from("e1")], 1);

        let e1 = EdgeId::from("e1");
        let d = consensus(2, &props(&[("r1", "e1"), ("r2", "e1"), ("r3", "e1")]), Some(&e1), 3)
            .unwrap();
        assert_eq!(d.winner, e1);
        assert!(!d.switched);

        let e2 = EdgeId::from("e2");
        let d = consensus(3, &props(&[("r1", "e1"), ("r2", "e2")]), Some(&e2), 2).unwrap();
        assert_eq!(d.winner, e2);
        assert!(!d.switched);
    }

    #[test]
    fn tie_without_incumbent_goes_to_smallest_id() {
        let e3 = EdgeId::from("e3");
        let d = consensus(1, &props(&[("r1", "e2"), ("r2", "e1")]), Some(&e3), 2).unwrap();
        assert_eq!(d.winner, EdgeId::from("e1"));
        assert!(d.switched);
    }

    #[test]
    fn quorum_failure_defers() {
        assert_eq!(quorum(3), 2);
        assert_eq!(quorum(4), 2);
        assert_eq!(quorum(1), 1);
        let e1 = EdgeId::from("e1");
        let d = consensus(5, &props(&[("r1", "e2")]), Some(&e1), 4).unwrap();
        assert!(d.deferred);
        assert_eq!(d.winner, e1);
        assert!(!d.switched);
        assert_eq!(
            consensus(5, &props(&[]), None, 3),
            Err(ConsensusError::NoIncumbent)
        );
    }

    fn channels() -> Vec<String> {
        vec!["/r1/map".into(), "/r2/map".into()]
    }

    fn decision(iteration: u64, winner: &str, switched: bool) -> Decision {
        Decision {
            iteration,
            winner: winner.into(),
            votes: BTreeMap::new(),
            switched,
            deferred: false,
        }
    }

    #[test]
    fn offload_guard() {
        let mut mem = AllocationMemory::starting_at(&"e1".into());
        assert!(decide_offload(&decision(1, "e1", false), &mut mem, "t", &channels()).is_none());

        let plan = decide_offload(&decision(2, "e3", true), &mut mem, "t", &channels()).unwrap();
        assert_eq!(plan.target, EdgeId::from("e3"));
        assert_eq!(plan.mapping["/r1/map"], "/e3/r1/map");
        assert_eq!(mem.last_remapped, Some("e3".into()));
        assert_eq!(mem.history, vec![(1, "e1".into()), (2, "e3".into())]);

        // switched flag set but the task already lives on the winner
        let mut mem = AllocationMemory::starting_at(&"e1".into());
        let d = Decision {
            deferred: false,
            ..decision(3, "e1", true)
        };
        assert!(decide_offload(&d, &mut mem, "t", &channels()).is_none());
    }

    #[test]
    fn deferred_iteration_then_incumbent_emits_nothing() {
        let mut mem = AllocationMemory::starting_at(&"e1".into());
        let e1 = EdgeId::from("e1");
        let deferred = consensus(4, &props(&[]), Some(&e1), 3).unwrap();
        assert!(decide_offload(&deferred, &mut mem, "t", &channels()).is_none());
        let next = consensus(5, &props(&[("r1", "e1"), ("r2", "e1")]), Some(&e1), 3).unwrap();
        assert!(decide_offload(&next, &mut mem, "t", &channels()).is_none());
    }

    #[test]
    fn remap_rebinds_all_channels() {
        let mut reg = ChannelRegistry::bound_to(&"e1".into(), &channels());
        let plan = RemapPlan::retarget("t", &"e2".into(), &channels());
        assert_eq!(apply_remap(&plan, &mut reg).unwrap(), 2);
        for c in channels() {
            assert_eq!(reg.resolve(&c).unwrap().target, EdgeId::from("e2"));
        }
        // idempotent
        let before = reg.clone();
        assert_eq!(apply_remap(&plan, &mut reg).unwrap(), 0);
        assert_eq!(reg, before);
    }

    #[test]
    fn remap_is_atomic() {
        let mut reg = ChannelRegistry::bound_to(&"e1".into(), &channels());
        let before = reg.clone();
        let mut chans = channels();
        chans.push("/r9/map".into());
        let plan = RemapPlan::retarget("t", &"e2".into(), &chans);
        assert_eq!(
            apply_remap(&plan, &mut reg),
            Err(RemapError::UnknownChannel("/r9/map".into()))
        );
        assert_eq!(reg, before);
    }

    #[test]
    fn remap_rejects_non_bijective_plan() {
        let mut reg = ChannelRegistry::bound_to(&"e1".into(), &channels());
        let mut plan = RemapPlan::retarget("t", &"e2".into(), &channels());
        plan.mapping.insert("/r2/map".into(), "/e2/r1/map".into());
        assert!(matches!(
            apply_remap(&plan, &mut reg),
            Err(RemapError::NotBijective(_))
        ));
    }

    #[test]
    fn executor_flow() {
        let mut ex = Executor::new("r1".into(), 3, "t", channels(), &"e1".into());
        for (r, e) in [("r1", "e2"), ("r2", "e2"), ("r3", "e1")] {
            ex.receive(&Proposal {
                robot_id: r.into(),
                max_edge: e.into(),
                iteration: 1,
                utility_table: Default::default(),
            });
        }
        let (d, plan) = ex.decide(1);
        assert!(d.switched);
        assert!(plan.is_some());
        assert_eq!(ex.current_host(), &EdgeId::from("e2"));
        assert_eq!(ex.registry.resolve("/r1/map").unwrap().target, EdgeId::from("e2"));
        // nothing received for iteration 2: deferred, no plan
        let (d, plan) = ex.decide(2);
        assert!(d.deferred);
        assert!(plan.is_none());
        assert_eq!(ex.plans_emitted, 1);
        assert_eq!(ex.log.len(), 2);
    }

    #[test]
    fn decision_csv_format() {
        let edges: Vec<EdgeId> = vec!["e1".into(), "e2".into()];
        let d = consensus(7, &props(&[("r1", "e2"), ("r2", "e2")]), Some(&"e1".into()), 2).unwrap();
        assert_eq!(
            decision_csv(&[d], &edges),
            "iteration,winner,votes_e1,votes_e2,switched\n7,e2,0,2,true\n"
        );
    }
}
