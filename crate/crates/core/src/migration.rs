//! Tensor migration between Aggregators.
//!
//! pMaster sends MIGRATE_INIT to the old Aggregator, which piggybacks the new
//! location on the next full round of pull responses. Once every worker has
//! been answered, the old Aggregator ships the tensor (TENSOR_COPY). The new
//! Aggregator defers updates until the copy lands, then reports
//! TENSOR_COPY_DONE; when every worker's push has reached it, it reports
//! WORKER_DONE. The session completes when pMaster has both.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AggId, Ms, TaskKey};

pub type SessionId = u64;
pub type AgentId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Init,
    AwaitPull,
    InfoPropagated,
    Copying,
    CopyDone,
    AwaitWorkerDone,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MsgKind {
    MigrateInit,
    PullResponseWithRedirect,
    TensorCopy,
    TensorCopyDone,
    WorkerDone,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MigrationMessage {
    pub session_id: SessionId,
    pub tensor: TaskKey,
    pub kind: MsgKind,
    pub from: AggId,
    pub to: AggId,
    /// Payload size; only meaningful for TENSOR_COPY.
    pub size_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MigrationError {
    #[error("source and destination are both {0}")]
    SameAggregator(AggId),
    #[error("tensor {0} already has an active migration")]
    Conflict(TaskKey),
    #[error("event {event} not valid in phase {phase:?}")]
    UnexpectedPhase { phase: Phase, event: &'static str },
    #[error("agent {agent} pushed to the old Aggregator after its redirect")]
    StalePush { agent: AgentId },
    #[error("agent {agent} pushed to the new Aggregator before its redirect")]
    EarlyPush { agent: AgentId },
}

/// pMaster-side bookkeeping of active sessions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct MigrationRegistry {
    active: BTreeMap<TaskKey, SessionId>,
    next_id: SessionId,
}

impl MigrationRegistry {
    pub fn is_migrating(&self, tensor: &TaskKey) -> bool {
        self.active.contains_key(tensor)
    }

    pub fn active(&self) -> impl Iterator<Item = (&TaskKey, &SessionId)> {
        self.active.iter()
    }

    pub fn finish(&mut self, tensor: &TaskKey) {
        self.active.remove(tensor);
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }
}

/// What the old Aggregator should do with a push.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OldPush {
    /// Still the master copy: aggregate locally.
    Aggregate,
    /// The copy has started: forward to the new Aggregator.
    Forward,
}

/// What the new Aggregator should do with a push.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewPush {
    pub execute: bool,
    pub worker_done: Option<MigrationMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MigrationSession {
    pub session_id: SessionId,
    pub tensor: TaskKey,
    pub from_agg: AggId,
    pub to_agg: AggId,
    pub phase: Phase,
    pub agents_updated: BTreeSet<AgentId>,
    pub copy_done_seen: bool,
    pub worker_done_seen: bool,
    pub stall_ms: Ms,
    pub size_bytes: u64,
    num_agents: u32,
    /// Agents answered without redirect in a round that began before MIGRATE_INIT.
    plain_round: BTreeSet<AgentId>,
    redirected: BTreeSet<AgentId>,
    copy_arrived: bool,
    pushed_at_new: BTreeSet<AgentId>,
}

impl MigrationSession {
    fn msg(&self, kind: MsgKind) -> MigrationMessage {
        MigrationMessage {
            session_id: self.session_id,
            tensor: self.tensor.clone(),
            kind,
            from: self.from_agg,
            to: self.to_agg,
            size_bytes: if kind == MsgKind::TensorCopy { self.size_bytes } else { 0 },
        }
    }

    pub fn num_agents(&self) -> u32 {
        self.num_agents
    }

    pub fn copy_arrived(&self) -> bool {
        self.copy_arrived
    }

    pub fn copy_started(&self) -> bool {
        self.phase >= Phase::Copying
    }

    pub fn is_complete(&self) -> bool {
        self.phase == Phase::Complete
    }

    /// The old Aggregator received MIGRATE_INIT. `already_pulled` lists agents
    /// answered in the pull round under way, if one is.
    pub fn on_init_delivered(&mut self, already_pulled: &BTreeSet<AgentId>) -> Result<(), MigrationError> {
        if self.phase != Phase::Init {
            return Err(MigrationError::UnexpectedPhase { phase: self.phase, event: "init" });
        }
        self.phase = Phase::AwaitPull;
        if already_pulled.len() < self.num_agents as usize {
            self.plain_round = already_pulled.clone();
        }
        Ok(())
    }

    /// Old Aggregator answers a pull. Returns the redirect target to embed,
    /// if any, and whether the copy should start now.
    pub fn on_pull(&mut self, agent: AgentId) -> (Option<AggId>, bool) {
        match self.phase {
            Phase::Init => (None, false),
            Phase::AwaitPull if !self.plain_round.is_empty() => {
                self.plain_round.insert(agent);
                if self.plain_round.len() >= self.num_agents as usize {
                    self.plain_round.clear();
                }
                (None, false)
            }
            Phase::AwaitPull => {
                self.redirected.insert(agent);
                if self.redirected.len() >= self.num_agents as usize {
                    self.phase = Phase::InfoPropagated;
                    (Some(self.to_agg), true)
                } else {
                    (Some(self.to_agg), false)
                }
            }
            // Straggler pulls after every agent has been told still carry the redirect.
            _ => (Some(self.to_agg), false),
        }
    }

    /// An agent processed the redirect. Idempotent.
    pub fn on_agent_redirect(&mut self, agent: AgentId) {
        self.agents_updated.insert(agent);
    }

    pub fn start_copy(&mut self) -> Result<MigrationMessage, MigrationError> {
        if self.phase != Phase::InfoPropagated {
            return Err(MigrationError::UnexpectedPhase { phase: self.phase, event: "start_copy" });
        }
        self.phase = Phase::Copying;
        Ok(self.msg(MsgKind::TensorCopy))
    }

    pub fn on_push_at_old(&self, agent: AgentId) -> Result<OldPush, MigrationError> {
        if self.agents_updated.contains(&agent) {
            return Err(MigrationError::StalePush { agent });
        }
        Ok(if self.copy_started() { OldPush::Forward } else { OldPush::Aggregate })
    }

    /// The copy reached the new Aggregator; deferred pushes may now run.
    pub fn on_copy_complete(&mut self) -> Result<MigrationMessage, MigrationError> {
        if self.phase != Phase::Copying {
            return Err(MigrationError::UnexpectedPhase { phase: self.phase, event: "copy_complete" });
        }
        self.copy_arrived = true;
        self.phase = Phase::CopyDone;
        Ok(self.msg(MsgKind::TensorCopyDone))
    }

    /// A push (direct or forwarded) reached the new Aggregator.
    pub fn on_push_at_new(&mut self, agent: AgentId, forwarded: bool) -> Result<NewPush, MigrationError> {
        if !forwarded && !self.agents_updated.contains(&agent) {
            return Err(MigrationError::EarlyPush { agent });
        }
        let mut worker_done = None;
        if !forwarded && self.pushed_at_new.insert(agent) && self.pushed_at_new.len() == self.num_agents as usize {
            worker_done = Some(self.msg(MsgKind::WorkerDone));
        }
        Ok(NewPush { execute: self.copy_arrived, worker_done })
    }

    /// pMaster received a notification. Returns true when this completes the session.
    pub fn on_pmaster(&mut self, kind: MsgKind) -> bool {
        match kind {
            MsgKind::TensorCopyDone => self.copy_done_seen = true,
            MsgKind::WorkerDone => self.worker_done_seen = true,
            _ => return false,
        }
        if self.phase == Phase::Complete {
            return false;
        }
        if self.copy_done_seen && self.worker_done_seen {
            self.phase = Phase::Complete;
            return true;
        }
        if self.copy_done_seen {
            self.phase = Phase::AwaitWorkerDone;
        }
        false
    }
}

/// pMaster starts a migration of `tensor` from `from` to `to`.
pub fn initiate_migration(
    registry: &mut MigrationRegistry,
    tensor: TaskKey,
    from: AggId,
    to: AggId,
    num_agents: u32,
    size_bytes: u64,
) -> Result<(MigrationSession, MigrationMessage), MigrationError> {
    if from == to {
        return Err(MigrationError::SameAggregator(from));
    }
    if registry.active.contains_key(&tensor) {
        return Err(MigrationError::Conflict(tensor));
    }
    let session_id = registry.next_id;
    registry.next_id += 1;
    registry.active.insert(tensor.clone(), session_id);
    let session = MigrationSession {
        session_id,
        tensor,
        from_agg: from,
        to_agg: to,
        phase: Phase::Init,
        agents_updated: BTreeSet::new(),
        copy_done_seen: false,
        worker_done_seen: false,
        stall_ms: 0,
        size_bytes,
        num_agents: num_agents.max(1),
        plain_round: BTreeSet::new(),
        redirected: BTreeSet::new(),
        copy_arrived: false,
        pushed_at_new: BTreeSet::new(),
    };
    let msg = session.msg(MsgKind::MigrateInit);
    Ok((session, msg))
}

/// Transfer time of one tensor: payload over the link plus a fixed
/// per-message serialization overhead, rounded up to whole ms.
pub fn copy_time_ms(size_bytes: u64, bandwidth_gbps: f64, overhead_ms: Ms) -> Ms {
    if size_bytes == 0 {
        return 0;
    }
    transfer_ms(size_bytes, bandwidth_gbps) + overhead_ms
}

/// Wire time of `size_bytes` at `bandwidth_gbps`, rounded up to whole ms.
pub fn transfer_ms(size_bytes: u64, bandwidth_gbps: f64) -> Ms {
    let bits_per_ms = bandwidth_gbps * 1e6;
    ((size_bytes as f64 * 8.0) / bits_per_ms).ceil() as Ms
}

/// Worker-visible delay: how far the copy overran the moment the tensor was needed.
pub fn measure_stall(copy_finish_ms: Ms, needed_at_ms: Ms) -> Ms {
    copy_finish_ms.saturating_sub(needed_at_ms)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BulkStall {
    pub copy_total_ms: Ms,
    pub per_tensor_stall_ms: Vec<Ms>,
    /// The job waits for its latest-arriving tensor.
    pub stall_ms: Ms,
}

/// Serial copy of several tensors over one link starting at time 0. Each
/// entry is `(size_bytes, needed_at_ms)`; copies go in order of need.
pub fn bulk_stall(tensors: &[(u64, Ms)], bandwidth_gbps: f64, overhead_ms: Ms) -> BulkStall {
    let mut order: Vec<usize> = (0..tensors.len()).collect();
    order.sort_by_key(|&i| (tensors[i].1, i));
    let mut t = 0;
    let mut per = vec![0; tensors.len()];
    for i in order {
        t += copy_time_ms(tensors[i].0, bandwidth_gbps, overhead_ms);
        per[i] = measure_stall(t, tensors[i].1);
    }
    BulkStall {
        copy_total_ms: t,
        stall_ms: per.iter().copied().max().unwrap_or(0),
        per_tensor_stall_ms: per,
    }
}

// ---------------------------------------------------------------------------
// Exhaustive interleaving check.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Node {
    Master,
    Old,
    New,
    Agent(AgentId),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Msg {
    Init,
    Push { agent: AgentId, round: u32, forwarded: bool },
    Pull { agent: AgentId, round: u32 },
    PullResp { round: u32, redirect: bool },
    Copy { version: u32 },
    CopyDone,
    WorkerDone,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct AgentState {
    on_new: bool,
    /// Parameter version last received.
    version: u32,
    done: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct AggSide {
    version: u32,
    pushes: BTreeMap<u32, BTreeSet<AgentId>>,
    pending_pulls: BTreeSet<(u32, AgentId)>,
    round_pulled: BTreeSet<AgentId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct World {
    channels: BTreeMap<(Node, Node), VecDeque<Msg>>,
    agents: Vec<AgentState>,
    old: AggSide,
    new: AggSide,
    session: MigrationSession,
    init_sent: bool,
    init_delivered_at: Option<u32>,
    completions: u32,
    notified_at: [Option<u32>; 2],
    aggregated: BTreeMap<u32, u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CheckReport {
    pub states: usize,
    pub terminal_states: usize,
    pub completed_runs: usize,
    pub violations: Vec<String>,
}

impl CheckReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

const ROUNDS: u32 = 4;

impl World {
    fn new(agents: u32) -> Self {
        let mut registry = MigrationRegistry::default();
        let tensor = TaskKey::new("job".into(), crate::domain::TaskId(0));
        let (session, _) = initiate_migration(&mut registry, tensor, AggId(0), AggId(1), agents, 1 << 20)
            .expect("distinct aggregators");
        let side = AggSide {
            version: 0,
            pushes: BTreeMap::new(),
            pending_pulls: BTreeSet::new(),
            round_pulled: BTreeSet::new(),
        };
        let mut w = World {
            channels: BTreeMap::new(),
            agents: (0..agents).map(|_| AgentState { on_new: false, version: 0, done: false }).collect(),
            old: side.clone(),
            new: side,
            session,
            init_sent: false,
            init_delivered_at: None,
            completions: 0,
            notified_at: [None, None],
            aggregated: BTreeMap::new(),
        };
        for a in 0..agents {
            w.send(Node::Agent(a), Node::Old, Msg::Push { agent: a, round: 0, forwarded: false });
            w.send(Node::Agent(a), Node::Old, Msg::Pull { agent: a, round: 1 });
        }
        w
    }

    fn send(&mut self, from: Node, to: Node, m: Msg) {
        self.channels.entry((from, to)).or_default().push_back(m);
    }

    fn n_agents(&self) -> usize {
        self.agents.len()
    }

    fn max_agent_version(&self) -> u32 {
        self.agents.iter().map(|a| a.version).max().unwrap_or(0)
    }

    fn successors(&self) -> Vec<Result<World, String>> {
        let mut out = Vec::new();
        if !self.init_sent {
            let mut w = self.clone();
            w.init_sent = true;
            w.send(Node::Master, Node::Old, Msg::Init);
            out.push(Ok(w));
        }
        for (key, q) in &self.channels {
            if q.is_empty() {
                continue;
            }
            let mut w = self.clone();
            let m = w.channels.get_mut(key).and_then(VecDeque::pop_front).expect("non-empty");
            out.push(w.deliver(key.0, key.1, m).map(|_| w));
        }
        out
    }

    fn deliver(&mut self, _from: Node, to: Node, m: Msg) -> Result<(), String> {
        match (to, m) {
            (Node::Old, Msg::Init) => {
                self.init_delivered_at = Some(self.max_agent_version());
                let pulled = self.old.round_pulled.clone();
                self.session.on_init_delivered(&pulled).map_err(|e| e.to_string())
            }
            (Node::Old, Msg::Push { agent, round, forwarded: _ }) => {
                match self.session.on_push_at_old(agent).map_err(|e| e.to_string())? {
                    OldPush::Aggregate => {
                        self.old.pushes.entry(round).or_default().insert(agent);
                        self.try_aggregate_old()
                    }
                    OldPush::Forward => {
                        self.send(Node::Old, Node::New, Msg::Push { agent, round, forwarded: true });
                        Ok(())
                    }
                }
            }
            (Node::Old, Msg::Pull { agent, round }) => {
                self.old.pending_pulls.insert((round, agent));
                self.answer_old_pulls()
            }
            (Node::New, Msg::Push { agent, round, forwarded }) => {
                let r = self.session.on_push_at_new(agent, forwarded).map_err(|e| e.to_string())?;
                if r.worker_done.is_some() {
                    self.notified_at[1] = Some(self.max_agent_version());
                    self.send(Node::New, Node::Master, Msg::WorkerDone);
                }
                self.new.pushes.entry(round).or_default().insert(agent);
                if r.execute {
                    self.try_aggregate_new()?;
                }
                Ok(())
            }
            (Node::New, Msg::Pull { agent, round }) => {
                self.new.pending_pulls.insert((round, agent));
                self.answer_new_pulls();
                Ok(())
            }
            (Node::New, Msg::Copy { version }) => {
                self.session.on_copy_complete().map_err(|e| e.to_string())?;
                self.new.version = version;
                self.notified_at[0] = Some(self.max_agent_version());
                self.send(Node::New, Node::Master, Msg::CopyDone);
                self.try_aggregate_new()
            }
            (Node::Master, Msg::CopyDone) => {
                self.pm(MsgKind::TensorCopyDone);
                Ok(())
            }
            (Node::Master, Msg::WorkerDone) => {
                self.pm(MsgKind::WorkerDone);
                Ok(())
            }
            (Node::Agent(a), Msg::PullResp { round, redirect }) => {
                let st = &mut self.agents[a as usize];
                st.version = round;
                if redirect {
                    st.on_new = true;
                    self.session.on_agent_redirect(a);
                }
                let target = if self.agents[a as usize].on_new { Node::New } else { Node::Old };
                if round < ROUNDS {
                    self.send(Node::Agent(a), target, Msg::Push { agent: a, round, forwarded: false });
                    self.send(Node::Agent(a), target, Msg::Pull { agent: a, round: round + 1 });
                } else {
                    self.agents[a as usize].done = true;
                }
                Ok(())
            }
            (to, m) => Err(format!("unexpected delivery of {m:?} to {to:?}")),
        }
    }

    fn pm(&mut self, kind: MsgKind) {
        if self.session.on_pmaster(kind) {
            self.completions += 1;
        }
    }

    fn record_update(&mut self, round: u32) -> Result<(), String> {
        let c = self.aggregated.entry(round).or_insert(0);
        *c += 1;
        if *c > 1 {
            return Err(format!("round {round} aggregated twice"));
        }
        Ok(())
    }

    fn try_aggregate_old(&mut self) -> Result<(), String> {
        let r = self.old.version;
        if self.old.pushes.get(&r).is_some_and(|s| s.len() == self.n_agents()) {
            if self.session.copy_started() {
                return Err("old Aggregator updated after the copy started".into());
            }
            self.old.pushes.remove(&r);
            self.old.version += 1;
            self.record_update(r)?;
            self.answer_old_pulls()?;
        }
        Ok(())
    }

    fn answer_old_pulls(&mut self) -> Result<(), String> {
        let ready: Vec<(u32, AgentId)> = self
            .old
            .pending_pulls
            .iter()
            .filter(|(r, _)| *r <= self.old.version)
            .copied()
            .collect();
        for (round, agent) in ready {
            self.old.pending_pulls.remove(&(round, agent));
            let (redirect, start_copy) = self.session.on_pull(agent);
            self.old.round_pulled.insert(agent);
            if self.old.round_pulled.len() == self.n_agents() {
                self.old.round_pulled.clear();
            }
            self.send(Node::Old, Node::Agent(agent), Msg::PullResp { round, redirect: redirect.is_some() });
            if start_copy {
                self.session.start_copy().map_err(|e| e.to_string())?;
                let version = self.old.version;
                self.send(Node::Old, Node::New, Msg::Copy { version });
            }
        }
        Ok(())
    }

    fn try_aggregate_new(&mut self) -> Result<(), String> {
        loop {
            let r = self.new.version;
            if !self.new.pushes.get(&r).is_some_and(|s| s.len() == self.n_agents()) {
                return Ok(());
            }
            if !self.session.copy_arrived() {
                return Err("new Aggregator updated before the copy arrived".into());
            }
            self.new.pushes.remove(&r);
            self.new.version += 1;
            self.record_update(r)?;
            self.answer_new_pulls();
        }
    }

    fn answer_new_pulls(&mut self) {
        let ready: Vec<(u32, AgentId)> = self
            .new
            .pending_pulls
            .iter()
            .filter(|(r, _)| *r <= self.new.version)
            .copied()
            .collect();
        for (round, agent) in ready {
            self.new.pending_pulls.remove(&(round, agent));
            self.send(Node::New, Node::Agent(agent), Msg::PullResp { round, redirect: false });
        }
    }

    fn check_terminal(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !self.agents.iter().all(|a| a.done) {
            v.push("deadlock: workers stuck".into());
        }
        for r in 0..ROUNDS {
            if self.aggregated.get(&r) != Some(&1) {
                v.push(format!("round {r} not aggregated exactly once"));
            }
        }
        if self.completions > 1 {
            v.push("session completed more than once".into());
        }
        if let Some(at) = self.init_delivered_at {
            // Redirect rides the next full pull round; the round after that reaches the new side.
            if at + 2 < ROUNDS && self.completions != 1 {
                v.push(format!("session delivered at version {at} never completed"));
            }
            if let [Some(a), Some(b)] = self.notified_at {
                let done = a.max(b);
                if done > at + 2 {
                    v.push(format!("notifications at version {done}, more than two iterations after {at}"));
                }
            }
        }
        v
    }
}

/// Explores every interleaving of message deliveries (FIFO per channel) for
/// one tensor served to `agents` workers over a few iterations, with
/// MIGRATE_INIT sent at any point.
pub fn exhaustive_check(agents: u32) -> CheckReport {
    let mut report = CheckReport::default();
    let mut seen: HashSet<World> = HashSet::new();
    let mut stack = vec![World::new(agents)];
    while let Some(w) = stack.pop() {
        if !seen.insert(w.clone()) {
            continue;
        }
        report.states += 1;
        let succ = w.successors();
        if succ.is_empty() {
            report.terminal_states += 1;
            if w.completions == 1 {
                report.completed_runs += 1;
            }
            for v in w.check_terminal() {
                if !report.violations.contains(&v) {
                    report.violations.push(v);
                }
            }
            continue;
        }
        for s in succ {
            match s {
                Ok(next) => stack.push(next),
                Err(e) => {
                    if !report.violations.contains(&e) {
                        report.violations.push(e);
                    }
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::TaskId;

    fn key() -> TaskKey {
        TaskKey::new("j".into(), TaskId(0))
    }

    fn session(agents: u32) -> MigrationSession {
        let mut reg = MigrationRegistry::default();
        initiate_migration(&mut reg, key(), AggId(0), AggId(1), agents, 100).unwrap().0
    }

    #[test]
    fn initiate_rules() {
        let mut reg = MigrationRegistry::default();
        let (s, m) = initiate_migration(&mut reg, key(), AggId(0), AggId(1), 2, 10).unwrap();
        assert_eq!(s.phase, Phase::Init);
        assert_eq!(m.kind, MsgKind::MigrateInit);
        assert_eq!(
            initiate_migration(&mut reg, key(), AggId(0), AggId(2), 2, 10).unwrap_err(),
            MigrationError::Conflict(key())
        );
        let other = TaskKey::new("j".into(), TaskId(1));
        assert_eq!(
            initiate_migration(&mut reg, other, AggId(3), AggId(3), 2, 10).unwrap_err(),
            MigrationError::SameAggregator(AggId(3))
        );
    }

    #[test]
    fn copy_waits_for_every_worker() {
        let mut s = session(2);
        s.on_init_delivered(&BTreeSet::new()).unwrap();
        assert_eq!(s.on_pull(0), (Some(AggId(1)), false));
        assert_eq!(s.on_pull(1), (Some(AggId(1)), true));
        assert_eq!(s.start_copy().unwrap().kind, MsgKind::TensorCopy);
        // a straggler pull still sees the redirect and does not restart the copy
        assert_eq!(s.on_pull(1), (Some(AggId(1)), false));
        assert_eq!(s.phase, Phase::Copying);
    }

    #[test]
    fn single_worker_copy_starts_immediately() {
        let mut s = session(1);
        s.on_init_delivered(&BTreeSet::new()).unwrap();
        assert_eq!(s.on_pull(0), (Some(AggId(1)), true));
    }

    #[test]
    fn mid_round_init_waits_for_next_round() {
        let mut s = session(2);
        s.on_init_delivered(&BTreeSet::from([0])).unwrap();
        assert_eq!(s.on_pull(1), (None, false));
        assert_eq!(s.on_pull(0), (Some(AggId(1)), false));
    }

    #[test]
    fn redirect_is_idempotent() {
        let mut s = session(2);
        s.on_agent_redirect(0);
        s.on_agent_redirect(0);
        assert_eq!(s.agents_updated.len(), 1);
        assert_eq!(s.on_push_at_old(0), Err(MigrationError::StalePush { agent: 0 }));
    }

    #[test]
    fn updates_deferred_until_copy() {
        let mut s = session(1);
        s.on_init_delivered(&BTreeSet::new()).unwrap();
        s.on_pull(0);
        s.on_agent_redirect(0);
        s.start_copy().unwrap();
        let early = s.on_push_at_new(0, false).unwrap();
        assert!(!early.execute);
        assert!(early.worker_done.is_some());
        assert!(!s.on_pmaster(MsgKind::WorkerDone));
        assert_ne!(s.phase, Phase::Complete);
        s.on_copy_complete().unwrap();
        assert!(s.on_push_at_new(0, false).unwrap().execute);
        assert!(s.on_pmaster(MsgKind::TensorCopyDone));
        assert_eq!(s.phase, Phase::Complete);
    }

    #[test]
    fn copy_done_alone_awaits_worker() {
        let mut s = session(1);
        s.on_init_delivered(&BTreeSet::new()).unwrap();
        s.on_pull(0);
        s.start_copy().unwrap();
        s.on_copy_complete().unwrap();
        assert!(!s.on_pmaster(MsgKind::TensorCopyDone));
        assert_eq!(s.phase, Phase::AwaitWorkerDone);
    }

    #[test]
    fn stall_arithmetic() {
        assert_eq!(measure_stall(4, 50), 0);
        assert_eq!(measure_stall(60, 50), 10);
        assert_eq!(copy_time_ms(0, 100.0, 2), 0);
        assert_eq!(copy_time_ms(12_500_000, 100.0, 2), 3);
    }

    #[test]
    fn exhaustive_two_workers() {
        let r = exhaustive_check(2);
        assert!(r.ok(), "{:?}", r.violations);
        assert!(r.completed_runs > 0);
    }
}
