//! The reconciler: plans applied slices and executes their task graphs over
//! the simulated infrastructure in virtual time.
//!
//! Every observable change goes through the event log. [`WorldState`] is a
//! pure fold over that log, so status views can be rebuilt from a persisted
//! log alone. The runtime side (pending completions, infrastructure RNGs) is
//! rebuilt by [`Engine::resume`], which re-issues the logged commands and
//! checks that the regenerated records match.

mod campaign;
mod event;
mod view;
mod world;

pub use campaign::{campaign_request, run_campaign, CampaignConfig, CampaignReport};
pub use event::{export_jsonl, EventKind, EventRecord, Subject};
pub use view::{
    list_clusters, list_resources, list_slices, slice_status, AppRow, ArtifactRow, ClusterRow,
    NodeRow, SliceStatus, SliceSummary,
};
pub use world::{AppState, FoldError, RunningTask, SliceState, WorldState, RECENT_EVENTS};

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, MutexGuard};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::appcatalog::{deploy_application, AppCatalog, ArtifactStore, SHARE_TIMEOUT};
use crate::descriptor::{validate, AppRole, CompatibilityMatrix, SliceRequest, ValidationReport};
use crate::infra::{
    DomainInventory, FaultSpec, HostRecord, InfraError, Infrastructure, NodeHandle, StepDescriptor,
};
use crate::lifecycle::{
    derive_cluster_phase, derive_slice_phase, AppStatus, NodeEvent, NodeState,
    RetryPolicy, SlicePhase,
};
use crate::planner::{build_plan, place_slice, PlacementMap, PlanError, Task, TaskGraph, TaskId, TaskKind};
use crate::time::VirtualTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineConfig {
    pub seed: u64,
    pub policy: RetryPolicy,
    /// How long a consumer application waits for its sharefile.
    pub share_timeout: u64,
}

impl EngineConfig {
    pub fn with_seed(seed: u64) -> Self {
        EngineConfig {
            seed,
            ..EngineConfig::default()
        }
    }
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            seed: 0,
            policy: RetryPolicy::default(),
            share_timeout: SHARE_TIMEOUT,
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("validation failed:\n{0}")]
    ValidationFailed(ValidationReport),
    #[error("planning failed: {0}")]
    PlanningFailed(#[from] PlanError),
    #[error("slice '{0}' already exists")]
    AlreadyExists(String),
    #[error("slice '{0}' not found")]
    NotFound(String),
    #[error("deadlock at {at}: no runnable task for {slices:?}")]
    Deadlock { at: VirtualTime, slices: Vec<String> },
    #[error("time budget exceeded at {at} with {slices:?} unsettled")]
    TimeExceeded { at: VirtualTime, slices: Vec<String> },
    #[error(transparent)]
    Infra(#[from] InfraError),
    #[error("invalid fault: {0}")]
    InvalidFault(String),
    #[error("log replay diverged at record {seq}: {message}")]
    ReplayDiverged { seq: u64, message: String },
    #[error("inconsistent event: {0}")]
    Fold(#[from] FoldError),
    #[error("storage: {0}")]
    Storage(String),
}

/// Destination for records as they are produced, e.g. a persistent log.
pub trait RecordSink: Send {
    fn append(&mut self, record: &EventRecord) -> Result<(), String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TaskRun {
    Pending,
    Running,
    /// Consumer waiting for its sharefile to appear.
    Waiting,
    Done,
    Failed,
    Abandoned,
}

#[derive(Debug, Clone, PartialEq)]
enum Outcome {
    Allocated(NodeHandle),
    Ok,
    Failed(String),
}

#[derive(Debug, Clone)]
enum Action {
    Complete {
        slice: String,
        epoch: u64,
        task: TaskId,
        gen: u64,
        outcome: Outcome,
    },
    Retry {
        slice: String,
        epoch: u64,
        node: String,
    },
    ShareTimeout {
        slice: String,
        epoch: u64,
        task: TaskId,
        gen: u64,
    },
}

impl Action {
    fn slice(&self) -> &str {
        match self {
            Action::Complete { slice, .. }
            | Action::Retry { slice, .. }
            | Action::ShareTimeout { slice, .. } => slice,
        }
    }
}

struct AllocRecord {
    cluster: String,
    node: String,
    handle: NodeHandle,
}

struct SliceRun {
    epoch: u64,
    request: SliceRequest,
    placements: PlacementMap,
    graph: TaskGraph,
    state: Vec<TaskRun>,
    gen: Vec<u64>,
    handles: BTreeMap<String, NodeHandle>,
    allocations: Vec<AllocRecord>,
    waiters: BTreeMap<String, Vec<TaskId>>,
}

impl SliceRun {
    fn is_current(&self, action: &Action) -> bool {
        match action {
            Action::Complete { epoch, task, gen, .. } => {
                *epoch == self.epoch && self.gen[*task] == *gen && self.state[*task] == TaskRun::Running
            }
            Action::Retry { epoch, .. } => *epoch == self.epoch,
            Action::ShareTimeout { epoch, task, gen, .. } => {
                *epoch == self.epoch && self.gen[*task] == *gen && self.state[*task] == TaskRun::Waiting
            }
        }
    }
}

pub struct Engine {
    config: EngineConfig,
    world: WorldState,
    log: Vec<EventRecord>,
    sink: Option<Box<dyn RecordSink>>,
    now: VirtualTime,
    infra: Infrastructure,
    /// Inventories as registered, before any slice is placed.
    baseline: BTreeMap<String, DomainInventory>,
    catalog: AppCatalog,
    matrix: CompatibilityMatrix,
    artifacts: ArtifactStore,
    queue: BTreeMap<(VirtualTime, u64), Action>,
    queue_seq: u64,
    runs: BTreeMap<String, SliceRun>,
    next_epoch: u64,
    app_rng: ChaCha8Rng,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Self {
        let mut engine = Engine {
            config,
            world: WorldState::default(),
            log: Vec::new(),
            sink: None,
            now: VirtualTime::ZERO,
            infra: Infrastructure::new(config.seed),
            baseline: BTreeMap::new(),
            catalog: AppCatalog::default(),
            matrix: CompatibilityMatrix::default(),
            artifacts: ArtifactStore::new(),
            queue: BTreeMap::new(),
            queue_seq: 0,
            runs: BTreeMap::new(),
            next_epoch: 1,
            app_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0xa995_ca7a_1095_0000),
        };
        engine
            .emit(
                Subject::engine(),
                EventKind::EngineStarted {
                    seed: config.seed,
                    policy: config.policy,
                    share_timeout: config.share_timeout,
                },
                format!("seed {}", config.seed),
            )
            .expect("first record folds");
        engine
    }

    pub fn with_seed(seed: u64) -> Self {
        Engine::new(EngineConfig::with_seed(seed))
    }

    /// Rebuild an engine from a log by re-issuing its commands.
    ///
    /// Fails with `ReplayDiverged` if the regenerated records differ from the
    /// logged ones. Records regenerated past the end of `records` (a run cut
    /// short mid-step) are kept; see [`Engine::records_since`].
    pub fn resume(records: &[EventRecord]) -> Result<Engine, EngineError> {
        let diverged = |seq: u64, message: String| EngineError::ReplayDiverged { seq, message };
        let Some(EventKind::EngineStarted {
            seed,
            policy,
            share_timeout,
        }) = records.first().map(|r| &r.kind)
        else {
            return Err(diverged(1, "log does not start with EngineStarted".into()));
        };
        let mut engine = Engine::new(EngineConfig {
            seed: *seed,
            policy: *policy,
            share_timeout: *share_timeout,
        });
        let mut checked = 0;
        loop {
            let upto = engine.log.len().min(records.len());
            for (want, got) in records[checked..upto].iter().zip(&engine.log[checked..upto]) {
                if got != want {
                    return Err(diverged(
                        want.seq,
                        format!("expected {}, regenerated {}", want.to_json(), got.to_json()),
                    ));
                }
            }
            checked = upto;
            let Some(next) = records.get(engine.log.len()) else {
                break;
            };
            if next.kind.is_command() {
                engine.reissue(next)?;
            } else if engine.step()?.is_none() {
                return Err(diverged(next.seq, "no pending work left to regenerate it".into()));
            }
        }
        Ok(engine)
    }

    fn reissue(&mut self, r: &EventRecord) -> Result<(), EngineError> {
        match &r.kind {
            EventKind::DomainRegistered { inventory } => self.register_domain(inventory.clone()),
            EventKind::HostAdded { domain, host } => self.add_host(domain, host.clone()),
            EventKind::FaultArmed { spec } => self.arm_fault(spec.clone()),
            EventKind::SliceApplied { request, .. } => self.apply(request.clone()).map(|_| ()),
            EventKind::ClockAdvanced { to } => self.advance_to(*to),
            EventKind::DeleteRequested => self.delete(&r.subject.slice),
            other => Err(EngineError::ReplayDiverged {
                seq: r.seq,
                message: format!("unexpected {} command", other.name()),
            }),
        }
    }

    /// Stream every subsequent record to `sink`.
    pub fn set_sink(&mut self, sink: Box<dyn RecordSink>) {
        self.sink = Some(sink);
    }

    pub fn take_sink(&mut self) -> Option<Box<dyn RecordSink>> {
        self.sink.take()
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn infra(&self) -> &Infrastructure {
        &self.infra
    }

    pub fn catalog_mut(&mut self) -> &mut AppCatalog {
        &mut self.catalog
    }

    pub fn set_compatibility(&mut self, matrix: CompatibilityMatrix) {
        self.matrix = matrix;
    }

    pub fn clock(&self) -> VirtualTime {
        self.now
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.log
    }

    pub fn records_since(&self, seq: u64) -> &[EventRecord] {
        let start = (seq as usize).min(self.log.len());
        &self.log[start..]
    }

    fn emit(&mut self, subject: Subject, kind: EventKind, detail: String) -> Result<(), EngineError> {
        let record = EventRecord {
            seq: self.world.last_seq + 1,
            at: self.now,
            subject,
            kind,
            detail,
        };
        self.world.apply(&record)?;
        if let Some(sink) = &mut self.sink {
            sink.append(&record).map_err(EngineError::Storage)?;
        }
        self.log.push(record);
        Ok(())
    }

    // ---- commands ----

    pub fn register_domain(&mut self, inventory: DomainInventory) -> Result<(), EngineError> {
        self.infra.register_domain(inventory.clone())?;
        self.baseline.insert(inventory.domain.clone(), inventory.clone());
        let detail = format!("{} ({}, {} hosts)", inventory.domain, inventory.kind.as_str(), inventory.hosts.len());
        self.emit(Subject::engine(), EventKind::DomainRegistered { inventory }, detail)
    }

    /// Grow a registered domain by one host.
    pub fn add_host(&mut self, domain: &str, host: HostRecord) -> Result<(), EngineError> {
        self.infra.add_host(domain, host.clone())?;
        if let Some(inv) = self.baseline.get_mut(domain) {
            inv.hosts.push(host.clone());
        }
        let detail = format!("{domain}/{}", host.host_id);
        self.emit(
            Subject::engine(),
            EventKind::HostAdded {
                domain: domain.to_string(),
                host,
            },
            detail,
        )
    }

    pub fn arm_fault(&mut self, spec: FaultSpec) -> Result<(), EngineError> {
        self.infra.arm_fault(spec.clone()).map_err(EngineError::InvalidFault)?;
        let detail = format!("{} on {}", spec.target.as_str(), spec.domain);
        self.emit(Subject::engine(), EventKind::FaultArmed { spec }, detail)
    }

    /// Validation findings for `req` against the registered domains,
    /// including catalog warnings.
    pub fn validate(&self, req: &SliceRequest) -> ValidationReport {
        let mut report = validate(req, &self.matrix, &self.infra.domain_names());
        for w in self.catalog.warnings(req) {
            report.push(w);
        }
        report
    }

    /// Inventories with every live slice's placements charged, as the
    /// planner should see them.
    pub fn planning_inventories(&self) -> BTreeMap<String, DomainInventory> {
        let mut invs = self.baseline.clone();
        for run in self.runs.values() {
            for p in &run.placements.entries {
                if let Some(h) = invs
                    .get_mut(&p.domain)
                    .and_then(|inv| inv.hosts.iter_mut().find(|h| h.host_id == p.host_id))
                {
                    h.allocated += 1;
                }
            }
        }
        invs
    }

    /// Plan a request without applying it.
    pub fn plan(&self, req: &SliceRequest) -> Result<(PlacementMap, TaskGraph), EngineError> {
        let report = self.validate(req);
        if !report.ok {
            return Err(EngineError::ValidationFailed(report));
        }
        let placements = place_slice(req, &self.planning_inventories())?;
        let graph = build_plan(req, &placements)?;
        graph.topological_order()?;
        Ok((placements, graph))
    }

    /// Plan and schedule a slice. Returns its id without waiting for it to deploy.
    pub fn apply(&mut self, req: SliceRequest) -> Result<String, EngineError> {
        let id = req.slice_id();
        if self.runs.contains_key(&id) || self.world.slices.get(&id).is_some_and(SliceState::is_live) {
            return Err(EngineError::AlreadyExists(id));
        }
        for w in self.catalog.warnings(&req) {
            log::warn!("{id}: {w}");
        }
        let (placements, graph) = self.plan(&req)?;
        let n = graph.len();
        let detail = format!("{} nodes, {} tasks", placements.entries.len(), n);
        self.emit(
            Subject::slice(&id),
            EventKind::SliceApplied {
                request: req.clone(),
                placements: placements.clone(),
                tasks: n,
            },
            detail,
        )?;
        let epoch = self.next_epoch;
        self.next_epoch += 1;
        self.runs.insert(
            id.clone(),
            SliceRun {
                epoch,
                request: req,
                placements,
                graph,
                state: vec![TaskRun::Pending; n],
                gen: vec![0; n],
                handles: BTreeMap::new(),
                allocations: Vec::new(),
                waiters: BTreeMap::new(),
            },
        );
        self.dispatch()?;
        Ok(id)
    }

    /// Cancel in-flight work and release the slice's resources in reverse
    /// allocation order.
    pub fn delete(&mut self, id: &str) -> Result<(), EngineError> {
        let Some(mut run) = self.runs.remove(id) else {
            return Err(EngineError::NotFound(id.to_string()));
        };
        self.emit(Subject::slice(id), EventKind::DeleteRequested, String::new())?;
        self.emit(
            Subject::slice(id),
            EventKind::SlicePhaseChanged {
                phase: SlicePhase::Deleting,
            },
            SlicePhase::Deleting.to_string(),
        )?;
        for t in 0..run.graph.len() {
            if matches!(run.state[t], TaskRun::Running | TaskRun::Waiting) {
                run.state[t] = TaskRun::Abandoned;
                run.gen[t] += 1;
                let task = run.graph.task(t).clone();
                self.emit(
                    task_subject(id, &run, &task),
                    EventKind::TaskCancelled {
                        task: t,
                        task_kind: task.kind,
                        label: task.label.clone(),
                    },
                    task.label,
                )?;
            }
        }
        for a in run.allocations.iter().rev() {
            if self.infra.is_live(&a.handle.handle_id) {
                self.infra.release(&a.handle.handle_id)?;
                self.emit(
                    Subject::node(id, &a.cluster, &a.node),
                    EventKind::HandleReleased {
                        handle: a.handle.clone(),
                    },
                    format!("{} on {}/{}", a.handle.handle_id, a.handle.domain, a.handle.host_id),
                )?;
            }
        }
        self.artifacts.drop_slice(id);
        self.emit(
            Subject::slice(id),
            EventKind::SlicePhaseChanged {
                phase: SlicePhase::Deleted,
            },
            SlicePhase::Deleted.to_string(),
        )
    }

    /// Process every event up to `to`, then move the clock there.
    pub fn advance_to(&mut self, to: VirtualTime) -> Result<(), EngineError> {
        while self.next_event_time().is_some_and(|t| t <= to) {
            self.step()?;
        }
        self.now = self.now.max(to);
        self.emit(Subject::engine(), EventKind::ClockAdvanced { to }, to.to_string())
    }

    pub fn advance(&mut self, by: u64) -> Result<(), EngineError> {
        self.advance_to(self.now + by)
    }

    pub fn status(&self, id: &str) -> Result<SliceStatus, EngineError> {
        slice_status(&self.world, id).ok_or_else(|| EngineError::NotFound(id.to_string()))
    }

    // ---- event loop ----

    fn schedule(&mut self, at: VirtualTime, action: Action) {
        self.queue_seq += 1;
        self.queue.insert((at, self.queue_seq), action);
    }

    fn is_current(&self, action: &Action) -> bool {
        self.runs
            .get(action.slice())
            .is_some_and(|run| run.is_current(action))
    }

    fn drop_stale(&mut self) {
        while let Some((key, action)) = self.queue.first_key_value() {
            if self.is_current(action) {
                break;
            }
            let key = *key;
            self.queue.remove(&key);
        }
    }

    /// Time of the next event that will do something, if any.
    pub fn next_event_time(&mut self) -> Option<VirtualTime> {
        self.drop_stale();
        self.queue.keys().next().map(|(t, _)| *t)
    }

    /// Process the next event. Returns its time, or `None` when idle.
    pub fn step(&mut self) -> Result<Option<VirtualTime>, EngineError> {
        self.drop_stale();
        let Some(((at, _), action)) = self.queue.pop_first() else {
            return Ok(None);
        };
        self.now = at;
        let slice = action.slice().to_string();
        match action {
            Action::Complete {
                task, outcome, ..
            } => self.complete(&slice, task, outcome)?,
            Action::Retry { node, .. } => {
                let cluster = self.runs[&slice]
                    .placements
                    .get(&node)
                    .map(|p| p.cluster.clone())
                    .unwrap_or_default();
                self.emit(
                    Subject::node(&slice, &cluster, &node),
                    EventKind::NodeTransition {
                        event: NodeEvent::RetryGranted,
                    },
                    "RetryGranted".into(),
                )?;
            }
            Action::ShareTimeout { task, .. } => {
                let run = self.runs.get_mut(&slice).expect("current action has a run");
                let sharefile = match run.graph.task(task).app.and_then(|i| {
                    run.request
                        .cluster(&run.graph.task(task).cluster)
                        .map(|c| c.applications[i].clone())
                }) {
                    Some(app) => app.sharefile.unwrap_or_default(),
                    None => String::new(),
                };
                if let Some(w) = run.waiters.get_mut(&sharefile) {
                    w.retain(|t| *t != task);
                }
                self.fail_app(&slice, task, format!("sharefile '{sharefile}' did not appear before {at}"))?;
            }
        }
        self.dispatch()?;
        self.update_phases()?;
        Ok(Some(at))
    }

    fn slice_is_busy(&self, id: &str) -> bool {
        self.queue
            .values()
            .any(|a| a.slice() == id && self.is_current(a))
    }

    /// A slice is settled once every cluster is Ready or Failed and none of
    /// its work is outstanding.
    pub fn is_settled(&self, id: &str) -> bool {
        let Some(s) = self.world.slices.get(id) else {
            return true;
        };
        if !self.runs.contains_key(id) {
            return true;
        }
        s.cluster_phases.values().all(|p| p.is_terminal()) && !self.slice_is_busy(id)
    }

    /// Run until every live slice settles, for at most `max_time` virtual units.
    pub fn run_until_settled(&mut self, max_time: u64) -> Result<(), EngineError> {
        let deadline = self.now + max_time;
        loop {
            let unsettled: Vec<String> = self
                .runs
                .keys()
                .filter(|id| !self.is_settled(id))
                .cloned()
                .collect();
            if unsettled.is_empty() {
                return Ok(());
            }
            match self.next_event_time() {
                None => {
                    return Err(EngineError::Deadlock {
                        at: self.now,
                        slices: unsettled,
                    })
                }
                Some(t) if t > deadline => {
                    return Err(EngineError::TimeExceeded {
                        at: self.now,
                        slices: unsettled,
                    })
                }
                Some(_) => {
                    self.step()?;
                }
            }
        }
    }

    // ---- task execution ----

    fn task_permitted(&self, id: &str, run: &SliceRun, task: &Task) -> bool {
        let Some(node) = &task.node else {
            return true;
        };
        let Some(twin) = self.world.slices.get(id).and_then(|s| s.twin(node)) else {
            return false;
        };
        let wanted = match task.kind {
            TaskKind::Allocate => NodeState::Requested,
            TaskKind::InstallOs => NodeState::Allocated,
            TaskKind::SetupMaster | TaskKind::JoinWorker => NodeState::ImageInstalled,
            TaskKind::InstallFabric => NodeState::KubernetesConfigured,
            TaskKind::DeployApp => return true,
        };
        twin.state == wanted && (task.kind != TaskKind::Allocate || !run.handles.contains_key(node))
    }

    fn runnable(&self) -> Vec<(String, TaskId)> {
        let mut out = Vec::new();
        for (id, run) in &self.runs {
            for task in run.graph.tasks() {
                let t = task.id;
                if run.state[t] == TaskRun::Pending
                    && run
                        .graph
                        .predecessors(t)
                        .iter()
                        .all(|p| run.state[*p] == TaskRun::Done)
                    && self.task_permitted(id, run, task)
                {
                    out.push((id.clone(), t));
                }
            }
        }
        out
    }

    /// Start every runnable task. All of them start at the current instant.
    fn dispatch(&mut self) -> Result<(), EngineError> {
        for (id, t) in self.runnable() {
            self.start(&id, t)?;
        }
        Ok(())
    }

    fn start(&mut self, id: &str, t: TaskId) -> Result<(), EngineError> {
        let now = self.now;
        let run = self.runs.get_mut(id).expect("runnable task has a run");
        run.gen[t] += 1;
        let gen = run.gen[t];
        let epoch = run.epoch;
        let task = run.graph.task(t).clone();
        let cluster = run.request.cluster(&task.cluster).cloned().expect("task cluster exists");
        let placement = task.node.as_ref().and_then(|n| run.placements.get(n)).cloned();
        let handle = task.node.as_ref().and_then(|n| run.handles.get(n)).map(|h| h.handle_id.clone());

        let step = |infra: &mut Infrastructure, name: String| -> (Outcome, u64) {
            match handle.as_deref().map(|h| infra.run_step(h, &StepDescriptor::new(name))) {
                Some(Ok(timed)) => (Outcome::Ok, timed.duration),
                Some(Err(e)) => (Outcome::Failed(e.to_string()), e.elapsed()),
                None => (Outcome::Failed("node has no handle".into()), 1),
            }
        };
        let mut waiting_for = None;
        let (outcome, duration) = match task.kind {
            TaskKind::Allocate => {
                let p = placement.as_ref().expect("node task has a placement");
                match self.infra.allocate(&p.domain, &p.nodetype, &p.host_id, now) {
                    Ok(timed) => {
                        let run = self.runs.get_mut(id).expect("run exists");
                        run.handles.insert(p.node_id.clone(), timed.value.clone());
                        run.allocations.push(AllocRecord {
                            cluster: p.cluster.clone(),
                            node: p.node_id.clone(),
                            handle: timed.value.clone(),
                        });
                        (Outcome::Allocated(timed.value), timed.duration)
                    }
                    Err(e) => (Outcome::Failed(e.to_string()), e.elapsed()),
                }
            }
            TaskKind::InstallOs => {
                let p = placement.as_ref().expect("node task has a placement");
                let result = handle
                    .as_deref()
                    .map(|h| self.infra.install_os(h, &p.osimage, p.osaccount.as_deref()));
                match result {
                    Some(Ok(timed)) => (Outcome::Ok, timed.duration),
                    Some(Err(e)) => (Outcome::Failed(e.to_string()), e.elapsed()),
                    None => (Outcome::Failed("node has no handle".into()), 1),
                }
            }
            TaskKind::SetupMaster => {
                let version = cluster.kubernetesversion.clone().unwrap_or_else(|| "latest".into());
                step(&mut self.infra, format!("setup-master {} {version}", cluster.kubernetestype))
            }
            TaskKind::JoinWorker => step(&mut self.infra, format!("join-worker {}", cluster.kubernetestype)),
            TaskKind::InstallFabric => step(&mut self.infra, format!("install-fabric {}", cluster.networkfabric)),
            TaskKind::DeployApp => {
                let app = &cluster.applications[task.app.expect("deploy task has an app")];
                let duration = match self.catalog.driver(&app.name) {
                    Ok(driver) => driver.sample_duration(&mut self.app_rng),
                    Err(_) => 1,
                };
                if let AppRole::Consumer { sharefile } = app.role() {
                    if self.artifacts.get(id, &sharefile).is_none() {
                        waiting_for = Some(sharefile);
                    }
                }
                (Outcome::Ok, duration)
            }
        };

        let run = self.runs.get_mut(id).expect("run exists");
        let subject = task_subject(id, run, &task);
        if let Some(sharefile) = &waiting_for {
            run.state[t] = TaskRun::Waiting;
            run.waiters.entry(sharefile.clone()).or_default().push(t);
        } else {
            run.state[t] = TaskRun::Running;
        }
        let detail = match &waiting_for {
            Some(f) => format!("{} waiting for {f}", task.label),
            None => format!("{} until {}", task.label, now + duration),
        };
        self.emit(
            subject.clone(),
            EventKind::TaskStarted {
                task: t,
                task_kind: task.kind,
                label: task.label.clone(),
            },
            detail,
        )?;
        if task.kind == TaskKind::DeployApp {
            let app = &cluster.applications[task.app.expect("deploy task has an app")];
            if matches!(app.role(), AppRole::Consumer { .. }) {
                self.emit(
                    subject,
                    EventKind::AppStatusChanged {
                        status: AppStatus::WaitingShare,
                    },
                    AppStatus::WaitingShare.to_string(),
                )?;
            }
        }
        match waiting_for {
            Some(_) => {
                let timeout = self.config.share_timeout;
                self.schedule(
                    now + timeout,
                    Action::ShareTimeout {
                        slice: id.to_string(),
                        epoch,
                        task: t,
                        gen,
                    },
                );
            }
            None => self.schedule(
                now + duration,
                Action::Complete {
                    slice: id.to_string(),
                    epoch,
                    task: t,
                    gen,
                    outcome,
                },
            ),
        }
        Ok(())
    }

    fn node_event(&mut self, id: &str, cluster: &str, node: &str, event: NodeEvent) -> Result<(), EngineError> {
        let detail = match &event {
            NodeEvent::AllocOk { handle } => {
                format!("AllocOk {} {} on {}/{}", handle.handle_id, handle.address, handle.domain, handle.host_id)
            }
            NodeEvent::AllocFail { reason } | NodeEvent::OsFail { reason } | NodeEvent::K8sFail { reason } => {
                format!("{}: {reason}", event.name())
            }
            other => other.name().to_string(),
        };
        self.emit(Subject::node(id, cluster, node), EventKind::NodeTransition { event }, detail)
    }

    fn complete(&mut self, id: &str, t: TaskId, outcome: Outcome) -> Result<(), EngineError> {
        let run = &self.runs[id];
        let task = run.graph.task(t).clone();
        let subject = task_subject(id, run, &task);
        if let Outcome::Failed(reason) = outcome {
            return match task.kind {
                TaskKind::DeployApp => self.fail_app(id, t, reason),
                _ => self.fail_node(id, t, reason),
            };
        }
        if task.kind == TaskKind::DeployApp {
            return self.finish_app(id, t);
        }

        self.runs.get_mut(id).expect("run exists").state[t] = TaskRun::Done;
        self.emit(
            subject,
            EventKind::TaskFinished {
                task: t,
                task_kind: task.kind,
                label: task.label.clone(),
            },
            task.label.clone(),
        )?;
        let node = task.node.clone().expect("infra task has a node");
        let event = match (task.kind, outcome) {
            (TaskKind::Allocate, Outcome::Allocated(handle)) => NodeEvent::AllocOk { handle },
            (TaskKind::InstallOs, _) => NodeEvent::OsOk,
            (TaskKind::SetupMaster | TaskKind::JoinWorker, _) => NodeEvent::K8sOk,
            (TaskKind::InstallFabric, _) => NodeEvent::Confirm,
            (kind, outcome) => unreachable!("{kind:?} finished with {outcome:?}"),
        };
        self.node_event(id, &task.cluster, &node, event)?;
        if matches!(task.kind, TaskKind::JoinWorker | TaskKind::InstallFabric) {
            self.confirm_workers(id, &task.cluster)?;
        }
        Ok(())
    }

    /// Workers become Ready once joined and once every master's fabric is up.
    fn confirm_workers(&mut self, id: &str, cluster: &str) -> Result<(), EngineError> {
        let run = &self.runs[id];
        let fabric_up = run
            .graph
            .tasks()
            .iter()
            .filter(|t| t.cluster == cluster && t.kind == TaskKind::InstallFabric)
            .all(|t| run.state[t.id] == TaskRun::Done);
        if !fabric_up {
            return Ok(());
        }
        let joined: Vec<String> = run
            .graph
            .tasks()
            .iter()
            .filter(|t| t.cluster == cluster && t.kind == TaskKind::JoinWorker && run.state[t.id] == TaskRun::Done)
            .filter_map(|t| t.node.clone())
            .collect();
        for node in joined {
            let configured = self.world.slices[id]
                .twin(&node)
                .is_some_and(|tw| tw.state == NodeState::KubernetesConfigured);
            if configured {
                self.node_event(id, cluster, &node, NodeEvent::Confirm)?;
            }
        }
        Ok(())
    }

    fn fail_node(&mut self, id: &str, t: TaskId, reason: String) -> Result<(), EngineError> {
        let run = self.runs.get_mut(id).expect("run exists");
        let task = run.graph.task(t).clone();
        let node = task.node.clone().expect("infra task has a node");
        let subject = task_subject(id, run, &task);
        // the node restarts from scratch on its next attempt
        let node_tasks: Vec<TaskId> = run.graph.node_tasks(&node).map(|nt| nt.id).collect();
        for nt in &node_tasks {
            run.state[*nt] = TaskRun::Pending;
        }
        let released = run.handles.remove(&node);
        self.emit(
            subject,
            EventKind::TaskFailed {
                task: t,
                task_kind: task.kind,
                label: task.label.clone(),
                reason: reason.clone(),
            },
            format!("{}: {reason}", task.label),
        )?;
        let event = match task.kind {
            TaskKind::Allocate => NodeEvent::AllocFail { reason },
            TaskKind::InstallOs => NodeEvent::OsFail { reason },
            _ => NodeEvent::K8sFail { reason },
        };
        self.node_event(id, &task.cluster, &node, event)?;
        if let Some(handle) = released {
            if self.infra.is_live(&handle.handle_id) {
                self.infra.release(&handle.handle_id)?;
            }
            let detail = format!("{} on {}/{}", handle.handle_id, handle.domain, handle.host_id);
            self.emit(
                Subject::node(id, &task.cluster, &node),
                EventKind::HandleReleased { handle },
                detail,
            )?;
        }
        let attempts = self.world.slices[id].twin(&node).map_or(0, |tw| tw.attempts);
        let policy = self.config.policy;
        if policy.can_retry(attempts) {
            let epoch = self.runs[id].epoch;
            self.schedule(
                self.now + policy.backoff(attempts),
                Action::Retry {
                    slice: id.to_string(),
                    epoch,
                    node,
                },
            );
            Ok(())
        } else {
            self.abandon(id, &node_tasks)
        }
    }

    /// Give up on `roots` and everything downstream of them.
    fn abandon(&mut self, id: &str, roots: &[TaskId]) -> Result<(), EngineError> {
        let run = self.runs.get_mut(id).expect("run exists");
        let mut doomed = BTreeSet::new();
        for &r in roots {
            doomed.insert(r);
            doomed.extend(run.graph.descendants(r));
        }
        let mut failed_apps = Vec::new();
        for t in doomed {
            if matches!(run.state[t], TaskRun::Pending | TaskRun::Waiting) {
                run.state[t] = TaskRun::Abandoned;
                run.gen[t] += 1;
                let task = run.graph.task(t);
                if task.kind == TaskKind::DeployApp {
                    failed_apps.push(task_subject(id, run, task));
                }
            }
        }
        for subject in failed_apps {
            self.emit(
                subject,
                EventKind::AppStatusChanged {
                    status: AppStatus::Failed,
                },
                "Failed: a prerequisite was abandoned".into(),
            )?;
        }
        Ok(())
    }

    fn fail_app(&mut self, id: &str, t: TaskId, reason: String) -> Result<(), EngineError> {
        let run = self.runs.get_mut(id).expect("run exists");
        run.state[t] = TaskRun::Failed;
        let task = run.graph.task(t).clone();
        let subject = task_subject(id, run, &task);
        let descendants: Vec<TaskId> = run.graph.descendants(t).into_iter().collect();
        self.emit(
            subject.clone(),
            EventKind::TaskFailed {
                task: t,
                task_kind: task.kind,
                label: task.label.clone(),
                reason: reason.clone(),
            },
            format!("{}: {reason}", task.label),
        )?;
        self.emit(
            subject,
            EventKind::AppStatusChanged {
                status: AppStatus::Failed,
            },
            format!("Failed: {reason}"),
        )?;
        self.abandon(id, &descendants)
    }

    fn finish_app(&mut self, id: &str, t: TaskId) -> Result<(), EngineError> {
        let run = &self.runs[id];
        let task = run.graph.task(t).clone();
        let subject = task_subject(id, run, &task);
        let app = run
            .request
            .cluster(&task.cluster)
            .map(|c| c.applications[task.app.expect("deploy task has an app")].clone())
            .expect("task cluster exists");
        let result = deploy_application(&self.catalog, &app, id, &task.cluster, &mut self.artifacts, self.now);
        let outcome = match result {
            Ok(outcome) => outcome,
            Err(e) => return self.fail_app(id, t, e.to_string()),
        };
        self.runs.get_mut(id).expect("run exists").state[t] = TaskRun::Done;
        self.emit(
            subject.clone(),
            EventKind::TaskFinished {
                task: t,
                task_kind: task.kind,
                label: task.label.clone(),
            },
            task.label.clone(),
        )?;
        for filename in &outcome.artifacts_written {
            let artifact = self.artifacts.get(id, filename).cloned().expect("artifact just written");
            self.emit(
                subject.clone(),
                EventKind::ArtifactWritten { artifact },
                filename.clone(),
            )?;
        }
        if let Some(edge) = outcome.peering {
            let detail = edge.to_string();
            self.emit(subject.clone(), EventKind::PeeringEstablished { edge }, detail)?;
        }
        self.emit(
            subject,
            EventKind::AppStatusChanged {
                status: AppStatus::Deployed,
            },
            AppStatus::Deployed.to_string(),
        )?;
        for filename in outcome.artifacts_written {
            self.wake_waiters(id, &filename);
        }
        Ok(())
    }

    fn wake_waiters(&mut self, id: &str, filename: &str) {
        let now = self.now;
        let run = self.runs.get_mut(id).expect("run exists");
        let Some(waiting) = run.waiters.remove(filename) else {
            return;
        };
        let mut wake = Vec::new();
        for t in waiting {
            if run.state[t] != TaskRun::Waiting {
                continue;
            }
            run.state[t] = TaskRun::Running;
            run.gen[t] += 1;
            wake.push((t, run.gen[t], run.epoch, run.graph.task(t).clone()));
        }
        for (t, gen, epoch, task) in wake {
            let app = self.runs[id]
                .request
                .cluster(&task.cluster)
                .map(|c| c.applications[task.app.expect("deploy task has an app")].name.clone())
                .unwrap_or_default();
            let duration = self
                .catalog
                .driver(&app)
                .map_or(1, |d| d.sample_duration(&mut self.app_rng));
            self.schedule(
                now + duration,
                Action::Complete {
                    slice: id.to_string(),
                    epoch,
                    task: t,
                    gen,
                    outcome: Outcome::Ok,
                },
            );
        }
    }

    /// Emit phase records for any cluster or slice whose derived phase changed.
    fn update_phases(&mut self) -> Result<(), EngineError> {
        let policy = self.config.policy;
        let ids: Vec<String> = self.runs.keys().cloned().collect();
        for id in ids {
            let s = &self.world.slices[&id];
            let mut changes = Vec::new();
            let mut phases = Vec::new();
            for c in &s.request.clusters {
                let derived = derive_cluster_phase(&s.cluster_twins(&c.name), &s.cluster_apps(&c.name), &policy);
                if s.cluster_phases.get(&c.name) != Some(&derived) {
                    changes.push((c.name.clone(), derived));
                }
                phases.push(derived);
            }
            let current = s.phase;
            for (cluster, phase) in changes {
                self.emit(
                    Subject::cluster(&id, &cluster),
                    EventKind::ClusterPhaseChanged { phase },
                    phase.to_string(),
                )?;
            }
            let derived = derive_slice_phase(&phases);
            if derived != current && !matches!(current, SlicePhase::Deleting | SlicePhase::Deleted) {
                self.emit(
                    Subject::slice(&id),
                    EventKind::SlicePhaseChanged { phase: derived },
                    derived.to_string(),
                )?;
            }
        }
        Ok(())
    }
}

fn task_subject(id: &str, run: &SliceRun, task: &Task) -> Subject {
    match (&task.node, task.app) {
        (Some(node), _) => Subject::node(id, &task.cluster, node),
        (None, Some(i)) => {
            let name = run
                .request
                .cluster(&task.cluster)
                .and_then(|c| c.applications.get(i))
                .map(|a| a.name.clone())
                .unwrap_or_default();
            Subject::app(id, &task.cluster, &name)
        }
        (None, None) => Subject::cluster(id, &task.cluster),
    }
}

/// Cloneable handle serializing access to one engine from several threads.
#[derive(Clone)]
pub struct SharedEngine(Arc<Mutex<Engine>>);

impl SharedEngine {
    pub fn new(engine: Engine) -> Self {
        SharedEngine(Arc::new(Mutex::new(engine)))
    }

    pub fn lock(&self) -> MutexGuard<'_, Engine> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn apply(&self, req: SliceRequest) -> Result<String, EngineError> {
        self.lock().apply(req)
    }

    pub fn status(&self, id: &str) -> Result<SliceStatus, EngineError> {
        self.lock().status(id)
    }

    pub fn delete(&self, id: &str) -> Result<(), EngineError> {
        self.lock().delete(id)
    }
}

/// Overlap check over a log: a pair of tasks from different clusters of
/// `slice` whose virtual-time intervals intersect.
pub fn overlapping_cluster_tasks(records: &[EventRecord], slice: &str) -> Option<(String, String)> {
    let spans = task_spans(records, slice);
    for (i, a) in spans.iter().enumerate() {
        for b in &spans[i + 1..] {
            if a.cluster != b.cluster && a.start < b.end && b.start < a.end {
                return Some((a.label.clone(), b.label.clone()));
            }
        }
    }
    None
}

/// A task's execution interval as recorded in the log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpan {
    pub cluster: String,
    pub label: String,
    pub start: VirtualTime,
    pub end: VirtualTime,
    pub finished: bool,
}

/// Reconstruct task intervals for one slice. Restarted tasks yield one span per attempt.
pub fn task_spans(records: &[EventRecord], slice: &str) -> Vec<TaskSpan> {
    let mut open: BTreeMap<TaskId, (String, String, VirtualTime)> = BTreeMap::new();
    let mut spans = Vec::new();
    for r in records.iter().filter(|r| r.subject.slice == slice) {
        match &r.kind {
            EventKind::SliceApplied { .. } => open.clear(),
            EventKind::TaskStarted { task, label, .. } => {
                let cluster = r.subject.cluster.clone().unwrap_or_default();
                open.insert(*task, (cluster, label.clone(), r.at));
            }
            EventKind::TaskFinished { task, .. }
            | EventKind::TaskFailed { task, .. }
            | EventKind::TaskCancelled { task, .. } => {
                if let Some((cluster, label, start)) = open.remove(task) {
                    spans.push(TaskSpan {
                        cluster,
                        label,
                        start,
                        end: r.at,
                        finished: matches!(r.kind, EventKind::TaskFinished { .. }),
                    });
                }
            }
            _ => {}
        }
    }
    spans
}
