use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::event::{EventKind, EventRecord};
use crate::appcatalog::{PeeringTopology, ShareArtifact, SHARE_TIMEOUT};
use crate::descriptor::SliceRequest;
use crate::infra::{DomainInventory, FaultSpec, NodeHandle};
use crate::lifecycle::{transition, AppStatus, ClusterPhase, NodeEvent, NodeTwin, RetryPolicy, SlicePhase};
use crate::planner::{PlacementMap, TaskId};
use crate::time::VirtualTime;

/// Number of recent records kept per slice for the describe view.
pub const RECENT_EVENTS: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("record {seq}: {message}")]
pub struct FoldError {
    pub seq: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppState {
    pub cluster: String,
    pub name: String,
    pub status: AppStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunningTask {
    pub label: String,
    pub started: VirtualTime,
}

/// Everything observable about one slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceState {
    pub request: SliceRequest,
    pub placements: PlacementMap,
    pub applied_at: VirtualTime,
    /// In placement order.
    pub twins: Vec<NodeTwin>,
    /// In declaration order.
    pub apps: Vec<AppState>,
    pub cluster_phases: BTreeMap<String, ClusterPhase>,
    pub phase: SlicePhase,
    pub artifacts: Vec<ShareArtifact>,
    pub peering: PeeringTopology,
    pub running: BTreeMap<TaskId, RunningTask>,
    pub tasks_total: usize,
    pub tasks_finished: usize,
    pub retries: u32,
    /// Virtual time at which the slice last became Ready or Failed.
    pub settled_at: Option<VirtualTime>,
    pub recent: VecDeque<EventRecord>,
}

impl SliceState {
    fn new(request: SliceRequest, placements: PlacementMap, tasks: usize, at: VirtualTime) -> Self {
        let twins = placements
            .entries
            .iter()
            .map(|p| NodeTwin::new(&p.node_id, &p.cluster, p.role, at))
            .collect();
        let apps = request
            .clusters
            .iter()
            .flat_map(|c| {
                c.applications.iter().map(|a| AppState {
                    cluster: c.name.clone(),
                    name: a.name.clone(),
                    status: AppStatus::Pending,
                })
            })
            .collect();
        let cluster_phases = request
            .clusters
            .iter()
            .map(|c| (c.name.clone(), ClusterPhase::Pending))
            .collect();
        SliceState {
            request,
            placements,
            applied_at: at,
            twins,
            apps,
            cluster_phases,
            phase: SlicePhase::Pending,
            artifacts: Vec::new(),
            peering: PeeringTopology::default(),
            running: BTreeMap::new(),
            tasks_total: tasks,
            tasks_finished: 0,
            retries: 0,
            settled_at: None,
            recent: VecDeque::new(),
        }
    }

    pub fn twin(&self, node: &str) -> Option<&NodeTwin> {
        self.twins.iter().find(|t| t.node_id == node)
    }

    pub fn cluster_twins(&self, cluster: &str) -> Vec<NodeTwin> {
        self.twins.iter().filter(|t| t.cluster == cluster).cloned().collect()
    }

    pub fn cluster_apps(&self, cluster: &str) -> BTreeMap<String, AppStatus> {
        self.apps
            .iter()
            .filter(|a| a.cluster == cluster)
            .map(|a| (a.name.clone(), a.status))
            .collect()
    }

    pub fn is_live(&self) -> bool {
        self.phase != SlicePhase::Deleted
    }
}

/// The observable world: a pure fold over the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub seed: u64,
    pub policy: RetryPolicy,
    pub share_timeout: u64,
    pub clock: VirtualTime,
    pub last_seq: u64,
    pub domains: BTreeMap<String, DomainInventory>,
    pub faults: Vec<FaultSpec>,
    pub slices: BTreeMap<String, SliceState>,
    /// Handles that a twin has received and that count against host capacity.
    pub charged: BTreeSet<String>,
}

impl Default for WorldState {
    fn default() -> Self {
        WorldState {
            seed: 0,
            policy: RetryPolicy::default(),
            share_timeout: SHARE_TIMEOUT,
            clock: VirtualTime::ZERO,
            last_seq: 0,
            domains: BTreeMap::new(),
            faults: Vec::new(),
            slices: BTreeMap::new(),
            charged: BTreeSet::new(),
        }
    }
}

impl WorldState {
    pub fn replay<'a>(records: impl IntoIterator<Item = &'a EventRecord>) -> Result<Self, FoldError> {
        let mut world = WorldState::default();
        for r in records {
            world.apply(r)?;
        }
        Ok(world)
    }

    pub fn slice(&self, id: &str) -> Option<&SliceState> {
        self.slices.get(id)
    }

    /// Fold one record in. Rejects sequence gaps, time going backwards,
    /// illegal twin transitions and capacity overruns.
    pub fn apply(&mut self, r: &EventRecord) -> Result<(), FoldError> {
        let fail = |message: String| FoldError { seq: r.seq, message };
        if r.seq != self.last_seq + 1 {
            return Err(fail(format!("expected seq {}", self.last_seq + 1)));
        }
        if r.at < self.clock {
            return Err(fail(format!("time went backwards from {}", self.clock)));
        }
        self.last_seq = r.seq;
        self.clock = r.at;

        match &r.kind {
            EventKind::EngineStarted {
                seed,
                policy,
                share_timeout,
            } => {
                self.seed = *seed;
                self.policy = *policy;
                self.share_timeout = *share_timeout;
            }
            EventKind::DomainRegistered { inventory } => {
                self.domains.insert(inventory.domain.clone(), inventory.clone());
            }
            EventKind::HostAdded { domain, host } => {
                self.domains
                    .get_mut(domain)
                    .ok_or_else(|| fail(format!("unknown domain '{domain}'")))?
                    .hosts
                    .push(host.clone());
            }
            EventKind::FaultArmed { spec } => self.faults.push(spec.clone()),
            EventKind::SliceApplied {
                request,
                placements,
                tasks,
            } => {
                if self.slices.get(&r.subject.slice).is_some_and(SliceState::is_live) {
                    return Err(fail(format!("slice '{}' applied twice", r.subject.slice)));
                }
                let state = SliceState::new(request.clone(), placements.clone(), *tasks, r.at);
                self.slices.insert(r.subject.slice.clone(), state);
            }
            EventKind::ClockAdvanced { .. } => {}
            EventKind::HandleReleased { handle } => {
                // an allocation cancelled before it completed was never charged
                if self.charged.remove(&handle.handle_id) {
                    self.charge(handle, -1).map_err(fail)?;
                }
            }
            _ => self.apply_slice_effect(r)?,
        }

        if let Some(slice) = self.slices.get_mut(&r.subject.slice) {
            slice.recent.push_back(r.clone());
            if slice.recent.len() > RECENT_EVENTS {
                slice.recent.pop_front();
            }
        }
        Ok(())
    }

    fn charge(&mut self, handle: &NodeHandle, delta: i64) -> Result<(), String> {
        let host = self
            .domains
            .get_mut(&handle.domain)
            .and_then(|d| d.hosts.iter_mut().find(|h| h.host_id == handle.host_id))
            .ok_or_else(|| format!("unknown host {}/{}", handle.domain, handle.host_id))?;
        let next = host.allocated as i64 + delta;
        if next < 0 || next > host.capacity_slots as i64 {
            return Err(format!(
                "host {}/{} allocation {} outside 0..={}",
                handle.domain, handle.host_id, next, host.capacity_slots
            ));
        }
        host.allocated = next as u32;
        Ok(())
    }

    fn apply_slice_effect(&mut self, r: &EventRecord) -> Result<(), FoldError> {
        let fail = |message: String| FoldError { seq: r.seq, message };
        let policy = self.policy;
        let mut charge = None;
        let slice = self
            .slices
            .get_mut(&r.subject.slice)
            .ok_or_else(|| fail(format!("unknown slice '{}'", r.subject.slice)))?;
        match &r.kind {
            EventKind::DeleteRequested => {}
            EventKind::TaskStarted { task, label, .. } => {
                slice.running.insert(
                    *task,
                    RunningTask {
                        label: label.clone(),
                        started: r.at,
                    },
                );
            }
            EventKind::TaskFinished { task, .. } => {
                slice.running.remove(task);
                slice.tasks_finished += 1;
            }
            EventKind::TaskFailed { task, .. } | EventKind::TaskCancelled { task, .. } => {
                slice.running.remove(task);
            }
            EventKind::NodeTransition { event } => {
                let node = r.subject.node.as_deref().unwrap_or_default();
                let twin = slice
                    .twins
                    .iter_mut()
                    .find(|t| t.node_id == node)
                    .ok_or_else(|| fail(format!("unknown node '{node}'")))?;
                *twin = transition(twin, event.clone(), r.at, &policy).map_err(|e| fail(e.to_string()))?;
                match event {
                    NodeEvent::AllocOk { handle } => charge = Some(handle.clone()),
                    NodeEvent::RetryGranted => slice.retries += 1,
                    _ => {}
                }
            }
            EventKind::AppStatusChanged { status } => {
                let cluster = r.subject.cluster.as_deref().unwrap_or_default();
                let name = r.subject.app.as_deref().unwrap_or_default();
                let app = slice
                    .apps
                    .iter_mut()
                    .find(|a| a.cluster == cluster && a.name == name)
                    .ok_or_else(|| fail(format!("unknown application '{cluster}/{name}'")))?;
                app.status = *status;
            }
            EventKind::ArtifactWritten { artifact } => slice.artifacts.push(artifact.clone()),
            EventKind::PeeringEstablished { edge } => {
                slice.peering.edges.insert(edge.clone());
            }
            EventKind::ClusterPhaseChanged { phase } => {
                let cluster = r.subject.cluster.clone().unwrap_or_default();
                slice.cluster_phases.insert(cluster, *phase);
            }
            EventKind::SlicePhaseChanged { phase } => {
                slice.phase = *phase;
                match phase {
                    SlicePhase::Ready | SlicePhase::Failed => slice.settled_at = Some(r.at),
                    SlicePhase::Deleted => slice.artifacts.clear(),
                    _ => {}
                }
            }
            other => return Err(fail(format!("unexpected {} record", other.name()))),
        }
        if let Some(handle) = charge {
            self.charge(&handle, 1).map_err(fail)?;
            self.charged.insert(handle.handle_id);
        }
        Ok(())
    }
}
