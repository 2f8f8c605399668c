use std::fmt;

use serde::{Deserialize, Serialize};

use crate::appcatalog::{PeeringEdge, ShareArtifact};
use crate::descriptor::SliceRequest;
use crate::infra::{DomainInventory, FaultSpec, HostRecord, NodeHandle};
use crate::lifecycle::{AppStatus, ClusterPhase, NodeEvent, RetryPolicy, SlicePhase};
use crate::planner::{PlacementMap, TaskId, TaskKind};
use crate::time::VirtualTime;

/// What a record is about. Engine-wide records have an empty slice.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subject {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub slice: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app: Option<String>,
}

impl Subject {
    pub fn engine() -> Self {
        Subject::default()
    }

    pub fn slice(slice: &str) -> Self {
        Subject {
            slice: slice.to_string(),
            ..Subject::default()
        }
    }

    pub fn cluster(slice: &str, cluster: &str) -> Self {
        Subject {
            cluster: Some(cluster.to_string()),
            ..Subject::slice(slice)
        }
    }

    pub fn node(slice: &str, cluster: &str, node: &str) -> Self {
        Subject {
            node: Some(node.to_string()),
            ..Subject::cluster(slice, cluster)
        }
    }

    pub fn app(slice: &str, cluster: &str, app: &str) -> Self {
        Subject {
            app: Some(app.to_string()),
            ..Subject::cluster(slice, cluster)
        }
    }
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.slice.is_empty() {
            return f.write_str("-");
        }
        f.write_str(&self.slice)?;
        if let Some(c) = &self.cluster {
            write!(f, "/{c}")?;
        }
        if let Some(n) = &self.node {
            write!(f, "/{n}")?;
        }
        if let Some(a) = &self.app {
            write!(f, "/{a}")?;
        }
        Ok(())
    }
}

/// Record payloads. Commands are inputs to the engine; everything else is an
/// effect the engine derives from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum EventKind {
    EngineStarted {
        seed: u64,
        policy: RetryPolicy,
        share_timeout: u64,
    },
    DomainRegistered {
        inventory: DomainInventory,
    },
    HostAdded {
        domain: String,
        host: HostRecord,
    },
    FaultArmed {
        spec: FaultSpec,
    },
    SliceApplied {
        request: SliceRequest,
        placements: PlacementMap,
        tasks: usize,
    },
    ClockAdvanced {
        to: VirtualTime,
    },
    DeleteRequested,

    TaskStarted {
        task: TaskId,
        task_kind: TaskKind,
        label: String,
    },
    TaskFinished {
        task: TaskId,
        task_kind: TaskKind,
        label: String,
    },
    TaskFailed {
        task: TaskId,
        task_kind: TaskKind,
        label: String,
        reason: String,
    },
    TaskCancelled {
        task: TaskId,
        task_kind: TaskKind,
        label: String,
    },
    NodeTransition {
        event: NodeEvent,
    },
    AppStatusChanged {
        status: AppStatus,
    },
    ArtifactWritten {
        artifact: ShareArtifact,
    },
    PeeringEstablished {
        edge: PeeringEdge,
    },
    HandleReleased {
        handle: NodeHandle,
    },
    ClusterPhaseChanged {
        phase: ClusterPhase,
    },
    SlicePhaseChanged {
        phase: SlicePhase,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::EngineStarted { .. } => "EngineStarted",
            EventKind::DomainRegistered { .. } => "DomainRegistered",
            EventKind::HostAdded { .. } => "HostAdded",
            EventKind::FaultArmed { .. } => "FaultArmed",
            EventKind::SliceApplied { .. } => "SliceApplied",
            EventKind::ClockAdvanced { .. } => "ClockAdvanced",
            EventKind::DeleteRequested => "DeleteRequested",
            EventKind::TaskStarted { .. } => "TaskStarted",
            EventKind::TaskFinished { .. } => "TaskFinished",
            EventKind::TaskFailed { .. } => "TaskFailed",
            EventKind::TaskCancelled { .. } => "TaskCancelled",
            EventKind::NodeTransition { .. } => "NodeTransition",
            EventKind::AppStatusChanged { .. } => "AppStatusChanged",
            EventKind::ArtifactWritten { .. } => "ArtifactWritten",
            EventKind::PeeringEstablished { .. } => "PeeringEstablished",
            EventKind::HandleReleased { .. } => "HandleReleased",
            EventKind::ClusterPhaseChanged { .. } => "ClusterPhaseChanged",
            EventKind::SlicePhaseChanged { .. } => "SlicePhaseChanged",
        }
    }

    /// Commands are re-issued on resume; effects are regenerated and compared.
    pub fn is_command(&self) -> bool {
        matches!(
            self,
            EventKind::EngineStarted { .. }
                | EventKind::DomainRegistered { .. }
                | EventKind::HostAdded { .. }
                | EventKind::FaultArmed { .. }
                | EventKind::SliceApplied { .. }
                | EventKind::ClockAdvanced { .. }
                | EventKind::DeleteRequested
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub at: VirtualTime,
    pub subject: Subject,
    pub kind: EventKind,
    pub detail: String,
}

impl EventRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

impl fmt::Display for EventRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "#{:<5} {:<6} {:<20} {:<40} {}",
            self.seq,
            self.at.to_string(),
            self.kind.name(),
            self.subject.to_string(),
            self.detail
        )
    }
}

/// Render records as JSON lines, the export format.
pub fn export_jsonl<'a>(records: impl IntoIterator<Item = &'a EventRecord>) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json());
        out.push('\n');
    }
    out
}
