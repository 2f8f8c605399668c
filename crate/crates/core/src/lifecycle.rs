//! Digital twins: a state machine per compute resource, and the phase
//! functions that roll node and application states up to clusters and slices.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infra::NodeHandle;
use crate::planner::NodeRole;
use crate::time::VirtualTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeState {
    Requested,
    Allocated,
    ImageInstalled,
    KubernetesConfigured,
    Ready,
    Failed,
}

impl NodeState {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeState::Requested => "Requested",
            NodeState::Allocated => "Allocated",
            NodeState::ImageInstalled => "ImageInstalled",
            NodeState::KubernetesConfigured => "KubernetesConfigured",
            NodeState::Ready => "Ready",
            NodeState::Failed => "Failed",
        }
    }

    fn holds_handle(self) -> bool {
        matches!(
            self,
            NodeState::Allocated
                | NodeState::ImageInstalled
                | NodeState::KubernetesConfigured
                | NodeState::Ready
        )
    }
}

impl fmt::Display for NodeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Inputs that drive a [`NodeTwin`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event")]
pub enum NodeEvent {
    AllocOk { handle: NodeHandle },
    AllocFail { reason: String },
    OsOk,
    OsFail { reason: String },
    /// Kubernetes step succeeded: setup/join first, then fabric or join confirmation.
    K8sOk,
    K8sFail { reason: String },
    /// The node is serving in its cluster (fabric up, membership confirmed).
    Confirm,
    RetryGranted,
}

impl NodeEvent {
    pub fn name(&self) -> &'static str {
        match self {
            NodeEvent::AllocOk { .. } => "AllocOk",
            NodeEvent::AllocFail { .. } => "AllocFail",
            NodeEvent::OsOk => "OsOk",
            NodeEvent::OsFail { .. } => "OsFail",
            NodeEvent::K8sOk => "K8sOk",
            NodeEvent::K8sFail { .. } => "K8sFail",
            NodeEvent::Confirm => "Confirm",
            NodeEvent::RetryGranted => "RetryGranted",
        }
    }
}

/// Per-node retry budget with doubling backoff in virtual time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_base: 1,
        }
    }
}

impl RetryPolicy {
    /// Delay before the retry that follows failure number `attempts` (1-based): 1, 2, 4, ...
    pub fn backoff(&self, attempts: u32) -> u64 {
        self.backoff_base << attempts.saturating_sub(1).min(32)
    }

    pub fn can_retry(&self, attempts: u32) -> bool {
        attempts < self.max_attempts
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTwin {
    pub node_id: String,
    pub cluster: String,
    pub role: NodeRole,
    pub state: NodeState,
    pub handle: Option<NodeHandle>,
    /// Failed attempts so far.
    pub attempts: u32,
    pub last_transition: VirtualTime,
    pub failure_reason: Option<String>,
}

impl NodeTwin {
    pub fn new(node_id: &str, cluster: &str, role: NodeRole, at: VirtualTime) -> Self {
        NodeTwin {
            node_id: node_id.to_string(),
            cluster: cluster.to_string(),
            role,
            state: NodeState::Requested,
            handle: None,
            attempts: 0,
            last_transition: at,
            failure_reason: None,
        }
    }

    pub fn is_exhausted(&self, policy: &RetryPolicy) -> bool {
        self.state == NodeState::Failed && !policy.can_retry(self.attempts)
    }

    /// Handle presence matches the state.
    pub fn is_consistent(&self) -> bool {
        self.state.holds_handle() == self.handle.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("illegal transition for node '{node}': {event} in state {state}")]
pub struct IllegalTransition {
    pub node: String,
    pub state: NodeState,
    pub event: &'static str,
}

/// Apply one event to a twin.
///
/// Failure events clear the handle (the caller releases it) and count an
/// attempt. `RetryGranted` is only legal while the policy allows another attempt.
pub fn transition(
    twin: &NodeTwin,
    event: NodeEvent,
    at: VirtualTime,
    policy: &RetryPolicy,
) -> Result<NodeTwin, IllegalTransition> {
    use NodeState::*;
    let illegal = || IllegalTransition {
        node: twin.node_id.clone(),
        state: twin.state,
        event: event.name(),
    };
    let mut next = twin.clone();
    next.last_transition = at;
    match (&event, twin.state) {
        (NodeEvent::AllocOk { handle }, Requested) => {
            next.state = Allocated;
            next.handle = Some(handle.clone());
            next.failure_reason = None;
        }
        (NodeEvent::OsOk, Allocated) => next.state = ImageInstalled,
        (NodeEvent::K8sOk, ImageInstalled) => next.state = KubernetesConfigured,
        (NodeEvent::Confirm, KubernetesConfigured) => next.state = Ready,
        (NodeEvent::AllocFail { reason }, Requested)
        | (NodeEvent::OsFail { reason }, Allocated)
        | (NodeEvent::K8sFail { reason }, ImageInstalled | KubernetesConfigured) => {
            next.state = Failed;
            next.handle = None;
            next.attempts += 1;
            next.failure_reason = Some(reason.clone());
        }
        (NodeEvent::RetryGranted, Failed) if policy.can_retry(twin.attempts) => {
            next.state = Requested;
            next.handle = None;
        }
        _ => return Err(illegal()),
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AppStatus {
    Pending,
    WaitingShare,
    Deployed,
    Failed,
}

impl AppStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            AppStatus::Pending => "Pending",
            AppStatus::WaitingShare => "WaitingShare",
            AppStatus::Deployed => "Deployed",
            AppStatus::Failed => "Failed",
        }
    }
}

impl fmt::Display for AppStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClusterPhase {
    Pending,
    Provisioning,
    InstallingKubernetes,
    ClusterReady,
    DeployingApps,
    Ready,
    Failed,
}

impl ClusterPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            ClusterPhase::Pending => "Pending",
            ClusterPhase::Provisioning => "Provisioning",
            ClusterPhase::InstallingKubernetes => "InstallingKubernetes",
            ClusterPhase::ClusterReady => "ClusterReady",
            ClusterPhase::DeployingApps => "DeployingApps",
            ClusterPhase::Ready => "Ready",
            ClusterPhase::Failed => "Failed",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, ClusterPhase::Ready | ClusterPhase::Failed)
    }
}

impl fmt::Display for ClusterPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Cluster phase as a function of its nodes and applications.
pub fn derive_cluster_phase(
    nodes: &[NodeTwin],
    apps: &BTreeMap<String, AppStatus>,
    policy: &RetryPolicy,
) -> ClusterPhase {
    use NodeState::*;
    if nodes.iter().any(|n| n.is_exhausted(policy)) || apps.values().any(|a| *a == AppStatus::Failed)
    {
        return ClusterPhase::Failed;
    }
    if nodes.iter().all(|n| n.state == Requested) {
        return ClusterPhase::Pending;
    }
    if nodes
        .iter()
        .any(|n| matches!(n.state, Requested | Allocated | Failed))
    {
        return ClusterPhase::Provisioning;
    }
    if nodes.iter().any(|n| n.state != Ready) {
        return ClusterPhase::InstallingKubernetes;
    }
    if apps.values().all(|a| *a == AppStatus::Deployed) {
        ClusterPhase::Ready
    } else if apps.values().all(|a| *a == AppStatus::Pending) {
        ClusterPhase::ClusterReady
    } else {
        ClusterPhase::DeployingApps
    }
}

/// A cluster's supervisor view: its derived phase and application statuses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterOperatorState {
    pub cluster: String,
    pub phase: ClusterPhase,
    pub app_statuses: BTreeMap<String, AppStatus>,
}

impl ClusterOperatorState {
    pub fn derive(
        cluster: &str,
        nodes: &[NodeTwin],
        app_statuses: BTreeMap<String, AppStatus>,
        policy: &RetryPolicy,
    ) -> Self {
        ClusterOperatorState {
            cluster: cluster.to_string(),
            phase: derive_cluster_phase(nodes, &app_statuses, policy),
            app_statuses,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SlicePhase {
    Pending,
    Deploying,
    Ready,
    Failed,
    Deleting,
    Deleted,
}

impl SlicePhase {
    pub fn as_str(self) -> &'static str {
        match self {
            SlicePhase::Pending => "Pending",
            SlicePhase::Deploying => "Deploying",
            SlicePhase::Ready => "Ready",
            SlicePhase::Failed => "Failed",
            SlicePhase::Deleting => "Deleting",
            SlicePhase::Deleted => "Deleted",
        }
    }
}

impl fmt::Display for SlicePhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Slice phase from its cluster phases. `Deleting`/`Deleted` are set by the
/// engine, never derived.
pub fn derive_slice_phase(clusters: &[ClusterPhase]) -> SlicePhase {
    if clusters.contains(&ClusterPhase::Failed) {
        SlicePhase::Failed
    } else if clusters.iter().all(|c| *c == ClusterPhase::Ready) && !clusters.is_empty() {
        SlicePhase::Ready
    } else if clusters.iter().all(|c| *c == ClusterPhase::Pending) {
        SlicePhase::Pending
    } else {
        SlicePhase::Deploying
    }
}
