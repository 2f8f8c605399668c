//! Read-only status views derived from a [`WorldState`].
//!
//! Deleted slices are kept in the world for history but are invisible here.

use serde::{Deserialize, Serialize};

use super::event::EventRecord;
use super::world::{SliceState, WorldState};
use crate::descriptor::{DeploymentStrategy, KubernetesType, NetworkFabric};
use crate::lifecycle::{AppStatus, ClusterPhase, NodeState, SlicePhase};
use crate::planner::NodeRole;
use crate::time::VirtualTime;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRow {
    pub name: String,
    pub slice: String,
    pub cluster: String,
    pub role: NodeRole,
    pub domain: String,
    pub host: String,
    pub state: NodeState,
    pub attempts: u32,
    /// Virtual time units since the slice was applied.
    pub age: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub slice: String,
    pub name: String,
    pub domain: String,
    pub kubernetes: KubernetesType,
    pub fabric: NetworkFabric,
    pub phase: ClusterPhase,
    pub nodes: usize,
    pub ready: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppRow {
    pub cluster: String,
    pub name: String,
    pub status: AppStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRow {
    pub filename: String,
    pub producer: String,
    pub created_at: VirtualTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSummary {
    pub id: String,
    pub namespace: String,
    pub name: String,
    pub phase: SlicePhase,
    pub clusters: usize,
    pub nodes: usize,
    pub ready_nodes: usize,
    pub age: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceStatus {
    pub id: String,
    pub phase: SlicePhase,
    pub clock: VirtualTime,
    pub strategy: DeploymentStrategy,
    pub nodes: Vec<NodeRow>,
    pub clusters: Vec<ClusterRow>,
    pub apps: Vec<AppRow>,
    pub peering: Vec<String>,
    pub artifacts: Vec<ArtifactRow>,
    pub recent: Vec<EventRecord>,
}

fn live_slices<'a>(
    world: &'a WorldState,
    namespace: Option<&'a str>,
) -> impl Iterator<Item = (&'a String, &'a SliceState)> {
    world
        .slices
        .iter()
        .filter(move |(_, s)| s.is_live() && namespace.is_none_or(|ns| s.request.namespace == ns))
}

fn node_rows(world: &WorldState, id: &str, s: &SliceState) -> Vec<NodeRow> {
    s.placements
        .entries
        .iter()
        .zip(&s.twins)
        .map(|(p, t)| NodeRow {
            name: t.node_id.clone(),
            slice: id.to_string(),
            cluster: t.cluster.clone(),
            role: t.role,
            domain: p.domain.clone(),
            host: p.host_id.clone(),
            state: t.state,
            attempts: t.attempts,
            age: world.clock.since(s.applied_at),
        })
        .collect()
}

fn cluster_rows(id: &str, s: &SliceState) -> Vec<ClusterRow> {
    s.request
        .clusters
        .iter()
        .map(|c| {
            let twins = s.twins.iter().filter(|t| t.cluster == c.name);
            ClusterRow {
                slice: id.to_string(),
                name: c.name.clone(),
                domain: c.deploymentdomain.clone(),
                kubernetes: c.kubernetestype,
                fabric: c.networkfabric,
                phase: s.cluster_phases.get(&c.name).copied().unwrap_or(ClusterPhase::Pending),
                nodes: twins.clone().count(),
                ready: twins.filter(|t| t.state == NodeState::Ready).count(),
            }
        })
        .collect()
}

pub fn slice_status(world: &WorldState, id: &str) -> Option<SliceStatus> {
    let s = world.slices.get(id).filter(|s| s.is_live())?;
    Some(SliceStatus {
        id: id.to_string(),
        phase: s.phase,
        clock: world.clock,
        strategy: s.request.deploymentstrategy,
        nodes: node_rows(world, id, s),
        clusters: cluster_rows(id, s),
        apps: s
            .apps
            .iter()
            .map(|a| AppRow {
                cluster: a.cluster.clone(),
                name: a.name.clone(),
                status: a.status,
            })
            .collect(),
        peering: s.peering.edges.iter().map(|e| e.to_string()).collect(),
        artifacts: s
            .artifacts
            .iter()
            .map(|a| ArtifactRow {
                filename: a.filename.clone(),
                producer: format!("{}/{}", a.producer.cluster, a.producer.app),
                created_at: a.created_at,
            })
            .collect(),
        recent: s.recent.iter().cloned().collect(),
    })
}

pub fn list_slices(world: &WorldState, namespace: Option<&str>) -> Vec<SliceSummary> {
    live_slices(world, namespace)
        .map(|(id, s)| SliceSummary {
            id: id.clone(),
            namespace: s.request.namespace.clone(),
            name: s.request.name.clone(),
            phase: s.phase,
            clusters: s.request.clusters.len(),
            nodes: s.twins.len(),
            ready_nodes: s.twins.iter().filter(|t| t.state == NodeState::Ready).count(),
            age: world.clock.since(s.applied_at),
        })
        .collect()
}

pub fn list_clusters(world: &WorldState, namespace: Option<&str>) -> Vec<ClusterRow> {
    live_slices(world, namespace)
        .flat_map(|(id, s)| cluster_rows(id, s))
        .collect()
}

pub fn list_resources(world: &WorldState, namespace: Option<&str>) -> Vec<NodeRow> {
    live_slices(world, namespace)
        .flat_map(|(id, s)| node_rows(world, id, s))
        .collect()
}
