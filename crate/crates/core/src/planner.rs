//! Placement of requested nodes onto hosts, and compilation of a slice into a
//! dependency-ordered task graph.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{
    join_artifact_name, AppRole, ClusterSpec, DeploymentStrategy, NodeGroupSpec, SliceRequest,
};
use crate::infra::{DomainInventory, DomainKind, FaultTarget};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Master,
    Worker,
}

impl NodeRole {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeRole::Master => "master",
            NodeRole::Worker => "worker",
        }
    }
}

impl fmt::Display for NodeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Node id for the `index`-th (1-based) node of a role in a cluster.
pub fn node_id(cluster: &str, role: NodeRole, index: u32) -> String {
    format!("{cluster}-{role}-{index}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub node_id: String,
    pub cluster: String,
    pub role: NodeRole,
    pub domain: String,
    pub host_id: String,
    pub nodetype: String,
    pub osimage: String,
    pub osaccount: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementMap {
    pub entries: Vec<Placement>,
}

impl PlacementMap {
    pub fn get(&self, node_id: &str) -> Option<&Placement> {
        self.entries.iter().find(|p| p.node_id == node_id)
    }

    pub fn for_cluster<'a>(&'a self, cluster: &'a str) -> impl Iterator<Item = &'a Placement> {
        self.entries.iter().filter(move |p| p.cluster == cluster)
    }

    /// Entries per (domain, host).
    pub fn host_loads(&self) -> BTreeMap<(String, String), u32> {
        let mut loads = BTreeMap::new();
        for p in &self.entries {
            *loads
                .entry((p.domain.clone(), p.host_id.clone()))
                .or_default() += 1;
        }
        loads
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("domain '{domain}' lacks capacity for cluster '{cluster}': {requested} nodes requested, {available} slots free (short by {shortfall})")]
    InsufficientCapacity {
        cluster: String,
        domain: String,
        requested: u32,
        available: u32,
        shortfall: u32,
    },
    #[error("no host in domain '{domain}' supports node type '{nodetype}'")]
    UnsupportedNodeType { domain: String, nodetype: String },
    #[error("cluster '{cluster}' targets domain '{domain}', which is not registered")]
    UnknownDomain { cluster: String, domain: String },
    #[error("placement for cluster '{cluster}' covers {found} of {expected} {role} nodes")]
    IncompletePlacement {
        cluster: String,
        role: NodeRole,
        expected: u32,
        found: u32,
    },
    #[error("task graph contains a cycle")]
    CycleDetected,
}

/// Place one cluster's nodes onto the hosts of its domain.
///
/// Masters are placed before workers. `balanced` puts each node on the host
/// with the fewest allocated slots (ties to the lexicographically smallest
/// host id); `packed` fills hosts in host-id order.
pub fn embed(
    cluster: &ClusterSpec,
    inv: &DomainInventory,
    strategy: DeploymentStrategy,
) -> Result<Vec<Placement>, PlanError> {
    let groups = [
        (NodeRole::Master, &cluster.masters),
        (NodeRole::Worker, &cluster.workers),
    ];
    let requested: u32 = groups.iter().map(|(_, g)| g.count).sum();
    let mut types = BTreeSet::new();
    for (_, g) in &groups {
        if g.count == 0 {
            continue;
        }
        if !inv
            .hosts
            .iter()
            .any(|h| h.supported_nodetypes.contains(&g.nodetype))
        {
            return Err(PlanError::UnsupportedNodeType {
                domain: inv.domain.clone(),
                nodetype: g.nodetype.clone(),
            });
        }
        types.insert(g.nodetype.as_str());
    }
    let available: u32 = inv
        .hosts
        .iter()
        .filter(|h| types.iter().any(|t| h.supported_nodetypes.contains(*t)))
        .map(|h| h.free_slots())
        .sum();
    let shortfall = |placed_ok: u32, free: u32| PlanError::InsufficientCapacity {
        cluster: cluster.name.clone(),
        domain: inv.domain.clone(),
        requested,
        available: free,
        shortfall: requested - placed_ok,
    };
    if requested > available {
        return Err(shortfall(available, available));
    }

    let mut hosts: Vec<_> = inv.hosts.iter().collect();
    hosts.sort_by(|a, b| a.host_id.cmp(&b.host_id));
    let mut load: Vec<u32> = hosts.iter().map(|h| h.allocated).collect();
    let mut out = Vec::with_capacity(requested as usize);
    for (role, group) in groups {
        for index in 1..=group.count {
            let fits = |i: &usize| {
                load[*i] < hosts[*i].capacity_slots
                    && hosts[*i].supported_nodetypes.contains(&group.nodetype)
            };
            let candidates = (0..hosts.len()).filter(fits);
            let chosen = match strategy {
                // hosts are sorted, so min_by_key keeps the first on ties
                DeploymentStrategy::Balanced => candidates.min_by_key(|i| load[*i]),
                DeploymentStrategy::Packed => candidates.into_iter().next(),
            };
            let Some(i) = chosen else {
                return Err(shortfall(out.len() as u32, available));
            };
            load[i] += 1;
            out.push(placement(cluster, role, index, group, &inv.domain, &hosts[i].host_id));
        }
    }
    Ok(out)
}

fn placement(
    cluster: &ClusterSpec,
    role: NodeRole,
    index: u32,
    group: &NodeGroupSpec,
    domain: &str,
    host: &str,
) -> Placement {
    Placement {
        node_id: node_id(&cluster.name, role, index),
        cluster: cluster.name.clone(),
        role,
        domain: domain.to_string(),
        host_id: host.to_string(),
        nodetype: group.nodetype.clone(),
        osimage: group.osimage.clone(),
        osaccount: group.osaccount.clone(),
    }
}

/// Embed every cluster of a request, charging earlier clusters' placements
/// against later ones that share a domain.
pub fn place_slice(
    req: &SliceRequest,
    inventories: &BTreeMap<String, DomainInventory>,
) -> Result<PlacementMap, PlanError> {
    let mut working = inventories.clone();
    let mut entries = Vec::new();
    for cluster in &req.clusters {
        let inv = working
            .get_mut(&cluster.deploymentdomain)
            .ok_or_else(|| PlanError::UnknownDomain {
                cluster: cluster.name.clone(),
                domain: cluster.deploymentdomain.clone(),
            })?;
        let placed = embed(cluster, inv, req.deploymentstrategy)?;
        for p in &placed {
            if let Some(h) = inv.hosts.iter_mut().find(|h| h.host_id == p.host_id) {
                h.allocated += 1;
            }
        }
        entries.extend(placed);
    }
    Ok(PlacementMap { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    Allocate,
    #[serde(rename = "InstallOS")]
    InstallOs,
    SetupMaster,
    JoinWorker,
    InstallFabric,
    DeployApp,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Allocate => "Allocate",
            TaskKind::InstallOs => "InstallOS",
            TaskKind::SetupMaster => "SetupMaster",
            TaskKind::JoinWorker => "JoinWorker",
            TaskKind::InstallFabric => "InstallFabric",
            TaskKind::DeployApp => "DeployApp",
        }
    }

    /// Infrastructure operation the task runs through, if any.
    pub fn infra_op(self) -> Option<FaultTarget> {
        match self {
            TaskKind::Allocate => Some(FaultTarget::Allocate),
            TaskKind::InstallOs => Some(FaultTarget::InstallOs),
            TaskKind::SetupMaster | TaskKind::JoinWorker | TaskKind::InstallFabric => {
                Some(FaultTarget::RunStep)
            }
            TaskKind::DeployApp => None,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub type TaskId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub kind: TaskKind,
    pub cluster: String,
    /// Subject node for node-scoped tasks.
    pub node: Option<String>,
    /// Index into the cluster's application list for `DeployApp`.
    pub app: Option<usize>,
    pub label: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaskGraph {
    tasks: Vec<Task>,
    edges: Vec<(TaskId, TaskId)>,
    preds: Vec<Vec<TaskId>>,
    succs: Vec<Vec<TaskId>>,
}

impl TaskGraph {
    /// Build a graph from tasks (ids must equal positions) and `(before, after)` edges.
    pub fn new(tasks: Vec<Task>, edges: Vec<(TaskId, TaskId)>) -> Self {
        let mut preds = vec![Vec::new(); tasks.len()];
        let mut succs = vec![Vec::new(); tasks.len()];
        for &(a, b) in &edges {
            preds[b].push(a);
            succs[a].push(b);
        }
        for v in preds.iter_mut().chain(succs.iter_mut()) {
            v.sort_unstable();
            v.dedup();
        }
        TaskGraph {
            tasks,
            edges,
            preds,
            succs,
        }
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, id: TaskId) -> &Task {
        &self.tasks[id]
    }

    pub fn edges(&self) -> &[(TaskId, TaskId)] {
        &self.edges
    }

    pub fn predecessors(&self, id: TaskId) -> &[TaskId] {
        &self.preds[id]
    }

    pub fn successors(&self, id: TaskId) -> &[TaskId] {
        &self.succs[id]
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn count(&self, kind: TaskKind) -> usize {
        self.tasks.iter().filter(|t| t.kind == kind).count()
    }

    pub fn node_tasks<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a Task> {
        self.tasks
            .iter()
            .filter(move |t| t.node.as_deref() == Some(node))
    }

    /// Kahn's algorithm, always taking the smallest ready id.
    pub fn topological_order(&self) -> Result<Vec<TaskId>, PlanError> {
        let mut indegree: Vec<usize> = self.preds.iter().map(Vec::len).collect();
        let mut ready: BinaryHeap<Reverse<TaskId>> = indegree
            .iter()
            .enumerate()
            .filter(|(_, d)| **d == 0)
            .map(|(i, _)| Reverse(i))
            .collect();
        let mut order = Vec::with_capacity(self.tasks.len());
        while let Some(Reverse(id)) = ready.pop() {
            order.push(id);
            for &next in &self.succs[id] {
                indegree[next] -= 1;
                if indegree[next] == 0 {
                    ready.push(Reverse(next));
                }
            }
        }
        if order.len() != self.tasks.len() {
            return Err(PlanError::CycleDetected);
        }
        Ok(order)
    }

    /// Transitive successors of `id`.
    pub fn descendants(&self, id: TaskId) -> BTreeSet<TaskId> {
        let mut seen = BTreeSet::new();
        let mut stack = self.succs[id].clone();
        while let Some(t) = stack.pop() {
            if seen.insert(t) {
                stack.extend(self.succs[t].iter().copied());
            }
        }
        seen
    }
}

/// Compile a request and its placements into the deployment task graph.
pub fn build_plan(req: &SliceRequest, placements: &PlacementMap) -> Result<TaskGraph, PlanError> {
    for c in &req.clusters {
        for (role, expected) in [
            (NodeRole::Master, c.masters.count),
            (NodeRole::Worker, c.workers.count),
        ] {
            let found = placements
                .for_cluster(&c.name)
                .filter(|p| p.role == role)
                .count() as u32;
            if found != expected {
                return Err(PlanError::IncompletePlacement {
                    cluster: c.name.clone(),
                    role,
                    expected,
                    found,
                });
            }
        }
    }

    let mut tasks: Vec<Task> = Vec::new();
    let mut edges = Vec::new();
    let push = |tasks: &mut Vec<Task>, kind, cluster: &str, node: Option<&str>, app: Option<(usize, &str)>| {
        let id = tasks.len();
        let label = match (node, app) {
            (Some(n), _) => format!("{kind} {n}"),
            (None, Some((_, name))) => format!("{kind} {cluster}/{name}"),
            (None, None) => format!("{kind} {cluster}"),
        };
        tasks.push(Task {
            id,
            kind,
            cluster: cluster.to_string(),
            node: node.map(str::to_string),
            app: app.map(|(i, _)| i),
            label,
        });
        id
    };

    // (cluster, app index) -> DeployApp task, and artifact name -> producer tasks
    let mut deploy_tasks: BTreeMap<(String, usize), TaskId> = BTreeMap::new();
    let mut producers: BTreeMap<String, Vec<TaskId>> = BTreeMap::new();

    for c in &req.clusters {
        let nodes: Vec<&Placement> = placements.for_cluster(&c.name).collect();
        let mut setup = Vec::new();
        let mut fabric = Vec::new();
        let mut joins = Vec::new();
        let mut os_done = BTreeMap::new();
        for p in &nodes {
            let alloc = push(&mut tasks, TaskKind::Allocate, &c.name, Some(&p.node_id), None);
            let os = push(&mut tasks, TaskKind::InstallOs, &c.name, Some(&p.node_id), None);
            edges.push((alloc, os));
            os_done.insert(p.node_id.as_str(), os);
        }
        for p in nodes.iter().filter(|p| p.role == NodeRole::Master) {
            let s = push(&mut tasks, TaskKind::SetupMaster, &c.name, Some(&p.node_id), None);
            let f = push(&mut tasks, TaskKind::InstallFabric, &c.name, Some(&p.node_id), None);
            edges.push((os_done[p.node_id.as_str()], s));
            edges.push((s, f));
            setup.push(s);
            fabric.push(f);
        }
        for p in nodes.iter().filter(|p| p.role == NodeRole::Worker) {
            let j = push(&mut tasks, TaskKind::JoinWorker, &c.name, Some(&p.node_id), None);
            edges.push((os_done[p.node_id.as_str()], j));
            edges.extend(setup.iter().map(|&s| (s, j)));
            joins.push(j);
        }
        for (i, app) in c.applications.iter().enumerate() {
            let d = push(&mut tasks, TaskKind::DeployApp, &c.name, None, Some((i, &app.name)));
            edges.extend(fabric.iter().chain(&joins).map(|&t| (t, d)));
            deploy_tasks.insert((c.name.clone(), i), d);
            if let AppRole::Producer { peers } = app.role() {
                for peer in peers {
                    producers.entry(join_artifact_name(&peer)).or_default().push(d);
                }
            }
        }
    }
    for c in &req.clusters {
        for (i, app) in c.applications.iter().enumerate() {
            if let AppRole::Consumer { sharefile } = app.role() {
                let consumer = deploy_tasks[&(c.name.clone(), i)];
                for &p in producers.get(&sharefile).into_iter().flatten() {
                    edges.push((p, consumer));
                }
            }
        }
    }
    Ok(TaskGraph::new(tasks, edges))
}

/// A longest path through the graph, weighting each task by `duration`.
///
/// Ties resolve to the smallest task id at both the path end and each
/// predecessor choice.
pub fn critical_path(
    graph: &TaskGraph,
    duration: impl Fn(&Task) -> u64,
) -> Result<Vec<TaskId>, PlanError> {
    let order = graph.topological_order()?;
    let n = graph.len();
    let mut finish = vec![0u64; n];
    let mut via: Vec<Option<TaskId>> = vec![None; n];
    for &id in &order {
        let mut best: Option<(u64, TaskId)> = None;
        for &p in graph.predecessors(id) {
            if best.is_none_or(|(f, _)| finish[p] > f) {
                best = Some((finish[p], p));
            }
        }
        finish[id] = best.map_or(0, |(f, _)| f) + duration(graph.task(id));
        via[id] = best.map(|(_, p)| p);
    }
    let Some(mut end) = (0..n).max_by_key(|&i| (finish[i], Reverse(i))) else {
        return Ok(Vec::new());
    };
    let mut path = vec![end];
    while let Some(p) = via[end] {
        path.push(p);
        end = p;
    }
    path.reverse();
    Ok(path)
}

/// Expected duration of each task: the midpoint of its domain's latency range,
/// or `app_estimate` for application deployments.
pub fn estimate_durations(
    graph: &TaskGraph,
    req: &SliceRequest,
    kinds: &BTreeMap<String, DomainKind>,
    app_estimate: impl Fn(&str) -> u64,
) -> Vec<u64> {
    graph
        .tasks()
        .iter()
        .map(|t| {
            let cluster = req.cluster(&t.cluster);
            match t.kind.infra_op() {
                Some(op) => cluster
                    .and_then(|c| kinds.get(&c.deploymentdomain))
                    .map_or(1, |k| k.latency().expected(op)),
                None => cluster
                    .and_then(|c| t.app.and_then(|i| c.applications.get(i)))
                    .map_or(1, |a| app_estimate(&a.name)),
            }
        })
        .collect()
}

/// Deterministic text listing: placements, then tasks in topological order.
pub fn render_plan(placements: &PlacementMap, graph: &TaskGraph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "PLACEMENTS ({})", placements.entries.len());
    let _ = writeln!(
        out,
        "{:<20} {:<12} {:<7} {:<12} {:<12} {:<8} {:<16} OSACCOUNT",
        "NODE", "CLUSTER", "ROLE", "DOMAIN", "HOST", "TYPE", "OSIMAGE"
    );
    for p in &placements.entries {
        let _ = writeln!(
            out,
            "{:<20} {:<12} {:<7} {:<12} {:<12} {:<8} {:<16} {}",
            p.node_id,
            p.cluster,
            p.role.as_str(),
            p.domain,
            p.host_id,
            p.nodetype,
            p.osimage,
            p.osaccount.as_deref().unwrap_or("-")
        );
    }
    let _ = writeln!(out, "TASKS ({})", graph.len());
    let order = graph
        .topological_order()
        .unwrap_or_else(|_| (0..graph.len()).collect());
    for id in order {
        let t = graph.task(id);
        let after: Vec<String> = graph
            .predecessors(id)
            .iter()
            .map(|p| format!("#{p}"))
            .collect();
        let after = if after.is_empty() {
            "-".to_string()
        } else {
            after.join(",")
        };
        let _ = writeln!(out, "#{:<3} {:<40} after {}", id, t.label, after);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::parse_slice_request;
    use crate::fixtures::{DEMO_DOMAINS, LIQO_SLICE};
    use crate::infra::{load_registry, HostRecord};
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inventories() -> BTreeMap<String, DomainInventory> {
        load_registry(DEMO_DOMAINS)
            .unwrap()
            .into_iter()
            .map(|i| (i.domain.clone(), i))
            .collect()
    }

    fn liqo() -> SliceRequest {
        parse_slice_request(LIQO_SLICE).unwrap()
    }

    fn host(id: &str, cap: u32, allocated: u32) -> HostRecord {
        HostRecord {
            host_id: id.into(),
            capacity_slots: cap,
            allocated,
            supported_nodetypes: ["vm".to_string()].into(),
            available_osimages: ["img".to_string()].into(),
        }
    }

    fn cluster(masters: u32, workers: u32) -> ClusterSpec {
        let mut c = liqo().clusters[0].clone();
        c.masters.count = masters;
        c.workers.count = workers;
        c.deploymentdomain = "d".into();
        c.applications.clear();
        c
    }

    fn domain(hosts: Vec<HostRecord>) -> DomainInventory {
        DomainInventory {
            domain: "d".into(),
            kind: DomainKind::Cloud,
            hosts,
        }
    }

    /// Minimum achievable max-load over every assignment of `nodes` nodes,
    /// by exhaustive enumeration.
    fn brute_force_min_max(hosts: &[HostRecord], nodes: u32) -> Option<u32> {
        fn go(hosts: &[HostRecord], load: &mut Vec<u32>, left: u32) -> Option<u32> {
            if left == 0 {
                return load.iter().copied().max();
            }
            let mut best = None;
            for i in 0..hosts.len() {
                if load[i] < hosts[i].capacity_slots {
                    load[i] += 1;
                    if let Some(m) = go(hosts, load, left - 1) {
                        best = Some(best.map_or(m, |b: u32| b.min(m)));
                    }
                    load[i] -= 1;
                }
            }
            best
        }
        let mut load = hosts.iter().map(|h| h.allocated).collect();
        go(hosts, &mut load, nodes)
    }

    fn final_loads(hosts: &[HostRecord], placed: &[Placement]) -> BTreeMap<String, u32> {
        let mut loads: BTreeMap<String, u32> =
            hosts.iter().map(|h| (h.host_id.clone(), h.allocated)).collect();
        for p in placed {
            *loads.get_mut(&p.host_id).unwrap() += 1;
        }
        loads
    }

    #[test]
    fn liqo_cluster_on_two_empty_hosts() {
        let req = liqo();
        let inv = &inventories()["swntestbed"];
        let placed = embed(&req.clusters[0], inv, DeploymentStrategy::Balanced).unwrap();
        let hosts: Vec<_> = placed.iter().map(|p| (p.node_id.as_str(), p.host_id.as_str())).collect();
        assert_eq!(hosts, [("liqo-master-1", "xcp1"), ("liqo-worker-1", "xcp2")]);
        assert_eq!(brute_force_min_max(&inv.hosts, 2), Some(1));
    }

    #[test]
    fn workstation_single_host() {
        let req = liqo();
        let inv = &inventories()["lefteris"];
        let placed = embed(&req.clusters[1], inv, DeploymentStrategy::Balanced).unwrap();
        assert!(placed.iter().all(|p| p.host_id == "lefteris-pc"));
    }

    #[test]
    fn four_nodes_over_uneven_hosts() {
        let hosts = vec![host("a", 8, 1), host("b", 8, 0)];
        let placed = embed(&cluster(1, 3), &domain(hosts.clone()), DeploymentStrategy::Balanced)
            .unwrap();
        let loads = final_loads(&hosts, &placed);
        assert_eq!(loads["a"], 3);
        assert_eq!(loads["b"], 2);
        assert_eq!(brute_force_min_max(&hosts, 4), Some(3));
        // node-by-node: b, a (tie -> a), b, a
        let order: Vec<_> = placed.iter().map(|p| p.host_id.as_str()).collect();
        assert_eq!(order, ["b", "a", "b", "a"]);
    }

    #[test]
    fn packed_fills_in_order() {
        let hosts = vec![host("b", 2, 0), host("a", 2, 1)];
        let placed = embed(&cluster(1, 2), &domain(hosts), DeploymentStrategy::Packed).unwrap();
        let order: Vec<_> = placed.iter().map(|p| p.host_id.as_str()).collect();
        assert_eq!(order, ["a", "b", "b"]);
    }

    #[test]
    fn shortfall_reported() {
        let hosts = vec![host("a", 1, 0), host("b", 1, 0)];
        match embed(&cluster(1, 2), &domain(hosts), DeploymentStrategy::Balanced) {
            Err(PlanError::InsufficientCapacity { shortfall, requested, available, .. }) => {
                assert_eq!((shortfall, requested, available), (1, 3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unsupported_nodetype() {
        let req = liqo();
        let inv = &inventories()["swntestbed"];
        assert!(matches!(
            embed(&req.clusters[2], inv, DeploymentStrategy::Balanced),
            Err(PlanError::UnsupportedNodeType { .. })
        ));
    }

    #[test]
    fn place_slice_charges_shared_domains() {
        let mut req = liqo();
        req.clusters[1].deploymentdomain = "swntestbed".into();
        let map = place_slice(&req, &inventories()).unwrap();
        let loads = map.host_loads();
        assert_eq!(loads[&("swntestbed".into(), "xcp1".into())], 2);
        assert_eq!(loads[&("swntestbed".into(), "xcp2".into())], 2);
    }

    proptest! {
        #[test]
        fn balanced_matches_brute_force(
            spec in prop::collection::vec((1u32..5, 0u32..4), 1..=4),
            masters in 1u32..3,
            workers in 0u32..5,
        ) {
            let hosts: Vec<HostRecord> = spec
                .iter()
                .enumerate()
                .map(|(i, (cap, pre))| host(&format!("h{i}"), *cap, (*pre).min(*cap)))
                .collect();
            let nodes = (masters + workers).min(6);
            let workers = nodes - masters.min(nodes);
            let c = cluster(masters.min(nodes), workers);
            let oracle = brute_force_min_max(&hosts, nodes);
            match embed(&c, &domain(hosts.clone()), DeploymentStrategy::Balanced) {
                Ok(placed) => {
                    let max = final_loads(&hosts, &placed).values().copied().max();
                    prop_assert_eq!(max, oracle);
                }
                Err(PlanError::InsufficientCapacity { .. }) => prop_assert_eq!(oracle, None),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }

    #[test]
    fn golden_plan_counts() {
        let req = liqo();
        let map = place_slice(&req, &inventories()).unwrap();
        assert_eq!(map.entries.len(), 6);
        let g = build_plan(&req, &map).unwrap();
        assert_eq!(g.len(), 24);
        assert_eq!(g.count(TaskKind::Allocate), 6);
        assert_eq!(g.count(TaskKind::InstallOs), 6);
        assert_eq!(g.count(TaskKind::SetupMaster), 3);
        assert_eq!(g.count(TaskKind::JoinWorker), 3);
        assert_eq!(g.count(TaskKind::InstallFabric), 3);
        assert_eq!(g.count(TaskKind::DeployApp), 3);
        let master = g.tasks().iter().find(|t| t.label == "DeployApp liqo/liqo-master").unwrap().id;
        for peer in ["DeployApp liqo1/liqo-peer", "DeployApp liqo2/liqo-peer"] {
            let p = g.tasks().iter().find(|t| t.label == peer).unwrap().id;
            assert!(g.predecessors(p).contains(&master));
        }
    }

    #[test]
    fn minimal_slice_is_a_chain() {
        let mut req = liqo();
        req.clusters.truncate(1);
        req.clusters[0].workers.count = 0;
        req.clusters[0].applications.clear();
        let map = place_slice(&req, &inventories()).unwrap();
        let g = build_plan(&req, &map).unwrap();
        let kinds: Vec<_> = g.topological_order().unwrap().into_iter().map(|i| g.task(i).kind).collect();
        assert_eq!(
            kinds,
            [TaskKind::Allocate, TaskKind::InstallOs, TaskKind::SetupMaster, TaskKind::InstallFabric]
        );
        assert_eq!(g.edges().len(), 3);
        assert_eq!(critical_path(&g, |_| 1).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn independent_clusters_share_no_edges() {
        let mut req = liqo();
        req.clusters.truncate(2);
        for c in &mut req.clusters {
            c.applications.clear();
        }
        let g = build_plan(&req, &place_slice(&req, &inventories()).unwrap()).unwrap();
        assert!(g
            .edges()
            .iter()
            .all(|&(a, b)| g.task(a).cluster == g.task(b).cluster));
    }

    #[test]
    fn incomplete_placement() {
        let req = liqo();
        let mut map = place_slice(&req, &inventories()).unwrap();
        map.entries.pop();
        assert!(matches!(
            build_plan(&req, &map),
            Err(PlanError::IncompletePlacement { role: NodeRole::Worker, .. })
        ));
    }

    /// Independent statement of the ordering rules, checked against a task order.
    fn rule_violations(req: &SliceRequest, g: &TaskGraph, order: &[TaskId]) -> Vec<String> {
        let mut pos = vec![0; g.len()];
        for (i, &t) in order.iter().enumerate() {
            pos[t] = i;
        }
        let find = |kind: TaskKind, node: &str| {
            g.tasks().iter().find(|t| t.kind == kind && t.node.as_deref() == Some(node)).map(|t| t.id)
        };
        let mut bad = Vec::new();
        let mut before = |a: Option<TaskId>, b: Option<TaskId>, what: &str| {
            if let (Some(a), Some(b)) = (a, b) {
                if pos[a] >= pos[b] {
                    bad.push(what.to_string());
                }
            }
        };
        for c in &req.clusters {
            let masters: Vec<String> = (1..=c.masters.count).map(|i| node_id(&c.name, NodeRole::Master, i)).collect();
            let workers: Vec<String> = (1..=c.workers.count).map(|i| node_id(&c.name, NodeRole::Worker, i)).collect();
            for n in masters.iter().chain(&workers) {
                before(find(TaskKind::Allocate, n), find(TaskKind::InstallOs, n), "alloc<os");
            }
            for m in &masters {
                before(find(TaskKind::InstallOs, m), find(TaskKind::SetupMaster, m), "os<setup");
                before(find(TaskKind::SetupMaster, m), find(TaskKind::InstallFabric, m), "setup<fabric");
                for w in &workers {
                    before(find(TaskKind::SetupMaster, m), find(TaskKind::JoinWorker, w), "setup<join");
                }
            }
            for w in &workers {
                before(find(TaskKind::InstallOs, w), find(TaskKind::JoinWorker, w), "os<join");
            }
            for t in g.tasks().iter().filter(|t| t.kind == TaskKind::DeployApp && t.cluster == c.name) {
                for m in &masters {
                    before(find(TaskKind::InstallFabric, m), Some(t.id), "fabric<app");
                }
                for w in &workers {
                    before(find(TaskKind::JoinWorker, w), Some(t.id), "join<app");
                }
                let app = &c.applications[t.app.unwrap()];
                if let Some(file) = &app.sharefile {
                    for pc in &req.clusters {
                        for (i, pa) in pc.applications.iter().enumerate() {
                            if let AppRole::Producer { peers } = pa.role() {
                                if peers.iter().any(|p| &join_artifact_name(p) == file) {
                                    let prod = g.tasks().iter().find(|x| x.kind == TaskKind::DeployApp && x.cluster == pc.name && x.app == Some(i)).map(|x| x.id);
                                    before(prod, Some(t.id), "producer<consumer");
                                }
                            }
                        }
                    }
                }
            }
        }
        bad
    }

    fn random_linear_extension(g: &TaskGraph, seed: u64) -> Vec<TaskId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indegree: Vec<usize> = (0..g.len()).map(|i| g.predecessors(i).len()).collect();
        let mut ready: Vec<TaskId> = (0..g.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::new();
        while !ready.is_empty() {
            ready.shuffle(&mut rng);
            let t = ready.pop().unwrap();
            order.push(t);
            for &s in g.successors(t) {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    ready.push(s);
                }
            }
        }
        order
    }

    proptest! {
        #[test]
        fn linear_extensions_respect_rules(seed in any::<u64>(), workers in 0u32..3, masters in 1u32..3) {
            let mut req = liqo();
            req.clusters[0].workers.count = workers;
            req.clusters[2].masters.count = masters;
            let g = build_plan(&req, &place_slice(&req, &inventories()).unwrap()).unwrap();
            let order = random_linear_extension(&g, seed);
            prop_assert_eq!(order.len(), g.len());
            let bad = rule_violations(&req, &g, &order);
            prop_assert!(bad.is_empty(), "{:?}", bad);
        }

        #[test]
        fn task_multiset_depends_only_on_shape(packed in any::<bool>(), extra_hosts in 0usize..3) {
            let mut req = liqo();
            let reference = build_plan(&req, &place_slice(&req, &inventories()).unwrap()).unwrap();
            if packed {
                req.deploymentstrategy = DeploymentStrategy::Packed;
            }
            let mut inv = inventories();
            for i in 0..extra_hosts {
                inv.get_mut("swntestbed").unwrap().hosts.push(host(&format!("xcp9{i}"), 4, 0));
            }
            let g = build_plan(&req, &place_slice(&req, &inv).unwrap()).unwrap();
            let shape = |g: &TaskGraph| {
                let mut v: Vec<_> = g.tasks().iter().map(|t| (t.kind, t.cluster.clone())).collect();
                v.sort();
                v
            };
            prop_assert_eq!(shape(&g), shape(&reference));
        }
    }

    /// Every source-to-sink path with its weight, by exhaustive DFS.
    fn all_paths(g: &TaskGraph, w: &[u64]) -> Vec<(u64, Vec<TaskId>)> {
        fn go(g: &TaskGraph, w: &[u64], at: TaskId, path: &mut Vec<TaskId>, acc: u64, out: &mut Vec<(u64, Vec<TaskId>)>) {
            path.push(at);
            let acc = acc + w[at];
            if g.successors(at).is_empty() {
                out.push((acc, path.clone()));
            }
            for &s in g.successors(at) {
                go(g, w, s, path, acc, out);
            }
            path.pop();
        }
        let mut out = Vec::new();
        for s in (0..g.len()).filter(|&i| g.predecessors(i).is_empty()) {
            go(g, w, s, &mut Vec::new(), 0, &mut out);
        }
        out
    }

    #[test]
    fn critical_path_matches_enumeration() {
        let req = liqo();
        let inv = inventories();
        let g = build_plan(&req, &place_slice(&req, &inv).unwrap()).unwrap();
        let kinds = inv.iter().map(|(k, v)| (k.clone(), v.kind)).collect();
        for weights in [vec![1; g.len()], estimate_durations(&g, &req, &kinds, |_| 5)] {
            let path = critical_path(&g, |t| weights[t.id]).unwrap();
            let weight: u64 = path.iter().map(|&t| weights[t]).sum();
            let best = all_paths(&g, &weights).into_iter().map(|(w, _)| w).max().unwrap();
            assert_eq!(weight, best);
            assert_eq!(g.task(*path.last().unwrap()).label.split(' ').next(), Some("DeployApp"));
        }
        let est = estimate_durations(&g, &req, &kinds, |_| 5);
        let path = critical_path(&g, |t| est[t.id]).unwrap();
        assert!(path.iter().all(|&t| g.task(t).cluster == "liqo2"));
        assert_eq!(g.task(*path.last().unwrap()).label, "DeployApp liqo2/liqo-peer");
        // uniform weights: the peering chain is the longest
        let path = critical_path(&g, |_| 1).unwrap();
        assert_eq!(path.len(), 6);
        assert_eq!(g.task(path[4]).label, "DeployApp liqo/liqo-master");
    }

    #[test]
    fn critical_path_edge_cases() {
        assert!(critical_path(&TaskGraph::default(), |_| 1).unwrap().is_empty());
        let task = |id| Task { id, kind: TaskKind::Allocate, cluster: "c".into(), node: None, app: None, label: format!("t{id}") };
        let cyclic = TaskGraph::new(vec![task(0), task(1)], vec![(0, 1), (1, 0)]);
        assert_eq!(critical_path(&cyclic, |_| 1), Err(PlanError::CycleDetected));
    }

    #[test]
    fn rendering_is_stable() {
        let req = liqo();
        let map = place_slice(&req, &inventories()).unwrap();
        let g = build_plan(&req, &map).unwrap();
        let text = render_plan(&map, &g);
        assert_eq!(text, render_plan(&map, &g));
        assert!(text.starts_with("PLACEMENTS (6)\n"));
        assert!(text.contains("TASKS (24)\n"));
        assert!(text.contains("liqo2-master-1"));
    }
}
