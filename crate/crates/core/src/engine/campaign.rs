//! Repeated apply, settle and delete cycles over one request template.

use serde::{Deserialize, Serialize};

use super::{Engine, EngineError};
use crate::descriptor::SliceRequest;
use crate::infra::HostRecord;
use crate::lifecycle::{ClusterPhase, NodeState, SlicePhase};
use crate::planner::PlanError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CampaignConfig {
    pub count: usize,
    /// Worker counts assigned round-robin to successive clusters. Empty keeps
    /// the template's counts.
    pub worker_mix: Vec<u32>,
    /// Add synthetic hosts to a domain when a cycle does not fit.
    pub autoscale: bool,
    /// Virtual-time budget per cycle.
    pub max_time: u64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            count: 0,
            worker_mix: Vec::new(),
            autoscale: false,
            max_time: 100_000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub cycles: usize,
    pub clusters_deployed: usize,
    pub nodes_deployed: usize,
    pub clusters_failed: usize,
    pub slices_failed: usize,
    pub retries: u64,
    /// Mean virtual time from apply to Ready or Failed.
    pub mean_deploy_time: f64,
    pub hosts_added: usize,
    /// Capacity audit problems found after each cycle's delete.
    pub audit_violations: Vec<String>,
}

/// The request for cycle `i`: a renamed copy of `template` with worker counts
/// drawn from `mix`.
pub fn campaign_request(template: &SliceRequest, i: usize, mix: &[u32]) -> SliceRequest {
    let mut req = template.clone();
    req.name = format!("{}-{i}", template.name);
    req.metadata_name = req.name.clone();
    let n = req.clusters.len();
    if !mix.is_empty() {
        for (j, c) in req.clusters.iter_mut().enumerate() {
            c.workers.count = mix[(i * n + j) % mix.len()];
        }
    }
    req
}

pub fn run_campaign(
    engine: &mut Engine,
    template: &SliceRequest,
    config: &CampaignConfig,
) -> Result<CampaignReport, EngineError> {
    let mut report = CampaignReport::default();
    let mut total_time = 0u64;
    for i in 0..config.count {
        let req = campaign_request(template, i, &config.worker_mix);
        let id = loop {
            match engine.apply(req.clone()) {
                Ok(id) => break id,
                Err(EngineError::PlanningFailed(PlanError::InsufficientCapacity { domain, .. }))
                    if config.autoscale =>
                {
                    grow(engine, &domain, report.hosts_added)?;
                    report.hosts_added += 1;
                }
                Err(e) => return Err(e),
            }
        };
        engine.run_until_settled(config.max_time)?;

        let s = &engine.world().slices[&id];
        report.cycles += 1;
        report.retries += u64::from(s.retries);
        report.clusters_deployed += s
            .cluster_phases
            .values()
            .filter(|p| **p == ClusterPhase::Ready)
            .count();
        report.clusters_failed += s
            .cluster_phases
            .values()
            .filter(|p| **p == ClusterPhase::Failed)
            .count();
        if s.phase == SlicePhase::Ready {
            report.nodes_deployed += s.twins.iter().filter(|t| t.state == NodeState::Ready).count();
        } else {
            report.slices_failed += 1;
        }
        total_time += s.settled_at.map_or(0, |t| t.since(s.applied_at));

        engine.delete(&id)?;
        report
            .audit_violations
            .extend(engine.infra().audit().into_iter().map(|p| format!("cycle {i}: {p}")));
    }
    if report.cycles > 0 {
        report.mean_deploy_time = total_time as f64 / report.cycles as f64;
    }
    Ok(report)
}

fn grow(engine: &mut Engine, domain: &str, n: usize) -> Result<(), EngineError> {
    let template = engine
        .infra()
        .inventory(domain)
        .and_then(|inv| inv.hosts.first())
        .cloned()
        .ok_or_else(|| EngineError::NotFound(domain.to_string()))?;
    let host = HostRecord {
        host_id: format!("{domain}-auto{n}"),
        allocated: 0,
        ..template
    };
    engine.add_host(domain, host)
}
