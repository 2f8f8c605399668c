//! Fixed-column text rendering.

use std::fmt::Write;

use clusterslice::engine::{CampaignReport, ClusterRow, NodeRow, SliceStatus, SliceSummary};
use clusterslice::infra::DomainInventory;

/// Left-aligned columns separated by three spaces. Always prints the header.
pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let header: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    for row in std::iter::once(&header).chain(rows) {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                line.push_str("   ");
            }
            let pad = widths[i] - cell.chars().count();
            line.push_str(cell);
            line.extend(std::iter::repeat_n(' ', pad));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn indent(text: &str) -> String {
    text.lines().map(|l| format!("  {l}\n")).collect()
}

pub fn slices_table(rows: &[SliceSummary]) -> String {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|s| {
            vec![
                s.name.clone(),
                s.namespace.clone(),
                s.phase.to_string(),
                s.clusters.to_string(),
                format!("{}/{}", s.ready_nodes, s.nodes),
                s.age.to_string(),
            ]
        })
        .collect();
    table(&["NAME", "NAMESPACE", "PHASE", "CLUSTERS", "READY", "AGE(virtual)"], &rows)
}

pub fn clusters_table(rows: &[ClusterRow]) -> String {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|c| {
            vec![
                c.name.clone(),
                c.slice.clone(),
                c.domain.clone(),
                c.kubernetes.to_string(),
                c.fabric.to_string(),
                c.phase.to_string(),
                format!("{}/{}", c.ready, c.nodes),
            ]
        })
        .collect();
    table(&["NAME", "SLICE", "DOMAIN", "KUBERNETES", "FABRIC", "PHASE", "READY"], &rows)
}

pub fn resources_table(rows: &[NodeRow]) -> String {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|n| {
            vec![
                n.name.clone(),
                n.slice.clone(),
                n.cluster.clone(),
                n.role.to_string(),
                n.domain.clone(),
                n.host.clone(),
                n.state.to_string(),
                n.attempts.to_string(),
                n.age.to_string(),
            ]
        })
        .collect();
    table(
        &["NAME", "SLICE", "CLUSTER", "ROLE", "DOMAIN", "HOST", "STATE", "ATTEMPTS", "AGE(virtual)"],
        &rows,
    )
}

pub fn domains_table(domains: &[&DomainInventory]) -> String {
    let rows: Vec<Vec<String>> = domains
        .iter()
        .map(|d| {
            let slots: u32 = d.hosts.iter().map(|h| h.capacity_slots).sum();
            vec![
                d.domain.clone(),
                d.kind.to_string(),
                d.hosts.len().to_string(),
                format!("{}/{slots}", d.free_slots()),
            ]
        })
        .collect();
    table(&["NAME", "KIND", "HOSTS", "FREE"], &rows)
}

pub fn describe_text(st: &SliceStatus) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Name:      {}", st.id);
    let _ = writeln!(out, "Phase:     {}", st.phase);
    let _ = writeln!(out, "Strategy:  {}", st.strategy);
    let _ = writeln!(out, "Clock:     {} (virtual)", st.clock);

    out.push_str("Clusters:\n");
    out.push_str(&indent(&clusters_table(&st.clusters)));

    out.push_str("Nodes:\n");
    out.push_str(&indent(&resources_table(&st.nodes)));

    out.push_str("Applications:\n");
    let apps: Vec<Vec<String>> = st
        .apps
        .iter()
        .map(|a| vec![a.cluster.clone(), a.name.clone(), a.status.to_string()])
        .collect();
    out.push_str(&indent(&table(&["CLUSTER", "APPLICATION", "STATUS"], &apps)));

    out.push_str("Peering:\n");
    if st.peering.is_empty() {
        out.push_str("  <none>\n");
    }
    for edge in &st.peering {
        let _ = writeln!(out, "  {edge}");
    }

    out.push_str("Artifacts:\n");
    if st.artifacts.is_empty() {
        out.push_str("  <none>\n");
    }
    for a in &st.artifacts {
        let _ = writeln!(out, "  {} → {}, {}", a.filename, a.producer, a.created_at);
    }

    let _ = writeln!(out, "Events (last {}):", st.recent.len());
    for r in &st.recent {
        let _ = writeln!(out, "  {r}");
    }
    out
}

pub fn campaign_text(r: &CampaignReport) -> String {
    let rows = vec![
        vec!["cycles".to_string(), r.cycles.to_string()],
        vec!["clusters deployed".to_string(), r.clusters_deployed.to_string()],
        vec!["nodes deployed".to_string(), r.nodes_deployed.to_string()],
        vec!["failures".to_string(), r.slices_failed.to_string()],
        vec!["failed clusters".to_string(), r.clusters_failed.to_string()],
        vec!["retries".to_string(), r.retries.to_string()],
        vec![
            "mean deploy time".to_string(),
            format!("{:.1} (virtual)", r.mean_deploy_time),
        ],
        vec!["hosts added".to_string(), r.hosts_added.to_string()],
        vec!["audit violations".to_string(), r.audit_violations.len().to_string()],
    ];
    table(&["METRIC", "VALUE"], &rows)
}
