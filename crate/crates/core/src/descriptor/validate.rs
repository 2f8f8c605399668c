use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{join_artifact_name, AppRole, KubernetesType, NetworkFabric, SliceRequest};

/// Allowed (kubernetes flavor, network fabric) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompatibilityMatrix {
    allowed: [[bool; 4]; 4],
}

fn index_type(t: KubernetesType) -> usize {
    t as usize
}

fn index_fabric(f: NetworkFabric) -> usize {
    f as usize
}

impl Default for CompatibilityMatrix {
    /// Every pair except microk8s with kube-ovn.
    fn default() -> Self {
        let mut m = CompatibilityMatrix::permissive();
        m.deny(KubernetesType::Microk8s, NetworkFabric::Kubeovn);
        m
    }
}

impl CompatibilityMatrix {
    pub fn permissive() -> Self {
        CompatibilityMatrix {
            allowed: [[true; 4]; 4],
        }
    }

    /// Build from an explicit pair list. Returns `None` for an empty list.
    pub fn from_pairs(
        pairs: impl IntoIterator<Item = (KubernetesType, NetworkFabric)>,
    ) -> Option<Self> {
        let mut m = CompatibilityMatrix {
            allowed: [[false; 4]; 4],
        };
        for (t, f) in pairs {
            m.allow(t, f);
        }
        (!m.pairs().is_empty()).then_some(m)
    }

    pub fn allow(&mut self, t: KubernetesType, f: NetworkFabric) {
        self.allowed[index_type(t)][index_fabric(f)] = true;
    }

    pub fn deny(&mut self, t: KubernetesType, f: NetworkFabric) {
        self.allowed[index_type(t)][index_fabric(f)] = false;
    }

    pub fn is_allowed(&self, t: KubernetesType, f: NetworkFabric) -> bool {
        self.allowed[index_type(t)][index_fabric(f)]
    }

    pub fn pairs(&self) -> Vec<(KubernetesType, NetworkFabric)> {
        KubernetesType::ALL
            .iter()
            .flat_map(|t| NetworkFabric::ALL.iter().map(move |f| (*t, *f)))
            .filter(|(t, f)| self.is_allowed(*t, *f))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub locator: String,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev}: {}: {}", self.locator, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn new(findings: Vec<Finding>) -> Self {
        let ok = !findings.iter().any(|f| f.severity == Severity::Error);
        ValidationReport { ok, findings }
    }

    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings
            .iter()
            .filter(|f| f.severity == Severity::Error)
    }

    pub fn push(&mut self, finding: Finding) {
        if finding.severity == Severity::Error {
            self.ok = false;
        }
        self.findings.push(finding);
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "valid: {}", self.ok)?;
        for finding in &self.findings {
            writeln!(f, "  {finding}")?;
        }
        Ok(())
    }
}

fn error(locator: String, message: String) -> Finding {
    Finding {
        severity: Severity::Error,
        locator,
        message,
    }
}

/// Cross-field checks over a parsed request.
///
/// Emits one error per violated rule instance: unknown domain, incompatible
/// flavor/fabric pair, dangling peer, duplicate cluster name, orphan sharefile,
/// and a cluster without masters. A credential digest in an unexpected format
/// is only a warning.
pub fn validate(
    req: &SliceRequest,
    matrix: &CompatibilityMatrix,
    domains: &BTreeSet<String>,
) -> ValidationReport {
    let mut findings = Vec::new();

    if !req.credentials.has_sha512_format() {
        findings.push(Finding {
            severity: Severity::Warning,
            locator: ".spec.credentials.password".into(),
            message: "password is not a SHA-512 crypt string or 128-hex digest".into(),
        });
    }

    let cluster_names: BTreeSet<&str> = req.clusters.iter().map(|c| c.name.as_str()).collect();
    let mut first_seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut produced: BTreeSet<String> = BTreeSet::new();
    for c in &req.clusters {
        for app in &c.applications {
            if let AppRole::Producer { peers } = app.role() {
                produced.extend(peers.iter().map(|p| join_artifact_name(p)));
            }
        }
    }

    for (i, c) in req.clusters.iter().enumerate() {
        let loc = format!(".spec.clusters[{i}]");
        if let Some(first) = first_seen.get(c.name.as_str()) {
            findings.push(error(
                format!("{loc}.name"),
                format!(
                    "duplicate cluster name '{}' (first used at .spec.clusters[{first}])",
                    c.name
                ),
            ));
        } else {
            first_seen.insert(&c.name, i);
        }
        if !domains.contains(&c.deploymentdomain) {
            findings.push(error(
                format!("{loc}.deploymentdomain"),
                format!("deployment domain '{}' is not registered", c.deploymentdomain),
            ));
        }
        if !matrix.is_allowed(c.kubernetestype, c.networkfabric) {
            findings.push(error(
                format!("{loc}.kubernetes.networkfabric"),
                format!(
                    "network fabric '{}' is not supported with kubernetes type '{}'",
                    c.networkfabric, c.kubernetestype
                ),
            ));
        }
        if c.masters.count == 0 {
            findings.push(error(
                format!("{loc}.infrastructure.masters.count"),
                "a cluster needs at least one master".into(),
            ));
        }
        for (j, app) in c.applications.iter().enumerate() {
            let app_loc = format!("{loc}.applications[{j}]");
            match app.role() {
                AppRole::Producer { peers } => {
                    for peer in peers {
                        if peer == c.name || !cluster_names.contains(peer.as_str()) {
                            findings.push(error(
                                format!("{app_loc}.parameters"),
                                format!("peer {peer} not a cluster in this slice"),
                            ));
                        }
                    }
                }
                AppRole::Consumer { sharefile } => {
                    if !produced.contains(&sharefile) {
                        findings.push(error(
                            format!("{app_loc}.sharefile"),
                            format!("no application in this slice produces '{sharefile}'"),
                        ));
                    }
                }
                AppRole::Plain => {}
            }
        }
    }

    ValidationReport::new(findings)
}
