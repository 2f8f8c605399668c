//! Application modules deployed onto ready clusters, and the slice-scoped
//! artifact exchange that establishes multi-cluster peering.
//!
//! A producer (an application with a `peers` parameter) issues one join
//! artifact per peer, named `<peer>-peer-join.sh`. A consumer (an application
//! with a `sharefile`) reads its artifact, checks that the token inside names
//! its own cluster, and records the peering edge.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{join_artifact_name, AppRole, ApplicationSpec, Finding, Severity, SliceRequest};
use crate::time::VirtualTime;

/// Default virtual-time bound for waiting on a sharefile.
pub const SHARE_TIMEOUT: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverRole {
    Standalone,
    PeeringMaster,
    PeeringPeer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppDriver {
    pub name: String,
    pub role: DriverRole,
    /// Inclusive deployment duration range.
    pub duration: (u64, u64),
}

impl AppDriver {
    pub fn new(name: &str, role: DriverRole, duration: (u64, u64)) -> Self {
        AppDriver {
            name: name.to_string(),
            role,
            duration,
        }
    }

    pub fn sample_duration(&self, rng: &mut impl Rng) -> u64 {
        rng.gen_range(self.duration.0..=self.duration.1)
    }

    pub fn expected_duration(&self) -> u64 {
        (self.duration.0 + self.duration.1).div_ceil(2)
    }
}

/// Registry of known application drivers.
#[derive(Debug, Clone)]
pub struct AppCatalog {
    drivers: BTreeMap<String, AppDriver>,
    fallback: AppDriver,
    strict: bool,
}

impl Default for AppCatalog {
    fn default() -> Self {
        let drivers = [
            AppDriver::new("liqo-master", DriverRole::PeeringMaster, (6, 12)),
            AppDriver::new("liqo-peer", DriverRole::PeeringPeer, (4, 8)),
            AppDriver::new("submariner", DriverRole::Standalone, (5, 10)),
            AppDriver::new("karmada", DriverRole::Standalone, (8, 14)),
            AppDriver::new("ocm", DriverRole::Standalone, (6, 10)),
            AppDriver::new("prometheus", DriverRole::Standalone, (3, 6)),
        ];
        AppCatalog {
            drivers: drivers.into_iter().map(|d| (d.name.clone(), d)).collect(),
            fallback: AppDriver::new("generic", DriverRole::Standalone, (3, 6)),
            strict: false,
        }
    }
}

impl AppCatalog {
    /// A catalog that rejects unknown application names instead of falling back.
    pub fn strict() -> Self {
        AppCatalog {
            strict: true,
            ..AppCatalog::default()
        }
    }

    pub fn register(&mut self, driver: AppDriver) {
        self.drivers.insert(driver.name.clone(), driver);
    }

    pub fn is_known(&self, name: &str) -> bool {
        self.drivers.contains_key(name)
    }

    pub fn driver(&self, name: &str) -> Result<&AppDriver, AppError> {
        match self.drivers.get(name) {
            Some(d) => Ok(d),
            None if self.strict => Err(AppError::UnknownApplication(name.to_string())),
            None => Ok(&self.fallback),
        }
    }

    /// Warnings for applications the catalog does not know, or whose
    /// descriptor role disagrees with the driver's.
    pub fn warnings(&self, req: &SliceRequest) -> Vec<Finding> {
        let mut out = Vec::new();
        for (i, c) in req.clusters.iter().enumerate() {
            for (j, app) in c.applications.iter().enumerate() {
                let locator = format!(".spec.clusters[{i}].applications[{j}].name");
                let Some(driver) = self.drivers.get(&app.name) else {
                    out.push(Finding {
                        severity: Severity::Warning,
                        locator,
                        message: format!(
                            "unknown application '{}' will be deployed with the generic driver",
                            app.name
                        ),
                    });
                    continue;
                };
                let expected = match app.role() {
                    AppRole::Producer { .. } => DriverRole::PeeringMaster,
                    AppRole::Consumer { .. } => DriverRole::PeeringPeer,
                    AppRole::Plain => DriverRole::Standalone,
                };
                if driver.role != expected {
                    out.push(Finding {
                        severity: Severity::Warning,
                        locator,
                        message: format!(
                            "'{}' is a {:?} driver but the entry is configured as {:?}",
                            app.name, driver.role, expected
                        ),
                    });
                }
            }
        }
        out
    }
}

/// The binding a join artifact carries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareToken {
    pub slice: String,
    pub master_cluster: String,
    pub peer_cluster: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Producer {
    pub slice: String,
    pub cluster: String,
    pub app: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareArtifact {
    pub filename: String,
    /// Opaque payload; for join artifacts, a serialized [`ShareToken`].
    pub content: String,
    pub producer: Producer,
    pub created_at: VirtualTime,
}

/// Master/peer relation between two clusters of a slice.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PeeringEdge {
    pub master: String,
    pub peer: String,
}

impl PeeringEdge {
    pub fn new(master: &str, peer: &str) -> Self {
        PeeringEdge {
            master: master.to_string(),
            peer: peer.to_string(),
        }
    }
}

impl fmt::Display for PeeringEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}↔{}", self.master, self.peer)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeeringTopology {
    pub edges: BTreeSet<PeeringEdge>,
}

impl PeeringTopology {
    /// True if `a` and `b` are peered, in either direction.
    pub fn connects(&self, a: &str, b: &str) -> bool {
        self.edges
            .iter()
            .any(|e| (e.master == a && e.peer == b) || (e.master == b && e.peer == a))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AppError {
    #[error("unknown application '{0}'")]
    UnknownApplication(String),
    #[error("artifact '{filename}' is bound to cluster '{found}', not '{expected}'")]
    ShareTokenMismatch {
        filename: String,
        expected: String,
        found: String,
    },
    #[error("artifact '{filename}' already exists in slice '{slice}'")]
    ArtifactConflict { slice: String, filename: String },
    #[error("artifact '{filename}' did not appear before {at}")]
    ShareTimeout { filename: String, at: VirtualTime },
    #[error("artifact '{filename}' does not hold a join token")]
    MalformedToken { filename: String },
}

#[derive(Debug, Clone, Default)]
struct SliceArtifacts {
    files: BTreeMap<String, ShareArtifact>,
    peering: PeeringTopology,
}

/// Write-once artifact store, namespaced per slice.
#[derive(Debug, Clone, Default)]
pub struct ArtifactStore {
    slices: BTreeMap<String, SliceArtifacts>,
}

impl ArtifactStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, slice: &str, artifact: ShareArtifact) -> Result<(), AppError> {
        let entry = self.slices.entry(slice.to_string()).or_default();
        if entry.files.contains_key(&artifact.filename) {
            return Err(AppError::ArtifactConflict {
                slice: slice.to_string(),
                filename: artifact.filename,
            });
        }
        entry.files.insert(artifact.filename.clone(), artifact);
        Ok(())
    }

    pub fn get(&self, slice: &str, filename: &str) -> Option<&ShareArtifact> {
        self.slices.get(slice)?.files.get(filename)
    }

    pub fn artifacts(&self, slice: &str) -> impl Iterator<Item = &ShareArtifact> {
        self.slices.get(slice).into_iter().flat_map(|s| s.files.values())
    }

    pub fn record_peering(&mut self, slice: &str, edge: PeeringEdge) {
        self.slices
            .entry(slice.to_string())
            .or_default()
            .peering
            .edges
            .insert(edge);
    }

    pub fn peering_report(&self, slice: &str) -> PeeringTopology {
        self.slices
            .get(slice)
            .map(|s| s.peering.clone())
            .unwrap_or_default()
    }

    pub fn drop_slice(&mut self, slice: &str) {
        self.slices.remove(slice);
    }
}

/// Effects of a successful deployment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AppOutcome {
    pub artifacts_written: Vec<String>,
    pub peering: Option<PeeringEdge>,
}

/// Wait for `filename` in `slice`, starting at `from`.
///
/// Resolves at the later of `from` and the artifact's creation time, or fails
/// with `ShareTimeout` once `timeout` units pass without it.
pub fn await_sharefile(
    store: &ArtifactStore,
    slice: &str,
    filename: &str,
    from: VirtualTime,
    timeout: u64,
) -> Result<(ShareArtifact, VirtualTime), AppError> {
    let deadline = from + timeout;
    match store.get(slice, filename) {
        Some(a) if a.created_at <= deadline => Ok((a.clone(), a.created_at.max(from))),
        _ => Err(AppError::ShareTimeout {
            filename: filename.to_string(),
            at: deadline,
        }),
    }
}

/// Deploy one application at time `clock`, applying its peering effects to `store`.
pub fn deploy_application(
    catalog: &AppCatalog,
    app: &ApplicationSpec,
    slice: &str,
    cluster: &str,
    store: &mut ArtifactStore,
    clock: VirtualTime,
) -> Result<AppOutcome, AppError> {
    catalog.driver(&app.name)?;
    match app.role() {
        AppRole::Plain => Ok(AppOutcome::default()),
        AppRole::Producer { peers } => {
            let artifacts: Vec<ShareArtifact> = peers
                .iter()
                .map(|peer| {
                    let token = ShareToken {
                        slice: slice.to_string(),
                        master_cluster: cluster.to_string(),
                        peer_cluster: peer.clone(),
                    };
                    ShareArtifact {
                        filename: join_artifact_name(peer),
                        content: serde_json::to_string(&token).expect("token serializes"),
                        producer: Producer {
                            slice: slice.to_string(),
                            cluster: cluster.to_string(),
                            app: app.name.clone(),
                        },
                        created_at: clock,
                    }
                })
                .collect();
            // all-or-nothing
            let mut seen = BTreeSet::new();
            for a in &artifacts {
                if store.get(slice, &a.filename).is_some() || !seen.insert(a.filename.as_str()) {
                    return Err(AppError::ArtifactConflict {
                        slice: slice.to_string(),
                        filename: a.filename.clone(),
                    });
                }
            }
            let names = artifacts.iter().map(|a| a.filename.clone()).collect();
            for a in artifacts {
                store.write(slice, a)?;
            }
            Ok(AppOutcome {
                artifacts_written: names,
                peering: None,
            })
        }
        AppRole::Consumer { sharefile } => {
            let (artifact, _) = await_sharefile(store, slice, &sharefile, clock, 0)?;
            let token: ShareToken = serde_json::from_str(&artifact.content).map_err(|_| {
                AppError::MalformedToken {
                    filename: sharefile.clone(),
                }
            })?;
            if token.peer_cluster != cluster || token.slice != slice {
                return Err(AppError::ShareTokenMismatch {
                    filename: sharefile,
                    expected: cluster.to_string(),
                    found: token.peer_cluster,
                });
            }
            let edge = PeeringEdge::new(&token.master_cluster, cluster);
            store.record_peering(slice, edge.clone());
            Ok(AppOutcome {
                artifacts_written: Vec::new(),
                peering: Some(edge),
            })
        }
    }
}
