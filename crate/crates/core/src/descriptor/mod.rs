//! Slice descriptors: the `MultiClusterSliceRequest` document, its typed form,
//! and validation against registered domains.

mod params;
mod parse;
mod render;
mod validate;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use params::{parse_parameters, render_parameters, ParamValue, ParameterSyntaxError, Parameters};
pub use parse::parse_slice_request;
pub use render::render_slice_request;
pub use validate::{validate, CompatibilityMatrix, Finding, Severity, ValidationReport};

pub const API_VERSION: &str = "swn.uom.gr/v1";
pub const KIND: &str = "MultiClusterSliceRequest";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DescriptorError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error at {locator}: {message}")]
    Schema { locator: String, message: String },
}

impl DescriptorError {
    pub fn locator(&self) -> Option<&str> {
        match self {
            DescriptorError::Schema { locator, .. } => Some(locator),
            DescriptorError::Syntax { .. } => None,
        }
    }
}

/// Parsed and structurally checked slice request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceRequest {
    /// `metadata.name` of the document.
    pub metadata_name: String,
    pub name: String,
    pub namespace: String,
    pub deploymentstrategy: DeploymentStrategy,
    pub credentials: Credentials,
    pub clusters: Vec<ClusterSpec>,
}

impl SliceRequest {
    /// `<namespace>/<name>`, the key slices are tracked under.
    pub fn slice_id(&self) -> String {
        format!("{}/{}", self.namespace, self.name)
    }

    pub fn cluster(&self, name: &str) -> Option<&ClusterSpec> {
        self.clusters.iter().find(|c| c.name == name)
    }

    pub fn node_count(&self) -> usize {
        self.clusters
            .iter()
            .map(|c| (c.masters.count + c.workers.count) as usize)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credentials {
    pub username: String,
    /// SHA-512 digest as given in the document. Plaintext passwords are never held.
    pub password_hash: String,
}

impl Credentials {
    /// True for `$6$`-prefixed crypt strings and 128-hex-digit digests.
    pub fn has_sha512_format(&self) -> bool {
        let h = &self.password_hash;
        if let Some(rest) = h.strip_prefix("$6$") {
            // $6$[rounds=N$]salt$digest
            let parts: Vec<&str> = rest.split('$').collect();
            return matches!(parts.len(), 2 | 3)
                && parts.iter().all(|p| !p.is_empty())
                && parts.last().is_some_and(|d| d.len() == 86);
        }
        h.len() == 128 && h.bytes().all(|b| b.is_ascii_hexdigit())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub name: String,
    pub deploymentdomain: String,
    pub masters: NodeGroupSpec,
    pub workers: NodeGroupSpec,
    pub kubernetestype: KubernetesType,
    pub networkfabric: NetworkFabric,
    pub kubernetesversion: Option<String>,
    pub applications: Vec<ApplicationSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeGroupSpec {
    pub count: u32,
    pub osimage: String,
    /// `mastertype` / `workertype` in the document.
    pub nodetype: String,
    pub osaccount: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplicationSpec {
    pub name: String,
    pub scope: AppScope,
    /// Compact parameter string, kept verbatim.
    pub parameters: Option<String>,
    pub sharefile: Option<String>,
}

/// How an application takes part in multi-cluster peering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppRole {
    /// Has a `peers` parameter; issues one join artifact per peer.
    Producer { peers: Vec<String> },
    /// Has a `sharefile`; consumes the named artifact.
    Consumer { sharefile: String },
    Plain,
}

impl ApplicationSpec {
    pub fn parsed_parameters(&self) -> Result<Parameters, ParameterSyntaxError> {
        match &self.parameters {
            Some(raw) => parse_parameters(raw),
            None => Ok(Parameters::new()),
        }
    }

    /// Role derived from the entry. Parameters that fail to parse count as absent;
    /// the parser rejects such documents before this is reachable.
    pub fn role(&self) -> AppRole {
        let peers = self
            .parsed_parameters()
            .ok()
            .and_then(|p| p.get("peers").cloned());
        if let Some(v) = peers {
            let peers = match v {
                ParamValue::List(items) => items,
                ParamValue::Scalar(s) => vec![s],
            };
            return AppRole::Producer { peers };
        }
        match &self.sharefile {
            Some(f) => AppRole::Consumer {
                sharefile: f.clone(),
            },
            None => AppRole::Plain,
        }
    }
}

/// Name of the join artifact a producer issues for `peer`.
pub fn join_artifact_name(peer: &str) -> String {
    format!("{peer}-peer-join.sh")
}

macro_rules! keyword_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown value '{}', expected one of: {}",
                        other,
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

keyword_enum!(
    /// Host selection policy used by the embedding step.
    DeploymentStrategy { Balanced => "balanced", Packed => "packed" }
);
keyword_enum!(KubernetesType {
    Vanilla => "vanilla",
    K0s => "k0s",
    K3s => "k3s",
    Microk8s => "microk8s",
});
keyword_enum!(NetworkFabric {
    Flannel => "flannel",
    Calico => "calico",
    Kuberouter => "kuberouter",
    Kubeovn => "kubeovn",
});
keyword_enum!(AppScope { Cluster => "cluster" });

/// Lowercase alphanumerics and hyphens, nonempty.
pub fn is_dns_label(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}
