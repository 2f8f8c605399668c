use std::collections::BTreeSet;
use std::str::FromStr;

use serde_yaml::{Mapping, Value};

use super::{
    is_dns_label, parse_parameters, AppRole, AppScope, ApplicationSpec, ClusterSpec, Credentials,
    DescriptorError, DeploymentStrategy, KubernetesType, NetworkFabric, NodeGroupSpec,
    SliceRequest, API_VERSION, KIND,
};

type Result<T> = std::result::Result<T, DescriptorError>;

fn schema(locator: impl Into<String>, message: impl Into<String>) -> DescriptorError {
    DescriptorError::Schema {
        locator: locator.into(),
        message: message.into(),
    }
}

/// Inserts the missing space in compact `key:"value"` lines so the document
/// reads as ordinary YAML. Only a bare key followed directly by a quote is touched.
fn normalize_compact_pairs(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 16);
    for line in text.split_inclusive('\n') {
        let body_start = line.len() - line.trim_start().len();
        let mut start = body_start;
        if line[start..].starts_with("- ") {
            start += 2;
        }
        let rest = &line[start..];
        let key_len = rest
            .bytes()
            .take_while(|b| b.is_ascii_alphanumeric() || *b == b'_' || *b == b'-')
            .count();
        let after = &rest[key_len..];
        if key_len > 0 && (after.starts_with(":\"") || after.starts_with(":'")) {
            out.push_str(&line[..start + key_len + 1]);
            out.push(' ');
            out.push_str(&after[1..]);
        } else {
            out.push_str(line);
        }
    }
    out
}

struct Fields<'a> {
    map: &'a Mapping,
    loc: String,
}

impl<'a> Fields<'a> {
    fn new(value: &'a Value, loc: &str, allowed: &[&str]) -> Result<Self> {
        let map = value.as_mapping().ok_or_else(|| {
            schema(
                display_loc(loc),
                format!("expected a mapping, found {}", type_name(value)),
            )
        })?;
        for key in map.keys() {
            match key.as_str() {
                Some(k) if allowed.contains(&k) => {}
                Some(k) => return Err(schema(format!("{loc}.{k}"), "unknown field")),
                None => {
                    return Err(schema(
                        display_loc(loc),
                        format!("field names must be strings, found {}", type_name(key)),
                    ))
                }
            }
        }
        Ok(Fields {
            map,
            loc: loc.to_string(),
        })
    }

    fn at(&self, key: &str) -> String {
        format!("{}.{}", self.loc, key)
    }

    fn opt(&self, key: &str) -> Option<&'a Value> {
        self.map.get(key).filter(|v| !v.is_null())
    }

    fn req(&self, key: &str) -> Result<&'a Value> {
        self.opt(key)
            .ok_or_else(|| schema(self.at(key), "missing required field"))
    }

    fn req_str(&self, key: &str) -> Result<String> {
        let v = self.req(key)?;
        as_string(v, &self.at(key))
    }

    fn opt_str(&self, key: &str) -> Result<Option<String>> {
        self.opt(key).map(|v| as_string(v, &self.at(key))).transpose()
    }

    fn req_nonempty(&self, key: &str) -> Result<String> {
        let s = self.req_str(key)?;
        if s.is_empty() {
            return Err(schema(self.at(key), "must not be empty"));
        }
        Ok(s)
    }

    fn req_label(&self, key: &str) -> Result<String> {
        let s = self.req_str(key)?;
        if !is_dns_label(&s) {
            return Err(schema(
                self.at(key),
                format!("'{s}' must be nonempty lowercase alphanumerics and hyphens"),
            ));
        }
        Ok(s)
    }

    fn req_keyword<T: FromStr<Err = String>>(&self, key: &str) -> Result<T> {
        self.req_str(key)?
            .parse()
            .map_err(|e: String| schema(self.at(key), e))
    }

    fn req_count(&self, key: &str) -> Result<u32> {
        let v = self.req(key)?;
        v.as_u64()
            .and_then(|n| u32::try_from(n).ok())
            .ok_or_else(|| {
                schema(
                    self.at(key),
                    format!("expected a non-negative integer, found {}", type_name(v)),
                )
            })
    }
}

fn display_loc(loc: &str) -> String {
    if loc.is_empty() {
        ".".to_string()
    } else {
        loc.to_string()
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Sequence(_) => "a list",
        Value::Mapping(_) => "a mapping",
        Value::Tagged(_) => "a tagged value",
    }
}

fn as_string(v: &Value, loc: &str) -> Result<String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| schema(loc, format!("expected a string, found {}", type_name(v))))
}

/// Parse a `MultiClusterSliceRequest` document.
///
/// Field names are matched exactly; unknown fields are rejected with the
/// locator of the offending key.
pub fn parse_slice_request(text: &str) -> Result<SliceRequest> {
    let normalized = normalize_compact_pairs(text);
    let root: Value = serde_yaml::from_str(&normalized).map_err(|e| {
        let (line, column) = e
            .location()
            .map(|l| (l.line(), l.column()))
            .unwrap_or((0, 0));
        DescriptorError::Syntax {
            line,
            column,
            message: e.to_string(),
        }
    })?;

    let top = Fields::new(&root, "", &["apiVersion", "kind", "metadata", "spec"])?;
    let api = top.req_str("apiVersion")?;
    if api != API_VERSION {
        return Err(schema(
            ".apiVersion",
            format!("expected '{API_VERSION}', found '{api}'"),
        ));
    }
    let kind = top.req_str("kind")?;
    if kind != KIND {
        return Err(schema(".kind", format!("expected '{KIND}', found '{kind}'")));
    }
    let metadata = Fields::new(top.req("metadata")?, ".metadata", &["name"])?;
    let metadata_name = metadata.req_label("name")?;

    let spec = Fields::new(
        top.req("spec")?,
        ".spec",
        &["name", "namespace", "deploymentstrategy", "credentials", "clusters"],
    )?;
    let name = spec.req_label("name")?;
    let namespace = spec.req_label("namespace")?;
    let deploymentstrategy: DeploymentStrategy = spec.req_keyword("deploymentstrategy")?;

    let creds = Fields::new(
        spec.req("credentials")?,
        ".spec.credentials",
        &["username", "password"],
    )?;
    let credentials = Credentials {
        username: creds.req_nonempty("username")?,
        password_hash: creds.req_nonempty("password")?,
    };

    let clusters_value = spec.req("clusters")?;
    let items = clusters_value.as_sequence().ok_or_else(|| {
        schema(
            ".spec.clusters",
            format!("expected a list, found {}", type_name(clusters_value)),
        )
    })?;
    if items.is_empty() {
        return Err(schema(".spec.clusters", "must contain at least one cluster"));
    }
    let clusters = items
        .iter()
        .enumerate()
        .map(|(i, v)| parse_cluster(v, &format!(".spec.clusters[{i}]")))
        .collect::<Result<Vec<_>>>()?;

    Ok(SliceRequest {
        metadata_name,
        name,
        namespace,
        deploymentstrategy,
        credentials,
        clusters,
    })
}

fn parse_cluster(value: &Value, loc: &str) -> Result<ClusterSpec> {
    let f = Fields::new(
        value,
        loc,
        &[
            "name",
            "deploymentdomain",
            "infrastructure",
            "kubernetes",
            "applications",
        ],
    )?;
    let name = f.req_label("name")?;
    let deploymentdomain = f.req_nonempty("deploymentdomain")?;

    let infra_loc = f.at("infrastructure");
    let infra = Fields::new(f.req("infrastructure")?, &infra_loc, &["masters", "workers"])?;
    let masters = parse_group(infra.req("masters")?, &infra.at("masters"), "mastertype")?;
    let workers = parse_group(infra.req("workers")?, &infra.at("workers"), "workertype")?;

    let k8s_loc = f.at("kubernetes");
    let k8s = Fields::new(
        f.req("kubernetes")?,
        &k8s_loc,
        &["kubernetestype", "networkfabric", "kubernetesversion"],
    )?;
    let kubernetestype: KubernetesType = k8s.req_keyword("kubernetestype")?;
    let networkfabric: NetworkFabric = k8s.req_keyword("networkfabric")?;
    let kubernetesversion = k8s.opt_str("kubernetesversion")?;

    let mut applications = Vec::new();
    if let Some(apps) = f.opt("applications") {
        let apps_loc = f.at("applications");
        let seq = apps.as_sequence().ok_or_else(|| {
            schema(
                &apps_loc,
                format!("expected a list, found {}", type_name(apps)),
            )
        })?;
        let mut seen = BTreeSet::new();
        for (j, app) in seq.iter().enumerate() {
            let app_loc = format!("{apps_loc}[{j}]");
            let spec = parse_application(app, &app_loc)?;
            if !seen.insert(spec.name.clone()) {
                return Err(schema(
                    format!("{app_loc}.name"),
                    format!("application '{}' listed twice in this cluster", spec.name),
                ));
            }
            applications.push(spec);
        }
    }

    Ok(ClusterSpec {
        name,
        deploymentdomain,
        masters,
        workers,
        kubernetestype,
        networkfabric,
        kubernetesversion,
        applications,
    })
}

fn parse_group(value: &Value, loc: &str, type_key: &str) -> Result<NodeGroupSpec> {
    let f = Fields::new(value, loc, &["count", "osimage", "osaccount", type_key])?;
    Ok(NodeGroupSpec {
        count: f.req_count("count")?,
        osimage: f.req_nonempty("osimage")?,
        nodetype: f.req_nonempty(type_key)?,
        osaccount: f.opt_str("osaccount")?,
    })
}

fn parse_application(value: &Value, loc: &str) -> Result<ApplicationSpec> {
    let f = Fields::new(value, loc, &["name", "scope", "parameters", "sharefile"])?;
    let name = f.req_nonempty("name")?;
    let scope: AppScope = f.req_keyword("scope")?;
    let parameters = f.opt_str("parameters")?;
    if let Some(raw) = &parameters {
        parse_parameters(raw).map_err(|e| schema(f.at("parameters"), e.to_string()))?;
    }
    let sharefile = f.opt_str("sharefile")?;
    if let Some(file) = &sharefile {
        if file.is_empty() || file.contains('/') || file.contains('\\') {
            return Err(schema(
                f.at("sharefile"),
                format!("'{file}' must be a plain file name"),
            ));
        }
    }
    let spec = ApplicationSpec {
        name,
        scope,
        parameters,
        sharefile,
    };
    if matches!(spec.role(), AppRole::Producer { .. }) && spec.sharefile.is_some() {
        return Err(schema(
            f.at("sharefile"),
            "an application with a peers parameter cannot also consume a sharefile",
        ));
    }
    Ok(spec)
}
