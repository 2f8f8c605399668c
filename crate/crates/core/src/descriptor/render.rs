use serde_yaml::{Mapping, Value};

use super::{NodeGroupSpec, SliceRequest, API_VERSION, KIND};

fn map<const N: usize>(pairs: [(&str, Value); N]) -> Value {
    let mut m = Mapping::new();
    for (k, v) in pairs {
        if !v.is_null() {
            m.insert(Value::from(k), v);
        }
    }
    Value::Mapping(m)
}

fn opt(s: &Option<String>) -> Value {
    s.as_deref().map(Value::from).unwrap_or(Value::Null)
}

fn group(g: &NodeGroupSpec, type_key: &str) -> Value {
    map([
        ("count", Value::from(g.count)),
        ("osimage", Value::from(g.osimage.as_str())),
        ("osaccount", opt(&g.osaccount)),
        (type_key, Value::from(g.nodetype.as_str())),
    ])
}

/// Serialize a request back into descriptor YAML, keeping the document's field order.
pub fn render_slice_request(req: &SliceRequest) -> String {
    let clusters = req
        .clusters
        .iter()
        .map(|c| {
            let apps = c
                .applications
                .iter()
                .map(|a| {
                    map([
                        ("name", Value::from(a.name.as_str())),
                        ("scope", Value::from(a.scope.as_str())),
                        ("parameters", opt(&a.parameters)),
                        ("sharefile", opt(&a.sharefile)),
                    ])
                })
                .collect::<Vec<_>>();
            map([
                ("name", Value::from(c.name.as_str())),
                ("deploymentdomain", Value::from(c.deploymentdomain.as_str())),
                (
                    "infrastructure",
                    map([
                        ("masters", group(&c.masters, "mastertype")),
                        ("workers", group(&c.workers, "workertype")),
                    ]),
                ),
                (
                    "kubernetes",
                    map([
                        ("kubernetestype", Value::from(c.kubernetestype.as_str())),
                        ("networkfabric", Value::from(c.networkfabric.as_str())),
                        ("kubernetesversion", opt(&c.kubernetesversion)),
                    ]),
                ),
                ("applications", Value::Sequence(apps)),
            ])
        })
        .collect::<Vec<_>>();

    let doc = map([
        ("apiVersion", Value::from(API_VERSION)),
        ("kind", Value::from(KIND)),
        ("metadata", map([("name", Value::from(req.metadata_name.as_str()))])),
        (
            "spec",
            map([
                ("name", Value::from(req.name.as_str())),
                ("namespace", Value::from(req.namespace.as_str())),
                (
                    "deploymentstrategy",
                    Value::from(req.deploymentstrategy.as_str()),
                ),
                (
                    "credentials",
                    map([
                        ("username", Value::from(req.credentials.username.as_str())),
                        ("password", Value::from(req.credentials.password_hash.as_str())),
                    ]),
                ),
                ("clusters", Value::Sequence(clusters)),
            ]),
        ),
    ]);
    // Value trees built above always serialize.
    serde_yaml::to_string(&doc).expect("descriptor serializes")
}
