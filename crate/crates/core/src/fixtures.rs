//! Documents shipped with the crate: the three-cluster Liqo slice and the
//! demo domain registry it deploys onto.

/// Three Liqo-peered clusters across `swntestbed`, `lefteris` and `cloudlab`.
pub const LIQO_SLICE: &str = include_str!("../fixtures/liqo.yaml");

/// Registry documents for the `swntestbed`, `lefteris` and `cloudlab` domains.
pub const DEMO_DOMAINS: &str = include_str!("../fixtures/demo-domains.yaml");
