//! Infrastructure managers: one uniform interface over cloud, testbed and
//! workstation domains, backed by seeded simulations.
//!
//! Every operation returns how long it took in virtual time. Nothing here
//! advances a clock; the engine schedules completions from the returned
//! durations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::VirtualTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Cloud,
    Testbed,
    Workstation,
}

impl DomainKind {
    pub fn latency(self) -> LatencyModel {
        match self {
            DomainKind::Cloud => LatencyModel {
                allocate: (2, 5),
                install_os: (4, 8),
                run_step: (3, 6),
            },
            DomainKind::Testbed => LatencyModel {
                allocate: (20, 60),
                install_os: (15, 30),
                run_step: (3, 6),
            },
            DomainKind::Workstation => LatencyModel {
                allocate: (3, 8),
                install_os: (5, 10),
                run_step: (4, 8),
            },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DomainKind::Cloud => "cloud",
            DomainKind::Testbed => "testbed",
            DomainKind::Workstation => "workstation",
        }
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Inclusive duration ranges per operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencyModel {
    pub allocate: (u64, u64),
    pub install_os: (u64, u64),
    pub run_step: (u64, u64),
}

impl LatencyModel {
    pub fn range(&self, op: FaultTarget) -> (u64, u64) {
        match op {
            FaultTarget::Allocate => self.allocate,
            FaultTarget::InstallOs => self.install_os,
            FaultTarget::RunStep => self.run_step,
        }
    }

    /// Midpoint of the range, rounded up; used for plan estimates.
    pub fn expected(&self, op: FaultTarget) -> u64 {
        let (lo, hi) = self.range(op);
        (lo + hi).div_ceil(2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostRecord {
    pub host_id: String,
    pub capacity_slots: u32,
    #[serde(default)]
    pub allocated: u32,
    pub supported_nodetypes: BTreeSet<String>,
    pub available_osimages: BTreeSet<String>,
}

impl HostRecord {
    pub fn free_slots(&self) -> u32 {
        self.capacity_slots.saturating_sub(self.allocated)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainInventory {
    pub domain: String,
    pub kind: DomainKind,
    pub hosts: Vec<HostRecord>,
}

impl DomainInventory {
    pub fn host(&self, host_id: &str) -> Option<&HostRecord> {
        self.hosts.iter().find(|h| h.host_id == host_id)
    }

    fn host_mut(&mut self, host_id: &str) -> Option<&mut HostRecord> {
        self.hosts.iter_mut().find(|h| h.host_id == host_id)
    }

    pub fn free_slots(&self) -> u32 {
        self.hosts.iter().map(HostRecord::free_slots).sum()
    }

    pub fn check(&self) -> Result<(), InfraError> {
        let invalid = |reason: String| InfraError::InvalidInventory {
            domain: self.domain.clone(),
            reason,
        };
        if self.domain.is_empty() {
            return Err(invalid("domain name is empty".into()));
        }
        if self.hosts.is_empty() {
            return Err(invalid("a domain needs at least one host".into()));
        }
        if self.kind == DomainKind::Workstation && self.hosts.len() != 1 {
            return Err(invalid(format!(
                "workstation domains have exactly one host, found {}",
                self.hosts.len()
            )));
        }
        let mut ids = BTreeSet::new();
        for h in &self.hosts {
            if !ids.insert(h.host_id.as_str()) {
                return Err(invalid(format!("duplicate host id '{}'", h.host_id)));
            }
            if h.capacity_slots == 0 {
                return Err(invalid(format!("host '{}' has zero capacity", h.host_id)));
            }
            if h.allocated > h.capacity_slots {
                return Err(invalid(format!(
                    "host '{}' has {} allocated of {} slots",
                    h.host_id, h.allocated, h.capacity_slots
                )));
            }
        }
        Ok(())
    }
}

/// Parse a registry file: one YAML document per domain.
pub fn load_registry(text: &str) -> Result<Vec<DomainInventory>, InfraError> {
    let mut out = Vec::new();
    for doc in serde_yaml::Deserializer::from_str(text) {
        let value = serde_yaml::Value::deserialize(doc)
            .map_err(|e| InfraError::Registry(e.to_string()))?;
        if value.is_null() {
            continue;
        }
        let inv: DomainInventory =
            serde_yaml::from_value(value).map_err(|e| InfraError::Registry(e.to_string()))?;
        inv.check()?;
        out.push(inv);
    }
    Ok(out)
}

/// Parse a fault profile: a YAML (or JSON) list of fault specs.
pub fn load_fault_profile(text: &str) -> Result<Vec<FaultSpec>, InfraError> {
    serde_yaml::from_str(text).map_err(|e| InfraError::Registry(e.to_string()))
}

/// A live compute resource as seen by its infrastructure manager.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeHandle {
    pub handle_id: String,
    pub domain: String,
    pub host_id: String,
    pub nodetype: String,
    pub address: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultTarget {
    Allocate,
    InstallOs,
    RunStep,
}

impl FaultTarget {
    pub const ALL: [FaultTarget; 3] = [
        FaultTarget::Allocate,
        FaultTarget::InstallOs,
        FaultTarget::RunStep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FaultTarget::Allocate => "allocate",
            FaultTarget::InstallOs => "install_os",
            FaultTarget::RunStep => "run_step",
        }
    }
}

impl fmt::Display for FaultTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FaultTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        FaultTarget::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown fault target '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultTrigger {
    Probability(f64),
    FireOnNth(u64),
}

/// A fault armed at the infrastructure boundary for one domain and operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFaultSpec", into = "RawFaultSpec")]
pub struct FaultSpec {
    pub target: FaultTarget,
    pub domain: String,
    pub trigger: FaultTrigger,
    /// When set, probabilistic draws derive from the world seed; otherwise
    /// the firing pattern is the same under every seed.
    pub seed_scoped: bool,
}

impl FaultSpec {
    pub fn nth(target: FaultTarget, domain: impl Into<String>, n: u64) -> Self {
        FaultSpec {
            target,
            domain: domain.into(),
            trigger: FaultTrigger::FireOnNth(n),
            seed_scoped: true,
        }
    }

    pub fn probability(target: FaultTarget, domain: impl Into<String>, p: f64) -> Self {
        FaultSpec {
            target,
            domain: domain.into(),
            trigger: FaultTrigger::Probability(p),
            seed_scoped: true,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        match self.trigger {
            FaultTrigger::Probability(p) if !(0.0..=1.0).contains(&p) => {
                Err(format!("probability {p} outside [0, 1]"))
            }
            FaultTrigger::FireOnNth(0) => Err("fire_on_nth must be positive".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawFaultSpec {
    target: FaultTarget,
    domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    probability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fire_on_nth: Option<u64>,
    #[serde(default = "default_true")]
    seed_scoped: bool,
}

fn default_true() -> bool {
    true
}

impl TryFrom<RawFaultSpec> for FaultSpec {
    type Error = String;

    fn try_from(raw: RawFaultSpec) -> Result<Self, String> {
        let trigger = match (raw.probability, raw.fire_on_nth) {
            (Some(p), None) => FaultTrigger::Probability(p),
            (None, Some(n)) => FaultTrigger::FireOnNth(n),
            _ => return Err("exactly one of probability or fire_on_nth must be set".into()),
        };
        let spec = FaultSpec {
            target: raw.target,
            domain: raw.domain,
            trigger,
            seed_scoped: raw.seed_scoped,
        };
        spec.check()?;
        Ok(spec)
    }
}

impl From<FaultSpec> for RawFaultSpec {
    fn from(spec: FaultSpec) -> Self {
        let (probability, fire_on_nth) = match spec.trigger {
            FaultTrigger::Probability(p) => (Some(p), None),
            FaultTrigger::FireOnNth(n) => (None, Some(n)),
        };
        RawFaultSpec {
            target: spec.target,
            domain: spec.domain,
            probability,
            fire_on_nth,
            seed_scoped: spec.seed_scoped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepDescriptor {
    pub name: String,
}

impl StepDescriptor {
    pub fn new(name: impl Into<String>) -> Self {
        StepDescriptor { name: name.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepResult {
    pub step: String,
    pub duration: u64,
}

/// Result of an infrastructure call together with its simulated duration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Timed<T> {
    pub value: T,
    pub duration: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InfraError {
    #[error("domain '{0}' is already registered")]
    DuplicateDomain(String),
    #[error("invalid inventory for '{domain}': {reason}")]
    InvalidInventory { domain: String, reason: String },
    #[error("unknown domain '{0}'")]
    UnknownDomain(String),
    #[error("unknown host '{host}' in domain '{domain}'")]
    UnknownHost { domain: String, host: String },
    #[error("host '{host}' in domain '{domain}' has no free slot")]
    CapacityExhausted { domain: String, host: String },
    #[error("host '{host}' does not support node type '{nodetype}'")]
    UnsupportedNodeType { host: String, nodetype: String },
    #[error("image '{image}' is not available on host '{host}'")]
    UnknownImage { host: String, image: String },
    #[error("unknown or released handle '{0}'")]
    UnknownHandle(String),
    #[error("step '{step}' on '{handle}' requires an installed OS")]
    OsNotInstalled { handle: String, step: String },
    #[error("injected {target} fault in domain '{domain}'")]
    InjectedFault {
        target: FaultTarget,
        domain: String,
        elapsed: u64,
    },
    #[error("registry: {0}")]
    Registry(String),
}

impl InfraError {
    /// Virtual time consumed before the failure surfaced.
    pub fn elapsed(&self) -> u64 {
        match self {
            InfraError::InjectedFault { elapsed, .. } => *elapsed,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
struct LiveHandle {
    handle: NodeHandle,
    allocated_at: VirtualTime,
    osimage: Option<String>,
    login: Option<String>,
    steps: Vec<StepResult>,
}

#[derive(Debug, Clone)]
struct DomainState {
    inventory: DomainInventory,
    baseline: BTreeMap<String, u32>,
    index: usize,
    rng: ChaCha8Rng,
    next_address: u64,
}

#[derive(Debug, Clone)]
struct ArmedFault {
    spec: FaultSpec,
    invocations: u64,
    rng: ChaCha8Rng,
}

/// FNV-1a, used to derive per-domain seeds that do not depend on registration order.
fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// All registered domains and the handles they have issued.
#[derive(Debug, Clone)]
pub struct Infrastructure {
    seed: u64,
    domains: BTreeMap<String, DomainState>,
    handles: BTreeMap<String, LiveHandle>,
    next_handle: u64,
    faults: Vec<ArmedFault>,
}

impl Infrastructure {
    pub fn new(seed: u64) -> Self {
        Infrastructure {
            seed,
            domains: BTreeMap::new(),
            handles: BTreeMap::new(),
            next_handle: 1,
            faults: Vec::new(),
        }
    }

    pub fn register_domain(&mut self, inv: DomainInventory) -> Result<(), InfraError> {
        if self.domains.contains_key(&inv.domain) {
            return Err(InfraError::DuplicateDomain(inv.domain));
        }
        inv.check()?;
        let baseline = inv
            .hosts
            .iter()
            .map(|h| (h.host_id.clone(), h.allocated))
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(self.seed ^ stable_hash(&inv.domain));
        let state = DomainState {
            index: self.domains.len(),
            inventory: inv,
            baseline,
            rng,
            next_address: 0,
        };
        self.domains.insert(state.inventory.domain.clone(), state);
        Ok(())
    }

    pub fn arm_fault(&mut self, spec: FaultSpec) -> Result<(), String> {
        spec.check()?;
        let index = self.faults.len() as u64;
        let base = if spec.seed_scoped { self.seed } else { 0x5eed };
        let rng = ChaCha8Rng::seed_from_u64(base ^ stable_hash(&spec.domain) ^ (index << 32));
        self.faults.push(ArmedFault {
            spec,
            invocations: 0,
            rng,
        });
        Ok(())
    }

    pub fn faults(&self) -> impl Iterator<Item = &FaultSpec> {
        self.faults.iter().map(|f| &f.spec)
    }

    pub fn domain_names(&self) -> BTreeSet<String> {
        self.domains.keys().cloned().collect()
    }

    pub fn inventory(&self, domain: &str) -> Option<&DomainInventory> {
        self.domains.get(domain).map(|d| &d.inventory)
    }

    pub fn inventories(&self) -> impl Iterator<Item = &DomainInventory> {
        self.domains.values().map(|d| &d.inventory)
    }

    pub fn live_handles(&self) -> impl Iterator<Item = &NodeHandle> {
        self.handles.values().map(|h| &h.handle)
    }

    pub fn is_live(&self, handle_id: &str) -> bool {
        self.handles.contains_key(handle_id)
    }

    /// Grow a domain with an extra host (synthetic scaling for campaigns).
    pub fn add_host(&mut self, domain: &str, host: HostRecord) -> Result<(), InfraError> {
        let state = self
            .domains
            .get_mut(domain)
            .ok_or_else(|| InfraError::UnknownDomain(domain.to_string()))?;
        let mut grown = state.inventory.clone();
        grown.hosts.push(host.clone());
        grown.check()?;
        state.baseline.insert(host.host_id.clone(), host.allocated);
        state.inventory = grown;
        Ok(())
    }

    fn domain_mut(&mut self, domain: &str) -> Result<&mut DomainState, InfraError> {
        self.domains
            .get_mut(domain)
            .ok_or_else(|| InfraError::UnknownDomain(domain.to_string()))
    }

    fn draw(&mut self, domain: &str, op: FaultTarget) -> Result<u64, InfraError> {
        let state = self.domain_mut(domain)?;
        let (lo, hi) = state.inventory.kind.latency().range(op);
        Ok(state.rng.gen_range(lo..=hi))
    }

    /// Count an invocation against every matching fault; true if any fires.
    fn roll_fault(&mut self, target: FaultTarget, domain: &str) -> bool {
        let mut fired = false;
        for fault in &mut self.faults {
            if fault.spec.target != target || fault.spec.domain != domain {
                continue;
            }
            fault.invocations += 1;
            fired |= match fault.spec.trigger {
                FaultTrigger::FireOnNth(n) => fault.invocations == n,
                FaultTrigger::Probability(p) => fault.rng.gen_bool(p),
            };
        }
        fired
    }

    fn fault_or<T>(
        &mut self,
        target: FaultTarget,
        domain: &str,
        value: T,
    ) -> Result<Timed<T>, InfraError> {
        let duration = self.draw(domain, target)?;
        if self.roll_fault(target, domain) {
            return Err(InfraError::InjectedFault {
                target,
                domain: domain.to_string(),
                elapsed: duration,
            });
        }
        Ok(Timed { value, duration })
    }

    pub fn allocate(
        &mut self,
        domain: &str,
        nodetype: &str,
        host_id: &str,
        clock: VirtualTime,
    ) -> Result<Timed<NodeHandle>, InfraError> {
        let state = self.domain_mut(domain)?;
        let host = state
            .inventory
            .host(host_id)
            .ok_or_else(|| InfraError::UnknownHost {
                domain: domain.to_string(),
                host: host_id.to_string(),
            })?;
        if !host.supported_nodetypes.contains(nodetype) {
            return Err(InfraError::UnsupportedNodeType {
                host: host_id.to_string(),
                nodetype: nodetype.to_string(),
            });
        }
        if host.free_slots() == 0 {
            return Err(InfraError::CapacityExhausted {
                domain: domain.to_string(),
                host: host_id.to_string(),
            });
        }
        let timed = self.fault_or(FaultTarget::Allocate, domain, ())?;

        let handle_id = format!("h{:06}", self.next_handle);
        self.next_handle += 1;
        let state = self.domain_mut(domain)?;
        let n = state.next_address;
        state.next_address += 1;
        let address = format!("10.{}.{}.{}", state.index % 256, n / 250, n % 250 + 1);
        if let Some(host) = state.inventory.host_mut(host_id) {
            host.allocated += 1;
        }
        let handle = NodeHandle {
            handle_id: handle_id.clone(),
            domain: domain.to_string(),
            host_id: host_id.to_string(),
            nodetype: nodetype.to_string(),
            address,
        };
        self.handles.insert(
            handle_id,
            LiveHandle {
                handle: handle.clone(),
                allocated_at: clock,
                osimage: None,
                login: None,
                steps: Vec::new(),
            },
        );
        Ok(Timed {
            value: handle,
            duration: timed.duration,
        })
    }

    pub fn install_os(
        &mut self,
        handle_id: &str,
        osimage: &str,
        osaccount: Option<&str>,
    ) -> Result<Timed<()>, InfraError> {
        let live = self
            .handles
            .get(handle_id)
            .ok_or_else(|| InfraError::UnknownHandle(handle_id.to_string()))?;
        let domain = live.handle.domain.clone();
        let host_id = live.handle.host_id.clone();
        let state = self.domain_mut(&domain)?;
        let kind = state.inventory.kind;
        let available = state
            .inventory
            .host(&host_id)
            .is_some_and(|h| h.available_osimages.contains(osimage));
        if !available {
            return Err(InfraError::UnknownImage {
                host: host_id,
                image: osimage.to_string(),
            });
        }
        let timed = self.fault_or(FaultTarget::InstallOs, &domain, ())?;
        if let Some(live) = self.handles.get_mut(handle_id) {
            live.osimage = Some(osimage.to_string());
            // Only testbed nodes are reached through a per-user account.
            live.login = match kind {
                DomainKind::Testbed => Some(osaccount.unwrap_or("root").to_string()),
                _ => None,
            };
        }
        Ok(timed)
    }

    pub fn run_step(
        &mut self,
        handle_id: &str,
        step: &StepDescriptor,
    ) -> Result<Timed<StepResult>, InfraError> {
        let live = self
            .handles
            .get(handle_id)
            .ok_or_else(|| InfraError::UnknownHandle(handle_id.to_string()))?;
        if live.osimage.is_none() {
            return Err(InfraError::OsNotInstalled {
                handle: handle_id.to_string(),
                step: step.name.clone(),
            });
        }
        let domain = live.handle.domain.clone();
        let timed = self.fault_or(FaultTarget::RunStep, &domain, ())?;
        let result = StepResult {
            step: step.name.clone(),
            duration: timed.duration,
        };
        if let Some(live) = self.handles.get_mut(handle_id) {
            live.steps.push(result.clone());
        }
        Ok(Timed {
            value: result,
            duration: timed.duration,
        })
    }

    pub fn release(&mut self, handle_id: &str) -> Result<(), InfraError> {
        let live = self
            .handles
            .remove(handle_id)
            .ok_or_else(|| InfraError::UnknownHandle(handle_id.to_string()))?;
        let state = self.domain_mut(&live.handle.domain)?;
        if let Some(host) = state.inventory.host_mut(&live.handle.host_id) {
            host.allocated -= 1;
        }
        Ok(())
    }

    /// When a live handle was allocated, and the login account recorded for it.
    pub fn handle_info(&self, handle_id: &str) -> Option<(VirtualTime, Option<&str>)> {
        self.handles
            .get(handle_id)
            .map(|h| (h.allocated_at, h.login.as_deref()))
    }

    /// Capacity bookkeeping check: every host within capacity, and its
    /// allocated count equal to its baseline plus its live handles.
    pub fn audit(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let mut live: BTreeMap<(&str, &str), u32> = BTreeMap::new();
        for h in self.handles.values() {
            *live
                .entry((h.handle.domain.as_str(), h.handle.host_id.as_str()))
                .or_default() += 1;
        }
        for (name, state) in &self.domains {
            for host in &state.inventory.hosts {
                if host.allocated > host.capacity_slots {
                    problems.push(format!(
                        "{name}/{}: {} allocated exceeds {} slots",
                        host.host_id, host.allocated, host.capacity_slots
                    ));
                }
                let expected = state.baseline.get(&host.host_id).copied().unwrap_or(0)
                    + live.get(&(name.as_str(), host.host_id.as_str())).copied().unwrap_or(0);
                if host.allocated != expected {
                    problems.push(format!(
                        "{name}/{}: allocated {} but {} accounted for",
                        host.host_id, host.allocated, expected
                    ));
                }
            }
        }
        problems
    }
}
