//! Acceptance criteria, one line of output each. Exits non-zero if any fails.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clusterslice::descriptor::{
    parse_slice_request, validate, CompatibilityMatrix, DeploymentStrategy, SliceRequest,
};
use clusterslice::engine::{
    overlapping_cluster_tasks, slice_status, CampaignReport, Engine, EngineError, EventKind, EventRecord,
    SliceStatus, WorldState,
};
use clusterslice::fixtures::{DEMO_DOMAINS, LIQO_SLICE};
use clusterslice::infra::{load_registry, DomainInventory, DomainKind, FaultSpec, FaultTarget, HostRecord};
use clusterslice::lifecycle::{ClusterPhase, NodeState, SlicePhase};
use clusterslice::planner::{embed, TaskKind};
use clusterslice::store::{read_log, PersistentLog};
use clusterslice_cli::{run, DryRun};

const LIQO: &str = "swn/liqo";

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:?}, limit {limit:?}"))
}

fn fixture_path(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn liqo() -> SliceRequest {
    parse_slice_request(LIQO_SLICE).unwrap()
}

fn demo_engine(seed: u64) -> Engine {
    let mut e = Engine::with_seed(seed);
    for inv in load_registry(DEMO_DOMAINS).unwrap() {
        e.register_domain(inv).unwrap();
    }
    e
}

fn golden_descriptor() -> Check {
    let start = Instant::now();
    let req = parse_slice_request(LIQO_SLICE).map_err(|e| e.to_string())?;
    let domains: BTreeSet<String> = load_registry(DEMO_DOMAINS)
        .unwrap()
        .into_iter()
        .map(|d| d.domain)
        .collect();
    let report = validate(&req, &CompatibilityMatrix::default(), &domains);
    let errors = report.errors().count();
    ensure(errors == 0, || format!("{errors} validation errors:\n{report}"))?;

    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().to_str().unwrap();
    let r = run([
        "clusterslice",
        "--state-dir",
        state,
        "apply",
        "-f",
        &fixture_path("liqo.yaml"),
        "--domains",
        &fixture_path("demo-domains.yaml"),
        "--dry-run",
        "-o",
        "json",
    ]);
    ensure(r.code == 0, || format!("dry run exited {}: {}", r.code, r.stderr))?;
    let dry: DryRun = serde_json::from_str(&r.stdout).map_err(|e| e.to_string())?;
    let count = |k| dry.tasks.iter().filter(|t| t.kind == k).count();
    let counts = [
        count(TaskKind::Allocate),
        count(TaskKind::InstallOs),
        count(TaskKind::SetupMaster),
        count(TaskKind::JoinWorker),
        count(TaskKind::InstallFabric),
        count(TaskKind::DeployApp),
    ];
    ensure(dry.placements.len() == 6, || format!("{} placements", dry.placements.len()))?;
    ensure(dry.tasks.len() == 24, || format!("{} tasks", dry.tasks.len()))?;
    ensure(counts == [6, 6, 3, 3, 3, 3], || format!("task counts {counts:?}"))?;
    within(start, Duration::from_secs(1))?;
    Ok(format!("6 placements, 24 tasks {counts:?}"))
}

fn finished_seq(records: &[EventRecord], label: &str) -> Option<u64> {
    records.iter().find_map(|r| match &r.kind {
        EventKind::TaskFinished { label: l, .. } if l == label => Some(r.seq),
        _ => None,
    })
}

fn end_to_end() -> Check {
    let start = Instant::now();
    let mut e = demo_engine(42);
    e.apply(liqo()).map_err(|e| e.to_string())?;
    e.run_until_settled(10_000).map_err(|e| e.to_string())?;
    let st = e.status(LIQO).map_err(|e| e.to_string())?;
    ensure(st.phase == SlicePhase::Ready, || format!("slice {}", st.phase))?;
    ensure(
        st.nodes.len() == 6 && st.nodes.iter().all(|n| n.state == NodeState::Ready),
        || "not all 6 nodes Ready".into(),
    )?;
    ensure(
        st.clusters.len() == 3 && st.clusters.iter().all(|c| c.phase == ClusterPhase::Ready),
        || "not all 3 clusters Ready".into(),
    )?;
    ensure(st.peering == ["liqo↔liqo1", "liqo↔liqo2"], || format!("peering {:?}", st.peering))?;
    let master = finished_seq(e.records(), "DeployApp liqo/liqo-master").ok_or("master never finished")?;
    for peer in ["DeployApp liqo1/liqo-peer", "DeployApp liqo2/liqo-peer"] {
        let p = finished_seq(e.records(), peer).ok_or_else(|| format!("{peer} never finished"))?;
        ensure(master < p, || format!("{peer} finished at #{p}, before master #{master}"))?;
    }
    within(start, Duration::from_secs(1))?;
    Ok(format!("Ready at {} with peering {}", st.clock, st.peering.join(", ")))
}

fn campaign() -> Check {
    let start = Instant::now();
    let r = run([
        "clusterslice",
        "--seed",
        "42",
        "campaign",
        "-f",
        &fixture_path("liqo.yaml"),
        "--domains",
        &fixture_path("demo-domains.yaml"),
        "--count",
        "137",
        "--worker-mix",
        "1,2,3,4,5",
        "-o",
        "json",
    ]);
    let report: CampaignReport =
        serde_json::from_str(&r.stdout).map_err(|e| format!("exit {}: {e}: {}", r.code, r.stderr))?;
    ensure(r.code == 0, || format!("exit {}: {}", r.code, r.stderr))?;
    ensure(report.clusters_deployed >= 410, || format!("{} clusters", report.clusters_deployed))?;
    ensure(report.nodes_deployed >= 1530, || format!("{} nodes", report.nodes_deployed))?;
    ensure(report.slices_failed == 0 && report.clusters_failed == 0, || {
        format!("{} slices failed", report.slices_failed)
    })?;
    ensure(report.retries == 0, || format!("{} retries", report.retries))?;
    ensure(report.audit_violations.is_empty(), || report.audit_violations.join("; "))?;
    within(start, Duration::from_secs(60))?;
    Ok(format!(
        "{} clusters, {} nodes, 0 failures, 0 retries in {:.1?}",
        report.clusters_deployed,
        report.nodes_deployed,
        start.elapsed()
    ))
}

/// Smallest possible maximum host load, by enumerating every assignment of
/// `nodes` nodes to hosts as a base-`hosts.len()` number.
fn brute_force_min_max(hosts: &[HostRecord], nodes: u32) -> Option<u32> {
    let h = hosts.len() as u64;
    let total = h.pow(nodes);
    let mut best: Option<u32> = None;
    for mut code in 0..total {
        let mut load: Vec<u32> = hosts.iter().map(|x| x.allocated).collect();
        for _ in 0..nodes {
            load[(code % h) as usize] += 1;
            code /= h;
        }
        if load.iter().zip(hosts).all(|(l, x)| *l <= x.capacity_slots) {
            let m = load.iter().copied().max().unwrap_or(0);
            best = Some(best.map_or(m, |b| b.min(m)));
        }
    }
    best
}

fn embedding_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let template = liqo().clusters[0].clone();
    let instances = 1000;
    let (mut feasible, mut infeasible, mut i) = (0, 0, 0);
    while feasible < instances {
        i += 1;
        let hosts: Vec<HostRecord> = (0..rng.gen_range(1..=4))
            .map(|h| {
                let cap = rng.gen_range(1..=5);
                HostRecord {
                    host_id: format!("h{h}"),
                    capacity_slots: cap,
                    allocated: rng.gen_range(0..=cap),
                    supported_nodetypes: ["vm".to_string()].into(),
                    available_osimages: ["ubuntu-22-clean".to_string()].into(),
                }
            })
            .collect();
        let nodes = rng.gen_range(1..=6u32);
        let mut cluster = template.clone();
        cluster.masters.count = rng.gen_range(1..=nodes);
        cluster.workers.count = nodes - cluster.masters.count;
        let inv = DomainInventory {
            domain: "d".into(),
            kind: DomainKind::Cloud,
            hosts: hosts.clone(),
        };
        let oracle = brute_force_min_max(&hosts, nodes);
        let got = match embed(&cluster, &inv, DeploymentStrategy::Balanced) {
            Ok(placed) => {
                feasible += 1;
                let mut load: Vec<u32> = hosts.iter().map(|h| h.allocated).collect();
                for p in &placed {
                    let idx = hosts.iter().position(|h| h.host_id == p.host_id).unwrap();
                    load[idx] += 1;
                }
                load.into_iter().max()
            }
            Err(_) => {
                infeasible += 1;
                None
            }
        };
        ensure(got == oracle, || {
            format!("instance {i}: embed max {got:?}, optimum {oracle:?}, hosts {hosts:?}, nodes {nodes}")
        })?;
    }
    Ok(format!("{instances} feasible instances agree; {infeasible} infeasible ones rejected by both"))
}

/// Checks that must hold after any run, faulty or not. Host allocations are
/// only compared once settled: infra charges a slot when an allocation
/// starts, the world when it completes.
fn audit_run(e: &Engine, settled: bool) -> Result<(), String> {
    let problems = e.infra().audit();
    ensure(problems.is_empty(), || format!("capacity audit: {}", problems.join("; ")))?;
    let folded = WorldState::replay(e.records()).map_err(|f| format!("illegal transition: {f}"))?;
    ensure(folded == *e.world(), || "folded world differs from live world".into())?;
    for s in folded.slices.values() {
        ensure(s.twins.iter().all(|t| t.is_consistent()), || "inconsistent twin".into())?;
    }
    for inv in e.infra().inventories().filter(|_| settled) {
        let world = &folded.domains[&inv.domain];
        ensure(world.hosts == inv.hosts, || format!("{} allocations disagree", inv.domain))?;
    }
    Ok(())
}

fn fault_recovery() -> Check {
    for target in FaultTarget::ALL {
        for domain in ["swntestbed", "lefteris", "cloudlab"] {
            let mut e = demo_engine(42);
            e.arm_fault(FaultSpec::nth(target, domain, 1)).unwrap();
            e.apply(liqo()).map_err(|e| e.to_string())?;
            e.run_until_settled(10_000).map_err(|err| format!("{target} {domain}: {err}"))?;
            let s = &e.world().slices[LIQO];
            ensure(s.phase == SlicePhase::Ready, || format!("{target} in {domain}: {}", s.phase))?;
            ensure(s.retries == 1, || format!("{target} in {domain}: {} retries", s.retries))?;
            audit_run(&e, true)?;
        }
    }

    let mut totals = Vec::new();
    for p in [0.05, 0.2] {
        let (mut ready, mut retries, mut deadlocks) = (0, 0, 0);
        for seed in 0..200 {
            let mut e = demo_engine(seed);
            for target in FaultTarget::ALL {
                for domain in ["swntestbed", "lefteris", "cloudlab"] {
                    e.arm_fault(FaultSpec::probability(target, domain, p)).unwrap();
                }
            }
            e.apply(liqo()).map_err(|e| e.to_string())?;
            match e.run_until_settled(10_000) {
                Ok(()) => {}
                Err(EngineError::Deadlock { .. }) => deadlocks += 1,
                Err(err) => return Err(format!("p={p} seed {seed}: {err}")),
            }
            audit_run(&e, true).map_err(|m| format!("p={p} seed {seed}: {m}"))?;
            let s = &e.world().slices[LIQO];
            retries += s.retries;
            if s.phase == SlicePhase::Ready {
                ready += 1;
            }
            e.delete(LIQO).map_err(|e| e.to_string())?;
            audit_run(&e, true).map_err(|m| format!("p={p} seed {seed} after delete: {m}"))?;
            ensure(e.infra().inventories().all(|d| d.hosts.iter().all(|h| h.allocated == 0)), || {
                format!("p={p} seed {seed}: capacity leaked after delete")
            })?;
        }
        ensure(deadlocks == 0, || format!("p={p}: {deadlocks} deadlocks"))?;
        totals.push(format!("p={p}: {ready}/200 Ready, {retries} retries"));
    }
    Ok(format!("nth=1 x 9 recovered with one retry; {}", totals.join("; ")))
}

fn parallelism() -> Check {
    let mut e = demo_engine(42);
    let mut req = liqo();
    req.clusters.truncate(2);
    for c in &mut req.clusters {
        c.applications.clear();
    }
    e.apply(req).map_err(|e| e.to_string())?;
    e.run_until_settled(10_000).map_err(|e| e.to_string())?;
    let (a, b) = overlapping_cluster_tasks(e.records(), LIQO).ok_or("no overlapping tasks")?;

    for seed in 0..100 {
        let mut e = demo_engine(seed);
        e.apply(liqo()).map_err(|e| e.to_string())?;
        e.run_until_settled(10_000).map_err(|e| e.to_string())?;
        let master = finished_seq(e.records(), "DeployApp liqo/liqo-master").ok_or("master never finished")?;
        for r in e.records() {
            if let EventKind::TaskStarted { label, .. } = &r.kind {
                if label.ends_with("/liqo-peer") {
                    ensure(r.seq > master, || format!("seed {seed}: {label} started before master finished"))?;
                }
            }
        }
    }
    Ok(format!("'{a}' overlaps '{b}'; peers wait for master over 100 seeds"))
}

fn logged_run(path: &Path, seed: u64) -> Result<(Engine, Vec<(usize, SliceStatus)>), String> {
    let mut e = demo_engine(seed);
    e.arm_fault(FaultSpec::probability(FaultTarget::RunStep, "cloudlab", 0.2)).unwrap();
    let mut log = PersistentLog::open(path).map_err(|e| e.to_string())?;
    for r in e.records() {
        log.append(r).map_err(|e| e.to_string())?;
    }
    e.set_sink(Box::new(log));
    e.apply(liqo()).map_err(|e| e.to_string())?;
    let mut views = vec![(e.records().len(), e.status(LIQO).unwrap())];
    while e.step().map_err(|e| e.to_string())?.is_some() {
        views.push((e.records().len(), e.status(LIQO).unwrap()));
    }
    Ok((e, views))
}

fn determinism_and_persistence() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.log"), dir.path().join("b.log"));
    let (original, views) = logged_run(&a, 9)?;
    logged_run(&b, 9)?;
    let bytes = fs::read(&a).unwrap();
    ensure(bytes == fs::read(&b).unwrap(), || "logs differ".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let line_ends: Vec<usize> = bytes
        .iter()
        .enumerate()
        .filter(|(_, b)| **b == b'\n')
        .map(|(i, _)| i + 1)
        .collect();
    // line_ends[0] closes the header; line_ends[n] closes record n
    let mut cuts = BTreeSet::new();
    while cuts.len() < 10 {
        cuts.insert(rng.gen_range(0..views.len()));
    }
    let cut_path = dir.path().join("cut.log");
    for &i in &cuts {
        let (n, expected) = &views[i];
        fs::write(&cut_path, &bytes[..line_ends[*n]]).unwrap();
        let log = PersistentLog::open(&cut_path).map_err(|e| e.to_string())?;
        let mut resumed = Engine::resume(log.records()).map_err(|e| format!("cut {n}: {e}"))?;
        let got = resumed.status(LIQO).map_err(|e| e.to_string())?;
        ensure(got == *expected, || format!("status after cut at record {n} differs"))?;
        let from_disk = slice_status(log.world(), LIQO);
        ensure(from_disk.as_ref() == Some(expected), || format!("stored world at {n} differs"))?;
        while resumed.step().map_err(|e| e.to_string())?.is_some() {}
        ensure(resumed.records() == original.records(), || format!("continuing from {n} diverged"))?;
        let _ = fs::remove_file(format!("{}.snapshot", cut_path.display()));
    }

    for _ in 0..50 {
        let offset = rng.gen_range(0..=bytes.len());
        fs::write(&cut_path, &bytes[..offset]).unwrap();
        let on_disk = read_log(&cut_path).map_err(|e| format!("offset {offset}: {e}"))?;
        let log = PersistentLog::open(&cut_path).map_err(|e| format!("offset {offset}: {e}"))?;
        let n = log.records().len();
        ensure(on_disk.records.len() == n, || format!("offset {offset}: reader and writer disagree"))?;
        ensure(log.records() == &original.records()[..n], || format!("offset {offset}: not a prefix"))?;
        let folded = WorldState::replay(log.records()).map_err(|e| format!("offset {offset}: {e}"))?;
        ensure(folded == *log.world(), || format!("offset {offset}: world mismatch"))?;
        let resumed = Engine::resume(log.records()).map_err(|e| format!("offset {offset}: {e}"))?;
        audit_run(&resumed, false).map_err(|m| format!("offset {offset}: {m}"))?;
    }
    Ok(format!(
        "{} byte logs identical; 10 cut points and 50 truncations replay cleanly",
        bytes.len()
    ))
}

type Criterion = (&'static str, fn() -> Check);

fn main() {
    let criteria: [Criterion; 7] = [
        ("golden descriptor", golden_descriptor),
        ("end-to-end demo", end_to_end),
        ("reliability campaign", campaign),
        ("balanced embedding oracle", embedding_oracle),
        ("fault recovery", fault_recovery),
        ("parallelism witness", parallelism),
        ("determinism and persistence", determinism_and_persistence),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {}. {name} ({took:.2?}): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {}. {name} ({took:.2?}): {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
