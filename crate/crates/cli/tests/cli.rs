use std::fs;
use std::path::{Path, PathBuf};

use clusterslice::engine::{CampaignReport, EventRecord, NodeRow, SliceStatus, SliceSummary};
use clusterslice::lifecycle::NodeState;
use clusterslice::planner::TaskKind;
use clusterslice::store::{self, StateDir};
use clusterslice_cli::{run, CommandResult, DryRun};
use tempfile::TempDir;

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

struct World {
    dir: TempDir,
}

impl World {
    fn new() -> Self {
        World {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn state(&self) -> PathBuf {
        self.dir.path().join("state")
    }

    fn cs(&self, args: &[&str]) -> CommandResult {
        let state = self.state();
        let mut full = vec!["clusterslice", "--state-dir", state.to_str().unwrap()];
        full.extend_from_slice(args);
        run(full)
    }

    fn ok(&self, args: &[&str]) -> String {
        let r = self.cs(args);
        assert_eq!(r.code, 0, "{args:?}\nstdout:\n{}\nstderr:\n{}", r.stdout, r.stderr);
        r.stdout
    }

    fn with_domains() -> Self {
        let w = World::new();
        w.ok(&["domains", "register", "-f", &fixture("demo-domains.yaml")]);
        w
    }

    fn write(&self, name: &str, text: &str) -> String {
        let p = self.dir.path().join(name);
        fs::write(&p, text).unwrap();
        p.to_string_lossy().into_owned()
    }
}

fn data_rows(table: &str) -> Vec<&str> {
    table.lines().skip(1).collect()
}

#[test]
fn dry_run_reports_placements_and_tasks() {
    let w = World::with_domains();
    let out = w.ok(&["apply", "-f", &fixture("liqo.yaml"), "--dry-run"]);
    assert!(out.contains("valid: true"));
    assert!(out.contains("PLACEMENTS (6)"));
    assert!(out.contains("TASKS (24)"));
    assert!(out.contains("CRITICAL PATH"));

    let json = w.ok(&["apply", "-f", &fixture("liqo.yaml"), "--dry-run", "-o", "json"]);
    let dry: DryRun = serde_json::from_str(&json).unwrap();
    assert!(dry.valid);
    assert_eq!(dry.placements.len(), 6);
    assert_eq!(dry.tasks.len(), 24);
    let count = |k| dry.tasks.iter().filter(|t| t.kind == k).count();
    assert_eq!(count(TaskKind::Allocate), 6);
    assert_eq!(count(TaskKind::InstallOs), 6);
    assert_eq!(count(TaskKind::SetupMaster), 3);
    assert_eq!(count(TaskKind::JoinWorker), 3);
    assert_eq!(count(TaskKind::InstallFabric), 3);
    assert_eq!(count(TaskKind::DeployApp), 3);

    // nothing was applied
    assert_eq!(data_rows(&w.ok(&["get", "slices"])).len(), 0);
}

#[test]
fn dry_run_without_domains_is_invalid() {
    let w = World::new();
    let r = w.cs(&["apply", "-f", &fixture("liqo.yaml"), "--dry-run"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains(".spec.clusters[0].deploymentdomain"));
    // and leaves no state behind
    assert!(!store::log_path(&w.state()).exists());
}

#[test]
fn apply_prints_the_slice_id() {
    let w = World::with_domains();
    assert_eq!(w.ok(&["apply", "-f", &fixture("liqo.yaml")]), "slice swn/liqo created\n");
    let again = w.cs(&["apply", "-f", &fixture("liqo.yaml")]);
    assert_eq!(again.code, 1);
    assert!(again.stderr.contains("already exists"));
}

#[test]
fn broken_request_reports_its_locator() {
    let w = World::with_domains();
    let text = fs::read_to_string(fixture("liqo.yaml")).unwrap();
    let start = text.find("  clusters:").unwrap();
    let broken = w.write("broken.yaml", &format!("{}  clusters: []\n", &text[..start]));
    let r = w.cs(&["apply", "-f", &broken]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains(".spec.clusters"), "{}", r.stderr);
    assert!(r.stdout.is_empty());

    let r = w.cs(&["apply", "-f", "/nonexistent.yaml"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("cannot read"));
}

#[test]
fn empty_world_lists_headers_only() {
    let w = World::new();
    assert_eq!(
        w.ok(&["get", "slices"]),
        "NAME   NAMESPACE   PHASE   CLUSTERS   READY   AGE(virtual)\n"
    );
    assert_eq!(data_rows(&w.ok(&["get", "resources"])).len(), 0);
    assert_eq!(w.ok(&["get", "clusters", "-o", "json"]).trim(), "[]");
}

#[test]
fn wait_then_get_resources() {
    let w = World::with_domains();
    let out = w.ok(&["apply", "-f", &fixture("liqo.yaml"), "--wait"]);
    assert!(out.contains("Phase:     Ready"));
    let table = w.ok(&["get", "resources"]);
    let header = table.lines().next().unwrap();
    assert_eq!(
        header.split_whitespace().collect::<Vec<_>>(),
        ["NAME", "SLICE", "CLUSTER", "ROLE", "DOMAIN", "HOST", "STATE", "ATTEMPTS", "AGE(virtual)"]
    );
    let rows = data_rows(&table);
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.split_whitespace().nth(6) == Some("Ready")));

    let json = w.ok(&["get", "resources", "-o", "json"]);
    let nodes: Vec<NodeRow> = serde_json::from_str(&json).unwrap();
    assert!(nodes.iter().all(|n| n.state == NodeState::Ready));

    // namespace filter
    assert_eq!(data_rows(&w.ok(&["get", "resources", "-n", "other"])).len(), 0);
    assert_eq!(data_rows(&w.ok(&["get", "resources", "-n", "swn"])).len(), 6);
}

#[test]
fn clock_steps_drive_the_poll_flow() {
    let w = World::with_domains();
    w.ok(&["apply", "-f", &fixture("liqo.yaml")]);
    let mid = w.ok(&["get", "clusters", "--clock-step", "5"]);
    let rows = data_rows(&mid);
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| !r.contains("Ready")), "{mid}");

    // polling without a step observes but does not move time
    assert_eq!(w.ok(&["get", "clusters"]), mid);

    let mut ready = false;
    for _ in 0..50 {
        let out = w.ok(&["get", "slices", "--clock-step", "10"]);
        if out.contains("Ready") {
            ready = true;
            break;
        }
    }
    assert!(ready);
}

#[test]
fn describe_shows_peering_and_artifacts() {
    let w = World::with_domains();
    w.ok(&["apply", "-f", &fixture("liqo.yaml"), "--wait"]);
    let out = w.ok(&["describe", "swn/liqo"]);
    let peering: Vec<&str> = out
        .lines()
        .skip_while(|l| *l != "Peering:")
        .skip(1)
        .take_while(|l| l.starts_with("  "))
        .map(str::trim)
        .collect();
    assert_eq!(peering, ["liqo↔liqo1", "liqo↔liqo2"]);
    assert!(out.contains("liqo1-peer-join.sh → liqo/liqo-master"));
    // bare names resolve too
    assert_eq!(w.ok(&["describe", "liqo"]), out);

    let r = w.cs(&["describe", "swn/nothing"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("not found"));
}

#[test]
fn describe_mid_run_tails_the_log() {
    let w = World::with_domains();
    w.ok(&["apply", "-f", &fixture("liqo.yaml")]);
    w.ok(&["get", "slices", "--clock-step", "30"]);
    let out = w.ok(&["describe", "swn/liqo"]);
    let shown: Vec<&str> = out
        .lines()
        .skip_while(|l| !l.starts_with("Events"))
        .skip(1)
        .map(|l| l.strip_prefix("  ").unwrap())
        .collect();

    let log = store::read_log(&store::log_path(&w.state())).unwrap().records;
    let mine: Vec<&EventRecord> = log.iter().filter(|r| r.subject.slice == "swn/liqo").collect();
    let expected: Vec<String> = mine[mine.len() - 20..].iter().map(|r| r.to_string()).collect();
    assert_eq!(shown, expected);
}

#[test]
fn structured_output_round_trips() {
    let w = World::with_domains();
    w.ok(&["apply", "-f", &fixture("liqo.yaml"), "--wait"]);
    let json = w.ok(&["describe", "swn/liqo", "-o", "json"]);
    let status: SliceStatus = serde_json::from_str(&json).unwrap();
    assert_eq!(serde_json::to_string_pretty(&status).unwrap() + "\n", json);

    let json = w.ok(&["get", "slices", "-o", "json"]);
    let slices: Vec<SliceSummary> = serde_json::from_str(&json).unwrap();
    assert_eq!(serde_json::to_string_pretty(&slices).unwrap() + "\n", json);

    let json = w.ok(&["get", "resources", "-o", "json"]);
    let nodes: Vec<NodeRow> = serde_json::from_str(&json).unwrap();
    assert_eq!(serde_json::to_string_pretty(&nodes).unwrap() + "\n", json);
}

#[test]
fn delete_then_not_found() {
    let w = World::with_domains();
    w.ok(&["apply", "-f", &fixture("liqo.yaml"), "--wait"]);
    assert_eq!(w.ok(&["delete", "swn/liqo"]), "slice swn/liqo deleted\n");
    assert_eq!(w.cs(&["delete", "swn/liqo"]).code, 1);
    assert_eq!(data_rows(&w.ok(&["get", "resources"])).len(), 0);
    let domains = w.ok(&["domains", "list"]);
    let cloudlab: Vec<&str> = domains.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(cloudlab, ["cloudlab", "testbed", "12", "12/12"]);
}

#[test]
fn duplicate_domain_registration_fails() {
    let w = World::with_domains();
    let r = w.cs(&["domains", "register", "-f", &fixture("demo-domains.yaml")]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("already registered"));
}

#[test]
fn a_held_lock_blocks_writers_but_not_readers() {
    let w = World::with_domains();
    let _held = StateDir::lock(&w.state()).unwrap();
    let r = w.cs(&["apply", "-f", &fixture("liqo.yaml")]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("locked"), "{}", r.stderr);
    w.ok(&["get", "slices"]);
}

#[test]
fn torn_tail_is_repaired_with_a_warning() {
    let w = World::with_domains();
    w.ok(&["apply", "-f", &fixture("liqo.yaml")]);
    let path = store::log_path(&w.state());
    let before = fs::read(&path).unwrap();
    let mut torn = before.clone();
    torn.extend_from_slice(b"{\"seq\":99,\"at\":");
    fs::write(&path, &torn).unwrap();

    // readers ignore the torn line
    w.ok(&["get", "slices"]);
    let r = w.cs(&["get", "slices", "--clock-step", "1"]);
    assert_eq!(r.code, 0);
    assert!(r.stderr.contains("torn"));
    let after = fs::read(&path).unwrap();
    assert_eq!(&after[..before.len()], &before[..]);
}

#[test]
fn same_commands_same_log_bytes() {
    let logs: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let w = World::with_domains();
            w.ok(&["apply", "-f", &fixture("liqo.yaml")]);
            w.ok(&["get", "slices", "--clock-step", "20"]);
            w.ok(&["get", "slices", "--clock-step", "20"]);
            w.ok(&["delete", "swn/liqo"]);
            fs::read(store::log_path(&w.state())).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn seed_is_fixed_at_creation() {
    let w = World::new();
    let r = w.cs(&["--seed", "7", "domains", "register", "-f", &fixture("demo-domains.yaml")]);
    assert_eq!(r.code, 0);
    assert!(r.stderr.is_empty());
    let r = w.cs(&["--seed", "8", "apply", "-f", &fixture("liqo.yaml")]);
    assert_eq!(r.code, 0);
    assert!(r.stderr.contains("ignoring --seed 8"));
    assert_eq!(store::replay(&store::log_path(&w.state())).unwrap().seed, 7);
}

#[test]
fn campaign_totals_and_exit_codes() {
    let w = World::with_domains();
    let liqo = fixture("liqo.yaml");

    let zero = w.cs(&["campaign", "-f", &liqo, "--count", "0", "-o", "json"]);
    assert_eq!(zero.code, 0);
    let report: CampaignReport = serde_json::from_str(&zero.stdout).unwrap();
    assert_eq!(report, CampaignReport::default());

    let r = w.cs(&["campaign", "-f", &liqo, "--count", "4", "--worker-mix", "1,2", "-o", "json"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let report: CampaignReport = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(report.clusters_deployed, 12);
    // 12 masters and workers alternating 1,2
    assert_eq!(report.nodes_deployed, 12 + 18);

    let text = w.ok(&["campaign", "-f", &liqo, "--count", "2"]);
    assert!(text.contains("clusters deployed   6"), "{text}");

    // campaigns run in a scratch world
    assert_eq!(data_rows(&w.ok(&["get", "slices"])).len(), 0);

    // faults armed: failures are tolerated, the audit must still be clean
    let r = w.cs(&[
        "campaign", "-f", &liqo, "--count", "10", "--faults", "allocate:cloudlab:0.1", "-o", "json",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let report: CampaignReport = serde_json::from_str(&r.stdout).unwrap();
    assert!(report.audit_violations.is_empty());

    // a request that can never succeed, with no faults to blame
    let text = fs::read_to_string(&liqo).unwrap();
    let bad = w.write(
        "mismatch.yaml",
        &text.replacen("sharefile: \"liqo2-peer-join.sh\"", "sharefile: \"liqo1-peer-join.sh\"", 1),
    );
    assert_ne!(fs::read_to_string(&bad).unwrap(), text);
    let r = w.cs(&["campaign", "-f", &bad, "--count", "1"]);
    assert_eq!(r.code, 2, "{}\n{}", r.stdout, r.stderr);
    assert!(r.stderr.contains("failed without faults"));
}

#[test]
fn fault_profiles_parse_from_files_and_inline() {
    let w = World::new();
    let file = w.write(
        "faults.yaml",
        "- target: install_os\n  domain: lefteris\n  fire_on_nth: 1\n- target: run_step\n  domain: cloudlab\n  probability: 0.5\n",
    );
    let from_file = clusterslice_cli::parse_fault_profile(&file).unwrap();
    let inline =
        clusterslice_cli::parse_fault_profile("install_os:lefteris:nth=1, run_step:cloudlab:0.5").unwrap();
    assert_eq!(from_file, inline);
    assert!(clusterslice_cli::parse_fault_profile("reboot:cloudlab:0.5").is_err());
    assert!(clusterslice_cli::parse_fault_profile("allocate:cloudlab:1.5").is_err());
    assert!(clusterslice_cli::parse_fault_profile("allocate:cloudlab").is_err());
}

#[test]
fn campaign_without_domains_is_a_user_error() {
    let w = World::new();
    let r = w.cs(&["campaign", "-f", &fixture("liqo.yaml"), "--count", "1"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("no domains"));
}

#[test]
fn argument_errors_and_help() {
    let w = World::new();
    assert_eq!(w.cs(&["frobnicate"]).code, 1);
    assert_eq!(w.cs(&["get", "pods"]).code, 1);
    assert_eq!(w.cs(&["apply"]).code, 1);
    let help = w.cs(&["--help"]);
    assert_eq!(help.code, 0);
    assert!(help.stdout.contains("apply"));
}
