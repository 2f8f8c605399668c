//! Command-line front end for the clusterslice engine.
//!
//! Each invocation reopens the state directory, resumes the engine from its
//! event log, runs one command and exits. Nothing runs in the background, so
//! virtual time only moves when a command moves it (`--clock-step`, `--wait`).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use clusterslice::appcatalog::AppCatalog;
use clusterslice::descriptor::{parse_slice_request, Finding, SliceRequest};
use clusterslice::engine::{
    list_clusters, list_resources, list_slices, run_campaign, slice_status, CampaignConfig, Engine,
    EngineConfig, EngineError, WorldState,
};
use clusterslice::infra::{load_fault_profile, load_registry, DomainInventory, FaultSpec, FaultTarget};
use clusterslice::lifecycle::SlicePhase;
use clusterslice::planner::{critical_path, estimate_durations, render_plan, Placement, Task};
use clusterslice::store::{self, PersistentLog, StateDir};

mod render;

pub use render::{describe_text, table};

pub const STATE_DIR_ENV: &str = "CLUSTERSLICE_STATE_DIR";
pub const DEFAULT_SEED: u64 = 42;

/// Outcome of one invocation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommandResult {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl CommandResult {
    fn ok(stdout: String) -> Self {
        CommandResult {
            code: 0,
            stdout,
            stderr: String::new(),
        }
    }

    fn fail(code: i32, stderr: impl Into<String>) -> Self {
        let mut stderr = stderr.into();
        if !stderr.ends_with('\n') {
            stderr.push('\n');
        }
        CommandResult {
            code,
            stdout: String::new(),
            stderr,
        }
    }

    fn warn(mut self, warnings: &[String]) -> Self {
        let mut pre: String = warnings.iter().map(|w| format!("warning: {w}\n")).collect();
        pre.push_str(&self.stderr);
        self.stderr = pre;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum OutputFormat {
    #[default]
    Table,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "clusterslice", version, about = "Declarative multi-cluster slice orchestration")]
pub struct Cli {
    /// Directory holding the event log
    #[arg(long, global = true, env = STATE_DIR_ENV, default_value = ".clusterslice")]
    pub state_dir: PathBuf,
    /// Advance virtual time by this many units before running the command
    #[arg(long, global = true, default_value_t = 0)]
    pub clock_step: u64,
    /// World seed; only used when the state directory is new
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a slice from a request file
    Apply(ApplyArgs),
    /// List slices, clusters or compute resources
    Get(GetArgs),
    /// Show one slice in detail
    Describe(DescribeArgs),
    /// Tear a slice down and release its resources
    Delete(DescribeArgs),
    /// Manage deployment domains
    Domains {
        #[command(subcommand)]
        command: DomainsCommand,
    },
    /// Run repeated apply, settle and delete cycles in a scratch world
    Campaign(CampaignArgs),
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(short = 'f', long = "filename")]
    pub file: PathBuf,
    /// Validate and plan only
    #[arg(long)]
    pub dry_run: bool,
    /// Run until the slice settles and print its status
    #[arg(long)]
    pub wait: bool,
    /// Register domains from this file first (already known domains are skipped)
    #[arg(long)]
    pub domains: Option<PathBuf>,
    /// Virtual-time budget for --wait
    #[arg(long, default_value_t = 100_000)]
    pub max_time: u64,
    #[arg(short = 'o', long = "output", value_enum, default_value_t)]
    pub output: OutputFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GetKind {
    Slices,
    Clusters,
    Resources,
}

#[derive(Debug, Args)]
pub struct GetArgs {
    pub kind: GetKind,
    #[arg(short = 'n', long)]
    pub namespace: Option<String>,
    #[arg(short = 'o', long = "output", value_enum, default_value_t)]
    pub output: OutputFormat,
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    /// `namespace/name`, or a bare name
    pub slice: String,
    #[arg(short = 'n', long)]
    pub namespace: Option<String>,
    #[arg(short = 'o', long = "output", value_enum, default_value_t)]
    pub output: OutputFormat,
}

#[derive(Debug, Subcommand)]
pub enum DomainsCommand {
    /// Register every domain in a YAML stream
    Register {
        #[arg(short = 'f', long = "filename")]
        file: PathBuf,
    },
    /// List registered domains
    List {
        #[arg(short = 'o', long = "output", value_enum, default_value_t)]
        output: OutputFormat,
    },
}

#[derive(Debug, Args)]
pub struct CampaignArgs {
    #[arg(short = 'f', long = "filename")]
    pub file: PathBuf,
    #[arg(long)]
    pub count: usize,
    /// Fault profile: a YAML list of fault specs, or inline
    /// `target:domain:probability` / `target:domain:nth=N` entries separated by commas
    #[arg(long)]
    pub faults: Option<String>,
    /// Domains for the scratch world; defaults to those in the state directory
    #[arg(long)]
    pub domains: Option<PathBuf>,
    /// Add synthetic hosts when a cycle does not fit
    #[arg(long)]
    pub autoscale: bool,
    /// Worker counts assigned round-robin to successive clusters, e.g. 1,2,3
    #[arg(long, value_delimiter = ',')]
    pub worker_mix: Vec<u32>,
    #[arg(long, default_value_t = 100_000)]
    pub max_time: u64,
    #[arg(short = 'o', long = "output", value_enum, default_value_t)]
    pub output: OutputFormat,
}

/// Parse `args` (including the program name) and run the command.
pub fn run<I, T>(args: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                CommandResult::ok(text)
            } else {
                CommandResult::fail(code, text)
            }
        }
    }
}

pub fn execute(cli: Cli) -> CommandResult {
    let result = match &cli.command {
        Command::Apply(a) => cmd_apply(&cli, a),
        Command::Get(a) => cmd_get(&cli, a),
        Command::Describe(a) => cmd_describe(&cli, a),
        Command::Delete(a) => cmd_delete(&cli, a),
        Command::Domains { command } => cmd_domains(&cli, command),
        Command::Campaign(a) => cmd_campaign(&cli, a),
    };
    result.unwrap_or_else(|e| CommandResult::fail(1, e))
}

type CmdResult = Result<CommandResult, String>;

/// An engine resumed from the state directory.
struct Session {
    engine: Engine,
    warnings: Vec<String>,
    _dir: Option<StateDir>,
}

impl Session {
    /// Resume under the directory lock; new records go to the log.
    fn open(cli: &Cli) -> Result<Session, String> {
        let dir = StateDir::lock(&cli.state_dir).map_err(|e| e.to_string())?;
        let mut log = PersistentLog::open(&dir.log_path()).map_err(|e| e.to_string())?;
        let mut warnings = Vec::new();
        if log.dropped_tail() {
            warnings.push(format!("{}: discarded a torn final record", log.path().display()));
        }
        let mut engine = resume(cli, log.records(), &mut warnings)?;
        for r in engine.records_since(log.last_seq()) {
            log.append(r).map_err(|e| e.to_string())?;
        }
        engine.set_sink(Box::new(log));
        Session::finish(cli, engine, warnings, Some(dir))
    }

    /// Resume from whatever is on disk without taking the lock or writing.
    fn scratch(cli: &Cli) -> Result<Session, String> {
        let loaded = store::read_log(&store::log_path(&cli.state_dir)).map_err(|e| e.to_string())?;
        let mut warnings = Vec::new();
        let engine = resume(cli, &loaded.records, &mut warnings)?;
        Session::finish(cli, engine, warnings, None)
    }

    fn finish(
        cli: &Cli,
        mut engine: Engine,
        warnings: Vec<String>,
        dir: Option<StateDir>,
    ) -> Result<Session, String> {
        if cli.clock_step > 0 {
            engine.advance(cli.clock_step).map_err(|e| e.to_string())?;
        }
        Ok(Session {
            engine,
            warnings,
            _dir: dir,
        })
    }
}

fn resume(
    cli: &Cli,
    records: &[clusterslice::engine::EventRecord],
    warnings: &mut Vec<String>,
) -> Result<Engine, String> {
    if records.is_empty() {
        return Ok(Engine::new(EngineConfig::with_seed(cli.seed.unwrap_or(DEFAULT_SEED))));
    }
    let engine = Engine::resume(records).map_err(|e| e.to_string())?;
    if let Some(seed) = cli.seed.filter(|s| *s != engine.config().seed) {
        warnings.push(format!(
            "ignoring --seed {seed}: state directory was created with seed {}",
            engine.config().seed
        ));
    }
    Ok(engine)
}

/// World for read-only commands. Takes the writer path when the clock moves.
fn read_world(cli: &Cli) -> Result<(WorldState, Vec<String>), String> {
    if cli.clock_step > 0 {
        let s = Session::open(cli)?;
        return Ok((s.engine.world().clone(), s.warnings));
    }
    let path = store::log_path(&cli.state_dir);
    let world = store::replay(&path).map_err(|e| e.to_string())?;
    Ok((world, Vec::new()))
}

fn read_file(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))
}

fn load_request(path: &Path) -> Result<SliceRequest, String> {
    let text = read_file(path)?;
    parse_slice_request(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_domains(path: &Path) -> Result<Vec<DomainInventory>, String> {
    let text = read_file(path)?;
    load_registry(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("views serialize");
    s.push('\n');
    s
}

fn findings_text(findings: &[Finding]) -> String {
    findings.iter().map(|f| format!("{f}\n")).collect()
}

/// Machine-readable dry-run result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DryRun {
    pub valid: bool,
    pub findings: Vec<Finding>,
    pub placements: Vec<Placement>,
    pub tasks: Vec<Task>,
    pub critical_path: Vec<String>,
    /// Expected length of the critical path in virtual time units.
    pub critical_path_length: u64,
}

fn cmd_apply(cli: &Cli, args: &ApplyArgs) -> CmdResult {
    let req = load_request(&args.file)?;
    let mut session = if args.dry_run {
        Session::scratch(cli)?
    } else {
        Session::open(cli)?
    };
    if let Some(path) = &args.domains {
        for inv in load_domains(path)? {
            if !session.engine.world().domains.contains_key(&inv.domain) {
                session.engine.register_domain(inv).map_err(|e| e.to_string())?;
            }
        }
    }
    let warnings = session.warnings.clone();
    let result = if args.dry_run {
        dry_run(&session.engine, &req, args.output)
    } else {
        apply(&mut session.engine, req, args)
    };
    Ok(result?.warn(&warnings))
}

fn dry_run(engine: &Engine, req: &SliceRequest, output: OutputFormat) -> CmdResult {
    let report = engine.validate(req);
    let mut result = DryRun {
        valid: report.ok,
        findings: report.findings.clone(),
        placements: Vec::new(),
        tasks: Vec::new(),
        critical_path: Vec::new(),
        critical_path_length: 0,
    };
    let mut text = report.to_string();
    let mut stderr = String::new();
    if report.ok {
        match engine.plan(req) {
            Ok((placements, graph)) => {
                let kinds = engine
                    .world()
                    .domains
                    .iter()
                    .map(|(name, inv)| (name.clone(), inv.kind))
                    .collect();
                let catalog = AppCatalog::default();
                let durations = estimate_durations(&graph, req, &kinds, |app| {
                    catalog.driver(app).map_or(1, |d| d.expected_duration())
                });
                let path = critical_path(&graph, |t| durations[t.id]).map_err(|e| e.to_string())?;
                result.critical_path_length = path.iter().map(|&id| durations[id]).sum();
                result.critical_path = path.iter().map(|&id| graph.task(id).label.clone()).collect();
                text.push_str(&render_plan(&placements, &graph));
                text.push_str(&format!(
                    "CRITICAL PATH ({} time units)\n  {}\n",
                    result.critical_path_length,
                    result.critical_path.join(" -> ")
                ));
                result.placements = placements.entries;
                result.tasks = graph.tasks().to_vec();
            }
            Err(e) => {
                result.valid = false;
                stderr = format!("{e}\n");
            }
        }
    } else {
        stderr = findings_text(&report.findings);
    }
    let stdout = match output {
        OutputFormat::Table => text,
        OutputFormat::Json => to_json(&result),
    };
    Ok(CommandResult {
        code: if result.valid { 0 } else { 1 },
        stdout,
        stderr,
    })
}

fn apply(engine: &mut Engine, req: SliceRequest, args: &ApplyArgs) -> CmdResult {
    let id = match engine.apply(req) {
        Ok(id) => id,
        Err(EngineError::ValidationFailed(report)) => {
            return Ok(CommandResult::fail(1, findings_text(&report.findings)))
        }
        Err(e) => return Err(e.to_string()),
    };
    if !args.wait {
        return Ok(CommandResult::ok(format!("slice {id} created\n")));
    }
    engine.run_until_settled(args.max_time).map_err(|e| e.to_string())?;
    let status = engine.status(&id).map_err(|e| e.to_string())?;
    let stdout = match args.output {
        OutputFormat::Table => format!("slice {id} created\n{}", describe_text(&status)),
        OutputFormat::Json => to_json(&status),
    };
    if status.phase == SlicePhase::Ready {
        Ok(CommandResult::ok(stdout))
    } else {
        Ok(CommandResult {
            code: 1,
            stdout,
            stderr: format!("slice {id} is {}\n", status.phase),
        })
    }
}

fn cmd_get(cli: &Cli, args: &GetArgs) -> CmdResult {
    let (world, warnings) = read_world(cli)?;
    let ns = args.namespace.as_deref();
    let stdout = match (args.kind, args.output) {
        (GetKind::Slices, OutputFormat::Json) => to_json(&list_slices(&world, ns)),
        (GetKind::Clusters, OutputFormat::Json) => to_json(&list_clusters(&world, ns)),
        (GetKind::Resources, OutputFormat::Json) => to_json(&list_resources(&world, ns)),
        (GetKind::Slices, OutputFormat::Table) => render::slices_table(&list_slices(&world, ns)),
        (GetKind::Clusters, OutputFormat::Table) => render::clusters_table(&list_clusters(&world, ns)),
        (GetKind::Resources, OutputFormat::Table) => {
            render::resources_table(&list_resources(&world, ns))
        }
    };
    Ok(CommandResult::ok(stdout).warn(&warnings))
}

/// Resolve a slice argument to a live slice id.
fn resolve_slice(world: &WorldState, arg: &str, namespace: Option<&str>) -> Result<String, String> {
    let not_found = || format!("slice '{arg}' not found");
    if arg.contains('/') {
        return world
            .slice(arg)
            .filter(|s| s.is_live())
            .map(|_| arg.to_string())
            .ok_or_else(not_found);
    }
    let matches: Vec<&String> = world
        .slices
        .iter()
        .filter(|(_, s)| s.is_live() && s.request.name == arg)
        .filter(|(_, s)| namespace.is_none_or(|ns| s.request.namespace == ns))
        .map(|(id, _)| id)
        .collect();
    match matches.as_slice() {
        [id] => Ok((*id).clone()),
        [] => Err(not_found()),
        _ => Err(format!("slice name '{arg}' is ambiguous; use namespace/name")),
    }
}

fn cmd_describe(cli: &Cli, args: &DescribeArgs) -> CmdResult {
    let (world, warnings) = read_world(cli)?;
    let id = resolve_slice(&world, &args.slice, args.namespace.as_deref())?;
    let status = slice_status(&world, &id).ok_or_else(|| format!("slice '{id}' not found"))?;
    let stdout = match args.output {
        OutputFormat::Table => describe_text(&status),
        OutputFormat::Json => to_json(&status),
    };
    Ok(CommandResult::ok(stdout).warn(&warnings))
}

fn cmd_delete(cli: &Cli, args: &DescribeArgs) -> CmdResult {
    let mut session = Session::open(cli)?;
    let id = resolve_slice(session.engine.world(), &args.slice, args.namespace.as_deref())?;
    session.engine.delete(&id).map_err(|e| e.to_string())?;
    Ok(CommandResult::ok(format!("slice {id} deleted\n")).warn(&session.warnings))
}

fn cmd_domains(cli: &Cli, command: &DomainsCommand) -> CmdResult {
    match command {
        DomainsCommand::Register { file } => {
            let inventories = load_domains(file)?;
            let mut session = Session::open(cli)?;
            let mut out = String::new();
            for inv in inventories {
                let name = inv.domain.clone();
                session.engine.register_domain(inv).map_err(|e| e.to_string())?;
                out.push_str(&format!("domain {name} registered\n"));
            }
            Ok(CommandResult::ok(out).warn(&session.warnings))
        }
        DomainsCommand::List { output } => {
            let (world, warnings) = read_world(cli)?;
            let domains: Vec<&DomainInventory> = world.domains.values().collect();
            let stdout = match output {
                OutputFormat::Json => to_json(&domains),
                OutputFormat::Table => render::domains_table(&domains),
            };
            Ok(CommandResult::ok(stdout).warn(&warnings))
        }
    }
}

/// Parse a fault profile: a YAML/JSON file, or inline comma-separated
/// `target:domain:probability` and `target:domain:nth=N` entries.
pub fn parse_fault_profile(profile: &str) -> Result<Vec<FaultSpec>, String> {
    let path = Path::new(profile);
    if path.is_file() {
        let text = read_file(path)?;
        return load_fault_profile(&text).map_err(|e| format!("{profile}: {e}"));
    }
    profile
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|entry| {
            let parts: Vec<&str> = entry.split(':').collect();
            let [target, domain, trigger] = parts.as_slice() else {
                return Err(format!("fault '{entry}': expected target:domain:trigger"));
            };
            let target: FaultTarget = target.parse()?;
            let spec = if let Some(n) = trigger.strip_prefix("nth=") {
                let n = n.parse().map_err(|_| format!("fault '{entry}': bad count"))?;
                FaultSpec::nth(target, *domain, n)
            } else {
                let p = trigger
                    .parse()
                    .map_err(|_| format!("fault '{entry}': bad probability"))?;
                FaultSpec::probability(target, *domain, p)
            };
            spec.check().map_err(|e| format!("fault '{entry}': {e}"))?;
            Ok(spec)
        })
        .collect()
}

fn cmd_campaign(cli: &Cli, args: &CampaignArgs) -> CmdResult {
    let template = load_request(&args.file)?;
    let faults = match &args.faults {
        Some(p) => parse_fault_profile(p)?,
        None => Vec::new(),
    };
    let domains = match &args.domains {
        Some(path) => load_domains(path)?,
        None => {
            let world = store::replay(&store::log_path(&cli.state_dir)).map_err(|e| e.to_string())?;
            world.domains.into_values().collect()
        }
    };
    if domains.is_empty() {
        return Err("no domains: pass --domains or register some first".into());
    }
    let mut engine = Engine::new(EngineConfig::with_seed(cli.seed.unwrap_or(DEFAULT_SEED)));
    for inv in domains {
        engine.register_domain(inv).map_err(|e| e.to_string())?;
    }
    for f in &faults {
        engine.arm_fault(f.clone()).map_err(|e| e.to_string())?;
    }
    let config = CampaignConfig {
        count: args.count,
        worker_mix: args.worker_mix.clone(),
        autoscale: args.autoscale,
        max_time: args.max_time,
    };
    let report = run_campaign(&mut engine, &template, &config).map_err(|e| e.to_string())?;
    let stdout = match args.output {
        OutputFormat::Json => to_json(&report),
        OutputFormat::Table => render::campaign_text(&report),
    };
    let mut stderr = String::new();
    for v in &report.audit_violations {
        stderr.push_str(&format!("audit: {v}\n"));
    }
    let failed = report.slices_failed > 0 && faults.is_empty();
    if failed {
        stderr.push_str(&format!("{} slice(s) failed without faults armed\n", report.slices_failed));
    }
    let code = if failed || !report.audit_violations.is_empty() { 2 } else { 0 };
    Ok(CommandResult { code, stdout, stderr })
}
