use std::collections::BTreeMap;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use govsim_core::agent::{AgentKind, AgentSpec, HumanConsole, StreamConsole};
use govsim_core::engine::{
    self, build_roster, load_checkpoint, parse_roster, roster_label, AgentDeps, RunConfig, RunRecord, Simulation,
};
use govsim_core::gateway::{
    estimate_run_cost, Cassette, ChatBackend, CostEstimate, Gateway, ModelRegistry, ReqwestTransport,
};
use govsim_core::metrics;
use govsim_core::scenario::{PackCatalog, ScenarioConfig, ScenarioName, PHRASE_KEYS};
use govsim_core::store::{self, Manifest};

#[derive(Parser)]
#[command(name = "govsim", version, about = "Common-pool resource governance simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration (defaults to a single run).
    Run(RunArgs),
    /// Run one configuration with the preset's run count.
    Batch(RunArgs),
    /// Aggregate persisted runs into a results table.
    Report(ReportArgs),
    /// Print the dialogue of a persisted run.
    Replay(ReplayArgs),
    /// Print the effective configuration and check locale packs.
    Validate(SetupArgs),
    /// Estimate API spend per run for the roster's models.
    EstimateCost(CostArgs),
    /// Run with one human agent at this terminal.
    Human(RunArgs),
}

#[derive(Args, Clone)]
struct SetupArgs {
    /// Preset name (fishery, pasture, pollution, trash) or path to a preset file.
    #[arg(long, default_value = "fishery")]
    scenario: String,
    /// Agents as `name:count,name:count`; names are policies, `human`, or model keys.
    #[arg(long)]
    roster: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Add the universalization hint to harvest prompts.
    #[arg(long)]
    universalization: bool,
    #[arg(long)]
    locale: Option<String>,
    /// Directory of extra `<scenario>.<locale>.toml` packs.
    #[arg(long)]
    locale_dir: Option<PathBuf>,
    /// TOML file of `[[model]]` entries merged into the built-in registry.
    #[arg(long)]
    registry: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    setup: SetupArgs,
    #[arg(long)]
    runs: Option<u32>,
    /// `record:<path>` or `replay:<path>`.
    #[arg(long)]
    cassette: Option<String>,
    /// Output directory for run artifacts and tables.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue an aborted run from its checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories (searched recursively for run records).
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// Print CSV instead of aligned text.
    #[arg(long)]
    csv: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// A `record.jsonl` file or the run directory holding it.
    record: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    #[command(flatten)]
    setup: SetupArgs,
    /// Months per run; defaults to the scenario horizon.
    #[arg(long)]
    months: Option<u32>,
}

enum Failure {
    Config(String),
    Run(String),
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Failure::Config(e.to_string())
    }

    fn run(e: impl std::fmt::Display) -> Self {
        Failure::Run(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run_cmd(a, Mode::Run),
        Command::Batch(a) => run_cmd(a, Mode::Batch),
        Command::Human(a) => run_cmd(a, Mode::Human),
        Command::Report(a) => report_cmd(a),
        Command::Replay(a) => replay_cmd(a),
        Command::Validate(a) => validate_cmd(a),
        Command::EstimateCost(a) => cost_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

struct Setup {
    scenario: ScenarioConfig,
    catalog: PackCatalog,
    registry: ModelRegistry,
    agents: Option<Vec<AgentSpec>>,
}

fn load_scenario(arg: &str) -> Result<ScenarioConfig, Failure> {
    match arg.parse::<ScenarioName>() {
        Ok(name) => Ok(ScenarioConfig::preset(name)),
        Err(_) if Path::new(arg).exists() => ScenarioConfig::load(Path::new(arg)).map_err(Failure::config),
        Err(_) => Err(Failure::Config(format!(
            "'{arg}' is neither a scenario preset nor a readable preset file"
        ))),
    }
}

fn resolve(args: &SetupArgs) -> Result<Setup, Failure> {
    let mut scenario = load_scenario(&args.scenario)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if args.universalization {
        scenario.universalization = true;
    }
    if let Some(locale) = &args.locale {
        scenario.locale = locale.clone();
    }
    scenario.validate().map_err(Failure::config)?;

    let mut catalog = PackCatalog::builtin();
    if let Some(dir) = &args.locale_dir {
        catalog.load_dir(dir).map_err(Failure::config)?;
    }
    if catalog.get(scenario.name, &scenario.locale).is_none() {
        return Err(Failure::Config(format!(
            "missing locale pack '{}' for scenario {}",
            scenario.locale, scenario.name
        )));
    }

    let mut registry = ModelRegistry::builtin();
    if let Some(path) = &args.registry {
        registry.merge_file(path).map_err(Failure::config)?;
    }

    let agents = match &args.roster {
        None => None,
        Some(text) => {
            let groups = parse_roster(text, |k| registry.get(k).is_some()).map_err(Failure::config)?;
            Some(build_roster(&groups, &scenario).map_err(Failure::config)?)
        }
    };
    Ok(Setup {
        scenario,
        catalog,
        registry,
        agents,
    })
}

enum CassetteArg {
    None,
    Record(PathBuf),
    Replay(PathBuf),
}

fn parse_cassette(arg: Option<&str>) -> Result<CassetteArg, Failure> {
    let Some(arg) = arg else {
        return Ok(CassetteArg::None);
    };
    match arg.split_once(':') {
        Some(("record", p)) if !p.is_empty() => Ok(CassetteArg::Record(p.into())),
        Some(("replay", p)) if !p.is_empty() => Ok(CassetteArg::Replay(p.into())),
        _ => Err(Failure::Config(format!(
            "--cassette must be record:<path> or replay:<path>, got '{arg}'"
        ))),
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Run,
    Batch,
    Human,
}

fn print_manifest(manifest: &Manifest) {
    for entry in &manifest.files {
        println!(
            "wrote {} sha256:{}",
            manifest.dir.join(&entry.path).display(),
            entry.sha256
        );
    }
    println!("wrote {}", manifest.dir.join(store::MANIFEST_FILE).display());
}

fn write_tables(dir: &Path, table: &store::ResultsTable) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Run(format!("{}: {e}", dir.display())))?;
    for (name, content) in [("table.txt", table.render_text()), ("table.csv", table.render_csv())] {
        let path = dir.join(name);
        std::fs::write(&path, &content).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))?;
        println!(
            "wrote {} sha256:{}",
            path.display(),
            store::sha256_hex(content.as_bytes())
        );
    }
    Ok(())
}

fn run_cmd(args: RunArgs, mode: Mode) -> Outcome {
    let setup = resolve(&args.setup)?;
    let cassette = parse_cassette(args.cassette.as_deref())?;
    let agents = setup
        .agents
        .clone()
        .ok_or_else(|| Failure::Config("--roster is required".into()))?;
    let humans = agents.iter().filter(|a| a.kind == AgentKind::Human).count();
    match mode {
        Mode::Human if humans != 1 => {
            return Err(Failure::Config(format!(
                "human mode needs exactly one human roster slot, found {humans}"
            )))
        }
        Mode::Run | Mode::Batch if humans > 0 => {
            return Err(Failure::Config(
                "rosters with a human slot need the human subcommand".into(),
            ))
        }
        _ => {}
    }
    let runs = match (mode, args.runs) {
        (Mode::Human, Some(r)) if r != 1 => return Err(Failure::Config("human mode runs exactly once".into())),
        (_, Some(0)) => return Err(Failure::Config("--runs must be at least 1".into())),
        (_, Some(r)) => r,
        (Mode::Batch, None) => setup.scenario.runs,
        _ => 1,
    };
    if args.resume.is_some() && runs != 1 {
        return Err(Failure::Config("--resume continues a single run; drop --runs".into()));
    }
    let uses_models = agents.iter().any(|a| matches!(a.kind, AgentKind::LlmBacked { .. }));
    if !matches!(cassette, CassetteArg::None) && !uses_models {
        return Err(Failure::Config(
            "--cassette needs at least one model-backed agent".into(),
        ));
    }
    let out = match (mode, &args.out) {
        (_, Some(o)) => Some(o.clone()),
        (Mode::Human, None) => Some(PathBuf::from("human-session")),
        _ => None,
    };

    let mut deps = AgentDeps::default();
    let mut sequential = false;
    let mut cassette_path = None;
    if uses_models {
        let gateway = match &cassette {
            CassetteArg::Replay(p) => {
                cassette_path = Some(p.clone());
                Gateway::replay_only(
                    setup.registry.clone(),
                    Cassette::open_replay(p).map_err(Failure::config)?,
                )
            }
            CassetteArg::Record(p) => {
                cassette_path = Some(p.clone());
                sequential = true;
                let transport = ReqwestTransport::new(Duration::from_secs(120)).map_err(Failure::config)?;
                Gateway::new(
                    setup.registry.clone(),
                    Box::new(transport),
                    Cassette::create_record(p).map_err(Failure::config)?,
                )
            }
            CassetteArg::None => {
                let transport = ReqwestTransport::new(Duration::from_secs(120)).map_err(Failure::config)?;
                Gateway::new(setup.registry.clone(), Box::new(transport), Cassette::passthrough())
            }
        };
        deps.backend = Some(Arc::new(gateway) as Arc<dyn ChatBackend>);
    }
    if mode == Mode::Human {
        let console: Arc<Mutex<dyn HumanConsole>> = Arc::new(Mutex::new(StreamConsole::new(
            BufReader::new(io::stdin()),
            io::stdout(),
        )));
        deps.console = Some(console);
    }

    let mut cfg = RunConfig::new(setup.scenario.clone(), agents);
    cfg.cassette_path = cassette_path;
    cfg.output_dir = out.clone();
    let catalog = Arc::new(setup.catalog);

    let (records, failures) = if let Some(cp) = &args.resume {
        let checkpoint = load_checkpoint(cp).map_err(Failure::config)?;
        let mut resumed = checkpoint.config.clone();
        resumed.output_dir = out.clone();
        let sim = Simulation::new(resumed, catalog, &deps).map_err(Failure::config)?;
        let sim = if sequential { sim.sequential() } else { sim };
        let seed = checkpoint.config.seed;
        match sim.resume(checkpoint) {
            Ok(record) => {
                if let Some(dir) = &out {
                    print_manifest(&store::persist_run(&record, dir).map_err(Failure::run)?);
                }
                (vec![record], Vec::new())
            }
            Err(e) => (Vec::new(), vec![(seed, e)]),
        }
    } else {
        let outcome = engine::run_batch(&cfg, runs, catalog, &deps, sequential).map_err(Failure::config)?;
        for m in &outcome.manifests {
            print_manifest(m);
        }
        (outcome.records, outcome.failures)
    };

    if !records.is_empty() {
        let summary = metrics::aggregate(&records).map_err(Failure::run)?;
        let table = store::emit_table(&[(roster_label(&cfg.agents), summary)]);
        print!("{}", table.render_text());
        if let Some(dir) = &out {
            write_tables(dir, &table)?;
        }
    }
    if failures.is_empty() {
        return Ok(());
    }
    for (seed, e) in &failures {
        if let engine::EngineError::Aborted {
            checkpoint: Some(path), ..
        } = e
        {
            println!("wrote {}", path.display());
        }
        eprintln!("run with seed {seed} failed: {e}");
    }
    let seeds: Vec<String> = failures.iter().map(|(s, _)| s.to_string()).collect();
    Err(Failure::Run(format!(
        "{} run(s) failed (seeds {})",
        failures.len(),
        seeds.join(", ")
    )))
}

fn report_cmd(args: ReportArgs) -> Outcome {
    let mut records: Vec<RunRecord> = Vec::new();
    for dir in &args.dirs {
        let found = store::load_runs_under(dir).map_err(Failure::run)?;
        if found.is_empty() {
            return Err(Failure::Run(format!("no run records under {}", dir.display())));
        }
        records.extend(found);
    }
    let scenarios: std::collections::BTreeSet<ScenarioName> = records.iter().map(|r| r.config.scenario.name).collect();
    let mut groups: BTreeMap<String, Vec<RunRecord>> = BTreeMap::new();
    for r in records {
        let roster = roster_label(&r.config.agents);
        let label = if scenarios.len() > 1 {
            format!("{} {roster}", r.config.scenario.name)
        } else {
            roster
        };
        groups.entry(label).or_default().push(r);
    }
    let summaries = groups
        .into_iter()
        .map(|(label, rs)| metrics::aggregate(&rs).map(|s| (label, s)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::run)?;
    let table = store::emit_table(&summaries);
    if args.csv {
        print!("{}", table.render_csv());
    } else {
        print!("{}", table.render_text());
    }
    if let Some(dir) = &args.out {
        write_tables(dir, &table)?;
    }
    Ok(())
}

fn replay_cmd(args: ReplayArgs) -> Outcome {
    let path = if args.record.is_dir() {
        let mut found = Vec::new();
        find_records(&args.record, &mut found).map_err(Failure::run)?;
        match found.len() {
            1 => found.remove(0),
            0 => {
                return Err(Failure::Config(format!(
                    "no {} under {}",
                    store::RECORD_FILE,
                    args.record.display()
                )))
            }
            n => {
                return Err(Failure::Config(format!(
                    "{n} runs under {}; pass one record or run directory",
                    args.record.display()
                )))
            }
        }
    } else {
        args.record
    };
    let (text, warnings) = store::replay_transcript(&path).map_err(Failure::run)?;
    for w in &warnings {
        eprintln!("{w}");
    }
    print!("{text}");
    Ok(())
}

fn find_records(dir: &Path, found: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let direct = dir.join(store::RECORD_FILE);
    if direct.is_file() {
        found.push(direct);
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for entry in entries.into_iter().filter(|p| p.is_dir()) {
        find_records(&entry, found)?;
    }
    Ok(())
}

fn validate_cmd(args: SetupArgs) -> Outcome {
    let setup = resolve(&args)?;
    let sc = &setup.scenario;
    println!("scenario={} locale={}", sc.name, sc.locale);
    println!("{}", sc.summary_line());
    println!("{}", serde_json::to_string_pretty(sc).map_err(Failure::run)?);
    for locale in setup.catalog.locales(sc.name) {
        let pack = setup.catalog.get(sc.name, locale).expect("listed locale");
        println!(
            "locale pack {}.{}: complete ({} templates, {} phrases)",
            sc.name,
            locale,
            pack.templates().count(),
            PHRASE_KEYS.len()
        );
    }
    if let Some(agents) = &setup.agents {
        println!("roster {} ({} agents)", roster_label(agents), agents.len());
        for a in agents {
            println!("  {} {}", a.name, a.kind.label());
        }
    }
    Ok(())
}

fn cost_cmd(args: CostArgs) -> Outcome {
    let setup = resolve(&args.setup)?;
    let months = args.months.unwrap_or(setup.scenario.dynamics.horizon);
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    match &setup.agents {
        Some(agents) => {
            for a in agents {
                if let AgentKind::LlmBacked { model_key } = &a.kind {
                    *counts.entry(model_key.clone()).or_default() += 1;
                }
            }
            if counts.is_empty() {
                println!("roster has no model-backed agents; estimated cost $0.00");
                return Ok(());
            }
        }
        None => {
            for e in setup.registry.entries() {
                counts.insert(e.key.clone(), setup.scenario.n_agents);
            }
        }
    }
    let n = setup.scenario.n_agents as f64;
    let mut total = 0.0;
    let mut any_unpriced = false;
    for (model, count) in &counts {
        match estimate_run_cost(&setup.registry, model, months).map_err(Failure::config)? {
            CostEstimate::Estimate { usd } => {
                println!("{model}: ${usd:.2} per {months}-month run");
                total += usd * *count as f64 / n;
            }
            CostEstimate::Unavailable => {
                any_unpriced = true;
                println!("{model}: unavailable (no pricing configured)");
            }
        }
    }
    if setup.agents.is_some() {
        let note = if any_unpriced {
            " (excluding unpriced models)"
        } else {
            ""
        };
        println!("roster estimate: ${total:.2} per {months}-month run (weighted by agent count){note}");
    }
    Ok(())
}
