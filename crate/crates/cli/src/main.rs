//! `dcr`: run workflow searches, execute single workflows, and report on
//! archives.

mod manifest;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use dcr_core::archive::Archive;
use dcr_core::eval::{evaluate_workflow, Dataset, LabeledNote};
use dcr_core::llm::{Gateway, LlmError, PriceTable, Provider, RemoteConfig, RemoteProvider, ScriptedProvider, UsageLedger, UsageReport};
use dcr_core::ops::{execute, Note, OpEnv};
use dcr_core::search::{LoopState, Search, SearchConfig, SearchEnv, SearchError, StopReason, STATE_FILE};
use dcr_core::seeds;
use dcr_core::taxonomy::{load_taxonomy, Taxonomy};
use dcr_core::workflow::{compile_plan, validate_plan, ComponentLibrary, Plan};

use manifest::RunManifest;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_PROVIDER: u8 = 4;
const EXIT_BUDGET: u8 = 5;

#[derive(Parser)]
#[command(name = "dcr", version, about = "Search, run and inspect ICD-10 coding workflows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for a better workflow, starting from optional seeds.
    Search(SearchArgs),
    /// Execute one workflow on a note or a dataset.
    Run(RunArgs),
    /// Inspect an archive: trajectory, listing, entry detail, costs.
    Report(ReportArgs),
    /// List the shipped seed workflows.
    Seeds,
}

#[derive(Args)]
struct ProviderArgs {
    /// `scripted:<dir>` or `http:<profile>` (a model name or a profile file).
    #[arg(long)]
    provider: String,
    /// Price table (JSON map of model to per-1k-token prices) for cost reports.
    #[arg(long)]
    prices: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    taxonomy: PathBuf,
    #[command(flatten)]
    provider: ProviderArgs,
    /// Output directory: archive, checkpoint, progress log, manifest, report.
    #[arg(long, default_value = "dcr-out")]
    out: PathBuf,
    /// Seed workflow by catalog name or plan file; repeatable.
    #[arg(long = "seed")]
    seeds: Vec<String>,
    /// Continue the checkpointed run in --out.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    iterations: Option<u32>,
    #[arg(long)]
    generation_size: Option<u32>,
    #[arg(long)]
    elites: Option<usize>,
    #[arg(long)]
    recents: Option<usize>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    token_cap: Option<u64>,
    #[arg(long)]
    patience: Option<u32>,
    #[arg(long)]
    rng_seed: Option<u64>,
    #[arg(long)]
    lambda_viol: Option<f64>,
    #[arg(long)]
    lambda_cost: Option<f64>,
    #[arg(long)]
    halt_after: Option<u32>,
}

#[derive(Args)]
struct RunArgs {
    /// Seed workflow by catalog name.
    #[arg(long, conflicts_with = "plan", required_unless_present = "plan")]
    seed: Option<String>,
    /// Plan JSON file.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// A note as plain text.
    #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
    note: Option<PathBuf>,
    /// A JSONL dataset; prints per-note results and aggregate scores.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    taxonomy: PathBuf,
    #[command(flatten)]
    provider: ProviderArgs,
    /// Search config supplying evaluation settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write operator traces as JSONL.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Directory for the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    archive: PathBuf,
    /// Trajectory as JSON instead of CSV.
    #[arg(long)]
    json: bool,
    /// Per-entry listing as CSV.
    #[arg(long)]
    list: bool,
    /// Plan and reflection of one entry.
    #[arg(long)]
    show: Option<u64>,
    /// Token and cost summary (search vs execution).
    #[arg(long)]
    export_costs: bool,
    #[arg(long)]
    prices: Option<PathBuf>,
    /// Model name to price the ledger with.
    #[arg(long, default_value = "default")]
    model: String,
}

/// Print to stdout; a closed pipe (`dcr report | head`) ends the process
/// quietly instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {{
        let mut so = std::io::stdout().lock();
        if let Err(e) = write!(so, $($arg)*).and_then(|_| so.flush()) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
            return Err(data_err(e));
        }
    }};
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl std::fmt::Display) -> Self {
        Self { code, message: message.to_string() }
    }
}

type CmdResult = Result<u8, Failure>;

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_CONFIG, e)
}

fn data_err(e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_DATA, e)
}

fn llm_failure(e: &LlmError) -> Failure {
    match e {
        LlmError::BudgetExceeded { .. } => Failure::new(EXIT_BUDGET, e),
        _ => Failure::new(EXIT_PROVIDER, e),
    }
}

fn search_failure(e: SearchError) -> Failure {
    match e {
        SearchError::Config(_) => config_err(e),
        SearchError::Provider(ref l) => llm_failure(l),
        SearchError::EmptyDataset | SearchError::Archive(_) | SearchError::CorruptCheckpoint(_) | SearchError::Io(_) => {
            data_err(e)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("DCR_LOG").unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Search(a) => cmd_search(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
        Command::Seeds => cmd_seeds(),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn open_provider(spec: &str) -> Result<Arc<dyn Provider>, Failure> {
    match spec.split_once(':') {
        Some(("scripted", dir)) => Ok(Arc::new(ScriptedProvider::load(dir).map_err(config_err)?)),
        Some(("http", profile)) => {
            let path = Path::new(profile);
            let cfg = if path.is_file() {
                let src = std::fs::read_to_string(path).map_err(config_err)?;
                let mut cfg: RemoteConfig = if profile.ends_with(".json") {
                    serde_json::from_str(&src).map_err(config_err)?
                } else {
                    toml::from_str(&src).map_err(config_err)?
                };
                cfg.api_key = RemoteConfig::from_env(&cfg.model).map_err(|e| llm_failure(&e))?.api_key;
                cfg
            } else {
                RemoteConfig::from_env(profile).map_err(|e| llm_failure(&e))?
            };
            Ok(Arc::new(RemoteProvider::new(cfg)))
        }
        _ => Err(config_err(format!("--provider must be scripted:<dir> or http:<profile>, got {spec:?}"))),
    }
}

fn open_gateway(p: &ProviderArgs, token_cap: Option<u64>) -> Result<Gateway, Failure> {
    let prices = match &p.prices {
        Some(path) => PriceTable::load(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?,
        None => PriceTable::default(),
    };
    Ok(Gateway::with_options(open_provider(&p.provider)?, token_cap, prices))
}

fn load_config(path: Option<&Path>) -> Result<SearchConfig, Failure> {
    match path {
        Some(p) => SearchConfig::load(p).map_err(config_err),
        None => Ok(SearchConfig::default()),
    }
}

fn load_data(dataset: &Path, taxonomy: &Path) -> Result<(Dataset, Taxonomy), Failure> {
    let d = Dataset::load(dataset).map_err(|e| data_err(format!("{}: {e}", dataset.display())))?;
    if d.is_empty() {
        return Err(data_err(format!("{}: dataset is empty", dataset.display())));
    }
    Ok((d, load_tax(taxonomy)?))
}

fn load_tax(taxonomy: &Path) -> Result<Taxonomy, Failure> {
    load_taxonomy(taxonomy).map_err(|e| data_err(format!("{}: {e}", taxonomy.display())))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), Failure> {
    let s = serde_json::to_string_pretty(v).expect("serializable");
    std::fs::write(path, s + "\n").map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn cmd_search(a: SearchArgs) -> CmdResult {
    let mut cfg = load_config(a.config.as_deref())?;
    macro_rules! flag {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    flag!(iterations, generation_size, elites, recents, max_retries, patience, rng_seed, lambda_viol, lambda_cost);
    if a.token_cap.is_some() {
        cfg.token_cap = a.token_cap;
    }
    if a.halt_after.is_some() {
        cfg.halt_after = a.halt_after;
    }
    cfg.check().map_err(config_err)?;

    let lib = ComponentLibrary::standard();
    let seed_plans: Vec<Plan> = a
        .seeds
        .iter()
        .map(|s| seeds::load_seed(s).map_err(config_err))
        .collect::<Result<_, _>>()?;
    let (dataset, taxonomy) = load_data(&a.dataset, &a.taxonomy)?;

    std::fs::create_dir_all(&a.out).map_err(|e| data_err(format!("{}: {e}", a.out.display())))?;
    let manifest = RunManifest::new("search", &cfg, &a.dataset, &a.taxonomy, &a.provider.provider, &a.out)
        .map_err(data_err)?;
    write_json(&a.out.join("manifest.json"), &manifest)?;

    let gateway = open_gateway(&a.provider, cfg.token_cap)?;
    let env = SearchEnv { gateway: &gateway, taxonomy: &taxonomy, lib: &lib, dataset: &dataset };
    let mut search = if a.resume {
        Search::resume(cfg, env, &a.out).map_err(search_failure)?
    } else {
        Search::create(cfg, env, &a.out, seed_plans.into_iter().map(|p| (p, None)).collect()).map_err(search_failure)?
    };
    let outcome = match search.run() {
        Ok(o) => o,
        Err(SearchError::Archive(dcr_core::archive::ArchiveError::EmptyArchive)) => {
            return Err(Failure::new(EXIT_PROVIDER, "search produced no scored workflow"));
        }
        Err(e) => return Err(search_failure(e)),
    };

    let archive = search.archive();
    std::fs::write(a.out.join("trajectory.csv"), trajectory_csv(archive)).map_err(data_err)?;
    let report = json!({
        "stop": outcome.stop,
        "iterations_completed": outcome.iterations_completed,
        "best": {
            "id": outcome.best.id,
            "name": outcome.best.plan.name,
            "iteration": outcome.best.iteration,
            "origin": outcome.best.origin,
            "score": outcome.best.score,
        },
        "entries": archive.len(),
        "usage": gateway.usage_report(),
    });
    write_json(&a.out.join("report.json"), &report)?;
    out!("{}\n", serde_json::to_string_pretty(&report).expect("serializable"));
    Ok(if outcome.stop == StopReason::BudgetExceeded { EXIT_BUDGET } else { 0 })
}

fn load_plan(a: &RunArgs, lib: &ComponentLibrary) -> Result<Plan, Failure> {
    let plan = match (&a.seed, &a.plan) {
        (Some(name), _) => seeds::load_seed(name).map_err(config_err)?,
        (None, Some(path)) => {
            let src = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            Plan::from_json(&src).map_err(|e| config_err(format!("{}: not a plan: {e}", path.display())))?
        }
        (None, None) => return Err(config_err("one of --seed or --plan is required")),
    };
    let report = validate_plan(&plan, lib);
    if !report.ok {
        out!("{}\n", serde_json::to_string_pretty(&report).expect("serializable"));
        return Err(config_err(format!("plan {:?} is invalid:\n{}", plan.name, report.render())));
    }
    Ok(plan)
}

fn cmd_run(a: RunArgs) -> CmdResult {
    let lib = ComponentLibrary::standard();
    let cfg = load_config(a.config.as_deref())?;
    let plan = load_plan(&a, &lib)?;
    let graph = compile_plan(&plan, &lib).map_err(config_err)?;
    let taxonomy = load_tax(&a.taxonomy)?;
    let notes: Dataset = match (&a.note, &a.dataset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
            let id = path.file_stem().map_or("note".into(), |s| s.to_string_lossy().into_owned());
            Dataset { notes: vec![LabeledNote { note_id: id, text, gold_codes: Default::default() }] }
        }
        (None, Some(path)) => {
            let d = Dataset::load(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
            if d.is_empty() {
                return Err(data_err(format!("{}: dataset is empty", path.display())));
            }
            d
        }
        (None, None) => return Err(config_err("one of --note or --dataset is required")),
    };
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).map_err(data_err)?;
        let data_path = a.note.as_ref().or(a.dataset.as_ref()).expect("checked above");
        let manifest = RunManifest::new("run", &cfg, data_path, &a.taxonomy, &a.provider.provider, out).map_err(data_err)?;
        write_json(&out.join("manifest.json"), &manifest)?;
    }
    let gateway = open_gateway(&a.provider, cfg.token_cap)?;

    let (output, traces) = if a.note.is_some() {
        let env = OpEnv { gateway: &gateway, taxonomy: &taxonomy, max_repairs: cfg.max_repairs };
        let n = &notes.notes[0];
        let exec = execute(&graph, &Note { id: n.note_id.clone(), text: n.text.clone() }, &env).map_err(|e| match e.llm_error() {
            Some(l) => llm_failure(l),
            None => config_err(e),
        })?;
        let out = json!({"note_id": exec.note_id, "ranked": exec.ranked, "tokens": exec.tokens});
        (out, vec![exec.traces])
    } else {
        let ev = evaluate_workflow(&graph, &notes, &gateway, &taxonomy, &cfg.eval_config()).map_err(|e| match e.llm_error() {
            Some(l) => llm_failure(l),
            None => config_err(e),
        })?;
        (serde_json::to_value(&ev.report).expect("serializable"), ev.traces)
    };
    if let Some(path) = &a.trace {
        let mut f = std::fs::File::create(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
        for (note, ts) in notes.notes.iter().zip(&traces) {
            for t in ts {
                let mut v = serde_json::to_value(t).expect("serializable");
                v["note_id"] = Value::String(note.note_id.clone());
                writeln!(f, "{}", serde_json::to_string(&v).expect("serializable")).map_err(data_err)?;
            }
        }
    }
    out!("{}\n", serde_json::to_string_pretty(&output).expect("serializable"));
    Ok(0)
}

fn trajectory_csv(archive: &Archive) -> String {
    let mut out = String::from("iteration,best_id,precision,recall,f1,compliance,cost,objective,best_f1\n");
    for r in archive.trajectory() {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.iteration, r.best_id, r.precision, r.recall, r.f1, r.compliance, r.cost, r.objective, r.best_f1
        ));
    }
    out
}

fn cmd_report(a: ReportArgs) -> CmdResult {
    let archive = Archive::load(&a.archive).map_err(|e| data_err(format!("{}: {e}", a.archive.display())))?;
    if let Some(id) = a.show {
        let e = archive.get(id).ok_or_else(|| data_err(format!("no entry {id}")))?;
        let detail = json!({
            "id": e.id,
            "iteration": e.iteration,
            "origin": e.origin,
            "status": e.status,
            "score": e.score,
            "plan": e.plan,
            "reflection": e.reflection,
            "diagnostics": e.diagnostics,
        });
        out!("{}\n", serde_json::to_string_pretty(&detail).expect("serializable"));
        return Ok(0);
    }
    if a.export_costs {
        let prices = match &a.prices {
            Some(p) => PriceTable::load(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?,
            None => PriceTable::default(),
        };
        // The loop state holds the full ledger, designer calls included.
        let state_path = a.archive.with_file_name(STATE_FILE);
        let ledger = match std::fs::read_to_string(&state_path) {
            Ok(s) => serde_json::from_str::<LoopState>(&s).map_err(|e| data_err(format!("{}: {e}", state_path.display())))?.ledger,
            Err(_) => archive.entries().iter().fold(UsageLedger::default(), |mut l, e| {
                l.merge(&e.cost);
                l
            }),
        };
        let r = UsageReport::new(&ledger, &prices, &a.model);
        out!("search_tokens,exec_tokens,total_tokens,search_cost_usd,exec_cost_usd,cost_usd\n");
        out!(
            "{},{},{},{:.4},{:.4},{:.4}\n",
            r.search_tokens, r.exec_tokens, r.total_tokens, r.search_cost_usd, r.exec_cost_usd, r.cost_usd
        );
        return Ok(0);
    }
    if a.list {
        out!("{}", archive.export_csv());
        return Ok(0);
    }
    if a.json {
        out!("{}\n", serde_json::to_string_pretty(&archive.trajectory()).expect("serializable"));
    } else {
        out!("{}", trajectory_csv(&archive));
    }
    Ok(0)
}

fn cmd_seeds() -> CmdResult {
    let lib = ComponentLibrary::standard();
    let mut out = BTreeMap::new();
    for s in seeds::list_seeds() {
        let ok = validate_plan(&s.plan, &lib).ok;
        out.insert(s.name().to_string(), json!({"about": s.about, "rendering": s.rendering, "valid": ok, "steps": s.plan.steps.len()}));
    }
    out!("{}\n", serde_json::to_string_pretty(&out).expect("serializable"));
    Ok(0)
}
