//! Command-line interface: inspect annotations, plan recipes, generate
//! glue, run pipelines (measured or modeled), and sweep benchmarks.
//!
//! Plain files in, plain files out: exit 0 on success, 1 on validation
//! errors, 2 on runtime errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::annotations::{export_spec, import_spec, parse_annotations_named};
use crate::codegen::{build_tree, emit_plan, ExecutablePlan, TemplateLibrary};
use crate::device::DataItemKind;
use crate::expr::MeshParams;
use crate::kernels::{self, CellularSurrogateConfig, KernelRegistry};
use crate::mesh::BlockMesh;
use crate::packet;
use crate::perf::{self, CostModel, SimOptions};
use crate::planner::{fuse, PlanGraph, SpecRegistry};
use crate::recipe::load_recipe;
use crate::runtime::{
    start_teams, LinkCost, PipelineConfig, RunReport, StepInputs, ThreadTeamConfig,
};

#[derive(Parser, Debug)]
#[command(
    name = "blockflow",
    version,
    about = "Recipe-driven heterogeneous task pipelines over block meshes",
    term_width = 100
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Parse kernel annotations and print the routine specs as JSON.
    Inspect(InspectArgs),
    /// Fuse a recipe into task functions and write plan.json.
    Plan(PlanArgs),
    /// Generate glue text, packet layouts, and the executable plan.
    Generate(GenerateArgs),
    /// Execute a recipe over the mesh (measured) or simulate it (modeled).
    Run(RunArgs),
    /// Sweep blocks-per-packet in the modeled pipeline and emit CSV.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Annotated source files to scan.
    #[arg(required = true)]
    sources: Vec<PathBuf>,
    /// Comment sentinel introducing annotation lines.
    #[arg(long, default_value = "!!")]
    sentinel: String,
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Recipe document (JSON).
    #[arg(short, long)]
    recipe: PathBuf,
    /// Directory of exported routine spec JSON files (overlays the
    /// built-in kernel specs).
    #[arg(short, long)]
    specs: Option<PathBuf>,
    /// Output directory for plan.json.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(short, long)]
    recipe: PathBuf,
    #[arg(short, long)]
    specs: Option<PathBuf>,
    /// Template directory overriding the built-in templates/macros.
    #[arg(short, long)]
    templates: Option<PathBuf>,
    /// Output directory (glue and layouts land under `gen/`).
    #[arg(short, long, default_value = ".")]
    out: PathBuf,
    /// Blocks per packet assumed for the emitted layout tables.
    #[arg(long, default_value_t = 1)]
    nblocks_per_packet: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Measured,
    Modeled,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(short, long)]
    recipe: PathBuf,
    #[arg(short, long)]
    specs: Option<PathBuf>,
    /// Run configuration file (JSON) with problem, mesh, dt, steps, and
    /// pipeline settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Execute with thread teams (measured) or the event model (modeled).
    #[arg(long, value_enum, default_value = "measured")]
    mode: Mode,
    #[arg(long)]
    nblocks_per_packet: Option<usize>,
    /// Per-team worker counts, e.g. `tf_0=4,tf_1=2`.
    #[arg(long)]
    teams: Option<String>,
    /// Maximum packets in flight on the device link.
    #[arg(long)]
    streams: Option<usize>,
    /// Fraction of blocks sent to the CPU branch in split mode.
    #[arg(long)]
    split_ratio: Option<f64>,
    /// Number of cycles to run.
    #[arg(long)]
    steps: Option<u64>,
    /// Cost model (modeled mode).
    #[arg(long)]
    cost: Option<PathBuf>,
    /// Seed for the initial-condition perturbation (0 = none).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write a raw mesh dump into this directory after the run.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Also write the report JSON into this directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(short, long)]
    recipe: PathBuf,
    #[arg(short, long)]
    specs: Option<PathBuf>,
    /// Cost model file; the built-in default profile when omitted.
    #[arg(long)]
    cost: Option<PathBuf>,
    /// Sweep specification, e.g. `nblocks=5,10,20,40,80,160`.
    #[arg(long)]
    sweep: String,
    /// Total blocks per cycle.
    #[arg(long, default_value_t = 160)]
    nblocks_total: usize,
    /// Run configuration supplying mesh/team/donation settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    split_ratio: Option<f64>,
    /// Output directory for bench.csv (also printed to stdout).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Run configuration file
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
struct MeshConfig {
    nbx: usize,
    nby: usize,
    nxb: usize,
    nyb: usize,
    nguard: usize,
    lengths: [f64; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
struct PipelineOverrides {
    teams: Option<Vec<ThreadTeamConfig>>,
    n_blocks_per_packet: Option<usize>,
    streams: Option<usize>,
    donation_edges: Option<Vec<(String, String)>>,
    split_ratio: Option<f64>,
    link: Option<LinkCost>,
    watchdog_timeout_s: Option<f64>,
    externals: Option<BTreeMap<String, f64>>,
}

/// The run configuration file: problem setup plus pipeline settings.
#[derive(Clone, Debug, Serialize, Deserialize, Default)]
struct RunConfig {
    problem: Option<String>,
    mesh: Option<MeshConfig>,
    dt: Option<f64>,
    steps: Option<u64>,
    #[serde(default)]
    pipeline: PipelineOverrides,
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn validation(e: impl std::fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<crate::runtime::RuntimeError> for CliError {
    fn from(e: crate::runtime::RuntimeError) -> Self {
        match e {
            crate::runtime::RuntimeError::InvalidConfig(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Entry point; returns the process exit code.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own help/version output
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help { 0 } else { 1 };
        }
    };
    let result = match cli.cmd {
        Cmd::Inspect(a) => cmd_inspect(a),
        Cmd::Plan(a) => cmd_plan(a),
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Run(a) => cmd_run(a),
        Cmd::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("runtime error: {msg}");
            2
        }
    }
}

/// Rendered long help, used by the help golden test.
pub fn long_help() -> String {
    let mut cmd = Cli::command();
    let mut out = cmd.render_long_help().to_string();
    for sub in ["inspect", "plan", "generate", "run", "bench"] {
        let mut c = Cli::command();
        let subcmd = c.find_subcommand_mut(sub).expect("subcommand exists");
        out.push_str("\n--------\n");
        out.push_str(&subcmd.render_long_help().to_string());
    }
    out
}

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn write_out(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Validation(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, contents)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Built-in kernel specs overlaid with any exported spec documents in
/// `dir`.
fn load_specs(dir: Option<&Path>) -> CliResult<SpecRegistry> {
    let mut reg = kernels::corpus_spec_registry();
    if let Some(dir) = dir {
        let entries = std::fs::read_dir(dir)
            .map_err(|e| CliError::Validation(format!("{}: {e}", dir.display())))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|x| x.to_str()) == Some("json"))
            .collect();
        paths.sort();
        for p in paths {
            let spec = import_spec(&read(&p)?).map_err(CliError::validation)?;
            reg.insert(spec);
        }
    }
    Ok(reg)
}

fn build_plan(recipe_path: &Path, specs_dir: Option<&Path>) -> CliResult<(PlanGraph, ExecutablePlan)> {
    let graph = load_recipe(&read(recipe_path)?).map_err(CliError::validation)?;
    let specs = load_specs(specs_dir)?;
    let plan = fuse(&graph, &specs).map_err(CliError::validation)?;
    let exec = emit_plan(&plan).map_err(CliError::validation)?;
    Ok((plan, exec))
}

fn cmd_inspect(a: InspectArgs) -> CliResult<()> {
    for path in &a.sources {
        let text = read(path)?;
        let specs = parse_annotations_named(&text, &a.sentinel, &path.display().to_string())
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        for spec in &specs {
            print!("{}", export_spec(spec));
        }
    }
    Ok(())
}

fn cmd_plan(a: PlanArgs) -> CliResult<()> {
    let (plan, _) = build_plan(&a.recipe, a.specs.as_deref())?;
    println!(
        "plan for recipe `{}`: {} task function(s)",
        plan.recipe,
        plan.task_functions.len()
    );
    for tf in &plan.task_functions {
        let item = match tf.data_item {
            DataItemKind::DataPacket => "data packet",
            DataItemKind::TileWrapper => "tile wrapper",
        };
        println!(
            "  {} [{} / {}]: {}",
            tf.id,
            tf.device.as_str(),
            item,
            tf.routines.join(" -> ")
        );
    }
    println!("edges:");
    for e in &plan.edges {
        let kind = serde_json::to_string(&e.kind).expect("edge kind serializes");
        match &e.merge_kernel {
            Some(k) => println!("  {} -> {} ({}, merge kernel `{k}`)", e.from, e.to, kind.trim_matches('"')),
            None => println!("  {} -> {} ({})", e.from, e.to, kind.trim_matches('"')),
        }
    }
    if let Some(out) = &a.out {
        let path = out.join("plan.json");
        write_out(&path, &plan.to_json())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> CliResult<()> {
    let (plan, exec) = build_plan(&a.recipe, a.specs.as_deref())?;
    let (templates, macros) = match &a.templates {
        Some(dir) => TemplateLibrary::load_with_overrides(dir).map_err(CliError::validation)?,
        None => (TemplateLibrary::defaults(), TemplateLibrary::default_macros()),
    };
    let gen = a.out.join("gen");
    for tf in &plan.task_functions {
        let tree = build_tree(tf, &templates, &macros).map_err(CliError::validation)?;
        let glue = tree.render().map_err(CliError::validation)?;
        write_out(&gen.join(format!("{}.glue", tf.id)), &glue)?;
        if tf.data_item == DataItemKind::DataPacket {
            let params = MeshParams {
                nxb: 16,
                nyb: 16,
                nguard: 2,
                nvars: crate::mesh::NVARS,
            };
            let layout = packet::layout(&tf.spec, a.nblocks_per_packet, &params)
                .map_err(CliError::validation)?;
            write_out(&gen.join(format!("layout_{}.json", tf.id)), &layout.to_json())?;
        }
    }
    write_out(&gen.join("plan.json"), &plan.to_json())?;
    write_out(&gen.join("exec_plan.json"), &exec.to_json())?;
    println!("wrote glue and plan under {}", gen.display());
    Ok(())
}

fn parse_teams_flag(s: &str) -> CliResult<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (name, count) = part
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("bad --teams entry `{part}`")))?;
        let count: usize = count
            .trim()
            .parse()
            .map_err(|_| CliError::Validation(format!("bad worker count in `{part}`")))?;
        out.push((name.trim().to_owned(), count));
    }
    Ok(out)
}

fn load_run_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => serde_json::from_str(&read(p)?)
            .map_err(|e| CliError::Validation(format!("{}: {e}", p.display()))),
        None => Ok(RunConfig::default()),
    }
}

struct Problem {
    mesh: Arc<BlockMesh>,
    dt: f64,
    steps: u64,
}

fn setup_problem(cfg: &RunConfig, recipe_name: &str, seed: u64) -> Problem {
    let cellular = cfg
        .problem
        .as_deref()
        .map(|p| p == "cellular")
        .unwrap_or_else(|| recipe_name.contains("cellular"));
    let default_mesh = if cellular {
        MeshConfig {
            nbx: 8,
            nby: 8,
            nxb: 16,
            nyb: 16,
            nguard: 2,
            lengths: [256.0, 25.0],
        }
    } else {
        MeshConfig {
            nbx: 8,
            nby: 8,
            nxb: 16,
            nyb: 16,
            nguard: 2,
            lengths: [1.0, 1.0],
        }
    };
    let m = cfg.mesh.clone().unwrap_or(default_mesh);
    let mesh = Arc::new(BlockMesh::new(m.nbx, m.nby, m.nxb, m.nyb, m.nguard, m.lengths));
    if cellular {
        kernels::init_cellular(&mesh, &CellularSurrogateConfig::default(), seed);
    } else {
        kernels::init_sedov(&mesh, seed);
    }
    Problem {
        mesh,
        dt: cfg.dt.unwrap_or(if cellular { 1e-9 } else { 2e-3 }),
        steps: cfg.steps.unwrap_or(10),
    }
}

fn apply_overrides(base: &mut PipelineConfig, o: &PipelineOverrides) {
    if let Some(teams) = &o.teams {
        for t in teams {
            match base.teams.iter_mut().find(|x| x.name == t.name) {
                Some(existing) => *existing = t.clone(),
                None => base.teams.push(t.clone()),
            }
        }
    }
    if let Some(n) = o.n_blocks_per_packet {
        base.n_blocks_per_packet = n;
    }
    if let Some(s) = o.streams {
        base.streams = s;
    }
    if let Some(d) = &o.donation_edges {
        base.donation_edges = d.clone();
    }
    if let Some(r) = o.split_ratio {
        base.split_ratio = r;
    }
    if let Some(l) = o.link {
        base.link = l;
    }
    if let Some(w) = o.watchdog_timeout_s {
        base.watchdog_timeout_s = w;
    }
    if let Some(e) = &o.externals {
        base.externals = e.clone();
    }
}

fn cmd_run(a: RunArgs) -> CliResult<()> {
    let (_, exec) = build_plan(&a.recipe, a.specs.as_deref())?;
    let config = load_run_config(a.config.as_deref())?;
    let problem = setup_problem(&config, &exec.recipe, a.seed);
    let steps = a.steps.unwrap_or(problem.steps);

    let mut pipeline = PipelineConfig::for_plan(&exec);
    apply_overrides(&mut pipeline, &config.pipeline);
    if let Some(n) = a.nblocks_per_packet {
        pipeline.n_blocks_per_packet = n;
    }
    if let Some(s) = a.streams {
        pipeline.streams = s;
    }
    if let Some(r) = a.split_ratio {
        pipeline.split_ratio = r;
    }
    if let Some(teams) = &a.teams {
        for (name, count) in parse_teams_flag(teams)? {
            pipeline.set_workers(&name, count);
        }
    }

    match a.mode {
        Mode::Measured => {
            let registry = Arc::new(KernelRegistry::builtin());
            let mut rt = start_teams(pipeline)?;
            let mut total: Option<RunReport> = None;
            for _ in 0..steps {
                let report =
                    rt.run_cycle(&exec, &problem.mesh, &registry, StepInputs { dt: problem.dt })?;
                match &mut total {
                    Some(t) => t.merge_cycle(report),
                    None => total = Some(report),
                }
            }
            let report = total.ok_or_else(|| CliError::Validation("steps must be >= 1".into()))?;
            print!("{}", report.to_json());
            if let Some(out) = &a.out {
                write_out(&out.join("report.json"), &report.to_json())?;
            }
            if let Some(dump) = &a.dump {
                problem
                    .mesh
                    .dump(dump)
                    .map_err(|e| CliError::Runtime(format!("dump: {e}")))?;
            }
        }
        Mode::Modeled => {
            let cost = match &a.cost {
                Some(p) => CostModel::from_json(&read(p)?).map_err(CliError::validation)?,
                None => CostModel::default_profile(),
            };
            let opts = SimOptions {
                team_workers: pipeline
                    .teams
                    .iter()
                    .map(|t| (t.name.clone(), t.workers))
                    .collect(),
                donation_edges: pipeline.donation_edges.clone(),
                split_ratio: pipeline.split_ratio,
            };
            let report = perf::simulate(
                &exec,
                &cost,
                &problem.mesh.params(),
                problem.mesh.n_blocks(),
                pipeline.n_blocks_per_packet,
                &opts,
            )
            .map_err(CliError::validation)?;
            print!("{}", report.to_json());
            if let Some(out) = &a.out {
                write_out(&out.join("sim_report.json"), &report.to_json())?;
            }
        }
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CliResult<()> {
    let (_, exec) = build_plan(&a.recipe, a.specs.as_deref())?;
    let config = load_run_config(a.config.as_deref())?;
    let cost = match &a.cost {
        Some(p) => CostModel::from_json(&read(p)?).map_err(CliError::validation)?,
        None => CostModel::default_profile(),
    };

    let (key, values) = a
        .sweep
        .split_once('=')
        .ok_or_else(|| CliError::Validation("expected --sweep key=v1,v2,...".into()))?;
    if !matches!(key.trim(), "nblocks" | "p") {
        return Err(CliError::Validation(format!(
            "unsupported sweep key `{key}` (use `nblocks`)"
        )));
    }
    let sizes: Vec<usize> = values
        .split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Validation(format!("bad sweep value: {e}")))?;

    let mut pipeline = PipelineConfig::for_plan(&exec);
    apply_overrides(&mut pipeline, &config.pipeline);
    if let Some(r) = a.split_ratio {
        pipeline.split_ratio = r;
    }
    let mesh_params = config
        .mesh
        .as_ref()
        .map(|m| MeshParams {
            nxb: m.nxb,
            nyb: m.nyb,
            nguard: m.nguard,
            nvars: crate::mesh::NVARS,
        })
        .unwrap_or(MeshParams {
            nxb: 16,
            nyb: 16,
            nguard: 2,
            nvars: crate::mesh::NVARS,
        });
    let opts = SimOptions {
        team_workers: pipeline
            .teams
            .iter()
            .map(|t| (t.name.clone(), t.workers))
            .collect(),
        donation_edges: pipeline.donation_edges.clone(),
        split_ratio: pipeline.split_ratio,
    };
    let csv = perf::sweep(&exec, &cost, &mesh_params, a.nblocks_total, &sizes, &opts)
        .map_err(CliError::validation)?;
    print!("{csv}");
    if let Some(out) = &a.out {
        write_out(&out.join("bench.csv"), &csv)?;
    }
    Ok(())
}
