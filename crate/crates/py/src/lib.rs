//! Python bindings: the main planning, generation, and execution entry
//! points, JSON strings in and out so scripts can drive the pipeline
//! without any wrapper classes.

use std::collections::BTreeMap;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use blockflow::annotations;
use blockflow::codegen::{build_tree, emit_plan, TemplateLibrary};
use blockflow::expr::MeshParams;
use blockflow::kernels::{self, KernelRegistry};
use blockflow::macroproc::DefinitionSet;
use blockflow::mesh::BlockMesh;
use blockflow::packet;
use blockflow::perf::{self, CostModel, SimOptions};
use blockflow::planner::{fuse, PlanGraph, SpecRegistry};
use blockflow::recipe;
use blockflow::runtime::{start_teams, PipelineConfig, StepInputs};

fn val_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn registry_with(extra_specs: Vec<String>) -> PyResult<SpecRegistry> {
    let mut reg = kernels::corpus_spec_registry();
    for doc in extra_specs {
        reg.insert(annotations::import_spec(&doc).map_err(val_err)?);
    }
    Ok(reg)
}

fn plan_from(document: &str, extra_specs: Vec<String>) -> PyResult<PlanGraph> {
    let graph = recipe::load_recipe(document).map_err(val_err)?;
    let reg = registry_with(extra_specs)?;
    fuse(&graph, &reg).map_err(val_err)
}

/// Parse annotation blocks out of kernel source text; returns one
/// canonical spec document per annotated routine.
#[pyfunction]
#[pyo3(signature = (source_text, comment_sentinel = "!!"))]
fn parse_annotations(source_text: &str, comment_sentinel: &str) -> PyResult<Vec<String>> {
    let specs =
        annotations::parse_annotations(source_text, comment_sentinel).map_err(val_err)?;
    Ok(specs.iter().map(annotations::export_spec).collect())
}

/// Validate a recipe document; returns the normalized document text.
#[pyfunction]
fn load_recipe(document: &str) -> PyResult<String> {
    Ok(recipe::load_recipe(document).map_err(val_err)?.render())
}

/// Deterministic topological order of a recipe's work nodes.
#[pyfunction]
fn topological_order(document: &str) -> PyResult<Vec<String>> {
    Ok(recipe::load_recipe(document)
        .map_err(val_err)?
        .topological_order())
}

/// Fuse a recipe into task functions; returns plan.json text.
#[pyfunction]
#[pyo3(signature = (document, extra_specs = Vec::new()))]
fn plan_recipe(document: &str, extra_specs: Vec<String>) -> PyResult<String> {
    Ok(plan_from(document, extra_specs)?.to_json())
}

/// Lower a recipe to the executable plan the runtime interprets.
#[pyfunction]
#[pyo3(signature = (document, extra_specs = Vec::new()))]
fn executable_plan(document: &str, extra_specs: Vec<String>) -> PyResult<String> {
    let plan = plan_from(document, extra_specs)?;
    Ok(emit_plan(&plan).map_err(val_err)?.to_json())
}

/// Render the glue text of one task function of a recipe's plan.
#[pyfunction]
#[pyo3(signature = (document, tf_id, extra_specs = Vec::new()))]
fn render_glue(document: &str, tf_id: &str, extra_specs: Vec<String>) -> PyResult<String> {
    let plan = plan_from(document, extra_specs)?;
    let tf = plan
        .task_function(tf_id)
        .ok_or_else(|| val_err(format!("no task function `{tf_id}`")))?;
    let tree = build_tree(tf, &TemplateLibrary::defaults(), &TemplateLibrary::default_macros())
        .map_err(val_err)?;
    tree.render().map_err(val_err)
}

/// Expand `@NAME(args)` macros in `text` against a definition file.
#[pyfunction]
#[pyo3(signature = (definitions, text, active_qualifiers = vec!["default".to_owned()]))]
fn expand_macros(definitions: &str, text: &str, active_qualifiers: Vec<String>) -> PyResult<String> {
    let set = DefinitionSet::parse(definitions).map_err(val_err)?;
    set.expand(text, &active_qualifiers).map_err(val_err)
}

/// Packet layout of one annotated routine's data at `n_blocks` blocks per
/// packet; returns the layout table as JSON.
#[pyfunction]
#[pyo3(signature = (routine_spec, n_blocks, nxb = 16, nyb = 16, nguard = 2))]
fn packet_layout(
    routine_spec: &str,
    n_blocks: usize,
    nxb: usize,
    nyb: usize,
    nguard: usize,
) -> PyResult<String> {
    let spec = annotations::import_spec(routine_spec).map_err(val_err)?;
    let consolidated = blockflow::planner::consolidate(&[&spec]).map_err(val_err)?;
    let params = MeshParams {
        nxb,
        nyb,
        nguard,
        nvars: blockflow::mesh::NVARS,
    };
    Ok(packet::layout(&consolidated, n_blocks, &params)
        .map_err(val_err)?
        .to_json())
}

/// The default cost profile as JSON.
#[pyfunction]
fn default_cost_profile() -> String {
    CostModel::default_profile().to_json()
}

/// Simulate one cycle of a recipe's pipeline in the deterministic event
/// model; returns the simulation report as JSON.
#[pyfunction]
#[pyo3(signature = (document, cost_json = None, n_blocks_total = 160, n_per_packet = 16,
                     split_ratio = 0.5, extra_specs = Vec::new()))]
fn simulate(
    document: &str,
    cost_json: Option<&str>,
    n_blocks_total: usize,
    n_per_packet: usize,
    split_ratio: f64,
    extra_specs: Vec<String>,
) -> PyResult<String> {
    let plan = plan_from(document, extra_specs)?;
    let exec = emit_plan(&plan).map_err(val_err)?;
    let cost = match cost_json {
        Some(c) => CostModel::from_json(c).map_err(val_err)?,
        None => CostModel::default_profile(),
    };
    let params = MeshParams {
        nxb: 16,
        nyb: 16,
        nguard: 2,
        nvars: blockflow::mesh::NVARS,
    };
    let opts = SimOptions {
        team_workers: BTreeMap::new(),
        donation_edges: Vec::new(),
        split_ratio,
    };
    let report = perf::simulate(&exec, &cost, &params, n_blocks_total, n_per_packet, &opts)
        .map_err(val_err)?;
    Ok(report.to_json())
}

/// Run a recipe with the measured (thread-team) runtime on a small mesh;
/// returns the run report as JSON, including per-variable checksums.
#[pyfunction]
#[pyo3(signature = (document, problem = "sedov", steps = 2, dt = None, nbx = 4, nby = 4,
                     nxb = 8, n_per_packet = 8, split_ratio = 0.5, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn run_pipeline(
    document: &str,
    problem: &str,
    steps: u64,
    dt: Option<f64>,
    nbx: usize,
    nby: usize,
    nxb: usize,
    n_per_packet: usize,
    split_ratio: f64,
    seed: u64,
) -> PyResult<String> {
    let plan = plan_from(document, Vec::new())?;
    let exec = emit_plan(&plan).map_err(val_err)?;
    let registry = Arc::new(KernelRegistry::builtin());

    let (lengths, default_dt) = match problem {
        "cellular" => ([256.0, 25.0], 1e-9),
        "sedov" => ([1.0, 1.0], 2e-3),
        other => return Err(val_err(format!("unknown problem `{other}`"))),
    };
    let mesh = Arc::new(BlockMesh::new(nbx, nby, nxb, nxb, 2, lengths));
    if problem == "cellular" {
        kernels::init_cellular(&mesh, &kernels::CellularSurrogateConfig::default(), seed);
    } else {
        kernels::init_sedov(&mesh, seed);
    }

    let mut cfg = PipelineConfig::for_plan(&exec);
    cfg.n_blocks_per_packet = n_per_packet;
    cfg.split_ratio = split_ratio;
    let mut rt = start_teams(cfg).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let mut total: Option<blockflow::runtime::RunReport> = None;
    for _ in 0..steps {
        let report = rt
            .run_cycle(&exec, &mesh, &registry, StepInputs { dt: dt.unwrap_or(default_dt) })
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        match &mut total {
            Some(t) => t.merge_cycle(report),
            None => total = Some(report),
        }
    }
    Ok(total.expect("steps >= 1").to_json())
}

#[pymodule]
fn blockflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(parse_annotations, m)?)?;
    m.add_function(wrap_pyfunction!(load_recipe, m)?)?;
    m.add_function(wrap_pyfunction!(topological_order, m)?)?;
    m.add_function(wrap_pyfunction!(plan_recipe, m)?)?;
    m.add_function(wrap_pyfunction!(executable_plan, m)?)?;
    m.add_function(wrap_pyfunction!(render_glue, m)?)?;
    m.add_function(wrap_pyfunction!(expand_macros, m)?)?;
    m.add_function(wrap_pyfunction!(packet_layout, m)?)?;
    m.add_function(wrap_pyfunction!(default_cost_profile, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
