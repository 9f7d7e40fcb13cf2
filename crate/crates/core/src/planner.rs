//! Fuses the recipe DAG into per-device task functions, consolidates their
//! data requirements, and derives the pipeline topology.
//!
//! Fusion is a deterministic greedy rule over the topological order: a node
//! joins the group of a predecessor iff it is mapped to the same device,
//! every one of its in-neighbors is already in that group, and the quotient
//! graph stays acyclic; otherwise it starts a new singleton task function.
//! The rule is intentionally replaceable: everything downstream consumes
//! only the resulting [`PlanGraph`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{
    ArgSource, MetadataKind, RoutineSpec, ScalarKind, StructureIndex,
};
use crate::device::{DataItemKind, DeviceTarget};
use crate::recipe::{RecipeGraph, BEGIN_ID};

/// Name of the pipeline entry point in plan documents.
pub const DISTRIBUTOR: &str = "distributor";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("no routine specification registered for action `{action}`")]
    MissingRoutineSpec { action: String },
    #[error("action `{action}` has no implementation variant for device `{device}`")]
    DeviceVariantUnavailable { action: String, device: String },
    #[error("scratch `{name}` is declared with conflicting extents")]
    ConflictingScratchExtents { name: String },
    #[error("external `{name}` is declared with conflicting scalar kinds")]
    ConflictingExternalKind { name: String },
    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),
    #[error("plan document error: {0}")]
    Document(String),
}

/// Registry of routine specifications plus the set of registered merge
/// kernels (the combine step of parallel-branch topologies).
#[derive(Debug, Clone, Default)]
pub struct SpecRegistry {
    specs: BTreeMap<String, RoutineSpec>,
    merge_kernels: BTreeSet<String>,
}

impl SpecRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, spec: RoutineSpec) {
        self.specs.insert(spec.name.clone(), spec);
    }

    pub fn insert_merge(&mut self, spec: RoutineSpec) {
        self.merge_kernels.insert(spec.name.clone());
        self.insert(spec);
    }

    pub fn mark_merge(&mut self, name: &str) {
        self.merge_kernels.insert(name.to_owned());
    }

    pub fn get(&self, action: &str) -> Option<&RoutineSpec> {
        self.specs.get(action)
    }

    pub fn is_merge(&self, action: &str) -> bool {
        self.merge_kernels.contains(action)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.keys().map(String::as_str)
    }
}

/// Reference to one entry of a consolidated specification.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum EntryRef {
    External(String),
    TileMetadata(MetadataKind),
    GridData(StructureIndex),
    Scratch(String),
}

impl std::fmt::Display for EntryRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EntryRef::External(n) => write!(f, "external:{n}"),
            EntryRef::TileMetadata(k) => write!(f, "tile_metadata:{}", k.as_str()),
            EntryRef::GridData(s) => write!(f, "grid_data:{}", s.as_str()),
            EntryRef::Scratch(n) => write!(f, "scratch:{n}"),
        }
    }
}

impl EntryRef {
    pub fn parse(s: &str) -> Option<Self> {
        let (kind, rest) = s.split_once(':')?;
        match kind {
            "external" => Some(EntryRef::External(rest.to_owned())),
            "tile_metadata" => MetadataKind::parse(rest).map(EntryRef::TileMetadata),
            "grid_data" => StructureIndex::parse(rest).map(EntryRef::GridData),
            "scratch" => Some(EntryRef::Scratch(rest.to_owned())),
            _ => None,
        }
    }
}

impl Serialize for EntryRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for EntryRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        EntryRef::parse(&raw)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid entry ref `{raw}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalEntry {
    pub name: String,
    pub kind: ScalarKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridEntry {
    pub structure_index: StructureIndex,
    pub variables_in: BTreeSet<String>,
    pub variables_out: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScratchEntry {
    pub name: String,
    pub extents: Vec<String>,
    pub lbound: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgBinding {
    pub arg: String,
    pub entry: EntryRef,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutineBinding {
    pub routine: String,
    pub args: Vec<ArgBinding>,
}

/// Deduplicated union of all data needed by a task function's routines.
///
/// Entry order is deterministic: externals, tile metadata, grid data,
/// scratch, each section alphabetical.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ConsolidatedArgSpec {
    pub externals: Vec<ExternalEntry>,
    pub tile_metadata: Vec<MetadataKind>,
    pub grid_data: Vec<GridEntry>,
    pub scratch: Vec<ScratchEntry>,
    /// One binding per member routine, in task-function order; each maps
    /// the routine's arguments (in declaration order) to consolidated
    /// entries.
    pub bindings: Vec<RoutineBinding>,
}

impl ConsolidatedArgSpec {
    /// Consolidated entries in canonical order.
    pub fn entries(&self) -> Vec<EntryRef> {
        let mut out = Vec::new();
        out.extend(self.externals.iter().map(|e| EntryRef::External(e.name.clone())));
        out.extend(self.tile_metadata.iter().map(|k| EntryRef::TileMetadata(*k)));
        out.extend(
            self.grid_data
                .iter()
                .map(|g| EntryRef::GridData(g.structure_index)),
        );
        out.extend(self.scratch.iter().map(|s| EntryRef::Scratch(s.name.clone())));
        out
    }

    pub fn grid_entry(&self, si: StructureIndex) -> Option<&GridEntry> {
        self.grid_data.iter().find(|g| g.structure_index == si)
    }

    pub fn scratch_entry(&self, name: &str) -> Option<&ScratchEntry> {
        self.scratch.iter().find(|s| s.name == name)
    }
}

/// Builds the union of the given routines' data requirements.
pub fn consolidate(routines: &[&RoutineSpec]) -> Result<ConsolidatedArgSpec, PlanError> {
    assert!(!routines.is_empty(), "consolidate requires at least one routine");
    let mut externals: BTreeMap<String, ScalarKind> = BTreeMap::new();
    let mut metadata: BTreeSet<MetadataKind> = BTreeSet::new();
    let mut grids: BTreeMap<StructureIndex, (BTreeSet<String>, BTreeSet<String>)> = BTreeMap::new();
    let mut scratch: BTreeMap<String, (Vec<String>, Vec<String>)> = BTreeMap::new();
    let mut bindings = Vec::with_capacity(routines.len());

    for r in routines {
        let mut args = Vec::with_capacity(r.arguments.len());
        for a in &r.arguments {
            let entry = match &a.source {
                ArgSource::External { scalar_kind } => {
                    match externals.get(&a.name) {
                        Some(k) if k != scalar_kind => {
                            return Err(PlanError::ConflictingExternalKind {
                                name: a.name.clone(),
                            })
                        }
                        _ => {
                            externals.insert(a.name.clone(), *scalar_kind);
                        }
                    }
                    EntryRef::External(a.name.clone())
                }
                ArgSource::TileMetadata { kind } => {
                    metadata.insert(*kind);
                    EntryRef::TileMetadata(*kind)
                }
                ArgSource::GridData {
                    structure_index,
                    variables_in,
                    variables_out,
                } => {
                    let slot = grids.entry(*structure_index).or_default();
                    slot.0.extend(variables_in.iter().cloned());
                    slot.1.extend(variables_out.iter().cloned());
                    EntryRef::GridData(*structure_index)
                }
                ArgSource::Scratch { extents, lbound } => {
                    match scratch.get(&a.name) {
                        Some((e, l)) if e != extents || l != lbound => {
                            return Err(PlanError::ConflictingScratchExtents {
                                name: a.name.clone(),
                            })
                        }
                        _ => {
                            scratch.insert(a.name.clone(), (extents.clone(), lbound.clone()));
                        }
                    }
                    EntryRef::Scratch(a.name.clone())
                }
            };
            args.push(ArgBinding {
                arg: a.name.clone(),
                entry,
            });
        }
        bindings.push(RoutineBinding {
            routine: r.name.clone(),
            args,
        });
    }

    Ok(ConsolidatedArgSpec {
        externals: externals
            .into_iter()
            .map(|(name, kind)| ExternalEntry { name, kind })
            .collect(),
        tile_metadata: metadata.into_iter().collect(),
        grid_data: grids
            .into_iter()
            .map(|(structure_index, (variables_in, variables_out))| GridEntry {
                structure_index,
                variables_in,
                variables_out,
            })
            .collect(),
        scratch: scratch
            .into_iter()
            .map(|(name, (extents, lbound))| ScratchEntry {
                name,
                extents,
                lbound,
            })
            .collect(),
        bindings,
    })
}

/// A fused group of action routines executed as one unit on one device.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFunction {
    pub id: String,
    pub device: DeviceTarget,
    pub data_item: DataItemKind,
    /// Action routine names in execution order.
    pub routines: Vec<String>,
    /// Recipe node ids fused into this task function, in execution order.
    pub nodes: Vec<String>,
    pub spec: ConsolidatedArgSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    HandOff,
    DeviceMover,
    Duplicate,
    Merge,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEdge {
    pub from: String,
    pub to: String,
    pub kind: EdgeKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub merge_kernel: Option<String>,
}

/// The quotient dataflow graph over task functions, plus the distributor
/// entry point.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanGraph {
    pub recipe: String,
    pub distributor: String,
    pub task_functions: Vec<TaskFunction>,
    pub edges: Vec<PlanEdge>,
}

impl PlanGraph {
    pub fn task_function(&self, id: &str) -> Option<&TaskFunction> {
        self.task_functions.iter().find(|t| t.id == id)
    }

    /// Task-function level edges (distributor edges excluded).
    pub fn tf_edges(&self) -> Vec<&PlanEdge> {
        self.edges.iter().filter(|e| e.from != self.distributor).collect()
    }

    pub fn tf_predecessors(&self, id: &str) -> Vec<&str> {
        self.tf_edges()
            .iter()
            .filter(|e| e.to == id)
            .map(|e| e.from.as_str())
            .collect()
    }

    pub fn tf_successors(&self, id: &str) -> Vec<&str> {
        self.tf_edges()
            .iter()
            .filter(|e| e.from == id)
            .map(|e| e.to.as_str())
            .collect()
    }

    /// Entry task functions: distributor-fed, no task-function in-edges.
    pub fn entries(&self) -> Vec<&TaskFunction> {
        self.task_functions
            .iter()
            .filter(|t| {
                self.tf_predecessors(&t.id).is_empty()
                    && self
                        .edges
                        .iter()
                        .any(|e| e.from == self.distributor && e.to == t.id)
            })
            .collect()
    }

    /// Canonical JSON serialization (golden-testable).
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, PlanError> {
        serde_json::from_str(text).map_err(|e| PlanError::Document(e.to_string()))
    }
}

/// Fuses a validated recipe graph into a plan.
pub fn fuse(g: &RecipeGraph, reg: &SpecRegistry) -> Result<PlanGraph, PlanError> {
    // Validate actions up front so errors do not depend on fusion order.
    for node in g.nodes() {
        let spec = reg
            .get(&node.action)
            .ok_or_else(|| PlanError::MissingRoutineSpec {
                action: node.action.clone(),
            })?;
        if !spec.device_variants.contains(&node.device) {
            return Err(PlanError::DeviceVariantUnavailable {
                action: node.action.clone(),
                device: node.device.as_str().to_owned(),
            });
        }
    }

    let order = g.topological_order();
    let mut group_of: BTreeMap<String, usize> = BTreeMap::new();
    let mut groups: Vec<(DeviceTarget, Vec<String>)> = Vec::new();

    for id in &order {
        let node = g.node(id).expect("node exists");
        let preds = g.predecessors(id);
        let mut joined = false;
        if !preds.is_empty() {
            let first = group_of[preds[0]];
            let all_same_group = preds.iter().all(|p| group_of[*p] == first);
            if all_same_group && groups[first].0 == node.device {
                // tentative join; keep only if the quotient stays acyclic
                group_of.insert(id.clone(), first);
                if quotient_is_acyclic(g, &group_of) {
                    groups[first].1.push(id.clone());
                    joined = true;
                } else {
                    group_of.remove(id);
                }
            }
        }
        if !joined {
            group_of.insert(id.clone(), groups.len());
            groups.push((node.device.clone(), vec![id.clone()]));
        }
    }

    // Build task functions.
    let mut task_functions = Vec::with_capacity(groups.len());
    for (idx, (device, nodes)) in groups.iter().enumerate() {
        let routines: Vec<String> = nodes
            .iter()
            .map(|n| g.node(n).expect("node exists").action.clone())
            .collect();
        let specs: Vec<&RoutineSpec> = routines
            .iter()
            .map(|r| reg.get(r).expect("validated above"))
            .collect();
        task_functions.push(TaskFunction {
            id: format!("tf_{idx}"),
            device: device.clone(),
            data_item: DataItemKind::for_device(device),
            routines,
            nodes: nodes.clone(),
            spec: consolidate(&specs)?,
        });
    }

    // Quotient edges, deduplicated in first-occurrence order.
    let mut edges: Vec<PlanEdge> = Vec::new();
    let mut seen = BTreeSet::new();
    for node in g.nodes() {
        let to_group = group_of[&node.id];
        for a in &node.after {
            let (from, from_device) = if a == BEGIN_ID {
                (DISTRIBUTOR.to_owned(), None)
            } else {
                let gidx = group_of[a];
                if gidx == to_group {
                    continue;
                }
                (format!("tf_{gidx}"), Some(&groups[gidx].0))
            };
            let to = format!("tf_{to_group}");
            if !seen.insert((from.clone(), to.clone())) {
                continue;
            }
            let kind = match from_device {
                Some(d) if d.is_gpu() && groups[to_group].0.is_cpu() => EdgeKind::DeviceMover,
                _ => EdgeKind::HandOff,
            };
            edges.push(PlanEdge {
                from,
                to,
                kind,
                merge_kernel: None,
            });
        }
    }

    let mut plan = PlanGraph {
        recipe: g.name.clone(),
        distributor: DISTRIBUTOR.to_owned(),
        task_functions,
        edges,
    };
    classify_fan_out(&mut plan, reg);
    Ok(plan)
}

/// Marks duplicate/merge edges for two-branch fan-outs. Branches that run
/// the same action sequence stay hand-off edges (the distributor splits
/// blocks between them at runtime); branches with different actions get
/// every block duplicated and a per-block merge barrier at the join.
fn classify_fan_out(plan: &mut PlanGraph, reg: &SpecRegistry) {
    let entries: Vec<String> = plan.entries().iter().map(|t| t.id.clone()).collect();
    if entries.len() != 2 {
        return;
    }
    let a = plan.task_function(&entries[0]).expect("entry exists").clone();
    let b = plan.task_function(&entries[1]).expect("entry exists").clone();
    if a.routines == b.routines {
        return; // split-mode candidate
    }
    // common direct successor?
    let succ_a: BTreeSet<String> = plan.tf_successors(&a.id).iter().map(|s| s.to_string()).collect();
    let succ_b: BTreeSet<String> = plan.tf_successors(&b.id).iter().map(|s| s.to_string()).collect();
    let common: Vec<&String> = succ_a.intersection(&succ_b).collect();
    if common.len() != 1 {
        return;
    }
    let join = common[0].clone();
    let join_tf = plan.task_function(&join).expect("join exists");
    let merge_kernel = if join_tf.routines.len() == 1 && reg.is_merge(&join_tf.routines[0]) {
        Some(join_tf.routines[0].clone())
    } else {
        None
    };
    for e in &mut plan.edges {
        if e.from == plan.distributor && (e.to == a.id || e.to == b.id) {
            e.kind = EdgeKind::Duplicate;
        }
        if e.to == join && (e.from == a.id || e.from == b.id) {
            if let Some(k) = &merge_kernel {
                e.kind = EdgeKind::Merge;
                e.merge_kernel = Some(k.clone());
            }
        }
    }
}

/// Checks acyclicity of the quotient graph induced by a (possibly partial)
/// node-to-group assignment; unassigned nodes count as singletons.
fn quotient_is_acyclic(g: &RecipeGraph, group_of: &BTreeMap<String, usize>) -> bool {
    // map every node to a vertex id: group idx, or a unique singleton id
    let mut vertex_of: BTreeMap<&str, usize> = BTreeMap::new();
    let mut next = 0usize;
    let mut group_vertex: BTreeMap<usize, usize> = BTreeMap::new();
    for node in g.nodes() {
        let v = match group_of.get(&node.id) {
            Some(gidx) => *group_vertex.entry(*gidx).or_insert_with(|| {
                let v = next;
                next += 1;
                v
            }),
            None => {
                let v = next;
                next += 1;
                v
            }
        };
        vertex_of.insert(node.id.as_str(), v);
    }
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); next];
    for node in g.nodes() {
        let to = vertex_of[node.id.as_str()];
        for p in g.predecessors(&node.id) {
            let from = vertex_of[p];
            if from != to {
                adj[from].insert(to);
            }
        }
    }
    // Kahn over the quotient
    let mut indeg = vec![0usize; next];
    for outs in &adj {
        for &t in outs {
            indeg[t] += 1;
        }
    }
    let mut ready: Vec<usize> = (0..next).filter(|&v| indeg[v] == 0).collect();
    let mut removed = 0;
    while let Some(v) = ready.pop() {
        removed += 1;
        for &t in &adj[v] {
            indeg[t] -= 1;
            if indeg[t] == 0 {
                ready.push(t);
            }
        }
    }
    removed == next
}

// ---------------------------------------------------------------------------
// Pipeline topology
// ---------------------------------------------------------------------------

/// How the distributor fans blocks out to the entry stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FanOutMode {
    /// Single entry; every block walks one chain of stages.
    Chain,
    /// Two entries running the same actions on different devices; each
    /// block goes to exactly one branch, chosen by the runtime split ratio.
    Split { cpu_head: usize, gpu_head: usize },
    /// Two entries running different actions; every block goes to both
    /// branches and a per-block merge barrier combines the results.
    Duplicate { head_a: usize, head_b: usize, merge: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageKind {
    Distributor,
    Task {
        tf: String,
        device: DeviceTarget,
        data_item: DataItemKind,
        routines: Vec<String>,
    },
    /// Converts returned packets into host-side tiles: writes results back
    /// to the mesh (`to_mesh`) or forwards branch-result buffers to the
    /// merge barrier.
    Mover { to_mesh: bool },
    /// Releases a block downstream only when all branch results arrived.
    /// `kernel` combines overlapping writes; `None` overlays the branches'
    /// disjoint write masks.
    MergeBarrier { kernel: Option<String> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub id: usize,
    /// Stage name; doubles as the thread-team name in run configurations.
    pub name: String,
    pub kind: StageKind,
    pub downstream: Vec<usize>,
}

/// The pipeline topology the runtime and the discrete-event model execute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelinePlan {
    pub fan_out: FanOutMode,
    pub stages: Vec<StageSpec>,
}

impl PipelinePlan {
    pub fn stage_by_name(&self, name: &str) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn distributor(&self) -> &StageSpec {
        &self.stages[0]
    }

    pub fn task_stages(&self) -> impl Iterator<Item = &StageSpec> {
        self.stages
            .iter()
            .filter(|s| matches!(s.kind, StageKind::Task { .. }))
    }
}

struct TopologyBuilder {
    stages: Vec<StageSpec>,
    mover_count: usize,
}

impl TopologyBuilder {
    fn new() -> Self {
        TopologyBuilder {
            stages: vec![StageSpec {
                id: 0,
                name: DISTRIBUTOR.to_owned(),
                kind: StageKind::Distributor,
                downstream: Vec::new(),
            }],
            mover_count: 0,
        }
    }

    fn push(&mut self, name: String, kind: StageKind) -> usize {
        let id = self.stages.len();
        self.stages.push(StageSpec {
            id,
            name,
            kind,
            downstream: Vec::new(),
        });
        id
    }

    fn push_task(&mut self, tf: &TaskFunction) -> usize {
        self.push(
            tf.id.clone(),
            StageKind::Task {
                tf: tf.id.clone(),
                device: tf.device.clone(),
                data_item: tf.data_item,
                routines: tf.routines.clone(),
            },
        )
    }

    fn push_mover(&mut self, to_mesh: bool) -> usize {
        let name = format!("mover_{}", self.mover_count);
        self.mover_count += 1;
        self.push(name, StageKind::Mover { to_mesh })
    }

    fn link(&mut self, from: usize, to: usize) {
        if !self.stages[from].downstream.contains(&to) {
            self.stages[from].downstream.push(to);
        }
    }
}

/// Derives the pipeline topology of a plan.
///
/// Supported shapes: a single chain of task functions (packet stages only
/// directly after the distributor), and two-branch fan-outs in split or
/// duplicate mode with at most one join. Anything else is rejected
/// explicitly.
pub fn derive_topology(plan: &PlanGraph) -> Result<PipelinePlan, PlanError> {
    let entries = plan.entries();
    // every TF must be reachable and have at most one TF successor/predecessor
    for tf in &plan.task_functions {
        if plan.tf_successors(&tf.id).len() > 1 {
            return Err(PlanError::UnsupportedTopology(format!(
                "task function `{}` has more than one successor",
                tf.id
            )));
        }
    }
    match entries.len() {
        0 => {
            if plan.task_functions.is_empty() {
                // empty orchestration: distributor only
                return Ok(PipelinePlan {
                    fan_out: FanOutMode::Chain,
                    stages: TopologyBuilder::new().stages,
                });
            }
            Err(PlanError::UnsupportedTopology(
                "no distributor-fed entry task function".to_owned(),
            ))
        }
        1 => build_chain(plan, &entries[0].id),
        2 => build_fan_out(plan, &entries[0].id, &entries[1].id),
        n => Err(PlanError::UnsupportedTopology(format!(
            "{n} entry task functions; at most 2 supported"
        ))),
    }
}

fn chain_of(plan: &PlanGraph, head: &str) -> Result<Vec<String>, PlanError> {
    let mut chain = vec![head.to_owned()];
    let mut cur = head.to_owned();
    loop {
        let succ = plan.tf_successors(&cur);
        match succ.len() {
            0 => return Ok(chain),
            1 => {
                let next = succ[0].to_owned();
                if plan.tf_predecessors(&next).len() > 1 {
                    return Err(PlanError::UnsupportedTopology(format!(
                        "task function `{next}` joins multiple branches mid-chain"
                    )));
                }
                chain.push(next.clone());
                cur = next;
            }
            _ => unreachable!("validated above"),
        }
    }
}

fn append_chain(
    b: &mut TopologyBuilder,
    plan: &PlanGraph,
    chain: &[String],
    mut prev: usize,
    first_may_be_gpu: bool,
) -> Result<usize, PlanError> {
    for (i, tf_id) in chain.iter().enumerate() {
        let tf = plan.task_function(tf_id).expect("tf exists");
        if tf.device.is_gpu() && !(i == 0 && first_may_be_gpu) {
            return Err(PlanError::UnsupportedTopology(format!(
                "packet stage `{tf_id}` must be fed directly by the distributor"
            )));
        }
        let sid = b.push_task(tf);
        b.link(prev, sid);
        prev = sid;
        if tf.device.is_gpu() {
            // results return to the host: unpack to mesh, feeding the next
            // stage when there is one
            let mover = b.push_mover(true);
            b.link(prev, mover);
            prev = mover;
        }
    }
    Ok(prev)
}

fn build_chain(plan: &PlanGraph, head: &str) -> Result<PipelinePlan, PlanError> {
    let chain = chain_of(plan, head)?;
    let mut b = TopologyBuilder::new();
    append_chain(&mut b, plan, &chain, 0, true)?;
    Ok(PipelinePlan {
        fan_out: FanOutMode::Chain,
        stages: b.stages,
    })
}

fn build_fan_out(plan: &PlanGraph, a: &str, b_id: &str) -> Result<PipelinePlan, PlanError> {
    let tf_a = plan.task_function(a).expect("entry exists");
    let tf_b = plan.task_function(b_id).expect("entry exists");
    let succ_a = plan.tf_successors(a);
    let succ_b = plan.tf_successors(b_id);
    let join = match (succ_a.first(), succ_b.first()) {
        (Some(x), Some(y)) if x == y => Some(x.to_string()),
        (None, None) => None,
        _ => {
            return Err(PlanError::UnsupportedTopology(
                "two-branch fan-out requires a common successor or two sinks".to_owned(),
            ))
        }
    };

    if tf_a.routines == tf_b.routines {
        // split mode: same work, block-level routing between devices
        let (cpu, gpu) = if tf_a.device.is_cpu() && tf_b.device.is_gpu() {
            (tf_a, tf_b)
        } else if tf_a.device.is_gpu() && tf_b.device.is_cpu() {
            (tf_b, tf_a)
        } else {
            return Err(PlanError::UnsupportedTopology(
                "split mode requires one CPU and one GPU branch".to_owned(),
            ));
        };
        let mut b = TopologyBuilder::new();
        let cpu_head = b.push_task(cpu);
        b.link(0, cpu_head);
        let gpu_head = b.push_task(gpu);
        b.link(0, gpu_head);
        let gpu_out = {
            let mover = b.push_mover(true);
            b.link(gpu_head, mover);
            mover
        };
        if let Some(join) = join {
            let tail = chain_of(plan, &join)?;
            // both branches feed the join; blocks arrive exactly once each
            let join_head_prev = b.stages.len(); // next stage id
            append_chain(&mut b, plan, &tail, cpu_head, false)?;
            b.link(gpu_out, join_head_prev);
        }
        return Ok(PipelinePlan {
            fan_out: FanOutMode::Split { cpu_head, gpu_head },
            stages: b.stages,
        });
    }

    // duplicate mode: different work per branch, merge barrier at the join
    let Some(join) = join else {
        return Err(PlanError::UnsupportedTopology(
            "parallel branches with different actions need a common join".to_owned(),
        ));
    };
    let merge_kernel = plan
        .edges
        .iter()
        .find(|e| e.to == join && e.merge_kernel.is_some())
        .and_then(|e| e.merge_kernel.clone());
    if merge_kernel.is_none() {
        // without a combine kernel the branches must write disjoint variables
        for ga in &tf_a.spec.grid_data {
            if let Some(gb) = tf_b.spec.grid_entry(ga.structure_index) {
                if ga.variables_out.intersection(&gb.variables_out).next().is_some() {
                    return Err(PlanError::UnsupportedTopology(format!(
                        "parallel branches `{}` and `{}` write overlapping variables; \
                         register a merge kernel",
                        tf_a.id, tf_b.id
                    )));
                }
            }
        }
    }

    let mut b = TopologyBuilder::new();
    let head_a = b.push_task(tf_a);
    b.link(0, head_a);
    let mut a_out = head_a;
    if tf_a.device.is_gpu() {
        let mover = b.push_mover(false);
        b.link(a_out, mover);
        a_out = mover;
    }
    let head_b = b.push_task(tf_b);
    b.link(0, head_b);
    let mut b_out = head_b;
    if tf_b.device.is_gpu() {
        let mover = b.push_mover(false);
        b.link(b_out, mover);
        b_out = mover;
    }
    let merge = b.push(
        "merge".to_owned(),
        StageKind::MergeBarrier {
            kernel: merge_kernel.clone(),
        },
    );
    b.link(a_out, merge);
    b.link(b_out, merge);
    let mut prev = merge;
    if merge_kernel.is_none() {
        // the join TF still runs after the overlay barrier
        let tail = chain_of(plan, &join)?;
        prev = append_chain(&mut b, plan, &tail, prev, false)?;
    } else {
        // the join TF *is* the merge kernel; continue with its successors
        let succ = plan.tf_successors(&join);
        if let Some(next) = succ.first() {
            let tail = chain_of(plan, next)?;
            prev = append_chain(&mut b, plan, &tail, prev, false)?;
        }
    }
    let _ = prev;
    Ok(PipelinePlan {
        fan_out: FanOutMode::Duplicate {
            head_a,
            head_b,
            merge,
        },
        stages: b.stages,
    })
}
