//! Parameterized source trees: templates with value and child slots,
//! assembled per task function and rendered to readable glue text, plus
//! the executable plan the runtime interprets.
//!
//! Templates carry `_param:NAME` value slots and `_link:SLOT` child-tree
//! slots. Device-specific wording lives in macro definitions
//! (qualifiers = the device kind), expanded over the template body before
//! slots are bound — so changing a device-qualified macro changes the
//! rendered text but never the plan's call sequence.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{DataItemKind, DeviceTarget};
use crate::macroproc::{DefinitionSet, MacroError};
use crate::planner::{
    derive_topology, ArgBinding, ConsolidatedArgSpec, EntryRef, PipelinePlan, PlanError,
    PlanGraph, TaskFunction,
};

#[derive(Debug, Error)]
pub enum CodegenError {
    #[error("template library is missing `{0}`")]
    MissingTemplate(String),
    #[error("template `{template}` slot `{slot}` is unbound")]
    UnboundSlot { template: String, slot: String },
    #[error("duplicate child slot `{slot}` in template `{template}`")]
    DuplicateSlot { template: String, slot: String },
    #[error(transparent)]
    Macro(#[from] MacroError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("template io: {0}")]
    Io(#[from] std::io::Error),
}

/// A text template with value slots (`_param:NAME`) and child-tree slots
/// (`_link:SLOT`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub name: String,
    pub text: String,
}

impl Template {
    /// Child slots must be unique; value slots may be referenced any
    /// number of times.
    pub fn validate(&self) -> Result<(), CodegenError> {
        let mut seen = BTreeMap::new();
        for slot in scan_tokens(&self.text, "_link:") {
            if seen.insert(slot.clone(), ()).is_some() {
                return Err(CodegenError::DuplicateSlot {
                    template: self.name.clone(),
                    slot,
                });
            }
        }
        Ok(())
    }
}

fn scan_tokens(text: &str, marker: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(pos) = rest.find(marker) {
        let tail = &rest[pos + marker.len()..];
        let end = tail
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(tail.len());
        if end > 0 {
            out.push(tail[..end].to_owned());
        }
        rest = &tail[end..];
    }
    out
}

/// Named collection of templates; ships with defaults, overridable per
/// application directory.
#[derive(Clone, Debug, Default)]
pub struct TemplateLibrary {
    templates: BTreeMap<String, Template>,
}

pub const TASKFUNCTION_TPL: &str = include_str!("../data/templates/taskfunction.tpl");
pub const EXTRACT_ENTRY_TPL: &str = include_str!("../data/templates/extract_entry.tpl");
pub const CALL_ENTRY_TPL: &str = include_str!("../data/templates/call_entry.tpl");
pub const DEFAULT_MACROS: &str = include_str!("../data/templates/macros.def");

impl TemplateLibrary {
    /// The built-in glue templates.
    pub fn defaults() -> Self {
        let mut lib = TemplateLibrary::default();
        for (name, text) in [
            ("taskfunction", TASKFUNCTION_TPL),
            ("extract_entry", EXTRACT_ENTRY_TPL),
            ("call_entry", CALL_ENTRY_TPL),
        ] {
            lib.insert(Template {
                name: name.to_owned(),
                text: text.to_owned(),
            });
        }
        lib
    }

    pub fn insert(&mut self, t: Template) {
        self.templates.insert(t.name.clone(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Template, CodegenError> {
        self.templates
            .get(name)
            .ok_or_else(|| CodegenError::MissingTemplate(name.to_owned()))
    }

    pub fn remove(&mut self, name: &str) {
        self.templates.remove(name);
    }

    /// Defaults overlaid with any `*.tpl` files in `dir`; a `macros.def`
    /// there likewise replaces the default macro definitions.
    pub fn load_with_overrides(dir: &Path) -> Result<(Self, DefinitionSet), CodegenError> {
        let mut lib = Self::defaults();
        let mut macros = DefinitionSet::parse(DEFAULT_MACROS)?;
        if dir.is_dir() {
            for entry in std::fs::read_dir(dir)? {
                let path = entry?.path();
                if path.extension().and_then(|e| e.to_str()) == Some("tpl") {
                    let name = path
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or_default()
                        .to_owned();
                    lib.insert(Template {
                        name,
                        text: std::fs::read_to_string(&path)?,
                    });
                }
            }
            let mac_path = dir.join("macros.def");
            if mac_path.is_file() {
                macros = DefinitionSet::parse(&std::fs::read_to_string(mac_path)?)?;
            }
        }
        Ok((lib, macros))
    }

    pub fn default_macros() -> DefinitionSet {
        DefinitionSet::parse(DEFAULT_MACROS).expect("default macro definitions parse")
    }
}

/// An instantiated template: macro-expanded text, parameter bindings, and
/// child trees per slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceTree {
    pub template: String,
    text: String,
    pub params: BTreeMap<String, String>,
    pub children: BTreeMap<String, Vec<SourceTree>>,
}

impl SourceTree {
    pub fn new(template: &Template, text: String) -> Self {
        SourceTree {
            template: template.name.clone(),
            text,
            params: BTreeMap::new(),
            children: BTreeMap::new(),
        }
    }

    pub fn bind(&mut self, name: &str, value: impl Into<String>) -> &mut Self {
        self.params.insert(name.to_owned(), value.into());
        self
    }

    pub fn attach(&mut self, slot: &str, child: SourceTree) -> &mut Self {
        self.children.entry(slot.to_owned()).or_default().push(child);
        self
    }

    pub fn children_at(&self, slot: &str) -> &[SourceTree] {
        self.children.get(slot).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Deterministic rendering: value slots substituted, child slots
    /// replaced by their children's renderings line by line.
    pub fn render(&self) -> Result<String, CodegenError> {
        let mut out = String::new();
        for line in self.text.lines() {
            let trimmed = line.trim();
            if let Some(slot) = trimmed.strip_prefix("_link:") {
                if slot.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') && !slot.is_empty()
                {
                    // a whole-line link expands to its children's lines
                    for child in self.children_at(slot) {
                        out.push_str(&child.render()?);
                        if !out.ends_with('\n') {
                            out.push('\n');
                        }
                    }
                    continue;
                }
            }
            out.push_str(&self.substitute_line(line)?);
            out.push('\n');
        }
        Ok(out)
    }

    fn substitute_line(&self, line: &str) -> Result<String, CodegenError> {
        let mut out = String::with_capacity(line.len());
        let mut rest = line;
        loop {
            let next_param = rest.find("_param:");
            let next_link = rest.find("_link:");
            let (pos, marker, is_param) = match (next_param, next_link) {
                (None, None) => {
                    out.push_str(rest);
                    return Ok(out);
                }
                (Some(p), None) => (p, "_param:", true),
                (None, Some(l)) => (l, "_link:", false),
                (Some(p), Some(l)) if p < l => (p, "_param:", true),
                (_, Some(l)) => (l, "_link:", false),
            };
            out.push_str(&rest[..pos]);
            let tail = &rest[pos + marker.len()..];
            let end = tail
                .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
                .unwrap_or(tail.len());
            let name = &tail[..end];
            if name.is_empty() {
                out.push_str(marker);
                rest = tail;
                continue;
            }
            if is_param {
                let value = self.params.get(name).ok_or_else(|| CodegenError::UnboundSlot {
                    template: self.template.clone(),
                    slot: name.to_owned(),
                })?;
                out.push_str(value);
            } else {
                // inline child slot: children rendered back to back
                for child in self.children_at(name) {
                    let r = child.render()?;
                    out.push_str(r.trim_end_matches('\n'));
                }
            }
            rest = &tail[end..];
        }
    }
}

fn describe_entry(entry: &EntryRef, spec: &ConsolidatedArgSpec) -> String {
    match entry {
        EntryRef::External(name) => {
            let kind = spec
                .externals
                .iter()
                .find(|e| &e.name == name)
                .map(|e| e.kind.as_str())
                .unwrap_or("real");
            format!("external {kind}")
        }
        EntryRef::TileMetadata(k) => format!("tile metadata {}", k.as_str()),
        EntryRef::GridData(si) => {
            let g = spec.grid_entry(*si).expect("grid entry exists");
            format!(
                "grid {} (in {} vars, out {} vars)",
                si.as_str(),
                g.variables_in.len(),
                g.variables_out.len()
            )
        }
        EntryRef::Scratch(name) => {
            let s = spec.scratch_entry(name).expect("scratch entry exists");
            format!("scratch [{}]", s.extents.join(" x "))
        }
    }
}

/// Builds the parameterized source tree of one task function: one extract
/// child per consolidated entry (in spec order) and one call child per
/// routine, with device-qualified macros expanded before slot binding.
pub fn build_tree(
    tf: &TaskFunction,
    templates: &TemplateLibrary,
    macros: &DefinitionSet,
) -> Result<SourceTree, CodegenError> {
    let quals = vec![tf.device.qualifier()];
    let tf_tpl = templates.get("taskfunction")?;
    let extract_tpl = templates.get("extract_entry")?;
    let call_tpl = templates.get("call_entry")?;
    for t in [tf_tpl, extract_tpl, call_tpl] {
        t.validate()?;
    }

    let mut root = SourceTree::new(tf_tpl, macros.expand(&tf_tpl.text, &quals)?);
    root.bind("TF_ID", &tf.id)
        .bind("DEVICE", tf.device.as_str())
        .bind(
            "DATA_ITEM",
            match tf.data_item {
                DataItemKind::DataPacket => "data packet",
                DataItemKind::TileWrapper => "tile wrapper",
            },
        );

    let extract_text = macros.expand(&extract_tpl.text, &quals)?;
    for entry in tf.spec.entries() {
        let mut child = SourceTree::new(extract_tpl, extract_text.clone());
        child
            .bind("ARG_ID", entry.to_string())
            .bind("ARG_KIND", describe_entry(&entry, &tf.spec));
        root.attach("EXTRACT", child);
    }

    let call_text = macros.expand(&call_tpl.text, &quals)?;
    for binding in &tf.spec.bindings {
        let mut child = SourceTree::new(call_tpl, call_text.clone());
        let args: Vec<&str> = binding.args.iter().map(|a| a.arg.as_str()).collect();
        child
            .bind("ROUTINE", &binding.routine)
            .bind("ARGS", args.join(", "));
        root.attach("CALLS", child);
    }
    Ok(root)
}

/// Extracts the call order back out of rendered glue text (used to check
/// that glue and executable plan agree).
pub fn parse_call_order(glue: &str) -> Vec<String> {
    glue.lines()
        .filter_map(|l| {
            let t = l.trim();
            let rest = t.strip_prefix("call ")?;
            let end = rest.find('(')?;
            Some(rest[..end].trim().to_owned())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Executable plan
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallBinding {
    pub routine: String,
    pub args: Vec<ArgBinding>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCalls {
    pub tf: String,
    pub device: DeviceTarget,
    pub data_item: DataItemKind,
    pub calls: Vec<CallBinding>,
}

/// Everything the runtime interprets: per task function the ordered call
/// sequence with argument bindings, the consolidated specs, and the
/// pipeline topology with its mover/duplicate/merge directives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutablePlan {
    pub recipe: String,
    pub tasks: Vec<TaskCalls>,
    pub specs: BTreeMap<String, ConsolidatedArgSpec>,
    pub topology: PipelinePlan,
}

impl ExecutablePlan {
    pub fn task(&self, tf: &str) -> Option<&TaskCalls> {
        self.tasks.iter().find(|t| t.tf == tf)
    }

    pub fn spec(&self, tf: &str) -> Option<&ConsolidatedArgSpec> {
        self.specs.get(tf)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, PlanError> {
        serde_json::from_str(text).map_err(|e| PlanError::Document(e.to_string()))
    }
}

/// Lowers a plan graph into the executable form the runtime consumes.
pub fn emit_plan(plan: &PlanGraph) -> Result<ExecutablePlan, PlanError> {
    let topology = derive_topology(plan)?;
    let mut tasks = Vec::with_capacity(plan.task_functions.len());
    let mut specs = BTreeMap::new();
    for tf in &plan.task_functions {
        let calls = tf
            .spec
            .bindings
            .iter()
            .map(|b| CallBinding {
                routine: b.routine.clone(),
                args: b.args.clone(),
            })
            .collect();
        tasks.push(TaskCalls {
            tf: tf.id.clone(),
            device: tf.device.clone(),
            data_item: tf.data_item,
            calls,
        });
        specs.insert(tf.id.clone(), tf.spec.clone());
    }
    Ok(ExecutablePlan {
        recipe: plan.recipe.clone(),
        tasks,
        specs,
        topology,
    })
}
