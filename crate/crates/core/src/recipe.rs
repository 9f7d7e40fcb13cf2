//! Recipe documents and their control-flow DAG.
//!
//! A recipe names the action routines of one orchestration region, the
//! device each action is mapped to, and the ordering constraints between
//! them. Loading inserts implicit begin/end markers, validates the graph,
//! and keeps document order so that downstream planning is deterministic.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::DeviceTarget;

/// Reserved id of the implicit orchestration-start marker.
pub const BEGIN_ID: &str = "__begin__";
/// Reserved id of the implicit orchestration-end marker.
pub const END_ID: &str = "__end__";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecipeError {
    #[error("recipe parse error: {0}")]
    Parse(String),
    #[error("node `{node}` maps to unknown device `{device}`")]
    UnknownDevice { node: String, device: String },
    #[error("node `{node}` lists unknown predecessor `{reference}`")]
    DanglingReference { node: String, reference: String },
    #[error("dependency cycle involving node `{0}`")]
    Cycle(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecipeDoc {
    name: String,
    nodes: Vec<NodeDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: String,
    action: String,
    map_to: String,
    #[serde(default)]
    after: Vec<String>,
}

/// A work node of the recipe DAG.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecipeNode {
    pub id: String,
    pub action: String,
    pub device: DeviceTarget,
    /// Predecessor ids; `__begin__` attaches the node to the orchestration
    /// start. Normalized so it is never empty.
    pub after: Vec<String>,
}

/// Validated control-flow DAG of one orchestration region.
///
/// Work nodes are kept in document order; the begin and end markers are
/// implicit. The graph is immutable after validation and safe to share
/// read-only across workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecipeGraph {
    pub name: String,
    nodes: Vec<RecipeNode>,
    index: BTreeMap<String, usize>,
}

impl RecipeGraph {
    pub fn nodes(&self) -> &[RecipeNode] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&RecipeNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Work-node predecessors of `id` (the begin marker is filtered out).
    pub fn predecessors(&self, id: &str) -> Vec<&str> {
        match self.node(id) {
            Some(n) => n
                .after
                .iter()
                .filter(|a| a.as_str() != BEGIN_ID)
                .map(|a| a.as_str())
                .collect(),
            None => Vec::new(),
        }
    }

    /// Work-node successors of `id`, in document order.
    pub fn successors(&self, id: &str) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.after.iter().any(|a| a == id))
            .map(|n| n.id.as_str())
            .collect()
    }

    /// All edges including the begin/end markers. Nodes with no successors
    /// are attached to the end marker.
    pub fn edges(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for n in &self.nodes {
            for a in &n.after {
                out.push((a.clone(), n.id.clone()));
            }
        }
        for n in &self.nodes {
            if self.successors(&n.id).is_empty() {
                out.push((n.id.clone(), END_ID.to_owned()));
            }
        }
        out
    }

    /// Deterministic topological order of the work nodes: among ready nodes
    /// the one earliest in the document wins, which makes the result the
    /// lexicographically-first valid order by document index.
    pub fn topological_order(&self) -> Vec<String> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        for (i, node) in self.nodes.iter().enumerate() {
            indegree[i] = self
                .predecessors(&node.id)
                .iter()
                .filter(|p| self.index.contains_key(**p))
                .count();
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            order.push(self.nodes[i].id.clone());
            for s in self.successors(&self.nodes[i].id) {
                let j = self.index[s];
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.insert(j);
                }
            }
        }
        debug_assert_eq!(order.len(), n, "validation guarantees acyclicity");
        order
    }

    /// Renders the graph back to its document form. `load_recipe` of the
    /// result reproduces the graph exactly.
    pub fn render(&self) -> String {
        let doc = RecipeDoc {
            name: self.name.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeDoc {
                    id: n.id.clone(),
                    action: n.action.clone(),
                    map_to: n.device.as_str().to_owned(),
                    after: n.after.clone(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("recipe doc serializes");
        s.push('\n');
        s
    }
}

/// Parses and validates a recipe document.
pub fn load_recipe(document: &str) -> Result<RecipeGraph, RecipeError> {
    let doc: RecipeDoc =
        serde_json::from_str(document).map_err(|e| RecipeError::Parse(e.to_string()))?;

    let mut index = BTreeMap::new();
    for (i, n) in doc.nodes.iter().enumerate() {
        if n.id.starts_with("__") {
            return Err(RecipeError::Parse(format!(
                "node id `{}` uses the reserved `__` prefix",
                n.id
            )));
        }
        if n.action.is_empty() {
            return Err(RecipeError::Parse(format!("node `{}` has empty action", n.id)));
        }
        if index.insert(n.id.clone(), i).is_some() {
            return Err(RecipeError::Parse(format!("duplicate node id `{}`", n.id)));
        }
    }

    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for n in &doc.nodes {
        let device =
            DeviceTarget::parse(&n.map_to).map_err(|_| RecipeError::UnknownDevice {
                node: n.id.clone(),
                device: n.map_to.clone(),
            })?;
        // An omitted or empty `after` list attaches the node to begin.
        let after = if n.after.is_empty() {
            vec![BEGIN_ID.to_owned()]
        } else {
            n.after.clone()
        };
        let mut seen = BTreeSet::new();
        for a in &after {
            if !seen.insert(a.clone()) {
                return Err(RecipeError::Parse(format!(
                    "node `{}` lists predecessor `{}` twice",
                    n.id, a
                )));
            }
            if a != BEGIN_ID && !index.contains_key(a) {
                return Err(RecipeError::DanglingReference {
                    node: n.id.clone(),
                    reference: a.clone(),
                });
            }
        }
        nodes.push(RecipeNode {
            id: n.id.clone(),
            action: n.action.clone(),
            device,
            after,
        });
    }

    let graph = RecipeGraph {
        name: doc.name,
        nodes,
        index,
    };
    check_acyclic(&graph)?;
    Ok(graph)
}

fn check_acyclic(g: &RecipeGraph) -> Result<(), RecipeError> {
    let n = g.nodes.len();
    let mut indegree = vec![0usize; n];
    for (i, node) in g.nodes.iter().enumerate() {
        indegree[i] = g.predecessors(&node.id).len();
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut removed = 0usize;
    while let Some(i) = ready.pop() {
        removed += 1;
        for s in g.successors(&g.nodes[i].id) {
            let j = g.index[s];
            indegree[j] -= 1;
            if indegree[j] == 0 {
                ready.push(j);
            }
        }
    }
    if removed != n {
        // deterministic witness: first node (by document order) left in a cycle
        let witness = g
            .nodes
            .iter()
            .enumerate()
            .find(|(i, _)| indegree[*i] > 0)
            .map(|(_, n)| n.id.clone())
            .unwrap_or_default();
        return Err(RecipeError::Cycle(witness));
    }
    Ok(())
}
