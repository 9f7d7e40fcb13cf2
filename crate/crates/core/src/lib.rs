//! Recipe-driven heterogeneous task pipelines over block-structured meshes.
//!
//! The crate turns a declarative recipe (what to run, in which order, on
//! which device) into an executable pipeline plan:
//!
//! * [`recipe`] parses recipe documents into a validated control-flow DAG.
//! * [`annotations`] extracts routine data requirements from comment
//!   annotations in kernel sources.
//! * [`planner`] fuses the DAG into per-device task functions, consolidates
//!   their argument specifications, and derives the pipeline topology.
//! * [`macroproc`] expands argumented macros with qualifier-scoped
//!   alternative definitions.
//! * [`codegen`] assembles parameterized source trees into readable glue
//!   text and emits the executable plan.
//! * [`packet`] computes flattened multi-block buffer layouts and performs
//!   pack/unpack between mesh and packet.
//! * [`mesh`] and [`kernels`] provide the block-structured mesh and the
//!   surrogate physics kernels the pipelines run.
//! * [`runtime`] executes plans with persistent thread teams and a
//!   simulated device link (measured mode).
//! * [`perf`] is a deterministic discrete-event model of the same pipeline
//!   (modeled mode) for benchmark sweeps.

pub mod annotations;
pub mod cli;
pub mod codegen;
pub mod device;
pub mod expr;
pub mod kernels;
pub mod macroproc;
pub mod mesh;
pub mod packet;
pub mod perf;
pub mod planner;
pub mod recipe;
pub mod runtime;

#[cfg(test)]
pub(crate) mod testutil;
