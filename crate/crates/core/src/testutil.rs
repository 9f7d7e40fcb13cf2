//! Shared builders for unit tests.

use std::collections::BTreeSet;

use crate::annotations::{ArgSource, ArgumentSpec, MetadataKind, RoutineSpec, ScalarKind, StructureIndex};
use crate::device::DeviceTarget;
use crate::planner::SpecRegistry;

pub fn grid_arg(name: &str, vin: &[&str], vout: &[&str]) -> ArgumentSpec {
    ArgumentSpec {
        name: name.to_owned(),
        source: ArgSource::GridData {
            structure_index: StructureIndex::Center,
            variables_in: vin.iter().map(|s| s.to_string()).collect(),
            variables_out: vout.iter().map(|s| s.to_string()).collect(),
        },
    }
}

pub fn scratch_arg(name: &str, extents: &[&str]) -> ArgumentSpec {
    ArgumentSpec {
        name: name.to_owned(),
        source: ArgSource::Scratch {
            extents: extents.iter().map(|s| s.to_string()).collect(),
            lbound: vec!["1".to_owned(); extents.len()],
        },
    }
}

pub fn external_arg(name: &str) -> ArgumentSpec {
    ArgumentSpec {
        name: name.to_owned(),
        source: ArgSource::External {
            scalar_kind: ScalarKind::Real,
        },
    }
}

pub fn metadata_arg(name: &str, kind: MetadataKind) -> ArgumentSpec {
    ArgumentSpec {
        name: name.to_owned(),
        source: ArgSource::TileMetadata { kind },
    }
}

pub fn routine(name: &str, devices: &[&str], arguments: Vec<ArgumentSpec>) -> RoutineSpec {
    RoutineSpec {
        name: name.to_owned(),
        arguments,
        source_file: "<test>".to_owned(),
        device_variants: devices
            .iter()
            .map(|d| DeviceTarget::parse(d).unwrap())
            .collect::<BTreeSet<_>>(),
    }
}

/// Registry with generic actions `Action_1..Action_4` available on both
/// devices, writing disjoint variables.
pub fn generic_registry() -> SpecRegistry {
    let mut reg = SpecRegistry::new();
    for (i, var) in ["dens", "velx", "vely", "ener"].iter().enumerate() {
        reg.insert(routine(
            &format!("Action_{}", i + 1),
            &["CPU", "GPU"],
            vec![
                grid_arg("U", &[var], &[var]),
                external_arg("dt"),
                metadata_arg("lo", MetadataKind::Lo),
            ],
        ));
    }
    reg
}
