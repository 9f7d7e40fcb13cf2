//! Flattened multi-block buffer layouts (data packets) and the in-place
//! tile wrapper.
//!
//! A packet batches `n_blocks` blocks of data for one task function into a
//! single contiguous buffer: sections ordered copy-in, copy-in-out,
//! copy-out, device scratch; within a section, consolidated-spec order;
//! every entry 64-byte aligned; per-block entries repeated contiguously.
//! Device scratch lives in the packet but is never transferred, so it is
//! excluded from the transfer-byte accounting consumed by the performance
//! model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{MetadataKind, StructureIndex};
use crate::expr::{self, MeshParams};
use crate::mesh::{var_index, BlockMesh, Tile, NVARS};
use crate::planner::ConsolidatedArgSpec;

pub const ALIGNMENT: u64 = 64;
pub const REAL_BYTES: u64 = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PacketError {
    #[error("grid entry for `{0}` masks no variables")]
    ZeroVariables(String),
    #[error("extent error: {0}")]
    Extent(String),
    #[error("block ids ({got}) do not match the layout's n_blocks ({expected})")]
    BlockOutOfRange { expected: usize, got: usize },
    #[error("block id {0} outside the mesh")]
    UnknownBlock(usize),
    #[error("variable `{0}` is not registered in the mesh")]
    UnknownVariable(String),
    #[error("packing grid structure `{0}` requires mesh-backed storage it does not have")]
    UnsupportedStructure(String),
}

/// Transfer semantics of a layout section.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionKind {
    CopyIn,
    CopyInOut,
    CopyOut,
    /// Device-resident scratch: allocated in the packet, never transferred.
    ScratchDevice,
}

impl SectionKind {
    pub fn transfers_in(self) -> bool {
        matches!(self, SectionKind::CopyIn | SectionKind::CopyInOut)
    }

    pub fn transfers_out(self) -> bool {
        matches!(self, SectionKind::CopyInOut | SectionKind::CopyOut)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    /// Consolidated-entry id, e.g. `external:dt`, `grid_data:center`,
    /// `scratch:flx`.
    pub id: String,
    pub section: SectionKind,
    pub per_block: bool,
    /// Offset of the entry in the packet buffer.
    pub offset_bytes: u64,
    /// Total footprint (per-block size times `n_blocks` for per-block
    /// entries).
    pub size_bytes: u64,
    /// Footprint of one block's worth of data.
    pub per_block_bytes: u64,
    /// Grid entries: the variables carried, sorted; their windows are laid
    /// out contiguously per block in this order.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub variables: Option<Vec<String>>,
}

/// The flattened buffer layout for one task function at a given blocks-per
/// -packet count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketLayout {
    pub n_blocks: usize,
    pub nxb: usize,
    pub nyb: usize,
    pub nguard: usize,
    pub entries: Vec<LayoutEntry>,
    pub total_bytes: u64,
    pub transfer_in_bytes: u64,
    pub transfer_out_bytes: u64,
}

impl PacketLayout {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("layout serializes");
        s.push('\n');
        s
    }

    pub fn entry(&self, id: &str, section: SectionKind) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.id == id && e.section == section)
    }

    fn window_elems(&self, si: StructureIndex) -> u64 {
        let (wx, wy) = match si {
            StructureIndex::Center => (self.nxb + 2 * self.nguard, self.nyb + 2 * self.nguard),
            StructureIndex::FluxX => (self.nxb + 1, self.nyb),
            StructureIndex::FluxY => (self.nxb, self.nyb + 1),
        };
        (wx * wy) as u64
    }
}

fn structure_window_elems(si: StructureIndex, params: &MeshParams) -> u64 {
    let (wx, wy) = match si {
        StructureIndex::Center => (
            params.nxb + 2 * params.nguard,
            params.nyb + 2 * params.nguard,
        ),
        StructureIndex::FluxX => (params.nxb + 1, params.nyb),
        StructureIndex::FluxY => (params.nxb, params.nyb + 1),
    };
    (wx * wy) as u64
}

fn metadata_elems(kind: MetadataKind) -> (u64, bool) {
    match kind {
        MetadataKind::Lo | MetadataKind::Hi | MetadataKind::Deltas => (2, true),
        MetadataKind::BlockId => (1, true),
        MetadataKind::Dt => (1, false),
    }
}

/// Computes the deterministic layout of a consolidated spec for `n_blocks`
/// blocks per packet.
pub fn layout(
    spec: &ConsolidatedArgSpec,
    n_blocks: usize,
    params: &MeshParams,
) -> Result<PacketLayout, PacketError> {
    assert!(n_blocks >= 1, "a packet carries at least one block");
    let table = params.table();

    // candidate entries in consolidated-spec order, with per-block sizes
    struct Candidate {
        id: String,
        section: SectionKind,
        per_block: bool,
        per_block_bytes: u64,
        variables: Option<Vec<String>>,
    }
    let mut candidates: Vec<Candidate> = Vec::new();

    for e in &spec.externals {
        candidates.push(Candidate {
            id: format!("external:{}", e.name),
            section: SectionKind::CopyIn,
            per_block: false,
            per_block_bytes: REAL_BYTES,
            variables: None,
        });
    }
    for k in &spec.tile_metadata {
        let (elems, per_block) = metadata_elems(*k);
        candidates.push(Candidate {
            id: format!("tile_metadata:{}", k.as_str()),
            section: SectionKind::CopyIn,
            per_block,
            per_block_bytes: elems * REAL_BYTES,
            variables: None,
        });
    }
    for g in &spec.grid_data {
        if g.variables_in.is_empty() && g.variables_out.is_empty() {
            return Err(PacketError::ZeroVariables(
                g.structure_index.as_str().to_owned(),
            ));
        }
        let win = structure_window_elems(g.structure_index, params) * REAL_BYTES;
        let in_only: Vec<String> = g.variables_in.difference(&g.variables_out).cloned().collect();
        let in_out: Vec<String> = g.variables_in.intersection(&g.variables_out).cloned().collect();
        let out_only: Vec<String> = g.variables_out.difference(&g.variables_in).cloned().collect();
        for (vars, section) in [
            (in_only, SectionKind::CopyIn),
            (in_out, SectionKind::CopyInOut),
            (out_only, SectionKind::CopyOut),
        ] {
            if vars.is_empty() {
                continue;
            }
            candidates.push(Candidate {
                id: format!("grid_data:{}", g.structure_index.as_str()),
                section,
                per_block: true,
                per_block_bytes: win * vars.len() as u64,
                variables: Some(vars),
            });
        }
    }
    for s in &spec.scratch {
        let mut elems = 1u64;
        for e in &s.extents {
            elems *= expr::eval_positive(e, &table)
                .map_err(|err| PacketError::Extent(err.to_string()))?;
        }
        candidates.push(Candidate {
            id: format!("scratch:{}", s.name),
            section: SectionKind::ScratchDevice,
            per_block: true,
            per_block_bytes: elems * REAL_BYTES,
            variables: None,
        });
    }

    // sections in transfer order; within a section, spec order
    let mut entries = Vec::with_capacity(candidates.len());
    let mut cursor = 0u64;
    let mut transfer_in = 0u64;
    let mut transfer_out = 0u64;
    for section in [
        SectionKind::CopyIn,
        SectionKind::CopyInOut,
        SectionKind::CopyOut,
        SectionKind::ScratchDevice,
    ] {
        for c in candidates.iter().filter(|c| c.section == section) {
            let blocks = if c.per_block { n_blocks as u64 } else { 1 };
            let size = c.per_block_bytes * blocks;
            if size == 0 {
                continue;
            }
            let offset = cursor.next_multiple_of(ALIGNMENT);
            cursor = offset + size;
            if section.transfers_in() {
                transfer_in += size;
            }
            if section.transfers_out() {
                transfer_out += size;
            }
            entries.push(LayoutEntry {
                id: c.id.clone(),
                section,
                per_block: c.per_block,
                offset_bytes: offset,
                size_bytes: size,
                per_block_bytes: c.per_block_bytes,
                variables: c.variables.clone(),
            });
        }
    }

    Ok(PacketLayout {
        n_blocks,
        nxb: params.nxb,
        nyb: params.nyb,
        nguard: params.nguard,
        entries,
        total_bytes: cursor.next_multiple_of(ALIGNMENT),
        transfer_in_bytes: transfer_in,
        transfer_out_bytes: transfer_out,
    })
}

/// A packed multi-block buffer. The buffer is `f64`-backed so every
/// 64-byte-aligned entry is elementwise addressable.
pub struct DataPacket {
    pub layout: PacketLayout,
    pub buffer: Vec<f64>,
    pub block_ids: Vec<usize>,
}

/// Lightweight reference to one live mesh block: no copies, host only.
#[derive(Clone, Debug, PartialEq)]
pub struct TileWrapper {
    pub block_id: usize,
    pub lo: [i64; 2],
    pub hi: [i64; 2],
    pub deltas: [f64; 2],
    pub dt: f64,
}

impl TileWrapper {
    pub fn new(mesh: &BlockMesh, block_id: usize, dt: f64) -> Self {
        TileWrapper {
            block_id,
            lo: mesh.lo(block_id),
            hi: mesh.hi(block_id),
            deltas: mesh.deltas(),
            dt,
        }
    }
}

/// Fills a packet from the mesh: copy-in and copy-in-out regions from
/// block storage and external scalars, copy-out and scratch zero-filled.
pub fn pack(
    layout: &PacketLayout,
    mesh: &BlockMesh,
    block_ids: &[usize],
    externals: &BTreeMap<String, f64>,
    dt: f64,
) -> Result<DataPacket, PacketError> {
    if block_ids.len() != layout.n_blocks {
        return Err(PacketError::BlockOutOfRange {
            expected: layout.n_blocks,
            got: block_ids.len(),
        });
    }
    for &b in block_ids {
        if b >= mesh.n_blocks() {
            return Err(PacketError::UnknownBlock(b));
        }
    }
    let mut buffer = vec![0.0f64; (layout.total_bytes / REAL_BYTES) as usize];
    for entry in &layout.entries {
        let base = (entry.offset_bytes / REAL_BYTES) as usize;
        match entry.section {
            SectionKind::CopyOut | SectionKind::ScratchDevice => {} // zero-filled
            SectionKind::CopyIn | SectionKind::CopyInOut => {
                fill_entry(entry, base, &mut buffer, layout, mesh, block_ids, externals, dt)?;
            }
        }
    }
    Ok(DataPacket {
        layout: layout.clone(),
        buffer,
        block_ids: block_ids.to_vec(),
    })
}

#[allow(clippy::too_many_arguments)]
fn fill_entry(
    entry: &LayoutEntry,
    base: usize,
    buffer: &mut [f64],
    layout: &PacketLayout,
    mesh: &BlockMesh,
    block_ids: &[usize],
    externals: &BTreeMap<String, f64>,
    dt: f64,
) -> Result<(), PacketError> {
    if let Some(name) = entry.id.strip_prefix("external:") {
        buffer[base] = if name == "dt" {
            dt
        } else {
            *externals.get(name).unwrap_or(&0.0)
        };
        return Ok(());
    }
    if let Some(kind) = entry.id.strip_prefix("tile_metadata:") {
        let kind = MetadataKind::parse(kind).expect("layout carries valid metadata kinds");
        match kind {
            MetadataKind::Dt => buffer[base] = dt,
            _ => {
                for (bidx, &block) in block_ids.iter().enumerate() {
                    let at = base + bidx * (entry.per_block_bytes / REAL_BYTES) as usize;
                    match kind {
                        MetadataKind::Lo => {
                            let lo = mesh.lo(block);
                            buffer[at] = lo[0] as f64;
                            buffer[at + 1] = lo[1] as f64;
                        }
                        MetadataKind::Hi => {
                            let hi = mesh.hi(block);
                            buffer[at] = hi[0] as f64;
                            buffer[at + 1] = hi[1] as f64;
                        }
                        MetadataKind::Deltas => {
                            let d = mesh.deltas();
                            buffer[at] = d[0];
                            buffer[at + 1] = d[1];
                        }
                        MetadataKind::BlockId => buffer[at] = block as f64,
                        MetadataKind::Dt => unreachable!(),
                    }
                }
            }
        }
        return Ok(());
    }
    if let Some(structure) = entry.id.strip_prefix("grid_data:") {
        let si = StructureIndex::parse(structure).expect("layout carries valid structures");
        if si != StructureIndex::Center {
            return Err(PacketError::UnsupportedStructure(structure.to_owned()));
        }
        let vars = entry.variables.as_ref().expect("grid entries carry variables");
        let win = layout.window_elems(si) as usize;
        let h = layout.nguard as i64;
        for (bidx, &block) in block_ids.iter().enumerate() {
            let guard = mesh.lock(block);
            let t = guard.tile_ref();
            for (pos, var) in vars.iter().enumerate() {
                let v = var_index(var).ok_or_else(|| PacketError::UnknownVariable(var.clone()))?;
                let mut at = base
                    + bidx * (entry.per_block_bytes / REAL_BYTES) as usize
                    + pos * win;
                for j in -h..(layout.nyb as i64 + h) {
                    for i in -h..(layout.nxb as i64 + h) {
                        buffer[at] = t.get(v, i, j);
                        at += 1;
                    }
                }
            }
        }
        return Ok(());
    }
    unreachable!("unknown entry id `{}`", entry.id);
}

/// Writes copy-in-out and copy-out regions back to the mesh; copy-in and
/// scratch are discarded.
pub fn unpack(packet: &DataPacket, mesh: &BlockMesh) -> Result<(), PacketError> {
    for entry in &packet.layout.entries {
        if !entry.section.transfers_out() {
            continue;
        }
        let structure = entry
            .id
            .strip_prefix("grid_data:")
            .expect("only grid entries transfer out");
        let si = StructureIndex::parse(structure).expect("valid structure");
        if si != StructureIndex::Center {
            return Err(PacketError::UnsupportedStructure(structure.to_owned()));
        }
        let vars = entry.variables.as_ref().expect("grid entries carry variables");
        let win = packet.layout.window_elems(si) as usize;
        let h = packet.layout.nguard as i64;
        let base = (entry.offset_bytes / REAL_BYTES) as usize;
        for (bidx, &block) in packet.block_ids.iter().enumerate() {
            if block >= mesh.n_blocks() {
                return Err(PacketError::UnknownBlock(block));
            }
            let mut guard = mesh.lock(block);
            let mut t = guard.tile();
            for (pos, var) in vars.iter().enumerate() {
                let v = var_index(var).ok_or_else(|| PacketError::UnknownVariable(var.clone()))?;
                let mut at = base
                    + bidx * (entry.per_block_bytes / REAL_BYTES) as usize
                    + pos * win;
                for j in -h..(packet.layout.nyb as i64 + h) {
                    for i in -h..(packet.layout.nxb as i64 + h) {
                        t.set(v, i, j, packet.buffer[at]);
                        at += 1;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Applies a packet's outbound regions onto a single block's storage
/// (duplicate-mode branch results: the mesh itself stays untouched).
pub fn overlay_block(
    packet: &DataPacket,
    block_index_in_packet: usize,
    target: &mut crate::mesh::BlockData,
) {
    let h = packet.layout.nguard as i64;
    let mut t = target.tile();
    for entry in &packet.layout.entries {
        if !entry.section.transfers_out() {
            continue;
        }
        let Some(structure) = entry.id.strip_prefix("grid_data:") else {
            continue;
        };
        let si = StructureIndex::parse(structure).expect("valid structure");
        let vars = entry.variables.as_ref().expect("grid entries carry variables");
        let win = packet.layout.window_elems(si) as usize;
        let base = (entry.offset_bytes / REAL_BYTES) as usize;
        for (pos, var) in vars.iter().enumerate() {
            let v = var_index(var).expect("packed variables are registered");
            let mut at = base
                + block_index_in_packet * (entry.per_block_bytes / REAL_BYTES) as usize
                + pos * win;
            for j in -h..(packet.layout.nyb as i64 + h) {
                for i in -h..(packet.layout.nxb as i64 + h) {
                    t.set(v, i, j, packet.buffer[at]);
                    at += 1;
                }
            }
        }
    }
}

/// Mutable per-block views into a packet: the tile over the grid-center
/// variables plus named scratch slices. Used by the device-proxy team to
/// run kernels directly on packet storage.
pub fn block_views<'a>(
    packet: &'a mut DataPacket,
    block_index_in_packet: usize,
) -> (Tile<'a>, BTreeMap<String, &'a mut [f64]>) {
    assert!(block_index_in_packet < packet.layout.n_blocks);
    // collect (elem offset, elem len, destination) for this block
    enum Dest {
        Var(usize),
        Scratch(String),
    }
    let mut pieces: Vec<(usize, usize, Dest)> = Vec::new();
    let win = packet.layout.window_elems(StructureIndex::Center) as usize;
    for entry in &packet.layout.entries {
        let base = (entry.offset_bytes / REAL_BYTES) as usize;
        let block_off = block_index_in_packet * (entry.per_block_bytes / REAL_BYTES) as usize;
        if let Some(structure) = entry.id.strip_prefix("grid_data:") {
            if StructureIndex::parse(structure) == Some(StructureIndex::Center) {
                for (pos, var) in entry.variables.as_ref().unwrap().iter().enumerate() {
                    let v = var_index(var).expect("packed variables are registered");
                    pieces.push((base + block_off + pos * win, win, Dest::Var(v)));
                }
            }
        } else if let Some(name) = entry.id.strip_prefix("scratch:") {
            let len = (entry.per_block_bytes / REAL_BYTES) as usize;
            pieces.push((base + block_off, len, Dest::Scratch(name.to_owned())));
        }
    }
    pieces.sort_by_key(|(off, _, _)| *off);

    let mut wins: Vec<Option<&mut [f64]>> = (0..NVARS).map(|_| None).collect();
    let mut scratch = BTreeMap::new();
    let mut rest: &mut [f64] = &mut packet.buffer;
    let mut consumed = 0usize;
    for (off, len, dest) in pieces {
        debug_assert!(off >= consumed, "layout entries are non-overlapping");
        let (_, tail) = rest.split_at_mut(off - consumed);
        let (piece, tail) = tail.split_at_mut(len);
        rest = tail;
        consumed = off + len;
        match dest {
            Dest::Var(v) => wins[v] = Some(piece),
            Dest::Scratch(name) => {
                scratch.insert(name, piece);
            }
        }
    }
    (
        Tile::from_windows(wins, packet.layout.nxb, packet.layout.nyb, packet.layout.nguard),
        scratch,
    )
}
