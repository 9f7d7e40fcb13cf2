//! Uniform block-structured mesh with halo cells.
//!
//! The domain is decomposed into `nbx * nby` blocks of `nxb * nyb` interior
//! cells each; every block carries a halo of width `h` holding copies of
//! neighbor data (periodic boundaries). Block storage is guarded by
//! per-block locks so pipeline stages can work on disjoint blocks
//! concurrently.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard};

use crate::expr::MeshParams;

/// Registered mesh variables, in storage order.
pub const VAR_NAMES: [&str; 9] = [
    "dens", "velx", "vely", "ener", "pres", "temp", "s1", "s2", "s3",
];
pub const NVARS: usize = VAR_NAMES.len();

pub const DENS: usize = 0;
pub const VELX: usize = 1;
pub const VELY: usize = 2;
pub const ENER: usize = 3;
pub const PRES: usize = 4;
pub const TEMP: usize = 5;
pub const S1: usize = 6;
pub const S2: usize = 7;
pub const S3: usize = 8;

pub fn var_index(name: &str) -> Option<usize> {
    VAR_NAMES.iter().position(|v| *v == name)
}

/// Raw storage of one block: all variables, full window including halo,
/// variable-major then row-major (j outer, i inner).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockData {
    pub data: Vec<f64>,
    pub nxb: usize,
    pub nyb: usize,
    pub h: usize,
}

impl BlockData {
    pub fn new(nxb: usize, nyb: usize, h: usize) -> Self {
        let wx = nxb + 2 * h;
        let wy = nyb + 2 * h;
        BlockData {
            data: vec![0.0; NVARS * wx * wy],
            nxb,
            nyb,
            h,
        }
    }

    pub fn window(&self) -> (usize, usize) {
        (self.nxb + 2 * self.h, self.nyb + 2 * self.h)
    }

    /// Mutable per-variable windows as a [`Tile`] over all variables.
    pub fn tile(&mut self) -> Tile<'_> {
        let (wx, wy) = self.window();
        let plane = wx * wy;
        let mut rest: &mut [f64] = &mut self.data;
        let mut wins: Vec<Option<&mut [f64]>> = Vec::with_capacity(NVARS);
        for _ in 0..NVARS {
            let (head, tail) = rest.split_at_mut(plane);
            wins.push(Some(head));
            rest = tail;
        }
        Tile {
            wins,
            nxb: self.nxb,
            nyb: self.nyb,
            h: self.h,
            wx,
        }
    }

    /// Read-only view (internally still a `Tile`; the shared-reference
    /// constructors below keep call sites honest).
    pub fn tile_ref(&self) -> TileRef<'_> {
        let (wx, wy) = self.window();
        TileRef {
            data: &self.data,
            plane: wx * wy,
            nxb: self.nxb,
            nyb: self.nyb,
            h: self.h,
            wx,
        }
    }
}

/// Mutable view of a block's variables: one contiguous window per variable.
/// Windows may be absent when the backing store (e.g. a data packet) does
/// not carry that variable.
pub struct Tile<'a> {
    wins: Vec<Option<&'a mut [f64]>>,
    pub nxb: usize,
    pub nyb: usize,
    pub h: usize,
    wx: usize,
}

impl<'a> Tile<'a> {
    pub fn from_windows(
        wins: Vec<Option<&'a mut [f64]>>,
        nxb: usize,
        nyb: usize,
        h: usize,
    ) -> Self {
        assert_eq!(wins.len(), NVARS);
        Tile {
            wins,
            nxb,
            nyb,
            h,
            wx: nxb + 2 * h,
        }
    }

    #[inline]
    fn off(&self, i: i64, j: i64) -> usize {
        debug_assert!(i >= -(self.h as i64) && i < (self.nxb + self.h) as i64);
        debug_assert!(j >= -(self.h as i64) && j < (self.nyb + self.h) as i64);
        (j + self.h as i64) as usize * self.wx + (i + self.h as i64) as usize
    }

    pub fn has(&self, var: usize) -> bool {
        self.wins[var].is_some()
    }

    /// Cell value; `i`/`j` are interior-relative and may index into the halo.
    #[inline]
    pub fn get(&self, var: usize, i: i64, j: i64) -> f64 {
        let off = self.off(i, j);
        self.wins[var].as_ref().expect("variable present")[off]
    }

    #[inline]
    pub fn set(&mut self, var: usize, i: i64, j: i64, value: f64) {
        let off = self.off(i, j);
        self.wins[var].as_mut().expect("variable present")[off] = value;
    }

    pub fn window_slice(&self, var: usize) -> Option<&[f64]> {
        self.wins[var].as_deref()
    }

    pub fn window_slice_mut(&mut self, var: usize) -> Option<&mut [f64]> {
        self.wins[var].as_deref_mut()
    }
}

/// Shared (read-only) view of a full block.
pub struct TileRef<'a> {
    data: &'a [f64],
    plane: usize,
    pub nxb: usize,
    pub nyb: usize,
    pub h: usize,
    wx: usize,
}

impl TileRef<'_> {
    #[inline]
    pub fn get(&self, var: usize, i: i64, j: i64) -> f64 {
        let off = (j + self.h as i64) as usize * self.wx + (i + self.h as i64) as usize;
        self.data[var * self.plane + off]
    }
}

/// The block-structured mesh. Cell sizes are uniform; boundaries are
/// periodic in both directions.
pub struct BlockMesh {
    pub nbx: usize,
    pub nby: usize,
    pub nxb: usize,
    pub nyb: usize,
    pub h: usize,
    /// Physical domain extents.
    pub lengths: [f64; 2],
    blocks: Vec<Mutex<BlockData>>,
}

impl BlockMesh {
    pub fn new(nbx: usize, nby: usize, nxb: usize, nyb: usize, h: usize, lengths: [f64; 2]) -> Self {
        assert!(nbx >= 1 && nby >= 1 && nxb >= 1 && nyb >= 1);
        assert!(h >= 1, "halo width must be at least 1");
        assert!(
            h <= nxb && h <= nyb,
            "halo width must not exceed the interior extent"
        );
        let blocks = (0..nbx * nby)
            .map(|_| Mutex::new(BlockData::new(nxb, nyb, h)))
            .collect();
        BlockMesh {
            nbx,
            nby,
            nxb,
            nyb,
            h,
            lengths,
            blocks,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.nbx * self.nby
    }

    pub fn cells(&self) -> (usize, usize) {
        (self.nbx * self.nxb, self.nby * self.nyb)
    }

    pub fn deltas(&self) -> [f64; 2] {
        let (nx, ny) = self.cells();
        [self.lengths[0] / nx as f64, self.lengths[1] / ny as f64]
    }

    pub fn block_coords(&self, id: usize) -> (usize, usize) {
        (id % self.nbx, id / self.nbx)
    }

    /// Global index of the first interior cell of a block.
    pub fn lo(&self, id: usize) -> [i64; 2] {
        let (bx, by) = self.block_coords(id);
        [(bx * self.nxb) as i64, (by * self.nyb) as i64]
    }

    /// Global index of the last interior cell of a block (inclusive).
    pub fn hi(&self, id: usize) -> [i64; 2] {
        let lo = self.lo(id);
        [lo[0] + self.nxb as i64 - 1, lo[1] + self.nyb as i64 - 1]
    }

    pub fn lock(&self, id: usize) -> MutexGuard<'_, BlockData> {
        self.blocks[id].lock().expect("block lock poisoned")
    }

    pub fn clone_block(&self, id: usize) -> BlockData {
        self.lock(id).clone()
    }

    pub fn params(&self) -> MeshParams {
        MeshParams {
            nxb: self.nxb,
            nyb: self.nyb,
            nguard: self.h,
            nvars: NVARS,
        }
    }

    /// Fills every block's halo from neighbor interiors (periodic). The
    /// fill works from a snapshot, so it is independent of block order.
    pub fn fill_halos(&self) {
        let snapshot: Vec<BlockData> = (0..self.n_blocks()).map(|b| self.clone_block(b)).collect();
        let (nx, ny) = self.cells();
        let h = self.h as i64;
        for id in 0..self.n_blocks() {
            let (bx, by) = self.block_coords(id);
            let mut guard = self.lock(id);
            let mut tile = guard.tile();
            for j in -h..(self.nyb as i64 + h) {
                for i in -h..(self.nxb as i64 + h) {
                    let interior = i >= 0
                        && i < self.nxb as i64
                        && j >= 0
                        && j < self.nyb as i64;
                    if interior {
                        continue;
                    }
                    let gx = ((bx * self.nxb) as i64 + i).rem_euclid(nx as i64);
                    let gy = ((by * self.nyb) as i64 + j).rem_euclid(ny as i64);
                    let sb = (gy as usize / self.nyb) * self.nbx + gx as usize / self.nxb;
                    let si = (gx as usize % self.nxb) as i64;
                    let sj = (gy as usize % self.nyb) as i64;
                    let src = snapshot[sb].tile_ref();
                    for v in 0..NVARS {
                        tile.set(v, i, j, src.get(v, si, sj));
                    }
                }
            }
        }
    }

    /// Per-variable FNV-1a checksum over the raw bytes of the interior
    /// cells (block id order, row-major), rendered as 16 hex digits.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        let mut hashes = vec![FNV_OFFSET; NVARS];
        for id in 0..self.n_blocks() {
            let guard = self.lock(id);
            let t = guard.tile_ref();
            for (v, hash) in hashes.iter_mut().enumerate() {
                for j in 0..self.nyb as i64 {
                    for i in 0..self.nxb as i64 {
                        *hash = fnv1a_step(*hash, &t.get(v, i, j).to_le_bytes());
                    }
                }
            }
        }
        VAR_NAMES
            .iter()
            .zip(hashes)
            .map(|(name, h)| (name.to_string(), format!("{h:016x}")))
            .collect()
    }

    /// Sum of a variable over all interior cells times the cell volume.
    pub fn integral(&self, var: usize) -> f64 {
        let d = self.deltas();
        let vol = d[0] * d[1];
        let mut acc = 0.0;
        for id in 0..self.n_blocks() {
            let guard = self.lock(id);
            let t = guard.tile_ref();
            for j in 0..self.nyb as i64 {
                for i in 0..self.nxb as i64 {
                    acc += t.get(var, i, j);
                }
            }
        }
        acc * vol
    }

    /// Writes raw little-endian interior data per variable plus a JSON
    /// sidecar describing dims and order, and the per-variable checksums.
    pub fn dump(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (v, name) in VAR_NAMES.iter().enumerate() {
            let mut f = std::fs::File::create(dir.join(format!("{name}.bin")))?;
            for id in 0..self.n_blocks() {
                let guard = self.lock(id);
                let t = guard.tile_ref();
                for j in 0..self.nyb as i64 {
                    for i in 0..self.nxb as i64 {
                        f.write_all(&t.get(v, i, j).to_le_bytes())?;
                    }
                }
            }
        }
        let sidecar = serde_json::json!({
            "nbx": self.nbx,
            "nby": self.nby,
            "nxb": self.nxb,
            "nyb": self.nyb,
            "nguard": self.h,
            "lengths": self.lengths,
            "variables": VAR_NAMES,
            "dtype": "f64-le",
            "order": "per variable: blocks in id order, interior cells row-major (j outer)",
        });
        std::fs::write(
            dir.join("mesh.json"),
            serde_json::to_string_pretty(&sidecar)? + "\n",
        )?;
        let sums = serde_json::json!(self.checksums());
        std::fs::write(
            dir.join("checksums.json"),
            serde_json::to_string_pretty(&sums)? + "\n",
        )?;
        Ok(())
    }

    /// Bitwise equality of all interior cells (halo excluded).
    pub fn interior_eq(&self, other: &BlockMesh) -> bool {
        if self.n_blocks() != other.n_blocks()
            || self.nxb != other.nxb
            || self.nyb != other.nyb
        {
            return false;
        }
        for id in 0..self.n_blocks() {
            let a = self.lock(id);
            let b = other.lock(id);
            let (ta, tb) = (a.tile_ref(), b.tile_ref());
            for v in 0..NVARS {
                for j in 0..self.nyb as i64 {
                    for i in 0..self.nxb as i64 {
                        if ta.get(v, i, j).to_bits() != tb.get(v, i, j).to_bits() {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

#[inline]
fn fnv1a_step(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// FNV-1a over a byte slice, for report checksums.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    fnv1a_step(FNV_OFFSET, bytes)
}
