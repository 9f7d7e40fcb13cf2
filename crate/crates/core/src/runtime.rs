//! Measured-mode runtime: persistent thread teams executing a pipeline
//! plan over the mesh.
//!
//! Teams are created once and reused for every cycle; per cycle each team
//! is assigned one pipeline stage and a stream of data items through an
//! inbound queue. "GPU" stages are a device-proxy team running the same
//! kernel arithmetic as the host, with transfer cost imposed as timed
//! occupancy of a single simulated link (at most `streams` packets in
//! flight). Data items are moved between stages, never shared; mesh
//! writers touch disjoint blocks, so the final state is bitwise
//! independent of worker counts, stream counts, and packet sizes.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crossbeam_channel as chan;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codegen::{CallBinding, ExecutablePlan};
use crate::kernels::{
    scratch_wants, KernelCtx, KernelError, KernelRegistry, ScratchArena,
};
use crate::mesh::{var_index, BlockData, BlockMesh};
use crate::packet::{self, DataPacket, PacketError, TileWrapper};
use crate::planner::{FanOutMode, StageKind, StageSpec};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
    #[error("pipeline stalled past the watchdog timeout; queue diagnostics:\n{0}")]
    Deadlock(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Packet(#[from] PacketError),
    #[error("runtime state error: {0}")]
    State(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeamRole {
    HostCompute,
    DeviceProxy,
    Mover,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThreadTeamConfig {
    pub name: String,
    pub workers: usize,
    pub role: TeamRole,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LinkCost {
    pub alpha_us: f64,
    pub beta_us_per_kib: f64,
}

impl Default for LinkCost {
    fn default() -> Self {
        LinkCost {
            alpha_us: 10.0,
            beta_us_per_kib: 1.0,
        }
    }
}

fn default_watchdog() -> f64 {
    30.0
}

/// Runtime configuration of one pipeline, mirrored by the run
/// configuration file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub teams: Vec<ThreadTeamConfig>,
    pub n_blocks_per_packet: usize,
    /// Maximum packets in flight on the device link.
    pub streams: usize,
    /// Ordered (from, to) team pairs; a drained team's workers join the
    /// target team for the rest of the cycle.
    #[serde(default)]
    pub donation_edges: Vec<(String, String)>,
    /// Fraction of blocks sent to the CPU branch in split mode.
    #[serde(default)]
    pub split_ratio: f64,
    #[serde(default)]
    pub link: LinkCost,
    #[serde(default = "default_watchdog")]
    pub watchdog_timeout_s: f64,
    /// External scalar values visible to kernels (besides `dt`).
    #[serde(default)]
    pub externals: BTreeMap<String, f64>,
}

impl PipelineConfig {
    /// Default teams for every stage of a plan: host stages get two
    /// workers, the device proxy one worker per stream, movers one.
    pub fn for_plan(exec: &ExecutablePlan) -> Self {
        let streams = 2usize;
        let teams = exec
            .topology
            .stages
            .iter()
            .map(|s| match &s.kind {
                StageKind::Distributor => ThreadTeamConfig {
                    name: s.name.clone(),
                    workers: 1,
                    role: TeamRole::HostCompute,
                },
                StageKind::Task { device, .. } if device.is_gpu() => ThreadTeamConfig {
                    name: s.name.clone(),
                    workers: streams,
                    role: TeamRole::DeviceProxy,
                },
                StageKind::Task { .. } => ThreadTeamConfig {
                    name: s.name.clone(),
                    workers: 2,
                    role: TeamRole::HostCompute,
                },
                StageKind::Mover { .. } => ThreadTeamConfig {
                    name: s.name.clone(),
                    workers: 1,
                    role: TeamRole::Mover,
                },
                StageKind::MergeBarrier { .. } => ThreadTeamConfig {
                    name: s.name.clone(),
                    workers: 1,
                    role: TeamRole::HostCompute,
                },
            })
            .collect();
        PipelineConfig {
            teams,
            n_blocks_per_packet: 16,
            streams,
            donation_edges: Vec::new(),
            split_ratio: 0.5,
            link: LinkCost::default(),
            watchdog_timeout_s: default_watchdog(),
            externals: BTreeMap::new(),
        }
    }

    pub fn team(&self, name: &str) -> Option<&ThreadTeamConfig> {
        self.teams.iter().find(|t| t.name == name)
    }

    pub fn set_workers(&mut self, name: &str, workers: usize) {
        if let Some(t) = self.teams.iter_mut().find(|t| t.name == name) {
            t.workers = workers;
        }
    }

    fn validate(&self) -> Result<(), RuntimeError> {
        if self.streams < 1 {
            return Err(RuntimeError::InvalidConfig("streams must be >= 1".into()));
        }
        if self.n_blocks_per_packet < 1 {
            return Err(RuntimeError::InvalidConfig(
                "n_blocks_per_packet must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.split_ratio) {
            return Err(RuntimeError::InvalidConfig(
                "split_ratio must be within [0, 1]".into(),
            ));
        }
        for t in &self.teams {
            if t.workers < 1 {
                return Err(RuntimeError::InvalidConfig(format!(
                    "team `{}` needs at least one worker",
                    t.name
                )));
            }
        }
        // donation edges: known teams, at most one outgoing, acyclic
        let mut outgoing: BTreeMap<&str, &str> = BTreeMap::new();
        for (from, to) in &self.donation_edges {
            if self.team(from).is_none() || self.team(to).is_none() {
                return Err(RuntimeError::InvalidConfig(format!(
                    "donation edge references unknown team `{from}` -> `{to}`"
                )));
            }
            if outgoing.insert(from, to).is_some() {
                return Err(RuntimeError::InvalidConfig(format!(
                    "team `{from}` has more than one outgoing donation edge"
                )));
            }
        }
        for start in outgoing.keys() {
            let mut seen = vec![*start];
            let mut cur = *start;
            while let Some(next) = outgoing.get(cur) {
                if seen.contains(next) {
                    return Err(RuntimeError::InvalidConfig(format!(
                        "donation edges form a cycle through `{next}`"
                    )));
                }
                seen.push(next);
                cur = next;
            }
        }
        Ok(())
    }
}

/// Per-cycle inputs.
#[derive(Clone, Copy, Debug)]
pub struct StepInputs {
    pub dt: f64,
}

/// What one cycle (or a run of cycles) did.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub steps: u64,
    pub blocks: usize,
    pub total_wall_s: f64,
    /// Busy seconds summed over each team's workers.
    pub stage_busy_s: BTreeMap<String, f64>,
    pub items_processed: BTreeMap<String, u64>,
    pub donated_items: BTreeMap<String, u64>,
    pub transfer_bytes_in: u64,
    pub transfer_bytes_out: u64,
    /// Per-variable FNV-1a checksums over the mesh interior.
    pub checksums: BTreeMap<String, String>,
    pub teams_created: usize,
    pub workers_spawned: usize,
    #[serde(skip)]
    pub per_block_counts: BTreeMap<String, Vec<u32>>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn merge_cycle(&mut self, other: RunReport) {
        self.steps += other.steps;
        self.total_wall_s += other.total_wall_s;
        for (k, v) in other.stage_busy_s {
            *self.stage_busy_s.entry(k).or_insert(0.0) += v;
        }
        for (k, v) in other.items_processed {
            *self.items_processed.entry(k).or_insert(0) += v;
        }
        for (k, v) in other.donated_items {
            *self.donated_items.entry(k).or_insert(0) += v;
        }
        self.transfer_bytes_in += other.transfer_bytes_in;
        self.transfer_bytes_out += other.transfer_bytes_out;
        self.checksums = other.checksums;
        self.per_block_counts = other.per_block_counts;
    }
}

// ---------------------------------------------------------------------------
// Simulated device link and stream permits
// ---------------------------------------------------------------------------

/// One transfer link: occupancy is exclusive and timed.
struct SimLink {
    gate: Mutex<()>,
    busy_ns: AtomicU64,
}

impl SimLink {
    fn new() -> Self {
        SimLink {
            gate: Mutex::new(()),
            busy_ns: AtomicU64::new(0),
        }
    }

    fn occupy_us(&self, us: f64) {
        let _hold = self.gate.lock().expect("link lock");
        let ns = (us * 1000.0) as u64;
        self.busy_ns.fetch_add(ns, Ordering::Relaxed);
        std::thread::sleep(Duration::from_nanos(ns));
    }
}

struct Semaphore {
    state: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            state: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    fn acquire_timeout(&self, timeout: Duration) -> bool {
        let mut n = self.state.lock().expect("semaphore lock");
        let deadline = Instant::now() + timeout;
        while *n == 0 {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return false;
            }
            let (guard, res) = self.cv.wait_timeout(n, left).expect("semaphore wait");
            n = guard;
            if res.timed_out() && *n == 0 {
                return false;
            }
        }
        *n -= 1;
        true
    }

    fn release(&self) {
        let mut n = self.state.lock().expect("semaphore lock");
        *n += 1;
        self.cv.notify_one();
    }
}

// ---------------------------------------------------------------------------
// Cycle plumbing
// ---------------------------------------------------------------------------

/// Branch results waiting at a merge barrier, one slot per side.
type PendingPair = (Option<Box<BlockData>>, Option<Box<BlockData>>);

/// A data item in flight between stages.
enum WorkItem {
    /// In-place reference to a live mesh block.
    Tile(TileWrapper),
    /// Batched block data headed to or returning from the device.
    Packet(DataPacket),
    /// Duplicate-mode branch result: a private copy of one block.
    Branch {
        block: usize,
        side: u8,
        data: Box<BlockData>,
    },
}

struct StageRt {
    spec: StageSpec,
    side: Option<u8>,
    rx: chan::Receiver<WorkItem>,
    /// Senders to downstream stages; dropped by the last worker out.
    outbox: Mutex<Option<Vec<chan::Sender<WorkItem>>>>,
    active: AtomicUsize,
    processed: AtomicU64,
    donated: AtomicU64,
    busy_ns: AtomicU64,
    per_block: Vec<AtomicU32>,
    pending: Mutex<BTreeMap<usize, PendingPair>>,
    calls: Vec<CallBinding>,
}

impl StageRt {
    fn send_downstream(&self, item: WorkItem) {
        if let Some(senders) = self.outbox.lock().expect("outbox lock").as_ref() {
            if let Some(tx) = senders.first() {
                tx.send(item).ok();
            }
        }
    }

    fn leave(&self) {
        if self.active.fetch_sub(1, Ordering::AcqRel) == 1 {
            self.outbox.lock().expect("outbox lock").take();
        }
    }
}

struct CycleShared {
    mesh: Arc<BlockMesh>,
    registry: Arc<KernelRegistry>,
    stages: Vec<StageRt>,
    link: SimLink,
    streams: Arc<Semaphore>,
    dt: f64,
    externals: BTreeMap<String, f64>,
    link_cost: LinkCost,
    transfer_in: AtomicU64,
    transfer_out: AtomicU64,
    errors: Mutex<Vec<RuntimeError>>,
    done_tx: chan::Sender<()>,
    /// out-variable indices of the duplicate branches, for overlay merges
    branch_outs: [Vec<usize>; 2],
}

impl CycleShared {
    fn fail(&self, err: RuntimeError) {
        self.errors.lock().expect("error lock").push(err);
    }
}

enum CtlMsg {
    Cycle {
        shared: Arc<CycleShared>,
        home: Option<usize>,
        donate: Option<usize>,
    },
    Shutdown,
}

/// Post-processing run after each cycle, outside orchestration (e.g. a
/// flux-correction pass too light to be worth a task function).
pub type PostCycleHook = Box<dyn Fn(&BlockMesh) + Send>;

/// Handle to the persistent thread teams.
pub struct Runtime {
    cfg: PipelineConfig,
    workers: Vec<WorkerHandle>,
    /// worker index ranges per team, parallel to `cfg.teams`
    team_workers: Vec<Vec<usize>>,
    teams_created: usize,
    team_recreations: usize,
    cycles_run: u64,
    in_cycle: bool,
    broken: bool,
    post_cycle: Option<PostCycleHook>,
}

struct WorkerHandle {
    ctl: chan::Sender<CtlMsg>,
    join: Option<std::thread::JoinHandle<()>>,
}

/// Creates the persistent thread teams. Teams are spawned once and reused
/// by every `run_cycle` until the handle is dropped.
pub fn start_teams(cfg: PipelineConfig) -> Result<Runtime, RuntimeError> {
    cfg.validate()?;
    let mut workers = Vec::new();
    let mut team_workers = Vec::new();
    for team in &cfg.teams {
        let mut ids = Vec::new();
        for _ in 0..team.workers {
            let (ctl_tx, ctl_rx) = chan::unbounded::<CtlMsg>();
            let join = std::thread::Builder::new()
                .name(format!("team-{}", team.name))
                .spawn(move || worker_main(ctl_rx))
                .expect("spawn worker");
            ids.push(workers.len());
            workers.push(WorkerHandle {
                ctl: ctl_tx,
                join: Some(join),
            });
        }
        team_workers.push(ids);
    }
    let teams_created = cfg.teams.len();
    Ok(Runtime {
        cfg,
        workers,
        team_workers,
        teams_created,
        team_recreations: 0,
        cycles_run: 0,
        in_cycle: false,
        broken: false,
        post_cycle: None,
    })
}

fn worker_main(ctl: chan::Receiver<CtlMsg>) {
    while let Ok(msg) = ctl.recv() {
        match msg {
            CtlMsg::Cycle { shared, home, donate } => {
                let mut arena = ScratchArena::new();
                if let Some(stage) = home {
                    drain_stage(&shared, stage, false, &mut arena);
                }
                if let Some(stage) = donate {
                    drain_stage(&shared, stage, true, &mut arena);
                }
                shared.done_tx.send(()).ok();
            }
            CtlMsg::Shutdown => break,
        }
    }
}

fn drain_stage(shared: &CycleShared, stage_idx: usize, donated: bool, arena: &mut ScratchArena) {
    let stage = &shared.stages[stage_idx];
    while let Ok(item) = stage.rx.recv() {
        let t0 = Instant::now();
        let res = handle_item(shared, stage, item, arena);
        stage
            .busy_ns
            .fetch_add(t0.elapsed().as_nanos() as u64, Ordering::Relaxed);
        if donated {
            stage.donated.fetch_add(1, Ordering::Relaxed);
        }
        if let Err(e) = res {
            shared.fail(e);
            break;
        }
    }
    stage.leave();
}

enum TileSource<'a> {
    MeshBlock,
    Buffer(&'a mut BlockData),
}

fn run_calls_on_tile(
    shared: &CycleShared,
    stage: &StageRt,
    block: usize,
    mut tile_src: TileSource<'_>,
    arena: &mut ScratchArena,
) -> Result<(), KernelError> {
    let mesh = &shared.mesh;
    let params = mesh.params();
    let deltas = mesh.deltas();
    let (lo, hi) = (mesh.lo(block), mesh.hi(block));
    let device = match &stage.spec.kind {
        StageKind::Task { device, .. } => device.clone(),
        _ => unreachable!("only task stages run kernel calls"),
    };
    for call in &stage.calls {
        let entry = shared.registry.entry(&call.routine)?;
        let kernel = entry.variant(&device)?.clone();
        let wants = scratch_wants(&entry.spec, &params)
            .map_err(|_| KernelError::MissingScratch(call.routine.clone()))?;
        let scratch = arena.views(&wants);
        match &mut tile_src {
            TileSource::MeshBlock => {
                let mut guard = mesh.lock(block);
                let ctx = KernelCtx {
                    tile: guard.tile(),
                    scratch,
                    externals: &shared.externals,
                    dt: shared.dt,
                    lo,
                    hi,
                    deltas,
                    block_id: block,
                };
                kernel.run(ctx)?;
            }
            TileSource::Buffer(data) => {
                let ctx = KernelCtx {
                    tile: data.tile(),
                    scratch,
                    externals: &shared.externals,
                    dt: shared.dt,
                    lo,
                    hi,
                    deltas,
                    block_id: block,
                };
                kernel.run(ctx)?;
            }
        }
    }
    Ok(())
}

fn handle_item(
    shared: &CycleShared,
    stage: &StageRt,
    item: WorkItem,
    arena: &mut ScratchArena,
) -> Result<(), RuntimeError> {
    match (&stage.spec.kind, item) {
        (StageKind::Task { device, .. }, WorkItem::Tile(w)) => {
            debug_assert!(device.is_cpu());
            run_calls_on_tile(shared, stage, w.block_id, TileSource::MeshBlock, arena)?;
            stage.per_block[w.block_id].fetch_add(1, Ordering::Relaxed);
            stage.processed.fetch_add(1, Ordering::Relaxed);
            stage.send_downstream(WorkItem::Tile(w));
            Ok(())
        }
        (StageKind::Task { device, .. }, WorkItem::Branch { block, side, mut data }) => {
            debug_assert!(device.is_cpu());
            run_calls_on_tile(shared, stage, block, TileSource::Buffer(&mut data), arena)?;
            let data = data;
            stage.per_block[block].fetch_add(1, Ordering::Relaxed);
            stage.processed.fetch_add(1, Ordering::Relaxed);
            stage.send_downstream(WorkItem::Branch { block, side, data });
            Ok(())
        }
        (StageKind::Task { .. }, WorkItem::Packet(mut pkt)) => {
            // transfer in, compute per block on packet storage, transfer out
            let in_us = shared.link_cost.alpha_us
                + shared.link_cost.beta_us_per_kib
                    * (pkt.layout.transfer_in_bytes as f64 / 1024.0);
            shared.link.occupy_us(in_us);
            shared
                .transfer_in
                .fetch_add(pkt.layout.transfer_in_bytes, Ordering::Relaxed);
            let block_ids = pkt.block_ids.clone();
            let device = match &stage.spec.kind {
                StageKind::Task { device, .. } => device.clone(),
                _ => unreachable!(),
            };
            for (idx, &block) in block_ids.iter().enumerate() {
                let mesh = &shared.mesh;
                let (lo, hi, deltas) = (mesh.lo(block), mesh.hi(block), mesh.deltas());
                // the task function's calls run back to back per block,
                // each over fresh views into the packet storage
                for call in &stage.calls {
                    let entry = shared.registry.entry(&call.routine)?;
                    let kernel = entry.variant(&device)?.clone();
                    let (tile, scratch) = packet::block_views(&mut pkt, idx);
                    let ctx = KernelCtx {
                        tile,
                        scratch,
                        externals: &shared.externals,
                        dt: shared.dt,
                        lo,
                        hi,
                        deltas,
                        block_id: block,
                    };
                    kernel.run(ctx)?;
                }
                stage.per_block[block].fetch_add(1, Ordering::Relaxed);
            }
            stage.processed.fetch_add(1, Ordering::Relaxed);
            let out_us = shared.link_cost.alpha_us
                + shared.link_cost.beta_us_per_kib
                    * (pkt.layout.transfer_out_bytes as f64 / 1024.0);
            shared.link.occupy_us(out_us);
            shared
                .transfer_out
                .fetch_add(pkt.layout.transfer_out_bytes, Ordering::Relaxed);
            stage.send_downstream(WorkItem::Packet(pkt));
            Ok(())
        }
        (StageKind::Mover { to_mesh }, WorkItem::Packet(pkt)) => {
            if *to_mesh {
                packet::unpack(&pkt, &shared.mesh)?;
                shared.streams.release();
                for &block in &pkt.block_ids {
                    stage.per_block[block].fetch_add(1, Ordering::Relaxed);
                    stage.send_downstream(WorkItem::Tile(TileWrapper::new(
                        &shared.mesh,
                        block,
                        shared.dt,
                    )));
                }
            } else {
                // duplicate mode: branch results stay private to the merge
                for (idx, &block) in pkt.block_ids.iter().enumerate() {
                    let mut data = Box::new(shared.mesh.clone_block(block));
                    packet::overlay_block(&pkt, idx, &mut data);
                    stage.per_block[block].fetch_add(1, Ordering::Relaxed);
                    stage.send_downstream(WorkItem::Branch {
                        block,
                        side: stage.side.unwrap_or(0),
                        data,
                    });
                }
                shared.streams.release();
            }
            stage.processed.fetch_add(1, Ordering::Relaxed);
            Ok(())
        }
        (StageKind::MergeBarrier { kernel }, WorkItem::Branch { block, side, data }) => {
            let pair = {
                let mut pending = stage.pending.lock().expect("pending lock");
                let slot = pending.entry(block).or_insert((None, None));
                if side == 0 {
                    slot.0 = Some(data);
                } else {
                    slot.1 = Some(data);
                }
                if slot.0.is_some() && slot.1.is_some() {
                    pending.remove(&block)
                } else {
                    None
                }
            };
            let Some((a, b)) = pair else { return Ok(()) };
            let (mut a, mut b) = (a.expect("side 0 present"), b.expect("side 1 present"));
            {
                let mut guard = shared.mesh.lock(block);
                match kernel {
                    Some(name) => {
                        let merge = shared
                            .registry
                            .merge_kernel(name)
                            .ok_or_else(|| KernelError::UnknownKernel(name.clone()))?
                            .clone();
                        let mut out = guard.tile();
                        merge.merge(&a.tile(), &b.tile(), &mut out)?;
                    }
                    None => {
                        // disjoint write masks: overlay each branch's outs
                        let mut out = guard.tile();
                        let h = shared.mesh.h as i64;
                        for (branch, outs) in
                            [(&mut a, &shared.branch_outs[0]), (&mut b, &shared.branch_outs[1])]
                        {
                            let src = branch.tile_ref();
                            for &v in outs {
                                for j in -h..(shared.mesh.nyb as i64 + h) {
                                    for i in -h..(shared.mesh.nxb as i64 + h) {
                                        out.set(v, i, j, src.get(v, i, j));
                                    }
                                }
                            }
                        }
                    }
                }
            }
            stage.per_block[block].fetch_add(1, Ordering::Relaxed);
            stage.processed.fetch_add(1, Ordering::Relaxed);
            stage.send_downstream(WorkItem::Tile(TileWrapper::new(
                &shared.mesh,
                block,
                shared.dt,
            )));
            Ok(())
        }
        (kind, _) => Err(RuntimeError::State(format!(
            "stage `{}` ({kind:?}) received an incompatible data item",
            stage.spec.name
        ))),
    }
}

impl Runtime {
    pub fn teams_created(&self) -> usize {
        self.teams_created
    }

    pub fn team_recreations(&self) -> usize {
        self.team_recreations
    }

    pub fn workers_spawned(&self) -> usize {
        self.workers.len()
    }

    pub fn cycles_run(&self) -> u64 {
        self.cycles_run
    }

    /// Teams currently idle (all of them outside a cycle).
    pub fn idle_teams(&self) -> usize {
        if self.in_cycle {
            0
        } else {
            self.cfg.teams.len()
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Executes one cycle of the plan: the distributor enumerates blocks,
    /// every team drains its stream of data items, the mesh is updated in
    /// place. Halos are filled before the cycle starts.
    pub fn run_cycle(
        &mut self,
        exec: &ExecutablePlan,
        mesh: &Arc<BlockMesh>,
        registry: &Arc<KernelRegistry>,
        inputs: StepInputs,
    ) -> Result<RunReport, RuntimeError> {
        if self.broken {
            return Err(RuntimeError::State(
                "runtime is broken after a previous deadlock".into(),
            ));
        }
        self.in_cycle = true;
        let result = self.run_cycle_inner(exec, mesh, registry, inputs);
        self.in_cycle = false;
        if matches!(result, Err(RuntimeError::Deadlock(_))) {
            self.broken = true;
        }
        self.cycles_run += 1;
        if result.is_ok() {
            if let Some(hook) = &self.post_cycle {
                hook(mesh);
            }
        }
        result
    }

    /// Installs the post-cycle hook (`None` restores the default no-op).
    pub fn set_post_cycle_hook(&mut self, hook: Option<PostCycleHook>) {
        self.post_cycle = hook;
    }

    fn run_cycle_inner(
        &mut self,
        exec: &ExecutablePlan,
        mesh: &Arc<BlockMesh>,
        registry: &Arc<KernelRegistry>,
        inputs: StepInputs,
    ) -> Result<RunReport, RuntimeError> {
        let wall_start = Instant::now();
        mesh.fill_halos();

        let topo = &exec.topology;
        let n_blocks = mesh.n_blocks();

        // channels per stage
        let mut rxs = Vec::new();
        let mut txs = Vec::new();
        for _ in &topo.stages {
            let (tx, rx) = chan::unbounded::<WorkItem>();
            txs.push(tx);
            rxs.push(rx);
        }

        // branch out-variable masks for overlay merges
        let mut branch_outs: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        if let FanOutMode::Duplicate { head_a, head_b, .. } = &topo.fan_out {
            for (slot, head) in [(0usize, head_a), (1usize, head_b)] {
                if let StageKind::Task { tf, .. } = &topo.stages[*head].kind {
                    if let Some(spec) = exec.spec(tf) {
                        let mut outs = Vec::new();
                        for g in &spec.grid_data {
                            for v in &g.variables_out {
                                if let Some(idx) = var_index(v) {
                                    outs.push(idx);
                                }
                            }
                        }
                        branch_outs[slot] = outs;
                    }
                }
            }
        }

        // stage runtimes
        let mut stages = Vec::with_capacity(topo.stages.len());
        for (i, s) in topo.stages.iter().enumerate() {
            let side = match &topo.fan_out {
                FanOutMode::Duplicate { head_a, head_b, .. } => {
                    // a stage inherits the side of the branch head it serves
                    let mut side = None;
                    if i == *head_a || topo.stages[*head_a].downstream.contains(&i) {
                        side = Some(0);
                    }
                    if i == *head_b || topo.stages[*head_b].downstream.contains(&i) {
                        side = Some(1);
                    }
                    side
                }
                _ => None,
            };
            let calls = match &s.kind {
                StageKind::Task { tf, .. } => exec
                    .task(tf)
                    .map(|t| t.calls.clone())
                    .unwrap_or_default(),
                _ => Vec::new(),
            };
            stages.push(StageRt {
                spec: s.clone(),
                side,
                rx: rxs[i].clone(),
                outbox: Mutex::new(Some(
                    s.downstream.iter().map(|d| txs[*d].clone()).collect(),
                )),
                active: AtomicUsize::new(0),
                processed: AtomicU64::new(0),
                donated: AtomicU64::new(0),
                busy_ns: AtomicU64::new(0),
                per_block: (0..n_blocks).map(|_| AtomicU32::new(0)).collect(),
                pending: Mutex::new(BTreeMap::new()),
                calls,
            });
        }
        drop(rxs);

        // team -> stage mapping and worker assignments
        let stage_of_team: Vec<Option<usize>> = self
            .cfg
            .teams
            .iter()
            .map(|t| topo.stages.iter().position(|s| s.name == t.name && s.id != 0))
            .collect();
        for (i, s) in topo.stages.iter().enumerate() {
            if i == 0 {
                continue; // distributor runs on this thread
            }
            if !self.cfg.teams.iter().any(|t| t.name == s.name) {
                return Err(RuntimeError::InvalidConfig(format!(
                    "no team configured for stage `{}`",
                    s.name
                )));
            }
        }
        let donate_of_team: Vec<Option<usize>> = self
            .cfg
            .teams
            .iter()
            .map(|t| {
                self.cfg
                    .donation_edges
                    .iter()
                    .find(|(from, _)| from == &t.name)
                    .and_then(|(_, to)| topo.stages.iter().position(|s| &s.name == to && s.id != 0))
            })
            .collect();

        // active worker counts per stage: home workers + incoming donors
        for (ti, team) in self.cfg.teams.iter().enumerate() {
            if let Some(si) = stage_of_team[ti] {
                stages[si].active.fetch_add(team.workers, Ordering::Relaxed);
            }
            if let Some(di) = donate_of_team[ti] {
                stages[di].active.fetch_add(team.workers, Ordering::Relaxed);
            }
        }

        let (done_tx, done_rx) = chan::unbounded::<()>();
        let streams = Arc::new(Semaphore::new(self.cfg.streams));
        let shared = Arc::new(CycleShared {
            mesh: mesh.clone(),
            registry: registry.clone(),
            stages,
            link: SimLink::new(),
            streams: streams.clone(),
            dt: inputs.dt,
            externals: {
                let mut e = self.cfg.externals.clone();
                e.insert("dt".to_owned(), inputs.dt);
                e
            },
            link_cost: self.cfg.link,
            transfer_in: AtomicU64::new(0),
            transfer_out: AtomicU64::new(0),
            errors: Mutex::new(Vec::new()),
            done_tx,
            branch_outs,
        });

        // dispatch the cycle to every worker
        let mut participants = 0usize;
        for (ti, ids) in self.team_workers.iter().enumerate() {
            for &w in ids {
                self.workers[w]
                    .ctl
                    .send(CtlMsg::Cycle {
                        shared: shared.clone(),
                        home: stage_of_team[ti],
                        donate: donate_of_team[ti],
                    })
                    .map_err(|_| RuntimeError::State("worker thread gone".into()))?;
                participants += 1;
            }
        }

        // distribute
        let watchdog = Duration::from_secs_f64(self.cfg.watchdog_timeout_s.max(0.001));
        let dist_result = self.distribute(exec, mesh, &shared, watchdog);
        // whatever happened, close the head queues this thread owns
        shared.stages[0].outbox.lock().expect("outbox").take();
        drop(txs);

        // await completion under the watchdog
        let deadline = Instant::now() + watchdog;
        let mut done = 0usize;
        while done < participants {
            match done_rx.recv_deadline(deadline) {
                Ok(()) => done += 1,
                Err(_) => {
                    return Err(RuntimeError::Deadlock(diagnose(&shared)));
                }
            }
        }
        dist_result?;
        if let Some(err) = shared.errors.lock().expect("error lock").drain(..).next() {
            return Err(err);
        }

        // build the report
        let mut stage_busy_s = BTreeMap::new();
        let mut items_processed = BTreeMap::new();
        let mut donated_items = BTreeMap::new();
        let mut per_block_counts = BTreeMap::new();
        items_processed.insert("distributor".to_owned(), n_blocks as u64 * dup_factor(topo));
        for s in &shared.stages {
            if s.spec.id == 0 {
                continue;
            }
            stage_busy_s.insert(
                s.spec.name.clone(),
                s.busy_ns.load(Ordering::Relaxed) as f64 / 1e9,
            );
            items_processed.insert(s.spec.name.clone(), s.processed.load(Ordering::Relaxed));
            donated_items.insert(s.spec.name.clone(), s.donated.load(Ordering::Relaxed));
            per_block_counts.insert(
                s.spec.name.clone(),
                s.per_block.iter().map(|c| c.load(Ordering::Relaxed)).collect(),
            );
        }
        Ok(RunReport {
            steps: 1,
            blocks: n_blocks,
            total_wall_s: wall_start.elapsed().as_secs_f64(),
            stage_busy_s,
            items_processed,
            donated_items,
            transfer_bytes_in: shared.transfer_in.load(Ordering::Relaxed),
            transfer_bytes_out: shared.transfer_out.load(Ordering::Relaxed),
            checksums: mesh.checksums(),
            teams_created: self.teams_created,
            workers_spawned: self.workers.len(),
            per_block_counts,
        })
    }

    fn distribute(
        &self,
        exec: &ExecutablePlan,
        mesh: &Arc<BlockMesh>,
        shared: &Arc<CycleShared>,
        watchdog: Duration,
    ) -> Result<(), RuntimeError> {
        let topo = &exec.topology;
        let dt = shared.dt;
        let send_to = |stage_idx: usize, item: WorkItem| {
            if let Some(senders) = shared.stages[0].outbox.lock().expect("outbox").as_ref() {
                // the distributor's outbox is ordered like its downstream list
                let pos = topo
                    .distributor()
                    .downstream
                    .iter()
                    .position(|d| *d == stage_idx)
                    .expect("distributor downstream");
                senders[pos].send(item).ok();
            }
        };
        let pack_branch = |head: usize,
                           blocks: &[usize],
                           side: Option<u8>|
         -> Result<(), RuntimeError> {
            let _ = side;
            let StageKind::Task { tf, .. } = &topo.stages[head].kind else {
                return Err(RuntimeError::State("packet head is not a task stage".into()));
            };
            let spec = exec
                .spec(tf)
                .ok_or_else(|| RuntimeError::State(format!("no spec for `{tf}`")))?;
            for chunk in blocks.chunks(self.cfg.n_blocks_per_packet) {
                let layout = packet::layout(spec, chunk.len(), &mesh.params())?;
                if !shared.streams.acquire_timeout(watchdog) {
                    return Err(RuntimeError::Deadlock(diagnose(shared)));
                }
                let pkt = packet::pack(&layout, mesh, chunk, &shared.externals, dt)?;
                send_to(head, WorkItem::Packet(pkt));
            }
            Ok(())
        };
        let wrap = |head: usize, blocks: &[usize]| {
            for &b in blocks {
                send_to(head, WorkItem::Tile(TileWrapper::new(mesh, b, dt)));
            }
        };
        let all: Vec<usize> = (0..mesh.n_blocks()).collect();
        match &topo.fan_out {
            FanOutMode::Chain => {
                if let Some(&head) = topo.distributor().downstream.first() {
                    match &topo.stages[head].kind {
                        StageKind::Task { device, .. } if device.is_gpu() => {
                            pack_branch(head, &all, None)?
                        }
                        _ => wrap(head, &all),
                    }
                }
            }
            FanOutMode::Split { cpu_head, gpu_head } => {
                let n_cpu = ((self.cfg.split_ratio * all.len() as f64).round() as usize)
                    .min(all.len());
                wrap(*cpu_head, &all[..n_cpu]);
                pack_branch(*gpu_head, &all[n_cpu..], None)?;
            }
            FanOutMode::Duplicate { head_a, head_b, .. } => {
                for (head, side) in [(head_a, 0u8), (head_b, 1u8)] {
                    match &topo.stages[*head].kind {
                        StageKind::Task { device, .. } if device.is_gpu() => {
                            pack_branch(*head, &all, Some(side))?;
                        }
                        _ => {
                            // private copies: the mesh stays at the step
                            // start until the merge writes it
                            for &b in &all {
                                send_to(
                                    *head,
                                    WorkItem::Branch {
                                        block: b,
                                        side,
                                        data: Box::new(mesh.clone_block(b)),
                                    },
                                );
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn dup_factor(topo: &crate::planner::PipelinePlan) -> u64 {
    match topo.fan_out {
        FanOutMode::Duplicate { .. } => 2,
        _ => 1,
    }
}

fn diagnose(shared: &CycleShared) -> String {
    let mut out = String::new();
    for s in &shared.stages {
        out.push_str(&format!(
            "stage `{}`: queued={} processed={} active_workers={}\n",
            s.spec.name,
            s.rx.len(),
            s.processed.load(Ordering::Relaxed),
            s.active.load(Ordering::Relaxed),
        ));
    }
    out
}

impl Drop for Runtime {
    fn drop(&mut self) {
        for w in &self.workers {
            w.ctl.send(CtlMsg::Shutdown).ok();
        }
        for w in &mut self.workers {
            if let Some(j) = w.join.take() {
                j.join().ok();
            }
        }
    }
}
