//! Deterministic discrete-event model of the pipeline (modeled mode).
//!
//! One transfer link (FIFO; occupancy per packet direction is
//! `alpha + beta * KiB` with the byte counts taken from the packet-layout
//! transfer accounting), at most `streams` packets concurrently in flight
//! between transfer-in and transfer-out, device compute parallel across
//! `device_slots` at packet granularity, host stages as multi-server
//! queues, and per-block merge barriers. Ties break on (time, sequence),
//! so runs replay identically.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codegen::ExecutablePlan;
use crate::expr::MeshParams;
use crate::packet;
use crate::planner::{FanOutMode, PlanError, StageKind};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("cost model error: {0}")]
    Cost(String),
}

/// Per-kernel, per-block compute costs in microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelCost {
    pub host_us: f64,
    pub device_us: f64,
}

fn default_true() -> bool {
    true
}

/// The calibrated cost model driving the simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Per-transfer latency (microseconds).
    pub alpha_us: f64,
    /// Bandwidth term (microseconds per KiB).
    pub beta_us_per_kib: f64,
    pub kernel_costs: BTreeMap<String, KernelCost>,
    pub cpu_cores: usize,
    pub device_slots: usize,
    pub streams: usize,
    /// Model the return transfer on the same link (on by default; results
    /// must come back to the host for downstream stages).
    #[serde(default = "default_true")]
    pub model_outbound: bool,
    /// Serialized per-block enumeration cost of the distributor.
    #[serde(default)]
    pub distributor_us_per_block: f64,
}

impl CostModel {
    /// The default profile: latency-bound packets whose saturation curve
    /// flattens once enough blocks share one transfer.
    pub fn default_profile() -> Self {
        CostModel {
            alpha_us: 10.0,
            beta_us_per_kib: 1.0,
            kernel_costs: BTreeMap::from([(
                "kernel".to_owned(),
                KernelCost {
                    host_us: 8.0,
                    device_us: 3.0,
                },
            )]),
            cpu_cores: 16,
            device_slots: 1,
            streams: 1,
            model_outbound: true,
            distributor_us_per_block: 0.0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::Cost(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("cost model serializes");
        s.push('\n');
        s
    }

    fn kernel(&self, name: &str) -> KernelCost {
        self.kernel_costs
            .get(name)
            .copied()
            .or_else(|| self.kernel_costs.get("kernel").copied())
            .unwrap_or(KernelCost {
                host_us: 0.0,
                device_us: 0.0,
            })
    }

    fn host_sum(&self, routines: &[String]) -> f64 {
        routines.iter().map(|r| self.kernel(r).host_us).sum()
    }

    fn device_sum(&self, routines: &[String]) -> f64 {
        routines.iter().map(|r| self.kernel(r).device_us).sum()
    }
}

/// Extra simulation inputs mirroring the runtime configuration.
#[derive(Clone, Debug, Default)]
pub struct SimOptions {
    /// Worker count per team (stage name); host stages default to
    /// `cpu_cores`, the distributor to 1.
    pub team_workers: BTreeMap<String, usize>,
    /// Donated workers move from the first team to the second once the
    /// first team's stream for the cycle is drained.
    pub donation_edges: Vec<(String, String)>,
    /// Fraction of blocks sent to the CPU branch in split mode.
    pub split_ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResourceReport {
    pub name: String,
    pub busy_us: f64,
    pub utilization: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SimEvent {
    pub t_us_bits: u64,
    pub seq: u64,
    pub what: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimReport {
    pub makespan_us: f64,
    pub resources: Vec<ResourceReport>,
    pub items: BTreeMap<String, u64>,
    #[serde(skip)]
    pub events: Vec<SimEvent>,
}

impl SimReport {
    pub fn resource(&self, name: &str) -> Option<&ResourceReport> {
        self.resources.iter().find(|r| r.name == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Clone, Copy, PartialEq)]
struct T(f64);

impl Eq for T {}
impl PartialOrd for T {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for T {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Ev {
    /// A block arrives at a host-side stage.
    Arrive { stage: usize, block: usize },
    /// A host-side stage finished serving a block.
    HostDone { stage: usize, block: usize },
    /// A packet is ready to enter the device pipeline.
    PacketReady { packet: usize },
    /// The link finished a transfer.
    LinkDone { packet: usize, inbound: bool },
    /// Device compute finished for a packet.
    DeviceDone { packet: usize },
}

struct PacketSim {
    blocks: Vec<usize>,
    gpu_stage: usize,
    in_us: f64,
    out_us: f64,
    compute_us: f64,
}

struct HostStage {
    capacity: usize,
    busy: usize,
    waiting: VecDeque<usize>,
    /// merge barrier bookkeeping: arrivals per block
    pending: BTreeMap<usize, u8>,
    needs: u8,
    service_us: f64,
    remaining: usize,
    busy_us: f64,
    processed: u64,
}

/// Simulates one cycle of the plan over `n_blocks_total` blocks with
/// `n_per_packet` blocks per data packet.
pub fn simulate(
    exec: &ExecutablePlan,
    cost: &CostModel,
    mesh: &MeshParams,
    n_blocks_total: usize,
    n_per_packet: usize,
    opts: &SimOptions,
) -> Result<SimReport, SimError> {
    assert!(n_blocks_total >= 1 && n_per_packet >= 1);
    if cost.streams == 0 || cost.device_slots == 0 {
        return Err(SimError::Cost("streams and device_slots must be >= 1".into()));
    }
    let topo = &exec.topology;
    let n_stages = topo.stages.len();

    // --- per-stage setups -------------------------------------------------
    let workers = |name: &str, default: usize| -> usize {
        opts.team_workers.get(name).copied().unwrap_or(default).max(1)
    };
    let mut host: Vec<Option<HostStage>> = Vec::with_capacity(n_stages);
    let mut downstream_host: Vec<Option<usize>> = vec![None; n_stages];
    for s in &topo.stages {
        // a stage hands blocks to the first host-capable stage downstream,
        // skipping zero-cost movers
        let mut next = s.downstream.first().copied();
        while let Some(n) = next {
            match topo.stages[n].kind {
                StageKind::Mover { .. } => next = topo.stages[n].downstream.first().copied(),
                _ => break,
            }
        }
        downstream_host[s.id] = next;
        host.push(match &s.kind {
            StageKind::Task { routines, device, .. } if device.is_cpu() => Some(HostStage {
                capacity: workers(&s.name, cost.cpu_cores),
                busy: 0,
                waiting: VecDeque::new(),
                pending: BTreeMap::new(),
                needs: 1,
                service_us: cost.host_sum(routines),
                remaining: 0,
                busy_us: 0.0,
                processed: 0,
            }),
            StageKind::MergeBarrier { kernel } => Some(HostStage {
                capacity: workers(&s.name, cost.cpu_cores),
                busy: 0,
                waiting: VecDeque::new(),
                pending: BTreeMap::new(),
                needs: 2,
                service_us: kernel
                    .as_ref()
                    .map(|k| cost.host_sum(std::slice::from_ref(k)))
                    .unwrap_or(0.0),
                remaining: 0,
                busy_us: 0.0,
                processed: 0,
            }),
            _ => None,
        });
    }

    // --- distribute blocks -------------------------------------------------
    let dist_us = cost.distributor_us_per_block;
    let emit_t = |i: usize| (i + 1) as f64 * dist_us;
    let mut packets: Vec<PacketSim> = Vec::new();
    let mut heap: BinaryHeap<Reverse<(T, u64, usize)>> = BinaryHeap::new();
    let mut ev_pool: Vec<Ev> = Vec::new();
    let mut seq = 0u64;
    let mut schedule = |heap: &mut BinaryHeap<Reverse<(T, u64, usize)>>,
                        ev_pool: &mut Vec<Ev>,
                        seq: &mut u64,
                        t: f64,
                        ev: Ev| {
        ev_pool.push(ev);
        heap.push(Reverse((T(t), *seq, ev_pool.len() - 1)));
        *seq += 1;
    };

    let gpu_layout_us = |tf: &str, routines: &[String], n: usize| -> (f64, f64, f64) {
        let spec = exec.spec(tf).expect("task function spec exists");
        let l = packet::layout(spec, n, mesh).expect("layout computes");
        let in_us = cost.alpha_us + cost.beta_us_per_kib * (l.transfer_in_bytes as f64 / 1024.0);
        let out_us = cost.alpha_us + cost.beta_us_per_kib * (l.transfer_out_bytes as f64 / 1024.0);
        (in_us, out_us, n as f64 * cost.device_sum(routines))
    };

    let mut gpu_expected: BTreeMap<usize, u64> = BTreeMap::new();
    let route = |head: usize,
                     blocks: &[(usize, f64)],
                     packets: &mut Vec<PacketSim>,
                     heap: &mut BinaryHeap<Reverse<(T, u64, usize)>>,
                     ev_pool: &mut Vec<Ev>,
                     seq: &mut u64,
                     host: &mut [Option<HostStage>],
                     gpu_expected: &mut BTreeMap<usize, u64>| {
        match &topo.stages[head].kind {
            StageKind::Task { device, tf, routines, .. } if device.is_gpu() => {
                *gpu_expected.entry(head).or_insert(0) += blocks.len() as u64;
                for chunk in blocks.chunks(n_per_packet) {
                    let ids: Vec<usize> = chunk.iter().map(|(b, _)| *b).collect();
                    let ready = chunk.iter().map(|(_, t)| *t).fold(0.0f64, f64::max);
                    let (in_us, out_us, compute_us) = gpu_layout_us(tf, routines, ids.len());
                    let pk = packets.len();
                    packets.push(PacketSim {
                        blocks: ids,
                        gpu_stage: head,
                        in_us,
                        out_us,
                        compute_us,
                    });
                    schedule(heap, ev_pool, seq, ready, Ev::PacketReady { packet: pk });
                }
            }
            _ => {
                if let Some(h) = &mut host[head] {
                    h.remaining += blocks.len();
                }
                for (b, t) in blocks {
                    schedule(heap, ev_pool, seq, *t, Ev::Arrive { stage: head, block: *b });
                }
            }
        }
    };

    // expected arrivals for chain tails
    let chain_expectations = |first_host: Option<usize>, count: usize, host: &mut [Option<HostStage>]| {
        let mut cur = first_host;
        while let Some(s) = cur {
            if let Some(h) = &mut host[s] {
                h.remaining += count;
            }
            cur = downstream_host[s];
        }
    };

    let all: Vec<(usize, f64)> = (0..n_blocks_total).map(|b| (b, emit_t(b))).collect();
    match &topo.fan_out {
        FanOutMode::Chain => {
            if let Some(&head) = topo.distributor().downstream.first() {
                route(head, &all, &mut packets, &mut heap, &mut ev_pool, &mut seq, &mut host, &mut gpu_expected);
                // downstream expectations (the head's own were set by route)
                chain_expectations(downstream_host[head], n_blocks_total, &mut host);
            }
        }
        FanOutMode::Split { cpu_head, gpu_head } => {
            let n_cpu = ((opts.split_ratio * n_blocks_total as f64).round() as usize)
                .min(n_blocks_total);
            let (cpu_blocks, gpu_blocks) = all.split_at(n_cpu);
            route(*cpu_head, cpu_blocks, &mut packets, &mut heap, &mut ev_pool, &mut seq, &mut host, &mut gpu_expected);
            route(*gpu_head, gpu_blocks, &mut packets, &mut heap, &mut ev_pool, &mut seq, &mut host, &mut gpu_expected);
            // both branches converge on the cpu branch's downstream
            chain_expectations(downstream_host[*cpu_head], n_blocks_total, &mut host);
        }
        FanOutMode::Duplicate { head_a, head_b, merge } => {
            route(*head_a, &all, &mut packets, &mut heap, &mut ev_pool, &mut seq, &mut host, &mut gpu_expected);
            route(*head_b, &all, &mut packets, &mut heap, &mut ev_pool, &mut seq, &mut host, &mut gpu_expected);
            chain_expectations(Some(*merge), n_blocks_total, &mut host);
        }
    }

    // --- resources ----------------------------------------------------------
    let mut link_free = true;
    let mut link_queue: VecDeque<(usize, bool)> = VecDeque::new(); // (packet, inbound)
    let mut link_busy_us = 0.0f64;
    let mut device_busy = 0usize;
    let mut device_queue: VecDeque<usize> = VecDeque::new();
    let mut device_busy_us = 0.0f64;
    let mut stream_permits = cost.streams;
    let mut stream_queue: VecDeque<usize> = VecDeque::new();
    let mut gpu_processed: BTreeMap<usize, u64> = BTreeMap::new(); // stage -> blocks
    let mut mover_processed: BTreeMap<usize, u64> = BTreeMap::new();

    let mut makespan = 0.0f64;
    let mut events: Vec<SimEvent> = Vec::new();
    let log = |events: &mut Vec<SimEvent>, t: f64, seq: u64, what: String| {
        events.push(SimEvent {
            t_us_bits: t.to_bits(),
            seq,
            what,
        });
    };

    // donation bookkeeping: stage name -> (workers to donate, target stage)
    let mut donation: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (from, to) in &opts.donation_edges {
        let (Some(f), Some(t)) = (topo.stage_by_name(from), topo.stage_by_name(to)) else {
            continue;
        };
        let default_w = match &topo.stages[f.id].kind {
            StageKind::Task { device, .. } if device.is_cpu() => cost.cpu_cores,
            _ => 1,
        };
        let w = workers(from, default_w);
        donation.insert(f.id, (w, t.id));
    }
    // distributor "drains" when the last block is emitted
    let mut pending_donations: Vec<(f64, usize, usize)> = Vec::new(); // (time, workers, target)
    if let Some((w, target)) = donation.get(&0).copied() {
        pending_donations.push((emit_t(n_blocks_total.saturating_sub(1)), w, target));
    }

    // --- event loop ----------------------------------------------------------
    // helper macros keep the borrow scopes tight
    while let Some(Reverse((T(now), sq, ev_idx))) = {
        // apply any due donations before the next event
        let next_t = heap.peek().map(|Reverse((t, _, _))| t.0);
        if let Some(nt) = next_t {
            let mut due: Vec<(f64, usize, usize)> = Vec::new();
            pending_donations.retain(|d| {
                if d.0 <= nt {
                    due.push(*d);
                    false
                } else {
                    true
                }
            });
            due.sort_by(|a, b| a.0.total_cmp(&b.0));
            for (t, w, target) in due {
                if let Some(h) = &mut host[target] {
                    h.capacity += w;
                    // pump the queue with the new capacity
                    while h.busy < h.capacity {
                        let Some(b) = h.waiting.pop_front() else { break };
                        h.busy += 1;
                        h.busy_us += h.service_us;
                        schedule(
                            &mut heap,
                            &mut ev_pool,
                            &mut seq,
                            t + h.service_us,
                            Ev::HostDone { stage: target, block: b },
                        );
                    }
                }
            }
        }
        heap.pop()
    } {
        let ev = ev_pool[ev_idx].clone();
        makespan = makespan.max(now);
        match ev {
            Ev::PacketReady { packet: pk } => {
                log(&mut events, now, sq, format!("packet {pk} ready"));
                if stream_permits > 0 {
                    stream_permits -= 1;
                    // request the link inbound
                    let dur = packets[pk].in_us;
                    if link_free {
                        link_free = false;
                        link_busy_us += dur;
                        schedule(&mut heap, &mut ev_pool, &mut seq, now + dur, Ev::LinkDone { packet: pk, inbound: true });
                    } else {
                        link_queue.push_back((pk, true));
                    }
                } else {
                    stream_queue.push_back(pk);
                }
            }
            Ev::LinkDone { packet: pk, inbound } => {
                log(&mut events, now, sq, format!(
                    "link done packet {pk} {}",
                    if inbound { "in" } else { "out" }
                ));
                // link serves its FIFO queue
                if let Some((nk, nin)) = link_queue.pop_front() {
                    let dur = if nin { packets[nk].in_us } else { packets[nk].out_us };
                    link_busy_us += dur;
                    schedule(&mut heap, &mut ev_pool, &mut seq, now + dur, Ev::LinkDone { packet: nk, inbound: nin });
                } else {
                    link_free = true;
                }
                if inbound {
                    if device_busy < cost.device_slots {
                        device_busy += 1;
                        device_busy_us += packets[pk].compute_us;
                        schedule(&mut heap, &mut ev_pool, &mut seq, now + packets[pk].compute_us, Ev::DeviceDone { packet: pk });
                    } else {
                        device_queue.push_back(pk);
                    }
                } else {
                    // outbound finished: packet leaves the device pipeline
                    finish_packet(
                        pk, now, topo, &packets, &mut host, &mut heap, &mut ev_pool, &mut seq,
                        &mut stream_permits, &mut stream_queue, &mut link_free, &mut link_queue,
                        &mut link_busy_us, &mut gpu_processed, &mut mover_processed,
                        downstream_host.as_slice(), &mut schedule,
                    );
                    let st = packets[pk].gpu_stage;
                    if gpu_processed.get(&st) == gpu_expected.get(&st) {
                        if let Some((w, target)) = donation.get(&st).copied() {
                            pending_donations.push((now, w, target));
                        }
                    }
                }
            }
            Ev::DeviceDone { packet: pk } => {
                log(&mut events, now, sq, format!("device done packet {pk}"));
                device_busy -= 1;
                if let Some(nk) = device_queue.pop_front() {
                    device_busy += 1;
                    device_busy_us += packets[nk].compute_us;
                    schedule(&mut heap, &mut ev_pool, &mut seq, now + packets[nk].compute_us, Ev::DeviceDone { packet: nk });
                }
                if cost.model_outbound {
                    let dur = packets[pk].out_us;
                    if link_free {
                        link_free = false;
                        link_busy_us += dur;
                        schedule(&mut heap, &mut ev_pool, &mut seq, now + dur, Ev::LinkDone { packet: pk, inbound: false });
                    } else {
                        link_queue.push_back((pk, false));
                    }
                } else {
                    finish_packet(
                        pk, now, topo, &packets, &mut host, &mut heap, &mut ev_pool, &mut seq,
                        &mut stream_permits, &mut stream_queue, &mut link_free, &mut link_queue,
                        &mut link_busy_us, &mut gpu_processed, &mut mover_processed,
                        downstream_host.as_slice(), &mut schedule,
                    );
                    let st = packets[pk].gpu_stage;
                    if gpu_processed.get(&st) == gpu_expected.get(&st) {
                        if let Some((w, target)) = donation.get(&st).copied() {
                            pending_donations.push((now, w, target));
                        }
                    }
                }
            }
            Ev::Arrive { stage, block } => {
                log(&mut events, now, sq, format!("block {block} at {}", topo.stages[stage].name));
                let h = host[stage].as_mut().expect("arrivals target host stages");
                if h.needs > 1 {
                    let c = h.pending.entry(block).or_insert(0);
                    *c += 1;
                    if *c < h.needs {
                        continue;
                    }
                    h.pending.remove(&block);
                }
                if h.busy < h.capacity {
                    h.busy += 1;
                    h.busy_us += h.service_us;
                    schedule(&mut heap, &mut ev_pool, &mut seq, now + h.service_us, Ev::HostDone { stage, block });
                } else {
                    h.waiting.push_back(block);
                }
            }
            Ev::HostDone { stage, block } => {
                log(&mut events, now, sq, format!("block {block} done at {}", topo.stages[stage].name));
                let h = host[stage].as_mut().expect("host stage");
                h.busy -= 1;
                h.processed += 1;
                h.remaining -= 1;
                let drained = h.remaining == 0;
                if let Some(b) = h.waiting.pop_front() {
                    h.busy += 1;
                    h.busy_us += h.service_us;
                    schedule(&mut heap, &mut ev_pool, &mut seq, now + h.service_us, Ev::HostDone { stage, block: b });
                }
                if let Some(next) = downstream_host[stage] {
                    schedule(&mut heap, &mut ev_pool, &mut seq, now, Ev::Arrive { stage: next, block });
                }
                if drained {
                    if let Some((w, target)) = donation.get(&stage).copied() {
                        pending_donations.push((now, w, target));
                    }
                }
            }
        }
    }

    // --- report ---------------------------------------------------------------
    let mut items: BTreeMap<String, u64> = BTreeMap::new();
    items.insert("distributor".to_owned(), n_blocks_total as u64);
    for (stage, count) in &gpu_processed {
        items.insert(topo.stages[*stage].name.clone(), *count);
    }
    for (stage, count) in &mover_processed {
        items.insert(topo.stages[*stage].name.clone(), *count);
    }
    let mut cpu_busy_total = 0.0;
    for (i, h) in host.iter().enumerate() {
        if let Some(h) = h {
            items.insert(topo.stages[i].name.clone(), h.processed);
            cpu_busy_total += h.busy_us;
        }
    }
    let span = makespan.max(f64::MIN_POSITIVE);
    let resources = vec![
        ResourceReport {
            name: "link".to_owned(),
            busy_us: link_busy_us,
            utilization: link_busy_us / span,
        },
        ResourceReport {
            name: "device".to_owned(),
            busy_us: device_busy_us,
            utilization: device_busy_us / (span * cost.device_slots as f64),
        },
        ResourceReport {
            name: "cpu".to_owned(),
            busy_us: cpu_busy_total,
            utilization: cpu_busy_total / (span * cost.cpu_cores as f64),
        },
    ];
    Ok(SimReport {
        makespan_us: makespan,
        resources,
        items,
        events,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish_packet(
    pk: usize,
    now: f64,
    topo: &crate::planner::PipelinePlan,
    packets: &[PacketSim],
    _host: &mut [Option<HostStage>],
    heap: &mut BinaryHeap<Reverse<(T, u64, usize)>>,
    ev_pool: &mut Vec<Ev>,
    seq: &mut u64,
    stream_permits: &mut usize,
    stream_queue: &mut VecDeque<usize>,
    link_free: &mut bool,
    link_queue: &mut VecDeque<(usize, bool)>,
    link_busy_us: &mut f64,
    gpu_processed: &mut BTreeMap<usize, u64>,
    mover_processed: &mut BTreeMap<usize, u64>,
    downstream_host: &[Option<usize>],
    schedule: &mut impl FnMut(&mut BinaryHeap<Reverse<(T, u64, usize)>>, &mut Vec<Ev>, &mut u64, f64, Ev),
) {
    let p = &packets[pk];
    *gpu_processed.entry(p.gpu_stage).or_insert(0) += p.blocks.len() as u64;
    // account the mover stage (zero cost) right after the gpu stage
    if let Some(&m) = topo.stages[p.gpu_stage].downstream.first() {
        if matches!(topo.stages[m].kind, StageKind::Mover { .. }) {
            *mover_processed.entry(m).or_insert(0) += p.blocks.len() as u64;
        }
    }
    if let Some(next) = downstream_host[p.gpu_stage] {
        for &b in &p.blocks {
            schedule(heap, ev_pool, seq, now, Ev::Arrive { stage: next, block: b });
        }
    }
    // release the stream permit; the next waiting packet enters
    if let Some(nk) = stream_queue.pop_front() {
        let dur = packets[nk].in_us;
        if *link_free {
            *link_free = false;
            *link_busy_us += dur;
            schedule(heap, ev_pool, seq, now + dur, Ev::LinkDone { packet: nk, inbound: true });
        } else {
            link_queue.push_back((nk, true));
        }
    } else {
        *stream_permits += 1;
    }
}

/// Maps `simulate` over packet sizes; returns CSV rows with a fixed header.
pub fn sweep(
    exec: &ExecutablePlan,
    cost: &CostModel,
    mesh: &MeshParams,
    n_blocks_total: usize,
    packet_sizes: &[usize],
    opts: &SimOptions,
) -> Result<String, SimError> {
    let mut out = String::from("p,makespan_us,link_util,device_util,cpu_util\n");
    for &p in packet_sizes {
        let r = simulate(exec, cost, mesh, n_blocks_total, p, opts)?;
        let util = |name: &str| r.resource(name).map(|x| x.utilization).unwrap_or(0.0);
        out.push_str(&format!(
            "{},{:.3},{:.4},{:.4},{:.4}\n",
            p,
            r.makespan_us,
            util("link"),
            util("device"),
            util("cpu"),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codegen::emit_plan;
    use crate::planner::{fuse, SpecRegistry};
    use crate::recipe::load_recipe;
    use crate::testutil::*;

    /// A single GPU task function whose packet carries exactly 2 KiB per
    /// block (one variable on a 14x14 interior with halo 1: 16*16*8 bytes)
    /// and nothing else, so `beta = 1.0` prices a block at 2 us.
    fn dyadic_gpu_plan() -> (crate::codegen::ExecutablePlan, MeshParams) {
        let mut reg = SpecRegistry::new();
        reg.insert(routine("work", &["CPU", "GPU"], vec![grid_arg("U", &["dens"], &["dens"])]));
        let doc = serde_json::json!({
            "name": "gpu_only",
            "nodes": [{"id": "w", "action": "work", "map_to": "GPU", "after": []}]
        })
        .to_string();
        let plan = fuse(&load_recipe(&doc).unwrap(), &reg).unwrap();
        let mesh = MeshParams {
            nxb: 14,
            nyb: 14,
            nguard: 1,
            nvars: 9,
        };
        (emit_plan(&plan).unwrap(), mesh)
    }

    fn hand_case_cost() -> CostModel {
        CostModel {
            alpha_us: 10.0,
            beta_us_per_kib: 1.0,
            kernel_costs: BTreeMap::from([(
                "work".to_owned(),
                KernelCost {
                    host_us: 8.0,
                    device_us: 3.0,
                },
            )]),
            cpu_cores: 16,
            device_slots: 1,
            streams: 1,
            model_outbound: true,
            distributor_us_per_block: 0.0,
        }
    }

    #[test]
    fn hand_computed_event_timeline_matches_exactly() {
        // N=4, p=2, streams=1: two packets, each 14 in + 6 compute + 14 out,
        // fully serialized => 68 us.
        let (exec, mesh) = dyadic_gpu_plan();
        let r = simulate(&exec, &hand_case_cost(), &mesh, 4, 2, &SimOptions::default()).unwrap();
        assert_eq!(r.makespan_us, 68.0);
        assert_eq!(r.items["distributor"], 4);
        assert_eq!(r.items["tf_0"], 4);
    }

    #[test]
    fn pure_latency_regime_has_closed_form() {
        // beta = 0, compute = 0, streams = 1: makespan = ceil(N/p) * 2 * alpha
        let (exec, mesh) = dyadic_gpu_plan();
        let mut cost = hand_case_cost();
        cost.beta_us_per_kib = 0.0;
        cost.kernel_costs.get_mut("work").unwrap().device_us = 0.0;
        for (n, p) in [(8usize, 2usize), (10, 3), (160, 20)] {
            let r = simulate(&exec, &cost, &mesh, n, p, &SimOptions::default()).unwrap();
            let expect = n.div_ceil(p) as f64 * 2.0 * cost.alpha_us;
            assert_eq!(r.makespan_us, expect, "N={n} p={p}");
        }
    }

    #[test]
    fn latency_only_makespan_is_monotone_in_packet_size() {
        let (exec, mesh) = dyadic_gpu_plan();
        let mut cost = hand_case_cost();
        cost.beta_us_per_kib = 0.0;
        let mut last = f64::INFINITY;
        for p in [1usize, 2, 4, 8, 16, 32, 80, 160] {
            let r = simulate(&exec, &cost, &mesh, 160, p, &SimOptions::default()).unwrap();
            assert!(
                r.makespan_us <= last,
                "makespan increased at p={p}: {} > {last}",
                r.makespan_us
            );
            last = r.makespan_us;
        }
    }

    #[test]
    fn work_conservation_holds() {
        let (exec, mesh) = dyadic_gpu_plan();
        let cost = hand_case_cost();
        for (n, p, streams) in [(16usize, 4usize, 1usize), (15, 4, 2), (7, 3, 3)] {
            let mut c = cost.clone();
            c.streams = streams;
            let r = simulate(&exec, &c, &mesh, n, p, &SimOptions::default()).unwrap();
            // device busy = total blocks * per-block compute
            let device = r.resource("device").unwrap().busy_us;
            assert!((device - n as f64 * 3.0).abs() < 1e-9, "device busy {device}");
            // link busy = sum of per-packet in+out occupancy
            let mut expect_link = 0.0;
            let mut left = n;
            while left > 0 {
                let k = left.min(p);
                left -= k;
                let kib = (k as f64 * 2048.0) / 1024.0;
                expect_link += 2.0 * (c.alpha_us + c.beta_us_per_kib * kib);
            }
            let link = r.resource("link").unwrap().busy_us;
            assert!((link - expect_link).abs() < 1e-9, "link busy {link} vs {expect_link}");
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let (exec, mesh) = dyadic_gpu_plan();
        let cost = hand_case_cost();
        let a = simulate(&exec, &cost, &mesh, 37, 5, &SimOptions::default()).unwrap();
        let b = simulate(&exec, &cost, &mesh, 37, 5, &SimOptions::default()).unwrap();
        assert_eq!(a.makespan_us, b.makespan_us);
        assert_eq!(a.events, b.events, "event logs replay identically");
    }

    #[test]
    fn sweep_emits_fixed_header_and_identical_bytes() {
        let (exec, mesh) = dyadic_gpu_plan();
        let cost = hand_case_cost();
        let ps = [5usize, 10, 20, 40, 80, 160];
        let a = sweep(&exec, &cost, &mesh, 160, &ps, &SimOptions::default()).unwrap();
        let b = sweep(&exec, &cost, &mesh, 160, &ps, &SimOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 7, "header + 6 rows");
        assert!(a.starts_with("p,makespan_us,link_util,device_util,cpu_util\n"));
    }

    #[test]
    fn chain_pipeline_overlaps_host_and_device() {
        // gpu stage feeding a host stage: host work of early packets
        // overlaps transfers of later ones
        let mut reg = SpecRegistry::new();
        reg.insert(routine("flow", &["GPU"], vec![grid_arg("U", &["dens"], &["dens"])]));
        reg.insert(routine("react", &["CPU"], vec![grid_arg("U", &["ener"], &["ener"])]));
        let doc = serde_json::json!({
            "name": "seq",
            "nodes": [
                {"id": "f", "action": "flow", "map_to": "GPU", "after": []},
                {"id": "r", "action": "react", "map_to": "CPU", "after": ["f"]}
            ]
        })
        .to_string();
        let plan = fuse(&load_recipe(&doc).unwrap(), &reg).unwrap();
        let exec = emit_plan(&plan).unwrap();
        let mesh = MeshParams { nxb: 14, nyb: 14, nguard: 1, nvars: 9 };
        let mut cost = hand_case_cost();
        cost.kernel_costs.insert("flow".into(), KernelCost { host_us: 0.0, device_us: 3.0 });
        cost.kernel_costs.insert("react".into(), KernelCost { host_us: 5.0, device_us: 0.0 });
        cost.streams = 2;
        cost.cpu_cores = 4;
        let r = simulate(&exec, &cost, &mesh, 16, 4, &SimOptions::default()).unwrap();
        assert_eq!(r.items["tf_1"], 16, "every block reaches the host stage");
        // serial lower bound and full-serialization upper bound
        assert!(r.makespan_us > 0.0);
        let serial_all = 4.0 * (2.0 * (10.0 + 8.0) + 12.0) + 16.0 * 5.0 / 4.0;
        assert!(r.makespan_us < serial_all, "pipeline overlaps stages");
    }

    #[test]
    fn donation_never_hurts_and_helps_imbalanced_tails() {
        // packet stage feeding a heavy host stage: once the device team
        // drains, its workers join the host team and shorten the tail
        let mut reg = SpecRegistry::new();
        reg.insert(routine("flow", &["GPU"], vec![grid_arg("U", &["dens"], &["dens"])]));
        reg.insert(routine("react", &["CPU"], vec![grid_arg("U", &["ener"], &["ener"])]));
        let doc = serde_json::json!({
            "name": "donate",
            "nodes": [
                {"id": "a", "action": "flow", "map_to": "GPU", "after": []},
                {"id": "b", "action": "react", "map_to": "CPU", "after": ["a"]}
            ]
        })
        .to_string();
        let plan = fuse(&load_recipe(&doc).unwrap(), &reg).unwrap();
        let exec = emit_plan(&plan).unwrap();
        let mesh = MeshParams { nxb: 14, nyb: 14, nguard: 1, nvars: 9 };
        let mut cost = hand_case_cost();
        cost.kernel_costs.insert("flow".into(), KernelCost { host_us: 0.0, device_us: 1.0 });
        cost.kernel_costs.insert("react".into(), KernelCost { host_us: 30.0, device_us: 0.0 });
        cost.streams = 2;
        let team_workers = BTreeMap::from([("tf_0".to_owned(), 4), ("tf_1".to_owned(), 2)]);
        let without = SimOptions {
            team_workers: team_workers.clone(),
            donation_edges: vec![],
            split_ratio: 0.0,
        };
        let with = SimOptions {
            team_workers,
            donation_edges: vec![("tf_0".to_owned(), "tf_1".to_owned())],
            split_ratio: 0.0,
        };
        let base = simulate(&exec, &cost, &mesh, 64, 8, &without).unwrap();
        let donated = simulate(&exec, &cost, &mesh, 64, 8, &with).unwrap();
        assert!(
            donated.makespan_us <= base.makespan_us,
            "donation must never hurt: {} vs {}",
            donated.makespan_us,
            base.makespan_us
        );
        assert!(
            donated.makespan_us < base.makespan_us,
            "imbalanced tail should benefit from donated workers: {} vs {}",
            donated.makespan_us,
            base.makespan_us
        );
    }

    #[test]
    fn split_routes_blocks_by_ratio() {
        let mut reg = SpecRegistry::new();
        reg.insert(routine("work", &["CPU", "GPU"], vec![grid_arg("U", &["dens"], &["dens"])]));
        let doc = serde_json::json!({
            "name": "split",
            "nodes": [
                {"id": "c", "action": "work", "map_to": "CPU", "after": []},
                {"id": "g", "action": "work", "map_to": "GPU", "after": []}
            ]
        })
        .to_string();
        let plan = fuse(&load_recipe(&doc).unwrap(), &reg).unwrap();
        let exec = emit_plan(&plan).unwrap();
        let mesh = MeshParams { nxb: 14, nyb: 14, nguard: 1, nvars: 9 };
        let cost = hand_case_cost();
        let opts = SimOptions {
            split_ratio: 0.25,
            ..Default::default()
        };
        let r = simulate(&exec, &cost, &mesh, 64, 4, &opts).unwrap();
        assert_eq!(r.items["tf_0"], 16, "cpu branch gets round(ratio*N)");
        assert_eq!(r.items["tf_1"], 48, "gpu branch gets the rest");
    }
}
