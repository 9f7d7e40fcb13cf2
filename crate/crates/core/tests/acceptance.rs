//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the
//! per-criterion lines.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use blockflow::annotations::{ArgSource, ArgumentSpec, RoutineSpec, ScalarKind, StructureIndex};
use blockflow::codegen::{build_tree, emit_plan, parse_call_order, ExecutablePlan, TemplateLibrary};
use blockflow::device::{DataItemKind, DeviceTarget};
use blockflow::expr::MeshParams;
use blockflow::kernels::{self, CellularSurrogateConfig, KernelRegistry};
use blockflow::macroproc::{DefinitionSet, MacroDefinition, MacroError};
use blockflow::mesh::{BlockMesh, ENER, NVARS, S1, S2, S3, VAR_NAMES};
use blockflow::packet;
use blockflow::perf::{self, CostModel, SimOptions};
use blockflow::planner::{consolidate, fuse, SpecRegistry};
use blockflow::recipe::load_recipe;
use blockflow::runtime::{start_teams, PipelineConfig, StepInputs};

fn data(rel: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(rel);
    std::fs::read_to_string(path).expect("data file readable")
}

fn grid_arg(name: &str, vin: &[&str], vout: &[&str]) -> ArgumentSpec {
    ArgumentSpec {
        name: name.to_owned(),
        source: ArgSource::GridData {
            structure_index: StructureIndex::Center,
            variables_in: vin.iter().map(|s| s.to_string()).collect(),
            variables_out: vout.iter().map(|s| s.to_string()).collect(),
        },
    }
}

fn scratch_arg(name: &str, extents: &[&str]) -> ArgumentSpec {
    ArgumentSpec {
        name: name.to_owned(),
        source: ArgSource::Scratch {
            extents: extents.iter().map(|s| s.to_string()).collect(),
            lbound: vec!["1".to_owned(); extents.len()],
        },
    }
}

fn external_arg(name: &str) -> ArgumentSpec {
    ArgumentSpec {
        name: name.to_owned(),
        source: ArgSource::External {
            scalar_kind: ScalarKind::Real,
        },
    }
}

fn routine(name: &str, devices: &[&str], arguments: Vec<ArgumentSpec>) -> RoutineSpec {
    RoutineSpec {
        name: name.to_owned(),
        arguments,
        source_file: "<acceptance>".to_owned(),
        device_variants: devices
            .iter()
            .map(|d| DeviceTarget::parse(d).unwrap())
            .collect::<BTreeSet<_>>(),
    }
}

fn exec_for(recipe_file: &str) -> (ExecutablePlan, Arc<KernelRegistry>) {
    let registry = Arc::new(KernelRegistry::builtin());
    let graph = load_recipe(&data(recipe_file)).unwrap();
    let plan = fuse(&graph, &registry.spec_registry()).unwrap();
    (emit_plan(&plan).unwrap(), registry)
}

fn sedov_mesh() -> Arc<BlockMesh> {
    let mesh = Arc::new(BlockMesh::new(8, 8, 16, 16, 2, [1.0, 1.0]));
    kernels::init_sedov(&mesh, 0);
    mesh
}

fn cellular_mesh(nbx: usize, nby: usize, nxb: usize) -> Arc<BlockMesh> {
    let mesh = Arc::new(BlockMesh::new(nbx, nby, nxb, nxb, 2, [256.0, 25.0]));
    kernels::init_cellular(&mesh, &CellularSurrogateConfig::default(), 0);
    mesh
}

/// The single-GPU-task plan whose packet carries exactly 2 KiB per block
/// (one variable, 14x14 interior, halo 1), so the default profile prices
/// one block's transfer at 2 us per direction.
fn dyadic_gpu_plan() -> (ExecutablePlan, MeshParams) {
    let mut reg = SpecRegistry::new();
    reg.insert(routine(
        "work",
        &["CPU", "GPU"],
        vec![grid_arg("U", &["dens"], &["dens"])],
    ));
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
        nvars: NVARS,
    };
    (emit_plan(&plan).unwrap(), mesh)
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_fusion_fidelity() {
    let registry = KernelRegistry::builtin();
    let graph = load_recipe(&data("recipes/listing1.json")).unwrap();
    let plan = fuse(&graph, &registry.spec_registry()).unwrap();

    assert_eq!(plan.task_functions.len(), 3, "exactly 3 task functions");
    let tf_a = &plan.task_functions[0];
    assert_eq!(tf_a.routines, ["Action_1", "Action_2"]);
    assert!(tf_a.device.is_gpu());
    assert_eq!(tf_a.data_item, DataItemKind::DataPacket);
    for tf in &plan.task_functions[1..] {
        assert_eq!(tf.routines.len(), 1, "singleton task function");
        assert!(tf.device.is_cpu());
        assert_eq!(tf.data_item, DataItemKind::TileWrapper);
    }
    println!("PASS criterion 1: fusion fidelity (3 task functions, 2-routine packet TF on GPU)");
}

#[test]
fn criterion_02_consolidation() {
    // the two-solver example: dt appears once in the union
    let ps1 = routine(
        "PS1",
        &["CPU"],
        vec![
            grid_arg("U", &["dens", "ener"], &["dens", "ener"]),
            scratch_arg("flx", &["(nxb)+1", "(nyb)"]),
            external_arg("dt"),
        ],
    );
    let ps2 = routine(
        "PS2",
        &["CPU"],
        vec![
            grid_arg("U", &["dens"], &["dens"]),
            external_arg("dt"),
            external_arg("gamma"),
        ],
    );
    let c = consolidate(&[&ps1, &ps2]).unwrap();
    let ext: Vec<&str> = c.externals.iter().map(|e| e.name.as_str()).collect();
    assert_eq!(ext, ["dt", "gamma"], "dt deduplicated");
    assert_eq!(c.scratch.len(), 1);
    let g = &c.grid_data[0];
    assert!(g.variables_in.contains("dens") && g.variables_in.contains("ener"));

    // order-insensitivity over 200 randomized routine pairs
    let mut rng = StdRng::seed_from_u64(202);
    let vars = VAR_NAMES;
    for case in 0..200 {
        let make = |name: &str, rng: &mut StdRng| {
            let vin: Vec<&str> = vars.iter().filter(|_| rng.random_bool(0.5)).copied().collect();
            let mut vout: Vec<&str> =
                vars.iter().filter(|_| rng.random_bool(0.5)).copied().collect();
            if vin.is_empty() && vout.is_empty() {
                vout.push("dens");
            }
            let mut args = vec![grid_arg("U", &vin, &vout)];
            if rng.random_bool(0.5) {
                args.push(external_arg("dt"));
            }
            if rng.random_bool(0.5) {
                args.push(scratch_arg("wk", &["(nxb)", "4"]));
            }
            if rng.random_bool(0.3) {
                args.push(external_arg("gamma"));
            }
            routine(name, &["CPU"], args)
        };
        let a = make("A", &mut rng);
        let b = make("B", &mut rng);
        let ab = consolidate(&[&a, &b]).unwrap();
        let ba = consolidate(&[&b, &a]).unwrap();
        assert_eq!(ab.externals, ba.externals, "case {case}");
        assert_eq!(ab.grid_data, ba.grid_data, "case {case}");
        assert_eq!(ab.scratch, ba.scratch, "case {case}");
        assert_eq!(ab.tile_metadata, ba.tile_metadata, "case {case}");
    }
    println!("PASS criterion 2: consolidation union + order-insensitivity over 200 pairs");
}

#[test]
fn criterion_03_packet_round_trip() {
    let mut rng = StdRng::seed_from_u64(303);
    let mesh = BlockMesh::new(2, 2, 8, 8, 1, [1.0, 1.0]);
    for case in 0..1000 {
        // randomized block data
        for id in 0..mesh.n_blocks() {
            let mut g = mesh.lock(id);
            for x in g.data.iter_mut() {
                *x = rng.random_range(-1e9..1e9);
            }
        }
        // randomized spec: out masks inside in masks so the round trip is
        // a pure identity
        let mut vin: Vec<&str> = VAR_NAMES
            .iter()
            .filter(|_| rng.random_bool(0.6))
            .copied()
            .collect();
        if vin.is_empty() {
            vin.push("ener");
        }
        let vout: Vec<&str> = vin.iter().filter(|_| rng.random_bool(0.7)).copied().collect();
        let mut args = vec![grid_arg("U", &vin, &vout)];
        if rng.random_bool(0.5) {
            args.push(scratch_arg("flx", &["(nxb)+1", "(nyb)"]));
        }
        if rng.random_bool(0.5) {
            args.push(external_arg("dt"));
        }
        let r = routine("r", &["GPU"], args);
        let spec = consolidate(&[&r]).unwrap();
        let n: usize = if rng.random_bool(0.8) {
            rng.random_range(1..8)
        } else {
            rng.random_range(8..=160)
        };
        let layout = packet::layout(&spec, n, &mesh.params()).unwrap();

        // non-overlap
        let mut ranges: Vec<(u64, u64)> = layout
            .entries
            .iter()
            .map(|e| (e.offset_bytes, e.offset_bytes + e.size_bytes))
            .collect();
        ranges.sort();
        for w in ranges.windows(2) {
            assert!(w[0].1 <= w[1].0, "case {case}: overlapping entries");
        }

        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..mesh.n_blocks())).collect();
        let before = mesh.checksums();
        let pkt = packet::pack(&layout, &mesh, &ids, &BTreeMap::new(), 0.25).unwrap();
        packet::unpack(&pkt, &mesh).unwrap();
        assert_eq!(before, mesh.checksums(), "case {case}: round trip not bitwise");
    }
    println!("PASS criterion 3: 1000 randomized pack/unpack round trips, non-overlapping layouts");
}

#[test]
fn criterion_04_cross_configuration_equivalence() {
    let steps = 10;
    let dt = 2e-3;

    // single-threaded reference
    let reference = sedov_mesh();
    let registry = Arc::new(KernelRegistry::builtin());
    let routines = [
        ("hydro_advance".to_owned(), DeviceTarget::cpu()),
        ("eos_gamma".to_owned(), DeviceTarget::cpu()),
    ];
    for _ in 0..steps {
        kernels::reference::sequential_cycle(&reference, &registry, &routines, dt, &BTreeMap::new())
            .unwrap();
    }
    let want = reference.checksums();

    let run = |recipe: &str, n: usize, ratio: f64| {
        let (exec, registry) = exec_for(recipe);
        let mesh = sedov_mesh();
        let mut cfg = PipelineConfig::for_plan(&exec);
        cfg.n_blocks_per_packet = n;
        cfg.split_ratio = ratio;
        let mut rt = start_teams(cfg).unwrap();
        for _ in 0..steps {
            rt.run_cycle(&exec, &mesh, &registry, StepInputs { dt }).unwrap();
        }
        mesh.checksums()
    };
    assert_eq!(run("recipes/sedov_cpu.json", 16, 0.5), want, "cpu_only diverged");
    assert_eq!(run("recipes/sedov_gpu.json", 20, 0.5), want, "gpu_only (n=20) diverged");
    assert_eq!(run("recipes/sedov_split.json", 20, 0.5), want, "split (0.5) diverged");
    println!("PASS criterion 4: cpu_only, gpu_only, split bitwise-identical to the reference");
}

#[test]
fn criterion_05_sequential_cellular_pipeline() {
    let steps = 10;
    let dt = 1e-9;
    let reference = cellular_mesh(4, 4, 16);
    let registry = Arc::new(KernelRegistry::builtin());
    let routines = [
        ("hydro_advance".to_owned(), DeviceTarget::gpu()),
        ("eos_expensive".to_owned(), DeviceTarget::gpu()),
        ("burn_advance".to_owned(), DeviceTarget::cpu()),
    ];
    for _ in 0..steps {
        kernels::reference::sequential_cycle(&reference, &registry, &routines, dt, &BTreeMap::new())
            .unwrap();
    }

    let (exec, registry) = exec_for("recipes/cellular_seq.json");
    let mesh = cellular_mesh(4, 4, 16);
    let mut cfg = PipelineConfig::for_plan(&exec);
    cfg.n_blocks_per_packet = 6;
    let mut rt = start_teams(cfg).unwrap();
    for _ in 0..steps {
        rt.run_cycle(&exec, &mesh, &registry, StepInputs { dt }).unwrap();
    }
    assert!(mesh.interior_eq(&reference), "pipeline diverged from reference");
    println!("PASS criterion 5: sequential reacting-flow pipeline bitwise equals the reference");
}

#[test]
fn criterion_06_parallel_mode_fidelity_trade_off() {
    let gpu = DeviceTarget::gpu;
    let cpu = DeviceTarget::cpu;
    let branch_a = [
        ("hydro_advance".to_owned(), gpu()),
        ("eos_expensive".to_owned(), gpu()),
    ];
    let branch_b = [("burn_advance".to_owned(), cpu())];

    // (a) the pipeline equals the two-copy merge oracle bitwise
    let steps = 4;
    let dt = 1e-9;
    let (exec, registry) = exec_for("recipes/cellular_parallel.json");
    let mesh = cellular_mesh(4, 2, 8);
    let oracle = cellular_mesh(4, 2, 8);
    let mut cfg = PipelineConfig::for_plan(&exec);
    cfg.n_blocks_per_packet = 3;
    let mut rt = start_teams(cfg).unwrap();
    for _ in 0..steps {
        rt.run_cycle(&exec, &mesh, &registry, StepInputs { dt }).unwrap();
        kernels::reference::parallel_cycle(
            &oracle,
            &registry,
            &branch_a,
            &branch_b,
            "merge_hydro_burn",
            dt,
            &BTreeMap::new(),
        )
        .unwrap();
    }
    assert!(mesh.interior_eq(&oracle), "pipeline diverged from the two-copy oracle");

    // (b) deviation from sequential is nonzero and shrinks with order >= 1
    let registry = Arc::new(KernelRegistry::builtin());
    let seq_routines = [
        ("hydro_advance".to_owned(), gpu()),
        ("eos_expensive".to_owned(), gpu()),
        ("burn_advance".to_owned(), cpu()),
    ];
    let deviation = |dt: f64, steps: usize| -> f64 {
        let par = cellular_mesh(4, 2, 8);
        let seq = cellular_mesh(4, 2, 8);
        for _ in 0..steps {
            kernels::reference::parallel_cycle(
                &par,
                &registry,
                &branch_a,
                &branch_b,
                "merge_hydro_burn",
                dt,
                &BTreeMap::new(),
            )
            .unwrap();
            kernels::reference::sequential_cycle(&seq, &registry, &seq_routines, dt, &BTreeMap::new())
                .unwrap();
        }
        // relative infinity norm over the reacting variables
        let mut dev = 0.0f64;
        for id in 0..par.n_blocks() {
            let a = par.lock(id);
            let b = seq.lock(id);
            let (ta, tb) = (a.tile_ref(), b.tile_ref());
            for v in [ENER, S1, S2, S3] {
                for j in 0..par.nyb as i64 {
                    for i in 0..par.nxb as i64 {
                        let x = ta.get(v, i, j);
                        let y = tb.get(v, i, j);
                        let scale = x.abs().max(y.abs()).max(1e-30);
                        dev = dev.max((x - y).abs() / scale);
                    }
                }
            }
        }
        dev
    };
    let base_dt = 2e-9;
    let d1 = deviation(base_dt, 4);
    let d2 = deviation(base_dt / 2.0, 8);
    assert!(d1 > 0.0, "fidelity trade-off must be visible");
    let order = (d1 / d2).log2();
    assert!(
        (0.8..=2.5).contains(&order),
        "measured splitting order {order} outside [0.8, 2.5] (d1={d1:e}, d2={d2:e})"
    );
    println!(
        "PASS criterion 6: parallel mode equals the merge oracle; splitting order {order:.2}"
    );
}

#[test]
fn criterion_07_saturation_curve() {
    let (exec, mesh) = dyadic_gpu_plan();
    let mut cost = CostModel::default_profile();
    cost.kernel_costs.insert(
        "work".to_owned(),
        perf::KernelCost {
            host_us: 8.0,
            device_us: 3.0,
        },
    );

    // the hand-computed event timeline: N=4, p=2 -> 68 us exactly
    let hand = perf::simulate(&exec, &cost, &mesh, 4, 2, &SimOptions::default()).unwrap();
    assert_eq!(hand.makespan_us, 68.0, "hand-computed case must match exactly");

    let ps = [1usize, 5, 10, 20, 40, 80, 160];
    let mut makespans = Vec::new();
    for &p in &ps {
        let r = perf::simulate(&exec, &cost, &mesh, 160, p, &SimOptions::default()).unwrap();
        makespans.push(r.makespan_us);
    }
    // strictly decreasing through p = 20
    for w in makespans[..4].windows(2) {
        assert!(w[1] < w[0], "makespan not strictly decreasing: {makespans:?}");
    }
    // plateau: makespan(80) within 5% of makespan(160)
    let (m80, m160) = (makespans[5], makespans[6]);
    assert!(
        (m80 - m160).abs() / m160 <= 0.05,
        "no plateau: {m80} vs {m160}"
    );
    println!(
        "PASS criterion 7: saturation curve {:?} (68 us hand case exact)",
        makespans
    );
}

#[test]
fn criterion_08_configuration_ordering() {
    let burn_heavy = CostModel::from_json(&data("cost/burn_heavy.json")).unwrap();
    let mesh = MeshParams {
        nxb: 16,
        nyb: 16,
        nguard: 2,
        nvars: NVARS,
    };
    let n_total = 160;
    let opts_for = |exec: &ExecutablePlan| SimOptions {
        team_workers: exec
            .topology
            .stages
            .iter()
            .map(|s| (s.name.clone(), 16))
            .collect(),
        donation_edges: vec![],
        split_ratio: 0.5,
    };
    let makespan = |recipe: &str, cost: &CostModel| -> f64 {
        let (exec, _) = exec_for(recipe);
        let opts = opts_for(&exec);
        perf::simulate(&exec, cost, &mesh, n_total, 20, &opts)
            .unwrap()
            .makespan_us
    };

    let cpu_only = makespan("recipes/cellular_cpu.json", &burn_heavy);
    let seq = makespan("recipes/cellular_seq.json", &burn_heavy);
    let parallel = makespan("recipes/cellular_parallel.json", &burn_heavy);
    assert!(
        parallel < seq && seq < cpu_only,
        "burn-heavy ordering violated: parallel={parallel} seq={seq} cpu={cpu_only}"
    );

    let cheap = CostModel::from_json(&data("cost/cheap_kernel.json")).unwrap();
    let cpu_sedov = makespan("recipes/sedov_cpu.json", &cheap);
    let gpu_sedov = makespan("recipes/sedov_gpu.json", &cheap);
    assert!(
        cpu_sedov < gpu_sedov,
        "cheap-kernel ordering violated: cpu={cpu_sedov} gpu={gpu_sedov}"
    );
    println!(
        "PASS criterion 8: orderings parallel({parallel:.0}) < seq({seq:.0}) < cpu({cpu_only:.0}); \
         cheap cpu({cpu_sedov:.0}) < gpu({gpu_sedov:.0})"
    );
}

#[test]
fn criterion_09_thread_donation() {
    // modeled: imbalanced pipeline, donation never hurts
    let registry = Arc::new(KernelRegistry::builtin());
    let graph = load_recipe(&data("recipes/cellular_seq.json")).unwrap();
    let plan = fuse(&graph, &registry.spec_registry()).unwrap();
    let exec = emit_plan(&plan).unwrap();
    let mesh_params = MeshParams {
        nxb: 16,
        nyb: 16,
        nguard: 2,
        nvars: NVARS,
    };
    let cost = CostModel::from_json(&data("cost/burn_heavy.json")).unwrap();
    let team_workers: BTreeMap<String, usize> =
        BTreeMap::from([("tf_0".to_owned(), 4), ("tf_1".to_owned(), 2)]);
    let without = SimOptions {
        team_workers: team_workers.clone(),
        donation_edges: vec![],
        split_ratio: 0.5,
    };
    let with = SimOptions {
        team_workers,
        donation_edges: vec![("tf_0".to_owned(), "tf_1".to_owned())],
        split_ratio: 0.5,
    };
    let base = perf::simulate(&exec, &cost, &mesh_params, 160, 20, &without).unwrap();
    let donated = perf::simulate(&exec, &cost, &mesh_params, 160, 20, &with).unwrap();
    assert!(
        donated.makespan_us <= base.makespan_us,
        "donation hurt: {} vs {}",
        donated.makespan_us,
        base.makespan_us
    );

    // measured: exactly-once counters across 100 randomized runs, 1..8 workers
    let mut rng = StdRng::seed_from_u64(909);
    let (exec, registry) = exec_for("recipes/sedov_gpu.json");
    let baseline = {
        let mesh = Arc::new(BlockMesh::new(2, 2, 8, 8, 2, [1.0, 1.0]));
        kernels::init_sedov(&mesh, 0);
        let mut rt = start_teams(PipelineConfig::for_plan(&exec)).unwrap();
        rt.run_cycle(&exec, &mesh, &registry, StepInputs { dt: 1e-3 }).unwrap();
        mesh.checksums()
    };
    for run in 0..100 {
        let mesh = Arc::new(BlockMesh::new(2, 2, 8, 8, 2, [1.0, 1.0]));
        kernels::init_sedov(&mesh, 0);
        let mut cfg = PipelineConfig::for_plan(&exec);
        cfg.streams = rng.random_range(1..4);
        cfg.n_blocks_per_packet = rng.random_range(1..6);
        let workers = rng.random_range(1..=8usize);
        cfg.set_workers("tf_0", workers);
        cfg.set_workers("mover_0", rng.random_range(1..=2usize));
        if rng.random_bool(0.5) {
            cfg.donation_edges = vec![("tf_0".to_owned(), "mover_0".to_owned())];
        }
        let mut rt = start_teams(cfg).unwrap();
        let report = rt
            .run_cycle(&exec, &mesh, &registry, StepInputs { dt: 1e-3 })
            .unwrap();
        for (stage, counts) in &report.per_block_counts {
            for (b, c) in counts.iter().enumerate() {
                assert_eq!(*c, 1, "run {run}: stage {stage} block {b} count {c}");
            }
        }
        assert_eq!(mesh.checksums(), baseline, "run {run}: numerics changed");
    }
    println!("PASS criterion 9: donation never hurts; exactly-once held over 100 randomized runs");
}

#[test]
fn criterion_10_macroprocessor() {
    // arbitration example
    let mut set = DefinitionSet::new();
    let def = |name: &str, params: &[&str], body: &str, path: &[&str]| MacroDefinition {
        name: name.to_owned(),
        params: params.iter().map(|s| s.to_string()).collect(),
        body: body.to_owned(),
        qualifiers: path.iter().map(|s| s.to_string()).collect(),
    };
    set.add(def("LOOP_2D", &[], "plain", &["default"])).unwrap();
    set.add(def("LOOP_2D", &[], "device", &["gpu"])).unwrap();
    set.set_parent(
        vec!["gpu".into(), "tiled".into()],
        vec!["gpu".into()],
    )
    .unwrap();
    let active = vec!["gpu".to_owned(), "tiled".to_owned()];
    assert_eq!(set.arbitrate("LOOP_2D", &active).unwrap().body, "device");

    // partial-redefinition overlay: the child path redefines one name,
    // unlisted names inherit
    let overlay = DefinitionSet::parse(
        "[default]\nHALO() = 2\nPITCH() = 18\n[gpu]\ninherit default\nHALO() = 4\n",
    )
    .unwrap();
    let gpu = vec!["gpu".to_owned()];
    assert_eq!(overlay.expand("@HALO()", &gpu).unwrap(), "4");
    assert_eq!(overlay.expand("@PITCH()", &gpu).unwrap(), "18");

    // mutual recursion is a SelfReference error
    let mut cyc = DefinitionSet::new();
    cyc.add(def("A", &[], "@B()", &["default"])).unwrap();
    cyc.add(def("B", &[], "@A()", &["default"])).unwrap();
    assert!(matches!(
        cyc.expand("@A()", &["default".to_owned()]),
        Err(MacroError::SelfReference { .. })
    ));

    // 500 randomized acyclic definition sets terminate
    let mut rng = StdRng::seed_from_u64(1010);
    for case in 0..500 {
        let n = rng.random_range(1..10usize);
        let mut set = DefinitionSet::new();
        for i in 0..n {
            // body may reference only strictly later names: acyclic
            let mut body = format!("v{i}");
            for j in (i + 1)..n {
                if rng.random_bool(0.4) {
                    body.push_str(&format!(" @M{j}()"));
                }
            }
            set.add(def(&format!("M{i}"), &[], &body, &["default"])).unwrap();
        }
        let out = set.expand("@M0()", &["default".to_owned()]);
        assert!(out.is_ok(), "case {case}: expansion failed: {out:?}");
    }
    println!("PASS criterion 10: arbitration, overlay, self-reference, 500 terminating sets");
}

#[test]
fn criterion_11_codegen_stability() {
    let registry = KernelRegistry::builtin();
    let graph = load_recipe(&data("recipes/listing1.json")).unwrap();
    let plan = fuse(&graph, &registry.spec_registry()).unwrap();
    let exec = emit_plan(&plan).unwrap();
    let lib = TemplateLibrary::defaults();
    let macros = TemplateLibrary::default_macros();

    let render_tf0 = |reg: &SpecRegistry| -> String {
        let plan = fuse(&graph, reg).unwrap();
        build_tree(&plan.task_functions[0], &lib, &macros)
            .unwrap()
            .render()
            .unwrap()
    };

    // byte identical across two runs
    let a = render_tf0(&registry.spec_registry());
    let b = render_tf0(&registry.spec_registry());
    assert_eq!(a, b);

    // byte identical against the reviewed golden file
    let golden = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/tf_a.glue"),
    )
    .unwrap();
    assert_eq!(a, golden, "glue drifted from the golden file");

    // invariant under reordering of non-annotation source lines
    let mut reg2 = kernels::corpus_spec_registry();
    let shuffled = data("annotations/actions.F90")
        .replace("implicit none", "! moved\n  implicit none")
        .replace("end subroutine Action_1", "end subroutine Action_1\n! trailing note");
    for spec in
        blockflow::annotations::parse_annotations_named(&shuffled, "!!", "shuffled").unwrap()
    {
        reg2.insert(spec);
    }
    let c = render_tf0(&reg2);
    assert_eq!(a, c, "static-code churn changed the glue");

    // glue call order equals the executable plan's call sequence
    for tf in &plan.task_functions {
        let glue = build_tree(tf, &lib, &macros).unwrap().render().unwrap();
        let calls: Vec<String> = exec
            .task(&tf.id)
            .unwrap()
            .calls
            .iter()
            .map(|x| x.routine.clone())
            .collect();
        assert_eq!(parse_call_order(&glue), calls);
    }
    println!("PASS criterion 11: golden glue stable, call order equals plan order");
}

#[test]
fn criterion_12_double_halo_equivalence() {
    let variant = Arc::new(BlockMesh::new(4, 4, 4, 4, 2, [1.0, 1.0]));
    let refill = Arc::new(BlockMesh::new(4, 4, 4, 4, 2, [1.0, 1.0]));
    kernels::init_sedov(&variant, 12);
    kernels::init_sedov(&refill, 12);
    let registry = Arc::new(KernelRegistry::builtin());
    let routines = [("hydro_advance".to_owned(), DeviceTarget::cpu())];
    for _ in 0..5 {
        kernels::reference::sequential_cycle(&variant, &registry, &routines, 2e-3, &BTreeMap::new())
            .unwrap();
        kernels::reference::hydro_cycle_with_refill(&refill, 2e-3).unwrap();
    }
    assert!(
        variant.interior_eq(&refill),
        "communication-avoidance variant diverged from the refill reference"
    );
    println!("PASS criterion 12: double-halo variant bitwise equals the refill reference");
}
