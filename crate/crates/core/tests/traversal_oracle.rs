//! Engine results checked against structural oracles over the `Value`
//! form, plus the counter invariants the factored layout exists for.

mod common;

use std::sync::Arc;

use packedadt::bench::generate;
use packedadt::layout::{deserialize, serialize, serialize_with, Counters, LayoutPlan, SerializeOptions};
use packedadt::region::RegionStore;
use packedadt::schema::Layout;
use packedadt::traversal::{
    builtin_passes, fold_at, run_fold, run_map, skip_value, CursorMode, PassKind, TraversalConfig,
};

const LAYOUTS: [Layout; 2] = [Layout::Flat, Layout::Factored];
const MODES: [CursorMode; 2] = [CursorMode::Immutable, CursorMode::Mutable];

fn sizes_for(suite: &str) -> Vec<u64> {
    match suite {
        "KDTree" => vec![1, 2, 33, 512],
        "MonoTree" | "TernaryTree" => vec![1, 3, 40, 1000],
        _ => vec![0, 1, 2, 17, 1000],
    }
}

#[test]
fn every_builtin_pass_matches_its_oracle() {
    let registry = builtin_passes();
    let cfg = TraversalConfig::default();
    for rp in registry.iter() {
        for size in sizes_for(&rp.suite) {
            let value = generate(&rp.suite, size, 42).unwrap();
            for layout in LAYOUTS {
                let schema = rp.schema_for(layout);
                let mut store = RegionStore::with_config(256, true);
                let root = serialize(&schema, &rp.datatype, &value, &mut store).unwrap();
                for mode in MODES {
                    let label = format!("{}/{} n={size} {layout:?} {mode:?}", rp.suite, rp.pass.name);
                    match rp.pass.kind {
                        PassKind::Fold => {
                            let report =
                                run_fold(&schema, &rp.pass, &root, &store, mode, &cfg).unwrap();
                            let expect = common::reference_fold(&rp.suite, &rp.pass.name, &value);
                            assert_eq!(report.result, Some(expect), "{label}");
                        }
                        PassKind::Map => {
                            let mut out_store = RegionStore::with_config(256, true);
                            let report = run_map(
                                &schema, &rp.pass, &root, &store, &mut out_store, mode, &cfg,
                            )
                            .unwrap();
                            let got = deserialize(report.output.as_ref().unwrap(), &out_store).unwrap();
                            let expect = common::reference_map(&rp.suite, &rp.pass.name, &value);
                            assert_eq!(got, expect, "{label}");
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn modes_agree_on_everything_but_bundle_copies() {
    let registry = builtin_passes();
    let cfg = TraversalConfig::default();
    for rp in registry.iter().filter(|p| p.pass.kind == PassKind::Fold) {
        let value = generate(&rp.suite, 600, 3).unwrap();
        for layout in LAYOUTS {
            let schema = rp.schema_for(layout);
            let mut store = RegionStore::with_config(1024, true);
            let root = serialize(&schema, &rp.datatype, &value, &mut store).unwrap();
            let imm = run_fold(&schema, &rp.pass, &root, &store, CursorMode::Immutable, &cfg).unwrap();
            let mu = run_fold(&schema, &rp.pass, &root, &store, CursorMode::Mutable, &cfg).unwrap();
            let label = format!("{}/{} {layout:?}", rp.suite, rp.pass.name);
            assert_eq!(imm.result, mu.result, "{label}");
            assert_eq!(imm.buffers, mu.buffers, "{label}");
            assert_eq!(imm.steps, mu.steps, "{label}");
            assert_eq!(mu.bundle_copies, 0, "{label}");
            assert!(imm.bundle_copies > 0, "{label}");
        }
    }
}

#[test]
fn dead_buffers_are_never_read_in_factored_folds() {
    let registry = builtin_passes();
    let cfg = TraversalConfig::default();

    // LinearListReduction: ten of the eleven scalar buffers are dead.
    let rp = registry.lookup("LinearListReduction", "reduce").unwrap();
    let schema = rp.schema_for(Layout::Factored);
    let value = generate("LinearListReduction", 500, 9).unwrap();
    let mut store = RegionStore::with_config(4096, true);
    let root = serialize(&schema, "LinearList", &value, &mut store).unwrap();
    let report = run_fold(&schema, &rp.pass, &root, &store, CursorMode::Mutable, &cfg).unwrap();
    assert_eq!(report.buffers.len(), 12);
    assert_eq!(report.buffers[0].bytes_read, 501); // tags
    assert_eq!(report.buffers[1].bytes_read, 500 * 8); // used field
    for b in &report.buffers[2..] {
        assert_eq!(b.bytes_read, 0, "dead buffer {} was read", b.role);
    }

    // Exact totals: flat streams 1 + 11*8 bytes per cell, factored 1 + 8.
    let flat_schema = rp.schema_for(Layout::Flat);
    let mut flat_store = RegionStore::with_config(4096, true);
    let flat_root = serialize(&flat_schema, "LinearList", &value, &mut flat_store).unwrap();
    let flat_report =
        run_fold(&flat_schema, &rp.pass, &flat_root, &flat_store, CursorMode::Mutable, &cfg).unwrap();
    assert_eq!(flat_report.total_bytes_read(), 89 * 500 + 1);
    assert_eq!(report.total_bytes_read(), 9 * 500 + 1);

    // ReduceNestedList: the nested flat List buffer stays untouched.
    let rp = registry.lookup("ReduceNestedList", "reduce").unwrap();
    let schema = rp.schema_for(Layout::Factored);
    let value = generate("ReduceNestedList", 100, 9).unwrap();
    let mut store = RegionStore::with_config(4096, true);
    let root = serialize(&schema, "NestedList", &value, &mut store).unwrap();
    let report = run_fold(&schema, &rp.pass, &root, &store, CursorMode::Mutable, &cfg).unwrap();
    let list_buf = report.buffers.iter().find(|b| b.role.contains("(NCons,1)")).unwrap();
    assert_eq!(list_buf.bytes_read, 0, "nested list buffer was read");

    // List length: the int buffer is dead.
    let rp = registry.lookup("List", "length").unwrap();
    let schema = rp.schema_for(Layout::Factored);
    let value = generate("List", 64, 9).unwrap();
    let mut store = RegionStore::with_config(4096, true);
    let root = serialize(&schema, "List", &value, &mut store).unwrap();
    let report = run_fold(&schema, &rp.pass, &root, &store, CursorMode::Mutable, &cfg).unwrap();
    assert_eq!(report.result, Some(64));
    assert_eq!(report.buffers[1].bytes_read, 0);
}

#[test]
fn fold_leaves_bundle_at_end_witness() {
    // Full-use passes advance every buffer; their final bundle must equal
    // skip_value's, per buffer.
    let registry = builtin_passes();
    let cfg = TraversalConfig::default();
    for (suite, pass) in [("List", "sumList"), ("List", "sumListAcc"), ("MonoTree", "sumTree"), ("TernaryTree", "sumTree")] {
        let rp = registry.lookup(suite, pass).unwrap();
        let value = generate(suite, 200, 5).unwrap();
        for layout in LAYOUTS {
            let schema = rp.schema_for(layout);
            let mut store = RegionStore::with_config(512, true);
            let root = serialize(&schema, &rp.datatype, &value, &mut store).unwrap();
            let plan = LayoutPlan::new(schema.clone(), &rp.datatype).unwrap();

            let mut skipped = root.bundle.cursors.clone();
            let mut counters = Counters::new(plan.width);
            skip_value(&plan, &store, &mut skipped, &mut counters).unwrap();

            for mode in MODES {
                let mut folded = root.bundle.cursors.clone();
                fold_at(&schema, &rp.datatype, &rp.pass, &mut folded, &store, mode, &cfg).unwrap();
                assert_eq!(folded, skipped, "{suite}/{pass} {layout:?} {mode:?}");
            }
        }
    }
}

#[test]
fn partial_fold_advances_live_buffers_to_end_witness() {
    let registry = builtin_passes();
    let cfg = TraversalConfig::default();
    let rp = registry.lookup("LinearListReduction", "reduce").unwrap();
    let value = generate("LinearListReduction", 40, 6).unwrap();
    let schema = rp.schema_for(Layout::Factored);
    let mut store = RegionStore::with_config(512, true);
    let root = serialize(&schema, "LinearList", &value, &mut store).unwrap();
    let plan = LayoutPlan::new(schema.clone(), "LinearList").unwrap();

    let mut skipped = root.bundle.cursors.clone();
    let mut counters = Counters::new(plan.width);
    skip_value(&plan, &store, &mut skipped, &mut counters).unwrap();

    let mut folded = root.bundle.cursors.clone();
    fold_at(&schema, "LinearList", &rp.pass, &mut folded, &store, CursorMode::Mutable, &cfg).unwrap();

    // Live buffers (tags, used field) land on the end witness; dead ones
    // stay frozen at the start.
    assert_eq!(folded[0], skipped[0]);
    assert_eq!(folded[1], skipped[1]);
    for i in 2..plan.width {
        assert_eq!(folded[i], root.bundle.cursors[i], "buffer {i} moved");
    }
}

#[test]
fn map_writes_what_it_reads_per_buffer() {
    let registry = builtin_passes();
    let cfg = TraversalConfig::default();
    for (suite, pass) in [("List", "add1"), ("MonoTree", "add1Tree")] {
        let rp = registry.lookup(suite, pass).unwrap();
        let value = generate(suite, 300, 8).unwrap();
        for layout in LAYOUTS {
            let schema = rp.schema_for(layout);
            let mut store = RegionStore::with_config(1024, true);
            let root = serialize(&schema, &rp.datatype, &value, &mut store).unwrap();
            let mut out_store = RegionStore::with_config(1024, true);
            let report = run_map(
                &schema,
                &rp.pass,
                &root,
                &store,
                &mut out_store,
                CursorMode::Mutable,
                &cfg,
            )
            .unwrap();
            for b in &report.buffers {
                assert_eq!(b.bytes_written, b.bytes_read, "{suite}/{pass} {layout:?} {}", b.role);
            }
        }
    }
}

#[test]
fn random_access_skip_is_constant_work() {
    // A left-heavy tree: skipping the root with a random-access record
    // jumps over the whole left spine.
    let schema = Arc::new(
        packedadt::schema::AdtSchema::parse("data Tree = Node Tree Tree | Leaf Int").unwrap(),
    );
    let mut left_heavy = common::rng(1);
    let value = common::random_value(&schema, "Tree", 0, &mut left_heavy);
    let mut v = value;
    for _ in 0..200 {
        v = packedadt::layout::Value::new(
            "Node",
            vec![
                packedadt::layout::Arg::Value(v),
                packedadt::layout::Arg::Value(packedadt::layout::Value::new(
                    "Leaf",
                    vec![packedadt::layout::Arg::Int(7)],
                )),
            ],
        );
    }

    let mut plain_store = RegionStore::with_config(4096, true);
    let plain = serialize(&schema, "Tree", &v, &mut plain_store).unwrap();
    let plan = plain.plan().unwrap();
    let mut b1 = plain.bundle.cursors.clone();
    let mut c1 = Counters::new(plan.width);
    skip_value(&plan, &plain_store, &mut b1, &mut c1).unwrap();

    let mut ra_store = RegionStore::with_config(4096, true);
    let opts = SerializeOptions { random_access: true, ..Default::default() };
    let ra = serialize_with(&schema, "Tree", &v, &mut ra_store, &opts).unwrap();
    let mut b2 = ra.bundle.cursors.clone();
    let mut c2 = Counters::new(plan.width);
    skip_value(&plan, &ra_store, &mut b2, &mut c2).unwrap();

    assert!(
        c2.steps * 10 < c1.steps,
        "random access should skip the left spine: {} vs {}",
        c2.steps,
        c1.steps
    );
    assert_eq!(deserialize(&ra, &ra_store).unwrap(), deserialize(&plain, &plain_store).unwrap());
}

#[test]
fn guided_passes_work_through_records_and_chunk_crossings() {
    let registry = builtin_passes();
    let cfg = TraversalConfig::default();
    let value = generate("KDTree", 128, 11).unwrap();
    for pass in ["countInRange", "sumMassInRange", "nearestDist"] {
        let rp = registry.lookup("KDTree", pass).unwrap();
        let expect = common::reference_fold("KDTree", pass, &value);
        for layout in LAYOUTS {
            let schema = rp.schema_for(layout);
            for (ra, period) in [(false, None), (true, None), (false, Some(5)), (true, Some(7))] {
                let mut store = RegionStore::with_config(32, true);
                let opts = SerializeOptions { random_access: ra, indirection_period: period };
                let root = serialize_with(&schema, "KDTree", &value, &mut store, &opts).unwrap();
                for mode in MODES {
                    let report = run_fold(&schema, &rp.pass, &root, &store, mode, &cfg).unwrap();
                    assert_eq!(
                        report.result,
                        Some(expect),
                        "{pass} {layout:?} ra={ra} period={period:?} {mode:?}"
                    );
                }
            }
        }
    }
}

#[test]
fn counters_are_identical_across_runs_and_modes() {
    let registry = builtin_passes();
    let cfg = TraversalConfig::default();
    let rp = registry.lookup("KDTree", "sumMassInRange").unwrap();
    let value = generate("KDTree", 200, 17).unwrap();
    let schema = rp.schema_for(Layout::Factored);
    let mut store = RegionStore::with_config(1024, true);
    let root = serialize(&schema, "KDTree", &value, &mut store).unwrap();
    let a = run_fold(&schema, &rp.pass, &root, &store, CursorMode::Mutable, &cfg).unwrap();
    let b = run_fold(&schema, &rp.pass, &root, &store, CursorMode::Mutable, &cfg).unwrap();
    let c = run_fold(&schema, &rp.pass, &root, &store, CursorMode::Immutable, &cfg).unwrap();
    assert_eq!(a.buffers, b.buffers);
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.buffers, c.buffers);
    assert_eq!(a.steps, c.steps);
}

#[test]
fn report_serializes_to_the_documented_json_shape() {
    let registry = builtin_passes();
    let cfg = TraversalConfig::default();
    let rp = registry.lookup("MonoTree", "sumTree").unwrap();
    let value = generate("MonoTree", 7, 0).unwrap();
    let schema = rp.schema_for(Layout::Factored);
    let mut store = RegionStore::new();
    let root = serialize(&schema, "Tree", &value, &mut store).unwrap();
    let report = run_fold(&schema, &rp.pass, &root, &store, CursorMode::Mutable, &cfg).unwrap();
    let json: serde_json::Value = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    for key in ["pass", "layout", "mode", "n", "result", "buffers", "steps", "bundle_copies", "wall_ns"] {
        assert!(json.get(key).is_some(), "missing key {key}");
    }
    assert_eq!(json["n"], 7);
    assert_eq!(json["buffers"][0]["role"], "tags[Tree]");
    assert!(json["buffers"][0]["bytes_read"].as_u64().unwrap() > 0);
}
