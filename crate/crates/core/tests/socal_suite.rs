//! The calculus against its canonical programs: the buildtree trace, the
//! named rejection reasons, interpreter store contents, the well-formedness
//! checker, and the cell-to-byte bridge to the layout module.

mod common;

use packedadt::layout::{serialize, serialize_plain, LayoutPlan};
use packedadt::region::RegionStore;

use packedadt::socal::{
    check_well_formed, end_witness, eval_pure, fuzz_type_safety, generate_program, interpret,
    parse_socal, run, store_of_value, typecheck, Cell, CLoc, FuzzOptions, Interp, InterpOptions,
    RejectReason, RtVal, SocalError,
};

const BUILDTREE: &str = include_str!("../testdata/buildtree.socal");
const DOUBLE_WRITE: &str = include_str!("../testdata/double_write.socal");
const BAD_PROJ: &str = include_str!("../testdata/bad_proj.socal");
const BAD_AFTER: &str = include_str!("../testdata/bad_after.socal");
const FLAT_LIST: &str = include_str!("../testdata/flat_list.socal");

#[test]
fn buildtree_parses_checks_and_runs() {
    let p = parse_socal(BUILDTREE).unwrap();
    let outcome = typecheck(&p).unwrap();

    // The accumulated constraint environment matches the worked example:
    // one start per region, one tag bump, one introLocVec for the left
    // child, and one after for the right child.
    assert_eq!(outcome.count_kind("start"), 1);
    assert_eq!(outcome.count_kind("+1"), 1);
    assert_eq!(outcome.count_kind("introLocVec"), 1);
    assert_eq!(outcome.count_kind("after"), 1);
    assert_eq!(outcome.count_kind("projTagLoc"), 1);
    assert_eq!(outcome.count_kind("projFieldLoc"), 1);

    let (run, it) = interpret(&p, &InterpOptions::default()).unwrap();
    match run.result {
        RtVal::Int(n) => assert_eq!(n, 4),
        other => panic!("expected an integer sum, got {other:?}"),
    }

    // Store contents: preorder tags and the four unit leaves.
    let tags: Vec<u8> = it.store.regions[0]
        .cells
        .iter()
        .map(|c| match c {
            Some(Cell::Tag { tag, .. }) => *tag,
            other => panic!("tag region holds {other:?}"),
        })
        .collect();
    assert_eq!(tags, vec![0, 0, 1, 1, 0, 1, 1], "Node,Node,Leaf,Leaf,Node,Leaf,Leaf");
    let ints: Vec<i64> = it.store.regions[1]
        .cells
        .iter()
        .map(|c| match c {
            Some(Cell::Int(v)) => *v,
            other => panic!("int region holds {other:?}"),
        })
        .collect();
    assert_eq!(ints, vec![1, 1, 1, 1]);
}

#[test]
fn named_rejections() {
    let p = parse_socal(DOUBLE_WRITE).unwrap();
    let err = typecheck(&p).unwrap_err();
    assert_eq!(err.reason, RejectReason::WriteToWrittenLocation, "{err}");

    let p = parse_socal(BAD_PROJ).unwrap();
    let err = typecheck(&p).unwrap_err();
    assert_eq!(err.reason, RejectReason::BadProjectionKey, "{err}");

    let p = parse_socal(BAD_AFTER).unwrap();
    let err = typecheck(&p).unwrap_err();
    assert_eq!(err.reason, RejectReason::UnwrittenDependency, "{err}");
}

#[test]
fn flat_list_program_runs() {
    let p = parse_socal(FLAT_LIST).unwrap();
    typecheck(&p).unwrap();
    let (run, it) = interpret(&p, &InterpOptions::default()).unwrap();
    match run.result {
        RtVal::Int(n) => assert_eq!(n, 3),
        other => panic!("expected 3, got {other:?}"),
    }
    // One region, cells [Cons, 1, Cons, 2, Nil].
    assert_eq!(it.store.regions.len(), 1);
    assert_eq!(it.store.regions[0].cells.len(), 5);
}

#[test]
fn case_on_unwritten_location_gets_stuck() {
    // Interpretation without the checker: case over a never-written
    // destination.
    let text = "(data Tree (Node Tree Tree) (Leaf Int))\n\
                (layout Tree Factored)\n\
                (fun use (locs (in l Tree)) (args (t Tree l)) (ret Int)\n\
                  (case t ((Node (a la) (b lb)) 0) ((Leaf i) i)))\n\
                (main (letregion (r Tree) (letloc (lv (start r))\n\
                  (case 7 ((Leaf i) i) ((Node (a la) (b lb)) 0)))))";
    // A case over a non-pointer value is immediately stuck.
    let p = parse_socal(text).unwrap();
    assert!(typecheck(&p).is_err());
    match interpret(&p, &InterpOptions::default()) {
        Err(SocalError::Stuck { rule, .. }) => assert_eq!(rule, "D-Case"),
        Err(other) => panic!("expected Stuck, got {other:?}"),
        Ok(_) => panic!("expected the interpreter to get stuck"),
    }
}

#[test]
fn preservation_holds_along_buildtree() {
    let p = parse_socal(BUILDTREE).unwrap();
    typecheck(&p).unwrap();
    let mut it = Interp::new(&p);
    let mut steps_checked = 0u64;
    let mut cb = |it: &Interp<'_>| {
        let report = check_well_formed(it);
        if let Some(v) = &report.violation {
            return Err(SocalError::Stuck {
                rule: "wf".into(),
                detail: format!("{}: {}", v.clause, v.subject),
            });
        }
        steps_checked += 1;
        Ok(())
    };
    run(&mut it, &InterpOptions::default(), Some(&mut cb)).unwrap();
    assert!(steps_checked > 50, "checked {steps_checked} steps");
}

#[test]
fn corrupted_store_fails_well_formedness() {
    let p = parse_socal(BUILDTREE).unwrap();
    let (_, mut it) = interpret(&p, &InterpOptions::default()).unwrap();
    assert!(check_well_formed(&it).pass());
    // Overwrite a written tag: the write-once clause trips.
    packedadt::socal::poke(&mut it, 0, 0, Cell::Tag { datatype: "Tree".into(), tag: 1 });
    let report = check_well_formed(&it);
    assert_eq!(report.violation.as_ref().unwrap().clause, "wfalloc:write-once");
}

#[test]
fn nursery_clause_detects_populated_unwritten_locations() {
    // Stop the program right after a start binding, then force-populate the
    // nursery location's cell behind the checker's back.
    let text = "(data Tree (Node Tree Tree) (Leaf Int))\n\
                (layout Tree Factored)\n\
                (main (letregion (r Tree) (letloc (lv (start r)) (make Leaf lv 5))))";
    let p = parse_socal(text).unwrap();
    typecheck(&p).unwrap();
    let mut it = Interp::new(&p);
    let mut hit = None;
    let mut cb = |it: &Interp<'_>| {
        if hit.is_none() && !it.nursery.is_empty() {
            // Clone what we need to corrupt after the run.
            hit = Some(it.nursery.iter().next().unwrap().clone());
        }
        Ok(())
    };
    run(&mut it, &InterpOptions::default(), Some(&mut cb)).unwrap();

    // Re-run, stopping mid-way: interpret two steps by hand.
    let mut it = Interp::new(&p);
    let e = p.main.clone();
    let s1 = it.step(e).unwrap();
    let s2 = it.step(s1.expr).unwrap();
    it.constraints.extend(s2.c_delta);
    assert!(!it.nursery.is_empty());
    assert!(check_well_formed(&it).pass());
    packedadt::socal::poke(&mut it, 0, 0, Cell::Tag { datatype: "Tree".into(), tag: 0 });
    let report = check_well_formed(&it);
    assert_eq!(report.violation.as_ref().unwrap().clause, "wfalloc:nursery");
}

#[test]
fn end_witness_examples() {
    let schema_text = "data Tree = Node Tree Tree | Leaf Int\nlayout Tree = Factored";
    let schema = std::sync::Arc::new(packedadt::schema::AdtSchema::parse(schema_text).unwrap());
    let v = packedadt::layout::Value::new(
        "Node",
        vec![
            packedadt::layout::Arg::Value(packedadt::layout::Value::new(
                "Leaf",
                vec![packedadt::layout::Arg::Int(1)],
            )),
            packedadt::layout::Arg::Value(packedadt::layout::Value::new(
                "Leaf",
                vec![packedadt::layout::Arg::Int(2)],
            )),
        ],
    );
    let (store, root) = store_of_value(&schema, "Tree", &v).unwrap();

    // Int cells step one cell.
    let int_loc = CLoc::Single { region: 1, index: 0 };
    let end = end_witness(&store, &schema, "Int", &int_loc).unwrap();
    assert_eq!(end, CLoc::Single { region: 1, index: 1 });

    // The factored root ends at (tag 3, int 2).
    let end = end_witness(&store, &schema, "Tree", &root).unwrap();
    match end {
        CLoc::Factored { tag, entries } => {
            assert_eq!(*tag, CLoc::Single { region: 0, index: 3 });
            assert_eq!(entries[0].1, CLoc::Single { region: 1, index: 2 });
        }
        other => panic!("expected factored end, got {other:?}"),
    }

    // Flat Leaf occupies a tag cell and an int cell.
    let flat_schema =
        std::sync::Arc::new(packedadt::schema::AdtSchema::parse("data Tree = Node Tree Tree | Leaf Int").unwrap());
    let leaf = packedadt::layout::Value::new("Leaf", vec![packedadt::layout::Arg::Int(1)]);
    let (store, root) = store_of_value(&flat_schema, "Tree", &leaf).unwrap();
    let end = end_witness(&store, &flat_schema, "Tree", &root).unwrap();
    assert_eq!(end, CLoc::Single { region: 0, index: 2 });
}

#[test]
fn bridge_constructor_programs_match_layout_serialization() {
    // Interpreter store contents equal the byte serialization under the
    // cell-to-byte mapping (tags one byte, ints eight).
    let opts = FuzzOptions::default();
    let mut checked = 0;
    for i in 0..150 {
        let generated = generate_program(99, i, &opts);
        if generated.consumed {
            continue;
        }
        checked += 1;
        let p = &generated.program;
        typecheck(p).unwrap();
        let (_, it) = interpret(p, &InterpOptions::default()).unwrap();

        let plan = LayoutPlan::new(p.schema.clone(), &generated.datatype).unwrap();
        let bufs = serialize_plain(&plan, &generated.value).unwrap();
        assert_eq!(
            it.store.regions.len(),
            bufs.len(),
            "program {i}: store regions match buffer count"
        );
        for (region, buf) in it.store.regions.iter().zip(&bufs) {
            let mut bytes = Vec::new();
            for cell in region.cells.iter() {
                match cell {
                    Some(Cell::Tag { tag, .. }) => bytes.push(*tag),
                    Some(Cell::Int(v)) => bytes.extend_from_slice(&v.to_le_bytes()),
                    None => panic!("hole in a constructor-only program's store"),
                }
            }
            assert_eq!(&bytes, buf, "program {i}, region {}", region.name);
        }
    }
    assert!(checked > 30, "only {checked} constructor-only programs");
}

#[test]
fn end_witness_agrees_with_skip_value_under_cell_byte_mapping() {
    use packedadt::layout::Counters;
    use packedadt::traversal::skip_value;

    let schemas = [
        ("Tree", "data Tree = Node Tree Tree | Leaf Int"),
        ("List", "data List = Cons Int List | Nil"),
        (
            "NestedList",
            "data List = Cons Int List | Nil\ndata NestedList = NCons Int List NestedList | End",
        ),
    ];
    let mut rng = common::rng(31);
    for (dt, text) in schemas {
        for factored in [false, true] {
            let layout = if factored { "Factored" } else { "Flat" };
            let schema = std::sync::Arc::new(
                packedadt::schema::AdtSchema::parse(&format!("{text}\nlayout {dt} = {layout}")).unwrap(),
            );
            for _ in 0..40 {
                let v = common::random_value(&schema, dt, 5, &mut rng);

                // Cell side.
                let (cell_store, root) = store_of_value(&schema, dt, &v).unwrap();
                let end = end_witness(&cell_store, &schema, dt, &root).unwrap();

                // Byte side.
                let mut store = RegionStore::with_config(1 << 16, true);
                let sroot = serialize(&schema, dt, &v, &mut store).unwrap();
                let plan = LayoutPlan::new(schema.clone(), dt).unwrap();
                let mut bundle = sroot.bundle.cursors.clone();
                let mut counters = Counters::new(plan.width);
                skip_value(&plan, &store, &mut bundle, &mut counters).unwrap();

                // Componentwise: byte offset equals the cell walk priced at
                // one byte per tag and eight per int.
                let cell_ends = flatten_cells(&end);
                assert_eq!(cell_ends.len(), bundle.len());
                for (bufidx, (region, cell_index)) in cell_ends.iter().enumerate() {
                    let cells = &cell_store.regions[*region].cells[..*cell_index];
                    let bytes: u64 = cells
                        .iter()
                        .map(|c| match c {
                            Some(Cell::Tag { .. }) => 1,
                            Some(Cell::Int(_)) => 8,
                            None => panic!("hole below an end witness"),
                        })
                        .sum();
                    let byte_pos = store.linear_offset(bundle[bufidx]).unwrap();
                    assert_eq!(byte_pos, bytes, "{dt} {layout} buffer {bufidx}");
                }
            }
        }
    }
}

/// Bundle-ordered (region, index) pairs of a concrete location.
fn flatten_cells(cloc: &CLoc) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    fn go(c: &CLoc, out: &mut Vec<(usize, usize)>) {
        match c {
            CLoc::Single { region, index } => out.push((*region, *index)),
            CLoc::Factored { tag, entries } => {
                go(tag, out);
                for (_, sub) in entries {
                    go(sub, out);
                }
            }
        }
    }
    go(cloc, &mut out);
    out
}

#[test]
fn erasure_equivalence_on_a_batch() {
    let opts = FuzzOptions::default();
    for i in 0..80 {
        let generated = generate_program(123, i, &opts);
        let p = &generated.program;
        typecheck(p).unwrap();
        let (run, _) = interpret(p, &InterpOptions::default()).unwrap();
        let pure = eval_pure(p).unwrap();
        match (&run.result, &pure) {
            (RtVal::Int(a), RtVal::Int(b)) => assert_eq!(a, b, "program {i}"),
            (RtVal::Located { value: a, .. }, RtVal::Located { value: b, .. }) => {
                assert_eq!(a, b, "program {i}")
            }
            other => panic!("program {i}: result shapes differ: {other:?}"),
        }
    }
}

#[test]
fn fuzz_smoke() {
    let summary = fuzz_type_safety(5, 120).unwrap();
    assert_eq!(summary.passed, 120, "failures: {:?}", summary.failures);
}

#[test]
fn trace_shape_is_json_objects() {
    let p = parse_socal(BUILDTREE).unwrap();
    let (run, _) = interpret(&p, &InterpOptions { collect_trace: true, max_steps: 0 }).unwrap();
    assert!(!run.trace.is_empty());
    let line = serde_json::to_string(&run.trace[0]).unwrap();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    for key in ["rule", "e", "A", "N", "c_delta"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
}
