//! Round-trip properties over randomized schema-conformant values.

mod common;

use std::sync::Arc;

use proptest::prelude::*;

use packedadt::layout::{
    deserialize, export_container, import_container, serialize, serialize_plain, serialize_with,
    LayoutPlan, SerializeOptions,
};
use packedadt::region::RegionStore;
use packedadt::schema::AdtSchema;

const SCHEMAS: [(&str, &str); 3] = [
    ("Tree", "data Tree = Node Tree Tree | Leaf Int"),
    ("List", "data List = Cons Int List | Nil"),
    (
        "NestedList",
        "data List = Cons Int List | Nil\ndata NestedList = NCons Int List NestedList | End",
    ),
];

fn schema_for(idx: usize, factored: bool) -> Arc<AdtSchema> {
    let (dt, text) = SCHEMAS[idx];
    let layout = if factored { "Factored" } else { "Flat" };
    Arc::new(AdtSchema::parse(&format!("{text}\nlayout {dt} = {layout}")).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn roundtrip_all_layouts_and_records(
        seed in any::<u64>(),
        depth in 0usize..9,
        schema_idx in 0usize..3,
        factored in any::<bool>(),
        ra in any::<bool>(),
        period in prop::option::of(1u32..6),
    ) {
        let schema = schema_for(schema_idx, factored);
        let dt = SCHEMAS[schema_idx].0;
        let v = common::random_value(&schema, dt, depth, &mut common::rng(seed));
        // 32-byte chunks force crossings for anything non-trivial.
        let mut store = RegionStore::with_config(32, true);
        let opts = SerializeOptions { random_access: ra, indirection_period: period };
        let root = serialize_with(&schema, dt, &v, &mut store, &opts).unwrap();
        prop_assert_eq!(deserialize(&root, &store).unwrap(), v);
    }

    #[test]
    fn flat_and_factored_agree(seed in any::<u64>(), depth in 0usize..9, schema_idx in 0usize..3) {
        let dt = SCHEMAS[schema_idx].0;
        let flat = schema_for(schema_idx, false);
        let fact = schema_for(schema_idx, true);
        let v = common::random_value(&flat, dt, depth, &mut common::rng(seed));

        let mut s1 = RegionStore::with_config(64, true);
        let r1 = serialize(&flat, dt, &v, &mut s1).unwrap();
        let mut s2 = RegionStore::with_config(64, true);
        let r2 = serialize(&fact, dt, &v, &mut s2).unwrap();
        prop_assert_eq!(deserialize(&r1, &s1).unwrap(), deserialize(&r2, &s2).unwrap());
    }

    #[test]
    fn buffer_lengths_follow_the_layout(seed in any::<u64>(), depth in 0usize..8) {
        // Factored tag stream holds one byte per node; a plain flat buffer
        // holds 1 + 8 * scalar-arity bytes per node.
        let fact = schema_for(0, true);
        let v = common::random_value(&fact, "Tree", depth, &mut common::rng(seed));
        let plan = LayoutPlan::new(fact.clone(), "Tree").unwrap();
        let bufs = serialize_plain(&plan, &v).unwrap();
        prop_assert_eq!(bufs[0].len() as u64, v.node_count());
        for &b in &bufs[0] {
            prop_assert!(b < 2, "reserved or invalid tag {} in tag stream", b);
        }

        let flat = schema_for(0, false);
        let flat_plan = LayoutPlan::new(flat, "Tree").unwrap();
        let flat_bufs = serialize_plain(&flat_plan, &v).unwrap();
        let mut expect = 0u64;
        let mut stack = vec![&v];
        while let Some(n) = stack.pop() {
            let scalars = n.args.iter().filter(|a| matches!(a, packedadt::layout::Arg::Int(_))).count();
            expect += 1 + 8 * scalars as u64;
            for a in &n.args {
                if let packedadt::layout::Arg::Value(c) = a {
                    stack.push(c);
                }
            }
        }
        prop_assert_eq!(flat_bufs[0].len() as u64, expect);
    }

    #[test]
    fn container_roundtrip(seed in any::<u64>(), depth in 0usize..8, factored in any::<bool>()) {
        let schema = schema_for(2, factored);
        let v = common::random_value(&schema, "NestedList", depth, &mut common::rng(seed));
        let mut store = RegionStore::with_config(32, true);
        let root = serialize(&schema, "NestedList", &v, &mut store).unwrap();
        let bytes = export_container(&root, &store).unwrap();
        let imported = import_container(&mut store, &schema, &bytes).unwrap();
        prop_assert_eq!(imported.datatype.as_str(), "NestedList");
        prop_assert_eq!(deserialize(&imported, &store).unwrap(), v);
        prop_assert_eq!(export_container(&imported, &store).unwrap(), bytes);
    }
}

#[test]
fn release_frees_owned_regions_once() {
    let schema = schema_for(0, true);
    let v = common::random_value(&schema, "Tree", 4, &mut common::rng(9));
    let mut store = RegionStore::new();
    let root = serialize(&schema, "Tree", &v, &mut store).unwrap();
    let regions = root.regions.clone();
    for &r in &regions {
        assert_eq!(store.refcount(r).unwrap(), 1);
    }
    root.release(&mut store).unwrap();
    for &r in &regions {
        assert!(!store.is_alive(r));
    }
    // Idempotent.
    root.release(&mut store).unwrap();
}

#[test]
fn shared_subtrees_survive_source_release() {
    let schema = schema_for(0, true);
    let v = common::random_value(&schema, "Tree", 6, &mut common::rng(5));
    let mut store = RegionStore::with_config(64, true);
    let opts = SerializeOptions { random_access: false, indirection_period: Some(2) };
    let root = serialize_with(&schema, "Tree", &v, &mut store, &opts).unwrap();
    // Shared sub-roots were already released by the writer; the indirection
    // outlinks must be keeping them alive.
    assert_eq!(deserialize(&root, &store).unwrap(), v);
    root.release(&mut store).unwrap();
}
