//! The builtin pass catalog: the benchmark suites' schemas and passes.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::schema::{AdtSchema, Layout};

use super::{AccFn, ChildRunner, Clause, ClauseEval, CombineFn, GuidedFn, PassDef, PassKind, RewriteFn, TraversalError};

/// Inclusive per-axis query box for the KDTree range passes, within the
/// generator's [0, 2^20) coordinate space.
pub const KD_QUERY_BOX: [(i64, i64); 3] = [(262_144, 786_432), (262_144, 786_432), (262_144, 786_432)];

/// Query point for `nearestDist`.
pub const KD_QUERY_POINT: [i64; 3] = [400_000, 220_000, 650_000];

pub const LIST_SCHEMA: &str = "data List = Cons Int List | Nil";
pub const MONOTREE_SCHEMA: &str = "data Tree = Node Tree Tree | Leaf Int";
pub const TERNARYTREE_SCHEMA: &str = "data Tree3 = Node3 Tree3 Tree3 Tree3 | Leaf3 Int";
pub const LINEARLIST_SCHEMA: &str =
    "data LinearList = Cell Int Int Int Int Int Int Int Int Int Int Int LinearList | End";
pub const NESTEDLIST_SCHEMA: &str =
    "data List = Cons Int List | Nil\ndata NestedList = NCons Int List NestedList | End";
pub const KDTREE_SCHEMA: &str =
    "data KDTree = Node Int Int Int Int Int Int Int Int Int KDTree KDTree | Leaf Int Int Int Int";

/// A pass bound to its suite's schema text.
#[derive(Clone)]
pub struct RegisteredPass {
    pub suite: String,
    pub datatype: String,
    pub schema_text: String,
    pub pass: PassDef,
}

impl RegisteredPass {
    /// The suite schema with the primary datatype's layout set. Nested
    /// datatypes keep their declared layouts (the inner `List` of
    /// `NestedList` stays flat).
    pub fn schema_for(&self, layout: Layout) -> Arc<AdtSchema> {
        let text = format!("{}\nlayout {} = {}", self.schema_text, self.datatype, layout);
        Arc::new(AdtSchema::parse(&text).expect("builtin schema parses"))
    }
}

pub struct PassRegistry {
    passes: BTreeMap<(String, String), RegisteredPass>,
}

impl PassRegistry {
    pub fn lookup(&self, suite: &str, pass: &str) -> Option<&RegisteredPass> {
        self.passes.get(&(suite.to_string(), pass.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &RegisteredPass> {
        self.passes.values()
    }

    pub fn suites(&self) -> Vec<String> {
        let mut names: Vec<String> = self.passes.keys().map(|(s, _)| s.clone()).collect();
        names.dedup();
        names
    }
}

fn combine(used: Vec<bool>, f: impl Fn(&[i64], &[i64]) -> i64 + Send + Sync + 'static) -> Clause {
    Clause { used, eval: ClauseEval::Combine(Arc::new(f) as CombineFn) }
}

fn acc(used: Vec<bool>, f: impl Fn(i64, &[i64]) -> i64 + Send + Sync + 'static) -> Clause {
    Clause { used, eval: ClauseEval::Acc(Arc::new(f) as AccFn) }
}

fn guided(
    used: Vec<bool>,
    f: impl Fn(&[i64], &mut dyn ChildRunner) -> Result<i64, TraversalError> + Send + Sync + 'static,
) -> Clause {
    Clause { used, eval: ClauseEval::Guided(Arc::new(f) as GuidedFn) }
}

fn map_clause(used: Vec<bool>, f: impl Fn(usize, i64) -> i64 + Send + Sync + 'static) -> Clause {
    Clause { used, eval: ClauseEval::Map(Arc::new(f) as RewriteFn) }
}

fn fold_pass(name: &str, datatype: &str, initial: i64, tables: Vec<(&str, Vec<Clause>)>) -> PassDef {
    PassDef {
        name: name.to_string(),
        datatype: datatype.to_string(),
        kind: PassKind::Fold,
        initial,
        clauses: tables
            .into_iter()
            .map(|(dt, t)| (dt.to_string(), t))
            .collect::<HashMap<_, _>>(),
    }
}

fn map_pass(name: &str, datatype: &str, tables: Vec<(&str, Vec<Clause>)>) -> PassDef {
    PassDef {
        name: name.to_string(),
        datatype: datatype.to_string(),
        kind: PassKind::Map,
        initial: 0,
        clauses: tables
            .into_iter()
            .map(|(dt, t)| (dt.to_string(), t))
            .collect::<HashMap<_, _>>(),
    }
}

/// Registry of every suite's passes, keyed by (suite, pass).
pub fn builtin_passes() -> PassRegistry {
    let mut passes = BTreeMap::new();
    let mut add = |suite: &str, schema_text: &str, datatype: &str, pass: PassDef| {
        passes.insert(
            (suite.to_string(), pass.name.clone()),
            RegisteredPass {
                suite: suite.to_string(),
                datatype: datatype.to_string(),
                schema_text: schema_text.to_string(),
                pass,
            },
        );
    };

    // List: Cons = [head, tail], Nil = [].
    add(
        "List",
        LIST_SCHEMA,
        "List",
        map_pass(
            "add1",
            "List",
            vec![(
                "List",
                vec![map_clause(vec![true, true], |_, v| v.wrapping_add(1)), map_clause(vec![], |_, v| v)],
            )],
        ),
    );
    add(
        "List",
        LIST_SCHEMA,
        "List",
        fold_pass(
            "length",
            "List",
            0,
            vec![(
                "List",
                vec![
                    combine(vec![false, true], |_, ch| 1 + ch[0]),
                    combine(vec![], |_, _| 0),
                ],
            )],
        ),
    );
    add(
        "List",
        LIST_SCHEMA,
        "List",
        fold_pass(
            "sumList",
            "List",
            0,
            vec![(
                "List",
                vec![
                    combine(vec![true, true], |s, ch| s[0].wrapping_add(ch[0])),
                    combine(vec![], |_, _| 0),
                ],
            )],
        ),
    );
    add(
        "List",
        LIST_SCHEMA,
        "List",
        fold_pass(
            "sumListAcc",
            "List",
            0,
            vec![(
                "List",
                vec![acc(vec![true, true], |a, s| a.wrapping_add(s[0])), acc(vec![], |a, _| a)],
            )],
        ),
    );

    // MonoTree: Node = [left, right], Leaf = [val].
    add(
        "MonoTree",
        MONOTREE_SCHEMA,
        "Tree",
        map_pass(
            "add1Tree",
            "Tree",
            vec![(
                "Tree",
                vec![map_clause(vec![true, true], |_, v| v), map_clause(vec![true], |_, v| v.wrapping_add(1))],
            )],
        ),
    );
    add(
        "MonoTree",
        MONOTREE_SCHEMA,
        "Tree",
        fold_pass(
            "sumTree",
            "Tree",
            0,
            vec![(
                "Tree",
                vec![
                    combine(vec![true, true], |_, ch| ch[0].wrapping_add(ch[1])),
                    combine(vec![true], |s, _| s[0]),
                ],
            )],
        ),
    );
    add(
        "MonoTree",
        MONOTREE_SCHEMA,
        "Tree",
        fold_pass(
            "sumTreeAcc",
            "Tree",
            0,
            vec![(
                "Tree",
                vec![acc(vec![true, true], |a, _| a), acc(vec![true], |a, s| a.wrapping_add(s[0]))],
            )],
        ),
    );

    // TernaryTree: Node3 = [c0, c1, c2], Leaf3 = [val].
    add(
        "TernaryTree",
        TERNARYTREE_SCHEMA,
        "Tree3",
        map_pass(
            "add1Tree",
            "Tree3",
            vec![(
                "Tree3",
                vec![
                    map_clause(vec![true, true, true], |_, v| v),
                    map_clause(vec![true], |_, v| v.wrapping_add(1)),
                ],
            )],
        ),
    );
    add(
        "TernaryTree",
        TERNARYTREE_SCHEMA,
        "Tree3",
        fold_pass(
            "sumTree",
            "Tree3",
            0,
            vec![(
                "Tree3",
                vec![
                    combine(vec![true, true, true], |_, ch| {
                        ch[0].wrapping_add(ch[1]).wrapping_add(ch[2])
                    }),
                    combine(vec![true], |s, _| s[0]),
                ],
            )],
        ),
    );

    // LinearListReduction: Cell = [f0..f10, tail], End = []. The reduction
    // consumes field 0 only; the other ten scalars are dead.
    let mut cell_used = vec![false; 12];
    cell_used[0] = true;
    cell_used[11] = true;
    add(
        "LinearListReduction",
        LINEARLIST_SCHEMA,
        "LinearList",
        fold_pass(
            "reduce",
            "LinearList",
            0,
            vec![(
                "LinearList",
                vec![acc(cell_used, |a, s| a.wrapping_add(s[0])), acc(vec![], |a, _| a)],
            )],
        ),
    );

    // ReduceNestedList: NCons = [payload, inner list, tail]. The inner list
    // is dead; in the factored layout its buffer is never read.
    add(
        "ReduceNestedList",
        NESTEDLIST_SCHEMA,
        "NestedList",
        fold_pass(
            "reduce",
            "NestedList",
            0,
            vec![(
                "NestedList",
                vec![acc(vec![true, false, true], |a, s| a.wrapping_add(s[0])), acc(vec![], |a, _| a)],
            )],
        ),
    );

    // KDTree: Node = [dim, split, minx, miny, minz, maxx, maxy, maxz, mass,
    // left, right], Leaf = [x, y, z, mass].
    add(
        "KDTree",
        KDTREE_SCHEMA,
        "KDTree",
        fold_pass(
            "countInRange",
            "KDTree",
            0,
            vec![(
                "KDTree",
                vec![
                    guided(
                        vec![false, false, true, true, true, true, true, true, false, true, true],
                        |s, ch| {
                            let (min, max) = (&s[2..5], &s[5..8]);
                            if boxes_disjoint(min, max) {
                                return Ok(0);
                            }
                            Ok(ch.run(0)? + ch.run(1)?)
                        },
                    ),
                    guided(vec![true, true, true, false], |s, _| {
                        Ok(point_in_box(&s[0..3]) as i64)
                    }),
                ],
            )],
        ),
    );
    add(
        "KDTree",
        KDTREE_SCHEMA,
        "KDTree",
        fold_pass(
            "sumMassInRange",
            "KDTree",
            0,
            vec![(
                "KDTree",
                vec![
                    guided(
                        vec![false, false, true, true, true, true, true, true, true, true, true],
                        |s, ch| {
                            let (min, max, mass) = (&s[2..5], &s[5..8], s[8]);
                            if boxes_disjoint(min, max) {
                                return Ok(0);
                            }
                            if box_contained(min, max) {
                                return Ok(mass);
                            }
                            Ok(ch.run(0)?.wrapping_add(ch.run(1)?))
                        },
                    ),
                    guided(vec![true, true, true, true], |s, _| {
                        Ok(if point_in_box(&s[0..3]) { s[3] } else { 0 })
                    }),
                ],
            )],
        ),
    );
    add(
        "KDTree",
        KDTREE_SCHEMA,
        "KDTree",
        fold_pass(
            "nearestDist",
            "KDTree",
            0,
            vec![(
                "KDTree",
                vec![
                    guided(
                        vec![true, true, false, false, false, false, false, false, false, true, true],
                        |s, ch| {
                            let (dim, split) = (s[0] as usize, s[1]);
                            let q = KD_QUERY_POINT[dim % 3];
                            let near = if q <= split { 0 } else { 1 };
                            let mut best = ch.run(near)?;
                            let plane = (q - split).wrapping_mul(q - split);
                            if plane < best {
                                best = best.min(ch.run(1 - near)?);
                            }
                            Ok(best)
                        },
                    ),
                    guided(vec![true, true, true, false], |s, _| {
                        let mut d = 0i64;
                        for (a, q) in s[0..3].iter().zip(KD_QUERY_POINT) {
                            d = d.wrapping_add((a - q).wrapping_mul(a - q));
                        }
                        Ok(d)
                    }),
                ],
            )],
        ),
    );

    PassRegistry { passes }
}

fn boxes_disjoint(min: &[i64], max: &[i64]) -> bool {
    for axis in 0..3 {
        let (lo, hi) = KD_QUERY_BOX[axis];
        if max[axis] < lo || min[axis] > hi {
            return true;
        }
    }
    false
}

fn box_contained(min: &[i64], max: &[i64]) -> bool {
    for axis in 0..3 {
        let (lo, hi) = KD_QUERY_BOX[axis];
        if min[axis] < lo || max[axis] > hi {
            return false;
        }
    }
    true
}

fn point_in_box(p: &[i64]) -> bool {
    for axis in 0..3 {
        let (lo, hi) = KD_QUERY_BOX[axis];
        if p[axis] < lo || p[axis] > hi {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_contents() {
        let reg = builtin_passes();
        assert!(reg.lookup("MonoTree", "sumTree").is_some());
        assert!(reg.lookup("List", "add1").is_some());
        assert!(reg.lookup("KDTree", "nearestDist").is_some());
        assert!(reg.lookup("KDTree", "fmmPotential").is_none());
        let monotree = reg.lookup("MonoTree", "sumTree").unwrap();
        assert_eq!(monotree.pass.kind, PassKind::Fold);
        assert_eq!(reg.lookup("List", "add1").unwrap().pass.kind, PassKind::Map);
    }

    #[test]
    fn llr_dead_fraction_is_mask_derived() {
        let reg = builtin_passes();
        let p = &reg.lookup("LinearListReduction", "reduce").unwrap().pass;
        // 10 of the Cell's 12 fields are dead; End contributes none.
        let expect = 10.0 / 12.0;
        assert!((p.dead_fraction() - expect).abs() < 1e-12);
    }

    #[test]
    fn schema_for_sets_primary_layout_only() {
        let reg = builtin_passes();
        let p = reg.lookup("ReduceNestedList", "reduce").unwrap();
        let s = p.schema_for(Layout::Factored);
        assert_eq!(s.get("NestedList").unwrap().layout, Layout::Factored);
        assert_eq!(s.get("List").unwrap().layout, Layout::Flat);
    }
}
