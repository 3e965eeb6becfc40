//! Shared oracles and generators for the integration suites. Everything
//! here works over the in-memory `Value` form and stays independent of the
//! serialized representation it checks.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use packedadt::layout::{Arg, Value};
use packedadt::schema::{AdtSchema, FieldType};
use packedadt::traversal::{KD_QUERY_BOX, KD_QUERY_POINT};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random schema-conformant value. Recursive constructors are picked
/// while the depth budget lasts, then the value is closed out with the
/// least-recursive constructor available.
pub fn random_value(
    schema: &AdtSchema,
    datatype: &str,
    depth: usize,
    rng: &mut ChaCha8Rng,
) -> Value {
    let dt = schema.get(datatype).expect("datatype exists");
    let packedness = |c: &packedadt::schema::ConstructorDef| {
        c.fields
            .iter()
            .filter(|f| matches!(f, FieldType::Packed(_)))
            .count()
    };
    let ctor = if depth == 0 {
        dt.constructors
            .iter()
            .min_by_key(|c| packedness(c))
            .unwrap()
    } else {
        &dt.constructors[rng.gen_range(0..dt.constructors.len())]
    };
    let args = ctor
        .fields
        .iter()
        .map(|f| match f {
            FieldType::Int => Arg::Int(rng.gen_range(-1_000_000..1_000_000)),
            FieldType::Packed(d) => {
                Arg::Value(random_value(schema, d, depth.saturating_sub(1), rng))
            }
        })
        .collect();
    Value { ctor: ctor.name.clone(), args }
}

fn int(a: &Arg) -> i64 {
    match a {
        Arg::Int(n) => *n,
        Arg::Value(_) => panic!("expected scalar"),
    }
}

fn val(a: &Arg) -> &Value {
    match a {
        Arg::Value(v) => v,
        Arg::Int(_) => panic!("expected packed"),
    }
}

/// Reference fold results, computed structurally over the `Value`.
pub fn reference_fold(suite: &str, pass: &str, v: &Value) -> i64 {
    match (suite, pass) {
        ("List", "length") => {
            let mut n = 0;
            let mut cur = v;
            while cur.ctor == "Cons" {
                n += 1;
                cur = val(&cur.args[1]);
            }
            n
        }
        ("List", "sumList") | ("List", "sumListAcc") => {
            let mut acc = 0i64;
            let mut cur = v;
            while cur.ctor == "Cons" {
                acc = acc.wrapping_add(int(&cur.args[0]));
                cur = val(&cur.args[1]);
            }
            acc
        }
        ("MonoTree", "sumTree") | ("MonoTree", "sumTreeAcc") => sum_leaves(v),
        ("TernaryTree", "sumTree") => sum_leaves(v),
        ("LinearListReduction", "reduce") => {
            let mut acc = 0i64;
            let mut cur = v;
            while cur.ctor == "Cell" {
                acc = acc.wrapping_add(int(&cur.args[0]));
                cur = val(&cur.args[11]);
            }
            acc
        }
        ("ReduceNestedList", "reduce") => {
            let mut acc = 0i64;
            let mut cur = v;
            while cur.ctor == "NCons" {
                acc = acc.wrapping_add(int(&cur.args[0]));
                cur = val(&cur.args[2]);
            }
            acc
        }
        ("KDTree", "countInRange") => kd_leaves(v)
            .into_iter()
            .filter(|p| in_box(&p[0..3]))
            .count() as i64,
        ("KDTree", "sumMassInRange") => kd_leaves(v)
            .into_iter()
            .filter(|p| in_box(&p[0..3]))
            .fold(0i64, |a, p| a.wrapping_add(p[3])),
        ("KDTree", "nearestDist") => kd_leaves(v)
            .into_iter()
            .map(|p| {
                let mut d = 0i64;
                for (c, q) in p[0..3].iter().zip(KD_QUERY_POINT) {
                    d = d.wrapping_add((c - q).wrapping_mul(c - q));
                }
                d
            })
            .min()
            .expect("kd tree has at least one point"),
        other => panic!("no reference fold for {other:?}"),
    }
}

/// Reference map results.
pub fn reference_map(suite: &str, pass: &str, v: &Value) -> Value {
    match (suite, pass) {
        ("List", "add1") => {
            // Iterative to survive long chains.
            let mut heads = Vec::new();
            let mut cur = v;
            while cur.ctor == "Cons" {
                heads.push(int(&cur.args[0]).wrapping_add(1));
                cur = val(&cur.args[1]);
            }
            let mut out = Value::leaf("Nil");
            for h in heads.into_iter().rev() {
                out = Value::new("Cons", vec![Arg::Int(h), Arg::Value(out)]);
            }
            out
        }
        ("MonoTree", "add1Tree") | ("TernaryTree", "add1Tree") => add1_leaves(v),
        other => panic!("no reference map for {other:?}"),
    }
}

fn sum_leaves(v: &Value) -> i64 {
    let mut acc = 0i64;
    let mut stack = vec![v];
    while let Some(v) = stack.pop() {
        for a in &v.args {
            match a {
                Arg::Int(n) => acc = acc.wrapping_add(*n),
                Arg::Value(c) => stack.push(c),
            }
        }
    }
    acc
}

fn add1_leaves(v: &Value) -> Value {
    let args = v
        .args
        .iter()
        .map(|a| match a {
            Arg::Int(n) => Arg::Int(n.wrapping_add(1)),
            Arg::Value(c) => Arg::Value(add1_leaves(c)),
        })
        .collect();
    Value { ctor: v.ctor.clone(), args }
}

/// All `[x, y, z, mass]` leaves of a KDTree value, in preorder.
pub fn kd_leaves(v: &Value) -> Vec<[i64; 4]> {
    let mut out = Vec::new();
    let mut stack = vec![v];
    while let Some(v) = stack.pop() {
        if v.ctor == "Leaf" {
            out.push([
                int(&v.args[0]),
                int(&v.args[1]),
                int(&v.args[2]),
                int(&v.args[3]),
            ]);
        } else {
            stack.push(val(&v.args[10]));
            stack.push(val(&v.args[9]));
        }
    }
    out
}

fn in_box(p: &[i64]) -> bool {
    for axis in 0..3 {
        let (lo, hi) = KD_QUERY_BOX[axis];
        if p[axis] < lo || p[axis] > hi {
            return false;
        }
    }
    true
}
