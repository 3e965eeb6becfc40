//! Type-safety fuzzing: generate well-typed programs by construction, then
//! check that none gets stuck, that store well-formedness holds after every
//! step, and that the store semantics agrees with plain substitution
//! semantics.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::layout::{Arg, Value};
use crate::schema::{AdtSchema, FieldType, Layout};

use super::ast::*;
use super::check::typecheck;
use super::interp::{run, read_store_value, Interp, InterpOptions, RtVal};
use super::wf::check_well_formed;
use super::SocalError;

#[derive(Debug, Clone, Default)]
pub struct FuzzSummary {
    pub count: u32,
    pub passed: u32,
    pub failures: Vec<String>,
}

const TREE_SCHEMA: &str = "(data Tree (Node Tree Tree) (Leaf Int))";
const LIST_SCHEMA: &str = "(data List (Cons Int List) (Nil))";

/// Program generator knobs. `break_after_dependency` moves an `after`
/// binding before the value it depends on, a negative control the checker
/// must reject.
#[derive(Debug, Clone, Default)]
pub struct FuzzOptions {
    pub break_after_dependency: bool,
    pub check_wf_each_step: bool,
}

struct Gen {
    rng: ChaCha8Rng,
    fresh: u64,
}

impl Gen {
    fn name(&mut self, base: &str) -> String {
        self.fresh += 1;
        format!("{base}{}", self.fresh)
    }

    fn random_tree(&mut self, depth: usize) -> Value {
        if depth == 0 || self.rng.gen_bool(0.3) {
            Value::new("Leaf", vec![Arg::Int(self.rng.gen_range(-100..100))])
        } else {
            Value::new(
                "Node",
                vec![
                    Arg::Value(self.random_tree(depth - 1)),
                    Arg::Value(self.random_tree(depth - 1)),
                ],
            )
        }
    }

    fn random_list(&mut self, len: usize) -> Value {
        let mut v = Value::leaf("Nil");
        for _ in 0..len {
            v = Value::new(
                "Cons",
                vec![Arg::Int(self.rng.gen_range(-100..100)), Arg::Value(v)],
            );
        }
        v
    }
}

/// Build a straight-line expression writing `value` at `dest`, following
/// the location discipline for the layout, and continue with `k` applied to
/// the variable holding the finished value.
fn emit_build(
    g: &mut Gen,
    schema: &AdtSchema,
    datatype: &str,
    value: &Value,
    dest: &str,
    broken_after: bool,
    k: Box<dyn FnOnce(&mut Gen, String) -> Expr + '_>,
) -> Expr {
    let dt = schema.get(datatype).expect("datatype");
    let ctor = dt.constructor(&value.ctor).expect("ctor").clone();
    let scalars: Vec<i64> = value
        .args
        .iter()
        .filter_map(|a| match a {
            Arg::Int(n) => Some(*n),
            _ => None,
        })
        .collect();
    let packed: Vec<(usize, &Value)> = value
        .args
        .iter()
        .enumerate()
        .filter_map(|(j, a)| match a {
            Arg::Value(v) => Some((j, v)),
            _ => None,
        })
        .collect();

    let result_var = g.name("v");
    let make = |children: Vec<String>| -> Expr {
        let mut args: Vec<Expr> = scalars.iter().map(|n| Expr::Int(*n)).collect();
        args.extend(children.into_iter().map(Expr::Var));
        Expr::Make { ctor: ctor.name.clone(), loc: dest.to_string(), args }
    };

    if packed.is_empty() {
        let body = k(g, result_var.clone());
        return Expr::Let {
            var: result_var,
            ty: Ty::Adt(datatype.to_string()),
            loc: Some(dest.to_string()),
            rhs: Box::new(make(Vec::new())),
            body: Box::new(body),
        };
    }

    match dt.layout {
        Layout::Flat => {
            // Reserve cells for the tag and scalars, then write children in
            // order, each after the previous.
            let mut locs = Vec::new();
            let mut prev = dest.to_string();
            for _ in 0..=scalars.len() {
                let l = g.name("l");
                locs.push((l.clone(), prev.clone()));
                prev = l;
            }
            let first_child_loc = prev;
            build_children_flat(
                g,
                schema,
                datatype,
                &ctor,
                packed,
                first_child_loc,
                broken_after,
                locs,
                dest.to_string(),
                make,
                result_var,
                k,
            )
        }
        Layout::Factored => {
            let ld = g.name("ld");
            let lda = g.name("lda");
            // Project and advance this constructor's own scalar entries; the
            // other entries pass through unchanged.
            let shape = crate::schema::buffer_shape(schema, datatype).expect("shape");
            let mut proj_binds: Vec<(String, LocExpr)> = vec![(ld.clone(), LocExpr::ProjTag(dest.to_string()))];
            let mut intro_entries: Vec<((String, usize), String)> = Vec::new();
            for e in &shape.entries {
                let li = g.name("li");
                proj_binds.push((
                    li.clone(),
                    LocExpr::ProjField { ctor: e.ctor.clone(), field: e.field, loc: dest.to_string() },
                ));
                if e.ctor == ctor.name {
                    let lia = g.name("lia");
                    proj_binds.push((lia.clone(), LocExpr::PlusOne(li.clone())));
                    intro_entries.push(((e.ctor.clone(), e.field), lia));
                } else {
                    intro_entries.push(((e.ctor.clone(), e.field), li));
                }
            }
            proj_binds.push((lda.clone(), LocExpr::PlusOne(ld.clone())));
            let lva = g.name("lva");
            proj_binds.push((
                lva.clone(),
                LocExpr::IntroLocVec { tag_loc: lda, entries: intro_entries },
            ));

            let inner = build_children_factored(
                g,
                schema,
                datatype,
                packed,
                lva,
                broken_after,
                dest.to_string(),
                make,
                result_var,
                k,
            );
            proj_binds
                .into_iter()
                .rev()
                .fold(inner, |body, (loc, rhs)| Expr::LetLoc { loc, rhs, body: Box::new(body) })
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn build_children_flat(
    g: &mut Gen,
    schema: &AdtSchema,
    datatype: &str,
    ctor: &crate::schema::ConstructorDef,
    packed: Vec<(usize, &Value)>,
    first_loc: String,
    broken_after: bool,
    locs: Vec<(String, String)>,
    dest: String,
    make: impl FnOnce(Vec<String>) -> Expr,
    result_var: String,
    k: Box<dyn FnOnce(&mut Gen, String) -> Expr + '_>,
) -> Expr {
    // Children chained by `after`; the write then names every child.
    let mut child_locs = vec![first_loc.clone()];
    for _ in 1..packed.len() {
        child_locs.push(g.name("la"));
    }
    let child_dts: Vec<String> = packed
        .iter()
        .map(|(j, _)| match &ctor.fields[*j] {
            FieldType::Packed(d) => d.clone(),
            _ => unreachable!(),
        })
        .collect();

    // Innermost: the constructor write, then the continuation.
    let mut child_vars = Vec::new();
    for _ in &packed {
        child_vars.push(g.name("c"));
    }
    let write = Expr::Let {
        var: result_var.clone(),
        ty: Ty::Adt(datatype.to_string()),
        loc: Some(dest.clone()),
        rhs: Box::new(make(child_vars.clone())),
        body: Box::new(k(g, result_var)),
    };

    // Wrap children from last to first.
    let mut body = write;
    for i in (0..packed.len()).rev() {
        let child_expr = emit_build(
            g,
            schema,
            &child_dts[i],
            packed[i].1,
            &child_locs[i].clone(),
            broken_after,
            Box::new(|_, v| Expr::Var(v)),
        );
        body = Expr::Let {
            var: child_vars[i].clone(),
            ty: Ty::Adt(child_dts[i].clone()),
            loc: Some(child_locs[i].clone()),
            rhs: Box::new(child_expr),
            body: Box::new(body),
        };
        if i > 0 {
            // Location of child i comes after child i-1. The negative
            // control hoists this binding above the dependency, which makes
            // the checker see an unwritten source.
            body = Expr::LetLoc {
                loc: child_locs[i].clone(),
                rhs: LocExpr::After { datatype: child_dts[i - 1].clone(), loc: child_locs[i - 1].clone() },
                body: Box::new(body),
            };
        }
    }
    if broken_after && packed.len() > 1 {
        // Rebuild with the after-binding hoisted out of order.
        // Simplest robust form: bind the second child's location before the
        // first child is written.
        let bad_loc = g.name("bad");
        return Expr::LetLoc {
            loc: bad_loc.clone(),
            rhs: LocExpr::After { datatype: child_dts[0].clone(), loc: child_locs[0].clone() },
            body: Box::new(body),
        };
    }
    let chain = body;
    locs.into_iter()
        .rev()
        .fold(chain, |body, (loc, base)| Expr::LetLoc {
            loc,
            rhs: LocExpr::PlusOne(base),
            body: Box::new(body),
        })
}

#[allow(clippy::too_many_arguments)]
fn build_children_factored(
    g: &mut Gen,
    schema: &AdtSchema,
    datatype: &str,
    packed: Vec<(usize, &Value)>,
    first_loc: String,
    broken_after: bool,
    dest: String,
    make: impl FnOnce(Vec<String>) -> Expr,
    result_var: String,
    k: Box<dyn FnOnce(&mut Gen, String) -> Expr + '_>,
) -> Expr {
    let mut child_locs = vec![first_loc];
    for _ in 1..packed.len() {
        child_locs.push(g.name("lvb"));
    }
    let mut child_vars = Vec::new();
    for _ in &packed {
        child_vars.push(g.name("c"));
    }
    let write = Expr::Let {
        var: result_var.clone(),
        ty: Ty::Adt(datatype.to_string()),
        loc: Some(dest.clone()),
        rhs: Box::new(make(child_vars.clone())),
        body: Box::new(k(g, result_var)),
    };
    let mut body = write;
    for i in (0..packed.len()).rev() {
        let child_expr = emit_build(
            g,
            schema,
            datatype,
            packed[i].1,
            &child_locs[i].clone(),
            broken_after,
            Box::new(|_, v| Expr::Var(v)),
        );
        body = Expr::Let {
            var: child_vars[i].clone(),
            ty: Ty::Adt(datatype.to_string()),
            loc: Some(child_locs[i].clone()),
            rhs: Box::new(child_expr),
            body: Box::new(body),
        };
        if i > 0 {
            body = Expr::LetLoc {
                loc: child_locs[i].clone(),
                rhs: LocExpr::After { datatype: datatype.to_string(), loc: child_locs[i - 1].clone() },
                body: Box::new(body),
            };
        }
    }
    if broken_after && packed.len() > 1 {
        let bad = g.name("bad");
        return Expr::LetLoc {
            loc: bad,
            rhs: LocExpr::After { datatype: datatype.to_string(), loc: child_locs[0].clone() },
            body: Box::new(body),
        };
    }
    body
}

/// Consumer functions: a recursive sum over each schema, layout-agnostic.
fn consumer_text(schema: &str) -> &'static str {
    match schema {
        s if s.contains("Tree") => {
            "(fun sumtree (locs (in l Tree)) (args (t Tree l)) (ret Int)\n\
             (case t ((Node (a la) (b lb)) (+ (call sumtree (la) (a)) (call sumtree (lb) (b)))) ((Leaf i) i)))"
        }
        _ => {
            "(fun sumlist (locs (in l List)) (args (t List l)) (ret Int)\n\
             (case t ((Cons h (rest lr)) (+ h (call sumlist (lr) (rest)))) ((Nil) 0)))"
        }
    }
}

/// One generated program: its source-equivalent AST plus the value it
/// builds.
pub struct GeneratedProgram {
    pub program: Program,
    pub value: Value,
    pub datatype: String,
    pub consumed: bool,
}

/// Generate a well-typed program by construction.
pub fn generate_program(seed: u64, index: u32, opts: &FuzzOptions) -> GeneratedProgram {
    let mut g = Gen { rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64)), fresh: 0 };
    let use_tree = g.rng.gen_bool(0.5);
    let factored = g.rng.gen_bool(0.5);
    let consume = g.rng.gen_bool(0.5);
    let (schema_sexpr, datatype) = if use_tree { (TREE_SCHEMA, "Tree") } else { (LIST_SCHEMA, "List") };
    let layout = if factored { "Factored" } else { "Flat" };

    let value = if use_tree {
        let d = g.rng.gen_range(0..4);
        g.random_tree(d)
    } else {
        let n = g.rng.gen_range(0..6);
        g.random_list(n)
    };

    // Parse the header (schema + consumer) to get a Program skeleton, then
    // synthesize main.
    let consumer = if consume { consumer_text(schema_sexpr) } else { "" };
    let header = format!(
        "{schema_sexpr}\n(layout {datatype} {layout})\n{consumer}\n(main 0)"
    );
    let mut program = super::parse::parse_socal(&header).expect("generated header parses");

    let region = g.name("r");
    let lv = g.name("lv");
    let dt = datatype.to_string();
    let schema = program.schema.clone();
    let value_for_main = value.clone();
    let consume_fn = if use_tree { "sumtree" } else { "sumlist" };
    let build = emit_build(
        &mut g,
        &schema,
        &dt,
        &value_for_main,
        &lv.clone(),
        opts.break_after_dependency,
        Box::new(|_, v| {
            if consume {
                Expr::Call {
                    func: consume_fn.to_string(),
                    loc_args: vec![lv.clone()],
                    args: vec![Expr::Var(v)],
                }
            } else {
                Expr::Var(v)
            }
        }),
    );
    let start = Expr::LetLoc {
        loc: lv.clone(),
        rhs: LocExpr::Start(region.clone()),
        body: Box::new(build),
    };
    program.main = Expr::LetRegion {
        region,
        datatype: factored.then(|| dt.clone()),
        body: Box::new(start),
    };
    GeneratedProgram { program, value, datatype: dt, consumed: consume }
}

fn pure_sum(v: &Value) -> i64 {
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

/// Run `count` generated programs through the full gauntlet: typecheck,
/// small-step with per-step store well-formedness, and erasure
/// equivalence against substitution semantics.
pub fn fuzz_type_safety(seed: u64, count: u32) -> Result<FuzzSummary, SocalError> {
    if count == 0 {
        return Err(SocalError::InvalidArgument("count must be at least 1".into()));
    }
    let opts = FuzzOptions { break_after_dependency: false, check_wf_each_step: true };
    let mut summary = FuzzSummary { count, ..Default::default() };
    for i in 0..count {
        match run_one(seed, i, &opts) {
            Ok(()) => summary.passed += 1,
            Err(msg) => {
                if summary.failures.len() < 16 {
                    summary.failures.push(format!("program {i}: {msg}"));
                }
            }
        }
    }
    Ok(summary)
}

fn run_one(seed: u64, index: u32, opts: &FuzzOptions) -> Result<(), String> {
    let generated = generate_program(seed, index, opts);
    let p = &generated.program;
    typecheck(p).map_err(|e| format!("typecheck rejected a generated program: {e}"))?;

    let mut it = Interp::new(p);
    let iopts = InterpOptions { collect_trace: false, max_steps: 2_000_000 };
    let mut wf_failure: Option<String> = None;
    let outcome = {
        let mut cb = |it: &Interp<'_>| {
            if opts.check_wf_each_step && wf_failure.is_none() {
                let report = check_well_formed(it);
                if let Some(v) = report.violation {
                    wf_failure = Some(format!("wf violation {} at {}", v.clause, v.subject));
                }
            }
            Ok(())
        };
        run(&mut it, &iopts, Some(&mut cb)).map_err(|e| format!("stuck: {e}"))?
    };
    if let Some(wf) = wf_failure {
        return Err(wf);
    }

    // Erasure equivalence.
    match (&outcome.result, generated.consumed) {
        (RtVal::Int(got), true) => {
            let want = pure_sum(&generated.value);
            if *got != want {
                return Err(format!("sum mismatch: store {got}, substitution {want}"));
            }
        }
        (RtVal::Located { value, datatype, cloc }, false) => {
            if *value != generated.value {
                return Err("materialized value differs from the generated one".into());
            }
            // Cross-check through an independent read.
            let reread = read_store_value(&it.store, &p.schema, datatype, cloc)
                .map_err(|e| format!("reread failed: {e}"))?;
            if reread != generated.value {
                return Err("store contents differ from the generated value".into());
            }
        }
        _ => return Err("unexpected result shape".into()),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_count_is_invalid() {
        assert!(matches!(fuzz_type_safety(0, 0), Err(SocalError::InvalidArgument(_))));
    }

    #[test]
    fn small_fuzz_run_passes() {
        let s = fuzz_type_safety(0, 60).unwrap();
        assert_eq!(s.passed, 60, "failures: {:?}", s.failures);
    }

    #[test]
    fn broken_after_dependency_is_rejected() {
        let opts = FuzzOptions { break_after_dependency: true, check_wf_each_step: false };
        let mut rejected = 0;
        let mut applicable = 0;
        for i in 0..60 {
            let generated = generate_program(7, i, &opts);
            // Only constructors with two or more packed children have an
            // after-binding to hoist, so only Node-rooted trees apply.
            if generated.datatype != "Tree" || generated.value.ctor != "Node" {
                continue;
            }
            applicable += 1;
            if typecheck(&generated.program).is_err() {
                rejected += 1;
            }
        }
        assert!(applicable > 0);
        assert_eq!(rejected, applicable, "every broken program must be rejected");
    }
}
