//! The static checker.
//!
//! Checking runs the typing rules as an abstract machine. Symbolic
//! locations resolve to *symbolic addresses*: an offset from either a
//! region origin or the (statically opaque) end of some written value.
//! Address equality is what the write premises compare: the tag cell must
//! have a reserved successor, scalar cells must be unwritten, packed
//! arguments must sit exactly where the layout discipline puts them, and
//! each self-recursive child must start at the previous child's end
//! witness. The machine also threads the paper's environments: written
//! locations, the constraint log, per-region allocation foci, and the
//! nursery of allocated-but-unwritten locations.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use crate::schema::{buffer_shape, AdtSchema, BufferRef, BufferShape, FieldType, Layout};

use super::ast::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    WriteToWrittenLocation,
    WriteNotAtFocus,
    UnwrittenDependency,
    ShapeMismatch,
    BadProjectionKey,
    MissingBranch,
    SelfRecursiveFieldInVector,
    UnboundName,
    TypeMismatch,
    ArityMismatch,
    DuplicateName,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectReason::WriteToWrittenLocation => "WriteToWrittenLocation",
            RejectReason::WriteNotAtFocus => "WriteNotAtFocus",
            RejectReason::UnwrittenDependency => "UnwrittenDependency",
            RejectReason::ShapeMismatch => "ShapeMismatch",
            RejectReason::BadProjectionKey => "BadProjectionKey",
            RejectReason::MissingBranch => "MissingBranch",
            RejectReason::SelfRecursiveFieldInVector => "SelfRecursiveFieldInVector",
            RejectReason::UnboundName => "UnboundName",
            RejectReason::TypeMismatch => "TypeMismatch",
            RejectReason::ArityMismatch => "ArityMismatch",
            RejectReason::DuplicateName => "DuplicateName",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone)]
pub struct CheckError {
    pub reason: RejectReason,
    pub rule: String,
    pub detail: String,
}

impl fmt::Display for CheckError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} in {}: {}", self.reason, self.rule, self.detail)
    }
}

impl std::error::Error for CheckError {}

fn reject<T>(reason: RejectReason, rule: &str, detail: impl Into<String>) -> Result<T, CheckError> {
    Err(CheckError { reason, rule: rule.to_string(), detail: detail.into() })
}

/// One cell-granular symbolic address.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SymAddr {
    pub base: Base,
    pub offset: u32,
}

impl SymAddr {
    fn bump(&self, n: u32) -> SymAddr {
        SymAddr { base: self.base.clone(), offset: self.offset + n }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Base {
    /// Index 0 of a (single) region.
    Region(String),
    /// One past the end of the value of `datatype` rooted at `of`,
    /// projected through `path` for factored components.
    End { datatype: String, of: Box<RLoc>, path: Vec<PathStep> },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PathStep {
    Tag,
    Entry(String, usize),
}

/// A resolved location: concrete enough for equality, abstract over sizes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum RLoc {
    Single(SymAddr),
    Factored { tag: SymAddr, entries: Vec<((String, usize), RLoc)> },
}

impl RLoc {
    pub fn primary(&self) -> &SymAddr {
        match self {
            RLoc::Single(a) => a,
            RLoc::Factored { tag, .. } => tag,
        }
    }

    fn entry(&self, key: &(String, usize)) -> Option<&RLoc> {
        match self {
            RLoc::Single(_) => None,
            RLoc::Factored { entries, .. } => entries.iter().find(|(k, _)| k == key).map(|(_, r)| r),
        }
    }
}

/// The end witness of a value of `datatype` at `of`, componentwise.
fn after_rloc(datatype: &str, of: &RLoc) -> RLoc {
    fn end_component(datatype: &str, of: &RLoc, sub: &RLoc, path: Vec<PathStep>) -> RLoc {
        match sub {
            RLoc::Single(_) => RLoc::Single(SymAddr {
                base: Base::End { datatype: datatype.to_string(), of: Box::new(of.clone()), path },
                offset: 0,
            }),
            RLoc::Factored { entries, .. } => {
                let mut tag_path = path.clone();
                tag_path.push(PathStep::Tag);
                RLoc::Factored {
                    tag: SymAddr {
                        base: Base::End {
                            datatype: datatype.to_string(),
                            of: Box::new(of.clone()),
                            path: tag_path,
                        },
                        offset: 0,
                    },
                    entries: entries
                        .iter()
                        .map(|(k, sub)| {
                            let mut p = path.clone();
                            p.push(PathStep::Entry(k.0.clone(), k.1));
                            (k.clone(), end_component(datatype, of, sub, p))
                        })
                        .collect(),
                }
            }
        }
    }
    end_component(datatype, of, of, Vec::new())
}

/// Fresh location structure for a datatype rooted in the buffers named by
/// `base` (a region or an abstract parameter), in bundle order.
fn fresh_rloc(schema: &AdtSchema, datatype: &str, base: &str) -> RLoc {
    let shape = buffer_shape(schema, datatype).expect("schema validated");
    fn of_shape(shape: &BufferShape, base: &str, roles: &mut std::slice::Iter<'_, String>) -> RLoc {
        let tag_role = roles.next().expect("role per buffer");
        if shape.layout == Layout::Flat {
            return RLoc::Single(SymAddr { base: Base::Region(format!("{base}#{tag_role}")), offset: 0 });
        }
        let tag = SymAddr { base: Base::Region(format!("{base}#{tag_role}")), offset: 0 };
        let entries = shape
            .entries
            .iter()
            .map(|e| {
                let key = (e.ctor.clone(), e.field);
                let sub = match &e.buffer {
                    BufferRef::Scalar => {
                        let role = roles.next().expect("scalar role");
                        RLoc::Single(SymAddr { base: Base::Region(format!("{base}#{role}")), offset: 0 })
                    }
                    BufferRef::Nested(s) => of_shape(s, base, roles),
                };
                (key, sub)
            })
            .collect();
        RLoc::Factored { tag, entries }
    }
    let roles = shape.buffer_roles();
    of_shape(&shape, base, &mut roles.iter())
}

/// Region component names for a factored region, in bundle order.
pub(super) fn region_components(schema: &AdtSchema, datatype: &str, region: &str) -> Vec<String> {
    let shape = buffer_shape(schema, datatype).expect("schema validated");
    shape.buffer_roles().iter().map(|r| format!("{region}#{r}")).collect()
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TraceStep {
    pub rule: String,
    pub e: String,
    #[serde(rename = "A")]
    pub a: BTreeMap<String, String>,
    #[serde(rename = "N")]
    pub n: BTreeSet<String>,
    pub c_delta: Vec<(String, String)>,
}

#[derive(Debug)]
pub struct CheckOutcome {
    pub trace: Vec<TraceStep>,
    /// The accumulated constraint log across every function and main.
    pub constraints: Vec<(String, Constraint)>,
}

impl CheckOutcome {
    pub fn count_kind(&self, kind: &str) -> usize {
        self.constraints.iter().filter(|(_, c)| c.kind() == kind).count()
    }
}

struct LocInfo {
    rloc: RLoc,
    /// Datatype this location is structured for, when known.
    datatype: Option<String>,
}

#[derive(Clone)]
struct EnvSnap {
    gamma: HashMap<String, (Ty, Option<String>)>,
    sigma: HashMap<String, String>,
    written: HashSet<SymAddr>,
    nursery: BTreeSet<String>,
    alloc: BTreeMap<String, String>,
}

struct St<'p> {
    schema: &'p AdtSchema,
    funs: &'p [FunDef],
    gamma: HashMap<String, (Ty, Option<String>)>,
    locs: HashMap<String, LocInfo>,
    sigma: HashMap<String, String>,
    written: HashSet<SymAddr>,
    nursery: BTreeSet<String>,
    constraints: Vec<(String, Constraint)>,
    alloc: BTreeMap<String, String>,
    regions: HashMap<String, Option<String>>,
    trace: Vec<TraceStep>,
}

impl<'p> St<'p> {
    fn new(schema: &'p AdtSchema, funs: &'p [FunDef]) -> St<'p> {
        St {
            schema,
            funs,
            gamma: HashMap::new(),
            locs: HashMap::new(),
            sigma: HashMap::new(),
            written: HashSet::new(),
            nursery: BTreeSet::new(),
            constraints: Vec::new(),
            alloc: BTreeMap::new(),
            regions: HashMap::new(),
            trace: Vec::new(),
        }
    }

    fn snapshot(&self) -> EnvSnap {
        EnvSnap {
            gamma: self.gamma.clone(),
            sigma: self.sigma.clone(),
            written: self.written.clone(),
            nursery: self.nursery.clone(),
            alloc: self.alloc.clone(),
        }
    }

    fn restore(&mut self, snap: EnvSnap) {
        self.gamma = snap.gamma;
        self.sigma = snap.sigma;
        self.written = snap.written;
        self.nursery = snap.nursery;
        self.alloc = snap.alloc;
    }

    /// Join the current environment (the last branch's) with earlier branch
    /// outcomes: the continuation may rely only on roots written in every
    /// branch, a nursery entry survives only if no branch consumed it, and
    /// any cell written anywhere stays written.
    fn join(&mut self, base: EnvSnap, others: Vec<EnvSnap>) {
        self.gamma = base.gamma;
        for o in others {
            self.sigma.retain(|k, _| o.sigma.contains_key(k) || base.sigma.contains_key(k));
            self.nursery.retain(|k| o.nursery.contains(k));
            self.written.extend(o.written);
        }
    }

    fn step(&mut self, rule: &str, e: &Expr, c_delta: Vec<(String, Constraint)>) {
        self.trace.push(TraceStep {
            rule: rule.to_string(),
            e: e.summary(),
            a: self.alloc.clone(),
            n: self.nursery.clone(),
            c_delta: c_delta.iter().map(|(l, c)| (l.clone(), c.to_string())).collect(),
        });
        self.constraints.extend(c_delta);
    }

    fn rloc(&self, name: &str, rule: &str) -> Result<&RLoc, CheckError> {
        self.locs
            .get(name)
            .map(|i| &i.rloc)
            .ok_or_else(|| CheckError {
                reason: RejectReason::UnboundName,
                rule: rule.to_string(),
                detail: format!("location `{name}` is not in scope"),
            })
    }

    fn bind_loc(&mut self, name: &str, info: LocInfo, rule: &str) -> Result<(), CheckError> {
        if self.locs.contains_key(name) {
            return reject(RejectReason::DuplicateName, rule, format!("location `{name}` rebound"));
        }
        self.locs.insert(name.to_string(), info);
        Ok(())
    }

    /// Remove nursery names whose primary cell just got written.
    fn sweep_nursery(&mut self, cells: &HashSet<SymAddr>) {
        self.nursery.retain(|n| match self.locs.get(n) {
            Some(info) => !cells.contains(info.rloc.primary()),
            None => true,
        });
    }

    /// Allocation-focus bookkeeping for the trace and narrative only; the
    /// positional write premises carry the safety argument.
    fn focus(&mut self, addr: &SymAddr, name: &str) {
        let key = match &addr.base {
            Base::Region(r) => r.clone(),
            Base::End { .. } => return,
        };
        self.alloc.insert(key, name.to_string());
    }

    fn focus_rloc(&mut self, rloc: &RLoc, name: &str) {
        match rloc {
            RLoc::Single(a) => self.focus(a, name),
            RLoc::Factored { tag, entries } => {
                self.focus(tag, name);
                for (_, sub) in entries {
                    self.focus_rloc(sub, name);
                }
            }
        }
    }
}

/// Datatype owning constructor `ctor`.
fn datatype_of_ctor<'s>(schema: &'s AdtSchema, ctor: &str) -> Option<&'s crate::schema::DatatypeDef> {
    schema.datatypes().iter().find(|d| d.constructor(ctor).is_some())
}

/// Field locations of the first self-recursive child of a `ctor` write at
/// `dest`: the tag advances one cell and the constructor's own
/// non-self-recursive entries advance past what the write puts there.
fn first_child_rloc(
    schema: &AdtSchema,
    datatype: &str,
    ctor: &str,
    dest: &RLoc,
) -> Result<RLoc, CheckError> {
    let dt = schema.get(datatype).expect("datatype exists");
    let c = dt.constructor(ctor).expect("ctor exists");
    match dest {
        RLoc::Single(a) => {
            let scalars = c.fields.iter().filter(|f| matches!(f, FieldType::Int)).count() as u32;
            Ok(RLoc::Single(a.bump(1 + scalars)))
        }
        RLoc::Factored { tag, entries } => {
            let entries = entries
                .iter()
                .map(|((k, j), sub)| {
                    let key = (k.clone(), *j);
                    if k == ctor {
                        match &c.fields[*j] {
                            FieldType::Int => match sub {
                                RLoc::Single(a) => Ok((key, RLoc::Single(a.bump(1)))),
                                _ => reject(
                                    RejectReason::ShapeMismatch,
                                    "T-DataConstructor-FullyFactored",
                                    "scalar entry is not a single location",
                                ),
                            },
                            FieldType::Packed(d) => Ok((key, after_rloc(d, sub))),
                        }
                    } else {
                        Ok((key, sub.clone()))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(RLoc::Factored { tag: tag.bump(1), entries })
        }
    }
}

/// Check a whole program: every function once, then main. The outcome
/// carries the per-step trace and the union of accumulated constraints.
pub fn typecheck(p: &Program) -> Result<CheckOutcome, CheckError> {
    let mut trace = Vec::new();
    let mut constraints = Vec::new();
    for f in &p.funs {
        let mut st = St::new(&p.schema, &p.funs);
        seed_fun(&mut st, f)?;
        let (ty, loc) = check_expr(&mut st, &f.body)?;
        expect_ret(&st, f, &ty, &loc)?;
        trace.extend(st.trace);
        constraints.extend(st.constraints);
    }
    let mut st = St::new(&p.schema, &p.funs);
    check_expr(&mut st, &p.main)?;
    trace.extend(st.trace);
    constraints.extend(st.constraints);
    Ok(CheckOutcome { trace, constraints })
}

fn seed_fun(st: &mut St, f: &FunDef) -> Result<(), CheckError> {
    for lp in &f.loc_params {
        if st.schema.get(&lp.datatype).is_none() {
            return reject(
                RejectReason::UnboundName,
                "T-Program",
                format!("unknown datatype `{}`", lp.datatype),
            );
        }
        let base = format!("param${}${}", f.name, lp.name);
        let rloc = fresh_rloc(st.schema, &lp.datatype, &base);
        st.bind_loc(
            &lp.name,
            LocInfo { rloc: rloc.clone(), datatype: Some(lp.datatype.clone()) },
            "T-Program",
        )?;
        match lp.mode {
            LocMode::Out => {
                st.nursery.insert(lp.name.clone());
                st.focus_rloc(&rloc, &lp.name);
            }
            LocMode::In => {
                st.sigma.insert(lp.name.clone(), lp.datatype.clone());
            }
        }
    }
    for (name, ty, loc) in &f.params {
        if let (Ty::Adt(dt), Some(l)) = (ty, loc) {
            let info = st.locs.get(l.as_str()).ok_or_else(|| CheckError {
                reason: RejectReason::UnboundName,
                rule: "T-Program".into(),
                detail: format!("parameter location `{l}` is not a loc param"),
            })?;
            if info.datatype.as_deref() != Some(dt.as_str()) {
                return reject(
                    RejectReason::TypeMismatch,
                    "T-Program",
                    format!("parameter `{name}` type does not match its location"),
                );
            }
        }
        st.gamma.insert(name.clone(), (ty.clone(), loc.clone()));
    }
    Ok(())
}

fn expect_ret(st: &St, f: &FunDef, ty: &Ty, loc: &Option<String>) -> Result<(), CheckError> {
    if *ty != f.ret.0 {
        return reject(
            RejectReason::TypeMismatch,
            "T-Program",
            format!("function `{}` returns {ty}, declared {}", f.name, f.ret.0),
        );
    }
    if let Some(declared) = &f.ret.1 {
        let got = loc.as_ref().ok_or_else(|| CheckError {
            reason: RejectReason::TypeMismatch,
            rule: "T-Program".into(),
            detail: format!("function `{}` result carries no location", f.name),
        })?;
        let want = st.rloc(declared, "T-Program")?.clone();
        let have = st.rloc(got, "T-Program")?.clone();
        if want != have {
            return reject(
                RejectReason::WriteNotAtFocus,
                "T-Program",
                format!("function `{}` result is at `{got}`, declared `{declared}`", f.name),
            );
        }
    }
    Ok(())
}

fn check_expr(st: &mut St, e: &Expr) -> Result<(Ty, Option<String>), CheckError> {
    match e {
        Expr::Int(_) => Ok((Ty::Int, None)),
        Expr::Ptr(_) => reject(RejectReason::TypeMismatch, "T-Concrete-Loc", "runtime pointer in source"),
        Expr::Var(x) => {
            let (ty, loc) = st
                .gamma
                .get(x)
                .cloned()
                .ok_or_else(|| CheckError {
                    reason: RejectReason::UnboundName,
                    rule: "T-Var".into(),
                    detail: format!("variable `{x}` is not in scope"),
                })?;
            st.step("T-Var", e, vec![]);
            Ok((ty, loc))
        }
        Expr::Prim(op, a, b) => {
            for side in [a, b] {
                let (ty, _) = check_expr(st, side)?;
                if ty != Ty::Int {
                    return reject(
                        RejectReason::TypeMismatch,
                        "T-Int",
                        format!("`{}` expects Int operands, got {ty}", op.name()),
                    );
                }
            }
            st.step("T-Int", e, vec![]);
            Ok((if op.returns_bool() { Ty::Bool } else { Ty::Int }, None))
        }
        Expr::If(c, t, f) => {
            let (cty, _) = check_expr(st, c)?;
            if cty != Ty::Bool {
                return reject(RejectReason::TypeMismatch, "T-If", "condition must be Bool");
            }
            // Each branch checks from the same environment; the
            // continuation sees their join.
            let snap = st.snapshot();
            let (tty, tloc) = check_expr(st, t)?;
            let then_env = st.snapshot();
            st.restore(snap.clone());
            let (fty, floc) = check_expr(st, f)?;
            if tty != fty {
                return reject(RejectReason::TypeMismatch, "T-If", "branch types differ");
            }
            if let (Some(a), Some(b)) = (&tloc, &floc) {
                let ra = st.rloc(a, "T-If")?.clone();
                let rb = st.rloc(b, "T-If")?.clone();
                if ra != rb {
                    return reject(RejectReason::TypeMismatch, "T-If", "branch locations differ");
                }
            }
            st.join(snap, vec![then_env]);
            Ok((tty, tloc))
        }
        Expr::LetRegion { region, datatype, body } => {
            if st.regions.contains_key(region) {
                return reject(RejectReason::DuplicateName, "T-LetRegion", format!("region `{region}` rebound"));
            }
            if let Some(dt) = datatype {
                let def = st.schema.get(dt).ok_or_else(|| CheckError {
                    reason: RejectReason::UnboundName,
                    rule: "T-LetRegion".into(),
                    detail: format!("unknown datatype `{dt}`"),
                })?;
                if def.layout != Layout::Factored {
                    return reject(
                        RejectReason::ShapeMismatch,
                        "T-LetRegion",
                        format!("`{dt}` is flat; factored regions need a factored datatype"),
                    );
                }
                for comp in region_components(st.schema, dt, region) {
                    st.alloc.insert(comp, "∅".to_string());
                }
            } else {
                st.alloc.insert(region.clone(), "∅".to_string());
            }
            st.regions.insert(region.clone(), datatype.clone());
            st.step("T-LetRegion", e, vec![]);
            check_expr(st, body)
        }
        Expr::LetLoc { loc, rhs, body } => {
            check_letloc(st, e, loc, rhs)?;
            check_expr(st, body)
        }
        Expr::Let { var, ty, loc, rhs, body } => {
            let (rty, rloc) = check_expr(st, rhs)?;
            if rty != *ty {
                return reject(
                    RejectReason::TypeMismatch,
                    "T-Let",
                    format!("`{var}` declared {ty}, bound to {rty}"),
                );
            }
            match (ty, loc) {
                (Ty::Adt(_), Some(l)) => {
                    let got = rloc.as_ref().ok_or_else(|| CheckError {
                        reason: RejectReason::TypeMismatch,
                        rule: "T-Let".into(),
                        detail: format!("`{var}` needs a located right-hand side"),
                    })?;
                    let want = st.rloc(l, "T-Let")?.clone();
                    let have = st.rloc(got, "T-Let")?.clone();
                    if want != have {
                        return reject(
                            RejectReason::WriteNotAtFocus,
                            "T-Let",
                            format!("`{var}` declared at `{l}` but written at `{got}`"),
                        );
                    }
                }
                (Ty::Adt(_), None) => {
                    return reject(RejectReason::TypeMismatch, "T-Let", "packed binding needs a location")
                }
                _ => {}
            }
            st.gamma.insert(var.clone(), (ty.clone(), loc.clone()));
            st.step("T-Let", e, vec![]);
            check_expr(st, body)
        }
        Expr::Make { ctor, loc, args } => check_make(st, e, ctor, loc, args),
        Expr::Case { scrutinee, branches } => check_case(st, e, scrutinee, branches),
        Expr::Call { func, loc_args, args } => check_call(st, e, func, loc_args, args),
    }
}

fn check_letloc(st: &mut St, e: &Expr, loc: &str, rhs: &LocExpr) -> Result<(), CheckError> {
    match rhs {
        LocExpr::Start(r) => {
            let dt = st
                .regions
                .get(r)
                .cloned()
                .ok_or_else(|| CheckError {
                    reason: RejectReason::UnboundName,
                    rule: "T-LetLoc-Start".into(),
                    detail: format!("region `{r}` is not in scope"),
                })?;
            let (rloc, datatype) = match &dt {
                Some(d) => (fresh_rloc(st.schema, d, r), Some(d.clone())),
                None => (
                    RLoc::Single(SymAddr { base: Base::Region(format!("{r}#single")), offset: 0 }),
                    None,
                ),
            };
            st.bind_loc(loc, LocInfo { rloc: rloc.clone(), datatype }, "T-LetLoc-Start")?;
            st.nursery.insert(loc.to_string());
            st.focus_rloc(&rloc, loc);
            st.step("T-LetLoc-Start", e, vec![(loc.to_string(), Constraint::StartR(r.clone()))]);
            Ok(())
        }
        LocExpr::PlusOne(l2) => {
            let base = st.rloc(l2, "T-LetLoc-Tag")?.clone();
            let RLoc::Single(addr) = base else {
                return reject(
                    RejectReason::ShapeMismatch,
                    "T-LetLoc-Tag",
                    "one-cell bumps apply to single locations",
                );
            };
            let rloc = RLoc::Single(addr.bump(1));
            st.bind_loc(loc, LocInfo { rloc: rloc.clone(), datatype: None }, "T-LetLoc-Tag")?;
            st.nursery.insert(loc.to_string());
            st.focus_rloc(&rloc, loc);
            st.step("T-LetLoc-Tag", e, vec![(loc.to_string(), Constraint::PlusOne(l2.to_string()))]);
            Ok(())
        }
        LocExpr::After { datatype, loc: l2 } => {
            let def = st.schema.get(datatype).ok_or_else(|| CheckError {
                reason: RejectReason::UnboundName,
                rule: "T-LetLoc-After".into(),
                detail: format!("unknown datatype `{datatype}`"),
            })?;
            let src = st.rloc(l2, "T-LetLoc-After")?.clone();
            match st.sigma.get(l2) {
                None => {
                    return reject(
                        RejectReason::UnwrittenDependency,
                        "T-LetLoc-After",
                        format!("`after` needs `{l2}` to be written first"),
                    )
                }
                Some(d) if d != datatype => {
                    return reject(
                        RejectReason::TypeMismatch,
                        "T-LetLoc-After",
                        format!("`{l2}` holds `{d}`, not `{datatype}`"),
                    )
                }
                Some(_) => {}
            }
            let factored = matches!(src, RLoc::Factored { .. });
            if factored != (def.layout == Layout::Factored) {
                return reject(
                    RejectReason::ShapeMismatch,
                    "T-LetLoc-After",
                    "the new location must carry the same factored structure as the source",
                );
            }
            let rloc = after_rloc(datatype, &src);
            st.bind_loc(
                loc,
                LocInfo { rloc: rloc.clone(), datatype: Some(datatype.clone()) },
                "T-LetLoc-After",
            )?;
            st.nursery.insert(loc.to_string());
            st.focus_rloc(&rloc, loc);
            st.step(
                "T-LetLoc-After",
                e,
                vec![(
                    loc.to_string(),
                    Constraint::After { datatype: datatype.clone(), loc: l2.to_string() },
                )],
            );
            Ok(())
        }
        LocExpr::ProjTag(l2) => {
            let src = st.rloc(l2, "T-LetLoc-ProjTag")?.clone();
            let RLoc::Factored { tag, .. } = src else {
                return reject(
                    RejectReason::ShapeMismatch,
                    "T-LetLoc-ProjTag",
                    "projTagLoc applies to factored locations",
                );
            };
            if !st.nursery.contains(l2) {
                return reject(
                    RejectReason::UnwrittenDependency,
                    "T-LetLoc-ProjTag",
                    format!("`{l2}` is not an unwritten destination"),
                );
            }
            let rloc = RLoc::Single(tag);
            st.bind_loc(loc, LocInfo { rloc: rloc.clone(), datatype: None }, "T-LetLoc-ProjTag")?;
            st.nursery.insert(loc.to_string());
            st.focus_rloc(&rloc, loc);
            st.step("T-LetLoc-ProjTag", e, vec![(loc.to_string(), Constraint::ProjTag(l2.to_string()))]);
            Ok(())
        }
        LocExpr::ProjField { ctor, field, loc: l2 } => {
            let src = st.rloc(l2, "T-LetLoc-ProjField")?.clone();
            let key = (ctor.clone(), *field);
            let sub = src.entry(&key).cloned().ok_or_else(|| CheckError {
                reason: RejectReason::BadProjectionKey,
                rule: "T-LetLoc-ProjField".into(),
                detail: format!("no entry ({ctor},{field}) in `{l2}`"),
            })?;
            if !st.nursery.contains(l2) {
                return reject(
                    RejectReason::UnwrittenDependency,
                    "T-LetLoc-ProjField",
                    format!("`{l2}` is not an unwritten destination"),
                );
            }
            st.bind_loc(loc, LocInfo { rloc: sub.clone(), datatype: None }, "T-LetLoc-ProjField")?;
            st.nursery.insert(loc.to_string());
            st.focus_rloc(&sub, loc);
            st.step(
                "T-LetLoc-ProjField",
                e,
                vec![(
                    loc.to_string(),
                    Constraint::ProjField { ctor: ctor.clone(), field: *field, loc: l2.to_string() },
                )],
            );
            Ok(())
        }
        LocExpr::IntroLocVec { tag_loc, entries } => {
            let tag = match st.rloc(tag_loc, "T-LetLoc-IntroLocVec")?.clone() {
                RLoc::Single(a) => a,
                RLoc::Factored { .. } => {
                    return reject(
                        RejectReason::ShapeMismatch,
                        "T-LetLoc-IntroLocVec",
                        "the tag component must be a single location",
                    )
                }
            };
            // The key set must be exactly some factored datatype's
            // non-self-recursive pairs.
            let keys: BTreeSet<(String, usize)> =
                entries.iter().map(|(k, _)| k.clone()).collect();
            let mut datatype = None;
            for dt in st.schema.datatypes() {
                if dt.layout != Layout::Factored {
                    continue;
                }
                let shape = buffer_shape(st.schema, &dt.name).expect("validated");
                let want: BTreeSet<(String, usize)> =
                    shape.entries.iter().map(|e| (e.ctor.clone(), e.field)).collect();
                if want == keys {
                    datatype = Some(dt.name.clone());
                    break;
                }
            }
            let Some(datatype) = datatype else {
                // Self-recursive keys are rejected by name; anything else is
                // an ill-formed key set.
                for (k, j) in &keys {
                    if let Some(dt) = datatype_of_ctor(st.schema, k) {
                        let c = dt.constructor(k).unwrap();
                        if c.fields.get(*j) == Some(&FieldType::Packed(dt.name.clone())) {
                            return reject(
                                RejectReason::SelfRecursiveFieldInVector,
                                "T-LetLoc-IntroLocVec",
                                format!("({k},{j}) is a self-recursive field"),
                            );
                        }
                    }
                }
                return reject(
                    RejectReason::BadProjectionKey,
                    "T-LetLoc-IntroLocVec",
                    "entry keys do not form a factored datatype's field set",
                );
            };
            let mut resolved = Vec::new();
            for (key, l) in entries {
                let r = st.rloc(l, "T-LetLoc-IntroLocVec")?.clone();
                if !st.nursery.contains(l) {
                    return reject(
                        RejectReason::UnwrittenDependency,
                        "T-LetLoc-IntroLocVec",
                        format!("component `{l}` is not allocated-unwritten"),
                    );
                }
                resolved.push((key.clone(), r));
            }
            if !st.nursery.contains(tag_loc) {
                return reject(
                    RejectReason::UnwrittenDependency,
                    "T-LetLoc-IntroLocVec",
                    format!("tag component `{tag_loc}` is not allocated-unwritten"),
                );
            }
            // Ownership of the components transfers to the vector.
            st.nursery.remove(tag_loc);
            for (_, l) in entries {
                st.nursery.remove(l);
            }
            let rloc = RLoc::Factored { tag, entries: resolved };
            st.bind_loc(
                loc,
                LocInfo { rloc: rloc.clone(), datatype: Some(datatype) },
                "T-LetLoc-IntroLocVec",
            )?;
            st.nursery.insert(loc.to_string());
            st.focus_rloc(&rloc, loc);
            st.step(
                "T-LetLoc-IntroLocVec",
                e,
                vec![(
                    loc.to_string(),
                    Constraint::IntroLocVec { tag_loc: tag_loc.clone(), entries: entries.clone() },
                )],
            );
            Ok(())
        }
    }
}

fn check_make(
    st: &mut St,
    e: &Expr,
    ctor: &str,
    loc: &str,
    args: &[Expr],
) -> Result<(Ty, Option<String>), CheckError> {
    let dt = datatype_of_ctor(st.schema, ctor)
        .ok_or_else(|| CheckError {
            reason: RejectReason::UnboundName,
            rule: "T-DataConstructor".into(),
            detail: format!("unknown constructor `{ctor}`"),
        })?
        .clone();
    let c = dt.constructor(ctor).unwrap().clone();
    let rule = if dt.layout == Layout::Factored {
        "T-DataConstructor-FullyFactored"
    } else {
        "T-DataConstructor"
    };
    let dest = st.rloc(loc, rule)?.clone();
    let factored = matches!(dest, RLoc::Factored { .. });
    if factored != (dt.layout == Layout::Factored) {
        return reject(
            RejectReason::ShapeMismatch,
            rule,
            format!("`{}` is {} but the destination is not", dt.name, dt.layout),
        );
    }
    if !st.nursery.contains(loc) {
        return reject(
            RejectReason::WriteToWrittenLocation,
            rule,
            format!("location `{loc}` is not allocated-unwritten"),
        );
    }
    if c.fields.len() != args.len() {
        return reject(
            RejectReason::ArityMismatch,
            rule,
            format!("`{ctor}` takes {} fields, got {}", c.fields.len(), args.len()),
        );
    }

    // The cells this write populates.
    let mut new_cells: HashSet<SymAddr> = HashSet::new();
    let tag_cell = dest.primary().clone();
    if st.written.contains(&tag_cell) {
        return reject(RejectReason::WriteToWrittenLocation, rule, format!("tag cell of `{loc}`"));
    }
    new_cells.insert(tag_cell);

    // Scalar cells, then packed argument positions per the layout
    // discipline.
    let mut packed: Vec<(usize, &Expr)> = Vec::new();
    let mut int_count = 0u32;
    for (j, (field, arg)) in c.fields.iter().zip(args).enumerate() {
        match field {
            FieldType::Int => {
                let (ty, _) = check_expr(st, arg)?;
                if ty != Ty::Int {
                    return reject(RejectReason::TypeMismatch, rule, format!("field {j} of `{ctor}`"));
                }
                let cell = match &dest {
                    RLoc::Single(a) => a.bump(1 + int_count),
                    RLoc::Factored { .. } => match dest.entry(&(ctor.to_string(), j)) {
                        Some(RLoc::Single(a)) => a.clone(),
                        _ => {
                            return reject(
                                RejectReason::ShapeMismatch,
                                rule,
                                format!("missing scalar entry ({ctor},{j})"),
                            )
                        }
                    },
                };
                if st.written.contains(&cell) || new_cells.contains(&cell) {
                    return reject(RejectReason::WriteToWrittenLocation, rule, format!("scalar cell ({ctor},{j})"));
                }
                new_cells.insert(cell);
                int_count += 1;
            }
            FieldType::Packed(_) => packed.push((j, arg)),
        }
    }

    // Packed arguments must be variables bound to written values sitting
    // exactly where the discipline expects them.
    let mut prev: Option<(String, RLoc)> = None; // (field datatype, loc)
    for (ordinal, (j, arg)) in packed.iter().enumerate() {
        let Expr::Var(x) = arg else {
            return reject(RejectReason::TypeMismatch, rule, "packed arguments must be variables");
        };
        let FieldType::Packed(fdt) = &c.fields[*j] else { unreachable!() };
        let (ty, arg_loc) = st
            .gamma
            .get(x)
            .cloned()
            .ok_or_else(|| CheckError {
                reason: RejectReason::UnboundName,
                rule: rule.into(),
                detail: format!("variable `{x}`"),
            })?;
        if ty != Ty::Adt(fdt.clone()) {
            return reject(RejectReason::TypeMismatch, rule, format!("field {j} of `{ctor}` expects {fdt}"));
        }
        let arg_loc = arg_loc.ok_or_else(|| CheckError {
            reason: RejectReason::UnwrittenDependency,
            rule: rule.into(),
            detail: format!("argument `{x}` carries no location"),
        })?;
        if !st.sigma.contains_key(&arg_loc) {
            return reject(
                RejectReason::UnwrittenDependency,
                rule,
                format!("argument `{x}` at `{arg_loc}` has not been written"),
            );
        }
        let have = st.rloc(&arg_loc, rule)?.clone();
        let self_rec = fdt == &dt.name;
        let want = if let Some((prev_dt, prev_loc)) = &prev {
            after_rloc(prev_dt, prev_loc)
        } else if self_rec {
            // First self-recursive child right after the tag and this
            // constructor's own fields.
            first_child_rloc(st.schema, &dt.name, ctor, &dest)?
        } else {
            // First packed field: flat layouts put it after the tag and
            // scalars; factored layouts give it its own entry.
            match &dest {
                RLoc::Single(a) => RLoc::Single(a.bump(1 + int_count)),
                RLoc::Factored { .. } => dest
                    .entry(&(ctor.to_string(), *j))
                    .cloned()
                    .ok_or_else(|| CheckError {
                        reason: RejectReason::ShapeMismatch,
                        rule: rule.into(),
                        detail: format!("missing entry ({ctor},{j})"),
                    })?,
            }
        };
        // Non-self-recursive fields of a factored write live in their own
        // entries, not in the tag-stream chain.
        let want = if !self_rec && factored {
            dest.entry(&(ctor.to_string(), *j)).cloned().unwrap_or(want)
        } else {
            want
        };
        if have != want {
            return reject(
                RejectReason::WriteNotAtFocus,
                rule,
                format!("argument `{x}` (field {j} of `{ctor}`) is not at the expected position"),
            );
        }
        if self_rec || !factored {
            prev = Some((fdt.clone(), have));
        }
        let _ = ordinal;
    }

    // Effects: the cells are written, the destination becomes a typed root,
    // and every nursery alias of a written cell is consumed.
    for cell in &new_cells {
        st.written.insert(cell.clone());
    }
    st.sigma.insert(loc.to_string(), dt.name.clone());
    st.nursery.remove(loc);
    st.sweep_nursery(&new_cells);
    st.focus_rloc(&dest, loc);
    st.step(rule, e, vec![]);
    Ok((Ty::Adt(dt.name.clone()), Some(loc.to_string())))
}

fn check_case(
    st: &mut St,
    e: &Expr,
    scrutinee: &Expr,
    branches: &[Branch],
) -> Result<(Ty, Option<String>), CheckError> {
    let (sty, sloc) = check_expr(st, scrutinee)?;
    let Ty::Adt(dt_name) = &sty else {
        return reject(RejectReason::TypeMismatch, "T-Case", "scrutinee must be a datatype value");
    };
    let sloc = sloc.ok_or_else(|| CheckError {
        reason: RejectReason::UnwrittenDependency,
        rule: "T-Case".into(),
        detail: "scrutinee carries no location".into(),
    })?;
    if !st.sigma.contains_key(&sloc) {
        return reject(RejectReason::UnwrittenDependency, "T-Case", format!("`{sloc}` is not written"));
    }
    let dt = st.schema.get(dt_name).unwrap().clone();
    let root = st.rloc(&sloc, "T-Case")?.clone();

    let snap = st.snapshot();
    let mut branch_envs: Vec<EnvSnap> = Vec::new();
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut result: Option<(Ty, Option<RLoc>, Option<String>)> = None;
    for b in branches {
        st.restore(snap.clone());
        let c = dt.constructor(&b.ctor).ok_or_else(|| CheckError {
            reason: RejectReason::TypeMismatch,
            rule: "T-Pat".into(),
            detail: format!("`{}` is not a constructor of `{dt_name}`", b.ctor),
        })?;
        if !seen.insert(&b.ctor) {
            return reject(RejectReason::DuplicateName, "T-Pat", format!("duplicate branch `{}`", b.ctor));
        }
        if c.fields.len() != b.fields.len() {
            return reject(RejectReason::ArityMismatch, "T-Pat", format!("pattern `{}`", b.ctor));
        }

        // Bind pattern fields: scalars as Ints, packed fields at the
        // positions the write discipline put them.
        let mut prev: Option<(String, RLoc)> = None;
        let mut int_seen = 0u32;
        for (j, (field, pat)) in c.fields.iter().zip(&b.fields).enumerate() {
            match (field, pat) {
                (FieldType::Int, PatField::Scalar(x)) => {
                    st.gamma.insert(x.clone(), (Ty::Int, None));
                    int_seen += 1;
                }
                (FieldType::Packed(fdt), PatField::Packed { var, loc }) => {
                    let self_rec = fdt == dt_name;
                    let rloc = if let Some((pdt, ploc)) = &prev {
                        after_rloc(pdt, ploc)
                    } else if self_rec {
                        first_child_rloc(st.schema, dt_name, &b.ctor, &root)?
                    } else {
                        match &root {
                            RLoc::Single(a) => RLoc::Single(a.bump(1 + int_seen)),
                            RLoc::Factored { .. } => {
                                root.entry(&(b.ctor.clone(), j)).cloned().ok_or_else(|| CheckError {
                                    reason: RejectReason::BadProjectionKey,
                                    rule: "T-Pat".into(),
                                    detail: format!("no entry ({},{j})", b.ctor),
                                })?
                            }
                        }
                    };
                    let rloc = if !self_rec && matches!(root, RLoc::Factored { .. }) {
                        root.entry(&(b.ctor.clone(), j)).cloned().unwrap_or(rloc)
                    } else {
                        rloc
                    };
                    st.bind_loc(loc, LocInfo { rloc: rloc.clone(), datatype: Some(fdt.clone()) }, "T-Pat")?;
                    st.sigma.insert(loc.clone(), fdt.clone());
                    st.gamma.insert(var.clone(), (Ty::Adt(fdt.clone()), Some(loc.clone())));
                    if self_rec || matches!(root, RLoc::Single(_)) {
                        prev = Some((fdt.clone(), rloc));
                    }
                }
                _ => return reject(RejectReason::TypeMismatch, "T-Pat", format!("pattern field {j} of `{}`", b.ctor)),
            }
        }
        st.step("T-Pat", e, vec![]);
        let (bty, bloc) = check_expr(st, &b.body)?;
        let brloc = match &bloc {
            Some(l) => Some(st.rloc(l, "T-Case")?.clone()),
            None => None,
        };
        match &result {
            None => result = Some((bty, brloc, bloc)),
            Some((ty0, rloc0, _)) => {
                if *ty0 != bty || *rloc0 != brloc {
                    return reject(RejectReason::TypeMismatch, "T-Case", "branches disagree");
                }
            }
        }
        branch_envs.push(st.snapshot());
    }
    for c in &dt.constructors {
        if !seen.contains(c.name.as_str()) {
            return reject(RejectReason::MissingBranch, "T-Case", format!("no branch for `{}`", c.name));
        }
    }
    st.join(snap, branch_envs);
    st.step("T-Case", e, vec![]);
    let (ty, _, loc_name) = result.ok_or_else(|| CheckError {
        reason: RejectReason::MissingBranch,
        rule: "T-Case".into(),
        detail: "case with no branches".into(),
    })?;
    Ok((ty, loc_name))
}

fn check_call(
    st: &mut St,
    e: &Expr,
    func: &str,
    loc_args: &[String],
    args: &[Expr],
) -> Result<(Ty, Option<String>), CheckError> {
    let f = st
        .funs
        .iter()
        .find(|f| f.name == func)
        .ok_or_else(|| CheckError {
            reason: RejectReason::UnboundName,
            rule: "T-App".into(),
            detail: format!("unknown function `{func}`"),
        })?
        .clone();
    if f.loc_params.len() != loc_args.len() || f.params.len() != args.len() {
        return reject(RejectReason::ArityMismatch, "T-App", format!("call to `{func}`"));
    }
    let mut loc_map: HashMap<&str, &str> = HashMap::new();
    for (lp, actual) in f.loc_params.iter().zip(loc_args) {
        loc_map.insert(&lp.name, actual);
        let info = st.locs.get(actual).ok_or_else(|| CheckError {
            reason: RejectReason::UnboundName,
            rule: "T-App".into(),
            detail: format!("location `{actual}`"),
        })?;
        let factored = matches!(info.rloc, RLoc::Factored { .. });
        let want_factored = st.schema.get(&lp.datatype).map(|d| d.layout) == Some(Layout::Factored);
        if factored != want_factored {
            return reject(RejectReason::ShapeMismatch, "T-App", format!("location `{actual}`"));
        }
        match lp.mode {
            LocMode::In => {
                match st.sigma.get(actual) {
                    None => {
                        return reject(
                            RejectReason::UnwrittenDependency,
                            "T-App",
                            format!("input location `{actual}` is not written"),
                        )
                    }
                    Some(d) if *d != lp.datatype => {
                        return reject(RejectReason::TypeMismatch, "T-App", format!("location `{actual}`"))
                    }
                    _ => {}
                }
            }
            LocMode::Out => {
                if !st.nursery.contains(actual) {
                    return reject(
                        RejectReason::WriteToWrittenLocation,
                        "T-App",
                        format!("output location `{actual}` is not allocated-unwritten"),
                    );
                }
            }
        }
    }
    for ((pname, pty, ploc), arg) in f.params.iter().zip(args) {
        let (ty, aloc) = check_expr(st, arg)?;
        if ty != *pty {
            return reject(RejectReason::TypeMismatch, "T-App", format!("argument `{pname}`"));
        }
        if let Some(pl) = ploc {
            let actual = loc_map.get(pl.as_str()).ok_or_else(|| CheckError {
                reason: RejectReason::UnboundName,
                rule: "T-App".into(),
                detail: format!("parameter location `{pl}`"),
            })?;
            let aloc = aloc.ok_or_else(|| CheckError {
                reason: RejectReason::TypeMismatch,
                rule: "T-App".into(),
                detail: format!("argument `{pname}` carries no location"),
            })?;
            let want = st.rloc(actual, "T-App")?.clone();
            let have = st.rloc(&aloc, "T-App")?.clone();
            if want != have {
                return reject(
                    RejectReason::TypeMismatch,
                    "T-App",
                    format!("argument `{pname}` is not at location `{actual}`"),
                );
            }
        }
    }
    // Output locations are written by the call.
    let mut cells = HashSet::new();
    for (lp, actual) in f.loc_params.iter().zip(loc_args) {
        if lp.mode == LocMode::Out {
            let rloc = st.rloc(actual, "T-App")?.clone();
            collect_primary_cells(&rloc, &mut cells);
            st.sigma.insert(actual.clone(), lp.datatype.clone());
            st.nursery.remove(actual);
            st.focus_rloc(&rloc, actual);
        }
    }
    for cell in &cells {
        st.written.insert(cell.clone());
    }
    st.sweep_nursery(&cells);
    st.step("T-App", e, vec![]);
    let ret_loc = match &f.ret.1 {
        None => None,
        Some(pl) => Some(
            loc_map
                .get(pl.as_str())
                .map(|s| s.to_string())
                .ok_or_else(|| CheckError {
                    reason: RejectReason::UnboundName,
                    rule: "T-App".into(),
                    detail: format!("return location `{pl}`"),
                })?,
        ),
    };
    Ok((f.ret.0.clone(), ret_loc))
}

fn collect_primary_cells(rloc: &RLoc, out: &mut HashSet<SymAddr>) {
    match rloc {
        RLoc::Single(a) => {
            out.insert(a.clone());
        }
        RLoc::Factored { tag, entries } => {
            out.insert(tag.clone());
            for (_, sub) in entries {
                collect_primary_cells(sub, out);
            }
        }
    }
}
