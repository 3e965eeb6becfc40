//! Abstract syntax of the calculus.
//!
//! Programs are first-order and call-by-value, with explicit regions and
//! locations. A location is either single (one position in one region) or
//! factored (a tag location plus one component location per non-self-
//! recursive (constructor, field) pair). Location arithmetic is in cells:
//! one cell holds one constructor tag or one integer.

use std::fmt;
use std::sync::Arc;

use crate::schema::AdtSchema;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ty {
    Int,
    Bool,
    Adt(String),
}

impl fmt::Display for Ty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ty::Int => write!(f, "Int"),
            Ty::Bool => write!(f, "Bool"),
            Ty::Adt(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimOp {
    Add,
    Sub,
    Mul,
    Le,
    Lt,
    Eq,
}

impl PrimOp {
    pub fn name(&self) -> &'static str {
        match self {
            PrimOp::Add => "+",
            PrimOp::Sub => "-",
            PrimOp::Mul => "*",
            PrimOp::Le => "<=",
            PrimOp::Lt => "<",
            PrimOp::Eq => "=",
        }
    }

    pub fn returns_bool(&self) -> bool {
        matches!(self, PrimOp::Le | PrimOp::Lt | PrimOp::Eq)
    }
}

/// Right-hand sides of `letloc`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LocExpr {
    /// Start of a region; factored regions give factored start locations.
    Start(String),
    /// One-cell bump of a single location.
    PlusOne(String),
    /// Just past the end of the value of `datatype` at `loc`.
    After { datatype: String, loc: String },
    /// Tag component of a factored location.
    ProjTag(String),
    /// Field component keyed by (constructor, field index).
    ProjField { ctor: String, field: usize, loc: String },
    /// Assemble a factored location from a tag location and components.
    IntroLocVec { tag_loc: String, entries: Vec<((String, usize), String)> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatField {
    Scalar(String),
    Packed { var: String, loc: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Branch {
    pub ctor: String,
    pub fields: Vec<PatField>,
    pub body: Expr,
}

/// A concrete location: a cell index within a region, or the factored
/// composite of such.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CLoc {
    Single { region: usize, index: usize },
    Factored { tag: Box<CLoc>, entries: Vec<((String, usize), CLoc)> },
}

impl CLoc {
    pub fn tag_cell(&self) -> (usize, usize) {
        match self {
            CLoc::Single { region, index } => (*region, *index),
            CLoc::Factored { tag, .. } => tag.tag_cell(),
        }
    }

    pub fn entry(&self, key: &(String, usize)) -> Option<&CLoc> {
        match self {
            CLoc::Single { .. } => None,
            CLoc::Factored { entries, .. } => {
                entries.iter().find(|(k, _)| k == key).map(|(_, c)| c)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Int(i64),
    Var(String),
    Prim(PrimOp, Box<Expr>, Box<Expr>),
    If(Box<Expr>, Box<Expr>, Box<Expr>),
    /// `datatype` is set for factored regions.
    LetRegion { region: String, datatype: Option<String>, body: Box<Expr> },
    LetLoc { loc: String, rhs: LocExpr, body: Box<Expr> },
    Let { var: String, ty: Ty, loc: Option<String>, rhs: Box<Expr>, body: Box<Expr> },
    /// Constructor write at a location. Scalar arguments are expressions;
    /// packed arguments must be variables bound to written values.
    Make { ctor: String, loc: String, args: Vec<Expr> },
    Case { scrutinee: Box<Expr>, branches: Vec<Branch> },
    Call { func: String, loc_args: Vec<String>, args: Vec<Expr> },
    /// Runtime only: a materialized pointer value.
    Ptr(CLoc),
}

impl Expr {
    pub fn is_value(&self) -> bool {
        matches!(self, Expr::Int(_) | Expr::Ptr(_))
    }

    /// Short rendering for traces and diagnostics.
    pub fn summary(&self) -> String {
        let full = format!("{self}");
        if full.len() <= 80 {
            full
        } else {
            format!("{}…", &full[..79])
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocMode {
    /// Attached to an already written input value.
    In,
    /// An output destination the function must write.
    Out,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocParam {
    pub name: String,
    pub datatype: String,
    pub mode: LocMode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunDef {
    pub name: String,
    pub loc_params: Vec<LocParam>,
    /// (name, type, location for located params).
    pub params: Vec<(String, Ty, Option<String>)>,
    pub ret: (Ty, Option<String>),
    pub body: Expr,
}

#[derive(Debug, Clone)]
pub struct Program {
    pub schema: Arc<AdtSchema>,
    pub funs: Vec<FunDef>,
    pub main: Expr,
}

impl Program {
    pub fn fun(&self, name: &str) -> Option<&FunDef> {
        self.funs.iter().find(|f| f.name == name)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Int(n) => write!(f, "{n}"),
            Expr::Var(x) => write!(f, "{x}"),
            Expr::Ptr(c) => write!(f, "ptr{:?}", c.tag_cell()),
            Expr::Prim(op, a, b) => write!(f, "({} {a} {b})", op.name()),
            Expr::If(c, t, e) => write!(f, "(if {c} {t} {e})"),
            Expr::LetRegion { region, datatype, body } => match datatype {
                Some(dt) => write!(f, "(letregion ({region} {dt}) {body})"),
                None => write!(f, "(letregion {region} {body})"),
            },
            Expr::LetLoc { loc, rhs, body } => write!(f, "(letloc ({loc} {rhs}) {body})"),
            Expr::Let { var, ty, loc, rhs, body } => match loc {
                Some(l) => write!(f, "(let ({var} {ty} {l}) {rhs} {body})"),
                None => write!(f, "(let ({var} {ty}) {rhs} {body})"),
            },
            Expr::Make { ctor, loc, args } => {
                write!(f, "(make {ctor} {loc}")?;
                for a in args {
                    write!(f, " {a}")?;
                }
                write!(f, ")")
            }
            Expr::Case { scrutinee, branches } => {
                write!(f, "(case {scrutinee}")?;
                for b in branches {
                    write!(f, " (({}", b.ctor)?;
                    for p in &b.fields {
                        match p {
                            PatField::Scalar(x) => write!(f, " {x}")?,
                            PatField::Packed { var, loc } => write!(f, " ({var} {loc})")?,
                        }
                    }
                    write!(f, ") {})", b.body)?;
                }
                write!(f, ")")
            }
            Expr::Call { func, loc_args, args } => {
                write!(f, "(call {func} (")?;
                for (i, l) in loc_args.iter().enumerate() {
                    if i > 0 {
                        write!(f, " ")?;
                    }
                    write!(f, "{l}")?;
                }
                write!(f, ") (")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, " ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, "))")
            }
        }
    }
}

impl fmt::Display for LocExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LocExpr::Start(r) => write!(f, "(start {r})"),
            LocExpr::PlusOne(l) => write!(f, "(+1 {l})"),
            LocExpr::After { datatype, loc } => write!(f, "(after {datatype} {loc})"),
            LocExpr::ProjTag(l) => write!(f, "(projtag {l})"),
            LocExpr::ProjField { ctor, field, loc } => {
                write!(f, "(projfield ({ctor} {field}) {loc})")
            }
            LocExpr::IntroLocVec { tag_loc, entries } => {
                write!(f, "(introlocvec {tag_loc}")?;
                for ((k, j), l) in entries {
                    write!(f, " (({k} {j}) {l})")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// The constraints accumulated by the checker; the executable form of the
/// paper's environment C.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Constraint {
    StartR(String),
    PlusOne(String),
    After { datatype: String, loc: String },
    ProjTag(String),
    ProjField { ctor: String, field: usize, loc: String },
    IntroLocVec { tag_loc: String, entries: Vec<((String, usize), String)> },
}

impl Constraint {
    pub fn kind(&self) -> &'static str {
        match self {
            Constraint::StartR(_) => "start",
            Constraint::PlusOne(_) => "+1",
            Constraint::After { .. } => "after",
            Constraint::ProjTag(_) => "projTagLoc",
            Constraint::ProjField { .. } => "projFieldLoc",
            Constraint::IntroLocVec { .. } => "introLocVec",
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constraint::StartR(r) => write!(f, "start {r}"),
            Constraint::PlusOne(l) => write!(f, "{l} + 1"),
            Constraint::After { datatype, loc } => write!(f, "after({datatype} @ {loc})"),
            Constraint::ProjTag(l) => write!(f, "projTagLoc {l}"),
            Constraint::ProjField { ctor, field, loc } => {
                write!(f, "projFieldLoc ({ctor},{field}) {loc}")
            }
            Constraint::IntroLocVec { tag_loc, entries } => {
                write!(f, "introLocVec {tag_loc} [")?;
                for (i, ((k, j), l)) in entries.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "({k},{j})→{l}")?;
                }
                write!(f, "]")
            }
        }
    }
}
