//! An executable location calculus: parser, static checker, store
//! interpreter, end-witness computation, store well-formedness, and a
//! type-safety fuzzer.
//!
//! The calculus works in cells: one cell holds one constructor tag or one
//! integer. Byte widths exist only in the layout module; the bridge between
//! the two maps a tag cell to one byte and an integer cell to eight.

pub mod ast;
mod check;
mod fuzz;
mod interp;
mod parse;
mod wf;

use thiserror::Error;

pub use ast::{Branch, CLoc, Constraint, Expr, FunDef, LocExpr, LocMode, LocParam, PatField, Program, Ty};
pub use check::{typecheck, CheckError, CheckOutcome, RejectReason, TraceStep};
pub use fuzz::{fuzz_type_safety, generate_program, FuzzOptions, FuzzSummary, GeneratedProgram};
pub use interp::{
    end_witness, eval_pure, first_child_cloc, interpret, read_store_value, run, store_of_value,
    AllocFocus, Cell, CellStore, Interp, InterpOptions, RegionCells, RtVal, RunOutcome, StepTrace,
};
pub use wf::{check_well_formed, poke, WfReport, WfViolation};

#[derive(Debug, Clone, Error)]
pub enum SocalError {
    #[error("syntax error at line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("unbound name `{0}`")]
    UnboundName(String),
    #[error("stuck in {rule}: {detail}")]
    Stuck { rule: String, detail: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("step limit {0} exceeded")]
    StepLimit(u64),
}

pub use parse::parse_socal;
