//! Schema-driven folds and maps over serialized values.
//!
//! A pass carries one clause per constructor: a used-field mask plus an
//! evaluation function. Folds come in three styles: `Combine` passes reduce
//! child results bottom-up, `Acc` passes thread an accumulator through the
//! preorder stream, and `Guided` passes get explicit control over which
//! children to traverse and in what order (range queries, nearest-neighbor
//! pruning). Maps rewrite scalar fields into a freshly written output value.
//!
//! Traversals run in one of two cursor modes. `Mutable` threads a single
//! cursor bundle updated in place. `Immutable` additionally copies the
//! bundle once per consumed constructor, modeling the copying baseline;
//! results and byte/step counters are identical across modes, only the
//! bundle-copy counter and wall time differ.
//!
//! In factored layouts, buffers outside a fold's transitive used-field
//! closure are never touched: their cursors stay frozen and their
//! `bytes_read` is exactly zero.

mod engine;
mod passes;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::layout::{Counters, LayoutError, LayoutPlan, SerializedRoot};
use crate::region::RegionStore;
use crate::schema::{AdtSchema, Layout};

pub use crate::layout::skip_value as skip_value_raw;
pub use passes::{builtin_passes, PassRegistry, RegisteredPass, KD_QUERY_BOX, KD_QUERY_POINT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum CursorMode {
    Immutable,
    Mutable,
}

impl CursorMode {
    pub fn name(&self) -> &'static str {
        match self {
            CursorMode::Immutable => "immutable",
            CursorMode::Mutable => "mutable",
        }
    }

    pub fn parse(s: &str) -> Option<CursorMode> {
        match s.to_ascii_lowercase().as_str() {
            "immutable" => Some(CursorMode::Immutable),
            "mutable" => Some(CursorMode::Mutable),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassKind {
    Fold,
    Map,
}

/// Explicit child control handed to guided fold clauses. Children are
/// identified by their position among the constructor's packed fields; any
/// child neither run nor skipped when the clause returns is skipped by the
/// engine to reach the value's end witness.
pub trait ChildRunner {
    fn child_count(&self) -> usize;
    /// Fold one child and return its result. Children may be run out of
    /// order; unvisited earlier siblings are located by skipping or via a
    /// random-access record when present.
    fn run(&mut self, idx: usize) -> Result<i64, TraversalError>;
}

pub type CombineFn = Arc<dyn Fn(&[i64], &[i64]) -> i64 + Send + Sync>;
pub type AccFn = Arc<dyn Fn(i64, &[i64]) -> i64 + Send + Sync>;
pub type GuidedFn = Arc<dyn Fn(&[i64], &mut dyn ChildRunner) -> Result<i64, TraversalError> + Send + Sync>;
pub type RewriteFn = Arc<dyn Fn(usize, i64) -> i64 + Send + Sync>;

/// One per-constructor clause: the used-field mask plus the evaluation hook
/// for the pass's style.
#[derive(Clone)]
pub struct Clause {
    /// One flag per constructor field, scalars and packed alike.
    pub used: Vec<bool>,
    pub eval: ClauseEval,
}

#[derive(Clone)]
pub enum ClauseEval {
    /// `f(scalars, child_results)`; masked-out children are skipped and
    /// contribute no result. Scalar slots masked out read as zero.
    Combine(CombineFn),
    /// `acc' = f(acc, scalars)` applied in preorder.
    Acc(AccFn),
    /// Full control over child traversal.
    Guided(GuidedFn),
    /// `new = f(scalar_index, old)` per scalar field; packed fields are
    /// copied structurally.
    Map(RewriteFn),
}

/// A declarative fold or map over a schema. Clause tables are keyed by
/// datatype name so passes can descend into nested datatypes.
#[derive(Clone)]
pub struct PassDef {
    pub name: String,
    /// The datatype the pass starts at.
    pub datatype: String,
    pub kind: PassKind,
    /// Initial accumulator for `Acc`-style folds.
    pub initial: i64,
    /// Per-datatype clause tables, indexed by constructor tag.
    pub clauses: HashMap<String, Vec<Clause>>,
}

impl PassDef {
    /// Mask-derived dead-field fraction over the pass's primary datatype:
    /// unused fields divided by total constructor arity.
    pub fn dead_fraction(&self) -> f64 {
        let Some(table) = self.clauses.get(&self.datatype) else {
            return 0.0;
        };
        let total: usize = table.iter().map(|c| c.used.len()).sum();
        let dead: usize = table
            .iter()
            .map(|c| c.used.iter().filter(|u| !**u).count())
            .sum();
        if total == 0 {
            0.0
        } else {
            dead as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TraversalError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("recursion depth exceeded the configured cap of {0}")]
    StackDepthExceeded(usize),
    #[error("pass does not fit this value: {0}")]
    PassMismatch(String),
}

#[derive(Debug, Clone)]
pub struct TraversalConfig {
    /// Cap on traversal recursion depth (nodes deep).
    pub max_depth: usize,
}

impl Default for TraversalConfig {
    fn default() -> Self {
        TraversalConfig { max_depth: 1 << 20 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BufferCounters {
    pub role: String,
    pub bytes_read: u64,
    pub bytes_written: u64,
}

/// Outcome of one traversal: the result plus deterministic counters. Byte
/// and step counters are a function of (schema, layout, pass, input);
/// `wall_ns` is not.
#[derive(Debug, serde::Serialize)]
pub struct TraversalReport {
    pub pass: String,
    pub layout: Layout,
    #[serde(serialize_with = "ser_mode")]
    pub mode: CursorMode,
    /// Primary-datatype constructors consumed by the pass proper.
    pub n: u64,
    /// Fold result; `None` for maps.
    pub result: Option<i64>,
    pub buffers: Vec<BufferCounters>,
    pub steps: u64,
    pub bundle_copies: u64,
    pub wall_ns: u64,
    pub dead_fraction: f64,
    /// Freshly written output of a map pass.
    #[serde(skip)]
    pub output: Option<SerializedRoot>,
}

fn ser_mode<S: serde::Serializer>(m: &CursorMode, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(m.name())
}

impl TraversalReport {
    pub fn total_bytes_read(&self) -> u64 {
        self.buffers.iter().map(|b| b.bytes_read).sum()
    }

    pub fn total_bytes_written(&self) -> u64 {
        self.buffers.iter().map(|b| b.bytes_written).sum()
    }
}

fn make_report(
    pass: &PassDef,
    plan: &LayoutPlan,
    mode: CursorMode,
    n: u64,
    result: Option<i64>,
    output: Option<SerializedRoot>,
    counters: Counters,
    wall_ns: u64,
) -> TraversalReport {
    let buffers = plan
        .roles
        .iter()
        .enumerate()
        .map(|(i, role)| BufferCounters {
            role: role.clone(),
            bytes_read: counters.bytes_read[i],
            bytes_written: counters.bytes_written[i],
        })
        .collect();
    TraversalReport {
        pass: pass.name.clone(),
        layout: plan.layout,
        mode,
        n,
        result,
        buffers,
        steps: counters.steps,
        bundle_copies: counters.bundle_copies,
        wall_ns,
        dead_fraction: pass.dead_fraction(),
        output,
    }
}

/// Fold one value starting at an explicit bundle position, leaving the
/// bundle at the value's end witness (frozen dead buffers excepted).
pub fn fold_at(
    schema: &Arc<AdtSchema>,
    datatype: &str,
    pass: &PassDef,
    bundle: &mut Vec<crate::region::Address>,
    store: &RegionStore,
    mode: CursorMode,
    cfg: &TraversalConfig,
) -> Result<(i64, Counters), TraversalError> {
    let plan = LayoutPlan::new(schema.clone(), datatype)?;
    let mut eng = engine::Engine::new(&plan, pass, store, mode, cfg)?;
    let result = eng.fold(bundle)?;
    let (counters, _) = eng.into_parts();
    Ok((result, counters))
}

/// Run a fold pass over a serialized root.
pub fn run_fold(
    schema: &Arc<AdtSchema>,
    pass: &PassDef,
    root: &SerializedRoot,
    store: &RegionStore,
    mode: CursorMode,
    cfg: &TraversalConfig,
) -> Result<TraversalReport, TraversalError> {
    if pass.kind != PassKind::Fold {
        return Err(TraversalError::PassMismatch(format!("`{}` is not a fold", pass.name)));
    }
    if root.datatype != pass.datatype {
        return Err(TraversalError::PassMismatch(format!(
            "pass `{}` is over `{}`, root holds `{}`",
            pass.name, pass.datatype, root.datatype
        )));
    }
    let plan = LayoutPlan::new(schema.clone(), &root.datatype)?;
    let mut eng = engine::Engine::new(&plan, pass, store, mode, cfg)?;
    let mut bundle = root.bundle.cursors.clone();
    let start = Instant::now();
    let result = eng.fold(&mut bundle)?;
    let wall_ns = start.elapsed().as_nanos() as u64;
    let (counters, n) = eng.into_parts();
    Ok(make_report(pass, &plan, mode, n, Some(result), None, counters, wall_ns))
}

/// Run a map pass, writing the fresh value into `out_store`.
pub fn run_map(
    schema: &Arc<AdtSchema>,
    pass: &PassDef,
    root: &SerializedRoot,
    store: &RegionStore,
    out_store: &mut RegionStore,
    mode: CursorMode,
    cfg: &TraversalConfig,
) -> Result<TraversalReport, TraversalError> {
    if pass.kind != PassKind::Map {
        return Err(TraversalError::PassMismatch(format!("`{}` is not a map", pass.name)));
    }
    if root.datatype != pass.datatype {
        return Err(TraversalError::PassMismatch(format!(
            "pass `{}` is over `{}`, root holds `{}`",
            pass.name, pass.datatype, root.datatype
        )));
    }
    let plan = LayoutPlan::new(schema.clone(), &root.datatype)?;
    let mut eng = engine::Engine::new(&plan, pass, store, mode, cfg)?;
    let mut bundle = root.bundle.cursors.clone();
    let start = Instant::now();
    let output = eng.map(&mut bundle, out_store)?;
    let wall_ns = start.elapsed().as_nanos() as u64;
    let (counters, n) = eng.into_parts();
    Ok(make_report(pass, &plan, mode, n, None, Some(output), counters, wall_ns))
}

/// Advance a bundle from a value's start to its end witness in every
/// participating buffer.
pub fn skip_value(
    plan: &LayoutPlan,
    store: &RegionStore,
    bundle: &mut Vec<crate::region::Address>,
    counters: &mut Counters,
) -> Result<(), TraversalError> {
    crate::layout::skip_value(plan, store, bundle, counters).map_err(TraversalError::from)
}
