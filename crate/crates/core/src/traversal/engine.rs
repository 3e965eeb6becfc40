//! Fold and map execution over cursor bundles.

use std::hint::black_box;

use crate::layout::plan::CtorPlan;
use crate::layout::read::{bump, child_shape, read_header_masked, read_scalar, Header, RaSlots};
use crate::layout::write::OutBundle;
use crate::layout::{Counters, CursorBundle, FieldPlan, LayoutPlan, SerializedRoot};
use crate::region::{Address, RegionStore};
use crate::schema::Layout;

use super::{
    ChildRunner, Clause, ClauseEval, CursorMode, PassDef, PassKind, TraversalConfig, TraversalError,
};

/// Host-recursion budget for guided passes; they are tree-depth bounded.
const GUIDED_MAX_DEPTH: usize = 8192;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Style {
    Combine,
    Acc,
    Guided,
    Map,
}

pub(super) struct Engine<'a> {
    plan: &'a LayoutPlan,
    pass: &'a PassDef,
    store: &'a RegionStore,
    mode: CursorMode,
    max_depth: usize,
    style: Style,
    /// Clause table per shape id; `None` when the pass names no clauses for
    /// that shape's datatype.
    tables: Vec<Option<&'a [Clause]>>,
    /// Buffers in the transitive used-field closure. Cursors of dead
    /// buffers stay frozen and are never read.
    live: Vec<bool>,
    primary_dt: usize,
    counters: Counters,
    nodes: u64,
    depth: usize,
    scalars_scratch: Vec<i64>,
}

enum Work {
    Node(usize),
    Skip(usize),
    Restore { start: usize, saved: Vec<Address> },
    PopDepth,
}

impl<'a> Engine<'a> {
    pub fn new(
        plan: &'a LayoutPlan,
        pass: &'a PassDef,
        store: &'a RegionStore,
        mode: CursorMode,
        cfg: &TraversalConfig,
    ) -> Result<Engine<'a>, TraversalError> {
        let mut tables: Vec<Option<&[Clause]>> = Vec::with_capacity(plan.shape_count());
        let mut style = None;
        for id in 0..plan.shape_count() {
            let shape = plan.shape(id);
            let dt = &plan.schema.datatypes()[shape.dt];
            match pass.clauses.get(&dt.name) {
                None => tables.push(None),
                Some(t) => {
                    if t.len() != dt.constructors.len() {
                        return Err(TraversalError::PassMismatch(format!(
                            "pass `{}` has {} clauses for `{}`, schema has {} constructors",
                            pass.name,
                            t.len(),
                            dt.name,
                            dt.constructors.len()
                        )));
                    }
                    for (c, ctor) in t.iter().zip(&dt.constructors) {
                        if c.used.len() != ctor.fields.len() {
                            return Err(TraversalError::PassMismatch(format!(
                                "pass `{}`: mask length {} does not match arity {} of `{}`",
                                pass.name,
                                c.used.len(),
                                ctor.fields.len(),
                                ctor.name
                            )));
                        }
                        let s = match c.eval {
                            ClauseEval::Combine(_) => Style::Combine,
                            ClauseEval::Acc(_) => Style::Acc,
                            ClauseEval::Guided(_) => Style::Guided,
                            ClauseEval::Map(_) => Style::Map,
                        };
                        if *style.get_or_insert(s) != s {
                            return Err(TraversalError::PassMismatch(format!(
                                "pass `{}` mixes clause styles",
                                pass.name
                            )));
                        }
                    }
                    tables.push(Some(t.as_slice()));
                }
            }
        }
        let style = style.ok_or_else(|| {
            TraversalError::PassMismatch(format!("pass `{}` has no clauses", pass.name))
        })?;
        if (pass.kind == PassKind::Map) != (style == Style::Map) {
            return Err(TraversalError::PassMismatch(format!(
                "pass `{}` kind does not match its clause style",
                pass.name
            )));
        }

        let live = match style {
            Style::Map => vec![true; plan.width],
            _ => live_closure(plan, &tables),
        };
        Ok(Engine {
            plan,
            pass,
            store,
            mode,
            max_depth: cfg.max_depth,
            style,
            tables,
            live,
            primary_dt: plan.root().dt,
            counters: Counters::new(plan.width),
            nodes: 0,
            depth: 0,
            scalars_scratch: Vec::new(),
        })
    }

    pub fn into_parts(self) -> (Counters, u64) {
        (self.counters, self.nodes)
    }

    pub fn fold(&mut self, bundle: &mut Vec<Address>) -> Result<i64, TraversalError> {
        match self.style {
            Style::Acc => self.acc_fold(bundle),
            Style::Combine => self.combine_fold(bundle),
            Style::Guided => self.guided_node(bundle, 0, 1),
            Style::Map => unreachable!("maps run through Engine::map"),
        }
    }

    fn clause(&self, shape_id: usize, tag: u8) -> Result<&'a Clause, TraversalError> {
        let dt = self.plan.shape(shape_id).dt;
        self.tables[shape_id]
            .map(|t| &t[tag as usize])
            .ok_or_else(|| {
                TraversalError::PassMismatch(format!(
                    "pass `{}` has no clauses for `{}`",
                    self.pass.name,
                    self.plan.schema.datatypes()[dt].name
                ))
            })
    }

    fn consume_node(&mut self, bundle: &[Address], shape_dt: usize) {
        if shape_dt == self.primary_dt {
            self.nodes += 1;
        }
        if self.mode == CursorMode::Immutable {
            self.counters.bundle_copies += 1;
            // The copying baseline pays for a bundle copy at every recursive
            // boundary; make the cost real so wall time reflects it.
            black_box(CursorBundle { cursors: bundle.to_vec() });
        }
    }

    /// Read the scalar fields of one constructor into the scratch slice:
    /// used ones are read, dead ones are bumped in flat layouts and left
    /// frozen in factored ones. Dead slots report zero.
    fn read_scalars(
        &mut self,
        bundle: &mut [Address],
        shape_id: usize,
        tag: u8,
        used: &[bool],
    ) -> Result<(), TraversalError> {
        let shape = self.plan.shape(shape_id);
        let flat = shape.layout == Layout::Flat;
        self.scalars_scratch.clear();
        let ctor = &shape.ctors[tag as usize];
        for (idx, field) in ctor.fields.iter().enumerate() {
            if let FieldPlan::Scalar { buf } = field {
                if used[idx] {
                    let v = read_scalar(self.store, bundle, *buf, &mut self.counters)?;
                    self.scalars_scratch.push(v);
                } else {
                    if flat {
                        bump(self.store, &mut bundle[*buf], 8, &mut self.counters)?;
                        self.counters.bytes_read[*buf] += 8;
                        self.counters.steps += 1;
                    }
                    self.scalars_scratch.push(0);
                }
            }
        }
        Ok(())
    }

    /// Whether a packed field's buffer range contains anything live. Fully
    /// dead ranges are frozen rather than skipped.
    fn range_live(&self, range: (usize, usize)) -> bool {
        self.live[range.0..range.1].iter().any(|l| *l)
    }

    /// Skip one value, advancing only live buffers: tag streams are read,
    /// live dedicated scalar buffers are bumped without payload touches,
    /// fully dead nested ranges stay frozen.
    fn skip_masked(&mut self, bundle: &mut [Address], shape_id: usize) -> Result<(), TraversalError> {
        let plan = self.plan;
        let mut work = vec![shape_id];
        while let Some(id) = work.pop() {
            let shape = plan.shape(id);
            match read_header_masked(plan, self.store, shape, bundle, &mut self.counters, Some(&self.live))? {
                Header::Indir { .. } => {}
                Header::Ctor { tag, ra } => {
                    let ctor = &shape.ctors[tag as usize];
                    let flat = shape.layout == Layout::Flat;
                    for field in &ctor.fields {
                        if let FieldPlan::Scalar { buf } = field {
                            if self.live[*buf] {
                                bump(self.store, &mut bundle[*buf], 8, &mut self.counters)?;
                                if flat {
                                    self.counters.bytes_read[*buf] += 8;
                                }
                                self.counters.steps += 1;
                            }
                        }
                    }
                    if let Some(ra) = &ra {
                        if let Some(((start, end), addrs)) = ra.last() {
                            // Jump straight to the last packed field; the
                            // record covers everything before it.
                            bundle[*start..*end].copy_from_slice(addrs);
                            self.counters.steps += 1;
                            let fidx = *ctor.packed.last().unwrap();
                            if self.range_live(plan.field_range(shape, ctor.fields[fidx])) {
                                work.push(child_shape(id, ctor, fidx));
                            }
                            continue;
                        }
                    }
                    for &fidx in ctor.packed.iter().rev() {
                        if self.range_live(plan.field_range(shape, ctor.fields[fidx])) {
                            work.push(child_shape(id, ctor, fidx));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Queue a descent, applying the tail-call rule: with mutable cursors a
    /// last-child descent reuses the caller's frame and costs no depth.
    fn push_descent(
        &mut self,
        work: &mut Vec<Work>,
        child: usize,
        is_last: bool,
    ) -> Result<(), TraversalError> {
        if is_last && self.mode == CursorMode::Mutable {
            work.push(Work::Node(child));
        } else {
            self.depth += 1;
            if self.depth > self.max_depth {
                return Err(TraversalError::StackDepthExceeded(self.max_depth));
            }
            work.push(Work::PopDepth);
            work.push(Work::Node(child));
        }
        Ok(())
    }

    fn acc_fold(&mut self, bundle: &mut Vec<Address>) -> Result<i64, TraversalError> {
        let plan = self.plan;
        let mut acc = self.pass.initial;
        let mut work = vec![Work::Node(0)];
        while let Some(w) = work.pop() {
            match w {
                Work::PopDepth => self.depth -= 1,
                Work::Restore { start, saved } => {
                    bundle[start..start + saved.len()].copy_from_slice(&saved);
                }
                Work::Skip(shape_id) => self.skip_masked(bundle, shape_id)?,
                Work::Node(shape_id) => {
                    let shape = plan.shape(shape_id);
                    match read_header_masked(plan, self.store, shape, bundle, &mut self.counters, Some(&self.live))? {
                        Header::Indir { targets } => {
                            let saved = bundle[shape.buf_start..shape.buf_end].to_vec();
                            bundle[shape.buf_start..shape.buf_end].copy_from_slice(&targets);
                            work.push(Work::Restore { start: shape.buf_start, saved });
                            work.push(Work::Node(shape_id));
                        }
                        Header::Ctor { tag, .. } => {
                            self.consume_node(bundle, shape.dt);
                            let clause = self.clause(shape_id, tag)?;
                            let ClauseEval::Acc(f) = &clause.eval else { unreachable!() };
                            self.read_scalars(bundle, shape_id, tag, &clause.used)?;
                            acc = f(acc, &self.scalars_scratch);
                            let ctor = &shape.ctors[tag as usize];
                            let last_used =
                                ctor.packed.iter().rposition(|&fidx| clause.used[fidx]);
                            for (pos, &fidx) in ctor.packed.iter().enumerate().rev() {
                                let child = child_shape(shape_id, ctor, fidx);
                                if clause.used[fidx] {
                                    self.push_descent(&mut work, child, Some(pos) == last_used)?;
                                } else if self.range_live(plan.field_range(shape, ctor.fields[fidx]))
                                {
                                    work.push(Work::Skip(child));
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(acc)
    }

    fn combine_fold(&mut self, bundle: &mut Vec<Address>) -> Result<i64, TraversalError> {
        struct Frame<'a> {
            ctor: &'a CtorPlan,
            shape_id: usize,
            clause: &'a Clause,
            scalars: Vec<i64>,
            results: Vec<i64>,
            next_packed: usize,
            restores: Vec<(usize, Vec<Address>)>,
        }

        let plan = self.plan;
        let mut stack: Vec<Frame<'a>> = Vec::new();
        let mut entering = Some(0usize);

        loop {
            if let Some(shape_id) = entering.take() {
                if stack.len() >= self.max_depth {
                    return Err(TraversalError::StackDepthExceeded(self.max_depth));
                }
                let mut restores = Vec::new();
                let tag = loop {
                    let shape = plan.shape(shape_id);
                    match read_header_masked(plan, self.store, shape, bundle, &mut self.counters, Some(&self.live))? {
                        Header::Indir { targets } => {
                            let saved = bundle[shape.buf_start..shape.buf_end].to_vec();
                            bundle[shape.buf_start..shape.buf_end].copy_from_slice(&targets);
                            restores.push((shape.buf_start, saved));
                        }
                        Header::Ctor { tag, .. } => break tag,
                    }
                };
                let shape = plan.shape(shape_id);
                self.consume_node(bundle, shape.dt);
                let clause = self.clause(shape_id, tag)?;
                self.read_scalars(bundle, shape_id, tag, &clause.used)?;
                stack.push(Frame {
                    ctor: &shape.ctors[tag as usize],
                    shape_id,
                    clause,
                    scalars: std::mem::take(&mut self.scalars_scratch),
                    results: Vec::new(),
                    next_packed: 0,
                    restores,
                });
            }

            // Advance the top frame: skip dead children at the stream
            // position, descend into the next used one, or complete.
            let top = stack.last_mut().expect("a frame is always entered first");
            let mut descend = None;
            let mut skip = None;
            while top.next_packed < top.ctor.packed.len() {
                let fidx = top.ctor.packed[top.next_packed];
                top.next_packed += 1;
                let child = child_shape(top.shape_id, top.ctor, fidx);
                if top.clause.used[fidx] {
                    descend = Some(child);
                    break;
                }
                let range = plan.field_range(plan.shape(top.shape_id), top.ctor.fields[fidx]);
                if self.live[range.0..range.1].iter().any(|l| *l) {
                    top.next_packed -= 1;
                    skip = Some((child, fidx));
                    break;
                }
            }
            if let Some((child, _fidx)) = skip {
                let top = stack.last_mut().unwrap();
                top.next_packed += 1;
                self.skip_masked(bundle, child)?;
                continue;
            }
            match descend {
                Some(child) => {
                    entering = Some(child);
                }
                None => {
                    let frame = stack.pop().unwrap();
                    let ClauseEval::Combine(f) = &frame.clause.eval else { unreachable!() };
                    let result = f(&frame.scalars, &frame.results);
                    self.scalars_scratch = frame.scalars;
                    for (start, saved) in frame.restores.into_iter().rev() {
                        bundle[start..start + saved.len()].copy_from_slice(&saved);
                    }
                    match stack.last_mut() {
                        None => return Ok(result),
                        Some(parent) => parent.results.push(result),
                    }
                }
            }
        }
    }

    fn guided_node(
        &mut self,
        bundle: &mut Vec<Address>,
        shape_id: usize,
        depth: usize,
    ) -> Result<i64, TraversalError> {
        let cap = self.max_depth.min(GUIDED_MAX_DEPTH);
        if depth > cap {
            return Err(TraversalError::StackDepthExceeded(cap));
        }
        let plan = self.plan;
        let mut restores: Vec<(usize, Vec<Address>)> = Vec::new();
        let (tag, ra) = loop {
            let shape = plan.shape(shape_id);
            match read_header_masked(plan, self.store, shape, bundle, &mut self.counters, Some(&self.live))? {
                Header::Indir { targets } => {
                    let saved = bundle[shape.buf_start..shape.buf_end].to_vec();
                    bundle[shape.buf_start..shape.buf_end].copy_from_slice(&targets);
                    restores.push((shape.buf_start, saved));
                }
                Header::Ctor { tag, ra } => break (tag, ra),
            }
        };
        let shape = plan.shape(shape_id);
        self.consume_node(bundle, shape.dt);
        let clause = self.clause(shape_id, tag)?;
        self.read_scalars(bundle, shape_id, tag, &clause.used)?;
        let scalars = std::mem::take(&mut self.scalars_scratch);

        let ctor = &shape.ctors[tag as usize];
        let children: Vec<usize> = ctor
            .packed
            .iter()
            .map(|&fidx| child_shape(shape_id, ctor, fidx))
            .collect();
        let range = (shape.buf_start, shape.buf_end);
        let mut starts: Vec<Option<Vec<Address>>> = vec![None; children.len() + 1];
        starts[0] = Some(bundle[range.0..range.1].to_vec());
        if let Some(ra) = &ra {
            prime_starts_from_ra(ra, range, &mut starts);
        }

        let result = {
            let mut runner = Runner {
                engine: self,
                bundle,
                children: &children,
                range,
                starts: &mut starts,
                consumed: vec![false; children.len()],
                depth,
            };
            let ClauseEval::Guided(f) = &clause.eval else { unreachable!() };
            let r = f(&scalars, &mut runner)?;
            // Land on the end witness: resolve the final child boundary,
            // skipping whatever the clause left unvisited.
            runner.discover(children.len())?;
            r
        };
        self.scalars_scratch = scalars;
        bundle[range.0..range.1].copy_from_slice(starts[children.len()].as_ref().unwrap());
        for (start, saved) in restores.into_iter().rev() {
            bundle[start..start + saved.len()].copy_from_slice(&saved);
        }
        Ok(result)
    }

    pub fn map(
        &mut self,
        bundle: &mut Vec<Address>,
        out_store: &mut RegionStore,
    ) -> Result<SerializedRoot, TraversalError> {
        let plan = self.plan;
        let mut out = OutBundle::new(out_store, plan.width)?;
        let mut work = vec![Work::Node(0)];
        while let Some(w) = work.pop() {
            match w {
                Work::PopDepth => self.depth -= 1,
                Work::Skip(_) => unreachable!("maps traverse everything"),
                Work::Restore { start, saved } => {
                    bundle[start..start + saved.len()].copy_from_slice(&saved);
                }
                Work::Node(shape_id) => {
                    let shape = plan.shape(shape_id);
                    match read_header_masked(plan, self.store, shape, bundle, &mut self.counters, Some(&self.live))? {
                        Header::Indir { targets } => {
                            let saved = bundle[shape.buf_start..shape.buf_end].to_vec();
                            bundle[shape.buf_start..shape.buf_end].copy_from_slice(&targets);
                            work.push(Work::Restore { start: shape.buf_start, saved });
                            work.push(Work::Node(shape_id));
                        }
                        Header::Ctor { tag, .. } => {
                            self.consume_node(bundle, shape.dt);
                            let rewrite = match self.tables[shape_id] {
                                Some(t) => match &t[tag as usize].eval {
                                    ClauseEval::Map(f) => Some(f.clone()),
                                    _ => unreachable!(),
                                },
                                // Nested datatypes without clauses copy through.
                                None => None,
                            };
                            let ctor = &shape.ctors[tag as usize];
                            out.append(shape.tag_buf, &[tag])?;
                            self.counters.bytes_written[shape.tag_buf] += 1;
                            self.counters.steps += 1;
                            let mut scalar_pos = 0;
                            for field in &ctor.fields {
                                if let FieldPlan::Scalar { buf } = field {
                                    let v =
                                        read_scalar(self.store, bundle, *buf, &mut self.counters)?;
                                    let v = match &rewrite {
                                        Some(f) => f(scalar_pos, v),
                                        None => v,
                                    };
                                    out.append(*buf, &v.to_le_bytes())?;
                                    self.counters.bytes_written[*buf] += 8;
                                    self.counters.steps += 1;
                                    scalar_pos += 1;
                                }
                            }
                            let last = ctor.packed.len().saturating_sub(1);
                            for (pos, &fidx) in ctor.packed.iter().enumerate().rev() {
                                let child = child_shape(shape_id, ctor, fidx);
                                self.push_descent(&mut work, child, pos == last)?;
                            }
                        }
                    }
                }
            }
        }
        Ok(SerializedRoot::new(
            plan.schema.clone(),
            plan.datatype.clone(),
            plan.layout,
            CursorBundle { cursors: out.start.clone() },
            out.regions.clone(),
        ))
    }
}

/// Slot group g of a random-access record holds the start of packed field
/// g+1. Only full-range (self-recursive) groups give complete bundle
/// snapshots usable as child boundaries.
fn prime_starts_from_ra(ra: &RaSlots, range: (usize, usize), starts: &mut [Option<Vec<Address>>]) {
    for (g, (group_range, addrs)) in ra.iter().enumerate() {
        if *group_range == range {
            starts[g + 1] = Some(addrs.clone());
        }
    }
}

struct Runner<'e, 'b, 'a> {
    engine: &'e mut Engine<'a>,
    bundle: &'b mut Vec<Address>,
    children: &'e [usize],
    range: (usize, usize),
    starts: &'e mut Vec<Option<Vec<Address>>>,
    consumed: Vec<bool>,
    depth: usize,
}

impl ChildRunner for Runner<'_, '_, '_> {
    fn child_count(&self) -> usize {
        self.children.len()
    }

    fn run(&mut self, idx: usize) -> Result<i64, TraversalError> {
        if self.consumed[idx] {
            return Err(TraversalError::PassMismatch(format!("child {idx} folded twice")));
        }
        self.discover(idx)?;
        let start = self.starts[idx].as_ref().unwrap().clone();
        self.bundle[self.range.0..self.range.1].copy_from_slice(&start);
        let r = self.engine.guided_node(self.bundle, self.children[idx], self.depth + 1)?;
        self.consumed[idx] = true;
        self.starts[idx + 1] = Some(self.bundle[self.range.0..self.range.1].to_vec());
        Ok(r)
    }
}

impl Runner<'_, '_, '_> {
    /// Make child boundary `idx` known, skipping unconsumed earlier
    /// children. Boundaries already primed from a random-access record cost
    /// nothing.
    fn discover(&mut self, idx: usize) -> Result<(), TraversalError> {
        for j in 0..idx {
            if self.starts[j + 1].is_some() {
                continue;
            }
            debug_assert!(!self.consumed[j], "consumed children record their end");
            let prev = self.starts[j].as_ref().unwrap().clone();
            self.bundle[self.range.0..self.range.1].copy_from_slice(&prev);
            self.engine.skip_masked(self.bundle, self.children[j])?;
            self.starts[j + 1] = Some(self.bundle[self.range.0..self.range.1].to_vec());
        }
        Ok(())
    }
}

/// Buffers reachable through used fields, starting from the root shape.
fn live_closure(plan: &LayoutPlan, tables: &[Option<&[Clause]>]) -> Vec<bool> {
    let mut live = vec![false; plan.width];
    let mut visited = vec![false; plan.shape_count()];
    let mut stack = vec![0usize];
    while let Some(id) = stack.pop() {
        if visited[id] {
            continue;
        }
        visited[id] = true;
        let shape = plan.shape(id);
        live[shape.tag_buf] = true;
        for (tag, ctor) in shape.ctors.iter().enumerate() {
            for (idx, field) in ctor.fields.iter().enumerate() {
                let used = match tables[id] {
                    Some(t) => t[tag].used[idx],
                    // No clause table: conservatively treat all fields used.
                    None => true,
                };
                if !used {
                    continue;
                }
                match field {
                    FieldPlan::Scalar { buf } => live[*buf] = true,
                    FieldPlan::SelfRec => {}
                    FieldPlan::Nested { shape } => stack.push(*shape),
                }
            }
        }
    }
    live
}
