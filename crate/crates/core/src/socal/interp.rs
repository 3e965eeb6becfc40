//! Small-step store interpreter.
//!
//! The store maps regions to cell heaps; a cell holds one constructor tag
//! or one integer. The location map M takes symbolic locations to concrete
//! cells. Each dynamic rule also maintains the static environments (written
//! roots, constraints, allocation foci, nursery) so store well-formedness
//! can be checked after every step.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::layout::{Arg, Value};
use crate::schema::{buffer_shape, AdtSchema, BufferRef, BufferShape, FieldType, Layout};

use super::ast::*;
use super::check::region_components;
use super::SocalError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Cell {
    Tag { datatype: String, tag: u8 },
    Int(i64),
}

#[derive(Debug, Clone, Default)]
pub struct RegionCells {
    pub name: String,
    pub cells: Vec<Option<Cell>>,
    /// Write count per cell; well-formedness demands at most one.
    pub writes: Vec<u32>,
}

impl RegionCells {
    pub fn max_written(&self) -> Option<usize> {
        self.cells.iter().rposition(|c| c.is_some())
    }
}

#[derive(Debug, Clone, Default)]
pub struct CellStore {
    pub regions: Vec<RegionCells>,
}

impl CellStore {
    pub fn new_region(&mut self, name: String) -> usize {
        self.regions.push(RegionCells { name, cells: Vec::new(), writes: Vec::new() });
        self.regions.len() - 1
    }

    pub fn write(&mut self, region: usize, index: usize, cell: Cell) {
        let r = &mut self.regions[region];
        if r.cells.len() <= index {
            r.cells.resize(index + 1, None);
            r.writes.resize(index + 1, 0);
        }
        r.cells[index] = Some(cell);
        r.writes[index] += 1;
    }

    pub fn read(&self, region: usize, index: usize) -> Option<&Cell> {
        self.regions.get(region)?.cells.get(index)?.as_ref()
    }
}

#[derive(Debug, Clone)]
pub enum RegionHandle {
    Single(usize),
    Factored { datatype: String, components: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AllocFocus {
    Empty,
    At(String),
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct StepTrace {
    pub rule: String,
    pub e: String,
    #[serde(rename = "A")]
    pub a: BTreeMap<String, String>,
    #[serde(rename = "N")]
    pub n: BTreeSet<String>,
    pub c_delta: Vec<(String, String)>,
}

/// Runtime state plus the threaded static mirror.
pub struct Interp<'p> {
    pub program: &'p Program,
    pub store: CellStore,
    pub m: HashMap<String, CLoc>,
    pub sigma: HashMap<String, String>,
    pub constraints: Vec<(String, Constraint)>,
    pub nursery: BTreeSet<String>,
    pub alloc: BTreeMap<String, AllocFocus>,
    regions: HashMap<String, RegionHandle>,
    fresh: u64,
}

#[derive(Debug, Clone)]
pub enum RtVal {
    Int(i64),
    Located { datatype: String, cloc: CLoc, value: Value },
}

#[derive(Debug, Clone, Default)]
pub struct InterpOptions {
    pub collect_trace: bool,
    pub max_steps: u64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub result: RtVal,
    pub steps: u64,
    pub trace: Vec<StepTrace>,
}

pub struct Stepped {
    pub expr: Expr,
    pub rule: &'static str,
    pub c_delta: Vec<(String, Constraint)>,
}

impl<'p> Interp<'p> {
    pub fn new(program: &'p Program) -> Interp<'p> {
        Interp {
            program,
            store: CellStore::default(),
            m: HashMap::new(),
            sigma: HashMap::new(),
            constraints: Vec::new(),
            nursery: BTreeSet::new(),
            alloc: BTreeMap::new(),
            regions: HashMap::new(),
            fresh: 0,
        }
    }

    fn fresh_name(&mut self, base: &str) -> String {
        self.fresh += 1;
        format!("{base}${}", self.fresh)
    }

    fn stuck<T>(&self, rule: &str, detail: impl Into<String>) -> Result<T, SocalError> {
        Err(SocalError::Stuck { rule: rule.to_string(), detail: detail.into() })
    }

    /// One small step. The returned expression replaces the input.
    pub fn step(&mut self, e: Expr) -> Result<Stepped, SocalError> {
        match e {
            Expr::Int(_) | Expr::Ptr(_) | Expr::Var(_) => {
                self.stuck("D-Var", "free variable or value cannot step")
            }
            Expr::Prim(op, a, b) => {
                if !a.is_value() {
                    let s = self.step(*a)?;
                    return Ok(Stepped {
                        expr: Expr::Prim(op, Box::new(s.expr), b),
                        rule: s.rule,
                        c_delta: s.c_delta,
                    });
                }
                if !b.is_value() {
                    let s = self.step(*b)?;
                    return Ok(Stepped {
                        expr: Expr::Prim(op, a, Box::new(s.expr)),
                        rule: s.rule,
                        c_delta: s.c_delta,
                    });
                }
                let (Expr::Int(x), Expr::Int(y)) = (a.as_ref(), b.as_ref()) else {
                    return self.stuck("D-Prim", "primitive over non-integers");
                };
                let r = match op {
                    PrimOp::Add => x.wrapping_add(*y),
                    PrimOp::Sub => x.wrapping_sub(*y),
                    PrimOp::Mul => x.wrapping_mul(*y),
                    PrimOp::Le => (x <= y) as i64,
                    PrimOp::Lt => (x < y) as i64,
                    PrimOp::Eq => (x == y) as i64,
                };
                Ok(Stepped { expr: Expr::Int(r), rule: "D-Prim", c_delta: vec![] })
            }
            Expr::If(c, t, f) => {
                if !c.is_value() {
                    let s = self.step(*c)?;
                    return Ok(Stepped {
                        expr: Expr::If(Box::new(s.expr), t, f),
                        rule: s.rule,
                        c_delta: s.c_delta,
                    });
                }
                let Expr::Int(v) = c.as_ref() else {
                    return self.stuck("D-If", "condition is not a boolean");
                };
                Ok(Stepped { expr: if *v != 0 { *t } else { *f }, rule: "D-If", c_delta: vec![] })
            }
            Expr::LetRegion { region, datatype, body } => {
                let fresh = self.fresh_name(&region);
                match &datatype {
                    None => {
                        let idx = self.store.new_region(fresh.clone());
                        self.regions.insert(fresh.clone(), RegionHandle::Single(idx));
                        self.alloc.insert(fresh.clone(), AllocFocus::Empty);
                    }
                    Some(dt) => {
                        let comps = region_components(&self.program.schema, dt, &fresh)
                            .into_iter()
                            .map(|name| {
                                self.alloc.insert(name.clone(), AllocFocus::Empty);
                                self.store.new_region(name)
                            })
                            .collect();
                        self.regions.insert(
                            fresh.clone(),
                            RegionHandle::Factored { datatype: dt.clone(), components: comps },
                        );
                    }
                }
                let body = subst_region(*body, &region, &fresh);
                Ok(Stepped { expr: body, rule: "D-LetRegion", c_delta: vec![] })
            }
            Expr::LetLoc { loc, rhs, body } => {
                let fresh = self.fresh_name(&loc);
                let (cloc, rule, constraint) = self.eval_loc_expr(&rhs)?;
                self.m.insert(fresh.clone(), cloc.clone());
                self.nursery.insert(fresh.clone());
                self.focus_cloc(&cloc, &fresh);
                let body = subst_loc(*body, &loc, &fresh);
                Ok(Stepped {
                    expr: body,
                    rule,
                    c_delta: vec![(fresh, constraint)],
                })
            }
            Expr::Let { var, ty, loc, rhs, body } => {
                if !rhs.is_value() {
                    let s = self.step(*rhs)?;
                    return Ok(Stepped {
                        expr: Expr::Let { var, ty, loc, rhs: Box::new(s.expr), body },
                        rule: s.rule,
                        c_delta: s.c_delta,
                    });
                }
                Ok(Stepped { expr: subst_var(*body, &var, &rhs), rule: "D-Let", c_delta: vec![] })
            }
            Expr::Make { ctor, loc, mut args } => {
                for a in args.iter_mut() {
                    if !a.is_value() {
                        let s = self.step(std::mem::replace(a, Expr::Int(0)))?;
                        *a = s.expr;
                        return Ok(Stepped {
                            expr: Expr::Make { ctor, loc, args },
                            rule: s.rule,
                            c_delta: s.c_delta,
                        });
                    }
                }
                self.write_ctor(&ctor, &loc, &args)
            }
            Expr::Case { scrutinee, branches } => {
                if !scrutinee.is_value() {
                    let s = self.step(*scrutinee)?;
                    return Ok(Stepped {
                        expr: Expr::Case { scrutinee: Box::new(s.expr), branches },
                        rule: s.rule,
                        c_delta: s.c_delta,
                    });
                }
                let Expr::Ptr(cloc) = scrutinee.as_ref() else {
                    return self.stuck("D-Case", "scrutinee is not a pointer");
                };
                self.case_step(cloc.clone(), branches)
            }
            Expr::Call { func, loc_args, mut args } => {
                for a in args.iter_mut() {
                    if !a.is_value() {
                        let s = self.step(std::mem::replace(a, Expr::Int(0)))?;
                        *a = s.expr;
                        return Ok(Stepped {
                            expr: Expr::Call { func, loc_args, args },
                            rule: s.rule,
                            c_delta: s.c_delta,
                        });
                    }
                }
                let Some(f) = self.program.fun(&func) else {
                    return self.stuck("D-App", format!("unknown function `{func}`"));
                };
                if f.loc_params.len() != loc_args.len() || f.params.len() != args.len() {
                    return self.stuck("D-App", format!("arity mismatch calling `{func}`"));
                }
                let mut body = self.freshen(&f.body);
                for (lp, actual) in f.loc_params.iter().zip(&loc_args) {
                    body = subst_loc(body, &lp.name, actual);
                }
                for ((pname, _, _), arg) in f.params.iter().zip(args) {
                    body = subst_var(body, pname, &arg);
                }
                Ok(Stepped { expr: body, rule: "D-App", c_delta: vec![] })
            }
        }
    }

    fn eval_loc_expr(
        &mut self,
        rhs: &LocExpr,
    ) -> Result<(CLoc, &'static str, Constraint), SocalError> {
        match rhs {
            LocExpr::Start(r) => {
                let handle = self
                    .regions
                    .get(r)
                    .cloned()
                    .ok_or_else(|| SocalError::Stuck {
                        rule: "D-LetLoc-Start".into(),
                        detail: format!("unbound region `{r}`"),
                    })?;
                let cloc = match handle {
                    RegionHandle::Single(idx) => CLoc::Single { region: idx, index: 0 },
                    RegionHandle::Factored { datatype, components } => {
                        let shape = buffer_shape(&self.program.schema, &datatype).expect("validated");
                        let mut it = components.into_iter();
                        start_cloc(&shape, &mut it)
                    }
                };
                Ok((cloc, "D-LetLoc-Start", Constraint::StartR(r.clone())))
            }
            LocExpr::PlusOne(l) => match self.m.get(l) {
                Some(CLoc::Single { region, index }) => Ok((
                    CLoc::Single { region: *region, index: index + 1 },
                    "D-LetLoc-Tag",
                    Constraint::PlusOne(l.clone()),
                )),
                _ => self.stuck("D-LetLoc-Tag", format!("`{l}` is not a single location")),
            },
            LocExpr::After { datatype, loc } => {
                let src = self
                    .m
                    .get(loc)
                    .cloned()
                    .ok_or_else(|| SocalError::Stuck {
                        rule: "D-LetLoc-After".into(),
                        detail: format!("unbound location `{loc}`"),
                    })?;
                let end = end_witness(&self.store, &self.program.schema, datatype, &src)
                    .map_err(|e| SocalError::Stuck { rule: "D-LetLoc-After".into(), detail: e })?;
                Ok((
                    end,
                    "D-LetLoc-After",
                    Constraint::After { datatype: datatype.clone(), loc: loc.clone() },
                ))
            }
            LocExpr::ProjTag(l) => match self.m.get(l) {
                Some(CLoc::Factored { tag, .. }) => {
                    Ok(((**tag).clone(), "D-LetLoc-ProjTag", Constraint::ProjTag(l.clone())))
                }
                _ => self.stuck("D-LetLoc-ProjTag", format!("`{l}` is not factored")),
            },
            LocExpr::ProjField { ctor, field, loc } => {
                let key = (ctor.clone(), *field);
                match self.m.get(loc).and_then(|c| c.entry(&key)) {
                    Some(sub) => Ok((
                        sub.clone(),
                        "D-LetLoc-ProjField",
                        Constraint::ProjField { ctor: ctor.clone(), field: *field, loc: loc.clone() },
                    )),
                    None => self.stuck(
                        "D-LetLoc-ProjField",
                        format!("no component ({ctor},{field}) in `{loc}`"),
                    ),
                }
            }
            LocExpr::IntroLocVec { tag_loc, entries } => {
                let tag = self
                    .m
                    .get(tag_loc)
                    .cloned()
                    .ok_or_else(|| SocalError::Stuck {
                        rule: "D-LetLoc-IntroVec".into(),
                        detail: format!("unbound location `{tag_loc}`"),
                    })?;
                let mut resolved = Vec::new();
                for (key, l) in entries {
                    let c = self.m.get(l).cloned().ok_or_else(|| SocalError::Stuck {
                        rule: "D-LetLoc-IntroVec".into(),
                        detail: format!("unbound location `{l}`"),
                    })?;
                    resolved.push((key.clone(), c));
                }
                // Ownership transfer mirrors the static rule.
                self.nursery.remove(tag_loc);
                for (_, l) in entries {
                    self.nursery.remove(l);
                }
                Ok((
                    CLoc::Factored { tag: Box::new(tag), entries: resolved },
                    "D-LetLoc-IntroVec",
                    Constraint::IntroLocVec { tag_loc: tag_loc.clone(), entries: entries.clone() },
                ))
            }
        }
    }

    fn write_ctor(&mut self, ctor: &str, loc: &str, args: &[Expr]) -> Result<Stepped, SocalError> {
        let Some(dt) = self
            .program
            .schema
            .datatypes()
            .iter()
            .find(|d| d.constructor(ctor).is_some())
            .cloned()
        else {
            return self.stuck("D-DataConstructor", format!("unknown constructor `{ctor}`"));
        };
        let c = dt.constructor(ctor).unwrap().clone();
        let Some(cloc) = self.m.get(loc).cloned() else {
            return self.stuck("D-DataConstructor", format!("unbound location `{loc}`"));
        };
        if c.fields.len() != args.len() {
            return self.stuck("D-DataConstructor", format!("arity mismatch writing `{ctor}`"));
        }
        let rule = match (&cloc, dt.layout) {
            (CLoc::Single { .. }, Layout::Flat) => "D-DataConstructor",
            (CLoc::Factored { .. }, Layout::Factored) => "D-DataConstructor-FullyFactored",
            _ => return self.stuck("D-DataConstructor", "location shape does not match the layout"),
        };

        let mut written: Vec<(usize, usize)> = Vec::new();
        let (tr, ti) = cloc.tag_cell();
        self.store.write(tr, ti, Cell::Tag { datatype: dt.name.clone(), tag: c.tag });
        written.push((tr, ti));
        let mut int_offset = 1;
        for (j, (field, arg)) in c.fields.iter().zip(args).enumerate() {
            match field {
                FieldType::Int => {
                    let Expr::Int(v) = arg else {
                        return self.stuck(rule, "scalar field is not an integer value");
                    };
                    let (r, i) = match &cloc {
                        CLoc::Single { region, index } => (*region, index + int_offset),
                        CLoc::Factored { .. } => match cloc.entry(&(ctor.to_string(), j)) {
                            Some(CLoc::Single { region, index }) => (*region, *index),
                            _ => return self.stuck(rule, format!("missing scalar component ({ctor},{j})")),
                        },
                    };
                    self.store.write(r, i, Cell::Int(*v));
                    written.push((r, i));
                    int_offset += 1;
                }
                FieldType::Packed(_) => {
                    if !matches!(arg, Expr::Ptr(_)) {
                        return self.stuck(rule, "packed field is not a written value");
                    }
                }
            }
        }

        self.sigma.insert(loc.to_string(), dt.name.clone());
        self.nursery.remove(loc);
        let written_set: std::collections::HashSet<(usize, usize)> = written.into_iter().collect();
        let m = &self.m;
        self.nursery.retain(|n| match m.get(n) {
            Some(c) => !written_set.contains(&c.tag_cell()),
            None => true,
        });
        self.focus_cloc(&cloc, loc);
        Ok(Stepped { expr: Expr::Ptr(cloc), rule, c_delta: vec![] })
    }

    fn case_step(&mut self, cloc: CLoc, branches: Vec<Branch>) -> Result<Stepped, SocalError> {
        let (tr, ti) = cloc.tag_cell();
        let Some(Cell::Tag { datatype, tag }) = self.store.read(tr, ti).cloned() else {
            return self.stuck("D-Case", "scrutinee tag cell is unwritten or not a tag");
        };
        let dt = self.program.schema.get(&datatype).expect("tag names a datatype").clone();
        let ctor = dt.constructors[tag as usize].clone();
        let Some(branch) = branches.into_iter().find(|b| b.ctor == ctor.name) else {
            return self.stuck("D-Case", format!("no branch for `{}`", ctor.name));
        };
        if branch.fields.len() != ctor.fields.len() {
            return self.stuck("D-Case", format!("pattern arity mismatch for `{}`", ctor.name));
        }

        let mut body = branch.body;
        let mut prev: Option<(String, CLoc)> = None;
        let mut int_offset = 1usize;
        for (j, (field, pat)) in ctor.fields.iter().zip(branch.fields).enumerate() {
            match (field, pat) {
                (FieldType::Int, PatField::Scalar(x)) => {
                    let (r, i) = match &cloc {
                        CLoc::Single { region, index } => (*region, index + int_offset),
                        CLoc::Factored { .. } => match cloc.entry(&(ctor.name.clone(), j)) {
                            Some(CLoc::Single { region, index }) => (*region, *index),
                            _ => return self.stuck("D-Case", "missing scalar component"),
                        },
                    };
                    let Some(Cell::Int(v)) = self.store.read(r, i).cloned() else {
                        return self.stuck("D-Case", "scalar field cell is unwritten");
                    };
                    body = subst_var(body, &x, &Expr::Int(v));
                    int_offset += 1;
                }
                (FieldType::Packed(fdt), PatField::Packed { var, loc }) => {
                    let self_rec = fdt == &dt.name;
                    let field_cloc = if let Some((pdt, ploc)) = &prev {
                        end_witness(&self.store, &self.program.schema, pdt, ploc)
                            .map_err(|e| SocalError::Stuck { rule: "D-Case".into(), detail: e })?
                    } else if self_rec {
                        first_child_cloc(&self.store, &self.program.schema, &dt.name, &ctor.name, &cloc)
                            .map_err(|e| SocalError::Stuck { rule: "D-Case".into(), detail: e })?
                    } else {
                        match &cloc {
                            CLoc::Single { region, index } => {
                                CLoc::Single { region: *region, index: index + int_offset }
                            }
                            CLoc::Factored { .. } => cloc
                                .entry(&(ctor.name.clone(), j))
                                .cloned()
                                .ok_or_else(|| SocalError::Stuck {
                                    rule: "D-Case".into(),
                                    detail: "missing packed component".into(),
                                })?,
                        }
                    };
                    let field_cloc = if !self_rec && matches!(cloc, CLoc::Factored { .. }) {
                        cloc.entry(&(ctor.name.clone(), j)).cloned().unwrap_or(field_cloc)
                    } else {
                        field_cloc
                    };
                    let fresh = self.fresh_name(&loc);
                    self.m.insert(fresh.clone(), field_cloc.clone());
                    self.sigma.insert(fresh.clone(), fdt.clone());
                    body = subst_loc(body, &loc, &fresh);
                    body = subst_var(body, &var, &Expr::Ptr(field_cloc.clone()));
                    if self_rec || matches!(cloc, CLoc::Single { .. }) {
                        prev = Some((fdt.clone(), field_cloc));
                    }
                }
                _ => return self.stuck("D-Case", "pattern shape mismatch"),
            }
        }
        Ok(Stepped { expr: body, rule: "D-Case", c_delta: vec![] })
    }

    fn focus_cloc(&mut self, cloc: &CLoc, name: &str) {
        match cloc {
            CLoc::Single { region, .. } => {
                let rname = self.store.regions[*region].name.clone();
                self.alloc.insert(rname, AllocFocus::At(name.to_string()));
            }
            CLoc::Factored { tag, entries } => {
                self.focus_cloc(tag, name);
                for (_, sub) in entries {
                    self.focus_cloc(sub, name);
                }
            }
        }
    }

    fn freshen(&mut self, e: &Expr) -> Expr {
        self.fresh += 1;
        let suffix = self.fresh;
        rename_bound(e, &format!("${suffix}"))
    }

    /// Write-count instrumentation hook for well-formedness tests.
    pub fn poke_cell(&mut self, region: usize, index: usize, cell: Cell) {
        self.store.write(region, index, cell);
    }
}

fn start_cloc(shape: &BufferShape, regions: &mut impl Iterator<Item = usize>) -> CLoc {
    let tag_region = regions.next().expect("region per buffer");
    if shape.layout == Layout::Flat {
        return CLoc::Single { region: tag_region, index: 0 };
    }
    let entries = shape
        .entries
        .iter()
        .map(|e| {
            let key = (e.ctor.clone(), e.field);
            let sub = match &e.buffer {
                BufferRef::Scalar => CLoc::Single { region: regions.next().expect("scalar region"), index: 0 },
                BufferRef::Nested(s) => start_cloc(s, regions),
            };
            (key, sub)
        })
        .collect();
    CLoc::Factored { tag: Box::new(CLoc::Single { region: tag_region, index: 0 }), entries }
}

/// Concrete location of the first self-recursive child of a `ctor` value at
/// `cloc`: tag advances one cell, the constructor's own entries advance
/// past this node's contributions.
pub fn first_child_cloc(
    store: &CellStore,
    schema: &AdtSchema,
    datatype: &str,
    ctor: &str,
    cloc: &CLoc,
) -> Result<CLoc, String> {
    let dt = schema.get(datatype).ok_or_else(|| format!("unknown datatype {datatype}"))?;
    let c = dt.constructor(ctor).ok_or_else(|| format!("unknown ctor {ctor}"))?;
    match cloc {
        CLoc::Single { region, index } => {
            let scalars = c.fields.iter().filter(|f| matches!(f, FieldType::Int)).count();
            Ok(CLoc::Single { region: *region, index: index + 1 + scalars })
        }
        CLoc::Factored { tag, entries } => {
            let CLoc::Single { region, index } = tag.as_ref() else {
                return Err("factored tag component is not single".into());
            };
            let entries = entries
                .iter()
                .map(|((k, j), sub)| {
                    let key = (k.clone(), *j);
                    if k == ctor {
                        match &c.fields[*j] {
                            FieldType::Int => match sub {
                                CLoc::Single { region, index } => {
                                    Ok((key, CLoc::Single { region: *region, index: index + 1 }))
                                }
                                _ => Err("scalar component is not single".to_string()),
                            },
                            FieldType::Packed(d) => {
                                Ok((key, end_witness(store, schema, d, sub)?))
                            }
                        }
                    } else {
                        Ok((key, sub.clone()))
                    }
                })
                .collect::<Result<Vec<_>, String>>()?;
            Ok(CLoc::Factored {
                tag: Box::new(CLoc::Single { region: *region, index: index + 1 }),
                entries,
            })
        }
    }
}

/// The location one past the end of the value of `datatype` at `start`,
/// componentwise for factored locations. `datatype` may be `Int`.
pub fn end_witness(
    store: &CellStore,
    schema: &AdtSchema,
    datatype: &str,
    start: &CLoc,
) -> Result<CLoc, String> {
    if datatype == "Int" {
        let CLoc::Single { region, index } = start else {
            return Err("integers live in single locations".into());
        };
        return Ok(CLoc::Single { region: *region, index: index + 1 });
    }
    let mut cur = start.clone();
    walk_value(store, schema, datatype, &mut cur)?;
    Ok(cur)
}

/// Advance `cur` over one value of `datatype`.
fn walk_value(store: &CellStore, schema: &AdtSchema, datatype: &str, cur: &mut CLoc) -> Result<(), String> {
    let dt = schema.get(datatype).ok_or_else(|| format!("unknown datatype {datatype}"))?;
    let (tr, ti) = cur.tag_cell();
    let Some(Cell::Tag { datatype: cell_dt, tag }) = store.read(tr, ti) else {
        return Err(format!("no tag at ({tr},{ti})"));
    };
    if cell_dt != datatype {
        return Err(format!("expected {datatype} tag, found {cell_dt}"));
    }
    let ctor = dt
        .constructors
        .get(*tag as usize)
        .ok_or_else(|| format!("bad tag {tag}"))?
        .clone();

    let flat = matches!(cur, CLoc::Single { .. });
    bump_tag(cur)?;
    for (j, field) in ctor.fields.iter().enumerate() {
        match field {
            FieldType::Int => {
                let sub = if flat { &mut *cur } else { entry_mut(cur, &(ctor.name.clone(), j))? };
                let CLoc::Single { region, index } = sub else {
                    return Err("scalar component is not single".into());
                };
                match store.read(*region, *index) {
                    Some(Cell::Int(_)) => *index += 1,
                    _ => return Err(format!("missing scalar cell at ({region},{index})")),
                }
            }
            FieldType::Packed(d) if flat || d == datatype => walk_value(store, schema, d, cur)?,
            FieldType::Packed(d) => {
                let sub = entry_mut(cur, &(ctor.name.clone(), j))?;
                walk_value(store, schema, d, sub)?;
            }
        }
    }
    Ok(())
}

fn bump_tag(cur: &mut CLoc) -> Result<(), String> {
    match cur {
        CLoc::Single { index, .. } => {
            *index += 1;
            Ok(())
        }
        CLoc::Factored { tag, .. } => match tag.as_mut() {
            CLoc::Single { index, .. } => {
                *index += 1;
                Ok(())
            }
            _ => Err("factored tag component is not single".into()),
        },
    }
}

fn entry_mut<'a>(cur: &'a mut CLoc, key: &(String, usize)) -> Result<&'a mut CLoc, String> {
    match cur {
        CLoc::Factored { entries, .. } => entries
            .iter_mut()
            .find(|(k, _)| k == key)
            .map(|(_, s)| s)
            .ok_or_else(|| format!("missing component ({},{})", key.0, key.1)),
        CLoc::Single { .. } => Err(format!("no component ({},{}) in a single location", key.0, key.1)),
    }
}

/// Structurally read the value of `datatype` rooted at `cloc`.
pub fn read_store_value(
    store: &CellStore,
    schema: &AdtSchema,
    datatype: &str,
    cloc: &CLoc,
) -> Result<Value, String> {
    fn go(store: &CellStore, schema: &AdtSchema, datatype: &str, cur: &mut CLoc) -> Result<Value, String> {
        let dt = schema.get(datatype).ok_or_else(|| format!("unknown datatype {datatype}"))?;
        let (tr, ti) = cur.tag_cell();
        let Some(Cell::Tag { tag, .. }) = store.read(tr, ti) else {
            return Err(format!("no tag at ({tr},{ti})"));
        };
        let ctor = dt.constructors[*tag as usize].clone();
        match cur {
            CLoc::Single { index, .. } => *index += 1,
            CLoc::Factored { tag, .. } => {
                let CLoc::Single { index, .. } = tag.as_mut() else {
                    return Err("factored tag is not single".into());
                };
                *index += 1;
            }
        }
        let mut args = Vec::new();
        for (j, field) in ctor.fields.iter().enumerate() {
            match field {
                FieldType::Int => {
                    let (region, index): (usize, usize);
                    match cur {
                        CLoc::Single { region: r, index: i } => {
                            region = *r;
                            index = *i;
                            *i += 1;
                        }
                        CLoc::Factored { entries, .. } => {
                            let key = (ctor.name.clone(), j);
                            let sub = entries
                                .iter_mut()
                                .find(|(k, _)| *k == key)
                                .map(|(_, s)| s)
                                .ok_or("missing scalar component")?;
                            let CLoc::Single { region: r, index: i } = sub else {
                                return Err("scalar component is not single".into());
                            };
                            region = *r;
                            index = *i;
                            *i += 1;
                        }
                    }
                    let Some(Cell::Int(v)) = store.read(region, index) else {
                        return Err(format!("missing int cell at ({region},{index})"));
                    };
                    args.push(Arg::Int(*v));
                }
                FieldType::Packed(d) if d == datatype => {
                    args.push(Arg::Value(go(store, schema, d, cur)?));
                }
                FieldType::Packed(d) => match cur {
                    CLoc::Single { .. } => args.push(Arg::Value(go(store, schema, d, cur)?)),
                    CLoc::Factored { entries, .. } => {
                        let key = (ctor.name.clone(), j);
                        let sub = entries
                            .iter_mut()
                            .find(|(k, _)| *k == key)
                            .map(|(_, s)| s)
                            .ok_or("missing packed component")?;
                        args.push(Arg::Value(go(store, schema, d, sub)?));
                    }
                },
            }
        }
        Ok(Value { ctor: ctor.name.clone(), args })
    }
    let mut cur = cloc.clone();
    go(store, schema, datatype, &mut cur)
}

/// Build a store directly from a value, bypassing the interpreter: one
/// region per buffer in bundle order (factored) or a single region (flat).
pub fn store_of_value(
    schema: &AdtSchema,
    datatype: &str,
    value: &Value,
) -> Result<(CellStore, CLoc), String> {
    let shape = buffer_shape(schema, datatype).map_err(|e| e.to_string())?;
    let mut store = CellStore::default();
    for role in shape.buffer_roles() {
        store.new_region(role);
    }
    let mut regions = 0..shape.buffer_count();
    let root = start_cloc(&shape, &mut regions);
    let mut frontier = root.clone();
    write_value_cells(&mut store, schema, datatype, value, &mut frontier)?;
    Ok((store, root))
}

fn write_value_cells(
    store: &mut CellStore,
    schema: &AdtSchema,
    datatype: &str,
    value: &Value,
    cur: &mut CLoc,
) -> Result<(), String> {
    let dt = schema.get(datatype).ok_or_else(|| format!("unknown datatype {datatype}"))?;
    let ctor = dt
        .constructor(&value.ctor)
        .ok_or_else(|| format!("unknown ctor {}", value.ctor))?
        .clone();
    let (tr, ti) = cur.tag_cell();
    store.write(tr, ti, Cell::Tag { datatype: datatype.to_string(), tag: ctor.tag });
    match cur {
        CLoc::Single { index, .. } => *index += 1,
        CLoc::Factored { tag, .. } => {
            let CLoc::Single { index, .. } = tag.as_mut() else {
                return Err("factored tag is not single".into());
            };
            *index += 1;
        }
    }
    for (j, (field, arg)) in ctor.fields.iter().zip(&value.args).enumerate() {
        match (field, arg) {
            (FieldType::Int, Arg::Int(v)) => match cur {
                CLoc::Single { region, index } => {
                    store.write(*region, *index, Cell::Int(*v));
                    *index += 1;
                }
                CLoc::Factored { entries, .. } => {
                    let key = (ctor.name.clone(), j);
                    let sub = entries
                        .iter_mut()
                        .find(|(k, _)| *k == key)
                        .map(|(_, s)| s)
                        .ok_or("missing scalar component")?;
                    let CLoc::Single { region, index } = sub else {
                        return Err("scalar component is not single".into());
                    };
                    store.write(*region, *index, Cell::Int(*v));
                    *index += 1;
                }
            },
            (FieldType::Packed(d), Arg::Value(v)) => {
                if d == datatype {
                    write_value_cells(store, schema, d, v, cur)?;
                } else {
                    match cur {
                        CLoc::Single { .. } => write_value_cells(store, schema, d, v, cur)?,
                        CLoc::Factored { entries, .. } => {
                            let key = (ctor.name.clone(), j);
                            let sub = entries
                                .iter_mut()
                                .find(|(k, _)| *k == key)
                                .map(|(_, s)| s)
                                .ok_or("missing packed component")?;
                            write_value_cells(store, schema, d, v, sub)?;
                        }
                    }
                }
            }
            _ => return Err(format!("value does not match schema at field {j}")),
        }
    }
    Ok(())
}

/// Run a program to a value.
pub fn interpret<'p>(
    program: &'p Program,
    opts: &InterpOptions,
) -> Result<(RunOutcome, Interp<'p>), SocalError> {
    let mut it = Interp::new(program);
    let outcome = run(&mut it, opts, None)?;
    Ok((outcome, it))
}

/// Run with a callback after every step; used for the preservation
/// experiment.
pub fn run<'p>(
    it: &mut Interp<'p>,
    opts: &InterpOptions,
    mut on_step: Option<&mut dyn FnMut(&Interp<'p>) -> Result<(), SocalError>>,
) -> Result<RunOutcome, SocalError> {
    let max_steps = if opts.max_steps == 0 { 10_000_000 } else { opts.max_steps };
    let mut expr = it.program.main.clone();
    let mut steps = 0u64;
    let mut trace = Vec::new();
    while !expr.is_value() {
        if steps >= max_steps {
            return Err(SocalError::StepLimit(max_steps));
        }
        let stepped = it.step(expr)?;
        expr = stepped.expr;
        steps += 1;
        if opts.collect_trace {
            trace.push(StepTrace {
                rule: stepped.rule.to_string(),
                e: expr.summary(),
                a: it
                    .alloc
                    .iter()
                    .map(|(k, v)| {
                        (
                            k.clone(),
                            match v {
                                AllocFocus::Empty => "∅".to_string(),
                                AllocFocus::At(l) => l.clone(),
                            },
                        )
                    })
                    .collect(),
                n: it.nursery.clone(),
                c_delta: stepped
                    .c_delta
                    .iter()
                    .map(|(l, c)| (l.clone(), c.to_string()))
                    .collect(),
            });
        }
        it.constraints.extend(stepped.c_delta);
        if let Some(cb) = on_step.as_deref_mut() {
            cb(it)?;
        }
    }
    let result = match expr {
        Expr::Int(n) => RtVal::Int(n),
        Expr::Ptr(cloc) => {
            // The result type names the datatype of the root tag.
            let (tr, ti) = cloc.tag_cell();
            let Some(Cell::Tag { datatype, .. }) = it.store.read(tr, ti).cloned() else {
                return Err(SocalError::Stuck {
                    rule: "D-Result".into(),
                    detail: "result pointer has no tag".into(),
                });
            };
            let value = read_store_value(&it.store, &it.program.schema, &datatype, &cloc)
                .map_err(|e| SocalError::Stuck { rule: "D-Result".into(), detail: e })?;
            RtVal::Located { datatype, cloc, value }
        }
        _ => unreachable!("loop exits on values"),
    };
    Ok(RunOutcome { result, steps, trace })
}

// Substitutions. Binders shadow: substitution stops below a binder of the
// same name.

fn subst_var(e: Expr, name: &str, val: &Expr) -> Expr {
    match e {
        Expr::Var(x) if x == name => val.clone(),
        Expr::Var(_) | Expr::Int(_) | Expr::Ptr(_) => e,
        Expr::Prim(op, a, b) => Expr::Prim(
            op,
            Box::new(subst_var(*a, name, val)),
            Box::new(subst_var(*b, name, val)),
        ),
        Expr::If(c, t, f) => Expr::If(
            Box::new(subst_var(*c, name, val)),
            Box::new(subst_var(*t, name, val)),
            Box::new(subst_var(*f, name, val)),
        ),
        Expr::LetRegion { region, datatype, body } => Expr::LetRegion {
            region,
            datatype,
            body: Box::new(subst_var(*body, name, val)),
        },
        Expr::LetLoc { loc, rhs, body } => Expr::LetLoc {
            loc,
            rhs,
            body: Box::new(subst_var(*body, name, val)),
        },
        Expr::Let { var, ty, loc, rhs, body } => {
            let rhs = Box::new(subst_var(*rhs, name, val));
            let body = if var == name { body } else { Box::new(subst_var(*body, name, val)) };
            Expr::Let { var, ty, loc, rhs, body }
        }
        Expr::Make { ctor, loc, args } => Expr::Make {
            ctor,
            loc,
            args: args.into_iter().map(|a| subst_var(a, name, val)).collect(),
        },
        Expr::Case { scrutinee, branches } => Expr::Case {
            scrutinee: Box::new(subst_var(*scrutinee, name, val)),
            branches: branches
                .into_iter()
                .map(|b| {
                    let shadowed = b.fields.iter().any(|p| match p {
                        PatField::Scalar(x) => x == name,
                        PatField::Packed { var, .. } => var == name,
                    });
                    if shadowed {
                        b
                    } else {
                        Branch { body: subst_var(b.body, name, val), ..b }
                    }
                })
                .collect(),
        },
        Expr::Call { func, loc_args, args } => Expr::Call {
            func,
            loc_args,
            args: args.into_iter().map(|a| subst_var(a, name, val)).collect(),
        },
    }
}

fn subst_loc(e: Expr, name: &str, new: &str) -> Expr {
    let fix = |l: String| if l == name { new.to_string() } else { l };
    match e {
        Expr::Var(_) | Expr::Int(_) | Expr::Ptr(_) => e,
        Expr::Prim(op, a, b) => Expr::Prim(
            op,
            Box::new(subst_loc(*a, name, new)),
            Box::new(subst_loc(*b, name, new)),
        ),
        Expr::If(c, t, f) => Expr::If(
            Box::new(subst_loc(*c, name, new)),
            Box::new(subst_loc(*t, name, new)),
            Box::new(subst_loc(*f, name, new)),
        ),
        Expr::LetRegion { region, datatype, body } => Expr::LetRegion {
            region,
            datatype,
            body: Box::new(subst_loc(*body, name, new)),
        },
        Expr::LetLoc { loc, rhs, body } => {
            let rhs = match rhs {
                LocExpr::Start(r) => LocExpr::Start(r),
                LocExpr::PlusOne(l) => LocExpr::PlusOne(fix(l)),
                LocExpr::After { datatype, loc } => LocExpr::After { datatype, loc: fix(loc) },
                LocExpr::ProjTag(l) => LocExpr::ProjTag(fix(l)),
                LocExpr::ProjField { ctor, field, loc } => {
                    LocExpr::ProjField { ctor, field, loc: fix(loc) }
                }
                LocExpr::IntroLocVec { tag_loc, entries } => LocExpr::IntroLocVec {
                    tag_loc: fix(tag_loc),
                    entries: entries.into_iter().map(|(k, l)| (k, fix(l))).collect(),
                },
            };
            let body = if loc == name { body } else { Box::new(subst_loc(*body, name, new)) };
            Expr::LetLoc { loc, rhs, body }
        }
        Expr::Let { var, ty, loc, rhs, body } => Expr::Let {
            var,
            ty,
            loc: loc.map(fix),
            rhs: Box::new(subst_loc(*rhs, name, new)),
            body: Box::new(subst_loc(*body, name, new)),
        },
        Expr::Make { ctor, loc, args } => Expr::Make {
            ctor,
            loc: fix(loc),
            args: args.into_iter().map(|a| subst_loc(a, name, new)).collect(),
        },
        Expr::Case { scrutinee, branches } => Expr::Case {
            scrutinee: Box::new(subst_loc(*scrutinee, name, new)),
            branches: branches
                .into_iter()
                .map(|b| {
                    let shadowed = b.fields.iter().any(|p| matches!(p, PatField::Packed { loc, .. } if loc == name));
                    if shadowed {
                        b
                    } else {
                        Branch { body: subst_loc(b.body, name, new), ..b }
                    }
                })
                .collect(),
        },
        Expr::Call { func, loc_args, args } => Expr::Call {
            func,
            loc_args: loc_args.into_iter().map(fix).collect(),
            args: args.into_iter().map(|a| subst_loc(a, name, new)).collect(),
        },
    }
}

fn subst_region(e: Expr, name: &str, new: &str) -> Expr {
    match e {
        Expr::Var(_) | Expr::Int(_) | Expr::Ptr(_) => e,
        Expr::Prim(op, a, b) => Expr::Prim(
            op,
            Box::new(subst_region(*a, name, new)),
            Box::new(subst_region(*b, name, new)),
        ),
        Expr::If(c, t, f) => Expr::If(
            Box::new(subst_region(*c, name, new)),
            Box::new(subst_region(*t, name, new)),
            Box::new(subst_region(*f, name, new)),
        ),
        Expr::LetRegion { region, datatype, body } => {
            let body = if region == name { body } else { Box::new(subst_region(*body, name, new)) };
            Expr::LetRegion { region, datatype, body }
        }
        Expr::LetLoc { loc, rhs, body } => {
            let rhs = match rhs {
                LocExpr::Start(r) => {
                    LocExpr::Start(if r == name { new.to_string() } else { r })
                }
                other => other,
            };
            Expr::LetLoc { loc, rhs, body: Box::new(subst_region(*body, name, new)) }
        }
        Expr::Let { var, ty, loc, rhs, body } => Expr::Let {
            var,
            ty,
            loc,
            rhs: Box::new(subst_region(*rhs, name, new)),
            body: Box::new(subst_region(*body, name, new)),
        },
        Expr::Make { ctor, loc, args } => Expr::Make {
            ctor,
            loc,
            args: args.into_iter().map(|a| subst_region(a, name, new)).collect(),
        },
        Expr::Case { scrutinee, branches } => Expr::Case {
            scrutinee: Box::new(subst_region(*scrutinee, name, new)),
            branches: branches
                .into_iter()
                .map(|b| Branch { body: subst_region(b.body, name, new), ..b })
                .collect(),
        },
        Expr::Call { func, loc_args, args } => Expr::Call {
            func,
            loc_args,
            args: args.into_iter().map(|a| subst_region(a, name, new)).collect(),
        },
    }
}

/// Rename every bound name with a suffix; used to instantiate function
/// bodies at call sites.
fn rename_bound(e: &Expr, suffix: &str) -> Expr {
    fn fix_if(map: &HashMap<String, String>, s: &str) -> String {
        map.get(s).cloned().unwrap_or_else(|| s.to_string())
    }
    fn go(e: &Expr, suffix: &str, map: &mut HashMap<String, String>) -> Expr {
        match e {
            Expr::Int(n) => Expr::Int(*n),
            Expr::Ptr(c) => Expr::Ptr(c.clone()),
            Expr::Var(x) => Expr::Var(fix_if(map, x)),
            Expr::Prim(op, a, b) => {
                Expr::Prim(*op, Box::new(go(a, suffix, map)), Box::new(go(b, suffix, map)))
            }
            Expr::If(c, t, f) => Expr::If(
                Box::new(go(c, suffix, map)),
                Box::new(go(t, suffix, map)),
                Box::new(go(f, suffix, map)),
            ),
            Expr::LetRegion { region, datatype, body } => {
                let fresh = format!("{region}{suffix}");
                map.insert(region.clone(), fresh.clone());
                let body = go(body, suffix, map);
                map.remove(region);
                Expr::LetRegion { region: fresh, datatype: datatype.clone(), body: Box::new(body) }
            }
            Expr::LetLoc { loc, rhs, body } => {
                let rhs = match rhs {
                    LocExpr::Start(r) => LocExpr::Start(fix_if(map, r)),
                    LocExpr::PlusOne(l) => LocExpr::PlusOne(fix_if(map, l)),
                    LocExpr::After { datatype, loc } => {
                        LocExpr::After { datatype: datatype.clone(), loc: fix_if(map, loc) }
                    }
                    LocExpr::ProjTag(l) => LocExpr::ProjTag(fix_if(map, l)),
                    LocExpr::ProjField { ctor, field, loc } => LocExpr::ProjField {
                        ctor: ctor.clone(),
                        field: *field,
                        loc: fix_if(map, loc),
                    },
                    LocExpr::IntroLocVec { tag_loc, entries } => LocExpr::IntroLocVec {
                        tag_loc: fix_if(map, tag_loc),
                        entries: entries.iter().map(|(k, l)| (k.clone(), fix_if(map, l))).collect(),
                    },
                };
                let fresh = format!("{loc}{suffix}");
                map.insert(loc.clone(), fresh.clone());
                let body = go(body, suffix, map);
                map.remove(loc);
                Expr::LetLoc { loc: fresh, rhs, body: Box::new(body) }
            }
            Expr::Let { var, ty, loc, rhs, body } => {
                let rhs = go(rhs, suffix, map);
                let fresh = format!("{var}{suffix}");
                map.insert(var.clone(), fresh.clone());
                let body = go(body, suffix, map);
                map.remove(var);
                Expr::Let {
                    var: fresh,
                    ty: ty.clone(),
                    loc: loc.as_ref().map(|l| fix_if(map, l)),
                    rhs: Box::new(rhs),
                    body: Box::new(body),
                }
            }
            Expr::Make { ctor, loc, args } => Expr::Make {
                ctor: ctor.clone(),
                loc: fix_if(map, loc),
                args: args.iter().map(|a| go(a, suffix, map)).collect(),
            },
            Expr::Case { scrutinee, branches } => Expr::Case {
                scrutinee: Box::new(go(scrutinee, suffix, map)),
                branches: branches
                    .iter()
                    .map(|b| {
                        let mut added = Vec::new();
                        let fields = b
                            .fields
                            .iter()
                            .map(|p| match p {
                                PatField::Scalar(x) => {
                                    let fresh = format!("{x}{suffix}");
                                    map.insert(x.clone(), fresh.clone());
                                    added.push(x.clone());
                                    PatField::Scalar(fresh)
                                }
                                PatField::Packed { var, loc } => {
                                    let fv = format!("{var}{suffix}");
                                    let fl = format!("{loc}{suffix}");
                                    map.insert(var.clone(), fv.clone());
                                    map.insert(loc.clone(), fl.clone());
                                    added.push(var.clone());
                                    added.push(loc.clone());
                                    PatField::Packed { var: fv, loc: fl }
                                }
                            })
                            .collect();
                        let body = go(&b.body, suffix, map);
                        for a in added {
                            map.remove(&a);
                        }
                        Branch { ctor: b.ctor.clone(), fields, body }
                    })
                    .collect(),
            },
            Expr::Call { func, loc_args, args } => Expr::Call {
                func: func.clone(),
                loc_args: loc_args.iter().map(|l| fix_if(map, l)).collect(),
                args: args.iter().map(|a| go(a, suffix, map)).collect(),
            },
        }
    }
    go(e, suffix, &mut HashMap::new())
}

/// Location-erased evaluation: plain substitution semantics over values.
pub fn eval_pure(p: &Program) -> Result<RtVal, String> {
    #[derive(Clone, Debug)]
    enum PV {
        Int(i64),
        Val(Value),
    }
    fn go(p: &Program, e: &Expr, env: &mut HashMap<String, PV>, depth: usize) -> Result<PV, String> {
        if depth > 100_000 {
            return Err("pure evaluation recursion limit".into());
        }
        match e {
            Expr::Int(n) => Ok(PV::Int(*n)),
            Expr::Ptr(_) => Err("runtime pointer in pure evaluation".into()),
            Expr::Var(x) => env.get(x).cloned().ok_or_else(|| format!("unbound `{x}`")),
            Expr::Prim(op, a, b) => {
                let (PV::Int(x), PV::Int(y)) = (go(p, a, env, depth + 1)?, go(p, b, env, depth + 1)?)
                else {
                    return Err("primitive over non-integers".into());
                };
                Ok(PV::Int(match op {
                    PrimOp::Add => x.wrapping_add(y),
                    PrimOp::Sub => x.wrapping_sub(y),
                    PrimOp::Mul => x.wrapping_mul(y),
                    PrimOp::Le => (x <= y) as i64,
                    PrimOp::Lt => (x < y) as i64,
                    PrimOp::Eq => (x == y) as i64,
                }))
            }
            Expr::If(c, t, f) => {
                let PV::Int(v) = go(p, c, env, depth + 1)? else {
                    return Err("condition is not boolean".into());
                };
                go(p, if v != 0 { t } else { f }, env, depth + 1)
            }
            Expr::LetRegion { body, .. } => go(p, body, env, depth + 1),
            Expr::LetLoc { body, .. } => go(p, body, env, depth + 1),
            Expr::Let { var, rhs, body, .. } => {
                let v = go(p, rhs, env, depth + 1)?;
                let old = env.insert(var.clone(), v);
                let r = go(p, body, env, depth + 1);
                match old {
                    Some(o) => {
                        env.insert(var.clone(), o);
                    }
                    None => {
                        env.remove(var);
                    }
                }
                r
            }
            Expr::Make { ctor, args, .. } => {
                let mut out = Vec::new();
                for a in args {
                    out.push(match go(p, a, env, depth + 1)? {
                        PV::Int(n) => Arg::Int(n),
                        PV::Val(v) => Arg::Value(v),
                    });
                }
                Ok(PV::Val(Value::new(ctor, out)))
            }
            Expr::Case { scrutinee, branches } => {
                let PV::Val(v) = go(p, scrutinee, env, depth + 1)? else {
                    return Err("case over non-value".into());
                };
                let b = branches
                    .iter()
                    .find(|b| b.ctor == v.ctor)
                    .ok_or_else(|| format!("no branch for `{}`", v.ctor))?;
                let mut added = Vec::new();
                for (pat, arg) in b.fields.iter().zip(&v.args) {
                    let (name, pv) = match (pat, arg) {
                        (PatField::Scalar(x), Arg::Int(n)) => (x.clone(), PV::Int(*n)),
                        (PatField::Packed { var, .. }, Arg::Value(v)) => (var.clone(), PV::Val(v.clone())),
                        _ => return Err("pattern shape mismatch".into()),
                    };
                    added.push((name.clone(), env.insert(name, pv)));
                }
                let r = go(p, &b.body, env, depth + 1);
                for (name, old) in added.into_iter().rev() {
                    match old {
                        Some(o) => {
                            env.insert(name, o);
                        }
                        None => {
                            env.remove(&name);
                        }
                    }
                }
                r
            }
            Expr::Call { func, args, .. } => {
                let f = p.fun(func).ok_or_else(|| format!("unknown function `{func}`"))?;
                let mut inner = HashMap::new();
                for ((pname, _, _), arg) in f.params.iter().zip(args) {
                    inner.insert(pname.clone(), go(p, arg, env, depth + 1)?);
                }
                go(p, &f.body, &mut inner, depth + 1)
            }
        }
    }
    match go(p, &p.main, &mut HashMap::new(), 0)? {
        PV::Int(n) => Ok(RtVal::Int(n)),
        PV::Val(v) => Ok(RtVal::Located {
            datatype: String::new(),
            cloc: CLoc::Single { region: 0, index: 0 },
            value: v,
        }),
    }
}
