//! Store well-formedness: the static environments against the runtime
//! location map and store. Violations are data, not errors; the report
//! names the first violated clause and the offending location.

use super::ast::{CLoc, Constraint};
use super::interp::{end_witness, AllocFocus, Cell, Interp};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WfViolation {
    pub clause: String,
    pub subject: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WfReport {
    pub violation: Option<WfViolation>,
}

impl WfReport {
    pub fn pass(&self) -> bool {
        self.violation.is_none()
    }
}

fn fail(clause: &str, subject: impl Into<String>) -> WfReport {
    WfReport { violation: Some(WfViolation { clause: clause.to_string(), subject: subject.into() }) }
}

fn cloc_eq(a: &CLoc, b: &CLoc) -> bool {
    a == b
}

/// Check every clause group; returns on the first violation.
pub fn check_well_formed(it: &Interp<'_>) -> WfReport {
    let schema = &it.program.schema;
    let store = &it.store;

    // Typed roots are realized: mapped by M and traversable end to end.
    for (loc, datatype) in &it.sigma {
        let Some(cloc) = it.m.get(loc) else {
            return fail("wfstore:missing-root", loc.clone());
        };
        let clause = match cloc {
            CLoc::Single { .. } => "wfstore:single-root",
            CLoc::Factored { .. } => "wfstore:factored-root",
        };
        if end_witness(store, schema, datatype, cloc).is_err() {
            return fail(clause, loc.clone());
        }
    }

    // The constraint environment is realized by M and S.
    for (loc, constraint) in &it.constraints {
        let Some(have) = it.m.get(loc) else {
            return fail("wfconstr:unmapped", loc.clone());
        };
        match constraint {
            Constraint::StartR(_) => {
                if !all_components_at_zero(have) {
                    return fail("wfconstr:start", loc.clone());
                }
            }
            Constraint::PlusOne(src) => {
                let Some(CLoc::Single { region, index }) = it.m.get(src) else {
                    return fail("wfconstr:tag", loc.clone());
                };
                if *have != (CLoc::Single { region: *region, index: index + 1 }) {
                    return fail("wfconstr:tag", loc.clone());
                }
            }
            Constraint::After { datatype, loc: src } => {
                let Some(base) = it.m.get(src) else {
                    return fail("wfconstr:after", loc.clone());
                };
                match end_witness(store, schema, datatype, base) {
                    Ok(end) if cloc_eq(&end, have) => {}
                    _ => return fail("wfconstr:after", loc.clone()),
                }
            }
            Constraint::ProjTag(src) => {
                let Some(CLoc::Factored { tag, .. }) = it.m.get(src) else {
                    return fail("wfconstr:projtag", loc.clone());
                };
                if !cloc_eq(have, tag) {
                    return fail("wfconstr:projtag", loc.clone());
                }
            }
            Constraint::ProjField { ctor, field, loc: src } => {
                let key = (ctor.clone(), *field);
                match it.m.get(src).and_then(|c| c.entry(&key)) {
                    Some(sub) if cloc_eq(have, sub) => {}
                    _ => return fail("wfconstr:projfield", loc.clone()),
                }
            }
            Constraint::IntroLocVec { tag_loc, entries } => {
                let Some(tag) = it.m.get(tag_loc) else {
                    return fail("wfconstr:introlocvec", loc.clone());
                };
                let mut resolved = Vec::new();
                for (key, l) in entries {
                    match it.m.get(l) {
                        Some(c) => resolved.push((key.clone(), c.clone())),
                        None => return fail("wfconstr:introlocvec", loc.clone()),
                    }
                }
                let want = CLoc::Factored { tag: Box::new(tag.clone()), entries: resolved };
                if !cloc_eq(have, &want) {
                    return fail("wfconstr:introlocvec", loc.clone());
                }
            }
        }
    }

    // Allocation: nursery cells unwritten, no cell written twice, and
    // allocation foci at buffer ends.
    for name in &it.nursery {
        let Some(cloc) = it.m.get(name) else {
            return fail("wfalloc:nursery", name.clone());
        };
        let (r, i) = cloc.tag_cell();
        if store.read(r, i).is_some() {
            return fail("wfalloc:nursery", name.clone());
        }
    }
    for (ridx, region) in store.regions.iter().enumerate() {
        for (i, w) in region.writes.iter().enumerate() {
            if *w > 1 {
                return fail("wfalloc:write-once", format!("({ridx},{i})"));
            }
        }
    }
    for (region_name, focus) in &it.alloc {
        let Some(ridx) = store.regions.iter().position(|r| &r.name == region_name) else {
            continue;
        };
        let max_written = store.regions[ridx].max_written();
        match focus {
            AllocFocus::Empty => {
                if max_written.is_some() {
                    return fail("wfalloc:empty", region_name.clone());
                }
            }
            AllocFocus::At(loc) => {
                let Some(cloc) = it.m.get(loc) else { continue };
                if it.nursery.contains(loc) {
                    // Unwritten focus: strictly past the highest written cell
                    // of this region, for each component living in it.
                    if let Some(idx) = component_index_in(cloc, ridx) {
                        if let Some(mw) = max_written {
                            if idx <= mw {
                                return fail("wfalloc:linear", loc.clone());
                            }
                        }
                    }
                } else if let Some(datatype) = it.sigma.get(loc) {
                    // Written focus: the end witness reaches the frontier.
                    let Ok(end) = end_witness(store, schema, datatype, cloc) else {
                        return fail("wfalloc:linear-finished", loc.clone());
                    };
                    if let Some(idx) = component_index_in(&end, ridx) {
                        let frontier = max_written.map(|m| m + 1).unwrap_or(0);
                        if idx < frontier {
                            return fail("wfalloc:linear-finished", loc.clone());
                        }
                    }
                }
            }
        }
    }

    // Typed roots and nursery locations are disjoint.
    for name in &it.nursery {
        if it.sigma.contains_key(name) {
            return fail("wfdisjoint", name.clone());
        }
    }

    WfReport { violation: None }
}

fn all_components_at_zero(cloc: &CLoc) -> bool {
    match cloc {
        CLoc::Single { index, .. } => *index == 0,
        CLoc::Factored { tag, entries } => {
            all_components_at_zero(tag) && entries.iter().all(|(_, c)| all_components_at_zero(c))
        }
    }
}

/// The index of the component of `cloc` living in region `ridx`, if any.
fn component_index_in(cloc: &CLoc, ridx: usize) -> Option<usize> {
    match cloc {
        CLoc::Single { region, index } => (*region == ridx).then_some(*index),
        CLoc::Factored { tag, entries } => component_index_in(tag, ridx)
            .or_else(|| entries.iter().find_map(|(_, c)| component_index_in(c, ridx))),
    }
}

/// Expose cells for hand-corruption tests.
pub fn poke(it: &mut Interp<'_>, region: usize, index: usize, cell: Cell) {
    it.poke_cell(region, index, cell);
}
