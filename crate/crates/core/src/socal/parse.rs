//! S-expression surface syntax.
//!
//! ```text
//! ; comments run to end of line
//! (data Tree (Node Tree Tree) (Leaf Int))
//! (layout Tree Factored)
//! (fun buildtree
//!   (locs (out lv Tree))
//!   (args (n Int))
//!   (ret Tree lv)
//!   ...body...)
//! (main ...)
//! ```
//!
//! Expressions: integer literals, variables, `(+ a b)` `(- a b)` `(* a b)`
//! `(<= a b)` `(< a b)` `(= a b)`, `(if c t e)`,
//! `(letregion r body)` / `(letregion (r Datatype) body)`,
//! `(letloc (l rhs) body)` with rhs one of `(start r)`, `(+1 l)`,
//! `(after T l)`, `(projtag l)`, `(projfield (K j) l)`,
//! `(introlocvec l ((K j) l2) ...)`,
//! `(let (x Ty [l]) rhs body)`, `(make K l args...)`,
//! `(case e ((K field...) body) ...)` where packed pattern fields bind a
//! variable and its location as `(x lx)`,
//! `(call f (locs...) (args...))`.

use std::sync::Arc;

use crate::schema::AdtSchema;

use super::ast::*;
use super::SocalError;

#[derive(Debug, Clone, PartialEq)]
enum SExpr {
    Atom(String, usize, usize),
    List(Vec<SExpr>, usize, usize),
}

impl SExpr {
    fn pos(&self) -> (usize, usize) {
        match self {
            SExpr::Atom(_, l, c) | SExpr::List(_, l, c) => (*l, *c),
        }
    }

    fn atom(&self) -> Option<&str> {
        match self {
            SExpr::Atom(s, _, _) => Some(s),
            _ => None,
        }
    }

    fn list(&self) -> Option<&[SExpr]> {
        match self {
            SExpr::List(items, _, _) => Some(items),
            _ => None,
        }
    }
}

fn err(pos: (usize, usize), msg: impl Into<String>) -> SocalError {
    SocalError::Syntax { line: pos.0, col: pos.1, msg: msg.into() }
}

fn tokenize(text: &str) -> Result<Vec<SExpr>, SocalError> {
    struct Frame {
        items: Vec<SExpr>,
        line: usize,
        col: usize,
    }
    let mut top = Vec::new();
    let mut stack: Vec<Frame> = Vec::new();
    let mut line = 1usize;
    let mut col = 0usize;
    let mut atom = String::new();
    let mut atom_pos = (0, 0);
    let mut chars = text.chars().peekable();

    let flush = |atom: &mut String,
                 atom_pos: (usize, usize),
                 stack: &mut Vec<Frame>,
                 top: &mut Vec<SExpr>| {
        if !atom.is_empty() {
            let a = SExpr::Atom(std::mem::take(atom), atom_pos.0, atom_pos.1);
            match stack.last_mut() {
                Some(f) => f.items.push(a),
                None => top.push(a),
            }
        }
    };

    while let Some(ch) = chars.next() {
        col += 1;
        match ch {
            '\n' => {
                flush(&mut atom, atom_pos, &mut stack, &mut top);
                line += 1;
                col = 0;
            }
            ';' => {
                flush(&mut atom, atom_pos, &mut stack, &mut top);
                for c in chars.by_ref() {
                    if c == '\n' {
                        line += 1;
                        col = 0;
                        break;
                    }
                }
            }
            c if c.is_whitespace() => flush(&mut atom, atom_pos, &mut stack, &mut top),
            '(' => {
                flush(&mut atom, atom_pos, &mut stack, &mut top);
                stack.push(Frame { items: Vec::new(), line, col });
            }
            ')' => {
                flush(&mut atom, atom_pos, &mut stack, &mut top);
                let f = stack
                    .pop()
                    .ok_or_else(|| err((line, col), "unbalanced `)`"))?;
                let l = SExpr::List(f.items, f.line, f.col);
                match stack.last_mut() {
                    Some(p) => p.items.push(l),
                    None => top.push(l),
                }
            }
            c => {
                if atom.is_empty() {
                    atom_pos = (line, col);
                }
                atom.push(c);
            }
        }
    }
    flush(&mut atom, atom_pos, &mut stack, &mut top);
    if let Some(f) = stack.last() {
        return Err(err((f.line, f.col), "unbalanced `(`"));
    }
    Ok(top)
}

/// Parse a whole program.
pub fn parse_socal(text: &str) -> Result<Program, SocalError> {
    let forms = tokenize(text)?;
    let mut schema_text = String::new();
    let mut funs = Vec::new();
    let mut main = None;

    for form in &forms {
        let items = form
            .list()
            .ok_or_else(|| err(form.pos(), "expected a top-level form"))?;
        let head = items
            .first()
            .and_then(|h| h.atom())
            .ok_or_else(|| err(form.pos(), "expected a form head"))?;
        match head {
            "data" => {
                let name = items
                    .get(1)
                    .and_then(|a| a.atom())
                    .ok_or_else(|| err(form.pos(), "expected datatype name"))?;
                let mut ctors = Vec::new();
                for c in &items[2..] {
                    let ci = c.list().ok_or_else(|| err(c.pos(), "expected constructor"))?;
                    let cname = ci
                        .first()
                        .and_then(|a| a.atom())
                        .ok_or_else(|| err(c.pos(), "expected constructor name"))?;
                    let fields: Vec<&str> = ci[1..]
                        .iter()
                        .map(|f| f.atom().ok_or_else(|| err(f.pos(), "expected field type")))
                        .collect::<Result<_, _>>()?;
                    ctors.push(format!("{cname} {}", fields.join(" ")));
                }
                schema_text.push_str(&format!("data {name} = {}\n", ctors.join(" | ")));
            }
            "layout" => {
                let name = items
                    .get(1)
                    .and_then(|a| a.atom())
                    .ok_or_else(|| err(form.pos(), "expected datatype name"))?;
                let layout = items
                    .get(2)
                    .and_then(|a| a.atom())
                    .ok_or_else(|| err(form.pos(), "expected layout"))?;
                schema_text.push_str(&format!("layout {name} = {layout}\n"));
            }
            "fun" => funs.push(form),
            "main" => {
                if items.len() != 2 {
                    return Err(err(form.pos(), "main takes exactly one expression"));
                }
                main = Some(&items[1]);
            }
            other => return Err(err(form.pos(), format!("unknown top-level form `{other}`"))),
        }
    }

    let schema = Arc::new(
        AdtSchema::parse(&schema_text)
            .map_err(|e| SocalError::Syntax { line: e.line, col: e.col, msg: e.to_string() })?,
    );
    let funs = funs
        .into_iter()
        .map(|f| parse_fun(f.list().unwrap(), f.pos()))
        .collect::<Result<Vec<_>, _>>()?;
    let main = main.ok_or_else(|| err((1, 1), "missing (main ...)"))?;
    let main = parse_expr(main)?;
    Ok(Program { schema, funs, main })
}

fn parse_ty(s: &str) -> Ty {
    match s {
        "Int" => Ty::Int,
        "Bool" => Ty::Bool,
        other => Ty::Adt(other.to_string()),
    }
}

fn parse_fun(items: &[SExpr], pos: (usize, usize)) -> Result<FunDef, SocalError> {
    let name = items
        .get(1)
        .and_then(|a| a.atom())
        .ok_or_else(|| err(pos, "expected function name"))?
        .to_string();
    let mut loc_params = Vec::new();
    let mut params = Vec::new();
    let mut ret = None;
    let mut body = None;
    for form in &items[2..] {
        let fi = form.list().ok_or_else(|| err(form.pos(), "expected a clause"))?;
        match fi.first().and_then(|a| a.atom()) {
            Some("locs") => {
                for lp in &fi[1..] {
                    let l = lp.list().ok_or_else(|| err(lp.pos(), "expected (in|out name Ty)"))?;
                    let mode = match l.first().and_then(|a| a.atom()) {
                        Some("in") => LocMode::In,
                        Some("out") => LocMode::Out,
                        _ => return Err(err(lp.pos(), "loc param mode must be `in` or `out`")),
                    };
                    let lname = l.get(1).and_then(|a| a.atom()).ok_or_else(|| err(lp.pos(), "loc name"))?;
                    let dt = l.get(2).and_then(|a| a.atom()).ok_or_else(|| err(lp.pos(), "loc datatype"))?;
                    loc_params.push(LocParam {
                        name: lname.to_string(),
                        datatype: dt.to_string(),
                        mode,
                    });
                }
            }
            Some("args") => {
                for ap in &fi[1..] {
                    let a = ap.list().ok_or_else(|| err(ap.pos(), "expected (name Ty [loc])"))?;
                    let aname = a.first().and_then(|x| x.atom()).ok_or_else(|| err(ap.pos(), "arg name"))?;
                    let ty = a.get(1).and_then(|x| x.atom()).ok_or_else(|| err(ap.pos(), "arg type"))?;
                    let loc = a.get(2).and_then(|x| x.atom()).map(|s| s.to_string());
                    params.push((aname.to_string(), parse_ty(ty), loc));
                }
            }
            Some("ret") => {
                let ty = fi.get(1).and_then(|x| x.atom()).ok_or_else(|| err(form.pos(), "ret type"))?;
                let loc = fi.get(2).and_then(|x| x.atom()).map(|s| s.to_string());
                ret = Some((parse_ty(ty), loc));
            }
            _ => {
                if body.is_some() {
                    return Err(err(form.pos(), "multiple body expressions"));
                }
                body = Some(parse_expr(form)?);
            }
        }
    }
    Ok(FunDef {
        name,
        loc_params,
        params,
        ret: ret.ok_or_else(|| err(pos, "missing (ret ...)"))?,
        body: body.ok_or_else(|| err(pos, "missing function body"))?,
    })
}

fn parse_loc_expr(items: &[SExpr], pos: (usize, usize)) -> Result<LocExpr, SocalError> {
    match items.first().and_then(|a| a.atom()) {
        Some("start") => Ok(LocExpr::Start(atom_at(items, 1, pos)?)),
        Some("+1") => Ok(LocExpr::PlusOne(atom_at(items, 1, pos)?)),
        Some("after") => Ok(LocExpr::After {
            datatype: atom_at(items, 1, pos)?,
            loc: atom_at(items, 2, pos)?,
        }),
        Some("projtag") => Ok(LocExpr::ProjTag(atom_at(items, 1, pos)?)),
        Some("projfield") => {
            let key = items
                .get(1)
                .and_then(|k| k.list())
                .ok_or_else(|| err(pos, "expected (Ctor idx)"))?;
            Ok(LocExpr::ProjField {
                ctor: key
                    .first()
                    .and_then(|a| a.atom())
                    .ok_or_else(|| err(pos, "expected constructor"))?
                    .to_string(),
                field: key
                    .get(1)
                    .and_then(|a| a.atom())
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| err(pos, "expected field index"))?,
                loc: atom_at(items, 2, pos)?,
            })
        }
        Some("introlocvec") => {
            let tag_loc = atom_at(items, 1, pos)?;
            let mut entries = Vec::new();
            for e in &items[2..] {
                let el = e.list().ok_or_else(|| err(e.pos(), "expected ((K j) loc)"))?;
                let key = el
                    .first()
                    .and_then(|k| k.list())
                    .ok_or_else(|| err(e.pos(), "expected (K j)"))?;
                let k = key.first().and_then(|a| a.atom()).ok_or_else(|| err(e.pos(), "ctor"))?;
                let j: usize = key
                    .get(1)
                    .and_then(|a| a.atom())
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| err(e.pos(), "field index"))?;
                let l = el.get(1).and_then(|a| a.atom()).ok_or_else(|| err(e.pos(), "loc"))?;
                entries.push(((k.to_string(), j), l.to_string()));
            }
            Ok(LocExpr::IntroLocVec { tag_loc, entries })
        }
        _ => Err(err(pos, "unknown location expression")),
    }
}

fn atom_at(items: &[SExpr], idx: usize, pos: (usize, usize)) -> Result<String, SocalError> {
    items
        .get(idx)
        .and_then(|a| a.atom())
        .map(|s| s.to_string())
        .ok_or_else(|| err(pos, "expected a name"))
}

fn parse_expr(e: &SExpr) -> Result<Expr, SocalError> {
    match e {
        SExpr::Atom(s, line, col) => {
            if let Ok(n) = s.parse::<i64>() {
                Ok(Expr::Int(n))
            } else if s.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_') {
                Ok(Expr::Var(s.clone()))
            } else {
                Err(err((*line, *col), format!("bad atom `{s}`")))
            }
        }
        SExpr::List(items, line, col) => {
            let pos = (*line, *col);
            let head = items
                .first()
                .and_then(|h| h.atom())
                .ok_or_else(|| err(pos, "expected an expression head"))?;
            match head {
                "+" | "-" | "*" | "<=" | "<" | "=" => {
                    let op = match head {
                        "+" => PrimOp::Add,
                        "-" => PrimOp::Sub,
                        "*" => PrimOp::Mul,
                        "<=" => PrimOp::Le,
                        "<" => PrimOp::Lt,
                        _ => PrimOp::Eq,
                    };
                    if items.len() != 3 {
                        return Err(err(pos, format!("`{head}` takes two arguments")));
                    }
                    Ok(Expr::Prim(
                        op,
                        Box::new(parse_expr(&items[1])?),
                        Box::new(parse_expr(&items[2])?),
                    ))
                }
                "if" => {
                    if items.len() != 4 {
                        return Err(err(pos, "`if` takes three arguments"));
                    }
                    Ok(Expr::If(
                        Box::new(parse_expr(&items[1])?),
                        Box::new(parse_expr(&items[2])?),
                        Box::new(parse_expr(&items[3])?),
                    ))
                }
                "letregion" => {
                    if items.len() != 3 {
                        return Err(err(pos, "`letregion` takes a region and a body"));
                    }
                    let (region, datatype) = match &items[1] {
                        SExpr::Atom(r, _, _) => (r.clone(), None),
                        SExpr::List(ri, l, c) => {
                            let r = ri.first().and_then(|a| a.atom()).ok_or_else(|| err((*l, *c), "region name"))?;
                            let dt = ri.get(1).and_then(|a| a.atom()).ok_or_else(|| err((*l, *c), "region datatype"))?;
                            (r.to_string(), Some(dt.to_string()))
                        }
                    };
                    Ok(Expr::LetRegion {
                        region,
                        datatype,
                        body: Box::new(parse_expr(&items[2])?),
                    })
                }
                "letloc" => {
                    if items.len() != 3 {
                        return Err(err(pos, "`letloc` takes a binding and a body"));
                    }
                    let b = items[1].list().ok_or_else(|| err(pos, "expected (name rhs)"))?;
                    let loc = b.first().and_then(|a| a.atom()).ok_or_else(|| err(pos, "loc name"))?;
                    let rhs_list = b.get(1).and_then(|r| r.list()).ok_or_else(|| err(pos, "loc rhs"))?;
                    Ok(Expr::LetLoc {
                        loc: loc.to_string(),
                        rhs: parse_loc_expr(rhs_list, items[1].pos())?,
                        body: Box::new(parse_expr(&items[2])?),
                    })
                }
                "let" => {
                    if items.len() != 4 {
                        return Err(err(pos, "`let` takes a binding, an rhs, and a body"));
                    }
                    let b = items[1].list().ok_or_else(|| err(pos, "expected (name Ty [loc])"))?;
                    let var = b.first().and_then(|a| a.atom()).ok_or_else(|| err(pos, "var name"))?;
                    let ty = b.get(1).and_then(|a| a.atom()).ok_or_else(|| err(pos, "var type"))?;
                    let loc = b.get(2).and_then(|a| a.atom()).map(|s| s.to_string());
                    Ok(Expr::Let {
                        var: var.to_string(),
                        ty: parse_ty(ty),
                        loc,
                        rhs: Box::new(parse_expr(&items[2])?),
                        body: Box::new(parse_expr(&items[3])?),
                    })
                }
                "make" => {
                    let ctor = atom_at(items, 1, pos)?;
                    let loc = atom_at(items, 2, pos)?;
                    let args = items[3..].iter().map(parse_expr).collect::<Result<_, _>>()?;
                    Ok(Expr::Make { ctor, loc, args })
                }
                "case" => {
                    let scrutinee = parse_expr(items.get(1).ok_or_else(|| err(pos, "case scrutinee"))?)?;
                    let mut branches = Vec::new();
                    for b in &items[2..] {
                        let bi = b.list().ok_or_else(|| err(b.pos(), "expected a branch"))?;
                        if bi.len() != 2 {
                            return Err(err(b.pos(), "branch is ((K fields...) body)"));
                        }
                        let pat = bi[0].list().ok_or_else(|| err(b.pos(), "expected a pattern"))?;
                        let ctor = pat.first().and_then(|a| a.atom()).ok_or_else(|| err(b.pos(), "pattern ctor"))?;
                        let mut fields = Vec::new();
                        for p in &pat[1..] {
                            match p {
                                SExpr::Atom(x, _, _) => fields.push(PatField::Scalar(x.clone())),
                                SExpr::List(xs, l, c) => {
                                    let var = xs.first().and_then(|a| a.atom()).ok_or_else(|| err((*l, *c), "pattern var"))?;
                                    let loc = xs.get(1).and_then(|a| a.atom()).ok_or_else(|| err((*l, *c), "pattern loc"))?;
                                    fields.push(PatField::Packed {
                                        var: var.to_string(),
                                        loc: loc.to_string(),
                                    });
                                }
                            }
                        }
                        branches.push(Branch {
                            ctor: ctor.to_string(),
                            fields,
                            body: parse_expr(&bi[1])?,
                        });
                    }
                    Ok(Expr::Case { scrutinee: Box::new(scrutinee), branches })
                }
                "call" => {
                    if items.len() != 4 {
                        return Err(err(pos, "`call` takes a function, locations, and arguments"));
                    }
                    let func = atom_at(items, 1, pos)?;
                    let loc_args = items[2]
                        .list()
                        .ok_or_else(|| err(pos, "expected (locs...)"))?
                        .iter()
                        .map(|l| l.atom().map(|s| s.to_string()).ok_or_else(|| err(l.pos(), "loc name")))
                        .collect::<Result<_, _>>()?;
                    let args = items[3]
                        .list()
                        .ok_or_else(|| err(pos, "expected (args...)"))?
                        .iter()
                        .map(parse_expr)
                        .collect::<Result<_, _>>()?;
                    Ok(Expr::Call { func, loc_args, args })
                }
                other => Err(err(pos, format!("unknown expression head `{other}`"))),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_small_program() {
        let p = parse_socal(
            "(data Tree (Node Tree Tree) (Leaf Int))\n\
             (layout Tree Factored)\n\
             (main (letregion (r Tree) (letloc (lv (start r)) (make Leaf lv 7))))",
        )
        .unwrap();
        assert!(p.schema.get("Tree").is_some());
        assert!(matches!(p.main, Expr::LetRegion { .. }));
    }

    #[test]
    fn parser_is_syntax_only() {
        // A projection with an out-of-range key parses; the checker rejects.
        let p = parse_socal(
            "(data Tree (Node Tree Tree) (Leaf Int))\n\
             (layout Tree Factored)\n\
             (main (letregion (r Tree) (letloc (lv (start r)) (letloc (x (projfield (Leaf 2) lv)) 0))))",
        );
        assert!(p.is_ok());
    }

    #[test]
    fn unbalanced_parens() {
        let e = parse_socal("(main (letregion r 1)").unwrap_err();
        assert!(matches!(e, SocalError::Syntax { .. }));
    }
}
