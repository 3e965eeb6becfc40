//! Input generators, experiment runner, and report emitter.
//!
//! An experiment grid crosses sizes, layouts, and cursor modes for one
//! (suite, pass). Each cell serializes the generated input once, takes one
//! warmup run whose deterministic counters are attached to the row, then
//! times `repetitions` runs of the traversal only (serialization excluded)
//! and reports the median and minimum. Speedup columns compare against the
//! flat rows of the same grid: `S_fo` against flat-mutable, `S_fb` against
//! flat-immutable, and `S_gm` between the two flat variants.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::layout::{serialize, Arg, Value};
use crate::region::RegionStore;
use crate::schema::Layout;
use crate::traversal::{
    builtin_passes, run_fold, run_map, BufferCounters, CursorMode, PassKind, TraversalConfig,
    TraversalReport,
};

/// Default first chunk size for benchmark stores; unit tests use the
/// region default instead.
pub const BENCH_FIRST_CHUNK: u32 = 1 << 16;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BenchError {
    #[error("unknown suite `{0}`")]
    UnknownSuite(String),
    #[error("unknown pass `{1}` in suite `{0}`")]
    UnknownPass(String, String),
    #[error("repetitions must be at least 3, got {0}")]
    TooFewRepetitions(u32),
    #[error("no rows to report")]
    EmptyInput,
    #[error("{0}")]
    Run(String),
}

/// Deterministic input for a suite: `size` approximates the node count.
pub fn generate(suite: &str, size: u64, seed: u64) -> Result<Value, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15 ^ size);
    match suite {
        "List" => {
            let mut v = Value::leaf("Nil");
            for _ in 0..size {
                v = Value::new("Cons", vec![Arg::Int(rng.gen_range(0..1 << 30)), Arg::Value(v)]);
            }
            Ok(v)
        }
        "MonoTree" => Ok(perfect_tree(closest_depth(size, 2), 2, &mut rng)),
        "TernaryTree" => Ok(perfect_tree(closest_depth(size, 3), 3, &mut rng)),
        "LinearListReduction" => {
            let mut v = Value::leaf("End");
            for _ in 0..size {
                let mut args: Vec<Arg> =
                    (0..11).map(|_| Arg::Int(rng.gen_range(0..1 << 30))).collect();
                args.push(Arg::Value(v));
                v = Value::new("Cell", args);
            }
            Ok(v)
        }
        "ReduceNestedList" => {
            let mut v = Value::leaf("End");
            for _ in 0..size {
                let inner_len = rng.gen_range(4..=32);
                let mut inner = Value::leaf("Nil");
                for _ in 0..inner_len {
                    inner = Value::new(
                        "Cons",
                        vec![Arg::Int(rng.gen_range(0..1 << 30)), Arg::Value(inner)],
                    );
                }
                v = Value::new(
                    "NCons",
                    vec![
                        Arg::Int(rng.gen_range(0..1 << 30)),
                        Arg::Value(inner),
                        Arg::Value(v),
                    ],
                );
            }
            Ok(v)
        }
        "KDTree" => {
            let n = size.max(1) as usize;
            let mut points: Vec<[i64; 4]> = (0..n)
                .map(|_| {
                    [
                        rng.gen_range(0..1 << 20),
                        rng.gen_range(0..1 << 20),
                        rng.gen_range(0..1 << 20),
                        rng.gen_range(1..1024),
                    ]
                })
                .collect();
            Ok(build_kd(&mut points, 0))
        }
        other => Err(BenchError::UnknownSuite(other.to_string())),
    }
}

/// Perfect-tree depth whose node count is closest to `size`.
fn closest_depth(size: u64, arity: u64) -> u32 {
    let nodes = |d: u32| -> u64 {
        let mut total = 0u64;
        let mut level = 1u64;
        for _ in 0..=d {
            total = total.saturating_add(level);
            level = level.saturating_mul(arity);
        }
        total
    };
    let mut d = 0;
    while nodes(d + 1) <= size {
        d += 1;
    }
    if size.saturating_sub(nodes(d)) > nodes(d + 1).saturating_sub(size) {
        d + 1
    } else {
        d
    }
}

fn perfect_tree(depth: u32, arity: usize, rng: &mut ChaCha8Rng) -> Value {
    let (node, leaf) = if arity == 2 { ("Node", "Leaf") } else { ("Node3", "Leaf3") };
    if depth == 0 {
        return Value::new(leaf, vec![Arg::Int(rng.gen_range(0..1 << 30))]);
    }
    let args = (0..arity)
        .map(|_| Arg::Value(perfect_tree(depth - 1, arity, rng)))
        .collect();
    Value::new(node, args)
}

/// Median-split build over 3D integer points. Children partition the sorted
/// points at the midpoint; the split value is the first coordinate of the
/// right half, so left <= split <= right along the split dimension.
fn build_kd(points: &mut [[i64; 4]], depth: usize) -> Value {
    if points.len() == 1 {
        let p = points[0];
        return Value::new(
            "Leaf",
            vec![Arg::Int(p[0]), Arg::Int(p[1]), Arg::Int(p[2]), Arg::Int(p[3])],
        );
    }
    let dim = depth % 3;
    let mid = points.len() / 2;
    points.select_nth_unstable_by_key(mid, |p| p[dim]);
    let split = points[mid][dim];
    let mut bounds = [i64::MAX, i64::MAX, i64::MAX, i64::MIN, i64::MIN, i64::MIN];
    let mut mass = 0i64;
    for p in points.iter() {
        for axis in 0..3 {
            bounds[axis] = bounds[axis].min(p[axis]);
            bounds[3 + axis] = bounds[3 + axis].max(p[axis]);
        }
        mass = mass.wrapping_add(p[3]);
    }
    let (left, right) = points.split_at_mut(mid);
    let l = build_kd(left, depth + 1);
    let r = build_kd(right, depth + 1);
    Value::new(
        "Node",
        vec![
            Arg::Int(dim as i64),
            Arg::Int(split),
            Arg::Int(bounds[0]),
            Arg::Int(bounds[1]),
            Arg::Int(bounds[2]),
            Arg::Int(bounds[3]),
            Arg::Int(bounds[4]),
            Arg::Int(bounds[5]),
            Arg::Int(mass),
            Arg::Value(l),
            Arg::Value(r),
        ],
    )
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub suite: String,
    pub pass: String,
    pub sizes: Vec<u64>,
    pub layouts: Vec<Layout>,
    pub modes: Vec<CursorMode>,
    pub repetitions: u32,
    pub seed: u64,
    /// First chunk size for the backing stores; `None` uses the bench
    /// default of 64 KiB.
    pub first_chunk: Option<u32>,
    pub traversal: TraversalConfig,
}

impl BenchSpec {
    pub fn new(suite: &str, pass: &str) -> BenchSpec {
        BenchSpec {
            suite: suite.to_string(),
            pass: pass.to_string(),
            sizes: vec![10_000],
            layouts: vec![Layout::Flat, Layout::Factored],
            modes: vec![CursorMode::Mutable],
            repetitions: 5,
            seed: 0,
            first_chunk: None,
            traversal: TraversalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BenchRow {
    pub suite: String,
    pub pass: String,
    pub size: u64,
    pub layout: Layout,
    #[serde(serialize_with = "ser_mode")]
    pub mode: CursorMode,
    pub status: String,
    pub median_ns: u64,
    pub min_ns: u64,
    pub s_fo: Option<f64>,
    pub s_fb: Option<f64>,
    pub s_gm: Option<f64>,
    pub dead_fraction: f64,
    pub bytes_read_total: u64,
    pub steps: u64,
    pub bundle_copies: u64,
    pub buffers: Vec<BufferCounters>,
}

fn ser_mode<S: serde::Serializer>(m: &CursorMode, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(m.name())
}

/// Run the full grid of a spec. Error rows (for example a depth cap hit in
/// immutable mode) are recorded with their message rather than aborting the
/// grid.
pub fn run_experiment(spec: &BenchSpec) -> Result<Vec<BenchRow>, BenchError> {
    if spec.repetitions < 3 {
        return Err(BenchError::TooFewRepetitions(spec.repetitions));
    }
    let registry = builtin_passes();
    let rp = registry
        .lookup(&spec.suite, &spec.pass)
        .ok_or_else(|| match registry.iter().any(|p| p.suite == spec.suite) {
            true => BenchError::UnknownPass(spec.suite.clone(), spec.pass.clone()),
            false => BenchError::UnknownSuite(spec.suite.clone()),
        })?;
    let mut sizes = spec.sizes.clone();
    sizes.sort_unstable();
    let chunk = spec.first_chunk.unwrap_or(BENCH_FIRST_CHUNK);

    let mut rows = Vec::new();
    for &size in &sizes {
        let value = generate(&spec.suite, size, spec.seed)?;
        for &layout in &spec.layouts {
            let schema = rp.schema_for(layout);
            let mut store = RegionStore::with_config(chunk, false);
            let root = serialize(&schema, &rp.datatype, &value, &mut store)
                .map_err(|e| BenchError::Run(e.to_string()))?;
            for &mode in &spec.modes {
                let mut timings = Vec::with_capacity(spec.repetitions as usize);
                let mut warm: Option<TraversalReport> = None;
                let mut status = "ok".to_string();
                // Run 0 is the warmup: excluded from timing, its
                // deterministic counters are the row's counters.
                for rep in 0..=spec.repetitions {
                    let outcome = match rp.pass.kind {
                        PassKind::Fold => {
                            run_fold(&schema, &rp.pass, &root, &store, mode, &spec.traversal)
                        }
                        PassKind::Map => {
                            let mut out_store = RegionStore::with_config(chunk, false);
                            run_map(
                                &schema,
                                &rp.pass,
                                &root,
                                &store,
                                &mut out_store,
                                mode,
                                &spec.traversal,
                            )
                        }
                    };
                    match outcome {
                        Err(e) => {
                            status = e.to_string();
                            break;
                        }
                        Ok(report) => {
                            if rep == 0 {
                                warm = Some(report);
                            } else {
                                timings.push(report.wall_ns);
                            }
                        }
                    }
                }
                timings.sort_unstable();
                let (median_ns, min_ns) = if timings.is_empty() {
                    (0, 0)
                } else {
                    let mid = timings.len() / 2;
                    let median = if timings.len() % 2 == 1 {
                        timings[mid]
                    } else {
                        (timings[mid - 1] + timings[mid]) / 2
                    };
                    (median, timings[0])
                };
                let (buffers, steps, copies, total_read, dead) = match &warm {
                    Some(r) => (
                        r.buffers.clone(),
                        r.steps,
                        r.bundle_copies,
                        r.total_bytes_read(),
                        r.dead_fraction,
                    ),
                    None => (Vec::new(), 0, 0, 0, rp.pass.dead_fraction()),
                };
                rows.push(BenchRow {
                    suite: spec.suite.clone(),
                    pass: spec.pass.clone(),
                    size,
                    layout,
                    mode,
                    status,
                    median_ns,
                    min_ns,
                    s_fo: None,
                    s_fb: None,
                    s_gm: None,
                    dead_fraction: dead,
                    bytes_read_total: total_read,
                    steps,
                    bundle_copies: copies,
                    buffers,
                });
            }
            root.release(&mut store).map_err(|e| BenchError::Run(e.to_string()))?;
        }
    }
    fill_speedups(&mut rows);
    Ok(rows)
}

/// Speedups are ratios of medians against the flat rows of the same size.
fn fill_speedups(rows: &mut [BenchRow]) {
    let mut flat_mut: HashMap<u64, u64> = HashMap::new();
    let mut flat_imm: HashMap<u64, u64> = HashMap::new();
    for r in rows.iter() {
        if r.layout == Layout::Flat && r.status == "ok" && r.median_ns > 0 {
            match r.mode {
                CursorMode::Mutable => flat_mut.insert(r.size, r.median_ns),
                CursorMode::Immutable => flat_imm.insert(r.size, r.median_ns),
            };
        }
    }
    for r in rows.iter_mut() {
        if r.status != "ok" || r.median_ns == 0 {
            continue;
        }
        r.s_fo = flat_mut.get(&r.size).map(|&t| t as f64 / r.median_ns as f64);
        r.s_fb = flat_imm.get(&r.size).map(|&t| t as f64 / r.median_ns as f64);
        r.s_gm = match (flat_imm.get(&r.size), flat_mut.get(&r.size)) {
            (Some(&i), Some(&m)) => Some(i as f64 / m as f64),
            _ => None,
        };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Json,
    Csv,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<ReportFormat> {
        match s.to_ascii_lowercase().as_str() {
            "table" => Some(ReportFormat::Table),
            "json" => Some(ReportFormat::Json),
            "csv" => Some(ReportFormat::Csv),
            _ => None,
        }
    }
}

const COLUMNS: [&str; 12] = [
    "suite",
    "pass",
    "size",
    "layout",
    "mode",
    "median_ns",
    "s_fo",
    "s_fb",
    "s_gm",
    "dead_fraction",
    "bytes_read_total",
    "status",
];

fn cell_values(r: &BenchRow) -> [String; 12] {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    [
        r.suite.clone(),
        r.pass.clone(),
        r.size.to_string(),
        r.layout.to_string().to_ascii_lowercase(),
        r.mode.name().to_string(),
        r.median_ns.to_string(),
        opt(r.s_fo),
        opt(r.s_fb),
        opt(r.s_gm),
        format!("{:.4}", r.dead_fraction),
        r.bytes_read_total.to_string(),
        r.status.clone(),
    ]
}

/// Render rows in a stable column order.
pub fn emit_report(rows: &[BenchRow], format: ReportFormat) -> Result<String, BenchError> {
    if rows.is_empty() {
        return Err(BenchError::EmptyInput);
    }
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(rows).expect("rows serialize")),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(COLUMNS).expect("csv write");
            for r in rows {
                w.write_record(cell_values(r)).expect("csv write");
            }
            Ok(String::from_utf8(w.into_inner().expect("csv flush")).expect("csv utf8"))
        }
        ReportFormat::Table => {
            let mut widths: Vec<usize> = COLUMNS.iter().map(|c| c.len()).collect();
            let cells: Vec<[String; 12]> = rows.iter().map(cell_values).collect();
            for row in &cells {
                for (w, c) in widths.iter_mut().zip(row.iter()) {
                    *w = (*w).max(c.len());
                }
            }
            let mut out = String::new();
            for (i, c) in COLUMNS.iter().enumerate() {
                out.push_str(&format!("{:width$}  ", c, width = widths[i]));
            }
            out.push('\n');
            for row in &cells {
                for (i, c) in row.iter().enumerate() {
                    out.push_str(&format!("{:width$}  ", c, width = widths[i]));
                }
                out.push('\n');
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_is_deterministic() {
        for suite in [
            "List",
            "MonoTree",
            "TernaryTree",
            "LinearListReduction",
            "ReduceNestedList",
            "KDTree",
        ] {
            let a = generate(suite, 50, 7).unwrap();
            let b = generate(suite, 50, 7).unwrap();
            assert_eq!(a, b, "suite {suite}");
        }
        assert!(matches!(generate("Nope", 1, 0), Err(BenchError::UnknownSuite(_))));
    }

    #[test]
    fn monotree_size_seven_is_depth_two() {
        let v = generate("MonoTree", 7, 0).unwrap();
        assert_eq!(v.node_count(), 7);
        assert_eq!(v.ctor, "Node");
        match &v.args[0] {
            Arg::Value(l) => {
                assert_eq!(l.ctor, "Node");
                assert!(matches!(&l.args[0], Arg::Value(c) if c.ctor == "Leaf"));
            }
            _ => panic!(),
        }
    }

    #[test]
    fn linear_list_cells_have_eleven_ints() {
        let v = generate("LinearListReduction", 3, 1).unwrap();
        let mut cur = &v;
        let mut cells = 0;
        while cur.ctor == "Cell" {
            assert_eq!(cur.args.len(), 12);
            assert!(cur.args[0..11].iter().all(|a| matches!(a, Arg::Int(_))));
            cells += 1;
            cur = match &cur.args[11] {
                Arg::Value(v) => v,
                _ => panic!(),
            };
        }
        assert_eq!(cur.ctor, "End");
        assert_eq!(cells, 3);
    }

    #[test]
    fn grid_shape_and_speedups() {
        let mut spec = BenchSpec::new("MonoTree", "sumTree");
        spec.sizes = vec![127];
        spec.modes = vec![CursorMode::Mutable];
        spec.repetitions = 3;
        let rows = run_experiment(&spec).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.s_fo.is_some()));
        let flat = rows.iter().find(|r| r.layout == Layout::Flat).unwrap();
        assert!((flat.s_fo.unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn counter_columns_are_deterministic_across_runs() {
        let mut spec = BenchSpec::new("LinearListReduction", "reduce");
        spec.sizes = vec![257];
        spec.repetitions = 3;
        let a = run_experiment(&spec).unwrap();
        let b = run_experiment(&spec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.buffers, y.buffers);
            assert_eq!(x.steps, y.steps);
            assert_eq!(x.bytes_read_total, y.bytes_read_total);
        }
    }

    #[test]
    fn reports_and_empty_input() {
        assert_eq!(emit_report(&[], ReportFormat::Csv).unwrap_err(), BenchError::EmptyInput);
        let mut spec = BenchSpec::new("List", "sumList");
        spec.sizes = vec![10];
        spec.repetitions = 3;
        let rows = run_experiment(&spec).unwrap();
        let csv_text = emit_report(&rows, ReportFormat::Csv).unwrap();
        assert_eq!(csv_text.lines().count(), 1 + rows.len());
        let table = emit_report(&rows, ReportFormat::Table).unwrap();
        assert!(table.starts_with("suite"));
        let json = emit_report(&rows, ReportFormat::Json).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.as_array().unwrap().len(), rows.len());
    }

    #[test]
    fn immutable_depth_cap_surfaces_as_row_status() {
        let mut spec = BenchSpec::new("List", "sumListAcc");
        spec.sizes = vec![1000];
        spec.layouts = vec![Layout::Flat];
        spec.modes = vec![CursorMode::Immutable, CursorMode::Mutable];
        spec.repetitions = 3;
        spec.traversal = TraversalConfig { max_depth: 100 };
        let rows = run_experiment(&spec).unwrap();
        let imm = rows.iter().find(|r| r.mode == CursorMode::Immutable).unwrap();
        assert!(imm.status.contains("depth"), "status: {}", imm.status);
        // The tail-call structure of mutable cursors keeps the same fold
        // within the cap.
        let m = rows.iter().find(|r| r.mode == CursorMode::Mutable).unwrap();
        assert_eq!(m.status, "ok");
    }
}
