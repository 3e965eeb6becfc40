//! The `packedadt` command: schema checking, value packing/unpacking to
//! `.fadt` container files, calculus checking/running/fuzzing, and the
//! benchmark harness.
//!
//! Exit codes: 0 success, 1 usage, 2 validation or typecheck failure,
//! 3 runtime error, 4 fuzz counterexample found. Diagnostics go to stderr,
//! data to stdout.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use packedadt::bench::{emit_report, run_experiment, BenchSpec, ReportFormat};
use packedadt::layout::{
    deserialize, export_container, import_container, serialize_with, SerializeOptions, Value,
};
use packedadt::region::{RegionStore, MIN_CHUNK_SIZE};
use packedadt::schema::{AdtSchema, Layout};
use packedadt::socal::{
    check_well_formed, fuzz_type_safety, interpret, parse_socal, run, typecheck, Interp,
    InterpOptions, RtVal, SocalError,
};
use packedadt::traversal::{CursorMode, TraversalConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_COUNTEREXAMPLE: u8 = 4;

#[derive(Parser)]
#[command(name = "packedadt", version, about, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a schema file.
    Schema {
        #[command(subcommand)]
        cmd: SchemaCmd,
    },
    /// Serialize a JSON value into a container file.
    Pack {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long = "type")]
        datatype: String,
        #[arg(long, value_parser = parse_layout)]
        layout: Layout,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        random_access: bool,
        /// Share every k-th packed child through an indirection.
        #[arg(long, value_name = "K")]
        indirection: Option<u32>,
    },
    /// Read a container file back into JSON on stdout.
    Unpack {
        #[arg(long)]
        schema: PathBuf,
        /// Override datatype inference from the container's schema hash.
        #[arg(long = "type")]
        datatype: Option<String>,
        file: PathBuf,
    },
    /// Check, run, or fuzz calculus programs.
    Socal {
        #[command(subcommand)]
        cmd: SocalCmd,
    },
    /// Run benchmark grids.
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
}

#[derive(Subcommand)]
enum SchemaCmd {
    /// Parse and validate a `.adt` file.
    Check { file: PathBuf },
}

#[derive(Subcommand)]
enum SocalCmd {
    /// Typecheck a program; `--trace` prints one JSON object per step.
    Check {
        file: PathBuf,
        #[arg(long)]
        trace: bool,
    },
    /// Typecheck, interpret, and print the result.
    Run {
        file: PathBuf,
        #[arg(long)]
        trace: bool,
        /// Check store well-formedness after every step.
        #[arg(long)]
        wf: bool,
    },
    /// Generate and validate random well-typed programs.
    Fuzz {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: u32,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    Run {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        pass: String,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "flat,factored", value_parser = parse_layout)]
        layouts: Vec<Layout>,
        #[arg(long, value_delimiter = ',', default_value = "mutable", value_parser = parse_mode)]
        modes: Vec<CursorMode>,
        #[arg(long, default_value_t = 5)]
        reps: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "table", value_parser = parse_format)]
        format: ReportFormat,
    },
}

fn parse_layout(s: &str) -> Result<Layout, String> {
    match s.to_ascii_lowercase().as_str() {
        "flat" => Ok(Layout::Flat),
        "factored" => Ok(Layout::Factored),
        other => Err(format!("unknown layout `{other}` (flat|factored)")),
    }
}

fn parse_mode(s: &str) -> Result<CursorMode, String> {
    CursorMode::parse(s).ok_or_else(|| format!("unknown mode `{s}` (immutable|mutable)"))
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    ReportFormat::parse(s).ok_or_else(|| format!("unknown format `{s}` (table|json|csv)"))
}

/// First chunk size override, in decimal bytes.
fn first_chunk_from_env() -> anyhow::Result<Option<u32>> {
    match std::env::var("PACKEDADT_FIRST_CHUNK") {
        Err(_) => Ok(None),
        Ok(s) => {
            let n: u32 = s
                .parse()
                .with_context(|| format!("PACKEDADT_FIRST_CHUNK must be a decimal byte count, got `{s}`"))?;
            if n < MIN_CHUNK_SIZE {
                return Err(anyhow!("PACKEDADT_FIRST_CHUNK must be at least {MIN_CHUNK_SIZE}"));
            }
            Ok(Some(n))
        }
    }
}

fn load_schema(path: &PathBuf) -> Result<Arc<AdtSchema>, (u8, anyhow::Error)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(|e| (EXIT_RUNTIME, e))?;
    AdtSchema::parse(&text)
        .map(Arc::new)
        .map_err(|e| (EXIT_VALIDATION, anyhow!("{e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_USAGE)
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), (u8, anyhow::Error)> {
    match cli.command {
        Command::Schema { cmd: SchemaCmd::Check { file } } => {
            let schema = load_schema(&file)?;
            println!(
                "ok: {} datatype(s): {}",
                schema.datatypes().len(),
                schema
                    .datatypes()
                    .iter()
                    .map(|d| format!("{} [{}]", d.name, d.layout))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            Ok(())
        }
        Command::Pack { schema, datatype, layout, input, out, random_access, indirection } => {
            let base = load_schema(&schema)?;
            let effective = base
                .with_layout(&datatype, layout)
                .map_err(|e| (EXIT_VALIDATION, anyhow!("{e}")))?;
            let effective = Arc::new(effective);
            let text = std::fs::read_to_string(&input)
                .with_context(|| format!("reading {}", input.display()))
                .map_err(|e| (EXIT_RUNTIME, e))?;
            let value: Value =
                serde_json::from_str(&text).map_err(|e| (EXIT_VALIDATION, anyhow!("{e}")))?;
            let chunk = first_chunk_from_env()
                .map_err(|e| (EXIT_USAGE, e))?
                .unwrap_or(1 << 16);
            let mut store = RegionStore::with_config(chunk, false);
            let opts =
                SerializeOptions { random_access, indirection_period: indirection };
            let root = serialize_with(&effective, &datatype, &value, &mut store, &opts)
                .map_err(|e| (EXIT_VALIDATION, anyhow!("{e}")))?;
            let bytes =
                export_container(&root, &store).map_err(|e| (EXIT_RUNTIME, anyhow!("{e}")))?;
            std::fs::write(&out, &bytes)
                .with_context(|| format!("writing {}", out.display()))
                .map_err(|e| (EXIT_RUNTIME, e))?;
            eprintln!("packed {} bytes into {}", bytes.len(), out.display());
            Ok(())
        }
        Command::Unpack { schema, datatype, file } => {
            let base = load_schema(&schema)?;
            let bytes = std::fs::read(&file)
                .with_context(|| format!("reading {}", file.display()))
                .map_err(|e| (EXIT_RUNTIME, e))?;
            // The header's layout byte decides which layout variant of each
            // datatype the hash is matched against.
            let root = import_with_layout_probe(&base, &bytes, datatype.as_deref())
                .map_err(|e| (EXIT_VALIDATION, e))?;
            let mut store = RegionStore::with_config(1 << 16, false);
            let root = root(&mut store)?;
            let value = deserialize(&root, &store).map_err(|e| (EXIT_RUNTIME, anyhow!("{e}")))?;
            println!("{}", serde_json::to_string(&value).expect("value serializes"));
            Ok(())
        }
        Command::Socal { cmd } => socal_cmd(cmd),
        Command::Bench { cmd } => bench_cmd(cmd),
    }
}

type RootThunk<'a> = Box<
    dyn FnOnce(
            &mut RegionStore,
        ) -> Result<packedadt::layout::SerializedRoot, (u8, anyhow::Error)>
        + 'a,
>;

/// Resolve the datatype for an `unpack`: honor an explicit `--type`, else
/// try each datatype under the layout recorded in the header.
fn import_with_layout_probe<'a>(
    base: &'a Arc<AdtSchema>,
    bytes: &'a [u8],
    datatype: Option<&'a str>,
) -> Result<RootThunk<'a>, anyhow::Error> {
    Ok(Box::new(move |store: &mut RegionStore| {
        let layout_byte = bytes.get(6).copied();
        let layout = match layout_byte {
            Some(0) => Layout::Flat,
            Some(1) => Layout::Factored,
            _ => return Err((EXIT_VALIDATION, anyhow!("container file truncated"))),
        };
        let candidates: Vec<String> = match datatype {
            Some(d) => vec![d.to_string()],
            None => base.datatypes().iter().map(|d| d.name.clone()).collect(),
        };
        for name in candidates {
            let schema = match base.with_layout(&name, layout) {
                Ok(s) => Arc::new(s),
                Err(_) => continue,
            };
            match import_container(store, &schema, bytes) {
                Ok(root) => return Ok(root),
                Err(packedadt::layout::LayoutError::SchemaHashMismatch) => continue,
                Err(e) => return Err((EXIT_VALIDATION, anyhow!("{e}"))),
            }
        }
        Err((
            EXIT_VALIDATION,
            anyhow!("container schema hash does not match any datatype of the given schema"),
        ))
    }))
}

fn socal_cmd(cmd: SocalCmd) -> Result<(), (u8, anyhow::Error)> {
    match cmd {
        SocalCmd::Check { file, trace } => {
            let text = std::fs::read_to_string(&file)
                .with_context(|| format!("reading {}", file.display()))
                .map_err(|e| (EXIT_RUNTIME, e))?;
            let program = parse_socal(&text).map_err(|e| (EXIT_VALIDATION, anyhow!("{e}")))?;
            let outcome = typecheck(&program).map_err(|e| (EXIT_VALIDATION, anyhow!("{e}")))?;
            if trace {
                for step in &outcome.trace {
                    println!("{}", serde_json::to_string(step).expect("trace serializes"));
                }
            }
            eprintln!("ok: {} constraints accumulated", outcome.constraints.len());
            Ok(())
        }
        SocalCmd::Run { file, trace, wf } => {
            let text = std::fs::read_to_string(&file)
                .with_context(|| format!("reading {}", file.display()))
                .map_err(|e| (EXIT_RUNTIME, e))?;
            let program = parse_socal(&text).map_err(|e| (EXIT_VALIDATION, anyhow!("{e}")))?;
            typecheck(&program).map_err(|e| (EXIT_VALIDATION, anyhow!("{e}")))?;
            let opts = InterpOptions { collect_trace: trace, max_steps: 0 };
            let outcome = if wf {
                let mut it = Interp::new(&program);
                let mut cb = |it: &Interp<'_>| {
                    let report = check_well_formed(it);
                    match report.violation {
                        None => Ok(()),
                        Some(v) => Err(SocalError::Stuck {
                            rule: "well-formedness".into(),
                            detail: format!("{} at {}", v.clause, v.subject),
                        }),
                    }
                };
                run(&mut it, &opts, Some(&mut cb))
            } else {
                interpret(&program, &opts).map(|(o, _)| o)
            }
            .map_err(|e| (EXIT_RUNTIME, anyhow!("{e}")))?;
            for step in &outcome.trace {
                println!("{}", serde_json::to_string(step).expect("trace serializes"));
            }
            match outcome.result {
                RtVal::Int(n) => println!("{n}"),
                RtVal::Located { value, .. } => {
                    println!("{}", serde_json::to_string(&value).expect("value serializes"))
                }
            }
            Ok(())
        }
        SocalCmd::Fuzz { seed, count } => {
            let summary = fuzz_type_safety(seed, count).map_err(|e| (EXIT_USAGE, anyhow!("{e}")))?;
            println!(
                "{}",
                serde_json::json!({
                    "count": summary.count,
                    "passed": summary.passed,
                    "failures": summary.failures,
                })
            );
            if summary.passed != summary.count {
                return Err((
                    EXIT_COUNTEREXAMPLE,
                    anyhow!("{} of {} programs failed", summary.count - summary.passed, summary.count),
                ));
            }
            Ok(())
        }
    }
}

fn bench_cmd(cmd: BenchCmd) -> Result<(), (u8, anyhow::Error)> {
    match cmd {
        BenchCmd::Run { suite, pass, sizes, layouts, modes, reps, seed, format } => {
            let first_chunk = first_chunk_from_env().map_err(|e| (EXIT_USAGE, e))?;
            let spec = BenchSpec {
                suite,
                pass,
                sizes,
                layouts,
                modes,
                repetitions: reps,
                seed,
                first_chunk,
                traversal: TraversalConfig::default(),
            };
            let rows = run_experiment(&spec).map_err(|e| (EXIT_VALIDATION, anyhow!("{e}")))?;
            let text = emit_report(&rows, format).map_err(|e| (EXIT_RUNTIME, anyhow!("{e}")))?;
            print!("{text}");
            Ok(())
        }
    }
}
