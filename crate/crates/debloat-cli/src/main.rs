//! `debloat` — drive the schema store, the runtime simulator, the ELF
//! erasure engine, and the gadget scanner from the command line.
//!
//! Exit codes: 0 success, 2 usage/format/capability/symbol errors,
//! 3 I/O errors, 4 trace aborted during execution.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use debloat_core::elf::{self, DEFAULT_BASE};
use debloat_core::gadget::{self, GadgetReport};
use debloat_core::runtime::{
    self, AppDefinition, LoadOptions, TraceEntry, VmError, VmState, DEFAULT_JIT_THRESHOLD,
};
use debloat_core::schema::{self, DebloatSchema, MethodRef, StoreError, StoreHandle, StoreMode};

const EXIT_FORMAT: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_ABORTED: u8 = 4;

#[derive(Parser)]
#[command(
    name = "debloat",
    version,
    about = "Schema-driven dynamic debloating simulator"
)]
struct Cli {
    /// Schema store file.
    #[arg(long, global = true, default_value = "store.json")]
    store: PathBuf,
    /// Invocations before a method is JIT-compiled.
    #[arg(long, global = true, default_value_t = DEFAULT_JIT_THRESHOLD)]
    jit_threshold: u64,
    /// Maximum gadget length, in instructions.
    #[arg(long, global = true, default_value_t = gadget::DEFAULT_MAX_DEPTH)]
    max_depth: usize,
    /// Suppress informing events on interception.
    #[arg(long, global = true)]
    no_graceful_termination: bool,
    #[arg(long, global = true, value_enum, default_value_t = Output::Json)]
    output: Output,
    /// Instance state file persisted between `run` and `aot`.
    #[arg(long, global = true)]
    state: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Output {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect or edit stored debloating schemas.
    Schema {
        #[command(subcommand)]
        action: SchemaAction,
    },
    /// Load an app, run an invocation trace, report what happened.
    Run { appdef: PathBuf, trace: PathBuf },
    /// Profile-driven AOT pass over persisted instance state.
    Aot { appdef: PathBuf },
    /// Erase functions from a shared object's loaded image offline.
    DebloatElf(DebloatElfArgs),
    /// Search function spans for ROP gadgets.
    Gadgets(GadgetArgs),
}

#[derive(Subcommand)]
enum SchemaAction {
    /// Store the schema document in FILE (replaces the package's entry).
    Set { file: PathBuf },
    /// Print the stored schema for PACKAGE, or null.
    Get { package: String },
    /// Remove one method (a JSON method document) from PACKAGE's schema.
    RemoveMethod { package: String, method: String },
    /// List stored packages.
    List,
}

#[derive(Args)]
struct DebloatElfArgs {
    library: PathBuf,
    /// Exported functions to erase.
    symbols: Vec<String>,
    /// Output image file; a span manifest lands next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GadgetArgs {
    library: PathBuf,
    /// Comma-separated functions to scan.
    #[arg(long, value_delimiter = ',', conflicts_with = "all")]
    functions: Vec<String>,
    /// Scan every exported function.
    #[arg(long)]
    all: bool,
    /// Erase these functions, then report before/after and the reduction.
    #[arg(long, value_delimiter = ',')]
    before_after: Vec<String>,
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn format(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_FORMAT,
            message: message.into(),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(err: StoreError) -> Self {
        let code = match &err {
            StoreError::Io(_) => EXIT_IO,
            StoreError::Format(_) | StoreError::Capability(_) => EXIT_FORMAT,
        };
        CliError {
            code,
            message: err.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError {
            code: EXIT_IO,
            message: err.to_string(),
        }
    }
}

impl From<debloat_core::FormatError> for CliError {
    fn from(err: debloat_core::FormatError) -> Self {
        CliError::format(err.to_string())
    }
}

impl From<debloat_core::ElfError> for CliError {
    fn from(err: debloat_core::ElfError) -> Self {
        CliError::format(err.to_string())
    }
}

impl From<debloat_core::GadgetError> for CliError {
    fn from(err: debloat_core::GadgetError) -> Self {
        CliError::format(err.to_string())
    }
}

impl From<VmError> for CliError {
    fn from(err: VmError) -> Self {
        let code = match &err {
            VmError::Io(_) => EXIT_IO,
            VmError::Store(StoreError::Io(_)) => EXIT_IO,
            VmError::UnknownMethod(_) | VmError::Execution(_) => EXIT_ABORTED,
            _ => EXIT_FORMAT,
        };
        CliError {
            code,
            message: err.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Schema { action } => cmd_schema(&cli, action),
        Command::Run { appdef, trace } => cmd_run(&cli, appdef, trace),
        Command::Aot { appdef } => cmd_aot(&cli, appdef),
        Command::DebloatElf(args) => cmd_debloat_elf(&cli, args),
        Command::Gadgets(args) => cmd_gadgets(&cli, args),
    }
}

fn print_schema(cli: &Cli, schema: Option<&DebloatSchema>) {
    match (cli.output, schema) {
        (Output::Json, Some(s)) => print!("{}", schema::serialize_schema(s)),
        (Output::Json, None) => println!("null"),
        (Output::Text, Some(s)) => println!(
            "{}: {} bytecode, {} native, {} whitelisted, graceful_termination={}",
            s.package,
            s.bytecode_methods.len(),
            s.native_methods.len(),
            s.whitelist.len(),
            s.graceful_termination
        ),
        (Output::Text, None) => println!("absent"),
    }
}

fn cmd_schema(cli: &Cli, action: &SchemaAction) -> Result<(), CliError> {
    match action {
        SchemaAction::Set { file } => {
            let text = fs::read_to_string(file)?;
            let schema = schema::parse_schema(&text)?;
            let handle = schema::open_store(&cli.store, StoreMode::ReadWrite)?;
            schema::store_put(&handle, &schema)?;
            print_schema(cli, Some(&schema));
            Ok(())
        }
        SchemaAction::Get { package } => {
            let handle = schema::open_store(&cli.store, StoreMode::ReadOnly)?;
            let schema = schema::store_get(&handle, package)?;
            print_schema(cli, schema.as_ref());
            Ok(())
        }
        SchemaAction::RemoveMethod { package, method } => {
            let method: MethodRef = serde_json::from_str(method)
                .map_err(|e| CliError::format(format!("bad method document: {e}")))?;
            method.validate()?;
            let handle = schema::open_store(&cli.store, StoreMode::ReadWrite)?;
            schema::store_remove_method(&handle, package, &method)?;
            let schema = schema::store_get(&handle, package)?;
            print_schema(cli, schema.as_ref());
            Ok(())
        }
        SchemaAction::List => {
            let handle = schema::open_store(&cli.store, StoreMode::ReadOnly)?;
            let packages = schema::store_list(&handle)?;
            match cli.output {
                Output::Json => println!("{}", serde_json::to_string_pretty(&packages).unwrap()),
                Output::Text => {
                    for p in packages {
                        println!("{p}");
                    }
                }
            }
            Ok(())
        }
    }
}

fn read_appdef(path: &Path) -> Result<AppDefinition, CliError> {
    let text = fs::read_to_string(path)?;
    Ok(AppDefinition::parse(&text)?)
}

fn load_options(cli: &Cli) -> Result<LoadOptions, CliError> {
    let mut options = LoadOptions::with_jit_threshold(cli.jit_threshold);
    if cli.no_graceful_termination {
        options.graceful_termination = Some(false);
    }
    if let Some(state_path) = &cli.state {
        if state_path.exists() {
            let state = read_state(state_path)?;
            options.odex_carryover = state.odex;
        }
    }
    Ok(options)
}

fn read_state(path: &Path) -> Result<VmState, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::format(format!("state {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(format!("corrupt state: {e}")))
}

fn write_state(path: &Path, state: &VmState) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(state).unwrap();
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn cmd_run(cli: &Cli, appdef_path: &Path, trace_path: &Path) -> Result<(), CliError> {
    let appdef = read_appdef(appdef_path)?;
    let trace_text = fs::read_to_string(trace_path)?;
    let trace: Vec<TraceEntry> = serde_json::from_str(&trace_text)
        .map_err(|e| CliError::format(format!("bad trace: {e}")))?;

    // Consumers only ever read the store.
    let store: StoreHandle = schema::open_store(&cli.store, StoreMode::ReadOnly)?;
    let options = load_options(cli)?;
    let mut vm = runtime::load_app(&appdef, &store, options)?;
    let report = vm.run_trace(&trace);

    if let Some(state_path) = &cli.state {
        write_state(state_path, &vm.snapshot_state())?;
    }

    match cli.output {
        Output::Json => println!("{}", serde_json::to_string_pretty(&report).unwrap()),
        Output::Text => {
            println!(
                "invoked {} methods, debloated {}, {} events",
                report.invoked.len(),
                report.debloated.len(),
                report.events.len()
            );
            for m in &report.debloated {
                println!("debloated: {m}");
            }
            if let Some(abort) = &report.aborted {
                println!("aborted at entry {}: {}", abort.index, abort.error);
            }
        }
    }
    if let Some(abort) = &report.aborted {
        return Err(CliError {
            code: EXIT_ABORTED,
            message: format!("trace aborted at entry {}: {}", abort.index, abort.error),
        });
    }
    Ok(())
}

fn cmd_aot(cli: &Cli, appdef_path: &Path) -> Result<(), CliError> {
    let appdef = read_appdef(appdef_path)?;
    let state_path = cli
        .state
        .as_ref()
        .ok_or_else(|| CliError::format("aot requires --state"))?;
    let state = read_state(state_path)?;
    let mut vm = runtime::restore_state(&appdef, &state).map_err(|e| CliError {
        code: EXIT_FORMAT,
        message: format!("state does not match app definition: {e}"),
    })?;
    let odex = vm.aot_compile();
    write_state(state_path, &vm.snapshot_state())?;

    match cli.output {
        Output::Json => println!("{}", serde_json::to_string_pretty(&odex).unwrap()),
        Output::Text => {
            println!("odex: {} methods", odex.len());
            for m in &odex {
                println!("{m}");
            }
        }
    }
    Ok(())
}

fn cmd_debloat_elf(cli: &Cli, args: &DebloatElfArgs) -> Result<(), CliError> {
    let bytes = fs::read(&args.library)?;
    let image = elf::parse_elf(bytes)?;
    let name = args
        .library
        .file_name()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned();

    // Locate everything up front: symbol errors must leave no output file.
    let mut spans = Vec::new();
    for symbol in &args.symbols {
        let span = elf::locate_function(&image, symbol)?;
        if span.is_unusually_small() {
            eprintln!("warning: {symbol} is only {} bytes", span.size);
        }
        spans.push(span);
    }

    let lib = elf::load_library(
        &image,
        &name,
        args.symbols.iter().map(String::as_str),
        DEFAULT_BASE,
    )?;
    fs::write(&args.out, &lib.memory)?;
    let manifest = serde_json::json!({
        "library": name,
        "base": lib.base,
        "debloated": lib.debloated,
        "spans": spans,
    });
    let manifest_path = args.out.with_extension("manifest.json");
    fs::write(
        &manifest_path,
        format!("{}\n", serde_json::to_string_pretty(&manifest).unwrap()),
    )?;

    match cli.output {
        Output::Json => {
            let dumps: Vec<serde_json::Value> = spans
                .iter()
                .map(|span| {
                    let bytes = elf::read_region(&lib, span.vaddr, span.size).unwrap();
                    serde_json::json!({
                        "symbol": span.symbol,
                        "vaddr": span.vaddr,
                        "size": span.size,
                        "dump": elf::hex_dump(&bytes).lines().collect::<Vec<_>>(),
                    })
                })
                .collect();
            println!("{}", serde_json::to_string_pretty(&dumps).unwrap());
        }
        Output::Text => {
            for span in &spans {
                let bytes = elf::read_region(&lib, span.vaddr, span.size).unwrap();
                println!("{} @ {:#x}+{}", span.symbol, span.vaddr, span.size);
                println!("{}", elf::hex_dump(&bytes));
            }
        }
    }
    Ok(())
}

fn scan(
    image: &elf::ElfImage,
    name: &str,
    schedule: &[String],
    spans: &[elf::FunctionSpan],
    max_depth: usize,
) -> Result<GadgetReport, CliError> {
    let lib = elf::load_library(
        image,
        name,
        schedule.iter().map(String::as_str),
        DEFAULT_BASE,
    )?;
    Ok(gadget::find_gadgets(&lib.memory, spans, max_depth)?)
}

fn cmd_gadgets(cli: &Cli, args: &GadgetArgs) -> Result<(), CliError> {
    let bytes = fs::read(&args.library)?;
    let image = elf::parse_elf(bytes)?;
    let name = args
        .library
        .file_name()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned();

    let spans = if args.all {
        image.exported_functions()
    } else {
        if args.functions.is_empty() {
            return Err(CliError::format("pass --functions or --all"));
        }
        let mut spans = Vec::new();
        for symbol in &args.functions {
            spans.push(elf::locate_function(&image, symbol)?);
        }
        spans
    };

    let before = scan(&image, &name, &[], &spans, cli.max_depth)?;
    let value = if args.before_after.is_empty() {
        serde_json::to_value(&before).unwrap()
    } else {
        let after = scan(&image, &name, &args.before_after, &spans, cli.max_depth)?;
        let reduction = gadget::compare_reports(&before, &after)?;
        serde_json::json!({ "before": before, "after": after, "reduction": reduction })
    };

    match cli.output {
        Output::Json => println!("{}", serde_json::to_string_pretty(&value).unwrap()),
        Output::Text => {
            println!("{} gadgets in {} spans", before.gadgets.len(), spans.len());
            for (length, count) in &before.length_histogram {
                println!("length {length}: {count}");
            }
            for (category, count) in &before.category_histogram {
                println!("{category:?}: {count}");
            }
            if !args.before_after.is_empty() {
                let after = scan(&image, &name, &args.before_after, &spans, cli.max_depth)?;
                println!("after erasure: {} gadgets", after.gadgets.len());
            }
        }
    }
    Ok(())
}
