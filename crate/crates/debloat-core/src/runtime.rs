//! Tiered managed-runtime simulator with schema-driven interception.
//!
//! Each app runs in its own [`VmInstance`], holding one record per method:
//! an entry state (interpreter, JIT-compiled, AOT-compiled), an invocation
//! counter, and a profile bit. Methods start in the interpreter; a hot
//! method (counter reaching the JIT threshold) moves to JIT-compiled, and
//! an offline [`VmInstance::aot_compile`] pass moves every profiled method
//! into the odex set, which survives relaunches.
//!
//! The debloating schema is read once at launch and snapshotted for the
//! instance lifetime: later store writes never change a running instance's
//! behavior. Dispatch order per invocation:
//!
//! 1. whitelist check — a whitelisted method executes only for its victim
//!    package; every other caller gets null and a `WhitelistBlocked` event;
//! 2. interception — a schema-listed bytecode method still on the
//!    interpreter path returns null without executing, its counter pinned
//!    at zero so it can never tier up;
//! 3. compiled execution — a method already JIT/AOT-compiled runs even if
//!    the schema lists it (compiled code no longer passes the interpreter
//!    check; recover by clearing app data);
//! 4. interpretation — count, mark the profile, tier up at the threshold,
//!    run the body.
//!
//! Native calls resolve through the loaded libraries; a call into an
//! erased function returns null from its stub. Intercepted native calls
//! report null rather than leaving the return register untouched the way
//! real hardware would — interception stays observable that way.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elf::{self, ElfError, LoadedLibrary, PAGE_SIZE};
use crate::schema::{
    store_get, DebloatSchema, FormatError, MethodKind, MethodRef, StoreError, StoreHandle,
};

/// Default JIT threshold: invocations before a method is compiled.
pub const DEFAULT_JIT_THRESHOLD: u64 = 10;
/// Class-name prefixes exempt from interception: platform code is never
/// debloated even when a schema lists it.
pub const DEFAULT_PLATFORM_PREFIXES: &[&str] = &["java.", "javax.", "android.", "com.google."];
/// First simulated library base inside an instance.
const LIBRARY_BASE_START: u64 = 0x4000_0000;
/// Nested-call limit; the bytecode has no loops, so only recursion needs a lid.
const MAX_CALL_DEPTH: usize = 128;

#[derive(Debug, Error)]
pub enum VmError {
    #[error("unknown method: {0}")]
    UnknownMethod(String),
    #[error("execution error: {0}")]
    Execution(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Elf(#[from] ElfError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Runtime value: null or a 64-bit signed integer. Null is distinct from
/// `Int(0)` and observable as such.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Option<i64>", into = "Option<i64>")]
pub enum Value {
    Null,
    Int(i64),
}

impl From<Option<i64>> for Value {
    fn from(v: Option<i64>) -> Self {
        match v {
            None => Value::Null,
            Some(i) => Value::Int(i),
        }
    }
}

impl From<Value> for Option<i64> {
    fn from(v: Value) -> Self {
        match v {
            Value::Null => None,
            Value::Int(i) => Some(i),
        }
    }
}

pub type Reg = usize;

/// Straight-line bytecode. Registers are method-local; arguments arrive in
/// registers `0..args.len()`. Arithmetic wraps; null propagates through
/// `Add`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "serde_json::Value", into = "serde_json::Value")]
pub enum Instruction {
    Const {
        dst: Reg,
        imm: i64,
    },
    Add {
        dst: Reg,
        a: Reg,
        b: Reg,
    },
    Call {
        dst: Reg,
        callee: MethodRef,
        args: Vec<Reg>,
    },
    CallNative {
        dst: Reg,
        library: String,
        symbol: String,
        args: Vec<Reg>,
    },
    Ret {
        src: Reg,
    },
    RetVoid,
}

impl From<Instruction> for serde_json::Value {
    fn from(inst: Instruction) -> Self {
        use serde_json::{json, Value as J};
        match inst {
            Instruction::Const { dst, imm } => json!(["const", dst, imm]),
            Instruction::Add { dst, a, b } => json!(["add", dst, a, b]),
            Instruction::Call { dst, callee, args } => {
                json!(["call", dst, serde_json::to_value(callee).unwrap(), args])
            }
            Instruction::CallNative {
                dst,
                library,
                symbol,
                args,
            } => {
                json!(["callnative", dst, library, symbol, args])
            }
            Instruction::Ret { src } => json!(["ret", src]),
            Instruction::RetVoid => J::Array(vec!["retvoid".into()]),
        }
    }
}

impl TryFrom<serde_json::Value> for Instruction {
    type Error = FormatError;

    fn try_from(v: serde_json::Value) -> Result<Self, FormatError> {
        let bad = |msg: &str| FormatError(format!("bad instruction: {msg}"));
        let arr = v.as_array().ok_or_else(|| bad("expected array"))?;
        let op = arr
            .first()
            .and_then(|s| s.as_str())
            .ok_or_else(|| bad("missing opcode"))?;
        let reg = |i: usize| -> Result<Reg, FormatError> {
            arr.get(i)
                .and_then(|x| x.as_u64())
                .map(|x| x as Reg)
                .ok_or_else(|| bad("expected register index"))
        };
        let regs = |i: usize| -> Result<Vec<Reg>, FormatError> {
            arr.get(i)
                .and_then(|x| x.as_array())
                .ok_or_else(|| bad("expected register list"))?
                .iter()
                .map(|x| {
                    x.as_u64()
                        .map(|x| x as Reg)
                        .ok_or_else(|| bad("bad register index"))
                })
                .collect()
        };
        let check_len = |n: usize| -> Result<(), FormatError> {
            if arr.len() == n {
                Ok(())
            } else {
                Err(bad(&format!("{op} takes {} operands", n - 1)))
            }
        };
        match op {
            "const" => {
                check_len(3)?;
                let imm = arr[2]
                    .as_i64()
                    .ok_or_else(|| bad("const needs an integer"))?;
                Ok(Instruction::Const { dst: reg(1)?, imm })
            }
            "add" => {
                check_len(4)?;
                Ok(Instruction::Add {
                    dst: reg(1)?,
                    a: reg(2)?,
                    b: reg(3)?,
                })
            }
            "call" => {
                check_len(4)?;
                let callee: MethodRef = serde_json::from_value(arr[2].clone())
                    .map_err(|e| bad(&format!("bad callee: {e}")))?;
                Ok(Instruction::Call {
                    dst: reg(1)?,
                    callee,
                    args: regs(3)?,
                })
            }
            "callnative" => {
                check_len(5)?;
                let library = arr[2]
                    .as_str()
                    .ok_or_else(|| bad("bad library"))?
                    .to_string();
                let symbol = arr[3]
                    .as_str()
                    .ok_or_else(|| bad("bad symbol"))?
                    .to_string();
                Ok(Instruction::CallNative {
                    dst: reg(1)?,
                    library,
                    symbol,
                    args: regs(4)?,
                })
            }
            "ret" => {
                check_len(2)?;
                Ok(Instruction::Ret { src: reg(1)? })
            }
            "retvoid" => {
                check_len(1)?;
                Ok(Instruction::RetVoid)
            }
            other => Err(bad(&format!("unknown opcode {other:?}"))),
        }
    }
}

/// Per-method dispatch target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryState {
    Interpreter,
    JitCompiled,
    AotCompiled,
}

/// Per-method runtime record: entry point state, hotness counter, body.
#[derive(Debug, Clone)]
pub struct ArtMethodRecord {
    pub method: MethodRef,
    pub registers: usize,
    pub body: Vec<Instruction>,
    pub entry_state: EntryState,
    pub counter: u64,
    pub in_profile: bool,
}

/// Declared behavior of a native method when its code has not been erased.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NativeBehavior {
    ReturnConst(i64),
    Echo(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NativeBehaviorDef {
    pub library: String,
    pub symbol: String,
    pub behavior: NativeBehavior,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodDef {
    #[serde(rename = "ref")]
    pub method: MethodRef,
    pub registers: usize,
    pub body: Vec<Instruction>,
}

/// Desk-scale stand-in for an installed app: its package, bytecode
/// methods, declared native behaviors, and shared libraries to load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppDefinition {
    pub package: String,
    pub methods: Vec<MethodDef>,
    #[serde(default)]
    pub native_behaviors: Vec<NativeBehaviorDef>,
    #[serde(default)]
    pub libraries: Vec<PathBuf>,
}

impl AppDefinition {
    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let def: AppDefinition = serde_json::from_str(text)
            .map_err(|e| FormatError(format!("bad app definition: {e}")))?;
        def.validate()?;
        Ok(def)
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        if self.package.is_empty() || self.package.chars().any(char::is_whitespace) {
            return Err(FormatError(format!("bad package name {:?}", self.package)));
        }
        let mut seen = HashSet::new();
        for def in &self.methods {
            def.method.validate()?;
            if def.method.kind != MethodKind::Bytecode {
                return Err(FormatError(format!(
                    "{}: app methods must be bytecode",
                    def.method
                )));
            }
            if def.method.package != self.package {
                return Err(FormatError(format!(
                    "{}: method package does not match app package {:?}",
                    def.method, self.package
                )));
            }
            if !seen.insert(&def.method) {
                return Err(FormatError(format!("duplicate method {}", def.method)));
            }
            for inst in &def.body {
                let regs: Vec<Reg> = match inst {
                    Instruction::Const { dst, .. } => vec![*dst],
                    Instruction::Add { dst, a, b } => vec![*dst, *a, *b],
                    Instruction::Call { dst, args, .. } => {
                        let mut v = args.clone();
                        v.push(*dst);
                        v
                    }
                    Instruction::CallNative { dst, args, .. } => {
                        let mut v = args.clone();
                        v.push(*dst);
                        v
                    }
                    Instruction::Ret { src } => vec![*src],
                    Instruction::RetVoid => vec![],
                };
                if let Some(r) = regs.iter().find(|&&r| r >= def.registers) {
                    return Err(FormatError(format!(
                        "{}: register r{r} out of range (method declares {})",
                        def.method, def.registers
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    GracefulTermination,
    WhitelistBlocked,
    JitCompile,
    AotCompile,
    NativeResolved,
    LibraryLoaded,
}

/// Informing-channel record: what happened, at which dispatch step, to
/// which method, on behalf of which caller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub step: u64,
    pub kind: EventKind,
    pub method: Option<MethodRef>,
    pub caller_package: Option<String>,
}

/// One entry of an invocation trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEntry {
    pub caller_package: String,
    #[serde(rename = "ref")]
    pub method: MethodRef,
    #[serde(default)]
    pub args: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceAbort {
    /// Index of the trace entry that failed.
    pub index: usize,
    pub error: String,
}

/// What a trace run observed: every method dispatched (including nested
/// calls), the subset that was intercepted or hit an erased native stub,
/// per-invocation results, and the events emitted along the way.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceReport {
    pub invoked: BTreeSet<MethodRef>,
    pub debloated: BTreeSet<MethodRef>,
    pub returns: Vec<Value>,
    pub events: Vec<Event>,
    pub aborted: Option<TraceAbort>,
}

/// Launch-time options.
#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub jit_threshold: u64,
    /// Methods whose AOT code survived from a prior run.
    pub odex_carryover: BTreeSet<MethodRef>,
    pub platform_prefixes: Vec<String>,
    /// Overrides the schema's graceful-termination flag when set.
    pub graceful_termination: Option<bool>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            jit_threshold: DEFAULT_JIT_THRESHOLD,
            odex_carryover: BTreeSet::new(),
            platform_prefixes: DEFAULT_PLATFORM_PREFIXES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            graceful_termination: None,
        }
    }
}

impl LoadOptions {
    pub fn with_jit_threshold(jit_threshold: u64) -> Self {
        LoadOptions {
            jit_threshold,
            ..LoadOptions::default()
        }
    }
}

/// A running app: method table, immutable schema snapshot, loaded
/// libraries, odex set, event log. Single-threaded by contract; distinct
/// instances are independent.
#[derive(Debug)]
pub struct VmInstance {
    pub package: String,
    methods: HashMap<MethodRef, ArtMethodRecord>,
    schema_snapshot: DebloatSchema,
    odex: BTreeSet<MethodRef>,
    jit_threshold: u64,
    loaded_libraries: HashMap<String, LoadedLibrary>,
    event_log: Vec<Event>,
    graceful_termination: bool,
    platform_prefixes: Vec<String>,
    native_behaviors: HashMap<(String, String), NativeBehavior>,
    resolved_natives: HashSet<(String, String)>,
    /// Methods dispatched since the current trace began.
    trace_invoked: BTreeSet<MethodRef>,
    /// Subset of `trace_invoked` that was intercepted or stubbed.
    trace_debloated: BTreeSet<MethodRef>,
    clock: u64,
}

/// Launches an app: validates the definition, snapshots the schema for
/// `appdef.package` from the store (reading through any handle mode),
/// loads every referenced library with the schema's native entries for it,
/// and builds the method table. Methods in `odex_carryover` start
/// AOT-compiled; everything else starts on the interpreter with a zero
/// counter.
pub fn load_app(
    appdef: &AppDefinition,
    store: &StoreHandle,
    options: LoadOptions,
) -> Result<VmInstance, VmError> {
    appdef.validate()?;
    if options.jit_threshold == 0 {
        return Err(VmError::Format(FormatError(
            "jit_threshold must be positive".into(),
        )));
    }
    let schema =
        store_get(store, &appdef.package)?.unwrap_or_else(|| DebloatSchema::empty(&appdef.package));
    load_app_with_schema(appdef, schema, options)
}

/// [`load_app`] with an explicit schema snapshot instead of a store read.
pub fn load_app_with_schema(
    appdef: &AppDefinition,
    schema: DebloatSchema,
    options: LoadOptions,
) -> Result<VmInstance, VmError> {
    appdef.validate()?;
    schema.validate()?;
    let graceful = options
        .graceful_termination
        .unwrap_or(schema.graceful_termination);

    let mut vm = VmInstance {
        package: appdef.package.clone(),
        methods: HashMap::new(),
        odex: BTreeSet::new(),
        jit_threshold: options.jit_threshold,
        loaded_libraries: HashMap::new(),
        event_log: Vec::new(),
        graceful_termination: graceful,
        platform_prefixes: options.platform_prefixes,
        native_behaviors: appdef
            .native_behaviors
            .iter()
            .map(|b| ((b.library.clone(), b.symbol.clone()), b.behavior.clone()))
            .collect(),
        resolved_natives: HashSet::new(),
        trace_invoked: BTreeSet::new(),
        trace_debloated: BTreeSet::new(),
        clock: 0,
        schema_snapshot: schema,
    };

    for def in &appdef.methods {
        let carried = options.odex_carryover.contains(&def.method);
        let record = ArtMethodRecord {
            method: def.method.clone(),
            registers: def.registers,
            body: def.body.clone(),
            entry_state: if carried {
                EntryState::AotCompiled
            } else {
                EntryState::Interpreter
            },
            counter: 0,
            in_profile: false,
        };
        if carried {
            vm.odex.insert(def.method.clone());
        }
        vm.methods.insert(def.method.clone(), record);
    }

    let mut next_base = LIBRARY_BASE_START;
    for path in &appdef.libraries {
        let name = path
            .file_name()
            .ok_or_else(|| FormatError(format!("bad library path {}", path.display())))?
            .to_string_lossy()
            .into_owned();
        let bytes = fs::read(path)?;
        let image = elf::parse_elf(bytes)?;
        let symbols = vm.schema_snapshot.native_symbols_for(&name);
        let lib = elf::load_library(&image, &name, symbols.iter().map(String::as_str), next_base)?;
        next_base += (lib.memory.len() as u64).div_ceil(PAGE_SIZE) * PAGE_SIZE;
        vm.emit(EventKind::LibraryLoaded, None, None);
        vm.loaded_libraries.insert(name, lib);
    }
    Ok(vm)
}

/// Launches a fresh instance over the current store contents, carrying the
/// prior run's odex (the persisted AOT code) forward.
pub fn relaunch(
    appdef: &AppDefinition,
    store: &StoreHandle,
    prior: &VmInstance,
) -> Result<VmInstance, VmError> {
    let options = LoadOptions {
        jit_threshold: prior.jit_threshold,
        odex_carryover: prior.odex.clone(),
        platform_prefixes: prior.platform_prefixes.clone(),
        graceful_termination: None,
    };
    load_app(appdef, store, options)
}

/// Discards the instance's odex and profile, so a following relaunch
/// starts every method on the interpreter.
pub fn clear_app_data(vm: &mut VmInstance) {
    vm.odex.clear();
    for record in vm.methods.values_mut() {
        record.in_profile = false;
    }
}

impl VmInstance {
    pub fn schema_snapshot(&self) -> &DebloatSchema {
        &self.schema_snapshot
    }

    pub fn odex(&self) -> &BTreeSet<MethodRef> {
        &self.odex
    }

    pub fn jit_threshold(&self) -> u64 {
        self.jit_threshold
    }

    pub fn events(&self) -> &[Event] {
        &self.event_log
    }

    pub fn method_record(&self, method: &MethodRef) -> Option<&ArtMethodRecord> {
        self.methods.get(method)
    }

    pub fn loaded_library(&self, name: &str) -> Option<&LoadedLibrary> {
        self.loaded_libraries.get(name)
    }

    pub fn is_platform_exempt(&self, method: &MethodRef) -> bool {
        self.platform_prefixes
            .iter()
            .any(|p| method.class_name.starts_with(p))
    }

    /// Schema entries that debloating actually acts on: bytecode entries
    /// that are defined, not platform-exempt, and on the interpreter path
    /// (a method compiled before the snapshot listed it keeps running),
    /// plus native entries whose span was erased in a loaded library.
    ///
    /// Interception pins listed interpreter methods, so for schema members
    /// the entry state never moves after launch and this set is stable for
    /// the instance lifetime.
    pub fn effective_schema(&self) -> BTreeSet<MethodRef> {
        let mut effective: BTreeSet<MethodRef> = self
            .schema_snapshot
            .bytecode_methods
            .iter()
            .filter(|m| !self.is_platform_exempt(m))
            .filter(|m| {
                self.methods
                    .get(*m)
                    .is_some_and(|r| r.entry_state == EntryState::Interpreter)
            })
            .cloned()
            .collect();
        for m in &self.schema_snapshot.native_methods {
            if self
                .loaded_libraries
                .get(&m.library)
                .is_some_and(|lib| lib.debloated.contains(&m.method_name))
            {
                effective.insert(m.clone());
            }
        }
        effective
    }

    fn emit(&mut self, kind: EventKind, method: Option<&MethodRef>, caller: Option<&str>) {
        self.event_log.push(Event {
            step: self.clock,
            kind,
            method: method.cloned(),
            caller_package: caller.map(str::to_string),
        });
    }

    /// Dispatches one invocation. `caller_package` identifies who asked:
    /// the app itself for in-app and reflective calls, another package for
    /// cross-app invocation.
    pub fn invoke(
        &mut self,
        caller_package: &str,
        method: &MethodRef,
        args: &[Value],
    ) -> Result<Value, VmError> {
        self.dispatch(caller_package, method, args, 0)
    }

    fn dispatch(
        &mut self,
        caller: &str,
        method: &MethodRef,
        args: &[Value],
        depth: usize,
    ) -> Result<Value, VmError> {
        if depth > MAX_CALL_DEPTH {
            return Err(VmError::Execution(format!(
                "call depth exceeded at {method}"
            )));
        }
        self.clock += 1;

        // 1. Whitelist: only the victim package may run a listed method.
        let victims: Vec<String> = self
            .schema_snapshot
            .whitelist
            .iter()
            .filter(|e| &e.method == method)
            .map(|e| e.victim_package.clone())
            .collect();
        if !victims.is_empty() && !victims.iter().any(|v| v == caller) {
            self.trace_invoked.insert(method.clone());
            self.emit(EventKind::WhitelistBlocked, Some(method), Some(caller));
            if self.graceful_termination {
                self.emit(EventKind::GracefulTermination, Some(method), Some(caller));
            }
            return Ok(Value::Null);
        }

        if method.kind == MethodKind::Native {
            return self.dispatch_native(caller, method, args);
        }

        let record = self
            .methods
            .get(method)
            .ok_or_else(|| VmError::UnknownMethod(method.to_string()))?;
        let entry_state = record.entry_state;
        self.trace_invoked.insert(method.clone());

        // 2. Interception: listed, owned by this app, not platform code,
        //    still on the interpreter path.
        if entry_state == EntryState::Interpreter
            && self.schema_snapshot.bytecode_methods.contains(method)
            && method.package == self.package
            && !self.is_platform_exempt(method)
        {
            if self.graceful_termination {
                self.emit(EventKind::GracefulTermination, Some(method), Some(caller));
            }
            let record = self
                .methods
                .get_mut(method)
                .expect("record looked up above");
            record.counter = 0;
            self.trace_debloated.insert(method.clone());
            return Ok(Value::Null);
        }

        // 3. Compiled code runs as-is, counter untouched — even for schema
        //    members that compiled before the snapshot listed them.
        if entry_state != EntryState::Interpreter {
            let (registers, body) = {
                let r = &self.methods[method];
                (r.registers, r.body.clone())
            };
            return self.execute(method, registers, &body, args, depth);
        }

        // 4. Interpret: count, tier up at the threshold, mark the profile.
        let record = self
            .methods
            .get_mut(method)
            .expect("record looked up above");
        record.counter += 1;
        record.in_profile = true;
        let (registers, body) = (record.registers, record.body.clone());
        if record.counter >= self.jit_threshold {
            record.entry_state = EntryState::JitCompiled;
            let method = method.clone();
            self.emit(EventKind::JitCompile, Some(&method), Some(caller));
        }
        self.execute(method, registers, &body, args, depth)
    }

    fn dispatch_native(
        &mut self,
        caller: &str,
        method: &MethodRef,
        args: &[Value],
    ) -> Result<Value, VmError> {
        let lib = self
            .loaded_libraries
            .get(&method.library)
            .ok_or_else(|| VmError::UnknownMethod(method.to_string()))?;
        let resolved = elf::resolve_native(lib, &method.method_name)
            .map_err(|_| VmError::UnknownMethod(method.to_string()))?;
        self.trace_invoked.insert(method.clone());

        let key = (method.library.clone(), method.method_name.clone());
        if self.resolved_natives.insert(key.clone()) {
            self.emit(EventKind::NativeResolved, Some(method), Some(caller));
        }

        if resolved.debloated {
            self.trace_debloated.insert(method.clone());
            if self.graceful_termination {
                self.emit(EventKind::GracefulTermination, Some(method), Some(caller));
            }
            return Ok(Value::Null);
        }

        match self.native_behaviors.get(&key) {
            Some(NativeBehavior::ReturnConst(c)) => Ok(Value::Int(*c)),
            Some(NativeBehavior::Echo(i)) => args
                .get(*i)
                .copied()
                .ok_or_else(|| VmError::Execution(format!("{method}: echo argument {i} missing"))),
            None => Err(VmError::UnknownMethod(method.to_string())),
        }
    }

    fn execute(
        &mut self,
        method: &MethodRef,
        registers: usize,
        body: &[Instruction],
        args: &[Value],
        depth: usize,
    ) -> Result<Value, VmError> {
        if args.len() > registers {
            return Err(VmError::Execution(format!(
                "{method}: {} arguments exceed {registers} registers",
                args.len()
            )));
        }
        let mut regs = vec![Value::Null; registers];
        regs[..args.len()].copy_from_slice(args);

        let fault = |r: Reg| VmError::Execution(format!("{method}: register r{r} out of range"));
        let read = |regs: &[Value], r: Reg| regs.get(r).copied().ok_or_else(|| fault(r));

        for inst in body {
            match inst {
                Instruction::Const { dst, imm } => {
                    *regs.get_mut(*dst).ok_or_else(|| fault(*dst))? = Value::Int(*imm);
                }
                Instruction::Add { dst, a, b } => {
                    let result = match (read(&regs, *a)?, read(&regs, *b)?) {
                        (Value::Int(x), Value::Int(y)) => Value::Int(x.wrapping_add(y)),
                        _ => Value::Null,
                    };
                    *regs.get_mut(*dst).ok_or_else(|| fault(*dst))? = result;
                }
                Instruction::Call { dst, callee, args } => {
                    let mut values = Vec::with_capacity(args.len());
                    for r in args {
                        values.push(read(&regs, *r)?);
                    }
                    let package = self.package.clone();
                    let result = self.dispatch(&package, callee, &values, depth + 1)?;
                    *regs.get_mut(*dst).ok_or_else(|| fault(*dst))? = result;
                }
                Instruction::CallNative {
                    dst,
                    library,
                    symbol,
                    args,
                } => {
                    let mut values = Vec::with_capacity(args.len());
                    for r in args {
                        values.push(read(&regs, *r)?);
                    }
                    let callee = MethodRef::native(&self.package, symbol, library);
                    let package = self.package.clone();
                    let result = self.dispatch(&package, &callee, &values, depth + 1)?;
                    *regs.get_mut(*dst).ok_or_else(|| fault(*dst))? = result;
                }
                Instruction::Ret { src } => return read(&regs, *src),
                Instruction::RetVoid => return Ok(Value::Null),
            }
        }
        Ok(Value::Null)
    }

    /// Invokes each trace entry in order. The first unknown-method or
    /// execution failure aborts the run; the report covers progress up to
    /// that point.
    pub fn run_trace(&mut self, trace: &[TraceEntry]) -> TraceReport {
        self.trace_invoked.clear();
        self.trace_debloated.clear();
        let events_start = self.event_log.len();
        let mut returns = Vec::new();
        let mut aborted = None;

        for (index, entry) in trace.iter().enumerate() {
            match self.invoke(&entry.caller_package, &entry.method, &entry.args) {
                Ok(value) => returns.push(value),
                Err(err) => {
                    aborted = Some(TraceAbort {
                        index,
                        error: err.to_string(),
                    });
                    break;
                }
            }
        }

        TraceReport {
            invoked: self.trace_invoked.clone(),
            debloated: self.trace_debloated.clone(),
            returns,
            events: self.event_log[events_start..].to_vec(),
            aborted,
        }
    }

    /// Offline profile-driven compilation: every profiled method gains AOT
    /// code and enters the odex set. Intercepted methods never qualify —
    /// their counters are pinned and their profile bit never set. Returns
    /// the updated odex set.
    pub fn aot_compile(&mut self) -> BTreeSet<MethodRef> {
        let mut newly: Vec<MethodRef> = self
            .methods
            .values()
            .filter(|r| r.in_profile && r.entry_state != EntryState::AotCompiled)
            .map(|r| r.method.clone())
            .collect();
        newly.sort();
        for method in newly {
            let record = self
                .methods
                .get_mut(&method)
                .expect("profiled method exists");
            record.entry_state = EntryState::AotCompiled;
            self.odex.insert(method.clone());
            self.emit(EventKind::AotCompile, Some(&method), None);
        }
        self.odex.clone()
    }

    /// Serializable snapshot of the mutable instance state, the desk-scale
    /// analogue of on-device profiles and odex files.
    pub fn snapshot_state(&self) -> VmState {
        let mut methods = BTreeMap::new();
        for (method, record) in &self.methods {
            methods.insert(
                method.clone(),
                MethodState {
                    counter: record.counter,
                    entry_state: record.entry_state,
                    in_profile: record.in_profile,
                },
            );
        }
        VmState {
            package: self.package.clone(),
            jit_threshold: self.jit_threshold,
            methods,
            odex: self.odex.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodState {
    pub counter: u64,
    pub entry_state: EntryState,
    pub in_profile: bool,
}

/// Persisted between runs by the CLI: counters, entry states, profile
/// bits, and the odex set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmState {
    pub package: String,
    pub jit_threshold: u64,
    #[serde(serialize_with = "ser_method_map", deserialize_with = "de_method_map")]
    pub methods: BTreeMap<MethodRef, MethodState>,
    pub odex: BTreeSet<MethodRef>,
}

fn ser_method_map<S: serde::Serializer>(
    map: &BTreeMap<MethodRef, MethodState>,
    serializer: S,
) -> Result<S::Ok, S::Error> {
    let entries: Vec<(&MethodRef, &MethodState)> = map.iter().collect();
    entries.serialize(serializer)
}

fn de_method_map<'de, D: serde::Deserializer<'de>>(
    deserializer: D,
) -> Result<BTreeMap<MethodRef, MethodState>, D::Error> {
    let entries: Vec<(MethodRef, MethodState)> = Vec::deserialize(deserializer)?;
    Ok(entries.into_iter().collect())
}

/// Rebuilds an instance from an app definition plus persisted state,
/// without reading the store or loading libraries; enough to run the
/// offline AOT pass.
pub fn restore_state(appdef: &AppDefinition, state: &VmState) -> Result<VmInstance, VmError> {
    if state.package != appdef.package {
        return Err(VmError::Format(FormatError(format!(
            "state package {:?} does not match app package {:?}",
            state.package, appdef.package
        ))));
    }
    let mut vm = load_app_with_schema(
        &AppDefinition {
            libraries: Vec::new(),
            ..appdef.clone()
        },
        DebloatSchema::empty(&appdef.package),
        LoadOptions {
            jit_threshold: state.jit_threshold,
            odex_carryover: state.odex.clone(),
            ..LoadOptions::default()
        },
    )?;
    for (method, saved) in &state.methods {
        let record = vm
            .methods
            .get_mut(method)
            .ok_or_else(|| VmError::UnknownMethod(method.to_string()))?;
        record.counter = saved.counter;
        record.entry_state = saved.entry_state;
        record.in_profile = saved.in_profile;
    }
    Ok(vm)
}
