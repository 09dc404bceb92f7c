//! Debloating schemas and the capability-split store that serves them.
//!
//! A schema is the per-package decision table: which bytecode methods the
//! runtime must intercept, which native functions the loader must erase,
//! and which methods only a designated victim package may execute. Schemas
//! live in a single JSON store file mapping package name to schema
//! document. Consumers open the store [`StoreMode::ReadOnly`]; only the
//! management side holds a [`StoreMode::ReadWrite`] handle, and there is no
//! way to upgrade a read-only handle.
//!
//! Writes are atomic (temp file + rename), so a reader sees either the old
//! or the new store, never a torn one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Malformed schema/app documents: bad JSON, kind mismatches, invariant
/// violations inside an otherwise well-formed document.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("format error: {0}")]
pub struct FormatError(pub String);

/// Store-level failures. Mutations through a read-only handle surface as
/// `Capability`; they never touch the file.
#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Whether a method is app bytecode or an exported native function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Bytecode,
    Native,
}

/// Fully qualified method identifier, tagged with its owning package so
/// same-named methods in other apps cannot collide.
///
/// Equality is field-by-field; membership tests in schemas and runtime
/// tables rely on it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodRef {
    pub package: String,
    pub kind: MethodKind,
    /// Dotted class path; empty for native methods.
    pub class_name: String,
    /// Simple name; for natives this is the exported symbol name.
    pub method_name: String,
    /// Signature in the form `(T1,T2)R` with types drawn from `I64` and
    /// `V?` (nullable I64). May be empty for natives.
    pub descriptor: String,
    /// Shared-object file name; required iff `kind == Native`.
    pub library: String,
}

impl MethodRef {
    pub fn bytecode(package: &str, class_name: &str, method_name: &str, descriptor: &str) -> Self {
        MethodRef {
            package: package.to_string(),
            kind: MethodKind::Bytecode,
            class_name: class_name.to_string(),
            method_name: method_name.to_string(),
            descriptor: descriptor.to_string(),
            library: String::new(),
        }
    }

    pub fn native(package: &str, symbol: &str, library: &str) -> Self {
        MethodRef {
            package: package.to_string(),
            kind: MethodKind::Native,
            class_name: String::new(),
            method_name: symbol.to_string(),
            descriptor: String::new(),
            library: library.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        validate_package(&self.package)?;
        if self.method_name.is_empty() {
            return Err(FormatError(format!("{self}: empty method_name")));
        }
        match self.kind {
            MethodKind::Native => {
                if self.library.is_empty() {
                    return Err(FormatError(format!(
                        "{self}: native method without library"
                    )));
                }
                if !self.class_name.is_empty() {
                    return Err(FormatError(format!(
                        "{self}: native method with class_name"
                    )));
                }
                if !self.descriptor.is_empty() {
                    validate_descriptor(&self.descriptor)
                        .map_err(|e| FormatError(format!("{self}: {}", e.0)))?;
                }
            }
            MethodKind::Bytecode => {
                if self.class_name.is_empty() {
                    return Err(FormatError(format!(
                        "{self}: bytecode method without class_name"
                    )));
                }
                if self.descriptor.is_empty() {
                    return Err(FormatError(format!(
                        "{self}: bytecode method without descriptor"
                    )));
                }
                if !self.library.is_empty() {
                    return Err(FormatError(format!("{self}: bytecode method with library")));
                }
                validate_descriptor(&self.descriptor)
                    .map_err(|e| FormatError(format!("{self}: {}", e.0)))?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for MethodRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            MethodKind::Bytecode => write!(
                f,
                "{}/{}.{}{}",
                self.package, self.class_name, self.method_name, self.descriptor
            ),
            MethodKind::Native => {
                write!(f, "{}/{}!{}", self.package, self.library, self.method_name)
            }
        }
    }
}

fn validate_package(package: &str) -> Result<(), FormatError> {
    if package.is_empty() {
        return Err(FormatError("empty package name".into()));
    }
    if package.chars().any(char::is_whitespace) {
        return Err(FormatError(format!(
            "package name {package:?} contains whitespace"
        )));
    }
    Ok(())
}

/// Descriptor grammar: `( type {, type} ) type` with types `I64` or `V?`.
fn validate_descriptor(descriptor: &str) -> Result<(), FormatError> {
    let bad = || FormatError(format!("invalid descriptor {descriptor:?}"));
    let rest = descriptor.strip_prefix('(').ok_or_else(bad)?;
    let (params, ret) = rest.split_once(')').ok_or_else(bad)?;
    let valid_ty = |t: &str| t == "I64" || t == "V?";
    if !params.is_empty() && !params.split(',').all(valid_ty) {
        return Err(bad());
    }
    if !valid_ty(ret) {
        return Err(bad());
    }
    Ok(())
}

/// A whitelist entry: `method` may only be executed when the caller is
/// `victim_package`; every other caller is blocked.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhitelistEntry {
    pub method: MethodRef,
    pub victim_package: String,
}

/// Per-package debloating decision table.
///
/// Sets are ordered so serialization is canonical; membership lookups the
/// runtime performs per invocation go through hashed snapshots built at
/// app launch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DebloatSchema {
    pub package: String,
    pub bytecode_methods: BTreeSet<MethodRef>,
    pub native_methods: BTreeSet<MethodRef>,
    pub whitelist: BTreeSet<WhitelistEntry>,
    /// When true, each interception also emits an informing event.
    #[serde(default = "default_true")]
    pub graceful_termination: bool,
}

fn default_true() -> bool {
    true
}

impl DebloatSchema {
    pub fn empty(package: &str) -> Self {
        DebloatSchema {
            package: package.to_string(),
            bytecode_methods: BTreeSet::new(),
            native_methods: BTreeSet::new(),
            whitelist: BTreeSet::new(),
            graceful_termination: true,
        }
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        validate_package(&self.package)?;
        for m in &self.bytecode_methods {
            m.validate()?;
            if m.kind != MethodKind::Bytecode {
                return Err(FormatError(format!(
                    "{m}: non-bytecode ref in bytecode_methods"
                )));
            }
            if m.package != self.package {
                return Err(FormatError(format!(
                    "{m}: package does not match schema package {:?}",
                    self.package
                )));
            }
        }
        for m in &self.native_methods {
            m.validate()?;
            if m.kind != MethodKind::Native {
                return Err(FormatError(format!(
                    "{m}: non-native ref in native_methods"
                )));
            }
            if m.package != self.package {
                return Err(FormatError(format!(
                    "{m}: package does not match schema package {:?}",
                    self.package
                )));
            }
        }
        for entry in &self.whitelist {
            entry.method.validate()?;
            validate_package(&entry.victim_package)?;
            if entry.method.package != self.package {
                return Err(FormatError(format!(
                    "{}: whitelist method package does not match schema package {:?}",
                    entry.method, self.package
                )));
            }
        }
        Ok(())
    }

    /// Native symbols scheduled for erasure in `library`.
    pub fn native_symbols_for(&self, library: &str) -> BTreeSet<String> {
        self.native_methods
            .iter()
            .filter(|m| m.library == library)
            .map(|m| m.method_name.clone())
            .collect()
    }
}

/// Parses a single schema document, enforcing every schema invariant and
/// rejecting unknown fields.
pub fn parse_schema(text: &str) -> Result<DebloatSchema, FormatError> {
    let schema: DebloatSchema =
        serde_json::from_str(text).map_err(|e| FormatError(format!("bad schema document: {e}")))?;
    schema.validate()?;
    Ok(schema)
}

/// Canonical serialization: sorted members, pretty-printed, trailing newline.
pub fn serialize_schema(schema: &DebloatSchema) -> String {
    let mut out = serde_json::to_string_pretty(schema).expect("schema serialization cannot fail");
    out.push('\n');
    out
}

/// Store capability. There is no conversion from `ReadOnly` to `ReadWrite`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreMode {
    ReadOnly,
    ReadWrite,
}

/// Handle to the schema store file, bound to the capability it was opened
/// with. Every mutating operation on a read-only handle fails with
/// [`StoreError::Capability`] before touching the file.
#[derive(Debug)]
pub struct StoreHandle {
    path: PathBuf,
    mode: StoreMode,
}

type StoreMap = BTreeMap<String, DebloatSchema>;

impl StoreHandle {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn mode(&self) -> StoreMode {
        self.mode
    }

    fn require_write(&self, op: &str) -> Result<(), StoreError> {
        match self.mode {
            StoreMode::ReadWrite => Ok(()),
            StoreMode::ReadOnly => Err(StoreError::Capability(format!(
                "{op} requires a read-write handle"
            ))),
        }
    }

    fn load(&self) -> Result<StoreMap, StoreError> {
        let text = fs::read_to_string(&self.path)?;
        let map: StoreMap = serde_json::from_str(&text)
            .map_err(|e| FormatError(format!("corrupt store file: {e}")))?;
        for (package, schema) in &map {
            schema.validate()?;
            if package != &schema.package {
                return Err(StoreError::Format(FormatError(format!(
                    "store key {package:?} does not match schema package {:?}",
                    schema.package
                ))));
            }
        }
        Ok(map)
    }

    fn save(&self, map: &StoreMap) -> Result<(), StoreError> {
        write_store_atomically(&self.path, map)
    }
}

fn write_store_atomically(path: &Path, map: &StoreMap) -> Result<(), StoreError> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match parent {
        Some(dir) => tempfile::NamedTempFile::new_in(dir)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    let mut text = serde_json::to_string_pretty(map).expect("store serialization cannot fail");
    text.push('\n');
    tmp.write_all(text.as_bytes())?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| StoreError::Io(e.error))?;
    Ok(())
}

/// Opens the store at `path`. Read-only handles require the file to exist;
/// a read-write open creates an empty store when absent.
pub fn open_store(path: &Path, mode: StoreMode) -> Result<StoreHandle, StoreError> {
    match mode {
        StoreMode::ReadOnly => {
            fs::metadata(path)?;
        }
        StoreMode::ReadWrite => {
            if fs::metadata(path).is_err() {
                write_store_atomically(path, &StoreMap::new())?;
            }
        }
    }
    Ok(StoreHandle {
        path: path.to_path_buf(),
        mode,
    })
}

/// Reads the schema stored for `package`, or `None`. Never mutates; valid
/// through either handle mode.
pub fn store_get(handle: &StoreHandle, package: &str) -> Result<Option<DebloatSchema>, StoreError> {
    Ok(handle.load()?.remove(package))
}

/// Replaces the stored schema for `schema.package`. Atomic: concurrent
/// readers observe the old or the new store.
pub fn store_put(handle: &StoreHandle, schema: &DebloatSchema) -> Result<(), StoreError> {
    handle.require_write("store_put")?;
    schema.validate()?;
    let mut map = handle.load()?;
    map.insert(schema.package.clone(), schema.clone());
    handle.save(&map)
}

/// Removes `method` from the stored schema of `package`, wherever it
/// appears (bytecode set, native set, whitelist). No-op when absent.
pub fn store_remove_method(
    handle: &StoreHandle,
    package: &str,
    method: &MethodRef,
) -> Result<(), StoreError> {
    handle.require_write("store_remove_method")?;
    let mut map = handle.load()?;
    let Some(schema) = map.get_mut(package) else {
        return Ok(());
    };
    let mut changed = schema.bytecode_methods.remove(method);
    changed |= schema.native_methods.remove(method);
    let before = schema.whitelist.len();
    schema.whitelist.retain(|e| &e.method != method);
    changed |= schema.whitelist.len() != before;
    if changed {
        handle.save(&map)?;
    }
    Ok(())
}

/// Package names present in the store, sorted.
pub fn store_list(handle: &StoreHandle) -> Result<Vec<String>, StoreError> {
    Ok(handle.load()?.into_keys().collect())
}
