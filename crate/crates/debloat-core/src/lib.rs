//! Schema-driven dynamic debloating, desk scale.
//!
//! Three cooperating engines behind one schema store:
//!
//! * [`schema`] — parse, persist, and serve per-package debloating schemas
//!   through a capability-split store (read-only consumers, one writer).
//! * [`runtime`] — a tiered interpreter/JIT/AOT runtime simulator that
//!   intercepts invocations of schema-listed bytecode methods before they
//!   are interpreted or compiled.
//! * [`elf`] — an ELF64/AArch64 loader that erases schema-listed native
//!   functions at map time: zero-fill plus a leading return stub.
//! * [`gadget`] — a ROP gadget scanner quantifying how much reusable code
//!   the erasure removed.
//!
//! The runtime never executes real machine code; native methods run as
//! declared behaviors unless their span was erased, in which case the call
//! returns null the way a stubbed function would.

pub mod elf;
pub mod gadget;
pub mod runtime;
pub mod schema;

pub use elf::{ElfError, ElfImage, FunctionSpan, LoadedLibrary};
pub use gadget::{Gadget, GadgetError, GadgetReport, InstrClass, ReductionSummary};
pub use runtime::{AppDefinition, TraceReport, Value, VmError, VmInstance};
pub use schema::{DebloatSchema, FormatError, MethodRef, StoreError, StoreHandle, StoreMode};
