//! Shared test support: fixture paths, readelf-golden parsers, an
//! independent disassembler oracle, and a brute-force gadget enumerator.
//! Everything here is deliberately implemented without touching the code
//! paths under test.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use debloat_core::elf::FunctionSpan;
use debloat_core::gadget::{decode, terminator_of, InstrClass};
use yaxpeax_arch::{Decoder, U8Reader};
use yaxpeax_arm::armv8::a64::InstDecoder;

pub const FIXTURES: &[&str] = &["libfix_alpha.so", "libfix_bravo.so", "libfix_charlie.so"];

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn fixture_path(name: &str) -> PathBuf {
    fixture_dir().join(name)
}

pub fn golden_path(name: &str) -> PathBuf {
    fixture_dir().join("golden").join(name)
}

/// Disassembles one word with yaxpeax, an implementation-independent
/// AArch64 decoder.
pub fn disassemble(word: u32) -> Option<String> {
    let decoder = InstDecoder::default();
    let bytes = word.to_le_bytes();
    let mut reader = U8Reader::new(&bytes);
    decoder
        .decode(&mut reader)
        .ok()
        .map(|inst| inst.to_string())
}

/// Classifies disassembly text by mnemonic, following the four evaluation
/// categories: arithmetic, branching, conditional/logic, load/store, with
/// FP/SIMD as other. Returns `None` for mnemonics outside the table.
pub fn classify_mnemonic(text: &str) -> Option<InstrClass> {
    let mnemonic = text.split_whitespace().next()?;
    if mnemonic.starts_with("b.") {
        return Some(InstrClass::Branching);
    }
    let class = match mnemonic {
        // `mov` here means the move-wide immediate alias; the corpus never
        // uses register mov, which aliases into the logical family.
        "add" | "adds" | "sub" | "subs" | "mul" | "madd" | "msub" | "smulh" | "umulh" | "udiv"
        | "sdiv" | "lsl" | "lsr" | "asr" | "ror" | "ubfm" | "sbfm" | "bfm" | "extr" | "movz"
        | "movk" | "movn" | "mov" | "adr" | "adrp" | "sxtw" | "sxtb" | "sxth" | "uxtb" | "uxth"
        | "neg" | "negs" | "adc" | "adcs" | "sbc" | "sbcs" | "clz" | "cls" | "rbit" | "rev"
        | "rev16" | "rev32" => InstrClass::Arithmetic,
        "and" | "ands" | "orr" | "orn" | "eor" | "eon" | "bic" | "bics" | "tst" | "cmp" | "cmn"
        | "ccmp" | "ccmn" | "csel" | "csinc" | "csinv" | "csneg" | "cset" | "csetm" | "cinc"
        | "cinv" | "cneg" => InstrClass::ConditionalLogic,
        "ldr" | "ldrb" | "ldrh" | "ldrsb" | "ldrsh" | "ldrsw" | "ldur" | "ldurb" | "ldurh"
        | "ldp" | "ldar" | "ldarb" | "ldarh" | "ldxr" | "ldaxr" | "str" | "strb" | "strh"
        | "stur" | "sturb" | "sturh" | "stp" | "stlr" | "stxr" | "stlxr" => InstrClass::LoadStore,
        "b" | "bl" | "br" | "blr" | "ret" | "cbz" | "cbnz" | "tbz" | "tbnz" | "svc" | "hvc"
        | "smc" | "brk" | "eret" => InstrClass::Branching,
        m if m.starts_with('f') || matches!(m, "scvtf" | "ucvtf" | "dup" | "movi") => {
            InstrClass::Other
        }
        _ => return None,
    };
    Some(class)
}

/// One row of a committed `.dynsym.tsv` golden (produced by readelf).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldenSymbol {
    pub name: String,
    pub value: u64,
    pub size: u64,
    pub sym_type: String,
    pub defined: bool,
}

pub fn read_golden_symbols(lib: &str) -> Vec<GoldenSymbol> {
    let path = golden_path(&format!("{lib}.dynsym.tsv"));
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("missing golden {}: {e}", path.display()));
    text.lines()
        .map(|line| {
            let cols: Vec<&str> = line.split('\t').collect();
            assert_eq!(cols.len(), 5, "bad golden row {line:?}");
            GoldenSymbol {
                name: cols[0].to_string(),
                value: parse_hex(cols[1]),
                size: cols[2].parse().expect("golden size"),
                sym_type: cols[3].to_string(),
                defined: cols[4] == "1",
            }
        })
        .collect()
}

/// One row of a committed `.segments.tsv` golden.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldenSegment {
    pub offset: u64,
    pub vaddr: u64,
    pub file_size: u64,
    pub mem_size: u64,
    pub align: u64,
    pub flags: String,
}

pub fn read_golden_segments(lib: &str) -> Vec<GoldenSegment> {
    let path = golden_path(&format!("{lib}.segments.tsv"));
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("missing golden {}: {e}", path.display()));
    text.lines()
        .map(|line| {
            let cols: Vec<&str> = line.split('\t').collect();
            assert_eq!(cols.len(), 6, "bad golden row {line:?}");
            GoldenSegment {
                offset: parse_hex(cols[0]),
                vaddr: parse_hex(cols[1]),
                file_size: parse_hex(cols[2]),
                mem_size: parse_hex(cols[3]),
                align: parse_hex(cols[4]),
                flags: cols[5].to_string(),
            }
        })
        .collect()
}

fn parse_hex(s: &str) -> u64 {
    let s = s.strip_prefix("0x").unwrap_or(s);
    u64::from_str_radix(s, 16).unwrap_or_else(|e| panic!("bad hex {s:?}: {e}"))
}

#[derive(Debug, Clone, serde::Deserialize)]
pub struct LabeledInstruction {
    pub word: String,
    pub asm: String,
    pub category: InstrClass,
}

impl LabeledInstruction {
    pub fn encoded(&self) -> u32 {
        u32::from_str_radix(&self.word, 16).expect("corpus word")
    }
}

pub fn read_labeled_corpus() -> Vec<LabeledInstruction> {
    let path = golden_path("labeled_corpus.json");
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("missing corpus {}: {e}", path.display()));
    serde_json::from_str(&text).expect("corpus parses")
}

/// What the brute-force enumeration found, in directly comparable form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleReport {
    /// Unique word sequences with (length, category, terminator word).
    pub gadgets: BTreeSet<Vec<u32>>,
    pub per_span_counts: BTreeMap<String, usize>,
    pub length_histogram: BTreeMap<usize, usize>,
    pub category_histogram: BTreeMap<InstrClass, usize>,
}

/// Reference gadget search: for every aligned window ending in a
/// terminator, check each suffix independently, word by word — no early
/// exits, no shared state with the implementation under test.
pub fn oracle_find(code: &[u8], spans: &[FunctionSpan], max_depth: usize) -> OracleReport {
    assert_eq!(code.len() % 4, 0);
    let mut gadgets: BTreeSet<Vec<u32>> = BTreeSet::new();
    let mut per_span_counts = BTreeMap::new();

    for span in spans {
        let start = span.vaddr as usize;
        let end = start + span.size as usize;
        let words: Vec<u32> = code[start..end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut in_span: BTreeSet<Vec<u32>> = BTreeSet::new();
        for ti in 0..words.len() {
            if terminator_of(words[ti]).is_none() {
                continue;
            }
            for k in 0..max_depth {
                if k > ti {
                    continue;
                }
                let seq: Vec<u32> = words[ti - k..=ti].to_vec();
                let interior_ok = seq[..seq.len() - 1]
                    .iter()
                    .all(|&w| !matches!(decode(w), InstrClass::Invalid | InstrClass::Branching));
                if interior_ok {
                    in_span.insert(seq.clone());
                    gadgets.insert(seq);
                }
            }
        }
        per_span_counts.insert(span.symbol.clone(), in_span.len());
    }

    let mut length_histogram = BTreeMap::new();
    let mut category_histogram = BTreeMap::new();
    for seq in &gadgets {
        *length_histogram.entry(seq.len()).or_insert(0) += 1;
        *category_histogram.entry(decode(seq[0])).or_insert(0) += 1;
    }
    OracleReport {
        gadgets,
        per_span_counts,
        length_histogram,
        category_histogram,
    }
}
