//! ROP gadget search and classification over AArch64 code.
//!
//! A gadget is a short straight-line instruction sequence ending in a
//! return or indirect branch. The scanner walks every 4-aligned offset of
//! the requested function spans, finds terminator words, and collects each
//! backward extension whose interior words decode as valid, non-branching
//! instructions. AArch64's fixed 4-byte encoding means there is no
//! byte-offset overlap to explore.
//!
//! Classification uses the architecture's top-level encoding groups
//! (instruction bits 28..25) with the compare/logical families split out,
//! so a gadget's category is that of its first instruction: loads/stores,
//! branching, conditional/logic, arithmetic, or other (FP/SIMD). The
//! all-zero word sits in reserved encoding space and decodes as invalid,
//! which is exactly why zero-filled regions contribute no gadgets.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elf::FunctionSpan;

/// Default backward search depth, in instructions.
pub const DEFAULT_MAX_DEPTH: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GadgetError {
    #[error("span {symbol} [{vaddr:#x}, {vaddr:#x}+{size}) outside code of {code_len} bytes")]
    SpanOutOfRange {
        symbol: String,
        vaddr: u64,
        size: u64,
        code_len: u64,
    },
    #[error("span {symbol} not 4-aligned (vaddr {vaddr:#x}, size {size})")]
    MisalignedSpan {
        symbol: String,
        vaddr: u64,
        size: u64,
    },
    #[error("code length {0} not a multiple of 4")]
    MisalignedCode(usize),
    #[error("max_depth must be at least 1")]
    InvalidMaxDepth,
    #[error("reports cover different span lists")]
    SpanMismatch,
}

/// Top-level instruction class of one 32-bit word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrClass {
    LoadStore,
    Branching,
    ConditionalLogic,
    Arithmetic,
    Other,
    Invalid,
}

/// Classifies a word by its major encoding group (bits 28..25).
///
/// Within the data-processing groups, the compare and logical families
/// (logical immediate/shifted-register, condition compare, conditional
/// select, and the CMP/CMN aliases of flag-setting add/sub with a zero
/// destination) report as [`InstrClass::ConditionalLogic`]; the rest is
/// [`InstrClass::Arithmetic`]. Scalar FP and SIMD report as
/// [`InstrClass::Other`]. Reserved and unallocated space, including the
/// all-zero word, is [`InstrClass::Invalid`].
pub fn decode(word: u32) -> InstrClass {
    let op0 = (word >> 25) & 0xF;
    match op0 {
        0b0000..=0b0011 => InstrClass::Invalid,
        0b0100 | 0b0110 | 0b1100 | 0b1110 => InstrClass::LoadStore,
        0b1010 | 0b1011 => InstrClass::Branching,
        0b0111 | 0b1111 => InstrClass::Other,
        0b1000 | 0b1001 => decode_dp_immediate(word),
        0b0101 | 0b1101 => decode_dp_register(word),
        _ => unreachable!("op0 is 4 bits"),
    }
}

fn is_compare_alias(word: u32) -> bool {
    // Flag-setting add/sub writing the zero register: CMP / CMN.
    (word >> 29) & 1 == 1 && word & 0x1F == 31
}

fn decode_dp_immediate(word: u32) -> InstrClass {
    match (word >> 23) & 0b111 {
        0b100 => InstrClass::ConditionalLogic, // logical (immediate)
        0b010 if is_compare_alias(word) => InstrClass::ConditionalLogic,
        // PC-relative, add/sub, move wide, bitfield, extract.
        _ => InstrClass::Arithmetic,
    }
}

fn decode_dp_register(word: u32) -> InstrClass {
    let op1 = (word >> 28) & 1;
    let op2 = (word >> 21) & 0xF;
    if op1 == 0 {
        if op2 & 0b1000 == 0 {
            return InstrClass::ConditionalLogic; // logical (shifted register)
        }
        if is_compare_alias(word) {
            return InstrClass::ConditionalLogic;
        }
        return InstrClass::Arithmetic; // add/sub (shifted/extended register)
    }
    match op2 {
        0b0010 => InstrClass::ConditionalLogic, // condition compare
        0b0100 => InstrClass::ConditionalLogic, // conditional select
        // with-carry, 1/2/3-source data processing
        _ => InstrClass::Arithmetic,
    }
}

/// Gadget-ending instruction kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminator {
    /// `ret` (via X30).
    Ret,
    /// `ret Xn` with an explicit register.
    RetReg,
    /// `br Xn`.
    Br,
    /// `blr Xn`.
    Blr,
}

/// `ret` == `ret x30`; any other register reports as [`Terminator::RetReg`].
pub fn terminator_of(word: u32) -> Option<Terminator> {
    if word == 0xD65F03C0 {
        return Some(Terminator::Ret);
    }
    match word & 0xFFFF_FC1F {
        0xD65F_0000 => Some(Terminator::RetReg),
        0xD61F_0000 => Some(Terminator::Br),
        0xD63F_0000 => Some(Terminator::Blr),
        _ => None,
    }
}

fn usable_interior(word: u32) -> bool {
    !matches!(decode(word), InstrClass::Invalid | InstrClass::Branching)
}

/// One found gadget: the word sequence at `start_offset`, last word the
/// terminator, first word giving the category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gadget {
    pub start_offset: u64,
    pub words: Vec<u32>,
    pub terminator: Terminator,
    pub category: InstrClass,
    pub length: usize,
    /// Symbol of the span the gadget was found in (first occurrence).
    pub span: String,
}

impl Serialize for Gadget {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut s = serializer.serialize_struct("Gadget", 6)?;
        s.serialize_field("span", &self.span)?;
        s.serialize_field("start_offset", &self.start_offset)?;
        let words: Vec<String> = self.words.iter().map(|w| format!("{w:08x}")).collect();
        s.serialize_field("words", &words)?;
        s.serialize_field("terminator", &self.terminator)?;
        s.serialize_field("category", &self.category)?;
        s.serialize_field("length", &self.length)?;
        s.end()
    }
}

impl<'de> Deserialize<'de> for Gadget {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            span: String,
            start_offset: u64,
            words: Vec<String>,
            terminator: Terminator,
            category: InstrClass,
            length: usize,
        }
        let raw = Raw::deserialize(deserializer)?;
        let words = raw
            .words
            .iter()
            .map(|w| u32::from_str_radix(w, 16))
            .collect::<Result<Vec<u32>, _>>()
            .map_err(serde::de::Error::custom)?;
        Ok(Gadget {
            start_offset: raw.start_offset,
            words,
            terminator: raw.terminator,
            category: raw.category,
            length: raw.length,
            span: raw.span,
        })
    }
}

/// Scan result: globally deduplicated gadgets plus the distributions the
/// evaluation cares about. `per_span_counts` deduplicates within each span
/// only, so identical gadgets in two spans count once per span there while
/// appearing once in `gadgets`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GadgetReport {
    pub gadgets: Vec<Gadget>,
    pub per_span_counts: BTreeMap<String, usize>,
    pub length_histogram: BTreeMap<usize, usize>,
    pub category_histogram: BTreeMap<InstrClass, usize>,
    pub spans: Vec<FunctionSpan>,
}

/// Searches `spans` of `code` for unique gadgets of up to `max_depth`
/// instructions.
///
/// At every 4-aligned terminator word `t` inside a span, the sequences
/// `[t-4k, t]` for `k = 0..max_depth-1` are gadgets as long as they stay
/// inside the span and every non-final word is a valid, non-branching
/// instruction. `code` is indexed by span `vaddr` directly.
pub fn find_gadgets(
    code: &[u8],
    spans: &[FunctionSpan],
    max_depth: usize,
) -> Result<GadgetReport, GadgetError> {
    if !code.len().is_multiple_of(4) {
        return Err(GadgetError::MisalignedCode(code.len()));
    }
    if max_depth == 0 {
        return Err(GadgetError::InvalidMaxDepth);
    }
    for span in spans {
        if span.vaddr % 4 != 0 || span.size % 4 != 0 {
            return Err(GadgetError::MisalignedSpan {
                symbol: span.symbol.clone(),
                vaddr: span.vaddr,
                size: span.size,
            });
        }
        if span
            .vaddr
            .checked_add(span.size)
            .is_none_or(|end| end > code.len() as u64)
        {
            return Err(GadgetError::SpanOutOfRange {
                symbol: span.symbol.clone(),
                vaddr: span.vaddr,
                size: span.size,
                code_len: code.len() as u64,
            });
        }
    }

    let mut gadgets: Vec<Gadget> = Vec::new();
    let mut seen: HashMap<Vec<u32>, usize> = HashMap::new();
    let mut per_span_counts = BTreeMap::new();

    for span in spans {
        let start = span.vaddr as usize;
        let end = (span.vaddr + span.size) as usize;
        let words: Vec<u32> = code[start..end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut span_seen: HashSet<&[u32]> = HashSet::new();

        for (ti, &tw) in words.iter().enumerate() {
            let Some(terminator) = terminator_of(tw) else {
                continue;
            };
            for k in 0..max_depth {
                let Some(si) = ti.checked_sub(k) else {
                    break;
                };
                if k > 0 && !usable_interior(words[si]) {
                    break;
                }
                let seq = &words[si..=ti];
                if span_seen.insert(seq) {
                    *per_span_counts.entry(span.symbol.clone()).or_insert(0) += 1;
                }
                if !seen.contains_key(seq) {
                    let gadget = Gadget {
                        start_offset: span.vaddr + 4 * si as u64,
                        words: seq.to_vec(),
                        terminator,
                        category: decode(seq[0]),
                        length: seq.len(),
                        span: span.symbol.clone(),
                    };
                    seen.insert(seq.to_vec(), gadgets.len());
                    gadgets.push(gadget);
                }
            }
        }
        per_span_counts.entry(span.symbol.clone()).or_insert(0);
    }

    let mut length_histogram = BTreeMap::new();
    let mut category_histogram = BTreeMap::new();
    for g in &gadgets {
        *length_histogram.entry(g.length).or_insert(0) += 1;
        *category_histogram.entry(g.category).or_insert(0) += 1;
    }

    Ok(GadgetReport {
        gadgets,
        per_span_counts,
        length_histogram,
        category_histogram,
        spans: spans.to_vec(),
    })
}

/// Difference between two scans of the same span list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionSummary {
    /// Unique-gadget count difference, before minus after.
    pub removed: i64,
    pub per_span_delta: BTreeMap<String, i64>,
    pub category_delta: BTreeMap<InstrClass, i64>,
}

/// Pure count difference of two reports over the same spans.
pub fn compare_reports(
    before: &GadgetReport,
    after: &GadgetReport,
) -> Result<ReductionSummary, GadgetError> {
    if before.spans != after.spans {
        return Err(GadgetError::SpanMismatch);
    }
    let removed = before.gadgets.len() as i64 - after.gadgets.len() as i64;
    let mut per_span_delta = BTreeMap::new();
    for (symbol, &b) in &before.per_span_counts {
        let a = after.per_span_counts.get(symbol).copied().unwrap_or(0);
        per_span_delta.insert(symbol.clone(), b as i64 - a as i64);
    }
    let mut category_delta = BTreeMap::new();
    for (&cat, &b) in &before.category_histogram {
        category_delta.insert(cat, b as i64);
    }
    for (&cat, &a) in &after.category_histogram {
        *category_delta.entry(cat).or_insert(0) -= a as i64;
    }
    Ok(ReductionSummary {
        removed,
        per_span_delta,
        category_delta,
    })
}
