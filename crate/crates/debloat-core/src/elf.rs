//! ELF64/AArch64 shared-object parsing, simulated page-aligned loading,
//! and load-time function erasure.
//!
//! The parser reads the pieces the debloating engine needs and nothing
//! more: the identification header, the program headers (load segments),
//! and the dynamic symbol table with its string table, which together give
//! every exported function's file offset and size. Parsing is total: no
//! input byte string can make it read out of bounds or panic.
//!
//! Loading maps the segments into a fresh page-aligned byte image. Every
//! function scheduled for erasure is then zero-filled and given a leading
//! `ret` so callers that still resolve its address bounce straight back.
//! Addresses handed out by [`resolve_native`] and accepted by
//! [`read_region`] are image-relative (base-relative) virtual addresses.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

/// Fixed simulated page size.
pub const PAGE_SIZE: u64 = 4096;
/// ELF machine number for AArch64.
pub const EM_AARCH64: u16 = 183;
/// AArch64 `ret` (RET X30), little-endian.
pub const RET_STUB: [u8; 4] = [0xC0, 0x03, 0x5F, 0xD6];
/// Default mapping base used outside a runtime instance.
pub const DEFAULT_BASE: u64 = 0x4000_0000;

const SHT_DYNSYM: u32 = 11;
const PT_LOAD: u32 = 1;
const STT_OBJECT: u8 = 1;
const STT_FUNC: u8 = 2;
const SHN_UNDEF: u16 = 0;
const ELF_HEADER_LEN: u64 = 64;
const PHDR_LEN: u64 = 56;
const SHDR_LEN: u64 = 64;
const SYM_LEN: u64 = 24;
/// Guard against absurd mapping requests from crafted headers.
const MAX_MAPPED_BYTES: u64 = 1 << 28;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ElfError {
    /// Bad magic, class, or endianness.
    #[error("elf format error: {0}")]
    Format(String),
    #[error("unsupported machine {0} (need {EM_AARCH64}, AArch64)")]
    UnsupportedMachine(u16),
    /// Truncated or out-of-range header, segment, or symbol tables.
    #[error("malformed table: {0}")]
    MalformedTable(String),
    #[error("symbol not found: {0}")]
    SymbolNotFound(String),
    #[error("symbol {0} is not a function")]
    NotAFunction(String),
    /// Undefined/imported symbol, or a defined one with no extent.
    #[error("symbol {0} has no code in this object")]
    ZeroSize(String),
    #[error("symbol {symbol} has size {size}, not a multiple of 4")]
    UnalignedSpan { symbol: String, size: u64 },
    #[error("span of {symbol} is {size} bytes, too small to hold a return stub")]
    SpanTooSmall { symbol: String, size: u64 },
    #[error("region [{addr:#x}, {addr:#x}+{len}) outside mapped image of {mapped} bytes")]
    OutOfRange { addr: u64, len: u64, mapped: u64 },
}

/// One `PT_LOAD` program header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadSegment {
    pub file_offset: u64,
    pub file_size: u64,
    pub vaddr: u64,
    pub mem_size: u64,
    pub align: u64,
    pub flags: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymType {
    Func,
    Object,
    Other,
}

/// Entry of the dynamic symbol table, name already resolved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolEntry {
    pub name: String,
    /// Virtual address of the symbol within the image.
    pub value: u64,
    pub size: u64,
    pub sym_type: SymType,
    /// False for imported (undefined) symbols.
    pub defined: bool,
}

/// Extent of one exported function: `[vaddr, vaddr + size)`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FunctionSpan {
    pub symbol: String,
    pub vaddr: u64,
    pub size: u64,
}

impl FunctionSpan {
    /// Real native methods are at least two instructions (body + return);
    /// a smaller span is worth flagging before erasing it.
    pub fn is_unusually_small(&self) -> bool {
        self.size < 8
    }
}

/// Parsed shared object. The raw file bytes are kept verbatim; loading
/// reads segments out of them.
#[derive(Debug, Clone)]
pub struct ElfImage {
    bytes: Vec<u8>,
    pub machine: u16,
    pub load_segments: Vec<LoadSegment>,
    pub dynsym: Vec<SymbolEntry>,
    /// Offset range of `.dynstr` within the file.
    pub dynstr: std::ops::Range<usize>,
}

fn need(bytes: &[u8], offset: u64, len: u64, what: &str) -> Result<usize, ElfError> {
    let end = offset
        .checked_add(len)
        .ok_or_else(|| ElfError::MalformedTable(format!("{what}: offset overflow")))?;
    if end > bytes.len() as u64 {
        return Err(ElfError::MalformedTable(format!(
            "{what}: [{offset:#x}, {end:#x}) past end of {}-byte file",
            bytes.len()
        )));
    }
    Ok(offset as usize)
}

fn read_u16(bytes: &[u8], offset: u64, what: &str) -> Result<u16, ElfError> {
    let o = need(bytes, offset, 2, what)?;
    Ok(u16::from_le_bytes([bytes[o], bytes[o + 1]]))
}

fn read_u32(bytes: &[u8], offset: u64, what: &str) -> Result<u32, ElfError> {
    let o = need(bytes, offset, 4, what)?;
    Ok(u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()))
}

fn read_u64(bytes: &[u8], offset: u64, what: &str) -> Result<u64, ElfError> {
    let o = need(bytes, offset, 8, what)?;
    Ok(u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()))
}

/// Parses and validates a 64-bit little-endian AArch64 shared object.
pub fn parse_elf(bytes: Vec<u8>) -> Result<ElfImage, ElfError> {
    if bytes.len() < ELF_HEADER_LEN as usize {
        return Err(ElfError::Format(format!(
            "file of {} bytes has no ELF header",
            bytes.len()
        )));
    }
    if bytes[0..4] != [0x7F, b'E', b'L', b'F'] {
        return Err(ElfError::Format("no ELF magic".into()));
    }
    if bytes[4] != 2 {
        return Err(ElfError::Format(format!("class {} is not ELF64", bytes[4])));
    }
    if bytes[5] != 1 {
        return Err(ElfError::Format(format!(
            "data encoding {} is not little-endian",
            bytes[5]
        )));
    }
    let machine = read_u16(&bytes, 18, "e_machine")?;
    if machine != EM_AARCH64 {
        return Err(ElfError::UnsupportedMachine(machine));
    }

    let phoff = read_u64(&bytes, 32, "e_phoff")?;
    let shoff = read_u64(&bytes, 40, "e_shoff")?;
    let phentsize = read_u16(&bytes, 54, "e_phentsize")? as u64;
    let phnum = read_u16(&bytes, 56, "e_phnum")? as u64;
    let shentsize = read_u16(&bytes, 58, "e_shentsize")? as u64;
    let shnum = read_u16(&bytes, 60, "e_shnum")? as u64;

    if phnum > 0 && phentsize < PHDR_LEN {
        return Err(ElfError::MalformedTable(format!(
            "e_phentsize {phentsize} too small"
        )));
    }
    if shnum > 0 && shentsize < SHDR_LEN {
        return Err(ElfError::MalformedTable(format!(
            "e_shentsize {shentsize} too small"
        )));
    }

    let mut load_segments = Vec::new();
    for i in 0..phnum {
        let base = phoff
            .checked_add(i.checked_mul(phentsize).ok_or_else(|| {
                ElfError::MalformedTable("program header table size overflow".into())
            })?)
            .ok_or_else(|| ElfError::MalformedTable("program header offset overflow".into()))?;
        need(&bytes, base, PHDR_LEN, "program header")?;
        let p_type = read_u32(&bytes, base, "p_type")?;
        if p_type != PT_LOAD {
            continue;
        }
        let seg = LoadSegment {
            flags: read_u32(&bytes, base + 4, "p_flags")?,
            file_offset: read_u64(&bytes, base + 8, "p_offset")?,
            vaddr: read_u64(&bytes, base + 16, "p_vaddr")?,
            file_size: read_u64(&bytes, base + 32, "p_filesz")?,
            mem_size: read_u64(&bytes, base + 40, "p_memsz")?,
            align: read_u64(&bytes, base + 48, "p_align")?,
        };
        need(
            &bytes,
            seg.file_offset,
            seg.file_size,
            "load segment contents",
        )?;
        if seg.mem_size < seg.file_size {
            return Err(ElfError::MalformedTable(format!(
                "segment at {:#x}: mem_size {} < file_size {}",
                seg.vaddr, seg.mem_size, seg.file_size
            )));
        }
        seg.vaddr
            .checked_add(seg.mem_size)
            .ok_or_else(|| ElfError::MalformedTable("segment vaddr range overflow".into()))?;
        if seg.vaddr % PAGE_SIZE != seg.file_offset % PAGE_SIZE {
            return Err(ElfError::MalformedTable(format!(
                "segment at {:#x} not page-congruent with file offset {:#x}",
                seg.vaddr, seg.file_offset
            )));
        }
        load_segments.push(seg);
    }
    load_segments.sort_by_key(|s| s.vaddr);
    for pair in load_segments.windows(2) {
        if pair[0].vaddr + pair[0].mem_size > pair[1].vaddr {
            return Err(ElfError::MalformedTable(format!(
                "load segments at {:#x} and {:#x} overlap",
                pair[0].vaddr, pair[1].vaddr
            )));
        }
    }

    // Locate .dynsym (section type 11) and its string table via sh_link.
    let mut dynsym_hdr: Option<(u64, u64, u64, u32)> = None; // offset, size, entsize, link
    for i in 0..shnum {
        let base = shoff
            .checked_add(i.checked_mul(shentsize).ok_or_else(|| {
                ElfError::MalformedTable("section header table size overflow".into())
            })?)
            .ok_or_else(|| ElfError::MalformedTable("section header offset overflow".into()))?;
        need(&bytes, base, SHDR_LEN, "section header")?;
        if read_u32(&bytes, base + 4, "sh_type")? == SHT_DYNSYM {
            dynsym_hdr = Some((
                read_u64(&bytes, base + 24, "sh_offset")?,
                read_u64(&bytes, base + 32, "sh_size")?,
                read_u64(&bytes, base + 56, "sh_entsize")?,
                read_u32(&bytes, base + 40, "sh_link")?,
            ));
            break;
        }
    }

    let mut dynsym = Vec::new();
    let mut dynstr = 0..0;
    if let Some((sym_off, sym_size, entsize, link)) = dynsym_hdr {
        if entsize < SYM_LEN {
            return Err(ElfError::MalformedTable(format!(
                "dynsym entsize {entsize} too small"
            )));
        }
        if sym_size % entsize != 0 {
            return Err(ElfError::MalformedTable(format!(
                "dynsym size {sym_size} not a multiple of entry size {entsize}"
            )));
        }
        let link = link as u64;
        if link >= shnum {
            return Err(ElfError::MalformedTable(format!(
                "dynsym sh_link {link} out of range"
            )));
        }
        let str_hdr = shoff + link * shentsize;
        let str_off = read_u64(&bytes, str_hdr + 24, "dynstr offset")?;
        let str_size = read_u64(&bytes, str_hdr + 32, "dynstr size")?;
        let str_start = need(&bytes, str_off, str_size, "dynstr contents")?;
        dynstr = str_start..str_start + str_size as usize;
        let strtab = &bytes[dynstr.clone()];

        for i in 0..sym_size / entsize {
            let base = sym_off + i * entsize;
            need(&bytes, base, SYM_LEN, "symbol entry")?;
            let st_name = read_u32(&bytes, base, "st_name")? as usize;
            let st_info = bytes[(base + 4) as usize];
            let st_shndx = read_u16(&bytes, base + 6, "st_shndx")?;
            let value = read_u64(&bytes, base + 8, "st_value")?;
            let size = read_u64(&bytes, base + 16, "st_size")?;
            if st_name >= strtab.len() && !(st_name == 0 && strtab.is_empty()) {
                return Err(ElfError::MalformedTable(format!(
                    "symbol {i}: name index {st_name} outside dynstr"
                )));
            }
            let name_bytes = strtab.get(st_name..).unwrap_or(&[]);
            let nul = name_bytes.iter().position(|&b| b == 0).ok_or_else(|| {
                ElfError::MalformedTable(format!("symbol {i}: unterminated name"))
            })?;
            let name = String::from_utf8_lossy(&name_bytes[..nul]).into_owned();
            let sym_type = match st_info & 0xF {
                STT_FUNC => SymType::Func,
                STT_OBJECT => SymType::Object,
                _ => SymType::Other,
            };
            let defined = st_shndx != SHN_UNDEF;
            if defined && sym_type == SymType::Func {
                let inside = load_segments.iter().any(|s| {
                    value >= s.vaddr && value.saturating_add(size) <= s.vaddr + s.mem_size
                });
                if !inside {
                    return Err(ElfError::MalformedTable(format!(
                        "function {name} at {value:#x}+{size} outside every load segment"
                    )));
                }
            }
            dynsym.push(SymbolEntry {
                name,
                value,
                size,
                sym_type,
                defined,
            });
        }
    }

    Ok(ElfImage {
        bytes,
        machine,
        load_segments,
        dynsym,
        dynstr,
    })
}

impl ElfImage {
    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Defined function symbols with a usable span, sorted by address.
    pub fn exported_functions(&self) -> Vec<FunctionSpan> {
        let mut spans: Vec<FunctionSpan> = self
            .dynsym
            .iter()
            .filter(|s| s.sym_type == SymType::Func && s.defined && s.size > 0 && s.size % 4 == 0)
            .map(|s| FunctionSpan {
                symbol: s.name.clone(),
                vaddr: s.value,
                size: s.size,
            })
            .collect();
        spans.sort_by(|a, b| (a.vaddr, &a.symbol).cmp(&(b.vaddr, &b.symbol)));
        spans
    }
}

/// Finds the span of the defined function exported as `symbol`.
pub fn locate_function(image: &ElfImage, symbol: &str) -> Result<FunctionSpan, ElfError> {
    let entry = image
        .dynsym
        .iter()
        .find(|s| s.name == symbol)
        .ok_or_else(|| ElfError::SymbolNotFound(symbol.to_string()))?;
    if entry.sym_type != SymType::Func {
        return Err(ElfError::NotAFunction(symbol.to_string()));
    }
    if !entry.defined || entry.size == 0 {
        return Err(ElfError::ZeroSize(symbol.to_string()));
    }
    if entry.size % 4 != 0 {
        return Err(ElfError::UnalignedSpan {
            symbol: symbol.to_string(),
            size: entry.size,
        });
    }
    Ok(FunctionSpan {
        symbol: symbol.to_string(),
        vaddr: entry.value,
        size: entry.size,
    })
}

/// Shared object after simulated loading. `memory[v]` is the byte at
/// image-relative virtual address `v`; the image covers whole pages.
#[derive(Debug, Clone)]
pub struct LoadedLibrary {
    pub name: String,
    /// Simulated absolute base the image was placed at (page-aligned).
    pub base: u64,
    pub memory: Vec<u8>,
    /// Symbols whose spans were erased during this load.
    pub debloated: BTreeSet<String>,
    functions: BTreeMap<String, FunctionSpan>,
}

/// Result of resolving a native symbol in a loaded library.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedSymbol {
    /// Image-relative virtual address. Present even for erased symbols:
    /// resolution still succeeds, only the code behind it is gone.
    pub address: u64,
    pub debloated: bool,
}

/// Maps `image` at `base` and erases every function in `to_debloat`:
/// zero-fills its span and writes a 4-byte `ret` at the span start.
///
/// All symbols are located before any byte of the image is produced, so a
/// failed schedule loads nothing. Aliased symbols sharing one span are
/// erased once. `base` must be a multiple of [`PAGE_SIZE`].
pub fn load_library<'a>(
    image: &ElfImage,
    name: &str,
    to_debloat: impl IntoIterator<Item = &'a str>,
    base: u64,
) -> Result<LoadedLibrary, ElfError> {
    assert_eq!(base % PAGE_SIZE, 0, "library base must be page-aligned");

    let mut scheduled = Vec::new();
    let mut debloated = BTreeSet::new();
    for symbol in to_debloat {
        let span = locate_function(image, symbol)?;
        if span.size < 4 {
            return Err(ElfError::SpanTooSmall {
                symbol: symbol.to_string(),
                size: span.size,
            });
        }
        debloated.insert(symbol.to_string());
        scheduled.push(span);
    }

    if image.load_segments.is_empty() {
        return Err(ElfError::MalformedTable("no load segments to map".into()));
    }
    let end = image
        .load_segments
        .iter()
        .map(|s| s.vaddr + s.mem_size)
        .max()
        .unwrap_or(0);
    let mapped = end.div_ceil(PAGE_SIZE) * PAGE_SIZE;
    if mapped > MAX_MAPPED_BYTES {
        return Err(ElfError::MalformedTable(format!(
            "mapping of {mapped} bytes exceeds limit"
        )));
    }

    let mut memory = vec![0u8; mapped as usize];
    for seg in &image.load_segments {
        let src = seg.file_offset as usize..(seg.file_offset + seg.file_size) as usize;
        let dst = seg.vaddr as usize..(seg.vaddr + seg.file_size) as usize;
        memory[dst].copy_from_slice(&image.bytes[src]);
    }

    // Erase unique spans: zero everything, then the leading return.
    let mut unique: BTreeSet<(u64, u64)> = BTreeSet::new();
    for span in &scheduled {
        unique.insert((span.vaddr, span.size));
    }
    for &(vaddr, size) in &unique {
        let range = vaddr as usize..(vaddr + size) as usize;
        memory[range].fill(0);
        memory[vaddr as usize..vaddr as usize + 4].copy_from_slice(&RET_STUB);
    }

    let mut functions = BTreeMap::new();
    for sym in &image.dynsym {
        if sym.sym_type == SymType::Func && sym.defined {
            functions.insert(
                sym.name.clone(),
                FunctionSpan {
                    symbol: sym.name.clone(),
                    vaddr: sym.value,
                    size: sym.size,
                },
            );
        }
    }

    Ok(LoadedLibrary {
        name: name.to_string(),
        base,
        memory,
        debloated,
        functions,
    })
}

/// Looks up a native method's address. Erased symbols still resolve to the
/// address their code occupied; the `debloated` flag tells the caller the
/// body is gone.
pub fn resolve_native(lib: &LoadedLibrary, symbol: &str) -> Result<ResolvedSymbol, ElfError> {
    let span = lib
        .functions
        .get(symbol)
        .ok_or_else(|| ElfError::SymbolNotFound(symbol.to_string()))?;
    Ok(ResolvedSymbol {
        address: span.vaddr,
        debloated: lib.debloated.contains(symbol),
    })
}

/// Copies `len` bytes starting at image-relative address `addr`.
pub fn read_region(lib: &LoadedLibrary, addr: u64, len: u64) -> Result<Vec<u8>, ElfError> {
    let mapped = lib.memory.len() as u64;
    let end = addr
        .checked_add(len)
        .ok_or(ElfError::OutOfRange { addr, len, mapped })?;
    if end > mapped {
        return Err(ElfError::OutOfRange { addr, len, mapped });
    }
    Ok(lib.memory[addr as usize..end as usize].to_vec())
}

/// Verification dump format: rows of 16 bytes, lowercase hex,
/// space-separated. Bit-exact contract for golden tests.
pub fn hex_dump(bytes: &[u8]) -> String {
    let mut out = String::new();
    for (i, row) in bytes.chunks(16).enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (j, b) in row.iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            write!(out, "{b:02x}").unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-built minimal ELF64 AArch64 shared object with one load
    /// segment and a .dynsym carrying the given function symbols.
    /// Layout: [ehdr 64][phdr 56][dynsym][dynstr][pad to 0x200][text].
    pub(crate) fn synth_so(funcs: &[(&str, u64, u64)], text: &[u8]) -> Vec<u8> {
        synth_so_with(funcs, text, EM_AARCH64, 2, 1)
    }

    pub(crate) fn synth_so_with(
        funcs: &[(&str, u64, u64)],
        text: &[u8],
        machine: u16,
        class: u8,
        data: u8,
    ) -> Vec<u8> {
        const TEXT_OFF: u64 = 0x200;
        let nsyms = funcs.len() + 1;
        let sym_off = 64 + 56;
        let str_off = sym_off + 24 * nsyms;
        let mut dynstr = vec![0u8];
        let mut name_offsets = Vec::new();
        for (name, _, _) in funcs {
            name_offsets.push(dynstr.len() as u32);
            dynstr.extend_from_slice(name.as_bytes());
            dynstr.push(0);
        }
        let shoff = {
            // section headers after dynstr, 8-aligned
            let end = str_off + dynstr.len();
            (end + 7) & !7
        };

        let mut file = vec![0u8; TEXT_OFF as usize + text.len()];
        // e_ident
        file[0..4].copy_from_slice(&[0x7F, b'E', b'L', b'F']);
        file[4] = class;
        file[5] = data;
        file[6] = 1;
        // e_type = ET_DYN
        file[16..18].copy_from_slice(&3u16.to_le_bytes());
        file[18..20].copy_from_slice(&machine.to_le_bytes());
        file[20..24].copy_from_slice(&1u32.to_le_bytes());
        // e_phoff = 64, e_shoff
        file[32..40].copy_from_slice(&64u64.to_le_bytes());
        file[40..48].copy_from_slice(&(shoff as u64).to_le_bytes());
        file[52..54].copy_from_slice(&64u16.to_le_bytes());
        file[54..56].copy_from_slice(&56u16.to_le_bytes());
        file[56..58].copy_from_slice(&1u16.to_le_bytes());
        file[58..60].copy_from_slice(&64u16.to_le_bytes());
        file[60..62].copy_from_slice(&2u16.to_le_bytes());

        // Single PT_LOAD covering the whole file at vaddr 0.
        let filesz = (TEXT_OFF as usize + text.len()) as u64;
        let ph = &mut file[64..64 + 56];
        ph[0..4].copy_from_slice(&PT_LOAD.to_le_bytes());
        ph[4..8].copy_from_slice(&5u32.to_le_bytes());
        ph[8..16].copy_from_slice(&0u64.to_le_bytes());
        ph[16..24].copy_from_slice(&0u64.to_le_bytes());
        ph[32..40].copy_from_slice(&filesz.to_le_bytes());
        ph[40..48].copy_from_slice(&filesz.to_le_bytes());
        ph[48..56].copy_from_slice(&PAGE_SIZE.to_le_bytes());

        // dynsym: null symbol then one FUNC per entry.
        for (i, (_, vaddr, size)) in funcs.iter().enumerate() {
            let base = sym_off + 24 * (i + 1);
            let sym = &mut file[base..base + 24];
            sym[0..4].copy_from_slice(&name_offsets[i].to_le_bytes());
            sym[4] = (1 << 4) | STT_FUNC; // GLOBAL FUNC
            sym[6..8].copy_from_slice(&1u16.to_le_bytes()); // defined
            sym[8..16].copy_from_slice(&(TEXT_OFF + vaddr).to_le_bytes());
            sym[16..24].copy_from_slice(&size.to_le_bytes());
        }
        file[str_off..str_off + dynstr.len()].copy_from_slice(&dynstr);
        file[TEXT_OFF as usize..].copy_from_slice(text);

        // Section headers: [0] dynsym, [1] dynstr.
        let mut sh = vec![0u8; 2 * 64];
        sh[4..8].copy_from_slice(&SHT_DYNSYM.to_le_bytes());
        sh[24..32].copy_from_slice(&(sym_off as u64).to_le_bytes());
        sh[32..40].copy_from_slice(&((24 * nsyms) as u64).to_le_bytes());
        sh[40..44].copy_from_slice(&1u32.to_le_bytes()); // link -> dynstr
        sh[56..64].copy_from_slice(&24u64.to_le_bytes());
        sh[64 + 4..64 + 8].copy_from_slice(&3u32.to_le_bytes()); // SHT_STRTAB
        sh[64 + 24..64 + 32].copy_from_slice(&(str_off as u64).to_le_bytes());
        sh[64 + 32..64 + 40].copy_from_slice(&(dynstr.len() as u64).to_le_bytes());
        if file.len() < shoff + sh.len() {
            file.resize(shoff + sh.len(), 0);
        }
        file[shoff..shoff + sh.len()].copy_from_slice(&sh);
        file
    }

    const RET: u32 = 0xD65F03C0;
    const ADD_X0_X0_1: u32 = 0x91000400;

    fn words(ws: &[u32]) -> Vec<u8> {
        ws.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    #[test]
    fn zeros_are_not_elf() {
        let err = parse_elf(vec![0u8; 64]).unwrap_err();
        assert!(matches!(err, ElfError::Format(_)));
    }

    #[test]
    fn wrong_machine_rejected() {
        let file = synth_so_with(&[], &words(&[RET]), 62, 2, 1); // EM_X86_64
        assert_eq!(
            parse_elf(file).unwrap_err(),
            ElfError::UnsupportedMachine(62)
        );
    }

    #[test]
    fn wrong_class_rejected() {
        let file = synth_so_with(&[], &words(&[RET]), EM_AARCH64, 1, 1);
        assert!(matches!(parse_elf(file).unwrap_err(), ElfError::Format(_)));
    }

    #[test]
    fn parses_synthetic_functions() {
        let text = words(&[ADD_X0_X0_1, RET, RET]);
        let file = synth_so(&[("f_add", 0, 8), ("f_ret", 8, 4)], &text);
        let image = parse_elf(file).unwrap();
        assert_eq!(image.machine, EM_AARCH64);
        assert_eq!(image.load_segments.len(), 1);
        let spans = image.exported_functions();
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[0].symbol, "f_add");
        assert_eq!(spans[0].size, 8);
    }

    #[test]
    fn locate_function_errors() {
        let text = words(&[ADD_X0_X0_1, RET]);
        let file = synth_so(&[("f", 0, 8)], &text);
        let image = parse_elf(file).unwrap();
        assert!(matches!(
            locate_function(&image, "nope").unwrap_err(),
            ElfError::SymbolNotFound(_)
        ));
        let span = locate_function(&image, "f").unwrap();
        assert_eq!(span.size, 8);
        assert!(!span.is_unusually_small());
    }

    #[test]
    fn small_span_flagged() {
        let file = synth_so(&[("f", 0, 4)], &words(&[RET]));
        let image = parse_elf(file).unwrap();
        assert!(locate_function(&image, "f").unwrap().is_unusually_small());
    }

    #[test]
    fn non_word_sized_symbol_rejected() {
        let file = synth_so(&[("f", 0, 6)], &words(&[ADD_X0_X0_1, RET]));
        let image = parse_elf(file).unwrap();
        assert!(matches!(
            locate_function(&image, "f").unwrap_err(),
            ElfError::UnalignedSpan { size: 6, .. }
        ));
    }

    #[test]
    fn erase_writes_stub_then_zeros_and_only_there() {
        // f at text+0 (16 bytes), g right after (8 bytes), same page.
        let text = words(&[ADD_X0_X0_1, ADD_X0_X0_1, ADD_X0_X0_1, RET, ADD_X0_X0_1, RET]);
        let file = synth_so(&[("f", 0, 16), ("g", 16, 8)], &text);
        let image = parse_elf(file).unwrap();
        let plain = load_library(&image, "t.so", [], DEFAULT_BASE).unwrap();
        let erased = load_library(&image, "t.so", ["f"], DEFAULT_BASE).unwrap();

        let f = locate_function(&image, "f").unwrap();
        let span = read_region(&erased, f.vaddr, f.size).unwrap();
        assert_eq!(&span[0..4], &RET_STUB);
        assert!(span[4..].iter().all(|&b| b == 0));
        assert_eq!(
            hex_dump(&span),
            "c0 03 5f d6 00 00 00 00 00 00 00 00 00 00 00 00"
        );

        // Every byte outside the erased span is untouched, in particular
        // the page-sharing neighbor g.
        for (addr, (a, b)) in plain.memory.iter().zip(erased.memory.iter()).enumerate() {
            let addr = addr as u64;
            if addr >= f.vaddr && addr < f.vaddr + f.size {
                continue;
            }
            assert_eq!(a, b, "byte at {addr:#x} changed outside the erased span");
        }
        let g = locate_function(&image, "g").unwrap();
        assert_eq!(
            read_region(&plain, g.vaddr, g.size).unwrap(),
            read_region(&erased, g.vaddr, g.size).unwrap()
        );
    }

    #[test]
    fn empty_schedule_is_identity() {
        let text = words(&[ADD_X0_X0_1, RET]);
        let file = synth_so(&[("f", 0, 8)], &text);
        let image = parse_elf(file).unwrap();
        let a = load_library(&image, "t.so", [], DEFAULT_BASE).unwrap();
        let b = load_library(&image, "t.so", [], DEFAULT_BASE).unwrap();
        assert_eq!(a.memory, b.memory);
        assert!(a.debloated.is_empty());
    }

    #[test]
    fn failed_schedule_loads_nothing() {
        let file = synth_so(&[("f", 0, 8)], &words(&[ADD_X0_X0_1, RET]));
        let image = parse_elf(file).unwrap();
        let err = load_library(&image, "t.so", ["f", "missing"], DEFAULT_BASE).unwrap_err();
        assert!(matches!(err, ElfError::SymbolNotFound(_)));
    }

    #[test]
    fn resolve_is_pure_and_address_invariant() {
        let file = synth_so(&[("f", 0, 8)], &words(&[ADD_X0_X0_1, RET]));
        let image = parse_elf(file).unwrap();
        let plain = load_library(&image, "t.so", [], DEFAULT_BASE).unwrap();
        let erased = load_library(&image, "t.so", ["f"], DEFAULT_BASE).unwrap();
        let a = resolve_native(&plain, "f").unwrap();
        let b = resolve_native(&erased, "f").unwrap();
        assert_eq!(a.address, b.address);
        assert!(!a.debloated);
        assert!(b.debloated);
        assert_eq!(resolve_native(&erased, "f").unwrap(), b);
        assert!(matches!(
            resolve_native(&plain, "missing").unwrap_err(),
            ElfError::SymbolNotFound(_)
        ));
    }

    #[test]
    fn read_region_bounds() {
        let file = synth_so(&[("f", 0, 8)], &words(&[ADD_X0_X0_1, RET]));
        let image = parse_elf(file).unwrap();
        let lib = load_library(&image, "t.so", [], DEFAULT_BASE).unwrap();
        assert_eq!(read_region(&lib, 0, 0).unwrap(), Vec::<u8>::new());
        let mapped = lib.memory.len() as u64;
        assert!(read_region(&lib, mapped - 4, 4).is_ok());
        assert!(matches!(
            read_region(&lib, mapped - 4, 5).unwrap_err(),
            ElfError::OutOfRange { .. }
        ));
        assert!(matches!(
            read_region(&lib, u64::MAX, 2).unwrap_err(),
            ElfError::OutOfRange { .. }
        ));
    }

    #[test]
    fn hex_dump_format() {
        assert_eq!(hex_dump(&[]), "");
        assert_eq!(hex_dump(&[0xAB]), "ab");
        let bytes: Vec<u8> = (0..18).collect();
        assert_eq!(
            hex_dump(&bytes),
            "00 01 02 03 04 05 06 07 08 09 0a 0b 0c 0d 0e 0f\n10 11"
        );
    }
}
