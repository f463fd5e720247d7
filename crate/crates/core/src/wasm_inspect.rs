//! Import-section extraction for WebAssembly binaries.
//!
//! Only the preamble, the section framing, the type section and the import
//! section are decoded. Code and data are never looked at, and nothing here
//! trusts whoever produced the bytes: every length is bounds-checked and any
//! framing problem is a hard [`MalformedBinary`] error, never an empty list.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::hash::{hash_bytes, Digest};

/// Upper bound on accepted binaries (64 MiB).
pub const MAX_BINARY_SIZE: usize = 64 * 1024 * 1024;

const MAGIC: [u8; 4] = [0x00, 0x61, 0x73, 0x6d];
const VERSION: u32 = 1;

const SECTION_CUSTOM: u8 = 0;
const SECTION_TYPE: u8 = 1;
const SECTION_IMPORT: u8 = 2;
// Highest known section id (data count).
const SECTION_MAX_ID: u8 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportKind {
    Function,
    Memory,
    Table,
    Global,
}

impl fmt::Display for ImportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImportKind::Function => "function",
            ImportKind::Memory => "memory",
            ImportKind::Table => "table",
            ImportKind::Global => "global",
        })
    }
}

/// One entry of a module's import section.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImportRecord {
    pub namespace: String,
    pub name: String,
    pub kind: ImportKind,
    /// Canonical rendering of the imported entity's type, e.g. `(i32, i32) -> ()`.
    pub type_signature: String,
}

impl ImportRecord {
    pub fn function(namespace: &str, name: &str, type_signature: &str) -> Self {
        ImportRecord {
            namespace: namespace.to_owned(),
            name: name.to_owned(),
            kind: ImportKind::Function,
            type_signature: type_signature.to_owned(),
        }
    }

    /// `namespace.name`, as used in rejection reasons.
    pub fn qualified_name(&self) -> String {
        format!("{}.{}", self.namespace, self.name)
    }
}

/// The parsed import section plus the artifact identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleImports {
    pub imports: Vec<ImportRecord>,
    pub artifact_hash: Digest,
    pub byte_length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MalformedBinary {
    #[error("binary is empty")]
    Empty,
    #[error("binary is {len} bytes, above the {MAX_BINARY_SIZE} byte limit")]
    TooLarge { len: usize },
    #[error("bad magic number")]
    BadMagic,
    #[error("unsupported binary format version {0}")]
    UnsupportedVersion(u32),
    #[error("unexpected end of input at offset {offset}")]
    Truncated { offset: usize },
    #[error("invalid LEB128 integer at offset {offset}")]
    InvalidLeb128 { offset: usize },
    #[error("invalid UTF-8 name at offset {offset}")]
    InvalidUtf8 { offset: usize },
    #[error("empty import name at offset {offset}")]
    EmptyName { offset: usize },
    #[error("unknown section id {id} at offset {offset}")]
    UnknownSection { id: u8, offset: usize },
    #[error("section {id} out of order or duplicated at offset {offset}")]
    SectionOrder { id: u8, offset: usize },
    #[error("section {id} declares {declared} bytes but its contents use {used}")]
    SectionSizeMismatch { id: u8, declared: usize, used: usize },
    #[error("unsupported type form 0x{form:02x} at offset {offset}")]
    UnsupportedTypeForm { form: u8, offset: usize },
    #[error("invalid value type 0x{byte:02x} at offset {offset}")]
    InvalidValueType { byte: u8, offset: usize },
    #[error("unsupported import kind 0x{byte:02x} at offset {offset}")]
    UnsupportedImportKind { byte: u8, offset: usize },
    #[error("function import references type index {index}, only {available} types declared")]
    TypeIndexOutOfRange { index: u32, available: usize },
    #[error("invalid limits flag 0x{flag:02x} at offset {offset}")]
    InvalidLimits { flag: u8, offset: usize },
    #[error("invalid mutability flag 0x{flag:02x} at offset {offset}")]
    InvalidMutability { flag: u8, offset: usize },
}

/// Extracts every import in declaration order and hashes the artifact.
pub fn parse_imports(binary: &[u8]) -> Result<ModuleImports, MalformedBinary> {
    // The hash is taken over the exact input before any parsing decision.
    let artifact_hash = hash_bytes(binary);
    let imports = extract_imports(binary)?;
    Ok(ModuleImports { imports, artifact_hash, byte_length: binary.len() })
}

fn extract_imports(binary: &[u8]) -> Result<Vec<ImportRecord>, MalformedBinary> {
    if binary.is_empty() {
        return Err(MalformedBinary::Empty);
    }
    if binary.len() > MAX_BINARY_SIZE {
        return Err(MalformedBinary::TooLarge { len: binary.len() });
    }
    let mut r = Reader::new(binary);
    if r.bytes(4)? != MAGIC {
        return Err(MalformedBinary::BadMagic);
    }
    let version = u32::from_le_bytes(r.bytes(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(MalformedBinary::UnsupportedVersion(version));
    }

    let mut types: Option<Vec<FuncType>> = None;
    let mut imports: Option<Vec<ImportRecord>> = None;
    let mut last_ordered_id = 0u8;

    // Walk every section header so truncation anywhere in the file is caught,
    // but only decode the payloads of the type and import sections.
    while !r.at_end() {
        let header_offset = r.pos;
        let id = r.byte()?;
        let size = r.u32()? as usize;
        let body_start = r.pos;
        let body = r.bytes(size)?;
        if id == SECTION_CUSTOM {
            continue;
        }
        if id > SECTION_MAX_ID {
            return Err(MalformedBinary::UnknownSection { id, offset: header_offset });
        }
        // Data count (12) sits between import-irrelevant sections; only the
        // relative order of type and import matters here.
        if id == SECTION_TYPE || id == SECTION_IMPORT {
            if id <= last_ordered_id {
                return Err(MalformedBinary::SectionOrder { id, offset: header_offset });
            }
            last_ordered_id = id;
        } else if last_ordered_id < SECTION_IMPORT {
            last_ordered_id = SECTION_IMPORT;
        }
        match id {
            SECTION_TYPE => {
                let mut sub = Reader::with_base(body, body_start);
                let parsed = parse_type_section(&mut sub)?;
                sub.expect_consumed(id, size)?;
                types = Some(parsed);
            }
            SECTION_IMPORT => {
                let mut sub = Reader::with_base(body, body_start);
                let parsed = parse_import_section(&mut sub, types.as_deref().unwrap_or(&[]))?;
                sub.expect_consumed(id, size)?;
                imports = Some(parsed);
            }
            _ => {}
        }
    }
    Ok(imports.unwrap_or_default())
}

#[derive(Debug, Clone)]
struct FuncType {
    params: Vec<&'static str>,
    results: Vec<&'static str>,
}

impl FuncType {
    fn render(&self) -> String {
        let params = format!("({})", self.params.join(", "));
        let results = match self.results.len() {
            0 => "()".to_owned(),
            1 => self.results[0].to_owned(),
            _ => format!("({})", self.results.join(", ")),
        };
        format!("{params} -> {results}")
    }
}

fn parse_type_section(r: &mut Reader<'_>) -> Result<Vec<FuncType>, MalformedBinary> {
    let count = r.u32()?;
    let mut types = Vec::new();
    for _ in 0..count {
        let offset = r.offset();
        let form = r.byte()?;
        if form != 0x60 {
            return Err(MalformedBinary::UnsupportedTypeForm { form, offset });
        }
        let params = r.value_types()?;
        let results = r.value_types()?;
        types.push(FuncType { params, results });
    }
    Ok(types)
}

fn parse_import_section(r: &mut Reader<'_>, types: &[FuncType]) -> Result<Vec<ImportRecord>, MalformedBinary> {
    let count = r.u32()?;
    let mut imports = Vec::new();
    for _ in 0..count {
        let namespace = r.name()?;
        let name = r.name()?;
        let offset = r.offset();
        let (kind, type_signature) = match r.byte()? {
            0x00 => {
                let index = r.u32()?;
                let ty = types.get(index as usize).ok_or(MalformedBinary::TypeIndexOutOfRange {
                    index,
                    available: types.len(),
                })?;
                (ImportKind::Function, ty.render())
            }
            0x01 => {
                let elem = r.ref_type()?;
                let limits = r.limits(false)?;
                (ImportKind::Table, format!("table {elem} {limits}"))
            }
            0x02 => (ImportKind::Memory, format!("memory {}", r.limits(true)?)),
            0x03 => {
                let ty = r.value_type()?;
                let flag_offset = r.offset();
                let mutability = match r.byte()? {
                    0x00 => "const",
                    0x01 => "mut",
                    flag => return Err(MalformedBinary::InvalidMutability { flag, offset: flag_offset }),
                };
                (ImportKind::Global, format!("global {ty} {mutability}"))
            }
            byte => return Err(MalformedBinary::UnsupportedImportKind { byte, offset }),
        };
        imports.push(ImportRecord { namespace, name, kind, type_signature });
    }
    Ok(imports)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0, base: 0 }
    }

    fn with_base(data: &'a [u8], base: usize) -> Self {
        Reader { data, pos: 0, base }
    }

    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn at_end(&self) -> bool {
        self.pos >= self.data.len()
    }

    fn byte(&mut self) -> Result<u8, MalformedBinary> {
        let b = *self.data.get(self.pos).ok_or(MalformedBinary::Truncated { offset: self.offset() })?;
        self.pos += 1;
        Ok(b)
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], MalformedBinary> {
        let end = self.pos.checked_add(n).filter(|&end| end <= self.data.len());
        let end = end.ok_or(MalformedBinary::Truncated { offset: self.base + self.data.len() })?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, MalformedBinary> {
        let start = self.offset();
        let mut result: u32 = 0;
        for i in 0..5 {
            let b = self.byte()?;
            if i == 4 && b & 0xf0 != 0 {
                // Fifth byte may only carry the top four bits and no continuation.
                return Err(MalformedBinary::InvalidLeb128 { offset: start });
            }
            result |= u32::from(b & 0x7f) << (7 * i);
            if b & 0x80 == 0 {
                return Ok(result);
            }
        }
        Err(MalformedBinary::InvalidLeb128 { offset: start })
    }

    fn u64(&mut self) -> Result<u64, MalformedBinary> {
        let start = self.offset();
        let mut result: u64 = 0;
        for i in 0..10 {
            let b = self.byte()?;
            if i == 9 && b & 0xfe != 0 {
                return Err(MalformedBinary::InvalidLeb128 { offset: start });
            }
            result |= u64::from(b & 0x7f) << (7 * i);
            if b & 0x80 == 0 {
                return Ok(result);
            }
        }
        Err(MalformedBinary::InvalidLeb128 { offset: start })
    }

    fn name(&mut self) -> Result<String, MalformedBinary> {
        let offset = self.offset();
        let len = self.u32()? as usize;
        let raw = self.bytes(len)?;
        if raw.is_empty() {
            return Err(MalformedBinary::EmptyName { offset });
        }
        std::str::from_utf8(raw)
            .map(str::to_owned)
            .map_err(|_| MalformedBinary::InvalidUtf8 { offset })
    }

    fn value_type(&mut self) -> Result<&'static str, MalformedBinary> {
        let offset = self.offset();
        match self.byte()? {
            0x7f => Ok("i32"),
            0x7e => Ok("i64"),
            0x7d => Ok("f32"),
            0x7c => Ok("f64"),
            0x7b => Ok("v128"),
            0x70 => Ok("funcref"),
            0x6f => Ok("externref"),
            byte => Err(MalformedBinary::InvalidValueType { byte, offset }),
        }
    }

    fn ref_type(&mut self) -> Result<&'static str, MalformedBinary> {
        let offset = self.offset();
        match self.byte()? {
            0x70 => Ok("funcref"),
            0x6f => Ok("externref"),
            byte => Err(MalformedBinary::InvalidValueType { byte, offset }),
        }
    }

    fn value_types(&mut self) -> Result<Vec<&'static str>, MalformedBinary> {
        let count = self.u32()?;
        (0..count).map(|_| self.value_type()).collect()
    }

    /// Renders limits as `min=N[ max=M][ shared][ i64]`.
    fn limits(&mut self, memory: bool) -> Result<String, MalformedBinary> {
        let offset = self.offset();
        let flag = self.byte()?;
        let allowed = if memory { 0x07 } else { 0x01 };
        if flag & !allowed != 0 {
            return Err(MalformedBinary::InvalidLimits { flag, offset });
        }
        let has_max = flag & 0x01 != 0;
        let shared = flag & 0x02 != 0;
        let wide = flag & 0x04 != 0;
        let read = |r: &mut Self| if wide { r.u64() } else { r.u32().map(u64::from) };
        let mut out = format!("min={}", read(self)?);
        if has_max {
            out.push_str(&format!(" max={}", read(self)?));
        }
        if shared {
            out.push_str(" shared");
        }
        if wide {
            out.push_str(" i64");
        }
        Ok(out)
    }

    fn expect_consumed(&self, id: u8, declared: usize) -> Result<(), MalformedBinary> {
        if self.pos != declared {
            return Err(MalformedBinary::SectionSizeMismatch { id, declared, used: self.pos });
        }
        Ok(())
    }
}
