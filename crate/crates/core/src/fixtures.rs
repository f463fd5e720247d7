//! The executor fixture corpus: WebAssembly text templates under
//! `crates/core/fixtures/`, filled in with import declarations and assembled
//! with the `wat` crate.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::runtime_host::DirectiveKind;
use crate::wasm_inspect::{ImportKind, ImportRecord};
use crate::whitelist::HOST_NAMESPACE;

const COMMON: &str = include_str!("../fixtures/common.wat");
const EMITTER: &str = include_str!("../fixtures/emitter.wat");
const CONSTRUCTOR_EMITTER: &str = include_str!("../fixtures/constructor_emitter.wat");
const ECHO: &str = include_str!("../fixtures/echo.wat");
const NO_OUTPUT: &str = include_str!("../fixtures/no_output.wat");
const TRAP: &str = include_str!("../fixtures/trap.wat");
const SPIN: &str = include_str!("../fixtures/spin.wat");
const MEMORY_SENTINEL: &str = include_str!("../fixtures/memory_sentinel.wat");
const CLOCK_READER: &str = include_str!("../fixtures/clock_reader.wat");

const WASI: &str = "wasi_snapshot_preview1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Behavior {
    Echo,
    CallMachineEmitter,
    LlmCallEmitter,
    MemoryOpEmitter,
    CodeEvalEmitter,
    NoOutput,
    Trap,
    MemorySentinel,
    /// Loops forever; exercises fuel and wall-clock limits.
    Spin,
    /// Needs a clock import, which no whitelist provides.
    ClockReader,
    /// Emits through the v2 `directive_call_machine` constructor.
    ConstructorEmitter,
}

impl Behavior {
    /// The directive kind an emitter produces.
    pub fn emitted_kind(self) -> Option<DirectiveKind> {
        match self {
            Behavior::CallMachineEmitter | Behavior::ConstructorEmitter => Some(DirectiveKind::CallMachine),
            Behavior::LlmCallEmitter => Some(DirectiveKind::LlmCall),
            Behavior::MemoryOpEmitter => Some(DirectiveKind::MemoryOp),
            Behavior::CodeEvalEmitter => Some(DirectiveKind::CodeEval),
            _ => None,
        }
    }

    fn required_imports(self) -> Vec<ImportRecord> {
        let m = |name: &str, sig: &str| ImportRecord::function(HOST_NAMESPACE, name, sig);
        let len = m("get_input_len", "() -> i32");
        let get = m("get_input", "(i32) -> ()");
        let set = m("set_output", "(i32, i32) -> ()");
        let log = m("log", "(i32, i32) -> ()");
        match self {
            Behavior::Echo => vec![len, get, set],
            Behavior::CallMachineEmitter
            | Behavior::LlmCallEmitter
            | Behavior::MemoryOpEmitter
            | Behavior::CodeEvalEmitter => vec![len, get, set, log],
            Behavior::NoOutput | Behavior::Trap | Behavior::Spin => vec![],
            Behavior::MemorySentinel => vec![set],
            Behavior::ClockReader => {
                vec![ImportRecord::function(WASI, "clock_time_get", "(i32, i64, i32) -> i32"), set]
            }
            Behavior::ConstructorEmitter => {
                vec![len, get, set, m("directive_call_machine", "(i32, i32) -> ()")]
            }
        }
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureSpec {
    pub name: String,
    /// Declared in this order; the assembled module imports exactly these.
    pub imports: Vec<ImportRecord>,
    pub behavior: Behavior,
    /// Initial pages of the module's own exported memory.
    pub memory_pages: u32,
}

impl FixtureSpec {
    pub fn new(name: &str, imports: Vec<ImportRecord>, behavior: Behavior) -> Self {
        FixtureSpec { name: name.to_owned(), imports, behavior, memory_pages: 1 }
    }

    pub fn with_memory_pages(mut self, pages: u32) -> Self {
        self.memory_pages = pages;
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("behavior {behavior} needs import {missing} which the fixture does not declare")]
    UnimplementableBehavior { behavior: Behavior, missing: String },
    #[error("cannot render import {0}")]
    UnrenderableImport(String),
    #[error("assembly failed: {0}")]
    Assemble(String),
    #[error("unknown fixture {0}")]
    UnknownFixture(String),
    #[error("writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// The four host functions of the baseline profile.
pub fn v1_imports() -> Vec<ImportRecord> {
    vec![
        ImportRecord::function(HOST_NAMESPACE, "get_input_len", "() -> i32"),
        ImportRecord::function(HOST_NAMESPACE, "get_input", "(i32) -> ()"),
        ImportRecord::function(HOST_NAMESPACE, "set_output", "(i32, i32) -> ()"),
        ImportRecord::function(HOST_NAMESPACE, "log", "(i32, i32) -> ()"),
    ]
}

/// WebAssembly text for `spec`.
pub fn fixture_source(spec: &FixtureSpec) -> Result<String, FixtureError> {
    for needed in spec.behavior.required_imports() {
        if !spec.imports.contains(&needed) {
            return Err(FixtureError::UnimplementableBehavior {
                behavior: spec.behavior,
                missing: format!("{} {}", needed.qualified_name(), needed.type_signature),
            });
        }
    }
    let mut imports = String::new();
    let mut used_ids: Vec<String> = Vec::new();
    for (i, import) in spec.imports.iter().enumerate() {
        let mut id = sanitize(&import.name);
        if used_ids.contains(&id) {
            id = format!("{id}_{i}");
        }
        imports.push_str(&format!(
            "  (import {} {} {})\n",
            wat_string(&import.namespace),
            wat_string(&import.name),
            render_import(import, &id)?
        ));
        used_ids.push(id);
    }
    let memory = format!("  (memory (export \"memory\") {})", spec.memory_pages);

    let template = match spec.behavior {
        Behavior::Echo => ECHO,
        Behavior::CallMachineEmitter
        | Behavior::LlmCallEmitter
        | Behavior::MemoryOpEmitter
        | Behavior::CodeEvalEmitter => EMITTER,
        Behavior::NoOutput => NO_OUTPUT,
        Behavior::Trap => TRAP,
        Behavior::Spin => SPIN,
        Behavior::MemorySentinel => MEMORY_SENTINEL,
        Behavior::ClockReader => CLOCK_READER,
        Behavior::ConstructorEmitter => CONSTRUCTOR_EMITTER,
    };
    let mut source = template.replace("{{IMPORTS}}", imports.trim_end()).replace("{{MEMORY}}", &memory);
    source = source.replace("{{COMMON}}", COMMON.trim_end());
    if let Some(kind) = spec.behavior.emitted_kind() {
        let prefix = format!(r#"{{"directives":[{{"kind":"{}","payload":"#, kind.as_str());
        let suffix = r#"}],"result":{"status":"planned"}}"#;
        let log = format!("planning {}", kind.as_str());
        source = source
            .replace("{{PREFIX}}", &wat_escape(&prefix))
            .replace("{{SUFFIX}}", &wat_escape(suffix))
            .replace("{{PREFIX_LEN}}", &prefix.len().to_string())
            .replace("{{SUFFIX_LEN}}", &suffix.len().to_string())
            .replace("{{FRAME_LEN}}", &(prefix.len() + suffix.len()).to_string())
            .replace("{{LOG_LEN}}", &log.len().to_string())
            .replace("{{KIND}}", kind.as_str());
    }
    Ok(source)
}

/// Assembles `spec` into a binary. Output bytes are deterministic for a
/// given `wat` version.
pub fn assemble_fixture(spec: &FixtureSpec) -> Result<Vec<u8>, FixtureError> {
    let source = fixture_source(spec)?;
    wat::parse_str(&source).map_err(|e| FixtureError::Assemble(e.to_string()))
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' }).collect()
}

fn wat_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        match b {
            b'"' | b'\\' => out.push_str(&format!("\\{:02x}", b)),
            0x20..=0x7e => out.push(b as char),
            _ => out.push_str(&format!("\\{:02x}", b)),
        }
    }
    out
}

fn wat_string(s: &str) -> String {
    format!("\"{}\"", wat_escape(s))
}

fn render_import(import: &ImportRecord, id: &str) -> Result<String, FixtureError> {
    let bad = || FixtureError::UnrenderableImport(format!("{} {}", import.qualified_name(), import.type_signature));
    let sig = import.type_signature.as_str();
    match import.kind {
        ImportKind::Function => {
            let (params, results) = sig.split_once(" -> ").ok_or_else(bad)?;
            let params = params.strip_prefix('(').and_then(|p| p.strip_suffix(')')).ok_or_else(bad)?;
            let params: Vec<&str> = params.split(", ").filter(|p| !p.is_empty()).collect();
            let results: Vec<&str> = match results.strip_prefix('(').and_then(|r| r.strip_suffix(')')) {
                Some(inner) => inner.split(", ").filter(|r| !r.is_empty()).collect(),
                None => vec![results],
            };
            let mut out = format!("(func ${id}");
            if !params.is_empty() {
                out.push_str(&format!(" (param {})", params.join(" ")));
            }
            if !results.is_empty() {
                out.push_str(&format!(" (result {})", results.join(" ")));
            }
            out.push(')');
            Ok(out)
        }
        ImportKind::Memory => {
            let limits = sig.strip_prefix("memory ").ok_or_else(bad)?;
            Ok(format!("(memory ${id} {})", render_limits(limits).ok_or_else(bad)?))
        }
        ImportKind::Table => {
            let rest = sig.strip_prefix("table ").ok_or_else(bad)?;
            let (elem, limits) = rest.split_once(' ').ok_or_else(bad)?;
            Ok(format!("(table ${id} {} {elem})", render_limits(limits).ok_or_else(bad)?))
        }
        ImportKind::Global => {
            let rest = sig.strip_prefix("global ").ok_or_else(bad)?;
            match rest.split_once(' ') {
                Some((ty, "mut")) => Ok(format!("(global ${id} (mut {ty}))")),
                Some((ty, "const")) => Ok(format!("(global ${id} {ty})")),
                _ => Err(bad()),
            }
        }
    }
}

fn render_limits(limits: &str) -> Option<String> {
    let mut out = Vec::new();
    for part in limits.split(' ') {
        let value = part.strip_prefix("min=").or_else(|| part.strip_prefix("max="))?;
        value.parse::<u64>().ok()?;
        out.push(value);
    }
    (!out.is_empty()).then(|| out.join(" "))
}

/// Fixtures standing in for the call, reason, memory and code executors.
pub const PRODUCTION_ANALOGS: [&str; 4] = ["call", "reason", "memory", "code"];

/// Fixtures that must never run an effect.
pub const NEGATIVE_FIXTURES: [&str; 5] =
    ["neg_undeclared", "neg_wasi", "neg_table", "neg_big_memory", "neg_second_namespace"];

/// Every named fixture.
pub fn corpus() -> Vec<FixtureSpec> {
    let v1 = v1_imports();
    let with = |extra: ImportRecord| {
        let mut imports = v1.clone();
        imports.push(extra);
        imports
    };
    vec![
        FixtureSpec::new("call", v1.clone(), Behavior::CallMachineEmitter),
        FixtureSpec::new("reason", v1.clone(), Behavior::LlmCallEmitter),
        FixtureSpec::new("memory", v1.clone(), Behavior::MemoryOpEmitter),
        FixtureSpec::new("code", v1.clone(), Behavior::CodeEvalEmitter),
        FixtureSpec::new("echo", v1.clone(), Behavior::Echo),
        FixtureSpec::new("no_output", v1.clone(), Behavior::NoOutput),
        FixtureSpec::new("trap", v1.clone(), Behavior::Trap),
        FixtureSpec::new("sentinel", v1.clone(), Behavior::MemorySentinel),
        FixtureSpec::new("spin", v1.clone(), Behavior::Spin),
        FixtureSpec::new("poc", Vec::new(), Behavior::Trap),
        FixtureSpec::new(
            "v2_constructor",
            with(ImportRecord::function(HOST_NAMESPACE, "directive_call_machine", "(i32, i32) -> ()")),
            Behavior::ConstructorEmitter,
        ),
        FixtureSpec::new(
            "neg_undeclared",
            with(ImportRecord::function(HOST_NAMESPACE, "read_clock", "() -> i64")),
            Behavior::CallMachineEmitter,
        ),
        FixtureSpec::new(
            "neg_wasi",
            with(ImportRecord::function(WASI, "fd_write", "(i32, i32, i32, i32) -> i32")),
            Behavior::CallMachineEmitter,
        ),
        FixtureSpec::new(
            "neg_table",
            with(ImportRecord {
                namespace: HOST_NAMESPACE.into(),
                name: "table".into(),
                kind: ImportKind::Table,
                type_signature: "table funcref min=1".into(),
            }),
            Behavior::CallMachineEmitter,
        ),
        FixtureSpec::new("neg_big_memory", v1.clone(), Behavior::CallMachineEmitter).with_memory_pages(2048),
        FixtureSpec::new(
            "neg_second_namespace",
            with(ImportRecord::function("env", "get_input_len", "() -> i32")),
            Behavior::CallMachineEmitter,
        ),
    ]
}

pub fn fixture(name: &str) -> Result<FixtureSpec, FixtureError> {
    corpus().into_iter().find(|f| f.name == name).ok_or_else(|| FixtureError::UnknownFixture(name.to_owned()))
}

pub fn fixture_bytes(name: &str) -> Result<Vec<u8>, FixtureError> {
    assemble_fixture(&fixture(name)?)
}

/// Writes `<name>.wat` and `<name>.wasm` for every corpus entry into `dir`.
pub fn build_corpus(dir: &Path) -> Result<Vec<PathBuf>, FixtureError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| FixtureError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut written = Vec::new();
    for spec in corpus() {
        let source = fixture_source(&spec)?;
        let binary = wat::parse_str(&source).map_err(|e| FixtureError::Assemble(e.to_string()))?;
        let wat_path = dir.join(format!("{}.wat", spec.name));
        let wasm_path = dir.join(format!("{}.wasm", spec.name));
        fs::write(&wat_path, source).map_err(io(&wat_path))?;
        fs::write(&wasm_path, binary).map_err(io(&wasm_path))?;
        written.push(wasm_path);
    }
    Ok(written)
}
