//! Runs gate-accepted executors under wasmtime.
//!
//! The linker is built from the runtime whitelist and nothing else, and the
//! only way to run a module is [`ExecutorHost::instantiate_and_plan`], which
//! takes a [`GateDecision`] that must be an accept for exactly these bytes.
//!
//! ABI: the executor exports `plan() -> i32` (0 = ok) and a `memory`. It
//! pulls its input document with `get_input_len`/`get_input` and publishes
//! one output document with `set_output`. The input document is
//! `{"context":C,"step_config":S}` in canonical form; the output document is
//! `{"result":R,"directives":[{"kind":K,"payload":P},...]}` with
//! `directives` optional.
//!
//! The extended (v2) host functions work on host-side values addressed by
//! `i32` handles. Functions returning bytes allocate in guest memory past
//! its current end and return `(ptr << 32) | len`; `-1` means absent.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use wasmtime::{
    Caller, Config, Engine, Extern, FuncType, Linker, Memory, Module, ResourceLimiter, Store, Trap, ValType,
};

use crate::canonical::{to_canonical_bytes, value_to_canonical_bytes};
use crate::gate::GateDecision;
use crate::hash::{hash_bytes, Digest};
use crate::whitelist::{Whitelist, HOST_NAMESPACE};

/// Kinds of effect an executor may describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectiveKind {
    LlmCall,
    LlmCallStream,
    HttpRequest,
    FileOp,
    CallMachine,
    MemoryOp,
    DbOp,
    ExecOp,
    EmitEvent,
    Broadcast,
    CodeEval,
}

impl DirectiveKind {
    pub const ALL: [DirectiveKind; 11] = [
        DirectiveKind::LlmCall,
        DirectiveKind::LlmCallStream,
        DirectiveKind::HttpRequest,
        DirectiveKind::FileOp,
        DirectiveKind::CallMachine,
        DirectiveKind::MemoryOp,
        DirectiveKind::DbOp,
        DirectiveKind::ExecOp,
        DirectiveKind::EmitEvent,
        DirectiveKind::Broadcast,
        DirectiveKind::CodeEval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DirectiveKind::LlmCall => "llm_call",
            DirectiveKind::LlmCallStream => "llm_call_stream",
            DirectiveKind::HttpRequest => "http_request",
            DirectiveKind::FileOp => "file_op",
            DirectiveKind::CallMachine => "call_machine",
            DirectiveKind::MemoryOp => "memory_op",
            DirectiveKind::DbOp => "db_op",
            DirectiveKind::ExecOp => "exec_op",
            DirectiveKind::EmitEvent => "emit_event",
            DirectiveKind::Broadcast => "broadcast",
            DirectiveKind::CodeEval => "code_eval",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

/// An inert description of an effect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Directive {
    pub kind: DirectiveKind,
    pub payload: Value,
}

impl Directive {
    pub fn new(kind: DirectiveKind, payload: Value) -> Self {
        Directive { kind, payload }
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        to_canonical_bytes(self).expect("directives are checked canonical on construction")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorInput {
    pub step_config: Value,
    pub context: Value,
}

impl ExecutorInput {
    pub fn new(step_config: Value, context: Value) -> Self {
        ExecutorInput { step_config, context }
    }

    /// The frozen document handed across the boundary.
    pub fn to_document(&self) -> Result<Vec<u8>, ExecError> {
        to_canonical_bytes(self).map_err(|e| ExecError::InputEncoding(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExecutorOutput {
    pub result: Value,
    pub directives: Vec<Directive>,
    pub log_lines: Vec<String>,
}

impl ExecutorOutput {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        to_canonical_bytes(self).expect("outputs are checked canonical on construction")
    }

    pub fn result_bytes(&self) -> Vec<u8> {
        value_to_canonical_bytes(&self.result).expect("outputs are checked canonical on construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResourceLimits {
    /// Instruction budget.
    pub fuel: u64,
    /// Linear memory ceiling in bytes.
    pub memory_max: usize,
    pub wall_clock: Duration,
}

impl Default for ResourceLimits {
    fn default() -> Self {
        ResourceLimits { fuel: 100_000_000, memory_max: 64 << 20, wall_clock: Duration::from_millis(1000) }
    }
}

impl ResourceLimits {
    fn validate(&self) -> Result<(), ExecError> {
        if self.fuel == 0 || self.memory_max == 0 || self.wall_clock.is_zero() {
            return Err(ExecError::InvalidLimits);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExecError {
    #[error("gate not passed: {0}")]
    GateNotPassed(String),
    #[error("executor does not export `plan() -> i32` and `memory`")]
    MissingExport,
    #[error("module failed validation or compilation: {0}")]
    InvalidModule(String),
    #[error("executor trapped: {0}")]
    Trap(String),
    #[error("fuel exhausted")]
    FuelExhausted,
    #[error("memory limit exceeded")]
    MemoryExceeded,
    #[error("wall-clock timeout")]
    Timeout,
    #[error("malformed output: {0}")]
    MalformedOutput(String),
    #[error("executor returned error code {0}")]
    ExecutorError(i32),
    #[error("input is not canonical: {0}")]
    InputEncoding(String),
    #[error("resource limits must be positive")]
    InvalidLimits,
    #[error("host cannot be configured: {0}")]
    HostConfiguration(String),
}

impl ExecError {
    /// Stable class name, used as a provenance marker.
    pub fn class(&self) -> &'static str {
        match self {
            ExecError::GateNotPassed(_) => "gate_not_passed",
            ExecError::MissingExport => "missing_export",
            ExecError::InvalidModule(_) => "invalid_module",
            ExecError::Trap(_) => "trap",
            ExecError::FuelExhausted => "fuel_exhausted",
            ExecError::MemoryExceeded => "memory_exceeded",
            ExecError::Timeout => "timeout",
            ExecError::MalformedOutput(_) => "malformed_output",
            ExecError::ExecutorError(_) => "executor_error",
            ExecError::InputEncoding(_) => "input_encoding",
            ExecError::InvalidLimits => "invalid_limits",
            ExecError::HostConfiguration(_) => "host_configuration",
        }
    }
}

/// Faults raised by host functions; they unwind the guest as traps.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
enum HostFault {
    #[error("no exported memory")]
    NoMemory,
    #[error("out-of-bounds guest memory access")]
    OutOfBounds,
    #[error("set_output called more than once")]
    DuplicateOutput,
    #[error("invalid handle {0}")]
    BadHandle(i32),
    #[error("invalid document: {0}")]
    InvalidDocument(String),
    #[error("invalid UTF-8")]
    InvalidUtf8,
    #[error("index out of range")]
    IndexOutOfRange,
    #[error("integer division by zero or overflow")]
    Arithmetic,
    #[error("handle table full")]
    HandleLimit,
    #[error("host allocation failed")]
    AllocFailed,
}

fn fault(f: HostFault) -> wasmtime::Error {
    wasmtime::Error::new(f)
}

const MAX_HANDLES: usize = 1 << 16;
const MAX_TABLE_ELEMENTS: usize = 100_000;
const PAGE: usize = 65_536;

struct Limiter {
    memory_max: usize,
    exceeded: bool,
}

impl ResourceLimiter for Limiter {
    fn memory_growing(&mut self, _current: usize, desired: usize, _maximum: Option<usize>) -> wasmtime::Result<bool> {
        if desired > self.memory_max {
            self.exceeded = true;
            return Ok(false);
        }
        Ok(true)
    }

    fn table_growing(&mut self, _current: usize, desired: usize, _maximum: Option<usize>) -> wasmtime::Result<bool> {
        Ok(desired <= MAX_TABLE_ELEMENTS)
    }

    fn instances(&self) -> usize {
        1
    }

    fn tables(&self) -> usize {
        4
    }

    fn memories(&self) -> usize {
        1
    }
}

struct HostState {
    input: Arc<Vec<u8>>,
    context: Arc<Value>,
    output: Option<Vec<u8>>,
    logs: Vec<String>,
    directives: Vec<Directive>,
    handles: Vec<Value>,
    heap_next: usize,
    heap_end: usize,
    limiter: Limiter,
}

struct EpochTicker {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl EpochTicker {
    fn start(engine: Engine) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::Builder::new()
            .name("purecert-epoch".into())
            .spawn(move || {
                while !flag.load(Ordering::Relaxed) {
                    std::thread::sleep(Duration::from_millis(1));
                    engine.increment_epoch();
                }
            })
            .ok();
        EpochTicker { stop, handle }
    }
}

impl Drop for EpochTicker {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Per-phase timings of one invocation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PlanTimings {
    pub serialize: Duration,
    pub compile: Duration,
    pub instantiate: Duration,
    pub call: Duration,
    pub total: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeterminismReport {
    pub divergences: usize,
    /// Digest of each run's canonical output, or of its error class.
    pub outputs: Vec<Digest>,
    pub first_error: Option<ExecError>,
}

/// Compiled-module cache plus the whitelist-derived linker.
pub struct ExecutorHost {
    engine: Engine,
    linker: Linker<HostState>,
    whitelist: Whitelist,
    modules: Mutex<HashMap<Digest, Module>>,
    _ticker: EpochTicker,
}

impl std::fmt::Debug for ExecutorHost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExecutorHost")
            .field("whitelist_version", &self.whitelist.version())
            .field("whitelist_hash", &self.whitelist.content_hash())
            .finish_non_exhaustive()
    }
}

impl ExecutorHost {
    /// Builds a host whose linker provides exactly the functions in
    /// `whitelist`, each with the declared signature.
    pub fn new(whitelist: Whitelist) -> Result<Self, ExecError> {
        let mut config = Config::new();
        config.consume_fuel(true).epoch_interruption(true);
        let engine = Engine::new(&config).map_err(|e| ExecError::HostConfiguration(e.to_string()))?;
        let mut linker = Linker::new(&engine);
        for entry in whitelist.entries() {
            let defined = entry.namespace == HOST_NAMESPACE
                && define_host_function(&mut linker, &entry.name)
                    .map_err(|e| ExecError::HostConfiguration(e.to_string()))?;
            if !defined {
                return Err(ExecError::HostConfiguration(format!(
                    "no host implementation for {}.{}",
                    entry.namespace, entry.name
                )));
            }
        }
        let host = ExecutorHost {
            _ticker: EpochTicker::start(engine.clone()),
            engine,
            linker,
            whitelist,
            modules: Mutex::new(HashMap::new()),
        };
        for (ns, name, sig) in host.resolution_table() {
            let declared = host.whitelist.get(&ns, &name).map(|e| e.type_signature.as_str());
            if declared != Some(sig.as_str()) {
                return Err(ExecError::HostConfiguration(format!(
                    "{ns}.{name} is implemented as {sig} but declared as {declared:?}"
                )));
            }
        }
        Ok(host)
    }

    pub fn whitelist(&self) -> &Whitelist {
        &self.whitelist
    }

    /// Every `(namespace, name, signature)` the linker resolves imports to.
    pub fn resolution_table(&self) -> BTreeSet<(String, String, String)> {
        let mut store = Store::new(&self.engine, blank_state(ResourceLimits::default()));
        let externs: Vec<(String, String, Extern)> =
            self.linker.iter(&mut store).map(|(m, n, e)| (m.to_string(), n.to_string(), e)).collect();
        externs
            .into_iter()
            .map(|(m, n, e)| {
                let sig = match e {
                    Extern::Func(f) => render_func_type(&f.ty(&store)),
                    _ => "non-function".to_string(),
                };
                (m, n, sig)
            })
            .collect()
    }

    /// Drops every compiled module.
    pub fn clear_module_cache(&self) {
        self.modules.lock().expect("module cache lock").clear();
    }

    fn check_decision(&self, binary: &[u8], decision: &GateDecision) -> Result<(), ExecError> {
        if !decision.is_accept() {
            return Err(ExecError::GateNotPassed(
                decision.reason().map(|r| r.to_string()).unwrap_or_else(|| "rejected".into()),
            ));
        }
        if hash_bytes(binary) != decision.artifact_hash() {
            return Err(ExecError::GateNotPassed("binary does not match the accepted artifact".into()));
        }
        if decision.runtime_whitelist() != (self.whitelist.version(), self.whitelist.content_hash()) {
            return Err(ExecError::GateNotPassed("decision was made under a different whitelist".into()));
        }
        Ok(())
    }

    fn module(&self, artifact_hash: Digest, binary: &[u8]) -> Result<Module, ExecError> {
        let mut modules = self.modules.lock().expect("module cache lock");
        if let Some(m) = modules.get(&artifact_hash) {
            return Ok(m.clone());
        }
        let module = Module::new(&self.engine, binary).map_err(|e| ExecError::InvalidModule(e.to_string()))?;
        modules.insert(artifact_hash, module.clone());
        Ok(module)
    }

    pub fn instantiate_and_plan(
        &self,
        binary: &[u8],
        decision: &GateDecision,
        input: &ExecutorInput,
        limits: &ResourceLimits,
    ) -> Result<ExecutorOutput, ExecError> {
        self.instantiate_and_plan_timed(binary, decision, input, limits).map(|(out, _)| out)
    }

    pub fn instantiate_and_plan_timed(
        &self,
        binary: &[u8],
        decision: &GateDecision,
        input: &ExecutorInput,
        limits: &ResourceLimits,
    ) -> Result<(ExecutorOutput, PlanTimings), ExecError> {
        let started = Instant::now();
        let mut timings = PlanTimings::default();
        self.check_decision(binary, decision)?;
        limits.validate()?;

        let t = Instant::now();
        let document = input.to_document()?;
        timings.serialize = t.elapsed();

        let t = Instant::now();
        let module = self.module(decision.artifact_hash(), binary)?;
        timings.compile = t.elapsed();

        let mut state = blank_state(*limits);
        state.input = Arc::new(document);
        state.context = Arc::new(input.context.clone());
        let mut store = Store::new(&self.engine, state);
        store.limiter(|s| &mut s.limiter);
        store.set_fuel(limits.fuel).map_err(|e| ExecError::HostConfiguration(e.to_string()))?;
        store.set_epoch_deadline(limits.wall_clock.as_millis().max(1) as u64);
        store.epoch_deadline_trap();

        let t = Instant::now();
        let instance = match self.linker.instantiate(&mut store, &module) {
            Ok(i) => i,
            Err(e) => return Err(classify_error(&store, e, true)),
        };
        let plan = instance.get_typed_func::<(), i32>(&mut store, "plan").map_err(|_| ExecError::MissingExport)?;
        timings.instantiate = t.elapsed();

        let t = Instant::now();
        let code = plan.call(&mut store, ()).map_err(|e| classify_error(&store, e, false))?;
        timings.call = t.elapsed();
        if code != 0 {
            return Err(ExecError::ExecutorError(code));
        }

        let state = store.into_data();
        let output = collect_output(state)?;
        timings.total = started.elapsed();
        Ok((output, timings))
    }

    /// Runs `plan` `n` times on the same input and counts outputs that differ
    /// from the first run.
    pub fn determinism_check(
        &self,
        binary: &[u8],
        decision: &GateDecision,
        input: &ExecutorInput,
        limits: &ResourceLimits,
        n: usize,
    ) -> Result<DeterminismReport, ExecError> {
        self.check_decision(binary, decision)?;
        let mut outputs = Vec::with_capacity(n);
        let mut first_error = None;
        for _ in 0..n {
            let digest = match self.instantiate_and_plan(binary, decision, input, limits) {
                Ok(out) => hash_bytes(&out.canonical_bytes()),
                Err(e) => {
                    let d = hash_bytes(format!("error:{}", e.class()).as_bytes());
                    first_error.get_or_insert(e);
                    d
                }
            };
            outputs.push(digest);
        }
        let divergences = outputs.iter().filter(|d| Some(*d) != outputs.first()).count();
        Ok(DeterminismReport { divergences, outputs, first_error })
    }
}

fn blank_state(limits: ResourceLimits) -> HostState {
    HostState {
        input: Arc::new(Vec::new()),
        context: Arc::new(Value::Null),
        output: None,
        logs: Vec::new(),
        directives: Vec::new(),
        handles: Vec::new(),
        heap_next: 0,
        heap_end: 0,
        limiter: Limiter { memory_max: limits.memory_max, exceeded: false },
    }
}

fn classify_error(store: &Store<HostState>, err: wasmtime::Error, instantiating: bool) -> ExecError {
    if store.data().limiter.exceeded {
        return ExecError::MemoryExceeded;
    }
    if let Some(f) = err.downcast_ref::<HostFault>() {
        return match f {
            HostFault::DuplicateOutput => ExecError::MalformedOutput(f.to_string()),
            HostFault::NoMemory => ExecError::MissingExport,
            other => ExecError::Trap(other.to_string()),
        };
    }
    match err.downcast_ref::<Trap>() {
        Some(Trap::OutOfFuel) => ExecError::FuelExhausted,
        Some(Trap::Interrupt) => ExecError::Timeout,
        Some(trap) => ExecError::Trap(trap.to_string()),
        None if instantiating => ExecError::InvalidModule(format!("{err:#}")),
        None => ExecError::Trap(format!("{err:#}")),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputDocument {
    result: Value,
    #[serde(default)]
    directives: Vec<Directive>,
}

fn collect_output(state: HostState) -> Result<ExecutorOutput, ExecError> {
    let bytes = state.output.ok_or_else(|| ExecError::MalformedOutput("executor never called set_output".into()))?;
    let doc: OutputDocument =
        serde_json::from_slice(&bytes).map_err(|e| ExecError::MalformedOutput(e.to_string()))?;
    let mut directives = state.directives;
    directives.extend(doc.directives);
    let output = ExecutorOutput { result: doc.result, directives, log_lines: state.logs };
    to_canonical_bytes(&output).map_err(|e| ExecError::MalformedOutput(e.to_string()))?;
    Ok(output)
}

fn render_val_type(t: &ValType) -> String {
    match t {
        ValType::I32 => "i32".into(),
        ValType::I64 => "i64".into(),
        ValType::F32 => "f32".into(),
        ValType::F64 => "f64".into(),
        ValType::V128 => "v128".into(),
        ValType::Ref(r) => r.to_string(),
    }
}

fn render_func_type(ty: &FuncType) -> String {
    let params: Vec<String> = ty.params().map(|p| render_val_type(&p)).collect();
    let results: Vec<String> = ty.results().map(|r| render_val_type(&r)).collect();
    let results = match results.len() {
        0 => "()".to_string(),
        1 => results[0].clone(),
        _ => format!("({})", results.join(", ")),
    };
    format!("({}) -> {}", params.join(", "), results)
}

fn memory(caller: &mut Caller<'_, HostState>) -> wasmtime::Result<Memory> {
    caller.get_export("memory").and_then(Extern::into_memory).ok_or_else(|| fault(HostFault::NoMemory))
}

fn read_bytes(caller: &mut Caller<'_, HostState>, ptr: i32, len: i32) -> wasmtime::Result<Vec<u8>> {
    let mem = memory(caller)?;
    let start = ptr as u32 as usize;
    let end = start.checked_add(len as u32 as usize).ok_or_else(|| fault(HostFault::OutOfBounds))?;
    mem.data(&caller).get(start..end).map(<[u8]>::to_vec).ok_or_else(|| fault(HostFault::OutOfBounds))
}

fn read_str(caller: &mut Caller<'_, HostState>, ptr: i32, len: i32) -> wasmtime::Result<String> {
    String::from_utf8(read_bytes(caller, ptr, len)?).map_err(|_| fault(HostFault::InvalidUtf8))
}

fn read_json(caller: &mut Caller<'_, HostState>, ptr: i32, len: i32) -> wasmtime::Result<Value> {
    let bytes = read_bytes(caller, ptr, len)?;
    serde_json::from_slice(&bytes).map_err(|e| fault(HostFault::InvalidDocument(e.to_string())))
}

fn write_bytes(caller: &mut Caller<'_, HostState>, ptr: usize, bytes: &[u8]) -> wasmtime::Result<()> {
    let mem = memory(caller)?;
    mem.write(caller, ptr, bytes).map_err(|_| fault(HostFault::OutOfBounds))
}

/// Bump allocation past the guest's own memory. If the guest has grown
/// memory since the host last did, the heap restarts at the new end.
fn alloc(caller: &mut Caller<'_, HostState>, size: usize) -> wasmtime::Result<usize> {
    let mem = memory(caller)?;
    let current = mem.data_size(&caller);
    let state = caller.data_mut();
    if state.heap_end != current {
        state.heap_next = current;
        state.heap_end = current;
    }
    let start = (state.heap_next + 7) & !7;
    let end = start.checked_add(size).ok_or_else(|| fault(HostFault::AllocFailed))?;
    if end > u32::MAX as usize {
        return Err(fault(HostFault::AllocFailed));
    }
    if end > current {
        let pages = (end - current).div_ceil(PAGE) as u64;
        mem.grow(&mut *caller, pages).map_err(|_| fault(HostFault::AllocFailed))?;
    }
    let new_size = mem.data_size(&caller);
    let state = caller.data_mut();
    state.heap_next = end;
    state.heap_end = new_size;
    Ok(start)
}

fn return_bytes(caller: &mut Caller<'_, HostState>, bytes: &[u8]) -> wasmtime::Result<i64> {
    let ptr = alloc(caller, bytes.len())?;
    write_bytes(caller, ptr, bytes)?;
    Ok(((ptr as i64) << 32) | bytes.len() as i64)
}

fn return_json(caller: &mut Caller<'_, HostState>, value: Option<Value>) -> wasmtime::Result<i64> {
    match value {
        None => Ok(-1),
        Some(v) => {
            let bytes = value_to_canonical_bytes(&v).map_err(|e| fault(HostFault::InvalidDocument(e.to_string())))?;
            return_bytes(caller, &bytes)
        }
    }
}

fn new_handle(caller: &mut Caller<'_, HostState>, value: Value) -> wasmtime::Result<i32> {
    let handles = &mut caller.data_mut().handles;
    if handles.len() >= MAX_HANDLES {
        return Err(fault(HostFault::HandleLimit));
    }
    handles.push(value);
    Ok(handles.len() as i32)
}

fn handle_mut<'a>(caller: &'a mut Caller<'_, HostState>, h: i32) -> wasmtime::Result<&'a mut Value> {
    let idx = (h as usize).checked_sub(1).filter(|_| h > 0).ok_or_else(|| fault(HostFault::BadHandle(h)))?;
    caller.data_mut().handles.get_mut(idx).ok_or_else(|| fault(HostFault::BadHandle(h)))
}

fn list_mut<'a>(caller: &'a mut Caller<'_, HostState>, h: i32) -> wasmtime::Result<&'a mut Vec<Value>> {
    match handle_mut(caller, h)? {
        Value::Array(items) => Ok(items),
        _ => Err(fault(HostFault::BadHandle(h))),
    }
}

fn map_mut<'a>(
    caller: &'a mut Caller<'_, HostState>,
    h: i32,
) -> wasmtime::Result<&'a mut serde_json::Map<String, Value>> {
    match handle_mut(caller, h)? {
        Value::Object(map) => Ok(map),
        _ => Err(fault(HostFault::BadHandle(h))),
    }
}

fn push_directive(caller: &mut Caller<'_, HostState>, kind: DirectiveKind, ptr: i32, len: i32) -> wasmtime::Result<()> {
    let payload = read_json(caller, ptr, len)?;
    value_to_canonical_bytes(&payload).map_err(|e| fault(HostFault::InvalidDocument(e.to_string())))?;
    caller.data_mut().directives.push(Directive::new(kind, payload));
    Ok(())
}

fn define_directive(linker: &mut Linker<HostState>, name: &str, kind: DirectiveKind) -> wasmtime::Result<()> {
    linker.func_wrap(HOST_NAMESPACE, name, move |mut c: Caller<'_, HostState>, ptr: i32, len: i32| {
        push_directive(&mut c, kind, ptr, len)
    })?;
    Ok(())
}

type Ctx<'a> = Caller<'a, HostState>;

/// Defines the host implementation of `name`; false if there is none.
fn define_host_function(linker: &mut Linker<HostState>, name: &str) -> wasmtime::Result<bool> {
    let ns = HOST_NAMESPACE;
    if let Some(kind) = name.strip_prefix("directive_").and_then(DirectiveKind::parse) {
        define_directive(linker, name, kind)?;
        return Ok(true);
    }
    match name {
        "get_input_len" => {
            linker.func_wrap(ns, name, |c: Ctx<'_>| -> i32 { c.data().input.len() as i32 })?;
        }
        "get_input" => {
            linker.func_wrap(ns, name, |mut c: Ctx<'_>, ptr: i32| -> wasmtime::Result<()> {
                let input = c.data().input.clone();
                write_bytes(&mut c, ptr as u32 as usize, &input)
            })?;
        }
        "set_output" => {
            linker.func_wrap(ns, name, |mut c: Ctx<'_>, ptr: i32, len: i32| -> wasmtime::Result<()> {
                if c.data().output.is_some() {
                    return Err(fault(HostFault::DuplicateOutput));
                }
                let bytes = read_bytes(&mut c, ptr, len)?;
                c.data_mut().output = Some(bytes);
                Ok(())
            })?;
        }
        "log" => {
            linker.func_wrap(ns, name, |mut c: Ctx<'_>, ptr: i32, len: i32| -> wasmtime::Result<()> {
                let bytes = read_bytes(&mut c, ptr, len)?;
                c.data_mut().logs.push(String::from_utf8_lossy(&bytes).into_owned());
                Ok(())
            })?;
        }
        "mem_alloc" => {
            linker.func_wrap(ns, name, |mut c: Ctx<'_>, size: i32| -> wasmtime::Result<i32> {
                Ok(alloc(&mut c, size as u32 as usize)? as i32)
            })?;
        }
        "mem_free" => {
            linker.func_wrap(ns, name, |_c: Ctx<'_>, _ptr: i32| {})?;
        }
        "mem_copy" => {
            linker.func_wrap(ns, name, |mut c: Ctx<'_>, dst: i32, src: i32, len: i32| -> wasmtime::Result<()> {
                let bytes = read_bytes(&mut c, src, len)?;
                write_bytes(&mut c, dst as u32 as usize, &bytes)
            })?;
        }
        "str_concat" => {
            linker.func_wrap(ns, name, |mut c: Ctx<'_>, p1: i32, l1: i32, p2: i32, l2: i32| -> wasmtime::Result<i64> {
                let mut a = read_bytes(&mut c, p1, l1)?;
                a.extend(read_bytes(&mut c, p2, l2)?);
                return_bytes(&mut c, &a)
            })?;
        }
        "str_slice" => {
            linker.func_wrap(ns, name, |mut c: Ctx<'_>, p: i32, l: i32, start: i32, end: i32| -> wasmtime::Result<i64> {
                let s = read_str(&mut c, p, l)?;
                let chars: Vec<char> = s.chars().collect();
                let (start, end) = (start as u32 as usize, end as u32 as usize);
                if start > end || end > chars.len() {
                    return Err(fault(HostFault::IndexOutOfRange));
                }
                let slice: String = chars[start..end].iter().collect();
                return_bytes(&mut c, slice.as_bytes())
            })?;
        }
        "str_len" => {
            linker.func_wrap(ns, name, |mut c: Ctx<'_>, p: i32, l: i32| -> wasmtime::Result<i32> {
                Ok(read_str(&mut c, p, l)?.chars().count() as i32)
            })?;
        }
        "str_encode_utf8" => {
            linker.func_wrap(ns, name, |mut c: Ctx<'_>, p: i32, l: i32| -> wasmtime::Result<i32> {
                let bytes = read_bytes(&mut c, p, l)?;
                Ok(if std::str::from_utf8(&bytes).is_ok() { bytes.len() as i32 } else { -1 })
            })?;
        }
        "int_add" => {
            linker.func_wrap(ns, name, |_c: Ctx<'_>, a: i64, b: i64| a.wrapping_add(b))?;
        }
        "int_sub" => {
            linker.func_wrap(ns, name, |_c: Ctx<'_>, a: i64, b: i64| a.wrapping_sub(b))?;
        }
        "int_mul" => {
            linker.func_wrap(ns, name, |_c: Ctx<'_>, a: i64, b: i64| a.wrapping_mul(b))?;
        }
        "int_div" => {
            linker.func_wrap(ns, name, |_c: Ctx<'_>, a: i64, b: i64| -> wasmtime::Result<i64> {
                a.checked_div(b).ok_or_else(|| fault(HostFault::Arithmetic))
            })?;
        }
        "float_add" => {
            linker.func_wrap(ns, name, |_c: Ctx<'_>, a: f64, b: f64| a + b)?;
        }
        "float_sub" => {
            linker.func_wrap(ns, name, |_c: Ctx<'_>, a: f64, b: f64| a - b)?;
        }
        "float_mul" => {
            linker.func_wrap(ns, name, |_c: Ctx<'_>, a: f64, b: f64| a * b)?;
        }
        "float_div" => {
            linker.func_wrap(ns, name, |_c: Ctx<'_>, a: f64, b: f64| a / b)?;
        }
        "list_new" => {
            linker.func_wrap(ns, name, |mut c: Ctx<'_>| new_handle(&mut c, Value::Array(Vec::new())))?;
        }
        "list_push" => {
            linker.func_wrap(ns, name, |mut c: Ctx<'_>, h: i32, p: i32, l: i32| -> wasmtime::Result<()> {
                let v = read_json(&mut c, p, l)?;
                list_mut(&mut c, h)?.push(v);
                Ok(())
            })?;
        }
        "list_get" => {
            linker.func_wrap(ns, name, |mut c: Ctx<'_>, h: i32, i: i32| -> wasmtime::Result<i64> {
                let item = list_mut(&mut c, h)?.get(i as u32 as usize).cloned();
                if item.is_none() {
                    return Err(fault(HostFault::IndexOutOfRange));
                }
                return_json(&mut c, item)
            })?;
        }
        "list_len" => {
            linker.func_wrap(ns, name, |mut c: Ctx<'_>, h: i32| -> wasmtime::Result<i32> {
                Ok(list_mut(&mut c, h)?.len() as i32)
            })?;
        }
        "map_new" => {
            linker.func_wrap(ns, name, |mut c: Ctx<'_>| new_handle(&mut c, Value::Object(Default::default())))?;
        }
        "map_put" => {
            linker.func_wrap(
                ns,
                name,
                |mut c: Ctx<'_>, h: i32, kp: i32, kl: i32, vp: i32, vl: i32| -> wasmtime::Result<()> {
                    let k = read_str(&mut c, kp, kl)?;
                    let v = read_json(&mut c, vp, vl)?;
                    map_mut(&mut c, h)?.insert(k, v);
                    Ok(())
                },
            )?;
        }
        "map_get" => {
            linker.func_wrap(ns, name, |mut c: Ctx<'_>, h: i32, kp: i32, kl: i32| -> wasmtime::Result<i64> {
                let k = read_str(&mut c, kp, kl)?;
                let v = map_mut(&mut c, h)?.get(&k).cloned();
                return_json(&mut c, v)
            })?;
        }
        "map_keys" => {
            linker.func_wrap(ns, name, |mut c: Ctx<'_>, h: i32| -> wasmtime::Result<i64> {
                let keys: Vec<Value> = map_mut(&mut c, h)?.keys().cloned().map(Value::String).collect();
                return_json(&mut c, Some(Value::Array(keys)))
            })?;
        }
        "json_encode" => {
            linker.func_wrap(ns, name, |mut c: Ctx<'_>, h: i32| -> wasmtime::Result<i64> {
                let v = handle_mut(&mut c, h)?.clone();
                return_json(&mut c, Some(v))
            })?;
        }
        "json_decode" => {
            linker.func_wrap(ns, name, |mut c: Ctx<'_>, p: i32, l: i32| -> wasmtime::Result<i32> {
                let v = read_json(&mut c, p, l)?;
                new_handle(&mut c, v)
            })?;
        }
        "ctx_get" => {
            linker.func_wrap(ns, name, |mut c: Ctx<'_>, p: i32, l: i32| -> wasmtime::Result<i64> {
                let k = read_str(&mut c, p, l)?;
                let v = c.data().context.get(&k).cloned();
                return_json(&mut c, v)
            })?;
        }
        "ctx_get_step_output" => {
            linker.func_wrap(ns, name, |mut c: Ctx<'_>, p: i32, l: i32| -> wasmtime::Result<i64> {
                let k = read_str(&mut c, p, l)?;
                let v = c.data().context.get("step_outputs").and_then(|s| s.get(&k)).cloned();
                return_json(&mut c, v)
            })?;
        }
        "ctx_get_input" => {
            linker.func_wrap(ns, name, |mut c: Ctx<'_>| -> wasmtime::Result<i64> {
                let v = c.data().context.get("input").cloned();
                return_json(&mut c, v)
            })?;
        }
        _ => return Ok(false),
    }
    Ok(true)
}
