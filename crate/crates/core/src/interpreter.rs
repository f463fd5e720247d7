//! Directive interpreter: the only place an effect happens.
//!
//! A step resolves its executor, enforces the tier policy, passes certified
//! executors through the gate, runs `plan`, then drives every returned
//! directive through trust → permission → phase → pre_hooks → execute →
//! guardrails → record. Effects are simulated into an in-process
//! [`EffectSink`] whose `perform` is private to this module.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::canonical::{to_canonical_bytes, value_to_canonical_bytes};
use crate::certificate::PurityCertificate;
use crate::gate::{Gate, RejectReason};
use crate::hash::{hash_bytes, Digest};
use crate::proof::PurityProof;
use crate::provenance::{ChainBuilder, ProvenanceError, PurityMethod, RunRecord, StepRecord};
use crate::runtime_host::{Directive, DirectiveKind, ExecError, ExecutorHost, ExecutorInput, ExecutorOutput, ResourceLimits};

/// Verification tiers, weakest first so that `Ord` ranks trust.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Tier3Unchecked,
    Tier2StaticAnalysis,
    Tier1WasmCertified,
}

impl Tier {
    pub fn purity_method(self) -> PurityMethod {
        match self {
            Tier::Tier1WasmCertified => PurityMethod::WasmCertified,
            Tier::Tier2StaticAnalysis => PurityMethod::BeamStaticAnalysis,
            Tier::Tier3Unchecked => PurityMethod::BeamUnchecked,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Tier1WasmCertified => "tier1_wasm_certified",
            Tier::Tier2StaticAnalysis => "tier2_static_analysis",
            Tier::Tier3Unchecked => "tier3_unchecked",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TierPolicy {
    pub minimum_tier: Tier,
    /// Per executor-class minimums, keyed by class name.
    pub overrides: BTreeMap<String, Tier>,
}

impl TierPolicy {
    pub fn require(minimum_tier: Tier) -> Self {
        TierPolicy { minimum_tier, overrides: BTreeMap::new() }
    }

    pub fn minimum_for(&self, class: &str) -> Tier {
        self.overrides.get(class).copied().unwrap_or(self.minimum_tier)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Trust,
    Permission,
    Phase,
    PreHooks,
    Execute,
    Guardrails,
    Record,
}

impl Stage {
    pub const PRE_EXECUTE: [Stage; 4] = [Stage::Trust, Stage::Permission, Stage::Phase, Stage::PreHooks];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Trust => "trust",
            Stage::Permission => "permission",
            Stage::Phase => "phase",
            Stage::PreHooks => "pre_hooks",
            Stage::Execute => "execute",
            Stage::Guardrails => "guardrails",
            Stage::Record => "record",
        })
    }
}

/// A pre-execute predicate over the directive and the run context.
pub type Check = Arc<dyn Fn(&Directive, &Value) -> Result<(), String> + Send + Sync>;
/// A post-execute predicate over the directive and the effect's result.
pub type Guardrail = Arc<dyn Fn(&Directive, &Value) -> Result<(), String> + Send + Sync>;

#[derive(Clone, Default)]
pub struct GovernanceContext {
    checks: BTreeMap<Stage, Vec<(String, Check)>>,
    guardrails: Vec<(String, Guardrail)>,
}

impl fmt::Debug for GovernanceContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: BTreeMap<_, Vec<_>> =
            self.checks.iter().map(|(s, cs)| (s, cs.iter().map(|(n, _)| n.as_str()).collect())).collect();
        f.debug_struct("GovernanceContext")
            .field("checks", &names)
            .field("guardrails", &self.guardrails.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>())
            .finish()
    }
}

impl GovernanceContext {
    /// Every stage passes.
    pub fn permissive() -> Self {
        Self::default()
    }

    /// Allow-all plus one permission rule: `http_request` directives must
    /// target a host in `allowed_hosts`.
    pub fn with_http_allowlist<I, S>(allowed_hosts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let hosts: Vec<String> = allowed_hosts.into_iter().map(Into::into).collect();
        Self::permissive().check(Stage::Permission, "http_host_allowlist", move |d, _| {
            if d.kind != DirectiveKind::HttpRequest {
                return Ok(());
            }
            let raw = d.payload.get("url").and_then(Value::as_str).ok_or("http_request without url")?;
            let url = url::Url::parse(raw).map_err(|e| format!("bad url {raw}: {e}"))?;
            let host = url.host_str().ok_or_else(|| format!("url {raw} has no host"))?;
            if hosts.iter().any(|h| h == host) {
                Ok(())
            } else {
                Err(format!("host {host} is not allowlisted"))
            }
        })
    }

    /// Adds a pre-execute check. Panics for `execute`, `guardrails` and
    /// `record`, which are not predicate stages.
    pub fn check<F>(mut self, stage: Stage, name: &str, f: F) -> Self
    where
        F: Fn(&Directive, &Value) -> Result<(), String> + Send + Sync + 'static,
    {
        assert!(Stage::PRE_EXECUTE.contains(&stage), "{stage} does not take predicates");
        self.checks.entry(stage).or_default().push((name.to_owned(), Arc::new(f)));
        self
    }

    pub fn guardrail<F>(mut self, name: &str, f: F) -> Self
    where
        F: Fn(&Directive, &Value) -> Result<(), String> + Send + Sync + 'static,
    {
        self.guardrails.push((name.to_owned(), Arc::new(f)));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub stage: Stage,
    pub check: String,
    pub passed: bool,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Executed,
    ExecutedFlagged,
    Denied,
}

/// Governance trail of one directive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectiveGovernance {
    pub directive_hash: Digest,
    pub kind: DirectiveKind,
    pub checks: Vec<CheckOutcome>,
    pub disposition: Disposition,
    /// Sequence number of the sink entry, when executed.
    pub effect_seq: Option<u64>,
}

/// The document hashed into a step's `governance_hash`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GovernanceDocument {
    pub step_index: u64,
    pub executor: String,
    pub tier: Tier,
    /// Id of the gate decision that admitted the executor.
    pub gate_decision: Option<Digest>,
    pub certificate_hash: Option<Digest>,
    pub directives: Vec<DirectiveGovernance>,
    pub executor_error: Option<String>,
}

impl GovernanceDocument {
    pub fn hash(&self) -> Digest {
        hash_bytes(&to_canonical_bytes(self).expect("governance documents are canonical"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DirectiveOutcome {
    Governed { result: Value, flags: Vec<String> },
    Denied { stage: Stage, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectEntry {
    pub seq: u64,
    pub step_index: u64,
    pub kind: DirectiveKind,
    pub directive_hash: Digest,
    pub result: Value,
}

/// Simulated effect log. Only this module can append to it.
#[derive(Debug, Default)]
pub struct EffectSink {
    entries: Mutex<Vec<EffectEntry>>,
}

impl EffectSink {
    pub fn entries(&self) -> Vec<EffectEntry> {
        self.entries.lock().expect("sink lock").clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("sink lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn perform(&self, step_index: u64, directive: &Directive, directive_hash: Digest) -> (u64, Value) {
        let mut entries = self.entries.lock().expect("sink lock");
        let seq = entries.len() as u64 + 1;
        let result = json!({
            "simulated": directive.kind.as_str(),
            "directive_hash": directive_hash.to_hex(),
            "seq": seq,
        });
        entries.push(EffectEntry { seq, step_index, kind: directive.kind, directive_hash, result: result.clone() });
        (seq, result)
    }
}

type NativeFn = Arc<dyn Fn(&ExecutorInput) -> Result<ExecutorOutput, String> + Send + Sync>;

#[derive(Clone)]
pub enum ExecutorBundle {
    Wasm { binary: Arc<Vec<u8>>, cert: PurityCertificate, proof: PurityProof, class: String },
    /// In-process executor for tests; it can only claim tier 2 or 3.
    Native { tier: Tier, class: String, plan: NativeFn },
}

impl ExecutorBundle {
    fn tier(&self) -> Tier {
        match self {
            ExecutorBundle::Wasm { .. } => Tier::Tier1WasmCertified,
            ExecutorBundle::Native { tier, .. } => *tier,
        }
    }

    fn class(&self) -> &str {
        match self {
            ExecutorBundle::Wasm { class, .. } | ExecutorBundle::Native { class, .. } => class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub name: String,
    pub executor_ref: String,
    pub config: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Machine {
    pub name: String,
    pub version: String,
    pub steps: Vec<Step>,
}

impl Machine {
    pub fn version_hash(&self) -> Digest {
        hash_bytes(&to_canonical_bytes(self).expect("machines are canonical"))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StepError {
    #[error("unknown executor {0}")]
    UnknownExecutor(String),
    #[error("Executor rejected: {0}")]
    ExecutorRejected(RejectReason),
    #[error("executor tier {actual} is below the required {required}")]
    TierBelowMinimum { required: Tier, actual: Tier },
    #[error("native executors cannot claim {0}")]
    InvalidNativeTier(Tier),
    #[error("executor failed ({}): {error}", .error.class())]
    Execution { error: ExecError, step_record: Box<StepRecord> },
    #[error("native executor failed: {0}")]
    Native(String),
    #[error("step config or context is not canonical: {0}")]
    Encoding(String),
    #[error(transparent)]
    Provenance(#[from] ProvenanceError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub results: Vec<DirectiveOutcome>,
    pub output: ExecutorOutput,
    pub step_record: StepRecord,
    pub governance: GovernanceDocument,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub steps: Vec<StepOutcome>,
    pub output: Value,
}

fn digest_of(value: &impl Serialize) -> Result<Digest, StepError> {
    to_canonical_bytes(value).map(|b| hash_bytes(&b)).map_err(|e| StepError::Encoding(e.to_string()))
}

pub struct Interpreter {
    gate: Arc<Gate>,
    host: Arc<ExecutorHost>,
    executors: BTreeMap<String, ExecutorBundle>,
    sink: EffectSink,
    limits: ResourceLimits,
}

impl fmt::Debug for Interpreter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Interpreter")
            .field("executors", &self.executors.keys().collect::<Vec<_>>())
            .field("effects", &self.sink.len())
            .finish_non_exhaustive()
    }
}

impl Interpreter {
    pub fn new(gate: Arc<Gate>, host: Arc<ExecutorHost>) -> Self {
        Interpreter { gate, host, executors: BTreeMap::new(), sink: EffectSink::default(), limits: ResourceLimits::default() }
    }

    pub fn with_limits(mut self, limits: ResourceLimits) -> Self {
        self.limits = limits;
        self
    }

    pub fn gate(&self) -> &Gate {
        &self.gate
    }

    pub fn sink(&self) -> &EffectSink {
        &self.sink
    }

    pub fn register_wasm(&mut self, name: &str, binary: Vec<u8>, cert: PurityCertificate, proof: PurityProof) {
        self.executors.insert(
            name.to_owned(),
            ExecutorBundle::Wasm { binary: Arc::new(binary), cert, proof, class: name.to_owned() },
        );
    }

    pub fn register_native<F>(&mut self, name: &str, tier: Tier, plan: F) -> Result<(), StepError>
    where
        F: Fn(&ExecutorInput) -> Result<ExecutorOutput, String> + Send + Sync + 'static,
    {
        if tier == Tier::Tier1WasmCertified {
            return Err(StepError::InvalidNativeTier(tier));
        }
        self.executors
            .insert(name.to_owned(), ExecutorBundle::Native { tier, class: name.to_owned(), plan: Arc::new(plan) });
        Ok(())
    }

    /// Runs the governance stages for one directive.
    pub fn interpret_directive(
        &self,
        directive: &Directive,
        context: &Value,
        governance: &GovernanceContext,
        step_index: u64,
    ) -> (DirectiveOutcome, DirectiveGovernance) {
        let directive_hash = hash_bytes(&directive.canonical_bytes());
        let mut trail = DirectiveGovernance {
            directive_hash,
            kind: directive.kind,
            checks: Vec::new(),
            disposition: Disposition::Denied,
            effect_seq: None,
        };
        for stage in Stage::PRE_EXECUTE {
            for (name, check) in governance.checks.get(&stage).into_iter().flatten() {
                let verdict = check(directive, context);
                trail.checks.push(CheckOutcome {
                    stage,
                    check: name.clone(),
                    passed: verdict.is_ok(),
                    reason: verdict.as_ref().err().cloned(),
                });
                if let Err(reason) = verdict {
                    return (DirectiveOutcome::Denied { stage, reason }, trail);
                }
            }
        }

        let (seq, result) = self.sink.perform(step_index, directive, directive_hash);
        trail.effect_seq = Some(seq);

        let mut flags = Vec::new();
        for (name, guard) in &governance.guardrails {
            let verdict = guard(directive, &result);
            trail.checks.push(CheckOutcome {
                stage: Stage::Guardrails,
                check: name.clone(),
                passed: verdict.is_ok(),
                reason: verdict.as_ref().err().cloned(),
            });
            if let Err(reason) = verdict {
                flags.push(format!("{name}: {reason}"));
            }
        }
        trail.disposition = if flags.is_empty() { Disposition::Executed } else { Disposition::ExecutedFlagged };
        (DirectiveOutcome::Governed { result, flags }, trail)
    }

    /// Executes one step and appends its record to `chain`.
    pub fn execute_step(
        &self,
        step: &Step,
        context: &Value,
        governance: &GovernanceContext,
        tier_policy: &TierPolicy,
        chain: &mut ChainBuilder,
    ) -> Result<StepOutcome, StepError> {
        let bundle = self.executors.get(&step.executor_ref).ok_or_else(|| StepError::UnknownExecutor(step.executor_ref.clone()))?;
        let tier = bundle.tier();
        let required = tier_policy.minimum_for(bundle.class());
        if tier < required {
            return Err(StepError::TierBelowMinimum { required, actual: tier });
        }
        let step_index = chain.steps().len() as u64 + 1;
        let input = ExecutorInput::new(step.config.clone(), context.clone());
        value_to_canonical_bytes(&step.config).map_err(|e| StepError::Encoding(e.to_string()))?;

        let mut doc = GovernanceDocument {
            step_index,
            executor: step.executor_ref.clone(),
            tier,
            gate_decision: None,
            certificate_hash: None,
            directives: Vec::new(),
            executor_error: None,
        };

        let (output, purity_cert_hash) = match bundle {
            ExecutorBundle::Wasm { binary, cert, proof, .. } => {
                let decision = self.gate.verify(binary, cert, proof);
                if let Some(reason) = decision.reason() {
                    return Err(StepError::ExecutorRejected(reason.clone()));
                }
                doc.gate_decision = Some(decision.id());
                doc.certificate_hash = Some(decision.certificate_hash());
                match self.host.instantiate_and_plan(binary, &decision, &input, &self.limits) {
                    Ok(output) => (output, decision.certificate_hash()),
                    Err(error) => {
                        doc.executor_error = Some(error.class().to_owned());
                        let failure = json!({"error": {"class": error.class(), "detail": error.to_string()}});
                        let record = chain
                            .append_step(
                                digest_of(&Vec::<Directive>::new())?,
                                doc.hash(),
                                digest_of(&failure)?,
                                decision.certificate_hash(),
                                PurityMethod::WasmCertified,
                            )?
                            .clone();
                        return Err(StepError::Execution { error, step_record: Box::new(record) });
                    }
                }
            }
            ExecutorBundle::Native { plan, .. } => {
                let output = plan(&input).map_err(StepError::Native)?;
                (output, tier.purity_method().marker_digest().expect("native tiers carry a marker"))
            }
        };

        let mut results = Vec::with_capacity(output.directives.len());
        for directive in &output.directives {
            let (outcome, trail) = self.interpret_directive(directive, context, governance, step_index);
            results.push(outcome);
            doc.directives.push(trail);
        }

        let step_result = json!({"result": output.result, "effects": results});
        let step_record = chain
            .append_step(
                digest_of(&output.directives)?,
                doc.hash(),
                digest_of(&step_result)?,
                purity_cert_hash,
                tier.purity_method(),
            )?
            .clone();
        Ok(StepOutcome { results, output, step_record, governance: doc })
    }

    /// Runs every step in order, threading prior results through the
    /// context, and seals the chain.
    pub fn run_machine(
        &self,
        machine: &Machine,
        input: &Value,
        governance: &GovernanceContext,
        tier_policy: &TierPolicy,
    ) -> Result<RunOutcome, StepError> {
        let mut chain = ChainBuilder::new();
        let mut step_outputs = serde_json::Map::new();
        let mut steps = Vec::with_capacity(machine.steps.len());
        for step in &machine.steps {
            let context = json!({"input": input, "machine": machine.name, "step_outputs": step_outputs});
            let outcome = self.execute_step(step, &context, governance, tier_policy, &mut chain)?;
            step_outputs.insert(step.name.clone(), outcome.output.result.clone());
            steps.push(outcome);
        }
        let output = Value::Object(step_outputs);
        let record = chain.finalize_run(machine.version_hash(), digest_of(input)?, digest_of(&output)?)?;
        Ok(RunOutcome { record, steps, output })
    }
}
