//! The execution hash chain extended with purity certificate hashes.
//!
//! ```text
//! execution_hash_vp(s_i) = SHA-256(directive_hash || governance_hash || result_hash
//!                                  || purity_cert_hash || execution_hash_vp(s_{i-1}))
//! run_hash_vp = SHA-256(machine_version_hash || input_hash || execution_hash_vp(s_n) || output_hash)
//! ```
//!
//! Digests are concatenated as raw 32-byte values; the genesis predecessor
//! is 32 zero bytes. Steps not run by a certified executor carry the digest
//! of their tier marker as `purity_cert_hash`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_bytes;
use crate::hash::{hash_bytes, hash_concat, Digest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PurityMethod {
    WasmCertified,
    BeamStaticAnalysis,
    BeamUnchecked,
}

impl PurityMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PurityMethod::WasmCertified => "wasm_certified",
            PurityMethod::BeamStaticAnalysis => "beam_static_analysis",
            PurityMethod::BeamUnchecked => "beam_unchecked",
        }
    }

    /// The `purity_cert_hash` a step of this tier must carry, if fixed.
    pub fn marker_digest(self) -> Option<Digest> {
        match self {
            PurityMethod::WasmCertified => None,
            other => Some(hash_bytes(format!("purecert/purity_method/{}", other.as_str()).as_bytes())),
        }
    }

    fn admits(self, purity_cert_hash: &Digest) -> bool {
        match self.marker_digest() {
            Some(marker) => &marker == purity_cert_hash,
            None => [PurityMethod::BeamStaticAnalysis, PurityMethod::BeamUnchecked]
                .iter()
                .all(|m| m.marker_digest().as_ref() != Some(purity_cert_hash)),
        }
    }
}

impl fmt::Display for PurityMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub step_index: u64,
    pub directive_hash: Digest,
    pub governance_hash: Digest,
    pub result_hash: Digest,
    pub purity_cert_hash: Digest,
    pub purity_method: PurityMethod,
    pub execution_hash_vp: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub machine_version_hash: Digest,
    pub input_hash: Digest,
    pub final_execution_hash: Digest,
    pub output_hash: Digest,
    pub run_hash_vp: Digest,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProvenanceError {
    #[error("chain already finalized")]
    ChainFinalized,
    #[error("cannot finalize an empty chain")]
    EmptyChain,
    #[error("purity_cert_hash does not match the {0} tier marker")]
    MarkerMismatch(PurityMethod),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", content = "at", rename_all = "snake_case")]
pub enum ChainVerdict {
    Valid,
    /// 1-based position of the first step that does not verify.
    InvalidStep(u64),
    InvalidRunHash,
}

impl ChainVerdict {
    pub fn is_valid(self) -> bool {
        self == ChainVerdict::Valid
    }
}

impl fmt::Display for ChainVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainVerdict::Valid => f.write_str("valid"),
            ChainVerdict::InvalidStep(i) => write!(f, "invalid at step {i}"),
            ChainVerdict::InvalidRunHash => f.write_str("invalid run hash"),
        }
    }
}

pub fn execution_hash(
    directive_hash: &Digest,
    governance_hash: &Digest,
    result_hash: &Digest,
    purity_cert_hash: &Digest,
    previous: &Digest,
) -> Digest {
    hash_concat(&[directive_hash, governance_hash, result_hash, purity_cert_hash, previous])
}

pub fn run_hash(machine_version_hash: &Digest, input_hash: &Digest, final_execution_hash: &Digest, output_hash: &Digest) -> Digest {
    hash_concat(&[machine_version_hash, input_hash, final_execution_hash, output_hash])
}

pub fn cross_org_hash(caller_run_hash: &Digest, callee_attestation_hash: &Digest, callee_run_hash: &Digest) -> Digest {
    hash_concat(&[caller_run_hash, callee_attestation_hash, callee_run_hash])
}

/// A chain in progress, owned by one run.
#[derive(Debug, Clone, Default)]
pub struct ChainBuilder {
    steps: Vec<StepRecord>,
    sealed: bool,
}

impl ChainBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn head(&self) -> Digest {
        self.steps.last().map(|s| s.execution_hash_vp).unwrap_or(Digest::ZERO)
    }

    pub fn append_step(
        &mut self,
        directive_hash: Digest,
        governance_hash: Digest,
        result_hash: Digest,
        purity_cert_hash: Digest,
        purity_method: PurityMethod,
    ) -> Result<&StepRecord, ProvenanceError> {
        if self.sealed {
            return Err(ProvenanceError::ChainFinalized);
        }
        if !purity_method.admits(&purity_cert_hash) {
            return Err(ProvenanceError::MarkerMismatch(purity_method));
        }
        let execution_hash_vp =
            execution_hash(&directive_hash, &governance_hash, &result_hash, &purity_cert_hash, &self.head());
        self.steps.push(StepRecord {
            step_index: self.steps.len() as u64 + 1,
            directive_hash,
            governance_hash,
            result_hash,
            purity_cert_hash,
            purity_method,
            execution_hash_vp,
        });
        Ok(self.steps.last().expect("just pushed"))
    }

    pub fn finalize_run(
        &mut self,
        machine_version_hash: Digest,
        input_hash: Digest,
        output_hash: Digest,
    ) -> Result<RunRecord, ProvenanceError> {
        if self.sealed {
            return Err(ProvenanceError::ChainFinalized);
        }
        if self.steps.is_empty() {
            return Err(ProvenanceError::EmptyChain);
        }
        self.sealed = true;
        let final_execution_hash = self.head();
        Ok(RunRecord {
            machine_version_hash,
            input_hash,
            final_execution_hash,
            output_hash,
            run_hash_vp: run_hash(&machine_version_hash, &input_hash, &final_execution_hash, &output_hash),
            steps: self.steps.clone(),
        })
    }
}

/// Recomputes every link and the run hash; reports the first mismatch.
pub fn verify_chain(record: &RunRecord) -> ChainVerdict {
    let mut previous = Digest::ZERO;
    for (i, step) in record.steps.iter().enumerate() {
        let position = i as u64 + 1;
        let recomputed = execution_hash(
            &step.directive_hash,
            &step.governance_hash,
            &step.result_hash,
            &step.purity_cert_hash,
            &previous,
        );
        if step.step_index != position || !step.purity_method.admits(&step.purity_cert_hash) || recomputed != step.execution_hash_vp {
            return ChainVerdict::InvalidStep(position);
        }
        previous = recomputed;
    }
    if record.steps.is_empty() || record.final_execution_hash != previous {
        return ChainVerdict::InvalidRunHash;
    }
    let expected = run_hash(&record.machine_version_hash, &record.input_hash, &previous, &record.output_hash);
    if expected != record.run_hash_vp {
        return ChainVerdict::InvalidRunHash;
    }
    ChainVerdict::Valid
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ChainLine {
    Step(StepRecord),
    Run {
        machine_version_hash: Digest,
        input_hash: Digest,
        final_execution_hash: Digest,
        output_hash: Digest,
        run_hash_vp: Digest,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum ChainFileError {
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("chain file has no sealed run record")]
    Unsealed,
    #[error("line {0}: records after the run record")]
    TrailingRecords(usize),
}

/// Line-delimited chain file: one line per step, then the sealed run record.
pub fn write_chain_file(record: &RunRecord) -> Vec<u8> {
    let mut out = Vec::new();
    for step in &record.steps {
        out.extend(to_canonical_bytes(&ChainLine::Step(step.clone())).expect("steps are canonical"));
        out.push(b'\n');
    }
    let run = ChainLine::Run {
        machine_version_hash: record.machine_version_hash,
        input_hash: record.input_hash,
        final_execution_hash: record.final_execution_hash,
        output_hash: record.output_hash,
        run_hash_vp: record.run_hash_vp,
    };
    out.extend(to_canonical_bytes(&run).expect("run records are canonical"));
    out.push(b'\n');
    out
}

pub fn read_chain_file(bytes: &[u8]) -> Result<RunRecord, ChainFileError> {
    let text = String::from_utf8_lossy(bytes);
    let mut steps = Vec::new();
    let mut sealed = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if sealed.is_some() {
            return Err(ChainFileError::TrailingRecords(i + 1));
        }
        match serde_json::from_str(line).map_err(|source| ChainFileError::Parse { line: i + 1, source })? {
            ChainLine::Step(step) => steps.push(step),
            ChainLine::Run { machine_version_hash, input_hash, final_execution_hash, output_hash, run_hash_vp } => {
                sealed = Some((machine_version_hash, input_hash, final_execution_hash, output_hash, run_hash_vp));
            }
        }
    }
    let (machine_version_hash, input_hash, final_execution_hash, output_hash, run_hash_vp) =
        sealed.ok_or(ChainFileError::Unsealed)?;
    Ok(RunRecord { machine_version_hash, input_hash, final_execution_hash, output_hash, run_hash_vp, steps })
}
