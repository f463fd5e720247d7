//! The runtime verification gate.
//!
//! Six checks run in a fixed order and the first failure short-circuits:
//!
//! 1. certifier trust and Ed25519 signature over `artifact_hash || proof_hash`
//! 2. artifact binding: `SHA-256(binary) == cert.artifact_hash`
//! 3. proof binding: `SHA-256(canonical proof) == cert.proof_hash`
//! 4. independent import extraction, equal to `proof.imports`
//! 5. re-classification against the runtime whitelist, then whitelist currency
//! 6. `proof.conclusion == pure`
//!
//! Accepted artifacts are cached by artifact hash together with the
//! whitelist snapshot and trust set they were decided under, so a snapshot
//! change can never produce a stale hit. Every decision, accept or reject,
//! is appended to a [`DecisionLog`].

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_bytes;
use crate::certificate::{verify_certificate_signature, PurityCertificate, SignatureRejection};
use crate::hash::{hash_bytes, Digest};
use crate::keys::TrustSet;
use crate::proof::{proof_hash, Conclusion, PurityProof};
use crate::wasm_inspect::parse_imports;
use crate::whitelist::{check_version_range, classify_import, CurrencyRejection, RuntimeWhitelist, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateVerdict {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail", rename_all = "snake_case")]
pub enum RejectReason {
    UntrustedCertifier,
    InvalidSignature,
    ArtifactHashMismatch,
    ProofHashMismatch,
    ImportMismatch,
    MalformedBinary(String),
    DisallowedImport(String),
    StaleOrUnknownWhitelist(CurrencyRejection),
    ConclusionNotPure,
}

impl RejectReason {
    /// The gate step (1-6) this reason belongs to.
    pub fn step(&self) -> u8 {
        match self {
            RejectReason::UntrustedCertifier | RejectReason::InvalidSignature => 1,
            RejectReason::ArtifactHashMismatch => 2,
            RejectReason::ProofHashMismatch => 3,
            RejectReason::ImportMismatch | RejectReason::MalformedBinary(_) => 4,
            RejectReason::DisallowedImport(_) | RejectReason::StaleOrUnknownWhitelist(_) => 5,
            RejectReason::ConclusionNotPure => 6,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::UntrustedCertifier => "untrusted_certifier",
            RejectReason::InvalidSignature => "invalid_signature",
            RejectReason::ArtifactHashMismatch => "artifact_hash_mismatch",
            RejectReason::ProofHashMismatch => "proof_hash_mismatch",
            RejectReason::ImportMismatch => "import_mismatch",
            RejectReason::MalformedBinary(_) => "malformed_binary",
            RejectReason::DisallowedImport(_) => "disallowed_import",
            RejectReason::StaleOrUnknownWhitelist(_) => "stale_or_unknown_whitelist",
            RejectReason::ConclusionNotPure => "conclusion_not_pure",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::UntrustedCertifier => f.write_str("untrusted certifier"),
            RejectReason::InvalidSignature => f.write_str("invalid signature"),
            RejectReason::ArtifactHashMismatch => f.write_str("artifact hash mismatch"),
            RejectReason::ProofHashMismatch => f.write_str("proof hash mismatch"),
            RejectReason::ImportMismatch => f.write_str("import mismatch between proof and binary"),
            RejectReason::MalformedBinary(detail) => write!(f, "malformed binary: {detail}"),
            RejectReason::DisallowedImport(name) => write!(f, "disallowed import: {name}"),
            RejectReason::StaleOrUnknownWhitelist(why) => write!(f, "stale or unknown whitelist: {why}"),
            RejectReason::ConclusionNotPure => f.write_str("proof conclusion is not pure"),
        }
    }
}

impl From<SignatureRejection> for RejectReason {
    fn from(r: SignatureRejection) -> Self {
        match r {
            SignatureRejection::UntrustedCertifier => RejectReason::UntrustedCertifier,
            SignatureRejection::InvalidSignature => RejectReason::InvalidSignature,
        }
    }
}

/// Outcome of one gate evaluation.
///
/// Only this module can construct one, which is what lets the runtime host
/// demand a decision as its admission ticket.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GateDecision {
    verdict: GateVerdict,
    reason: Option<RejectReason>,
    failed_step: Option<u8>,
    from_cache: bool,
    artifact_hash: Digest,
    certificate_hash: Digest,
    runtime_whitelist_version: u32,
    runtime_whitelist_hash: Digest,
    decided_at: u64,
    elapsed_ns: u64,
}

impl GateDecision {
    pub fn verdict(&self) -> GateVerdict {
        self.verdict
    }

    pub fn is_accept(&self) -> bool {
        self.verdict == GateVerdict::Accept
    }

    pub fn reason(&self) -> Option<&RejectReason> {
        self.reason.as_ref()
    }

    pub fn failed_step(&self) -> Option<u8> {
        self.failed_step
    }

    pub fn from_cache(&self) -> bool {
        self.from_cache
    }

    pub fn artifact_hash(&self) -> Digest {
        self.artifact_hash
    }

    /// SHA-256 of the certificate the gate was shown.
    pub fn certificate_hash(&self) -> Digest {
        self.certificate_hash
    }

    pub fn runtime_whitelist(&self) -> (u32, Digest) {
        (self.runtime_whitelist_version, self.runtime_whitelist_hash)
    }

    pub fn decided_at(&self) -> u64 {
        self.decided_at
    }

    pub fn elapsed_us(&self) -> f64 {
        self.elapsed_ns as f64 / 1000.0
    }

    /// Stable identifier: hash of the decision without its timing.
    pub fn id(&self) -> Digest {
        self.record().decision_id
    }

    pub fn record(&self) -> DecisionRecord {
        let mut record = DecisionRecord {
            decision_id: Digest::ZERO,
            decided_at: self.decided_at,
            artifact_hash: self.artifact_hash,
            certificate_hash: self.certificate_hash,
            verdict: self.verdict,
            reason: self.reason.clone(),
            failed_step: self.failed_step,
            from_cache: self.from_cache,
            whitelist_version: self.runtime_whitelist_version,
            whitelist_hash: self.runtime_whitelist_hash,
        };
        record.decision_id = hash_bytes(&to_canonical_bytes(&record).expect("decision records are canonical"));
        record
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct CacheEntry {
    whitelist_version: u32,
    whitelist_hash: Digest,
    trust_fingerprint: Digest,
    certificate_hash: Digest,
    decided_at: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    /// Ed25519 verifications performed by the gate.
    pub signature_checks: u64,
}

/// Acceptance cache keyed by artifact hash.
#[derive(Debug, Default)]
pub struct GateCache {
    accepted: RwLock<HashMap<Digest, CacheEntry>>,
    hits: AtomicU64,
    misses: AtomicU64,
    signature_checks: AtomicU64,
}

impl GateCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.accepted.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, artifact_hash: &Digest) -> bool {
        self.accepted.read().expect("cache lock").contains_key(artifact_hash)
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            signature_checks: self.signature_checks.load(Ordering::Relaxed),
        }
    }

    fn clear(&self) {
        self.accepted.write().expect("cache lock").clear();
    }

    fn lookup(&self, artifact_hash: &Digest, policy: &PolicySnapshot, certificate_hash: &Digest) -> Option<u64> {
        let map = self.accepted.read().expect("cache lock");
        let entry = map.get(artifact_hash)?;
        let current = policy.whitelist.current();
        let valid = entry.whitelist_version == current.version()
            && entry.whitelist_hash == current.content_hash()
            && entry.trust_fingerprint == policy.trust_fingerprint
            && &entry.certificate_hash == certificate_hash;
        valid.then_some(entry.decided_at)
    }

    fn insert(&self, artifact_hash: Digest, entry: CacheEntry) {
        self.accepted.write().expect("cache lock").insert(artifact_hash, entry);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidationCause {
    WhitelistChanged,
    KeysRotated,
    Manual,
}

/// One logged decision. `decision_id` is the hash of the record's canonical
/// form with `decision_id` zeroed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRecord {
    pub decision_id: Digest,
    pub decided_at: u64,
    pub artifact_hash: Digest,
    pub certificate_hash: Digest,
    pub verdict: GateVerdict,
    pub reason: Option<RejectReason>,
    pub failed_step: Option<u8>,
    pub from_cache: bool,
    pub whitelist_version: u32,
    pub whitelist_hash: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Decision(DecisionRecord),
    CacheInvalidated { cause: InvalidationCause, at: u64 },
}

#[derive(Debug, thiserror::Error)]
pub enum DecisionLogError {
    #[error("decision log {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("decision log {path} line {line}: {source}")]
    Parse { path: String, line: usize, source: serde_json::Error },
}

/// Append-only record of gate decisions and cache invalidations, optionally
/// mirrored to a line-delimited file.
#[derive(Debug, Default)]
pub struct DecisionLog {
    events: Mutex<Vec<LogEvent>>,
    sink: Option<Mutex<File>>,
}

impl DecisionLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a log file, loading its existing events.
    pub fn open(path: &Path) -> Result<Self, DecisionLogError> {
        let events = if path.exists() { Self::load(path)? } else { Vec::new() };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| DecisionLogError::Io { path: path.display().to_string(), source })?;
        Ok(DecisionLog { events: Mutex::new(events), sink: Some(Mutex::new(file)) })
    }

    pub fn load(path: &Path) -> Result<Vec<LogEvent>, DecisionLogError> {
        let display = path.display().to_string();
        let file = File::open(path).map_err(|source| DecisionLogError::Io { path: display.clone(), source })?;
        let mut events = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| DecisionLogError::Io { path: display.clone(), source })?;
            if line.trim().is_empty() {
                continue;
            }
            let event = serde_json::from_str(&line)
                .map_err(|source| DecisionLogError::Parse { path: display.clone(), line: i + 1, source })?;
            events.push(event);
        }
        Ok(events)
    }

    pub fn append(&self, event: LogEvent) {
        let mut events = self.events.lock().expect("log lock");
        if let Some(sink) = &self.sink {
            let mut line = to_canonical_bytes(&event).expect("log events are canonical");
            line.push(b'\n');
            // The in-memory log stays authoritative if the mirror write fails.
            let _ = sink.lock().expect("sink lock").write_all(&line);
        }
        events.push(event);
    }

    pub fn events(&self) -> Vec<LogEvent> {
        self.events.lock().expect("log lock").clone()
    }

    pub fn decisions(&self) -> Vec<DecisionRecord> {
        self.events()
            .into_iter()
            .filter_map(|e| match e {
                LogEvent::Decision(d) => Some(d),
                LogEvent::CacheInvalidated { .. } => None,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.events.lock().expect("log lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Whether `events` contain an accept for this artifact and certificate
/// under the runtime whitelist `whitelist_hash`.
pub fn has_accept(events: &[LogEvent], artifact_hash: &Digest, certificate_hash: &Digest, whitelist_hash: &Digest) -> bool {
    events.iter().any(|e| {
        matches!(e, LogEvent::Decision(d)
            if d.verdict == GateVerdict::Accept
                && &d.artifact_hash == artifact_hash
                && &d.certificate_hash == certificate_hash
                && &d.whitelist_hash == whitelist_hash)
    })
}

/// What the gate enforces: the runtime whitelist snapshot and trusted
/// certifier keys.
#[derive(Debug, Clone)]
pub struct GatePolicy {
    pub whitelist: RuntimeWhitelist,
    pub trusted_keys: TrustSet,
}

#[derive(Debug)]
struct PolicySnapshot {
    whitelist: RuntimeWhitelist,
    trusted_keys: TrustSet,
    trust_fingerprint: Digest,
}

impl PolicySnapshot {
    fn new(policy: GatePolicy) -> Self {
        let mut buf = Vec::with_capacity(policy.trusted_keys.len() * 32);
        for key in &policy.trusted_keys {
            buf.extend_from_slice(key.as_bytes());
        }
        PolicySnapshot {
            trust_fingerprint: hash_bytes(&buf),
            whitelist: policy.whitelist,
            trusted_keys: policy.trusted_keys,
        }
    }
}

/// Single-shot gate evaluation against an explicit policy and cache.
pub fn gate_verify(
    binary: &[u8],
    cert: &PurityCertificate,
    proof: &PurityProof,
    policy: &GatePolicy,
    cache: &GateCache,
    now: u64,
) -> GateDecision {
    evaluate(binary, cert, proof, &PolicySnapshot::new(policy.clone()), cache, now)
}

fn evaluate(
    binary: &[u8],
    cert: &PurityCertificate,
    proof: &PurityProof,
    policy: &PolicySnapshot,
    cache: &GateCache,
    now: u64,
) -> GateDecision {
    let started = Instant::now();
    let artifact_hash = hash_bytes(binary);
    let certificate_hash = cert.hash();
    let current = policy.whitelist.current();
    let mut decision = GateDecision {
        verdict: GateVerdict::Accept,
        reason: None,
        failed_step: None,
        from_cache: false,
        artifact_hash,
        certificate_hash,
        runtime_whitelist_version: current.version(),
        runtime_whitelist_hash: current.content_hash(),
        decided_at: now,
        elapsed_ns: 0,
    };

    if cache.lookup(&artifact_hash, policy, &certificate_hash).is_some() {
        cache.hits.fetch_add(1, Ordering::Relaxed);
        decision.from_cache = true;
        decision.elapsed_ns = started.elapsed().as_nanos() as u64;
        return decision;
    }
    cache.misses.fetch_add(1, Ordering::Relaxed);

    match run_checks(binary, &artifact_hash, cert, proof, policy, cache) {
        Ok(()) => {
            cache.insert(
                artifact_hash,
                CacheEntry {
                    whitelist_version: current.version(),
                    whitelist_hash: current.content_hash(),
                    trust_fingerprint: policy.trust_fingerprint,
                    certificate_hash,
                    decided_at: now,
                },
            );
        }
        Err(reason) => {
            decision.verdict = GateVerdict::Reject;
            decision.failed_step = Some(reason.step());
            decision.reason = Some(reason);
        }
    }
    decision.elapsed_ns = started.elapsed().as_nanos() as u64;
    decision
}

fn run_checks(
    binary: &[u8],
    artifact_hash: &Digest,
    cert: &PurityCertificate,
    proof: &PurityProof,
    policy: &PolicySnapshot,
    cache: &GateCache,
) -> Result<(), RejectReason> {
    // 1. Signature
    cache.signature_checks.fetch_add(1, Ordering::Relaxed);
    verify_certificate_signature(cert, &policy.trusted_keys)?;

    // 2. Artifact binding
    if artifact_hash != &cert.artifact_hash {
        return Err(RejectReason::ArtifactHashMismatch);
    }

    // 3. Proof binding
    if proof_hash(proof) != cert.proof_hash {
        return Err(RejectReason::ProofHashMismatch);
    }

    // 4. Independent import extraction
    let parsed = parse_imports(binary).map_err(|e| RejectReason::MalformedBinary(e.to_string()))?;
    let aligned = proof.classifications.len() == proof.imports.len()
        && proof.classifications.iter().zip(&proof.imports).all(|(c, i)| &c.import == i);
    if parsed.imports != proof.imports || !aligned {
        return Err(RejectReason::ImportMismatch);
    }

    // 5. Classification against the runtime whitelist, then currency
    let current = policy.whitelist.current();
    for import in &parsed.imports {
        if classify_import(import, current).verdict == Verdict::Disallowed {
            return Err(RejectReason::DisallowedImport(import.qualified_name()));
        }
    }
    if cert.metadata.whitelist_version != proof.whitelist_version || cert.metadata.whitelist_hash != proof.whitelist_hash {
        return Err(RejectReason::StaleOrUnknownWhitelist(CurrencyRejection::UnknownWhitelistHash {
            version: cert.metadata.whitelist_version,
        }));
    }
    check_version_range(proof.whitelist_version, &proof.whitelist_hash, &policy.whitelist)
        .map_err(RejectReason::StaleOrUnknownWhitelist)?;

    // 6. Conclusion
    if proof.conclusion != Conclusion::Pure {
        return Err(RejectReason::ConclusionNotPure);
    }
    Ok(())
}

pub(crate) fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// A long-lived gate: policy snapshot, acceptance cache and decision log.
///
/// Policy replacement swaps an immutable snapshot; evaluations already in
/// flight finish against the snapshot they started with.
#[derive(Debug)]
pub struct Gate {
    policy: RwLock<Arc<PolicySnapshot>>,
    cache: GateCache,
    log: DecisionLog,
}

impl Gate {
    pub fn new(policy: GatePolicy) -> Self {
        Self::with_log(policy, DecisionLog::in_memory())
    }

    pub fn with_log(policy: GatePolicy, log: DecisionLog) -> Self {
        Gate { policy: RwLock::new(Arc::new(PolicySnapshot::new(policy))), cache: GateCache::new(), log }
    }

    fn snapshot(&self) -> Arc<PolicySnapshot> {
        self.policy.read().expect("policy lock").clone()
    }

    pub fn runtime_whitelist(&self) -> RuntimeWhitelist {
        self.snapshot().whitelist.clone()
    }

    pub fn trusted_keys(&self) -> TrustSet {
        self.snapshot().trusted_keys.clone()
    }

    pub fn cache(&self) -> &GateCache {
        &self.cache
    }

    pub fn log(&self) -> &DecisionLog {
        &self.log
    }

    pub fn verify(&self, binary: &[u8], cert: &PurityCertificate, proof: &PurityProof) -> GateDecision {
        self.verify_at(binary, cert, proof, unix_now())
    }

    pub fn verify_at(&self, binary: &[u8], cert: &PurityCertificate, proof: &PurityProof, now: u64) -> GateDecision {
        let snapshot = self.snapshot();
        let decision = evaluate(binary, cert, proof, &snapshot, &self.cache, now);
        self.log.append(LogEvent::Decision(decision.record()));
        decision
    }

    /// Empties the cache and records why.
    pub fn invalidate_cache(&self, cause: InvalidationCause) {
        self.cache.clear();
        self.log.append(LogEvent::CacheInvalidated { cause, at: unix_now() });
    }

    pub fn replace_whitelist(&self, whitelist: RuntimeWhitelist) {
        let mut guard = self.policy.write().expect("policy lock");
        let changed = guard.whitelist != whitelist;
        let trusted_keys = guard.trusted_keys.clone();
        *guard = Arc::new(PolicySnapshot::new(GatePolicy { whitelist, trusted_keys }));
        drop(guard);
        if changed {
            self.invalidate_cache(InvalidationCause::WhitelistChanged);
        }
    }

    pub fn replace_trusted_keys(&self, trusted_keys: TrustSet) {
        let mut guard = self.policy.write().expect("policy lock");
        let changed = guard.trusted_keys != trusted_keys;
        let whitelist = guard.whitelist.clone();
        *guard = Arc::new(PolicySnapshot::new(GatePolicy { whitelist, trusted_keys }));
        drop(guard);
        if changed {
            self.invalidate_cache(InvalidationCause::KeysRotated);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificate::sign_certificate;
    use crate::keys::KeyPair;
    use crate::proof::build_proof;
    use crate::whitelist::{Whitelist, WhitelistEntry};

    const CALL: &str = r#"(module
        (import "mashin" "get_input_len" (func (result i32)))
        (import "mashin" "get_input" (func (param i32)))
        (import "mashin" "set_output" (func (param i32 i32)))
        (import "mashin" "log" (func (param i32 i32)))
        (func (export "plan") (result i32) i32.const 0))"#;

    struct Setup {
        key: KeyPair,
        binary: Vec<u8>,
        proof: PurityProof,
        cert: PurityCertificate,
        policy: GatePolicy,
    }

    fn setup() -> Setup {
        let key = KeyPair::from_seed(&[3u8; 32]);
        let binary = wat::parse_str(CALL).unwrap();
        let w = Whitelist::default_v1();
        let proof = build_proof(&parse_imports(&binary).unwrap(), &w);
        let cert = sign_certificate(&binary, &proof, &key, 100).unwrap();
        let policy = GatePolicy { whitelist: RuntimeWhitelist::new(w, 1), trusted_keys: TrustSet::from([key.public_key()]) };
        Setup { key, binary, proof, cert, policy }
    }

    #[test]
    fn accept_then_cached() {
        let s = setup();
        let gate = Gate::new(s.policy);
        let first = gate.verify_at(&s.binary, &s.cert, &s.proof, 1);
        assert!(first.is_accept());
        assert!(!first.from_cache());
        assert_eq!(first.reason(), None);
        assert_eq!(first.failed_step(), None);
        let second = gate.verify_at(&s.binary, &s.cert, &s.proof, 2);
        assert!(second.is_accept() && second.from_cache());
        assert_eq!(gate.cache().stats().signature_checks, 1);
        assert_eq!(gate.log().decisions().len(), 2);
    }

    #[test]
    fn flipped_payload_byte_fails_artifact_binding() {
        let s = setup();
        let mut tampered = s.binary.clone();
        let last = tampered.len() - 1;
        tampered[last] ^= 0x01;
        let d = Gate::new(s.policy).verify_at(&tampered, &s.cert, &s.proof, 1);
        assert_eq!(d.reason(), Some(&RejectReason::ArtifactHashMismatch));
        assert_eq!(d.failed_step(), Some(2));
    }

    #[test]
    fn shrunk_whitelist_rejects_at_step_five() {
        let s = setup();
        let v1 = Whitelist::default_v1();
        let shrunk = Whitelist::new(2, v1.entries().filter(|e| e.name != "log").cloned()).unwrap();
        let policy = GatePolicy {
            whitelist: RuntimeWhitelist::new(shrunk, 1).with_history(1, v1.content_hash()),
            trusted_keys: s.policy.trusted_keys.clone(),
        };
        let d = Gate::new(policy).verify_at(&s.binary, &s.cert, &s.proof, 1);
        assert_eq!(d.reason(), Some(&RejectReason::DisallowedImport("mashin.log".into())));
        assert_eq!(d.failed_step(), Some(5));
    }

    #[test]
    fn forged_certificate_from_untrusted_key_fails_step_one() {
        let s = setup();
        let mallory = KeyPair::from_seed(&[66u8; 32]);
        let forged = sign_certificate(&s.binary, &s.proof, &mallory, 100).unwrap();
        let d = Gate::new(s.policy).verify_at(&s.binary, &forged, &s.proof, 1);
        assert_eq!(d.reason(), Some(&RejectReason::UntrustedCertifier));
        assert_eq!(d.failed_step(), Some(1));
    }

    #[test]
    fn invalidation_clears_cache_and_is_logged() {
        let s = setup();
        let gate = Gate::new(s.policy);
        assert!(gate.verify_at(&s.binary, &s.cert, &s.proof, 1).is_accept());
        assert_eq!(gate.cache().len(), 1);
        gate.invalidate_cache(InvalidationCause::WhitelistChanged);
        assert!(gate.cache().is_empty());
        gate.invalidate_cache(InvalidationCause::Manual);
        assert!(gate.cache().is_empty());
        assert!(!gate.verify_at(&s.binary, &s.cert, &s.proof, 2).from_cache());
        let invalidations = gate.log().events().iter().filter(|e| matches!(e, LogEvent::CacheInvalidated { .. })).count();
        assert_eq!(invalidations, 2);
    }

    #[test]
    fn snapshot_change_misses_cache_even_without_explicit_invalidation() {
        let s = setup();
        let gate = Gate::new(s.policy.clone());
        assert!(gate.verify_at(&s.binary, &s.cert, &s.proof, 1).is_accept());
        // Grow the whitelist; the old entry's snapshot no longer matches.
        let v1 = Whitelist::default_v1();
        let mut entries: Vec<_> = v1.entries().cloned().collect();
        entries.push(WhitelistEntry::new("mashin", "extra", crate::whitelist::HostClass::PureData, "() -> ()"));
        let v2 = Whitelist::new(2, entries).unwrap();
        let rt = RuntimeWhitelist::new(v2, 1).with_history(1, v1.content_hash());
        let cache = GateCache::new();
        let d1 = gate_verify(&s.binary, &s.cert, &s.proof, &s.policy, &cache, 1);
        assert!(d1.is_accept() && !d1.from_cache());
        let grown = GatePolicy { whitelist: rt, trusted_keys: s.policy.trusted_keys.clone() };
        let d2 = gate_verify(&s.binary, &s.cert, &s.proof, &grown, &cache, 2);
        assert!(d2.is_accept() && !d2.from_cache());

        gate.replace_trusted_keys(TrustSet::from([s.key.public_key(), KeyPair::from_seed(&[5u8; 32]).public_key()]));
        assert!(gate.cache().is_empty());
    }

    #[test]
    fn decision_log_file_round_trip() {
        let s = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decisions.log");
        {
            let gate = Gate::with_log(s.policy.clone(), DecisionLog::open(&path).unwrap());
            gate.verify_at(&s.binary, &s.cert, &s.proof, 7);
        }
        let events = DecisionLog::load(&path).unwrap();
        assert_eq!(events.len(), 1);
        let wl = s.policy.whitelist.current().content_hash();
        assert!(has_accept(&events, &hash_bytes(&s.binary), &s.cert.hash(), &wl));
        assert!(!has_accept(&events, &hash_bytes(b"other"), &s.cert.hash(), &wl));
        // Reopening keeps history.
        let reopened = DecisionLog::open(&path).unwrap();
        assert_eq!(reopened.len(), 1);
    }

    #[test]
    fn decision_ids_are_stable() {
        let s = setup();
        let a = gate_verify(&s.binary, &s.cert, &s.proof, &s.policy, &GateCache::new(), 5);
        let b = gate_verify(&s.binary, &s.cert, &s.proof, &s.policy, &GateCache::new(), 5);
        assert_eq!(a.id(), b.id());
        let c = gate_verify(&s.binary, &s.cert, &s.proof, &s.policy, &GateCache::new(), 6);
        assert_ne!(a.id(), c.id());
    }
}
