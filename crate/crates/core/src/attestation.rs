//! Attestation records: a purity certificate countersigned by the
//! environment that gated and ran it, plus the remote verification protocol
//! and the cross-organization compatibility predicate.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_bytes;
use crate::certificate::PurityCertificate;
use crate::gate::{has_accept, LogEvent};
use crate::hash::{hash_bytes, Digest};
use crate::keys::{KeyPair, PublicKey, Signature};
use crate::proof::{proof_hash, Conclusion, PurityProof};
use crate::whitelist::Verdict;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentDescriptor {
    pub runtime_identity: String,
    pub runtime_version: String,
    pub whitelist_version: u32,
    pub whitelist_hash: Digest,
    pub accepted_certifier_keys: BTreeSet<PublicKey>,
}

impl EnvironmentDescriptor {
    pub fn hash(&self) -> Digest {
        hash_bytes(&to_canonical_bytes(self).expect("descriptors are canonical"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttestationRecord {
    pub certificate: PurityCertificate,
    pub proof: PurityProof,
    pub env: EnvironmentDescriptor,
    pub env_signature: Signature,
    pub env_key: PublicKey,
}

/// `SHA-256(certificate) || SHA-256(proof) || SHA-256(env)`.
pub fn attestation_message(cert: &PurityCertificate, proof: &PurityProof, env: &EnvironmentDescriptor) -> [u8; 96] {
    let mut msg = [0u8; 96];
    msg[..32].copy_from_slice(cert.hash().as_bytes());
    msg[32..64].copy_from_slice(proof_hash(proof).as_bytes());
    msg[64..].copy_from_slice(env.hash().as_bytes());
    msg
}

impl AttestationRecord {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        to_canonical_bytes(self).expect("attestation records are canonical")
    }

    pub fn hash(&self) -> Digest {
        hash_bytes(&self.canonical_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }

    pub fn peer(&self) -> PeerIdentity {
        PeerIdentity {
            whitelist_hash: self.env.whitelist_hash,
            runtime_identity: self.env.runtime_identity.clone(),
            certifier_key: self.certificate.metadata.certifier_key,
            whitelist_version: self.env.whitelist_version,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AttestError {
    #[error("the local gate never accepted this certificate under the environment's whitelist")]
    GateNeverAccepted,
}

/// Countersigns `(cert, proof)` for `env`, provided `gate_log` holds an
/// accept for this artifact and certificate under `env.whitelist_hash`.
pub fn build_attestation(
    cert: &PurityCertificate,
    proof: &PurityProof,
    env: &EnvironmentDescriptor,
    env_key: &KeyPair,
    gate_log: &[LogEvent],
) -> Result<AttestationRecord, AttestError> {
    if !has_accept(gate_log, &cert.artifact_hash, &cert.hash(), &env.whitelist_hash) {
        return Err(AttestError::GateNeverAccepted);
    }
    Ok(AttestationRecord {
        certificate: cert.clone(),
        proof: proof.clone(),
        env: env.clone(),
        env_signature: env_key.sign(&attestation_message(cert, proof, env)),
        env_key: env_key.public_key(),
    })
}

/// A verifying organization's acceptance policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrgPolicy {
    pub accepted_whitelists: BTreeSet<Digest>,
    pub trusted_runtimes: BTreeSet<String>,
    pub trusted_certifiers: BTreeSet<PublicKey>,
    pub minimum_required: u32,
    pub trusted_env_keys: BTreeSet<PublicKey>,
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("policy is not valid structured text: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("minimum_required must be at least 1")]
    ZeroMinimum,
}

impl OrgPolicy {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PolicyError> {
        let policy: OrgPolicy = serde_json::from_slice(bytes)?;
        if policy.minimum_required == 0 {
            return Err(PolicyError::ZeroMinimum);
        }
        Ok(policy)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        to_canonical_bytes(self).expect("policies are canonical")
    }
}

/// The public facts about a peer that compatibility is judged on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PeerIdentity {
    pub whitelist_hash: Digest,
    pub runtime_identity: String,
    pub certifier_key: PublicKey,
    pub whitelist_version: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompatibilityReport {
    pub whitelist_accepted: bool,
    pub runtime_trusted: bool,
    pub certifier_trusted: bool,
    pub version_sufficient: bool,
}

impl CompatibilityReport {
    pub fn compatible(&self) -> bool {
        self.whitelist_accepted && self.runtime_trusted && self.certifier_trusted && self.version_sufficient
    }

    pub fn failing(&self) -> Vec<&'static str> {
        [
            (self.whitelist_accepted, "whitelist_accepted"),
            (self.runtime_trusted, "runtime_trusted"),
            (self.certifier_trusted, "certifier_trusted"),
            (self.version_sufficient, "version_sufficient"),
        ]
        .into_iter()
        .filter(|(ok, _)| !ok)
        .map(|(_, name)| name)
        .collect()
    }
}

impl fmt::Display for CompatibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.compatible() {
            f.write_str("compatible")
        } else {
            write!(f, "incompatible: {}", self.failing().join(", "))
        }
    }
}

/// Evaluates the four compatibility conjuncts from the evaluator's policy
/// and the peer's public identity alone.
pub fn is_compatible(peer: &PeerIdentity, policy: &OrgPolicy) -> CompatibilityReport {
    CompatibilityReport {
        whitelist_accepted: policy.accepted_whitelists.contains(&peer.whitelist_hash),
        runtime_trusted: policy.trusted_runtimes.contains(&peer.runtime_identity),
        certifier_trusted: policy.trusted_certifiers.contains(&peer.certifier_key),
        version_sufficient: peer.whitelist_version >= policy.minimum_required,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, thiserror::Error)]
#[serde(tag = "code", content = "detail", rename_all = "snake_case")]
pub enum AttestationRejection {
    #[error("environment key is not trusted")]
    UntrustedEnvironmentKey,
    #[error("environment signature is invalid")]
    InvalidEnvironmentSignature,
    #[error("certificate signature is invalid")]
    InvalidCertificateSignature,
    #[error("certifier is not accepted by the attesting environment")]
    CertifierNotAcceptedByEnvironment,
    #[error("proof hash mismatch")]
    ProofHashMismatch,
    #[error("certificate, proof and environment disagree on the whitelist")]
    WhitelistMismatch,
    #[error("proof is inconsistent")]
    MalformedProof,
    #[error("disallowed import: {0}")]
    DisallowedImport(String),
    #[error("proof conclusion is not pure")]
    ConclusionNotPure,
    #[error("{0}")]
    Incompatible(CompatibilityReport),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum AttestationVerdict {
    Accept,
    Reject { step: u8, reason: AttestationRejection },
}

impl AttestationVerdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, AttestationVerdict::Accept)
    }

    pub fn step(&self) -> Option<u8> {
        match self {
            AttestationVerdict::Accept => None,
            AttestationVerdict::Reject { step, .. } => Some(*step),
        }
    }
}

/// Remote verification: trust, environment signature, certificate, policy.
pub fn verify_attestation(record: &AttestationRecord, policy: &OrgPolicy) -> AttestationVerdict {
    let reject = |step, reason| AttestationVerdict::Reject { step, reason };

    // 1. Trust establishment
    if !policy.trusted_env_keys.contains(&record.env_key) {
        return reject(1, AttestationRejection::UntrustedEnvironmentKey);
    }

    // 2. Environment signature
    let msg = attestation_message(&record.certificate, &record.proof, &record.env);
    if !record.env_key.verify(&msg, &record.env_signature) {
        return reject(2, AttestationRejection::InvalidEnvironmentSignature);
    }

    // 3. Certificate, without the binary
    if let Err(reason) = verify_certificate_remotely(record) {
        return reject(3, reason);
    }

    // 4. Environment policy
    let report = is_compatible(&record.peer(), policy);
    if !report.compatible() {
        return reject(4, AttestationRejection::Incompatible(report));
    }
    AttestationVerdict::Accept
}

fn verify_certificate_remotely(record: &AttestationRecord) -> Result<(), AttestationRejection> {
    let cert = &record.certificate;
    let proof = &record.proof;
    let env = &record.env;
    if !cert.metadata.certifier_key.verify(&cert.signing_message(), &cert.signature) {
        return Err(AttestationRejection::InvalidCertificateSignature);
    }
    if !env.accepted_certifier_keys.contains(&cert.metadata.certifier_key) {
        return Err(AttestationRejection::CertifierNotAcceptedByEnvironment);
    }
    if proof_hash(proof) != cert.proof_hash {
        return Err(AttestationRejection::ProofHashMismatch);
    }
    let pinned = cert.metadata.whitelist_version == proof.whitelist_version
        && cert.metadata.whitelist_hash == proof.whitelist_hash;
    let current = proof.whitelist_version < env.whitelist_version
        || (proof.whitelist_version == env.whitelist_version && proof.whitelist_hash == env.whitelist_hash);
    if !pinned || !current {
        return Err(AttestationRejection::WhitelistMismatch);
    }
    if !proof.is_well_formed() {
        return Err(AttestationRejection::MalformedProof);
    }
    if let Some(c) = proof.classifications.iter().find(|c| c.verdict == Verdict::Disallowed) {
        return Err(AttestationRejection::DisallowedImport(c.import.qualified_name()));
    }
    if proof.conclusion != Conclusion::Pure {
        return Err(AttestationRejection::ConclusionNotPure);
    }
    Ok(())
}
