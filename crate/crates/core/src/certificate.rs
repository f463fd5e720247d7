//! Purity certificates: an Ed25519 signature binding an artifact hash to a
//! proof hash, plus certifier and whitelist metadata.

use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_bytes;
use crate::hash::{hash_bytes, Digest};
use crate::keys::{KeyPair, PublicKey, Signature, TrustSet};
use crate::proof::{proof_hash, validate_proof_against_binary, Conclusion, PurityProof};

pub const CERTIFICATE_FORMAT_VERSION: u32 = 1;

/// Upper bound on a serialized certificate.
pub const CERTIFICATE_SIZE_BUDGET: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateMetadata {
    pub certifier_key: PublicKey,
    /// UTC seconds since the epoch.
    pub timestamp: u64,
    pub whitelist_version: u32,
    pub whitelist_hash: Digest,
    pub format_version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PurityCertificate {
    pub artifact_hash: Digest,
    pub proof_hash: Digest,
    pub signature: Signature,
    pub metadata: CertificateMetadata,
}

#[derive(Debug, thiserror::Error)]
pub enum CertifyError {
    #[error("disallowed imports found: {}", .0.join(", "))]
    RefuseImpure(Vec<String>),
    #[error("proof does not match binary: {0}")]
    ProofBinaryMismatch(#[from] crate::proof::ProofMismatch),
}

#[derive(Debug, thiserror::Error)]
pub enum CertificateParseError {
    #[error("certificate is not valid structured text: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported certificate format version {0}")]
    UnsupportedFormat(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum SignatureRejection {
    #[error("certifier key is not trusted")]
    UntrustedCertifier,
    #[error("invalid signature")]
    InvalidSignature,
}

/// The 64-byte message a certificate signs: `artifact_hash || proof_hash`.
pub fn signing_message(artifact_hash: &Digest, proof_hash: &Digest) -> [u8; 64] {
    let mut msg = [0u8; 64];
    msg[..32].copy_from_slice(artifact_hash.as_bytes());
    msg[32..].copy_from_slice(proof_hash.as_bytes());
    msg
}

impl PurityCertificate {
    /// Signs a certificate for `artifact_hash` and `proof` without any purity
    /// or binding checks. [`sign_certificate`] is the checked entry point; this
    /// exists so adversarial certificates can be produced and shown to fail
    /// the gate.
    pub fn sign_unchecked(artifact_hash: Digest, proof: &PurityProof, key: &KeyPair, now: u64) -> Self {
        let proof_hash = proof_hash(proof);
        PurityCertificate {
            artifact_hash,
            proof_hash,
            signature: key.sign(&signing_message(&artifact_hash, &proof_hash)),
            metadata: CertificateMetadata {
                certifier_key: key.public_key(),
                timestamp: now,
                whitelist_version: proof.whitelist_version,
                whitelist_hash: proof.whitelist_hash,
                format_version: CERTIFICATE_FORMAT_VERSION,
            },
        }
    }

    pub fn signing_message(&self) -> [u8; 64] {
        signing_message(&self.artifact_hash, &self.proof_hash)
    }

    /// Canonical serialization; this is also the certificate file content.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        to_canonical_bytes(self).expect("certificates contain only strings and integers")
    }

    /// SHA-256 of the canonical certificate (the provenance `purity_cert_hash`).
    pub fn hash(&self) -> Digest {
        hash_bytes(&self.canonical_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CertificateParseError> {
        let cert: PurityCertificate = serde_json::from_slice(bytes)?;
        if cert.metadata.format_version != CERTIFICATE_FORMAT_VERSION {
            return Err(CertificateParseError::UnsupportedFormat(cert.metadata.format_version));
        }
        Ok(cert)
    }
}

/// Certifies a pure proof that matches `binary`.
pub fn sign_certificate(
    binary: &[u8],
    proof: &PurityProof,
    key: &KeyPair,
    now: u64,
) -> Result<PurityCertificate, CertifyError> {
    if proof.conclusion != Conclusion::Pure || proof.disallowed().next().is_some() {
        return Err(CertifyError::RefuseImpure(proof.disallowed().map(|i| i.qualified_name()).collect()));
    }
    validate_proof_against_binary(proof, binary)?;
    Ok(PurityCertificate::sign_unchecked(hash_bytes(binary), proof, key, now))
}

/// Trust first, then signature math over the certificate's own hashes.
pub fn verify_certificate_signature(cert: &PurityCertificate, trusted: &TrustSet) -> Result<(), SignatureRejection> {
    if !trusted.contains(&cert.metadata.certifier_key) {
        return Err(SignatureRejection::UntrustedCertifier);
    }
    if !cert.metadata.certifier_key.verify(&cert.signing_message(), &cert.signature) {
        return Err(SignatureRejection::InvalidSignature);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proof::build_proof;
    use crate::wasm_inspect::parse_imports;
    use crate::whitelist::Whitelist;

    fn pure_fixture() -> Vec<u8> {
        wat::parse_str(
            r#"(module
                (import "mashin" "get_input_len" (func (result i32)))
                (import "mashin" "get_input" (func (param i32)))
                (import "mashin" "set_output" (func (param i32 i32)))
                (import "mashin" "log" (func (param i32 i32))))"#,
        )
        .unwrap()
    }

    fn certify(bin: &[u8], key: &KeyPair) -> (PurityProof, PurityCertificate) {
        let proof = build_proof(&parse_imports(bin).unwrap(), &Whitelist::default_v1());
        let cert = sign_certificate(bin, &proof, key, 1_700_000_000).unwrap();
        (proof, cert)
    }

    #[test]
    fn certificate_fits_budget_and_round_trips() {
        let key = KeyPair::from_seed(&[1u8; 32]);
        let bin = pure_fixture();
        let (proof, cert) = certify(&bin, &key);
        let bytes = cert.canonical_bytes();
        assert!(bytes.len() <= CERTIFICATE_SIZE_BUDGET, "{} bytes", bytes.len());
        assert_eq!(PurityCertificate::from_bytes(&bytes).unwrap(), cert);
        assert_eq!(cert.artifact_hash, hash_bytes(&bin));
        assert_eq!(cert.proof_hash, proof_hash(&proof));
        assert_eq!(cert.metadata.format_version, 1);
    }

    #[test]
    fn signing_is_deterministic() {
        let key = KeyPair::from_seed(&[1u8; 32]);
        let bin = pure_fixture();
        assert_eq!(certify(&bin, &key).1.canonical_bytes(), certify(&bin, &key).1.canonical_bytes());
    }

    #[test]
    fn impure_proofs_are_refused() {
        let bin = wat::parse_str(r#"(module (import "wasi_snapshot_preview1" "fd_write" (func (param i32 i32 i32 i32) (result i32))))"#).unwrap();
        let proof = build_proof(&parse_imports(&bin).unwrap(), &Whitelist::default_v1());
        match sign_certificate(&bin, &proof, &KeyPair::from_seed(&[1u8; 32]), 0) {
            Err(CertifyError::RefuseImpure(names)) => assert_eq!(names, ["wasi_snapshot_preview1.fd_write"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn proof_for_another_binary_is_refused() {
        let bin = pure_fixture();
        let proof = build_proof(&parse_imports(&bin).unwrap(), &Whitelist::default_v1());
        let other = wat::parse_str("(module)").unwrap();
        assert!(matches!(
            sign_certificate(&other, &proof, &KeyPair::from_seed(&[1u8; 32]), 0),
            Err(CertifyError::ProofBinaryMismatch(_))
        ));
    }

    #[test]
    fn signature_verification_cases() {
        let a = KeyPair::from_seed(&[1u8; 32]);
        let b = KeyPair::from_seed(&[2u8; 32]);
        let (_, cert) = certify(&pure_fixture(), &a);
        let trust_a = TrustSet::from([a.public_key()]);
        let trust_b = TrustSet::from([b.public_key()]);
        assert_eq!(verify_certificate_signature(&cert, &trust_a), Ok(()));
        assert_eq!(verify_certificate_signature(&cert, &trust_b), Err(SignatureRejection::UntrustedCertifier));
        let mut flipped = cert.clone();
        flipped.signature = cert.signature.with_bit_flipped(77);
        assert_eq!(verify_certificate_signature(&flipped, &trust_a), Err(SignatureRejection::InvalidSignature));
    }

    #[test]
    fn unsupported_format_version() {
        let (_, mut cert) = certify(&pure_fixture(), &KeyPair::from_seed(&[1u8; 32]));
        cert.metadata.format_version = 2;
        assert!(matches!(
            PurityCertificate::from_bytes(&cert.canonical_bytes()),
            Err(CertificateParseError::UnsupportedFormat(2))
        ));
    }
}
