//! Purity proofs: the import list, its classification, and the conclusion,
//! pinned to the whitelist version and hash they were derived under.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_bytes;
use crate::hash::{hash_bytes, Digest};
use crate::wasm_inspect::{parse_imports, ImportRecord, MalformedBinary, ModuleImports};
use crate::whitelist::{classify_import, Classification, Verdict, Whitelist};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conclusion {
    Pure,
    Impure,
}

impl fmt::Display for Conclusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Conclusion::Pure => "pure",
            Conclusion::Impure => "impure",
        })
    }
}

/// A structural purity proof. The proof file is exactly its canonical form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PurityProof {
    pub imports: Vec<ImportRecord>,
    pub classifications: Vec<Classification>,
    pub conclusion: Conclusion,
    pub whitelist_version: u32,
    pub whitelist_hash: Digest,
}

#[derive(Debug, thiserror::Error)]
pub enum ProofError {
    #[error("proof is not valid structured text: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Why a proof does not describe a given binary.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProofMismatch {
    #[error("import mismatch between proof and binary")]
    ImportMismatch,
    #[error("malformed binary: {0}")]
    MalformedBinary(#[from] MalformedBinary),
}

/// Classifies every import of `module` and concludes. Impure input is a
/// normal outcome here; refusal happens at certification or at the gate.
pub fn build_proof(module: &ModuleImports, whitelist: &Whitelist) -> PurityProof {
    let classifications: Vec<Classification> =
        module.imports.iter().map(|import| classify_import(import, whitelist)).collect();
    let conclusion = conclude(&classifications);
    PurityProof {
        imports: module.imports.clone(),
        classifications,
        conclusion,
        whitelist_version: whitelist.version(),
        whitelist_hash: whitelist.content_hash(),
    }
}

fn conclude(classifications: &[Classification]) -> Conclusion {
    if classifications.iter().all(|c| c.verdict.is_pure()) {
        Conclusion::Pure
    } else {
        Conclusion::Impure
    }
}

impl PurityProof {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        to_canonical_bytes(self).expect("proofs contain only strings and integers")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProofError> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn disallowed(&self) -> impl Iterator<Item = &ImportRecord> {
        self.classifications.iter().filter(|c| c.verdict == Verdict::Disallowed).map(|c| &c.import)
    }

    /// Internal consistency: classifications index-aligned with imports and
    /// the conclusion matching the verdicts.
    pub fn is_well_formed(&self) -> bool {
        self.classifications.len() == self.imports.len()
            && self.classifications.iter().zip(&self.imports).all(|(c, i)| &c.import == i)
            && self.conclusion == conclude(&self.classifications)
    }
}

/// SHA-256 of the canonical proof serialization.
pub fn proof_hash(proof: &PurityProof) -> Digest {
    hash_bytes(&proof.canonical_bytes())
}

/// Re-parses `binary` and requires its import list to equal the proof's,
/// order included.
pub fn validate_proof_against_binary(proof: &PurityProof, binary: &[u8]) -> Result<(), ProofMismatch> {
    let parsed = parse_imports(binary)?;
    if parsed.imports != proof.imports {
        return Err(ProofMismatch::ImportMismatch);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wasm_inspect::parse_imports;

    const CALL_IMPORTS: &str = r#"
        (import "mashin" "get_input_len" (func (result i32)))
        (import "mashin" "get_input" (func (param i32)))
        (import "mashin" "set_output" (func (param i32 i32)))
        (import "mashin" "log" (func (param i32 i32)))"#;

    fn module(imports: &str) -> Vec<u8> {
        wat::parse_str(format!("(module {imports})")).unwrap()
    }

    #[test]
    fn four_import_fixture_is_pure() {
        let bin = module(CALL_IMPORTS);
        let proof = build_proof(&parse_imports(&bin).unwrap(), &Whitelist::default_v1());
        assert_eq!(proof.conclusion, Conclusion::Pure);
        let verdicts: Vec<_> = proof.classifications.iter().map(|c| c.verdict).collect();
        assert_eq!(verdicts, [Verdict::PureData, Verdict::PureData, Verdict::PureDirective, Verdict::PureData]);
        assert!(proof.is_well_formed());
        assert_eq!(validate_proof_against_binary(&proof, &bin), Ok(()));
    }

    #[test]
    fn empty_imports_are_vacuously_pure() {
        let proof = build_proof(&parse_imports(&module("")).unwrap(), &Whitelist::default_v1());
        assert_eq!(proof.conclusion, Conclusion::Pure);
        assert!(proof.classifications.is_empty());
    }

    #[test]
    fn wasi_import_is_impure() {
        let bin = module(r#"(import "wasi_snapshot_preview1" "fd_write" (func (param i32 i32 i32 i32) (result i32)))"#);
        let proof = build_proof(&parse_imports(&bin).unwrap(), &Whitelist::default_v1());
        assert_eq!(proof.conclusion, Conclusion::Impure);
        assert_eq!(proof.classifications[0].verdict, Verdict::Disallowed);
        assert_eq!(proof.disallowed().count(), 1);
    }

    #[test]
    fn hash_is_deterministic_and_sensitive_to_conclusion() {
        let bin = module(CALL_IMPORTS);
        let w = Whitelist::default_v1();
        let a = build_proof(&parse_imports(&bin).unwrap(), &w);
        let b = build_proof(&parse_imports(&bin).unwrap(), &w);
        assert_eq!(proof_hash(&a), proof_hash(&b));
        let mut flipped = a.clone();
        flipped.conclusion = Conclusion::Impure;
        assert_ne!(proof_hash(&a), proof_hash(&flipped));
    }

    #[test]
    fn canonical_bytes_round_trip() {
        let proof = build_proof(&parse_imports(&module(CALL_IMPORTS)).unwrap(), &Whitelist::default_v1());
        let bytes = proof.canonical_bytes();
        let back = PurityProof::from_bytes(&bytes).unwrap();
        assert_eq!(back, proof);
        assert_eq!(back.canonical_bytes(), bytes);
    }

    #[test]
    fn mismatches_are_detected() {
        let w = Whitelist::default_v1();
        let a = module(CALL_IMPORTS);
        let b = module(&format!(r#"{CALL_IMPORTS} (import "mashin" "extra" (func))"#));
        let proof = build_proof(&parse_imports(&a).unwrap(), &w);
        assert_eq!(validate_proof_against_binary(&proof, &b), Err(ProofMismatch::ImportMismatch));

        let mut reordered = proof.clone();
        reordered.imports.swap(0, 1);
        assert_eq!(validate_proof_against_binary(&reordered, &a), Err(ProofMismatch::ImportMismatch));

        assert!(matches!(
            validate_proof_against_binary(&proof, b"junk"),
            Err(ProofMismatch::MalformedBinary(_))
        ));
    }
}
