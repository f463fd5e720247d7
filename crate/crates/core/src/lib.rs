//! Certified-purity toolchain for WebAssembly executors.
//!
//! An executor binary is inspected ([`wasm_inspect`]), its imports are
//! classified against a host-function [`whitelist`] into a [`proof`], and the
//! proof is bound to the binary by a signed [`certificate`]. The [`gate`]
//! re-derives everything before [`runtime_host`] will run the executor, the
//! [`interpreter`] is the only place directives turn into effects, and
//! [`provenance`] and [`attestation`] carry the evidence onward.

pub mod attestation;
pub mod bench;
pub mod canonical;
pub mod certificate;
pub mod fixtures;
pub mod gate;
pub mod hash;
pub mod interpreter;
pub mod keys;
pub mod proof;
pub mod provenance;
pub mod runtime_host;
pub mod wasm_inspect;
pub mod whitelist;

pub use certificate::{sign_certificate, PurityCertificate};
pub use gate::{gate_verify, Gate, GateDecision, GatePolicy, RejectReason};
pub use hash::{hash_bytes, Digest};
pub use keys::{KeyPair, PublicKey, Signature, TrustSet};
pub use proof::{build_proof, proof_hash, PurityProof};
pub use runtime_host::{ExecutorHost, ExecutorInput, ExecutorOutput, ResourceLimits};
pub use wasm_inspect::parse_imports;
pub use whitelist::{RuntimeWhitelist, Whitelist};
