#![allow(dead_code)]

pub mod props;

use purecert::certificate::{sign_certificate, PurityCertificate};
use purecert::fixtures::fixture_bytes;
use purecert::gate::{Gate, GateDecision, GatePolicy};
use purecert::keys::{KeyPair, TrustSet};
use purecert::proof::{build_proof, PurityProof};
use purecert::wasm_inspect::parse_imports;
use purecert::whitelist::{RuntimeWhitelist, Whitelist};

pub const NOW: u64 = 1_760_000_000;

pub fn certifier() -> KeyPair {
    KeyPair::from_seed(&[7u8; 32])
}

pub struct Certified {
    pub binary: Vec<u8>,
    pub proof: PurityProof,
    pub cert: PurityCertificate,
}

pub fn certify_bytes(binary: Vec<u8>, whitelist: &Whitelist) -> Certified {
    let proof = build_proof(&parse_imports(&binary).unwrap(), whitelist);
    let cert = sign_certificate(&binary, &proof, &certifier(), NOW).unwrap();
    Certified { binary, proof, cert }
}

pub fn certify(name: &str, whitelist: &Whitelist) -> Certified {
    certify_bytes(fixture_bytes(name).unwrap(), whitelist)
}

pub fn policy(whitelist: Whitelist) -> GatePolicy {
    GatePolicy { whitelist: RuntimeWhitelist::new(whitelist, 1), trusted_keys: TrustSet::from([certifier().public_key()]) }
}

pub fn gate(whitelist: Whitelist) -> Gate {
    Gate::new(policy(whitelist))
}

pub fn accepted(gate: &Gate, c: &Certified) -> GateDecision {
    let d = gate.verify_at(&c.binary, &c.cert, &c.proof, NOW);
    assert!(d.is_accept(), "{:?}", d.reason());
    d
}

pub mod attest {
    use std::collections::BTreeSet;

    use purecert::attestation::{build_attestation, AttestationRecord, EnvironmentDescriptor, OrgPolicy};
    use purecert::keys::KeyPair;
    use purecert::whitelist::Whitelist;

    use super::*;

    pub fn env_key() -> KeyPair {
        KeyPair::from_seed(&[9u8; 32])
    }

    pub fn env_for(w: &Whitelist) -> EnvironmentDescriptor {
        EnvironmentDescriptor {
            runtime_identity: "purecert-runtime".into(),
            runtime_version: "0.1.0".into(),
            whitelist_version: w.version(),
            whitelist_hash: w.content_hash(),
            accepted_certifier_keys: BTreeSet::from([certifier().public_key()]),
        }
    }

    /// A gate-accepted `call` fixture attested under v1.
    pub fn record() -> AttestationRecord {
        let w = Whitelist::default_v1();
        let g = gate(w.clone());
        let c = certify("call", &w);
        accepted(&g, &c);
        build_attestation(&c.cert, &c.proof, &env_for(&w), &env_key(), &g.log().events()).unwrap()
    }

    /// The policy of an organization that accepts [`record`].
    pub fn matching_policy() -> OrgPolicy {
        let w = Whitelist::default_v1();
        OrgPolicy {
            accepted_whitelists: BTreeSet::from([w.content_hash()]),
            trusted_runtimes: BTreeSet::from(["purecert-runtime".to_string()]),
            trusted_certifiers: BTreeSet::from([certifier().public_key()]),
            minimum_required: 1,
            trusted_env_keys: BTreeSet::from([env_key().public_key()]),
        }
    }
}
