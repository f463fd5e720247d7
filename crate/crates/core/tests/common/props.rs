//! Generators and checks shared by the property suites and the acceptance run.

use proptest::prelude::*;
use proptest::sample::Index;
use purecert::certificate::sign_certificate;
use purecert::gate::{gate_verify, GateCache, GatePolicy, RejectReason};
use purecert::hash::{hash_bytes, Digest};
use purecert::keys::TrustSet;
use purecert::proof::{build_proof, Conclusion};
use purecert::provenance::{verify_chain, ChainBuilder, ChainVerdict, PurityMethod, RunRecord};
use purecert::wasm_inspect::{parse_imports, ImportRecord, ModuleImports};
use purecert::whitelist::{HostClass, RuntimeWhitelist, Whitelist, WhitelistEntry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{certifier, Certified, NOW};

pub const UNIVERSE: usize = 16;
pub const CANDIDATES: usize = UNIVERSE + 4;

const SIGS: [(&[&str], &[&str]); 4] =
    [(&["i32", "i32"], &[]), (&["i32"], &["i64"]), (&[], &["i32"]), (&["i64", "i32"], &["i32"])];

/// A function import as both a record and its text-format declaration.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub record: ImportRecord,
    params: &'static [&'static str],
    results: &'static [&'static str],
}

fn render(params: &[&str], results: &[&str]) -> String {
    let r = match results.len() {
        0 => "()".to_owned(),
        1 => results[0].to_owned(),
        _ => format!("({})", results.join(", ")),
    };
    format!("({}) -> {r}", params.join(", "))
}

fn candidate(ns: &str, name: &str, sig: usize) -> Candidate {
    let (params, results) = SIGS[sig];
    Candidate { record: ImportRecord::function(ns, name, &render(params, results)), params, results }
}

/// Indices below [`UNIVERSE`] name whitelistable functions; the rest are
/// foreign (WASI, a second namespace, an unknown name, a signature mismatch).
pub fn candidates() -> Vec<Candidate> {
    let mut out: Vec<Candidate> = (0..UNIVERSE).map(|i| candidate("mashin", &format!("fn_{i}"), i % 4)).collect();
    out.push(candidate("wasi_snapshot_preview1", "fd_write", 3));
    out.push(candidate("env", "abort", 0));
    out.push(candidate("mashin", "read_clock", 2));
    out.push(candidate("mashin", "fn_0", 1));
    out
}

fn entry(i: usize) -> WhitelistEntry {
    let c = &candidates()[i];
    let class = if i % 2 == 0 { HostClass::PureData } else { HostClass::PureDirective };
    WhitelistEntry::new(&c.record.namespace, &c.record.name, class, &c.record.type_signature)
}

pub fn whitelist(version: u32, mask: u16) -> Whitelist {
    Whitelist::new(version, (0..UNIVERSE).filter(|i| mask & (1 << i) != 0).map(entry)).unwrap()
}

pub fn module_wat(picks: &[usize]) -> String {
    let all = candidates();
    let mut src = String::from("(module\n");
    for &p in picks {
        let c = &all[p];
        let params = if c.params.is_empty() { String::new() } else { format!(" (param {})", c.params.join(" ")) };
        let results = if c.results.is_empty() { String::new() } else { format!(" (result {})", c.results.join(" ")) };
        src += &format!("  (import \"{}\" \"{}\" (func{params}{results}))\n", c.record.namespace, c.record.name);
    }
    src + "  (memory (export \"memory\") 1)\n  (func (export \"plan\") (result i32) i32.const 0))\n"
}

pub fn module(picks: &[usize]) -> Vec<u8> {
    wat::parse_str(module_wat(picks)).unwrap()
}

fn imports_of(picks: &[usize]) -> ModuleImports {
    let all = candidates();
    ModuleImports {
        imports: picks.iter().map(|&p| all[p].record.clone()).collect(),
        artifact_hash: Digest::ZERO,
        byte_length: 0,
    }
}

// ---------------------------------------------------------------- imports

pub fn arb_picks(max: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..CANDIDATES, 0..=max)
}

pub fn check_import_completeness(picks: &[usize]) -> Result<(), String> {
    let parsed = parse_imports(&module(picks)).map_err(|e| e.to_string())?;
    let expected = imports_of(picks).imports;
    if parsed.imports != expected {
        return Err(format!("parsed {:?}, declared {:?}", parsed.imports, expected));
    }
    Ok(())
}

// ---------------------------------------------------------------- monotonicity

#[derive(Debug, Clone)]
pub struct MonotonicityCase {
    pub v1: u16,
    pub v2: u16,
    pub picks: Vec<usize>,
}

prop_compose! {
    pub fn arb_monotonicity()(v1 in any::<u16>(), extra in any::<u16>(), picks in arb_picks(8), aligned in any::<bool>())
        -> MonotonicityCase {
        let mut v1 = v1;
        if aligned {
            v1 |= picks.iter().filter(|&&p| p < UNIVERSE).fold(0u16, |m, &p| m | 1 << p);
        }
        MonotonicityCase { v1, v2: v1 | extra, picks }
    }
}

/// Returns whether the instance was pure under v1, so callers can count
/// non-vacuous instances.
pub fn check_monotonicity(case: &MonotonicityCase) -> Result<bool, String> {
    let imports = imports_of(&case.picks);
    let p1 = build_proof(&imports, &whitelist(1, case.v1));
    let p2 = build_proof(&imports, &whitelist(2, case.v2));
    for (a, b) in p1.classifications.iter().zip(&p2.classifications) {
        if a.verdict.is_pure() && a.verdict != b.verdict {
            return Err(format!("{} was {} under v1 but {} under v2", a.import.qualified_name(), a.verdict, b.verdict));
        }
    }
    let pure1 = p1.conclusion == Conclusion::Pure;
    if pure1 && p2.conclusion != Conclusion::Pure {
        return Err("pure under v1, impure under v2".into());
    }
    Ok(pure1)
}

// ---------------------------------------------------------------- shrinkage

#[derive(Debug, Clone)]
pub struct ShrinkCase {
    pub v1: u16,
    pub v2: u16,
    pub picks: Vec<usize>,
}

prop_compose! {
    pub fn arb_shrinkage()(base in any::<u16>(), picks in prop::collection::vec(0..UNIVERSE, 1..=6), victim in any::<Index>(), also in any::<u16>())
        -> ShrinkCase {
        let v1 = picks.iter().fold(base, |m, &p| m | 1 << p);
        let removed = (1u16 << picks[victim.index(picks.len())]) | (also & v1 & base);
        ShrinkCase { v1, v2: v1 & !removed, picks }
    }
}

/// A binary certified under v1 that imports something v2 dropped must be
/// rejected at step 5 naming the first dropped import.
pub fn check_shrinkage(case: &ShrinkCase) -> Result<(), String> {
    let w1 = whitelist(1, case.v1);
    let w2 = whitelist(2, case.v2);
    let binary = module(&case.picks);
    let proof = build_proof(&parse_imports(&binary).unwrap(), &w1);
    let cert = sign_certificate(&binary, &proof, &certifier(), NOW).map_err(|e| e.to_string())?;
    let policy = GatePolicy {
        whitelist: RuntimeWhitelist::new(w2, 1).with_history(1, w1.content_hash()),
        trusted_keys: TrustSet::from([certifier().public_key()]),
    };
    let d = gate_verify(&binary, &cert, &proof, &policy, &GateCache::new(), NOW);
    let first = case.picks.iter().find(|&&p| case.v2 & (1 << p) == 0).expect("a dropped import");
    let expected = RejectReason::DisallowedImport(format!("mashin.fn_{first}"));
    match (d.failed_step(), d.reason()) {
        (Some(5), Some(r)) if *r == expected => Ok(()),
        other => Err(format!("expected step 5 {expected:?}, got {other:?}")),
    }
}

// ---------------------------------------------------------------- provenance

pub const FIELDS: [&str; 7] = [
    "step_index",
    "directive_hash",
    "governance_hash",
    "result_hash",
    "purity_cert_hash",
    "purity_method",
    "execution_hash_vp",
];

fn random_digest(rng: &mut ChaCha8Rng) -> Digest {
    hash_bytes(&rng.gen::<[u8; 32]>())
}

pub fn random_chain(seed: u64, len: usize) -> RunRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chain = ChainBuilder::new();
    for _ in 0..len {
        let method = [PurityMethod::WasmCertified, PurityMethod::BeamStaticAnalysis, PurityMethod::BeamUnchecked]
            [rng.gen_range(0..3)];
        let cert = method.marker_digest().unwrap_or_else(|| random_digest(&mut rng));
        let (d, g, r) = (random_digest(&mut rng), random_digest(&mut rng), random_digest(&mut rng));
        chain.append_step(d, g, r, cert, method).unwrap();
    }
    chain.finalize_run(random_digest(&mut rng), random_digest(&mut rng), random_digest(&mut rng)).unwrap()
}

fn flip(d: &mut Digest, bit: usize) {
    let mut bytes = *d.as_bytes();
    bytes[bit / 8 % 32] ^= 1 << (bit % 8);
    *d = Digest::from_bytes(bytes);
}

/// Mutates `field` of the 0-based step `at` and checks the verdict names
/// that step.
pub fn check_tamper(run: &RunRecord, at: usize, field: usize, bit: usize) -> Result<(), String> {
    let mut t = run.clone();
    let s = &mut t.steps[at];
    match field {
        0 => s.step_index += 1 + bit as u64 % 7,
        1 => flip(&mut s.directive_hash, bit),
        2 => flip(&mut s.governance_hash, bit),
        3 => flip(&mut s.result_hash, bit),
        4 => flip(&mut s.purity_cert_hash, bit),
        5 => {
            let others: Vec<PurityMethod> =
                [PurityMethod::WasmCertified, PurityMethod::BeamStaticAnalysis, PurityMethod::BeamUnchecked]
                    .into_iter()
                    .filter(|m| *m != s.purity_method)
                    .collect();
            s.purity_method = others[bit % 2];
        }
        6 => flip(&mut s.execution_hash_vp, bit),
        _ => unreachable!(),
    }
    let expected = ChainVerdict::InvalidStep(at as u64 + 1);
    let got = verify_chain(&t);
    if got != expected {
        return Err(format!("{} at step {}: expected {expected:?}, got {got:?}", FIELDS[field], at + 1));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TamperCase {
    pub seed: u64,
    pub len: usize,
    pub at: usize,
    pub field: usize,
    pub bit: usize,
}

prop_compose! {
    pub fn arb_tamper()(seed in any::<u64>(), len in 1usize..=10, at in any::<Index>(), field in 0..FIELDS.len(), bit in 0usize..256)
        -> TamperCase {
        TamperCase { seed, len, at: at.index(len), field, bit }
    }
}

// ---------------------------------------------------------------- non-transfer

/// XORs `mask` (non-zero) into byte `pos`; the gate must reject at step 1 or 2.
pub fn check_non_transfer(c: &Certified, policy: &GatePolicy, pos: usize, mask: u8) -> Result<(), String> {
    let mut mutated = c.binary.clone();
    mutated[pos] ^= mask;
    let d = gate_verify(&mutated, &c.cert, &c.proof, policy, &GateCache::new(), NOW);
    match d.failed_step() {
        Some(1 | 2) => Ok(()),
        other => Err(format!("byte {pos} ^ {mask:#04x}: failed_step {other:?}, reason {:?}", d.reason())),
    }
}
