//! Latency and size measurements over the fixture corpus.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::{json, Value};

use crate::certificate::{sign_certificate, CertifyError, PurityCertificate};
use crate::fixtures::{fixture_bytes, FixtureError};
use crate::gate::{gate_verify, GateCache, GatePolicy};
use crate::keys::{KeyPair, TrustSet};
use crate::proof::{build_proof, Conclusion, PurityProof};
use crate::runtime_host::{ExecError, ExecutorHost, ExecutorInput, ResourceLimits};
use crate::wasm_inspect::parse_imports;
use crate::whitelist::{RuntimeWhitelist, Whitelist};

pub const MIN_SAMPLES: usize = 50;
pub const MIN_WARMUP: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    VerifyLatency,
    PlanLatency,
    SerializeLatency,
    CertSize,
    CacheSpeedup,
}

impl Metric {
    pub const ALL: [Metric; 5] =
        [Metric::VerifyLatency, Metric::PlanLatency, Metric::SerializeLatency, Metric::CertSize, Metric::CacheSpeedup];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::VerifyLatency => "verify_latency",
            Metric::PlanLatency => "plan_latency",
            Metric::SerializeLatency => "serialize_latency",
            Metric::CertSize => "cert_size",
            Metric::CacheSpeedup => "cache_speedup",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| format!("unknown metric {s}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub metric: Metric,
    pub executor: String,
    pub samples: usize,
    pub warmup: usize,
    /// Microseconds, or bytes for `cert_size`.
    pub median: f64,
    pub mean: f64,
    pub p99: f64,
    pub unit: &'static str,
    /// Cold median over warm median, for `cache_speedup`.
    pub speedup: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error("fixture cannot be certified: {0}")]
    Certify(#[from] CertifyError),
    #[error("fixture failed to run: {0}")]
    Exec(#[from] ExecError),
    #[error("latency metrics need at least {MIN_SAMPLES} samples and {MIN_WARMUP} warmup iterations")]
    TooFewSamples,
    #[error("gate rejected the fixture: {0}")]
    Rejected(String),
}

/// Median, mean and nearest-rank 99th percentile.
pub fn summarize(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let rank = ((0.99 * n as f64).ceil() as usize).clamp(1, n);
    (median, mean, sorted[rank - 1])
}

fn micros(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

fn measure<F: FnMut() -> Result<(), BenchError>>(samples: usize, warmup: usize, mut f: F) -> Result<Vec<f64>, BenchError> {
    for _ in 0..warmup {
        f()?;
    }
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let t = Instant::now();
        f()?;
        out.push(micros(t.elapsed()));
    }
    Ok(out)
}

/// A certified fixture with the policy that accepts it.
pub struct BenchSubject {
    pub binary: Vec<u8>,
    pub proof: PurityProof,
    pub cert: PurityCertificate,
    pub whitelist: Whitelist,
    pub policy: GatePolicy,
}

/// Certifies `name` under the smallest shipped whitelist that proves it pure.
pub fn subject(name: &str) -> Result<BenchSubject, BenchError> {
    let binary = fixture_bytes(name)?;
    let imports = parse_imports(&binary).map_err(|e| BenchError::Fixture(FixtureError::Assemble(e.to_string())))?;
    let key = KeyPair::from_seed(&[0x42; 32]);
    let mut whitelist = Whitelist::default_v1();
    let mut proof = build_proof(&imports, &whitelist);
    if proof.conclusion != Conclusion::Pure {
        whitelist = Whitelist::extended_v2();
        proof = build_proof(&imports, &whitelist);
    }
    let cert = sign_certificate(&binary, &proof, &key, 1_700_000_000)?;
    let policy = GatePolicy {
        whitelist: RuntimeWhitelist::new(whitelist.clone(), 1),
        trusted_keys: TrustSet::from([key.public_key()]),
    };
    Ok(BenchSubject { binary, proof, cert, whitelist, policy })
}

/// Step config and context of `items` entries each.
pub fn sized_input(items: usize) -> ExecutorInput {
    let list: Vec<Value> = (0..items)
        .map(|i| json!({"id": i, "role": "user", "content": format!("message number {i} in the conversation")}))
        .collect();
    let tools: Vec<Value> = (0..5).map(|i| json!({"name": format!("tool_{i}"), "enabled": true})).collect();
    ExecutorInput::new(json!({"machine": "child", "tools": tools}), json!({"history": list, "input": {"n": items}}))
}

pub fn bench(metric: Metric, executor: &str, samples: usize, warmup: usize) -> Result<BenchReport, BenchError> {
    let s = subject(executor)?;
    let report = |values: &[f64], unit, speedup| {
        let (median, mean, p99) = summarize(values);
        BenchReport { metric, executor: executor.to_owned(), samples: values.len(), warmup, median, mean, p99, unit, speedup }
    };
    if metric == Metric::CertSize {
        let size = s.cert.canonical_bytes().len() as f64;
        return Ok(BenchReport { samples: 1, warmup: 0, ..report(&[size], "bytes", None) });
    }
    if samples < MIN_SAMPLES || warmup < MIN_WARMUP {
        return Err(BenchError::TooFewSamples);
    }
    let limits = ResourceLimits::default();
    match metric {
        Metric::VerifyLatency => {
            let values = measure(samples, warmup, || {
                let d = gate_verify(&s.binary, &s.cert, &s.proof, &s.policy, &GateCache::new(), 0);
                d.is_accept().then_some(()).ok_or_else(|| BenchError::Rejected(format!("{:?}", d.reason())))
            })?;
            Ok(report(&values, "us", None))
        }
        Metric::PlanLatency => {
            let host = ExecutorHost::new(s.whitelist.clone())?;
            let cache = GateCache::new();
            let input = sized_input(10);
            let values = measure(samples, warmup, || {
                let d = gate_verify(&s.binary, &s.cert, &s.proof, &s.policy, &cache, 0);
                host.instantiate_and_plan(&s.binary, &d, &input, &limits)?;
                Ok(())
            })?;
            Ok(report(&values, "us", None))
        }
        Metric::SerializeLatency => {
            let input = sized_input(100);
            let values = measure(samples, warmup, || {
                input.to_document()?;
                Ok(())
            })?;
            Ok(report(&values, "us", None))
        }
        Metric::CacheSpeedup => {
            let host = ExecutorHost::new(s.whitelist.clone())?;
            let input = sized_input(10);
            let cold = measure(samples, warmup, || {
                host.clear_module_cache();
                let d = gate_verify(&s.binary, &s.cert, &s.proof, &s.policy, &GateCache::new(), 0);
                host.instantiate_and_plan(&s.binary, &d, &input, &limits)?;
                Ok(())
            })?;
            let cache = GateCache::new();
            let warm = measure(samples, warmup, || {
                let d = gate_verify(&s.binary, &s.cert, &s.proof, &s.policy, &cache, 0);
                host.instantiate_and_plan(&s.binary, &d, &input, &limits)?;
                Ok(())
            })?;
            let (cold_median, _, _) = summarize(&cold);
            let (warm_median, _, _) = summarize(&warm);
            Ok(report(&warm, "us", Some(cold_median / warm_median.max(f64::MIN_POSITIVE))))
        }
        Metric::CertSize => unreachable!("handled above"),
    }
}
