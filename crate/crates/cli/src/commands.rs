use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use purecert::attestation::{build_attestation, verify_attestation, AttestationRecord, EnvironmentDescriptor, OrgPolicy};
use purecert::bench::{bench, summarize, BenchError, Metric};
use purecert::certificate::sign_certificate;
use purecert::fixtures::build_corpus;
use purecert::gate::{gate_verify, DecisionLog, Gate, GateCache, GateDecision};
use purecert::hash::{hash_bytes, Digest};
use purecert::interpreter::{GovernanceContext, Interpreter, Machine, Tier, TierPolicy};
use purecert::keys::{KeyPair, PublicKey};
use purecert::proof::{build_proof, Conclusion};
use purecert::provenance::{cross_org_hash, read_chain_file, verify_chain, write_chain_file, RunRecord};
use purecert::runtime_host::{ExecutorHost, ExecutorInput, ResourceLimits};
use purecert::wasm_inspect::parse_imports;
use purecert::whitelist::{LoadMode, Whitelist, WhitelistError};
use serde_json::{json, Value};

use crate::support::*;
use crate::{Command, FixturesCommand, GateArgs, PolicyArgs, ProvenanceCommand, WhitelistCommand};

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn dispatch(ctx: &Context, command: Command) -> Outcome {
    match command {
        Command::Keygen { name, out, force } => keygen(ctx, &name, out.as_deref(), force),
        Command::Whitelist(c) => whitelist(ctx, c),
        Command::Certify { wasm, key, whitelist, cert_out, proof_out } => {
            let key = key.unwrap_or_else(|| ctx.keys_dir().join("certifier.key"));
            certify(ctx, &wasm, &key, &whitelist, cert_out, proof_out)
        }
        Command::Verify(args) => gate(ctx, &args, false).map(drop),
        Command::Gate(args) => gate(ctx, &args, true).map(drop),
        Command::Run { gate, input, fuel, mem_max, timeout, repeat } => {
            let mut limits = ResourceLimits::default();
            limits.fuel = fuel.unwrap_or(limits.fuel);
            limits.memory_max = mem_max.unwrap_or(limits.memory_max);
            limits.wall_clock = timeout.map(Duration::from_millis).unwrap_or(limits.wall_clock);
            run(ctx, &gate, &input, limits, repeat)
        }
        Command::RunMachine { machine, input, policy, chain_out, min_tier, allow_hosts } => {
            run_machine(ctx, &machine, &input, &policy, chain_out, &min_tier, allow_hosts)
        }
        Command::Env { runtime_identity, runtime_version, policy, out } => {
            let w = runtime_whitelist(&policy)?;
            let env = EnvironmentDescriptor {
                runtime_identity,
                runtime_version,
                whitelist_version: w.current().version(),
                whitelist_hash: w.current().content_hash(),
                accepted_certifier_keys: ctx.trust_set(&policy.trust)?,
            };
            let bytes = purecert::canonical::to_canonical_bytes(&env).map_err(usage)?;
            write_or_print(ctx, out.as_deref(), &bytes, to_value(&env))
        }
        Command::Attest { wasm, cert, proof, env, env_key, out } => attest(ctx, &wasm, &cert, &proof, &env, &env_key, out),
        Command::AttestVerify { attestation, policy } => attest_verify(ctx, &attestation, &policy),
        Command::Provenance(c) => provenance(ctx, c),
        Command::Bench { metric, executor, samples, warmup } => run_bench(ctx, &metric, &executor, samples, warmup),
        Command::Fixtures(FixturesCommand::Build { out }) => {
            let written = build_corpus(&out).map_err(usage)?;
            let names: Vec<String> = written.iter().map(|p| p.display().to_string()).collect();
            ctx.emit(json!({"ok": true, "files": names}), format!("wrote {} files to {}", names.len(), out.display()));
            Ok(())
        }
    }
}

fn write_or_print(ctx: &Context, out: Option<&Path>, bytes: &[u8], value: Value) -> Outcome {
    match out {
        Some(path) => {
            write_bytes(path, bytes)?;
            ctx.emit(json!({"ok": true, "written": path.display().to_string(), "document": value}), format!("wrote {}", path.display()));
        }
        None => println!("{}", String::from_utf8_lossy(bytes).trim_end()),
    }
    Ok(())
}

fn keygen(ctx: &Context, name: &str, out: Option<&Path>, force: bool) -> Outcome {
    let key_path = out.map(Path::to_path_buf).unwrap_or_else(|| ctx.keys_dir().join(format!("{name}.key")));
    let pub_path = sibling(&key_path, "pub");
    if key_path.exists() && !force {
        return Err(usage(format!("{} exists; pass --force to overwrite", key_path.display())));
    }
    if let Some(dir) = key_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    }
    let key = KeyPair::generate().map_err(usage)?;
    key.write_keyfile(&key_path).map_err(usage)?;
    let public = key.public_key();
    write_bytes(&pub_path, format!("{public}\n").as_bytes())?;
    ctx.emit(
        json!({"ok": true, "public_key": public, "key_file": key_path, "public_key_file": pub_path}),
        format!("{public}\nkey written to {}", key_path.display()),
    );
    Ok(())
}

fn whitelist(ctx: &Context, command: WhitelistCommand) -> Outcome {
    match command {
        WhitelistCommand::Export { name, out } => {
            let w = match name.as_str() {
                "v1" => Whitelist::default_v1(),
                "v2" => Whitelist::extended_v2(),
                other => return Err(usage(format!("unknown built-in whitelist {other}; expected v1 or v2"))),
            };
            let hash = w.content_hash();
            let bytes = w.to_file_bytes();
            match out {
                Some(path) => {
                    write_bytes(&path, &bytes)?;
                    ctx.emit(
                        json!({"ok": true, "version": w.version(), "content_hash": hash, "written": path}),
                        format!("v{} {hash} -> {}", w.version(), path.display()),
                    );
                }
                None => print!("{}", String::from_utf8_lossy(&bytes)),
            }
            Ok(())
        }
        WhitelistCommand::Hash { file } => {
            let w = load_whitelist(&file.to_string_lossy())?;
            ctx.emit(
                json!({"ok": true, "version": w.version(), "content_hash": w.content_hash(), "entries": w.len()}),
                format!("v{} {}", w.version(), w.content_hash()),
            );
            Ok(())
        }
        WhitelistCommand::Sign { file, key, out } => {
            let mut w = Whitelist::from_file_bytes(&read_bytes(&file)?, LoadMode::Development).map_err(usage)?;
            let key = read_key(&key)?;
            w.sign(&key);
            let out = out.unwrap_or(file);
            write_bytes(&out, &w.to_file_bytes())?;
            ctx.emit(
                json!({"ok": true, "version": w.version(), "content_hash": w.content_hash(), "authority": key.public_key()}),
                format!("signed v{} {} as {}", w.version(), w.content_hash(), key.public_key()),
            );
            Ok(())
        }
        WhitelistCommand::Verify { file, authority } => {
            let authority = authority
                .map(|a| PublicKey::from_hex(a.trim()).map_err(|e| usage(format!("--authority: {e}"))))
                .transpose()?;
            match Whitelist::from_file_bytes(&read_bytes(&file)?, LoadMode::Production { authority }) {
                Ok(w) => {
                    let signer = w.authority().map(|a| a.key);
                    ctx.emit(
                        json!({"ok": true, "version": w.version(), "content_hash": w.content_hash(), "authority": signer}),
                        format!("valid: v{} {}", w.version(), w.content_hash()),
                    );
                    Ok(())
                }
                Err(e @ (WhitelistError::Parse(_) | WhitelistError::Canonical(_))) => Err(usage(e)),
                Err(e) => Err(Failure::rejected(e.to_string(), json!({"file": file}))),
            }
        }
    }
}

fn certify(
    ctx: &Context,
    wasm: &Path,
    key: &Path,
    whitelist: &str,
    cert_out: Option<std::path::PathBuf>,
    proof_out: Option<std::path::PathBuf>,
) -> Outcome {
    let binary = read_bytes(wasm)?;
    let key = read_key(key)?;
    let w = load_whitelist(whitelist)?;
    let imports = parse_imports(&binary).map_err(|e| Failure::rejected(format!("malformed binary: {e}"), Value::Null))?;
    let proof = build_proof(&imports, &w);
    if proof.conclusion != Conclusion::Pure {
        let names: Vec<String> = proof.disallowed().map(|i| i.qualified_name()).collect();
        return Err(Failure::rejected(
            format!("refusing to certify: disallowed imports {}", names.join(", ")),
            json!({"disallowed": names, "proof": proof}),
        ));
    }
    let cert = sign_certificate(&binary, &proof, &key, now()).map_err(|e| Failure::rejected(e.to_string(), Value::Null))?;
    let cert_path = cert_out.unwrap_or_else(|| sibling(wasm, "cert"));
    let proof_path = proof_out.unwrap_or_else(|| sibling(wasm, "proof"));
    let cert_bytes = cert.canonical_bytes();
    write_bytes(&cert_path, &cert_bytes)?;
    write_bytes(&proof_path, &proof.canonical_bytes())?;
    ctx.emit(
        json!({
            "ok": true,
            "artifact_hash": cert.artifact_hash,
            "proof_hash": cert.proof_hash,
            "certificate_hash": cert.hash(),
            "certificate_bytes": cert_bytes.len(),
            "imports": proof.imports.len(),
            "whitelist_version": w.version(),
            "cert": cert_path,
            "proof": proof_path,
        }),
        format!(
            "certified {} ({} imports, whitelist v{})\ncertificate {} ({} bytes)\nproof {}",
            wasm.display(),
            proof.imports.len(),
            w.version(),
            cert_path.display(),
            cert_bytes.len(),
            proof_path.display()
        ),
    );
    Ok(())
}

fn decision_value(d: &GateDecision) -> Value {
    let mut v = to_value(&d.record());
    v["elapsed_us"] = json!(d.elapsed_us());
    v
}

/// Runs the gate; `logged` routes through the decision log in the home directory.
fn gate(ctx: &Context, args: &GateArgs, logged: bool) -> Result<(GateDecision, Gate), Failure> {
    let binary = read_bytes(&args.wasm)?;
    let cert = read_cert(&args.cert)?;
    let proof = read_proof(&args.proof)?;
    let policy = ctx.gate_policy(&args.policy)?;
    let log = if logged { ctx.open_log()? } else { DecisionLog::in_memory() };
    let g = Gate::with_log(policy.clone(), log);
    let decision = if logged {
        g.verify_at(&binary, &cert, &proof, now())
    } else {
        gate_verify(&binary, &cert, &proof, &policy, &GateCache::new(), now())
    };
    let value = decision_value(&decision);
    match (decision.failed_step(), decision.reason()) {
        (Some(step), Some(reason)) => Err(Failure::rejected(format!("gate rejected at step {step}: {reason}"), value)),
        _ => {
            ctx.emit(
                json!({"ok": true, "decision": value}),
                format!("accept {} (decision {})", decision.artifact_hash(), decision.id()),
            );
            Ok((decision, g))
        }
    }
}

fn executor_input(path: &Path) -> Result<ExecutorInput, Failure> {
    let doc = read_json(path)?;
    let Value::Object(mut map) = doc else {
        return Err(usage(format!("{}: expected an object with step_config and context", path.display())));
    };
    let step_config = map.remove("step_config").unwrap_or(Value::Null);
    let context = map.remove("context").unwrap_or(Value::Null);
    if let Some(extra) = map.keys().next() {
        return Err(usage(format!("{}: unknown field {extra}", path.display())));
    }
    Ok(ExecutorInput::new(step_config, context))
}

fn run(ctx: &Context, args: &GateArgs, input: &Path, limits: ResourceLimits, repeat: usize) -> Outcome {
    if repeat == 0 {
        return Err(usage("--repeat must be at least 1"));
    }
    let input = executor_input(input)?;
    let quiet = Context { json: true, home: ctx.home.clone() };
    let (decision, g) = gate(if ctx.json { &quiet } else { ctx }, args, true)?;
    let binary = read_bytes(&args.wasm)?;
    let host = ExecutorHost::new(g.runtime_whitelist().current().clone()).map_err(usage)?;

    let mut first = None;
    let mut digests = Vec::with_capacity(repeat);
    let mut phases: [Vec<f64>; 5] = Default::default();
    for _ in 0..repeat {
        let (out, t) = host
            .instantiate_and_plan_timed(&binary, &decision, &input, &limits)
            .map_err(|e| Failure::rejected(format!("executor failed ({}): {e}", e.class()), json!({"class": e.class()})))?;
        for (acc, d) in phases.iter_mut().zip([t.serialize, t.compile, t.instantiate, t.call, t.total]) {
            acc.push(d.as_secs_f64() * 1e6);
        }
        digests.push(hash_bytes(&out.canonical_bytes()));
        first.get_or_insert(out);
    }
    let out = first.expect("repeat >= 1");
    let divergences = digests.iter().filter(|d| *d != &digests[0]).count();
    let medians: Vec<f64> = phases.iter().map(|p| summarize(p).0).collect();
    let timing = json!({
        "serialize_us": medians[0], "compile_us": medians[1], "instantiate_us": medians[2],
        "call_us": medians[3], "total_us": medians[4],
    });
    let mut text = format!("result: {}\n", out.result);
    for d in &out.directives {
        text += &format!("directive {}: {}\n", d.kind.as_str(), d.payload);
    }
    for l in &out.log_lines {
        text += &format!("log: {l}\n");
    }
    text += &format!(
        "runs {repeat}, divergences {divergences}, median total {:.1} us (serialize {:.1}, compile {:.1}, instantiate {:.1}, call {:.1})",
        medians[4], medians[0], medians[1], medians[2], medians[3]
    );
    ctx.emit(
        json!({"ok": true, "decision": decision.id(), "output": out, "runs": repeat, "divergences": divergences, "timing": timing}),
        text,
    );
    Ok(())
}

fn parse_tier(s: &str) -> Result<Tier, Failure> {
    match s {
        "tier1" | "tier1_wasm_certified" => Ok(Tier::Tier1WasmCertified),
        "tier2" | "tier2_static_analysis" => Ok(Tier::Tier2StaticAnalysis),
        "tier3" | "tier3_unchecked" => Ok(Tier::Tier3Unchecked),
        other => Err(usage(format!("unknown tier {other}"))),
    }
}

fn run_machine(
    ctx: &Context,
    machine_path: &Path,
    input: &Path,
    policy: &PolicyArgs,
    chain_out: Option<std::path::PathBuf>,
    min_tier: &str,
    allow_hosts: Vec<String>,
) -> Outcome {
    let doc = read_json(machine_path)?;
    let machine: Machine = serde_json::from_value(doc.clone()).map_err(|e| usage(format!("{}: {e}", machine_path.display())))?;
    let base = machine_path.parent().unwrap_or(Path::new("."));
    let input_doc = read_json(input)?;
    let tier_policy = TierPolicy::require(parse_tier(min_tier)?);

    let g = Gate::with_log(ctx.gate_policy(policy)?, ctx.open_log()?);
    let host = ExecutorHost::new(g.runtime_whitelist().current().clone()).map_err(usage)?;
    let mut interp = Interpreter::new(Arc::new(g), Arc::new(host));
    let executors = doc.get("executors").and_then(Value::as_object).cloned().unwrap_or_default();
    for (name, spec) in &executors {
        let field = |f: &str| {
            spec.get(f)
                .and_then(Value::as_str)
                .map(|p| base.join(p))
                .ok_or_else(|| usage(format!("executor {name}: missing {f}")))
        };
        interp.register_wasm(name, read_bytes(&field("wasm")?)?, read_cert(&field("cert")?)?, read_proof(&field("proof")?)?);
    }
    let governance =
        if allow_hosts.is_empty() { GovernanceContext::permissive() } else { GovernanceContext::with_http_allowlist(allow_hosts) };

    let run = interp
        .run_machine(&machine, &input_doc, &governance, &tier_policy)
        .map_err(|e| Failure::rejected(e.to_string(), json!({"machine": machine.name})))?;
    let chain_path = chain_out.unwrap_or_else(|| sibling(machine_path, "chain"));
    write_bytes(&chain_path, &write_chain_file(&run.record))?;

    let steps: Vec<Value> = run
        .steps
        .iter()
        .map(|s| {
            json!({
                "step_index": s.step_record.step_index,
                "executor": s.governance.executor,
                "purity_method": s.step_record.purity_method,
                "purity_cert_hash": s.step_record.purity_cert_hash,
                "gate_decision": s.governance.gate_decision,
                "results": s.results,
            })
        })
        .collect();
    let mut text = String::new();
    for s in &run.steps {
        text += &format!(
            "step {} {} [{}] cert {}\n",
            s.step_record.step_index,
            s.governance.executor,
            s.step_record.purity_method,
            s.step_record.purity_cert_hash
        );
    }
    text += &format!("run {} -> {}", run.record.run_hash_vp, chain_path.display());
    ctx.emit(
        json!({"ok": true, "run_hash": run.record.run_hash_vp, "chain": chain_path, "steps": steps, "output": run.output, "effects": interp.sink().len()}),
        text,
    );
    Ok(())
}

fn attest(
    ctx: &Context,
    wasm: &Path,
    cert: &Path,
    proof: &Path,
    env: &Path,
    env_key: &Path,
    out: Option<std::path::PathBuf>,
) -> Outcome {
    let binary = read_bytes(wasm)?;
    let cert = read_cert(cert)?;
    let proof = read_proof(proof)?;
    let env: EnvironmentDescriptor =
        serde_json::from_slice(&read_bytes(env)?).map_err(|e| usage(format!("{}: {e}", env.display())))?;
    let key = read_key(env_key)?;
    if hash_bytes(&binary) != cert.artifact_hash {
        return Err(Failure::rejected("binary does not match the certificate's artifact hash", Value::Null));
    }
    let log = ctx.log_path();
    let events = if log.exists() { DecisionLog::load(&log).map_err(usage)? } else { Vec::new() };
    let record = build_attestation(&cert, &proof, &env, &key, &events)
        .map_err(|e| Failure::rejected(e.to_string(), json!({"log": log})))?;
    let path = out.unwrap_or_else(|| sibling(wasm, "attest"));
    write_bytes(&path, &record.canonical_bytes())?;
    ctx.emit(
        json!({"ok": true, "attestation": path, "hash": record.hash(), "env_key": record.env_key}),
        format!("attestation {} written to {}", record.hash(), path.display()),
    );
    Ok(())
}

fn attest_verify(ctx: &Context, attestation: &Path, policy: &Path) -> Outcome {
    let record = AttestationRecord::from_bytes(&read_bytes(attestation)?)
        .map_err(|e| usage(format!("{}: {e}", attestation.display())))?;
    let policy = OrgPolicy::from_bytes(&read_bytes(policy)?).map_err(|e| usage(format!("{}: {e}", policy.display())))?;
    let verdict = verify_attestation(&record, &policy);
    let value = to_value(&verdict);
    match verdict.step() {
        None => {
            ctx.emit(json!({"ok": true, "verdict": value, "hash": record.hash()}), format!("accept {}", record.hash()));
            Ok(())
        }
        Some(step) => {
            let reason = match &verdict {
                purecert::attestation::AttestationVerdict::Reject { reason, .. } => reason.to_string(),
                _ => unreachable!(),
            };
            Err(Failure::rejected(format!("attestation rejected at step {step}: {reason}"), value))
        }
    }
}

fn load_chain(path: &Path) -> Result<RunRecord, Failure> {
    read_chain_file(&read_bytes(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn require_valid(path: &Path, run: &RunRecord) -> Result<(), Failure> {
    let verdict = verify_chain(run);
    if verdict.is_valid() {
        Ok(())
    } else {
        Err(Failure::rejected(format!("{}: {verdict}", path.display()), to_value(&verdict)))
    }
}

fn provenance(ctx: &Context, command: ProvenanceCommand) -> Outcome {
    match command {
        ProvenanceCommand::Verify { chain } => {
            let run = load_chain(&chain)?;
            require_valid(&chain, &run)?;
            let certs: Vec<Digest> = run.steps.iter().map(|s| s.purity_cert_hash).collect();
            ctx.emit(
                json!({"ok": true, "verdict": "valid", "steps": run.steps.len(), "run_hash": run.run_hash_vp, "purity_cert_hashes": certs}),
                format!("valid: {} steps, run {}", run.steps.len(), run.run_hash_vp),
            );
            Ok(())
        }
        ProvenanceCommand::CrossOrg { caller, attestation, callee } => {
            let caller_run = load_chain(&caller)?;
            let callee_run = load_chain(&callee)?;
            require_valid(&caller, &caller_run)?;
            require_valid(&callee, &callee_run)?;
            let record = AttestationRecord::from_bytes(&read_bytes(&attestation)?)
                .map_err(|e| usage(format!("{}: {e}", attestation.display())))?;
            let h = cross_org_hash(&caller_run.run_hash_vp, &record.hash(), &callee_run.run_hash_vp);
            ctx.emit(json!({"ok": true, "cross_org_hash": h}), h.to_string());
            Ok(())
        }
    }
}

fn run_bench(ctx: &Context, metric: &str, executor: &str, samples: usize, warmup: usize) -> Outcome {
    let metrics = if metric == "all" { Metric::ALL.to_vec() } else { vec![metric.parse::<Metric>().map_err(usage)?] };
    let mut reports = Vec::new();
    let mut text = Vec::new();
    for m in metrics {
        let r = bench(m, executor, samples, warmup).map_err(|e| match e {
            BenchError::Rejected(_) | BenchError::Exec(_) | BenchError::Certify(_) => Failure::rejected(e.to_string(), Value::Null),
            other => usage(other),
        })?;
        let mut line = format!(
            "{:<18} {:<8} median {:>10.1} {} mean {:>10.1} p99 {:>10.1} (n={}, warmup={})",
            r.metric, r.executor, r.median, r.unit, r.mean, r.p99, r.samples, r.warmup
        );
        if let Some(s) = r.speedup {
            line += &format!(" speedup {s:.1}x");
        }
        text.push(line);
        reports.push(to_value(&r));
    }
    ctx.emit(json!({"ok": true, "reports": reports}), text.join("\n"));
    Ok(())
}

