mod common;

use common::*;
use serde_json::json;

#[test]
fn full_lifecycle_exits_zero_at_every_stage() {
    let lc = lifecycle();
    for s in &lc.stages {
        assert_eq!(s.run.code, 0, "{} failed: {} {}", s.name, s.run.json, s.run.stderr);
    }
    assert_eq!(lc.stages.len(), 11);
    let chain = &lc.stage("provenance verify").json;
    assert_eq!(chain["purity_cert_hashes"], json!([lc.cert_hash]));
    assert_eq!(lc.stage("run").json["divergences"], 0);
    assert_eq!(lc.stage("run").json["output"]["directives"][0]["kind"], "call_machine");
    assert_eq!(lc.stage("attest-verify").json["verdict"]["verdict"], "accept");
}

#[test]
fn cross_org_hash_joins_two_runs() {
    let lc = lifecycle();
    let s = &lc.session;
    let r = s.run(&["provenance", "cross-org", "--caller", "run.chain", "--attestation", "call.attest", "--callee", "run.chain"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.json["cross_org_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn domain_rejections_exit_one() {
    let lc = lifecycle();
    let s = &lc.session;

    let mut bytes = std::fs::read(s.path("fx/call.wasm")).unwrap();
    *bytes.last_mut().unwrap() ^= 1;
    std::fs::write(s.path("tampered.wasm"), bytes).unwrap();
    let r = s.run(&["gate", "tampered.wasm", "--cert", "fx/call.cert", "--proof", "fx/call.proof"]);
    assert_eq!(r.code, 1);
    assert_eq!(r.json["detail"]["failed_step"], 2);
    assert_eq!(r.json["detail"]["reason"]["code"], "artifact_hash_mismatch");

    let r = s.run(&["certify", "fx/neg_wasi.wasm"]);
    assert_eq!(r.code, 1);
    assert_eq!(r.json["detail"]["disallowed"], json!(["wasi_snapshot_preview1.fd_write"]));

    let r = s.run(&["gate", "fx/call.wasm", "--cert", "fx/call.cert", "--proof", "fx/call.proof", "--trust", &"00".repeat(32)]);
    assert_eq!(r.code, 1);
    assert_eq!(r.json["detail"]["failed_step"], 1);

    let mut lines: Vec<String> = s.read_text("run.chain").lines().map(str::to_owned).collect();
    let mut v: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    v["result_hash"] = json!("ab".repeat(32));
    lines[0] = v.to_string();
    std::fs::write(s.path("bad.chain"), lines.join("\n") + "\n").unwrap();
    let r = s.run(&["provenance", "verify", "bad.chain"]);
    assert_eq!(r.code, 1);
    assert_eq!(r.json["detail"], json!({"verdict": "invalid_step", "at": 1}));

    let mut policy: serde_json::Value = serde_json::from_str(&s.read_text("policy.json")).unwrap();
    policy["minimum_required"] = json!(2);
    s.write("strict.json", &policy);
    let r = s.run(&["attest-verify", "call.attest", "--policy", "strict.json"]);
    assert_eq!(r.code, 1);
    assert_eq!(r.json["detail"]["step"], 4);

    let r = s.run(&["run", "fx/call.wasm", "--cert", "fx/call.cert", "--proof", "fx/call.proof", "--input", "input.json", "--fuel", "10"]);
    assert_eq!(r.code, 1);
    assert_eq!(r.json["detail"]["class"], "fuel_exhausted");
}

#[test]
fn attest_requires_prior_gate_accept() {
    let lc = lifecycle();
    let s = &lc.session;
    std::fs::remove_file(s.home().join("decisions.log")).unwrap();
    let r = s.run(&["attest", "fx/call.wasm", "--cert", "fx/call.cert", "--proof", "fx/call.proof", "--env", "env.json", "--env-key", "envkeys/env.key"]);
    assert_eq!(r.code, 1);
    assert!(r.json["error"].as_str().unwrap().contains("never accepted"));
}

#[test]
fn usage_errors_exit_two() {
    let s = Session::new();
    assert_eq!(s.run(&["gate", "missing.wasm", "--cert", "a", "--proof", "b"]).code, 2);
    assert_eq!(s.raw(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(s.run(&["bench", "--metric", "nonsense"]).code, 2);
    assert_eq!(s.run(&["whitelist", "export", "v9"]).code, 2);
    assert_eq!(s.run(&["certify", "missing.wasm"]).code, 2);
}

#[test]
fn keygen_refuses_overwrite() {
    let s = Session::new();
    assert_eq!(s.run(&["keygen"]).code, 0);
    assert_eq!(s.run(&["keygen"]).code, 2);
    assert_eq!(s.run(&["keygen", "--force"]).code, 0);
}

#[test]
fn whitelist_sign_and_verify() {
    let s = Session::new();
    assert_eq!(s.run(&["keygen", "--name", "authority"]).code, 0);
    let authority = s.read_text("home/keys/authority.pub").trim().to_owned();
    let exported = s.run(&["whitelist", "export", "v2", "--out", "v2.json"]);
    assert_eq!(exported.code, 0);
    assert_eq!(exported.json["version"], 2);

    assert_eq!(s.run(&["whitelist", "verify", "v2.json"]).code, 1);
    assert_eq!(s.run(&["whitelist", "sign", "v2.json", "--key", "home/keys/authority.key"]).code, 0);
    let r = s.run(&["whitelist", "verify", "v2.json", "--authority", &authority]);
    assert_eq!(r.code, 0, "{}", r.json);
    assert_eq!(r.json["content_hash"], exported.json["content_hash"]);
    assert_eq!(s.run(&["whitelist", "verify", "v2.json", "--authority", &"11".repeat(32)]).code, 1);

    let hashed = s.run(&["whitelist", "hash", "v2.json"]);
    assert_eq!(hashed.json["content_hash"], exported.json["content_hash"]);
}

#[test]
fn text_output_is_human_readable() {
    let s = Session::new();
    let out = s.raw(&["whitelist", "hash", "v1"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("v1 "), "{text}");
}

#[test]
fn bench_reports_certificate_size() {
    let s = Session::new();
    let r = s.run(&["bench", "--metric", "cert_size", "--executor", "call"]);
    assert_eq!(r.code, 0);
    let size = r.json["reports"][0]["median"].as_f64().unwrap();
    assert!(size > 0.0 && size <= 4096.0);
}
