#![allow(dead_code)]

use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::{json, Value};

/// A scratch directory with its own `PURECERT_HOME`.
pub struct Session {
    pub dir: tempfile::TempDir,
}

pub struct Run {
    pub code: i32,
    pub json: Value,
    pub stderr: String,
}

impl Session {
    pub fn new() -> Self {
        Session { dir: tempfile::tempdir().unwrap() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn home(&self) -> PathBuf {
        self.path("home")
    }

    pub fn raw(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_purecert"))
            .args(args)
            .current_dir(self.dir.path())
            .env("PURECERT_HOME", self.home())
            .output()
            .unwrap()
    }

    /// Runs with `--json` and parses the single output line.
    pub fn run(&self, args: &[&str]) -> Run {
        let mut full = vec!["--json"];
        full.extend_from_slice(args);
        let out = self.raw(&full);
        let stdout = String::from_utf8_lossy(&out.stdout);
        let json = stdout.lines().last().and_then(|l| serde_json::from_str(l).ok()).unwrap_or(Value::Null);
        Run { code: out.status.code().unwrap_or(-1), json, stderr: String::from_utf8_lossy(&out.stderr).into() }
    }

    pub fn write(&self, rel: &str, value: &Value) {
        std::fs::write(self.path(rel), serde_json::to_vec_pretty(value).unwrap()).unwrap();
    }

    pub fn read_text(&self, rel: &str) -> String {
        std::fs::read_to_string(self.path(rel)).unwrap()
    }
}

/// One named stage of the lifecycle with its exit code.
pub struct Stage {
    pub name: &'static str,
    pub run: Run,
}

pub struct Lifecycle {
    pub session: Session,
    pub stages: Vec<Stage>,
    pub cert_hash: String,
}

impl Lifecycle {
    pub fn all_passed(&self) -> bool {
        self.stages.iter().all(|s| s.run.code == 0)
    }

    pub fn stage(&self, name: &str) -> &Run {
        &self.stages.iter().find(|s| s.name == name).unwrap().run
    }
}

fn key_hex(s: &Session, name: &str) -> String {
    s.read_text(&format!("home/keys/{name}.pub")).trim().to_owned()
}

/// certify → gate → run → run-machine → provenance verify → env → attest →
/// attest-verify on the call fixture. Stops at the first failing stage.
pub fn lifecycle() -> Lifecycle {
    let s = Session::new();
    let mut stages = Vec::new();
    let mut cert_hash = String::new();
    macro_rules! stage {
        ($name:expr, $args:expr) => {{
            let run = s.run($args);
            let ok = run.code == 0;
            stages.push(Stage { name: $name, run });
            if !ok {
                return Lifecycle { session: s, stages, cert_hash };
            }
        }};
    }

    stage!("keygen", &["keygen"]);
    let certifier = key_hex(&s, "certifier");
    stage!("keygen env", &["keygen", "--name", "env", "--out", "envkeys/env.key"]);
    let env_key = s.read_text("envkeys/env.pub").trim().to_owned();
    stage!("fixtures build", &["fixtures", "build", "--out", "fx"]);
    stage!("certify", &["certify", "fx/call.wasm"]);
    cert_hash = stages.last().unwrap().run.json["certificate_hash"].as_str().unwrap_or_default().to_owned();
    let gate = ["--cert", "fx/call.cert", "--proof", "fx/call.proof"];
    stage!("gate", &[&["gate", "fx/call.wasm"][..], &gate].concat());
    s.write("input.json", &json!({"step_config": {"machine": "child", "inputs": {"x": 1}}, "context": {"input": {}}}));
    stage!("run", &[&["run", "fx/call.wasm"][..], &gate, &["--input", "input.json", "--repeat", "3"]].concat());
    s.write(
        "machine.json",
        &json!({
            "name": "delegator",
            "version": "1",
            "steps": [{"name": "delegate", "executor_ref": "call", "config": {"machine": "child"}}],
            "executors": {"call": {"wasm": "fx/call.wasm", "cert": "fx/call.cert", "proof": "fx/call.proof"}}
        }),
    );
    s.write("machine-input.json", &json!({"topic": "wasm"}));
    stage!("run-machine", &["run-machine", "machine.json", "--input", "machine-input.json", "--chain-out", "run.chain"]);
    stage!("provenance verify", &["provenance", "verify", "run.chain"]);
    stage!("env", &["env", "--trust", &certifier, "--out", "env.json"]);
    stage!(
        "attest",
        &[&["attest", "fx/call.wasm"][..], &gate, &["--env", "env.json", "--env-key", "envkeys/env.key", "--out", "call.attest"]]
            .concat()
    );
    let whitelist_hash = s.run(&["whitelist", "hash", "v1"]).json["content_hash"].clone();
    s.write(
        "policy.json",
        &json!({
            "accepted_whitelists": [whitelist_hash],
            "trusted_runtimes": ["purecert-runtime"],
            "trusted_certifiers": [certifier],
            "minimum_required": 1,
            "trusted_env_keys": [env_key],
        }),
    );
    stage!("attest-verify", &["attest-verify", "call.attest", "--policy", "policy.json"]);
    Lifecycle { session: s, stages, cert_hash }
}

