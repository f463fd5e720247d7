use std::fs;
use std::path::{Path, PathBuf};

use purecert::certificate::PurityCertificate;
use purecert::gate::{DecisionLog, GatePolicy};
use purecert::keys::{KeyPair, PublicKey, TrustSet};
use purecert::proof::PurityProof;
use purecert::whitelist::{LoadMode, RuntimeWhitelist, Whitelist};
use serde_json::{json, Value};

use crate::PolicyArgs;

#[derive(Debug)]
pub enum Failure {
    /// A gate, attestation or chain check said no. Exit 1.
    Rejected { message: String, detail: Option<Value> },
    /// Bad arguments, unreadable or malformed files. Exit 2.
    Usage(String),
}

impl Failure {
    pub fn rejected(message: impl Into<String>, detail: Value) -> Self {
        Failure::Rejected { message: message.into(), detail: Some(detail) }
    }
}

pub type Outcome = Result<(), Failure>;

pub fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

pub struct Context {
    pub json: bool,
    pub home: PathBuf,
}

impl Context {
    pub fn emit(&self, value: Value, text: impl AsRef<str>) {
        if self.json {
            println!("{value}");
        } else {
            println!("{}", text.as_ref());
        }
    }

    pub fn emit_error(&self, message: &str, detail: Option<Value>) {
        if self.json {
            println!("{}", json!({"ok": false, "error": message, "detail": detail}));
        } else {
            eprintln!("error: {message}");
        }
    }

    pub fn keys_dir(&self) -> PathBuf {
        self.home.join("keys")
    }

    pub fn log_path(&self) -> PathBuf {
        self.home.join("decisions.log")
    }

    pub fn open_log(&self) -> Result<DecisionLog, Failure> {
        fs::create_dir_all(&self.home).map_err(|e| usage(format!("{}: {e}", self.home.display())))?;
        DecisionLog::open(&self.log_path()).map_err(usage)
    }

    /// Explicit `--trust` values, else every public key in the key directory.
    pub fn trust_set(&self, trust: &[String]) -> Result<TrustSet, Failure> {
        let mut set = TrustSet::new();
        if trust.is_empty() {
            let Ok(dir) = fs::read_dir(self.keys_dir()) else { return Ok(set) };
            let mut paths: Vec<PathBuf> = dir.filter_map(|e| e.ok().map(|e| e.path())).collect();
            paths.sort();
            for p in paths.iter().filter(|p| p.extension().is_some_and(|x| x == "pub")) {
                set.extend(read_public_keys(p)?);
            }
            return Ok(set);
        }
        for t in trust {
            match PublicKey::from_hex(t.trim()) {
                Ok(k) => {
                    set.insert(k);
                }
                Err(_) => set.extend(read_public_keys(Path::new(t))?),
            }
        }
        Ok(set)
    }

    pub fn gate_policy(&self, args: &PolicyArgs) -> Result<GatePolicy, Failure> {
        Ok(GatePolicy { whitelist: runtime_whitelist(args)?, trusted_keys: self.trust_set(&args.trust)? })
    }
}

fn read_public_keys(path: &Path) -> Result<Vec<PublicKey>, Failure> {
    read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| PublicKey::from_hex(l).map_err(|e| usage(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| usage(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn read_json(path: &Path) -> Result<Value, Failure> {
    serde_json::from_slice(&read_bytes(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn read_key(path: &Path) -> Result<KeyPair, Failure> {
    KeyPair::read_keyfile(path).map_err(usage)
}

pub fn read_cert(path: &Path) -> Result<PurityCertificate, Failure> {
    PurityCertificate::from_bytes(&read_bytes(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn read_proof(path: &Path) -> Result<PurityProof, Failure> {
    PurityProof::from_bytes(&read_bytes(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// A whitelist file, or the built-in `v1` / `v2` when no such file exists.
pub fn load_whitelist(spec: &str) -> Result<Whitelist, Failure> {
    let path = Path::new(spec);
    if path.exists() {
        return Whitelist::from_file_bytes(&read_bytes(path)?, LoadMode::Development)
            .map_err(|e| usage(format!("{spec}: {e}")));
    }
    match spec {
        "v1" => Ok(Whitelist::default_v1()),
        "v2" => Ok(Whitelist::extended_v2()),
        _ => Err(usage(format!("{spec}: no such whitelist file or built-in"))),
    }
}

pub fn runtime_whitelist(args: &PolicyArgs) -> Result<RuntimeWhitelist, Failure> {
    let mut rt = RuntimeWhitelist::new(load_whitelist(&args.whitelist)?, args.min_version);
    for p in &args.history {
        let w = load_whitelist(&p.to_string_lossy())?;
        rt = rt.with_history(w.version(), w.content_hash());
    }
    Ok(rt)
}

/// `dir/stem.ext` next to `path`.
pub fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

pub fn to_value(v: &impl serde::Serialize) -> Value {
    serde_json::to_value(v).expect("plain data serializes")
}
