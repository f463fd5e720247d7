//! The pure host-function whitelist: versioned, content-hashed, optionally
//! signed by a whitelist authority, and the classifier built on it.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canonical::{to_canonical_bytes, CanonicalError};
use crate::hash::{hash_bytes, Digest};
use crate::keys::{KeyPair, PublicKey, Signature};
use crate::wasm_inspect::{ImportKind, ImportRecord};

/// Namespace of every host function this toolchain ships.
pub const HOST_NAMESPACE: &str = "mashin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HostClass {
    PureData,
    PureDirective,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhitelistEntry {
    pub namespace: String,
    pub name: String,
    pub class: HostClass,
    pub type_signature: String,
}

impl WhitelistEntry {
    pub fn new(namespace: &str, name: &str, class: HostClass, type_signature: &str) -> Self {
        WhitelistEntry {
            namespace: namespace.to_owned(),
            name: name.to_owned(),
            class,
            type_signature: type_signature.to_owned(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WhitelistError {
    #[error("duplicate whitelist entry {namespace}.{name}")]
    DuplicateEntry { namespace: String, name: String },
    #[error("whitelist version must be positive")]
    ZeroVersion,
    #[error("whitelist file is not valid structured text: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
    #[error("authority key and authority signature must appear together")]
    IncompleteAuthority,
    #[error("authority signature does not verify over the content hash")]
    InvalidAuthoritySignature,
    #[error("production mode requires an authority signature")]
    UnsignedInProduction,
    #[error("whitelist signed by {actual}, expected authority {expected}")]
    WrongAuthority { expected: PublicKey, actual: PublicKey },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthoritySignature {
    pub key: PublicKey,
    pub signature: Signature,
}

/// How strictly a whitelist file is checked on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Signature optional; verified when present.
    #[default]
    Development,
    /// Signature required, and must come from `authority` when one is pinned.
    Production { authority: Option<PublicKey> },
}

/// A whitelist version. Immutable once built; `content_hash` always matches
/// the canonical form of `(version, entries)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Whitelist {
    version: u32,
    entries: BTreeMap<(String, String), WhitelistEntry>,
    content_hash: Digest,
    authority: Option<AuthoritySignature>,
}

#[derive(Serialize)]
struct CanonicalWhitelist<'a> {
    version: u32,
    entries: Vec<&'a WhitelistEntry>,
}

/// Canonical bytes of a whitelist: `{"entries":[...],"version":N}` with
/// entries sorted by `(namespace, name)`.
pub fn canonicalize(version: u32, entries: &[WhitelistEntry]) -> Result<Vec<u8>, WhitelistError> {
    let map = index_entries(entries.iter().cloned())?;
    canonical_from_map(version, &map)
}

fn index_entries(
    entries: impl IntoIterator<Item = WhitelistEntry>,
) -> Result<BTreeMap<(String, String), WhitelistEntry>, WhitelistError> {
    let mut map = BTreeMap::new();
    for entry in entries {
        let key = (entry.namespace.clone(), entry.name.clone());
        if map.contains_key(&key) {
            return Err(WhitelistError::DuplicateEntry { namespace: key.0, name: key.1 });
        }
        map.insert(key, entry);
    }
    Ok(map)
}

fn canonical_from_map(
    version: u32,
    map: &BTreeMap<(String, String), WhitelistEntry>,
) -> Result<Vec<u8>, WhitelistError> {
    Ok(to_canonical_bytes(&CanonicalWhitelist { version, entries: map.values().collect() })?)
}

/// On-disk whitelist document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhitelistFile {
    pub version: u32,
    pub entries: Vec<WhitelistEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub authority_key: Option<PublicKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub authority_signature: Option<Signature>,
}

impl Whitelist {
    pub fn new(version: u32, entries: impl IntoIterator<Item = WhitelistEntry>) -> Result<Self, WhitelistError> {
        if version == 0 {
            return Err(WhitelistError::ZeroVersion);
        }
        let entries = index_entries(entries)?;
        let content_hash = hash_bytes(&canonical_from_map(version, &entries)?);
        Ok(Whitelist { version, entries, content_hash, authority: None })
    }

    /// The implemented profile: the four `mashin` functions executors use today.
    pub fn default_v1() -> Self {
        Whitelist::new(1, v1_entries()).expect("built-in whitelist is well formed")
    }

    /// The full design envelope: v1 plus every data operation and directive
    /// constructor, in the `mashin` namespace.
    pub fn extended_v2() -> Self {
        let mut entries = v1_entries();
        entries.extend(extended_entries());
        Whitelist::new(2, entries).expect("built-in whitelist is well formed")
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn content_hash(&self) -> Digest {
        self.content_hash
    }

    pub fn authority(&self) -> Option<&AuthoritySignature> {
        self.authority.as_ref()
    }

    pub fn entries(&self) -> impl Iterator<Item = &WhitelistEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, namespace: &str, name: &str) -> Option<&WhitelistEntry> {
        self.entries.get(&(namespace.to_owned(), name.to_owned()))
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_from_map(self.version, &self.entries).expect("entries were validated at construction")
    }

    /// Signs the content hash with the whitelist authority key.
    pub fn sign(&mut self, authority: &KeyPair) {
        self.authority = Some(AuthoritySignature {
            key: authority.public_key(),
            signature: authority.sign(self.content_hash.as_bytes()),
        });
    }

    /// `Ok(false)` when unsigned, `Ok(true)` when signed and valid.
    pub fn verify_authority(&self) -> Result<bool, WhitelistError> {
        match &self.authority {
            None => Ok(false),
            Some(a) if a.key.verify(self.content_hash.as_bytes(), &a.signature) => Ok(true),
            Some(_) => Err(WhitelistError::InvalidAuthoritySignature),
        }
    }

    pub fn to_file(&self) -> WhitelistFile {
        WhitelistFile {
            version: self.version,
            entries: self.entries.values().cloned().collect(),
            authority_key: self.authority.map(|a| a.key),
            authority_signature: self.authority.map(|a| a.signature),
        }
    }

    pub fn to_file_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(&self.to_file()).expect("whitelist file serializes");
        out.push(b'\n');
        out
    }

    pub fn from_file(file: WhitelistFile, mode: LoadMode) -> Result<Self, WhitelistError> {
        let mut whitelist = Whitelist::new(file.version, file.entries)?;
        whitelist.authority = match (file.authority_key, file.authority_signature) {
            (Some(key), Some(signature)) => Some(AuthoritySignature { key, signature }),
            (None, None) => None,
            _ => return Err(WhitelistError::IncompleteAuthority),
        };
        let signed = whitelist.verify_authority()?;
        if let LoadMode::Production { authority } = mode {
            if !signed {
                return Err(WhitelistError::UnsignedInProduction);
            }
            let actual = whitelist.authority.expect("signed").key;
            if let Some(expected) = authority {
                if expected != actual {
                    return Err(WhitelistError::WrongAuthority { expected, actual });
                }
            }
        }
        Ok(whitelist)
    }

    pub fn from_file_bytes(bytes: &[u8], mode: LoadMode) -> Result<Self, WhitelistError> {
        Self::from_file(serde_json::from_slice(bytes)?, mode)
    }
}

fn v1_entries() -> Vec<WhitelistEntry> {
    use HostClass::*;
    vec![
        WhitelistEntry::new(HOST_NAMESPACE, "get_input_len", PureData, "() -> i32"),
        WhitelistEntry::new(HOST_NAMESPACE, "get_input", PureData, "(i32) -> ()"),
        WhitelistEntry::new(HOST_NAMESPACE, "set_output", PureDirective, "(i32, i32) -> ()"),
        WhitelistEntry::new(HOST_NAMESPACE, "log", PureData, "(i32, i32) -> ()"),
    ]
}

fn extended_entries() -> Vec<WhitelistEntry> {
    use HostClass::*;
    let data: &[(&str, &str)] = &[
        ("mem_alloc", "(i32) -> i32"),
        ("mem_free", "(i32) -> ()"),
        ("mem_copy", "(i32, i32, i32) -> ()"),
        ("str_concat", "(i32, i32, i32, i32) -> i64"),
        ("str_slice", "(i32, i32, i32, i32) -> i64"),
        ("str_len", "(i32, i32) -> i32"),
        ("str_encode_utf8", "(i32, i32) -> i32"),
        ("int_add", "(i64, i64) -> i64"),
        ("int_sub", "(i64, i64) -> i64"),
        ("int_mul", "(i64, i64) -> i64"),
        ("int_div", "(i64, i64) -> i64"),
        ("float_add", "(f64, f64) -> f64"),
        ("float_sub", "(f64, f64) -> f64"),
        ("float_mul", "(f64, f64) -> f64"),
        ("float_div", "(f64, f64) -> f64"),
        ("list_new", "() -> i32"),
        ("list_push", "(i32, i32, i32) -> ()"),
        ("list_get", "(i32, i32) -> i64"),
        ("list_len", "(i32) -> i32"),
        ("map_new", "() -> i32"),
        ("map_put", "(i32, i32, i32, i32, i32) -> ()"),
        ("map_get", "(i32, i32, i32) -> i64"),
        ("map_keys", "(i32) -> i64"),
        ("json_encode", "(i32) -> i64"),
        ("json_decode", "(i32, i32) -> i32"),
        ("ctx_get", "(i32, i32) -> i64"),
        ("ctx_get_step_output", "(i32, i32) -> i64"),
        ("ctx_get_input", "() -> i64"),
    ];
    let directives = [
        "directive_llm_call",
        "directive_llm_call_stream",
        "directive_http_request",
        "directive_file_op",
        "directive_call_machine",
        "directive_memory_op",
        "directive_db_op",
        "directive_exec_op",
        "directive_emit_event",
        "directive_broadcast",
    ];
    data.iter()
        .map(|(name, sig)| WhitelistEntry::new(HOST_NAMESPACE, name, PureData, sig))
        .chain(directives.iter().map(|name| WhitelistEntry::new(HOST_NAMESPACE, name, PureDirective, "(i32, i32) -> ()")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    PureData,
    PureDirective,
    Disallowed,
}

impl Verdict {
    pub fn is_pure(self) -> bool {
        !matches!(self, Verdict::Disallowed)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::PureData => "pure_data",
            Verdict::PureDirective => "pure_directive",
            Verdict::Disallowed => "disallowed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Classification {
    pub import: ImportRecord,
    pub verdict: Verdict,
}

/// Exact match on `(namespace, name, type_signature)` for function imports;
/// everything else is disallowed.
pub fn classify_import(import: &ImportRecord, whitelist: &Whitelist) -> Classification {
    let verdict = match whitelist.get(&import.namespace, &import.name) {
        Some(entry) if import.kind == ImportKind::Function && entry.type_signature == import.type_signature => {
            match entry.class {
                HostClass::PureData => Verdict::PureData,
                HostClass::PureDirective => Verdict::PureDirective,
            }
        }
        _ => Verdict::Disallowed,
    };
    Classification { import: import.clone(), verdict }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "snake_case")]
pub enum CurrencyRejection {
    #[error("whitelist v{version} is below the minimum v{minimum}")]
    StaleWhitelist { version: u32, minimum: u32 },
    #[error("whitelist v{version} is newer than the runtime's v{current}")]
    FutureWhitelist { version: u32, current: u32 },
    #[error("whitelist v{version} hash is not one the runtime recognizes")]
    UnknownWhitelistHash { version: u32 },
}

/// The whitelist snapshot a runtime enforces: the current version, the
/// minimum accepted version, and the recorded hash of every older accepted
/// version.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuntimeWhitelist {
    current: Whitelist,
    minimum_required: u32,
    history: BTreeMap<u32, Digest>,
}

impl RuntimeWhitelist {
    pub fn new(current: Whitelist, minimum_required: u32) -> Self {
        let mut history = BTreeMap::new();
        history.insert(current.version(), current.content_hash());
        RuntimeWhitelist { current, minimum_required: minimum_required.max(1), history }
    }

    /// Records an older accepted version's hash. Entries at or above the
    /// current version are ignored; the current hash is authoritative.
    pub fn with_history(mut self, version: u32, hash: Digest) -> Self {
        if version < self.current.version() {
            self.history.insert(version, hash);
        }
        self
    }

    pub fn current(&self) -> &Whitelist {
        &self.current
    }

    pub fn minimum_required(&self) -> u32 {
        self.minimum_required
    }

    pub fn history(&self) -> &BTreeMap<u32, Digest> {
        &self.history
    }
}

/// Whitelist currency: the certificate's whitelist must lie within
/// `[minimum_required, current]` and its hash must be the one the runtime
/// recorded for that version.
pub fn check_version_range(
    cert_whitelist_version: u32,
    cert_whitelist_hash: &Digest,
    runtime: &RuntimeWhitelist,
) -> Result<(), CurrencyRejection> {
    let current = runtime.current.version();
    if cert_whitelist_version < runtime.minimum_required {
        return Err(CurrencyRejection::StaleWhitelist {
            version: cert_whitelist_version,
            minimum: runtime.minimum_required,
        });
    }
    if cert_whitelist_version > current {
        return Err(CurrencyRejection::FutureWhitelist { version: cert_whitelist_version, current });
    }
    match runtime.history.get(&cert_whitelist_version) {
        Some(known) if known == cert_whitelist_hash => Ok(()),
        _ => Err(CurrencyRejection::UnknownWhitelistHash { version: cert_whitelist_version }),
    }
}
