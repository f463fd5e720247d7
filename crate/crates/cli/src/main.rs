use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod support;

use support::Failure;

/// Certify, gate and run pure WebAssembly executors.
#[derive(Parser, Debug)]
#[command(name = "purecert", version)]
struct Cli {
    /// Emit structured output instead of text.
    #[arg(long, global = true)]
    json: bool,

    /// Directory holding keys and the gate decision log.
    #[arg(long, global = true, env = "PURECERT_HOME", default_value = ".purecert")]
    home: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate an Ed25519 keypair under <home>/keys.
    Keygen {
        #[arg(long, default_value = "certifier")]
        name: String,
        /// Write the key here instead of <home>/keys/<name>.key.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Inspect, sign or export whitelist files.
    #[command(subcommand)]
    Whitelist(WhitelistCommand),
    /// Build a purity proof and sign a certificate for a binary.
    Certify {
        wasm: PathBuf,
        /// Certifier key file (default <home>/keys/certifier.key).
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long, default_value = "v1")]
        whitelist: String,
        #[arg(long)]
        cert_out: Option<PathBuf>,
        #[arg(long)]
        proof_out: Option<PathBuf>,
    },
    /// Run the gate checks without touching the decision log.
    Verify(GateArgs),
    /// Run the gate checks and append the decision to the log.
    Gate(GateArgs),
    /// Gate a binary, then plan it against an input document.
    Run {
        #[command(flatten)]
        gate: GateArgs,
        /// JSON document with `step_config` and `context`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        fuel: Option<u64>,
        /// Linear memory ceiling in bytes.
        #[arg(long)]
        mem_max: Option<usize>,
        /// Wall-clock limit in milliseconds.
        #[arg(long)]
        timeout: Option<u64>,
        #[arg(long, default_value_t = 1)]
        repeat: usize,
    },
    /// Run every step of a machine file and write its provenance chain.
    RunMachine {
        machine: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        chain_out: Option<PathBuf>,
        /// tier1, tier2 or tier3.
        #[arg(long, default_value = "tier1")]
        min_tier: String,
        /// Hosts http_request directives may reach; other hosts are denied.
        #[arg(long = "allow-host")]
        allow_hosts: Vec<String>,
    },
    /// Write an environment descriptor for this runtime.
    Env {
        #[arg(long, default_value = "purecert-runtime")]
        runtime_identity: String,
        #[arg(long, default_value = env!("CARGO_PKG_VERSION"))]
        runtime_version: String,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Countersign a gate-accepted certificate as the executing environment.
    Attest {
        wasm: PathBuf,
        #[arg(long)]
        cert: PathBuf,
        #[arg(long)]
        proof: PathBuf,
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        env_key: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify an attestation record against an organization policy.
    AttestVerify {
        attestation: PathBuf,
        #[arg(long)]
        policy: PathBuf,
    },
    /// Verify or combine provenance chains.
    #[command(subcommand)]
    Provenance(ProvenanceCommand),
    /// Measure latency and size metrics over the fixture corpus.
    Bench {
        /// verify_latency, plan_latency, serialize_latency, cert_size, cache_speedup or all.
        #[arg(long, default_value = "all")]
        metric: String,
        #[arg(long, default_value = "call")]
        executor: String,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
    },
    /// Fixture corpus utilities.
    #[command(subcommand)]
    Fixtures(FixturesCommand),
}

#[derive(Subcommand, Debug)]
enum WhitelistCommand {
    /// Write a built-in whitelist (v1 or v2) as a file.
    Export {
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the version and content hash.
    Hash { file: PathBuf },
    /// Sign the content hash with an authority key.
    Sign {
        file: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Require a valid authority signature, optionally from a pinned key.
    Verify {
        file: PathBuf,
        #[arg(long)]
        authority: Option<String>,
    },
}

#[derive(Subcommand, Debug)]
enum ProvenanceCommand {
    /// Recompute every link of a chain file.
    Verify { chain: PathBuf },
    /// Join a caller run, a callee attestation and the callee run.
    CrossOrg {
        #[arg(long)]
        caller: PathBuf,
        #[arg(long)]
        attestation: PathBuf,
        #[arg(long)]
        callee: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum FixturesCommand {
    /// Assemble the corpus into .wat and .wasm files.
    Build {
        #[arg(long, default_value = "fixtures")]
        out: PathBuf,
    },
}

/// The runtime whitelist and trust store the gate enforces.
#[derive(Args, Debug, Clone)]
pub struct PolicyArgs {
    /// Whitelist file, or `v1` / `v2` for a built-in one.
    #[arg(long, default_value = "v1")]
    whitelist: String,
    /// Older whitelist files still accepted.
    #[arg(long = "accept-whitelist")]
    history: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    min_version: u32,
    /// Trusted certifier key as hex or a .pub file; repeatable.
    /// Defaults to every <home>/keys/*.pub.
    #[arg(long)]
    trust: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct GateArgs {
    wasm: PathBuf,
    #[arg(long)]
    cert: PathBuf,
    #[arg(long)]
    proof: PathBuf,
    #[command(flatten)]
    policy: PolicyArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = support::Context { json: cli.json, home: cli.home };
    match commands::dispatch(&ctx, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Rejected { message, detail }) => {
            ctx.emit_error(&message, detail);
            ExitCode::from(1)
        }
        Err(Failure::Usage(message)) => {
            ctx.emit_error(&message, None);
            ExitCode::from(2)
        }
    }
}
