//! `hybrid`: run simulations, generate keys, audit anchor logs, verify
//! export archives and benchmark the Notary.
//!
//! Exit codes: 0 success, 1 verification or audit failure, 2 usage or IO
//! error. Reports go to standard output as JSON, logs to standard error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hybrid_dlt::anchor::AnchorLog;
use hybrid_dlt::auditor::{audit_anchor, verify_export};
use hybrid_dlt::bench::{run_bench, BenchConfig};
use hybrid_dlt::identity::{generate_keypair, load_public_key, PublicKey};
use hybrid_dlt::ledgerstore::ExportArchive;
use hybrid_dlt::notary::Notarization;
use hybrid_dlt::simnet::{self, parse_script, scenario, scenario_corpus, SimConfig, SimOutcome};
use rand::RngCore;
use serde_json::json;
use thiserror::Error;

#[derive(Parser)]
#[command(
    name = "hybrid",
    version,
    about = "Notarized private ledgers with anchored public histories"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Immediate,
    Delayed,
}

#[derive(Subcommand)]
enum Command {
    /// Run a built-in scenario or a JSON-lines script.
    Sim {
        /// Scenario name or path to a script file.
        scenario: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "sim-out")]
        out: PathBuf,
        /// Scripts only: node count (default: highest actor index + 1).
        #[arg(long)]
        nodes: Option<usize>,
        /// Scripts only: the Notary stores block content.
        #[arg(long)]
        repository: bool,
        /// Scripts only: the Notary enforces ledger policies.
        #[arg(long)]
        policy: bool,
        /// Scripts only: delayed notarization with this interval.
        #[arg(long)]
        delayed_ms: Option<u64>,
    },
    /// List the built-in scenarios.
    Scenarios,
    /// Generate an Ed25519 key pair as `<out>.key` and `<out>.pub`.
    Keygen {
        #[arg(long)]
        out: PathBuf,
        /// 32-byte seed in hex; random when absent.
        #[arg(long)]
        seed: Option<String>,
    },
    /// Audit an anchor log for the Notary's ledgers.
    Audit {
        anchor_log: PathBuf,
        #[arg(long)]
        notary_key: PathBuf,
    },
    /// Verify an export archive against an anchor log.
    VerifyExport {
        archive: PathBuf,
        anchor_log: PathBuf,
        #[arg(long)]
        notary_key: PathBuf,
    },
    /// Measure Notary throughput and node-side hashing.
    Bench {
        /// Single-block extensions per ledger.
        #[arg(long, default_value_t = 1000)]
        blocks: u64,
        #[arg(long, default_value_t = 1024)]
        block_bytes: usize,
        #[arg(long, default_value_t = 1)]
        ledgers: usize,
        #[arg(long, value_enum, default_value_t = Mode::Immediate)]
        mode: Mode,
        /// Delayed mode anchoring interval in simulated ms.
        #[arg(long, default_value_t = 100)]
        interval_ms: u64,
        #[arg(long, default_value_t = 4)]
        threads: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Verdict of a command that ran to completion.
enum Verdict {
    Pass,
    Fail,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| io_err(path, e))
}

fn load_key(path: &Path) -> Result<PublicKey, CliError> {
    load_public_key(path).map_err(|e| io_err(path, e))
}

fn load_log(path: &Path) -> Result<AnchorLog, CliError> {
    AnchorLog::from_bytes(&read(path)?).map_err(|e| io_err(path, e))
}

fn print_json(v: &serde_json::Value) {
    println!("{v}");
}

fn script_config(
    script: &[simnet::ScriptStep],
    seed: u64,
    nodes: Option<usize>,
    repository: bool,
    policy: bool,
    delayed_ms: Option<u64>,
) -> SimConfig {
    let inferred = script
        .iter()
        .filter_map(|s| s.actor.strip_prefix('n').and_then(|i| i.parse::<usize>().ok()))
        .max()
        .map_or(1, |m| m + 1);
    let mut config = SimConfig::new(seed, nodes.unwrap_or(inferred));
    config.notary.repository = repository || policy;
    config.notary.policy = policy;
    if let Some(interval_ms) = delayed_ms {
        config.notary.notarization = Notarization::Delayed { interval_ms };
    }
    config
}

fn write_outputs(out: &Path, outcome: &SimOutcome) -> Result<Vec<String>, CliError> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut files = vec![
        "anchor.hyba".to_string(),
        "anchor.jsonl".into(),
        "audit.jsonl".into(),
        "metrics.json".into(),
        "notary.pub".into(),
        "proofs.jsonl".into(),
    ];
    write(&out.join("anchor.hyba"), outcome.anchor_log.to_bytes())?;
    write(&out.join("anchor.jsonl"), outcome.anchor_log.json_lines())?;
    write(&out.join("audit.jsonl"), outcome.audit.json_lines())?;
    write(&out.join("metrics.json"), outcome.metrics_json())?;
    write(&out.join("notary.pub"), format!("{}\n", outcome.notary_key().to_hex()))?;
    write(&out.join("proofs.jsonl"), outcome.proofs_jsonl())?;
    for e in &outcome.exports {
        let name = format!("export-{}.hybx", e.name);
        write(&out.join(&name), e.archive.to_file_bytes())?;
        write(&out.join(format!("export-{}.jsonl", e.name)), e.archive.json_lines())?;
        files.push(name);
    }
    Ok(files)
}

fn cmd_sim(
    name: &str,
    seed: u64,
    out: &Path,
    nodes: Option<usize>,
    repository: bool,
    policy: bool,
    delayed_ms: Option<u64>,
) -> Result<Verdict, CliError> {
    let (config, script) = match scenario(name, seed) {
        Some(s) => (s.config, s.script),
        None => {
            let path = Path::new(name);
            if !path.is_file() {
                return Err(CliError::Usage(format!("unknown scenario {name:?}")));
            }
            let text = String::from_utf8(read(path)?).map_err(|e| io_err(path, e))?;
            let script = parse_script(&text).map_err(|e| CliError::Usage(e.to_string()))?;
            (
                script_config(&script, seed, nodes, repository, policy, delayed_ms),
                script,
            )
        }
    };
    let outcome = simnet::run(&config, &script).map_err(|e| CliError::Usage(e.to_string()))?;
    let files = write_outputs(out, &outcome)?;
    let detections: Vec<_> = outcome.detections().into_iter().collect();
    print_json(&json!({
        "type": "SimSummary",
        "scenario": name,
        "seed": seed,
        "out": out.display().to_string(),
        "files": files,
        "receipts_issued": outcome.metrics.receipts_issued,
        "anchor_txns": outcome.metrics.anchor_txns,
        "audit_coherent": outcome.audit.all_coherent(),
        "proofs": outcome.proofs.len(),
        "detections": detections,
        "failures": outcome.failures,
        "invariant_errors": outcome.invariant_errors,
    }));
    Ok(Verdict::Pass)
}

fn cmd_scenarios() -> Verdict {
    for s in scenario_corpus(1) {
        print_json(&json!({
            "type": "Scenario",
            "name": s.name,
            "description": s.description,
            "nodes": s.config.node_count,
            "honest": s.honest,
            "expected": s.expected,
        }));
    }
    Verdict::Pass
}

fn cmd_keygen(out: &Path, seed: Option<&str>) -> Result<Verdict, CliError> {
    let seed: [u8; 32] = match seed {
        Some(hex_seed) => hex::decode(hex_seed)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| CliError::Usage("--seed must be 32 bytes of hex".into()))?,
        None => {
            let mut s = [0u8; 32];
            rand::rngs::OsRng.fill_bytes(&mut s);
            s
        }
    };
    let kp = generate_keypair(seed);
    kp.save(out).map_err(|e| io_err(out, e))?;
    print_json(&json!({
        "type": "KeyPair",
        "public_key": kp.public().to_hex(),
        "actor_id": kp.actor_id().digest().to_hex(),
        "secret_file": out.with_extension("key").display().to_string(),
        "public_file": out.with_extension("pub").display().to_string(),
    }));
    Ok(Verdict::Pass)
}

fn cmd_audit(anchor_log: &Path, notary_key: &Path) -> Result<Verdict, CliError> {
    let log = load_log(anchor_log)?;
    let key = load_key(notary_key)?;
    let report = audit_anchor(&log, &key.actor_id());
    print!("{}", report.json_lines());
    print_json(&json!({
        "type": "AuditSummary",
        "ledgers": report.ledgers.len(),
        "coherent": report.all_coherent(),
        "violations": report.violations().count(),
    }));
    Ok(if report.all_coherent() {
        Verdict::Pass
    } else {
        Verdict::Fail
    })
}

fn cmd_verify_export(archive: &Path, anchor_log: &Path, notary_key: &Path) -> Result<Verdict, CliError> {
    let parsed = ExportArchive::from_file_bytes(&read(archive)?).map_err(|e| io_err(archive, e))?;
    let log = load_log(anchor_log)?;
    let key = load_key(notary_key)?;
    let verdict = verify_export(&parsed, &log, &key);
    print_json(&json!({
        "type": "ExportVerdict",
        "ledger_id": parsed.ledger_id.to_hex(),
        "items": parsed.items.len(),
        "accepted": verdict.is_ok(),
        "code": verdict.as_ref().err().map(|e| e.code()),
        "reason": verdict.as_ref().err().map(|e| e.to_string()),
    }));
    Ok(if verdict.is_ok() { Verdict::Pass } else { Verdict::Fail })
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    blocks: u64,
    block_bytes: usize,
    ledgers: usize,
    mode: Mode,
    interval_ms: u64,
    threads: usize,
    seed: u64,
) -> Result<Verdict, CliError> {
    let notarization = match mode {
        Mode::Immediate => Notarization::Immediate,
        Mode::Delayed => Notarization::Delayed { interval_ms },
    };
    let config = BenchConfig {
        extensions: blocks,
        block_bytes,
        ledgers,
        notarization,
        threads,
        seed,
    };
    let report = run_bench(&config).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut v = serde_json::to_value(&report).expect("report serializes");
    v.as_object_mut()
        .expect("object")
        .insert("type".into(), "BenchReport".into());
    print_json(&v);
    let ok = report.audit_coherent
        && report.receipt_chains_coherent
        && report
            .extension_anchor_bound
            .map_or(true, |b| report.max_extension_anchors_per_ledger <= b);
    Ok(if ok { Verdict::Pass } else { Verdict::Fail })
}

fn init_logging() -> Result<(), CliError> {
    let level = match std::env::var("HYBRID_LOG_LEVEL") {
        Err(_) => log::LevelFilter::Error,
        Ok(v) => match v.as_str() {
            "error" => log::LevelFilter::Error,
            "info" => log::LevelFilter::Info,
            "debug" => log::LevelFilter::Debug,
            other => {
                return Err(CliError::Usage(format!(
                    "HYBRID_LOG_LEVEL must be error, info or debug, not {other:?}"
                )))
            }
        },
    };
    env_logger::Builder::new()
        .filter_level(level)
        .target(env_logger::Target::Stderr)
        .init();
    Ok(())
}

fn dispatch(cli: Cli) -> Result<Verdict, CliError> {
    match cli.command {
        Command::Sim {
            scenario,
            seed,
            out,
            nodes,
            repository,
            policy,
            delayed_ms,
        } => cmd_sim(&scenario, seed, &out, nodes, repository, policy, delayed_ms),
        Command::Scenarios => Ok(cmd_scenarios()),
        Command::Keygen { out, seed } => cmd_keygen(&out, seed.as_deref()),
        Command::Audit { anchor_log, notary_key } => cmd_audit(&anchor_log, &notary_key),
        Command::VerifyExport {
            archive,
            anchor_log,
            notary_key,
        } => cmd_verify_export(&archive, &anchor_log, &notary_key),
        Command::Bench {
            blocks,
            block_bytes,
            ledgers,
            mode,
            interval_ms,
            threads,
            seed,
        } => cmd_bench(blocks, block_bytes, ledgers, mode, interval_ms, threads, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = init_logging().and_then(|()| dispatch(cli));
    match result {
        Ok(Verdict::Pass) => ExitCode::SUCCESS,
        Ok(Verdict::Fail) => ExitCode::from(1),
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
