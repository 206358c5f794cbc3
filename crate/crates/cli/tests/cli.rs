use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hybrid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybrid"))
        .args(args)
        .env_remove("HYBRID_LOG_LEVEL")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn sim(name: &str, seed: &str, out: &Path) -> Output {
    hybrid(&["sim", name, "--seed", seed, "--out", out.to_str().unwrap()])
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn sim_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&sim("honest-medium", "7", &a)), 0);
    assert_eq!(code(&sim("honest-medium", "7", &b)), 0);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.iter().any(|n| n == "anchor.hyba"));
    assert!(names.iter().any(|n| n.to_string_lossy().ends_with(".hybx")));
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn honest_artifacts_verify() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(code(&sim("honest-small", "3", out)), 0);
    let key = out.join("notary.pub");
    let log = out.join("anchor.hyba");
    let audit = hybrid(&["audit", p(&log), "--notary-key", p(&key)]);
    assert_eq!(code(&audit), 0, "{}", stdout(&audit));
    let archive = out.join("export-L-0.hybx");
    let ok = hybrid(&["verify-export", p(&archive), p(&log), "--notary-key", p(&key)]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));

    let mut bytes = fs::read(&archive).unwrap();
    let tampered = out.join("tampered.hybx");
    let last = bytes.len() - 1;
    bytes[last - 40] ^= 0x01;
    fs::write(&tampered, &bytes).unwrap();
    let bad = hybrid(&["verify-export", p(&tampered), p(&log), "--notary-key", p(&key)]);
    assert!(matches!(code(&bad), 1 | 2), "{}", stdout(&bad));
}

#[test]
fn flipped_content_byte_is_a_content_mismatch() {
    use hybrid_dlt::ledgerstore::{BlockEntry, ExportArchive};
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(code(&sim("honest-small", "3", out)), 0);
    let mut archive = ExportArchive::from_file_bytes(&fs::read(out.join("export-L-0.hybx")).unwrap()).unwrap();
    let item = archive.items.iter_mut().find(|i| i.entry.is_present()).unwrap();
    if let BlockEntry::Present(c) = &mut item.entry {
        c[0] ^= 0x80;
    }
    let path = out.join("flipped.hybx");
    fs::write(&path, archive.to_file_bytes()).unwrap();
    let o = hybrid(&[
        "verify-export",
        p(&path),
        p(&out.join("anchor.hyba")),
        "--notary-key",
        p(&out.join("notary.pub")),
    ]);
    assert_eq!(code(&o), 1);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["code"], "CONTENT_MISMATCH");
}

#[test]
fn export_against_another_log_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&sim("honest-small", "3", &a)), 0);
    assert_eq!(code(&sim("race", "3", &b)), 0);
    let o = hybrid(&[
        "verify-export",
        p(&a.join("export-L-0.hybx")),
        p(&b.join("anchor.hyba")),
        "--notary-key",
        p(&b.join("notary.pub")),
    ]);
    assert_eq!(code(&o), 1, "{}", stdout(&o));
}

#[test]
fn fork_scenario_writes_proofs() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&sim("notary-fork", "1", dir.path())), 0);
    let proofs = fs::read_to_string(dir.path().join("proofs.jsonl")).unwrap();
    assert!(proofs.lines().any(|l| l.contains("\"FORK\"")), "{proofs}");
}

#[test]
fn duplicate_init_fails_audit_naming_both_txns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(code(&sim("duplicate-init", "1", out)), 0);
    let o = hybrid(&[
        "audit",
        p(&out.join("anchor.hyba")),
        "--notary-key",
        p(&out.join("notary.pub")),
    ]);
    assert_eq!(code(&o), 1);
    let text = stdout(&o);
    let line = text
        .lines()
        .find(|l| l.contains("DUPLICATE_INIT"))
        .expect("violation reported");
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    let txns = &v["violations"][0]["txns"];
    assert_eq!(txns.as_array().unwrap().len(), 2, "{line}");
}

#[test]
fn truncated_log_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(code(&sim("honest-small", "3", out)), 0);
    let bytes = fs::read(out.join("anchor.hyba")).unwrap();
    let cut = out.join("cut.hyba");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let o = hybrid(&["audit", p(&cut), "--notary-key", p(&out.join("notary.pub"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&sim("no-such-scenario", "1", dir.path())), 2);
    assert_eq!(code(&hybrid(&["bench", "--blocks", "0"])), 2);
    assert_eq!(code(&hybrid(&["frobnicate"])), 2);
    assert_eq!(
        code(&hybrid(&["audit", "/nonexistent", "--notary-key", "/nonexistent"])),
        2
    );
    let o = Command::new(env!("CARGO_BIN_EXE_hybrid"))
        .args(["scenarios"])
        .env("HYBRID_LOG_LEVEL", "verbose")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn scenarios_lists_the_corpus() {
    let o = hybrid(&["scenarios"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().count(), 16);
}

#[test]
fn keygen_writes_loadable_keys() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("me");
    let seed = "11".repeat(32);
    let o = hybrid(&["keygen", "--out", p(&prefix), "--seed", &seed]);
    assert_eq!(code(&o), 0);
    let key = hybrid_dlt::identity::load_public_key(&prefix.with_extension("pub")).unwrap();
    let kp = hybrid_dlt::identity::KeyPair::load(&prefix.with_extension("key")).unwrap();
    assert_eq!(kp.public(), key);
    assert_eq!(code(&hybrid(&["keygen", "--out", p(&prefix), "--seed", "zz"])), 2);
}

#[test]
fn bench_reports_json() {
    let o = hybrid(&[
        "bench",
        "--blocks",
        "50",
        "--ledgers",
        "3",
        "--mode",
        "delayed",
        "--interval-ms",
        "10",
    ]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["receipts"], 150);
    assert_eq!(v["receipt_chains_coherent"], true);
}

#[test]
fn script_files_run() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("s.jsonl");
    fs::write(
        &script,
        concat!(
            r#"{"time_ms":0,"actor":"n0","action":"create","params":{"ledger":"X","authors":[0,1]}}"#,
            "\n",
            r#"{"time_ms":100,"actor":"n1","action":"extend","params":{"ledger":"X","blocks":2}}"#,
            "\n",
            r#"{"time_ms":400,"actor":"n0","action":"export","params":{"ledger":"X"}}"#,
            "\n",
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = sim(p(&script), "5", &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["receipts_issued"], 2);
    fs::write(&script, r#"{"time_ms":0,"actor":"n0","action":"fly"}"#).unwrap();
    assert_eq!(code(&sim(p(&script), "5", &out)), 2);
}
