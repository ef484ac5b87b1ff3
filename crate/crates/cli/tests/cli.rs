//! End-to-end behaviour of the `swat` binary: exit codes, CSV outputs,
//! seeding and the probe artefacts.

use std::path::Path;
use std::process::{Command, Output};

fn swat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swat")).args(args).env_remove("SWAT_SEED").output().expect("spawn swat")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn csv_records(path: &Path) -> (csv::StringRecord, Vec<csv::StringRecord>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().clone();
    (header, r.records().map(Result::unwrap).collect())
}

fn column(header: &csv::StringRecord, name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

fn write(dir: &Path, name: &str, text: &[u8]) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn count_reports_the_reference_totals() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("count.csv");
    let out = swat(&["count", "--preset", "deit-ti", "--csv", csv.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("total params: 5717032 (5.72M)"), "{text}");
    let (header, rows) = csv_records(&csv);
    let total = rows.iter().find(|r| &r[0] == "total").unwrap();
    assert_eq!(&total[column(&header, "params")], "5717032");
    assert_eq!(&total[column(&header, "flops")], "1246563840");
    let summed: u64 = rows.iter().filter(|r| &r[0] != "total").map(|r| r[column(&header, "params")].parse::<u64>().unwrap()).sum();
    assert_eq!(summed, 5_717_032);
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&swat(&["count", "--preset", "deit-ti", "--input-size", "100"])), 2);
    assert_eq!(code(&swat(&["count", "--preset", "deit-xl"])), 2);
    assert_eq!(code(&swat(&["count"])), 2);
    let cfg = write(dir.path(), "bad.json", br#"{"preset":"tiny-deit","model":{"colour":1}}"#);
    assert_eq!(code(&swat(&["count", "--config", &cfg])), 2);
    assert_eq!(code(&swat(&["check", "--suite", "equiv", "--trials", "5"])), 2);
}

#[test]
fn sweep_rows_follow_the_requested_values() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let out = swat(&["sweep", "--preset", "swat-deit-ti", "--axis", "kernel", "--values", "3,5,7", "--csv", csv.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let (header, rows) = csv_records(&csv);
    let flops: Vec<u64> = rows.iter().map(|r| r[column(&header, "flops")].parse().unwrap()).collect();
    assert_eq!(flops.len(), 3);
    assert!(flops[0] < flops[1] && flops[1] < flops[2], "{flops:?}");
}

#[test]
fn checks_are_reproducible_from_flag_or_environment() {
    let a = swat(&["check", "--suite", "equiv", "--seed", "7"]);
    let b = swat(&["check", "--suite", "equiv", "--seed", "7"]);
    let c = Command::new(env!("CARGO_BIN_EXE_swat"))
        .args(["check", "--suite", "equiv"])
        .env("SWAT_SEED", "7")
        .output()
        .unwrap();
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(a.stdout, c.stdout);
    assert!(stdout(&a).lines().skip(1).all(|l| l.contains(",pass,")), "{}", stdout(&a));
}

#[test]
fn structure_and_permutation_suites_pass() {
    assert_eq!(code(&swat(&["check", "--suite", "structure"])), 0);
    assert_eq!(code(&swat(&["check", "--suite", "perm"])), 0);
}

#[test]
fn injected_gradient_fault_fails_the_gradient_suite() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("grads.csv");
    let out = swat(&["check", "--suite", "grads", "--inject-grad-fault", "gelu:1.5", "--csv", csv.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    let (header, rows) = csv_records(&csv);
    let status = column(&header, "status");
    assert!(rows.iter().any(|r| &r[0] == "op.gelu" && &r[status] == "fail"), "{rows:?}");
    assert_eq!(code(&swat(&["check", "--suite", "grads", "--inject-grad-fault", "nonsense:2"])), 2);
}

fn probe(dir: &Path, args: &[&str]) -> (Output, Vec<csv::StringRecord>, csv::StringRecord) {
    let out_dir = dir.join("probe");
    let mut all = vec!["probe"];
    all.extend_from_slice(args);
    all.extend_from_slice(&["--out", out_dir.to_str().unwrap()]);
    let out = swat(&all);
    let csv = out_dir.join("permutation.csv");
    if !csv.exists() {
        return (out, Vec::new(), csv::StringRecord::new());
    }
    let (header, rows) = csv_records(&csv);
    (out, rows, header)
}

#[test]
fn baseline_without_position_embedding_is_permutation_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "nopos.json", br#"{"preset":"tiny-deit","model":{"pos_emb":false}}"#);
    let (out, rows, header) = probe(dir.path(), &["--config", &cfg, "--attn-layer", "0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let dev: f64 = rows[0][column(&header, "worst_case")].parse().unwrap();
    assert!(dev < 1e-9, "{dev}");
    let pgm = std::fs::read(dir.path().join("probe/attention.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
    assert_eq!(pgm.len(), b"P5\n4 4\n255\n".len() + 16);
}

#[test]
fn structure_aware_channel_mixing_is_permutation_sensitive() {
    for preset in ["tiny-deit-swat", "tiny-mixer-swat"] {
        let dir = tempfile::tempdir().unwrap();
        let (out, rows, header) = probe(dir.path(), &["--preset", preset]);
        assert_eq!(code(&out), 0, "{preset}: {}", String::from_utf8_lossy(&out.stderr));
        let dev: f64 = rows[0][column(&header, "worst_case")].parse().unwrap();
        assert!(dev > 1e-3, "{preset}: {dev}");
        // the final block's map is written by default for transformers only
        let pgm = dir.path().join("probe/attention.pgm");
        assert_eq!(pgm.exists(), preset.contains("deit"), "{preset}");
    }
}

#[test]
fn probe_rejects_unusable_requests() {
    let dir = tempfile::tempdir().unwrap();
    let odd = write(dir.path(), "odd.pgm", &[b"P5\n30 30\n255\n".as_slice(), &[128u8; 900]].concat());
    assert_eq!(code(&probe(dir.path(), &["--preset", "tiny-deit", "--image", &odd]).0), 2);
    assert_eq!(code(&probe(dir.path(), &["--preset", "tiny-mixer", "--attn-layer", "0"]).0), 2);
    assert_eq!(code(&probe(dir.path(), &["--preset", "tiny-deit", "--attn-layer", "9"]).0), 2);
    // identical tokens cannot reveal order, so the sensitivity check fails
    let flat = write(dir.path(), "flat.pgm", &[b"P5\n32 32\n255\n".as_slice(), &[77u8; 1024]].concat());
    assert_eq!(code(&probe(dir.path(), &["--preset", "tiny-deit", "--image", &flat]).0), 1);
    let texture: Vec<u8> = (0..1024u32).map(|i| ((i * 37 + (i / 32) * 11) % 256) as u8).collect();
    let grey = write(dir.path(), "grey.pgm", &[b"P5\n32 32\n255\n".as_slice(), &texture].concat());
    assert_eq!(code(&probe(dir.path(), &["--preset", "tiny-deit", "--image", &grey]).0), 0);
}

#[test]
fn training_writes_a_monotone_best_loss_history() {
    let dir = tempfile::tempdir().unwrap();
    let hist = dir.path().join("history.csv");
    let out = swat(&["train", "--preset", "tiny-mixer-swat", "--epochs", "4", "--out-history", hist.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = csv_records(&hist);
    assert_eq!(rows.len(), 4);
    let best: Vec<f64> = rows.iter().map(|r| r[column(&header, "best_loss")].parse().unwrap()).collect();
    let loss: Vec<f64> = rows.iter().map(|r| r[column(&header, "loss")].parse().unwrap()).collect();
    for i in 0..best.len() {
        assert!(i == 0 || best[i] <= best[i - 1]);
        let floor = loss[..=i].iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(best[i], floor);
    }
}
