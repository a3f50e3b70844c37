//! The `dydila` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dydila_cli::config::RunConfig;
use dydila_cli::io::parse_pgm;

fn dydila(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dydila"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dydila(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn init_writes_a_loadable_default_config() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["init", "--out", "cfg.json"]);
    let cfg = RunConfig::load(&dir.path().join("cfg.json")).unwrap();
    assert_eq!((cfg.d, cfg.n_p, cfg.n_f, cfg.n_d, cfg.blocks), (384, 3, 9, 9, 9));
    let printed = ok(dir.path(), &["init", "--preset", "base"]);
    assert_eq!(RunConfig::from_json(&printed).unwrap().d, 512);
}

#[test]
fn check_reports_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let table = ok(dir.path(), &["check"]);
    assert!(table.contains("15/15 checks passed"), "{table}");

    fs::write(
        dir.path().join("bad.json"),
        r#"{"preset": "small", "inject_fault": true}"#,
    )
    .unwrap();
    let out = dydila(dir.path(), &["check", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
    let table = String::from_utf8(out.stdout).unwrap();
    let failing: Vec<&str> = table.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert_eq!(failing.len(), 1);
    assert!(failing[0].starts_with("block_reordering"));

    let f32_table = ok(dir.path(), &["check", "--precision", "f32"]);
    assert!(f32_table.contains("1.0e-4"));
}

#[test]
fn invalid_config_is_rejected_with_field_name() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"gamma_init": -1}"#).unwrap();
    let out = dydila(dir.path(), &["check", "--config", "c.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma_init"));
}

#[test]
fn saved_weights_reproduce_seeded_forward() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--dim", "16", "--heads", "2", "--seq-len", "12"];
    let init: Vec<&str> = ["init", "--out", "cfg.json", "--save-weights", "w.json"]
        .into_iter()
        .chain(args)
        .collect();
    ok(dir.path(), &init);
    ok(dir.path(), &["init", "--config", "cfg.json", "--save-weights", "blob"]);
    assert!(dir.path().join("blob.bin").exists());

    let seeded = ok(dir.path(), &["forward", "--config", "cfg.json"]);
    let inline = ok(dir.path(), &["forward", "--config", "cfg.json", "--weights", "w.json"]);
    let blob = ok(
        dir.path(),
        &["forward", "--config", "cfg.json", "--weights", "blob.json"],
    );
    assert_eq!(seeded, inline);
    assert_eq!(seeded, blob);
    assert_eq!(seeded.lines().count(), 13);

    fs::write(dir.path().join("x.csv"), seeded.as_bytes()).unwrap();
    let again = ok(dir.path(), &["forward", "--config", "cfg.json", "--input", "x.csv"]);
    assert_eq!(again.lines().next(), seeded.lines().next());
    assert_ne!(again, seeded);
}

#[test]
fn attention_dump_writes_csv_and_pgm() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["init", "--out", "cfg.json", "--seq-len", "24"]);
    for imp in ["softmax", "linear", "dydila"] {
        ok(
            dir.path(),
            &[
                "dump-attn",
                "--config",
                "cfg.json",
                "--impl",
                imp,
                "--block",
                "1",
                "--query",
                "5",
                "--out",
                imp,
            ],
        );
        let img = parse_pgm(&fs::read(dir.path().join(format!("{imp}.pgm"))).unwrap()).unwrap();
        assert_eq!((img.height, img.width), (4, 6));
        let csv = fs::read_to_string(dir.path().join(format!("{imp}.csv"))).unwrap();
        assert_eq!(csv.lines().next(), Some("row,col,weight"));
        let weights: Vec<f64> = csv
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(weights.len(), 24);
        if imp != "dydila" {
            assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    let out = dydila(
        dir.path(),
        &["dump-attn", "--config", "cfg.json", "--query", "24", "--out", "x"],
    );
    assert!(!out.status.success());
    let out = dydila(
        dir.path(),
        &["dump-attn", "--config", "cfg.json", "--impl", "focused", "--out", "x"],
    );
    assert!(!out.status.success());
}

#[test]
fn lambda_stats_follow_schedule() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.json"),
        r#"{"preset": "custom", "d": 8, "heads": 2, "n_p": 2, "n_f": 3, "n_d": 1,
            "lambda_init_schedule": {"linear": {"start": 0.2, "end": 0.8}}, "grid": {"h": 2, "w": 3},
            "variant": "map-wise"}"#,
    )
    .unwrap();
    let csv = ok(dir.path(), &["stats-lambda", "--config", "c.json"]);
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 9);
    for (b, r) in rows.iter().enumerate() {
        let expected = 0.2 + 0.6 * b as f64 / 8.0;
        assert_eq!(r[0], b as f64);
        for v in &r[1..] {
            assert!((v - expected).abs() < 1e-15);
        }
    }
}

#[test]
fn flops_and_bench_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = ok(
        dir.path(),
        &["flops", "--impl", "linear", "--seq-len", "4096", "--dim", "384"],
    );
    assert!(csv.contains("core,4*N*d^2/h,2415919104\n"));
    let csv = ok(
        dir.path(),
        &[
            "bench",
            "--impl",
            "softmax,linear",
            "--seq-len",
            "16,64",
            "--dim",
            "8",
            "--iters",
            "3",
        ],
    );
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "impl,N,d,heads,mean_s,std_s,flops,median_s,iters");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("softmax,16,8,1,"));
    let out = dydila(dir.path(), &["bench", "--iters", "2", "--seq-len", "16", "--dim", "8"]);
    assert!(!out.status.success());
}
