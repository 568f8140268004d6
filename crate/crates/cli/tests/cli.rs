use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sash(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sash"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run sash")
}

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small_strong.json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let out = sash(&["experiment"]);
    assert_eq!(out.status.code(), Some(2));
    let out = sash(&["sash", "run", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let out = sash(&["sash", "run", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn corrupt_summary_frame_is_a_protocol_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config();
    assert!(sash(&["simgen", "--config", s(&cfg), "--out-dir", s(d)])
        .status
        .success());
    let bad = d.join("bad.sash");
    std::fs::write(&bad, b"SASH\x01\x02\x10\x00\x00\x00\x00\x00\x00\x00short").unwrap();
    let out = sash(&[
        "aggregate",
        "--config",
        s(&cfg),
        "--out-dir",
        s(d),
        "--labeled",
        s(&d.join("site-1.csv")),
        "--summaries",
        s(&bad),
    ]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn simulated_sites_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config();
    assert!(sash(&["simgen", "--config", s(&cfg), "--out-dir", s(d)])
        .status
        .success());
    let sites: Vec<PathBuf> = (1..=3).map(|i| d.join(format!("site-{i}.csv"))).collect();
    let run = d.join("run");
    std::fs::create_dir(&run).unwrap();
    let mut args = vec![
        "sash",
        "run",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&run),
        "--transport",
        "files",
        "--data",
    ];
    args.extend(sites.iter().map(|p| s(p)));
    let out = sash(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in ["fit.json", "estimate.json", "report.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let report = std::fs::read_to_string(run.join("report.csv")).unwrap();
    assert_eq!(report.lines().next(), Some("j,beta,gamma"));
    assert_eq!(report.lines().count(), 21);

    let out = sash(&[
        "eval",
        "--out-dir",
        s(&run),
        "--data",
        s(&sites[0]),
        "--estimate",
        s(&run.join("estimate.json")),
        "--truth",
        s(&d.join("truth.json")),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let eval: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("eval.json")).unwrap()).unwrap();
    assert!(eval.to_string().contains("beta_l2"), "{eval}");
}
