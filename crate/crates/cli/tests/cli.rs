use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pe_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pe-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn bundled_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/repeatcopy.json")
}

fn cell(csv: &str, row: usize, col: usize) -> Option<f64> {
    let line = csv.lines().filter(|l| !l.starts_with('#')).nth(row).unwrap();
    let field = line.split(',').nth(col).unwrap();
    (!field.is_empty()).then(|| field.parse().unwrap())
}

#[test]
fn bias_export_anchor_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = pe_lab(&["bias", "alibi", "--head", "6", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("alibi_head6_mult.csv")).unwrap();
    assert!(csv.starts_with("# preset=alibi, head=6, L=512\n"));
    let v = cell(&csv, 511, 0).unwrap();
    assert!((v - 0.000341).abs() < 5e-7, "{v}");
    assert_eq!(cell(&csv, 0, 1), None);
}

#[test]
fn bias_export_with_cache_and_additive_form() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = pe_lab(&["bias", "mep-free", "--len", "16", "--form", "add", "--cache", "--out", d]);
    assert_eq!(code(&out), 0);
    assert!(dir.path().join("mep-free_head1_add.csv").exists());
    let cache = pe_lab::bias::read_cache(&dir.path().join("mep-free.mepb")).unwrap();
    assert_eq!((cache.heads(), cache.len()), (8, 16));
}

#[test]
fn bias_single_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = pe_lab(&["bias", "gaussian", "--len", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let csv = std::fs::read_to_string(dir.path().join("gaussian_head1_mult.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(cell(&csv, 0, 0), Some(1.0));
}

#[test]
fn invalid_arguments_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(code(&pe_lab(&["bias", "rope", "--out", d])), 2);
    assert_eq!(code(&pe_lab(&["bias", "alibi", "--head", "0", "--out", d])), 2);
    assert_eq!(code(&pe_lab(&["bias", "alibi", "--head", "9", "--out", d])), 2);
    assert_eq!(code(&pe_lab(&["frobnicate"])), 2);
}

#[test]
fn unwritable_output_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let out = pe_lab(&["bias", "alibi", "--len", "4", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&pe_lab(&["compare", missing.to_str().unwrap()])), 3);
}

#[test]
fn curves_and_smoothness_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = pe_lab(&["curves", "alibi", "mep-free", "--len", "64", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let curve = std::fs::read_to_string(dir.path().join("alibi.csv")).unwrap();
    assert!(curve.starts_with("d,value\n0,1\n"));
    assert_eq!(curve.lines().count(), 65);
    let table = std::fs::read_to_string(dir.path().join("smoothness.csv")).unwrap();
    assert!(table.starts_with("preset,max_step\nalibi,"));
    assert!(table.contains("\nmep-free,"));
}

#[test]
fn verify_appendix_defaults_report_crossover() {
    let out = pe_lab(&["verify-appendix"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let x0: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("x0 = "))
        .expect("x0 line")
        .parse()
        .unwrap();
    assert!((x0 - 2.7357).abs() < 0.01, "{x0}");
    assert!(text.contains("at x = 1: inequality fails"));
}

#[test]
fn verify_appendix_without_crossover_exits_1() {
    let out = pe_lab(&["verify-appendix", "--sigma2", "0.01"]);
    assert_eq!(code(&out), 1);
    assert!(!stdout(&out).contains("x0 ="));
}

#[test]
fn ablate_slopes_only_prints_schedules() {
    let cfg = bundled_config();
    let cfg = cfg.to_str().unwrap();
    let out = pe_lab(&["ablate-slopes", cfg, "--schedule", "h=2", "--schedule", "6t9", "--slopes-only"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("h=2: 0.25 0.25 0.25 0.25"), "{text}");
    // bundled config has 4 heads: exponents 2,4,6,8 with 6 moved to 9
    assert!(text.contains("6t9: 0.25 0.0625 0.001953125 0.00390625"), "{text}");
    let bad = pe_lab(&["ablate-slopes", cfg, "--schedule", "t9", "--slopes-only"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn bundled_config_compare_is_reproducible() {
    let cfg = bundled_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = |dir: &Path| {
        let out = pe_lab(&["compare", cfg.to_str().unwrap(), "--seeds", "1,2", "--out", dir.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        stdout(&out)
    };
    let text = run(a.path());
    run(b.path());
    let report = std::fs::read_to_string(a.path().join("report.csv")).unwrap();
    // 2 presets x 2 seeds x 3 eval lengths
    assert_eq!(report.lines().count(), 1 + 2 * 2 * 3);
    let summary = std::fs::read_to_string(a.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 3);
    for line in summary.lines().skip(1) {
        let median: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert!(median.is_finite() && median >= 1.0, "{line}");
    }
    assert!(text.contains("preset,eval_len,seeds,median_ppl,spread"));
    for name in ["report.csv", "report.json", "summary.csv", "loss_curves.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn train_writes_curves_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bundled_config();
    let out = pe_lab(&[
        "train",
        cfg.to_str().unwrap(),
        "--steps",
        "5",
        "--seeds",
        "1",
        "--presets",
        "t5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let curves = std::fs::read_to_string(dir.path().join("loss_curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 5);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("train_summary.json")).unwrap()).unwrap();
    assert_eq!(summary[0]["preset"], "t5");
}

#[test]
fn help_matches_golden_file() {
    let out = pe_lab(&["--help"]);
    assert_eq!(code(&out), 0);
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/help.txt");
    let expected = std::fs::read_to_string(golden).unwrap();
    assert_eq!(stdout(&out), expected);
}
