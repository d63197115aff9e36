//! End-to-end checks of the command-line interface against the bundled
//! configurations.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dporo"))
}

fn workspace_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dporo-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn exh1_fhom_emits_value_two_per_chain() {
    let out = temp_dir("fhom");
    let status = bin()
        .args(["cell", "fhom", "--config"])
        .arg(workspace_config("exh1.cfg"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(out.join("fhom.csv")).unwrap();
    let mut found = 0;
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        // phase, xi0, k, value, iterations, status
        if fields[1] == "1" {
            let value: f64 = fields[3].parse().unwrap();
            assert!((value - 2.0).abs() < 1e-8, "fhom row {line}");
            found += 1;
        }
    }
    // Both chains, three cell sizes each at xi = 1.
    assert_eq!(found, 6);
}

#[test]
fn exh2_phi_emits_closed_form_values() {
    let out = temp_dir("phi");
    let output = bin()
        .args(["cell", "phi", "--config"])
        .arg(workspace_config("exh2.cfg"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("phi.summary.json")).unwrap())
            .unwrap();
    let extrapolated = summary["extrapolated"].as_array().unwrap();
    let expect = [5.0 / 6.0, 0.0, 5.0 / 6.0]; // z in {-1, 0, 1}, u0 = 0
    for (entry, want) in extrapolated.iter().zip(expect) {
        let got = entry["value"].as_f64().unwrap();
        assert!((got - want).abs() < 1e-9, "phi {got} vs {want}");
    }
    assert_eq!(summary["monotone_in_doubling"], serde_json::json!(true));
}

#[test]
fn zero_period_fails_validation_naming_the_key() {
    let out = temp_dir("badcfg");
    let text = std::fs::read_to_string(workspace_config("exh2.cfg")).unwrap();
    let bad = out.join("bad.cfg");
    std::fs::write(&bad, text.replace("t = 2", "t = 0")).unwrap();
    let output = bin()
        .args(["cell", "phi", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("lattice.t"), "stderr: {stderr}");
}

#[test]
fn task_kind_must_match_subcommand() {
    let output = bin()
        .args(["cell", "fhom", "--config"])
        .arg(workspace_config("exh2.cfg")) // task = phi
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("task.kind"), "stderr: {stderr}");
}

#[test]
fn payloads_are_identical_across_runs_and_worker_counts() {
    let out1 = temp_dir("det1");
    let out2 = temp_dir("det2");
    for (out, workers) in [(&out1, "1"), (&out2, "4")] {
        let status = bin()
            .args(["cell", "phi", "--config"])
            .arg(workspace_config("exh1-phi.cfg"))
            .arg("--out")
            .arg(out)
            .args(["--workers", workers])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(out1.join("phi.csv")).unwrap();
    let b = std::fs::read(out2.join("phi.csv")).unwrap();
    assert_eq!(a, b, "payloads must be bit-identical across worker counts");
}

#[test]
fn islands_task_reports_the_aggregate_constant() {
    let out = temp_dir("islands");
    let status = bin()
        .args(["cell", "islands", "--config"])
        .arg(workspace_config("cross-island.cfg"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("islands.summary.json")).unwrap())
            .unwrap();
    let m = summary["m"].as_f64().unwrap();
    assert!((m - (1.0 / 3.0) / 64.0).abs() < 1e-10, "m = {m}");
}

#[test]
fn analyze_prints_json_report() {
    let output = bin()
        .args(["lattice", "analyze", "--config"])
        .arg(workspace_config("exh2-analyze.cfg"))
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(report["phases"], serde_json::json!(1));
    assert_eq!(report["components"].as_array().unwrap().len(), 1);
}

#[test]
fn report_handles_empty_and_populated_directories() {
    let empty = temp_dir("report-empty");
    let output = bin().arg("report").arg(&empty).output().unwrap();
    assert!(output.status.success());

    let out = temp_dir("report-full");
    let status = bin()
        .args(["cell", "phi", "--config"])
        .arg(workspace_config("exh2.cfg"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    // A corrupt record is reported per file, not fatal.
    std::fs::write(out.join("broken.summary.json"), "{not json").unwrap();
    let output = bin().arg("report").arg(&out).output().unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("phi"), "stdout: {stdout}");
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("broken"), "stderr: {stderr}");
}

#[test]
fn flow_compare_errors_decrease() {
    let out = temp_dir("flowcmp");
    let status = bin()
        .args(["flow", "compare", "--config"])
        .arg(workspace_config("exh2-flow-compare.cfg"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("flow-compare.summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["errors_decreasing"], serde_json::json!(true));
}

#[test]
fn every_bundled_config_executes() {
    let configs_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&configs_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("cfg"))
        .collect();
    entries.sort();
    assert!(!entries.is_empty());
    let out_root = temp_dir("bundled");
    for path in entries {
        let text = std::fs::read_to_string(&path).unwrap();
        let kind = text
            .lines()
            .find_map(|l| l.trim().strip_prefix("kind"))
            .and_then(|l| l.trim().strip_prefix('='))
            .map(|l| l.trim().to_string())
            .unwrap();
        let sub: &[&str] = match kind.as_str() {
            "analyze" => &["lattice", "analyze"],
            "phi" => &["cell", "phi"],
            "fhom" => &["cell", "fhom"],
            "islands" => &["cell", "islands"],
            "gamma-check" => &["gamma", "check"],
            "flow-micro" => &["flow", "micro"],
            "flow-macro" => &["flow", "macro"],
            "flow-compare" => &["flow", "compare"],
            other => panic!("unknown kind {other} in {}", path.display()),
        };
        let out = out_root.join(path.file_stem().unwrap());
        let start = std::time::Instant::now();
        let output = bin()
            .args(sub)
            .arg("--config")
            .arg(&path)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(
            output.status.success(),
            "{} failed: {}",
            path.display(),
            String::from_utf8_lossy(&output.stderr)
        );
        let elapsed = start.elapsed().as_secs_f64();
        assert!(
            elapsed < 120.0,
            "{} exceeded the desk-scale budget: {elapsed:.1} s",
            path.display()
        );
        // Every record is readable by the report printer.
        let report = bin().arg("report").arg(&out).output().unwrap();
        assert!(report.status.success());
        let stdout = String::from_utf8_lossy(&report.stdout);
        assert!(stdout.contains(&kind), "report for {kind}: {stdout}");
    }
}

#[test]
fn pinned_variant_dominates_free_values() {
    let out = temp_dir("phi-pinned");
    let text = std::fs::read_to_string(workspace_config("exh2.cfg")).unwrap();
    let cfg = out.join("pinned.cfg");
    std::fs::write(
        &cfg,
        text.replace("z-grid = -1 0 1", "z-grid = 0.1\nvariant = pinned\nr = 2")
            .replace("m-list = 2 4 8", "m-list = 8 16 32"),
    )
    .unwrap();
    let status = bin()
        .args(["cell", "phi", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("phi.summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["variant"], serde_json::json!("pinned(r=2)"));
    // The boundary-pinned value dominates the free value 5/6 (0.1)^2 and
    // approaches it as the cell grows.
    let free_value = 5.0 / 6.0 * 0.01;
    let csv = std::fs::read_to_string(out.join("phi.csv")).unwrap();
    let mut values = Vec::new();
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        values.push(fields[2].parse::<f64>().unwrap());
    }
    assert_eq!(values.len(), 3);
    for w in values.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "pinned values decrease: {values:?}");
    }
    for v in &values {
        assert!(*v >= free_value - 1e-10, "domination: {v} vs {free_value}");
    }
}
