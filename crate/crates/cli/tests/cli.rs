//! End-to-end checks of the binary: exit codes, artifact layout, and the
//! manifest digest contract, on a small synthetic dataset.

use std::path::Path;
use std::process::Command;

fn ignnet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ignnet"))
}

/// Deterministic learnable binary task: label depends on a + b.
fn write_dataset(path: &Path) {
    let mut csv = String::from("a,b,c,color,y\n");
    let mut state = 12345u64;
    let mut next = || {
        // xorshift keeps the fixture reproducible without pulling in an RNG
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..240 {
        let a = next();
        let b = next();
        let c = next();
        let color = if next() > 0.5 { "red" } else { "blue" };
        let y = i32::from(a + b > 1.0);
        csv.push_str(&format!("{a:.6},{b:.6},{c:.6},{color},{y}\n"));
    }
    std::fs::write(path, csv).unwrap();
}

fn write_config(dir: &Path, out: &Path) -> std::path::PathBuf {
    let csv = dir.join("data.csv");
    write_dataset(&csv);
    let config = serde_json::json!({
        "dataset": { "csv": csv },
        "target": "y",
        "split": { "fractions": [0.6, 0.2, 0.2], "seed": 0 },
        "graph": { "self_loop": 5.0 },
        "model": { "mp_layers": 1 },
        "train": { "max_epochs": 5, "batch_size": 32, "patience": 5, "seed": 0,
                   "learning_rate": 0.01 },
        "output_dir": out
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::Digest;
    sha2::Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[test]
fn train_explain_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = write_config(dir.path(), &out);

    let status = ignnet()
        .args(["train", "--config"])
        .arg(&config)
        .status()
        .unwrap();
    assert!(status.success());
    for artifact in ["model.json", "train_report.json", "graph.json", "manifest.json"] {
        assert!(out.join(artifact).exists(), "{artifact} missing");
    }

    // every manifest entry's digest matches the file on disk
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
            .unwrap();
    let artifacts = manifest["artifacts"].as_array().unwrap();
    assert!(!artifacts.is_empty());
    for entry in artifacts {
        let bytes = std::fs::read(out.join(entry["path"].as_str().unwrap())).unwrap();
        assert_eq!(entry["sha256"].as_str().unwrap(), sha256_hex(&bytes));
        assert_eq!(entry["bytes"].as_u64().unwrap() as usize, bytes.len());
    }

    let model = out.join("model.json");
    let output = ignnet()
        .args(["eval", "--split", "test", "--json", "--config"])
        .arg(&config)
        .args(["--model"])
        .arg(&model)
        .output()
        .unwrap();
    assert!(output.status.success());
    let eval: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert!(eval["auc"].as_f64().unwrap() > 0.5);

    let output = ignnet()
        .args(["explain", "--row", "0", "--top-k", "3", "--json", "--config"])
        .arg(&config)
        .args(["--model"])
        .arg(&model)
        .output()
        .unwrap();
    assert!(output.status.success());
    let explanation: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    // the additivity check already ran in-process; spot-check the payload
    assert_eq!(explanation["tau"].as_array().unwrap().len(), 5); // 3 numeric + 2 one-hot
    let svg = std::fs::read_to_string(out.join("explanation.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn config_errors_use_exit_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{ "preset": "abalone", "bogus_key": 1 }"#).unwrap();
    let output = ignnet()
        .args(["train", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("bogus_key"), "stderr: {stderr}");

    let output = ignnet()
        .args(["train", "--config", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "dataset": { "csv": dir.path().join("absent.csv") },
            "target": "y"
        })
        .to_string(),
    )
    .unwrap();
    let output = ignnet()
        .args(["train", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("[tabular_data]"), "stderr: {stderr}");
}
