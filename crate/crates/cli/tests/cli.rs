use std::fs;
use std::path::Path;
use std::process::Command;

use sha2::{Digest, Sha256};

fn psfsort(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_psfsort"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("PSFSORT_SEED")
        .env_remove("PSFSORT_MODE")
        .output()
        .expect("binary runs")
}

fn digest_dir(dir: &Path) -> Vec<(String, String)> {
    let mut files: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, hex::encode(Sha256::digest(fs::read(p).unwrap())))
        })
        .collect()
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "grid_n = 3\neps = 0.2,0.1\ndelta = 0.05\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for (dir, workers) in [(&a, "1"), (&b, "4")] {
        let out = psfsort(&["filter", "--config", cfg, "--seed", "11", "--trials", "300", "--workers", workers], dir);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(digest_dir(&a), digest_dir(&b));
}

#[test]
fn estimate_output_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let dir = tmp.path().join(name);
            let out = psfsort(&["estimate", "--seed", "5", "--trials", "20000", "--mode", "shot"], &dir);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            digest_dir(&dir)
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn csvs_carry_manifest_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let out = psfsort(&["resources"], tmp.path());
    assert!(out.status.success());
    let manifest = fs::read(tmp.path().join("manifest.txt")).unwrap();
    let hash = hex::encode(Sha256::digest(&manifest));
    let csv = fs::read_to_string(tmp.path().join("resources.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), format!("# manifest_sha256 = {hash}"));
    assert!(lines.next().unwrap().starts_with("N,eps_st"));
    assert!(lines.next().unwrap().starts_with("10,1e-1,1,10,100,36,"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "n = 10\nsnrr = 10\n").unwrap();
    let out = psfsort(&["resources", "--config", cfg.to_str().unwrap()], &tmp.path().join("o"));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key snrr"));
}

#[test]
fn misspelled_scene_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("scene.cfg");
    fs::write(&cfg, "grid_n = 3\ngama = 0.001\n").unwrap();
    let out = psfsort(&["scene", "--config", cfg.to_str().unwrap()], &tmp.path().join("o"));
    assert!(!out.status.success());
}

#[test]
fn complexity_grid_reaches_three_orders() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.cfg");
    fs::write(&cfg, "n = 10\nr = 0.9090909090909091\ngamma = 0,0.001\neps_st = 0.1\n").unwrap();
    let out = psfsort(&["complexity", "--config", cfg.to_str().unwrap()], &tmp.path().join("o"));
    assert!(out.status.success());
    let csv = fs::read_to_string(tmp.path().join("o/complexity_grid.csv")).unwrap();
    let ratios: Vec<f64> = csv.lines().skip(2).map(|l| l.split(',').nth(6).unwrap().parse().unwrap()).collect();
    assert_eq!(ratios.len(), 2);
    assert!(ratios[0] >= 1e2 && ratios[1] >= 1e3, "{ratios:?}");
}

#[test]
fn selftest_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = psfsort(&["selftest"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn bundled_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let tmp = tempfile::tempdir().unwrap();
    for (file, cmd) in [("scene_default.cfg", "scene"), ("complexity.cfg", "complexity"), ("resources.cfg", "resources")] {
        let path = dir.join(file);
        let out = psfsort(&[cmd, "--config", path.to_str().unwrap()], &tmp.path().join(file));
        assert!(out.status.success(), "{file}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
