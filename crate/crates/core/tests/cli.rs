use std::path::Path;
use std::process::Command;

fn mperturb(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mperturb")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn spectrum_writes_lf_csv_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", "[grid]\nm = 15\n");
    let out = tmp.path().join("runs");
    let res = mperturb(&["spectrum", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let dir = String::from_utf8(res.stdout).unwrap();
    let dir = Path::new(dir.trim());
    assert!(dir.file_name().unwrap().to_str().unwrap().starts_with("spectrum_"));
    let csv = std::fs::read_to_string(dir.join("spectrum.csv")).unwrap();
    assert!(csv.starts_with("index,re,im,magnitude,class,residual,left_residual\n"));
    assert!(!csv.contains('\r'));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["status"], "ok");
    assert!(dir.join("timing.json").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let out = out.to_str().unwrap();
    let bad = write(tmp.path(), "bad.toml", "[grid]\nm = 2\n");
    let res = mperturb(&["spectrum", "--config", &bad, "--out", out]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("grid.m"));
    let unknown = write(tmp.path(), "unknown.toml", "[grid]\nmm = 15\n");
    assert_eq!(mperturb(&["spectrum", "--config", &unknown, "--out", out]).status.code(), Some(2));
    // a cutoff radius this large cannot satisfy the cone condition
    let loose = write(tmp.path(), "loose.toml", "[grid]\nm = 15\n[nonlinearity]\ndelta = 5.0\n[manifold]\nr_mesh = 0.05\n");
    let res = mperturb(&["manifold", "unstable", "--config", &loose, "--out", out]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn manifold_unstable_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", "[grid]\nm = 15\n");
    let out = tmp.path().join("runs");
    let res = mperturb(&["manifold", "unstable", "--config", &cfg, "--out", out.to_str().unwrap(), "--threads", "1"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let dir = String::from_utf8(res.stdout).unwrap();
    let dir = Path::new(dir.trim());
    for f in ["patch_samples.csv", "patch_vectors.bin", "patch_meta.json", "iterations.csv", "config.toml", "manifest.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let vecs = mperturb::lab::store::read_vectors(&dir.join("patch_vectors.bin")).unwrap();
    let rows = std::fs::read_to_string(dir.join("patch_samples.csv")).unwrap().lines().count() - 1;
    assert_eq!(vecs.len(), rows);
}
