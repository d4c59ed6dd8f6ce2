use std::path::Path;
use std::process::{Command, Output};

use me_mhacl_cli::RunManifest;

fn bin(args: &[&str], home: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_me-mhacl"))
        .args(args)
        .env("ME_MHACL_HOME", home)
        .output()
        .unwrap()
}

fn ok(args: &[&str], home: &Path) -> String {
    let out = bin(args, home);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn synth_pretrain_finetune_eval_export_round() {
    let t = tempfile::tempdir().unwrap();
    let p = |s: &str| t.path().join(s).to_str().unwrap().to_string();
    let (data, pre, ft, ex) = (p("data"), p("pre"), p("ft"), p("ex"));
    ok(&["synth", "--out", &data, "--seed", "3", "--clips", "16", "--subjects", "4", "--channels", "4", "--timepoints", "32"], t.path());
    assert!(ok(&["check", "--data", &data], t.path()).contains("clips 16, subjects 4"));

    ok(&["--reference", "pretrain", "--data", &data, "--preset", "desk_pretrain", "--epochs", "1", "--out", &pre], t.path());
    let m = manifest(Path::new(&pre));
    assert_eq!(m.command, "pretrain");
    assert_eq!(m.threads, 1);
    assert_eq!(m.config.as_ref().unwrap().epochs, 1);
    assert!(!m.started.is_empty() && m.finished >= m.started);
    for a in &m.artifacts {
        assert!(Path::new(&pre).join(a).exists(), "{a:?}");
    }
    let ck = Path::new(&pre).join("pretrained.ckpt");

    ok(&["finetune", "--preset", "desk_finetune", "--data", &data, "--checkpoint", ck.to_str().unwrap(), "--epochs", "1", "--repeats", "1", "--out", &ft], t.path());
    let best = Path::new(&ft).join("best.ckpt");
    let report = ok(&["eval", "--checkpoint", best.to_str().unwrap(), "--data", &data, "--split", "val", "--out", &p("ev")], t.path());
    let r: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(r["n_samples"], 3 * 4);

    ok(&["export", "--checkpoint", Path::new(&pre).join("last.ckpt").to_str().unwrap(), "--data", &data, "--stage", "projector_input", "--out", &ex], t.path());
    let csv = std::fs::read_to_string(Path::new(&ex).join("embeddings_test_projector_input.csv")).unwrap();
    assert!(csv.starts_with("clip_id,subject_id,valence_high,arousal_high,four_class,f0,"));
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
}

#[test]
fn flags_override_config_file() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok(&["synth", "--out", data.to_str().unwrap(), "--clips", "12", "--subjects", "4", "--channels", "4", "--timepoints", "32"], t.path());
    let cfg = t.path().join("c.toml");
    std::fs::write(&cfg, "stage = \"pretrain\"\nepochs = 1\np = 2\nq = 2\nseed = 5\n").unwrap();
    let out = t.path().join("run");
    ok(&["pretrain", "--config", cfg.to_str().unwrap(), "--seed", "6", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()], t.path());
    let c = manifest(&out).config.unwrap();
    assert_eq!((c.seed, c.p, c.epochs), (6, 2, 1));
    let toml = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(toml.contains("seed = 6"));
}

#[test]
fn default_run_dir_lives_under_home() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok(&["synth", "--out", data.to_str().unwrap(), "--clips", "8", "--subjects", "4", "--channels", "2", "--timepoints", "16"], t.path());
    let s = ok(&["augment", "--data", data.to_str().unwrap(), "--c", "5", "--seed", "2"], t.path());
    assert!(s.contains("c = 5") && s.contains("conservation true"), "{s}");
    let runs: Vec<_> = std::fs::read_dir(t.path().join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].file_name().unwrap().to_str().unwrap().starts_with("augment-"));
    let bin_len = std::fs::metadata(runs[0].join("samples.bin")).unwrap().len();
    assert_eq!(bin_len, (2 * 2 * 2 * 2 * 16 * 4) as u64);
    let groups: me_mhacl_cli::AugmentFile =
        serde_json::from_str(&std::fs::read_to_string(runs[0].join("groups.json")).unwrap()).unwrap();
    assert_eq!(groups.split_position, 5);
    assert_eq!(groups.groups.len(), 4);
}

#[test]
fn errors_map_to_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    let missing = bin(&["eval", "--checkpoint", "/definitely/missing.ckpt", "--data", "/x"], t.path());
    assert_eq!(missing.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("checkpoint not found"));

    assert_eq!(bin(&["check", "--data", data.to_str().unwrap()], t.path()).status.code(), Some(3));
    assert_eq!(bin(&["pretrain", "--preset", "no_such_preset"], t.path()).status.code(), Some(2));
    assert_eq!(bin(&["frobnicate"], t.path()).status.code(), Some(2));

    ok(&["synth", "--out", data.to_str().unwrap(), "--clips", "8", "--subjects", "2", "--channels", "2", "--timepoints", "16"], t.path());
    std::fs::write(data.join("samples.bin"), [0u8; 10]).unwrap();
    assert_eq!(bin(&["check", "--data", data.to_str().unwrap()], t.path()).status.code(), Some(3));
}
