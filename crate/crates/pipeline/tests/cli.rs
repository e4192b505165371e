use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn incdet(dir: &Path, args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_incdet"))
        .current_dir(dir)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn invalid_config_exits_non_zero() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"build": {"thr_o": 3.0}}"#).unwrap();
    let out = incdet(dir.path(), &["--config", "bad.json", "build-dataset", "x"], "");
    assert!(!out.status.success());
    assert!(text(&out).contains("error"), "{}", text(&out));
}

#[test]
fn learn_without_a_model_or_approval_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = incdet(dir.path(), &["learn", "slow cooker"], "n\n");
    assert!(!out.status.success());
    assert!(text(&out).contains("not approved"), "{}", text(&out));
    let out = incdet(dir.path(), &["learn", "slow cooker", "--yes"], "");
    assert!(!out.status.success());
    assert!(text(&out).contains("train-base"), "{}", text(&out));
}

#[test]
fn full_flow_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("cfg.json"),
        r#"{"corpus": "fx", "base": {"images_per_class": 30, "epochs": 3}, "distill": {"epochs": 2},
            "build": {"images": 40}, "exemplars_per_class": 3}"#,
    )
    .unwrap();
    let ok = |args: &[&str]| {
        let out = incdet(d, args, "");
        assert!(out.status.success(), "{args:?}: {}", text(&out));
        text(&out)
    };
    ok(&["fixture", "fx"]);
    let built = ok(&["--config", "cfg.json", "build-dataset", "slow cooker", "--out", "fx/cooker.json"]);
    assert!(built.contains("crock pot, slow cooker"));
    ok(&["--config", "cfg.json", "train-base"]);
    let learned = ok(&["--config", "cfg.json", "--seed", "3", "learn", "slow cooker", "--yes"]);
    for stage in ["download images", "build dataset", "train model", "transfer model", "total"] {
        assert!(learned.contains(stage), "{learned}");
    }
    let snap = learned
        .lines()
        .find_map(|l| l.strip_prefix("snapshot "))
        .expect("snapshot path printed")
        .to_string();
    assert!(d.join(&snap).exists());

    let evaluated = ok(&["evaluate", &snap, "fx/validation.json"]);
    assert!(evaluated.contains("mAP"));
    let base_snap = std::fs::read_dir(d.join("registry/snapshots"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy() != d.join(&snap).to_string_lossy())
        .unwrap();
    let out = incdet(d, &["evaluate", base_snap.to_str().unwrap(), "fx/cooker.json"], "");
    assert!(!out.status.success());
    assert!(text(&out).contains("unknown to the model"), "{}", text(&out));
}
