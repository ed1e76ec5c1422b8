use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn ruleedit(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ruleedit"))
        .args(args)
        .env("RULEEDIT_OUTPUT_DIR", out)
        .output()
        .expect("binary runs")
}

fn with_config(out: &Path, sub: &str, config: &Path) -> Output {
    ruleedit(out, &[sub, "-c", config.to_str().unwrap()])
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    o
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(ruleedit(dir.path(), &["verify"]));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("ok")).count(), 10, "{text}");
}

#[test]
fn stages_run_in_order_and_identity_case_is_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = smoke_config();
    let cfg_bytes = fs::read(&cfg).unwrap();

    let o = with_config(out, "train", &cfg);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("run `gen-data` first"), "{}", stderr(&o));

    ok(with_config(out, "gen-data", &cfg));
    ok(with_config(out, "train", &cfg));
    let o = with_config(out, "eval", &cfg);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("run `edit` first"), "{}", stderr(&o));

    ok(ruleedit(out, &["edit", "-c", cfg.to_str().unwrap(), "--case", "identity"]));
    let o = ruleedit(out, &["edit", "-c", cfg.to_str().unwrap(), "--case", "nope"]);
    assert_eq!(code(&o), 2);
    ok(with_config(out, "edit", &cfg));
    ok(with_config(out, "finetune", &cfg));
    ok(with_config(out, "eval", &cfg));

    let base = fs::read(out.join("model/base.ckpt")).unwrap();
    assert_eq!(fs::read(out.join("cases/identity/edit_L4.ckpt")).unwrap(), base);
    let summary = fs::read_to_string(out.join("cases/identity/edit_L4.toml")).unwrap();
    assert!(summary.contains("initial_loss = 0.0"), "{summary}");

    let csv = fs::read_to_string(out.join("reports/corrections.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let identity: Vec<&Vec<&str>> =
        rows.iter().filter(|r| r[col("config_id")] == "identity" && r[col("method")] == "edit_L4").collect();
    assert_eq!(identity.len(), 4);
    for r in identity {
        assert_eq!(r[col("n_pre")], r[col("n_post")]);
        assert!(matches!(r[col("percent_corrected")], "0" | ""), "{r:?}");
        assert_eq!(r[col("accuracy_drop")], "0");
    }
    assert_eq!(fs::read(&cfg).unwrap(), cfg_bytes);
}

#[test]
fn invalid_config_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    let text = fs::read_to_string(smoke_config()).unwrap().replace("epochs = 1", "epochs = 1\nepohcs = 2");
    fs::write(&bad, text).unwrap();
    let o = with_config(dir.path(), "gen-data", &bad);
    assert_eq!(code(&o), 2);
    let msg = stderr(&o);
    assert!(msg.contains("bad.toml:32:"), "{msg}");
    assert!(msg.contains("epohcs"), "{msg}");

    let o = with_config(dir.path(), "gen-data", &dir.path().join("absent.toml"));
    assert_eq!(code(&o), 2);
    let o = ruleedit(dir.path(), &["--steps-divisor", "0", "gen-data", "-c", smoke_config().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn runs_are_byte_identical_across_worker_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = smoke_config();
    ok(ruleedit(a.path(), &["--jobs", "1", "run", "-c", cfg.to_str().unwrap()]));
    ok(ruleedit(b.path(), &["--jobs", "3", "run", "-c", cfg.to_str().unwrap()]));
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(fa.keys().any(|k| k.ends_with("sweep.csv")));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(fb[k] == *v, "{} differs", k.display());
    }
}
