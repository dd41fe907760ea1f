use std::path::Path;
use std::process::Command;

fn egrsd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_egrsd"))
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let body = format!(
        "total_steps = 6\nbatch_size = 8\ncheckpoint_interval = 3\neval_tasks = 20\nreproducible = true\n{extra}"
    );
    std::fs::write(&path, body).unwrap();
    path
}

fn stdout(cmd: &mut Command) -> (i32, String, String) {
    let out = cmd.output().expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn train_then_gate_and_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run = dir.path().join("run");
    let (code, out, err) = stdout(
        egrsd()
            .args(["--seed", "3", "--output-dir"])
            .arg(&run)
            .args(["train", "--config"])
            .arg(&cfg),
    );
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("steps=6"));

    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,loss,grad_norm_preclip,grad_norm_postclip,mean_reward,accuracy,mean_len,mean_gate,mean_magnitude,wall_ms"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    assert!(
        rows.iter().all(|r| r.ends_with(",0.0")),
        "reproducible runs zero the wall clock"
    );

    let traces = run.join("traces_step00003.jsonl");
    assert!(traces.exists());
    assert!(run.join("traces_step00006.jsonl").exists());

    let (code, out, err) = stdout(egrsd().args(["gate", "--traces"]).arg(&traces));
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("rollout,prompt_id,position,h,h_norm,h_norm_cl,omega,omega_cl"));

    let reports = dir.path().join("reports");
    let (code, _, err) = stdout(
        egrsd()
            .arg("--output-dir")
            .arg(&reports)
            .args(["analyze", "--window", "2", "--traces"])
            .arg(&traces),
    );
    assert_eq!(code, 0, "{err}");
    let regimes = std::fs::read_to_string(reports.join("regimes.csv")).unwrap();
    assert!(regimes.starts_with("# tau_low="));
    for r in ["lock", "fork", "pivot", "mid"] {
        assert!(regimes.lines().any(|l| l.starts_with(r)), "missing {r} row");
    }
}

#[test]
fn same_seed_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        let (code, _, err) = stdout(
            egrsd()
                .args(["--seed", "11", "--output-dir"])
                .arg(&run)
                .args(["train", "--config"])
                .arg(&cfg),
        );
        assert_eq!(code, 0, "{err}");
        files.push(std::fs::read(run.join("metrics.csv")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let full = dir.path().join("full");
    let (code, _, err) = stdout(
        egrsd()
            .args(["--seed", "5", "--output-dir"])
            .arg(&full)
            .args(["train", "--config"])
            .arg(&cfg),
    );
    assert_eq!(code, 0, "{err}");

    let part = dir.path().join("part");
    let (code, _, err) = stdout(
        egrsd()
            .args(["--seed", "5", "--output-dir"])
            .arg(&part)
            .args(["train", "--steps", "3", "--config"])
            .arg(&cfg),
    );
    assert_eq!(code, 0, "{err}");
    let (code, _, err) = stdout(
        egrsd()
            .args(["--seed", "5", "--output-dir"])
            .arg(&part)
            .args(["train", "--steps", "6", "--resume"])
            .arg(part.join("snapshot_step00003.snap")),
    );
    assert_eq!(code, 0, "{err}");

    assert_eq!(
        std::fs::read_to_string(full.join("metrics.csv")).unwrap(),
        std::fs::read_to_string(part.join("metrics.csv")).unwrap()
    );
    let (a, _) = egrsd::io::read_snapshot(&full.join("snapshot_final.snap")).unwrap();
    let (b, _) = egrsd::io::read_snapshot(&part.join("snapshot_final.snap")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "gamma_typo = 0.3\n");
    let (code, _, err) = stdout(
        egrsd()
            .arg("--output-dir")
            .arg(dir.path().join("x"))
            .args(["train", "--config"])
            .arg(&cfg),
    );
    assert_eq!(code, 2);
    assert!(err.contains("gamma_typo"), "{err}");
}

#[test]
fn invalid_gamma_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "gamma = -1.0\n");
    let (code, _, err) = stdout(
        egrsd()
            .arg("--output-dir")
            .arg(dir.path().join("x"))
            .args(["train", "--config"])
            .arg(&cfg),
    );
    assert_eq!(code, 2);
    assert!(err.contains("gamma"), "{err}");
}

#[test]
fn check_with_zero_trials_is_an_error() {
    let (code, _, err) = stdout(egrsd().args(["check", "--trials", "0"]));
    assert_eq!(code, 2);
    assert!(err.contains("trials"), "{err}");
}

#[test]
fn check_passes_and_detects_a_broken_floor() {
    let (code, out, _) = stdout(egrsd().args(["check", "--trials", "200"]));
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("all 12 checks passed"));

    let (code, out, _) =
        stdout(egrsd().args(["check", "--trials", "200", "--inject-gate-floor", "0.0"]));
    assert_eq!(code, 1);
    assert!(out.contains("FAIL gate_bounds"), "{out}");
    assert!(out.contains("gate value within [0.1, 1.0]"), "{out}");
}

#[test]
fn gate_rejects_missing_entropy() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(
        &path,
        r#"{"v":"v1","prompt_id":"p","tokens":[{"token_id":1,"student_logprob":-0.1,"teacher_logprob":-0.2,"mask":true}],"reward":1.0,"correct":true,"completion_length":1}"#,
    )
    .unwrap();
    let (code, _, err) = stdout(egrsd().args(["gate", "--traces"]).arg(&path));
    assert_eq!(code, 2);
    assert!(err.contains("teacher_entropy"), "{err}");
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "method = \"cl_egrsd\"\nwindow = 2\n");
    let out_dir = dir.path().join("sweep");
    let (code, out, err) = stdout(
        egrsd()
            .args(["--seed", "2", "--reproducible", "--output-dir"])
            .arg(&out_dir)
            .args(["sweep", "--gammas", "0,0.3", "--windows", "0,2", "--config"])
            .arg(&cfg),
    );
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("4 cells"), "{out}");
    let table = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(
        rows[0],
        "gamma,window,method,status,accuracy,mean_len,token_efficiency,error"
    );
    assert_eq!(rows.len(), 5);
    assert!(rows[1].starts_with("0.0,0,egrsd,ok"), "{}", rows[1]);
    assert!(rows[2].starts_with("0.0,2,cl_egrsd,ok"), "{}", rows[2]);
}
