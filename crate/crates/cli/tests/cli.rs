use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coachsim"))
}

fn data() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data")
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn coachsim");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn study_config(dir: &Path, cohort: usize) -> PathBuf {
    let d = data();
    let cfg = serde_json::json!({
        "artifacts": {
            "track": d.join("default_track.json"),
            "expert_bank": d.join("expert/manifest.json"),
            "annotations": d.join("annotations.json"),
            "cluster_map": d.join("cluster_map.json"),
            "skill_library": d.join("skill_library.json"),
        },
        "cohort_size": cohort,
    });
    let path = dir.join("study.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = bin().arg("--bogus").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn invalid_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let custom = dir.path().join("custom.json");
    std::fs::write(&custom, r#"{"stages": {"baseline": 3}}"#).unwrap();
    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{ not json").unwrap();
    for cfg in [&custom, &broken] {
        let out = bin()
            .args(["--config"])
            .arg(cfg)
            .args(["--out"])
            .arg(dir.path().join("out"))
            .arg("run-study")
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(2), "{}", cfg.display());
    }
    let out = bin().arg("report").arg(dir.path().join("missing")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn study_with_fixed_seed_is_repeatable_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = study_config(dir.path(), 4);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let res = run(bin().arg("--config").arg(&cfg).args(["--seed", "7", "--out"]).arg(out).arg("run-study"));
        assert!(res.status.success());
    }
    for f in ["runlog.jsonl", "cohort.json", "report/delta_table.csv", "report/trials.csv", "plots/spectra.csv"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    assert_eq!(
        read(&a.join("trajectories/student_003/stage5_trial2.csv")),
        read(&b.join("trajectories/student_003/stage5_trial2.csv"))
    );

    let rep = dir.path().join("rep");
    assert!(run(bin().arg("--out").arg(&rep).arg("report").arg(&a)).status.success());
    let csv = String::from_utf8(read(&rep.join("delta_table.csv"))).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        rows,
        ["success_rate", "lap_progress", "lap_time", "consistency", "expert_distance", "jerk", "lane_invasions"]
    );
    assert_eq!(csv, String::from_utf8(read(&a.join("report/delta_table.csv"))).unwrap());
    assert!(rep.join("delta_table.json").is_file());

    // One student's stage files give a decision.
    let s = a.join("trajectories/student_000");
    let z = dir.path().join("zpd");
    let res = run(bin()
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&z)
        .arg("zpd")
        .arg("--unassisted")
        .args([s.join("stage1_trial0.csv"), s.join("stage1_trial1.csv"), s.join("stage3_trial0.csv")])
        .arg("--assisted")
        .args([s.join("stage2_trial0.csv"), s.join("stage2_trial1.csv")]));
    assert!(res.status.success());
    let v: serde_json::Value = serde_json::from_slice(&read(&z.join("zpd_decision.json"))).unwrap();
    assert!(v.get("decision").is_some() && v.get("per_channel").is_some());
}
