use coachsim_core::artifacts::Artifacts;
use coachsim_core::protocol::*;
use coachsim_core::students::PerChannel;
use std::sync::OnceLock;

fn artifacts() -> &'static Artifacts {
    static ART: OnceLock<Artifacts> = OnceLock::new();
    ART.get_or_init(|| {
        let cfg = StudyConfig::default();
        Artifacts::load(&cfg.artifacts, &cfg.generate).unwrap()
    })
}

fn small(n: usize, seed: u64) -> StudyConfig {
    StudyConfig {
        cohort_size: n,
        seed,
        ..StudyConfig::default()
    }
}

#[test]
fn fixed_seed_gives_identical_runlog() {
    let art = artifacts();
    let a = run_study(&small(6, 3), art).unwrap().runlog().unwrap();
    let b = run_study(&small(6, 3), art).unwrap().runlog().unwrap();
    assert_eq!(a, b);
    let c = run_study(&small(6, 4), art).unwrap().runlog().unwrap();
    assert_ne!(a, c);
}

#[test]
fn records_follow_protocol_order() {
    let out = run_study(&small(4, 1), artifacts()).unwrap();
    let records = read_runlog(&out.runlog().unwrap()).unwrap();
    for s in 0..4 {
        let mine: Vec<_> = records.iter().filter(|r| r.student == s).collect();
        let shape: Vec<(u8, RecordKind)> = mine.iter().map(|r| (r.stage, r.kind)).collect();
        let t = RecordKind::Trial;
        assert_eq!(
            shape,
            vec![(1, t), (1, t), (2, t), (2, t), (3, t), (4, RecordKind::Practice), (5, t), (5, t), (5, t)]
        );
        assert!(mine.iter().enumerate().all(|(i, r)| r.seq == i));
        let practice = mine[5];
        assert!(practice.zpd.is_some() && practice.decision.is_some());
        assert_eq!(practice.practice_minutes, Some(5.0));
        for r in mine.iter().filter(|r| r.kind == t) {
            assert!(r.trajectory.is_some());
            let m = r.metrics.unwrap();
            assert!(m.lap_time.is_none_or(|t| t <= 180.0));
        }
    }
    for st in &out.students {
        for (_, traj) in &st.trajectories {
            assert!(traj.duration() <= 180.0 + 1e-9);
        }
    }
}

#[test]
fn zero_deficit_cohort_learns_nothing() {
    let cfg = small(8, 2);
    let mut cohort = study_cohort(&cfg).unwrap();
    for (p, t) in &mut cohort {
        p.deficits = PerChannel::splat(0.0);
        *t = p.ground_truth();
    }
    let out = run_cohort(&cfg, artifacts(), cohort).unwrap();
    let table = out.table.expect("table");
    for row in &table.rows {
        for arm in row.arms.values() {
            let d = arm.as_ref().unwrap();
            assert!(d.mean.abs() < 1e-9, "{}: {}", row.metric, d.mean);
        }
    }
}

#[test]
fn outputs_are_written_and_report_rebuilds() {
    let art = artifacts();
    let out = run_study(&small(6, 5), art).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.write(dir.path(), art).unwrap();
    for f in [
        "runlog.jsonl",
        "cohort.json",
        "report/arms.json",
        "report/delta_table.csv",
        "report/delta_table.json",
        "report/trials.csv",
        "report/zpd_summary.json",
        "plots/spectra.csv",
        "plots/spectral_rmse.csv",
        "plots/trajectories.csv",
        "trajectories/student_000/stage1_trial0.csv",
        "trajectories/student_005/stage5_trial2.csv",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let cohort = coachsim_core::students::load_cohort(&dir.path().join("cohort.json")).unwrap();
    assert!(cohort.iter().zip(&out.students).all(|(a, b)| *a == b.profile));
    let text = std::fs::read_to_string(dir.path().join("runlog.jsonl")).unwrap();
    let records = read_runlog(&text).unwrap();
    let arms: Vec<String> = StudyConfig::default().practice_arms.iter().map(|a| a.to_string()).collect();
    let rebuilt = table_from_runlog(&records, dir.path(), &art.track, &arms).unwrap();
    let original = out.table.unwrap();
    assert_eq!(rebuilt.to_csv_string().unwrap(), original.to_csv_string().unwrap());
}

#[test]
fn arms_get_equal_shares() {
    let out = run_study(&small(8, 9), artifacts()).unwrap();
    let n = out.students.iter().filter(|s| s.arms.1 == PracticeArm::SkillSa).count();
    assert_eq!(n, 4);
}
