//! The five-stage study run over a simulated cohort: baseline, modeling,
//! post-modeling, practice, evaluation.

use crate::artifacts::{read_config, ArtifactPaths, Artifacts, GenerateConfig};
use crate::autonomy::SaMode;
use crate::error::{Error, Result};
use crate::io::{write_json, write_text};
use crate::metrics::{
    consistency, delta_table, spectrum_rmse, steering_fft, trial_metrics, DeltaTable, JerkMode, StageMetrics,
    StudentStages, TrialMetrics,
};
use crate::sim::{run_trial, Sim, SimConfig};
use crate::students::{load_cohort, make_cohort, practice_update, CohortSpec, PerChannel, StudentDriver, StudentModel, StudentProfile};
use crate::trajectory::Trajectory;
use crate::vehicle::Channel;
use crate::zpd::{average_trajectories, choose_skill, zpd_scores, ZpdConfig, ZpdReport};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PracticeArm {
    SelfPractice,
    SkillSa,
}

impl PracticeArm {
    pub fn as_str(self) -> &'static str {
        match self {
            PracticeArm::SelfPractice => "self_practice",
            PracticeArm::SkillSa => "skill_sa",
        }
    }
}

impl fmt::Display for PracticeArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PracticeArm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self_practice" => Ok(PracticeArm::SelfPractice),
            "skill_sa" => Ok(PracticeArm::SkillSa),
            other => Err(Error::invalid(format!("unknown practice arm {other:?}"))),
        }
    }
}

/// Trial counts per stage and the practice duration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StagePlan {
    pub baseline: usize,
    pub modeling: usize,
    pub post_modeling: usize,
    pub practice_minutes: f64,
    pub evaluation: usize,
}

impl StagePlan {
    pub const STANDARD: StagePlan = StagePlan {
        baseline: 2,
        modeling: 2,
        post_modeling: 1,
        practice_minutes: 5.0,
        evaluation: 3,
    };

    pub fn is_standard(&self) -> bool {
        *self == Self::STANDARD
    }
}

impl Default for StagePlan {
    fn default() -> Self {
        Self::STANDARD
    }
}

pub const TIME_LIMIT: f64 = 180.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub artifacts: ArtifactPaths,
    pub generate: GenerateConfig,
    /// Explicit cohort; when absent one is generated from `cohort`.
    pub cohort_file: Option<PathBuf>,
    pub cohort_size: usize,
    pub cohort: CohortSpec,
    pub student_model: StudentModel,
    pub modeling_arms: Vec<SaMode>,
    pub practice_arms: Vec<PracticeArm>,
    pub stages: StagePlan,
    /// Average the post-modeling trial into the unassisted ZPD input.
    pub zpd_includes_post_modeling: bool,
    /// Length of one practice rollout before the car is reset, seconds.
    pub practice_rollout: f64,
    pub sim: SimConfig,
    pub zpd: ZpdConfig,
    pub jerk: JerkMode,
    /// Root of the cohort and arm substreams.
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            artifacts: ArtifactPaths::default(),
            generate: GenerateConfig::default(),
            cohort_file: None,
            cohort_size: 50,
            cohort: CohortSpec::default(),
            student_model: StudentModel::default(),
            modeling_arms: vec![SaMode::StrongSa],
            practice_arms: vec![PracticeArm::SelfPractice, PracticeArm::SkillSa],
            stages: StagePlan::STANDARD,
            zpd_includes_post_modeling: true,
            practice_rollout: 60.0,
            sim: SimConfig::default(),
            zpd: ZpdConfig::default(),
            jerk: JerkMode::default(),
            seed: 0,
            out: None,
        }
    }
}

impl StudyConfig {
    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: StudyConfig = read_config(path)?;
        cfg.artifacts = cfg.artifacts.resolved(path);
        cfg.cohort_file = cfg.cohort_file.map(|p| crate::io::relative_to(path, &p));
        cfg.out = cfg.out.map(|p| crate::io::relative_to(path, &p));
        Ok(cfg)
    }

    pub fn validate(&self, allow_custom_protocol: bool) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if !allow_custom_protocol {
            if !self.stages.is_standard() {
                return bad(format!(
                    "stage plan {:?} differs from the 2/2/1/5 min/3 protocol (pass --allow-custom-protocol to run it)",
                    self.stages
                ));
            }
            if self.sim.time_limit > TIME_LIMIT {
                return bad(format!("trial time limit {} s exceeds {TIME_LIMIT} s", self.sim.time_limit));
            }
            if let Some(m) = self.modeling_arms.iter().find(|m| !matches!(m, SaMode::StrongSa | SaMode::WeakSa)) {
                return bad(format!("modeling arm {m} is not strong_sa or weak_sa"));
            }
        }
        if self.stages.baseline == 0 || self.stages.evaluation == 0 || self.stages.modeling == 0 {
            return bad("baseline, modeling and evaluation stages need at least one trial".into());
        }
        if !(self.stages.practice_minutes >= 0.0 && self.stages.practice_minutes.is_finite()) {
            return bad("practice minutes must be finite and non-negative".into());
        }
        if !(self.practice_rollout > 0.0) {
            return bad("practice rollout must be positive".into());
        }
        if self.modeling_arms.is_empty() || self.practice_arms.is_empty() {
            return bad("need at least one modeling arm and one practice arm".into());
        }
        let mut m = self.modeling_arms.clone();
        m.dedup();
        let mut p = self.practice_arms.clone();
        p.sort();
        p.dedup();
        if m.len() != self.modeling_arms.len() || p.len() != self.practice_arms.len() {
            return bad("arms must not repeat".into());
        }
        if self.cohort_file.is_none() {
            if self.cohort_size == 0 {
                return bad("cohort size must be at least 1".into());
            }
            self.cohort.validate()?;
        }
        self.student_model.validate()?;
        self.sim.validate()
    }

    /// Every (modeling, practice) combination, modeling-major.
    pub fn pairings(&self) -> Vec<(SaMode, PracticeArm)> {
        self.modeling_arms
            .iter()
            .flat_map(|&m| self.practice_arms.iter().map(move |&p| (m, p)))
            .collect()
    }
}

/// Named substreams of the root seed.
pub fn substream(root: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream);
    rng.next_u64()
}

const COHORT_STREAM: u64 = 1;
const ARM_STREAM: u64 = 2;

/// Pairing index per student. Students are grouped by ground truth, shuffled
/// within each group and dealt round-robin, so every pairing gets an equal
/// share overall and within each group up to one student.
pub fn assign_arms(truths: &[Option<Channel>], n_pairings: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = [None, Some(Channel::Steer), Some(Channel::Throttle), Some(Channel::Brake)];
    let mut out = vec![0; truths.len()];
    let mut next = 0usize;
    for g in groups {
        let mut ids: Vec<usize> = (0..truths.len()).filter(|&i| truths[i] == g).collect();
        ids.shuffle(&mut rng);
        for i in ids {
            out[i] = next % n_pairings;
            next += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Trial,
    Practice,
    Aborted,
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub student: usize,
    /// Position in this student's record sequence.
    pub seq: usize,
    pub stage: u8,
    pub kind: RecordKind,
    pub modeling_arm: SaMode,
    pub practice_arm: PracticeArm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<SaMode>,
    /// Trajectory CSV relative to the output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<TrialMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zpd: Option<ZpdReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Channel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub practice_minutes: Option<f64>,
    /// Deficits after practice.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deficits: Option<PerChannel<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    fn new(student: usize, seq: usize, stage: u8, kind: RecordKind, arms: (SaMode, PracticeArm)) -> Self {
        Self {
            student,
            seq,
            stage,
            kind,
            modeling_arm: arms.0,
            practice_arm: arms.1,
            trial: None,
            mode: None,
            trajectory: None,
            metrics: None,
            zpd: None,
            decision: None,
            practice_minutes: None,
            deficits: None,
            error: None,
        }
    }
}

pub fn trajectory_path(student: usize, stage: u8, trial: usize) -> String {
    format!("trajectories/student_{student:03}/stage{stage}_trial{trial}.csv")
}

#[derive(Debug, Clone)]
pub struct StudentRun {
    pub profile: StudentProfile,
    pub truth: Option<Channel>,
    pub arms: (SaMode, PracticeArm),
    pub records: Vec<RunRecord>,
    /// 1 Hz trajectories keyed by their run-log path.
    pub trajectories: Vec<(String, Trajectory)>,
    pub baseline: Option<StageMetrics>,
    pub evaluation: Option<StageMetrics>,
    pub decision: Option<Channel>,
}

impl StudentRun {
    pub fn aborted(&self) -> bool {
        self.records.iter().any(|r| r.kind == RecordKind::Aborted)
    }
}

struct Trial {
    hz: Trajectory,
    metrics: TrialMetrics,
}

struct StudentContext<'a> {
    cfg: &'a StudyConfig,
    art: &'a Artifacts,
}

impl StudentContext<'_> {
    fn trial(&self, sim: &mut Sim<'_>, drv: &mut StudentDriver, mode: SaMode) -> Result<Trial> {
        let run = run_trial(sim, drv, mode)?;
        let hz = run.resampled(&self.art.track)?;
        let metrics = trial_metrics(&hz, &self.art.track, &self.art.expert_1hz, self.cfg.sim.time_limit, self.cfg.jerk)?;
        Ok(Trial { hz, metrics })
    }

    fn run(&self, profile: StudentProfile, truth: Option<Channel>, arms: (SaMode, PracticeArm)) -> StudentRun {
        let mut out = StudentRun {
            profile: profile.clone(),
            truth,
            arms,
            records: Vec::new(),
            trajectories: Vec::new(),
            baseline: None,
            evaluation: None,
            decision: None,
        };
        if let Err(e) = self.stages(profile, &mut out) {
            let mut r = RunRecord::new(out.profile.id, out.records.len(), 0, RecordKind::Aborted, arms);
            r.error = Some(e.to_string());
            out.records.push(r);
            out.baseline = None;
            out.evaluation = None;
        }
        out
    }

    fn stages(&self, profile: StudentProfile, out: &mut StudentRun) -> Result<()> {
        let cfg = self.cfg;
        let art = self.art;
        let id = profile.id;
        let arms = out.arms;
        let plan = cfg.stages;
        let mut drv = StudentDriver::new(profile.clone(), cfg.student_model);
        let mut sim = Sim::new(&art.track, &art.bank, cfg.sim, SaMode::Unassisted)?;

        let stage_trials = |stage: u8, n: usize, mode: SaMode, out: &mut StudentRun, sim: &mut Sim<'_>, drv: &mut StudentDriver| -> Result<Vec<Trial>> {
            let mut trials = Vec::with_capacity(n);
            for k in 0..n {
                let t = self.trial(sim, drv, mode)?;
                let path = trajectory_path(id, stage, k);
                let mut r = RunRecord::new(id, out.records.len(), stage, RecordKind::Trial, arms);
                r.trial = Some(k);
                r.mode = Some(mode);
                r.trajectory = Some(path.clone());
                r.metrics = Some(t.metrics);
                out.records.push(r);
                out.trajectories.push((path, t.hz.clone()));
                trials.push(t);
            }
            Ok(trials)
        };

        let s1 = stage_trials(1, plan.baseline, SaMode::Unassisted, out, &mut sim, &mut drv)?;
        let s2 = stage_trials(2, plan.modeling, arms.0, out, &mut sim, &mut drv)?;
        let s3 = stage_trials(3, plan.post_modeling, SaMode::Unassisted, out, &mut sim, &mut drv)?;

        let mut own: Vec<Trajectory> = s1.iter().map(|t| t.hz.clone()).collect();
        if cfg.zpd_includes_post_modeling {
            own.extend(s3.iter().map(|t| t.hz.clone()));
        }
        let helped: Vec<Trajectory> = s2.iter().map(|t| t.hz.clone()).collect();
        let own = average_trajectories(&own, &art.track)?;
        let helped = average_trajectories(&helped, &art.track)?;
        let n_skills = art.library.len();
        let scores = zpd_scores(&art.reference, &own, &helped, &cfg.zpd, n_skills);
        let decision = choose_skill(&scores, &art.library, &art.cmap)?;
        out.decision = Some(decision.control);

        let mode = match arms.1 {
            PracticeArm::SelfPractice => SaMode::Unassisted,
            PracticeArm::SkillSa => SaMode::SkillSa(decision.control),
        };
        let minutes = plan.practice_minutes;
        let mut remaining = minutes * 60.0;
        let mut practice_sim_cfg = cfg.sim;
        while remaining > 1e-9 {
            practice_sim_cfg.time_limit = cfg.practice_rollout.min(remaining);
            let mut psim = Sim::new(&art.track, &art.bank, practice_sim_cfg, mode)?;
            run_trial(&mut psim, &mut drv, mode)?;
            remaining -= practice_sim_cfg.time_limit;
        }
        let after = practice_update(drv.profile(), minutes, mode);
        let mut r = RunRecord::new(id, out.records.len(), 4, RecordKind::Practice, arms);
        r.mode = Some(mode);
        r.zpd = Some(ZpdReport::new(&scores, &decision));
        r.decision = Some(decision.control);
        r.practice_minutes = Some(minutes);
        r.deficits = Some(after.deficits);
        out.records.push(r);
        drv.set_profile(after);

        let s5 = stage_trials(5, plan.evaluation, SaMode::Unassisted, out, &mut sim, &mut drv)?;
        out.baseline = Some(stage_metrics(&s1)?);
        out.evaluation = Some(stage_metrics(&s5)?);
        Ok(())
    }
}

fn stage_metrics(trials: &[Trial]) -> Result<StageMetrics> {
    let hz: Vec<Trajectory> = trials.iter().map(|t| t.hz.clone()).collect();
    Ok(StageMetrics {
        trials: trials.iter().map(|t| t.metrics).collect(),
        consistency: consistency(&hz)?,
    })
}

#[derive(Debug, Clone)]
pub struct StudyOutput {
    pub students: Vec<StudentRun>,
    pub table: Option<DeltaTable>,
    /// Why no table could be built, when it could not.
    pub table_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortEntry {
    pub profile: StudentProfile,
    pub ground_truth: Option<Channel>,
    pub modeling_arm: SaMode,
    pub practice_arm: PracticeArm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZpdSummary {
    pub students: usize,
    pub with_ground_truth: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

impl StudyOutput {
    pub fn runlog(&self) -> Result<String> {
        let mut s = String::new();
        for st in &self.students {
            for r in &st.records {
                s.push_str(&serde_json::to_string(r).map_err(|e| Error::runtime(e.to_string()))?);
                s.push('\n');
            }
        }
        Ok(s)
    }

    pub fn zpd_summary(&self) -> ZpdSummary {
        let judged: Vec<_> = self.students.iter().filter(|s| s.truth.is_some() && s.decision.is_some()).collect();
        let correct = judged.iter().filter(|s| s.truth == s.decision).count();
        ZpdSummary {
            students: self.students.len(),
            with_ground_truth: judged.len(),
            correct,
            accuracy: (!judged.is_empty()).then(|| correct as f64 / judged.len() as f64),
        }
    }

    pub fn cohort(&self) -> Vec<CohortEntry> {
        self.students
            .iter()
            .map(|s| CohortEntry {
                profile: s.profile.clone(),
                ground_truth: s.truth,
                modeling_arm: s.arms.0,
                practice_arm: s.arms.1,
            })
            .collect()
    }

    /// Per-trial metrics as CSV, one row per trial record.
    pub fn trials_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "student", "stage", "trial", "mode", "modeling_arm", "practice_arm", "success", "lap_progress", "lap_time",
            "expert_distance", "jerk", "lane_invasions",
        ])?;
        for r in self.students.iter().flat_map(|s| &s.records) {
            let (Some(m), Some(k), Some(mode)) = (r.metrics, r.trial, r.mode) else { continue };
            w.write_record([
                r.student.to_string(),
                r.stage.to_string(),
                k.to_string(),
                mode.to_string(),
                r.modeling_arm.to_string(),
                r.practice_arm.to_string(),
                m.success.to_string(),
                m.lap_progress.to_string(),
                m.lap_time.map_or(String::new(), |t| t.to_string()),
                m.expert_distance.to_string(),
                m.jerk.to_string(),
                m.lane_invasions.to_string(),
            ])?;
        }
        csv_string(w)
    }

    /// Steering spectra of every baseline and evaluation trial plus the expert.
    pub fn spectra_csv(&self, expert: &Trajectory) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["student", "practice_arm", "stage", "trial", "bin", "amplitude"])?;
        let steer = |t: &Trajectory| t.samples.iter().map(|s| s.action.steer).collect::<Vec<_>>();
        for (bin, a) in steering_fft(&steer(expert))?.iter().enumerate() {
            w.write_record(["expert", "", "", "", &bin.to_string(), &a.to_string()])?;
        }
        for st in &self.students {
            for (path, traj) in &st.trajectories {
                let Some((stage, trial)) = parse_trajectory_path(path) else { continue };
                if stage != 1 && stage != 5 {
                    continue;
                }
                let Ok(spec) = steering_fft(&steer(traj)) else { continue };
                for (bin, a) in spec.iter().enumerate() {
                    w.write_record([
                        st.profile.id.to_string(),
                        st.arms.1.to_string(),
                        stage.to_string(),
                        trial.to_string(),
                        bin.to_string(),
                        a.to_string(),
                    ])?;
                }
            }
        }
        csv_string(w)
    }

    /// Mean spectrum RMSE against the expert, per student and stage.
    pub fn spectral_rmse_csv(&self, expert: &Trajectory) -> Result<String> {
        let steer = |t: &Trajectory| t.samples.iter().map(|s| s.action.steer).collect::<Vec<_>>();
        let reference = steering_fft(&steer(expert))?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["student", "practice_arm", "baseline_rmse", "evaluation_rmse"])?;
        for st in &self.students {
            let mean_for = |stage: u8| {
                let v: Vec<f64> = st
                    .trajectories
                    .iter()
                    .filter(|(p, _)| parse_trajectory_path(p).is_some_and(|(s, _)| s == stage))
                    .filter_map(|(_, t)| spectrum_rmse(&steering_fft(&steer(t)).ok()?, &reference).ok())
                    .collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
            w.write_record([st.profile.id.to_string(), st.arms.1.to_string(), f(mean_for(1)), f(mean_for(5))])?;
        }
        csv_string(w)
    }

    /// Baseline and evaluation positions for trajectory overlays.
    pub fn overlay_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["student", "practice_arm", "stage", "trial", "t", "x", "y"])?;
        for st in &self.students {
            for (path, traj) in &st.trajectories {
                let Some((stage, trial)) = parse_trajectory_path(path) else { continue };
                if stage != 1 && stage != 5 {
                    continue;
                }
                for s in &traj.samples {
                    w.write_record([
                        st.profile.id.to_string(),
                        st.arms.1.to_string(),
                        stage.to_string(),
                        trial.to_string(),
                        s.state.time.to_string(),
                        s.state.position.x.to_string(),
                        s.state.position.y.to_string(),
                    ])?;
                }
            }
        }
        csv_string(w)
    }

    /// Run log, cohort, trajectories, reports and plot data under `dir`.
    pub fn write(&self, dir: &Path, art: &Artifacts) -> Result<()> {
        write_text(&dir.join("runlog.jsonl"), &self.runlog()?)?;
        let profiles: Vec<&StudentProfile> = self.students.iter().map(|s| &s.profile).collect();
        write_json(&dir.join("cohort.json"), &profiles)?;
        write_json(&dir.join("report/arms.json"), &self.cohort())?;
        for st in &self.students {
            for (path, traj) in &st.trajectories {
                write_text(&dir.join(path), &traj.to_csv_string()?)?;
            }
        }
        let report = dir.join("report");
        if let Some(table) = &self.table {
            write_text(&report.join("delta_table.csv"), &table.to_csv_string()?)?;
            write_json(&report.join("delta_table.json"), table)?;
        }
        write_text(&report.join("trials.csv"), &self.trials_csv()?)?;
        write_json(&report.join("zpd_summary.json"), &self.zpd_summary())?;
        let plots = dir.join("plots");
        write_text(&plots.join("spectra.csv"), &self.spectra_csv(&art.expert_1hz)?)?;
        write_text(&plots.join("spectral_rmse.csv"), &self.spectral_rmse_csv(&art.expert_1hz)?)?;
        write_text(&plots.join("trajectories.csv"), &self.overlay_csv()?)?;
        Ok(())
    }
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::runtime(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::runtime(e.to_string()))
}

/// `(stage, trial)` out of a path made by `trajectory_path`.
pub fn parse_trajectory_path(path: &str) -> Option<(u8, usize)> {
    let name = path.rsplit('/').next()?.strip_suffix(".csv")?;
    let (stage, trial) = name.strip_prefix("stage")?.split_once("_trial")?;
    Some((stage.parse().ok()?, trial.parse().ok()?))
}

/// The cohort with ground truth, from the config's file or generator.
pub fn study_cohort(cfg: &StudyConfig) -> Result<Vec<(StudentProfile, Option<Channel>)>> {
    match &cfg.cohort_file {
        Some(path) => Ok(load_cohort(path)?
            .into_iter()
            .map(|p| {
                let t = p.ground_truth();
                (p, t)
            })
            .collect()),
        None => make_cohort(cfg.cohort_size, substream(cfg.seed, COHORT_STREAM), &cfg.cohort),
    }
}

/// Runs every student, in parallel, and builds the comparison table.
pub fn run_study(cfg: &StudyConfig, art: &Artifacts) -> Result<StudyOutput> {
    let cohort = study_cohort(cfg)?;
    run_cohort(cfg, art, cohort)
}

pub fn run_cohort(cfg: &StudyConfig, art: &Artifacts, cohort: Vec<(StudentProfile, Option<Channel>)>) -> Result<StudyOutput> {
    let pairings = cfg.pairings();
    let truths: Vec<Option<Channel>> = cohort.iter().map(|(_, t)| *t).collect();
    let arms = assign_arms(&truths, pairings.len(), substream(cfg.seed, ARM_STREAM));
    let ctx = StudentContext { cfg, art };
    let students: Vec<StudentRun> = cohort
        .into_par_iter()
        .zip(arms.into_par_iter())
        .map(|((p, truth), a)| {
            let run = ctx.run(p, truth, pairings[a]);
            if run.aborted() {
                tracing::warn!(student = run.profile.id, "student aborted");
            }
            run
        })
        .collect();

    let arm_names: Vec<String> = cfg.practice_arms.iter().map(|a| a.to_string()).collect();
    let stages: Vec<StudentStages<'_>> = students
        .iter()
        .filter_map(|s| {
            Some(StudentStages {
                arm: s.arms.1.as_str(),
                baseline: s.baseline.as_ref()?,
                evaluation: s.evaluation.as_ref()?,
            })
        })
        .collect();
    let (table, table_error) = match delta_table(&stages, &arm_names) {
        Ok(t) => (Some(t), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(StudyOutput {
        students,
        table,
        table_error,
    })
}

/// Reads a run log back into records.
pub fn read_runlog(text: &str) -> Result<Vec<RunRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::invalid(format!("run log line {}: {e}", i + 1))))
        .collect()
}

/// Rebuilds the comparison table from a run log, pairing each student's
/// baseline (stage 1) and evaluation (stage 5) trials. Trajectories are
/// read from `dir` for the consistency metric when present.
pub fn table_from_runlog(records: &[RunRecord], dir: &Path, art_track: &crate::track::Track, arms: &[String]) -> Result<DeltaTable> {
    use std::collections::BTreeMap;
    let mut by: BTreeMap<usize, (PracticeArm, Vec<&RunRecord>)> = BTreeMap::new();
    let aborted: std::collections::BTreeSet<usize> =
        records.iter().filter(|r| r.kind == RecordKind::Aborted).map(|r| r.student).collect();
    for r in records.iter().filter(|r| !aborted.contains(&r.student)) {
        by.entry(r.student).or_insert((r.practice_arm, Vec::new())).1.push(r);
    }
    let stage = |recs: &[&RunRecord], s: u8| -> Result<StageMetrics> {
        let trials: Vec<&&RunRecord> = recs.iter().filter(|r| r.stage == s && r.kind == RecordKind::Trial).collect();
        let mut trajs = Vec::new();
        for r in &trials {
            if let Some(p) = &r.trajectory {
                let path = dir.join(p);
                if path.exists() {
                    trajs.push(Trajectory::read_csv(&path, art_track)?);
                }
            }
        }
        Ok(StageMetrics {
            trials: trials.iter().filter_map(|r| r.metrics).collect(),
            consistency: if trajs.len() == trials.len() { consistency(&trajs)? } else { None },
        })
    };
    let mut kept = Vec::new();
    for (arm, recs) in by.values() {
        kept.push((arm.as_str(), stage(recs, 1)?, stage(recs, 5)?));
    }
    let stages: Vec<StudentStages<'_>> = kept
        .iter()
        .filter(|(_, b, e)| !b.trials.is_empty() && !e.trials.is_empty())
        .map(|(a, b, e)| StudentStages { arm: a, baseline: b, evaluation: e })
        .collect();
    delta_table(&stages, arms)
}
