//! Live sessions: the study stages driven tick by tick from a remote
//! client's inputs. Transport-free; the server feeds messages in and sends
//! the returned states out.

use crate::artifacts::{read_config, ArtifactPaths, Artifacts, GenerateConfig};
use crate::autonomy::{BlendConfig, SaMode};
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::metrics::{trial_metrics, JerkMode};
use crate::protocol::{trajectory_path, PracticeArm, RecordKind, RunRecord, StagePlan, TIME_LIMIT};
use crate::sim::{Sim, SimConfig, TickRecord, TrialRecorder, TrialRun};
use crate::trajectory::Trajectory;
use crate::vehicle::{Action, Channel};
use crate::zpd::{average_trajectories, choose_skill, zpd_scores, ZpdConfig, ZpdReport};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Baseline,
    Modeling,
    PostModeling,
    Practice,
    Evaluation,
    Done,
}

impl Phase {
    pub fn stage(self) -> u8 {
        match self {
            Phase::Baseline => 1,
            Phase::Modeling => 2,
            Phase::PostModeling => 3,
            Phase::Practice => 4,
            Phase::Evaluation => 5,
            Phase::Done => 6,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Baseline => "baseline",
            Phase::Modeling => "modeling",
            Phase::PostModeling => "post_modeling",
            Phase::Practice => "practice",
            Phase::Evaluation => "evaluation",
            Phase::Done => "done",
        }
    }

    fn next(self) -> Phase {
        match self {
            Phase::Baseline => Phase::Modeling,
            Phase::Modeling => Phase::PostModeling,
            Phase::PostModeling => Phase::Practice,
            Phase::Practice => Phase::Evaluation,
            Phase::Evaluation | Phase::Done => Phase::Done,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Configuration of `serve` and of every session it hosts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub artifacts: ArtifactPaths,
    pub generate: GenerateConfig,
    pub modeling_arm: SaMode,
    pub practice_arm: PracticeArm,
    pub stages: StagePlan,
    pub zpd_includes_post_modeling: bool,
    pub sim: SimConfig,
    pub zpd: ZpdConfig,
    pub jerk: JerkMode,
    /// Inputs older than this many seconds count as no input.
    pub stale_after: f64,
    /// Advance one tick per input message instead of on the wall clock.
    /// Used for scripted replays.
    pub lockstep: bool,
    /// Where session run logs go; one subdirectory per session.
    pub out: Option<PathBuf>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            artifacts: ArtifactPaths::default(),
            generate: GenerateConfig::default(),
            modeling_arm: SaMode::StrongSa,
            practice_arm: PracticeArm::SkillSa,
            stages: StagePlan::STANDARD,
            zpd_includes_post_modeling: true,
            sim: SimConfig::default(),
            zpd: ZpdConfig::default(),
            jerk: JerkMode::default(),
            stale_after: 0.5,
            lockstep: false,
            out: None,
        }
    }
}

impl SessionConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: SessionConfig = read_config(path)?;
        cfg.artifacts = cfg.artifacts.resolved(path);
        cfg.out = cfg.out.map(|p| crate::io::relative_to(path, &p));
        Ok(cfg)
    }

    pub fn validate(&self, allow_custom_protocol: bool) -> Result<()> {
        if !allow_custom_protocol {
            if !self.stages.is_standard() {
                return Err(Error::config(format!("stage plan {:?} differs from the standard protocol", self.stages)));
            }
            if self.sim.time_limit > TIME_LIMIT {
                return Err(Error::config(format!("trial time limit {} s exceeds {TIME_LIMIT} s", self.sim.time_limit)));
            }
            if !matches!(self.modeling_arm, SaMode::StrongSa | SaMode::WeakSa) {
                return Err(Error::config(format!("modeling arm {} is not strong_sa or weak_sa", self.modeling_arm)));
            }
        }
        if self.stages.baseline == 0 || self.stages.modeling == 0 || self.stages.evaluation == 0 {
            return Err(Error::config("baseline, modeling and evaluation stages need at least one trial"));
        }
        if !(self.stale_after > 0.0) {
            return Err(Error::config("stale_after must be positive"));
        }
        self.sim.validate()
    }
}

/// Client to server.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Hello { version: u32 },
    Input { steer: f64, throttle: f64, brake: f64, seq: u64 },
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelValues {
    pub steer: f64,
    pub throttle: f64,
    pub brake: f64,
}

impl From<BlendConfig> for ChannelValues {
    fn from(a: BlendConfig) -> Self {
        Self {
            steer: a.alpha_steer,
            throttle: a.alpha_throttle,
            brake: a.alpha_brake,
        }
    }
}

impl From<Action> for ChannelValues {
    fn from(a: Action) -> Self {
        Self {
            steer: a.steer,
            throttle: a.throttle,
            brake: a.brake,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiveMetrics {
    pub stage: u8,
    pub trial: usize,
    /// Seconds since the first input of this trial.
    pub trial_time: f64,
    /// Fraction of a lap covered in this trial.
    pub lap_progress: f64,
    pub lap_time: Option<f64>,
    pub lane_invasions: u32,
    pub practice_remaining: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    pub tick: u64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub alpha: ChannelValues,
    pub blended: ChannelValues,
    pub phase: Phase,
    pub mode: SaMode,
    pub recommended_skill: Option<Channel>,
    pub metrics: LiveMetrics,
    /// Last input applied before this tick.
    pub seq: Option<u64>,
    /// No input for longer than `stale_after`; the student action was zero.
    pub stale: bool,
    /// Still on the line waiting for the first input.
    pub waiting: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackMessage {
    pub version: u32,
    pub dt: f64,
    pub half_width: f64,
    pub centerline: Vec<Vec2>,
    pub start_index: usize,
    /// Expert line, one point per second.
    pub racing_line: Vec<Vec2>,
    pub modeling_arm: SaMode,
    pub practice_arm: PracticeArm,
}

/// Server to client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Track(TrackMessage),
    State(StateMessage),
    Recommendation { skill: usize, channel: Channel, report: ZpdReport },
    End { aborted: bool, reason: Option<String> },
    Error { message: String },
}

/// One live student from baseline to evaluation.
pub struct Session<'a> {
    cfg: SessionConfig,
    art: &'a Artifacts,
    student: usize,
    sim: Sim<'a>,
    rec: TrialRecorder,
    phase: Phase,
    trial: usize,
    held: Action,
    seq: Option<u64>,
    /// Ticks since the last input; `None` before the first.
    since_input: Option<u64>,
    tick: u64,
    attempt: u64,
    invasions: u32,
    was_off: bool,
    practice_ticks: u64,
    stage_trials: [Vec<Trajectory>; 3],
    zpd: Option<ZpdReport>,
    records: Vec<RunRecord>,
    trajectories: Vec<(String, Trajectory)>,
    last_run: Option<TrialRun>,
    pending: Vec<ServerMessage>,
}

impl<'a> Session<'a> {
    pub fn new(cfg: SessionConfig, art: &'a Artifacts, student: usize) -> Result<Self> {
        let mut sim = Sim::new(&art.track, &art.bank, cfg.sim, SaMode::Unassisted)?;
        let rec = TrialRecorder::start(&mut sim, SaMode::Unassisted);
        Ok(Self {
            cfg,
            art,
            student,
            sim,
            rec,
            phase: Phase::Baseline,
            trial: 0,
            held: Action::ZERO,
            seq: None,
            since_input: None,
            tick: 0,
            attempt: 0,
            invasions: 0,
            was_off: false,
            practice_ticks: 0,
            stage_trials: Default::default(),
            zpd: None,
            records: Vec::new(),
            trajectories: Vec::new(),
            last_run: None,
            pending: Vec::new(),
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn mode(&self) -> SaMode {
        self.sim.mode()
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn trajectories(&self) -> &[(String, Trajectory)] {
        &self.trajectories
    }

    /// Raw ticks of the most recently finished trial or rollout.
    pub fn last_run(&self) -> Option<&TrialRun> {
        self.last_run.as_ref()
    }

    /// Counts every restart from the line: trials, rollouts and resets.
    pub fn attempt(&self) -> u64 {
        self.attempt
    }

    pub fn zpd(&self) -> Option<&ZpdReport> {
        self.zpd.as_ref()
    }

    pub fn track_message(&self) -> TrackMessage {
        let file = self.art.track.to_file();
        TrackMessage {
            version: PROTOCOL_VERSION,
            dt: self.cfg.sim.dt,
            half_width: file.half_width,
            centerline: file.centerline,
            start_index: file.start_index,
            racing_line: self.art.expert_1hz.positions(),
            modeling_arm: self.cfg.modeling_arm,
            practice_arm: self.cfg.practice_arm,
        }
    }

    /// Messages produced since the last call, other than states.
    pub fn drain_events(&mut self) -> Vec<ServerMessage> {
        std::mem::take(&mut self.pending)
    }

    fn phase_mode(&self, phase: Phase) -> SaMode {
        match phase {
            Phase::Modeling => self.cfg.modeling_arm,
            Phase::Practice => match (self.cfg.practice_arm, &self.zpd) {
                (PracticeArm::SkillSa, Some(z)) => SaMode::SkillSa(z.decision),
                _ => SaMode::Unassisted,
            },
            _ => SaMode::Unassisted,
        }
    }

    fn phase_trials(&self, phase: Phase) -> usize {
        let plan = &self.cfg.stages;
        match phase {
            Phase::Baseline => plan.baseline,
            Phase::Modeling => plan.modeling,
            Phase::PostModeling => plan.post_modeling,
            Phase::Evaluation => plan.evaluation,
            Phase::Practice | Phase::Done => 0,
        }
    }

    fn practice_ticks_total(&self) -> u64 {
        (self.cfg.stages.practice_minutes * 60.0 / self.cfg.sim.dt).round() as u64
    }

    pub fn handle(&mut self, msg: ClientMessage) -> Result<()> {
        match msg {
            ClientMessage::Hello { version } if version != PROTOCOL_VERSION => {
                Err(Error::invalid(format!("protocol version {version}, server speaks {PROTOCOL_VERSION}")))
            }
            ClientMessage::Hello { .. } => Ok(()),
            ClientMessage::Input { steer, throttle, brake, seq } => {
                let a = Action { steer, throttle, brake };
                if !a.is_finite() {
                    return Err(Error::invalid("input is not finite"));
                }
                self.held = Action::new(steer, throttle, brake);
                self.seq = Some(seq);
                self.since_input = Some(0);
                Ok(())
            }
            ClientMessage::Reset => {
                // Back to the line; outside practice the current attempt is discarded.
                self.restart_attempt();
                Ok(())
            }
        }
    }

    fn restart_attempt(&mut self) {
        let mode = self.phase_mode(self.phase);
        self.rec = TrialRecorder::start(&mut self.sim, mode);
        self.attempt += 1;
        self.invasions = 0;
        self.was_off = false;
    }

    fn stale(&self) -> bool {
        match self.since_input {
            None => true,
            Some(n) => n as f64 * self.cfg.sim.dt > self.cfg.stale_after,
        }
    }

    /// Advances one tick with the held input.
    pub fn tick(&mut self) -> Result<StateMessage> {
        if self.is_done() {
            return Err(Error::invalid("session is finished"));
        }
        let stale = self.stale();
        let input = if stale { Action::ZERO } else { self.held };
        let step = self.rec.step(&mut self.sim, |_, _, _| input)?;
        self.since_input = self.since_input.map(|n| n + 1);
        self.tick += 1;
        if !step.waiting {
            let off = self.art.track.is_off_track(step.record.lateral);
            if off && !self.was_off {
                self.invasions += 1;
            }
            self.was_off = off;
        }
        let msg = self.state_message(&step.record, stale, step.waiting);
        if self.phase == Phase::Practice {
            self.practice_ticks += 1;
        }
        if let Some(run) = step.finished {
            self.finish_attempt(run)?;
        } else if self.phase == Phase::Practice && self.practice_ticks >= self.practice_ticks_total() {
            self.end_practice();
        }
        Ok(msg)
    }

    fn state_message(&self, rec: &TickRecord, stale: bool, waiting: bool) -> StateMessage {
        let samples = self.rec.samples();
        let covered = samples
            .windows(2)
            .map(|w| self.art.track.progress_delta(w[0].progress, w[1].progress))
            .sum::<f64>();
        let practice_remaining = (self.phase == Phase::Practice)
            .then(|| self.practice_ticks_total().saturating_sub(self.practice_ticks) as f64 * self.cfg.sim.dt);
        let next = self.sim.state();
        StateMessage {
            tick: self.tick,
            x: next.position.x,
            y: next.position.y,
            heading: next.heading,
            speed: next.speed,
            alpha: rec.alpha.into(),
            blended: rec.blended.into(),
            phase: self.phase,
            mode: self.sim.mode(),
            recommended_skill: self.zpd.as_ref().map(|z| z.decision),
            metrics: LiveMetrics {
                stage: self.phase.stage(),
                trial: self.trial,
                trial_time: if waiting { 0.0 } else { next.time },
                lap_progress: (covered / self.art.track.length()).clamp(0.0, 1.0),
                lap_time: self.rec.lap_time(),
                lane_invasions: self.invasions,
                practice_remaining,
            },
            seq: self.seq,
            stale,
            waiting,
        }
    }

    fn finish_attempt(&mut self, run: TrialRun) -> Result<()> {
        let phase = self.phase;
        if phase == Phase::Practice {
            self.last_run = Some(run);
            self.restart_attempt();
            return Ok(());
        }
        let hz = run.resampled(&self.art.track)?;
        let metrics = trial_metrics(&hz, &self.art.track, &self.art.expert_1hz, self.cfg.sim.time_limit, self.cfg.jerk)?;
        let stage = phase.stage();
        let path = trajectory_path(self.student, stage, self.trial);
        let mut r = self.record(stage, RecordKind::Trial);
        r.trial = Some(self.trial);
        r.mode = Some(self.sim.mode());
        r.trajectory = Some(path.clone());
        r.metrics = Some(metrics);
        self.records.push(r);
        if stage <= 3 {
            self.stage_trials[stage as usize - 1].push(hz.clone());
        }
        self.trajectories.push((path, hz));
        self.last_run = Some(run);
        self.trial += 1;
        if self.trial >= self.phase_trials(phase) {
            self.enter(phase.next())?;
        } else {
            self.restart_attempt();
        }
        Ok(())
    }

    fn enter(&mut self, phase: Phase) -> Result<()> {
        self.phase = phase;
        self.trial = 0;
        match phase {
            Phase::PostModeling if self.cfg.stages.post_modeling == 0 => return self.enter(Phase::Practice),
            Phase::Practice => {
                self.coach()?;
                self.practice_ticks = 0;
                if self.practice_ticks_total() == 0 {
                    self.end_practice();
                    return Ok(());
                }
            }
            Phase::Done => {
                self.pending.push(ServerMessage::End { aborted: false, reason: None });
                return Ok(());
            }
            _ => {}
        }
        self.restart_attempt();
        Ok(())
    }

    fn coach(&mut self) -> Result<()> {
        let [s1, s2, s3] = &self.stage_trials;
        let mut own = s1.clone();
        if self.cfg.zpd_includes_post_modeling {
            own.extend(s3.iter().cloned());
        }
        let track = &self.art.track;
        let own = average_trajectories(&own, track)?;
        let helped = average_trajectories(s2, track)?;
        let scores = zpd_scores(&self.art.reference, &own, &helped, &self.cfg.zpd, self.art.library.len());
        let decision = choose_skill(&scores, &self.art.library, &self.art.cmap)?;
        let report = ZpdReport::new(&scores, &decision);
        self.pending.push(ServerMessage::Recommendation {
            skill: decision.skill,
            channel: decision.control,
            report: report.clone(),
        });
        self.zpd = Some(report);
        Ok(())
    }

    fn end_practice(&mut self) {
        let mut r = self.record(4, RecordKind::Practice);
        r.mode = Some(self.phase_mode(Phase::Practice));
        r.zpd = self.zpd.clone();
        r.decision = self.zpd.as_ref().map(|z| z.decision);
        r.practice_minutes = Some(self.practice_ticks as f64 * self.cfg.sim.dt / 60.0);
        self.records.push(r);
        self.phase = Phase::Evaluation;
        self.trial = 0;
        self.restart_attempt();
    }

    fn record(&self, stage: u8, kind: RecordKind) -> RunRecord {
        RunRecord {
            student: self.student,
            seq: self.records.len(),
            stage,
            kind,
            modeling_arm: self.cfg.modeling_arm,
            practice_arm: self.cfg.practice_arm,
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

    /// Marks the session aborted, e.g. on disconnect.
    pub fn abort(&mut self, reason: &str) {
        if self.is_done() {
            return;
        }
        let mut r = self.record(self.phase.stage().min(5), RecordKind::Aborted);
        r.error = Some(reason.to_string());
        self.records.push(r);
        self.phase = Phase::Done;
        self.pending.push(ServerMessage::End {
            aborted: true,
            reason: Some(reason.to_string()),
        });
    }

    /// Run log and trajectories under `dir`, in the study layout.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut log = String::new();
        for r in &self.records {
            log.push_str(&serde_json::to_string(r).map_err(|e| Error::runtime(e.to_string()))?);
            log.push('\n');
        }
        crate::io::write_text(&dir.join("runlog.jsonl"), &log)?;
        for (path, traj) in &self.trajectories {
            crate::io::write_text(&dir.join(path), &traj.to_csv_string()?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autonomy::mode_to_config;

    #[test]
    fn wire_format() {
        let m: ClientMessage = serde_json::from_str(r#"{"type":"input","steer":0.1,"throttle":1,"brake":0,"seq":4}"#).unwrap();
        assert_eq!(m, ClientMessage::Input { steer: 0.1, throttle: 1.0, brake: 0.0, seq: 4 });
        let r: ClientMessage = serde_json::from_str(r#"{"type":"reset"}"#).unwrap();
        assert_eq!(r, ClientMessage::Reset);
        assert!(serde_json::from_str::<ClientMessage>(r#"{"type":"jump"}"#).is_err());
        let e = ServerMessage::End { aborted: true, reason: None };
        let v: serde_json::Value = serde_json::to_value(&e).unwrap();
        assert_eq!(v["type"], "end");
    }

    #[test]
    fn alpha_view_matches_modes() {
        for mode in [SaMode::Unassisted, SaMode::StrongSa, SaMode::WeakSa, SaMode::SkillSa(Channel::Throttle)] {
            let v: ChannelValues = mode_to_config(mode).into();
            let c = mode_to_config(mode);
            assert_eq!((v.steer, v.throttle, v.brake), (c.alpha_steer, c.alpha_throttle, c.alpha_brake));
        }
    }

    #[test]
    fn custom_plans_need_the_flag() {
        let mut cfg = SessionConfig::default();
        cfg.validate(false).unwrap();
        cfg.stages.modeling = 3;
        assert!(cfg.validate(false).is_err());
        cfg.validate(true).unwrap();
    }

    #[test]
    fn phases_in_order() {
        let mut p = Phase::Baseline;
        let mut seen = vec![p];
        while p != Phase::Done {
            p = p.next();
            seen.push(p);
        }
        assert!(seen.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(seen.len(), 6);
    }
}
