//! Fixed-tick shared-autonomy simulation shared by offline trials and live
//! sessions.

use crate::autonomy::{apply_revert, blend, mode_to_config, BlendConfig, SaMode};
use crate::error::{Error, Result};
use crate::expert::{Autopilot, AutopilotConfig, ExpertBank};
use crate::track::Track;
use crate::trajectory::{Sample, Trajectory};
use crate::vehicle::{step, Action, VehicleParams, VehicleState, DEFAULT_DT};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub vehicle: VehicleParams,
    pub autopilot: AutopilotConfig,
    pub dt: f64,
    /// Assistance drops out beyond `half_width + revert_margin` from the centerline.
    pub revert_margin: f64,
    pub time_limit: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            vehicle: VehicleParams::default(),
            autopilot: AutopilotConfig::default(),
            dt: DEFAULT_DT,
            revert_margin: 2.0,
            time_limit: 180.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("dt must be positive"));
        }
        if !(self.revert_margin > 0.0) {
            return Err(Error::invalid("revert margin must be positive"));
        }
        if !(self.time_limit > 0.0) {
            return Err(Error::invalid("time limit must be positive"));
        }
        self.autopilot.gains.validate()
    }
}

/// Everything that happened during one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickRecord {
    pub tick: u64,
    /// State the actions were computed from.
    pub state: VehicleState,
    pub agent: Action,
    pub student: Action,
    /// Assistance after the off-track revert rule.
    pub alpha: BlendConfig,
    pub blended: Action,
    pub lateral: f64,
    pub progress: f64,
}

/// One car, one autopilot, one mode.
#[derive(Debug, Clone)]
pub struct Sim<'a> {
    track: &'a Track,
    cfg: SimConfig,
    pilot: Autopilot<'a>,
    mode: SaMode,
    state: VehicleState,
    tick: u64,
}

impl<'a> Sim<'a> {
    pub fn new(track: &'a Track, bank: &'a ExpertBank, cfg: SimConfig, mode: SaMode) -> Result<Self> {
        cfg.validate()?;
        let pilot = Autopilot::new(bank, cfg.autopilot)?;
        let (p, h) = track.start_pose();
        Ok(Self {
            track,
            cfg,
            pilot,
            mode,
            state: VehicleState::new(p, h, 0.0, 0.0),
            tick: 0,
        })
    }

    /// Back to rest on the start line with a fresh controller.
    pub fn reset(&mut self) {
        let (p, h) = self.track.start_pose();
        self.state = VehicleState::new(p, h, 0.0, 0.0);
        self.tick = 0;
        self.pilot.reset();
    }

    pub fn state(&self) -> &VehicleState {
        &self.state
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn mode(&self) -> SaMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: SaMode) {
        self.mode = mode;
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn track(&self) -> &'a Track {
        self.track
    }

    pub fn revert_threshold(&self) -> f64 {
        self.track.half_width() + self.cfg.revert_margin
    }

    /// Advances one tick. `student` sees the state, the agent's action and
    /// the assistance in force, and returns the student's own action.
    pub fn tick_with(
        &mut self,
        student: impl FnOnce(&VehicleState, &Action, &BlendConfig) -> Action,
    ) -> Result<TickRecord> {
        let proj = self.track.project(self.state.position);
        let alpha = apply_revert(&mode_to_config(self.mode), proj.lateral, self.revert_threshold());
        let agent = self.pilot.act(&self.state, self.cfg.dt);
        let student = student(&self.state, &agent, &alpha);
        if !student.is_finite() {
            return Err(Error::invalid("student action is not finite"));
        }
        let student = Action::new(student.steer, student.throttle, student.brake);
        let blended = blend(&agent, &student, &alpha);
        let record = TickRecord {
            tick: self.tick,
            state: self.state,
            agent,
            student,
            alpha,
            blended,
            lateral: proj.lateral,
            progress: proj.progress,
        };
        let mut next = step(&self.state, &blended, self.cfg.dt, &self.cfg.vehicle)?;
        self.tick += 1;
        // Tick-derived clock keeps long runs free of accumulated rounding.
        next.time = self.tick as f64 * self.cfg.dt;
        self.state = next;
        Ok(record)
    }
}

/// A student policy driving through the shared-autonomy loop.
pub trait Driver {
    fn act(&mut self, state: &VehicleState, expert: &Action, alpha: &BlendConfig, dt: f64) -> Action;
    /// Clears per-trial memory such as input lag.
    fn reset(&mut self) {}
}

/// The autopilot's own output, unmodified.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExpertDriver;

impl Driver for ExpertDriver {
    fn act(&mut self, _: &VehicleState, expert: &Action, _: &BlendConfig, _: f64) -> Action {
        *expert
    }
}

#[derive(Debug, Clone)]
pub struct TrialRun {
    /// Every tick from the first nonzero student input.
    pub raw: Trajectory,
    pub completed: bool,
    /// Trial time of the lap crossing on the raw samples.
    pub lap_time: Option<f64>,
}

impl TrialRun {
    pub fn resampled(&self, track: &Track) -> Result<Trajectory> {
        self.raw.resample_1hz(track)
    }
}

/// Bookkeeping of one timed attempt at a lap from rest. The clock starts
/// at the first nonzero student input; after the lap closes the run
/// continues to the next whole second so 1 Hz resampling still sees the
/// crossing.
#[derive(Debug, Clone)]
pub struct TrialRecorder {
    samples: Vec<Sample>,
    idle: u64,
    covered: f64,
    lap_time: Option<f64>,
}

/// What one recorder step did.
#[derive(Debug, Clone)]
pub struct TrialStep {
    pub record: TickRecord,
    /// The car is still on the line; the tick was not kept.
    pub waiting: bool,
    pub finished: Option<TrialRun>,
}

impl TrialRecorder {
    /// Puts the car back on the line in `mode`.
    pub fn start(sim: &mut Sim<'_>, mode: SaMode) -> Self {
        sim.reset();
        sim.set_mode(mode);
        Self {
            samples: Vec::with_capacity((sim.config().time_limit / sim.config().dt) as usize + 1),
            idle: 0,
            covered: 0.0,
            lap_time: None,
        }
    }

    pub fn started(&self) -> bool {
        !self.samples.is_empty()
    }

    pub fn lap_time(&self) -> Option<f64> {
        self.lap_time
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn step(
        &mut self,
        sim: &mut Sim<'_>,
        student: impl FnOnce(&VehicleState, &Action, &BlendConfig) -> Action,
    ) -> Result<TrialStep> {
        let track = sim.track();
        let dt = sim.config().dt;
        let limit = sim.config().time_limit;
        let limit_ticks = (limit / dt).round() as u64;
        let before = (!self.started()).then(|| sim.clone());
        let rec = sim.tick_with(student)?;
        if let Some(before) = before.filter(|_| rec.student.is_zero()) {
            // Still waiting on the line.
            *sim = before;
            self.idle += 1;
            let finished = if self.idle >= limit_ticks {
                let st = *sim.state();
                let samples = vec![
                    Sample::new(track, st, Action::ZERO),
                    Sample::new(track, VehicleState { time: limit, ..st }, Action::ZERO),
                ];
                Some(TrialRun {
                    raw: Trajectory::new(samples, dt)?,
                    completed: false,
                    lap_time: None,
                })
            } else {
                None
            };
            return Ok(TrialStep {
                record: rec,
                waiting: true,
                finished,
            });
        }
        let sample = Sample::new(track, rec.state, rec.blended);
        if let Some(prev) = self.samples.last() {
            self.covered += track.progress_delta(prev.progress, sample.progress);
        }
        self.samples.push(sample);
        let t = rec.state.time;
        if self.lap_time.is_none() && self.covered >= track.length() {
            self.lap_time = Some(t);
        }
        let t_end = self.lap_time.map_or(limit, |lt: f64| lt.ceil().min(limit));
        let finished = if t >= t_end - 1e-9 {
            Some(TrialRun {
                raw: Trajectory::new(std::mem::take(&mut self.samples), dt)?,
                completed: self.lap_time.is_some(),
                lap_time: self.lap_time,
            })
        } else {
            None
        };
        Ok(TrialStep {
            record: rec,
            waiting: false,
            finished,
        })
    }
}

/// One timed attempt at a lap from rest, driven by `driver`.
pub fn run_trial(sim: &mut Sim<'_>, driver: &mut dyn Driver, mode: SaMode) -> Result<TrialRun> {
    let mut rec = TrialRecorder::start(sim, mode);
    driver.reset();
    let dt = sim.config().dt;
    loop {
        let step = rec.step(sim, |s, a, al| driver.act(s, a, al, dt))?;
        if let Some(run) = step.finished {
            return Ok(run);
        }
    }
}
