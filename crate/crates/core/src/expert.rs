//! Autopilot built on expert demonstrations: nearest expert sample,
//! fixed-interval lookahead target and waypoint PID control.

use crate::error::{Error, Result};
use crate::geometry::{signed_offset, wrap_angle, Vec2};
use crate::spatial::GridIndex;
use crate::track::Track;
use crate::trajectory::{Sample, Trajectory};
use crate::vehicle::{step, Action, VehicleParams, VehicleState};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Reference to one raw sample of one expert demo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ExpertPoint {
    pub demo: usize,
    pub index: usize,
}

/// Immutable set of expert laps with a spatial index over their samples.
#[derive(Debug, Clone)]
pub struct ExpertBank {
    demos: Vec<Trajectory>,
    grid: GridIndex,
    flat: Vec<ExpertPoint>,
}

pub const GRID_CELL: f64 = 5.0;

impl ExpertBank {
    pub fn new(demos: Vec<Trajectory>) -> Result<Self> {
        if demos.is_empty() {
            return Err(Error::invalid("expert bank needs at least one demo"));
        }
        if let Some(i) = demos.iter().position(|d| d.len() < 2) {
            return Err(Error::invalid(format!("expert demo {i} has fewer than two samples")));
        }
        let mut grid = GridIndex::new(GRID_CELL);
        let mut flat = Vec::new();
        for (d, demo) in demos.iter().enumerate() {
            for (i, s) in demo.samples.iter().enumerate() {
                grid.insert_point(flat.len(), s.state.position);
                flat.push(ExpertPoint { demo: d, index: i });
            }
        }
        Ok(Self { demos, grid, flat })
    }

    /// Loads demos and checks each one is a clean full lap of `track`.
    pub fn new_checked(demos: Vec<Trajectory>, track: &Track) -> Result<Self> {
        for (i, d) in demos.iter().enumerate() {
            check_clean_lap(d, track).map_err(|e| Error::invalid(format!("expert demo {i}: {e}")))?;
        }
        Self::new(demos)
    }

    pub fn demos(&self) -> &[Trajectory] {
        &self.demos
    }

    pub fn sample(&self, p: ExpertPoint) -> &Sample {
        &self.demos[p.demo].samples[p.index]
    }

    /// Globally nearest expert sample by planar distance; ties go to the
    /// lowest (demo, index).
    pub fn nearest(&self, pos: Vec2) -> ExpertPoint {
        let mut best: Option<(f64, ExpertPoint)> = None;
        self.grid.search(pos, |id| {
            let p = self.flat[id];
            let d = pos.dist_sq(self.sample(p).state.position);
            let better = match best {
                None => true,
                Some((bd, bp)) => d < bd || (d == bd && p < bp),
            };
            if better {
                best = Some((d, p));
            }
            best.map(|(d, _)| d.sqrt())
        });
        best.expect("bank is non-empty").1
    }

    /// Exhaustive scan with the same ordering as [`ExpertBank::nearest`].
    pub fn nearest_linear(&self, pos: Vec2) -> ExpertPoint {
        let mut best = (f64::INFINITY, ExpertPoint { demo: 0, index: 0 });
        for (d, demo) in self.demos.iter().enumerate() {
            for (i, s) in demo.samples.iter().enumerate() {
                let dist = pos.dist_sq(s.state.position);
                if dist < best.0 {
                    best = (dist, ExpertPoint { demo: d, index: i });
                }
            }
        }
        best.1
    }

    /// Expert point `interval` raw samples ahead of `near`, wrapping around the lap.
    pub fn lookahead(&self, near: ExpertPoint, interval: usize) -> Result<ExpertPoint> {
        if interval == 0 {
            return Err(Error::invalid("lookahead interval must be at least 1"));
        }
        let n = self.demos[near.demo].len();
        Ok(ExpertPoint {
            demo: near.demo,
            index: (near.index + interval) % n,
        })
    }

    pub fn lookahead_target(&self, near: ExpertPoint, interval: usize) -> Result<VehicleState> {
        Ok(self.sample(self.lookahead(near, interval)?).state)
    }

    pub fn load_manifest(path: &Path, track: &Track) -> Result<Self> {
        let manifest: BankManifest = crate::io::read_json(path)?;
        let demos = manifest
            .demos
            .iter()
            .map(|p| Trajectory::read_csv(&crate::io::relative_to(path, p), track))
            .collect::<Result<Vec<_>>>()?;
        Self::new_checked(demos, track)
    }

    /// Writes `demo_<k>.csv` files plus `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let mut names = Vec::new();
        for (k, d) in self.demos.iter().enumerate() {
            let name = PathBuf::from(format!("demo_{k}.csv"));
            d.write_csv(&dir.join(&name))?;
            names.push(name);
        }
        let manifest = BankManifest {
            dt: self.demos[0].dt,
            demos: names,
        };
        let path = dir.join("manifest.json");
        crate::io::write_json(&path, &manifest)?;
        Ok(path)
    }
}

/// Bank manifest listing demo CSV files relative to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankManifest {
    pub dt: f64,
    pub demos: Vec<PathBuf>,
}

fn check_clean_lap(d: &Trajectory, track: &Track) -> Result<()> {
    let net = d.net_progress(track);
    if net < 0.99 * track.length() {
        return Err(Error::runtime(format!(
            "covers {net:.1} m of a {:.1} m lap",
            track.length()
        )));
    }
    if let Some(s) = d.samples.iter().find(|s| s.off_track) {
        return Err(Error::runtime(format!(
            "leaves the track at t={:.2}s (lateral {:.2} m)",
            s.state.time, s.lateral
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pid {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    /// Acts on `cross_track_weight * cte + heading error`.
    pub steering: Pid,
    /// Acts on target speed minus speed.
    pub speed: Pid,
    /// Cross-track error scale, rad per meter.
    pub cross_track_weight: f64,
    /// Absolute bound on each integrator state.
    pub integrator_clamp: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            steering: Pid {
                kp: 1.2,
                ki: 0.0,
                kd: 0.02,
            },
            speed: Pid {
                kp: 0.5,
                ki: 0.05,
                kd: 0.0,
            },
            cross_track_weight: 1.0,
            integrator_clamp: 5.0,
        }
    }
}

impl PidGains {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.steering.kp,
            self.steering.ki,
            self.steering.kd,
            self.speed.kp,
            self.speed.ki,
            self.speed.kd,
            self.cross_track_weight,
        ];
        if all.iter().any(|g| !g.is_finite()) {
            return Err(Error::invalid("PID gains must be finite"));
        }
        if !(self.integrator_clamp > 0.0) {
            return Err(Error::invalid("integrator clamp must be positive"));
        }
        Ok(())
    }
}

/// Per-session controller state.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PidMemory {
    pub steer_integral: f64,
    pub speed_integral: f64,
    pub steer_last: Option<f64>,
    pub speed_last: Option<f64>,
}

impl PidMemory {
    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// Error terms the steering loop acts on.
pub fn steering_error(state: &VehicleState, anchor: Vec2, target: &VehicleState, gains: &PidGains) -> f64 {
    let chord = target.position - anchor;
    // Positive when the vehicle sits to the right of the chord.
    let cte = -signed_offset(state.position, anchor, chord);
    let to_target = target.position - state.position;
    let heading_err = if to_target.norm_sq() > 0.0 {
        wrap_angle(to_target.angle() - state.heading)
    } else {
        0.0
    };
    gains.cross_track_weight * cte + heading_err
}

/// One PID update toward `target`, steering along the chord from `anchor`.
pub fn pid_control(
    state: &VehicleState,
    anchor: Vec2,
    target: &VehicleState,
    gains: &PidGains,
    memory: &mut PidMemory,
    dt: f64,
) -> Action {
    let clamp = gains.integrator_clamp;

    let e = steering_error(state, anchor, target, gains);
    memory.steer_integral = (memory.steer_integral + e * dt).clamp(-clamp, clamp);
    let de = memory.steer_last.map_or(0.0, |last| (e - last) / dt);
    memory.steer_last = Some(e);
    let g = gains.steering;
    let steer = g.kp * e + g.ki * memory.steer_integral + g.kd * de;

    let ev = target.speed - state.speed;
    memory.speed_integral = (memory.speed_integral + ev * dt).clamp(-clamp, clamp);
    let dev = memory.speed_last.map_or(0.0, |last| (ev - last) / dt);
    memory.speed_last = Some(ev);
    let g = gains.speed;
    let u = g.kp * ev + g.ki * memory.speed_integral + g.kd * dev;
    let (throttle, brake) = if u > 0.0 { (u, 0.0) } else { (0.0, -u) };
    Action::new(steer, throttle, brake)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutopilotConfig {
    pub gains: PidGains,
    /// Raw expert samples between the nearest point and the steering target.
    pub steer_lookahead: usize,
    /// Raw expert samples between the nearest point and the speed target.
    pub speed_lookahead: usize,
}

impl Default for AutopilotConfig {
    fn default() -> Self {
        Self {
            gains: PidGains::default(),
            steer_lookahead: 40,
            speed_lookahead: 40,
        }
    }
}

/// The assisting agent: owns its controller memory, borrows the bank.
#[derive(Debug, Clone)]
pub struct Autopilot<'a> {
    bank: &'a ExpertBank,
    config: AutopilotConfig,
    memory: PidMemory,
}

impl<'a> Autopilot<'a> {
    pub fn new(bank: &'a ExpertBank, config: AutopilotConfig) -> Result<Self> {
        config.gains.validate()?;
        if config.steer_lookahead == 0 || config.speed_lookahead == 0 {
            return Err(Error::invalid("lookahead intervals must be at least 1"));
        }
        Ok(Self {
            bank,
            config,
            memory: PidMemory::default(),
        })
    }

    pub fn reset(&mut self) {
        self.memory.reset();
    }

    pub fn act(&mut self, state: &VehicleState, dt: f64) -> Action {
        let near = self.bank.nearest(state.position);
        let anchor = self.bank.sample(near).state.position;
        let steer_target = self
            .bank
            .lookahead_target(near, self.config.steer_lookahead)
            .expect("lookahead validated");
        let speed_target = self
            .bank
            .lookahead_target(near, self.config.speed_lookahead)
            .expect("lookahead validated");
        let target = VehicleState {
            speed: speed_target.speed,
            ..steer_target
        };
        pid_control(state, anchor, &target, &self.config.gains, &mut self.memory, dt)
    }
}

/// Time-parameterized centerline lap used as the bank for demo generation.
pub fn reference_lap(track: &Track, params: &VehicleParams, dt: f64) -> Result<Trajectory> {
    let ds = 1.0;
    let n = (track.length() / ds).ceil() as usize;
    let ds = track.length() / n as f64;
    let mut v: Vec<f64> = (0..n).map(|i| track.target_speed_at(i as f64 * ds)).collect();
    // Accelerate/brake-limited envelope; two sweeps settle the cyclic wrap.
    let accel = 0.6 * params.a_max;
    let decel = 0.5 * params.b_max;
    for _ in 0..2 {
        for i in 0..n {
            let j = (i + 1) % n;
            v[j] = v[j].min((v[i] * v[i] + 2.0 * accel * ds).sqrt());
        }
        for i in (0..n).rev() {
            let j = (i + 1) % n;
            v[i] = v[i].min((v[j] * v[j] + 2.0 * decel * ds).sqrt());
        }
    }
    let speed_at = |s: f64| {
        let x = s / ds;
        let i = x.floor() as usize % n;
        let t = x - x.floor();
        v[i] * (1.0 - t) + v[(i + 1) % n] * t
    };
    let mut samples = Vec::new();
    let mut s = 0.0;
    let mut t = 0.0;
    while s < track.length() {
        let speed = speed_at(s);
        let state = VehicleState::new(track.point_at(s), track.heading_at(s), speed, t);
        samples.push(Sample::new(track, state, Action::ZERO));
        s += speed * dt;
        t += dt;
    }
    Trajectory::new(samples, dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub vehicle: VehicleParams,
    pub autopilot: AutopilotConfig,
    pub dt: f64,
    /// Standard deviation of the initial lateral offset, meters.
    pub jitter_lateral: f64,
    /// Standard deviation of the initial speed, m/s.
    pub jitter_speed: f64,
    /// Hard cap on a demo's simulated duration, seconds.
    pub max_time: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            vehicle: VehicleParams::default(),
            autopilot: AutopilotConfig::default(),
            dt: crate::vehicle::DEFAULT_DT,
            jitter_lateral: 0.3,
            jitter_speed: 0.5,
            max_time: 180.0,
        }
    }
}

/// Runs the autopilot on the reference lap `k` times from jittered flying
/// starts on the start line and returns the resulting laps as a bank.
pub fn generate_expert_demos(track: &Track, k: usize, seed: u64, cfg: &DemoConfig) -> Result<ExpertBank> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    if k == 0 {
        return Err(Error::invalid("need at least one expert demo"));
    }
    let reference = ExpertBank::new(vec![reference_lap(track, &cfg.vehicle, cfg.dt)?])?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut demos = Vec::with_capacity(k);
    for i in 0..k {
        let (lat, dv) = if i == 0 {
            (0.0, 0.0)
        } else {
            (
                cfg.jitter_lateral * unit.sample(&mut rng),
                cfg.jitter_speed * unit.sample(&mut rng),
            )
        };
        let (p0, h0) = track.start_pose();
        let start = VehicleState::new(
            p0 + Vec2::from_angle(h0 + std::f64::consts::FRAC_PI_2) * lat,
            h0,
            reference.demos()[0].samples[0].state.speed + dv,
            0.0,
        );
        let demo = fly_lap(track, &reference, start, cfg)
            .map_err(|e| Error::runtime(format!("expert rollout {i} failed: {e}")))?;
        check_clean_lap(&demo, track).map_err(|e| Error::runtime(format!("expert rollout {i}: {e}")))?;
        demos.push(demo);
    }
    ExpertBank::new(demos)
}

/// Full-authority autopilot lap from `start` until one lap of progress accrues.
pub fn fly_lap(track: &Track, bank: &ExpertBank, start: VehicleState, cfg: &DemoConfig) -> Result<Trajectory> {
    let mut pilot = Autopilot::new(bank, cfg.autopilot)?;
    let mut state = start;
    let mut samples = Vec::new();
    let mut covered = 0.0;
    let mut last_progress = track.project(state.position).progress;
    while state.time <= cfg.max_time {
        let action = pilot.act(&state, cfg.dt);
        let sample = Sample::new(track, state, action);
        covered += track.progress_delta(last_progress, sample.progress);
        last_progress = sample.progress;
        samples.push(sample);
        if covered >= track.length() {
            return Trajectory::new(samples, cfg.dt);
        }
        state = step(&state, &action, cfg.dt, &cfg.vehicle)?;
    }
    Err(Error::runtime(format!(
        "no lap within {:.0} s ({covered:.1} m covered)",
        cfg.max_time
    )))
}
