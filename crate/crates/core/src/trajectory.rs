//! Timed state/action sequences and their CSV form.

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Vec2};
use crate::track::Track;
use crate::vehicle::{Action, VehicleState};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub state: VehicleState,
    pub action: Action,
    /// Arclength of the projection on the centerline.
    pub progress: f64,
    /// Signed lateral offset from the centerline.
    pub lateral: f64,
    pub off_track: bool,
}

impl Sample {
    pub fn new(track: &Track, state: VehicleState, action: Action) -> Self {
        let proj = track.project(state.position);
        Self {
            state,
            action,
            progress: proj.progress,
            lateral: proj.lateral,
            off_track: track.is_off_track(proj.lateral),
        }
    }

    pub fn position(&self) -> Vec2 {
        self.state.position
    }

    pub fn time(&self) -> f64 {
        self.state.time
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    /// Nominal spacing of the raw samples, seconds.
    pub dt: f64,
}

impl Trajectory {
    pub fn new(samples: Vec<Sample>, dt: f64) -> Result<Self> {
        let t = Self { samples, dt };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.samples.windows(2) {
            if !(w[1].state.time > w[0].state.time) {
                return Err(Error::invalid(format!(
                    "trajectory times must strictly increase ({} then {})",
                    w[0].state.time, w[1].state.time
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.samples.iter().map(|s| s.state.position).collect()
    }

    pub fn duration(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.state.time - a.state.time,
            _ => 0.0,
        }
    }

    /// Net progress accumulated sample to sample, handling the start-line wrap.
    pub fn net_progress(&self, track: &Track) -> f64 {
        self.samples
            .windows(2)
            .map(|w| track.progress_delta(w[0].progress, w[1].progress))
            .sum()
    }

    /// Linear interpolation onto whole seconds between the first and last sample.
    pub fn resample_1hz(&self, track: &Track) -> Result<Trajectory> {
        if self.samples.len() < 2 {
            return Err(Error::invalid("resampling needs at least two samples"));
        }
        let t0 = self.samples[0].state.time;
        let t1 = self.samples[self.samples.len() - 1].state.time;
        let mut out = Vec::new();
        let mut j = 0usize;
        let mut k = t0.ceil() as i64;
        while (k as f64) <= t1 {
            let t = k as f64;
            while j + 1 < self.samples.len() && self.samples[j + 1].state.time < t {
                j += 1;
            }
            let a = &self.samples[j];
            let state_action = if a.state.time == t {
                (a.state, a.action)
            } else {
                let b = &self.samples[(j + 1).min(self.samples.len() - 1)];
                if b.state.time == t {
                    (b.state, b.action)
                } else {
                    let u = (t - a.state.time) / (b.state.time - a.state.time);
                    interpolate(a, b, u, t)
                }
            };
            out.push(Sample::new(track, state_action.0, state_action.1));
            k += 1;
        }
        Ok(Trajectory { samples: out, dt: 1.0 })
    }

    /// Samples `start..end` as a new trajectory.
    pub fn slice(&self, start: usize, end: usize) -> Trajectory {
        Trajectory {
            samples: self.samples[start..end].to_vec(),
            dt: self.dt,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|source| Error::Io {
                    path: dir.to_path_buf(),
                    source,
                })?;
            }
        }
        let mut w = csv::Writer::from_path(path)?;
        self.write_records(&mut w)?;
        w.flush().map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        self.write_records(&mut w)?;
        let bytes = w.into_inner().map_err(|e| Error::runtime(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::runtime(e.to_string()))
    }

    fn write_records<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        for s in &self.samples {
            w.serialize(CsvRow::from(s))?;
        }
        if self.samples.is_empty() {
            w.write_record(CSV_HEADER)?;
        }
        Ok(())
    }

    /// Reads the CSV form; lateral offsets are recomputed from `track`.
    pub fn read_csv(path: &Path, track: &Track) -> Result<Trajectory> {
        let mut r = csv::Reader::from_path(path)?;
        Self::read_records(&mut r, track)
    }

    pub fn from_csv_str(text: &str, track: &Track) -> Result<Trajectory> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        Self::read_records(&mut r, track)
    }

    fn read_records<R: std::io::Read>(r: &mut csv::Reader<R>, track: &Track) -> Result<Trajectory> {
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        if header != CSV_HEADER {
            return Err(Error::invalid(format!("unexpected trajectory header {header:?}")));
        }
        let mut samples = Vec::new();
        for row in r.deserialize::<CsvRow>() {
            let row = row?;
            let state = VehicleState::new(Vec2::new(row.x, row.y), row.heading, row.speed, row.t);
            let action = Action::new(row.steer, row.throttle, row.brake);
            let proj = track.project(state.position);
            samples.push(Sample {
                state,
                action,
                progress: row.progress,
                lateral: proj.lateral,
                off_track: row.off_track != 0,
            });
        }
        let dt = if samples.len() >= 2 {
            samples[1].state.time - samples[0].state.time
        } else {
            1.0
        };
        Trajectory::new(samples, dt)
    }
}

pub(crate) fn interpolate(a: &Sample, b: &Sample, u: f64, t: f64) -> (VehicleState, Action) {
    let pos = a.state.position.lerp(b.state.position, u);
    let dh = wrap_angle(b.state.heading - a.state.heading);
    let heading = wrap_angle(a.state.heading + u * dh);
    let speed = a.state.speed + u * (b.state.speed - a.state.speed);
    let lerp = |x: f64, y: f64| x + u * (y - x);
    let action = Action::new(
        lerp(a.action.steer, b.action.steer),
        lerp(a.action.throttle, b.action.throttle),
        lerp(a.action.brake, b.action.brake),
    );
    (
        VehicleState {
            position: pos,
            heading,
            speed,
            time: t,
        },
        action,
    )
}

pub const CSV_HEADER: [&str; 10] = [
    "t", "x", "y", "heading", "speed", "steer", "throttle", "brake", "progress", "off_track",
];

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    t: f64,
    x: f64,
    y: f64,
    heading: f64,
    speed: f64,
    steer: f64,
    throttle: f64,
    brake: f64,
    progress: f64,
    off_track: u8,
}

impl From<&Sample> for CsvRow {
    fn from(s: &Sample) -> Self {
        Self {
            t: s.state.time,
            x: s.state.position.x,
            y: s.state.position.y,
            heading: s.state.heading,
            speed: s.state.speed,
            steer: s.action.steer,
            throttle: s.action.throttle,
            brake: s.action.brake,
            progress: s.progress,
            off_track: u8::from(s.off_track),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::default_track;
    use proptest::prelude::*;

    fn sample(track: &Track, t: f64, x: f64, y: f64) -> Sample {
        Sample::new(track, VehicleState::new(Vec2::new(x, y), 0.0, 10.0, t), Action::new(0.1, 0.5, 0.0))
    }

    #[test]
    fn midpoint_interpolation() {
        let track = default_track();
        let tr = Trajectory::new(vec![sample(&track, 0.0, 0.0, 0.0), sample(&track, 2.0, 4.0, 0.0)], 2.0).unwrap();
        let r = tr.resample_1hz(&track).unwrap();
        assert_eq!(r.len(), 3);
        assert!((r.samples[1].state.position.x - 2.0).abs() < 1e-12);
        assert_eq!(r.samples[1].state.time, 1.0);
    }

    #[test]
    fn one_hz_input_is_unchanged() {
        let track = default_track();
        let tr = Trajectory::new((0..5).map(|i| sample(&track, i as f64, 3.0 * i as f64, 0.5)).collect(), 1.0).unwrap();
        let r = tr.resample_1hz(&track).unwrap();
        assert_eq!(r, tr);
    }

    #[test]
    fn single_sample_is_rejected() {
        let track = default_track();
        let tr = Trajectory::new(vec![sample(&track, 0.0, 0.0, 0.0)], 1.0).unwrap();
        assert!(tr.resample_1hz(&track).is_err());
    }

    #[test]
    fn non_increasing_times_are_rejected() {
        let track = default_track();
        assert!(Trajectory::new(vec![sample(&track, 1.0, 0.0, 0.0), sample(&track, 1.0, 1.0, 0.0)], 1.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let track = default_track();
        let tr = Trajectory::new((0..4).map(|i| sample(&track, 0.05 * i as f64, i as f64, 1.0)).collect(), 0.05).unwrap();
        let text = tr.to_csv_string().unwrap();
        assert!(text.starts_with("t,x,y,heading,speed,steer,throttle,brake,progress,off_track\n"));
        let back = Trajectory::from_csv_str(&text, &track).unwrap();
        assert_eq!(back.samples.len(), 4);
        for (a, b) in tr.samples.iter().zip(&back.samples) {
            assert_eq!(a, b);
        }
    }

    proptest! {
        #[test]
        fn resampled_points_lie_on_bracketing_segments(
            steps in proptest::collection::vec((0.05f64..0.9, -5.0f64..5.0, -5.0f64..5.0), 2..40)
        ) {
            let track = default_track();
            let mut t = 0.0;
            let mut p = Vec2::new(10.0, 0.0);
            let mut samples = Vec::new();
            for (dt, dx, dy) in steps {
                samples.push(sample(&track, t, p.x, p.y));
                t += dt;
                p = p + Vec2::new(dx, dy);
            }
            let tr = Trajectory::new(samples, 0.1).unwrap();
            if tr.len() < 2 { return Ok(()); }
            let r = tr.resample_1hz(&track).unwrap();
            for s in &r.samples {
                let tt = s.state.time;
                let j = tr.samples.iter().rposition(|x| x.state.time <= tt).unwrap();
                let a = tr.samples[j].state.position;
                let b = tr.samples[(j + 1).min(tr.len() - 1)].state.position;
                let q = s.state.position;
                let on_line = (b - a).cross(q - a).abs() <= 1e-9 * (1.0 + (b - a).norm() * (q - a).norm());
                let within = (q - a).dot(b - a) >= -1e-9 && (q - b).dot(a - b) >= -1e-9;
                prop_assert!(on_line && within);
            }
        }
    }
}
