//! Which skill a student can most improve on: assisted-minus-unassisted
//! performance per expert segment, weighted by each skill's posterior.

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::metrics::{cumulative_progress, dtw, dtw_by};
use crate::skills::{skill_to_control, ClusterMap, Control, Segmentation, SkillLibrary};
use crate::track::Track;
use crate::trajectory::{interpolate, Sample, Trajectory};
use crate::vehicle::{Action, Channel, VehicleState};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Arclength covered by one averaging bin, meters.
pub const BIN_LENGTH: f64 = 10.0;

/// Means over several laps on a common grid of 10 m bins. Each lap is
/// interpolated at the bin's center arclength, counted from the start line;
/// a bin survives only if every lap reaches it.
pub fn average_trajectories(trajs: &[Trajectory], track: &Track) -> Result<Trajectory> {
    if trajs.is_empty() {
        return Err(Error::invalid("nothing to average"));
    }
    let n_bins = (track.length() / BIN_LENGTH).ceil() as usize;
    let laps: Vec<Vec<f64>> = trajs.iter().map(|t| lap_distance(t, track)).collect();
    let mut out = Vec::new();
    'bins: for b in 0..n_bins {
        let center = (b as f64 + 0.5) * BIN_LENGTH;
        if center >= track.length() {
            break;
        }
        let mut at = Vec::with_capacity(trajs.len());
        for (traj, dist) in trajs.iter().zip(&laps) {
            match sample_at(traj, dist, center, track) {
                Some(s) => at.push(s),
                None => continue 'bins,
            }
        }
        out.push(mean_sample(track, &at.iter().collect::<Vec<_>>()));
    }
    if out.is_empty() {
        return Err(Error::invalid("trajectories share no covered progress"));
    }
    Ok(Trajectory { samples: out, dt: trajs[0].dt })
}

/// Distance from the start line at every sample. A lap that starts just
/// behind the line begins slightly negative.
fn lap_distance(traj: &Trajectory, track: &Track) -> Vec<f64> {
    let Some(first) = traj.samples.first() else {
        return Vec::new();
    };
    let start = if first.progress > track.length() / 2.0 {
        first.progress - track.length()
    } else {
        first.progress
    };
    cumulative_progress(traj, track).into_iter().map(|c| start + c).collect()
}

/// The lap's state where it first reaches distance `d`.
fn sample_at(traj: &Trajectory, dist: &[f64], d: f64, track: &Track) -> Option<Sample> {
    let k = dist.windows(2).position(|w| w[0] <= d && d <= w[1])?;
    let (a, b) = (&traj.samples[k], &traj.samples[k + 1]);
    let span = dist[k + 1] - dist[k];
    let u = if span > 0.0 { (d - dist[k]) / span } else { 0.0 };
    let t = a.state.time + u * (b.state.time - a.state.time);
    let (state, action) = interpolate(a, b, u, t);
    Some(Sample::new(track, state, action))
}

pub(crate) fn mean_sample(track: &Track, samples: &[&Sample]) -> Sample {
    let n = samples.len() as f64;
    let mean = |f: &dyn Fn(&Sample) -> f64| samples.iter().map(|s| f(s)).sum::<f64>() / n;
    let position = Vec2::new(mean(&|s| s.state.position.x), mean(&|s| s.state.position.y));
    let heading = Vec2::new(mean(&|s| s.state.heading.cos()), mean(&|s| s.state.heading.sin())).angle();
    let state = VehicleState::new(position, heading, mean(&|s| s.state.speed), mean(&|s| s.state.time));
    let action = Action::new(mean(&|s| s.action.steer), mean(&|s| s.action.throttle), mean(&|s| s.action.brake));
    Sample::new(track, state, action)
}

/// Progress window of one expert segment. `end_inclusive` is set only for
/// the last segment; the others stop short of the next segment's start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgressInterval {
    pub start: f64,
    pub end: f64,
    pub end_inclusive: bool,
}

impl ProgressInterval {
    pub fn contains(&self, p: f64) -> bool {
        let below_end = |p: f64| if self.end_inclusive { p <= self.end } else { p < self.end };
        if self.start <= self.end {
            p >= self.start && below_end(p)
        } else {
            // Crosses the start line.
            p >= self.start || below_end(p)
        }
    }
}

/// One interval per segment of a segmented expert lap.
pub fn segment_intervals(expert: &Trajectory, seg: &Segmentation) -> Result<Vec<ProgressInterval>> {
    if seg.bounds.last() != Some(&expert.len()) {
        return Err(Error::invalid(format!(
            "segmentation covers {} samples, expert has {}",
            seg.bounds.last().copied().unwrap_or(0),
            expert.len()
        )));
    }
    Ok((0..seg.len())
        .map(|i| {
            let r = seg.segment(i);
            let start = expert.samples[r.start].progress;
            if i + 1 < seg.len() {
                ProgressInterval { start, end: expert.samples[r.end].progress, end_inclusive: false }
            } else {
                ProgressInterval { start, end: expert.samples[r.end - 1].progress, end_inclusive: true }
            }
        })
        .collect())
}

/// Longest contiguous run of samples inside the interval, possibly empty.
pub fn align(traj: &Trajectory, interval: &ProgressInterval) -> Trajectory {
    let mut best = 0..0;
    let mut start = None;
    for (i, s) in traj.samples.iter().enumerate() {
        match (interval.contains(s.progress), start) {
            (true, None) => start = Some(i),
            (false, Some(a)) => {
                if i - a > best.len() {
                    best = a..i;
                }
                start = None;
            }
            _ => {}
        }
    }
    if let Some(a) = start {
        if traj.len() - a > best.len() {
            best = a..traj.len();
        }
    }
    traj.slice(best.start, best.end)
}

/// What the score compares.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScoreFeatures {
    /// Planar positions.
    #[default]
    Positions,
    /// Positions plus speed scaled by `speed_weight` (seconds).
    State { speed_weight: f64 },
    /// State plus the applied controls, steer scaled by `steer_weight` and
    /// throttle and brake by `pedal_weight` (meters per unit input).
    Full { speed_weight: f64, steer_weight: f64, pedal_weight: f64 },
}

impl ScoreFeatures {
    pub fn id(&self) -> String {
        match self {
            ScoreFeatures::Positions => "neg_dtw_xy".to_string(),
            ScoreFeatures::State { speed_weight } => format!("neg_dtw_xyv_{speed_weight}"),
            ScoreFeatures::Full { speed_weight, steer_weight, pedal_weight } => {
                format!("neg_dtw_xyva_{speed_weight}_{steer_weight}_{pedal_weight}")
            }
        }
    }
}

/// Negated DTW distance to the expert reference; `None` when either side is empty.
pub fn score(sub: &Trajectory, expert_ref: &Trajectory, features: ScoreFeatures) -> Option<f64> {
    if sub.is_empty() || expert_ref.is_empty() {
        return None;
    }
    let d = match features {
        ScoreFeatures::Positions => dtw(&sub.positions(), &expert_ref.positions()),
        ScoreFeatures::State { speed_weight } => dtw_by(&sub.samples, &expert_ref.samples, |a, b| {
            let dp = a.state.position - b.state.position;
            let dv = speed_weight * (a.state.speed - b.state.speed);
            (dp.norm_sq() + dv * dv).sqrt()
        }),
        ScoreFeatures::Full { speed_weight, steer_weight, pedal_weight } => {
            dtw_by(&sub.samples, &expert_ref.samples, |a, b| {
                let dp = a.state.position - b.state.position;
                let dv = speed_weight * (a.state.speed - b.state.speed);
                let ds = steer_weight * (a.action.steer - b.action.steer);
                let dt = pedal_weight * (a.action.throttle - b.action.throttle);
                let db = pedal_weight * (a.action.brake - b.action.brake);
                (dp.norm_sq() + dv * dv + ds * ds + dt * dt + db * db).sqrt()
            })
        }
    };
    d.ok().map(|d| -d)
}

/// How the assisted side of the difference is scored.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum AssistedScore {
    #[default]
    Measured,
    /// The ablation: a fixed value in place of the assisted score.
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZpdConfig {
    pub features: ScoreFeatures,
    pub assisted: AssistedScore,
}

impl Default for ZpdConfig {
    /// Pedal inputs are compared directly: the closed loop hides most pedal
    /// errors from positions alone.
    fn default() -> Self {
        Self {
            features: ScoreFeatures::Full { speed_weight: 0.5, steer_weight: 0.0, pedal_weight: 20.0 },
            assisted: AssistedScore::Measured,
        }
    }
}

/// Expert lap, its segmentation and the per-segment references, prepared once.
#[derive(Debug, Clone)]
pub struct ZpdReference {
    pub intervals: Vec<ProgressInterval>,
    pub expert_parts: Vec<Trajectory>,
    pub posteriors: Vec<Vec<f64>>,
}

impl ZpdReference {
    pub fn new(expert: &Trajectory, seg: &Segmentation) -> Result<Self> {
        let intervals = segment_intervals(expert, seg)?;
        let expert_parts = (0..seg.len()).map(|i| {
            let r = seg.segment(i);
            expert.slice(r.start, r.end)
        }).collect();
        Ok(Self { intervals, expert_parts, posteriors: seg.posteriors.clone() })
    }

    /// Segments come from `expert`; the reference is the average of
    /// `laps` on the same 10 m grid as the averaged student laps, so sample
    /// spacing does not enter the distance.
    pub fn binned(expert: &Trajectory, seg: &Segmentation, laps: &[Trajectory], track: &Track) -> Result<Self> {
        let intervals = segment_intervals(expert, seg)?;
        let grid = average_trajectories(laps, track)?;
        let expert_parts = intervals.iter().map(|iv| align(&grid, iv)).collect();
        Ok(Self { intervals, expert_parts, posteriors: seg.posteriors.clone() })
    }

    pub fn n_skills(&self) -> usize {
        self.posteriors.first().map_or(0, |r| r.len())
    }

    /// Per-segment score differences; `None` where either alignment is empty.
    pub fn segment_gains(&self, student: &Trajectory, assisted: &Trajectory, cfg: &ZpdConfig) -> Vec<Option<f64>> {
        self.intervals
            .iter()
            .zip(&self.expert_parts)
            .map(|(iv, reference)| {
                let own = score(&align(student, iv), reference, cfg.features)?;
                let helped = match cfg.assisted {
                    AssistedScore::Measured => score(&align(assisted, iv), reference, cfg.features)?,
                    AssistedScore::Constant(c) => c,
                };
                Some(helped - own)
            })
            .collect()
    }
}

/// Posterior-weighted gain for skill `z`. Segments the student or the
/// assisted run never reached contribute nothing.
pub fn zpd_from_gains(posteriors: &[Vec<f64>], gains: &[Option<f64>], z: usize) -> f64 {
    posteriors.iter().zip(gains).map(|(p, g)| g.map_or(0.0, |g| p[z] * g)).sum()
}

pub fn zpd(z: usize, reference: &ZpdReference, student: &Trajectory, assisted: &Trajectory, cfg: &ZpdConfig) -> f64 {
    zpd_from_gains(&reference.posteriors, &reference.segment_gains(student, assisted, cfg), z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZpdScores {
    pub per_skill: Vec<f64>,
    pub score_id: String,
    pub trajectories_used: usize,
}

pub fn zpd_scores(
    reference: &ZpdReference,
    student: &Trajectory,
    assisted: &Trajectory,
    cfg: &ZpdConfig,
    trajectories_used: usize,
) -> ZpdScores {
    let gains = reference.segment_gains(student, assisted, cfg);
    let per_skill = (0..reference.n_skills()).map(|z| zpd_from_gains(&reference.posteriors, &gains, z)).collect();
    let mut score_id = cfg.features.id();
    if let AssistedScore::Constant(c) = cfg.assisted {
        score_id.push_str(&format!("_const_{c}"));
    }
    ZpdScores { per_skill, score_id, trajectories_used }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSkill {
    pub skill: usize,
    pub control: Channel,
    pub zpd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoachDecision {
    pub control: Channel,
    pub skill: usize,
    /// Skills with a channel mapping, best first.
    pub ranking: Vec<RankedSkill>,
}

pub fn choose_skill(scores: &ZpdScores, lib: &SkillLibrary, cmap: &ClusterMap) -> Result<CoachDecision> {
    if scores.per_skill.len() != lib.len() {
        return Err(Error::invalid(format!(
            "{} zpd scores for a library of {} skills",
            scores.per_skill.len(),
            lib.len()
        )));
    }
    let mut ranking = Vec::new();
    for (z, &v) in scores.per_skill.iter().enumerate() {
        if let Control::Channel(c) = skill_to_control(lib, cmap, z)? {
            ranking.push(RankedSkill { skill: z, control: c, zpd: v });
        }
    }
    if ranking.is_empty() {
        return Err(Error::invalid("no skill maps to steer, throttle or brake"));
    }
    let tie_rank = |c: Channel| Channel::ALL.iter().position(|&o| o == c).unwrap_or(3);
    ranking.sort_by(|a, b| {
        b.zpd
            .total_cmp(&a.zpd)
            .then(tie_rank(a.control).cmp(&tie_rank(b.control)))
            .then(a.skill.cmp(&b.skill))
    });
    let best = &ranking[0];
    Ok(CoachDecision { control: best.control, skill: best.skill, ranking: ranking.clone() })
}

/// Best zpd per channel among its skills.
pub fn per_channel(decision: &CoachDecision) -> BTreeMap<Channel, f64> {
    let mut out: BTreeMap<Channel, f64> = BTreeMap::new();
    for r in &decision.ranking {
        let e = out.entry(r.control).or_insert(f64::NEG_INFINITY);
        *e = e.max(r.zpd);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZpdReport {
    pub per_skill: BTreeMap<String, f64>,
    pub per_channel: BTreeMap<String, f64>,
    pub decision: Channel,
    pub skill: usize,
    pub score_id: String,
    pub trajectories_used: usize,
}

impl ZpdReport {
    pub fn new(scores: &ZpdScores, decision: &CoachDecision) -> Self {
        Self {
            per_skill: scores.per_skill.iter().enumerate().map(|(z, v)| (z.to_string(), *v)).collect(),
            per_channel: per_channel(decision).into_iter().map(|(c, v)| (c.to_string(), v)).collect(),
            decision: decision.control,
            skill: decision.skill,
            score_id: scores.score_id.clone(),
            trajectories_used: scores.trajectories_used,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dtw_by;
    use crate::skills::{default_cluster_map, Skill, N_CHANNELS, N_FEATURES};
    use crate::track::default_track;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// A sample `lat` meters left of the centerline at progress `s`.
    fn at(track: &Track, s: f64, lat: f64, speed: f64, t: f64) -> Sample {
        let p = track.point_at(s);
        let h = track.heading_at(s);
        let left = Vec2::new(-h.sin(), h.cos());
        Sample::new(track, VehicleState::new(p + left * lat, h, speed, t), Action::ZERO)
    }

    fn lap(track: &Track, step: f64, lat: impl Fn(f64) -> f64, upto: f64) -> Trajectory {
        let mut samples = Vec::new();
        let mut s = 0.5;
        let mut t = 0.0;
        while s < upto {
            samples.push(at(track, s, lat(s), step, t));
            s += step;
            t += 1.0;
        }
        Trajectory::new(samples, 1.0).unwrap()
    }

    #[test]
    fn single_trajectory_is_binned() {
        let track = default_track();
        let traj = lap(&track, 4.0, |_| 0.5, 300.0);
        let avg = average_trajectories(std::slice::from_ref(&traj), &track).unwrap();
        // Samples from 0.5 m to 296.5 m reach the centers 5, 15, ..., 295.
        assert_eq!(avg.len(), 30);
        for (b, s) in avg.samples.iter().enumerate() {
            assert!((s.progress - (b as f64 + 0.5) * BIN_LENGTH).abs() < 0.05, "bin {b} at {}", s.progress);
            assert!((s.lateral - 0.5).abs() < 0.05);
        }
        // 5 m lies an eighth of the way from the sample at 4.5 m to the one at 8.5 m.
        assert!((avg.samples[0].time() - 1.125).abs() < 0.02);
    }

    #[test]
    fn mirrored_pair_averages_to_centerline() {
        let track = default_track();
        // One sample per bin, at the bin centers, on either side of the line.
        let side = |lat: f64| {
            let samples = (0..100).map(|k| at(&track, 10.0 * k as f64 + 5.0, lat, 5.0, k as f64)).collect();
            Trajectory::new(samples, 1.0).unwrap()
        };
        let (a, b) = (side(1.0), side(-1.0));
        let avg = average_trajectories(&[a, b], &track).unwrap();
        assert!(!avg.is_empty());
        for s in &avg.samples {
            // Chord error of the polyline on the tightest corner stays small.
            assert!(s.lateral.abs() < 0.05, "lateral {}", s.lateral);
        }
    }

    #[test]
    fn averaged_points_lie_in_contributing_hull() {
        let track = default_track();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let trajs: Vec<Trajectory> = (0..2)
                .map(|_| {
                    let step = rng.random_range(3.0..9.0);
                    let phase = rng.random_range(0.0..6.0);
                    let amp = rng.random_range(0.0..3.0);
                    lap(&track, step, |s| amp * (s / 40.0 + phase).sin(), 600.0)
                })
                .collect();
            let avg = average_trajectories(&trajs, &track).unwrap();
            for out in &avg.samples {
                let center = ((out.progress / BIN_LENGTH).floor() + 0.5) * BIN_LENGTH;
                // The samples either side of the bin center in every lap.
                let mut contrib: Vec<Vec2> = Vec::new();
                for t in &trajs {
                    let k = t.samples.iter().rposition(|s| s.progress <= center).unwrap();
                    contrib.push(t.samples[k].position());
                    contrib.push(t.samples[(k + 1).min(t.len() - 1)].position());
                }
                assert!(!contrib.is_empty());
                // Support-function test in 64 directions.
                for k in 0..64 {
                    let d = Vec2::from_angle(k as f64 * std::f64::consts::TAU / 64.0);
                    let hi = contrib.iter().map(|p| p.dot(d)).fold(f64::NEG_INFINITY, f64::max);
                    assert!(out.position().dot(d) <= hi + 1e-9);
                }
            }
        }
    }

    #[test]
    fn nothing_in_common_is_an_error() {
        let track = default_track();
        let a = lap(&track, 3.0, |_| 0.0, 100.0);
        let mut b = lap(&track, 3.0, |_| 0.0, 400.0);
        b.samples.drain(..50);
        assert!(average_trajectories(&[a, b], &track).is_err());
        assert!(average_trajectories(&[], &track).is_err());
    }

    fn seg_of(bounds: Vec<usize>, n: usize) -> Segmentation {
        let k = bounds.len() - 1;
        Segmentation {
            skills: (0..k).map(|i| i % n).collect(),
            posteriors: (0..k).map(|i| (0..n).map(|z| if z == i % n { 1.0 } else { 0.0 }).collect()).collect(),
            bounds,
            cost: 0.0,
        }
    }

    #[test]
    fn expert_aligns_to_its_own_segments() {
        let track = default_track();
        // A full lap that runs a little past the line, like a 1 Hz demo.
        let expert = lap(&track, 20.0, |s| 0.3 * (s / 50.0).sin(), track.length() + 15.0);
        let n = expert.len();
        let seg = seg_of(vec![0, 10, 25, 40, n], 2);
        let ivs = segment_intervals(&expert, &seg).unwrap();
        for (i, iv) in ivs.iter().enumerate() {
            let r = seg.segment(i);
            assert_eq!(align(&expert, iv).samples, expert.samples[r].to_vec(), "segment {i}");
        }
    }

    #[test]
    fn stopped_student_has_empty_alignment() {
        let track = default_track();
        let expert = lap(&track, 20.0, |_| 0.0, track.length());
        let seg = seg_of(vec![0, 20, expert.len()], 2);
        let ivs = segment_intervals(&expert, &seg).unwrap();
        let student = lap(&track, 5.0, |_| 0.0, 200.0);
        assert!(align(&student, &ivs[1]).is_empty());
        assert!(!align(&student, &ivs[0]).is_empty());
    }

    /// Longest window whose samples all sit in the interval, by enumeration.
    fn brute_align(traj: &Trajectory, iv: &ProgressInterval) -> std::ops::Range<usize> {
        let mut best = 0..0;
        for a in 0..traj.len() {
            for b in a + 1..=traj.len() {
                if traj.samples[a..b].iter().all(|s| iv.contains(s.progress)) && b - a > best.len() {
                    best = a..b;
                }
            }
        }
        best
    }

    fn mean_dist(part: &[Sample], reference: &Trajectory) -> f64 {
        part.iter()
            .map(|s| reference.samples.iter().map(|r| r.position().dist(s.position())).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / part.len() as f64
    }

    #[test]
    fn single_crossing_matches_windowed_search() {
        let track = default_track();
        let expert = lap(&track, 20.0, |_| 0.0, track.length());
        let seg = seg_of(vec![0, 8, 20, expert.len()], 2);
        let ivs = segment_intervals(&expert, &seg).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let step = rng.random_range(4.0..12.0);
            let amp = rng.random_range(0.0..2.0);
            let student = lap(&track, step, |s| amp * (s / 30.0).cos(), 700.0);
            for (i, iv) in ivs.iter().enumerate().take(2) {
                let got = align(&student, iv);
                let want = brute_align(&student, iv);
                assert_eq!(got.samples, student.samples[want.clone()].to_vec());
                let reference = expert.slice(seg.segment(i).start, seg.segment(i).end);
                // Shifting the window out of the interval only moves it away.
                let d = mean_dist(&got.samples, &reference);
                if want.end < student.len() {
                    let shifted = &student.samples[want.start + 1..want.end + 1];
                    assert!(mean_dist(shifted, &reference) >= d - 1.0);
                }
            }
        }
    }

    #[test]
    fn wrapped_interval() {
        let iv = ProgressInterval { start: 1190.0, end: 5.0, end_inclusive: true };
        assert!(iv.contains(1191.0) && iv.contains(0.0) && iv.contains(5.0));
        assert!(!iv.contains(6.0) && !iv.contains(1189.0));
        let iv = ProgressInterval { start: 10.0, end: 20.0, end_inclusive: false };
        assert!(iv.contains(10.0) && !iv.contains(20.0));
    }

    #[test]
    fn score_examples() {
        let track = default_track();
        let a = lap(&track, 5.0, |_| 0.0, 100.0);
        let b = lap(&track, 5.0, |_| 1.0, 100.0);
        let c = lap(&track, 5.0, |_| 2.0, 100.0);
        for f in [ScoreFeatures::Positions, ScoreFeatures::State { speed_weight: 0.5 }] {
            assert_eq!(score(&a, &a, f), Some(0.0));
            assert!(score(&c, &a, f).unwrap() < score(&b, &a, f).unwrap());
            assert_eq!(score(&Trajectory::default(), &a, f), None);
        }
        let xy = dtw_by(&b.samples, &a.samples, |p, q| p.position().dist(q.position())).unwrap();
        assert_eq!(score(&b, &a, ScoreFeatures::Positions), Some(-xy));
    }

    fn points(track: &Track, xs: &[(f64, f64)]) -> Trajectory {
        let samples = xs.iter().enumerate().map(|(i, &(s, lat))| at(track, s, lat, 10.0, i as f64)).collect();
        Trajectory::new(samples, 1.0).unwrap()
    }

    #[test]
    fn hand_built_two_segment_zpd() {
        let track = default_track();
        // Expert: two segments of two samples each on the straight.
        let expert = points(&track, &[(0.0, 0.0), (10.0, 0.0), (20.0, 0.0), (30.0, 0.0)]);
        let seg = Segmentation {
            bounds: vec![0, 2, 4],
            skills: vec![0, 1],
            posteriors: vec![vec![0.75, 0.25], vec![0.5, 0.5]],
            cost: 0.0,
        };
        let reference = ZpdReference::new(&expert, &seg).unwrap();
        // Own laps sit 2 m off the line, assisted ones 1 m in segment 0 and on it in segment 1.
        let student = points(&track, &[(1.0, 2.0), (11.0, 2.0), (21.0, 2.0), (25.0, 2.0)]);
        let assisted = points(&track, &[(1.0, 1.0), (11.0, 1.0), (21.0, 0.0), (25.0, 0.0)]);
        let cfg = ZpdConfig::default();
        let gains = reference.segment_gains(&student, &assisted, &cfg);
        let d = |a: &Trajectory, lo: usize, hi: usize, e: &Trajectory| {
            dtw_by(&a.samples[lo..hi], &e.samples, |p, q| p.position().dist(q.position())).unwrap()
        };
        let e0 = expert.slice(0, 2);
        let e1 = expert.slice(2, 4);
        let g0 = d(&student, 0, 2, &e0) - d(&assisted, 0, 2, &e0);
        let g1 = d(&student, 2, 4, &e1) - d(&assisted, 2, 4, &e1);
        assert!((gains[0].unwrap() - g0).abs() < 1e-12);
        assert!((gains[1].unwrap() - g1).abs() < 1e-12);
        let z0 = zpd(0, &reference, &student, &assisted, &cfg);
        let z1 = zpd(1, &reference, &student, &assisted, &cfg);
        assert!((z0 - (0.75 * g0 + 0.5 * g1)).abs() < 1e-12);
        assert!((z1 - (0.25 * g0 + 0.5 * g1)).abs() < 1e-12);
        // Segment 1 by hand: every student point is 2 m from the nearest expert point.
        assert!(g1 > 0.0 && g0 > 0.0);
        // The same student twice gives nothing.
        assert_eq!(zpd(0, &reference, &student, &student, &cfg), 0.0);
    }

    #[test]
    fn zero_posterior_and_missing_segments() {
        let p = vec![vec![0.0, 1.0], vec![0.0, 1.0]];
        assert_eq!(zpd_from_gains(&p, &[Some(3.0), Some(-2.0)], 0), 0.0);
        assert_eq!(zpd_from_gains(&p, &[None, Some(-2.0)], 1), -2.0);
        assert_eq!(zpd_from_gains(&p, &[None, None], 1), 0.0);
    }

    proptest! {
        #[test]
        fn zpd_is_linear_in_posteriors(
            gains in proptest::collection::vec(proptest::option::of(-10.0..10.0f64), 1..8),
            scale in 0.0..4.0f64, which in 0usize..8,
        ) {
            let p: Vec<Vec<f64>> = gains.iter().enumerate().map(|(i, _)| vec![0.1 + 0.1 * i as f64]).collect();
            let i = which % gains.len();
            let mut q = p.clone();
            q[i][0] *= scale;
            let contrib = gains[i].map_or(0.0, |g| p[i][0] * g);
            let lhs = zpd_from_gains(&q, &gains, 0);
            let rhs = zpd_from_gains(&p, &gains, 0) + (scale - 1.0) * contrib;
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        }

        #[test]
        fn choice_ignores_constant_shift(v in proptest::collection::vec(-5.0..5.0f64, 4), shift in -100.0..100.0f64) {
            let (lib, cmap) = library_for(&[Control::Channel(Channel::Steer), Control::Channel(Channel::Throttle), Control::Channel(Channel::Brake), Control::None]);
            let a = ZpdScores { per_skill: v.clone(), score_id: String::new(), trajectories_used: 0 };
            let b = ZpdScores { per_skill: v.iter().map(|x| x + shift).collect(), ..a.clone() };
            let da = choose_skill(&a, &lib, &cmap).unwrap();
            let db = choose_skill(&b, &lib, &cmap).unwrap();
            // Shifting can round two close values together, so only compare clear winners.
            let gap = da.ranking.get(1).map_or(f64::INFINITY, |r| da.ranking[0].zpd - r.zpd);
            if gap > 1e-9 * (1.0 + shift.abs()) {
                prop_assert_eq!(da.control, db.control);
            }
        }
    }

    /// A library whose skill z puts all aux mass on a cluster with control `controls[z]`.
    fn library_for(controls: &[Control]) -> (SkillLibrary, ClusterMap) {
        let cmap = default_cluster_map();
        let skills = controls
            .iter()
            .map(|c| {
                let k = (0..cmap.len()).find(|&k| cmap.control(k) == *c).unwrap();
                let mut aux = vec![0.01; cmap.len()];
                aux[k] = 1.0 - 0.01 * (cmap.len() - 1) as f64;
                Skill { weights: [[0.0; N_FEATURES]; N_CHANNELS], sigma: [0.1; N_CHANNELS], aux }
            })
            .collect();
        (SkillLibrary::new(cmap.len(), skills).unwrap(), cmap)
    }

    #[test]
    fn choose_skill_examples() {
        let (lib, cmap) = library_for(&[Control::Channel(Channel::Steer), Control::Channel(Channel::Throttle), Control::Channel(Channel::Brake), Control::None]);
        let pick = |v: [f64; 4]| {
            choose_skill(&ZpdScores { per_skill: v.to_vec(), score_id: String::new(), trajectories_used: 0 }, &lib, &cmap).unwrap()
        };
        assert_eq!(pick([0.5, 0.2, 0.1, 9.0]).control, Channel::Steer);
        assert_eq!(pick([0.1, 0.2, 0.5, 9.0]).control, Channel::Brake);
        assert_eq!(pick([0.3, 0.3, 0.1, 0.0]).control, Channel::Steer);
        assert_eq!(pick([0.0, 0.3, 0.3, 0.0]).control, Channel::Throttle);
        let d = pick([0.1, 0.2, 0.5, 9.0]);
        assert_eq!(d.ranking.len(), 3);
        assert_eq!(d.skill, 2);
        let report = ZpdReport::new(&ZpdScores { per_skill: vec![0.1, 0.2, 0.5, 9.0], score_id: "x".into(), trajectories_used: 4 }, &d);
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["decision"], "brake");
        assert_eq!(json["per_channel"]["throttle"], 0.2);
        assert_eq!(json["per_skill"]["3"], 9.0);
    }

    #[test]
    fn no_channel_skill_is_an_error() {
        let (lib, cmap) = library_for(&[Control::None, Control::None]);
        let s = ZpdScores { per_skill: vec![1.0, 2.0], score_id: String::new(), trajectories_used: 0 };
        assert!(choose_skill(&s, &lib, &cmap).is_err());
        let (lib, cmap) = library_for(&[Control::Channel(Channel::Steer)]);
        assert!(choose_skill(&s, &lib, &cmap).is_err());
    }

    #[test]
    fn constant_assisted_score() {
        let track = default_track();
        let expert = points(&track, &[(1.0, 0.0), (10.0, 0.0), (20.0, 0.0)]);
        let seg = Segmentation { bounds: vec![0, 3], skills: vec![0], posteriors: vec![vec![1.0]], cost: 0.0 };
        let reference = ZpdReference::new(&expert, &seg).unwrap();
        let student = points(&track, &[(1.0, 1.0), (10.0, 1.0), (19.0, 1.0)]);
        let cfg = ZpdConfig { assisted: AssistedScore::Constant(0.0), ..ZpdConfig::default() };
        let own = score(&student, &expert, ScoreFeatures::Positions).unwrap();
        assert_eq!(zpd(0, &reference, &student, &Trajectory::default(), &cfg), -own);
    }
}
