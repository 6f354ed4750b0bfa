//! Trial metrics, DTW, steering spectra and the baseline/evaluation
//! comparison table.

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::track::Track;
use crate::trajectory::Trajectory;
use nalgebra::Complex;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;

/// Classic full-matrix DTW with an arbitrary ground metric.
pub fn dtw_by<T>(a: &[T], b: &[T], dist: impl Fn(&T, &T) -> f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("dtw needs two non-empty sequences"));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![0.0; m];
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            let d = dist(ai, bj);
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cur[j - 1],
                (_, 0) => prev[0],
                _ => prev[j].min(prev[j - 1]).min(cur[j - 1]),
            };
            cur[j] = d + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// DTW over planar points with the Euclidean ground metric.
pub fn dtw(a: &[Vec2], b: &[Vec2]) -> Result<f64> {
    dtw_by(a, b, |p, q| p.dist(*q))
}

/// Jerk computation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JerkMode {
    /// Second difference of scalar speed.
    #[default]
    Speed,
    /// Second difference of the planar velocity vector.
    Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub success: bool,
    pub lap_progress: f64,
    pub lap_time: Option<f64>,
    pub expert_distance: f64,
    pub jerk: f64,
    pub lane_invasions: u32,
}

/// Running progress along the trajectory, one entry per sample.
pub fn cumulative_progress(traj: &Trajectory, track: &Track) -> Vec<f64> {
    let mut out = Vec::with_capacity(traj.len());
    let mut acc = 0.0;
    for (i, s) in traj.samples.iter().enumerate() {
        if i > 0 {
            acc += track.progress_delta(traj.samples[i - 1].progress, s.progress);
        }
        out.push(acc);
    }
    out
}

/// Time at which cumulative progress first reaches one lap, interpolated
/// between samples.
pub fn lap_completion_time(traj: &Trajectory, track: &Track) -> Option<f64> {
    let cum = cumulative_progress(traj, track);
    let l = track.length();
    let t0 = traj.samples.first()?.state.time;
    for k in 1..cum.len() {
        if cum[k] >= l {
            let (c0, c1) = (cum[k - 1], cum[k]);
            let (ta, tb) = (traj.samples[k - 1].state.time, traj.samples[k].state.time);
            let u = if c1 > c0 { (l - c0) / (c1 - c0) } else { 1.0 };
            return Some(ta + u * (tb - ta) - t0);
        }
    }
    None
}

/// Transitions from on-track to off-track; starting off-track counts once.
pub fn lane_invasions(traj: &Trajectory) -> u32 {
    let mut prev = false;
    let mut n = 0;
    for s in &traj.samples {
        if s.off_track && !prev {
            n += 1;
        }
        prev = s.off_track;
    }
    n
}

/// Mean magnitude of the rate of change of acceleration.
pub fn jerk(traj: &Trajectory, mode: JerkMode) -> f64 {
    let s = &traj.samples;
    if s.len() < 3 {
        return 0.0;
    }
    let vel = |i: usize| match mode {
        JerkMode::Speed => Vec2::new(s[i].state.speed, 0.0),
        JerkMode::Vector => Vec2::from_angle(s[i].state.heading) * s[i].state.speed,
    };
    let acc: Vec<(f64, Vec2)> = (1..s.len())
        .map(|i| {
            let dt = s[i].state.time - s[i - 1].state.time;
            (0.5 * (s[i].state.time + s[i - 1].state.time), (vel(i) - vel(i - 1)) * (1.0 / dt))
        })
        .collect();
    let total: f64 = acc
        .windows(2)
        .map(|w| (w[1].1 - w[0].1).norm() / (w[1].0 - w[0].0))
        .sum();
    total / (acc.len() - 1) as f64
}

/// Metrics of one trial. Expects 1 Hz trajectories starting at the start line.
pub fn trial_metrics(
    traj: &Trajectory,
    track: &Track,
    expert: &Trajectory,
    time_limit: f64,
    jerk_mode: JerkMode,
) -> Result<TrialMetrics> {
    if traj.is_empty() {
        return Err(Error::invalid("trial trajectory is empty"));
    }
    let cum = cumulative_progress(traj, track);
    let best = cum.iter().cloned().fold(0.0, f64::max);
    let lap_time = lap_completion_time(traj, track).filter(|t| *t <= time_limit);
    Ok(TrialMetrics {
        success: lap_time.is_some(),
        lap_progress: (best / track.length()).clamp(0.0, 1.0),
        lap_time,
        expert_distance: dtw(&traj.positions(), &expert.positions())?,
        jerk: jerk(traj, jerk_mode),
        lane_invasions: lane_invasions(traj),
    })
}

/// Mean pairwise DTW between trajectories of one stage; lower is more consistent.
pub fn consistency(trajs: &[Trajectory]) -> Result<Option<f64>> {
    if trajs.len() < 2 {
        return Ok(None);
    }
    let pos: Vec<Vec<Vec2>> = trajs.iter().map(|t| t.positions()).collect();
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..pos.len() {
        for j in i + 1..pos.len() {
            sum += dtw(&pos[i], &pos[j])?;
            n += 1;
        }
    }
    Ok(Some(sum / n as f64))
}

/// In-place iterative radix-2 FFT. Length must be a power of two.
pub fn fft_in_place(buf: &mut [Complex<f64>]) {
    let n = buf.len();
    assert!(n.is_power_of_two(), "fft length must be a power of two");
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) };
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * std::f64::consts::PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let w = Complex::from_polar(1.0, ang * k as f64);
                let a = buf[start + k];
                let b = buf[start + k + len / 2] * w;
                buf[start + k] = a + b;
                buf[start + k + len / 2] = a - b;
            }
        }
        len <<= 1;
    }
}

/// Full complex spectrum of a real signal zero-padded to the next power of two.
pub fn fft_real(signal: &[f64]) -> Vec<Complex<f64>> {
    let n = signal.len().next_power_of_two();
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
    buf.resize(n, Complex::new(0.0, 0.0));
    fft_in_place(&mut buf);
    buf
}

pub const MIN_SPECTRUM_LEN: usize = 8;

/// Single-sided amplitude spectrum of a 1 Hz steering signal.
pub fn steering_fft(signal: &[f64]) -> Result<Vec<f64>> {
    if signal.len() < MIN_SPECTRUM_LEN {
        return Err(Error::invalid(format!(
            "steering spectrum needs at least {MIN_SPECTRUM_LEN} samples, got {}",
            signal.len()
        )));
    }
    if signal.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("steering signal has non-finite values"));
    }
    let spec = fft_real(signal);
    let n = spec.len();
    Ok((0..=n / 2)
        .map(|k| {
            let a = spec[k].norm() / n as f64;
            if k == 0 || k == n / 2 {
                a
            } else {
                2.0 * a
            }
        })
        .collect())
}

/// RMSE over the bins both spectra share.
pub fn spectrum_rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len().min(b.len());
    if n == 0 {
        return Err(Error::invalid("spectra share no bins"));
    }
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((ss / n as f64).sqrt())
}

/// Result of Welch's unequal-variance t-test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    /// Both samples have zero variance; `p` is then 1 for equal means and 0 otherwise.
    pub degenerate: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("welch test needs at least two values per group"));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        let same = ma == mb;
        return Ok(WelchTest {
            t: if same { 0.0 } else { f64::INFINITY.copysign(ma - mb) },
            df: na + nb - 2.0,
            p: if same { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::runtime(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(WelchTest {
        t,
        df,
        p: p.clamp(0.0, 1.0),
        degenerate: false,
    })
}

/// Mean and two-sided 95% t confidence interval.
pub fn mean_ci95(x: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() < 2 {
        return Err(Error::invalid("confidence interval needs at least two values"));
    }
    let (m, v) = mean_var(x);
    let n = x.len() as f64;
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::runtime(e.to_string()))?;
    let h = dist.inverse_cdf(0.975) * (v / n).sqrt();
    Ok((m, m - h, m + h))
}

/// Row names of the comparison table, in order.
pub const DELTA_METRICS: [&str; 7] = [
    "success_rate",
    "lap_progress",
    "lap_time",
    "consistency",
    "expert_distance",
    "jerk",
    "lane_invasions",
];

/// One student's trials in one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub trials: Vec<TrialMetrics>,
    pub consistency: Option<f64>,
}

impl StageMetrics {
    /// Stage-level value of a named metric; lap time averages successful trials only.
    pub fn value(&self, metric: &str) -> Option<f64> {
        let n = self.trials.len();
        if n == 0 {
            return None;
        }
        let mean = |f: &dyn Fn(&TrialMetrics) -> f64| Some(self.trials.iter().map(f).sum::<f64>() / n as f64);
        match metric {
            "success_rate" => mean(&|t| if t.success { 1.0 } else { 0.0 }),
            "lap_progress" => mean(&|t| t.lap_progress),
            "lap_time" => {
                let times: Vec<f64> = self.trials.iter().filter_map(|t| t.lap_time).collect();
                if times.is_empty() {
                    None
                } else {
                    Some(times.iter().sum::<f64>() / times.len() as f64)
                }
            }
            "consistency" => self.consistency,
            "expert_distance" => mean(&|t| t.expert_distance),
            "jerk" => mean(&|t| t.jerk),
            "lane_invasions" => mean(&|t| t.lane_invasions as f64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmDelta {
    pub n: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub metric: String,
    pub arms: BTreeMap<String, Option<ArmDelta>>,
    /// Welch test between the first two arms, when both have two or more students.
    pub welch: Option<WelchTest>,
    pub significant: bool,
    pub significant_bonferroni: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub arms: Vec<String>,
    pub alpha: f64,
    pub bonferroni_alpha: f64,
    pub rows: Vec<DeltaRow>,
}

/// Per-student baseline and evaluation stages tagged with an arm.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentStages<'a> {
    pub arm: &'a str,
    pub baseline: &'a StageMetrics,
    pub evaluation: &'a StageMetrics,
}

/// Evaluation minus baseline per student, summarized per arm, with Welch's
/// test between the first two arms in `arms`.
pub fn delta_table(students: &[StudentStages<'_>], arms: &[String]) -> Result<DeltaTable> {
    if arms.is_empty() {
        return Err(Error::invalid("delta table needs at least one arm"));
    }
    for arm in arms {
        let n = students.iter().filter(|s| s.arm == arm.as_str()).count();
        if n < 2 {
            return Err(Error::invalid(format!("arm {arm} has {n} students; need at least 2")));
        }
    }
    let alpha = 0.05;
    let bonferroni_alpha = alpha / DELTA_METRICS.len() as f64;
    let mut rows = Vec::new();
    for metric in DELTA_METRICS {
        let deltas: Vec<Vec<f64>> = arms
            .iter()
            .map(|arm| {
                students
                    .iter()
                    .filter(|s| s.arm == arm.as_str())
                    .filter_map(|s| Some(s.evaluation.value(metric)? - s.baseline.value(metric)?))
                    .collect()
            })
            .collect();
        let mut per_arm = BTreeMap::new();
        for (arm, d) in arms.iter().zip(&deltas) {
            let summary = if d.len() >= 2 {
                let (mean, ci_low, ci_high) = mean_ci95(d)?;
                Some(ArmDelta {
                    n: d.len(),
                    mean,
                    ci_low,
                    ci_high,
                })
            } else {
                None
            };
            per_arm.insert(arm.clone(), summary);
        }
        let welch = if deltas.len() >= 2 && deltas[0].len() >= 2 && deltas[1].len() >= 2 {
            Some(welch_t_test(&deltas[0], &deltas[1])?)
        } else {
            None
        };
        let p = welch.map_or(1.0, |w| w.p);
        rows.push(DeltaRow {
            metric: metric.to_string(),
            arms: per_arm,
            welch,
            significant: p < alpha,
            significant_bonferroni: p < bonferroni_alpha,
        });
    }
    Ok(DeltaTable {
        arms: arms.to_vec(),
        alpha,
        bonferroni_alpha,
        rows,
    })
}

impl DeltaTable {
    pub fn row(&self, metric: &str) -> Option<&DeltaRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    /// One row per metric: arm means and CIs, then the test columns.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["metric".to_string()];
        for arm in &self.arms {
            for col in ["n", "mean_delta", "ci_low", "ci_high"] {
                header.push(format!("{arm}_{col}"));
            }
        }
        header.extend(["welch_t", "welch_df", "p_value", "significant", "significant_bonferroni"].map(String::from));
        w.write_record(&header)?;
        let fmt = |v: f64| format!("{v}");
        for row in &self.rows {
            let mut rec = vec![row.metric.clone()];
            for arm in &self.arms {
                match row.arms.get(arm).and_then(|a| a.as_ref()) {
                    Some(a) => rec.extend([a.n.to_string(), fmt(a.mean), fmt(a.ci_low), fmt(a.ci_high)]),
                    None => rec.extend(["0", "", "", ""].map(String::from)),
                }
            }
            match row.welch {
                Some(t) => rec.extend([fmt(t.t), fmt(t.df), fmt(t.p)]),
                None => rec.extend(["", "", ""].map(String::from)),
            }
            rec.push(row.significant.to_string());
            rec.push(row.significant_bonferroni.to_string());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::runtime(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::runtime(e.to_string()))
    }
}
