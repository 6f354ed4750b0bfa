//! Weakly supervised skill discovery: exact DP segmentation of trajectories
//! into skill segments, EM fitting of a discrete skill library with an
//! auxiliary feedback-label term, and skill to control mapping.

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Vec2};
use crate::track::Track;
use crate::trajectory::{Sample, Trajectory};
use crate::vehicle::Channel;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use tracing::warn;

pub const FEATURE_NAMES: [&str; N_FEATURES] = ["speed", "curvature", "lateral", "heading_error", "bias"];
pub const N_FEATURES: usize = 5;
pub const N_CHANNELS: usize = 3;

/// Annotations farther than this from the nearest sample label nothing.
pub const LABEL_RADIUS: f64 = 10.0;
/// Annotations farther than this from every sample are reported and dropped.
pub const DROP_RADIUS: f64 = 50.0;

pub type Features = [f64; N_FEATURES];

/// Predictor inputs for one sample.
pub fn features(track: &Track, s: &Sample) -> Features {
    let heading_error = wrap_angle(s.state.heading - track.heading_at(s.progress));
    [s.state.speed, track.curvature_at(s.progress), s.lateral, heading_error, 1.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackAnnotation {
    pub x: f64,
    pub y: f64,
    pub cluster_id: usize,
}

impl FeedbackAnnotation {
    pub fn anchor(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// Control association of a feedback cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Control {
    Channel(Channel),
    None,
}

impl Control {
    pub fn channel(self) -> Option<Channel> {
        match self {
            Control::Channel(c) => Some(c),
            Control::None => None,
        }
    }
}

impl fmt::Display for Control {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Control::Channel(c) => write!(f, "{c}"),
            Control::None => f.write_str("none"),
        }
    }
}

impl FromStr for Control {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            Ok(Control::None)
        } else {
            Ok(Control::Channel(s.parse()?))
        }
    }
}

impl Serialize for Control {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Control {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterInfo {
    pub description: String,
    pub control: Control,
}

/// Feedback clusters by id. Serialized as an object keyed by the decimal id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMap {
    clusters: Vec<ClusterInfo>,
}

impl ClusterMap {
    pub fn new(clusters: Vec<ClusterInfo>) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::invalid("cluster map is empty"));
        }
        Ok(Self { clusters })
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&ClusterInfo> {
        self.clusters.get(id)
    }

    pub fn control(&self, id: usize) -> Control {
        self.clusters.get(id).map_or(Control::None, |c| c.control)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}

impl Serialize for ClusterMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<String, &ClusterInfo> =
            self.clusters.iter().enumerate().map(|(i, c)| (i.to_string(), c)).collect();
        // Keys sort as strings; fine below ten clusters and harmless above.
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ClusterMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = BTreeMap::<String, ClusterInfo>::deserialize(d)?;
        let mut by_id = BTreeMap::new();
        for (k, v) in raw {
            let id: usize = k
                .parse()
                .map_err(|_| D::Error::custom(format!("cluster id {k:?} is not an integer")))?;
            by_id.insert(id, v);
        }
        let n = by_id.len();
        if by_id.keys().cloned().ne(0..n) {
            return Err(D::Error::custom("cluster ids must be exactly 0..N"));
        }
        ClusterMap::new(by_id.into_values().collect()).map_err(D::Error::custom)
    }
}

/// Default eight-cluster map. Id 0 carries no control so an uninformative
/// skill maps to nothing.
pub fn default_cluster_map() -> ClusterMap {
    serde_json::from_str(include_str!("../data/cluster_map.json")).expect("bundled cluster map is valid")
}

pub fn load_annotations(path: &std::path::Path) -> Result<Vec<FeedbackAnnotation>> {
    crate::io::read_json(path)
}

pub fn validate_annotations(anns: &[FeedbackAnnotation], n_clusters: usize) -> Result<()> {
    for (i, a) in anns.iter().enumerate() {
        if a.cluster_id >= n_clusters {
            return Err(Error::invalid(format!(
                "annotation {i}: cluster id {} outside 0..{n_clusters}",
                a.cluster_id
            )));
        }
        if !a.anchor().is_finite() {
            return Err(Error::invalid(format!("annotation {i}: anchor is not finite")));
        }
    }
    Ok(())
}

/// Result of labeling a trajectory with annotations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Labels {
    pub labels: Vec<Option<usize>>,
    pub warnings: Vec<String>,
}

/// Labels the trajectory sample nearest to each annotation. Later
/// annotations overwrite earlier ones on the same sample.
pub fn attach_annotations(traj: &Trajectory, annotations: &[FeedbackAnnotation]) -> Labels {
    let mut out = Labels {
        labels: vec![None; traj.len()],
        warnings: Vec::new(),
    };
    if traj.is_empty() {
        return out;
    }
    for (i, a) in annotations.iter().enumerate() {
        let p = a.anchor();
        let (k, d2) = traj
            .samples
            .iter()
            .enumerate()
            .map(|(k, s)| (k, s.state.position.dist_sq(p)))
            .fold((0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best });
        let d = d2.sqrt();
        if d > DROP_RADIUS {
            let msg = format!("annotation {i} is {d:.1} m from the trajectory; dropped");
            warn!("{msg}");
            out.warnings.push(msg);
            continue;
        }
        if d > LABEL_RADIUS {
            continue;
        }
        if let Some(prev) = out.labels[k] {
            let msg = format!("annotation {i} replaces cluster {prev} on sample {k}");
            warn!("{msg}");
            out.warnings.push(msg);
        }
        out.labels[k] = Some(a.cluster_id);
    }
    out
}

/// Trajectory reduced to what the skill model sees.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDemo {
    pub features: Vec<Features>,
    pub actions: Vec<[f64; N_CHANNELS]>,
    pub labels: Vec<Option<usize>>,
}

impl LabeledDemo {
    pub fn from_trajectory(track: &Track, traj: &Trajectory, labels: Vec<Option<usize>>) -> Result<Self> {
        if labels.len() != traj.len() {
            return Err(Error::invalid("label count differs from sample count"));
        }
        Ok(Self {
            features: traj.samples.iter().map(|s| features(track, s)).collect(),
            actions: traj.samples.iter().map(|s| s.action.to_array()).collect(),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Affine-Gaussian action decoder plus categorical over feedback clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skill {
    /// One weight row per channel (steer, throttle, brake) over the features.
    pub weights: [[f64; N_FEATURES]; N_CHANNELS],
    pub sigma: [f64; N_CHANNELS],
    pub aux: Vec<f64>,
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

impl Skill {
    pub fn predict(&self, x: &Features) -> [f64; N_CHANNELS] {
        let mut out = [0.0; N_CHANNELS];
        for (c, w) in self.weights.iter().enumerate() {
            out[c] = w.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// Negative log-likelihood of the actions, summed over channels.
    pub fn action_nll(&self, x: &Features, a: &[f64; N_CHANNELS]) -> f64 {
        let mu = self.predict(x);
        let mut nll = 0.0;
        for c in 0..N_CHANNELS {
            let r = (a[c] - mu[c]) / self.sigma[c];
            nll += 0.5 * r * r + self.sigma[c].ln() + HALF_LN_2PI;
        }
        nll
    }

    pub fn aux_nll(&self, cluster: usize) -> f64 {
        -self.aux[cluster].ln()
    }

    /// Index of the most probable cluster; ties go to the lowest id.
    pub fn top_cluster(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.aux.iter().enumerate() {
            if p > self.aux[best] {
                best = k;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillLibrary {
    pub n_clusters: usize,
    pub feature_names: Vec<String>,
    pub skills: Vec<Skill>,
}

impl SkillLibrary {
    pub fn new(n_clusters: usize, skills: Vec<Skill>) -> Result<Self> {
        let lib = Self {
            n_clusters,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            skills,
        };
        lib.validate()?;
        Ok(lib)
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.skills.is_empty() {
            return Err(Error::invalid("skill library is empty"));
        }
        if self.n_clusters == 0 {
            return Err(Error::invalid("skill library needs at least one cluster"));
        }
        if self.feature_names.len() != N_FEATURES {
            return Err(Error::invalid(format!("skill library must list {N_FEATURES} features")));
        }
        for (z, s) in self.skills.iter().enumerate() {
            if s.sigma.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::invalid(format!("skill {z}: noise scales must be positive")));
            }
            if s.weights.iter().flatten().any(|w| !w.is_finite()) {
                return Err(Error::invalid(format!("skill {z}: weights must be finite")));
            }
            if s.aux.len() != self.n_clusters {
                return Err(Error::invalid(format!(
                    "skill {z}: auxiliary distribution has {} entries, expected {}",
                    s.aux.len(),
                    self.n_clusters
                )));
            }
            let total: f64 = s.aux.iter().sum();
            if s.aux.iter().any(|&p| !(p > 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "skill {z}: auxiliary distribution must be positive and sum to 1"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let lib: Self = crate::io::read_json(path)?;
        lib.validate()?;
        Ok(lib)
    }
}

/// Argmax cluster of the skill's auxiliary distribution, then that cluster's control.
pub fn skill_to_control(lib: &SkillLibrary, cmap: &ClusterMap, z: usize) -> Result<Control> {
    let skill = lib
        .skills
        .get(z)
        .ok_or_else(|| Error::invalid(format!("skill {z} outside library of {}", lib.len())))?;
    Ok(cmap.control(skill.top_cluster()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "m")]
pub enum SegmentCount {
    AtMost(usize),
    Exactly(usize),
}

impl SegmentCount {
    pub fn max(self) -> usize {
        match self {
            SegmentCount::AtMost(m) | SegmentCount::Exactly(m) => m,
        }
    }
}

/// Which boundaries pay the switch penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    /// Every boundary.
    Boundary,
    /// Only boundaries where the skill changes.
    #[default]
    Switch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentParams {
    pub segments: SegmentCount,
    /// Cost per penalized boundary.
    pub lambda: f64,
    pub penalty: Penalty,
    /// Weight of the auxiliary label term.
    pub w_aux: f64,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            segments: SegmentCount::AtMost(8),
            lambda: 1.0,
            penalty: Penalty::Switch,
            w_aux: 2.0,
        }
    }
}

impl SegmentParams {
    fn penalty(&self, k: usize, prev: usize, z: usize) -> f64 {
        let pays = match self.penalty {
            Penalty::Boundary => k > 0,
            Penalty::Switch => k > 0 && prev != z,
        };
        if pays {
            self.lambda
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    /// `bounds[i]..bounds[i + 1]` is segment i; first is 0, last is the sample count.
    pub bounds: Vec<usize>,
    /// Chosen skill per segment (the argmax of its posterior row).
    pub skills: Vec<usize>,
    /// Per-segment posterior over skills, one row per segment.
    pub posteriors: Vec<Vec<f64>>,
    pub cost: f64,
}

impl Segmentation {
    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    pub fn segment(&self, i: usize) -> std::ops::Range<usize> {
        self.bounds[i]..self.bounds[i + 1]
    }

    /// Per-sample skill labels.
    pub fn sample_skills(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for i in 0..self.len() {
            out.extend(self.segment(i).map(|_| self.skills[i]));
        }
        out
    }

    /// `segment,start_index,end_index,argmax_skill,p_0..p_{N-1}`, end index inclusive.
    pub fn to_csv_string(&self) -> Result<String> {
        let n = self.posteriors.first().map_or(0, |r| r.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = ["segment", "start_index", "end_index", "argmax_skill"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..n).map(|z| format!("p_{z}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![
                i.to_string(),
                self.bounds[i].to_string(),
                (self.bounds[i + 1] - 1).to_string(),
                self.skills[i].to_string(),
            ];
            rec.extend(self.posteriors[i].iter().map(|p| p.to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::runtime(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::runtime(e.to_string()))
    }
}

/// Cost of one sample under one skill.
fn sample_cost(lib: &SkillLibrary, z: usize, demo: &LabeledDemo, t: usize, w_aux: f64) -> f64 {
    let skill = &lib.skills[z];
    let mut c = skill.action_nll(&demo.features[t], &demo.actions[t]);
    if let Some(k) = demo.labels[t] {
        c += w_aux * skill.aux_nll(k);
    }
    c
}

/// Cost of samples `i..j` under each skill, accumulated left to right.
struct SegmentCosts {
    t: usize,
    costs: Vec<Vec<f64>>,
}

impl SegmentCosts {
    fn new(demo: &LabeledDemo, lib: &SkillLibrary, w_aux: f64) -> Self {
        let t = demo.len();
        let costs = (0..lib.len())
            .map(|z| {
                let per: Vec<f64> = (0..t).map(|k| sample_cost(lib, z, demo, k, w_aux)).collect();
                let mut table = vec![0.0; t * (t + 1)];
                for i in 0..t {
                    let mut acc = 0.0;
                    for (j, c) in per.iter().enumerate().skip(i) {
                        acc += c;
                        table[i * (t + 1) + j + 1] = acc;
                    }
                }
                table
            })
            .collect();
        Self { t, costs }
    }

    fn get(&self, z: usize, i: usize, j: usize) -> f64 {
        self.costs[z][i * (self.t + 1) + j]
    }

    fn posterior(&self, i: usize, j: usize) -> Vec<f64> {
        let neg: Vec<f64> = (0..self.costs.len()).map(|z| -self.get(z, i, j)).collect();
        softmax(&neg)
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn check_segment_inputs(demo: &LabeledDemo, lib: &SkillLibrary, params: &SegmentParams) -> Result<()> {
    lib.validate()?;
    let m = params.segments.max();
    if m == 0 {
        return Err(Error::invalid("segment count must be at least 1"));
    }
    if demo.len() < m {
        return Err(Error::invalid(format!(
            "trajectory has {} samples, fewer than the {m} segments requested",
            demo.len()
        )));
    }
    if demo.labels.len() != demo.len() || demo.actions.len() != demo.len() {
        return Err(Error::invalid("demo features, actions and labels differ in length"));
    }
    if let Some(k) = demo.labels.iter().flatten().find(|&&k| k >= lib.n_clusters) {
        return Err(Error::invalid(format!("label {k} outside 0..{}", lib.n_clusters)));
    }
    if !(params.lambda >= 0.0 && params.w_aux >= 0.0) {
        return Err(Error::invalid("lambda and w_aux must be non-negative"));
    }
    Ok(())
}

/// Total cost of a given segmentation, accumulated in the same order as
/// [`segment_dp`]: segments left to right, each boundary adding `lambda`.
pub fn segmentation_cost(
    demo: &LabeledDemo,
    lib: &SkillLibrary,
    params: &SegmentParams,
    bounds: &[usize],
    skills: &[usize],
) -> f64 {
    let mut total = 0.0;
    for (k, (w, &z)) in bounds.windows(2).zip(skills).enumerate() {
        let mut seg = 0.0;
        for t in w[0]..w[1] {
            seg += sample_cost(lib, z, demo, t, params.w_aux);
        }
        let prev = if k == 0 { z } else { skills[k - 1] };
        total = total + seg + params.penalty(k, prev, z);
    }
    total
}

/// Exact minimum-cost segmentation over boundaries and per-segment skills.
pub fn segment_dp(demo: &LabeledDemo, lib: &SkillLibrary, params: &SegmentParams) -> Result<Segmentation> {
    check_segment_inputs(demo, lib, params)?;
    let t = demo.len();
    let m = params.segments.max();
    let n = lib.len();
    let costs = SegmentCosts::new(demo, lib, params.w_aux);
    // dp[k][j][z]: best cost of covering 0..j with k segments, the last using skill z.
    let inf = f64::INFINITY;
    let at = |k: usize, j: usize, z: usize| (k * (t + 1) + j) * n + z;
    let mut dp = vec![inf; (m + 1) * (t + 1) * n];
    let mut back = vec![(0usize, 0usize); (m + 1) * (t + 1) * n];
    for j in 1..=t {
        for z in 0..n {
            dp[at(1, j, z)] = 0.0 + costs.get(z, 0, j) + 0.0;
        }
    }
    for k in 2..=m {
        for j in k..=t {
            for z in 0..n {
                let mut best = (inf, (0, 0));
                for i in (k - 1)..j {
                    let c = costs.get(z, i, j);
                    for zp in 0..n {
                        let prev = dp[at(k - 1, i, zp)];
                        if prev == inf {
                            continue;
                        }
                        let v = prev + c + params.penalty(k - 1, zp, z);
                        if v < best.0 {
                            best = (v, (i, zp));
                        }
                    }
                }
                dp[at(k, j, z)] = best.0;
                back[at(k, j, z)] = best.1;
            }
        }
    }
    let ks: Vec<usize> = match params.segments {
        SegmentCount::Exactly(_) => vec![m],
        SegmentCount::AtMost(_) => (1..=m).collect(),
    };
    let mut end = (inf, 0, 0);
    for &k in &ks {
        for z in 0..n {
            if dp[at(k, t, z)] < end.0 {
                end = (dp[at(k, t, z)], k, z);
            }
        }
    }
    let (cost, k_best, mut z) = end;
    let mut bounds = vec![t];
    let mut skills = Vec::new();
    let mut j = t;
    for k in (1..=k_best).rev() {
        skills.push(z);
        let (i, zp) = if k == 1 { (0, z) } else { back[at(k, j, z)] };
        bounds.push(i);
        j = i;
        z = zp;
    }
    bounds.reverse();
    skills.reverse();
    let posteriors = bounds.windows(2).map(|w| costs.posterior(w[0], w[1])).collect();
    Ok(Segmentation {
        bounds,
        skills,
        posteriors,
        cost,
    })
}

/// M divided by the number of maximal runs of equal consecutive skills.
pub fn compression_ratio(seg: &Segmentation) -> f64 {
    if seg.is_empty() {
        return 0.0;
    }
    let runs = 1 + seg.skills.windows(2).filter(|w| w[0] != w[1]).count();
    seg.len() as f64 / runs as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub n_skills: usize,
    pub n_clusters: usize,
    pub segment: SegmentParams,
    pub max_iterations: usize,
    pub seed: u64,
    /// Lower bound on every per-channel noise scale.
    pub sigma_floor: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_skills: 8,
            n_clusters: 8,
            segment: SegmentParams::default(),
            max_iterations: 50,
            seed: 0,
            sigma_floor: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub library: SkillLibrary,
    /// Objective after each E-step.
    pub objective: Vec<f64>,
    pub segmentations: Vec<Segmentation>,
    pub converged: bool,
    /// Skills reinitialized because no samples were assigned to them.
    pub restarts: usize,
}

/// Least-squares skill fit to the given samples; minimum-norm when rank deficient.
fn fit_skill(samples: &[(&Features, &[f64; N_CHANNELS])], labels: &[usize], n_clusters: usize, floor: f64) -> Skill {
    let n = samples.len();
    let mut weights = [[0.0; N_FEATURES]; N_CHANNELS];
    let mut sigma = [floor; N_CHANNELS];
    if n > 0 {
        let x = DMatrix::from_fn(n, N_FEATURES, |r, c| samples[r].0[c]);
        let svd = x.clone().svd(true, true);
        let eps = 1e-10 * svd.singular_values.max().max(f64::MIN_POSITIVE);
        for ch in 0..N_CHANNELS {
            let y = DVector::from_fn(n, |r, _| samples[r].1[ch]);
            let w = svd.solve(&y, eps).expect("svd computed with u and v");
            let resid = &x * &w - &y;
            let var = resid.norm_squared() / n as f64;
            for (f, v) in w.iter().enumerate() {
                weights[ch][f] = *v;
            }
            sigma[ch] = var.sqrt().max(floor);
        }
    }
    let mut counts = vec![1.0; n_clusters];
    for &k in labels {
        counts[k] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    Skill {
        weights,
        sigma,
        aux: counts.iter().map(|c| c / total).collect(),
    }
}

/// Add-one prior on the auxiliary categoricals, weighted like the label term.
fn prior_term(lib: &SkillLibrary, w_aux: f64) -> f64 {
    if w_aux == 0.0 {
        return 0.0;
    }
    w_aux * lib.skills.iter().flat_map(|s| s.aux.iter()).map(|p| -p.ln()).sum::<f64>()
}

fn m_step(
    demos: &[LabeledDemo],
    segs: &[Segmentation],
    cfg: &FitConfig,
    previous: Option<&SkillLibrary>,
    restarts: &mut usize,
) -> Result<SkillLibrary> {
    let mut per_skill: Vec<Vec<(&Features, &[f64; N_CHANNELS])>> = vec![Vec::new(); cfg.n_skills];
    let mut per_labels: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_skills];
    for (demo, seg) in demos.iter().zip(segs) {
        for (t, z) in seg.sample_skills().into_iter().enumerate() {
            per_skill[z].push((&demo.features[t], &demo.actions[t]));
            if let Some(k) = demo.labels[t] {
                per_labels[z].push(k);
            }
        }
    }
    let mut skills: Vec<Skill> = (0..cfg.n_skills)
        .map(|z| fit_skill(&per_skill[z], &per_labels[z], cfg.n_clusters, cfg.sigma_floor))
        .collect();
    let empty: Vec<usize> = (0..cfg.n_skills).filter(|&z| per_skill[z].is_empty()).collect();
    if !empty.is_empty() {
        // Refit each empty skill to one of the worst-fitting segments, worst first.
        let mut worst: Vec<(f64, usize, usize)> = Vec::new();
        if let Some(prev) = previous {
            for (d, (demo, seg)) in demos.iter().zip(segs).enumerate() {
                for i in 0..seg.len() {
                    let r = seg.segment(i);
                    let z = seg.skills[i];
                    let c: f64 = r
                        .clone()
                        .map(|t| prev.skills[z].action_nll(&demo.features[t], &demo.actions[t]))
                        .sum::<f64>()
                        / r.len() as f64;
                    worst.push((c, d, i));
                }
            }
        }
        worst.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for (n, &z) in empty.iter().enumerate() {
            *restarts += 1;
            if let Some(&(_, d, i)) = worst.get(n % worst.len().max(1)) {
                let r = segs[d].segment(i);
                let samples: Vec<_> = r.map(|t| (&demos[d].features[t], &demos[d].actions[t])).collect();
                skills[z] = fit_skill(&samples, &[], cfg.n_clusters, cfg.sigma_floor);
            }
        }
    }
    SkillLibrary::new(cfg.n_clusters, skills)
}

/// Seeded start: each demo cut into equal segments, skills dealt from a
/// shuffled deck.
fn initial_segmentations(demos: &[LabeledDemo], cfg: &FitConfig) -> Vec<Segmentation> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.segment.segments.max();
    demos
        .iter()
        .map(|d| {
            let t = d.len();
            let bounds: Vec<usize> = (0..=m).map(|i| i * t / m).collect();
            let mut deck: Vec<usize> = (0..m).map(|i| i % cfg.n_skills).collect();
            deck.shuffle(&mut rng);
            Segmentation {
                bounds,
                skills: deck,
                posteriors: Vec::new(),
                cost: f64::NAN,
            }
        })
        .collect()
}

/// EM over the skill library with exact DP segmentation as the E-step.
pub fn fit_library(demos: &[LabeledDemo], cfg: &FitConfig) -> Result<FitReport> {
    if cfg.n_skills == 0 {
        return Err(Error::invalid("need at least one skill"));
    }
    if demos.is_empty() {
        return Err(Error::invalid("need at least one demo"));
    }
    if !(cfg.sigma_floor > 0.0) {
        return Err(Error::invalid("sigma floor must be positive"));
    }
    let m = cfg.segment.segments.max();
    for (i, d) in demos.iter().enumerate() {
        if d.len() < m.max(1) {
            return Err(Error::invalid(format!("demo {i} has {} samples, fewer than {m} segments", d.len())));
        }
        if let Some(k) = d.labels.iter().flatten().find(|&&k| k >= cfg.n_clusters) {
            return Err(Error::invalid(format!("demo {i}: label {k} outside 0..{}", cfg.n_clusters)));
        }
    }
    let mut restarts = 0;
    let mut segs = initial_segmentations(demos, cfg);
    let mut lib = m_step(demos, &segs, cfg, None, &mut restarts)?;
    let mut objective = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iterations.max(1) {
        use rayon::prelude::*;
        let next: Vec<Segmentation> = demos
            .par_iter()
            .map(|d| segment_dp(d, &lib, &cfg.segment))
            .collect::<Result<_>>()?;
        let total = next.iter().map(|s| s.cost).sum::<f64>() + prior_term(&lib, cfg.segment.w_aux);
        objective.push(total);
        let same = next
            .iter()
            .zip(&segs)
            .all(|(a, b)| a.bounds == b.bounds && a.skills == b.skills);
        segs = next;
        if same {
            converged = true;
            break;
        }
        lib = m_step(demos, &segs, cfg, Some(&lib), &mut restarts)?;
    }
    Ok(FitReport {
        library: lib,
        objective,
        segmentations: segs,
        converged,
        restarts,
    })
}

/// Mean squared action error of each sample under its segment's skill.
pub fn reconstruction_mse(demos: &[LabeledDemo], lib: &SkillLibrary, segs: &[Segmentation]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (demo, seg) in demos.iter().zip(segs) {
        for (t, z) in seg.sample_skills().into_iter().enumerate() {
            let mu = lib.skills[z].predict(&demo.features[t]);
            for c in 0..N_CHANNELS {
                sum += (demo.actions[t][c] - mu[c]).powi(2);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Knobs of the synthetic feedback generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotationSynth {
    /// Chance that a given 1 Hz sample receives a comment.
    pub rate: f64,
    /// Chance that a comment lands in a random cluster instead of the regime's own.
    pub confusion: f64,
    /// Chance that a comment is generic (a cluster with no control).
    pub generic: f64,
    /// Standard deviation of the anchor offset, meters.
    pub jitter: f64,
}

impl Default for AnnotationSynth {
    fn default() -> Self {
        Self {
            rate: 0.35,
            confusion: 0.1,
            generic: 0.2,
            jitter: 1.0,
        }
    }
}

/// Cluster a coach would most likely comment with at this expert sample.
fn regime_cluster(track: &Track, s: &Sample, cmap: &ClusterMap) -> Option<usize> {
    let want = if s.action.brake > 0.02 || s.action.throttle < 0.05 {
        Channel::Brake
    } else if track.curvature_at(s.progress).abs() > 0.005 && s.action.throttle < 0.6 {
        Channel::Steer
    } else {
        Channel::Throttle
    };
    (0..cmap.len()).find(|&k| cmap.control(k) == Control::Channel(want))
}

/// Seeded stand-in for clustered coach feedback on 1 Hz expert laps.
pub fn synthesize_annotations(
    track: &Track,
    demos: &[Trajectory],
    cmap: &ClusterMap,
    synth: &AnnotationSynth,
    seed: u64,
) -> Vec<FeedbackAnnotation> {
    use rand::Rng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, synth.jitter.max(0.0)).expect("finite jitter");
    let generic: Vec<usize> = (0..cmap.len()).filter(|&k| cmap.control(k) == Control::None).collect();
    let mut out = Vec::new();
    for demo in demos {
        for s in &demo.samples {
            if !rng.random_bool(synth.rate) {
                continue;
            }
            let u: f64 = rng.random();
            let cluster = if u < synth.confusion {
                Some(rng.random_range(0..cmap.len()))
            } else if u < synth.confusion + synth.generic && !generic.is_empty() {
                Some(generic[rng.random_range(0..generic.len())])
            } else {
                regime_cluster(track, s, cmap)
            };
            let dx = jitter.sample(&mut rng);
            let dy = jitter.sample(&mut rng);
            if let Some(cluster_id) = cluster {
                out.push(FeedbackAnnotation {
                    x: ((s.state.position.x + dx) * 100.0).round() / 100.0,
                    y: ((s.state.position.y + dy) * 100.0).round() / 100.0,
                    cluster_id,
                });
            }
        }
    }
    out
}

/// 1 Hz labeled demos from a bank and an annotation set.
pub fn label_demos(
    track: &Track,
    demos: &[Trajectory],
    annotations: &[FeedbackAnnotation],
) -> Result<(Vec<LabeledDemo>, Vec<String>)> {
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for d in demos {
        let hz = d.resample_1hz(track)?;
        let labels = attach_annotations(&hz, annotations);
        warnings.extend(labels.warnings);
        out.push(LabeledDemo::from_trajectory(track, &hz, labels.labels)?);
    }
    Ok((out, warnings))
}
