//! Simulated learners: expert actions corrupted per channel, with a
//! prerequisite gate deciding which channel can currently improve.

use crate::autonomy::{BlendConfig, SaMode};
use crate::error::{Error, Result};
use crate::sim::Driver;
use crate::vehicle::{Action, Channel, VehicleState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::ops::{Index, IndexMut};
use std::path::Path;

/// One value per control channel.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerChannel<T> {
    pub steer: T,
    pub throttle: T,
    pub brake: T,
}

impl<T: Copy> PerChannel<T> {
    pub fn splat(v: T) -> Self {
        Self { steer: v, throttle: v, brake: v }
    }

    pub fn from_fn(f: impl Fn(Channel) -> T) -> Self {
        Self { steer: f(Channel::Steer), throttle: f(Channel::Throttle), brake: f(Channel::Brake) }
    }
}

impl<T> Index<Channel> for PerChannel<T> {
    type Output = T;
    fn index(&self, c: Channel) -> &T {
        match c {
            Channel::Steer => &self.steer,
            Channel::Throttle => &self.throttle,
            Channel::Brake => &self.brake,
        }
    }
}

impl<T> IndexMut<Channel> for PerChannel<T> {
    fn index_mut(&mut self, c: Channel) -> &mut T {
        match c {
            Channel::Steer => &mut self.steer,
            Channel::Throttle => &mut self.throttle,
            Channel::Brake => &mut self.brake,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeficitStyle {
    /// Correlated Gaussian error on top of the right input.
    Noise,
    /// Exponential smoothing; reacts late.
    Lag,
    /// Shrinks the input toward zero.
    Timid,
    /// Pushes any nonzero input toward full scale.
    Aggressive,
}

/// `channel` can only improve while `requires` has a deficit below `below`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prerequisite {
    pub channel: Channel,
    pub requires: Channel,
    pub below: f64,
}

/// Throttle control comes before braking.
pub const THROTTLE_BEFORE_BRAKE: Prerequisite = Prerequisite {
    channel: Channel::Brake,
    requires: Channel::Throttle,
    below: 0.3,
};

/// Deficits below this are treated as already learned.
pub const LEARNED: f64 = 0.1;

/// Expert inputs at or below this count as not pressed.
const ENGAGED: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentProfile {
    pub id: usize,
    /// 0 is expert, 1 is as bad as the model gets.
    pub deficits: PerChannel<f64>,
    pub styles: PerChannel<DeficitStyle>,
    pub gates: Vec<Prerequisite>,
    /// Deficit reduction per minute of practice focused on the channel.
    pub focused_rate: PerChannel<f64>,
    /// Deficit reduction per minute of unassisted practice.
    pub self_rate: PerChannel<f64>,
    pub seed: u64,
}

impl StudentProfile {
    pub fn validate(&self) -> Result<()> {
        for c in Channel::ALL {
            let d = self.deficits[c];
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::invalid(format!("student {}: {c} deficit {d} outside [0, 1]", self.id)));
            }
            let (f, s) = (self.focused_rate[c], self.self_rate[c]);
            if !(s >= 0.0 && f >= s && f.is_finite()) {
                return Err(Error::invalid(format!(
                    "student {}: {c} rates need 0 <= self ({s}) <= focused ({f})",
                    self.id
                )));
            }
        }
        for g in &self.gates {
            if g.channel == g.requires || !(g.below > 0.0) {
                return Err(Error::invalid(format!("student {}: bad prerequisite {g:?}", self.id)));
            }
        }
        Ok(())
    }

    /// Every prerequisite of `c` is met.
    pub fn learnable(&self, c: Channel) -> bool {
        self.gates.iter().filter(|g| g.channel == c).all(|g| self.deficits[g.requires] < g.below)
    }

    /// The channel this student can improve most right now.
    pub fn ground_truth(&self) -> Option<Channel> {
        let mut best: Option<Channel> = None;
        for c in Channel::ALL {
            if self.deficits[c] >= LEARNED && self.learnable(c) && best.is_none_or(|b| self.deficits[c] > self.deficits[b]) {
                best = Some(c);
            }
        }
        best
    }
}

pub fn load_cohort(path: &Path) -> Result<Vec<StudentProfile>> {
    let cohort: Vec<StudentProfile> = crate::io::read_json(path)?;
    for p in &cohort {
        p.validate()?;
    }
    Ok(cohort)
}

/// Deficits after `minutes` of practice in `mode`. Focused practice on a
/// gated channel is a tenth as effective; practice in the StrongSA/WeakSA
/// modes counts as self-practice.
pub fn practice_update(profile: &StudentProfile, minutes: f64, mode: SaMode) -> StudentProfile {
    let mut next = profile.clone();
    if !(minutes > 0.0) {
        return next;
    }
    let gate = |c: Channel| if profile.learnable(c) { 1.0 } else { 0.1 };
    for c in Channel::ALL {
        let drop = match mode {
            SaMode::SkillSa(focus) if focus == c => profile.focused_rate[c] * minutes * gate(c),
            SaMode::SkillSa(_) => 0.0,
            _ => profile.self_rate[c] * minutes * gate(c),
        };
        next.deficits[c] = (profile.deficits[c] - drop).max(0.0);
    }
    next
}

/// Constants of the corruption and learning model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentModel {
    /// Standard deviation of the noise style at deficit 1.
    pub noise_scale: PerChannel<f64>,
    /// Correlation time of the noise, seconds.
    pub noise_tau: f64,
    /// Smoothing time constant of the lag style at deficit 1, seconds.
    pub lag_tau: PerChannel<f64>,
    /// Under the other styles the deficit wavers by this relative amount,
    /// driven by the same correlated noise.
    pub waver: f64,
    /// On a learnable channel the deficit shrinks by this fraction of α while assisted.
    pub scaffold_gain: f64,
    /// On a gated channel the deficit grows by this fraction of α while assisted.
    pub overload_gain: f64,
}

impl Default for StudentModel {
    fn default() -> Self {
        Self {
            noise_scale: PerChannel { steer: 0.5, throttle: 0.6, brake: 0.6 },
            noise_tau: 0.5,
            lag_tau: PerChannel { steer: 0.03, throttle: 1.0, brake: 1.0 },
            waver: 0.03,
            scaffold_gain: 0.0,
            overload_gain: 0.0,
        }
    }
}

impl StudentModel {
    pub fn validate(&self) -> Result<()> {
        let ok = Channel::ALL.iter().all(|&c| self.noise_scale[c] >= 0.0)
            && self.noise_tau > 0.0
            && Channel::ALL.iter().all(|&c| self.lag_tau[c] >= 0.0)
            && (0.0..1.0).contains(&self.waver)
            && (0.0..=1.0).contains(&self.scaffold_gain)
            && self.overload_gain >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid student model {self:?}")))
        }
    }

    /// Deficit shown on `c` with assistance `alpha` on that channel.
    pub fn effective_deficit(&self, profile: &StudentProfile, c: Channel, alpha: f64) -> f64 {
        let d = profile.deficits[c];
        let g = if profile.learnable(c) {
            1.0 - self.scaffold_gain * alpha
        } else {
            1.0 + self.overload_gain * alpha
        };
        (d * g).clamp(0.0, 1.0)
    }
}

/// Drives a profile through the simulator. Noise and lag keep per-trial
/// state; each reset starts a new, seeded, trial.
#[derive(Debug, Clone)]
pub struct StudentDriver {
    profile: StudentProfile,
    model: StudentModel,
    trial: u64,
    rng: ChaCha8Rng,
    noise: PerChannel<f64>,
    lagged: PerChannel<f64>,
}

impl StudentDriver {
    pub fn new(profile: StudentProfile, model: StudentModel) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(profile.seed);
        let mut d = Self {
            profile,
            model,
            trial: 0,
            rng,
            noise: PerChannel::splat(0.0),
            lagged: PerChannel::splat(0.0),
        };
        d.start_trial();
        d
    }

    pub fn profile(&self) -> &StudentProfile {
        &self.profile
    }

    /// Replaces the deficits after practice; trial numbering continues.
    pub fn set_profile(&mut self, profile: StudentProfile) {
        self.profile = profile;
    }

    fn start_trial(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.profile.seed);
        rng.set_stream(self.trial);
        self.rng = rng;
        for c in Channel::ALL {
            self.noise[c] = self.rng.sample(StandardNormal);
        }
        self.lagged = PerChannel::splat(0.0);
    }

    /// The student's own input given the expert's, for deficit `d` on `c`.
    fn corrupt(&mut self, c: Channel, a: f64, d: f64, dt: f64) -> f64 {
        let (lo, hi) = c.range();
        let rho = (-dt / self.model.noise_tau).exp();
        let e: f64 = StandardNormal.sample(&mut self.rng);
        self.noise[c] = rho * self.noise[c] + (1.0 - rho * rho).sqrt() * e;
        let wd = (d * (1.0 + self.model.waver * self.noise[c])).clamp(0.0, 1.0);
        let out = match self.profile.styles[c] {
            DeficitStyle::Noise => {
                // A pedal the expert leaves alone stays untouched.
                let idle = c != Channel::Steer && a <= ENGAGED;
                if d == 0.0 || idle {
                    a
                } else {
                    a + d * self.model.noise_scale[c] * self.noise[c]
                }
            }
            DeficitStyle::Lag => {
                let tau = wd * self.model.lag_tau[c];
                let y = self.lagged[c] + dt / (dt + tau) * (a - self.lagged[c]);
                self.lagged[c] = y;
                if d == 0.0 {
                    self.lagged[c] = a;
                    a
                } else {
                    y
                }
            }
            DeficitStyle::Timid => a * (1.0 - wd),
            DeficitStyle::Aggressive => {
                if a.abs() > ENGAGED {
                    a + wd * (a.signum() - a)
                } else {
                    a
                }
            }
        };
        out.clamp(lo, hi)
    }
}

impl Driver for StudentDriver {
    fn act(&mut self, _state: &VehicleState, expert: &Action, alpha: &BlendConfig, dt: f64) -> Action {
        let mut out = *expert;
        for c in Channel::ALL {
            let d = self.model.effective_deficit(&self.profile, c, alpha.alpha(c));
            let v = self.corrupt(c, expert.get(c), d, dt);
            out.set(c, v);
        }
        out
    }

    fn reset(&mut self) {
        self.trial += 1;
        self.start_trial();
    }
}

/// Sampling ranges for a generated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    /// Deficit of the channel a student should be coached on, by channel.
    pub dominant: PerChannel<(f64, f64)>,
    /// Deficits of the other learnable channels.
    pub minor: (f64, f64),
    /// Fraction of throttle-coached students who also brake badly, though
    /// braking cannot improve until throttle does.
    pub trap_fraction: f64,
    /// Throttle deficit of a trap student, at or above the gate.
    pub trap_throttle: (f64, f64),
    /// Brake deficit of a trap student, above its throttle deficit.
    pub trap_brake: (f64, f64),
    pub styles: PerChannel<Vec<DeficitStyle>>,
    pub focused_rate: f64,
    pub self_rate: (f64, f64),
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            dominant: PerChannel { steer: (0.75, 0.84), throttle: (0.3, 0.7), brake: (0.5, 0.9) },
            minor: (0.0, 0.04),
            trap_fraction: 0.5,
            trap_throttle: (0.35, 0.55),
            trap_brake: (0.6, 0.9),
            styles: PerChannel {
                steer: vec![DeficitStyle::Timid],
                throttle: vec![DeficitStyle::Timid],
                brake: vec![DeficitStyle::Aggressive],
            },
            focused_rate: 0.06,
            self_rate: (0.015, 0.02),
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let range = |(a, b): (f64, f64)| (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a <= b;
        let ok = Channel::ALL.iter().all(|&c| range(self.dominant[c]) && self.dominant[c].0 >= LEARNED)
            && range(self.minor)
            && range(self.trap_throttle)
            && range(self.trap_brake)
            && (0.0..=1.0).contains(&self.trap_fraction)
            && self.minor.1 < LEARNED
            && self.trap_throttle.0 >= THROTTLE_BEFORE_BRAKE.below
            && self.trap_throttle.1 < self.trap_brake.0
            && self.self_rate.0 >= 0.0
            && self.self_rate.0 <= self.self_rate.1
            && self.self_rate.1 <= self.focused_rate
            && Channel::ALL.iter().all(|&c| !self.styles[c].is_empty());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("inconsistent cohort spec"))
        }
    }
}

/// Seeded cohort, stratified so each channel is the coaching target for
/// about a third of the students.
pub fn make_cohort(n: usize, seed: u64, spec: &CohortSpec) -> Result<Vec<(StudentProfile, Option<Channel>)>> {
    if n == 0 {
        return Err(Error::invalid("cohort needs at least one student"));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets: Vec<Channel> = (0..n).map(|i| Channel::ALL[i % 3]).collect();
    use rand::seq::SliceRandom;
    targets.shuffle(&mut rng);
    let mut throttle_seen = 0usize;
    let n_throttle = targets.iter().filter(|&&c| c == Channel::Throttle).count();
    let n_traps = (spec.trap_fraction * n_throttle as f64).round() as usize;
    let mut out = Vec::with_capacity(n);
    for (id, &target) in targets.iter().enumerate() {
        let mut u = |(a, b): (f64, f64)| if a == b { a } else { rng.random_range(a..=b) };
        let mut deficits = PerChannel::splat(0.0);
        for c in Channel::ALL {
            deficits[c] = u(spec.minor);
        }
        deficits[target] = u(spec.dominant[target]);
        if target == Channel::Throttle {
            if throttle_seen < n_traps {
                deficits.throttle = u(spec.trap_throttle);
                deficits.brake = u(spec.trap_brake);
            }
            throttle_seen += 1;
        }
        let self_rate = PerChannel::from_fn(|_| 0.0);
        let mut profile = StudentProfile {
            id,
            deficits,
            styles: PerChannel::splat(DeficitStyle::Noise),
            gates: vec![THROTTLE_BEFORE_BRAKE],
            focused_rate: PerChannel::splat(spec.focused_rate),
            self_rate,
            seed: 0,
        };
        for c in Channel::ALL {
            let opts = &spec.styles[c];
            profile.styles[c] = opts[rng.random_range(0..opts.len())];
            profile.self_rate[c] = if spec.self_rate.0 == spec.self_rate.1 {
                spec.self_rate.0
            } else {
                rng.random_range(spec.self_rate.0..=spec.self_rate.1)
            };
        }
        profile.seed = rng.random();
        let truth = profile.ground_truth();
        debug_assert_eq!(truth, Some(target));
        out.push((profile, truth));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autonomy::mode_to_config;
    use proptest::prelude::*;

    const STYLES: [DeficitStyle; 4] = [DeficitStyle::Noise, DeficitStyle::Lag, DeficitStyle::Timid, DeficitStyle::Aggressive];

    fn profile(deficits: PerChannel<f64>, style: DeficitStyle) -> StudentProfile {
        StudentProfile {
            id: 0,
            deficits,
            styles: PerChannel::splat(style),
            gates: vec![THROTTLE_BEFORE_BRAKE],
            focused_rate: PerChannel::splat(0.06),
            self_rate: PerChannel::splat(0.02),
            seed: 11,
        }
    }

    fn random_action(rng: &mut ChaCha8Rng) -> Action {
        let u: f64 = rng.random_range(-1.0..1.0);
        if u > 0.0 {
            Action::new(rng.random_range(-1.0..=1.0), u, 0.0)
        } else {
            Action::new(rng.random_range(-1.0..=1.0), 0.0, -u)
        }
    }

    fn state() -> VehicleState {
        VehicleState::new(Default::default(), 0.0, 10.0, 0.0)
    }

    #[test]
    fn zero_deficit_is_the_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for style in STYLES {
            for mode in SaMode::all() {
                let mut drv = StudentDriver::new(profile(PerChannel::splat(0.0), style), StudentModel::default());
                for _ in 0..200 {
                    let a = random_action(&mut rng);
                    assert_eq!(drv.act(&state(), &a, &mode_to_config(mode), 0.05), a);
                }
            }
        }
    }

    #[test]
    fn full_timid_throttle_is_zero() {
        let mut p = profile(PerChannel::splat(0.0), DeficitStyle::Timid);
        p.deficits.throttle = 1.0;
        let mut drv = StudentDriver::new(p, StudentModel { waver: 0.0, ..StudentModel::default() });
        for t in [0.0, 0.3, 1.0] {
            let a = Action::new(0.2, t, 0.0);
            let out = drv.act(&state(), &a, &BlendConfig::NONE, 0.05);
            assert_eq!(out.throttle, 0.0);
            assert_eq!(out.steer, 0.2);
        }
    }

    #[test]
    fn corruption_is_deterministic() {
        let p = profile(PerChannel::splat(0.6), DeficitStyle::Noise);
        let run = |drv: &mut StudentDriver| {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            (0..100).map(|_| drv.act(&state(), &random_action(&mut rng), &BlendConfig::NONE, 0.05)).collect::<Vec<_>>()
        };
        let mut a = StudentDriver::new(p.clone(), StudentModel::default());
        let mut b = StudentDriver::new(p, StudentModel::default());
        let first = run(&mut a);
        assert_eq!(first, run(&mut b));
        a.reset();
        b.reset();
        let second = run(&mut a);
        assert_eq!(second, run(&mut b));
        assert_ne!(first, second);
    }

    #[test]
    fn practice_examples() {
        let mut p = profile(PerChannel::splat(0.0), DeficitStyle::Timid);
        p.deficits.throttle = 0.5;
        let after = practice_update(&p, 5.0, SaMode::SkillSa(Channel::Throttle));
        assert!((after.deficits.throttle - 0.2).abs() < 1e-12);
        assert_eq!(after.deficits.steer, 0.0);

        let mut p = profile(PerChannel::splat(0.0), DeficitStyle::Timid);
        p.deficits.throttle = 0.4;
        p.deficits.brake = 0.5;
        let after = practice_update(&p, 5.0, SaMode::SkillSa(Channel::Brake));
        assert!((after.deficits.brake - 0.47).abs() < 1e-12);
        assert_eq!(after.deficits.throttle, 0.4);

        assert_eq!(practice_update(&p, 0.0, SaMode::SkillSa(Channel::Brake)), p);
        let selfp = practice_update(&p, 2.0, SaMode::Unassisted);
        assert!((selfp.deficits.throttle - 0.36).abs() < 1e-12);
        assert!((selfp.deficits.brake - 0.496).abs() < 1e-12);
    }

    #[test]
    fn ground_truth_rule() {
        let mut p = profile(PerChannel::splat(0.0), DeficitStyle::Timid);
        assert_eq!(p.ground_truth(), None);
        p.deficits = PerChannel { steer: 0.2, throttle: 0.8, brake: 0.9 };
        assert!(!p.learnable(Channel::Brake));
        assert_eq!(p.ground_truth(), Some(Channel::Throttle));
        p.deficits.throttle = 0.1;
        assert_eq!(p.ground_truth(), Some(Channel::Brake));
        p.deficits = PerChannel::splat(0.05);
        assert_eq!(p.ground_truth(), None);
        p.deficits = PerChannel { steer: 0.5, throttle: 0.5, brake: 0.0 };
        assert_eq!(p.ground_truth(), Some(Channel::Steer));
    }

    #[test]
    fn cohort_is_seeded_and_stratified() {
        let spec = CohortSpec::default();
        let a = make_cohort(50, 9, &spec).unwrap();
        assert_eq!(a, make_cohort(50, 9, &spec).unwrap());
        assert_ne!(a, make_cohort(50, 10, &spec).unwrap());
        for c in Channel::ALL {
            assert!(a.iter().filter(|(_, t)| *t == Some(c)).count() >= 5, "{c}");
        }
        for (p, t) in &a {
            p.validate().unwrap();
            assert_eq!(p.ground_truth(), *t);
        }
        let traps = a.iter().filter(|(p, _)| !p.learnable(Channel::Brake) && p.deficits.brake > p.deficits.throttle);
        assert!(traps.count() >= 2);
        assert!(make_cohort(0, 1, &spec).is_err());
    }

    #[test]
    fn cohort_json_round_trip() {
        let cohort: Vec<StudentProfile> = make_cohort(6, 3, &CohortSpec::default()).unwrap().into_iter().map(|(p, _)| p).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.json");
        std::fs::write(&path, serde_json::to_string_pretty(&cohort).unwrap()).unwrap();
        assert_eq!(load_cohort(&path).unwrap(), cohort);
    }

    #[test]
    fn invalid_profiles_are_rejected() {
        let mut p = profile(PerChannel::splat(0.0), DeficitStyle::Timid);
        p.deficits.brake = 1.5;
        assert!(p.validate().is_err());
        let mut p = profile(PerChannel::splat(0.0), DeficitStyle::Timid);
        p.self_rate.steer = 0.1;
        assert!(p.validate().is_err());
    }

    #[test]
    fn assistance_scales_deficit_by_gate() {
        let model = StudentModel { scaffold_gain: 0.5, overload_gain: 0.5, ..StudentModel::default() };
        let p = profile(PerChannel { steer: 0.4, throttle: 0.6, brake: 0.6 }, DeficitStyle::Timid);
        assert!((model.effective_deficit(&p, Channel::Throttle, 0.8) - 0.36).abs() < 1e-12);
        assert!((model.effective_deficit(&p, Channel::Brake, 0.8) - 0.84).abs() < 1e-12);
        assert_eq!(model.effective_deficit(&p, Channel::Steer, 0.0), 0.4);
    }

    /// Mean distance from the expert over 1,000 random expert inputs.
    fn mean_error(style: DeficitStyle, c: Channel, d: f64, seed: u64) -> f64 {
        let mut deficits = PerChannel::splat(0.0);
        deficits[c] = d;
        let mut p = profile(deficits, style);
        p.seed = seed;
        let mut drv = StudentDriver::new(p, StudentModel::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..1000)
            .map(|_| {
                let a = random_action(&mut rng);
                (drv.act(&state(), &a, &BlendConfig::NONE, 0.05).get(c) - a.get(c)).abs()
            })
            .sum::<f64>()
            / 1000.0
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn larger_deficit_is_never_closer(
            style in 0usize..4, c in 0usize..3, d1 in 0.0..1.0f64, d2 in 0.0..1.0f64, seed in any::<u64>()
        ) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let c = Channel::ALL[c];
            prop_assert!(mean_error(STYLES[style], c, hi, seed) >= mean_error(STYLES[style], c, lo, seed) - 1e-12);
        }

        #[test]
        fn practice_never_increases(
            d in proptest::array::uniform3(0.0..=1.0f64), minutes in -1.0..10.0f64, mode in 0usize..6
        ) {
            let p = profile(PerChannel { steer: d[0], throttle: d[1], brake: d[2] }, DeficitStyle::Lag);
            let mode = SaMode::all()[mode];
            let after = practice_update(&p, minutes, mode);
            for c in Channel::ALL {
                prop_assert!(after.deficits[c] <= p.deficits[c]);
                prop_assert!(after.deficits[c] >= 0.0);
            }
        }
    }
}
