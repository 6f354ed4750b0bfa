//! Per-channel blending of agent and student controls.
//!
//! The executed action on each channel is `alpha * agent + (1 - alpha) *
//! student`, with a separate `alpha` for steering, throttle and brake.

use crate::error::{Error, Result};
use crate::vehicle::{Action, Channel};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Assistance strength per channel, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlendConfig {
    pub alpha_steer: f64,
    pub alpha_throttle: f64,
    pub alpha_brake: f64,
}

impl BlendConfig {
    pub const NONE: BlendConfig = BlendConfig {
        alpha_steer: 0.0,
        alpha_throttle: 0.0,
        alpha_brake: 0.0,
    };

    pub fn uniform(alpha: f64) -> Result<Self> {
        Self::new(alpha, alpha, alpha)
    }

    pub fn new(alpha_steer: f64, alpha_throttle: f64, alpha_brake: f64) -> Result<Self> {
        let cfg = Self {
            alpha_steer,
            alpha_throttle,
            alpha_brake,
        };
        for c in Channel::ALL {
            let a = cfg.alpha(c);
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::invalid(format!("alpha for {c} must lie in [0, 1], got {a}")));
            }
        }
        Ok(cfg)
    }

    pub fn alpha(&self, c: Channel) -> f64 {
        match c {
            Channel::Steer => self.alpha_steer,
            Channel::Throttle => self.alpha_throttle,
            Channel::Brake => self.alpha_brake,
        }
    }

    fn set(&mut self, c: Channel, a: f64) {
        match c {
            Channel::Steer => self.alpha_steer = a,
            Channel::Throttle => self.alpha_throttle = a,
            Channel::Brake => self.alpha_brake = a,
        }
    }

    /// Every alpha replaced by `1 - alpha`.
    pub fn complement(&self) -> Self {
        Self {
            alpha_steer: 1.0 - self.alpha_steer,
            alpha_throttle: 1.0 - self.alpha_throttle,
            alpha_brake: 1.0 - self.alpha_brake,
        }
    }
}

/// Study assistance modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SaMode {
    Unassisted,
    StrongSa,
    WeakSa,
    /// Strong assistance everywhere except the coached channel, which the
    /// student drives alone.
    SkillSa(Channel),
}

pub const STRONG_ALPHA: f64 = 0.8;
pub const WEAK_ALPHA: f64 = 0.05;

impl SaMode {
    pub fn all() -> [SaMode; 6] {
        [
            SaMode::Unassisted,
            SaMode::StrongSa,
            SaMode::WeakSa,
            SaMode::SkillSa(Channel::Steer),
            SaMode::SkillSa(Channel::Throttle),
            SaMode::SkillSa(Channel::Brake),
        ]
    }
}

pub fn mode_to_config(mode: SaMode) -> BlendConfig {
    match mode {
        SaMode::Unassisted => BlendConfig::NONE,
        SaMode::StrongSa => BlendConfig {
            alpha_steer: STRONG_ALPHA,
            alpha_throttle: STRONG_ALPHA,
            alpha_brake: STRONG_ALPHA,
        },
        SaMode::WeakSa => BlendConfig {
            alpha_steer: WEAK_ALPHA,
            alpha_throttle: WEAK_ALPHA,
            alpha_brake: WEAK_ALPHA,
        },
        SaMode::SkillSa(c) => {
            let mut cfg = mode_to_config(SaMode::StrongSa);
            cfg.set(c, 0.0);
            cfg
        }
    }
}

impl fmt::Display for SaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SaMode::Unassisted => f.write_str("unassisted"),
            SaMode::StrongSa => f.write_str("strong_sa"),
            SaMode::WeakSa => f.write_str("weak_sa"),
            SaMode::SkillSa(c) => write!(f, "skill_sa:{c}"),
        }
    }
}

impl FromStr for SaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unassisted" => Ok(SaMode::Unassisted),
            "strong_sa" => Ok(SaMode::StrongSa),
            "weak_sa" => Ok(SaMode::WeakSa),
            other => match other.strip_prefix("skill_sa:") {
                Some(c) => Ok(SaMode::SkillSa(c.parse()?)),
                None => Err(Error::invalid(format!("unknown assistance mode {other:?}"))),
            },
        }
    }
}

impl Serialize for SaMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SaMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-channel convex combination of agent and student actions.
pub fn blend(agent: &Action, student: &Action, cfg: &BlendConfig) -> Action {
    let mix = |c: Channel| {
        let a = cfg.alpha(c);
        c.clamp(a * agent.get(c) + (1.0 - a) * student.get(c))
    };
    Action {
        steer: mix(Channel::Steer),
        throttle: mix(Channel::Throttle),
        brake: mix(Channel::Brake),
    }
}

/// Drops all assistance once the car is further than `threshold` from the centerline.
pub fn apply_revert(cfg: &BlendConfig, lateral: f64, threshold: f64) -> BlendConfig {
    debug_assert!(threshold > 0.0);
    if lateral.abs() > threshold {
        BlendConfig::NONE
    } else {
        *cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn study_modes() {
        assert_eq!(mode_to_config(SaMode::Unassisted), BlendConfig::NONE);
        assert_eq!(mode_to_config(SaMode::StrongSa), BlendConfig::uniform(0.8).unwrap());
        assert_eq!(mode_to_config(SaMode::WeakSa), BlendConfig::uniform(0.05).unwrap());
        let t = mode_to_config(SaMode::SkillSa(Channel::Throttle));
        assert_eq!((t.alpha_steer, t.alpha_throttle, t.alpha_brake), (0.8, 0.0, 0.8));
    }

    #[test]
    fn blend_examples() {
        let agent = Action::new(0.3, 1.0, 0.2);
        let student = Action::new(-0.5, 0.5, 0.0);
        assert_eq!(blend(&agent, &student, &BlendConfig::uniform(1.0).unwrap()), agent);
        assert_eq!(blend(&agent, &student, &BlendConfig::NONE), student);
        let b = blend(&agent, &student, &BlendConfig::uniform(0.8).unwrap());
        assert!((b.throttle - 0.9).abs() < 1e-12);
    }

    #[test]
    fn revert_is_strict() {
        let cfg = mode_to_config(SaMode::StrongSa);
        assert_eq!(apply_revert(&cfg, 0.0, 6.0), cfg);
        assert_eq!(apply_revert(&cfg, 6.0, 6.0), cfg);
        assert_eq!(apply_revert(&cfg, -6.1, 6.0), BlendConfig::NONE);
    }

    #[test]
    fn mode_strings_round_trip() {
        for m in SaMode::all() {
            let s = m.to_string();
            assert_eq!(s.parse::<SaMode>().unwrap(), m);
            let j = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<SaMode>(&j).unwrap(), m);
        }
        assert_eq!(SaMode::SkillSa(Channel::Brake).to_string(), "skill_sa:brake");
        assert!("skill_sa:gears".parse::<SaMode>().is_err());
        assert!(BlendConfig::new(1.2, 0.0, 0.0).is_err());
    }

    use proptest::prelude::*;

    fn action() -> impl Strategy<Value = Action> {
        (-1.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(s, t, b)| Action::new(s, t, b))
    }

    proptest! {
        #[test]
        fn blend_is_per_channel_convex(agent in action(), student in action(), a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            let (lo, hi) = (a.min(b), a.max(b));
            let bl = blend(&agent, &student, &BlendConfig::uniform(lo).unwrap());
            let bh = blend(&agent, &student, &BlendConfig::uniform(hi).unwrap());
            for c in Channel::ALL {
                let (x, y) = (agent.get(c), student.get(c));
                prop_assert!((bl.get(c) - (lo * x + (1.0 - lo) * y)).abs() <= 1e-12);
                // Moving alpha toward 1 never moves the output away from the agent.
                prop_assert!((bh.get(c) - x).abs() <= (bl.get(c) - x).abs() + 1e-12);
            }
            for c in Channel::ALL {
                let out = blend(&agent, &student, &mode_to_config(SaMode::SkillSa(c)));
                prop_assert_eq!(out.get(c), student.get(c));
            }
        }
    }
}
