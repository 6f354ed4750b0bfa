//! Kinematic bicycle vehicle model.

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Vec2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    pub wheelbase: f64,
    /// Peak acceleration at full throttle, m/s^2.
    pub a_max: f64,
    /// Peak deceleration at full brake, m/s^2.
    pub b_max: f64,
    /// Maximum road-wheel angle, rad.
    pub delta_max: f64,
    /// Quadratic drag coefficient, 1/m.
    pub drag: f64,
    /// Rolling resistance while moving, m/s^2. Off by default: drag alone
    /// only brings the car to rest asymptotically.
    pub rolling: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.5,
            a_max: 4.0,
            b_max: 8.0,
            delta_max: 0.5,
            drag: 0.004,
            rolling: 0.0,
        }
    }
}

/// Default simulation tick, seconds.
pub const DEFAULT_DT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub position: Vec2,
    /// Radians in (-pi, pi].
    pub heading: f64,
    pub speed: f64,
    pub time: f64,
}

impl VehicleState {
    pub fn new(position: Vec2, heading: f64, speed: f64, time: f64) -> Self {
        Self {
            position,
            heading: wrap_angle(heading),
            speed: speed.max(0.0),
            time,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite() && self.heading.is_finite() && self.speed.is_finite() && self.time.is_finite()
    }
}

/// The three control channels of an action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Steer,
    Throttle,
    Brake,
}

impl Channel {
    /// Fixed order; also the tie-break order for coaching decisions.
    pub const ALL: [Channel; 3] = [Channel::Steer, Channel::Throttle, Channel::Brake];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Steer => "steer",
            Channel::Throttle => "throttle",
            Channel::Brake => "brake",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Channel::Steer => 0,
            Channel::Throttle => 1,
            Channel::Brake => 2,
        }
    }

    pub fn range(self) -> (f64, f64) {
        match self {
            Channel::Steer => (-1.0, 1.0),
            Channel::Throttle | Channel::Brake => (0.0, 1.0),
        }
    }

    pub fn clamp(self, v: f64) -> f64 {
        let (lo, hi) = self.range();
        v.clamp(lo, hi)
    }
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Channel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "steer" => Ok(Channel::Steer),
            "throttle" => Ok(Channel::Throttle),
            "brake" => Ok(Channel::Brake),
            other => Err(Error::invalid(format!("unknown control channel {other:?}"))),
        }
    }
}

/// Normalized driver controls. Constructors clamp every field into range.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub steer: f64,
    pub throttle: f64,
    pub brake: f64,
}

impl Action {
    pub fn new(steer: f64, throttle: f64, brake: f64) -> Self {
        Self {
            steer: steer.clamp(-1.0, 1.0),
            throttle: throttle.clamp(0.0, 1.0),
            brake: brake.clamp(0.0, 1.0),
        }
    }

    pub const ZERO: Action = Action {
        steer: 0.0,
        throttle: 0.0,
        brake: 0.0,
    };

    pub fn get(&self, c: Channel) -> f64 {
        match c {
            Channel::Steer => self.steer,
            Channel::Throttle => self.throttle,
            Channel::Brake => self.brake,
        }
    }

    /// Sets a channel, clamping into its range.
    pub fn set(&mut self, c: Channel, v: f64) {
        let v = c.clamp(v);
        match c {
            Channel::Steer => self.steer = v,
            Channel::Throttle => self.throttle = v,
            Channel::Brake => self.brake = v,
        }
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.steer, self.throttle, self.brake]
    }

    pub fn is_zero(&self) -> bool {
        self.steer == 0.0 && self.throttle == 0.0 && self.brake == 0.0
    }

    pub fn is_finite(&self) -> bool {
        self.steer.is_finite() && self.throttle.is_finite() && self.brake.is_finite()
    }

    pub fn in_range(&self) -> bool {
        Channel::ALL.iter().all(|&c| {
            let (lo, hi) = c.range();
            (lo..=hi).contains(&self.get(c))
        })
    }
}

/// Advances the vehicle by one explicit-Euler tick.
pub fn step(state: &VehicleState, action: &Action, dt: f64, params: &VehicleParams) -> Result<VehicleState> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive and finite, got {dt}")));
    }
    if !state.is_finite() || !action.is_finite() {
        return Err(Error::invalid("non-finite vehicle state or action"));
    }
    if !action.in_range() {
        return Err(Error::invalid(format!("action out of range: {action:?}")));
    }
    let v = state.speed;
    let rolling = if v > 0.0 { params.rolling } else { 0.0 };
    let accel = params.a_max * action.throttle - params.b_max * action.brake - params.drag * v * v - rolling;
    let delta = params.delta_max * action.steer;
    let yaw_rate = v / params.wheelbase * delta.tan();
    let position = Vec2::new(
        state.position.x + v * state.heading.cos() * dt,
        state.position.y + v * state.heading.sin() * dt,
    );
    Ok(VehicleState {
        position,
        heading: wrap_angle(state.heading + yaw_rate * dt),
        speed: (v + accel * dt).max(0.0),
        time: state.time + dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn at(speed: f64) -> VehicleState {
        VehicleState::new(Vec2::new(3.0, -2.0), 0.3, speed, 0.0)
    }

    #[test]
    fn zero_input_is_fixed_point() {
        let s = at(0.0);
        let n = step(&s, &Action::ZERO, 0.05, &VehicleParams::default()).unwrap();
        assert_eq!(n.position, s.position);
        assert_eq!(n.heading, s.heading);
        assert_eq!(n.speed, 0.0);
    }

    #[test]
    fn full_brake_decelerates_to_rest() {
        let p = VehicleParams::default();
        let mut s = at(12.0);
        let brake = Action::new(0.0, 0.0, 1.0);
        for _ in 0..100 {
            let n = step(&s, &brake, 0.05, &p).unwrap();
            if s.speed > 0.0 {
                assert!(n.speed < s.speed);
            }
            assert!(n.speed >= 0.0);
            s = n;
        }
        assert_eq!(s.speed, 0.0);
    }

    #[test]
    fn heading_change_matches_hand_evaluation() {
        // 0.05 * (10 / 2.5) * tan(0.5 * 0.5)
        let expected = 0.05 * 4.0 * 0.25f64.tan();
        let s = VehicleState::new(Vec2::default(), 0.0, 10.0, 0.0);
        let n = step(&s, &Action::new(0.5, 0.0, 0.0), 0.05, &VehicleParams::default()).unwrap();
        assert!((n.heading - expected).abs() < 1e-15);
        assert!((expected - 0.051_068_384_244_207).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = VehicleParams::default();
        assert!(step(&at(1.0), &Action::ZERO, 0.0, &p).is_err());
        let mut s = at(1.0);
        s.speed = f64::NAN;
        assert!(step(&s, &Action::ZERO, 0.05, &p).is_err());
        let a = Action {
            steer: 2.0,
            throttle: 0.0,
            brake: 0.0,
        };
        assert!(step(&at(1.0), &a, 0.05, &p).is_err());
    }

    #[test]
    fn action_constructor_clamps() {
        let a = Action::new(-3.0, 1.5, -0.2);
        assert_eq!(a, Action::new(-1.0, 1.0, 0.0));
    }

    proptest! {
        #[test]
        fn step_is_deterministic_and_smooth(
            v in 0.5f64..30.0, h in -3.0f64..3.0,
            steer in -0.99f64..0.99, thr in 0.0f64..0.99, brk in 0.0f64..0.99
        ) {
            let p = VehicleParams::default();
            let s = VehicleState::new(Vec2::new(1.0, 2.0), h, v, 0.0);
            let a = Action::new(steer, thr, brk);
            let n1 = step(&s, &a, 0.05, &p).unwrap();
            let n2 = step(&s, &a, 0.05, &p).unwrap();
            prop_assert_eq!(n1, n2);
            // Finite-difference sensitivity to each control is bounded away from
            // the speed clamp.
            let eps = 1e-6;
            let b = Action::new(steer + eps, thr + eps, brk);
            let m = step(&s, &b, 0.05, &p).unwrap();
            if n1.speed > 1e-3 {
                let dh = crate::geometry::wrap_angle(m.heading - n1.heading).abs() / eps;
                let dv = (m.speed - n1.speed).abs() / eps;
                prop_assert!(dh < 10.0, "dh {}", dh);
                prop_assert!(dv < 1.0, "dv {}", dv);
            }
        }
    }
}
