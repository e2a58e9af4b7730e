use serde::{Deserialize, Serialize};

use super::{ACCEL_MAX, ACCEL_MIN, SPEED_CAP_MPS};
use crate::error::{Error, Result};

pub const N_FEATURES: usize = 8;

/// What the agent perceives at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub position_m: f64,
    pub speed_mps: f64,
    /// Distance to the nearest active hazard ahead, capped at the sensing range.
    pub dist_to_next_hazard_m: f64,
    pub sensing_range_m: f64,
    /// Indexed by [`HazardKind::index`](super::HazardKind::index); all zero when nothing is sensed.
    pub hazard_kind_onehot: [f64; 4],
    pub light_is_red: f64,
    pub speed_limit_mps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub accel_mps2: f64,
}

/// Feature basis of the linear policy:
/// bias, speed, hazard proximity, red light x proximity, lead vehicle x
/// proximity, pedestrian x proximity, speed x proximity to an obstacle (lead
/// vehicle or pedestrian), and speed in excess of the limit.
pub fn features(obs: &Observation) -> [f64; N_FEATURES] {
    let speed = obs.speed_mps / SPEED_CAP_MPS;
    let proximity = if obs.sensing_range_m > 0.0 {
        (1.0 - obs.dist_to_next_hazard_m / obs.sensing_range_m).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let [_, lead, pedestrian, _] = obs.hazard_kind_onehot;
    let obstacle = (lead + pedestrian).min(1.0);
    [
        1.0,
        speed,
        proximity,
        obs.light_is_red * proximity,
        lead * proximity,
        pedestrian * proximity,
        speed * proximity * obstacle,
        (obs.speed_mps - obs.speed_limit_mps).max(0.0) / SPEED_CAP_MPS,
    ]
}

/// Parameter vector of the linear acceleration policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct PolicyParams {
    pub theta: [f64; N_FEATURES],
}

#[derive(Deserialize)]
struct RawParams {
    theta: [f64; N_FEATURES],
}

impl TryFrom<RawParams> for PolicyParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        PolicyParams::new(raw.theta)
    }
}

impl PolicyParams {
    pub fn new(theta: [f64; N_FEATURES]) -> Result<Self> {
        if theta.iter().all(|x| x.is_finite()) {
            Ok(Self { theta })
        } else {
            Err(Error::InvalidConfig("policy parameters must be finite".into()))
        }
    }

    pub fn zeros() -> Self {
        Self {
            theta: [0.0; N_FEATURES],
        }
    }

    /// The shipped pre-repair policy: cruises near 12 m/s and brakes for
    /// visible obstacles, but ignores traffic lights and speed limits and
    /// brakes too gently when the sensing range is short.
    pub fn baseline() -> Self {
        Self {
            theta: [2.0, -2.5, 0.0, 0.0, -2.0, -2.0, -4.0, 0.0],
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::SchemaError {
            line: e.line(),
            field: "theta".into(),
            message: e.to_string(),
        })
    }
}

/// `clamp(theta . features(obs), ACCEL_MIN, ACCEL_MAX)`.
pub fn policy_act(params: &PolicyParams, obs: &Observation) -> Action {
    let raw: f64 = params.theta.iter().zip(features(obs)).map(|(w, f)| w * f).sum();
    Action {
        accel_mps2: raw.clamp(ACCEL_MIN, ACCEL_MAX),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(speed: f64, dist: f64, onehot: [f64; 4], red: f64) -> Observation {
        Observation {
            position_m: 10.0,
            speed_mps: speed,
            dist_to_next_hazard_m: dist,
            sensing_range_m: 60.0,
            hazard_kind_onehot: onehot,
            light_is_red: red,
            speed_limit_mps: 8.0,
        }
    }

    #[test]
    fn zero_policy_does_nothing() {
        let p = PolicyParams::zeros();
        for o in [obs(0.0, 60.0, [0.0; 4], 0.0), obs(12.0, 5.0, [1.0, 0.0, 0.0, 0.0], 1.0)] {
            assert_eq!(policy_act(&p, &o).accel_mps2, 0.0);
        }
    }

    #[test]
    fn large_weights_saturate() {
        let mut p = PolicyParams::baseline();
        p.theta.iter_mut().for_each(|w| *w *= 1000.0);
        let cruise = policy_act(&p, &obs(0.0, 60.0, [0.0; 4], 0.0));
        assert_eq!(cruise.accel_mps2, ACCEL_MAX);
        let brake = policy_act(&p, &obs(12.0, 3.0, [0.0, 1.0, 0.0, 0.0], 0.0));
        assert_eq!(brake.accel_mps2, ACCEL_MIN);
    }

    #[test]
    fn features_are_deterministic_and_bounded() {
        let o = obs(9.0, 30.0, [1.0, 0.0, 0.0, 0.0], 1.0);
        assert_eq!(features(&o), features(&o));
        let f = features(&o);
        assert_eq!(f[2], 0.5);
        assert_eq!(f[3], 0.5);
        assert!((f[7] - 1.0 / 15.0).abs() < 1e-12);
        assert_eq!(
            policy_act(&PolicyParams::baseline(), &o),
            policy_act(&PolicyParams::baseline(), &o)
        );
    }

    #[test]
    fn non_finite_params_are_rejected() {
        let mut t = [0.0; N_FEATURES];
        t[3] = f64::NAN;
        assert!(PolicyParams::new(t).is_err());
        assert!(serde_json::from_str::<PolicyParams>(r#"{"theta":[1,2,3]}"#).is_err());
    }
}
