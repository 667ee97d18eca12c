//! Synthetic trajectories and scenarios for tests, smoke runs and the
//! connectivity ablation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geo::{Heading, Hemisphere, UtmZone};
use crate::scenario::{AgentTrack, Scenario, DT, SCENARIO_STEPS};
use crate::track::{Track, TrackRate, TrackSample, GRID_MS};

/// Planar origin of synthetic data (central Modena, zone 32N).
pub const BASE_EASTING: f64 = 653_364.0;
pub const BASE_NORTHING: f64 = 4_945_756.0;
pub const BASE_ZONE: UtmZone = UtmZone { number: 32, hemisphere: Hemisphere::North };
/// Default anchor for synthetic scenarios, a whole number of grid steps.
pub const BASE_T_MS: u64 = 1_700_000_000_000;

/// Closed-form planar motion relative to an origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    ConstantVelocity { speed: f64, yaw: f64 },
    ConstantTurn { speed: f64, yaw: f64, turn_rate: f64 },
}

impl Motion {
    /// `(x, y, vx, vy, yaw)` at time `t` seconds.
    pub fn state(&self, t: f64) -> [f64; 5] {
        match *self {
            Motion::ConstantVelocity { speed, yaw } => {
                let (vx, vy) = (speed * yaw.cos(), speed * yaw.sin());
                [vx * t, vy * t, vx, vy, yaw]
            }
            Motion::ConstantTurn { speed, yaw, turn_rate } => {
                if turn_rate.abs() < 1e-12 {
                    return Motion::ConstantVelocity { speed, yaw }.state(t);
                }
                let r = speed / turn_rate;
                let th = yaw + turn_rate * t;
                [
                    r * (th.sin() - yaw.sin()),
                    -r * (th.cos() - yaw.cos()),
                    speed * th.cos(),
                    speed * th.sin(),
                    crate::geo::wrap_pi(th),
                ]
            }
        }
    }
}

/// Agent sampled from `motion` on every slot, offset by `(dx, dy)` from the base.
pub fn motion_agent(station_id: u32, motion: Motion, dx: f64, dy: f64, focal: bool) -> AgentTrack {
    let states = (0..SCENARIO_STEPS)
        .map(|k| {
            let mut s = motion.state(k as f64 * DT);
            s[0] += BASE_EASTING + dx;
            s[1] += BASE_NORTHING + dy;
            s
        })
        .collect::<Vec<_>>();
    let speed = states.iter().map(|s| s[2].hypot(s[3])).collect();
    AgentTrack { station_id, states, valid: vec![true; SCENARIO_STEPS], focal, speed: Some(speed) }
}

pub fn scenario(id: &str, agents: Vec<AgentTrack>) -> Scenario {
    Scenario {
        id: id.to_string(),
        zone: BASE_ZONE.number,
        hemisphere: BASE_ZONE.hemisphere,
        anchor_t_ms: BASE_T_MS,
        agents,
    }
}

/// Single agent moving in a straight line.
pub fn linear_scenario(id: &str, speed: f64, yaw: f64) -> Scenario {
    scenario(id, vec![motion_agent(1, Motion::ConstantVelocity { speed, yaw }, 0.0, 0.0, true)])
}

/// Single agent on a constant-radius arc.
pub fn curved_scenario(id: &str, speed: f64, yaw: f64, turn_rate: f64) -> Scenario {
    scenario(id, vec![motion_agent(1, Motion::ConstantTurn { speed, yaw, turn_rate }, 0.0, 0.0, true)])
}

/// Focal agent plus up to `max_neighbours` neighbours, some only partially observed.
pub fn random_scenario(id: &str, rng: &mut impl Rng, max_neighbours: usize) -> Scenario {
    let mut agents = vec![motion_agent(1, random_motion(rng), 0.0, 0.0, true)];
    let n = rng.gen_range(0..=max_neighbours);
    for j in 0..n {
        let dx = rng.gen_range(-40.0..40.0);
        let dy = rng.gen_range(-40.0..40.0);
        let mut a = motion_agent(2 + j as u32, random_motion(rng), dx, dy, false);
        if rng.gen_bool(0.3) {
            let start = rng.gen_range(0..60);
            let end = rng.gen_range(start + 10..=SCENARIO_STEPS);
            for k in (0..start).chain(end..SCENARIO_STEPS) {
                a.valid[k] = false;
                a.states[k] = [0.0; 5];
                if let Some(sp) = a.speed.as_mut() {
                    sp[k] = 0.0;
                }
            }
        }
        agents.push(a);
    }
    scenario(id, agents)
}

pub fn random_motion(rng: &mut impl Rng) -> Motion {
    let speed = rng.gen_range(0.0..20.0);
    let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    if rng.gen_bool(0.5) {
        Motion::ConstantVelocity { speed, yaw }
    } else {
        Motion::ConstantTurn { speed, yaw, turn_rate: rng.gen_range(-0.25..0.25) }
    }
}

/// Mixed corpus of `n` scenarios (straight, curved, multi-agent) under `seed`.
pub fn corpus(n: usize, seed: u64) -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut s = random_scenario(&format!("synth_{seed}_{i:04}"), &mut rng, 3);
            s.anchor_t_ms = BASE_T_MS + (i as u64) * 20_000;
            s
        })
        .collect()
}

/// A dense 10 Hz track with random acceleration and turn-rate changes, the
/// kind of input that exercises every CAM trigger.
pub fn random_dense_track(rng: &mut impl Rng, station_id: u32, n: usize) -> Track {
    let mut x = BASE_EASTING + rng.gen_range(-500.0..500.0);
    let mut y = BASE_NORTHING + rng.gen_range(-500.0..500.0);
    let mut speed: f64 = rng.gen_range(0.0..25.0);
    let mut yaw: f64 = rng.gen_range(-3.0..3.0);
    let mut accel = 0.0;
    let mut turn = 0.0;
    let stationary = rng.gen_bool(0.1);
    let t0 = BASE_T_MS + rng.gen_range(0..10_000u64) * GRID_MS;
    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        samples.push(TrackSample {
            t_ms: t0 + k as u64 * GRID_MS,
            x,
            y,
            speed,
            heading: Heading::from_yaw(yaw),
        });
        if stationary {
            continue;
        }
        if rng.gen_bool(0.05) {
            accel = rng.gen_range(-3.0..3.0);
        }
        if rng.gen_bool(0.05) {
            turn = rng.gen_range(-0.6..0.6);
        }
        speed = (speed + accel * DT).clamp(0.0, 35.0);
        yaw += turn * DT;
        x += speed * yaw.cos() * DT;
        y += speed * yaw.sin() * DT;
    }
    Track { station_id, zone: BASE_ZONE, samples, rate: TrackRate::Fixed10Hz, splits: Vec::new() }
}

/// Dense track following `motion` from `t0_ms` for `n` grid steps.
pub fn motion_track(station_id: u32, motion: Motion, t0_ms: u64, n: usize) -> Track {
    let samples = (0..n)
        .map(|k| {
            let s = motion.state(k as f64 * DT);
            TrackSample {
                t_ms: t0_ms + k as u64 * GRID_MS,
                x: BASE_EASTING + s[0],
                y: BASE_NORTHING + s[1],
                speed: s[2].hypot(s[3]),
                heading: Heading::from_yaw(s[4]),
            }
        })
        .collect();
    Track { station_id, zone: BASE_ZONE, samples, rate: TrackRate::Fixed10Hz, splits: Vec::new() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::validate_scenario;

    #[test]
    fn synthetic_scenarios_are_clean() {
        for s in corpus(40, 11) {
            assert!(validate_scenario(&s).is_empty(), "{}: {:?}", s.id, validate_scenario(&s));
        }
    }

    #[test]
    fn turn_velocity_is_derivative_of_position() {
        let m = Motion::ConstantTurn { speed: 12.0, yaw: 0.4, turn_rate: 0.2 };
        let h = 1e-5;
        let (a, b) = (m.state(3.0 - h), m.state(3.0 + h));
        let s = m.state(3.0);
        assert!(((b[0] - a[0]) / (2.0 * h) - s[2]).abs() < 1e-6);
        assert!(((b[1] - a[1]) / (2.0 * h) - s[3]).abs() < 1e-6);
    }
}
