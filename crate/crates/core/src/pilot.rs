//! Things that fly the drone: the `Pilot` trait, a hovering baseline, a
//! scripted geometric controller, and the evaluation loop that turns a
//! pilot and a track into success rate / lap time.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::Result;
use crate::rng::{stream_rng, streams};
use crate::sim::{env_reset, hover_action, Action, EnvSettings, EpisodeConfig, EvalRecord, RacingEnvState};
use crate::track::Track;

pub trait Pilot: Sync {
    fn act(&self, s: &RacingEnvState) -> Action;
}

pub struct HoverPilot {
    action: Action,
}

impl HoverPilot {
    pub fn new(env: &EnvSettings) -> Self {
        Self {
            action: hover_action(&env.sim),
        }
    }
}

impl Pilot for HoverPilot {
    fn act(&self, _s: &RacingEnvState) -> Action {
        self.action
    }
}

/// Waypoint-following controller with full state access: funnels toward
/// each gate along its normal, converts the desired acceleration into a
/// collective thrust and attitude, and tracks the attitude with body rates.
#[derive(Debug, Clone)]
pub struct ScriptedPilot {
    pub env: EnvSettings,
    pub cruise_speed: f64,
    pub k_vel: f64,
    pub k_att: f64,
}

impl ScriptedPilot {
    pub fn new(env: &EnvSettings) -> Self {
        Self {
            env: *env,
            cruise_speed: 3.0,
            k_vel: 3.0,
            k_att: 8.0,
        }
    }
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

impl Pilot for ScriptedPilot {
    fn act(&self, s: &RacingEnvState) -> Action {
        let p = &self.env.sim;
        let q = &s.quad;
        let gate = s.gate(s.next_gate.min(s.gate_count() - 1));
        let n = gate.normal();
        let depth = -gate.signed_distance(&q.p);
        // aim on the gate axis, closer to the gate as the drone approaches
        let aim = gate.position - n * (0.4 * depth.max(0.0)) + n * 0.6;
        let to_aim = aim - q.p;
        let lateral = (q.p - gate.position) - n * gate.signed_distance(&q.p);
        let speed = self.cruise_speed / (1.0 + 0.5 * lateral.norm());
        let v_des = to_aim.normalize() * speed;
        let acc = (v_des - q.v) * self.k_vel + q.v * p.drag_coeff + Vector3::new(0.0, 0.0, p.g);
        let z_des = acc.normalize();
        let heading = Vector3::new(gate.yaw.cos(), gate.yaw.sin(), 0.0);
        let y_des = z_des.cross(&heading).normalize();
        let x_des = y_des.cross(&z_des);
        let r_des = Matrix3::from_columns(&[x_des, y_des, z_des]);
        let e_r = vee(&(r_des.transpose() * q.r - q.r.transpose() * r_des)) * 0.5;
        let rates = -e_r * self.k_att;
        let thrust = acc.dot(&q.r.column(2).into_owned()).clamp(0.0, p.thrust_max);
        [
            thrust / p.thrust_max * 2.0 - 1.0,
            (rates.x / p.rate_max).clamp(-1.0, 1.0),
            (rates.y / p.rate_max).clamp(-1.0, 1.0),
            (rates.z / p.rate_max).clamp(-1.0, 1.0),
        ]
    }
}

pub fn fly_episode(pilot: &dyn Pilot, mut state: RacingEnvState, env: &EnvSettings) -> Result<EvalRecord> {
    while !state.done {
        let a = pilot.act(&state);
        state.step(&a, env)?;
    }
    Ok(EvalRecord::from_state(&state))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEvaluation {
    pub success_rate: f64,
    pub mean_lap_time: Option<f64>,
    pub records: Vec<EvalRecord>,
}

impl PolicyEvaluation {
    pub fn from_records(records: Vec<EvalRecord>) -> Self {
        let laps: Vec<f64> = records.iter().filter(|r| r.success()).filter_map(|r| r.lap_time).collect();
        let success_rate = laps.len() as f64 / records.len().max(1) as f64;
        let mean_lap_time = if laps.is_empty() {
            None
        } else {
            Some(laps.iter().sum::<f64>() / laps.len() as f64)
        };
        Self {
            success_rate,
            mean_lap_time,
            records,
        }
    }
}

/// Flies `n_trials` deterministic episodes that differ only in start noise.
/// Trial `k` draws its start from its own stream, so the result does not
/// depend on how trials are scheduled.
pub fn evaluate_policy(
    pilot: &dyn Pilot,
    track: &Track,
    n_trials: usize,
    start_noise: f64,
    seed: u64,
    env: &EnvSettings,
    parallel: bool,
) -> Result<PolicyEvaluation> {
    assert!(n_trials >= 1, "n_trials must be at least 1");
    let episode = EpisodeConfig {
        start_noise,
        ..env.episode
    };
    let run = |k: usize| {
        let mut rng = stream_rng(seed, streams::EVAL_BASE + k as u64);
        fly_episode(pilot, env_reset(track, &mut rng, &episode, &env.sim), env)
    };
    let records: Result<Vec<EvalRecord>> = if parallel {
        (0..n_trials).into_par_iter().map(run).collect()
    } else {
        (0..n_trials).map(run).collect()
    };
    Ok(PolicyEvaluation::from_records(records?))
}
