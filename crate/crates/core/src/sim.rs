//! Rigid-body quadrotor with collective-thrust / body-rate commands and the
//! gate-racing environment built on top of it.

use std::io::Write;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::track::{classify_crossing, plane_crossing, Crossing, Gate, Track};

pub const ACTION_DIM: usize = 4;
pub type Action = [f64; ACTION_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadState {
    pub p: Vector3<f64>,
    /// Body-to-world rotation.
    pub r: Matrix3<f64>,
    pub v: Vector3<f64>,
    /// Body rates.
    pub omega: Vector3<f64>,
}

impl QuadState {
    pub fn hover_at(p: Vector3<f64>, yaw: f64) -> Self {
        Self {
            p,
            r: *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix(),
            v: Vector3::zeros(),
            omega: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.r.iter()).chain(self.v.iter()).chain(self.omega.iter()).all(|x| x.is_finite())
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Command {
    /// Mass-normalized collective thrust along body z, m/s^2.
    pub thrust: f64,
    pub rates: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    pub mass: f64,
    pub thrust_max: f64,
    pub rate_max: f64,
    pub rate_tau: f64,
    pub drag_coeff: f64,
    pub g: f64,
    pub dt_sim: f64,
    pub control_decimation: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        let g = 9.81;
        Self {
            mass: 0.8,
            thrust_max: 4.0 * g,
            rate_max: 10.0,
            rate_tau: 0.05,
            drag_coeff: 0.3,
            g,
            dt_sim: 0.01,
            control_decimation: 2,
        }
    }
}

impl SimParams {
    pub fn dt_control(&self) -> f64 {
        self.dt_sim * self.control_decimation as f64
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.mass, self.thrust_max, self.rate_max, self.rate_tau, self.drag_coeff, self.g, self.dt_sim];
        if positive.iter().any(|x| !(*x > 0.0)) || self.control_decimation == 0 {
            return Err(Error::Config("sim parameters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDerivative {
    pub dp: Vector3<f64>,
    pub dr: Matrix3<f64>,
    pub dv: Vector3<f64>,
    pub domega: Vector3<f64>,
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

pub fn dynamics_derivative(s: &QuadState, c: &Command, params: &SimParams) -> StateDerivative {
    StateDerivative {
        dp: s.v,
        dv: s.r * Vector3::new(0.0, 0.0, c.thrust) - Vector3::new(0.0, 0.0, params.g) - s.v * params.drag_coeff,
        dr: s.r * skew(&s.omega),
        domega: (c.rates - s.omega) / params.rate_tau,
    }
}

fn advance(s: &QuadState, d: &StateDerivative, h: f64) -> QuadState {
    QuadState {
        p: s.p + d.dp * h,
        r: s.r + d.dr * h,
        v: s.v + d.dv * h,
        omega: s.omega + d.domega * h,
    }
}

/// Gram-Schmidt on the first two columns; the third is their cross product.
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let x = r.column(0).normalize();
    let y0 = r.column(1) - x * x.dot(&r.column(1));
    let y = y0.normalize();
    let z = x.cross(&y);
    Matrix3::from_columns(&[x, y, z])
}

/// One RK4 step of length `dt_sim`.
pub fn integrate_step(s: &QuadState, c: &Command, params: &SimParams) -> Result<QuadState> {
    let h = params.dt_sim;
    let k1 = dynamics_derivative(s, c, params);
    let k2 = dynamics_derivative(&advance(s, &k1, h / 2.0), c, params);
    let k3 = dynamics_derivative(&advance(s, &k2, h / 2.0), c, params);
    let k4 = dynamics_derivative(&advance(s, &k3, h), c, params);
    let w = h / 6.0;
    let next = QuadState {
        p: s.p + (k1.dp + (k2.dp + k3.dp) * 2.0 + k4.dp) * w,
        r: orthonormalize(&(s.r + (k1.dr + (k2.dr + k3.dr) * 2.0 + k4.dr) * w)),
        v: s.v + (k1.dv + (k2.dv + k3.dv) * 2.0 + k4.dv) * w,
        omega: s.omega + (k1.domega + (k2.domega + k3.domega) * 2.0 + k4.domega) * w,
    };
    if !next.is_finite() {
        return Err(Error::NonFinite("quadrotor state after integration".into()));
    }
    Ok(next)
}

/// Affine map from the policy's [-1, 1]^4 box onto the command bounds.
pub fn action_to_command(a: &Action, params: &SimParams) -> Command {
    let c = a.map(|x| x.clamp(-1.0, 1.0));
    Command {
        thrust: (c[0] + 1.0) * 0.5 * params.thrust_max,
        rates: Vector3::new(c[1], c[2], c[3]) * params.rate_max,
    }
}

pub fn hover_action(params: &SimParams) -> Action {
    [2.0 * params.g / params.thrust_max - 1.0, 0.0, 0.0, 0.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardCoefficients {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub alpha5: f64,
}

impl Default for RewardCoefficients {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: -2e-4,
            alpha3: -2e-4,
            alpha4: 5.0,
            alpha5: -5.0,
        }
    }
}

impl RewardCoefficients {
    pub fn validate(&self) -> Result<()> {
        if self.alpha1 < 0.0 || self.alpha4 < 0.0 || self.alpha2 > 0.0 || self.alpha3 > 0.0 || self.alpha5 > 0.0 {
            return Err(Error::Config(
                "reward signs: alpha1, alpha4 >= 0 and alpha2, alpha3, alpha5 <= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    pub progress: f64,
    pub action: f64,
    pub body_rate: f64,
    pub pass: f64,
    pub crash: f64,
}

impl RewardTerms {
    pub fn total(&self) -> f64 {
        self.progress + self.action + self.body_rate + self.pass + self.crash
    }
}

#[allow(clippy::too_many_arguments)]
pub fn reward_terms(
    prev_d: f64,
    d: f64,
    u: &Action,
    u_prev: &Action,
    omega: &Vector3<f64>,
    passed: bool,
    crashed: bool,
    cfg: &RewardCoefficients,
) -> RewardTerms {
    let du = u.iter().zip(u_prev).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    RewardTerms {
        progress: cfg.alpha1 * (prev_d - d),
        action: cfg.alpha2 * du,
        body_rate: cfg.alpha3 * omega.norm(),
        pass: if passed { cfg.alpha4 } else { 0.0 },
        crash: if crashed { cfg.alpha5 } else { 0.0 },
    }
}

#[allow(clippy::too_many_arguments)]
pub fn compute_reward(
    prev_d: f64,
    d: f64,
    u: &Action,
    u_prev: &Action,
    omega: &Vector3<f64>,
    passed: bool,
    crashed: bool,
    cfg: &RewardCoefficients,
) -> f64 {
    reward_terms(prev_d, d, u, u_prev, omega, passed, crashed, cfg).total()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DoneReason {
    Running,
    CrashGate,
    CrashGround,
    OutOfArena,
    Timeout,
    LapComplete,
}

impl DoneReason {
    pub fn is_crash(self) -> bool {
        matches!(self, DoneReason::CrashGate | DoneReason::CrashGround | DoneReason::OutOfArena)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DoneReason::Running => "running",
            DoneReason::CrashGate => "crash_gate",
            DoneReason::CrashGround => "crash_ground",
            DoneReason::OutOfArena => "out_of_arena",
            DoneReason::Timeout => "timeout",
            DoneReason::LapComplete => "lap_complete",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub t_max: f64,
    pub arena_margin: f64,
    pub start_offset: f64,
    pub start_noise: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            t_max: 30.0,
            arena_margin: 2.0,
            start_offset: 1.5,
            start_noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RacingEnvState {
    pub quad: QuadState,
    pub track: Track,
    pub next_gate: usize,
    pub gates_passed: usize,
    pub pass_errors: Vec<f64>,
    pub t: f64,
    pub prev_action: Action,
    pub done: bool,
    pub done_reason: DoneReason,
    pub lap_time: Option<f64>,
    pub episode_reward: f64,
    pub steps: usize,
}

/// Outcome of one finished episode; `pass_errors` always has one entry per
/// gate, with distance-to-go from the final position for gates never passed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub gates_passed: usize,
    pub pass_errors: Vec<f64>,
    pub lap_time: Option<f64>,
    pub crashed: bool,
    pub done_reason: DoneReason,
    pub episode_reward: f64,
    pub steps: usize,
}

impl EvalRecord {
    pub fn from_state(s: &RacingEnvState) -> Self {
        let mut errors = s.pass_errors.clone();
        for i in errors.len()..s.track.len() {
            errors.push((s.quad.p - s.track.gate_at(i, s.t).position).norm());
        }
        Self {
            gates_passed: s.gates_passed,
            pass_errors: errors,
            lap_time: s.lap_time,
            crashed: s.done_reason.is_crash(),
            done_reason: s.done_reason,
            episode_reward: s.episode_reward,
            steps: s.steps,
        }
    }

    pub fn success(&self) -> bool {
        self.done_reason == DoneReason::LapComplete
    }

    pub fn mean_pass_error(&self) -> f64 {
        if self.pass_errors.is_empty() {
            0.0
        } else {
            self.pass_errors.iter().sum::<f64>() / self.pass_errors.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub terms: RewardTerms,
    pub passed: bool,
    pub crossing: Option<Crossing>,
    pub done_reason: DoneReason,
}

pub fn start_pose(track: &Track, offset: f64) -> (Vector3<f64>, f64) {
    let g0 = track.gate_at(0, 0.0);
    (g0.position - g0.normal() * offset, g0.yaw)
}

pub fn env_reset(track: &Track, rng: &mut ChaCha8Rng, cfg: &EpisodeConfig, params: &SimParams) -> RacingEnvState {
    let (mut p, yaw) = start_pose(track, cfg.start_offset);
    if cfg.start_noise > 0.0 {
        for i in 0..3 {
            p[i] += rng.random_range(-cfg.start_noise..=cfg.start_noise);
        }
    }
    RacingEnvState {
        quad: QuadState::hover_at(p, yaw),
        track: track.clone(),
        next_gate: 0,
        gates_passed: 0,
        pass_errors: Vec::with_capacity(track.len()),
        t: 0.0,
        prev_action: hover_action(params),
        done: false,
        done_reason: DoneReason::Running,
        lap_time: None,
        episode_reward: 0.0,
        steps: 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct EnvSettings {
    pub sim: SimParams,
    pub reward: RewardCoefficients,
    pub episode: EpisodeConfig,
}

impl RacingEnvState {
    pub fn gate_count(&self) -> usize {
        self.track.len()
    }

    /// Pose of gate `i` at the current time.
    pub fn gate(&self, i: usize) -> Gate {
        self.track.gate_at(i, self.t)
    }

    fn out_of_arena(&self, margin: f64) -> bool {
        let p = &self.quad.p;
        (0..3).any(|i| p[i] < self.track.arena_min[i] - margin || p[i] > self.track.arena_max[i] + margin)
    }

    /// Advances one control step.
    pub fn step(&mut self, action: &Action, env: &EnvSettings) -> Result<(f64, StepInfo)> {
        if self.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        let params = &env.sim;
        let u = action.map(|x| x.clamp(-1.0, 1.0));
        let cmd = action_to_command(&u, params);
        let target_idx = self.next_gate;
        let target = self.gate(target_idx);
        let prev_d = (self.quad.p - target.position).norm();

        let mut passed = false;
        let mut crossing = None;
        let mut reason = DoneReason::Running;
        let mut gate = target;
        for k in 0..params.control_decimation {
            let before = self.quad.p;
            self.quad = integrate_step(&self.quad, &cmd, params)?;
            let t_sub = self.t + k as f64 * params.dt_sim;
            if let Some((_, offset)) = plane_crossing(&gate, &before, &self.quad.p) {
                let kind = classify_crossing(&gate, &offset);
                crossing = Some(kind);
                match kind {
                    Crossing::Pass => {
                        passed = true;
                        self.pass_errors.push(offset.norm());
                        self.gates_passed += 1;
                        self.next_gate += 1;
                        if self.next_gate == self.track.len() {
                            let sa = gate.signed_distance(&before);
                            let sb = gate.signed_distance(&self.quad.p);
                            let frac = sa / (sa - sb);
                            self.lap_time = Some(t_sub + frac * params.dt_sim);
                            reason = DoneReason::LapComplete;
                            break;
                        }
                        gate = self.gate(self.next_gate);
                    }
                    Crossing::FrameHit => {
                        reason = DoneReason::CrashGate;
                        break;
                    }
                    Crossing::Miss => {}
                }
            }
            if self.quad.p.z <= 0.0 {
                reason = DoneReason::CrashGround;
                break;
            }
            if self.out_of_arena(env.episode.arena_margin) {
                reason = DoneReason::OutOfArena;
                break;
            }
        }
        self.t += params.dt_control();
        self.steps += 1;
        if reason == DoneReason::Running && self.t >= env.episode.t_max - 1e-9 {
            reason = DoneReason::Timeout;
        }
        let d = (self.quad.p - target.position).norm();
        let terms = reward_terms(
            prev_d,
            d,
            &u,
            &self.prev_action,
            &self.quad.omega,
            passed,
            reason.is_crash(),
            &env.reward,
        );
        let r = terms.total();
        self.episode_reward += r;
        self.prev_action = u;
        if reason != DoneReason::Running {
            self.done = true;
            self.done_reason = reason;
        }
        Ok((
            r,
            StepInfo {
                terms,
                passed,
                crossing,
                done_reason: reason,
            },
        ))
    }
}

/// Writes an episode trace as CSV.
pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub const HEADER: &'static str =
        "t,px,py,pz,vx,vy,vz,qw,qx,qy,qz,a0,a1,a2,a3,reward,next_gate";

    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "{}", Self::HEADER)?;
        Ok(Self { out })
    }

    pub fn row(&mut self, s: &RacingEnvState, action: &Action, reward: f64) -> std::io::Result<()> {
        let q = s.quad.quaternion();
        let (p, v) = (s.quad.p, s.quad.v);
        writeln!(
            self.out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.t, p.x, p.y, p.z, v.x, v.y, v.z, q.w, q.i, q.j, q.k, action[0], action[1], action[2], action[3], reward,
            s.next_gate
        )
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
