//! The environment policy: it watches how the racer does on each training
//! track, nudges gate poses by bounded deltas, is paid by where the track
//! ranks among its siblings, and learns off-policy with soft actor-critic.

use std::f64::consts::PI;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, Mlp};
use crate::racing::log1m_tanh_sq;
use crate::sim::EvalRecord;
use crate::track::{validate_track, wrap_angle, Track, Violation};

/// Per-gate delta bounds: x, y, z in metres, yaw in radians.
pub const GATE_DELTA_BOUNDS: [f64; 4] = [1.0, 1.0, 0.2, PI / 30.0];

pub fn env_obs_dim(n_gates: usize) -> usize {
    5 * n_gates
}

pub fn env_act_dim(n_gates: usize) -> usize {
    4 * n_gates
}

/// `[x, y, z, yaw] per gate, then one pass error per gate`.
pub fn build_env_observation(track: &Track, record: &EvalRecord) -> Result<Vec<f64>> {
    if record.pass_errors.len() != track.len() {
        return Err(Error::Contract(format!(
            "record has {} pass errors for a {}-gate track",
            record.pass_errors.len(),
            track.len()
        )));
    }
    let mut o = Vec::with_capacity(env_obs_dim(track.len()));
    for g in &track.gates {
        o.extend_from_slice(&[g.position.x, g.position.y, g.position.z, g.yaw]);
    }
    o.extend_from_slice(&record.pass_errors);
    Ok(o)
}

/// Maps a squashed action in `[-1, 1]^(4N)` to gate deltas.
pub fn scale_env_action(u: &[f64]) -> Vec<f64> {
    u.iter().enumerate().map(|(i, x)| x * GATE_DELTA_BOUNDS[i % 4]).collect()
}

/// Adds per-gate deltas `[dx, dy, dz, dyaw]*`, clips positions to the arena
/// and wraps yaws. Gates that end up too close to a neighbour have their
/// position delta reverted, scanning violations in gate order, until the
/// layout is valid again. Returns the new track and the number of reverted
/// gates.
pub fn apply_env_action(track: &Track, deltas: &[f64], min_spacing: f64) -> (Track, usize) {
    assert_eq!(deltas.len(), env_act_dim(track.len()), "one delta block per gate");
    let mut out = track.clone();
    for (i, g) in out.gates.iter_mut().enumerate() {
        let d = &deltas[4 * i..4 * i + 4];
        let p = g.position + nalgebra::Vector3::new(d[0], d[1], d[2]);
        g.position = track.clamp_to_arena(&p);
        g.yaw = wrap_angle(g.yaw + d[3]);
    }
    let mut reverted = vec![false; out.len()];
    loop {
        let spacing = validate_track(&out, min_spacing).into_iter().find_map(|v| match v {
            Violation::Spacing { a, b } => Some((a, b)),
            _ => None,
        });
        let Some((a, b)) = spacing else { break };
        let victim = if !reverted[b] {
            b
        } else if !reverted[a] {
            a
        } else {
            // both already at their original spots: the input was invalid
            break;
        };
        out.gates[victim].position = track.gates[victim].position;
        reverted[victim] = true;
    }
    (out, reverted.iter().filter(|&&r| r).count())
}

/// Rank 1 is the best run: most gates passed, then smallest mean pass error,
/// then lowest environment index.
pub fn rank_environments(records: &[EvalRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&i, &j| {
        records[j]
            .gates_passed
            .cmp(&records[i].gates_passed)
            .then(records[i].mean_pass_error().total_cmp(&records[j].mean_pass_error()))
            .then(i.cmp(&j))
    });
    let mut ranks = vec![0; records.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingConfig {
    pub reward_scale: f64,
    pub r_lower: usize,
    pub r_upper: usize,
    pub n_env: usize,
}

impl RankingConfig {
    /// Thresholds at `ceil(pct/100 * n_env)`, computed in integers.
    pub fn from_percentiles(n_env: usize, lower_pct: usize, upper_pct: usize, reward_scale: f64) -> Result<Self> {
        let ceil_pct = |p: usize| (p * n_env).div_ceil(100);
        let cfg = Self {
            reward_scale,
            r_lower: ceil_pct(lower_pct),
            r_upper: ceil_pct(upper_pct),
            n_env,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.r_lower && self.r_lower < self.r_upper && self.r_upper <= self.n_env) {
            return Err(Error::Config(format!(
                "ranking thresholds need 1 <= r_lower < r_upper <= n_env (got {}, {}, {})",
                self.r_lower, self.r_upper, self.n_env
            )));
        }
        if !(self.reward_scale > 0.0) {
            return Err(Error::Config("ranking reward scale must be positive".into()));
        }
        Ok(())
    }
}

pub fn ranking_reward(rank: usize, cfg: &RankingConfig) -> Result<f64> {
    if rank < 1 || rank > cfg.n_env {
        return Err(Error::Contract(format!("rank {rank} outside 1..={}", cfg.n_env)));
    }
    let r = cfg.reward_scale;
    Ok(if rank > cfg.r_upper {
        r * (cfg.n_env - rank) as f64 / (cfg.n_env - cfg.r_upper) as f64
    } else if rank >= cfg.r_lower {
        r
    } else {
        r * rank as f64 / cfg.r_lower as f64
    })
}

/// True when the last three evaluations of an environment all failed.
pub fn stuck_reset_check(sr_history: &[f64]) -> bool {
    sr_history.len() >= 3 && sr_history[sr_history.len() - 3..].iter().all(|&s| s == 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SACConfig {
    pub gamma: f64,
    pub tau: f64,
    pub alpha: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub capacity: usize,
    pub batch: usize,
    pub gradient_steps: usize,
    pub hidden: Vec<usize>,
}

impl Default for SACConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            alpha: 1.0,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            capacity: 100_000,
            batch: 256,
            gradient_steps: 100,
            hidden: vec![64, 64],
        }
    }
}

impl SACConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.tau) || self.alpha < 0.0 {
            return Err(Error::Config("sac: gamma, tau in [0,1] and alpha >= 0".into()));
        }
        if self.capacity == 0 || self.batch == 0 || self.hidden.is_empty() {
            return Err(Error::Config("sac: capacity, batch and hidden sizes must be non-zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    /// Squashed action in `[-1, 1]`.
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::new(),
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn sample_indices(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }
}

const LOG_STD_MIN: f64 = -20.0;
const LOG_STD_MAX: f64 = 2.0;

/// `y = r + gamma * (min_q_next - alpha * logp_next)`; the shaping MDP is
/// continuing, so there is no terminal mask.
pub fn td_target(reward: f64, gamma: f64, min_q_next: f64, alpha: f64, logp_next: f64) -> f64 {
    reward + gamma * (min_q_next - alpha * logp_next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacAgent {
    pub obs_dim: usize,
    pub act_dim: usize,
    /// Outputs `[mean, log_std]` per action dimension.
    pub actor: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub actor_opt: Adam,
    pub q1_opt: Adam,
    pub q2_opt: Adam,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SacStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub mean_q: f64,
    pub mean_log_prob: f64,
}

struct Sample {
    u: Array2<f64>,
    log_probs: Vec<f64>,
}

impl SacAgent {
    pub fn new(obs_dim: usize, act_dim: usize, cfg: &SACConfig, rng: &mut ChaCha8Rng) -> Self {
        let sizes = |inp: usize, out: usize| {
            let mut s = vec![inp];
            s.extend(&cfg.hidden);
            s.push(out);
            s
        };
        let gain = 2f64.sqrt();
        let actor = Mlp::orthogonal(&sizes(obs_dim, 2 * act_dim), gain, 0.01, rng);
        let q1 = Mlp::orthogonal(&sizes(obs_dim + act_dim, 1), gain, 1.0, rng);
        let q2 = Mlp::orthogonal(&sizes(obs_dim + act_dim, 1), gain, 1.0, rng);
        Self {
            obs_dim,
            act_dim,
            actor_opt: Adam::for_tensors(cfg.lr_actor, &actor.tensors()),
            q1_opt: Adam::for_tensors(cfg.lr_critic, &q1.tensors()),
            q2_opt: Adam::for_tensors(cfg.lr_critic, &q2.tensors()),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor,
            q1,
            q2,
        }
    }

    fn heads(&self, out: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mean = out.slice(s![.., ..self.act_dim]).to_owned();
        let log_std = out.slice(s![.., self.act_dim..]).mapv(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX));
        (mean, log_std)
    }

    fn sample(&self, obs: ArrayView2<f64>, rng: &mut ChaCha8Rng) -> Result<Sample> {
        let (mean, log_std) = self.heads(&self.actor.forward(obs)?);
        let mut u = Array2::zeros(mean.dim());
        let mut log_probs = vec![0.0; mean.nrows()];
        for i in 0..mean.nrows() {
            for j in 0..self.act_dim {
                let e: f64 = rng.sample(StandardNormal);
                let z = mean[[i, j]] + log_std[[i, j]].exp() * e;
                u[[i, j]] = z.tanh();
                log_probs[i] += -0.5 * e * e - log_std[[i, j]] - 0.5 * (2.0 * PI).ln() - log1m_tanh_sq(z);
            }
        }
        Ok(Sample { u, log_probs })
    }

    /// Squashed actions in `[-1, 1]`; scale with [`scale_env_action`].
    pub fn act(&self, obs: ArrayView2<f64>, rng: &mut ChaCha8Rng, deterministic: bool) -> Result<Array2<f64>> {
        if obs.ncols() != self.obs_dim {
            return Err(Error::Shape(format!("env observation width {} != {}", obs.ncols(), self.obs_dim)));
        }
        if deterministic {
            let (mean, _) = self.heads(&self.actor.forward(obs)?);
            Ok(mean.mapv(f64::tanh))
        } else {
            Ok(self.sample(obs, rng)?.u)
        }
    }
}

/// Bounded gate deltas for a batch of environment observations.
pub fn env_policy_act(agent: &SacAgent, obs: ArrayView2<f64>, rng: &mut ChaCha8Rng, deterministic: bool) -> Result<Array2<f64>> {
    let u = agent.act(obs, rng, deterministic)?;
    Ok(Array2::from_shape_fn(u.dim(), |(i, j)| u[[i, j]] * GATE_DELTA_BOUNDS[j % 4]))
}

fn rows(buf: &ReplayBuffer, idx: &[usize], f: impl Fn(&Transition) -> &[f64]) -> Array2<f64> {
    let w = f(buf.get(idx[0])).len();
    let mut m = Array2::zeros((idx.len(), w));
    for (r, &i) in idx.iter().enumerate() {
        m.row_mut(r).assign(&ndarray::ArrayView1::from(f(buf.get(i))));
    }
    m
}

fn critic_step(q: &mut Mlp, opt: &mut Adam, input: ArrayView2<f64>, y: &[f64]) -> Result<f64> {
    let b = y.len() as f64;
    let cache = q.forward_cached(input)?;
    let out = cache.output();
    let mut g = Array2::zeros((y.len(), 1));
    let mut loss = 0.0;
    for i in 0..y.len() {
        let d = out[[i, 0]] - y[i];
        loss += d * d / b;
        g[[i, 0]] = 2.0 * d / b;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("critic loss".into()));
    }
    let (grad, _) = q.backward(&cache, g.view())?;
    opt.step(&mut q.tensors_mut(), &grad.tensors())?;
    Ok(loss)
}

/// Actor loss `mean(alpha * log pi - min(Q1, Q2))` for the given standard
/// normal draws, with its gradient through the reparameterization.
pub struct ActorStep {
    pub loss: f64,
    pub mean_q: f64,
    pub mean_log_prob: f64,
    pub grad: Mlp,
}

pub fn actor_loss_and_grad(agent: &SacAgent, obs: ArrayView2<f64>, eps: ArrayView2<f64>, alpha: f64) -> Result<ActorStep> {
    let ad = agent.act_dim;
    let n = obs.nrows();
    let b = n as f64;
    let cache = agent.actor.forward_cached(obs)?;
    let raw = cache.output();
    let mut u = Array2::zeros((n, ad));
    let mut logp = vec![0.0; n];
    for i in 0..n {
        for j in 0..ad {
            let ls = raw[[i, ad + j]].clamp(LOG_STD_MIN, LOG_STD_MAX);
            let e = eps[[i, j]];
            let z = raw[[i, j]] + ls.exp() * e;
            u[[i, j]] = z.tanh();
            logp[i] += -0.5 * e * e - ls - 0.5 * (2.0 * PI).ln() - log1m_tanh_sq(z);
        }
    }
    let pi_in = concatenate![Axis(1), obs, u];
    let c1 = agent.q1.forward_cached(pi_in.view())?;
    let c2 = agent.q2.forward_cached(pi_in.view())?;
    let mut sel1 = Array2::zeros((n, 1));
    let mut sel2 = Array2::zeros((n, 1));
    let mut loss = 0.0;
    let mut mean_q = 0.0;
    for i in 0..n {
        let (a, bq) = (c1.output()[[i, 0]], c2.output()[[i, 0]]);
        let q = a.min(bq);
        if a <= bq {
            sel1[[i, 0]] = 1.0;
        } else {
            sel2[[i, 0]] = 1.0;
        }
        loss += (alpha * logp[i] - q) / b;
        mean_q += q / b;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("actor loss".into()));
    }
    let (_, dq1) = agent.q1.backward(&c1, sel1.view())?;
    let (_, dq2) = agent.q2.backward(&c2, sel2.view())?;
    let od = agent.obs_dim;
    let mut g = Array2::zeros(raw.dim());
    for i in 0..n {
        for j in 0..ad {
            let uj = u[[i, j]];
            let raw_ls = raw[[i, ad + j]];
            let sigma = raw_ls.clamp(LOG_STD_MIN, LOG_STD_MAX).exp();
            let dq_dz = (dq1[[i, od + j]] + dq2[[i, od + j]]) * (1.0 - uj * uj);
            g[[i, j]] = (alpha * 2.0 * uj - dq_dz) / b;
            if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw_ls) {
                let se = sigma * eps[[i, j]];
                g[[i, ad + j]] = (alpha * (-1.0 + 2.0 * uj * se) - dq_dz * se) / b;
            }
        }
    }
    let (grad, _) = agent.actor.backward(&cache, g.view())?;
    Ok(ActorStep {
        loss,
        mean_q,
        mean_log_prob: logp.iter().sum::<f64>() / b,
        grad,
    })
}

pub fn sac_update(agent: &mut SacAgent, buf: &ReplayBuffer, cfg: &SACConfig, rng: &mut ChaCha8Rng) -> Result<SacStats> {
    if buf.len() < cfg.batch {
        return Err(Error::Contract(format!("replay holds {} < batch {}", buf.len(), cfg.batch)));
    }
    agent.actor_opt.lr = cfg.lr_actor;
    agent.q1_opt.lr = cfg.lr_critic;
    agent.q2_opt.lr = cfg.lr_critic;
    let ad = agent.act_dim;
    let mut stats = SacStats::default();
    for _ in 0..cfg.gradient_steps {
        let idx = buf.sample_indices(cfg.batch, rng);
        let obs = rows(buf, &idx, |t| &t.obs);
        let act = rows(buf, &idx, |t| &t.action);
        let next = rows(buf, &idx, |t| &t.next_obs);

        // critics
        let next_sample = agent.sample(next.view(), rng)?;
        let next_in = concatenate![Axis(1), next, next_sample.u];
        let q1n = agent.q1_target.forward(next_in.view())?;
        let q2n = agent.q2_target.forward(next_in.view())?;
        let y: Vec<f64> = (0..idx.len())
            .map(|i| {
                td_target(
                    buf.get(idx[i]).reward,
                    cfg.gamma,
                    q1n[[i, 0]].min(q2n[[i, 0]]),
                    cfg.alpha,
                    next_sample.log_probs[i],
                )
            })
            .collect();
        let q_in = concatenate![Axis(1), obs, act];
        let l1 = critic_step(&mut agent.q1, &mut agent.q1_opt, q_in.view(), &y)?;
        let l2 = critic_step(&mut agent.q2, &mut agent.q2_opt, q_in.view(), &y)?;

        // actor, reparameterized through the updated critics
        let eps = Array2::from_shape_simple_fn((idx.len(), ad), || rng.sample(StandardNormal));
        let step = actor_loss_and_grad(agent, obs.view(), eps.view(), cfg.alpha)?;
        agent.actor_opt.step(&mut agent.actor.tensors_mut(), &step.grad.tensors())?;

        agent.q1_target.soft_update_from(&agent.q1, cfg.tau);
        agent.q2_target.soft_update_from(&agent.q2, cfg.tau);

        let k = cfg.gradient_steps as f64;
        stats.critic_loss += 0.5 * (l1 + l2) / k;
        stats.actor_loss += step.loss / k;
        stats.mean_q += step.mean_q / k;
        stats.mean_log_prob += step.mean_log_prob / k;
    }
    Ok(stats)
}
