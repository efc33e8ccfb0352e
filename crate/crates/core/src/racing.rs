//! The racing agent: observation construction, a tanh-squashed Gaussian
//! actor-critic, generalized advantage estimation and clipped-surrogate
//! policy optimization.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, read_mlp, take, take_f64, take_u32, write_mlp, Adam, Mlp};
use crate::pilot::Pilot;
use crate::sim::{Action, EvalRecord, RacingEnvState, ACTION_DIM};
use crate::track::gate_corners;
use crate::vec_env::VecEnv;

pub const OBS_DIM: usize = 40;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `[R col 0, R col 1, v, omega, a_prev, next-gate corners - p,
/// gate-after-next corners - next-gate corners]`, world frame.
pub fn build_observation(s: &RacingEnvState) -> [f64; OBS_DIM] {
    let n = s.gate_count();
    let next = s.next_gate.min(n - 1);
    let after = (next + 1) % n;
    let c1 = gate_corners(&s.gate(next));
    let c2 = gate_corners(&s.gate(after));
    let q = &s.quad;
    let mut o = [0.0; OBS_DIM];
    o[0..3].copy_from_slice(q.r.column(0).as_slice());
    o[3..6].copy_from_slice(q.r.column(1).as_slice());
    o[6..9].copy_from_slice(q.v.as_slice());
    o[9..12].copy_from_slice(q.omega.as_slice());
    o[12..16].copy_from_slice(&s.prev_action);
    for k in 0..4 {
        let d1 = c1[k] - q.p;
        let d2 = c2[k] - c1[k];
        o[16 + 3 * k..19 + 3 * k].copy_from_slice(d1.as_slice());
        o[28 + 3 * k..31 + 3 * k].copy_from_slice(d2.as_slice());
    }
    o
}

/// Running mean/variance of observations (batched parallel update).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsNormalizer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
    pub clip: f64,
}

impl ObsNormalizer {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 1e-4,
            clip: 10.0,
        }
    }

    pub fn update(&mut self, batch: ArrayView2<f64>) {
        let n = batch.nrows() as f64;
        if n == 0.0 {
            return;
        }
        let bmean = batch.mean_axis(Axis(0)).unwrap();
        let bvar = batch.var_axis(Axis(0), 0.0);
        let total = self.count + n;
        for j in 0..self.mean.len() {
            let delta = bmean[j] - self.mean[j];
            let m2 = self.var[j] * self.count + bvar[j] * n + delta * delta * self.count * n / total;
            self.mean[j] += delta * n / total;
            self.var[j] = m2 / total;
        }
        self.count = total;
    }

    pub fn normalize(&self, batch: ArrayView2<f64>) -> Array2<f64> {
        let mut out = batch.to_owned();
        for mut row in out.rows_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = ((*x - self.mean[j]) / (self.var[j] + 1e-8).sqrt()).clamp(-self.clip, self.clip);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PPOConfig {
    pub gamma: f64,
    pub lam: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub horizon: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub init_log_std: f64,
    pub hidden: Vec<usize>,
}

impl Default for PPOConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lam: 0.95,
            clip_eps: 0.2,
            epochs: 4,
            minibatch: 1024,
            horizon: 128,
            value_coef: 0.5,
            entropy_coef: 0.0,
            lr: 3e-4,
            max_grad_norm: 0.5,
            init_log_std: -0.5,
            hidden: vec![256, 256],
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lam) || !(self.clip_eps > 0.0) {
            return Err(Error::Config("ppo: gamma, lam in [0,1] and clip_eps > 0".into()));
        }
        if self.epochs == 0 || self.minibatch == 0 || self.horizon == 0 || self.hidden.is_empty() {
            return Err(Error::Config("ppo: epochs, minibatch, horizon and hidden sizes must be non-zero".into()));
        }
        Ok(())
    }
}

/// Log-density of `tanh(z)` where `z ~ N(mean, exp(log_std)^2)`, evaluated
/// from the pre-squash sample `z`.
pub fn squashed_log_prob(z: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    let mut lp = 0.0;
    for j in 0..z.len() {
        let u = (z[j] - mean[j]) / log_std[j].exp();
        lp += -0.5 * u * u - log_std[j] - 0.5 * LN_2PI;
        lp -= log1m_tanh_sq(z[j]);
    }
    lp
}

/// `ln(1 - tanh(z)^2)`, stable for large |z|.
pub fn log1m_tanh_sq(z: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - z.abs() - (-2.0 * z.abs()).exp().ln_1p())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RacingPolicy {
    pub actor: Mlp,
    pub log_std: Vec<f64>,
    pub critic: Mlp,
    pub normalizer: ObsNormalizer,
}

#[derive(Debug, Clone)]
pub struct ActOutput {
    /// Squashed actions in [-1, 1].
    pub actions: Array2<f64>,
    /// Pre-squash Gaussian samples.
    pub raw: Array2<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
}

impl RacingPolicy {
    pub fn new(cfg: &PPOConfig, rng: &mut ChaCha8Rng) -> Self {
        let sizes = |out: usize| {
            let mut s = vec![OBS_DIM];
            s.extend(&cfg.hidden);
            s.push(out);
            s
        };
        let gain = 2f64.sqrt();
        Self {
            actor: Mlp::orthogonal(&sizes(ACTION_DIM), gain, 0.01, rng),
            log_std: vec![cfg.init_log_std; ACTION_DIM],
            critic: Mlp::orthogonal(&sizes(1), gain, 1.0, rng),
            normalizer: ObsNormalizer::new(OBS_DIM),
        }
    }

    /// Acts on already-normalized observations.
    pub fn act_normalized(&self, obs: ArrayView2<f64>, rng: &mut ChaCha8Rng, deterministic: bool) -> Result<ActOutput> {
        let mean = self.actor.forward(obs)?;
        let values = self.critic.forward(obs)?.column(0).to_vec();
        let mut raw = mean.clone();
        if !deterministic {
            for mut row in raw.rows_mut() {
                for (j, z) in row.iter_mut().enumerate() {
                    let e: f64 = rng.sample(StandardNormal);
                    *z += self.log_std[j].exp() * e;
                }
            }
        }
        let log_probs = raw
            .rows()
            .into_iter()
            .zip(mean.rows())
            .map(|(z, m)| squashed_log_prob(z.as_slice().unwrap(), m.as_slice().unwrap(), &self.log_std))
            .collect();
        Ok(ActOutput {
            actions: raw.mapv(f64::tanh),
            raw,
            log_probs,
            values,
        })
    }

    /// Acts on raw observations using the (frozen) normalizer.
    pub fn act(&self, obs: ArrayView2<f64>, rng: &mut ChaCha8Rng, deterministic: bool) -> Result<ActOutput> {
        self.act_normalized(self.normalizer.normalize(obs).view(), rng, deterministic)
    }

    pub fn values(&self, obs_normalized: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.critic.forward(obs_normalized)?.column(0).to_vec())
    }

    pub fn deterministic_action(&self, obs: &[f64; OBS_DIM]) -> Action {
        let x = Array2::from_shape_vec((1, OBS_DIM), obs.to_vec()).unwrap();
        let mean = self
            .actor
            .forward(self.normalizer.normalize(x.view()).view())
            .expect("observation width is fixed");
        [0, 1, 2, 3].map(|j| mean[[0, j]].tanh())
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.actor.tensors();
        t.push(&self.log_std);
        t.extend(self.critic.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.actor.tensors_mut();
        t.push(&mut self.log_std);
        t.extend(self.critic.tensors_mut());
        t
    }

    pub fn optimizer(&self, lr: f64) -> Adam {
        Adam::for_tensors(lr, &self.tensors())
    }
}

impl Pilot for RacingPolicy {
    fn act(&self, s: &RacingEnvState) -> Action {
        self.deterministic_action(&build_observation(s))
    }
}

const POLICY_MAGIC: &[u8; 8] = b"GSHPOL\0\0";
const POLICY_VERSION: u32 = 1;

pub fn write_policy(p: &RacingPolicy) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(POLICY_MAGIC);
    out.extend_from_slice(&POLICY_VERSION.to_le_bytes());
    write_mlp(&p.actor, &mut out);
    write_mlp(&p.critic, &mut out);
    let vecs: [&[f64]; 3] = [&p.log_std, &p.normalizer.mean, &p.normalizer.var];
    for v in vecs {
        out.extend_from_slice(&(v.len() as u32).to_le_bytes());
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.extend_from_slice(&p.normalizer.count.to_le_bytes());
    out.extend_from_slice(&p.normalizer.clip.to_le_bytes());
    out
}

pub fn is_policy_blob(bytes: &[u8]) -> bool {
    bytes.starts_with(POLICY_MAGIC)
}

pub fn read_policy(bytes: &[u8]) -> Result<RacingPolicy> {
    let mut input = bytes;
    if take(&mut input, 8)? != POLICY_MAGIC {
        return Err(Error::Checkpoint("not a policy file (bad magic)".into()));
    }
    let version = take_u32(&mut input)?;
    if version != POLICY_VERSION {
        return Err(Error::Checkpoint(format!("policy file version {version} unsupported")));
    }
    let actor = read_mlp(&mut input)?;
    let critic = read_mlp(&mut input)?;
    let mut vecs = Vec::new();
    for _ in 0..3 {
        let n = take_u32(&mut input)? as usize;
        if n > 4096 {
            return Err(Error::Checkpoint("implausible vector length".into()));
        }
        vecs.push((0..n).map(|_| take_f64(&mut input)).collect::<Result<Vec<_>>>()?);
    }
    let count = take_f64(&mut input)?;
    let clip = take_f64(&mut input)?;
    if !input.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after policy".into()));
    }
    let var = vecs.pop().unwrap();
    let mean = vecs.pop().unwrap();
    let log_std = vecs.pop().unwrap();
    if actor.input_dim() != OBS_DIM || actor.output_dim() != ACTION_DIM || log_std.len() != ACTION_DIM || mean.len() != OBS_DIM {
        return Err(Error::Checkpoint("policy shapes do not match the racing task".into()));
    }
    Ok(RacingPolicy {
        actor,
        log_std,
        critic,
        normalizer: ObsNormalizer { mean, var, count, clip },
    })
}

/// Advantages and returns for one environment's trajectory segment.
/// `dones[t]` marks that the episode ended after step `t`; the value
/// following the last step is `bootstrap`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lam: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "aligned lengths");
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let keep = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * keep - values[t];
        adv[t] = delta + gamma * lam * keep * next_adv;
        next_adv = adv[t];
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Per-sample clipped surrogate loss (the negated PPO objective).
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    -(ratio * advantage).min(clipped * advantage)
}

/// Step-major rollout storage: row `t * n_env + e`.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub horizon: usize,
    pub n_env: usize,
    pub obs: Array2<f64>,
    pub raw_actions: Array2<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn compute_advantages(&mut self, bootstrap: &[f64], gamma: f64, lam: f64) {
        let (h, n) = (self.horizon, self.n_env);
        self.advantages = vec![0.0; h * n];
        self.returns = vec![0.0; h * n];
        for e in 0..n {
            let idx: Vec<usize> = (0..h).map(|t| t * n + e).collect();
            let r: Vec<f64> = idx.iter().map(|&i| self.rewards[i]).collect();
            let v: Vec<f64> = idx.iter().map(|&i| self.values[i]).collect();
            let d: Vec<bool> = idx.iter().map(|&i| self.dones[i]).collect();
            let (a, ret) = compute_gae(&r, &v, &d, bootstrap[e], gamma, lam);
            for (k, &i) in idx.iter().enumerate() {
                self.advantages[i] = a[k];
                self.returns[i] = ret[k];
            }
        }
    }
}

/// Steps every environment `horizon` times with the stochastic policy.
/// Observations are normalized with the running statistics as they stand
/// when each batch is collected (and the statistics then absorb the batch).
pub fn collect_rollout(
    policy: &mut RacingPolicy,
    venv: &mut VecEnv,
    horizon: usize,
    rng: &mut ChaCha8Rng,
    cfg: &PPOConfig,
) -> Result<(RolloutBuffer, Vec<(usize, EvalRecord)>)> {
    let n = venv.len();
    let mut buf = RolloutBuffer {
        horizon,
        n_env: n,
        obs: Array2::zeros((horizon * n, OBS_DIM)),
        raw_actions: Array2::zeros((horizon * n, ACTION_DIM)),
        log_probs: Vec::with_capacity(horizon * n),
        values: Vec::with_capacity(horizon * n),
        rewards: Vec::with_capacity(horizon * n),
        dones: Vec::with_capacity(horizon * n),
        advantages: Vec::new(),
        returns: Vec::new(),
    };
    let mut records = Vec::new();
    for t in 0..horizon {
        let raw_obs = observation_batch(venv);
        policy.normalizer.update(raw_obs.view());
        let obs = policy.normalizer.normalize(raw_obs.view());
        let out = policy.act_normalized(obs.view(), rng, false)?;
        let actions: Vec<Action> = out.actions.rows().into_iter().map(|r| [r[0], r[1], r[2], r[3]]).collect();
        let step = venv.step(&actions)?;
        buf.obs.slice_mut(ndarray::s![t * n..(t + 1) * n, ..]).assign(&obs);
        buf.raw_actions.slice_mut(ndarray::s![t * n..(t + 1) * n, ..]).assign(&out.raw);
        buf.log_probs.extend(out.log_probs);
        buf.values.extend(out.values);
        buf.rewards.extend(step.rewards);
        buf.dones.extend(step.dones);
        records.extend(step.finished);
    }
    let last = policy.normalizer.normalize(observation_batch(venv).view());
    let bootstrap = policy.values(last.view())?;
    buf.compute_advantages(&bootstrap, cfg.gamma, cfg.lam);
    Ok((buf, records))
}

pub fn observation_batch(venv: &VecEnv) -> Array2<f64> {
    let mut m = Array2::zeros((venv.len(), OBS_DIM));
    for (mut row, env) in m.rows_mut().into_iter().zip(&venv.envs) {
        row.assign(&Array1::from_vec(build_observation(env).to_vec()));
    }
    m
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    /// Advantages were left unnormalized because their spread was ~0.
    pub normalization_skipped: bool,
}

/// Loss terms and gradients for one minibatch; exposed for testing.
pub struct MinibatchLoss {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub actor_grad: Mlp,
    pub log_std_grad: Vec<f64>,
    pub critic_grad: Mlp,
}

pub fn minibatch_loss(
    policy: &RacingPolicy,
    obs: ArrayView2<f64>,
    raw: ArrayView2<f64>,
    old_log_probs: &[f64],
    advantages: &[f64],
    returns: &[f64],
    cfg: &PPOConfig,
) -> Result<MinibatchLoss> {
    let b = obs.nrows();
    let bf = b as f64;
    let actor_cache = policy.actor.forward_cached(obs)?;
    let mean = actor_cache.output();
    let std: Vec<f64> = policy.log_std.iter().map(|l| l.exp()).collect();
    let mut g_mean = Array2::zeros((b, ACTION_DIM));
    let mut g_log_std = vec![0.0; ACTION_DIM];
    let (mut pl, mut kl, mut clipped) = (0.0, 0.0, 0usize);
    for i in 0..b {
        let z = raw.row(i);
        let m = mean.row(i);
        let lp = squashed_log_prob(z.as_slice().unwrap(), m.as_slice().unwrap(), &policy.log_std);
        let log_ratio = lp - old_log_probs[i];
        let ratio = log_ratio.exp();
        let a = advantages[i];
        pl += clipped_surrogate(ratio, a, cfg.clip_eps);
        kl += (ratio - 1.0) - log_ratio;
        if (ratio - 1.0).abs() > cfg.clip_eps {
            clipped += 1;
        }
        let unclipped_active = ratio * a <= ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * a;
        if unclipped_active {
            let d_lp = -ratio * a / bf;
            for j in 0..ACTION_DIM {
                let u = (z[j] - m[j]) / std[j];
                g_mean[[i, j]] += d_lp * u / std[j];
                g_log_std[j] += d_lp * (u * u - 1.0);
            }
        }
    }
    let entropy: f64 = policy.log_std.iter().map(|l| l + 0.5 * (1.0 + LN_2PI)).sum();
    for g in g_log_std.iter_mut() {
        *g -= cfg.entropy_coef;
    }
    let (actor_grad, _) = policy.actor.backward(&actor_cache, g_mean.view())?;

    let critic_cache = policy.critic.forward_cached(obs)?;
    let v = critic_cache.output();
    let mut g_v = Array2::zeros((b, 1));
    let mut vl = 0.0;
    for i in 0..b {
        let d = v[[i, 0]] - returns[i];
        vl += d * d;
        g_v[[i, 0]] = cfg.value_coef * 2.0 * d / bf;
    }
    let (critic_grad, _) = policy.critic.backward(&critic_cache, g_v.view())?;
    let policy_loss = pl / bf;
    let value_loss = vl / bf;
    if !(policy_loss.is_finite() && value_loss.is_finite()) {
        return Err(Error::NonFinite("ppo loss".into()));
    }
    Ok(MinibatchLoss {
        policy_loss,
        value_loss,
        entropy,
        approx_kl: kl / bf,
        clip_fraction: clipped as f64 / bf,
        actor_grad,
        log_std_grad: g_log_std,
        critic_grad,
    })
}

pub fn normalize_advantages(adv: &[f64]) -> (Vec<f64>, bool) {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
    if std < 1e-8 {
        (adv.to_vec(), true)
    } else {
        (adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect(), false)
    }
}

pub fn ppo_update(
    policy: &mut RacingPolicy,
    opt: &mut Adam,
    buf: &RolloutBuffer,
    cfg: &PPOConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PpoStats> {
    let total = buf.len();
    let (adv, skipped) = normalize_advantages(&buf.advantages);
    let mut stats = PpoStats {
        normalization_skipped: skipped,
        ..Default::default()
    };
    let mut batches = 0usize;
    let mut order: Vec<usize> = (0..total).collect();
    opt.lr = cfg.lr;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch) {
            let obs = buf.obs.select(Axis(0), chunk);
            let raw = buf.raw_actions.select(Axis(0), chunk);
            let olp: Vec<f64> = chunk.iter().map(|&i| buf.log_probs[i]).collect();
            let a: Vec<f64> = chunk.iter().map(|&i| adv[i]).collect();
            let ret: Vec<f64> = chunk.iter().map(|&i| buf.returns[i]).collect();
            let mut loss = minibatch_loss(policy, obs.view(), raw.view(), &olp, &a, &ret, cfg)?;
            let mut grads = loss.actor_grad.tensors_mut();
            grads.push(&mut loss.log_std_grad);
            grads.extend(loss.critic_grad.tensors_mut());
            clip_grad_norm(&mut grads, cfg.max_grad_norm);
            let grads: Vec<&[f64]> = grads.into_iter().map(|g| &*g).collect();
            opt.step(&mut policy.tensors_mut(), &grads)?;
            stats.policy_loss += loss.policy_loss;
            stats.value_loss += loss.value_loss;
            stats.approx_kl += loss.approx_kl;
            stats.clip_fraction += loss.clip_fraction;
            stats.entropy = loss.entropy;
            batches += 1;
        }
    }
    let k = batches.max(1) as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.approx_kl /= k;
    stats.clip_fraction /= k;
    Ok(stats)
}

#[allow(dead_code)]
fn gaussian_density(x: f64, mean: f64, std: f64) -> f64 {
    (-(x - mean) * (x - mean) / (2.0 * std * std)).exp() / (std * (2.0 * PI).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets;
    use crate::rng::stream_rng;
    use crate::sim::{env_reset, EnvSettings, EpisodeConfig};
    use nalgebra::Vector3;

    fn hover_env(track: &str) -> RacingEnvState {
        let env = EnvSettings::default();
        let t = assets::load(track).unwrap();
        env_reset(&t, &mut stream_rng(0, 0), &EpisodeConfig { start_noise: 0.0, ..env.episode }, &env.sim)
    }

    #[test]
    fn observation_layout() {
        let mut s = hover_env("oval8");
        s.quad.r = nalgebra::Matrix3::identity();
        let o = build_observation(&s);
        assert_eq!(&o[0..6], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(&o[12..16], &s.prev_action);
        // drone at gate-0 center: dp1 is the corner pattern
        let g0 = s.gate(0);
        s.quad.p = g0.position;
        let o = build_observation(&s);
        for (k, c) in gate_corners(&g0).iter().enumerate() {
            let d = c - g0.position;
            for a in 0..3 {
                assert!((o[16 + 3 * k + a] - d[a]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn coincident_gates_have_zero_dp2() {
        let mut s = hover_env("oval8");
        let g0 = s.track.gates[0];
        s.track.gates[1].position = g0.position;
        s.track.gates[1].yaw = g0.yaw;
        let o = build_observation(&s);
        assert!(o[28..40].iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn last_gate_wraps_to_first() {
        let mut s = hover_env("mini_oval4");
        s.next_gate = 3;
        let o = build_observation(&s);
        let c3 = gate_corners(&s.gate(3));
        let c0 = gate_corners(&s.gate(0));
        assert!((o[28] - (c0[0].x - c3[0].x)).abs() < 1e-15);
    }

    #[test]
    fn observation_translation_invariance() {
        let s = hover_env("kidney");
        let mut t = s.clone();
        let shift = Vector3::new(3.0, -2.0, 0.7);
        t.quad.p += shift;
        for g in t.track.gates.iter_mut() {
            g.position += shift;
        }
        let (a, b) = (build_observation(&s), build_observation(&t));
        for i in 0..OBS_DIM {
            assert!((a[i] - b[i]).abs() < 1e-12, "index {i}");
        }
    }

    #[test]
    fn zero_policy_acts_zero_and_deterministic_is_repeatable() {
        let cfg = PPOConfig { hidden: vec![8], ..Default::default() };
        let mut p = RacingPolicy::new(&cfg, &mut stream_rng(0, 0));
        p.actor = Mlp::zeros(&[OBS_DIM, 8, ACTION_DIM]);
        let obs = Array2::from_elem((3, OBS_DIM), 0.3);
        let out = p.act(obs.view(), &mut stream_rng(1, 1), true).unwrap();
        assert!(out.actions.iter().all(|&a| a == 0.0));
        let p = RacingPolicy::new(&cfg, &mut stream_rng(0, 0));
        let a = p.act(obs.view(), &mut stream_rng(1, 1), true).unwrap();
        let b = p.act(obs.view(), &mut stream_rng(2, 2), true).unwrap();
        assert_eq!(a.actions, b.actions);
    }

    #[test]
    fn log_prob_matches_change_of_variables() {
        let cfg = PPOConfig { hidden: vec![8], init_log_std: -0.3, ..Default::default() };
        let p = RacingPolicy::new(&cfg, &mut stream_rng(3, 0));
        let obs = Array2::from_shape_fn((5, OBS_DIM), |(i, j)| ((i * 7 + j) as f64 * 0.37).sin());
        let out = p.act(obs.view(), &mut stream_rng(4, 0), false).unwrap();
        let mean = p.actor.forward(p.normalizer.normalize(obs.view()).view()).unwrap();
        for i in 0..5 {
            // density of y = tanh(z): p_z(atanh y) / (1 - y^2)
            let mut lp = 0.0;
            for j in 0..ACTION_DIM {
                let y = out.actions[[i, j]];
                let z = out.raw[[i, j]];
                let pz = gaussian_density(z, mean[[i, j]], p.log_std[j].exp());
                lp += (pz / (1.0 - y * y)).ln();
            }
            assert!((lp - out.log_probs[i]).abs() < 1e-9, "{lp} vs {}", out.log_probs[i]);
        }
    }

    #[test]
    fn gae_examples() {
        let (a, _) = compute_gae(&[1.0, 1.0, 1.0], &[0.0; 3], &[false; 3], 0.0, 0.9, 0.95);
        assert!((a[2] - 1.0).abs() < 1e-12);
        assert!((a[1] - 1.855).abs() < 1e-12);
        assert!((a[0] - 2.586025).abs() < 1e-12);

        let r = [0.5, -1.0, 2.0];
        let v = [0.2, 0.1, -0.3];
        let (a, ret) = compute_gae(&r, &v, &[false; 3], 0.7, 0.9, 0.0);
        let deltas = [0.5 + 0.9 * 0.1 - 0.2, -1.0 + 0.9 * -0.3 - 0.1, 2.0 + 0.9 * 0.7 + 0.3];
        for i in 0..3 {
            assert_eq!(a[i], deltas[i]);
            assert_eq!(ret[i], a[i] + v[i]);
        }

        let (a1, _) = compute_gae(&[1.0, 2.0, 3.0], &[0.0; 3], &[false, true, false], 5.0, 0.9, 0.95);
        let (a2, _) = compute_gae(&[1.0, 2.0, 30.0], &[0.0; 3], &[false, true, false], -8.0, 0.9, 0.95);
        assert_eq!(a1[0], a2[0]);
        assert_eq!(a1[1], a2[1]);
    }

    #[test]
    fn gae_full_horizon_is_reward_to_go_minus_baseline() {
        let r = [0.3, -0.2, 1.1, 0.4];
        let v = [0.5, 0.1, -0.2, 0.3];
        let (a, _) = compute_gae(&r, &v, &[false; 4], 0.0, 1.0, 1.0);
        for t in 0..4 {
            let rtg: f64 = r[t..].iter().sum();
            assert!((a[t] - (rtg - v[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn surrogate_hand_values() {
        // (ratio 1.5, A 2) -> clipped at 1.2 -> -2.4; (ratio 0.5, A -1) -> clip 0.8 -> min(-0.5, -0.8) = -0.8 -> 0.8
        assert!((clipped_surrogate(1.5, 2.0, 0.2) + 2.4).abs() < 1e-12);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) - 0.8).abs() < 1e-12);
        assert!((clipped_surrogate(1.1, 3.0, 0.2) + 3.3).abs() < 1e-12);
    }

    #[test]
    fn advantage_normalization_guard() {
        let (a, skipped) = normalize_advantages(&[2.0, 2.0, 2.0]);
        assert!(skipped);
        assert_eq!(a, vec![2.0, 2.0, 2.0]);
        let (a, skipped) = normalize_advantages(&[1.0, 3.0]);
        assert!(!skipped);
        assert!((a[0] + 1.0).abs() < 1e-7 && (a[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn policy_blob_round_trip() {
        let cfg = PPOConfig { hidden: vec![16, 16], ..Default::default() };
        let mut p = RacingPolicy::new(&cfg, &mut stream_rng(8, 0));
        p.normalizer.update(Array2::from_shape_fn((4, OBS_DIM), |(i, j)| (i + j) as f64).view());
        let bytes = write_policy(&p);
        assert!(is_policy_blob(&bytes));
        assert_eq!(read_policy(&bytes).unwrap(), p);
        assert!(read_policy(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn normalizer_matches_batch_statistics() {
        let data = Array2::from_shape_fn((50, 3), |(i, j)| ((i * 3 + j) as f64 * 0.7).sin() * (j + 1) as f64);
        let mut n = ObsNormalizer::new(3);
        n.count = 0.0;
        n.update(data.slice(ndarray::s![0..20, ..]));
        n.update(data.slice(ndarray::s![20..50, ..]));
        let m = data.mean_axis(Axis(0)).unwrap();
        let v = data.var_axis(Axis(0), 0.0);
        for j in 0..3 {
            assert!((n.mean[j] - m[j]).abs() < 1e-12);
            assert!((n.var[j] - v[j]).abs() < 1e-12);
        }
    }

    fn small_setup() -> (RacingPolicy, VecEnv, PPOConfig) {
        let cfg = PPOConfig { hidden: vec![16], minibatch: 8, horizon: 6, ..Default::default() };
        let policy = RacingPolicy::new(&cfg, &mut stream_rng(21, 0));
        let track = assets::load("mini_oval4").unwrap();
        let venv = VecEnv::new(vec![track; 3], 9, EnvSettings::default(), false);
        (policy, venv, cfg)
    }

    fn total_loss(p: &RacingPolicy, buf: &RolloutBuffer, olp: &[f64], cfg: &PPOConfig) -> f64 {
        let l = minibatch_loss(p, buf.obs.view(), buf.raw_actions.view(), olp, &buf.advantages, &buf.returns, cfg).unwrap();
        l.policy_loss + cfg.value_coef * l.value_loss - cfg.entropy_coef * l.entropy
    }

    #[test]
    fn minibatch_gradient_matches_finite_differences() {
        let (mut p, mut venv, mut cfg) = small_setup();
        cfg.entropy_coef = 0.01;
        let (buf, _) = collect_rollout(&mut p, &mut venv, 4, &mut stream_rng(1, 0), &cfg).unwrap();
        // shift old log-probs so ratios sit strictly inside the clip range
        let olp: Vec<f64> = buf.log_probs.iter().enumerate().map(|(i, l)| l + 0.05 * ((i % 3) as f64 - 1.0)).collect();
        let mut l = minibatch_loss(&p, buf.obs.view(), buf.raw_actions.view(), &olp, &buf.advantages, &buf.returns, &cfg).unwrap();
        let mut analytic: Vec<f64> = Vec::new();
        for t in l.actor_grad.tensors_mut() {
            analytic.extend(t.iter());
        }
        analytic.extend(&l.log_std_grad);
        for t in l.critic_grad.tensors_mut() {
            analytic.extend(t.iter());
        }
        let h = 1e-6;
        let n = analytic.len();
        for k in (0..n).step_by(7) {
            let perturb = |p: &mut RacingPolicy, d: f64| {
                let mut off = k;
                for t in p.tensors_mut() {
                    if off < t.len() {
                        t[off] += d;
                        return;
                    }
                    off -= t.len();
                }
            };
            let mut a = p.clone();
            perturb(&mut a, h);
            let mut b = p.clone();
            perturb(&mut b, -h);
            let fd = (total_loss(&a, &buf, &olp, &cfg) - total_loss(&b, &buf, &olp, &cfg)) / (2.0 * h);
            let g = analytic[k];
            assert!((fd - g).abs() <= 1e-5 * (1.0 + g.abs().max(fd.abs())), "param {k}: fd {fd} vs {g}");
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise() {
        let (mut p, mut venv, cfg) = small_setup();
        let (buf, _) = collect_rollout(&mut p, &mut venv, 6, &mut stream_rng(1, 0), &cfg).unwrap();
        let before = p.clone();
        let mut opt = p.optimizer(0.0);
        let cfg0 = PPOConfig { lr: 0.0, ..cfg };
        let stats = ppo_update(&mut p, &mut opt, &buf, &cfg0, &mut stream_rng(2, 0)).unwrap();
        assert_eq!(p, before);
        assert_eq!(stats.clip_fraction, 0.0);
        assert!(stats.approx_kl.abs() < 1e-12);
    }

    #[test]
    fn update_moves_parameters_and_stays_finite() {
        let (mut p, mut venv, cfg) = small_setup();
        let (buf, _) = collect_rollout(&mut p, &mut venv, 6, &mut stream_rng(1, 0), &cfg).unwrap();
        let before = p.clone();
        let mut opt = p.optimizer(cfg.lr);
        ppo_update(&mut p, &mut opt, &buf, &cfg, &mut stream_rng(2, 0)).unwrap();
        assert_ne!(p.actor, before.actor);
        assert!(p.actor.is_finite() && p.critic.is_finite());
    }

    #[test]
    fn rollout_shapes_and_determinism() {
        let (mut p, mut venv, cfg) = small_setup();
        let (buf, _) = collect_rollout(&mut p, &mut venv, 1, &mut stream_rng(1, 0), &cfg).unwrap();
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.obs.nrows(), 3);

        let run = || {
            let (mut p, mut venv, cfg) = small_setup();
            collect_rollout(&mut p, &mut venv, 20, &mut stream_rng(1, 0), &cfg).unwrap().0
        };
        let (a, b) = (run(), run());
        assert_eq!(a.obs, b.obs);
        assert_eq!(a.rewards, b.rewards);
        assert_eq!(a.log_probs, b.log_probs);
    }

    #[test]
    fn rollout_rewards_match_replayed_trace() {
        let (mut p, mut venv, cfg) = small_setup();
        let start = venv.clone();
        let (buf, _) = collect_rollout(&mut p, &mut venv, 30, &mut stream_rng(1, 0), &cfg).unwrap();
        // replay the recorded squashed actions env by env through the trace writer
        let mut replay = start;
        let mut total = 0.0;
        for t in 0..30 {
            let actions: Vec<Action> = (0..3)
                .map(|e| {
                    let r = buf.raw_actions.row(t * 3 + e);
                    [r[0].tanh(), r[1].tanh(), r[2].tanh(), r[3].tanh()]
                })
                .collect();
            let mut w = crate::sim::TraceWriter::new(Vec::new()).unwrap();
            for (e, a) in actions.iter().enumerate() {
                w.row(&replay.envs[e], a, 0.0).unwrap();
            }
            total += replay.step(&actions).unwrap().rewards.iter().sum::<f64>();
        }
        let buffered: f64 = buf.rewards.iter().sum();
        assert!((total - buffered).abs() < 1e-12);
    }
}
