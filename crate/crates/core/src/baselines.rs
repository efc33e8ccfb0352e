//! Curricula behind one interface: the learned environment policy and the
//! three comparison shapers (fixed track, domain randomization, particle
//! filter).

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env_agent::{
    apply_env_action, build_env_observation, env_act_dim, env_obs_dim, sac_update, scale_env_action, ReplayBuffer,
    SACConfig, SacAgent, SacStats, Transition, GATE_DELTA_BOUNDS,
};
use crate::error::{Error, Result};
use crate::sim::EvalRecord;
use crate::track::Track;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShaperKind {
    Learned,
    Fixed,
    Dr,
    Pf,
}

impl std::str::FromStr for ShaperKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "fixed" => Ok(Self::Fixed),
            "dr" => Ok(Self::Dr),
            "pf" => Ok(Self::Pf),
            other => Err(Error::Config(format!("unknown shaper `{other}` (learned, fixed, dr, pf)"))),
        }
    }
}

/// One shaped track per environment with the number of spacing repairs.
pub type Shaped = Vec<(Track, usize)>;

pub trait Shaper {
    /// Produces the next per-env tracks. `round` counts from 0 (the round
    /// that uses a random action). Environments flagged in `frozen` keep
    /// their track unchanged this round.
    fn shape(
        &mut self,
        round: usize,
        tracks: &[Track],
        records: &[EvalRecord],
        frozen: &[bool],
        rng: &mut ChaCha8Rng,
    ) -> Result<Shaped>;

    /// Ranking rewards of the evaluated tracks produced by the last `shape`.
    fn feedback(
        &mut self,
        tracks: &[Track],
        records: &[EvalRecord],
        rewards: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<SacStats>>;

    /// Environment `env` was restored to the initial layout.
    fn reset_env(&mut self, _env: usize) {}
}

fn uniform_deltas(n_gates: usize, bounds: &[f64; 4], rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..env_act_dim(n_gates))
        .map(|i| rng.random_range(-1.0..1.0) * bounds[i % 4])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedShaper;

impl Shaper for FixedShaper {
    fn shape(&mut self, _: usize, tracks: &[Track], _: &[EvalRecord], _: &[bool], _: &mut ChaCha8Rng) -> Result<Shaped> {
        Ok(tracks.iter().map(|t| (t.clone(), 0)).collect())
    }

    fn feedback(&mut self, _: &[Track], _: &[EvalRecord], _: &[f64], _: &mut ChaCha8Rng) -> Result<Option<SacStats>> {
        Ok(None)
    }
}

/// Uniform random deltas every round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrShaper {
    pub bounds: [f64; 4],
    pub min_spacing: f64,
}

impl DrShaper {
    pub fn new(min_spacing: f64) -> Self {
        Self {
            bounds: GATE_DELTA_BOUNDS,
            min_spacing,
        }
    }
}

impl Shaper for DrShaper {
    fn shape(&mut self, _: usize, tracks: &[Track], _: &[EvalRecord], frozen: &[bool], rng: &mut ChaCha8Rng) -> Result<Shaped> {
        Ok(tracks
            .iter()
            .zip(frozen)
            .map(|(t, &f)| {
                if f {
                    (t.clone(), 0)
                } else {
                    let d = uniform_deltas(t.len(), &self.bounds, rng);
                    apply_env_action(t, &d, self.min_spacing)
                }
            })
            .collect())
    }

    fn feedback(&mut self, _: &[Track], _: &[EvalRecord], _: &[f64], _: &mut ChaCha8Rng) -> Result<Option<SacStats>> {
        Ok(None)
    }
}

/// Indices drawn by systematic resampling with offset `u0 ∈ [0, 1/n)`.
pub fn systematic_resample(weights: &[f64], n: usize, u0: f64) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let uniform = !(total > 0.0) || !total.is_finite();
    let w: Vec<f64> = if uniform {
        vec![1.0 / weights.len() as f64; weights.len()]
    } else {
        weights.iter().map(|x| x / total).collect()
    };
    let mut out = Vec::with_capacity(n);
    let mut cum = w[0];
    let mut i = 0;
    for k in 0..n {
        let u = u0 + k as f64 / n as f64;
        while u > cum && i + 1 < w.len() {
            i += 1;
            cum += w[i];
        }
        out.push(i);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    /// Cumulative `[dx, dy, dz, dyaw]` per gate relative to the initial layout.
    pub deltas: Vec<f64>,
    pub weight: f64,
}

/// Particle-filter curriculum: each environment's track is the initial
/// layout plus one particle's deltas. Particles are re-weighted by the
/// ranking reward of their track, resampled, and jittered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfShaper {
    pub initial: Track,
    pub particles: Vec<Particle>,
    /// Jitter standard deviation as a fraction of each delta bound.
    pub jitter: f64,
    pub epsilon: f64,
    pub min_spacing: f64,
}

impl PfShaper {
    pub fn new(initial: Track, n_particles: usize, jitter: f64, min_spacing: f64) -> Self {
        let dim = env_act_dim(initial.len());
        Self {
            initial,
            particles: vec![
                Particle {
                    deltas: vec![0.0; dim],
                    weight: 1.0 / n_particles as f64,
                };
                n_particles
            ],
            jitter,
            epsilon: 1e-3,
            min_spacing,
        }
    }

    fn jittered(&self, deltas: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        deltas
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let b = GATE_DELTA_BOUNDS[i % 4];
                let step = if self.jitter > 0.0 {
                    Normal::new(0.0, self.jitter * b).expect("positive sigma").sample(rng).clamp(-b, b)
                } else {
                    0.0
                };
                d + step
            })
            .collect()
    }
}

impl Shaper for PfShaper {
    fn shape(&mut self, round: usize, _: &[Track], _: &[EvalRecord], frozen: &[bool], rng: &mut ChaCha8Rng) -> Result<Shaped> {
        let n = self.particles.len();
        if frozen.len() != n {
            return Err(Error::Contract(format!("{} environments for {n} particles", frozen.len())));
        }
        if round == 0 {
            for p in self.particles.iter_mut() {
                p.deltas = uniform_deltas(self.initial.len(), &GATE_DELTA_BOUNDS, rng);
            }
        } else {
            let weights: Vec<f64> = self.particles.iter().map(|p| p.weight).collect();
            let u0 = rng.random_range(0.0..1.0 / n as f64);
            let picks = systematic_resample(&weights, n, u0);
            let old = self.particles.clone();
            for j in 0..n {
                self.particles[j].deltas = if frozen[j] {
                    old[j].deltas.clone()
                } else {
                    self.jittered(&old[picks[j]].deltas, rng)
                };
            }
        }
        for p in self.particles.iter_mut() {
            p.weight = 1.0 / n as f64;
        }
        Ok(self
            .particles
            .iter()
            .map(|p| apply_env_action(&self.initial, &p.deltas, self.min_spacing))
            .collect())
    }

    fn feedback(&mut self, _: &[Track], _: &[EvalRecord], rewards: &[f64], _: &mut ChaCha8Rng) -> Result<Option<SacStats>> {
        let raw: Vec<f64> = rewards.iter().map(|r| r.max(0.0) + self.epsilon).collect();
        let total: f64 = raw.iter().sum();
        for (p, w) in self.particles.iter_mut().zip(raw) {
            p.weight = w / total;
        }
        Ok(None)
    }

    fn reset_env(&mut self, env: usize) {
        self.particles[env].deltas.iter_mut().for_each(|d| *d = 0.0);
    }
}

/// The learned environment policy wrapped as a shaper. Each environment
/// contributes one replay transition per round: the observation the action
/// was chosen from, the action, the ranking reward of the track it
/// produced, and the observation of that track after evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedShaper {
    pub agent: SacAgent,
    pub replay: ReplayBuffer,
    pub cfg: SACConfig,
    pub min_spacing: f64,
    pending: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl LearnedShaper {
    pub fn new(n_gates: usize, n_env: usize, cfg: SACConfig, min_spacing: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            agent: SacAgent::new(env_obs_dim(n_gates), env_act_dim(n_gates), &cfg, rng),
            replay: ReplayBuffer::new(cfg.capacity),
            cfg,
            min_spacing,
            pending: vec![None; n_env],
        }
    }
}

impl Shaper for LearnedShaper {
    fn shape(&mut self, round: usize, tracks: &[Track], records: &[EvalRecord], frozen: &[bool], rng: &mut ChaCha8Rng) -> Result<Shaped> {
        let n = tracks.len();
        let obs: Vec<Vec<f64>> = tracks
            .iter()
            .zip(records)
            .map(|(t, r)| build_env_observation(t, r))
            .collect::<Result<_>>()?;
        let u: Array2<f64> = if round == 0 {
            let dim = self.agent.act_dim;
            Array2::from_shape_simple_fn((n, dim), || rng.random_range(-1.0..1.0))
        } else {
            let flat: Vec<f64> = obs.concat();
            let m = Array2::from_shape_vec((n, self.agent.obs_dim), flat).map_err(|e| Error::Shape(e.to_string()))?;
            self.agent.act(m.view(), rng, false)?
        };
        let mut out = Vec::with_capacity(n);
        for j in 0..n {
            if frozen[j] {
                self.pending[j] = None;
                out.push((tracks[j].clone(), 0));
                continue;
            }
            let uj = u.row(j).to_vec();
            out.push(apply_env_action(&tracks[j], &scale_env_action(&uj), self.min_spacing));
            self.pending[j] = Some((obs[j].clone(), uj));
        }
        Ok(out)
    }

    fn feedback(&mut self, tracks: &[Track], records: &[EvalRecord], rewards: &[f64], rng: &mut ChaCha8Rng) -> Result<Option<SacStats>> {
        for j in 0..tracks.len() {
            if let Some((obs, action)) = self.pending[j].take() {
                self.replay.push(Transition {
                    obs,
                    action,
                    reward: rewards[j],
                    next_obs: build_env_observation(&tracks[j], &records[j])?,
                });
            }
        }
        if self.replay.len() >= self.cfg.batch {
            Ok(Some(sac_update(&mut self.agent, &self.replay, &self.cfg, rng)?))
        } else {
            Ok(None)
        }
    }

    fn reset_env(&mut self, env: usize) {
        self.pending[env] = None;
    }
}

/// Serializable shaper state; dispatches to the concrete shaper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ShaperState {
    Fixed(FixedShaper),
    Dr(DrShaper),
    Pf(PfShaper),
    Learned(Box<LearnedShaper>),
}

impl ShaperState {
    pub fn kind(&self) -> ShaperKind {
        match self {
            Self::Fixed(_) => ShaperKind::Fixed,
            Self::Dr(_) => ShaperKind::Dr,
            Self::Pf(_) => ShaperKind::Pf,
            Self::Learned(_) => ShaperKind::Learned,
        }
    }

    fn inner(&mut self) -> &mut dyn Shaper {
        match self {
            Self::Fixed(s) => s,
            Self::Dr(s) => s,
            Self::Pf(s) => s,
            Self::Learned(s) => s.as_mut(),
        }
    }
}

impl Shaper for ShaperState {
    fn shape(&mut self, round: usize, tracks: &[Track], records: &[EvalRecord], frozen: &[bool], rng: &mut ChaCha8Rng) -> Result<Shaped> {
        self.inner().shape(round, tracks, records, frozen, rng)
    }

    fn feedback(&mut self, tracks: &[Track], records: &[EvalRecord], rewards: &[f64], rng: &mut ChaCha8Rng) -> Result<Option<SacStats>> {
        self.inner().feedback(tracks, records, rewards, rng)
    }

    fn reset_env(&mut self, env: usize) {
        self.inner().reset_env(env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets;
    use crate::rng::stream_rng;
    use crate::sim::{env_reset, EnvSettings, EpisodeConfig};

    fn unflown(track: &Track) -> EvalRecord {
        let env = EnvSettings::default();
        let s = env_reset(track, &mut stream_rng(0, 0), &EpisodeConfig { start_noise: 0.0, ..env.episode }, &env.sim);
        EvalRecord::from_state(&s)
    }

    #[test]
    fn systematic_resampling_hand_walk() {
        let idx = systematic_resample(&[0.5, 0.3, 0.2], 10, 0.05);
        let counts = [0, 1, 2].map(|k| idx.iter().filter(|&&i| i == k).count());
        assert_eq!(counts, [5, 3, 2]);
        assert_eq!(systematic_resample(&[1.0, 0.0, 0.0], 3, 0.2), vec![0, 0, 0]);
        let uniform = systematic_resample(&[0.0, 0.0], 4, 0.1);
        assert_eq!(uniform, vec![0, 0, 1, 1]);
    }

    #[test]
    fn fixed_is_identity_for_many_rounds() {
        let t = assets::load("oval8").unwrap();
        let mut s = FixedShaper;
        let mut tracks = vec![t.clone(); 3];
        let recs = vec![unflown(&t); 3];
        let mut rng = stream_rng(0, 0);
        for round in 0..100 {
            tracks = s.shape(round, &tracks, &recs, &[false; 3], &mut rng).unwrap().into_iter().map(|x| x.0).collect();
        }
        assert!(tracks.iter().all(|x| *x == t));
    }

    #[test]
    fn dr_zero_bounds_is_identity_and_deltas_are_centred() {
        let t = assets::load("mini_oval4").unwrap();
        let mut s = DrShaper { bounds: [0.0; 4], min_spacing: 1.0 };
        let out = s.shape(0, &[t.clone()], &[unflown(&t)], &[false], &mut stream_rng(0, 0)).unwrap();
        assert_eq!(out[0].0, t);

        let mut rng = stream_rng(1, 0);
        let n = 100_000;
        let mean = (0..n).map(|_| uniform_deltas(1, &GATE_DELTA_BOUNDS, &mut rng)[0]).sum::<f64>() / n as f64;
        let sigma = 1.0 / 3f64.sqrt();
        assert!(mean.abs() < 3.0 * sigma / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn dr_outputs_stay_within_bounds() {
        let t = assets::load("mini_oval4").unwrap();
        let mut s = DrShaper::new(1.0);
        let out = s.shape(0, &vec![t.clone(); 8], &vec![unflown(&t); 8], &[false; 8], &mut stream_rng(2, 0)).unwrap();
        for (shaped, _) in out {
            for (a, b) in shaped.gates.iter().zip(&t.gates) {
                let d = a.position - b.position;
                assert!(d.x.abs() <= 1.0 && d.y.abs() <= 1.0 && d.z.abs() <= 0.2);
            }
        }
    }

    #[test]
    fn degenerate_weights_copy_particle_zero() {
        let t = assets::load("mini_oval4").unwrap();
        let mut s = PfShaper::new(t.clone(), 4, 0.0, 1.0);
        let recs = vec![unflown(&t); 4];
        let mut rng = stream_rng(3, 0);
        s.shape(0, &vec![t.clone(); 4], &recs, &[false; 4], &mut rng).unwrap();
        let first = s.particles[0].deltas.clone();
        s.feedback(&vec![t.clone(); 4], &recs, &[1.0, 0.0, 0.0, 0.0], &mut rng).unwrap();
        s.epsilon = 0.0;
        // re-weight without epsilon to get exactly (1, 0, 0, 0)
        s.feedback(&vec![t.clone(); 4], &recs, &[1.0, 0.0, 0.0, 0.0], &mut rng).unwrap();
        let out = s.shape(1, &vec![t.clone(); 4], &recs, &[false; 4], &mut rng).unwrap();
        assert!(s.particles.iter().all(|p| p.deltas == first));
        assert_eq!(out.len(), 4);
        let total: f64 = s.particles.iter().map(|p| p.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_particle_resamples_to_itself() {
        let t = assets::load("mini_oval4").unwrap();
        let mut s = PfShaper::new(t.clone(), 1, 0.0, 1.0);
        let recs = vec![unflown(&t)];
        let mut rng = stream_rng(4, 0);
        s.shape(0, &[t.clone()], &recs, &[false], &mut rng).unwrap();
        let before = s.particles[0].deltas.clone();
        s.feedback(&[t.clone()], &recs, &[0.0], &mut rng).unwrap();
        s.shape(1, &[t.clone()], &recs, &[false], &mut rng).unwrap();
        assert_eq!(s.particles[0].deltas, before);
    }

    #[test]
    fn learned_shaper_stores_one_transition_per_env() {
        let t = assets::load("mini_oval4").unwrap();
        let cfg = SACConfig { hidden: vec![8], batch: 4, gradient_steps: 2, ..Default::default() };
        let mut rng = stream_rng(5, 0);
        let mut s = LearnedShaper::new(4, 3, cfg, 1.0, &mut rng);
        let recs = vec![unflown(&t); 3];
        let shaped: Vec<Track> = s.shape(0, &vec![t.clone(); 3], &recs, &[false, true, false], &mut rng).unwrap().into_iter().map(|x| x.0).collect();
        assert_eq!(shaped[1], t);
        assert_ne!(shaped[0], t);
        let stats = s.feedback(&shaped, &recs, &[1.0, 0.5, 0.2], &mut rng).unwrap();
        assert_eq!(s.replay.len(), 2);
        assert!(stats.is_none());
        let shaped2: Vec<Track> = s.shape(1, &shaped, &recs, &[false; 3], &mut rng).unwrap().into_iter().map(|x| x.0).collect();
        let stats = s.feedback(&shaped2, &recs, &[1.0, 0.5, 0.2], &mut rng).unwrap();
        assert_eq!(s.replay.len(), 5);
        assert!(stats.is_some());
    }
}
