//! Batched racing environments with auto-reset.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};
use crate::sim::{env_reset, Action, EnvSettings, EvalRecord, RacingEnvState, StepInfo};
use crate::track::Track;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VecEnv {
    pub envs: Vec<RacingEnvState>,
    pub tracks: Vec<Track>,
    pub rngs: Vec<ChaCha8Rng>,
    pub settings: EnvSettings,
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VecStep {
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub infos: Vec<StepInfo>,
    /// Episodes that ended this step, with the environment index.
    pub finished: Vec<(usize, EvalRecord)>,
}

impl VecEnv {
    /// Environment `i` draws from its own stream of `seed`.
    pub fn new(tracks: Vec<Track>, seed: u64, settings: EnvSettings, parallel: bool) -> Self {
        let mut rngs: Vec<ChaCha8Rng> =
            (0..tracks.len()).map(|i| stream_rng(seed, streams::ENV_BASE + i as u64)).collect();
        let envs = tracks
            .iter()
            .zip(rngs.iter_mut())
            .map(|(t, r)| env_reset(t, r, &settings.episode, &settings.sim))
            .collect();
        Self {
            envs,
            tracks,
            rngs,
            settings,
            parallel,
        }
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    /// Installs new per-env tracks; only environments whose track changed
    /// restart their episode.
    pub fn set_tracks(&mut self, tracks: Vec<Track>) {
        assert_eq!(tracks.len(), self.len(), "one track per environment");
        let settings = self.settings;
        for (i, track) in tracks.into_iter().enumerate() {
            if track != self.tracks[i] {
                self.envs[i] = env_reset(&track, &mut self.rngs[i], &settings.episode, &settings.sim);
                self.tracks[i] = track;
            }
        }
    }

    pub fn reset_all(&mut self) {
        let settings = self.settings;
        for ((env, track), rng) in self.envs.iter_mut().zip(&self.tracks).zip(self.rngs.iter_mut()) {
            *env = env_reset(track, rng, &settings.episode, &settings.sim);
        }
    }

    pub fn step(&mut self, actions: &[Action]) -> Result<VecStep> {
        if actions.len() != self.len() {
            return Err(Error::Shape(format!("{} actions for {} environments", actions.len(), self.len())));
        }
        let settings = self.settings;
        let one = |((env, rng), (track, action)): ((&mut RacingEnvState, &mut ChaCha8Rng), (&Track, &Action))| {
            let (r, info) = env.step(action, &settings)?;
            let finished = if env.done {
                let rec = EvalRecord::from_state(env);
                *env = env_reset(track, rng, &settings.episode, &settings.sim);
                Some(rec)
            } else {
                None
            };
            Ok::<_, Error>((r, info, finished))
        };
        let results: Vec<Result<_>> = if self.parallel {
            self.envs
                .par_iter_mut()
                .zip(self.rngs.par_iter_mut())
                .zip(self.tracks.par_iter().zip(actions.par_iter()))
                .map(one)
                .collect()
        } else {
            self.envs
                .iter_mut()
                .zip(self.rngs.iter_mut())
                .zip(self.tracks.iter().zip(actions.iter()))
                .map(one)
                .collect()
        };
        let mut out = VecStep {
            rewards: Vec::with_capacity(self.len()),
            dones: Vec::with_capacity(self.len()),
            infos: Vec::with_capacity(self.len()),
            finished: Vec::new(),
        };
        for (i, res) in results.into_iter().enumerate() {
            let (r, info, finished) = res?;
            out.rewards.push(r);
            out.dones.push(finished.is_some());
            out.infos.push(info);
            if let Some(rec) = finished {
                out.finished.push((i, rec));
            }
        }
        Ok(out)
    }
}
