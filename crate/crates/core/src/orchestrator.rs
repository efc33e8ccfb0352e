//! The outer training loop: shape tracks, train the racer for `n_freq`
//! PPO iterations, evaluate each environment once, pay the shaper by rank,
//! reset environments that stay unsolved, checkpoint, repeat.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assets;
use crate::baselines::{DrShaper, FixedShaper, LearnedShaper, PfShaper, Shaper, ShaperKind, ShaperState};
use crate::env_agent::{rank_environments, ranking_reward, stuck_reset_check, RankingConfig, SACConfig, SacStats};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::pilot::fly_episode;
use crate::racing::{collect_rollout, is_policy_blob, ppo_update, read_policy, write_policy, PPOConfig, PpoStats, RacingPolicy};
use crate::rng::{env_thread_override, stream_rng, streams};
use crate::sim::{env_reset, EnvSettings, EpisodeConfig, EvalRecord, RewardCoefficients, SimParams};
use crate::track::{save_track, validate_track, Track};
use crate::vec_env::VecEnv;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankingSettings {
    pub reward_scale: f64,
    pub lower_percentile: usize,
    pub upper_percentile: usize,
}

impl Default for RankingSettings {
    fn default() -> Self {
        Self {
            reward_scale: 1.0,
            lower_percentile: 50,
            upper_percentile: 90,
        }
    }
}

/// Everything a run needs. Defaults are desk scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Shaping rounds.
    pub n_epoch: usize,
    /// PPO iterations per shaping round.
    pub n_freq: usize,
    /// Parallel training environments.
    pub n_env: usize,
    /// Initial track: asset name or path to a track file.
    pub track: String,
    pub shaper: ShaperKind,
    pub seed: u64,
    pub out_dir: String,
    /// Fan environment stepping and evaluation out to worker threads.
    pub parallel: bool,
    pub min_gate_spacing: f64,
    /// Particle-filter jitter as a fraction of each delta bound.
    pub pf_jitter: f64,
    /// Write per-env track files every this many rounds (and at the end).
    pub snapshot_every: usize,
    pub checkpoint_every: usize,
    /// Held-out tracks benchmarked with the final policy.
    pub eval_tracks: Vec<String>,
    pub eval_trials: usize,
    pub eval_start_noise: f64,
    pub sim: SimParams,
    pub reward: RewardCoefficients,
    pub episode: EpisodeConfig,
    pub ppo: PPOConfig,
    pub sac: SACConfig,
    pub ranking: RankingSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_epoch: 40,
            n_freq: 25,
            n_env: 16,
            track: "mini_oval4".into(),
            shaper: ShaperKind::Learned,
            seed: 0,
            out_dir: "runs/default".into(),
            parallel: true,
            min_gate_spacing: crate::track::DEFAULT_MIN_GATE_SPACING,
            pf_jitter: 0.1,
            snapshot_every: 10,
            checkpoint_every: 1,
            eval_tracks: Vec::new(),
            eval_trials: 64,
            eval_start_noise: 0.1,
            sim: SimParams::default(),
            reward: RewardCoefficients::default(),
            episode: EpisodeConfig::default(),
            ppo: PPOConfig {
                hidden: vec![64, 64],
                ..PPOConfig::default()
            },
            sac: SACConfig::default(),
            ranking: RankingSettings::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in over {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(k), v) {
            (None, _) => return Err(Error::Config(format!("unknown config key `{path}`"))),
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &path)?,
            (Some(toml::Value::Table(_)), _) => {
                return Err(Error::Config(format!("config key `{path}` is a section, not a value")))
            }
            (Some(slot), v) => *slot = v.clone(),
        }
    }
    Ok(())
}

/// Parses the right-hand side of a `key=value` override as a TOML value,
/// falling back to a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    pub fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes")
    }

    /// Layers a TOML file's contents and then `key=value` overrides (dotted
    /// keys) over the defaults. Unknown keys are errors naming the key.
    pub fn layered(file_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table = Self::default().to_table();
        if let Some(text) = file_text {
            let user: toml::Table = text.parse().map_err(|e| Error::Config(format!("config file: {e}")))?;
            merge(&mut table, &user, "")?;
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let mut nested = toml::Table::new();
            let parts: Vec<&str> = key.trim().split('.').collect();
            let mut cur = &mut nested;
            for p in &parts[..parts.len() - 1] {
                cur = cur
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .expect("fresh table");
            }
            cur.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw.trim()));
            merge(&mut table, &nested, "")?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_freq < 1 {
            return Err(Error::Config("n_freq must be at least 1".into()));
        }
        if self.n_env < 2 {
            return Err(Error::Config("n_env must be at least 2 (ranking needs two environments)".into()));
        }
        if self.snapshot_every == 0 || self.checkpoint_every == 0 || self.eval_trials == 0 {
            return Err(Error::Config("snapshot_every, checkpoint_every and eval_trials must be positive".into()));
        }
        self.sim.validate()?;
        self.reward.validate()?;
        self.ppo.validate()?;
        self.sac.validate()?;
        self.ranking_config()?;
        Ok(())
    }

    pub fn ranking_config(&self) -> Result<RankingConfig> {
        RankingConfig::from_percentiles(
            self.n_env,
            self.ranking.lower_percentile,
            self.ranking.upper_percentile,
            self.ranking.reward_scale,
        )
    }

    pub fn env_settings(&self) -> EnvSettings {
        EnvSettings {
            sim: self.sim,
            reward: self.reward,
            episode: self.episode,
        }
    }

    /// Whether worker threads are used; `GATESHAPER_THREADS=1` forces the
    /// single-threaded reference mode.
    pub fn use_parallel(&self) -> bool {
        self.parallel && env_thread_override() != Some(1)
    }

    pub fn resolved_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Complete state of a run between rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    /// Completed shaping rounds.
    pub epoch: usize,
    pub iteration: usize,
    pub total_steps: u64,
    pub initial_track: Track,
    pub tracks: Vec<Track>,
    pub records: Vec<EvalRecord>,
    pub frozen: Vec<bool>,
    pub sr_history: Vec<Vec<f64>>,
    pub policy: RacingPolicy,
    pub optimizer: Adam,
    pub shaper: ShaperState,
    pub venv: VecEnv,
    pub ppo_rng: ChaCha8Rng,
    pub shaper_rng: ChaCha8Rng,
    /// Byte lengths of the logs consistent with this state.
    pub log_lengths: [u64; 3],
}

/// Record of a track nobody has flown yet: every pass error is the distance
/// from the noiseless start position to the gate.
pub fn unflown_record(track: &Track, cfg: &RunConfig) -> EvalRecord {
    let ep = EpisodeConfig {
        start_noise: 0.0,
        ..cfg.episode
    };
    EvalRecord::from_state(&env_reset(track, &mut stream_rng(0, 0), &ep, &cfg.sim))
}

impl RunState {
    pub fn fresh(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let initial = assets::resolve(&cfg.track)?;
        let violations = validate_track(&initial, cfg.min_gate_spacing);
        if !violations.is_empty() {
            return Err(crate::error::TrackError::Invalid(violations).into());
        }
        let n = cfg.n_env;
        let mut init_rng = stream_rng(cfg.seed, streams::INIT);
        let policy = RacingPolicy::new(&cfg.ppo, &mut init_rng);
        let optimizer = policy.optimizer(cfg.ppo.lr);
        let shaper = match cfg.shaper {
            ShaperKind::Fixed => ShaperState::Fixed(FixedShaper),
            ShaperKind::Dr => ShaperState::Dr(DrShaper::new(cfg.min_gate_spacing)),
            ShaperKind::Pf => ShaperState::Pf(PfShaper::new(initial.clone(), n, cfg.pf_jitter, cfg.min_gate_spacing)),
            ShaperKind::Learned => ShaperState::Learned(Box::new(LearnedShaper::new(
                initial.len(),
                n,
                cfg.sac.clone(),
                cfg.min_gate_spacing,
                &mut stream_rng(cfg.seed, streams::SAC),
            ))),
        };
        let tracks = vec![initial.clone(); n];
        Ok(Self {
            epoch: 0,
            iteration: 0,
            total_steps: 0,
            records: vec![unflown_record(&initial, cfg); n],
            frozen: vec![false; n],
            sr_history: vec![Vec::new(); n],
            venv: VecEnv::new(tracks.clone(), cfg.seed, cfg.env_settings(), cfg.use_parallel()),
            tracks,
            initial_track: initial,
            policy,
            optimizer,
            shaper,
            ppo_rng: stream_rng(cfg.seed, streams::PPO),
            shaper_rng: stream_rng(cfg.seed, streams::SHAPER),
            log_lengths: [0; 3],
        })
    }
}

const CKPT_MAGIC: &[u8; 8] = b"GSHCKPT\0";
const CKPT_VERSION: u32 = 1;

/// `magic | version u32 | payload length u64 | bincode payload | sha256`.
pub fn checkpoint_bytes(state: &RunState) -> Result<Vec<u8>> {
    let payload = bincode::serialize(state).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(payload.len() + 52);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<RunState> {
    if bytes.len() < 52 || &bytes[..8] != CKPT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic or too short)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("checkpoint version {version}, expected {CKPT_VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() != 20 + len + 32 {
        return Err(Error::Checkpoint("checksum mismatch (file truncated or padded)".into()));
    }
    let (body, digest) = bytes.split_at(20 + len);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    bincode::deserialize(&body[20..]).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn checkpoint_save(state: &RunState, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(state)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<RunState> {
    checkpoint_from_bytes(&fs::read(path)?)
}

/// Reads a racing policy from a policy file or a run checkpoint.
pub fn load_policy(path: &Path) -> Result<RacingPolicy> {
    let bytes = fs::read(path)?;
    if is_policy_blob(&bytes) {
        read_policy(&bytes)
    } else {
        Ok(checkpoint_from_bytes(&bytes)?.policy)
    }
}

pub const TRAIN_HEADER: &str = "epoch,iter,steps,mean_episode_reward,SR_train,mean_gates_passed,policy_loss,value_loss,clip_frac,kl";
pub const SHAPING_HEADER: &str = "epoch,env,rank,reward,gates_passed,mean_pass_error,success,repairs,reset";
pub const SAC_HEADER: &str = "epoch,critic_loss,actor_loss,mean_q,mean_log_prob";

fn opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.6}"))
}

pub fn train_log_row(epoch: usize, iter: usize, steps: u64, episodes: &[(usize, EvalRecord)], st: &PpoStats) -> String {
    let n = episodes.len() as f64;
    let (reward, sr, gates) = if episodes.is_empty() {
        (None, None, None)
    } else {
        (
            Some(episodes.iter().map(|e| e.1.episode_reward).sum::<f64>() / n),
            Some(episodes.iter().filter(|e| e.1.success()).count() as f64 / n),
            Some(episodes.iter().map(|e| e.1.gates_passed as f64).sum::<f64>() / n),
        )
    };
    format!(
        "{epoch},{iter},{steps},{},{},{},{:.6},{:.6},{:.6},{:.6}",
        opt(reward),
        opt(sr),
        opt(gates),
        st.policy_loss,
        st.value_loss,
        st.clip_fraction,
        st.approx_kl
    )
}

pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.resolved")
    }
    pub fn logs(&self) -> [PathBuf; 3] {
        [self.root.join("train.csv"), self.root.join("shaping.csv"), self.root.join("sac.csv")]
    }
    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("ckpt_{epoch}.bin"))
    }
    pub fn abort_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("ckpt_abort.bin")
    }
    pub fn track_snapshot(&self, epoch: usize, env: usize) -> PathBuf {
        self.root.join("tracks").join(format!("epoch_{epoch}_env_{env}.track"))
    }
    pub fn policy(&self) -> PathBuf {
        self.root.join("policy.bin")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    /// Highest-numbered regular checkpoint.
    pub fn latest_checkpoint(&self) -> Option<(usize, PathBuf)> {
        let dir = fs::read_dir(self.root.join("checkpoints")).ok()?;
        dir.filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let n: usize = name.strip_prefix("ckpt_")?.strip_suffix(".bin")?.parse().ok()?;
                Some((n, e.path()))
            })
            .max_by_key(|x| x.0)
    }
}

struct Logs {
    files: [File; 3],
    lengths: [u64; 3],
}

impl Logs {
    fn open(paths: &RunPaths, lengths: [u64; 3]) -> Result<Self> {
        let headers = [TRAIN_HEADER, SHAPING_HEADER, SAC_HEADER];
        let mut lens = lengths;
        let files = paths.logs();
        let mut out = Vec::new();
        for (i, p) in files.iter().enumerate() {
            let mut f = OpenOptions::new().create(true).truncate(false).read(true).write(true).open(p)?;
            f.set_len(lens[i])?;
            use std::io::Seek;
            f.seek(std::io::SeekFrom::End(0))?;
            if lens[i] == 0 {
                let line = format!("{}\n", headers[i]);
                f.write_all(line.as_bytes())?;
                lens[i] = line.len() as u64;
            }
            out.push(f);
        }
        let files: [File; 3] = out.try_into().map_err(|_| Error::Contract("three logs".into()))?;
        Ok(Self { files, lengths: lens })
    }

    fn line(&mut self, which: usize, text: &str) -> Result<()> {
        let line = format!("{text}\n");
        self.files[which].write_all(line.as_bytes())?;
        self.lengths[which] += line.len() as u64;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        for f in self.files.iter_mut() {
            f.flush()?;
        }
        Ok(())
    }
}

/// Evaluates the policy once per environment with a per-round noise stream.
pub fn evaluate_round(policy: &RacingPolicy, tracks: &[Track], round: usize, cfg: &RunConfig) -> Result<Vec<EvalRecord>> {
    let env = cfg.env_settings();
    let run = |(j, t): (usize, &Track)| {
        let mut rng = stream_rng(cfg.seed, streams::round_eval(round, j));
        fly_episode(policy, env_reset(t, &mut rng, &env.episode, &env.sim), &env)
    };
    if cfg.use_parallel() {
        tracks.par_iter().enumerate().map(run).collect()
    } else {
        tracks.iter().enumerate().map(run).collect()
    }
}

/// One shaping round. Mutates `state` and appends to the logs.
fn run_round(state: &mut RunState, cfg: &RunConfig, paths: &RunPaths, logs: &mut Logs) -> Result<Option<SacStats>> {
    let round = state.epoch;
    let epoch = round + 1;
    state.venv.parallel = cfg.use_parallel();

    // 1. shape
    let shaped = state
        .shaper
        .shape(round, &state.tracks, &state.records, &state.frozen, &mut state.shaper_rng)?;
    let repairs: Vec<usize> = shaped.iter().map(|s| s.1).collect();
    state.tracks = shaped.into_iter().map(|s| s.0).collect();
    state.frozen.iter_mut().for_each(|f| *f = false);
    state.venv.set_tracks(state.tracks.clone());

    // 2. train the racer
    for _ in 0..cfg.n_freq {
        let (buf, episodes) = collect_rollout(&mut state.policy, &mut state.venv, cfg.ppo.horizon, &mut state.ppo_rng, &cfg.ppo)?;
        let stats = ppo_update(&mut state.policy, &mut state.optimizer, &buf, &cfg.ppo, &mut state.ppo_rng)?;
        state.iteration += 1;
        state.total_steps += buf.len() as u64;
        logs.line(0, &train_log_row(epoch, state.iteration, state.total_steps, &episodes, &stats))?;
    }

    // 3. evaluate, rank, pay the shaper, reset stuck environments
    state.records = evaluate_round(&state.policy, &state.tracks, round, cfg)?;
    let ranks = rank_environments(&state.records);
    let ranking = cfg.ranking_config()?;
    let rewards: Vec<f64> = ranks.iter().map(|&r| ranking_reward(r, &ranking)).collect::<Result<_>>()?;
    let sac = state
        .shaper
        .feedback(&state.tracks, &state.records, &rewards, &mut state.shaper_rng)?;
    for j in 0..cfg.n_env {
        let rec = &state.records[j];
        let success = rec.success();
        state.sr_history[j].push(if success { 1.0 } else { 0.0 });
        let reset = stuck_reset_check(&state.sr_history[j]);
        logs.line(
            1,
            &format!(
                "{epoch},{j},{},{:.6},{},{:.6},{},{},{}",
                ranks[j],
                rewards[j],
                rec.gates_passed,
                rec.mean_pass_error(),
                success as u8,
                repairs[j],
                reset as u8
            ),
        )?;
        if reset {
            state.tracks[j] = state.initial_track.clone();
            state.records[j] = unflown_record(&state.initial_track, cfg);
            state.sr_history[j].clear();
            state.frozen[j] = true;
            state.shaper.reset_env(j);
        }
    }
    if let Some(s) = sac {
        logs.line(
            2,
            &format!("{epoch},{:.6},{:.6},{:.6},{:.6}", s.critic_loss, s.actor_loss, s.mean_q, s.mean_log_prob),
        )?;
    }
    if epoch % cfg.snapshot_every == 0 || epoch == cfg.n_epoch {
        for (j, t) in state.tracks.iter().enumerate() {
            fs::write(paths.track_snapshot(epoch, j), save_track(t))?;
        }
    }
    state.epoch = epoch;
    Ok(sac)
}

fn prepare_dirs(paths: &RunPaths) -> Result<()> {
    for d in ["checkpoints", "tracks", "eval"] {
        fs::create_dir_all(paths.root.join(d))?;
    }
    Ok(())
}

/// Fresh run. The resolved config is written before anything else.
pub fn train_run(cfg: &RunConfig) -> Result<RunState> {
    train_run_until(cfg, None)
}

/// Fresh run that stops after `stop_after` rounds (for split-run resumes).
pub fn train_run_until(cfg: &RunConfig, stop_after: Option<usize>) -> Result<RunState> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out_dir);
    fs::create_dir_all(&paths.root)?;
    fs::write(paths.config(), cfg.resolved_text())?;
    prepare_dirs(&paths)?;
    for p in paths.logs() {
        if p.exists() {
            fs::remove_file(p)?;
        }
    }
    let state = RunState::fresh(cfg)?;
    continue_run(cfg, state, stop_after)
}

/// Continues the run in `dir` from its latest checkpoint, using the
/// resolved config stored there (optionally with a new round budget).
pub fn resume_run(dir: &Path, n_epoch: Option<usize>) -> Result<RunState> {
    let paths = RunPaths::new(dir);
    let text = fs::read_to_string(paths.config())?;
    let mut cfg = RunConfig::layered(Some(&text), &[])?;
    if let Some(n) = n_epoch {
        cfg.n_epoch = n;
    }
    cfg.out_dir = dir.to_string_lossy().into_owned();
    let (_, path) = paths
        .latest_checkpoint()
        .ok_or_else(|| Error::Checkpoint(format!("no checkpoint under {}", dir.display())))?;
    let state = checkpoint_load(&path)?;
    continue_run(&cfg, state, None)
}

fn continue_run(cfg: &RunConfig, mut state: RunState, stop_after: Option<usize>) -> Result<RunState> {
    let paths = RunPaths::new(&cfg.out_dir);
    prepare_dirs(&paths)?;
    let mut logs = Logs::open(&paths, state.log_lengths)?;
    state.log_lengths = logs.lengths;
    let last = stop_after.map_or(cfg.n_epoch, |s| s.min(cfg.n_epoch));
    while state.epoch < last {
        let snapshot = state.clone();
        if let Err(e) = run_round(&mut state, cfg, &paths, &mut logs) {
            logs.flush()?;
            checkpoint_save(&snapshot, &paths.abort_checkpoint())?;
            return Err(e);
        }
        logs.flush()?;
        state.log_lengths = logs.lengths;
        if state.epoch % cfg.checkpoint_every == 0 || state.epoch == cfg.n_epoch || state.epoch == last {
            checkpoint_save(&state, &paths.checkpoint(state.epoch))?;
        }
    }
    if state.epoch == cfg.n_epoch {
        fs::write(paths.policy(), write_policy(&state.policy))?;
        if !cfg.eval_tracks.is_empty() {
            let suite: Vec<crate::eval::SuiteEntry> = cfg
                .eval_tracks
                .iter()
                .map(|t| crate::eval::SuiteEntry::new(t, cfg.eval_trials, cfg.eval_start_noise))
                .collect();
            let report = crate::eval::run_static_benchmark(
                &[("final".to_string(), &state.policy as &dyn crate::pilot::Pilot)],
                &suite,
                cfg.seed,
                &cfg.env_settings(),
                cfg.use_parallel(),
            )?;
            fs::write(paths.eval_dir().join("benchmark.csv"), crate::eval::benchmark_csv(&report))?;
        }
    }
    Ok(state)
}
