//! `gateshaper` command line: training, benchmarks, track tooling and
//! small inspectors.
//!
//! Exit codes: 0 success, 1 usage / config / input error, 2 runtime fault.
//! `GATESHAPER_THREADS=1` forces the single-threaded reference mode.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gateshaper::assets;
use gateshaper::env_agent::{ranking_reward, RankingConfig};
use gateshaper::eval::{self, BenchmarkReport, SuiteEntry};
use gateshaper::orchestrator::{load_policy, resume_run, train_run, RunConfig};
use gateshaper::pilot::{HoverPilot, Pilot, ScriptedPilot};
use gateshaper::racing::{build_observation, RacingPolicy};
use gateshaper::rng::stream_rng;
use gateshaper::sim::{env_reset, EnvSettings, EpisodeConfig, TraceWriter};
use gateshaper::track::{save_track, validate_track};

#[derive(Parser)]
#[command(name = "gateshaper", version, about = "Drone-racing RL with adaptive environment shaping")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a racing policy with a track-shaping curriculum.
    Train(TrainArgs),
    /// Benchmark policies on static or moving-gate tracks.
    Eval(EvalArgs),
    /// Progress-coefficient ablation: one training run per (alpha1, seed).
    Ablate(AblateArgs),
    /// Validate, show, export or generate tracks.
    #[command(subcommand)]
    Track(TrackCmd),
    /// Print ranking rewards, observations or reward traces.
    #[command(subcommand)]
    Inspect(InspectCmd),
}

/// Layered configuration shared by `train` and `eval`.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config file layered over the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set ppo.lr=1e-4` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: Vec<String>) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| usage(format!("config file {}: {e}", p.display())))?),
            None => None,
        };
        let mut o = self.overrides.clone();
        o.extend(extra);
        RunConfig::layered(text.as_deref(), &o).map_err(|e| usage(e.to_string()))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Curriculum: learned, fixed, dr or pf.
    #[arg(long)]
    shaper: Option<String>,
    /// Shaping rounds.
    #[arg(long)]
    n_epoch: Option<usize>,
    /// Continue the run in this directory from its latest checkpoint.
    #[arg(long, value_name = "DIR", conflicts_with_all = ["config", "overrides", "seed", "out", "shaper"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Method to benchmark: `hover`, `scripted`, a policy/checkpoint file,
    /// or `label=path` (repeatable).
    #[arg(long, required = true)]
    policy: Vec<String>,
    /// Track asset or file (repeatable; default: the six-track catalog).
    #[arg(long)]
    track: Vec<String>,
    /// Trials per (method, track).
    #[arg(long, default_value_t = 64)]
    trials: usize,
    /// Uniform start-position noise half-width [m].
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Moving-gate amplitudes [m] (repeatable); switches to the dynamic benchmark.
    #[arg(long, value_name = "AMPLITUDE")]
    dynamic: Vec<f64>,
    /// Moving-gate speed [m/s].
    #[arg(long, default_value_t = 0.6)]
    speed: f64,
    /// Indices of the moving gates.
    #[arg(long, value_delimiter = ',', default_value = "2,3")]
    gates: Vec<usize>,
    /// Report directory (benchmark.csv).
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    /// Also write gnuplot data blocks (benchmark.dat).
    #[arg(long)]
    gnuplot: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Progress-reward coefficient values (repeatable, at least two).
    #[arg(long = "alpha", required = true)]
    alphas: Vec<f64>,
    /// Training seeds shared by every alpha value.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Evaluation track (repeatable).
    #[arg(long, default_value = "mini_circle5")]
    track: Vec<String>,
    /// Trials per checkpoint and track.
    #[arg(long, default_value_t = 16)]
    trials: usize,
    /// Sweep directory; runs go to `<out>/alpha_<a>_seed_<s>`.
    #[arg(long, default_value = "runs/ablation")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum TrackCmd {
    /// Check track files or assets; lists every violation.
    Validate {
        /// Track files or asset names.
        #[arg(required = true)]
        tracks: Vec<String>,
        #[arg(long, default_value_t = gateshaper::track::DEFAULT_MIN_GATE_SPACING)]
        min_spacing: f64,
    },
    /// Print a track in canonical form with a short summary.
    Show { track: String },
    /// Write every shipped asset to a directory.
    Export {
        #[arg(long, default_value = "tracks")]
        out: PathBuf,
    },
    /// Generate random closed tracks.
    Random {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value = "random_tracks")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum InspectCmd {
    /// Ranking reward for one rank, or the whole table.
    Rank {
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Rank (1 = best); omit to print every rank.
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long, default_value_t = 50)]
        lower_percentile: usize,
        #[arg(long, default_value_t = 90)]
        upper_percentile: usize,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
    /// Racing observation at the noiseless start hover.
    Obs {
        #[arg(long, default_value = "oval8")]
        track: String,
    },
    /// Per-step reward terms of one episode.
    Reward {
        #[arg(long, default_value = "oval8")]
        track: String,
        /// `hover`, `scripted`, or a policy/checkpoint file.
        #[arg(long, default_value = "scripted")]
        pilot: String,
        /// Also write the state trace CSV here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

/// Errors the user can fix by changing the invocation (exit 1).
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let input = e.chain().any(|c| {
        c.is::<Usage>()
            || matches!(
                c.downcast_ref::<gateshaper::Error>(),
                Some(gateshaper::Error::Config(_) | gateshaper::Error::Track(_))
            )
            || c.is::<gateshaper::TrackError>()
    });
    if input {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let res = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Track(c) => cmd_track(c),
        Cmd::Inspect(c) => cmd_inspect(c),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    if let Some(dir) = a.resume {
        let s = resume_run(&dir, a.n_epoch).with_context(|| format!("resuming {}", dir.display()))?;
        println!("resumed {} to round {}", dir.display(), s.epoch);
        return Ok(());
    }
    let mut extra = Vec::new();
    if let Some(s) = a.seed {
        extra.push(format!("seed={s}"));
    }
    if let Some(o) = &a.out {
        extra.push(format!("out_dir={}", toml_string(&o.to_string_lossy())));
    }
    if let Some(s) = &a.shaper {
        let kind: gateshaper::baselines::ShaperKind = s.parse().map_err(|e| usage(format!("{e}")))?;
        extra.push(format!("shaper={}", toml_string(&format!("{kind:?}").to_lowercase())));
    }
    if let Some(n) = a.n_epoch {
        extra.push(format!("n_epoch={n}"));
    }
    let cfg = a.cfg.load(extra)?;
    let state = train_run(&cfg)?;
    println!(
        "run {}: {} rounds, {} PPO iterations, {} steps",
        cfg.out_dir, state.epoch, state.iteration, state.total_steps
    );
    Ok(())
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

enum Loaded {
    Hover(HoverPilot),
    Scripted(ScriptedPilot),
    Policy(Box<RacingPolicy>),
}

impl Loaded {
    fn pilot(&self) -> &dyn Pilot {
        match self {
            Loaded::Hover(p) => p,
            Loaded::Scripted(p) => p,
            Loaded::Policy(p) => p.as_ref(),
        }
    }
}

fn load_pilot(spec: &str, env: &EnvSettings) -> Result<(String, Loaded)> {
    let (label, what) = match spec.split_once('=') {
        Some((l, p)) => (l.to_string(), p),
        None => (
            Path::new(spec).file_stem().map_or(spec.to_string(), |s| s.to_string_lossy().into_owned()),
            spec,
        ),
    };
    let p = match what {
        "hover" => Loaded::Hover(HoverPilot::new(env)),
        "scripted" => Loaded::Scripted(ScriptedPilot::new(env)),
        path => Loaded::Policy(Box::new(
            load_policy(Path::new(path)).with_context(|| format!("loading policy {path}"))?,
        )),
    };
    Ok((label, p))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    if a.trials == 0 {
        bail!(usage("--trials must be at least 1"));
    }
    let cfg = a.cfg.load(Vec::new())?;
    let env = cfg.env_settings();
    let loaded: Vec<(String, Loaded)> = a.policy.iter().map(|s| load_pilot(s, &env)).collect::<Result<_>>()?;
    let methods: Vec<eval::Method> = loaded.iter().map(|(l, p)| (l.clone(), p.pilot())).collect();
    let tracks: Vec<String> = if a.track.is_empty() {
        assets::CATALOG.iter().map(|s| s.to_string()).collect()
    } else {
        a.track.clone()
    };
    let parallel = cfg.use_parallel();
    let report = if a.dynamic.is_empty() {
        let suite: Vec<SuiteEntry> = tracks.iter().map(|t| SuiteEntry::new(t, a.trials, a.noise)).collect();
        eval::run_static_benchmark(&methods, &suite, a.seed, &env, parallel)?
    } else {
        let mut all = BenchmarkReport::default();
        for t in &tracks {
            let r = eval::run_dynamic_benchmark(
                &methods, t, &a.gates, &a.dynamic, a.speed, a.trials, a.noise, a.seed, &env, parallel,
            )?;
            all.rows.extend(r.rows);
            all.records.extend(r.records);
        }
        all
    };
    eval::emit_report(&report, &a.out, a.gnuplot)?;
    print!("{}", eval::benchmark_csv(&report));
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    if a.alphas.len() < 2 {
        bail!(usage("the ablation needs at least two --alpha values"));
    }
    let base = a.cfg.load(vec![format!("out_dir={}", toml_string(&a.out.to_string_lossy()))])?;
    let rows = eval::run_ablation_sweep(&a.alphas, &a.seeds, &base, &a.track, a.trials)?;
    let csv = eval::ablation_csv(&rows);
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_track(c: TrackCmd) -> Result<()> {
    match c {
        TrackCmd::Validate { tracks, min_spacing } => {
            let mut bad = 0;
            for t in &tracks {
                let (v, n) = match assets::resolve(t) {
                    Ok(track) => (validate_track(&track, min_spacing), track.len()),
                    Err(gateshaper::Error::Track(gateshaper::TrackError::Invalid(v))) => (v, 0),
                    Err(e) => return Err(e).with_context(|| format!("reading {t}")),
                };
                if v.is_empty() {
                    println!("OK {t} ({n} gates)");
                } else {
                    bad += 1;
                    println!("INVALID {t}");
                    for x in v {
                        println!("  {x}");
                    }
                }
            }
            if bad > 0 {
                bail!(usage(format!("{bad} of {} tracks invalid", tracks.len())));
            }
        }
        TrackCmd::Show { track } => {
            let t = assets::resolve(&track)?;
            print!("{}", save_track(&t));
            let n = t.len();
            let loop_len: f64 = (0..n).map(|i| (t.gates[(i + 1) % n].position - t.gates[i].position).norm()).sum();
            let min_gap = (1..n)
                .map(|i| (t.gates[i].position - t.gates[i - 1].position).norm())
                .fold(f64::INFINITY, f64::min);
            println!("# {n} gates, closed loop length {loop_len:.2} m, min consecutive spacing {min_gap:.2} m");
        }
        TrackCmd::Export { out } => {
            fs::create_dir_all(&out)?;
            for name in assets::NAMES {
                fs::write(out.join(format!("{name}.track")), save_track(&assets::load(name)?))?;
            }
            println!("wrote {} tracks to {}", assets::NAMES.len(), out.display());
        }
        TrackCmd::Random { seed, n, out } => {
            fs::create_dir_all(&out)?;
            for i in 0..n {
                let t = assets::random_track(seed, i);
                fs::write(out.join(format!("{}.track", t.name)), save_track(&t))?;
            }
            println!("wrote {n} tracks to {}", out.display());
        }
    }
    Ok(())
}

fn cmd_inspect(c: InspectCmd) -> Result<()> {
    match c {
        InspectCmd::Rank {
            n,
            rank,
            lower_percentile,
            upper_percentile,
            scale,
        } => {
            let cfg = RankingConfig::from_percentiles(n, lower_percentile, upper_percentile, scale)
                .map_err(|e| usage(e.to_string()))?;
            match rank {
                Some(r) => println!("{}", ranking_reward(r, &cfg).map_err(|e| usage(e.to_string()))?),
                None => {
                    println!("rank,reward");
                    for r in 1..=n {
                        println!("{r},{}", ranking_reward(r, &cfg)?);
                    }
                }
            }
        }
        InspectCmd::Obs { track } => {
            let t = assets::resolve(&track)?;
            let env = EnvSettings::default();
            let ep = EpisodeConfig {
                start_noise: 0.0,
                ..env.episode
            };
            let s = env_reset(&t, &mut stream_rng(0, 0), &ep, &env.sim);
            let o = build_observation(&s);
            let parts = [("r6", 0..6), ("v", 6..9), ("omega", 9..12), ("prev_action", 12..16), ("dp1", 16..28), ("dp2", 28..40)];
            for (name, r) in parts {
                let vals: Vec<String> = o[r].iter().map(|x| format!("{x:.6}")).collect();
                println!("{name}=({})", vals.join(","));
            }
        }
        InspectCmd::Reward { track, pilot, trace } => {
            let t = assets::resolve(&track)?;
            let env = EnvSettings::default();
            let (_, p) = load_pilot(&pilot, &env)?;
            let pilot = p.pilot();
            let ep = EpisodeConfig {
                start_noise: 0.0,
                ..env.episode
            };
            let mut s = env_reset(&t, &mut stream_rng(0, 0), &ep, &env.sim);
            let mut tw = match &trace {
                Some(path) => Some(TraceWriter::new(std::io::BufWriter::new(fs::File::create(path)?))?),
                None => None,
            };
            println!("step,t,progress,action,body_rate,pass,crash,total");
            while !s.done {
                let a = pilot.act(&s);
                let (r, info) = s.step(&a, &env)?;
                let x = info.terms;
                println!(
                    "{},{:.3},{:.6},{:.6},{:.6},{},{},{:.6}",
                    s.steps, s.t, x.progress, x.action, x.body_rate, x.pass, x.crash, r
                );
                if let Some(w) = tw.as_mut() {
                    w.row(&s, &a, r)?;
                }
            }
            println!(
                "# {}: {} gates passed, episode reward {:.6}",
                s.done_reason.as_str(),
                s.gates_passed,
                s.episode_reward
            );
        }
    }
    Ok(())
}
