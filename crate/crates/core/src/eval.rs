//! Benchmarks: success rate and lap time per (method, track), the moving-gate
//! stress test, the progress-coefficient ablation, and their CSV / plot
//! output.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assets;
use crate::error::{Error, Result};
use crate::orchestrator::{load_policy, train_run, RunConfig, RunPaths};
use crate::pilot::{evaluate_policy, Pilot};
use crate::sim::{EnvSettings, EvalRecord};
use crate::track::{DynamicGateSpec, Track};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub track: String,
    pub n_trials: usize,
    pub start_noise: f64,
}

impl SuiteEntry {
    pub fn new(track: &str, n_trials: usize, start_noise: f64) -> Self {
        Self {
            track: track.to_string(),
            n_trials,
            start_noise,
        }
    }
}

/// The six held-out tracks, 64 trials each with 0.1 m start noise.
pub fn default_suite() -> Vec<SuiteEntry> {
    assets::CATALOG.iter().map(|t| SuiteEntry::new(t, 64, 0.1)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub method: String,
    pub track: String,
    pub dynamic_range_m: f64,
    pub gate_speed_mps: f64,
    pub trials: usize,
    pub sr_pct: f64,
    pub lt_mean_s: Option<f64>,
    pub lt_std_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    /// Per-trial records, aligned with `rows`.
    pub records: Vec<Vec<EvalRecord>>,
}

pub type Method<'a> = (String, &'a dyn Pilot);

fn row_from(method: &str, track: &str, range: f64, speed: f64, records: &[EvalRecord]) -> BenchmarkRow {
    let laps: Vec<f64> = records.iter().filter(|r| r.success()).filter_map(|r| r.lap_time).collect();
    let (mean, std) = if laps.is_empty() {
        (None, None)
    } else {
        let m = laps.iter().sum::<f64>() / laps.len() as f64;
        let v = laps.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / laps.len() as f64;
        (Some(m), Some(v.sqrt()))
    };
    BenchmarkRow {
        method: method.to_string(),
        track: track.to_string(),
        dynamic_range_m: range,
        gate_speed_mps: speed,
        trials: records.len(),
        sr_pct: 100.0 * laps.len() as f64 / records.len().max(1) as f64,
        lt_mean_s: mean,
        lt_std_s: std,
    }
}

fn bench_one(
    report: &mut BenchmarkReport,
    (label, pilot): &Method,
    name: &str,
    track: &Track,
    (range, speed): (f64, f64),
    trials: usize,
    noise: f64,
    seed: u64,
    env: &EnvSettings,
    parallel: bool,
) -> Result<()> {
    let ev = evaluate_policy(*pilot, track, trials, noise, seed, env, parallel)?;
    report.rows.push(row_from(label, name, range, speed, &ev.records));
    report.records.push(ev.records);
    Ok(())
}

/// Rows in method-major, suite order.
pub fn run_static_benchmark(
    methods: &[Method],
    suite: &[SuiteEntry],
    seed: u64,
    env: &EnvSettings,
    parallel: bool,
) -> Result<BenchmarkReport> {
    let tracks: Vec<Track> = suite.iter().map(|e| assets::resolve(&e.track)).collect::<Result<_>>()?;
    let mut report = BenchmarkReport::default();
    for m in methods {
        for (e, t) in suite.iter().zip(&tracks) {
            bench_one(&mut report, m, &e.track, t, (0.0, 0.0), e.n_trials, e.start_noise, seed, env, parallel)?;
        }
    }
    Ok(report)
}

/// `track` with the listed gates oscillating laterally.
pub fn dynamic_track(track: &Track, gate_ids: &[usize], amplitude: f64, speed: f64) -> Result<Track> {
    let mut t = track.clone();
    t.dynamic.clear();
    for &id in gate_ids {
        let g = track
            .gates
            .get(id)
            .ok_or_else(|| Error::Config(format!("dynamic gate {id} not on a {}-gate track", track.len())))?;
        t.dynamic.push(DynamicGateSpec::lateral(g, amplitude, speed));
    }
    Ok(t)
}

/// One row per (method, amplitude). The third and fourth gates move by
/// default. A zero amplitude reports zero gate speed: the gates are static.
#[allow(clippy::too_many_arguments)]
pub fn run_dynamic_benchmark(
    methods: &[Method],
    track_name: &str,
    gate_ids: &[usize],
    amplitudes: &[f64],
    speed: f64,
    n_trials: usize,
    start_noise: f64,
    seed: u64,
    env: &EnvSettings,
    parallel: bool,
) -> Result<BenchmarkReport> {
    let base = assets::resolve(track_name)?;
    let mut report = BenchmarkReport::default();
    for m in methods {
        for &a in amplitudes {
            let t = dynamic_track(&base, gate_ids, a, speed)?;
            let reported_speed = if a > 0.0 { speed } else { 0.0 };
            bench_one(&mut report, m, track_name, &t, (a, reported_speed), n_trials, start_noise, seed, env, parallel)?;
        }
    }
    Ok(report)
}

pub const BENCHMARK_HEADER: &str = "method,track,dynamic_range_m,gate_speed_mps,trials,SR_pct,LT_mean_s,LT_std_s";

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.3}"))
}

pub fn benchmark_csv(report: &BenchmarkReport) -> String {
    let mut s = format!("{BENCHMARK_HEADER}\n");
    for r in &report.rows {
        writeln!(
            s,
            "{},{},{},{},{},{:.2},{},{}",
            r.method,
            r.track,
            r.dynamic_range_m,
            r.gate_speed_mps,
            r.trials,
            r.sr_pct,
            fmt_opt(r.lt_mean_s),
            fmt_opt(r.lt_std_s)
        )
        .unwrap();
    }
    s
}

pub fn parse_benchmark_csv(text: &str) -> Result<Vec<BenchmarkRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(BENCHMARK_HEADER) {
        return Err(Error::Config("benchmark csv: unexpected header".into()));
    }
    let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| Error::Config(format!("benchmark csv: bad {what} `{s}`")));
    let optnum = |s: &str, what: &str| if s == "-" { Ok(None) } else { num(s, what).map(Some) };
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Config(format!("benchmark csv: expected 8 fields in `{l}`")));
            }
            Ok(BenchmarkRow {
                method: f[0].to_string(),
                track: f[1].to_string(),
                dynamic_range_m: num(f[2], "range")?,
                gate_speed_mps: num(f[3], "speed")?,
                trials: f[4].parse().map_err(|_| Error::Config(format!("benchmark csv: bad trials `{}`", f[4])))?,
                sr_pct: num(f[5], "SR")?,
                lt_mean_s: optnum(f[6], "LT")?,
                lt_std_s: optnum(f[7], "LT std")?,
            })
        })
        .collect()
}

/// Whitespace-separated blocks, one per method, separated by two blank
/// lines (gnuplot `index` friendly).
pub fn gnuplot_blocks(report: &BenchmarkReport) -> String {
    let mut methods: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut s = String::new();
    for (k, m) in methods.iter().enumerate() {
        if k > 0 {
            s.push_str("\n\n");
        }
        writeln!(s, "# method: {m}").unwrap();
        writeln!(s, "# track range_m speed_mps SR_pct LT_mean_s LT_std_s").unwrap();
        for r in report.rows.iter().filter(|r| r.method == *m) {
            let lt = |x: Option<f64>| x.map_or("NaN".into(), |v| format!("{v:.3}"));
            writeln!(
                s,
                "{} {} {} {:.2} {} {}",
                r.track,
                r.dynamic_range_m,
                r.gate_speed_mps,
                r.sr_pct,
                lt(r.lt_mean_s),
                lt(r.lt_std_s)
            )
            .unwrap();
        }
    }
    s
}

pub fn emit_report(report: &BenchmarkReport, dir: &Path, gnuplot: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("benchmark.csv"), benchmark_csv(report))?;
    if gnuplot {
        std::fs::write(dir.join("benchmark.dat"), gnuplot_blocks(report))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub alpha1: f64,
    /// `None` marks the aggregate row over seeds.
    pub seed: Option<u64>,
    pub sr_mean: f64,
    pub sr_var: f64,
    pub lt_mean: Option<f64>,
    pub lt_var: Option<f64>,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
}

/// Trains one run per (alpha, seed) under `base.out_dir/alpha_<a>_seed_<s>`
/// and scores the checkpoints of the last quarter of rounds on the
/// evaluation tracks.
pub fn run_ablation_sweep(
    alphas: &[f64],
    seeds: &[u64],
    base: &RunConfig,
    eval_tracks: &[String],
    n_trials: usize,
) -> Result<Vec<AblationRow>> {
    if alphas.len() < 2 {
        return Err(Error::Config("ablation needs at least two alpha values".into()));
    }
    let mut rows = Vec::new();
    for &alpha in alphas {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.reward.alpha1 = alpha;
            cfg.seed = seed;
            cfg.checkpoint_every = 1;
            cfg.eval_tracks.clear();
            cfg.out_dir = Path::new(&base.out_dir)
                .join(format!("alpha_{alpha}_seed_{seed}"))
                .to_string_lossy()
                .into_owned();
            train_run(&cfg)?;
            let paths = RunPaths::new(&cfg.out_dir);
            let first = cfg.n_epoch - cfg.n_epoch.div_ceil(4) + 1;
            let (mut srs, mut lts) = (Vec::new(), Vec::new());
            for epoch in first..=cfg.n_epoch {
                let policy = load_policy(&paths.checkpoint(epoch))?;
                let suite: Vec<SuiteEntry> = eval_tracks.iter().map(|t| SuiteEntry::new(t, n_trials, cfg.eval_start_noise)).collect();
                let rep = run_static_benchmark(&[("p".into(), &policy)], &suite, seed, &cfg.env_settings(), cfg.use_parallel())?;
                for r in &rep.rows {
                    srs.push(r.sr_pct);
                    lts.extend(r.lt_mean_s);
                }
            }
            let (sm, sv) = mean_var(&srs);
            let (lm, lv) = if lts.is_empty() { (None, None) } else { let (m, v) = mean_var(&lts); (Some(m), Some(v)) };
            per_seed.push((sm, lm));
            rows.push(AblationRow { alpha1: alpha, seed: Some(seed), sr_mean: sm, sr_var: sv, lt_mean: lm, lt_var: lv });
        }
        let srs: Vec<f64> = per_seed.iter().map(|x| x.0).collect();
        let lts: Vec<f64> = per_seed.iter().filter_map(|x| x.1).collect();
        let (sm, sv) = mean_var(&srs);
        let (lm, lv) = if lts.is_empty() { (None, None) } else { let (m, v) = mean_var(&lts); (Some(m), Some(v)) };
        rows.push(AblationRow { alpha1: alpha, seed: None, sr_mean: sm, sr_var: sv, lt_mean: lm, lt_var: lv });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("alpha1,seed,SR_mean_pct,SR_var,LT_mean_s,LT_var\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{:.2},{:.4},{},{}",
            r.alpha1,
            r.seed.map_or("all".into(), |x| x.to_string()),
            r.sr_mean,
            r.sr_var,
            fmt_opt(r.lt_mean),
            r.lt_var.map_or("-".into(), |v| format!("{v:.4}"))
        )
        .unwrap();
    }
    s
}
