use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gateshaper")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: [&str; 16] = [
    "--set", "n_epoch=2",
    "--set", "n_freq=1",
    "--set", "n_env=4",
    "--set", "ppo.hidden=[8]",
    "--set", "ppo.horizon=8",
    "--set", "ppo.minibatch=16",
    "--set", "sac.hidden=[8]",
    "--set", "sac.batch=2",
];

fn train_tiny(dir: &Path, shaper: &str) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["train", "--seed", "7", "--out", out, "--shaper", shaper];
    args.extend(TINY);
    run(&args)
}

#[test]
fn help_documents_every_flag() {
    let cases: [(&[&str], &[&str]); 10] = [
        (&["ablate"], &["--alpha", "--seeds", "--track", "--trials", "--out", "--set", "--config"]),
        (&["train"], &["--config", "--set", "--seed", "--out", "--shaper", "--n-epoch", "--resume"]),
        (&["eval"], &["--policy", "--track", "--trials", "--noise", "--seed", "--dynamic", "--speed", "--gates", "--out", "--gnuplot"]),
        (&["track", "validate"], &["--min-spacing"]),
        (&["track", "show"], &[]),
        (&["track", "export"], &["--out"]),
        (&["track", "random"], &["--seed", "--n", "--out"]),
        (&["inspect", "rank"], &["--n", "--rank", "--lower-percentile", "--upper-percentile", "--scale"]),
        (&["inspect", "obs"], &["--track"]),
        (&["inspect", "reward"], &["--track", "--pilot", "--trace"]),
    ];
    for (cmd, flags) in cases {
        let mut args = cmd.to_vec();
        args.push("--help");
        let o = run(&args);
        assert!(o.status.success(), "{cmd:?}");
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{cmd:?} help lacks {f}");
        }
    }
    assert!(run(&["--help"]).status.success());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    let o = run(&["train", "--set", "ppo.learning_rate=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ppo.learning_rate"));
    assert_eq!(run(&["train", "--shaper", "magic"]).status.code(), Some(1));
}

#[test]
fn inspect_rank_anchors() {
    assert_eq!(stdout(&run(&["inspect", "rank", "--n", "100", "--rank", "95"])).trim(), "0.5");
    assert_eq!(stdout(&run(&["inspect", "rank", "--rank", "70"])).trim(), "1");
    assert_eq!(stdout(&run(&["inspect", "rank", "--rank", "100"])).trim(), "0");
    let table = stdout(&run(&["inspect", "rank", "--n", "10"]));
    assert_eq!(table.lines().count(), 11);
}

#[test]
fn inspect_obs_at_hover() {
    let o = run(&["inspect", "obs", "--track", "oval8"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("r6=(1.000000,0.000000,0.000000,0.000000,1.000000,0.000000)"), "{text}");
    assert!(text.contains("v=(0.000000,0.000000,0.000000)"));
}

#[test]
fn inspect_reward_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let o = run(&["inspect", "reward", "--track", "mini_oval4", "--trace", trace.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("lap_complete"));
    assert!(fs::read_to_string(trace).unwrap().starts_with("t,px,py,pz"));
}

#[test]
fn track_tooling() {
    assert!(stdout(&run(&["track", "validate", "oval8"])).starts_with("OK oval8"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.track");
    fs::write(&bad, "track bad arena -5 -5 0 5 5 4\ngate 0 0 0 1.5 0 0.75 0.15\ngate 1 0.5 0 1.5 0 0.75 0.15\ngate 2 9 0 1.5 0 0.75 0.15\n").unwrap();
    let o = run(&["track", "validate", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.contains("gates 0 and 1") && text.contains("gate 2: center outside arena"), "{text}");

    let out = dir.path().join("rnd");
    assert!(run(&["track", "random", "--seed", "3", "--n", "100", "--out", out.to_str().unwrap()]).status.success());
    let files: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path().to_string_lossy().into_owned()).collect();
    assert_eq!(files.len(), 100);
    let mut args = vec!["track", "validate"];
    args.extend(files.iter().map(|s| s.as_str()));
    let o = run(&args);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("OK")).count(), 100);

    let exp = dir.path().join("assets");
    assert!(run(&["track", "export", "--out", exp.to_str().unwrap()]).status.success());
    let f8 = exp.join("figure8.track");
    assert!(run(&["track", "validate", f8.to_str().unwrap()]).status.success());
    assert!(stdout(&run(&["track", "show", "kidney"])).contains("gates, closed loop length"));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("learned"), dir.path().join("fixed"));
    let o = train_tiny(&a, "learned");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(train_tiny(&b, "fixed").status.success());
    for f in ["config.resolved", "train.csv", "shaping.csv", "checkpoints/ckpt_2.bin", "tracks/epoch_2_env_0.track", "policy.bin"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert!(fs::read_to_string(a.join("config.resolved")).unwrap().contains("seed = 7"));
    assert_ne!(fs::read(a.join("shaping.csv")).unwrap(), fs::read(b.join("shaping.csv")).unwrap());

    // resume a finished run with a larger budget
    let o = run(&["train", "--resume", a.to_str().unwrap(), "--n-epoch", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(a.join("checkpoints/ckpt_3.bin").exists());

    let ckpt = a.join("checkpoints/ckpt_3.bin");
    let policy = format!("ours={}", ckpt.display());
    let (s, d) = (dir.path().join("static"), dir.path().join("dyn"));
    let base = ["eval", "--policy", &policy, "--policy", "hover", "--track", "mini_oval4", "--trials", "3"];
    let mut args = base.to_vec();
    args.extend(["--out", s.to_str().unwrap()]);
    assert!(run(&args).status.success());
    let mut args = base.to_vec();
    args.extend(["--dynamic", "0", "--out", d.to_str().unwrap(), "--gnuplot"]);
    assert!(run(&args).status.success());
    let stat = fs::read_to_string(s.join("benchmark.csv")).unwrap();
    assert_eq!(stat, fs::read_to_string(d.join("benchmark.csv")).unwrap());
    assert!(stat.contains("\nours,mini_oval4,0,0,3,"));
    assert!(stat.contains("\nhover,mini_oval4,0,0,3,0.00,-,-"));
    assert!(d.join("benchmark.dat").exists());

    let o = run(&["eval", "--policy", dir.path().join("missing.bin").to_str().unwrap(), "--track", "oval8"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn ablation_sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    let mut args = vec!["ablate", "--alpha", "0.5", "--alpha", "1.0", "--seeds", "3", "--track", "mini_oval4", "--trials", "2"];
    args.extend(["--out", out.to_str().unwrap(), "--set", "n_epoch=4", "--set", "shaper=\"fixed\""]);
    args.extend(&TINY[2..]);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(out.join("alpha_0.5_seed_3/checkpoints/ckpt_4.bin").exists());
    assert_eq!(run(&["ablate", "--alpha", "1"]).status.code(), Some(1));
}

#[test]
fn desk_config_file_loads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");
    let out = dir.path().join("run");
    let mut args = vec!["train", "--config", cfg, "--seed", "7", "--out", out.to_str().unwrap()];
    args.extend(TINY);
    args.extend(["--set", "eval_trials=2"]);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved = fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(resolved.contains("mini_circle5"));
    assert!(out.join("eval/benchmark.csv").exists());
}
