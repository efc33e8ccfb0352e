use nalgebra::Vector3;
use proptest::prelude::*;

use gateshaper::assets;
use gateshaper::env_agent::{ranking_reward, RankingConfig};
use gateshaper::eval::{ablation_csv, dynamic_track, run_ablation_sweep};
use gateshaper::orchestrator::RunConfig;
use gateshaper::pilot::{evaluate_policy, HoverPilot, Pilot};
use gateshaper::racing::build_observation;
use gateshaper::rng::stream_rng;
use gateshaper::sim::{env_reset, hover_action, reward_terms, EnvSettings, EpisodeConfig, RewardCoefficients};
use gateshaper::track::{dynamic_gate_position, save_track, wrap_angle, DynamicGateSpec, Track};

proptest! {
    #[test]
    fn wrapped_angles_stay_in_range(a in -1e3f64..1e3) {
        let w = wrap_angle(a);
        prop_assert!(w > -std::f64::consts::PI - 1e-12 && w <= std::f64::consts::PI + 1e-12);
        prop_assert!(((a - w) / std::f64::consts::TAU).fract().abs().min(1.0 - ((a - w) / std::f64::consts::TAU).fract().abs()) < 1e-9);
    }

    #[test]
    fn ranking_reward_is_bounded(n in 2usize..200, scale in 0.1f64..10.0) {
        let cfg = RankingConfig::from_percentiles(n, 50, 90, scale).unwrap();
        for rank in 1..=n {
            let r = ranking_reward(rank, &cfg).unwrap();
            prop_assert!((0.0..=scale).contains(&r));
        }
        // the worst rank earns nothing unless it already sits on the plateau
        let last = if cfg.r_upper < n { 0.0 } else { scale };
        prop_assert_eq!(ranking_reward(n, &cfg).unwrap(), last);
    }

    #[test]
    fn random_tracks_round_trip(seed in 0u64..1000, index in 0usize..50) {
        let t = assets::random_track(seed, index);
        let text = save_track(&t);
        prop_assert_eq!(save_track(&Track::parse(&text).unwrap()), text);
    }

    #[test]
    fn moving_gates_respect_their_speed(a in 0.05f64..2.0, speed in 0.1f64..2.0, phase in 0.0f64..6.3) {
        let track = assets::load("figure8").unwrap();
        let spec = DynamicGateSpec { phase, ..DynamicGateSpec::lateral(&track.gates[2], a, speed) };
        let dt = 0.02;
        let mut prev = dynamic_gate_position(&spec, &track.gates[2], 0.0);
        for k in 1..500 {
            let p = dynamic_gate_position(&spec, &track.gates[2], k as f64 * dt);
            prop_assert!((p - prev).norm() <= speed * dt * (1.0 + 1e-9));
            prop_assert!((p - track.gates[2].position).norm() <= a + 1e-12);
            prev = p;
        }
    }
}

#[test]
fn reward_terms_decompose() {
    let c = RewardCoefficients::default();
    let u = [0.3, -0.2, 0.1, 0.0];
    let up = [0.0, 0.0, 0.0, 0.4];
    let w = Vector3::new(1.0, -2.0, 2.0);
    let t = reward_terms(2.0, 1.5, &u, &up, &w, true, false, &c);
    assert!((t.progress - c.alpha1 * 0.5).abs() < 1e-15);
    assert!((t.action - c.alpha2 * 0.3f64.sqrt()).abs() < 1e-15);
    assert!((t.body_rate - c.alpha3 * 3.0).abs() < 1e-15);
    assert_eq!((t.pass, t.crash), (c.alpha4, 0.0));
    assert_eq!(t.total(), t.progress + t.action + t.body_rate + t.pass + t.crash);
}

#[test]
fn moving_gate_changes_the_observation_of_a_stationary_drone() {
    let env = EnvSettings::default();
    let base = assets::load("mini_oval4").unwrap();
    // gate 0 moves, so the very first relative-corner block changes
    let track = dynamic_track(&base, &[0], 0.5, 0.6).unwrap();
    let ep = EpisodeConfig { start_noise: 0.0, ..env.episode };
    let mut s = env_reset(&track, &mut stream_rng(0, 0), &ep, &env.sim);
    let before = build_observation(&s);
    let p0 = s.quad.p;
    s.step(&hover_action(&env.sim), &env).unwrap();
    let after = build_observation(&s);
    assert!((s.quad.p - p0).norm() < 1e-9, "hover keeps the drone in place");
    assert!((16..28).any(|i| (after[i] - before[i]).abs() > 1e-3));
}

#[test]
fn single_noiseless_trial_is_reproducible() {
    let env = EnvSettings::default();
    let hover = HoverPilot::new(&env);
    let track = assets::load("oval8").unwrap();
    let a = evaluate_policy(&hover as &dyn Pilot, &track, 1, 0.0, 5, &env, false).unwrap();
    let b = evaluate_policy(&hover as &dyn Pilot, &track, 1, 0.0, 5, &env, false).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.success_rate, 0.0);
    assert!(a.mean_lap_time.is_none());
}

#[test]
fn ablation_rows_schema() {
    let dir = tempfile::tempdir().unwrap();
    let base = RunConfig::layered(
        None,
        &[
            "n_epoch=4".into(),
            "n_freq=1".into(),
            "n_env=2".into(),
            "shaper=\"fixed\"".into(),
            "ppo.hidden=[8]".into(),
            "ppo.horizon=8".into(),
            "ppo.minibatch=16".into(),
            "parallel=false".into(),
            format!("out_dir=\"{}\"", dir.path().display()),
        ],
    )
    .unwrap();
    let rows = run_ablation_sweep(&[0.5, 0.5], &[1, 2], &base, &["mini_oval4".into()], 2).unwrap();
    assert_eq!(rows.len(), 2 * (2 + 1));
    assert_eq!(rows[..3], rows[3..]);
    assert!(rows[2].seed.is_none());
    let csv = ablation_csv(&rows);
    assert!(csv.starts_with("alpha1,seed,"));
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().nth(3).unwrap().starts_with("0.5,all,"));
    assert!(run_ablation_sweep(&[0.5], &[1], &base, &["mini_oval4".into()], 2).is_err());
}
