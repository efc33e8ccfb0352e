//! Track layouts shipped with the crate.
//!
//! The catalog layouts (figure eight, kidney, Big S, twist) are
//! reconstructions sized to 8-16 m arenas, not surveyed coordinates.

use nalgebra::Vector3;
use rand::Rng;

use crate::error::TrackError;
use crate::rng::stream_rng;
use crate::track::{validate_track, Gate, Track, DEFAULT_MIN_GATE_SPACING};

pub const NAMES: [&str; 10] = [
    "oval8",
    "figure8",
    "kidney",
    "bigs2d",
    "figure8_3d",
    "bigs3d",
    "twist",
    "mini_oval4",
    "mini_circle5",
    "mini_diamond4",
];

/// The unseen-track catalog used by the static benchmark.
pub const CATALOG: [&str; 6] = ["figure8", "kidney", "bigs2d", "figure8_3d", "bigs3d", "twist"];

pub fn source(name: &str) -> Option<&'static str> {
    Some(match name {
        "oval8" => include_str!("../assets/oval8.track"),
        "figure8" => include_str!("../assets/figure8.track"),
        "kidney" => include_str!("../assets/kidney.track"),
        "bigs2d" => include_str!("../assets/bigs2d.track"),
        "figure8_3d" => include_str!("../assets/figure8_3d.track"),
        "bigs3d" => include_str!("../assets/bigs3d.track"),
        "twist" => include_str!("../assets/twist.track"),
        "mini_oval4" => include_str!("../assets/mini_oval4.track"),
        "mini_circle5" => include_str!("../assets/mini_circle5.track"),
        "mini_diamond4" => include_str!("../assets/mini_diamond4.track"),
        _ => return None,
    })
}

pub fn load(name: &str) -> Result<Track, TrackError> {
    let text = source(name).ok_or_else(|| TrackError::UnknownAsset(name.to_string()))?;
    Track::parse(text)
}

/// Resolves either a shipped asset name or a path to a track file.
pub fn resolve(name_or_path: &str) -> Result<Track, crate::error::Error> {
    if let Some(text) = source(name_or_path) {
        return Ok(Track::parse(text)?);
    }
    let text = std::fs::read_to_string(name_or_path)?;
    Ok(Track::parse(&text)?)
}

/// Random closed loop of 4-8 gates on a jittered ellipse, flown
/// counter-clockwise, inside a 12 m × 10 m × 4 m arena. `index` selects one
/// track of the seed's family; draws that violate spacing are redrawn.
pub fn random_track(seed: u64, index: usize) -> Track {
    let mut rng = stream_rng(seed, index as u64);
    loop {
        let n = rng.random_range(4..=8usize);
        let (a, b) = (rng.random_range(3.0..5.0), rng.random_range(2.0..4.0));
        let z0 = rng.random_range(1.2..2.0);
        let gates = (0..n)
            .map(|i| {
                let th = std::f64::consts::TAU * (i as f64 + rng.random_range(-0.2..0.2)) / n as f64
                    - std::f64::consts::FRAC_PI_2;
                let p = Vector3::new(
                    a * th.cos() + rng.random_range(-0.4..0.4),
                    b * th.sin() + rng.random_range(-0.4..0.4),
                    z0 + rng.random_range(-0.7..0.7),
                );
                Gate::new(i, p, (b * th.cos()).atan2(-a * th.sin()))
            })
            .collect();
        let mut t = Track::new(
            format!("random_{seed}_{index}"),
            gates,
            Vector3::new(-6.0, -5.0, 0.0),
            Vector3::new(6.0, 5.0, 4.0),
        );
        t.orient_gates();
        if validate_track(&t, DEFAULT_MIN_GATE_SPACING).is_empty() {
            return t;
        }
    }
}
