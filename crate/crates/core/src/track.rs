//! Gates, tracks, the line-based track file format and the geometric
//! primitives used for pass/crash detection.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::TrackError;

pub const DEFAULT_INNER_HALF: f64 = 0.75;
pub const DEFAULT_FRAME_WIDTH: f64 = 0.15;
pub const DEFAULT_MIN_GATE_SPACING: f64 = 1.0;

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// A square racing gate. The gate normal points along `yaw` in the
/// horizontal plane; roll and pitch are always level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub id: usize,
    pub position: Vector3<f64>,
    pub yaw: f64,
    pub inner_half: f64,
    pub frame_width: f64,
}

impl Gate {
    pub fn new(id: usize, position: Vector3<f64>, yaw: f64) -> Self {
        Self {
            id,
            position,
            yaw: wrap_angle(yaw),
            inner_half: DEFAULT_INNER_HALF,
            frame_width: DEFAULT_FRAME_WIDTH,
        }
    }

    pub fn normal(&self) -> Vector3<f64> {
        Vector3::new(self.yaw.cos(), self.yaw.sin(), 0.0)
    }

    /// In-plane horizontal axis (the gate's local y axis).
    pub fn lateral(&self) -> Vector3<f64> {
        Vector3::new(-self.yaw.sin(), self.yaw.cos(), 0.0)
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal().dot(&(p - self.position))
    }

    pub fn outer_half(&self) -> f64 {
        self.inner_half + self.frame_width
    }
}

/// Corners of the gate opening: top-left, top-right, bottom-right,
/// bottom-left as seen by an observer facing the gate's front side.
pub fn gate_corners(g: &Gate) -> [Vector3<f64>; 4] {
    let h = g.inner_half;
    let lat = g.lateral();
    let up = Vector3::z();
    [(-h, h), (h, h), (h, -h), (-h, -h)].map(|(u, v)| g.position + lat * u + up * v)
}

/// Intersection of segment `a -> b` with the gate plane, reported only
/// when the segment goes from the back side to the front side of the
/// gate. Returns the crossing point and its in-plane offset `(u, v)`
/// along the lateral and vertical axes.
pub fn plane_crossing(
    g: &Gate,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
) -> Option<(Vector3<f64>, Vector2<f64>)> {
    let sa = g.signed_distance(a);
    let sb = g.signed_distance(b);
    if !(sa < 0.0 && sb >= 0.0) {
        return None;
    }
    let t = sa / (sa - sb);
    let p = a + (b - a) * t;
    let d = p - g.position;
    Some((p, Vector2::new(d.dot(&g.lateral()), d.z)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Crossing {
    Pass,
    FrameHit,
    Miss,
}

pub fn classify_crossing(g: &Gate, offset: &Vector2<f64>) -> Crossing {
    let m = offset.x.abs().max(offset.y.abs());
    if m <= g.inner_half {
        Crossing::Pass
    } else if m <= g.outer_half() {
        Crossing::FrameHit
    } else {
        Crossing::Miss
    }
}

/// A gate that oscillates along `axis` with a triangle wave of constant speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicGateSpec {
    pub gate_id: usize,
    pub axis: Vector3<f64>,
    pub amplitude: f64,
    pub speed: f64,
    pub phase: f64,
}

impl DynamicGateSpec {
    /// Moves gate `gate` along its own lateral axis.
    pub fn lateral(gate: &Gate, amplitude: f64, speed: f64) -> Self {
        Self {
            gate_id: gate.id,
            axis: gate.lateral(),
            amplitude,
            speed,
            phase: 0.0,
        }
    }

    /// Signed displacement along the axis at time `t`. `phase` is measured
    /// in radians of the full period.
    pub fn displacement(&self, t: f64) -> f64 {
        if self.amplitude <= 0.0 || self.speed <= 0.0 {
            return 0.0;
        }
        let a = self.amplitude;
        let period = 4.0 * a / self.speed;
        let s = (self.speed * t + self.phase / (2.0 * PI) * 4.0 * a).rem_euclid(4.0 * a);
        debug_assert!(period > 0.0);
        if s <= a {
            s
        } else if s <= 3.0 * a {
            2.0 * a - s
        } else {
            s - 4.0 * a
        }
    }
}

pub fn dynamic_gate_position(spec: &DynamicGateSpec, base: &Gate, t: f64) -> Vector3<f64> {
    if spec.amplitude == 0.0 || spec.speed == 0.0 {
        return base.position;
    }
    base.position + spec.axis * spec.displacement(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub name: String,
    pub gates: Vec<Gate>,
    pub arena_min: Vector3<f64>,
    pub arena_max: Vector3<f64>,
    #[serde(default)]
    pub dynamic: Vec<DynamicGateSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    TooFewGates(usize),
    OutOfArena { gate: usize },
    Spacing { a: usize, b: usize },
    BadGeometry { gate: usize },
    NonFinite { gate: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::TooFewGates(n) => write!(f, "track needs ≥ 2 gates (found {n})"),
            Violation::OutOfArena { gate } => write!(f, "gate {gate}: center outside arena"),
            Violation::Spacing { a, b } => write!(f, "gates {a} and {b}: closer than minimum spacing"),
            Violation::BadGeometry { gate } => {
                write!(f, "gate {gate}: inner_half must be > 0 and frame_width ≥ 0")
            }
            Violation::NonFinite { gate } => write!(f, "gate {gate}: non-finite value"),
        }
    }
}

pub fn validate_track(t: &Track, min_gate_spacing: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    if t.gates.len() < 2 {
        out.push(Violation::TooFewGates(t.gates.len()));
    }
    for g in &t.gates {
        if !(g.position.iter().all(|x| x.is_finite()) && g.yaw.is_finite()) {
            out.push(Violation::NonFinite { gate: g.id });
            continue;
        }
        if !(g.inner_half > 0.0 && g.frame_width >= 0.0) {
            out.push(Violation::BadGeometry { gate: g.id });
        }
        if !t.contains(&g.position) {
            out.push(Violation::OutOfArena { gate: g.id });
        }
    }
    for w in t.gates.windows(2) {
        if (w[0].position - w[1].position).norm() < min_gate_spacing {
            out.push(Violation::Spacing { a: w[0].id, b: w[1].id });
        }
    }
    out
}

impl Track {
    pub fn new(
        name: impl Into<String>,
        gates: Vec<Gate>,
        arena_min: Vector3<f64>,
        arena_max: Vector3<f64>,
    ) -> Self {
        Self {
            name: name.into(),
            gates,
            arena_min,
            arena_max,
            dynamic: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.arena_min[i] && p[i] <= self.arena_max[i])
    }

    pub fn clamp_to_arena(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::from_fn(|i, _| p[i].clamp(self.arena_min[i], self.arena_max[i]))
    }

    /// Gate `i` as posed at time `t`, taking moving gates into account.
    pub fn gate_at(&self, i: usize, t: f64) -> Gate {
        let base = self.gates[i];
        match self.dynamic.iter().find(|d| d.gate_id == base.id) {
            Some(spec) => Gate {
                position: dynamic_gate_position(spec, &base, t),
                ..base
            },
            None => base,
        }
    }

    /// Flips every gate whose normal points against the direction of travel:
    /// gate i > 0 must face away from gate i-1, gate 0 must face gate 1.
    pub fn orient_gates(&mut self) {
        let n = self.gates.len();
        if n < 2 {
            return;
        }
        let travel: Vec<Vector3<f64>> = (0..n)
            .map(|i| {
                if i == 0 {
                    self.gates[1].position - self.gates[0].position
                } else {
                    self.gates[i].position - self.gates[i - 1].position
                }
            })
            .collect();
        for (g, dir) in self.gates.iter_mut().zip(travel) {
            if g.normal().dot(&dir) < 0.0 {
                g.yaw = wrap_angle(g.yaw + PI);
            }
        }
    }

    pub fn parse(text: &str) -> Result<Track, TrackError> {
        let mut header: Option<(String, Vector3<f64>, Vector3<f64>)> = None;
        let mut gates = Vec::new();
        let mut dynamic = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let kind = fields.next().unwrap_or_default();
            let rest: Vec<&str> = fields.collect();
            let err = |reason: String| TrackError::Parse { line: line_no, reason };
            let nums = |from: usize, count: usize| -> Result<Vec<f64>, TrackError> {
                if rest.len() != from + count {
                    return Err(err(format!(
                        "`{kind}` expects {} fields, found {}",
                        from + count,
                        rest.len()
                    )));
                }
                rest[from..]
                    .iter()
                    .map(|s| s.parse::<f64>().map_err(|_| err(format!("bad number `{s}`"))))
                    .collect()
            };
            match kind {
                "track" => {
                    if header.is_some() {
                        return Err(err("duplicate track header".into()));
                    }
                    if rest.len() != 8 || rest[1] != "arena" {
                        return Err(err(
                            "expected `track <name> arena <xmin> <ymin> <zmin> <xmax> <ymax> <zmax>`".into(),
                        ));
                    }
                    let v = nums(2, 6)?;
                    header = Some((
                        rest[0].to_string(),
                        Vector3::new(v[0], v[1], v[2]),
                        Vector3::new(v[3], v[4], v[5]),
                    ));
                }
                "gate" => {
                    let id = rest
                        .first()
                        .and_then(|s| s.parse::<usize>().ok())
                        .ok_or_else(|| err("gate id must be a non-negative integer".into()))?;
                    if id != gates.len() {
                        return Err(err(format!("gate ids must be sequential: expected {}, found {id}", gates.len())));
                    }
                    let v = nums(1, 6)?;
                    gates.push(Gate {
                        id,
                        position: Vector3::new(v[0], v[1], v[2]),
                        yaw: wrap_angle(v[3]),
                        inner_half: v[4],
                        frame_width: v[5],
                    });
                }
                "dyn" => {
                    let gate_id = rest
                        .first()
                        .and_then(|s| s.parse::<usize>().ok())
                        .ok_or_else(|| err("dyn gate id must be a non-negative integer".into()))?;
                    let v = nums(1, 6)?;
                    let axis = Vector3::new(v[0], v[1], v[2]);
                    if !(axis.norm() > 0.0) || v[3] < 0.0 || v[4] < 0.0 {
                        return Err(err("dyn needs a non-zero axis and non-negative amplitude/speed".into()));
                    }
                    dynamic.push(DynamicGateSpec {
                        gate_id,
                        axis: axis.normalize(),
                        amplitude: v[3],
                        speed: v[4],
                        phase: v[5],
                    });
                }
                other => return Err(err(format!("unknown record `{other}`"))),
            }
        }
        let (name, arena_min, arena_max) = header.ok_or(TrackError::Parse {
            line: 0,
            reason: "missing `track` header".into(),
        })?;
        if dynamic.iter().any(|d| d.gate_id >= gates.len()) {
            return Err(TrackError::Parse {
                line: 0,
                reason: "dyn references a gate that does not exist".into(),
            });
        }
        let mut track = Track {
            name,
            gates,
            arena_min,
            arena_max,
            dynamic,
        };
        track.orient_gates();
        let violations = validate_track(&track, DEFAULT_MIN_GATE_SPACING);
        if !violations.is_empty() {
            return Err(TrackError::Invalid(violations));
        }
        Ok(track)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let (a, b) = (self.arena_min, self.arena_max);
        writeln!(
            s,
            "track {} arena {} {} {} {} {} {}",
            self.name,
            fmt_num(a.x),
            fmt_num(a.y),
            fmt_num(a.z),
            fmt_num(b.x),
            fmt_num(b.y),
            fmt_num(b.z)
        )
        .unwrap();
        for g in &self.gates {
            writeln!(
                s,
                "gate {} {} {} {} {} {} {}",
                g.id,
                fmt_num(g.position.x),
                fmt_num(g.position.y),
                fmt_num(g.position.z),
                fmt_num(g.yaw),
                fmt_num(g.inner_half),
                fmt_num(g.frame_width)
            )
            .unwrap();
        }
        for d in &self.dynamic {
            writeln!(
                s,
                "dyn {} {} {} {} {} {} {}",
                d.gate_id,
                fmt_num(d.axis.x),
                fmt_num(d.axis.y),
                fmt_num(d.axis.z),
                fmt_num(d.amplitude),
                fmt_num(d.speed),
                fmt_num(d.phase)
            )
            .unwrap();
        }
        s
    }
}

/// Shortest text that parses back to the same f64.
fn fmt_num(x: f64) -> String {
    let s = format!("{x}");
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

pub fn load_track(text: &str) -> Result<Track, TrackError> {
    Track::parse(text)
}

pub fn save_track(t: &Track) -> String {
    t.to_text()
}
