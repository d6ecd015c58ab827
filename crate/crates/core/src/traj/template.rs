//! Parametric trajectory templates and the default library.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::spline::{orientation_from_tangent, CatmullRom, MIN_TANGENT_NORM};
use super::STAGE_HALF_EXTENT;
use crate::error::{Error, Result};
use crate::pose::{rot_z, Mat3, Pose6DoF, PoseSequence, Vec3};

/// Default clip length in frames.
pub const DEFAULT_FRAMES: usize = 100;
/// Default frame rate; 100 frames cover a 5 s clip.
pub const DEFAULT_FPS: f64 = 20.0;
/// Frames dropped from the head of each clip when requested.
pub const WARMUP_FRAMES: usize = 10;
/// Per-frame heading change above which a generated sequence is flagged.
pub const MAX_YAW_STEP_DEG: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateFamily {
    Line,
    Arc,
    SCurve,
    Circle,
    TurnBack180,
    InwardTurn90,
    FigureEight,
    Static,
}

impl TemplateFamily {
    pub const ALL: [TemplateFamily; 8] = [
        TemplateFamily::Line,
        TemplateFamily::Arc,
        TemplateFamily::SCurve,
        TemplateFamily::Circle,
        TemplateFamily::TurnBack180,
        TemplateFamily::InwardTurn90,
        TemplateFamily::FigureEight,
        TemplateFamily::Static,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateFamily::Line => "line",
            TemplateFamily::Arc => "arc",
            TemplateFamily::SCurve => "s_curve",
            TemplateFamily::Circle => "circle",
            TemplateFamily::TurnBack180 => "turn_back_180",
            TemplateFamily::InwardTurn90 => "inward_turn_90",
            TemplateFamily::FigureEight => "figure_eight",
            TemplateFamily::Static => "static",
        }
    }
}

impl fmt::Display for TemplateFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A trajectory shape in canonical space.
///
/// Control points must fit inside the stage up to a translation: the
/// placement step in [`super::compose_scene`] re-positions every template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTemplate {
    pub id: String,
    pub family: TemplateFamily,
    pub control_points: Vec<[f64; 3]>,
    /// Seconds.
    pub duration: f64,
    /// Family-specific scalars (`radius_m`, `turn_deg`, `length_m`, ...).
    pub params: BTreeMap<String, f64>,
}

impl TrajectoryTemplate {
    pub fn new(
        id: impl Into<String>,
        family: TemplateFamily,
        control_points: Vec<Vec3>,
        params: BTreeMap<String, f64>,
    ) -> Result<Self> {
        let id = id.into();
        let n = control_points.len();
        match family {
            TemplateFamily::Static if n != 1 => {
                return Err(Error::validation(
                    format!("template {id}"),
                    format!("static templates take exactly 1 control point, got {n}"),
                ))
            }
            TemplateFamily::Static => {}
            _ if n < 2 => {
                return Err(Error::validation(
                    format!("template {id}"),
                    format!("{family} needs at least 2 control points, got {n}"),
                ))
            }
            _ => {}
        }
        if control_points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::validation(format!("template {id}"), "non-finite control point"));
        }
        let (lo, hi) = xy_bounds(control_points.iter());
        let extent = (hi - lo).amax();
        if extent > 2.0 * STAGE_HALF_EXTENT {
            return Err(Error::validation(
                format!("template {id}"),
                format!("extent {extent} m does not fit the stage"),
            ));
        }
        Ok(Self {
            id,
            family,
            control_points: control_points.iter().map(|p| [p.x, p.y, p.z]).collect(),
            duration: DEFAULT_FRAMES as f64 / DEFAULT_FPS,
            params,
        })
    }

    /// A single motionless pose at `at` facing `yaw_deg`.
    pub fn stationary(id: impl Into<String>, at: Vec3, yaw_deg: f64) -> Result<Self> {
        let params = BTreeMap::from([("yaw_deg".to_string(), yaw_deg)]);
        Self::new(id, TemplateFamily::Static, vec![at], params)
    }

    pub fn points(&self) -> Vec<Vec3> {
        self.control_points.iter().map(|p| Vec3::from(*p)).collect()
    }

    fn param(&self, key: &str) -> Option<f64> {
        self.params.get(key).copied()
    }
}

pub(crate) fn xy_bounds<'a>(points: impl Iterator<Item = &'a Vec3>) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    lo.z = 0.0;
    hi.z = 0.0;
    (lo, hi)
}

/// Samples `frames` poses at constant speed along the template.
///
/// Frames whose tangent is degenerate keep the previous rotation (identity
/// on the first frame).
pub fn generate_template(template: &TrajectoryTemplate, frames: usize, fps: f64) -> Result<PoseSequence> {
    let points = template.points();
    if template.family == TemplateFamily::Static {
        if frames == 0 {
            return Err(Error::validation("frame count", "must be >= 1"));
        }
        let yaw = template.param("yaw_deg").unwrap_or(0.0);
        let r = if yaw == 0.0 { Mat3::identity() } else { rot_z(yaw) };
        let pose = Pose6DoF::from_parts_unchecked(r, points[0]);
        return PoseSequence::new(fps, vec![pose; frames]);
    }
    if frames < 2 {
        return Err(Error::validation(
            "frame count",
            format!("moving templates need >= 2 frames, got {frames}"),
        ));
    }
    if points.windows(2).all(|w| w[0] == w[1]) {
        return Err(Error::DegenerateTemplate {
            id: template.id.clone(),
            reason: "all control points coincide".into(),
        });
    }
    let curve = CatmullRom::new(&points)?;
    let mut last = Mat3::identity();
    let poses = curve
        .sample_uniform(frames)
        .into_iter()
        .map(|(pos, tangent)| {
            if tangent.norm() > MIN_TANGENT_NORM {
                last = orientation_from_tangent(&tangent).expect("non-degenerate tangent");
            }
            Pose6DoF::from_parts_unchecked(last, pos)
        })
        .collect();
    PoseSequence::new(fps, poses)
}

/// Frames `f` whose heading differs from frame `f - 1` by more than
/// [`MAX_YAW_STEP_DEG`].
pub fn yaw_rate_violations(seq: &PoseSequence) -> Vec<usize> {
    seq.poses()
        .windows(2)
        .enumerate()
        .filter(|(_, w)| crate::pose::angle_between_unchecked(w[0].rotation(), w[1].rotation()) > MAX_YAW_STEP_DEG)
        .map(|(i, _)| i + 1)
        .collect()
}

fn v(x: f64, y: f64) -> Vec3 {
    Vec3::new(x, y, 0.0)
}

/// Shifts points so the xy bounding box is centred on the origin.
fn centred(points: Vec<Vec3>) -> Vec<Vec3> {
    let (lo, hi) = xy_bounds(points.iter());
    let c = (lo + hi) * 0.5;
    points.into_iter().map(|p| p - c).collect()
}

fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn make(family: TemplateFamily, index: usize, pts: Vec<Vec3>, p: &[(&str, f64)]) -> TrajectoryTemplate {
    let id = format!("{}-{index:02}", family.name());
    TrajectoryTemplate::new(id, family, centred(pts), params(p)).expect("library template is valid")
}

fn circle_points(radius: f64, from_deg: f64, sweep_deg: f64, pieces: usize) -> Vec<Vec3> {
    (0..=pieces)
        .map(|i| {
            let a = (from_deg + sweep_deg * i as f64 / pieces as f64).to_radians();
            v(radius * a.cos(), radius * a.sin())
        })
        .collect()
}

/// Straight walk along `+x`.
pub fn line(index: usize, length: f64) -> TrajectoryTemplate {
    let pts = (0..4).map(|i| v(length * i as f64 / 3.0, 0.0)).collect();
    make(TemplateFamily::Line, index, pts, &[("length_m", length)])
}

/// Counter-clockwise arc starting with heading `+x`.
pub fn arc(index: usize, radius: f64, sweep_deg: f64) -> TrajectoryTemplate {
    let pieces = ((sweep_deg / 22.5).ceil() as usize).max(2);
    let pts = circle_points(radius, -90.0, sweep_deg, pieces);
    make(
        TemplateFamily::Arc,
        index,
        pts,
        &[("radius_m", radius), ("turn_deg", sweep_deg)],
    )
}

/// One full sine period along `+x`.
pub fn s_curve(index: usize, length: f64, amplitude: f64) -> TrajectoryTemplate {
    let pts = (0..=8)
        .map(|i| {
            let s = i as f64 / 8.0;
            v(length * s, amplitude * (2.0 * PI * s).sin())
        })
        .collect();
    make(
        TemplateFamily::SCurve,
        index,
        pts,
        &[("length_m", length), ("amplitude_m", amplitude)],
    )
}

/// Closed counter-clockwise loop.
pub fn circle(index: usize, radius: f64) -> TrajectoryTemplate {
    let pts = circle_points(radius, -90.0, 360.0, 12);
    make(
        TemplateFamily::Circle,
        index,
        pts,
        &[("radius_m", radius), ("turn_deg", 360.0)],
    )
}

/// Out along `+x`, U-turn, and back along `-x`.
pub fn turn_back_180(index: usize, leg: f64, radius: f64) -> TrajectoryTemplate {
    let mut pts = vec![v(0.0, 0.0), v(leg / 2.0, 0.0), v(leg, 0.0)];
    for deg in [-45.0f64, 0.0, 45.0] {
        let a = deg.to_radians();
        pts.push(v(leg + radius * a.cos(), radius + radius * a.sin()));
    }
    pts.extend([v(leg, 2.0 * radius), v(leg / 2.0, 2.0 * radius), v(0.0, 2.0 * radius)]);
    make(
        TemplateFamily::TurnBack180,
        index,
        pts,
        &[("length_m", leg), ("radius_m", radius), ("turn_deg", 180.0)],
    )
}

/// Straight leg, a rounded quarter turn to the left (`side = 1`) or right
/// (`side = -1`), and a second straight leg.
pub fn inward_turn_90(index: usize, leg: f64, radius: f64, side: f64) -> TrajectoryTemplate {
    let a = 45f64.to_radians();
    let pts = vec![
        v(0.0, 0.0),
        v(leg / 2.0, 0.0),
        v(leg - radius, 0.0),
        v(leg - radius + radius * a.sin(), side * radius * (1.0 - a.cos())),
        v(leg, side * radius),
        v(leg, side * (radius + leg) / 2.0),
        v(leg, side * leg),
    ];
    make(
        TemplateFamily::InwardTurn90,
        index,
        pts,
        &[("length_m", leg), ("radius_m", radius), ("turn_deg", 90.0 * side)],
    )
}

/// Lemniscate `x = w·sin θ`, `y = h·sin θ·cos θ`.
pub fn figure_eight(index: usize, half_width: f64, height: f64) -> TrajectoryTemplate {
    let pts = (0..=16)
        .map(|i| {
            let th = 2.0 * PI * i as f64 / 16.0;
            v(half_width * th.sin(), height * th.sin() * th.cos())
        })
        .collect();
    make(
        TemplateFamily::FigureEight,
        index,
        pts,
        &[("half_width_m", half_width), ("height_m", height)],
    )
}

/// Standing still, facing `yaw_deg`.
pub fn stationary(index: usize, yaw_deg: f64) -> TrajectoryTemplate {
    TrajectoryTemplate::stationary(
        format!("{}-{index:02}", TemplateFamily::Static.name()),
        Vec3::zeros(),
        yaw_deg,
    )
    .expect("library template is valid")
}

/// The built-in library: twelve parameter settings for each of the eight
/// families.
pub fn default_library() -> Vec<TrajectoryTemplate> {
    let mut lib = Vec::with_capacity(96);
    for i in 0..12 {
        lib.push(line(i, 1.0 + 0.2 * i as f64));
    }
    let mut i = 0;
    for r in [1.0, 1.5, 2.0] {
        for sweep in [45.0, 90.0, 135.0, 180.0] {
            lib.push(arc(i, r, sweep));
            i += 1;
        }
    }
    let mut i = 0;
    for len in [1.5, 2.0, 2.5, 3.0] {
        for amp in [0.2, 0.35, 0.5] {
            lib.push(s_curve(i, len, amp));
            i += 1;
        }
    }
    for i in 0..12 {
        lib.push(circle(i, 0.5 + 0.1 * i as f64));
    }
    let mut i = 0;
    for leg in [1.0, 1.5, 2.0, 2.5] {
        for r in [0.3, 0.5, 0.7] {
            lib.push(turn_back_180(i, leg, r));
            i += 1;
        }
    }
    let mut i = 0;
    for leg in [1.0, 1.5, 2.0] {
        for r in [0.25, 0.4] {
            for side in [1.0, -1.0] {
                lib.push(inward_turn_90(i, leg, r, side));
                i += 1;
            }
        }
    }
    let mut i = 0;
    for w in [1.0, 1.2, 1.4, 1.6] {
        for h in [0.6, 0.8, 1.0] {
            lib.push(figure_eight(i, w, h));
            i += 1;
        }
    }
    for i in 0..12 {
        lib.push(stationary(i, 30.0 * i as f64));
    }
    lib
}
