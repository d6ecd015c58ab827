//! Centripetal Catmull-Rom splines with analytic derivatives and an
//! arc-length parameterization.

use crate::error::{Error, Result};
use crate::pose::{Mat3, Vec3};

/// Tangents at or below this norm carry no usable direction.
pub const MIN_TANGENT_NORM: f64 = 1e-8;

// 5-point Gauss-Legendre rule on [-1, 1].
const GL_NODES: [f64; 5] = [
    0.0,
    -0.538_469_310_105_683_1,
    0.538_469_310_105_683_1,
    -0.906_179_845_938_664,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
    0.236_926_885_056_189_1,
];
const GL_PANELS: usize = 16;

/// `((tb - t) a + (t - ta) b) / (tb - ta)` and its derivative in `t`, given
/// the derivatives of `a` and `b`. A zero-length interval collapses to `a`.
#[inline]
fn blend(a: (Vec3, Vec3), b: (Vec3, Vec3), ta: f64, tb: f64, t: f64) -> (Vec3, Vec3) {
    let h = tb - ta;
    if h == 0.0 {
        return a;
    }
    let (wa, wb) = ((tb - t) / h, (t - ta) / h);
    let val = a.0 * wa + b.0 * wb;
    let der = (b.0 - a.0) / h + a.1 * wa + b.1 * wb;
    (val, der)
}

/// One cubic piece between `p[1]` and `p[2]`.
#[derive(Debug, Clone, Copy)]
struct Segment {
    p: [Vec3; 4],
    t: [f64; 4],
}

impl Segment {
    fn new(p: [Vec3; 4]) -> Self {
        let mut t = [0.0; 4];
        for i in 1..4 {
            t[i] = t[i - 1] + (p[i] - p[i - 1]).norm().sqrt();
        }
        Segment { p, t }
    }

    fn span(&self) -> (f64, f64) {
        (self.t[1], self.t[2])
    }

    /// Position and `d/dt` via the Barry-Goldman pyramid.
    fn eval(&self, t: f64) -> (Vec3, Vec3) {
        let z = Vec3::zeros();
        let [p0, p1, p2, p3] = self.p;
        let [t0, t1, t2, t3] = self.t;
        let a1 = blend((p0, z), (p1, z), t0, t1, t);
        let a2 = blend((p1, z), (p2, z), t1, t2, t);
        let a3 = blend((p2, z), (p3, z), t2, t3, t);
        let b1 = blend(a1, a2, t0, t2, t);
        let b2 = blend(a2, a3, t1, t3, t);
        blend(b1, b2, t1, t2, t)
    }

    fn speed(&self, t: f64) -> f64 {
        self.eval(t).1.norm()
    }

    /// Arc length from the segment start to `t`.
    fn length_to(&self, t: f64) -> f64 {
        let (a, _) = self.span();
        if t <= a {
            return 0.0;
        }
        let w = (t - a) / GL_PANELS as f64;
        let mut sum = 0.0;
        for k in 0..GL_PANELS {
            let mid = a + w * (k as f64 + 0.5);
            for (x, wt) in GL_NODES.iter().zip(GL_WEIGHTS) {
                sum += wt * self.speed(mid + 0.5 * w * x);
            }
        }
        sum * 0.5 * w
    }
}

/// Catmull-Rom curve through the given control points. The boundary
/// segments use phantom points reflected through the end points.
#[derive(Debug, Clone)]
pub struct CatmullRom {
    points: Vec<Vec3>,
    segments: Vec<Segment>,
}

impl CatmullRom {
    pub fn new(points: &[Vec3]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::validation(
                "control points",
                format!("need at least 2, got {}", points.len()),
            ));
        }
        if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::validation("control points", "non-finite coordinate"));
        }
        let n = points.len();
        let mut ext = Vec::with_capacity(n + 2);
        ext.push(points[0] * 2.0 - points[1]);
        ext.extend_from_slice(points);
        ext.push(points[n - 1] * 2.0 - points[n - 2]);
        let segments = ext.windows(4).map(|w| Segment::new([w[0], w[1], w[2], w[3]])).collect();
        Ok(Self {
            points: points.to_vec(),
            segments,
        })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    /// Position and `d(position)/du` at the global parameter `u ∈ [0, 1]`;
    /// each segment covers an equal share of `u`.
    pub fn eval(&self, u: f64) -> Result<(Vec3, Vec3)> {
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::OutOfRange {
                what: "spline parameter",
                value: u,
                min: 0.0,
                max: 1.0,
            });
        }
        let m = self.segments.len();
        let scaled = u * m as f64;
        let idx = (scaled.floor() as usize).min(m - 1);
        let local = scaled - idx as f64;
        let seg = &self.segments[idx];
        let (a, b) = seg.span();
        let (mut pos, der) = seg.eval(a + local * (b - a));
        if local == 0.0 {
            pos = self.points[idx];
        } else if local == 1.0 {
            pos = self.points[idx + 1];
        }
        Ok((pos, der * (b - a) * m as f64))
    }

    fn segment_lengths(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.length_to(s.span().1)).collect()
    }

    /// Samples `count` points equally spaced in arc length, returning
    /// positions and unit-free tangents (`d/dt` within the segment).
    pub fn sample_uniform(&self, count: usize) -> Vec<(Vec3, Vec3)> {
        let lengths = self.segment_lengths();
        let total: f64 = lengths.iter().sum();
        let last = self.points.len() - 1;
        let mut out = Vec::with_capacity(count);
        for k in 0..count {
            if k == 0 {
                let s = &self.segments[0];
                out.push((self.points[0], s.eval(s.span().0).1));
                continue;
            }
            if k + 1 == count {
                let s = &self.segments[last - 1];
                out.push((self.points[last], s.eval(s.span().1).1));
                continue;
            }
            let mut target = total * k as f64 / (count - 1) as f64;
            let mut idx = 0;
            while idx + 1 < lengths.len() && target > lengths[idx] {
                target -= lengths[idx];
                idx += 1;
            }
            let seg = &self.segments[idx];
            let t = invert_length(seg, target.min(lengths[idx]), lengths[idx]);
            out.push(seg.eval(t));
        }
        out
    }

    /// Total arc length.
    pub fn length(&self) -> f64 {
        self.segment_lengths().iter().sum()
    }
}

/// Safeguarded Newton solve for `length_to(t) = target` inside `seg`.
fn invert_length(seg: &Segment, target: f64, seg_len: f64) -> f64 {
    let (mut lo, mut hi) = seg.span();
    if seg_len <= 0.0 {
        return lo;
    }
    let mut t = lo + (hi - lo) * (target / seg_len);
    for _ in 0..100 {
        let g = seg.length_to(t) - target;
        if g.abs() < 1e-13 {
            break;
        }
        if g > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let v = seg.speed(t);
        let next = if v > 0.0 { t - g / v } else { f64::NAN };
        t = if next.is_finite() && next > lo && next < hi {
            next
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-15 {
            break;
        }
    }
    t
}

/// Free-function entry point: position and analytic tangent at `u`.
pub fn eval_spline(control_points: &[Vec3], u: f64) -> Result<(Vec3, Vec3)> {
    CatmullRom::new(control_points)?.eval(u)
}

/// Heading rotation for a tangent: body `+x` along the tangent, zero roll,
/// `+z` up.
pub fn orientation_from_tangent(tangent: &Vec3) -> Result<Mat3> {
    let norm = tangent.norm();
    if norm.is_nan() || norm <= MIN_TANGENT_NORM {
        return Err(Error::DegenerateTangent { norm });
    }
    let yaw = tangent.y.atan2(tangent.x);
    let pitch = (tangent.z / norm).clamp(-1.0, 1.0).asin();
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    // Rz(yaw) · Ry(-pitch)
    Ok(Mat3::new(cy * cp, -sy, -cy * sp, sy * cp, cy, -sy * sp, sp, 0.0, cp))
}

/// `(yaw, pitch, roll)` in degrees for `R = Rz(yaw)·Ry(-pitch)·Rx(roll)`.
pub fn yaw_pitch_roll(r: &Mat3) -> (f64, f64, f64) {
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    let pitch = r[(2, 0)].clamp(-1.0, 1.0).asin();
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    (yaw.to_degrees(), pitch.to_degrees(), roll.to_degrees())
}
