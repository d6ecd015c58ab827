//! Surround camera rig, pinhole projection and per-camera depth ordering.
//!
//! Camera frames follow the usual vision convention: `+x` right, `+y` down,
//! `+z` forward. Extrinsics are camera-to-world.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{Mat3, Pose6DoF, Vec3};
use crate::traj::SceneComposition;

pub const IMAGE_WIDTH: u32 = 672;
pub const IMAGE_HEIGHT: u32 = 384;
pub const CAMERA_COUNT: usize = 12;
pub const AZIMUTH_STEP_DEG: f64 = 360.0 / CAMERA_COUNT as f64;
pub const DEFAULT_RADIUS: f64 = 8.0;
pub const DEFAULT_HEIGHT: f64 = 2.0;
pub const DEFAULT_HFOV_DEG: f64 = 60.0;
pub const NEAR_PLANE: f64 = 0.01;

/// Header line of the 2D track CSV.
pub const TRACK_CSV_HEADER: &str = "frame,entity_id,u,v,depth";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Square pixels, principal point at the image centre.
    pub fn from_hfov(hfov_deg: f64, width: u32, height: u32) -> Result<Self> {
        if !(hfov_deg > 0.0 && hfov_deg < 180.0) {
            return Err(Error::OutOfRange {
                what: "horizontal field of view",
                value: hfov_deg,
                min: 0.0,
                max: 180.0,
            });
        }
        let fx = 0.5 * width as f64 / (0.5 * hfov_deg).to_radians().tan();
        let k = Self {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx.is_finite()
            && self.fy.is_finite()
            && self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::validation(
                "intrinsics",
                format!("{self:?} violates fx, fy > 0 and principal point inside the image"),
            ))
        }
    }
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self::from_hfov(DEFAULT_HFOV_DEG, IMAGE_WIDTH, IMAGE_HEIGHT).expect("default intrinsics")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub extrinsic: Pose6DoF,
    pub intrinsics: Intrinsics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl CameraModel {
    pub fn new(extrinsic: Pose6DoF, intrinsics: Intrinsics) -> Result<Self> {
        intrinsics.validate()?;
        Ok(Self { extrinsic, intrinsics })
    }

    pub fn position(&self) -> Vec3 {
        *self.extrinsic.translation()
    }

    /// Unit optical axis in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.extrinsic.rotation().column(2).into_owned()
    }

    pub fn right(&self) -> Vec3 {
        self.extrinsic.rotation().column(0).into_owned()
    }

    pub fn to_camera(&self, p_world: &Vec3) -> Vec3 {
        self.extrinsic.rotation().transpose() * (p_world - self.extrinsic.translation())
    }

    /// Pinhole projection; `(u, v)` may fall outside the image.
    pub fn project(&self, p_world: &Vec3) -> Result<Projection> {
        let pc = self.to_camera(p_world);
        if pc.z <= NEAR_PLANE {
            return Err(Error::BehindCamera {
                depth: pc.z,
                near: NEAR_PLANE,
            });
        }
        let k = &self.intrinsics;
        Ok(Projection {
            u: k.fx * pc.x / pc.z + k.cx,
            v: k.fy * pc.y / pc.z + k.cy,
            depth: pc.z,
        })
    }

    /// In front of the near plane and inside the image rectangle.
    pub fn sees(&self, p_world: &Vec3) -> bool {
        match self.project(p_world) {
            Ok(p) => {
                p.u >= 0.0 && p.u < self.intrinsics.width as f64 && p.v >= 0.0 && p.v < self.intrinsics.height as f64
            }
            Err(_) => false,
        }
    }
}

/// Free-function form of [`CameraModel::project`].
pub fn project_point(cam: &CameraModel, p_world: &Vec3) -> Result<Projection> {
    cam.project(p_world)
}

/// Camera-to-world pose at `eye` looking at `target` with `+z` up.
pub fn look_at(eye: &Vec3, target: &Vec3) -> Result<Pose6DoF> {
    let fwd = target - eye;
    if fwd.norm() < 1e-12 {
        return Err(Error::validation("look-at", "eye coincides with target"));
    }
    let fwd = fwd.normalize();
    let right = fwd.cross(&Vec3::z());
    if right.norm() < 1e-9 {
        return Err(Error::validation("look-at", "viewing direction parallel to up"));
    }
    let right = right.normalize();
    let down = fwd.cross(&right);
    Pose6DoF::new(Mat3::from_columns(&[right, down, fwd]), *eye)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    cameras: Vec<CameraModel>,
    look_at: Vec3,
    radius: f64,
    height: f64,
}

/// Twelve cameras every 30° on a circle of `radius` at `height` above
/// `center`, all aimed at `center`.
pub fn build_rig(center: Vec3, radius: f64, height: f64, intrinsics: Intrinsics) -> Result<CameraRig> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::validation("rig radius", format!("must be > 0, got {radius}")));
    }
    if !height.is_finite() {
        return Err(Error::validation("rig height", "must be finite"));
    }
    intrinsics.validate()?;
    let cameras = (0..CAMERA_COUNT)
        .map(|k| {
            let (s, c) = CameraRig::azimuth_deg(k).to_radians().sin_cos();
            let eye = center + Vec3::new(radius * c, radius * s, height);
            CameraModel::new(look_at(&eye, &center)?, intrinsics)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CameraRig {
        cameras,
        look_at: center,
        radius,
        height,
    })
}

impl CameraRig {
    pub fn azimuth_deg(index: usize) -> f64 {
        AZIMUTH_STEP_DEG * index as f64
    }

    pub fn default_rig() -> CameraRig {
        build_rig(Vec3::zeros(), DEFAULT_RADIUS, DEFAULT_HEIGHT, Intrinsics::default()).expect("default rig")
    }

    pub fn cameras(&self) -> &[CameraModel] {
        &self.cameras
    }

    pub fn camera(&self, index: usize) -> Result<&CameraModel> {
        self.cameras.get(index).ok_or(Error::OutOfRange {
            what: "camera index",
            value: index as f64,
            min: 0.0,
            max: (CAMERA_COUNT - 1) as f64,
        })
    }

    pub fn look_at(&self) -> Vec3 {
        self.look_at
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn to_document(&self) -> RigDocument {
        RigDocument {
            format_version: 1,
            look_at: self.look_at.into(),
            radius: self.radius,
            height: self.height,
            cameras: self
                .cameras
                .iter()
                .enumerate()
                .map(|(index, c)| CameraEntry {
                    index,
                    azimuth_deg: Self::azimuth_deg(index),
                    extrinsic: c.extrinsic.to_row(),
                    intrinsics: c.intrinsics,
                })
                .collect(),
        }
    }

    /// Rebuilds a rig from its exported form, re-checking every invariant.
    pub fn from_document(doc: &RigDocument) -> Result<CameraRig> {
        if doc.cameras.len() != CAMERA_COUNT {
            return Err(Error::validation(
                "rig.cameras",
                format!("expected {CAMERA_COUNT}, got {}", doc.cameras.len()),
            ));
        }
        let look_at = Vec3::from(doc.look_at);
        let cameras = doc
            .cameras
            .iter()
            .map(|c| CameraModel::new(Pose6DoF::from_row(&c.extrinsic)?, c.intrinsics))
            .collect::<Result<Vec<_>>>()?;
        let rig = CameraRig {
            cameras,
            look_at,
            radius: doc.radius,
            height: doc.height,
        };
        for (k, cam) in rig.cameras.iter().enumerate() {
            if rig.axis_miss_angle(k) > 1e-6 {
                return Err(Error::validation(
                    format!("rig.cameras[{k}]"),
                    "optical axis does not pass through look_at",
                ));
            }
            let rel = cam.position() - look_at;
            let az = rel.y.atan2(rel.x).to_degrees().rem_euclid(360.0);
            let want = Self::azimuth_deg(k);
            let diff = (az - want + 180.0).rem_euclid(360.0) - 180.0;
            if diff.abs() > 1e-6 {
                return Err(Error::validation(
                    format!("rig.cameras[{k}]"),
                    format!("azimuth {az}° is not {want}°"),
                ));
            }
        }
        Ok(rig)
    }

    /// Angle (radians) between camera `k`'s optical axis and the ray to
    /// the look-at point.
    pub fn axis_miss_angle(&self, k: usize) -> f64 {
        let cam = &self.cameras[k];
        let to_center = (self.look_at - cam.position()).normalize();
        cam.forward().dot(&to_center).clamp(-1.0, 1.0).acos()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub index: usize,
    pub azimuth_deg: f64,
    /// Camera-to-world pose, rotation row-major then translation.
    pub extrinsic: [f64; 12],
    pub intrinsics: Intrinsics,
}

/// Exported rig description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigDocument {
    pub format_version: u32,
    pub look_at: [f64; 3],
    pub radius: f64,
    pub height: f64,
    pub cameras: Vec<CameraEntry>,
}

/// Entity ids in front of the camera sorted near to far, plus the ids that
/// were dropped for being behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionOrder {
    pub order: Vec<String>,
    pub excluded: Vec<(String, f64)>,
}

/// Depth ordering of entity centres at `frame`; ties break by entity id.
pub fn occlusion_order(cam: &CameraModel, scene: &SceneComposition, frame: usize) -> Result<OcclusionOrder> {
    if frame >= scene.frame_count() {
        return Err(Error::OutOfRange {
            what: "frame",
            value: frame as f64,
            min: 0.0,
            max: (scene.frame_count() - 1) as f64,
        });
    }
    let mut visible = Vec::new();
    let mut excluded = Vec::new();
    for e in scene.entities() {
        let p = e.trajectory.poses()[frame].translation();
        match cam.project(p) {
            Ok(proj) => visible.push((proj.depth, e.id.clone())),
            Err(_) => excluded.push((e.id.clone(), cam.to_camera(p).z)),
        }
    }
    visible.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    Ok(OcclusionOrder {
        order: visible.into_iter().map(|(_, id)| id).collect(),
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackPoint {
    pub frame: usize,
    pub entity_id: String,
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Projects every entity centre at every frame; points behind the camera
/// are left out.
pub fn project_tracks(cam: &CameraModel, scene: &SceneComposition) -> Vec<TrackPoint> {
    let mut out = Vec::new();
    for frame in 0..scene.frame_count() {
        for e in scene.entities() {
            if let Ok(p) = cam.project(e.trajectory.poses()[frame].translation()) {
                out.push(TrackPoint {
                    frame,
                    entity_id: e.id.clone(),
                    u: p.u,
                    v: p.v,
                    depth: p.depth,
                });
            }
        }
    }
    out
}

/// CSV with header [`TRACK_CSV_HEADER`].
pub fn tracks_to_csv(points: &[TrackPoint]) -> String {
    let mut s = String::from(TRACK_CSV_HEADER);
    s.push('\n');
    for p in points {
        let _ = writeln!(s, "{},{},{},{},{}", p.frame, p.entity_id, p.u, p.v, p.depth);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::PoseSequence;
    use crate::traj::{SceneEntity, StageBounds};
    use approx::assert_abs_diff_eq;

    #[test]
    fn opposite_cameras_are_symmetric() {
        let c = Vec3::new(0.5, -0.3, 0.0);
        let rig = build_rig(c, 8.0, 2.0, Intrinsics::default()).unwrap();
        let s = rig.cameras()[0].position() + rig.cameras()[6].position();
        assert_abs_diff_eq!(s, 2.0 * (c + Vec3::new(0.0, 0.0, 2.0)), epsilon = 1e-12);
    }

    #[test]
    fn even_azimuths() {
        assert_eq!(CameraRig::azimuth_deg(3) - CameraRig::azimuth_deg(2), 30.0);
        let rig = CameraRig::default_rig();
        for k in 0..CAMERA_COUNT {
            assert!(rig.axis_miss_angle(k) < 1e-6);
        }
    }

    #[test]
    fn centre_projects_to_principal_point() {
        let rig = CameraRig::default_rig();
        for cam in rig.cameras() {
            let p = cam.project(&Vec3::zeros()).unwrap();
            assert_abs_diff_eq!(p.u, cam.intrinsics.cx, epsilon = 1e-6);
            assert_abs_diff_eq!(p.v, cam.intrinsics.cy, epsilon = 1e-6);
            assert_abs_diff_eq!(p.depth, (8.0f64 * 8.0 + 2.0 * 2.0).sqrt(), epsilon = 1e-9);
        }
    }

    #[test]
    fn lateral_offset_similar_triangles() {
        let cam = CameraRig::default_rig().cameras()[4];
        let d = 5.0;
        let p = cam.position() + cam.forward() * d + cam.right();
        let pr = cam.project(&p).unwrap();
        assert_abs_diff_eq!(pr.u, cam.intrinsics.cx + cam.intrinsics.fx / d, epsilon = 1e-9);
        assert_abs_diff_eq!(pr.v, cam.intrinsics.cy, epsilon = 1e-9);
        assert_abs_diff_eq!(pr.depth, d, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let cam = CameraRig::default_rig().cameras()[0];
        let p = cam.position() - cam.forward();
        assert_eq!(cam.project(&p).unwrap_err().kind(), "behind_camera");
    }

    #[test]
    fn bad_intrinsics() {
        let k = Intrinsics {
            cx: 700.0,
            ..Default::default()
        };
        assert!(build_rig(Vec3::zeros(), 8.0, 2.0, k).is_err());
        assert!(build_rig(Vec3::zeros(), 0.0, 2.0, Intrinsics::default()).is_err());
    }

    #[test]
    fn rig_document_round_trip() {
        let rig = CameraRig::default_rig();
        let doc = rig.to_document();
        let json = serde_json::to_string(&doc).unwrap();
        let back: RigDocument = serde_json::from_str(&json).unwrap();
        let rig2 = CameraRig::from_document(&back).unwrap();
        assert_eq!(rig2, rig);
        let mut broken = doc.clone();
        broken.cameras.pop();
        assert!(CameraRig::from_document(&broken).is_err());
    }

    fn scene_of(tracks: Vec<(&str, Vec<Vec3>)>) -> SceneComposition {
        let entities = tracks
            .into_iter()
            .map(|(id, pts)| SceneEntity {
                id: id.into(),
                prompt: String::new(),
                scale: 1.0,
                trajectory: PoseSequence::new(20.0, pts.into_iter().map(Pose6DoF::from_translation).collect()).unwrap(),
            })
            .collect();
        SceneComposition::new(entities, StageBounds::default(), "test").unwrap()
    }

    #[test]
    fn ordering_basic() {
        let cam = CameraRig::default_rig().cameras()[0]; // at +x looking toward -x
        let single = scene_of(vec![("a", vec![Vec3::zeros()])]);
        assert_eq!(occlusion_order(&cam, &single, 0).unwrap().order, vec!["a"]);
        let two = scene_of(vec![
            ("far", vec![Vec3::new(-1.0, 0.0, 0.0)]),
            ("near", vec![Vec3::new(1.0, 0.0, 0.0)]),
        ]);
        assert_eq!(occlusion_order(&cam, &two, 0).unwrap().order, vec!["near", "far"]);
        assert!(occlusion_order(&cam, &two, 1).is_err());
    }

    #[test]
    fn track_csv_format() {
        let cam = CameraRig::default_rig().cameras()[0];
        let scene = scene_of(vec![("a", vec![Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0)])]);
        let csv = tracks_to_csv(&project_tracks(&cam, &scene));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TRACK_CSV_HEADER);
        assert_eq!(lines.len(), 3);
        let f: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(&f[..2], &["0", "a"]);
        assert!((f[2].parse::<f64>().unwrap() - 336.0).abs() < 1e-6);
        assert!((f[3].parse::<f64>().unwrap() - 192.0).abs() < 1e-6);
    }
}
