//! Trajectory templates and multi-entity scene composition.

pub mod spline;
pub mod template;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{rot_z, Pose6DoF, PoseSequence, Vec3};

pub use spline::{eval_spline, orientation_from_tangent, yaw_pitch_roll, CatmullRom};
pub use template::{
    default_library, generate_template, yaw_rate_violations, TemplateFamily, TrajectoryTemplate, DEFAULT_FPS,
    DEFAULT_FRAMES, WARMUP_FRAMES,
};

/// Half the side of the square stage, meters.
pub const STAGE_HALF_EXTENT: f64 = 2.5;
/// Maximum entities per scene.
pub const MAX_ENTITIES: usize = 3;
/// Minimum centre-to-centre distance between entities, meters.
pub const DEFAULT_CLEARANCE: f64 = 0.5;
pub const DEFAULT_MAX_RETRIES: usize = 64;
/// Size ratio applied to animals.
pub const ANIMAL_SCALE: f64 = 0.6;

// slack for rounding in the rigid placement
const BOUNDS_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Human,
    Animal,
}

impl EntityKind {
    pub fn scale_factor(self) -> f64 {
        match self {
            EntityKind::Human => 1.0,
            EntityKind::Animal => ANIMAL_SCALE,
        }
    }
}

/// Axis-aligned square stage centred at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageBounds {
    pub half_extent: f64,
}

impl Default for StageBounds {
    fn default() -> Self {
        Self {
            half_extent: STAGE_HALF_EXTENT,
        }
    }
}

impl StageBounds {
    pub fn contains_xy(&self, p: &Vec3) -> bool {
        let h = self.half_extent + BOUNDS_EPS;
        p.x.abs() <= h && p.y.abs() <= h
    }

    pub fn corners(&self) -> [Vec3; 4] {
        let h = self.half_extent;
        [
            Vec3::new(-h, -h, 0.0),
            Vec3::new(h, -h, 0.0),
            Vec3::new(h, h, 0.0),
            Vec3::new(-h, h, 0.0),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneEntity {
    pub id: String,
    pub prompt: String,
    pub scale: f64,
    pub trajectory: PoseSequence,
}

/// One to three entities moving on the stage, sharing frame count and rate.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneComposition {
    entities: Vec<SceneEntity>,
    stage: StageBounds,
    location_tag: String,
}

impl SceneComposition {
    pub fn new(entities: Vec<SceneEntity>, stage: StageBounds, location_tag: impl Into<String>) -> Result<Self> {
        if entities.is_empty() || entities.len() > MAX_ENTITIES {
            return Err(Error::validation(
                "entities",
                format!("need 1..={MAX_ENTITIES}, got {}", entities.len()),
            ));
        }
        let frames = entities[0].trajectory.len();
        let fps = entities[0].trajectory.fps();
        for (i, e) in entities.iter().enumerate() {
            if e.trajectory.len() != frames {
                return Err(Error::validation(
                    format!("entities[{i}].poses"),
                    format!("frame count {} differs from {frames}", e.trajectory.len()),
                ));
            }
            if e.trajectory.fps() != fps {
                return Err(Error::validation(
                    format!("entities[{i}].fps"),
                    format!("{} differs from {fps}", e.trajectory.fps()),
                ));
            }
            if !(e.scale.is_finite() && e.scale > 0.0) {
                return Err(Error::validation(format!("entities[{i}].scale"), "must be > 0"));
            }
            if entities[..i].iter().any(|o| o.id == e.id) {
                return Err(Error::validation(
                    format!("entities[{i}].id"),
                    format!("duplicate id {}", e.id),
                ));
            }
            if let Some(f) = e
                .trajectory
                .poses()
                .iter()
                .position(|p| !stage.contains_xy(p.translation()))
            {
                return Err(Error::validation(
                    format!("entities[{i}].poses[{f}]"),
                    "translation leaves the stage",
                ));
            }
        }
        Ok(Self {
            entities,
            stage,
            location_tag: location_tag.into(),
        })
    }

    pub fn entities(&self) -> &[SceneEntity] {
        &self.entities
    }

    pub fn stage(&self) -> &StageBounds {
        &self.stage
    }

    pub fn location_tag(&self) -> &str {
        &self.location_tag
    }

    pub fn frame_count(&self) -> usize {
        self.entities[0].trajectory.len()
    }

    pub fn fps(&self) -> f64 {
        self.entities[0].trajectory.fps()
    }

    /// Same scene without its first `n` frames.
    pub fn skip_frames(&self, n: usize) -> Result<SceneComposition> {
        let entities = self
            .entities
            .iter()
            .map(|e| {
                Ok(SceneEntity {
                    trajectory: e.trajectory.skip_frames(n)?,
                    ..e.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SceneComposition::new(entities, self.stage, self.location_tag.clone())
    }

    /// Smallest centre distance between any two entities over all frames,
    /// with the pair and frame where it occurs.
    pub fn min_separation(&self) -> Option<(f64, usize, usize, usize)> {
        min_separation(&self.entities.iter().map(|e| &e.trajectory).collect::<Vec<_>>())
    }
}

fn min_separation(tracks: &[&PoseSequence]) -> Option<(f64, usize, usize, usize)> {
    let mut best: Option<(f64, usize, usize, usize)> = None;
    for i in 0..tracks.len() {
        for j in i + 1..tracks.len() {
            for (f, (a, b)) in tracks[i].poses().iter().zip(tracks[j].poses()).enumerate() {
                let d = (a.translation() - b.translation()).norm();
                if best.is_none_or(|(bd, ..)| d < bd) {
                    best = Some((d, i, j, f));
                }
            }
        }
    }
    best
}

/// One entity to place: a template, what kind of asset follows it, and how
/// it is described.
#[derive(Debug, Clone, PartialEq)]
pub struct EntitySpec {
    pub id: String,
    pub prompt: String,
    pub kind: EntityKind,
    pub template: TrajectoryTemplate,
}

impl EntitySpec {
    pub fn new(template: TrajectoryTemplate, kind: EntityKind) -> Self {
        let prompt = match kind {
            EntityKind::Human => "a person",
            EntityKind::Animal => "an animal",
        };
        Self {
            id: String::new(),
            prompt: prompt.to_string(),
            kind,
            template,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_prompt(mut self, prompt: impl Into<String>) -> Self {
        self.prompt = prompt.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposeOptions {
    pub frames: usize,
    pub fps: f64,
    pub seed: u64,
    pub clearance: f64,
    pub max_retries: usize,
    pub stage: StageBounds,
    pub location_tag: String,
}

impl Default for ComposeOptions {
    fn default() -> Self {
        Self {
            frames: DEFAULT_FRAMES,
            fps: DEFAULT_FPS,
            seed: 0,
            clearance: DEFAULT_CLEARANCE,
            max_retries: DEFAULT_MAX_RETRIES,
            stage: StageBounds::default(),
            location_tag: "stage".into(),
        }
    }
}

/// Random rigid placement (yaw about the origin, then an offset) keeping
/// every sample of `seq` on the stage. `None` if the rotated footprint is
/// wider than the stage.
fn random_placement(seq: &PoseSequence, stage: &StageBounds, rng: &mut ChaCha8Rng) -> Option<Pose6DoF> {
    let yaw: f64 = rng.random_range(0.0..360.0);
    let r = rot_z(yaw);
    let rotated: Vec<Vec3> = seq.poses().iter().map(|p| r * p.translation()).collect();
    let (lo, hi) = template::xy_bounds(rotated.iter());
    let h = stage.half_extent;
    let (x0, x1) = (-h - lo.x, h - hi.x);
    let (y0, y1) = (-h - lo.y, h - hi.y);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    let ox = if x0 < x1 { rng.random_range(x0..=x1) } else { x0 };
    let oy = if y0 < y1 { rng.random_range(y0..=y1) } else { y0 };
    Some(Pose6DoF::from_parts_unchecked(r, Vec3::new(ox, oy, 0.0)))
}

/// Places each template on the stage with a seeded random yaw and offset,
/// retrying until every pair of entities keeps `clearance` at every frame.
pub fn compose_scene(specs: &[EntitySpec], opts: &ComposeOptions) -> Result<SceneComposition> {
    if specs.is_empty() || specs.len() > MAX_ENTITIES {
        return Err(Error::validation(
            "entities",
            format!("need 1..={MAX_ENTITIES}, got {}", specs.len()),
        ));
    }
    let canonical = specs
        .iter()
        .map(|s| generate_template(&s.template, opts.frames, opts.fps))
        .collect::<Result<Vec<_>>>()?;
    let canonical: Vec<&PoseSequence> = canonical.iter().collect();
    place_canonical(specs, &canonical, opts)
}

/// Placement loop of [`compose_scene`] over already generated sequences.
pub(crate) fn place_canonical(
    specs: &[EntitySpec],
    canonical: &[&PoseSequence],
    opts: &ComposeOptions,
) -> Result<SceneComposition> {
    let ids: Vec<String> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.id.is_empty() {
                format!("entity_{i}")
            } else {
                s.id.clone()
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut last_failure: Option<Error> = None;
    for _ in 0..opts.max_retries {
        let placed: Option<Vec<PoseSequence>> = canonical
            .iter()
            .map(|seq| random_placement(seq, &opts.stage, &mut rng).map(|p| seq.transformed(&p)))
            .collect();
        let Some(placed) = placed else {
            last_failure = Some(Error::Placement {
                retries: opts.max_retries,
                reason: "template footprint does not fit the stage at the sampled yaw".into(),
            });
            continue;
        };
        let refs: Vec<&PoseSequence> = placed.iter().collect();
        match min_separation(&refs) {
            Some((d, i, j, frame)) if d < opts.clearance => {
                last_failure = Some(Error::Composition {
                    retries: opts.max_retries,
                    first: ids[i].clone(),
                    second: ids[j].clone(),
                    frame,
                });
            }
            _ => {
                let entities = specs
                    .iter()
                    .zip(ids)
                    .zip(placed)
                    .map(|((s, id), trajectory)| SceneEntity {
                        id,
                        prompt: s.prompt.clone(),
                        scale: s.kind.scale_factor(),
                        trajectory,
                    })
                    .collect();
                return SceneComposition::new(entities, opts.stage, opts.location_tag.clone());
            }
        }
    }
    Err(last_failure.unwrap_or(Error::Placement {
        retries: opts.max_retries,
        reason: "no attempts made".into(),
    }))
}
