//! Seeded enumeration of clip manifests.
//!
//! A composition is a location plus 1 to 3 distinct assets, each following
//! one template (two assets may share a template). Compositions are indexed
//! by a mixed-radix rank over
//! `L × Σ_N C(A, N) · T^N`, so drawing distinct ranks uniformly gives
//! distinct compositions without building the cross product.

use std::collections::HashMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AssetRecord;
use crate::camera::{CameraRig, RigDocument, CAMERA_COUNT};
use crate::error::{Error, Result};
use crate::pose::PoseSequence;
use crate::traj::template::{generate_template, DEFAULT_FPS, DEFAULT_FRAMES};
use crate::traj::{
    place_canonical, ComposeOptions, EntityKind, EntitySpec, SceneComposition, TrajectoryTemplate, MAX_ENTITIES,
};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_EXTENSION: &str = "manifest";
/// The four platform backdrops.
pub const DEFAULT_LOCATIONS: [&str; 4] = ["city", "desert", "forest", "hdri"];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompositionEntity {
    pub asset_id: String,
    pub template_id: String,
}

/// One sampled arrangement. The scene itself is rebuilt on demand by
/// [`Manifest::scene`] from `placement_seed`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionRecord {
    pub composition_id: String,
    /// Rank in the composition index space.
    pub rank: u64,
    pub location_tag: String,
    pub entities: Vec<CompositionEntity>,
    pub placement_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub composition_id: String,
    pub camera_index: usize,
    pub location_tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub compositions: usize,
    pub cameras_per_composition: usize,
    pub clips: usize,
    /// Compositions with 1, 2 and 3 entities.
    pub by_entity_count: [usize; MAX_ENTITIES],
    /// Size of the index space the compositions were drawn from, as a
    /// decimal string (it can exceed 64 bits).
    pub available_compositions: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub frames: usize,
    pub fps: f64,
    pub assets: Vec<AssetRecord>,
    pub templates: Vec<TrajectoryTemplate>,
    pub locations: Vec<String>,
    pub rig: RigDocument,
    pub compositions: Vec<CompositionRecord>,
    pub clips: Vec<ClipRecord>,
    pub counts: ManifestCounts,
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Number of distinct compositions for the given pool sizes.
pub fn count_compositions(assets: usize, templates: usize, locations: usize) -> u128 {
    (1..=MAX_ENTITIES.min(assets))
        .map(|n| binomial(assets, n) * (templates as u128).pow(n as u32))
        .sum::<u128>()
        * locations as u128
}

/// The `rank`-th k-subset of `0..n` in lexicographic order.
fn unrank_combination(n: usize, k: usize, mut rank: u128) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    let mut next = 0;
    for slot in 0..k {
        let remaining = k - slot - 1;
        loop {
            let with_next = binomial(n - next - 1, remaining);
            if rank < with_next {
                break;
            }
            rank -= with_next;
            next += 1;
        }
        out.push(next);
        next += 1;
    }
    out
}

/// (location, asset indices ascending, template index per asset).
fn decode(rank: u128, a: usize, t: usize, l: usize) -> (usize, Vec<usize>, Vec<usize>) {
    let loc = (rank % l as u128) as usize;
    let mut r = rank / l as u128;
    for n in 1..=MAX_ENTITIES.min(a) {
        let tn = (t as u128).pow(n as u32);
        let block = binomial(a, n) * tn;
        if r < block {
            let assets = unrank_combination(a, n, r / tn);
            let mut digits = r % tn;
            let mut templates = vec![0; n];
            for slot in templates.iter_mut().rev() {
                *slot = (digits % t as u128) as usize;
                digits /= t as u128;
            }
            return (loc, assets, templates);
        }
        r -= block;
    }
    unreachable!("rank below count_compositions")
}

struct Pools<'a> {
    assets: &'a [AssetRecord],
    templates: &'a [TrajectoryTemplate],
    template_index: HashMap<&'a str, usize>,
    asset_index: HashMap<&'a str, usize>,
}

impl<'a> Pools<'a> {
    fn new(assets: &'a [AssetRecord], templates: &'a [TrajectoryTemplate]) -> Result<Self> {
        let mut asset_index = HashMap::new();
        for (i, a) in assets.iter().enumerate() {
            a.validate()?;
            if asset_index.insert(a.asset_id.as_str(), i).is_some() {
                return Err(Error::validation(
                    "assets",
                    format!("duplicate asset id {}", a.asset_id),
                ));
            }
        }
        let mut template_index = HashMap::new();
        for (i, t) in templates.iter().enumerate() {
            if template_index.insert(t.id.as_str(), i).is_some() {
                return Err(Error::validation(
                    "templates",
                    format!("duplicate template id {}", t.id),
                ));
            }
        }
        Ok(Self {
            assets,
            templates,
            template_index,
            asset_index,
        })
    }

    fn specs(&self, rec: &CompositionRecord) -> Result<Vec<EntitySpec>> {
        rec.entities
            .iter()
            .map(|e| {
                let a = self
                    .asset_index
                    .get(e.asset_id.as_str())
                    .map(|&i| &self.assets[i])
                    .ok_or_else(|| Error::validation("composition", format!("unknown asset {}", e.asset_id)))?;
                let t = self
                    .template_index
                    .get(e.template_id.as_str())
                    .map(|&i| &self.templates[i])
                    .ok_or_else(|| Error::validation("composition", format!("unknown template {}", e.template_id)))?;
                Ok(EntitySpec::new(t.clone(), a.kind)
                    .with_id(a.asset_id.clone())
                    .with_prompt(a.prompt_text.clone()))
            })
            .collect()
    }
}

fn compose_options(rec: &CompositionRecord, frames: usize, fps: f64) -> ComposeOptions {
    ComposeOptions {
        frames,
        fps,
        seed: rec.placement_seed,
        location_tag: rec.location_tag.clone(),
        ..Default::default()
    }
}

/// Draws `budget` distinct compositions uniformly without replacement,
/// checks that each one can be placed on the stage, and expands each into
/// one clip per rig camera.
pub fn enumerate_manifest(
    assets: &[AssetRecord],
    templates: &[TrajectoryTemplate],
    locations: &[String],
    budget: usize,
    seed: u64,
) -> Result<Manifest> {
    if assets.is_empty() || templates.is_empty() || locations.is_empty() {
        return Err(Error::validation(
            "manifest inputs",
            "assets, templates and locations must be non-empty",
        ));
    }
    if budget == 0 {
        return Err(Error::validation("budget", "must be >= 1"));
    }
    let mut seen = std::collections::HashSet::new();
    for l in locations {
        if l.is_empty() || !seen.insert(l) {
            return Err(Error::validation("locations", format!("empty or duplicate tag {l:?}")));
        }
    }
    let pools = Pools::new(assets, templates)?;
    let available = count_compositions(assets.len(), templates.len(), locations.len());
    if budget as u128 > available {
        return Err(Error::Budget {
            requested: budget,
            available,
        });
    }
    let space = usize::try_from(available)
        .map_err(|_| Error::validation("manifest inputs", format!("index space of {available} is too large")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ranks = index::sample(&mut rng, space, budget).into_vec();
    ranks.sort_unstable();

    let (frames, fps) = (DEFAULT_FRAMES, DEFAULT_FPS);
    let mut canonical: Vec<Option<PoseSequence>> = vec![None; templates.len()];
    let mut compositions = Vec::with_capacity(budget);
    let mut by_entity_count = [0; MAX_ENTITIES];
    for (ci, &rank) in ranks.iter().enumerate() {
        let (loc, asset_ids, template_ids) = decode(rank as u128, assets.len(), templates.len(), locations.len());
        let rec = CompositionRecord {
            composition_id: format!("comp{ci:05}"),
            rank: rank as u64,
            location_tag: locations[loc].clone(),
            entities: asset_ids
                .iter()
                .zip(&template_ids)
                .map(|(&a, &t)| CompositionEntity {
                    asset_id: assets[a].asset_id.clone(),
                    template_id: templates[t].id.clone(),
                })
                .collect(),
            placement_seed: rng.random(),
        };
        for &t in &template_ids {
            if canonical[t].is_none() {
                canonical[t] = Some(generate_template(&templates[t], frames, fps)?);
            }
        }
        let seqs: Vec<&PoseSequence> = template_ids.iter().map(|&t| canonical[t].as_ref().unwrap()).collect();
        place_canonical(&pools.specs(&rec)?, &seqs, &compose_options(&rec, frames, fps))?;
        by_entity_count[rec.entities.len() - 1] += 1;
        compositions.push(rec);
    }

    let clips: Vec<ClipRecord> = compositions
        .iter()
        .flat_map(|c| {
            (0..CAMERA_COUNT).map(move |k| ClipRecord {
                clip_id: format!("{}-cam{k:02}", c.composition_id),
                composition_id: c.composition_id.clone(),
                camera_index: k,
                location_tag: c.location_tag.clone(),
            })
        })
        .collect();
    let counts = ManifestCounts {
        compositions: compositions.len(),
        cameras_per_composition: CAMERA_COUNT,
        clips: clips.len(),
        by_entity_count,
        available_compositions: available.to_string(),
    };
    Ok(Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        seed,
        frames,
        fps,
        assets: assets.to_vec(),
        templates: templates.to_vec(),
        locations: locations.to_vec(),
        rig: CameraRig::default_rig().to_document(),
        compositions,
        clips,
        counts,
    })
}

impl Manifest {
    /// Rebuilds the placed scene of a composition.
    pub fn scene(&self, composition_id: &str) -> Result<SceneComposition> {
        let rec = self
            .compositions
            .iter()
            .find(|c| c.composition_id == composition_id)
            .ok_or_else(|| Error::validation("composition_id", format!("unknown id {composition_id}")))?;
        let pools = Pools::new(&self.assets, &self.templates)?;
        let specs = pools.specs(rec)?;
        crate::traj::compose_scene(&specs, &compose_options(rec, self.frames, self.fps))
    }

    /// Deterministic JSON text, newline-terminated.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest always serializes");
        s.push('\n');
        s
    }

    /// Parses a manifest and checks its counts and clip ids.
    pub fn from_json(text: &str) -> Result<Manifest> {
        let m: Manifest = serde_json::from_str(text).map_err(super::json_error)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        CameraRig::from_document(&self.rig)?;
        Pools::new(&self.assets, &self.templates)?;
        let per = self.counts.cameras_per_composition;
        if per != CAMERA_COUNT
            || self.counts.compositions != self.compositions.len()
            || self.counts.clips != self.clips.len()
            || self.clips.len() != self.compositions.len() * CAMERA_COUNT
        {
            return Err(Error::validation(
                "counts",
                format!(
                    "{} compositions and {} clips do not match {} cameras each",
                    self.compositions.len(),
                    self.clips.len(),
                    CAMERA_COUNT
                ),
            ));
        }
        let mut ids = std::collections::HashSet::new();
        for c in &self.clips {
            if !ids.insert(c.clip_id.as_str()) {
                return Err(Error::validation("clips", format!("duplicate clip id {}", c.clip_id)));
            }
        }
        Ok(())
    }
}

const HUMAN_SUBJECTS: [&str; 10] = [
    "man",
    "woman",
    "boy",
    "girl",
    "elderly man",
    "elderly woman",
    "firefighter",
    "astronaut",
    "chef",
    "knight in armor",
];
const HUMAN_ATTIRE: [&str; 4] = [
    "wearing a red hooded jacket",
    "in a navy business suit",
    "with curly hair and a denim shirt",
    "in grey sportswear and sneakers",
];
const ANIMALS: [&str; 30] = [
    "dog", "cat", "horse", "zebra", "lion", "tiger", "bear", "elephant", "giraffe", "deer", "wolf", "fox", "rabbit",
    "kangaroo", "panda", "cow", "sheep", "goat", "pig", "camel", "cheetah", "leopard", "gorilla", "monkey", "penguin",
    "ostrich", "rhino", "hippo", "moose", "raccoon",
];

/// 70 assets: 40 humans (10 subjects × 4 outfits) and 30 animals.
pub fn default_assets() -> Vec<AssetRecord> {
    let humans = HUMAN_SUBJECTS.iter().enumerate().flat_map(|(i, s)| {
        HUMAN_ATTIRE.iter().enumerate().map(move |(j, a)| {
            let article = if s.starts_with(['a', 'e', 'i', 'o', 'u']) {
                "an"
            } else {
                "a"
            };
            AssetRecord::new(
                format!("human-{:02}", i * HUMAN_ATTIRE.len() + j),
                EntityKind::Human,
                format!("{article} {s} {a}"),
            )
        })
    });
    let animals = ANIMALS.iter().enumerate().map(|(i, s)| {
        let article = if s.starts_with(['a', 'e', 'i', 'o', 'u']) {
            "an"
        } else {
            "a"
        };
        AssetRecord::new(format!("animal-{i:02}"), EntityKind::Animal, format!("{article} {s}"))
    });
    humans
        .chain(animals)
        .collect::<Result<Vec<_>>>()
        .expect("built-in asset prompts are valid")
}
