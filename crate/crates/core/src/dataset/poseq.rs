//! The `.poseq` scene document.
//!
//! A JSON object with keys in sorted order at every level. Each pose is one
//! line of 12 numbers: the rotation row-major, then the translation. Numbers
//! are written in the shortest decimal form that parses back to the same
//! `f64`, so a parse/serialize cycle is lossless.

use std::fmt::Write as _;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::pose::{Pose6DoF, PoseSequence, COORDINATE_CONVENTION};
use crate::traj::{SceneComposition, SceneEntity, StageBounds};

pub const POSEQ_FORMAT_VERSION: u32 = 1;
pub const POSEQ_EXTENSION: &str = "poseq";

/// Shortest round-trip decimal; `-0` is written as `0`.
pub(crate) fn fmt_f64(v: f64) -> String {
    debug_assert!(v.is_finite());
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v}")
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

/// Canonical text of `scene`.
pub fn serialize_pose_sequence(scene: &SceneComposition) -> String {
    let mut out = String::new();
    out.push_str("{\n");
    let _ = writeln!(out, "  \"coordinate_convention\": {},", json_str(COORDINATE_CONVENTION));
    out.push_str("  \"entities\": [\n");
    let n = scene.entities().len();
    for (i, e) in scene.entities().iter().enumerate() {
        out.push_str("    {\n");
        let _ = writeln!(out, "      \"id\": {},", json_str(&e.id));
        out.push_str("      \"poses\": [\n");
        let f = e.trajectory.len();
        for (k, p) in e.trajectory.poses().iter().enumerate() {
            let row: Vec<String> = p.to_row().iter().map(|v| fmt_f64(*v)).collect();
            let sep = if k + 1 < f { "," } else { "" };
            let _ = writeln!(out, "        [{}]{sep}", row.join(","));
        }
        out.push_str("      ],\n");
        let _ = writeln!(out, "      \"prompt\": {},", json_str(&e.prompt));
        let _ = writeln!(out, "      \"scale\": {}", fmt_f64(e.scale));
        let sep = if i + 1 < n { "," } else { "" };
        let _ = writeln!(out, "    }}{sep}");
    }
    out.push_str("  ],\n");
    let _ = writeln!(out, "  \"format_version\": {POSEQ_FORMAT_VERSION},");
    let _ = writeln!(out, "  \"fps\": {},", fmt_f64(scene.fps()));
    let _ = writeln!(out, "  \"frame_count\": {},", scene.frame_count());
    let _ = writeln!(out, "  \"location_tag\": {},", json_str(scene.location_tag()));
    let _ = writeln!(out, "  \"stage_half_extent\": {}", fmt_f64(scene.stage().half_extent));
    out.push_str("}\n");
    out
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EntityDoc {
    id: String,
    poses: Vec<[f64; 12]>,
    prompt: String,
    scale: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    coordinate_convention: String,
    entities: Vec<EntityDoc>,
    format_version: u32,
    fps: f64,
    frame_count: usize,
    location_tag: String,
    stage_half_extent: f64,
}

pub(crate) fn json_error(e: serde_json::Error) -> Error {
    Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Parses and validates a `.poseq` document.
pub fn parse_pose_sequence(text: &str) -> Result<SceneComposition> {
    let doc: SceneDoc = serde_json::from_str(text).map_err(json_error)?;
    if doc.format_version != POSEQ_FORMAT_VERSION {
        return Err(Error::validation(
            "format_version",
            format!("unsupported version {}", doc.format_version),
        ));
    }
    if doc.coordinate_convention != COORDINATE_CONVENTION {
        return Err(Error::validation(
            "coordinate_convention",
            format!(
                "expected {COORDINATE_CONVENTION:?}, got {:?}",
                doc.coordinate_convention
            ),
        ));
    }
    if !(doc.stage_half_extent.is_finite() && doc.stage_half_extent > 0.0) {
        return Err(Error::validation("stage_half_extent", "must be > 0"));
    }
    let mut entities = Vec::with_capacity(doc.entities.len());
    for (i, e) in doc.entities.into_iter().enumerate() {
        if e.poses.len() != doc.frame_count {
            return Err(Error::validation(
                format!("entities[{i}].poses"),
                format!("has {} frames, frame_count is {}", e.poses.len(), doc.frame_count),
            ));
        }
        let poses = e
            .poses
            .iter()
            .enumerate()
            .map(|(f, row)| {
                Pose6DoF::from_row(row).map_err(|err| match err {
                    Error::Validation { what, reason } => Error::Validation {
                        what: format!("entities[{i}].poses[{f}].{what}"),
                        reason,
                    },
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let trajectory = PoseSequence::new(doc.fps, poses).map_err(|err| match err {
            Error::Validation { what, reason } => Error::Validation {
                what: format!("entities[{i}].{what}"),
                reason,
            },
            other => other,
        })?;
        entities.push(SceneEntity {
            id: e.id,
            prompt: e.prompt,
            scale: e.scale,
            trajectory,
        });
    }
    SceneComposition::new(
        entities,
        StageBounds {
            half_extent: doc.stage_half_extent,
        },
        doc.location_tag,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::Vec3;
    use crate::traj::{compose_scene, template, ComposeOptions, EntityKind, EntitySpec};
    use proptest::prelude::*;

    fn sample_scene() -> SceneComposition {
        let specs = [
            EntitySpec::new(template::arc(3, 1.0, 180.0), EntityKind::Human).with_prompt("a man in a \"red\" coat"),
            EntitySpec::new(template::stationary(2, 60.0), EntityKind::Animal),
        ];
        compose_scene(
            &specs,
            &ComposeOptions {
                frames: 12,
                seed: 9,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let scene = sample_scene();
        let text = serialize_pose_sequence(&scene);
        let back = parse_pose_sequence(&text).unwrap();
        assert_eq!(back, scene);
        assert_eq!(serialize_pose_sequence(&back), text);
        assert_eq!(serialize_pose_sequence(&scene), text);
        assert!(text.ends_with("}\n"));
    }

    #[test]
    fn identity_row() {
        let seq = PoseSequence::new(20.0, vec![Pose6DoF::identity()]).unwrap();
        let scene = SceneComposition::new(
            vec![SceneEntity {
                id: "a".into(),
                prompt: "p".into(),
                scale: 1.0,
                trajectory: seq,
            }],
            StageBounds::default(),
            "city",
        )
        .unwrap();
        let text = serialize_pose_sequence(&scene);
        assert!(text.contains("        [1,0,0,0,1,0,0,0,1,0,0,0]\n"), "{text}");
    }

    #[test]
    fn syntax_errors_carry_position() {
        let text = serialize_pose_sequence(&sample_scene()).replace("\"fps\": 20,", "\"fps\": 20");
        match parse_pose_sequence(&text).unwrap_err() {
            Error::Parse { line, column, .. } => assert!(line > 1 && column > 0),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn non_orthonormal_rotation_is_rejected() {
        let scene = sample_scene();
        let text = serialize_pose_sequence(&scene);
        let first_row_start = text.find("        [").unwrap();
        let end = text[first_row_start..].find(']').unwrap() + first_row_start;
        let mut row: Vec<f64> = text[first_row_start + 9..end]
            .split(',')
            .map(|v| v.parse().unwrap())
            .collect();
        row[1] += 0.1;
        let bad_row: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        let bad = format!("{}{}{}", &text[..first_row_start + 9], bad_row.join(","), &text[end..]);
        match parse_pose_sequence(&bad).unwrap_err() {
            Error::Validation { what, .. } => assert_eq!(what, "entities[0].poses[0].rotation"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn frame_mismatch_is_rejected() {
        let scene = sample_scene();
        let text = serialize_pose_sequence(&scene).replace("\"frame_count\": 12", "\"frame_count\": 11");
        match parse_pose_sequence(&text).unwrap_err() {
            Error::Validation { what, .. } => assert_eq!(what, "entities[0].poses"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn negative_zero_prints_as_zero() {
        assert_eq!(fmt_f64(-0.0), "0");
        assert_eq!(fmt_f64(0.1), "0.1");
        assert_eq!(fmt_f64(-2.5e-20).parse::<f64>().unwrap(), -2.5e-20);
        let _ = Vec3::zeros();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn parse_inverts_serialize(
            seed in any::<u64>(),
            frames in 1usize..24,
            picks in proptest::collection::vec((0usize..96, any::<bool>()), 1..=3),
        ) {
            let library = template::default_library();
            let specs: Vec<EntitySpec> = picks
                .iter()
                .enumerate()
                .map(|(i, &(t, animal))| {
                    let kind = if animal { EntityKind::Animal } else { EntityKind::Human };
                    let mut tpl = library[t].clone();
                    if frames < 2 {
                        tpl = template::stationary(i, 15.0 * i as f64);
                    }
                    EntitySpec::new(tpl, kind).with_prompt(format!("entity {i} \u{e9}"))
                })
                .collect();
            let opts = ComposeOptions { frames, seed, clearance: 0.0, ..Default::default() };
            let scene = compose_scene(&specs, &opts).unwrap();
            let text = serialize_pose_sequence(&scene);
            let back = parse_pose_sequence(&text).unwrap();
            prop_assert_eq!(&back, &scene);
            prop_assert_eq!(serialize_pose_sequence(&back), text);
        }
    }
}
