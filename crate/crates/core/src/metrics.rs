//! Trajectory accuracy (TransErr, RotErr) and entity-class histograms of
//! captions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::dataset::tokenize;
use crate::error::{Error, Result};
use crate::pose::{align_first_frame, angle_between_unchecked, PoseSequence};
use crate::traj::SceneComposition;

pub const REPORT_CSV_HEADER: &str = "clip_id,entity_id,trans_err_m,rot_err_deg";
pub const HISTOGRAM_CSV_HEADER: &str = "class,count";

/// Mean errors of one estimated trajectory against its target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryError {
    /// Meters.
    pub trans_err: f64,
    /// Degrees.
    pub rot_err: f64,
    pub per_frame_trans: Vec<f64>,
    pub per_frame_rot: Vec<f64>,
}

fn check_lengths(est: &PoseSequence, gt: &PoseSequence) -> Result<()> {
    if est.len() != gt.len() {
        return Err(Error::LengthMismatch {
            expected: gt.len(),
            found: est.len(),
        });
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn per_frame_trans(est: &PoseSequence, gt: &PoseSequence) -> Result<Vec<f64>> {
    let aligned = align_first_frame(est, gt)?;
    Ok(aligned
        .poses()
        .iter()
        .zip(gt.poses())
        .map(|(e, g)| (e.translation() - g.translation()).norm())
        .collect())
}

fn per_frame_rot(est: &PoseSequence, gt: &PoseSequence) -> Result<Vec<f64>> {
    check_lengths(est, gt)?;
    Ok(est
        .poses()
        .iter()
        .zip(gt.poses())
        .map(|(e, g)| angle_between_unchecked(e.rotation(), g.rotation()))
        .collect())
}

/// Mean location error in meters after shifting `est` so both start at the
/// same point.
pub fn trans_err(est: &PoseSequence, gt: &PoseSequence) -> Result<f64> {
    Ok(mean(&per_frame_trans(est, gt)?))
}

/// Mean geodesic rotation error in degrees. Rotations are not aligned.
pub fn rot_err(est: &PoseSequence, gt: &PoseSequence) -> Result<f64> {
    Ok(mean(&per_frame_rot(est, gt)?))
}

pub fn trajectory_error(est: &PoseSequence, gt: &PoseSequence) -> Result<TrajectoryError> {
    let per_frame_trans = per_frame_trans(est, gt)?;
    let per_frame_rot = per_frame_rot(est, gt)?;
    Ok(TrajectoryError {
        trans_err: mean(&per_frame_trans),
        rot_err: mean(&per_frame_rot),
        per_frame_trans,
        per_frame_rot,
    })
}

/// One line of a metric report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub clip_id: String,
    pub entity_id: String,
    pub trans_err_m: f64,
    pub rot_err_deg: f64,
}

/// Scores every entity of `gt` against the entity with the same id in `est`.
pub fn evaluate_scene(clip_id: &str, est: &SceneComposition, gt: &SceneComposition) -> Result<Vec<MetricRow>> {
    gt.entities()
        .iter()
        .map(|g| {
            let e = est
                .entities()
                .iter()
                .find(|e| e.id == g.id)
                .ok_or_else(|| Error::validation("entities", format!("estimate has no entity {:?}", g.id)))?;
            Ok(MetricRow {
                clip_id: clip_id.to_string(),
                entity_id: g.id.clone(),
                trans_err_m: trans_err(&e.trajectory, &g.trajectory)?,
                rot_err_deg: rot_err(&e.trajectory, &g.trajectory)?,
            })
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn report_csv(rows: &[MetricRow]) -> String {
    let mut out = format!("{REPORT_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            csv_field(&r.clip_id),
            csv_field(&r.entity_id),
            r.trans_err_m,
            r.rot_err_deg
        );
    }
    out
}

/// Class name to keywords. Keywords may span several words.
pub type KeywordClasses = BTreeMap<String, Vec<String>>;

/// Function words skipped before matching.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "of", "in", "on", "at", "to", "with", "from", "by", "for", "is", "are", "was",
    "were", "be", "its", "it", "his", "her", "their", "this", "that", "these", "those", "while", "as", "into", "over",
    "under", "through", "across", "around", "near", "very",
];

fn matches_at(words: &[&str], keyword: &[String]) -> bool {
    keyword.len() <= words.len()
        && keyword.iter().zip(words).enumerate().all(|(i, (k, w))| {
            // the last word may carry a plural suffix
            *w == k || (i + 1 == keyword.len() && (w.strip_suffix('s') == Some(k) || w.strip_suffix("es") == Some(k)))
        })
}

/// Counts captions mentioning each class, at most once per caption and
/// class. Matching is case-insensitive on whole words, after dropping
/// [`STOPWORDS`]; a trailing `s`/`es` plural is accepted.
pub fn entity_distribution(captions: &[impl AsRef<str>], classes: &KeywordClasses) -> BTreeMap<String, usize> {
    let stop: BTreeSet<&str> = STOPWORDS.iter().copied().collect();
    let keywords: Vec<(&String, Vec<Vec<String>>)> = classes
        .iter()
        .map(|(c, kws)| (c, kws.iter().map(|k| tokenize(k)).filter(|k| !k.is_empty()).collect()))
        .collect();
    let mut hist: BTreeMap<String, usize> = classes.keys().map(|c| (c.clone(), 0)).collect();
    for caption in captions {
        let tokens = tokenize(caption.as_ref());
        let words: Vec<&str> = tokens
            .iter()
            .map(String::as_str)
            .filter(|w| !stop.contains(w))
            .collect();
        for (class, kws) in &keywords {
            let hit = (0..words.len()).any(|i| kws.iter().any(|k| matches_at(&words[i..], k)));
            if hit {
                *hist.get_mut(*class).expect("class present") += 1;
            }
        }
    }
    hist
}

pub fn histogram_csv(hist: &BTreeMap<String, usize>) -> String {
    let mut out = format!("{HISTOGRAM_CSV_HEADER}\n");
    for (class, n) in hist {
        let _ = writeln!(out, "{},{n}", csv_field(class));
    }
    out
}

const DEFAULT_CLASSES: &[(&str, &[&str])] = &[
    (
        "human",
        &[
            "man",
            "men",
            "woman",
            "women",
            "person",
            "people",
            "boy",
            "girl",
            "child",
            "children",
            "kid",
            "lady",
            "guy",
            "astronaut",
            "firefighter",
            "chef",
            "knight",
            "soldier",
            "dancer",
            "athlete",
            "doctor",
            "police officer",
        ],
    ),
    ("dog", &["dog", "puppy", "corgi", "husky"]),
    ("cat", &["cat", "kitten"]),
    ("horse", &["horse", "pony"]),
    ("zebra", &["zebra"]),
    ("lion", &["lion"]),
    ("tiger", &["tiger"]),
    ("bear", &["bear", "polar bear"]),
    ("elephant", &["elephant"]),
    ("giraffe", &["giraffe"]),
    ("deer", &["deer", "reindeer"]),
    ("wolf", &["wolf", "wolves"]),
    ("fox", &["fox"]),
    ("rabbit", &["rabbit", "bunny"]),
    ("kangaroo", &["kangaroo"]),
    ("panda", &["panda"]),
    ("cow", &["cow", "cattle", "bull"]),
    ("sheep", &["sheep", "lamb"]),
    ("goat", &["goat"]),
    ("pig", &["pig", "boar"]),
    ("camel", &["camel"]),
    ("cheetah", &["cheetah"]),
    ("leopard", &["leopard"]),
    ("gorilla", &["gorilla"]),
    ("monkey", &["monkey", "chimpanzee"]),
    ("penguin", &["penguin"]),
    ("ostrich", &["ostrich"]),
    ("rhino", &["rhino", "rhinoceros"]),
    ("hippo", &["hippo", "hippopotamus"]),
    ("moose", &["moose"]),
    ("raccoon", &["raccoon"]),
    ("bird", &["bird", "sparrow", "pigeon", "crow"]),
    ("eagle", &["eagle", "hawk"]),
    ("owl", &["owl"]),
    ("parrot", &["parrot"]),
    ("duck", &["duck", "goose", "geese"]),
    ("swan", &["swan"]),
    ("chicken", &["chicken", "hen", "rooster"]),
    ("flamingo", &["flamingo"]),
    ("dolphin", &["dolphin"]),
    ("whale", &["whale"]),
    ("shark", &["shark"]),
    ("fish", &["fish", "goldfish"]),
    ("seal", &["seal", "sea lion"]),
    ("turtle", &["turtle", "tortoise"]),
    ("snake", &["snake", "python", "cobra"]),
    ("crocodile", &["crocodile", "alligator"]),
    ("frog", &["frog", "toad"]),
    ("squirrel", &["squirrel"]),
    ("mouse", &["mouse", "mice", "rat"]),
    ("butterfly", &["butterfly", "butterflies"]),
    ("bee", &["bee"]),
    ("spider", &["spider"]),
    ("dinosaur", &["dinosaur", "t rex"]),
    ("dragon", &["dragon"]),
    ("car", &["car", "sedan", "suv", "taxi", "sports car"]),
    ("truck", &["truck", "lorry"]),
    ("bus", &["bus"]),
    ("motorcycle", &["motorcycle", "motorbike", "scooter"]),
    ("bicycle", &["bicycle", "bike"]),
    ("train", &["train", "tram"]),
    ("airplane", &["airplane", "plane", "jet"]),
    ("helicopter", &["helicopter"]),
    ("boat", &["boat", "ship", "yacht", "canoe"]),
    ("robot", &["robot", "android", "mech"]),
    ("fire", &["fire", "flame", "fireball"]),
    ("tornado", &["tornado", "whirlwind", "cyclone"]),
    ("cloud", &["cloud", "smoke", "fog"]),
    ("water", &["water", "wave", "waterfall"]),
    ("lightning", &["lightning", "thunderbolt"]),
    ("balloon", &["balloon", "hot air balloon"]),
];

/// A keyword table of 71 entity classes: people, animals, vehicles, robots
/// and natural phenomena.
pub fn default_keyword_classes() -> KeywordClasses {
    DEFAULT_CLASSES
        .iter()
        .map(|(c, kws)| (c.to_string(), kws.iter().map(|k| k.to_string()).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{rot_z, Mat3, Pose6DoF, Vec3};
    use nalgebra::Matrix4;
    use proptest::prelude::*;

    fn seq(poses: Vec<Pose6DoF>) -> PoseSequence {
        PoseSequence::new(20.0, poses).unwrap()
    }

    #[test]
    fn identical_is_zero() {
        let gt = seq((0..5)
            .map(|i| Pose6DoF::from_yaw(7.0 * i as f64, Vec3::new(i as f64, 0.0, 0.0)))
            .collect());
        assert_eq!(trans_err(&gt, &gt).unwrap(), 0.0);
        assert_eq!(rot_err(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_is_removed() {
        let gt = seq((0..5)
            .map(|i| Pose6DoF::from_translation(Vec3::new(i as f64, 0.3, 0.0)))
            .collect());
        let est = gt.transformed(&Pose6DoF::from_translation(Vec3::new(5.0, 5.0, 0.0)));
        assert!(trans_err(&est, &gt).unwrap() < 1e-12);
    }

    #[test]
    fn drift_mean() {
        let gt = seq(vec![Pose6DoF::identity(); 11]);
        let est = seq((0..11)
            .map(|i| Pose6DoF::from_translation(Vec3::new(0.1 * i as f64, 0.0, 0.0)))
            .collect());
        assert!((trans_err(&est, &gt).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rotation_examples() {
        let gt = seq(vec![Pose6DoF::identity(); 6]);
        let est = seq(vec![Pose6DoF::from_yaw(10.0, Vec3::zeros()); 6]);
        assert!((rot_err(&est, &gt).unwrap() - 10.0).abs() < 1e-9);
        let half = seq((0..6)
            .map(|i| Pose6DoF::from_yaw(if i < 3 { 0.0 } else { 90.0 }, Vec3::zeros()))
            .collect());
        assert!((rot_err(&half, &gt).unwrap() - 45.0).abs() < 1e-9);
    }

    #[test]
    fn length_mismatch() {
        let a = seq(vec![Pose6DoF::identity(); 3]);
        let b = seq(vec![Pose6DoF::identity(); 4]);
        assert!(matches!(
            trans_err(&a, &b),
            Err(Error::LengthMismatch { expected: 4, found: 3 })
        ));
        assert!(matches!(rot_err(&a, &b), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn histogram_examples() {
        let classes: KeywordClasses = [("human", vec!["man"]), ("dog", vec!["dog"])]
            .into_iter()
            .map(|(c, k)| (c.to_string(), k.into_iter().map(String::from).collect()))
            .collect();
        let empty: [&str; 0] = [];
        assert!(entity_distribution(&empty, &classes).values().all(|&n| n == 0));
        let h = entity_distribution(&["a man walks", "a man and a dog"], &classes);
        assert_eq!((h["human"], h["dog"]), (2, 1));
        let h = entity_distribution(&["the Manager runs"], &classes);
        assert_eq!(h["human"], 0);
        let h = entity_distribution(&["Two DOGS, a man and another man"], &classes);
        assert_eq!((h["human"], h["dog"]), (1, 1));
        assert_eq!(histogram_csv(&h), "class,count\ndog,1\nhuman,1\n");
    }

    #[test]
    fn multi_word_keywords() {
        let classes = default_keyword_classes();
        assert!(classes.len() >= 60);
        let h = entity_distribution(&["a hot air balloon drifts", "a police officer"], &classes);
        assert_eq!((h["balloon"], h["human"]), (1, 1));
        let h = entity_distribution(&["the sea is calm"], &classes);
        assert_eq!(h["seal"], 0);
    }

    #[test]
    fn report_rows() {
        let rows = [MetricRow {
            clip_id: "c,1".into(),
            entity_id: "man".into(),
            trans_err_m: 0.5,
            rot_err_deg: 10.0,
        }];
        assert_eq!(
            report_csv(&rows),
            "clip_id,entity_id,trans_err_m,rot_err_deg\n\"c,1\",man,0.5,10\n"
        );
    }

    fn homogeneous(p: &Pose6DoF) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(p.rotation());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(p.translation());
        m
    }

    // Oracle: first-frame shift as a 4x4 translation, angle from the trace of
    // the relative rotation.
    fn oracle(est: &PoseSequence, gt: &PoseSequence) -> (f64, f64) {
        let f = gt.len() as f64;
        let e0 = homogeneous(est.first());
        let g0 = homogeneous(gt.first());
        let mut shift = Matrix4::identity();
        for r in 0..3 {
            shift[(r, 3)] = g0[(r, 3)] - e0[(r, 3)];
        }
        let mut t = 0.0;
        let mut r = 0.0;
        for (e, g) in est.poses().iter().zip(gt.poses()) {
            let (he, hg) = (shift * homogeneous(e), homogeneous(g));
            t += (0..3).map(|i| (he[(i, 3)] - hg[(i, 3)]).powi(2)).sum::<f64>().sqrt();
            let rel = hg.fixed_view::<3, 3>(0, 0).transpose() * he.fixed_view::<3, 3>(0, 0);
            let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
            r += c.acos().to_degrees();
        }
        (t / f, r / f)
    }

    fn arb_pose() -> impl Strategy<Value = Pose6DoF> {
        (
            -180.0..180.0f64,
            -80.0..80.0f64,
            -180.0..180.0f64,
            proptest::array::uniform3(-5.0..5.0f64),
        )
            .prop_map(|(y, p, r, t)| {
                let rot: Mat3 = rot_z(y) * crate::pose::rot_y(p) * crate::pose::rot_x(r);
                Pose6DoF::new(rot, Vec3::from(t)).unwrap()
            })
    }

    fn arb_pair() -> impl Strategy<Value = (PoseSequence, PoseSequence)> {
        (1usize..=8).prop_flat_map(|f| {
            (
                proptest::collection::vec(arb_pose(), f),
                proptest::collection::vec(arb_pose(), f),
            )
                .prop_map(|(a, b)| (seq(a), seq(b)))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn matches_homogeneous_oracle((est, gt) in arb_pair()) {
            let (t, r) = oracle(&est, &gt);
            let got = trajectory_error(&est, &gt).unwrap();
            prop_assert!((got.trans_err - t).abs() < 1e-9);
            // acos of the trace loses precision near 0 and 180 degrees
            prop_assert!((got.rot_err - r).abs() < 1e-5, "{} vs {}", got.rot_err, r);
            prop_assert!((mean(&got.per_frame_trans) - got.trans_err).abs() <= 1e-12);
            prop_assert!((mean(&got.per_frame_rot) - got.rot_err).abs() <= 1e-12);
        }

        #[test]
        fn invariances((est, gt) in arb_pair(), shift in proptest::array::uniform3(-3.0..3.0f64)) {
            let g = Pose6DoF::from_translation(Vec3::from(shift));
            let (t0, r0) = (trans_err(&est, &gt).unwrap(), rot_err(&est, &gt).unwrap());
            prop_assert!((trans_err(&est.transformed(&g), &gt.transformed(&g)).unwrap() - t0).abs() < 1e-9);
            prop_assert!((rot_err(&est.transformed(&g), &gt.transformed(&g)).unwrap() - r0).abs() < 1e-9);
            prop_assert!((trans_err(&est.transformed(&g), &gt).unwrap() - t0).abs() < 1e-9);
            prop_assert!((rot_err(&gt, &est).unwrap() - r0).abs() < 1e-9);
            prop_assert!(t0 >= 0.0 && r0 >= 0.0);
        }
    }
}
