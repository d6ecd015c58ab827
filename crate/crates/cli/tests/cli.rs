use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn motion3d(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motion3d"))
        .args(args)
        .current_dir(dir)
        .env_remove("MOTION3D_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("an error line");
    serde_json::from_str(last).expect("last stderr line is JSON")
}

#[test]
fn eval_of_identical_files_is_all_zeros() {
    let dir = tempfile::tempdir().unwrap();
    ok(&motion3d(
        &[
            "compose-scene",
            "--entity",
            "arc-05",
            "--entity",
            "circle-01:animal:a dog",
            "--out",
            "s.poseq",
        ],
        dir.path(),
    ));
    let report = ok(&motion3d(&["eval", "--est", "s.poseq", "--gt", "s.poseq"], dir.path()));
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("clip_id,entity_id,trans_err_m,rot_err_deg"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert!(row.ends_with(",0,0"), "{row}");
    }
}

#[test]
fn manifest_with_budget_one_has_twelve_clips() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&motion3d(
        &["manifest", "--budget", "1", "--out", "m.manifest"],
        dir.path(),
    ));
    assert!(stdout.contains("clips=12"), "{stdout}");
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("m.manifest")).unwrap()).unwrap();
    assert_eq!(doc["clips"].as_array().unwrap().len(), 12);
    assert_eq!(doc["compositions"].as_array().unwrap().len(), 1);
}

#[test]
fn sample_demo_reports_branch_counts() {
    let dir = tempfile::tempdir().unwrap();
    for (tc, expect) in [
        ("0", "conditioned_steps=0 base_steps=50"),
        ("50", "conditioned_steps=50 base_steps=0"),
    ] {
        let stdout = ok(&motion3d(
            &["sample-demo", "--tc", tc, "--out", "latent.json"],
            dir.path(),
        ));
        assert_eq!(stdout.trim(), expect);
    }
    let latent: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("latent.json")).unwrap()).unwrap();
    assert_eq!(latent["shape"], serde_json::json!([3, 2, 2, 8]));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let runs: [&[&str]; 4] = [
        &[
            "--seed",
            "7",
            "compose-scene",
            "--entity",
            "s_curve-02",
            "--entity",
            "line-04",
            "--out",
            "OUT",
        ],
        &["--seed", "7", "manifest", "--budget", "20", "--out", "OUT"],
        &[
            "--seed",
            "7",
            "sample-demo",
            "--negative",
            "static_pose",
            "--eta",
            "0.5",
            "--out",
            "OUT",
        ],
        &["build-rig", "--out", "OUT"],
    ];
    for args in runs {
        let mut texts = Vec::new();
        for name in ["a", "b"] {
            let args: Vec<&str> = args.iter().map(|a| if *a == "OUT" { name } else { a }).collect();
            ok(&motion3d(&args, dir.path()));
            texts.push(fs::read(dir.path().join(name)).unwrap());
        }
        assert_eq!(texts[0], texts[1], "{args:?}");
    }
}

#[test]
fn seed_changes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    for seed in ["1", "2"] {
        ok(&motion3d(
            &["--seed", seed, "compose-scene", "--entity", "line-04", "--out", seed],
            dir.path(),
        ));
    }
    assert_ne!(
        fs::read(dir.path().join("1")).unwrap(),
        fs::read(dir.path().join("2")).unwrap()
    );
}

#[test]
fn environment_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_motion3d"))
        .args(["sample-demo", "--denoiser", "linear", "--out", "l.json"])
        .env("MOTION3D_STEPS", "10")
        .env("MOTION3D_TC", "3")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(ok(&out).trim(), "conditioned_steps=3 base_steps=7");
}

#[test]
fn help_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(&motion3d(&["sample-demo", "--help"], dir.path()));
    for (flag, default) in [
        ("--steps", "50"),
        ("--guidance", "12.5"),
        ("--tc", "25"),
        ("--alpha-lora", "0.4"),
        ("--negative", "uncond"),
        ("--seed", "0"),
    ] {
        let block = help.split(flag).nth(1).unwrap_or_else(|| panic!("{flag} missing"));
        let block = block.split("\n\n").next().unwrap();
        assert!(block.contains(&format!("[default: {default}]")), "{flag}: {block}");
    }
    let help = ok(&motion3d(&["manifest", "--help"], dir.path()));
    assert!(help.contains("[default: 4500]"));
}

#[test]
fn exit_codes_by_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = motion3d(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "usage");

    let out = motion3d(&["sample-demo", "--tc", "60", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = motion3d(&["eval", "--est", "missing.poseq", "--gt", "missing.poseq"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"], "io");

    fs::write(dir.path().join("bad.poseq"), "{\"format_version\": 1,").unwrap();
    let out = motion3d(&["eval", "--est", "bad.poseq", "--gt", "bad.poseq"], dir.path());
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_line(&out)["error"], "parse");

    let out = motion3d(&["manifest", "--budget", "999999999999999", "--out", "m"], dir.path());
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_line(&out)["error"], "budget");
    assert!(!dir.path().join("m").exists());
}

#[test]
fn grad_check_prints_max_relative_error() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&motion3d(&["grad-check"], dir.path()));
    let last = stdout.lines().last().unwrap();
    let value: f64 = last.strip_prefix("max_rel_error=").unwrap().parse().unwrap();
    assert!(value < 1e-5, "{value}");
    assert!(stdout.contains("group=gate_gamma"));
}

#[test]
fn projection_and_templates_write_files() {
    let dir = tempfile::tempdir().unwrap();
    ok(&motion3d(&["build-rig", "--out", "rig.json"], dir.path()));
    ok(&motion3d(
        &[
            "compose-scene",
            "--entity",
            "figure_eight-00",
            "--frames",
            "20",
            "--out",
            "s.poseq",
        ],
        dir.path(),
    ));
    ok(&motion3d(
        &[
            "project-2d",
            "--scene",
            "s.poseq",
            "--rig",
            "rig.json",
            "--out-dir",
            "tracks",
        ],
        dir.path(),
    ));
    let files = fs::read_dir(dir.path().join("tracks")).unwrap().count();
    assert_eq!(files, 12);
    let csv = fs::read_to_string(dir.path().join("tracks/cam03.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);

    ok(&motion3d(
        &[
            "gen-traj",
            "--template",
            "turn_back_180-01",
            "--template",
            "static-00",
            "--out-dir",
            "lib",
        ],
        dir.path(),
    ));
    assert!(dir.path().join("lib/turn_back_180-01.poseq").exists());
    assert!(dir.path().join("lib/static-00.poseq").exists());
    let list = ok(&motion3d(&["gen-traj", "--list"], dir.path()));
    assert_eq!(list.lines().count(), 97);
}
