use std::path::Path;
use std::process::{Command, Output};

use splatgrade::color::decode_palette;
use splatgrade::editing::{compose_edited, EditState};
use splatgrade::formats::{load_buffers, save_edit_state, SceneFile};
use splatgrade_gateway::images::{decode_png, read_png};

fn run(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatgrade"))
        .args(args.iter().map(|a| a.as_ref()))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&dyn AsRef<std::ffi::OsStr>]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn png_rgb(path: &Path) -> (usize, usize, Vec<u8>) {
    decode_png(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn train_render_export_eval_edit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    ok(&[&"synth", &data, &"--gaussians", &"60", &"--views", &"9", &"--resolution", &"24", &"-k", &"4"]);
    let manifest = data.join("manifest.json");
    assert!(data.join("view_008.png").is_file());
    assert_eq!(read_png(&data.join("view_000.png")).unwrap().width, 24);

    let config = d.join("train.toml");
    std::fs::write(&config, "epochs = 6\n[learning_rates]\npalette = 0.02\n[densify]\nenabled = false\n").unwrap();
    let scene = d.join("scene.pgss");
    let report = d.join("report.json");
    let out = run(&[&"train", &manifest, &scene, &"--config", &config, &"--init", &data.join("init.pgss"), &"--report", &report]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // One JSON progress line per epoch.
    let log = String::from_utf8(out.stderr).unwrap();
    let records: Vec<serde_json::Value> = log.lines().filter_map(|l| serde_json::from_str(l).ok()).collect();
    assert_eq!(records.len(), 6);
    assert!(records[0]["loss"]["total"].is_number());
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["test_views"], serde_json::json!([0, 8]));
    let loaded = SceneFile::load(&scene).unwrap();
    assert_eq!(loaded.cloud.len(), 60);

    let render = d.join("r1.png");
    ok(&[&"render", &scene, &"1", &render, &"--manifest", &manifest]);
    let (w, h, rendered) = png_rgb(&render);
    assert_eq!((w, h), (24, 24));

    // Client-side composite of the exported buffers with the trained palette.
    let bufdir = d.join("buffers");
    let listed = ok(&[&"export-buffers", &scene, &manifest, &bufdir]);
    assert_eq!(listed.lines().count(), 9);
    let b1 = load_buffers(&bufdir.join("view_001.pgsb")).unwrap();
    let identity = EditState::identity(decode_palette(&loaded.palette).unwrap());
    let client = compose_edited(&b1, &identity).unwrap();
    let worst = client.rgb8.iter().zip(&rendered).map(|(a, b)| a.abs_diff(*b)).max().unwrap();
    assert!(worst <= 1, "{worst}/255");

    // Re-export is bit-identical.
    let again = d.join("buffers2");
    ok(&[&"export-buffers", &scene, &manifest, &again]);
    for i in 0..9 {
        let name = format!("view_{i:03}.pgsb");
        assert_eq!(std::fs::read(bufdir.join(&name)).unwrap(), std::fs::read(again.join(&name)).unwrap());
    }

    // Eval is deterministic and uses views 0 and 8.
    let e1: serde_json::Value = serde_json::from_str(&ok(&[&"eval", &scene, &manifest])).unwrap();
    let e2: serde_json::Value = serde_json::from_str(&ok(&[&"eval", &scene, &manifest])).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(e1["test_views"], serde_json::json!([0, 8]));
    assert!(e1["metrics"]["lightness_psnr"].as_f64().unwrap() > 10.0);

    // Identity edit equals the render; a palette edit changes it.
    let state_path = d.join("state.json");
    save_edit_state(&identity, &state_path).unwrap();
    let same = d.join("same.png");
    ok(&[&"edit-apply", &scene, &state_path, &"1", &same, &"--manifest", &manifest]);
    assert_eq!(png_rgb(&same).2, rendered);
    let mut edited = identity.clone();
    edited.palette.vertices[1] = [0.2, 0.8];
    save_edit_state(&edited, &state_path).unwrap();
    let diff = d.join("diff.png");
    ok(&[&"edit-apply", &scene, &state_path, &"1", &diff, &"--manifest", &manifest]);
    assert_ne!(png_rgb(&diff).2, rendered);
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bogus = d.join("bogus.pgss");
    std::fs::write(&bogus, b"NOPE0000000000000000").unwrap();
    let manifest = d.join("manifest.json");
    std::fs::write(&manifest, "[]").unwrap();

    let out = run(&[&"eval", &bogus, &manifest]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"), "{}", String::from_utf8_lossy(&out.stderr));

    let missing = d.join("m2.json");
    std::fs::write(
        &missing,
        r#"[{"image_path": "nowhere.png", "width": 4, "height": 4, "fx": 4, "fy": 4, "cx": 2, "cy": 2,
            "world_to_camera": [1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]}]"#,
    )
    .unwrap();
    let out = run(&[&"train", &missing, &d.join("o.pgss")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.png"));

    assert!(!run(&[&"render"]).status.success());
}

#[test]
fn train_from_a_random_cloud() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    ok(&[&"synth", &data, &"--gaussians", &"20", &"--views", &"2", &"--resolution", &"16"]);
    let config = d.join("c.toml");
    std::fs::write(&config, "epochs = 2\n").unwrap();
    let scene = d.join("s.pgss");
    ok(&[&"train", &data.join("manifest.json"), &scene, &"--config", &config, &"--gaussians", &"40", &"--sh-degree", &"1", &"-k", &"6"]);
    let s = SceneFile::load(&scene).unwrap();
    assert_eq!((s.cloud.sh_degree, s.cloud.k), (1, 6));
}
