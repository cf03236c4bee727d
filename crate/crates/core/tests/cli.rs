use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use scenegan::voxel::{load_scene, save_scene, VoxelScene};

const SMALL_CONFIG: &str = "preset = tiny
stage_factors = 2x2x2,1x1x1
stage_channels = 8,4
refiner_channels = 4
refiner_blocks = 1
code_hidden = 16
epochs_per_stage = 1
steps_per_epoch = 2
batch_size = 2
";

fn scenegan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scenegan")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    names
}

/// Generates data, trains the small config and returns the final checkpoint path.
fn trained(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    let out = dir.join("run");
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, SMALL_CONFIG).unwrap();
    assert!(scenegan(&["gen-data", "--count", "3", "--dims", "10x6x10", "--seed", "1", "--out", p(&data)]).status.success());
    let o = scenegan(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("final.vxck")
}

#[test]
fn gen_data_writes_count_files_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = scenegan(&["gen-data", "--count", "4", "--dims", "16x12x16", "--seed", "9", "--out", p(out)]);
        assert!(o.status.success());
    }
    let names = files_in(&a);
    assert_eq!(names, ["scene_0.vxsc", "scene_1.vxsc", "scene_2.vxsc", "scene_3.vxsc"]);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap());
        assert_eq!(load_scene(&a.join(n)).unwrap().dims(), [16, 12, 16]);
    }
}

#[test]
fn export_lists_each_non_empty_voxel_once() {
    let dir = tempfile::tempdir().unwrap();
    assert!(scenegan(&["gen-data", "--count", "1", "--dims", "12x8x12", "--out", p(dir.path())]).status.success());
    let scene_path = dir.path().join("scene_0.vxsc");
    let scene = load_scene(&scene_path).unwrap();
    let csv = dir.path().join("points.csv");
    let json = dir.path().join("points.json");
    assert!(scenegan(&["export", "--in", p(&scene_path), "--format", "csv-points", "--out", p(&csv)]).status.success());
    assert!(scenegan(&["export", "--in", p(&scene_path), "--format", "vox-json", "--out", p(&json)]).status.success());
    let lines = fs::read_to_string(&csv).unwrap();
    assert_eq!(lines.lines().count(), scene.non_empty_count());
    for line in lines.lines() {
        let v: Vec<usize> = line.split(',').map(|t| t.parse().unwrap()).collect();
        assert_eq!(scene.get(v[2], v[1], v[0]) as usize, v[3]);
    }
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(parsed["voxels"].as_array().unwrap().len(), scene.non_empty_count());
    assert_eq!(parsed["dims"], serde_json::json!([12, 8, 12]));
}

#[test]
fn empty_scene_exports_an_empty_point_list() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.vxsc");
    save_scene(&VoxelScene::empty([4, 4, 4], 0).unwrap(), &path).unwrap();
    let out = dir.path().join("e.csv");
    assert!(scenegan(&["export", "--in", p(&path), "--format", "csv-points", "--out", p(&out)]).status.success());
    assert_eq!(fs::read_to_string(out).unwrap(), "");
}

#[test]
fn error_classes_become_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.vxsc");
    fs::write(&bad, b"not a scene").unwrap();
    let out = dir.path().join("x.csv");
    assert_eq!(scenegan(&["export", "--in", p(&bad), "--format", "csv-points", "--out", p(&out)]).status.code(), Some(3));

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let run = dir.path().join("run");
    assert_eq!(scenegan(&["train", "--data", p(&empty), "--out", p(&run)]).status.code(), Some(4));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "batch_size = lots\n").unwrap();
    assert_eq!(scenegan(&["train", "--config", p(&cfg), "--data", p(&empty), "--out", p(&run)]).status.code(), Some(4));
    assert!(scenegan(&["gen-data", "--count", "2", "--dims", "10x6x10", "--out", p(&empty)]).status.success());
    assert_eq!(scenegan(&["train", "--config", p(&cfg), "--data", p(&empty), "--out", p(&run)]).status.code(), Some(2));

    assert_eq!(scenegan(&["sample", "--ckpt", p(&bad), "--count", "1", "--out", p(&run)]).status.code(), Some(3));
    assert_eq!(scenegan(&["gen-data", "--count", "1", "--dims", "10x6", "--out", p(&run)]).status.code(), Some(2));
    assert_eq!(scenegan(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_sample_reconstruct_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let run = ckpt.parent().unwrap();
    assert_eq!(files_in(run), ["final.vxck", "losses.csv", "stage_1.vxck", "stage_2.vxck"]);

    let (s1, s2) = (dir.path().join("s1"), dir.path().join("s2"));
    for out in [&s1, &s2] {
        let o = scenegan(&["sample", "--ckpt", p(&ckpt), "--count", "3", "--seed", "5", "--out", p(out)]);
        assert!(o.status.success());
    }
    let names = files_in(&s1);
    assert_eq!(names, ["sample_0.vxsc", "sample_1.vxsc", "sample_2.vxsc"]);
    for n in &names {
        assert_eq!(fs::read(s1.join(n)).unwrap(), fs::read(s2.join(n)).unwrap());
        assert_eq!(load_scene(&s1.join(n)).unwrap().dims(), [10, 6, 10]);
    }
    let js = dir.path().join("js");
    assert!(scenegan(&["sample", "--ckpt", p(&ckpt), "--count", "2", "--out", p(&js), "--format", "vox-json"]).status.success());
    assert_eq!(files_in(&js), ["sample_0.json", "sample_1.json"]);

    let input = dir.path().join("data").join("scene_0.vxsc");
    let rec = dir.path().join("rec.vxsc");
    let o = scenegan(&["reconstruct", "--ckpt", p(&ckpt), "--in", p(&input), "--out", p(&rec)]);
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    let acc: f64 = stdout.trim().strip_prefix("accuracy ").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(load_scene(&rec).unwrap().dims(), [10, 6, 10]);

    // A scene at another resolution is a data mismatch.
    let other = dir.path().join("other.vxsc");
    save_scene(&VoxelScene::empty([8, 6, 8], 0).unwrap(), &other).unwrap();
    let o = scenegan(&["reconstruct", "--ckpt", p(&ckpt), "--in", p(&other), "--out", p(&rec)]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn resume_from_final_checkpoint_is_a_no_op_run() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let before = fs::read(&ckpt).unwrap();
    let out = dir.path().join("again");
    let o = scenegan(&["train", "--data", p(&dir.path().join("data")), "--out", p(&out), "--resume", p(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(out.join("final.vxck")).unwrap(), before);
}
