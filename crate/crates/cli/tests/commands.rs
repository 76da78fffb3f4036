use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mlkp::archive::load_weights;

const SMALL: &str = "\
# reduced run for command tests
train.iterations = 4
train.train_scenes = 4
train.eval_scenes = 2
train.rois_per_image = 8
data.height = 32
data.width = 32
data.max_objects = 2
data.min_size = 8
data.max_size = 16
";

fn mlkp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlkp")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gradcheck_writes_report_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("grad.txt");
    let cfg = write_config(dir.path(), "run.cfg", &format!("paths.report = {}\n", report.display()));
    let o = mlkp(&["gradcheck", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("overall: PASS"), "{text}");
    assert!(text.contains("input"));
}

#[test]
fn gradcheck_fails_at_impossible_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", "");
    let o = mlkp(&["gradcheck", "--config", s(&cfg), "--tolerance", "1e-30"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("overall: FAIL"));
}

#[test]
fn oracle_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", "");
    let o = mlkp(&["oracle", "--config", s(&cfg), "--trials", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn invalid_config_names_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.cfg", "train.iterations = 5\ntrain.speed = 3\n");
    let o = mlkp(&["oracle", "--config", s(&cfg), "--trials", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("train.speed") && err.contains("line 2"), "{err}");
}

#[test]
fn zero_iterations_writes_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", "train.iterations = 0\n");
    let out = dir.path().join("w.bin");
    let o = mlkp(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
    let store = load_weights(&out).unwrap();
    assert!(store.get("head.cls.weight").is_some());
}

#[test]
fn train_is_deterministic_and_eval_reads_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", SMALL);
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    let first = mlkp(&["train", "--config", s(&cfg), "--out", s(&a)]);
    let second = mlkp(&["train", "--config", s(&cfg), "--out", s(&b)]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert_eq!(stdout(&first), stdout(&second));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let log = stdout(&first);
    let line = log.lines().last().unwrap();
    assert!(line.starts_with("iter=4 loss=") && line.contains(" map50="), "{line}");

    let report = dir.path().join("eval.txt");
    let o = mlkp(&["eval", "--config", s(&cfg), "--weights", s(&a), "--report", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&report).unwrap();
    let map_line = text.lines().last().unwrap();
    assert!(map_line.starts_with("map50="), "{text}");
    assert!(line.ends_with(&map_line["map50=".len()..]), "{line} vs {map_line}");

    let dets = dir.path().join("dets.txt");
    let o = mlkp(&["export-detections", "--weights", s(&a), "--out", s(&dets), "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for l in std::fs::read_to_string(&dets).unwrap().lines() {
        let fields: Vec<&str> = l.split(' ').collect();
        assert_eq!(fields.len(), 7, "{l}");
        let image: u64 = fields[0].parse().unwrap();
        assert!((4..6).contains(&image));
        assert!((1..=3).contains(&fields[1].parse::<usize>().unwrap()));
        for f in &fields[2..] {
            assert_eq!(f.split('.').nth(1).map(str::len), Some(6), "{l}");
        }
    }
}

#[test]
fn weights_from_another_model_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let base = write_config(dir.path(), "base.cfg", "train.iterations = 0\nmodel.max_order = 1\nmodel.ranks = \n");
    let full = write_config(dir.path(), "full.cfg", "");
    let w = dir.path().join("w.bin");
    assert!(mlkp(&["train", "--config", s(&base), "--out", s(&w)]).status.success());
    let o = mlkp(&["eval", "--config", s(&full), "--weights", s(&w), "--report", s(&dir.path().join("r.txt"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("missing") && err.contains("mlkp.order2.slot0.weight"), "{err}");
}

#[test]
fn blow_up_names_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", &format!("{SMALL}train.base_lr = 1e12\ntrain.iterations = 20\n").replace("train.iterations = 4\n", ""));
    let o = mlkp(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("w.bin"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("non-finite loss") && err.contains("iteration"), "{err}");
}

#[test]
fn gen_data_writes_images_and_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", SMALL);
    let out = dir.path().join("scenes");
    let o = mlkp(&["gen-data", "--config", s(&cfg), "--out-dir", s(&out), "--count", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..3 {
        let ppm = std::fs::read(out.join(format!("scene_{i:05}.ppm"))).unwrap();
        assert!(ppm.starts_with(b"P6\n32 32\n255\n"));
        assert_eq!(ppm.len(), b"P6\n32 32\n255\n".len() + 32 * 32 * 3);
        let ann = std::fs::read_to_string(out.join(format!("scene_{i:05}.txt"))).unwrap();
        assert!((1..=2).contains(&ann.lines().count()));
    }
    assert!(!out.join("scene_00003.ppm").exists());
}
