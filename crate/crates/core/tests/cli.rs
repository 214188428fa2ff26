use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bwnkt::datasynth::load_dataset;
use bwnkt::detect::{mean_ap, parse_detection_dump, ImageEval};
use bwnkt::network::{build_minidark, load_model, save_model, size_report, DEFAULT_ANCHORS};
use tempfile::TempDir;

const TINY: &str = "\
[train]
epochs = 8
learning_rate = 0.001
batch_size = 4

[kt]
batch_size = 4
learning_rate = 0.0005

[schedule]
m0_epochs = 1
m1_epochs = 1
m2_epochs = 1
";

fn bwnkt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bwnkt")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap());
    }
    out
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self { dir: tempfile::tempdir().unwrap() };
        fs::write(f.path("tiny.toml"), TINY).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn gen(&self, name: &str, count: usize, seed: u64) -> PathBuf {
        let out = self.path(name);
        let o = bwnkt(&["gen-data", "--out", p(&out), "--count", &count.to_string(), "--seed", &seed.to_string()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    }

    fn teacher(&self, data: &Path, name: &str) -> PathBuf {
        let out = self.path(name);
        let cfg = self.path("tiny.toml");
        let o = bwnkt(&["train-teacher", "--config", p(&cfg), "--data", p(data), "--val", p(data), "--out", p(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    }
}

#[test]
fn gen_data_is_deterministic_and_summarized() {
    let f = Fixture::new();
    let a = f.gen("a", 10, 7);
    let b = f.gen("b", 10, 7);
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&f.gen("c", 10, 8)));
    let o = bwnkt(&["gen-data", "--out", p(&f.path("d")), "--count", "10", "--seed", "7"]);
    let line = stdout(&o);
    let field =
        |key: &str| -> usize { line.split_whitespace().skip_while(|w| *w != key).nth(1).unwrap().parse().unwrap() };
    let objects = field("objects");
    assert_eq!(field("images"), 10);
    let hist: usize =
        line.split_whitespace().filter_map(|w| w.split_once('=')).map(|(_, n)| n.parse::<usize>().unwrap()).sum();
    assert_eq!(hist, objects);
    let data = load_dataset(&a).unwrap();
    assert_eq!(data.samples.iter().map(|s| s.labels.len()).sum::<usize>(), objects);
}

#[test]
fn gen_data_errors() {
    let f = Fixture::new();
    let o = bwnkt(&["gen-data", "--out", p(&f.path("z")), "--count", "0", "--seed", "1"]);
    assert_eq!(code(&o), 2);
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
    assert!(!f.path("z").exists());

    let bad = f.path("bad.toml");
    fs::write(&bad, "[data]\nmax_objectz = 3\n").unwrap();
    let o = bwnkt(&["gen-data", "--config", p(&bad), "--out", p(&f.path("y")), "--count", "2"]);
    assert_eq!(code(&o), 2);
    assert!(!f.path("y").exists());

    let o = bwnkt(&["gen-data", "--config", p(&f.path("missing.toml")), "--out", p(&f.path("y")), "--count", "2"]);
    assert_eq!(code(&o), 3);

    let o = bwnkt(&["gen-data", "--out", p(&f.path("x")), "--count", "two"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let f = Fixture::new();
    let a = f.gen("a", 3, 1);
    let before = tree(&a);
    let o = bwnkt(&["gen-data", "--out", p(&a), "--count", "2", "--seed", "2"]);
    assert_eq!(code(&o), 2);
    assert_eq!(tree(&a), before);
    let o = bwnkt(&["gen-data", "--out", p(&a), "--count", "2", "--seed", "2", "--force"]);
    assert_eq!(code(&o), 0);
    assert_eq!(load_dataset(&a).unwrap().len(), 2);

    let m = f.path("m.bwnm");
    save_model(&build_minidark(3, &DEFAULT_ANCHORS, 1).unwrap(), &m).unwrap();
    let out = f.path("export.bwnm");
    assert_eq!(code(&bwnkt(&["export", "--model", p(&m), "--out", p(&out)])), 0);
    assert_eq!(code(&bwnkt(&["export", "--model", p(&m), "--out", p(&out)])), 2);
    assert_eq!(code(&bwnkt(&["export", "--model", p(&m), "--out", p(&out), "--force"])), 0);
}

#[test]
fn teacher_distill_eval_pipeline() {
    let f = Fixture::new();
    let data = f.gen("train", 12, 3);
    let t = f.teacher(&data, "teacher");
    let teacher = load_model(&t.join("teacher.bwnm")).unwrap();
    assert!(teacher.binarized_layers().is_empty());
    let csv = fs::read_to_string(t.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    let total = |row: &str| row.split(',').nth(5).unwrap().parse::<f64>().unwrap();
    assert!(total(rows[7]) < total(rows[0]), "{csv}");

    let cfg = f.path("tiny.toml");
    let tm = t.join("teacher.bwnm");
    let distill = |mode: &str, out: &str| {
        let o = bwnkt(&[
            "distill",
            "--config",
            p(&cfg),
            "--teacher",
            p(&tm),
            "--data",
            p(&data),
            "--val",
            p(&data),
            "--mode",
            mode,
            "--out",
            p(&f.path(out)),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        f.path(out)
    };
    let kt = distill("kt", "kt");
    let student = load_model(&kt.join("student.bwnm")).unwrap();
    let mut layers = student.binarized_layers();
    layers.sort();
    assert_eq!(layers, ["conv2", "conv3", "conv4", "conv5", "conv6", "conv7", "conv8"]);
    let meta = fs::read_to_string(kt.join("run.toml")).unwrap();
    assert!(meta.contains("mode = \"kt\""), "{meta}");
    assert!(meta.contains(&format!("teacher_hash = \"{}\"", teacher.param_hash())));
    assert_eq!(tree(&distill("kt", "kt-again")), tree(&kt));

    let stage = distill("stage", "stage");
    let csv = fs::read_to_string(stage.join("metrics.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "l2_sum").unwrap();
    assert_eq!(csv.lines().skip(1).count(), 3);
    assert!(csv.lines().skip(1).all(|r| r.split(',').nth(col).unwrap().parse::<f64>().unwrap() == 0.0));

    let o =
        bwnkt(&["distill", "--teacher", p(&kt.join("student.bwnm")), "--data", p(&data), "--out", p(&f.path("bad"))]);
    assert_eq!(code(&o), 2);
    let o = bwnkt(&["distill", "--teacher", p(&tm), "--data", p(&data), "--mode", "fancy", "--out", p(&f.path("bad"))]);
    assert_eq!(code(&o), 2);

    let untrained = f.path("untrained.bwnm");
    save_model(&build_minidark(3, &DEFAULT_ANCHORS, 0).unwrap(), &untrained).unwrap();
    let eval = |model: &Path, out: &str| {
        let o = bwnkt(&["eval", "--model", p(model), "--data", p(&data), "--out", p(&f.path(out))]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let line = stdout(&o).lines().find(|l| l.starts_with("mAP,")).unwrap().to_string();
        (line[4..].parse::<f64>().unwrap(), f.path(out))
    };
    let (trained_map, out) = eval(&tm, "eval-teacher");
    let (untrained_map, _) = eval(&untrained, "eval-untrained");
    assert!(trained_map > untrained_map, "{trained_map} vs {untrained_map}");

    let dataset = load_dataset(&data).unwrap();
    let dump = fs::read_to_string(out.join("detections.csv")).unwrap();
    let dets = parse_detection_dump(&dump, dataset.len(), &out).unwrap();
    let images: Vec<ImageEval> =
        dets.into_iter().zip(&dataset.samples).map(|(d, s)| ImageEval { dets: d, gts: s.labels.clone() }).collect();
    assert!((mean_ap(&images, 3, 0.5).map - trained_map).abs() <= 5e-7);
}

#[test]
fn config_echo_reproduces_the_run() {
    let f = Fixture::new();
    let data = f.gen("train", 8, 5);
    let first = f.teacher(&data, "first");
    let echo = first.join("effective_config.toml");
    let out = f.path("second");
    let o = bwnkt(&["train-teacher", "--config", p(&echo), "--data", p(&data), "--val", p(&data), "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(tree(&first), tree(&out));
}

#[test]
fn eval_errors() {
    let f = Fixture::new();
    let data = f.gen("d", 4, 2);
    let m = f.path("m.bwnm");
    save_model(&build_minidark(1, &DEFAULT_ANCHORS, 1).unwrap(), &m).unwrap();
    let o = bwnkt(&["eval", "--model", p(&m), "--data", p(&data), "--out", p(&f.path("e1"))]);
    assert_eq!(code(&o), 2, "class mismatch");
    let empty = f.path("empty");
    fs::create_dir(&empty).unwrap();
    let m3 = f.path("m3.bwnm");
    save_model(&build_minidark(3, &DEFAULT_ANCHORS, 1).unwrap(), &m3).unwrap();
    let o = bwnkt(&["eval", "--model", p(&m3), "--data", p(&empty), "--out", p(&f.path("e2"))]);
    assert_eq!(code(&o), 2, "empty dataset");
    let o = bwnkt(&["eval", "--model", p(&f.path("nope.bwnm")), "--data", p(&data), "--out", p(&f.path("e3"))]);
    assert_eq!(code(&o), 3);
    let garbage = f.path("garbage.bwnm");
    fs::write(&garbage, b"BWNM garbage").unwrap();
    let o = bwnkt(&["size-report", "--model", p(&garbage)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn divergence_exits_4() {
    let f = Fixture::new();
    let data = f.gen("d", 4, 9);
    let cfg = f.path("hot.toml");
    fs::write(&cfg, "[train]\nepochs = 3\nlearning_rate = 1e30\nbatch_size = 4\n").unwrap();
    let o = bwnkt(&["train-teacher", "--config", p(&cfg), "--data", p(&data), "--out", p(&f.path("t"))]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn size_report_and_export() {
    let f = Fixture::new();
    let fp = f.path("fp.bwnm");
    let mut m = build_minidark(3, &DEFAULT_ANCHORS, 4).unwrap();
    save_model(&m, &fp).unwrap();
    let o = bwnkt(&["size-report", "--model", p(&fp)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("ratio 1.00x"), "{}", stdout(&o));

    m.apply_stage(&bwnkt::network::default_schedule(), 2).unwrap();
    let m2 = f.path("m2.bwnm");
    save_model(&m, &m2).unwrap();
    let out = f.path("export.bwnm");
    assert_eq!(code(&bwnkt(&["export", "--model", p(&m2), "--out", p(&out)])), 0);
    let r = size_report(&m);
    assert!((20.0..=32.0).contains(&r.ratio()));
    let len = fs::metadata(&out).unwrap().len() as usize;
    assert_eq!(r.payload_bytes, len - r.overhead_bytes);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&m2).unwrap());
    let text = stdout(&bwnkt(&["size-report", "--model", p(&out)]));
    assert!(text.contains(&format!("total payload {} bytes", r.payload_bytes)), "{text}");
}

#[test]
fn gradcheck_passes_across_seeds() {
    let o = bwnkt(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("ste_backward max deviation from formula 0.000e0"), "{text}");
    for seed in 1..=10 {
        let o = bwnkt(&["gradcheck", "--seed", &seed.to_string()]);
        assert_eq!(code(&o), 0, "seed {seed}: {}", stdout(&o));
    }
}
