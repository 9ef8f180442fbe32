use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = r#"
seed = 5

[data]
source = "synth"
synth_train = 160
synth_val = 64
classes = 2
image_size = 8

[teacher]
channels = [4, 8]
epochs = 2
batch_size = 32

[teacher.search]
population = 4
epochs = 3
exploit_interval = 1
train_size = 96
val_size = 48

[student]
channels = [4, 8]
quant_bits = 4
epochs = 2
batch_size = 32

[student.search]
population = 4
epochs = 3
exploit_interval = 1
train_size = 96
val_size = 48
"#;

fn dfkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfkd"))
        .args(args)
        .env_remove("DFKD_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let out = dir.join("out");
    let text = format!("output_dir = {:?}\n{body}", out.to_str().unwrap());
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(o));
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    let out = dir.path().join("out");
    let teacher = out.join("teacher.ckpt");
    let with_teacher = format!("teacher_checkpoint={:?}", teacher.to_str().unwrap());

    ok(&dfkd(&["search-teacher", "--config", &cfg]));
    assert!(out.join("teacher_schedule.txt").exists());
    assert!(out.join("teacher_search.tsv").exists());
    ok(&dfkd(&["train-teacher", "--config", &cfg]));
    assert!(teacher.exists());
    ok(&dfkd(&["search-student", "--config", &cfg, "--set", &with_teacher]));
    ok(&dfkd(&["distill-student", "--config", &cfg, "--set", &with_teacher]));
    let student = out.join("student.ckpt");
    assert!(student.exists());

    let metrics = std::fs::read_to_string(out.join("student_metrics.tsv")).unwrap();
    let header: Vec<&str> = metrics.lines().next().unwrap().split('\t').collect();
    for col in ["epoch", "train_loss", "task", "kd_intra", "kd_inter", "lambda", "val_accuracy"] {
        assert!(header.contains(&col), "missing column {col}");
    }
    assert_eq!(metrics.lines().count(), 3);

    let e = dfkd(&["evaluate", "--config", &cfg, "--checkpoint", student.to_str().unwrap()]);
    ok(&e);
    let line = String::from_utf8_lossy(&e.stdout).into_owned();
    let acc: f64 = line.trim().strip_prefix("accuracy ").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let plots = dir.path().join("plots");
    let sched = out.join("student_schedule.txt");
    let before = std::fs::read(&sched).unwrap();
    ok(&dfkd(&[
        "plot-schedule",
        "--schedule",
        sched.to_str().unwrap(),
        "--out",
        plots.to_str().unwrap(),
    ]));
    assert_eq!(std::fs::read(&sched).unwrap(), before);
    for f in ["probability.svg", "magnitude.svg", "schedule_table.tsv"] {
        assert!(plots.join(f).exists(), "{f}");
    }
    for f in ["probability.svg", "magnitude.svg"] {
        let svg = std::fs::read_to_string(plots.join(f)).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let series = doc
            .descendants()
            .filter(|n| n.has_tag_name("polygon") && n.attribute("class") == Some("series"))
            .count();
        assert_eq!(series, 15, "{f}");
    }

    // every command leaves a self-describing resolved config behind
    for c in ["search-teacher", "train-teacher", "search-student", "distill-student"] {
        assert!(out.join(format!("resolved_{c}.toml")).exists(), "{c}");
    }
}

#[test]
fn schedules_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let cfg = write_config(d.path(), TOY);
        ok(&dfkd(&["search-teacher", "--config", &cfg]));
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("out/teacher_schedule.txt")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    ok(&dfkd(&["search-teacher", "--config", &cfg]));
    let resolved = dir.path().join("out/resolved_search-teacher.toml");
    let first = std::fs::read(dir.path().join("out/teacher_schedule.txt")).unwrap();
    std::fs::remove_file(dir.path().join("out/teacher_schedule.txt")).unwrap();
    ok(&dfkd(&["search-teacher", "--config", resolved.to_str().unwrap()]));
    assert_eq!(std::fs::read(dir.path().join("out/teacher_schedule.txt")).unwrap(), first);
}

#[test]
fn seed_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    let o = Command::new(env!("CARGO_BIN_EXE_dfkd"))
        .args(["search-teacher", "--config", &cfg, "--set", "teacher.search.epochs=1"])
        .env("DFKD_SEED", "77")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    ok(&o);
    let resolved = std::fs::read_to_string(dir.path().join("out/resolved_search-teacher.toml")).unwrap();
    assert!(resolved.lines().any(|l| l.trim() == "seed = 77"), "{resolved}");
    let sched = std::fs::read_to_string(dir.path().join("out/teacher_schedule.txt")).unwrap();
    assert!(sched.lines().next().unwrap().contains("seed=77"));
}

#[test]
fn missing_checkpoint_exits_one_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    let missing = dir.path().join("nowhere/student.ckpt");
    let o = dfkd(&["evaluate", "--config", &cfg, "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(missing.to_str().unwrap()), "{}", stderr(&o));
}

#[test]
fn invalid_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TOY}\n[kd]\nlambda = 0.3\n"));
    let o = dfkd(&["search-teacher", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lambda"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), TOY);
    let o = dfkd(&["search-teacher", "--config", &cfg, "--set", "student.quant_bits=9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("student.quant_bits"), "{}", stderr(&o));

    let o = dfkd(&["search-teacher", "--config", &cfg, "--set", "teacher_checkpoint=t.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dfkd(&["search-student", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("teacher_checkpoint"), "{}", stderr(&o));

    let o = dfkd(&["search-teacher", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_schedule_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.txt");
    std::fs::write(
        &p,
        "# dfkd-schedule version=1 seed=0 population=4 epochs=1\n# header\n0 rotate 0 0.5\n",
    )
    .unwrap();
    let o = dfkd(&[
        "plot-schedule",
        "--schedule",
        p.to_str().unwrap(),
        "--out",
        dir.path().join("p").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}
