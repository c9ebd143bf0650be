mod common;

use std::path::{Path, PathBuf};
use std::process::Command as Process;
use std::sync::OnceLock;

use moesplat::artifacts::{Manifest, CONFIG_ECHO, MANIFEST};
use moesplat::model::{Checkpoint, DATASET_FILE, GROUND_TRUTH_FILE};
use moesplat::{run, Command, Overrides, RunConfig};
use moesplat_core::scene::{io, synth_scene, Split};
use moesplat_core::ImageBuffer;
use tempfile::TempDir;

/// A synthesized micro scene and a model trained on it, shared by tests.
struct Fixture {
    _dir: TempDir,
    scene: PathBuf,
    model: PathBuf,
    cfg: RunConfig,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let scene = dir.path().join("scene");
        let model = dir.path().join("model");
        let mut cfg = common::micro_config(&scene, 5);
        run(Command::Synth, &cfg).unwrap();
        cfg.scene.path = Some(scene.clone());
        cfg.out = model.clone();
        run(Command::Train, &cfg).unwrap();
        cfg.checkpoint = Some(model.clone());
        Fixture {
            _dir: dir,
            scene,
            model,
            cfg,
        }
    })
}

fn read_image(path: &Path) -> ImageBuffer {
    io::decode_image(&std::fs::read(path).unwrap()).unwrap()
}

/// Manifest entries except the config echo, which records the output path.
fn artifacts(m: &Manifest) -> Vec<moesplat::artifacts::Entry> {
    m.files.iter().filter(|e| e.path != CONFIG_ECHO).cloned().collect()
}

fn binary() -> Process {
    Process::new(env!("CARGO_BIN_EXE_moesplat"))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn synth_manifest_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(Command::Synth, &common::micro_config(&dir.path().join("a"), 9)).unwrap();
    let b = run(Command::Synth, &common::micro_config(&dir.path().join("b"), 9)).unwrap();
    assert_eq!(artifacts(&a), artifacts(&b));
    let loaded = Manifest::load(&dir.path().join("a")).unwrap();
    assert_eq!(loaded, a);
    loaded.verify(&dir.path().join("a")).unwrap();

    let stored = io::decode_dataset(&std::fs::read(dir.path().join("a").join(DATASET_FILE)).unwrap()).unwrap();
    let fresh = synth_scene(9, &common::micro_config(dir.path(), 9).scene.spec).unwrap();
    assert_eq!(stored, fresh.dataset);
}

#[test]
fn stored_ground_truth_re_renders_stored_images() {
    let f = fixture();
    let gt = io::decode_ground_truth(&std::fs::read(f.scene.join(GROUND_TRUTH_FILE)).unwrap()).unwrap();
    let ds = io::decode_dataset(&std::fs::read(f.scene.join(DATASET_FILE)).unwrap()).unwrap();
    for (i, view) in ds.views().iter().enumerate() {
        let stored = read_image(&f.scene.join(format!("gt/view_{i:03}.img")));
        let again = gt.render(view).unwrap();
        assert!(again.max_abs_diff(&stored) <= 1e-6, "view {i}");
    }
}

#[test]
fn train_twice_gives_identical_checkpoints() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = f.cfg.clone();
    cfg.out = dir.path().join("again");
    let again = run(Command::Train, &cfg).unwrap();
    let first = Manifest::load(&f.model).unwrap();
    assert_eq!(artifacts(&again), artifacts(&first));
    assert_eq!(Checkpoint::load(&f.model).unwrap(), Checkpoint::load(&cfg.out).unwrap());
}

#[test]
fn single_pass_render_matches_multi_pass() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = f.cfg.clone();
    cfg.render.views = vec![0, 2, 13];
    cfg.render.stats = true;
    cfg.out = dir.path().join("multi");
    run(Command::Render, &cfg).unwrap();
    cfg.render.single_pass = true;
    cfg.out = dir.path().join("single");
    run(Command::Render, &cfg).unwrap();
    let ckpt = Checkpoint::load(&f.model).unwrap();
    for v in [0, 2, 13] {
        let mut stems = vec![format!("view_{v:03}")];
        stems.extend((0..ckpt.experts.len()).map(|k| format!("view_{v:03}_expert_{k}")));
        stems.extend((0..ckpt.experts.len()).map(|k| format!("view_{v:03}_gate_{k}")));
        for stem in stems {
            let a = read_image(&dir.path().join("multi").join(format!("{stem}.img")));
            let b = read_image(&dir.path().join("single").join(format!("{stem}.img")));
            assert!(a.max_abs_diff(&b) <= 1e-6, "{stem}");
        }
    }
    let stats = |d: &str| std::fs::read_to_string(dir.path().join(d).join("stats.csv")).unwrap();
    let passes = |text: String| -> Vec<usize> {
        text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect()
    };
    assert!(passes(stats("multi")).iter().all(|&p| p == ckpt.experts.len()));
    assert!(passes(stats("single")).iter().all(|&p| p == 1));
}

#[test]
fn rendered_gates_sum_to_one() {
    let f = fixture();
    let ckpt = Checkpoint::load(&f.model).unwrap();
    let moe = ckpt.moe().unwrap().unwrap();
    let ds = io::decode_dataset(&std::fs::read(f.scene.join(DATASET_FILE)).unwrap()).unwrap();
    for view in ds.views() {
        let r = moe.render(view).unwrap();
        let g = &r.gating().unwrap().gates;
        for px in 0..g.pixel_count() {
            assert!((g.pixel(px).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn eval_writes_documented_csvs() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = f.cfg.clone();
    cfg.out = dir.path().join("eval");
    let manifest = run(Command::Eval, &cfg).unwrap();
    let csv = |name: &str| std::fs::read_to_string(cfg.out.join(name)).unwrap();
    let metrics = csv("metrics.csv");
    assert_eq!(metrics.lines().next(), Some(moesplat::commands::METRICS_HEADER));
    let ds = io::decode_dataset(&std::fs::read(f.scene.join(DATASET_FILE)).unwrap()).unwrap();
    // one row per view for the mixture and for each expert
    assert_eq!(metrics.lines().count(), 1 + 3 * ds.len());
    assert_eq!(csv("specialization.csv").lines().count(), 3);
    assert_eq!(csv("summary.csv").lines().next(), Some(moesplat::commands::SUMMARY_HEADER));
    assert!(manifest.get("regions.csv").is_some());
    let test_views = ds.indices(Split::Test).len();
    assert!(test_views > 0);
}

#[test]
fn prune_removes_requested_fraction() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = f.cfg.clone();
    cfg.out = dir.path().join("pruned");
    run(Command::Prune, &cfg).unwrap();
    let before: usize = Checkpoint::load(&f.model).unwrap().experts.iter().map(|e| e.len()).sum();
    let after: usize = Checkpoint::load(&cfg.out).unwrap().experts.iter().map(|e| e.len()).sum();
    assert_eq!(before - after, (0.4 * before as f64).floor() as usize);
    let report = std::fs::read_to_string(cfg.out.join("prune_report.csv")).unwrap();
    assert_eq!(report.lines().next(), Some(moesplat::commands::PRUNE_HEADER));
}

#[test]
fn distill_writes_a_single_expert_model() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = f.cfg.clone();
    cfg.optim.distill_steps = 20;
    cfg.out = dir.path().join("student");
    run(Command::Distill, &cfg).unwrap();
    let student = Checkpoint::load(&cfg.out).unwrap();
    assert_eq!(student.experts.len(), 1);
    assert!(student.router.is_none());
    assert_eq!(student.experts[0].kind(), cfg.distill.student);
}

#[test]
fn flags_override_file_and_config_is_echoed() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "seed = 1\nout = {:?}\ncheckpoint = {:?}\n[scene]\npath = {:?}\n[render]\nviews = [1]\n",
        dir.path().join("ignored"),
        f.model,
        f.scene
    );
    let cfg = Overrides {
        seed: Some(5),
        out: Some(dir.path().join("render")),
        views: Some(vec![3]),
        ..Overrides::default()
    }
    .apply(RunConfig::parse(&text).unwrap());
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.optim.seed, 5);
    let manifest = run(Command::Render, &cfg).unwrap();
    assert!(manifest.get("view_003.png").is_some());
    assert!(manifest.get("view_001.png").is_none());
    let echoed = RunConfig::parse(&std::fs::read_to_string(cfg.out.join(CONFIG_ECHO)).unwrap()).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn binary_succeeds_and_writes_manifest() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("render");
    let status = binary()
        .args(["render", "--views", "0,1", "--single-pass", "--stats"])
        .arg("--checkpoint")
        .arg(&f.model)
        .arg("--scene")
        .arg(&f.scene)
        .arg("--out")
        .arg(&out)
        .env("MOESPLAT_THREADS", "1")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let manifest = Manifest::load(&out).unwrap();
    manifest.verify(&out).unwrap();
    assert!(manifest.get("stats.csv").is_some());
    assert!(out.join(MANIFEST).exists());
    assert!(!out.join(".lock").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "sede = 4\n");
    let status = binary().arg("synth").arg("--config").arg(&unknown).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let cfg = write_config(dir.path(), "[optim]\nbatch = 0\n");
    let status = binary().arg("synth").arg("--config").arg(&cfg).arg("--out").arg(dir.path().join("o")).status().unwrap();
    assert_eq!(status.code(), Some(2));
    assert!(!dir.path().join("o").exists(), "validation must run before any output is written");

    // render without a checkpoint
    let status = binary().arg("render").arg("--out").arg(dir.path().join("r")).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_three() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let status = binary()
        .arg("eval")
        .arg("--checkpoint")
        .arg(dir.path().join("nowhere"))
        .arg("--scene")
        .arg(&f.scene)
        .arg("--out")
        .arg(dir.path().join("e"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));

    let status = binary()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&f.model)
        .arg("--scene")
        .arg(dir.path().join("no_scene"))
        .arg("--out")
        .arg(dir.path().join("e"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn corrupt_checkpoint_exits_with_three() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let copy = dir.path().join("model");
    std::fs::create_dir(&copy).unwrap();
    for e in std::fs::read_dir(&f.model).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), copy.join(e.file_name())).unwrap();
    }
    let router = copy.join("router.bin");
    let mut bytes = std::fs::read(&router).unwrap();
    bytes.truncate(bytes.len() - 5);
    std::fs::write(&router, bytes).unwrap();
    let status = binary()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&copy)
        .arg("--scene")
        .arg(&f.scene)
        .arg("--out")
        .arg(dir.path().join("e"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("busy");
    std::fs::create_dir(&out).unwrap();
    std::fs::write(out.join(".lock"), b"").unwrap();
    let err = run(Command::Synth, &common::micro_config(&out, 1)).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn non_finite_failures_map_to_exit_four() {
    let err: moesplat::CliError = moesplat_core::Error::NonFinite {
        group: "color".into(),
        index: 3,
        value: f64::NAN,
    }
    .into();
    assert_eq!(err.exit_code(), 4);
}
