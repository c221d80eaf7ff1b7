use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use cascade_core::cloud::{read_cloud, CloudFormat};
use cascade_core::eval::CompletionModel;

const TINY: &[&str] = &[
    "latent=16",
    "h1=8,16",
    "h2=16",
    "coarse_hidden=32",
    "lift_feature=4",
    "disp_hidden=8",
    "n_seeds=8",
    "max_samples=4,8,8",
    "d_branch=4,8",
    "d_integrate=8",
    "batch_size=2",
    "steps=3",
    "ae_pretrain_steps=2",
];

fn cascade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cascade"))
        .args(args)
        .env_remove("CASCADE_DATA_ROOT")
        .output()
        .expect("failed to spawn cascade")
}

fn ok(args: &[&str]) -> String {
    let out = cascade(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_args<'a>(manifest: &'a str, out: &'a str) -> Vec<&'a str> {
    let mut a = vec!["train", "--manifest", manifest, "--out", out];
    for kv in TINY {
        a.extend(["--set", kv]);
    }
    a
}

struct Fixture {
    root: PathBuf,
    manifest: PathBuf,
    checkpoint: PathBuf,
    hash: String,
}

/// One small dataset and one briefly trained checkpoint, shared by all tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        let _ = std::fs::remove_dir_all(&root);
        let data = root.join("data");
        ok(&[
            "gen-data",
            "--out",
            s(&data),
            "--train-per-category",
            "2",
            "--test-per-category",
            "1",
            "--complete-points",
            "512",
            "--scan-points",
            "256",
        ]);
        let manifest = data.join("manifest.tsv");
        let run = root.join("run");
        let stdout = ok(&train_args(s(&manifest), s(&run)));
        let hash = stdout.trim().rsplit('\t').next().unwrap().to_string();
        Fixture {
            checkpoint: run.join("model.ckpt"),
            root,
            manifest,
            hash,
        }
    })
}

fn partial(f: &Fixture, id_prefix: &str) -> PathBuf {
    let dir = f.manifest.parent().unwrap().join("test");
    let mut names: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with(id_prefix) && n.ends_with(".partial.pcb"))
        .collect();
    names.sort();
    dir.join(&names[0])
}

fn any_partial(f: &Fixture, skip: usize) -> PathBuf {
    let dir = f.manifest.parent().unwrap().join("test");
    let mut names: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| s(p).ends_with(".partial.pcb"))
        .collect();
    names.sort();
    names[skip].clone()
}

fn points(path: &Path) -> Vec<[f64; 3]> {
    read_cloud(path, CloudFormat::from_path(path)).unwrap().points
}

#[test]
fn misspelled_config_key_suggests_the_real_one() {
    let out = cascade(&["train", "--manifest", "missing.tsv", "--out", "unused", "--set", "lrG=1e-3"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("\"lrG\"") && err.contains("did you mean \"lr_G\""), "{err}");
}

#[test]
fn every_unknown_key_is_listed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "lrG = 1\nbeta = 200\nstepz = 3\n").unwrap();
    let out = cascade(&["train", "--config", s(&cfg), "--manifest", "m.tsv", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("\"lrG\"") && err.contains("\"stepz\""), "{err}");
}

#[test]
fn missing_dataset_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("nowhere/manifest.tsv");
    let out = cascade(&train_args(s(&manifest), s(dir.path())));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&manifest)));
}

#[test]
fn data_root_variable_supplies_the_default_manifest() {
    let f = fixture();
    let out = cascade(&["eval", "--checkpoint", s(&f.checkpoint)]);
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_cascade"))
        .args(["eval", "--checkpoint", s(&f.checkpoint)])
        .env("CASCADE_DATA_ROOT", f.manifest.parent().unwrap())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn same_seed_training_reproduces_the_checkpoint_hash() {
    let f = fixture();
    assert_eq!(f.hash.len(), 16);
    let again = f.root.join("rerun");
    let stdout = ok(&train_args(s(&f.manifest), s(&again)));
    assert_eq!(stdout.trim().rsplit('\t').next().unwrap(), f.hash);
    assert_eq!(std::fs::read(&f.checkpoint).unwrap(), std::fs::read(again.join("model.ckpt")).unwrap());
    let trace = std::fs::read_to_string(again.join("trace.tsv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 3);
}

#[test]
fn complete_at_highest_resolution_with_coarse_output() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fine.pcb");
    ok(&[
        "complete",
        "--checkpoint",
        s(&f.checkpoint),
        "--input",
        s(&any_partial(f, 0)),
        "--output",
        s(&out),
        "--resolution",
        "16384",
        "--coarse",
    ]);
    assert_eq!(points(&out).len(), 16384);
    assert_eq!(points(&dir.path().join("fine.coarse.pcb")).len(), 512);
}

#[test]
fn binary_output_rereads_bit_exactly() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let input = any_partial(f, 1);
    let out = dir.path().join("fine.pcb");
    ok(&["complete", "--checkpoint", s(&f.checkpoint), "--input", s(&input), "--output", s(&out)]);
    let model = CompletionModel::load(&f.checkpoint).unwrap();
    let want = model.complete(&points(&input), None, 2048).unwrap().fine;
    let got = points(&out);
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(g.map(f64::to_bits), w.map(f64::to_bits));
    }
}

#[test]
fn manifest_transform_maps_outputs_back() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let input = any_partial(f, 2);
    let plain = dir.path().join("plain.pcb");
    let mapped = dir.path().join("mapped.xyz");
    let cat = partial_category(f, &input);
    ok(&["complete", "--checkpoint", s(&f.checkpoint), "--input", s(&input), "--output", s(&plain), "--category", &cat]);
    ok(&[
        "complete",
        "--checkpoint",
        s(&f.checkpoint),
        "--input",
        s(&input),
        "--output",
        s(&mapped),
        "--manifest",
        s(&f.manifest),
    ]);
    let row = manifest_row(f, &input);
    let (c, k): ([f64; 3], f64) = ([5, 6, 7].map(|i| row[i].parse().unwrap()), row[8].parse().unwrap());
    for (p, q) in points(&plain).iter().zip(points(&mapped)) {
        for i in 0..3 {
            assert!((p[i] / k + c[i] - q[i]).abs() < 1e-9);
        }
    }
}

fn manifest_row(f: &Fixture, input: &Path) -> Vec<String> {
    let name = input.file_name().unwrap().to_str().unwrap();
    std::fs::read_to_string(&f.manifest)
        .unwrap()
        .lines()
        .find(|l| !l.starts_with('#') && l.split('\t').nth(3).is_some_and(|p| p.ends_with(name)))
        .unwrap()
        .split('\t')
        .map(String::from)
        .collect()
}

fn partial_category(f: &Fixture, input: &Path) -> String {
    manifest_row(f, input)[1].clone()
}

#[test]
fn unsupported_resolution_lists_the_supported_ones() {
    let f = fixture();
    let out = cascade(&[
        "complete",
        "--checkpoint",
        s(&f.checkpoint),
        "--input",
        s(&any_partial(f, 0)),
        "--output",
        "unused.pcb",
        "--resolution",
        "3000",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[2048, 4096, 8192, 16384]"), "{err}");
}

#[test]
fn eval_writes_report_and_warns_about_empty_categories() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    // Drop the test rows of one category.
    let text = std::fs::read_to_string(&f.manifest).unwrap();
    let kept: String = text
        .lines()
        .filter(|l| !(l.contains("\tcylinder\ttest\t")))
        .map(|l| format!("{l}\n"))
        .collect();
    let data = f.manifest.parent().unwrap();
    let manifest = data.join("no-cylinder-test.tsv");
    std::fs::write(&manifest, kept).unwrap();
    let report = dir.path().join("report.tsv");
    let out = cascade(&["eval", "--checkpoint", s(&f.checkpoint), "--manifest", s(&manifest), "--out", s(&report)]);
    assert!(out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cylinder has no test instances"), "{err}");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("CD-P (x1e-3)") && stdout.contains("CD-T (x1e-4)"), "{stdout}");
    let tsv = std::fs::read_to_string(&report).unwrap();
    assert!(!tsv.contains("\tcylinder\t"));
    assert_eq!(tsv.lines().filter(|l| l.starts_with("category\t")).count(), 3);

    let again = dir.path().join("again.tsv");
    ok(&["eval", "--checkpoint", s(&f.checkpoint), "--manifest", s(&manifest), "--out", s(&again)]);
    assert_eq!(tsv, std::fs::read_to_string(again).unwrap());
}

#[test]
fn occlusion_sweep_rejects_zero_percent() {
    let f = fixture();
    let out = cascade(&[
        "occlude-eval",
        "--checkpoint",
        s(&f.checkpoint),
        "--manifest",
        s(&f.manifest),
        "--levels",
        "0,20",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("(0, 100)"));
}

#[test]
fn occlusion_sweep_rows_follow_percent_order() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("occ.tsv");
    ok(&[
        "occlude-eval",
        "--checkpoint",
        s(&f.checkpoint),
        "--manifest",
        s(&f.manifest),
        "--levels",
        "70,20,40",
        "--out",
        s(&table),
    ]);
    let pcts: Vec<f64> = std::fs::read_to_string(table)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(pcts, [20.0, 40.0, 70.0]);
}

fn interpolate(f: &Fixture, a: &Path, b: &Path, steps: &str, dir: &Path) -> Vec<(f64, Vec<[f64; 3]>)> {
    ok(&[
        "interpolate",
        "--checkpoint",
        s(&f.checkpoint),
        "--a",
        s(a),
        "--b",
        s(b),
        "--steps",
        steps,
        "--out-dir",
        s(dir),
    ]);
    std::fs::read_to_string(dir.join("alphas.tsv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split('\t').collect();
            (c[1].parse().unwrap(), points(&dir.join(c[2])))
        })
        .collect()
}

#[test]
fn interpolation_spacing_and_endpoints() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (partial(f, "plane-slab"), partial(f, "sphere-shell"));
    let frames = interpolate(f, &a, &b, "5", dir.path());
    let alphas: Vec<f64> = frames.iter().map(|x| x.0).collect();
    assert_eq!(alphas, [0.0, 0.25, 0.5, 0.75, 1.0]);

    let ends = interpolate(f, &a, &b, "2", &dir.path().join("two"));
    assert_eq!(ends.len(), 2);
    let complete = |p: &Path, name: &str| {
        let out = dir.path().join(name);
        ok(&["complete", "--checkpoint", s(&f.checkpoint), "--input", s(p), "--output", s(&out)]);
        points(&out)
    };
    assert_eq!(ends[0].1, complete(&a, "a.pcb"));
    assert_eq!(ends[0].1, frames[0].1);
    // The far endpoint keeps A's skip path, so it matches B's completion only
    // through the latent code.
    let model = CompletionModel::load(&f.checkpoint).unwrap();
    let want = model.decode(&model.latent(&points(&b)).unwrap(), &points(&a), None, 2048).unwrap().fine;
    assert_eq!(ends[1].1, want);
}

#[test]
fn interpolating_a_cloud_with_itself_is_constant() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let a = any_partial(f, 3);
    let frames = interpolate(f, &a, &a, "4", dir.path());
    assert_eq!(frames.len(), 4);
    assert!(frames.iter().all(|x| x.1 == frames[0].1));
}

#[test]
fn interpolation_needs_two_steps() {
    let out = cascade(&["interpolate", "--checkpoint", "x", "--a", "a", "--b", "b", "--steps", "1", "--out-dir", "o"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_flags_exit_with_usage_code() {
    assert_eq!(cascade(&["complete", "--bogus"]).status.code(), Some(2));
}
