mod common;

use std::path::PathBuf;

use cascade_core::autodiff::Tape;
use cascade_core::config::TrainConfig;
use cascade_core::dataset::{synthesize, SynthSpec};
use cascade_core::generator::{Generator, GEN_PREFIX};
use cascade_core::nn::Params;
use cascade_core::tensor::Tensor;
use cascade_core::trainer::Trainer;
use common::toy_generator_config;

fn eight_instances() -> cascade_core::dataset::Dataset {
    synthesize(&SynthSpec {
        train_per_category: 2,
        test_per_category: 0,
        complete_points: 512,
        scan_points: 256,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        latent: 32,
        h1: vec![16, 32],
        h2: vec![32],
        coarse_hidden: vec![64],
        n_coarse: 128,
        lift_feature: 8,
        disp_hidden: vec![16],
        d_branch: vec![8, 16],
        d_integrate: vec![16],
        n_seeds: 32,
        max_samples: vec![4, 8, 16],
        resolution: 2048,
        batch_size: 2,
        lr_g: 1e-3,
        lr_d: 5e-4,
        lambda_f_ramp_iters: 100,
        ae_pretrain_steps: 20,
        ..TrainConfig::default()
    }
}

#[test]
fn eight_instance_training_reduces_reconstruction_loss() {
    let data = eight_instances();
    let mut t = Trainer::new(small_config(), &data).unwrap();
    let trace = t.run_until(120).unwrap();
    let mean = |s: &[cascade_core::trainer::StepReport]| s.iter().map(|r| r.cd_coarse).sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&trace[..10]), mean(&trace[110..]));
    assert!(last < 0.5 * first, "coarse CD {first} -> {last}");
    assert!(trace.iter().all(|r| r.gan_d > 0.0 && r.total.is_finite()));
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let data = eight_instances();
    let dir = tempfile::tempdir().unwrap();
    let bytes: Vec<Vec<u8>> = (0..2)
        .map(|i| {
            let mut t = Trainer::new(TrainConfig { ae_pretrain_steps: 3, ..small_config() }, &data).unwrap();
            t.run_until(5).unwrap();
            let path = dir.path().join(format!("{i}.ckpt"));
            t.save(&path).unwrap();
            std::fs::read(path).unwrap()
        })
        .collect();
    assert_eq!(bytes[0], bytes[1]);
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/coarse_decode.txt")
}

/// Coarse decode of a fixed latent under seed-7 parameters. Set
/// `CASCADE_BLESS=1` to rewrite the recorded coordinates.
#[test]
fn coarse_decode_matches_golden() {
    let g = Generator::new(toy_generator_config()).unwrap();
    let mut params = Params::new();
    g.init(&mut params, 7);
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, GEN_PREFIX, false);
    let f: Vec<f64> = (0..8).map(|i| 0.25 * i as f64 - 0.9).collect();
    let f = tape.constant(Tensor::new([1, 8], f).unwrap());
    let coarse = g.coarse.decode(&mut tape, &b, f).unwrap();
    let got = tape.value(coarse).data().to_vec();
    assert_eq!(got.len(), 8 * 3);

    let path = golden_path();
    if std::env::var_os("CASCADE_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        let text: String = got.iter().map(|v| format!("{v:e}\n")).collect();
        std::fs::write(&path, text).unwrap();
    }
    let want: Vec<f64> = std::fs::read_to_string(&path)
        .expect("golden file missing; run with CASCADE_BLESS=1")
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    assert_eq!(want.len(), got.len());
    for (w, g) in want.iter().zip(&got) {
        assert!((w - g).abs() <= 1e-12, "{w} vs {g}");
    }
}
