//! Oracles and toy problems shared by the integration and acceptance tests.
#![allow(dead_code)]

use cascade_core::autodiff::{Tape, Var};
use cascade_core::cloud::Point;
use cascade_core::discriminator::{Discriminator, DiscriminatorConfig, DISC_PREFIX};
use cascade_core::error::Result;
use cascade_core::generator::{Generator, GeneratorConfig};
use cascade_core::gradcheck::{grad_check, GradCheckConfig, GradReport};
use cascade_core::losses::{
    chamfer, lsgan_discriminator, lsgan_generator, reconstruction_loss, total_loss, ChamferVariant,
};
use cascade_core::nn::{Bound, Params};
use cascade_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_cloud(rng: &mut impl Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)])
        .collect()
}

/// Random cloud on a coarse lattice, so exact distance ties are common.
pub fn lattice_cloud(rng: &mut impl Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| [0, 1, 2].map(|_| rng.gen_range(-4i32..=4) as f64 * 0.125))
        .collect()
}

fn d2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// O(nm) nearest neighbor; the first (lowest) index wins ties.
pub fn brute_nn(from: &[Point], to: &[Point]) -> Vec<(usize, f64)> {
    from.iter()
        .map(|q| {
            let mut best = (0, d2(q, &to[0]));
            for (j, p) in to.iter().enumerate().skip(1) {
                let d = d2(q, p);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// Double-loop Chamfer: `(CD-T, CD-P)`.
pub fn brute_chamfer(x: &[Point], y: &[Point]) -> (f64, f64) {
    let dir = |a: &[Point], b: &[Point]| {
        let nn = brute_nn(a, b);
        let n = a.len() as f64;
        (
            nn.iter().map(|&(_, d)| d).sum::<f64>() / n,
            nn.iter().map(|&(_, d)| d.sqrt()).sum::<f64>() / n,
        )
    };
    let (xt, xp) = dir(x, y);
    let (yt, yp) = dir(y, x);
    (xt + yt, 0.5 * (xp + yp))
}

/// Greedy max-min selection written directly from its definition: each pick
/// maximizes the distance to the closest earlier pick, lowest index on ties.
pub fn brute_fps(points: &[Point], k: usize, start: usize) -> Vec<usize> {
    let mut picked = vec![start];
    while picked.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..points.len() {
            if picked.contains(&i) {
                continue;
            }
            let m = picked.iter().map(|&j| d2(&points[i], &points[j])).fold(f64::INFINITY, f64::min);
            if best.map_or(true, |(_, b)| m > b) {
                best = Some((i, m));
            }
        }
        picked.push(best.unwrap().0);
    }
    picked
}

pub fn check_config(seed: u64, max_elements: Option<usize>) -> GradCheckConfig {
    GradCheckConfig {
        max_elements,
        seed,
        ..GradCheckConfig::default()
    }
}

pub fn chamfer_check(seed: u64, variant: ChamferVariant) -> Result<GradReport> {
    let mut r = rng(seed);
    let (n, m) = (r.gen_range(2..=32), r.gen_range(2..=32));
    let x = Tensor::from_points(&random_cloud(&mut r, n))?;
    let y = Tensor::from_points(&random_cloud(&mut r, m))?;
    grad_check(
        |t, v| Ok(chamfer(t, v[0], v[1], variant)?.value),
        &[x, y],
        &check_config(seed, None),
    )
}

pub fn toy_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        latent: 8,
        h1: vec![6, 8],
        h2: vec![8],
        coarse_hidden: vec![8],
        n_coarse: 8,
        lift_feature: 4,
        disp_hidden: vec![6],
        ..GeneratorConfig::default()
    }
}

pub fn toy_discriminator_config() -> DiscriminatorConfig {
    DiscriminatorConfig {
        n_seeds: 6,
        max_samples: vec![3, 4, 6],
        branch: vec![4, 6],
        integrate: vec![6],
        ..DiscriminatorConfig::default()
    }
}

/// Inputs plus a builder for the complete generator objective
/// `lambda * gan + beta * rec` on a 16-point partial.
pub struct GeneratorProblem {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub params: Params,
    pub names: Vec<String>,
    pub partial: Vec<Point>,
    pub gt: Vec<Point>,
    pub mean_shape: Vec<f64>,
    pub lambda_f: f64,
}

impl GeneratorProblem {
    pub fn new(seed: u64) -> Result<Self> {
        let generator = Generator::new(toy_generator_config())?;
        let discriminator = Discriminator::new(toy_discriminator_config())?;
        let mut params = Params::new();
        generator.init(&mut params, seed);
        discriminator.init(&mut params, seed ^ 0xd);
        let mut r = rng(seed);
        let names = params.iter().filter(|(k, _)| k.starts_with("gen.")).map(|(k, _)| k.clone()).collect();
        Ok(Self {
            generator,
            discriminator,
            names,
            partial: random_cloud(&mut r, 16),
            gt: random_cloud(&mut r, 24),
            mean_shape: (0..8).map(|_| r.gen_range(-0.5..0.5)).collect(),
            lambda_f: r.gen_range(0.01..1.0),
            params,
        })
    }

    pub fn inputs(&self) -> Vec<Tensor> {
        self.names.iter().map(|n| self.params.get(n).unwrap().clone()).collect()
    }

    pub fn loss(&self, tape: &mut Tape, vars: &[Var]) -> Result<Var> {
        let mut b = Bound::default();
        for (n, &v) in self.names.iter().zip(vars) {
            b.insert(n.clone(), v);
        }
        let db = self.params.bind(tape, DISC_PREFIX, false);
        let out = self.generator.forward(tape, &b, &self.partial, Some(&self.mean_shape), 1)?;
        let gt = tape.constant(Tensor::from_points(&self.gt)?);
        let rec = reconstruction_loss(tape, out.coarse, out.fine(), gt, self.lambda_f)?;
        let scores = self.discriminator.forward(tape, &db, out.fine())?;
        let gan = lsgan_generator(tape, scores)?;
        Ok(total_loss(tape, &gan, &rec, 1.0, 200.0)?.value)
    }
}

pub fn generator_check(seed: u64, max_elements: usize) -> Result<GradReport> {
    let p = GeneratorProblem::new(seed)?;
    grad_check(|t, v| p.loss(t, v), &p.inputs(), &check_config(seed, Some(max_elements)))
}

/// Discriminator-side objective over its own parameters and both clouds,
/// followed by the generator-side objective through the discriminator with
/// respect to the fake cloud.
pub fn discriminator_checks(seed: u64) -> Result<(GradReport, GradReport)> {
    let d = Discriminator::new(toy_discriminator_config())?;
    let mut params = Params::new();
    d.init(&mut params, seed);
    let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    let mut r = rng(seed);
    let (nf, nr) = (r.gen_range(12..=32), r.gen_range(12..=32));
    let fake = Tensor::from_points(&random_cloud(&mut r, nf))?;
    let real = Tensor::from_points(&random_cloud(&mut r, nr))?;
    let bind = |vars: &[Var]| {
        let mut b = Bound::default();
        for (n, &v) in names.iter().zip(vars) {
            b.insert(n.clone(), v);
        }
        b
    };
    let mut inputs: Vec<Tensor> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    inputs.push(fake.clone());
    inputs.push(real);
    let k = names.len();
    let d_report = grad_check(
        |t, v| {
            let b = bind(&v[..k]);
            let f = d.forward(t, &b, v[k])?;
            let r = d.forward(t, &b, v[k + 1])?;
            Ok(lsgan_discriminator(t, f, r)?.value)
        },
        &inputs,
        &check_config(seed, None),
    )?;
    let g_report = grad_check(
        |t, v| {
            let b = params.bind(t, DISC_PREFIX, false);
            let s = d.forward(t, &b, v[0])?;
            Ok(lsgan_generator(t, s)?.value)
        },
        &[fake],
        &check_config(seed, None),
    )?;
    Ok((d_report, g_report))
}
