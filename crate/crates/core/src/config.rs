//! Training configuration as a plain `key = value` document.

use std::fmt::Write as _;
use std::path::Path;

use crate::container::sha256_hex;
use crate::discriminator::{DiscriminatorConfig, FpsStart};
use crate::error::{ConfigError, Error, Result, UnknownKey};
use crate::generator::{iterations_for, GeneratorConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_decay: f64,
    pub decay_every_epochs: usize,
    pub lr_floor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda: f64,
    pub beta: f64,
    pub lambda_f_start: f64,
    pub lambda_f_end: f64,
    pub lambda_f_ramp_iters: usize,
    pub n_coarse: usize,
    pub n_seeds: usize,
    pub radii: Vec<f64>,
    pub max_samples: Vec<usize>,
    pub resolution: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub steps: usize,
    pub adversarial: bool,
    pub d_steps_per_g: usize,
    pub no_mean_shape: bool,
    pub no_contraction_expansion: bool,
    pub no_mirror: bool,
    pub no_discriminator: bool,
    pub random_scale_aug: bool,
    pub ae_pretrain_steps: usize,
    pub ae_lr: f64,
    pub latent: usize,
    pub h1: Vec<usize>,
    pub h2: Vec<usize>,
    pub coarse_hidden: Vec<usize>,
    pub lift_feature: usize,
    pub disp_hidden: Vec<usize>,
    pub grid_scale: f64,
    pub d_branch: Vec<usize>,
    pub d_integrate: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let d = DiscriminatorConfig::default();
        Self {
            lr_g: 1e-4,
            lr_d: 5e-5,
            lr_decay: 0.7,
            decay_every_epochs: 40,
            lr_floor: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda: 1.0,
            beta: 200.0,
            lambda_f_start: 0.01,
            lambda_f_end: 1.0,
            lambda_f_ramp_iters: 50_000,
            n_coarse: g.n_coarse,
            n_seeds: d.n_seeds,
            radii: d.radii,
            max_samples: d.max_samples,
            resolution: 2048,
            batch_size: 8,
            seed: 0,
            steps: 100_000,
            adversarial: true,
            d_steps_per_g: 1,
            no_mean_shape: false,
            no_contraction_expansion: false,
            no_mirror: false,
            no_discriminator: false,
            random_scale_aug: false,
            ae_pretrain_steps: 2000,
            ae_lr: 1e-3,
            latent: g.latent,
            h1: g.h1,
            h2: g.h2,
            coarse_hidden: g.coarse_hidden,
            lift_feature: g.lift_feature,
            disp_hidden: g.disp_hidden,
            grid_scale: g.grid_scale,
            d_branch: d.branch,
            d_integrate: d.integrate,
        }
    }
}

/// Canonical key order, also used for `to_text`.
pub const KEYS: &[&str] = &[
    "lr_G",
    "lr_D",
    "lr_decay",
    "decay_every_epochs",
    "lr_floor",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "lambda",
    "beta",
    "lambda_f_start",
    "lambda_f_end",
    "lambda_f_ramp_iters",
    "n_coarse",
    "n_seeds",
    "radii",
    "max_samples",
    "resolution",
    "batch_size",
    "seed",
    "steps",
    "adversarial",
    "d_steps_per_g",
    "no_mean_shape",
    "no_contraction_expansion",
    "no_mirror",
    "no_discriminator",
    "random_scale_aug",
    "ae_pretrain_steps",
    "ae_lr",
    "latent",
    "h1",
    "h2",
    "coarse_hidden",
    "lift_feature",
    "disp_hidden",
    "grid_scale",
    "d_branch",
    "d_integrate",
];

fn parse_f64(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = v.parse().map_err(|_| format!("expected a number, got {v:?}"))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("expected a finite number, got {v:?}"))
    }
}

fn parse_usize(v: &str) -> std::result::Result<usize, String> {
    v.parse().map_err(|_| format!("expected a non-negative integer, got {v:?}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn parse_list<T>(v: &str, item: fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| item(s.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn normalize_key(k: &str) -> String {
    k.chars().filter(|c| *c != '_' && *c != '-').flat_map(char::to_lowercase).collect()
}

/// Closest known key: first by case- and underscore-insensitive match, then
/// by edit distance.
pub fn suggest_key(key: &str) -> Option<String> {
    let norm = normalize_key(key);
    if let Some(k) = KEYS.iter().find(|k| normalize_key(k) == norm) {
        return Some(k.to_string());
    }
    KEYS.iter()
        .map(|k| (strsim::levenshtein(&norm, &normalize_key(k)), *k))
        .filter(|&(d, k)| d <= 2.max(k.len() / 4))
        .min()
        .map(|(_, k)| k.to_string())
}

impl TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "lr_G" => self.lr_g = parse_f64(v)?,
            "lr_D" => self.lr_d = parse_f64(v)?,
            "lr_decay" => self.lr_decay = parse_f64(v)?,
            "decay_every_epochs" => self.decay_every_epochs = parse_usize(v)?,
            "lr_floor" => self.lr_floor = parse_f64(v)?,
            "adam_beta1" => self.adam_beta1 = parse_f64(v)?,
            "adam_beta2" => self.adam_beta2 = parse_f64(v)?,
            "adam_eps" => self.adam_eps = parse_f64(v)?,
            "lambda" => self.lambda = parse_f64(v)?,
            "beta" => self.beta = parse_f64(v)?,
            "lambda_f_start" => self.lambda_f_start = parse_f64(v)?,
            "lambda_f_end" => self.lambda_f_end = parse_f64(v)?,
            "lambda_f_ramp_iters" => self.lambda_f_ramp_iters = parse_usize(v)?,
            "n_coarse" => self.n_coarse = parse_usize(v)?,
            "n_seeds" => self.n_seeds = parse_usize(v)?,
            "radii" => self.radii = parse_list(v, parse_f64)?,
            "max_samples" => self.max_samples = parse_list(v, parse_usize)?,
            "resolution" => self.resolution = parse_usize(v)?,
            "batch_size" => self.batch_size = parse_usize(v)?,
            "seed" => self.seed = v.parse().map_err(|_| format!("expected an unsigned integer, got {v:?}"))?,
            "steps" => self.steps = parse_usize(v)?,
            "adversarial" => self.adversarial = parse_bool(v)?,
            "d_steps_per_g" => self.d_steps_per_g = parse_usize(v)?,
            "no_mean_shape" => self.no_mean_shape = parse_bool(v)?,
            "no_contraction_expansion" => self.no_contraction_expansion = parse_bool(v)?,
            "no_mirror" => self.no_mirror = parse_bool(v)?,
            "no_discriminator" => self.no_discriminator = parse_bool(v)?,
            "random_scale_aug" => self.random_scale_aug = parse_bool(v)?,
            "ae_pretrain_steps" => self.ae_pretrain_steps = parse_usize(v)?,
            "ae_lr" => self.ae_lr = parse_f64(v)?,
            "latent" => self.latent = parse_usize(v)?,
            "h1" => self.h1 = parse_list(v, parse_usize)?,
            "h2" => self.h2 = parse_list(v, parse_usize)?,
            "coarse_hidden" => self.coarse_hidden = parse_list(v, parse_usize)?,
            "lift_feature" => self.lift_feature = parse_usize(v)?,
            "disp_hidden" => self.disp_hidden = parse_list(v, parse_usize)?,
            "grid_scale" => self.grid_scale = parse_f64(v)?,
            "d_branch" => self.d_branch = parse_list(v, parse_usize)?,
            "d_integrate" => self.d_integrate = parse_list(v, parse_usize)?,
            _ => unreachable!("caller checks KEYS"),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "lr_G" => self.lr_g.to_string(),
            "lr_D" => self.lr_d.to_string(),
            "lr_decay" => self.lr_decay.to_string(),
            "decay_every_epochs" => self.decay_every_epochs.to_string(),
            "lr_floor" => self.lr_floor.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "lambda" => self.lambda.to_string(),
            "beta" => self.beta.to_string(),
            "lambda_f_start" => self.lambda_f_start.to_string(),
            "lambda_f_end" => self.lambda_f_end.to_string(),
            "lambda_f_ramp_iters" => self.lambda_f_ramp_iters.to_string(),
            "n_coarse" => self.n_coarse.to_string(),
            "n_seeds" => self.n_seeds.to_string(),
            "radii" => join(&self.radii),
            "max_samples" => join(&self.max_samples),
            "resolution" => self.resolution.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "steps" => self.steps.to_string(),
            "adversarial" => self.adversarial.to_string(),
            "d_steps_per_g" => self.d_steps_per_g.to_string(),
            "no_mean_shape" => self.no_mean_shape.to_string(),
            "no_contraction_expansion" => self.no_contraction_expansion.to_string(),
            "no_mirror" => self.no_mirror.to_string(),
            "no_discriminator" => self.no_discriminator.to_string(),
            "random_scale_aug" => self.random_scale_aug.to_string(),
            "ae_pretrain_steps" => self.ae_pretrain_steps.to_string(),
            "ae_lr" => self.ae_lr.to_string(),
            "latent" => self.latent.to_string(),
            "h1" => join(&self.h1),
            "h2" => join(&self.h2),
            "coarse_hidden" => join(&self.coarse_hidden),
            "lift_feature" => self.lift_feature.to_string(),
            "disp_hidden" => join(&self.disp_hidden),
            "grid_scale" => self.grid_scale.to_string(),
            "d_branch" => join(&self.d_branch),
            "d_integrate" => join(&self.d_integrate),
            _ => unreachable!("caller checks KEYS"),
        }
    }

    /// Applies `key = value` lines on top of `self`. Every unknown key and
    /// every bad value is reported together.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut err = ConfigError { unknown: Vec::new(), invalid: Vec::new() };
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                err.invalid.push(format!("line {}: expected key = value, got {line:?}", n + 1));
                continue;
            };
            self.apply_one(k.trim(), v.trim(), &mut err);
        }
        self.finish(err)
    }

    /// Applies `key=value` overrides such as those given with `--set`.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut err = ConfigError { unknown: Vec::new(), invalid: Vec::new() };
        for o in overrides {
            let o = o.as_ref();
            match o.split_once('=') {
                Some((k, v)) => self.apply_one(k.trim(), v.trim(), &mut err),
                None => err.invalid.push(format!("override {o:?} is not key=value")),
            }
        }
        self.finish(err)
    }

    fn apply_one(&mut self, k: &str, v: &str, err: &mut ConfigError) {
        if KEYS.contains(&k) {
            if let Err(m) = self.set(k, v) {
                err.invalid.push(format!("{k}: {m}"));
            }
        } else {
            err.unknown.push(UnknownKey {
                key: k.to_string(),
                suggestion: suggest_key(k),
            });
        }
    }

    fn finish(&self, mut err: ConfigError) -> Result<()> {
        if err.unknown.is_empty() && err.invalid.is_empty() {
            err.invalid = self.problems();
        }
        if err.unknown.is_empty() && err.invalid.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(err))
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k));
        }
        out
    }

    /// Short hex digest of the canonical text.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())[..16].to_string()
    }

    fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (name, v) in [("lr_G", self.lr_g), ("lr_D", self.lr_d), ("lr_floor", self.lr_floor), ("ae_lr", self.ae_lr), ("adam_eps", self.adam_eps)] {
            if !(v > 0.0) {
                p.push(format!("{name} must be positive"));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            p.push("lr_decay must be in (0, 1]".into());
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                p.push(format!("{name} must be in [0, 1)"));
            }
        }
        if self.lambda < 0.0 || self.beta < 0.0 {
            p.push("lambda and beta must be >= 0".into());
        }
        if !(self.lambda_f_start >= 0.0 && self.lambda_f_end >= self.lambda_f_start) {
            p.push("lambda_f must ramp upward from a non-negative start".into());
        }
        for (name, v) in [
            ("decay_every_epochs", self.decay_every_epochs),
            ("batch_size", self.batch_size),
            ("d_steps_per_g", self.d_steps_per_g),
        ] {
            if v == 0 {
                p.push(format!("{name} must be positive"));
            }
        }
        if let Err(e) = self.generator_config().validate() {
            p.push(e.to_string());
        }
        if let Err(e) = self.discriminator_config().validate() {
            p.push(e.to_string());
        }
        if let Err(e) = iterations_for(self.resolution, self.n_coarse) {
            p.push(e.to_string());
        }
        p
    }

    pub fn adversarial_on(&self) -> bool {
        self.adversarial && !self.no_discriminator
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            latent: self.latent,
            h1: self.h1.clone(),
            h2: self.h2.clone(),
            coarse_hidden: self.coarse_hidden.clone(),
            n_coarse: self.n_coarse,
            lift_feature: self.lift_feature,
            disp_hidden: self.disp_hidden.clone(),
            grid_scale: self.grid_scale,
            use_mean_shape: !self.no_mean_shape,
            use_contraction_expansion: !self.no_contraction_expansion,
            use_mirror: !self.no_mirror,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            n_seeds: self.n_seeds,
            radii: self.radii.clone(),
            max_samples: self.max_samples.clone(),
            branch: self.d_branch.clone(),
            integrate: self.d_integrate.clone(),
            fps_start: FpsStart::FirstRow,
        }
    }

    /// Small widths and budgets sized for a few minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            latent: 64,
            h1: vec![32, 64],
            h2: vec![64],
            coarse_hidden: vec![128],
            lift_feature: 16,
            disp_hidden: vec![32, 16],
            d_branch: vec![16, 32],
            d_integrate: vec![32],
            max_samples: vec![8, 16, 32],
            n_seeds: 64,
            batch_size: 2,
            steps: 2000,
            lr_g: 1e-3,
            lr_d: 5e-4,
            decay_every_epochs: 40,
            lambda_f_ramp_iters: 1000,
            ae_pretrain_steps: 300,
            ..Self::default()
        }
    }
}
