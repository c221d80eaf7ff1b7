//! Alternating least-squares adversarial training with Adam, learning-rate
//! decay, the fine-loss ramp and bit-exact checkpoint/resume.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::cloud::Point;
use crate::config::TrainConfig;
use crate::container::{write_atomic, Container};
use crate::dataset::{Dataset, DatasetPair, Split};
use crate::discriminator::{Discriminator, DISC_PREFIX};
use crate::error::{Error, Result};
use crate::generator::{iterations_for, Generator, MeanShapeTable, PriorAutoencoder, GEN_PREFIX};
use crate::losses::{chamfer, lsgan_discriminator, lsgan_generator, reconstruction_loss, total_loss, ChamferVariant};
use crate::nn::Params;
use crate::tensor::Tensor;

/// `max(base * decay^floor(epoch / every), floor)`.
pub fn lr_schedule(epoch: usize, base: f64, decay: f64, every: usize, floor: f64) -> f64 {
    let k = (epoch / every.max(1)) as i32;
    (base * decay.powi(k)).max(floor)
}

/// Linear ramp from `start` at step 0 to `end` at `ramp` steps, then flat.
pub fn lambda_f(step: usize, start: f64, end: f64, ramp: usize) -> f64 {
    if step >= ramp {
        end
    } else {
        start + (end - start) * step as f64 / ramp as f64
    }
}

/// Adam with per-parameter moments keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name}")))?;
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            if m.shape() != g.shape() || p.shape() != g.shape() {
                return Err(Error::contract(format!("optimizer state for {name} has the wrong shape")));
            }
            let (b1, b2) = (self.beta1, self.beta2);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn save(&self, c: &mut Container, tag: &str) {
        c.push(format!("opt.{tag}.t"), Tensor::scalar(self.t as f64));
        for (k, m) in &self.m {
            c.push(format!("opt.{tag}.m.{k}"), m.clone());
        }
        for (k, v) in &self.v {
            c.push(format!("opt.{tag}.v.{k}"), v.clone());
        }
    }

    fn load(c: &Container, tag: &str, cfg: &TrainConfig) -> Result<Self> {
        let mut a = Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        a.t = c
            .get(&format!("opt.{tag}.t"))
            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer step for {tag}")))?
            .item()? as u64;
        let (pm, pv) = (format!("opt.{tag}.m."), format!("opt.{tag}.v."));
        for (name, t) in &c.records {
            if let Some(k) = name.strip_prefix(&pm) {
                a.m.insert(k.to_string(), t.clone());
            } else if let Some(k) = name.strip_prefix(&pv) {
                a.v.insert(k.to_string(), t.clone());
            }
        }
        Ok(a)
    }
}

/// Column order of the loss trace.
pub const TRACE_COLUMNS: [&str; 10] = [
    "step", "lambda_f", "lr_G", "lr_D", "total", "rec", "cd_coarse", "cd_fine", "gan_g", "gan_d",
];

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lambda_f: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub total: f64,
    pub rec: f64,
    pub cd_coarse: f64,
    pub cd_fine: f64,
    pub gan_g: f64,
    pub gan_d: f64,
}

impl StepReport {
    pub fn tsv_header() -> String {
        TRACE_COLUMNS.join("\t")
    }

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            self.lambda_f,
            self.lr_g,
            self.lr_d,
            self.total,
            self.rec,
            self.cd_coarse,
            self.cd_fine,
            self.gan_g,
            self.gan_d
        )
    }
}

pub fn trace_to_tsv(trace: &[StepReport]) -> String {
    let mut s = StepReport::tsv_header();
    s.push('\n');
    for r in trace {
        let _ = writeln!(s, "{}", r.to_tsv());
    }
    s
}

fn slot_hash(seed: u64, slot: u64) -> u64 {
    let mut h = seed.wrapping_add(slot.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

struct Item {
    category: u32,
    partial: Vec<Point>,
    complete: Vec<Point>,
}

fn step_err(component: &str) -> impl FnOnce(Error) -> Error + '_ {
    move |e| match e {
        e @ Error::Step { .. } => e,
        e => Error::Step {
            component: component.to_string(),
            source: Box::new(e),
        },
    }
}

/// Owns all mutable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub prior: PriorAutoencoder,
    pub params: Params,
    pub mean_shapes: MeanShapeTable,
    opt_g: Adam,
    opt_d: Adam,
    pub step: usize,
    pub steps_per_epoch: usize,
    iterations: usize,
    /// Training pairs grouped by category, ascending by category id.
    by_category: Vec<Vec<usize>>,
    train: Vec<DatasetPair>,
}

fn architecture(cfg: &TrainConfig) -> Result<(Generator, Discriminator, PriorAutoencoder)> {
    let gcfg = cfg.generator_config();
    Ok((
        Generator::new(gcfg.clone())?,
        Discriminator::new(cfg.discriminator_config())?,
        PriorAutoencoder::new(&gcfg),
    ))
}

fn group(train: &[DatasetPair]) -> Vec<Vec<usize>> {
    let mut cats: Vec<u32> = train.iter().map(|p| p.category).collect();
    cats.sort_unstable();
    cats.dedup();
    cats.iter()
        .map(|&c| (0..train.len()).filter(|&i| train[i].category == c).collect())
        .collect()
}

/// Encoder input for the prior: at most 512 points taken with a fixed stride.
pub(crate) fn prior_input(points: &[Point]) -> Vec<Point> {
    let stride = points.len().div_ceil(512).max(1);
    points.iter().step_by(stride).copied().collect()
}

impl Trainer {
    /// Initializes parameters, pretrains the prior autoencoder and builds the
    /// mean-shape table from the training split.
    pub fn new(cfg: TrainConfig, data: &Dataset) -> Result<Self> {
        let train: Vec<DatasetPair> = data.split(Split::Train).into_iter().cloned().collect();
        if train.is_empty() {
            return Err(Error::Empty("dataset has no training pairs".into()));
        }
        let (generator, discriminator, prior) = architecture(&cfg)?;
        let iterations = iterations_for(cfg.resolution, cfg.n_coarse)?;
        let mut params = Params::new();
        generator.init(&mut params, cfg.seed);
        discriminator.init(&mut params, cfg.seed);
        prior.init(&mut params, cfg.seed);
        let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
        let by_category = group(&train);
        let mut t = Self {
            opt_g: Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
            opt_d: Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
            mean_shapes: MeanShapeTable { entries: Vec::new() },
            cfg,
            generator,
            discriminator,
            prior,
            params,
            step: 0,
            steps_per_epoch,
            iterations,
            by_category,
            train,
        };
        t.pretrain_prior()?;
        t.mean_shapes = t.build_mean_shapes()?;
        Ok(t)
    }

    fn pretrain_prior(&mut self) -> Result<()> {
        let mut opt = Adam::new(self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps);
        for s in 0..self.cfg.ae_pretrain_steps {
            let idx = self.batch_indices(s, self.cfg.seed ^ 0xae);
            let mut tape = Tape::new();
            let b = self.params.bind(&mut tape, "prior.", true);
            let mut losses = Vec::with_capacity(idx.len());
            for &i in &idx {
                let pts = &self.train[i].complete.points;
                let x = tape.constant(Tensor::from_points(&prior_input(pts))?);
                let f = self.prior.encoder.encode(&mut tape, &b, x)?;
                let rec = self.prior.decoder.decode(&mut tape, &b, f)?;
                let gt = tape.constant(Tensor::from_points(pts)?);
                losses.push(chamfer(&mut tape, rec, gt, ChamferVariant::P)?.value);
            }
            let loss = batch_mean(&mut tape, &losses)?;
            let grads = b.collect(&tape.backward(loss).map_err(step_err("prior pretraining"))?);
            opt.step(&mut self.params, &grads, self.cfg.ae_lr)?;
        }
        Ok(())
    }

    fn build_mean_shapes(&self) -> Result<MeanShapeTable> {
        let mut emb = Vec::with_capacity(self.train.len());
        for p in &self.train {
            emb.push((p.category, self.prior.embed(&self.params, &prior_input(&p.complete.points))?));
        }
        let cats: Vec<u32> = self.by_category.iter().map(|g| self.train[g[0]].category).collect();
        MeanShapeTable::build(&cats, &emb)
    }

    /// Round-robin over categories; the instance within a category is a
    /// hash of `(seed, slot)`, so the batch for a step never depends on
    /// earlier steps.
    fn batch_indices(&self, step: usize, seed: u64) -> Vec<usize> {
        let bs = self.cfg.batch_size;
        (0..bs)
            .map(|k| {
                let slot = (step * bs + k) as u64;
                let g = &self.by_category[(slot % self.by_category.len() as u64) as usize];
                g[(slot_hash(seed, slot) % g.len() as u64) as usize]
            })
            .collect()
    }

    fn items(&self, step: usize) -> Vec<Item> {
        self.batch_indices(step, self.cfg.seed)
            .into_iter()
            .enumerate()
            .map(|(k, i)| {
                let pair = &self.train[i];
                let s = if self.cfg.random_scale_aug {
                    let slot = (step * self.cfg.batch_size + k) as u64;
                    ChaCha8Rng::seed_from_u64(slot_hash(self.cfg.seed ^ 0x5ca1e, slot)).gen_range(1.0 / 1.5..=1.0)
                } else {
                    1.0
                };
                let scale = |pts: &[Point]| pts.iter().map(|p| p.map(|v| v * s)).collect();
                Item {
                    category: pair.category,
                    partial: scale(&pair.partial.points),
                    complete: scale(&pair.complete.points),
                }
            })
            .collect()
    }

    pub fn epoch(&self) -> usize {
        self.step / self.steps_per_epoch
    }

    pub fn learning_rates(&self) -> (f64, f64) {
        let c = &self.cfg;
        let e = self.epoch();
        (
            lr_schedule(e, c.lr_g, c.lr_decay, c.decay_every_epochs, c.lr_floor),
            lr_schedule(e, c.lr_d, c.lr_decay, c.decay_every_epochs, c.lr_floor),
        )
    }

    pub fn lambda_f(&self) -> f64 {
        lambda_f(self.step, self.cfg.lambda_f_start, self.cfg.lambda_f_end, self.cfg.lambda_f_ramp_iters)
    }

    /// One discriminator update on detached fakes, then one generator update
    /// against the updated discriminator. On error all state is left as it
    /// was before the call.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let saved = (self.params.clone(), self.opt_g.clone(), self.opt_d.clone());
        let r = self.try_step();
        if r.is_err() {
            (self.params, self.opt_g, self.opt_d) = saved;
        }
        r
    }

    fn try_step(&mut self) -> Result<StepReport> {
        let (lr_g, lr_d) = self.learning_rates();
        let lf = self.lambda_f();
        let adversarial = self.cfg.adversarial_on();
        let items = self.items(self.step);
        let mut tape = Tape::new();
        let gb = self.params.bind(&mut tape, GEN_PREFIX, true);
        let mut outs = Vec::with_capacity(items.len());
        for it in &items {
            let fm = self.mean_shapes.lookup(Some(it.category));
            let fm = self.generator.cfg.use_mean_shape.then_some(fm.as_slice());
            let o = self
                .generator
                .forward(&mut tape, &gb, &it.partial, fm, self.iterations)
                .map_err(step_err("generator forward"))?;
            let gt = tape.constant(Tensor::from_points(&it.complete)?);
            outs.push((o, gt));
        }

        let mut gan_d = 0.0;
        if adversarial {
            for _ in 0..self.cfg.d_steps_per_g {
                let db = self.params.bind(&mut tape, DISC_PREFIX, true);
                let mut losses = Vec::with_capacity(outs.len());
                for (o, gt) in &outs {
                    let fake = tape.constant(tape.value(o.fine()).clone());
                    let d_fake = self.discriminator.forward(&mut tape, &db, fake).map_err(step_err("discriminator forward"))?;
                    let d_real = self.discriminator.forward(&mut tape, &db, *gt).map_err(step_err("discriminator forward"))?;
                    losses.push(lsgan_discriminator(&mut tape, d_fake, d_real).map_err(step_err("discriminator loss"))?.value);
                }
                let loss = batch_mean(&mut tape, &losses).map_err(step_err("discriminator loss"))?;
                gan_d = tape.value(loss).item()?;
                let grads = db.collect(&tape.backward(loss).map_err(step_err("discriminator backward"))?);
                self.opt_d.step(&mut self.params, &grads, lr_d)?;
            }
        }

        let db = adversarial.then(|| self.params.bind(&mut tape, DISC_PREFIX, false));
        let mut totals = Vec::new();
        let mut sums = [0.0; 5];
        for (o, gt) in &outs {
            let rec = reconstruction_loss(&mut tape, o.coarse, o.fine(), *gt, lf).map_err(step_err("reconstruction loss"))?;
            let total = if let Some(db) = &db {
                let d = self.discriminator.forward(&mut tape, db, o.fine()).map_err(step_err("discriminator forward"))?;
                let gan = lsgan_generator(&mut tape, d).map_err(step_err("adversarial loss"))?;
                sums[4] += gan.component("gan_g").unwrap();
                total_loss(&mut tape, &gan, &rec, self.cfg.lambda, self.cfg.beta).map_err(step_err("total loss"))?
            } else {
                let v = tape.mul_scalar(rec.value, self.cfg.beta).map_err(step_err("total loss"))?;
                crate::losses::LossValue { value: v, components: Vec::new() }
            };
            sums[0] += tape.value(total.value).item()?;
            sums[1] += rec.component("rec").unwrap();
            sums[2] += rec.component("cd_coarse").unwrap();
            sums[3] += rec.component("cd_fine").unwrap();
            totals.push(total.value);
        }
        let loss = batch_mean(&mut tape, &totals).map_err(step_err("total loss"))?;
        let grads = gb.collect(&tape.backward(loss).map_err(step_err("generator backward"))?);
        self.opt_g.step(&mut self.params, &grads, lr_g)?;
        if !self.params.iter().all(|(_, t)| t.is_finite()) {
            return Err(step_err("optimizer update")(Error::Numeric { op: "adam", node: 0 }));
        }

        let n = outs.len() as f64;
        let report = StepReport {
            step: self.step,
            lambda_f: lf,
            lr_g,
            lr_d,
            total: sums[0] / n,
            rec: sums[1] / n,
            cd_coarse: sums[2] / n,
            cd_fine: sums[3] / n,
            gan_g: sums[4] / n,
            gan_d,
        };
        self.step += 1;
        Ok(report)
    }

    /// Runs until `self.step == until`, returning the reports.
    pub fn run_until(&mut self, until: usize) -> Result<Vec<StepReport>> {
        let mut trace = Vec::with_capacity(until.saturating_sub(self.step));
        while self.step < until {
            trace.push(self.train_step()?);
        }
        Ok(trace)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut meta = String::new();
        let _ = writeln!(meta, "format = cascade-checkpoint");
        let _ = writeln!(meta, "step = {}", self.step);
        let _ = writeln!(meta, "steps_per_epoch = {}", self.steps_per_epoch);
        let _ = writeln!(meta, "config_hash = {}", self.cfg.hash());
        for line in self.cfg.to_text().lines() {
            let _ = writeln!(meta, "config.{line}");
        }
        let mut c = Container::new(meta);
        for (k, t) in self.params.iter() {
            c.push(k.clone(), t.clone());
        }
        let (ids, means) = self.mean_shapes.to_tensors()?;
        c.push("meanshape.ids", ids);
        c.push("meanshape.values", means);
        self.opt_g.save(&mut c, "g");
        self.opt_d.save(&mut c, "d");
        Ok(c)
    }

    /// Writes the checkpoint and a `<path>.manifest` text file listing
    /// parameter groups and the config hash.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_container()?.save(path)?;
        let mut m = format!("config_hash\t{}\nstep\t{}\n", self.cfg.hash(), self.step);
        for g in ["gen.enc.", "gen.coarse.", "gen.lift.", "disc.", "prior.enc.", "prior.coarse."] {
            let _ = writeln!(m, "{g}*\t{}", self.params.count(g));
        }
        let mut side = path.as_os_str().to_owned();
        side.push(".manifest");
        write_atomic(Path::new(&side), m.as_bytes())
    }

    /// Rebuilds a trainer from a checkpoint; `data` must be the dataset the
    /// run was started with.
    pub fn restore(path: impl AsRef<Path>, data: &Dataset) -> Result<Self> {
        let c = Container::load(path)?;
        let cfg = config_from_meta(&c)?;
        let train: Vec<DatasetPair> = data.split(Split::Train).into_iter().cloned().collect();
        if train.is_empty() {
            return Err(Error::Empty("dataset has no training pairs".into()));
        }
        let (generator, discriminator, prior) = architecture(&cfg)?;
        let step = meta_usize(&c, "step")?;
        let steps_per_epoch = meta_usize(&c, "steps_per_epoch")?;
        if steps_per_epoch != train.len().div_ceil(cfg.batch_size) {
            return Err(Error::Checkpoint("dataset does not match the checkpointed run".into()));
        }
        let params = params_from(&c, &[GEN_PREFIX, DISC_PREFIX, "prior."], &cfg, true)?;
        Ok(Self {
            mean_shapes: mean_shapes_from(&c)?,
            opt_g: Adam::load(&c, "g", &cfg)?,
            opt_d: Adam::load(&c, "d", &cfg)?,
            iterations: iterations_for(cfg.resolution, cfg.n_coarse)?,
            by_category: group(&train),
            cfg,
            generator,
            discriminator,
            prior,
            params,
            step,
            steps_per_epoch,
            train,
        })
    }
}

fn batch_mean(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    let mut acc = *losses.first().ok_or_else(|| Error::Empty("empty batch".into()))?;
    for &l in &losses[1..] {
        acc = tape.add(acc, l)?;
    }
    tape.mul_scalar(acc, 1.0 / losses.len() as f64)
}

fn meta_usize(c: &Container, key: &str) -> Result<usize> {
    c.meta_value(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("missing or bad metadata {key:?}")))
}

pub(crate) fn config_from_meta(c: &Container) -> Result<TrainConfig> {
    if c.meta_value("format") != Some("cascade-checkpoint") {
        return Err(Error::Checkpoint("not a cascade checkpoint".into()));
    }
    let text: String = c
        .meta
        .lines()
        .filter_map(|l| l.strip_prefix("config."))
        .map(|l| format!("{l}\n"))
        .collect();
    let cfg = TrainConfig::from_text(&text).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    if c.meta_value("config_hash") != Some(cfg.hash().as_str()) {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }
    Ok(cfg)
}

/// Parameters under `prefixes`, checked against a fresh initialization so a
/// missing or misshapen tensor is reported by name.
pub(crate) fn params_from(c: &Container, prefixes: &[&str], cfg: &TrainConfig, with_disc: bool) -> Result<Params> {
    let (g, d, p) = architecture(cfg)?;
    let mut expect = Params::new();
    g.init(&mut expect, 0);
    p.init(&mut expect, 0);
    if with_disc {
        d.init(&mut expect, 0);
    }
    let mut params = Params::new();
    for (name, t) in expect.iter() {
        if !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let got = c.get(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        if got.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                got.shape(),
                t.shape()
            )));
        }
        params.insert(name.clone(), got.clone());
    }
    Ok(params)
}

pub(crate) fn mean_shapes_from(c: &Container) -> Result<MeanShapeTable> {
    let ids = c.get("meanshape.ids").ok_or_else(|| Error::Checkpoint("missing mean-shape ids".into()))?;
    let values = c.get("meanshape.values").ok_or_else(|| Error::Checkpoint("missing mean-shape table".into()))?;
    MeanShapeTable::from_tensors(ids, values)
}
