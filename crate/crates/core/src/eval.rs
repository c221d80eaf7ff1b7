//! Inference from checkpoints and evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tape;
use crate::cloud::Point;
use crate::config::TrainConfig;
use crate::container::Container;
use crate::dataset::DatasetPair;
use crate::error::{Error, Result};
use crate::fpd::fpd;
use crate::generator::{iterations_for, Generator, MeanShapeTable, PriorAutoencoder, GEN_PREFIX};
use crate::losses::chamfer_values;
use crate::nn::Params;
use crate::synth::{category_name, occlude};
use crate::tensor::Tensor;
use crate::trainer::{config_from_meta, mean_shapes_from, params_from, prior_input, Trainer};

/// Default occlusion percentages for the robustness sweep.
pub const OCCLUSION_LEVELS: [f64; 6] = [20.0, 30.0, 40.0, 50.0, 60.0, 70.0];

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub coarse: Vec<Point>,
    pub fine: Vec<Point>,
}

/// Frozen generator plus the prior encoder used for mean shapes and FPD.
#[derive(Clone, Debug)]
pub struct CompletionModel {
    pub cfg: TrainConfig,
    pub generator: Generator,
    pub prior: PriorAutoencoder,
    pub params: Params,
    pub mean_shapes: MeanShapeTable,
}

impl CompletionModel {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = Container::load(path)?;
        let cfg = config_from_meta(&c)?;
        let params = params_from(&c, &[GEN_PREFIX, "prior."], &cfg, false)?;
        let gcfg = cfg.generator_config();
        Ok(Self {
            generator: Generator::new(gcfg.clone())?,
            prior: PriorAutoencoder::new(&gcfg),
            mean_shapes: mean_shapes_from(&c)?,
            params,
            cfg,
        })
    }

    pub fn from_trainer(t: &Trainer) -> Self {
        let mut params = Params::new();
        for (k, v) in t.params.iter().filter(|(k, _)| !k.starts_with("disc.")) {
            params.insert(k.clone(), v.clone());
        }
        Self {
            cfg: t.cfg.clone(),
            generator: t.generator.clone(),
            prior: t.prior.clone(),
            params,
            mean_shapes: t.mean_shapes.clone(),
        }
    }

    fn mean_shape(&self, category: Option<u32>) -> Option<Vec<f64>> {
        self.generator.cfg.use_mean_shape.then(|| self.mean_shapes.lookup(category))
    }

    pub fn latent(&self, partial: &[Point]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, "gen.enc.", false);
        let f = self.generator.encode(&mut tape, &b, partial)?;
        Ok(tape.value(f).data().to_vec())
    }

    /// Decodes `latent` with `partial` on the skip path.
    pub fn decode(&self, latent: &[f64], partial: &[Point], category: Option<u32>, resolution: usize) -> Result<Completion> {
        let k = iterations_for(resolution, self.cfg.n_coarse)?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, GEN_PREFIX, false);
        let f = tape.constant(Tensor::new([1, latent.len()], latent.to_vec())?);
        let fm = self.mean_shape(category);
        let out = self.generator.decode_latent(&mut tape, &b, f, partial, fm.as_deref(), k)?;
        Ok(Completion {
            coarse: tape.value(out.coarse).to_points()?,
            fine: tape.value(out.fine()).to_points()?,
        })
    }

    pub fn complete(&self, partial: &[Point], category: Option<u32>, resolution: usize) -> Result<Completion> {
        let k = iterations_for(resolution, self.cfg.n_coarse)?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, GEN_PREFIX, false);
        let fm = self.mean_shape(category);
        let out = self.generator.forward(&mut tape, &b, partial, fm.as_deref(), k)?;
        Ok(Completion {
            coarse: tape.value(out.coarse).to_points()?,
            fine: tape.value(out.fine()).to_points()?,
        })
    }

    /// Fine outputs for latent codes evenly spaced from `a`'s to `b`'s.
    /// The skip path and mean shape stay those of `a` for every step.
    pub fn interpolate(
        &self,
        a: &[Point],
        b: &[Point],
        category: Option<u32>,
        steps: usize,
        resolution: usize,
    ) -> Result<Vec<(f64, Vec<Point>)>> {
        if steps < 2 {
            return Err(Error::contract(format!("interpolation needs at least 2 steps, got {steps}")));
        }
        let fa = self.latent(a)?;
        let fb = self.latent(b)?;
        (0..steps)
            .map(|i| {
                let alpha = i as f64 / (steps - 1) as f64;
                let f: Vec<f64> = if i == 0 {
                    fa.clone()
                } else if i == steps - 1 {
                    fb.clone()
                } else {
                    fa.iter().zip(&fb).map(|(x, y)| x + alpha * (y - x)).collect()
                };
                Ok((alpha, self.decode(&f, a, category, resolution)?.fine))
            })
            .collect()
    }

    /// Prior-encoder embedding used as the FPD feature vector.
    pub fn features(&self, points: &[Point]) -> Result<Vec<f64>> {
        self.prior.embed(&self.params, &prior_input(points))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceScore {
    pub id: String,
    pub category: u32,
    pub cd_t: f64,
    pub cd_p: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryRow {
    pub category: u32,
    pub count: usize,
    pub cd_t: f64,
    pub cd_p: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub instances: Vec<InstanceScore>,
    pub rows: Vec<CategoryRow>,
    pub count: usize,
    /// Instance-weighted means.
    pub cd_t: f64,
    pub cd_p: f64,
    pub fpd: Option<f64>,
    pub resolution: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn from_instances(instances: Vec<InstanceScore>, resolution: usize, config_hash: &str) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::Empty("no instances to evaluate".into()));
        }
        let mut groups: BTreeMap<u32, (usize, f64, f64)> = BTreeMap::new();
        for s in &instances {
            let g = groups.entry(s.category).or_default();
            g.0 += 1;
            g.1 += s.cd_t;
            g.2 += s.cd_p;
        }
        let rows: Vec<CategoryRow> = groups
            .into_iter()
            .map(|(category, (n, t, p))| CategoryRow {
                category,
                count: n,
                cd_t: t / n as f64,
                cd_p: p / n as f64,
            })
            .collect();
        let n = instances.len() as f64;
        Ok(Self {
            cd_t: instances.iter().map(|s| s.cd_t).sum::<f64>() / n,
            cd_p: instances.iter().map(|s| s.cd_p).sum::<f64>() / n,
            count: instances.len(),
            instances,
            rows,
            fpd: None,
            resolution,
            config_hash: config_hash.to_string(),
        })
    }

    /// Tab-separated records: one per instance, one per category, one average.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("kind\tid\tcategory\tcount\tcd_t\tcd_p\tresolution\n");
        for i in &self.instances {
            let _ = writeln!(
                s,
                "instance\t{}\t{}\t1\t{}\t{}\t{}",
                i.id,
                category_name(i.category),
                i.cd_t,
                i.cd_p,
                self.resolution
            );
        }
        for r in &self.rows {
            let _ = writeln!(
                s,
                "category\t-\t{}\t{}\t{}\t{}\t{}",
                category_name(r.category),
                r.count,
                r.cd_t,
                r.cd_p,
                self.resolution
            );
        }
        let _ = writeln!(s, "average\t-\t-\t{}\t{}\t{}\t{}", self.count, self.cd_t, self.cd_p, self.resolution);
        if let Some(f) = self.fpd {
            let _ = writeln!(s, "fpd\t-\t-\t{}\t{f}\t{f}\t{}", self.count, self.resolution);
        }
        let _ = writeln!(s, "# config_hash {}", self.config_hash);
        s
    }

    pub fn to_pretty(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "resolution {}  config {}", self.resolution, self.config_hash);
        let _ = writeln!(s, "{:<14} {:>6} {:>14} {:>14}", "category", "n", "CD-P (x1e-3)", "CD-T (x1e-4)");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:>6} {:>14.4} {:>14.4}",
                category_name(r.category),
                r.count,
                r.cd_p * 1e3,
                r.cd_t * 1e4
            );
        }
        let _ = writeln!(s, "{:<14} {:>6} {:>14.4} {:>14.4}", "average", self.count, self.cd_p * 1e3, self.cd_t * 1e4);
        if let Some(f) = self.fpd {
            let _ = writeln!(s, "FPD (prior-encoder features) {f:.6}");
        }
        s
    }
}

/// Scores each prediction against its ground truth.
pub fn score_clouds(items: &[(&DatasetPair, &[Point])]) -> Result<Vec<InstanceScore>> {
    items
        .iter()
        .map(|(pair, pred)| {
            let (cd_t, cd_p) = chamfer_values(pred, &pair.complete.points)?;
            Ok(InstanceScore {
                id: pair.id.clone(),
                category: pair.category,
                cd_t,
                cd_p,
            })
        })
        .collect()
}

/// Completes every test pair and reports CD per category, with FPD between
/// predicted and ground-truth clouds when `with_fpd` is set.
pub fn evaluate(model: &CompletionModel, test: &[&DatasetPair], resolution: usize, with_fpd: bool) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(test.len());
    for p in test {
        preds.push(model.complete(&p.partial.points, Some(p.category), resolution)?.fine);
    }
    let items: Vec<(&DatasetPair, &[Point])> = test.iter().copied().zip(preds.iter().map(Vec::as_slice)).collect();
    let mut report = EvalReport::from_instances(score_clouds(&items)?, resolution, &model.cfg.hash())?;
    if with_fpd {
        let feats = |clouds: &mut dyn Iterator<Item = &[Point]>| -> Result<Tensor> {
            let rows: Vec<Vec<f64>> = clouds.map(|c| model.features(c)).collect::<Result<_>>()?;
            let w = rows[0].len();
            Tensor::new([rows.len(), w], rows.concat())
        };
        let fx = feats(&mut preds.iter().map(Vec::as_slice))?;
        let fy = feats(&mut test.iter().map(|p| p.complete.points.as_slice()))?;
        report.fpd = Some(fpd(&fx, &fy)?);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionRow {
    pub percent: f64,
    pub count: usize,
    pub cd_t: f64,
    pub cd_p: f64,
}

pub fn validate_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::contract("occlusion sweep needs at least one level"));
    }
    for &p in levels {
        if !(p > 0.0 && p < 100.0) {
            return Err(Error::contract(format!("occlusion percent must be in (0, 100), got {p}")));
        }
    }
    Ok(())
}

fn id_seed(id: &str) -> u64 {
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Occludes each test partial by every level in turn, completes it and
/// averages CD. Rows come back sorted by level.
pub fn occlusion_sweep(model: &CompletionModel, test: &[&DatasetPair], levels: &[f64], resolution: usize) -> Result<Vec<OcclusionRow>> {
    validate_levels(levels)?;
    if test.is_empty() {
        return Err(Error::Empty("no test instances".into()));
    }
    let mut sorted = levels.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .into_iter()
        .map(|p| {
            let (mut t, mut q) = (0.0, 0.0);
            for pair in test {
                let occluded = occlude(&pair.partial, p, id_seed(&pair.id))?;
                let fine = model.complete(&occluded.points, Some(pair.category), resolution)?.fine;
                let (ct, cp) = chamfer_values(&fine, &pair.complete.points)?;
                t += ct;
                q += cp;
            }
            let n = test.len() as f64;
            Ok(OcclusionRow {
                percent: p,
                count: test.len(),
                cd_t: t / n,
                cd_p: q / n,
            })
        })
        .collect()
}

pub fn occlusion_to_tsv(rows: &[OcclusionRow]) -> String {
    let mut s = String::from("percent\tcount\tcd_t\tcd_p\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", r.percent, r.count, r.cd_t, r.cd_p);
    }
    s
}

/// Number of adjacent decreases in a sequence.
pub fn inversions(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] < w[0]).count()
}
