//! Completion generator: point encoder, coarse decoder and the shared lifting
//! cascade that doubles resolution on every iteration.

use crate::autodiff::{Tape, Var};
use crate::cloud::Point;
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, grid_codes, mirror_xy};
use crate::nn::{linear, seeded_rng, Bound, Mlp, Params};
use crate::tensor::Tensor;

/// Output sizes accepted by [`Generator::complete`].
pub const RESOLUTIONS: [usize; 4] = [2048, 4096, 8192, 16384];

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub latent: usize,
    /// Hidden widths of the first point network; the last one is pooled.
    pub h1: Vec<usize>,
    /// Hidden widths of the second point network before the latent layer.
    pub h2: Vec<usize>,
    pub coarse_hidden: Vec<usize>,
    pub n_coarse: usize,
    /// Per-point feature width inside the lifting module (must be even).
    pub lift_feature: usize,
    pub disp_hidden: Vec<usize>,
    pub grid_scale: f64,
    pub use_mean_shape: bool,
    pub use_contraction_expansion: bool,
    pub use_mirror: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent: 1024,
            h1: vec![128, 256],
            h2: vec![512],
            coarse_hidden: vec![1024, 1024],
            n_coarse: 512,
            lift_feature: 128,
            disp_hidden: vec![256, 128, 64],
            grid_scale: 0.05,
            use_mean_shape: true,
            use_contraction_expansion: true,
            use_mirror: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = self.h1.iter().chain(&self.h2).chain(&self.coarse_hidden).chain(&self.disp_hidden);
        if self.latent == 0 || self.n_coarse == 0 || self.h1.is_empty() || widths.clone().any(|&w| w == 0) {
            return Err(Error::contract("generator widths must be positive and h1 non-empty"));
        }
        if self.lift_feature < 2 || self.lift_feature % 2 != 0 {
            return Err(Error::contract(format!(
                "lift feature width must be even and >= 2, got {}",
                self.lift_feature
            )));
        }
        Ok(())
    }
}

/// Two stacked shared MLPs with max-pooling; the first pool is tiled back
/// onto the per-point features before the second network.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    h1: Mlp,
    h2: Mlp,
}

impl Encoder {
    pub fn new(prefix: &str, cfg: &GeneratorConfig) -> Self {
        let mut d1 = vec![3];
        d1.extend(&cfg.h1);
        let pooled = *cfg.h1.last().unwrap();
        let mut d2 = vec![2 * pooled];
        d2.extend(&cfg.h2);
        d2.push(cfg.latent);
        Self {
            h1: Mlp::new(format!("{prefix}.h1"), d1, false),
            h2: Mlp::new(format!("{prefix}.h2"), d2, false),
        }
    }

    pub fn init(&self, params: &mut Params, seed: u64) {
        self.h1.init(params, &mut seeded_rng(seed, &self.h1.name));
        self.h2.init(params, &mut seeded_rng(seed, &self.h2.name));
    }

    /// `[n, 3] -> [1, latent]`.
    pub fn encode(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        let a = self.h1.forward(tape, b, x)?;
        let g = pool_rows(tape, a)?;
        let gt = tape.tile_rows(g, n)?;
        let cat = tape.concat_last(&[a, gt])?;
        let h = self.h2.forward(tape, b, cat)?;
        pool_rows(tape, h)
    }
}

fn pool_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let w = tape.shape(x)[1];
    let (m, _) = tape.max_over_axis(x, 0)?;
    tape.reshape(m, [1, w])
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoarseDecoder {
    mlp: Mlp,
    n_coarse: usize,
}

impl CoarseDecoder {
    pub fn new(prefix: &str, cfg: &GeneratorConfig) -> Self {
        let mut dims = vec![cfg.latent];
        dims.extend(&cfg.coarse_hidden);
        dims.push(3 * cfg.n_coarse);
        Self {
            mlp: Mlp::new(prefix, dims, false),
            n_coarse: cfg.n_coarse,
        }
    }

    pub fn init(&self, params: &mut Params, seed: u64) {
        self.mlp.init(params, &mut seeded_rng(seed, &self.mlp.name));
    }

    /// Name of the output layer weight, exposed for tests and ablations.
    pub fn output_layer(&self) -> (String, String) {
        let l = self.mlp.layers() - 1;
        (self.mlp.weight_name(l), self.mlp.bias_name(l))
    }

    /// `[1, latent] -> [n_coarse, 3]`.
    pub fn decode(&self, tape: &mut Tape, b: &Bound, f: Var) -> Result<Var> {
        let flat = self.mlp.forward(tape, b, f)?;
        tape.reshape(flat, [self.n_coarse, 3])
    }
}

/// The x2 upsampling block shared by every cascade iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct Lifting {
    prefix: String,
    global_width: usize,
    feature: usize,
    contraction: Mlp,
    expansion: Mlp,
    disp: Mlp,
    grid_scale: f64,
    use_ce: bool,
}

impl Lifting {
    pub fn new(prefix: &str, cfg: &GeneratorConfig) -> Self {
        let c1 = cfg.lift_feature;
        let global_width = if cfg.use_mean_shape { 2 * cfg.latent } else { cfg.latent };
        let mut disp = vec![c1];
        disp.extend(&cfg.disp_hidden);
        disp.push(3);
        Self {
            prefix: prefix.to_string(),
            global_width,
            feature: c1,
            contraction: Mlp::new(format!("{prefix}.cc"), vec![c1, c1 / 2], true),
            expansion: Mlp::new(format!("{prefix}.ce"), vec![2 * c1, 4 * c1], false),
            disp: Mlp::new(format!("{prefix}.disp"), disp, false),
            grid_scale: cfg.grid_scale,
            use_ce: cfg.use_contraction_expansion,
        }
    }

    fn feat_names(&self) -> [String; 3] {
        let p = &self.prefix;
        [format!("{p}.feat.pt.w"), format!("{p}.feat.g.w"), format!("{p}.feat.b")]
    }

    pub fn init(&self, params: &mut Params, seed: u64) {
        // one linear layer over [coords, grid, f_m, f], split so the global
        // part is computed once per cloud instead of once per row
        let joint = Mlp::new(format!("{}.feat", self.prefix), vec![5 + self.global_width, self.feature], true);
        let mut tmp = Params::new();
        joint.init(&mut tmp, &mut seeded_rng(seed, &joint.name));
        let w = tmp.get(&joint.weight_name(0)).unwrap();
        let f = self.feature;
        let [pt, g, b] = self.feat_names();
        params.insert(pt, Tensor::new([5, f], w.data()[..5 * f].to_vec()).unwrap());
        params.insert(g, Tensor::new([self.global_width, f], w.data()[5 * f..].to_vec()).unwrap());
        params.insert(b, Tensor::zeros([1, f]));
        if self.use_ce {
            self.contraction.init(params, &mut seeded_rng(seed, &self.contraction.name));
            self.expansion.init(params, &mut seeded_rng(seed, &self.expansion.name));
        }
        self.disp.init(params, &mut seeded_rng(seed, &self.disp.name));
    }

    /// Names of the displacement head's output layer.
    pub fn displacement_head(&self) -> (String, String) {
        let l = self.disp.layers() - 1;
        (self.disp.weight_name(l), self.disp.bias_name(l))
    }

    /// `[m, 3] -> [2m, 3]`; `global` is `[1, global_width]`.
    pub fn lift(&self, tape: &mut Tape, b: &Bound, points: Var, global: Var) -> Result<Var> {
        let m = tape.shape(points)[0];
        if m % 2 != 0 {
            return Err(Error::contract(format!("lift needs an even point count, got {m}")));
        }
        let tiled = tape.tile_rows(points, 2)?;
        let grid = tape.constant(grid_codes(m, 2, self.grid_scale)?);
        let local = tape.concat_last(&[tiled, grid])?;
        let [pt, g, bias] = self.feat_names();
        let per_row = linear(tape, b, &pt, &bias, local)?;
        let glob = tape.matmul(global, b.var(&g)?)?;
        let glob = tape.tile_rows(glob, 2 * m)?;
        let pre = tape.add(per_row, glob)?;
        let fs = tape.relu(pre)?;
        let features = if self.use_ce {
            let c = self.feature;
            let contracted = self.contraction.forward(tape, b, fs)?;
            let fc = tape.reshape(contracted, [m / 2, 2 * c])?;
            let expanded = self.expansion.forward(tape, b, fc)?;
            let fe = tape.reshape(expanded, [2 * m, c])?;
            tape.add(fs, fe)?
        } else {
            fs
        };
        let disp = self.disp.forward(tape, b, features)?;
        tape.add(tiled, disp)
    }
}

/// `N_c` points drawn by farthest point sampling from the partial input,
/// united with its xy-mirror when `mirror` is set. Cycles through the FPS
/// order when the pool is smaller than `n`.
pub fn merge_inputs(partial: &[Point], n: usize, mirror: bool) -> Result<Vec<Point>> {
    if partial.is_empty() {
        return Err(Error::Empty("partial input has no points".into()));
    }
    let mut pool = partial.to_vec();
    if mirror {
        pool.extend(mirror_xy(partial));
    }
    let k = n.min(pool.len());
    let order = farthest_point_sample(&pool, k, 0)?.indices;
    Ok((0..n).map(|i| pool[order[i % k]]).collect())
}

/// Stage outputs of one completion.
#[derive(Clone, Debug)]
pub struct GenOutput {
    pub latent: Var,
    pub coarse: Var,
    /// `[coarse; merged input]`, the first lifting input.
    pub merged: Var,
    /// One entry per lifting iteration; the last is the fine output.
    pub stages: Vec<Var>,
}

impl GenOutput {
    pub fn fine(&self) -> Var {
        *self.stages.last().expect("at least one lifting iteration")
    }
}

/// Number of lifting iterations for an output size, `2 N_c 2^k = resolution`.
pub fn iterations_for(resolution: usize, n_coarse: usize) -> Result<usize> {
    let supported = || format!("{RESOLUTIONS:?}");
    if !RESOLUTIONS.contains(&resolution) {
        return Err(Error::contract(format!(
            "unsupported resolution {resolution}; supported: {}",
            supported()
        )));
    }
    (1..=4)
        .find(|&k| 2 * n_coarse * (1 << k) == resolution)
        .ok_or_else(|| {
            Error::contract(format!(
                "resolution {resolution} is not 2 * {n_coarse} * 2^k for k in 1..=4"
            ))
        })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub encoder: Encoder,
    pub coarse: CoarseDecoder,
    pub lifting: Lifting,
}

pub const GEN_PREFIX: &str = "gen.";

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encoder: Encoder::new("gen.enc", &cfg),
            coarse: CoarseDecoder::new("gen.coarse", &cfg),
            lifting: Lifting::new("gen.lift", &cfg),
            cfg,
        })
    }

    pub fn init(&self, params: &mut Params, seed: u64) {
        self.encoder.init(params, seed);
        self.coarse.init(params, seed);
        self.lifting.init(params, seed);
    }

    pub fn encode(&self, tape: &mut Tape, b: &Bound, partial: &[Point]) -> Result<Var> {
        let x = tape.constant(Tensor::from_points(partial)?);
        self.encoder.encode(tape, b, x)
    }

    /// Full forward pass with `iterations` lifting steps.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        partial: &[Point],
        mean_shape: Option<&[f64]>,
        iterations: usize,
    ) -> Result<GenOutput> {
        let latent = self.encode(tape, b, partial)?;
        self.decode_latent(tape, b, latent, partial, mean_shape, iterations)
    }

    /// Decodes a latent code, using `partial` for the skip path.
    pub fn decode_latent(
        &self,
        tape: &mut Tape,
        b: &Bound,
        latent: Var,
        partial: &[Point],
        mean_shape: Option<&[f64]>,
        iterations: usize,
    ) -> Result<GenOutput> {
        if !(1..=4).contains(&iterations) {
            return Err(Error::contract(format!("lifting iterations must be 1..=4, got {iterations}")));
        }
        let global = if self.cfg.use_mean_shape {
            let fm = mean_shape.ok_or_else(|| Error::contract("mean shape required but not given"))?;
            if fm.len() != self.cfg.latent {
                return Err(Error::contract(format!(
                    "mean shape width {} != latent width {}",
                    fm.len(),
                    self.cfg.latent
                )));
            }
            let fm = tape.constant(Tensor::new([1, fm.len()], fm.to_vec())?);
            tape.concat_last(&[fm, latent])?
        } else {
            latent
        };
        let coarse = self.coarse.decode(tape, b, latent)?;
        let sub = merge_inputs(partial, self.cfg.n_coarse, self.cfg.use_mirror)?;
        let sub = tape.constant(Tensor::from_points(&sub)?);
        let merged = tape.concat_rows(&[coarse, sub])?;
        let mut stages = Vec::with_capacity(iterations);
        let mut cur = merged;
        for _ in 0..iterations {
            cur = self.lifting.lift(tape, b, cur, global)?;
            stages.push(cur);
        }
        Ok(GenOutput {
            latent,
            coarse,
            merged,
            stages,
        })
    }
}

/// Per-category mean latent codes.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanShapeTable {
    pub entries: Vec<(u32, Vec<f64>)>,
}

impl MeanShapeTable {
    /// Averages `embeddings` per category; every id in `categories` must
    /// have at least one embedding.
    pub fn build(categories: &[u32], embeddings: &[(u32, Vec<f64>)]) -> Result<Self> {
        let width = embeddings.first().map(|(_, e)| e.len()).unwrap_or(0);
        let mut entries = Vec::with_capacity(categories.len());
        for &c in categories {
            let mut sum = vec![0.0; width];
            let mut n = 0usize;
            for (_, e) in embeddings.iter().filter(|(id, _)| *id == c) {
                if e.len() != width {
                    return Err(Error::contract("embeddings have different widths"));
                }
                sum.iter_mut().zip(e).for_each(|(s, v)| *s += v);
                n += 1;
            }
            if n == 0 {
                return Err(Error::contract(format!("category {c} has no instances")));
            }
            entries.push((c, sum.into_iter().map(|s| s / n as f64).collect()));
        }
        Ok(Self { entries })
    }

    /// The category's mean, or the average over all categories when the
    /// category is unknown.
    pub fn lookup(&self, category: Option<u32>) -> Vec<f64> {
        if let Some(e) = category.and_then(|c| self.entries.iter().find(|(id, _)| *id == c)) {
            return e.1.clone();
        }
        let width = self.entries.first().map_or(0, |e| e.1.len());
        let mut avg = vec![0.0; width];
        for (_, e) in &self.entries {
            avg.iter_mut().zip(e).for_each(|(a, v)| *a += v);
        }
        let n = self.entries.len().max(1) as f64;
        avg.into_iter().map(|a| a / n).collect()
    }

    pub fn to_tensors(&self) -> Result<(Tensor, Tensor)> {
        let ids = Tensor::vector(self.entries.iter().map(|(c, _)| *c as f64).collect())?;
        let width = self.entries.first().map_or(0, |e| e.1.len());
        let data = self.entries.iter().flat_map(|(_, e)| e.iter().copied()).collect();
        Ok((ids, Tensor::new([self.entries.len(), width], data)?))
    }

    pub fn from_tensors(ids: &Tensor, means: &Tensor) -> Result<Self> {
        if means.shape().len() != 2 || means.rows() != ids.numel() {
            return Err(Error::Checkpoint("mean-shape table is malformed".into()));
        }
        Ok(Self {
            entries: ids
                .data()
                .iter()
                .enumerate()
                .map(|(i, &c)| (c as u32, means.row(i).to_vec()))
                .collect(),
        })
    }
}

/// Autoencoder whose frozen encoder provides mean-shape embeddings and FPD
/// features.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorAutoencoder {
    pub encoder: Encoder,
    pub decoder: CoarseDecoder,
}

pub const PRIOR_PREFIX: &str = "prior.";

impl PriorAutoencoder {
    pub fn new(cfg: &GeneratorConfig) -> Self {
        Self {
            encoder: Encoder::new("prior.enc", cfg),
            decoder: CoarseDecoder::new("prior.coarse", cfg),
        }
    }

    pub fn init(&self, params: &mut Params, seed: u64) {
        self.encoder.init(params, seed);
        self.decoder.init(params, seed);
    }

    /// Latent code of one cloud with frozen parameters.
    pub fn embed(&self, params: &Params, points: &[Point]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, "prior.enc.", false);
        let x = tape.constant(Tensor::from_points(points)?);
        let f = self.encoder.encode(&mut tape, &b, x)?;
        Ok(tape.value(f).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::mirror_xy;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            latent: 16,
            h1: vec![8, 12],
            h2: vec![16],
            coarse_hidden: vec![16],
            n_coarse: 32,
            lift_feature: 8,
            disp_hidden: vec![8],
            ..GeneratorConfig::default()
        }
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
        (0..n).map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]).collect()
    }

    fn setup(cfg: GeneratorConfig) -> (Generator, Params) {
        let g = Generator::new(cfg).unwrap();
        let mut p = Params::new();
        g.init(&mut p, 7);
        (g, p)
    }

    fn encode_points(g: &Generator, p: &Params, pts: &[Point]) -> Vec<f64> {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, GEN_PREFIX, false);
        let f = g.encode(&mut tape, &b, pts).unwrap();
        tape.value(f).data().to_vec()
    }

    #[test]
    fn encoder_is_permutation_invariant_and_ignores_duplicates() {
        let (g, p) = setup(tiny());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 40);
        let base = encode_points(&g, &p, &pts);
        for _ in 0..10 {
            let mut q = pts.clone();
            q.shuffle(&mut rng);
            assert_eq!(encode_points(&g, &p, &q), base);
        }
        let doubled: Vec<Point> = pts.iter().flat_map(|&x| [x, x]).collect();
        assert_eq!(encode_points(&g, &p, &doubled), base);
    }

    #[test]
    fn encoder_hand_forward() {
        let cfg = GeneratorConfig {
            latent: 1,
            h1: vec![1],
            h2: vec![],
            ..tiny()
        };
        let enc = Encoder::new("e", &cfg);
        let mut p = Params::new();
        // h1: a = x; h2: f = max(a + 2 * max(a))
        p.insert("e.h1.0.w", Tensor::new([3, 1], vec![1.0, 0.0, 0.0]).unwrap());
        p.insert("e.h1.0.b", Tensor::zeros([1, 1]));
        p.insert("e.h2.0.w", Tensor::new([2, 1], vec![1.0, 2.0]).unwrap());
        p.insert("e.h2.0.b", Tensor::new([1, 1], vec![0.5]).unwrap());
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, "e.", false);
        let x = tape.constant(Tensor::from_points(&[[1.0, 5.0, 5.0], [-3.0, 0.0, 0.0]]).unwrap());
        let f = enc.encode(&mut tape, &b, x).unwrap();
        assert_eq!(tape.value(f).data(), &[1.0 + 2.0 + 0.5]);
    }

    #[test]
    fn coarse_zero_output_layer_gives_bias_points() {
        let (g, mut p) = setup(tiny());
        let (w, bname) = g.coarse.output_layer();
        p.get_mut(&w).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let bias: Vec<f64> = (0..96).map(|i| i as f64 * 0.01).collect();
        *p.get_mut(&bname).unwrap() = Tensor::new([1, 96], bias.clone()).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, GEN_PREFIX, false);
        let f = tape.constant(Tensor::full([1, 16], 0.3));
        let c = g.coarse.decode(&mut tape, &b, f).unwrap();
        assert_eq!(tape.shape(c), &[32, 3]);
        assert_eq!(tape.value(c).data(), &bias[..]);
    }

    #[test]
    fn merge_inputs_sizes_and_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(&mut rng, 20);
        let merged = merge_inputs(&pts, 32, true).unwrap();
        assert_eq!(merged.len(), 32);
        let mut pool = pts.clone();
        pool.extend(mirror_xy(&pts));
        assert!(merged.iter().all(|m| pool.contains(m)));
        // pool of 40 >= 32: no repeats
        for (i, a) in merged.iter().enumerate() {
            assert!(!merged[i + 1..].contains(a));
        }
        // pool smaller than n cycles
        let cyc = merge_inputs(&pts[..5], 32, false).unwrap();
        assert_eq!(cyc[0], cyc[5]);
        assert!(merge_inputs(&[], 4, true).is_err());
    }

    #[test]
    fn iteration_counts() {
        assert_eq!(iterations_for(2048, 512).unwrap(), 1);
        assert_eq!(iterations_for(16384, 512).unwrap(), 4);
        let err = iterations_for(3000, 512).unwrap_err().to_string();
        assert!(err.contains("16384"));
    }

    #[test]
    fn stage_sizes_double() {
        let (g, p) = setup(tiny());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_points(&mut rng, 24);
        let fm = vec![0.1; 16];
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, GEN_PREFIX, false);
        let out = g.forward(&mut tape, &b, &pts, Some(&fm), 3).unwrap();
        let sizes: Vec<usize> = out.stages.iter().map(|&s| tape.shape(s)[0]).collect();
        assert_eq!(sizes, vec![128, 256, 512]);
        assert_eq!(tape.shape(out.coarse), &[32, 3]);
        assert!(g.forward(&mut tape, &b, &pts, None, 1).is_err());
    }

    #[test]
    fn zeroed_displacement_head_tiles_inputs() {
        let (g, mut p) = setup(tiny());
        let (w, bias) = g.lifting.displacement_head();
        for name in [w, bias] {
            p.get_mut(&name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = random_points(&mut rng, 24);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, GEN_PREFIX, false);
        let out = g.forward(&mut tape, &b, &pts, Some(&[0.0; 16]), 2).unwrap();
        let ps = tape.value(out.merged).to_points().unwrap();
        let fine = tape.value(out.fine()).to_points().unwrap();
        let want: Vec<Point> = ps.iter().flat_map(|&x| [x; 4]).collect();
        assert_eq!(fine, want);
    }

    #[test]
    fn lift_hand_weights() {
        let cfg = GeneratorConfig {
            latent: 2,
            lift_feature: 2,
            disp_hidden: vec![1],
            use_mean_shape: false,
            ..tiny()
        };
        let lift = Lifting::new("l", &cfg);
        let mut p = Params::new();
        lift.init(&mut p, 0);
        for (_, t) in p.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        // feature 0 = relu(x); displacement x += 2 * relu(relu(x)); z += 0.25
        p.get_mut("l.feat.pt.w").unwrap().data_mut()[0] = 1.0;
        p.get_mut("l.disp.0.w").unwrap().data_mut()[0] = 1.0;
        p.get_mut("l.disp.1.w").unwrap().data_mut()[0] = 2.0;
        p.get_mut("l.disp.1.b").unwrap().data_mut()[2] = 0.25;
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, "l.", false);
        let pts = tape.constant(Tensor::from_points(&[[0.5, 1.0, 2.0], [-1.0, 0.0, 0.0]]).unwrap());
        let global = tape.constant(Tensor::full([1, 2], 1.0));
        let out = lift.lift(&mut tape, &b, pts, global).unwrap();
        let want = vec![
            [1.5, 1.0, 2.25],
            [1.5, 1.0, 2.25],
            [-1.0, 0.0, 0.25],
            [-1.0, 0.0, 0.25],
        ];
        assert_eq!(tape.value(out).to_points().unwrap(), want);
    }

    #[test]
    fn parameter_count_is_resolution_independent() {
        let (g, p) = setup(tiny());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_points(&mut rng, 24);
        for k in 1..=3 {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape, GEN_PREFIX, true);
            let before = b.iter().count();
            g.forward(&mut tape, &b, &pts, Some(&[0.0; 16]), k).unwrap();
            assert_eq!(before, p.len());
        }
    }

    #[test]
    fn mean_shape_table() {
        let e = vec![(0, vec![1.0, -2.0]), (0, vec![-1.0, 2.0]), (1, vec![3.0, 4.0])];
        let t = MeanShapeTable::build(&[0, 1], &e).unwrap();
        assert_eq!(t.lookup(Some(0)), vec![0.0, 0.0]);
        assert_eq!(t.lookup(Some(1)), vec![3.0, 4.0]);
        assert_eq!(t.lookup(None), vec![1.5, 2.0]);
        assert!(MeanShapeTable::build(&[0, 2], &e).is_err());
        let (ids, m) = t.to_tensors().unwrap();
        assert_eq!(MeanShapeTable::from_tensors(&ids, &m).unwrap(), t);
    }

    #[test]
    fn every_parameter_gets_gradient() {
        use crate::losses::reconstruction_loss;
        let (g, p) = setup(tiny());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts = random_points(&mut rng, 24);
        let gt = random_points(&mut rng, 64);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, GEN_PREFIX, true);
        let out = g.forward(&mut tape, &b, &pts, Some(&[0.2; 16]), 1).unwrap();
        let q = tape.constant(Tensor::from_points(&gt).unwrap());
        let l = reconstruction_loss(&mut tape, out.coarse, out.fine(), q, 1.0).unwrap();
        let grads = tape.backward(l.value).unwrap();
        let by_name = b.collect(&grads);
        for group in ["gen.enc.", "gen.coarse.", "gen.lift."] {
            let norm: f64 = by_name.iter().filter(|(k, _)| k.starts_with(group)).map(|(_, t)| t.sq_norm()).sum();
            assert!(norm > 0.0, "{group}");
        }
    }
}
