//! Patch discriminator: one least-squares score per FPS seed, computed from
//! multi-radius ball groupings.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{ball_query, farthest_point_sample, lexicographic_min};
use crate::nn::{seeded_rng, Bound, Mlp, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FpsStart {
    /// Start at row 0.
    #[default]
    FirstRow,
    /// Start at the lexicographically smallest point, so the seed set does
    /// not depend on input order.
    Canonical,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub n_seeds: usize,
    pub radii: Vec<f64>,
    pub max_samples: Vec<usize>,
    /// Hidden and output widths of each radius branch (input width 3 is implied).
    pub branch: Vec<usize>,
    pub integrate: Vec<usize>,
    pub fps_start: FpsStart,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            n_seeds: 256,
            radii: vec![0.1, 0.2, 0.4],
            max_samples: vec![32, 64, 128],
            branch: vec![32, 64],
            integrate: vec![128, 64],
            fps_start: FpsStart::FirstRow,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radii.is_empty() || self.radii.len() != self.max_samples.len() {
            return Err(Error::contract(format!(
                "{} radii but {} max_samples values",
                self.radii.len(),
                self.max_samples.len()
            )));
        }
        if self.n_seeds == 0 || self.branch.is_empty() || self.branch.iter().chain(&self.integrate).any(|&w| w == 0) {
            return Err(Error::contract("discriminator widths and seed count must be positive"));
        }
        if self.radii.iter().any(|&r| !(r > 0.0)) || self.max_samples.contains(&0) {
            return Err(Error::contract("radii and max_samples must be positive"));
        }
        Ok(())
    }
}

pub const DISC_PREFIX: &str = "disc.";

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    branches: Vec<Mlp>,
    integrate: Mlp,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let branches = (0..cfg.radii.len())
            .map(|i| {
                let mut dims = vec![3];
                dims.extend(&cfg.branch);
                Mlp::new(format!("disc.r{i}"), dims, true)
            })
            .collect::<Vec<_>>();
        let mut dims = vec![cfg.branch.last().unwrap() * cfg.radii.len()];
        dims.extend(&cfg.integrate);
        dims.push(1);
        Ok(Self {
            branches,
            integrate: Mlp::new("disc.int", dims, false),
            cfg,
        })
    }

    pub fn init(&self, params: &mut Params, seed: u64) {
        for m in self.branches.iter().chain([&self.integrate]) {
            m.init(params, &mut seeded_rng(seed, &m.name));
        }
    }

    /// Scores `[n_seeds]` for an `[n, 3]` cloud. Gradients reach the cloud
    /// through the gathered patch coordinates; seeds and memberships are fixed.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, cloud: Var) -> Result<Var> {
        let points = tape.value(cloud).to_points()?;
        let ns = self.cfg.n_seeds;
        if points.len() < ns {
            return Err(Error::contract(format!(
                "discriminator needs at least {ns} points, got {}",
                points.len()
            )));
        }
        let start = match self.cfg.fps_start {
            FpsStart::FirstRow => 0,
            FpsStart::Canonical => lexicographic_min(&points),
        };
        let seeds = farthest_point_sample(&points, ns, start)?;
        let mut pooled = Vec::with_capacity(self.branches.len());
        for ((branch, &r), &s) in self.branches.iter().zip(&self.cfg.radii).zip(&self.cfg.max_samples) {
            let groups = ball_query(&points, &seeds, r, s)?;
            let members: Vec<usize> = groups.iter().flat_map(|g| g.members.iter().copied()).collect();
            let centers: Vec<usize> = groups.iter().flat_map(|g| std::iter::repeat(g.seed).take(s)).collect();
            let m = tape.gather_rows(cloud, &members)?;
            let c = tape.gather_rows(cloud, &centers)?;
            let local = tape.sub(m, c)?;
            let feat = branch.forward(tape, b, local)?;
            let w = tape.shape(feat)[1];
            let grouped = tape.reshape(feat, [ns, s, w])?;
            let (max, _) = tape.max_over_axis(grouped, 1)?;
            pooled.push(max);
        }
        let joined = tape.concat_last(&pooled)?;
        let score = self.integrate.forward(tape, b, joined)?;
        tape.reshape(score, [ns])
    }
}
