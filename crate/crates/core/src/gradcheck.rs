//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Maximum allowed relative error per element.
    pub tolerance: f64,
    /// Magnitudes below this are compared absolutely.
    pub floor: f64,
    /// One-sided slopes disagreeing by more than this (relative) mark a
    /// non-differentiable point; such elements are skipped and counted.
    /// Smaller kinks inside the stencil are recognized when the analytic
    /// gradient misses the central difference but matches one one-sided
    /// slope within `tolerance`.
    pub kink_ratio: f64,
    /// Check a seeded random subset of elements when set.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            kink_ratio: 1e-3,
            max_elements: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// `(input, element)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub passed: bool,
}

impl GradReport {
    pub fn kink_fraction(&self) -> f64 {
        let total = self.checked + self.skipped_kinks;
        if total == 0 {
            0.0
        } else {
            self.skipped_kinks as f64 / total as f64
        }
    }
}

/// Compares analytic gradients of a scalar `f` against central differences.
///
/// `f` is rebuilt on a fresh tape for every evaluation and must be
/// deterministic; a mismatch between two evaluations at the same point is an
/// error.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut eval = |xs: &[Tensor], track: bool| -> Result<(f64, Option<Vec<Tensor>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), track)).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).item()?;
        let grads = if track {
            let g = tape.backward(out)?;
            Some(vars.iter().map(|&v| g.get(v)).collect())
        } else {
            None
        };
        Ok((value, grads))
    };

    let (f0, analytic) = eval(inputs, true)?;
    let analytic = analytic.expect("tracked evaluation returns gradients");
    let (again, _) = eval(inputs, false)?;
    if again.to_bits() != f0.to_bits() {
        return Err(Error::contract(format!(
            "grad_check: function is not deterministic ({f0} vs {again})"
        )));
    }

    let mut positions: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
        .collect();
    if let Some(max) = cfg.max_elements {
        if positions.len() > max {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut picked: Vec<usize> = sample(&mut rng, positions.len(), max).into_vec();
            picked.sort_unstable();
            positions = picked.into_iter().map(|k| positions[k]).collect();
        }
    }

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
        passed: true,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, e) in positions {
        let orig = work[i].data()[e];
        work[i].data_mut()[e] = orig + cfg.eps;
        let (fp, _) = eval(&work, false)?;
        work[i].data_mut()[e] = orig - cfg.eps;
        let (fm, _) = eval(&work, false)?;
        work[i].data_mut()[e] = orig;

        let forward = (fp - f0) / cfg.eps;
        let backward = (f0 - fm) / cfg.eps;
        let slope_scale = forward.abs().max(backward.abs()).max(cfg.floor);
        if (forward - backward).abs() > cfg.kink_ratio * slope_scale {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * cfg.eps);
        let a = analytic[i].data()[e];
        let rel_to = |n: f64| (a - n).abs() / a.abs().max(n.abs()).max(cfg.floor);
        let rel = rel_to(numeric);
        if rel >= cfg.tolerance && (rel_to(forward) < cfg.tolerance || rel_to(backward) < cfg.tolerance) {
            report.skipped_kinks += 1;
            continue;
        }
        report.checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((i, e));
        }
    }
    report.passed = report.max_rel_error < cfg.tolerance;
    Ok(report)
}
