//! Chamfer, reconstruction and least-squares adversarial losses.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::cloud::Point;
use crate::error::{Error, Result};
use crate::geometry::nearest_neighbor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChamferVariant {
    /// Sum of the two mean squared nearest-neighbor distances.
    T,
    /// Half the sum of the two mean nearest-neighbor distances.
    P,
}

impl fmt::Display for ChamferVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChamferVariant::T => "CD-T",
            ChamferVariant::P => "CD-P",
        })
    }
}

impl FromStr for ChamferVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CD-T" | "T" => Ok(ChamferVariant::T),
            "CD-P" | "P" => Ok(ChamferVariant::P),
            _ => Err(Error::contract(format!("unknown chamfer variant {s:?}"))),
        }
    }
}

/// A graph-connected scalar plus named values for logging.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: Var,
    pub components: Vec<(String, f64)>,
}

impl LossValue {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

fn points_of(tape: &Tape, v: Var) -> Result<Vec<Point>> {
    let t = tape.value(v);
    if t.shape().len() != 2 || t.shape()[1] != 3 {
        return Err(Error::contract(format!("chamfer expects [n, 3] clouds, got {:?}", t.shape())));
    }
    t.to_points()
}

/// Per-point squared distance from each row of `x` to its nearest row of `y`,
/// with the assignment frozen at forward time.
fn directed(tape: &mut Tape, x: Var, xp: &[Point], y: Var, yp: &[Point]) -> Result<Var> {
    let idx: Vec<usize> = nearest_neighbor(xp, yp)?.into_iter().map(|n| n.index).collect();
    let matched = tape.gather_rows(y, &idx)?;
    let diff = tape.sub(x, matched)?;
    let sq = tape.square(diff)?;
    tape.sum_rows(sq)
}

/// Bidirectional Chamfer distance between two `[n, 3]` clouds.
pub fn chamfer(tape: &mut Tape, x: Var, y: Var, variant: ChamferVariant) -> Result<LossValue> {
    let xp = points_of(tape, x)?;
    let yp = points_of(tape, y)?;
    let dx = directed(tape, x, &xp, y, &yp)?;
    let dy = directed(tape, y, &yp, x, &xp)?;
    let (mx, my) = match variant {
        ChamferVariant::T => (tape.mean_all(dx)?, tape.mean_all(dy)?),
        ChamferVariant::P => {
            let sx = tape.sqrt(dx)?;
            let sy = tape.sqrt(dy)?;
            (tape.mean_all(sx)?, tape.mean_all(sy)?)
        }
    };
    let sum = tape.add(mx, my)?;
    let value = match variant {
        ChamferVariant::T => sum,
        ChamferVariant::P => tape.mul_scalar(sum, 0.5)?,
    };
    let v = tape.value(value).item()?;
    Ok(LossValue {
        value,
        components: vec![(variant.to_string(), v)],
    })
}

/// CD-T and CD-P without a tape, for evaluation.
pub fn chamfer_values(x: &[Point], y: &[Point]) -> Result<(f64, f64)> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::contract("chamfer of an empty cloud"));
    }
    let fwd = nearest_neighbor(x, y)?;
    let bwd = nearest_neighbor(y, x)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let d2x: Vec<f64> = fwd.iter().map(|n| n.sq_distance).collect();
    let d2y: Vec<f64> = bwd.iter().map(|n| n.sq_distance).collect();
    let dx: Vec<f64> = fwd.iter().map(|n| n.distance).collect();
    let dy: Vec<f64> = bwd.iter().map(|n| n.distance).collect();
    Ok((mean(&d2x) + mean(&d2y), 0.5 * (mean(&dx) + mean(&dy))))
}

/// `CD-P(coarse, gt) + lambda_f * CD-P(fine, gt)`.
pub fn reconstruction_loss(
    tape: &mut Tape,
    coarse: Var,
    fine: Var,
    gt: Var,
    lambda_f: f64,
) -> Result<LossValue> {
    if !(lambda_f >= 0.0) {
        return Err(Error::contract(format!("lambda_f must be >= 0, got {lambda_f}")));
    }
    let c = chamfer(tape, coarse, gt, ChamferVariant::P)?;
    let f = chamfer(tape, fine, gt, ChamferVariant::P)?;
    let wf = tape.mul_scalar(f.value, lambda_f)?;
    let value = tape.add(c.value, wf)?;
    Ok(LossValue {
        components: vec![
            ("rec".into(), tape.value(value).item()?),
            ("cd_coarse".into(), tape.value(c.value).item()?),
            ("cd_fine".into(), tape.value(f.value).item()?),
        ],
        value,
    })
}

fn half_mean_sq_offset(tape: &mut Tape, scores: Var, target: f64) -> Result<Var> {
    let shifted = tape.add_scalar(scores, -target)?;
    let sq = tape.square(shifted)?;
    let m = tape.mean_all(sq)?;
    tape.mul_scalar(m, 0.5)
}

/// `0.5 * mean((d_fake - 1)^2)`.
pub fn lsgan_generator(tape: &mut Tape, d_fake: Var) -> Result<LossValue> {
    let value = half_mean_sq_offset(tape, d_fake, 1.0)?;
    Ok(LossValue {
        components: vec![("gan_g".into(), tape.value(value).item()?)],
        value,
    })
}

/// `0.5 * (mean(d_fake^2) + mean((d_real - 1)^2))`.
pub fn lsgan_discriminator(tape: &mut Tape, d_fake: Var, d_real: Var) -> Result<LossValue> {
    let (nf, nr) = (tape.value(d_fake).numel(), tape.value(d_real).numel());
    if nf != nr {
        return Err(Error::contract(format!("score counts differ: fake {nf}, real {nr}")));
    }
    let f = half_mean_sq_offset(tape, d_fake, 0.0)?;
    let r = half_mean_sq_offset(tape, d_real, 1.0)?;
    let value = tape.add(f, r)?;
    Ok(LossValue {
        components: vec![
            ("gan_d".into(), tape.value(value).item()?),
            ("d_fake".into(), tape.value(f).item()?),
            ("d_real".into(), tape.value(r).item()?),
        ],
        value,
    })
}

/// `lambda * gan + beta * rec`; components of both inputs are carried along.
pub fn total_loss(tape: &mut Tape, gan: &LossValue, rec: &LossValue, lambda: f64, beta: f64) -> Result<LossValue> {
    if !(lambda >= 0.0 && beta >= 0.0) {
        return Err(Error::contract(format!("loss weights must be >= 0, got lambda={lambda} beta={beta}")));
    }
    let g = tape.mul_scalar(gan.value, lambda)?;
    let r = tape.mul_scalar(rec.value, beta)?;
    let value = tape.add(g, r)?;
    let mut components = vec![("total".to_string(), tape.value(value).item()?)];
    components.extend(gan.components.iter().cloned());
    components.extend(rec.components.iter().cloned());
    Ok(LossValue { value, components })
}
