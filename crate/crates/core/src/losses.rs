//! Segmentation losses on continuous predictions.
//!
//! * `DL  = −Dice`, with `Dice = (2Σpg + 1) / (Σp + Σg + 1)` per `(slice, class)`
//!   plane and averaged over planes;
//! * `BCL = mean −[g·ln p + (1−g)·ln(1−p)]` with `p` clamped to `[1e-7, 1−1e-7]`;
//! * `BDL = BCL / 2 + DL`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const BCE_CLAMP: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum LossKind {
    #[serde(rename = "DL")]
    Dice,
    #[serde(rename = "BCL")]
    Bce,
    #[serde(rename = "BDL")]
    BceDice,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DL" | "DICE" => Ok(LossKind::Dice),
            "BCL" | "BCE" => Ok(LossKind::Bce),
            "BDL" | "BCE_DICE" | "BCEDICE" => Ok(LossKind::BceDice),
            other => Err(Error::InvalidArgument(format!("unknown loss `{other}` (expected DL, BCL or BDL)"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Dice => "DL",
            LossKind::Bce => "BCL",
            LossKind::BceDice => "BDL",
        })
    }
}

fn check_pair<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "loss prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Spatial plane size for `[n, c, h, w]` tensors, or the whole tensor otherwise.
fn plane_len(shape: &[usize]) -> usize {
    if shape.len() == 4 {
        shape[2] * shape[3]
    } else {
        shape.iter().product()
    }
}

/// Per-plane `(Σpg, Σp + Σg)`.
fn dice_sums<T: Element>(pred: &[T], target: &[T], plane: usize) -> Vec<(f64, f64)> {
    pred.chunks(plane)
        .zip(target.chunks(plane))
        .map(|(p, g)| {
            let (mut inter, mut total) = (T::ZERO, T::ZERO);
            for (&a, &b) in p.iter().zip(g) {
                inter += a * b;
                total += a + b;
            }
            (inter.to_f64(), total.to_f64())
        })
        .collect()
}

/// Mean smoothed soft Dice coefficient over all planes.
pub fn soft_dice<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_pair(pred, target)?;
    let sums = dice_sums(pred.data(), target.data(), plane_len(pred.shape()));
    let planes = sums.len() as f64;
    Ok(sums.iter().map(|&(i, t)| (2.0 * i + DICE_SMOOTH) / (t + DICE_SMOOTH)).sum::<f64>() / planes)
}

pub fn dice_loss_value<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    Ok(-soft_dice(pred, target)?)
}

pub fn dice_loss_grad<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    let plane = plane_len(pred.shape());
    let sums = dice_sums(pred.data(), target.data(), plane);
    let planes = sums.len() as f64;
    let mut grad = Vec::with_capacity(pred.numel());
    for (g, &(inter, total)) in target.data().chunks(plane).zip(&sums) {
        let denom = total + DICE_SMOOTH;
        let num = 2.0 * inter + DICE_SMOOTH;
        let scale = -1.0 / (planes * denom * denom);
        for &gv in g {
            grad.push(T::from_f64(scale * (2.0 * gv.to_f64() * denom - num)));
        }
    }
    Tensor::from_parts(pred.shape().to_vec(), grad)
}

pub fn bce_loss_value<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_pair(pred, target)?;
    let (lo, hi) = (BCE_CLAMP, 1.0 - BCE_CLAMP);
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &g)| {
            let p = p.to_f64().clamp(lo, hi);
            let g = g.to_f64();
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.numel() as f64)
}

pub fn bce_loss_grad<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    let (lo, hi) = (BCE_CLAMP, 1.0 - BCE_CLAMP);
    let m = pred.numel() as f64;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &g)| {
            let p = p.to_f64();
            if p < lo || p > hi {
                return T::ZERO;
            }
            let g = g.to_f64();
            T::from_f64((-g / p + (1.0 - g) / (1.0 - p)) / m)
        })
        .collect();
    Tensor::from_parts(pred.shape().to_vec(), grad)
}

/// Records the chosen loss of `pred` against a constant `target`.
pub fn loss_on_tape<T: Element>(tape: &mut Tape<T>, kind: LossKind, pred: Var, target: &Tensor<T>) -> Result<Var> {
    match kind {
        LossKind::Dice => tape.dice_loss(pred, target),
        LossKind::Bce => tape.bce_loss(pred, target),
        LossKind::BceDice => {
            let bce = tape.bce_loss(pred, target)?;
            let half = tape.scale(bce, T::from_f64(0.5));
            let dl = tape.dice_loss(pred, target)?;
            tape.add(half, dl)
        }
    }
}

/// Plain evaluation of a loss without recording a graph.
pub fn loss_value<T: Element>(kind: LossKind, pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    match kind {
        LossKind::Dice => dice_loss_value(pred, target),
        LossKind::Bce => bce_loss_value(pred, target),
        LossKind::BceDice => Ok(bce_loss_value(pred, target)? / 2.0 + dice_loss_value(pred, target)?),
    }
}
