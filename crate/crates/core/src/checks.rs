//! Named finite-difference suite over every differentiable op and the whole
//! propagating network, shared by the command line and the test suites.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::gradcheck::{finite_diff_check_sampled, GradCheckReport};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{loss_on_tape, LossKind};
use crate::model::{Architecture, BoundParams, ForwardMode, LayerId, ModelConfig, ModelGraph};
use crate::ops::conv::Padding;
use crate::ops::norm::BatchNormMode;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Pass threshold on the max relative error.
pub const TOLERANCE: f64 = 1e-4;

pub const CHECKS: [&str; 15] = [
    "linear", "add", "relu", "sigmoid", "conv2d", "conv_transpose2d", "max_pool2d", "upsample_nearest", "concat_slice",
    "batch_norm_train", "batch_norm_infer", "dropout", "dice_loss", "bce_loss", "numsnet",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_relative_error < TOLERANCE
    }
}

fn random(shape: &[usize], stream: &RngStream, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = stream.rng();
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// `Σ y² · w` for a fixed random weighting, a generic smooth read-out.
fn readout(tape: &mut Tape<f64>, y: Var, stream: &RngStream) -> Result<Var> {
    let w = tape.constant(random(tape.shape(y), &stream.split("readout"), 0.5, 1.5));
    let p = tape.mul(y, w)?;
    let p2 = tape.mul(p, y)?;
    Ok(tape.sum(p2))
}

fn binary(shape: &[usize], stream: &RngStream) -> Tensor<f64> {
    random(shape, stream, 0.0, 1.0).map(|v| if v > 0.5 { 1.0 } else { 0.0 })
}

/// Tiny propagating network: widths 2, two classes, 16×16, batch-norm and
/// dropout in train mode, merging a carried state.
fn network_check(stream: &RngStream) -> Result<GradCheckReport> {
    let cfg = ModelConfig::new(Architecture::Numsnet, 2).with_widths([2, 2, 2, 2, 2]);
    let layers: Vec<LayerId> = cfg.arch.propagated_layers().to_vec();
    let target = binary(&[1, 2, 16, 16], &stream.split("target"));
    let dropout = stream.split("dropout");
    let sample = |attempt: u32| {
        let s = stream.split_index("attempt", attempt as u64);
        let m = ModelGraph::<f64>::build(cfg.clone(), &s.split("init")).expect("valid tiny config");
        let mut inputs = vec![random(&[1, 1, 16, 16], &s.split("image"), 0.0, 1.0)];
        for id in &layers {
            inputs.push(random(&m.state_shape(*id, 16, 16), &s.split(&id.key()), 0.0, 1.0));
        }
        inputs.extend(m.params().iter().filter(|p| p.trainable).map(|p| {
            // Nonzero biases keep ReLUs off their kinks.
            if p.name.ends_with(".bias") {
                p.value.map(|_| 0.05)
            } else {
                p.value.clone()
            }
        }));
        inputs
    };
    let template = ModelGraph::<f64>::build(cfg.clone(), &RngStream::new(0))?;
    let n_state = layers.len();
    finite_diff_check_sampled(
        sample,
        |tape, v| {
            let bound = BoundParams::from_trainable(&template, &v[1 + n_state..])?;
            let prev: BTreeMap<LayerId, Var> = layers.iter().copied().zip(v[1..1 + n_state].iter().copied()).collect();
            let mode = ForwardMode::Train { dropout: Some(dropout.clone()) };
            let out = template.forward(tape, &bound, v[0], mode, Some(&prev))?;
            loss_on_tape(tape, LossKind::BceDice, out.prob, &target)
        },
        1e-4,
        8,
    )
}

fn op_check(name: &str, stream: &RngStream) -> Result<GradCheckReport> {
    let r = |shape: &[usize], tag: &str, attempt: u32| random(shape, &stream.split_index(tag, attempt as u64), -1.0, 1.0);
    let ro = stream.clone();
    let step = 1e-3;
    let tries = 8;
    match name {
        "linear" => finite_diff_check_sampled(
            |a| vec![r(&[3, 4], "x", a), r(&[3, 4], "k", a)],
            |t, v| {
                let p = t.mul(v[0], v[1])?;
                let s = t.scale(p, 3.0);
                Ok(t.sum(s))
            },
            step,
            tries,
        ),
        "add" => finite_diff_check_sampled(
            |a| vec![r(&[2, 3], "x", a), r(&[2, 3], "y", a)],
            |t, v| {
                let s = t.add(v[0], v[1])?;
                readout(t, s, &ro)
            },
            step,
            tries,
        ),
        "relu" => finite_diff_check_sampled(
            |a| vec![r(&[2, 8], "x", a)],
            |t, v| {
                let y = t.relu(v[0]);
                readout(t, y, &ro)
            },
            step,
            tries,
        ),
        "sigmoid" => finite_diff_check_sampled(
            |a| vec![r(&[2, 8], "x", a).map(|x| 3.0 * x)],
            |t, v| {
                let y = t.sigmoid(v[0]);
                readout(t, y, &ro)
            },
            step,
            tries,
        ),
        "conv2d" => finite_diff_check_sampled(
            |a| vec![r(&[2, 2, 5, 4], "x", a), r(&[3, 2, 3, 3], "w", a), r(&[3], "b", a)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), Padding::Same, 1)?;
                readout(t, y, &ro)
            },
            step,
            tries,
        ),
        "conv_transpose2d" => finite_diff_check_sampled(
            |a| vec![r(&[2, 4, 2, 3], "x", a), r(&[4, 3, 2, 2], "w", a), r(&[3], "b", a)],
            |t, v| {
                let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 2)?;
                readout(t, y, &ro)
            },
            step,
            tries,
        ),
        "max_pool2d" => finite_diff_check_sampled(
            |a| vec![r(&[1, 2, 4, 6], "x", a)],
            |t, v| {
                let y = t.max_pool2d(v[0])?;
                readout(t, y, &ro)
            },
            step,
            tries,
        ),
        "upsample_nearest" => finite_diff_check_sampled(
            |a| vec![r(&[1, 2, 2, 3], "x", a)],
            |t, v| {
                let y = t.upsample_nearest(v[0], 2)?;
                readout(t, y, &ro)
            },
            step,
            tries,
        ),
        "concat_slice" => finite_diff_check_sampled(
            |a| vec![r(&[1, 2, 3, 3], "x", a), r(&[1, 1, 3, 3], "y", a)],
            |t, v| {
                let c = t.concat_channels(&[v[0], v[1]])?;
                let s = t.slice_channels(c, 1, 2)?;
                readout(t, s, &ro)
            },
            step,
            tries,
        ),
        "batch_norm_train" => finite_diff_check_sampled(
            |a| vec![r(&[4, 3, 3, 3], "x", a), r(&[3], "g", a).map(|v| v + 1.5), r(&[3], "b", a)],
            |t, v| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, 1e-3)?;
                readout(t, y, &ro)
            },
            step,
            tries,
        ),
        "batch_norm_infer" => {
            let mean = [0.1, -0.2];
            let var = [0.5, 2.0];
            finite_diff_check_sampled(
                |a| vec![r(&[2, 2, 3, 3], "x", a), r(&[2], "g", a), r(&[2], "b", a)],
                |t, v| {
                    let mode = BatchNormMode::Infer { running_mean: &mean, running_var: &var };
                    let (y, _) = t.batch_norm(v[0], v[1], v[2], mode, 1e-3)?;
                    readout(t, y, &ro)
                },
                step,
                tries,
            )
        }
        "dropout" => {
            let mask = stream.split("mask");
            finite_diff_check_sampled(
                |a| vec![r(&[2, 3, 4, 4], "x", a)],
                |t, v| {
                    let y = t.dropout(v[0], 0.5, Some(&mask))?;
                    readout(t, y, &ro)
                },
                step,
                tries,
            )
        }
        "dice_loss" | "bce_loss" => {
            let target = binary(&[2, 2, 3, 3], &stream.split("target"));
            let kind = if name == "dice_loss" { LossKind::Dice } else { LossKind::Bce };
            finite_diff_check_sampled(
                |a| vec![r(&[2, 2, 3, 3], "x", a).map(|x| 0.1 + 0.8 * (x + 1.0) / 2.0)],
                |t, v| loss_on_tape(t, kind, v[0], &target),
                step,
                tries,
            )
        }
        "numsnet" => network_check(stream),
        other => Err(Error::InvalidArgument(format!("unknown check `{other}` (known: {})", CHECKS.join(", ")))),
    }
}

/// Runs the named checks (all when `names` is empty) in suite order.
pub fn run_checks(names: &[String], seed: u64) -> Result<Vec<CheckResult>> {
    for n in names {
        if !CHECKS.contains(&n.as_str()) {
            return Err(Error::InvalidArgument(format!("unknown check `{n}` (known: {})", CHECKS.join(", "))));
        }
    }
    let root = RngStream::new(seed).split("gradcheck");
    CHECKS
        .iter()
        .filter(|c| names.is_empty() || names.iter().any(|n| n == *c))
        .map(|&name| Ok(CheckResult { name, report: op_check(name, &root.split(name))? }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        let names: Vec<String> = CHECKS.iter().filter(|c| **c != "numsnet").map(|c| c.to_string()).collect();
        for r in run_checks(&names, 0).unwrap() {
            assert!(r.passed(), "{}: {:?}", r.name, r.report);
        }
    }

    #[test]
    fn whole_network_passes() {
        let r = run_checks(&["numsnet".into()], 0).unwrap();
        assert!(r[0].passed(), "{:?}", r[0].report);
    }

    #[test]
    fn linear_is_exact_to_rounding() {
        let r = run_checks(&["linear".into()], 3).unwrap();
        assert!(r[0].report.max_relative_error < 1e-9, "{:?}", r[0].report);
    }

    #[test]
    fn filters_and_rejects_unknown_names() {
        assert_eq!(run_checks(&["relu".into()], 0).unwrap().len(), 1);
        assert!(run_checks(&["softmax".into()], 0).is_err());
    }
}
