//! Random loss-bearing graphs for gradient fidelity checks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, AutodiffError, GradCheckMode, Precision, Real, Tape, Tensor, Var};
use crate::losses::{total_loss, ConsNorm, ConsistencyKind, GroupGradMode, LossConfig, LossError};
use crate::model::{Bound, Model, ModelConfig, ModelError};
use crate::synth::Mask;
use crate::text::TextEncoder;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphKind {
    /// Full group objective on a small random model.
    GroupObjective,
    /// Random composition of primitives.
    Primitives,
}

#[derive(Clone, Debug)]
pub struct GraphCheck {
    pub seed: u64,
    pub kind: GraphKind,
    pub has_stop_gradient: bool,
    pub max_rel_err: f64,
}

/// Finite-difference step per precision.
pub fn default_eps(p: Precision) -> f64 {
    match p {
        Precision::F64 => 1e-5,
        Precision::F32 => 1e-2,
    }
}

/// Acceptance bound on the relative error per precision.
pub fn tolerance(p: Precision) -> f64 {
    match p {
        Precision::F64 => 1e-5,
        Precision::F32 => 1e-3,
    }
}

fn flatten_model_err(e: ModelError) -> AutodiffError {
    match e {
        ModelError::Autodiff(a) => a,
        other => AutodiffError::GradCheck(other.to_string()),
    }
}

fn flatten_loss_err(e: LossError) -> AutodiffError {
    match e {
        LossError::Autodiff(a) => a,
        other => AutodiffError::GradCheck(other.to_string()),
    }
}

fn random_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| T::of(rng.gen_range(-scale..scale))).collect(),
    )
    .expect("shape matches")
}

/// Group objective of a tiny random model as a function of all parameters.
fn group_objective<T: Real>(rng: &mut ChaCha8Rng, eps: f64) -> Result<(f64, bool), AutodiffError> {
    let size = rng.gen_range(5..=8);
    let cfg = ModelConfig {
        height: size,
        width: size,
        channels: rng.gen_range(2..=3),
        candidates: rng.gen_range(1..=3),
        select: 1,
        encoder_layers: rng.gen_range(1..=2),
        decoder_layers: rng.gen_range(1..=2),
        init_seed: rng.gen(),
        ..ModelConfig::default()
    };
    let cfg = ModelConfig {
        select: rng.gen_range(1..=cfg.candidates),
        ..cfg
    };
    let model = Model::new(cfg.clone()).map_err(flatten_model_err)?;
    let k = rng.gen_range(2..=4);
    let words = [
        "nuclei",
        "cells",
        "all",
        "segment",
        "stromal-like",
        "every",
        "nucleus",
        "tissue",
    ];
    let prompts: Vec<String> = (0..k)
        .map(|_| {
            let n = rng.gen_range(1..=4);
            (0..n)
                .map(|_| *words.choose(rng).unwrap())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let image: Vec<f64> = (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
    let target = if rng.gen_bool(0.2) {
        Mask::empty(size, size)
    } else {
        Mask::from_bools(size, size, (0..size * size).map(|_| rng.gen_bool(0.4)))
    };
    let loss = LossConfig {
        tau: rng.gen_range(0.3..3.0),
        lambda: rng.gen_range(0.0..2.0),
        beta: rng.gen_range(0.0..1.0),
        dice_eps: rng.gen_range(0.1..2.0),
        group_grad_mode: *[GroupGradMode::WDifferentiable, GroupGradMode::FullyDetached]
            .choose(rng)
            .unwrap(),
        cons_norm: *[ConsNorm::MeanPerPixel, ConsNorm::Sum].choose(rng).unwrap(),
        consistency: *[ConsistencyKind::StopGradReference, ConsistencyKind::FullPairwise]
            .choose(rng)
            .unwrap(),
    };
    let encoder = TextEncoder::new();
    let f = |tape: &mut Tape<T>, vars: &[Var]| -> Result<Var, AutodiffError> {
        let bound = Bound::from_vars(vars.to_vec());
        let outs = model
            .forward_group(tape, &bound, &image, &prompts, &encoder)
            .map_err(flatten_model_err)?;
        let (root, _) = total_loss(tape, &outs, &target, &loss).map_err(flatten_loss_err)?;
        Ok(root)
    };
    let err = grad_check(f, &model.param_tensors::<T>(), eps, GradCheckMode::StopGradAware)?;
    Ok((err, true))
}

/// Random chain of primitives over a few `[2,3]` leaves, reduced to a scalar.
fn primitive_chain<T: Real>(
    rng: &mut ChaCha8Rng,
    eps: f64,
    max_depth: usize,
    allow_stop: bool,
) -> Result<(f64, bool), AutodiffError> {
    let n_inputs = rng.gen_range(1..=3);
    let point: Vec<Tensor<T>> = (0..n_inputs).map(|_| random_tensor(rng, &[2, 3], 1.5)).collect();
    let ops: Vec<u8> = (0..rng.gen_range(1..=max_depth))
        .map(|_| loop {
            let op = rng.gen_range(0..14);
            if allow_stop || op != 12 {
                break op;
            }
        })
        .collect();
    let picks: Vec<(usize, usize)> = ops.iter().map(|_| (rng.gen(), rng.gen())).collect();
    let reduce_mean = rng.gen_bool(0.5);
    let has_stop = ops.contains(&12);
    let f = |tape: &mut Tape<T>, x: &[Var]| -> Result<Var, AutodiffError> {
        let mut pool: Vec<Var> = x.to_vec();
        for (&op, &(a, b)) in ops.iter().zip(&picks) {
            let u = pool[a % pool.len()];
            let v = pool[b % pool.len()];
            let next = match op {
                0 => tape.add(u, v)?,
                1 => tape.sub(u, v)?,
                2 => tape.mul(u, v)?,
                3 => {
                    // positive denominator 1 + v²
                    let sq = tape.mul(v, v)?;
                    let d = tape.offset(sq, 1.0)?;
                    tape.div(u, d)?
                }
                4 => tape.sigmoid(u)?,
                5 => {
                    let s = tape.sigmoid(u)?;
                    tape.exp(s)?
                }
                6 => {
                    let sq = tape.mul(u, u)?;
                    let p = tape.offset(sq, 0.5)?;
                    tape.log(p)?
                }
                7 => tape.softmax(u)?,
                8 => {
                    let r = tape.reshape(v, &[3, 2])?;
                    let m = tape.matmul(u, r)?;
                    let s = tape.sum(m)?;
                    let s = tape.scale(s, 0.1)?;
                    tape.add(u, s)?
                }
                9 => {
                    let c = tape.concat(&[u, v])?;
                    let mx = tape.max_reduce(c)?;
                    let s = tape.sum(mx)?;
                    let sq = tape.mul(v, v)?;
                    tape.add(sq, s)?
                }
                10 => {
                    let l2 = tape.squared_l2(u)?;
                    let l2 = tape.scale(l2, 0.1)?;
                    tape.mul(v, l2)?
                }
                11 => {
                    let m = tape.mean(u)?;
                    tape.sub(v, m)?
                }
                12 => {
                    let s = tape.stop_gradient(u)?;
                    tape.mul(s, v)?
                }
                _ => {
                    // smooth stand-in for relu that keeps away from the kink
                    let r = tape.relu(u)?;
                    let sq = tape.mul(u, u)?;
                    let sq = tape.scale(sq, 0.3)?;
                    tape.add(r, sq)?
                }
            };
            pool.push(next);
        }
        let last = *pool.last().unwrap();
        let sq = tape.mul(last, last)?;
        let acc = tape.add(last, sq)?;
        if reduce_mean {
            tape.mean(acc)
        } else {
            tape.sum(acc)
        }
    };
    let mode = if has_stop {
        GradCheckMode::StopGradAware
    } else {
        GradCheckMode::Plain
    };
    let err = grad_check(f, &point, eps, mode)?;
    Ok((err, has_stop))
}

/// Builds and checks one random graph. At 64-bit, even seeds give model
/// objectives and odd seeds give primitive chains of depth up to 9 that may
/// contain `stop_gradient`. At 32-bit only primitive chains of depth up to 6
/// without `stop_gradient` are drawn.
pub fn check_random_graph(seed: u64, precision: Precision) -> Result<GraphCheck, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = default_eps(precision);
    let (kind, (max_rel_err, has_stop_gradient)) = match precision {
        Precision::F64 if seed % 2 == 0 => (GraphKind::GroupObjective, group_objective::<f64>(&mut rng, eps)?),
        Precision::F64 => (GraphKind::Primitives, primitive_chain::<f64>(&mut rng, eps, 9, true)?),
        Precision::F32 => (GraphKind::Primitives, primitive_chain::<f32>(&mut rng, eps, 6, false)?),
    };
    Ok(GraphCheck {
        seed,
        kind,
        has_stop_gradient,
        max_rel_err,
    })
}

/// Worst error over `trials` graphs starting at `seed`.
pub fn run_trials(trials: usize, seed: u64, precision: Precision) -> Result<Vec<GraphCheck>, AutodiffError> {
    (0..trials as u64)
        .map(|i| check_random_graph(seed + i, precision))
        .collect()
}
