//! Finite-difference check of the full training loss against the tape's
//! gradients for every trainable tensor, evaluated in `f64`.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;

use super::train::{prepare_sample, sample_loss_tape, sample_rng, LossConfig, NoisedSample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{GradCheckReport, Tape, Tensor, Var};
use crate::rng;
use crate::synthworld::PairSample;

/// Mean per-sample loss on `tape`, with `overrides` substituted by name.
fn batch_loss(
    model: &Model,
    tape: &mut Tape<f64>,
    samples: &[NoisedSample],
    trainable: bool,
    overrides: &HashMap<String, Var>,
) -> Result<(Var, crate::model::Bound)> {
    let bound = model.bind(tape, trainable, overrides);
    let mut total: Option<Var> = None;
    for s in samples {
        let l = sample_loss_tape(model, tape, &bound, s)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.ok_or(Error::EmptyBatch)?;
    Ok((tape.scale(total, 1.0 / samples.len() as f64)?, bound))
}

/// Checks `d loss / d θ` for each trainable tensor θ at `coords` coordinates:
/// the largest-magnitude analytic entries plus one random entry. The batch is
/// noised exactly as the training loss would noise it under `seed`.
pub fn loss_grad_check(
    model: &Model,
    batch: &[PairSample],
    cfg: &LossConfig,
    seed: u64,
    eps: f64,
    coords: usize,
) -> Result<Vec<GradCheckReport>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let samples = (0..batch.len())
        .map(|i| prepare_sample(&batch[i], cfg, &mut sample_rng(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::<f64>::new();
    let (loss, bound) = batch_loss(model, &mut tape, &samples, true, &HashMap::new())?;
    let mut grads = tape.backward(loss)?;

    let eval = |name: &str, base: &Tensor<f64>, idx: usize, delta: f64| -> Result<f64> {
        let mut t = Tape::<f64>::new();
        let mut p = base.clone();
        p.data_mut()[idx] += delta;
        let v = t.leaf(p, false);
        let overrides = HashMap::from([(name.to_string(), v)]);
        let (l, _) = batch_loss(model, &mut t, &samples, false, &overrides)?;
        Ok(t.value(l).data()[0])
    };

    let mut pick = rng::stream(seed, "loss-gradcheck");
    let mut reports = Vec::new();
    for name in model.trainable_names() {
        let base: Tensor<f64> = model.param(&name).expect("trainable resolves").cast();
        let analytic = grads
            .take(bound.var(&name)?)
            .unwrap_or_else(|| Tensor::zeros(base.shape()));
        let mut order: Vec<usize> = (0..base.len()).collect();
        order.sort_by(|&a, &b| analytic.data()[b].abs().total_cmp(&analytic.data()[a].abs()));
        let mut chosen: Vec<usize> = order.into_iter().take(coords.saturating_sub(1).max(1)).collect();
        if coords > 1 {
            let r = index::sample(&mut pick, base.len(), 1).index(0);
            if !chosen.contains(&r) {
                chosen.push(r);
            }
        }
        let mut worst = 0.0f64;
        let mut worst_index = chosen[0];
        for &i in &chosen {
            let central = (eval(&name, &base, i, eps)? - eval(&name, &base, i, -eps)?) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
                worst_index = i;
            }
        }
        reports.push(GradCheckReport {
            function: name,
            max_rel_error: worst,
            worst_index,
            coordinates: chosen.len(),
        });
    }
    Ok(reports)
}

/// Adds `N(0, scale²)` noise to every trainable tensor, moving the model off
/// its zero-initialized adapters and identity modulation so every gradient
/// path is exercised.
pub fn jitter_trainable<R: Rng + ?Sized>(model: &mut Model, scale: f64, rng: &mut R) {
    for name in model.trainable_names() {
        let p = model.param_mut(&name).expect("trainable resolves");
        let noise = Tensor::randn(p.shape(), scale, rng);
        *p = p.add(&noise).expect("same shape");
    }
}
