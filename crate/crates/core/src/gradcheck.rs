//! Central-difference verification of tape gradients.

use crate::error::Result;
use crate::loss::softmax_xent_loss;
use crate::model::ModelState;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over checked entries.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Entries whose ±ε perturbation crossed a ReLU or max-pool kink.
    pub skipped_kinks: usize,
    pub worst: Option<(String, usize)>,
}

/// Builds a scalar loss on a fresh tape for the given model.
pub trait LossFn: Fn(&ModelState, &mut Tape) -> Result<Var> {}
impl<F: Fn(&ModelState, &mut Tape) -> Result<Var>> LossFn for F {}

/// Checks every trainable parameter of `model` (up to `max_entries` evenly
/// spaced entries per tensor) against central differences of `loss_fn`.
pub fn finite_diff_check_with(
    model: &ModelState,
    epsilon: f32,
    max_entries: usize,
    loss_fn: impl LossFn,
) -> Result<GradCheckReport> {
    let mut analytic = model.clone();
    analytic.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(&analytic, &mut tape)?;
    let base_signature = tape.kink_signature();
    let grads = tape.backward(loss)?;
    analytic.accumulate_grads(&tape, &grads)?;

    let eval = |m: &ModelState| -> Result<(f32, u64)> {
        let mut tape = Tape::new();
        let loss = loss_fn(m, &mut tape)?;
        Ok((tape.value(loss).data()[0], tape.kink_signature()))
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    let mut probe = model.clone();
    let names: Vec<(bool, String)> = analytic
        .backbone
        .iter()
        .map(|(n, p)| (true, n.to_string(), p.trainable))
        .chain(
            analytic
                .classifier
                .iter()
                .map(|(n, p)| (false, n.to_string(), p.trainable)),
        )
        .filter(|(_, _, t)| *t)
        .map(|(b, n, _)| (b, n))
        .collect();

    for (is_backbone, name) in names {
        let set = if is_backbone {
            &analytic.backbone
        } else {
            &analytic.classifier
        };
        let grad: Tensor = set.get(&name).expect("listed").grad.clone();
        let numel = grad.numel();
        let stride = numel.div_ceil(max_entries.max(1)).max(1);
        for idx in (0..numel).step_by(stride) {
            let set = if is_backbone {
                &mut probe.backbone
            } else {
                &mut probe.classifier
            };
            let original = set.get(&name).expect("listed").value.data()[idx];
            set.get_mut(&name).expect("listed").value.data_mut()[idx] = original + epsilon;
            let (plus, sig_plus) = eval(&probe)?;
            let set = if is_backbone {
                &mut probe.backbone
            } else {
                &mut probe.classifier
            };
            set.get_mut(&name).expect("listed").value.data_mut()[idx] = original - epsilon;
            let (minus, sig_minus) = eval(&probe)?;
            let set = if is_backbone {
                &mut probe.backbone
            } else {
                &mut probe.classifier
            };
            set.get_mut(&name).expect("listed").value.data_mut()[idx] = original;

            if sig_plus != base_signature || sig_minus != base_signature {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus as f64 - minus as f64) / (2.0 * epsilon as f64);
            let err = (grad.data()[idx] as f64 - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

/// Gradient check of the plain classification path
/// `x -> backbone -> pool -> classifier -> cross-entropy`.
pub fn finite_diff_check(
    model: &ModelState,
    x: &Tensor,
    y: &[usize],
    epsilon: f32,
) -> Result<GradCheckReport> {
    finite_diff_check_with(model, epsilon, 64, |m: &ModelState, tape: &mut Tape| {
        let xv = tape.input(x.clone());
        let feats = m.forward_features(tape, xv)?;
        let z = m.forward_logits(tape, feats.pooled)?;
        tape.softmax_xent(z, y)
    })
}

/// Convenience used by tests: loss value and accumulated gradients for one batch.
pub fn loss_and_grads(model: &mut ModelState, x: &Tensor, y: &[usize]) -> Result<f32> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let feats = model.forward_features(&mut tape, xv)?;
    let z = model.forward_logits(&mut tape, feats.pooled)?;
    softmax_xent_loss(&mut tape, z, y, model)
}
