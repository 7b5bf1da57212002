use crate::error::Result;
use crate::model::ModelState;
use crate::tape::{Tape, Var};

/// Mean softmax cross-entropy of the logits `z` against `labels`. Runs the
/// reverse sweep and adds the resulting gradients into the accumulators of
/// every trainable parameter of `model` reachable on the tape.
pub fn softmax_xent_loss(
    tape: &mut Tape,
    z: Var,
    labels: &[usize],
    model: &mut ModelState,
) -> Result<f32> {
    let loss = tape.softmax_xent(z, labels)?;
    let grads = tape.backward(loss)?;
    model.accumulate_grads(tape, &grads)?;
    Ok(tape.value(loss).data()[0])
}
