//! SGD with heavy-ball momentum.

use crate::params::ParameterSet;

/// One optimizer step over every trainable parameter:
/// `buf <- momentum * buf + grad; value <- value - lr * buf`.
/// Frozen parameters keep their value and momentum bit-for-bit. All gradient
/// accumulators are zeroed afterwards.
pub fn sgd_step(params: &mut ParameterSet, lr: f32, momentum: f32) {
    for (_, p) in params.iter_mut() {
        if p.trainable {
            let value = p.value.data_mut();
            let buf = p.momentum.data_mut();
            for ((v, b), g) in value.iter_mut().zip(buf.iter_mut()).zip(p.grad.data()) {
                *b = momentum * *b + g;
                *v -= lr * *b;
            }
        }
        p.grad.fill(0.0);
    }
}

/// Adds `decay * value` to the gradient of every trainable parameter.
pub fn apply_weight_decay(params: &mut ParameterSet, decay: f32) {
    if decay == 0.0 {
        return;
    }
    for (_, p) in params.iter_mut().filter(|(_, p)| p.trainable) {
        let value = p.value.data().to_vec();
        for (g, v) in p.grad.data_mut().iter_mut().zip(value) {
            *g += decay * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f32, grad: f32) -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::scalar(value));
        ps.accumulate("w", &Tensor::scalar(grad)).unwrap();
        ps
    }

    fn value(ps: &ParameterSet) -> f32 {
        ps.get("w").unwrap().value.data()[0]
    }

    #[test]
    fn plain_sgd() {
        let mut ps = single(1.0, 2.0);
        sgd_step(&mut ps, 0.1, 0.0);
        assert!((value(&ps) - 0.8).abs() < 1e-7);
        assert_eq!(ps.get("w").unwrap().grad.data(), &[0.0]);
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let mut ps = single(1.0, 0.0);
        ps.set_trainable(false);
        // Accumulation into a frozen parameter is refused.
        assert!(!ps.accumulate("w", &Tensor::scalar(5.0)).unwrap());
        ps.get_mut("w").unwrap().grad = Tensor::scalar(5.0);
        sgd_step(&mut ps, 0.1, 0.9);
        assert_eq!(value(&ps).to_bits(), 1.0f32.to_bits());
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        // buf1 = 1, v1 = -1; buf2 = 0.9 + 1 = 1.9, v2 = -2.9.
        let mut ps = single(0.0, 1.0);
        sgd_step(&mut ps, 1.0, 0.9);
        ps.accumulate("w", &Tensor::scalar(1.0)).unwrap();
        sgd_step(&mut ps, 1.0, 0.9);
        assert!((value(&ps) + 2.9).abs() < 1e-6);
    }

    #[test]
    fn empty_set_is_a_no_op() {
        let mut ps = ParameterSet::new();
        sgd_step(&mut ps, 0.1, 0.9);
        assert!(ps.is_empty());
    }
}
