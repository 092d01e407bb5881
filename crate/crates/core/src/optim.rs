//! SGD with momentum and L2 weight decay.

use crate::error::{Error, Result};
use crate::tensor::Parameter;

/// One update over `params`:
/// `v ← momentum·v + grad + weight_decay·w`, `w ← w − lr·v`, then grads are zeroed.
///
/// Every parameter must carry a gradient buffer; nothing is modified otherwise.
pub fn sgd_momentum_step<'a, I>(params: I, lr: f64, momentum: f64, weight_decay: f64) -> Result<()>
where
    I: IntoIterator<Item = &'a mut Parameter>,
{
    let params: Vec<&mut Parameter> = params.into_iter().collect();
    if let Some(p) = params.iter().find(|p| p.tensor.grad.is_none()) {
        return Err(Error::State(format!("parameter {} has no gradient", p.name)));
    }
    for p in params {
        let grad = p.tensor.grad.take().expect("checked above");
        let n = grad.len();
        let v = p.momentum_buffer.get_or_insert_with(|| vec![0.0; n]);
        let w = p.tensor.data_mut();
        for i in 0..n {
            v[i] = momentum * v[i] + grad[i] + weight_decay * w[i];
            w[i] -= lr * v[i];
        }
        p.tensor.grad = Some(vec![0.0; n]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(w: f64, g: Option<f64>) -> Parameter {
        let mut p = Parameter::new("w", Tensor::full(&[1], w));
        p.tensor.grad = g.map(|g| vec![g]);
        p
    }

    #[test]
    fn first_step_is_minus_lr_times_grad() {
        let mut p = param(1.0, Some(1.0));
        sgd_momentum_step([&mut p], 0.1, 0.9, 0.0).unwrap();
        assert!((p.tensor.data()[0] - 0.9).abs() < 1e-15);
        assert_eq!(p.tensor.grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn zero_grad_leaves_weight() {
        let mut p = param(0.5, Some(0.0));
        sgd_momentum_step([&mut p], 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.tensor.data()[0], 0.5);
    }

    #[test]
    fn second_step_includes_momentum() {
        let mut p = param(0.0, Some(1.0));
        sgd_momentum_step([&mut p], 0.1, 0.9, 0.0).unwrap();
        let after_first = p.tensor.data()[0];
        p.tensor.grad = Some(vec![1.0]);
        sgd_momentum_step([&mut p], 0.1, 0.9, 0.0).unwrap();
        // v2 = 0.9·1 + 1 = 1.9
        assert!((p.tensor.data()[0] - after_first + 0.19).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_a_state_error() {
        let mut a = param(1.0, Some(1.0));
        let mut b = param(1.0, None);
        let err = sgd_momentum_step([&mut a, &mut b], 0.1, 0.9, 0.0);
        assert!(matches!(err, Err(Error::State(_))));
        assert_eq!(a.tensor.data()[0], 1.0);
    }
}
