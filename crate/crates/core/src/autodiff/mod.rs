//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitives in creation order; [`Tape::backward`] sweeps
//! that order in reverse. [`Tape::stop_gradient`] forwards a value unchanged
//! while blocking every adjoint behind it.

mod tape;
mod tensor;

pub use tape::{sigmoid, softmax, Gradients, NodeId, Tape};
pub use tensor::Tensor;

/// Central finite-difference gradient of `f` with respect to every entry of
/// every tensor in `params`.
pub fn central_difference<F>(mut f: F, params: &[Tensor], step: f64) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let up = f(&work);
            work[p].data_mut()[i] = orig - step;
            let down = f(&work);
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * step);
        }
        grads.push(g);
    }
    grads
}

/// Largest entrywise `|a - b| / max(|a|, |b|, floor)` over paired tensors.
pub fn max_relative_error(a: &[Tensor], b: &[Tensor], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Largest per-tensor `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)` over paired tensors.
pub fn max_tensor_relative_error(a: &[Tensor], b: &[Tensor], floor: f64) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let diff = norm(&mut x.data().iter().zip(y.data()).map(|(p, q)| p - q));
            let scale = norm(&mut x.data().iter().copied()).max(norm(&mut y.data().iter().copied()));
            diff / scale.max(floor)
        })
        .fold(0.0, f64::max)
}
