//! Neural building blocks with explicit backward passes.
//!
//! There is no autodiff graph: each block offers a `forward_cached` that
//! keeps what its `backward` needs, and `backward` accumulates parameter
//! gradients into a gradient container of the block's own type.

mod attention;
mod conv;
mod linear;
mod mlp;
mod norm;

pub use attention::{Mha, MhaCache};
pub use conv::Conv1d;
pub use linear::Linear;
pub use mlp::{Mlp, MlpCache};
pub use norm::{layer_norm, LayerNorm, LayerNormCache};

use crate::error::Result;
use crate::tensor::Tensor;

/// Residual layout of a transformer sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualMode {
    /// `norm(x + f(x))`
    #[default]
    PostNorm,
    /// `x + f(x)`, no normalization.
    Plain,
}

/// Applies `x + branch` and, in post-norm mode, the norm; returns the cache
/// needed by [`residual_backward`].
pub(crate) fn residual(x: &Tensor, branch: &Tensor, norm: &LayerNorm, mode: ResidualMode) -> Result<(Tensor, Option<LayerNormCache>)> {
    let sum = x.add(branch)?;
    match mode {
        ResidualMode::PostNorm => {
            let (y, c) = norm.forward_cached(&sum)?;
            Ok((y, Some(c)))
        }
        ResidualMode::Plain => Ok((sum, None)),
    }
}

/// Gradient w.r.t. `x + branch` (which is also the gradient for each term).
pub(crate) fn residual_backward(cache: &Option<LayerNormCache>, dy: &Tensor, norm: &LayerNorm, grad: &mut LayerNorm) -> Result<Tensor> {
    match cache {
        Some(c) => norm.backward(c, dy, grad),
        None => Ok(dy.clone()),
    }
}

/// Forward-only variant of [`residual`].
pub(crate) fn residual_forward(x: &Tensor, branch: &Tensor, norm: &LayerNorm, mode: ResidualMode) -> Result<Tensor> {
    let sum = x.add(branch)?;
    match mode {
        ResidualMode::PostNorm => norm.forward(&sum),
        ResidualMode::Plain => Ok(sum),
    }
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initializer bound.
pub(crate) fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// A container of trainable tensors, visited in a fixed order.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |t| out.extend_from_slice(t.data()));
        out
    }

    /// Overwrites all parameters from a flat vector in visit order.
    fn assign(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    /// `self += alpha * flat`, in visit order.
    fn add_scaled(&mut self, alpha: f64, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |t| {
            for v in t.data_mut() {
                *v += alpha * flat[off];
                off += 1;
            }
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    fn zero(&mut self) {
        self.visit_mut(&mut |t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
    }

    /// A same-shaped container filled with zeros, for gradient accumulation.
    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut g = self.clone();
        g.zero();
        g
    }
}
