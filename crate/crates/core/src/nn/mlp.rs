use crate::error::{shape_err, Result};
use crate::nn::{Linear, Parameters};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Linear layers with ReLU between them (not after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input of each layer.
    inputs: Vec<Tensor>,
    /// Pre-activation output of each hidden layer.
    pre: Vec<Tensor>,
}

impl Mlp {
    pub fn new(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return shape_err("mlp needs at least one layer");
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return shape_err(format!("mlp layer chain {} -> {}", w[0].out_dim(), w[1].in_dim()));
            }
        }
        Ok(Mlp { layers })
    }

    /// Random MLP through the given widths, e.g. `[in, hidden, out]`.
    pub fn init(widths: &[usize], rng: &mut Rng) -> Self {
        assert!(widths.len() >= 2, "need at least input and output width");
        Mlp { layers: widths.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect() }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.layers[0].forward(x)?;
        for l in &self.layers[1..] {
            relu_in_place(&mut h);
            h = l.forward(&h)?;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        let mut inputs = vec![x.clone()];
        let mut pre = Vec::new();
        let mut h = self.layers[0].forward(x)?;
        for l in &self.layers[1..] {
            pre.push(h.clone());
            relu_in_place(&mut h);
            inputs.push(h.clone());
            h = l.forward(&h)?;
        }
        Ok((h, MlpCache { inputs, pre }))
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Tensor, grad: &mut Mlp) -> Result<Tensor> {
        let mut d = dy.clone();
        for idx in (0..self.layers.len()).rev() {
            d = self.layers[idx].backward(&cache.inputs[idx], &d, &mut grad.layers[idx])?;
            if idx > 0 {
                for (g, &p) in d.data_mut().iter_mut().zip(cache.pre[idx - 1].data()) {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
        }
        Ok(d)
    }
}

fn relu_in_place(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

impl Parameters for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.layers.iter().for_each(|l| l.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    #[test]
    fn rejects_broken_chain() {
        assert!(Mlp::new(vec![Linear::zeros(2, 3), Linear::zeros(4, 1)]).is_err());
        assert!(Mlp::new(vec![]).is_err());
    }

    #[test]
    fn two_layers_match_explicit_composition() {
        let mut rng = Rng::new(2, 0);
        let m = Mlp::init(&[4, 6, 3], &mut rng);
        let x = rng.uniform_tensor(&[5, 4], -1.0, 1.0);
        let y = m.forward(&x).unwrap();
        let (l0, l1) = (&m.layers[0], &m.layers[1]);
        for r in 0..5 {
            let xr = x.row(r);
            let h: Vec<f64> = (0..6)
                .map(|i| {
                    let s: f64 = (0..4).map(|j| l0.weight.data()[i * 4 + j] * xr[j]).sum::<f64>() + l0.bias.data()[i];
                    s.max(0.0)
                })
                .collect();
            for o in 0..3 {
                let s: f64 = (0..6).map(|i| l1.weight.data()[o * 6 + i] * h[i]).sum::<f64>() + l1.bias.data()[o];
                assert!((y.row(r)[o] - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(8, 0);
        let m = Mlp::init(&[4, 7, 5, 3], &mut rng);
        let x = rng.uniform_tensor(&[6, 4], -1.0, 1.0);
        let w = rng.uniform_tensor(&[6, 3], -1.0, 1.0);
        let (_, cache) = m.forward_cached(&x).unwrap();
        let mut g = m.zeros_like();
        let dx = m.backward(&cache, &w, &mut g).unwrap();
        let err = grad_check(
            |p| {
                let mut mm = m.clone();
                mm.assign(p);
                mm.forward(&x).unwrap().dot(&w)
            },
            &m.flatten(),
            &g.flatten(),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "param err {err}");
        let err =
            grad_check(|p| m.forward(&Tensor::new(x.dims().to_vec(), p.to_vec()).unwrap()).unwrap().dot(&w), x.data(), dx.data(), 1e-5).unwrap();
        assert!(err <= 1e-6, "input err {err}");
    }
}
