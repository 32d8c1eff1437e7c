use crate::error::{shape_err, Result};
use crate::nn::Parameters;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Layer normalization over the trailing axis with learned gain and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub shift: Tensor,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(channels: usize) -> Self {
        LayerNorm { gain: Tensor::filled(&[channels], 1.0), shift: Tensor::zeros(&[channels]), eps: DEFAULT_EPS }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gain, &self.shift, self.eps)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        let c = self.check(x)?;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            inv_std.push(normalize_row(xhat.row_mut(r), self.eps));
        }
        let mut y = xhat.clone();
        for r in 0..y.rows() {
            for (i, v) in y.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.gain.data()[i] + self.shift.data()[i];
            }
        }
        debug_assert_eq!(c, y.last_dim());
        Ok((y, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Tensor, grad: &mut LayerNorm) -> Result<Tensor> {
        let c = self.gain.len();
        if dy.dims() != cache.xhat.dims() {
            return shape_err(format!("layer norm backward dy {:?}", dy.dims()));
        }
        let mut dx = Tensor::zeros(dy.dims());
        let mut dxhat = vec![0.0; c];
        for r in 0..dy.rows() {
            let (xh, g) = (cache.xhat.row(r), dy.row(r));
            for i in 0..c {
                grad.gain.data_mut()[i] += g[i] * xh[i];
                grad.shift.data_mut()[i] += g[i];
                dxhat[i] = g[i] * self.gain.data()[i];
            }
            let mean_d = dxhat.iter().sum::<f64>() / c as f64;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
            let s = cache.inv_std[r];
            for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = s * (dxhat[i] - mean_d - xh[i] * mean_dx);
            }
        }
        Ok(dx)
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        let c = self.gain.len();
        if self.shift.len() != c || x.last_dim() != c {
            return shape_err(format!("layer norm over {c} channels, input {:?}", x.dims()));
        }
        Ok(c)
    }
}

/// Normalizes a row to zero mean / unit variance in place; returns `1/std`.
fn normalize_row(row: &mut [f64], eps: f64) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    inv
}

/// `gain * (x - mean) / sqrt(var + eps) + shift` over the trailing axis,
/// with the population variance.
pub fn layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.last_dim();
    if gain.len() != c || shift.len() != c {
        return shape_err(format!("layer norm params {} / {} for {c} channels", gain.len(), shift.len()));
    }
    let mut y = x.clone();
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        normalize_row(row, eps);
        for (i, v) in row.iter_mut().enumerate() {
            *v = *v * gain.data()[i] + shift.data()[i];
        }
    }
    Ok(y)
}

impl Parameters for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        f(&self.gain);
        f(&self.shift);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.gain);
        f(&mut self.shift);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::Rng;

    #[test]
    fn constant_row_maps_to_shift() {
        let ln = LayerNorm::new(4);
        let y = ln.forward(&Tensor::filled(&[1, 4], 3.5)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_pair_is_fixed_point() {
        let x = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &Tensor::filled(&[2], 1.0), &Tensor::zeros(&[2]), 1e-300).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-15 && (y.data()[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn matches_two_pass_oracle() {
        let mut rng = Rng::new(4, 0);
        let x = rng.uniform_tensor(&[8], -3.0, 3.0);
        let gain = rng.uniform_tensor(&[8], 0.5, 1.5);
        let shift = rng.uniform_tensor(&[8], -1.0, 1.0);
        let y = layer_norm(&x, &gain, &shift, 1e-5).unwrap();
        let mut mean = 0.0;
        for v in x.data() {
            mean += v;
        }
        mean /= 8.0;
        let mut var = 0.0;
        for v in x.data() {
            var += (v - mean) * (v - mean);
        }
        var /= 8.0;
        for i in 0..8 {
            let want = gain.data()[i] * (x.data()[i] - mean) / (var + 1e-5).sqrt() + shift.data()[i];
            assert!((y.data()[i] - want).abs() <= 1e-9);
        }
        let unit = layer_norm(&x, &Tensor::filled(&[8], 1.0), &Tensor::zeros(&[8]), 1e-12).unwrap();
        let m = unit.sum() / 8.0;
        let v = unit.data().iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 8.0;
        assert!(m.abs() <= 1e-9 && (v - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(6, 0);
        let mut ln = LayerNorm::new(8);
        ln.gain = rng.uniform_tensor(&[8], 0.5, 1.5);
        ln.shift = rng.uniform_tensor(&[8], -1.0, 1.0);
        let x = rng.uniform_tensor(&[3, 8], -2.0, 2.0);
        let w = rng.uniform_tensor(&[3, 8], -1.0, 1.0);
        let (_, cache) = ln.forward_cached(&x).unwrap();
        let mut g = ln.zeros_like();
        let dx = ln.backward(&cache, &w, &mut g).unwrap();
        let err = grad_check(
            |p| {
                let mut l = ln.clone();
                l.assign(p);
                l.forward(&x).unwrap().dot(&w)
            },
            &ln.flatten(),
            &g.flatten(),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-7, "{err}");
        let err = grad_check(|p| ln.forward(&Tensor::new(vec![3, 8], p.to_vec()).unwrap()).unwrap().dot(&w), x.data(), dx.data(), 1e-5).unwrap();
        assert!(err <= 1e-7, "{err}");
    }
}
