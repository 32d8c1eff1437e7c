use crate::error::{shape_err, Result};
use crate::macs::{self, Kind};
use crate::nn::{init_bound, Parameters};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// 1D convolution along the width axis with odd kernel size and zero
/// "same" padding. Input and output are `(width, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    /// `out x in x kernel`
    pub weight: Tensor,
    /// `out`
    pub bias: Tensor,
}

impl Conv1d {
    pub fn init(input: usize, output: usize, kernel: usize, rng: &mut Rng) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let b = init_bound(input * kernel);
        Conv1d { weight: rng.uniform_tensor(&[output, input, kernel], -b, b), bias: rng.uniform_tensor(&[output], -b, b) }
    }

    pub fn zeros(input: usize, output: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Conv1d { weight: Tensor::zeros(&[output, input, kernel]), bias: Tensor::zeros(&[output]) }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    /// Input positions `(j, tap, source)` contributing to output column `j`.
    fn taps(&self, width: usize, j: usize) -> impl Iterator<Item = (usize, usize)> {
        let half = (self.kernel() / 2) as isize;
        (0..self.kernel()).filter_map(move |t| {
            let src = j as isize + t as isize - half;
            (0..width as isize).contains(&src).then_some((t, src as usize))
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (width, cin) = x.matrix_dims()?;
        if cin != self.in_dim() {
            return shape_err(format!("conv expects {} channels, got {cin}", self.in_dim()));
        }
        let (cout, k) = (self.out_dim(), self.kernel());
        let w = self.weight.data();
        let mut y = Tensor::zeros(&[width, cout]);
        let mut count = 0u64;
        for j in 0..width {
            for (t, src) in self.taps(width, j) {
                count += (cout * cin) as u64;
                let xr = x.row(src);
                for (o, yv) in y.row_mut(j).iter_mut().enumerate() {
                    let base = o * cin * k;
                    *yv += (0..cin).map(|i| w[base + i * k + t] * xr[i]).sum::<f64>();
                }
            }
            y.row_mut(j).iter_mut().zip(self.bias.data()).for_each(|(v, b)| *v += b);
        }
        macs::add(Kind::Projection, count);
        Ok(y)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut Conv1d) -> Result<Tensor> {
        let (width, cin) = x.matrix_dims()?;
        let (cout, k) = (self.out_dim(), self.kernel());
        if dy.dims() != [width, cout] {
            return shape_err(format!("conv backward dy {:?}", dy.dims()));
        }
        let w = self.weight.data();
        let mut dx = Tensor::zeros(&[width, cin]);
        for j in 0..width {
            let g = dy.row(j);
            grad.bias.data_mut().iter_mut().zip(g).for_each(|(b, d)| *b += d);
            for (t, src) in self.taps(width, j) {
                for (o, &go) in g.iter().enumerate() {
                    let base = o * cin * k;
                    for i in 0..cin {
                        grad.weight.data_mut()[base + i * k + t] += go * x.row(src)[i];
                        dx.row_mut(src)[i] += go * w[base + i * k + t];
                    }
                }
            }
        }
        Ok(dx)
    }
}

impl Parameters for Conv1d {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    #[test]
    fn kernel_one_is_pointwise() {
        let mut rng = Rng::new(0, 0);
        let conv = Conv1d::init(3, 2, 1, &mut rng);
        let x = rng.uniform_tensor(&[5, 3], -1.0, 1.0);
        let y = conv.forward(&x).unwrap();
        let mut x2 = x.clone();
        x2.row_mut(1).iter_mut().for_each(|v| *v += 10.0);
        let y2 = conv.forward(&x2).unwrap();
        for j in [0, 2, 3, 4] {
            assert_eq!(y.row(j), y2.row(j));
        }
        assert_ne!(y.row(1), y2.row(1));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(1, 0);
        let conv = Conv1d::init(3, 4, 3, &mut rng);
        let x = rng.uniform_tensor(&[6, 3], -1.0, 1.0);
        let w = rng.uniform_tensor(&[6, 4], -1.0, 1.0);
        let mut g = conv.zeros_like();
        let dx = conv.backward(&x, &w, &mut g).unwrap();
        let e = grad_check(
            |p| {
                let mut c = conv.clone();
                c.assign(p);
                c.forward(&x).unwrap().dot(&w)
            },
            &conv.flatten(),
            &g.flatten(),
            1e-5,
        )
        .unwrap();
        assert!(e <= 1e-8, "{e}");
        let e = grad_check(|p| conv.forward(&Tensor::new(vec![6, 3], p.to_vec()).unwrap()).unwrap().dot(&w), x.data(), dx.data(), 1e-5).unwrap();
        assert!(e <= 1e-8, "{e}");
    }
}
