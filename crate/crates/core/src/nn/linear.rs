use crate::error::{shape_err, Result};
use crate::nn::{init_bound, Parameters};
use crate::rng::Rng;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn_acc, Tensor};

/// Affine map `y = W x + b` applied to every trailing-axis vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out x in`
    pub weight: Tensor,
    /// `out`
    pub bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (out, _) = weight.matrix_dims()?;
        if bias.dims() != [out] {
            return shape_err(format!("bias {:?} for weight {:?}", bias.dims(), weight.dims()));
        }
        Ok(Linear { weight, bias })
    }

    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let b = init_bound(input);
        Linear { weight: rng.uniform_tensor(&[output, input], -b, b), bias: rng.uniform_tensor(&[output], -b, b) }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear { weight: Tensor::zeros(&[output, input]), bias: Tensor::zeros(&[output]) }
    }

    pub fn identity(n: usize) -> Self {
        Linear { weight: Tensor::identity(n), bias: Tensor::zeros(&[n]) }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (input, output) = (self.in_dim(), self.out_dim());
        if x.last_dim() != input {
            return shape_err(format!("linear expects trailing dim {input}, got {:?}", x.dims()));
        }
        let rows = x.rows();
        let mut out = vec![0.0; rows * output];
        gemm_nt(x.data(), self.weight.data(), rows, input, output, &mut out);
        let b = self.bias.data();
        for r in out.chunks_mut(output) {
            r.iter_mut().zip(b).for_each(|(v, b)| *v += b);
        }
        let mut dims = x.dims().to_vec();
        *dims.last_mut().unwrap() = output;
        Tensor::new(dims, out)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut Linear) -> Result<Tensor> {
        let (input, output) = (self.in_dim(), self.out_dim());
        if dy.last_dim() != output || x.rows() != dy.rows() || x.last_dim() != input {
            return shape_err(format!("linear backward x {:?} dy {:?}", x.dims(), dy.dims()));
        }
        let rows = x.rows();
        gemm_tn_acc(dy.data(), x.data(), rows, output, input, grad.weight.data_mut());
        let gb = grad.bias.data_mut();
        for r in dy.data().chunks(output) {
            gb.iter_mut().zip(r).for_each(|(g, d)| *g += d);
        }
        let mut dx = vec![0.0; rows * input];
        gemm_nn(dy.data(), self.weight.data(), rows, output, input, &mut dx);
        Tensor::new(x.dims().to_vec(), dx)
    }
}

impl Parameters for Linear {
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
    fn identity_and_bias_only() {
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        assert_eq!(Linear::identity(3).forward(&x).unwrap(), x);
        let mut l = Linear::zeros(3, 2);
        l.bias = Tensor::new(vec![2], vec![7.0, -1.0]).unwrap();
        let y = l.forward(&x).unwrap();
        assert_eq!(y.data(), &[7.0, -1.0, 7.0, -1.0]);
    }

    #[test]
    fn sum_gradient_is_column_sums() {
        let mut rng = Rng::new(5, 0);
        let l = Linear::init(4, 3, &mut rng);
        let x = rng.uniform_tensor(&[1, 4], -1.0, 1.0);
        let dy = Tensor::filled(&[1, 3], 1.0);
        let mut g = l.zeros_like();
        let dx = l.backward(&x, &dy, &mut g).unwrap();
        for j in 0..4 {
            let col: f64 = (0..3).map(|i| l.weight.data()[i * 4 + j]).sum();
            assert_eq!(dx.data()[j], col);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(11, 0);
        let l = Linear::init(5, 3, &mut rng);
        let x = rng.uniform_tensor(&[4, 5], -1.0, 1.0);
        let w = rng.uniform_tensor(&[4, 3], -1.0, 1.0);
        let mut g = l.zeros_like();
        let dx = l.backward(&x, &w, &mut g).unwrap();

        let theta = l.flatten();
        let err = grad_check(
            |p| {
                let mut m = l.clone();
                m.assign(p);
                m.forward(&x).unwrap().dot(&w)
            },
            &theta,
            &g.flatten(),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "param err {err}");

        let err =
            grad_check(|p| l.forward(&Tensor::new(x.dims().to_vec(), p.to_vec()).unwrap()).unwrap().dot(&w), x.data(), dx.data(), 1e-5).unwrap();
        assert!(err <= 1e-8, "input err {err}");
    }
}
