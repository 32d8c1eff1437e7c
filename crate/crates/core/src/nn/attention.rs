//! Multi-head scaled dot-product attention.

use crate::error::{Error, Result};
use crate::exec;
use crate::macs::{self, Kind};
use crate::nn::{Linear, Parameters};
use crate::rng::Rng;
use crate::tensor::{dot, softmax_backward, softmax_in_place, Tensor};

/// Query/key/value/output projections around per-head attention with
/// `1/sqrt(channels/heads)` scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Mha {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct MhaCache {
    query: Tensor,
    key: Tensor,
    value: Tensor,
    qp: Tensor,
    kp: Tensor,
    vp: Tensor,
    concat: Tensor,
    /// `nq x heads x nk`
    attn: Vec<f64>,
}

impl MhaCache {
    /// Attention weights laid out as `(queries, heads, keys)`.
    pub fn attention(&self) -> Tensor {
        let nq = self.qp.rows();
        let nk = self.kp.rows();
        Tensor::new(vec![nq, self.attn.len() / (nq * nk), nk], self.attn.clone()).expect("cache shape")
    }
}

impl Mha {
    pub fn new(heads: usize, q: Linear, k: Linear, v: Linear, out: Linear) -> Result<Self> {
        let c = q.in_dim();
        let m = Mha { heads, q, k, v, out };
        m.validate(c)?;
        Ok(m)
    }

    pub fn init(channels: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        check_heads(channels, heads)?;
        Ok(Mha {
            heads,
            q: Linear::init(channels, channels, rng),
            k: Linear::init(channels, channels, rng),
            v: Linear::init(channels, channels, rng),
            out: Linear::init(channels, channels, rng),
        })
    }

    /// All four projections are identities.
    pub fn identity(channels: usize, heads: usize) -> Result<Self> {
        check_heads(channels, heads)?;
        let id = Linear::identity(channels);
        Ok(Mha { heads, q: id.clone(), k: id.clone(), v: id.clone(), out: id })
    }

    pub fn channels(&self) -> usize {
        self.q.in_dim()
    }

    fn validate(&self, c: usize) -> Result<()> {
        check_heads(c, self.heads)?;
        for l in [&self.q, &self.k, &self.v, &self.out] {
            if l.in_dim() != c || l.out_dim() != c {
                return Err(Error::Config(format!("attention projection {}x{} for {c} channels", l.out_dim(), l.in_dim())));
            }
        }
        Ok(())
    }

    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor) -> Result<Tensor> {
        Ok(self.run(query, key, value, false)?.0)
    }

    pub fn forward_cached(&self, query: &Tensor, key: &Tensor, value: &Tensor) -> Result<(Tensor, MhaCache)> {
        let (y, cache) = self.run(query, key, value, true)?;
        Ok((y, cache.expect("cache requested")))
    }

    fn run(&self, query: &Tensor, key: &Tensor, value: &Tensor, keep: bool) -> Result<(Tensor, Option<MhaCache>)> {
        let c = self.channels();
        self.validate(c)?;
        if key.rows() == 0 || key.rows() != value.rows() {
            return Err(Error::Shape(format!("keys {:?} vs values {:?}", key.dims(), value.dims())));
        }
        let qp = self.q.forward(&query.as_matrix())?;
        let kp = self.k.forward(&key.as_matrix())?;
        let vp = self.v.forward(&value.as_matrix())?;
        let (nq, nk) = (qp.rows(), kp.rows());
        let mut concat = vec![0.0; nq * c];
        let mut attn = if keep { vec![0.0; nq * self.heads * nk] } else { Vec::new() };
        attend(qp.data(), kp.data(), vp.data(), nq, nk, c, self.heads, &mut concat, keep.then_some(&mut attn[..]));
        let concat = Tensor::new(vec![nq, c], concat)?;
        let y = self.out.forward(&concat)?;
        let mut dims = query.dims().to_vec();
        *dims.last_mut().unwrap() = c;
        let y = y.reshape(&dims)?;
        let cache = keep.then(|| MhaCache { query: query.as_matrix(), key: key.as_matrix(), value: value.as_matrix(), qp, kp, vp, concat, attn });
        Ok((y, cache))
    }

    /// Returns `(dquery, dkey, dvalue)` and accumulates parameter gradients.
    pub fn backward(&self, cache: &MhaCache, dy: &Tensor, grad: &mut Mha) -> Result<(Tensor, Tensor, Tensor)> {
        let c = self.channels();
        let dh = c / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (nq, nk) = (cache.qp.rows(), cache.kp.rows());
        let dconcat = self.out.backward(&cache.concat, &dy.as_matrix(), &mut grad.out)?;

        let mut dqp = Tensor::zeros(&[nq, c]);
        let mut dkp = Tensor::zeros(&[nk, c]);
        let mut dvp = Tensor::zeros(&[nk, c]);
        let mut da = vec![0.0; nk];
        let mut ds = vec![0.0; nk];
        for i in 0..nq {
            for h in 0..self.heads {
                let hs = h * dh..(h + 1) * dh;
                let a = &cache.attn[(i * self.heads + h) * nk..(i * self.heads + h + 1) * nk];
                let g = &dconcat.row(i)[hs.clone()];
                for j in 0..nk {
                    da[j] = dot(g, &cache.vp.row(j)[hs.clone()]);
                    for (dv, gv) in dvp.row_mut(j)[hs.clone()].iter_mut().zip(g) {
                        *dv += a[j] * gv;
                    }
                }
                softmax_backward(a, &da, &mut ds);
                for j in 0..nk {
                    let s = ds[j] * scale;
                    if s == 0.0 {
                        continue;
                    }
                    let krow = &cache.kp.row(j)[hs.clone()];
                    for (dq, kv) in dqp.row_mut(i)[hs.clone()].iter_mut().zip(krow) {
                        *dq += s * kv;
                    }
                    let qrow = &cache.qp.row(i)[hs.clone()];
                    for (dk, qv) in dkp.row_mut(j)[hs.clone()].iter_mut().zip(qrow) {
                        *dk += s * qv;
                    }
                }
            }
        }
        let dq = self.q.backward(&cache.query, &dqp, &mut grad.q)?;
        let dk = self.k.backward(&cache.key, &dkp, &mut grad.k)?;
        let dv = self.v.backward(&cache.value, &dvp, &mut grad.v)?;
        Ok((dq, dk, dv))
    }
}

fn check_heads(c: usize, heads: usize) -> Result<()> {
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Config(format!("{c} channels not divisible into {heads} heads")));
    }
    Ok(())
}

/// Per-head softmax attention over projected rows. Parallel over queries.
#[allow(clippy::too_many_arguments)]
fn attend(qp: &[f64], kp: &[f64], vp: &[f64], nq: usize, nk: usize, c: usize, heads: usize, out: &mut [f64], attn: Option<&mut [f64]>) {
    macs::add(Kind::Attention, (2 * nq * nk * c) as u64);
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let row = |i: usize, orow: &mut [f64], arow: &mut [f64]| {
        let q = &qp[i * c..(i + 1) * c];
        orow.iter_mut().for_each(|v| *v = 0.0);
        for h in 0..heads {
            let hs = h * dh..(h + 1) * dh;
            let w = &mut arow[h * nk..(h + 1) * nk];
            for (j, s) in w.iter_mut().enumerate() {
                *s = dot(&q[hs.clone()], &kp[j * c + h * dh..j * c + (h + 1) * dh]) * scale;
            }
            softmax_in_place(w);
            let o = &mut orow[hs];
            for (j, &a) in w.iter().enumerate() {
                for (ov, vv) in o.iter_mut().zip(&vp[j * c + h * dh..j * c + (h + 1) * dh]) {
                    *ov += a * vv;
                }
            }
        }
    };
    match attn {
        Some(attn) => exec::for_each_chunk_pair(out, c, attn, heads * nk, row),
        None => exec::for_each_chunk(out, c, |i, orow| {
            let mut scratch = vec![0.0; heads * nk];
            row(i, orow, &mut scratch);
        }),
    }
}

impl Parameters for Mha {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for l in [&mut self.q, &mut self.k, &mut self.v, &mut self.out] {
            l.visit_mut(f);
        }
    }
}
