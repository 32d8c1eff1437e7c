//! Height compression of image features into width features, and the
//! Refine Transformer that lets each width feature recover information from
//! its sibling columns and its own image column.

use crate::error::{shape_err, Error, Result};
use crate::exec;
use crate::nn::{residual, residual_backward, residual_forward, LayerNorm, LayerNormCache, Mha, MhaCache, Mlp, MlpCache, Parameters, ResidualMode};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Multi-view image features, `(cameras, height, width, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume(Tensor);

impl FeatureVolume {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.dims().len() != 4 {
            return shape_err(format!("feature volume needs 4 dims, got {:?}", t.dims()));
        }
        if !t.is_finite() {
            return Err(Error::Invalid("feature volume has non-finite values".into()));
        }
        Ok(FeatureVolume(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn cameras(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[3]
    }

    /// Feature vector of pixel `(row, col)` in camera `cam`.
    pub fn pixel(&self, cam: usize, row: usize, col: usize) -> &[f64] {
        self.0.row((cam * self.height() + row) * self.width() + col)
    }

    /// The `height x channels` pixels of one image column.
    pub fn column(&self, cam: usize, col: usize) -> Tensor {
        let (h, c) = (self.height(), self.channels());
        let mut data = Vec::with_capacity(h * c);
        for i in 0..h {
            data.extend_from_slice(self.pixel(cam, i, col));
        }
        Tensor::new(vec![h, c], data).expect("column shape")
    }

    /// All pixels flattened to `(cameras * height * width) x channels`.
    pub fn flat(&self) -> Tensor {
        self.0.as_matrix()
    }
}

/// Height-compressed features, `(cameras, width, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WidthFeatures(Tensor);

impl WidthFeatures {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.dims().len() != 3 {
            return shape_err(format!("width features need 3 dims, got {:?}", t.dims()));
        }
        if !t.is_finite() {
            return Err(Error::Invalid("width features have non-finite values".into()));
        }
        Ok(WidthFeatures(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn cameras(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[2]
    }

    /// `width x channels` slab of one camera.
    pub fn camera(&self, cam: usize) -> Tensor {
        let n = self.width() * self.channels();
        Tensor::new(vec![self.width(), self.channels()], self.0.data()[cam * n..(cam + 1) * n].to_vec()).expect("camera slab")
    }

    /// All width features flattened to `(cameras * width) x channels`.
    pub fn flat(&self) -> Tensor {
        self.0.as_matrix()
    }
}

/// Max over the image rows for every `(camera, column, channel)`.
pub fn height_maxpool(feat: &FeatureVolume) -> WidthFeatures {
    height_maxpool_with_argmax(feat).0
}

/// Pooled features plus the winning row per output entry.
pub fn height_maxpool_with_argmax(feat: &FeatureVolume) -> (WidthFeatures, Vec<usize>) {
    let (n, h, w, c) = (feat.cameras(), feat.height(), feat.width(), feat.channels());
    let mut out = Tensor::filled(&[n, w, c], f64::NEG_INFINITY);
    let mut arg = vec![0usize; n * w * c];
    for cam in 0..n {
        for i in 0..h {
            for j in 0..w {
                let px = feat.pixel(cam, i, j);
                let base = (cam * w + j) * c;
                for ch in 0..c {
                    if px[ch] > out.data()[base + ch] {
                        out.data_mut()[base + ch] = px[ch];
                        arg[base + ch] = i;
                    }
                }
            }
        }
    }
    (WidthFeatures(out), arg)
}

/// Routes width gradients back to the rows that won the max.
pub fn height_maxpool_backward(feat_dims: &[usize], argmax: &[usize], dwidth: &Tensor) -> Tensor {
    let (h, w, c) = (feat_dims[1], feat_dims[2], feat_dims[3]);
    let mut d = Tensor::zeros(feat_dims);
    for (idx, (&row, &g)) in argmax.iter().zip(dwidth.data()).enumerate() {
        let ch = idx % c;
        let j = (idx / c) % w;
        let cam = idx / (c * w);
        d.data_mut()[((cam * h + row) * w + j) * c + ch] += g;
    }
    d
}

/// Self-attention over a camera's width features, per-column cross-attention
/// into that column's pixels, then a feed-forward network; each followed by
/// a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineParams {
    pub self_attn: Mha,
    pub cross_attn: Mha,
    pub ffn: Mlp,
    pub norms: [LayerNorm; 3],
    pub residual: ResidualMode,
}

pub(crate) struct RefineCameraCache {
    self_cache: MhaCache,
    n1: Option<LayerNormCache>,
    cross: Vec<MhaCache>,
    n2: Option<LayerNormCache>,
    ffn: MlpCache,
    n3: Option<LayerNormCache>,
}

pub struct RefineCache {
    cameras: Vec<RefineCameraCache>,
    feat_dims: Vec<usize>,
}

impl RefineParams {
    pub fn init(channels: usize, heads: usize, ffn_hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(RefineParams {
            self_attn: Mha::init(channels, heads, rng)?,
            cross_attn: Mha::init(channels, heads, rng)?,
            ffn: Mlp::init(&[channels, ffn_hidden, channels], rng),
            norms: std::array::from_fn(|_| LayerNorm::new(channels)),
            residual: ResidualMode::PostNorm,
        })
    }

    pub fn channels(&self) -> usize {
        self.self_attn.channels()
    }

    /// Self-attention among one camera's `width x channels` features.
    pub fn self_stage(&self, w: &Tensor) -> Result<Tensor> {
        let a = self.self_attn.forward(w, w, w)?;
        residual_forward(w, &a, &self.norms[0], self.residual)
    }

    /// Each width feature attends only to the pixels of its own column.
    pub fn cross_stage(&self, s: &Tensor, feat: &FeatureVolume, cam: usize) -> Result<Tensor> {
        let (w, c) = s.matrix_dims()?;
        if w != feat.width() || c != feat.channels() {
            return shape_err(format!("width slab {:?} vs features {:?}", s.dims(), feat.tensor().dims()));
        }
        let rows = exec::map_range(w, |j| {
            let q = Tensor::new(vec![1, c], s.row(j).to_vec())?;
            let col = feat.column(cam, j);
            self.cross_attn.forward(&q, &col, &col)
        });
        let mut cross = Vec::with_capacity(w * c);
        for r in rows {
            cross.extend_from_slice(r?.data());
        }
        let cross = Tensor::new(vec![w, c], cross)?;
        residual_forward(s, &cross, &self.norms[1], self.residual)
    }

    pub fn ffn_stage(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.ffn.forward(x)?;
        residual_forward(x, &f, &self.norms[2], self.residual)
    }

    fn camera_cached(&self, w0: &Tensor, feat: &FeatureVolume, cam: usize) -> Result<(Tensor, RefineCameraCache)> {
        let c = self.channels();
        let (a, self_cache) = self.self_attn.forward_cached(w0, w0, w0)?;
        let (s, n1) = residual(w0, &a, &self.norms[0], self.residual)?;
        let mut cross_caches = Vec::with_capacity(s.rows());
        let mut cross = Vec::with_capacity(s.len());
        for j in 0..s.rows() {
            let q = Tensor::new(vec![1, c], s.row(j).to_vec())?;
            let col = feat.column(cam, j);
            let (o, cc) = self.cross_attn.forward_cached(&q, &col, &col)?;
            cross.extend_from_slice(o.data());
            cross_caches.push(cc);
        }
        let cross = Tensor::new(s.dims().to_vec(), cross)?;
        let (x, n2) = residual(&s, &cross, &self.norms[1], self.residual)?;
        let (f, ffn) = self.ffn.forward_cached(&x)?;
        let (y, n3) = residual(&x, &f, &self.norms[2], self.residual)?;
        Ok((y, RefineCameraCache { self_cache, n1, cross: cross_caches, n2, ffn, n3 }))
    }

    fn camera_backward(&self, cache: &RefineCameraCache, dy: &Tensor, grad: &mut RefineParams) -> Result<(Tensor, Tensor)> {
        let [g1, g2, g3] = &mut grad.norms;
        let d3 = residual_backward(&cache.n3, dy, &self.norms[2], g3)?;
        let mut dx = d3.clone();
        dx.add_assign(&self.ffn.backward(&cache.ffn, &d3, &mut grad.ffn)?)?;

        let d2 = residual_backward(&cache.n2, &dx, &self.norms[1], g2)?;
        let mut ds = d2.clone();
        let c = self.channels();
        let mut dcols = Vec::with_capacity(cache.cross.len());
        for (j, cc) in cache.cross.iter().enumerate() {
            let g = Tensor::new(vec![1, c], d2.row(j).to_vec())?;
            let (dq, dk, dv) = self.cross_attn.backward(cc, &g, &mut grad.cross_attn)?;
            ds.row_mut(j).iter_mut().zip(dq.data()).for_each(|(a, b)| *a += b);
            dcols.push(dk.add(&dv)?);
        }

        let d1 = residual_backward(&cache.n1, &ds, &self.norms[0], g1)?;
        let (dq, dk, dv) = self.self_attn.backward(&cache.self_cache, &d1, &mut grad.self_attn)?;
        let mut dw = d1;
        dw.add_assign(&dq)?;
        dw.add_assign(&dk)?;
        dw.add_assign(&dv)?;

        // dcols[j] is height x channels; scatter into a height x width x channels slab
        let h = dcols.first().map_or(0, |t| t.rows());
        let w = dcols.len();
        let mut dfeat = Tensor::zeros(&[h, w, c]);
        for (j, col) in dcols.iter().enumerate() {
            for i in 0..h {
                dfeat.row_mut(i * w + j).copy_from_slice(col.row(i));
            }
        }
        Ok((dw, dfeat))
    }
}

impl Parameters for RefineParams {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.self_attn.visit(f);
        self.cross_attn.visit(f);
        self.ffn.visit(f);
        self.norms.iter().for_each(|n| n.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.self_attn.visit_mut(f);
        self.cross_attn.visit_mut(f);
        self.ffn.visit_mut(f);
        self.norms.iter_mut().for_each(|n| n.visit_mut(f));
    }
}

fn check_refine_shapes(width: &WidthFeatures, feat: &FeatureVolume, params: &RefineParams) -> Result<()> {
    if width.cameras() != feat.cameras() || width.width() != feat.width() || width.channels() != feat.channels() {
        return shape_err(format!("width {:?} vs features {:?}", width.tensor().dims(), feat.tensor().dims()));
    }
    if params.channels() != feat.channels() {
        return shape_err(format!("refine params for {} channels, features have {}", params.channels(), feat.channels()));
    }
    Ok(())
}

/// Refines width features camera by camera; cameras never exchange information.
pub fn refine(width: &WidthFeatures, feat: &FeatureVolume, params: &RefineParams) -> Result<WidthFeatures> {
    check_refine_shapes(width, feat, params)?;
    let outs = exec::map_range(width.cameras(), |cam| {
        let s = params.self_stage(&width.camera(cam))?;
        let x = params.cross_stage(&s, feat, cam)?;
        params.ffn_stage(&x)
    });
    let mut data = Vec::with_capacity(width.tensor().len());
    for o in outs {
        data.extend_from_slice(o?.data());
    }
    WidthFeatures::new(Tensor::new(width.tensor().dims().to_vec(), data)?)
}

pub fn refine_cached(width: &WidthFeatures, feat: &FeatureVolume, params: &RefineParams) -> Result<(WidthFeatures, RefineCache)> {
    check_refine_shapes(width, feat, params)?;
    let mut data = Vec::with_capacity(width.tensor().len());
    let mut cameras = Vec::with_capacity(width.cameras());
    for cam in 0..width.cameras() {
        let (y, c) = params.camera_cached(&width.camera(cam), feat, cam)?;
        data.extend_from_slice(y.data());
        cameras.push(c);
    }
    let out = WidthFeatures::new(Tensor::new(width.tensor().dims().to_vec(), data)?)?;
    Ok((out, RefineCache { cameras, feat_dims: feat.tensor().dims().to_vec() }))
}

/// Returns `(dwidth, dfeatures)` and accumulates parameter gradients.
pub fn refine_backward(params: &RefineParams, cache: &RefineCache, dy: &Tensor, grad: &mut RefineParams) -> Result<(Tensor, Tensor)> {
    let (n, w, c) = (cache.feat_dims[0], cache.feat_dims[2], cache.feat_dims[3]);
    if dy.dims() != [n, w, c] {
        return shape_err(format!("refine backward dy {:?}", dy.dims()));
    }
    let slab = w * c;
    let mut dwidth = Vec::with_capacity(dy.len());
    let mut dfeat = Vec::with_capacity(cache.feat_dims.iter().product());
    for (cam, cc) in cache.cameras.iter().enumerate() {
        let g = Tensor::new(vec![w, c], dy.data()[cam * slab..(cam + 1) * slab].to_vec())?;
        let (dw, df) = params.camera_backward(cc, &g, grad)?;
        dwidth.extend_from_slice(dw.data());
        dfeat.extend_from_slice(df.data());
    }
    Ok((Tensor::new(dy.dims().to_vec(), dwidth)?, Tensor::new(cache.feat_dims.clone(), dfeat)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::nn::{layer_norm, Linear};

    fn volume(rng: &mut Rng, dims: &[usize]) -> FeatureVolume {
        FeatureVolume::new(rng.uniform_tensor(dims, -1.0, 1.0)).unwrap()
    }

    #[test]
    fn maxpool_examples() {
        let f = FeatureVolume::new(Tensor::new(vec![1, 3, 1, 1], vec![1.0, 5.0, 3.0]).unwrap()).unwrap();
        assert_eq!(height_maxpool(&f).tensor().data(), &[5.0]);
        let mut rng = Rng::new(0, 0);
        let one = volume(&mut rng, &[2, 1, 4, 3]);
        assert_eq!(height_maxpool(&one).tensor().data(), one.tensor().data());
    }

    #[test]
    fn maxpool_matches_loop_oracle() {
        let mut rng = Rng::new(1, 0);
        let f = volume(&mut rng, &[2, 4, 6, 8]);
        let w = height_maxpool(&f);
        for n in 0..2 {
            for j in 0..6 {
                for c in 0..8 {
                    let mut m = f64::NEG_INFINITY;
                    for i in 0..4 {
                        m = m.max(f.tensor().data()[((n * 4 + i) * 6 + j) * 8 + c]);
                    }
                    assert_eq!(w.tensor().data()[(n * 6 + j) * 8 + c], m);
                }
            }
        }
    }

    #[test]
    fn zeroed_branches_reduce_to_norm_chain() {
        let mut rng = Rng::new(2, 0);
        let mut p = RefineParams::init(8, 2, 16, &mut rng).unwrap();
        p.self_attn.out = Linear::zeros(8, 8);
        p.cross_attn.out = Linear::zeros(8, 8);
        p.ffn.layers[1] = Linear::zeros(16, 8);
        let f = volume(&mut rng, &[2, 4, 6, 8]);
        let w = WidthFeatures::new(rng.uniform_tensor(&[2, 6, 8], -1.0, 1.0)).unwrap();
        let out = refine(&w, &f, &p).unwrap();
        let (g, s) = (Tensor::filled(&[8], 1.0), Tensor::zeros(&[8]));
        let mut want = w.tensor().clone();
        for _ in 0..3 {
            want = layer_norm(&want, &g, &s, p.norms[0].eps).unwrap();
        }
        assert!(out.tensor().max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn single_pixel_column_doubles_before_norm() {
        let mut p = RefineParams::init(4, 2, 8, &mut Rng::new(3, 0)).unwrap();
        p.cross_attn = Mha::identity(4, 2).unwrap();
        let mut rng = Rng::new(4, 0);
        let s = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
        let f = FeatureVolume::new(s.clone().reshape(&[1, 1, 3, 4]).unwrap()).unwrap();
        let got = p.cross_stage(&s, &f, 0).unwrap();
        let mut doubled = s.clone();
        doubled.scale(2.0);
        let want = p.norms[1].forward(&doubled).unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn cross_stage_matches_per_column_oracle() {
        let mut rng = Rng::new(5, 0);
        let p = RefineParams::init(8, 2, 16, &mut rng).unwrap();
        let f = volume(&mut rng, &[1, 4, 6, 8]);
        let s = rng.uniform_tensor(&[6, 8], -1.0, 1.0);
        let got = p.cross_stage(&s, &f, 0).unwrap();

        let proj = |l: &Linear, x: &[f64]| -> Vec<f64> {
            (0..8).map(|o| (0..8).map(|i| l.weight.data()[o * 8 + i] * x[i]).sum::<f64>() + l.bias.data()[o]).collect()
        };
        let a = &p.cross_attn;
        let mut cross = Tensor::zeros(&[6, 8]);
        for j in 0..6 {
            let q = proj(&a.q, s.row(j));
            let ks: Vec<Vec<f64>> = (0..4).map(|i| proj(&a.k, f.pixel(0, i, j))).collect();
            let vs: Vec<Vec<f64>> = (0..4).map(|i| proj(&a.v, f.pixel(0, i, j))).collect();
            let mut concat = vec![0.0; 8];
            for h in 0..2 {
                let r = h * 4..(h + 1) * 4;
                let sc: Vec<f64> = ks.iter().map(|k| r.clone().map(|c| q[c] * k[c]).sum::<f64>() / 2.0).collect();
                let m = sc.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = sc.iter().map(|v| (v - m).exp()).sum();
                for (i, v) in vs.iter().enumerate() {
                    let w = (sc[i] - m).exp() / z;
                    for c in r.clone() {
                        concat[c] += w * v[c];
                    }
                }
            }
            cross.row_mut(j).copy_from_slice(&proj(&a.out, &concat));
        }
        let want = p.norms[1].forward(&s.add(&cross).unwrap()).unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(6, 0);
        let mut p = RefineParams::init(8, 2, 12, &mut rng).unwrap();
        for n in &mut p.norms {
            n.gain = rng.uniform_tensor(&[8], 0.5, 1.5);
            n.shift = rng.uniform_tensor(&[8], -0.5, 0.5);
        }
        let f = volume(&mut rng, &[2, 3, 4, 8]);
        let w = WidthFeatures::new(rng.uniform_tensor(&[2, 4, 8], -1.0, 1.0)).unwrap();
        let probe = rng.uniform_tensor(&[2, 4, 8], -1.0, 1.0);
        let (out, cache) = refine_cached(&w, &f, &p).unwrap();
        assert!(out.tensor().max_abs_diff(refine(&w, &f, &p).unwrap().tensor()) <= 1e-12);
        let mut g = p.zeros_like();
        let (dw, df) = refine_backward(&p, &cache, &probe, &mut g).unwrap();
        let loss = |p: &RefineParams, w: &WidthFeatures, f: &FeatureVolume| refine(w, f, p).unwrap().tensor().dot(&probe);
        let e = grad_check(
            |th| {
                let mut q = p.clone();
                q.assign(th);
                loss(&q, &w, &f)
            },
            &p.flatten(),
            &g.flatten(),
            1e-5,
        )
        .unwrap();
        assert!(e <= 1e-6, "params {e}");
        let e = grad_check(
            |x| loss(&p, &WidthFeatures::new(Tensor::new(vec![2, 4, 8], x.to_vec()).unwrap()).unwrap(), &f),
            w.tensor().data(),
            dw.data(),
            1e-5,
        )
        .unwrap();
        assert!(e <= 1e-6, "width {e}");
        let e = grad_check(
            |x| loss(&p, &w, &FeatureVolume::new(Tensor::new(vec![2, 3, 4, 8], x.to_vec()).unwrap()).unwrap()),
            f.tensor().data(),
            df.data(),
            1e-5,
        )
        .unwrap();
        assert!(e <= 1e-6, "features {e}");
    }

    #[test]
    fn cameras_do_not_mix() {
        let mut rng = Rng::new(7, 0);
        let p = RefineParams::init(8, 2, 16, &mut rng).unwrap();
        let f = volume(&mut rng, &[2, 3, 5, 8]);
        let w = WidthFeatures::new(rng.uniform_tensor(&[2, 5, 8], -1.0, 1.0)).unwrap();
        let base = refine(&w, &f, &p).unwrap();
        let mut f2 = f.tensor().clone();
        let mut w2 = w.tensor().clone();
        let half = f2.len() / 2;
        f2.data_mut()[half..].iter_mut().for_each(|v| *v = 0.0);
        let halfw = w2.len() / 2;
        w2.data_mut()[halfw..].iter_mut().for_each(|v| *v = 0.0);
        let out = refine(&WidthFeatures::new(w2).unwrap(), &FeatureVolume::new(f2).unwrap(), &p).unwrap();
        assert_eq!(&out.tensor().data()[..halfw], &base.tensor().data()[..halfw]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut rng = Rng::new(8, 0);
        let p = RefineParams::init(8, 2, 16, &mut rng).unwrap();
        let f = volume(&mut rng, &[2, 3, 5, 8]);
        let w = WidthFeatures::new(rng.uniform_tensor(&[2, 4, 8], -1.0, 1.0)).unwrap();
        assert!(matches!(refine(&w, &f, &p), Err(Error::Shape(_))));
    }
}
