//! Reference positional encodings.
//!
//! Every feature pixel is lifted to one reference point per depth bin; each
//! reference point is encoded from its polar ground-plane coordinates (and
//! optionally its height) with a Fourier encoding, and the encodings are
//! blended by predicted reference coefficients before a shared MLP. Width
//! features blend the per-pixel encodings of their column by a predicted
//! height distribution. BEV queries encode their cell centers the same way.

use std::f64::consts::PI;

use crate::decoder::BevGrid;
use crate::error::{shape_err, Error, Result};
use crate::exec;
use crate::geometry::{lift_pixel, project_to_ego, to_polar, CameraModel, CameraRig, DepthBins, Point3, PolarCoord};
use crate::macs::{self, Kind};
use crate::nn::{Mlp, MlpCache, Parameters};
use crate::rng::Rng;
use crate::tensor::{softmax_backward, softmax_in_place, Tensor};
use crate::width::FeatureVolume;

/// Tolerance on the sum of every coefficient / height-distribution slice.
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// `x -> [sin(w_0 x), cos(w_0 x), ..., sin(w_{L-1} x), cos(w_{L-1} x)]`
/// with `w_k = 2^k * pi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FourierEncoder {
    bands: usize,
}

impl FourierEncoder {
    pub fn new(bands: usize) -> Result<Self> {
        if bands == 0 || bands > 52 {
            return Err(Error::Config(format!("fourier bands must be in 1..=52, got {bands}")));
        }
        Ok(FourierEncoder { bands })
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn dim(&self) -> usize {
        2 * self.bands
    }

    pub fn frequency(&self, k: usize) -> f64 {
        (1u64 << k) as f64 * PI
    }

    pub fn encode_into(&self, x: f64, out: &mut [f64]) {
        for k in 0..self.bands {
            let (s, c) = (self.frequency(k) * x).sin_cos();
            out[2 * k] = s;
            out[2 * k + 1] = c;
        }
    }
}

pub fn fourier(x: f64, enc: &FourierEncoder) -> Vec<f64> {
    let mut out = vec![0.0; enc.dim()];
    enc.encode_into(x, &mut out);
    out
}

/// Fourier encoding of polar coordinates. Distance and height are divided
/// by fixed scales before encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarEncoder {
    pub fourier: FourierEncoder,
    pub distance_scale: f64,
    pub height_scale: f64,
}

impl PolarEncoder {
    pub fn new(bands: usize) -> Result<Self> {
        Ok(PolarEncoder { fourier: FourierEncoder::new(bands)?, distance_scale: 60.0, height_scale: 10.0 })
    }

    /// Encoding length: three blocks, four with height.
    pub fn dim(&self, include_height: bool) -> usize {
        self.fourier.dim() * if include_height { 4 } else { 3 }
    }

    pub fn encode_into(&self, p: &PolarCoord, include_height: bool, out: &mut [f64]) {
        let b = self.fourier.dim();
        self.fourier.encode_into(p.d / self.distance_scale, &mut out[..b]);
        self.fourier.encode_into(p.sin, &mut out[b..2 * b]);
        self.fourier.encode_into(p.cos, &mut out[2 * b..3 * b]);
        if include_height {
            self.fourier.encode_into(p.z / self.height_scale, &mut out[3 * b..4 * b]);
        }
    }
}

/// `concat(xi(d), xi(sin), xi(cos)[, xi(z)])` of one point.
pub fn reference_pe(coord: &PolarCoord, include_height: bool, enc: &PolarEncoder) -> Vec<f64> {
    let mut out = vec![0.0; enc.dim(include_height)];
    enc.encode_into(coord, include_height, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodingKind {
    /// `(cameras, height, width, c)`, one per feature pixel.
    Pixel,
    /// `(cameras, width, c)`, one per width feature.
    Width,
    /// `(anchors, c)`, sparse 3D query anchors.
    Query,
    /// `(h_b, w_b, c)`, one per BEV cell.
    Bev,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodingSet {
    kind: EncodingKind,
    values: Tensor,
}

impl EncodingSet {
    pub fn new(kind: EncodingKind, values: Tensor) -> Result<Self> {
        let rank = match kind {
            EncodingKind::Pixel => 4,
            EncodingKind::Width | EncodingKind::Bev => 3,
            EncodingKind::Query => 2,
        };
        if values.dims().len() != rank {
            return shape_err(format!("{kind:?} encodings need rank {rank}, got {:?}", values.dims()));
        }
        if !values.is_finite() {
            return Err(Error::Invalid("encodings contain non-finite values".into()));
        }
        Ok(EncodingSet { kind, values })
    }

    pub fn kind(&self) -> EncodingKind {
        self.kind
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn expect_kind(&self, kind: EncodingKind) -> Result<()> {
        if self.kind != kind {
            return shape_err(format!("expected {kind:?} encodings, got {:?}", self.kind));
        }
        Ok(())
    }
}

fn max_slice_error(t: &Tensor) -> f64 {
    (0..t.rows()).map(|r| (t.row(r).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

fn check_distribution(t: &Tensor, what: &str) -> Result<()> {
    if t.data().iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Invalid(format!("{what} has negative or NaN entries")));
    }
    let err = max_slice_error(t);
    if err > NORMALIZATION_TOL {
        return Err(Error::Invalid(format!("{what} slices do not sum to 1 (max error {err:e})")));
    }
    Ok(())
}

/// Blend weights `s` over depth bins, `(cameras, height, width, bins)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCoefficients(Tensor);

impl ReferenceCoefficients {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.dims().len() != 4 {
            return shape_err(format!("reference coefficients need 4 dims, got {:?}", t.dims()));
        }
        check_distribution(&t, "reference coefficients")?;
        Ok(ReferenceCoefficients(t))
    }

    /// Softmax over the bin axis.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        if logits.dims().len() != 4 {
            return shape_err(format!("coefficient logits need 4 dims, got {:?}", logits.dims()));
        }
        let mut t = logits.clone();
        for r in 0..t.rows() {
            softmax_in_place(t.row_mut(r));
        }
        Ok(ReferenceCoefficients(t))
    }

    /// All weight on one bin per pixel.
    pub fn one_hot(cameras: usize, height: usize, width: usize, bins: usize, bin: usize) -> Self {
        ReferenceCoefficients(Tensor::from_fn(&[cameras, height, width, bins], |i| if i % bins == bin { 1.0 } else { 0.0 }))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Largest `|sum - 1|` over all per-pixel slices.
    pub fn max_normalization_error(&self) -> f64 {
        max_slice_error(&self.0)
    }
}

/// Per-column categorical distribution `t` over image rows,
/// `(cameras, width, height)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightDistribution(Tensor);

impl HeightDistribution {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.dims().len() != 3 {
            return shape_err(format!("height distribution needs 3 dims, got {:?}", t.dims()));
        }
        check_distribution(&t, "height distribution")?;
        Ok(HeightDistribution(t))
    }

    /// Softmax over the row axis.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        if logits.dims().len() != 3 {
            return shape_err(format!("height logits need 3 dims, got {:?}", logits.dims()));
        }
        let mut t = logits.clone();
        for r in 0..t.rows() {
            softmax_in_place(t.row_mut(r));
        }
        Ok(HeightDistribution(t))
    }

    pub fn uniform(cameras: usize, width: usize, height: usize) -> Self {
        HeightDistribution(Tensor::filled(&[cameras, width, height], 1.0 / height as f64))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn max_normalization_error(&self) -> f64 {
        max_slice_error(&self.0)
    }
}

/// Per-pixel two-layer head (a 1x1 convolution) predicting reference
/// coefficient logits from image features.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientHead {
    pub mlp: Mlp,
}

impl CoefficientHead {
    pub fn init(channels: usize, hidden: usize, bins: usize, rng: &mut Rng) -> Self {
        CoefficientHead { mlp: Mlp::init(&[channels, hidden, bins], rng) }
    }

    pub fn predict(&self, feat: &FeatureVolume) -> Result<ReferenceCoefficients> {
        ReferenceCoefficients::from_logits(&self.mlp.forward(feat.tensor())?)
    }

    pub(crate) fn predict_cached(&self, feat: &FeatureVolume) -> Result<(ReferenceCoefficients, MlpCache)> {
        let (logits, cache) = self.mlp.forward_cached(feat.tensor())?;
        Ok((ReferenceCoefficients::from_logits(&logits)?, cache))
    }

    /// Gradient w.r.t. the features given `dL/ds`.
    pub(crate) fn backward(&self, coeffs: &ReferenceCoefficients, cache: &MlpCache, dcoeffs: &Tensor, grad: &mut CoefficientHead) -> Result<Tensor> {
        let s = coeffs.tensor();
        let mut dlogits = Tensor::zeros(s.dims());
        for r in 0..s.rows() {
            softmax_backward(s.row(r), dcoeffs.row(r), dlogits.row_mut(r));
        }
        self.mlp.backward(cache, &dlogits, &mut grad.mlp)
    }
}

/// Per-pixel head scoring each row of a column; a softmax down the column
/// turns the scores into a height distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightHead {
    pub mlp: Mlp,
}

impl HeightHead {
    pub fn init(channels: usize, hidden: usize, rng: &mut Rng) -> Self {
        HeightHead { mlp: Mlp::init(&[channels, hidden, 1], rng) }
    }

    fn to_columns(scores: &Tensor, n: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[n, w, h], |idx| {
            let (cam, j, i) = (idx / (w * h), (idx / h) % w, idx % h);
            scores.data()[(cam * h + i) * w + j]
        })
    }

    pub fn predict(&self, feat: &FeatureVolume) -> Result<HeightDistribution> {
        let scores = self.mlp.forward(feat.tensor())?;
        HeightDistribution::from_logits(&Self::to_columns(&scores, feat.cameras(), feat.height(), feat.width()))
    }

    pub(crate) fn predict_cached(&self, feat: &FeatureVolume) -> Result<(HeightDistribution, MlpCache)> {
        let (scores, cache) = self.mlp.forward_cached(feat.tensor())?;
        let t = HeightDistribution::from_logits(&Self::to_columns(&scores, feat.cameras(), feat.height(), feat.width()))?;
        Ok((t, cache))
    }

    pub(crate) fn backward(&self, dist: &HeightDistribution, cache: &MlpCache, ddist: &Tensor, grad: &mut HeightHead) -> Result<Tensor> {
        let t = dist.tensor();
        let (n, w, h) = (t.dims()[0], t.dims()[1], t.dims()[2]);
        let mut dcol = Tensor::zeros(t.dims());
        for r in 0..t.rows() {
            softmax_backward(t.row(r), ddist.row(r), dcol.row_mut(r));
        }
        let dscores = Tensor::from_fn(&[n, h, w, 1], |idx| {
            let (cam, i, j) = (idx / (h * w), (idx / w) % h, idx % w);
            dcol.data()[(cam * w + j) * h + i]
        });
        self.mlp.backward(cache, &dscores, &mut grad.mlp)
    }
}

impl Parameters for CoefficientHead {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.mlp.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.mlp.visit_mut(f)
    }
}

impl Parameters for HeightHead {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.mlp.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.mlp.visit_mut(f)
    }
}

/// Image-plane coordinate of feature pixel `(row, col)`: its center.
pub fn pixel_center(row: usize, col: usize) -> (f64, f64) {
    (col as f64 + 0.5, row as f64 + 0.5)
}

/// Calls `f(k, encoding)` for each depth-bin reference point of a pixel.
#[allow(clippy::too_many_arguments)]
fn for_each_reference(
    cam: &CameraModel,
    row: usize,
    col: usize,
    bins: &DepthBins,
    include_height: bool,
    enc: &PolarEncoder,
    buf: &mut [f64],
    mut f: impl FnMut(usize, &[f64]),
) {
    let (u, v) = pixel_center(row, col);
    for (k, p) in lift_pixel(u, v, bins).iter().enumerate() {
        let polar = to_polar(project_to_ego(p, cam));
        enc.encode_into(&polar, include_height, buf);
        f(k, buf);
    }
}

fn check_geometry(dims: &[usize], rig: &CameraRig, bins: &DepthBins, coeffs: &ReferenceCoefficients) -> Result<()> {
    if dims.len() != 4 {
        return shape_err(format!("feature dims {dims:?}"));
    }
    if rig.len() != dims[0] {
        return shape_err(format!("{} cameras in rig, {} in features", rig.len(), dims[0]));
    }
    let want = [dims[0], dims[1], dims[2], bins.len()];
    if coeffs.tensor().dims() != want {
        return shape_err(format!("coefficients {:?}, expected {want:?}", coeffs.tensor().dims()));
    }
    Ok(())
}

/// Coefficient-weighted sums of the reference encodings of every pixel,
/// before the MLP: `(cameras, height, width, enc_dim)`.
pub fn pixel_aggregates(
    feat_dims: &[usize],
    rig: &CameraRig,
    bins: &DepthBins,
    coeffs: &ReferenceCoefficients,
    include_height: bool,
    enc: &PolarEncoder,
) -> Result<Tensor> {
    check_geometry(feat_dims, rig, bins, coeffs)?;
    let (n, h, w, d) = (feat_dims[0], feat_dims[1], feat_dims[2], bins.len());
    let e = enc.dim(include_height);
    macs::add(Kind::Aggregation, (n * h * w * d * e) as u64);
    let s = coeffs.tensor().data();
    let mut out = Tensor::zeros(&[n, h, w, e]);
    exec::for_each_chunk(out.data_mut(), w * e, |cam_row, chunk| {
        let (cam, i) = (cam_row / h, cam_row % h);
        let camera = &rig.cameras()[cam];
        let mut buf = vec![0.0; e];
        for (j, acc) in chunk.chunks_mut(e).enumerate() {
            let weights = &s[((cam * h + i) * w + j) * d..][..d];
            for_each_reference(camera, i, j, bins, include_height, enc, &mut buf, |k, psi| {
                for (a, p) in acc.iter_mut().zip(psi) {
                    *a += weights[k] * p;
                }
            });
        }
    });
    Ok(out)
}

/// Per-pixel encodings with the same shape as the features.
pub fn pixel_refpe(
    feat: &FeatureVolume,
    rig: &CameraRig,
    bins: &DepthBins,
    coeffs: &ReferenceCoefficients,
    agg_mlp: &Mlp,
    include_height: bool,
    enc: &PolarEncoder,
) -> Result<EncodingSet> {
    let agg = pixel_aggregates(feat.tensor().dims(), rig, bins, coeffs, include_height, enc)?;
    let psi = agg_mlp.forward(&agg)?;
    if psi.dims() != feat.tensor().dims() {
        return shape_err(format!("encoding MLP maps to {:?}, features are {:?}", psi.dims(), feat.tensor().dims()));
    }
    EncodingSet::new(EncodingKind::Pixel, psi)
}

/// Encoding of a sparse 3D query anchor, height included.
pub fn query_refpe(anchor: Point3, mlp: &Mlp, enc: &PolarEncoder) -> Result<Vec<f64>> {
    if !(anchor.x.is_finite() && anchor.y.is_finite() && anchor.z.is_finite()) {
        return Err(Error::Invalid("query anchor must be finite".into()));
    }
    let pe = reference_pe(&to_polar(anchor), true, enc);
    Ok(mlp.forward(&Tensor::new(vec![1, pe.len()], pe)?)?.into_data())
}

/// Fourier encodings of the cell centers before the MLP, `(h_b, w_b, 6L)`.
pub fn bev_query_inputs(grid: &BevGrid, enc: &PolarEncoder) -> Tensor {
    let e = enc.dim(false);
    let mut raw = Tensor::zeros(&[grid.rows(), grid.cols(), e]);
    for r in 0..grid.cells() {
        let c = grid.centers().row(r);
        let polar = to_polar(Point3::new(c[0], c[1], 0.0));
        enc.encode_into(&polar, false, raw.row_mut(r));
    }
    raw
}

/// BEV query vectors from cell centers, without a height block.
pub fn bev_query_pe(grid: &BevGrid, mlp: &Mlp, enc: &PolarEncoder) -> Result<EncodingSet> {
    EncodingSet::new(EncodingKind::Bev, mlp.forward(&bev_query_inputs(grid, enc))?)
}

/// `sum_i t_ij * b_ij` for each column: `(cameras, width, enc_dim)`.
pub fn width_aggregates(pixel_agg: &Tensor, heights: &HeightDistribution) -> Result<Tensor> {
    let d = pixel_agg.dims();
    let (n, h, w, e) = (d[0], d[1], d[2], d[3]);
    if heights.tensor().dims() != [n, w, h] {
        return shape_err(format!("height distribution {:?} for features {:?}", heights.tensor().dims(), d));
    }
    macs::add(Kind::Aggregation, (n * w * h * e) as u64);
    let t = heights.tensor().data();
    let mut out = Tensor::zeros(&[n, w, e]);
    for cam in 0..n {
        for j in 0..w {
            let o = out.row_mut(cam * w + j);
            for i in 0..h {
                let weight = t[(cam * w + j) * h + i];
                let b = pixel_agg.row((cam * h + i) * w + j);
                o.iter_mut().zip(b).for_each(|(a, v)| *a += weight * v);
            }
        }
    }
    Ok(out)
}

/// Width-feature encodings: pixel encodings without height, blended down
/// each column by `heights`, then the MLP.
#[allow(clippy::too_many_arguments)]
pub fn width_refpe(
    feat: &FeatureVolume,
    rig: &CameraRig,
    bins: &DepthBins,
    coeffs: &ReferenceCoefficients,
    heights: &HeightDistribution,
    agg_mlp: &Mlp,
    enc: &PolarEncoder,
) -> Result<EncodingSet> {
    Ok(width_refpe_cached(feat.tensor().dims(), rig, bins, coeffs, heights, agg_mlp, enc, false)?.0)
}

pub(crate) struct WidthPeCache {
    pixel_agg: Tensor,
    mlp: Option<MlpCache>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn width_refpe_cached(
    feat_dims: &[usize],
    rig: &CameraRig,
    bins: &DepthBins,
    coeffs: &ReferenceCoefficients,
    heights: &HeightDistribution,
    agg_mlp: &Mlp,
    enc: &PolarEncoder,
    keep: bool,
) -> Result<(EncodingSet, WidthPeCache)> {
    check_distribution(heights.tensor(), "height distribution")?;
    let pixel_agg = pixel_aggregates(feat_dims, rig, bins, coeffs, false, enc)?;
    let column = width_aggregates(&pixel_agg, heights)?;
    let (psi, mlp) = if keep {
        let (p, c) = agg_mlp.forward_cached(&column)?;
        (p, Some(c))
    } else {
        (agg_mlp.forward(&column)?, None)
    };
    Ok((EncodingSet::new(EncodingKind::Width, psi)?, WidthPeCache { pixel_agg, mlp }))
}

/// Gradients of the width encodings w.r.t. the reference coefficients and
/// the height distribution; MLP parameter gradients go into `grad_mlp`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn width_refpe_backward(
    rig: &CameraRig,
    bins: &DepthBins,
    heights: &HeightDistribution,
    agg_mlp: &Mlp,
    enc: &PolarEncoder,
    cache: &WidthPeCache,
    dpsi: &Tensor,
    grad_mlp: &mut Mlp,
) -> Result<(Tensor, Tensor)> {
    let mlp_cache = cache.mlp.as_ref().ok_or_else(|| Error::Invalid("width encoding cache built without MLP state".into()))?;
    let dcol = agg_mlp.backward(mlp_cache, dpsi, grad_mlp)?;
    let dims = cache.pixel_agg.dims();
    let (n, h, w, e) = (dims[0], dims[1], dims[2], dims[3]);
    let d = bins.len();
    let t = heights.tensor().data();
    let mut dheights = Tensor::zeros(&[n, w, h]);
    let mut dcoeffs = Tensor::zeros(&[n, h, w, d]);
    let mut buf = vec![0.0; e];
    for cam in 0..n {
        for i in 0..h {
            for j in 0..w {
                let g = dcol.row(cam * w + j);
                let b = cache.pixel_agg.row((cam * h + i) * w + j);
                dheights.data_mut()[(cam * w + j) * h + i] = g.iter().zip(b).map(|(x, y)| x * y).sum();
                let weight = t[(cam * w + j) * h + i];
                let ds = &mut dcoeffs.data_mut()[((cam * h + i) * w + j) * d..][..d];
                for_each_reference(&rig.cameras()[cam], i, j, bins, false, enc, &mut buf, |k, psi| {
                    ds[k] = weight * g.iter().zip(psi).map(|(x, y)| x * y).sum::<f64>();
                });
            }
        }
    }
    Ok((dcoeffs, dheights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::make_grid;
    use nalgebra::{Matrix3, Vector3};

    fn toy_rig(n: usize) -> CameraRig {
        let cams = (0..n)
            .map(|c| {
                let k = Matrix3::new(6.0, 0.0, 3.0, 0.0, 6.0, 2.0, 0.0, 0.0, 1.0);
                let r = crate::geometry::axis_rotation(crate::geometry::Axis::Z, c as f64 * 1.3)
                    * Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
                CameraModel::new(k, r, Vector3::new(0.2 * c as f64, 0.1, 1.5)).unwrap()
            })
            .collect();
        CameraRig::new((0..n).map(|c| format!("cam{c}")).collect(), cams).unwrap()
    }

    #[test]
    fn fourier_examples() {
        let enc = FourierEncoder::new(3).unwrap();
        assert_eq!(fourier(0.0, &enc), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let a = fourier(0.3, &enc);
        let b = fourier(2.3, &enc);
        for k in 0..6 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
        let enc4 = FourierEncoder::new(4).unwrap();
        let got = fourier(0.37, &enc4);
        for k in 0..4 {
            let w = 2f64.powi(k as i32) * std::f64::consts::PI;
            assert!((got[2 * k] - (w * 0.37).sin()).abs() <= 1e-12);
            assert!((got[2 * k + 1] - (w * 0.37).cos()).abs() <= 1e-12);
        }
        assert!(FourierEncoder::new(0).is_err());
    }

    #[test]
    fn reference_pe_lengths_and_composition() {
        let enc = PolarEncoder::new(4).unwrap();
        let p = to_polar(Point3::new(3.0, 4.0, 1.0));
        assert_eq!(reference_pe(&p, false, &enc).len(), 24);
        let full = reference_pe(&p, true, &enc);
        assert_eq!(full.len(), 32);
        let f = &enc.fourier;
        let manual: Vec<f64> = [fourier(5.0 / 60.0, f), fourier(0.8, f), fourier(0.6, f), fourier(0.1, f)].concat();
        assert_eq!(full, manual);

        let origin = PolarCoord { d: 0.0, sin: 0.0, cos: 1.0, z: 1.0 };
        let o = reference_pe(&origin, true, &enc);
        assert_eq!(&o[..8], &fourier(0.0, f)[..]);
        assert_eq!(&o[8..16], &fourier(0.0, f)[..]);
        assert_eq!(&o[16..24], &fourier(1.0, f)[..]);
    }

    #[test]
    fn distributions_validate() {
        assert!(ReferenceCoefficients::new(Tensor::filled(&[1, 1, 1, 2], 0.4)).is_err());
        assert!(ReferenceCoefficients::new(Tensor::filled(&[1, 1, 1, 2], 0.5)).is_ok());
        assert!(HeightDistribution::new(Tensor::new(vec![1, 1, 2], vec![1.5, -0.5]).unwrap()).is_err());
        let mut rng = Rng::new(0, 0);
        let c = ReferenceCoefficients::from_logits(&rng.uniform_tensor(&[2, 3, 4, 5], -5.0, 5.0)).unwrap();
        assert!(c.max_normalization_error() <= 1e-12);
    }

    #[test]
    fn single_bin_ignores_coefficients() {
        let mut rng = Rng::new(1, 0);
        let rig = toy_rig(1);
        let bins = DepthBins::new(vec![4.0]).unwrap();
        let enc = PolarEncoder::new(2).unwrap();
        let feat = FeatureVolume::new(rng.uniform_tensor(&[1, 2, 3, 4], -1.0, 1.0)).unwrap();
        let mlp = Mlp::init(&[enc.dim(true), 6, 4], &mut rng);
        let coeffs = ReferenceCoefficients::one_hot(1, 2, 3, 1, 0);
        let pe = pixel_refpe(&feat, &rig, &bins, &coeffs, &mlp, true, &enc).unwrap();
        assert_eq!(pe.values().dims(), feat.tensor().dims());
        let (u, v) = pixel_center(1, 2);
        let p = to_polar(project_to_ego(&lift_pixel(u, v, &bins)[0], &rig.cameras()[0]));
        let raw = reference_pe(&p, true, &enc);
        let want = mlp.forward(&Tensor::new(vec![1, raw.len()], raw).unwrap()).unwrap();
        assert_eq!(pe.values().row(5), want.data());
    }

    #[test]
    fn aggregation_matches_loop_oracle() {
        let mut rng = Rng::new(2, 0);
        let rig = toy_rig(2);
        let bins = DepthBins::new(vec![1.0, 3.0, 7.0, 20.0]).unwrap();
        let enc = PolarEncoder::new(3).unwrap();
        let coeffs = ReferenceCoefficients::from_logits(&rng.uniform_tensor(&[2, 3, 4, 4], -2.0, 2.0)).unwrap();
        let agg = pixel_aggregates(&[2, 3, 4, 8], &rig, &bins, &coeffs, true, &enc).unwrap();
        for cam in 0..2 {
            for i in 0..3 {
                for j in 0..4 {
                    let mut want = vec![0.0; enc.dim(true)];
                    for (k, &d) in bins.values().iter().enumerate() {
                        let (u, v) = (j as f64 + 0.5, i as f64 + 0.5);
                        let p = project_to_ego(&Vector3::new(u * d, v * d, d), &rig.cameras()[cam]);
                        let pe = reference_pe(&to_polar(p), true, &enc);
                        let s = coeffs.tensor().data()[((cam * 3 + i) * 4 + j) * 4 + k];
                        for (a, b) in want.iter_mut().zip(pe) {
                            *a += s * b;
                        }
                    }
                    let got = agg.row((cam * 3 + i) * 4 + j);
                    for (a, b) in got.iter().zip(&want) {
                        assert!((a - b).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn bev_queries_drop_height_and_mirror() {
        let mut rng = Rng::new(3, 0);
        let enc = PolarEncoder::new(2).unwrap();
        let grid = make_grid(4, 4, 10.0).unwrap();
        let mlp = Mlp::init(&[enc.dim(false), 8, 8], &mut rng);
        let q = bev_query_pe(&grid, &mlp, &enc).unwrap();
        assert_eq!(q.values().dims(), &[4, 4, 8]);
        for r in 0..16 {
            let c = grid.centers().row(r);
            let raw = reference_pe(&to_polar(Point3::new(c[0], c[1], 0.0)), false, &enc);
            assert_eq!(raw.len(), 12);
            let want = mlp.forward(&Tensor::new(vec![1, 12], raw).unwrap()).unwrap();
            assert!(q.values().row(r).iter().zip(want.data()).all(|(a, b)| (a - b).abs() <= 1e-12));
        }
        let a = to_polar(Point3::new(3.0, 2.0, 0.0));
        let b = to_polar(Point3::new(3.0, -2.0, 0.0));
        assert_eq!((a.d, a.cos), (b.d, b.cos));
        assert_eq!(a.sin, -b.sin);
    }

    #[test]
    fn width_pe_single_row_and_uniform() {
        let mut rng = Rng::new(4, 0);
        let rig = toy_rig(1);
        let bins = DepthBins::new(vec![2.0, 5.0]).unwrap();
        let enc = PolarEncoder::new(2).unwrap();
        let mlp = Mlp::init(&[enc.dim(false), 5, 4], &mut rng);

        let feat = FeatureVolume::new(rng.uniform_tensor(&[1, 1, 3, 4], -1.0, 1.0)).unwrap();
        let coeffs = ReferenceCoefficients::from_logits(&rng.uniform_tensor(&[1, 1, 3, 2], -1.0, 1.0)).unwrap();
        let t = HeightDistribution::uniform(1, 3, 1);
        let pe = width_refpe(&feat, &rig, &bins, &coeffs, &t, &mlp, &enc).unwrap();
        let agg = pixel_aggregates(&[1, 1, 3, 4], &rig, &bins, &coeffs, false, &enc).unwrap();
        assert_eq!(pe.values().data(), mlp.forward(&agg).unwrap().data());

        let feat = FeatureVolume::new(rng.uniform_tensor(&[1, 4, 3, 4], -1.0, 1.0)).unwrap();
        let coeffs = ReferenceCoefficients::from_logits(&rng.uniform_tensor(&[1, 4, 3, 2], -1.0, 1.0)).unwrap();
        let t = HeightDistribution::uniform(1, 3, 4);
        let pe = width_refpe(&feat, &rig, &bins, &coeffs, &t, &mlp, &enc).unwrap();
        let agg = pixel_aggregates(&[1, 4, 3, 4], &rig, &bins, &coeffs, false, &enc).unwrap();
        let mut mean = Tensor::zeros(&[1, 3, enc.dim(false)]);
        for j in 0..3 {
            for i in 0..4 {
                let row = agg.row(i * 3 + j).to_vec();
                mean.row_mut(j).iter_mut().zip(row).for_each(|(a, b)| *a += b / 4.0);
            }
        }
        let want = mlp.forward(&mean).unwrap();
        assert!(pe.values().max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn width_pe_rejects_unnormalized_heights() {
        let mut rng = Rng::new(5, 0);
        let rig = toy_rig(1);
        let bins = DepthBins::new(vec![2.0]).unwrap();
        let enc = PolarEncoder::new(2).unwrap();
        let mlp = Mlp::init(&[enc.dim(false), 4], &mut rng);
        let feat = FeatureVolume::new(rng.uniform_tensor(&[1, 2, 2, 4], -1.0, 1.0)).unwrap();
        let coeffs = ReferenceCoefficients::one_hot(1, 2, 2, 1, 0);
        let bad = HeightDistribution(Tensor::filled(&[1, 2, 2], 0.7));
        assert!(matches!(width_refpe(&feat, &rig, &bins, &coeffs, &bad, &mlp, &enc), Err(Error::Invalid(_))));
    }

    #[test]
    fn coefficient_shape_mismatch_is_an_error() {
        let mut rng = Rng::new(6, 0);
        let rig = toy_rig(1);
        let bins = DepthBins::new(vec![2.0, 3.0]).unwrap();
        let enc = PolarEncoder::new(2).unwrap();
        let mlp = Mlp::init(&[enc.dim(true), 4], &mut rng);
        let feat = FeatureVolume::new(rng.uniform_tensor(&[1, 2, 2, 4], -1.0, 1.0)).unwrap();
        let coeffs = ReferenceCoefficients::one_hot(1, 2, 2, 3, 0);
        assert!(matches!(pixel_refpe(&feat, &rig, &bins, &coeffs, &mlp, true, &enc), Err(Error::Shape(_))));
    }

    #[test]
    fn heads_produce_distributions() {
        let mut rng = Rng::new(7, 0);
        let feat = FeatureVolume::new(rng.uniform_tensor(&[2, 3, 4, 8], -1.0, 1.0)).unwrap();
        let ch = CoefficientHead::init(8, 8, 5, &mut rng);
        let hh = HeightHead::init(8, 8, &mut rng);
        let s = ch.predict(&feat).unwrap();
        let t = hh.predict(&feat).unwrap();
        assert_eq!(s.tensor().dims(), &[2, 3, 4, 5]);
        assert_eq!(t.tensor().dims(), &[2, 4, 3]);
        assert!(s.max_normalization_error() <= NORMALIZATION_TOL);
        assert!(t.max_normalization_error() <= NORMALIZATION_TOL);
        assert!(ReferenceCoefficients::new(s.tensor().clone()).is_ok());
        assert!(HeightDistribution::new(t.tensor().clone()).is_ok());
    }
}
