//! The single decoder layer mapping BEV queries and width features to BEV
//! features, and the uncompressed full-feature variant.

use crate::encoding::{EncodingKind, EncodingSet};
use crate::error::{shape_err, Error, Result};
use crate::nn::{residual, residual_backward, residual_forward, LayerNorm, LayerNormCache, Mha, MhaCache, Mlp, MlpCache, Parameters, ResidualMode};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::width::{FeatureVolume, WidthFeatures};

/// Half-extent of the default BEV grid in meters.
pub const DEFAULT_RANGE_M: f64 = 51.2;

/// Regular grid of BEV cells centered on the ego origin.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    h_b: usize,
    w_b: usize,
    range: f64,
    /// `h_b x w_b x 2` ego-frame `(x, y)` cell centers.
    centers: Tensor,
}

impl BevGrid {
    pub fn rows(&self) -> usize {
        self.h_b
    }

    pub fn cols(&self) -> usize {
        self.w_b
    }

    pub fn cells(&self) -> usize {
        self.h_b * self.w_b
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    /// Cell pitch along x (rows) and y (columns).
    pub fn spacing(&self) -> (f64, f64) {
        (2.0 * self.range / self.h_b as f64, 2.0 * self.range / self.w_b as f64)
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        let c = self.centers.row(i * self.w_b + j);
        (c[0], c[1])
    }
}

/// Row `i` sits at `x = (i + 0.5) * pitch - range`, column `j` at the
/// matching `y`; cells are stored row-major.
pub fn make_grid(h_b: usize, w_b: usize, range_m: f64) -> Result<BevGrid> {
    if h_b == 0 || w_b == 0 {
        return Err(Error::Config("BEV grid needs at least one cell per axis".into()));
    }
    if !(range_m > 0.0) || !range_m.is_finite() {
        return Err(Error::Config(format!("BEV range must be positive, got {range_m}")));
    }
    let (sx, sy) = (2.0 * range_m / h_b as f64, 2.0 * range_m / w_b as f64);
    let mut data = Vec::with_capacity(h_b * w_b * 2);
    for i in 0..h_b {
        for j in 0..w_b {
            // offset from the grid middle first, so mirrored cells are exact negatives
            data.push((i as f64 + 0.5 - h_b as f64 / 2.0) * sx);
            data.push((j as f64 + 0.5 - w_b as f64 / 2.0) * sy);
        }
    }
    Ok(BevGrid { h_b, w_b, range: range_m, centers: Tensor::new(vec![h_b, w_b, 2], data)? })
}

/// Cross-attention from BEV queries into the key/value pool followed by a
/// feed-forward network. There is no self-attention among the queries.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub attn: Mha,
    pub ffn: Mlp,
    pub norms: [LayerNorm; 2],
    pub residual: ResidualMode,
}

pub struct DecoderCache {
    attn: MhaCache,
    n1: Option<LayerNormCache>,
    ffn: MlpCache,
    n2: Option<LayerNormCache>,
}

impl DecoderCache {
    /// Attention weights `(queries, heads, keys)`.
    pub fn attention(&self) -> Tensor {
        self.attn.attention()
    }
}

impl DecoderParams {
    pub fn init(channels: usize, heads: usize, ffn_hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(DecoderParams {
            attn: Mha::init(channels, heads, rng)?,
            ffn: Mlp::init(&[channels, ffn_hidden, channels], rng),
            norms: std::array::from_fn(|_| LayerNorm::new(channels)),
            residual: ResidualMode::PostNorm,
        })
    }

    pub fn channels(&self) -> usize {
        self.attn.channels()
    }
}

impl Parameters for DecoderParams {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.attn.visit(f);
        self.ffn.visit(f);
        self.norms.iter().for_each(|n| n.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.attn.visit_mut(f);
        self.ffn.visit_mut(f);
        self.norms.iter_mut().for_each(|n| n.visit_mut(f));
    }
}

/// `U = Q + MHA(Q, K, V)`, `F = U + FFN(U)` with the configured residual layout.
/// `queries` is `q x c`, `keys`/`values` are `k x c`.
pub fn decode(queries: &Tensor, keys: &Tensor, values: &Tensor, params: &DecoderParams) -> Result<Tensor> {
    let a = params.attn.forward(queries, keys, values)?;
    let u = residual_forward(queries, &a, &params.norms[0], params.residual)?;
    let f = params.ffn.forward(&u)?;
    residual_forward(&u, &f, &params.norms[1], params.residual)
}

pub fn decode_cached(queries: &Tensor, keys: &Tensor, values: &Tensor, params: &DecoderParams) -> Result<(Tensor, DecoderCache)> {
    let (a, attn) = params.attn.forward_cached(queries, keys, values)?;
    let (u, n1) = residual(queries, &a, &params.norms[0], params.residual)?;
    let (f, ffn) = params.ffn.forward_cached(&u)?;
    let (y, n2) = residual(&u, &f, &params.norms[1], params.residual)?;
    Ok((y, DecoderCache { attn, n1, ffn, n2 }))
}

/// Returns `(dqueries, dkeys, dvalues)` and accumulates parameter gradients.
pub fn decode_backward(params: &DecoderParams, cache: &DecoderCache, dy: &Tensor, grad: &mut DecoderParams) -> Result<(Tensor, Tensor, Tensor)> {
    let [g1, g2] = &mut grad.norms;
    let d2 = residual_backward(&cache.n2, dy, &params.norms[1], g2)?;
    let mut du = d2.clone();
    du.add_assign(&params.ffn.backward(&cache.ffn, &d2, &mut grad.ffn)?)?;
    let d1 = residual_backward(&cache.n1, &du, &params.norms[0], g1)?;
    let (dq, dk, dv) = params.attn.backward(&cache.attn, &d1, &mut grad.attn)?;
    let mut dquery = d1;
    dquery.add_assign(&dq)?;
    Ok((dquery, dk, dv))
}

/// Keys `F^W + Psi^W` and values `F^W`, flattened over cameras and columns.
pub fn width_keys_values(width: &WidthFeatures, width_pe: &EncodingSet) -> Result<(Tensor, Tensor)> {
    width_pe.expect_kind(EncodingKind::Width)?;
    if width_pe.values().dims() != width.tensor().dims() {
        return shape_err(format!("width PE {:?} vs width features {:?}", width_pe.values().dims(), width.tensor().dims()));
    }
    let values = width.flat();
    let keys = values.add(&width_pe.values().as_matrix())?;
    Ok((keys, values))
}

fn bev_queries(bev_q: &EncodingSet, channels: usize) -> Result<(Tensor, Vec<usize>)> {
    bev_q.expect_kind(EncodingKind::Bev)?;
    let dims = bev_q.values().dims().to_vec();
    if dims.len() != 3 || dims[2] != channels {
        return shape_err(format!("BEV queries {dims:?} for {channels} channels"));
    }
    Ok((bev_q.values().as_matrix(), dims))
}

/// BEV features `(h_b, w_b, c)` from width features: every BEV query attends
/// to all `cameras * width` width features.
pub fn transform(width: &WidthFeatures, width_pe: &EncodingSet, bev_q: &EncodingSet, params: &DecoderParams) -> Result<Tensor> {
    let (keys, values) = width_keys_values(width, width_pe)?;
    let (q, dims) = bev_queries(bev_q, params.channels())?;
    decode(&q, &keys, &values, params)?.reshape(&dims)
}

/// Same layer with every image pixel as a key/value (`cameras * height * width`
/// entries) and the per-pixel encodings added to the keys.
pub fn transform_full_oracle(feat: &FeatureVolume, pixel_pe: &EncodingSet, bev_q: &EncodingSet, params: &DecoderParams) -> Result<Tensor> {
    pixel_pe.expect_kind(EncodingKind::Pixel)?;
    if pixel_pe.values().dims() != feat.tensor().dims() {
        return shape_err(format!("pixel PE {:?} vs features {:?}", pixel_pe.values().dims(), feat.tensor().dims()));
    }
    let values = feat.flat();
    let keys = values.add(&pixel_pe.values().as_matrix())?;
    let (q, dims) = bev_queries(bev_q, params.channels())?;
    decode(&q, &keys, &values, params)?.reshape(&dims)
}

/// Key/value count of [`transform`].
pub fn width_key_count(width: &WidthFeatures) -> usize {
    width.cameras() * width.width()
}

/// Key/value count of [`transform_full_oracle`].
pub fn full_key_count(feat: &FeatureVolume) -> usize {
    feat.cameras() * feat.height() * feat.width()
}
