//! End-to-end view transformation: image features and camera rig in, BEV
//! features out.
//!
//! Stages: height max-pool, refinement, coefficient/height heads, width
//! encodings, BEV queries, and the single decoder layer. The auxiliary head
//! hangs off the refined width features and feeds nothing back.

use crate::aux::{self, AuxHeadConfig, AuxHeadParams, AuxLogits, WidthTarget};
use crate::decoder::{decode_backward, decode_cached, make_grid, transform, BevGrid, DecoderParams, DEFAULT_RANGE_M};
use crate::encoding::{
    bev_query_inputs, width_refpe_backward, width_refpe_cached, CoefficientHead, EncodingKind, EncodingSet, HeightDistribution, HeightHead,
    PolarEncoder, ReferenceCoefficients,
};
use crate::error::{shape_err, Error, Result};
use crate::faults::{self, Fault};
use crate::geometry::{CameraRig, DepthBins};
use crate::nn::{Mlp, Parameters, ResidualMode};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::width::{
    height_maxpool, height_maxpool_backward, height_maxpool_with_argmax, refine, refine_backward, refine_cached, FeatureVolume, RefineParams,
    WidthFeatures,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuxSettings {
    pub classes: usize,
    pub hidden: usize,
    pub trunk_layers: usize,
    pub kernel: usize,
}

impl Default for AuxSettings {
    fn default() -> Self {
        AuxSettings { classes: 10, hidden: 64, trunk_layers: 2, kernel: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub cameras: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub depth_near: f64,
    pub depth_far: f64,
    pub depth_bins: usize,
    pub bev_rows: usize,
    pub bev_cols: usize,
    pub bev_range: f64,
    pub heads: usize,
    pub bands: usize,
    pub distance_scale: f64,
    pub height_scale: f64,
    pub ffn_hidden: usize,
    pub head_hidden: usize,
    pub residual: ResidualMode,
    pub aux: Option<AuxSettings>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            cameras: 6,
            height: 16,
            width: 44,
            channels: 64,
            depth_near: 1.0,
            depth_far: 60.0,
            depth_bins: 32,
            bev_rows: 32,
            bev_cols: 32,
            bev_range: DEFAULT_RANGE_M,
            heads: 4,
            bands: 8,
            distance_scale: 60.0,
            height_scale: 10.0,
            ffn_hidden: 128,
            head_hidden: 64,
            residual: ResidualMode::PostNorm,
            aux: Some(AuxSettings::default()),
        }
    }
}

impl PipelineConfig {
    /// Small dimensions for tests.
    pub fn toy() -> Self {
        PipelineConfig {
            cameras: 2,
            height: 3,
            width: 5,
            channels: 8,
            depth_bins: 4,
            bev_rows: 3,
            bev_cols: 4,
            heads: 2,
            bands: 2,
            ffn_hidden: 12,
            head_hidden: 6,
            aux: Some(AuxSettings { classes: 2, hidden: 6, trunk_layers: 1, kernel: 3 }),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.cameras,
            self.height,
            self.width,
            self.channels,
            self.depth_bins,
            self.bev_rows,
            self.bev_cols,
            self.heads,
            self.bands,
            self.ffn_hidden,
            self.head_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("all pipeline dimensions must be positive: {self:?}")));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} channels do not split into {} heads", self.channels, self.heads)));
        }
        if !(self.distance_scale > 0.0 && self.height_scale > 0.0) {
            return Err(Error::Config("encoding scales must be positive".into()));
        }
        Ok(())
    }

    pub fn depth(&self) -> Result<DepthBins> {
        DepthBins::uniform(self.depth_near, self.depth_far, self.depth_bins)
    }

    pub fn encoder(&self) -> Result<PolarEncoder> {
        let mut enc = PolarEncoder::new(self.bands)?;
        enc.distance_scale = self.distance_scale;
        enc.height_scale = self.height_scale;
        Ok(enc)
    }
}

/// All weights of the transformation plus the optional auxiliary head.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub grid: BevGrid,
    pub bins: DepthBins,
    pub encoder: PolarEncoder,
    pub refine: RefineParams,
    pub coefficient_head: CoefficientHead,
    pub height_head: HeightHead,
    pub width_pe_mlp: Mlp,
    pub bev_pe_mlp: Mlp,
    pub decoder: DecoderParams,
    pub aux: Option<AuxHeadParams>,
}

/// Rig-independent intermediate results, reusable across rigs.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    feat_dims: Vec<usize>,
    pub pooled: WidthFeatures,
    pub refined: WidthFeatures,
    /// Width features as the decoder sees them.
    keys: WidthFeatures,
    pub coefficients: ReferenceCoefficients,
    pub heights: HeightDistribution,
    pub bev_queries: EncodingSet,
    pub aux: Option<AuxLogits>,
}

/// Intermediate results of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub pooled: WidthFeatures,
    pub refined: WidthFeatures,
    pub coefficients: ReferenceCoefficients,
    pub heights: HeightDistribution,
    pub width_pe: EncodingSet,
    pub bev_queries: EncodingSet,
    /// `(h_b, w_b, c)`
    pub bev: Tensor,
    pub aux: Option<AuxLogits>,
}

impl Pipeline {
    pub fn init(config: PipelineConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let encoder = config.encoder()?;
        let e = encoder.dim(false);
        let mut refine = RefineParams::init(c, config.heads, config.ffn_hidden, rng)?;
        let coefficient_head = CoefficientHead::init(c, config.head_hidden, config.depth_bins, rng);
        let height_head = HeightHead::init(c, config.head_hidden, rng);
        let width_pe_mlp = Mlp::init(&[e, c, c], rng);
        let bev_pe_mlp = Mlp::init(&[e, c, c], rng);
        let mut decoder = DecoderParams::init(c, config.heads, config.ffn_hidden, rng)?;
        refine.residual = config.residual;
        decoder.residual = config.residual;
        let aux = match config.aux {
            Some(a) => Some(AuxHeadParams::init(
                &AuxHeadConfig {
                    channels: c,
                    hidden: a.hidden,
                    trunk_layers: a.trunk_layers,
                    kernel: a.kernel,
                    classes: a.classes,
                    bins: config.depth_bins,
                    rows: config.height,
                },
                rng,
            )?),
            None => None,
        };
        Ok(Pipeline {
            grid: make_grid(config.bev_rows, config.bev_cols, config.bev_range)?,
            bins: config.depth()?,
            encoder,
            refine,
            coefficient_head,
            height_head,
            width_pe_mlp,
            bev_pe_mlp,
            decoder,
            aux,
            config,
        })
    }

    /// Same weights with the auxiliary head removed.
    pub fn detached(&self) -> Pipeline {
        Pipeline { aux: None, ..self.clone() }
    }

    fn check_inputs(&self, rig: &CameraRig, feat: &FeatureVolume) -> Result<()> {
        let want = [self.config.cameras, self.config.height, self.config.width, self.config.channels];
        if feat.tensor().dims() != want {
            return shape_err(format!("features {:?}, pipeline expects {want:?}", feat.tensor().dims()));
        }
        if rig.len() != self.config.cameras {
            return shape_err(format!("rig has {} cameras, pipeline expects {}", rig.len(), self.config.cameras));
        }
        Ok(())
    }

    pub fn bev_queries(&self) -> Result<EncodingSet> {
        EncodingSet::new(EncodingKind::Bev, self.bev_pe_mlp.forward(&bev_query_inputs(&self.grid, &self.encoder))?)
    }

    /// Refined width features: pool, then refine.
    pub fn width_features(&self, feat: &FeatureVolume) -> Result<WidthFeatures> {
        refine(&height_maxpool(feat), feat, &self.refine)
    }

    /// Every stage that does not depend on the camera rig.
    pub fn prepare(&self, feat: &FeatureVolume) -> Result<Prepared> {
        let want = [self.config.cameras, self.config.height, self.config.width, self.config.channels];
        if feat.tensor().dims() != want {
            return shape_err(format!("features {:?}, pipeline expects {want:?}", feat.tensor().dims()));
        }
        let pooled = height_maxpool(feat);
        let refined = refine(&pooled, feat, &self.refine)?;
        let aux = match &self.aux {
            Some(p) => Some(aux::aux_forward(&refined, p)?),
            None => None,
        };
        let keys = match (&aux, faults::is_active(Fault::AuxIntoDecoder)) {
            (Some(logits), true) => leak_aux(&refined, logits)?,
            _ => refined.clone(),
        };
        Ok(Prepared {
            feat_dims: feat.tensor().dims().to_vec(),
            pooled,
            refined,
            keys,
            coefficients: self.coefficient_head.predict(feat)?,
            heights: self.height_head.predict(feat)?,
            bev_queries: self.bev_queries()?,
            aux,
        })
    }

    /// Width encodings and the decoder for one rig.
    pub fn finish(&self, prepared: &Prepared, rig: &CameraRig) -> Result<(EncodingSet, Tensor)> {
        if rig.len() != self.config.cameras {
            return shape_err(format!("rig has {} cameras, pipeline expects {}", rig.len(), self.config.cameras));
        }
        let p = prepared;
        let (width_pe, _) = width_refpe_cached(&p.feat_dims, rig, &self.bins, &p.coefficients, &p.heights, &self.width_pe_mlp, &self.encoder, false)?;
        let bev = transform(&p.keys, &width_pe, &p.bev_queries, &self.decoder)?;
        Ok((width_pe, bev))
    }

    /// Runs every stage, including the auxiliary head when attached.
    pub fn run(&self, rig: &CameraRig, feat: &FeatureVolume) -> Result<PipelineOutput> {
        self.check_inputs(rig, feat)?;
        let prepared = self.prepare(feat)?;
        let (width_pe, bev) = self.finish(&prepared, rig)?;
        let Prepared { pooled, refined, coefficients, heights, bev_queries, aux, .. } = prepared;
        Ok(PipelineOutput { pooled, refined, coefficients, heights, width_pe, bev_queries, bev, aux })
    }

    /// BEV features `(h_b, w_b, c)`.
    pub fn forward(&self, rig: &CameraRig, feat: &FeatureVolume) -> Result<Tensor> {
        Ok(self.run(rig, feat)?.bev)
    }

    /// Trains only the auxiliary head on this scene's refined width features.
    /// Returns the loss history.
    pub fn train_aux(&mut self, feat: &FeatureVolume, targets: &[WidthTarget], steps: usize, lr: f64) -> Result<Vec<f64>> {
        let width = self.width_features(feat)?;
        let head = self.aux.as_mut().ok_or_else(|| Error::Config("no auxiliary head attached".into()))?;
        aux::train(&width, head, targets, steps, lr)
    }

    /// BEV features and gradients of `sum(dbev * bev)` w.r.t. the image
    /// features and every transformation weight (the auxiliary head excluded).
    pub fn backward(&self, rig: &CameraRig, feat: &FeatureVolume, dbev: &Tensor) -> Result<(Tensor, Tensor, PipelineGrads)> {
        self.check_inputs(rig, feat)?;
        let dims = feat.tensor().dims().to_vec();
        let (n, w, c) = (dims[0], dims[2], dims[3]);

        let (pooled, argmax) = height_maxpool_with_argmax(feat);
        let (refined, refine_cache) = refine_cached(&pooled, feat, &self.refine)?;
        let (coefficients, coeff_cache) = self.coefficient_head.predict_cached(feat)?;
        let (heights, height_cache) = self.height_head.predict_cached(feat)?;
        let (width_pe, pe_cache) = width_refpe_cached(&dims, rig, &self.bins, &coefficients, &heights, &self.width_pe_mlp, &self.encoder, true)?;
        let raw_q = bev_query_inputs(&self.grid, &self.encoder);
        let (q, q_cache) = self.bev_pe_mlp.forward_cached(&raw_q)?;

        let values = refined.flat();
        let keys = values.add(&width_pe.values().as_matrix())?;
        let queries = q.as_matrix();
        let (bev, dec_cache) = decode_cached(&queries, &keys, &values, &self.decoder)?;
        let bev = bev.reshape(q.dims())?;
        if dbev.dims() != bev.dims() {
            return shape_err(format!("dbev {:?} vs bev {:?}", dbev.dims(), bev.dims()));
        }

        let mut grads = PipelineGrads::zeros_for(self);
        let (dq, dk, dv) = decode_backward(&self.decoder, &dec_cache, &dbev.as_matrix(), &mut grads.decoder)?;
        self.bev_pe_mlp.backward(&q_cache, &dq.reshape(q.dims())?, &mut grads.bev_pe_mlp)?;

        let dpsi = dk.clone().reshape(&[n, w, c])?;
        let mut drefined = dk;
        drefined.add_assign(&dv)?;
        let (dpooled, mut dfeat) = refine_backward(&self.refine, &refine_cache, &drefined.reshape(&[n, w, c])?, &mut grads.refine)?;
        dfeat.add_assign(&height_maxpool_backward(&dims, &argmax, &dpooled))?;

        let (dcoeffs, dheights) =
            width_refpe_backward(rig, &self.bins, &heights, &self.width_pe_mlp, &self.encoder, &pe_cache, &dpsi, &mut grads.width_pe_mlp)?;
        dfeat.add_assign(&self.coefficient_head.backward(&coefficients, &coeff_cache, &dcoeffs, &mut grads.coefficient_head)?)?;
        dfeat.add_assign(&self.height_head.backward(&heights, &height_cache, &dheights, &mut grads.height_head)?)?;
        Ok((bev, dfeat, grads))
    }
}

/// Gradients for every transformation weight, same layout as [`Pipeline`].
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineGrads {
    pub refine: RefineParams,
    pub coefficient_head: CoefficientHead,
    pub height_head: HeightHead,
    pub width_pe_mlp: Mlp,
    pub bev_pe_mlp: Mlp,
    pub decoder: DecoderParams,
}

impl PipelineGrads {
    fn zeros_for(p: &Pipeline) -> Self {
        PipelineGrads {
            refine: p.refine.zeros_like(),
            coefficient_head: p.coefficient_head.zeros_like(),
            height_head: p.height_head.zeros_like(),
            width_pe_mlp: p.width_pe_mlp.zeros_like(),
            bev_pe_mlp: p.bev_pe_mlp.zeros_like(),
            decoder: p.decoder.zeros_like(),
        }
    }
}

/// The transformation weights of a [`Pipeline`] (the auxiliary head is not
/// part of it).
impl Parameters for Pipeline {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.refine.visit(f);
        self.coefficient_head.visit(f);
        self.height_head.visit(f);
        self.width_pe_mlp.visit(f);
        self.bev_pe_mlp.visit(f);
        self.decoder.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.refine.visit_mut(f);
        self.coefficient_head.visit_mut(f);
        self.height_head.visit_mut(f);
        self.width_pe_mlp.visit_mut(f);
        self.bev_pe_mlp.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

impl Parameters for PipelineGrads {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.refine.visit(f);
        self.coefficient_head.visit(f);
        self.height_head.visit(f);
        self.width_pe_mlp.visit(f);
        self.bev_pe_mlp.visit(f);
        self.decoder.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.refine.visit_mut(f);
        self.coefficient_head.visit_mut(f);
        self.height_head.visit_mut(f);
        self.width_pe_mlp.visit_mut(f);
        self.bev_pe_mlp.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

/// Wiring bug used by fault injection: class logits added into the keys.
fn leak_aux(width: &WidthFeatures, logits: &AuxLogits) -> Result<WidthFeatures> {
    let mut t = width.tensor().clone();
    let k = logits.class.last_dim();
    for r in 0..t.rows() {
        let bump = logits.class.data()[r * k];
        t.row_mut(r).iter_mut().for_each(|v| *v += bump);
    }
    WidthFeatures::new(t)
}

/// True iff BEV features are bit-identical with the auxiliary head attached
/// (and evaluated) and with it removed.
pub fn removability_check(pipeline: &Pipeline, rig: &CameraRig, feat: &FeatureVolume) -> Result<bool> {
    let attached = pipeline.run(rig, feat)?;
    let detached = pipeline.detached().run(rig, feat)?;
    Ok(attached.bev.data().iter().zip(detached.bev.data()).all(|(a, b)| a.to_bits() == b.to_bits()))
}
