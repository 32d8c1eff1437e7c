//! Training-only head over width features: per-column classification,
//! categorical depth and height-row prediction. Nothing downstream reads
//! its outputs, so dropping it at inference changes nothing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv1d, Parameters};
use crate::rng::Rng;
use crate::tensor::{softmax_in_place, Tensor};
use crate::width::WidthFeatures;

/// A labelled object seen by one camera over a range of feature columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WidthTarget {
    pub camera: usize,
    /// Inclusive column range `[lo, hi]`.
    pub span: [usize; 2],
    pub depth_bin: usize,
    pub height_row: usize,
    pub class: usize,
}

impl WidthTarget {
    pub fn center(&self) -> f64 {
        (self.span[0] + self.span[1]) as f64 / 2.0
    }

    pub fn contains(&self, col: usize) -> bool {
        (self.span[0]..=self.span[1]).contains(&col)
    }

    pub fn validate(&self, params: &AuxHeadParams, cameras: usize, width: usize) -> Result<()> {
        let bad = |what: String| Err(Error::Invalid(format!("target {self:?}: {what}")));
        if self.camera >= cameras {
            return bad(format!("camera out of 0..{cameras}"));
        }
        if self.span[0] > self.span[1] || self.span[1] >= width {
            return bad(format!("span outside 0..{width}"));
        }
        if self.depth_bin >= params.bins() {
            return bad(format!("depth bin out of 0..{}", params.bins()));
        }
        if self.height_row >= params.rows() {
            return bad(format!("height row out of 0..{}", params.rows()));
        }
        if self.class >= params.classes() {
            return bad(format!("class out of 0..{}", params.classes()));
        }
        Ok(())
    }
}

pub fn targets_from_json(s: &str) -> Result<Vec<WidthTarget>> {
    Ok(serde_json::from_str(s)?)
}

pub fn load_targets(path: impl AsRef<Path>) -> Result<Vec<WidthTarget>> {
    targets_from_json(&std::fs::read_to_string(path)?)
}

/// Conv1d trunk with ReLU after every layer, then three pointwise branches.
/// The class branch has one extra output, the last, for background.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxHeadParams {
    pub trunk: Vec<Conv1d>,
    pub class: Conv1d,
    pub depth: Conv1d,
    pub height: Conv1d,
}

/// Shape of an [`AuxHeadParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuxHeadConfig {
    pub channels: usize,
    pub hidden: usize,
    pub trunk_layers: usize,
    pub kernel: usize,
    pub classes: usize,
    pub bins: usize,
    pub rows: usize,
}

impl AuxHeadParams {
    pub fn init(cfg: &AuxHeadConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.kernel.is_multiple_of(2) || cfg.trunk_layers == 0 || cfg.classes == 0 || cfg.bins == 0 || cfg.rows == 0 {
            return Err(Error::Config(format!("invalid aux head config {cfg:?}")));
        }
        let trunk =
            (0..cfg.trunk_layers).map(|l| Conv1d::init(if l == 0 { cfg.channels } else { cfg.hidden }, cfg.hidden, cfg.kernel, rng)).collect();
        Ok(AuxHeadParams {
            trunk,
            class: Conv1d::init(cfg.hidden, cfg.classes + 1, 1, rng),
            depth: Conv1d::init(cfg.hidden, cfg.bins, 1, rng),
            height: Conv1d::init(cfg.hidden, cfg.rows, 1, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.trunk[0].in_dim()
    }

    /// Foreground classes; the background index equals this value.
    pub fn classes(&self) -> usize {
        self.class.out_dim() - 1
    }

    pub fn background(&self) -> usize {
        self.classes()
    }

    pub fn bins(&self) -> usize {
        self.depth.out_dim()
    }

    pub fn rows(&self) -> usize {
        self.height.out_dim()
    }
}

impl Parameters for AuxHeadParams {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.trunk.iter().for_each(|c| c.visit(f));
        self.class.visit(f);
        self.depth.visit(f);
        self.height.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.trunk.iter_mut().for_each(|c| c.visit_mut(f));
        self.class.visit_mut(f);
        self.depth.visit_mut(f);
        self.height.visit_mut(f);
    }
}

/// Per-column logits, each `(cameras, width, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxLogits {
    pub class: Tensor,
    pub depth: Tensor,
    pub height: Tensor,
}

struct CameraCache {
    /// Trunk inputs, one per layer, plus the final activation.
    acts: Vec<Tensor>,
    /// Pre-ReLU outputs of each trunk layer.
    pre: Vec<Tensor>,
}

fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

fn forward_camera(x: Tensor, params: &AuxHeadParams) -> Result<([Tensor; 3], CameraCache)> {
    let mut acts = vec![x];
    let mut pre = Vec::with_capacity(params.trunk.len());
    for conv in &params.trunk {
        let z = conv.forward(acts.last().expect("trunk input"))?;
        acts.push(relu(&z));
        pre.push(z);
    }
    let h = acts.last().expect("trunk output");
    let out = [params.class.forward(h)?, params.depth.forward(h)?, params.height.forward(h)?];
    Ok((out, CameraCache { acts, pre }))
}

fn stack(parts: Vec<Tensor>) -> Result<Tensor> {
    let mut dims = vec![parts.len()];
    dims.extend_from_slice(parts[0].dims());
    Tensor::new(dims, parts.into_iter().flat_map(Tensor::into_data).collect())
}

fn aux_forward_cached(width: &WidthFeatures, params: &AuxHeadParams) -> Result<(AuxLogits, Vec<CameraCache>)> {
    if width.channels() != params.channels() {
        return shape_err(format!("aux head expects {} channels, got {}", params.channels(), width.channels()));
    }
    let mut parts: [Vec<Tensor>; 3] = Default::default();
    let mut caches = Vec::with_capacity(width.cameras());
    for cam in 0..width.cameras() {
        let (out, cache) = forward_camera(width.camera(cam), params)?;
        for (dst, t) in parts.iter_mut().zip(out) {
            dst.push(t);
        }
        caches.push(cache);
    }
    let [c, d, h] = parts;
    Ok((AuxLogits { class: stack(c)?, depth: stack(d)?, height: stack(h)? }, caches))
}

pub fn aux_forward(width: &WidthFeatures, params: &AuxHeadParams) -> Result<AuxLogits> {
    Ok(aux_forward_cached(width, params)?.0)
}

/// Summed cross-entropy over columns, split by branch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AuxLoss {
    pub class: f64,
    pub depth: f64,
    pub height: f64,
}

impl AuxLoss {
    pub fn total(&self) -> f64 {
        self.class + self.depth + self.height
    }
}

/// Target index per `(camera, column)`; overlapping spans go to the target
/// with the nearest center, ties to the lower index.
pub fn assign_columns(cameras: usize, width: usize, targets: &[WidthTarget]) -> Vec<Option<usize>> {
    let mut out = vec![None; cameras * width];
    for cam in 0..cameras {
        for col in 0..width {
            let mut best: Option<(f64, usize)> = None;
            for (t_idx, t) in targets.iter().enumerate() {
                if t.camera != cam || !t.contains(col) {
                    continue;
                }
                let dist = (col as f64 - t.center()).abs();
                if best.is_none_or(|(d, _)| dist < d) {
                    best = Some((dist, t_idx));
                }
            }
            out[cam * width + col] = best.map(|(_, t)| t);
        }
    }
    out
}

/// `-log softmax(z)[label]`, with `dz += softmax(z) - onehot`.
fn cross_entropy(z: &[f64], label: usize, dz: &mut [f64]) -> f64 {
    let mut p = z.to_vec();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    softmax_in_place(&mut p);
    for (d, (k, pk)) in dz.iter_mut().zip(p.iter().enumerate()) {
        *d += pk - if k == label { 1.0 } else { 0.0 };
    }
    lse - z[label]
}

fn check_logits(logits: &AuxLogits) -> Result<(usize, usize)> {
    let d = logits.class.dims();
    if d.len() != 3 || logits.depth.dims()[..2] != d[..2] || logits.height.dims()[..2] != d[..2] {
        return shape_err("aux logits must share (cameras, width)".to_string());
    }
    Ok((d[0], d[1]))
}

/// Loss and its gradient w.r.t. the logits.
pub fn aux_loss_grad(logits: &AuxLogits, targets: &[WidthTarget]) -> Result<(AuxLoss, AuxLogits)> {
    let (n, w) = check_logits(logits)?;
    let background = logits.class.last_dim() - 1;
    for t in targets {
        let ok = t.camera < n
            && t.span[0] <= t.span[1]
            && t.span[1] < w
            && t.class < background
            && t.depth_bin < logits.depth.last_dim()
            && t.height_row < logits.height.last_dim();
        if !ok {
            return Err(Error::Invalid(format!("target {t:?} does not fit logits")));
        }
    }
    let assignment = assign_columns(n, w, targets);
    let mut loss = AuxLoss::default();
    let mut grad = AuxLogits {
        class: Tensor::zeros(logits.class.dims()),
        depth: Tensor::zeros(logits.depth.dims()),
        height: Tensor::zeros(logits.height.dims()),
    };
    for (r, a) in assignment.iter().enumerate() {
        match a {
            None => loss.class += cross_entropy(logits.class.row(r), background, grad.class.row_mut(r)),
            Some(t) => {
                let t = &targets[*t];
                loss.class += cross_entropy(logits.class.row(r), t.class, grad.class.row_mut(r));
                loss.depth += cross_entropy(logits.depth.row(r), t.depth_bin, grad.depth.row_mut(r));
                loss.height += cross_entropy(logits.height.row(r), t.height_row, grad.height.row_mut(r));
            }
        }
    }
    Ok((loss, grad))
}

pub fn aux_loss(logits: &AuxLogits, targets: &[WidthTarget]) -> Result<AuxLoss> {
    Ok(aux_loss_grad(logits, targets)?.0)
}

/// Loss and head-parameter gradient. Width features are treated as
/// constants: no gradient leaves the head.
pub fn aux_loss_and_grad(width: &WidthFeatures, params: &AuxHeadParams, targets: &[WidthTarget]) -> Result<(AuxLoss, AuxHeadParams)> {
    let (logits, caches) = aux_forward_cached(width, params)?;
    let (loss, dlogits) = aux_loss_grad(&logits, targets)?;
    let mut grad = params.zeros_like();
    for (cam, cache) in caches.iter().enumerate() {
        let h = cache.acts.last().expect("trunk output");
        let mut dh = params.class.backward(h, &camera_slice(&dlogits.class, cam), &mut grad.class)?;
        dh.add_assign(&params.depth.backward(h, &camera_slice(&dlogits.depth, cam), &mut grad.depth)?)?;
        dh.add_assign(&params.height.backward(h, &camera_slice(&dlogits.height, cam), &mut grad.height)?)?;
        for l in (0..params.trunk.len()).rev() {
            let dz =
                Tensor::new(dh.dims().to_vec(), dh.data().iter().zip(cache.pre[l].data()).map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }).collect())?;
            dh = params.trunk[l].backward(&cache.acts[l], &dz, &mut grad.trunk[l])?;
        }
    }
    Ok((loss, grad))
}

fn camera_slice(t: &Tensor, cam: usize) -> Tensor {
    let (w, k) = (t.dims()[1], t.dims()[2]);
    Tensor::new(vec![w, k], t.data()[cam * w * k..(cam + 1) * w * k].to_vec()).expect("slice dims")
}

/// One full-batch gradient step on the head only. Returns the loss before
/// the step. The step is scaled by the number of columns.
pub fn train_step(width: &WidthFeatures, params: &mut AuxHeadParams, targets: &[WidthTarget], lr: f64) -> Result<AuxLoss> {
    let (loss, grad) = aux_loss_and_grad(width, params, targets)?;
    let columns = (width.cameras() * width.width()) as f64;
    params.add_scaled(-lr / columns, &grad.flatten());
    Ok(loss)
}

/// Runs `steps` training steps and returns the total loss before each step
/// followed by the final loss.
pub fn train(width: &WidthFeatures, params: &mut AuxHeadParams, targets: &[WidthTarget], steps: usize, lr: f64) -> Result<Vec<f64>> {
    for t in targets {
        t.validate(params, width.cameras(), width.width())?;
    }
    let mut history = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        history.push(train_step(width, params, targets, lr)?.total());
    }
    history.push(aux_loss(&aux_forward(width, params)?, targets)?.total());
    Ok(history)
}

/// Random non-overlapping-in-expectation targets for a toy scene.
pub fn synthetic_targets(cameras: usize, width: usize, params: &AuxHeadParams, per_camera: usize, rng: &mut Rng) -> Vec<WidthTarget> {
    let mut out = Vec::new();
    for cam in 0..cameras {
        for _ in 0..per_camera {
            let lo = rng.index(width);
            let hi = (lo + rng.index(4)).min(width - 1);
            out.push(WidthTarget {
                camera: cam,
                span: [lo, hi],
                depth_bin: rng.index(params.bins()),
                height_row: rng.index(params.rows()),
                class: rng.index(params.classes()),
            });
        }
    }
    out
}
