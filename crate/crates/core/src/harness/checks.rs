//! Named invariant checks runnable from the command line.

use std::fmt::Write as _;
use std::time::Instant;

use glob::Pattern;
use nalgebra::Vector3;

use super::scene::demo_setup;
use super::sweep::{run_sweep, SweepConfig};
use crate::aux::{self, aux_forward, aux_loss, aux_loss_and_grad, AuxHeadConfig, AuxHeadParams};
use crate::decoder::{decode, decode_backward, decode_cached, full_key_count, make_grid, width_key_count, DecoderParams};
use crate::encoding::{fourier, pixel_refpe, query_refpe, reference_pe, FourierEncoder, PolarEncoder, ReferenceCoefficients, NORMALIZATION_TOL};
use crate::error::Error;
use crate::faults::{self, Fault};
use crate::geometry::{
    axis_rotation, lift_pixel, perturb_rig, project_to_ego, to_polar, Axis, CameraModel, DepthBins, PerturbKind, PerturbSpec, Point3,
};
use crate::gradcheck::grad_check;
use crate::harness::bench::{default_sizes, key_counts, refine_scaling};
use crate::nn::{LayerNorm, Linear, Mha, Mlp, Parameters};
use crate::pipeline::{removability_check, Pipeline, PipelineConfig};
use crate::rng::Rng;
use crate::tensor::{softmax, Tensor};
use crate::width::{height_maxpool, refine, FeatureVolume, RefineParams, WidthFeatures};

pub type CheckResult = std::result::Result<(), String>;

pub struct Check {
    pub name: &'static str,
    pub run: fn() -> CheckResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl CheckReport {
    pub fn failures(&self) -> usize {
        self.outcomes.iter().filter(|o| !o.passed).count()
    }

    pub fn all_passed(&self) -> bool {
        self.failures() == 0
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for o in &self.outcomes {
            let status = if o.passed { "PASS" } else { "FAIL" };
            let _ = write!(s, "{status} {:<32} {:>9.1} ms", o.name, o.ms);
            if !o.passed {
                let _ = write!(s, "  {}", o.detail);
            }
            s.push('\n');
        }
        let _ = writeln!(s, "{} checks, {} failed", self.outcomes.len(), self.failures());
        s
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> CheckResult {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: Error) -> String {
    e.to_string()
}

fn within(name: &str, value: f64, tol: f64) -> CheckResult {
    ensure(value <= tol, || format!("{name} = {value:e} exceeds {tol:e}"))
}

fn toy_scene(seed: u64) -> std::result::Result<(Pipeline, crate::geometry::CameraRig, FeatureVolume), String> {
    demo_setup(&PipelineConfig::toy(), seed).map_err(err)
}

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

fn softmax_rows() -> CheckResult {
    let mut rng = Rng::new(0, 0);
    let x = rng.uniform_tensor(&[6, 9], -20.0, 20.0);
    let p = softmax(&x, 1).map_err(err)?;
    let worst = (0..p.rows()).map(|r| (p.row(r).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    within("softmax row-sum error", worst, 1e-9)
}

fn attention_rows() -> CheckResult {
    let mut rng = Rng::new(1, 0);
    let m = Mha::init(8, 2, &mut rng).map_err(err)?;
    let q = rng.uniform_tensor(&[5, 8], -1.0, 1.0);
    let kv = rng.uniform_tensor(&[7, 8], -1.0, 1.0);
    let (_, cache) = m.forward_cached(&q, &kv, &kv).map_err(err)?;
    let a = cache.attention();
    let worst = (0..a.rows()).map(|r| (a.row(r).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    within("attention row-sum error", worst, 1e-9)
}

fn layer_norm_stats() -> CheckResult {
    let mut rng = Rng::new(2, 0);
    let x = rng.uniform_tensor(&[4, 16], -3.0, 5.0);
    let y = LayerNorm::new(16).forward(&x).map_err(err)?;
    for r in 0..y.rows() {
        let mean = y.row(r).iter().sum::<f64>() / 16.0;
        let var = y.row(r).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        within("normalized mean", mean.abs(), 1e-12)?;
        within("normalized variance error", (var - 1.0).abs(), 1e-3)?;
    }
    Ok(())
}

fn grad_linear() -> CheckResult {
    let mut rng = Rng::new(3, 0);
    let l = Linear::init(5, 4, &mut rng);
    let x = rng.uniform_tensor(&[3, 5], -1.0, 1.0);
    let dy = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
    let mut g = l.zeros_like();
    l.backward(&x, &dy, &mut g).map_err(err)?;
    let e = grad_check(
        |p| {
            let mut m = l.clone();
            m.assign(p);
            m.forward(&x).unwrap().dot(&dy)
        },
        &l.flatten(),
        &g.flatten(),
        H,
    )
    .map_err(err)?;
    within("linear gradient error", e, GRAD_TOL)
}

fn grad_mlp() -> CheckResult {
    let mut rng = Rng::new(4, 0);
    let m = Mlp::init(&[5, 7, 3], &mut rng);
    let x = rng.uniform_tensor(&[4, 5], -1.0, 1.0);
    let dy = rng.uniform_tensor(&[4, 3], -1.0, 1.0);
    let (_, cache) = m.forward_cached(&x).map_err(err)?;
    let mut g = m.zeros_like();
    m.backward(&cache, &dy, &mut g).map_err(err)?;
    let e = grad_check(
        |p| {
            let mut q = m.clone();
            q.assign(p);
            q.forward(&x).unwrap().dot(&dy)
        },
        &m.flatten(),
        &g.flatten(),
        H,
    )
    .map_err(err)?;
    within("mlp gradient error", e, GRAD_TOL)
}

fn grad_mha() -> CheckResult {
    let mut rng = Rng::new(5, 0);
    let m = Mha::init(8, 2, &mut rng).map_err(err)?;
    let q = rng.uniform_tensor(&[3, 8], -1.0, 1.0);
    let kv = rng.uniform_tensor(&[5, 8], -1.0, 1.0);
    let dy = rng.uniform_tensor(&[3, 8], -1.0, 1.0);
    let (_, cache) = m.forward_cached(&q, &kv, &kv).map_err(err)?;
    let mut g = m.zeros_like();
    m.backward(&cache, &dy, &mut g).map_err(err)?;
    let e = grad_check(
        |p| {
            let mut a = m.clone();
            a.assign(p);
            a.forward(&q, &kv, &kv).unwrap().dot(&dy)
        },
        &m.flatten(),
        &g.flatten(),
        H,
    )
    .map_err(err)?;
    within("attention gradient error", e, GRAD_TOL)
}

fn grad_layer_norm() -> CheckResult {
    let mut rng = Rng::new(6, 0);
    let mut n = LayerNorm::new(6);
    n.gain = rng.uniform_tensor(&[6], 0.5, 1.5);
    n.shift = rng.uniform_tensor(&[6], -0.5, 0.5);
    let x = rng.uniform_tensor(&[3, 6], -1.0, 1.0);
    let dy = rng.uniform_tensor(&[3, 6], -1.0, 1.0);
    let (_, cache) = n.forward_cached(&x).map_err(err)?;
    let mut g = n.zeros_like();
    let dx = n.backward(&cache, &dy, &mut g).map_err(err)?;
    let e = grad_check(
        |p| {
            let mut a = n.clone();
            a.assign(p);
            a.forward(&x).unwrap().dot(&dy)
        },
        &n.flatten(),
        &g.flatten(),
        H,
    )
    .map_err(err)?;
    within("layer-norm parameter gradient error", e, GRAD_TOL)?;
    let e = grad_check(|v| n.forward(&Tensor::new(vec![3, 6], v.to_vec()).unwrap()).unwrap().dot(&dy), x.data(), dx.data(), H).map_err(err)?;
    within("layer-norm input gradient error", e, GRAD_TOL)
}

fn geometry_round_trip() -> CheckResult {
    let (_, rig, _) = toy_scene(7)?;
    let bins = DepthBins::new(vec![2.0, 9.5]).map_err(err)?;
    for cam in rig.cameras() {
        for (u, v) in [(0.5, 0.5), (3.5, 2.5)] {
            for (k, p) in lift_pixel(u, v, &bins).iter().enumerate() {
                let e = project_to_ego(p, cam);
                let c = cam.rotation().transpose() * (Vector3::new(e.x, e.y, e.z) - cam.translation());
                let pix = cam.intrinsics() * c;
                let back = (pix.x / pix.z, pix.y / pix.z, c.z);
                let gap = (back.0 - u).abs().max((back.1 - v).abs()).max((back.2 - bins.values()[k]).abs());
                within("re-projection error", gap, 1e-9)?;
            }
        }
    }
    Ok(())
}

fn perturbed_rotations_orthonormal() -> CheckResult {
    let (_, rig, _) = toy_scene(8)?;
    let mut rng = Rng::new(8, 1);
    for axis in Axis::ALL {
        let spec = PerturbSpec::new(PerturbKind::Rotation, axis, 0.3).map_err(err)?;
        for cam in perturb_rig(&rig, &spec, &mut rng).cameras() {
            let r = cam.rotation();
            within("orthonormality error", (r.transpose() * r - nalgebra::Matrix3::identity()).abs().max(), 1e-12)?;
        }
    }
    Ok(())
}

fn polar_origin() -> CheckResult {
    let p = to_polar(Point3::new(0.0, 0.0, 2.0));
    ensure((p.d, p.sin, p.cos, p.z) == (0.0, 0.0, 1.0, 2.0), || format!("origin maps to {p:?}"))
}

fn polar_unit_circle() -> CheckResult {
    let mut rng = Rng::new(9, 0);
    for _ in 0..100 {
        let p = to_polar(Point3::new(rng.uniform(-50.0, 50.0), rng.uniform(-50.0, 50.0), rng.uniform(-2.0, 2.0)));
        within("sin^2 + cos^2 - 1", (p.sin * p.sin + p.cos * p.cos - 1.0).abs(), 1e-12)?;
    }
    Ok(())
}

fn polar_mirror() -> CheckResult {
    let a = to_polar(Point3::new(3.0, 2.0, 0.0));
    let b = to_polar(Point3::new(3.0, -2.0, 0.0));
    ensure(a.d == b.d && a.cos == b.cos && a.sin == -b.sin, || format!("{a:?} vs {b:?}"))
}

fn fourier_period() -> CheckResult {
    let enc = FourierEncoder::new(8).map_err(err)?;
    let (a, b) = (fourier(0.3, &enc), fourier(2.3, &enc));
    let gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    within("period-2 gap", gap, 1e-9)
}

fn normalization_coefficients() -> CheckResult {
    let (p, _, feat) = toy_scene(10)?;
    let s = p.coefficient_head.predict(&feat).map_err(err)?;
    within("coefficient normalization error", s.max_normalization_error(), NORMALIZATION_TOL)
}

fn normalization_heights() -> CheckResult {
    let (p, _, feat) = toy_scene(11)?;
    let t = p.height_head.predict(&feat).map_err(err)?;
    within("height normalization error", t.max_normalization_error(), NORMALIZATION_TOL)
}

fn query_matches_pixel() -> CheckResult {
    let mut rng = Rng::new(12, 0);
    let enc = PolarEncoder::new(8).map_err(err)?;
    let mlp = Mlp::init(&[enc.dim(true), 8, 8], &mut rng);
    let depth = 4.0;
    let bins = DepthBins::new(vec![depth]).map_err(err)?;
    for _ in 0..10 {
        let anchor = Point3::new(rng.uniform(-40.0, 40.0), rng.uniform(-40.0, 40.0), rng.uniform(-3.0, 3.0));
        let (u, v) = crate::encoding::pixel_center(0, 0);
        let t = Vector3::new(anchor.x - u * depth, anchor.y - v * depth, anchor.z - depth);
        let cam = CameraModel::new(nalgebra::Matrix3::identity(), nalgebra::Matrix3::identity(), t).map_err(err)?;
        let rig = crate::geometry::CameraRig::new(vec!["a".into()], vec![cam]).map_err(err)?;
        let feat = FeatureVolume::new(Tensor::zeros(&[1, 1, 1, 8])).map_err(err)?;
        let pe = pixel_refpe(&feat, &rig, &bins, &ReferenceCoefficients::one_hot(1, 1, 1, 1, 0), &mlp, true, &enc).map_err(err)?;
        let q = query_refpe(anchor, &mlp, &enc).map_err(err)?;
        let gap = pe.values().data().iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        within("query/pixel encoding gap", gap, 1e-12)?;
    }
    Ok(())
}

fn bev_queries_drop_height() -> CheckResult {
    let enc = PolarEncoder::new(8).map_err(err)?;
    let a = reference_pe(&to_polar(Point3::new(4.0, 1.0, 0.0)), false, &enc);
    ensure(a.len() == 6 * 8, || format!("encoding length {}", a.len()))
}

fn pe_deterministic() -> CheckResult {
    let (p, rig, feat) = toy_scene(13)?;
    let a = p.run(&rig, &feat).map_err(err)?;
    let b = p.run(&rig, &feat).map_err(err)?;
    ensure(a.width_pe == b.width_pe && a.bev_queries == b.bev_queries, || "encodings differ between runs".into())
}

fn pool_row_duplication() -> CheckResult {
    let mut rng = Rng::new(14, 0);
    let t = rng.uniform_tensor(&[2, 3, 4, 5], -1.0, 1.0);
    let base = height_maxpool(&FeatureVolume::new(t.clone()).map_err(err)?);
    // duplicate row 1 of every camera
    let (n, h, w, c) = (2, 3, 4, 5);
    let dup = Tensor::from_fn(&[n, h + 1, w, c], |i| {
        let (cam, row, rest) = (i / ((h + 1) * w * c), (i / (w * c)) % (h + 1), i % (w * c));
        let src = if row <= 1 { row } else { row - 1 };
        t.data()[(cam * h + src) * w * c + rest]
    });
    let again = height_maxpool(&FeatureVolume::new(dup).map_err(err)?);
    ensure(base == again, || "duplicating a row changed the pooled features".into())
}

fn pool_monotone() -> CheckResult {
    let mut rng = Rng::new(15, 0);
    let t = rng.uniform_tensor(&[2, 3, 4, 5], -1.0, 1.0);
    let f = |v: f64| v.exp() + 2.0 * v;
    let a = height_maxpool(&FeatureVolume::new(t.map(f)).map_err(err)?);
    let b = height_maxpool(&FeatureVolume::new(t).map_err(err)?).tensor().map(f);
    ensure(a.tensor() == &b, || "pooling does not commute with a monotone map".into())
}

fn refine_setup(seed: u64) -> std::result::Result<(RefineParams, WidthFeatures, FeatureVolume), String> {
    let mut rng = Rng::new(seed, 0);
    let p = RefineParams::init(8, 2, 16, &mut rng).map_err(err)?;
    let feat = FeatureVolume::new(rng.uniform_tensor(&[2, 4, 6, 8], -1.0, 1.0)).map_err(err)?;
    let width = height_maxpool(&feat);
    Ok((p, width, feat))
}

fn refine_camera_isolation() -> CheckResult {
    let (p, width, feat) = refine_setup(16)?;
    let base = refine(&width, &feat, &p).map_err(err)?;
    let mut t = feat.tensor().clone();
    let slab = 4 * 6 * 8;
    t.data_mut()[slab..].iter_mut().for_each(|v| *v = 0.0);
    let mut w = width.tensor().clone();
    w.data_mut()[6 * 8..].iter_mut().for_each(|v| *v = 0.0);
    let other = refine(&WidthFeatures::new(w).map_err(err)?, &FeatureVolume::new(t).map_err(err)?, &p).map_err(err)?;
    ensure(base.camera(0) == other.camera(0), || "camera 0 changed when camera 1 was zeroed".into())
}

fn refine_column_locality() -> CheckResult {
    let (p, width, feat) = refine_setup(17)?;
    let s = p.self_stage(&width.camera(0)).map_err(err)?;
    let base = p.cross_stage(&s, &feat, 0).map_err(err)?;
    let mut t = feat.tensor().clone();
    for i in 0..4 {
        t.data_mut()[(i * 6 + 2) * 8..(i * 6 + 3) * 8].iter_mut().for_each(|v| *v += 1.0);
    }
    let moved = p.cross_stage(&s, &FeatureVolume::new(t).map_err(err)?, 0).map_err(err)?;
    for j in 0..6 {
        let same = base.row(j) == moved.row(j);
        ensure(same == (j != 2), || format!("column {j} {}", if same { "unchanged" } else { "changed" }))?;
    }
    Ok(())
}

fn refine_scaling_fit() -> CheckResult {
    let fit = refine_scaling(&[8, 16, 32, 64], 16, 8, 0).map_err(err)?;
    within("self-attention exponent gap", (fit.self_exponent - 2.0).abs(), 0.1)?;
    within("cross-attention exponent gap", (fit.cross_exponent - 1.0).abs(), 0.05)
}

fn decoder_key_ratio() -> CheckResult {
    for s in default_sizes() {
        let k = key_counts(s, 6).map_err(err)?;
        ensure(k.exact_ratio() == Some(s.height), || format!("{s}: {} vs {} keys", k.full_keys, k.width_keys))?;
    }
    Ok(())
}

fn decoder_key_permutation() -> CheckResult {
    let mut rng = Rng::new(18, 0);
    let p = DecoderParams::init(8, 2, 16, &mut rng).map_err(err)?;
    let q = rng.uniform_tensor(&[5, 8], -1.0, 1.0);
    let k = rng.uniform_tensor(&[7, 8], -1.0, 1.0);
    let v = rng.uniform_tensor(&[7, 8], -1.0, 1.0);
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let shuffle = |t: &Tensor| Tensor::from_fn(&[7, 8], |i| t.row(perm[i / 8])[i % 8]);
    let a = decode(&q, &k, &v, &p).map_err(err)?;
    let b = decode(&q, &shuffle(&k), &shuffle(&v), &p).map_err(err)?;
    within("permutation gap", a.max_abs_diff(&b), 1e-12)
}

fn decoder_height_invariance() -> CheckResult {
    let (p, rig, feat) = toy_scene(19)?;
    let clean = p.forward(&rig, &feat).map_err(err)?;
    let mut rng = Rng::new(19, 1);
    let spec = PerturbSpec::new(PerturbKind::Translation, Axis::Y, 0.5).map_err(err)?;
    let moved = p.forward(&perturb_rig(&rig, &spec, &mut rng), &feat).map_err(err)?;
    ensure(clean == moved, || "shifting cameras vertically changed BEV features".into())
}

fn decoder_grad() -> CheckResult {
    let mut rng = Rng::new(20, 0);
    let p = DecoderParams::init(8, 2, 16, &mut rng).map_err(err)?;
    let q = rng.uniform_tensor(&[4, 8], -1.0, 1.0);
    let kv = rng.uniform_tensor(&[6, 8], -1.0, 1.0);
    let dy = rng.uniform_tensor(&[4, 8], -1.0, 1.0);
    let (_, cache) = decode_cached(&q, &kv, &kv, &p).map_err(err)?;
    let mut g = p.zeros_like();
    decode_backward(&p, &cache, &dy, &mut g).map_err(err)?;
    let e = grad_check(
        |x| {
            let mut a = p.clone();
            a.assign(x);
            decode(&q, &kv, &kv, &a).unwrap().dot(&dy)
        },
        &p.flatten(),
        &g.flatten(),
        H,
    )
    .map_err(err)?;
    within("decoder gradient error", e, GRAD_TOL)
}

fn decoder_grid() -> CheckResult {
    let g = make_grid(128, 128, 51.2).map_err(err)?;
    let (sx, sy) = g.spacing();
    within("spacing error", (sx - 0.8).abs().max((sy - 0.8).abs()), 1e-12)?;
    let sum: f64 = g.centers().data().iter().sum();
    within("center sum", sum.abs(), 1e-9)
}

fn aux_setup() -> std::result::Result<(AuxHeadParams, WidthFeatures, Vec<aux::WidthTarget>), String> {
    let mut rng = Rng::new(21, 0);
    let cfg = AuxHeadConfig { channels: 6, hidden: 8, trunk_layers: 2, kernel: 3, classes: 3, bins: 4, rows: 3 };
    let p = AuxHeadParams::init(&cfg, &mut rng).map_err(err)?;
    let w = WidthFeatures::new(rng.uniform_tensor(&[2, 8, 6], -1.0, 1.0)).map_err(err)?;
    let t = aux::synthetic_targets(2, 8, &p, 2, &mut rng);
    Ok((p, w, t))
}

fn aux_grad() -> CheckResult {
    let (p, w, t) = aux_setup()?;
    let (_, g) = aux_loss_and_grad(&w, &p, &t).map_err(err)?;
    let e = grad_check(
        |x| {
            let mut q = p.clone();
            q.assign(x);
            aux_loss(&aux_forward(&w, &q).unwrap(), &t).unwrap().total()
        },
        &p.flatten(),
        &g.flatten(),
        H,
    )
    .map_err(err)?;
    within("aux-head gradient error", e, GRAD_TOL)
}

fn aux_loss_nonnegative() -> CheckResult {
    let (p, w, t) = aux_setup()?;
    let l = aux_loss(&aux_forward(&w, &p).map_err(err)?, &t).map_err(err)?;
    ensure(l.class >= 0.0 && l.depth >= 0.0 && l.height >= 0.0, || format!("negative loss {l:?}"))
}

fn aux_training() -> CheckResult {
    let (mut p, w, t) = aux_setup()?;
    let h = aux::train(&w, &mut p, &t, 200, 0.5).map_err(err)?;
    ensure(h[200] <= 0.5 * h[0], || format!("loss went from {} to {}", h[0], h[200]))
}

fn aux_removability() -> CheckResult {
    let (mut p, rig, feat) = toy_scene(22)?;
    ensure(removability_check(&p, &rig, &feat).map_err(err)?, || "head changes BEV features".into())?;
    let before = p.forward(&rig, &feat).map_err(err)?;
    let mut rng = Rng::new(22, 1);
    let targets = aux::synthetic_targets(p.config.cameras, p.config.width, p.aux.as_ref().ok_or("no head")?, 1, &mut rng);
    p.train_aux(&feat, &targets, 5, 0.5).map_err(err)?;
    let after = p.forward(&rig, &feat).map_err(err)?;
    ensure(before == after, || "head-only training changed BEV features".into())?;
    ensure(removability_check(&p, &rig, &feat).map_err(err)?, || "trained head changes BEV features".into())
}

fn sweep_zero_sigma() -> CheckResult {
    let (p, rig, feat) = toy_scene(23)?;
    let cfg = SweepConfig { sigmas: vec![0.0, 0.1], trials: 2, ..SweepConfig::new(23) };
    let res = run_sweep(&p, &rig, &feat, &cfg).map_err(err)?;
    for r in &res.rows {
        let invariant = r.sigma == 0.0 || (r.kind == PerturbKind::Translation && r.axis == Axis::Y);
        if invariant {
            ensure(r.drift_mean == 0.0, || format!("{} {} sigma {}: drift {}", r.kind.name(), r.axis.name(), r.sigma, r.drift_mean))?;
        }
    }
    Ok(())
}

fn key_count_consistency() -> CheckResult {
    let (_, _, feat) = toy_scene(24)?;
    let w = height_maxpool(&feat);
    ensure(full_key_count(&feat) == feat.height() * width_key_count(&w), || "key counts disagree".into())
}

fn yaw_rotation_is_z_rotation() -> CheckResult {
    let (_, rig, _) = toy_scene(25)?;
    for cam in rig.cameras() {
        let turned = cam.rotation() * axis_rotation(Axis::Y, 0.1);
        let ego = turned * cam.rotation().transpose();
        within("non-yaw component", (ego - axis_rotation(Axis::Z, -0.1)).abs().max().min((ego - axis_rotation(Axis::Z, 0.1)).abs().max()), 1e-12)?;
    }
    Ok(())
}

pub fn registry() -> Vec<Check> {
    macro_rules! checks {
        ($($name:literal => $f:ident),* $(,)?) => { vec![$(Check { name: $name, run: $f }),*] };
    }
    checks![
        "softmax.row_sums" => softmax_rows,
        "attention.row_sums" => attention_rows,
        "layer_norm.stats" => layer_norm_stats,
        "grad.linear" => grad_linear,
        "grad.mlp" => grad_mlp,
        "grad.mha" => grad_mha,
        "grad.layer_norm" => grad_layer_norm,
        "grad.decoder" => decoder_grad,
        "grad.aux_head" => aux_grad,
        "geometry.round_trip" => geometry_round_trip,
        "geometry.perturbed_orthonormal" => perturbed_rotations_orthonormal,
        "geometry.camera_y_rotation_is_yaw" => yaw_rotation_is_z_rotation,
        "polar.origin" => polar_origin,
        "polar.unit_circle" => polar_unit_circle,
        "polar.mirror" => polar_mirror,
        "fourier.period" => fourier_period,
        "normalization.coefficients" => normalization_coefficients,
        "normalization.heights" => normalization_heights,
        "pe.query_matches_pixel" => query_matches_pixel,
        "pe.bev_no_height" => bev_queries_drop_height,
        "pe.deterministic" => pe_deterministic,
        "pool.row_duplication" => pool_row_duplication,
        "pool.monotone" => pool_monotone,
        "refine.camera_isolation" => refine_camera_isolation,
        "refine.column_locality" => refine_column_locality,
        "refine.scaling" => refine_scaling_fit,
        "decoder.grid" => decoder_grid,
        "decoder.key_ratio" => decoder_key_ratio,
        "decoder.key_count" => key_count_consistency,
        "decoder.key_permutation" => decoder_key_permutation,
        "decoder.height_invariance" => decoder_height_invariance,
        "aux.loss_nonnegative" => aux_loss_nonnegative,
        "aux.training" => aux_training,
        "aux.removability" => aux_removability,
        "sweep.invariant_rows" => sweep_zero_sigma,
    ]
}

/// Runs every registered check whose name matches `filter` (a glob), with
/// `inject` faults active. Failures and panics are recorded, not raised.
pub fn run_checks(filter: Option<&str>, inject: &[Fault]) -> crate::Result<CheckReport> {
    let pattern = filter.map(Pattern::new).transpose().map_err(|e| Error::Config(format!("bad filter: {e}")))?;
    let mut report = CheckReport::default();
    for check in registry() {
        if pattern.as_ref().is_some_and(|p| !p.matches(check.name)) {
            continue;
        }
        let start = Instant::now();
        let outcome = faults::with_faults(inject, || std::panic::catch_unwind(check.run));
        let (passed, detail) = match outcome {
            Ok(Ok(())) => (true, String::new()),
            Ok(Err(e)) => (false, e),
            Err(p) => (
                false,
                format!(
                    "panicked: {}",
                    p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
                ),
            ),
        };
        report.outcomes.push(CheckOutcome { name: check.name, passed, detail, ms: start.elapsed().as_secs_f64() * 1e3 });
    }
    Ok(report)
}
