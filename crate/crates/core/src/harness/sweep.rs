use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::streams;
use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{perturb_rig, Axis, CameraRig, PerturbKind, PerturbSpec, TranslationFrame};
use crate::pipeline::Pipeline;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::width::FeatureVolume;

pub const DEFAULT_SIGMAS: [f64; 6] = [0.0, 0.01, 0.02, 0.05, 0.1, 0.2];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub kinds: Vec<PerturbKind>,
    pub axes: Vec<Axis>,
    pub sigmas: Vec<f64>,
    pub trials: usize,
    pub frame: TranslationFrame,
    pub seed: u64,
}

impl SweepConfig {
    pub fn new(seed: u64) -> Self {
        SweepConfig {
            kinds: vec![PerturbKind::Rotation, PerturbKind::Translation],
            axes: Axis::ALL.to_vec(),
            sigmas: DEFAULT_SIGMAS.to_vec(),
            trials: 16,
            frame: TranslationFrame::Camera,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("sweep needs at least one trial".into()));
        }
        if self.sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Config("sigmas must be finite and >= 0".into()));
        }
        if self.sigmas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("sigmas must be strictly ascending".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    #[serde(serialize_with = "ser_kind")]
    pub kind: PerturbKind,
    #[serde(serialize_with = "ser_axis")]
    pub axis: Axis,
    pub sigma: f64,
    pub drift_mean: f64,
    pub drift_std: f64,
    pub trials: usize,
}

fn ser_kind<S: serde::Serializer>(k: &PerturbKind, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(k.name())
}

fn ser_axis<S: serde::Serializer>(a: &Axis, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(a.name())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn series(&self, kind: PerturbKind, axis: Axis) -> Vec<&SweepRow> {
        self.rows.iter().filter(|r| r.kind == kind && r.axis == axis).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// `||perturbed - clean||_2 / ||clean||_2`
pub fn drift(clean: &Tensor, perturbed: &Tensor) -> Result<f64> {
    let norm = clean.norm();
    if norm == 0.0 {
        return Err(Error::Invalid("clean BEV features are all zero".into()));
    }
    Ok(perturbed.sub(clean)?.norm() / norm)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Perturbs every camera independently per trial and records BEV drift.
/// Rig-independent stages run once.
///
/// Trial `t` of a `(kind, axis)` series draws its noise from the same stream
/// at every sigma, so the series differ only in noise scale.
pub fn run_sweep(pipeline: &Pipeline, rig: &CameraRig, feat: &FeatureVolume, cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let prepared = pipeline.prepare(feat)?;
    let clean = pipeline.finish(&prepared, rig)?.1;
    let mut tasks = Vec::new();
    for (ki, &kind) in cfg.kinds.iter().enumerate() {
        for &axis in &cfg.axes {
            let series = (ki * Axis::ALL.len() + axis as usize) as u64;
            for &sigma in &cfg.sigmas {
                for t in 0..cfg.trials {
                    tasks.push((kind, axis, sigma, series * cfg.trials as u64 + t as u64));
                }
            }
        }
    }
    let drifts = exec::map_range(tasks.len(), |i| {
        let (kind, axis, sigma, stream) = tasks[i];
        let spec = PerturbSpec::new(kind, axis, sigma)?.with_frame(cfg.frame);
        let mut rng = Rng::new(cfg.seed, streams::SWEEP + stream);
        let perturbed = perturb_rig(rig, &spec, &mut rng);
        drift(&clean, &pipeline.finish(&prepared, &perturbed)?.1)
    });
    let drifts = drifts.into_iter().collect::<Result<Vec<_>>>()?;
    let rows = drifts
        .chunks(cfg.trials)
        .zip(tasks.chunks(cfg.trials))
        .map(|(d, t)| {
            let (drift_mean, drift_std) = mean_std(d);
            let (kind, axis, sigma, _) = t[0];
            SweepRow { kind, axis, sigma, drift_mean, drift_std, trials: cfg.trials }
        })
        .collect();
    Ok(SweepResult { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Exec;
    use crate::harness::scene::demo_setup;
    use crate::pipeline::PipelineConfig;

    fn small() -> PipelineConfig {
        PipelineConfig {
            cameras: 3,
            height: 4,
            width: 8,
            channels: 8,
            depth_bins: 4,
            bev_rows: 4,
            bev_cols: 4,
            heads: 2,
            bands: 4,
            ffn_hidden: 16,
            head_hidden: 8,
            aux: None,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn stats() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_sigma_and_height_shift_have_no_drift() {
        let (p, rig, feat) = demo_setup(&small(), 1).unwrap();
        let cfg = SweepConfig { trials: 2, ..SweepConfig::new(1) };
        let res = run_sweep(&p, &rig, &feat, &cfg).unwrap();
        assert_eq!(res.rows.len(), 2 * 3 * 6);
        for r in &res.rows {
            assert!(r.drift_mean >= 0.0);
            if r.sigma == 0.0 || (r.kind == PerturbKind::Translation && r.axis == Axis::Y) {
                assert_eq!(r.drift_mean, 0.0, "{r:?}");
            } else {
                assert!(r.drift_mean > 0.0, "{r:?}");
            }
        }
    }

    #[test]
    fn csv_layout_and_parallel_agreement() {
        let (p, rig, feat) = demo_setup(&small(), 2).unwrap();
        let cfg = SweepConfig { kinds: vec![PerturbKind::Rotation], axes: vec![Axis::Y], sigmas: vec![0.0, 0.1], trials: 3, ..SweepConfig::new(2) };
        let a = exec::scoped(Exec::Parallel, || run_sweep(&p, &rig, &feat, &cfg).unwrap());
        let b = exec::scoped(Exec::Sequential, || run_sweep(&p, &rig, &feat, &cfg).unwrap());
        let csv = a.to_csv().unwrap();
        assert_eq!(csv, b.to_csv().unwrap());
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("kind,axis,sigma,drift_mean,drift_std,trials"));
        assert!(lines.next().unwrap().starts_with("rot,y,0.0,0.0,0.0,3"));
    }

    #[test]
    fn rejects_bad_config() {
        let (p, rig, feat) = demo_setup(&small(), 3).unwrap();
        for cfg in [
            SweepConfig { trials: 0, ..SweepConfig::new(0) },
            SweepConfig { sigmas: vec![0.1, 0.05], ..SweepConfig::new(0) },
            SweepConfig { sigmas: vec![-1.0], ..SweepConfig::new(0) },
        ] {
            assert!(run_sweep(&p, &rig, &feat, &cfg).is_err());
        }
    }
}
