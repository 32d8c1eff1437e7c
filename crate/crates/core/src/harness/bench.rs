use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use super::scene::{gen_scene, SceneSpec};
use super::streams;
use crate::cost::{decoder_cost, fit_exponent, refine_cost};
use crate::decoder::{full_key_count, transform, transform_full_oracle, width_key_count};
use crate::encoding::{pixel_refpe, width_refpe};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::macs::{measure, MacCount};
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::rng::Rng;
use crate::width::{height_maxpool, refine, FeatureVolume, RefineParams, WidthFeatures};

/// Feature height/width/channels and BEV side length of one setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchSize {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub bev: usize,
}

impl FromStr for BenchSize {
    type Err = Error;

    /// `HxWxC` or `HxWxCxHB`; the BEV side defaults to 32.
    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("bad size '{s}': {e}")))?;
        let size = match parts[..] {
            [height, width, channels] => BenchSize { height, width, channels, bev: 32 },
            [height, width, channels, bev] => BenchSize { height, width, channels, bev },
            _ => return Err(Error::Config(format!("size '{s}' must be HxWxC or HxWxCxHB"))),
        };
        if [size.height, size.width, size.channels, size.bev].contains(&0) {
            return Err(Error::Config(format!("size '{s}' has a zero dimension")));
        }
        Ok(size)
    }
}

impl fmt::Display for BenchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.height, self.width, self.channels, self.bev)
    }
}

/// Feature-map sizes of 256x704, 384x1056 and 512x1408 inputs at stride 16,
/// the last one also at doubled channels.
pub fn default_sizes() -> Vec<BenchSize> {
    ["16x44x64", "24x66x64", "32x88x64", "32x88x128"].iter().map(|s| s.parse().expect("valid size")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub sizes: Vec<BenchSize>,
    pub repeats: usize,
    pub cameras: usize,
    pub seed: u64,
    /// Also run the decoder over every pixel.
    pub full: bool,
}

impl BenchConfig {
    pub fn new(seed: u64) -> Self {
        BenchConfig { sizes: default_sizes(), repeats: 3, cameras: 6, seed, full: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub stage: &'static str,
    pub h_i: usize,
    pub w_i: usize,
    pub c: usize,
    pub h_b: usize,
    pub macs: u64,
    /// Advisory only.
    pub ms_median: f64,
}

/// Attention key counts of the width decoder and of the full-pixel decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyCounts {
    pub size: BenchSize,
    pub width_keys: usize,
    pub full_keys: usize,
}

impl KeyCounts {
    /// `Some(ratio)` when the full count is an exact multiple.
    pub fn exact_ratio(&self) -> Option<usize> {
        self.full_keys.is_multiple_of(self.width_keys).then_some(self.full_keys / self.width_keys)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub keys: Vec<KeyCounts>,
}

impl BenchResult {
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

/// Pipeline configuration for one bench setting: FFN width 2C, head width C.
pub fn sized_config(size: BenchSize, cameras: usize) -> PipelineConfig {
    PipelineConfig {
        cameras,
        height: size.height,
        width: size.width,
        channels: size.channels,
        bev_rows: size.bev,
        bev_cols: size.bev,
        ffn_hidden: 2 * size.channels,
        head_hidden: size.channels,
        aux: None,
        ..PipelineConfig::default()
    }
}

/// Key counts of a setting, read off the tensors the two decoders consume.
pub fn key_counts(size: BenchSize, cameras: usize) -> Result<KeyCounts> {
    let feat = FeatureVolume::new(crate::tensor::Tensor::zeros(&[cameras, size.height, size.width, size.channels]))?;
    let width = height_maxpool(&feat);
    Ok(KeyCounts { size, width_keys: width_key_count(&width), full_keys: full_key_count(&feat) })
}

fn timed<R>(repeats: usize, mut f: impl FnMut() -> Result<R>) -> Result<(R, MacCount, f64)> {
    let (out, macs) = measure(&mut f);
    let out = out?;
    let mut ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        exec::scoped(Exec::Sequential, &mut f)?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    ms.sort_by(f64::total_cmp);
    Ok((out, macs, ms[ms.len() / 2]))
}

fn check_closed_form(stage: &str, size: BenchSize, measured: u64, expected: u64) -> Result<()> {
    if measured != expected {
        return Err(Error::Invalid(format!("{stage} at {size}: counted {measured} MACs, closed form {expected}")));
    }
    Ok(())
}

/// Times each stage single-threaded and records exact MAC counts. Refine and
/// decoder counts are checked against their closed forms.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchResult> {
    if cfg.repeats < 3 {
        return Err(Error::Config(format!("bench needs at least 3 repeats, got {}", cfg.repeats)));
    }
    let mut result = BenchResult::default();
    for &size in &cfg.sizes {
        let config = sized_config(size, cfg.cameras);
        let pipeline = Pipeline::init(config.clone(), &mut Rng::new(cfg.seed, streams::WEIGHTS))?;
        let (rig, feat) = gen_scene(&SceneSpec::from_config(&config, cfg.seed))?;
        let (n, c, f) = (cfg.cameras as u64, size.channels as u64, config.ffn_hidden as u64);
        let queries = (size.bev * size.bev) as u64;
        let mut row = |stage: &'static str, macs: MacCount, ms: f64| {
            result.rows.push(BenchRow {
                stage,
                h_i: size.height,
                w_i: size.width,
                c: size.channels,
                h_b: size.bev,
                macs: macs.total(),
                ms_median: ms,
            });
        };

        let (pooled, m, ms) = timed(cfg.repeats, || Ok(height_maxpool(&feat)))?;
        row("pool", m, ms);

        let (refined, m, ms) = timed(cfg.repeats, || refine(&pooled, &feat, &pipeline.refine))?;
        let rc = refine_cost(size.width as u64, size.height as u64, c, f);
        check_closed_form("refine", size, m.total(), n * rc.total())?;
        row("refine", m, ms);

        let ((width_pe, bev_q), m, ms) = timed(cfg.repeats, || {
            let s = pipeline.coefficient_head.predict(&feat)?;
            let t = pipeline.height_head.predict(&feat)?;
            let pe = width_refpe(&feat, &rig, &pipeline.bins, &s, &t, &pipeline.width_pe_mlp, &pipeline.encoder)?;
            Ok((pe, pipeline.bev_queries()?))
        })?;
        row("pe", m, ms);

        let (_, m, ms) = timed(cfg.repeats, || transform(&refined, &width_pe, &bev_q, &pipeline.decoder))?;
        let width_keys = width_key_count(&refined);
        check_closed_form("decoder", size, m.total(), decoder_cost(queries, width_keys as u64, c, f).total())?;
        row("decoder", m, ms);

        let full_keys = full_key_count(&feat);
        if cfg.full {
            let s = pipeline.coefficient_head.predict(&feat)?;
            let pixel_pe = pixel_refpe(&feat, &rig, &pipeline.bins, &s, &pipeline.width_pe_mlp, false, &pipeline.encoder)?;
            let (_, m, ms) = timed(cfg.repeats, || transform_full_oracle(&feat, &pixel_pe, &bev_q, &pipeline.decoder))?;
            check_closed_form("decoder_full", size, m.total(), decoder_cost(queries, full_keys as u64, c, f).total())?;
            row("decoder_full", m, ms);
        }
        result.keys.push(KeyCounts { size, width_keys, full_keys });
    }
    Ok(result)
}

/// Log-log exponents of refinement MACs: self-attention against the column
/// count and cross-attention against the row count.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingFit {
    pub points: Vec<usize>,
    /// Score and weighted-sum MACs of the self stage, by column count.
    pub self_attention: Vec<u64>,
    /// Score and weighted-sum MACs of the cross stage, by row count.
    pub cross_attention: Vec<u64>,
    pub self_exponent: f64,
    pub cross_exponent: f64,
}

/// Measures the two attention stages of one camera, sweeping the column
/// count at `fixed` rows and the row count at `fixed` columns.
pub fn refine_scaling(points: &[usize], fixed: usize, channels: usize, seed: u64) -> Result<ScalingFit> {
    let mut rng = Rng::new(seed, streams::WEIGHTS);
    let params = RefineParams::init(channels, 4.min(channels), 2 * channels, &mut rng)?;
    let stage_macs = |h: usize, w: usize| -> Result<(MacCount, MacCount)> {
        let mut rng = Rng::new(seed, streams::FEATURES);
        let feat = FeatureVolume::new(rng.uniform_tensor(&[1, h, w, channels], -1.0, 1.0))?;
        let width: WidthFeatures = height_maxpool(&feat);
        let (s, self_m) = measure(|| params.self_stage(&width.camera(0)));
        let (_, cross_m) = measure(|| params.cross_stage(&s?, &feat, 0));
        Ok((self_m, cross_m))
    };
    let mut self_attention = Vec::new();
    let mut cross_attention = Vec::new();
    for &p in points {
        self_attention.push(stage_macs(fixed, p)?.0.attention);
        cross_attention.push(stage_macs(p, fixed)?.1.attention);
    }
    let xs: Vec<f64> = points.iter().map(|&p| p as f64).collect();
    let to_f = |v: &[u64]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    Ok(ScalingFit {
        self_exponent: fit_exponent(&xs, &to_f(&self_attention))?,
        cross_exponent: fit_exponent(&xs, &to_f(&cross_attention))?,
        points: points.to_vec(),
        self_attention,
        cross_attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_parsing() {
        let s: BenchSize = "16x44x64".parse().unwrap();
        assert_eq!(s, BenchSize { height: 16, width: 44, channels: 64, bev: 32 });
        assert_eq!("2x3x4x5".parse::<BenchSize>().unwrap().bev, 5);
        assert_eq!(s.to_string(), "16x44x64x32");
        for bad in ["16x44", "0x4x4", "ax4x4", "1x2x3x4x5"] {
            assert!(bad.parse::<BenchSize>().is_err(), "{bad}");
        }
    }

    #[test]
    fn small_bench() {
        let cfg = BenchConfig { sizes: vec!["3x5x8x4".parse().unwrap(), "3x5x16x4".parse().unwrap()], repeats: 3, cameras: 2, seed: 1, full: true };
        let res = run_bench(&cfg).unwrap();
        let stages: Vec<_> = res.rows.iter().map(|r| r.stage).take(5).collect();
        assert_eq!(stages, ["pool", "refine", "pe", "decoder", "decoder_full"]);
        assert_eq!(res.rows[0].macs, 0);
        for k in &res.keys {
            assert_eq!(k.exact_ratio(), Some(3));
        }
        let dec: Vec<u64> = res.rows.iter().filter(|r| r.stage == "decoder").map(|r| r.macs).collect();
        let want = |c: u64| decoder_cost(16, 10, c, 2 * c).total();
        assert_eq!(dec[1] * want(8), dec[0] * want(16));
        let csv = res.to_csv().unwrap();
        assert!(csv.starts_with("stage,h_i,w_i,c,h_b,macs,ms_median\n"));
        assert!(run_bench(&BenchConfig { repeats: 2, ..cfg }).is_err());
    }

    #[test]
    fn key_counts_match_height() {
        for s in default_sizes() {
            assert_eq!(key_counts(s, 6).unwrap().exact_ratio(), Some(s.height));
        }
    }

    #[test]
    fn scaling_exponents() {
        let fit = refine_scaling(&[8, 16, 32], 8, 8, 0).unwrap();
        assert!((fit.self_exponent - 2.0).abs() < 1e-12);
        assert!((fit.cross_exponent - 1.0).abs() < 1e-12);
    }
}
