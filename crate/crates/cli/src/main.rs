use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use widthbev::bvt::{self, DType};
use widthbev::decoder::transform_full_oracle;
use widthbev::encoding::pixel_refpe;
use widthbev::faults::Fault;
use widthbev::geometry::{Axis, CameraRig, PerturbKind, TranslationFrame};
use widthbev::harness::bench::{run_bench, BenchConfig, BenchSize};
use widthbev::harness::checks::run_checks;
use widthbev::harness::scene::{demo_setup, gen_scene, SceneSpec};
use widthbev::harness::sweep::{run_sweep, SweepConfig, DEFAULT_SIGMAS};
use widthbev::harness::{streams, DEFAULT_SEED};
use widthbev::pipeline::{Pipeline, PipelineConfig};
use widthbev::width::FeatureVolume;
use widthbev::Rng;

#[derive(Parser)]
#[command(name = "widthbev", version, about = "Width-compressed BEV view transformation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a camera rig (JSON) and random image features (BVT1).
    GenScene {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long, num_args = 2, value_names = ["RIG_JSON", "FEATS_BVT"], required = true)]
        out: Vec<PathBuf>,
    },
    /// Perturb camera extrinsics and report relative BEV feature drift as CSV.
    Sweep {
        #[command(flatten)]
        scene: SceneArgs,
        /// Rig and features to use instead of a generated scene.
        #[arg(long = "scene", num_args = 2, value_names = ["RIG_JSON", "FEATS_BVT"])]
        scene_files: Option<Vec<PathBuf>>,
        #[arg(long, value_delimiter = ',', default_value = "rot,trans")]
        kinds: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "x,y,z")]
        axes: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
        #[arg(long, default_value_t = 16)]
        trials: usize,
        /// Draw translation offsets along ego axes instead of camera axes.
        #[arg(long)]
        ego_frame: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-stage MAC counts and median single-threaded latency as CSV.
    Bench {
        /// Settings as HxWxC or HxWxCxHB.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<BenchSize>>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 6)]
        cameras: usize,
        #[arg(long, env = "BVT_SEED", default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Skip the full-pixel decoder.
        #[arg(long)]
        no_full: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the invariant checks; exits nonzero if any fails.
    Check {
        /// Glob over check names, e.g. "polar*".
        #[arg(long)]
        filter: Option<String>,
        /// Deliberately break the code: skip-softmax or aux-into-decoder.
        #[arg(long)]
        inject_fault: Vec<String>,
    },
    /// Run the pipeline once and dump the BEV features.
    Demo {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        dump_bev: PathBuf,
        /// Also run the decoder over every pixel and report the gap.
        #[arg(long)]
        full: bool,
    },
}

#[derive(Args, Clone)]
struct SceneArgs {
    #[arg(long, env = "BVT_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    cameras: usize,
    /// Feature map as HxWxC.
    #[arg(long, default_value = "16x44x64")]
    dims: String,
    /// BEV grid side length.
    #[arg(long, default_value_t = 32)]
    bev: usize,
}

impl SceneArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let size: BenchSize = format!("{}x{}", self.dims, self.bev).parse()?;
        let config = PipelineConfig {
            cameras: self.cameras,
            height: size.height,
            width: size.width,
            channels: size.channels,
            bev_rows: size.bev,
            bev_cols: size.bev,
            ffn_hidden: 2 * size.channels,
            head_hidden: size.channels,
            ..PipelineConfig::default()
        };
        config.validate()?;
        Ok(config)
    }
}

fn parse_list<T>(items: &[String], what: &str, parse: fn(&str) -> Option<T>) -> Result<Vec<T>> {
    items.iter().map(|s| parse(s.trim()).with_context(|| format!("unknown {what} '{s}'"))).collect()
}

fn load_scene(paths: &[PathBuf], base: &PipelineConfig) -> Result<(CameraRig, FeatureVolume, PipelineConfig)> {
    let rig = CameraRig::load(&paths[0]).with_context(|| format!("reading {}", paths[0].display()))?;
    let feat = FeatureVolume::new(bvt::load(&paths[1]).with_context(|| format!("reading {}", paths[1].display()))?)?;
    let config = PipelineConfig {
        cameras: feat.cameras(),
        height: feat.height(),
        width: feat.width(),
        channels: feat.channels(),
        ffn_hidden: 2 * feat.channels(),
        head_hidden: feat.channels(),
        ..base.clone()
    };
    config.validate()?;
    Ok((rig, feat, config))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenScene { scene, out } => {
            let config = scene.config()?;
            let (rig, feat) = gen_scene(&SceneSpec::from_config(&config, scene.seed))?;
            rig.save(&out[0])?;
            bvt::save(&out[1], feat.tensor(), DType::F64)?;
            println!("wrote {} and {} {:?}", out[0].display(), out[1].display(), feat.tensor().dims());
        }
        Command::Sweep { scene, scene_files, kinds, axes, sigmas, trials, ego_frame, out } => {
            let base = scene.config()?;
            let (rig, feat, config) = match scene_files {
                Some(paths) => load_scene(&paths, &base)?,
                None => {
                    let (rig, feat) = gen_scene(&SceneSpec::from_config(&base, scene.seed))?;
                    (rig, feat, base)
                }
            };
            let pipeline = Pipeline::init(config, &mut Rng::new(scene.seed, streams::WEIGHTS))?;
            let cfg = SweepConfig {
                kinds: parse_list(&kinds, "kind", PerturbKind::parse)?,
                axes: parse_list(&axes, "axis", Axis::parse)?,
                sigmas: sigmas.unwrap_or_else(|| DEFAULT_SIGMAS.to_vec()),
                trials,
                frame: if ego_frame { TranslationFrame::Ego } else { TranslationFrame::Camera },
                seed: scene.seed,
            };
            let result = run_sweep(&pipeline, &rig, &feat, &cfg)?;
            result.save(&out)?;
            println!("wrote {} ({} rows)", out.display(), result.rows.len());
        }
        Command::Bench { sizes, repeats, cameras, seed, no_full, out } => {
            let mut cfg = BenchConfig::new(seed);
            if let Some(sizes) = sizes {
                cfg.sizes = sizes;
            }
            cfg.repeats = repeats;
            cfg.cameras = cameras;
            cfg.full = !no_full;
            let result = run_bench(&cfg)?;
            result.save(&out)?;
            for k in &result.keys {
                let ratio = k.exact_ratio().map_or("not an integer".to_string(), |r| r.to_string());
                println!("{}: {} width keys, {} pixel keys, ratio {ratio}", k.size, k.width_keys, k.full_keys);
            }
            println!("wrote {} (ms_median is advisory)", out.display());
        }
        Command::Check { filter, inject_fault } => {
            let faults = parse_list(&inject_fault, "fault", Fault::parse)?;
            let report = run_checks(filter.as_deref(), &faults)?;
            if report.outcomes.is_empty() {
                bail!("no checks match the filter");
            }
            print!("{}", report.render());
            if !report.all_passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Demo { scene, dump_bev, full } => {
            let config = scene.config()?;
            let (pipeline, rig, feat) = demo_setup(&config, scene.seed)?;
            let out = pipeline.run(&rig, &feat)?;
            bvt::save(&dump_bev, &out.bev, DType::F64)?;
            println!("bev {:?}, norm {:.6}", out.bev.dims(), out.bev.norm());
            if full {
                let pixel_pe = pixel_refpe(&feat, &rig, &pipeline.bins, &out.coefficients, &pipeline.width_pe_mlp, false, &pipeline.encoder)?;
                let dense = transform_full_oracle(&feat, &pixel_pe, &out.bev_queries, &pipeline.decoder)?;
                println!("relative gap to full-pixel decoder: {:.6}", dense.sub(&out.bev)?.norm() / dense.norm());
            }
            println!("wrote {}", dump_bev.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
