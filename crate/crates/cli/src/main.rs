//! Command-line front end for two-image and multi-image stitching.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use spstitch::eval::{generate_scene, SceneSpec};
use spstitch::features::{CorrespondenceSet, MultiCorrespondenceSet};
use spstitch::pipeline::{
    evaluate_scene, mesh_svg, stitch_multi, stitch_two, StitchConfig, WarpMode,
};
use spstitch::raster::RasterImage;

#[derive(Parser)]
#[command(
    name = "spstitch",
    version,
    about = "Single-perspective image stitching"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Warp a target image onto a reference image.
    Stitch2 {
        target: PathBuf,
        reference: PathBuf,
        /// Correspondence JSON; features are detected when absent.
        #[arg(long)]
        corr: Option<PathBuf>,
        #[command(flatten)]
        opts: StitchOpts,
        /// Write the mesh as SVG.
        #[arg(long)]
        dump_mesh: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Stitch several images into one panorama.
    Stitchn {
        #[arg(required = true, num_args = 2..)]
        images: Vec<PathBuf>,
        /// Multi-image correspondence JSON; features are detected when absent.
        #[arg(long)]
        corr: Option<PathBuf>,
        /// Reference image; defaults to the one with the most matches.
        #[arg(long)]
        ref_index: Option<usize>,
        #[command(flatten)]
        opts: StitchOpts,
        /// Write one SVG per image, suffixed with its index.
        #[arg(long)]
        dump_mesh: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Compare warp modes on generated scenes.
    Eval {
        /// Scene description JSON; missing fields take their defaults.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, value_delimiter = ',', default_value = "homography,apap,mesh")]
        modes: Vec<WarpMode>,
        #[command(flatten)]
        opts: StitchOpts,
        /// Report path; printed to stdout when absent.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic multi-plane scene with ground truth.
    Synth {
        #[arg(long, default_value_t = 2)]
        planes: usize,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        images: usize,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        /// Base scene description JSON; the flags above override it.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct StitchOpts {
    /// Full configuration JSON; the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<WarpMode>,
    #[arg(long)]
    cell: Option<f64>,
    #[arg(long)]
    lambda_l: Option<f64>,
    #[arg(long)]
    lambda_ps: Option<f64>,
    #[arg(long)]
    lambda_pj: Option<f64>,
    #[arg(long)]
    lambda_s: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write diagnostics JSON.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

impl StitchOpts {
    fn config(&self) -> Result<StitchConfig> {
        let mut cfg: StitchConfig = match &self.config {
            Some(p) => serde_json::from_str(&read(p)?)
                .with_context(|| format!("parsing {}", p.display()))?,
            None => StitchConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(c) = self.cell {
            cfg.cell = c;
        }
        if let Some(v) = self.lambda_l {
            cfg.lambdas.l = v;
        }
        if let Some(v) = self.lambda_ps {
            cfg.lambdas.ps = v;
        }
        if let Some(v) = self.lambda_pj {
            cfg.lambdas.pj = v;
        }
        if let Some(v) = self.lambda_s {
            cfg.lambdas.s = v;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn load_image(p: &Path) -> Result<RasterImage> {
    RasterImage::load(p).with_context(|| format!("loading {}", p.display()))
}

fn write_json(p: &Path, v: &impl serde::Serialize) -> Result<()> {
    std::fs::write(p, serde_json::to_string_pretty(v)?)
        .with_context(|| format!("writing {}", p.display()))
}

fn indexed(p: &Path, k: usize) -> PathBuf {
    let stem = p
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = p
        .extension()
        .map(|e| format!(".{}", e.to_string_lossy()))
        .unwrap_or_default();
    p.with_file_name(format!("{stem}_{k}{ext}"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Stitch2 {
            target,
            reference,
            corr,
            opts,
            dump_mesh,
            output,
        } => {
            let cfg = opts.config()?;
            let (t, r) = (load_image(&target)?, load_image(&reference)?);
            let corr = corr.map(|p| CorrespondenceSet::load(&p)).transpose()?;
            let res = stitch_two(&t, &r, corr.as_ref(), &cfg)?;
            res.image
                .save(&output)
                .with_context(|| format!("writing {}", output.display()))?;
            if let Some(p) = dump_mesh {
                std::fs::write(
                    &p,
                    mesh_svg(&res.grid, &res.vertices, res.cross.as_ref(), &res.salient),
                )?;
            }
            if let Some(p) = opts.metrics {
                write_json(&p, &res.diagnostics)?;
            }
            log::info!(
                "rmse {:.4} px, canvas {}x{}",
                res.diagnostics.rmse,
                res.image.width,
                res.image.height
            );
        }
        Command::Stitchn {
            images,
            corr,
            ref_index,
            opts,
            dump_mesh,
            output,
        } => {
            let cfg = opts.config()?;
            let imgs = images
                .iter()
                .map(|p| load_image(p))
                .collect::<Result<Vec<_>>>()?;
            let corr = corr
                .map(|p| MultiCorrespondenceSet::load(&p, imgs.len()))
                .transpose()?;
            let res = stitch_multi(&imgs, corr.as_ref(), ref_index, &cfg)?;
            res.image
                .save(&output)
                .with_context(|| format!("writing {}", output.display()))?;
            if let Some(p) = dump_mesh {
                for k in 0..imgs.len() {
                    let svg = mesh_svg(
                        &res.grids[k],
                        &res.vertices[k],
                        res.cross[k].as_ref(),
                        &res.salient[k],
                    );
                    std::fs::write(indexed(&p, k), svg)?;
                }
            }
            if let Some(p) = opts.metrics {
                write_json(&p, &res.diagnostics)?;
            }
            log::info!(
                "reference {}, canvas {}x{}",
                res.diagnostics.reference,
                res.image.width,
                res.image.height
            );
        }
        Command::Eval {
            scene,
            reps,
            modes,
            opts,
            output,
        } => {
            let cfg = opts.config()?;
            let spec: SceneSpec = match scene {
                Some(p) => serde_json::from_str(&read(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => SceneSpec::default(),
            };
            let report = evaluate_scene(&spec, reps, &modes, &cfg)?;
            match output {
                Some(p) => write_json(&p, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
            if let Some(p) = opts.metrics {
                write_json(&p, &report.mean)?;
            }
        }
        Command::Synth {
            planes,
            noise,
            seed,
            images,
            width,
            height,
            scene,
            output,
        } => {
            let base: SceneSpec = match scene {
                Some(p) => serde_json::from_str(&read(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => SceneSpec::default(),
            };
            if images < 2 {
                bail!("a scene needs at least two images");
            }
            let spec = SceneSpec {
                planes,
                noise,
                seed,
                images,
                width: width.unwrap_or(base.width),
                height: height.unwrap_or(base.height),
                ..base
            };
            generate_scene(&spec)?.save(&output)?;
            log::info!("scene written to {}", output.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
