use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use anchorsplat::decoder::ColorMode;
use anchorsplat::gradcheck::run_gradcheck;
use anchorsplat::io;
use anchorsplat::scene::Camera;
use anchorsplat::synth::{
    ablation_residual_vs_direct, eval_render, eval_scale_recovery, generate,
    read_manifest_s_star, write_synth_dataset, CameraPath, SynthSceneSpec,
};
use anchorsplat::train::{Model, ModelConfig, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "anchorsplat", version, about = "CPU anchored Gaussian splatting")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Runs are deterministic by construction; the flag is accepted for
    /// compatibility and asserts nothing extra.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with known ground truth.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        train_views: usize,
        #[arg(long, default_value_t = 4)]
        eval_views: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 40)]
        splats: usize,
        #[arg(long, value_enum, default_value_t = PathKind::Orbit)]
        path: PathKind,
        /// Log-uniform range for the per-view depth corruption scales.
        #[arg(long, num_args = 2, default_values_t = [1.0, 1.0])]
        s_star_range: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
    },
    /// Train a model on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        /// Newline-delimited JSON metrics log.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Render a checkpoint from a pose (poses.txt-format line) and intrinsics.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// File with one poses.txt-format line per view to render.
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        /// Output directory for color/depth files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Eval)]
        split: Split,
        /// Metrics output (newline-delimited JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Residual-vs-direct color decoder study.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, default_value_t = 50)]
        sample_every: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export a checkpoint as ASCII PLY.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = What::Splats)]
        what: What,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PathKind {
    Orbit,
    Free,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Anchors,
    Splats,
}

fn load_config(common: &Common) -> anyhow::Result<BTreeMap<String, String>> {
    let mut map = match &common.config {
        Some(p) => io::parse_config(p)?,
        None => BTreeMap::new(),
    };
    if let Some(s) = common.seed {
        map.insert("seed".into(), s.to_string());
    }
    Ok(map)
}

fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> anyhow::Result<T> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| anyhow::anyhow!("config key {key}: cannot parse '{v}'")),
    }
}

fn model_config(map: &BTreeMap<String, String>) -> anyhow::Result<ModelConfig> {
    let d = ModelConfig::default();
    let eps = get(map, "eps", d.eps)?;
    Ok(ModelConfig {
        k: get(map, "k", d.k)?,
        eps,
        stride: get(map, "stride", d.stride)?,
        init_opacity: get(map, "init_opacity", d.init_opacity)?,
        offset_bound: get(map, "offset_bound", 2.0 * eps)?,
        color_mode: match map.get("color_mode").map(String::as_str) {
            None | Some("residual") => ColorMode::Residual,
            Some("direct") => ColorMode::Direct,
            Some(other) => bail!("config key color_mode: unknown value '{other}'"),
        },
        seed: get(map, "seed", d.seed)?,
        feature_init_bound: get(map, "feature_init_bound", d.feature_init_bound)?,
    })
}

fn train_config(map: &BTreeMap<String, String>) -> anyhow::Result<TrainConfig> {
    let d = TrainConfig::default();
    let mut w = d.weights;
    w.lambda_p = get(map, "lambda_p", w.lambda_p)?;
    w.lambda_d = get(map, "lambda_d", w.lambda_d)?;
    w.lambda_s = get(map, "lambda_s", w.lambda_s)?;
    w.lambda_u = get(map, "lambda_u", w.lambda_u)?;
    w.w = get(map, "ssim_weight", w.w)?;
    w.r = get(map, "aniso_threshold", w.r)?;
    Ok(TrainConfig {
        iterations: get(map, "iterations", d.iterations)?,
        lr_mlp: get(map, "lr_mlp", d.lr_mlp)?,
        lr_features: get(map, "lr_features", d.lr_features)?,
        lr_view_s: get(map, "lr_view_s", d.lr_view_s)?,
        lr_view_lambda: get(map, "lr_view_lambda", d.lr_view_lambda)?,
        weights: w,
        seed: get(map, "seed", d.seed)?,
        freeze_view_scales: get(map, "freeze_view_scales", false)?,
    })
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Generate {
            common,
            out,
            train_views,
            eval_views,
            size,
            splats,
            path,
            s_star_range,
            noise_sigma,
        } => {
            let map = load_config(&common)?;
            let spec = SynthSceneSpec {
                seed: get(&map, "seed", 0)?,
                n_splats: splats,
                n_train_views: train_views,
                n_eval_views: eval_views,
                path: match path {
                    PathKind::Orbit => CameraPath::Orbit,
                    PathKind::Free => CameraPath::Free,
                },
                width: size,
                height: size,
                focal: size as f64,
                s_star_range: (s_star_range[0], s_star_range[1]),
                noise_sigma,
                ..SynthSceneSpec::default()
            };
            let ds = generate(&spec)?;
            write_synth_dataset(&out, &ds, &spec)?;
            println!(
                "wrote {} train + {} eval views to {}",
                ds.train.len(),
                ds.eval.len(),
                out.display()
            );
        }
        Cmd::Train {
            common,
            data,
            out,
            iterations,
            metrics,
            checkpoint_every,
        } => {
            let map = load_config(&common)?;
            let views = io::load_dataset(&data)
                .with_context(|| format!("no views found in {}", data.display()))?;
            let mcfg = model_config(&map)?;
            let mut tcfg = train_config(&map)?;
            if let Some(i) = iterations {
                tcfg.iterations = i;
            }
            let model = Model::build(&views, &mcfg)?;
            println!(
                "{} anchors x {} children from {} views",
                model.anchors.anchors.len(),
                model.bank.k,
                views.len()
            );
            let mut trainer = Trainer::new(model, tcfg);
            let mut log = match &metrics {
                Some(p) => Some(std::io::BufWriter::new(
                    std::fs::File::create(p).with_context(|| p.display().to_string())?,
                )),
                None => None,
            };
            let ckpt_dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
            let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("ckpt");
            let mut pending_ckpt: Option<(usize, PathBuf)> = None;
            trainer.run(&views, |it, view, b| {
                if let Some(l) = log.as_mut() {
                    let rec = serde_json::json!({
                        "iter": it, "view": view,
                        "photo": b.photo, "depth": b.depth,
                        "vol": b.vol, "aniso": b.aniso, "total": b.total,
                    });
                    writeln!(l, "{rec}").map_err(|e| {
                        anchorsplat::Error::io(metrics.clone().unwrap(), e)
                    })?;
                }
                if checkpoint_every > 0 && (it + 1) % checkpoint_every == 0 {
                    pending_ckpt = Some((it + 1, ckpt_dir.join(format!("{stem}_{:06}.ckpt", it + 1))));
                }
                if (it + 1) % 100 == 0 {
                    println!("iter {:>6}  total {:.6}", it + 1, b.total);
                }
                Ok(())
            })?;
            if let Some((_, p)) = pending_ckpt {
                io::save_checkpoint(&p, &trainer.model)?;
            }
            io::save_checkpoint(&out, &trainer.model)?;
            println!("checkpoint -> {}", out.display());
        }
        Cmd::Render {
            checkpoint,
            poses,
            intrinsics,
            out,
            ..
        } => {
            let model = io::load_checkpoint(&checkpoint)?;
            let intr = io::parse_intrinsics(&intrinsics)?;
            let cam_poses = io::parse_poses(&poses)?;
            std::fs::create_dir_all(&out).map_err(|e| anchorsplat::Error::io(&out, e))?;
            let fwd = model.forward()?;
            for (i, c2w) in cam_poses.iter().enumerate() {
                let cam = Camera::new(
                    intr.fx,
                    intr.fy,
                    intr.cx,
                    intr.cy,
                    intr.width,
                    intr.height,
                    c2w.inverse(),
                )?;
                let t = anchorsplat::rasterize::render(&fwd.splats, &cam, model.background, &model.raster);
                io::write_png(&out.join(format!("{i:05}.png")), &t.color)?;
                io::write_pfm(&out.join(format!("{i:05}.pfm")), &anchorsplat::anchors::DepthMap {
                    width: t.depth.width,
                    height: t.depth.height,
                    values: t.depth.data.clone(),
                })?;
            }
            println!("rendered {} views -> {}", cam_poses.len(), out.display());
        }
        Cmd::Eval {
            checkpoint,
            data,
            split,
            out,
            ..
        } => {
            let model = io::load_checkpoint(&checkpoint)?;
            let dir = match split {
                Split::Train => data.clone(),
                Split::Eval => data.join("eval"),
            };
            let views = io::load_dataset(&dir)?;
            let (per_view, mean_psnr, mean_ssim) = eval_render(&model, &views)?;
            let mut records: Vec<serde_json::Value> = per_view
                .iter()
                .map(|m| serde_json::json!({"view": m.view, "psnr": m.psnr, "ssim": m.ssim}))
                .collect();
            records.push(serde_json::json!({"mean_psnr": mean_psnr, "mean_ssim": mean_ssim}));
            if matches!(split, Split::Train) {
                if let Ok(s_star) = read_manifest_s_star(&data) {
                    let rep = eval_scale_recovery(&model, &s_star, 0.05)?;
                    records.push(serde_json::json!({
                        "scale_recovery_rho": rep.rho,
                        "max_deviation": rep.max_deviation,
                        "pass": rep.pass,
                    }));
                }
            }
            let text = records
                .iter()
                .map(|r| r.to_string())
                .collect::<Vec<_>>()
                .join("\n")
                + "\n";
            match out {
                Some(p) => std::fs::write(&p, &text).map_err(|e| anchorsplat::Error::io(p, e))?,
                None => print!("{text}"),
            }
            println!("mean PSNR {mean_psnr:.3}  mean SSIM {mean_ssim:.5}");
        }
        Cmd::Gradcheck { common } => {
            let map = load_config(&common)?;
            let seed = get(&map, "seed", 0)?;
            let report = run_gradcheck(seed)?;
            for r in &report.results {
                println!(
                    "{}  {}  (checks {}, skipped {}, max rel err {:.3e})",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.name,
                    r.checks,
                    r.skipped,
                    r.max_rel_err
                );
            }
            if !report.pass() {
                bail!("gradient check failed");
            }
        }
        Cmd::Ablate {
            common,
            data,
            iterations,
            sample_every,
            out,
        } => {
            let map = load_config(&common)?;
            let views = io::load_dataset(&data)?;
            let mcfg = model_config(&map)?;
            let mut tcfg = train_config(&map)?;
            if let Some(i) = iterations {
                tcfg.iterations = i;
            }
            let curves = ablation_residual_vs_direct(&views, &mcfg, &tcfg, sample_every)?;
            let text = serde_json::to_string_pretty(&curves)?;
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| anchorsplat::Error::io(p, e))?,
                None => println!("{text}"),
            }
        }
        Cmd::Export {
            checkpoint,
            out,
            what,
            ..
        } => {
            let model = io::load_checkpoint(&checkpoint)?;
            match what {
                What::Anchors => io::export_anchors_ply(&out, &model.anchors.anchors)?,
                What::Splats => {
                    let fwd = model.forward()?;
                    io::export_splats_ply(&out, &fwd.splats)?;
                }
            }
            println!("exported -> {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
