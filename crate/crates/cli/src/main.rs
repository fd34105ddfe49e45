//! `trackdepth`: data generation, training, evaluation, oracles and
//! visualization.
//!
//! Exit codes: 0 success, 1 verification or runtime failure, 2 usage or
//! configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use trackdepth::checkpoint::Checkpoint;
use trackdepth::dataset::{format_boxes, load_dataset, load_sequence, save_png_rgb, Frame};
use trackdepth::evalmetrics::{evaluate_depth, evaluate_tracking, heldout_samples};
use trackdepth::gradcheck;
use trackdepth::model::{depth_at, Model};
use trackdepth::preprocess::{crop_pad, SampleConfig};
use trackdepth::synthworld::{generate_dataset, warp_check_sequence, CameraMode, GenConfig, WARP_MAE_BOUND};
use trackdepth::trainer::{infer_sequence, train_loop, Strategy, TrainConfig, TrainState};
use trackdepth::{BoxXywh, Error, Tensor};

#[derive(Parser)]
#[command(name = "trackdepth", version, about = "Tracking with an auxiliary monocular depth head")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        seqs: usize,
        #[arg(long, default_value_t = 60)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "moving")]
        camera: CameraMode,
    },
    /// Train one strategy and write checkpoints plus a log.
    Train {
        /// TOML config; defaults to the CPU-sized settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `total_steps`.
        #[arg(long)]
        steps: Option<u64>,
        /// Overrides `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Track every sequence and write a metric report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Track one sequence and write predicted boxes.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every loss path on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negate analytic gradients; the check must then fail.
        #[arg(long, hide = true)]
        flip_sign: bool,
    },
    /// Reconstruct each frame from its successor with ground-truth depth and
    /// pose.
    WarpOracle {
        #[arg(long)]
        data: PathBuf,
    },
    /// Write search crops with boxes, attention overlays and depth maps.
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } | Error::UndefinedLoss(_) => Failure::Verification(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.command {
        Command::SynthGen {
            out,
            seqs,
            frames,
            seed,
            camera,
        } => synth_gen(&out, seqs, frames, seed, camera),
        Command::Train {
            config,
            strategy,
            data,
            out,
            steps,
            seed,
        } => train(config.as_deref(), strategy, &data, &out, steps, seed),
        Command::Eval { ckpt, data, report } => eval(&ckpt, &data, &report),
        Command::Infer { ckpt, seq, out } => infer(&ckpt, &seq, &out),
        Command::Gradcheck { seed, flip_sign } => grad_check(seed, flip_sign),
        Command::WarpOracle { data } => warp_oracle(&data),
        Command::Viz { ckpt, seq, out } => viz(&ckpt, &seq, &out),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn synth_gen(out: &Path, seqs: usize, frames: usize, seed: u64, camera: CameraMode) -> CmdResult {
    let cfg = GenConfig::new(seqs, frames, seed, camera);
    cfg.validate()?;
    generate_dataset(&cfg, out)?;
    println!("{}", out.join("manifest.json").display());
    Ok(())
}

fn train(
    config: Option<&Path>,
    strategy: Strategy,
    data: &Path,
    out: &Path,
    steps: Option<u64>,
    seed: Option<u64>,
) -> CmdResult {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    };
    if let Some(s) = steps {
        cfg.total_steps = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let ds = load_dataset(data)?;
    trackdepth::trainer::check_dataset(&ds, strategy)?;
    let model = Model::new(cfg.arch.clone(), cfg.seed)?;
    let state = TrainState::new(model, strategy);
    let every = (cfg.total_steps / 10).max(1);
    let outcome = train_loop(&ds, state, &cfg, Some(out), |r| {
        if r.step % every == 0 || r.step == 1 {
            println!(
                "step {:>6} lr {:.2e} total {:.5} tracking {:.5} depth_aux {:.5}",
                r.step, r.lr, r.total, r.tracking, r.depth_aux
            );
        }
    })?;
    if let Some(p) = outcome.checkpoints.last() {
        println!("{}", p.display());
    }
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<(Checkpoint, SampleConfig), Failure> {
    let ck = Checkpoint::load(ckpt)?;
    let arch = &ck.model.arch;
    let sample = match &ck.config {
        Some(c) => c.sample.clone(),
        None => SampleConfig {
            search_side: arch.input_side,
            template_side: arch.template_side,
            ..SampleConfig::default()
        },
    };
    Ok((ck, sample))
}

fn eval(ckpt: &Path, data: &Path, report: &Path) -> CmdResult {
    let (ck, sample) = load_model(ckpt)?;
    let ds = load_dataset(data)?;
    let tracking = evaluate_tracking(&ck.model, &ds, &sample)?;
    let depth = if ck.model.has_depth_head() && ds.has_depth() {
        Some(evaluate_depth(&ck.model, &heldout_samples(&ds, &sample, 5)?)?)
    } else {
        None
    };
    println!(
        "AUC {:.2}  P {:.2}  NP {:.2}  AO {:.2}  SR0.5 {:.2}  SR0.75 {:.2}",
        tracking.auc,
        tracking.precision_20px,
        tracking.norm_precision,
        tracking.ao,
        tracking.sr_050,
        tracking.sr_075
    );
    if let Some(d) = &depth {
        println!("depth abs_rel {:.4}  rmse {:.4}", d.abs_rel, d.rmse);
    }
    let doc = json!({
        "checkpoint": ckpt.display().to_string(),
        "strategy": ck.strategy,
        "step": ck.step,
        "tracking": tracking,
        "depth": depth,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Failure::Usage(e.to_string()))?;
    fs::write(report, text + "\n").map_err(|e| Failure::Usage(format!("{}: {e}", report.display())))
}

fn infer(ckpt: &Path, seq_dir: &Path, out: &Path) -> CmdResult {
    let (ck, sample) = load_model(ckpt)?;
    let seq = load_sequence(seq_dir)?;
    let preds = infer_sequence(&ck.model, &seq, &sample)?;
    let boxes: Vec<BoxXywh> = preds.iter().map(|p| p.bbox).collect();
    fs::write(out, format_boxes(&boxes)).map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
    let lost: Vec<usize> = preds.iter().enumerate().filter(|(_, p)| p.lost).map(|(i, _)| i).collect();
    println!("{} frames, {} lost {:?}", preds.len(), lost.len(), lost);
    Ok(())
}

fn grad_check(seed: u64, flip_sign: bool) -> CmdResult {
    let rep = gradcheck::run(seed, flip_sign)?;
    for p in &rep.paths {
        println!(
            "{:<22} checked {:>5}  max rel error {:.3e}  worst {} (analytic {:.6e}, numeric {:.6e})",
            p.path, p.checked, p.max_rel_error, p.worst, p.analytic, p.numeric
        );
    }
    if rep.passed {
        println!("gradcheck passed: {:.3e} < {:.0e}", rep.max_rel_error, gradcheck::TOLERANCE);
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "gradcheck failed: max relative error {:.3e} >= {:.0e}",
            rep.max_rel_error,
            gradcheck::TOLERANCE
        )))
    }
}

fn warp_oracle(data: &Path) -> CmdResult {
    let ds = load_dataset(data)?;
    let mut checks = Vec::new();
    for seq in &ds.sequences {
        checks.extend(warp_check_sequence(seq)?);
    }
    let Some(worst) = checks.iter().max_by(|a, b| a.mae.total_cmp(&b.mae)) else {
        return Err(Failure::Usage("no frame pairs to check".into()));
    };
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).collect();
    println!(
        "{} pairs, {} failed; worst {} frames {}->{} mae {:.5} over {} pixels",
        checks.len(),
        failed.len(),
        worst.sequence,
        worst.t2,
        worst.t,
        worst.mae,
        worst.covisible
    );
    if failed.is_empty() {
        Ok(())
    } else {
        for c in failed.iter().take(10) {
            eprintln!("{} frames {}->{}: mae {:.5} >= {WARP_MAE_BOUND}", c.sequence, c.t2, c.t, c.mae);
        }
        Err(Failure::Verification(format!("{} pairs exceed the warp bound", failed.len())))
    }
}

fn heat(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [(1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0), (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0), (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0)]
}

fn draw_box(img: &mut Tensor, b: &BoxXywh) {
    let (_, h, w) = img.chw().expect("image");
    let clampi = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n - 1);
    let (x1, x2) = (clampi(b.x, w), clampi(b.x2() - 1.0, w));
    let (y1, y2) = (clampi(b.y, h), clampi(b.y2() - 1.0, h));
    let mut put = |x: usize, y: usize| {
        for (c, v) in [0.0, 1.0, 0.0].into_iter().enumerate() {
            img.set3(c, y, x, v);
        }
    };
    for x in x1..=x2 {
        put(x, y1);
        put(x, y2);
    }
    for y in y1..=y2 {
        put(x1, y);
        put(x2, y);
    }
}

fn viz(ckpt: &Path, seq_dir: &Path, out: &Path) -> CmdResult {
    let (ck, sample) = load_model(ckpt)?;
    let model = &ck.model;
    let seq = load_sequence(seq_dir)?;
    fs::create_dir_all(out).map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
    let (template, _, _) = crop_pad(&seq.frames[0], &seq.boxes[0], sample.template_factor, sample.template_side)?;
    let side = sample.search_side;
    let mut prev = seq.boxes[0];
    let save = |name: String, img: &Tensor| -> CmdResult {
        save_png_rgb(&out.join(name), &Frame::from_tensor(img)?)?;
        Ok(())
    };
    for (t, f) in seq.frames.iter().enumerate() {
        let (search, _, crop) = crop_pad(f, &prev, sample.search_factor, side)?;
        let (track, disp) = if model.has_depth_head() {
            let (tr, d) = model.track_and_depth(&template, &search)?;
            (tr, Some(d))
        } else {
            (model.track(&template, &search)?, None)
        };
        let pred = track.bbox.scaled(side as f64);
        let mut boxed = search.clone();
        draw_box(&mut boxed, &pred);
        save(format!("crop_{t:06}.png"), &boxed)?;

        let (_, gh, gw) = track.attn_map.chw()?;
        let peak = track.attn_map.data().iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
        let mut overlay = search.clone();
        for y in 0..side {
            for x in 0..side {
                let a = track.attn_map.at3(0, y * gh / side, x * gw / side) / peak;
                let c = heat(a);
                for (ch, cv) in c.into_iter().enumerate() {
                    overlay.set3(ch, y, x, 0.5 * search.at3(ch, y, x) + 0.5 * cv);
                }
            }
        }
        save(format!("attn_{t:06}.png"), &overlay)?;

        if let Some(d) = disp {
            let depth = depth_at(&d, side)?.pop().expect("four scales");
            let inv: Vec<f64> = depth.data().iter().map(|v| 1.0 / v).collect();
            let (lo, hi) = inv.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            let span = (hi - lo).max(1e-12);
            let mut img = Tensor::zeros(&[3, side, side]);
            for (i, v) in inv.iter().enumerate() {
                let c = heat((v - lo) / span);
                for (ch, cv) in c.into_iter().enumerate() {
                    img.data_mut()[ch * side * side + i] = cv;
                }
            }
            save(format!("depth_{t:06}.png"), &img)?;
        }

        let src = crop.box_to_source(&pred).clip(f.width as f64, f.height as f64);
        if t > 0 && src.is_finite() && src.w >= 1.0 && src.h >= 1.0 {
            prev = src;
        }
    }
    println!("{}", out.display());
    Ok(())
}
