//! Operator entry point: dataset synthesis, training, inference,
//! evaluation, and self-checks.
//!
//! Exit codes: 0 success, 1 failed check or evaluation, 2 usage/IO errors.

mod config;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use simulflow_core::check::{run_suite, Suite};
use simulflow_core::data::{self, SynthParams};
use simulflow_core::decoder::binarize;
use simulflow_core::io;
use simulflow_core::mask::BinaryMask;
use simulflow_core::metrics;
use simulflow_core::model::Model;
use simulflow_core::tensor::tape::Tape;
use simulflow_core::tensor::ops;
use simulflow_core::train::{self, AdamW, TrainEvent, TrainSettings};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "simulflow", version, about = "One-stream video object segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset tree with analytic optical flow.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Training sequences.
        #[arg(long, default_value_t = 200)]
        train: usize,
        /// Validation sequences.
        #[arg(long, default_value_t = 40)]
        val: usize,
        /// Square canvas side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Frames per sequence.
        #[arg(long, default_value_t = 8)]
        frames: usize,
        /// Distractor objects per scene.
        #[arg(long, default_value_t = 2)]
        distractors: usize,
        /// Flow noise standard deviation, px/frame.
        #[arg(long, default_value_t = 0.5)]
        noise: f32,
        #[arg(long)]
        seed: u64,
    },
    /// Train a model on a synthesized dataset directory.
    Train {
        /// JSON run configuration (see README for the schema).
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        /// Dataset directory produced by `synth`.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Output checkpoint path (best validation J).
        #[arg(long, value_name = "CKPT")]
        out: PathBuf,
        /// Resume from an earlier checkpoint of the same config.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
        /// Print training loss every N steps.
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Segment one frame given its RGB image and flow field.
    Infer {
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        /// Input frame (binary PPM).
        #[arg(long, value_name = "I.ppm")]
        image: PathBuf,
        /// Flow field (TSR, [2,H,W]).
        #[arg(long, value_name = "F.tsr")]
        flow: PathBuf,
        /// Output mask (binary PGM) at the input's original size.
        #[arg(long, value_name = "M.pgm")]
        out: PathBuf,
        /// Working resolution; must be divisible by 32.
        #[arg(long, default_value_t = 512)]
        size: usize,
        /// Write per-stage coarse masks (sigmoid, PGM) into this directory.
        #[arg(long, value_name = "DIR")]
        dump_coarse: Option<PathBuf>,
        /// Write per-stage mean attention maps (TSR) into this directory.
        #[arg(long, value_name = "DIR")]
        dump_attn: Option<PathBuf>,
    },
    /// Score predicted masks against ground truth.
    Eval {
        /// Directory of predicted masks (PGM), mirroring the gt layout.
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        /// Directory of ground-truth masks (PGM).
        #[arg(long, value_name = "DIR")]
        gt: PathBuf,
        /// Directory of probability maps (TSR [H,W]) for MAE / max F-beta.
        #[arg(long, value_name = "DIR")]
        prob: Option<PathBuf>,
        /// Boundary tolerance in pixels (default: 0.8% of the diagonal).
        #[arg(long)]
        tol: Option<usize>,
    },
    /// Run built-in invariant/gradient/format self-checks.
    Check {
        /// One of: grad, invariants, formats, all.
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(2);
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth {
            out,
            train,
            val,
            size,
            frames,
            distractors,
            noise,
            seed,
        } => cmd_synth(&out, train, val, size, frames, distractors, noise, seed),
        Command::Train {
            config,
            data,
            out,
            resume,
            log_every,
        } => cmd_train(&config, &data, &out, resume.as_deref(), log_every),
        Command::Infer {
            ckpt,
            image,
            flow,
            out,
            size,
            dump_coarse,
            dump_attn,
        } => cmd_infer(&ckpt, &image, &flow, &out, size, dump_coarse.as_deref(), dump_attn.as_deref()),
        Command::Eval { pred, gt, prob, tol } => cmd_eval(&pred, &gt, prob.as_deref(), tol),
        Command::Check { suite } => cmd_check(&suite),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    out: &Path,
    train: usize,
    val: usize,
    size: usize,
    frames: usize,
    distractors: usize,
    noise: f32,
    seed: u64,
) -> Result<i32> {
    if train == 0 || val == 0 {
        bail!("--train and --val must be positive");
    }
    let params = SynthParams {
        size,
        frames,
        distractors,
        noise_std: noise,
    };
    let (train_specs, val_specs) =
        data::make_splits(train, val, seed, &params).map_err(|e| anyhow!("{e}"))?;
    let manifest = data::write_dataset(out, &train_specs, &val_specs, &params, seed)
        .map_err(|e| anyhow!("{e}"))?;
    println!(
        "wrote {} train + {} val sequences ({} frames each, {}x{}) to {}",
        manifest.n_train,
        manifest.n_val,
        manifest.frames,
        manifest.size,
        manifest.size,
        out.display()
    );
    Ok(0)
}

fn cmd_train(
    config_path: &Path,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    log_every: u64,
) -> Result<i32> {
    let text = std::fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let rc: config::RunConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", config_path.display()))?;
    let cfg = rc.model_config().map_err(|e| anyhow!("invalid model config: {e}"))?;

    data::read_manifest(data_dir).map_err(|e| anyhow!("{e}"))?;
    let train_samples = data::read_split(data_dir, "train").map_err(|e| anyhow!("{e}"))?;
    let val_samples = data::read_split(data_dir, "val").map_err(|e| anyhow!("{e}"))?;
    println!(
        "loaded {} train / {} val frames from {}",
        train_samples.len(),
        val_samples.len(),
        data_dir.display()
    );

    let (model, mut reg) = Model::build(cfg.clone(), rc.train.seed).map_err(|e| anyhow!("{e}"))?;
    let mut opt = AdamW::new(&reg);
    let mut start_step = 0u64;
    if let Some(resume_path) = resume {
        let loaded = io::load_model_checkpoint(resume_path).map_err(|e| anyhow!("{e}"))?;
        if loaded.cfg != cfg {
            bail!("resume checkpoint config does not match the run config");
        }
        io::apply_params(resume_path, &loaded.params, &mut reg).map_err(|e| anyhow!("{e}"))?;
        if opt.load_state(&reg, &loaded.extras) {
            start_step = opt.step_count();
        }
        println!("resumed from {} at step {start_step}", resume_path.display());
    }

    let settings = TrainSettings {
        lr: rc.train.lr,
        steps: rc.train.steps,
        batch_size: rc.train.batch_size,
        schedule_power: rc.train.schedule_power,
        seed: rc.train.seed,
        val_every: rc.train.val_every,
    };

    let mut best_j = f32::NEG_INFINITY;
    let save = |reg: &simulflow_core::nn::ParamRegistry, opt: &AdamW| -> Result<()> {
        io::save_model_checkpoint(out, &cfg, reg, &opt.state_entries(reg)).map_err(|e| anyhow!("{e}"))
    };

    if settings.steps <= start_step {
        save(&reg, &opt)?;
        println!("no steps to run; wrote checkpoint to {}", out.display());
        return Ok(0);
    }

    let mut save_err = None;
    train::train(
        &model,
        &mut reg,
        &mut opt,
        &train_samples,
        &val_samples,
        &settings,
        start_step,
        |event, reg, opt| match event {
            TrainEvent::Step { step, lr, loss } => {
                if log_every > 0 && (step % log_every == 0 || step + 1 == settings.steps) {
                    println!(
                        "step {step} lr {lr:.6} total {:.4} main {:.4} aux [{:.4} {:.4} {:.4} {:.4}]",
                        loss.total, loss.main, loss.aux[0], loss.aux[1], loss.aux[2], loss.aux[3]
                    );
                }
            }
            TrainEvent::Validation { step, j, f } => {
                println!("val step {step}: J {j:.4} F {f:.4}");
                if *j > best_j {
                    best_j = *j;
                    if let Err(e) = save(reg, opt) {
                        save_err = Some(e);
                    } else {
                        println!("saved best checkpoint (J {j:.4}) to {}", out.display());
                    }
                }
            }
        },
    )
    .map_err(|e| anyhow!("{e}"))?;
    if let Some(e) = save_err {
        return Err(e);
    }
    if best_j == f32::NEG_INFINITY {
        save(&reg, &opt)?;
        println!("wrote final checkpoint to {}", out.display());
    }
    Ok(0)
}

fn cmd_infer(
    ckpt: &Path,
    image_path: &Path,
    flow_path: &Path,
    out: &Path,
    size: usize,
    dump_coarse: Option<&Path>,
    dump_attn: Option<&Path>,
) -> Result<i32> {
    if size == 0 || size % 32 != 0 {
        bail!("--size {size} must be a positive multiple of 32");
    }
    let loaded = io::load_model_checkpoint(ckpt).map_err(|e| anyhow!("{e}"))?;
    let (model, mut reg) = Model::build(loaded.cfg.clone(), 0).map_err(|e| anyhow!("{e}"))?;
    io::apply_params(ckpt, &loaded.params, &mut reg).map_err(|e| anyhow!("{e}"))?;

    let image = io::read_ppm(image_path).map_err(|e| anyhow!("{e}"))?;
    let flow = io::read_tsr(flow_path).map_err(|e| anyhow!("{e}"))?;
    let [two, fh, fw] = *flow.shape() else {
        bail!("flow tensor must be [2,H,W], got {:?}", flow.shape());
    };
    let [_, ih, iw] = *image.shape() else { unreachable!() };
    if two != 2 || (fh, fw) != (ih, iw) {
        bail!(
            "flow {:?} does not match image {}x{}",
            flow.shape(),
            ih,
            iw
        );
    }

    let image_rs = ops::bilinear_resize(&image, size, size).map_err(|e| anyhow!("{e}"))?;
    let flow_rs = ops::bilinear_resize(&flow, size, size).map_err(|e| anyhow!("{e}"))?;
    let flow_rgb = data::flow_to_rgb(&flow_rs);

    let mut tape = Tape::new();
    let (logits, pyramid) = model
        .forward(&mut tape, &reg, &image_rs, &flow_rgb)
        .map_err(|e| anyhow!("{e}"))?;
    let mask = binarize(tape.value(logits));
    let back = ops::nearest_resize(&mask.to_tensor(), ih, iw).map_err(|e| anyhow!("{e}"))?;
    io::write_pgm_mask(out, &BinaryMask::from_tensor(&back)).map_err(|e| anyhow!("{e}"))?;
    println!("wrote mask {}", out.display());

    if let Some(dir) = dump_coarse {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (i, stage) in pyramid.stages.iter().enumerate() {
            let s = ops::sigmoid(tape.value(stage.mask_logits)).map_err(|e| anyhow!("{e}"))?;
            let path = dir.join(format!("coarse_stage{}.pgm", i + 1));
            io::write_pgm_gray(&path, &s).map_err(|e| anyhow!("{e}"))?;
            println!("wrote {}", path.display());
        }
    }
    if let Some(dir) = dump_attn {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (i, stage) in pyramid.stages.iter().enumerate() {
            let Some(internals) = &stage.attn else { continue };
            let w = tape.value(internals.image_weights);
            // mean over heads and queries leaves one weight per key position
            let over_heads = ops::mean_axis(w, 0).map_err(|e| anyhow!("{e}"))?;
            let per_key = ops::mean_axis(&over_heads, 0).map_err(|e| anyhow!("{e}"))?;
            let (rh, rw) = internals.key_hw;
            let blocks = if internals.cross { 2 } else { 1 };
            let map = ops::reshape(&per_key, &[blocks, rh, rw]).map_err(|e| anyhow!("{e}"))?;
            let path = dir.join(format!("attn_stage{}.tsr", i + 1));
            io::write_tsr(&path, &map).map_err(|e| anyhow!("{e}"))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(0)
}

fn collect_pgms(root: &Path) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, base, out)?;
            } else if path.extension().and_then(|e| e.to_str()) == Some("pgm") {
                out.push(path.strip_prefix(base).expect("under base").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

#[derive(serde::Serialize)]
struct EvalRow {
    name: String,
    frames: usize,
    j: f32,
    f: f32,
    g: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    mae: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    f_beta_max: Option<f32>,
}

#[derive(serde::Serialize)]
struct EvalReport {
    global: EvalRow,
    sequences: Vec<EvalRow>,
}

fn cmd_eval(pred: &Path, gt: &Path, prob: Option<&Path>, tol: Option<usize>) -> Result<i32> {
    let gt_frames = collect_pgms(gt)?;
    if gt_frames.is_empty() {
        bail!("no .pgm masks under {}", gt.display());
    }
    let missing: Vec<String> = gt_frames
        .iter()
        .filter(|rel| !pred.join(rel).exists())
        .map(|rel| rel.display().to_string())
        .collect();
    if !missing.is_empty() {
        bail!(
            "{} predicted frames missing under {}: {}",
            missing.len(),
            pred.display(),
            missing.join(", ")
        );
    }

    // group frames by parent directory (sequence)
    let mut groups: Vec<(String, Vec<PathBuf>)> = Vec::new();
    for rel in gt_frames {
        let seq = rel
            .parent()
            .map(|p| p.display().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| ".".to_string());
        match groups.last_mut() {
            Some((name, frames)) if *name == seq => frames.push(rel),
            _ => groups.push((seq, vec![rel])),
        }
    }

    let mut sequences = Vec::new();
    let mut all_j = 0.0f64;
    let mut all_f = 0.0f64;
    let mut all_mae = 0.0f64;
    let mut all_fb = 0.0f64;
    let mut n_frames = 0usize;
    for (name, frames) in &groups {
        let mut js = 0.0f64;
        let mut fs = 0.0f64;
        let mut maes = 0.0f64;
        let mut fbs = 0.0f64;
        for rel in frames {
            let g = io::read_pgm_mask(&gt.join(rel)).map_err(|e| anyhow!("{e}"))?;
            let p = io::read_pgm_mask(&pred.join(rel)).map_err(|e| anyhow!("{e}"))?;
            let (h, w) = g.dims();
            let t = tol.unwrap_or_else(|| metrics::default_boundary_tol(h, w));
            js += f64::from(metrics::region_similarity(&p, &g).map_err(|e| anyhow!("{e}"))?);
            fs += f64::from(metrics::boundary_f(&p, &g, t).map_err(|e| anyhow!("{e}"))?);
            if let Some(prob_dir) = prob {
                let prob_path = prob_dir.join(rel).with_extension("tsr");
                let pm = io::read_tsr(&prob_path).map_err(|e| anyhow!("{e}"))?;
                maes += f64::from(metrics::mae(&pm, &g).map_err(|e| anyhow!("{e}"))?);
                fbs += f64::from(metrics::f_beta_max(&pm, &g).map_err(|e| anyhow!("{e}"))?);
            }
        }
        let n = frames.len() as f64;
        let (j, f) = ((js / n) as f32, (fs / n) as f32);
        sequences.push(EvalRow {
            name: name.clone(),
            frames: frames.len(),
            j,
            f,
            g: (j + f) / 2.0,
            mae: prob.map(|_| (maes / n) as f32),
            f_beta_max: prob.map(|_| (fbs / n) as f32),
        });
        all_j += js;
        all_f += fs;
        all_mae += maes;
        all_fb += fbs;
        n_frames += frames.len();
    }
    let n = n_frames as f64;
    let (j, f) = ((all_j / n) as f32, (all_f / n) as f32);
    let report = EvalReport {
        global: EvalRow {
            name: "GLOBAL".into(),
            frames: n_frames,
            j,
            f,
            g: (j + f) / 2.0,
            mae: prob.map(|_| (all_mae / n) as f32),
            f_beta_max: prob.map(|_| (all_fb / n) as f32),
        },
        sequences,
    };

    // machine-readable JSON on the first line, CSV after
    println!("{}", serde_json::to_string(&report)?);
    let header = if prob.is_some() {
        "sequence,frames,j,f,g,mae,f_beta_max"
    } else {
        "sequence,frames,j,f,g"
    };
    println!("{header}");
    for row in report.sequences.iter().chain(std::iter::once(&report.global)) {
        if prob.is_some() {
            println!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                row.name,
                row.frames,
                row.j,
                row.f,
                row.g,
                row.mae.unwrap_or(f32::NAN),
                row.f_beta_max.unwrap_or(f32::NAN)
            );
        } else {
            println!("{},{},{:.6},{:.6},{:.6}", row.name, row.frames, row.j, row.f, row.g);
        }
    }
    Ok(0)
}

fn cmd_check(suite: &str) -> Result<i32> {
    let suite: Suite = suite.parse().map_err(|e: String| anyhow!(e))?;
    let outcomes = run_suite(suite);
    let mut failed = 0;
    for o in &outcomes {
        if o.passed {
            println!("check {:<28} PASS", o.name);
        } else {
            println!("check {:<28} FAIL  {}", o.name, o.detail);
            failed += 1;
        }
    }
    println!("{} checks, {} failed", outcomes.len(), failed);
    Ok(if failed > 0 { 1 } else { 0 })
}
