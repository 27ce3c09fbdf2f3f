//! Command-line front end: synthesize data, train, evaluate, predict and
//! export scene flow.

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use pointseq::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use pointseq::config::ModelConfig;
use pointseq::data::pcseq::{read_pcseq, write_pcseq};
use pointseq::data::ply::write_ply;
use pointseq::data::{mnist, CloudSequence, DigitBank, SynthConfig};
use pointseq::error::Error;
use pointseq::losses::LossConfig;
use pointseq::model::{build_model, count_parameters, Model};
use pointseq::training::{
    self, evaluate_copy_last, evaluate_model, export_scene_flow, AdamState, DataSource,
    MetricNorm, TrainConfig,
};
use pointseq::rng;
use sha2::{Digest, Sha256};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_FAILURE: u8 = 1;
const EXIT_ABORTED: u8 = 3;
const EXIT_MISMATCH: u8 = 4;

#[derive(Parser)]
#[command(name = "pointseq", version, about = "Moving point cloud prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize bouncing-digit sequences into PCSEQ files.
    Synth {
        /// IDX image file (e.g. train-images-idx3-ubyte).
        #[arg(long)]
        mnist: PathBuf,
        /// Digits per sequence (1 or 2).
        #[arg(long, default_value_t = 1)]
        digits: usize,
        /// Number of sequences to write.
        #[arg(long)]
        count: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a directory of PCSEQ files.
    Train {
        /// Model config file.
        #[arg(long)]
        config: PathBuf,
        /// Directory of training sequences.
        #[arg(long)]
        data: PathBuf,
        /// Iterations to run.
        #[arg(long)]
        iters: u64,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Training log path (line-delimited records).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 1e-5)]
        lr: f64,
        #[arg(long, default_value_t = 5.0)]
        clip: f64,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        /// Feed ground truth back during rollout instead of predictions.
        #[arg(long, default_value_t = false)]
        teacher_forcing: bool,
        /// Write an intermediate checkpoint every N iterations (0 = never).
        #[arg(long, default_value_t = 0)]
        ckpt_every: u64,
    },
    /// Report CD/EMD metrics of a checkpoint over a directory of sequences.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also report a baseline ("copy-last").
        #[arg(long)]
        baseline: Option<String>,
        /// Metric normalization: frame-sum | per-point.
        #[arg(long, default_value = "frame-sum")]
        normalization: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Roll a checkpoint forward from a sequence's inputs.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// Input PCSEQ file (the first input_len frames are consumed).
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        horizon: usize,
        /// Output path: .pcseq for one file, .ply for per-frame files.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export predicted scene flow as PLY files with flow properties.
    ExportFlow {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        horizon: usize,
        /// Rows with flow magnitude below this are dropped.
        #[arg(long, default_value_t = 0.01)]
        threshold: f64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print shapes, parameter counts and format metadata.
    Inspect {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        seq: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {:#}", err);
            match err.downcast_ref::<Error>() {
                Some(Error::Aborted(_)) => ExitCode::from(EXIT_ABORTED),
                Some(Error::Shape { op, .. }) if *op == "checkpoint" => {
                    ExitCode::from(EXIT_MISMATCH)
                }
                _ => ExitCode::from(EXIT_FAILURE),
            }
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth { mnist, digits, count, out, seed } => synth(&mnist, digits, count, &out, seed),
        Command::Train {
            config,
            data,
            iters,
            out,
            resume,
            log,
            seed,
            batch,
            lr,
            clip,
            alpha,
            beta,
            teacher_forcing,
            ckpt_every,
        } => train_cmd(TrainArgs {
            config,
            data,
            iters,
            out,
            resume,
            log,
            seed,
            batch,
            lr,
            clip,
            alpha,
            beta,
            teacher_forcing,
            ckpt_every,
        }),
        Command::Eval { ckpt, data, baseline, normalization, seed } => {
            eval_cmd(&ckpt, &data, baseline.as_deref(), &normalization, seed)
        }
        Command::Predict { ckpt, input, horizon, out, seed } => {
            predict_cmd(&ckpt, &input, horizon, &out, seed)
        }
        Command::ExportFlow { ckpt, input, horizon, threshold, out, seed } => {
            export_flow_cmd(&ckpt, &input, horizon, threshold, &out, seed)
        }
        Command::Inspect { ckpt, seq } => inspect_cmd(ckpt.as_deref(), seq.as_deref()),
    }
}

fn synth(mnist: &Path, digits: usize, count: usize, out: &Path, seed: u64) -> anyhow::Result<()> {
    let images = mnist::load_mnist_idx(mnist)
        .with_context(|| format!("reading digit images from {}", mnist.display()))?;
    let bank = DigitBank::from_idx(&images)?;
    let cfg = match digits {
        1 => SynthConfig::one_digit(),
        2 => SynthConfig::two_digits(),
        other => bail!("--digits must be 1 or 2, got {}", other),
    };
    std::fs::create_dir_all(out)?;
    let mut files = Vec::with_capacity(count);
    for i in 0..count {
        let mut r = rng::stream(seed, i as u64);
        let seq = pointseq::data::synthesize_sequence(&cfg, &bank, &mut r)?;
        let name = format!("seq_{:05}.pcseq", i);
        write_pcseq(&out.join(&name), &seq)?;
        files.push(name);
    }
    let digest = {
        let desc = format!(
            "area={} digits={} length={} input_len={} threshold={} samples={} speed={:?}",
            cfg.area, cfg.digits, cfg.length, cfg.input_len, cfg.threshold, cfg.samples, cfg.speed_range
        );
        let mut h = Sha256::new();
        h.update(desc.as_bytes());
        let hex: String = h.finalize().iter().map(|b| format!("{:02x}", b)).collect();
        format!("sha256:{}", hex)
    };
    let manifest = serde_json::json!({
        "seed": seed,
        "config_digest": digest,
        "split": { "input": cfg.input_len, "output": cfg.length - cfg.input_len },
        "digits": digits,
        "samples": cfg.samples,
        "count": count,
        "files": files,
    });
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!("wrote {} sequences to {}", count, out.display());
    Ok(())
}

fn load_dir(dir: &Path) -> anyhow::Result<Vec<CloudSequence>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pcseq"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .pcseq files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| read_pcseq(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

struct TrainArgs {
    config: PathBuf,
    data: PathBuf,
    iters: u64,
    out: PathBuf,
    resume: Option<PathBuf>,
    log: Option<PathBuf>,
    seed: u64,
    batch: usize,
    lr: f64,
    clip: f64,
    alpha: f64,
    beta: f64,
    teacher_forcing: bool,
    ckpt_every: u64,
}

fn train_cmd(args: TrainArgs) -> anyhow::Result<()> {
    let config_text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let model_cfg = ModelConfig::parse(&config_text)?;
    let sequences = load_dir(&args.data)?;
    for (i, s) in sequences.iter().enumerate() {
        if s.len() != model_cfg.input_len + model_cfg.horizon {
            bail!(
                "sequence {} holds {} frames; config wants {} + {}",
                i,
                s.len(),
                model_cfg.input_len,
                model_cfg.horizon
            );
        }
    }
    let (mut model, mut adam, start, train_seed) = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.config != model_cfg {
                return Err(Error::shape(
                    "checkpoint",
                    format!("checkpoint config differs from {}", args.config.display()),
                )
                .into());
            }
            let (model, adam) = ckpt.restore()?;
            (model, adam, ckpt.iteration, ckpt.train_seed)
        }
        None => {
            let model = build_model(&model_cfg, args.seed)?;
            let adam = AdamState::new(&model.params);
            (model, adam, 0, args.seed)
        }
    };
    let tcfg = TrainConfig {
        learning_rate: args.lr,
        clip_bound: args.clip,
        loss: LossConfig { alpha: args.alpha, beta: args.beta, ..Default::default() },
        iterations: args.iters,
        batch_size: args.batch,
        seed: train_seed,
        input_len: model_cfg.input_len,
        horizon: model_cfg.horizon,
        teacher_forcing: args.teacher_forcing,
        normalization: MetricNorm::FrameSum,
    };
    let data = DataSource::Files(sequences);
    let mut log_file = match &args.log {
        Some(path) => Some(std::io::BufWriter::new(std::fs::File::create(path)?)),
        None => None,
    };
    // Run in chunks so intermediate checkpoints land between iterations.
    let mut done = 0u64;
    while done < args.iters {
        let chunk = if args.ckpt_every == 0 {
            args.iters - done
        } else {
            args.ckpt_every.min(args.iters - done)
        };
        let chunk_cfg = TrainConfig { iterations: chunk, ..tcfg.clone() };
        let records =
            training::train(&mut model, &data, &chunk_cfg, &mut adam, start + done, |r| {
                println!("{}", r.to_line());
            })?;
        if let Some(f) = log_file.as_mut() {
            for r in &records {
                writeln!(f, "{}", r.to_line())?;
            }
        }
        done += chunk;
        save_checkpoint(&args.out, &model, &adam, start + done, train_seed)?;
    }
    if args.iters == 0 {
        save_checkpoint(&args.out, &model, &adam, start, train_seed)?;
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn eval_cmd(
    ckpt: &Path,
    data: &Path,
    baseline: Option<&str>,
    normalization: &str,
    seed: u64,
) -> anyhow::Result<()> {
    let norm = parse_norm(normalization)?;
    let checkpoint = load_checkpoint(ckpt)?;
    let (model, _) = checkpoint.restore()?;
    let sequences = load_dir(data)?;
    let loss_cfg = LossConfig { emd_exact_threshold: 256, ..Default::default() };
    let (cd, emd) = evaluate_model(
        &model,
        &sequences,
        model.config.input_len,
        model.config.horizon,
        norm,
        &loss_cfg,
        seed,
    )?;
    println!("model     cd={:.6} emd={:.6}", cd, emd);
    match baseline {
        Some("copy-last") => {
            let (bcd, bemd) = evaluate_copy_last(
                &sequences,
                model.config.input_len,
                model.config.horizon,
                norm,
                &loss_cfg,
            )?;
            println!("baseline  cd={:.6} emd={:.6}", bcd, bemd);
        }
        Some(other) => bail!("unknown baseline {:?}; available: copy-last", other),
        None => {}
    }
    Ok(())
}

fn parse_norm(name: &str) -> anyhow::Result<MetricNorm> {
    match name {
        "frame-sum" => Ok(MetricNorm::FrameSum),
        "per-point" => Ok(MetricNorm::PerPoint),
        other => bail!("unknown normalization {:?}; use frame-sum or per-point", other),
    }
}

fn load_inputs(model: &Model, path: &Path) -> anyhow::Result<CloudSequence> {
    let seq = read_pcseq(path)?;
    if seq.len() < model.config.input_len {
        bail!(
            "{} holds {} frames; the model consumes {}",
            path.display(),
            seq.len(),
            model.config.input_len
        );
    }
    Ok(CloudSequence::new(seq.frames()[..model.config.input_len].to_vec())?)
}

fn predict_cmd(ckpt: &Path, input: &Path, horizon: usize, out: &Path, seed: u64) -> anyhow::Result<()> {
    let checkpoint = load_checkpoint(ckpt)?;
    let (model, _) = checkpoint.restore()?;
    let inputs = load_inputs(&model, input)?;
    let mut r = rng::seeded(seed);
    let state = model.encode(&inputs, &mut r)?;
    let pred = model.predict(&state, inputs.frame(inputs.len() - 1), horizon, &mut r)?;
    match out.extension().and_then(|e| e.to_str()) {
        Some("pcseq") => {
            write_pcseq(out, &pred)?;
            println!("wrote {} predicted frames to {}", pred.len(), out.display());
        }
        Some("ply") => {
            let stem = out.with_extension("");
            for (t, frame) in pred.frames().iter().enumerate() {
                let path = PathBuf::from(format!("{}_t{:02}.ply", stem.display(), t + 1));
                write_ply(&path, &frame.coords, None)?;
            }
            println!("wrote {} PLY frames next to {}", pred.len(), out.display());
        }
        _ => bail!("--out must end in .pcseq or .ply"),
    }
    Ok(())
}

fn export_flow_cmd(
    ckpt: &Path,
    input: &Path,
    horizon: usize,
    threshold: f64,
    out: &Path,
    seed: u64,
) -> anyhow::Result<()> {
    let checkpoint = load_checkpoint(ckpt)?;
    let (model, _) = checkpoint.restore()?;
    let inputs = load_inputs(&model, input)?;
    let mut r = rng::seeded(seed);
    let frames = export_scene_flow(&model, &inputs, horizon, threshold, &mut r)?;
    std::fs::create_dir_all(out)?;
    for (t, frame) in frames.iter().enumerate() {
        let path = out.join(format!("flow_t{:02}.ply", t + 1));
        write_ply(&path, &frame.points, Some(&frame.flow))?;
        println!("step {}: {} rows kept (|flow| >= {})", t + 1, frame.points.rows(), threshold);
    }
    Ok(())
}

fn inspect_cmd(ckpt: Option<&Path>, seq: Option<&Path>) -> anyhow::Result<()> {
    if ckpt.is_none() && seq.is_none() {
        bail!("inspect needs --ckpt or --seq");
    }
    if let Some(path) = ckpt {
        let checkpoint = load_checkpoint(path)?;
        print_checkpoint(&checkpoint)?;
    }
    if let Some(path) = seq {
        let sequence = read_pcseq(path)?;
        print_sequence(path, &sequence);
    }
    Ok(())
}

fn print_checkpoint(ckpt: &Checkpoint) -> anyhow::Result<()> {
    let (model, _) = ckpt.restore()?;
    let params = count_parameters(&model);
    println!("checkpoint version {}", ckpt.version);
    println!("iteration {}", ckpt.iteration);
    println!("model seed {} train seed {}", ckpt.model_seed, ckpt.train_seed);
    println!(
        "architecture {:?} cell {:?} points {} input_len {} horizon {}",
        model.config.architecture, model.config.cell, model.config.points,
        model.config.input_len, model.config.horizon
    );
    let (down, up) = model.shape_ladder();
    println!("unit resolutions {:?} propagation targets {:?}", down, up);
    println!("parameters {} ({:.3} million)", params, params as f64 / 1e6);
    for (name, tensor) in model.params.iter() {
        println!("  {:40} {:?}", name, tensor.shape());
    }
    Ok(())
}

fn print_sequence(path: &Path, seq: &CloudSequence) {
    println!("{}", path.display());
    println!(
        "frames {} points {} feature channels {}",
        seq.len(),
        seq.points_per_frame(),
        seq.feature_channels()
    );
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for frame in seq.frames() {
        for i in 0..frame.len() {
            let p = frame.point(i);
            for c in 0..3 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
    }
    println!(
        "bounds x [{:.3}, {:.3}] y [{:.3}, {:.3}] z [{:.3}, {:.3}]",
        lo[0], hi[0], lo[1], hi[1], lo[2], hi[2]
    );
}
