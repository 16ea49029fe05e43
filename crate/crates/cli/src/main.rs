//! `icm`: dataset generation, task and codec training, encode/decode,
//! latent fine-tuning and rate-performance evaluation.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use icm_core::bitstream::Bitstream;
use icm_core::checkpoint::{load_checkpoint, save_checkpoint};
use icm_core::codec::Codec;
use icm_core::eval::{bd_rate_table, emit_rd_csv, load_anchors, pareto_front, render_bd_table, RDPoint};
use icm_core::finetune::{emit_report, finetune_latent, finetune_report, render_report};
use icm_core::imageio::{load_image, read_dataset, save_png, write_dataset};
use icm_core::pipeline::{decode_image, encode_image, encode_latent, reencode};
use icm_core::task::{generate_proxy_dataset, task_metric, train_task_network, ProxySample, TaskNetwork};
use icm_core::train::{read_snapshots, run_training, Trainer, SNAPSHOT_INDEX};
use icm_core::{parallel, Error, Result};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "icm", version, about = "Learned image codec for machine consumption")]
struct Cli {
    /// Seed: the dataset seed for gen-dataset, the training seed elsewhere.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sequential, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker thread cap (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic proxy dataset to PNG files plus labels.csv.
    GenDataset(GenArgs),
    /// Train and freeze the proxy task network.
    TrainTask(TrainTaskArgs),
    /// Train the codec with the phased loss schedule.
    Train(TrainArgs),
    /// Compress an image (PNG or PPM).
    Encode(EncodeArgs),
    /// Decompress a bitstream to PNG.
    Decode(DecodeArgs),
    /// Fine-tune latents per image and report bpp/accuracy before and after.
    Finetune(FinetuneArgs),
    /// Emit RD curves and, given anchors, the BD-rate table.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainTaskArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Frozen task network checkpoint.
    #[arg(long)]
    task: PathBuf,
    /// Run directory for checkpoints, snapshots.csv, rd.csv and config.toml.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<u32>,
    /// Continue from a codec checkpoint; numbering resumes after its epoch.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Also re-encode the decoded latents and require identical bytes.
    #[arg(long)]
    verify: bool,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Report file (CSV).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    /// Number of images, taken from the end of the dataset.
    #[arg(long, default_value_t = 16)]
    count: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Training run directory containing snapshots.csv.
    #[arg(long)]
    run: PathBuf,
    /// Anchor CSV with header qp,resolution,bpp,score.
    #[arg(long)]
    anchors: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// With --dataset, report accuracy on uncompressed images.
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::Numeric(_) => 3,
        Error::FingerprintMismatch(_) => 4,
        Error::CorruptStream(_)
        | Error::CorruptFile(_)
        | Error::BadMagic { .. }
        | Error::UnsupportedVersion(_)
        | Error::Overrun { .. }
        | Error::SymbolOutOfRange { .. } => 5,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    parallel::set_deterministic(cli.deterministic);
    parallel::configure_threads(cli.jobs);
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        match cli.command {
            Command::GenDataset(_) => cfg.dataset.seed = s,
            _ => cfg.training.seed = s,
        }
    }
    let explicit = cli.config.is_some();
    match cli.command {
        Command::GenDataset(a) => gen_dataset(cfg, a),
        Command::TrainTask(a) => train_task(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Encode(a) => encode(&cfg, explicit, a),
        Command::Decode(a) => decode(&cfg, explicit, a),
        Command::Finetune(a) => finetune(cfg, explicit, a),
        Command::Eval(a) => eval(&cfg, a),
    }
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if !p.is_dir() {
        return Err(Error::Config(format!("{what} {} is not a directory", p.display())));
    }
    Ok(())
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        return Err(Error::Config(format!("{what} {} does not exist", p.display())));
    }
    Ok(())
}

fn gen_dataset(mut cfg: RunConfig, a: GenArgs) -> Result<()> {
    let d = &mut cfg.dataset;
    d.count = a.count.unwrap_or(d.count);
    d.image_size = a.image_size.unwrap_or(d.image_size);
    d.classes = a.classes.unwrap_or(d.classes);
    let data = generate_proxy_dataset(d.seed, d.count, d.image_size, d.classes)?;
    let manifest = write_dataset(&a.out, &data)?;
    cfg.echo(&a.out)?;
    println!("wrote {} samples, manifest {}", data.len(), manifest.display());
    Ok(())
}

fn load_task(cfg: &RunConfig, path: &Path) -> Result<TaskNetwork> {
    require_file(path, "task checkpoint")?;
    let tc = cfg.task_config();
    let ck = load_checkpoint(path, Some(&tc.fingerprint()))?;
    TaskNetwork::from_params(tc, ck.params)
}

/// Codec configuration: `--config` if given, else the `config.toml` next to the checkpoint.
fn load_codec(cfg: &RunConfig, explicit_config: bool, path: &Path) -> Result<Codec> {
    require_file(path, "checkpoint")?;
    let mut codec_cfg = cfg.codec.clone();
    if !explicit_config {
        let echoed = path.parent().unwrap_or(Path::new(".")).join("config.toml");
        if echoed.is_file() {
            codec_cfg = RunConfig::load(&echoed)?.codec;
        }
    }
    let ck = load_checkpoint(path, Some(&codec_cfg.fingerprint()))?;
    Codec::new(codec_cfg, ck.params)
}

fn split_holdout(data: Vec<ProxySample>, holdout: usize) -> Result<(Vec<ProxySample>, Vec<ProxySample>)> {
    if holdout >= data.len() {
        return Err(Error::Config(format!("dataset of {} samples cannot hold out {holdout}", data.len())));
    }
    let mut train = data;
    let val = train.split_off(train.len() - holdout);
    Ok((train, val))
}

fn accuracy(task: &TaskNetwork, samples: &[ProxySample]) -> Result<f64> {
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<_> = samples.iter().map(|s| s.label).collect();
    task_metric(task, &images, &labels)
}

fn train_task(mut cfg: RunConfig, a: TrainTaskArgs) -> Result<()> {
    require_dir(&a.dataset, "dataset")?;
    if let Some(e) = a.epochs {
        cfg.training.task_epochs = e;
    }
    cfg.validate()?;
    let data = read_dataset(&a.dataset)?;
    let holdout = ((data.len() as f64) * cfg.training.task_holdout).round() as usize;
    let (train, held) = split_holdout(data, holdout)?;
    let (net, report) = train_task_network(&train, cfg.task_config(), &cfg.task_train_config())?;
    save_checkpoint(&a.out, &net.params, None, report.epoch_loss.len() as u32)?;
    let final_loss = report.epoch_loss.last().copied().unwrap_or(f64::NAN);
    println!("train_loss={final_loss}");
    if held.is_empty() {
        println!("accuracy=n/a (no held-out samples)");
    } else {
        println!("accuracy={}", accuracy(&net, &held)?);
    }
    Ok(())
}

fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    require_dir(&a.dataset, "dataset")?;
    if let Some(e) = a.epochs {
        cfg.training.epochs = e;
    }
    cfg.validate()?;
    let task = load_task(&cfg, &a.task)?;
    let data = read_dataset(&a.dataset)?;
    let (train, val) = split_holdout(data, cfg.dataset.val_count)?;
    let tc = cfg.train_config();
    let mut trainer = match &a.resume {
        Some(p) => {
            require_file(p, "resume checkpoint")?;
            Trainer::resume(p, cfg.codec.clone(), tc.optimizer.clone())?
        }
        None => Trainer::new(Codec::build(cfg.codec.clone(), tc.seed)?, tc.optimizer.clone()),
    };
    cfg.echo(&a.out)?;
    let sp = tc.schedule.clone();
    let snaps = run_training(&mut trainer, &train, &val, &task, &tc, &a.out, |r| {
        let m = &r.metrics;
        if let Some(i) = sp.boundaries().iter().position(|&p| p == m.epoch) {
            eprintln!("phase {} begins at epoch {}", i + 2, m.epoch);
        }
        eprintln!(
            "epoch {:>4} lr={:.3e} w_rate={:.4e} w_task={:.4e} L_rate={:.2} L_mse={:.3} L_task={:.4} val_bpp={:.4} val_acc={:.4}",
            m.epoch, m.learning_rate, m.weights.w_rate, m.weights.w_task, m.l_rate, m.l_mse, m.l_task, r.snapshot.val_bpp, r.snapshot.val_acc
        );
    })?;
    let pts = snaps.iter().map(|s| RDPoint::new(s.val_bpp, s.val_acc, format!("epoch{}", s.epoch))).collect();
    let mut curves = BTreeMap::new();
    curves.insert(cfg.eval.curve_name.clone(), pts);
    emit_rd_csv(&curves, &a.out.join("rd.csv"))?;
    println!("trained through epoch {}; index {}", trainer.next_epoch.saturating_sub(1), a.out.join(SNAPSHOT_INDEX).display());
    Ok(())
}

fn encode(cfg: &RunConfig, explicit: bool, a: EncodeArgs) -> Result<()> {
    require_file(&a.input, "input image")?;
    let codec = load_codec(cfg, explicit, &a.checkpoint)?;
    let x = load_image(&a.input)?;
    let enc = encode_image(&codec, &x)?;
    let bytes = enc.bitstream.serialize();
    if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.output, &bytes)?;
    println!("bpp={}", enc.bpp());
    Ok(())
}

fn decode(cfg: &RunConfig, explicit: bool, a: DecodeArgs) -> Result<()> {
    require_file(&a.input, "bitstream")?;
    let codec = load_codec(cfg, explicit, &a.checkpoint)?;
    let bytes = fs::read(&a.input)?;
    let bs = Bitstream::parse(&bytes)?;
    let img = decode_image(&codec, &bs)?;
    save_png(&a.output, &img)?;
    if a.verify {
        if reencode(&codec, &bytes)? != bytes {
            return Err(Error::CorruptStream("re-encoding the decoded latents changed the bitstream".into()));
        }
        println!("reencode=identical");
    }
    Ok(())
}

fn finetune(mut cfg: RunConfig, explicit: bool, a: FinetuneArgs) -> Result<()> {
    require_dir(&a.dataset, "dataset")?;
    if let Some(i) = a.iterations {
        cfg.finetune.iterations = i;
    }
    cfg.finetune.validate()?;
    let codec = load_codec(&cfg, explicit, &a.checkpoint)?;
    let task = load_task(&cfg, &a.task)?;
    let data = read_dataset(&a.dataset)?;
    let take = a.count.min(data.len());
    let set = &data[data.len() - take..];
    let ft = cfg.finetune.clone();
    let results = parallel::map_indexed(set.len(), |i| -> Result<((f64, f64), (f64, f64))> {
        let s = &set[i];
        let (h, w) = (s.image.shape().h, s.image.shape().w);
        let y = codec.encode(&s.image)?;
        let measure = |y: &icm_core::autodiff::Tensor| -> Result<(f64, f64)> {
            let enc = encode_latent(&codec, y, w, h)?;
            let recon = codec.decode(&enc.yhat)?;
            let correct = task.predict(&recon)?[0] == s.label;
            Ok((enc.bpp(), if correct { 1.0 } else { 0.0 }))
        };
        let before = measure(&y)?;
        let tuned = finetune_latent(&codec, &task, &s.image, &y, &ft)?;
        Ok((before, measure(&tuned.y)?))
    });
    let mut before = Vec::new();
    let mut after = Vec::new();
    for r in results {
        let (b, a) = r?;
        before.push(b);
        after.push(a);
    }
    let row = finetune_report("all", &before, &after)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, emit_report(std::slice::from_ref(&row))?)?;
    print!("{}", render_report(&[row], &cfg.eval.metric_name));
    Ok(())
}

fn eval(cfg: &RunConfig, a: EvalArgs) -> Result<()> {
    let index = a.run.join(SNAPSHOT_INDEX);
    require_file(&index, "snapshot index")?;
    let snaps = read_snapshots(&index)?;
    let ours: Vec<RDPoint> = snaps.iter().map(|s| RDPoint::new(s.val_bpp, s.val_acc, format!("epoch{}", s.epoch))).collect();
    if ours.is_empty() {
        return Err(Error::Empty("snapshot index".into()));
    }
    fs::create_dir_all(&a.out)?;
    let front = pareto_front(&ours)?;
    let mut curves = BTreeMap::new();
    curves.insert(cfg.eval.curve_name.clone(), ours);
    curves.insert(format!("{}_pareto", cfg.eval.curve_name), front.clone());
    if let (Some(t), Some(d)) = (&a.task, &a.dataset) {
        require_dir(d, "dataset")?;
        let task = load_task(cfg, t)?;
        let data = read_dataset(d)?;
        let take = cfg.dataset.val_count.min(data.len());
        println!("upper_anchor_accuracy={}", accuracy(&task, &data[data.len() - take..])?);
    }
    match &a.anchors {
        Some(p) => {
            require_file(p, "anchor file")?;
            let grid = load_anchors(p)?;
            for (res, pts) in grid.by_resolution() {
                curves.insert(format!("anchor_{res}%"), pts);
            }
            curves.insert("anchor_pareto".into(), pareto_front(&grid.all_points())?);
            let table = bd_rate_table(&grid, &front)?;
            let text = render_bd_table(&[(cfg.eval.curve_name.as_str(), &table)]);
            for (col, r) in &table.columns {
                if let icm_core::eval::BDRateResult::Undefined { reason } = r {
                    eprintln!("BD-rate {col} undefined: {reason}");
                }
            }
            fs::write(a.out.join("bd_rate.txt"), &text)?;
            print!("{text}");
        }
        None => eprintln!("no anchors given; BD-rate skipped"),
    }
    emit_rd_csv(&curves, &a.out.join("rd.csv"))?;
    Ok(())
}
