use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use duet_core::candle::{DType, Device};
use duet_core::checkpoint::load_model;
use duet_core::data::fixture::write_shapes_fixture;
use duet_core::data::{DatasetManifest, PairDataset, Split};
use duet_core::encoder::pretrain::{
    continue_pretraining, pretrain, surrogate_tokenizer, PretrainConfig,
};
use duet_core::encoder::{DualEncoder, EncoderConfig};
use duet_core::eval::{evaluate, evaluate_with_index, EvalOptions, Protocol};
use duet_core::index::GalleryIndex;
use duet_core::trainer::{TrainConfig, TrainEvent, Trainer};
use duet_server::ServiceConfig;

#[derive(Parser)]
#[command(name = "duet", version, about = "Sketch+text composed image retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the converter, prompt and layer norms from a TOML config.
    Train(TrainArgs),
    /// Encode a manifest's gallery into an index directory.
    Index(IndexArgs),
    /// Rank an index against one sketch and optional text.
    Query(QueryArgs),
    /// Run an evaluation protocol and print a JSON report.
    Eval(EvalArgs),
    /// Serve the HTTP API. DUET_* environment variables set defaults; flags win.
    Serve(ServeArgs),
    /// Write the procedural shapes dataset.
    Fixture {
        #[arg(long, default_value = "fixtures/shapes")]
        out: PathBuf,
    },
    /// Pretrain a small surrogate backbone on procedural shapes.
    Backbone(BackboneArgs),
}

#[derive(Args)]
struct BackboneArgs {
    #[arg(long, default_value = "fixtures/backbone/desk")]
    out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Weight of the sketch-photo term; 0 trains on captions only.
    #[arg(long, default_value_t = 1.0)]
    pair_weight: f64,
    /// Continue pretraining from this backbone instead of a random one.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// `dotted.key=value`, applied after the file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint directory (for example `<output>/latest`).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Split whose photos form the gallery, unless the manifest lists one.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    sketch: PathBuf,
    #[arg(long)]
    text: Option<String>,
    #[arg(long)]
    connector: Option<String>,
    #[arg(short, long, default_value_t = 10)]
    k: usize,
    /// Defaults to the checkpoint recorded in the index.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value = "fine_grained")]
    protocol: String,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Drop all text and rank with the sketch alone.
    #[arg(long)]
    sketch_only: bool,
    /// Prebuilt index; otherwise the split's gallery is encoded on the fly.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    bind: Option<std::net::SocketAddr>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long)]
    gallery_root: Option<PathBuf>,
    #[arg(long)]
    max_upload_bytes: Option<usize>,
    #[arg(long)]
    k_cap: Option<usize>,
    /// Allowed CORS origin; repeatable. Without any, all origins are allowed.
    #[arg(long = "cors-origin")]
    cors_origins: Vec<String>,
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => bail!("unknown split {other:?} (expected train or test)"),
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let config = TrainConfig::load(&args.config, &args.overrides)?;
    let mut trainer = match &args.resume {
        Some(dir) => Trainer::resume(config, dir)?,
        None => Trainer::new(config)?,
    };
    let out = trainer.config().output.clone();
    log::info!("training into {}", out.display());
    let state = trainer.fit(|e| match e {
        TrainEvent::Step(r) => log::debug!(
            "step {} loss {:.4} |g| {:.3}",
            r.global_step,
            r.loss,
            r.grad_norm
        ),
        TrainEvent::Epoch(r) => log::info!(
            "epoch {} loss {:.4}{} ({:.1}s)",
            r.epoch,
            r.mean_loss,
            r.val_acc1
                .map(|a| format!(" val acc@1 {a:.1}"))
                .unwrap_or_default(),
            r.seconds
        ),
    })?;
    println!(
        "finished {} epochs ({} steps); best val acc@1 {}; checkpoints in {}",
        state.epoch,
        state.global_step,
        state
            .best_metric
            .map(|a| format!("{a:.1}"))
            .unwrap_or_else(|| "n/a".into()),
        out.display()
    );
    Ok(())
}

fn index(args: IndexArgs) -> Result<()> {
    let (model, card) = load_model(&args.checkpoint, args.backbone.as_deref(), &Device::Cpu)?;
    let loaded = DatasetManifest::load(&args.manifest)?;
    let photos = loaded
        .manifest
        .gallery_photos(&loaded.root, parse_split(&args.split)?);
    let started = Instant::now();
    let mut index = GalleryIndex::build(&model, &photos, args.batch_size)?;
    index.set_checkpoint(&std::path::absolute(&args.checkpoint)?);
    index.save(&args.out)?;
    println!(
        "indexed {} photos ({} skipped) with fingerprint {} in {:.1}s -> {}",
        index.len(),
        index.skipped().len(),
        card.fingerprint,
        started.elapsed().as_secs_f64(),
        args.out.display()
    );
    Ok(())
}

fn query(args: QueryArgs) -> Result<()> {
    let index = GalleryIndex::load(&args.index)?;
    let checkpoint = match (&args.checkpoint, index.checkpoint()) {
        (Some(c), _) => c.clone(),
        (None, Some(c)) => c.to_path_buf(),
        (None, None) => bail!("the index does not record its checkpoint; pass --checkpoint"),
    };
    let (model, _) = load_model(&checkpoint, args.backbone.as_deref(), &Device::Cpu)?;
    let sketch =
        image::open(&args.sketch).with_context(|| format!("reading {}", args.sketch.display()))?;
    let result = index.search(
        &model,
        &sketch,
        args.text.as_deref(),
        args.connector.as_deref(),
        args.k,
    )?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let protocol: Protocol = args.protocol.parse()?;
    let (model, _) = load_model(&args.checkpoint, args.backbone.as_deref(), &Device::Cpu)?;
    let enc = model.encoder();
    let dataset = PairDataset::open(
        &args.manifest,
        enc.config().image_resolution,
        enc.dtype(),
        enc.device(),
    )?;
    let options = EvalOptions {
        split: parse_split(&args.split)?,
        sketch_only: args.sketch_only,
    };
    let report = match &args.index {
        Some(dir) => evaluate_with_index(
            protocol,
            &dataset,
            &model,
            &GalleryIndex::load(dir)?,
            options,
        )?,
        None => evaluate(protocol, &dataset, &model, options)?,
    };
    let json = report.to_json()?;
    if let Some(out) = &args.out {
        write_file(out, &json)?;
    }
    println!("{json}");
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn serve(args: ServeArgs) -> Result<()> {
    let mut config = ServiceConfig::default();
    config
        .apply_env(std::env::vars())
        .map_err(anyhow::Error::msg)?;
    if let Some(v) = args.bind {
        config.bind = v;
    }
    if let Some(v) = args.checkpoint {
        config.checkpoint = v;
    }
    if let Some(v) = args.index {
        config.index = v;
    }
    if let Some(v) = args.backbone {
        config.backbone = Some(v);
    }
    if let Some(v) = args.gallery_root {
        config.gallery_root = Some(v);
    }
    if let Some(v) = args.max_upload_bytes {
        config.max_upload_bytes = v;
    }
    if let Some(v) = args.k_cap {
        config.k_cap = v;
    }
    if !args.cors_origins.is_empty() {
        config.cors_origins = args.cors_origins;
    }
    config.validate().map_err(anyhow::Error::msg)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    runtime.block_on(duet_server::serve(config))?;
    Ok(())
}

fn backbone(args: BackboneArgs) -> Result<()> {
    let cfg = PretrainConfig {
        steps: args.steps,
        batch_size: args.batch_size,
        seed: args.seed,
        pair_weight: args.pair_weight,
        ..Default::default()
    };
    let start = Instant::now();
    let steps = args.steps;
    let log_step = |step: usize, loss: f64| {
        if step.is_multiple_of(50) || step + 1 == steps {
            log::info!(
                "step {step} loss {loss:.4} ({:.0}s)",
                start.elapsed().as_secs_f64()
            );
        }
    };
    let encoder = match &args.init {
        Some(dir) => {
            let init = DualEncoder::load_unfrozen(dir, DType::F32, &Device::Cpu)
                .with_context(|| format!("loading backbone {}", dir.display()))?;
            continue_pretraining(init, &cfg, log_step)?
        }
        None => {
            let tok = surrogate_tokenizer();
            let config = EncoderConfig::desk_small(tok.vocab_size());
            pretrain(config, tok, &cfg, log_step)?
        }
    };
    let out = args.out;
    encoder.save(&out)?;
    println!(
        "saved backbone {} to {}",
        encoder.base_fingerprint(),
        out.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(a) => train(a),
        Command::Index(a) => index(a),
        Command::Query(a) => query(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
        Command::Fixture { out } => {
            let (main, ambiguous) = write_shapes_fixture(&out)?;
            println!(
                "wrote {} pairs and an ambiguous set of {} queries to {}",
                main.pairs.len(),
                ambiguous.pairs.len(),
                out.display()
            );
            Ok(())
        }
        Command::Backbone(a) => backbone(a),
    }
}
