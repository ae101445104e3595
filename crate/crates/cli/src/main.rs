//! Single executable exposing the full pipeline: synthetic dataset
//! generation, class statistics, training, tiled inference, evaluation, and
//! the runtime self-test suite.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use dasegformer_core::config::{ResolvedConfig, RunConfig};
use dasegformer_core::datamodel::{
    compute_class_frequencies, generate_synthetic_scene, load_dataset, read_image_png,
    read_mask_png, write_image_png, write_mask_png, Image, LabelMask, Split,
};
use dasegformer_core::error::Error;
use dasegformer_core::metrics::{accumulate, iou_per_class, mean_iou, report, ConfusionMatrix};
use dasegformer_core::model::{
    init_parameters, load_checkpoint, validate_against_config, SegmentationModel,
};
use dasegformer_core::selftest;
use dasegformer_core::tiler::{argmax_mask, plan_tiles, tiled_inference};
use dasegformer_core::trainer;

#[derive(Parser)]
#[command(name = "dasegformer", version, about = "Damage-aware semantic segmentation pipeline")]
struct Cli {
    /// TOML configuration document; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sampler/tiler worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Pin single-threaded deterministic mode (same as --workers 1).
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset split.
    Synth(SynthArgs),
    /// Print and export per-class pixel statistics for a split.
    Stats(StatsArgs),
    /// Train a model; emits checkpoints and a step log under the run dir.
    Train(TrainArgs),
    /// Sliding-window inference; emits masks and a run manifest.
    Infer(InferArgs),
    /// Compare predicted masks against ground truth; emits metrics.csv.
    Eval(EvalArgs),
    /// Run the oracle/invariant suites; nonzero exit on any failure.
    Selftest,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of scenes to generate.
    #[arg(long)]
    count: usize,
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    /// Split to populate.
    #[arg(long, default_value = "train")]
    split: Split,
}

#[derive(Args)]
struct StatsArgs {
    /// Dataset root (defaults to paths.data_root from the config).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    split: Split,
    /// Optional CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root (defaults to paths.data_root from the config).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory (defaults to <run_root>/<timestamp>).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Print a progress line every N steps.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// A PNG image or a directory of PNGs.
    #[arg(long)]
    input: PathBuf,
    /// Output directory (defaults to <run_root>/<timestamp>/preds).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write one 16-bit probability raster per class.
    #[arg(long)]
    probs: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted masks.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth masks.
    #[arg(long)]
    truth: PathBuf,
    /// Metrics CSV path (defaults to <run_root>/<timestamp>/metrics/metrics.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut run_cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        run_cfg.seed = Some(seed);
        run_cfg.train.seed = 0; // re-derive from the new base seed
    }
    if cli.deterministic {
        run_cfg.workers = 1;
    } else if let Some(w) = cli.workers {
        run_cfg.workers = w;
    }
    let cfg = run_cfg.resolve()?;

    match cli.command {
        Command::Synth(args) => cmd_synth(&cfg, args),
        Command::Stats(args) => cmd_stats(&cfg, args),
        Command::Train(args) => cmd_train(&cfg, args),
        Command::Infer(args) => cmd_infer(&cfg, args),
        Command::Eval(args) => cmd_eval(&cfg, args),
        Command::Selftest => cmd_selftest(),
    }
}

/// `run/<timestamp>` with a numeric suffix on collision.
fn make_run_dir(root: &Path) -> Result<PathBuf, Error> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
    let mut dir = root.join(&stamp);
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{stamp}-{n}"));
        n += 1;
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn split_seed_base(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Val => 1_000_000,
        Split::Test => 2_000_000,
    }
}

fn cmd_synth(cfg: &ResolvedConfig, args: SynthArgs) -> Result<(), Error> {
    let img_dir = args.out.join(args.split.as_str()).join("images");
    let mask_dir = args.out.join(args.split.as_str()).join("masks");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    std::fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;

    let base = cfg.seed + split_seed_base(args.split);
    for i in 0..args.count {
        let (image, mask) = generate_synthetic_scene(base + i as u64, &cfg.synth)?;
        let stem = format!("scene_{i:05}");
        write_image_png(&image, &img_dir.join(format!("{stem}.png")))?;
        write_mask_png(&mask, &mask_dir.join(format!("{stem}.png")))?;
    }

    let classes_path = args.out.join("classes.toml");
    let classes_doc = toml_classes(cfg);
    std::fs::write(&classes_path, classes_doc).map_err(|e| Error::io(&classes_path, e))?;
    println!(
        "wrote {} scenes ({}x{}) to {}",
        args.count,
        cfg.synth.height,
        cfg.synth.width,
        args.out.join(args.split.as_str()).display()
    );
    Ok(())
}

fn toml_classes(cfg: &ResolvedConfig) -> String {
    let mut doc = String::from("# id -> name -> rare flag\n");
    doc.push_str(&format!("ignore_id = {}\n\n", cfg.classes.ignore_id));
    for c in &cfg.classes.classes {
        doc.push_str(&format!(
            "[[classes]]\nid = {}\nname = \"{}\"\nrare = {}\n\n",
            c.id, c.name, c.rare
        ));
    }
    doc
}

fn cmd_stats(cfg: &ResolvedConfig, args: StatsArgs) -> Result<(), Error> {
    let root = args.data.unwrap_or_else(|| cfg.paths.data_root.clone());
    let index = load_dataset(&root, args.split, &cfg.classes)?;
    println!("{} image/mask pairs in {}", index.len(), args.split.as_str());
    let table = compute_class_frequencies(&index, &cfg.classes)?;
    let csv = table.to_csv();
    print!("{csv}");
    if let Some(out) = args.out {
        if let Some(parent) = out.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&out, csv).map_err(|e| Error::io(&out, e))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn load_split_into_memory(
    root: &Path,
    split: Split,
    cfg: &ResolvedConfig,
) -> Result<Vec<(Image, LabelMask)>, Error> {
    let index = load_dataset(root, split, &cfg.classes)?;
    let mut out = Vec::with_capacity(index.len());
    for (img_path, mask_path) in &index.pairs {
        let image = read_image_png(img_path)?;
        let mask = read_mask_png(mask_path)?;
        if image.height != mask.height || image.width != mask.width {
            return Err(Error::Validation(format!(
                "{} and {} have mismatched dimensions",
                img_path.display(),
                mask_path.display()
            )));
        }
        mask.validate(&cfg.classes)
            .map_err(|e| Error::Validation(format!("{}: {e}", mask_path.display())))?;
        out.push((image, mask));
    }
    Ok(out)
}

fn cmd_train(cfg: &ResolvedConfig, args: TrainArgs) -> Result<(), Error> {
    let root = args.data.unwrap_or_else(|| cfg.paths.data_root.clone());
    let data = load_split_into_memory(&root, Split::Train, cfg)?;
    let run_dir = match args.run_dir {
        Some(d) => {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            d
        }
        None => make_run_dir(&cfg.paths.run_root)?,
    };
    let ckpt_dir = run_dir.join("checkpoints");
    let log_dir = run_dir.join("logs");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    std::fs::create_dir_all(&log_dir).map_err(|e| Error::io(&log_dir, e))?;

    let init = init_parameters(&cfg.model, cfg.train.seed)?;
    println!(
        "training on {} images, {} parameters, run dir {}",
        data.len(),
        init.total_parameters(),
        run_dir.display()
    );

    // Epoch-by-epoch driver so progress lands on stdout as it happens.
    let state = trainer::OptimizerState::zeros_like(&init);
    let mut t = trainer::Trainer::new(
        &data,
        &cfg.model,
        &cfg.train,
        &cfg.ohem,
        &cfg.dice,
        &cfg.sample,
        &cfg.augment,
        cfg.classes.ignore_id,
        init,
        state,
        0,
    )?;
    let fingerprint = cfg.model.fingerprint();
    let total = t.total_steps();
    let started = Instant::now();
    while t.step < total {
        let report = t.run_step()?;
        let done = t.step;
        if done % args.log_every.max(1) == 0 || done == total {
            println!(
                "step {done}/{total} loss_total {:.4} (ohem {:.4} dice {:.4}) [{:.1}s]",
                report.loss_total,
                report.loss_ohem,
                report.loss_dice,
                started.elapsed().as_secs_f64()
            );
        }
        let spe = t.steps_per_epoch();
        let epoch_done = done % spe == 0;
        let epoch = done / spe;
        if epoch_done && epoch % cfg.train.checkpoint_every == 0 && done != total {
            dasegformer_core::model::save_checkpoint(
                &t.params,
                &fingerprint,
                dasegformer_core::model::CheckpointDtype::F64,
                &ckpt_dir.join(format!("checkpoint_epoch{epoch:04}.dsck")),
            )?;
        }
    }
    dasegformer_core::model::save_checkpoint(
        &t.params,
        &fingerprint,
        dasegformer_core::model::CheckpointDtype::F64,
        &ckpt_dir.join("checkpoint_final.dsck"),
    )?;
    dasegformer_core::model::save_checkpoint(
        &t.state.to_container(&t.params),
        &fingerprint,
        dasegformer_core::model::CheckpointDtype::F64,
        &ckpt_dir.join("optimizer_final.dsck"),
    )?;
    let log_path = log_dir.join("training_log.csv");
    std::fs::write(&log_path, trainer::log_to_csv(&t.log)).map_err(|e| Error::io(&log_path, e))?;
    println!(
        "done in {:.1}s; final checkpoint {}",
        started.elapsed().as_secs_f64(),
        ckpt_dir.join("checkpoint_final.dsck").display()
    );
    Ok(())
}

/// Pads an image with zeros bottom/right so both dims reach `tile`.
fn pad_to_tile(image: &Image, tile: usize) -> Image {
    if image.height >= tile && image.width >= tile {
        return image.clone();
    }
    let ph = image.height.max(tile);
    let pw = image.width.max(tile);
    let mut out = Image::zeros(ph, pw, image.channels);
    for ch in 0..image.channels {
        for r in 0..image.height {
            for c in 0..image.width {
                out.set(r, c, ch, image.get(r, c, ch));
            }
        }
    }
    out
}

fn cmd_infer(cfg: &ResolvedConfig, args: InferArgs) -> Result<(), Error> {
    let (params, fingerprint, _) = load_checkpoint(&args.checkpoint)?;
    if fingerprint != cfg.model.fingerprint() {
        return Err(Error::Config(format!(
            "checkpoint fingerprint {} does not match the configured model {}",
            &fingerprint[..12.min(fingerprint.len())],
            &cfg.model.fingerprint()[..12]
        )));
    }
    validate_against_config(&params, &cfg.model)?;
    let model = SegmentationModel::new(cfg.model.clone(), params)?;

    let out_dir = match args.out {
        Some(d) => d,
        None => make_run_dir(&cfg.paths.run_root)?.join("preds"),
    };
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let inputs: Vec<PathBuf> = if args.input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&args.input)
            .map_err(|e| Error::io(&args.input, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().and_then(|s| s.to_str()) == Some("png"))
            .collect();
        v.sort();
        v
    } else {
        vec![args.input.clone()]
    };
    if inputs.is_empty() {
        return Err(Error::Validation(format!(
            "no PNG inputs found in {}",
            args.input.display()
        )));
    }

    let mut manifest_images = Vec::new();
    for path in &inputs {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        let image = read_image_png(path)?;
        let (h, w) = (image.height, image.width);
        let padded = pad_to_tile(&image, cfg.tile.tile_size);
        let started = Instant::now();
        let grid = plan_tiles(padded.height, padded.width, &cfg.tile)?;
        let probs_full = tiled_inference(&model, &padded, &cfg.tile, cfg.workers)?;
        let wall_ms = started.elapsed().as_millis();

        // Crop any padding back off before export.
        let c = probs_full.num_classes;
        let mut probs = dasegformer_core::datamodel::ProbabilityMap::zeros(h, w, c);
        for r in 0..h {
            for col in 0..w {
                let src = (r * padded.width + col) * c;
                let dst = (r * w + col) * c;
                probs.data[dst..dst + c].copy_from_slice(&probs_full.data[src..src + c]);
            }
        }
        let mask = argmax_mask(&probs);
        write_mask_png(&mask, &out_dir.join(format!("{stem}.png")))?;
        if args.probs {
            for k in 0..c {
                let mut plane = vec![0u16; h * w];
                for px in 0..h * w {
                    plane[px] = (probs.data[px * c + k].clamp(0.0, 1.0) * 65535.0).round() as u16;
                }
                let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
                    w as u32, h as u32, plane,
                )
                .expect("sized buffer");
                let p = out_dir.join(format!("{stem}_prob_c{k:02}.png"));
                img.save(&p).map_err(|e| Error::image(&p, e))?;
            }
        }

        let rows = grid
            .origins
            .iter()
            .map(|o| o.0)
            .collect::<std::collections::BTreeSet<_>>();
        let cols = grid
            .origins
            .iter()
            .map(|o| o.1)
            .collect::<std::collections::BTreeSet<_>>();
        manifest_images.push(serde_json::json!({
            "name": stem,
            "height": h,
            "width": w,
            "grid": { "rows": rows.len(), "cols": cols.len() },
            "tile_count": grid.tile_count(),
            "wall_time_ms": wall_ms,
        }));
        println!("{stem}: {} tiles in {} ms", grid.tile_count(), wall_ms);
    }

    let manifest = serde_json::json!({
        "tile_size": cfg.tile.tile_size,
        "stride": cfg.tile.stride,
        "checkpoint": args.checkpoint.display().to_string(),
        "workers": cfg.workers,
        "images": manifest_images,
    });
    let manifest_path = out_dir.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::io(&manifest_path, e))?;
    println!("wrote {}", manifest_path.display());
    Ok(())
}

fn cmd_eval(cfg: &ResolvedConfig, args: EvalArgs) -> Result<(), Error> {
    let list_masks = |dir: &Path| -> Result<Vec<PathBuf>, Error> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().and_then(|s| s.to_str()) == Some("png"))
            .collect();
        v.sort();
        Ok(v)
    };
    let preds = list_masks(&args.pred)?;
    if preds.is_empty() {
        return Err(Error::Validation(format!(
            "no predicted masks in {}",
            args.pred.display()
        )));
    }
    let mut cm = ConfusionMatrix::new(cfg.classes.num_classes());
    for pred_path in &preds {
        let stem = pred_path.file_name().unwrap();
        let truth_path = args.truth.join(stem);
        if !truth_path.exists() {
            return Err(Error::Validation(format!(
                "no ground truth for {}",
                pred_path.display()
            )));
        }
        let pred = read_mask_png(pred_path)?;
        let truth = read_mask_png(&truth_path)?;
        accumulate(&mut cm, &pred, &truth, &cfg.classes)?;
    }
    let csv = report(&cm, &cfg.classes, cfg.eval.undefined_policy);
    let out = match args.out {
        Some(p) => p,
        None => make_run_dir(&cfg.paths.run_root)?
            .join("metrics")
            .join("metrics.csv"),
    };
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(&out, &csv).map_err(|e| Error::io(&out, e))?;
    print!("{csv}");
    let miou = mean_iou(&iou_per_class(&cm), cfg.eval.undefined_policy);
    match miou {
        Some(v) => println!("mIoU={v:.4}"),
        None => println!("mIoU=undefined"),
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_selftest() -> Result<(), Error> {
    let results = selftest::run_all();
    let mut failed = 0;
    for r in &results {
        if r.passed {
            println!("PASS {} — {}", r.name, r.detail);
        } else {
            println!("FAIL {} — {}", r.name, r.detail);
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::Contract(format!("{failed} self-test(s) failed")));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}
