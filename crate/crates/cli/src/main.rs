use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use patchformer::augment::{cutmix_pairs, CutMixConfig};
use patchformer::config::RunConfig;
use patchformer::data_io::{load_dataset, synth_dataset, write_labels, Entry, Split};
use patchformer::experiments::{ablate_interp, ablate_temp, cost_report, interp_csv, temp_csv};
use patchformer::image::{read_image, write_image, ImageBuffer};
use patchformer::metrics::{metrics_report, write_roc_files};
use patchformer::model::{load_checkpoint, read_checkpoint, Model};
use patchformer::resample::{band_limited_pattern, resample_with_stats, KernelSpec};
use patchformer::tokenizer::{patch_elements, spt_concat, PatchGrid, PatchMode};
use patchformer::training::{evaluate, prepare_data, run_training, EFFECTIVE_CONFIG_FILE};
use patchformer::Error;

#[derive(Parser)]
#[command(name = "patchformer", version, about = "Patch-based attention image classification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rescale an image with a Lanczos, bicubic or bilinear kernel.
    Resample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Output size as HxW.
        #[arg(long)]
        size: String,
        #[arg(long, default_value = "lanczos5")]
        kernel: String,
    },
    /// Write CutMix pairs of a dataset as a new dataset with soft labels.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        pairs: usize,
    },
    /// Print the patch grid of an image and optionally draw it.
    Tokenize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        patch: usize,
        #[arg(long, default_value = "vanilla")]
        mode: String,
        #[arg(long = "dump-grid")]
        dump_grid: Option<PathBuf>,
    },
    /// Generate the synthetic blob dataset.
    Synth {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long = "per-class", default_value_t = 400)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier; writes checkpoints, history.jsonl and effective.cfg.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a checkpoint: top-1/top-5, per-class ROC and AUC.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "roc-out")]
        roc_out: Option<PathBuf>,
        /// Which split to score: train, val, test or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train at each attention temperature multiplier and tabulate accuracy.
    AblateTemp {
        #[arg(long)]
        data: PathBuf,
        /// CSV output path; effective.cfg is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare interpolation kernels on a set of images.
    AblateInterp {
        /// Image files or directories of images.
        #[arg(long = "in")]
        inputs: Vec<PathBuf>,
        /// Output sizes, comma separated HxW list.
        #[arg(long, default_value = "128x128")]
        sizes: String,
        /// Add the built-in band-limited test pattern to the set.
        #[arg(long)]
        pattern: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter count, FLOPs and measured throughput of a checkpoint.
    Report {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 100)]
        passes: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Patch tokenization: vanilla or spt.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Any config key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss { .. } => 3,
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::OddPatch(_)
        | Error::OddDimension { .. }
        | Error::Indivisible { .. } => 1,
        _ => 2,
    }
}

impl RunArgs {
    /// Defaults, then the config file, then flags.
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                return usage(format!("--set expects KEY=VALUE, got `{kv}`"));
            };
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(m) = &self.mode {
            cfg.set("patch_mode", m)?;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_size(s: &str) -> CliResult<(usize, usize)> {
    let parsed = s
        .split_once(['x', 'X'])
        .and_then(|(h, w)| Some((h.trim().parse().ok()?, w.trim().parse().ok()?)));
    match parsed {
        Some((h, w)) if h > 0 && w > 0 => Ok((h, w)),
        _ => usage(format!("size must look like HxW with positive values, got `{s}`")),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serialisable report")
}

fn cmd_resample(input: &Path, out: &Path, size: &str, kernel: &str) -> CliResult<()> {
    let (h, w) = parse_size(size)?;
    let spec: KernelSpec = kernel.parse()?;
    let img = read_image(input)?;
    let (mut res, stats) = resample_with_stats(&img, h, w, spec)?;
    res.clamp_unit();
    write_image(out, &res)?;
    println!(
        "{}",
        serde_json::json!({
            "kernel": spec.to_string(),
            "in": [img.height(), img.width(), img.channels()],
            "out": [h, w, img.channels()],
            "taps": stats.taps,
            "fallbacks": stats.fallbacks,
        })
    );
    Ok(())
}

fn cmd_augment(input: &Path, out: &Path, alpha: f64, seed: u64, pairs: usize) -> CliResult<()> {
    let ds = load_dataset(input)?;
    let k = ds.manifest.num_classes();
    let items: Vec<_> = (0..ds.images.len()).map(|i| ds.labeled(i)).collect();
    let mixed = cutmix_pairs(&items, &CutMixConfig { alpha, seed }, pairs)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let mut entries = Vec::with_capacity(mixed.len());
    for (i, (_, _, outcome)) in mixed.iter().enumerate() {
        let name = format!("mix_{i:05}.png");
        write_image(&out.join(&name), &outcome.mixed.image)?;
        entries.push(Entry {
            path: name,
            class: outcome.mixed.dominant_class(),
            soft_label: Some(outcome.mixed.label.clone()),
        });
    }
    write_labels(out, &entries, k)?;
    println!("{}", serde_json::json!({ "pairs": entries.len(), "classes": k }));
    Ok(())
}

/// Draws patch boundaries on a copy of `img` (1 or 3 channels).
fn grid_overlay(img: &ImageBuffer, patch: usize) -> CliResult<ImageBuffer> {
    let mut out = img.clone();
    for y in 0..out.height() {
        for x in 0..out.width() {
            if y % patch == 0 || x % patch == 0 {
                for c in 0..out.channels() {
                    out.set(y, x, c, if c == 0 || out.channels() == 1 { 1.0 } else { 0.0 });
                }
            }
        }
    }
    Ok(out)
}

fn cmd_tokenize(input: &Path, patch: usize, mode: &str, dump: Option<&Path>) -> CliResult<()> {
    let mode: PatchMode = mode.parse()?;
    let img = read_image(input)?;
    if img.height() != img.width() {
        return Err(Error::Data(format!("image must be square, got {}x{}", img.height(), img.width())).into());
    }
    let grid = PatchGrid::new(img.height(), patch, img.channels())?;
    let elements = patch_elements(&grid, mode);
    if let Some(path) = dump {
        let panel = match mode {
            PatchMode::Vanilla => grid_overlay(&img, patch)?,
            PatchMode::Spt => {
                // Original and the four shifted views side by side.
                let shifted = spt_concat(&img, patch)?;
                let (h, w, c) = img.dims();
                let mosaic = ImageBuffer::from_fn(h, 5 * w, c, |y, x, ch| shifted.get(y, x % w, (x / w) * c + ch))?;
                grid_overlay(&mosaic, patch)?
            }
        };
        write_image(path, &panel)?;
    }
    println!(
        "{}",
        json(&serde_json::json!({
            "image_size": grid.image_size,
            "patch_size": patch,
            "mode": mode.to_string(),
            "patches": grid.num_patches(),
            "grid": [grid.side(), grid.side()],
            "elements_per_patch": elements.pre_concat,
            "elements_after_concat": elements.post_concat,
        }))
    );
    Ok(())
}

fn cmd_synth(classes: usize, per_class: usize, size: usize, seed: u64, out: &Path) -> CliResult<()> {
    let m = synth_dataset(out, classes, per_class, size, seed)?;
    println!("{}", serde_json::json!({ "images": m.len(), "classes": m.num_classes(), "size": size }));
    Ok(())
}

fn cmd_train(data: &Path, out: &Path, run: &RunArgs) -> CliResult<()> {
    let cfg = run.resolve()?;
    let res = run_training(&cfg, data, out, |line| println!("{line}"))?;
    for w in &res.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!(
        "best val acc {:.4} at epoch {}; wrote {} and {}",
        res.best_val_acc,
        res.best_epoch,
        res.last_checkpoint.display(),
        res.best_checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, roc_out: Option<&Path>, which: &str) -> CliResult<()> {
    let which = match which {
        "train" => Some(Split::Train),
        "val" => Some(Split::Val),
        "test" => Some(Split::Test),
        "all" => None,
        other => return usage(format!("--split must be train, val, test or all, got `{other}`")),
    };
    let checkpoint = read_checkpoint(ckpt)?;
    let (model_cfg, extra) = checkpoint.model_config()?;
    let seed = extra
        .iter()
        .find(|(k, _)| k == "seed")
        .and_then(|(_, v)| v.parse().ok())
        .unwrap_or(0);
    let model: Model<f32> = checkpoint.to_model()?;
    let prepared = prepare_data(data, &model_cfg, seed)?;
    if prepared.num_classes != model_cfg.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, checkpoint expects {}",
            prepared.num_classes, model_cfg.num_classes
        ))
        .into());
    }
    let samples: Vec<_> = match which {
        Some(s) => prepared.part(s).to_vec(),
        None => [&prepared.train[..], &prepared.val[..], &prepared.test[..]].concat(),
    };
    if samples.is_empty() {
        return Err(Error::Data("selected split is empty".into()).into());
    }
    let ev = evaluate(&model, &samples, 128)?;
    let (report, curves) = metrics_report(&ev.probabilities, &ev.labels, model_cfg.num_classes)?;
    let text = json(&report);
    if let Some(dir) = roc_out {
        write_roc_files(dir, &curves)?;
        write_text(&dir.join("metrics.json"), &format!("{text}\n"))?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_ablate_temp(data: &Path, out: &Path, run: &RunArgs) -> CliResult<()> {
    let cfg = run.resolve()?;
    let prepared = prepare_data(data, &cfg.model, cfg.train.seed)?;
    let mut effective = cfg.clone();
    effective.model.num_classes = prepared.num_classes;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    write_text(&dir.join(EFFECTIVE_CONFIG_FILE), &effective.to_text())?;
    let rows = ablate_temp(&effective, &prepared, |r| {
        eprintln!("multiplier {}: val acc {:.4}", r.multiplier, r.val_acc)
    })?;
    let csv = temp_csv(&rows);
    write_text(out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn collect_images(inputs: &[PathBuf]) -> CliResult<Vec<ImageBuffer>> {
    let is_image = |p: &Path| {
        matches!(
            p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
            Some("png" | "pgm" | "ppm" | "pnm")
        )
    };
    let mut paths = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_image(p))
                .collect();
            found.sort();
            paths.extend(found);
        } else {
            paths.push(p.clone());
        }
    }
    Ok(paths.iter().map(|p| read_image(p)).collect::<Result<_, _>>()?)
}

fn cmd_ablate_interp(inputs: &[PathBuf], sizes: &str, pattern: bool, out: Option<&Path>) -> CliResult<()> {
    let sizes = sizes
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(parse_size)
        .collect::<CliResult<Vec<_>>>()?;
    let mut images = collect_images(inputs)?;
    if pattern {
        images.push(band_limited_pattern(64, 64, 1)?);
    }
    let rows = ablate_interp(&images, &sizes)?;
    let csv = interp_csv(&rows);
    if let Some(path) = out {
        write_text(path, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn cmd_report(ckpt: &Path, passes: usize, warmup: usize) -> CliResult<()> {
    if passes < 100 {
        return usage(format!("--passes must be at least 100, got {passes}"));
    }
    let model: Model<f32> = load_checkpoint(ckpt)?;
    let report = cost_report(&model, &[1, 32], warmup, passes)?;
    println!("{}", json(&report));
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Resample {
            input,
            out,
            size,
            kernel,
        } => cmd_resample(input, out, size, kernel),
        Command::Augment {
            input,
            out,
            alpha,
            seed,
            pairs,
        } => cmd_augment(input, out, *alpha, *seed, *pairs),
        Command::Tokenize {
            input,
            patch,
            mode,
            dump_grid,
        } => cmd_tokenize(input, *patch, mode, dump_grid.as_deref()),
        Command::Synth {
            classes,
            per_class,
            size,
            seed,
            out,
        } => cmd_synth(*classes, *per_class, *size, *seed, out),
        Command::Train { data, out, run } => cmd_train(data, out, run),
        Command::Eval {
            ckpt,
            data,
            roc_out,
            split,
        } => cmd_eval(ckpt, data, roc_out.as_deref(), split),
        Command::AblateTemp { data, out, run } => cmd_ablate_temp(data, out, run),
        Command::AblateInterp {
            inputs,
            sizes,
            pattern,
            out,
        } => cmd_ablate_interp(inputs, sizes, *pattern, out.as_deref()),
        Command::Report {
            ckpt,
            passes,
            warmup,
        } => cmd_report(ckpt, *passes, *warmup),
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("PATCHFORMER_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("PATCHFORMER_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
