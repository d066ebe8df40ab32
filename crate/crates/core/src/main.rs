use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use winshade::checkpoint;
use winshade::config::RunConfig;
use winshade::data::ShadowSample;
use winshade::gradcheck::{check_synthetic, GradCheckOptions};
use winshade::image_io::{load_dataset, load_image, load_mask, save_gray_map, save_mask, write_dataset};
use winshade::metrics::binarize_logits;
use winshade::model::{init_model, predict_maps};
use winshade::ops::{bilinear_resize, sigmoid};
use winshade::synth::synth_dataset;
use winshade::train::{evaluate, loss_csv, report_from_masks, train};
use winshade::{Error, Tensor};

const THREADS_VAR: &str = "WINSHADE_THREADS";

#[derive(Parser)]
#[command(name = "winshade", version, about = "Shifted-window shadow detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options that override values of the run configuration.
#[derive(Args)]
struct RunArgs {
    /// `key = value` run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Comma list of modules to disable: ds, da, mla.
    #[arg(long)]
    ablate: Option<String>,
}

impl RunArgs {
    fn resolve(&self, base: Option<RunConfig>) -> anyhow::Result<RunConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(cfg)) => cfg,
            (None, None) => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(iters) = self.iters {
            cfg.train.iterations = iters;
        }
        if let Some(ablate) = &self.ablate {
            cfg.set("ablate", ablate)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint and loss log.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Checkpoint path; defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint, or precomputed masks, against a test set.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, required_unless_present = "pred", conflicts_with = "pred")]
        checkpoint: Option<PathBuf>,
        /// Directory of `<name>.png` predicted masks to score instead.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Dataset directory; defaults to the configured or synthetic test set.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the key-value report to `<out>/eval.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write predicted masks for every PNG in a directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image directory, or a dataset directory with an `images/` folder.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "pred")]
        out: PathBuf,
        /// Also write per-level and fused score maps.
        #[arg(long)]
        levels: bool,
    },
    /// Compare analytic and finite-difference gradients of a fresh model.
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = GradCheckOptions::default().coords_per_tensor)]
        coords: usize,
        #[arg(long, default_value_t = GradCheckOptions::default().step)]
        step: f64,
        /// Also write the report to `<out>/gradcheck.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
    },
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn training_set(cfg: &RunConfig) -> anyhow::Result<Vec<ShadowSample>> {
    Ok(match &cfg.train_dir {
        Some(dir) => load_dataset(dir)?,
        None => synth_dataset(cfg.train.seed, 0, cfg.n_train, cfg.model.encoder.img_size),
    })
}

fn test_set(cfg: &RunConfig, data: Option<&Path>) -> anyhow::Result<Vec<ShadowSample>> {
    Ok(match data.or(cfg.test_dir.as_deref()) {
        Some(dir) => load_dataset(dir)?,
        None => synth_dataset(cfg.train.seed, cfg.n_train, cfg.n_test, cfg.model.encoder.img_size),
    })
}

fn cmd_train(run: &RunArgs, out: &Path, ckpt: Option<&Path>) -> anyhow::Result<ExitCode> {
    let cfg = run.resolve(None)?;
    let data = training_set(&cfg)?;
    create_dir(out)?;
    let params = init_model(&cfg.model, cfg.train.seed)?;
    eprintln!(
        "training on {} samples for {} iterations ({} parameters)",
        data.len(),
        cfg.train.iterations,
        params.num_scalars()
    );
    let outcome = train(&cfg.model, &cfg.train, &data, params, |step, loss| {
        eprintln!("step {step:>6}  loss {loss:.6}");
    })?;
    let ckpt = ckpt.map_or_else(|| out.join("model.ckpt"), Path::to_path_buf);
    let text = cfg.to_text();
    checkpoint::save(&ckpt, &outcome.params, &text)?;
    write(&out.join("loss.csv"), &loss_csv(&outcome.losses))?;
    write(&out.join("config.txt"), &text)?;
    eprintln!("wrote {}", ckpt.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(
    run: &RunArgs,
    ckpt: Option<&Path>,
    pred: Option<&Path>,
    data: Option<&Path>,
    out: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let report = match (ckpt, pred) {
        (Some(path), _) => {
            let ck = checkpoint::load(path)?;
            let saved = RunConfig::parse(&ck.config).context("checkpoint carries an invalid configuration")?;
            let cfg = run.resolve(Some(saved))?;
            let test = test_set(&cfg, data)?;
            evaluate(&ck.params, &cfg.model, &test)?
        }
        (None, Some(dir)) => {
            let cfg = run.resolve(None)?;
            let test = test_set(&cfg, data)?;
            let preds = test
                .iter()
                .map(|s| load_mask(dir.join(format!("{}.png", s.name))))
                .collect::<winshade::Result<Vec<_>>>()?;
            report_from_masks(&test, &preds)?
        }
        (None, None) => bail!(Error::Config("eval needs --checkpoint or --pred".into())),
    };
    let kv = report.to_key_values();
    println!("{report}");
    print!("{kv}");
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("eval.txt"), &kv)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn image_paths(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let dir = if input.join("images").is_dir() { input.join("images") } else { input.to_path_buf() };
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        bail!("no PNG images in {}", dir.display());
    }
    Ok(paths)
}

/// Resizes `[1, C, h, w]` maps to `(height, width)` when they differ.
fn fit(t: &Tensor, height: usize, width: usize) -> winshade::Result<Tensor> {
    if t.shape()[2..] == [height, width] {
        Ok(t.clone())
    } else {
        bilinear_resize(t, height, width)
    }
}

fn cmd_predict(ckpt: &Path, input: &Path, out: &Path, levels: bool) -> anyhow::Result<ExitCode> {
    let ck = checkpoint::load(ckpt)?;
    let cfg = RunConfig::parse(&ck.config).context("checkpoint carries an invalid configuration")?;
    let size = cfg.model.encoder.img_size;
    let paths = image_paths(input)?;
    create_dir(out)?;
    paths.par_iter().try_for_each(|path| -> anyhow::Result<()> {
        let stem = path.file_stem().and_then(|s| s.to_str()).context("non UTF-8 file name")?;
        let image = load_image(path)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let batch = fit(&image.reshape([1, 3, h, w])?, size, size)?;
        let maps = predict_maps(&ck.params, &cfg.model, &batch)?;
        let fused = fit(&maps.fused, h, w)?;
        save_mask(out.join(format!("{stem}.png")), &binarize_logits(&fused).reshape([1, h, w])?)?;
        if levels {
            for (i, m) in maps.levels.iter().enumerate() {
                let m = fit(m, h, w)?.map(sigmoid).reshape([1, h, w])?;
                save_gray_map(out.join(format!("{stem}_level{i}.png")), &m)?;
            }
            save_gray_map(out.join(format!("{stem}_fused.png")), &fused.map(sigmoid).reshape([1, h, w])?)?;
        }
        Ok(())
    })?;
    eprintln!("wrote {} masks to {}", paths.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(run: &RunArgs, batch: usize, coords: usize, step: f64, out: Option<&Path>) -> anyhow::Result<ExitCode> {
    let cfg = run.resolve(None)?;
    if batch == 0 || coords == 0 {
        bail!(Error::Config("--batch and --coords must be positive".into()));
    }
    let opts = GradCheckOptions {
        coords_per_tensor: coords,
        step,
        seed: cfg.train.seed,
        ..GradCheckOptions::default()
    };
    let report = match check_synthetic(&cfg.model, cfg.train.seed, batch, &opts) {
        Err(e @ Error::Parameter(_)) => bail!(Error::Config(e.to_string())),
        r => r?,
    };
    print!("{report}");
    eprintln!("elapsed {:.1}s", report.elapsed.as_secs_f64());
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("gradcheck.txt"), &report.to_string())?;
    }
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_synth(n: usize, seed: u64, size: usize, out: &Path) -> anyhow::Result<ExitCode> {
    if n == 0 || size < 16 {
        bail!(Error::Config("--n must be positive and --size at least 16".into()));
    }
    write_dataset(out, &synth_dataset(seed, 0, n, size))?;
    eprintln!("wrote {n} samples to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_VAR} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    init_threads()?;
    match &cli.command {
        Command::Train { run, out, checkpoint } => cmd_train(run, out, checkpoint.as_deref()),
        Command::Eval { run, checkpoint, pred, data, out } => {
            cmd_eval(run, checkpoint.as_deref(), pred.as_deref(), data.as_deref(), out.as_deref())
        }
        Command::Predict { checkpoint, input, out, levels } => cmd_predict(checkpoint, input, out, *levels),
        Command::Gradcheck { run, batch, coords, step, out } => cmd_gradcheck(run, *batch, *coords, *step, out.as_deref()),
        Command::Synth { n, seed, size, out } => cmd_synth(*n, *seed, *size, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(e.downcast_ref::<Error>(), Some(Error::Config(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
