use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use srq::complexity::{complexity_report, FlopConvention, DEFAULT_ACCOUNTING_SIDE};
use srq::io::{
    downsample, load_checkpoint, load_images, log_to_jsonl, read_image, write_atomic, write_image,
    QuantizedModelArtifact, RunConfig,
};
use srq::metrics::{format_psnr, psnr_y, ssim_y, ImageU8};
use srq::model::{ModelConfig, ModelWeights};
use srq::pipeline::{self, InferMode, InitMethod};
use srq::{Error, Result};

#[derive(Parser)]
#[command(name = "srq", version, about = "Low-bit post-training quantization for SwinIR-style super-resolution")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Quantizer bit width.
    #[arg(long, global = true, default_value_t = 4, value_parser = parse_bits)]
    bits: u8,
    /// Upscaling factor; must agree with the checkpoint.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(2..=4))]
    scale: Option<u8>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON run configuration with `dobi` and `distill` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelPreset {
    Light,
    Toy,
}

impl ModelPreset {
    fn config(self, scale: usize) -> ModelConfig {
        match self {
            ModelPreset::Light => ModelConfig::light(scale),
            ModelPreset::Toy => ModelConfig::toy(scale),
        }
    }
}

#[derive(Args)]
struct ModelSource {
    /// FP checkpoint file.
    #[arg(long, required_unless_present = "random_model", conflicts_with = "random_model")]
    checkpoint: Option<PathBuf>,
    /// Use randomly initialized weights (seeded by --seed) instead of a checkpoint.
    #[arg(long, value_enum)]
    random_model: Option<ModelPreset>,
}

#[derive(Args)]
struct DataSource {
    /// Folder of calibration images (PNG or PPM).
    #[arg(long)]
    calib_dir: PathBuf,
    /// Treat the images as high-resolution and downsample them by the scale first.
    #[arg(long)]
    from_hr: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fp,
    FakeQuant,
    PackedInt,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConventionArg {
    Reference,
    Exact,
}

#[derive(Subcommand)]
enum Command {
    /// Collect statistics and initialize every quantizer bound.
    Calibrate {
        #[command(flatten)]
        model: ModelSource,
        #[command(flatten)]
        data: DataSource,
        #[arg(long, value_enum, default_value = "dobi")]
        method: MethodArg,
        /// Output artifact.
        #[arg(long)]
        out: PathBuf,
        /// JSON bound report (defaults to `<out>.report.json`).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Refine the bounds of a calibrated artifact by distillation.
    Distill {
        #[arg(long)]
        artifact: PathBuf,
        #[command(flatten)]
        data: DataSource,
        /// Separate validation images; otherwise held-out crops of the calibration images.
        #[arg(long)]
        val_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        val_patches: usize,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Start from MinMax bounds derived from the stored statistics.
        #[arg(long)]
        from_minmax: bool,
        /// Store packed integer weights in the output.
        #[arg(long)]
        pack: bool,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log (defaults to `<out>.log.jsonl`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Upscale one image.
    Infer {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "packed-int")]
        mode: ModeArg,
        /// High-resolution reference for PSNR/SSIM.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
    },
    /// Complexity accounting and, for artifacts, bound percentiles.
    Report {
        #[arg(long)]
        artifact: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "light")]
        model: ModelPreset,
        /// Low-resolution accounting size (height, width).
        #[arg(long, num_args = 2, default_values_t = [DEFAULT_ACCOUNTING_SIDE, DEFAULT_ACCOUNTING_SIDE])]
        resolution: Vec<usize>,
        #[arg(long, value_enum, default_value = "reference")]
        convention: ConventionArg,
        /// Write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run internal consistency checks.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Dobi,
    Minmax,
}

fn parse_bits(s: &str) -> std::result::Result<u8, String> {
    match s.parse::<u8>() {
        Ok(b) if srq::quant::SUPPORTED_BITS.contains(&b) => Ok(b),
        _ => Err(format!("expected one of {:?}", srq::quant::SUPPORTED_BITS)),
    }
}

fn scale_of(global: &Global, default: usize) -> usize {
    global.scale.map_or(default, usize::from)
}

fn load_model(src: &ModelSource, global: &Global) -> Result<ModelWeights> {
    if let Some(path) = &src.checkpoint {
        let w = load_checkpoint(path)?;
        if let Some(s) = global.scale {
            if s as usize != w.config().upscale {
                return Err(Error::InvalidArgument(format!(
                    "--scale {s} but the checkpoint upscales by {}",
                    w.config().upscale
                )));
            }
        }
        Ok(w)
    } else {
        let preset = src.random_model.expect("clap requires one source");
        ModelWeights::random(&preset.config(scale_of(global, 2)), global.seed)
    }
}

fn load_data(dir: &Path, from_hr: bool, scale: usize) -> Result<Vec<ImageU8>> {
    let images = load_images(dir)?;
    if from_hr {
        images.iter().map(|im| downsample(im, scale)).collect()
    } else {
        Ok(images)
    }
}

fn load_artifact(path: &Path, global: &Global) -> Result<QuantizedModelArtifact> {
    let a = QuantizedModelArtifact::load(path)?;
    if let Some(s) = global.scale {
        if s as usize != a.config.upscale {
            return Err(Error::InvalidArgument(format!("--scale {s} but the artifact upscales by {}", a.config.upscale)));
        }
    }
    Ok(a)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn json_bytes<T: serde::Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s.into_bytes()
}

/// Runs one command; `Ok(false)` means it ran but a check failed.
fn execute(cli: Cli) -> Result<bool> {
    let g = &cli.global;
    let run_config = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Calibrate { model, data, method, out, report } => {
            let weights = load_model(&model, g)?;
            let images = load_data(&data.calib_dir, data.from_hr, weights.config().upscale)?;
            let dobi = &run_config.dobi;
            let patches = pipeline::sample_patches(&images, dobi.num_patches, dobi.patch_size, g.seed)?;
            let method = match method {
                MethodArg::Dobi => InitMethod::Dobi,
                MethodArg::Minmax => InitMethod::Minmax,
            };
            let (artifact, rep) = pipeline::calibrate(&weights, &patches, g.bits, method, dobi)?;
            artifact.save(&out)?;
            write_atomic(&report.unwrap_or_else(|| with_suffix(&out, ".report.json")), &json_bytes(&rep))?;
            let active = rep.sites.iter().filter(|s| s.active).count();
            println!("calibrated {active}/{} quantizers at {} bits -> {}", rep.sites.len(), g.bits, out.display());
        }
        Command::Distill {
            artifact,
            data,
            val_dir,
            val_patches,
            iterations,
            batch_size,
            learning_rate,
            from_minmax,
            pack,
            out,
            log,
        } => {
            let art = load_artifact(&artifact, g)?;
            let scale = art.config.upscale;
            let mut cfg = run_config.distill.clone();
            cfg.seed = g.seed;
            if let Some(v) = iterations {
                cfg.iterations = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = learning_rate {
                cfg.learning_rate = v;
            }
            let images = load_data(&data.calib_dir, data.from_hr, scale)?;
            let train = pipeline::sample_patches(&images, run_config.dobi.num_patches, cfg.patch_size, g.seed)?;
            let val_images = match &val_dir {
                Some(d) => load_data(d, data.from_hr, scale)?,
                None => images,
            };
            let val = pipeline::sample_patches(&val_images, val_patches, cfg.patch_size, g.seed.wrapping_add(1))?;
            let threshold = from_minmax.then_some(run_config.dobi.symmetry_threshold);
            let (refined, outcome) = pipeline::distill(&art, &train, &val, &cfg, threshold)?;
            let refined = if pack { refined.pack()? } else { refined };
            refined.save(&out)?;
            write_atomic(&log.unwrap_or_else(|| with_suffix(&out, ".log.jsonl")), log_to_jsonl(&outcome.log).as_bytes())?;
            println!(
                "validation PSNR {} -> {} dB (best at iteration {}) -> {}",
                format_psnr(outcome.initial_val_psnr),
                format_psnr(outcome.best_val_psnr),
                outcome.best_iter,
                out.display()
            );
        }
        Command::Infer { artifact, input, output, mode, reference } => {
            let art = load_artifact(&artifact, g)?;
            let img = read_image(&input)?;
            let mode = match mode {
                ModeArg::Fp => InferMode::Fp,
                ModeArg::FakeQuant => InferMode::FakeQuant,
                ModeArg::PackedInt => InferMode::PackedInt,
            };
            let sr = pipeline::infer_image(&art, &img, mode)?;
            write_image(&output, &sr)?;
            info!("wrote {}x{} image to {}", sr.width(), sr.height(), output.display());
            if let Some(r) = reference {
                let hr = read_image(&r)?;
                let crop = art.config.upscale;
                println!(
                    "psnr_y {} dB  ssim_y {:.4}",
                    format_psnr(psnr_y(&sr, &hr, crop)?),
                    ssim_y(&sr, &hr, crop)?
                );
            }
        }
        Command::Report { artifact, model, resolution, convention, json } => {
            let (cfg, bits, art) = match &artifact {
                Some(p) => {
                    let a = load_artifact(p, g)?;
                    (a.config.clone(), a.bits, Some(a))
                }
                None => (model.config(scale_of(g, 4)), g.bits, None),
            };
            let conv = match convention {
                ConventionArg::Reference => FlopConvention::Reference,
                ConventionArg::Exact => FlopConvention::Exact,
            };
            let rep = complexity_report(&cfg, bits, resolution[0], resolution[1], conv)?;
            print!("{}", rep.to_text());
            let mut doc = serde_json::json!({ "complexity": rep });
            if let Some(a) = &art {
                match &a.stats {
                    None => println!("artifact stores no calibration statistics; percentiles omitted"),
                    Some(stats) => {
                        let rows: Vec<_> = srq::calib::bound_report(&a.quantizers, Some(stats), None)
                            .into_iter()
                            .map(|r| serde_json::json!({ "id": r.id, "p_l": r.p_lower, "p_u": r.p_upper }))
                            .collect();
                        println!("{:<40}{:>10}{:>10}", "quantizer", "p_l", "p_u");
                        for r in &rows {
                            let f = |v: &serde_json::Value| v.as_f64().map_or("-".to_string(), |x| format!("{x:.4}"));
                            println!("{:<40}{:>10}{:>10}", r["id"].as_str().unwrap_or(""), f(&r["p_l"]), f(&r["p_u"]));
                        }
                        doc["percentiles"] = serde_json::Value::Array(rows);
                    }
                }
            }
            if let Some(p) = json {
                write_atomic(&p, &json_bytes(&doc))?;
            }
        }
        Command::Selftest => {
            let checks = pipeline::selftest(g.seed)?;
            for (name, ok) in &checks {
                println!("{} {name}", if *ok { "PASS" } else { "FAIL" });
            }
            return Ok(checks.iter().all(|(_, ok)| *ok));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
