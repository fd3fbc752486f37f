mod args;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgMatches, CommandFactory, FromArgMatches};
use lidia::image_io::{load_image, psnr, save_image, write_atomic, ImageError, ImagePlane};
use lidia::net::{
    decode_model, denoise_with, encode_model, load_model, save_model, ArchDescriptor, DenoiseOptions,
    ModelParams, NetError, Variant,
};
use lidia::selftest::{run_selftest, Fault, SelftestOptions};
use lidia::train::{
    adapt_external, adapt_internal, evaluate_files, train_universal, AdaptConfig, EpochRecord, SigmaSpec,
    TrainConfig, TrainError,
};

use args::*;

/// An error with its process exit code.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    fn numeric(message: impl Into<String>) -> Self {
        CliError {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::NonFinite(_) => CliError::numeric(e.to_string()),
            NetError::Arch(_) => CliError::usage(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Net(n) => n.into(),
            TrainError::Config(_) => CliError::usage(e.to_string()),
            TrainError::EmptyDataset => CliError::data(e.to_string()),
            TrainError::NonFinite { .. } | TrainError::TargetChanged => CliError::numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(matches: &ArgMatches) -> Result<(), CliError> {
    let cli = Cli::from_arg_matches(matches).map_err(|e| CliError::usage(e.to_string()))?;
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    macro_rules! resolved {
        ($a:expr) => {{
            let a = $a;
            let path = a.common.config.clone();
            config::resolve(a, path.as_deref(), sub)?
        }};
    }
    match cli.command {
        Command::Denoise(a) => {
            let a = resolved!(a);
            pool(a.common.threads, || cmd_denoise(&a))
        }
        Command::Train(a) => {
            let a = resolved!(a);
            pool(a.common.threads, || cmd_train(&a))
        }
        Command::AdaptExternal(a) => {
            let a = resolved!(a);
            pool(a.common.threads, || cmd_adapt_external(&a))
        }
        Command::AdaptInternal(a) => {
            let a = resolved!(a);
            pool(a.common.threads, || cmd_adapt_internal(&a))
        }
        Command::Eval(a) => {
            let a = resolved!(a);
            pool(a.common.threads, || cmd_eval(&a))
        }
        Command::Selftest(a) => {
            let a = resolved!(a);
            pool(a.common.threads, || cmd_selftest(&a))
        }
    }
}

fn pool(threads: usize, f: impl FnOnce() -> Result<(), CliError> + Send) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
    v.as_ref().ok_or_else(|| CliError::usage(format!("--{flag} is required")))
}

/// Files given directly plus the `.pgm`/`.ppm`/`.pnm` files of given directories, sorted.
fn collect_images(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension()
                        .and_then(|x| x.to_str())
                        .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "pgm" | "ppm" | "pnm"))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<ImagePlane>, CliError> {
    collect_images(paths)?
        .iter()
        .map(|p| load_image(p).map_err(|e| CliError::data(format!("{}: {e}", p.display()))))
        .collect()
}

fn load(path: &Path) -> Result<ModelParams<f32>, CliError> {
    load_model(path).map_err(|e| CliError::from(e).prefixed(path))
}

impl CliError {
    fn prefixed(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

fn print_epoch(r: &EpochRecord) {
    match r.val_psnr {
        Some(v) => println!("epoch {} step {} loss {:.6e} val_psnr {v:.4}", r.epoch, r.step, r.loss),
        None => println!("epoch {} step {} loss {:.6e}", r.epoch, r.step, r.loss),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes()).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn cmd_denoise(a: &DenoiseArgs) -> Result<(), CliError> {
    let input = required(&a.input, "input")?;
    let output = required(&a.output, "output")?;
    let model = load(required(&a.model, "model")?)?;
    let noisy = load_image(input)?;
    let reference = a.reference.as_ref().map(load_image).transpose()?;
    let res = denoise_with(
        &model,
        &noisy,
        &DenoiseOptions {
            chunk: a.chunk,
            window: a.window,
            reference,
            ..Default::default()
        },
    )?;
    save_image(&res.image, output)?;
    if let Some(p) = res.psnr {
        println!("psnr {p}");
    }
    Ok(())
}

fn arch_of(a: &TrainArgs) -> ArchDescriptor {
    let variant = match a.variant {
        VariantName::Lidia => Variant::Full,
        VariantName::LidiaS => Variant::Small,
    };
    let base = match a.arch {
        ArchName::Gray => ArchDescriptor::gray(variant),
        ArchName::Color => ArchDescriptor::color(variant),
        ArchName::Tiny => ArchDescriptor::tiny(),
    };
    ArchDescriptor {
        variant,
        share_weight_net: a.share_weight_net,
        ..base
    }
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let output = required(&a.output, "output")?;
    if a.data.is_empty() {
        return Err(CliError::usage("--data is required"));
    }
    let images = load_all(&a.data)?;
    let validation = load_all(&a.validation)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_images: a.batch,
        crop_size: a.crop,
        sigma: if a.blind {
            SigmaSpec::Range {
                low: a.sigma_min,
                high: a.sigma_max,
            }
        } else {
            SigmaSpec::Fixed(a.sigma)
        },
        adam_lr: a.adam_lr,
        sgd_lr: a.sgd_lr,
        switch_fraction: a.switch_fraction,
        seed: a.common.seed,
        checkpoint_every: a.checkpoint_every,
        checkpoint_dir: a.checkpoint_dir.clone(),
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let (model, log) = train_universal::<f32>(arch_of(a), &cfg, &images, &validation, &mut print_epoch)?;
    save_model(&model, output)?;
    if let Some(path) = &a.log {
        write_text(path, &log.to_csv(&config::describe(a)))?;
    }
    Ok(())
}

fn adapt_config(o: &AdaptOptions, crops_per_epoch: usize, seed: u64) -> AdaptConfig {
    AdaptConfig {
        epochs: o.epochs,
        sigma: o.sigma,
        learning_rate: o.lr,
        crop_size: o.crop,
        crops_per_epoch,
        batch_images: o.batch,
        freeze_batch_norm: o.freeze_batch_norm,
        seed,
    }
}

fn cmd_adapt_external(a: &AdaptExternalArgs) -> Result<(), CliError> {
    let model_path = required(&a.model, "model")?;
    let output = required(&a.output, "output")?;
    if a.related.is_empty() {
        return Err(CliError::usage("--related is required"));
    }
    let bytes = std::fs::read(model_path).map_err(|e| CliError::data(format!("{}: {e}", model_path.display())))?;
    let model: ModelParams<f32> = decode_model(&bytes).map_err(|e| CliError::from(e).prefixed(model_path))?;
    let related = load_all(&a.related)?;
    let cfg = adapt_config(&a.adapt, 1, a.common.seed);
    let (adapted, log) = adapt_external(&model, &cfg, &related, &mut print_epoch)?;
    if adapted == model {
        write_atomic(output, &bytes)?;
    } else {
        write_atomic(output, &encode_model(&adapted))?;
    }
    if let Some(path) = &a.log {
        write_text(path, &log.to_csv(&config::describe(a)))?;
    }
    Ok(())
}

fn cmd_adapt_internal(a: &AdaptInternalArgs) -> Result<(), CliError> {
    let model = load(required(&a.model, "model")?)?;
    let output = required(&a.output, "output")?;
    let noisy = load_image(required(&a.input, "input")?)?;
    let reference = a.reference.as_ref().map(load_image).transpose()?;
    let cfg = adapt_config(&a.adapt, a.crops_per_epoch, a.common.seed);
    let res = adapt_internal(&model, &noisy, &cfg, &mut print_epoch)?;
    if let Some(clean) = &reference {
        println!("psnr_universal {}", psnr(&res.universal, clean)?);
        println!("psnr_adapted {}", psnr(&res.image, clean)?);
    }
    save_image(&res.image, output)?;
    if let Some(p) = &a.save_model {
        save_model(&res.model, p)?;
    }
    if let Some(path) = &a.log {
        write_text(path, &res.log.to_csv(&config::describe(a)))?;
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let model = load(required(&a.model, "model")?)?;
    let files = collect_images(&a.data)?;
    if files.is_empty() {
        return Err(CliError::usage("--data names no images"));
    }
    let report = evaluate_files(&model, &files, a.sigma, a.common.seed)?;
    for (name, why) in &report.skipped {
        eprintln!("warning: skipped {name}: {why}");
    }
    let csv = report.to_csv(&config::describe(a), a.timing);
    print!("{csv}");
    if let Some(path) = &a.output {
        write_text(path, &csv)?;
    }
    if report.rows.is_empty() {
        return Err(CliError::data("no image could be evaluated"));
    }
    Ok(())
}

fn cmd_selftest(a: &SelftestArgs) -> Result<(), CliError> {
    let report = run_selftest(&SelftestOptions {
        fault: a.inject_fault.map(|f| match f {
            FaultName::SlBackward => Fault::SlBackward,
        }),
    });
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::numeric(format!("failed suites: {}", report.failed().join(", "))))
    }
}
