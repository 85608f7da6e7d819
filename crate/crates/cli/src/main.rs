//! `brushwork`: train style models, stylize and edit images, serve the
//! editing API, and export at high resolution.
//!
//! Exit codes: 0 success, 1 I/O or runtime failure, 2 invalid input,
//! 3 configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use brushwork::checkpoint::load_checkpoint;
use brushwork::loss::ExtractorSource;
use brushwork::pipeline::{render_local_edit, BlendMode, LevelMask, LocalEdit};
use brushwork::train::{train_with, TrainConfig};
use brushwork::upsample::{upsample_local, Backend, UpsampleGateway, UpsampleRequest};
use brushwork::{ArchConfig, Error, ImagePlane, StrokeParams};
use brushwork_server::ServerConfig;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "brushwork", version, about = "Controllable neural style transfer")]
struct Cli {
    /// JSON file whose per-subcommand sections provide defaults for flags
    /// (e.g. {"stylize": {"intensity": 0.5}}).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a style model on a folder of content images.
    Train(TrainArgs),
    /// Stylize one image with global stroke size, intensity and rotation.
    Stylize(StylizeArgs),
    /// Apply a local edit: several stroke sizes blended through a mask.
    Edit(EditArgs),
    /// Run the HTTP editing service.
    Serve(ServeArgs),
    /// Upsample a stylized image for high-resolution export.
    Export(ExportArgs),
}

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct TrainArgs {
    /// Style image.
    #[arg(long)]
    style: Option<PathBuf>,
    /// Folder of content images.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Where checkpoints are written.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Checkpoint file stem; defaults to the style image's stem.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f32>,
    #[arg(long)]
    content_weight: Option<f32>,
    /// Stroke sizes cycled during training, e.g. 2,4.
    #[arg(long, value_delimiter = ',')]
    downsample_cycle: Option<Vec<f32>>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Pretrained VGG-19 weights (safetensors, torchvision names).
    #[arg(long, conflicts_with = "random_extractor")]
    vgg: Option<PathBuf>,
    /// Use a seeded random VGG-19 instead of pretrained weights.
    #[arg(long, value_name = "SEED")]
    random_extractor: Option<u64>,
    #[arg(long, value_enum)]
    arch: Option<ArchChoice>,
}

#[derive(Clone, Copy, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ArchChoice {
    Default,
    Tiny,
}

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct StylizeArgs {
    /// Style model checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long = "in")]
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    #[arg(long = "out")]
    #[serde(rename = "out")]
    output: Option<PathBuf>,
    /// Stroke size λS in [1, 8].
    #[arg(long, visible_alias = "lambda-s")]
    stroke_size: Option<f32>,
    /// Style intensity λI in [0, 4].
    #[arg(long, visible_alias = "lambda-i")]
    intensity: Option<f32>,
    /// Stroke rotation τ in degrees.
    #[arg(long, visible_alias = "tau")]
    rotation: Option<f32>,
}

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct EditArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long = "in")]
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    #[arg(long = "out")]
    #[serde(rename = "out")]
    output: Option<PathBuf>,
    /// Stroke sizes, strictly increasing, e.g. 1,2,4.
    #[arg(long, value_delimiter = ',', visible_alias = "level-values")]
    levels: Option<Vec<f32>>,
    /// One label map (pixel value = level index), or one weight plane per
    /// level (repeat the flag).
    #[arg(long)]
    mask: Option<Vec<PathBuf>>,
    #[arg(long, value_enum)]
    mode: Option<ModeChoice>,
    #[arg(long, visible_alias = "lambda-i")]
    intensity: Option<f32>,
    #[arg(long, visible_alias = "tau")]
    rotation: Option<f32>,
}

#[derive(Clone, Copy, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ModeChoice {
    Preview,
    Final,
}

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct ServeArgs {
    /// Directory of style checkpoints.
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    preview_cap: Option<usize>,
    #[arg(long)]
    max_pixels: Option<usize>,
    /// Directory for export results.
    #[arg(long)]
    result_dir: Option<PathBuf>,
}

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct ExportArgs {
    #[arg(long = "in")]
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    /// Style image sent to the remote upsampler.
    #[arg(long)]
    style: Option<PathBuf>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long, value_enum)]
    backend: Option<BackendChoice>,
    #[arg(long = "out")]
    #[serde(rename = "out")]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum BackendChoice {
    Local,
    Remote,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parameter(_) | Error::Shape(_) | Error::Input(_) | Error::Resource(_) => 2,
        Error::Config(_) => 3,
        _ => 1,
    }
}

fn required<T>(v: Option<T>, flag: &str) -> brushwork::Result<T> {
    v.ok_or_else(|| Error::parameter(flag, format!("--{flag} is required")))
}

/// The subcommand's section of the `--config` file, or defaults.
fn section<T: DeserializeOwned + Default>(config: Option<&Path>, name: &str) -> brushwork::Result<T> {
    let Some(path) = config else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut root: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    match root.get_mut(name).map(serde_json::Value::take) {
        None => Ok(T::default()),
        Some(v) => serde_json::from_value(v).map_err(|e| Error::Config(format!("{}: [{name}] {e}", path.display()))),
    }
}

fn run_train(a: TrainArgs, c: TrainArgs) -> brushwork::Result<()> {
    let mut cfg = TrainConfig {
        style_image_path: required(a.style.or(c.style), "style")?,
        dataset_dir: required(a.data.or(c.data), "data")?,
        ..TrainConfig::default()
    };
    macro_rules! set {
        ($($field:ident => $target:ident),*) => {
            $(if let Some(v) = a.$field.or(c.$field) { cfg.$target = v; })*
        };
    }
    set!(out_dir => checkpoint_dir, epochs => epochs, batch_size => batch_size, crop_size => crop_size,
         learning_rate => learning_rate, content_weight => content_weight,
         downsample_cycle => downsample_cycle, checkpoint_every => checkpoint_every, seed => seed);
    cfg.style_name = a.name.or(c.name);
    if let Some(arch) = a.arch.or(c.arch) {
        cfg.arch = match arch {
            ArchChoice::Default => ArchConfig::default(),
            ArchChoice::Tiny => ArchConfig::tiny(),
        };
    }
    cfg.extractor = match (a.vgg.or(c.vgg), a.random_extractor.or(c.random_extractor)) {
        (Some(path), _) => Some(ExtractorSource::Pretrained(path)),
        (None, Some(seed)) => Some(ExtractorSource::Random { seed }),
        (None, None) => None,
    };
    let (_, report) = train_with(&cfg, |r| {
        eprintln!(
            "step {:>6}  style {:.4e}  content {:.4e}  lambda_s {}  lambda_i {:.3}  {:.1}s",
            r.step, r.style_loss, r.content_loss, r.lambda_s, r.lambda_i, r.seconds
        );
    })?;
    println!("{}", report.final_checkpoint.display());
    Ok(())
}

fn run_stylize(a: StylizeArgs, c: StylizeArgs) -> brushwork::Result<()> {
    let params = StrokeParams::new(
        a.stroke_size.or(c.stroke_size).unwrap_or(1.0),
        a.intensity.or(c.intensity).unwrap_or(1.0),
        a.rotation.or(c.rotation).unwrap_or(0.0),
    )?;
    let model_path = required(a.model.or(c.model), "model")?;
    let input = required(a.input.or(c.input), "in")?;
    let output = required(a.output.or(c.output), "out")?;
    let model = load_checkpoint(model_path)?;
    let content = ImagePlane::load(input)?;
    model.stylize(&content, &params)?.save_png(output)
}

fn run_edit(a: EditArgs, c: EditArgs) -> brushwork::Result<()> {
    let level_values = required(a.levels.or(c.levels), "levels")?;
    let mask_paths = required(a.mask.or(c.mask), "mask")?;
    let lambda_i = a.intensity.or(c.intensity).unwrap_or(1.0);
    let tau = a.rotation.or(c.rotation).unwrap_or(0.0);
    // Range checks before any file is touched.
    StrokeParams::new(1.0, lambda_i, tau)?;
    let mode = match a.mode.or(c.mode).unwrap_or(ModeChoice::Final) {
        ModeChoice::Preview => BlendMode::Preview,
        ModeChoice::Final => BlendMode::Final,
    };
    let model = load_checkpoint(required(a.model.or(c.model), "model")?)?;
    let content = ImagePlane::load(required(a.input.or(c.input), "in")?)?;
    let output = required(a.output.or(c.output), "out")?;
    let mask = LevelMask::load(&mask_paths, level_values.len())?;
    let edit = LocalEdit {
        level_values,
        lambda_i,
        tau,
        mask,
    };
    render_local_edit(&model, &content, &edit, mode)?.save_png(output)
}

fn run_serve(a: ServeArgs, c: ServerConfig) -> brushwork::Result<()> {
    let mut cfg = c;
    if let Some(v) = a.models {
        cfg.models_dir = v;
    }
    if let Some(v) = a.port {
        cfg.port = v;
    }
    if let Some(v) = a.host {
        cfg.host = v;
    }
    if let Some(v) = a.preview_cap {
        cfg.preview_cap = v;
    }
    if let Some(v) = a.max_pixels {
        cfg.max_pixels = v;
    }
    if let Some(v) = a.result_dir {
        cfg.result_dir = v;
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Config(format!("cannot start runtime: {e}")))?;
    rt.block_on(brushwork_server::serve(cfg))
}

fn run_export(a: ExportArgs, c: ExportArgs) -> brushwork::Result<()> {
    let scale = required(a.scale.or(c.scale), "scale")?;
    let backend = match a.backend.or(c.backend).unwrap_or(BackendChoice::Local) {
        BackendChoice::Local => Backend::Local,
        BackendChoice::Remote => Backend::Remote,
    };
    let input = required(a.input.or(c.input), "in")?;
    let output = required(a.output.or(c.output), "out")?;
    let bytes = std::fs::read(&input).map_err(|e| Error::io(&input, e))?;
    let stylized = ImagePlane::decode(&bytes)?;
    match backend {
        Backend::Local => {
            let out = upsample_local(&stylized, scale)?;
            // At scale 1 a PNG input is copied through unchanged.
            if out.extent() == stylized.extent() && bytes.starts_with(b"\x89PNG") {
                std::fs::write(&output, &bytes).map_err(|e| Error::io(&output, e))
            } else {
                out.save_png(output)
            }
        }
        Backend::Remote => {
            let gateway = UpsampleGateway::new(std::env::temp_dir().join("brushwork-exports"));
            if gateway.endpoint().is_none() {
                return Err(Error::Config(format!(
                    "the remote backend needs {} to be set",
                    brushwork::upsample::ENDPOINT_ENV
                )));
            }
            let style = ImagePlane::load(required(a.style.or(c.style), "style")?)?;
            let request = UpsampleRequest {
                stylized,
                style,
                target_scale: scale,
            };
            let (_, img) = gateway.run(&request, Backend::Remote, Duration::from_secs(1))?;
            img.save_png(output)
        }
    }
}

fn run(cli: Cli) -> brushwork::Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Train(a) => run_train(a, section(config, "train")?),
        Command::Stylize(a) => run_stylize(a, section(config, "stylize")?),
        Command::Edit(a) => run_edit(a, section(config, "edit")?),
        Command::Serve(a) => run_serve(a, section(config, "serve")?),
        Command::Export(a) => run_export(a, section(config, "export")?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
