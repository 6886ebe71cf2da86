//! `adp2` command-line driver.
//!
//! Exit codes:
//!
//! | code | meaning                                               |
//! |------|-------------------------------------------------------|
//! | 0    | success                                               |
//! | 1    | unexpected internal failure                           |
//! | 2    | bad usage, invalid configuration, artifact not found  |
//! | 3    | geometry, shape or range violation                    |
//! | 4    | backend failure (model error, response shape)         |
//! | 5    | connection failure or timeout                         |
//! | 6    | protocol or file format error                         |
//! | 7    | other I/O error                                       |

use std::io::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use adp2_core::denoiser::wire::HelloInfo;
use adp2_core::denoiser::{echo_model, serve};
use adp2_core::pipeline::{backend_from_config, write_run_dir, GenerationConfig, Pipeline, RunArtifacts};
use adp2_core::Error;
use clap::{Args, Parser, Subcommand};

mod inspect;

#[derive(Parser)]
#[command(name = "adp2", version, about = "Progressive higher-resolution diffusion extrapolation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a generation and write its artifacts and manifest.
    Generate(GenerateArgs),
    /// Render an artifact (mask, edge map, plan, latent, manifest) as text or PGM.
    Inspect(InspectArgs),
    /// Host the loopback echo model over the framed protocol.
    ServeEcho(ServeArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Config file with `key = value` lines; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated prompt token ids.
    #[arg(long)]
    prompt_tokens: Option<String>,
    /// Base (native) latent size, `HxW` or `N`.
    #[arg(long)]
    base: Option<String>,
    /// Final latent size. Without --scales the stages are 1, 2, ... up to it.
    #[arg(long)]
    target: Option<String>,
    /// Comma-separated per-side scales, starting at 1.
    #[arg(long)]
    scales: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    /// Patch stride, `HxW` or `N`.
    #[arg(long)]
    stride: Option<String>,
    /// Prompt selection threshold.
    #[arg(long)]
    c: Option<String>,
    #[arg(long)]
    controlnet_steps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// zero | linear | oracle | edge-biased | echo | remote
    #[arg(long)]
    backend: Option<String>,
    /// host:port of a model server (implies --backend remote).
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    canny_low: Option<String>,
    #[arg(long)]
    canny_high: Option<String>,
    #[arg(long)]
    canny_sigma: Option<String>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory.
    #[arg(long, env = "ADP2_OUT_DIR", default_value = "adp2-run")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    /// Artifact file or run directory.
    path: PathBuf,
    /// Write a PGM rendering here instead of printing text.
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    #[arg(long, default_value = "16x16")]
    base: String,
    #[arg(long, default_value_t = 4)]
    channels: u32,
    #[arg(long, default_value_t = 8)]
    spatial_factor: u32,
    /// Down-sampling of the synthetic attention maps; 0 disables them.
    #[arg(long, default_value_t = 1)]
    attention_scale: usize,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    NotFound(PathBuf),
    Engine(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Engine(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::NotFound(_) => 2,
            Failure::Engine(e) => match e.root() {
                Error::Config(_) | Error::MissingParams(_) => 2,
                Error::InvalidRange(_)
                | Error::ShapeMismatch { .. }
                | Error::StepOutOfRange(_)
                | Error::StepOrder { .. }
                | Error::Downscale { .. }
                | Error::Geometry(_)
                | Error::OutOfBounds(_)
                | Error::CountMismatch { .. }
                | Error::EmptyMap
                | Error::Indivisible(_)
                | Error::MissingPermutation(_)
                | Error::InvalidThreshold(_) => 3,
                Error::Backend { .. } | Error::ShapeViolation { .. } => 4,
                Error::Connection { .. } | Error::Timeout { .. } => 5,
                Error::VersionMismatch { .. } | Error::Protocol(_) | Error::Format(_) => 6,
                Error::Io(_) => 7,
                Error::Context { .. } => 1,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::NotFound(p) => format!("artifact not found: {}", p.display()),
            Failure::Engine(e) => e.to_string(),
        }
    }
}

fn build_config(a: &GenerateArgs) -> Result<GenerationConfig, Failure> {
    let mut cfg = GenerationConfig::default();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| Failure::Engine(Error::Config(format!("{}: {}", path.display(), e.root()))))?;
    }
    let flag = |cfg: &mut GenerationConfig, name: &str, key: &str, v: &Option<String>| -> Result<(), Failure> {
        if let Some(v) = v {
            cfg.set(key, v).map_err(|e| Failure::Engine(Error::Config(format!("--{name}: {}", e.root()))))?;
        }
        Ok(())
    };
    flag(&mut cfg, "base", "base", &a.base)?;
    flag(&mut cfg, "prompt-tokens", "prompt_tokens", &a.prompt_tokens)?;
    flag(&mut cfg, "scales", "scales", &a.scales)?;
    match (&a.target, &a.scales) {
        (Some(_), Some(_)) => flag(&mut cfg, "target", "target", &a.target)?,
        (Some(t), None) => {
            let mut probe = GenerationConfig::default();
            probe.set("target", t).map_err(|e| Failure::Engine(Error::Config(format!("--target: {}", e.root()))))?;
            cfg.set_target_with_default_scales(probe.target_h, probe.target_w)
                .map_err(|e| Failure::Engine(Error::Config(format!("--target: {}", e.root()))))?;
        }
        _ => {}
    }
    flag(&mut cfg, "steps", "steps", &a.steps)?;
    flag(&mut cfg, "stride", "stride", &a.stride)?;
    flag(&mut cfg, "c", "c", &a.c)?;
    flag(&mut cfg, "controlnet-steps", "controlnet_steps", &a.controlnet_steps)?;
    flag(&mut cfg, "seed", "seed", &a.seed)?;
    flag(&mut cfg, "backend", "backend", &a.backend)?;
    if a.endpoint.is_some() {
        flag(&mut cfg, "endpoint", "endpoint", &a.endpoint)?;
        if a.backend.is_none() {
            cfg.set("backend", "remote")?;
        }
    }
    flag(&mut cfg, "canny-low", "canny_low", &a.canny_low)?;
    flag(&mut cfg, "canny-high", "canny_high", &a.canny_high)?;
    flag(&mut cfg, "canny-sigma", "canny_sigma", &a.canny_sigma)?;
    for kv in &a.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v).map_err(|e| Failure::Engine(Error::Config(format!("--set {kv}: {}", e.root()))))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn generate(a: &GenerateArgs) -> Result<(), Failure> {
    let cfg = build_config(a)?;
    let (backend, codec) = backend_from_config(&cfg)?;
    let pipeline = Pipeline::new(&cfg, backend.as_ref(), codec.as_ref())?;
    let mut art = RunArtifacts::default();
    let result = pipeline.run(&cfg.prompt_tokens, &mut art);
    let written = write_run_dir(&a.out_dir, &cfg, &art, result.as_ref().ok());
    let image = result?;
    let manifest = written?;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "manifest {}", a.out_dir.join("manifest.txt").display());
    if let Some(e) = manifest.entries.iter().find(|e| e.kind == "image") {
        let _ = writeln!(out, "image {} ({}x{})", a.out_dir.join(&e.path).display(), image.width, image.height);
    }
    Ok(())
}

fn serve_echo(a: &ServeArgs) -> Result<(), Failure> {
    let mut probe = GenerationConfig::default();
    probe.set("base", &a.base).map_err(|e| Failure::Usage(format!("--base: {}", e.root())))?;
    let hello = HelloInfo {
        latent_h: probe.base_h as u32,
        latent_w: probe.base_w as u32,
        channels: a.channels,
        spatial_factor: a.spatial_factor,
    };
    let model = echo_model(hello, (a.attention_scale > 0).then_some(a.attention_scale))?;
    let listener = TcpListener::bind(&a.listen).map_err(Error::from)?;
    let addr = listener.local_addr().map_err(Error::from)?;
    {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "listening on {addr}");
        let _ = out.flush();
    }
    serve(listener, Arc::new(model), Arc::new(AtomicBool::new(false)))?;
    Ok(())
}

fn inspect_cmd(a: &InspectArgs) -> Result<(), Failure> {
    if !a.path.exists() {
        return Err(Failure::NotFound(a.path.clone()));
    }
    let path: &Path = if a.path.is_dir() { &a.path.join("manifest.txt") } else { &a.path };
    if !path.exists() {
        return Err(Failure::NotFound(path.to_path_buf()));
    }
    match &a.pgm {
        Some(dest) => {
            let img = inspect::render_pgm(path)?;
            adp2_core::structure::pnm::save_image(dest, &img)?;
        }
        None => {
            let text = inspect::render_text(path)?;
            let _ = std::io::stdout().lock().write_all(text.as_bytes());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Inspect(a) => inspect_cmd(a),
        Command::ServeEcho(a) => serve_echo(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
