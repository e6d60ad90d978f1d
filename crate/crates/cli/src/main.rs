//! `gaussfield` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use gaussfield::io;
use gaussfield::{apply_ops, composite_over, replay_animation, ModelConfig, PixelRect, TrainOptions};

#[derive(Parser)]
#[command(name = "gaussfield", version, about = "Gaussian-anchored neural image fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to an image, bake it and save a checkpoint.
    Train {
        #[arg(long)]
        image: PathBuf,
        /// JSON file with model config fields; omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `iterations`.
        #[arg(long)]
        iters: Option<usize>,
        /// Overrides `rng_seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Suppress per-100-iteration progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Render a checkpoint to PNG.
    Render {
        #[arg(long)]
        model: PathBuf,
        /// Defaults to the training image width.
        #[arg(long)]
        width: Option<usize>,
        /// Defaults to the training image height.
        #[arg(long)]
        height: Option<usize>,
        /// Pixel rectangle `x0,y0,x1,y1` (exclusive upper bounds).
        #[arg(long)]
        region: Option<Region>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the PSNR of a checkpoint's native render (as 8-bit PNG data)
    /// against an image. Identical images print `inf`.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Apply an edit script to a baked checkpoint.
    Edit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render every frame of an animation manifest.
    Animate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Alpha-composite an RGBA foreground over an RGB background.
    Composite {
        #[arg(long)]
        fg: PathBuf,
        #[arg(long)]
        bg: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP/WebSocket service.
    Serve {
        /// Checkpoint to load as the initial working copy.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = gaussfield_service::DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(Clone, Copy, Debug)]
struct Region(PixelRect);

impl FromStr for Region {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<_, _>>()?;
        match v[..] {
            [x0, y0, x1, y1] => Ok(Region(PixelRect { x0, y0, x1, y1 })),
            _ => Err(format!("expected x0,y0,x1,y1, got {} values", v.len())),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    let Some(path) = path else {
        return Ok(ModelConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn train(
    image: &Path,
    config: Option<&Path>,
    out: &Path,
    iters: Option<usize>,
    seed: Option<u64>,
    quiet: bool,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(n) = iters {
        cfg.iterations = n;
    }
    if let Some(s) = seed {
        cfg.rng_seed = s;
    }
    cfg.clone().validate().context("config")?;
    let target = io::load_image(image).context("loading image")?;
    let fitted = gaussfield::fit(&target, cfg, &TrainOptions::default(), |r| {
        if !quiet {
            eprintln!("iter {:>6}  loss {:.6}  psnr {:.3}", r.iter, r.loss, r.psnr);
        }
        ControlFlow::Continue(())
    })
    .context("training")?;
    io::save_checkpoint(&fitted.model, out).context("saving checkpoint")?;
    println!("{}", fitted.psnr);
    Ok(())
}

fn render(model: &Path, width: Option<usize>, height: Option<usize>, region: Option<Region>, out: &Path) -> Result<()> {
    let model = io::load_checkpoint(model).context("loading checkpoint")?;
    let (w, h) = model.native_size();
    let img = model
        .render(width.unwrap_or(w), height.unwrap_or(h), region.map(|r| r.0))
        .context("rendering")?;
    io::save_image(&img, out).context("writing image")?;
    Ok(())
}

fn eval(model: &Path, image: &Path) -> Result<()> {
    let model = io::load_checkpoint(model).context("loading checkpoint")?;
    let target = io::load_image(image).context("loading image")?;
    let out = model.render_native().context("rendering")?;
    let psnr = gaussfield::psnr(&io::quantize_image(&out), &target).context("comparing")?;
    println!("{psnr}");
    Ok(())
}

fn edit(model: &Path, script: &Path, out: &Path) -> Result<()> {
    let mut model = io::load_checkpoint(model).context("loading checkpoint")?;
    let text = std::fs::read_to_string(script).with_context(|| format!("reading script {}", script.display()))?;
    let ops = io::parse_edit_script(&text).context("parsing script")?;
    for (i, op) in ops.iter().enumerate() {
        apply_ops(&mut model, std::slice::from_ref(op)).with_context(|| format!("op {i}"))?;
    }
    io::save_checkpoint(&model, out).context("saving checkpoint")?;
    Ok(())
}

fn animate(model: &Path, manifest: &Path, outdir: &Path) -> Result<()> {
    let mut model = io::load_checkpoint(model).context("loading checkpoint")?;
    let manifest = io::parse_animation_manifest(manifest).context("reading manifest")?;
    std::fs::create_dir_all(outdir).with_context(|| format!("creating {}", outdir.display()))?;
    for (k, frame) in replay_animation(&mut model, &manifest)?.enumerate() {
        let frame = frame.with_context(|| format!("frame {k}"))?;
        let path = outdir.join(format!("frame_{k:04}.png"));
        io::save_image(&frame, &path).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn composite(fg: &Path, bg: &Path, out: &Path) -> Result<()> {
    let fg = io::load_image(fg).context("loading foreground")?;
    let bg = io::load_image(bg).context("loading background")?;
    let img = composite_over(&fg, &bg).context("compositing")?;
    io::save_image(&img, out).context("writing image")?;
    Ok(())
}

fn serve(model: Option<&Path>, host: &str, port: u16) -> Result<()> {
    let model = model.map(|p| io::load_checkpoint(p).context("loading checkpoint")).transpose()?;
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        gaussfield_service::serve(listener, gaussfield_service::AppState::new(model), shutdown)
            .await
            .context("serving")
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { image, config, out, iters, seed, quiet } => {
            train(&image, config.as_deref(), &out, iters, seed, quiet)
        }
        Command::Render { model, width, height, region, out } => render(&model, width, height, region, &out),
        Command::Eval { model, image } => eval(&model, &image),
        Command::Edit { model, script, out } => edit(&model, &script, &out),
        Command::Animate { model, manifest, outdir } => animate(&model, &manifest, &outdir),
        Command::Composite { fg, bg, out } => composite(&fg, &bg, &out),
        Command::Serve { model, port, host } => serve(model.as_deref(), &host, port),
    }
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
