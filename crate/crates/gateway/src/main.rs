use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use splatgrade::formats::load_edit_state;
use splatgrade::trainer::TrainConfig;
use splatgrade_gateway::commands::{self, Init, LoadedScene};
use splatgrade_gateway::dataset::{write_synthetic, SynthOptions};
use splatgrade_gateway::service::{self, AppState, DEFAULT_PORT};
use splatgrade_gateway::Result;

#[derive(Parser)]
#[command(name = "splatgrade", version, about = "Palette-decomposed Gaussian splats and color grading")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a scene from a camera manifest.
    Train {
        manifest: PathBuf,
        out: PathBuf,
        /// TOML file with training settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from this scene instead of a random cloud.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        gaussians: usize,
        #[arg(long, default_value_t = 3)]
        sh_degree: usize,
        /// Palette size including grey.
        #[arg(long, short = 'k', default_value_t = 5)]
        palette_size: usize,
        /// Write the training report as JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Render one view of a scene without edits.
    Render {
        scene: PathBuf,
        view: usize,
        out: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Write per-view weight and lightness buffers.
    ExportBuffers { scene: PathBuf, manifest: PathBuf, outdir: PathBuf },
    /// Held-out metrics on every 8th view.
    Eval { scene: PathBuf, manifest: PathBuf },
    /// Run the local editing service.
    Serve {
        scene: PathBuf,
        manifest: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        /// Edit state document; defaults to `<scene>.edit.json`.
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Render one view under an edit state.
    EditApply {
        scene: PathBuf,
        state: PathBuf,
        view: usize,
        out: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Write the synthetic fixture (PNGs, manifest, starting scene).
    Synth {
        outdir: PathBuf,
        #[arg(long, default_value_t = SynthOptions::default().seed)]
        seed: u64,
        #[arg(long, default_value_t = SynthOptions::default().gaussians)]
        gaussians: usize,
        #[arg(long, short = 'k', default_value_t = SynthOptions::default().k)]
        palette_size: usize,
        #[arg(long, default_value_t = SynthOptions::default().views)]
        views: usize,
        #[arg(long, default_value_t = SynthOptions::default().resolution)]
        resolution: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { manifest, out, config, init, gaussians, sh_degree, palette_size, report } => {
            let cfg = match config {
                Some(p) => commands::load_config(&p)?,
                None => TrainConfig::default(),
            };
            let init = match init {
                Some(p) => Init::Scene(p),
                None => Init::Random { gaussians, sh_degree, k: palette_size },
            };
            let rep = commands::train(&manifest, &out, &cfg, &init, |rec| {
                eprintln!("{}", serde_json::to_string(rec).expect("record serializes"));
            })?;
            let text = serde_json::to_string_pretty(&rep).expect("report serializes");
            match report {
                Some(p) => std::fs::write(&p, text).map_err(|e| splatgrade_gateway::GatewayError::Io { path: p, source: e })?,
                None => println!("{text}"),
            }
        }
        Command::Render { scene, view, out, manifest } => {
            let scene = LoadedScene::load(&scene)?;
            let cams = commands::load_cameras(&manifest)?;
            let img = commands::render(&scene, commands::pick_camera(&cams, view)?)?;
            commands::save_image(&img, &out)?;
        }
        Command::ExportBuffers { scene, manifest, outdir } => {
            let scene = LoadedScene::load(&scene)?;
            let cams = commands::load_cameras(&manifest)?;
            for p in commands::export_buffers(&scene, &cams, &outdir)? {
                println!("{}", p.display());
            }
        }
        Command::Eval { scene, manifest } => {
            let scene = LoadedScene::load(&scene)?;
            let summary = commands::eval(&scene, &manifest)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        }
        Command::Serve { scene: scene_path, manifest, port, state } => {
            let scene = LoadedScene::load(&scene_path)?;
            let cams = commands::load_cameras(&manifest)?;
            let state = state.unwrap_or_else(|| scene_path.with_extension("edit.json"));
            let app = AppState::new(&scene, cams, Some(state))?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| splatgrade_gateway::GatewayError::Server(e.to_string()))?;
            rt.block_on(service::serve(app, port))?;
        }
        Command::EditApply { scene, state, view, out, manifest } => {
            let scene = LoadedScene::load(&scene)?;
            let state = load_edit_state(&state)?;
            let cams = commands::load_cameras(&manifest)?;
            let img = commands::edit_apply(&scene, &state, commands::pick_camera(&cams, view)?)?;
            commands::save_image(&img, &out)?;
        }
        Command::Synth { outdir, seed, gaussians, palette_size, views, resolution } => {
            let out = write_synthetic(&outdir, SynthOptions { seed, gaussians, k: palette_size, views, resolution })?;
            println!("{}", out.manifest.display());
            println!("{}", out.init.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
