use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use dmiso_core::fit::FitConfig;
use dmiso_service::{commands, metrics, render_workers, scene_file::load_scene, server};

#[derive(Parser)]
#[command(name = "dmiso", version, about = "Fit, render and edit dynamic flat-Gaussian scenes")]
struct Cli {
    #[command(subcommand)]
    command: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Fit a scene to a dataset directory.
    Fit {
        dataset: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 25)]
        k: usize,
        #[arg(long, default_value_t = 500)]
        stage2_start: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Full fit configuration as JSON; the flags above override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render one frame to PNG.
    Render {
        scene: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        time: f64,
        #[arg(long, conflicts_with = "pose")]
        camera_index: Option<usize>,
        /// Camera JSON file.
        #[arg(long)]
        pose: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        /// Use the reference compositor.
        #[arg(long)]
        brute: bool,
    },
    /// Apply a JSON array of edit requests.
    Edit {
        scene: PathBuf,
        #[arg(long)]
        ops: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Export the alpha shape of the cores at a time as OBJ.
    Mesh {
        scene: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        time: f64,
        /// Defaults to twice the median nearest-neighbour distance.
        #[arg(long)]
        radius: Option<f64>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Generate a synthetic dataset from a spec JSON.
    Synth {
        spec: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Serve the HTTP/WebSocket edit API.
    Serve {
        scene: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
    /// PSNR/SSIM table of matching PNGs in two directories.
    Metrics { a: PathBuf, b: PathBuf },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    match Cli::parse().command {
        Verb::Fit { dataset, output, iters, batch, k, stage2_start, seed, config } => {
            let mut cfg = match config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => FitConfig::default(),
            };
            cfg.total_iterations = iters;
            cfg.batch_size = batch;
            cfg.subs_per_core = k;
            cfg.stage2_start = stage2_start;
            cfg.seed = seed;
            let held_out = rayon::ThreadPoolBuilder::new()
                .num_threads(render_workers())
                .build()?
                .install(|| commands::fit_command(&dataset, &output, &cfg, 50))?;
            if let Some(p) = held_out {
                println!("held-out psnr {p:.3}");
            }
        }
        Verb::Render { scene, time, camera_index, pose, output, brute } => {
            commands::render_command(&scene, time, camera_index, pose.as_deref(), &output, brute)?;
        }
        Verb::Edit { scene, ops, output } => commands::edit_command(&scene, &ops, &output)?,
        Verb::Mesh { scene, time, radius, output } => commands::mesh_command(&scene, time, radius, &output)?,
        Verb::Synth { spec, output } => commands::synth_command(&spec, &output)?,
        Verb::Serve { scene, port, host } => {
            let file = load_scene(&scene)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(file, SocketAddr::new(host, port), render_workers()))?;
        }
        Verb::Metrics { a, b } => print!("{}", metrics::compare_dirs(&a, &b)?.to_text()),
    }
    Ok(())
}
