//! Files, datasets, the command line and the HTTP edit service for dmiso scenes.

pub mod commands;
pub mod dataset;
pub mod metrics;
pub mod scene_file;
pub mod server;
pub mod state;

/// Render workers: `DMISO_THREADS` when set, otherwise every core.
pub fn render_workers() -> usize {
    std::env::var("DMISO_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
