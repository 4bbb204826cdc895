//! Benchmark schema and construction.

pub mod clients;
pub mod orchestrator;
pub mod schema;
pub mod templates;

use std::path::Path;

use crate::config::{ClientKind, RunConfig};
use crate::error::{AppError, AppResult};

pub use orchestrator::{BuildOptions, BuildSummary, Orchestrator};
pub use schema::{BenchmarkId, BenchmarkSample};

/// Builds a benchmark into `out` with the clients and reference pool the
/// config names. Stub clients without a pool get a synthetic one.
pub fn build(cfg: &RunConfig, out: &Path) -> AppResult<BuildSummary> {
    let clients = match cfg.bench.clients {
        ClientKind::Stub => clients::Clients::stub(),
        ClientKind::Http => clients::Clients::http(cfg)?,
    };
    let opts = BuildOptions::from_config(cfg);
    let pool = match (&cfg.bench.reference_pool, cfg.bench.clients) {
        (Some(p), _) => orchestrator::install_pool(p, out)?,
        (None, ClientKind::Stub) => orchestrator::synthetic_pool(out, &opts.categories, 3, cfg.seed)?,
        (None, ClientKind::Http) => {
            return Err(AppError::Config("bench.reference_pool is required with http clients".into()));
        }
    };
    Orchestrator::new(clients, opts, out).build(&pool)
}
