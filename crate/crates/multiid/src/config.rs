//! Run configuration: one TOML document, validated before any model is
//! loaded. Environment variables may supply endpoint credentials and nothing
//! else.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read_string, AppError, AppResult};

pub const BACKENDS: [&str; 1] = ["toy"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthSettings {
    pub enabled: bool,
    pub strength: f64,
}

impl Default for DepthSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            strength: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InversionPrompt {
    Null,
    LocalPrompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSettings {
    pub inversion_prompt: InversionPrompt,
    pub inversion_refine_iters: usize,
    pub cache_layer_stride: usize,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            inversion_prompt: InversionPrompt::Null,
            inversion_refine_iters: 5,
            cache_layer_stride: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientKind {
    Stub,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub clients: ClientKind,
    pub interactions: usize,
    pub prompts_per_interaction: usize,
    pub categories: Vec<String>,
    /// JSON list of `{ "image": path, "category": label }`.
    pub reference_pool: Option<PathBuf>,
    pub attempts: usize,
    pub backoff_ms: u64,
    /// Extra LLM calls allowed when a response yields too few distinct items.
    pub duplicate_retries: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            clients: ClientKind::Stub,
            interactions: 40,
            prompts_per_interaction: 10,
            categories: ["man", "woman", "boy", "girl"].map(String::from).to_vec(),
            reference_pool: None,
            attempts: 3,
            backoff_ms: 500,
            duplicate_retries: 5,
        }
    }
}

/// Service endpoints. Not part of the config digest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Endpoints {
    pub llm: Option<String>,
    pub t2i: Option<String>,
    pub vlm: Option<String>,
    pub det: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backend: String,
    pub seed: u64,
    pub steps: usize,
    pub guidance_scale: f64,
    pub depth_control: DepthSettings,
    pub output_dir: PathBuf,
    pub benchmark_path: Option<PathBuf>,
    pub concurrency: usize,
    pub images_per_sample: usize,
    pub pipeline: PipelineSettings,
    pub bench: BenchSettings,
    pub endpoints: Endpoints,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backend: "toy".into(),
            seed: 0,
            steps: 10,
            guidance_scale: 1.0,
            depth_control: DepthSettings::default(),
            output_dir: PathBuf::from("out"),
            benchmark_path: None,
            concurrency: 4,
            images_per_sample: 4,
            pipeline: PipelineSettings::default(),
            bench: BenchSettings::default(),
            endpoints: Endpoints::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> AppResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> AppResult<Self> {
        let mut cfg = Self::from_toml(&read_string(path)?).map_err(|e| match e {
            AppError::Config(m) => AppError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.output_dir);
        if let Some(p) = cfg.benchmark_path.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.bench.reference_pool.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> AppResult<()> {
        let bad = |m: String| Err(AppError::Config(m));
        if !BACKENDS.contains(&self.backend.as_str()) {
            return bad(format!("unknown backend {:?}; available: {}", self.backend, BACKENDS.join(", ")));
        }
        if !(1..=1000).contains(&self.steps) {
            return bad(format!("steps must be in 1..=1000, got {}", self.steps));
        }
        if !self.guidance_scale.is_finite() {
            return bad("guidance_scale must be finite".into());
        }
        if !self.depth_control.strength.is_finite() {
            return bad("depth_control.strength must be finite".into());
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1".into());
        }
        if self.images_per_sample == 0 {
            return bad("images_per_sample must be at least 1".into());
        }
        if self.pipeline.cache_layer_stride == 0 {
            return bad("pipeline.cache_layer_stride must be at least 1".into());
        }
        let b = &self.bench;
        if b.interactions == 0 || b.prompts_per_interaction == 0 {
            return bad("bench.interactions and bench.prompts_per_interaction must be at least 1".into());
        }
        if b.categories.is_empty() || b.categories.iter().any(|c| c.trim().is_empty()) {
            return bad("bench.categories must be a non-empty list of labels".into());
        }
        if b.attempts == 0 {
            return bad("bench.attempts must be at least 1".into());
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form. Endpoints and the output
    /// directory do not affect results and are left out.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("endpoints");
            m.remove("output_dir");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    /// Endpoint for a service: the `IDB_*_URL` variable wins over the file.
    pub fn endpoint(&self, service: Service) -> Option<String> {
        std::env::var(service.url_var()).ok().filter(|s| !s.is_empty()).or_else(|| {
            match service {
                Service::Llm => &self.endpoints.llm,
                Service::T2i => &self.endpoints.t2i,
                Service::Vlm => &self.endpoints.vlm,
                Service::Det => &self.endpoints.det,
            }
            .clone()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Service {
    Llm,
    T2i,
    Vlm,
    Det,
}

impl Service {
    pub fn url_var(self) -> &'static str {
        match self {
            Service::Llm => "IDB_LLM_URL",
            Service::T2i => "IDB_T2I_URL",
            Service::Vlm => "IDB_VLM_URL",
            Service::Det => "IDB_DET_URL",
        }
    }

    pub fn key_var(self) -> &'static str {
        match self {
            Service::Llm => "IDB_LLM_KEY",
            Service::T2i => "IDB_T2I_KEY",
            Service::Vlm => "IDB_VLM_KEY",
            Service::Det => "IDB_DET_KEY",
        }
    }
}
