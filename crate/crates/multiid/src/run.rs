//! `generate` and `invert`: request files in, PNGs plus a manifest out.

use std::path::{Path, PathBuf};
use std::time::Instant;

use multiid_core::backend::BackendBundle;
use multiid_core::imageops::resize_area;
use multiid_core::pipeline::{
    ddim_invert, null_conditioning, Background, DepthControl, GenerationRequest, IdReference, InversionConditioning,
    InversionOptions, Pipeline, PipelineConfig,
};
use multiid_core::schedule::DdimSchedule;
use multiid_core::toy::toy_bundle;
use multiid_core::{rasterize_mask, BBox, RealArray, SpatialMask};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::orchestrator::fan_out;
use crate::bench::schema::{self, BenchmarkSample};
use crate::config::{InversionPrompt, RunConfig};
use crate::error::{read_string, write, AppError, AppResult};
use crate::imageio::{load_rgb, save_png};

/// Adapters for a configured backend name.
pub fn backend(name: &str) -> AppResult<BackendBundle> {
    match name {
        "toy" => Ok(toy_bundle()),
        other => Err(AppError::Config(format!("unknown backend {other:?}"))),
    }
}

pub fn pipeline_config(cfg: &RunConfig) -> PipelineConfig {
    PipelineConfig {
        inversion_conditioning: match cfg.pipeline.inversion_prompt {
            InversionPrompt::Null => InversionConditioning::Null,
            InversionPrompt::LocalPrompt => InversionConditioning::LocalPrompt,
        },
        inversion_refine_iters: cfg.pipeline.inversion_refine_iters,
        cache_layer_stride: cfg.pipeline.cache_layer_stride,
        ..PipelineConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestId {
    pub reference_image: PathBuf,
    #[serde(default)]
    pub local_prompt: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestBackground {
    pub image: PathBuf,
    /// Regions the model may repaint; everything else is kept.
    pub foreground_boxes: Vec<BBox>,
}

/// JSON request file. Paths are relative to the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestFile {
    pub global_prompt: String,
    pub ids: Vec<RequestId>,
    #[serde(default)]
    pub background: Option<RequestBackground>,
}

/// A request with its images loaded and fitted to the codec resolution.
#[derive(Debug, Clone)]
pub struct Job {
    pub name: String,
    pub global_prompt: String,
    pub ids: Vec<(RealArray, String, BBox)>,
    pub background: Option<Background>,
}

fn fit(image: RealArray, bundle: &BackendBundle) -> AppResult<RealArray> {
    let [_, h, w] = bundle
        .image_codec
        .as_ref()
        .ok_or_else(|| AppError::Config("backend has no image codec".into()))?
        .image_shape();
    Ok(resize_area(&image, h, w)?)
}

pub fn load_request(path: &Path, bundle: &BackendBundle) -> AppResult<Job> {
    let req: RequestFile = serde_json::from_str(&read_string(path)?)
        .map_err(|e| AppError::Validation(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let ids = req
        .ids
        .iter()
        .map(|i| Ok((fit(load_rgb(&base.join(&i.reference_image))?, bundle)?, i.local_prompt.clone(), i.bbox)))
        .collect::<AppResult<Vec<_>>>()?;
    let background = match &req.background {
        Some(bg) => {
            let [_, h, w] = bundle
                .denoiser
                .as_ref()
                .ok_or_else(|| AppError::Config("backend has no denoiser".into()))?
                .latent_shape();
            let masks = bg
                .foreground_boxes
                .iter()
                .map(|b| rasterize_mask(b, h, w))
                .collect::<multiid_core::Result<Vec<_>>>()?;
            if masks.is_empty() {
                return Err(AppError::Validation("background needs at least one foreground box".into()));
            }
            Some(Background {
                image: fit(load_rgb(&base.join(&bg.image))?, bundle)?,
                foreground_mask: SpatialMask::union(&masks)?,
            })
        }
        None => None,
    };
    Ok(Job {
        name: "image".into(),
        global_prompt: req.global_prompt,
        ids,
        background,
    })
}

/// One job per benchmark sample; local prompts are the full descriptions.
pub fn benchmark_jobs(samples: &[BenchmarkSample], base: &Path, bundle: &BackendBundle) -> AppResult<Vec<Job>> {
    samples
        .iter()
        .map(|s| {
            let ids = s
                .ids
                .iter()
                .map(|i| Ok((fit(load_rgb(&base.join(&i.reference_image))?, bundle)?, i.full_description.clone(), i.bbox)))
                .collect::<AppResult<Vec<_>>>()?;
            Ok(Job {
                name: s.sample_id.clone(),
                global_prompt: s.global_prompt.clone(),
                ids,
                background: None,
            })
        })
        .collect()
}

fn request_for(job: &Job, cfg: &RunConfig, seed: u64) -> GenerationRequest {
    GenerationRequest {
        global_prompt: job.global_prompt.clone(),
        ids: job
            .ids
            .iter()
            .enumerate()
            .map(|(k, (image, prompt, bbox))| IdReference {
                image: image.clone(),
                local_prompt: prompt.clone(),
                bbox: *bbox,
                identity_index: k,
            })
            .collect(),
        seed,
        steps: cfg.steps,
        guidance_scale: cfg.guidance_scale,
        depth_control: DepthControl {
            enabled: cfg.depth_control.enabled,
            strength: cfg.depth_control.strength,
        },
        background: job.background.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub file: String,
    pub sample: String,
    pub seed: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub backend: String,
    pub seed: u64,
    pub steps: usize,
    pub guidance_scale: f64,
    pub depth_control: bool,
    pub images_per_sample: usize,
    pub images: Vec<ManifestImage>,
    /// Wall-clock timings live in a separate file so this one stays
    /// reproducible.
    pub timings: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTiming {
    pub file: String,
    pub total_ms: f64,
    /// Setup, reference inversion and the first denoising step.
    pub until_first_step_ms: f64,
    pub step_ms: Vec<f64>,
    pub write_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub load_ms: f64,
    pub images: Vec<ImageTiming>,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Writes `images_per_sample` images per job (seed `cfg.seed + k`), then
/// `manifest.json` and `timings.json`. Benchmark jobs go to
/// `<sample_id>/<k>.png`, a single request to `image_<k>.png`.
pub fn generate(cfg: &RunConfig, jobs: &[Job], nested: bool, out: &Path, load_ms: f64) -> AppResult<Manifest> {
    let bundle = backend(&cfg.backend)?;
    let backends = bundle.generation()?;
    let bound = if backends.denoiser.concurrency_safe() { cfg.concurrency } else { 1 };
    let pcfg = pipeline_config(cfg);
    let units: Vec<(usize, usize)> = (0..jobs.len())
        .flat_map(|j| (0..cfg.images_per_sample).map(move |k| (j, k)))
        .collect();
    let results = fan_out(&units, bound, |_, &(j, k)| -> AppResult<(ManifestImage, ImageTiming)> {
        let job = &jobs[j];
        let seed = cfg.seed.wrapping_add(k as u64);
        let file = if nested { format!("{}/{k}.png", job.name) } else { format!("image_{k}.png") };
        let pipeline = Pipeline::new(bundle.generation()?, pcfg.clone());
        let start = Instant::now();
        let mut marks = Vec::new();
        let output = pipeline.run(&request_for(job, cfg, seed), &mut |_| marks.push(ms(start)))?;
        let total = ms(start);
        let t = Instant::now();
        let bytes = save_png(&out.join(&file), &output.image)?;
        let step_ms = std::iter::once(0.0).chain(marks.iter().copied()).collect::<Vec<_>>();
        Ok((
            ManifestImage {
                file: file.clone(),
                sample: job.name.clone(),
                seed,
                sha256: hex::encode(Sha256::digest(&bytes)),
            },
            ImageTiming {
                file,
                total_ms: total,
                until_first_step_ms: marks.first().copied().unwrap_or(total),
                step_ms: step_ms.windows(2).skip(1).map(|w| w[1] - w[0]).collect(),
                write_ms: ms(t),
            },
        ))
    });
    let (images, timings): (Vec<_>, Vec<_>) = results.into_iter().collect::<AppResult<Vec<_>>>()?.into_iter().unzip();
    let manifest = Manifest {
        config_digest: cfg.digest(),
        backend: cfg.backend.clone(),
        seed: cfg.seed,
        steps: cfg.steps,
        guidance_scale: cfg.guidance_scale,
        depth_control: cfg.depth_control.enabled,
        images_per_sample: cfg.images_per_sample,
        images,
        timings: "timings.json".into(),
    };
    write(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n")?;
    let timings = Timings { load_ms, images: timings };
    write(&out.join("timings.json"), serde_json::to_string_pretty(&timings).expect("timings serialize") + "\n")?;
    Ok(manifest)
}

pub fn generate_request(cfg: &RunConfig, request: &Path, out: &Path) -> AppResult<Manifest> {
    let t = Instant::now();
    let job = load_request(request, &backend(&cfg.backend)?)?;
    generate(cfg, &[job], false, out, ms(t))
}

pub fn generate_benchmark(cfg: &RunConfig, benchmark: &Path, out: &Path) -> AppResult<Manifest> {
    let t = Instant::now();
    let samples = schema::load(benchmark)?;
    let jobs = benchmark_jobs(&samples, benchmark.parent().unwrap_or(Path::new("")), &backend(&cfg.backend)?)?;
    generate(cfg, &jobs, true, out, ms(t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionSummary {
    pub config_digest: String,
    pub steps: usize,
    pub refine_iters: usize,
    pub cache_entries: usize,
    pub roundtrip_max_abs_error: f64,
    pub reconstruction: String,
}

/// Inverts one image and writes the replayed reconstruction.
pub fn invert(cfg: &RunConfig, image: &Path, prompt: &str, out: &Path) -> AppResult<InversionSummary> {
    let bundle = backend(&cfg.backend)?;
    let b = bundle.generation()?;
    let img = fit(load_rgb(image)?, &bundle)?;
    let latent = b.image_codec.encode(&img)?;
    let cond = if prompt.is_empty() {
        null_conditioning(b.denoiser.model_dim())
    } else {
        multiid_core::attention::BlockSet::new(vec![multiid_core::attention::EmbeddingBlock::global(
            b.text_encoder.encode_text(prompt)?,
        )])
    };
    let s = DdimSchedule::scaled_linear(cfg.steps)?;
    let inv = ddim_invert(
        &latent,
        &s,
        b.denoiser,
        &cond,
        &InversionOptions {
            owner_id: 0,
            refine_iters: cfg.pipeline.inversion_refine_iters,
            cache_layer_stride: cfg.pipeline.cache_layer_stride,
        },
    )?;
    save_png(&out.join("reconstruction.png"), &b.image_codec.decode(&inv.reconstruction)?)?;
    let summary = InversionSummary {
        config_digest: cfg.digest(),
        steps: cfg.steps,
        refine_iters: cfg.pipeline.inversion_refine_iters,
        cache_entries: inv.cache.len(),
        roundtrip_max_abs_error: inv.reconstruction.max_abs_diff(&latent),
        reconstruction: "reconstruction.png".into(),
    };
    write(&out.join("inversion.json"), serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")?;
    Ok(summary)
}
