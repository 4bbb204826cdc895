//! Model contracts. Denoisers expose their attention sites through
//! [`AttentionHooks`]; the pipeline installs region-gated variants there.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use crate::array::RealArray;
use crate::attention::{plain_attention, BlockSet, ProjectionSet};
use crate::error::{Error, Result};
use crate::mask::BBox;

/// Opaque identifier of one attention site inside a denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteKind {
    SelfAttention,
    CrossAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSite {
    pub layer_id: LayerId,
    pub kind: SiteKind,
    /// Token grid `(h, w)` the site operates on.
    pub grid: (usize, usize),
}

/// Where in the schedule a denoiser call happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepContext {
    pub timestep_index: usize,
    /// Training-schedule timestep, used for timestep embeddings.
    pub timestep: usize,
}

pub trait AttentionHooks {
    fn self_attention(
        &mut self,
        site: &AttentionSite,
        step: &StepContext,
        x: &RealArray,
        p: &ProjectionSet,
    ) -> Result<RealArray>;

    fn cross_attention(
        &mut self,
        site: &AttentionSite,
        step: &StepContext,
        x: &RealArray,
        cond: &BlockSet,
        p: &ProjectionSet,
    ) -> Result<RealArray>;
}

/// Stock attention: self-attention over `x`, cross-attention over every
/// conditioning token with gates ignored.
#[derive(Debug, Default, Clone, Copy)]
pub struct PlainHooks;

impl AttentionHooks for PlainHooks {
    fn self_attention(&mut self, _: &AttentionSite, _: &StepContext, x: &RealArray, p: &ProjectionSet) -> Result<RealArray> {
        plain_attention(x, x, p)
    }

    fn cross_attention(
        &mut self,
        _: &AttentionSite,
        _: &StepContext,
        x: &RealArray,
        cond: &BlockSet,
        p: &ProjectionSet,
    ) -> Result<RealArray> {
        plain_attention(x, &cond.concatenated()?, p)
    }
}

/// Noise predictor. Must be deterministic for fixed inputs.
pub trait Denoiser: Send + Sync {
    /// `[channels, h, w]`
    fn latent_shape(&self) -> [usize; 3];
    /// Width of conditioning tokens.
    fn model_dim(&self) -> usize;
    fn attention_sites(&self) -> &[AttentionSite];
    /// Number of blocks accepting spatial-control residuals.
    fn control_slots(&self) -> usize {
        0
    }
    fn predict(
        &self,
        latent: &RealArray,
        step: &StepContext,
        cond: &BlockSet,
        hooks: &mut dyn AttentionHooks,
        control: Option<&[RealArray]>,
    ) -> Result<RealArray>;
    fn concurrency_safe(&self) -> bool {
        false
    }
}

pub trait TextEncoder: Send + Sync {
    /// `(tokens × model_dim)`
    fn encode_text(&self, text: &str) -> Result<RealArray>;
}

pub trait IdEncoder: Send + Sync {
    /// `(rows × model_dim)` identity embedding of a reference image.
    fn encode_id(&self, image: &RealArray) -> Result<RealArray>;
}

/// Pixel tensors are `[3, H, W]` with values in `[0, 1]`.
pub trait ImageCodec: Send + Sync {
    fn image_shape(&self) -> [usize; 3];
    fn encode(&self, image: &RealArray) -> Result<RealArray>;
    fn decode(&self, latent: &RealArray) -> Result<RealArray>;
}

pub trait DepthEstimator: Send + Sync {
    /// `(H × W)` depth, any range.
    fn estimate(&self, image: &RealArray) -> Result<RealArray>;
}

pub trait SpatialControl: Send + Sync {
    /// One residual per denoiser control slot, for the given latent.
    fn residuals(&self, latent: &RealArray, step: &StepContext, depth: &RealArray) -> Result<Vec<RealArray>>;
}

pub trait InitialImageGenerator: Send + Sync {
    fn generate(&self, prompt: &str, seed: u64) -> Result<RealArray>;
}

pub trait PersonDetector: Send + Sync {
    fn detect(&self, image: &RealArray) -> Result<Vec<BBox>>;
    fn concurrency_safe(&self) -> bool {
        false
    }
}

pub trait ImageEmbedder: Send + Sync {
    /// Image feature vector (e.g. CLIP image embedding).
    fn embed_image(&self, image: &RealArray) -> Result<Vec<f64>>;
}

pub trait TextImageScorer: Send + Sync {
    /// Cosine similarity between a text and an image.
    fn similarity(&self, image: &RealArray, text: &str) -> Result<f64>;
}

pub trait PreferenceScorer: Send + Sync {
    /// Human-preference score in `[0, 1]`.
    fn score(&self, image: &RealArray, prompt: &str) -> Result<f64>;
}

pub trait FaceEmbedder: Send + Sync {
    /// Embedding of the most prominent face, or `None` if no face is found.
    fn embed_face(&self, image: &RealArray) -> Result<Option<Vec<f64>>>;
}

/// Every adapter a generation or evaluation run may need.
#[derive(Default)]
pub struct BackendBundle {
    pub name: String,
    pub denoiser: Option<Box<dyn Denoiser>>,
    pub text_encoder: Option<Box<dyn TextEncoder>>,
    pub id_encoder: Option<Box<dyn IdEncoder>>,
    pub image_codec: Option<Box<dyn ImageCodec>>,
    pub depth_estimator: Option<Box<dyn DepthEstimator>>,
    pub spatial_control: Option<Box<dyn SpatialControl>>,
    pub initial_image_generator: Option<Box<dyn InitialImageGenerator>>,
    pub person_detector: Option<Box<dyn PersonDetector>>,
    pub image_embedder: Option<Box<dyn ImageEmbedder>>,
    pub text_image_scorer: Option<Box<dyn TextImageScorer>>,
    pub preference_scorer: Option<Box<dyn PreferenceScorer>>,
    pub face_embedder: Option<Box<dyn FaceEmbedder>>,
}

/// Borrowed view of the adapters generation requires.
pub struct GenerationBackends<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub text_encoder: &'a dyn TextEncoder,
    pub id_encoder: &'a dyn IdEncoder,
    pub image_codec: &'a dyn ImageCodec,
    pub depth_estimator: Option<&'a dyn DepthEstimator>,
    pub spatial_control: Option<&'a dyn SpatialControl>,
    pub initial_image_generator: Option<&'a dyn InitialImageGenerator>,
}

/// Borrowed view of the adapters evaluation requires.
pub struct EvaluationBackends<'a> {
    pub person_detector: &'a dyn PersonDetector,
    pub image_embedder: &'a dyn ImageEmbedder,
    pub text_image_scorer: &'a dyn TextImageScorer,
    pub preference_scorer: &'a dyn PreferenceScorer,
    pub face_embedder: &'a dyn FaceEmbedder,
}

fn missing(what: &str) -> Error {
    Error::config(alloc::format!("backend bundle is missing {what}"))
}

impl BackendBundle {
    pub fn generation(&self) -> Result<GenerationBackends<'_>> {
        Ok(GenerationBackends {
            denoiser: self.denoiser.as_deref().ok_or_else(|| missing("a denoiser"))?,
            text_encoder: self.text_encoder.as_deref().ok_or_else(|| missing("a text encoder"))?,
            id_encoder: self.id_encoder.as_deref().ok_or_else(|| missing("an ID encoder"))?,
            image_codec: self.image_codec.as_deref().ok_or_else(|| missing("an image codec"))?,
            depth_estimator: self.depth_estimator.as_deref(),
            spatial_control: self.spatial_control.as_deref(),
            initial_image_generator: self.initial_image_generator.as_deref(),
        })
    }

    pub fn evaluation(&self) -> Result<EvaluationBackends<'_>> {
        Ok(EvaluationBackends {
            person_detector: self.person_detector.as_deref().ok_or_else(|| missing("a person detector"))?,
            image_embedder: self.image_embedder.as_deref().ok_or_else(|| missing("an image embedder"))?,
            text_image_scorer: self
                .text_image_scorer
                .as_deref()
                .ok_or_else(|| missing("a text-image scorer"))?,
            preference_scorer: self
                .preference_scorer
                .as_deref()
                .ok_or_else(|| missing("a preference scorer"))?,
            face_embedder: self.face_embedder.as_deref().ok_or_else(|| missing("a face embedder"))?,
        })
    }
}
