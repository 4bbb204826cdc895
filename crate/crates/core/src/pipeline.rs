//! Generation pipeline: reference inversion with feature caching, the
//! region-gated denoising loop, optional depth guidance and background
//! repainting.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::array::RealArray;
use crate::attention::{
    extended_self_attention, fuse_id_embedding, masked_cross_attention, plain_attention, BlockLabel, BlockSet,
    EmbeddingBlock, FeatureCacheEntry, Gate, ProjectionSet,
};
use crate::backend::{
    AttentionHooks, AttentionSite, DepthEstimator, Denoiser, GenerationBackends, InitialImageGenerator, LayerId,
    PersonDetector, PlainHooks, SiteKind, StepContext,
};
use crate::error::{Error, Result, Stage};
use crate::imageops::resize_area;
use crate::mask::{rasterize_mask, BBox, SpatialMask};
use crate::rng::{normals, seeded};
use crate::schedule::{ddim_step, forward_noise, DdimSchedule, Direction, LatentState};

/// Self-attention inputs keyed by `(layer, timestep index, identity)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureCache {
    entries: BTreeMap<(LayerId, usize, usize), FeatureCacheEntry>,
}

impl FeatureCache {
    pub fn insert(&mut self, entry: FeatureCacheEntry) -> Result<()> {
        let key = (entry.layer_id, entry.timestep_index, entry.owner_id);
        if self.entries.contains_key(&key) {
            return Err(Error::config(format!(
                "duplicate cache entry for layer {:?}, step {}, identity {}",
                key.0, key.1, key.2
            )));
        }
        self.entries.insert(key, entry);
        Ok(())
    }

    pub fn get(&self, layer: LayerId, timestep_index: usize, owner: usize) -> Option<&FeatureCacheEntry> {
        self.entries.get(&(layer, timestep_index, owner))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &FeatureCacheEntry> {
        self.entries.values()
    }

    pub fn owners(&self) -> BTreeSet<usize> {
        self.entries.keys().map(|k| k.2).collect()
    }

    pub fn merge(&mut self, other: FeatureCache) -> Result<()> {
        for e in other.entries.into_values() {
            self.insert(e)?;
        }
        Ok(())
    }
}

/// Plain attention that also records self-attention inputs into a cache.
pub struct RecordingHooks<'a> {
    owner: usize,
    layers: &'a BTreeSet<LayerId>,
    cache: &'a mut FeatureCache,
}

impl<'a> RecordingHooks<'a> {
    pub fn new(owner: usize, layers: &'a BTreeSet<LayerId>, cache: &'a mut FeatureCache) -> Self {
        Self { owner, layers, cache }
    }
}

impl AttentionHooks for RecordingHooks<'_> {
    fn self_attention(&mut self, site: &AttentionSite, step: &StepContext, x: &RealArray, p: &ProjectionSet) -> Result<RealArray> {
        if self.layers.contains(&site.layer_id) {
            self.cache.insert(FeatureCacheEntry {
                layer_id: site.layer_id,
                timestep_index: step.timestep_index,
                features: x.clone(),
                owner_id: self.owner,
            })?;
        }
        PlainHooks.self_attention(site, step, x, p)
    }

    fn cross_attention(
        &mut self,
        site: &AttentionSite,
        step: &StepContext,
        x: &RealArray,
        cond: &BlockSet,
        p: &ProjectionSet,
    ) -> Result<RealArray> {
        PlainHooks.cross_attention(site, step, x, cond, p)
    }
}

/// An identity's region on the normalized image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityRegion {
    pub identity: usize,
    pub bbox: BBox,
}

/// Installs masked cross-attention and extended self-attention at every site.
///
/// Masks are rasterized once per distinct site grid. Local blocks belonging
/// to a known identity are re-gated at the site's grid; other blocks keep
/// their own gates.
pub struct RegionHooks<'a> {
    cache: &'a FeatureCache,
    regions: &'a [IdentityRegion],
    masks: BTreeMap<(usize, usize), Vec<SpatialMask>>,
}

impl<'a> RegionHooks<'a> {
    pub fn new(cache: &'a FeatureCache, regions: &'a [IdentityRegion]) -> Self {
        Self {
            cache,
            regions,
            masks: BTreeMap::new(),
        }
    }

    /// Rasterizes every region for each grid up front.
    pub fn with_grids(mut self, grids: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        for g in grids {
            self.masks_for(g)?;
        }
        Ok(self)
    }

    pub fn cached_resolutions(&self) -> usize {
        self.masks.len()
    }

    fn masks_for(&mut self, grid: (usize, usize)) -> Result<&Vec<SpatialMask>> {
        if !self.masks.contains_key(&grid) {
            let masks = self
                .regions
                .iter()
                .map(|r| rasterize_mask(&r.bbox, grid.0, grid.1))
                .collect::<Result<Vec<_>>>()?;
            self.masks.insert(grid, masks);
        }
        Ok(&self.masks[&grid])
    }
}

impl AttentionHooks for RegionHooks<'_> {
    fn self_attention(&mut self, site: &AttentionSite, step: &StepContext, x: &RealArray, p: &ProjectionSet) -> Result<RealArray> {
        let cache = self.cache;
        let regions = self.regions;
        let masks = self.masks_for(site.grid)?;
        let mut entries = Vec::new();
        let mut gates = Vec::new();
        for (region, mask) in regions.iter().zip(masks) {
            if let Some(e) = cache.get(site.layer_id, step.timestep_index, region.identity) {
                entries.push(e.clone());
                gates.push(mask.clone());
            }
        }
        extended_self_attention(x, &entries, &gates, p)
    }

    fn cross_attention(
        &mut self,
        site: &AttentionSite,
        _: &StepContext,
        x: &RealArray,
        cond: &BlockSet,
        p: &ProjectionSet,
    ) -> Result<RealArray> {
        let regions = self.regions;
        let masks = self.masks_for(site.grid)?;
        let blocks = cond
            .blocks
            .iter()
            .map(|b| match b.label {
                BlockLabel::Local(i) => match regions.iter().position(|r| r.identity == i) {
                    Some(k) => EmbeddingBlock {
                        tokens: b.tokens.clone(),
                        gate: Gate::Mask(masks[k].clone()),
                        label: b.label,
                    },
                    None => b.clone(),
                },
                BlockLabel::Global => b.clone(),
            })
            .collect();
        masked_cross_attention(x, &BlockSet::new(blocks), p)
    }
}

/// Self-attention layers selected for caching: every `stride`-th one.
pub fn cached_layers(denoiser: &dyn Denoiser, stride: usize) -> BTreeSet<LayerId> {
    denoiser
        .attention_sites()
        .iter()
        .filter(|s| s.kind == SiteKind::SelfAttention)
        .enumerate()
        .filter(|(i, _)| i % stride.max(1) == 0)
        .map(|(_, s)| s.layer_id)
        .collect()
}

/// Conditioning made of a single zero token.
pub fn null_conditioning(model_dim: usize) -> BlockSet {
    BlockSet::new(vec![EmbeddingBlock::global(RealArray::zeros(&[1, model_dim]))])
}

fn step_ctx(s: &DdimSchedule, t: usize) -> Result<StepContext> {
    Ok(StepContext {
        timestep_index: t,
        timestep: s.timestep(t)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InversionOptions {
    pub owner_id: usize,
    /// Fixed-point refinements of each inversion step (0 = plain DDIM
    /// inversion).
    pub refine_iters: usize,
    pub cache_layer_stride: usize,
}

impl Default for InversionOptions {
    fn default() -> Self {
        Self {
            owner_id: 0,
            refine_iters: 5,
            cache_layer_stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    /// Terminal latent at index `S`.
    pub inverted: LatentState,
    pub cache: FeatureCache,
    /// Result of replaying the sampler from `inverted` back to index 0.
    pub reconstruction: RealArray,
}

/// Inverts a clean latent to index `S`, then replays the sampler from there
/// and records every selected self-attention input on the way down.
pub fn ddim_invert(
    image_latent: &RealArray,
    s: &DdimSchedule,
    denoiser: &dyn Denoiser,
    conditioning: &BlockSet,
    options: &InversionOptions,
) -> Result<Inversion> {
    let owner = options.owner_id;
    let ctx = |e: Error, t: usize| e.in_stage(Stage::Inversion, Some(t), Some(owner));
    let mut state = LatentState {
        latent: image_latent.clone(),
        timestep_index: 0,
    };
    for t in 1..=s.num_steps() {
        let at = step_ctx(s, t)?;
        let eps = denoiser
            .predict(&state.latent, &at, conditioning, &mut PlainHooks, None)
            .map_err(|e| ctx(e, t))?;
        let mut next = ddim_step(&state, &eps, s, Direction::Invert)?;
        for _ in 0..options.refine_iters {
            let eps = denoiser
                .predict(&next.latent, &at, conditioning, &mut PlainHooks, None)
                .map_err(|e| ctx(e, t))?;
            next = ddim_step(&state, &eps, s, Direction::Invert)?;
        }
        state = next;
    }
    let inverted = state.clone();
    let layers = cached_layers(denoiser, options.cache_layer_stride);
    let mut cache = FeatureCache::default();
    while state.timestep_index > 0 {
        let t = state.timestep_index;
        let at = step_ctx(s, t)?;
        let mut hooks = RecordingHooks::new(owner, &layers, &mut cache);
        let eps = denoiser
            .predict(&state.latent, &at, conditioning, &mut hooks, None)
            .map_err(|e| ctx(e, t))?;
        state = ddim_step(&state, &eps, s, Direction::Denoise)?;
    }
    Ok(Inversion {
        inverted,
        cache,
        reconstruction: state.latent,
    })
}

/// Runs the deterministic sampler from `state` down to index 0.
pub fn ddim_sample(
    state: &LatentState,
    s: &DdimSchedule,
    denoiser: &dyn Denoiser,
    conditioning: &BlockSet,
    hooks: &mut dyn AttentionHooks,
) -> Result<LatentState> {
    let mut state = state.clone();
    while state.timestep_index > 0 {
        let at = step_ctx(s, state.timestep_index)?;
        let eps = denoiser.predict(&state.latent, &at, conditioning, hooks, None)?;
        state = ddim_step(&state, &eps, s, Direction::Denoise)?;
    }
    Ok(state)
}

/// Keeps the prediction inside `fg_mask` and substitutes the forward-noised
/// background everywhere else, per channel.
pub fn repaint_blend(
    pred: &LatentState,
    background_x0: &RealArray,
    fg_mask: &SpatialMask,
    noise: &RealArray,
    s: &DdimSchedule,
) -> Result<LatentState> {
    let &[c, h, w] = pred.latent.shape() else {
        return Err(Error::shape("repaint latent", pred.latent.shape(), &[0, 0, 0]));
    };
    if fg_mask.grid() != (h, w) {
        return Err(Error::shape("repaint mask", fg_mask.values().shape(), &[h, w]));
    }
    if background_x0.shape() != pred.latent.shape() {
        return Err(Error::shape("repaint background", background_x0.shape(), pred.latent.shape()));
    }
    let bg = forward_noise(background_x0, pred.timestep_index, noise, s)?;
    let m = fg_mask.values().data();
    let out = (0..c * h * w)
        .map(|i| {
            if m[i % (h * w)] == 1.0 {
                pred.latent.data()[i]
            } else {
                bg.data()[i]
            }
        })
        .collect();
    Ok(LatentState {
        latent: RealArray::new(pred.latent.shape(), out)?,
        timestep_index: pred.timestep_index,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdReference {
    /// `[3, H, W]` pixels in `[0, 1]`.
    pub image: RealArray,
    pub local_prompt: String,
    pub bbox: BBox,
    pub identity_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthControl {
    pub enabled: bool,
    pub strength: f64,
}

impl Default for DepthControl {
    fn default() -> Self {
        Self {
            enabled: false,
            strength: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    pub image: RealArray,
    /// Latent-resolution mask of the region the model may repaint.
    pub foreground_mask: SpatialMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub global_prompt: String,
    pub ids: Vec<IdReference>,
    pub seed: u64,
    pub steps: usize,
    pub guidance_scale: f64,
    pub depth_control: DepthControl,
    pub background: Option<Background>,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::validation("request needs at least one identity"));
        }
        if self.steps == 0 {
            return Err(Error::validation("steps must be at least 1"));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::validation("guidance scale must be finite"));
        }
        if !self.depth_control.strength.is_finite() {
            return Err(Error::validation("depth strength must be finite"));
        }
        let mut seen = BTreeSet::new();
        for id in &self.ids {
            id.bbox.validate()?;
            if !seen.insert(id.identity_index) {
                return Err(Error::validation(format!("identity index {} repeated", id.identity_index)));
            }
        }
        Ok(())
    }

    /// Global prompt followed by every non-empty local prompt, `"; "`-joined.
    pub fn combined_prompt(&self) -> String {
        let mut parts = vec![self.global_prompt.as_str()];
        parts.extend(self.ids.iter().map(|i| i.local_prompt.as_str()).filter(|p| !p.is_empty()));
        parts.join("; ")
    }

    pub fn regions(&self) -> Vec<IdentityRegion> {
        self.ids
            .iter()
            .map(|i| IdentityRegion {
                identity: i.identity_index,
                bbox: i.bbox,
            })
            .collect()
    }
}

/// Generates an initial image from the combined prompt and returns its depth
/// map resampled to `(h, w)` and min-max normalized to `[0, 1]`. A constant
/// depth map normalizes to all zeros.
pub fn prepare_depth_control(
    req: &GenerationRequest,
    initial_image_gen: &dyn InitialImageGenerator,
    depth_estimator: &dyn DepthEstimator,
    h: usize,
    w: usize,
) -> Result<RealArray> {
    let (depth, _) = depth_with_initial_image(req, initial_image_gen, depth_estimator, h, w)?;
    Ok(depth)
}

fn depth_with_initial_image(
    req: &GenerationRequest,
    initial_image_gen: &dyn InitialImageGenerator,
    depth_estimator: &dyn DepthEstimator,
    h: usize,
    w: usize,
) -> Result<(RealArray, RealArray)> {
    if !req.depth_control.enabled {
        return Err(Error::config("depth control is disabled for this request"));
    }
    let image = initial_image_gen
        .generate(&req.combined_prompt(), req.seed)
        .map_err(|e| e.in_stage(Stage::InitialImage, None, None))?;
    let raw = depth_estimator
        .estimate(&image)
        .map_err(|e| e.in_stage(Stage::Depth, None, None))?;
    let raw = match *raw.shape() {
        [_, _] => raw,
        [1, a, b] => raw.reshape(&[a, b])?,
        _ => {
            return Err(Error::adapter(Stage::Depth, format!("depth map has shape {:?}", raw.shape())));
        }
    };
    let resized = resize_area(&raw, h, w)?;
    let (lo, hi) = (resized.min_value(), resized.max_value());
    let depth = if hi > lo {
        resized.map(|v| (v - lo) / (hi - lo))?
    } else {
        RealArray::zeros(&[h, w])
    };
    Ok((depth, image))
}

#[derive(Debug, Clone, PartialEq)]
pub enum FusionPolicy {
    Append,
    /// Replace the text tokens at these positions with identity rows.
    Replace(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InversionConditioning {
    Null,
    LocalPrompt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub inversion_conditioning: InversionConditioning,
    pub inversion_refine_iters: usize,
    /// Cache every `k`-th self-attention layer; 1 caches all of them.
    pub cache_layer_stride: usize,
    pub fusion: FusionPolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            inversion_conditioning: InversionConditioning::Null,
            inversion_refine_iters: 5,
            cache_layer_stride: 1,
            fusion: FusionPolicy::Append,
        }
    }
}

/// State after one completed denoising step.
#[derive(Debug)]
pub struct StepRecord<'a> {
    pub step: usize,
    pub state: &'a LatentState,
    /// Noise drawn for the background at this step, if repainting.
    pub noise: Option<&'a RealArray>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput {
    /// Final latent before decoding.
    pub latent: LatentState,
    pub image: RealArray,
    pub cache_entries: usize,
    /// Regions actually used (after optional realignment).
    pub regions: Vec<IdentityRegion>,
}

/// Moves request boxes onto detections from the initial image when the
/// detector finds exactly one person per identity; both sides are paired in
/// left-to-right order.
pub fn realign_regions(regions: &[IdentityRegion], detections: &[BBox]) -> Vec<IdentityRegion> {
    if detections.len() != regions.len() {
        return regions.to_vec();
    }
    let mut by_x: Vec<usize> = (0..regions.len()).collect();
    by_x.sort_by(|&a, &b| regions[a].bbox.center().0.total_cmp(&regions[b].bbox.center().0));
    let mut det = detections.to_vec();
    det.sort_by(|a, b| a.center().0.total_cmp(&b.center().0));
    let mut out = regions.to_vec();
    for (slot, d) in by_x.into_iter().zip(det) {
        out[slot].bbox = d;
    }
    out
}

pub struct Pipeline<'a> {
    backends: GenerationBackends<'a>,
    config: PipelineConfig,
    realigner: Option<&'a dyn PersonDetector>,
}

impl<'a> Pipeline<'a> {
    pub fn new(backends: GenerationBackends<'a>, config: PipelineConfig) -> Self {
        Self {
            backends,
            config,
            realigner: None,
        }
    }

    /// Re-detects person boxes on the depth-control initial image.
    pub fn with_realigner(mut self, detector: &'a dyn PersonDetector) -> Self {
        self.realigner = Some(detector);
        self
    }

    pub fn generate(&self, req: &GenerationRequest) -> Result<RealArray> {
        Ok(self.run(req, &mut |_| {})?.image)
    }

    pub fn run(&self, req: &GenerationRequest, observer: &mut dyn FnMut(&StepRecord<'_>)) -> Result<GenerationOutput> {
        req.validate()?;
        let b = &self.backends;
        let denoiser = b.denoiser;
        let [c, h, w] = denoiser.latent_shape();
        let dim = denoiser.model_dim();
        let s = DdimSchedule::scaled_linear(req.steps)?;

        // Prompts and identities.
        let global = b
            .text_encoder
            .encode_text(&req.global_prompt)
            .map_err(|e| e.in_stage(Stage::TextEncoding, None, None))?;
        let mut locals = Vec::with_capacity(req.ids.len());
        for id in &req.ids {
            let ident = Some(id.identity_index);
            let emb = b
                .id_encoder
                .encode_id(&id.image)
                .map_err(|e| e.in_stage(Stage::IdEncoding, None, ident))?;
            let tokens = if id.local_prompt.is_empty() {
                emb
            } else {
                let text = b
                    .text_encoder
                    .encode_text(&id.local_prompt)
                    .map_err(|e| e.in_stage(Stage::TextEncoding, None, ident))?;
                match &self.config.fusion {
                    FusionPolicy::Append => fuse_id_embedding(&text, &emb, &[])?,
                    FusionPolicy::Replace(pos) => fuse_id_embedding(&text, &emb, pos)?,
                }
            };
            locals.push(tokens);
        }

        // Depth guidance, possibly realigning boxes on the initial image.
        let mut regions = req.regions();
        let depth = if req.depth_control.enabled {
            let gen = b
                .initial_image_generator
                .ok_or_else(|| Error::config("depth control needs an initial-image generator"))?;
            let est = b
                .depth_estimator
                .ok_or_else(|| Error::config("depth control needs a depth estimator"))?;
            if b.spatial_control.is_none() {
                return Err(Error::config("depth control needs a spatial-control adapter"));
            }
            let [_, ih, iw] = b.image_codec.image_shape();
            let (depth, initial) = depth_with_initial_image(req, gen, est, ih, iw)?;
            if let Some(det) = self.realigner {
                let found = det
                    .detect(&initial)
                    .map_err(|e| e.in_stage(Stage::Detection, None, None))?;
                regions = realign_regions(&regions, &found);
            }
            Some(depth)
        } else {
            None
        };

        let base_masks = regions
            .iter()
            .map(|r| rasterize_mask(&r.bbox, h, w))
            .collect::<Result<Vec<_>>>()?;
        let mut blocks = vec![EmbeddingBlock::global(global)];
        for ((id, tokens), mask) in req.ids.iter().zip(locals.iter()).zip(base_masks) {
            blocks.push(EmbeddingBlock::local(id.identity_index, tokens.clone(), mask));
        }
        let cond = BlockSet::new(blocks);
        let null = null_conditioning(dim);

        // Reference inversion and feature caching.
        let mut cache = FeatureCache::default();
        for (id, tokens) in req.ids.iter().zip(&locals) {
            let ident = Some(id.identity_index);
            let latent = b
                .image_codec
                .encode(&id.image)
                .map_err(|e| e.in_stage(Stage::ImageEncoding, None, ident))?;
            let inv_cond = match self.config.inversion_conditioning {
                InversionConditioning::Null => null.clone(),
                InversionConditioning::LocalPrompt => BlockSet::new(vec![EmbeddingBlock::global(tokens.clone())]),
            };
            let inv = ddim_invert(
                &latent,
                &s,
                denoiser,
                &inv_cond,
                &InversionOptions {
                    owner_id: id.identity_index,
                    refine_iters: self.config.inversion_refine_iters,
                    cache_layer_stride: self.config.cache_layer_stride,
                },
            )?;
            cache.merge(inv.cache)?;
        }

        let background = match &req.background {
            Some(bg) => {
                if bg.foreground_mask.grid() != (h, w) {
                    return Err(Error::shape("foreground mask", bg.foreground_mask.values().shape(), &[h, w]));
                }
                let x0 = b
                    .image_codec
                    .encode(&bg.image)
                    .map_err(|e| e.in_stage(Stage::ImageEncoding, None, None))?;
                Some((x0, &bg.foreground_mask))
            }
            None => None,
        };

        let grids: BTreeSet<(usize, usize)> = denoiser.attention_sites().iter().map(|s| s.grid).collect();
        let mut hooks = RegionHooks::new(&cache, &regions).with_grids(grids)?;
        let mut rng = seeded(req.seed);
        let mut state = LatentState {
            latent: RealArray::new(&[c, h, w], normals(&mut rng, c * h * w))?,
            timestep_index: s.num_steps(),
        };
        let guided = req.guidance_scale != 1.0;
        let mut step = 0;
        while state.timestep_index > 0 {
            let t = state.timestep_index;
            let at = step_ctx(&s, t)?;
            let control = match (&depth, b.spatial_control) {
                (Some(d), Some(sc)) => Some(
                    sc.residuals(&state.latent, &at, d)
                        .map_err(|e| e.in_stage(Stage::SpatialControl, Some(step), None))?
                        .iter()
                        .map(|r| r.scale(req.depth_control.strength))
                        .collect::<Result<Vec<_>>>()?,
                ),
                _ => None,
            };
            let denoise_err = |e: Error| e.in_stage(Stage::Denoising, Some(step), None);
            let eps_c = denoiser
                .predict(&state.latent, &at, &cond, &mut hooks, control.as_deref())
                .map_err(denoise_err)?;
            let eps = if guided {
                let eps_u = denoiser
                    .predict(&state.latent, &at, &null, &mut hooks, control.as_deref())
                    .map_err(denoise_err)?;
                eps_u.zip_map(&eps_c, |u, c| u + req.guidance_scale * (c - u))?
            } else {
                eps_c
            };
            state = ddim_step(&state, &eps, &s, Direction::Denoise)?;
            let noise = match &background {
                Some((x0, mask)) => {
                    let n = RealArray::new(&[c, h, w], normals(&mut rng, c * h * w))?;
                    state = repaint_blend(&state, x0, mask, &n, &s)?;
                    Some(n)
                }
                None => None,
            };
            observer(&StepRecord {
                step,
                state: &state,
                noise: noise.as_ref(),
            });
            step += 1;
        }

        let image = b
            .image_codec
            .decode(&state.latent)
            .map_err(|e| e.in_stage(Stage::Decoding, None, None))?;
        Ok(GenerationOutput {
            latent: state,
            image,
            cache_entries: cache.len(),
            regions,
        })
    }
}

/// Plain cross-attention over a block set's concatenated tokens.
pub fn unmasked_cross_attention(x: &RealArray, cond: &BlockSet, p: &ProjectionSet) -> Result<RealArray> {
    plain_attention(x, &cond.concatenated()?, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{toy_bundle, ToyDenoiser, ToyInitialImageGenerator, ToyTextEncoder};
    use crate::backend::{DepthEstimator, TextEncoder};

    fn latent(seed: u64) -> RealArray {
        let mut rng = seeded(seed);
        RealArray::new(&[4, 8, 8], normals(&mut rng, 256)).unwrap()
    }

    #[test]
    fn zero_latent_is_a_fixed_point() {
        let d = ToyDenoiser::default().without_offsets();
        let s = DdimSchedule::scaled_linear(5).unwrap();
        let inv = ddim_invert(&RealArray::zeros(&[4, 8, 8]), &s, &d, &null_conditioning(4), &InversionOptions::default())
            .unwrap();
        assert!(inv.inverted.latent.data().iter().all(|&v| v == 0.0));
        assert!(inv.cache.entries().all(|e| e.features.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn cache_counts_layers_times_steps() {
        let d = ToyDenoiser::default();
        for steps in [1, 3, 6] {
            let s = DdimSchedule::scaled_linear(steps).unwrap();
            let inv = ddim_invert(&latent(1), &s, &d, &null_conditioning(4), &InversionOptions::default()).unwrap();
            assert_eq!(inv.cache.len(), 2 * steps);
            let strided = ddim_invert(
                &latent(1),
                &s,
                &d,
                &null_conditioning(4),
                &InversionOptions {
                    cache_layer_stride: 2,
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!(strided.cache.len(), steps);
        }
    }

    #[test]
    fn inversion_replay_reconstructs_input() {
        let d = ToyDenoiser::default();
        let s = DdimSchedule::scaled_linear(10).unwrap();
        let x0 = latent(7).scale(0.5).unwrap();
        let mut last = f64::INFINITY;
        for refine in [0, 1, 2, 3, 5] {
            let opts = InversionOptions {
                refine_iters: refine,
                ..Default::default()
            };
            let inv = ddim_invert(&x0, &s, &d, &null_conditioning(4), &opts).unwrap();
            let err = inv.reconstruction.max_abs_diff(&x0);
            assert!(err < last, "refinement should tighten the roundtrip");
            last = err;
        }
        assert!(last <= 1e-3, "err={last}");
    }

    #[test]
    fn duplicate_cache_entries_rejected() {
        let mut c = FeatureCache::default();
        let e = FeatureCacheEntry {
            layer_id: LayerId(0),
            timestep_index: 1,
            features: RealArray::zeros(&[1, 1]),
            owner_id: 0,
        };
        c.insert(e.clone()).unwrap();
        assert!(c.insert(e.clone()).is_err());
        c.insert(FeatureCacheEntry { owner_id: 1, ..e }).unwrap();
        assert_eq!(c.owners().len(), 2);
    }

    #[test]
    fn repaint_cases() {
        let s = DdimSchedule::scaled_linear(5).unwrap();
        let pred = LatentState {
            latent: latent(1).reshape(&[4, 8, 8]).unwrap(),
            timestep_index: 2,
        };
        let bg = latent(2);
        let noise = latent(3);
        let all = repaint_blend(&pred, &bg, &SpatialMask::ones(8, 8), &noise, &s).unwrap();
        assert_eq!(all.latent, pred.latent);

        let zero_mask_box = rasterize_mask(&BBox::new(0.0, 0.0, 0.01, 0.01).unwrap(), 8, 8).unwrap();
        let at0 = LatentState {
            timestep_index: 0,
            ..pred.clone()
        };
        let out = repaint_blend(&at0, &bg, &zero_mask_box, &noise, &s).unwrap();
        for q in 1..64 {
            for ch in 0..4 {
                assert_eq!(out.latent.data()[ch * 64 + q], bg.data()[ch * 64 + q]);
            }
        }
    }

    #[test]
    fn repaint_2x2_matches_elementwise_formula() {
        let s = DdimSchedule::scaled_linear(5).unwrap();
        let mk = |v: &[f64]| RealArray::new(&[1, 2, 2], v.to_vec()).unwrap();
        let pred = LatentState {
            latent: mk(&[1.0, 2.0, 3.0, 4.0]),
            timestep_index: 3,
        };
        let bg = mk(&[-1.0, -2.0, -3.0, -4.0]);
        let noise = mk(&[0.5, 0.25, -0.5, 0.75]);
        let mask = SpatialMask::new(RealArray::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), None).unwrap();
        let out = repaint_blend(&pred, &bg, &mask, &noise, &s).unwrap();
        let a = s.alpha_bar(3).unwrap();
        for i in 0..4 {
            let m = mask.values().data()[i];
            let fwd = a.sqrt() * bg.data()[i] + (1.0 - a).sqrt() * noise.data()[i];
            let expect = m * pred.latent.data()[i] + (1.0 - m) * fwd;
            assert!((out.latent.data()[i] - expect).abs() <= 1e-9);
        }
        let wrong = SpatialMask::ones(3, 3);
        assert!(repaint_blend(&pred, &bg, &wrong, &noise, &s).is_err());
    }

    fn request(ids: usize) -> GenerationRequest {
        let boxes = [
            BBox::new(0.0, 0.0, 0.5, 1.0).unwrap(),
            BBox::new(0.5, 0.0, 1.0, 1.0).unwrap(),
            BBox::new(0.25, 0.0, 0.75, 0.5).unwrap(),
        ];
        GenerationRequest {
            global_prompt: "a park".into(),
            ids: (0..ids)
                .map(|i| IdReference {
                    image: ToyInitialImageGenerator.generate(&format!("person {i}"), i as u64).unwrap(),
                    local_prompt: format!("person {i} waving"),
                    bbox: boxes[i],
                    identity_index: i,
                })
                .collect(),
            seed: 42,
            steps: 4,
            guidance_scale: 1.0,
            depth_control: DepthControl::default(),
            background: None,
        }
    }

    #[test]
    fn combined_prompt_join_rule() {
        let mut r = request(2);
        r.ids[0].local_prompt = "man waving".into();
        r.ids[1].local_prompt = "woman reading".into();
        assert_eq!(r.combined_prompt(), "a park; man waving; woman reading");
    }

    struct ConstImage;
    impl InitialImageGenerator for ConstImage {
        fn generate(&self, _: &str, _: u64) -> Result<RealArray> {
            Ok(RealArray::filled(&[3, 16, 16], 0.3))
        }
    }

    #[test]
    fn depth_normalization() {
        let mut r = request(1);
        r.depth_control.enabled = true;
        let est = crate::toy::ToyDepthEstimator;
        let flat = prepare_depth_control(&r, &ConstImage, &est, 8, 8).unwrap();
        let first = flat.data()[0];
        assert!(flat.data().iter().all(|&v| v == first));
        let d = prepare_depth_control(&r, &ToyInitialImageGenerator, &est, 64, 64).unwrap();
        assert_eq!(d.shape(), &[64, 64]);
        assert_eq!(d.min_value(), 0.0);
        assert_eq!(d.max_value(), 1.0);
        r.depth_control.enabled = false;
        assert!(prepare_depth_control(&r, &ToyInitialImageGenerator, &est, 8, 8).is_err());
    }

    struct FailingDepth;
    impl DepthEstimator for FailingDepth {
        fn estimate(&self, _: &RealArray) -> Result<RealArray> {
            Err(Error::adapter(Stage::Depth, "model offline"))
        }
    }

    #[test]
    fn depth_failures_name_their_stage() {
        let mut r = request(1);
        r.depth_control.enabled = true;
        match prepare_depth_control(&r, &ToyInitialImageGenerator, &FailingDepth, 8, 8) {
            Err(Error::Adapter { stage, .. }) => assert_eq!(stage, Stage::Depth),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn generation_is_deterministic_and_handles_three_ids() {
        let bundle = toy_bundle();
        let p = Pipeline::new(bundle.generation().unwrap(), PipelineConfig::default());
        let a = p.generate(&request(2)).unwrap();
        let b = p.generate(&request(2)).unwrap();
        assert_eq!(a, b);
        let out = p.run(&request(3), &mut |_| {}).unwrap();
        assert_eq!(out.cache_entries, 3 * 2 * 4);
        assert_eq!(out.image.shape(), &[3, 64, 64]);
    }

    #[test]
    fn depth_guided_generation_runs() {
        let bundle = toy_bundle();
        let p = Pipeline::new(bundle.generation().unwrap(), PipelineConfig::default());
        let mut r = request(2);
        let plain = p.generate(&r).unwrap();
        r.depth_control = DepthControl { enabled: true, strength: 1.0 };
        let guided = p.generate(&r).unwrap();
        assert_ne!(plain, guided);
        r.guidance_scale = 3.0;
        assert!(p.generate(&r).is_ok());
    }

    #[test]
    fn request_validation() {
        let bundle = toy_bundle();
        let p = Pipeline::new(bundle.generation().unwrap(), PipelineConfig::default());
        let mut r = request(1);
        r.ids.clear();
        assert!(matches!(p.generate(&r), Err(Error::Validation(_))));
        let mut r = request(2);
        r.ids[1].identity_index = 0;
        assert!(p.generate(&r).is_err());
        let mut r = request(1);
        r.steps = 0;
        assert!(p.generate(&r).is_err());
    }

    #[test]
    fn realignment_pairs_left_to_right() {
        let regions = [
            IdentityRegion { identity: 0, bbox: BBox::new(0.6, 0.0, 0.9, 1.0).unwrap() },
            IdentityRegion { identity: 1, bbox: BBox::new(0.1, 0.0, 0.4, 1.0).unwrap() },
        ];
        let det = [BBox::new(0.55, 0.1, 0.95, 0.9).unwrap(), BBox::new(0.0, 0.1, 0.45, 0.9).unwrap()];
        let out = realign_regions(&regions, &det);
        assert_eq!(out[0].bbox, det[0]);
        assert_eq!(out[1].bbox, det[1]);
        assert_eq!(realign_regions(&regions, &det[..1]), regions.to_vec());
    }

    #[test]
    fn region_hooks_cache_masks_per_grid() {
        let cache = FeatureCache::default();
        let regions = [IdentityRegion { identity: 0, bbox: BBox::full() }];
        let hooks = RegionHooks::new(&cache, &regions).with_grids([(8, 8), (4, 4), (8, 8)]).unwrap();
        assert_eq!(hooks.cached_resolutions(), 2);
        let _ = ToyTextEncoder.encode_text("x").unwrap();
    }
}
