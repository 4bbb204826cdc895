//! Deterministic desk-scale backend.
//!
//! Every adapter here is a fixed function of its inputs and a seed, needs no
//! weights, disk or network, and is safe to call concurrently. The denoiser
//! works on `4×8×8` latents (64 tokens of width 4) through two blocks of
//! hooked self-attention, hooked cross-attention and a seeded linear map; the
//! codec maps `3×64×64` images to those latents.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::array::RealArray;
use crate::attention::{BlockSet, ProjectionSet};
use crate::backend::{
    AttentionHooks, AttentionSite, BackendBundle, DepthEstimator, Denoiser, FaceEmbedder, IdEncoder,
    ImageCodec, ImageEmbedder, InitialImageGenerator, LayerId, PersonDetector, PreferenceScorer,
    SiteKind, SpatialControl, StepContext, TextEncoder, TextImageScorer,
};
use crate::error::{Error, Result};
use crate::imageops::{crop, resize_area, resize_nearest};
use crate::mask::BBox;
use crate::rng::{fnv1a, seeded, splitmix64, uniforms};

pub const TOY_DIM: usize = 4;
pub const TOY_GRID: usize = 8;
pub const TOY_IMAGE: usize = 64;
/// Rows produced by [`ToyIdEncoder`].
pub const TOY_ID_ROWS: usize = 2;
const MAX_TEXT_TOKENS: usize = 77;

/// Uniform entries rescaled to Frobenius norm 0.9, which bounds the spectral
/// norm below 1.
fn contraction(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> RealArray {
    let raw = uniforms(rng, rows * cols);
    let fro = libm::sqrt(raw.iter().map(|v| v * v).sum());
    RealArray::from_parts(vec![rows, cols], raw.iter().map(|v| v * 0.9 / fro).collect())
}

fn projection(rng: &mut rand_chacha::ChaCha8Rng) -> ProjectionSet {
    ProjectionSet {
        w_q: contraction(rng, TOY_DIM, TOY_DIM),
        w_k: contraction(rng, TOY_DIM, TOY_DIM),
        w_v: contraction(rng, TOY_DIM, TOY_DIM),
        heads: 1,
    }
}

#[derive(Debug, Clone)]
struct ToyBlock {
    self_proj: ProjectionSet,
    cross_proj: ProjectionSet,
    mix: RealArray,
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    blocks: Vec<ToyBlock>,
    bias: [f64; TOY_DIM],
    time_weight: [f64; TOY_DIM],
    sites: Vec<AttentionSite>,
}

impl Default for ToyDenoiser {
    fn default() -> Self {
        Self::new(0)
    }
}

impl ToyDenoiser {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded(seed);
        let blocks = (0..2)
            .map(|_| ToyBlock {
                self_proj: projection(&mut rng),
                cross_proj: projection(&mut rng),
                mix: contraction(&mut rng, TOY_DIM, TOY_DIM),
            })
            .collect();
        let offsets = uniforms(&mut rng, 2 * TOY_DIM);
        let mut bias = [0.0; TOY_DIM];
        let mut time_weight = [0.0; TOY_DIM];
        for i in 0..TOY_DIM {
            bias[i] = 0.05 * offsets[i];
            time_weight[i] = 0.05 * offsets[TOY_DIM + i];
        }
        let mut sites = Vec::new();
        for b in 0..2u32 {
            sites.push(AttentionSite {
                layer_id: LayerId(2 * b),
                kind: SiteKind::SelfAttention,
                grid: (TOY_GRID, TOY_GRID),
            });
            sites.push(AttentionSite {
                layer_id: LayerId(2 * b + 1),
                kind: SiteKind::CrossAttention,
                grid: (TOY_GRID, TOY_GRID),
            });
        }
        Self {
            blocks,
            bias,
            time_weight,
            sites,
        }
    }

    /// Same weights with the constant and timestep offsets removed, so that a
    /// zero latent under zero conditioning predicts zero noise.
    pub fn without_offsets(mut self) -> Self {
        self.bias = [0.0; TOY_DIM];
        self.time_weight = [0.0; TOY_DIM];
        self
    }

    pub fn bias(&self) -> [f64; TOY_DIM] {
        self.bias
    }
}

/// `[C, H, W]` latent → `(H·W × C)` tokens, row-major over the grid.
pub fn latent_to_tokens(latent: &RealArray) -> Result<RealArray> {
    let &[c, h, w] = latent.shape() else {
        return Err(Error::shape("latent", latent.shape(), &[0, 0, 0]));
    };
    let d = latent.data();
    let mut out = Vec::with_capacity(c * h * w);
    for q in 0..h * w {
        for ch in 0..c {
            out.push(d[ch * h * w + q]);
        }
    }
    RealArray::new(&[h * w, c], out)
}

pub fn tokens_to_latent(tokens: &RealArray, c: usize, h: usize, w: usize) -> Result<RealArray> {
    if tokens.shape() != [h * w, c] {
        return Err(Error::shape("tokens", tokens.shape(), &[h * w, c]));
    }
    let d = tokens.data();
    let mut out = vec![0.0; c * h * w];
    for q in 0..h * w {
        for ch in 0..c {
            out[ch * h * w + q] = d[q * c + ch];
        }
    }
    RealArray::new(&[c, h, w], out)
}

impl Denoiser for ToyDenoiser {
    fn latent_shape(&self) -> [usize; 3] {
        [TOY_DIM, TOY_GRID, TOY_GRID]
    }

    fn model_dim(&self) -> usize {
        TOY_DIM
    }

    fn attention_sites(&self) -> &[AttentionSite] {
        &self.sites
    }

    fn control_slots(&self) -> usize {
        self.blocks.len()
    }

    fn predict(
        &self,
        latent: &RealArray,
        step: &StepContext,
        cond: &BlockSet,
        hooks: &mut dyn AttentionHooks,
        control: Option<&[RealArray]>,
    ) -> Result<RealArray> {
        if latent.shape() != self.latent_shape() {
            return Err(Error::shape("toy denoiser latent", latent.shape(), &self.latent_shape()));
        }
        if let Some(c) = control {
            if c.len() != self.blocks.len() {
                return Err(Error::config("one control residual per toy block required"));
            }
        }
        let mut h = latent_to_tokens(latent)?;
        for (b, block) in self.blocks.iter().enumerate() {
            let sa = hooks.self_attention(&self.sites[2 * b], step, &h, &block.self_proj)?;
            h = h.add(&sa)?;
            let ca = hooks.cross_attention(&self.sites[2 * b + 1], step, &h, cond, &block.cross_proj)?;
            h = h.add(&ca)?;
            h = h.matmul(&block.mix)?;
            if let Some(c) = control {
                h = h.add(&c[b])?;
            }
        }
        let t = step.timestep as f64 / 1000.0;
        let mut data = h.into_data();
        for row in data.chunks_mut(TOY_DIM) {
            for (i, v) in row.iter_mut().enumerate() {
                *v += self.bias[i] + t * self.time_weight[i];
            }
        }
        tokens_to_latent(&RealArray::new(&[TOY_GRID * TOY_GRID, TOY_DIM], data)?, TOY_DIM, TOY_GRID, TOY_GRID)
    }

    fn concurrency_safe(&self) -> bool {
        true
    }
}

/// One hashed row of width [`TOY_DIM`] per character.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyTextEncoder;

impl TextEncoder for ToyTextEncoder {
    fn encode_text(&self, text: &str) -> Result<RealArray> {
        if text.is_empty() {
            return Err(Error::validation("cannot encode empty text"));
        }
        let mut data = Vec::new();
        let mut buf = [0u8; 4];
        for (pos, ch) in text.chars().take(MAX_TEXT_TOKENS).enumerate() {
            let key = fnv1a(ch.encode_utf8(&mut buf).as_bytes()) ^ splitmix64(pos as u64);
            let mut rng = seeded(splitmix64(key));
            data.extend(uniforms(&mut rng, TOY_DIM));
        }
        let rows = data.len() / TOY_DIM;
        RealArray::new(&[rows, TOY_DIM], data)
    }
}

fn channel_stats(image: &RealArray) -> Result<Vec<f64>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("image", image.shape(), &[3, 0, 0]));
    };
    let n = (h * w) as f64;
    let mut out = Vec::with_capacity(2 * c);
    let mut stds = Vec::with_capacity(c);
    for plane in image.data().chunks(h * w) {
        let mean = plane.iter().sum::<f64>() / n;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        out.push(mean);
        stds.push(libm::sqrt(var));
    }
    out.extend(stds);
    Ok(out)
}

/// Two embedding rows from fixed random projections of per-channel mean and
/// standard deviation.
#[derive(Debug, Clone)]
pub struct ToyIdEncoder {
    proj: Vec<RealArray>,
}

impl Default for ToyIdEncoder {
    fn default() -> Self {
        let mut rng = seeded(1);
        Self {
            proj: (0..TOY_ID_ROWS)
                .map(|_| RealArray::from_parts(vec![6, TOY_DIM], uniforms(&mut rng, 6 * TOY_DIM)))
                .collect(),
        }
    }
}

impl IdEncoder for ToyIdEncoder {
    fn encode_id(&self, image: &RealArray) -> Result<RealArray> {
        if image.ndim() != 3 || image.shape()[0] != 3 {
            return Err(Error::shape("toy ID encoder input", image.shape(), &[3, 0, 0]));
        }
        let f = RealArray::new(&[1, 6], channel_stats(image)?)?;
        let rows = self.proj.iter().map(|p| f.matmul(p)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&RealArray> = rows.iter().collect();
        RealArray::vstack(&refs)
    }
}

/// `3×64×64` images in `[0,1]` ↔ `4×8×8` latents: 8×8 block means centered to
/// `[-1,1]` for the color channels plus their mean as a fourth channel.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyImageCodec;

impl ImageCodec for ToyImageCodec {
    fn image_shape(&self) -> [usize; 3] {
        [3, TOY_IMAGE, TOY_IMAGE]
    }

    fn encode(&self, image: &RealArray) -> Result<RealArray> {
        if image.ndim() != 3 || image.shape()[0] != 3 {
            return Err(Error::shape("toy codec input", image.shape(), &self.image_shape()));
        }
        let pooled = resize_area(image, TOY_GRID, TOY_GRID)?;
        let n = TOY_GRID * TOY_GRID;
        let mut out = Vec::with_capacity(4 * n);
        out.extend(pooled.data().iter().map(|v| 2.0 * v - 1.0));
        for q in 0..n {
            out.push((out[q] + out[n + q] + out[2 * n + q]) / 3.0);
        }
        RealArray::new(&[4, TOY_GRID, TOY_GRID], out)
    }

    fn decode(&self, latent: &RealArray) -> Result<RealArray> {
        if latent.shape() != [4, TOY_GRID, TOY_GRID] {
            return Err(Error::shape("toy codec latent", latent.shape(), &[4, TOY_GRID, TOY_GRID]));
        }
        let n = TOY_GRID * TOY_GRID;
        let rgb: Vec<f64> = latent.data()[..3 * n]
            .iter()
            .map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
            .collect();
        resize_nearest(&RealArray::new(&[3, TOY_GRID, TOY_GRID], rgb)?, TOY_IMAGE, TOY_IMAGE)
    }
}

/// Depth is the per-pixel channel mean.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyDepthEstimator;

impl DepthEstimator for ToyDepthEstimator {
    fn estimate(&self, image: &RealArray) -> Result<RealArray> {
        let &[c, h, w] = image.shape() else {
            return Err(Error::shape("depth input", image.shape(), &[3, 0, 0]));
        };
        let d = image.data();
        let out = (0..h * w)
            .map(|q| (0..c).map(|p| d[p * h * w + q]).sum::<f64>() / c as f64)
            .collect();
        RealArray::new(&[h, w], out)
    }
}

/// Residual at each token is the pooled depth there times a fixed per-block
/// direction.
#[derive(Debug, Clone)]
pub struct ToySpatialControl {
    directions: Vec<[f64; TOY_DIM]>,
}

impl Default for ToySpatialControl {
    fn default() -> Self {
        let mut rng = seeded(3);
        let directions = (0..2)
            .map(|_| {
                let u = uniforms(&mut rng, TOY_DIM);
                [0.1 * u[0], 0.1 * u[1], 0.1 * u[2], 0.1 * u[3]]
            })
            .collect();
        Self { directions }
    }
}

impl SpatialControl for ToySpatialControl {
    fn residuals(&self, latent: &RealArray, _: &StepContext, depth: &RealArray) -> Result<Vec<RealArray>> {
        let &[_, h, w] = latent.shape() else {
            return Err(Error::shape("control latent", latent.shape(), &[0, 0, 0]));
        };
        let pooled = resize_area(depth, h, w)?;
        self.directions
            .iter()
            .map(|dir| {
                let data = pooled.data().iter().flat_map(|d| dir.iter().map(move |v| d * v)).collect();
                RealArray::new(&[h * w, TOY_DIM], data)
            })
            .collect()
    }
}

/// Blocky random image keyed by prompt and seed.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyInitialImageGenerator;

impl InitialImageGenerator for ToyInitialImageGenerator {
    fn generate(&self, prompt: &str, seed: u64) -> Result<RealArray> {
        let mut rng = seeded(fnv1a(prompt.as_bytes()) ^ splitmix64(seed));
        let cells: Vec<f64> = uniforms(&mut rng, 3 * TOY_GRID * TOY_GRID)
            .into_iter()
            .map(|v| (v + 1.0) / 2.0)
            .collect();
        resize_nearest(&RealArray::new(&[3, TOY_GRID, TOY_GRID], cells)?, TOY_IMAGE, TOY_IMAGE)
    }
}

/// Reports the left and right halves of the image as two people.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyPersonDetector;

impl PersonDetector for ToyPersonDetector {
    fn detect(&self, _image: &RealArray) -> Result<Vec<BBox>> {
        Ok(vec![BBox::new(0.0, 0.0, 0.5, 1.0)?, BBox::new(0.5, 0.0, 1.0, 1.0)?])
    }

    fn concurrency_safe(&self) -> bool {
        true
    }
}

/// Centered 4×4 block means per channel.
fn grid_features(image: &RealArray) -> Result<Vec<f64>> {
    Ok(resize_area(image, 4, 4)?.data().iter().map(|v| v - 0.5).collect())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ToyImageEmbedder;

impl ImageEmbedder for ToyImageEmbedder {
    fn embed_image(&self, image: &RealArray) -> Result<Vec<f64>> {
        grid_features(image)
    }
}

fn text_direction(text: &str) -> Result<Vec<f64>> {
    let t = ToyTextEncoder.encode_text(text)?;
    let rows = t.rows() as f64;
    Ok((0..TOY_DIM)
        .map(|c| (0..t.rows()).map(|r| t.row(r)[c]).sum::<f64>() / rows)
        .collect())
}

fn image_direction(image: &RealArray) -> Result<Vec<f64>> {
    let stats = channel_stats(image)?;
    let c = stats.len() / 2;
    let mut v: Vec<f64> = stats[..c].iter().map(|m| m - 0.5).collect();
    v.push(stats[c..].iter().sum::<f64>() / c as f64);
    v.resize(TOY_DIM, 0.0);
    Ok(v)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ToyTextImageScorer;

impl TextImageScorer for ToyTextImageScorer {
    fn similarity(&self, image: &RealArray, text: &str) -> Result<f64> {
        Ok(crate::array::cosine(&text_direction(text)?, &image_direction(image)?))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ToyPreferenceScorer;

impl PreferenceScorer for ToyPreferenceScorer {
    fn score(&self, image: &RealArray, prompt: &str) -> Result<f64> {
        Ok((1.0 + ToyTextImageScorer.similarity(image, prompt)?) / 4.0)
    }
}

/// Embeds the upper third of a crop; flat regions have no face.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyFaceEmbedder;

impl FaceEmbedder for ToyFaceEmbedder {
    fn embed_face(&self, image: &RealArray) -> Result<Option<Vec<f64>>> {
        let top = crop(image, &BBox::new(0.0, 0.0, 1.0, 1.0 / 3.0)?)?;
        let spread = top.max_value() - top.min_value();
        if spread < 1e-3 {
            return Ok(None);
        }
        grid_features(&top).map(Some)
    }
}

/// Bundle with every toy adapter installed.
pub fn toy_bundle() -> BackendBundle {
    BackendBundle {
        name: String::from("toy"),
        denoiser: Some(Box::new(ToyDenoiser::default())),
        text_encoder: Some(Box::new(ToyTextEncoder)),
        id_encoder: Some(Box::new(ToyIdEncoder::default())),
        image_codec: Some(Box::new(ToyImageCodec)),
        depth_estimator: Some(Box::new(ToyDepthEstimator)),
        spatial_control: Some(Box::new(ToySpatialControl::default())),
        initial_image_generator: Some(Box::new(ToyInitialImageGenerator)),
        person_detector: Some(Box::new(ToyPersonDetector)),
        image_embedder: Some(Box::new(ToyImageEmbedder)),
        text_image_scorer: Some(Box::new(ToyTextImageScorer)),
        preference_scorer: Some(Box::new(ToyPreferenceScorer)),
        face_embedder: Some(Box::new(ToyFaceEmbedder)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{EmbeddingBlock, Gate};
    use crate::backend::PlainHooks;
    use crate::pipeline::RegionHooks;
    use crate::mask::SpatialMask;

    fn step(t: usize) -> StepContext {
        StepContext {
            timestep_index: t,
            timestep: t * 100,
        }
    }

    fn random_latent(seed: u64) -> RealArray {
        let mut rng = seeded(seed);
        RealArray::new(&[4, 8, 8], crate::rng::normals(&mut rng, 256)).unwrap()
    }

    #[test]
    fn zero_input_predicts_bias_only() {
        let d = ToyDenoiser::default();
        let cond = BlockSet::new(vec![EmbeddingBlock::global(RealArray::zeros(&[1, 4]))]);
        let eps = d
            .predict(&RealArray::zeros(&[4, 8, 8]), &step(0), &cond, &mut PlainHooks, None)
            .unwrap();
        let bias = d.bias();
        for ch in 0..4 {
            assert!(eps.data()[ch * 64..(ch + 1) * 64].iter().all(|&v| v == bias[ch]));
        }
        let again = d
            .predict(&RealArray::zeros(&[4, 8, 8]), &step(0), &cond, &mut PlainHooks, None)
            .unwrap();
        assert_eq!(eps, again);
    }

    #[test]
    fn deterministic_predictions() {
        let d = ToyDenoiser::default();
        let cond = BlockSet::new(vec![EmbeddingBlock::global(ToyTextEncoder.encode_text("a park").unwrap())]);
        let x = random_latent(4);
        let a = d.predict(&x, &step(3), &cond, &mut PlainHooks, None).unwrap();
        let b = ToyDenoiser::default().predict(&x, &step(3), &cond, &mut PlainHooks, None).unwrap();
        assert_eq!(a, b);
        assert!(d.predict(&RealArray::zeros(&[4, 4, 4]), &step(0), &cond, &mut PlainHooks, None).is_err());
    }

    #[test]
    fn region_hooks_with_open_gates_equal_plain_hooks() {
        let d = ToyDenoiser::default();
        let enc = ToyTextEncoder;
        let cond = BlockSet::new(vec![
            EmbeddingBlock::global(enc.encode_text("a park").unwrap()),
            EmbeddingBlock::local(0, enc.encode_text("man waving").unwrap(), SpatialMask::ones(8, 8)),
            EmbeddingBlock::local(1, enc.encode_text("woman").unwrap(), SpatialMask::ones(8, 8)),
        ]);
        let x = random_latent(5);
        let plain = d.predict(&x, &step(4), &cond, &mut PlainHooks, None).unwrap();
        let empty = crate::pipeline::FeatureCache::default();
        let mut hooks = RegionHooks::new(&empty, &[]);
        let masked = d.predict(&x, &step(4), &cond, &mut hooks, None).unwrap();
        assert!(plain.max_abs_diff(&masked) <= 1e-6);
        assert!(matches!(cond.blocks[1].gate, Gate::Mask(_)));
    }

    #[test]
    fn text_encoder_contract() {
        let e = ToyTextEncoder;
        assert_eq!(e.encode_text("hello").unwrap(), e.encode_text("hello").unwrap());
        assert!(e.encode_text("").is_err());
        let corpus = ["a park", "a park.", "man waving", "woman reading", "A park", "two people"];
        for (i, a) in corpus.iter().enumerate() {
            for b in &corpus[i + 1..] {
                assert_ne!(e.encode_text(a).unwrap(), e.encode_text(b).unwrap(), "{a} vs {b}");
            }
        }
        assert_eq!(e.encode_text(&"x".repeat(200)).unwrap().rows(), 77);
    }

    #[test]
    fn id_encoder_emits_two_rows() {
        let img = ToyInitialImageGenerator.generate("someone", 1).unwrap();
        let emb = ToyIdEncoder::default().encode_id(&img).unwrap();
        assert_eq!(emb.shape(), &[TOY_ID_ROWS, TOY_DIM]);
    }

    #[test]
    fn codec_shapes() {
        let img = ToyInitialImageGenerator.generate("x", 2).unwrap();
        let lat = ToyImageCodec.encode(&img).unwrap();
        assert_eq!(lat.shape(), &[4, 8, 8]);
        let back = ToyImageCodec.decode(&lat).unwrap();
        // Blocky images survive the round trip.
        assert!(back.max_abs_diff(&img) <= 1e-12);
    }

    #[test]
    fn face_embedder_skips_flat_crops() {
        let flat = RealArray::filled(&[3, 12, 6], 0.4);
        assert_eq!(ToyFaceEmbedder.embed_face(&flat).unwrap(), None);
        let img = ToyInitialImageGenerator.generate("y", 3).unwrap();
        assert!(ToyFaceEmbedder.embed_face(&img).unwrap().is_some());
    }
}
