//! Evaluation scores for one generated image and their aggregation into a
//! report with the usual six columns.

use alloc::string::String;
use alloc::vec::Vec;

use crate::array::{cosine, RealArray};
use crate::backend::EvaluationBackends;
use crate::error::{Error, Result, Stage};
use crate::imageops::crop;
use crate::matching::{greedy_match, SimilarityMatrix};

/// Column names, in report order.
pub const COLUMNS: [&str; 6] = ["CLIP-T", "HPSv2", "Body", "Face", "Full", "Pose"];

/// One identity as seen by the evaluator.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalIdentity {
    pub reference_image: RealArray,
    pub full_description: String,
    pub posture_description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub sample_id: String,
    pub global_prompt: String,
    pub ids: Vec<EvalIdentity>,
}

/// Scores for one image, as percentages. Local scores are `None` when no
/// person was detected.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub clip_t: f64,
    pub hpsv2: f64,
    pub body: Option<f64>,
    pub full: Option<f64>,
    pub pose: Option<f64>,
    /// Sum of face cosines (×100) over pairs where both faces were found.
    pub face_sum: f64,
    pub face_pairs: usize,
    pub matched_pairs: usize,
    pub detections: usize,
}

impl ImageMetrics {
    pub fn face(&self) -> Option<f64> {
        (self.face_pairs > 0).then(|| self.face_sum / self.face_pairs as f64)
    }
}

fn pct01(c: f64) -> f64 {
    c.clamp(0.0, 1.0) * 100.0
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Detects people, greedily matches crops to references and scores the
/// matched pairs; global scores use the whole image.
pub fn evaluate_image(image: &RealArray, sample: &EvalSample, b: &EvaluationBackends<'_>) -> Result<ImageMetrics> {
    if sample.ids.is_empty() {
        return Err(Error::validation("sample has no identities"));
    }
    let stage = |s: Stage| move |e: Error| e.in_stage(s, None, None);
    let clip_t = pct01(
        b.text_image_scorer
            .similarity(image, &sample.global_prompt)
            .map_err(stage(Stage::Scoring))?,
    );
    let hpsv2 = b
        .preference_scorer
        .score(image, &sample.global_prompt)
        .map_err(stage(Stage::Scoring))?
        .clamp(0.0, 1.0)
        * 100.0;
    let boxes = b.person_detector.detect(image).map_err(stage(Stage::Detection))?;
    let mut out = ImageMetrics {
        clip_t,
        hpsv2,
        body: None,
        full: None,
        pose: None,
        face_sum: 0.0,
        face_pairs: 0,
        matched_pairs: 0,
        detections: boxes.len(),
    };
    if boxes.is_empty() {
        return Ok(out);
    }
    let crops = boxes.iter().map(|bb| crop(image, bb)).collect::<Result<Vec<_>>>()?;
    let embed = |img: &RealArray| b.image_embedder.embed_image(img).map_err(stage(Stage::Embedding));
    let crop_emb = crops.iter().map(embed).collect::<Result<Vec<_>>>()?;
    let ref_emb = sample
        .ids
        .iter()
        .map(|id| embed(&id.reference_image))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<f64>> = crop_emb
        .iter()
        .map(|c| ref_emb.iter().map(|r| cosine(c, r)).collect())
        .collect();
    let sim = SimilarityMatrix::from_rows(&rows)?;
    let matched = greedy_match(&sim);
    let (mut body, mut full, mut pose) = (Vec::new(), Vec::new(), Vec::new());
    for &(ci, ri) in &matched.pairs {
        let id = &sample.ids[ri];
        body.push(pct01(sim.get(ci, ri)));
        let score = |text: &str| b.text_image_scorer.similarity(&crops[ci], text).map_err(stage(Stage::Scoring));
        full.push(pct01(score(&id.full_description)?));
        pose.push(pct01(score(&id.posture_description)?));
        let faces = (
            b.face_embedder.embed_face(&crops[ci]).map_err(stage(Stage::Embedding))?,
            b.face_embedder
                .embed_face(&id.reference_image)
                .map_err(stage(Stage::Embedding))?,
        );
        if let (Some(f), Some(r)) = faces {
            out.face_sum += cosine(&f, &r) * 100.0;
            out.face_pairs += 1;
        }
    }
    out.matched_pairs = matched.pairs.len();
    out.body = mean(&body);
    out.full = mean(&full);
    out.pose = mean(&pose);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub clip_t_global: f64,
    pub hpsv2: f64,
    pub body: Option<f64>,
    /// Mean over matched face pairs.
    pub face: Option<f64>,
    pub full_local: Option<f64>,
    pub pose: Option<f64>,
    pub sample_count: usize,
    pub images_per_sample: usize,
    pub image_count: usize,
    /// Images with at least one detected person.
    pub covered_images: usize,
    /// Images contributing at least one face pair.
    pub face_images: usize,
    pub face_pairs: usize,
}

impl MetricReport {
    /// Values in [`COLUMNS`] order.
    pub fn columns(&self) -> [Option<f64>; 6] {
        [
            Some(self.clip_t_global),
            Some(self.hpsv2),
            self.body,
            self.face,
            self.full_local,
            self.pose,
        ]
    }

    pub fn coverage(&self) -> f64 {
        if self.image_count == 0 {
            0.0
        } else {
            self.covered_images as f64 / self.image_count as f64
        }
    }
}

/// Arithmetic mean over images; each local metric skips images where it is
/// missing.
pub fn aggregate(images: &[ImageMetrics], sample_count: usize, images_per_sample: usize) -> Result<MetricReport> {
    if images.is_empty() {
        return Err(Error::validation("nothing to aggregate"));
    }
    let col = |f: fn(&ImageMetrics) -> Option<f64>| mean(&images.iter().filter_map(f).collect::<Vec<_>>());
    let face_pairs: usize = images.iter().map(|m| m.face_pairs).sum();
    let face_sum: f64 = images.iter().map(|m| m.face_sum).sum();
    Ok(MetricReport {
        clip_t_global: col(|m| Some(m.clip_t)).unwrap_or_default(),
        hpsv2: col(|m| Some(m.hpsv2)).unwrap_or_default(),
        body: col(|m| m.body),
        face: (face_pairs > 0).then(|| face_sum / face_pairs as f64),
        full_local: col(|m| m.full),
        pose: col(|m| m.pose),
        sample_count,
        images_per_sample,
        image_count: images.len(),
        covered_images: images.iter().filter(|m| m.detections > 0).count(),
        face_images: images.iter().filter(|m| m.face_pairs > 0).count(),
        face_pairs,
    })
}
