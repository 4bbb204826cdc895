//! Benchmark construction: interactions → prompts → template images →
//! concepts → detections → annotations → structured samples.
//!
//! Stages run in order. Inside a stage, client calls fan out over a bounded
//! worker pool; results, transcripts and checkpoints are always written in
//! item order, so a fixed seed and fixed clients give byte-identical output.
//! A stage whose checkpoint matches its input digest is skipped on rerun.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use multiid_core::imageops::crop;
use multiid_core::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::clients::{ClientError, ClientResult, Clients};
use super::schema::{self, BenchmarkId, BenchmarkSample};
use super::templates;
use crate::config::RunConfig;
use crate::error::{read, read_string, write, AppError, AppResult};
use crate::imageio::{decode_png, encode_png, save_png};

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOptions {
    pub interactions: usize,
    pub prompts_per_interaction: usize,
    pub categories: Vec<String>,
    pub attempts: usize,
    pub backoff: Duration,
    pub duplicate_retries: usize,
    pub concurrency: usize,
    pub seed: u64,
}

impl BuildOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            interactions: cfg.bench.interactions,
            prompts_per_interaction: cfg.bench.prompts_per_interaction,
            categories: cfg.bench.categories.iter().map(|c| c.trim().to_lowercase()).collect(),
            attempts: cfg.bench.attempts,
            backoff: Duration::from_millis(cfg.bench.backoff_ms),
            duplicate_retries: cfg.bench.duplicate_retries,
            concurrency: cfg.concurrency,
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StageName {
    Interactions,
    Prompts,
    Templates,
    Concepts,
    Detection,
    Annotation,
    Structure,
}

impl StageName {
    pub const ORDER: [StageName; 7] = [
        StageName::Interactions,
        StageName::Prompts,
        StageName::Templates,
        StageName::Concepts,
        StageName::Detection,
        StageName::Annotation,
        StageName::Structure,
    ];

    fn slug(self) -> &'static str {
        match self {
            StageName::Interactions => "interactions",
            StageName::Prompts => "prompts",
            StageName::Templates => "templates",
            StageName::Concepts => "concepts",
            StageName::Detection => "detection",
            StageName::Annotation => "annotation",
            StageName::Structure => "structure",
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineStageRecord {
    pub stage: StageName,
    pub input_digest: String,
    pub output_digest: String,
    /// Transcript file, relative to the output directory.
    pub transcript: String,
    pub calls: usize,
    #[serde(skip)]
    pub resumed: bool,
}

/// One client exchange as persisted in a transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Call {
    pub service: String,
    pub prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub attempts: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub calls: Vec<Call>,
    pub warnings: Vec<String>,
}

impl StageLog {
    fn extend(&mut self, other: StageLog) {
        self.calls.extend(other.calls);
        self.warnings.extend(other.warnings);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptItem {
    pub interaction: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub interaction: String,
    /// Prefixed prompt the image was generated from.
    pub prompt: String,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub concept: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub crop: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub state: String,
    pub appearance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    /// Relative to the output directory once installed.
    pub image: String,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonCandidate {
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub posture: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub interaction: String,
    pub prompt: String,
    pub persons: Vec<PersonCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRow {
    pub sample_id: String,
    pub status: String,
    pub note: String,
    pub id_index: Option<usize>,
    pub category: String,
    pub reference_image: String,
    pub posture_description: String,
    pub full_description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Structured {
    pub samples: Vec<BenchmarkSample>,
    pub review: Vec<ReviewRow>,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildSummary {
    pub interactions: usize,
    pub prompts: usize,
    pub samples: usize,
    pub flagged: usize,
    pub benchmark: PathBuf,
    pub records: Vec<PipelineStageRecord>,
}

fn digest<T: Serialize>(v: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_string(v).expect("stage data serializes").as_bytes()))
}

fn stage_error(stage: StageName, msg: impl fmt::Display) -> AppError {
    AppError::Adapter(format!("stage {stage}: {msg}"))
}

/// Runs `f` on every item with at most `bound` workers; results keep item
/// order.
pub fn fan_out<T: Sync, R: Send>(items: &[T], bound: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..bound.max(1).min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

pub struct Orchestrator {
    clients: Clients,
    opts: BuildOptions,
    out: PathBuf,
    records: Vec<PipelineStageRecord>,
}

impl Orchestrator {
    pub fn new(clients: Clients, opts: BuildOptions, out: impl Into<PathBuf>) -> Self {
        Self {
            clients,
            opts,
            out: out.into(),
            records: Vec::new(),
        }
    }

    pub fn records(&self) -> &[PipelineStageRecord] {
        &self.records
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// Calls a client with retries and exponential backoff, logging the
    /// exchange.
    fn call<T>(
        &self,
        log: &mut StageLog,
        service: &str,
        prompt: &str,
        image: Option<&str>,
        f: impl Fn() -> ClientResult<T>,
        show: impl Fn(&T) -> String,
    ) -> ClientResult<T> {
        let mut attempt = 0;
        let result = loop {
            attempt += 1;
            match f() {
                Ok(v) => break Ok(v),
                Err(e) if attempt >= self.opts.attempts => break Err(e),
                Err(_) => std::thread::sleep(self.opts.backoff * (1u32 << (attempt - 1).min(16))),
            }
        };
        log.calls.push(Call {
            service: service.into(),
            prompt: prompt.into(),
            image: image.map(String::from),
            attempts: attempt,
            response: result.as_ref().ok().map(&show),
            error: result.as_ref().err().map(ClientError::to_string),
        });
        result
    }

    /// Collects `count` distinct lines from repeated LLM calls, allowing
    /// `duplicate_retries` extra calls when a reply comes up short.
    fn distinct_lines(&self, stage: StageName, prompt: &str, count: usize, log: &mut StageLog) -> AppResult<Vec<String>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for round in 0..=self.opts.duplicate_retries {
            let reply = self
                .call(log, "llm", prompt, None, || self.clients.llm.complete(prompt), String::clone)
                .map_err(|e| stage_error(stage, e))?;
            let lines = templates::parse_lines(&reply);
            let before = out.len();
            for l in lines.iter() {
                if seen.insert(l.to_lowercase()) {
                    out.push(l.clone());
                }
            }
            let dupes = lines.len() - (out.len() - before);
            if dupes > 0 {
                log.warnings.push(format!("{stage}: dropped {dupes} duplicate line(s) in round {round}"));
            }
            if out.len() >= count {
                out.truncate(count);
                return Ok(out);
            }
        }
        Err(stage_error(
            stage,
            format!("only {} distinct item(s) of {count} after {} call(s)", out.len(), self.opts.duplicate_retries + 1),
        ))
    }

    pub fn nominate_interactions(&self, count: usize, log: &mut StageLog) -> AppResult<Vec<String>> {
        if count == 0 {
            return Err(AppError::Config("interaction count must be at least 1".into()));
        }
        self.distinct_lines(StageName::Interactions, templates::INTERACTIONS, count, log)
    }

    pub fn expand_prompts(&self, interaction: &str, n: usize, log: &mut StageLog) -> AppResult<Vec<String>> {
        self.distinct_lines(StageName::Prompts, &templates::expand(n, interaction), n, log)
    }

    /// Renders one prefixed prompt to `rel` under the output directory.
    pub fn generate_template(&self, prompt: &str, seed: u64, rel: &str, log: &mut StageLog) -> AppResult<()> {
        let bytes = self
            .call(log, "t2i", prompt, None, || self.clients.t2i.generate(prompt, seed), |b| {
                format!("<{} PNG bytes>", b.len())
            })
            .map_err(|e| stage_error(StageName::Templates, e))?;
        decode_png(&bytes).map_err(|e| stage_error(StageName::Templates, e))?;
        write(&self.path(rel), bytes)
    }

    /// Concepts named by the VLM, lowercased; over-long lists are cut to ten.
    pub fn extract_concepts(&self, image: &[u8], image_ref: &str, log: &mut StageLog) -> AppResult<Vec<String>> {
        let p = templates::CONCEPTS;
        let reply = self
            .call(log, "vlm", p, Some(image_ref), || self.clients.vlm.ask(Some(image), p), String::clone)
            .map_err(|e| stage_error(StageName::Concepts, e))?;
        let mut concepts = templates::parse_concepts(&reply).ok_or_else(|| {
            stage_error(StageName::Concepts, format!("unparseable concept list; raw response: {reply:?}"))
        })?;
        if concepts.len() > templates::MAX_CONCEPTS {
            log.warnings.push(format!(
                "concepts: {image_ref}: {} concepts returned, keeping the first {}",
                concepts.len(),
                templates::MAX_CONCEPTS
            ));
            concepts.truncate(templates::MAX_CONCEPTS);
        }
        Ok(concepts)
    }

    /// Keeps, in order, the concepts the VLM calls a category of people.
    pub fn filter_human_concepts(&self, concepts: &[String], log: &mut StageLog) -> AppResult<Vec<String>> {
        let mut kept = Vec::new();
        for c in concepts {
            let q = templates::category_question(c);
            let answer = self
                .call(log, "vlm", &q, None, || self.clients.vlm.ask(None, &q), String::clone)
                .map_err(|e| stage_error(StageName::Concepts, e))?;
            if templates::is_yes(&answer) {
                kept.push(c.clone());
            }
        }
        Ok(kept)
    }

    /// Detects each concept, normalizes the boxes and writes crops next to
    /// the template. A concept with no detections is logged, not fatal.
    pub fn detect_concepts(&self, template_rel: &str, concepts: &[String], log: &mut StageLog) -> AppResult<Vec<Detection>> {
        let bytes = read(&self.path(template_rel))?;
        let image = decode_png(&bytes)?;
        let (h, w) = (image.shape()[1] as f64, image.shape()[2] as f64);
        let stem = template_rel.trim_end_matches(".png");
        let mut out = Vec::new();
        for concept in concepts {
            let boxes = self
                .call(log, "det", concept, Some(template_rel), || self.clients.det.detect(&bytes, concept), |b| {
                    serde_json::to_string(b).unwrap_or_default()
                })
                .map_err(|e| stage_error(StageName::Detection, e))?;
            if boxes.is_empty() {
                log.warnings.push(format!("detection: {template_rel}: no {concept:?} found"));
            }
            for (k, [x0, y0, x1, y1]) in boxes.into_iter().enumerate() {
                let n = |v: f64, d: f64| (v / d).clamp(0.0, 1.0);
                let Ok(bbox) = BBox::new(n(x0, w), n(y0, h), n(x1, w), n(y1, h)) else {
                    log.warnings.push(format!("detection: {template_rel}: degenerate {concept:?} box skipped"));
                    continue;
                };
                let crop_rel = format!("{stem}_{}_{k}.png", concept.replace(|c: char| !c.is_alphanumeric(), "-"));
                save_png(&self.path(&crop_rel), &crop(&image, &bbox)?)?;
                out.push(Detection {
                    concept: concept.clone(),
                    bbox,
                    crop: crop_rel,
                });
            }
        }
        Ok(out)
    }

    pub fn annotate(&self, image: &[u8], image_ref: &str, log: &mut StageLog) -> AppResult<Annotation> {
        let p = templates::ANNOTATE;
        let reply = self
            .call(log, "vlm", p, Some(image_ref), || self.clients.vlm.ask(Some(image), p), String::clone)
            .map_err(|e| stage_error(StageName::Annotation, e))?;
        let (state, appearance) = templates::parse_annotation(&reply).ok_or_else(|| {
            stage_error(
                StageName::Annotation,
                format!("{image_ref}: reply lacks a State or Appearance section; raw response: {reply:?}"),
            )
        })?;
        Ok(Annotation { state, appearance })
    }

    /// Assigns each person a random category-compatible reference (distinct
    /// within a sample while the pool allows). Candidates that cannot be
    /// fully assigned are flagged in the review and left out.
    pub fn structure_samples(
        &self,
        candidates: &[Candidate],
        pool: &[ReferenceEntry],
        appearances: &[String],
        seed: u64,
    ) -> Structured {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::new();
        let mut review = Vec::new();
        let mut flagged = 0;
        for (i, c) in candidates.iter().enumerate() {
            let sample_id = format!("idb-{i:04}");
            let flag = |note: String, review: &mut Vec<ReviewRow>| {
                review.push(ReviewRow {
                    sample_id: sample_id.clone(),
                    status: "flagged".into(),
                    note,
                    id_index: None,
                    category: String::new(),
                    reference_image: String::new(),
                    posture_description: String::new(),
                    full_description: String::new(),
                });
            };
            if c.persons.is_empty() {
                flag("no persons detected".into(), &mut review);
                flagged += 1;
                continue;
            }
            let mut used = BTreeSet::new();
            let mut ids = Vec::new();
            let mut problem = None;
            for p in &c.persons {
                if !self.opts.categories.contains(&p.category) {
                    problem = Some(format!("category {:?} is not in the vocabulary", p.category));
                    break;
                }
                let compatible: Vec<usize> = (0..pool.len()).filter(|&r| pool[r].category == p.category).collect();
                if compatible.is_empty() {
                    problem = Some(format!("no reference with category {:?}", p.category));
                    break;
                }
                let fresh: Vec<usize> = compatible.iter().copied().filter(|r| !used.contains(r)).collect();
                let choices = if fresh.is_empty() { &compatible } else { &fresh };
                let r = choices[rng.random_range(0..choices.len())];
                used.insert(r);
                ids.push(BenchmarkId {
                    category_label: p.category.clone(),
                    reference_image: pool[r].image.clone(),
                    posture_description: p.posture.clone(),
                    full_description: format!("{}, {}", p.posture, appearances[r]),
                    bbox: p.bbox,
                });
            }
            if let Some(note) = problem {
                flag(note, &mut review);
                flagged += 1;
                continue;
            }
            for (k, id) in ids.iter().enumerate() {
                review.push(ReviewRow {
                    sample_id: sample_id.clone(),
                    status: "ok".into(),
                    note: String::new(),
                    id_index: Some(k),
                    category: id.category_label.clone(),
                    reference_image: id.reference_image.clone(),
                    posture_description: id.posture_description.clone(),
                    full_description: id.full_description.clone(),
                });
            }
            samples.push(BenchmarkSample {
                sample_id,
                global_prompt: c.prompt.clone(),
                interaction_tag: c.interaction.clone(),
                ids,
            });
        }
        Structured {
            samples,
            review,
            flagged,
        }
    }

    /// Runs `body` unless a checkpoint for the same input exists, then
    /// persists transcript, checkpoint and stage record.
    fn stage<I: Serialize, O: Serialize + DeserializeOwned>(
        &mut self,
        name: StageName,
        input: &I,
        body: impl FnOnce(&Self, &mut StageLog) -> AppResult<O>,
    ) -> AppResult<O> {
        let input_digest = digest(&(name, input));
        let n = StageName::ORDER.iter().position(|s| *s == name).unwrap_or(0) + 1;
        let ckpt = self.path(&format!("checkpoints/{n}_{name}.json"));
        let transcript = format!("transcripts/{n}_{name}.jsonl");
        if ckpt.is_file() {
            #[derive(Deserialize)]
            struct Saved<O> {
                input_digest: String,
                output: O,
            }
            if let Ok(saved) = serde_json::from_str::<Saved<O>>(&read_string(&ckpt)?) {
                if saved.input_digest == input_digest {
                    let calls = read_string(&self.path(&transcript)).map(|t| t.lines().count()).unwrap_or(0);
                    self.records.push(PipelineStageRecord {
                        stage: name,
                        input_digest,
                        output_digest: digest(&saved.output),
                        transcript,
                        calls,
                        resumed: true,
                    });
                    self.write_records()?;
                    return Ok(saved.output);
                }
            }
        }
        let mut log = StageLog::default();
        let result = body(self, &mut log);
        let mut lines = String::new();
        for c in &log.calls {
            lines.push_str(&serde_json::to_string(&serde_json::json!({ "call": c })).expect("call serializes"));
            lines.push('\n');
        }
        for w in &log.warnings {
            lines.push_str(&serde_json::to_string(&serde_json::json!({ "warning": w })).expect("warning serializes"));
            lines.push('\n');
        }
        write(&self.path(&transcript), &lines)?;
        let output = result?;
        let output_digest = digest(&output);
        write(
            &ckpt,
            serde_json::to_string(&serde_json::json!({ "input_digest": input_digest, "output": output }))
                .expect("checkpoint serializes"),
        )?;
        self.records.push(PipelineStageRecord {
            stage: name,
            input_digest,
            output_digest,
            transcript,
            calls: log.calls.len() + log.warnings.len(),
            resumed: false,
        });
        self.write_records()?;
        Ok(output)
    }

    fn write_records(&self) -> AppResult<()> {
        write(
            &self.path("stages.json"),
            serde_json::to_string_pretty(&self.records).expect("records serialize") + "\n",
        )
    }

    /// Per-item fan-out whose logs are merged in item order.
    fn each<T: Sync, R: Send>(
        &self,
        items: &[T],
        log: &mut StageLog,
        f: impl Fn(usize, &T, &mut StageLog) -> AppResult<R> + Sync,
    ) -> AppResult<Vec<R>> {
        let results = fan_out(items, self.opts.concurrency, |i, t| {
            let mut l = StageLog::default();
            let r = f(i, t, &mut l);
            (r, l)
        });
        let mut out = Vec::with_capacity(results.len());
        let mut first_err = None;
        for (r, l) in results {
            log.extend(l);
            match r {
                Ok(v) => out.push(v),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    /// Full build into the output directory: `benchmark.json`, `images/`,
    /// `review.csv`, plus `stages.json`, `checkpoints/` and `transcripts/`.
    pub fn build(&mut self, pool: &[ReferenceEntry]) -> AppResult<BuildSummary> {
        let opts = self.opts.clone();
        for r in pool {
            if !self.path(&r.image).is_file() {
                return Err(AppError::Validation(format!("reference image {} not found", r.image)));
            }
        }

        let interactions: Vec<String> = self.stage(StageName::Interactions, &opts.interactions, |o, log| {
            o.nominate_interactions(opts.interactions, log)
        })?;

        let n = opts.prompts_per_interaction;
        let prompts: Vec<PromptItem> = self.stage(StageName::Prompts, &(&interactions, n), |o, log| {
            let per = o.each(&interactions, log, |_, it, l| o.expand_prompts(it, n, l))?;
            Ok(interactions
                .iter()
                .zip(per)
                .flat_map(|(it, ps)| {
                    ps.into_iter().map(move |p| PromptItem {
                        interaction: it.clone(),
                        prompt: p,
                    })
                })
                .collect())
        })?;

        let seed = opts.seed;
        let templates_out: Vec<Template> = self.stage(StageName::Templates, &(&prompts, seed), |o, log| {
            o.each(&prompts, log, |i, p, l| {
                let prompt = templates::with_prefix(&p.prompt);
                let rel = format!("templates/{i:04}.png");
                o.generate_template(&prompt, seed.wrapping_add(i as u64), &rel, l)?;
                Ok(Template {
                    interaction: p.interaction.clone(),
                    prompt,
                    image: rel,
                })
            })
        })?;

        let concepts: Vec<Vec<String>> = self.stage(StageName::Concepts, &templates_out, |o, log| {
            o.each(&templates_out, log, |_, t, l| {
                let bytes = read(&o.path(&t.image))?;
                let all = o.extract_concepts(&bytes, &t.image, l)?;
                o.filter_human_concepts(&all, l)
            })
        })?;

        let detections: Vec<Vec<Detection>> =
            self.stage(StageName::Detection, &(&templates_out, &concepts), |o, log| {
                let pairs: Vec<(&Template, &Vec<String>)> = templates_out.iter().zip(&concepts).collect();
                o.each(&pairs, log, |_, (t, cs), l| o.detect_concepts(&t.image, cs, l))
            })?;

        let crops: Vec<&str> = detections.iter().flatten().map(|d| d.crop.as_str()).collect();
        let refs: Vec<&str> = pool.iter().map(|r| r.image.as_str()).collect();
        let (postures, appearances): (Vec<String>, Vec<String>) =
            self.stage(StageName::Annotation, &(&crops, &refs), |o, log| {
                let annotate = |items: &[&str], log: &mut StageLog| {
                    o.each(items, log, |_, rel, l| o.annotate(&read(&o.path(rel))?, rel, l))
                };
                let postures = annotate(&crops, log)?.into_iter().map(|a| a.state).collect();
                let appearances = annotate(&refs, log)?.into_iter().map(|a| a.appearance).collect();
                Ok((postures, appearances))
            })?;

        let mut posture_iter = postures.into_iter();
        let candidates: Vec<Candidate> = templates_out
            .iter()
            .zip(&detections)
            .map(|(t, ds)| Candidate {
                interaction: t.interaction.clone(),
                prompt: t.prompt.clone(),
                persons: ds
                    .iter()
                    .map(|d| PersonCandidate {
                        category: d.concept.clone(),
                        bbox: d.bbox,
                        posture: posture_iter.next().unwrap_or_default(),
                    })
                    .collect(),
            })
            .collect();
        let structured: Structured =
            self.stage(StageName::Structure, &(&candidates, pool, &appearances, seed), |o, _| {
                Ok(o.structure_samples(&candidates, pool, &appearances, seed))
            })?;

        let benchmark = self.path("benchmark.json");
        schema::save(&benchmark, &structured.samples)?;
        self.write_review(&structured.review)?;
        Ok(BuildSummary {
            interactions: interactions.len(),
            prompts: prompts.len(),
            samples: structured.samples.len(),
            flagged: structured.flagged,
            benchmark,
            records: self.records.clone(),
        })
    }

    fn write_review(&self, rows: &[ReviewRow]) -> AppResult<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| AppError::Validation(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| AppError::Validation(e.to_string()))?;
        write(&self.path("review.csv"), bytes)
    }
}

/// A small synthetic reference pool (`per_category` images per label),
/// written under `images/` in `out`.
pub fn synthetic_pool(out: &Path, categories: &[String], per_category: usize, seed: u64) -> AppResult<Vec<ReferenceEntry>> {
    use multiid_core::backend::InitialImageGenerator;
    use multiid_core::toy::ToyInitialImageGenerator;
    let mut pool = Vec::new();
    for c in categories {
        for k in 0..per_category {
            let img = ToyInitialImageGenerator.generate(&format!("reference {c} {k}"), seed.wrapping_add(k as u64))?;
            let rel = format!("images/ref_{}_{k}.png", c.replace(|ch: char| !ch.is_alphanumeric(), "-"));
            write(&out.join(&rel), encode_png(&img)?)?;
            pool.push(ReferenceEntry {
                image: rel,
                category: c.clone(),
            });
        }
    }
    Ok(pool)
}

/// Copies a user pool (`[{ "image", "category" }]`, paths relative to the
/// pool file) into `out/images/`.
pub fn install_pool(pool_file: &Path, out: &Path) -> AppResult<Vec<ReferenceEntry>> {
    let entries: Vec<ReferenceEntry> = serde_json::from_str(&read_string(pool_file)?)
        .map_err(|e| AppError::Config(format!("{}: {e}", pool_file.display())))?;
    let base = pool_file.parent().unwrap_or(Path::new(""));
    entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let img = crate::imageio::load_rgb(&base.join(&e.image))?;
            let rel = format!("images/ref_{i:04}.png");
            save_png(&out.join(&rel), &img)?;
            Ok(ReferenceEntry {
                image: rel,
                category: e.category.trim().to_lowercase(),
            })
        })
        .collect()
}
