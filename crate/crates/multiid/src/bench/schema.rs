//! Benchmark document: a JSON array of samples next to an images directory.
//! Loading validates every invariant and reports each violation with its own
//! code and the line it occurs on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use multiid_core::BBox;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{read_string, write, AppError, AppResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkId {
    pub category_label: String,
    /// Relative to the benchmark file's directory.
    pub reference_image: String,
    pub posture_description: String,
    pub full_description: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSample {
    pub sample_id: String,
    pub global_prompt: String,
    pub interaction_tag: String,
    pub ids: Vec<BenchmarkId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ErrorCode {
    Syntax,
    NotAList,
    NotAnObject,
    UnknownKey,
    MissingField,
    WrongType,
    EmptySampleId,
    DuplicateSampleId,
    EmptyGlobalPrompt,
    EmptyInteractionTag,
    NoIds,
    EmptyCategory,
    EmptyPosture,
    FullLacksPosture,
    EmptyAppearance,
    InvalidBox,
    EmptyReferencePath,
    MissingReference,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 18] = [
        ErrorCode::Syntax,
        ErrorCode::NotAList,
        ErrorCode::NotAnObject,
        ErrorCode::UnknownKey,
        ErrorCode::MissingField,
        ErrorCode::WrongType,
        ErrorCode::EmptySampleId,
        ErrorCode::DuplicateSampleId,
        ErrorCode::EmptyGlobalPrompt,
        ErrorCode::EmptyInteractionTag,
        ErrorCode::NoIds,
        ErrorCode::EmptyCategory,
        ErrorCode::EmptyPosture,
        ErrorCode::FullLacksPosture,
        ErrorCode::EmptyAppearance,
        ErrorCode::InvalidBox,
        ErrorCode::EmptyReferencePath,
        ErrorCode::MissingReference,
    ];

    pub fn code(self) -> &'static str {
        match self {
            ErrorCode::Syntax => "B001",
            ErrorCode::NotAList => "B002",
            ErrorCode::NotAnObject => "B003",
            ErrorCode::UnknownKey => "B004",
            ErrorCode::MissingField => "B005",
            ErrorCode::WrongType => "B006",
            ErrorCode::EmptySampleId => "B007",
            ErrorCode::DuplicateSampleId => "B008",
            ErrorCode::EmptyGlobalPrompt => "B009",
            ErrorCode::EmptyInteractionTag => "B010",
            ErrorCode::NoIds => "B011",
            ErrorCode::EmptyCategory => "B012",
            ErrorCode::EmptyPosture => "B013",
            ErrorCode::FullLacksPosture => "B014",
            ErrorCode::EmptyAppearance => "B015",
            ErrorCode::InvalidBox => "B016",
            ErrorCode::EmptyReferencePath => "B017",
            ErrorCode::MissingReference => "B018",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorCode::Syntax => "syntax",
            ErrorCode::NotAList => "not-a-list",
            ErrorCode::NotAnObject => "not-an-object",
            ErrorCode::UnknownKey => "unknown-key",
            ErrorCode::MissingField => "missing-field",
            ErrorCode::WrongType => "wrong-type",
            ErrorCode::EmptySampleId => "empty-sample-id",
            ErrorCode::DuplicateSampleId => "duplicate-sample-id",
            ErrorCode::EmptyGlobalPrompt => "empty-global-prompt",
            ErrorCode::EmptyInteractionTag => "empty-interaction-tag",
            ErrorCode::NoIds => "no-ids",
            ErrorCode::EmptyCategory => "empty-category",
            ErrorCode::EmptyPosture => "empty-posture",
            ErrorCode::FullLacksPosture => "full-lacks-posture",
            ErrorCode::EmptyAppearance => "empty-appearance",
            ErrorCode::InvalidBox => "invalid-box",
            ErrorCode::EmptyReferencePath => "empty-reference-path",
            ErrorCode::MissingReference => "missing-reference",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.code(), self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub code: ErrorCode,
    /// 1-based; 0 when validating in-memory samples.
    pub line: usize,
    pub sample_id: Option<String>,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line > 0 {
            write!(f, "line {}: ", self.line)?;
        }
        write!(f, "[{}]", self.code)?;
        if let Some(id) = &self.sample_id {
            write!(f, " sample {id:?}:")?;
        }
        write!(f, " {}", self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn codes(&self) -> BTreeSet<ErrorCode> {
        self.issues.iter().map(|i| i.code).collect()
    }

    fn push(&mut self, code: ErrorCode, line: usize, sample_id: Option<&str>, message: impl Into<String>) {
        self.issues.push(Issue {
            code,
            line,
            sample_id: sample_id.map(String::from),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in &self.issues {
            writeln!(f, "{i}")?;
        }
        Ok(())
    }
}

const SAMPLE_KEYS: [&str; 4] = ["sample_id", "global_prompt", "interaction_tag", "ids"];
const ID_KEYS: [&str; 5] = [
    "category_label",
    "reference_image",
    "posture_description",
    "full_description",
    "box",
];

/// Source line of every sample and identity entry.
#[derive(Debug, Clone, Default)]
struct Lines {
    sample: usize,
    ids: Vec<usize>,
}

struct Source<'a> {
    text: &'a str,
    starts: Vec<usize>,
}

impl<'a> Source<'a> {
    fn new(text: &'a str) -> Self {
        let starts = std::iter::once(0).chain(text.match_indices('\n').map(|(i, _)| i + 1)).collect();
        Self { text, starts }
    }

    fn line(&self, raw: &RawValue) -> usize {
        let offset = raw.get().as_ptr() as usize - self.text.as_ptr() as usize;
        self.starts.partition_point(|&s| s <= offset)
    }
}

struct Parser<'a> {
    src: Source<'a>,
    report: ValidationReport,
}

impl<'a> Parser<'a> {
    fn object(
        &mut self,
        raw: &'a RawValue,
        keys: &[&str],
        what: &str,
        sample: Option<&str>,
    ) -> Option<BTreeMap<String, &'a RawValue>> {
        let line = self.src.line(raw);
        let Ok(map) = serde_json::from_str::<BTreeMap<String, &'a RawValue>>(raw.get()) else {
            self.report
                .push(ErrorCode::NotAnObject, line, sample, format!("{what} must be a JSON object"));
            return None;
        };
        for (k, v) in &map {
            if !keys.contains(&k.as_str()) {
                let l = self.src.line(v);
                self.report
                    .push(ErrorCode::UnknownKey, l, sample, format!("unknown key {k:?} in {what}"));
            }
        }
        for k in keys {
            if !map.contains_key(*k) {
                self.report
                    .push(ErrorCode::MissingField, line, sample, format!("{what} is missing {k}"));
            }
        }
        Some(map)
    }

    fn field<T: DeserializeOwned>(
        &mut self,
        map: &BTreeMap<String, &'a RawValue>,
        key: &str,
        expect: &str,
        sample: Option<&str>,
    ) -> Option<T> {
        let raw = *map.get(key)?;
        match serde_json::from_str(raw.get()) {
            Ok(v) => Some(v),
            Err(e) => {
                let line = self.src.line(raw);
                self.report
                    .push(ErrorCode::WrongType, line, sample, format!("{key} must be {expect}: {e}"));
                None
            }
        }
    }

    fn id(&mut self, raw: &'a RawValue, sample: Option<&str>) -> Option<BenchmarkId> {
        let map = self.object(raw, &ID_KEYS, "identity entry", sample)?;
        let category_label = self.field(&map, "category_label", "a string", sample);
        let reference_image = self.field(&map, "reference_image", "a string", sample);
        let posture_description = self.field(&map, "posture_description", "a string", sample);
        let full_description = self.field(&map, "full_description", "a string", sample);
        let bbox = self.field(&map, "box", "an object {x0, y0, x1, y1}", sample);
        Some(BenchmarkId {
            category_label: category_label?,
            reference_image: reference_image?,
            posture_description: posture_description?,
            full_description: full_description?,
            bbox: bbox?,
        })
    }

    fn sample(&mut self, raw: &'a RawValue) -> Option<(BenchmarkSample, Lines)> {
        let line = self.src.line(raw);
        let map = self.object(raw, &SAMPLE_KEYS, "sample", None)?;
        let sample_id: Option<String> = self.field(&map, "sample_id", "a string", None);
        let sid = sample_id.as_deref();
        let global_prompt = self.field(&map, "global_prompt", "a string", sid);
        let interaction_tag = self.field(&map, "interaction_tag", "a string", sid);
        let raw_ids: Option<Vec<&'a RawValue>> = match map.get("ids") {
            Some(r) => match serde_json::from_str(r.get()) {
                Ok(v) => Some(v),
                Err(_) => {
                    let l = self.src.line(r);
                    self.report.push(ErrorCode::WrongType, l, sid, "ids must be a list");
                    None
                }
            },
            None => None,
        };
        let mut ids = Some(Vec::new());
        let mut id_lines = Vec::new();
        for r in raw_ids.iter().flatten() {
            id_lines.push(self.src.line(r));
            let parsed = self.id(r, sid);
            ids = ids.zip(parsed).map(|(mut v, id)| {
                v.push(id);
                v
            });
        }
        let sample = BenchmarkSample {
            sample_id: sample_id?,
            global_prompt: global_prompt?,
            interaction_tag: interaction_tag?,
            ids: ids.filter(|_| raw_ids.is_some())?,
        };
        Some((sample, Lines { sample: line, ids: id_lines }))
    }
}

fn check(samples: &[(BenchmarkSample, Lines)], base: Option<&Path>, report: &mut ValidationReport) {
    let mut seen = BTreeSet::new();
    for (s, lines) in samples {
        let sid = Some(s.sample_id.as_str());
        let at = lines.sample;
        if s.sample_id.trim().is_empty() {
            report.push(ErrorCode::EmptySampleId, at, None, "sample_id is empty");
        } else if !seen.insert(s.sample_id.as_str()) {
            report.push(ErrorCode::DuplicateSampleId, at, sid, "sample_id appears more than once");
        }
        if s.global_prompt.trim().is_empty() {
            report.push(ErrorCode::EmptyGlobalPrompt, at, sid, "global_prompt is empty");
        }
        if s.interaction_tag.trim().is_empty() {
            report.push(ErrorCode::EmptyInteractionTag, at, sid, "interaction_tag is empty");
        }
        if s.ids.is_empty() {
            report.push(ErrorCode::NoIds, at, sid, "ids is empty");
        }
        for (k, id) in s.ids.iter().enumerate() {
            let at = lines.ids.get(k).copied().unwrap_or(at);
            let mut push = |code, msg: String| report.push(code, at, sid, format!("ids[{k}]: {msg}"));
            if id.category_label.trim().is_empty() {
                push(ErrorCode::EmptyCategory, "category_label is empty".into());
            }
            let posture = id.posture_description.trim();
            if posture.is_empty() {
                push(ErrorCode::EmptyPosture, "posture_description is empty".into());
            } else if !id.full_description.contains(posture) {
                push(
                    ErrorCode::FullLacksPosture,
                    "full_description does not contain posture_description".into(),
                );
            } else if id.full_description.replacen(posture, "", 1).trim().is_empty() {
                push(
                    ErrorCode::EmptyAppearance,
                    "full_description has no appearance part beyond the posture".into(),
                );
            }
            if let Err(e) = id.bbox.validate() {
                push(ErrorCode::InvalidBox, format!("box: {e}"));
            }
            if id.reference_image.trim().is_empty() {
                push(ErrorCode::EmptyReferencePath, "reference_image is empty".into());
            } else if let Some(base) = base {
                if !base.join(&id.reference_image).is_file() {
                    push(
                        ErrorCode::MissingReference,
                        format!("reference image {} not found", id.reference_image),
                    );
                }
            }
        }
    }
}

/// Parses and validates a benchmark document. With `base`, referenced images
/// must exist relative to it.
pub fn parse(text: &str, base: Option<&Path>) -> Result<Vec<BenchmarkSample>, ValidationReport> {
    let mut report = ValidationReport::default();
    if let Err(e) = serde_json::from_str::<&RawValue>(text) {
        report.push(ErrorCode::Syntax, e.line(), None, format!("invalid JSON: {e}"));
        return Err(report);
    }
    let Ok(raw) = serde_json::from_str::<Vec<&RawValue>>(text) else {
        report.push(ErrorCode::NotAList, 1, None, "benchmark must be a JSON array of samples");
        return Err(report);
    };
    let mut p = Parser {
        src: Source::new(text),
        report,
    };
    let parsed: Vec<_> = raw.into_iter().filter_map(|r| p.sample(r)).collect();
    let mut report = p.report;
    check(&parsed, base, &mut report);
    if report.is_ok() {
        Ok(parsed.into_iter().map(|(s, _)| s).collect())
    } else {
        Err(report)
    }
}

/// Invariant check on in-memory samples.
pub fn validate(samples: &[BenchmarkSample], base: Option<&Path>) -> ValidationReport {
    let with_lines: Vec<_> = samples.iter().cloned().map(|s| (s, Lines::default())).collect();
    let mut report = ValidationReport::default();
    check(&with_lines, base, &mut report);
    report
}

pub fn to_json(samples: &[BenchmarkSample]) -> String {
    let mut s = serde_json::to_string_pretty(samples).expect("samples serialize");
    s.push('\n');
    s
}

pub fn load(path: &Path) -> AppResult<Vec<BenchmarkSample>> {
    let text = read_string(path)?;
    parse(&text, Some(path.parent().unwrap_or(Path::new("")))).map_err(AppError::Benchmark)
}

/// Validates, then writes. Reference images must already be in place.
pub fn save(path: &Path, samples: &[BenchmarkSample]) -> AppResult<()> {
    let report = validate(samples, Some(path.parent().unwrap_or(Path::new(""))));
    if !report.is_ok() {
        return Err(AppError::Benchmark(report));
    }
    write(path, to_json(samples))
}
