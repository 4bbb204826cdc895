//! Benchmark evaluation: per-image scores, the aggregated six-column report,
//! CSV/JSON output and a console table.

use std::fmt::Write as _;
use std::path::Path;

use multiid_core::backend::BackendBundle;
use multiid_core::metrics::{aggregate, evaluate_image, EvalIdentity, EvalSample, ImageMetrics, MetricReport, COLUMNS};
use serde::{Deserialize, Serialize};

use crate::bench::orchestrator::fan_out;
use crate::bench::schema::{self, BenchmarkSample};
use crate::error::{write, AppError, AppResult};
use crate::imageio::load_rgb;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRow {
    pub sample_id: String,
    pub file: String,
    pub metrics: ImageMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub rows: Vec<ImageRow>,
}

fn eval_sample(s: &BenchmarkSample, base: &Path) -> AppResult<EvalSample> {
    Ok(EvalSample {
        sample_id: s.sample_id.clone(),
        global_prompt: s.global_prompt.clone(),
        ids: s
            .ids
            .iter()
            .map(|i| {
                Ok(EvalIdentity {
                    reference_image: load_rgb(&base.join(&i.reference_image))?,
                    full_description: i.full_description.clone(),
                    posture_description: i.posture_description.clone(),
                })
            })
            .collect::<AppResult<_>>()?,
    })
}

/// Scores `<images>/<sample_id>/<k>.png` for every sample and `k <
/// images_per_sample`; any missing file is a validation error.
pub fn evaluate(
    samples: &[BenchmarkSample],
    benchmark_dir: &Path,
    images: &Path,
    images_per_sample: usize,
    bundle: &BackendBundle,
    concurrency: usize,
) -> AppResult<Evaluation> {
    if samples.is_empty() {
        return Err(AppError::Validation("benchmark has no samples".into()));
    }
    let b = bundle.evaluation()?;
    let mut units = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        for k in 0..images_per_sample {
            let file = format!("{}/{k}.png", s.sample_id);
            if !images.join(&file).is_file() {
                return Err(AppError::Validation(format!(
                    "missing {}; images_per_sample = {images_per_sample} needs 0.png..{}.png for every sample",
                    images.join(&file).display(),
                    images_per_sample - 1
                )));
            }
            units.push((si, file));
        }
    }
    let refs = samples
        .iter()
        .map(|s| eval_sample(s, benchmark_dir))
        .collect::<AppResult<Vec<_>>>()?;
    let bound = if b.person_detector.concurrency_safe() { concurrency } else { 1 };
    let rows = fan_out(&units, bound, |_, (si, file)| -> AppResult<ImageRow> {
        let img = load_rgb(&images.join(file))?;
        Ok(ImageRow {
            sample_id: samples[*si].sample_id.clone(),
            file: file.clone(),
            metrics: evaluate_image(&img, &refs[*si], &b)?,
        })
    })
    .into_iter()
    .collect::<AppResult<Vec<_>>>()?;
    let metrics: Vec<ImageMetrics> = rows.iter().map(|r| r.metrics.clone()).collect();
    Ok(Evaluation {
        report: aggregate(&metrics, samples.len(), images_per_sample)?,
        rows,
    })
}

pub fn evaluate_benchmark(
    benchmark: &Path,
    images: &Path,
    images_per_sample: usize,
    bundle: &BackendBundle,
    concurrency: usize,
) -> AppResult<Evaluation> {
    let samples = schema::load(benchmark)?;
    evaluate(
        &samples,
        benchmark.parent().unwrap_or(Path::new("")),
        images,
        images_per_sample,
        bundle,
        concurrency,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub config_digest: String,
    /// Keyed by the six column names; `null` when no image had a value.
    pub columns: serde_json::Map<String, serde_json::Value>,
    pub report: MetricReport,
    pub coverage: f64,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn report_json(report: &MetricReport, digest: &str) -> String {
    let columns = COLUMNS
        .iter()
        .zip(report.columns())
        .map(|(k, v)| (k.to_string(), v.map_or(serde_json::Value::Null, serde_json::Value::from)))
        .collect();
    let f = ReportFile {
        config_digest: digest.into(),
        columns,
        report: report.clone(),
        coverage: report.coverage(),
    };
    serde_json::to_string_pretty(&f).expect("report serializes") + "\n"
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> AppResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| AppError::Validation(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner().map_err(|e| AppError::Validation(e.to_string()))
}

pub fn report_csv(report: &MetricReport, digest: &str) -> AppResult<Vec<u8>> {
    let mut header = COLUMNS.to_vec();
    header.extend(["samples", "images_per_sample", "images", "coverage", "face_pairs", "config_digest"]);
    let mut row: Vec<String> = report.columns().into_iter().map(cell).collect();
    row.extend([
        report.sample_count.to_string(),
        report.images_per_sample.to_string(),
        report.image_count.to_string(),
        report.coverage().to_string(),
        report.face_pairs.to_string(),
        digest.to_string(),
    ]);
    csv_bytes(&header, [row])
}

pub fn per_image_csv(rows: &[ImageRow]) -> AppResult<Vec<u8>> {
    let mut header = vec!["sample_id", "image"];
    header.extend(COLUMNS);
    header.extend(["detections", "matched_pairs", "face_pairs"]);
    csv_bytes(
        &header,
        rows.iter().map(|r| {
            let m = &r.metrics;
            vec![
                r.sample_id.clone(),
                r.file.clone(),
                m.clip_t.to_string(),
                m.hpsv2.to_string(),
                cell(m.body),
                cell(m.face()),
                cell(m.full),
                cell(m.pose),
                m.detections.to_string(),
                m.matched_pairs.to_string(),
                m.face_pairs.to_string(),
            ]
        }),
    )
}

/// Aligned console table with one decimal per column.
pub fn table(report: &MetricReport) -> String {
    let values: Vec<String> = report
        .columns()
        .iter()
        .map(|v| v.map_or("-".into(), |x| format!("{x:.1}")))
        .collect();
    let widths: Vec<usize> = COLUMNS.iter().zip(&values).map(|(c, v)| c.len().max(v.len())).collect();
    let mut s = String::new();
    for (c, w) in COLUMNS.iter().zip(&widths) {
        let _ = write!(s, "{c:>w$}  ");
    }
    s = s.trim_end().to_string() + "\n";
    let mut line = String::new();
    for (v, w) in values.iter().zip(&widths) {
        let _ = write!(line, "{v:>w$}  ");
    }
    s + line.trim_end() + "\n"
}

/// Writes `report.json`, `report.csv` and `per_image.csv` into `out`.
pub fn write_reports(eval: &Evaluation, digest: &str, out: &Path) -> AppResult<()> {
    write(&out.join("report.json"), report_json(&eval.report, digest))?;
    write(&out.join("report.csv"), report_csv(&eval.report, digest)?)?;
    write(&out.join("per_image.csv"), per_image_csv(&eval.rows)?)
}
