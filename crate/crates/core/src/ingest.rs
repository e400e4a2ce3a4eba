//! Benchmark loading and greedy similarity downsampling.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::embed::{EmbedError, Embedder};
use crate::media::is_url;
use crate::pipeline::{AnswerMode, Sample};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {detail}")]
    Schema { line: usize, detail: String },
    #[error("line {line}: duplicate sample_id {sample_id}")]
    DuplicateId { line: usize, sample_id: String },
    #[error("sample {sample_id}: image not found at {path}")]
    MissingImage { sample_id: String, path: PathBuf },
    #[error("no samples to process")]
    Empty,
    #[error("threshold must be finite, got {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub name: String,
    pub samples_path: PathBuf,
    pub image_root: PathBuf,
    #[serde(default = "default_answer_mode")]
    pub answer_mode: AnswerMode,
    /// JSONL of `{sample_id, annotator_answers}` merged into the samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_answers_path: Option<PathBuf>,
    /// Fail instead of skipping samples whose image file is absent.
    #[serde(default)]
    pub missing_image_fatal: bool,
}

fn default_answer_mode() -> AnswerMode {
    AnswerMode::FreeForm
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedBenchmark {
    pub samples: Vec<Sample>,
    pub skipped_missing_images: usize,
}

#[derive(Deserialize)]
struct AnnotatorLine {
    sample_id: String,
    annotator_answers: Vec<String>,
}

fn open(path: &Path) -> Result<BufReader<File>, IngestError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses sample JSONL in file order. Blank lines are ignored.
pub fn parse_samples(reader: impl BufRead) -> Result<Vec<Sample>, IngestError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| IngestError::Schema {
            line: line_no,
            detail: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| IngestError::Schema {
            line: line_no,
            detail: e.to_string(),
        })?;
        for (field, value) in [
            ("sample_id", &sample.sample_id),
            ("image", &sample.image_ref),
            ("question", &sample.question),
        ] {
            if value.trim().is_empty() {
                return Err(IngestError::Schema {
                    line: line_no,
                    detail: format!("field `{field}` is empty"),
                });
            }
        }
        if !seen.insert(sample.sample_id.clone()) {
            return Err(IngestError::DuplicateId {
                line: line_no,
                sample_id: sample.sample_id,
            });
        }
        out.push(sample);
    }
    Ok(out)
}

/// Parses a benchmark's samples and merges annotator panels, leaving image
/// refs untouched. This is the gold view used for scoring.
pub fn load_gold_samples(spec: &BenchmarkSpec) -> Result<Vec<Sample>, IngestError> {
    let mut samples = parse_samples(open(&spec.samples_path)?)?;
    if let Some(path) = &spec.annotator_answers_path {
        let mut panels = HashMap::new();
        for (i, line) in open(path)?.lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let a: AnnotatorLine =
                serde_json::from_str(&line).map_err(|e| IngestError::Schema {
                    line: i + 1,
                    detail: format!("{}: {e}", path.display()),
                })?;
            panels.insert(a.sample_id, a.annotator_answers);
        }
        for s in &mut samples {
            if let Some(p) = panels.remove(&s.sample_id) {
                s.annotator_answers = Some(p);
            }
        }
    }
    Ok(samples)
}

/// Loads, validates and resolves a benchmark.
pub fn load_benchmark(spec: &BenchmarkSpec) -> Result<LoadedBenchmark, IngestError> {
    let samples = load_gold_samples(spec)?;
    let mut kept = Vec::with_capacity(samples.len());
    let mut skipped = 0;
    for mut s in samples {
        if !is_url(&s.image_ref) {
            let path = spec.image_root.join(&s.image_ref);
            if !path.is_file() {
                if spec.missing_image_fatal {
                    return Err(IngestError::MissingImage {
                        sample_id: s.sample_id,
                        path,
                    });
                }
                skipped += 1;
                continue;
            }
            s.image_ref = path.to_string_lossy().into_owned();
        }
        kept.push(s);
    }
    if skipped > 0 {
        warn!(benchmark = %spec.name, skipped, "skipped samples with missing images");
    }
    Ok(LoadedBenchmark {
        samples: kept,
        skipped_missing_images: skipped,
    })
}

/// Unit question embeddings, row-major `n × dim`.
#[derive(Debug, Clone)]
pub struct QuestionMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl QuestionMatrix {
    pub fn embed(samples: &[Sample], embedder: &dyn Embedder) -> Result<Self, EmbedError> {
        let rows = samples
            .par_iter()
            .map(|s| embedder.embed_text(&s.question))
            .collect::<Result<Vec<_>, _>>()?;
        let dim = embedder.dim();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            data.extend_from_slice(r.values());
        }
        Ok(Self { dim, data })
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        self.row(i)
            .iter()
            .zip(self.row(j))
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Greedy keep in row order: row `i` is kept iff its similarity to every
    /// previously kept row is `<= t`.
    pub fn greedy_keep(&self, t: f64) -> Vec<usize> {
        let mut kept: Vec<usize> = Vec::new();
        for i in 0..self.len() {
            if kept.iter().all(|&j| self.similarity(i, j) <= t) {
                kept.push(i);
            }
        }
        kept
    }
}

/// Greedy similarity downsampling; output preserves input order.
pub fn downsample(
    samples: &[Sample],
    embedder: &dyn Embedder,
    t: f64,
) -> Result<Vec<Sample>, IngestError> {
    if !t.is_finite() {
        return Err(IngestError::InvalidThreshold(t));
    }
    let m = QuestionMatrix::embed(samples, embedder)?;
    Ok(m.greedy_keep(t)
        .into_iter()
        .map(|i| samples[i].clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub threshold: f64,
    pub kept: Vec<usize>,
    /// False when no probed threshold landed within tolerance; `threshold`
    /// is then the closest one found.
    pub feasible: bool,
}

/// Bisects `t` in `[-1, 1]` until the kept count is within
/// `target ± tolerance_frac * target`.
pub fn tune_threshold(
    m: &QuestionMatrix,
    target: usize,
    tolerance_frac: f64,
    max_steps: usize,
) -> Result<TuneOutcome, IngestError> {
    if m.is_empty() {
        return Err(IngestError::Empty);
    }
    let slack = (target as f64 * tolerance_frac).floor() as usize;
    let within = |n: usize| n.abs_diff(target) <= slack;
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for _ in 0..max_steps {
        let mid = 0.5 * (lo + hi);
        let kept = m.greedy_keep(mid);
        let n = kept.len();
        let gap = n.abs_diff(target);
        if within(n) {
            return Ok(TuneOutcome {
                threshold: mid,
                kept,
                feasible: true,
            });
        }
        if best.as_ref().is_none_or(|(g, _, _)| gap < *g) {
            best = Some((gap, mid, kept));
        }
        if n < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    let (_, threshold, kept) = best.expect("at least one probe");
    Ok(TuneOutcome {
        threshold,
        kept,
        feasible: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::DeterministicEmbedder;
    use std::io::Cursor;

    fn line(id: &str, q: &str) -> String {
        format!(r#"{{"sample_id":"{id}","image":"{id}.png","question":"{q}","answers":["a"]}}"#)
    }

    fn sample(id: &str, q: &str) -> Sample {
        serde_json::from_str(&line(id, q)).unwrap()
    }

    #[test]
    fn parses_in_file_order() {
        let text = [line("s1", "a"), line("s2", "b"), line("s3", "c")].join("\n");
        let s = parse_samples(Cursor::new(text)).unwrap();
        let ids: Vec<_> = s.iter().map(|s| s.sample_id.as_str()).collect();
        assert_eq!(ids, ["s1", "s2", "s3"]);
        assert!(s[0].gold_entity_ids.is_empty());
    }

    #[test]
    fn duplicate_id_names_line() {
        let text = [line("s1", "a"), line("s2", "b"), line("s1", "c")].join("\n");
        match parse_samples(Cursor::new(text)) {
            Err(IngestError::DuplicateId { line, sample_id }) => {
                assert_eq!((line, sample_id.as_str()), (3, "s1"))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_error_reports_line_and_field() {
        let text = format!(
            "{}\n{{\"sample_id\":\"x\",\"image\":\"i\"}}",
            line("s1", "a")
        );
        match parse_samples(Cursor::new(text)) {
            Err(IngestError::Schema { line, detail }) => {
                assert_eq!(line, 2);
                assert!(detail.contains("question"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let mut s = sample("s1", "what is this?");
        s.gold_entity_ids = vec!["Q1".into()];
        s.annotator_answers = Some(vec!["x".into(); 10]);
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(parse_samples(Cursor::new(text)).unwrap(), vec![s]);
    }

    fn spec(dir: &Path, fatal: bool) -> BenchmarkSpec {
        BenchmarkSpec {
            name: "t".into(),
            samples_path: dir.join("samples.jsonl"),
            image_root: dir.to_path_buf(),
            answer_mode: AnswerMode::FreeForm,
            annotator_answers_path: None,
            missing_image_fatal: fatal,
        }
    }

    #[test]
    fn missing_images_skip_or_fail() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("s1.png"), b"img").unwrap();
        std::fs::write(
            dir.path().join("samples.jsonl"),
            [line("s1", "a"), line("s2", "b")].join("\n"),
        )
        .unwrap();
        let loaded = load_benchmark(&spec(dir.path(), false)).unwrap();
        assert_eq!(loaded.samples.len(), 1);
        assert_eq!(loaded.skipped_missing_images, 1);
        assert_eq!(
            PathBuf::from(&loaded.samples[0].image_ref),
            dir.path().join("s1.png")
        );
        assert!(matches!(
            load_benchmark(&spec(dir.path(), true)),
            Err(IngestError::MissingImage { sample_id, .. }) if sample_id == "s2"
        ));
    }

    #[test]
    fn annotator_answers_merge() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("s1.png"), b"img").unwrap();
        std::fs::write(dir.path().join("samples.jsonl"), line("s1", "a")).unwrap();
        std::fs::write(
            dir.path().join("ann.jsonl"),
            r#"{"sample_id":"s1","annotator_answers":["cat","dog"]}"#,
        )
        .unwrap();
        let mut sp = spec(dir.path(), true);
        sp.annotator_answers_path = Some(dir.path().join("ann.jsonl"));
        let loaded = load_benchmark(&sp).unwrap();
        assert_eq!(
            loaded.samples[0].annotator_answers.as_deref(),
            Some(&["cat".to_string(), "dog".to_string()][..])
        );
    }

    #[test]
    fn identical_questions_collapse() {
        let e = DeterministicEmbedder::new(1, 32);
        let s = vec![sample("a", "q"), sample("b", "q"), sample("c", "q")];
        assert_eq!(downsample(&s, &e, 0.9).unwrap().len(), 1);
    }

    #[test]
    fn threshold_one_keeps_distinct() {
        let e = DeterministicEmbedder::new(1, 32);
        let s: Vec<_> = (0..20)
            .map(|i| sample(&format!("s{i}"), &format!("q{i}")))
            .collect();
        let kept = downsample(&s, &e, 1.0).unwrap();
        assert_eq!(kept, s);
        assert!(matches!(
            downsample(&s, &e, f64::NAN),
            Err(IngestError::InvalidThreshold(_))
        ));
    }

    #[test]
    fn tuning_hits_target() {
        let e = DeterministicEmbedder::new(3, 16);
        let s: Vec<_> = (0..300)
            .map(|i| sample(&format!("s{i}"), &format!("q{i}")))
            .collect();
        let m = QuestionMatrix::embed(&s, &e).unwrap();
        let out = tune_threshold(&m, 100, 0.02, 60).unwrap();
        assert!(out.feasible);
        assert!(out.kept.len().abs_diff(100) <= 2);
        for (a, &i) in out.kept.iter().enumerate() {
            for &j in &out.kept[..a] {
                assert!(m.similarity(i, j) <= out.threshold);
            }
        }
    }
}
