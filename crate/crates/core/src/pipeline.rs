//! The iterative retrieve-and-reason loop.
//!
//! Per sample:
//!
//! 1. Describe the image for the question, expand `[question, description]`,
//!    search both KBs at full budget, and synthesize record `R_0`.
//! 2. For `i = 1..=N`: expand the question with `R_{i-1}`, generate two
//!    sub-queries from all records so far, search both KBs with the
//!    multi-query under the split budget, and synthesize `R_i` from the new
//!    hits only.
//! 3. Answer from the question, the image, and `R_0..R_N`.
//!
//! Steps within a sample are strictly sequential; samples run in parallel.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{l2_normalize, EmbedError, EmbeddingVector};
use crate::kbstore::KbIndex;
use crate::llm::{
    self, build_fewshot_prompt, expand_query, parse_subqueries, render_prompt, select_demos,
    CallTag, ChatMessage, ChatModel, Demo, DemoRecord, ImageData, LlmError, Part, PromptKind,
};
use crate::media::ImageLoader;
use crate::search::{
    joint_search, Encoders, JointHits, KnowledgeBases, QuerySlot, RetrievalBudget, ScoredHit,
    SearchError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot load image {image_ref}: {source}")]
    Image {
        image_ref: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("model returned an empty reasoning record at iteration {0}")]
    EmptyRecord(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    #[serde(rename = "image")]
    pub image_ref: String,
    pub question: String,
    #[serde(rename = "answers", default)]
    pub gold_answers: Vec<String>,
    #[serde(rename = "entity_ids", default)]
    pub gold_entity_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_answers: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningRecord {
    pub iteration: usize,
    pub text: String,
    /// Doc ids whose content was given to the model for this record.
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MultiQuery {
    pub expanded: String,
    pub generated: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub retrieval_ms: f64,
    pub llm_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub multi_query: MultiQuery,
    pub text_hits: Vec<ScoredHit>,
    pub mm_hits: Vec<ScoredHit>,
    pub record: ReasoningRecord,
    /// Set when a step fell back (empty description, unparseable sub-queries).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed,
}

/// Doc ids retrieved so far, per KB.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CumulativeDocs {
    pub text: Vec<String>,
    pub multimodal: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub sample_id: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub description: String,
    pub traces: Vec<IterationTrace>,
    pub answer: String,
    /// Entry `i` is the sorted union of doc ids from iterations `0..=i`.
    pub cumulative_doc_ids: Vec<CumulativeDocs>,
}

impl RunResult {
    pub fn records(&self) -> impl Iterator<Item = &ReasoningRecord> {
        self.traces.iter().map(|t| &t.record)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerMode {
    FreeForm,
    ExactEntity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub iterations: usize,
    pub budget: RetrievalBudget,
    pub answer_mode: AnswerMode,
    /// False runs the expansion-only ablation.
    pub enable_generation: bool,
    pub demo_count: usize,
    /// Attach the images of retrieved image-text pairs to record prompts.
    pub attach_retrieved_images: bool,
    /// Wall-clock timings make dumps non-reproducible, so they are opt-in.
    pub record_timings: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            iterations: 4,
            budget: RetrievalBudget::default(),
            answer_mode: AnswerMode::FreeForm,
            enable_generation: true,
            demo_count: llm::DEFAULT_DEMO_COUNT,
            attach_retrieved_images: false,
            record_timings: false,
        }
    }
}

/// Per-sample state carried across iterations.
#[derive(Debug, Clone)]
pub struct SampleState {
    pub image_bytes: Vec<u8>,
    pub image_vec: EmbeddingVector,
    pub records: Vec<ReasoningRecord>,
}

/// Everything one run needs: KBs, encoders, chat model, and image access.
pub struct Engine {
    pub kbs: KnowledgeBases,
    pub encoders: Encoders,
    pub llm: Arc<dyn ChatModel>,
    pub images: Arc<dyn ImageLoader>,
    pub demo_pool: Vec<DemoRecord>,
    pub config: PipelineConfig,
}

struct Clock {
    enabled: bool,
    retrieval: f64,
    llm: f64,
}

impl Clock {
    fn new(enabled: bool) -> Self {
        Self {
            enabled,
            retrieval: 0.0,
            llm: 0.0,
        }
    }

    fn time<T>(&mut self, llm: bool, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        let ms = start.elapsed().as_secs_f64() * 1e3;
        if llm {
            self.llm += ms;
        } else {
            self.retrieval += ms;
        }
        out
    }

    fn finish(&self) -> Option<Timings> {
        self.enabled.then_some(Timings {
            retrieval_ms: self.retrieval,
            llm_ms: self.llm,
        })
    }
}

fn join_records<'a>(records: impl IntoIterator<Item = &'a ReasoningRecord>) -> String {
    records
        .into_iter()
        .map(|r| r.text.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

impl Engine {
    pub fn new(
        kbs: KnowledgeBases,
        encoders: Encoders,
        llm: Arc<dyn ChatModel>,
        images: Arc<dyn ImageLoader>,
        config: PipelineConfig,
    ) -> Self {
        Self {
            kbs,
            encoders,
            llm,
            images,
            demo_pool: Vec::new(),
            config,
        }
    }

    pub fn with_demo_pool(mut self, pool: Vec<DemoRecord>) -> Self {
        self.demo_pool = pool;
        self
    }

    fn record_for(&self, hit: &ScoredHit) -> Option<&crate::kbstore::KbRecord> {
        let kb: &KbIndex = match hit.source {
            crate::kbstore::KbKind::Textual => self.kbs.text.as_deref()?,
            crate::kbstore::KbKind::Multimodal => self.kbs.multimodal.as_deref()?,
        };
        kb.get(&hit.doc_id)
    }

    /// Knowledge block for the record prompt: passages first, then
    /// image-text pairs, each in score order.
    pub fn format_knowledge(&self, description: Option<&str>, hits: &JointHits) -> String {
        let mut out = String::new();
        if let Some(d) = description.filter(|d| !d.trim().is_empty()) {
            out.push_str(&format!("Description: {}\n", d.trim()));
        }
        let mut n = 0;
        for hit in hits.text.iter().chain(&hits.multimodal) {
            let Some(rec) = self.record_for(hit) else {
                continue;
            };
            n += 1;
            let body = rec.content().trim();
            match (hit.source, rec.title()) {
                (crate::kbstore::KbKind::Multimodal, _) => {
                    out.push_str(&format!("[{n}] (image-text pair) {body}\n"))
                }
                (_, Some(title)) => out.push_str(&format!("[{n}] {title}: {body}\n")),
                (_, None) => out.push_str(&format!("[{n}] {body}\n")),
            }
        }
        if out.is_empty() {
            out.push_str("(no knowledge retrieved)\n");
        }
        out
    }

    fn retrieved_images(&self, hits: &JointHits) -> Vec<Part> {
        if !self.config.attach_retrieved_images {
            return vec![];
        }
        hits.multimodal
            .iter()
            .filter_map(|h| self.record_for(h)?.image_ref())
            .filter_map(|r| match self.images.load(r) {
                Ok(bytes) => Some(Part::Image(ImageData::Bytes(bytes))),
                Err(e) => {
                    tracing::warn!(image_ref = r, "skipping retrieved image: {e}");
                    None
                }
            })
            .collect()
    }

    fn synthesize_record(
        &self,
        sample: &Sample,
        state: &SampleState,
        iteration: usize,
        description: Option<&str>,
        hits: &JointHits,
    ) -> Result<ReasoningRecord, PipelineError> {
        let knowledge = self.format_knowledge(description, hits);
        let prompt = render_prompt(
            PromptKind::RecordGeneration,
            &[("question", &sample.question), ("knowledge", &knowledge)],
        )?;
        let mut parts = vec![Part::Image(ImageData::Bytes(state.image_bytes.clone()))];
        parts.push(Part::Text(prompt));
        parts.extend(self.retrieved_images(hits));
        let tag = CallTag::new(PromptKind::RecordGeneration, &sample.sample_id, iteration);
        let text = self.llm.chat(&tag, &[ChatMessage::user(parts)])?;
        if text.trim().is_empty() {
            return Err(PipelineError::EmptyRecord(iteration));
        }
        let sources = hits
            .text
            .iter()
            .chain(&hits.multimodal)
            .map(|h| h.doc_id.clone())
            .collect();
        Ok(ReasoningRecord {
            iteration,
            text,
            sources,
        })
    }

    /// Loads the sample image and computes its fixed embedding once.
    pub fn prepare(&self, sample: &Sample) -> Result<SampleState, PipelineError> {
        let image_bytes =
            self.images
                .load(&sample.image_ref)
                .map_err(|source| PipelineError::Image {
                    image_ref: sample.image_ref.clone(),
                    source,
                })?;
        let image_vec = l2_normalize(&self.encoders.image.embed_image(&image_bytes)?)?;
        Ok(SampleState {
            image_bytes,
            image_vec,
            records: Vec::new(),
        })
    }

    /// Iteration 0: description, `[Q, D]` expansion, full-budget search, `R_0`.
    pub fn initial_record(
        &self,
        sample: &Sample,
        state: &mut SampleState,
    ) -> Result<(String, IterationTrace), PipelineError> {
        let mut clock = Clock::new(self.config.record_timings);
        let prompt = render_prompt(
            PromptKind::InitialDescription,
            &[("question", &sample.question)],
        )?;
        let tag = CallTag::new(PromptKind::InitialDescription, &sample.sample_id, 0);
        let msg = ChatMessage::user(vec![
            Part::Image(ImageData::Bytes(state.image_bytes.clone())),
            Part::Text(prompt),
        ]);
        let mut degraded = None;
        let description = match clock.time(true, || self.llm.chat(&tag, &[msg])) {
            Ok(d) if !d.trim().is_empty() => d,
            Ok(_) => {
                degraded = Some("empty description; expanded query is the bare question".into());
                String::new()
            }
            Err(e @ LlmError::ScriptMiss { .. }) => return Err(e.into()),
            Err(e) => {
                tracing::warn!(sample = %sample.sample_id, "description failed: {e}");
                degraded = Some(format!(
                    "description failed ({e}); expanded query is the bare question"
                ));
                String::new()
            }
        };
        let expanded = if description.is_empty() {
            sample.question.clone()
        } else {
            expand_query(&sample.question, &description)
        };
        let multi_query = MultiQuery {
            expanded,
            generated: vec![],
        };
        let hits = clock.time(false, || {
            joint_search(
                &self.kbs,
                &multi_query,
                &state.image_vec,
                self.config.budget,
                &self.encoders,
                QuerySlot::Initial,
            )
        })?;
        let record = clock.time(true, || {
            self.synthesize_record(sample, state, 0, Some(&description), &hits)
        })?;
        state.records.push(record.clone());
        Ok((
            description,
            IterationTrace {
                iteration: 0,
                multi_query,
                text_hits: hits.text,
                mm_hits: hits.multimodal,
                record,
                degraded,
                timings: clock.finish(),
            },
        ))
    }

    /// Generates sub-queries, retrying once on unparseable output. `None`
    /// means the iteration proceeds expansion-only.
    fn generate_subqueries(
        &self,
        sample: &Sample,
        state: &SampleState,
        iteration: usize,
    ) -> Result<Option<Vec<String>>, PipelineError> {
        let records = join_records(&state.records);
        let prompt = render_prompt(
            PromptKind::QueryGeneration,
            &[
                ("question", &sample.question),
                ("reasoning_records", &records),
            ],
        )?;
        let tag = CallTag::new(PromptKind::QueryGeneration, &sample.sample_id, iteration);
        let msgs = [ChatMessage::user_text(prompt)];
        for attempt in 0..2 {
            let raw = self.llm.chat(&tag, &msgs)?;
            match parse_subqueries(&raw) {
                Ok(set) => return Ok(Some(set.questions)),
                Err(e) => tracing::debug!(sample = %sample.sample_id, iteration, attempt, "{e}"),
            }
        }
        Ok(None)
    }

    /// One refinement iteration (`i >= 1`).
    pub fn iterate_once(
        &self,
        sample: &Sample,
        state: &mut SampleState,
        iteration: usize,
    ) -> Result<IterationTrace, PipelineError> {
        let mut clock = Clock::new(self.config.record_timings);
        let latest = state
            .records
            .last()
            .map(|r| r.text.as_str())
            .unwrap_or_default();
        let expanded = expand_query(&sample.question, latest);
        let mut degraded = None;
        let generated = if self.config.enable_generation {
            match clock.time(true, || self.generate_subqueries(sample, state, iteration))? {
                Some(qs) => qs,
                None => {
                    degraded =
                        Some("sub-query generation unparseable twice; expansion only".into());
                    vec![]
                }
            }
        } else {
            vec![]
        };
        let multi_query = MultiQuery {
            expanded,
            generated,
        };
        let hits = clock.time(false, || {
            joint_search(
                &self.kbs,
                &multi_query,
                &state.image_vec,
                self.config.budget,
                &self.encoders,
                QuerySlot::Expanded,
            )
        })?;
        let record = clock.time(true, || {
            self.synthesize_record(sample, state, iteration, None, &hits)
        })?;
        state.records.push(record.clone());
        Ok(IterationTrace {
            iteration,
            multi_query,
            text_hits: hits.text,
            mm_hits: hits.multimodal,
            record,
            degraded,
            timings: clock.finish(),
        })
    }

    fn final_answer(&self, sample: &Sample, state: &SampleState) -> Result<String, PipelineError> {
        let records = join_records(&state.records);
        let image = ImageData::Bytes(state.image_bytes.clone());
        let iteration = self.config.iterations;
        match self.config.answer_mode {
            AnswerMode::FreeForm => {
                let prompt = render_prompt(
                    PromptKind::FinalAnswer,
                    &[
                        ("question", &sample.question),
                        ("reasoning_records", &records),
                    ],
                )?;
                let tag = CallTag::new(PromptKind::FinalAnswer, &sample.sample_id, iteration);
                let msg = ChatMessage::user(vec![Part::Image(image), Part::Text(prompt)]);
                Ok(self.llm.chat(&tag, &[msg])?)
            }
            AnswerMode::ExactEntity => {
                let demos = self.pick_demos(&sample.question)?;
                let msgs = build_fewshot_prompt(&sample.question, image, &records, &demos)?;
                let tag = CallTag::new(PromptKind::FewshotEm, &sample.sample_id, iteration);
                Ok(self.llm.chat(&tag, &msgs)?)
            }
        }
    }

    fn pick_demos(&self, question: &str) -> Result<Vec<Demo>, PipelineError> {
        if self.demo_pool.is_empty() || self.config.demo_count == 0 {
            return Ok(vec![]);
        }
        let idx = select_demos(
            question,
            &self.demo_pool,
            self.encoders.text.as_ref(),
            self.config.demo_count,
        )?;
        idx.into_iter()
            .map(|i| {
                let d = &self.demo_pool[i];
                let bytes = self
                    .images
                    .load(&d.image)
                    .map_err(|source| PipelineError::Image {
                        image_ref: d.image.clone(),
                        source,
                    })?;
                Ok(Demo {
                    image: ImageData::Bytes(bytes),
                    context: d.context.clone(),
                    question: d.question.clone(),
                    answer: d.answer.clone(),
                })
            })
            .collect()
    }

    fn run_steps(
        &self,
        sample: &Sample,
        description: &mut String,
        traces: &mut Vec<IterationTrace>,
    ) -> Result<String, PipelineError> {
        let mut state = self.prepare(sample)?;
        let (d, trace0) = self.initial_record(sample, &mut state)?;
        *description = d;
        traces.push(trace0);
        for i in 1..=self.config.iterations {
            traces.push(self.iterate_once(sample, &mut state, i)?);
        }
        self.final_answer(sample, &state)
    }

    /// Runs the full loop. Never fails: errors produce a `Failed` result
    /// that keeps every trace completed before the error.
    pub fn run_sample(&self, sample: &Sample) -> RunResult {
        let mut description = String::new();
        let mut traces = Vec::new();
        let outcome = self.run_steps(sample, &mut description, &mut traces);
        let cumulative_doc_ids = cumulative_docs(&traces);
        let (status, error, answer) = match outcome {
            Ok(a) => (RunStatus::Completed, None, a),
            Err(e) => {
                tracing::warn!(sample = %sample.sample_id, "sample failed: {e}");
                (RunStatus::Failed, Some(e.to_string()), String::new())
            }
        };
        RunResult {
            sample_id: sample.sample_id.clone(),
            status,
            error,
            description,
            traces,
            answer,
            cumulative_doc_ids,
        }
    }

    /// Runs samples on up to `parallelism` threads, invoking `on_result` on
    /// the calling thread as each finishes. Returns results sorted by id.
    pub fn run_many(
        &self,
        samples: &[Sample],
        parallelism: usize,
        mut on_result: impl FnMut(&RunResult) -> std::io::Result<()>,
    ) -> std::io::Result<Vec<RunResult>> {
        let next = AtomicUsize::new(0);
        let workers = parallelism.clamp(1, samples.len().max(1));
        let mut results = Vec::with_capacity(samples.len());
        std::thread::scope(|scope| -> std::io::Result<()> {
            let (tx, rx) = mpsc::channel();
            for _ in 0..workers {
                let tx = tx.clone();
                let next = &next;
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(sample) = samples.get(i) else { break };
                    if tx.send(self.run_sample(sample)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            for r in rx {
                on_result(&r)?;
                results.push(r);
            }
            Ok(())
        })?;
        results.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        Ok(results)
    }
}

/// Prefix unions of retrieved doc ids, one entry per trace.
pub fn cumulative_docs(traces: &[IterationTrace]) -> Vec<CumulativeDocs> {
    let mut text = BTreeSet::new();
    let mut mm = BTreeSet::new();
    traces
        .iter()
        .map(|t| {
            text.extend(t.text_hits.iter().map(|h| h.doc_id.clone()));
            mm.extend(t.mm_hits.iter().map(|h| h.doc_id.clone()));
            CumulativeDocs {
                text: text.iter().cloned().collect(),
                multimodal: mm.iter().cloned().collect(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub total: usize,
    pub resumed: usize,
    pub completed: usize,
    pub failed: usize,
}

/// Reads a RunResult JSONL dump. A trailing partial line (interrupted
/// write) is ignored.
pub fn read_results(path: impl AsRef<Path>) -> std::io::Result<Vec<RunResult>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => out.push(r),
            Err(e) => tracing::warn!("skipping unreadable result line: {e}"),
        }
    }
    Ok(out)
}

pub fn write_results(path: impl AsRef<Path>, results: &[RunResult]) -> std::io::Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut w = std::io::BufWriter::new(fs::File::create(&tmp)?);
        for r in results {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    fs::rename(tmp, path)
}

/// Runs every sample not already completed in `output`, appending each
/// result as it finishes, then rewrites the file sorted by sample id.
pub fn run_benchmark(
    engine: &Engine,
    samples: &[Sample],
    parallelism: usize,
    output: impl AsRef<Path>,
    resume: bool,
) -> Result<BenchmarkSummary, PipelineError> {
    let output = output.as_ref();
    let mut kept: Vec<RunResult> = if resume && output.exists() {
        read_results(output)?
            .into_iter()
            .filter(|r| r.status == RunStatus::Completed)
            .collect()
    } else {
        Vec::new()
    };
    let wanted: HashSet<&str> = samples.iter().map(|s| s.sample_id.as_str()).collect();
    kept.retain(|r| wanted.contains(r.sample_id.as_str()));
    let done: HashSet<String> = kept.iter().map(|r| r.sample_id.clone()).collect();
    let resumed = done.len();
    write_results(output, &kept)?;

    let todo: Vec<Sample> = samples
        .iter()
        .filter(|s| !done.contains(&s.sample_id))
        .cloned()
        .collect();
    let mut file = fs::OpenOptions::new().append(true).open(output)?;
    let total = todo.len();
    let mut finished = 0usize;
    let fresh = engine.run_many(&todo, parallelism, |r| {
        serde_json::to_writer(&mut file, r)?;
        file.write_all(b"\n")?;
        file.flush()?;
        finished += 1;
        tracing::info!(
            sample = %r.sample_id,
            status = ?r.status,
            "[{finished}/{total}] sample finished"
        );
        Ok(())
    })?;
    drop(file);

    let failed = fresh
        .iter()
        .filter(|r| r.status == RunStatus::Failed)
        .count();
    let mut all = kept;
    all.extend(fresh);
    all.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    write_results(output, &all)?;
    Ok(BenchmarkSummary {
        total: samples.len(),
        resumed,
        completed: all.len() - failed,
        failed,
    })
}
