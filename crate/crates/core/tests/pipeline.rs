use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use mirag_core::embed::{DeterministicEmbedder, Embedder};
use mirag_core::kbstore::{build_multimodal_kb, build_text_kb, MultimodalEntry, TextPassage};
use mirag_core::llm::{expand_query, ChatMessage, DemoRecord, LlmError, Part};
use mirag_core::pipeline::{read_results, run_benchmark, write_results};
use mirag_core::synth::{SampleGroup, SynthBenchmark, SynthConfig};
use mirag_core::{
    AnswerMode, CallTag, ChatModel, Encoders, Engine, ImageLoader, KbKind, KnowledgeBases,
    PipelineConfig, PromptKind, QuerySlot, RunStatus, Sample, ScoredHit, ScriptedChat,
};

const DIM: usize = 64;

fn embedder() -> Arc<dyn Embedder> {
    Arc::new(DeterministicEmbedder::new(11, DIM))
}

fn images() -> Arc<dyn ImageLoader> {
    Arc::new(|r: &str| Ok(format!("bytes-of-{r}").into_bytes()))
}

/// Wraps a scripted model, logging calls and optionally failing some tags.
struct Recorder {
    inner: ScriptedChat,
    calls: Mutex<Vec<(CallTag, Vec<ChatMessage>)>>,
    fail: HashMap<CallTag, u16>,
}

impl Recorder {
    fn new(inner: ScriptedChat) -> Self {
        Self {
            inner,
            calls: Mutex::new(Vec::new()),
            fail: HashMap::new(),
        }
    }

    fn tags(&self) -> Vec<CallTag> {
        self.calls
            .lock()
            .unwrap()
            .iter()
            .map(|(t, _)| t.clone())
            .collect()
    }
}

impl ChatModel for Recorder {
    fn chat(&self, tag: &CallTag, messages: &[ChatMessage]) -> Result<String, LlmError> {
        self.calls
            .lock()
            .unwrap()
            .push((tag.clone(), messages.to_vec()));
        if let Some(&status) = self.fail.get(tag) {
            return Err(LlmError::Http {
                status,
                body: "injected".into(),
            });
        }
        self.inner.chat(tag, messages)
    }
}

fn sample(id: &str) -> Sample {
    Sample {
        sample_id: id.into(),
        image_ref: format!("{id}.jpg"),
        question: "What is this building called?".into(),
        gold_answers: vec!["pharos".into()],
        gold_entity_ids: vec![],
        annotator_answers: None,
    }
}

fn text_kb(passages: Vec<TextPassage>) -> KnowledgeBases {
    let e = embedder();
    KnowledgeBases {
        text: Some(Arc::new(build_text_kb(passages, e.as_ref()).unwrap())),
        multimodal: None,
    }
}

fn passages(n: usize) -> Vec<TextPassage> {
    (0..n)
        .map(|i| TextPassage {
            doc_id: format!("p{i:04}"),
            title: format!("Title {i}"),
            text: format!("Filler passage number {i}."),
            summary: None,
            entity_id: None,
        })
        .collect()
}

fn mm_kb(n: usize) -> Arc<mirag_core::KbIndex> {
    let e = embedder();
    let entries: Vec<MultimodalEntry> = (0..n)
        .map(|i| MultimodalEntry {
            doc_id: format!("m{i:04}"),
            image_ref: format!("kb{i}.jpg"),
            section_text: format!("Section {i}."),
            summary: None,
            entity_id: None,
        })
        .collect();
    Arc::new(build_multimodal_kb(entries, e.as_ref(), e.as_ref(), images().as_ref()).unwrap())
}

fn script(sid: &str, n: usize, description: &str, queries: &str) -> ScriptedChat {
    let mut s = ScriptedChat::default();
    add_script(&mut s, sid, n, description, queries);
    s
}

fn add_script(s: &mut ScriptedChat, sid: &str, n: usize, description: &str, queries: &str) {
    s.insert(
        CallTag::new(PromptKind::InitialDescription, sid, 0),
        description,
    );
    for i in 0..=n {
        s.insert(
            CallTag::new(PromptKind::RecordGeneration, sid, i),
            format!("record {i} of {sid}"),
        );
    }
    for i in 1..=n {
        s.insert(CallTag::new(PromptKind::QueryGeneration, sid, i), queries);
    }
    s.insert(CallTag::new(PromptKind::FinalAnswer, sid, n), "The Pharos.");
}

const TWO_QUERIES: &str = "## Analysis\nNeed more.\n## Queries\nQuestion 1: Who built the tower?\nQuestion 2: Where is the tower located?";

fn engine(kbs: KnowledgeBases, chat: Arc<dyn ChatModel>, config: PipelineConfig) -> Engine {
    Engine::new(kbs, Encoders::shared(embedder()), chat, images(), config)
}

fn slot_counts(hits: &[ScoredHit]) -> HashMap<QuerySlot, usize> {
    let mut m = HashMap::new();
    for h in hits {
        *m.entry(h.query_slot).or_default() += 1;
    }
    m
}

#[test]
fn initial_record_finds_description_match() {
    let s = sample("s1");
    let expanded = expand_query(&s.question, "a red lighthouse");
    let mut ps = passages(9);
    ps.push(TextPassage {
        doc_id: "lighthouse".into(),
        title: "Lighthouse".into(),
        text: "Long article body.".into(),
        summary: Some(expanded.clone()),
        entity_id: None,
    });
    let chat = Arc::new(script("s1", 0, "a red lighthouse", TWO_QUERIES));
    let eng = engine(text_kb(ps), chat, PipelineConfig::default());
    let mut state = eng.prepare(&s).unwrap();
    let (d, trace) = eng.initial_record(&s, &mut state).unwrap();
    assert_eq!(d, "a red lighthouse");
    assert_eq!(trace.iteration, 0);
    assert_eq!(trace.multi_query.expanded, expanded);
    assert!(trace.multi_query.generated.is_empty());
    assert_eq!(trace.record.text, "record 0 of s1");
    assert!(trace.text_hits.len() <= 20 && trace.mm_hits.len() <= 10);
    assert_eq!(trace.text_hits[0].doc_id, "lighthouse");
    assert!((trace.text_hits[0].score - 1.0).abs() < 1e-6);
    assert!(trace
        .text_hits
        .iter()
        .all(|h| h.query_slot == QuerySlot::Initial));
    assert!(trace.degraded.is_none());
}

#[test]
fn empty_description_falls_back_to_question() {
    let s = sample("s1");
    let chat = Arc::new(script("s1", 0, "   ", TWO_QUERIES));
    let eng = engine(text_kb(passages(30)), chat, PipelineConfig::default());
    let mut state = eng.prepare(&s).unwrap();
    let (d, trace) = eng.initial_record(&s, &mut state).unwrap();
    assert_eq!(d, "");
    assert_eq!(trace.multi_query.expanded, s.question);
    assert!(trace.degraded.is_some());
}

#[test]
fn failed_description_call_degrades() {
    let s = sample("s1");
    let mut rec = Recorder::new(script("s1", 0, "unused", TWO_QUERIES));
    rec.fail
        .insert(CallTag::new(PromptKind::InitialDescription, "s1", 0), 503);
    let cfg = PipelineConfig {
        iterations: 0,
        ..Default::default()
    };
    let eng = engine(text_kb(passages(30)), Arc::new(rec), cfg);
    let r = eng.run_sample(&s);
    assert_eq!(r.status, RunStatus::Completed, "{:?}", r.error);
    assert_eq!(r.traces[0].multi_query.expanded, s.question);
    assert!(r.traces[0].degraded.as_deref().unwrap().contains("503"));
}

#[test]
fn two_generated_queries_split_budget() {
    let s = sample("s1");
    let chat = Arc::new(script("s1", 1, "a tower", TWO_QUERIES));
    let kbs = KnowledgeBases {
        text: text_kb(passages(1000)).text,
        multimodal: Some(mm_kb(1000)),
    };
    let eng = engine(kbs, chat, PipelineConfig::default());
    let mut state = eng.prepare(&s).unwrap();
    eng.initial_record(&s, &mut state).unwrap();
    let t = eng.iterate_once(&s, &mut state, 1).unwrap();
    assert_eq!(
        t.multi_query.generated,
        ["Who built the tower?", "Where is the tower located?"]
    );
    assert_eq!(
        t.multi_query.expanded,
        expand_query(&s.question, "record 0 of s1")
    );
    let tc = slot_counts(&t.text_hits);
    let mc = slot_counts(&t.mm_hits);
    assert_eq!(
        [
            QuerySlot::Expanded,
            QuerySlot::Generated1,
            QuerySlot::Generated2
        ]
        .map(|k| tc[&k]),
        [10, 5, 5]
    );
    assert_eq!(
        [
            QuerySlot::Expanded,
            QuerySlot::Generated1,
            QuerySlot::Generated2
        ]
        .map(|k| mc[&k]),
        [5, 3, 2]
    );
    assert_eq!(t.record.text, "record 1 of s1");
    // The record prompt sees only this iteration's hits.
    assert_eq!(t.record.sources.len(), 30);
}

#[test]
fn malformed_generation_twice_is_expansion_only() {
    let s = sample("s1");
    let rec = Arc::new(Recorder::new(script(
        "s1",
        1,
        "a tower",
        "I cannot help with that.",
    )));
    let kbs = KnowledgeBases {
        text: text_kb(passages(100)).text,
        multimodal: Some(mm_kb(100)),
    };
    let eng = engine(kbs, rec.clone(), PipelineConfig::default());
    let mut state = eng.prepare(&s).unwrap();
    eng.initial_record(&s, &mut state).unwrap();
    let t = eng.iterate_once(&s, &mut state, 1).unwrap();
    assert!(t.multi_query.generated.is_empty());
    assert!(t.degraded.is_some());
    assert_eq!(t.text_hits.len(), 20);
    assert_eq!(t.mm_hits.len(), 10);
    assert!(t
        .text_hits
        .iter()
        .chain(&t.mm_hits)
        .all(|h| h.query_slot == QuerySlot::Expanded));
    let gen_calls = rec
        .tags()
        .iter()
        .filter(|t| t.kind == PromptKind::QueryGeneration)
        .count();
    assert_eq!(gen_calls, 2);
}

fn small_synth(planted_iteration: usize) -> SynthBenchmark {
    SynthBenchmark::generate(SynthConfig {
        seed: 5,
        dim: DIM,
        mm_docs: 300,
        text_docs: 100,
        samples: 12,
        direct: 4,
        planted: 4,
        iterations: 2,
        planted_iteration,
    })
}

#[test]
fn planted_gold_needs_generated_query() {
    let b = small_synth(1);
    let kbs = b.knowledge_bases().unwrap();
    let full = b.engine(
        kbs.clone(),
        PipelineConfig {
            iterations: 2,
            ..Default::default()
        },
    );
    let ablated = b.engine(
        kbs,
        PipelineConfig {
            iterations: 2,
            enable_generation: false,
            ..Default::default()
        },
    );
    let e = b.embedder();
    let loader = b.image_loader();
    for s in b
        .samples
        .iter()
        .filter(|s| b.groups[&s.sample_id] == SampleGroup::Planted)
    {
        let gold = &b.gold_docs[&s.sample_id];
        let with = full.run_sample(s);
        let without = ablated.run_sample(s);
        let has = |hits: &[ScoredHit]| hits.iter().any(|h| &h.doc_id == gold);
        assert!(has(&with.traces[1].mm_hits), "{}", s.sample_id);
        assert!(!has(&without.traces[1].mm_hits), "{}", s.sample_id);

        // Direct recomputation: the second sub-query ranks the gold first.
        let q = e
            .embed_text(&with.traces[1].multi_query.generated[1])
            .unwrap();
        let img = e.embed_image(&loader.load(&s.image_ref).unwrap()).unwrap();
        let score = |entry: &MultimodalEntry| {
            let t = e.embed_text(&entry.section_text).unwrap();
            let i = e
                .embed_image(&loader.load(&entry.image_ref).unwrap())
                .unwrap();
            (q.dot(&t) + img.dot(&i)) / 2.0
        };
        let mut ranked: Vec<(f64, &str)> = b
            .entries
            .iter()
            .map(|en| (score(en), en.doc_id.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        assert_eq!(ranked[0].1, gold);
    }
}

#[test]
fn default_run_has_five_traces_and_monotone_unions() {
    let s = sample("s1");
    let kbs = KnowledgeBases {
        text: text_kb(passages(200)).text,
        multimodal: Some(mm_kb(200)),
    };
    let rec = Arc::new(Recorder::new(script("s1", 4, "a tower", TWO_QUERIES)));
    let eng = engine(kbs, rec.clone(), PipelineConfig::default());
    let r = eng.run_sample(&s);
    assert_eq!(r.status, RunStatus::Completed, "{:?}", r.error);
    assert_eq!(r.traces.len(), 5);
    let iters: Vec<usize> = r.records().map(|x| x.iteration).collect();
    assert_eq!(iters, [0, 1, 2, 3, 4]);
    assert_eq!(r.answer, "The Pharos.");
    assert_eq!(r.description, "a tower");
    for w in r.cumulative_doc_ids.windows(2) {
        assert!(w[0].text.iter().all(|d| w[1].text.contains(d)));
        assert!(w[0].multimodal.iter().all(|d| w[1].multimodal.contains(d)));
    }

    // Query generation sees every earlier record; the final answer sees all.
    let calls = rec.calls.lock().unwrap();
    let (_, gen3) = calls
        .iter()
        .find(|(t, _)| t.kind == PromptKind::QueryGeneration && t.iteration == 3)
        .unwrap();
    let text = gen3[0].text();
    assert!((0..3).all(|i| text.contains(&format!("record {i} of s1"))));
    assert!(!text.contains("record 3 of s1"));
    let (_, fin) = calls.last().unwrap();
    assert!((0..5).all(|i| fin[0].text().contains(&format!("record {i} of s1"))));
    assert!(matches!(fin[0].parts[0], Part::Image(_)));
}

#[test]
fn zero_iterations_is_retrieve_then_read() {
    let s = sample("s1");
    let rec = Arc::new(Recorder::new(script("s1", 0, "a tower", TWO_QUERIES)));
    let eng = engine(
        text_kb(passages(50)),
        rec.clone(),
        PipelineConfig {
            iterations: 0,
            ..Default::default()
        },
    );
    let r = eng.run_sample(&s);
    assert_eq!(r.status, RunStatus::Completed);
    assert_eq!(r.traces.len(), 1);
    assert!(rec
        .tags()
        .iter()
        .all(|t| t.kind != PromptKind::QueryGeneration));
}

#[test]
fn generation_disabled_never_asks_for_subqueries() {
    let s = sample("s1");
    let rec = Arc::new(Recorder::new(script("s1", 3, "a tower", TWO_QUERIES)));
    let eng = engine(
        text_kb(passages(50)),
        rec.clone(),
        PipelineConfig {
            iterations: 3,
            enable_generation: false,
            ..Default::default()
        },
    );
    let r = eng.run_sample(&s);
    assert_eq!(r.traces.len(), 4);
    assert!(r.traces.iter().all(|t| t.multi_query.generated.is_empty()));
    assert!(rec
        .tags()
        .iter()
        .all(|t| t.kind != PromptKind::QueryGeneration));
}

#[test]
fn mid_run_failure_keeps_partial_traces() {
    let s = sample("s1");
    let mut rec = Recorder::new(script("s1", 4, "a tower", TWO_QUERIES));
    rec.fail
        .insert(CallTag::new(PromptKind::RecordGeneration, "s1", 2), 401);
    let eng = engine(
        text_kb(passages(50)),
        Arc::new(rec),
        PipelineConfig::default(),
    );
    let r = eng.run_sample(&s);
    assert_eq!(r.status, RunStatus::Failed);
    assert_eq!(r.traces.len(), 2);
    assert_eq!(r.cumulative_doc_ids.len(), 2);
    assert!(r.error.unwrap().contains("401"));
    assert!(r.answer.is_empty());
}

#[test]
fn exact_entity_mode_uses_fewshot_prompt() {
    let s = sample("s1");
    let mut chat = script("s1", 1, "a tower", TWO_QUERIES);
    chat.insert(
        CallTag::new(PromptKind::FewshotEm, "s1", 1),
        "Pharos of Alexandria",
    );
    let rec = Arc::new(Recorder::new(chat));
    let pool: Vec<DemoRecord> = (0..5)
        .map(|i| DemoRecord {
            image: format!("demo{i}.jpg"),
            context: format!("context {i}"),
            question: format!("demo question {i}"),
            answer: format!("answer {i}"),
        })
        .collect();
    let eng = engine(
        text_kb(passages(50)),
        rec.clone(),
        PipelineConfig {
            iterations: 1,
            answer_mode: AnswerMode::ExactEntity,
            ..Default::default()
        },
    )
    .with_demo_pool(pool);
    let r = eng.run_sample(&s);
    assert_eq!(r.answer, "Pharos of Alexandria");
    let calls = rec.calls.lock().unwrap();
    let (tag, msgs) = calls.last().unwrap();
    assert_eq!(tag.kind, PromptKind::FewshotEm);
    let images = msgs[0]
        .parts
        .iter()
        .filter(|p| matches!(p, Part::Image(_)))
        .count();
    assert_eq!(images, 4);
    assert!(msgs[0].text().contains("Three examples are shown below:"));
}

fn bench_samples(n: usize) -> (Vec<Sample>, ScriptedChat) {
    let mut chat = ScriptedChat::default();
    let mut samples = Vec::new();
    for i in 0..n {
        let sid = format!("b{i:02}");
        add_script(&mut chat, &sid, 1, "a tower", TWO_QUERIES);
        samples.push(sample(&sid));
    }
    samples.reverse();
    (samples, chat)
}

#[test]
fn benchmark_output_sorted_and_resumable() {
    let (samples, chat) = bench_samples(10);
    let rec = Arc::new(Recorder::new(chat));
    let kbs = text_kb(passages(50));
    let cfg = PipelineConfig {
        iterations: 1,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("results.jsonl");

    // A previous interrupted run: four completed, one failed, one torn line.
    let eng = engine(kbs.clone(), rec.clone(), cfg.clone());
    let mut prior: Vec<_> = samples[..5].iter().map(|s| eng.run_sample(s)).collect();
    prior[4].status = RunStatus::Failed;
    let failed_id = prior[4].sample_id.clone();
    write_results(&out, &prior).unwrap();
    std::fs::OpenOptions::new()
        .append(true)
        .open(&out)
        .and_then(|mut f| std::io::Write::write_all(&mut f, b"{\"sample_id\":\"b0"))
        .unwrap();
    rec.calls.lock().unwrap().clear();

    let summary = run_benchmark(&eng, &samples, 4, &out, true).unwrap();
    assert_eq!(summary.total, 10);
    assert_eq!(summary.resumed, 4);
    assert_eq!(summary.completed, 10);
    assert_eq!(summary.failed, 0);

    let rerun: std::collections::HashSet<String> =
        rec.tags().into_iter().map(|t| t.sample_id).collect();
    assert_eq!(rerun.len(), 6);
    assert!(rerun.contains(&failed_id));
    assert!(prior[..4].iter().all(|r| !rerun.contains(&r.sample_id)));

    let results = read_results(&out).unwrap();
    let ids: Vec<&str> = results.iter().map(|r| r.sample_id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(ids, sorted);
    assert_eq!(ids.len(), 10);
}

#[test]
fn scripted_runs_are_byte_identical() {
    let b = small_synth(2);
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for (run, par) in [(0, 1), (1, 4)] {
        let eng = b.engine(
            b.knowledge_bases().unwrap(),
            PipelineConfig {
                iterations: 2,
                ..Default::default()
            },
        );
        let path = dir.path().join(format!("run{run}.jsonl"));
        run_benchmark(&eng, &b.samples, par, &path, false).unwrap();
        files.push(std::fs::read(path).unwrap());
    }
    assert!(!files[0].is_empty());
    assert_eq!(files[0], files[1]);
}

#[test]
fn text_only_and_mm_only_kbs() {
    let b = small_synth(1);
    let kbs = b.knowledge_bases().unwrap();
    let cfg = PipelineConfig {
        iterations: 2,
        ..Default::default()
    };
    let only_text = b.engine(
        KnowledgeBases {
            multimodal: None,
            ..kbs.clone()
        },
        cfg.clone(),
    );
    let r = only_text.run_sample(&b.samples[0]);
    assert!(r
        .traces
        .iter()
        .all(|t| t.mm_hits.is_empty() && t.text_hits.len() == 20));
    let only_mm = b.engine(KnowledgeBases { text: None, ..kbs }, cfg);
    let r = only_mm.run_sample(&b.samples[0]);
    assert!(r
        .traces
        .iter()
        .all(|t| t.text_hits.is_empty() && t.mm_hits.len() == 10));
    assert!(r
        .traces
        .iter()
        .flat_map(|t| &t.mm_hits)
        .all(|h| h.source == KbKind::Multimodal));
}
