//! Answer and retrieval metrics, and report assembly.
//!
//! Retrieval metrics key on `entity_id` stored in KB metadata (recall) or on
//! answer strings found in retrieved text (pseudo-relevance recall). Per
//! sample, `recall_at[k]` and `prr_at[k]` are 1 when the top-k hits of any
//! iteration, from either KB, satisfy the criterion.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kbstore::{KbIndex, KbKind};
use crate::pipeline::{RunResult, RunStatus, Sample};
use crate::search::{KnowledgeBases, ScoredHit};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("hit {doc_id} is not in the {kb:?} KB")]
    UnknownDocId { kb: KbKind, doc_id: String },
    #[error("no gold data for samples: {}", .0.join(", "))]
    GoldMismatch(Vec<String>),
    #[error("no results to evaluate")]
    EmptyResults,
}

/// Lowercase, strip punctuation, collapse whitespace, drop leading articles.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let cleaned: String = lowered
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    let tokens: Vec<&str> = cleaned.split_whitespace().collect();
    let start = tokens
        .iter()
        .take_while(|t| matches!(**t, "a" | "an" | "the"))
        .count();
    let tokens = &tokens[start..];
    tokens.join(" ")
}

/// Golds that normalize to the empty string never match.
pub fn exact_match(prediction: &str, golds: &[String]) -> u8 {
    let p = normalize_answer(prediction);
    u8::from(golds.iter().any(|g| {
        let g = normalize_answer(g);
        !g.is_empty() && g == p
    }))
}

/// 1 when some normalized gold is a substring of the normalized prediction.
pub fn cover_em(prediction: &str, golds: &[String]) -> u8 {
    let p = normalize_answer(prediction);
    u8::from(golds.iter().any(|g| {
        let g = normalize_answer(g);
        !g.is_empty() && p.contains(&g)
    }))
}

/// `min(1, matches / 3)` over the annotator panel.
pub fn vqa_score(prediction: &str, annotator_answers: &[String]) -> f64 {
    let p = normalize_answer(prediction);
    let matches = annotator_answers
        .iter()
        .filter(|a| normalize_answer(a) == p)
        .count();
    (matches as f64 / 3.0).min(1.0)
}

/// Answer-equivalence judge slot (e.g. a learned matcher).
pub trait AnswerJudge: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, prediction: &str, golds: &[String], question: &str) -> f64;
}

/// Reference judge: Cover EM.
#[derive(Debug, Default, Clone, Copy)]
pub struct CoverEmJudge;

impl AnswerJudge for CoverEmJudge {
    fn name(&self) -> &str {
        "cover-em"
    }

    fn score(&self, prediction: &str, golds: &[String], _question: &str) -> f64 {
        cover_em(prediction, golds) as f64
    }
}

/// Resolves hits to KB metadata.
pub trait KbLookup {
    fn entity_of(&self, source: KbKind, doc_id: &str) -> Result<Option<&str>, EvalError>;
    fn text_of(&self, source: KbKind, doc_id: &str) -> Result<&str, EvalError>;
}

fn kb_for(kbs: &KnowledgeBases, source: KbKind) -> Option<&KbIndex> {
    match source {
        KbKind::Textual => kbs.text.as_deref(),
        KbKind::Multimodal => kbs.multimodal.as_deref(),
    }
}

impl KbLookup for KnowledgeBases {
    fn entity_of(&self, source: KbKind, doc_id: &str) -> Result<Option<&str>, EvalError> {
        kb_for(self, source)
            .and_then(|kb| kb.get(doc_id))
            .map(|r| r.entity_id())
            .ok_or_else(|| EvalError::UnknownDocId {
                kb: source,
                doc_id: doc_id.to_string(),
            })
    }

    fn text_of(&self, source: KbKind, doc_id: &str) -> Result<&str, EvalError> {
        kb_for(self, source)
            .and_then(|kb| kb.get(doc_id))
            .map(|r| r.content())
            .ok_or_else(|| EvalError::UnknownDocId {
                kb: source,
                doc_id: doc_id.to_string(),
            })
    }
}

/// In-memory lookup table, keyed by `(source, doc_id)`.
#[derive(Debug, Clone, Default)]
pub struct MapLookup {
    pub entries: HashMap<(KbKind, String), (Option<String>, String)>,
}

impl MapLookup {
    pub fn insert(&mut self, source: KbKind, doc_id: &str, entity: Option<&str>, text: &str) {
        self.entries.insert(
            (source, doc_id.to_string()),
            (entity.map(str::to_string), text.to_string()),
        );
    }

    fn get(&self, source: KbKind, doc_id: &str) -> Result<&(Option<String>, String), EvalError> {
        self.entries
            .get(&(source, doc_id.to_string()))
            .ok_or_else(|| EvalError::UnknownDocId {
                kb: source,
                doc_id: doc_id.to_string(),
            })
    }
}

impl KbLookup for MapLookup {
    fn entity_of(&self, source: KbKind, doc_id: &str) -> Result<Option<&str>, EvalError> {
        Ok(self.get(source, doc_id)?.0.as_deref())
    }

    fn text_of(&self, source: KbKind, doc_id: &str) -> Result<&str, EvalError> {
        Ok(&self.get(source, doc_id)?.1)
    }
}

/// 1 iff one of the top-k hits maps to a gold entity.
pub fn recall_at_k(
    hits: &[ScoredHit],
    gold_entity_ids: &[String],
    lookup: &dyn KbLookup,
    k: usize,
) -> Result<u8, EvalError> {
    for h in hits.iter().take(k) {
        if let Some(e) = lookup.entity_of(h.source, &h.doc_id)? {
            if gold_entity_ids.iter().any(|g| g == e) {
                return Ok(1);
            }
        }
    }
    Ok(0)
}

/// 1 iff one of the top-k hits' text contains a normalized gold answer.
pub fn prr_at_k(
    hits: &[ScoredHit],
    gold_answers: &[String],
    lookup: &dyn KbLookup,
    k: usize,
) -> Result<u8, EvalError> {
    let golds: Vec<String> = gold_answers
        .iter()
        .map(|g| normalize_answer(g))
        .filter(|g| !g.is_empty())
        .collect();
    for h in hits.iter().take(k) {
        let text = normalize_answer(lookup.text_of(h.source, &h.doc_id)?);
        if golds.iter().any(|g| text.contains(g.as_str())) {
            return Ok(1);
        }
    }
    Ok(0)
}

/// Entry `i` is 1 iff the union of each iteration's top-`k_per_iter`
/// image-text hits over iterations `0..=i` contains a gold entity.
pub fn cumulative_recall(
    run: &RunResult,
    gold_entity_ids: &[String],
    lookup: &dyn KbLookup,
    k_per_iter: usize,
) -> Result<Vec<u8>, EvalError> {
    let mut found = 0u8;
    let mut out = Vec::with_capacity(run.traces.len());
    for t in &run.traces {
        if found == 0 {
            found = recall_at_k(&t.mm_hits, gold_entity_ids, lookup, k_per_iter)?;
        }
        out.push(found);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub ks: Vec<usize>,
    pub k_per_iter: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<String>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10],
            k_per_iter: 5,
            judge: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub failed: bool,
    pub em: u8,
    pub cover_em: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vqa_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_score: Option<f64>,
    /// Empty when the sample has no gold entities or no traces.
    pub recall_at: BTreeMap<usize, u8>,
    /// Empty when the sample has no traces.
    pub prr_at: BTreeMap<usize, u8>,
    pub cumulative_recall_by_iter: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n_samples: usize,
    pub n_failed: usize,
    pub em: f64,
    pub cover_em: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vqa_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_score: Option<f64>,
    pub recall_at: BTreeMap<usize, f64>,
    pub prr_at: BTreeMap<usize, f64>,
    pub cumulative_recall_by_iter: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub config: ReportConfig,
    pub aggregates: Aggregates,
    pub rows: Vec<SampleMetrics>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values {
        n += 1;
        sum += v;
    }
    (n > 0).then(|| sum / n as f64)
}

fn any_iteration(
    run: &RunResult,
    f: &mut dyn FnMut(&[ScoredHit]) -> Result<u8, EvalError>,
) -> Result<u8, EvalError> {
    for t in &run.traces {
        if f(&t.text_hits)? == 1 || f(&t.mm_hits)? == 1 {
            return Ok(1);
        }
    }
    Ok(0)
}

fn score_sample(
    run: &RunResult,
    gold: &Sample,
    lookup: &dyn KbLookup,
    cfg: &ReportConfig,
    judge: Option<&dyn AnswerJudge>,
) -> Result<SampleMetrics, EvalError> {
    let failed = run.status == RunStatus::Failed;
    let golds: &[String] = if gold.gold_answers.is_empty() {
        gold.annotator_answers.as_deref().unwrap_or_default()
    } else {
        &gold.gold_answers
    };
    let answer = if failed { "" } else { run.answer.as_str() };
    let answered = !failed && !golds.is_empty();
    let mut m = SampleMetrics {
        sample_id: run.sample_id.clone(),
        failed,
        em: if answered {
            exact_match(answer, golds)
        } else {
            0
        },
        cover_em: if answered { cover_em(answer, golds) } else { 0 },
        vqa_score: gold
            .annotator_answers
            .as_deref()
            .filter(|a| !a.is_empty())
            .map(|a| if failed { 0.0 } else { vqa_score(answer, a) }),
        judge_score: judge.map(|j| {
            if answered {
                j.score(answer, golds, &gold.question)
            } else {
                0.0
            }
        }),
        recall_at: BTreeMap::new(),
        prr_at: BTreeMap::new(),
        cumulative_recall_by_iter: Vec::new(),
    };
    if run.traces.is_empty() {
        return Ok(m);
    }
    for &k in &cfg.ks {
        if !gold.gold_entity_ids.is_empty() {
            let r = any_iteration(run, &mut |hits| {
                recall_at_k(hits, &gold.gold_entity_ids, lookup, k)
            })?;
            m.recall_at.insert(k, r);
        }
        if !golds.is_empty() {
            let p = any_iteration(run, &mut |hits| prr_at_k(hits, golds, lookup, k))?;
            m.prr_at.insert(k, p);
        }
    }
    if !gold.gold_entity_ids.is_empty() {
        m.cumulative_recall_by_iter =
            cumulative_recall(run, &gold.gold_entity_ids, lookup, cfg.k_per_iter)?;
    }
    Ok(m)
}

fn aggregate(rows: &[SampleMetrics], ks: &[usize]) -> Aggregates {
    let depth = rows
        .iter()
        .map(|r| r.cumulative_recall_by_iter.len())
        .max()
        .unwrap_or(0);
    Aggregates {
        n_samples: rows.len(),
        n_failed: rows.iter().filter(|r| r.failed).count(),
        em: mean(rows.iter().map(|r| r.em as f64)).unwrap_or(0.0),
        cover_em: mean(rows.iter().map(|r| r.cover_em as f64)).unwrap_or(0.0),
        vqa_score: mean(rows.iter().filter_map(|r| r.vqa_score)),
        judge_score: mean(rows.iter().filter_map(|r| r.judge_score)),
        recall_at: ks
            .iter()
            .filter_map(|k| {
                mean(
                    rows.iter()
                        .filter_map(|r| r.recall_at.get(k).map(|&v| v as f64)),
                )
                .map(|m| (*k, m))
            })
            .collect(),
        prr_at: ks
            .iter()
            .filter_map(|k| {
                mean(
                    rows.iter()
                        .filter_map(|r| r.prr_at.get(k).map(|&v| v as f64)),
                )
                .map(|m| (*k, m))
            })
            .collect(),
        cumulative_recall_by_iter: (0..depth)
            .map(|i| {
                mean(
                    rows.iter()
                        .filter_map(|r| r.cumulative_recall_by_iter.get(i).map(|&v| v as f64)),
                )
                .unwrap_or(0.0)
            })
            .collect(),
    }
}

/// Scores every result against its gold sample. Rows are sorted by id.
pub fn build_report(
    results: &[RunResult],
    golds: &[Sample],
    lookup: &dyn KbLookup,
    cfg: &ReportConfig,
    judge: Option<&dyn AnswerJudge>,
) -> Result<MetricReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let by_id: HashMap<&str, &Sample> = golds.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let missing: Vec<String> = results
        .iter()
        .filter(|r| !by_id.contains_key(r.sample_id.as_str()))
        .map(|r| r.sample_id.clone())
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    if !missing.is_empty() {
        let mut missing = missing;
        missing.sort();
        return Err(EvalError::GoldMismatch(missing));
    }
    let mut rows = results
        .iter()
        .map(|r| score_sample(r, by_id[r.sample_id.as_str()], lookup, cfg, judge))
        .collect::<Result<Vec<_>, _>>()?;
    rows.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut config = cfg.clone();
    config.judge = judge.map(|j| j.name().to_string());
    Ok(MetricReport {
        schema_version: REPORT_SCHEMA_VERSION,
        aggregates: aggregate(&rows, &cfg.ks),
        config,
        rows,
    })
}

impl MetricReport {
    /// Human-readable summary of the aggregates.
    pub fn to_table(&self) -> String {
        let a = &self.aggregates;
        let mut out = String::new();
        let _ = writeln!(out, "{:<28} {:>10}", "metric", "value");
        let _ = writeln!(out, "{:-<28} {:->10}", "", "");
        let _ = writeln!(out, "{:<28} {:>10}", "samples", a.n_samples);
        let _ = writeln!(out, "{:<28} {:>10}", "failed", a.n_failed);
        let pct = |v: f64| format!("{:.2}", v * 100.0);
        let _ = writeln!(out, "{:<28} {:>10}", "em", pct(a.em));
        let _ = writeln!(out, "{:<28} {:>10}", "cover_em", pct(a.cover_em));
        if let Some(v) = a.vqa_score {
            let _ = writeln!(out, "{:<28} {:>10}", "vqa_score", pct(v));
        }
        if let (Some(v), Some(name)) = (a.judge_score, &self.config.judge) {
            let _ = writeln!(out, "{:<28} {:>10}", format!("judge ({name})"), pct(v));
        }
        for (k, v) in &a.recall_at {
            let _ = writeln!(out, "{:<28} {:>10}", format!("recall@{k}"), pct(*v));
        }
        for (k, v) in &a.prr_at {
            let _ = writeln!(out, "{:<28} {:>10}", format!("prr@{k}"), pct(*v));
        }
        for (i, v) in a.cumulative_recall_by_iter.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:<28} {:>10}",
                format!("cumulative_recall@{} iter {i}", self.config.k_per_iter),
                pct(*v)
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{IterationTrace, MultiQuery, ReasoningRecord};
    use crate::search::QuerySlot;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer("The Eiffel Tower."), "eiffel tower");
        assert_eq!(normalize_answer("  PARIS "), "paris");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("a  b   c"), "b c");
        assert_eq!(normalize_answer("Theater"), "theater");
    }

    #[test]
    fn em_examples() {
        assert_eq!(exact_match("Paris.", &s(&["paris"])), 1);
        assert_eq!(exact_match("The answer is Paris", &s(&["paris"])), 0);
        assert_eq!(exact_match("", &s(&["the"])), 0);
    }

    #[test]
    fn cover_em_examples() {
        assert_eq!(cover_em("The answer is Paris", &s(&["paris"])), 1);
        assert_eq!(cover_em("Parisian food", &s(&["paris"])), 1);
        assert_eq!(cover_em("London", &s(&["paris"])), 0);
        assert_eq!(cover_em("anything", &s(&["the", "."])), 0);
    }

    #[test]
    fn vqa_examples() {
        let mut ann = s(&["cat"; 5]);
        ann.extend(s(&["dog"; 5]));
        assert_eq!(vqa_score("cat", &ann), 1.0);
        let mut one = s(&["cat"]);
        one.extend(s(&["dog"; 9]));
        assert!((vqa_score("cat", &one) - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(vqa_score("bird", &one), 0.0);
    }

    fn hits(ids: &[&str]) -> Vec<ScoredHit> {
        ids.iter()
            .enumerate()
            .map(|(i, id)| ScoredHit {
                doc_id: id.to_string(),
                score: 1.0 - i as f64 * 0.01,
                source: KbKind::Multimodal,
                query_slot: QuerySlot::Expanded,
            })
            .collect()
    }

    fn lookup(n: usize) -> MapLookup {
        let mut l = MapLookup::default();
        for i in 0..n {
            l.insert(
                KbKind::Multimodal,
                &format!("d{i}"),
                Some(&format!("E{i}")),
                &format!("text about thing {i}"),
            );
        }
        l
    }

    #[test]
    fn recall_rank_cutoff() {
        let l = lookup(10);
        let h = hits(&["d0", "d1", "d2", "d3", "d4", "d5", "d6", "d7"]);
        assert_eq!(recall_at_k(&h, &s(&["E2"]), &l, 5).unwrap(), 1);
        assert_eq!(recall_at_k(&h, &s(&["E6"]), &l, 5).unwrap(), 0);
    }

    #[test]
    fn unknown_doc_id() {
        let l = lookup(1);
        assert!(matches!(
            recall_at_k(&hits(&["zz"]), &s(&["E0"]), &l, 5),
            Err(EvalError::UnknownDocId { .. })
        ));
        assert!(matches!(
            prr_at_k(&hits(&["zz"]), &s(&["x"]), &l, 5),
            Err(EvalError::UnknownDocId { .. })
        ));
    }

    #[test]
    fn prr_examples() {
        let mut l = MapLookup::default();
        l.insert(KbKind::Multimodal, "d0", None, "Intro text");
        l.insert(KbKind::Multimodal, "d1", None, "the capital is Paris.");
        let h = hits(&["d0", "d1"]);
        assert_eq!(prr_at_k(&h, &s(&["paris"]), &l, 2).unwrap(), 1);
        assert_eq!(prr_at_k(&h, &s(&["paris"]), &l, 1).unwrap(), 0);
        assert_eq!(prr_at_k(&h, &s(&["london"]), &l, 2).unwrap(), 0);
    }

    fn run_with(mm: Vec<Vec<&str>>) -> RunResult {
        let traces: Vec<IterationTrace> = mm
            .into_iter()
            .enumerate()
            .map(|(i, ids)| IterationTrace {
                iteration: i,
                multi_query: MultiQuery::default(),
                text_hits: vec![],
                mm_hits: hits(&ids),
                record: ReasoningRecord {
                    iteration: i,
                    text: "r".into(),
                    sources: vec![],
                },
                degraded: None,
                timings: None,
            })
            .collect();
        RunResult {
            sample_id: "s".into(),
            status: RunStatus::Completed,
            error: None,
            description: String::new(),
            cumulative_doc_ids: crate::pipeline::cumulative_docs(&traces),
            traces,
            answer: "x".into(),
        }
    }

    #[test]
    fn cumulative_recall_union() {
        let l = lookup(10);
        let r = run_with(vec![
            vec!["d0"],
            vec!["d1"],
            vec!["d5"],
            vec!["d2"],
            vec!["d3"],
        ]);
        assert_eq!(
            cumulative_recall(&r, &s(&["E5"]), &l, 5).unwrap(),
            vec![0, 0, 1, 1, 1]
        );
        assert_eq!(
            cumulative_recall(&r, &s(&["E0"]), &l, 5).unwrap(),
            vec![1; 5]
        );
    }

    fn gold(id: &str, answers: &[&str]) -> Sample {
        Sample {
            sample_id: id.into(),
            image_ref: "i".into(),
            question: "q".into(),
            gold_answers: s(answers),
            gold_entity_ids: vec![],
            annotator_answers: None,
        }
    }

    #[test]
    fn report_means_and_errors() {
        let l = lookup(1);
        let mut a = run_with(vec![vec!["d0"]]);
        a.sample_id = "a".into();
        a.answer = "Paris".into();
        let mut b = a.clone();
        b.sample_id = "b".into();
        b.answer = "London".into();
        let golds = vec![gold("a", &["paris"]), gold("b", &["paris"])];
        let rep =
            build_report(&[a.clone(), b], &golds, &l, &ReportConfig::default(), None).unwrap();
        assert_eq!(rep.aggregates.em, 0.5);
        assert!(matches!(
            build_report(&[], &golds, &l, &ReportConfig::default(), None),
            Err(EvalError::EmptyResults)
        ));
        let mut c = a;
        c.sample_id = "c".into();
        assert!(matches!(
            build_report(&[c], &golds, &l, &ReportConfig::default(), None),
            Err(EvalError::GoldMismatch(ids)) if ids == vec!["c".to_string()]
        ));
    }

    #[test]
    fn failed_sample_scores_zero_but_keeps_retrieval() {
        let l = lookup(3);
        let mut r = run_with(vec![vec!["d1"]]);
        r.status = RunStatus::Failed;
        r.answer = "paris".into();
        let mut g = gold("s", &["paris"]);
        g.gold_entity_ids = s(&["E1"]);
        let rep = build_report(
            &[r],
            &[g],
            &l,
            &ReportConfig::default(),
            Some(&CoverEmJudge),
        )
        .unwrap();
        let row = &rep.rows[0];
        assert_eq!((row.em, row.cover_em), (0, 0));
        assert_eq!(row.judge_score, Some(0.0));
        assert_eq!(row.recall_at.get(&5), Some(&1));
        assert_eq!(rep.config.judge.as_deref(), Some("cover-em"));
    }

    proptest! {
        #[test]
        fn cover_em_dominates_em(p in "[A-Za-z .,!]{0,20}", g in "[A-Za-z .,!]{0,10}") {
            let golds = vec![g];
            prop_assert!(cover_em(&p, &golds) >= exact_match(&p, &golds));
        }
    }
}
