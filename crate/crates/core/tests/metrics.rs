use mirag_core::eval::{cover_em, exact_match, prr_at_k, recall_at_k, vqa_score, MapLookup};
use mirag_core::{KbKind, QuerySlot, ScoredHit};
use serde::Deserialize;

#[derive(Deserialize)]
struct AnswerPair {
    prediction: String,
    golds: Vec<String>,
    em: u8,
    cover_em: u8,
}

#[derive(Deserialize)]
struct VqaCase {
    prediction: String,
    annotators: Vec<String>,
    score: f64,
}

#[derive(Deserialize)]
struct Doc {
    doc_id: String,
    entity_id: Option<String>,
    text: String,
}

#[derive(Deserialize)]
struct RetrievalCase {
    hits: Vec<String>,
    k: usize,
    gold_entity_ids: Vec<String>,
    gold_answers: Vec<String>,
    recall: u8,
    prr: u8,
}

#[derive(Deserialize)]
struct Fixtures {
    answer_pairs: Vec<AnswerPair>,
    vqa: Vec<VqaCase>,
    docs: Vec<Doc>,
    retrieval: Vec<RetrievalCase>,
}

fn fixtures() -> Fixtures {
    serde_json::from_str(include_str!("fixtures/metrics.json")).unwrap()
}

#[test]
fn answer_pairs_match_labels() {
    let f = fixtures();
    assert_eq!(f.answer_pairs.len(), 30);
    for c in &f.answer_pairs {
        assert_eq!(
            exact_match(&c.prediction, &c.golds),
            c.em,
            "em {:?}",
            c.prediction
        );
        assert_eq!(
            cover_em(&c.prediction, &c.golds),
            c.cover_em,
            "cem {:?}",
            c.prediction
        );
    }
}

#[test]
fn vqa_cases_match_labels() {
    let f = fixtures();
    assert_eq!(f.vqa.len(), 10);
    for c in &f.vqa {
        assert!(
            (vqa_score(&c.prediction, &c.annotators) - c.score).abs() < 1e-12,
            "{:?}",
            c.prediction
        );
    }
}

#[test]
fn retrieval_cases_match_labels() {
    let f = fixtures();
    let mut lookup = MapLookup::default();
    for d in &f.docs {
        lookup.insert(KbKind::Textual, &d.doc_id, d.entity_id.as_deref(), &d.text);
    }
    assert_eq!(f.retrieval.len(), 20);
    for (i, c) in f.retrieval.iter().enumerate() {
        let hits: Vec<ScoredHit> = c
            .hits
            .iter()
            .enumerate()
            .map(|(r, id)| ScoredHit {
                doc_id: id.clone(),
                score: 1.0 - r as f64 / 100.0,
                source: KbKind::Textual,
                query_slot: QuerySlot::Expanded,
            })
            .collect();
        assert_eq!(
            recall_at_k(&hits, &c.gold_entity_ids, &lookup, c.k).unwrap(),
            c.recall,
            "case {i}"
        );
        assert_eq!(
            prr_at_k(&hits, &c.gold_answers, &lookup, c.k).unwrap(),
            c.prr,
            "case {i}"
        );
    }
}
