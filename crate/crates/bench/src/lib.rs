//! Fixture builders shared by the benchmarks.

use mirag_core::embed::EmbeddingVector;
use mirag_core::kbstore::{KbIndex, KbKind, KbRecord, TextPassage};
use mirag_core::search::{QuerySlot, ScoredHit};
use mirag_core::Sample;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Textual KB of `n` uniform random rows.
pub fn random_kb(n: usize, dim: usize, seed: u64) -> KbIndex {
    let mut rng = StdRng::seed_from_u64(seed);
    let matrix = (0..n * dim)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let meta = (0..n)
        .map(|i| {
            KbRecord::Text(TextPassage {
                doc_id: format!("d{i:07}"),
                title: String::new(),
                text: String::new(),
                summary: None,
                entity_id: None,
            })
        })
        .collect();
    KbIndex::from_parts(KbKind::Textual, dim, matrix, meta, "bench".into())
        .expect("consistent parts")
}

pub fn random_query(dim: usize, seed: u64) -> EmbeddingVector {
    let mut rng = StdRng::seed_from_u64(seed);
    EmbeddingVector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// `lists` hit lists of length `len` drawn from `universe` doc ids, so they overlap.
pub fn overlapping_hits(
    lists: usize,
    len: usize,
    universe: usize,
    seed: u64,
) -> Vec<Vec<ScoredHit>> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..lists)
        .map(|l| {
            let mut hits: Vec<ScoredHit> = (0..len)
                .map(|_| ScoredHit {
                    doc_id: format!("d{}", rng.random_range(0..universe)),
                    score: rng.random(),
                    source: KbKind::Textual,
                    query_slot: QuerySlot::generated(l),
                })
                .collect();
            hits.sort_by(|a, b| b.score.total_cmp(&a.score));
            hits
        })
        .collect()
}

/// Questions with frequent near-repeats, as seen in templated benchmarks.
pub fn templated_samples(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n)
        .map(|i| Sample {
            sample_id: format!("q{i:05}"),
            image_ref: "q.png".into(),
            question: format!(
                "What is the name of landmark {} seen from side {}?",
                rng.random_range(0..n / 2 + 1),
                rng.random_range(0..4)
            ),
            gold_answers: vec![],
            gold_entity_ids: vec![],
            annotator_answers: None,
        })
        .collect()
}
