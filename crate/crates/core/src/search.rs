//! Exact inner-product search and joint retrieval over the two KBs.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{l2_normalize, EmbedError, Embedder, EmbeddingVector};
use crate::kbstore::{KbIndex, KbKind};
use crate::pipeline::MultiQuery;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("query has dimension {got}, KB expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("query embedding failed: {0}")]
    Embed(#[from] EmbedError),
}

/// Which query of the multi-query produced a hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuerySlot {
    Initial,
    Expanded,
    #[serde(rename = "generated-1")]
    Generated1,
    #[serde(rename = "generated-2")]
    Generated2,
}

impl QuerySlot {
    /// Precedence when two slots return the same doc at equal score.
    fn rank(self) -> u8 {
        match self {
            QuerySlot::Initial => 0,
            QuerySlot::Expanded => 1,
            QuerySlot::Generated1 => 2,
            QuerySlot::Generated2 => 3,
        }
    }

    pub fn generated(index: usize) -> QuerySlot {
        if index == 0 {
            QuerySlot::Generated1
        } else {
            QuerySlot::Generated2
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub doc_id: String,
    pub score: f64,
    pub source: KbKind,
    pub query_slot: QuerySlot,
}

/// Score descending, then doc_id ascending.
pub fn hit_order(a: &ScoredHit, b: &ScoredHit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.doc_id.cmp(&b.doc_id))
}

/// Per-iteration retrieval budget across the whole multi-query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalBudget {
    pub text_k: usize,
    pub mm_k: usize,
}

impl Default for RetrievalBudget {
    fn default() -> Self {
        Self {
            text_k: 20,
            mm_k: 10,
        }
    }
}

impl RetrievalBudget {
    /// Twice as many passages as image-text pairs.
    pub fn with_mm_k(mm_k: usize) -> Self {
        Self {
            text_k: 2 * mm_k,
            mm_k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SlotQuota {
    pub text_k: usize,
    pub mm_k: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetAllocation {
    pub expanded: SlotQuota,
    /// One quota per generated sub-query, in slot order.
    pub generated: Vec<SlotQuota>,
}

impl BudgetAllocation {
    pub fn total(&self) -> SlotQuota {
        self.generated
            .iter()
            .fold(self.expanded, |acc, q| SlotQuota {
                text_k: acc.text_k + q.text_k,
                mm_k: acc.mm_k + q.mm_k,
            })
    }
}

fn split(total: usize, n_generated: usize) -> (usize, Vec<usize>) {
    if n_generated == 0 {
        return (total, vec![]);
    }
    let expanded = total.div_ceil(2);
    let rest = total - expanded;
    let base = rest / n_generated;
    let extra = rest % n_generated;
    let generated = (0..n_generated)
        .map(|i| base + usize::from(i < extra))
        .collect();
    (expanded, generated)
}

/// Expansion takes the ceiling half of each budget; generated sub-queries
/// split the rest evenly, remainder to the first.
pub fn allocate_budget(budget: RetrievalBudget, n_generated: usize) -> BudgetAllocation {
    let n = n_generated.min(2);
    let (et, gt) = split(budget.text_k, n);
    let (em, gm) = split(budget.mm_k, n);
    BudgetAllocation {
        expanded: SlotQuota {
            text_k: et,
            mm_k: em,
        },
        generated: gt
            .into_iter()
            .zip(gm)
            .map(|(text_k, mm_k)| SlotQuota { text_k, mm_k })
            .collect(),
    }
}

/// Exact top-k by inner product over every row of `kb`.
pub fn mips_topk(
    kb: &KbIndex,
    query: &EmbeddingVector,
    k: usize,
    slot: QuerySlot,
) -> Result<Vec<ScoredHit>, SearchError> {
    if query.dim() != kb.dim() {
        return Err(SearchError::DimensionMismatch {
            expected: kb.dim(),
            got: query.dim(),
        });
    }
    if k == 0 || kb.is_empty() {
        return Ok(vec![]);
    }
    let q = query.values();
    let mut scored: Vec<(f64, usize)> = (0..kb.len())
        .map(|i| {
            let row = kb.row(i);
            let s: f64 = row.iter().zip(q).map(|(&a, &b)| a as f64 * b).sum();
            (s, i)
        })
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        b.0.total_cmp(&a.0)
            .then_with(|| kb.record(a.1).doc_id().cmp(kb.record(b.1).doc_id()))
    };
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    Ok(scored
        .into_iter()
        .map(|(score, i)| ScoredHit {
            doc_id: kb.record(i).doc_id().to_string(),
            score,
            source: kb.kind(),
            query_slot: slot,
        })
        .collect())
}

/// Mean of the text-to-text and image-to-image similarities.
pub fn mm_score(text_sim: f64, image_sim: f64) -> f64 {
    (text_sim + image_sim) / 2.0
}

/// Top-k passages for a text query.
pub fn search_text(
    kb: &KbIndex,
    query_text: &str,
    k: usize,
    text_provider: &dyn Embedder,
    slot: QuerySlot,
) -> Result<Vec<ScoredHit>, SearchError> {
    let q = l2_normalize(&text_provider.embed_text(query_text)?)?;
    mips_topk(kb, &q, k, slot)
}

/// Top-k image-text pairs for `(fixed image ‖ query text)`. Reported scores
/// are the average of the two similarities, i.e. the raw inner product / 2.
pub fn search_multimodal(
    kb: &KbIndex,
    fixed_image_vec: &EmbeddingVector,
    query_text: &str,
    k: usize,
    text_provider: &dyn Embedder,
    slot: QuerySlot,
) -> Result<Vec<ScoredHit>, SearchError> {
    let t = l2_normalize(&text_provider.embed_text(query_text)?)?;
    let q = fixed_image_vec.concat(&t);
    let mut hits = mips_topk(kb, &q, k, slot)?;
    for h in &mut hits {
        h.score /= 2.0;
    }
    Ok(hits)
}

/// Union by doc_id keeping the best score (ties: earliest slot), sorted and
/// truncated to `cap`.
pub fn dedup_merge(hit_lists: &[Vec<ScoredHit>], cap: usize) -> Vec<ScoredHit> {
    let mut best: HashMap<&str, &ScoredHit> = HashMap::new();
    for hit in hit_lists.iter().flatten() {
        best.entry(hit.doc_id.as_str())
            .and_modify(|cur| {
                let better = hit.score > cur.score
                    || (hit.score == cur.score && hit.query_slot.rank() < cur.query_slot.rank());
                if better {
                    *cur = hit;
                }
            })
            .or_insert(hit);
    }
    let mut out: Vec<ScoredHit> = best.into_values().cloned().collect();
    out.sort_by(hit_order);
    out.truncate(cap);
    out
}

/// Query-side encoders: one per KB text space plus the image encoder.
#[derive(Clone)]
pub struct Encoders {
    pub text: Arc<dyn Embedder>,
    pub mm_text: Arc<dyn Embedder>,
    pub image: Arc<dyn Embedder>,
}

impl Encoders {
    /// One provider for everything.
    pub fn shared(provider: Arc<dyn Embedder>) -> Self {
        Self {
            text: provider.clone(),
            mm_text: provider.clone(),
            image: provider,
        }
    }
}

/// The KBs searched each iteration; either may be disabled for ablations.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBases {
    pub text: Option<Arc<KbIndex>>,
    pub multimodal: Option<Arc<KbIndex>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JointHits {
    pub text: Vec<ScoredHit>,
    pub multimodal: Vec<ScoredHit>,
}

/// Retrieves from one KB for every query slot, unions, and backfills freed
/// quota (duplicate collisions or failed sub-queries) from the expanded
/// query's next-ranked hits.
type SlotSearch<'a> = dyn Fn(&str, usize, QuerySlot) -> Result<Vec<ScoredHit>, SearchError> + 'a;

fn search_one_kb(
    run: &SlotSearch<'_>,
    expanded_slot: QuerySlot,
    multi_query: &MultiQuery,
    expanded_quota: usize,
    generated_quotas: &[usize],
    cap: usize,
) -> Result<Vec<ScoredHit>, SearchError> {
    if cap == 0 {
        return Ok(vec![]);
    }
    let deep = run(&multi_query.expanded, cap, expanded_slot)?;
    let head = expanded_quota.min(deep.len());
    let mut lists = vec![deep[..head].to_vec()];
    for (i, (query, &quota)) in multi_query
        .generated
        .iter()
        .zip(generated_quotas)
        .enumerate()
    {
        if quota == 0 {
            continue;
        }
        match run(query, quota, QuerySlot::generated(i)) {
            Ok(hits) => lists.push(hits),
            Err(e) => tracing::warn!(slot = i + 1, "sub-query search failed, backfilling: {e}"),
        }
    }
    let mut merged = dedup_merge(&lists, cap);
    let mut present: HashSet<String> = merged.iter().map(|h| h.doc_id.clone()).collect();
    for hit in &deep[head..] {
        if merged.len() >= cap {
            break;
        }
        if present.insert(hit.doc_id.clone()) {
            merged.push(hit.clone());
        }
    }
    merged.sort_by(hit_order);
    Ok(merged)
}

/// Joint search of both KBs with every query of the multi-query. The first
/// slot is tagged `expanded_slot` (`Initial` at iteration 0).
pub fn joint_search(
    kbs: &KnowledgeBases,
    multi_query: &MultiQuery,
    fixed_image_vec: &EmbeddingVector,
    budget: RetrievalBudget,
    encoders: &Encoders,
    expanded_slot: QuerySlot,
) -> Result<JointHits, SearchError> {
    let alloc = allocate_budget(budget, multi_query.generated.len());
    let mut out = JointHits::default();
    if let Some(kb) = &kbs.text {
        let run = |q: &str, k: usize, slot| search_text(kb, q, k, encoders.text.as_ref(), slot);
        let quotas: Vec<usize> = alloc.generated.iter().map(|q| q.text_k).collect();
        out.text = search_one_kb(
            &run,
            expanded_slot,
            multi_query,
            alloc.expanded.text_k,
            &quotas,
            budget.text_k,
        )?;
    }
    if let Some(kb) = &kbs.multimodal {
        let run = |q: &str, k: usize, slot| {
            search_multimodal(kb, fixed_image_vec, q, k, encoders.mm_text.as_ref(), slot)
        };
        let quotas: Vec<usize> = alloc.generated.iter().map(|q| q.mm_k).collect();
        out.multimodal = search_one_kb(
            &run,
            expanded_slot,
            multi_query,
            alloc.expanded.mm_k,
            &quotas,
            budget.mm_k,
        )?;
    }
    Ok(out)
}

#[derive(Serialize)]
struct HitLine<'a> {
    doc_id: &'a str,
    score: f64,
    source: KbKind,
    query_slot: QuerySlot,
    iteration: usize,
}

/// One JSON object per hit: doc_id, score, source, query_slot, iteration.
pub fn write_hits_jsonl(
    mut w: impl Write,
    iteration: usize,
    hits: &[ScoredHit],
) -> std::io::Result<()> {
    for h in hits {
        let line = HitLine {
            doc_id: &h.doc_id,
            score: h.score,
            source: h.source,
            query_slot: h.query_slot,
            iteration,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
