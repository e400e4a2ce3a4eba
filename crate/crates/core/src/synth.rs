//! Seeded synthetic benchmark with planted gold documents.
//!
//! Samples fall into three groups:
//!
//! * direct: the gold image-text pair shares the sample's image, so it
//!   surfaces from iteration 0;
//! * planted: the gold pair's text equals the second scripted sub-query of
//!   iteration 2 and its image is unrelated, so only that sub-query finds it;
//! * unreachable: no query or image matches the gold pair.
//!
//! All LLM turns are scripted, so runs are fully deterministic.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embed::{DeterministicEmbedder, Embedder};
use crate::kbstore::{build_multimodal_kb, build_text_kb, KbError, MultimodalEntry, TextPassage};
use crate::llm::{CallTag, PromptKind, ScriptEntry, ScriptedChat};
use crate::media::ImageLoader;
use crate::pipeline::{Engine, PipelineConfig, Sample};
use crate::search::{Encoders, KnowledgeBases};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub seed: u64,
    pub dim: usize,
    pub mm_docs: usize,
    pub text_docs: usize,
    pub samples: usize,
    pub direct: usize,
    pub planted: usize,
    pub iterations: usize,
    /// Iteration whose second sub-query names the planted gold.
    pub planted_iteration: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dim: 64,
            mm_docs: 1000,
            text_docs: 500,
            samples: 200,
            direct: 100,
            planted: 60,
            iterations: 4,
            planted_iteration: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleGroup {
    Direct,
    Planted,
    Unreachable,
}

#[derive(Debug, Clone)]
pub struct SynthBenchmark {
    pub config: SynthConfig,
    pub passages: Vec<TextPassage>,
    pub entries: Vec<MultimodalEntry>,
    pub samples: Vec<Sample>,
    pub groups: HashMap<String, SampleGroup>,
    /// Sample id → gold doc id in the image-text KB.
    pub gold_docs: HashMap<String, String>,
    pub images: HashMap<String, Vec<u8>>,
    pub script: Vec<ScriptEntry>,
}

fn planted_query(sample_id: &str) -> String {
    format!("Which landmark is associated with archive record {sample_id}?")
}

impl SynthBenchmark {
    pub fn generate(config: SynthConfig) -> Self {
        assert!(config.direct + config.planted <= config.samples);
        assert!(config.samples <= config.mm_docs);
        assert!(config.planted_iteration >= 1 && config.planted_iteration <= config.iterations);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut gold_rows: Vec<usize> = (0..config.mm_docs).collect();
        gold_rows.shuffle(&mut rng);

        let mut images = HashMap::new();
        let mut entries: Vec<MultimodalEntry> = (0..config.mm_docs)
            .map(|j| {
                let image_ref = format!("kb/{j:04}.img");
                images.insert(image_ref.clone(), format!("kb-image-{j}").into_bytes());
                MultimodalEntry {
                    doc_id: format!("mm{j:04}"),
                    image_ref,
                    section_text: format!("Encyclopedia section {j} describing entity E{j:04}."),
                    summary: None,
                    entity_id: Some(format!("E{j:04}")),
                }
            })
            .collect();
        let passages = (0..config.text_docs)
            .map(|j| TextPassage {
                doc_id: format!("tx{j:04}"),
                title: format!("Article {j}"),
                text: format!("Passage {j} about topic T{j:04} with answer word w{j}."),
                summary: None,
                entity_id: Some(format!("T{j:04}")),
            })
            .collect();

        let mut samples = Vec::with_capacity(config.samples);
        let mut groups = HashMap::new();
        let mut gold_docs = HashMap::new();
        let mut script = Vec::new();
        for (s, &g) in gold_rows.iter().enumerate().take(config.samples) {
            let sid = format!("s{s:03}");
            let group = if s < config.direct {
                SampleGroup::Direct
            } else if s < config.direct + config.planted {
                SampleGroup::Planted
            } else {
                SampleGroup::Unreachable
            };
            let image_ref = format!("q/{sid}.img");
            let sample_image = format!("sample-image-{sid}").into_bytes();
            match group {
                SampleGroup::Direct => {
                    images.insert(entries[g].image_ref.clone(), sample_image.clone());
                }
                SampleGroup::Planted => entries[g].section_text = planted_query(&sid),
                SampleGroup::Unreachable => {}
            }
            images.insert(image_ref.clone(), sample_image);
            let answer = format!("landmark {g}");
            samples.push(Sample {
                sample_id: sid.clone(),
                image_ref,
                question: format!("What is the name of the landmark in picture {sid}?"),
                gold_answers: vec![answer.clone()],
                gold_entity_ids: vec![format!("E{g:04}")],
                annotator_answers: None,
            });
            groups.insert(sid.clone(), group);
            gold_docs.insert(sid.clone(), entries[g].doc_id.clone());
            script.extend(sample_script(&config, &sid, group, &answer));
        }
        Self {
            config,
            passages,
            entries,
            samples,
            groups,
            gold_docs,
            images,
            script,
        }
    }

    pub fn embedder(&self) -> Arc<dyn Embedder> {
        Arc::new(DeterministicEmbedder::new(
            self.config.seed,
            self.config.dim,
        ))
    }

    pub fn image_loader(&self) -> Arc<dyn ImageLoader> {
        let images = self.images.clone();
        Arc::new(move |r: &str| {
            images
                .get(r)
                .cloned()
                .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, r.to_string()))
        })
    }

    pub fn knowledge_bases(&self) -> Result<KnowledgeBases, KbError> {
        let e = self.embedder();
        let loader = self.image_loader();
        Ok(KnowledgeBases {
            text: Some(Arc::new(build_text_kb(self.passages.clone(), e.as_ref())?)),
            multimodal: Some(Arc::new(build_multimodal_kb(
                self.entries.clone(),
                e.as_ref(),
                e.as_ref(),
                loader.as_ref(),
            )?)),
        })
    }

    pub fn chat(&self) -> ScriptedChat {
        ScriptedChat::from_entries(self.script.clone()).expect("unique script keys")
    }

    pub fn engine(&self, kbs: KnowledgeBases, config: PipelineConfig) -> Engine {
        Engine::new(
            kbs,
            Encoders::shared(self.embedder()),
            Arc::new(self.chat()),
            self.image_loader(),
            config,
        )
    }
}

fn sample_script(
    config: &SynthConfig,
    sid: &str,
    group: SampleGroup,
    answer: &str,
) -> Vec<ScriptEntry> {
    let entry = |kind, iteration, response: String| ScriptEntry {
        key: CallTag::new(kind, sid, iteration),
        response,
    };
    let mut out = vec![entry(
        PromptKind::InitialDescription,
        0,
        format!("A photograph of a landmark, reference {sid}."),
    )];
    for i in 0..=config.iterations {
        out.push(entry(
            PromptKind::RecordGeneration,
            i,
            format!("Record {i} for {sid}: evidence gathered so far."),
        ));
    }
    for i in 1..=config.iterations {
        let q2 = if group == SampleGroup::Planted && i == config.planted_iteration {
            planted_query(sid)
        } else {
            format!("Which region surrounds the landmark in {sid}, step {i}?")
        };
        out.push(entry(
            PromptKind::QueryGeneration,
            i,
            format!(
                "## Analysis\nThe landmark in {sid} is still unidentified.\n## Queries\n\
                 Question 1: What is the history of the landmark in {sid}, step {i}?\n\
                 Question 2: {q2}"
            ),
        ));
    }
    let final_answer = match group {
        SampleGroup::Unreachable => "unknown".to_string(),
        _ => format!("It is {answer}."),
    };
    out.push(entry(
        PromptKind::FinalAnswer,
        config.iterations,
        final_answer,
    ));
    out
}
