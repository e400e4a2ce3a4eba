//! TOML run configuration. Relative paths resolve against the config file's
//! directory; command-line flags override file values.

use std::path::{Path, PathBuf};

use mirag_core::embed::{ProviderConfig, ProviderKind};
use mirag_core::eval::ReportConfig;
use mirag_core::llm::LlmConfig;
use mirag_core::{AnswerMode, BenchmarkSpec, PipelineConfig, RetrievalBudget};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub budget: RetrievalBudget,
    #[serde(default)]
    pub paths: Paths,
    pub benchmark: Option<BenchmarkSpec>,
    pub providers: Providers,
    pub llm: Option<LlmConfig>,
    #[serde(default)]
    pub pipeline: PipelineOptions,
    #[serde(default)]
    pub eval: ReportConfig,
}

fn default_seed() -> u64 {
    7
}
fn default_iterations() -> usize {
    4
}
fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub text_kb: Option<PathBuf>,
    pub mm_kb: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            text_kb: None,
            mm_kb: None,
            output_dir: default_output_dir(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Providers {
    pub text: ProviderConfig,
    pub image: ProviderConfig,
    /// Text encoder of the image-text KB; defaults to `text`.
    pub mm_text: Option<ProviderConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineOptions {
    pub enable_generation: bool,
    pub demo_pool: Option<PathBuf>,
    pub demo_count: usize,
    pub attach_retrieved_images: bool,
    pub record_timings: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            enable_generation: p.enable_generation,
            demo_pool: None,
            demo_count: p.demo_count,
            attach_retrieved_images: p.attach_retrieved_images,
            record_timings: p.record_timings,
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.fill_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.paths.text_kb, &mut self.paths.mm_kb]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
        resolve(base, &mut self.paths.output_dir);
        if let Some(b) = &mut self.benchmark {
            resolve(base, &mut b.samples_path);
            resolve(base, &mut b.image_root);
            if let Some(p) = &mut b.annotator_answers_path {
                resolve(base, p);
            }
        }
        if let Some(p) = self.llm.as_mut().and_then(|l| l.script_path.as_mut()) {
            resolve(base, p);
        }
        if let Some(p) = &mut self.pipeline.demo_pool {
            resolve(base, p);
        }
    }

    fn fill_seeds(&mut self) {
        let seed = self.seed;
        let p = &mut self.providers;
        for c in [Some(&mut p.text), Some(&mut p.image), p.mm_text.as_mut()]
            .into_iter()
            .flatten()
        {
            if c.kind == ProviderKind::DeterministicReference && c.seed.is_none() {
                c.seed = Some(seed);
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: &dyn std::fmt::Display| CliError::Usage(e.to_string());
        self.providers.text.validate().map_err(|e| usage(&e))?;
        self.providers.image.validate().map_err(|e| usage(&e))?;
        self.mm_text_provider().validate().map_err(|e| usage(&e))?;
        if let Some(l) = &self.llm {
            l.validate().map_err(|e| usage(&e))?;
        }
        if self.parallelism == 0 {
            return Err(CliError::Usage("parallelism must be at least 1".into()));
        }
        Ok(())
    }

    pub fn mm_text_provider(&self) -> &ProviderConfig {
        self.providers
            .mm_text
            .as_ref()
            .unwrap_or(&self.providers.text)
    }

    pub fn answer_mode(&self) -> AnswerMode {
        self.benchmark
            .as_ref()
            .map(|b| b.answer_mode)
            .unwrap_or(AnswerMode::FreeForm)
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            iterations: self.iterations,
            budget: self.budget,
            answer_mode: self.answer_mode(),
            enable_generation: self.pipeline.enable_generation,
            demo_count: self.pipeline.demo_count,
            attach_retrieved_images: self.pipeline.attach_retrieved_images,
            record_timings: self.pipeline.record_timings,
        }
    }

    pub fn results_path(&self) -> PathBuf {
        self.paths.output_dir.join("results.jsonl")
    }

    pub fn report_path(&self) -> PathBuf {
        self.paths.output_dir.join("report.json")
    }
}
