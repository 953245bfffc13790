use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use frida_core::genloop::GenerationConfig;
use frida_core::providers::{ProviderConfig, ProviderKind};
use serde::{Deserialize, Serialize};

/// Everything a pipeline command needs. Relative paths in a config file
/// resolve against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub ontology: PathBuf,
    pub templates: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub ratio: f64,
    pub generator: ProviderConfig,
    pub subject: ProviderConfig,
    pub embedder: ProviderConfig,
    pub generation: GenerationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            ontology: "data/ontology.json".into(),
            templates: "data/templates.json".into(),
            out: "out".into(),
            seed: 0,
            ratio: 0.9,
            generator: ProviderConfig::new(ProviderKind::Openai),
            subject: ProviderConfig::new(ProviderKind::Openai),
            embedder: ProviderConfig::new(ProviderKind::Hash),
            generation: GenerationConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config: PipelineConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.ontology, &mut config.templates, &mut config.out] {
            resolve(base, p);
        }
        for provider in [&mut config.generator, &mut config.subject, &mut config.embedder] {
            for p in [&mut provider.cache_dir, &mut provider.script_path].into_iter().flatten() {
                resolve(base, p);
            }
        }
        Ok(config)
    }

    /// Applies `FRIDA_GENERATOR_*`, `FRIDA_SUBJECT_*` and `FRIDA_EMBEDDER_*`.
    pub fn apply_env(&mut self) -> Result<()> {
        self.generator.apply_env("FRIDA_GENERATOR")?;
        self.subject.apply_env("FRIDA_SUBJECT")?;
        self.embedder.apply_env("FRIDA_EMBEDDER")?;
        Ok(())
    }

    pub fn require_inputs(&self) -> Result<()> {
        for (what, p) in [("ontology", &self.ontology), ("templates", &self.templates)] {
            if !p.is_file() {
                bail!("{what} file {} does not exist", p.display());
            }
        }
        Ok(())
    }
}
