//! Configuration resolution: JSON config file, environment variables, and
//! flags, merged with precedence flags > env > file.

use anyhow::{anyhow, bail, Context, Result};
use personaforge::backend::{Backend, HttpBackend, HttpBackendConfig, MockBackend, ResponseCache};
use personaforge::domain::InstructionSet;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const CONFIG_ENV: &str = "PERSONAFORGE_CONFIG";
pub const SEED_ENV: &str = "PERSONAFORGE_SEED";

/// One backend entry in the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// Scripted mock loaded from a JSON script file.
    Mock {
        script: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model_id: Option<String>,
    },
    /// OpenAI-compatible chat-completions endpoint.
    Http {
        model: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        base_url: Option<String>,
        /// Name of the env var holding the API key (default OPENAI_API_KEY).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        api_key_env: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_retries: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_secs: Option<u64>,
    },
}

/// The config file shape. Every field is optional; flags and env override.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
pub struct FileConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub max_in_flight: Option<usize>,
    #[serde(default)]
    pub cache_stochastic: Option<bool>,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendSpec>,
    #[serde(default)]
    pub task_instruction: Option<String>,
    #[serde(default)]
    pub likert_instruction: Option<String>,
    #[serde(default)]
    pub augment_instruction: Option<String>,
    #[serde(default)]
    pub summary_instruction: Option<String>,
    #[serde(default)]
    pub sentinel_start: Option<String>,
    #[serde(default)]
    pub sentinel_end: Option<String>,
    /// Paths to template files overriding the packaged meta-prompt texts.
    #[serde(default)]
    pub meta_template_file: Option<PathBuf>,
    #[serde(default)]
    pub meta_task_instruct_file: Option<PathBuf>,
    /// Paths to template files overriding the packaged baseline prompts.
    #[serde(default)]
    pub description_prompt_file: Option<PathBuf>,
    #[serde(default)]
    pub p2_file: Option<PathBuf>,
    /// Optimize/score toward `low` trait expression instead of `high`.
    #[serde(default)]
    pub target_keying: Option<String>,
}

/// Fully resolved configuration for one invocation.
#[derive(Clone, Debug)]
pub struct ResolvedConfig {
    pub seed: u64,
    pub max_in_flight: usize,
    pub cache_stochastic: bool,
    pub backends: BTreeMap<String, BackendSpec>,
    pub instructions: InstructionSet,
    pub target_keying: personaforge::domain::TraitKeying,
    /// Custom baseline templates, when the config overrides the packaged
    /// ones.
    pub description_prompt_template: Option<String>,
    pub p2_template: Option<String>,
    /// Where the file config came from, for the echo.
    pub config_path: Option<PathBuf>,
}

impl ResolvedConfig {
    /// Merge file + env + flag seed according to precedence.
    pub fn load(config_flag: Option<&Path>, seed_flag: Option<u64>) -> Result<Self> {
        let config_path = config_flag
            .map(PathBuf::from)
            .or_else(|| std::env::var(CONFIG_ENV).ok().map(PathBuf::from));
        let file: FileConfig = match &config_path {
            Some(path) => {
                let raw = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read config {}", path.display()))?;
                serde_json::from_str(&raw)
                    .with_context(|| format!("invalid config {}", path.display()))?
            }
            None => FileConfig::default(),
        };
        let env_seed = std::env::var(SEED_ENV)
            .ok()
            .map(|raw| {
                raw.parse::<u64>()
                    .map_err(|_| anyhow!("{SEED_ENV} must be an unsigned integer, got `{raw}`"))
            })
            .transpose()?;
        let seed = seed_flag.or(env_seed).or(file.seed).unwrap_or(0);

        let mut instructions = InstructionSet::default();
        if let Some(text) = &file.task_instruction {
            instructions.task_instruction = text.clone();
        }
        if let Some(text) = &file.likert_instruction {
            instructions.likert_instruction = text.clone();
        }
        if let Some(text) = &file.augment_instruction {
            instructions.augment_instruction = text.clone();
        }
        if let Some(text) = &file.summary_instruction {
            instructions.summary_instruction = text.clone();
        }
        if let Some(text) = &file.sentinel_start {
            instructions.sentinel_start = text.clone();
        }
        if let Some(text) = &file.sentinel_end {
            instructions.sentinel_end = text.clone();
        }
        if let Some(path) = &file.meta_template_file {
            instructions.meta_template = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read meta template {}", path.display()))?;
        }
        if let Some(path) = &file.meta_task_instruct_file {
            instructions.meta_task_instruct = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read meta task instruct {}", path.display()))?;
        }
        let read_template = |path: &Option<PathBuf>| -> Result<Option<String>> {
            path.as_ref()
                .map(|p| {
                    std::fs::read_to_string(p)
                        .with_context(|| format!("cannot read template {}", p.display()))
                })
                .transpose()
        };
        let target_keying = match file.target_keying.as_deref() {
            None | Some("high") => personaforge::domain::TraitKeying::High,
            Some("low") => personaforge::domain::TraitKeying::Low,
            Some(other) => bail!("target_keying must be `high` or `low`, got `{other}`"),
        };

        Ok(ResolvedConfig {
            seed,
            max_in_flight: file.max_in_flight.unwrap_or(8),
            cache_stochastic: file.cache_stochastic.unwrap_or(false),
            backends: file.backends,
            instructions,
            target_keying,
            description_prompt_template: read_template(&file.description_prompt_file)?,
            p2_template: read_template(&file.p2_file)?,
            config_path,
        })
    }

    /// Look up a backend reference: a name from the config file, or a path
    /// to a mock script JSON. `cache_dir` attaches a response cache.
    pub fn resolve_backend(
        &self,
        reference: &str,
        cache_dir: Option<&Path>,
    ) -> Result<Arc<Backend>> {
        let spec = match self.backends.get(reference) {
            Some(spec) => spec.clone(),
            None => {
                let path = Path::new(reference);
                if path.exists() && path.extension().is_some_and(|e| e == "json") {
                    BackendSpec::Mock { script: path.to_path_buf(), model_id: None }
                } else {
                    bail!(
                        "unknown backend `{reference}`: not in the config file and not a mock \
                         script path"
                    );
                }
            }
        };
        self.build_backend(reference, &spec, cache_dir)
    }

    fn build_backend(
        &self,
        reference: &str,
        spec: &BackendSpec,
        cache_dir: Option<&Path>,
    ) -> Result<Arc<Backend>> {
        let mut backend = match spec {
            BackendSpec::Mock { script, model_id } => {
                let script_path = match &self.config_path {
                    // Script paths in a config file resolve relative to it.
                    Some(config) if script.is_relative() => config
                        .parent()
                        .map(|dir| dir.join(script))
                        .unwrap_or_else(|| script.clone()),
                    _ => script.clone(),
                };
                let transport = MockBackend::from_file(&script_path)
                    .map_err(|e| anyhow!(e))
                    .with_context(|| format!("backend `{reference}`"))?;
                let model_id = model_id.clone().unwrap_or_else(|| reference.to_string());
                Backend::new(model_id, Box::new(transport))
            }
            BackendSpec::Http { model, base_url, api_key_env, max_retries, timeout_secs } => {
                let base_url = base_url
                    .clone()
                    .or_else(|| std::env::var("OPENAI_BASE_URL").ok())
                    .unwrap_or_else(|| "https://api.openai.com/v1".to_string());
                let key_env = api_key_env.clone().unwrap_or_else(|| "OPENAI_API_KEY".to_string());
                let api_key = std::env::var(&key_env).ok();
                let mut config = HttpBackendConfig { base_url, api_key, ..Default::default() };
                if let Some(retries) = max_retries {
                    config.max_retries = *retries;
                }
                if let Some(timeout) = timeout_secs {
                    config.timeout_secs = *timeout;
                }
                Backend::new(model.clone(), Box::new(HttpBackend::new(config)))
            }
        };
        if let Some(dir) = cache_dir {
            let cache = ResponseCache::open(dir).map_err(|e| anyhow!(e))?;
            backend = backend.with_cache(cache);
        }
        Ok(Arc::new(backend.with_stochastic_caching(self.cache_stochastic)))
    }

    /// Spec actually used for a reference (for the resolved-config echo).
    pub fn spec_for(&self, reference: &str) -> Option<BackendSpec> {
        self.backends.get(reference).cloned().or_else(|| {
            let path = Path::new(reference);
            (path.exists() && path.extension().is_some_and(|e| e == "json")).then(|| {
                BackendSpec::Mock { script: path.to_path_buf(), model_id: None }
            })
        })
    }

    /// Write the merged view next to a command's artifacts so every run is
    /// auditable.
    pub fn echo(&self, out_dir: &Path, command: &str, backend_refs: &[&str]) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let backends: BTreeMap<&str, Option<BackendSpec>> = backend_refs
            .iter()
            .map(|r| (*r, self.spec_for(r)))
            .collect();
        let echo = serde_json::json!({
            "command": command,
            "seed": self.seed,
            "max_in_flight": self.max_in_flight,
            "cache_stochastic": self.cache_stochastic,
            "config_file": self.config_path.as_ref().map(|p| p.display().to_string()),
            "backends": backends,
        });
        let path = out_dir.join("resolved-config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&echo)?)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(())
    }
}
