//! Run configuration: a `key = value` file, `REASONFORGE_<ROLE>_URL` and
//! `REASONFORGE_<ROLE>_KEY` environment variables, and command-line
//! overrides, applied in that order over the defaults.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! filter.fraction = 0.1        # or filter.tau = 0.02
//! llm.url = https://gateway.example/api
//! llm.model = some-model
//! mock.captioner = true
//! ```
//!
//! Credentials are never serialized: [`RunConfig::redacted_json`] replaces
//! them and [`RunConfig::hash_extras`] leaves them out.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

use crate::backends::http::EndpointConfig;
use crate::backends::mock::{
    MockCaptioner, MockChat, MockEditor, MockGrounder, MockImageEmbedder, MockInpainter, MockTextEmbedder,
};
use crate::backends::remote::{
    RemoteCaptioner, RemoteChat, RemoteEditor, RemoteEntities, RemoteGrounder, RemoteImageEmbedder,
    RemoteInpainter, RemoteTextEmbedder,
};
use crate::backends::{
    Backend, BackendError, BackendSuite, Caption, CaptionBackend, ChatBackend, ChatRequest, ConditionedEditBackend,
    Embedders, EntityBackend, GroundingBackend, ImageEmbedder, InpaintBackend, LexiconExtractor, RawDetection,
    ResponseCache, TextEmbedder,
};
use crate::hashing::sha256_hex;
use crate::imaging::{FilterMode, Picture};
use crate::pipeline::GenerationConfig;
use crate::records::BoundingBox;

/// Backend roles, in the order they appear in environment variable names.
pub const ROLES: [&str; 9] = [
    "llm",
    "captioner",
    "extractor",
    "detector",
    "inpainter",
    "editor",
    "clip_image",
    "clip_text",
    "dino_image",
];

pub const ENV_PREFIX: &str = "REASONFORGE_";
pub const DEFAULT_LLM_MODEL: &str = "gpt-3.5-turbo";
pub const DEFAULT_TIMEOUT_SECS: u64 = 120;
const REDACTED: &str = "<redacted>";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Syntax { path: PathBuf, line: usize, message: String },
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {message}")]
    InvalidValue { key: String, value: String, message: String },
    #[error("no endpoint configured for {0}; set {0}.url, REASONFORGE_{upper}_URL or use --mock", upper = .0.to_uppercase())]
    MissingEndpoint(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Clone, Default, PartialEq)]
pub struct Endpoint {
    pub url: Option<String>,
    pub key: Option<String>,
    pub version: Option<String>,
}

impl fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Endpoint")
            .field("url", &self.url)
            .field("key", &self.key.as_ref().map(|_| REDACTED))
            .field("version", &self.version)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub generation: GenerationConfig,
    pub mock: bool,
    /// Roles mocked individually while the rest stay remote.
    pub mock_roles: BTreeSet<String>,
    /// JSON object of image content hash to caption for the mock captioner.
    pub mock_captions: Option<PathBuf>,
    pub endpoints: BTreeMap<String, Endpoint>,
    pub llm_model: String,
    pub parallelism: usize,
    /// Requests per second per endpoint.
    pub rate_limit: Option<f64>,
    pub max_concurrency: usize,
    pub timeout_secs: u64,
    pub prompt_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            generation: GenerationConfig::default(),
            mock: false,
            mock_roles: BTreeSet::new(),
            mock_captions: None,
            endpoints: BTreeMap::new(),
            llm_model: DEFAULT_LLM_MODEL.into(),
            parallelism: 4,
            rate_limit: None,
            max_concurrency: 8,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            prompt_dir: None,
            out_dir: None,
            cache_dir: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        message: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::InvalidValue {
            key: key.into(),
            value: value.into(),
            message: "expected true or false".into(),
        }),
    }
}

fn is_role(name: &str) -> bool {
    ROLES.contains(&name)
}

impl RunConfig {
    /// Applies one setting. Keys are the ones accepted in config files.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        let gen = &mut self.generation;
        match key {
            "seed" => gen.seed = parse(key, value)?,
            "filter.tau" => gen.filter.mode = FilterMode::Absolute { tau: parse(key, value)? },
            "filter.fraction" => gen.filter.mode = FilterMode::RankFraction { fraction: parse(key, value)? },
            "filter.canonical_size" => gen.filter.canonical_size = parse(key, value)?,
            "n_candidates" => gen.n_candidates = parse(key, value)?,
            "retry_budget" => gen.retry_budget = parse(key, value)?,
            "box_padding" => gen.box_padding = parse(key, value)?,
            "min_box_area" => gen.min_box_area = parse(key, value)?,
            "part2_unfiltered" => gen.part2_unfiltered = parse_bool(key, value)?,
            "shard_size" => gen.shard_size = parse(key, value)?,
            "parallelism" => self.parallelism = parse(key, value)?,
            "rate_limit" => {
                self.rate_limit = match value {
                    "" | "none" | "0" => None,
                    _ => Some(parse(key, value)?),
                }
            }
            "max_concurrency" => self.max_concurrency = parse(key, value)?,
            "timeout" => self.timeout_secs = parse(key, value)?,
            "prompt_dir" => self.prompt_dir = Some(value.into()),
            "out_dir" => self.out_dir = Some(value.into()),
            "cache_dir" => self.cache_dir = Some(value.into()),
            "mock" => self.mock = parse_bool(key, value)?,
            "mock.captions" => self.mock_captions = Some(value.into()),
            "llm.model" => self.llm_model = value.into(),
            _ => {
                let (scope, field) = key.split_once('.').ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
                if scope == "mock" && is_role(field) {
                    if parse_bool(key, value)? {
                        self.mock_roles.insert(field.into());
                    } else {
                        self.mock_roles.remove(field);
                    }
                    return Ok(());
                }
                if !is_role(scope) {
                    return Err(ConfigError::UnknownKey(key.into()));
                }
                let endpoint = self.endpoints.entry(scope.into()).or_default();
                let slot = match field {
                    "url" => &mut endpoint.url,
                    "key" => &mut endpoint.key,
                    "version" => &mut endpoint.version,
                    _ => return Err(ConfigError::UnknownKey(key.into())),
                };
                *slot = (!value.is_empty()).then(|| value.to_string());
            }
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(before, _)| before).trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |message: String| ConfigError::Syntax {
                path: path.into(),
                line: idx + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| syntax("expected key = value".into()))?;
            self.set(key.trim(), value).map_err(|e| syntax(e.to_string()))?;
        }
        Ok(())
    }

    /// Reads `REASONFORGE_<ROLE>_URL` and `REASONFORGE_<ROLE>_KEY`; other
    /// variables are ignored.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (name, value) in vars {
            let Some(rest) = name.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            for role in ROLES {
                let upper = role.to_uppercase();
                if rest == format!("{upper}_URL") {
                    self.set(&format!("{role}.url"), value.as_ref())?;
                } else if rest == format!("{upper}_KEY") {
                    self.set(&format!("{role}.key"), value.as_ref())?;
                }
            }
        }
        Ok(())
    }

    /// Defaults, then `file`, then the process environment, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        cfg.apply_env(std::env::vars())?;
        for (key, value) in overrides {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.generation.validate().map_err(|e| ConfigError::InvalidValue {
            key: "generation".into(),
            value: String::new(),
            message: e.to_string(),
        })?;
        let positive = |key: &str, n: u64| {
            if n == 0 {
                Err(ConfigError::InvalidValue {
                    key: key.into(),
                    value: "0".into(),
                    message: "must be at least 1".into(),
                })
            } else {
                Ok(())
            }
        };
        positive("parallelism", self.parallelism as u64)?;
        positive("max_concurrency", self.max_concurrency as u64)?;
        positive("timeout", self.timeout_secs)?;
        if let Some(rate) = self.rate_limit {
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(ConfigError::InvalidValue {
                    key: "rate_limit".into(),
                    value: rate.to_string(),
                    message: "must be a positive number".into(),
                });
            }
        }
        Ok(())
    }

    pub fn is_mock(&self, role: &str) -> bool {
        self.mock || self.mock_roles.contains(role)
    }

    fn endpoint(&self, role: &str) -> Option<EndpointConfig> {
        let endpoint = self.endpoints.get(role)?;
        let url = endpoint.url.as_ref()?;
        let mut cfg = EndpointConfig::new(url.clone());
        cfg.api_key = endpoint.key.clone();
        cfg.timeout = Duration::from_secs(self.timeout_secs);
        cfg.rate_limit = self.rate_limit;
        cfg.max_concurrency = self.max_concurrency;
        Some(cfg)
    }

    fn version(&self, role: &str) -> String {
        self.endpoints
            .get(role)
            .and_then(|e| e.version.clone())
            .unwrap_or_else(|| "remote".into())
    }

    pub fn mock_caption_table(&self) -> Result<BTreeMap<String, String>, ConfigError> {
        let Some(path) = &self.mock_captions else {
            return Ok(BTreeMap::new());
        };
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.clone(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::InvalidValue {
            key: "mock.captions".into(),
            value: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Backends for the six generation roles. Roles in `required` must be
    /// mocked or have an endpoint; other unconfigured roles get a
    /// placeholder that fails when called. The extractor falls back to the
    /// built-in lexicon extractor.
    pub fn build_suite(&self, required: &[&str]) -> Result<BackendSuite, ConfigError> {
        let missing = |role: &str| -> Result<(), ConfigError> {
            if required.contains(&role) {
                Err(ConfigError::MissingEndpoint(role.into()))
            } else {
                Ok(())
            }
        };
        macro_rules! pick {
            ($role:literal, $mock:expr, $remote:ident) => {
                if self.is_mock($role) {
                    Arc::new($mock) as _
                } else if let Some(endpoint) = self.endpoint($role) {
                    Arc::new($remote::new(endpoint, self.version($role))?) as _
                } else {
                    missing($role)?;
                    Arc::new(Unconfigured($role)) as _
                }
            };
        }
        let llm: Arc<dyn ChatBackend> = if self.is_mock("llm") {
            Arc::new(MockChat::default())
        } else if let Some(endpoint) = self.endpoint("llm") {
            Arc::new(RemoteChat::new(endpoint, self.llm_model.clone())?)
        } else {
            missing("llm")?;
            Arc::new(Unconfigured("llm"))
        };
        let captioner: Arc<dyn CaptionBackend> = pick!("captioner", MockCaptioner::new(self.mock_caption_table()?), RemoteCaptioner);
        let extractor: Arc<dyn EntityBackend> = match self.endpoint("extractor") {
            Some(endpoint) if !self.is_mock("extractor") => Arc::new(RemoteEntities::new(endpoint, self.version("extractor"))?),
            _ => Arc::new(LexiconExtractor::default()),
        };
        let detector: Arc<dyn GroundingBackend> = pick!("detector", MockGrounder::default(), RemoteGrounder);
        let inpainter: Arc<dyn InpaintBackend> = pick!("inpainter", MockInpainter::default(), RemoteInpainter);
        let editor: Arc<dyn ConditionedEditBackend> = pick!("editor", MockEditor::default(), RemoteEditor);
        let cache = match &self.cache_dir {
            Some(dir) => ResponseCache::on_disk(dir).map_err(|source| ConfigError::Io {
                path: dir.clone(),
                source,
            })?,
            None => ResponseCache::in_memory(),
        };
        Ok(BackendSuite {
            llm,
            captioner,
            extractor,
            detector,
            inpainter,
            editor,
            cache: Some(Arc::new(cache)),
            min_box_area: self.generation.min_box_area,
        })
    }

    /// The three embedders used by evaluation; all must be configured.
    pub fn build_embedders(&self) -> Result<Embedders, ConfigError> {
        let image = |role: &'static str, slot: &str| -> Result<Arc<dyn ImageEmbedder>, ConfigError> {
            if self.is_mock(role) {
                Ok(Arc::new(MockImageEmbedder::new(slot)))
            } else if let Some(endpoint) = self.endpoint(role) {
                Ok(Arc::new(RemoteImageEmbedder::new(endpoint, self.version(role))?))
            } else {
                Err(ConfigError::MissingEndpoint(role.into()))
            }
        };
        let clip_text: Arc<dyn TextEmbedder> = if self.is_mock("clip_text") {
            Arc::new(MockTextEmbedder::new("clip-like"))
        } else if let Some(endpoint) = self.endpoint("clip_text") {
            Arc::new(RemoteTextEmbedder::new(endpoint, self.version("clip_text"))?)
        } else {
            return Err(ConfigError::MissingEndpoint("clip_text".into()));
        };
        Ok(Embedders {
            clip_image: image("clip_image", "clip-like")?,
            clip_text,
            dino_image: image("dino_image", "dino-like")?,
        })
    }

    /// Everything that can change generated content apart from the
    /// generation config and backend versions: endpoint URLs, the chat
    /// model and the mock caption table. Keys are excluded.
    pub fn hash_extras(&self) -> Result<BTreeMap<String, String>, ConfigError> {
        let mut extras = BTreeMap::new();
        for role in ROLES {
            if self.is_mock(role) {
                extras.insert(format!("{role}.backend"), "mock".into());
            } else if let Some(url) = self.endpoints.get(role).and_then(|e| e.url.clone()) {
                extras.insert(format!("{role}.url"), url);
            }
        }
        if !self.is_mock("llm") {
            extras.insert("llm.model".into(), self.llm_model.clone());
        }
        if self.is_mock("captioner") {
            let table = serde_json::to_vec(&self.mock_caption_table()?).expect("caption table serializes");
            extras.insert("mock.captions".into(), sha256_hex(&table));
        }
        Ok(extras)
    }

    /// The resolved configuration with every credential replaced.
    pub fn redacted_json(&self) -> Value {
        let endpoints: BTreeMap<&String, Value> = self
            .endpoints
            .iter()
            .map(|(role, e)| {
                (
                    role,
                    json!({
                        "url": e.url,
                        "key": e.key.as_ref().map(|_| REDACTED),
                        "version": e.version,
                    }),
                )
            })
            .collect();
        json!({
            "generation": self.generation,
            "mock": self.mock,
            "mock_roles": self.mock_roles,
            "mock_captions": self.mock_captions,
            "endpoints": endpoints,
            "llm_model": self.llm_model,
            "parallelism": self.parallelism,
            "rate_limit": self.rate_limit,
            "max_concurrency": self.max_concurrency,
            "timeout_secs": self.timeout_secs,
            "prompt_dir": self.prompt_dir,
            "cache_dir": self.cache_dir,
        })
    }
}

/// Stand-in for a role nobody configured. Every call fails.
#[derive(Debug, Clone, Copy)]
pub struct Unconfigured(pub &'static str);

impl Unconfigured {
    fn fail<T>(&self) -> Result<T, BackendError> {
        Err(BackendError::Precondition(format!("no backend configured for {}", self.0)))
    }
}

impl Backend for Unconfigured {
    fn name(&self) -> &str {
        "unconfigured"
    }

    fn version(&self) -> &str {
        self.0
    }
}

impl ChatBackend for Unconfigured {
    fn chat(&self, _: &ChatRequest) -> Result<String, BackendError> {
        self.fail()
    }
}

impl CaptionBackend for Unconfigured {
    fn caption(&self, _: &Picture) -> Result<Caption, BackendError> {
        self.fail()
    }
}

impl GroundingBackend for Unconfigured {
    fn ground(&self, _: &Picture, _: &str) -> Result<Vec<RawDetection>, BackendError> {
        self.fail()
    }
}

impl InpaintBackend for Unconfigured {
    fn inpaint_replace(&self, _: &Picture, _: &str, _: &BoundingBox, _: &str) -> Result<Picture, BackendError> {
        self.fail()
    }
}

impl ConditionedEditBackend for Unconfigured {
    fn conditioned_edit(&self, _: &Picture, _: &str) -> Result<Picture, BackendError> {
        self.fail()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_env_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "# settings\nseed = 3\nllm.url = http://file\nparallelism = 2 # inline\n").unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.generation.seed, 3);
        cfg.apply_env([("REASONFORGE_LLM_URL", "http://env"), ("REASONFORGE_LLM_KEY", "sk-secret"), ("HOME", "/x")])
            .unwrap();
        assert_eq!(cfg.endpoints["llm"].url.as_deref(), Some("http://env"));
        cfg.set("llm.url", "http://flag").unwrap();
        assert_eq!(cfg.endpoints["llm"].url.as_deref(), Some("http://flag"));
        assert_eq!(cfg.parallelism, 2);
    }

    #[test]
    fn keys_never_leave() {
        let mut cfg = RunConfig::default();
        cfg.apply_env([("REASONFORGE_LLM_URL", "http://h"), ("REASONFORGE_LLM_KEY", "sk-secret")])
            .unwrap();
        let text = format!(
            "{} {:?} {:?}",
            cfg.redacted_json(),
            cfg.hash_extras().unwrap(),
            cfg
        );
        assert!(!text.contains("sk-secret"));
        assert!(text.contains(REDACTED));
    }

    #[test]
    fn bad_lines_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "seed = 1\nnonsense\n").unwrap();
        let err = RunConfig::default().apply_file(&path).unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 2, .. }));
        assert!(matches!(RunConfig::default().set("colour", "red"), Err(ConfigError::UnknownKey(_))));
        assert!(RunConfig::default().set("seed", "x").is_err());
    }

    #[test]
    fn required_roles_need_endpoints() {
        let cfg = RunConfig::default();
        assert!(matches!(cfg.build_suite(&["llm"]), Err(ConfigError::MissingEndpoint(_))));
        let suite = cfg.build_suite(&[]).unwrap();
        assert!(suite.detector.ground(&Picture::new(image::RgbImage::new(2, 2)), "cat").is_err());
    }

    #[test]
    fn per_role_mock() {
        let mut cfg = RunConfig::default();
        cfg.set("mock.llm", "true").unwrap();
        let suite = cfg.build_suite(&["llm"]).unwrap();
        assert!(suite.version_of("llm").starts_with("mock"));
        assert!(suite.version_of("detector").starts_with("unconfigured"));
        assert_eq!(cfg.hash_extras().unwrap()["llm.backend"], "mock");
    }
}
