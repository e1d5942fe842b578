//! Layered configuration: defaults, then a TOML file, then `BOOKRAG_*`
//! environment variables. Command-line flags are applied last by the CLI.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::gateway::{HttpBackend, HttpConfig, MockBackend, ModelGateway, RetryPolicy};
use crate::index::BuildConfig;
use crate::operators::ReasonerConfig;
use crate::planner::PlannerConfig;
use crate::resolution::ResolutionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewaySettings {
    pub backend: BackendKind,
    /// Script file for the mock backend.
    pub mock_script: Option<PathBuf>,
    pub retry_attempts: u32,
    pub retry_base_delay_ms: u64,
    pub http: HttpConfig,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        let retry = RetryPolicy::default();
        GatewaySettings {
            backend: BackendKind::Http,
            mock_script: None,
            retry_attempts: retry.attempts,
            retry_base_delay_ms: retry.base_delay.as_millis() as u64,
            http: HttpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerSettings {
    /// Tree depth used by section selection and bare section filters.
    pub section_depth: usize,
    /// Title blocks per section-filtering call.
    pub batch_size: usize,
}

impl Default for PlannerSettings {
    fn default() -> Self {
        PlannerSettings {
            section_depth: PlannerConfig::default().section_depth,
            batch_size: crate::tree::DEFAULT_BATCH_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    /// 0 lets the worker pool pick.
    pub workers: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathSettings {
    /// Directory image block paths are resolved against. Unset means the
    /// directory holding the block-list file.
    pub asset_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub gateway: GatewaySettings,
    pub resolution: ResolutionConfig,
    pub planner: PlannerSettings,
    pub reasoner: ReasonerConfig,
    pub eval: EvalSettings,
    pub paths: PathSettings,
}

/// Environment variables read by [`Config::apply_env`], with the key each sets.
pub const ENV_VARS: &[(&str, &str)] = &[
    ("BOOKRAG_BACKEND", "gateway.backend"),
    ("BOOKRAG_MOCK_SCRIPT", "gateway.mock_script"),
    ("BOOKRAG_RETRY_ATTEMPTS", "gateway.retry_attempts"),
    ("BOOKRAG_LLM_URL", "gateway.http.llm_url"),
    ("BOOKRAG_VLM_URL", "gateway.http.vlm_url"),
    ("BOOKRAG_EMBED_URL", "gateway.http.embed_url"),
    ("BOOKRAG_RERANK_URL", "gateway.http.rerank_url"),
    ("BOOKRAG_API_KEY", "gateway.http.api_key"),
    ("BOOKRAG_LLM_MODEL", "gateway.http.llm_model"),
    ("BOOKRAG_VLM_MODEL", "gateway.http.vlm_model"),
    ("BOOKRAG_EMBED_MODEL", "gateway.http.embed_model"),
    ("BOOKRAG_RERANK_MODEL", "gateway.http.rerank_model"),
    ("BOOKRAG_DIMENSION", "gateway.http.dimension"),
    ("BOOKRAG_TIMEOUT_SECS", "gateway.http.timeout_secs"),
    ("BOOKRAG_TOP_K", "resolution.top_k"),
    ("BOOKRAG_G", "resolution.g"),
    ("BOOKRAG_TAU_MIN", "resolution.tau_min"),
    ("BOOKRAG_SECTION_DEPTH", "planner.section_depth"),
    ("BOOKRAG_BATCH_SIZE", "planner.batch_size"),
    ("BOOKRAG_DAMPING", "reasoner.damping"),
    ("BOOKRAG_TOLERANCE", "reasoner.tolerance"),
    ("BOOKRAG_MAX_ITERATIONS", "reasoner.max_iterations"),
    ("BOOKRAG_THETA_LINK", "reasoner.theta_link"),
    ("BOOKRAG_WORKERS", "eval.workers"),
    ("BOOKRAG_ASSET_ROOT", "paths.asset_root"),
];

fn parsed<T: std::str::FromStr>(var: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{var}: cannot parse {raw:?}")))
}

impl Config {
    pub fn from_toml(raw: &str) -> Result<Config> {
        toml::from_str(raw).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Config> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_toml(&raw).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Overlay variables from `lookup` (normally `std::env::var`).
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        for (var, _) in ENV_VARS {
            let Some(v) = lookup(var) else { continue };
            let h = &mut self.gateway.http;
            match *var {
                "BOOKRAG_BACKEND" => {
                    self.gateway.backend = match v.trim().to_ascii_lowercase().as_str() {
                        "http" => BackendKind::Http,
                        "mock" => BackendKind::Mock,
                        _ => return Err(Error::InvalidConfig(format!("{var}: unknown backend {v:?}"))),
                    }
                }
                "BOOKRAG_MOCK_SCRIPT" => self.gateway.mock_script = Some(PathBuf::from(v)),
                "BOOKRAG_RETRY_ATTEMPTS" => self.gateway.retry_attempts = parsed(var, &v)?,
                "BOOKRAG_LLM_URL" => h.llm_url = v,
                "BOOKRAG_VLM_URL" => h.vlm_url = Some(v),
                "BOOKRAG_EMBED_URL" => h.embed_url = Some(v),
                "BOOKRAG_RERANK_URL" => h.rerank_url = Some(v),
                "BOOKRAG_API_KEY" => h.api_key = Some(v),
                "BOOKRAG_LLM_MODEL" => h.llm_model = v,
                "BOOKRAG_VLM_MODEL" => h.vlm_model = v,
                "BOOKRAG_EMBED_MODEL" => h.embed_model = v,
                "BOOKRAG_RERANK_MODEL" => h.rerank_model = v,
                "BOOKRAG_DIMENSION" => h.dimension = parsed(var, &v)?,
                "BOOKRAG_TIMEOUT_SECS" => h.timeout_secs = parsed(var, &v)?,
                "BOOKRAG_TOP_K" => self.resolution.top_k = parsed(var, &v)?,
                "BOOKRAG_G" => self.resolution.g = parsed(var, &v)?,
                "BOOKRAG_TAU_MIN" => self.resolution.tau_min = parsed(var, &v)?,
                "BOOKRAG_SECTION_DEPTH" => self.planner.section_depth = parsed(var, &v)?,
                "BOOKRAG_BATCH_SIZE" => self.planner.batch_size = parsed(var, &v)?,
                "BOOKRAG_DAMPING" => self.reasoner.damping = parsed(var, &v)?,
                "BOOKRAG_TOLERANCE" => self.reasoner.tolerance = parsed(var, &v)?,
                "BOOKRAG_MAX_ITERATIONS" => self.reasoner.max_iterations = parsed(var, &v)?,
                "BOOKRAG_THETA_LINK" => self.reasoner.theta_link = parsed(var, &v)?,
                "BOOKRAG_WORKERS" => self.eval.workers = parsed(var, &v)?,
                "BOOKRAG_ASSET_ROOT" => self.paths.asset_root = Some(PathBuf::from(v)),
                _ => unreachable!("ENV_VARS and the match are kept in sync"),
            }
        }
        Ok(())
    }

    /// Defaults, then `file` if given, then the process environment.
    pub fn load(file: Option<&Path>) -> Result<Config> {
        let mut cfg = match file {
            Some(p) => Config::from_file(p)?,
            None => Config::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.resolution.validate()?;
        self.reasoner.validate()?;
        if self.planner.section_depth == 0 {
            return Err(Error::InvalidConfig("planner.section_depth must be at least 1".into()));
        }
        if self.planner.batch_size == 0 {
            return Err(Error::InvalidConfig("planner.batch_size must be at least 1".into()));
        }
        if self.gateway.retry_attempts == 0 {
            return Err(Error::InvalidConfig("gateway.retry_attempts must be at least 1".into()));
        }
        if self.gateway.http.dimension == 0 {
            return Err(Error::InvalidConfig("gateway.http.dimension must be positive".into()));
        }
        if self.gateway.http.timeout_secs == 0 {
            return Err(Error::InvalidConfig("gateway.http.timeout_secs must be positive".into()));
        }
        Ok(())
    }

    pub fn gateway(&self) -> Result<ModelGateway> {
        let gw = match self.gateway.backend {
            BackendKind::Mock => match &self.gateway.mock_script {
                Some(p) => ModelGateway::new(MockBackend::from_script_file(p)?),
                None => ModelGateway::new(MockBackend::new()),
            },
            BackendKind::Http => ModelGateway::new(HttpBackend::new(self.gateway.http.clone())),
        };
        Ok(gw.with_retry(RetryPolicy {
            attempts: self.gateway.retry_attempts,
            base_delay: Duration::from_millis(self.gateway.retry_base_delay_ms),
        }))
    }

    pub fn build_config(&self, doc_dir: Option<&Path>) -> BuildConfig {
        BuildConfig {
            batch_size: self.planner.batch_size,
            resolution: self.resolution,
            asset_root: self
                .paths
                .asset_root
                .clone()
                .or_else(|| doc_dir.map(Path::to_path_buf)),
        }
    }

    pub fn planner_config(&self) -> PlannerConfig {
        PlannerConfig {
            section_depth: self.planner.section_depth,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            planner: self.planner_config(),
            reasoner: self.reasoner,
            workers: self.eval.workers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
        Config::default().validate().unwrap();
    }

    #[test]
    fn documented_defaults() {
        let c = Config::default();
        assert_eq!(c.resolution.g, 0.6);
        assert_eq!(c.resolution.top_k, 10);
        assert_eq!(c.resolution.tau_min, 0.0);
        assert_eq!(c.planner.batch_size, 20);
        assert_eq!(c.planner.section_depth, 1);
        assert_eq!(c.reasoner.damping, 0.85);
        assert_eq!(c.gateway.backend, BackendKind::Http);
        assert_eq!(c.gateway.retry_attempts, 3);
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = Config::from_toml("[resolution]\ng = 0.5\n[gateway.http]\nllm_url = \"http://x\"\n").unwrap();
        assert_eq!(c.resolution.g, 0.5);
        assert_eq!(c.resolution.top_k, 10);
        assert_eq!(c.gateway.http.llm_url, "http://x");
        assert_eq!(c.gateway.http.dimension, 1024);
    }

    #[test]
    fn unknown_section_is_rejected() {
        assert!(matches!(Config::from_toml("[nope]\na = 1\n"), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn env_overrides_file() {
        let mut c = Config::from_toml("[resolution]\ng = 0.5\ntop_k = 4\n").unwrap();
        let env: BTreeMap<&str, &str> =
            [("BOOKRAG_G", "0.7"), ("BOOKRAG_BACKEND", "mock"), ("BOOKRAG_API_KEY", "k")].into();
        c.apply_env(|k| env.get(k).map(|s| s.to_string())).unwrap();
        assert_eq!(c.resolution.g, 0.7);
        assert_eq!(c.resolution.top_k, 4);
        assert_eq!(c.gateway.backend, BackendKind::Mock);
        assert_eq!(c.gateway.http.api_key.as_deref(), Some("k"));
    }

    #[test]
    fn bad_env_value_is_a_config_error() {
        let mut c = Config::default();
        let r = c.apply_env(|k| (k == "BOOKRAG_TOP_K").then(|| "many".to_string()));
        assert!(matches!(r, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn out_of_range_values_fail_validation() {
        let mut c = Config::default();
        c.resolution.g = 1.5;
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.planner.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
