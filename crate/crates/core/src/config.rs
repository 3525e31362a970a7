//! Run configuration file.
//!
//! One TOML file lists the models, the cascade and the run settings.
//! Anything left out takes its default; only `[[models]]` is required.
//!
//! ```toml
//! [[models]]
//! id = "gemini-pro"
//! max_format_retries = 3
//! endpoint = { kind = "remote", base_url = "https://example.invalid/v1" }
//!
//! [[models]]
//! id = "gpt-4-0125-preview"
//! max_format_retries = 1
//! endpoint = { kind = "scripted", script = "scripts/expert.toml" }
//!
//! [run]
//! retrieval_enabled = false
//!
//! [cascade]
//! lifeline_cap = 5
//! ```
//!
//! Prices come from the model entry (`input_per_million`,
//! `output_per_million`) or else from the pricing file, which defaults to
//! the bundled list.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::cascade::{CascadeConfig, RepeatTrigger};
use crate::gateway::{Endpoint, ModelDescriptor, RemoteEndpoint, ScriptedEndpoint};
use crate::money::Price;
use crate::orchestrator::RunConfig;

pub const DEFAULT_PRICING: &str = include_str!("../pricing/default.toml");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{path}: {message}")]
pub struct ConfigError {
    /// Where in the configuration the problem is, e.g. `models[1].endpoint`.
    pub path: String,
    pub message: String,
}

fn err(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError { path: path.into(), message: message.into() }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    pricing_file: Option<PathBuf>,
    #[serde(default)]
    models: Vec<RawModel>,
    #[serde(default)]
    run: RawRun,
    #[serde(default)]
    cascade: RawCascade,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    id: String,
    max_format_retries: u32,
    input_per_million: Option<Price>,
    output_per_million: Option<Price>,
    endpoint: RawEndpoint,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawEndpoint {
    Remote {
        base_url: String,
        model_name: Option<String>,
        api_key_env: Option<String>,
        timeout_s: Option<u64>,
    },
    Scripted {
        replies: Option<Vec<String>>,
        /// TOML file with a `replies` array, relative to the config file.
        script: Option<PathBuf>,
        chars_per_token: Option<u32>,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    max_actions: Option<usize>,
    short_term_k: Option<usize>,
    retrieval_enabled: Option<bool>,
    planning_temperature: Option<f64>,
    worker_temperature: Option<f64>,
    worker_model: Option<String>,
    seed_label: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCascade {
    tiers: Option<Vec<String>>,
    repeat_threshold: Option<u32>,
    lifeline_cap: Option<u32>,
    expert_enabled: Option<bool>,
    repeat_trigger: Option<RepeatTrigger>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PricingFile {
    #[serde(default)]
    models: BTreeMap<String, PricingEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PricingEntry {
    input_per_million: Price,
    output_per_million: Price,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    replies: Vec<String>,
}

/// Command-line values that win over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub max_actions: Option<usize>,
    pub retrieval_enabled: Option<bool>,
    pub short_term_k: Option<usize>,
    pub seed_label: Option<String>,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(n) = self.max_actions {
            config.max_actions = n;
        }
        if let Some(r) = self.retrieval_enabled {
            config.retrieval_enabled = r;
        }
        if let Some(k) = self.short_term_k {
            config.short_term_k = k;
        }
        if let Some(s) = &self.seed_label {
            config.seed_label = s.clone();
        }
    }
}

fn per_million(p: Price) -> Price {
    Price::per_million(p.as_decimal())
}

fn toml_error(source: &str, e: toml::de::Error) -> ConfigError {
    let location = e
        .span()
        .map(|span| {
            let line = source[..span.start.min(source.len())].matches('\n').count() + 1;
            format!("config line {line}")
        })
        .unwrap_or_else(|| "config".into());
    err(location, e.message().to_string())
}

/// Parses a pricing file into per-token prices keyed by model id.
pub fn parse_pricing(text: &str) -> Result<BTreeMap<String, (Price, Price)>, ConfigError> {
    let file: PricingFile = toml::from_str(text).map_err(|e| {
        let mut ce = toml_error(text, e);
        ce.path = ce.path.replacen("config", "pricing", 1);
        ce
    })?;
    Ok(file
        .models
        .into_iter()
        .map(|(id, p)| (id, (per_million(p.input_per_million), per_million(p.output_per_million))))
        .collect())
}

/// Parses a config file's text. Relative paths inside it resolve against
/// `base_dir`.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| toml_error(text, e))?;
    if raw.models.is_empty() {
        return Err(err("models", "at least one [[models]] entry is required"));
    }

    let pricing = match &raw.pricing_file {
        None => parse_pricing(DEFAULT_PRICING)?,
        Some(p) => {
            let path = base_dir.join(p);
            let text =
                std::fs::read_to_string(&path).map_err(|e| err("pricing_file", format!("{}: {e}", path.display())))?;
            parse_pricing(&text)?
        }
    };

    let mut models: Vec<ModelDescriptor> = Vec::with_capacity(raw.models.len());
    for (i, m) in raw.models.into_iter().enumerate() {
        let at = format!("models[{i}]");
        if models.iter().any(|o| o.id == m.id) {
            return Err(err(format!("{at}.id"), format!("duplicate model id {}", m.id)));
        }
        let listed = pricing.get(&m.id).copied();
        let input = m.input_per_million.map(per_million).or(listed.map(|p| p.0));
        let output = m.output_per_million.map(per_million).or(listed.map(|p| p.1));
        let (Some(input), Some(output)) = (input, output) else {
            return Err(err(at, format!("no price for {}; set input_per_million and output_per_million", m.id)));
        };
        let endpoint = match m.endpoint {
            RawEndpoint::Remote { base_url, model_name, api_key_env, timeout_s } => Endpoint::Remote(RemoteEndpoint {
                base_url,
                model_name,
                api_key_env,
                timeout_s: timeout_s.unwrap_or(crate::gateway::DEFAULT_TIMEOUT_S),
            }),
            RawEndpoint::Scripted { replies, script, chars_per_token } => {
                let replies = match (replies, script) {
                    (Some(r), None) => r,
                    (None, Some(path)) => {
                        let full = base_dir.join(&path);
                        let text = std::fs::read_to_string(&full)
                            .map_err(|e| err(format!("{at}.endpoint.script"), format!("{}: {e}", full.display())))?;
                        toml::from_str::<ScriptFile>(&text)
                            .map_err(|e| {
                                err(format!("{at}.endpoint.script"), format!("{}: {}", full.display(), e.message()))
                            })?
                            .replies
                    }
                    _ => {
                        return Err(err(
                            format!("{at}.endpoint"),
                            "scripted endpoints need exactly one of `replies` or `script`",
                        ))
                    }
                };
                Endpoint::Scripted(ScriptedEndpoint { replies, chars_per_token: chars_per_token.unwrap_or(4) })
            }
        };
        let descriptor = ModelDescriptor {
            id: m.id,
            tier_rank: 0,
            price_per_input_token: input,
            price_per_output_token: output,
            max_format_retries: m.max_format_retries,
            endpoint,
        };
        descriptor.validate().map_err(|e| err(at, e.to_string()))?;
        models.push(descriptor);
    }

    let find = |id: &str, path: String| {
        models.iter().find(|m| m.id == id).cloned().ok_or_else(|| err(path, format!("unknown model {id}")))
    };
    let tiers = match &raw.cascade.tiers {
        None => models.clone(),
        Some(ids) => ids
            .iter()
            .enumerate()
            .map(|(i, id)| find(id, format!("cascade.tiers[{i}]")))
            .collect::<Result<Vec<_>, _>>()?,
    };
    let mut cascade = CascadeConfig::new(tiers);
    if let Some(r) = raw.cascade.repeat_threshold {
        cascade.repeat_threshold = r;
    }
    if let Some(l) = raw.cascade.lifeline_cap {
        cascade.lifeline_cap = l;
    }
    if let Some(e) = raw.cascade.expert_enabled {
        cascade.expert_enabled = e;
    }
    if let Some(t) = raw.cascade.repeat_trigger {
        cascade.repeat_trigger = t;
    }
    cascade.validate().map_err(|e| err("cascade", e.to_string()))?;

    let mut config = RunConfig::new(cascade);
    let run = raw.run;
    if let Some(v) = run.max_actions {
        config.max_actions = v;
    }
    if let Some(v) = run.short_term_k {
        config.short_term_k = v;
    }
    if let Some(v) = run.retrieval_enabled {
        config.retrieval_enabled = v;
    }
    if let Some(v) = run.planning_temperature {
        config.planning_temperature = v;
    }
    if let Some(v) = run.worker_temperature {
        config.worker_temperature = v;
    }
    if let Some(v) = run.seed_label {
        config.seed_label = v;
    }
    if let Some(id) = run.worker_model {
        config.worker_model = Some(find(&id, "run.worker_model".into())?);
        if let Some(t) = config.cascade.tiers.iter().find(|t| t.id == id) {
            config.worker_model = Some(t.clone());
        }
    }
    config.validate().map_err(|e| err("run", e.to_string()))?;
    Ok(config)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| err(path.display().to_string(), e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rust_decimal::Decimal;
    use std::str::FromStr;

    const TWO_TIERS: &str = r#"
[[models]]
id = "gemini-pro"
max_format_retries = 3
endpoint = { kind = "scripted", replies = [] }

[[models]]
id = "gpt-4-0125-preview"
max_format_retries = 1
endpoint = { kind = "scripted", replies = ["x"] }
"#;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        parse_config(text, Path::new("."))
    }

    #[test]
    fn models_only_gives_defaults() {
        let c = parse(TWO_TIERS).unwrap();
        assert_eq!(c.max_actions, 30);
        assert_eq!(c.short_term_k, 3);
        assert_eq!(c.cascade.repeat_threshold, 3);
        assert_eq!(c.cascade.lifeline_cap, 5);
        assert_eq!(c.planning_temperature, 0.2);
        assert_eq!(c.worker_temperature, 0.01);
        assert!(c.retrieval_enabled);
        assert!(c.cascade.expert_enabled);
        assert_eq!(c.cascade.tiers[1].tier_rank, 1);
    }

    #[test]
    fn bundled_prices_apply() {
        let c = parse(TWO_TIERS).unwrap();
        let gpt4 = &c.cascade.tiers[1];
        assert_eq!(gpt4.price_per_input_token.as_decimal(), Decimal::from_str("0.00001").unwrap());
        assert_eq!(gpt4.price_per_output_token.as_decimal(), Decimal::from_str("0.00003").unwrap());
        assert!(c.cascade.tiers[0].is_free());
    }

    #[test]
    fn explicit_prices_win() {
        let text = TWO_TIERS.replacen(
            "max_format_retries = 3",
            "max_format_retries = 3\ninput_per_million = 0.5\noutput_per_million = \"1.5\"",
            1,
        );
        let c = parse(&text).unwrap();
        assert_eq!(c.cascade.tiers[0].price_per_input_token.as_decimal(), Decimal::from_str("0.0000005").unwrap());
    }

    #[test]
    fn unknown_model_without_price_is_rejected() {
        let text =
            "[[models]]\nid = \"mystery\"\nmax_format_retries = 1\nendpoint = { kind = \"scripted\", replies = [] }\n";
        let e = parse(text).unwrap_err();
        assert_eq!(e.path, "models[0]");
        assert!(e.message.contains("no price"));
    }

    #[test]
    fn error_paths_are_precise() {
        let e = parse(&format!("{TWO_TIERS}\n[cascade]\ntiers = [\"gemini-pro\", \"nope\"]\n")).unwrap_err();
        assert_eq!(e.path, "cascade.tiers[1]");
        let e = parse(&format!("{TWO_TIERS}\n[run]\nmax_actoins = 3\n")).unwrap_err();
        assert!(e.message.contains("max_actoins"), "{e}");
        assert!(e.path.contains("line"), "{e}");
        let e = parse("").unwrap_err();
        assert_eq!(e.path, "models");
        let e =
            parse(&TWO_TIERS.replace(
                "gpt-4-0125-preview\"\nmax_format_retries = 1",
                "gpt-4-0125-preview\"\nmax_format_retries = 0",
            ))
            .unwrap_err();
        assert_eq!(e.path, "models[1]");
    }

    #[test]
    fn tiers_must_ascend() {
        let e =
            parse(&format!("{TWO_TIERS}\n[cascade]\ntiers = [\"gpt-4-0125-preview\", \"gemini-pro\"]\n")).unwrap_err();
        assert_eq!(e.path, "cascade");
    }

    #[test]
    fn overrides_win() {
        let mut c = parse(&format!("{TWO_TIERS}\n[run]\nmax_actions = 10\n")).unwrap();
        Overrides { max_actions: Some(4), retrieval_enabled: Some(false), ..Default::default() }.apply(&mut c);
        assert_eq!(c.max_actions, 4);
        assert!(!c.retrieval_enabled);
    }

    #[test]
    fn script_files_and_separate_worker() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("w.toml"), "replies = [\"\"\"multi\nline\"\"\"]\n").unwrap();
        let text = format!(
            "{TWO_TIERS}\n[[models]]\nid = \"worker\"\nmax_format_retries = 1\ninput_per_million = 0\noutput_per_million = 0\nendpoint = {{ kind = \"scripted\", script = \"w.toml\" }}\n\n[cascade]\ntiers = [\"gemini-pro\", \"gpt-4-0125-preview\"]\n\n[run]\nworker_model = \"worker\"\n"
        );
        let c = parse_config(&text, dir.path()).unwrap();
        let w = c.worker().unwrap();
        assert_eq!(w.id, "worker");
        match &w.endpoint {
            Endpoint::Scripted(s) => assert_eq!(s.replies, vec!["multi\nline".to_string()]),
            other => panic!("{other:?}"),
        }
        assert_eq!(c.models().len(), 3);
    }

    #[test]
    fn bundled_pricing_parses() {
        let p = parse_pricing(DEFAULT_PRICING).unwrap();
        assert_eq!(p["gpt-3.5-turbo"].0.as_decimal(), Decimal::from_str("0.0000005").unwrap());
    }
}
