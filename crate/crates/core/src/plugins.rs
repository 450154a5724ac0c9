//! Plugin contracts for the three algorithm categories and the registry
//! that resolves pipelines against them.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::algorithms::{AlgorithmError, DeviceUpdate, DeviceView, ErrorAccrual, FilteredSeries};
use crate::geo::GeoPoint;
use crate::ingest::RawLog;
use crate::model::{DeviceParams, Millis, Trajectory};

pub type ParamMap = BTreeMap<String, Value>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PluginError {
    #[error("slug collision: {0}")]
    SlugCollision(String),
    #[error("invalid slug {0:?}: must be non-empty lowercase ASCII, digits, '-' or '_'")]
    InvalidSlug(String),
    #[error("unknown plugin {0:?}")]
    UnknownPlugin(String),
    #[error("plugin {slug:?} is a {actual} plugin, expected {expected}")]
    CategoryMismatch {
        slug: String,
        expected: PluginCategory,
        actual: PluginCategory,
    },
    #[error("plugin {slug:?}: unknown parameter {key:?}")]
    UnknownParameter { slug: String, key: String },
    #[error("plugin {slug:?}: parameter {key:?} {message}")]
    InvalidParameter {
        slug: String,
        key: String,
        message: String,
    },
    #[error(transparent)]
    Algorithm(#[from] AlgorithmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum PluginCategory {
    Filtering,
    Positioning,
    Collaborative,
}

impl fmt::Display for PluginCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PluginCategory::Filtering => "filtering",
            PluginCategory::Positioning => "positioning",
            PluginCategory::Collaborative => "collaborative",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct PluginMetadata {
    pub name: String,
    pub slug: String,
    pub display_name: String,
    pub category: PluginCategory,
}

/// Identity shared by every plugin.
pub trait Plugin: Send + Sync {
    fn get_plugin_name(&self) -> String;
    fn get_plugin_slug(&self) -> String;
    fn get_plugin_display_name(&self) -> String;
    fn get_plugin_category(&self) -> PluginCategory;

    /// Checked once when a pipeline is assembled.
    fn validate_params(&self, params: &ParamMap) -> Result<(), PluginError>;

    fn metadata(&self) -> PluginMetadata {
        PluginMetadata {
            name: self.get_plugin_name(),
            slug: self.get_plugin_slug(),
            display_name: self.get_plugin_display_name(),
            category: self.get_plugin_category(),
        }
    }
}

pub trait FilterPlugin: Plugin {
    /// Smooths a raw log; the output keeps one sample per distinct input
    /// timestamp.
    fn get_filtered_data(
        &self,
        raw: &RawLog,
        device: &DeviceParams,
        params: &ParamMap,
    ) -> Result<FilteredSeries, PluginError>;
}

/// Everything a positioning algorithm may look at for one device.
#[derive(Debug, Clone, Copy)]
pub struct PositioningInput<'a> {
    pub device_id: &'a str,
    pub initial: GeoPoint,
    pub groundtruth: &'a [GeoPoint],
    pub raw: &'a RawLog,
    pub filtered: Option<&'a FilteredSeries>,
    pub device: &'a DeviceParams,
}

pub trait PositioningPlugin: Plugin {
    /// Returns an estimated trajectory whose first point is the initial
    /// location at the first data timestamp.
    fn get_positioning_data(
        &self,
        input: &PositioningInput<'_>,
        params: &ParamMap,
    ) -> Result<Trajectory, PluginError>;
}

/// Engine-side settings a collaborative plugin exposes to the replay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollaborationSettings {
    pub accrual: ErrorAccrual,
    /// Replaces every device's lower threshold when set.
    pub lower_threshold: Option<f64>,
    pub secondary_threshold: f64,
    pub rssi_at_1m_dbm: Option<f64>,
    pub path_loss_exponent: Option<f64>,
    pub noise_sigma_db: f64,
    pub seed: Option<u64>,
    pub heartbeat_ms: Millis,
}

impl Default for CollaborationSettings {
    fn default() -> Self {
        Self {
            accrual: ErrorAccrual::default(),
            lower_threshold: None,
            secondary_threshold: 0.0,
            rssi_at_1m_dbm: None,
            path_loss_exponent: None,
            noise_sigma_db: 0.0,
            seed: None,
            heartbeat_ms: 500,
        }
    }
}

pub const COLLABORATION_PARAM_KEYS: [&str; 9] = [
    "lower_threshold",
    "secondary_threshold",
    "error_rate_per_step",
    "error_rate_per_second",
    "rssi_at_1m_dbm",
    "path_loss_exponent",
    "noise_sigma_db",
    "seed",
    "heartbeat_ms",
];

impl CollaborationSettings {
    pub fn from_params(slug: &str, params: &ParamMap) -> Result<Self, PluginError> {
        let p = Params::new(slug, params);
        let defaults = Self::default();
        let accrual = match (
            p.opt_f64("error_rate_per_step")?,
            p.opt_f64("error_rate_per_second")?,
        ) {
            (Some(_), Some(_)) => {
                return Err(p.invalid(
                    "error_rate_per_second",
                    "cannot be combined with error_rate_per_step",
                ))
            }
            (_, Some(rate)) => ErrorAccrual::PerSecond(p.non_negative("error_rate_per_second", rate)?),
            (rate, None) => ErrorAccrual::PerStep(p.non_negative("error_rate_per_step", rate.unwrap_or(1.0))?),
        };
        let lower_threshold = p
            .opt_f64("lower_threshold")?
            .map(|v| p.non_negative("lower_threshold", v))
            .transpose()?;
        let path_loss_exponent = p.opt_f64("path_loss_exponent")?;
        if let Some(n) = path_loss_exponent {
            if !(n > 0.0) {
                return Err(p.invalid("path_loss_exponent", "must be > 0"));
            }
        }
        let heartbeat_ms = p.opt_u64("heartbeat_ms")?.unwrap_or(defaults.heartbeat_ms as u64);
        if heartbeat_ms == 0 {
            return Err(p.invalid("heartbeat_ms", "must be > 0"));
        }
        Ok(Self {
            accrual,
            lower_threshold,
            secondary_threshold: p.opt_f64("secondary_threshold")?.unwrap_or(0.0),
            rssi_at_1m_dbm: p.opt_f64("rssi_at_1m_dbm")?,
            path_loss_exponent,
            noise_sigma_db: p.non_negative("noise_sigma_db", p.opt_f64("noise_sigma_db")?.unwrap_or(0.0))?,
            seed: p.opt_u64("seed")?,
            heartbeat_ms: heartbeat_ms as Millis,
        })
    }
}

pub trait CollaborativePlugin: Plugin {
    /// Proposes updates for `devices[0]` given the other participants.
    /// Must not depend on anything but its arguments.
    fn handle_matches(
        &self,
        devices: &[DeviceView],
        timestamp: Millis,
        lower_threshold: f64,
        secondary_threshold: f64,
        params: &ParamMap,
    ) -> Vec<DeviceUpdate>;

    fn settings(&self, params: &ParamMap) -> Result<CollaborationSettings, PluginError> {
        CollaborationSettings::from_params(&self.get_plugin_slug(), params)
    }
}

#[derive(Clone)]
pub enum PluginHandle {
    Filtering(Arc<dyn FilterPlugin>),
    Positioning(Arc<dyn PositioningPlugin>),
    Collaborative(Arc<dyn CollaborativePlugin>),
}

impl PluginHandle {
    fn plugin(&self) -> &dyn Plugin {
        match self {
            PluginHandle::Filtering(p) => p.as_ref(),
            PluginHandle::Positioning(p) => p.as_ref(),
            PluginHandle::Collaborative(p) => p.as_ref(),
        }
    }

    pub fn metadata(&self) -> PluginMetadata {
        self.plugin().metadata()
    }

    pub fn category(&self) -> PluginCategory {
        self.plugin().get_plugin_category()
    }
}

impl fmt::Debug for PluginHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("PluginHandle").field(&self.metadata()).finish()
    }
}

/// A plugin slug plus its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct PluginRef {
    pub slug: String,
    #[serde(default)]
    pub params: ParamMap,
}

impl PluginRef {
    pub fn new(slug: impl Into<String>) -> Self {
        Self {
            slug: slug.into(),
            params: ParamMap::new(),
        }
    }

    pub fn with_param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct PipelineConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filtering: Option<PluginRef>,
    pub positioning: PluginRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collaborative: Option<PluginRef>,
}

impl PipelineConfig {
    /// Parses `filter,positioning,collab` with empty entries meaning
    /// "none" (positioning is mandatory).
    pub fn from_slugs(list: &str) -> Result<Self, PluginError> {
        let parts: Vec<&str> = list.split(',').map(str::trim).collect();
        let (f, p, c) = match parts.as_slice() {
            [p] => ("", *p, ""),
            [f, p] => (*f, *p, ""),
            [f, p, c] => (*f, *p, *c),
            _ => return Err(PluginError::UnknownPlugin(list.to_string())),
        };
        if p.is_empty() {
            return Err(PluginError::UnknownPlugin(String::new()));
        }
        let opt = |s: &str| (!s.is_empty()).then(|| PluginRef::new(s));
        Ok(Self {
            filtering: opt(f),
            positioning: PluginRef::new(p),
            collaborative: opt(c),
        })
    }

    /// Ordered slugs of the configured stages.
    pub fn slugs(&self) -> Vec<String> {
        self.filtering
            .iter()
            .chain(std::iter::once(&self.positioning))
            .chain(self.collaborative.iter())
            .map(|r| r.slug.clone())
            .collect()
    }

    /// Default built-in chain.
    pub fn standard() -> Self {
        Self {
            filtering: Some(PluginRef::new("lowpass")),
            positioning: PluginRef::new("pdr"),
            collaborative: Some(PluginRef::new("drift-correction")),
        }
    }
}

/// A pipeline whose slugs resolved to plugins of the right category and
/// whose parameters validated.
#[derive(Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub filtering: Option<Arc<dyn FilterPlugin>>,
    pub positioning: Arc<dyn PositioningPlugin>,
    pub collaborative: Option<Arc<dyn CollaborativePlugin>>,
    pub collaboration: CollaborationSettings,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline").field("config", &self.config).finish()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    plugins: Vec<PluginHandle>,
}

fn valid_slug(slug: &str) -> bool {
    !slug.is_empty()
        && slug
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-' || b == b'_')
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding the built-in `lowpass`, `pdr` and
    /// `drift-correction` plugins.
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        crate::builtin::register_builtins(&mut r).expect("built-in slugs are unique");
        r
    }

    pub fn register(&mut self, plugin: PluginHandle) -> Result<(), PluginError> {
        let slug = plugin.metadata().slug;
        if !valid_slug(&slug) {
            return Err(PluginError::InvalidSlug(slug));
        }
        if self.get(&slug).is_some() {
            return Err(PluginError::SlugCollision(slug));
        }
        self.plugins.push(plugin);
        Ok(())
    }

    pub fn get(&self, slug: &str) -> Option<&PluginHandle> {
        self.plugins.iter().find(|p| p.metadata().slug == slug)
    }

    /// Metadata in registration order.
    pub fn list(&self) -> Vec<PluginMetadata> {
        self.plugins.iter().map(PluginHandle::metadata).collect()
    }

    pub fn list_category(&self, category: PluginCategory) -> Vec<PluginMetadata> {
        self.list().into_iter().filter(|m| m.category == category).collect()
    }

    fn resolve(&self, r: &PluginRef, expected: PluginCategory) -> Result<&PluginHandle, PluginError> {
        let handle = self
            .get(&r.slug)
            .ok_or_else(|| PluginError::UnknownPlugin(r.slug.clone()))?;
        if handle.category() != expected {
            return Err(PluginError::CategoryMismatch {
                slug: r.slug.clone(),
                expected,
                actual: handle.category(),
            });
        }
        handle.plugin().validate_params(&r.params)?;
        Ok(handle)
    }

    pub fn assemble(&self, config: &PipelineConfig) -> Result<Pipeline, PluginError> {
        let filtering = match &config.filtering {
            Some(r) => match self.resolve(r, PluginCategory::Filtering)? {
                PluginHandle::Filtering(p) => Some(p.clone()),
                _ => unreachable!("category checked"),
            },
            None => None,
        };
        let positioning = match self.resolve(&config.positioning, PluginCategory::Positioning)? {
            PluginHandle::Positioning(p) => p.clone(),
            _ => unreachable!("category checked"),
        };
        let (collaborative, collaboration) = match &config.collaborative {
            Some(r) => match self.resolve(r, PluginCategory::Collaborative)? {
                PluginHandle::Collaborative(p) => (Some(p.clone()), p.settings(&r.params)?),
                _ => unreachable!("category checked"),
            },
            None => (None, CollaborationSettings::default()),
        };
        Ok(Pipeline {
            config: config.clone(),
            filtering,
            positioning,
            collaborative,
            collaboration,
        })
    }
}

/// Typed access to a plugin parameter map.
pub struct Params<'a> {
    slug: &'a str,
    map: &'a ParamMap,
}

impl<'a> Params<'a> {
    pub fn new(slug: &'a str, map: &'a ParamMap) -> Self {
        Self { slug, map }
    }

    pub fn invalid(&self, key: &str, message: impl Into<String>) -> PluginError {
        PluginError::InvalidParameter {
            slug: self.slug.to_string(),
            key: key.to_string(),
            message: message.into(),
        }
    }

    pub fn only(&self, allowed: &[&str]) -> Result<(), PluginError> {
        match self.map.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(PluginError::UnknownParameter {
                slug: self.slug.to_string(),
                key: k.clone(),
            }),
            None => Ok(()),
        }
    }

    pub fn opt_f64(&self, key: &str) -> Result<Option<f64>, PluginError> {
        match self.map.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v
                .as_f64()
                .filter(|x| x.is_finite())
                .map(Some)
                .ok_or_else(|| self.invalid(key, "must be a finite number")),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, PluginError> {
        Ok(self.opt_f64(key)?.unwrap_or(default))
    }

    pub fn opt_u64(&self, key: &str) -> Result<Option<u64>, PluginError> {
        match self.map.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| self.invalid(key, "must be a non-negative integer")),
        }
    }

    pub fn opt_str(&self, key: &str) -> Result<Option<&'a str>, PluginError> {
        match self.map.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.as_str())),
            Some(_) => Err(self.invalid(key, "must be a string")),
        }
    }

    pub fn non_negative(&self, key: &str, v: f64) -> Result<f64, PluginError> {
        if v >= 0.0 {
            Ok(v)
        } else {
            Err(self.invalid(key, "must be >= 0"))
        }
    }

    pub fn positive(&self, key: &str, v: f64) -> Result<f64, PluginError> {
        if v > 0.0 {
            Ok(v)
        } else {
            Err(self.invalid(key, "must be > 0"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_listed_in_order() {
        let r = Registry::with_builtins();
        let slugs: Vec<String> = r.list().into_iter().map(|m| m.slug).collect();
        assert_eq!(slugs, ["lowpass", "pdr", "drift-correction"]);
        let filters = r.list_category(PluginCategory::Filtering);
        assert_eq!(filters.len(), 1);
        assert_eq!(filters[0].slug, "lowpass");
    }

    #[test]
    fn duplicate_slug_rejected() {
        let mut r = Registry::with_builtins();
        let again = Registry::with_builtins().get("lowpass").unwrap().clone();
        assert_eq!(r.register(again), Err(PluginError::SlugCollision("lowpass".into())));
    }

    #[test]
    fn assembly_checks_category_and_params() {
        let r = Registry::with_builtins();
        assert!(r.assemble(&PipelineConfig::standard()).is_ok());

        let wrong = PipelineConfig::from_slugs("pdr,pdr,").unwrap();
        assert!(matches!(r.assemble(&wrong), Err(PluginError::CategoryMismatch { .. })));

        let unknown = PipelineConfig::from_slugs(",kalman,").unwrap();
        assert_eq!(
            r.assemble(&unknown).unwrap_err(),
            PluginError::UnknownPlugin("kalman".into())
        );

        let mut bad = PipelineConfig::standard();
        bad.filtering = Some(PluginRef::new("lowpass").with_param("cutoff_hz", -1.0));
        assert!(matches!(r.assemble(&bad), Err(PluginError::InvalidParameter { .. })));

        let mut typo = PipelineConfig::standard();
        typo.positioning = PluginRef::new("pdr").with_param("step_len", 0.7);
        assert!(matches!(r.assemble(&typo), Err(PluginError::UnknownParameter { .. })));
    }

    #[test]
    fn pipeline_slug_parsing() {
        let p = PipelineConfig::from_slugs("lowpass,pdr,drift-correction").unwrap();
        assert_eq!(p, PipelineConfig::standard());
        assert_eq!(p.slugs(), ["lowpass", "pdr", "drift-correction"]);
        let p = PipelineConfig::from_slugs(",pdr,").unwrap();
        assert!(p.filtering.is_none() && p.collaborative.is_none());
        assert!(PipelineConfig::from_slugs("lowpass,,x").is_err());
    }

    #[test]
    fn collaboration_settings_parsing() {
        let mut params = ParamMap::new();
        params.insert("error_rate_per_second".into(), 0.5.into());
        params.insert("seed".into(), 9.into());
        let s = CollaborationSettings::from_params("x", &params).unwrap();
        assert_eq!(s.accrual, ErrorAccrual::PerSecond(0.5));
        assert_eq!(s.seed, Some(9));
        params.insert("error_rate_per_step".into(), 1.into());
        assert!(CollaborationSettings::from_params("x", &params).is_err());
    }
}
