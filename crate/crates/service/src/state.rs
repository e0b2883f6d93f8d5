use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use afn::bundle::ModelBundle;
use afn::data::{load_csv, CsvOptions, TimeSeriesSet};
use afn::explain::ShapTable;
use afn::ifm::AfnModel;
use afn::risk::RiskMap;

use crate::config::{ModelEntry, ServiceConfig};
use crate::error::ApiError;

/// One bundle, rebuilt and ready to serve. Never mutated after loading.
#[derive(Debug)]
pub struct LoadedModel {
    pub id: String,
    pub model: AfnModel,
    pub risk_map: Option<RiskMap>,
    pub shap_table: Option<ShapTable>,
    pub series: Option<TimeSeriesSet>,
}

impl LoadedModel {
    pub fn from_bundle(id: &str, bundle: ModelBundle, series: Option<TimeSeriesSet>) -> Result<Self, ApiError> {
        let model = bundle.model()?;
        Ok(Self {
            id: id.to_string(),
            model,
            risk_map: bundle.risk_map,
            shap_table: bundle.shap_table,
            series,
        })
    }

    pub fn load(entry: &ModelEntry) -> Result<Self, ApiError> {
        let bundle = ModelBundle::load(&entry.bundle_path)?;
        let series = match &entry.series_path {
            Some(p) => Some(load_csv(p, &bundle.feature_names, &CsvOptions::default())?),
            None => None,
        };
        Self::from_bundle(&entry.id, bundle, series)
    }
}

#[derive(Debug, Default)]
pub struct Registry {
    models: BTreeMap<String, Arc<LoadedModel>>,
}

impl Registry {
    pub fn load(cfg: &ServiceConfig) -> Result<Self, ApiError> {
        let mut reg = Registry::default();
        for entry in &cfg.models {
            log::info!("loading model `{}` from {}", entry.id, entry.bundle_path.display());
            reg.insert(LoadedModel::load(entry)?);
        }
        Ok(reg)
    }

    pub fn insert(&mut self, model: LoadedModel) {
        self.models.insert(model.id.clone(), Arc::new(model));
    }

    pub fn get(&self, id: &str) -> Result<Arc<LoadedModel>, ApiError> {
        self.models.get(id).cloned().ok_or_else(|| ApiError::UnknownModel(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.models.keys().cloned().collect()
    }
}

/// Shared handle to the current registry snapshot. Requests clone the inner
/// `Arc` once and keep using it even if a reload swaps in a new registry.
#[derive(Clone, Default)]
pub struct AppState {
    current: Arc<RwLock<Arc<Registry>>>,
    config_path: Option<PathBuf>,
}

impl AppState {
    pub fn new(registry: Registry) -> Self {
        Self {
            current: Arc::new(RwLock::new(Arc::new(registry))),
            config_path: None,
        }
    }

    pub fn from_config_file(path: PathBuf) -> Result<Self, ApiError> {
        let cfg = ServiceConfig::load(&path)?;
        let mut state = Self::new(Registry::load(&cfg)?);
        state.config_path = Some(path);
        Ok(state)
    }

    pub fn snapshot(&self) -> Arc<Registry> {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn swap(&self, registry: Registry) {
        *self.current.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(registry);
    }

    /// Re-reads the config file and replaces the registry; on failure the
    /// old snapshot stays in place.
    pub fn reload(&self) -> Result<Vec<String>, ApiError> {
        let path = self
            .config_path
            .as_ref()
            .ok_or_else(|| ApiError::Config("state was not built from a config file".into()))?;
        let registry = Registry::load(&ServiceConfig::load(path)?)?;
        let ids = registry.ids();
        self.swap(registry);
        Ok(ids)
    }
}
