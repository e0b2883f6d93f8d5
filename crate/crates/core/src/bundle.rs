//! Versioned single-file JSON model bundle.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{AfnError, Result};
use crate::explain::ShapTable;
use crate::ifm::{AfnConfig, AfnModel, EpochLog};
use crate::nn::NamedTensor;
use crate::risk::RiskMap;
use crate::transition::{TmConfig, TransitionModel, WindowClusterModel};

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmBundle {
    pub config: TmConfig,
    pub cluster_model: WindowClusterModel,
    pub weights: Vec<NamedTensor>,
    pub loss_history: Vec<f64>,
}

impl TmBundle {
    pub fn from_model(tm: &TransitionModel) -> Self {
        Self {
            config: tm.config.clone(),
            cluster_model: tm.cluster_model.clone(),
            weights: tm.params.to_tensors(),
            loss_history: tm.loss_history.clone(),
        }
    }

    pub fn model(&self) -> Result<TransitionModel> {
        let mut tm = TransitionModel::new(self.config.clone(), self.cluster_model.clone())?;
        tm.params.load_tensors(&self.weights)?;
        tm.loss_history = self.loss_history.clone();
        Ok(tm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: u32,
    pub config: AfnConfig,
    pub feature_names: Vec<String>,
    pub norm: NormStats,
    pub tm: Option<TmBundle>,
    pub map_weights: Vec<NamedTensor>,
    pub forecaster_weights: Vec<NamedTensor>,
    pub training_log: Vec<EpochLog>,
    pub risk_map: Option<RiskMap>,
    pub shap_table: Option<ShapTable>,
}

impl ModelBundle {
    pub fn from_model(model: &AfnModel) -> Self {
        Self {
            version: BUNDLE_VERSION,
            config: model.config.clone(),
            feature_names: model.feature_names.clone(),
            norm: model.norm.clone(),
            tm: model.tm.as_ref().map(TmBundle::from_model),
            map_weights: model.vae.params.to_tensors(),
            forecaster_weights: model.ifm.params.to_tensors(),
            training_log: model.log.clone(),
            risk_map: None,
            shap_table: None,
        }
    }

    /// Rebuilds the architecture from the stored config and loads the weights.
    pub fn model(&self) -> Result<AfnModel> {
        if self.version != BUNDLE_VERSION {
            return Err(AfnError::Bundle(format!("unsupported bundle version {}", self.version)));
        }
        let tm = self.tm.as_ref().map(TmBundle::model).transpose()?;
        let mut model = AfnModel::new(self.config.clone(), self.feature_names.clone(), self.norm.clone(), tm)?;
        model.vae.params.load_tensors(&self.map_weights)?;
        model.ifm.params.load_tensors(&self.forecaster_weights)?;
        model.log = self.training_log.clone();
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let b: Self = serde_json::from_str(s)?;
        if let Some(map) = &b.risk_map {
            let grid = b.config.convae.grid;
            if map.grid() != grid {
                return Err(AfnError::Bundle("risk map grid does not match the model".into()));
            }
        }
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convae_som::{ConvaeConfig, SomGrid};
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::ifm::{train_afn, Ablation};

    fn small_cfg(ablation: Ablation) -> AfnConfig {
        AfnConfig {
            tm: TmConfig {
                k: 3,
                c: 3,
                m: 2,
                dmm_hidden: vec![6],
                cond_hidden: vec![4],
                warmup_epochs: 1,
                cond_init_epochs: 1,
                epochs: 1,
                ..TmConfig::default()
            },
            convae: ConvaeConfig {
                latent_dim: Some(2),
                encoder_hidden: vec![6],
                decoder_hidden: vec![6],
                grid: SomGrid { height: 3, width: 3 },
                ..ConvaeConfig::default()
            },
            lstm_hidden: 4,
            attention_dim: 3,
            damping_hidden: vec![4, 3],
            segment_len: 5,
            batch_size: 4,
            batches_per_epoch: Some(2),
            vae_warmup_epochs: 1,
            stage_a_epochs: 1,
            stage_b_epochs: 1,
            stage_c_epochs: 1,
            ablation,
            ..AfnConfig::default()
        }
    }

    #[test]
    fn round_trip_preserves_model_and_forecasts() {
        let set = generate_synthetic(&SynthConfig::benchmark(10, 16, 1)).unwrap();
        for ab in ["none", "tm"] {
            let model = train_afn(&set, &small_cfg(Ablation::parse(ab).unwrap()), None).unwrap();
            let bundle = ModelBundle::from_model(&model);
            let json = bundle.to_json().unwrap();
            let back = ModelBundle::from_json(&json).unwrap();
            assert_eq!(back.to_json().unwrap(), json);
            let rebuilt = back.model().unwrap();
            assert_eq!(rebuilt, model);
            let f1 = model.forecast(set.series(0), 4).unwrap();
            let f2 = rebuilt.forecast(set.series(0), 4).unwrap();
            assert_eq!(serde_json::to_string(&f1).unwrap(), serde_json::to_string(&f2).unwrap());
        }
    }

    #[test]
    fn rejects_foreign_versions_and_tensor_mismatch() {
        let set = generate_synthetic(&SynthConfig::benchmark(10, 16, 1)).unwrap();
        let model = train_afn(&set, &small_cfg(Ablation::default()), None).unwrap();
        let mut b = ModelBundle::from_model(&model);
        b.version = 99;
        assert!(matches!(b.model(), Err(AfnError::Bundle(_))));
        let mut b = ModelBundle::from_model(&model);
        b.map_weights.pop();
        assert!(b.model().is_err());
    }
}
