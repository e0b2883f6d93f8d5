#![allow(dead_code)]

use afn::bundle::ModelBundle;
use afn::convae_som::{ConvaeConfig, SomGrid};
use afn::data::{generate_synthetic, SynthConfig, TimeSeriesSet};
use afn::explain::{fit_som_shap, node_representatives, ShapConfig};
use afn::ifm::{train_afn, Ablation, AfnConfig};
use afn::risk::{set_risk_map, RegimeShareScorer};
use afn::transition::TmConfig;
use afn_service::{AppState, LoadedModel, Registry};
use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use tower::ServiceExt;

pub fn small_config(ablation: Ablation) -> AfnConfig {
    AfnConfig {
        tm: TmConfig {
            dmm_hidden: vec![16],
            cond_hidden: vec![8],
            warmup_epochs: 2,
            cond_init_epochs: 2,
            epochs: 2,
            ..TmConfig::default()
        },
        convae: ConvaeConfig {
            latent_dim: Some(3),
            encoder_hidden: vec![16],
            decoder_hidden: vec![16],
            grid: SomGrid { height: 8, width: 8 },
            ..ConvaeConfig::default()
        },
        lstm_hidden: 8,
        attention_dim: 6,
        damping_hidden: vec![8, 4],
        segment_len: 10,
        batch_size: 16,
        batches_per_epoch: Some(6),
        vae_warmup_epochs: 2,
        stage_a_epochs: 3,
        stage_b_epochs: 3,
        stage_c_epochs: 1,
        ablation,
        ..AfnConfig::default()
    }
}

pub fn small_set() -> TimeSeriesSet {
    generate_synthetic(&SynthConfig::benchmark(60, 30, 4)).unwrap()
}

/// Trained bundle with a risk map and, unless attention is ablated, a Shapley table.
pub fn small_bundle(ablation: &str) -> ModelBundle {
    let set = small_set();
    let model = train_afn(&set, &small_config(Ablation::parse(ablation).unwrap()), None).unwrap();
    let mut bundle = ModelBundle::from_model(&model);
    let reps = node_representatives(&model, &set).unwrap();
    let scorer = RegimeShareScorer::fit(&model, &set, &[2]).unwrap();
    bundle.risk_map = Some(set_risk_map(model.vae.grid(), &reps.x, &scorer).unwrap());
    if !model.config.ablation.al {
        let cfg = ShapConfig {
            background: 20,
            ..ShapConfig::default()
        };
        bundle.shap_table = Some(fit_som_shap(&model, &set, &cfg).unwrap());
    }
    bundle
}

pub fn state_with(models: Vec<(&str, ModelBundle)>) -> AppState {
    let mut reg = Registry::default();
    for (id, b) in models {
        reg.insert(LoadedModel::from_bundle(id, b, Some(small_set())).unwrap());
    }
    AppState::new(reg)
}

pub fn series_values(set: &TimeSeriesSet, i: usize) -> Vec<Vec<f64>> {
    set.series(i).rows().into_iter().map(|r| r.to_vec()).collect()
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<String>) -> (StatusCode, String) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

pub async fn post(app: &Router, uri: &str, body: serde_json::Value) -> (StatusCode, String) {
    call(app, Method::POST, uri, Some(body.to_string())).await
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, String) {
    call(app, Method::GET, uri, None).await
}

pub fn json(body: &str) -> serde_json::Value {
    serde_json::from_str(body).unwrap()
}
