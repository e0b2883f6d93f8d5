//! Request types, the library calls behind each endpoint, and the router.

use std::collections::BTreeMap;
use std::sync::Arc;

use afn::convae_som::SomGrid;
use afn::explain::{dominant_feature_map, explain_series, Explanation};
use afn::ifm::Forecast;
use afn::risk::{intervene, InterventionResult, InterventionSpec, Steps, DEFAULT_BURST_THRESHOLD};
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Query, State};
use axum::http::header::CONTENT_TYPE;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, FieldError};
use crate::state::{AppState, LoadedModel};

/// Longest horizon a request may ask for.
pub const MAX_HORIZON: usize = 365;

/// Inline `[T, d]` values or the id of a series stored with the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeriesPayload {
    Inline { values: Vec<Vec<f64>> },
    Stored { series_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRequest {
    pub model: String,
    pub series: SeriesPayload,
    pub horizon: usize,
}

pub type ExplainRequest = ForecastRequest;

/// `"auto"`, a comma-separated string, or a list of step indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepsField {
    Named(String),
    List(Vec<usize>),
}

impl Default for StepsField {
    fn default() -> Self {
        StepsField::Named("auto".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterveneRequest {
    pub model: String,
    pub series: SeriesPayload,
    pub horizon: usize,
    pub feature: String,
    pub reduction_pct: f64,
    #[serde(default)]
    pub steps: StepsField,
    #[serde(default = "default_threshold")]
    pub threshold: usize,
}

fn default_threshold() -> usize {
    DEFAULT_BURST_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMeta {
    pub centroid: Vec<f64>,
    /// Raw-scale representative features, when a Shapley table is present.
    pub representative: Option<Vec<f64>>,
    pub decoded: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPayload {
    pub model: String,
    pub grid: SomGrid,
    pub risk: BTreeMap<String, f64>,
    pub dominant_features: Option<BTreeMap<String, String>>,
    pub nodes: BTreeMap<String, NodeMeta>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct GridQuery {
    pub model: String,
}

/// Compact JSON used for every response body and for CLI output files.
pub fn render<T: Serialize>(value: &T) -> Result<String, ApiError> {
    serde_json::to_string(value).map_err(|e| ApiError::Core(e.into()))
}

fn resolve_series(lm: &LoadedModel, series: &SeriesPayload, field: &str) -> Result<(String, Array2<f64>), ApiError> {
    let d = lm.model.d();
    let (id, values) = match series {
        SeriesPayload::Stored { series_id } => {
            let store = lm
                .series
                .as_ref()
                .ok_or_else(|| ApiError::field(&format!("{field}.series_id"), "model has no stored series"))?;
            let i = store
                .series_index(series_id)
                .ok_or_else(|| ApiError::field(&format!("{field}.series_id"), format!("unknown series `{series_id}`")))?;
            return Ok((series_id.clone(), store.series(i).to_owned()));
        }
        SeriesPayload::Inline { values } => ("inline".to_string(), values),
    };
    let mut errors = Vec::new();
    if values.is_empty() {
        errors.push(FieldError::new(&format!("{field}.values"), "series is empty"));
    }
    for (t, row) in values.iter().enumerate() {
        if row.len() != d {
            errors.push(FieldError::new(
                &format!("{field}.values[{t}]"),
                format!("expected {d} features, got {}", row.len()),
            ));
        } else if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            errors.push(FieldError::new(&format!("{field}.values[{t}][{j}]"), "value is not finite"));
        }
    }
    if !errors.is_empty() {
        return Err(ApiError::Validation(errors));
    }
    let flat: Vec<f64> = values.iter().flatten().copied().collect();
    let arr = Array2::from_shape_vec((values.len(), d), flat).map_err(|e| ApiError::field(field, e.to_string()))?;
    Ok((id, arr))
}

fn check_history(lm: &LoadedModel, values: &Array2<f64>, horizon: usize) -> Result<(), ApiError> {
    let mut errors = Vec::new();
    if horizon == 0 || horizon > MAX_HORIZON {
        errors.push(FieldError::new("horizon", format!("horizon must lie in 1..={MAX_HORIZON}")));
    }
    let need = lm.model.required_history();
    if values.nrows() < need {
        errors.push(FieldError::new(
            "series",
            format!("history has {} steps, the model needs at least {need}", values.nrows()),
        ));
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(ApiError::Validation(errors))
    }
}

pub fn forecast(lm: &LoadedModel, req: &ForecastRequest) -> Result<Forecast, ApiError> {
    let (_, values) = resolve_series(lm, &req.series, "series")?;
    check_history(lm, &values, req.horizon)?;
    Ok(lm.model.forecast(values.view(), req.horizon)?)
}

pub fn explain(lm: &LoadedModel, req: &ExplainRequest) -> Result<Explanation, ApiError> {
    let (_, values) = resolve_series(lm, &req.series, "series")?;
    check_history(lm, &values, req.horizon)?;
    if lm.model.config.ablation.al {
        return Err(ApiError::Conflict(
            "model was trained without attention, so it has no attention points to explain".into(),
        ));
    }
    let table = lm
        .shap_table
        .as_ref()
        .ok_or_else(|| ApiError::Conflict("model bundle has no Shapley table; run `afn fit-shap` first".into()))?;
    Ok(explain_series(&lm.model, table, values.view(), req.horizon)?)
}

fn parse_steps(field: &StepsField, history: usize) -> Result<Steps, ApiError> {
    let steps = match field {
        StepsField::Named(s) => Steps::parse(s).map_err(|e| ApiError::field("steps", e.to_string()))?,
        StepsField::List(v) => Steps::Explicit(v.clone()),
    };
    if let Steps::Explicit(v) = &steps {
        if v.is_empty() {
            return Err(ApiError::field("steps", "step list is empty"));
        }
        if let Some(s) = v.iter().find(|&&s| s >= history) {
            return Err(ApiError::field("steps", format!("step {s} is outside the history of length {history}")));
        }
    }
    Ok(steps)
}

pub fn intervene_one(lm: &LoadedModel, req: &InterveneRequest) -> Result<InterventionResult, ApiError> {
    let (id, values) = resolve_series(lm, &req.series, "series")?;
    check_history(lm, &values, req.horizon)?;
    let mut errors = Vec::new();
    if !lm.model.feature_names.contains(&req.feature) {
        errors.push(FieldError::new("feature", format!("unknown feature `{}`", req.feature)));
    }
    if !(req.reduction_pct > 0.0 && req.reduction_pct < 100.0) {
        errors.push(FieldError::new("reduction_pct", "must lie strictly between 0 and 100"));
    }
    if req.threshold == 0 {
        errors.push(FieldError::new("threshold", "must be at least 1"));
    }
    if !errors.is_empty() {
        return Err(ApiError::Validation(errors));
    }
    let steps = parse_steps(&req.steps, values.nrows())?;
    if steps == Steps::Auto && lm.model.config.ablation.al {
        return Err(ApiError::Conflict("automatic steps need attention, which this model was trained without".into()));
    }
    let map = lm
        .risk_map
        .as_ref()
        .ok_or_else(|| ApiError::Conflict("model bundle has no risk map; run `afn set-risk-map` first".into()))?;
    let spec = InterventionSpec {
        feature: &req.feature,
        pct: req.reduction_pct,
        steps,
        horizon: req.horizon,
        threshold: req.threshold,
    };
    Ok(intervene(&lm.model, map, &[(id, values.view())], &spec)?)
}

pub fn grid(lm: &LoadedModel) -> Result<GridPayload, ApiError> {
    let map = lm
        .risk_map
        .as_ref()
        .ok_or_else(|| ApiError::Conflict("model bundle has no risk map; run `afn set-risk-map` first".into()))?;
    let grid = lm.model.vae.grid();
    let centroids = lm.model.vae.centroid_matrix();
    let nodes = (0..grid.n_nodes())
        .map(|k| {
            let key = grid.key(k);
            let shap = lm.shap_table.as_ref().and_then(|t| t.node(k));
            let meta = NodeMeta {
                centroid: centroids.row(k).to_vec(),
                representative: shap.map(|n| n.representative.clone()),
                decoded: shap.map(|n| n.decoded),
            };
            (key, meta)
        })
        .collect();
    Ok(GridPayload {
        model: lm.id.clone(),
        grid,
        risk: map.keyed(),
        dominant_features: lm.shap_table.as_ref().map(dominant_feature_map),
        nodes,
    })
}

fn json_response(body: String) -> Response {
    ([(CONTENT_TYPE, "application/json")], body).into_response()
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|e| ApiError::field("body", e.body_text()))
}

/// Runs a model call off the async executor against the current snapshot.
async fn with_model<T, F>(state: &AppState, id: &str, f: F) -> Result<Response, ApiError>
where
    T: Serialize + Send + 'static,
    F: FnOnce(&LoadedModel) -> Result<T, ApiError> + Send + 'static,
{
    let lm: Arc<LoadedModel> = state.snapshot().get(id)?;
    let out = tokio::task::spawn_blocking(move || f(&lm).and_then(|v| render(&v)))
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))??;
    Ok(json_response(out))
}

async fn forecast_handler(State(state): State<AppState>, payload: Result<Json<ForecastRequest>, JsonRejection>) -> Result<Response, ApiError> {
    let req = body(payload)?;
    let id = req.model.clone();
    with_model(&state, &id, move |lm| forecast(lm, &req)).await
}

async fn explain_handler(State(state): State<AppState>, payload: Result<Json<ExplainRequest>, JsonRejection>) -> Result<Response, ApiError> {
    let req = body(payload)?;
    let id = req.model.clone();
    with_model(&state, &id, move |lm| explain(lm, &req)).await
}

async fn intervene_handler(
    State(state): State<AppState>,
    payload: Result<Json<InterveneRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let req = body(payload)?;
    let id = req.model.clone();
    with_model(&state, &id, move |lm| intervene_one(lm, &req)).await
}

async fn grid_handler(State(state): State<AppState>, query: Result<Query<GridQuery>, QueryRejection>) -> Result<Response, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::field("model", e.body_text()))?;
    with_model(&state, &q.model, grid).await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/forecast", post(forecast_handler))
        .route("/explain", post(explain_handler))
        .route("/intervene", post(intervene_handler))
        .route("/grid", get(grid_handler))
        .with_state(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_payload_accepts_both_shapes() {
        let inline: SeriesPayload = serde_json::from_str(r#"{"values": [[1.0, 2.0]]}"#).unwrap();
        assert_eq!(inline, SeriesPayload::Inline { values: vec![vec![1.0, 2.0]] });
        let stored: SeriesPayload = serde_json::from_str(r#"{"series_id": "p7"}"#).unwrap();
        assert_eq!(stored, SeriesPayload::Stored { series_id: "p7".into() });
    }

    #[test]
    fn steps_default_to_auto_and_parse_lists() {
        let req: InterveneRequest = serde_json::from_str(
            r#"{"model": "m", "series": {"series_id": "a"}, "horizon": 3, "feature": "f", "reduction_pct": 20}"#,
        )
        .unwrap();
        assert_eq!(req.steps, StepsField::Named("auto".into()));
        assert_eq!(req.threshold, DEFAULT_BURST_THRESHOLD);
        assert_eq!(parse_steps(&req.steps, 10).unwrap(), Steps::Auto);
        assert_eq!(parse_steps(&StepsField::Named("1,4".into()), 10).unwrap(), Steps::Explicit(vec![1, 4]));
        assert_eq!(parse_steps(&StepsField::List(vec![2]), 10).unwrap(), Steps::Explicit(vec![2]));
        assert!(parse_steps(&StepsField::List(vec![10]), 10).is_err());
        assert!(parse_steps(&StepsField::List(vec![]), 10).is_err());
    }
}
