//! The `afn` command-line tool.

use std::io::Write;
use std::path::{Path, PathBuf};

use afn::audit::{audit_dataset, AuditConfig, DecompositionModel};
use afn::bundle::{ModelBundle, TmBundle};
use afn::data::{generate_synthetic, load_csv, split, write_csv, CsvOptions, NormStats, SynthConfig, TimeSeriesSet};
use afn::explain::{fit_som_shap, node_representatives, ShapConfig};
use afn::ifm::{train_afn, Ablation, AfnConfig};
use afn::risk::{
    classify_forecast, cohort_metrics, intervene, set_risk_map, CohortMetrics, InterventionSpec, RegimeShareScorer,
    RiskAssessment, RiskMap, Steps, DEFAULT_BURST_THRESHOLD,
};
use afn::transition::pretrain_tm;
use afn::AfnError;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::api::{self, render, ExplainRequest, ForecastRequest, SeriesPayload};
use crate::config::ServiceConfig;
use crate::error::ApiError;
use crate::state::{AppState, LoadedModel};

#[derive(Debug, Parser)]
#[command(name = "afn", version, about = "Train, explain and serve regime-aware forecasting models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Part {
    All,
    Train,
    Test,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// CSV with `series_id,timestamp,<feature...>` columns.
    #[arg(long, conflicts_with = "synth")]
    pub data: Option<PathBuf>,
    /// Synthetic generator config; the set is regenerated from its seed.
    #[arg(long)]
    pub synth: Option<PathBuf>,
    /// Feature columns to read; defaults to the model's features, or every non-key column.
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<String>,
    /// Which side of a per-series split to use.
    #[arg(long, value_enum, default_value = "all")]
    pub part: Part,
    #[arg(long, default_value_t = 0.75)]
    pub split_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic regime-switching set as CSV.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Randomness audit of a dataset.
    Audit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 30)]
        n: usize,
        #[arg(long, default_value_t = 13)]
        sample_length: usize,
        #[arg(long, default_value_t = 1000)]
        repeats: usize,
        #[arg(long, default_value_t = 7)]
        period: usize,
        #[arg(long)]
        max_lags: Option<usize>,
        #[arg(long)]
        multiplicative: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the transition module alone.
    PretrainTm {
        #[command(flatten)]
        data: DataArgs,
        /// Model config JSON; defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a full model and write its bundle.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pretrained transition module from `pretrain-tm` on the same data.
        #[arg(long)]
        tm: Option<PathBuf>,
        /// Ablation switch: none, tm, al, df or fft. Overrides the config.
        #[arg(long)]
        ablate: Option<String>,
        /// Do not fit the Shapley table after training.
        #[arg(long)]
        skip_shap: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit (or refit) the node Shapley table of a bundle.
    FitShap {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        shap_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach a risk map to a bundle.
    SetRiskMap {
        #[arg(long)]
        model: PathBuf,
        /// JSON object of node scores keyed "i,j", or a full risk map.
        #[arg(long, conflicts_with = "risky_regimes")]
        scores: Option<PathBuf>,
        /// Score nodes by the share of these synthetic regimes among their training points.
        #[arg(long, value_delimiter = ',')]
        risky_regimes: Vec<usize>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecast one series.
    Forecast {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        series: String,
        #[arg(long, default_value_t = 6)]
        horizon: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention points, feature ranking and node Shapley rows for one series.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        series: String,
        #[arg(long, default_value_t = 6)]
        horizon: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// SR/SH assessment of every series in a cohort.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        cohort: DataArgs,
        #[arg(long, default_value_t = 6)]
        horizon: usize,
        #[arg(long, default_value_t = DEFAULT_BURST_THRESHOLD)]
        threshold: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// What-if reduction of one feature over a cohort or a single series.
    Intervene {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        cohort: DataArgs,
        #[arg(long)]
        series: Option<String>,
        #[arg(long)]
        feature: String,
        #[arg(long)]
        pct: f64,
        /// "auto" for attention points, or comma-separated step indices.
        #[arg(long, default_value = "auto")]
        steps: String,
        #[arg(long, default_value_t = 6)]
        horizon: usize,
        #[arg(long, default_value_t = DEFAULT_BURST_THRESHOLD)]
        threshold: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve bundles over HTTP.
    Serve {
        /// Service config; falls back to the environment variable.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesAssessment {
    pub series_id: String,
    pub assessment: RiskAssessment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyOutput {
    pub assessments: Vec<SeriesAssessment>,
    pub metrics: CohortMetrics,
}

fn header_features(path: &Path) -> Result<Vec<String>, ApiError> {
    let mut rdr = csv::Reader::from_path(path).map_err(AfnError::from)?;
    let headers = rdr.headers().map_err(AfnError::from)?;
    Ok(headers
        .iter()
        .map(|h| h.trim().to_string())
        .filter(|h| h != "series_id" && h != "timestamp" && h != "regime")
        .collect())
}

/// Loads the selected data; `schema` pins the feature columns when given.
pub fn load_data(args: &DataArgs, schema: Option<&[String]>) -> Result<TimeSeriesSet, ApiError> {
    let set = match (&args.data, &args.synth) {
        (Some(path), None) => {
            let features = if !args.features.is_empty() {
                args.features.clone()
            } else if let Some(s) = schema {
                s.to_vec()
            } else {
                header_features(path)?
            };
            load_csv(path, &features, &CsvOptions::default())?
        }
        (None, Some(path)) => {
            let set = generate_synthetic(&SynthConfig::from_json_file(path)?)?;
            if let Some(s) = schema {
                if s != set.feature_names.as_slice() {
                    return Err(ApiError::Core(AfnError::Input("synthetic features do not match the model".into())));
                }
            }
            set
        }
        _ => return Err(ApiError::Config("pass exactly one of --data or --synth".into())),
    };
    Ok(match args.part {
        Part::All => set,
        Part::Train => split(&set, args.split_ratio, args.split_seed)?.0,
        Part::Test => split(&set, args.split_ratio, args.split_seed)?.1,
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ApiError> {
    let text = std::fs::read_to_string(path).map_err(AfnError::from)?;
    Ok(serde_json::from_str(&text).map_err(AfnError::from)?)
}

fn emit(out: Option<&Path>, body: &str) -> Result<(), ApiError> {
    match out {
        Some(p) => std::fs::write(p, body).map_err(AfnError::from)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(body.as_bytes()).map_err(AfnError::from)?;
            stdout.write_all(b"\n").map_err(AfnError::from)?;
        }
    }
    Ok(())
}

fn loaded(model: &Path, data: &DataArgs) -> Result<LoadedModel, ApiError> {
    let bundle = ModelBundle::load(model)?;
    let set = load_data(data, Some(&bundle.feature_names))?;
    LoadedModel::from_bundle("cli", bundle, Some(set))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScoresFile {
    Map(RiskMap),
    Keyed(std::collections::BTreeMap<String, f64>),
}

pub fn run(cli: Cli) -> Result<(), ApiError> {
    match cli.command {
        Command::Synth { config, out } => {
            let set = generate_synthetic(&SynthConfig::from_json_file(&config)?)?;
            let file = std::fs::File::create(&out).map_err(AfnError::from)?;
            write_csv(&set, file)?;
        }
        Command::Audit {
            data,
            n,
            sample_length,
            repeats,
            period,
            max_lags,
            multiplicative,
            seed,
            out,
        } => {
            let set = load_data(&data, None)?;
            let cfg = AuditConfig {
                n,
                sample_length,
                repeats,
                period,
                max_lags,
                model: if multiplicative {
                    DecompositionModel::Multiplicative
                } else {
                    DecompositionModel::Additive
                },
                seed,
            };
            emit(out.as_deref(), &render(&audit_dataset(&set, &cfg)?)?)?;
        }
        Command::PretrainTm { data, config, out } => {
            let cfg: AfnConfig = config.as_deref().map(read_json).transpose()?.unwrap_or_default();
            let train = load_data(&data, None)?;
            let norm = NormStats::fit(&train)?;
            let tm = pretrain_tm(&norm.apply(&train), &cfg.tm)?;
            std::fs::write(&out, serde_json::to_string_pretty(&TmBundle::from_model(&tm)).map_err(AfnError::from)?)
                .map_err(AfnError::from)?;
        }
        Command::Train {
            data,
            config,
            tm,
            ablate,
            skip_shap,
            out,
        } => {
            let mut cfg: AfnConfig = config.as_deref().map(read_json).transpose()?.unwrap_or_default();
            if let Some(a) = ablate {
                cfg.ablation = Ablation::parse(&a)?;
            }
            let train = load_data(&data, None)?;
            let tm = match tm {
                Some(p) => Some(read_json::<TmBundle>(&p)?.model()?),
                None => None,
            };
            let model = train_afn(&train, &cfg, tm)?;
            let mut bundle = ModelBundle::from_model(&model);
            if !skip_shap && !model.config.ablation.al {
                bundle.shap_table = Some(fit_som_shap(&model, &train, &ShapConfig::default())?);
            }
            bundle.save(&out)?;
        }
        Command::FitShap {
            model,
            data,
            shap_config,
            out,
        } => {
            let mut bundle = ModelBundle::load(&model)?;
            let m = bundle.model()?;
            let set = load_data(&data, Some(&bundle.feature_names))?;
            let cfg: ShapConfig = shap_config.as_deref().map(read_json).transpose()?.unwrap_or_default();
            bundle.shap_table = Some(fit_som_shap(&m, &set, &cfg)?);
            bundle.save(&out)?;
        }
        Command::SetRiskMap {
            model,
            scores,
            risky_regimes,
            data,
            out,
        } => {
            let mut bundle = ModelBundle::load(&model)?;
            let grid = bundle.config.convae.grid;
            let map = match scores {
                Some(p) => match read_json::<ScoresFile>(&p)? {
                    ScoresFile::Map(m) => m,
                    ScoresFile::Keyed(k) => {
                        let scores = (0..grid.n_nodes())
                            .map(|i| {
                                k.get(&grid.key(i)).copied().ok_or_else(|| {
                                    ApiError::Core(AfnError::Scorer(format!("missing score for node {}", grid.key(i))))
                                })
                            })
                            .collect::<Result<Vec<_>, _>>()?;
                        RiskMap::new(grid, scores)?
                    }
                },
                None => {
                    if risky_regimes.is_empty() {
                        return Err(ApiError::Config("pass --scores or --risky-regimes".into()));
                    }
                    let m = bundle.model()?;
                    let set = load_data(&data, Some(&bundle.feature_names))?;
                    let reps = node_representatives(&m, &set)?;
                    let scorer = RegimeShareScorer::fit(&m, &set, &risky_regimes)?;
                    set_risk_map(grid, &reps.x, &scorer)?
                }
            };
            if map.grid() != grid {
                return Err(ApiError::Core(AfnError::Scorer("risk map grid does not match the model".into())));
            }
            bundle.risk_map = Some(map);
            bundle.save(&out)?;
        }
        Command::Forecast {
            model,
            data,
            series,
            horizon,
            out,
        } => {
            let lm = loaded(&model, &data)?;
            let req = ForecastRequest {
                model: lm.id.clone(),
                series: SeriesPayload::Stored { series_id: series },
                horizon,
            };
            emit(out.as_deref(), &render(&api::forecast(&lm, &req)?)?)?;
        }
        Command::Explain {
            model,
            data,
            series,
            horizon,
            out,
        } => {
            let lm = loaded(&model, &data)?;
            let req = ExplainRequest {
                model: lm.id.clone(),
                series: SeriesPayload::Stored { series_id: series },
                horizon,
            };
            emit(out.as_deref(), &render(&api::explain(&lm, &req)?)?)?;
        }
        Command::Classify {
            model,
            cohort,
            horizon,
            threshold,
            out,
        } => {
            let lm = loaded(&model, &cohort)?;
            let map = lm
                .risk_map
                .as_ref()
                .ok_or_else(|| ApiError::Conflict("model bundle has no risk map; run `afn set-risk-map` first".into()))?;
            let set = lm.series.as_ref().expect("cohort loaded");
            let mut assessments = Vec::with_capacity(set.n_series());
            for (i, id) in set.series_ids.iter().enumerate() {
                let f = lm.model.forecast(set.series(i), horizon)?;
                assessments.push(SeriesAssessment {
                    series_id: id.clone(),
                    assessment: classify_forecast(&f, map, threshold)?,
                });
            }
            let plain: Vec<RiskAssessment> = assessments.iter().map(|a| a.assessment.clone()).collect();
            let metrics = cohort_metrics(&plain, None)?;
            emit(out.as_deref(), &render(&ClassifyOutput { assessments, metrics })?)?;
        }
        Command::Intervene {
            model,
            cohort,
            series,
            feature,
            pct,
            steps,
            horizon,
            threshold,
            out,
        } => {
            let lm = loaded(&model, &cohort)?;
            let map = lm
                .risk_map
                .as_ref()
                .ok_or_else(|| ApiError::Conflict("model bundle has no risk map; run `afn set-risk-map` first".into()))?;
            let set = lm.series.as_ref().expect("cohort loaded");
            let members: Vec<usize> = match &series {
                Some(id) => vec![set
                    .series_index(id)
                    .ok_or_else(|| ApiError::field("series", format!("unknown series `{id}`")))?],
                None => (0..set.n_series()).collect(),
            };
            let views: Vec<_> = members.iter().map(|&i| (set.series_ids[i].clone(), set.series(i))).collect();
            let spec = InterventionSpec {
                feature: &feature,
                pct,
                steps: Steps::parse(&steps)?,
                horizon,
                threshold,
            };
            emit(out.as_deref(), &render(&intervene(&lm.model, map, &views, &spec)?)?)?;
        }
        Command::Serve { config } => serve(ServiceConfig::locate(config)?)?,
    }
    Ok(())
}

fn serve(config_path: PathBuf) -> Result<(), ApiError> {
    let cfg = ServiceConfig::load(&config_path)?;
    let state = AppState::from_config_file(config_path)?;
    let runtime = tokio::runtime::Runtime::new().map_err(AfnError::from)?;
    runtime.block_on(async move {
        let addr = format!("{}:{}", cfg.host, cfg.port);
        let listener = tokio::net::TcpListener::bind(&addr).await.map_err(AfnError::from)?;
        log::info!("serving {:?} on {addr}", state.snapshot().ids());
        spawn_reload_on_hangup(state.clone());
        axum::serve(listener, api::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(AfnError::from)?;
        Ok(())
    })
}

#[cfg(unix)]
fn spawn_reload_on_hangup(state: AppState) {
    use tokio::signal::unix::{signal, SignalKind};
    tokio::spawn(async move {
        let Ok(mut hup) = signal(SignalKind::hangup()) else {
            log::warn!("cannot listen for SIGHUP; hot reload disabled");
            return;
        };
        while hup.recv().await.is_some() {
            let s = state.clone();
            match tokio::task::spawn_blocking(move || s.reload()).await {
                Ok(Ok(ids)) => log::info!("reloaded models {ids:?}"),
                Ok(Err(e)) => log::error!("reload failed, keeping the previous models: {e}"),
                Err(e) => log::error!("reload task failed: {e}"),
            }
        }
    });
}

#[cfg(not(unix))]
fn spawn_reload_on_hangup(_: AppState) {}
