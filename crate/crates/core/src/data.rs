//! Dataset model, CSV ingestion, normalization, splitting and the synthetic
//! regime-switching generator.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::{s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AfnError, Result};

pub const DEFAULT_FEATURES: [&str; 8] = [
    "time_spent",
    "late_night_games",
    "cash_added",
    "cash_games",
    "win_pct",
    "deposit_limit_requests",
    "invalid_declarations",
    "drop_adherence",
];

/// `N` series of `T` steps with `d` features each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSet {
    pub series_ids: Vec<String>,
    /// `[N, T, d]`
    pub values: Array3<f64>,
    pub feature_names: Vec<String>,
    /// `[N, T]`, synthetic ground truth only.
    pub regime_labels: Option<Array2<usize>>,
    pub sampling_period: String,
}

impl TimeSeriesSet {
    pub fn new(series_ids: Vec<String>, values: Array3<f64>, feature_names: Vec<String>) -> Result<Self> {
        let (n, _, d) = values.dim();
        if series_ids.len() != n {
            return Err(AfnError::Input(format!("{} ids for {n} series", series_ids.len())));
        }
        if feature_names.len() != d {
            return Err(AfnError::Input(format!("{} names for {d} features", feature_names.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AfnError::Input("values must be finite".into()));
        }
        Ok(Self {
            series_ids,
            values,
            feature_names,
            regime_labels: None,
            sampling_period: "1d".into(),
        })
    }

    pub fn n_series(&self) -> usize {
        self.values.dim().0
    }

    pub fn len(&self) -> usize {
        self.values.dim().1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.values.dim().2
    }

    /// `[T, d]` view of one series.
    pub fn series(&self, i: usize) -> ndarray::ArrayView2<'_, f64> {
        self.values.index_axis(Axis(0), i)
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    pub fn series_index(&self, id: &str) -> Option<usize> {
        self.series_ids.iter().position(|s| s == id)
    }

    /// Subset of series in the given order.
    pub fn select(&self, idx: &[usize]) -> TimeSeriesSet {
        TimeSeriesSet {
            series_ids: idx.iter().map(|&i| self.series_ids[i].clone()).collect(),
            values: self.values.select(Axis(0), idx),
            feature_names: self.feature_names.clone(),
            regime_labels: self.regime_labels.as_ref().map(|r| r.select(Axis(0), idx)),
            sampling_period: self.sampling_period.clone(),
        }
    }

    /// Steps `start..end` of every series.
    pub fn slice_time(&self, start: usize, end: usize) -> TimeSeriesSet {
        TimeSeriesSet {
            series_ids: self.series_ids.clone(),
            values: self.values.slice(s![.., start..end, ..]).to_owned(),
            feature_names: self.feature_names.clone(),
            regime_labels: self
                .regime_labels
                .as_ref()
                .map(|r| r.slice(s![.., start..end]).to_owned()),
            sampling_period: self.sampling_period.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LengthPolicy {
    /// Cut every series to the shortest length (keeping the earliest steps).
    #[default]
    Truncate,
    /// Extend shorter series by repeating their last observation.
    Pad,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvOptions {
    pub length_policy: LengthPolicy,
    /// Forward-fill then back-fill missing cells; when false a missing cell is an error.
    pub impute: bool,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            length_policy: LengthPolicy::Truncate,
            impute: true,
        }
    }
}

/// Load `series_id,timestamp,<feature...>` rows.
pub fn load_csv(path: impl AsRef<Path>, schema: &[String], options: &CsvOptions) -> Result<TimeSeriesSet> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema, options)
}

pub fn read_csv(reader: impl std::io::Read, schema: &[String], options: &CsvOptions) -> Result<TimeSeriesSet> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| AfnError::MissingColumn(name.to_string()))
    };
    let id_col = col("series_id")?;
    let ts_col = col("timestamp")?;
    let feat_cols = schema.iter().map(|f| col(f)).collect::<Result<Vec<_>>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(String, Vec<Option<f64>>)>> = HashMap::new();
    for (i, record) in rdr.records().enumerate() {
        // 1-based data row, header excluded
        let row_no = i + 1;
        let record = record?;
        let id = record.get(id_col).unwrap_or("").trim().to_string();
        let ts = record.get(ts_col).unwrap_or("").trim().to_string();
        let mut vals = Vec::with_capacity(feat_cols.len());
        for &c in &feat_cols {
            let cell = record.get(c).unwrap_or("").trim();
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") || cell.eq_ignore_ascii_case("na") {
                vals.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| AfnError::Parse {
                    row: row_no,
                    message: format!("non-numeric value `{cell}` in column `{}`", &headers[c]),
                })?;
                vals.push(if v.is_finite() { Some(v) } else { None });
            }
        }
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().push((ts, vals));
    }
    if order.is_empty() {
        return Err(AfnError::Input("csv contains no rows".into()));
    }

    let d = schema.len();
    let mut series: Vec<Vec<Vec<f64>>> = Vec::with_capacity(order.len());
    for id in &order {
        let mut recs = rows.remove(id).unwrap_or_default();
        recs.sort_by(|a, b| compare_timestamps(&a.0, &b.0));
        let mut cols: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(recs.len()); d];
        for (_, vals) in &recs {
            for (j, v) in vals.iter().enumerate() {
                cols[j].push(*v);
            }
        }
        let mut filled = Vec::with_capacity(d);
        for (j, c) in cols.into_iter().enumerate() {
            if !options.impute && c.iter().any(Option::is_none) {
                return Err(AfnError::MissingValue {
                    series: id.clone(),
                    feature: schema[j].clone(),
                });
            }
            filled.push(fill_missing(&c).ok_or_else(|| AfnError::MissingValue {
                series: id.clone(),
                feature: schema[j].clone(),
            })?);
        }
        series.push(filled);
    }

    let lens: Vec<usize> = series.iter().map(|s| s[0].len()).collect();
    let t = match options.length_policy {
        LengthPolicy::Truncate => *lens.iter().min().unwrap_or(&0),
        LengthPolicy::Pad => *lens.iter().max().unwrap_or(&0),
    };
    let mut values = Array3::zeros((order.len(), t, d));
    for (i, s) in series.iter().enumerate() {
        for (j, col) in s.iter().enumerate() {
            for k in 0..t {
                values[[i, k, j]] = col[k.min(col.len() - 1)];
            }
        }
    }
    TimeSeriesSet::new(order, values, schema.to_vec())
}

fn compare_timestamps(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        _ => a.cmp(b),
    }
}

/// Forward-fill then back-fill; `None` when every value is missing.
pub fn fill_missing(col: &[Option<f64>]) -> Option<Vec<f64>> {
    let first = col.iter().flatten().next().copied()?;
    let mut out = Vec::with_capacity(col.len());
    let mut last = first;
    for v in col {
        if let Some(v) = v {
            last = *v;
        }
        out.push(last);
    }
    // leading gap: back-fill with the first observed value
    for (v, o) in col.iter().zip(out.iter_mut()) {
        if v.is_some() {
            break;
        }
        *o = first;
    }
    Some(out)
}

pub fn write_csv(set: &TimeSeriesSet, writer: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["series_id".to_string(), "timestamp".to_string()];
    header.extend(set.feature_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..set.n_series() {
        for t in 0..set.len() {
            let mut rec = vec![set.series_ids[i].clone(), t.to_string()];
            rec.extend((0..set.n_features()).map(|j| set.values[[i, t, j]].to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(set: &TimeSeriesSet) -> Result<Self> {
        if set.len() < 2 {
            return Err(AfnError::Precondition("normalization needs T >= 2".into()));
        }
        let flat = set
            .values
            .to_shape((set.n_series() * set.len(), set.n_features()))
            .map_err(|e| AfnError::Input(e.to_string()))?;
        let mean = flat.mean_axis(Axis(0)).expect("non-empty");
        let mut std = flat.std_axis(Axis(0), 0.0);
        for (j, s) in std.iter_mut().enumerate() {
            if !(*s > 1e-12) {
                log::warn!("feature `{}` is constant; using std = 1", set.feature_names[j]);
                *s = 1.0;
            }
        }
        Ok(Self {
            mean: mean.to_vec(),
            std: std.to_vec(),
        })
    }

    pub fn apply(&self, set: &TimeSeriesSet) -> TimeSeriesSet {
        let mut out = set.clone();
        for mut v in out.values.lanes_mut(Axis(2)) {
            for (j, x) in v.iter_mut().enumerate() {
                *x = (*x - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    pub fn invert(&self, set: &TimeSeriesSet) -> TimeSeriesSet {
        let mut out = set.clone();
        for mut v in out.values.lanes_mut(Axis(2)) {
            for (j, x) in v.iter_mut().enumerate() {
                *x = *x * self.std[j] + self.mean[j];
            }
        }
        out
    }

    pub fn normalize_row(&self, row: &mut [f64]) {
        for (j, x) in row.iter_mut().enumerate() {
            *x = (*x - self.mean[j]) / self.std[j];
        }
    }

    pub fn denormalize_row(&self, row: &mut [f64]) {
        for (j, x) in row.iter_mut().enumerate() {
            *x = *x * self.std[j] + self.mean[j];
        }
    }
}

pub fn zscore_fit_apply(set: &TimeSeriesSet) -> Result<(TimeSeriesSet, NormStats)> {
    let stats = NormStats::fit(set)?;
    Ok((stats.apply(set), stats))
}

/// Random split across series; `round(ratio * N)` series go to the train side.
pub fn split(set: &TimeSeriesSet, ratio: f64, seed: u64) -> Result<(TimeSeriesSet, TimeSeriesSet)> {
    let n = set.n_series();
    if n < 2 {
        return Err(AfnError::Precondition(format!("split needs at least 2 series, got {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(AfnError::Precondition(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let n_train = split_sizes(n, ratio).0;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, test) = idx.split_at(n_train);
    Ok((set.select(train), set.select(test)))
}

/// `(train, test)` sizes for a split, keeping both sides non-empty.
pub fn split_sizes(n: usize, ratio: f64) -> (usize, usize) {
    let train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    (train, n - train)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeEmission {
    pub mean: Vec<f64>,
    pub cov_scale: f64,
    pub trend_slope: Vec<f64>,
    pub seasonal_amplitude: Vec<f64>,
    pub seasonal_period: f64,
}

impl RegimeEmission {
    pub fn flat(mean: Vec<f64>) -> Self {
        let d = mean.len();
        Self {
            mean,
            cov_scale: 1.0,
            trend_slope: vec![0.0; d],
            seasonal_amplitude: vec![0.0; d],
            seasonal_period: 7.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub d: usize,
    #[serde(rename = "R")]
    pub r: usize,
    pub regime_transition_matrix: Vec<Vec<f64>>,
    pub emissions: Vec<RegimeEmission>,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default)]
    pub feature_names: Option<Vec<String>>,
    /// Initial regime distribution; uniform when absent.
    #[serde(default)]
    pub initial_distribution: Option<Vec<f64>>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AfnError::Config(m));
        if self.n == 0 || self.t == 0 || self.d == 0 || self.r == 0 {
            return bad("N, T, d and R must be positive".into());
        }
        if self.regime_transition_matrix.len() != self.r {
            return bad(format!("transition matrix must have {} rows", self.r));
        }
        for (i, row) in self.regime_transition_matrix.iter().enumerate() {
            if row.len() != self.r || row.iter().any(|p| !(*p >= 0.0)) {
                return bad(format!("transition row {i} must hold {} non-negative entries", self.r));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return bad(format!("transition row {i} sums to {s}, not 1"));
            }
        }
        if self.emissions.len() != self.r {
            return bad(format!("need {} emission blocks", self.r));
        }
        for e in &self.emissions {
            if e.mean.len() != self.d || e.trend_slope.len() != self.d || e.seasonal_amplitude.len() != self.d {
                return bad("emission vectors must have length d".into());
            }
            if !(e.seasonal_period > 0.0) || !(e.cov_scale >= 0.0) {
                return bad("seasonal period must be positive and cov scale non-negative".into());
            }
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative".into());
        }
        if let Some(p) = &self.initial_distribution {
            if p.len() != self.r || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("initial distribution must be a probability vector over R".into());
            }
        }
        if let Some(names) = &self.feature_names {
            if names.len() != self.d {
                return bad("feature_names must have length d".into());
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: SynthConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn names(&self) -> Vec<String> {
        match &self.feature_names {
            Some(n) => n.clone(),
            None => (0..self.d)
                .map(|j| {
                    DEFAULT_FEATURES
                        .get(j)
                        .map(|s| s.to_string())
                        .unwrap_or_else(|| format!("feature_{j}"))
                })
                .collect(),
        }
    }

    /// Three persistent regimes with distinct levels, the last one "risky"
    /// (high cash and deposit-limit activity). `win_pct` carries no regime
    /// signal and `invalid_declarations` is zero-mean noise.
    pub fn benchmark(n: usize, t: usize, seed: u64) -> Self {
        let stay = 0.95;
        let leave = (1.0 - stay) / 2.0;
        let means = [
            // time, late, cash, games, win, limit, invalid, drop
            [-1.0, -0.8, -1.0, -0.8, 0.0, -0.6, 0.0, 0.6],
            [0.8, 0.2, 0.0, 0.9, 0.0, -0.2, 0.0, 0.0],
            [0.6, 1.2, 1.5, 0.6, 0.0, 1.4, 0.0, -0.8],
        ];
        let slopes = [
            [0.004, 0.0, 0.0, 0.004, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.004, 0.004, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.006, 0.006, 0.008, 0.0, 0.0, 0.006, 0.0, -0.004],
        ];
        let emissions = (0..3)
            .map(|r| RegimeEmission {
                mean: means[r].to_vec(),
                cov_scale: 1.0,
                trend_slope: slopes[r].to_vec(),
                seasonal_amplitude: [0.4, 0.3, 0.2, 0.4, 0.0, 0.0, 0.0, 0.1].to_vec(),
                seasonal_period: 7.0,
            })
            .collect();
        SynthConfig {
            n,
            t,
            d: 8,
            r: 3,
            regime_transition_matrix: (0..3)
                .map(|i| (0..3).map(|j| if i == j { stay } else { leave }).collect())
                .collect(),
            emissions,
            noise_std: 0.35,
            seed,
            feature_names: None,
            initial_distribution: None,
        }
    }

    /// Rapidly switching regimes over flat levels with heavy noise.
    pub fn high_switching(n: usize, t: usize, seed: u64) -> Self {
        let r = 3;
        let d = 8;
        let emissions = (0..r)
            .map(|k| RegimeEmission::flat((0..d).map(|j| ((k + j) % 3) as f64 * 0.3).collect()))
            .collect();
        SynthConfig {
            n,
            t,
            d,
            r,
            regime_transition_matrix: vec![vec![1.0 / 3.0; r]; r],
            emissions,
            noise_std: 1.0,
            seed,
            feature_names: None,
            initial_distribution: None,
        }
    }

    /// Single regime with trend and weekly seasonality and little noise.
    pub fn smooth(n: usize, t: usize, seed: u64) -> Self {
        let d = 8;
        SynthConfig {
            n,
            t,
            d,
            r: 1,
            regime_transition_matrix: vec![vec![1.0]],
            emissions: vec![RegimeEmission {
                mean: vec![5.0; d],
                cov_scale: 1.0,
                trend_slope: (0..d).map(|j| 0.05 + 0.01 * j as f64).collect(),
                seasonal_amplitude: vec![1.0; d],
                seasonal_period: 7.0,
            }],
            noise_std: 0.1,
            seed,
            feature_names: None,
            initial_distribution: None,
        }
    }
}

/// Sample a regime path per series from the Markov chain, then emit
/// `mean + slope * t + amplitude * sin(2 pi t / period) + noise`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<TimeSeriesSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, t_len, d, r) = (cfg.n, cfg.t, cfg.d, cfg.r);
    let init = cfg
        .initial_distribution
        .clone()
        .unwrap_or_else(|| vec![1.0 / r as f64; r]);
    let mut values = Array3::zeros((n, t_len, d));
    let mut labels = Array2::zeros((n, t_len));
    for i in 0..n {
        let mut state = sample_categorical(&mut rng, &init);
        for t in 0..t_len {
            if t > 0 {
                state = sample_categorical(&mut rng, &cfg.regime_transition_matrix[state]);
            }
            labels[[i, t]] = state;
            let e = &cfg.emissions[state];
            let phase = 2.0 * PI * t as f64 / e.seasonal_period;
            for j in 0..d {
                let noise: f64 = rng.sample(StandardNormal);
                values[[i, t, j]] = e.mean[j]
                    + e.trend_slope[j] * t as f64
                    + e.seasonal_amplitude[j] * phase.sin()
                    + cfg.noise_std * e.cov_scale * noise;
            }
        }
    }
    let ids = (0..n).map(|i| format!("s{i:05}")).collect();
    let mut set = TimeSeriesSet::new(ids, values, cfg.names())?;
    set.regime_labels = Some(labels);
    Ok(set)
}

fn sample_categorical(rng: &mut impl Rng, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Standard normal draws, used by tests and calibration helpers.
pub fn gaussian_noise(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
