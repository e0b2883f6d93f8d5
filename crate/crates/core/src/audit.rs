//! Randomness audit: runs test, autocorrelation significance ratio and
//! classical trend/seasonal/residual decomposition with explained-variance
//! accounting.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::TimeSeriesSet;
use crate::error::{AfnError, Result};

/// Wald–Wolfowitz runs test on an already dichotomized sequence, two-sided
/// normal approximation without continuity correction.
pub fn runs_test_binary(seq: &[bool]) -> Result<f64> {
    let n1 = seq.iter().filter(|&&b| b).count() as f64;
    let n2 = seq.len() as f64 - n1;
    let n = n1 + n2;
    if n1 == 0.0 || n2 == 0.0 {
        return Err(AfnError::UndefinedTest("runs test needs both symbols".into()));
    }
    let runs = 1 + seq.windows(2).filter(|w| w[0] != w[1]).count();
    let mu = 2.0 * n1 * n2 / n + 1.0;
    let var = 2.0 * n1 * n2 * (2.0 * n1 * n2 - n) / (n * n * (n - 1.0));
    if !(var > 0.0) {
        return Err(AfnError::UndefinedTest("runs test variance is zero".into()));
    }
    let z = (runs as f64 - mu) / var.sqrt();
    let normal = Normal::standard();
    Ok((2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0))
}

/// Runs test around the median; values equal to the median are dropped.
pub fn runs_test(series: &[f64]) -> Result<f64> {
    if series.len() < 10 {
        return Err(AfnError::Precondition(format!(
            "runs test needs at least 10 observations, got {}",
            series.len()
        )));
    }
    let med = median(series);
    let seq: Vec<bool> = series.iter().filter(|&&x| x != med).map(|&x| x > med).collect();
    runs_test_binary(&seq)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sample autocorrelation for lags `1..=max_lags` using the biased
/// (divide-by-T) autocovariance.
pub fn acf(series: &[f64], max_lags: usize) -> Result<Vec<f64>> {
    let t = series.len();
    if max_lags < 1 || t <= max_lags {
        return Err(AfnError::Precondition(format!(
            "acf needs T > max_lags >= 1 (T = {t}, max_lags = {max_lags})"
        )));
    }
    let mean = series.iter().sum::<f64>() / t as f64;
    let c0: f64 = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t as f64;
    if !(c0 > 0.0) {
        return Err(AfnError::UndefinedTest("acf of a constant series".into()));
    }
    Ok((1..=max_lags)
        .map(|k| {
            let ck: f64 = (0..t - k).map(|i| (series[i] - mean) * (series[i + k] - mean)).sum::<f64>() / t as f64;
            ck / c0
        })
        .collect())
}

/// Fraction of lags whose |acf| exceeds `2 / sqrt(T)`.
pub fn acf_ratio(series: &[f64], max_lags: usize) -> Result<f64> {
    let r = acf(series, max_lags)?;
    let bound = 2.0 / (series.len() as f64).sqrt();
    Ok(r.iter().filter(|v| v.abs() > bound).count() as f64 / max_lags as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecompositionModel {
    #[default]
    Additive,
    Multiplicative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub trend: Vec<f64>,
    pub seasonal: Vec<f64>,
    pub residual: Vec<f64>,
    /// Range of steps where the moving-average trend is defined; outside it the
    /// trend is linearly extrapolated.
    pub interior: (usize, usize),
    pub model: DecompositionModel,
}

/// Classical decomposition: centered moving-average trend, period-mean
/// seasonal indices, remainder as residual.
pub fn decompose(series: &[f64], period: usize, model: DecompositionModel) -> Result<Decomposition> {
    let t = series.len();
    if period < 2 || t < 2 * period {
        return Err(AfnError::Precondition(format!(
            "decomposition needs period >= 2 and T >= 2 * period (T = {t}, period = {period})"
        )));
    }
    if model == DecompositionModel::Multiplicative && series.iter().any(|&x| !(x > 0.0)) {
        return Err(AfnError::Domain("multiplicative decomposition needs a strictly positive series".into()));
    }
    let (trend, lo, hi) = centered_moving_average(series, period);
    let mut trend = trend;
    extrapolate_trend(&mut trend, lo, hi, period);
    if model == DecompositionModel::Multiplicative {
        let first = trend[lo];
        let last = trend[hi - 1];
        for (i, v) in trend.iter_mut().enumerate() {
            if !(*v > 0.0) {
                *v = if i < lo { first } else { last };
            }
        }
    }

    let mut sums = vec![0.0; period];
    let mut counts = vec![0usize; period];
    for i in lo..hi {
        let detrended = match model {
            DecompositionModel::Additive => series[i] - trend[i],
            DecompositionModel::Multiplicative => series[i] / trend[i],
        };
        sums[i % period] += detrended;
        counts[i % period] += 1;
    }
    let mut index: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c.max(1) as f64).collect();
    let avg = index.iter().sum::<f64>() / period as f64;
    match model {
        DecompositionModel::Additive => index.iter_mut().for_each(|v| *v -= avg),
        DecompositionModel::Multiplicative => index.iter_mut().for_each(|v| *v /= avg),
    }
    let seasonal: Vec<f64> = (0..t).map(|i| index[i % period]).collect();
    let residual = (0..t)
        .map(|i| match model {
            DecompositionModel::Additive => series[i] - trend[i] - seasonal[i],
            DecompositionModel::Multiplicative => series[i] / (trend[i] * seasonal[i]),
        })
        .collect();
    Ok(Decomposition {
        trend,
        seasonal,
        residual,
        interior: (lo, hi),
        model,
    })
}

/// Centered moving average (2 x period for even periods). Returns the trend
/// (zeros outside the interior) and the interior bounds.
fn centered_moving_average(x: &[f64], period: usize) -> (Vec<f64>, usize, usize) {
    let t = x.len();
    let half = period / 2;
    let mut trend = vec![0.0; t];
    let (lo, hi) = (half, t - half);
    for (i, v) in trend.iter_mut().enumerate().take(hi).skip(lo) {
        *v = if period % 2 == 1 {
            x[i - half..=i + half].iter().sum::<f64>() / period as f64
        } else {
            let inner: f64 = x[i + 1 - half..i + half].iter().sum();
            (0.5 * x[i - half] + inner + 0.5 * x[i + half]) / period as f64
        };
    }
    (trend, lo, hi)
}

fn extrapolate_trend(trend: &mut [f64], lo: usize, hi: usize, period: usize) {
    let span = period.min(hi - lo);
    let fit = |idx: &[usize], trend: &[f64]| {
        let n = idx.len() as f64;
        let mx = idx.iter().map(|&i| i as f64).sum::<f64>() / n;
        let my = idx.iter().map(|&i| trend[i]).sum::<f64>() / n;
        let sxx: f64 = idx.iter().map(|&i| (i as f64 - mx).powi(2)).sum();
        let sxy: f64 = idx.iter().map(|&i| (i as f64 - mx) * (trend[i] - my)).sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        (slope, my - slope * mx)
    };
    let head: Vec<usize> = (lo..lo + span).collect();
    let (a, b) = fit(&head, trend);
    for (i, v) in trend.iter_mut().enumerate().take(lo) {
        *v = b + a * i as f64;
    }
    let tail: Vec<usize> = (hi - span..hi).collect();
    let (a, b) = fit(&tail, trend);
    let t = trend.len();
    for (i, v) in trend.iter_mut().enumerate().take(t).skip(hi) {
        *v = b + a * i as f64;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplainedVariance {
    pub trend: f64,
    pub seasonal: f64,
    pub residual: f64,
    pub residual_std: f64,
}

/// Sum of squares of each component over the sum of squares of the original
/// series, in percent. Components are not orthogonal, so the shares need not
/// add up to 100.
pub fn explained_variance(components: &Decomposition, original: &[f64]) -> Result<ExplainedVariance> {
    let n = original.len();
    if components.trend.len() != n || components.seasonal.len() != n || components.residual.len() != n {
        return Err(AfnError::Precondition("component lengths differ from the original".into()));
    }
    let ss = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let total = ss(original);
    if !(total > 0.0) {
        return Err(AfnError::Domain("original series has zero energy".into()));
    }
    let mean_r = components.residual.iter().sum::<f64>() / n as f64;
    let var_r = components.residual.iter().map(|r| (r - mean_r).powi(2)).sum::<f64>() / n as f64;
    Ok(ExplainedVariance {
        trend: 100.0 * ss(&components.trend) / total,
        seasonal: 100.0 * ss(&components.seasonal) / total,
        residual: 100.0 * ss(&components.residual) / total,
        residual_std: var_r.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    /// Series sampled per repeat.
    pub n: usize,
    pub sample_length: usize,
    pub repeats: usize,
    /// Seasonal period for the decomposition, which runs on whole series.
    pub period: usize,
    /// Lags for the ACF ratio; `sample_length / 2` when absent.
    pub max_lags: Option<usize>,
    pub model: DecompositionModel,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            n: 30,
            sample_length: 13,
            repeats: 1000,
            period: 7,
            max_lags: None,
            model: DecompositionModel::Additive,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplainedVarianceReport {
    pub trend: f64,
    pub seasonal: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub runs_p_mean: f64,
    pub runs_p_std: f64,
    pub acf_ratio_mean: f64,
    pub acf_ratio_std: f64,
    pub explained_variance: ExplainedVarianceReport,
    pub residual_std: f64,
    pub n_samples: usize,
    pub sample_length: usize,
    pub repeats: usize,
    /// Per-feature statistics that could not be computed (e.g. constant samples).
    pub skipped: usize,
}

/// Repeated sampling audit: each repeat draws `n` series, takes a random
/// slice of `sample_length` from each, and averages per-feature runs-test
/// p-values and ACF ratios; mean and population std are taken over repeats.
pub fn audit_dataset(set: &TimeSeriesSet, cfg: &AuditConfig) -> Result<AuditReport> {
    let (n_series, t, d) = set.values.dim();
    if cfg.sample_length > t {
        return Err(AfnError::Precondition(format!(
            "sample length {} exceeds series length {t}",
            cfg.sample_length
        )));
    }
    if cfg.n == 0 || cfg.repeats == 0 {
        return Err(AfnError::Precondition("n and repeats must be positive".into()));
    }
    let max_lags = cfg.max_lags.unwrap_or((cfg.sample_length / 2).max(1));
    let n = cfg.n.min(n_series);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut skipped = 0usize;
    let mut runs_means = Vec::with_capacity(cfg.repeats);
    let mut acf_means = Vec::with_capacity(cfg.repeats);
    let mut ev_acc = [0.0; 4];
    let mut ev_count = 0usize;
    let mut buf = vec![0.0; t];

    for _ in 0..cfg.repeats {
        let chosen = sample(&mut rng, n_series, n);
        let mut runs_sum = 0.0;
        let mut runs_cnt = 0usize;
        let mut acf_sum = 0.0;
        let mut acf_cnt = 0usize;
        for i in chosen.iter() {
            let start = rng.random_range(0..=t - cfg.sample_length);
            let mut r_feat = (0.0, 0usize);
            let mut a_feat = (0.0, 0usize);
            for j in 0..d {
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = set.values[[i, k, j]];
                }
                let slice = &buf[start..start + cfg.sample_length];
                match runs_test(slice) {
                    Ok(p) => r_feat = (r_feat.0 + p, r_feat.1 + 1),
                    Err(_) => skipped += 1,
                }
                match acf_ratio(slice, max_lags) {
                    Ok(r) => a_feat = (a_feat.0 + r, a_feat.1 + 1),
                    Err(_) => skipped += 1,
                }
                match decompose(&buf, cfg.period, cfg.model).and_then(|dc| explained_variance(&dc, &buf)) {
                    Ok(ev) => {
                        ev_acc[0] += ev.trend;
                        ev_acc[1] += ev.seasonal;
                        ev_acc[2] += ev.residual;
                        ev_acc[3] += ev.residual_std;
                        ev_count += 1;
                    }
                    Err(_) => skipped += 1,
                }
            }
            if r_feat.1 > 0 {
                runs_sum += r_feat.0 / r_feat.1 as f64;
                runs_cnt += 1;
            }
            if a_feat.1 > 0 {
                acf_sum += a_feat.0 / a_feat.1 as f64;
                acf_cnt += 1;
            }
        }
        if runs_cnt > 0 {
            runs_means.push(runs_sum / runs_cnt as f64);
        }
        if acf_cnt > 0 {
            acf_means.push(acf_sum / acf_cnt as f64);
        }
    }
    if runs_means.is_empty() || acf_means.is_empty() {
        return Err(AfnError::UndefinedTest("every sampled statistic was undefined".into()));
    }
    let (rm, rs) = mean_std(&runs_means);
    let (am, as_) = mean_std(&acf_means);
    let ec = ev_count.max(1) as f64;
    Ok(AuditReport {
        runs_p_mean: rm,
        runs_p_std: rs,
        acf_ratio_mean: am,
        acf_ratio_std: as_,
        explained_variance: ExplainedVarianceReport {
            trend: ev_acc[0] / ec,
            seasonal: ev_acc[1] / ec,
            residual: ev_acc[2] / ec,
        },
        residual_std: ev_acc[3] / ec,
        n_samples: n,
        sample_length: cfg.sample_length,
        repeats: cfg.repeats,
        skipped,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}
