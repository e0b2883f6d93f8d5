//! Transition module: window clustering into behaviour proportions (pi
//! vectors), a feed-forward Markov model predicting the next proportions and
//! a conditional network that discretizes them into regimes.

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesSet;
use crate::error::{AfnError, Result};
use crate::nn::{Adam, Bound, Mlp, ParamStore};
use crate::tape::{softmax_rows, Tape, Var};

/// Assigns fixed-length windows to one of `k` behaviour clusters.
pub trait WindowClusterer {
    fn k(&self) -> usize;
    fn window_len(&self) -> usize;
    fn assign(&self, window: ArrayView2<'_, f64>) -> usize;
}

/// Per-feature mean, population std and OLS slope over a `[C, d]` window.
pub fn summarize_window(window: ArrayView2<'_, f64>) -> Vec<f64> {
    let (c, d) = window.dim();
    let n = c as f64;
    let tm = (n - 1.0) / 2.0;
    let sxx: f64 = (0..c).map(|i| (i as f64 - tm).powi(2)).sum();
    let mut out = Vec::with_capacity(3 * d);
    for j in 0..d {
        let col = window.column(j);
        let mean = col.sum() / n;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let slope = if sxx > 0.0 {
            col.iter().enumerate().map(|(i, x)| (i as f64 - tm) * (x - mean)).sum::<f64>() / sxx
        } else {
            0.0
        };
        out.extend([mean, var.sqrt(), slope]);
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Index of the nearest center; ties go to the lowest index.
pub fn nearest(point: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if k < 2 {
        return Err(AfnError::Precondition(format!("k-means needs k >= 2, got {k}")));
    }
    if points.len() < k {
        return Err(AfnError::Clustering(format!("{} points for {k} clusters", points.len())));
    }
    let mut distinct = 1;
    for p in &points[1..] {
        if sq_dist(p, &points[0]) > 1e-24 {
            distinct += 1;
            break;
        }
    }
    if distinct < 2 {
        return Err(AfnError::Clustering("all points are identical".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        if total <= 0.0 {
            return Err(AfnError::Clustering(format!("fewer than {k} distinct points")));
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = points.len() - 1;
        for (i, d) in dist.iter().enumerate() {
            if target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        centers.push(points[pick].clone());
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    let dim = points[0].len();
    let mut labels = vec![0; points.len()];
    for iter in 0..max_iter {
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(points) {
            let n = nearest(p, &centers);
            if n != *l || iter == 0 {
                changed |= n != *l;
                *l = n;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (l, p) in labels.iter().zip(points) {
            counts[*l] += 1;
            for (s, x) in sums[*l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed && iter > 0 {
            break;
        }
    }
    Ok((centers, labels))
}

const KMEANS_RESTARTS: usize = 10;

/// Lowest-inertia result over `restarts` seeded k-means runs.
pub fn kmeans_restarts(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut best: Option<(f64, (Vec<Vec<f64>>, Vec<usize>))> = None;
    for r in 0..restarts.max(1) {
        let (centers, labels) = kmeans(points, k, seed.wrapping_add(r as u64 * 7919), 100)?;
        let inertia: f64 = labels.iter().zip(points).map(|(l, p)| sq_dist(p, &centers[*l])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, (centers, labels)));
        }
    }
    Ok(best.expect("at least one run").1)
}

/// Centroid clustering of centered window summaries. Summaries are left on
/// the feature scale: per-dimension standardization lets the heavy-tailed
/// std and slope of regime-straddling windows outweigh the levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowClusterModel {
    pub k: usize,
    pub window_len: usize,
    pub centroids: Vec<Vec<f64>>,
    pub summary_mean: Vec<f64>,
}

impl WindowClusterModel {
    pub fn summary(&self, window: ArrayView2<'_, f64>) -> Vec<f64> {
        summarize_window(window)
            .into_iter()
            .enumerate()
            .map(|(i, v)| v - self.summary_mean[i])
            .collect()
    }

    /// Cluster of every window start `0..=T-C`.
    pub fn assign_series(&self, series: ArrayView2<'_, f64>) -> Vec<usize> {
        let t = series.nrows();
        if t < self.window_len {
            return Vec::new();
        }
        (0..=t - self.window_len)
            .map(|s| self.assign(series.slice(s![s..s + self.window_len, ..])))
            .collect()
    }
}

impl WindowClusterer for WindowClusterModel {
    fn k(&self) -> usize {
        self.k
    }

    fn window_len(&self) -> usize {
        self.window_len
    }

    fn assign(&self, window: ArrayView2<'_, f64>) -> usize {
        nearest(&self.summary(window), &self.centroids)
    }
}

pub fn fit_window_clusters(train: &TimeSeriesSet, k: usize, c: usize, seed: u64) -> Result<WindowClusterModel> {
    if k < 2 {
        return Err(AfnError::Precondition(format!("K must be at least 2, got {k}")));
    }
    if c < 2 || c > train.len() {
        return Err(AfnError::Precondition(format!("window length {c} invalid for T = {}", train.len())));
    }
    let mut summaries = Vec::new();
    for i in 0..train.n_series() {
        let series = train.series(i);
        for s in 0..=train.len() - c {
            summaries.push(summarize_window(series.slice(s![s..s + c, ..])));
        }
    }
    if summaries.len() < 10 * k {
        return Err(AfnError::Precondition(format!(
            "{} windows are too few for {k} clusters (need {})",
            summaries.len(),
            10 * k
        )));
    }
    let dim = summaries[0].len();
    let n = summaries.len() as f64;
    let mut mean = vec![0.0; dim];
    for s in &summaries {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n;
        }
    }
    for s in summaries.iter_mut() {
        for (v, m) in s.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let (centroids, _) = kmeans_restarts(&summaries, k, seed, KMEANS_RESTARTS)?;
    Ok(WindowClusterModel {
        k,
        window_len: c,
        centroids,
        summary_mean: mean,
    })
}

/// Proportion of each cluster among `assignments`.
pub fn pi_from_assignments(assignments: &[usize], k: usize) -> Vec<f64> {
    let mut pi = vec![0.0; k];
    for &a in assignments {
        pi[a] += 1.0;
    }
    let m = assignments.len() as f64;
    pi.iter_mut().for_each(|p| *p /= m);
    pi
}

/// Pi vector at exclusive end `t`: cluster proportions of the `M` windows of
/// length `C` starting at `t-C-M+1 ..= t-C`.
pub fn summarize_history(
    series: ArrayView2<'_, f64>,
    t: usize,
    c: usize,
    m: usize,
    cm: &dyn WindowClusterer,
) -> Result<Vec<f64>> {
    let tau = c + m;
    if t < tau || t > series.nrows() {
        return Err(AfnError::History {
            required: tau,
            available: t.min(series.nrows()),
        });
    }
    let assignments: Vec<usize> = (t - c + 1 - m..=t - c)
        .map(|s| cm.assign(series.slice(s![s..s + c, ..])))
        .collect();
    Ok(pi_from_assignments(&assignments, cm.k()))
}

/// Pi vector for every step: row `s` summarizes history up to and including
/// step `s`. Steps before the first full history reuse the first available
/// vector.
pub fn pi_path(series: ArrayView2<'_, f64>, c: usize, m: usize, cm: &WindowClusterModel) -> Result<Array2<f64>> {
    let t = series.nrows();
    let tau = c + m;
    if t < tau {
        return Err(AfnError::History {
            required: tau,
            available: t,
        });
    }
    let assign = cm.assign_series(series);
    let mut out = Array2::zeros((t, cm.k));
    for s in tau - 1..t {
        let end = s + 1;
        let pi = pi_from_assignments(&assign[end - c + 1 - m..=end - c], cm.k);
        out.row_mut(s).assign(&ndarray::ArrayView1::from(&pi));
    }
    let first = out.row(tau - 1).to_owned();
    for s in 0..tau - 1 {
        out.row_mut(s).assign(&first);
    }
    Ok(out)
}

/// Condition distribution over `rho` regimes with its argmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub distribution: Vec<f64>,
    pub discrete: usize,
}

impl Condition {
    pub fn from_distribution(distribution: Vec<f64>) -> Self {
        let discrete = argmax(&distribution);
        Self { distribution, discrete }
    }

    pub fn one_hot(k: usize, rho: usize) -> Self {
        let mut distribution = vec![0.0; rho];
        distribution[k] = 1.0;
        Self { distribution, discrete: k }
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionLosses {
    pub mse: f64,
    pub conditional: f64,
    pub transition: f64,
}

/// Losses for a single step: L2 distance between pi vectors, the
/// `1/rho`-scaled cross entropy between condition distributions, and their sum.
pub fn transition_losses(pi_true: &[f64], pi_hat: &[f64], c_true: &[f64], c_pred: &[f64]) -> TransitionLosses {
    let mse = pi_true.iter().zip(pi_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let rho = c_true.len() as f64;
    let ce: f64 = c_true
        .iter()
        .zip(c_pred)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * q.ln())
        .sum();
    let conditional = -ce / rho;
    TransitionLosses {
        mse,
        conditional,
        transition: mse + conditional,
    }
}

/// Tape versions of the transition losses, averaged over rows.
pub struct TransitionLossVars {
    pub mse: Var,
    pub conditional: Var,
    pub transition: Var,
}

pub fn transition_loss_vars(
    tape: &Tape,
    pi_true: Var,
    pi_hat: Var,
    c_true: Var,
    c_pred_log: Var,
    rho: usize,
) -> TransitionLossVars {
    let mse = tape.mean(tape.norm_rows(tape.sub(pi_true, pi_hat)));
    let ce = tape.mean(tape.sum_rows(tape.mul(c_true, c_pred_log)));
    let conditional = tape.scale(ce, -1.0 / rho as f64);
    let transition = tape.add(mse, conditional);
    TransitionLossVars {
        mse,
        conditional,
        transition,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TmConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub rho: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub markov_order: usize,
    pub dmm_hidden: Vec<usize>,
    pub cond_hidden: Vec<usize>,
    pub batch_size: usize,
    /// Epochs fitting the Markov model alone before conditions are trained.
    pub warmup_epochs: usize,
    /// Epochs fitting the conditional network to a clustering of pi vectors.
    pub cond_init_epochs: usize,
    /// Epochs on the full transition loss.
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TmConfig {
    fn default() -> Self {
        Self {
            k: 5,
            rho: 3,
            c: 4,
            m: 9,
            markov_order: 1,
            dmm_hidden: vec![500, 128],
            cond_hidden: vec![16],
            batch_size: 128,
            warmup_epochs: 5,
            cond_init_epochs: 5,
            epochs: 10,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl TmConfig {
    pub fn tau(&self) -> usize {
        self.c + self.m
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(AfnError::Precondition(format!("K must be at least 2, got {}", self.k)));
        }
        if self.rho < 2 {
            return Err(AfnError::Config(format!("rho must be at least 2, got {}", self.rho)));
        }
        if self.c < 2 || self.m < 1 || self.markov_order < 1 || self.batch_size == 0 {
            return Err(AfnError::Config("C >= 2, M >= 1, markov_order >= 1 and batch_size >= 1 required".into()));
        }
        Ok(())
    }
}

/// Pretrained transition module. Weights live in `params`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    pub config: TmConfig,
    pub cluster_model: WindowClusterModel,
    pub params: ParamStore,
    pub dmm: Mlp,
    pub cond: Mlp,
    /// Mean transition loss per epoch of the last pretraining run.
    pub loss_history: Vec<f64>,
}

impl TransitionModel {
    pub fn new(config: TmConfig, cluster_model: WindowClusterModel) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(17));
        let mut params = ParamStore::new();
        let k = config.k;
        let dmm = Mlp::new(&mut params, &mut rng, "tm.dmm", k * config.markov_order, &config.dmm_hidden, k);
        let cond = Mlp::new(&mut params, &mut rng, "tm.cond", k, &config.cond_hidden, config.rho);
        Ok(Self {
            config,
            cluster_model,
            params,
            dmm,
            cond,
            loss_history: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn rho(&self) -> usize {
        self.config.rho
    }

    pub fn tau(&self) -> usize {
        self.config.tau()
    }

    /// Next pi distribution from `[n, K * markov_order]` inputs.
    pub fn dmm_forward(&self, tape: &Tape, p: &Bound, input: Var) -> Var {
        tape.softmax_rows(self.dmm.forward(tape, p, input))
    }

    /// Condition logits from `[n, K]` pi vectors.
    pub fn cond_logits(&self, tape: &Tape, p: &Bound, pi: Var) -> Var {
        self.cond.forward(tape, p, pi)
    }

    pub fn dmm_predict_batch(&self, input: &Array2<f64>) -> Array2<f64> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let x = tape.constant(input.clone());
        let out = self.dmm_forward(&tape, &p, x);
        let v = tape.value(out).clone();
        v
    }

    pub fn condition_batch(&self, pi: &Array2<f64>) -> Array2<f64> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let x = tape.constant(pi.clone());
        let logits = self.cond_logits(&tape, &p, x);
        let v = softmax_rows(&tape.value(logits));
        v
    }

    /// Prediction of the next pi vector. `pi_prev` holds the last
    /// `markov_order` vectors, most recent first.
    pub fn dmm_predict(&self, pi_prev: &[f64]) -> Result<Vec<f64>> {
        let width = self.k() * self.config.markov_order;
        if pi_prev.len() != width {
            return Err(AfnError::Input(format!("expected {width} inputs, got {}", pi_prev.len())));
        }
        let x = Array2::from_shape_vec((1, width), pi_prev.to_vec()).expect("shape");
        Ok(self.dmm_predict_batch(&x).row(0).to_vec())
    }

    pub fn condition_of(&self, pi: &[f64]) -> Result<Condition> {
        if pi.len() != self.k() {
            return Err(AfnError::Input(format!("expected {} proportions, got {}", self.k(), pi.len())));
        }
        let x = Array2::from_shape_vec((1, pi.len()), pi.to_vec()).expect("shape");
        Ok(Condition::from_distribution(self.condition_batch(&x).row(0).to_vec()))
    }

    /// Pi paths for every series of a (normalized) set, `[N, T, K]`.
    pub fn pi_paths(&self, set: &TimeSeriesSet) -> Result<Array3<f64>> {
        let (n, t, _) = set.values.dim();
        let mut out = Array3::zeros((n, t, self.k()));
        for i in 0..n {
            let p = pi_path(set.series(i), self.config.c, self.config.m, &self.cluster_model)?;
            out.slice_mut(s![i, .., ..]).assign(&p);
        }
        Ok(out)
    }

    /// Markov-model input at step `s` of a pi path: the last `markov_order`
    /// vectors, most recent first, clamped at the start.
    pub fn dmm_input(&self, path: ArrayView2<'_, f64>, s: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.k() * self.config.markov_order);
        for lag in 0..self.config.markov_order {
            v.extend(path.row(s.saturating_sub(lag)).iter());
        }
        v
    }

    /// Conditions for every step of one pi path.
    pub fn conditions_for_path(&self, path: &Array2<f64>) -> Vec<Condition> {
        self.condition_batch(path)
            .rows()
            .into_iter()
            .map(|r| Condition::from_distribution(r.to_vec()))
            .collect()
    }
}

fn rows_to_array(rows: &[&[f64]]) -> Array2<f64> {
    let w = rows.first().map(|r| r.len()).unwrap_or(0);
    Array2::from_shape_fn((rows.len(), w), |(i, j)| rows[i][j])
}

/// Training pairs: Markov-model input at `s` and the pi vector at `s + 1`,
/// restricted to steps with a full history.
struct Pairs {
    inputs: Vec<Vec<f64>>,
    current: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

fn build_pairs(tm: &TransitionModel, paths: &Array3<f64>) -> Pairs {
    let (n, t, _) = paths.dim();
    let tau = tm.tau();
    let mut pairs = Pairs {
        inputs: Vec::new(),
        current: Vec::new(),
        targets: Vec::new(),
    };
    for i in 0..n {
        let path = paths.slice(s![i, .., ..]);
        for s in tau - 1..t.saturating_sub(1) {
            pairs.inputs.push(tm.dmm_input(path, s));
            pairs.current.push(path.row(s).to_vec());
            pairs.targets.push(path.row(s + 1).to_vec());
        }
    }
    pairs
}

#[derive(Clone, Copy, PartialEq)]
enum Phase {
    Warmup,
    CondInit,
    Joint,
}

/// Fits window clusters, then trains the Markov model and the conditional
/// network on a normalized training set.
pub fn pretrain_tm(train: &TimeSeriesSet, cfg: &TmConfig) -> Result<TransitionModel> {
    cfg.validate()?;
    if cfg.tau() >= train.len() {
        return Err(AfnError::Precondition(format!(
            "history span {} must be shorter than the series length {}",
            cfg.tau(),
            train.len()
        )));
    }
    let clusters = fit_window_clusters(train, cfg.k, cfg.c, cfg.seed)?;
    let mut tm = TransitionModel::new(cfg.clone(), clusters)?;
    let paths = tm.pi_paths(train)?;
    let pairs = build_pairs(&tm, &paths);
    if pairs.inputs.is_empty() {
        return Err(AfnError::Precondition("no training pairs with full history".into()));
    }

    // Regime-like labelling of pi vectors seeds the conditional network so
    // that its self-referential target does not start from a collapsed state.
    let init_labels = match kmeans_restarts(&pairs.current, cfg.rho, cfg.seed.wrapping_add(1), KMEANS_RESTARTS) {
        Ok((_, labels)) => Some(labels),
        Err(AfnError::Clustering(msg)) => {
            log::warn!("condition initialisation skipped: {msg}");
            None
        }
        Err(e) => return Err(e),
    };

    let mut adam = Adam::new(&tm.params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..pairs.inputs.len()).collect();
    let mut history = Vec::new();
    // The self-referential conditional target can drift into merging
    // conditions late in training; keep the weights of the best epoch.
    let mut best: Option<(f64, ParamStore)> = None;
    let schedule = std::iter::repeat_n(Phase::Warmup, cfg.warmup_epochs)
        .chain(std::iter::repeat_n(
            Phase::CondInit,
            if init_labels.is_some() { cfg.cond_init_epochs } else { 0 },
        ))
        .chain(std::iter::repeat_n(Phase::Joint, cfg.epochs));
    for (epoch, phase) in schedule.enumerate() {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let p = tm.params.bind(&tape);
            let input = tape.constant(rows_to_array(&chunk.iter().map(|&i| pairs.inputs[i].as_slice()).collect::<Vec<_>>()));
            let target = tape.constant(rows_to_array(&chunk.iter().map(|&i| pairs.targets[i].as_slice()).collect::<Vec<_>>()));
            let pi_hat = tm.dmm_forward(&tape, &p, input);
            let c_true = tape.softmax_rows(tm.cond_logits(&tape, &p, target));
            let c_true = tape.detach(c_true);
            let c_pred_log = tape.log_softmax_rows(tm.cond_logits(&tape, &p, pi_hat));
            let losses = transition_loss_vars(&tape, target, pi_hat, c_true, c_pred_log, cfg.rho);
            let value = tape.item(losses.transition);
            if !value.is_finite() {
                return Err(AfnError::Training {
                    stage: "pretrain-tm".into(),
                    epoch,
                    message: "transition loss is not finite".into(),
                });
            }
            total += value * chunk.len() as f64;
            count += chunk.len();
            let objective = match phase {
                Phase::Warmup => losses.mse,
                Phase::CondInit => {
                    let labels = init_labels.as_ref().expect("labels");
                    let current = tape.constant(rows_to_array(&chunk.iter().map(|&i| pairs.current[i].as_slice()).collect::<Vec<_>>()));
                    let logp = tape.log_softmax_rows(tm.cond_logits(&tape, &p, current));
                    let picked = tape.pick_cols(logp, chunk.iter().map(|&i| labels[i]).collect());
                    let ce = tape.scale(tape.mean(picked), -1.0);
                    tape.add(losses.mse, ce)
                }
                Phase::Joint => losses.transition,
            };
            let grads = tape.backward(objective);
            let g = p.grads(&grads, &tm.params);
            adam.step(&mut tm.params, &g);
        }
        let mean = total / count as f64;
        log::debug!("pretrain-tm epoch {epoch}: L_Transition {mean:.5}");
        history.push(mean);
        if phase == Phase::Joint && best.as_ref().is_none_or(|(b, _)| mean < *b) {
            best = Some((mean, tm.params.clone()));
        }
    }
    if let Some((_, params)) = best {
        tm.params = params;
    }
    if !tm.params.all_finite() {
        return Err(AfnError::Training {
            stage: "pretrain-tm".into(),
            epoch: history.len(),
            message: "non-finite weights".into(),
        });
    }
    tm.loss_history = history;
    Ok(tm)
}
