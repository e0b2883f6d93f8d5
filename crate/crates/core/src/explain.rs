//! Shapley explanations of map-node membership, attention points and the
//! attention-anchored feature ranking.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::convae_som::SomGrid;
use crate::data::TimeSeriesSet;
use crate::error::{AfnError, Result};
use crate::ifm::{attention_weights, AfnModel, Forecast};
use crate::transition::Condition;

/// Largest feature count handled by full subset enumeration.
pub const MAX_EXACT_D: usize = 12;
pub const TOP_K: usize = 5;

/// Interventional Shapley values of `f` at `x` against a background set,
/// by enumerating every coalition. `f` is called on batches of rows.
pub fn exact_shapley<F>(f: F, x: &[f64], background: &[Vec<f64>]) -> Result<Vec<f64>>
where
    F: Fn(&Array2<f64>) -> Vec<f64>,
{
    let d = x.len();
    if d == 0 || d > MAX_EXACT_D {
        return Err(AfnError::Precondition(format!("exact enumeration needs 1..={MAX_EXACT_D} features, got {d}")));
    }
    check_background(background, d)?;
    let subsets = 1usize << d;
    let nb = background.len();
    let mut rows = Array2::zeros((subsets * nb, d));
    for s in 0..subsets {
        for (b, bg) in background.iter().enumerate() {
            let mut row = rows.row_mut(s * nb + b);
            for j in 0..d {
                row[j] = if s >> j & 1 == 1 { x[j] } else { bg[j] };
            }
        }
    }
    let out = f(&rows);
    let v: Vec<f64> = (0..subsets).map(|s| out[s * nb..(s + 1) * nb].iter().sum::<f64>() / nb as f64).collect();

    // weight of a coalition of size k that excludes j: k! (d-k-1)! / d!
    let mut weight = vec![0.0; d];
    for (k, w) in weight.iter_mut().enumerate() {
        *w = 1.0 / (d as f64 * binomial(d - 1, k));
    }
    let mut phi = vec![0.0; d];
    for s in 0..subsets {
        let k = s.count_ones() as usize;
        for (j, p) in phi.iter_mut().enumerate() {
            if s >> j & 1 == 0 {
                *p += weight[k] * (v[s | 1 << j] - v[s]);
            }
        }
    }
    Ok(phi)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn check_background(background: &[Vec<f64>], d: usize) -> Result<()> {
    if background.is_empty() {
        return Err(AfnError::Precondition("background set is empty".into()));
    }
    if background.iter().any(|b| b.len() != d) {
        return Err(AfnError::Input("background rows must match the explained point".into()));
    }
    Ok(())
}

/// Shapley values estimated from `permutations` random feature orders, each
/// paired with its reverse.
pub fn sampled_shapley<F>(f: F, x: &[f64], background: &[Vec<f64>], permutations: usize, seed: u64) -> Result<Vec<f64>>
where
    F: Fn(&Array2<f64>) -> Vec<f64>,
{
    let d = x.len();
    if d == 0 || permutations == 0 {
        return Err(AfnError::Precondition("need at least one feature and one permutation".into()));
    }
    check_background(background, d)?;
    let nb = background.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut orders = Vec::with_capacity(2 * permutations);
    for _ in 0..permutations {
        let mut p: Vec<usize> = (0..d).collect();
        p.shuffle(&mut rng);
        let mut r = p.clone();
        r.reverse();
        orders.push(p);
        orders.push(r);
    }
    // every prefix of every order against every background row
    let mut rows = Array2::zeros((orders.len() * (d + 1) * nb, d));
    let mut r = 0;
    for order in &orders {
        for b in background {
            let mut cur = b.clone();
            rows.row_mut(r).assign(&ndarray::ArrayView1::from(&cur));
            r += 1;
            for &j in order {
                cur[j] = x[j];
                rows.row_mut(r).assign(&ndarray::ArrayView1::from(&cur));
                r += 1;
            }
        }
    }
    let out = f(&rows);
    let mut phi = vec![0.0; d];
    let mut r = 0;
    for order in &orders {
        for _ in 0..nb {
            for (pos, &j) in order.iter().enumerate() {
                phi[j] += out[r + pos + 1] - out[r + pos];
            }
            r += d + 1;
        }
    }
    let total = (orders.len() * nb) as f64;
    Ok(phi.into_iter().map(|p| p / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapEntry {
    pub feature: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeShap {
    /// At most five entries, largest magnitude first.
    pub entries: Vec<ShapEntry>,
    /// Raw feature vector explained for this node.
    pub representative: Vec<f64>,
    /// True when no training point was assigned and the centroid was decoded.
    pub decoded: bool,
}

/// Per-node Shapley table keyed by `"i,j"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapTable {
    pub grid: SomGrid,
    pub nodes: BTreeMap<String, NodeShap>,
}

impl ShapTable {
    pub fn node(&self, k: usize) -> Option<&NodeShap> {
        self.nodes.get(&self.grid.key(k))
    }
}

/// Keeps the `TOP_K` largest-magnitude values; equal magnitudes keep feature order.
pub fn top_entries(names: &[String], values: &[f64]) -> Vec<ShapEntry> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()));
    idx.into_iter()
        .take(TOP_K)
        .map(|j| ShapEntry {
            feature: names[j].clone(),
            value: values[j],
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapConfig {
    pub background: usize,
    /// Feature counts up to this use full enumeration, larger ones sampling.
    pub exact_max_d: usize,
    pub permutations: usize,
    pub seed: u64,
}

impl Default for ShapConfig {
    fn default() -> Self {
        Self {
            background: 100,
            exact_max_d: 10,
            permutations: 64,
            seed: 0,
        }
    }
}

/// Representative point and mode condition of every node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRepresentatives {
    /// Normalized feature vectors.
    pub x: Vec<Vec<f64>>,
    pub condition: Vec<usize>,
    pub decoded: Vec<bool>,
    pub members: Vec<Vec<usize>>,
}

/// Nearest assigned training point to each centroid in latent space, or the
/// decoded centroid for empty nodes.
pub fn node_representatives(model: &AfnModel, train: &TimeSeriesSet) -> Result<NodeRepresentatives> {
    let emb = model.embed_set(train)?;
    let n_nodes = model.vae.grid().n_nodes();
    let rho = model.rho();
    let mut members = vec![Vec::new(); n_nodes];
    for (r, &k) in emb.nodes.iter().enumerate() {
        members[k].push(r);
    }
    let mut global = vec![0usize; rho];
    emb.conditions.iter().for_each(|&c| global[c] += 1);
    let global_mode = mode(&global);
    let centroids = model.vae.centroid_matrix();
    let mut out = NodeRepresentatives {
        x: Vec::with_capacity(n_nodes),
        condition: Vec::with_capacity(n_nodes),
        decoded: Vec::with_capacity(n_nodes),
        members,
    };
    for k in 0..n_nodes {
        let rows = &out.members[k];
        if rows.is_empty() {
            let cond = Condition::one_hot(global_mode, rho);
            out.x.push(model.vae.decode(&centroids.row(k).to_vec(), &cond)?);
            out.condition.push(global_mode);
            out.decoded.push(true);
            continue;
        }
        let mut counts = vec![0usize; rho];
        rows.iter().for_each(|&r| counts[emb.conditions[r]] += 1);
        let dist = |r: usize| {
            emb.means
                .row(r)
                .iter()
                .zip(centroids.row(k))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        };
        let best = rows.iter().copied().min_by(|&a, &b| dist(a).total_cmp(&dist(b))).expect("non-empty");
        out.x.push(emb.x.row(best).to_vec());
        out.condition.push(mode(&counts));
        out.decoded.push(false);
    }
    Ok(out)
}

fn mode(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Up to `size` background rows drawn round-robin across non-empty nodes.
pub fn stratified_background(x: &Array2<f64>, members: &[Vec<usize>], size: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = members.iter().filter(|m| !m.is_empty()).cloned().collect();
    pools.iter_mut().for_each(|p| p.shuffle(&mut rng));
    let mut out = Vec::with_capacity(size);
    let mut depth = 0;
    while out.len() < size && pools.iter().any(|p| p.len() > depth) {
        for p in &pools {
            if out.len() == size {
                break;
            }
            if let Some(&r) = p.get(depth) {
                out.push(x.row(r).to_vec());
            }
        }
        depth += 1;
    }
    out
}

/// Membership probability of node `k` for normalized rows under condition `cond`.
pub fn membership_surrogate(model: &AfnModel, k: usize, cond: usize) -> impl Fn(&Array2<f64>) -> Vec<f64> + '_ {
    move |rows: &Array2<f64>| {
        let mut c = Array2::zeros((rows.nrows(), model.rho()));
        c.column_mut(cond).fill(1.0);
        let (means, _) = model.vae.encode_batch(rows, &c);
        let q = model.vae.soft_assign_batch(&means);
        q.column(k).to_vec()
    }
}

/// Shapley table of node membership at each node's representative point.
pub fn fit_som_shap(model: &AfnModel, train: &TimeSeriesSet, cfg: &ShapConfig) -> Result<ShapTable> {
    if model.log.is_empty() {
        return Err(AfnError::Precondition("model has not been trained".into()));
    }
    let reps = node_representatives(model, train)?;
    let emb_x = model.norm.apply(train);
    let (n, t, d) = emb_x.values.dim();
    let flat = emb_x.values.into_shape_with_order((n * t, d)).map_err(|e| AfnError::Input(e.to_string()))?;
    let background = stratified_background(&flat, &reps.members, cfg.background, cfg.seed);
    let grid = model.vae.grid();
    let mut nodes = BTreeMap::new();
    for k in 0..grid.n_nodes() {
        let f = membership_surrogate(model, k, reps.condition[k]);
        let phi = if d <= cfg.exact_max_d.min(MAX_EXACT_D) {
            exact_shapley(&f, &reps.x[k], &background)?
        } else {
            sampled_shapley(&f, &reps.x[k], &background, cfg.permutations, cfg.seed.wrapping_add(k as u64))?
        };
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(AfnError::Domain(format!("non-finite Shapley value at node {}", grid.key(k))));
        }
        let mut rep = reps.x[k].clone();
        model.norm.denormalize_row(&mut rep);
        nodes.insert(
            grid.key(k),
            NodeShap {
                entries: top_entries(&model.feature_names, &phi),
                representative: rep,
                decoded: reps.decoded[k],
            },
        );
    }
    Ok(ShapTable { grid, nodes })
}

/// Linear-interpolated quantile of `v` at `q` in [0, 1].
pub fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// History steps whose attention, averaged over the horizon, exceeds the
/// `threshold_quantile` of all steps. Falls back to the earliest maximum.
pub fn attention_points(forecast: &Forecast, threshold_quantile: f64) -> Result<Vec<usize>> {
    let rows = attention_weights(forecast)?;
    if rows.is_empty() || rows[0].is_empty() {
        return Err(AfnError::Precondition("forecast has no attention rows".into()));
    }
    let t = rows[0].len();
    let agg: Vec<f64> = (0..t).map(|s| rows.iter().map(|r| r[s]).sum::<f64>() / rows.len() as f64).collect();
    if threshold_quantile <= 0.0 {
        return Ok((0..t).collect());
    }
    let cut = quantile(&agg, threshold_quantile);
    let steps: Vec<usize> = (0..t).filter(|&s| agg[s] > cut).collect();
    if !steps.is_empty() {
        return Ok(steps);
    }
    let mut best = 0;
    for s in 1..t {
        if agg[s] > agg[best] {
            best = s;
        }
    }
    Ok(vec![best])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub feature: String,
    pub mean_shap: f64,
    pub acceleration: f64,
}

pub type FeatureRanking = Vec<RankedFeature>;

/// Mean absolute first difference of column `j` over steps `lo..=hi`.
pub fn acceleration(raw: ArrayView2<'_, f64>, j: usize, lo: usize, hi: usize) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    (lo..hi).map(|s| (raw[[s + 1, j]] - raw[[s, j]]).abs()).sum::<f64>() / (hi - lo) as f64
}

/// Union of the top entries of the nodes visited at `steps`, ordered by mean
/// absolute Shapley value then acceleration of the raw history.
pub fn rank_features(
    forecast: &Forecast,
    table: &ShapTable,
    steps: &[usize],
    history: ArrayView2<'_, f64>,
    feature_names: &[String],
) -> Result<FeatureRanking> {
    if steps.is_empty() {
        return Err(AfnError::Precondition("no attentive steps".into()));
    }
    let t = history.nrows();
    let mut order: Vec<String> = Vec::new();
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for &s in steps {
        if s >= forecast.node_index.len() || s >= t {
            return Err(AfnError::Input(format!("attentive step {s} is outside the history")));
        }
        let node = table
            .node(forecast.node_index[s])
            .ok_or_else(|| AfnError::Input(format!("node {} missing from the table", table.grid.key(forecast.node_index[s]))))?;
        for e in &node.entries {
            if !sums.contains_key(&e.feature) {
                order.push(e.feature.clone());
            }
            *sums.entry(e.feature.clone()).or_insert(0.0) += e.value.abs();
        }
    }
    let lo = steps.iter().min().expect("non-empty").saturating_sub(1);
    let hi = (steps.iter().max().expect("non-empty") + 1).min(t - 1);
    let mut out: Vec<RankedFeature> = order
        .into_iter()
        .map(|f| {
            let j = feature_names.iter().position(|n| *n == f).ok_or_else(|| AfnError::UnknownFeature(f.clone()))?;
            Ok(RankedFeature {
                mean_shap: sums[&f] / steps.len() as f64,
                acceleration: acceleration(history, j, lo, hi),
                feature: f,
            })
        })
        .collect::<Result<_>>()?;
    out.sort_by(|a, b| b.mean_shap.total_cmp(&a.mean_shap).then(b.acceleration.total_cmp(&a.acceleration)));
    Ok(out)
}

/// Top feature of every node that has entries.
pub fn dominant_feature_map(table: &ShapTable) -> BTreeMap<String, String> {
    table
        .nodes
        .iter()
        .filter_map(|(k, n)| n.entries.first().map(|e| (k.clone(), e.feature.clone())))
        .collect()
}

/// Everything the explain interfaces return for one series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub attentive_steps: Vec<usize>,
    pub feature_ranking: FeatureRanking,
    pub node_shap: BTreeMap<String, NodeShap>,
}

pub const DEFAULT_ATTENTION_QUANTILE: f64 = 0.9;

/// Forecast, attention points, ranking and the Shapley rows of the visited nodes.
pub fn explain_series(model: &AfnModel, table: &ShapTable, history: ArrayView2<'_, f64>, horizon: usize) -> Result<Explanation> {
    let forecast = model.forecast(history, horizon)?;
    let steps = attention_points(&forecast, DEFAULT_ATTENTION_QUANTILE)?;
    let ranking = rank_features(&forecast, table, &steps, history, &model.feature_names)?;
    let mut node_shap = BTreeMap::new();
    for &s in &steps {
        let key = table.grid.key(forecast.node_index[s]);
        if let Some(n) = table.nodes.get(&key) {
            node_shap.insert(key, n.clone());
        }
    }
    Ok(Explanation {
        attentive_steps: steps,
        feature_ranking: ranking,
        node_shap,
    })
}

/// Mean of `f` with features in `mask` taken from `x` and the rest from each background row.
pub fn coalition_value<F>(f: &F, x: &[f64], background: &[Vec<f64>], mask: usize) -> f64
where
    F: Fn(&Array2<f64>) -> Vec<f64>,
{
    let d = x.len();
    let rows = Array2::from_shape_fn((background.len(), d), |(b, j)| if mask >> j & 1 == 1 { x[j] } else { background[b][j] });
    f(&rows).iter().sum::<f64>() / background.len() as f64
}

/// Uniform random point in `[-1, 1]^d`, for tests and diagnostics.
pub fn random_point(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}
