//! Node risk scores, burst-based SR/SH classification, time to shift,
//! cohort metrics, what-if interventions and the jump/condition diagnostic.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::convae_som::SomGrid;
use crate::data::TimeSeriesSet;
use crate::error::{AfnError, Result};
use crate::explain::{attention_points, DEFAULT_ATTENTION_QUANTILE};
use crate::ifm::{AfnModel, Forecast};
use crate::metrics::pearson;

pub const DEFAULT_BURST_THRESHOLD: usize = 2;

/// Score in [0, 1] for every node. A node is dark when its score is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RiskMapJson", into = "RiskMapJson")]
pub struct RiskMap {
    grid: SomGrid,
    scores: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RiskMapJson {
    grid: SomGrid,
    scores: BTreeMap<String, f64>,
}

impl From<RiskMap> for RiskMapJson {
    fn from(m: RiskMap) -> Self {
        let scores = m.scores.iter().enumerate().map(|(k, &s)| (m.grid.key(k), s)).collect();
        Self { grid: m.grid, scores }
    }
}

impl TryFrom<RiskMapJson> for RiskMap {
    type Error = AfnError;
    fn try_from(j: RiskMapJson) -> Result<Self> {
        let mut scores = Vec::with_capacity(j.grid.n_nodes());
        for k in 0..j.grid.n_nodes() {
            let key = j.grid.key(k);
            scores.push(*j.scores.get(&key).ok_or_else(|| AfnError::Scorer(format!("missing score for node {key}")))?);
        }
        if j.scores.len() != scores.len() {
            return Err(AfnError::Scorer("risk map has entries outside the grid".into()));
        }
        RiskMap::new(j.grid, scores)
    }
}

impl RiskMap {
    pub fn new(grid: SomGrid, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != grid.n_nodes() {
            return Err(AfnError::Scorer(format!("expected {} scores, got {}", grid.n_nodes(), scores.len())));
        }
        if let Some((k, s)) = scores.iter().enumerate().find(|(_, s)| !(0.0..=1.0).contains(*s)) {
            return Err(AfnError::Scorer(format!("score {s} for node {} is outside [0, 1]", grid.key(k))));
        }
        Ok(Self { grid, scores })
    }

    pub fn grid(&self) -> SomGrid {
        self.grid
    }

    pub fn score(&self, k: usize) -> f64 {
        self.scores[k]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn is_dark(&self, k: usize) -> bool {
        self.scores[k] > 0.0
    }

    pub fn keyed(&self) -> BTreeMap<String, f64> {
        RiskMapJson::from(self.clone()).scores
    }
}

/// Scores a node from its coordinates and representative raw features.
pub trait NodeScorer {
    fn score(&self, node: (usize, usize), representative: &[f64]) -> f64;
}

impl<F: Fn((usize, usize), &[f64]) -> f64> NodeScorer for F {
    fn score(&self, node: (usize, usize), representative: &[f64]) -> f64 {
        self(node, representative)
    }
}

/// Builds a risk map from a scorer, rejecting scores outside [0, 1].
pub fn set_risk_map(grid: SomGrid, representatives: &[Vec<f64>], scorer: &dyn NodeScorer) -> Result<RiskMap> {
    if representatives.len() != grid.n_nodes() {
        return Err(AfnError::Input("one representative per node is required".into()));
    }
    let scores = (0..grid.n_nodes()).map(|k| scorer.score(grid.coords(k), &representatives[k])).collect();
    RiskMap::new(grid, scores)
}

/// Node risk from the share of training steps labelled with a risky regime:
/// `max(0, 2 * (share - 0.5))`, zero for empty nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeShareScorer {
    pub grid: SomGrid,
    pub shares: Vec<Option<f64>>,
}

impl RegimeShareScorer {
    pub fn fit(model: &AfnModel, train: &TimeSeriesSet, risky: &[usize]) -> Result<Self> {
        let labels = train
            .regime_labels
            .as_ref()
            .ok_or_else(|| AfnError::Precondition("training set has no regime labels".into()))?;
        let emb = model.embed_set(train)?;
        let grid = model.vae.grid();
        let mut hits = vec![0usize; grid.n_nodes()];
        let mut total = vec![0usize; grid.n_nodes()];
        let t = emb.steps;
        for (r, &k) in emb.nodes.iter().enumerate() {
            total[k] += 1;
            if risky.contains(&labels[[r / t, r % t]]) {
                hits[k] += 1;
            }
        }
        let shares = hits.iter().zip(&total).map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64)).collect();
        Ok(Self { grid, shares })
    }
}

impl NodeScorer for RegimeShareScorer {
    fn score(&self, node: (usize, usize), _: &[f64]) -> f64 {
        match self.shares[self.grid.index(node.0, node.1)] {
            Some(share) => ((share - 0.5) * 2.0).max(0.0),
            None => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RiskLabel {
    SR,
    SH,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskAssessment {
    pub label: RiskLabel,
    /// Absolute step where the first qualifying burst starts.
    pub burst_start: Option<usize>,
    pub tts: Option<usize>,
    pub dark_sequence: Vec<bool>,
}

/// Start of the first run of more than `threshold` consecutive true flags.
pub fn first_burst(flags: &[bool], threshold: usize) -> Option<usize> {
    let mut run = 0;
    for (i, &f) in flags.iter().enumerate() {
        run = if f { run + 1 } else { 0 };
        if run > threshold {
            return Some(i + 1 - run);
        }
    }
    None
}

/// Classifies a node path spanning history and horizon; `present` is the
/// history length.
pub fn classify(nodes: &[usize], map: &RiskMap, threshold: usize, present: usize) -> Result<RiskAssessment> {
    if nodes.is_empty() {
        return Err(AfnError::Input("node path is empty".into()));
    }
    if threshold == 0 {
        return Err(AfnError::Input("burst threshold must be at least 1".into()));
    }
    let n_nodes = map.grid().n_nodes();
    if let Some(k) = nodes.iter().find(|&&k| k >= n_nodes) {
        return Err(AfnError::Input(format!("node {k} is outside the grid")));
    }
    let dark_sequence: Vec<bool> = nodes.iter().map(|&k| map.is_dark(k)).collect();
    let burst_start = first_burst(&dark_sequence, threshold);
    let mut a = RiskAssessment {
        label: if burst_start.is_some() { RiskLabel::SR } else { RiskLabel::SH },
        burst_start,
        tts: None,
        dark_sequence,
    };
    if a.label == RiskLabel::SR {
        a.tts = Some(tts(&a, present)?);
    }
    Ok(a)
}

pub fn classify_forecast(forecast: &Forecast, map: &RiskMap, threshold: usize) -> Result<RiskAssessment> {
    classify(&forecast.node_index, map, threshold, forecast.history_len)
}

/// Steps from the present to the burst start, clamped at zero.
pub fn tts(assessment: &RiskAssessment, present: usize) -> Result<usize> {
    let start = match (assessment.label, assessment.burst_start) {
        (RiskLabel::SR, Some(s)) => s,
        _ => return Err(AfnError::Unsupported("time to shift is only defined for SR assessments".into())),
    };
    if start < present {
        log::warn!("burst starts at {start}, before the present step {present}; time to shift clamped to 0");
    }
    Ok(start.saturating_sub(present))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortMetrics {
    pub verbosity: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Share of SR predictions, and precision and recall against `truth` (true = risky).
pub fn cohort_metrics(assessments: &[RiskAssessment], truth: Option<&[bool]>) -> Result<CohortMetrics> {
    if assessments.is_empty() {
        return Err(AfnError::Input("cohort is empty".into()));
    }
    let pred: Vec<bool> = assessments.iter().map(|a| a.label == RiskLabel::SR).collect();
    let positives = pred.iter().filter(|&&p| p).count();
    let verbosity = positives as f64 / pred.len() as f64;
    let (precision, recall) = match truth {
        None => (None, None),
        Some(t) => {
            if t.len() != pred.len() {
                return Err(AfnError::Input("truth labels do not match the cohort".into()));
            }
            let tp = pred.iter().zip(t).filter(|(p, t)| **p && **t).count() as f64;
            let actual = t.iter().filter(|&&x| x).count();
            (
                (positives > 0).then(|| tp / positives as f64),
                (actual > 0).then(|| tp / actual as f64),
            )
        }
    };
    Ok(CohortMetrics {
        verbosity,
        precision,
        recall,
    })
}

/// Which history steps an intervention touches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Steps {
    /// Attention points of the baseline forecast.
    Auto,
    Explicit(Vec<usize>),
}

impl Steps {
    /// `"auto"` or a comma-separated list of step indices.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Steps::Auto);
        }
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| AfnError::Input(format!("invalid step `{p}`"))))
            .collect::<Result<Vec<_>>>()
            .map(Steps::Explicit)
    }
}

/// Scales column `feature` by `1 - pct / 100` at `steps`, leaving everything else untouched.
pub fn apply_reduction(series: ArrayView2<'_, f64>, feature: usize, pct: f64, steps: &[usize]) -> Result<Array2<f64>> {
    check_pct(pct)?;
    let (t, d) = series.dim();
    if feature >= d {
        return Err(AfnError::Input(format!("feature index {feature} out of range")));
    }
    let mut out = series.to_owned();
    for &s in steps {
        if s >= t {
            return Err(AfnError::Input(format!("step {s} is outside the history of length {t}")));
        }
        out[[s, feature]] *= 1.0 - pct / 100.0;
    }
    Ok(out)
}

fn check_pct(pct: f64) -> Result<()> {
    if !(pct > 0.0 && pct < 100.0) {
        return Err(AfnError::Input(format!("reduction percentage must lie strictly between 0 and 100, got {pct}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlayerIntervention {
    pub series_id: String,
    pub steps: Vec<usize>,
    pub before: RiskAssessment,
    pub after: RiskAssessment,
    pub before_path: Vec<(usize, usize)>,
    pub after_path: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub feature: String,
    pub reduction_factor: f64,
    /// Change in the share of SR players, in percentage points of the cohort.
    pub delta_sr_volume: f64,
    /// Percent change of mean time to shift over players SR both before and after.
    pub delta_tts: Option<f64>,
    pub players: Vec<PlayerIntervention>,
}

/// What-if settings shared by every player of a cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionSpec<'a> {
    pub feature: &'a str,
    pub pct: f64,
    pub steps: Steps,
    pub horizon: usize,
    pub threshold: usize,
}

/// Reduces one feature at the chosen steps of each history, re-forecasts and
/// re-classifies, and summarizes the change against the untouched forecasts.
pub fn intervene(
    model: &AfnModel,
    map: &RiskMap,
    cohort: &[(String, ArrayView2<'_, f64>)],
    spec: &InterventionSpec<'_>,
) -> Result<InterventionResult> {
    check_pct(spec.pct)?;
    if cohort.is_empty() {
        return Err(AfnError::Input("cohort is empty".into()));
    }
    let j = model
        .feature_names
        .iter()
        .position(|f| f == spec.feature)
        .ok_or_else(|| AfnError::UnknownFeature(spec.feature.to_string()))?;
    let mut players = Vec::with_capacity(cohort.len());
    for (id, series) in cohort {
        let base = model.forecast(*series, spec.horizon)?;
        let steps = match &spec.steps {
            Steps::Auto => attention_points(&base, DEFAULT_ATTENTION_QUANTILE)?,
            Steps::Explicit(s) => s.clone(),
        };
        let changed = apply_reduction(*series, j, spec.pct, &steps)?;
        let after = model.forecast(changed.view(), spec.horizon)?;
        players.push(PlayerIntervention {
            series_id: id.clone(),
            steps,
            before: classify_forecast(&base, map, spec.threshold)?,
            after: classify_forecast(&after, map, spec.threshold)?,
            before_path: base.node_path,
            after_path: after.node_path,
        });
    }
    let n = players.len() as f64;
    let sr = |f: &dyn Fn(&PlayerIntervention) -> &RiskAssessment| players.iter().filter(|p| f(p).label == RiskLabel::SR).count() as f64;
    let delta_sr_volume = 100.0 * (sr(&|p| &p.after) - sr(&|p| &p.before)) / n;
    let both: Vec<(f64, f64)> = players
        .iter()
        .filter_map(|p| Some((p.before.tts? as f64, p.after.tts? as f64)))
        .collect();
    let before_mean = both.iter().map(|b| b.0).sum::<f64>() / both.len().max(1) as f64;
    let after_mean = both.iter().map(|b| b.1).sum::<f64>() / both.len().max(1) as f64;
    let delta_tts = (!both.is_empty() && before_mean > 0.0).then(|| 100.0 * (after_mean - before_mean) / before_mean);
    Ok(InterventionResult {
        feature: spec.feature.to_string(),
        reduction_factor: spec.pct,
        delta_sr_volume,
        delta_tts,
        players,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpCorrelation {
    /// |r| per kept trajectory.
    pub values: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub skipped: usize,
}

/// Manhattan jumps between consecutive nodes and condition-switch indicators of one path.
pub fn jumps_and_switches(forecast: &Forecast) -> (Vec<f64>, Vec<f64>) {
    let p = &forecast.node_path;
    let c = &forecast.conditions;
    let n = p.len().min(c.len());
    (1..n)
        .map(|s| {
            let jump = p[s].0.abs_diff(p[s - 1].0) + p[s].1.abs_diff(p[s - 1].1);
            let switch = if c[s].discrete != c[s - 1].discrete { 1.0 } else { 0.0 };
            (jump as f64, switch)
        })
        .unzip()
}

/// Distribution of |Pearson r| between jump distance and condition switches.
pub fn jump_condition_correlation(forecasts: &[Forecast]) -> Result<JumpCorrelation> {
    if forecasts.len() < 10 {
        return Err(AfnError::Precondition(format!("need at least 10 forecasts, got {}", forecasts.len())));
    }
    if forecasts.iter().any(|f| f.node_path.len().min(f.conditions.len()) < 5) {
        return Err(AfnError::Precondition("every forecast needs at least 5 steps".into()));
    }
    let mut values = Vec::new();
    let mut skipped = 0;
    for f in forecasts {
        let (jumps, switches) = jumps_and_switches(f);
        match pearson(&jumps, &switches) {
            Some(r) => values.push(r.abs()),
            None => skipped += 1,
        }
    }
    if values.is_empty() {
        return Err(AfnError::Domain("every trajectory had zero variance".into()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let median = crate::audit::median(&values);
    Ok(JumpCorrelation {
        values,
        mean,
        median,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transition::Condition;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn map_with_dark(dark: &[usize]) -> RiskMap {
        let grid = SomGrid::default();
        let scores = (0..64).map(|k| if dark.contains(&k) { 0.7 } else { 0.0 }).collect();
        RiskMap::new(grid, scores).unwrap()
    }

    fn nodes_from_flags(flags: &[u8]) -> Vec<usize> {
        flags.iter().map(|&f| if f == 1 { 5 } else { 0 }).collect()
    }

    #[test]
    fn burst_examples() {
        let map = map_with_dark(&[5]);
        let a = classify(&nodes_from_flags(&[0, 1, 1, 0, 1, 1, 0]), &map, 2, 4).unwrap();
        assert_eq!(a.label, RiskLabel::SH);
        assert_eq!(a.tts, None);
        let a = classify(&nodes_from_flags(&[0, 1, 1, 1, 0]), &map, 2, 1).unwrap();
        assert_eq!(a.label, RiskLabel::SR);
        assert_eq!(a.burst_start, Some(1));
        assert_eq!(a.tts, Some(0));
        assert!(classify(&[], &map, 2, 0).is_err());
        assert!(classify(&[64], &map, 2, 0).is_err());
    }

    #[test]
    fn tts_rules() {
        let sr = |start| RiskAssessment {
            label: RiskLabel::SR,
            burst_start: Some(start),
            tts: None,
            dark_sequence: vec![],
        };
        assert_eq!(tts(&sr(12), 7).unwrap(), 5);
        assert_eq!(tts(&sr(7), 7).unwrap(), 0);
        assert_eq!(tts(&sr(3), 7).unwrap(), 0);
        let sh = RiskAssessment {
            label: RiskLabel::SH,
            burst_start: None,
            tts: None,
            dark_sequence: vec![],
        };
        assert!(matches!(tts(&sh, 7), Err(AfnError::Unsupported(_))));
    }

    #[test]
    fn cohort_examples() {
        let mk = |sr: bool| RiskAssessment {
            label: if sr { RiskLabel::SR } else { RiskLabel::SH },
            burst_start: sr.then_some(0),
            tts: sr.then_some(0),
            dark_sequence: vec![],
        };
        let cohort: Vec<_> = (0..10).map(|i| mk(i < 3)).collect();
        assert!((cohort_metrics(&cohort, None).unwrap().verbosity - 0.3).abs() < 1e-12);
        let truth: Vec<bool> = (0..10).map(|i| i < 3).collect();
        let m = cohort_metrics(&cohort, Some(&truth)).unwrap();
        assert_eq!((m.precision, m.recall), (Some(1.0), Some(1.0)));
        let none: Vec<_> = (0..4).map(|_| mk(false)).collect();
        assert_eq!(cohort_metrics(&none, Some(&[true, false, false, false])).unwrap().precision, None);
        assert!(cohort_metrics(&[], None).is_err());
    }

    #[test]
    fn risk_map_validation_and_json() {
        let grid = SomGrid::default();
        let reps = vec![vec![0.0]; 64];
        let zero = set_risk_map(grid, &reps, &|_: (usize, usize), _: &[f64]| 0.0).unwrap();
        assert!((0..64).all(|k| !zero.is_dark(k)));
        assert_eq!(classify(&[1, 2, 3, 4, 5], &zero, 2, 2).unwrap().label, RiskLabel::SH);
        assert!(matches!(
            set_risk_map(grid, &reps, &|_: (usize, usize), _: &[f64]| 1.5),
            Err(AfnError::Scorer(_))
        ));
        let map = set_risk_map(grid, &reps, &|n: (usize, usize), _: &[f64]| if n.0 == 2 { 0.25 } else { 0.0 }).unwrap();
        let json = serde_json::to_string(&map).unwrap();
        assert!(json.contains("\"2,7\":0.25"));
        let back: RiskMap = serde_json::from_str(&json).unwrap();
        assert_eq!(back, map);
        let bad = json.replace("0.25", "1.25");
        assert!(serde_json::from_str::<RiskMap>(&bad).is_err());
    }

    #[test]
    fn reduction_parsing_and_bounds() {
        let s = Array2::from_elem((4, 2), 10.0);
        assert!(apply_reduction(s.view(), 0, 0.0, &[1]).is_err());
        assert!(apply_reduction(s.view(), 0, 100.0, &[1]).is_err());
        assert!(apply_reduction(s.view(), 0, 20.0, &[4]).is_err());
        let r = apply_reduction(s.view(), 1, 20.0, &[1, 3]).unwrap();
        assert_eq!(r[[1, 1]], 8.0);
        assert_eq!(r[[0, 1]], 10.0);
        assert_eq!(Steps::parse("auto").unwrap(), Steps::Auto);
        assert_eq!(Steps::parse("1, 4").unwrap(), Steps::Explicit(vec![1, 4]));
        assert!(Steps::parse("x").is_err());
    }

    fn path(nodes: &[(usize, usize)], conds: &[usize]) -> Forecast {
        Forecast {
            horizon: 1,
            history_len: nodes.len() - 1,
            x_hat: vec![],
            latent_path: vec![],
            node_path: nodes.to_vec(),
            node_index: nodes.iter().map(|&(i, j)| i * 8 + j).collect(),
            attention: None,
            conditions: conds.iter().map(|&c| Condition::one_hot(c, 3)).collect(),
            damping: vec![],
        }
    }

    #[test]
    fn jump_correlation_examples() {
        // every switch coincides with a jump of 4, no jump otherwise
        let perfect = path(&[(0, 0), (0, 0), (2, 2), (2, 2), (2, 2), (0, 0)], &[0, 0, 1, 1, 1, 2]);
        let (jumps, switches) = jumps_and_switches(&perfect);
        assert_eq!(jumps, vec![0.0, 4.0, 0.0, 0.0, 4.0]);
        assert!((pearson(&jumps, &switches).unwrap().abs() - 1.0).abs() < 1e-12);
        let flat = path(&[(0, 0), (0, 1), (3, 1), (3, 3), (3, 2)], &[1; 5]);
        let mut set: Vec<Forecast> = (0..9).map(|_| perfect.clone()).collect();
        set.push(flat);
        let r = jump_condition_correlation(&set).unwrap();
        assert_eq!(r.skipped, 1);
        assert!((r.mean - 1.0).abs() < 1e-12);
        assert!(jump_condition_correlation(&set[..9]).is_err());
    }

    fn scan_oracle(flags: &[bool], threshold: usize) -> Option<usize> {
        // enumerate maximal runs and keep the earliest long one
        let mut runs = Vec::new();
        for i in 0..flags.len() {
            if flags[i] && (i == 0 || !flags[i - 1]) {
                let len = flags[i..].iter().take_while(|&&f| f).count();
                runs.push((i, len));
            }
        }
        runs.into_iter().find(|&(_, len)| len > threshold).map(|(i, _)| i)
    }

    #[test]
    fn burst_scan_matches_oracle_on_all_length_12_sequences() {
        for bits in 0u32..4096 {
            let flags: Vec<bool> = (0..12).map(|i| bits >> i & 1 == 1).collect();
            for threshold in 1..4 {
                assert_eq!(first_burst(&flags, threshold), scan_oracle(&flags, threshold), "{flags:?} {threshold}");
            }
        }
    }

    proptest! {
        #[test]
        fn reduction_isolates_feature(
            vals in proptest::collection::vec(-5.0f64..5.0, 24),
            j in 0usize..3,
            pct in 1.0f64..99.0,
            steps in proptest::collection::vec(0usize..8, 0..5),
        ) {
            let s = Array2::from_shape_vec((8, 3), vals).unwrap();
            let r = apply_reduction(s.view(), j, pct, &steps).unwrap();
            for t in 0..8 {
                for f in 0..3 {
                    if f != j || !steps.contains(&t) {
                        prop_assert_eq!(r[[t, f]], s[[t, f]]);
                    }
                }
            }
        }

        #[test]
        fn tts_is_offset_of_burst_start(flags in proptest::collection::vec(proptest::bool::ANY, 1..30), present in 0usize..30) {
            let map = map_with_dark(&[5]);
            let nodes: Vec<usize> = flags.iter().map(|&f| if f { 5 } else { 0 }).collect();
            let a = classify(&nodes, &map, 2, present).unwrap();
            prop_assert_eq!(a.label == RiskLabel::SR, a.burst_start.is_some());
            prop_assert_eq!(a.burst_start.is_some(), a.tts.is_some());
            if let (Some(b), Some(t)) = (a.burst_start, a.tts) {
                prop_assert_eq!(t, b.saturating_sub(present));
            }
        }

        #[test]
        fn manhattan_jumps_are_bounded(cells in proptest::collection::vec((0usize..8, 0usize..8), 2..20)) {
            let conds = vec![0; cells.len()];
            let (jumps, _) = jumps_and_switches(&path(&cells, &conds));
            prop_assert!(jumps.iter().all(|&j| (0.0..=14.0).contains(&j)));
        }
    }
}
