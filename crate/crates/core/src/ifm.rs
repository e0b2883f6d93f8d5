//! Forecasting module: attention LSTM over latent codes, damping network,
//! the joint loss, a staged trainer with ablation switches and the
//! autoregressive rollout.

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::convae_som::{ConvaeConfig, ConvaeSom, TdpsomVars};
use crate::data::{NormStats, TimeSeriesSet};
use crate::error::{AfnError, Result};
use crate::nn::{Adam, Bound, Dense, LstmCell, LstmState, Mlp, ParamStore};
use crate::tape::{Tape, Var};
use crate::transition::{pretrain_tm, transition_loss_vars, Condition, TmConfig, TransitionModel};

const LN_2PI: f64 = 1.8378770664093453;

/// Components switched off for ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ablation {
    /// No transition module: conditions fixed to class 0, damping 1, no transition loss.
    pub tm: bool,
    /// No attention: the head sees the last hidden state only.
    pub al: bool,
    /// Damping fixed to 1.
    pub df: bool,
    /// No forecasting fine-tuning stage.
    pub fft: bool,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match s {
            "none" => {}
            "tm" => a.tm = true,
            "al" => a.al = true,
            "df" => a.df = true,
            "fft" => a.fft = true,
            other => return Err(AfnError::Config(format!("unknown ablation `{other}`"))),
        }
        Ok(a)
    }

    pub fn label(&self) -> &'static str {
        match (self.tm, self.al, self.df, self.fft) {
            (false, false, false, false) => "none",
            (true, false, false, false) => "tm",
            (false, true, false, false) => "al",
            (false, false, true, false) => "df",
            (false, false, false, true) => "fft",
            _ => "mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AfnConfig {
    pub tm: TmConfig,
    pub convae: ConvaeConfig,
    pub lstm_hidden: usize,
    pub attention_dim: usize,
    pub damping_hidden: Vec<usize>,
    pub eta: f64,
    /// Weight of the transition loss in the joint objective.
    pub tau_w: f64,
    /// Strength of the `-log D` term that keeps damping away from zero,
    /// applied to the damping network only and scaled by `eta`.
    pub damping_reg: f64,
    pub var_floor: f64,
    pub segment_len: usize,
    pub batch_size: usize,
    /// Batches per epoch; `None` means one pass worth of segments per series.
    pub batches_per_epoch: Option<usize>,
    pub vae_warmup_epochs: usize,
    pub stage_a_epochs: usize,
    pub stage_b_epochs: usize,
    pub stage_c_epochs: usize,
    pub lr: f64,
    pub fft_lr_scale: f64,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for AfnConfig {
    fn default() -> Self {
        Self {
            tm: TmConfig::default(),
            convae: ConvaeConfig::default(),
            lstm_hidden: 100,
            attention_dim: 100,
            damping_hidden: vec![100, 10],
            eta: 10.0,
            tau_w: 75.0,
            damping_reg: 1.0,
            var_floor: 1e-4,
            segment_len: 24,
            batch_size: 128,
            batches_per_epoch: None,
            vae_warmup_epochs: 2,
            stage_a_epochs: 10,
            stage_b_epochs: 20,
            stage_c_epochs: 5,
            lr: 1e-3,
            fft_lr_scale: 0.1,
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

impl AfnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segment_len < 2 {
            return Err(AfnError::Config("segment_len must be at least 2".into()));
        }
        if self.batch_size == 0 || self.lstm_hidden == 0 || self.attention_dim == 0 {
            return Err(AfnError::Config("batch_size, lstm_hidden and attention_dim must be positive".into()));
        }
        if !(self.var_floor > 0.0) || !(self.lr > 0.0) {
            return Err(AfnError::Config("var_floor and lr must be positive".into()));
        }
        self.tm.validate()
    }

    /// Whether the transition module exists in this variant.
    pub fn uses_tm(&self) -> bool {
        !self.ablation.tm
    }

    pub fn uses_damping(&self) -> bool {
        !self.ablation.tm && !self.ablation.df
    }
}

/// Recurrent forecaster, attention, output head and damping network.
#[derive(Debug, Clone, PartialEq)]
pub struct IfmNets {
    pub params: ParamStore,
    pub lstm: LstmCell,
    pub att_key: Dense,
    pub att_query: Dense,
    pub att_score: Dense,
    pub head: Dense,
    pub damping: Mlp,
}

impl IfmNets {
    fn new(cfg: &AfnConfig, m: usize, n_nodes: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(53));
        let mut params = ParamStore::new();
        let h = cfg.lstm_hidden;
        let lstm = LstmCell::new(&mut params, &mut rng, "ifm.lstm", m + n_nodes, h);
        let att_key = Dense::new(&mut params, &mut rng, "ifm.att.key", h, cfg.attention_dim);
        let att_query = Dense::new(&mut params, &mut rng, "ifm.att.query", h, cfg.attention_dim);
        let att_score = Dense::new(&mut params, &mut rng, "ifm.att.score", cfg.attention_dim, 1);
        let head = Dense::new(&mut params, &mut rng, "ifm.head", 2 * h, 2 * m);
        // start with small steps and unit variance
        for v in params.get_mut(head.w).iter_mut() {
            *v *= 0.1;
        }
        let damping = Mlp::new(&mut params, &mut rng, "ifm.damping", 2 * k, &cfg.damping_hidden, 1);
        let out_b = damping.layers.last().expect("layer").b;
        params.get_mut(out_b).fill(2.0);
        Self {
            params,
            lstm,
            att_key,
            att_query,
            att_score,
            head,
            damping,
        }
    }
}

/// Full model: transition module, conditional map and forecaster.
#[derive(Debug, Clone, PartialEq)]
pub struct AfnModel {
    pub config: AfnConfig,
    pub feature_names: Vec<String>,
    pub norm: NormStats,
    pub tm: Option<TransitionModel>,
    pub vae: ConvaeSom,
    pub ifm: IfmNets,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub objective: f64,
    pub tdpsom: f64,
    pub transition: f64,
    pub pred: f64,
    pub forecasting: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Warmup,
    A,
    B,
    C,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::A => "A",
            Stage::B => "B",
            Stage::C => "C",
        }
    }
}

/// Contiguous segments stored time-major (`row = t * batch + b`).
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBatch {
    pub x: Array2<f64>,
    pub pi: Option<Array2<f64>>,
    pub dmm_in: Option<Array2<f64>>,
    pub batch: usize,
    pub len: usize,
}

/// Tape handles of every loss term.
pub struct AfnLossVars {
    pub map: TdpsomVars,
    pub mse: Var,
    pub conditional: Var,
    pub transition: Var,
    pub nll: Var,
    pub damping: Var,
    pub pred: Var,
    pub forecasting: Var,
    pub damping_reg: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AfnLosses {
    pub som: f64,
    pub commit: f64,
    pub reconstruction: f64,
    pub smoothness: f64,
    pub tdpsom: f64,
    pub mse: f64,
    pub conditional: f64,
    pub transition: f64,
    pub pred: f64,
    pub forecasting: f64,
    pub total: f64,
}

/// Joint objective from its parts.
pub fn afn_total(tdpsom: f64, transition: f64, pred: f64, forecasting: f64, tau_w: f64, eta: f64) -> f64 {
    tdpsom + transition * tau_w + pred * eta + forecasting
}

/// Negative log density of `target` under a diagonal Gaussian with variance
/// `floor + exp(log_var)`.
pub fn gaussian_nll(target: &[f64], mean: &[f64], log_var: &[f64], floor: f64) -> f64 {
    target
        .iter()
        .zip(mean)
        .zip(log_var)
        .map(|((t, m), l)| {
            let var = l.exp() + floor;
            0.5 * (LN_2PI + var.ln() + (t - m).powi(2) / var)
        })
        .sum()
}

/// Damping-weighted prediction loss averaged over steps.
pub fn pred_loss_from_parts(nll: &[f64], damping: &[f64]) -> f64 {
    nll.iter().zip(damping).map(|(n, d)| n * d).sum::<f64>() / nll.len().max(1) as f64
}

/// Euclidean distance between the observed and forecast feature vectors.
pub fn forecast_fine_tune_loss(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(AfnError::Input("vectors differ in length".into()));
    }
    Ok(x.iter().zip(x_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
}

struct Binds {
    tm: Option<Bound>,
    vae: Bound,
    ifm: Bound,
}

impl AfnModel {
    /// Fresh model with deterministic initial weights.
    pub fn new(
        config: AfnConfig,
        feature_names: Vec<String>,
        norm: NormStats,
        tm: Option<TransitionModel>,
    ) -> Result<Self> {
        config.validate()?;
        let d = feature_names.len();
        if norm.mean.len() != d {
            return Err(AfnError::Config("normalization stats do not match the feature list".into()));
        }
        if config.uses_tm() && tm.is_none() {
            return Err(AfnError::Precondition("a pretrained transition module is required".into()));
        }
        let tm = if config.uses_tm() { tm } else { None };
        let rho = config.tm.rho;
        let vae = ConvaeSom::new(config.convae.clone(), d, rho, config.seed)?;
        let ifm = IfmNets::new(&config, vae.m, vae.grid().n_nodes(), config.tm.k, config.seed);
        Ok(Self {
            config,
            feature_names,
            norm,
            tm,
            vae,
            ifm,
            log: Vec::new(),
        })
    }

    pub fn d(&self) -> usize {
        self.feature_names.len()
    }

    pub fn rho(&self) -> usize {
        self.config.tm.rho
    }

    /// Steps of history needed before a forecast.
    pub fn required_history(&self) -> usize {
        self.tm.as_ref().map(|t| t.tau()).unwrap_or(1)
    }

    fn bind(&self, tape: &Tape, train_tm: bool, frozen: bool) -> Binds {
        let tm = self.tm.as_ref().map(|t| {
            if train_tm && !frozen {
                t.params.bind(tape)
            } else {
                t.params.bind_frozen(tape)
            }
        });
        if frozen {
            Binds {
                tm,
                vae: self.vae.params.bind_frozen(tape),
                ifm: self.ifm.params.bind_frozen(tape),
            }
        } else {
            Binds {
                tm,
                vae: self.vae.params.bind(tape),
                ifm: self.ifm.params.bind(tape),
            }
        }
    }

    fn attention(&self, tape: &Tape, p: &Bound, keys: &[Var], query: Var) -> (Var, Var) {
        let qp = self.ifm.att_query.forward(tape, p, query);
        let scores: Vec<Var> = keys
            .iter()
            .map(|&k| self.ifm.att_score.forward(tape, p, tape.tanh(tape.add(k, qp))))
            .collect();
        let w = tape.softmax_rows(tape.concat_cols(&scores));
        (w, w)
    }

    fn context(&self, tape: &Tape, hs: &[Var], w: Var) -> Var {
        let mut ctx = tape.mul_col(hs[0], tape.slice_cols(w, 0, 1));
        for (s, &h) in hs.iter().enumerate().skip(1) {
            ctx = tape.add(ctx, tape.mul_col(h, tape.slice_cols(w, s, s + 1)));
        }
        ctx
    }

    /// Head output for hidden state `h` attending over `hs` (with their key projections).
    fn head(&self, tape: &Tape, p: &Bound, h: Var, hs: &[Var], keys: &[Var]) -> (Var, Var, Option<Var>) {
        let m = self.vae.m;
        let (ctx, w) = if self.config.ablation.al {
            (h, None)
        } else {
            let (w, _) = self.attention(tape, p, keys, h);
            (self.context(tape, hs, w), Some(w))
        };
        let out = self.ifm.head.forward(tape, p, tape.concat_cols(&[h, ctx]));
        (tape.slice_cols(out, 0, m), tape.slice_cols(out, m, 2 * m), w)
    }

    fn damping_var(&self, tape: &Tape, p: &Bound, pi: Var, pi_hat: Var) -> Var {
        tape.sigmoid(self.ifm.damping.forward(tape, p, tape.concat_cols(&[pi, pi_hat])))
    }

    fn loss_vars(&self, tape: &Tape, b: &Binds, batch: &SegmentBatch, eps: &Array2<f64>) -> Result<AfnLossVars> {
        let (bs, len) = (batch.batch, batch.len);
        let rows = bs * len;
        if batch.x.nrows() != rows || len < 2 {
            return Err(AfnError::Precondition("segment batch must hold at least 2 contiguous steps".into()));
        }
        let x = tape.constant(batch.x.clone());
        let zero = || tape.scalar(0.0);

        // transition module: conditions for the map and the transition loss
        // c_ahead: condition of each next step as predicted from the step before,
        // which is what a rollout decodes with
        let (c, c_ahead, mse, conditional, transition, pi_pair) = match (&self.tm, b.tm.as_ref()) {
            (Some(tm), Some(tp)) => {
                let pi = tape.constant(batch.pi.clone().ok_or_else(|| AfnError::Precondition("missing pi".into()))?);
                let dmm_in = tape.constant(batch.dmm_in.clone().ok_or_else(|| AfnError::Precondition("missing pi".into()))?);
                let pi_hat = tm.dmm_forward(tape, tp, dmm_in);
                let c = tape.detach(tape.softmax_rows(tm.cond_logits(tape, tp, pi)));
                let pi_next = tape.slice_rows(pi, bs, rows);
                let pi_hat_prev = tape.slice_rows(pi_hat, 0, rows - bs);
                let c_true = tape.slice_rows(c, bs, rows);
                let c_pred_log = tape.log_softmax_rows(tm.cond_logits(tape, tp, pi_hat_prev));
                let l = transition_loss_vars(tape, pi_next, pi_hat_prev, c_true, c_pred_log, tm.rho());
                let pair = (tape.slice_rows(pi, 0, rows - bs), tape.detach(pi_hat_prev));
                let c_ahead = tape.detach(tape.exp(c_pred_log));
                (c, c_ahead, l.mse, l.conditional, l.transition, Some(pair))
            }
            _ => {
                let mut onehot = Array2::zeros((rows, self.rho()));
                onehot.column_mut(0).fill(1.0);
                let c = tape.constant(onehot);
                (c, tape.slice_rows(c, bs, rows), zero(), zero(), zero(), None)
            }
        };

        let map = self.vae.tdpsom_vars(tape, &b.vae, x, c, eps, bs)?;
        // the prediction loss may move centroids but not the encoder; letting it
        // reach the encoder collapses the latent dynamics
        let mu = b.vae.var(self.vae.centroids);
        let z_in = tape.detach(map.mean);
        let q = tape.exp(self.vae.log_assign_var(tape, z_in, mu));
        let inputs = tape.concat_cols(&[z_in, q]);

        let p = &b.ifm;
        let mut state: LstmState = self.ifm.lstm.zero_state(tape, bs);
        let mut hs = Vec::with_capacity(len);
        let mut keys = Vec::with_capacity(len);
        let mut nll_parts = Vec::with_capacity(len - 1);
        let mut next_means = Vec::with_capacity(len - 1);
        let floor = self.config.var_floor;
        for t in 0..len {
            state = self.ifm.lstm.step(tape, p, tape.slice_rows(inputs, t * bs, (t + 1) * bs), state);
            hs.push(state.h);
            if !self.config.ablation.al {
                keys.push(self.ifm.att_key.forward(tape, p, state.h));
            }
            if t + 1 == len {
                break;
            }
            let (delta, lv, _) = self.head(tape, p, state.h, &hs, &keys);
            let z_t = tape.slice_rows(map.mean, t * bs, (t + 1) * bs);
            let pred_mean = tape.add(z_t, delta);
            let nll_mean = tape.add(tape.detach(z_t), delta);
            let target = tape.detach(tape.slice_rows(map.mean, (t + 1) * bs, (t + 2) * bs));
            let var = tape.add_scalar(tape.exp(lv), floor);
            let sq = tape.mul(tape.square(tape.sub(target, nll_mean)), tape.powf(var, -1.0));
            let per = tape.add_scalar(tape.add(tape.log(var), sq), LN_2PI);
            nll_parts.push(tape.scale(tape.sum_rows(per), 0.5));
            next_means.push(pred_mean);
        }
        let nll = tape.concat_rows(&nll_parts);
        let (damping, damping_reg) = match (&pi_pair, self.config.uses_damping()) {
            (Some((pi_prev, pi_hat)), true) => {
                let dvar = self.damping_var(tape, p, *pi_prev, *pi_hat);
                let reg = tape.scale(tape.mean(tape.log(dvar)), -1.0);
                (dvar, reg)
            }
            _ => (tape.constant(Array2::ones((rows - bs, 1))), zero()),
        };
        let pred = tape.mean(tape.mul(nll, damping));

        let z_next = tape.concat_rows(&next_means);
        let x_hat = self.vae.decode_var(tape, &b.vae, z_next, c_ahead);
        let forecasting = tape.mean(tape.norm_rows(tape.sub(tape.slice_rows(x, bs, rows), x_hat)));

        let total = tape.add(
            tape.add(
                tape.add(map.total, tape.scale(transition, self.config.tau_w)),
                tape.scale(pred, self.config.eta),
            ),
            forecasting,
        );
        Ok(AfnLossVars {
            map,
            mse,
            conditional,
            transition,
            nll,
            damping,
            pred,
            forecasting,
            damping_reg,
            total,
        })
    }

    /// Every loss term of the joint objective on one batch, with the map's
    /// reparameterization noise given explicitly.
    pub fn afn_loss(&self, batch: &SegmentBatch, eps: &Array2<f64>) -> Result<AfnLosses> {
        self.afn_loss_on(Tape::new(), batch, eps)
    }

    fn afn_loss_on(&self, tape: Tape, batch: &SegmentBatch, eps: &Array2<f64>) -> Result<AfnLosses> {
        let b = self.bind(&tape, false, true);
        let v = self.loss_vars(&tape, &b, batch, eps)?;
        Ok(self.read_losses(&tape, &v))
    }

    fn read_losses(&self, tape: &Tape, v: &AfnLossVars) -> AfnLosses {
        AfnLosses {
            som: tape.item(v.map.som),
            commit: tape.item(v.map.commit),
            reconstruction: tape.item(v.map.recon),
            smoothness: tape.item(v.map.smooth),
            tdpsom: tape.item(v.map.total),
            mse: tape.item(v.mse),
            conditional: tape.item(v.conditional),
            transition: tape.item(v.transition),
            pred: tape.item(v.pred),
            forecasting: tape.item(v.forecasting),
            total: tape.item(v.total),
        }
    }

    /// Per-step negative log-likelihoods and damping factors of a batch.
    pub fn pred_parts(&self, batch: &SegmentBatch, eps: &Array2<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let tape = Tape::new();
        let b = self.bind(&tape, false, true);
        let v = self.loss_vars(&tape, &b, batch, eps)?;
        let nll = tape.value(v.nll).iter().copied().collect();
        let damping = tape.value(v.damping).iter().copied().collect();
        Ok((nll, damping))
    }

    /// Gradients of a named loss term with respect to every parameter store,
    /// in the order transition module, map, forecaster.
    pub fn loss_gradients(
        &self,
        batch: &SegmentBatch,
        eps: &Array2<f64>,
        term: LossTerm,
    ) -> Result<(f64, Vec<Vec<Array2<f64>>>)> {
        self.gradients_and_stops(batch, eps, term).map(|(v, g, _)| (v, g))
    }

    fn gradients_and_stops(
        &self,
        batch: &SegmentBatch,
        eps: &Array2<f64>,
        term: LossTerm,
    ) -> Result<(f64, Vec<Vec<Array2<f64>>>, Vec<Array2<f64>>)> {
        let tape = Tape::new();
        let b = self.bind(&tape, true, false);
        let v = self.loss_vars(&tape, &b, batch, eps)?;
        let target = term.pick(&v);
        let value = tape.item(target);
        let g = tape.backward(target);
        let mut out = Vec::new();
        if let (Some(tm), Some(tb)) = (&self.tm, &b.tm) {
            out.push(tb.grads(&g, &tm.params));
        }
        out.push(b.vae.grads(&g, &self.vae.params));
        out.push(b.ifm.grads(&g, &self.ifm.params));
        Ok((value, out, tape.stopped_values()))
    }

    /// Mutable access to the parameter stores in gradient order.
    pub fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        let mut out = Vec::new();
        if let Some(tm) = self.tm.as_mut() {
            out.push(&mut tm.params);
        }
        out.push(&mut self.vae.params);
        out.push(&mut self.ifm.params);
        out
    }

    /// Damping factor for a pi vector and the predicted next one; 1 when ablated.
    pub fn damping(&self, pi: &[f64], pi_hat_next: &[f64]) -> Result<f64> {
        if !self.config.uses_damping() {
            return Ok(1.0);
        }
        let k = self.config.tm.k;
        if pi.len() != k || pi_hat_next.len() != k {
            return Err(AfnError::Input(format!("damping expects two vectors of length {k}")));
        }
        let tape = Tape::new();
        let p = self.ifm.params.bind_frozen(&tape);
        let a = tape.constant(Array2::from_shape_vec((1, k), pi.to_vec()).expect("shape"));
        let b = tape.constant(Array2::from_shape_vec((1, k), pi_hat_next.to_vec()).expect("shape"));
        let d = self.damping_var(&tape, &p, a, b);
        let v = tape.item(d);
        Ok(v)
    }

    /// Conditions of every step of a normalized series, with the pi path.
    fn history_conditions(&self, xn: &Array2<f64>) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
        let t = xn.nrows();
        match &self.tm {
            Some(tm) => {
                let path = crate::transition::pi_path(xn.view(), tm.config.c, tm.config.m, &tm.cluster_model)?;
                Ok((tm.condition_batch(&path), Some(path)))
            }
            None => {
                let mut c = Array2::zeros((t, self.rho()));
                c.column_mut(0).fill(1.0);
                Ok((c, None))
            }
        }
    }

    /// Normalized features, discrete conditions, latent means and nodes of
    /// every step of a raw set, flattened series-major.
    pub fn embed_set(&self, raw: &TimeSeriesSet) -> Result<Embedding> {
        if raw.n_features() != self.d() {
            return Err(AfnError::Input(format!("set has {} features, model expects {}", raw.n_features(), self.d())));
        }
        let normalized = self.norm.apply(raw);
        let (n, t, d) = normalized.values.dim();
        let mut x = Array2::zeros((n * t, d));
        let mut cond = Array2::zeros((n * t, self.rho()));
        for i in 0..n {
            let xs = normalized.series(i).to_owned();
            let (c, _) = self.history_conditions(&xs)?;
            x.slice_mut(s![i * t..(i + 1) * t, ..]).assign(&xs);
            cond.slice_mut(s![i * t..(i + 1) * t, ..]).assign(&c);
        }
        let (means, _) = self.vae.encode_batch(&x, &cond);
        let nodes = self.vae.assign_batch(&means);
        let conditions = cond.rows().into_iter().map(|r| crate::transition::argmax(r.as_slice().expect("row"))).collect();
        Ok(Embedding {
            x,
            conditions,
            means,
            nodes,
            steps: t,
        })
    }

    /// Eval-mode autoregressive forecast of `h` steps from a raw `[T, d]` history.
    pub fn forecast(&self, series: ndarray::ArrayView2<'_, f64>, h: usize) -> Result<Forecast> {
        let (t, d) = series.dim();
        if d != self.d() {
            return Err(AfnError::Input(format!("series has {d} features, model expects {}", self.d())));
        }
        if h == 0 {
            return Err(AfnError::Input("horizon must be at least 1".into()));
        }
        let need = self.required_history();
        if t < need {
            return Err(AfnError::History {
                required: need,
                available: t,
            });
        }
        if series.iter().any(|v| !v.is_finite()) {
            return Err(AfnError::Input("series contains NaN or infinite values".into()));
        }
        let mut xn = series.to_owned();
        for mut row in xn.rows_mut() {
            let r = row.as_slice_mut().expect("contiguous");
            self.norm.normalize_row(r);
        }
        let (c_hist, path) = self.history_conditions(&xn)?;
        let (means, _) = self.vae.encode_batch(&xn, &c_hist);
        let q = self.vae.soft_assign_batch(&means);

        let tape = Tape::new();
        let p = self.ifm.params.bind_frozen(&tape);
        let mut state = self.ifm.lstm.zero_state(&tape, 1);
        let mut hs = Vec::with_capacity(t);
        let mut keys = Vec::with_capacity(t);
        for s in 0..t {
            let mut input = means.row(s).to_vec();
            input.extend(q.row(s).iter());
            let x = tape.constant(Array2::from_shape_vec((1, input.len()), input).expect("shape"));
            state = self.ifm.lstm.step(&tape, &p, x, state);
            hs.push(state.h);
            if !self.config.ablation.al {
                keys.push(self.ifm.att_key.forward(&tape, &p, state.h));
            }
        }

        let mut conditions: Vec<Condition> = c_hist.rows().into_iter().map(|r| Condition::from_distribution(r.to_vec())).collect();
        let mut latent_path: Vec<Vec<f64>> = means.rows().into_iter().map(|r| r.to_vec()).collect();
        let mut pis: Vec<Vec<f64>> = path.as_ref().map(|p| p.rows().into_iter().map(|r| r.to_vec()).collect()).unwrap_or_default();
        let mut x_hat = Vec::with_capacity(h);
        let mut attention = Vec::with_capacity(h);
        let mut damping = Vec::with_capacity(h);
        let mut z_cur = means.row(t - 1).to_vec();
        for j in 0..h {
            let (delta, _, w) = self.head(&tape, &p, state.h, &hs, &keys);
            let z_next: Vec<f64> = z_cur.iter().zip(tape.value(delta).iter()).map(|(a, b)| a + b).collect();
            if let Some(w) = w {
                attention.push(tape.value(w).iter().copied().collect::<Vec<f64>>());
            }
            let cond = match &self.tm {
                Some(tm) => {
                    let n = pis.len();
                    let input: Vec<f64> = (0..tm.config.markov_order).flat_map(|lag| pis[n - 1 - lag.min(n - 1)].clone()).collect();
                    let pi_hat = tm.dmm_predict(&input)?;
                    damping.push(self.damping(&pis[n - 1], &pi_hat)?);
                    let c = tm.condition_of(&pi_hat)?;
                    pis.push(pi_hat);
                    c
                }
                None => {
                    damping.push(1.0);
                    Condition::one_hot(0, self.rho())
                }
            };
            let mut xr = self.vae.decode(&z_next, &cond)?;
            self.norm.denormalize_row(&mut xr);
            x_hat.push(xr);
            conditions.push(cond);
            latent_path.push(z_next.clone());
            if j + 1 < h {
                let zq = Array2::from_shape_vec((1, self.vae.m), z_next.clone()).expect("shape");
                let mut input = z_next.clone();
                input.extend(self.vae.soft_assign_batch(&zq).iter());
                let x = tape.constant(Array2::from_shape_vec((1, input.len()), input).expect("shape"));
                state = self.ifm.lstm.step(&tape, &p, x, state);
            }
            z_cur = z_next;
        }
        let lat = Array2::from_shape_fn((latent_path.len(), self.vae.m), |(i, j)| latent_path[i][j]);
        let nodes = self.vae.assign_batch(&lat);
        let grid = self.vae.grid();
        Ok(Forecast {
            horizon: h,
            history_len: t,
            x_hat,
            latent_path,
            node_path: nodes.iter().map(|&k| grid.coords(k)).collect(),
            node_index: nodes,
            attention: if self.config.ablation.al { None } else { Some(attention) },
            conditions,
            damping,
        })
    }
}

/// Per-step view of a set through a trained model. Row `i * steps + t` is step `t` of series `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub x: Array2<f64>,
    pub conditions: Vec<usize>,
    pub means: Array2<f64>,
    pub nodes: Vec<usize>,
    pub steps: usize,
}

/// Output of one rollout. Paths cover history followed by horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub horizon: usize,
    pub history_len: usize,
    /// Denormalized forecasts, `[h, d]`.
    pub x_hat: Vec<Vec<f64>>,
    pub latent_path: Vec<Vec<f64>>,
    pub node_path: Vec<(usize, usize)>,
    pub node_index: Vec<usize>,
    /// Attention over the history for every emitted step; absent without attention.
    pub attention: Option<Vec<Vec<f64>>>,
    pub conditions: Vec<Condition>,
    pub damping: Vec<f64>,
}

/// Attention rows of a forecast.
pub fn attention_weights(forecast: &Forecast) -> Result<&[Vec<f64>]> {
    forecast
        .attention
        .as_deref()
        .ok_or_else(|| AfnError::Unsupported("model was trained without attention".into()))
}

/// Which loss term to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Som,
    Commit,
    Reconstruction,
    Smoothness,
    Tdpsom,
    Transition,
    Pred,
    Forecasting,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 9] = [
        LossTerm::Som,
        LossTerm::Commit,
        LossTerm::Reconstruction,
        LossTerm::Smoothness,
        LossTerm::Tdpsom,
        LossTerm::Transition,
        LossTerm::Pred,
        LossTerm::Forecasting,
        LossTerm::Total,
    ];

    fn pick(&self, v: &AfnLossVars) -> Var {
        match self {
            LossTerm::Som => v.map.som,
            LossTerm::Commit => v.map.commit,
            LossTerm::Reconstruction => v.map.recon,
            LossTerm::Smoothness => v.map.smooth,
            LossTerm::Tdpsom => v.map.total,
            LossTerm::Transition => v.transition,
            LossTerm::Pred => v.pred,
            LossTerm::Forecasting => v.forecasting,
            LossTerm::Total => v.total,
        }
    }

    pub fn read(&self, l: &AfnLosses) -> f64 {
        match self {
            LossTerm::Som => l.som,
            LossTerm::Commit => l.commit,
            LossTerm::Reconstruction => l.reconstruction,
            LossTerm::Smoothness => l.smoothness,
            LossTerm::Tdpsom => l.tdpsom,
            LossTerm::Transition => l.transition,
            LossTerm::Pred => l.pred,
            LossTerm::Forecasting => l.forecasting,
            LossTerm::Total => l.total,
        }
    }
}

/// Largest relative disagreement between analytic and finite-difference
/// gradients of `term`, over `probes` random scalars per store. Stopped
/// quantities are held at their unperturbed values during probing.
pub fn gradient_check(
    model: &AfnModel,
    batch: &SegmentBatch,
    eps: &Array2<f64>,
    term: LossTerm,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    let (_, grads, stops) = model.gradients_and_stops(batch, eps, term)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (si, store_grads) in grads.iter().enumerate() {
        for _ in 0..probes {
            let ti = rng.random_range(0..store_grads.len());
            let g = &store_grads[ti];
            let (r, c) = (rng.random_range(0..g.nrows()), rng.random_range(0..g.ncols()));
            let id = probe.stores_mut()[si].ids().nth(ti).expect("tensor");
            let orig = probe.stores_mut()[si].get(id)[[r, c]];
            let mut at = |offset: f64| -> Result<f64> {
                probe.stores_mut()[si].get_mut(id)[[r, c]] = orig + offset;
                let v = term.read(&probe.afn_loss_on(Tape::replaying(stops.clone()), batch, eps)?);
                probe.stores_mut()[si].get_mut(id)[[r, c]] = orig;
                Ok(v)
            };
            // fourth-order central stencil
            let numeric = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
            let analytic = g[[r, c]];
            let scale = analytic.abs().max(numeric.abs());
            let err = if scale < 1e-5 { (analytic - numeric).abs() } else { (analytic - numeric).abs() / scale };
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Normalized training data with precomputed pi paths.
pub struct TrainingData {
    pub x: Array3<f64>,
    pub pi: Option<Array3<f64>>,
}

impl TrainingData {
    pub fn new(model: &AfnModel, normalized: &TimeSeriesSet) -> Result<Self> {
        let pi = match &model.tm {
            Some(tm) => Some(tm.pi_paths(normalized)?),
            None => None,
        };
        Ok(Self {
            x: normalized.values.clone(),
            pi,
        })
    }

    /// Segments `(series, start)` of length `len`, time-major.
    pub fn batch(&self, model: &AfnModel, picks: &[(usize, usize)], len: usize) -> SegmentBatch {
        let bs = picks.len();
        let d = self.x.dim().2;
        let mut x = Array2::zeros((len * bs, d));
        for t in 0..len {
            for (b, &(i, s)) in picks.iter().enumerate() {
                x.row_mut(t * bs + b).assign(&self.x.slice(s![i, s + t, ..]));
            }
        }
        let (pi, dmm_in) = match (&self.pi, &model.tm) {
            (Some(paths), Some(tm)) => {
                let k = tm.k();
                let mut pi = Array2::zeros((len * bs, k));
                let mut din = Array2::zeros((len * bs, k * tm.config.markov_order));
                for t in 0..len {
                    for (b, &(i, s)) in picks.iter().enumerate() {
                        let path = paths.slice(s![i, .., ..]);
                        pi.row_mut(t * bs + b).assign(&path.row(s + t));
                        let v = tm.dmm_input(path, s + t);
                        din.row_mut(t * bs + b).assign(&ndarray::ArrayView1::from(&v));
                    }
                }
                (Some(pi), Some(din))
            }
            _ => (None, None),
        };
        SegmentBatch {
            x,
            pi,
            dmm_in,
            batch: bs,
            len,
        }
    }
}

/// Trains the full model on a raw training set. A pretrained transition
/// module may be supplied; otherwise one is pretrained here unless ablated.
pub fn train_afn(train: &TimeSeriesSet, cfg: &AfnConfig, tm: Option<TransitionModel>) -> Result<AfnModel> {
    train_afn_with(train, cfg, tm, &mut |_, _| {})
}

/// As [`train_afn`], calling `on_stage_end` with each stage's final model.
pub fn train_afn_with(
    train: &TimeSeriesSet,
    cfg: &AfnConfig,
    tm: Option<TransitionModel>,
    on_stage_end: &mut dyn FnMut(Stage, &AfnModel),
) -> Result<AfnModel> {
    cfg.validate()?;
    let norm = NormStats::fit(train)?;
    let normalized = norm.apply(train);
    if cfg.segment_len > normalized.len() {
        return Err(AfnError::Precondition(format!(
            "segment length {} exceeds series length {}",
            cfg.segment_len,
            normalized.len()
        )));
    }
    let tm = if cfg.uses_tm() {
        Some(match tm {
            Some(t) => t,
            None => pretrain_tm(&normalized, &cfg.tm)?,
        })
    } else {
        None
    };
    let mut model = AfnModel::new(cfg.clone(), train.feature_names.clone(), norm, tm)?;
    let data = TrainingData::new(&model, &normalized)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(71));
    let n = normalized.n_series();
    let t = normalized.len();
    let len = cfg.segment_len;
    let batches = cfg.batches_per_epoch.unwrap_or(n.div_ceil(cfg.batch_size)).max(1);

    let mut adams: Vec<Adam> = model.stores_mut().into_iter().map(|s| Adam::new(s, cfg.lr)).collect();
    let stages = [
        (Stage::Warmup, cfg.vae_warmup_epochs),
        (Stage::A, cfg.stage_a_epochs),
        (Stage::B, cfg.stage_b_epochs),
        (Stage::C, if cfg.ablation.fft { 0 } else { cfg.stage_c_epochs }),
    ];
    for (stage, epochs) in stages {
        if stage == Stage::A {
            init_centroids(&mut model, &data, &mut rng)?;
        }
        let lr = if stage == Stage::C { cfg.lr * cfg.fft_lr_scale } else { cfg.lr };
        adams.iter_mut().for_each(|a| a.lr = lr);
        for epoch in 0..epochs {
            let mut acc = EpochLog {
                stage: stage.name().into(),
                epoch,
                objective: 0.0,
                tdpsom: 0.0,
                transition: 0.0,
                pred: 0.0,
                forecasting: 0.0,
            };
            for _ in 0..batches {
                let picks: Vec<(usize, usize)> = (0..cfg.batch_size.min(n.max(1)))
                    .map(|_| (rng.random_range(0..n), rng.random_range(0..=t - len)))
                    .collect();
                let batch = data.batch(&model, &picks, len);
                let eps = Array2::from_shape_fn((batch.x.nrows(), model.vae.m), |_| rng.sample(StandardNormal));
                let tape = Tape::new();
                let train_tm = stage != Stage::Warmup;
                let b = model.bind(&tape, train_tm, false);
                let v = model.loss_vars(&tape, &b, &batch, &eps)?;
                let objective = match stage {
                    Stage::Warmup => v.map.recon,
                    Stage::A => tape.add(v.map.total, tape.scale(v.transition, cfg.tau_w)),
                    Stage::B | Stage::C => {
                        let base = tape.add(
                            tape.add(v.map.total, tape.scale(v.transition, cfg.tau_w)),
                            tape.scale(v.pred, cfg.eta),
                        );
                        let base = tape.add(base, tape.scale(v.damping_reg, cfg.eta * cfg.damping_reg));
                        if stage == Stage::C {
                            tape.add(base, v.forecasting)
                        } else {
                            base
                        }
                    }
                };
                let value = tape.item(objective);
                if !value.is_finite() {
                    return Err(AfnError::Training {
                        stage: stage.name().into(),
                        epoch,
                        message: "objective is not finite".into(),
                    });
                }
                let l = model.read_losses(&tape, &v);
                let w = 1.0 / batches as f64;
                acc.objective += value * w;
                acc.tdpsom += l.tdpsom * w;
                acc.transition += l.transition * w;
                acc.pred += l.pred * w;
                acc.forecasting += l.forecasting * w;
                let g = tape.backward(objective);
                let mut grads = Vec::new();
                if let (Some(tmm), Some(tb)) = (&model.tm, &b.tm) {
                    grads.push(tb.grads(&g, &tmm.params));
                }
                grads.push(b.vae.grads(&g, &model.vae.params));
                grads.push(b.ifm.grads(&g, &model.ifm.params));
                drop(b);
                drop(tape);
                for ((store, adam), g) in model.stores_mut().into_iter().zip(adams.iter_mut()).zip(&grads) {
                    adam.step(store, g);
                }
            }
            log::debug!(
                "stage {} epoch {epoch}: objective {:.4} map {:.4} transition {:.4} pred {:.4} forecasting {:.4}",
                stage.name(),
                acc.objective,
                acc.tdpsom,
                acc.transition,
                acc.pred,
                acc.forecasting
            );
            model.log.push(acc);
        }
        if epochs > 0 || stage == Stage::C {
            on_stage_end(stage, &model);
        }
    }
    let finite = model.vae.params.all_finite()
        && model.ifm.params.all_finite()
        && model.tm.as_ref().map(|t| t.params.all_finite()).unwrap_or(true);
    if !finite {
        return Err(AfnError::Training {
            stage: "final".into(),
            epoch: 0,
            message: "non-finite weights".into(),
        });
    }
    Ok(model)
}

fn init_centroids(model: &mut AfnModel, data: &TrainingData, rng: &mut ChaCha8Rng) -> Result<()> {
    let (n, t, d) = data.x.dim();
    let take = 2000.min(n * t);
    let mut xs = Array2::zeros((take, d));
    let mut picks = Vec::with_capacity(take);
    for r in 0..take {
        let (i, s) = (rng.random_range(0..n), rng.random_range(0..t));
        xs.row_mut(r).assign(&data.x.slice(s![i, s, ..]));
        picks.push((i, s));
    }
    let c = match (&model.tm, &data.pi) {
        (Some(tm), Some(pi)) => {
            let rows = Array2::from_shape_fn((take, tm.k()), |(r, k)| pi[[picks[r].0, picks[r].1, k]]);
            tm.condition_batch(&rows)
        }
        _ => {
            let mut c = Array2::zeros((take, model.rho()));
            c.column_mut(0).fill(1.0);
            c
        }
    };
    let (means, _) = model.vae.encode_batch(&xs, &c);
    model.vae.init_centroids_pca(&means)
}

/// Test-set error on the normalized scale: the last `horizon` steps of each
/// series are forecast from everything before them.
pub fn evaluate_mse(model: &AfnModel, test: &TimeSeriesSet, horizon: usize) -> Result<f64> {
    let t = test.len();
    if horizon >= t {
        return Err(AfnError::Precondition("horizon must be shorter than the series".into()));
    }
    let hist = t - horizon;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..test.n_series() {
        let series = test.series(i);
        let f = model.forecast(series.slice(s![..hist, ..]), horizon)?;
        for (j, row) in f.x_hat.iter().enumerate() {
            let mut pred = row.clone();
            model.norm.normalize_row(&mut pred);
            let mut truth = series.row(hist + j).to_vec();
            model.norm.normalize_row(&mut truth);
            sum += pred.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            count += pred.len();
        }
    }
    Ok(sum / count as f64)
}

/// Last-value baseline error on the normalized scale.
pub fn persistence_mse(norm: &NormStats, test: &TimeSeriesSet, horizon: usize) -> Result<f64> {
    let t = test.len();
    if horizon >= t {
        return Err(AfnError::Precondition("horizon must be shorter than the series".into()));
    }
    let hist = t - horizon;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..test.n_series() {
        let series = test.series(i);
        let mut last = series.row(hist - 1).to_vec();
        norm.normalize_row(&mut last);
        for j in 0..horizon {
            let mut truth = series.row(hist + j).to_vec();
            norm.normalize_row(&mut truth);
            sum += last.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            count += last.len();
        }
    }
    Ok(sum / count as f64)
}
