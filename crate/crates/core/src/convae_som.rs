//! Condition-aware variational autoencoder with a self-organizing map over
//! its latent space.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{AfnError, Result};
use crate::nn::{Bound, Mlp, ParamId, ParamStore};
use crate::tape::{pairwise_sq_dist, softmax_rows, Tape, Var};
use crate::transition::Condition;

/// Rectangular grid with 4-adjacency. Node `(i, j)` has index `i * width + j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SomGrid {
    pub height: usize,
    pub width: usize,
}

impl Default for SomGrid {
    fn default() -> Self {
        Self { height: 8, width: 8 }
    }
}

impl SomGrid {
    pub fn n_nodes(&self) -> usize {
        self.height * self.width
    }

    pub fn coords(&self, k: usize) -> (usize, usize) {
        (k / self.width, k % self.width)
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.width + j
    }

    /// The node itself and its grid neighbours.
    pub fn closed_neighbourhood(&self, k: usize) -> Vec<usize> {
        let (i, j) = self.coords(k);
        let mut out = vec![k];
        if i > 0 {
            out.push(self.index(i - 1, j));
        }
        if i + 1 < self.height {
            out.push(self.index(i + 1, j));
        }
        if j > 0 {
            out.push(self.index(i, j - 1));
        }
        if j + 1 < self.width {
            out.push(self.index(i, j + 1));
        }
        out
    }

    pub fn manhattan(&self, a: usize, b: usize) -> usize {
        let (ai, aj) = self.coords(a);
        let (bi, bj) = self.coords(b);
        ai.abs_diff(bi) + aj.abs_diff(bj)
    }

    pub fn key(&self, k: usize) -> String {
        let (i, j) = self.coords(k);
        format!("{i},{j}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdpsomWeights {
    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,
    pub kappa: f64,
}

impl Default for TdpsomWeights {
    fn default() -> Self {
        Self {
            beta: 0.1,
            gamma: 0.3,
            theta: 0.1,
            kappa: 1.0,
        }
    }
}

impl TdpsomWeights {
    pub fn combine(&self, som: f64, commit: f64, recon: f64, smooth: f64) -> f64 {
        som * self.beta + commit * self.gamma + recon * self.theta + smooth * self.kappa
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvaeConfig {
    /// Latent width; `None` picks `min(16, d - 1)`.
    pub latent_dim: Option<usize>,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub grid: SomGrid,
    /// Degrees of freedom of the Student-t assignment kernel.
    pub alpha: f64,
    pub weights: TdpsomWeights,
}

impl Default for ConvaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: None,
            encoder_hidden: vec![500, 500, 2000],
            decoder_hidden: vec![2000, 500, 500],
            grid: SomGrid::default(),
            alpha: 10.0,
            weights: TdpsomWeights::default(),
        }
    }
}

impl ConvaeConfig {
    pub fn resolve_latent(&self, d: usize) -> Result<usize> {
        let m = self.latent_dim.unwrap_or(16.min(d.saturating_sub(1)));
        if m == 0 || m >= d {
            return Err(AfnError::Config(format!("latent dim must satisfy 0 < m < d (m = {m}, d = {d})")));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
    pub z: Vec<f64>,
}

/// Tape handles of the four map losses and the intermediate quantities the
/// forecaster reuses.
pub struct TdpsomVars {
    pub som: Var,
    pub commit: Var,
    pub recon: Var,
    pub smooth: Var,
    pub total: Var,
    pub mean: Var,
    pub log_var: Var,
    pub z: Var,
    /// Nearest node of every sampled latent.
    pub nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvaeSom {
    pub config: ConvaeConfig,
    pub d: usize,
    pub rho: usize,
    pub m: usize,
    pub params: ParamStore,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub centroids: ParamId,
}

impl ConvaeSom {
    pub fn new(config: ConvaeConfig, d: usize, rho: usize, seed: u64) -> Result<Self> {
        let m = config.resolve_latent(d)?;
        if config.grid.height == 0 || config.grid.width == 0 || !(config.alpha > 0.0) {
            return Err(AfnError::Config("grid must be non-empty and alpha positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(31));
        let mut params = ParamStore::new();
        let encoder = Mlp::new(&mut params, &mut rng, "vae.enc", d + rho, &config.encoder_hidden, 2 * m);
        let decoder = Mlp::new(&mut params, &mut rng, "vae.dec", m + rho, &config.decoder_hidden, d);
        let n = config.grid.n_nodes();
        let init = Array2::from_shape_fn((n, m), |_| rng.sample::<f64, _>(StandardNormal) * 0.1);
        let centroids = params.add("som.centroids", init);
        Ok(Self {
            config,
            d,
            rho,
            m,
            params,
            encoder,
            decoder,
            centroids,
        })
    }

    pub fn grid(&self) -> SomGrid {
        self.config.grid
    }

    pub fn centroid_matrix(&self) -> &Array2<f64> {
        self.params.get(self.centroids)
    }

    /// Encoder mean and log-variance for `[n, d]` inputs and `[n, rho]` conditions.
    pub fn encode_vars(&self, tape: &Tape, p: &Bound, x: Var, c: Var) -> (Var, Var) {
        let out = self.encoder.forward(tape, p, tape.concat_cols(&[x, c]));
        (tape.slice_cols(out, 0, self.m), tape.slice_cols(out, self.m, 2 * self.m))
    }

    pub fn decode_var(&self, tape: &Tape, p: &Bound, z: Var, c: Var) -> Var {
        self.decoder.forward(tape, p, tape.concat_cols(&[z, c]))
    }

    /// Log of the Student-t soft assignment of each latent row to every node.
    pub fn log_assign_var(&self, tape: &Tape, z: Var, mu: Var) -> Var {
        let a = self.config.alpha;
        let d = tape.sq_dist(z, mu);
        let k = tape.log(tape.add_scalar(tape.scale(d, 1.0 / a), 1.0));
        tape.log_softmax_rows(tape.scale(k, -(a + 1.0) / 2.0))
    }

    /// Map losses for `batch` contiguous segments stored time-major
    /// (`row = t * batch + b`). `eps` drives the reparameterized sample.
    pub fn tdpsom_vars(&self, tape: &Tape, p: &Bound, x: Var, c: Var, eps: &Array2<f64>, batch: usize) -> Result<TdpsomVars> {
        let rows = tape.shape(x).0;
        if batch == 0 || rows % batch != 0 || rows / batch < 2 {
            return Err(AfnError::Precondition(format!(
                "map losses need contiguous segments of at least 2 steps ({rows} rows, batch {batch})"
            )));
        }
        if eps.dim() != (rows, self.m) {
            return Err(AfnError::Precondition("noise shape does not match the latent batch".into()));
        }
        let grid = self.grid();
        let (mean, log_var) = self.encode_vars(tape, p, x, c);
        let std = tape.exp(tape.scale(log_var, 0.5));
        let z = tape.add(mean, tape.mul(std, tape.constant(eps.clone())));
        let mu = p.var(self.centroids);

        let dist = pairwise_sq_dist(&tape.value(z), &tape.value(mu));
        let nodes: Vec<usize> = dist.rows().into_iter().map(|r| first_min(r.iter().copied())).collect();

        // neighbourhood mass with the latent held fixed
        let z_fixed = tape.detach(z);
        let q_fixed = tape.exp(self.log_assign_var(tape, z_fixed, mu));
        let mut mask = Array2::zeros((rows, grid.n_nodes()));
        for (r, &k) in nodes.iter().enumerate() {
            for nb in grid.closed_neighbourhood(k) {
                mask[[r, nb]] = 1.0;
            }
        }
        let mass = tape.sum_rows(tape.mul(q_fixed, tape.constant(mask)));
        let som = tape.scale(tape.mean(tape.log(mass)), -1.0);

        let assigned = tape.gather_rows(mu, nodes.clone());
        let commit = tape.mean(tape.sum_rows(tape.square(tape.sub(z, assigned))));

        let x_hat = self.decode_var(tape, p, z, c);
        let sq = tape.sum_rows(tape.square(tape.sub(x, x_hat)));
        let kl_terms = tape.sub(
            tape.add(tape.square(mean), tape.exp(log_var)),
            tape.add_scalar(log_var, 1.0),
        );
        let kl = tape.scale(tape.sum_rows(kl_terms), 0.5);
        let recon = tape.mean(tape.add(sq, kl));

        let logq = self.log_assign_var(tape, z, mu);
        let next = tape.slice_rows(logq, batch, rows);
        let picked = tape.pick_cols(next, nodes[..rows - batch].to_vec());
        let smooth = tape.scale(tape.mean(picked), -1.0);

        let w = self.config.weights;
        let total = tape.add(
            tape.add(
                tape.add(tape.scale(som, w.beta), tape.scale(commit, w.gamma)),
                tape.scale(recon, w.theta),
            ),
            tape.scale(smooth, w.kappa),
        );
        Ok(TdpsomVars {
            som,
            commit,
            recon,
            smooth,
            total,
            mean,
            log_var,
            z,
            nodes,
        })
    }

    fn check_condition(&self, c: &Condition) -> Result<()> {
        if c.distribution.len() != self.rho {
            return Err(AfnError::Input(format!(
                "condition has {} entries, expected {}",
                c.distribution.len(),
                self.rho
            )));
        }
        Ok(())
    }

    /// Batched encoder means and log-variances.
    pub fn encode_batch(&self, x: &Array2<f64>, c: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let (mean, lv) = self.encode_vars(&tape, &p, tape.constant(x.clone()), tape.constant(c.clone()));
        let out = (tape.value(mean).clone(), tape.value(lv).clone());
        out
    }

    pub fn decode_batch(&self, z: &Array2<f64>, c: &Array2<f64>) -> Array2<f64> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let out = self.decode_var(&tape, &p, tape.constant(z.clone()), tape.constant(c.clone()));
        let v = tape.value(out).clone();
        v
    }

    /// Eval-mode encoding: the sample equals the mean.
    pub fn encode(&self, x: &[f64], c: &Condition) -> Result<LatentCode> {
        self.encode_with_noise(x, c, None)
    }

    /// Train-mode encoding with a seeded reparameterization draw.
    pub fn encode_sample(&self, x: &[f64], c: &Condition, seed: u64) -> Result<LatentCode> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<f64> = (0..self.m).map(|_| rng.sample(StandardNormal)).collect();
        self.encode_with_noise(x, c, Some(&eps))
    }

    fn encode_with_noise(&self, x: &[f64], c: &Condition, eps: Option<&[f64]>) -> Result<LatentCode> {
        if x.len() != self.d {
            return Err(AfnError::Input(format!("expected {} features, got {}", self.d, x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(AfnError::Input("input contains NaN or infinite values".into()));
        }
        self.check_condition(c)?;
        let xa = Array2::from_shape_vec((1, self.d), x.to_vec()).expect("shape");
        let ca = Array2::from_shape_vec((1, self.rho), c.distribution.clone()).expect("shape");
        let (mean, lv) = self.encode_batch(&xa, &ca);
        let mean = mean.row(0).to_vec();
        let log_var = lv.row(0).to_vec();
        let z = match eps {
            None => mean.clone(),
            Some(e) => mean.iter().zip(&log_var).zip(e).map(|((m, l), e)| m + (l / 2.0).exp() * e).collect(),
        };
        Ok(LatentCode { mean, log_var, z })
    }

    pub fn decode(&self, z: &[f64], c: &Condition) -> Result<Vec<f64>> {
        if z.len() != self.m {
            return Err(AfnError::Input(format!("expected latent of width {}, got {}", self.m, z.len())));
        }
        self.check_condition(c)?;
        let za = Array2::from_shape_vec((1, self.m), z.to_vec()).expect("shape");
        let ca = Array2::from_shape_vec((1, self.rho), c.distribution.clone()).expect("shape");
        Ok(self.decode_batch(&za, &ca).row(0).to_vec())
    }

    /// Nearest node (lowest index on ties) with its grid coordinates and centroid.
    pub fn som_assign(&self, z: &[f64]) -> (usize, (usize, usize), Vec<f64>) {
        let mu = self.centroid_matrix();
        let k = first_min(mu.rows().into_iter().map(|r| r.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum::<f64>()));
        (k, self.grid().coords(k), mu.row(k).to_vec())
    }

    pub fn assign_batch(&self, z: &Array2<f64>) -> Vec<usize> {
        pairwise_sq_dist(z, self.centroid_matrix())
            .rows()
            .into_iter()
            .map(|r| first_min(r.iter().copied()))
            .collect()
    }

    /// Student-t soft assignment of `[n, m]` latents, rows on the simplex.
    pub fn soft_assign_batch(&self, z: &Array2<f64>) -> Array2<f64> {
        let a = self.config.alpha;
        let d = pairwise_sq_dist(z, self.centroid_matrix());
        softmax_rows(&d.mapv(|v| -(a + 1.0) / 2.0 * (1.0 + v / a).ln()))
    }

    /// Place centroids on a regular grid spanned by the two leading principal
    /// directions of `latents`, covering two standard deviations each way.
    pub fn init_centroids_pca(&mut self, latents: &Array2<f64>) -> Result<()> {
        let (n, m) = latents.dim();
        if n < 2 {
            return Err(AfnError::Precondition("need at least two latents for centroid initialisation".into()));
        }
        let mean = latents.mean_axis(Axis(0)).expect("rows");
        let centered = latents - &mean;
        let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(DMatrix::from_fn(m, m, |i, j| cov[[i, j]]));
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let axis = |r: usize| -> (Vec<f64>, f64) {
            let idx = order[r.min(m - 1)];
            let v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
            // fix the sign so the layout does not depend on the solver
            let sign = if v.iter().copied().fold(0.0, |acc: f64, x| if x.abs() > acc.abs() { x } else { acc }) < 0.0 { -1.0 } else { 1.0 };
            (v.into_iter().map(|x| x * sign).collect(), eig.eigenvalues[idx].max(1e-12).sqrt())
        };
        let (e1, s1) = axis(0);
        let (e2, s2) = if m > 1 { axis(1) } else { (vec![0.0; m], 0.0) };
        let grid = self.grid();
        let pos = |i: usize, len: usize| if len > 1 { -2.0 + 4.0 * i as f64 / (len - 1) as f64 } else { 0.0 };
        let mu = self.params.get_mut(self.centroids);
        for k in 0..grid.n_nodes() {
            let (i, j) = grid.coords(k);
            let (a, b) = (pos(i, grid.height) * s1, pos(j, grid.width) * s2);
            for c in 0..m {
                mu[[k, c]] = mean[c] + a * e1[c] + b * e2[c];
            }
        }
        Ok(())
    }

    /// Mean centroid distance between grid neighbours divided by the mean
    /// distance between non-adjacent pairs.
    pub fn topology_ratio(&self) -> f64 {
        let grid = self.grid();
        let mu = self.centroid_matrix();
        let (mut adj, mut na, mut non, mut nn) = (0.0, 0usize, 0.0, 0usize);
        for a in 0..grid.n_nodes() {
            for b in a + 1..grid.n_nodes() {
                let d = mu.row(a).iter().zip(mu.row(b).iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                if grid.manhattan(a, b) == 1 {
                    adj += d;
                    na += 1;
                } else {
                    non += d;
                    nn += 1;
                }
            }
        }
        (adj / na.max(1) as f64) / (non / nn.max(1) as f64)
    }
}

/// Index of the first minimum.
pub fn first_min(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::INFINITY;
    for (i, v) in values.enumerate() {
        if v < best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Analytic KL divergence of a diagonal Gaussian from the standard normal.
pub fn gaussian_kl(mean: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mean
        .iter()
        .zip(log_var)
        .map(|(m, l)| m * m + l.exp() - 1.0 - l)
        .sum::<f64>()
}
