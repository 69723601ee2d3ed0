//! Conditional VAE trajectory forecaster.
//!
//! Three small MLPs share one latent space: a prior encoder maps the
//! flattened observed past `x` to a diagonal Gaussian over latents, a
//! posterior encoder maps `(x, y)` to another diagonal Gaussian, and a
//! decoder maps `(x, z)` back to a future trajectory `y`. Training maximizes
//! the evidence lower bound with the reparameterization trick; the KL term
//! anchors the posterior to the *inferred* prior (not a fixed standard
//! normal), which is what later lets a separate encoder bias the latent
//! distribution while staying comparable to the prior.
//!
//! Trajectories are flattened time-major, positions relative to the agent's
//! last observed point, so the model is translation-invariant.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    adam_step, load_checkpoint, save_checkpoint, AdamConfig, Mlp, MlpSpec, MlpVars, OptimState,
    Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::geom::{Trajectory, Vec2};
use crate::rng::stream_rng;
use crate::sim::Dataset;

/// Encoder log-variances are clamped to this symmetric range.
pub const LOG_VAR_CLAMP: f64 = 10.0;

/// A diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(Error::Dimension {
                op: "diagonal_gaussian",
                detail: format!("mu dim {} vs log_var dim {}", mu.len(), log_var.len()),
            });
        }
        if !mu.iter().chain(log_var.iter()).all(|v| v.is_finite()) {
            return Err(Error::Domain("gaussian parameters must be finite".into()));
        }
        Ok(DiagonalGaussian { mu, log_var })
    }

    /// Standard normal of dimension `dim`.
    pub fn standard(dim: usize) -> Self {
        DiagonalGaussian { mu: vec![0.0; dim], log_var: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `z = mu + exp(log_var / 2) * noise`, elementwise.
    pub fn reparameterize(&self, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.dim() {
            return Err(Error::Dimension {
                op: "reparameterize",
                detail: format!("noise dim {} vs latent dim {}", noise.len(), self.dim()),
            });
        }
        Ok(self
            .mu
            .iter()
            .zip(&self.log_var)
            .zip(noise)
            .map(|((&m, &lv), &n)| m + (0.5 * lv).exp() * n)
            .collect())
    }
}

/// Closed-form KL divergence between diagonal Gaussians, `KL(q || p)`.
pub fn kl_diag_gaussians(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Dimension {
            op: "kl_diag_gaussians",
            detail: format!("q dim {} vs p dim {}", q.dim(), p.dim()),
        });
    }
    let mut total = 0.0;
    for i in 0..q.dim() {
        let (mq, lq) = (q.mu[i], q.log_var[i]);
        let (mp, lp) = (p.mu[i], p.log_var[i]);
        total += 0.5 * ((lq - lp).exp() + (mq - mp) * (mq - mp) * (-lp).exp() - 1.0 + lp - lq);
    }
    Ok(total)
}

/// Positions relative to `anchor`, flattened time-major `[x0,y0,x1,y1,..]`.
pub fn flatten_relative(traj: &Trajectory, anchor: Vec2) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * traj.len());
    for p in traj.points() {
        out.push(p.x - anchor.x);
        out.push(p.y - anchor.y);
    }
    out
}

/// Inverse of [`flatten_relative`]: rebuilds an absolute trajectory.
pub fn unflatten_absolute(coords: &[f64], anchor: Vec2, dt: f64) -> Result<Trajectory> {
    if !coords.len().is_multiple_of(2) || coords.is_empty() {
        return Err(Error::Dimension {
            op: "unflatten_absolute",
            detail: format!("need a non-empty even-length coordinate list, got {}", coords.len()),
        });
    }
    let points = coords
        .chunks_exact(2)
        .map(|c| Vec2::new(c[0] + anchor.x, c[1] + anchor.y))
        .collect();
    Trajectory::new(dt, points)
}

/// Network layout shared by the three MLPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeArch {
    pub past_steps: usize,
    pub future_steps: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for CvaeArch {
    fn default() -> Self {
        CvaeArch { past_steps: 10, future_steps: 50, latent_dim: 2, hidden: 64, layers: 3 }
    }
}

impl CvaeArch {
    pub fn validate(&self) -> Result<()> {
        if self.past_steps < 2
            || self.future_steps == 0
            || self.latent_dim == 0
            || self.hidden == 0
            || self.layers == 0
        {
            return Err(Error::Domain(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }

    /// Width of the flattened past input.
    pub fn x_dim(&self) -> usize {
        2 * self.past_steps
    }

    /// Width of the flattened future output.
    pub fn y_dim(&self) -> usize {
        2 * self.future_steps
    }

    fn prior_spec(&self) -> MlpSpec {
        MlpSpec::new(self.x_dim(), self.hidden, 2 * self.latent_dim, self.layers)
    }

    fn posterior_spec(&self) -> MlpSpec {
        MlpSpec::new(self.x_dim() + self.y_dim(), self.hidden, 2 * self.latent_dim, self.layers)
    }

    fn decoder_spec(&self) -> MlpSpec {
        MlpSpec::new(self.x_dim() + self.latent_dim, self.hidden, self.y_dim(), self.layers)
    }
}

/// The trained forecaster: prior and posterior encoders plus the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct CvaeModel {
    pub arch: CvaeArch,
    /// Seconds per trajectory step, needed to rebuild forecasts.
    pub dt: f64,
    pub prior_net: Mlp,
    pub posterior_net: Mlp,
    pub decoder: Mlp,
}

/// Tape handles for all three networks.
pub(crate) struct CvaeVars {
    pub prior: MlpVars,
    pub posterior: MlpVars,
    pub decoder: MlpVars,
}

/// Mean/log-variance pair as tape nodes, shaped [batch, latent].
pub(crate) struct GaussianVars {
    pub mu: Var,
    pub log_var: Var,
}

impl CvaeModel {
    pub fn init(arch: CvaeArch, dt: f64, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Domain(format!("dt must be positive, got {dt}")));
        }
        Ok(CvaeModel {
            arch,
            dt,
            prior_net: Mlp::init(arch.prior_spec(), rng)?,
            posterior_net: Mlp::init(arch.posterior_spec(), rng)?,
            decoder: Mlp::init(arch.decoder_spec(), rng)?,
        })
    }

    /// Gaussian over latents inferred from the flattened past alone.
    pub fn encode_prior(&self, x: &[f64]) -> Result<DiagonalGaussian> {
        self.check_dim("encode_prior x", x.len(), self.arch.x_dim())?;
        let out = self.prior_net.forward(&Tensor::row_vector(x))?;
        self.split_plain(&out)
    }

    /// Gaussian over latents inferred from past and ground-truth future.
    pub fn encode_posterior(&self, x: &[f64], y: &[f64]) -> Result<DiagonalGaussian> {
        self.check_dim("encode_posterior x", x.len(), self.arch.x_dim())?;
        self.check_dim("encode_posterior y", y.len(), self.arch.y_dim())?;
        let joined: Vec<f64> = x.iter().chain(y.iter()).copied().collect();
        let out = self.posterior_net.forward(&Tensor::row_vector(&joined))?;
        self.split_plain(&out)
    }

    /// Decodes one latent into a flattened relative future.
    pub fn decode(&self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim("decode x", x.len(), self.arch.x_dim())?;
        self.check_dim("decode z", z.len(), self.arch.latent_dim)?;
        let joined: Vec<f64> = x.iter().chain(z.iter()).copied().collect();
        let out = self.decoder.forward(&Tensor::row_vector(&joined))?;
        Ok(out.data().to_vec())
    }

    /// Decodes a batch of latents for one shared past: `zs` is [k, latent],
    /// the result is [k, y_dim].
    pub fn decode_batch(&self, x: &[f64], zs: &Tensor) -> Result<Tensor> {
        self.check_dim("decode_batch x", x.len(), self.arch.x_dim())?;
        self.check_dim("decode_batch z", zs.cols(), self.arch.latent_dim)?;
        let k = zs.rows();
        let mut joined = Tensor::zeros(k, self.arch.x_dim() + self.arch.latent_dim);
        for r in 0..k {
            let row = joined.row_mut(r);
            row[..x.len()].copy_from_slice(x);
            row[x.len()..].copy_from_slice(zs.row(r));
        }
        self.decoder.forward(&joined)
    }

    /// Decodes one latent into an absolute trajectory anchored at the end of
    /// `past`.
    pub fn decode_forecast(&self, past: &Trajectory, z: &[f64]) -> Result<Trajectory> {
        self.check_past(past)?;
        let anchor = past.final_position();
        let coords = self.decode(&flatten_relative(past, anchor), z)?;
        unflatten_absolute(&coords, anchor, self.dt)
    }

    /// Draws `k` forecasts from the prior; noise is consumed row by row.
    pub fn sample_forecasts(
        &self,
        past: &Trajectory,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<Trajectory>> {
        if k == 0 {
            return Err(Error::Usage("sample count must be at least 1".into()));
        }
        self.check_past(past)?;
        let anchor = past.final_position();
        let x = flatten_relative(past, anchor);
        let prior = self.encode_prior(&x)?;
        let l = self.arch.latent_dim;
        let mut zs = Tensor::zeros(k, l);
        for r in 0..k {
            let noise: Vec<f64> = (0..l).map(|_| rng.sample(StandardNormal)).collect();
            zs.row_mut(r).copy_from_slice(&prior.reparameterize(&noise)?);
        }
        let ys = self.decode_batch(&x, &zs)?;
        (0..k).map(|r| unflatten_absolute(ys.row(r), anchor, self.dt)).collect()
    }

    /// SHA-256 over every parameter bit in canonical order; changes iff any
    /// weight changes.
    pub fn params_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for t in self.flat_params_ref() {
            for &v in t.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }

    /// Parameter tensors in canonical order: prior, posterior, decoder, each
    /// interleaving weight and bias per layer.
    pub fn flat_params_ref(&self) -> Vec<&Tensor> {
        let mut out = self.prior_net.params();
        out.extend(self.posterior_net.params());
        out.extend(self.decoder.params());
        out
    }

    pub fn flat_params(&self) -> Vec<Tensor> {
        self.flat_params_ref().into_iter().cloned().collect()
    }

    pub fn flat_param_names(&self) -> Vec<String> {
        let mut names = self.prior_net.param_names("prior");
        names.extend(self.posterior_net.param_names("posterior"));
        names.extend(self.decoder.param_names("decoder"));
        names
    }

    /// Rebuilds a model from tensors in [`CvaeModel::flat_params`] order.
    pub fn from_flat(arch: CvaeArch, dt: f64, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let specs = [arch.prior_spec(), arch.posterior_spec(), arch.decoder_spec()];
        let expected: usize = specs.iter().map(|s| 2 * s.layers).sum();
        if tensors.len() != expected {
            return Err(Error::Mismatch(format!(
                "expected {expected} parameter tensors, got {}",
                tensors.len()
            )));
        }
        let mut iter = tensors.into_iter();
        let mut nets = Vec::with_capacity(3);
        for spec in specs {
            let mut weights = Vec::with_capacity(spec.layers);
            let mut biases = Vec::with_capacity(spec.layers);
            for _ in 0..spec.layers {
                weights.push(iter.next().expect("length checked"));
                biases.push(iter.next().expect("length checked"));
            }
            nets.push(Mlp::from_parts(spec, weights, biases)?);
        }
        let decoder = nets.pop().expect("three nets");
        let posterior_net = nets.pop().expect("three nets");
        let prior_net = nets.pop().expect("three nets");
        Ok(CvaeModel { arch, dt, prior_net, posterior_net, decoder })
    }

    pub(crate) fn register_trainable(&self, tape: &mut Tape) -> CvaeVars {
        CvaeVars {
            prior: self.prior_net.register_params(tape),
            posterior: self.posterior_net.register_params(tape),
            decoder: self.decoder.register_params(tape),
        }
    }

    pub(crate) fn register_frozen(&self, tape: &mut Tape) -> CvaeVars {
        CvaeVars {
            prior: self.prior_net.register_frozen(tape),
            posterior: self.posterior_net.register_frozen(tape),
            decoder: self.decoder.register_frozen(tape),
        }
    }

    fn check_dim(&self, what: &'static str, got: usize, want: usize) -> Result<()> {
        if got != want {
            return Err(Error::Usage(format!("{what} has dim {got}, expected {want}")));
        }
        Ok(())
    }

    fn check_past(&self, past: &Trajectory) -> Result<()> {
        if past.len() != self.arch.past_steps {
            return Err(Error::Usage(format!(
                "past has {} points, model expects {}",
                past.len(),
                self.arch.past_steps
            )));
        }
        if (past.dt() - self.dt).abs() > 1e-12 {
            return Err(Error::Usage(format!(
                "past dt {} does not match model dt {}",
                past.dt(),
                self.dt
            )));
        }
        Ok(())
    }

    fn split_plain(&self, out: &Tensor) -> Result<DiagonalGaussian> {
        let l = self.arch.latent_dim;
        let row = out.row(0);
        let mu = row[..l].to_vec();
        let log_var: Vec<f64> =
            row[l..].iter().map(|v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)).collect();
        DiagonalGaussian::new(mu, log_var)
    }
}

/// Splits an encoder output [batch, 2*latent] into clamped Gaussian nodes.
pub(crate) fn split_gaussian_graph(tape: &mut Tape, out: Var, latent: usize) -> Result<GaussianVars> {
    let mu_idx: Vec<usize> = (0..latent).collect();
    let lv_idx: Vec<usize> = (latent..2 * latent).collect();
    let mu = tape.gather_cols(out, &mu_idx)?;
    let lv_raw = tape.gather_cols(out, &lv_idx)?;
    let log_var = tape.clamp(lv_raw, -LOG_VAR_CLAMP, LOG_VAR_CLAMP);
    Ok(GaussianVars { mu, log_var })
}

/// `z = mu + exp(log_var / 2) * noise` as tape nodes.
pub(crate) fn reparameterize_graph(tape: &mut Tape, g: &GaussianVars, noise: Var) -> Result<Var> {
    let half_lv = tape.mul_scalar(g.log_var, 0.5);
    let std = tape.exp(half_lv);
    let scaled = tape.mul(std, noise)?;
    tape.add(g.mu, scaled)
}

/// Sum over batch and latent of `KL(q || p)`; caller divides by batch size.
pub(crate) fn kl_graph(tape: &mut Tape, q: &GaussianVars, p: &GaussianVars) -> Result<Var> {
    let lv_diff = tape.sub(q.log_var, p.log_var)?;
    let var_ratio = tape.exp(lv_diff);
    let dmu = tape.sub(q.mu, p.mu)?;
    let dmu_sq = tape.mul(dmu, dmu)?;
    let neg_lp = tape.mul_scalar(p.log_var, -1.0);
    let inv_var_p = tape.exp(neg_lp);
    let maha = tape.mul(dmu_sq, inv_var_p)?;
    let a = tape.add(var_ratio, maha)?;
    let b = tape.sub(a, lv_diff)?;
    let c = tape.add_scalar(b, -1.0);
    let total = tape.sum_all(c);
    Ok(tape.mul_scalar(total, 0.5))
}

/// Values of the three ELBO components at one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Builds the batched ELBO graph; returns the loss node and the component
/// values. `xs` [b, x_dim], `ys` [b, y_dim], `noise` [b, latent].
fn elbo_graph(
    tape: &mut Tape,
    model: &CvaeModel,
    vars: &CvaeVars,
    xs: &Tensor,
    ys: &Tensor,
    noise: &Tensor,
    beta: f64,
) -> Result<(Var, ElboTerms)> {
    let b = xs.rows();
    if ys.rows() != b || noise.rows() != b {
        return Err(Error::Dimension {
            op: "elbo",
            detail: format!("batch sizes differ: x {b}, y {}, noise {}", ys.rows(), noise.rows()),
        });
    }
    let xv = tape.constant(xs.clone());
    let yv = tape.constant(ys.clone());
    let nv = tape.constant(noise.clone());

    let prior_out = model.prior_net.forward_on(tape, &vars.prior, xv)?;
    let prior = split_gaussian_graph(tape, prior_out, model.arch.latent_dim)?;
    let xy = tape.concat_cols(xv, yv)?;
    let post_out = model.posterior_net.forward_on(tape, &vars.posterior, xy)?;
    let posterior = split_gaussian_graph(tape, post_out, model.arch.latent_dim)?;

    let z = reparameterize_graph(tape, &posterior, nv)?;
    let xz = tape.concat_cols(xv, z)?;
    let y_hat = model.decoder.forward_on(tape, &vars.decoder, xz)?;

    let diff = tape.sub(y_hat, yv)?;
    let sq = tape.mul(diff, diff)?;
    let sq_sum = tape.sum_all(sq);
    let recon = tape.mul_scalar(sq_sum, 0.5 / b as f64);

    let kl_sum = kl_graph(tape, &posterior, &prior)?;
    let kl = tape.mul_scalar(kl_sum, 1.0 / b as f64);

    let weighted_kl = tape.mul_scalar(kl, beta);
    let loss = tape.add(recon, weighted_kl)?;
    let terms = ElboTerms {
        loss: tape.value(loss).item()?,
        recon: tape.value(recon).item()?,
        kl: tape.value(kl).item()?,
    };
    Ok((loss, terms))
}

/// Evaluates the ELBO components on one batch with fixed noise.
pub fn elbo_loss(
    model: &CvaeModel,
    xs: &Tensor,
    ys: &Tensor,
    noise: &Tensor,
    beta: f64,
) -> Result<ElboTerms> {
    let mut tape = Tape::new();
    let vars = model.register_frozen(&mut tape);
    let (_, terms) = elbo_graph(&mut tape, model, &vars, xs, ys, noise, beta)?;
    if !terms.loss.is_finite() {
        return Err(Error::Training {
            param: "elbo".into(),
            detail: format!("non-finite loss {}", terms.loss),
        });
    }
    Ok(terms)
}

/// Evaluates the ELBO on one batch with fixed noise and returns the loss
/// gradient for every trainable tensor, in [`CvaeModel::flat_params`] order.
pub fn elbo_grads(
    model: &CvaeModel,
    xs: &Tensor,
    ys: &Tensor,
    noise: &Tensor,
    beta: f64,
) -> Result<(ElboTerms, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.register_trainable(&mut tape);
    let (loss, terms) = elbo_graph(&mut tape, model, &vars, xs, ys, noise, beta)?;
    let mut grads = tape.backward(loss)?;
    let mut out = model.prior_net.collect_grads(&vars.prior, &mut grads);
    out.extend(model.posterior_net.collect_grads(&vars.posterior, &mut grads));
    out.extend(model.decoder.collect_grads(&vars.decoder, &mut grads));
    Ok((terms, out))
}

/// Flattened training matrices: X [n, x_dim], Y [n, y_dim], and the anchor
/// (last observed pedestrian position) per scene.
pub fn dataset_matrices(dataset: &Dataset, arch: &CvaeArch) -> Result<(Tensor, Tensor, Vec<Vec2>)> {
    if dataset.config.past_steps != arch.past_steps
        || dataset.config.future_steps != arch.future_steps
    {
        return Err(Error::Mismatch(format!(
            "dataset windows ({}, {}) do not match architecture ({}, {})",
            dataset.config.past_steps,
            dataset.config.future_steps,
            arch.past_steps,
            arch.future_steps
        )));
    }
    let n = dataset.scenes.len();
    if n == 0 {
        return Err(Error::Usage("dataset is empty".into()));
    }
    let mut xs = Tensor::zeros(n, arch.x_dim());
    let mut ys = Tensor::zeros(n, arch.y_dim());
    let mut anchors = Vec::with_capacity(n);
    for (i, scene) in dataset.scenes.iter().enumerate() {
        let anchor = scene.ped_past.final_position();
        xs.row_mut(i).copy_from_slice(&flatten_relative(&scene.ped_past, anchor));
        ys.row_mut(i).copy_from_slice(&flatten_relative(&scene.ped_future, anchor));
        anchors.push(anchor);
    }
    Ok((xs, ys, anchors))
}

/// Training schedule for the forecaster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Final KL weight.
    pub beta: f64,
    /// Fraction of total steps over which beta ramps linearly from zero.
    pub warmup_frac: f64,
}

impl Default for CvaeTrainConfig {
    fn default() -> Self {
        CvaeTrainConfig {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            beta: 1.0,
            warmup_frac: 0.1,
        }
    }
}

impl CvaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Domain("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Domain(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Domain(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Domain(format!(
                "warmup_frac must lie in [0, 1], got {}",
                self.warmup_frac
            )));
        }
        Ok(())
    }
}

/// Per-epoch mean training losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainingCurveRow {
    pub epoch: usize,
    pub loss: f64,
    pub kl: f64,
    pub recon: f64,
}

/// Trains a forecaster from scratch on `dataset`.
///
/// Deterministic in `seed`: stream 0 initializes weights, stream 1 drives
/// shuffles and reparameterization noise, single-threaded throughout.
pub fn train_cvae(
    dataset: &Dataset,
    arch: CvaeArch,
    config: &CvaeTrainConfig,
    seed: u64,
) -> Result<(CvaeModel, Vec<TrainingCurveRow>)> {
    config.validate()?;
    let (xs, ys, _) = dataset_matrices(dataset, &arch)?;
    let n = xs.rows();
    let mut init_rng = stream_rng(seed, 0);
    let mut model = CvaeModel::init(arch, dataset.config.dt, &mut init_rng)?;
    let mut loop_rng = stream_rng(seed, 1);

    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let warmup_steps = ((total_steps as f64) * config.warmup_frac).round() as usize;

    let names = model.flat_param_names();
    let mut optim = OptimState::new(AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    });

    let mut indices: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        use rand::seq::SliceRandom;
        indices.shuffle(&mut loop_rng);
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        for chunk in indices.chunks(config.batch_size) {
            let b = chunk.len();
            let mut xb = Tensor::zeros(b, arch.x_dim());
            let mut yb = Tensor::zeros(b, arch.y_dim());
            for (r, &i) in chunk.iter().enumerate() {
                xb.row_mut(r).copy_from_slice(xs.row(i));
                yb.row_mut(r).copy_from_slice(ys.row(i));
            }
            let mut noise = Tensor::zeros(b, arch.latent_dim);
            for v in noise.data_mut() {
                *v = loop_rng.sample(StandardNormal);
            }
            let beta = if warmup_steps == 0 {
                config.beta
            } else {
                config.beta * (((step + 1) as f64) / warmup_steps as f64).min(1.0)
            };

            let mut tape = Tape::new();
            let vars = model.register_trainable(&mut tape);
            let (loss, terms) = elbo_graph(&mut tape, &model, &vars, &xb, &yb, &noise, beta)?;
            if !terms.loss.is_finite() {
                return Err(Error::Training {
                    param: "elbo".into(),
                    detail: format!("loss diverged to {} at epoch {epoch}", terms.loss),
                });
            }
            let mut grads = tape.backward(loss)?;
            let mut grad_list = model.prior_net.collect_grads(&vars.prior, &mut grads);
            grad_list.extend(model.posterior_net.collect_grads(&vars.posterior, &mut grads));
            grad_list.extend(model.decoder.collect_grads(&vars.decoder, &mut grads));

            let mut params: Vec<&mut Tensor> = model.prior_net.params_mut();
            params.extend(model.posterior_net.params_mut());
            params.extend(model.decoder.params_mut());
            adam_step(&mut optim, &mut params, &grad_list, &names)?;

            let w = b as f64 / n as f64;
            sums.0 += terms.loss * w;
            sums.1 += terms.kl * w;
            sums.2 += terms.recon * w;
            step += 1;
        }
        curve.push(TrainingCurveRow { epoch, loss: sums.0, kl: sums.1, recon: sums.2 });
    }
    Ok((model, curve))
}

const CVAE_CHECKPOINT_KIND: &str = "cvae";

#[derive(Serialize, Deserialize)]
struct CvaeMeta {
    arch: CvaeArch,
    dt: f64,
}

/// Writes the model to the shared checkpoint format.
pub fn save_cvae(path: &Path, model: &CvaeModel) -> Result<()> {
    let names = model.flat_param_names();
    let params = model.flat_params_ref();
    let arrays: Vec<(String, &Tensor)> = names.into_iter().zip(params).collect();
    save_checkpoint(
        path,
        CVAE_CHECKPOINT_KIND,
        &CvaeMeta { arch: model.arch, dt: model.dt },
        &arrays,
    )
}

/// Loads a model written by [`save_cvae`], validating kind and shapes.
pub fn load_cvae(path: &Path) -> Result<CvaeModel> {
    let mut ckpt = load_checkpoint(path)?;
    if ckpt.kind != CVAE_CHECKPOINT_KIND {
        return Err(Error::Mismatch(format!(
            "checkpoint kind {:?} is not a forecaster model",
            ckpt.kind
        )));
    }
    let meta: CvaeMeta = ckpt.meta_as()?;
    meta.arch.validate()?;
    let probe = CvaeModel::from_flat(
        meta.arch,
        meta.dt,
        cvae_tensor_shapes(&meta.arch)
            .into_iter()
            .map(|(r, c)| Tensor::zeros(r, c))
            .collect(),
    )?;
    let mut tensors = Vec::new();
    for (name, (rows, cols)) in probe.flat_param_names().into_iter().zip(cvae_tensor_shapes(&meta.arch)) {
        tensors.push(ckpt.take_array(&name, rows, cols)?);
    }
    CvaeModel::from_flat(meta.arch, meta.dt, tensors)
}

/// Expected (rows, cols) of every parameter tensor in canonical order.
fn cvae_tensor_shapes(arch: &CvaeArch) -> Vec<(usize, usize)> {
    let mut shapes = Vec::new();
    for spec in [arch.prior_spec(), arch.posterior_spec(), arch.decoder_spec()] {
        for (fan_in, fan_out) in spec.layer_dims() {
            shapes.push((fan_out, fan_in));
            shapes.push((1, fan_out));
        }
    }
    shapes
}
