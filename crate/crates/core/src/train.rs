//! Denoising score-matching training with Adam and a parameter EMA.
//!
//! The network predicts the noise `eps_hat` and the score is `-eps_hat / sigma_t`,
//! so with `lambda = sigma^2` the objective is the mean of `(eps - eps_hat)^2` over
//! unmasked lower-triangle entries, computed without dividing by `sigma`.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use log::{debug, info, warn};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{DatasetSplit, GraphSample, NodeCountDistribution};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::pgsn::{NetInput, Pgsn, PgsnConfig};
use crate::sde::{symmetric_noise, VpSdeSchedule};

/// Consecutive non-finite gradient steps tolerated before training aborts.
pub const MAX_CONSECUTIVE_SKIPS: usize = 10;
const VAL_STREAM: u64 = 0x7661_6c00;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPolicy {
    SigmaSquared,
    Uniform,
}

impl std::str::FromStr for LambdaPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma_squared" => Ok(Self::SigmaSquared),
            "uniform" => Ok(Self::Uniform),
            _ => Err(Error::Config(format!("unknown lambda policy `{s}`"))),
        }
    }
}

impl std::fmt::Display for LambdaPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SigmaSquared => "sigma_squared",
            Self::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub ema_momentum: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub t_eps: f64,
    pub lambda_policy: LambdaPolicy,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub log_interval: u64,
    pub val_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            ema_momentum: 0.9999,
            batch_size: 32,
            total_steps: 50_000,
            t_eps: 1e-5,
            lambda_policy: LambdaPolicy::SigmaSquared,
            seed: 0,
            checkpoint_interval: 5_000,
            grad_clip: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            log_interval: 100,
            val_interval: 1_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return Err(Error::Config(format!("ema_momentum {} outside (0, 1)", self.ema_momentum)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.t_eps > 0.0 && self.t_eps < 1.0) {
            return Err(Error::Config(format!("t_eps {} outside (0, 1)", self.t_eps)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// A perturbed, padded training batch with the noise that produced it.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub a: Array3<f64>,
    pub a_bar: Array3<f64>,
    pub mask: Array2<bool>,
    pub t: Vec<f64>,
    /// Symmetric standard-normal noise; zero on masked pairs.
    pub eps: Array3<f64>,
    pub a0: Array3<f64>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Pads `graphs` to their common maximum `n` and perturbs each at its own time.
    pub fn perturb(
        graphs: &[&GraphSample],
        times: &[f64],
        sde: &VpSdeSchedule,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        if times.len() != graphs.len() {
            return Err(Error::Contract("one time per graph required".into()));
        }
        let b = graphs.len();
        let n = graphs.iter().map(|g| g.n()).max().unwrap_or(0);
        let mut batch = Self {
            a: Array3::zeros((b, n, n)),
            a_bar: Array3::zeros((b, n, n)),
            mask: Array2::from_elem((b, n), false),
            t: times.to_vec(),
            eps: Array3::zeros((b, n, n)),
            a0: Array3::zeros((b, n, n)),
        };
        for (k, g) in graphs.iter().enumerate() {
            let m = g.n();
            let a0 = g.signed();
            let noise = symmetric_noise(m, rng);
            let state = sde.perturb(&a0, times[k], &noise, &vec![true; m])?;
            let window = ndarray::s![k, ..m, ..m];
            batch.a.slice_mut(window).assign(&state.a);
            batch.a_bar.slice_mut(window).assign(&state.a_bar);
            batch.eps.slice_mut(window).assign(&noise);
            batch.a0.slice_mut(window).assign(&a0);
            batch.mask.row_mut(k).slice_mut(ndarray::s![..m]).fill(true);
        }
        Ok(batch)
    }

    /// Draws `t ~ U[t_eps, 1]` per graph, then perturbs.
    pub fn sample(graphs: &[&GraphSample], t_eps: f64, sde: &VpSdeSchedule, rng: &mut impl Rng) -> Result<Self> {
        let times: Vec<f64> = graphs.iter().map(|_| rng.random_range(t_eps..=1.0)).collect();
        Self::perturb(graphs, &times, sde, rng)
    }

    /// Per-entry loss weights: `lambda(t) / (count * B_live)` on live lower-triangle pairs.
    fn weights(&self, sde: &VpSdeSchedule, policy: LambdaPolicy) -> Result<Array3<f64>> {
        let (b, n, _) = self.a.dim();
        let mut w = Array3::zeros((b, n, n));
        let counts: Vec<usize> = (0..b)
            .map(|k| {
                let m = self.mask.row(k).iter().filter(|&&x| x).count();
                m * m.saturating_sub(1) / 2
            })
            .collect();
        let live = counts.iter().filter(|&&c| c > 0).count();
        if live == 0 {
            return Err(Error::Empty("training batch without node pairs"));
        }
        for k in 0..b {
            if counts[k] == 0 {
                continue;
            }
            let sigma = sde.marginal_coeffs(self.t[k])?.sigma;
            let lambda = match policy {
                LambdaPolicy::SigmaSquared => 1.0,
                LambdaPolicy::Uniform => {
                    if sigma == 0.0 {
                        return Err(Error::Singular { t: self.t[k] });
                    }
                    1.0 / (sigma * sigma)
                }
            };
            let scale = lambda / (counts[k] * live) as f64;
            for i in 0..n {
                for j in 0..i {
                    if self.mask[[k, i]] && self.mask[[k, j]] {
                        w[[k, i, j]] = scale;
                    }
                }
            }
        }
        Ok(w)
    }
}

/// Loss of an explicit score field, `sum_g lambda_g mean_{i>j} (s - target)^2 / B` (reference path).
pub fn dsm_loss_of_scores(
    scores: &Array3<f64>,
    batch: &TrainBatch,
    sde: &VpSdeSchedule,
    policy: LambdaPolicy,
) -> Result<f64> {
    let w = batch.weights(sde, policy)?;
    let (b, n, _) = scores.dim();
    let mut total = 0.0;
    for k in 0..b {
        let sigma = sde.marginal_coeffs(batch.t[k])?.sigma;
        for i in 0..n {
            for j in 0..i {
                let wij = w[[k, i, j]];
                if wij == 0.0 {
                    continue;
                }
                // weights are in noise space: w * (sigma (s - target))^2 = lambda_g (s - target)^2 / count
                let target = -batch.eps[[k, i, j]] / sigma;
                let r = sigma * (scores[[k, i, j]] - target);
                total += wij * r * r;
            }
        }
    }
    Ok(total)
}

fn array_tensor(a: &Array3<f64>, dtype: DType) -> Result<Tensor> {
    let (b, n, m) = a.dim();
    Ok(Tensor::from_vec(a.iter().copied().collect::<Vec<_>>(), (b, n, m), &Device::Cpu)?.to_dtype(dtype)?)
}

/// DSM loss of the network on a batch, as a scalar tensor ready for backprop.
pub fn dsm_loss(net: &Pgsn, batch: &TrainBatch, sde: &VpSdeSchedule, policy: LambdaPolicy) -> Result<Tensor> {
    let input = NetInput::build(&batch.a, &batch.a_bar, &batch.mask, &batch.t, net.config(), sde, net.dtype())?;
    let eps_hat = net.predict_noise(&input)?;
    let eps = array_tensor(&batch.eps, net.dtype())?;
    let w = array_tensor(&batch.weights(sde, policy)?, net.dtype())?;
    let loss = eps_hat.sub(&eps)?.sqr()?.mul(&w)?.sum_all()?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss at t = {:?}", batch.t)));
    }
    Ok(loss)
}

/// `ema <- m * ema + (1 - m) * params`.
pub fn ema_update(ema: &mut [Tensor], params: &[Tensor], momentum: f64) -> Result<()> {
    for (e, p) in ema.iter_mut().zip(params) {
        *e = (e.affine(momentum, 0.0)? + p.affine(1.0 - momentum, 0.0)?)?.detach();
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor]) -> Result<Self> {
        let z = params
            .iter()
            .map(|p| p.zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            m: z.clone(),
            v: z,
            step: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub val_loss: Option<f64>,
    pub wall_time: f64,
}

pub struct Trainer {
    pub net: Pgsn,
    pub ema: Vec<Tensor>,
    pub adam: AdamState,
    pub step: u64,
    pub cfg: TrainConfig,
    pub sde: VpSdeSchedule,
    pub node_counts: Option<NodeCountDistribution>,
    consecutive_skips: usize,
    pub skipped_total: usize,
}

impl Trainer {
    pub fn new(pgsn: PgsnConfig, cfg: TrainConfig, sde: VpSdeSchedule) -> Result<Self> {
        Self::with_dtype(pgsn, cfg, sde, DType::F32)
    }

    pub fn with_dtype(pgsn: PgsnConfig, cfg: TrainConfig, sde: VpSdeSchedule, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        sde.validate()?;
        let net = Pgsn::new(pgsn, dtype, derive_seed(cfg.seed, 1))?;
        let params = net.params().snapshot()?;
        Ok(Self {
            adam: AdamState::zeros_like(&params)?,
            ema: params,
            net,
            step: 0,
            cfg,
            sde,
            node_counts: None,
            consecutive_skips: 0,
            skipped_total: 0,
        })
    }

    fn step_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, self.step.wrapping_add(1 << 32)))
    }

    /// Draws a batch uniformly with replacement from `train`, using the per-step stream.
    pub fn next_batch(&self, train: &[GraphSample]) -> Result<TrainBatch> {
        if train.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let mut rng = self.step_rng();
        let picks: Vec<&GraphSample> = (0..self.cfg.batch_size)
            .map(|_| &train[rng.random_range(0..train.len())])
            .collect();
        TrainBatch::sample(&picks, self.cfg.t_eps, &self.sde, &mut rng)
    }

    /// One optimizer step on a fresh batch.
    pub fn train_step(&mut self, train: &[GraphSample]) -> Result<StepOutcome> {
        let batch = self.next_batch(train)?;
        self.train_step_on(&batch)
    }

    pub fn train_step_on(&mut self, batch: &TrainBatch) -> Result<StepOutcome> {
        let loss = dsm_loss(&self.net, batch, &self.sde, self.cfg.lambda_policy)?;
        let loss_value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let grads = loss.backward()?;
        let vars = self.net.params().vars();
        let mut g = Vec::with_capacity(vars.len());
        let mut sq = 0.0;
        for v in vars {
            let gv = match grads.get(v.as_tensor()) {
                Some(gv) => gv.detach(),
                None => v.as_tensor().zeros_like()?,
            };
            sq += gv.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            g.push(gv);
        }
        let norm = sq.sqrt();
        self.step += 1;
        if !norm.is_finite() {
            self.consecutive_skips += 1;
            self.skipped_total += 1;
            warn!("step {}: non-finite gradient, skipping ({} in a row)", self.step, self.consecutive_skips);
            if self.consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                return Err(Error::TooManySkips(self.consecutive_skips));
            }
            return Ok(StepOutcome {
                step: self.step,
                loss: loss_value,
                grad_norm: norm,
                skipped: true,
            });
        }
        self.consecutive_skips = 0;
        let clip = if norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        self.adam.step += 1;
        let (b1, b2) = (self.cfg.adam_beta1, self.cfg.adam_beta2);
        let bc1 = 1.0 - b1.powi(self.adam.step as i32);
        let bc2 = 1.0 - b2.powi(self.adam.step as i32);
        let lr = self.cfg.learning_rate;
        for (k, v) in vars.iter().enumerate() {
            let gk = g[k].affine(clip, 0.0)?;
            let m = (self.adam.m[k].affine(b1, 0.0)? + gk.affine(1.0 - b1, 0.0)?)?;
            let s = (self.adam.v[k].affine(b2, 0.0)? + gk.sqr()?.affine(1.0 - b2, 0.0)?)?;
            let denom = s.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, self.cfg.adam_eps)?;
            let update = m.affine(lr / bc1, 0.0)?.div(&denom)?;
            v.set(&v.as_tensor().sub(&update)?.detach())?;
            self.adam.m[k] = m.detach();
            self.adam.v[k] = s.detach();
        }
        let params: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().detach()).collect();
        ema_update(&mut self.ema, &params, self.cfg.ema_momentum)?;
        Ok(StepOutcome {
            step: self.step,
            loss: loss_value,
            grad_norm: norm,
            skipped: false,
        })
    }

    /// Mean loss over `val` with a fixed noise stream, so values are comparable across steps.
    pub fn validation_loss(&self, val: &[GraphSample]) -> Result<f64> {
        if val.is_empty() {
            return Err(Error::Empty("validation set"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, VAL_STREAM));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in val.chunks(self.cfg.batch_size) {
            let refs: Vec<&GraphSample> = chunk.iter().collect();
            let batch = TrainBatch::sample(&refs, self.cfg.t_eps, &self.sde, &mut rng)?;
            let loss = dsm_loss(&self.net, &batch, &self.sde, self.cfg.lambda_policy)?;
            total += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
            batches += chunk.len();
        }
        Ok(total / batches as f64)
    }

    /// Network carrying the EMA parameters.
    pub fn ema_network(&self) -> Result<Pgsn> {
        self.net.with_params(&self.ema)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            pgsn: self.net.config().clone(),
            sde: self.sde,
            train: self.cfg.clone(),
            step: self.step,
            adam_step: self.adam.step,
            node_counts: self.node_counts.clone(),
            dtype: self.net.dtype(),
            names: self.net.params().names().to_vec(),
            params: self.net.params().snapshot()?,
            ema: self.ema.clone(),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut trainer = Self::with_dtype(ck.pgsn.clone(), ck.train.clone(), ck.sde, ck.dtype)?;
        if trainer.net.params().names() != ck.names.as_slice() {
            return Err(Error::Checkpoint("parameter names do not match the configuration".into()));
        }
        trainer.net.params().assign(&ck.params)?;
        trainer.ema = ck.ema.clone();
        trainer.adam = AdamState {
            m: ck.adam_m.clone(),
            v: ck.adam_v.clone(),
            step: ck.adam_step,
        };
        trainer.step = ck.step;
        trainer.node_counts = ck.node_counts.clone();
        Ok(trainer)
    }

    /// Trains until `cfg.total_steps`, logging NDJSON records to `log` and
    /// checkpointing to `checkpoint_path` when given.
    pub fn fit(
        &mut self,
        split: &DatasetSplit,
        checkpoint_path: Option<&Path>,
        log: &mut dyn Write,
    ) -> Result<Vec<LogRecord>> {
        if split.train.is_empty() {
            return Err(Error::Empty("training set"));
        }
        self.node_counts = Some(split.node_counts.clone());
        let start = Instant::now();
        let mut records = Vec::new();
        if self.step == 0 && !split.val.is_empty() {
            let val = self.validation_loss(&split.val)?;
            info!("initial validation loss {val:.5}");
            let rec = LogRecord {
                step: 0,
                loss: f64::NAN,
                val_loss: Some(val),
                wall_time: 0.0,
            };
            writeln!(log, "{}", serde_json::to_string(&rec)?)?;
            records.push(rec);
        }
        let mut running = 0.0;
        let mut running_n = 0;
        while self.step < self.cfg.total_steps {
            let out = self.train_step(&split.train)?;
            if !out.skipped {
                running += out.loss;
                running_n += 1;
            }
            let last = self.step == self.cfg.total_steps;
            let at = |interval: u64| interval > 0 && self.step % interval == 0;
            if at(self.cfg.log_interval) || at(self.cfg.val_interval) || last {
                let val_loss = if (at(self.cfg.val_interval) || last) && !split.val.is_empty() {
                    Some(self.validation_loss(&split.val)?)
                } else {
                    None
                };
                let rec = LogRecord {
                    step: self.step,
                    loss: if running_n > 0 { running / running_n as f64 } else { f64::NAN },
                    val_loss,
                    wall_time: start.elapsed().as_secs_f64(),
                };
                debug!("{rec:?}");
                writeln!(log, "{}", serde_json::to_string(&rec)?)?;
                records.push(rec);
                running = 0.0;
                running_n = 0;
            }
            if let Some(path) = checkpoint_path {
                if at(self.cfg.checkpoint_interval) || last {
                    self.checkpoint()?.save(path)?;
                }
            }
        }
        Ok(records)
    }
}
