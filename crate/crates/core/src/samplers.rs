//! Reverse-time samplers over padded batches of adjacency matrices.
//!
//! States are `(B, n, n)` arrays whose strict lower triangle carries the free
//! variables, mirrored to the upper triangle, with a zero diagonal. Pairs touching
//! a masked node stay at zero. Every score call sees a freshly quantized `A_bar`.
//!
//! The probability-flow ODE is integrated in `u = 1 - t`, so solvers always step forward.

use std::time::Instant;

use log::debug;
use ndarray::{Array2, Array3, Zip};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{GraphSample, NodeCountDistribution};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::pgsn::Pgsn;
use crate::sde::VpSdeSchedule;

/// Smallest step the adaptive solver accepts before giving up.
pub const MIN_ADAPTIVE_STEP: f64 = 1e-6;

/// A score model evaluated on a padded batch at a shared time.
pub trait ScoreFn {
    fn score(&self, a: &Array3<f64>, a_bar: &Array3<f64>, mask: &Array2<bool>, t: f64) -> Result<Array3<f64>>;
}

impl<F> ScoreFn for F
where
    F: Fn(&Array3<f64>, &Array3<f64>, &Array2<bool>, f64) -> Result<Array3<f64>>,
{
    fn score(&self, a: &Array3<f64>, a_bar: &Array3<f64>, mask: &Array2<bool>, t: f64) -> Result<Array3<f64>> {
        self(a, a_bar, mask, t)
    }
}

/// Trained network as a score function.
pub struct NetScore<'a> {
    pub net: &'a Pgsn,
    pub sde: VpSdeSchedule,
}

impl ScoreFn for NetScore<'_> {
    fn score(&self, a: &Array3<f64>, a_bar: &Array3<f64>, mask: &Array2<bool>, t: f64) -> Result<Array3<f64>> {
        let times = vec![t; a.dim().0];
        self.net.score_batch(a, a_bar, mask, &times, &self.sde)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMethod {
    Em,
    Pc,
    OdeFixed,
    OdeAdaptive,
}

impl std::str::FromStr for SamplerMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "em" => Ok(Self::Em),
            "pc" => Ok(Self::Pc),
            "ode_fixed" => Ok(Self::OdeFixed),
            "ode_adaptive" => Ok(Self::OdeAdaptive),
            _ => Err(Error::Config(format!(
                "unknown sampler `{s}` (expected em, pc, ode_fixed or ode_adaptive)"
            ))),
        }
    }
}

impl std::fmt::Display for SamplerMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Em => "em",
            Self::Pc => "pc",
            Self::OdeFixed => "ode_fixed",
            Self::OdeAdaptive => "ode_adaptive",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub method: SamplerMethod,
    pub num_steps: usize,
    pub corrector_steps_per_iter: usize,
    pub snr_r: f64,
    pub ode_step_size: f64,
    pub ode_error_tol: f64,
    pub t_end: f64,
    pub seed: u64,
    /// Graphs integrated together; each batch is padded to its own largest graph.
    pub batch_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: SamplerMethod::Pc,
            num_steps: 1000,
            corrector_steps_per_iter: 1,
            snr_r: 0.16,
            ode_step_size: 0.18,
            ode_error_tol: 1e-2,
            t_end: 1e-5,
            seed: 0,
            batch_size: 16,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be at least 1".into()));
        }
        if !(self.snr_r > 0.0) {
            return Err(Error::Config("snr_r must be positive".into()));
        }
        if !(self.ode_step_size > 0.0 && self.ode_step_size <= 1.0) {
            return Err(Error::Config(format!("ode_step_size {} outside (0, 1]", self.ode_step_size)));
        }
        if !(self.ode_error_tol > 0.0) {
            return Err(Error::Config("ode_error_tol must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.t_end) {
            return Err(Error::Config(format!("t_end {} outside [0, 1)", self.t_end)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

fn live(mask: &Array2<bool>, k: usize, i: usize, j: usize) -> bool {
    i != j && mask[[k, i]] && mask[[k, j]]
}

/// Symmetric standard-normal noise on live pairs.
pub fn batch_noise(mask: &Array2<bool>, rng: &mut impl Rng) -> Array3<f64> {
    let (b, n) = mask.dim();
    let mut z = Array3::zeros((b, n, n));
    for k in 0..b {
        for i in 0..n {
            for j in 0..i {
                if live(mask, k, i, j) {
                    let v: f64 = rng.sample(StandardNormal);
                    z[[k, i, j]] = v;
                    z[[k, j, i]] = v;
                }
            }
        }
    }
    z
}

/// Batched quantization `(A + 1) / 2 > 0.5` on live pairs.
pub fn quantize_batch(a: &Array3<f64>, mask: &Array2<bool>) -> Array3<f64> {
    let (b, n, _) = a.dim();
    let mut out = Array3::zeros((b, n, n));
    for k in 0..b {
        for i in 0..n {
            for j in 0..n {
                if live(mask, k, i, j) && (a[[k, i, j]] + 1.0) * 0.5 > 0.5 {
                    out[[k, i, j]] = 1.0;
                }
            }
        }
    }
    out
}

/// Prior draw at `t = 1`.
pub fn prior_sample(mask: &Array2<bool>, rng: &mut impl Rng) -> Array3<f64> {
    batch_noise(mask, rng)
}

fn check_state(a: &Array3<f64>, what: impl FnOnce() -> String) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

/// Score evaluation with quantized side channel and call counting.
struct Counted<'a, S: ScoreFn + ?Sized> {
    inner: &'a S,
    nfe: usize,
}

impl<S: ScoreFn + ?Sized> Counted<'_, S> {
    fn eval(&mut self, a: &Array3<f64>, mask: &Array2<bool>, t: f64) -> Result<Array3<f64>> {
        self.nfe += 1;
        let bar = quantize_batch(a, mask);
        let mut s = self.inner.score(a, &bar, mask, t)?;
        if s.dim() != a.dim() {
            return Err(Error::Contract(format!(
                "score shape {:?} does not match state {:?}",
                s.dim(),
                a.dim()
            )));
        }
        let (b, n, _) = a.dim();
        for k in 0..b {
            for i in 0..n {
                for j in 0..n {
                    if !live(mask, k, i, j) {
                        s[[k, i, j]] = 0.0;
                    }
                }
            }
        }
        Ok(s)
    }
}

/// One Euler–Maruyama step of the reverse SDE from `t` to `t - dt`, given the score at `t`.
pub fn em_update(
    a: &mut Array3<f64>,
    score: &Array3<f64>,
    mask: &Array2<bool>,
    t: f64,
    dt: f64,
    sde: &VpSdeSchedule,
    rng: &mut impl Rng,
) -> Result<()> {
    if !(dt >= 0.0) {
        return Err(Error::Domain {
            what: "dt",
            value: dt,
            domain: "[0, inf)",
        });
    }
    let beta = sde.beta_at(t)?;
    let z = batch_noise(mask, rng);
    let g = (beta * dt).sqrt();
    Zip::from(&mut *a).and(score).and(&z).for_each(|x, &s, &z| {
        *x += (0.5 * beta * *x + beta * s) * dt + g * z;
    });
    Ok(())
}

/// Scores `a` at `t` and applies [`em_update`].
pub fn em_step<S: ScoreFn + ?Sized>(
    a: &mut Array3<f64>,
    mask: &Array2<bool>,
    t: f64,
    dt: f64,
    score_fn: &S,
    sde: &VpSdeSchedule,
    rng: &mut impl Rng,
) -> Result<()> {
    let s = Counted { inner: score_fn, nfe: 0 }.eval(a, mask, t)?;
    em_update(a, &s, mask, t, dt, sde, rng)
}

/// Langevin corrector at fixed `t`; returns the number of skipped per-graph updates (zero score).
///
/// The step size uses noise and score norms averaged over the batch's graphs.
pub fn langevin_correct<S: ScoreFn + ?Sized>(
    a: &mut Array3<f64>,
    mask: &Array2<bool>,
    t: f64,
    score_fn: &S,
    snr_r: f64,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<usize> {
    let mut counted = Counted { inner: score_fn, nfe: 0 };
    langevin_inner(a, mask, t, &mut counted, snr_r, steps, rng)
}

fn langevin_inner<S: ScoreFn + ?Sized>(
    a: &mut Array3<f64>,
    mask: &Array2<bool>,
    t: f64,
    score_fn: &mut Counted<'_, S>,
    snr_r: f64,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<usize> {
    let b = a.dim().0;
    let live_graphs: Vec<usize> = (0..b).filter(|&k| mask.row(k).iter().filter(|&&m| m).count() > 1).collect();
    let mut skipped = 0;
    for _ in 0..steps {
        let z = batch_noise(mask, rng);
        let s = score_fn.eval(a, mask, t)?;
        // Norms are per graph, averaged over the batch.
        let mean_norm = |x: &Array3<f64>| {
            live_graphs
                .iter()
                .map(|&k| x.index_axis(ndarray::Axis(0), k).iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum::<f64>()
                / live_graphs.len().max(1) as f64
        };
        let (z_norm, s_norm) = (mean_norm(&z), mean_norm(&s));
        if s_norm == 0.0 {
            skipped += live_graphs.len();
            continue;
        }
        let eps = 2.0 * (snr_r * z_norm / s_norm).powi(2);
        let noise_scale = (2.0 * eps).sqrt();
        Zip::from(&mut *a).and(&s).and(&z).for_each(|x, &s, &z| {
            *x += eps * s + noise_scale * z;
        });
    }
    if skipped > 0 {
        debug!("langevin corrector at t = {t}: {skipped} zero-score updates skipped");
    }
    Ok(skipped)
}

/// Continuous terminal state and score-call count of one batched run.
#[derive(Debug, Clone)]
pub struct BatchRun {
    pub a: Array3<f64>,
    pub nfe: usize,
}

/// Euler–Maruyama (`corrector_steps = 0`) or predictor–corrector from `a` at `t = 1`.
pub fn reverse_sde<S: ScoreFn + ?Sized>(
    score_fn: &S,
    mut a: Array3<f64>,
    mask: &Array2<bool>,
    num_steps: usize,
    corrector_steps: usize,
    snr_r: f64,
    t_end: f64,
    sde: &VpSdeSchedule,
    rng: &mut impl Rng,
) -> Result<BatchRun> {
    if num_steps == 0 {
        return Err(Error::Config("num_steps must be at least 1".into()));
    }
    let mut counted = Counted { inner: score_fn, nfe: 0 };
    let dt = (1.0 - t_end) / num_steps as f64;
    for k in 0..num_steps {
        let t = 1.0 - k as f64 * dt;
        let s = counted.eval(&a, mask, t)?;
        em_update(&mut a, &s, mask, t, dt, sde, rng)?;
        check_state(&a, || format!("reverse SDE state at step {k} (t = {t})"))?;
        if corrector_steps > 0 {
            let t_next = (1.0 - (k + 1) as f64 * dt).max(t_end);
            langevin_inner(&mut a, mask, t_next, &mut counted, snr_r, corrector_steps, rng)?;
            check_state(&a, || format!("corrector state at step {k} (t = {t_next})"))?;
        }
    }
    Ok(BatchRun { a, nfe: counted.nfe })
}

/// Right-hand side in `u = 1 - t`: `dA/du = 1/2 beta(t) (A + s)`.
fn flow_rhs<S: ScoreFn + ?Sized>(
    counted: &mut Counted<'_, S>,
    a: &Array3<f64>,
    mask: &Array2<bool>,
    u: f64,
    sde: &VpSdeSchedule,
) -> Result<Array3<f64>> {
    let t = (1.0 - u).clamp(0.0, 1.0);
    let s = counted.eval(a, mask, t)?;
    let beta = sde.beta_at(t)?;
    let (b, n, _) = a.dim();
    let mut out = Array3::zeros((b, n, n));
    for k in 0..b {
        for i in 0..n {
            for j in 0..n {
                if live(mask, k, i, j) {
                    out[[k, i, j]] = 0.5 * beta * (a[[k, i, j]] + s[[k, i, j]]);
                }
            }
        }
    }
    Ok(out)
}

/// Number of fixed steps covering `[t_end, 1]`; the last one is truncated.
pub fn fixed_step_count(step_size: f64, t_end: f64) -> usize {
    let span = 1.0 - t_end;
    ((span / step_size) - 1e-9).ceil().max(1.0) as usize
}

fn axpy(y: &Array3<f64>, terms: &[(f64, &Array3<f64>)]) -> Array3<f64> {
    let mut out = y.clone();
    for (c, k) in terms {
        if *c != 0.0 {
            out.scaled_add(*c, k);
        }
    }
    out
}

/// Classical RK4 on the probability-flow ODE from `t = 1` to `t_end`.
pub fn ode_fixed<S: ScoreFn + ?Sized>(
    score_fn: &S,
    mut a: Array3<f64>,
    mask: &Array2<bool>,
    step_size: f64,
    t_end: f64,
    sde: &VpSdeSchedule,
) -> Result<BatchRun> {
    if !(step_size > 0.0) {
        return Err(Error::Domain {
            what: "ode_step_size",
            value: step_size,
            domain: "(0, 1]",
        });
    }
    let mut counted = Counted { inner: score_fn, nfe: 0 };
    let span = 1.0 - t_end;
    let steps = fixed_step_count(step_size, t_end);
    let mut u = 0.0;
    for k in 0..steps {
        let h = if k + 1 == steps { span - u } else { step_size.min(span - u) };
        let k1 = flow_rhs(&mut counted, &a, mask, u, sde)?;
        let k2 = flow_rhs(&mut counted, &axpy(&a, &[(0.5 * h, &k1)]), mask, u + 0.5 * h, sde)?;
        let k3 = flow_rhs(&mut counted, &axpy(&a, &[(0.5 * h, &k2)]), mask, u + 0.5 * h, sde)?;
        let k4 = flow_rhs(&mut counted, &axpy(&a, &[(h, &k3)]), mask, u + h, sde)?;
        a = axpy(&a, &[(h / 6.0, &k1), (h / 3.0, &k2), (h / 3.0, &k3), (h / 6.0, &k4)]);
        u += h;
        check_state(&a, || format!("ODE state at step {k} (t = {})", 1.0 - u))?;
    }
    Ok(BatchRun { a, nfe: counted.nfe })
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive Dormand–Prince integration of the probability-flow ODE with
/// `rtol = atol = tol` and a PI step controller.
pub fn ode_adaptive<S: ScoreFn + ?Sized>(
    score_fn: &S,
    mut a: Array3<f64>,
    mask: &Array2<bool>,
    tol: f64,
    t_end: f64,
    sde: &VpSdeSchedule,
) -> Result<BatchRun> {
    const SAFETY: f64 = 0.9;
    const MIN_FACTOR: f64 = 0.2;
    const MAX_FACTOR: f64 = 10.0;
    const ALPHA: f64 = 0.7 / 5.0;
    const BETA: f64 = 0.4 / 5.0;
    if !(tol > 0.0) {
        return Err(Error::Domain {
            what: "ode_error_tol",
            value: tol,
            domain: "(0, inf)",
        });
    }
    let mut counted = Counted { inner: score_fn, nfe: 0 };
    let span = 1.0 - t_end;
    let mut u = 0.0;
    let mut h = (0.01f64).min(span);
    let mut prev_err: f64 = 1e-4;
    let mut k1 = flow_rhs(&mut counted, &a, mask, u, sde)?;
    let (b, n, _) = a.dim();
    let live_idx: Vec<usize> = (0..b)
        .flat_map(|k| (0..n).flat_map(move |i| (0..n).map(move |j| (k, i, j))))
        .filter(|&(k, i, j)| live(mask, k, i, j))
        .map(|(k, i, j)| (k * n + i) * n + j)
        .collect();
    let live_count = live_idx.len().max(1) as f64;
    while u < span {
        if span - u < h {
            h = span - u;
        }
        let mut ks: Vec<Array3<f64>> = Vec::with_capacity(7);
        ks.push(k1.clone());
        for stage in 1..7 {
            let terms: Vec<(f64, &Array3<f64>)> =
                (0..stage).map(|j| (h * A[stage][j], &ks[j])).collect();
            let y = axpy(&a, &terms);
            ks.push(flow_rhs(&mut counted, &y, mask, u + C[stage] * h, sde)?);
        }
        let five: Vec<(f64, &Array3<f64>)> = (0..7).map(|j| (h * B5[j], &ks[j])).collect();
        let y_new = axpy(&a, &five);
        let mut sq = 0.0;
        let (y0s, y1s) = (a.as_slice().expect("standard layout"), y_new.as_slice().expect("standard layout"));
        for &idx in &live_idx {
            let e: f64 = (0..7).map(|j| h * (B5[j] - B4[j]) * ks[j].as_slice().unwrap()[idx]).sum();
            let scale = tol + tol * y0s[idx].abs().max(y1s[idx].abs());
            sq += (e / scale).powi(2);
        }
        let err = (sq / live_count).sqrt();
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("adaptive ODE error estimate at t = {}", 1.0 - u)));
        }
        if err <= 1.0 {
            u += h;
            a = y_new;
            k1 = ks.pop().expect("seven stages");
            check_state(&a, || format!("adaptive ODE state at t = {}", 1.0 - u))?;
            let factor = if err == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * err.powf(-ALPHA) * prev_err.powf(BETA)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            prev_err = err.max(1e-4);
            h *= factor;
        } else {
            h *= (SAFETY * err.powf(-1.0 / 5.0)).max(MIN_FACTOR);
        }
        if u < span && h < MIN_ADAPTIVE_STEP {
            return Err(Error::NonFinite(format!(
                "adaptive step size underflow ({h:e}) at t = {}",
                1.0 - u
            )));
        }
    }
    Ok(BatchRun { a, nfe: counted.nfe })
}

/// Draws a node count from the training pmf.
pub fn sample_node_count(dist: &NodeCountDistribution, rng: &mut impl Rng) -> Result<usize> {
    if dist.support.is_empty() {
        return Err(Error::Empty("node-count support"));
    }
    let w = WeightedIndex::new(&dist.pmf).map_err(|e| Error::Config(format!("node-count pmf: {e}")))?;
    Ok(dist.support[w.sample(rng)])
}

/// Runs the configured method on a batch starting from the prior.
pub fn sample_batch<S: ScoreFn + ?Sized>(
    score_fn: &S,
    mask: &Array2<bool>,
    cfg: &SamplerConfig,
    sde: &VpSdeSchedule,
    rng: &mut impl Rng,
) -> Result<BatchRun> {
    let a = prior_sample(mask, rng);
    match cfg.method {
        SamplerMethod::Em => reverse_sde(score_fn, a, mask, cfg.num_steps, 0, cfg.snr_r, cfg.t_end, sde, rng),
        SamplerMethod::Pc => reverse_sde(
            score_fn,
            a,
            mask,
            cfg.num_steps,
            cfg.corrector_steps_per_iter,
            cfg.snr_r,
            cfg.t_end,
            sde,
            rng,
        ),
        SamplerMethod::OdeFixed => ode_fixed(score_fn, a, mask, cfg.ode_step_size, cfg.t_end, sde),
        SamplerMethod::OdeAdaptive => ode_adaptive(score_fn, a, mask, cfg.ode_error_tol, cfg.t_end, sde),
    }
}

/// Quantizes each graph of a terminal batch, cropping to its live nodes.
pub fn batch_to_graphs(a: &Array3<f64>, sizes: &[usize]) -> Result<Vec<GraphSample>> {
    let (b, n, _) = a.dim();
    let mut mask = Array2::from_elem((b, n), false);
    for (k, &m) in sizes.iter().enumerate() {
        mask.row_mut(k).slice_mut(ndarray::s![..m]).fill(true);
    }
    let bar = quantize_batch(a, &mask);
    sizes
        .iter()
        .enumerate()
        .map(|(k, &m)| GraphSample::from_binary(&bar.slice(ndarray::s![k, ..m, ..m]).to_owned()))
        .collect()
}

/// Samples one graph of `n` nodes with the predictor–corrector sampler.
pub fn pc_sample<S: ScoreFn + ?Sized>(
    score_fn: &S,
    n: usize,
    cfg: &SamplerConfig,
    sde: &VpSdeSchedule,
    rng: &mut impl Rng,
) -> Result<(GraphSample, usize)> {
    let cfg = SamplerConfig {
        method: SamplerMethod::Pc,
        ..cfg.clone()
    };
    let mask = Array2::from_elem((1, n), true);
    let run = sample_batch(score_fn, &mask, &cfg, sde, rng)?;
    Ok((batch_to_graphs(&run.a, &[n])?.remove(0), run.nfe))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub method: SamplerMethod,
    /// Score evaluations per generated graph (per batch trajectory).
    pub nfe: usize,
    pub seed: u64,
    pub count: usize,
    pub batch_size: usize,
    pub wall_time_total: f64,
    pub wall_time_per_graph: f64,
    pub config: SamplerConfig,
}

/// Generates `count` graphs, drawing node counts from `dist`.
pub fn generate<S: ScoreFn + ?Sized>(
    score_fn: &S,
    dist: &NodeCountDistribution,
    count: usize,
    cfg: &SamplerConfig,
    sde: &VpSdeSchedule,
) -> Result<(Vec<GraphSample>, GenerationManifest)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut size_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
    let sizes: Vec<usize> = (0..count)
        .map(|_| sample_node_count(dist, &mut size_rng))
        .collect::<Result<_>>()?;
    // Batches are formed over size-sorted indices to limit padding; output keeps draw order.
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by_key(|&i| sizes[i]);
    let mut slots: Vec<Option<GraphSample>> = vec![None; count];
    let mut nfe = 0;
    for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
        let chunk: Vec<usize> = idx.iter().map(|&i| sizes[i]).collect();
        let n = chunk.iter().copied().max().unwrap_or(0);
        let mut mask = Array2::from_elem((chunk.len(), n), false);
        for (k, &m) in chunk.iter().enumerate() {
            mask.row_mut(k).slice_mut(ndarray::s![..m]).fill(true);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, bi as u64 + 1));
        let run = sample_batch(score_fn, &mask, cfg, sde, &mut rng)?;
        nfe = nfe.max(run.nfe);
        for (&i, g) in idx.iter().zip(batch_to_graphs(&run.a, &chunk)?) {
            slots[i] = Some(g);
        }
        debug!("batch {bi}: {} graphs, nfe {}", chunk.len(), run.nfe);
    }
    let graphs: Vec<GraphSample> = slots.into_iter().flatten().collect();
    let total = start.elapsed().as_secs_f64();
    let manifest = GenerationManifest {
        method: cfg.method,
        nfe,
        seed: cfg.seed,
        count,
        batch_size: cfg.batch_size,
        wall_time_total: total,
        wall_time_per_graph: if count > 0 { total / count as f64 } else { 0.0 },
        config: cfg.clone(),
    };
    Ok((graphs, manifest))
}
