//! Variance-preserving SDE on signed adjacency matrices.
//!
//! The forward process is `dA = -1/2 beta(t) A dt + sqrt(beta(t)) dW` on `t in [0, 1]`
//! with the linear schedule `beta(t) = beta_min + t (beta_max - beta_min)`. Data lives in
//! the signed scale: an edge is `+1`, a non-edge `-1`, and the diagonal is held at `0`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Terminal time of the diffusion.
pub const T_MAX: f64 = 1.0;

/// Linear noise schedule of the graph VP-SDE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VpSdeSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for VpSdeSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

/// Mean scale and noise standard deviation of the Gaussian perturbation kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbKernelParams {
    pub alpha: f64,
    pub sigma: f64,
}

/// A perturbed graph: the continuous state, its quantization, and the time.
#[derive(Debug, Clone)]
pub struct DiffusionState {
    pub a: Array2<f64>,
    pub a_bar: Array2<f64>,
    pub t: f64,
    pub node_mask: Vec<bool>,
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=T_MAX).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain {
            what: "t",
            value: t,
            domain: "[0, 1]",
        })
    }
}

impl VpSdeSchedule {
    pub fn new(beta_min: f64, beta_max: f64) -> Result<Self> {
        let sched = Self { beta_min, beta_max };
        sched.validate()?;
        Ok(sched)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min < self.beta_max && self.beta_max.is_finite()) {
            return Err(Error::Config(format!(
                "schedule requires 0 < beta_min < beta_max, got [{}, {}]",
                self.beta_min, self.beta_max
            )));
        }
        Ok(())
    }

    pub fn beta_at(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.beta_unchecked(t))
    }

    #[inline]
    pub(crate) fn beta_unchecked(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// `int_0^t beta(s) ds`.
    #[inline]
    pub fn integrated_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * t * t * (self.beta_max - self.beta_min)
    }

    pub fn marginal_coeffs(&self, t: f64) -> Result<PerturbKernelParams> {
        check_time(t)?;
        Ok(self.marginal_unchecked(t))
    }

    pub(crate) fn marginal_unchecked(&self, t: f64) -> PerturbKernelParams {
        let log_alpha = -0.5 * self.integrated_beta(t);
        let alpha = log_alpha.exp();
        // 1 - alpha^2 = -expm1(2 log alpha) keeps sigma accurate for small t.
        let sigma = (-(2.0 * log_alpha).exp_m1()).max(0.0).sqrt();
        PerturbKernelParams { alpha, sigma }
    }

    /// Samples `A_t ~ p_0t(. | A_0)` from a known symmetric noise matrix.
    ///
    /// Pairs touching a masked node keep their `A_0` value.
    pub fn perturb(
        &self,
        a0: &Array2<f64>,
        t: f64,
        noise: &Array2<f64>,
        node_mask: &[bool],
    ) -> Result<DiffusionState> {
        let n = check_square_symmetric(a0, "A0")?;
        if noise.dim() != (n, n) {
            return Err(Error::Contract(format!(
                "noise shape {:?} does not match A0 shape ({n}, {n})",
                noise.dim()
            )));
        }
        check_square_symmetric(noise, "noise")?;
        if node_mask.len() != n {
            return Err(Error::Contract(format!(
                "node mask has length {}, expected {n}",
                node_mask.len()
            )));
        }
        let PerturbKernelParams { alpha, sigma } = self.marginal_coeffs(t)?;
        let mut a = a0.clone();
        for i in 0..n {
            a[[i, i]] = 0.0;
            for j in 0..i {
                if node_mask[i] && node_mask[j] {
                    let v = alpha * a0[[i, j]] + sigma * noise[[i, j]];
                    a[[i, j]] = v;
                    a[[j, i]] = v;
                }
            }
        }
        let a_bar = quantize(&a, node_mask);
        Ok(DiffusionState {
            a,
            a_bar,
            t,
            node_mask: node_mask.to_vec(),
        })
    }

    /// Conditional score `-(A_t - alpha_t A_0) / sigma_t^2` of the perturbation kernel.
    pub fn score_target(&self, a_t: &Array2<f64>, a0: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        let n = check_square_symmetric(a_t, "A_t")?;
        if a0.dim() != (n, n) {
            return Err(Error::Contract("A_t and A0 differ in shape".into()));
        }
        let PerturbKernelParams { alpha, sigma } = self.marginal_coeffs(t)?;
        if sigma == 0.0 {
            return Err(Error::Singular { t });
        }
        let inv_var = 1.0 / (sigma * sigma);
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..i {
                let v = -(a_t[[i, j]] - alpha * a0[[i, j]]) * inv_var;
                out[[i, j]] = v;
                out[[j, i]] = v;
            }
        }
        Ok(out)
    }

    /// Drift of the reverse-time SDE, `-1/2 beta(t) A - beta(t) score`.
    ///
    /// The divergence term of the general reverse SDE vanishes since the diffusion
    /// coefficient `sqrt(beta(t)) I` does not depend on the state.
    pub fn reverse_drift(&self, a: &Array2<f64>, score: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        let beta = self.beta_at(t)?;
        Ok(symmetric_combine(a, score, -0.5 * beta, -beta))
    }

    /// Right-hand side of the probability-flow ODE, `-1/2 beta(t) A - 1/2 beta(t) score`.
    pub fn ode_rhs(&self, a: &Array2<f64>, score: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        let beta = self.beta_at(t)?;
        Ok(symmetric_combine(a, score, -0.5 * beta, -0.5 * beta))
    }
}

/// `x * a + y * b` evaluated on the strict lower triangle and mirrored; zero diagonal.
fn symmetric_combine(a: &Array2<f64>, b: &Array2<f64>, x: f64, y: f64) -> Array2<f64> {
    let n = a.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..i {
            let v = x * a[[i, j]] + y * b[[i, j]];
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    out
}

fn check_square_symmetric(m: &Array2<f64>, name: &str) -> Result<usize> {
    let (r, c) = m.dim();
    if r != c {
        return Err(Error::Contract(format!("{name} is {r}x{c}, expected square")));
    }
    for i in 0..r {
        for j in 0..i {
            if m[[i, j]] != m[[j, i]] {
                return Err(Error::Contract(format!(
                    "{name} is not symmetric at ({i}, {j}): {} vs {}",
                    m[[i, j]],
                    m[[j, i]]
                )));
            }
        }
    }
    Ok(r)
}

/// Thresholds a signed matrix into a binary adjacency: an edge exists where the
/// unit-rescaled value `(A + 1) / 2` exceeds `0.5`. Masked nodes carry no edges.
pub fn quantize(a: &Array2<f64>, node_mask: &[bool]) -> Array2<f64> {
    let n = a.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        if !node_mask.get(i).copied().unwrap_or(true) {
            continue;
        }
        for j in 0..i {
            if !node_mask.get(j).copied().unwrap_or(true) {
                continue;
            }
            if (a[[i, j]] + 1.0) * 0.5 > 0.5 {
                out[[i, j]] = 1.0;
                out[[j, i]] = 1.0;
            }
        }
    }
    out
}

/// Standard normal entries on the strict lower triangle, mirrored, zero diagonal.
pub fn symmetric_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    let mut z = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..i {
            let v: f64 = rng.sample(StandardNormal);
            z[[i, j]] = v;
            z[[j, i]] = v;
        }
    }
    z
}
