//! Position-enhanced graph score network.
//!
//! Node embeddings start from degree onehots, node positions from random-walk
//! landing probabilities, and edge features from the continuous adjacency values
//! concatenated with shortest-path embeddings. Each layer runs multi-head attention
//! over the thresholded edge set, where edge features bias the logits and gate the
//! values, then updates nodes, positions and edges. A per-pair MLP on `[e^L, e^0]`
//! predicts the noise `eps_hat`, and the score is `-eps_hat / sigma_t`.
//!
//! Every map is node-wise, pair-wise, or a sum over neighbors, so the output is
//! permutation equivariant.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features;
use crate::sde::VpSdeSchedule;

/// Multiplier applied to `t` before the sinusoidal embedding.
pub const TIME_SCALE: f64 = 1000.0;
const LN_EPS: f64 = 1e-5;
const MASK_BIAS: f64 = 1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgsnConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub rw_steps: usize,
    pub gamma: f64,
    pub head_mlp_layers: usize,
    /// Padded node-count bound; degree onehots have `max_nodes` buckets.
    pub max_nodes: usize,
    pub time_embed_dim: usize,
    /// Node position stream (landing probabilities).
    pub use_position: bool,
    /// Shortest-path edge embeddings.
    pub use_spd: bool,
    /// Edge feature update after message passing.
    pub update_edges: bool,
}

impl Default for PgsnConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            num_layers: 4,
            num_heads: 8,
            rw_steps: 32,
            gamma: 0.2,
            head_mlp_layers: 2,
            max_nodes: 20,
            time_embed_dim: 64,
            use_position: true,
            use_spd: true,
            update_edges: true,
        }
    }
}

impl PgsnConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("rw_steps", self.rw_steps),
            ("head_mlp_layers", self.head_mlp_layers),
            ("max_nodes", self.max_nodes),
            ("time_embed_dim", self.time_embed_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("pgsn.{name} must be positive")));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.hidden_dim % 2 != 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("hidden_dim and time_embed_dim must be even".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Named learnable tensors in a fixed order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            vars: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn push(&mut self, name: String, var: Var) {
        self.index.insert(name.clone(), self.vars.len());
        self.names.push(name);
        self.vars.push(var);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.vars[i])
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.iter().map(|v| v.elem_count()).sum()
    }

    /// Detached copies of every tensor.
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        Ok(self.vars.iter().map(|v| v.as_tensor().copy()).collect::<candle_core::Result<_>>()?)
    }

    /// Overwrites every parameter; shapes must match.
    pub fn assign(&self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors, got {}",
                self.vars.len(),
                values.len()
            )));
        }
        for (v, src) in self.vars.iter().zip(values) {
            v.set(&src.to_dtype(v.dtype())?)?;
        }
        Ok(())
    }
}

/// Deterministic parameter initializer.
struct Init {
    rng: ChaCha8Rng,
    dtype: DType,
    store: ParamStore,
}

impl Init {
    fn tensor(&self, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    fn param(&mut self, name: String, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let var = self.tensor(data, shape)?;
        self.store.push(name, var.clone());
        Ok(var)
    }

    /// Weight `(fan_in, fan_out)` drawn from `N(0, 1 / fan_in)`, zero bias.
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Linear> {
        let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(&mut self.rng)).collect();
        let w = self.param(format!("{name}.w"), w, &[fan_in, fan_out])?;
        let b = if bias {
            Some(self.param(format!("{name}.b"), vec![0.0; fan_out], &[fan_out])?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    fn zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let w = self.param(format!("{name}.w"), vec![0.0; fan_in * fan_out], &[fan_in, fan_out])?;
        let b = self.param(format!("{name}.b"), vec![0.0; fan_out], &[fan_out])?;
        Ok(Linear { w, b: Some(b) })
    }

    fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: self.param(format!("{name}.gain"), vec![1.0; dim], &[dim])?,
            bias: self.param(format!("{name}.bias"), vec![0.0; dim], &[dim])?,
        })
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: Var,
    b: Option<Var>,
}

impl Linear {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (lead, last) = dims.split_at(dims.len() - 1);
        let rows: usize = lead.iter().product();
        let y = x.reshape((rows, last[0]))?.matmul(self.w.as_tensor())?;
        let y = match &self.b {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        };
        let mut out = lead.to_vec();
        out.push(self.w.dim(1)?);
        Ok(y.reshape(out)?)
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    gain: Var,
    bias: Var,
}

impl LayerNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&var.affine(1.0, LN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gain.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

#[derive(Debug, Clone)]
struct AttentionLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    /// Projects `e` to `[c, c_bar]`.
    edge: Linear,
    pos: Option<(LayerNorm, Linear)>,
    w1: Linear,
    norm1: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    norm2: LayerNorm,
    time: Linear,
    /// `W2`; bias added once per pair.
    edge_update: Option<(Linear, Var)>,
}

/// Hidden state flowing through the layers.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub h: Tensor,
    pub p: Option<Tensor>,
    pub e: Tensor,
}

/// Constant tensors describing one padded batch of hybrid graph states.
#[derive(Debug, Clone)]
pub struct NetInput {
    /// `(B, n, n)` continuous adjacency, zero diagonal.
    pub a: Tensor,
    /// `(B, n, max_nodes)`.
    pub degree: Tensor,
    /// `(B, n, rw_steps)`.
    pub landing: Tensor,
    /// `(B, n, n, rw_steps + 1)`.
    pub spd: Tensor,
    /// `(B, n, n, 1)`, `1` on message-passing pairs.
    pub edge_mask: Tensor,
    /// `(B, n, n, 1)`, `0` on edges and `-1e9` elsewhere.
    pub edge_bias: Tensor,
    /// `(B, n, 1, 1)`, `1` for nodes without neighbors.
    pub isolated: Tensor,
    /// `(B, n, n)`, `1` on off-diagonal pairs of real nodes.
    pub pair_mask: Tensor,
    /// `(B, time_embed_dim)`.
    pub time: Tensor,
    /// `(B, 1, 1)` noise level per graph.
    pub sigma: Tensor,
    pub batch: usize,
    pub n: usize,
}

/// Sinusoidal embedding of `t * TIME_SCALE`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let step = (10_000f64).ln() / (half.max(2) - 1) as f64;
    let x = t * TIME_SCALE;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let arg = x * (-(k as f64) * step).exp();
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

fn to_tensor(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

impl NetInput {
    /// Assembles network inputs from a padded batch.
    ///
    /// `a` and `a_bar` are `(B, n, n)`; `node_mask` is `(B, n)`; `t` holds one time per graph.
    pub fn build(
        a: &Array3<f64>,
        a_bar: &Array3<f64>,
        node_mask: &Array2<bool>,
        t: &[f64],
        cfg: &PgsnConfig,
        sde: &VpSdeSchedule,
        dtype: DType,
    ) -> Result<Self> {
        let (b, n, n2) = a.dim();
        if n != n2 || a_bar.dim() != (b, n, n) || node_mask.dim() != (b, n) || t.len() != b {
            return Err(Error::Contract(format!(
                "inconsistent batch shapes: a {:?}, a_bar {:?}, mask {:?}, t {}",
                a.dim(),
                a_bar.dim(),
                node_mask.dim(),
                t.len()
            )));
        }
        let r = cfg.rw_steps;
        let deg_buckets = cfg.max_nodes;
        let mut a_v = Vec::with_capacity(b * n * n);
        let mut deg_v = vec![0.0; b * n * deg_buckets];
        let mut land_v = vec![0.0; b * n * r];
        let mut spd_v = vec![0.0; b * n * n * (r + 1)];
        let mut edge_v = vec![0.0; b * n * n];
        let mut bias_v = vec![-MASK_BIAS; b * n * n];
        let mut iso_v = vec![1.0; b * n];
        let mut pair_v = vec![0.0; b * n * n];
        let mut time_v = Vec::with_capacity(b * cfg.time_embed_dim);
        let mut sigma_v = Vec::with_capacity(b);

        for g in 0..b {
            let mask: Vec<bool> = node_mask.row(g).to_vec();
            let mut bar = a_bar.index_axis(ndarray::Axis(0), g).to_owned();
            for i in 0..n {
                for j in 0..n {
                    if i == j || !mask[i] || !mask[j] {
                        bar[[i, j]] = 0.0;
                    }
                }
            }
            let feats = features::extract(&bar, r);
            let deg = features::degree_onehot(&bar, deg_buckets - 1);
            let ag = a.index_axis(ndarray::Axis(0), g);
            for i in 0..n {
                for j in 0..n {
                    let live = i != j && mask[i] && mask[j];
                    a_v.push(if live { ag[[i, j]] } else { 0.0 });
                    let idx = (g * n + i) * n + j;
                    if live {
                        pair_v[idx] = 1.0;
                    }
                    let class = feats.spd.classes[[i, j]];
                    spd_v[idx * (r + 1) + class - 1] = 1.0;
                }
                for k in 0..deg_buckets {
                    deg_v[(g * n + i) * deg_buckets + k] = deg[[i, k]];
                }
                for k in 0..r {
                    land_v[(g * n + i) * r + k] = feats.landing[[i, k]];
                }
            }
            for (i, j) in features::edge_set(&ag.to_owned(), cfg.gamma, &mask) {
                for (x, y) in [(i, j), (j, i)] {
                    let idx = (g * n + x) * n + y;
                    edge_v[idx] = 1.0;
                    bias_v[idx] = 0.0;
                    iso_v[g * n + x] = 0.0;
                }
            }
            time_v.extend(sinusoidal_embedding(t[g], cfg.time_embed_dim));
            sigma_v.push(sde.marginal_coeffs(t[g])?.sigma);
        }
        if let Some(g) = sigma_v.iter().position(|&s| s == 0.0) {
            return Err(Error::Singular { t: t[g] });
        }
        Ok(Self {
            a: to_tensor(a_v, &[b, n, n], dtype)?,
            degree: to_tensor(deg_v, &[b, n, deg_buckets], dtype)?,
            landing: to_tensor(land_v, &[b, n, r], dtype)?,
            spd: to_tensor(spd_v, &[b, n, n, r + 1], dtype)?,
            edge_mask: to_tensor(edge_v, &[b, n, n, 1], dtype)?,
            edge_bias: to_tensor(bias_v, &[b, n, n, 1], dtype)?,
            isolated: to_tensor(iso_v, &[b, n, 1, 1], dtype)?,
            pair_mask: to_tensor(pair_v, &[b, n, n], dtype)?,
            time: to_tensor(time_v, &[b, cfg.time_embed_dim], dtype)?,
            sigma: to_tensor(sigma_v, &[b, 1, 1], dtype)?,
            batch: b,
            n,
        })
    }
}

fn check_finite(t: &Tensor, what: impl FnOnce() -> String) -> Result<()> {
    let s = t.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

#[derive(Debug, Clone)]
pub struct Pgsn {
    cfg: PgsnConfig,
    dtype: DType,
    params: ParamStore,
    time_fc1: Linear,
    time_fc2: Linear,
    time_h: Linear,
    time_p: Option<Linear>,
    time_e: Linear,
    h_in: Linear,
    p_in: Option<Linear>,
    a_in: Linear,
    spd_in: Option<Linear>,
    layers: Vec<AttentionLayer>,
    head: Vec<Linear>,
}

impl Pgsn {
    pub fn new(cfg: PgsnConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let r = cfg.rw_steps;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            store: ParamStore::new(),
        };
        let time_fc1 = init.linear("time.fc1", cfg.time_embed_dim, d, true)?;
        let time_fc2 = init.linear("time.fc2", d, d, true)?;
        let time_h = init.linear("time.h", d, d, true)?;
        let time_p = if cfg.use_position {
            Some(init.linear("time.p", d, d, true)?)
        } else {
            None
        };
        let time_e = init.linear("time.e", d, d, true)?;
        let h_in = init.linear("embed.degree", cfg.max_nodes, d, true)?;
        let p_in = if cfg.use_position {
            Some(init.linear("embed.landing", r, d, true)?)
        } else {
            None
        };
        let (a_in, spd_in) = if cfg.use_spd {
            (
                init.linear("embed.adjacency", 1, d / 2, true)?,
                Some(init.linear("embed.spd", r + 1, d / 2, false)?),
            )
        } else {
            (init.linear("embed.adjacency", 1, d, true)?, None)
        };
        let qkv_in = if cfg.use_position { 2 * d } else { d };
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let name = |s: &str| format!("layers.{l}.{s}");
            layers.push(AttentionLayer {
                q: init.linear(&name("q"), qkv_in, d, false)?,
                k: init.linear(&name("k"), qkv_in, d, false)?,
                v: init.linear(&name("v"), qkv_in, d, false)?,
                edge: init.linear(&name("edge"), d, 2 * d, true)?,
                pos: if cfg.use_position {
                    Some((init.layer_norm(&name("pos_norm"), d)?, init.linear(&name("pos"), d, d, false)?))
                } else {
                    None
                },
                w1: init.linear(&name("w1"), d, d, true)?,
                norm1: init.layer_norm(&name("norm1"), d)?,
                ffn1: init.linear(&name("ffn1"), d, 2 * d, true)?,
                ffn2: init.linear(&name("ffn2"), 2 * d, d, true)?,
                norm2: init.layer_norm(&name("norm2"), d)?,
                time: init.linear(&name("time"), d, d, true)?,
                edge_update: if cfg.update_edges {
                    let w2 = init.linear(&name("w2"), d, d, false)?;
                    let b2 = init.param(name("w2.b"), vec![0.0; d], &[d])?;
                    Some((w2, b2))
                } else {
                    None
                },
            });
        }
        let mut head = Vec::with_capacity(cfg.head_mlp_layers + 1);
        let mut fan_in = 2 * d;
        for k in 0..cfg.head_mlp_layers {
            head.push(init.linear(&format!("head.{k}"), fan_in, d, true)?);
            fan_in = d;
        }
        head.push(init.zero_linear("head.out", fan_in, 1)?);

        Ok(Self {
            cfg,
            dtype,
            params: init.store,
            time_fc1,
            time_fc2,
            time_h,
            time_p,
            time_e,
            h_in,
            p_in,
            a_in,
            spd_in,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &PgsnConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Builds a network with the same architecture and the given parameter values.
    pub fn with_params(&self, values: &[Tensor]) -> Result<Self> {
        let other = Self::new(self.cfg.clone(), self.dtype, 0)?;
        other.params.assign(values)?;
        Ok(other)
    }

    fn time_embedding(&self, input: &NetInput) -> Result<Tensor> {
        let x = self.time_fc1.forward(&input.time)?.silu()?;
        Ok(self.time_fc2.forward(&x)?.silu()?)
    }

    /// Initial `(h^0, p^0, e^0)` and the activated time embedding.
    pub fn init_features(&self, input: &NetInput) -> Result<(LayerState, Tensor)> {
        let temb = self.time_embedding(input)?;
        let (b, n) = (input.batch, input.n);
        let d = self.cfg.hidden_dim;
        let h = self
            .h_in
            .forward(&input.degree)?
            .broadcast_add(&self.time_h.forward(&temb)?.unsqueeze(1)?)?;
        let p = match (&self.p_in, &self.time_p) {
            (Some(p_in), Some(time_p)) => Some(
                p_in.forward(&input.landing)?
                    .broadcast_add(&time_p.forward(&temb)?.unsqueeze(1)?)?,
            ),
            _ => None,
        };
        let a_feat = self.a_in.forward(&input.a.unsqueeze(3)?)?;
        let e = match &self.spd_in {
            Some(spd_in) => Tensor::cat(&[&a_feat, &spd_in.forward(&input.spd)?], 3)?,
            None => a_feat,
        };
        let te = self.time_e.forward(&temb)?.reshape((b, 1, 1, d))?;
        let e = e.broadcast_add(&te)?;
        debug_assert_eq!(e.dims(), &[b, n, n, d]);
        Ok((LayerState { h, p, e }, temb))
    }

    fn attention_layer(&self, l: usize, st: &LayerState, temb: &Tensor, input: &NetInput) -> Result<LayerState> {
        let layer = &self.layers[l];
        let (b, n) = (input.batch, input.n);
        let (d, heads, dh) = (self.cfg.hidden_dim, self.cfg.num_heads, self.cfg.head_dim());
        // p is read through a layer norm; its residual stream is left unnormalized
        let p_read = match (&st.p, &layer.pos) {
            (Some(p), Some((norm, _))) => Some(norm.forward(p)?),
            _ => None,
        };
        let x = match &p_read {
            Some(p) => Tensor::cat(&[&st.h, p], 2)?,
            None => st.h.clone(),
        };
        let split = |t: Tensor| t.reshape((b, n, heads, dh));
        let q = split(layer.q.forward(&x)?)?;
        let k = split(layer.k.forward(&x)?)?;
        let v = split(layer.v.forward(&x)?)?;
        let ce = layer.edge.forward(&st.e)?;
        let c = ce.narrow(3, 0, d)?.reshape((b, n, n, heads, dh))?;
        let c_bar = ce.narrow(3, d, d)?.reshape((b, n, n, heads, dh))?;

        // logits[b, i, j, k] = q_i . (k_j o c_ij) / sqrt(dh)
        let logits = q
            .unsqueeze(2)?
            .broadcast_mul(&k.unsqueeze(1)?)?
            .mul(&c)?
            .sum(4)?
            .affine(1.0 / (dh as f64).sqrt(), 0.0)?
            .broadcast_add(&input.edge_bias)?;
        let shift = logits.detach().max_keepdim(2)?;
        let weights = logits.broadcast_sub(&shift)?.exp()?.broadcast_mul(&input.edge_mask)?;
        let denom = weights.sum_keepdim(2)?.broadcast_add(&input.isolated)?;
        let alpha = weights.broadcast_div(&denom)?;

        let msg = alpha
            .unsqueeze(4)?
            .broadcast_mul(&v.unsqueeze(1)?)?
            .mul(&c_bar)?;
        let m_h = msg.sum(2)?.reshape((b, n, d))?;

        let h_hat = layer.norm1.forward(&m_h.add(&layer.w1.forward(&st.h)?)?)?;
        let t_l = layer.time.forward(temb)?.unsqueeze(1)?;
        let ffn = layer
            .ffn2
            .forward(&layer.ffn1.forward(&h_hat.broadcast_add(&t_l)?)?.silu()?)?;
        let h = layer.norm2.forward(&h_hat.add(&ffn)?)?;

        let p = match (&st.p, &p_read, &layer.pos) {
            (Some(p), Some(p_norm), Some((_, pos))) => {
                let pw = pos.forward(p_norm)?.reshape((b, 1, n, heads, dh))?;
                let m_p = msg.broadcast_mul(&pw)?.sum(2)?.reshape((b, n, d))?;
                Some(p.add(&m_p.add(p)?.silu()?)?)
            }
            _ => None,
        };

        let e = match &layer.edge_update {
            Some((w2, b2)) => {
                let hw = w2.forward(&h)?;
                let pair = hw
                    .unsqueeze(2)?
                    .broadcast_add(&hw.unsqueeze(1)?)?
                    .broadcast_add(b2.as_tensor())?;
                st.e.add(&pair.silu()?)?
            }
            None => st.e.clone(),
        };
        Ok(LayerState { h, p, e })
    }

    fn run(&self, input: &NetInput, diagnose: bool) -> Result<Tensor> {
        let (mut st, temb) = self.init_features(input)?;
        let e0 = st.e.clone();
        if diagnose {
            check_finite(&temb, || "time embedding".into())?;
            check_finite(&st.h, || "initial node features".into())?;
            check_finite(&st.e, || "initial edge features".into())?;
        }
        for l in 0..self.layers.len() {
            st = self.attention_layer(l, &st, &temb, input)?;
            if diagnose {
                check_finite(&st.h, || format!("layer {l} node features"))?;
                if let Some(p) = &st.p {
                    check_finite(p, || format!("layer {l} position features"))?;
                }
                check_finite(&st.e, || format!("layer {l} edge features"))?;
            }
        }
        let mut x = Tensor::cat(&[&st.e, &e0], 3)?;
        let last = self.head.len() - 1;
        for (k, lin) in self.head.iter().enumerate() {
            x = lin.forward(&x)?;
            if k < last {
                x = x.silu()?;
            }
        }
        let out = x.squeeze(3)?;
        let sym = out.add(&out.transpose(1, 2)?)?.affine(0.5, 0.0)?;
        let eps = sym.mul(&input.pair_mask)?;
        if diagnose {
            check_finite(&eps, || "score head output".into())?;
        }
        Ok(eps)
    }

    /// Noise prediction `eps_hat`, `(B, n, n)`, symmetric, zero on the diagonal and masked pairs.
    pub fn predict_noise(&self, input: &NetInput) -> Result<Tensor> {
        let eps = self.run(input, false)?;
        if check_finite(&eps, String::new).is_err() {
            // Re-run with per-stage checks to name the failing layer.
            self.run(input, true)?;
            return Err(Error::NonFinite("score network output".into()));
        }
        Ok(eps)
    }

    /// Score estimate `-eps_hat / sigma_t`.
    pub fn forward(&self, input: &NetInput) -> Result<Tensor> {
        Ok(self.predict_noise(input)?.neg()?.broadcast_div(&input.sigma)?)
    }

    /// Score of a padded batch in `f64` arrays.
    pub fn score_batch(
        &self,
        a: &Array3<f64>,
        a_bar: &Array3<f64>,
        node_mask: &Array2<bool>,
        t: &[f64],
        sde: &VpSdeSchedule,
    ) -> Result<Array3<f64>> {
        let input = NetInput::build(a, a_bar, node_mask, t, &self.cfg, sde, self.dtype)?;
        tensor_to_array3(&self.forward(&input)?)
    }
}

pub fn tensor_to_array3(t: &Tensor) -> Result<Array3<f64>> {
    let (b, n, m) = t.dims3()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(Array3::from_shape_vec((b, n, m), v).map_err(|e| Error::Contract(e.to_string()))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{quantize, symmetric_noise};
    use rand::seq::SliceRandom;

    fn small_cfg() -> PgsnConfig {
        PgsnConfig {
            hidden_dim: 16,
            num_layers: 2,
            num_heads: 4,
            rw_steps: 6,
            max_nodes: 8,
            time_embed_dim: 16,
            ..Default::default()
        }
    }

    fn random_state(n: usize, seed: u64) -> (Array3<f64>, Array3<f64>, Array2<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = symmetric_noise(n, &mut rng) * 0.8;
        let mask = vec![true; n];
        let bar = quantize(&a, &mask);
        (
            a.insert_axis(ndarray::Axis(0)),
            bar.insert_axis(ndarray::Axis(0)),
            Array2::from_elem((1, n), true),
        )
    }

    fn randomize_head(net: &Pgsn) {
        // zero-initialized output layer makes every output 0; perturb it for shape tests
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let normal = Normal::new(0.0, 0.3).unwrap();
        for (name, var) in net.params().names().iter().zip(net.params().vars()) {
            if name.starts_with("head.out") {
                let vals: Vec<f64> = (0..var.elem_count()).map(|_| normal.sample(&mut rng)).collect();
                let t = Tensor::from_vec(vals, var.shape(), &Device::Cpu)
                    .unwrap()
                    .to_dtype(var.dtype())
                    .unwrap();
                var.set(&t).unwrap();
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(PgsnConfig::default().validate().is_ok());
        let bad = PgsnConfig {
            hidden_dim: 30,
            num_heads: 8,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let zero = PgsnConfig {
            num_layers: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn time_embedding_properties() {
        let a = sinusoidal_embedding(0.3, 32);
        assert_eq!(a, sinusoidal_embedding(0.3, 32));
        assert_eq!(a.len(), 32);
        let d: f64 = sinusoidal_embedding(0.0, 32)
            .iter()
            .zip(sinusoidal_embedding(1.0, 32))
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        assert!(d > 0.0);
    }

    #[test]
    fn initial_score_is_zero() {
        let net = Pgsn::new(small_cfg(), DType::F32, 0).unwrap();
        let (a, bar, mask) = random_state(6, 1);
        let s = net
            .score_batch(&a, &bar, &mask, &[0.5], &VpSdeSchedule::default())
            .unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_is_symmetric_and_masked() {
        let net = Pgsn::new(small_cfg(), DType::F32, 0).unwrap();
        randomize_head(&net);
        let (a, bar, mut mask) = random_state(6, 2);
        mask[[0, 5]] = false;
        let s = net
            .score_batch(&a, &bar, &mask, &[0.4], &VpSdeSchedule::default())
            .unwrap();
        for i in 0..6 {
            assert_eq!(s[[0, i, i]], 0.0);
            assert_eq!(s[[0, i, 5]], 0.0);
            for j in 0..6 {
                assert_eq!(s[[0, i, j]], s[[0, j, i]]);
            }
        }
        assert!(s.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn single_edge_attention_is_one() {
        // n = 2 with one edge: softmax over a singleton neighborhood
        let cfg = small_cfg();
        let net = Pgsn::new(cfg.clone(), DType::F64, 3).unwrap();
        let a = ndarray::array![[[0.0, 0.9], [0.9, 0.0]]];
        let bar = ndarray::array![[[0.0, 1.0], [1.0, 0.0]]];
        let mask = Array2::from_elem((1, 2), true);
        let input = NetInput::build(&a, &bar, &mask, &[0.3], &cfg, &VpSdeSchedule::default(), DType::F64).unwrap();
        let (st, _) = net.init_features(&input).unwrap();
        let layer = &net.layers[0];
        let p_norm = layer.pos.as_ref().unwrap().0.forward(st.p.as_ref().unwrap()).unwrap();
        let x = Tensor::cat(&[&st.h, &p_norm], 2).unwrap();
        let (d, heads, dh) = (cfg.hidden_dim, cfg.num_heads, cfg.head_dim());
        let q = layer.q.forward(&x).unwrap().reshape((1, 2, heads, dh)).unwrap();
        let k = layer.k.forward(&x).unwrap().reshape((1, 2, heads, dh)).unwrap();
        let ce = layer.edge.forward(&st.e).unwrap();
        let c = ce.narrow(3, 0, d).unwrap().reshape((1, 2, 2, heads, dh)).unwrap();
        let logits = q
            .unsqueeze(2).unwrap()
            .broadcast_mul(&k.unsqueeze(1).unwrap()).unwrap()
            .mul(&c).unwrap()
            .sum(4).unwrap()
            .broadcast_add(&input.edge_bias).unwrap();
        let shift = logits.max_keepdim(2).unwrap();
        let w = logits.broadcast_sub(&shift).unwrap().exp().unwrap().broadcast_mul(&input.edge_mask).unwrap();
        let alpha = w.broadcast_div(&w.sum_keepdim(2).unwrap().broadcast_add(&input.isolated).unwrap()).unwrap();
        let v = alpha.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // layout (i, j, head): alpha[0, 1, :] == 1, alpha[0, 0, :] == 0
        for h in 0..heads {
            assert_eq!(v[h], 0.0);
            assert!((v[heads + h] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn isolated_nodes_receive_zero_message() {
        let cfg = PgsnConfig { gamma: 1.0, ..small_cfg() };
        let net = Pgsn::new(cfg.clone(), DType::F64, 4).unwrap();
        randomize_head(&net);
        let (a, bar, mask) = random_state(5, 5);
        let s = net
            .score_batch(&a, &bar, &mask, &[0.5], &VpSdeSchedule::default())
            .unwrap();
        assert!(s.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn layer_is_permutation_equivariant() {
        let cfg = small_cfg();
        let net = Pgsn::new(cfg.clone(), DType::F32, 7).unwrap();
        let sde = VpSdeSchedule::default();
        let n = 7;
        let (a, bar, mask) = random_state(n, 11);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(12));
        let permute = |m: &Array3<f64>| {
            let mut out = m.clone();
            for i in 0..n {
                for j in 0..n {
                    out[[0, perm[i], perm[j]]] = m[[0, i, j]];
                }
            }
            out
        };
        let inp = NetInput::build(&a, &bar, &mask, &[0.6], &cfg, &sde, DType::F32).unwrap();
        let inp_p = NetInput::build(&permute(&a), &permute(&bar), &mask, &[0.6], &cfg, &sde, DType::F32).unwrap();
        let (s0, temb) = net.init_features(&inp).unwrap();
        let (s0p, _) = net.init_features(&inp_p).unwrap();
        let s1 = net.attention_layer(0, &s0, &temb, &inp).unwrap();
        let s1p = net.attention_layer(0, &s0p, &temb, &inp_p).unwrap();
        let h = s1.h.to_dtype(DType::F64).unwrap().to_vec3::<f64>().unwrap();
        let hp = s1p.h.to_dtype(DType::F64).unwrap().to_vec3::<f64>().unwrap();
        let e = s1.e.to_dtype(DType::F64).unwrap().squeeze(0).unwrap().to_vec3::<f64>().unwrap();
        let ep = s1p.e.to_dtype(DType::F64).unwrap().squeeze(0).unwrap().to_vec3::<f64>().unwrap();
        let mut worst = 0.0f64;
        for i in 0..n {
            for f in 0..cfg.hidden_dim {
                worst = worst.max((h[0][i][f] - hp[0][perm[i]][f]).abs());
            }
            for j in 0..n {
                for f in 0..cfg.hidden_dim {
                    worst = worst.max((e[i][j][f] - ep[perm[i]][perm[j]][f]).abs());
                    // edge update is symmetric when h is shared
                }
            }
        }
        assert!(worst <= 1e-4, "max deviation {worst}");
    }

    #[test]
    fn ablations_build_and_run() {
        let sde = VpSdeSchedule::default();
        for (pos, spd, upd) in [(false, true, true), (true, false, true), (true, true, false)] {
            let cfg = PgsnConfig {
                use_position: pos,
                use_spd: spd,
                update_edges: upd,
                ..small_cfg()
            };
            let net = Pgsn::new(cfg, DType::F32, 1).unwrap();
            randomize_head(&net);
            let (a, bar, mask) = random_state(5, 3);
            let s = net.score_batch(&a, &bar, &mask, &[0.2], &sde).unwrap();
            assert!(s.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn with_params_copies_values() {
        let net = Pgsn::new(small_cfg(), DType::F32, 1).unwrap();
        let other = Pgsn::new(small_cfg(), DType::F32, 2).unwrap();
        let copy = other.with_params(&net.params().snapshot().unwrap()).unwrap();
        for (x, y) in net.params().vars().iter().zip(copy.params().vars()) {
            let dx = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let dy = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(dx, dy);
        }
    }
}
