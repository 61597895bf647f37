//! Python module `graphdiff`.
//!
//! Matrices cross the boundary as nested lists of floats and graphs as
//! `(n, [(i, j), ...])` tuples. Configuration uses the flat `section.key`
//! names of the command-line config.

use std::collections::HashMap;

use candle_core::DType;
use graphdiff_core::checkpoint::Checkpoint;
use graphdiff_core::config::RunConfig;
use graphdiff_core::data::{self, GraphSample, NodeCountDistribution};
use graphdiff_core::features;
use graphdiff_core::metrics;
use graphdiff_core::pgsn::Pgsn;
use graphdiff_core::samplers::{self, NetScore, SamplerMethod};
use graphdiff_core::sde::{self, VpSdeSchedule};
use graphdiff_core::train::Trainer;
use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Matrix = Vec<Vec<f64>>;
type PyGraph = (usize, Vec<(usize, usize)>);

fn err(e: graphdiff_core::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_array(m: &Matrix) -> PyResult<Array2<f64>> {
    let n = m.len();
    if m.iter().any(|row| row.len() != n) {
        return Err(PyValueError::new_err("matrix must be square"));
    }
    Ok(Array2::from_shape_fn((n, n), |(i, j)| m[i][j]))
}

fn to_matrix(a: &Array2<f64>) -> Matrix {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn to_graphs(graphs: &[PyGraph]) -> PyResult<Vec<GraphSample>> {
    graphs
        .iter()
        .map(|(n, e)| GraphSample::from_edges(*n, e).map_err(err))
        .collect()
}

fn from_graphs(graphs: &[GraphSample]) -> Vec<PyGraph> {
    graphs.iter().map(|g| (g.n(), g.edges())).collect()
}

fn run_config(overrides: Option<HashMap<String, String>>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut pairs: Vec<_> = overrides.unwrap_or_default().into_iter().collect();
    pairs.sort();
    for (k, v) in pairs {
        cfg.set(&k, &v).map_err(err)?;
    }
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Variance-preserving SDE with a linear noise schedule.
#[pyclass(name = "VpSde", frozen)]
struct PyVpSde {
    inner: VpSdeSchedule,
}

#[pymethods]
impl PyVpSde {
    #[new]
    #[pyo3(signature = (beta_min = 0.1, beta_max = 20.0))]
    fn new(beta_min: f64, beta_max: f64) -> PyResult<Self> {
        Ok(Self {
            inner: VpSdeSchedule::new(beta_min, beta_max).map_err(err)?,
        })
    }

    fn beta(&self, t: f64) -> PyResult<f64> {
        self.inner.beta_at(t).map_err(err)
    }

    /// `(alpha_t, sigma_t)` of the perturbation kernel.
    fn marginal(&self, t: f64) -> PyResult<(f64, f64)> {
        let m = self.inner.marginal_coeffs(t).map_err(err)?;
        Ok((m.alpha, m.sigma))
    }

    /// Perturbs a signed adjacency; returns `(a_t, a_bar_t, noise)`.
    #[pyo3(signature = (a0, t, seed = 0))]
    fn perturb(&self, a0: Matrix, t: f64, seed: u64) -> PyResult<(Matrix, Matrix, Matrix)> {
        let a0 = to_array(&a0)?;
        let n = a0.nrows();
        let noise = sde::symmetric_noise(n, &mut ChaCha8Rng::seed_from_u64(seed));
        let st = self.inner.perturb(&a0, t, &noise, &vec![true; n]).map_err(err)?;
        Ok((to_matrix(&st.a), to_matrix(&st.a_bar), to_matrix(&noise)))
    }

    fn score_target(&self, a_t: Matrix, a0: Matrix, t: f64) -> PyResult<Matrix> {
        let s = self
            .inner
            .score_target(&to_array(&a_t)?, &to_array(&a0)?, t)
            .map_err(err)?;
        Ok(to_matrix(&s))
    }

    fn __repr__(&self) -> String {
        format!("VpSde(beta_min={}, beta_max={})", self.inner.beta_min, self.inner.beta_max)
    }
}

/// Thresholds a signed matrix at 0 into a binary adjacency.
#[pyfunction]
fn quantize(a: Matrix) -> PyResult<Matrix> {
    let a = to_array(&a)?;
    let n = a.nrows();
    Ok(to_matrix(&sde::quantize(&a, &vec![true; n])))
}

/// Degrees, landing probabilities (`n x steps`) and shortest-path classes of a binary adjacency.
#[pyfunction]
#[pyo3(signature = (adjacency, steps = 32))]
fn graph_features(adjacency: Matrix, steps: usize) -> PyResult<(Vec<usize>, Matrix, Vec<Vec<usize>>)> {
    let a = to_array(&adjacency)?;
    let f = features::extract(&a, steps);
    let spd = f.spd.classes.outer_iter().map(|r| r.to_vec()).collect();
    Ok((features::degrees(&a), f.landing.outer_iter().map(|r| r.to_vec()).collect(), spd))
}

#[pyfunction]
#[pyo3(signature = (count, seed = 0))]
fn community_small(count: usize, seed: u64) -> Vec<PyGraph> {
    from_graphs(&data::gen_community_small(count, &mut ChaCha8Rng::seed_from_u64(seed)))
}

#[pyfunction]
#[pyo3(signature = (count, n, p, seed = 0))]
fn erdos_renyi(count: usize, n: usize, p: f64, seed: u64) -> PyResult<Vec<PyGraph>> {
    let g = data::gen_er(count, n, p, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)?;
    Ok(from_graphs(&g))
}

#[pyfunction]
#[pyo3(signature = (path, strict = true))]
fn load_graphs(path: std::path::PathBuf, strict: bool) -> PyResult<Vec<PyGraph>> {
    Ok(from_graphs(&data::load_edge_lists(path, strict).map_err(err)?))
}

#[pyfunction]
fn save_graphs(path: std::path::PathBuf, graphs: Vec<PyGraph>) -> PyResult<()> {
    data::write_graphs(path, &to_graphs(&graphs)?).map_err(err)
}

/// Max-over-sigma MMD of every descriptor plus their average, keyed by descriptor name.
#[pyfunction]
fn mmd(generated: Vec<PyGraph>, reference: Vec<PyGraph>) -> PyResult<HashMap<String, f64>> {
    let row = metrics::MmdRow::compare(&to_graphs(&generated)?, &to_graphs(&reference)?).map_err(err)?;
    Ok(HashMap::from([
        ("degree".into(), row.degree),
        ("clustering".into(), row.clustering),
        ("spectrum".into(), row.spectrum),
        ("average".into(), row.average()),
    ]))
}

/// Full report as text, with the train/test row and the ER baseline.
#[pyfunction]
#[pyo3(signature = (generated, test, train, seed = 0))]
fn evaluate(generated: Vec<PyGraph>, test: Vec<PyGraph>, train: Vec<PyGraph>, seed: u64) -> PyResult<String> {
    let (g, t, tr) = (to_graphs(&generated)?, to_graphs(&test)?, to_graphs(&train)?);
    let mut report = metrics::evaluate(&g, &t, &tr).map_err(err)?;
    let er = graphdiff_core::cli::er_baseline_graphs(&tr, g.len(), seed).map_err(err)?;
    report
        .baselines
        .push(("ER".into(), metrics::MmdRow::compare(&er, &t).map_err(err)?));
    Ok(report.to_string())
}

/// Score network with frozen parameters.
#[pyclass(name = "ScoreNetwork", unsendable)]
struct PyScoreNetwork {
    net: Pgsn,
    sde: VpSdeSchedule,
    node_counts: Option<NodeCountDistribution>,
}

#[pymethods]
impl PyScoreNetwork {
    /// Fresh network; `config` holds `pgsn.*` / `sde.*` overrides.
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<HashMap<String, String>>, seed: u64) -> PyResult<Self> {
        let cfg = run_config(config)?;
        Ok(Self {
            net: Pgsn::new(cfg.pgsn, DType::F32, seed).map_err(err)?,
            sde: cfg.sde,
            node_counts: None,
        })
    }

    /// EMA parameters of a checkpoint.
    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(err)?;
        let trainer = Trainer::from_checkpoint(&ck).map_err(err)?;
        Ok(Self {
            net: trainer.ema_network().map_err(err)?,
            sde: ck.sde,
            node_counts: ck.node_counts,
        })
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.net.params().num_scalars()
    }

    /// Score of one noisy graph at time `t`; the quantized view is derived from `a`.
    fn score(&self, a: Matrix, t: f64) -> PyResult<Matrix> {
        let a = to_array(&a)?;
        let n = a.nrows();
        let bar = sde::quantize(&a, &vec![true; n]);
        let a3 = a.insert_axis(ndarray::Axis(0));
        let b3 = bar.insert_axis(ndarray::Axis(0));
        let mask = Array2::from_elem((1, n), true);
        let s: Array3<f64> = self.net.score_batch(&a3, &b3, &mask, &[t], &self.sde).map_err(err)?;
        Ok(to_matrix(&s.index_axis(ndarray::Axis(0), 0).to_owned()))
    }

    /// Generates graphs; node counts come from the checkpoint unless `sizes` is given.
    /// Returns `(graphs, nfe)`.
    #[pyo3(signature = (count, method = "ode_fixed", seed = 0, config = None, sizes = None))]
    fn sample(
        &self,
        count: usize,
        method: &str,
        seed: u64,
        config: Option<HashMap<String, String>>,
        sizes: Option<Vec<usize>>,
    ) -> PyResult<(Vec<PyGraph>, usize)> {
        let mut cfg = run_config(config)?.sampler;
        cfg.method = method.parse::<SamplerMethod>().map_err(err)?;
        cfg.seed = seed;
        let dist = match (sizes, &self.node_counts) {
            (Some(s), _) => {
                let p = vec![1.0 / s.len().max(1) as f64; s.len()];
                NodeCountDistribution::new(s, p).map_err(err)?
            }
            (None, Some(d)) => d.clone(),
            (None, None) => return Err(PyValueError::new_err("no node-count distribution; pass sizes")),
        };
        let score = NetScore {
            net: &self.net,
            sde: self.sde,
        };
        let (graphs, manifest) = samplers::generate(&score, &dist, count, &cfg, &self.sde).map_err(err)?;
        Ok((from_graphs(&graphs), manifest.nfe))
    }
}

/// Denoising score-matching trainer.
#[pyclass(name = "Trainer", unsendable)]
struct PyTrainer {
    inner: Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<HashMap<String, String>>) -> PyResult<Self> {
        let cfg = run_config(config)?;
        Ok(Self {
            inner: Trainer::new(cfg.pgsn, cfg.train, cfg.sde).map_err(err)?,
        })
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    /// One optimizer step on a batch drawn from `graphs`; returns the loss.
    fn train_step(&mut self, graphs: Vec<PyGraph>) -> PyResult<f64> {
        let g = to_graphs(&graphs)?;
        if self.inner.node_counts.is_none() {
            self.inner.node_counts = Some(NodeCountDistribution::from_graphs(&g).map_err(err)?);
        }
        Ok(self.inner.train_step(&g).map_err(err)?.loss)
    }

    fn validation_loss(&self, graphs: Vec<PyGraph>) -> PyResult<f64> {
        self.inner.validation_loss(&to_graphs(&graphs)?).map_err(err)
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.checkpoint().map_err(err)?.save(path).map_err(err)
    }

    /// Network with the EMA parameters.
    fn ema_network(&self) -> PyResult<PyScoreNetwork> {
        Ok(PyScoreNetwork {
            net: self.inner.ema_network().map_err(err)?,
            sde: self.inner.sde,
            node_counts: self.inner.node_counts.clone(),
        })
    }
}

#[pymodule]
fn graphdiff(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVpSde>()?;
    m.add_class::<PyScoreNetwork>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(graph_features, m)?)?;
    m.add_function(wrap_pyfunction!(community_small, m)?)?;
    m.add_function(wrap_pyfunction!(erdos_renyi, m)?)?;
    m.add_function(wrap_pyfunction!(load_graphs, m)?)?;
    m.add_function(wrap_pyfunction!(save_graphs, m)?)?;
    m.add_function(wrap_pyfunction!(mmd, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
