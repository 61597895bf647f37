//! Structure statistics and kernel MMD between sets of graphs.
//!
//! Each graph is mapped to a normalized histogram (degree, local clustering,
//! normalized-Laplacian spectrum); two sets of histograms are compared with the
//! biased MMD estimator under an RBF kernel, maximized over a fixed grid of bandwidths.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::GraphSample;
use crate::error::{Error, Result};

pub const CLUSTERING_BINS: usize = 100;
pub const SPECTRUM_BINS: usize = 200;
pub const SIGMA_GRID_LEN: usize = 50;
pub const SIGMA_GRID_MIN: f64 = 1e-5;
pub const SIGMA_GRID_MAX: f64 = 1e5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorKind {
    Degree,
    Clustering,
    Spectrum,
}

impl DescriptorKind {
    pub const ALL: [DescriptorKind; 3] = [Self::Degree, Self::Clustering, Self::Spectrum];

    pub fn label(self) -> &'static str {
        match self {
            Self::Degree => "deg",
            Self::Clustering => "clus",
            Self::Spectrum => "spec",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorHistogram {
    pub kind: DescriptorKind,
    pub values: Vec<f64>,
}

impl DescriptorHistogram {
    pub fn bins(&self) -> usize {
        self.values.len()
    }
}

fn normalized(mut counts: Vec<f64>) -> Vec<f64> {
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

/// Bins `x` into `bins` equal-width cells over `[lo, hi]`, with the right edge closed.
fn bin_index(x: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let pos = ((x - lo) / (hi - lo) * bins as f64).floor();
    if pos < 0.0 {
        0
    } else {
        (pos as usize).min(bins - 1)
    }
}

/// Degree histogram over integer bins `0..=max_degree`; larger degrees land in the last bin.
pub fn degree_descriptor(g: &GraphSample, max_degree: usize) -> DescriptorHistogram {
    let mut counts = vec![0.0; max_degree + 1];
    for d in g.degrees() {
        counts[d.min(max_degree)] += 1.0;
    }
    DescriptorHistogram {
        kind: DescriptorKind::Degree,
        values: normalized(counts),
    }
}

/// Local clustering coefficient of every node; `0` for degree below two.
pub fn clustering_coefficients(g: &GraphSample) -> Vec<f64> {
    let n = g.n();
    let nbrs: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| g.has_edge(i, j)).collect())
        .collect();
    nbrs.iter()
        .map(|nb| {
            let k = nb.len();
            if k < 2 {
                return 0.0;
            }
            let mut links = 0usize;
            for (x, &u) in nb.iter().enumerate() {
                for &v in &nb[x + 1..] {
                    if g.has_edge(u, v) {
                        links += 1;
                    }
                }
            }
            2.0 * links as f64 / (k * (k - 1)) as f64
        })
        .collect()
}

pub fn clustering_descriptor(g: &GraphSample) -> DescriptorHistogram {
    let mut counts = vec![0.0; CLUSTERING_BINS];
    for c in clustering_coefficients(g) {
        counts[bin_index(c, 0.0, 1.0, CLUSTERING_BINS)] += 1.0;
    }
    DescriptorHistogram {
        kind: DescriptorKind::Clustering,
        values: normalized(counts),
    }
}

/// `D^-1/2 (D - A) D^-1/2` with `D^-1/2 = 0` on isolated nodes, so their rows vanish.
pub fn normalized_laplacian(g: &GraphSample) -> DMatrix<f64> {
    let n = g.n();
    let deg = g.degrees();
    let inv_sqrt: Vec<f64> = deg
        .iter()
        .map(|&d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
        .collect();
    DMatrix::from_fn(n, n, |i, j| {
        let lap = if i == j {
            deg[i] as f64
        } else if g.has_edge(i, j) {
            -1.0
        } else {
            0.0
        };
        inv_sqrt[i] * lap * inv_sqrt[j]
    })
}

pub fn laplacian_spectrum(g: &GraphSample) -> Vec<f64> {
    if g.n() == 0 {
        return Vec::new();
    }
    let mut eig: Vec<f64> = normalized_laplacian(g).symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    eig
}

pub fn spectrum_descriptor(g: &GraphSample) -> DescriptorHistogram {
    let mut counts = vec![0.0; SPECTRUM_BINS];
    for ev in laplacian_spectrum(g) {
        counts[bin_index(ev, 0.0, 2.0, SPECTRUM_BINS)] += 1.0;
    }
    DescriptorHistogram {
        kind: DescriptorKind::Spectrum,
        values: normalized(counts),
    }
}

fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `exp(-||x - y||^2 / (2 sigma^2))`.
pub fn rbf_kernel(x: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain {
            what: "sigma",
            value: sigma,
            domain: "(0, inf)",
        });
    }
    if x.len() != y.len() {
        return Err(Error::Contract(format!(
            "histogram lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    Ok((-squared_distance(x, y) / (2.0 * sigma * sigma)).exp())
}

/// Biased MMD estimate, diagonal terms included.
pub fn mmd_biased<K>(set_g: &[Vec<f64>], set_t: &[Vec<f64>], kernel: K) -> Result<f64>
where
    K: Fn(&[f64], &[f64]) -> Result<f64>,
{
    if set_g.is_empty() || set_t.is_empty() {
        return Err(Error::Empty("MMD sample set"));
    }
    let mean_k = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Result<f64> {
        let mut acc = 0.0;
        for x in a {
            for y in b {
                acc += kernel(x, y)?;
            }
        }
        Ok(acc / (a.len() * b.len()) as f64)
    };
    Ok(mean_k(set_t, set_t)? + mean_k(set_g, set_g)? - 2.0 * mean_k(set_g, set_t)?)
}

/// `SIGMA_GRID_LEN` bandwidths log-uniformly spaced over `[1e-5, 1e5]`.
pub fn sigma_grid() -> Vec<f64> {
    let (lo, hi) = (SIGMA_GRID_MIN.log10(), SIGMA_GRID_MAX.log10());
    (0..SIGMA_GRID_LEN)
        .map(|k| 10f64.powf(lo + (hi - lo) * k as f64 / (SIGMA_GRID_LEN - 1) as f64))
        .collect()
}

/// Pairwise squared distances within and across the two sets, computed once and
/// reused for every bandwidth.
struct DistanceTable {
    gg: Vec<f64>,
    tt: Vec<f64>,
    gt: Vec<f64>,
}

impl DistanceTable {
    fn new(set_g: &[Vec<f64>], set_t: &[Vec<f64>]) -> Result<Self> {
        let len = set_g[0].len();
        if set_g.iter().chain(set_t).any(|h| h.len() != len) {
            return Err(Error::Contract("histograms differ in length".into()));
        }
        let table = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            a.iter()
                .flat_map(|x| b.iter().map(move |y| squared_distance(x, y)))
                .collect::<Vec<_>>()
        };
        Ok(Self {
            gg: table(set_g, set_g),
            tt: table(set_t, set_t),
            gt: table(set_g, set_t),
        })
    }

    fn mmd(&self, sigma: f64) -> f64 {
        let c = 1.0 / (2.0 * sigma * sigma);
        let mean = |d: &[f64]| d.iter().map(|&v| (-v * c).exp()).sum::<f64>() / d.len() as f64;
        mean(&self.tt) + mean(&self.gg) - 2.0 * mean(&self.gt)
    }
}

/// Largest MMD over `sigmas`, with the bandwidth attaining it.
pub fn mmd_max_over_sigmas(set_g: &[Vec<f64>], set_t: &[Vec<f64>], sigmas: &[f64]) -> Result<(f64, f64)> {
    if set_g.is_empty() || set_t.is_empty() {
        return Err(Error::Empty("MMD sample set"));
    }
    if sigmas.is_empty() {
        return Err(Error::Empty("sigma grid"));
    }
    if let Some(&s) = sigmas.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Domain {
            what: "sigma",
            value: s,
            domain: "(0, inf)",
        });
    }
    let table = DistanceTable::new(set_g, set_t)?;
    let mut best = (f64::NEG_INFINITY, sigmas[0]);
    for &s in sigmas {
        let v = table.mmd(s);
        if v > best.0 {
            best = (v, s);
        }
    }
    Ok(best)
}

pub fn mmd_max_over_sigma(set_g: &[Vec<f64>], set_t: &[Vec<f64>]) -> Result<(f64, f64)> {
    mmd_max_over_sigmas(set_g, set_t, &sigma_grid())
}

fn max_degree(sets: &[&[GraphSample]]) -> usize {
    sets.iter()
        .flat_map(|s| s.iter())
        .flat_map(|g| g.degrees())
        .max()
        .unwrap_or(0)
}

/// Histograms of one descriptor for a set of graphs; `max_degree` fixes the degree support.
pub fn descriptors(kind: DescriptorKind, graphs: &[GraphSample], max_degree: usize) -> Vec<Vec<f64>> {
    graphs
        .iter()
        .map(|g| match kind {
            DescriptorKind::Degree => degree_descriptor(g, max_degree).values,
            DescriptorKind::Clustering => clustering_descriptor(g).values,
            DescriptorKind::Spectrum => spectrum_descriptor(g).values,
        })
        .collect()
}

/// Max-over-sigma MMD for a single descriptor; the degree support spans both sets.
pub fn descriptor_mmd(kind: DescriptorKind, set_g: &[GraphSample], set_t: &[GraphSample]) -> Result<(f64, f64)> {
    let md = max_degree(&[set_g, set_t]);
    mmd_max_over_sigma(&descriptors(kind, set_g, md), &descriptors(kind, set_t, md))
}

/// Per-descriptor MMD of one comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdRow {
    pub degree: f64,
    pub clustering: f64,
    pub spectrum: f64,
    pub degree_sigma: f64,
    pub clustering_sigma: f64,
    pub spectrum_sigma: f64,
}

impl MmdRow {
    pub fn compare(set_g: &[GraphSample], set_t: &[GraphSample]) -> Result<Self> {
        let (degree, degree_sigma) = descriptor_mmd(DescriptorKind::Degree, set_g, set_t)?;
        let (clustering, clustering_sigma) = descriptor_mmd(DescriptorKind::Clustering, set_g, set_t)?;
        let (spectrum, spectrum_sigma) = descriptor_mmd(DescriptorKind::Spectrum, set_g, set_t)?;
        Ok(Self {
            degree,
            clustering,
            spectrum,
            degree_sigma,
            clustering_sigma,
            spectrum_sigma,
        })
    }

    pub fn average(&self) -> f64 {
        (self.degree + self.clustering + self.spectrum) / 3.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdReport {
    pub generated: MmdRow,
    pub train_test: MmdRow,
    pub baselines: Vec<(String, MmdRow)>,
}

/// Maximum-likelihood edge probability of an ER model fit to `train`.
pub fn er_baseline(train: &[GraphSample]) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::Empty("training graphs"));
    }
    let edges: usize = train.iter().map(GraphSample::num_edges).sum();
    let pairs: usize = train.iter().map(|g| g.n() * g.n().saturating_sub(1) / 2).sum();
    if pairs == 0 {
        return Ok(0.0);
    }
    Ok(edges as f64 / pairs as f64)
}

pub fn evaluate(generated: &[GraphSample], test: &[GraphSample], train: &[GraphSample]) -> Result<MmdReport> {
    if generated.is_empty() || test.is_empty() || train.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    Ok(MmdReport {
        generated: MmdRow::compare(generated, test)?,
        train_test: MmdRow::compare(train, test)?,
        baselines: Vec::new(),
    })
}

impl MmdReport {
    /// Flat `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut row = |prefix: &str, r: &MmdRow| {
            for (k, v) in [
                ("deg", r.degree),
                ("clus", r.clustering),
                ("spec", r.spectrum),
                ("avg", r.average()),
                ("deg_sigma", r.degree_sigma),
                ("clus_sigma", r.clustering_sigma),
                ("spec_sigma", r.spectrum_sigma),
            ] {
                out.push_str(&format!("{prefix}.{k} = {v:?}\n"));
            }
        };
        row("generated", &self.generated);
        row("train_test", &self.train_test);
        for (name, r) in &self.baselines {
            row(&format!("baseline_{name}"), r);
        }
        out
    }
}

impl fmt::Display for MmdReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>8} {:>8} {:>8} {:>8}", "", "Deg.", "Clus.", "Spec.", "Avg.")?;
        let mut line = |name: &str, r: &MmdRow| {
            writeln!(
                f,
                "{:<12} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
                name,
                r.degree,
                r.clustering,
                r.spectrum,
                r.average()
            )
        };
        line("Train/Test", &self.train_test)?;
        for (name, r) in &self.baselines {
            line(name, r)?;
        }
        line("Generated", &self.generated)
    }
}
