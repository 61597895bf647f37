//! Graph datasets: generators, the edge-list text format, and train/test splits.
//!
//! The on-disk format is a sequence of blank-line separated blocks:
//!
//! ```text
//! graph <id> <n>
//! <i> <j>
//! ...
//! ```
//!
//! with one `i j` line per undirected edge, `i < j`, 0-indexed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A simple undirected graph: binary symmetric adjacency with zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphSample {
    adj: Array2<u8>,
}

impl GraphSample {
    pub fn empty(n: usize) -> Self {
        Self {
            adj: Array2::zeros((n, n)),
        }
    }

    pub fn complete(n: usize) -> Self {
        let mut g = Self::empty(n);
        for i in 0..n {
            for j in 0..i {
                g.add_edge(i, j);
            }
        }
        g
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::empty(n);
        for &(i, j) in edges {
            if i == j {
                return Err(Error::Contract(format!("self-loop on node {i}")));
            }
            if i >= n || j >= n {
                return Err(Error::Contract(format!("edge ({i}, {j}) out of range for n = {n}")));
            }
            g.add_edge(i, j);
        }
        Ok(g)
    }

    /// Builds a graph from a 0/1 matrix, validating the simple-graph invariants.
    pub fn from_binary(m: &Array2<f64>) -> Result<Self> {
        let (r, c) = m.dim();
        if r != c {
            return Err(Error::Contract(format!("adjacency is {r}x{c}")));
        }
        let mut g = Self::empty(r);
        for i in 0..r {
            if m[[i, i]] != 0.0 {
                return Err(Error::Contract(format!("self-loop on node {i}")));
            }
            for j in 0..i {
                let (x, y) = (m[[i, j]], m[[j, i]]);
                if x != y || !(x == 0.0 || x == 1.0) {
                    return Err(Error::Contract(format!("entry ({i}, {j}) is not a symmetric 0/1 value")));
                }
                if x == 1.0 {
                    g.add_edge(i, j);
                }
            }
        }
        Ok(g)
    }

    pub fn add_edge(&mut self, i: usize, j: usize) {
        debug_assert_ne!(i, j);
        self.adj[[i, j]] = 1;
        self.adj[[j, i]] = 1;
    }

    pub fn n(&self) -> usize {
        self.adj.nrows()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[[i, j]] == 1
    }

    pub fn adjacency(&self) -> &Array2<u8> {
        &self.adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adj
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| v as usize).sum())
            .collect()
    }

    pub fn num_edges(&self) -> usize {
        self.degrees().iter().sum::<usize>() / 2
    }

    /// Edges as `(i, j)` with `i < j`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if self.adj[[i, j]] == 1 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// 0/1 adjacency as floats.
    pub fn binary(&self) -> Array2<f64> {
        self.adj.mapv(f64::from)
    }

    /// Signed scale: edges `+1`, non-edges `-1`, zero diagonal.
    pub fn signed(&self) -> Array2<f64> {
        let mut m = self.adj.mapv(|v| if v == 1 { 1.0 } else { -1.0 });
        m.diag_mut().fill(0.0);
        m
    }

    /// `P A P^T` where node `i` moves to position `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n();
        let mut g = Self::empty(n);
        for (i, j) in self.edges() {
            g.add_edge(perm[i], perm[j]);
        }
        g
    }
}

/// Parameters of the two-community generator.
#[derive(Debug, Clone, PartialEq)]
pub struct CommunityParams {
    /// Candidate total node counts; each must be even.
    pub sizes: Vec<usize>,
    pub p_intra: f64,
    pub p_inter: f64,
}

impl Default for CommunityParams {
    fn default() -> Self {
        Self {
            sizes: vec![12, 14, 16, 18, 20],
            p_intra: 0.7,
            p_inter: 0.05,
        }
    }
}

pub fn gen_community_small<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<GraphSample> {
    gen_community(count, &CommunityParams::default(), rng)
}

/// Two equal halves, each an ER graph, joined by independent cross edges.
pub fn gen_community<R: Rng + ?Sized>(
    count: usize,
    params: &CommunityParams,
    rng: &mut R,
) -> Vec<GraphSample> {
    assert!(!params.sizes.is_empty() && params.sizes.iter().all(|s| s % 2 == 0));
    (0..count)
        .map(|_| {
            let n = params.sizes[rng.random_range(0..params.sizes.len())];
            let half = n / 2;
            let mut g = GraphSample::empty(n);
            for i in 0..n {
                for j in 0..i {
                    let same = (i < half) == (j < half);
                    let p = if same { params.p_intra } else { params.p_inter };
                    if rng.random::<f64>() < p {
                        g.add_edge(i, j);
                    }
                }
            }
            g
        })
        .collect()
}

pub fn gen_er<R: Rng + ?Sized>(count: usize, n: usize, p: f64, rng: &mut R) -> Result<Vec<GraphSample>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain {
            what: "p",
            value: p,
            domain: "[0, 1]",
        });
    }
    Ok((0..count)
        .map(|_| {
            let mut g = GraphSample::empty(n);
            for i in 0..n {
                for j in 0..i {
                    if rng.random::<f64>() < p {
                        g.add_edge(i, j);
                    }
                }
            }
            g
        })
        .collect())
}

pub fn format_graphs(graphs: &[GraphSample]) -> String {
    let mut out = String::new();
    for (id, g) in graphs.iter().enumerate() {
        if id > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "graph {id} {}", g.n());
        for (i, j) in g.edges() {
            let _ = writeln!(out, "{i} {j}");
        }
    }
    out
}

pub fn write_graphs(path: impl AsRef<Path>, graphs: &[GraphSample]) -> Result<()> {
    fs::write(path, format_graphs(graphs))?;
    Ok(())
}

/// Parses the edge-list format. Duplicate edges collapse unless `strict`.
pub fn parse_graphs(text: &str, path: &Path, strict: bool) -> Result<Vec<GraphSample>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut graphs = Vec::new();
    let mut current: Option<(GraphSample, usize)> = None;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] == "graph" {
            if fields.len() != 3 {
                return Err(err(lineno, "expected `graph <id> <n>`".into()));
            }
            let n: usize = fields[2]
                .parse()
                .map_err(|_| err(lineno, format!("bad node count `{}`", fields[2])))?;
            if let Some((g, _)) = current.take() {
                graphs.push(g);
            }
            current = Some((GraphSample::empty(n), lineno));
            continue;
        }
        let Some((g, _)) = current.as_mut() else {
            return Err(err(lineno, "edge line before any `graph` header".into()));
        };
        if fields.len() != 2 {
            return Err(err(lineno, format!("expected `i j`, got `{line}`")));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| err(lineno, format!("bad node index `{s}`")))
        };
        let (i, j) = (parse(fields[0])?, parse(fields[1])?);
        if i == j {
            return Err(err(lineno, format!("self-loop on node {i}")));
        }
        if i >= g.n() || j >= g.n() {
            return Err(err(lineno, format!("edge ({i}, {j}) out of range for n = {}", g.n())));
        }
        if g.has_edge(i, j) && strict {
            return Err(err(lineno, format!("duplicate edge ({i}, {j})")));
        }
        g.add_edge(i, j);
    }
    if let Some((g, _)) = current {
        graphs.push(g);
    }
    Ok(graphs)
}

pub fn load_edge_lists(path: impl AsRef<Path>, strict: bool) -> Result<Vec<GraphSample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(crate::error::file_err(path))?;
    parse_graphs(&text, path, strict)
}

/// Empirical distribution of node counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCountDistribution {
    pub support: Vec<usize>,
    pub pmf: Vec<f64>,
}

impl NodeCountDistribution {
    pub fn new(support: Vec<usize>, pmf: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Empty("node count support"));
        }
        if support.len() != pmf.len() {
            return Err(Error::Contract("support and pmf lengths differ".into()));
        }
        let total: f64 = pmf.iter().sum();
        if pmf.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!("pmf must be nonnegative and sum to 1, sums to {total}")));
        }
        Ok(Self { support, pmf })
    }

    pub fn from_graphs(graphs: &[GraphSample]) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::Empty("graph list"));
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for g in graphs {
            *counts.entry(g.n()).or_default() += 1;
        }
        let total = graphs.len() as f64;
        let (support, pmf) = counts
            .into_iter()
            .map(|(n, c)| (n, c as f64 / total))
            .unzip();
        Self::new(support, pmf)
    }

    pub fn max(&self) -> usize {
        *self.support.iter().max().expect("non-empty support")
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<GraphSample>,
    pub val: Vec<GraphSample>,
    pub test: Vec<GraphSample>,
    pub node_counts: NodeCountDistribution,
}

/// Deterministic shuffled 80/20 train/test split; validation is the first 20% of train.
pub fn make_split(graphs: &[GraphSample], seed: u64) -> Result<DatasetSplit> {
    if graphs.len() < 5 {
        return Err(Error::Config(format!(
            "need at least 5 graphs to split, got {}",
            graphs.len()
        )));
    }
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (graphs.len() as f64 * 0.8).round() as usize;
    let n_val = (n_train as f64 * 0.2).round() as usize;
    let train: Vec<GraphSample> = order[..n_train].iter().map(|&i| graphs[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| graphs[i].clone()).collect();
    let val = train[..n_val].to_vec();
    let node_counts = NodeCountDistribution::from_graphs(&train)?;
    Ok(DatasetSplit {
        train,
        val,
        test,
        node_counts,
    })
}

/// Summary statistics written next to a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub seed: u64,
    pub count: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub mean_nodes: f64,
    pub max_edges: usize,
    pub mean_edges: f64,
    pub node_counts: NodeCountDistribution,
}

impl DatasetManifest {
    pub fn new(name: &str, seed: u64, graphs: &[GraphSample], split: &DatasetSplit) -> Self {
        let nodes: Vec<usize> = graphs.iter().map(GraphSample::n).collect();
        let edges: Vec<usize> = graphs.iter().map(GraphSample::num_edges).collect();
        let count = graphs.len();
        Self {
            name: name.to_string(),
            seed,
            count,
            train: split.train.len(),
            val: split.val.len(),
            test: split.test.len(),
            min_nodes: nodes.iter().copied().min().unwrap_or(0),
            max_nodes: nodes.iter().copied().max().unwrap_or(0),
            mean_nodes: nodes.iter().sum::<usize>() as f64 / count.max(1) as f64,
            max_edges: edges.iter().copied().max().unwrap_or(0),
            mean_edges: edges.iter().sum::<usize>() as f64 / count.max(1) as f64,
            node_counts: split.node_counts.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn community_sizes_and_degenerate_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gs = gen_community_small(200, &mut rng);
        assert!(gs.iter().all(|g| (12..=20).contains(&g.n()) && g.n() % 2 == 0));

        let params = CommunityParams {
            sizes: vec![8],
            p_intra: 1.0,
            p_inter: 0.0,
        };
        let g = &gen_community(1, &params, &mut rng)[0];
        assert_eq!(g.num_edges(), 2 * 6);
        assert!(g.has_edge(0, 3) && g.has_edge(4, 7) && !g.has_edge(0, 4));
    }

    #[test]
    fn er_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(gen_er(3, 6, 0.0, &mut rng).unwrap().iter().all(|g| g.num_edges() == 0));
        assert!(gen_er(3, 6, 1.0, &mut rng).unwrap().iter().all(|g| g.num_edges() == 15));
        assert!(gen_er(1, 3, 1.5, &mut rng).is_err());
    }

    #[test]
    fn round_trip_text() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut gs = gen_community_small(10, &mut rng);
        gs.push(GraphSample::empty(3));
        let text = format_graphs(&gs);
        let back = parse_graphs(&text, Path::new("mem"), true).unwrap();
        assert_eq!(gs, back);
    }

    #[test]
    fn rejects_self_loop_with_line_number() {
        let text = "graph 0 3\n0 1\n2 2\n";
        match parse_graphs(text, Path::new("x.txt"), false) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("self-loop"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_policy() {
        let text = "graph 0 3\n0 1\n1 0\n";
        let lax = parse_graphs(text, Path::new("x"), false).unwrap();
        assert_eq!(lax[0].num_edges(), 1);
        assert!(parse_graphs(text, Path::new("x"), true).is_err());
    }

    #[test]
    fn rejects_malformed() {
        assert!(parse_graphs("0 1\n", Path::new("x"), false).is_err());
        assert!(parse_graphs("graph 0 2\n0 5\n", Path::new("x"), false).is_err());
        assert!(parse_graphs("graph 0 two\n", Path::new("x"), false).is_err());
        assert!(parse_graphs("graph 0 2\n0 1 1\n", Path::new("x"), false).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gs = gen_community_small(100, &mut rng);
        let a = make_split(&gs, 7).unwrap();
        let b = make_split(&gs, 7).unwrap();
        assert_eq!((a.train.len(), a.test.len(), a.val.len()), (80, 20, 16));
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(&a.val[..], &a.train[..16]);
        let total: f64 = a.node_counts.pmf.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(make_split(&gs[..4], 0).is_err());
    }

    #[test]
    fn signed_and_binary_views() {
        let g = GraphSample::from_edges(3, &[(0, 1)]).unwrap();
        let s = g.signed();
        assert_eq!(s[[0, 1]], 1.0);
        assert_eq!(s[[0, 2]], -1.0);
        assert_eq!(s[[1, 1]], 0.0);
        assert_eq!(GraphSample::from_binary(&g.binary()).unwrap(), g);
        assert!(GraphSample::from_edges(2, &[(1, 1)]).is_err());
    }

    #[test]
    fn node_count_distribution_validation() {
        assert!(NodeCountDistribution::new(vec![], vec![]).is_err());
        assert!(NodeCountDistribution::new(vec![3], vec![0.5]).is_err());
        assert!(NodeCountDistribution::new(vec![3, 4], vec![0.25, 0.75]).is_ok());
    }
}
