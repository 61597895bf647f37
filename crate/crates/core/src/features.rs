//! Structure and position features of a quantized graph.
//!
//! All features are derived from the random-walk operator `RW = A_bar D^-1`:
//! landing probabilities (the diagonals of `RW^k`) act as node positions, and the
//! first `k` with `RW^k_ij > 0` gives the shortest-path class of a node pair.

use ndarray::{Array2, Array3, Axis};

/// Column-normalized random-walk operator with its number of walk steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomWalkOperator {
    pub rw: Array2<f64>,
    pub steps: usize,
}

/// Shortest-path classes of every node pair.
///
/// Class `k in 1..=steps` is the first walk length reaching the pair; class
/// `steps + 1` marks unreachable pairs and the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdFeature {
    pub classes: Array2<usize>,
    pub steps: usize,
}

impl SpdFeature {
    pub fn num_classes(&self) -> usize {
        self.steps + 1
    }

    /// Dense `n x n x (steps + 1)` onehot encoding.
    pub fn onehot(&self) -> Array3<f64> {
        let n = self.classes.nrows();
        let mut out = Array3::zeros((n, n, self.num_classes()));
        for ((i, j), &c) in self.classes.indexed_iter() {
            out[[i, j, c - 1]] = 1.0;
        }
        out
    }
}

/// Landing probabilities and shortest-path classes extracted in one pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFeatures {
    /// `n x steps`, entry `[i, k]` is `(RW^(k+1))_ii`.
    pub landing: Array2<f64>,
    pub spd: SpdFeature,
}

pub fn degrees(a_bar: &Array2<f64>) -> Vec<usize> {
    a_bar
        .axis_iter(Axis(0))
        .map(|row| row.iter().filter(|&&v| v > 0.0).count())
        .collect()
}

/// `RW = A_bar D^-1`; columns of isolated nodes are zero.
pub fn random_walk_operator(a_bar: &Array2<f64>, steps: usize) -> RandomWalkOperator {
    let deg = degrees(a_bar);
    let n = a_bar.nrows();
    let mut rw = Array2::zeros((n, n));
    for j in 0..n {
        if deg[j] == 0 {
            continue;
        }
        let inv = 1.0 / deg[j] as f64;
        for i in 0..n {
            if a_bar[[i, j]] > 0.0 {
                rw[[i, j]] = inv;
            }
        }
    }
    RandomWalkOperator { rw, steps }
}

/// Iterates `RW^k` for `k = 1..=steps`, handing each power to `visit`.
fn for_each_power(op: &RandomWalkOperator, mut visit: impl FnMut(usize, &Array2<f64>)) {
    if op.steps == 0 {
        return;
    }
    let mut power = op.rw.clone();
    visit(1, &power);
    for k in 2..=op.steps {
        power = power.dot(&op.rw);
        visit(k, &power);
    }
}

pub fn landing_probabilities(op: &RandomWalkOperator) -> Array2<f64> {
    let n = op.rw.nrows();
    let mut p = Array2::zeros((n, op.steps));
    for_each_power(op, |k, m| {
        for i in 0..n {
            p[[i, k - 1]] = m[[i, i]];
        }
    });
    p
}

pub fn spd_onehot(op: &RandomWalkOperator) -> SpdFeature {
    extract_from_operator(op).spd
}

fn extract_from_operator(op: &RandomWalkOperator) -> GraphFeatures {
    let n = op.rw.nrows();
    let unreachable = op.steps + 1;
    let mut classes = Array2::from_elem((n, n), unreachable);
    let mut landing = Array2::zeros((n, op.steps));
    for_each_power(op, |k, m| {
        for i in 0..n {
            landing[[i, k - 1]] = m[[i, i]];
            for j in 0..n {
                if i != j && classes[[i, j]] == unreachable && m[[i, j]] > 0.0 {
                    classes[[i, j]] = k;
                }
            }
        }
    });
    GraphFeatures {
        landing,
        spd: SpdFeature {
            classes,
            steps: op.steps,
        },
    }
}

pub fn extract(a_bar: &Array2<f64>, steps: usize) -> GraphFeatures {
    extract_from_operator(&random_walk_operator(a_bar, steps))
}

/// Row `i` is the onehot of `min(deg(i), max_degree)`.
pub fn degree_onehot(a_bar: &Array2<f64>, max_degree: usize) -> Array2<f64> {
    let deg = degrees(a_bar);
    let mut out = Array2::zeros((deg.len(), max_degree + 1));
    for (i, d) in deg.into_iter().enumerate() {
        out[[i, d.min(max_degree)]] = 1.0;
    }
    out
}

/// Pairs `(i, j)` with `i < j` whose unit-rescaled value `(A + 1) / 2` exceeds `gamma`.
pub fn edge_set(a: &Array2<f64>, gamma: f64, node_mask: &[bool]) -> Vec<(usize, usize)> {
    let n = a.nrows();
    let live = |i: usize| node_mask.get(i).copied().unwrap_or(true);
    let mut out = Vec::new();
    for i in 0..n {
        if !live(i) {
            continue;
        }
        for j in (i + 1)..n {
            if live(j) && (a[[i, j]] + 1.0) * 0.5 > gamma {
                out.push((i, j));
            }
        }
    }
    out
}
