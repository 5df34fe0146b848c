//! Topological branch: k-NN sample graphs and two mean-aggregation
//! GraphSAGE layers feeding a per-band classification head.

use std::cmp::Ordering;
use std::rc::Rc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::kernels;
use crate::params::{Dense, ParamStore};
use crate::tape::{Tape, Var};

pub const SAGE_WIDTHS: [usize; 2] = [64, 32];
pub const DEFAULT_K: usize = 10;

/// Neighbor lists over a node set. Self-loops are never stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BandGraph {
    neighbors: Vec<Vec<usize>>,
}

impl BandGraph {
    pub fn from_neighbors(neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        for (v, nb) in neighbors.iter().enumerate() {
            if nb.iter().any(|&u| u == v || u >= n) {
                return Err(Error::InvalidValue(format!("node {} has a self-loop or out-of-range neighbor", v)));
            }
        }
        Ok(Self { neighbors })
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn lists(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_symmetric(&self) -> bool {
        self.neighbors
            .iter()
            .enumerate()
            .all(|(v, nb)| nb.iter().all(|&u| self.neighbors[u].binary_search(&v).is_ok()))
    }

    /// Adjacency restricted to `nodes`, re-indexed by position in `nodes`.
    pub fn induced(&self, nodes: &[usize]) -> Vec<Vec<usize>> {
        let mut local = vec![usize::MAX; self.len()];
        for (i, &v) in nodes.iter().enumerate() {
            local[v] = i;
        }
        nodes
            .iter()
            .map(|&v| {
                let mut nb: Vec<usize> = self.neighbors[v]
                    .iter()
                    .map(|&u| local[u])
                    .filter(|&u| u != usize::MAX)
                    .collect();
                nb.sort_unstable();
                nb
            })
            .collect()
    }

    /// Keeps at most `max` uniformly chosen neighbors per node. The result
    /// is generally not symmetric.
    pub fn sample_neighbors(&self, max: usize, seed: u64) -> BandGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let neighbors = self
            .neighbors
            .iter()
            .map(|nb| {
                if nb.len() <= max {
                    return nb.clone();
                }
                let mut pick: Vec<usize> = index::sample(&mut rng, nb.len(), max).into_iter().map(|i| nb[i]).collect();
                pick.sort_unstable();
                pick
            })
            .collect();
        BandGraph { neighbors }
    }
}

/// k-nearest-neighbor graph under cosine similarity over the rows of the
/// `[n, width]` matrix `features`, symmetrized by union. Equal similarities
/// prefer the lower index. A zero row has no defined similarity: it links
/// to the `k` lowest-index other nodes and is never chosen by others.
pub fn build_graph(features: &[f64], width: usize, k: usize) -> Result<BandGraph> {
    if width == 0 || !features.len().is_multiple_of(width) {
        return Err(contract("build_graph", "feature buffer is not a whole number of rows"));
    }
    let n = features.len() / width;
    if n < k + 1 {
        return Err(Error::InvalidValue(format!("{} nodes cannot each have {} neighbors", n, k)));
    }
    let mut unit = features.to_vec();
    let mut zero = vec![false; n];
    for (v, row) in unit.chunks_mut(width).enumerate() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            zero[v] = true;
            row.iter_mut().for_each(|x| *x = 0.0);
            log::warn!("graph node {} has a zero-norm feature; linking to lowest-index peers", v);
        } else {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }

    let by_score = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
        b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
    };
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    const BLOCK: usize = 256;
    let mut sims = vec![0.0; BLOCK * n];
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for start in (0..n).step_by(BLOCK) {
        let rows = BLOCK.min(n - start);
        // sims[rows, n] = unit[start.., :] * unit^T
        kernels::gemm(rows, width, n, &unit[start * width..], width, 1, &unit, 1, width, &mut sims, 0.0);
        for r in 0..rows {
            let v = start + r;
            if zero[v] {
                adj[v] = (0..n).filter(|&u| u != v).take(k).collect();
                continue;
            }
            cand.clear();
            cand.extend(
                (0..n)
                    .filter(|&u| u != v)
                    .map(|u| (if zero[u] { f64::NEG_INFINITY } else { sims[r * n + u] }, u)),
            );
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, by_score);
                cand.truncate(k);
            }
            adj[v] = cand.iter().map(|&(_, u)| u).collect();
        }
    }
    let mut sym: Vec<Vec<usize>> = adj.clone();
    for (v, nb) in adj.iter().enumerate() {
        for &u in nb {
            sym[u].push(v);
        }
    }
    for nb in &mut sym {
        nb.sort_unstable();
        nb.dedup();
    }
    Ok(BandGraph { neighbors: sym })
}

/// `relu(W * mean(h_v, h_u for u in N(v)))` for every node.
pub fn sage_layer<'t>(tape: &'t Tape, neighbors: Rc<Vec<Vec<usize>>>, h: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let agg = tape.neighbor_mean(h, neighbors)?;
    Ok(tape.relu(tape.linear(agg, w, None)?))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TpcParams {
    pub sage1: Dense,
    pub sage2: Dense,
    pub head: Dense,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopoNet {
    pub heads: Vec<TpcParams>,
}

pub struct TpcOut<'t> {
    pub g1: Var<'t>,
    pub g2: Var<'t>,
    pub logits: Var<'t>,
    pub probs: Var<'t>,
}

impl TopoNet {
    pub fn new(store: &mut ParamStore, bands: usize, din: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let heads = (0..bands)
            .map(|k| TpcParams {
                sage1: Dense::new(store, &format!("tpc.{k}.sage1"), din, SAGE_WIDTHS[0], false, rng),
                sage2: Dense::new(store, &format!("tpc.{k}.sage2"), SAGE_WIDTHS[0], SAGE_WIDTHS[1], false, rng),
                head: Dense::new(store, &format!("tpc.{k}.fc"), SAGE_WIDTHS[1], classes, true, rng),
            })
            .collect();
        Self { heads }
    }

    /// Two sage layers, FC and softmax over the `[N, D]` node features.
    pub fn tpc_forward<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        band: usize,
        neighbors: Rc<Vec<Vec<usize>>>,
        x: Var<'t>,
    ) -> Result<TpcOut<'t>> {
        let params = self
            .heads
            .get(band)
            .ok_or_else(|| contract("tpc_forward", format!("no topology head for band {}", band)))?;
        let g1 = sage_layer(tape, neighbors.clone(), x, p[params.sage1.weight])?;
        let g2 = sage_layer(tape, neighbors, g1, p[params.sage2.weight])?;
        let logits = params.head.forward(tape, p, g2)?;
        let probs = tape.softmax(logits)?;
        Ok(TpcOut { g1, g2, logits, probs })
    }
}
