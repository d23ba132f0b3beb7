//! Pairwise discrete MRFs over an explicit graph.
//!
//! Probabilities follow `p(x) ∝ exp(+E(x))`: a larger potential makes a
//! configuration more likely. Comparisons against tools using the
//! `exp(-E)` convention need the energies negated.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Probabilities below this are clamped inside logarithms only.
pub const LOG_FLOOR: f64 = 1e-12;

/// Largest joint state space the brute-force oracle will enumerate.
pub const ORACLE_LIMIT: f64 = 1e7;

/// Undirected graph with edges stored as `(s, t)`, `s < t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphTopology {
    n_vertices: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl GraphTopology {
    pub fn new(n_vertices: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        let mut adjacency = vec![Vec::new(); n_vertices];
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        for (e, &(s, t)) in edges.iter().enumerate() {
            if s == t {
                return Err(Error::InvalidTopology(format!("self-loop at vertex {s}")));
            }
            if s > t {
                return Err(Error::InvalidTopology(format!(
                    "edge {e} = ({s}, {t}) must list the lower endpoint first"
                )));
            }
            if t >= n_vertices {
                return Err(Error::InvalidTopology(format!(
                    "edge {e} = ({s}, {t}) references a vertex outside 0..{n_vertices}"
                )));
            }
            if !seen.insert((s, t)) {
                return Err(Error::InvalidTopology(format!("duplicate edge ({s}, {t})")));
            }
            adjacency[s].push((t, e));
            adjacency[t].push((s, e));
        }
        Ok(Self {
            n_vertices,
            edges,
            adjacency,
        })
    }

    /// 4-connected `height × width` grid in row-major vertex order.
    ///
    /// Edges are listed pixel by pixel: the right neighbour, then the one below.
    pub fn grid(height: usize, width: usize) -> Self {
        let n = height * width;
        let mut edges = Vec::with_capacity(2 * n);
        for r in 0..height {
            for c in 0..width {
                let s = r * width + c;
                if c + 1 < width {
                    edges.push((s, s + 1));
                }
                if r + 1 < height {
                    edges.push((s, s + width));
                }
            }
        }
        Self::new(n, edges).expect("grid construction yields a valid topology")
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// `(neighbor, edge index)` pairs incident to `s`.
    pub fn neighbors(&self, s: usize) -> &[(usize, usize)] {
        &self.adjacency[s]
    }
}

/// A discrete pairwise MRF with `k` labels per vertex.
///
/// Edge tables are `k × k`, row-major, with rows indexed by the label of the
/// lower-numbered endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseMrf {
    topology: Arc<GraphTopology>,
    k: usize,
    unary: Vec<f64>,
    pairwise: Vec<f64>,
}

impl PairwiseMrf {
    pub fn new(
        topology: Arc<GraphTopology>,
        k: usize,
        unary: Vec<f64>,
        pairwise: Vec<f64>,
    ) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!("label count {k} < 2")));
        }
        let n = topology.n_vertices();
        if unary.len() != n * k {
            return Err(Error::ShapeMismatch(format!(
                "unary table has {} entries, expected {}",
                unary.len(),
                n * k
            )));
        }
        if pairwise.len() != topology.n_edges() * k * k {
            return Err(Error::ShapeMismatch(format!(
                "pairwise tables have {} entries, expected {}",
                pairwise.len(),
                topology.n_edges() * k * k
            )));
        }
        if let Some(v) = unary.iter().chain(&pairwise).find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("potential entry {v}")));
        }
        Ok(Self {
            topology,
            k,
            unary,
            pairwise,
        })
    }

    /// All-zero potentials on `topology`.
    pub fn zeros(topology: Arc<GraphTopology>, k: usize) -> Result<Self> {
        let unary = vec![0.0; topology.n_vertices() * k];
        let pairwise = vec![0.0; topology.n_edges() * k * k];
        Self::new(topology, k, unary, pairwise)
    }

    pub fn topology(&self) -> &GraphTopology {
        &self.topology
    }

    pub fn shared_topology(&self) -> &Arc<GraphTopology> {
        &self.topology
    }

    pub fn n_vertices(&self) -> usize {
        self.topology.n_vertices()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn unary(&self, s: usize) -> &[f64] {
        &self.unary[s * self.k..(s + 1) * self.k]
    }

    pub fn unary_table(&self) -> &[f64] {
        &self.unary
    }

    pub fn pairwise(&self, e: usize) -> &[f64] {
        let kk = self.k * self.k;
        &self.pairwise[e * kk..(e + 1) * kk]
    }

    pub fn pairwise_table(&self) -> &[f64] {
        &self.pairwise
    }

    /// `f_st(x_s, x_t)` for edge `e`, where `x_lo` labels the lower endpoint.
    pub fn pairwise_value(&self, e: usize, x_lo: usize, x_hi: usize) -> f64 {
        self.pairwise(e)[x_lo * self.k + x_hi]
    }

    fn check_assignment(&self, x: &Assignment) -> Result<()> {
        if x.len() != self.n_vertices() {
            return Err(Error::ShapeMismatch(format!(
                "assignment has {} labels for {} vertices",
                x.len(),
                self.n_vertices()
            )));
        }
        if let Some(&l) = x.labels().iter().find(|&&l| l >= self.k) {
            return Err(Error::ShapeMismatch(format!(
                "label {l} outside 0..{}",
                self.k
            )));
        }
        Ok(())
    }

    fn check_distribution(&self, q: &FactorialDistribution) -> Result<()> {
        if q.k() != self.k || q.n_vertices() != self.n_vertices() {
            return Err(Error::ShapeMismatch(format!(
                "distribution is {}×{}, model is {}×{}",
                q.n_vertices(),
                q.k(),
                self.n_vertices(),
                self.k
            )));
        }
        Ok(())
    }

    /// The exponent of the closed-form site update: unary potential plus the
    /// expected pairwise potential under the neighbours' current marginals.
    ///
    /// `q` is the flat `n × k` marginal table; the result is written to `out`.
    pub fn activation(&self, q: &[f64], s: usize, out: &mut [f64]) {
        let k = self.k;
        out.copy_from_slice(self.unary(s));
        for &(t, e) in self.topology.neighbors(s) {
            let table = self.pairwise(e);
            let qt = &q[t * k..(t + 1) * k];
            if s < t {
                for (xs, a) in out.iter_mut().enumerate() {
                    let row = &table[xs * k..(xs + 1) * k];
                    *a += row.iter().zip(qt).map(|(f, p)| f * p).sum::<f64>();
                }
            } else {
                for (xs, a) in out.iter_mut().enumerate() {
                    *a += (0..k).map(|xt| table[xt * k + xs] * qt[xt]).sum::<f64>();
                }
            }
        }
    }
}

/// Per-vertex label.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Assignment(Vec<usize>);

impl Assignment {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }
}

impl From<Vec<usize>> for Assignment {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

/// Fully factorized distribution `q(x) = Π_s q_s(x_s)`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorialDistribution {
    k: usize,
    probs: Vec<f64>,
}

impl FactorialDistribution {
    /// Validates that every row is a probability vector (sum within 1e-9).
    pub fn new(k: usize, probs: Vec<f64>) -> Result<Self> {
        if k == 0 || !probs.len().is_multiple_of(k) {
            return Err(Error::ShapeMismatch(format!(
                "{} probabilities do not form rows of length {k}",
                probs.len()
            )));
        }
        for (s, row) in probs.chunks_exact(k).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidDistribution(format!(
                    "row {s} has an entry outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidDistribution(format!("row {s} sums to {sum}")));
            }
        }
        Ok(Self { k, probs })
    }

    pub fn uniform(n_vertices: usize, k: usize) -> Self {
        Self {
            k,
            probs: vec![1.0 / k as f64; n_vertices * k],
        }
    }

    pub(crate) fn from_raw(k: usize, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len() % k, 0);
        Self { k, probs }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_vertices(&self) -> usize {
        self.probs.len() / self.k
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.k..(s + 1) * self.k]
    }

    pub(crate) fn row_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.probs[s * self.k..(s + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.probs.chunks_exact(self.k)
    }

    /// Largest absolute per-entry difference to `other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Numerically stable softmax of `a` into `out`.
pub(crate) fn softmax_into(a: &[f64], out: &mut [f64]) {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(a) {
        *o = (v - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `E(x) = Σ_s f_s(x_s) + Σ_(s,t) f_st(x_s, x_t)`.
pub fn energy(mrf: &PairwiseMrf, x: &Assignment) -> Result<f64> {
    mrf.check_assignment(x)?;
    Ok(energy_unchecked(mrf, x.labels()))
}

fn energy_unchecked(mrf: &PairwiseMrf, x: &[usize]) -> f64 {
    let unary: f64 = x.iter().enumerate().map(|(s, &l)| mrf.unary(s)[l]).sum();
    let pairwise: f64 = mrf
        .topology
        .edges()
        .iter()
        .enumerate()
        .map(|(e, &(s, t))| mrf.pairwise_value(e, x[s], x[t]))
        .sum();
    unary + pairwise
}

/// Independent per-vertex softmax of the unary potentials.
pub fn softmax_init(mrf: &PairwiseMrf) -> FactorialDistribution {
    let k = mrf.k();
    let mut probs = vec![0.0; mrf.n_vertices() * k];
    for (s, out) in probs.chunks_exact_mut(k).enumerate() {
        softmax_into(mrf.unary(s), out);
    }
    FactorialDistribution::from_raw(k, probs)
}

/// `KL(q‖p)` without the log-partition constant:
/// `Σ q log q − Σ q f_s − Σ q_s q_t f_st`.
pub fn unnormalized_kl(q: &FactorialDistribution, mrf: &PairwiseMrf) -> Result<f64> {
    mrf.check_distribution(q)?;
    Ok(unnormalized_kl_unchecked(q, mrf))
}

pub(crate) fn unnormalized_kl_unchecked(q: &FactorialDistribution, mrf: &PairwiseMrf) -> f64 {
    let k = mrf.k();
    let mut total = 0.0;
    for (s, row) in q.rows().enumerate() {
        let f = mrf.unary(s);
        for (p, fs) in row.iter().zip(f) {
            total += p * p.max(LOG_FLOOR).ln() - p * fs;
        }
    }
    for (e, &(s, t)) in mrf.topology().edges().iter().enumerate() {
        let table = mrf.pairwise(e);
        let (qs, qt) = (q.row(s), q.row(t));
        for xs in 0..k {
            for xt in 0..k {
                total -= qs[xs] * qt[xt] * table[xs * k + xt];
            }
        }
    }
    total
}

fn check_guard(mrf: &PairwiseMrf) -> Result<()> {
    let states = (mrf.k() as f64).powi(mrf.n_vertices() as i32);
    if states > ORACLE_LIMIT {
        return Err(Error::OracleGuard {
            states,
            limit: ORACLE_LIMIT,
        });
    }
    Ok(())
}

/// Visits every joint assignment in mixed-radix order.
fn for_each_assignment(n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    let mut x = vec![0usize; n];
    loop {
        visit(&x);
        let mut i = 0;
        loop {
            if i == n {
                return;
            }
            x[i] += 1;
            if x[i] < k {
                break;
            }
            x[i] = 0;
            i += 1;
        }
    }
}

/// `log Σ_x exp(E(x))` by exhaustive enumeration.
pub fn brute_force_log_partition(mrf: &PairwiseMrf) -> Result<f64> {
    check_guard(mrf)?;
    let mut energies = Vec::new();
    for_each_assignment(mrf.n_vertices(), mrf.k(), |x| {
        energies.push(energy_unchecked(mrf, x))
    });
    Ok(log_sum_exp(&energies))
}

/// Exact marginals from the brute-force oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactMarginals {
    /// `n × k`, row-major.
    pub unary: Vec<f64>,
    /// `n_edges × k × k`, same orientation as the edge tables.
    pub pairwise: Vec<f64>,
    pub log_partition: f64,
}

impl ExactMarginals {
    pub fn as_distribution(&self, k: usize) -> FactorialDistribution {
        FactorialDistribution::from_raw(k, self.unary.clone())
    }
}

pub fn brute_force_marginals(mrf: &PairwiseMrf) -> Result<ExactMarginals> {
    let log_z = brute_force_log_partition(mrf)?;
    let (n, k) = (mrf.n_vertices(), mrf.k());
    let edges = mrf.topology().edges();
    let mut unary = vec![0.0; n * k];
    let mut pairwise = vec![0.0; edges.len() * k * k];
    for_each_assignment(n, k, |x| {
        let p = (energy_unchecked(mrf, x) - log_z).exp();
        for (s, &l) in x.iter().enumerate() {
            unary[s * k + l] += p;
        }
        for (e, &(s, t)) in edges.iter().enumerate() {
            pairwise[e * k * k + x[s] * k + x[t]] += p;
        }
    });
    Ok(ExactMarginals {
        unary,
        pairwise,
        log_partition: log_z,
    })
}

/// `KL(q‖p)` including the log-partition constant.
pub fn exact_kl(q: &FactorialDistribution, mrf: &PairwiseMrf) -> Result<f64> {
    let partial = unnormalized_kl(q, mrf)?;
    Ok(partial + brute_force_log_partition(mrf)?)
}
