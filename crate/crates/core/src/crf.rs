//! Binary grid CRF with linear 5×5-window unaries and Potts pairwise terms.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanfield::{self, Schedule};
use crate::mrf::{softmax_init, Assignment, FactorialDistribution, GraphTopology, PairwiseMrf};

pub const WINDOW: usize = 5;
pub const N_FEATURES: usize = WINDOW * WINDOW + 1;
pub const N_PARAMS: usize = N_FEATURES + 2;

/// Noisy observation, row-major, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl InputImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {height}×{width} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input pixel".into()));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }
}

/// `θ = (w, p_h, p_v)`: 26 unary weights (window, then bias) and two Potts
/// weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    pub w: [f64; N_FEATURES],
    pub p_h: f64,
    pub p_v: f64,
}

impl CrfParams {
    pub fn zeros() -> Self {
        Self {
            w: [0.0; N_FEATURES],
            p_h: 0.0,
            p_v: 0.0,
        }
    }

    /// Ones everywhere except the bias weight, which is `−25/2` so that
    /// the unary is a majority vote over the window.
    pub fn theta0() -> Self {
        let mut w = [1.0; N_FEATURES];
        w[N_FEATURES - 1] = -((WINDOW * WINDOW) as f64) / 2.0;
        Self {
            w,
            p_h: 1.0,
            p_v: 1.0,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.w.to_vec();
        v.push(self.p_h);
        v.push(self.p_v);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != N_PARAMS {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {N_PARAMS} CRF parameters",
                v.len()
            )));
        }
        let mut w = [0.0; N_FEATURES];
        w.copy_from_slice(&v[..N_FEATURES]);
        Ok(Self {
            w,
            p_h: v[N_FEATURES],
            p_v: v[N_FEATURES + 1],
        })
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|x| x.is_finite()) && self.p_h.is_finite() && self.p_v.is_finite()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += b;
        }
        self.p_h += other.p_h;
        self.p_v += other.p_v;
    }

    pub fn scale(&mut self, factor: f64) {
        self.w.iter_mut().for_each(|x| *x *= factor);
        self.p_h *= factor;
        self.p_v *= factor;
    }

    pub fn norm(&self) -> f64 {
        self.to_vec().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let params: Self =
            serde_json::from_str(s).map_err(|e| Error::parse("CRF parameters", e.to_string()))?;
        if !params.is_finite() {
            return Err(Error::parse("CRF parameters", "non-finite value"));
        }
        Ok(params)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("finite parameters serialize")
    }
}

/// `φ(y, s)`: the 5×5 window around `(r, c)` in raster order, zero outside
/// the image, followed by a constant 1.
pub fn extract_features(y: &InputImage, r: usize, c: usize) -> [f64; N_FEATURES] {
    let mut phi = [0.0; N_FEATURES];
    let half = (WINDOW / 2) as isize;
    let (h, w) = (y.height as isize, y.width as isize);
    for dr in -half..=half {
        for dc in -half..=half {
            let (rr, cc) = (r as isize + dr, c as isize + dc);
            if (0..h).contains(&rr) && (0..w).contains(&cc) {
                let i = ((dr + half) * WINDOW as isize + dc + half) as usize;
                phi[i] = y.get(rr as usize, cc as usize);
            }
        }
    }
    phi[N_FEATURES - 1] = 1.0;
    phi
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Horizontal,
    Vertical,
}

/// 4-connected grid with each edge tagged by orientation.
#[derive(Debug, Clone)]
pub struct Grid {
    height: usize,
    width: usize,
    topology: Arc<GraphTopology>,
    kinds: Vec<EdgeKind>,
}

impl Grid {
    pub fn new(height: usize, width: usize) -> Self {
        let topology = Arc::new(GraphTopology::grid(height, width));
        let kinds = topology
            .edges()
            .iter()
            .map(|&(s, t)| {
                if t == s + 1 && s / width == t / width {
                    EdgeKind::Horizontal
                } else {
                    EdgeKind::Vertical
                }
            })
            .collect();
        Self {
            height,
            width,
            topology,
            kinds,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn topology(&self) -> &Arc<GraphTopology> {
        &self.topology
    }

    pub fn edge_kinds(&self) -> &[EdgeKind] {
        &self.kinds
    }
}

/// An input image with its features and grid precomputed, ready to be
/// turned into potentials for any parameter setting.
#[derive(Debug, Clone)]
pub struct CrfInstance {
    grid: Arc<Grid>,
    features: Vec<[f64; N_FEATURES]>,
}

impl CrfInstance {
    pub fn new(y: &InputImage) -> Self {
        Self::with_grid(y, Arc::new(Grid::new(y.height, y.width)))
    }

    /// Reuses `grid`, which must match the image shape.
    pub fn with_grid(y: &InputImage, grid: Arc<Grid>) -> Self {
        assert_eq!((grid.height, grid.width), (y.height, y.width));
        let features = (0..y.height)
            .flat_map(|r| (0..y.width).map(move |c| (r, c)))
            .map(|(r, c)| extract_features(y, r, c))
            .collect();
        Self { grid, features }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n_pixels(&self) -> usize {
        self.features.len()
    }

    pub fn features(&self, s: usize) -> &[f64; N_FEATURES] {
        &self.features[s]
    }

    /// Unary rows `(0, wᵀφ)` and Potts tables `p·I₂`.
    pub fn build_mrf(&self, theta: &CrfParams) -> PairwiseMrf {
        let mut unary = Vec::with_capacity(2 * self.features.len());
        for phi in &self.features {
            let score: f64 = theta.w.iter().zip(phi).map(|(w, f)| w * f).sum();
            unary.push(0.0);
            unary.push(score);
        }
        let mut pairwise = Vec::with_capacity(4 * self.grid.kinds.len());
        for kind in &self.grid.kinds {
            let p = match kind {
                EdgeKind::Horizontal => theta.p_h,
                EdgeKind::Vertical => theta.p_v,
            };
            pairwise.extend_from_slice(&[p, 0.0, 0.0, p]);
        }
        PairwiseMrf::new(self.grid.topology.clone(), 2, unary, pairwise)
            .expect("CRF potentials match the grid")
    }

    /// Chains gradients on the potential tables back to `θ`.
    ///
    /// `unary_grad` is `n × 2`, `pairwise_grad` is `n_edges × 4`.
    pub fn pullback(&self, unary_grad: &[f64], pairwise_grad: &[f64]) -> CrfParams {
        let mut g = CrfParams::zeros();
        for (phi, row) in self.features.iter().zip(unary_grad.chunks_exact(2)) {
            let gs = row[1];
            if gs != 0.0 {
                for (gw, f) in g.w.iter_mut().zip(phi) {
                    *gw += gs * f;
                }
            }
        }
        for (kind, table) in self.grid.kinds.iter().zip(pairwise_grad.chunks_exact(4)) {
            let diag = table[0] + table[3];
            match kind {
                EdgeKind::Horizontal => g.p_h += diag,
                EdgeKind::Vertical => g.p_v += diag,
            }
        }
        g
    }
}

pub fn build_mrf(y: &InputImage, theta: &CrfParams) -> PairwiseMrf {
    CrfInstance::new(y).build_mrf(theta)
}

/// Gradient of the conditional log-likelihood with posterior expectations
/// replaced by the factorized `q`.
pub fn cl_gradient(
    instance: &CrfInstance,
    label: &Assignment,
    q: &FactorialDistribution,
) -> Result<CrfParams> {
    let n = instance.n_pixels();
    if label.len() != n || q.n_vertices() != n || q.k() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "label/marginals do not match a {n}-pixel image"
        )));
    }
    let x = label.labels();
    let mut g = CrfParams::zeros();
    for (s, &xs) in x.iter().enumerate() {
        let resid = (xs == 1) as u8 as f64 - q.row(s)[1];
        for (gw, f) in g.w.iter_mut().zip(instance.features(s)) {
            *gw += f * resid;
        }
    }
    let grid = instance.grid();
    for (&(s, t), kind) in grid.topology().edges().iter().zip(grid.edge_kinds()) {
        let (qs, qt) = (q.row(s), q.row(t));
        let agree = (x[s] == x[t]) as u8 as f64 - (qs[0] * qt[0] + qs[1] * qt[1]);
        match kind {
            EdgeKind::Horizontal => g.p_h += agree,
            EdgeKind::Vertical => g.p_v += agree,
        }
    }
    Ok(g)
}

/// Per-pixel argmax with ties resolved to the smaller label.
pub fn decode(q: &FactorialDistribution) -> Assignment {
    q.rows()
        .map(|row| {
            let mut best = 0;
            for (l, &p) in row.iter().enumerate().skip(1) {
                if p > row[best] {
                    best = l;
                }
            }
            best
        })
        .collect::<Vec<_>>()
        .into()
}

/// Mean field from the unary softmax, the standard inference path for the CRF.
pub fn infer(
    instance: &CrfInstance,
    theta: &CrfParams,
    iterations: usize,
    schedule: &Schedule,
) -> Result<FactorialDistribution> {
    let mrf = instance.build_mrf(theta);
    let q0 = softmax_init(&mrf);
    Ok(meanfield::run(&mrf, &q0, iterations, schedule, false)?.q)
}

#[derive(Debug, Clone)]
pub struct BaselineConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub mf_iters: usize,
    pub schedule: crate::meanfield::ScheduleKind,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            learning_rate: 1e-5,
            mf_iters: 30,
            schedule: Default::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BaselineStep {
    pub step: usize,
    /// Mean training pixel accuracy of the mean-field decode at this step.
    pub accuracy: f64,
    pub grad_norm: f64,
}

/// Full-batch gradient ascent on the mean-field approximation of the
/// conditional log-likelihood.
///
/// `on_step` sees one record per evaluated parameter setting, `steps + 1`
/// in total; the last record is for the returned parameters.
pub fn train_baseline(
    train: &[(CrfInstance, Assignment)],
    init: CrfParams,
    config: &BaselineConfig,
    mut on_step: impl FnMut(&BaselineStep),
) -> Result<CrfParams> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut theta = init;
    for step in 0..=config.steps {
        let per_image: Vec<(CrfParams, f64)> = train
            .par_iter()
            .map(|(inst, label)| {
                let grid = inst.grid();
                let schedule = config.schedule.for_grid(grid.height(), grid.width());
                let q = infer(inst, &theta, config.mf_iters, &schedule)?;
                let acc = crate::data::agreement(decode(&q).labels(), label.labels());
                Ok((cl_gradient(inst, label, &q)?, acc))
            })
            .collect::<Result<_>>()?;
        let mut grad = CrfParams::zeros();
        let mut acc = 0.0;
        for (g, a) in &per_image {
            grad.add_assign(g);
            acc += a;
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite(format!(
                "likelihood gradient at step {step}"
            )));
        }
        on_step(&BaselineStep {
            step,
            accuracy: acc / train.len() as f64,
            grad_norm: grad.norm(),
        });
        if step < config.steps {
            grad.scale(config.learning_rate);
            theta.add_assign(&grad);
        }
    }
    Ok(theta)
}
