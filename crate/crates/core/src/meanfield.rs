//! Coordinate-ascent mean field under explicit update schedules.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mrf::{softmax_into, unnormalized_kl_unchecked, FactorialDistribution, PairwiseMrf};

/// Order in which sites are refreshed during one sweep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Schedule {
    /// Each update sees every earlier update of the same sweep.
    Sequential(Vec<usize>),
    /// Sites inside a block all read the pre-block marginals; blocks run in order.
    BlockParallel(Vec<Vec<usize>>),
}

impl Schedule {
    /// Row-major sequential order over a grid (or any graph).
    pub fn raster(n_vertices: usize) -> Self {
        Schedule::Sequential((0..n_vertices).collect())
    }

    /// Two blocks split by the parity of `row + col`, even cells first.
    pub fn checkerboard(height: usize, width: usize) -> Self {
        let mut black = Vec::with_capacity(height * width / 2 + 1);
        let mut white = Vec::with_capacity(height * width / 2 + 1);
        for r in 0..height {
            for c in 0..width {
                let s = r * width + c;
                if (r + c) % 2 == 0 {
                    black.push(s);
                } else {
                    white.push(s);
                }
            }
        }
        Schedule::BlockParallel(vec![black, white])
    }

    /// Checks that every vertex of an `n_vertices` graph appears exactly once.
    pub fn validate(&self, n_vertices: usize) -> Result<()> {
        let mut seen = vec![false; n_vertices];
        let mut count = 0usize;
        for s in self.vertices() {
            if s >= n_vertices {
                return Err(Error::InvalidSchedule(format!(
                    "vertex {s} outside 0..{n_vertices}"
                )));
            }
            if std::mem::replace(&mut seen[s], true) {
                return Err(Error::InvalidSchedule(format!(
                    "vertex {s} scheduled twice"
                )));
            }
            count += 1;
        }
        if count != n_vertices {
            return Err(Error::InvalidSchedule(format!(
                "schedule covers {count} of {n_vertices} vertices"
            )));
        }
        Ok(())
    }

    fn vertices(&self) -> Box<dyn Iterator<Item = usize> + '_> {
        match self {
            Schedule::Sequential(order) => Box::new(order.iter().copied()),
            Schedule::BlockParallel(blocks) => Box::new(blocks.iter().flatten().copied()),
        }
    }

    /// The schedule as synchronisation blocks: singletons for `Sequential`.
    pub(crate) fn blocks(&self) -> Vec<&[usize]> {
        match self {
            Schedule::Sequential(order) => order.chunks(1).collect(),
            Schedule::BlockParallel(blocks) => blocks.iter().map(Vec::as_slice).collect(),
        }
    }
}

/// Named grid schedules selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    #[default]
    Checkerboard,
    Raster,
}

impl ScheduleKind {
    pub fn for_grid(self, height: usize, width: usize) -> Schedule {
        match self {
            ScheduleKind::Checkerboard => Schedule::checkerboard(height, width),
            ScheduleKind::Raster => Schedule::raster(height * width),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Checkerboard => "checkerboard",
            ScheduleKind::Raster => "raster",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checkerboard" => Ok(ScheduleKind::Checkerboard),
            "raster" => Ok(ScheduleKind::Raster),
            other => Err(Error::InvalidArgument(format!(
                "unknown schedule {other:?} (expected checkerboard or raster)"
            ))),
        }
    }
}

/// Closed-form optimal `q_s` given every other site's marginal.
pub fn site_update(mrf: &PairwiseMrf, q: &FactorialDistribution, s: usize) -> Vec<f64> {
    let k = mrf.k();
    let mut a = vec![0.0; k];
    let mut out = vec![0.0; k];
    mrf.activation(q.as_slice(), s, &mut a);
    softmax_into(&a, &mut out);
    out
}

/// One sweep over `schedule`, calling `observe(s, activation, new_q_s)` for
/// every site update in execution order.
///
/// Both plain mean field and the unrolled network go through this function,
/// which keeps their floating-point operation order identical.
pub(crate) fn sweep_observed(
    mrf: &PairwiseMrf,
    q: &mut FactorialDistribution,
    schedule: &Schedule,
    mut observe: impl FnMut(usize, &[f64], &[f64]),
) {
    let k = mrf.k();
    match schedule {
        Schedule::Sequential(order) => {
            let mut a = vec![0.0; k];
            let mut next = vec![0.0; k];
            for &s in order {
                mrf.activation(q.as_slice(), s, &mut a);
                softmax_into(&a, &mut next);
                q.row_mut(s).copy_from_slice(&next);
                observe(s, &a, &next);
            }
        }
        Schedule::BlockParallel(blocks) => {
            let mut acts = Vec::new();
            let mut nexts = Vec::new();
            for block in blocks {
                acts.clear();
                acts.resize(block.len() * k, 0.0);
                nexts.clear();
                nexts.resize(block.len() * k, 0.0);
                for ((&s, a), next) in block
                    .iter()
                    .zip(acts.chunks_exact_mut(k))
                    .zip(nexts.chunks_exact_mut(k))
                {
                    mrf.activation(q.as_slice(), s, a);
                    softmax_into(a, next);
                }
                for ((&s, a), next) in block
                    .iter()
                    .zip(acts.chunks_exact(k))
                    .zip(nexts.chunks_exact(k))
                {
                    q.row_mut(s).copy_from_slice(next);
                    observe(s, a, next);
                }
            }
        }
    }
}

fn check_inputs(mrf: &PairwiseMrf, q: &FactorialDistribution, schedule: &Schedule) -> Result<()> {
    if q.k() != mrf.k() || q.n_vertices() != mrf.n_vertices() {
        return Err(Error::ShapeMismatch(format!(
            "distribution is {}×{}, model is {}×{}",
            q.n_vertices(),
            q.k(),
            mrf.n_vertices(),
            mrf.k()
        )));
    }
    schedule.validate(mrf.n_vertices())
}

/// Applies one sweep of site updates in the order given by `schedule`.
pub fn sweep(
    mrf: &PairwiseMrf,
    q: &FactorialDistribution,
    schedule: &Schedule,
) -> Result<FactorialDistribution> {
    check_inputs(mrf, q, schedule)?;
    let mut next = q.clone();
    sweep_observed(mrf, &mut next, schedule, |_, _, _| {});
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldRun {
    pub q: FactorialDistribution,
    /// Unnormalized KL after each sweep, when requested.
    pub kl_trace: Option<Vec<f64>>,
}

/// Runs exactly `iterations` sweeps starting from `q0`. There is no
/// convergence test.
pub fn run(
    mrf: &PairwiseMrf,
    q0: &FactorialDistribution,
    iterations: usize,
    schedule: &Schedule,
    trace_kl: bool,
) -> Result<MeanFieldRun> {
    check_inputs(mrf, q0, schedule)?;
    let mut q = q0.clone();
    let mut kl_trace = trace_kl.then(|| Vec::with_capacity(iterations));
    for _ in 0..iterations {
        sweep_observed(mrf, &mut q, schedule, |_, _, _| {});
        if let Some(trace) = kl_trace.as_mut() {
            trace.push(unnormalized_kl_unchecked(&q, mrf));
        }
    }
    Ok(MeanFieldRun { q, kl_trace })
}

/// Largest per-entry change a single further sweep would make; zero at a
/// fixed point.
pub fn max_change(
    mrf: &PairwiseMrf,
    q: &FactorialDistribution,
    schedule: &Schedule,
) -> Result<f64> {
    Ok(sweep(mrf, q, schedule)?.max_abs_diff(q))
}
