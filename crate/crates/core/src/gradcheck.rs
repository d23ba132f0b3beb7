//! Finite-difference verification of [`mfn::backward`](crate::mfn::backward).
//!
//! Only the forward pass and the loss value are used to build the reference
//! gradient.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::crf::{CrfInstance, CrfParams, InputImage, N_FEATURES};
use crate::error::{Error, Result};
use crate::meanfield::ScheduleKind;
use crate::mfn::{self, hinge_grad_a, LossSpec, MfnParams};
use crate::mrf::Assignment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Kl,
    Hinge,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(LossKind::Kl),
            "hinge" => Ok(LossKind::Hinge),
            other => Err(Error::InvalidArgument(format!(
                "unknown loss {other:?} (expected kl or hinge)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub tied: bool,
    #[serde(serialize_with = "display")]
    pub schedule: ScheduleKind,
    pub loss: LossKind,
    pub seed: u64,
    pub step: f64,
}

fn display<S: serde::Serializer>(v: &ScheduleKind, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            height: 6,
            width: 6,
            depth: 2,
            tied: false,
            schedule: ScheduleKind::Checkerboard,
            loss: LossKind::Kl,
            seed: 0,
            step: 1e-5,
        }
    }
}

/// Gradients smaller than this are compared in absolute rather than
/// relative terms.
pub const ERROR_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub max_relative_error: f64,
    /// Flat index (layer-major, 28 per layer) of the worst parameter.
    pub worst_parameter: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Parameters whose perturbation moved a hinge argmax; the loss is not
    /// differentiable there.
    pub skipped_at_kinks: usize,
}

/// A random problem instance: image, network parameters, and what the loss needs.
pub struct Problem {
    pub instance: CrfInstance,
    pub params: MfnParams,
    pub loss: LossSpec,
    pub label: Option<Assignment>,
}

fn random_theta(rng: &mut impl Rng) -> CrfParams {
    let mut theta = CrfParams::zeros();
    for w in &mut theta.w[..N_FEATURES - 1] {
        *w = rng.random_range(-0.6..0.6);
    }
    theta.w[N_FEATURES - 1] = rng.random_range(-1.5..1.5);
    theta.p_h = rng.random_range(-1.5..1.5);
    theta.p_v = rng.random_range(-1.5..1.5);
    theta
}

pub fn random_problem(config: &GradCheckConfig) -> Result<Problem> {
    if config.depth == 0 || config.height == 0 || config.width == 0 {
        return Err(Error::InvalidArgument(
            "grad-check needs a non-empty network".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.height * config.width;
    let pixels = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let instance = CrfInstance::new(&InputImage::new(config.height, config.width, pixels)?);
    let params = if config.tied {
        MfnParams::tied(random_theta(&mut rng))
    } else {
        MfnParams {
            tied: false,
            layers: (0..config.depth).map(|_| random_theta(&mut rng)).collect(),
        }
    };
    let (loss, label) = match config.loss {
        LossKind::Kl => (
            LossSpec::KlToTarget(instance.build_mrf(&random_theta(&mut rng))),
            None,
        ),
        LossKind::Hinge => {
            let label = (0..n).map(|_| rng.random_range(0..2)).collect::<Vec<_>>();
            (
                LossSpec::Hinge {
                    c: mfn::DEFAULT_HINGE_COST,
                },
                Some(label.into()),
            )
        }
    };
    Ok(Problem {
        instance,
        params,
        loss,
        label,
    })
}

pub fn run(config: &GradCheckConfig) -> Result<GradCheckReport> {
    let problem = random_problem(config)?;
    check_problem(&problem, config)
}

/// Compares the analytic gradient with central differences for every parameter.
pub fn check_problem(problem: &Problem, config: &GradCheckConfig) -> Result<GradCheckReport> {
    let Problem {
        instance,
        params,
        loss,
        label,
    } = problem;
    let schedule = config.schedule.for_grid(config.height, config.width);
    let depth = config.depth;
    let label = label.as_ref();
    let trace = mfn::forward(instance, params, depth, &schedule)?;
    let analytic = mfn::backward(&trace, instance, params, &schedule, loss, label)?
        .collapse(params.tied)
        .to_vec();

    let base = params.to_vec();
    let evaluate = |values: &[f64]| -> Result<(f64, Option<Vec<f64>>)> {
        let mut p = params.clone();
        p.set_from_slice(values)?;
        let t = mfn::forward(instance, &p, depth, &schedule)?;
        let pattern = match (loss, label) {
            (LossSpec::Hinge { c }, Some(l)) => {
                Some(hinge_grad_a(t.final_activations(), l, 2, *c)?)
            }
            _ => None,
        };
        Ok((loss.value(&t, label)?, pattern))
    };

    let mut report = GradCheckReport {
        config: *config,
        max_relative_error: 0.0,
        worst_parameter: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped_at_kinks: 0,
    };
    for (i, &g) in analytic.iter().enumerate() {
        let mut plus = base.clone();
        plus[i] += config.step;
        let mut minus = base.clone();
        minus[i] -= config.step;
        let (lp, pp) = evaluate(&plus)?;
        let (lm, pm) = evaluate(&minus)?;
        if pp != pm {
            report.skipped_at_kinks += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * config.step);
        let err = relative_error(g, numeric);
        report.checked += 1;
        if err.is_nan() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_parameter = i;
            report.analytic = g;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
