//! Mean Field Networks: mean field unrolled into an `M`-layer feed-forward
//! network whose weights may be tied or learned per layer.
//!
//! Every unit is one site update. Its pre-softmax input (the activation) is
//! the unary potential plus the expected pairwise potential under the
//! neighbours' current marginals. Gradients come from an explicit reverse
//! pass over the recorded activations and marginals.
//!
//! The forward/backward core works on arbitrary pairwise MRFs; the grid CRF
//! parameterisation is layered on top through [`CrfInstance::pullback`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crf::{decode, CrfInstance, CrfParams, N_PARAMS};
use crate::error::{Error, Result};
use crate::meanfield::{sweep_observed, Schedule, ScheduleKind};
use crate::mrf::{
    softmax_init, unnormalized_kl_unchecked, Assignment, FactorialDistribution, PairwiseMrf,
    LOG_FLOOR,
};

/// Network parameters: one CRF parameter set shared by all layers, or one per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfnParams {
    pub tied: bool,
    pub layers: Vec<CrfParams>,
}

impl MfnParams {
    pub fn tied(theta: CrfParams) -> Self {
        Self {
            tied: true,
            layers: vec![theta],
        }
    }

    pub fn untied(theta: CrfParams, depth: usize) -> Self {
        Self {
            tied: false,
            layers: vec![theta; depth],
        }
    }

    /// Copies the shared parameters onto `depth` independent layers.
    pub fn untie(&self, depth: usize) -> Self {
        if self.tied {
            Self::untied(self.layers[0], depth)
        } else {
            self.clone()
        }
    }

    /// Parameters used by layer `m`.
    pub fn layer(&self, m: usize) -> &CrfParams {
        if self.tied {
            &self.layers[0]
        } else {
            &self.layers[m]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("network has no layers".into()));
        }
        if self.tied && self.layers.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "tied network stores {} parameter sets",
                self.layers.len()
            )));
        }
        if !self.layers.iter().all(CrfParams::is_finite) {
            return Err(Error::NonFinite("network parameter".into()));
        }
        Ok(())
    }

    /// Checks the parameters can drive a `depth`-layer network.
    pub fn check_depth(&self, depth: usize) -> Result<()> {
        self.validate()?;
        if depth == 0 {
            return Err(Error::InvalidArgument(
                "network depth must be at least 1".into(),
            ));
        }
        if !self.tied && self.layers.len() != depth {
            return Err(Error::InvalidArgument(format!(
                "untied network has {} layers, asked to run {depth}",
                self.layers.len()
            )));
        }
        Ok(())
    }

    /// Depth implied by the parameters alone (`None` for tied networks).
    pub fn implied_depth(&self) -> Option<usize> {
        (!self.tied).then_some(self.layers.len())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.layers.iter().flat_map(CrfParams::to_vec).collect()
    }

    /// Overwrites the parameters from a flat vector of the same layout.
    pub fn set_from_slice(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.layers.len() * N_PARAMS {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} layers",
                v.len(),
                self.layers.len()
            )));
        }
        for (layer, chunk) in self.layers.iter_mut().zip(v.chunks_exact(N_PARAMS)) {
            *layer = CrfParams::from_slice(chunk)?;
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let params: Self = serde_json::from_str(s)
            .map_err(|e| Error::parse("network parameters", e.to_string()))?;
        params
            .validate()
            .map_err(|e| Error::parse("network parameters", e.to_string()))?;
        Ok(params)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("finite parameters serialize")
    }
}

/// Everything the reverse pass needs from a forward pass.
///
/// Each vertex is updated exactly once per layer, so the marginals entering
/// layer `m` are `q[m]` and the ones leaving it are `q[m + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    k: usize,
    /// `q[0]` is the softmax initialisation, `q[M]` the network output.
    q: Vec<FactorialDistribution>,
    /// Per layer, `n × k` activations indexed by vertex.
    activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn depth(&self) -> usize {
        self.activations.len()
    }

    pub fn initial(&self) -> &FactorialDistribution {
        &self.q[0]
    }

    pub fn output(&self) -> &FactorialDistribution {
        self.q.last().expect("trace holds q0")
    }

    /// Marginals after layer `m` (`m = 0` is the initialisation).
    pub fn marginals(&self, m: usize) -> &FactorialDistribution {
        &self.q[m]
    }

    pub fn activations(&self, layer: usize) -> &[f64] {
        &self.activations[layer]
    }

    /// Inputs to the output layer, the quantity the hinge loss is defined on.
    pub fn final_activations(&self) -> &[f64] {
        self.activations
            .last()
            .expect("trace has at least one layer")
    }

    /// Recomputes every layer from `q0` and the given potentials and checks
    /// that the recorded values are reproduced bit for bit.
    pub fn replays(&self, layers: &[&PairwiseMrf], schedule: &Schedule) -> bool {
        match forward_mrfs(layers, schedule) {
            Ok(t) => &t == self,
            Err(_) => false,
        }
    }
}

/// Runs an `layers.len()`-layer network whose layer `m` uses the potentials
/// of `layers[m]`. The initial marginals are the softmax of `layers[0]`'s
/// unaries.
pub fn forward_mrfs(layers: &[&PairwiseMrf], schedule: &Schedule) -> Result<ForwardTrace> {
    let first = layers
        .first()
        .ok_or_else(|| Error::InvalidArgument("network depth must be at least 1".into()))?;
    let (n, k) = (first.n_vertices(), first.k());
    for mrf in layers {
        if mrf.n_vertices() != n || mrf.k() != k || mrf.topology() != first.topology() {
            return Err(Error::ShapeMismatch("layers disagree on the graph".into()));
        }
    }
    schedule.validate(n)?;

    let mut q = softmax_init(first);
    let mut trace_q = Vec::with_capacity(layers.len() + 1);
    let mut activations = Vec::with_capacity(layers.len());
    trace_q.push(q.clone());
    for mrf in layers {
        let mut acts = vec![0.0; n * k];
        sweep_observed(mrf, &mut q, schedule, |s, a, _| {
            acts[s * k..(s + 1) * k].copy_from_slice(a)
        });
        trace_q.push(q.clone());
        activations.push(acts);
    }
    Ok(ForwardTrace {
        k,
        q: trace_q,
        activations,
    })
}

/// Gradient of the loss with respect to the network output.
#[derive(Debug, Clone, PartialEq)]
pub enum TopGradient {
    /// `∂L/∂q^M`, flat `n × k`.
    Marginals(Vec<f64>),
    /// `∂L/∂a^M` on the final layer's activations, flat `n × k`.
    Activations(Vec<f64>),
}

/// Gradients with respect to every layer's potential tables.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialGradients {
    /// Per layer, `n × k`.
    pub unary: Vec<Vec<f64>>,
    /// Per layer, `n_edges × k × k` in edge-table orientation.
    pub pairwise: Vec<Vec<f64>>,
}

/// `J_softmaxᵀ g` at output `p`, accumulated into `out`.
fn softmax_vjp(p: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(g) {
        *o += pi * (gi - dot);
    }
}

/// Reverse pass through every recorded site update.
pub fn backward_mrfs(
    trace: &ForwardTrace,
    layers: &[&PairwiseMrf],
    schedule: &Schedule,
    top: &TopGradient,
) -> Result<PotentialGradients> {
    let depth = trace.depth();
    if layers.len() != depth {
        return Err(Error::ShapeMismatch(format!(
            "trace has {depth} layers, {} potentials supplied",
            layers.len()
        )));
    }
    let k = trace.k;
    let n = trace.output().n_vertices();
    let top_len = match top {
        TopGradient::Marginals(g) | TopGradient::Activations(g) => g.len(),
    };
    if top_len != n * k {
        return Err(Error::ShapeMismatch(
            "top gradient does not match the output".into(),
        ));
    }
    let blocks = schedule.blocks();
    let mut position = vec![usize::MAX; n];
    for (b, block) in blocks.iter().enumerate() {
        for &s in *block {
            position[s] = b;
        }
    }
    if position.contains(&usize::MAX) {
        return Err(Error::InvalidSchedule(
            "schedule does not cover the trace".into(),
        ));
    }

    // Adjoint of the current marginal state, walked backwards in time.
    let mut q_bar = match top {
        TopGradient::Marginals(g) => g.clone(),
        TopGradient::Activations(_) => vec![0.0; n * k],
    };
    let mut unary_grads = vec![Vec::new(); depth];
    let mut pairwise_grads = vec![Vec::new(); depth];
    let mut a_bar = Vec::new();

    for m in (0..depth).rev() {
        let mrf = layers[m];
        let (q_in, q_out) = (trace.q[m].as_slice(), trace.q[m + 1].as_slice());
        let mut unary_g = vec![0.0; n * k];
        let mut pair_g = vec![0.0; mrf.topology().n_edges() * k * k];

        for (b, block) in blocks.iter().enumerate().rev() {
            a_bar.clear();
            a_bar.resize(block.len() * k, 0.0);
            // Adjoints of this block's outputs, pulled through the softmax.
            for (&s, ab) in block.iter().zip(a_bar.chunks_exact_mut(k)) {
                let rows = s * k..(s + 1) * k;
                softmax_vjp(&q_out[rows.clone()], &q_bar[rows.clone()], ab);
                if let (TopGradient::Activations(g), true) = (top, m + 1 == depth) {
                    ab.iter_mut()
                        .zip(&g[rows.clone()])
                        .for_each(|(x, y)| *x += y);
                }
                q_bar[rows].iter_mut().for_each(|x| *x = 0.0);
            }
            // The block read neighbours updated in earlier blocks of this
            // layer at their new value, all others at their layer-input value.
            for (&s, ab) in block.iter().zip(a_bar.chunks_exact(k)) {
                unary_g[s * k..(s + 1) * k]
                    .iter_mut()
                    .zip(ab)
                    .for_each(|(u, a)| *u += a);
                for &(t, e) in mrf.topology().neighbors(s) {
                    let src = if position[t] < b { q_out } else { q_in };
                    let qt = &src[t * k..(t + 1) * k];
                    let table = mrf.pairwise(e);
                    let g_table = &mut pair_g[e * k * k..(e + 1) * k * k];
                    let qt_bar = &mut q_bar[t * k..(t + 1) * k];
                    for (xs, &a) in ab.iter().enumerate() {
                        for xt in 0..k {
                            let idx = if s < t { xs * k + xt } else { xt * k + xs };
                            g_table[idx] += a * qt[xt];
                            qt_bar[xt] += a * table[idx];
                        }
                    }
                }
            }
        }
        unary_grads[m] = unary_g;
        pairwise_grads[m] = pair_g;
    }

    // q0 is the softmax of layer 0's unaries.
    let q0 = trace.q[0].as_slice();
    for s in 0..n {
        let rows = s * k..(s + 1) * k;
        softmax_vjp(
            &q0[rows.clone()],
            &q_bar[rows.clone()],
            &mut unary_grads[0][rows],
        );
    }

    Ok(PotentialGradients {
        unary: unary_grads,
        pairwise: pairwise_grads,
    })
}

/// `∂KL/∂q^M_s(x) = log q + 1 − f_s(x) − Σ_t Σ_x' q_t(x') f_st(x, x')`, with
/// the same log floor as the loss.
pub fn kl_grad_q(q: &FactorialDistribution, target: &PairwiseMrf) -> Result<Vec<f64>> {
    let k = target.k();
    if q.k() != k || q.n_vertices() != target.n_vertices() {
        return Err(Error::ShapeMismatch(
            "marginals do not match the target".into(),
        ));
    }
    let mut grad = vec![0.0; q.as_slice().len()];
    let mut a = vec![0.0; k];
    for (s, g) in grad.chunks_exact_mut(k).enumerate() {
        target.activation(q.as_slice(), s, &mut a);
        for ((gx, &p), &ax) in g.iter_mut().zip(q.row(s)).zip(&a) {
            *gx = p.max(LOG_FLOOR).ln() + 1.0 - ax;
        }
    }
    Ok(grad)
}

fn check_hinge_inputs(activations: &[f64], label: &Assignment, k: usize, c: f64) -> Result<()> {
    if c.is_nan() || c <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "mislabeling cost {c} must be positive"
        )));
    }
    if k == 0 || activations.len() != label.len() * k {
        return Err(Error::ShapeMismatch(format!(
            "{} activations for {} sites with {k} labels",
            activations.len(),
            label.len()
        )));
    }
    if label.labels().iter().any(|&l| l >= k) {
        return Err(Error::ShapeMismatch("label outside the label set".into()));
    }
    Ok(())
}

/// `argmax_k a(k) + c·[k ≠ y]`, ties to the smallest label.
fn loss_augmented_argmax(a: &[f64], y: usize, c: f64) -> (usize, f64) {
    let mut best = (0, a[0] + if y == 0 { 0.0 } else { c });
    for (l, &v) in a.iter().enumerate().skip(1) {
        let score = v + if l == y { 0.0 } else { c };
        if score > best.1 {
            best = (l, score);
        }
    }
    best
}

/// Element-wise hinge loss `Σ_s max_k {a_s(k) + c·[k ≠ y_s]} − a_s(y_s)`.
pub fn hinge_loss(activations: &[f64], label: &Assignment, k: usize, c: f64) -> Result<f64> {
    check_hinge_inputs(activations, label, k, c)?;
    Ok(activations
        .chunks_exact(k)
        .zip(label.labels())
        .map(|(a, &y)| loss_augmented_argmax(a, y, c).1 - a[y])
        .sum())
}

/// `∂L/∂a_s(k) = [k = k*] − [k = y_s]`.
pub fn hinge_grad_a(activations: &[f64], label: &Assignment, k: usize, c: f64) -> Result<Vec<f64>> {
    check_hinge_inputs(activations, label, k, c)?;
    let mut grad = vec![0.0; activations.len()];
    for ((a, &y), g) in activations
        .chunks_exact(k)
        .zip(label.labels())
        .zip(grad.chunks_exact_mut(k))
    {
        let (star, _) = loss_augmented_argmax(a, y, c);
        if star != y {
            g[star] = 1.0;
            g[y] = -1.0;
        }
    }
    Ok(grad)
}

pub const DEFAULT_HINGE_COST: f64 = 1.0;

/// Training objective attached to the network output.
#[derive(Debug, Clone)]
pub enum LossSpec {
    /// Unnormalized `KL(q^M ‖ p_target)`.
    KlToTarget(PairwiseMrf),
    /// Element-wise hinge loss with mislabeling cost `c`.
    Hinge { c: f64 },
}

impl LossSpec {
    pub fn value(&self, trace: &ForwardTrace, label: Option<&Assignment>) -> Result<f64> {
        match self {
            LossSpec::KlToTarget(target) => {
                let q = trace.output();
                if q.n_vertices() != target.n_vertices() || q.k() != target.k() {
                    return Err(Error::ShapeMismatch(
                        "target does not match the network".into(),
                    ));
                }
                Ok(unnormalized_kl_unchecked(q, target))
            }
            LossSpec::Hinge { c } => {
                let label = label.ok_or_else(|| {
                    Error::InvalidArgument("hinge loss needs ground-truth labels".into())
                })?;
                hinge_loss(trace.final_activations(), label, trace.k, *c)
            }
        }
    }

    pub fn top_gradient(
        &self,
        trace: &ForwardTrace,
        label: Option<&Assignment>,
    ) -> Result<TopGradient> {
        match self {
            LossSpec::KlToTarget(target) => {
                Ok(TopGradient::Marginals(kl_grad_q(trace.output(), target)?))
            }
            LossSpec::Hinge { c } => {
                let label = label.ok_or_else(|| {
                    Error::InvalidArgument("hinge loss needs ground-truth labels".into())
                })?;
                Ok(TopGradient::Activations(hinge_grad_a(
                    trace.final_activations(),
                    label,
                    trace.k,
                    *c,
                )?))
            }
        }
    }
}

fn layer_mrfs(
    instance: &CrfInstance,
    params: &MfnParams,
    depth: usize,
) -> Result<Vec<PairwiseMrf>> {
    params.check_depth(depth)?;
    Ok(if params.tied {
        vec![instance.build_mrf(&params.layers[0])]
    } else {
        params
            .layers
            .iter()
            .map(|p| instance.build_mrf(p))
            .collect()
    })
}

fn layer_refs(mrfs: &[PairwiseMrf], tied: bool, depth: usize) -> Vec<&PairwiseMrf> {
    (0..depth)
        .map(|m| &mrfs[if tied { 0 } else { m }])
        .collect()
}

/// Runs the network on one image.
///
/// A tied network with `θ' = θ` performs exactly the floating-point
/// operations of `meanfield::run` from the unary softmax.
pub fn forward(
    instance: &CrfInstance,
    params: &MfnParams,
    depth: usize,
    schedule: &Schedule,
) -> Result<ForwardTrace> {
    let mrfs = layer_mrfs(instance, params, depth)?;
    forward_mrfs(&layer_refs(&mrfs, params.tied, depth), schedule)
}

/// Per-layer parameter gradients. For a tied network, [`Self::collapse`]
/// sums them into the single shared set.
#[derive(Debug, Clone, PartialEq)]
pub struct MfnGradient {
    pub per_layer: Vec<CrfParams>,
}

impl MfnGradient {
    /// Gradient with the same shape as `params`.
    pub fn collapse(&self, tied: bool) -> MfnParams {
        if tied {
            let mut sum = CrfParams::zeros();
            for g in &self.per_layer {
                sum.add_assign(g);
            }
            MfnParams::tied(sum)
        } else {
            MfnParams {
                tied: false,
                layers: self.per_layer.clone(),
            }
        }
    }

    pub fn layer_norms(&self) -> Vec<f64> {
        self.per_layer.iter().map(CrfParams::norm).collect()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.per_layer.iter_mut().zip(&other.per_layer) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.per_layer.iter_mut().for_each(|g| g.scale(factor));
    }
}

/// Back-propagates `loss` through `trace` to the network parameters.
pub fn backward(
    trace: &ForwardTrace,
    instance: &CrfInstance,
    params: &MfnParams,
    schedule: &Schedule,
    loss: &LossSpec,
    label: Option<&Assignment>,
) -> Result<MfnGradient> {
    let depth = trace.depth();
    let mrfs = layer_mrfs(instance, params, depth)?;
    if trace.output().n_vertices() != instance.n_pixels() || trace.k != 2 {
        return Err(Error::ShapeMismatch(
            "trace does not belong to this image".into(),
        ));
    }
    let top = loss.top_gradient(trace, label)?;
    let grads = backward_mrfs(
        trace,
        &layer_refs(&mrfs, params.tied, depth),
        schedule,
        &top,
    )?;
    let per_layer = grads
        .unary
        .iter()
        .zip(&grads.pairwise)
        .map(|(u, p)| instance.pullback(u, p))
        .collect();
    Ok(MfnGradient { per_layer })
}

/// Loss and gradient for one image in a single forward/backward pass.
pub fn loss_and_gradient(
    instance: &CrfInstance,
    params: &MfnParams,
    depth: usize,
    schedule: &Schedule,
    loss: &LossSpec,
    label: Option<&Assignment>,
) -> Result<(f64, MfnGradient, ForwardTrace)> {
    let trace = forward(instance, params, depth, schedule)?;
    let value = loss.value(&trace, label)?;
    let grad = backward(&trace, instance, params, schedule, loss, label)?;
    Ok((value, grad, trace))
}

/// Argmax decode of the network output, ties to label 0.
pub fn predict(trace: &ForwardTrace) -> Assignment {
    decode(trace.output())
}

/// Velocity buffer for [`sgd_momentum`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MomentumState {
    velocity: Vec<f64>,
}

impl MomentumState {
    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }
}

/// `v ← μ·v − η·g`, `θ ← θ + v`. The state starts at zero velocity and is
/// reset if the parameter count changes.
pub fn sgd_momentum(
    params: &mut [f64],
    grads: &[f64],
    learning_rate: f64,
    momentum: f64,
    state: &mut MomentumState,
) {
    assert_eq!(
        params.len(),
        grads.len(),
        "parameter/gradient shape mismatch"
    );
    if state.velocity.len() != params.len() {
        state.velocity = vec![0.0; params.len()];
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        *v = momentum * *v - learning_rate * g;
        *p += *v;
    }
}

/// One row of a training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainStep {
    pub phase: &'static str,
    pub step: usize,
    /// Mean per-image loss at the parameters before this step's update.
    pub loss: f64,
    /// Mean training pixel accuracy of the network output.
    pub accuracy: f64,
    /// Norm of the mean gradient for each layer of the unrolled network.
    pub layer_grad_norms: Vec<f64>,
}

/// Learning-rate / momentum / length triple for one training phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

struct BatchEval {
    loss: f64,
    accuracy: f64,
    grad: MfnGradient,
}

/// Mean loss, accuracy and gradient over a batch, reduced in input order.
fn evaluate_batch(
    items: &[(CrfInstance, Option<Assignment>, Option<LossSpec>)],
    params: &MfnParams,
    depth: usize,
    schedule_kind: ScheduleKind,
    default_loss: &LossSpec,
) -> Result<BatchEval> {
    let per_image: Vec<(f64, f64, MfnGradient)> = items
        .par_iter()
        .map(|(inst, label, own_loss)| {
            let grid = inst.grid();
            let schedule = schedule_kind.for_grid(grid.height(), grid.width());
            let loss = own_loss.as_ref().unwrap_or(default_loss);
            let (value, grad, trace) =
                loss_and_gradient(inst, params, depth, &schedule, loss, label.as_ref())?;
            let acc = match label {
                Some(l) => crate::data::agreement(predict(&trace).labels(), l.labels()),
                None => f64::NAN,
            };
            Ok((value, acc, grad))
        })
        .collect::<Result<_>>()?;
    let inv = 1.0 / items.len() as f64;
    let mut grad = MfnGradient {
        per_layer: vec![CrfParams::zeros(); depth],
    };
    let (mut loss, mut accuracy) = (0.0, 0.0);
    for (l, a, g) in &per_image {
        loss += l;
        accuracy += a;
        grad.add_assign(g);
    }
    grad.scale(inv);
    Ok(BatchEval {
        loss: loss * inv,
        accuracy: accuracy * inv,
        grad,
    })
}

fn diverged(loss: f64, initial: f64) -> bool {
    !loss.is_finite() || loss - initial > 9.0 * initial.abs()
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    phase_name: &'static str,
    items: &[(CrfInstance, Option<Assignment>, Option<LossSpec>)],
    params: &mut MfnParams,
    depth: usize,
    schedule: ScheduleKind,
    loss: &LossSpec,
    phase: Phase,
    on_step: &mut dyn FnMut(&TrainStep),
) -> Result<()> {
    let mut state = MomentumState::default();
    let mut initial = None;
    for step in 0..=phase.steps {
        let eval = evaluate_batch(items, params, depth, schedule, loss)?;
        let initial = *initial.get_or_insert(eval.loss);
        if diverged(eval.loss, initial) {
            return Err(Error::Diverged {
                step,
                loss: eval.loss,
                initial,
            });
        }
        on_step(&TrainStep {
            phase: phase_name,
            step,
            loss: eval.loss,
            accuracy: eval.accuracy,
            layer_grad_norms: eval.grad.layer_norms(),
        });
        if step == phase.steps {
            break;
        }
        let grad = eval.grad.collapse(params.tied).to_vec();
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{phase_name} gradient at step {step}"
            )));
        }
        let mut flat = params.to_vec();
        sgd_momentum(
            &mut flat,
            &grad,
            phase.learning_rate,
            phase.momentum,
            &mut state,
        );
        params.set_from_slice(&flat)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct InferenceTrainConfig {
    pub depth: usize,
    pub schedule: ScheduleKind,
    pub phase: Phase,
}

/// Default optimiser settings for KL training.
pub const DEFAULT_INFERENCE_PHASE: Phase = Phase {
    steps: 100,
    learning_rate: 1e-3,
    momentum: 0.9,
};

impl InferenceTrainConfig {
    /// Checkerboard schedule with [`DEFAULT_INFERENCE_PHASE`].
    pub fn with_depth(depth: usize) -> Self {
        Self {
            depth,
            schedule: ScheduleKind::default(),
            phase: DEFAULT_INFERENCE_PHASE,
        }
    }
}

/// Learns untied per-layer parameters that make a `depth`-layer network
/// approximate the CRF at `theta` in KL.
///
/// Targets are the potentials each image gets under `theta`; every layer
/// starts at `theta`. `on_step` receives `steps + 1` rows, the last one
/// evaluated at the returned parameters.
pub fn train_inference(
    train: &[CrfInstance],
    theta: &CrfParams,
    config: &InferenceTrainConfig,
    mut on_step: impl FnMut(&TrainStep),
) -> Result<MfnParams> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let items: Vec<_> = train
        .iter()
        .map(|inst| {
            let target = LossSpec::KlToTarget(inst.build_mrf(theta));
            (inst.clone(), None, Some(target))
        })
        .collect();
    let mut params = MfnParams::untied(*theta, config.depth);
    // Every item carries its own target; the default is never consulted.
    let unused = LossSpec::Hinge {
        c: DEFAULT_HINGE_COST,
    };
    run_phase(
        "kl",
        &items,
        &mut params,
        config.depth,
        config.schedule,
        &unused,
        config.phase,
        &mut on_step,
    )?;
    Ok(params)
}

#[derive(Debug, Clone)]
pub struct DiscriminativeConfig {
    pub depth: usize,
    pub schedule: ScheduleKind,
    pub hinge_cost: f64,
    /// Training with all layers sharing one parameter set.
    pub tied: Phase,
    /// Continued training after copying the shared set onto every layer.
    pub untied: Phase,
}

impl Default for DiscriminativeConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            schedule: ScheduleKind::default(),
            hinge_cost: DEFAULT_HINGE_COST,
            tied: Phase {
                steps: 50,
                learning_rate: 0.0005,
                momentum: 0.5,
            },
            untied: Phase {
                steps: 200,
                learning_rate: 0.002,
                momentum: 0.9,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminativeOutcome {
    /// The network at the end of the tied phase.
    pub tied: MfnParams,
    /// The network at the end of the untied phase (equal to the tied
    /// network, untied, when that phase has no steps).
    pub untied: MfnParams,
}

/// Two-phase hinge-loss training: tied from `theta`, then untied.
pub fn train_discriminative(
    train: &[(CrfInstance, Assignment)],
    theta: &CrfParams,
    config: &DiscriminativeConfig,
    mut on_step: impl FnMut(&TrainStep),
) -> Result<DiscriminativeOutcome> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let items: Vec<_> = train
        .iter()
        .map(|(inst, label)| (inst.clone(), Some(label.clone()), None))
        .collect();
    let loss = LossSpec::Hinge {
        c: config.hinge_cost,
    };
    let mut params = MfnParams::tied(*theta);
    run_phase(
        "tied",
        &items,
        &mut params,
        config.depth,
        config.schedule,
        &loss,
        config.tied,
        &mut on_step,
    )?;
    let tied = params.clone();
    let mut params = params.untie(config.depth);
    if config.untied.steps > 0 {
        run_phase(
            "untied",
            &items,
            &mut params,
            config.depth,
            config.schedule,
            &loss,
            config.untied,
            &mut on_step,
        )?;
    }
    Ok(DiscriminativeOutcome {
        tied,
        untied: params,
    })
}
