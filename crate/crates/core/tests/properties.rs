//! Randomised invariants of the model, inference and network code.

use std::sync::Arc;

use proptest::prelude::*;

use mfnet::crf::{CrfInstance, CrfParams, InputImage};
use mfnet::meanfield::{self, max_change};
use mfnet::mfn::{self, LossSpec, MomentumState};
use mfnet::mrf::{energy, softmax_init};
use mfnet::{Assignment, GraphTopology, MfnParams, PairwiseMrf, Schedule, ScheduleKind};

/// `(n, k, edges, unary table, pairwise tables)`.
type MrfParts = (usize, usize, Vec<(usize, usize)>, Vec<f64>, Vec<f64>);

/// A random graph on at most `max_n` vertices with random potentials.
fn mrf_parts(max_n: usize, max_k: usize) -> impl Strategy<Value = MrfParts> {
    (1..=max_n, 2..=max_k)
        .prop_flat_map(|(n, k)| {
            let pairs: Vec<(usize, usize)> = (0..n)
                .flat_map(|s| (s + 1..n).map(move |t| (s, t)))
                .collect();
            let n_pairs = pairs.len();
            (
                Just(n),
                Just(k),
                Just(pairs),
                proptest::collection::vec(any::<bool>(), n_pairs),
                proptest::collection::vec(-3.0..3.0f64, n * k),
                proptest::collection::vec(-3.0..3.0f64, n_pairs * k * k),
            )
        })
        .prop_map(|(n, k, pairs, keep, unary, all_tables)| {
            let mut edges = Vec::new();
            let mut tables = Vec::new();
            for (i, &e) in pairs.iter().enumerate() {
                if keep[i] {
                    edges.push(e);
                    tables.extend_from_slice(&all_tables[i * k * k..(i + 1) * k * k]);
                }
            }
            (n, k, edges, unary, tables)
        })
}

fn build(
    n: usize,
    k: usize,
    edges: Vec<(usize, usize)>,
    unary: Vec<f64>,
    tables: Vec<f64>,
) -> PairwiseMrf {
    let topo = Arc::new(GraphTopology::new(n, edges).unwrap());
    PairwiseMrf::new(topo, k, unary, tables).unwrap()
}

fn image(h: usize, w: usize) -> impl Strategy<Value = InputImage> {
    proptest::collection::vec(0.0..=1.0f64, h * w)
        .prop_map(move |px| InputImage::new(h, w, px).unwrap())
}

fn theta() -> impl Strategy<Value = CrfParams> {
    proptest::collection::vec(-1.0..1.0f64, 28).prop_map(|v| CrfParams::from_slice(&v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        (n, k, edges, unary, tables) in mrf_parts(6, 4),
        shift in -50.0..50.0f64,
    ) {
        let mrf = build(n, k, edges.clone(), unary.clone(), tables.clone());
        let q = softmax_init(&mrf);
        for row in q.rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = build(n, k, edges, unary.iter().map(|u| u + shift).collect(), tables);
        prop_assert!(softmax_init(&shifted).max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn energy_does_not_depend_on_edge_order(
        (n, k, edges, unary, tables) in mrf_parts(6, 3),
        labels in proptest::collection::vec(0usize..3, 6),
    ) {
        let x = Assignment::new(labels[..n].iter().map(|&l| l % k).collect());
        let forward = build(n, k, edges.clone(), unary.clone(), tables.clone());
        let kk = k * k;
        let mut rev_tables = Vec::with_capacity(tables.len());
        for e in (0..edges.len()).rev() {
            rev_tables.extend_from_slice(&tables[e * kk..(e + 1) * kk]);
        }
        let reversed = build(n, k, edges.into_iter().rev().collect(), unary, rev_tables);
        let (a, b) = (energy(&forward, &x).unwrap(), energy(&reversed, &x).unwrap());
        prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn sweeps_keep_rows_normalised(
        (n, k, edges, unary, tables) in mrf_parts(8, 4),
        iterations in 1usize..6,
        sequential in any::<bool>(),
    ) {
        let mrf = build(n, k, edges, unary, tables);
        let schedule = if sequential {
            Schedule::raster(n)
        } else {
            Schedule::BlockParallel(vec![(0..n).step_by(2).collect(), (1..n).step_by(2).collect()])
        };
        let q = meanfield::run(&mrf, &softmax_init(&mrf), iterations, &schedule, false).unwrap().q;
        for row in q.rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn fixed_points_do_not_depend_on_the_schedule(
        img in image(4, 5),
        theta in theta(),
    ) {
        // Weak coupling makes the mean field map a contraction.
        let theta = CrfParams { p_h: theta.p_h * 0.3, p_v: theta.p_v * 0.3, ..theta };
        let mrf = CrfInstance::new(&img).build_mrf(&theta);
        let raster = Schedule::raster(20);
        let q = meanfield::run(&mrf, &softmax_init(&mrf), 200, &raster, false).unwrap().q;
        prop_assert!(max_change(&mrf, &q, &raster).unwrap() < 1e-12);
        prop_assert!(max_change(&mrf, &q, &Schedule::checkerboard(4, 5)).unwrap() < 1e-12);
    }

    #[test]
    fn forward_traces_are_deterministic(
        img in image(3, 4),
        layers in proptest::collection::vec(theta(), 1..4),
    ) {
        let inst = CrfInstance::new(&img);
        let depth = layers.len();
        let params = MfnParams { tied: false, layers };
        let schedule = Schedule::checkerboard(3, 4);
        let a = mfn::forward(&inst, &params, depth, &schedule).unwrap();
        let b = mfn::forward(&inst, &params, depth, &schedule).unwrap();
        for m in 0..=depth {
            prop_assert_eq!(a.marginals(m).as_slice(), b.marginals(m).as_slice());
        }
        prop_assert_eq!(a.final_activations(), b.final_activations());
    }

    #[test]
    fn potts_tables_are_symmetric(img in image(3, 3), theta in theta()) {
        let mrf = CrfInstance::new(&img).build_mrf(&theta);
        for e in 0..mrf.topology().n_edges() {
            let t = mrf.pairwise(e);
            prop_assert_eq!(t[1], 0.0);
            prop_assert_eq!(t[2], 0.0);
            prop_assert!(t[0] == t[3] && (t[0] == theta.p_h || t[0] == theta.p_v));
        }
    }
}

#[test]
fn small_sgd_step_along_the_gradient_does_not_increase_loss() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for case in 0..10 {
        let (h, w) = (4, 5);
        let px = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let inst = CrfInstance::new(&InputImage::new(h, w, px).unwrap());
        let random_theta = |rng: &mut rand_chacha::ChaCha8Rng| {
            let v: Vec<f64> = (0..28).map(|_| rng.random_range(-1.0..1.0)).collect();
            CrfParams::from_slice(&v).unwrap()
        };
        let mut params = MfnParams::untied(random_theta(&mut rng), 2);
        let (loss, label) = if case % 2 == 0 {
            (
                LossSpec::KlToTarget(inst.build_mrf(&random_theta(&mut rng))),
                None,
            )
        } else {
            let l: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..2)).collect();
            (LossSpec::Hinge { c: 1.0 }, Some(Assignment::new(l)))
        };
        let schedule = ScheduleKind::Checkerboard.for_grid(h, w);
        let (before, grad, _) =
            mfn::loss_and_gradient(&inst, &params, 2, &schedule, &loss, label.as_ref()).unwrap();
        let mut flat = params.to_vec();
        let g = grad.collapse(false).to_vec();
        mfn::sgd_momentum(&mut flat, &g, 1e-6, 0.9, &mut MomentumState::default());
        params.set_from_slice(&flat).unwrap();
        let after = loss
            .value(
                &mfn::forward(&inst, &params, 2, &schedule).unwrap(),
                label.as_ref(),
            )
            .unwrap();
        assert!(after <= before + 1e-12, "case {case}: {before} -> {after}");
    }
}
