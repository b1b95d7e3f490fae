use proptest::prelude::*;

use nap_core::autodiff::{Graph, NormScale};
use nap_core::benchmarks::{run_walk, WalkInit, WalkProcess, WalkState};
use nap_core::metrics::{feature_rank, unit_stats, RANK_THRESHOLD};
use nap_core::network::{Activation, Architecture, Network, ParamKey, ParamKind};
use nap_core::optim::{effective_lr, ElrMode, Schedule};
use nap_core::projection::{self, decay_scale_offset, project_scale_offset, project_tensor};
use nap_core::{tensor, Tensor};

fn vec_strategy(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, len)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rms_jacobian_annihilates_input(h in vec_strategy(2..32), w in vec_strategy(32..33)) {
        let d = h.len();
        let ht = Tensor::new(vec![1, d], h.clone()).unwrap();
        prop_assume!(ht.norm() > 1e-3);
        let mut g = Graph::new();
        let hp = g.param(ht.clone());
        let n = g.rms_normalize(hp, 1e-8, NormScale::UnitNorm);
        let wi = g.input(Tensor::new(vec![1, d], w[..d].to_vec()).unwrap());
        let m = g.mul(n, wi).unwrap();
        let s = g.sum(m);
        let grad = g.backward(s).unwrap().get(hp).unwrap().clone();
        prop_assert!(grad.dot(&ht).abs() < 1e-10);
    }

    #[test]
    fn projection_hits_target_and_is_idempotent(w in vec_strategy(1..40), rho in 0.1f64..10.0) {
        let mut t = Tensor::vector(w);
        prop_assume!(t.norm() > 1e-6);
        let dir = t.scaled(1.0 / t.norm());
        project_tensor(&mut t, rho).unwrap();
        prop_assert!((t.norm() - rho).abs() <= 4.0 * f64::EPSILON * rho);
        prop_assert!(t.scaled(1.0 / rho).max_abs_diff(&dir) < 1e-14);
        let once = t.clone();
        project_tensor(&mut t, rho).unwrap();
        prop_assert!(t.max_abs_diff(&once) <= 4.0 * f64::EPSILON * rho);
    }

    #[test]
    fn joint_scale_offset_projection(s in vec_strategy(1..20), o in vec_strategy(20..21)) {
        let d = s.len();
        let st = Tensor::vector(s);
        let ot = Tensor::vector(o[..d].to_vec());
        prop_assume!(st.sq_norm() + ot.sq_norm() > 1e-6);
        let (s2, o2) = project_scale_offset(&st, &ot).unwrap();
        prop_assert!((s2.sq_norm() + o2.sq_norm() - d as f64).abs() <= 1e-12 * d as f64);
        let k = (d as f64 / (st.sq_norm() + ot.sq_norm())).sqrt();
        prop_assert!(s2.max_abs_diff(&st.scaled(k)) < 1e-12 * k.max(1.0));
        prop_assert!(o2.max_abs_diff(&ot.scaled(k)) < 1e-12 * k.max(1.0));
    }

    #[test]
    fn decay_contracts_toward_identity_affine(s in vec_strategy(1..10), alpha in 0.5f64..1.0) {
        let st = Tensor::vector(s.clone());
        let ot = Tensor::vector(s.iter().map(|v| v * 0.5).collect());
        let (s2, o2) = decay_scale_offset(&st, &ot, alpha);
        let ones = Tensor::ones(st.shape());
        let before = st.sub(&ones).unwrap().norm() + ot.norm();
        let after = s2.sub(&ones).unwrap().norm() + o2.norm();
        prop_assert!(after <= alpha * before + 1e-12);
    }

    #[test]
    fn effective_lr_matches_formula(lr in 1e-6f64..1.0, norm in 0.01f64..100.0) {
        let raw = effective_lr(lr, norm, ElrMode::RawGradient).unwrap();
        let nrm = effective_lr(lr, norm, ElrMode::NormalizedGradient).unwrap();
        prop_assert!((raw - lr / (norm * norm)).abs() <= 1e-14 * raw);
        prop_assert!((nrm - lr / norm).abs() <= 1e-14 * nrm);
    }

    #[test]
    fn rank_is_invariant_to_row_order_and_scale(m in matrix(12, 6), c in 0.1f64..10.0, shift in 0usize..12) {
        let r0 = feature_rank(&m, RANK_THRESHOLD).unwrap();
        let rows: Vec<&[f64]> = (0..12).map(|i| m.row((i + shift) % 12)).collect();
        let permuted = Tensor::from_rows(&rows);
        prop_assert_eq!(feature_rank(&permuted, RANK_THRESHOLD).unwrap(), r0);
        prop_assert_eq!(feature_rank(&m.scaled(c), RANK_THRESHOLD).unwrap(), r0);
        prop_assert!(r0 <= 6);
    }

    #[test]
    fn rank_is_invariant_to_rotation(m in matrix(10, 4), angle in 0.0f64..std::f64::consts::TAU) {
        let (s, c) = angle.sin_cos();
        let mut q = Tensor::eye(4);
        q.set2(0, 0, c);
        q.set2(0, 1, -s);
        q.set2(1, 0, s);
        q.set2(1, 1, c);
        let rotated = tensor::matmul(&m, &q).unwrap();
        prop_assert_eq!(
            feature_rank(&rotated, RANK_THRESHOLD).unwrap(),
            feature_rank(&m, RANK_THRESHOLD).unwrap()
        );
    }

    #[test]
    fn unit_fractions_sum_to_one(m in matrix(8, 9)) {
        let s = unit_stats(&m);
        prop_assert!((s.dead + s.always_on + s.mixed - 1.0).abs() < 1e-15);
        prop_assert!((s.linearized() - s.dead - s.always_on).abs() < 1e-15);
    }

    #[test]
    fn schedules_stay_between_endpoints(total in 10u64..100_000, t in 0u64..200_000) {
        let lin = Schedule::linear_half(total);
        let v = lin.value(t);
        prop_assert!((1e-6..=6.25e-5).contains(&v));
        prop_assert!(lin.value(t + 1) <= v);
        let cos = Schedule::cosine_warmup(total + 1001);
        let c = cos.value(t);
        prop_assert!((1e-8..=6.25e-4).contains(&c));
    }

    #[test]
    fn sign_walk_never_revives(v in vec_strategy(1..16), z in prop::collection::vec(vec_strategy(16..17), 1..20)) {
        let d = v.len();
        let mut s = WalkState::new(v, WalkProcess::Sign);
        let mut dead = s.dead_count();
        for zs in &z {
            nap_core::benchmarks::walk_step(&mut s, &zs[..d]).unwrap();
            prop_assert!(s.dead_count() >= dead);
            dead = s.dead_count();
        }
    }

    #[test]
    fn hidden_weight_scaling_leaves_nap_output_unchanged(seed in 0u64..1000, c in 0.05f64..20.0) {
        let arch = Architecture::mlp(5, &[7, 6], 3, Activation::Relu);
        let net = Network::build(&arch, true, seed).unwrap();
        let x = Tensor::randn(&[4, 5], 1.0, &mut nap_core::rng::seeded(seed));
        let base = net.logits(&x).unwrap();
        for l in net.scale_invariant_layers() {
            let mut scaled = net.clone();
            scaled.param_mut(ParamKey { layer: l, kind: ParamKind::Weight }).unwrap().scale_in_place(c);
            prop_assert!(scaled.logits(&x).unwrap().rel_diff(&base) < 1e-9);
        }
    }

    #[test]
    fn build_is_deterministic(seed in any::<u64>()) {
        let arch = Architecture::mlp(4, &[5], 2, Activation::Relu);
        prop_assert_eq!(Network::build(&arch, true, seed).unwrap(), Network::build(&arch, true, seed).unwrap());
    }
}

#[test]
fn projected_network_has_target_norms() {
    let arch = Architecture::mlp(6, &[10, 10], 3, Activation::Relu);
    let mut net = Network::build(&arch, true, 5).unwrap();
    for l in 0..net.num_layers() {
        if let Some(w) = net.layer_mut(l).weight.as_mut() {
            w.scale_in_place(1.0 + l as f64);
        }
    }
    projection::project_weights(&mut net).unwrap();
    let norms = net.param_norms();
    for (l, n) in norms.layers.iter().enumerate() {
        let rho = net.target_norm(l).unwrap();
        assert!((n.weight - rho).abs() <= 4.0 * f64::EPSILON * rho);
    }
}

#[test]
fn norm_walk_revives_dead_coordinates() {
    let plain = run_walk(8, 200, WalkProcess::Sign, 2, WalkInit::NegativeOnes, 3).unwrap();
    assert!(plain.per_trial.iter().all(|c| c.iter().all(|&k| k == 8)));

    let normed = run_walk(32, 300, WalkProcess::NormSign, 4, WalkInit::Gaussian, 5).unwrap();
    for k in 0..4 {
        assert!(normed.decreases(k) > 0, "trial {k} never revived a unit");
    }
}
