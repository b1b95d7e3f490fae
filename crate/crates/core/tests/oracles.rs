//! Independent oracles for the numerical kernels.

use nap_core::autodiff::{Graph, NormScale};
use nap_core::benchmarks::{make_synthetic_dataset, run_continual, ContinualConfig, ContinualStream, LabelMode, TrainingSetup};
use nap_core::baselines::BaselineSpec;
use nap_core::gradcheck::finite_diff_gradient;
use nap_core::metrics::{self, feature_rank, singular_values, RANK_THRESHOLD};
use nap_core::network::{Activation, Architecture, Network};
use nap_core::optim::{OptimizerConfig, OptimizerKind, Schedule};
use nap_core::projection::ProjectionPolicy;
use nap_core::{rng, tensor, Tensor};

/// Householder bidiagonalization of an m×n matrix (m ≥ n). Returns the
/// diagonal and superdiagonal of the upper bidiagonal factor.
fn bidiagonalize(a: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = (a.rows(), a.row_len());
    assert!(m >= n);
    let mut b: Vec<Vec<f64>> = (0..m).map(|i| a.row(i).to_vec()).collect();
    let mut diag = vec![0.0; n];
    let mut sup = vec![0.0; n.saturating_sub(1)];

    fn reflect(x: &[f64]) -> Option<(Vec<f64>, f64)> {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return None;
        }
        let alpha = if x[0] > 0.0 { -norm } else { norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vn = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if vn == 0.0 {
            return None;
        }
        v.iter_mut().for_each(|t| *t /= vn);
        Some((v, alpha))
    }

    for k in 0..n {
        let col: Vec<f64> = (k..m).map(|i| b[i][k]).collect();
        if let Some((v, _)) = reflect(&col) {
            for j in k..n {
                let dot: f64 = (k..m).map(|i| v[i - k] * b[i][j]).sum();
                for i in k..m {
                    b[i][j] -= 2.0 * v[i - k] * dot;
                }
            }
        }
        diag[k] = b[k][k];
        if k + 1 < n {
            let row: Vec<f64> = b[k][k + 1..n].to_vec();
            if let Some((v, _)) = reflect(&row) {
                for bi in b.iter_mut().take(m).skip(k) {
                    let dot: f64 = (k + 1..n).map(|j| v[j - k - 1] * bi[j]).sum();
                    for j in k + 1..n {
                        bi[j] -= 2.0 * v[j - k - 1] * dot;
                    }
                }
            }
            sup[k] = b[k][k + 1];
        }
    }
    (diag, sup)
}

/// Number of eigenvalues below `x` of the symmetric tridiagonal matrix with
/// zero diagonal and off-diagonal `off`.
fn sturm_count(off: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut q = -x;
    if q < 0.0 {
        count += 1;
    }
    for &b in off {
        let denom = if q == 0.0 { f64::EPSILON * b.abs().max(1e-300) } else { q };
        q = -x - b * b / denom;
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// Singular values from the Golub–Kahan form of the bidiagonal factor,
/// whose eigenvalues are ±σ_i, by bisection. Sorted descending.
fn oracle_singular_values(a: &Tensor) -> Vec<f64> {
    let (d, e) = bidiagonalize(a);
    let n = d.len();
    let mut off = Vec::with_capacity(2 * n - 1);
    for i in 0..n {
        off.push(d[i]);
        if i + 1 < n {
            off.push(e[i]);
        }
    }
    let bound = off.iter().map(|v| 2.0 * v.abs()).sum::<f64>() + 1.0;
    let size = 2 * n;
    // The k-th largest σ is the eigenvalue with index size − 1 − k.
    (0..n)
        .map(|k| {
            let target = size - 1 - k;
            let (mut lo, mut hi) = (-bound, bound);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if sturm_count(&off, mid) > target {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            0.5 * (lo + hi)
        })
        .collect()
}

#[test]
fn singular_values_match_bidiagonal_oracle() {
    let mut r = rng::seeded(31);
    for trial in 0..5 {
        let mut a = Tensor::randn(&[32, 16], 1.0, &mut r);
        if trial % 2 == 1 {
            // Spread the spectrum so small singular values are exercised.
            for i in 0..32 {
                for j in 0..16 {
                    let v = a.get2(i, j) * 10f64.powf(-(j as f64) / 4.0);
                    a.set2(i, j, v);
                }
            }
        }
        let got = singular_values(&a).unwrap();
        let want = oracle_singular_values(&a);
        assert_eq!(got.len(), 16);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-8 * want[0], "trial {trial}: {g} vs {w}");
        }
    }
}

#[test]
fn feature_rank_of_constructed_low_rank_matrix() {
    let mut r = rng::seeded(32);
    for rank in [1, 3, 7, 16] {
        let u = Tensor::randn(&[32, rank], 1.0, &mut r);
        let v = Tensor::randn(&[rank, 16], 1.0, &mut r);
        let m = tensor::matmul(&u, &v).unwrap();
        // Singular values come from Gram eigenvalues, so anything below
        // ~1e-8·σ₁ is noise; 1e-6 still resolves the exact rank. The 1% cut
        // may legitimately drop a small direction.
        assert_eq!(feature_rank(&m, 1e-6).unwrap(), rank);
        assert!(feature_rank(&m, RANK_THRESHOLD).unwrap() <= rank);
    }
}

#[test]
fn feature_rank_threshold_boundary() {
    // Diagonal with σ = (1, 0.02, 0.01, 0.005): only strictly-above counts.
    let mut m = Tensor::zeros(&[4, 4]);
    for (i, s) in [1.0, 0.02, 0.010_000_1, 0.005].into_iter().enumerate() {
        m.set2(i, i, s);
    }
    assert_eq!(feature_rank(&m, RANK_THRESHOLD).unwrap(), 3);
    assert_eq!(feature_rank(&Tensor::zeros(&[3, 3]), RANK_THRESHOLD).unwrap(), 0);
}

/// Dense matrix of the same-padded convolution acting on a flattened
/// `[c_in, h, w]` image.
fn conv_matrix(kernel: &Tensor, h: usize, w: usize) -> Tensor {
    let s = kernel.shape();
    let (cout, cin, k) = (s[0], s[1], s[2]);
    let pad = (k / 2) as isize;
    let mut m = Tensor::zeros(&[cout * h * w, cin * h * w]);
    for co in 0..cout {
        for i in 0..h {
            for j in 0..w {
                let row = (co * h + i) * w + j;
                for ci in 0..cin {
                    for ki in 0..k {
                        for kj in 0..k {
                            let si = i as isize + ki as isize - pad;
                            let sj = j as isize + kj as isize - pad;
                            if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                continue;
                            }
                            let col = (ci * h + si as usize) * w + sj as usize;
                            let kv = kernel.data()[((co * cin + ci) * k + ki) * k + kj];
                            m.set2(row, col, m.get2(row, col) + kv);
                        }
                    }
                }
            }
        }
    }
    m
}

#[test]
fn conv_matches_dense_embedding() {
    let mut r = rng::seeded(33);
    for (cin, cout, k, h, w) in [(1, 1, 1, 3, 3), (2, 3, 3, 5, 4), (3, 2, 5, 6, 6)] {
        let kernel = Tensor::randn(&[cout, cin, k, k], 1.0, &mut r);
        let x = Tensor::randn(&[2, cin, h, w], 1.0, &mut r);
        let y = tensor::conv2d(&x, &kernel).unwrap();
        let dense = conv_matrix(&kernel, h, w);
        let flat = x.reshape(&[2, cin * h * w]).unwrap();
        let want = tensor::matmul_nt(&flat, &dense).unwrap();
        let got = y.reshape(&[2, cout * h * w]).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12, "{cin} {cout} {k}");
    }
}

#[test]
fn rms_jacobian_columns_match_analytic() {
    let mut r = rng::seeded(34);
    for scale in [NormScale::UnitNorm, NormScale::UnitRms] {
        for d in [2, 5, 16] {
            let h = Tensor::randn(&[1, d], 1.0, &mut r);
            let n = h.norm();
            let gain = scale.gain(d);
            for i in 0..d {
                // Column i of J via the gradient of output coordinate i.
                let f = |t: &Tensor| {
                    let mut g = Graph::new();
                    let p = g.input(t.clone());
                    let o = g.rms_normalize(p, 1e-8, scale);
                    g.value(o).data()[i]
                };
                let numeric = finite_diff_gradient(f, &h, 1e-6);
                for j in 0..d {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    let analytic = gain * (delta / n - h.data()[i] * h.data()[j] / n.powi(3));
                    assert!((numeric.data()[j] - analytic).abs() < 1e-7 * gain, "d={d} ({i},{j})");
                }
            }
        }
    }
}

#[test]
fn untrained_network_is_at_chance() {
    let data = make_synthetic_dataset(4000, 20, 10, 35).unwrap();
    let net = Network::build(&Architecture::mlp(20, &[64], 10, Activation::Relu), true, 36).unwrap();
    let mut r = rng::seeded(37);
    use rand::Rng;
    let labels: Vec<usize> = (0..data.len()).map(|_| r.random_range(0..10)).collect();
    let logits = net.logits(&data.inputs).unwrap();
    let acc = metrics::online_accuracy(&logits, &labels).unwrap();
    assert!((acc - 0.1).abs() < 0.03, "{acc}");
}

#[test]
fn unit_fractions_partition_units() {
    let mut r = rng::seeded(38);
    for _ in 0..20 {
        let mut pre = Tensor::randn(&[16, 24], 1.0, &mut r);
        for j in 0..8 {
            for i in 0..16 {
                let v = pre.get2(i, j).abs();
                pre.set2(i, j, if j % 2 == 0 { -v } else { v });
            }
        }
        let s = metrics::unit_stats(&pre);
        assert!((s.dead + s.mixed + s.always_on - 1.0).abs() < 1e-15);
        assert!(s.dead >= 4.0 / 24.0 && s.always_on >= 4.0 / 24.0);
    }
}

#[test]
fn synthetic_classes_are_linearly_separable() {
    let data = make_synthetic_dataset(1000, 32, 10, 39).unwrap();
    let mut net = Network::build(&Architecture::mlp(32, &[], 10, Activation::Relu), false, 40).unwrap();
    let stream = ContinualStream::new(data.clone(), LabelMode::Original, 41);
    let mut cfg = ContinualConfig::new(1, 1500, 42);
    cfg.probe_size = 16;
    cfg.metric_every = 1500;
    let setup = TrainingSetup {
        optimizer: OptimizerConfig::new(OptimizerKind::Adam),
        schedule: Schedule::constant(1e-2),
        projection: ProjectionPolicy::disabled(),
        baseline: BaselineSpec::none(),
    };
    run_continual(&mut net, &stream, &cfg, &setup, &mut |_| Ok(())).unwrap();
    let logits = net.logits(&data.inputs).unwrap();
    let acc = metrics::online_accuracy(&logits, &data.labels).unwrap();
    assert!(acc > 0.9, "linear probe accuracy {acc}");
}
