use dnt_core::attention::column_softmax;
use dnt_core::ffn::{ffn_midnorm_jacobian, FfnParams};
use dnt_core::norms::{rmsnorm_forward, rmsnorm_jacobian, NormParams};
use dnt_core::tensor::{
    commutation_matrix, finite_diff_jacobian, kron, singular_values, vec, Matrix, Rng, Vector,
};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// Determinant by Gaussian elimination with partial pivoting.
fn det(mut m: Matrix) -> f64 {
    let n = m.rows();
    let mut d = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&a, &b| m[(a, c)].abs().total_cmp(&m[(b, c)].abs())).unwrap();
        if m[(p, c)] == 0.0 {
            return 0.0;
        }
        if p != c {
            for k in 0..n {
                let t = m[(c, k)];
                m[(c, k)] = m[(p, k)];
                m[(p, k)] = t;
            }
            d = -d;
        }
        d *= m[(c, c)];
        for r in c + 1..n {
            let f = m[(r, c)] / m[(c, c)];
            for k in c..n {
                m[(r, k)] -= f * m[(c, k)];
            }
        }
    }
    d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kron_vectorizes_triple_products(m in 1usize..=6, k in 1usize..=6, l in 1usize..=6, n in 1usize..=6, seed in any::<u64>()) {
        let a = matrix(m, k, seed);
        let x = matrix(k, l, seed ^ 1);
        let b = matrix(l, n, seed ^ 2);
        let lhs = vec(&a.matmul(&x).unwrap().matmul(&b).unwrap());
        let rhs = kron(&b.transpose(), &a).unwrap().mul_vec(vec(&x).as_slice()).unwrap();
        for (u, v) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()), "{u} vs {v}");
        }
    }

    #[test]
    fn softmax_columns_are_distributions(n in 1usize..=9, scale in 0.01f64..10.0, causal in any::<bool>(), seed in any::<u64>()) {
        let logits = matrix(n, n, seed).scale(20.0);
        let a = column_softmax(&logits, scale, causal);
        for j in 0..n {
            let s: f64 = (0..n).map(|i| a[(i, j)]).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!((0..n).all(|i| a[(i, j)] >= 0.0 && a[(i, j)].is_finite()));
        }
    }

    #[test]
    fn singular_values_sorted_and_match_gram_determinant(rows in 1usize..=6, extra in 0usize..=3, seed in any::<u64>()) {
        let a = matrix(rows + extra, rows, seed);
        let s = singular_values(&a).unwrap();
        prop_assert!(s.as_slice().windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.iter().all(|&v| v >= 0.0));
        let prod: f64 = s.iter().map(|v| v * v).product();
        let gram = det(a.transpose().matmul(&a).unwrap());
        // LU on the Gram matrix loses accuracy in proportion to its condition number
        let kappa = (s[0] / s[rows - 1]).powi(2);
        let tol = 1e-8f64.max(64.0 * f64::EPSILON * kappa);
        prop_assert!((prod - gram).abs() <= tol * gram.abs().max(1e-300), "{prod} vs {gram}");
    }

    #[test]
    fn rmsnorm_ignores_positive_scale(d in 2usize..=32, seed in any::<u64>()) {
        let x = Vector::new(matrix(d, 1, seed).into_vec()).unwrap();
        let exact = NormParams::rms(d).with_epsilon(0.0);
        let y = rmsnorm_forward(&x, &exact).unwrap();
        for c in [0.1, 1.0, 10.0, 1000.0] {
            let yc = rmsnorm_forward(&x.scale(c), &exact).unwrap();
            for (u, v) in y.iter().zip(yc.iter()) {
                prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
            }
            // ε proportional to the scaled squared norm
            let eps = 1e-6 * x.dot(&x) * c * c;
            let smooth = NormParams::rms(d).with_epsilon(eps);
            let ys = rmsnorm_forward(&x.scale(c), &smooth).unwrap();
            let y0 = rmsnorm_forward(&x, &NormParams::rms(d).with_epsilon(1e-6 * x.dot(&x))).unwrap();
            for (u, v) in y0.iter().zip(ys.iter()) {
                prop_assert!((u - v).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn rmsnorm_jacobian_agrees_with_differences(size in 0usize..3, seed in any::<u64>()) {
        let d = [4, 8, 32][size];
        let mut rng = Rng::new(seed);
        let x = Vector::new((0..d).map(|_| rng.normal()).collect()).unwrap();
        let gamma = Vector::new((0..d).map(|_| 0.5 + rng.uniform()).collect()).unwrap();
        let p = NormParams::rms(d).with_gamma(gamma);
        let analytic = rmsnorm_jacobian(&x, &p).unwrap();
        let fd = finite_diff_jacobian(
            |v| rmsnorm_forward(&Vector::from_slice(v), &p).unwrap().into_vec(),
            x.as_slice(),
            1e-6,
        )
        .unwrap();
        prop_assert!(analytic.relative_error(&fd).unwrap() <= 1e-6);
    }

    #[test]
    fn midnorm_jacobian_ignores_weight_scale(c in 0.01f64..100.0, seed in any::<u64>()) {
        let (d, h) = (6, 10);
        let mid = NormParams::rms(d).with_epsilon(0.0);
        let w1 = matrix(h, d, seed);
        let w2 = matrix(d, h, seed ^ 7);
        let x = Vector::new(matrix(d, 1, seed ^ 9).into_vec()).unwrap();
        let p = FfnParams::new(w1.clone(), w2.clone(), Some(mid.clone())).unwrap();
        let Ok(base) = ffn_midnorm_jacobian(&x, &p) else { return Ok(()) };
        // with one active hidden unit the output is a fixed direction and the Jacobian vanishes
        let active = w1.mul_vec(x.as_slice()).unwrap().iter().filter(|&&v| v > 0.0).count();
        for q in [
            FfnParams::new(w1.scale(c), w2.clone(), Some(mid.clone())).unwrap(),
            FfnParams::new(w1.clone(), w2.scale(c), Some(mid.clone())).unwrap(),
        ] {
            let j = ffn_midnorm_jacobian(&x, &q).unwrap();
            if active == 1 {
                prop_assert!(j.max_abs() <= 1e-12 && base.max_abs() <= 1e-12);
            } else {
                prop_assert!(j.relative_error(&base).unwrap() <= 1e-9);
            }
        }
    }
}

#[test]
fn commutation_matrices_are_permutations() {
    for m in 1..=8 {
        for n in 1..=8 {
            let c = commutation_matrix(m, n).unwrap();
            let s = c.as_slice();
            assert!(s.iter().all(|&v| v == 0.0 || v == 1.0));
            for i in 0..m * n {
                assert_eq!((0..m * n).filter(|&j| c[(i, j)] == 1.0).count(), 1);
                assert_eq!((0..m * n).filter(|&j| c[(j, i)] == 1.0).count(), 1);
            }
            let x = matrix(m, n, (m * 10 + n) as u64);
            let kx = c.mul_vec(vec(&x).as_slice()).unwrap();
            assert_eq!(kx.as_slice(), vec(&x.transpose()).as_slice());
        }
    }
}

#[test]
fn central_differences_are_second_order() {
    // quadratic maps are differentiated exactly up to rounding
    let quad = |v: &[f64]| vec![v[0] * v[0] + 3.0 * v[0] * v[1], 2.0 - v[1] * v[1] + v[0]];
    let x = [0.7, -1.3];
    let exact = Matrix::from_rows(&[&[2.0 * x[0] + 3.0 * x[1], 3.0 * x[0]], &[1.0, -2.0 * x[1]]]).unwrap();
    for h in [1e-1, 1e-2, 1e-3] {
        let fd = finite_diff_jacobian(quad, &x, h).unwrap();
        assert!(fd.sub(&exact).unwrap().max_abs() <= 1e-9);
    }

    // the truncation error of a cubic is C·h², so halving h quarters it
    let cubic = |v: &[f64]| vec![v[0].powi(3) + v[0] * v[1] * v[1], v[1].powi(3)];
    let exact = Matrix::from_rows(&[&[3.0 * x[0] * x[0] + x[1] * x[1], 2.0 * x[0] * x[1]], &[0.0, 3.0 * x[1] * x[1]]]).unwrap();
    let err = |h: f64| finite_diff_jacobian(cubic, &x, h).unwrap().sub(&exact).unwrap().max_abs();
    for h in [0.1, 0.05, 0.025] {
        let order = (err(h) / err(h / 2.0)).log2();
        assert!(order >= 1.9, "h = {h}: order {order}");
    }
}

#[test]
fn rng_streams_are_reproducible() {
    let draw = |seed| {
        let mut r = Rng::new(seed);
        (0..64).map(|_| r.normal()).collect::<Vec<_>>()
    };
    assert_eq!(draw(42), draw(42));
    assert_ne!(draw(42), draw(43));
    let root = Rng::new(5);
    let (mut a, mut b) = (root.split(1), root.split(2));
    assert_ne!(a.uniform(), b.uniform());
}
