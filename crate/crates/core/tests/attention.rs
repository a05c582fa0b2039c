use dnt_core::attention::{
    attention_backward, attention_forward, attention_grad_weights, attention_jacobian_x, column_softmax,
    qknorm_attention_jacobian_x, qknorm_logit_grad, softmax_jacobian_blockdiag, AttentionParams,
};
use dnt_core::norms::{rmsnorm_forward, NormParams};
use dnt_core::tensor::{
    finite_diff_gradient, finite_diff_jacobian, gaussian_matrix, singular_values, unvec, vec, Matrix, Rng, Vector,
};

const H: f64 = 1e-6;

fn params(rng: &mut Rng, d: usize, dq: usize, dv: usize) -> AttentionParams {
    AttentionParams::new(
        gaussian_matrix(rng, dq, d, 1.0),
        gaussian_matrix(rng, dq, d, 1.0),
        gaussian_matrix(rng, dv, d, 1.0),
    )
    .unwrap()
}

fn forward_vec(p: &AttentionParams, d: usize, n: usize) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
    move |xs| {
        let x = unvec(xs, d, n).unwrap();
        vec(&attention_forward(&x, p).unwrap().y).into_vec()
    }
}

fn prenorm_columns(x: &Matrix, np: &NormParams) -> Matrix {
    let mut out = x.clone();
    for j in 0..x.cols() {
        out.set_column(j, rmsnorm_forward(&x.column(j), np).unwrap().as_slice());
    }
    out
}

fn assert_close(a: &Matrix, b: &Matrix, tol: f64, what: &str) {
    let err = a.relative_error(b).unwrap();
    assert!(err <= tol, "{what}: relative error {err:e} > {tol:e}");
}

#[test]
fn columns_are_probability_vectors() {
    let mut rng = Rng::new(1);
    for causal in [false, true] {
        let logits = gaussian_matrix(&mut rng, 7, 7, 30.0);
        let a = column_softmax(&logits, 0.5, causal);
        for j in 0..7 {
            let s: f64 = (0..7).map(|i| a[(i, j)]).sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!((0..7).all(|i| a[(i, j)] >= 0.0));
            if causal {
                assert!((j + 1..7).all(|i| a[(i, j)] == 0.0));
            }
        }
    }
}

#[test]
fn single_token_and_zero_query_cases() {
    let mut rng = Rng::new(2);
    let p = params(&mut rng, 4, 3, 2);
    let x1 = gaussian_matrix(&mut rng, 4, 1, 1.0);
    let c = attention_forward(&x1, &p).unwrap();
    assert_eq!(c.attn.as_slice(), &[1.0]);
    assert_close(&c.y, &p.wv.matmul(&x1).unwrap(), 1e-15, "n=1");

    let mut zq = p.clone();
    zq.wq = Matrix::zeros(3, 4);
    let x = gaussian_matrix(&mut rng, 4, 5, 1.0);
    let c = attention_forward(&x, &zq).unwrap();
    assert!(c.attn.as_slice().iter().all(|&a| (a - 0.2).abs() < 1e-15));
    let uniform = Matrix::from_fn(5, 5, |_, _| 0.2);
    assert_close(&c.y, &zq.wv.matmul(&x).unwrap().matmul(&uniform).unwrap(), 1e-14, "Wq = 0");
}

#[test]
fn softmax_block_cases() {
    assert!(softmax_jacobian_blockdiag(&Matrix::identity(3)).unwrap().max_abs() == 0.0);
    let half = Matrix::from_fn(2, 1, |_, _| 0.5);
    let j = softmax_jacobian_blockdiag(&half).unwrap();
    assert_eq!(j.as_slice(), &[0.25, -0.25, -0.25, 0.25]);

    let mut rng = Rng::new(3);
    let a = column_softmax(&gaussian_matrix(&mut rng, 5, 5, 2.0), 1.0, false);
    let j = softmax_jacobian_blockdiag(&a).unwrap();
    let ones = vec![1.0; 25];
    assert!(j.mul_vec(&ones).unwrap().iter().all(|v| v.abs() < 1e-12));
    assert!(softmax_jacobian_blockdiag(&Matrix::from_fn(2, 2, |_, _| 0.7)).is_err());
}

#[test]
fn zero_projections_leave_only_the_value_path() {
    let mut rng = Rng::new(4);
    let mut p = params(&mut rng, 3, 2, 2);
    p.wq = Matrix::zeros(2, 3);
    p.wk = Matrix::zeros(2, 3);
    let x = gaussian_matrix(&mut rng, 3, 4, 1.0);
    let c = attention_forward(&x, &p).unwrap();
    let jac = attention_jacobian_x(&c, &p).unwrap();
    let expected = dnt_core::tensor::kron(&c.attn.transpose(), &p.wv).unwrap();
    assert_close(&jac, &expected, 1e-15, "value path");
}

#[test]
fn jacobian_matches_finite_differences() {
    for (d, n, dq, dv) in [(3, 2, 2, 2), (4, 3, 4, 4), (6, 4, 3, 5)] {
        for seed in 0..50 {
            let mut rng = Rng::new(100 + seed);
            let p = params(&mut rng, d, dq, dv).with_causal(seed % 2 == 1);
            let x = gaussian_matrix(&mut rng, d, n, 0.7);
            let c = attention_forward(&x, &p).unwrap();
            let analytic = attention_jacobian_x(&c, &p).unwrap();
            let fd = finite_diff_jacobian(forward_vec(&p, d, n), vec(&x).as_slice(), H).unwrap();
            assert_close(&analytic, &fd, 1e-5, &format!("({d},{n},{dq},{dv}) seed {seed}"));
        }
    }
}

#[test]
fn qknorm_jacobian_matches_finite_differences() {
    for (d, n, dh) in [(3, 2, 2), (6, 3, 3)] {
        for seed in 0..20 {
            let mut rng = Rng::new(200 + seed);
            let p = params(&mut rng, d, dh, 2).with_qknorm();
            let x = gaussian_matrix(&mut rng, d, n, 1.0);
            let c = attention_forward(&x, &p).unwrap();
            let analytic = qknorm_attention_jacobian_x(&c, &p).unwrap();
            let fd = finite_diff_jacobian(forward_vec(&p, d, n), vec(&x).as_slice(), H).unwrap();
            assert_close(&analytic, &fd, 1e-5, &format!("QKNorm ({d},{n},{dh}) seed {seed}"));
        }
    }
}

#[test]
fn qknorm_logit_grad_matches_finite_differences() {
    let (d, n, dh) = (6, 3, 3);
    let mut rng = Rng::new(5);
    let p = params(&mut rng, d, dh, 2).with_qknorm();
    let x = gaussian_matrix(&mut rng, d, n, 1.0);
    let c = attention_forward(&x, &p).unwrap();
    for (i, j) in [(0, 0), (0, 2), (2, 1)] {
        let g = qknorm_logit_grad(i, j, &c, &p).unwrap();
        let logit = |xs: &[f64]| {
            let x = unvec(xs, d, n).unwrap();
            attention_forward(&x, &p).unwrap().logits[(i, j)]
        };
        let fd = finite_diff_gradient(logit, vec(&x).as_slice(), H).unwrap();
        assert_close(&g, &unvec(&fd, d, n).unwrap(), 1e-5, &format!("logit ({i},{j})"));
    }
    assert!(qknorm_logit_grad(n, 0, &c, &p).is_err());

    let mut dead = p.clone();
    dead.gamma_q = Some(Vector::zeros(dh));
    dead.gamma_k = Some(Vector::zeros(dh));
    let c = attention_forward(&x, &dead).unwrap();
    assert_eq!(qknorm_logit_grad(1, 2, &c, &dead).unwrap().max_abs(), 0.0);
}

#[test]
fn weight_gradients_match_finite_differences_and_backward() {
    let (d, n) = (4, 3);
    let mut rng = Rng::new(6);
    let p = params(&mut rng, d, 4, 4);
    let x = gaussian_matrix(&mut rng, d, n, 1.0);
    let up = gaussian_matrix(&mut rng, 4, n, 1.0);
    let c = attention_forward(&x, &p).unwrap();
    let (dwq, dwk, dwv) = attention_grad_weights(&c, &p, &up).unwrap();

    let loss = |p: &AttentionParams| {
        let y = attention_forward(&x, p).unwrap().y;
        y.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum::<f64>()
    };
    let fd_of = |which: usize| {
        let w = [&p.wq, &p.wk, &p.wv][which];
        let g = finite_diff_gradient(
            |ws| {
                let mut q = p.clone();
                let m = unvec(ws, w.rows(), w.cols()).unwrap();
                match which {
                    0 => q.wq = m,
                    1 => q.wk = m,
                    _ => q.wv = m,
                }
                loss(&q)
            },
            vec(w).as_slice(),
            H,
        )
        .unwrap();
        unvec(&g, w.rows(), w.cols()).unwrap()
    };
    assert_close(&dwq, &fd_of(0), 1e-5, "dWq");
    assert_close(&dwk, &fd_of(1), 1e-5, "dWk");
    assert_close(&dwv, &fd_of(2), 1e-5, "dWv");

    let b = attention_backward(&c, &p, &up).unwrap();
    assert_close(&b.d_wq, &dwq, 1e-12, "backward dWq");
    assert_close(&b.d_wk, &dwk, 1e-12, "backward dWk");
    assert_close(&b.d_wv, &dwv, 1e-12, "backward dWv");
    let jac = attention_jacobian_x(&c, &p).unwrap();
    let dx = unvec(jac.transpose().mul_vec(vec(&up).as_slice()).unwrap().as_slice(), d, n).unwrap();
    assert_close(&b.d_x, &dx, 1e-12, "backward dX");
}

#[test]
fn trivial_weight_gradient_cases() {
    let mut rng = Rng::new(7);
    let p = params(&mut rng, 4, 3, 2);
    let x = gaussian_matrix(&mut rng, 4, 3, 1.0);
    let c = attention_forward(&x, &p).unwrap();
    let (a, b, v) = attention_grad_weights(&c, &p, &Matrix::zeros(2, 3)).unwrap();
    assert!(a.max_abs() == 0.0 && b.max_abs() == 0.0 && v.max_abs() == 0.0);

    let x1 = gaussian_matrix(&mut rng, 4, 1, 1.0);
    let up = gaussian_matrix(&mut rng, 2, 1, 1.0);
    let c = attention_forward(&x1, &p).unwrap();
    let (a, b, v) = attention_grad_weights(&c, &p, &up).unwrap();
    assert!(a.max_abs() == 0.0 && b.max_abs() == 0.0);
    assert_close(&v, &up.matmul(&x1.transpose()).unwrap(), 1e-15, "n=1 dWv");
    assert!(attention_grad_weights(&c, &p, &Matrix::zeros(3, 1)).is_err());
}

#[test]
fn qknorm_gain_gradients_match_finite_differences() {
    let (d, n, dh) = (5, 3, 3);
    let mut rng = Rng::new(8);
    let mut p = params(&mut rng, d, dh, 2).with_qknorm();
    p.gamma_q = Some(Vector::new((0..dh).map(|_| 1.0 + 0.3 * rng.normal()).collect()).unwrap());
    p.gamma_k = Some(Vector::new((0..dh).map(|_| 1.0 + 0.3 * rng.normal()).collect()).unwrap());
    let x = gaussian_matrix(&mut rng, d, n, 1.0);
    let up = gaussian_matrix(&mut rng, 2, n, 1.0);
    let c = attention_forward(&x, &p).unwrap();
    let b = attention_backward(&c, &p, &up).unwrap();
    let loss = |q: &AttentionParams| {
        let y = attention_forward(&x, q).unwrap().y;
        y.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum::<f64>()
    };
    let gq = p.gamma_q.clone().unwrap();
    let fd_q = finite_diff_gradient(
        |g| {
            let mut q = p.clone();
            q.gamma_q = Some(Vector::from_slice(g));
            loss(&q)
        },
        gq.as_slice(),
        H,
    )
    .unwrap();
    let gk = p.gamma_k.clone().unwrap();
    let fd_k = finite_diff_gradient(
        |g| {
            let mut q = p.clone();
            q.gamma_k = Some(Vector::from_slice(g));
            loss(&q)
        },
        gk.as_slice(),
        H,
    )
    .unwrap();
    let as_col = |v: &[f64]| Matrix::new(v.len(), 1, v.to_vec()).unwrap();
    assert_close(&as_col(b.d_gamma_q.unwrap().as_slice()), &as_col(&fd_q), 1e-5, "dγ_q");
    assert_close(&as_col(b.d_gamma_k.unwrap().as_slice()), &as_col(&fd_k), 1e-5, "dγ_k");

    let jac = qknorm_attention_jacobian_x(&c, &p).unwrap();
    let dx = unvec(jac.transpose().mul_vec(vec(&up).as_slice()).unwrap().as_slice(), d, n).unwrap();
    assert_close(&b.d_x, &dx, 1e-10, "QKNorm backward dX");
}

#[test]
fn prenorm_removes_per_token_scale() {
    let (d, n) = (5, 4);
    let mut rng = Rng::new(9);
    let p = params(&mut rng, d, 3, 3);
    let np = NormParams::rms(d).with_epsilon(0.0);
    let x = gaussian_matrix(&mut rng, d, n, 1.0);
    let scales = [0.1, 3.0, 17.0, 0.5];
    let xs = Matrix::from_fn(d, n, |i, j| x[(i, j)] * scales[j]);

    let y = attention_forward(&prenorm_columns(&x, &np), &p).unwrap().y;
    let ys = attention_forward(&prenorm_columns(&xs, &np), &p).unwrap().y;
    assert_close(&ys, &y, 1e-9, "outputs");

    // Jacobian of attention∘PreNorm with respect to the normalized input
    let j = attention_jacobian_x(&attention_forward(&prenorm_columns(&x, &np), &p).unwrap(), &p).unwrap();
    let js = attention_jacobian_x(&attention_forward(&prenorm_columns(&xs, &np), &p).unwrap(), &p).unwrap();
    assert_close(&js, &j, 1e-9, "Jacobians");
}

#[test]
fn qknorm_is_blind_to_projection_scale() {
    let (d, n, dh) = (6, 4, 3);
    let mut rng = Rng::new(10);
    let p = params(&mut rng, d, dh, 2).with_qknorm().with_epsilon(0.0);
    let x = gaussian_matrix(&mut rng, d, n, 1.0);
    let base = attention_forward(&x, &p).unwrap();
    let base_grad = qknorm_logit_grad(1, 3, &base, &p).unwrap();
    let base_jac = qknorm_attention_jacobian_x(&base, &p).unwrap();
    for c in [0.01, 1.0, 10.0, 50.0, 100.0] {
        let mut q = p.clone();
        q.wq = p.wq.scale(c);
        q.wk = p.wk.scale(c);
        let cache = attention_forward(&x, &q).unwrap();
        assert_close(&cache.attn, &base.attn, 1e-9, "A′");
        assert_close(&cache.y, &base.y, 1e-9, "Y");
        assert_close(&qknorm_logit_grad(1, 3, &cache, &q).unwrap(), &base_grad, 1e-8, "logit grad");

        let mut only_q = p.clone();
        only_q.wq = p.wq.scale(c);
        let cache = attention_forward(&x, &only_q).unwrap();
        assert_close(&qknorm_attention_jacobian_x(&cache, &only_q).unwrap(), &base_jac, 1e-8, "Jacobian");
    }

    let mut silent = p.clone();
    silent.wv = Matrix::zeros(2, d);
    let c = attention_forward(&x, &silent).unwrap();
    assert_eq!(qknorm_attention_jacobian_x(&c, &silent).unwrap().max_abs(), 0.0);
}

#[test]
fn unnormalized_jacobian_grows_with_input_scale() {
    let (d, n) = (8, 8);
    for seed in 0..10 {
        let mut rng = Rng::new(300 + seed);
        let p = params(&mut rng, d, d, d);
        let x = gaussian_matrix(&mut rng, d, n, 0.2);
        let sigma = |c: f64| {
            let cache = attention_forward(&x.scale(c), &p).unwrap();
            singular_values(&attention_jacobian_x(&cache, &p).unwrap()).unwrap()[0]
        };
        let (s1, s2, s4) = (sigma(1.0), sigma(2.0), sigma(4.0));
        assert!(s1 < s2 && s2 < s4, "seed {seed}: {s1} {s2} {s4}");
    }
}

#[test]
fn mode_mismatches_are_rejected() {
    let mut rng = Rng::new(11);
    let p = params(&mut rng, 3, 2, 2);
    let x = gaussian_matrix(&mut rng, 3, 2, 1.0);
    let c = attention_forward(&x, &p).unwrap();
    assert!(qknorm_attention_jacobian_x(&c, &p).is_err());
    assert!(qknorm_logit_grad(0, 0, &c, &p).is_err());
    let q = p.clone().with_qknorm();
    assert!(attention_jacobian_x(&c, &q).is_err());
    assert!(attention_grad_weights(&c, &q, &c.y).is_err());
    assert!(attention_forward(&gaussian_matrix(&mut rng, 4, 2, 1.0), &p).is_err());
    assert!(AttentionParams::new(Matrix::zeros(2, 3), Matrix::zeros(3, 3), Matrix::zeros(2, 3)).is_err());
}
