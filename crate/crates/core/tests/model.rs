use dnt_core::model::{cross_entropy, Model, ModelConfig, NormSetting, ParamKind, Params};
use dnt_core::tensor::{Matrix, Rng};
use dnt_core::Error;

fn tiny(setting: NormSetting) -> ModelConfig {
    let mut c = ModelConfig::new(11, 8, 1, 4, setting);
    c.ffn_hidden = 16;
    c
}

fn batch(rng: &mut Rng, vocab: usize, b: usize, n: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..b {
        inputs.push((0..n).map(|_| rng.below(vocab)).collect());
        targets.push((0..n).map(|_| rng.below(vocab)).collect());
    }
    (inputs, targets)
}

fn refs(v: &[Vec<usize>]) -> Vec<&[usize]> {
    v.iter().map(|s| s.as_slice()).collect()
}

/// Central differences of the loss with respect to every entry of every
/// tensor, returned as per-tensor relative errors.
fn gradcheck(model: &Model, inputs: &[&[usize]], targets: &[&[usize]], h: f64) -> Vec<(String, f64)> {
    let (_, grads) = model.loss_and_grad(inputs, targets).unwrap();
    let analytic: Vec<Vec<f64>> = grads.views().iter().map(|v| v.data.to_vec()).collect();
    let names = model.params.names();
    let mut out = Vec::new();
    for (t, name) in names.iter().enumerate() {
        let len = analytic[t].len();
        let mut fd = vec![0.0; len];
        for (e, slot) in fd.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params.views_mut()[t].data[e] += delta;
                m.loss(inputs, targets).unwrap()
            };
            *slot = (eval(h) - eval(-h)) / (2.0 * h);
        }
        let diff: f64 = fd.iter().zip(&analytic[t]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-7);
        out.push((name.clone(), diff / scale));
    }
    out
}

#[test]
fn full_model_gradcheck_every_setting() {
    for setting in NormSetting::ALL {
        let model = Model::new(tiny(setting), &Rng::new(7)).unwrap();
        let mut rng = Rng::new(8);
        let (i, t) = batch(&mut rng, 11, 2, 4);
        for (name, err) in gradcheck(&model, &refs(&i), &refs(&t), 1e-5) {
            assert!(err < 1e-4, "{setting} {name}: relative error {err:e}");
        }
    }
}

#[test]
fn tied_embedding_gradcheck() {
    let mut cfg = tiny(NormSetting::S5);
    cfg.tied_embeddings = true;
    let model = Model::new(cfg, &Rng::new(9)).unwrap();
    let mut rng = Rng::new(10);
    let (i, t) = batch(&mut rng, 11, 2, 3);
    for (name, err) in gradcheck(&model, &refs(&i), &refs(&t), 1e-5) {
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn directional_derivatives_match() {
    let mut cfg = ModelConfig::new(11, 8, 2, 6, NormSetting::S3);
    cfg.ffn_hidden = 16;
    let model = Model::new(cfg, &Rng::new(11)).unwrap();
    let mut rng = Rng::new(12);
    let (i, t) = batch(&mut rng, 11, 3, 6);
    let (i, t) = (refs(&i), refs(&t));
    let (_, grads) = model.loss_and_grad(&i, &t).unwrap();
    for _ in 0..10 {
        let mut dir = model.params.zeros_like();
        for v in dir.views_mut() {
            v.data.iter_mut().for_each(|x| *x = rng.normal());
        }
        let len = dir.global_norm();
        dir.scale_in_place(1.0 / len);
        let analytic: f64 = grads
            .views()
            .iter()
            .zip(dir.views())
            .map(|(g, d)| g.data.iter().zip(d.data).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let h = 1e-5;
        let shifted = |s: f64| {
            let mut m = model.clone();
            for (p, d) in m.params.views_mut().into_iter().zip(dir.views()) {
                p.data.iter_mut().zip(d.data).for_each(|(w, v)| *w += s * v);
            }
            m.loss(&i, &t).unwrap()
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        assert!((fd - analytic).abs() <= 1e-5 * analytic.abs().max(1.0), "fd {fd}, analytic {analytic}");
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let model = Model::new(tiny(NormSetting::S4), &Rng::new(1)).unwrap();
    let (logits, cache) = model.forward(&[1, 2, 3]).unwrap();
    let g = model.backward(&cache, &Matrix::zeros(logits.rows(), logits.cols())).unwrap();
    assert_eq!(g.global_norm(), 0.0);
}

#[test]
fn stale_cache_is_rejected() {
    let model = Model::new(tiny(NormSetting::S4), &Rng::new(1)).unwrap();
    let (_, cache) = model.forward(&[1, 2, 3]).unwrap();
    assert!(matches!(model.backward(&cache, &Matrix::zeros(4, 11)), Err(Error::Shape { .. })));
}

#[test]
fn setting_flags_match_built_models() {
    let expect = |s: NormSetting| match s {
        NormSetting::S1 => (false, false, false, true),
        NormSetting::S2 => (false, true, false, true),
        NormSetting::S3 => (true, true, false, true),
        NormSetting::S4 => (true, true, true, true),
        NormSetting::S5 => (true, true, true, false),
    };
    for s in NormSetting::ALL {
        let m = Model::new(tiny(s), &Rng::new(2)).unwrap();
        let p = &m.params;
        let b = &p.blocks[0];
        let got = (
            p.input_norm.is_some(),
            b.gamma_q.is_some() && b.gamma_k.is_some(),
            b.attn_mid.is_some() && b.ffn_mid.is_some(),
            b.ffn_norm.is_some(),
        );
        assert_eq!(got, expect(s), "{s}");
        assert!(s.pre_norm_attn());
        assert_eq!(
            (s.input_norm(), s.qk_norm(), s.mid_norm(), s.pre_norm_ffn()),
            expect(s),
            "{s} flags"
        );
        // every gain starts at one and disabled norms expose no gradient slot
        let (logits, cache) = m.forward(&[0, 1]).unwrap();
        let g = m.backward(&cache, &Matrix::zeros(logits.rows(), logits.cols())).unwrap();
        assert_eq!(g.names(), p.names());
        for v in p.views().iter().filter(|v| v.kind == ParamKind::Gain) {
            assert!(v.data.iter().all(|&x| x == 1.0), "{}", v.name);
        }
    }
}

#[test]
fn parameter_count_matches_shape_walk() {
    // d=64, vocab=32, seq=32, hidden=256, two S5 blocks, untied head
    let per_block = 64 /* attn pre-norm */ + 4 * 64 * 64 + 2 * 64 /* qk gains */ + 2 * 64 /* mid-norms */ + 2 * 64 * 256;
    let expected = 32 * 64 + 32 * 64 + 64 /* input norm */ + 2 * per_block + 64 /* final norm */ + 32 * 64;
    let cfg = ModelConfig::new(32, 64, 2, 32, NormSetting::S5);
    assert_eq!(cfg.parameter_count(), expected);
    assert_eq!(Model::new(cfg, &Rng::new(0)).unwrap().parameter_count(), expected);
    for s in NormSetting::ALL {
        let cfg = ModelConfig::new(13, 6, 3, 5, s);
        assert_eq!(cfg.parameter_count(), Model::new(cfg.clone(), &Rng::new(0)).unwrap().parameter_count());
    }
}

#[test]
fn same_seed_same_model_and_logits() {
    let a = Model::new(tiny(NormSetting::S2), &Rng::new(5)).unwrap();
    let b = Model::new(tiny(NormSetting::S2), &Rng::new(5)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.forward(&[3, 1, 4]).unwrap().0, b.forward(&[3, 1, 4]).unwrap().0);
    let c = Model::new(tiny(NormSetting::S2), &Rng::new(6)).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn invalid_configs_and_tokens_are_rejected() {
    assert!(Model::new(ModelConfig::new(11, 8, 0, 4, NormSetting::S1), &Rng::new(0)).is_err());
    assert!(Model::new(ModelConfig::new(11, 1, 1, 4, NormSetting::S1), &Rng::new(0)).is_err());
    assert!(Model::new(ModelConfig::new(11, 8, 1, 0, NormSetting::S1), &Rng::new(0)).is_err());
    let m = Model::new(tiny(NormSetting::S1), &Rng::new(0)).unwrap();
    assert!(matches!(m.forward(&[11]), Err(Error::OutOfRange { .. })));
    assert!(matches!(m.forward(&[0; 5]), Err(Error::OutOfRange { .. })));
    assert!(m.loss(&[&[1, 2]], &[&[1]]).is_err());
}

#[test]
fn zero_blocks_reduce_to_embedding_path() {
    // All block weights zero: attention and FFN contribute nothing, so the
    // logits are head · RMSNorm(WE[t] + PE[pos]).
    let mut m = Model::new(tiny(NormSetting::S1), &Rng::new(3)).unwrap();
    for b in &mut m.params.blocks {
        for w in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1, &mut b.w2] {
            w.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let tokens = [4, 0, 9];
    let (logits, _) = m.forward(&tokens).unwrap();
    let p = &m.params;
    let eps = m.config.epsilon;
    let d = 8;
    let head = p.head.as_ref().unwrap();
    for (pos, &t) in tokens.iter().enumerate() {
        let h: Vec<f64> = (0..d).map(|c| p.tok_emb[(t, c)] + p.pos_emb[(pos, c)]).collect();
        let r = (h.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
        let x: Vec<f64> = h.iter().map(|v| (d as f64).sqrt() * v / r).collect();
        for v in 0..11 {
            let expect: f64 = (0..d).map(|c| head[(v, c)] * x[c]).sum();
            assert!((logits[(pos, v)] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn input_norm_fixes_block_input_norm() {
    for s in [NormSetting::S3, NormSetting::S4, NormSetting::S5] {
        let mut cfg = tiny(s);
        cfg.epsilon = 0.0;
        let mut m = Model::new(cfg, &Rng::new(4)).unwrap();
        m.params.tok_emb = m.params.tok_emb.scale(10.0);
        let (_, cache) = m.forward(&[1, 5, 7, 2]).unwrap();
        for row in cache.residual(0).chunks(8) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 8f64.sqrt()).abs() < 1e-9, "{s}: {n}");
        }
    }
}

#[test]
fn cross_entropy_reference_values() {
    let (loss, _) = cross_entropy(&Matrix::zeros(3, 7), &[0, 3, 6]).unwrap();
    assert!((loss - 7f64.ln()).abs() < 1e-14);
    let mut z = Matrix::zeros(2, 4);
    z.row_mut(0)[2] = 80.0;
    z.row_mut(1)[1] = 80.0;
    let (loss, _) = cross_entropy(&z, &[2, 1]).unwrap();
    assert!(loss < 1e-30);
}

#[test]
fn residual_norm_grows_without_midnorm() {
    // Blocks without a MidNorm add nearly orthogonal updates, so the residual
    // stream norm should not shrink from one block boundary to the next.
    let mut non_decreasing = Vec::new();
    for seed in 0..20 {
        let mut cfg = ModelConfig::new(16, 32, 4, 16, NormSetting::S3);
        cfg.causal = false;
        let m = Model::new(cfg, &Rng::new(seed)).unwrap();
        let mut r = Rng::new(1000 + seed);
        let tokens: Vec<usize> = (0..16).map(|_| r.below(16)).collect();
        let (_, cache) = m.forward(&tokens).unwrap();
        let norms = cache.residual_norms(32);
        let steps = norms.windows(2).filter(|w| w[1] >= w[0]).count();
        non_decreasing.push(steps as f64 / (norms.len() - 1) as f64);
    }
    non_decreasing.sort_by(f64::total_cmp);
    assert!(non_decreasing[10] >= 1.0, "{non_decreasing:?}");
}

#[test]
fn params_round_trip_through_json_shape() {
    let m = Model::new(tiny(NormSetting::S5), &Rng::new(0)).unwrap();
    let mut z: Params = m.params.zeros_like();
    assert_eq!(z.count(), m.params.count());
    z.scale_in_place(2.0);
    assert_eq!(z.global_norm(), 0.0);
    assert!(m.params.get("blocks.0.attn.gamma_q").is_some());
    assert!(m.params.get("blocks.0.ffn_norm.gamma").is_none());
}

