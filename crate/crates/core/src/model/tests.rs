use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::connections::Toggles;
use crate::numerics::{finite_diff_grad, max_relative_error, Array, Tape, RMS_EPS};

fn tiny(scheme: Scheme, rate: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 16,
        scheme,
        rate,
        dropout: 0.0,
        toggles: Toggles::default(),
        seed: 7,
    }
}

fn tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

/// Moves every connection parameter away from its initial value.
fn perturb_connections<T: crate::numerics::Scalar>(model: &mut Model<T>, seed: u64, amp: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut().params_mut() {
        if p.kind.is_connection() {
            for v in p.value.data_mut() {
                *v += T::from_f64_lossy(rng.random_range(-amp..amp));
            }
        }
    }
}

#[test]
fn config_validation() {
    let ok = tiny(Scheme::Dfc, 4);
    assert!(ok.validate().is_ok());
    let cases = [
        ModelConfig { n_heads: 3, ..ok.clone() },
        ModelConfig { rate: 3, ..ok.clone() },
        ModelConfig { rate: 32, ..ok.clone() },
        ModelConfig { rate: 0, ..ok.clone() },
        ModelConfig { dropout: 1.0, ..ok.clone() },
        ModelConfig { d_model: 0, ..ok.clone() },
        ModelConfig { n_heads: 16, ..ok.clone() },
    ];
    for c in cases {
        assert!(matches!(c.validate(), Err(crate::Error::Config(_))), "{c:?}");
    }
    assert!(ModelConfig { rate: 3, ..tiny(Scheme::Dhc, 1) }.validate().is_ok());
    assert!("DFC".parse::<Scheme>().unwrap() == Scheme::Dfc);
    assert!("frac".parse::<Scheme>().is_err());
    assert_eq!(tiny(Scheme::Dfc, 2).label(), "dfc×2");
}

#[test]
fn layout_has_two_connections_per_layer() {
    let cfg = tiny(Scheme::Dfc, 2);
    let layout = param_layout(&cfg);
    let statics = layout.iter().filter(|s| s.name.ends_with("static_mix")).count();
    assert_eq!(statics, 2 * cfg.n_layers);
    let residual = param_layout(&tiny(Scheme::Residual, 1));
    assert!(residual.iter().all(|s| !s.kind.is_connection()));
    // identical non-connection layout across schemes
    let strip = |l: Vec<ParamSpec>| -> Vec<ParamSpec> { l.into_iter().filter(|s| !s.kind.is_connection()).collect() };
    assert_eq!(strip(layout), residual);
}

#[test]
fn parameter_count_hook() {
    for (scheme, rate) in [(Scheme::Sfc, 1), (Scheme::Sfc, 4), (Scheme::Dfc, 2), (Scheme::Dfc, 8), (Scheme::Dhc, 2), (Scheme::Shc, 3)] {
        let cfg = tiny(scheme, rate);
        let model = Model::<f32>::new(cfg.clone()).unwrap();
        let base = Model::<f32>::new(cfg.with_scheme(Scheme::Residual, 1)).unwrap();
        assert_eq!(model.params().count(), base.params().count() + model.params().connection_count());
    }
}

#[test]
fn init_equivalence_with_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base64 = Model::<f64>::new(tiny(Scheme::Residual, 1)).unwrap();
    let base32 = Model::<f32>::new(tiny(Scheme::Residual, 1)).unwrap();
    for scheme in [Scheme::Sfc, Scheme::Dfc] {
        for m in [1, 2, 4] {
            let fc64 = Model::<f64>::new(tiny(scheme, m)).unwrap();
            let fc32 = Model::<f32>::new(tiny(scheme, m)).unwrap();
            let toks = tokens(&mut rng, 2 * 5, 11);
            let a = fc64.lm_forward(&toks, 5).unwrap();
            let b = base64.lm_forward(&toks, 5).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-12, "{scheme} m={m}");
            let a = fc32.lm_forward(&toks, 5).unwrap();
            let b = base32.lm_forward(&toks, 5).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-5, "{scheme} m={m} f32");
        }
    }
}

#[test]
fn unit_rate_schemes_give_identical_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let models: Vec<Model<f64>> = [(Scheme::Residual, 1), (Scheme::Sfc, 1), (Scheme::Shc, 1), (Scheme::Dfc, 1), (Scheme::Dhc, 1)]
        .into_iter()
        .map(|(s, r)| Model::new(tiny(s, r)).unwrap())
        .collect();
    for _ in 0..10 {
        let x = tokens(&mut rng, 10, 11);
        let y = tokens(&mut rng, 10, 11);
        let losses: Vec<f64> = models.iter().map(|m| m.loss(&x, &y, 5, &ForwardOptions::default()).unwrap()).collect();
        for l in &losses[1..] {
            assert!((l - losses[0]).abs() <= 1e-12);
        }
    }
}

#[test]
fn frac_m1_and_hyper_n1_are_degenerate() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut fc = Model::<f64>::new(tiny(Scheme::Dfc, 1)).unwrap();
    perturb_connections(&mut fc, 99, 0.3);
    let hc = Model::from_store(tiny(Scheme::Dhc, 1), fc.params().clone()).unwrap();
    let x = tokens(&mut rng, 10, 11);
    let y = tokens(&mut rng, 10, 11);
    let opts = ForwardOptions::default();
    let (la, ga) = fc.loss_and_grads(&x, &y, 5, &opts).unwrap();
    let (lb, gb) = hc.loss_and_grads(&x, &y, 5, &opts).unwrap();
    assert!((la - lb).abs() <= 1e-12);
    for (a, b) in ga.iter().zip(&gb) {
        assert!(a.max_abs_diff(b) <= 1e-12);
    }
}

#[test]
fn end_to_end_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (scheme, rate) in [(Scheme::Dfc, 2), (Scheme::Dhc, 2)] {
        let mut model = Model::<f64>::new(tiny(scheme, rate)).unwrap();
        perturb_connections(&mut model, 5, 0.2);
        let x = tokens(&mut rng, 5, 11);
        let y = tokens(&mut rng, 5, 11);
        let opts = ForwardOptions::default();
        let (_, grads) = model.loss_and_grads(&x, &y, 5, &opts).unwrap();
        let mut probe = model.clone();
        for (i, g) in grads.iter().enumerate() {
            let orig = model.params().params()[i].value.clone();
            let fd = finite_diff_grad(
                |a| {
                    probe.params_mut().params_mut()[i].value = a.clone();
                    probe.loss(&x, &y, 5, &opts).unwrap()
                },
                &orig,
                1e-5,
            )
            .unwrap();
            probe.params_mut().params_mut()[i].value = orig;
            let err = max_relative_error(g, &fd);
            assert!(err <= 1e-4, "{scheme} {}: {err}", model.params().params()[i].name);
        }
    }
}

#[test]
fn zero_layers_is_unembed_of_norm_of_embed() {
    let cfg = ModelConfig { n_layers: 0, ..tiny(Scheme::Dfc, 2) };
    let model = Model::<f64>::new(cfg).unwrap();
    let toks = [3, 1, 4];
    let logits = model.lm_forward(&toks, 3).unwrap();
    let p = model.params();
    let (e, n, u) = (&p.get("embed").unwrap().value, &p.get("final_norm").unwrap().value, &p.get("unembed").unwrap().value);
    let (d, v) = (16, 11);
    for (t, &tok) in toks.iter().enumerate() {
        let row = &e.data()[tok * d..(tok + 1) * d];
        let ms = row.iter().map(|x| x * x).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for j in 0..v {
            let want: f64 = (0..d).map(|k| row[k] * inv * n.data()[k] * u.data()[k * v + j]).sum();
            assert!((logits.data()[t * v + j] - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn logits_shape_for_every_scheme() {
    for (scheme, rate) in [(Scheme::Residual, 1), (Scheme::Sfc, 4), (Scheme::Dfc, 8), (Scheme::Shc, 2), (Scheme::Dhc, 3)] {
        let model = Model::<f32>::new(tiny(scheme, rate)).unwrap();
        let logits = model.lm_forward(&[1, 2, 3, 4, 5, 6], 3).unwrap();
        assert_eq!(logits.shape(), [2, 3, 11]);
    }
}

#[test]
fn input_errors() {
    let model = Model::<f32>::new(tiny(Scheme::Dfc, 2)).unwrap();
    assert!(matches!(model.lm_forward(&[1, 11], 2), Err(crate::Error::Input(_))));
    assert!(matches!(model.lm_forward(&[], 2), Err(crate::Error::Input(_))));
    assert!(matches!(model.lm_forward(&[1, 2, 3], 2), Err(crate::Error::Contract(_))));
    assert!(matches!(model.loss(&[1, 2], &[1], 2, &ForwardOptions::default()), Err(crate::Error::Contract(_))));
}

#[test]
fn loss_examples() {
    let mut tape = Tape::<f64>::new();
    let uniform = tape.constant(Array::zeros([3, 11]));
    let l = lm_loss(&mut tape, uniform, &[0, 5, 10]).unwrap();
    assert!((tape.value(l).data()[0] - 11f64.ln()).abs() <= 1e-12);
    let mut confident = Array::<f64>::zeros([2, 4]);
    confident.data_mut()[1] = 50.0;
    confident.data_mut()[4 + 3] = 50.0;
    let c = tape.constant(confident);
    let l = lm_loss(&mut tape, c, &[1, 3]).unwrap();
    assert!(tape.value(l).data()[0] < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Array::<f64>::from_fn([4, 6], |_| rng.random_range(-3.0..3.0));
    let targets = [0, 5, 2, 2];
    let want: f64 = (0..4)
        .map(|r| {
            let row = &x.data()[r * 6..(r + 1) * 6];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - row[targets[r]]
        })
        .sum::<f64>()
        / 4.0;
    let xv = tape.constant(x);
    let l = lm_loss(&mut tape, xv, &targets).unwrap();
    assert!((tape.value(l).data()[0] - want).abs() <= 1e-12);
}

#[test]
fn taps_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let toks = tokens(&mut rng, 8, 11);
    let base = Model::<f64>::new(tiny(Scheme::Residual, 1)).unwrap();
    let taps = base.hidden_taps(&toks, 4).unwrap();
    assert_eq!(taps.sublayer_inputs.len(), 4);
    // residual taps are the running stream: the first is the embedding
    let e = &base.params().get("embed").unwrap().value;
    for (t, &tok) in toks.iter().enumerate() {
        assert_eq!(&taps.sublayer_inputs[0].data()[t * 16..(t + 1) * 16], &e.data()[tok * 16..(tok + 1) * 16]);
    }
    for m in [1, 2, 4] {
        let fc = Model::<f64>::new(tiny(Scheme::Dfc, m)).unwrap();
        assert_eq!(fc.hidden_taps(&toks, 4).unwrap(), taps);
    }
    let mut tape = Tape::new();
    let out = base.forward(&mut tape, &toks, 4, &ForwardOptions::default()).unwrap();
    assert!(matches!(out.taps(), Err(crate::Error::Contract(_))));
}

#[test]
fn attention_single_token_and_causality() {
    let model = Model::<f64>::new(tiny(Scheme::Dfc, 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Array::<f64>::from_fn([1, 16], |_| rng.random_range(-1.0..1.0));
    let mut tape = Tape::new();
    let ws = ["wq", "wk", "wv", "wo"].map(|n| tape.constant(model.params().get(&format!("layers.0.{n}")).unwrap().value.clone()));
    let xv = tape.constant(x.clone());
    let out = attention(&mut tape, xv, ws, 2, 1).unwrap();
    let v = tape.matmul(xv, ws[2]).unwrap();
    let want = tape.matmul(v, ws[3]).unwrap();
    assert!(tape.value(out).max_abs_diff(tape.value(want)) <= 1e-15);

    let toks = tokens(&mut rng, 6, 11);
    let a = model.lm_forward(&toks, 6).unwrap();
    for t in 0..6 {
        let mut changed = toks.clone();
        changed[t] = (changed[t] + 1) % 11;
        let b = model.lm_forward(&changed, 6).unwrap();
        assert_eq!(&a.data()[..t * 11], &b.data()[..t * 11], "position {t}");
        assert_ne!(&a.data()[t * 11..], &b.data()[t * 11..]);
    }
}

#[test]
fn ffn_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d, f) = (4, 6);
    let wg = Array::<f64>::from_fn([d, f], |_| rng.random_range(-1.0..1.0));
    let wu = Array::<f64>::from_fn([d, f], |_| rng.random_range(-1.0..1.0));
    let wd = Array::<f64>::from_fn([f, d], |_| rng.random_range(-1.0..1.0));
    let x = Array::<f64>::from_fn([1, d], |_| rng.random_range(-1.0..1.0));
    let mut tape = Tape::new();
    let w = [tape.constant(wg.clone()), tape.constant(wu.clone()), tape.constant(wd.clone())];
    let zero = tape.constant(Array::zeros([1, d]));
    let z = ffn(&mut tape, zero, w).unwrap();
    assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    let xv = tape.constant(x.clone());
    let y = ffn(&mut tape, xv, w).unwrap();
    let hidden: Vec<f64> = (0..f)
        .map(|j| {
            let g: f64 = (0..d).map(|k| x.data()[k] * wg.data()[k * f + j]).sum();
            let u: f64 = (0..d).map(|k| x.data()[k] * wu.data()[k * f + j]).sum();
            g / (1.0 + (-g).exp()) * u
        })
        .collect();
    for c in 0..d {
        let want: f64 = (0..f).map(|j| hidden[j] * wd.data()[j * d + c]).sum();
        assert!((tape.value(y).data()[c] - want).abs() <= 1e-12);
    }
    let eval = |wg: &Array<f64>| {
        let mut tape = Tape::new();
        let w = [tape.constant(wg.clone()), tape.constant(wu.clone()), tape.constant(wd.clone())];
        let xv = tape.constant(x.clone());
        let y = ffn(&mut tape, xv, w).unwrap();
        let s = tape.mul(y, y).unwrap();
        let s = tape.sum(s);
        (tape, s, w[0])
    };
    let (tape, s, wv) = {
        let mut tape = Tape::new();
        let wv = tape.param(wg.clone());
        let w = [wv, tape.constant(wu.clone()), tape.constant(wd.clone())];
        let xv = tape.constant(x.clone());
        let y = ffn(&mut tape, xv, w).unwrap();
        let s = tape.mul(y, y).unwrap();
        let s = tape.sum(s);
        (tape, s, wv)
    };
    let g = tape.backward(s).unwrap();
    let fd = finite_diff_grad(|a| { let (t, s, _) = eval(a); t.value(s).data()[0] }, &wg, 1e-5).unwrap();
    assert!(max_relative_error(g.get(wv).unwrap(), &fd) < 1e-6);
}

// ---- scalar oracle of one dynamic Frac-Connection layer ----

type Mat = Vec<Vec<f64>>;

fn mat(a: &Array<f64>) -> Mat {
    let c = a.shape()[1];
    a.data().chunks(c).map(|r| r.to_vec()).collect()
}

fn vecmat(x: &[f64], w: &Mat) -> Vec<f64> {
    (0..w[0].len()).map(|j| (0..x.len()).map(|k| x[k] * w[k][j]).sum()).collect()
}

fn rms(x: &[f64], w: &[f64]) -> Vec<f64> {
    let inv = 1.0 / (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64 + RMS_EPS).sqrt();
    x.iter().zip(w).map(|(a, b)| a * inv * b).collect()
}

fn rotate(x: &mut [f64], pos: usize, heads: usize) {
    let hd = x.len() / heads;
    for h in 0..heads {
        for i in 0..hd / 2 {
            let ang = pos as f64 * 10000f64.powf(-((2 * i) as f64) / hd as f64);
            let j = h * hd + 2 * i;
            let (a, b) = (x[j], x[j + 1]);
            x[j] = a * ang.cos() - b * ang.sin();
            x[j + 1] = a * ang.sin() + b * ang.cos();
        }
    }
}

fn oracle_attention(xs: &Mat, w: [&Mat; 4], heads: usize) -> Mat {
    let seq = xs.len();
    let d = xs[0].len();
    let hd = d / heads;
    let mut q: Mat = xs.iter().map(|x| vecmat(x, w[0])).collect();
    let mut k: Mat = xs.iter().map(|x| vecmat(x, w[1])).collect();
    let v: Mat = xs.iter().map(|x| vecmat(x, w[2])).collect();
    for t in 0..seq {
        rotate(&mut q[t], t, heads);
        rotate(&mut k[t], t, heads);
    }
    let mut out = vec![vec![0.0; d]; seq];
    for h in 0..heads {
        let r = h * hd..(h + 1) * hd;
        for t in 0..seq {
            let s: Vec<f64> = (0..=t)
                .map(|u| q[t][r.clone()].iter().zip(&k[u][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for (u, sv) in s.iter().enumerate() {
                for c in r.clone() {
                    out[t][c] += sv.exp() / z * v[u][c];
                }
            }
        }
    }
    out.iter().map(|o| vecmat(o, w[3])).collect()
}

fn oracle_ffn(x: &[f64], w: [&Mat; 3]) -> Vec<f64> {
    let g = vecmat(x, w[0]);
    let u = vecmat(x, w[1]);
    let h: Vec<f64> = g.iter().zip(&u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
    vecmat(&h, w[2])
}

/// One dynamic FC connection around `layer` for every token of a sequence.
fn oracle_dfc_step(
    states: &[Mat],
    model: &Model<f64>,
    prefix: &str,
    layer: impl Fn(&Mat) -> Mat,
) -> Vec<Mat> {
    let p = |n: &str| model.params().get(&format!("{prefix}.{n}")).unwrap().value.clone();
    let (beta0, mix0) = (p("static_beta"), mat(&p("static_mix")));
    let (wb, wm, norm) = (p("dyn_beta"), mat(&p("dyn_mix")), p("norm"));
    let (sb, sa) = (p("beta_scale").data()[0], p("mix_scale").data()[0]);
    let m = beta0.numel();
    let mut inputs = Vec::new();
    let mut coefs = Vec::new();
    for hrows in states {
        let mut beta = vec![0.0; m];
        let mut mix = vec![vec![0.0; 2 * m]; m];
        for i in 0..m {
            let hb = rms(&hrows[i], norm.data());
            beta[i] = sb * hb.iter().zip(wb.data()).map(|(a, b)| a * b).sum::<f64>().tanh() + beta0.data()[i];
            let proj = vecmat(&hb, &wm);
            for j in 0..2 * m {
                mix[i][j] = sa * proj[j].tanh() + mix0[i][j];
            }
        }
        let w = hrows[0].len();
        let mixed: Mat = (0..2 * m)
            .map(|j| (0..w).map(|k| (0..m).map(|i| mix[i][j] * hrows[i][k]).sum()).collect())
            .collect();
        inputs.push(mixed[..m].concat());
        coefs.push((beta, mixed[m..].to_vec()));
    }
    let outs = layer(&inputs);
    outs.iter()
        .zip(coefs)
        .map(|(y, (beta, carry))| {
            let w = carry[0].len();
            (0..m)
                .map(|i| (0..w).map(|k| beta[i] * y[i * w + k] + carry[i][k]).collect())
                .collect()
        })
        .collect()
}

#[test]
fn dfc_layer_matches_scalar_oracle() {
    let cfg = ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ffn: 12,
        scheme: Scheme::Dfc,
        rate: 2,
        dropout: 0.0,
        toggles: Toggles::default(),
        seed: 12,
    };
    let mut model = Model::<f64>::new(cfg).unwrap();
    perturb_connections(&mut model, 13, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for p in model.params_mut().params_mut() {
        if p.name.ends_with("_norm") {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let toks = [2, 7, 5];
    let got = model.hidden_taps(&toks, 3).unwrap().final_state;

    let get = |n: &str| mat(&model.params().get(n).unwrap().value);
    let vec_of = |n: &str| model.params().get(n).unwrap().value.data().to_vec();
    let e = get("embed");
    let (m, w) = (2, 4);
    let mut states: Vec<Mat> = toks.iter().map(|&t| e[t].chunks(w).map(|c| c.to_vec()).collect()).collect();
    let (wq, wk, wv, wo) = (get("layers.0.wq"), get("layers.0.wk"), get("layers.0.wv"), get("layers.0.wo"));
    let an = vec_of("layers.0.attn_norm");
    states = oracle_dfc_step(&states, &model, "layers.0.attn_conn", |xs| {
        let normed: Mat = xs.iter().map(|x| rms(x, &an)).collect();
        oracle_attention(&normed, [&wq, &wk, &wv, &wo], 2)
    });
    let (wg, wu, wd) = (get("layers.0.w_gate"), get("layers.0.w_up"), get("layers.0.w_down"));
    let fnorm = vec_of("layers.0.ffn_norm");
    states = oracle_dfc_step(&states, &model, "layers.0.ffn_conn", |xs| {
        xs.iter().map(|x| oracle_ffn(&rms(x, &fnorm), [&wg, &wu, &wd])).collect()
    });
    for (t, s) in states.iter().enumerate() {
        let flat = s.concat();
        assert_eq!(flat.len(), m * w);
        for k in 0..8 {
            assert!((got.data()[t * 8 + k] - flat[k]).abs() <= 1e-10, "token {t} dim {k}");
        }
    }
}

#[test]
fn dropout_is_seeded_and_train_only() {
    let cfg = ModelConfig { dropout: 0.5, ..tiny(Scheme::Dfc, 2) };
    let model = Model::<f64>::new(cfg).unwrap();
    let toks = [1, 2, 3, 4];
    let eval = ForwardOptions::default();
    let train = ForwardOptions { train: true, dropout_seed: 3, ..eval };
    let base = model.loss(&toks, &toks, 4, &eval).unwrap();
    let a = model.loss(&toks, &toks, 4, &train).unwrap();
    let b = model.loss(&toks, &toks, 4, &train).unwrap();
    let c = model.loss(&toks, &toks, 4, &ForwardOptions { dropout_seed: 4, ..train }).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, base);
    assert_ne!(a, c);
}

#[test]
fn checkpoint_round_trip() {
    let mut model = Model::<f32>::new(tiny(Scheme::Dhc, 2)).unwrap();
    perturb_connections(&mut model, 1, 0.1);
    let bytes = write_checkpoint(&model).unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let back: Model<f32> = read_checkpoint(&bytes).unwrap();
    assert_eq!(back, model);
    let wide: Model<f64> = read_checkpoint(&bytes).unwrap();
    assert_eq!(wide.params().count(), model.params().count());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    assert_eq!(load_checkpoint::<f32>(&path).unwrap(), model);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint::<f32>(&bad), Err(crate::Error::Input(_))));
    assert!(matches!(read_checkpoint::<f32>(&bytes[..bytes.len() - 3]), Err(crate::Error::Input(_))));
    assert!(matches!(load_checkpoint::<f32>(dir.path().join("missing")), Err(crate::Error::Io { .. })));
}
