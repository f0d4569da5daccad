use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{finite_diff_grad, max_relative_error, DEFAULT_EPS};

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    Array::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rms_row(x: &[f64], weight: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().zip(weight).map(|(v, w)| v * inv * w).collect()
}

/// Scalar reimplementation of the dynamic coefficients for one token:
/// returns (beta[r], mix[r][c]).
fn oracle_coefficients(
    h: &[Vec<f64>],
    beta0: &[f64],
    mix0: &[Vec<f64>],
    p: &DynamicProjections<f64>,
    toggles: Toggles,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let w = h[0].len();
    let c = mix0[0].len();
    let act = |v: f64| if toggles.use_tanh { v.tanh() } else { v };
    let (sb, sa) = if toggles.use_scale {
        (p.s_beta, p.s_alpha)
    } else {
        (1.0, 1.0)
    };
    let mut beta = Vec::new();
    let mut mix = Vec::new();
    for (i, row) in h.iter().enumerate() {
        let hb = if toggles.use_norm {
            rms_row(row, p.norm_weight.data())
        } else {
            row.clone()
        };
        beta.push(sb * act(dot(&hb, p.w_beta.data())) + beta0[i]);
        let mut mrow = Vec::new();
        for j in 0..c {
            let col: Vec<f64> = (0..w).map(|k| p.w_mix.data()[k * c + j]).collect();
            mrow.push(sa * act(dot(&hb, &col)) + mix0[i][j]);
        }
        mix.push(mrow);
    }
    (beta, mix)
}

fn rows(a: &Array<f64>, token: usize) -> Vec<Vec<f64>> {
    let s = a.shape();
    let (r, w) = (s[1], s[2]);
    (0..r)
        .map(|i| a.data()[(token * r + i) * w..(token * r + i + 1) * w].to_vec())
        .collect()
}

fn random_projections(rng: &mut ChaCha8Rng, w: usize, c: usize) -> DynamicProjections<f64> {
    DynamicProjections {
        w_beta: rand_array(rng, &[w]),
        w_mix: rand_array(rng, &[w, c]),
        s_beta: rng.random_range(0.1..1.0),
        s_alpha: rng.random_range(0.1..1.0),
        norm_weight: rand_array(rng, &[w]),
    }
}

#[test]
fn split_examples() {
    let mut tape = Tape::<f64>::new();
    let h = tape.constant(Array::from_f64([1, 4], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let s = split_fractions(&mut tape, h, 2).unwrap();
    assert_eq!(tape.shape(s.var), [1, 2, 2]);
    assert_eq!(tape.value(s.var).data(), [1.0, 2.0, 3.0, 4.0]);
    assert_eq!(tape.value(s.var).at(&[0, 1, 0]), 3.0);
    let one = split_fractions(&mut tape, h, 1).unwrap();
    assert_eq!(tape.shape(one.var), [1, 1, 4]);
}

#[test]
fn split_merge_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_array(&mut rng, &[5, 64]);
    let mut tape = Tape::new();
    let h = tape.constant(x.clone());
    let s = split_fractions(&mut tape, h, 4).unwrap();
    let back = merge_fractions(&mut tape, &s).unwrap();
    assert_eq!(tape.value(back), &x);
}

#[test]
fn split_rejects_non_divisor() {
    let mut tape = Tape::<f64>::new();
    let h = tape.constant(Array::zeros([1, 6]));
    let err = split_fractions(&mut tape, h, 4).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let msg = err.to_string();
    assert!(msg.contains("d=6") && msg.contains("m=4"), "{msg}");
    assert!(split_fractions(&mut tape, h, 0).is_err());
    assert!(split_fractions(&mut tape, h, 12).is_err());
}

#[test]
fn static_init_values() {
    let one = fc_init_static::<f64>(1).unwrap();
    assert_eq!(one.beta.data(), [1.0]);
    assert_eq!(one.mix.data(), [1.0, 1.0]);
    let two = fc_init_static::<f64>(2).unwrap();
    assert_eq!(two.beta.data(), [1.0, 1.0]);
    assert_eq!(two.mix.shape(), [2, 4]);
    assert_eq!(two.mix.data(), [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    assert!(matches!(fc_init_static::<f64>(0), Err(Error::Config(_))));
}

#[test]
fn zero_projections_give_static_coefficients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = DynamicFCParams::<f64>::init(8, 2).unwrap();
    p.static_part.beta = rand_array(&mut rng, &[2]);
    p.static_part.mix = rand_array(&mut rng, &[2, 4]);
    let mut tape = Tape::new();
    let conn = p.bind(&mut tape, Toggles::default());
    let h = tape.constant(rand_array(&mut rng, &[3, 2, 4]));
    let coef = dynamic_coefficients(&mut tape, h, &conn).unwrap();
    for t in 0..3 {
        assert_eq!(&tape.value(coef.beta).data()[t * 2..t * 2 + 2], p.static_part.beta.data());
        assert_eq!(&tape.value(coef.mix).data()[t * 8..t * 8 + 8], p.static_part.mix.data());
    }
}

#[test]
fn dynamic_coefficients_match_scalar_oracle() {
    let togglesets = [
        Toggles::default(),
        Toggles { use_norm: false, ..Toggles::default() },
        Toggles { use_tanh: false, ..Toggles::default() },
        Toggles { use_scale: false, ..Toggles::default() },
        Toggles { use_norm: false, use_tanh: false, use_scale: false },
    ];
    for (k, toggles) in togglesets.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        let (m, w, tokens) = (2, 3, 4);
        let mut p = DynamicFCParams::<f64>::init(m * w, m).unwrap();
        p.static_part.beta = rand_array(&mut rng, &[m]);
        p.static_part.mix = rand_array(&mut rng, &[m, 2 * m]);
        p.dynamic = random_projections(&mut rng, w, 2 * m);
        let x = rand_array(&mut rng, &[tokens, m, w]);
        let mut tape = Tape::new();
        let conn = p.bind(&mut tape, toggles);
        let h = tape.constant(x.clone());
        let coef = dynamic_coefficients(&mut tape, h, &conn).unwrap();
        let mix0: Vec<Vec<f64>> = p.static_part.mix.data().chunks(2 * m).map(|r| r.to_vec()).collect();
        for t in 0..tokens {
            let (beta, mix) =
                oracle_coefficients(&rows(&x, t), p.static_part.beta.data(), &mix0, &p.dynamic, toggles);
            for i in 0..m {
                let got = tape.value(coef.beta).data()[t * m + i];
                assert!((got - beta[i]).abs() <= 1e-12, "{toggles:?} beta");
                for j in 0..2 * m {
                    let got = tape.value(coef.mix).data()[(t * m + i) * 2 * m + j];
                    assert!((got - mix[i][j]).abs() <= 1e-12, "{toggles:?} mix");
                }
            }
        }
    }
}

#[test]
fn coefficient_width_mismatch_is_dimension_error() {
    let p = DynamicFCParams::<f64>::init(8, 2).unwrap();
    let mut tape = Tape::new();
    let conn = p.bind(&mut tape, Toggles::default());
    let h = tape.constant(Array::zeros([1, 2, 3]));
    assert!(matches!(dynamic_coefficients(&mut tape, h, &conn), Err(Error::Dimension(_))));
}

#[test]
fn width_at_init_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_array(&mut rng, &[3, 8]);
    let mut tape = Tape::new();
    let conn = fc_init_static::<f64>(4).unwrap().bind(&mut tape);
    let h = tape.constant(x.clone());
    let s = split_fractions(&mut tape, h, 4).unwrap();
    let w = Connection::Frac(&conn).width(&mut tape, Stream::Frac(s)).unwrap();
    assert_eq!(tape.value(w.layer_input), &x);
    assert_eq!(tape.value(w.carry.var()).data(), x.data());
}

#[test]
fn width_matches_brute_force_product() {
    let mut tape = Tape::<f64>::new();
    let conn = ConnectionVars {
        beta: tape.constant(Array::ones([2])),
        mix: tape.constant(
            Array::from_f64([2, 4], &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap(),
        ),
        dynamic: None,
    };
    let h = tape.constant(Array::from_f64([1, 4], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let s = split_fractions(&mut tape, h, 2).unwrap();
    let w = Connection::Frac(&conn).width(&mut tape, Stream::Frac(s)).unwrap();
    assert_eq!(tape.value(w.layer_input).data(), [0.0, 1.0, 1.0, 0.0]);
    assert_eq!(tape.value(w.carry.var()).data(), [1.0, 0.0, 0.0, 1.0]);

    // random mix against an explicit double loop
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (m, wd) = (3, 2);
    let mix = rand_array(&mut rng, &[m, 2 * m]);
    let x = rand_array(&mut rng, &[2, m * wd]);
    let mut tape = Tape::new();
    let conn = ConnectionVars {
        beta: tape.constant(Array::ones([m])),
        mix: tape.constant(mix.clone()),
        dynamic: None,
    };
    let h = tape.constant(x.clone());
    let s = split_fractions(&mut tape, h, m).unwrap();
    let w = Connection::Frac(&conn).width(&mut tape, Stream::Frac(s)).unwrap();
    for t in 0..2 {
        for j in 0..2 * m {
            for k in 0..wd {
                let want: f64 = (0..m)
                    .map(|i| mix.data()[i * 2 * m + j] * x.data()[t * m * wd + i * wd + k])
                    .sum();
                let got = if j < m {
                    tape.value(w.layer_input).data()[t * m * wd + j * wd + k]
                } else {
                    tape.value(w.carry.var()).data()[t * m * wd + (j - m) * wd + k]
                };
                assert!((got - want).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn width_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mix = rand_array(&mut rng, &[2, 4]);
    let x = rand_array(&mut rng, &[3, 6]);
    let run = |scale: f64| {
        let mut tape = Tape::new();
        let conn = ConnectionVars {
            beta: tape.constant(Array::ones([2])),
            mix: tape.constant(mix.clone()),
            dynamic: None,
        };
        let h = tape.constant(x.map(|v| v * scale));
        let s = split_fractions(&mut tape, h, 2).unwrap();
        let w = Connection::Frac(&conn).width(&mut tape, Stream::Frac(s)).unwrap();
        (tape.value(w.layer_input).clone(), tape.value(w.carry.var()).clone())
    };
    let (a, ca) = run(1.0);
    let (b, cb) = run(-2.5);
    for (u, v) in a.data().iter().zip(b.data()).chain(ca.data().iter().zip(cb.data())) {
        assert!((u * -2.5 - v).abs() <= 1e-12 * v.abs().max(1.0));
    }
    let (z, cz) = run(0.0);
    assert!(z.data().iter().chain(cz.data()).all(|&v| v == 0.0));
}

#[test]
fn depth_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (m, d) = (2, 4);
    let out = rand_array(&mut rng, &[2, d]);
    let carry = rand_array(&mut rng, &[2, m, d / m]);
    let beta = rand_array(&mut rng, &[m]);
    let mut tape = Tape::new();
    let y = tape.constant(out.clone());
    let cv = tape.constant(carry.clone());
    let state = FractionState { var: cv, frac_rate: m, width: d / m };
    let b = tape.constant(beta.clone());
    let next = fc_depth(&mut tape, y, b, &state).unwrap();
    for t in 0..2 {
        for i in 0..m {
            for k in 0..d / m {
                let idx = t * d + i * (d / m) + k;
                let want = beta.data()[i] * out.data()[idx] + carry.data()[idx];
                assert!((tape.value(next.var).data()[idx] - want).abs() <= 1e-12);
            }
        }
    }
    let zero = tape.constant(Array::zeros([m]));
    let next = fc_depth(&mut tape, y, zero, &state).unwrap();
    assert_eq!(tape.value(next.var), &carry);
    let bad = tape.constant(Array::zeros([2, 6]));
    assert!(matches!(fc_depth(&mut tape, bad, b, &state), Err(Error::Dimension(_))));
}

fn linear_layer(weight: Var) -> impl FnOnce(&mut Tape<f64>, Var) -> Result<Var> {
    move |tape, x| tape.matmul(x, weight)
}

#[test]
fn fc_at_init_equals_residual_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let d = 8;
    let x = rand_array(&mut rng, &[3, d]);
    let wt = rand_array(&mut rng, &[d, d]);
    let nw = rand_array(&mut rng, &[d]);
    for m in [1, 2, 4] {
        let mut tape = Tape::new();
        let h = tape.constant(x.clone());
        let w = tape.constant(wt.clone());
        let norm = tape.constant(nw.clone());
        let want = residual_step(&mut tape, h, norm, |tape, x| tape.matmul(x, w)).unwrap();

        let p = DynamicFCParams::<f64>::init(d, m).unwrap();
        let conn = p.bind(&mut tape, Toggles::default());
        let s = split_fractions(&mut tape, h, m).unwrap();
        let next = Connection::Frac(&conn)
            .step(&mut tape, Stream::Frac(s), |tape, x| {
                let x = tape.rms_norm(x, norm, RMS_EPS)?;
                tape.matmul(x, w)
            })
            .unwrap();
        let Stream::Frac(next) = next else { unreachable!() };
        let got = merge_fractions(&mut tape, &next).unwrap();
        assert_eq!(tape.value(got), tape.value(want), "m={m}");
    }
}

#[test]
fn expand_and_pool() {
    let mut tape = Tape::<f64>::new();
    let h = tape.constant(Array::from_f64([1, 2], &[1.0, 2.0]).unwrap());
    let one = hc_expand(&mut tape, h, 1).unwrap();
    assert_eq!(tape.value(one).data(), [1.0, 2.0]);
    let three = hc_expand(&mut tape, h, 3).unwrap();
    assert_eq!(tape.shape(three), [1, 3, 2]);
    assert_eq!(tape.value(three).data(), [1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    let pooled = hc_pool(&mut tape, three).unwrap();
    assert_eq!(tape.value(pooled).data(), [3.0, 6.0]);
    let pooled_one = hc_pool(&mut tape, one).unwrap();
    assert_eq!(tape.value(pooled_one).data(), [1.0, 2.0]);
    let two = tape.constant(Array::from_f64([1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let pooled = hc_pool(&mut tape, two).unwrap();
    assert_eq!(tape.value(pooled).data(), [4.0, 6.0]);
    assert!(matches!(hc_expand(&mut tape, h, 0), Err(Error::Config(_))));
}

#[test]
fn hc_n1_init_is_residual_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let d = 6;
    let x = rand_array(&mut rng, &[2, d]);
    let wt = rand_array(&mut rng, &[d, d]);
    let nw = rand_array(&mut rng, &[d]);
    for dynamic in [false, true] {
        let mut tape = Tape::new();
        let h = tape.constant(x.clone());
        let w = tape.constant(wt.clone());
        let norm = tape.constant(nw.clone());
        let want = residual_step(&mut tape, h, norm, |tape, x| tape.matmul(x, w)).unwrap();
        let conn = HyperParams::<f64>::init(1, d, dynamic)
            .unwrap()
            .bind(&mut tape, Toggles::default());
        let hh = hc_expand(&mut tape, h, 1).unwrap();
        let next = hc_step(&mut tape, hh, &conn, |tape, x| {
            let x = tape.rms_norm(x, norm, RMS_EPS)?;
            tape.matmul(x, w)
        })
        .unwrap();
        let got = hc_pool(&mut tape, next).unwrap();
        assert_eq!(tape.value(got), tape.value(want));
    }
}

#[test]
fn hc_zero_layer_keeps_carry() {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let (n, d) = (3, 4);
    let mut p = HyperParams::<f64>::init(n, d, false).unwrap();
    p.a_r = rand_array(&mut rng, &[n, n]);
    let x = rand_array(&mut rng, &[1, n, d]);
    let mut tape = Tape::new();
    let conn = p.bind(&mut tape, Toggles::default());
    let h = tape.constant(x.clone());
    let out = hc_step(&mut tape, h, &conn, |tape, x| Ok(tape.scale(x, 0.0))).unwrap();
    for j in 0..n {
        for k in 0..d {
            let want: f64 = (0..n).map(|i| p.a_r.data()[i * n + j] * x.data()[i * d + k]).sum();
            assert!((tape.value(out).data()[j * d + k] - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn dhc_n2_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (n, d, tokens) = (2, 3, 2);
    let mut p = HyperParams::<f64>::init(n, d, true).unwrap();
    p.beta = rand_array(&mut rng, &[n]);
    p.a_m = rand_array(&mut rng, &[n]);
    p.a_r = rand_array(&mut rng, &[n, n]);
    p.dynamic = Some(random_projections(&mut rng, d, n + 1));
    let wt = rand_array(&mut rng, &[d, d]);
    let x = rand_array(&mut rng, &[tokens, n, d]);
    let mut tape = Tape::new();
    let conn = p.bind(&mut tape, Toggles::default());
    let h = tape.constant(x.clone());
    let w = tape.constant(wt.clone());
    let out = hc_step(&mut tape, h, &conn, linear_layer(w)).unwrap();

    let mix = p.mix();
    let mix0: Vec<Vec<f64>> = mix.data().chunks(n + 1).map(|r| r.to_vec()).collect();
    for t in 0..tokens {
        let hr = rows(&x, t);
        let (beta, mx) =
            oracle_coefficients(&hr, p.beta.data(), &mix0, p.dynamic.as_ref().unwrap(), Toggles::default());
        let h0: Vec<f64> = (0..d).map(|k| (0..n).map(|i| mx[i][0] * hr[i][k]).sum()).collect();
        let y: Vec<f64> = (0..d)
            .map(|j| (0..d).map(|k| h0[k] * wt.data()[k * d + j]).sum())
            .collect();
        for r in 0..n {
            for k in 0..d {
                let carry: f64 = (0..n).map(|i| mx[i][1 + r] * hr[i][k]).sum();
                let want = beta[r] * y[k] + carry;
                let got = tape.value(out).data()[(t * n + r) * d + k];
                assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
            }
        }
    }
}

#[test]
fn fc_m1_and_hc_n1_are_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let d = 5;
    let proj = random_projections(&mut rng, d, 2);
    let (b, gamma, alpha) = (0.7, 1.3, -0.4);
    let x = rand_array(&mut rng, &[3, d]);
    let wt = rand_array(&mut rng, &[d, d]);

    let run = |hyper: bool| {
        let mut tape = Tape::new();
        let h = tape.constant(x.clone());
        let w = tape.constant(wt.clone());
        let conn = if hyper {
            let mut p = HyperParams::<f64>::init(1, d, true).unwrap();
            p.beta.data_mut()[0] = b;
            p.a_m.data_mut()[0] = gamma;
            p.a_r.data_mut()[0] = alpha;
            p.dynamic = Some(proj.clone());
            p.bind(&mut tape, Toggles::default())
        } else {
            let mut p = DynamicFCParams::<f64>::init(d, 1).unwrap();
            p.static_part.beta.data_mut()[0] = b;
            p.static_part.mix.data_mut().copy_from_slice(&[gamma, alpha]);
            p.dynamic = proj.clone();
            p.bind(&mut tape, Toggles::default())
        };
        let out = if hyper {
            let hh = hc_expand(&mut tape, h, 1).unwrap();
            let o = hc_step(&mut tape, hh, &conn, linear_layer(w)).unwrap();
            hc_pool(&mut tape, o).unwrap()
        } else {
            let s = split_fractions(&mut tape, h, 1).unwrap();
            let o = Connection::Frac(&conn).step(&mut tape, Stream::Frac(s), linear_layer(w)).unwrap();
            let Stream::Frac(o) = o else { unreachable!() };
            merge_fractions(&mut tape, &o).unwrap()
        };
        let sq = tape.mul(out, out).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        let dy = conn.dynamic.unwrap();
        let vars = [conn.beta, conn.mix, dy.w_beta, dy.w_mix, dy.s_beta.unwrap(), dy.s_mix.unwrap(), dy.norm.unwrap()];
        let g: Vec<Array<f64>> = vars.iter().map(|v| grads.get(*v).unwrap().clone()).collect();
        (tape.value(out).clone(), g)
    };
    let (fa, ga) = run(false);
    let (fb, gb) = run(true);
    assert!(fa.max_abs_diff(&fb) <= 1e-12);
    for (a, b) in ga.iter().zip(&gb) {
        assert!(a.max_abs_diff(b) <= 1e-12);
    }
}

#[test]
fn state_widths() {
    let d = 16;
    for m in [1, 2, 4] {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Array::zeros([7, d]));
        let s = split_fractions(&mut tape, h, m).unwrap();
        assert_eq!(tape.value(s.var).numel() / 7, d);
        assert_eq!(s.scalars_per_token(), d);
    }
    for n in [1, 2, 4] {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Array::zeros([7, d]));
        let s = hc_expand(&mut tape, h, n).unwrap();
        assert_eq!(tape.value(s).numel() / 7, n * d);
    }
}

#[test]
fn dfc_step_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (m, d) = (2, 6);
    let mut p = DynamicFCParams::<f64>::init(d, m).unwrap();
    p.static_part.beta = rand_array(&mut rng, &[m]);
    p.static_part.mix = rand_array(&mut rng, &[m, 2 * m]);
    p.dynamic = random_projections(&mut rng, d / m, 2 * m);
    let x = rand_array(&mut rng, &[2, d]);
    let wt = rand_array(&mut rng, &[d, d]);
    let probe = rand_array(&mut rng, &[2, m, d / m]);

    let loss_of = |p: &DynamicFCParams<f64>, tape: &mut Tape<f64>| {
        let conn = p.bind(tape, Toggles::default());
        let h = tape.constant(x.clone());
        let w = tape.constant(wt.clone());
        let s = split_fractions(tape, h, m).unwrap();
        let out = Connection::Frac(&conn).step(tape, Stream::Frac(s), linear_layer(w)).unwrap();
        let pr = tape.constant(probe.clone());
        let weighted = tape.mul(out.var(), pr).unwrap();
        (tape.sum(weighted), conn)
    };
    let mut tape = Tape::new();
    let (loss, conn) = loss_of(&p, &mut tape);
    let grads = tape.backward(loss).unwrap();
    let dy = conn.dynamic.unwrap();

    let eval = |q: &DynamicFCParams<f64>| {
        let mut t = Tape::new();
        let (l, _) = loss_of(q, &mut t);
        t.value(l).data()[0]
    };
    let fd = finite_diff_grad(
        |a| {
            let mut q = p.clone();
            q.dynamic.w_mix = a.clone();
            eval(&q)
        },
        &p.dynamic.w_mix,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(max_relative_error(grads.get(dy.w_mix).unwrap(), &fd) < 1e-6);
    let fd = finite_diff_grad(
        |a| {
            let mut q = p.clone();
            q.static_part.beta = a.clone();
            eval(&q)
        },
        &p.static_part.beta,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(max_relative_error(grads.get(conn.beta).unwrap(), &fd) < 1e-6);
    let fd = finite_diff_grad(
        |a| {
            let mut q = p.clone();
            q.dynamic.norm_weight = a.clone();
            eval(&q)
        },
        &p.dynamic.norm_weight,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(max_relative_error(grads.get(dy.norm.unwrap()).unwrap(), &fd) < 1e-6);
}
