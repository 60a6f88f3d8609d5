use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::rng::SplitMix64;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut SplitMix64::new(seed))
}

fn check(f: impl Fn(&mut Tape, &[Var]) -> crate::Result<Var>, params: &[Tensor]) {
    let report = grad_check(f, params, GradCheckOptions::default()).unwrap();
    assert!(report.passed(), "grad check failed: {report:?}");
}

// ----- matmul ---------------------------------------------------------------

#[test]
fn matmul_identity() {
    let mut t = Tape::new();
    let m = rand_t(&[3, 3], 1);
    let i = t.constant(Tensor::eye(3));
    let mv = t.constant(m.clone());
    let c = t.matmul(i, mv).unwrap();
    assert_eq!(t.value(c), &m);
}

#[test]
fn matmul_scalar_case() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::new([1, 1], vec![2.0]).unwrap());
    let b = t.constant(Tensor::new([1, 1], vec![3.0]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let (a, b) = (rand_t(&[4, 3], 2), rand_t(&[3, 5], 3));
    let mut expected = vec![0.0; 20];
    for i in 0..4 {
        for j in 0..5 {
            for p in 0..3 {
                expected[i * 5 + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    let mut t = Tape::new();
    let (av, bv) = (t.constant(a), t.constant(b));
    let c = t.matmul(av, bv).unwrap();
    for (x, y) in t.value(c).data().iter().zip(&expected) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros([2, 3]));
    let b = t.constant(Tensor::zeros([2, 3]));
    match t.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

// ----- hadamard -------------------------------------------------------------

#[test]
fn hadamard_identities_and_oracle() {
    let a = rand_t(&[3, 4], 4);
    let b = rand_t(&[3, 4], 5);
    let mut t = Tape::new();
    let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
    let ones = t.constant(Tensor::ones([3, 4]));
    let zeros = t.constant(Tensor::zeros([3, 4]));
    let x = t.hadamard(av, ones).unwrap();
    assert_eq!(t.value(x), &a);
    let z = t.hadamard(av, zeros).unwrap();
    assert!(t.value(z).data().iter().all(|&v| v == 0.0));
    let p = t.hadamard(av, bv).unwrap();
    for k in 0..12 {
        assert!((t.value(p).data()[k] - a.data()[k] * b.data()[k]).abs() < 1e-12);
    }
    let c = t.constant(Tensor::zeros([4, 3]));
    assert!(matches!(t.hadamard(av, c), Err(Error::Shape { .. })));
}

// ----- softmax --------------------------------------------------------------

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(&[0.7, 0.7, 0.7]));
    let s = t.softmax(x, 0).unwrap();
    for v in t.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = t.constant(Tensor::vector(&[0.0, 3f64.ln()]));
    let s = t.softmax(x, 0).unwrap();
    assert!((t.value(s).data()[0] - 0.25).abs() < 1e-15);
    assert!((t.value(s).data()[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_matches_direct_formula() {
    let x = rand_t(&[7], 6);
    let denom: f64 = x.data().iter().map(|v| v.exp()).sum();
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let s = t.softmax(xv, 0).unwrap();
    for (k, v) in t.value(s).data().iter().enumerate() {
        assert!((v - x.data()[k].exp() / denom).abs() < 1e-12);
    }
}

#[test]
fn softmax_rejects_nan() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(&[0.0, f64::NAN]));
    assert!(matches!(t.softmax(x, 0), Err(Error::Numeric { .. })));
}

#[test]
fn softmax_large_inputs_are_stable() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(&[1000.0, 1000.0]));
    let s = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(s).data(), &[0.5, 0.5]);
}

// ----- cosine ---------------------------------------------------------------

#[test]
fn cosine_examples() {
    let u = rand_t(&[6], 7);
    let mut t = Tape::new();
    let uv = t.constant(u.clone());
    let neg = t.constant(u.map(|x| -x));
    let c = t.cosine(uv, uv).unwrap();
    assert!((t.value(c).item() - 1.0).abs() < 1e-15);
    let c = t.cosine(uv, neg).unwrap();
    assert!((t.value(c).item() + 1.0).abs() < 1e-15);
    let e1 = t.constant(Tensor::vector(&[1.0, 0.0]));
    let e2 = t.constant(Tensor::vector(&[0.0, 1.0]));
    let c = t.cosine(e1, e2).unwrap();
    assert_eq!(t.value(c).item(), 0.0);
}

#[test]
fn cosine_zero_norm_is_an_error() {
    let mut t = Tape::new();
    let z = t.constant(Tensor::zeros([3]));
    let u = t.constant(Tensor::ones([3]));
    assert!(matches!(t.cosine(z, u), Err(Error::Numeric { .. })));
}

// ----- layer norm -----------------------------------------------------------

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let g1 = t.constant(Tensor::ones([5]));
    let b0 = t.constant(Tensor::zeros([5]));
    let c = t.constant(Tensor::full([5], 3.2));
    let y = t.layer_norm(c, g1, b0, 1e-5).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));

    let x = rand_t(&[5], 8);
    let xv = t.constant(x.clone());
    let g0 = t.constant(Tensor::zeros([5]));
    let bias = rand_t(&[5], 9);
    let bv = t.constant(bias.clone());
    let y = t.layer_norm(xv, g0, bv, 1e-5).unwrap();
    assert_eq!(t.value(y), &bias);
}

#[test]
fn layer_norm_matches_two_pass_statistics() {
    let x = rand_t(&[9], 10);
    let n = 9.0;
    let mean = x.data().iter().sum::<f64>() / n;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let g = t.constant(Tensor::ones([9]));
    let b = t.constant(Tensor::zeros([9]));
    let y = t.layer_norm(xv, g, b, 1e-5).unwrap();
    let out = t.value(y).data();
    for (k, v) in out.iter().enumerate() {
        assert!((v - (x.data()[k] - mean) / (var + 1e-5).sqrt()).abs() < 1e-10);
    }
    assert!((out.iter().sum::<f64>() / n).abs() < 1e-10);
}

// ----- KL -------------------------------------------------------------------

#[test]
fn kl_examples() {
    let mut t = Tape::new();
    let p = t.constant(Tensor::vector(&[0.2, 0.3, 0.5]));
    let k = t.kl_divergence(p, p).unwrap();
    assert_eq!(t.value(k).item(), 0.0);

    let q = t.constant(Tensor::vector(&[1.0, 0.0]));
    let p = t.constant(Tensor::vector(&[0.5, 0.5]));
    let k = t.kl_divergence(q, p).unwrap();
    assert!((t.value(k).item() - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn kl_matches_direct_summation() {
    let mut rng = SplitMix64::new(12);
    let mut draw = || {
        let raw: Vec<f64> = (0..5).map(|_| rng.next_f64() + 0.05).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let (q, p) = (draw(), draw());
    let expected: f64 = q.iter().zip(&p).map(|(a, b)| a * (a / b).ln()).sum();
    let mut t = Tape::new();
    let (qv, pv) = (t.constant(Tensor::vector(&q)), t.constant(Tensor::vector(&p)));
    let k = t.kl_divergence(qv, pv).unwrap();
    assert!((t.value(k).item() - expected).abs() < 1e-12);
}

#[test]
fn kl_with_zero_model_mass_is_an_error() {
    let mut t = Tape::new();
    let q = t.constant(Tensor::vector(&[0.5, 0.5]));
    let p = t.constant(Tensor::vector(&[1.0, 0.0]));
    assert!(matches!(t.kl_divergence(q, p), Err(Error::Numeric { .. })));
}

// ----- backward ---------------------------------------------------------------

#[test]
fn sum_gradient_is_ones() {
    let mut t = Tape::new();
    let w = t.param(rand_t(&[3, 4], 13));
    let s = t.sum_all(w);
    t.backward(s).unwrap();
    assert_eq!(t.grad(w).unwrap(), &Tensor::ones([3, 4]));
}

#[test]
fn zero_scaled_loss_gives_zero_gradient() {
    let mut t = Tape::new();
    let w = t.param(rand_t(&[3, 4], 14));
    let e = t.exp(w);
    let s = t.sum_all(e);
    let l = t.scale(s, 0.0);
    t.backward(l).unwrap();
    assert!(t.grad(w).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn repeated_backward_accumulates() {
    let mut t = Tape::new();
    let w = t.param(rand_t(&[2, 2], 15));
    let s = t.sum_all(w);
    t.backward(s).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(w).unwrap(), &Tensor::full([2, 2], 2.0));
    t.zero_grad();
    assert!(t.grad(w).is_none());
}

#[test]
fn non_scalar_seed_is_a_usage_error() {
    let mut t = Tape::new();
    let w = t.param(Tensor::zeros([2]));
    assert!(matches!(t.backward(w), Err(Error::Usage(_))));
}

#[test]
fn composite_of_all_primitives_matches_finite_differences() {
    let params = [rand_t(&[3, 4], 16), rand_t(&[4, 3], 17), rand_t(&[4], 18)];
    check(
        |t, p| {
            let m = t.matmul(p[0], p[1])?; // 3x3
            let tr = t.transpose(m)?;
            let a = t.add(m, tr)?;
            let s = t.sub(a, m)?;
            let h = t.hadamard(s, m)?;
            let sc = t.scale(h, 0.7);
            let parts = t.split(p[0], 1, &[3, 1])?;
            let cat = t.concat(&[sc, parts[0]], 0)?; // 6x3
            let ex = t.exp(cat);
            let ln = t.log(ex)?;
            let sm = t.softmax(ln, 1)?;
            let g = t.gelu(sm);
            let gain = t.slice(p[2], 0, 0, 3)?;
            let bias = t.slice(p[2], 0, 1, 3)?;
            let ln2 = t.layer_norm(g, gain, bias, 1e-5)?;
            let nrm = t.l2_normalize(ln2)?;
            let top = t.slice(nrm, 0, 0, 3)?;
            let bot = t.slice(nrm, 0, 3, 3)?;
            let cos = t.cosine(top, bot)?;
            let mean = t.mean(ln2, 0)?;
            let pm = t.softmax(mean, 0)?;
            let q = t.constant(Tensor::vector(&[0.5, 0.0, 0.5]));
            let kl = t.kl_divergence(q, pm)?;
            let c = t.sum_all(cos);
            let both = stack_scalars(t, c, kl)?;
            Ok(t.mean_all(both))
        },
        &params,
    );
}

fn stack_scalars(t: &mut Tape, a: Var, b: Var) -> crate::Result<Var> {
    let a = t.reshape(a, &[1])?;
    let b = t.reshape(b, &[1])?;
    t.concat(&[a, b], 0)
}

// ----- per-primitive gradient checks -----------------------------------------

#[test]
fn grad_matmul() {
    check(|t, p| { let m = t.matmul(p[0], p[1])?; let e = t.exp(m); Ok(t.sum_all(e)) },
        &[rand_t(&[3, 4], 20), rand_t(&[4, 2], 21)]);
}

#[test]
fn grad_batch_matmul() {
    check(|t, p| { let m = t.batch_matmul(p[0], p[1])?; let e = t.gelu(m); Ok(t.sum_all(e)) },
        &[rand_t(&[2, 3, 3, 4], 22), rand_t(&[2, 3, 4, 2], 23)]);
}

#[test]
fn grad_add_sub_broadcast() {
    check(|t, p| { let a = t.add(p[0], p[1])?; let s = t.sub(a, p[2])?; let h = t.hadamard(s, s)?; Ok(t.sum_all(h)) },
        &[rand_t(&[2, 3, 4], 24), rand_t(&[3, 4], 25), rand_t(&[4], 26)]);
}

#[test]
fn grad_hadamard_scale() {
    check(|t, p| { let h = t.hadamard(p[0], p[1])?; let s = t.scale(h, -1.3); let e = t.exp(s); Ok(t.sum_all(e)) },
        &[rand_t(&[3, 4], 27), rand_t(&[3, 4], 28)]);
}

#[test]
fn grad_concat_split_reshape_permute() {
    check(|t, p| {
        let c = t.concat(&[p[0], p[1]], 1)?; // 2x5x3
        let parts = t.split(c, 1, &[1, 4])?;
        let r = t.reshape(parts[1], &[8, 3])?;
        let pr = t.permute(c, &[2, 0, 1])?;
        let w = t.constant(rand_t(&[3, 2, 5], 99));
        let hw = t.hadamard(pr, w)?;
        let a = t.sum_all(hw);
        let b = t.exp(r);
        let b = t.sum_all(b);
        let both = stack_scalars(t, a, b)?;
        Ok(t.sum_all(both))
    }, &[rand_t(&[2, 2, 3], 29), rand_t(&[2, 3, 3], 30)]);
}

#[test]
fn grad_mean_softmax_kl() {
    check(|t, p| {
        let m = t.mean(p[0], 1)?; // 3x4
        let s = t.softmax(m, 1)?;
        let q = t.constant(Tensor::new([3, 4], vec![0.25, 0.25, 0.5, 0.0, 1.0, 0.0, 0.0, 0.0, 0.1, 0.2, 0.3, 0.4]).unwrap());
        let k = t.kl_divergence(q, s)?;
        Ok(t.mean_all(k))
    }, &[rand_t(&[3, 5, 4], 31)]);
}

#[test]
fn grad_kl_wrt_first_argument() {
    check(|t, p| {
        let q = t.softmax(p[0], 1)?;
        let r = t.softmax(p[1], 1)?;
        let k = t.kl_divergence(q, r)?;
        Ok(t.sum_all(k))
    }, &[rand_t(&[2, 5], 32), rand_t(&[2, 5], 33)]);
}

#[test]
fn grad_layer_norm() {
    check(|t, p| {
        let y = t.layer_norm(p[0], p[1], p[2], 1e-5)?;
        let w = t.constant(rand_t(&[4, 6], 98));
        let h = t.hadamard(y, w)?;
        Ok(t.sum_all(h))
    }, &[rand_t(&[4, 6], 34), rand_t(&[6], 35), rand_t(&[6], 36)]);
}

#[test]
fn grad_gelu_exp_log() {
    check(|t, p| {
        let g = t.gelu(p[0]);
        let e = t.exp(g);
        let l = t.log(e)?;
        let e2 = t.exp(p[0]);
        let l2 = t.log(e2)?;
        let h = t.hadamard(l, l2)?;
        Ok(t.sum_all(h))
    }, &[rand_t(&[10], 37)]);
}

#[test]
fn grad_l2_normalize_cosine() {
    check(|t, p| {
        let n = t.l2_normalize(p[0])?;
        let w = t.constant(rand_t(&[3, 5], 97));
        let h = t.hadamard(n, w)?;
        let c = t.cosine(p[0], p[1])?;
        let a = t.sum_all(h);
        let b = t.sum_all(c);
        let both = stack_scalars(t, a, b)?;
        Ok(t.sum_all(both))
    }, &[rand_t(&[3, 5], 38), rand_t(&[3, 5], 39)]);
}

#[test]
fn grad_gather() {
    check(|t, p| {
        let g = t.gather(p[0], &[2, 0, 2, 1])?;
        let e = t.exp(g);
        Ok(t.sum_all(e))
    }, &[rand_t(&[3, 4], 40)]);
}

#[test]
fn grad_pairwise_distance() {
    check(|t, p| {
        let d = t.pairwise_distance(p[0], p[1])?;
        let s = t.scale(d, -1.0);
        let sm = t.softmax(s, 1)?;
        let w = t.constant(rand_t(&[3, 4], 96));
        let h = t.hadamard(sm, w)?;
        Ok(t.sum_all(h))
    }, &[rand_t(&[3, 5], 41), rand_t(&[4, 5], 42)]);
}

#[test]
fn grad_l2_norm() {
    check(|t, p| {
        let n = t.l2_norm(p[0])?;
        let w = t.constant(rand_t(&[3], 97));
        let h = t.hadamard(n, w)?;
        Ok(t.sum_all(h))
    }, &[rand_t(&[3, 5], 43)]);
}

#[test]
fn grad_scale_by() {
    check(|t, p| {
        let e = t.exp(p[1]);
        let y = t.scale_by(p[0], e)?;
        let w = t.constant(rand_t(&[2, 3], 98));
        let h = t.hadamard(y, w)?;
        Ok(t.sum_all(h))
    }, &[rand_t(&[2, 3], 44), rand_t(&[1], 45)]);
}

#[test]
fn scale_by_rejects_non_scalar_factor() {
    let mut t = Tape::new();
    let x = t.constant(rand_t(&[2, 3], 46));
    let s = t.constant(rand_t(&[2], 47));
    assert!(matches!(t.scale_by(x, s), Err(Error::Shape { .. })));
}

#[test]
fn l2_norm_values() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap());
    let n = t.l2_norm(x).unwrap();
    assert_eq!(t.value(n).data(), &[5.0, 0.0]);
}

// ----- grad_check harness ------------------------------------------------------

#[test]
fn grad_check_quadratic_is_tight() {
    let report = grad_check(
        |t, p| {
            let sq = t.hadamard(p[0], p[0])?;
            Ok(t.sum_all(sq))
        },
        &[rand_t(&[3, 4], 43)],
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-8, "{report:?}");
}

#[test]
fn grad_check_detects_corrupted_adjoint() {
    // sin(x) with a deliberately wrong adjoint (cos(x) + 0.5).
    let sabotaged = |t: &mut Tape, p: &[Var]| {
        let s = t.custom(
            &[p[0]],
            |x| Ok(x[0].map(f64::sin)),
            Box::new(|x, _y, g| {
                let d = x[0].data().iter().zip(g.data()).map(|(v, gv)| gv * (v.cos() + 0.5)).collect();
                vec![Tensor::new(x[0].shape().to_vec(), d).unwrap()]
            }),
        )?;
        Ok(t.sum_all(s))
    };
    let opts = GradCheckOptions::default();
    let report = grad_check(sabotaged, &[rand_t(&[4], 44)], opts).unwrap();
    assert!(!report.passed());
    assert!(report.max_rel_error() > opts.tolerance);
}

#[test]
fn custom_primitive_with_correct_adjoint_passes() {
    check(|t, p| {
        let s = t.custom(
            &[p[0]],
            |x| Ok(x[0].map(f64::sin)),
            Box::new(|x, _y, g| {
                let d = x[0].data().iter().zip(g.data()).map(|(v, gv)| gv * v.cos()).collect();
                vec![Tensor::new(x[0].shape().to_vec(), d).unwrap()]
            }),
        )?;
        Ok(t.sum_all(s))
    }, &[rand_t(&[4], 45)]);
}

#[test]
fn forward_replay_is_bit_identical() {
    let run = || {
        let mut t = Tape::new();
        let a = t.param(rand_t(&[5, 6], 46));
        let b = t.param(rand_t(&[6, 5], 47));
        let m = t.matmul(a, b).unwrap();
        let s = t.softmax(m, 1).unwrap();
        let l = t.mean_all(s);
        t.backward(l).unwrap();
        (t.value(s).clone(), t.grad(a).unwrap().clone())
    };
    let (x, gx) = run();
    let (y, gy) = run();
    assert_eq!(x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(gx, gy);
}

// ----- properties -------------------------------------------------------------

fn vec_in_range(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.0f64..1.0, n)
}

proptest! {
    #[test]
    fn softmax_slices_sum_to_one(xs in vec_in_range(12), scale in 0.1f64..10.0) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([3, 4], xs.iter().map(|v| v * scale).collect()).unwrap());
        let s = t.softmax(x, 1).unwrap();
        for r in 0..3 {
            let row = t.value(s).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_diagonal(a in vec_in_range(6), b in vec_in_range(6)) {
        let mut t = Tape::new();
        let (av, bv) = (t.constant(Tensor::vector(&a)), t.constant(Tensor::vector(&b)));
        let p = t.softmax(av, 0).unwrap();
        let q = t.softmax(bv, 0).unwrap();
        let k = t.kl_divergence(q, p).unwrap();
        prop_assert!(t.value(k).item() >= -1e-12);
        let k0 = t.kl_divergence(p, p).unwrap();
        prop_assert!(t.value(k0).item().abs() < 1e-12);
    }

    #[test]
    fn primitive_gradients_on_random_inputs(a in vec_in_range(12), b in vec_in_range(12)) {
        let pa = Tensor::new([3, 4], a).unwrap();
        let pb = Tensor::new([4, 3], b).unwrap();
        let report = grad_check(|t, p| {
            let m = t.matmul(p[0], p[1])?;
            let g = t.gelu(m);
            let s = t.softmax(g, 0)?;
            let e = t.exp(s);
            Ok(t.sum_all(e))
        }, &[pa, pb], GradCheckOptions::default()).unwrap();
        prop_assert!(report.passed(), "{:?}", report);
    }
}
