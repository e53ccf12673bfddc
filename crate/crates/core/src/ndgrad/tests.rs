use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, CheckOptions};
use super::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in [-2,2] kept away from the kink at zero.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).unwrap()
}

#[test]
fn add_componentwise() {
    let r = t(&[2], &[1., 2.]).add(&t(&[2], &[3., 4.])).unwrap();
    assert_eq!(r.data(), &[4., 6.]);
}

#[test]
fn sigmoid_symmetry_point() {
    assert_eq!(t(&[1], &[0.]).sigmoid().unwrap().data(), &[0.5]);
}

#[test]
fn product_rule() {
    let tape = Tape::new();
    let x = tape.param(&t(&[1], &[2.]));
    let y = tape.param(&t(&[1], &[3.]));
    let g = tape.backward(&x.mul(&y).unwrap()).unwrap();
    assert_eq!(g.get(&x).unwrap().data(), &[3.]);
    assert_eq!(g.get(&y).unwrap().data(), &[2.]);
}

#[test]
fn matmul_identity_and_dot() {
    let m = t(&[2, 2], &[1., 2., 3., 4.]);
    assert_eq!(Tensor::eye(2).matmul(&m).unwrap().data(), m.data());
    let r = t(&[1, 2], &[1., 2.]).matmul(&t(&[2, 1], &[3., 4.])).unwrap();
    assert_eq!(r.shape(), &[1, 1]);
    assert_eq!(r.data(), &[11.]);
}

#[test]
fn matmul_inner_mismatch() {
    let e = t(&[2, 3], &[0.; 6]).matmul(&t(&[2, 2], &[0.; 4])).unwrap_err();
    assert!(matches!(e, NdError::ShapeMismatch { op: "matmul", .. }));
}

#[test]
fn matmul_backward_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_t(&mut rng, &[3, 4], -2., 2.);
    let b = rand_t(&mut rng, &[4, 2], -2., 2.);
    let w = rand_t(&mut rng, &[3, 2], -1., 1.);
    let rep = check(
        "matmul",
        &[a, b],
        |x| x[0].matmul(&x[1])?.mul(&w)?.sum(),
        &CheckOptions::with_tolerance(1e-5),
    )
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn softmax_examples() {
    let u = t(&[3], &[0., 0., 0.]).softmax_axis(0).unwrap();
    for v in u.data() {
        assert!((v - 1. / 3.).abs() < 1e-15);
    }
    let big = t(&[2], &[1000., 1000.]).softmax_axis(0).unwrap();
    assert_eq!(big.data(), &[0.5, 0.5]);
    let col = t(&[4, 1], &[0.3, -1., 2., 0.]).softmax_axis(0).unwrap();
    assert!((col.data().iter().sum::<f64>() - 1.).abs() < 1e-12);
    assert!(matches!(
        t(&[2], &[0., 0.]).softmax_axis(1),
        Err(NdError::InvalidAxis { axis: 1, rank: 1 })
    ));
}

#[test]
fn reduce_examples() {
    assert_eq!(t(&[2], &[3., 4.]).l2norm().unwrap().data(), &[5.]);
    let m = t(&[1, 2], &[1., 3.]).mean_axis(1).unwrap();
    assert_eq!(m.shape(), &[1]);
    assert_eq!(m.data(), &[2.]);
    assert_eq!(Tensor::<f64>::zeros(&[3, 2]).sum().unwrap().data(), &[0.]);
    assert!(matches!(t(&[2], &[1., 1.]).sum_axis(3), Err(NdError::InvalidAxis { .. })));
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.param(&t(&[5], &[1., -2., 3., 0.5, 4.]));
    let g = tape.backward(&x.sum().unwrap()).unwrap();
    assert_eq!(g.get(&x).unwrap().data(), &[1.; 5]);

    let tape = Tape::new();
    let x = tape.param(&t(&[3], &[1., -2., 3.]));
    let loss = x.l2norm().unwrap().square().unwrap();
    let g = tape.backward(&loss).unwrap();
    for (gi, xi) in g.get(&x).unwrap().data().iter().zip([1., -2., 3.]) {
        assert!((gi - 2. * xi).abs() < 1e-12);
    }
}

#[test]
fn backward_errors() {
    let tape = Tape::new();
    let x = tape.param(&t(&[2], &[1., 2.]));
    assert!(matches!(tape.backward(&x), Err(NdError::NotScalar { .. })));
    let c = t(&[1], &[1.]);
    assert!(matches!(tape.backward(&c), Err(NdError::DetachedTensor)));
    let other = Tape::new();
    let y = other.param(&t(&[1], &[1.]));
    assert!(matches!(x.sum().unwrap().add(&y), Err(NdError::TapeMismatch)));
}

#[test]
fn domain_errors() {
    assert!(matches!(t(&[1], &[0.]).log(), Err(NdError::DomainError { .. })));
    assert!(matches!(t(&[1], &[-1.]).sqrt(), Err(NdError::DomainError { .. })));
    assert!(matches!(
        t(&[1], &[1.]).div(&t(&[1], &[1e-13])),
        Err(NdError::DomainError { .. })
    ));
    assert!(matches!(
        t(&[2], &[1., 2.]).add(&t(&[3], &[1., 2., 3.])),
        Err(NdError::ShapeMismatch { .. })
    ));
    assert!(matches!(t(&[1], &[1000.]).exp(), Err(NdError::NonFinite { .. })));
}

#[test]
fn constants_never_receive_gradients() {
    let tape = Tape::new();
    let x = tape.param(&t(&[2], &[1., 2.]));
    let c = t(&[2], &[3., 4.]);
    let g = tape.backward(&x.mul(&c).unwrap().sum().unwrap()).unwrap();
    assert!(g.get(&c).is_none());
    assert!(!c.requires_grad());
}

#[test]
fn backward_twice_is_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let a = tape.param(&rand_t(&mut rng, &[3, 4], -2., 2.));
    let b = tape.param(&rand_t(&mut rng, &[4, 3], -2., 2.));
    let loss = a.matmul(&b).unwrap().softmax_axis(0).unwrap().tanh().unwrap().sum().unwrap();
    let g1 = tape.backward(&loss).unwrap();
    let g2 = tape.backward(&loss).unwrap();
    assert_eq!(g1.get(&a).unwrap().data(), g2.get(&a).unwrap().data());
    assert_eq!(g1.get(&b).unwrap().data(), g2.get(&b).unwrap().data());
}

/// Every op against central differences at f64, inputs in [-2,2].
#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let opts = CheckOptions::default();
    let w = rand_t(&mut rng, &[3, 4], -1., 1.);
    type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&[Tensor<f64>]) -> NdResult<Tensor<f64>>>);
    let wc = w.clone();
    let weighted = move |y: Tensor<f64>| -> NdResult<Tensor<f64>> { y.mul(&wc)?.sum() };
    let wf = std::sync::Arc::new(weighted);
    let mk = |f: fn(&[Tensor<f64>]) -> NdResult<Tensor<f64>>| {
        let wf = wf.clone();
        Box::new(move |x: &[Tensor<f64>]| wf(f(x)?)) as Box<dyn Fn(&[Tensor<f64>]) -> NdResult<Tensor<f64>>>
    };
    let sym = |rng: &mut ChaCha8Rng| rand_t(rng, &[3, 4], -2., 2.);
    let pos = |rng: &mut ChaCha8Rng| rand_t(rng, &[3, 4], 0.5, 2.);
    let cases: Vec<Case> = vec![
        ("add", vec![sym(&mut rng), sym(&mut rng)], mk(|x| x[0].add(&x[1]))),
        ("sub", vec![sym(&mut rng), sym(&mut rng)], mk(|x| x[0].sub(&x[1]))),
        ("mul", vec![sym(&mut rng), sym(&mut rng)], mk(|x| x[0].mul(&x[1]))),
        ("div", vec![sym(&mut rng), pos(&mut rng)], mk(|x| x[0].div(&x[1]))),
        ("pow", vec![pos(&mut rng), sym(&mut rng)], mk(|x| x[0].pow(&x[1]))),
        ("exp", vec![sym(&mut rng)], mk(|x| x[0].exp())),
        ("log", vec![pos(&mut rng)], mk(|x| x[0].log())),
        ("tanh", vec![sym(&mut rng)], mk(|x| x[0].tanh())),
        ("sigmoid", vec![sym(&mut rng)], mk(|x| x[0].sigmoid())),
        ("sqrt", vec![pos(&mut rng)], mk(|x| x[0].sqrt())),
        ("relu", vec![rand_away_from_zero(&mut rng, &[3, 4])], mk(|x| x[0].relu())),
        ("abs", vec![rand_away_from_zero(&mut rng, &[3, 4])], mk(|x| x[0].abs())),
        ("powf", vec![pos(&mut rng)], mk(|x| x[0].powf(2.5))),
        ("softmax0", vec![sym(&mut rng)], mk(|x| x[0].softmax_axis(0))),
        ("softmax1", vec![sym(&mut rng)], mk(|x| x[0].softmax_axis(1))),
        ("broadcast_row", vec![sym(&mut rng), rand_t(&mut rng, &[4], -2., 2.)], mk(|x| x[0].mul(&x[1]))),
        ("broadcast_col", vec![sym(&mut rng), rand_t(&mut rng, &[3, 1], -2., 2.)], mk(|x| x[0].div(&x[1].exp()?))),
        ("matmul", vec![sym(&mut rng), rand_t(&mut rng, &[4, 4], -2., 2.)], mk(|x| x[0].matmul(&x[1]))),
        ("transpose", vec![rand_t(&mut rng, &[4, 3], -2., 2.)], mk(|x| x[0].transpose())),
        ("narrow_concat", vec![sym(&mut rng)], mk(|x| {
            let a = x[0].narrow(1, 0, 1)?;
            let b = x[0].narrow(1, 1, 3)?.tanh()?;
            Tensor::concat(&[&a, &b], 1)
        })),
        ("reshape", vec![rand_t(&mut rng, &[12], -2., 2.)], mk(|x| x[0].reshape(&[3, 4]))),
    ];
    for (name, inputs, f) in cases {
        let rep = check(name, &inputs, f, &opts).unwrap();
        assert!(rep.passed, "{name}: {rep:?}");
    }
    let reductions: Vec<(&str, fn(&Tensor<f64>) -> NdResult<Tensor<f64>>)> = vec![
        ("sum", |x| x.sum()),
        ("mean", |x| x.mean()),
        ("l2norm", |x| x.l2norm()),
        ("sum_axis0", |x| x.sum_axis(0)?.tanh()?.sum()),
        ("mean_axis1", |x| x.mean_axis(1)?.square()?.sum()),
        ("l2norm_axis1", |x| x.reduce(ReduceKind::L2Norm, Some(1))?.sum()),
    ];
    for (name, f) in reductions {
        let rep = check(name, &[sym(&mut rng)], |x| f(&x[0]), &opts).unwrap();
        assert!(rep.passed, "{name}: {rep:?}");
    }
}

#[test]
fn sigmoid_fault_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_t(&mut rng, &[6], -2., 2.);
    inject_sigmoid_backward_fault(true);
    let rep = check("sigmoid", &[x], |x| x[0].sigmoid()?.sum(), &CheckOptions::default());
    inject_sigmoid_backward_fault(false);
    assert!(!rep.unwrap().passed);
}

fn tile_oracle(data: &[f64], shape: &[usize], out: &[usize]) -> Vec<f64> {
    let rank = out.len();
    let padded: Vec<usize> = std::iter::repeat(1).take(rank - shape.len()).chain(shape.iter().copied()).collect();
    let n: usize = out.iter().product();
    (0..n)
        .map(|flat| {
            let mut rem = flat;
            let mut idx = vec![0; rank];
            for d in (0..rank).rev() {
                idx[d] = rem % out[d];
                rem /= out[d];
            }
            let mut src = 0;
            for d in 0..rank {
                let i = if padded[d] == 1 { 0 } else { idx[d] };
                src = src * padded[d] + i;
            }
            data[src]
        })
        .collect()
}

fn shapes_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, Vec<usize>)> {
    (1usize..=4)
        .prop_flat_map(|rank| proptest::collection::vec(1usize..=3, rank))
        .prop_flat_map(|out| {
            let r = out.len();
            let masks = (proptest::collection::vec(any::<bool>(), r), proptest::collection::vec(any::<bool>(), r), 0..=r, 0..=r);
            (Just(out), masks)
        })
        .prop_map(|(out, (ma, mb, da, db))| {
            let mk = |m: &Vec<bool>, drop: usize| -> Vec<usize> {
                let s: Vec<usize> = out.iter().zip(m).map(|(&d, &keep)| if keep { d } else { 1 }).collect();
                let s = s[drop.min(out.len() - 1)..].to_vec();
                s
            };
            (mk(&ma, da), mk(&mb, db), out)
        })
}

proptest! {
    #[test]
    fn broadcasting_matches_tiling((sa, sb, _out) in shapes_strategy(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_t(&mut rng, &sa, -2., 2.);
        let b = rand_t(&mut rng, &sb, -2., 2.);
        let out = broadcast_shape(&sa, &sb).unwrap();
        let r = a.mul(&b).unwrap();
        prop_assert_eq!(r.shape(), &out[..]);
        let ta = tile_oracle(a.data(), &sa, &out);
        let tb = tile_oracle(b.data(), &sb, &out);
        let expect: Vec<f64> = ta.iter().zip(&tb).map(|(x, y)| x * y).collect();
        prop_assert_eq!(r.data(), &expect[..]);
    }

    #[test]
    fn softmax_rows_are_distributions(v in proptest::collection::vec(-50.0f64..50.0, 12), axis in 0usize..2) {
        let x = Tensor::new(&[3, 4], v).unwrap();
        let y = x.softmax_axis(axis).unwrap();
        prop_assert!(y.data().iter().all(|p| *p >= 0.0));
        let s = y.sum_axis(axis).unwrap();
        for v in s.data() {
            prop_assert!((v - 1.0).abs() < 1e-9);
        }
    }
}
