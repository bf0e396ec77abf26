use dexmode_autodiff::{finite_diff_check, Session, ParamStore, Tensor};
use dexmode_core::flow::{
    euler_sample, fm_loss, fm_loss_value, interpolate, sample_timestep, timestep_from_uniform, ActionChunk,
    ActionLayout,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn inverse_cdf_points() {
    assert!((timestep_from_uniform(0.125) - 0.25).abs() < 1e-15);
    assert_eq!(timestep_from_uniform(1.0), 1.0);
    assert_eq!(timestep_from_uniform(0.0), 0.0);
}

#[test]
fn timestep_moments_and_ks() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ts: Vec<f64> = (0..100_000).map(|_| sample_timestep(&mut rng)).collect();
    let mean = ts.iter().sum::<f64>() / ts.len() as f64;
    assert!((mean - 0.6).abs() < 0.01, "mean {mean}");
    ts.sort_by(f64::total_cmp);
    let n = ts.len() as f64;
    let ks = ts
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let cdf = t.powf(1.5);
            (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.01, "ks {ks}");
}

#[test]
fn interpolation_endpoints() {
    let x0 = [0.0, 2.0];
    let eps = [2.0, 0.0];
    assert_eq!(interpolate(&x0, &eps, 0.0).unwrap(), x0);
    assert_eq!(interpolate(&x0, &eps, 1.0).unwrap(), eps);
    assert_eq!(interpolate(&x0, &eps, 0.5).unwrap(), vec![1.0, 1.0]);
    assert!(interpolate(&x0, &[1.0], 0.5).is_err());
}

#[test]
fn loss_values() {
    let x0 = vec![0.5; 6];
    let eps = vec![1.5; 6];
    assert_eq!(fm_loss_value(&[1.0; 6], &x0, &eps).unwrap(), 0.0);
    assert_eq!(fm_loss_value(&[0.0; 6], &x0, &eps).unwrap(), 1.0);
    assert!(fm_loss_value(&[f64::NAN; 6], &x0, &eps).is_err());
}

#[test]
fn loss_gradient_matches_closed_form_and_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = Tensor::<f64>::randn(vec![4, 3], 1.0, &mut rng);
    let x0 = Tensor::<f64>::randn(vec![4, 3], 1.0, &mut rng);
    let eps = Tensor::<f64>::randn(vec![4, 3], 1.0, &mut rng);
    let store = ParamStore::<f64>::new();
    let s = Session::new(&store);
    let vv = s.leaf(v.clone());
    let loss = fm_loss(&s, vv, s.constant(x0.clone()), s.constant(eps.clone())).unwrap();
    let g = s.backward(loss).unwrap().get(vv);
    for i in 0..12 {
        let want = 2.0 * (v.data()[i] - (eps.data()[i] - x0.data()[i])) / 12.0;
        assert!((g.data()[i] - want).abs() < 1e-14);
    }
    let err = finite_diff_check(
        |g, p| {
            let store = ParamStore::<f64>::new();
            let s = dexmode_autodiff::Session::prebound(g, &store, &[]).unwrap();
            Ok(fm_loss(&s, p[0], g.constant(x0.clone()), g.constant(eps.clone()))?)
        },
        &[v],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn euler_is_exact_on_constant_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0 = ActionChunk::gaussian(4, 3, &mut rng);
    let eps = ActionChunk::gaussian(4, 3, &mut rng);
    let field: Vec<f64> = eps.data.iter().zip(&x0.data).map(|(e, a)| e - a).collect();
    for n in [1, 3, 10, 64] {
        let out = euler_sample(|_, _| Ok(field.clone()), eps.data.clone(), n).unwrap();
        for (o, a) in out.iter().zip(&x0.data) {
            assert!((o - a).abs() < 1e-12, "n={n}");
        }
    }
}

#[test]
fn euler_first_order_convergence() {
    // dx/dt = -x integrated from t=1 to t=0 gives x(0) = x(1) * e.
    let exact = std::f64::consts::E;
    let err = |n| (euler_sample(|x, _| Ok(x.iter().map(|v| -v).collect()), vec![1.0], n).unwrap()[0] - exact).abs();
    let (e10, e20, e40) = (err(10), err(20), err(40));
    for r in [e10 / e20, e20 / e40] {
        assert!((1.6..=2.4).contains(&r), "ratio {r}");
    }
}

#[test]
fn euler_reports_step_of_blowup() {
    let e = euler_sample(|x, _| Ok(x.iter().map(|v| v * 1e200).collect()), vec![1e200], 4).unwrap_err();
    assert!(e.to_string().contains("step 0"), "{e}");
    assert!(euler_sample(|x, _| Ok(x.to_vec()), vec![0.0], 0).is_err());
}

#[test]
fn layout_rules() {
    let l = ActionLayout::contiguous(2, 6, 2).unwrap();
    assert_eq!(l.dim(), 10);
    assert_eq!(l.trigger(), 9);
    let bad = ActionLayout { arm: 0..3, hand: 2..5, other: 5..6 };
    assert!(bad.validate().is_err());
}

proptest! {
    #[test]
    fn interpolation_is_affine(a in -5.0..5.0f64, e in -5.0..5.0f64, t in 0.0..1.0f64) {
        let x = interpolate(&[a], &[e], t).unwrap()[0];
        prop_assert!((x - (a + t * (e - a))).abs() < 1e-12);
    }

    #[test]
    fn loss_nonnegative(v in prop::collection::vec(-3.0..3.0f64, 4), x0 in prop::collection::vec(-3.0..3.0f64, 4)) {
        let eps = vec![0.0; 4];
        prop_assert!(fm_loss_value(&v, &x0, &eps).unwrap() >= 0.0);
    }
}
