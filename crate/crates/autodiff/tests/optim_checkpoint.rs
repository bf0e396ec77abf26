use dexmode_autodiff::{cosine_multiplier, AdamWConfig, Checkpoint, OptimizerState, ParamStore, Session, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_multiplier(0, 100), 1.0);
    assert!(cosine_multiplier(100, 100).abs() < 1e-15);
    assert!((cosine_multiplier(50, 100) - 0.5).abs() < 1e-15);
    assert!(cosine_multiplier(250, 100).abs() < 1e-15);
}

#[test]
fn first_adamw_step_matches_hand_computation() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::from_f64([2], &[1.0, -2.0]).unwrap(), true).unwrap();
    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.01,
        horizon: 10,
        ..AdamWConfig::default()
    };
    let mut opt = OptimizerState::new(cfg.clone(), &store);
    let grad = Tensor::from_f64([2], &[0.5, -4.0]).unwrap();
    opt.step(&mut store, &[Some(grad.clone())]).unwrap();
    // First step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
    for (i, &p0) in [1.0f64, -2.0].iter().enumerate() {
        let g = grad.data()[i];
        let expect = p0 * (1.0 - 0.1 * 0.01) - 0.1 * g / (g.abs() + cfg.eps);
        assert!((store.get(id).data()[i] - expect).abs() < 1e-12);
    }
    assert_eq!(opt.step, 1);
}

#[test]
fn optimizer_rejects_shape_mismatch() {
    let mut store = ParamStore::<f32>::new();
    store.add("w", Tensor::zeros(vec![3]), true).unwrap();
    let mut opt = OptimizerState::new(AdamWConfig::default(), &store);
    assert!(opt.step(&mut store, &[Some(Tensor::zeros(vec![2]))]).is_err());
    assert!(opt.step(&mut store, &[]).is_err());
}

fn train_trajectory(steps: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f32>::new();
    let w = store.add("w", Tensor::randn(vec![4, 3], 0.5, &mut rng), true).unwrap();
    let x = Tensor::<f32>::randn(vec![8, 4], 1.0, &mut rng);
    let y = Tensor::<f32>::randn(vec![8, 3], 1.0, &mut rng);
    let mut opt = OptimizerState::new(AdamWConfig { horizon: steps, ..Default::default() }, &store);
    for _ in 0..steps {
        let s = Session::new(&store);
        let xv = s.constant(x.clone());
        let yv = s.constant(y.clone());
        let pred = s.matmul(xv, s.p(w)).unwrap();
        let loss = s.mse(pred, yv).unwrap();
        let grads = s.grads(loss).unwrap();
        drop(s);
        opt.step(&mut store, &grads).unwrap();
    }
    store.get(w).data().to_vec()
}

#[test]
fn identical_runs_are_bit_identical() {
    let a = train_trajectory(25);
    let b = train_trajectory(25);
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn frozen_parameters_do_not_move() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::from_f64([1], &[1.0]).unwrap(), false).unwrap();
    let b = store.add("b", Tensor::from_f64([1], &[1.0]).unwrap(), true).unwrap();
    let before = store.checksum(|_, trainable| !trainable);
    let s = Session::new(&store);
    let prod = s.mul(s.p(a), s.p(b)).unwrap();
    let loss = s.sum(prod);
    let grads = s.grads(loss).unwrap();
    drop(s);
    assert!(grads[a.index()].is_none());
    let mut opt = OptimizerState::new(AdamWConfig::default(), &store);
    opt.step(&mut store, &grads).unwrap();
    assert_eq!(store.checksum(|_, trainable| !trainable), before);
    assert_ne!(store.get(b).data()[0], 1.0);
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ckpt");
    let mut ck = Checkpoint::<f32>::new(serde_json::json!({"step": 3}));
    ck.push("a", Tensor::from_f64([2, 2], &[1.0, -0.0, 1e-30, 3.5]).unwrap());
    ck.push("b", Tensor::scalar(f32::MIN_POSITIVE));
    ck.save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(back.meta["step"], 3);
    for ((na, ta), (nb, tb)) in ck.tensors.iter().zip(&back.tensors) {
        assert_eq!(na, nb);
        assert_eq!(ta.shape(), tb.shape());
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ta), bits(tb));
    }
    assert!(Checkpoint::<f64>::load(&path).is_err(), "dtype mismatch must be reported");
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let mut ck = Checkpoint::<f64>::new(serde_json::Value::Null);
    ck.push("a", Tensor::zeros(vec![4]));
    let mut bytes = ck.to_bytes();
    bytes.truncate(bytes.len() - 3);
    assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
    assert!(Checkpoint::<f64>::from_bytes(&[1, 2]).is_err());
}

proptest! {
    #[test]
    fn checkpoint_bytes_round_trip_bit_exact(bits in proptest::collection::vec(any::<u64>(), 1..40)) {
        let vals: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
        let mut ck = Checkpoint::<f64>::new(serde_json::json!({"k": "v"}));
        ck.push("x", Tensor::new(vec![vals.len()], vals.clone()).unwrap());
        let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes()).unwrap();
        let got: Vec<u64> = back.tensors[0].1.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, bits);
    }
}
