use dexmode_autodiff::{finite_diff_check, AdamWConfig, OptimizerState, ParamStore, Session, Tensor};
use dexmode_core::backbone::{ModelConfig, ModelDims, ObsBatch, Observation, PREFIX_ROWS};
use dexmode_core::flow::ActionLayout;
use dexmode_core::fusion::{concat_streams, route_logits, tile_with_pe, Modality};
use dexmode_core::model::VlaModel;
use dexmode_core::nn::sinusoid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        d_pali: 8,
        horizon: 3,
        experts: 8,
        euler_steps: 4,
        sfx_layers: 1,
        heads: 2,
        aux_loss: true,
        aux_coef: 0.01,
    }
}

fn dims() -> ModelDims {
    ModelDims {
        d_v: 8,
        d_s: 6,
        d_f: 14,
        d_g: 10,
        instructions: 3,
        layout: ActionLayout::contiguous(2, 3, 2).unwrap(),
    }
}

fn random_obs(rng: &mut ChaCha8Rng, d: &ModelDims) -> Observation {
    let mut v = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (vision, proprio, force, tactile) = (v(d.d_v), v(d.d_s), v(d.d_f), v(d.d_g));
    Observation { vision, instruction: rng.gen_range(0..d.instructions), proprio, force, tactile }
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

/// Overwrites every zero-initialized tensor with noise.
fn randomize_zeros(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get_mut(id);
        if t.data().iter().all(|&v| v == 0.0) {
            for v in t.data_mut() {
                *v = rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.3;
            }
        }
    }
}

#[test]
fn prefix_has_one_row_per_input_and_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let m = VlaModel::new(&mut store, &tiny_cfg(), &dims(), true, &mut rng).unwrap();
    let obs = ObsBatch::from_obs(&[random_obs(&mut rng, &dims())]);
    let s = Session::inference(&store);
    let a = m.prefix(&s, &obs).unwrap();
    let b = m.prefix(&s, &obs).unwrap();
    assert_eq!(s.shape(a), vec![1, PREFIX_ROWS, 8]);
    assert_eq!(s.value(a), s.value(b));
    let mut bad = obs.clone();
    bad.proprio.push(0.0);
    assert!(m.prefix(&s, &bad).is_err());
}

#[test]
fn suffix_depends_on_prefix_and_time() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let cfg = tiny_cfg();
    let m = VlaModel::new(&mut store, &cfg, &dims(), false, &mut rng).unwrap();
    let o1 = ObsBatch::from_obs(&[random_obs(&mut rng, &dims())]);
    let o2 = ObsBatch::from_obs(&[random_obs(&mut rng, &dims())]);
    let x = Tensor::from_f64(vec![1, 3, 7], &randn(&mut rng, 21)).unwrap();
    let s = Session::inference(&store);
    let xv = s.constant(x);
    let p1 = m.prefix(&s, &o1).unwrap();
    let p2 = m.prefix(&s, &o2).unwrap();
    let a = m.backbone.encode_suffix(&s, xv, &[0.3], p1).unwrap();
    let b = m.backbone.encode_suffix(&s, xv, &[0.3], p2).unwrap();
    assert_eq!(s.shape(a), vec![1, 3, 8]);
    assert_ne!(s.value(a), s.value(b));
    let t0 = m.backbone.encode_suffix(&s, xv, &[0.0], p1).unwrap();
    let t1 = m.backbone.encode_suffix(&s, xv, &[1.0], p1).unwrap();
    assert_ne!(s.value(t0), s.value(t1));
    assert!(m.backbone.encode_suffix(&s, xv, &[1.5], p1).is_err());
}

#[test]
fn zero_suffix_with_zero_bias_gives_zero_velocity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let m = VlaModel::new(&mut store, &tiny_cfg(), &dims(), false, &mut rng).unwrap();
    let s = Session::inference(&store);
    let z = s.constant(Tensor::zeros(vec![2, 3, 8]));
    let v = m.head.base_velocity(&s, z).unwrap();
    assert_eq!(s.shape(v), vec![2, 3, 7]);
    assert!(s.value(v).data().iter().all(|&x| x == 0.0));
}

#[test]
fn step_codes_match_formula() {
    let pe = sinusoid(1.0, 4);
    let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
    for (a, b) in pe.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!((pe[2] - 0.0100).abs() < 1e-5 && (pe[3] - 0.99995).abs() < 1e-5);

    let store = ParamStore::<f64>::new();
    let s = Session::inference(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 8;
    let z = s.constant(Tensor::from_f64(vec![1, 16], &randn(&mut rng, 16)).unwrap());
    let tiled = s.value(tile_with_pe(&s, z, h).unwrap());
    let zero = s.constant(Tensor::zeros(vec![1, 16]));
    let bare = s.value(tile_with_pe(&s, zero, h).unwrap());
    for h1 in 0..h {
        for h2 in 0..h {
            let dz: Vec<f64> = (0..16).map(|j| tiled.data()[h1 * 16 + j] - tiled.data()[h2 * 16 + j]).collect();
            let dp: Vec<f64> = sinusoid((h1 + 1) as f64, 16).iter().zip(sinusoid((h2 + 1) as f64, 16)).map(|(a, b)| a - b).collect();
            for (a, b) in dz.iter().zip(&dp) {
                assert!((a - b).abs() < 1e-12);
            }
            if h1 != h2 {
                assert_ne!(bare.row(0)[h1 * 16..(h1 + 1) * 16], bare.row(0)[h2 * 16..(h2 + 1) * 16]);
            }
        }
    }
}

#[test]
fn stream_concatenation_bounds_and_round_trip() {
    let store = ParamStore::<f64>::new();
    let s = Session::inference(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mk = |rows: usize, rng: &mut ChaCha8Rng| s.constant(Tensor::from_f64(vec![1, rows, 4], &randn(rng, rows * 4)).unwrap());
    let parts = [mk(20, &mut rng), mk(5, &mut rng), mk(5, &mut rng), mk(5, &mut rng)];
    let (z, bounds) = concat_streams(&s, parts[0], parts[1], parts[2], parts[3]).unwrap();
    assert_eq!(s.shape(z), vec![1, 35, 4]);
    assert_eq!(bounds, [20, 25, 30]);
    let starts = [0, 20, 25, 30];
    let lens = [20, 5, 5, 5];
    for i in 0..4 {
        assert_eq!(s.value(s.split(z, 1, starts[i], lens[i]).unwrap()), s.value(parts[i]));
    }
    let wide = s.constant(Tensor::zeros(vec![1, 5, 5]));
    assert!(concat_streams(&s, parts[0], parts[1], parts[2], wide).is_err());
}

#[test]
fn router_examples() {
    let r = route_logits(&[1.0, 0.0]);
    assert_eq!(r.expert, 0);
    assert!((r.gate - 1f64.exp() / (1f64.exp() + 1.0)).abs() < 1e-12);
    assert!((r.gate - 0.7311).abs() < 1e-4);
    let r = route_logits(&[0.3; 8]);
    assert_eq!(r.expert, 0);
    assert!((r.gate - 0.125).abs() < 1e-12);
    let mut l = [0.0; 8];
    l[5] = 1000.0;
    let r = route_logits(&l);
    assert_eq!(r.expert, 5);
    assert!((r.gate - 1.0).abs() < 1e-6);
    assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn modal_projection_checks_reading_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let m = VlaModel::new(&mut store, &tiny_cfg(), &dims(), true, &mut rng).unwrap();
    let mode = m.mode.as_ref().unwrap();
    let s = Session::inference(&store);
    assert!(mode.project_modal(&s, &[0.0; 14], 1, Modality::Force).is_ok());
    assert!(mode.project_modal(&s, &[0.0; 15], 1, Modality::Force).is_err());
    // Linear in the reading once the bias is removed.
    let a = randn(&mut rng, 14);
    let b = randn(&mut rng, 14);
    let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let f = |x: &[f64]| s.value(mode.project_modal(&s, x, 1, Modality::Force).unwrap()).to_f64();
    let (fa, fb, fab, f0) = (f(&a), f(&b), f(&ab), f(&[0.0; 14]));
    for j in 0..8 {
        assert!(((fab[j] - f0[j]) - (fa[j] - f0[j]) - (fb[j] - f0[j])).abs() < 1e-12);
    }
}

#[test]
fn expert_residual_and_gate_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let m = VlaModel::new(&mut store, &tiny_cfg(), &dims(), true, &mut rng).unwrap();
    let mode = m.mode.clone().unwrap();
    let tokens = Tensor::from_f64(vec![6, 8], &randn(&mut rng, 48)).unwrap();
    {
        let s = Session::inference(&store);
        let x = s.constant(tokens.clone());
        let (out, routes, _) = mode.moe(&s, x).unwrap();
        assert_eq!(routes.len(), 6);
        let out = s.value(out);
        let base = s.value(x);
        for (i, r) in routes.iter().enumerate() {
            assert!(r.gate > 0.0 && r.gate <= 1.0);
            // Recompute gate * MLP(token) + token row by row.
            let row = s.constant(Tensor::from_f64(vec![1, 8], &tokens.to_f64()[i * 8..(i + 1) * 8]).unwrap());
            let y = s.value(mode.experts[r.expert].forward(&s, row).unwrap()).to_f64();
            for j in 0..8 {
                let want = base.data()[i * 8 + j] + r.gate * y[j];
                assert!((out.data()[i * 8 + j] - want).abs() < 1e-12);
            }
        }
    }
    for e in &mode.experts {
        let last = e.layers.last().unwrap();
        for v in store.get_mut(last.w).data_mut() {
            *v = 0.0;
        }
        for v in store.get_mut(last.b.unwrap()).data_mut() {
            *v = 0.0;
        }
    }
    let s = Session::inference(&store);
    let x = s.constant(tokens);
    let (out, _, _) = mode.moe(&s, x).unwrap();
    assert_eq!(s.value(out), s.value(x));
}

#[test]
fn attention_rows_normalized_and_prefix_order_matters() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    let m = VlaModel::new(&mut store, &tiny_cfg(), &dims(), true, &mut rng).unwrap();
    let mode = m.mode.as_ref().unwrap();
    let s = Session::inference(&store);
    let obs = ObsBatch::from_obs(&[random_obs(&mut rng, &dims()), random_obs(&mut rng, &dims())]);
    let prefix = m.prefix(&s, &obs).unwrap();
    let x = s.constant(Tensor::from_f64(vec![2, 3, 7], &randn(&mut rng, 42)).unwrap());
    let suffix = m.backbone.encode_suffix(&s, x, &[0.2, 0.9], prefix).unwrap();
    let fo = mode.forward(&s, prefix, suffix, &obs.force, &obs.tactile).unwrap();
    for w in &fo.attention {
        let w = s.value(*w);
        let keys = *w.shape().last().unwrap();
        for row in w.data().chunks(keys) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    assert_eq!(fo.force_routes.len() + fo.tactile_routes.len(), 2 * 2 * 3);
    let mut hist = vec![0usize; 8];
    for r in fo.force_routes.iter().chain(&fo.tactile_routes) {
        hist[r.expert] += 1;
    }
    assert_eq!(hist.iter().sum::<usize>(), 12);

    // Swap the first two prefix rows; force tokens must move.
    let rows: Vec<_> = (0..3).map(|i| s.split(prefix, 1, i, 1).unwrap()).collect();
    let swapped = s.concat(&[rows[1], rows[0], rows[2]], 1).unwrap();
    let fo2 = mode.forward(&s, swapped, suffix, &obs.force, &obs.tactile).unwrap();
    // The output projection starts at zero, so compare the attended tokens
    // through the routing probabilities instead.
    assert_ne!(fo.force_routes[0].probs, fo2.force_routes[0].probs);

    // One token attending to itself gets weight exactly one.
    let one = s.constant(Tensor::from_f64(vec![1, 1, 8], &randn(&mut rng, 8)).unwrap());
    let a = mode.attn.forward(&s, one, one).unwrap();
    for w in a.weights {
        assert_eq!(s.value(w).data(), &[1.0]);
    }
}

#[test]
fn zero_init_fusion_matches_baseline() {
    let cfg = ModelConfig { d_pali: 16, horizon: 4, ..tiny_cfg() };
    let d = dims();
    let mut full_store = ParamStore::<f32>::new();
    let mut base_store = ParamStore::<f32>::new();
    let full = VlaModel::new(&mut full_store, &cfg, &d, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let base = VlaModel::new(&mut base_store, &cfg, &d, false, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..100 {
        let obs = ObsBatch::from_obs(&[random_obs(&mut rng, &d)]);
        let x = Tensor::<f32>::from_f64(vec![1, 4, 7], &randn(&mut rng, 28)).unwrap();
        let t = [rng.gen::<f64>()];
        let sf = Session::inference(&full_store);
        let sb = Session::inference(&base_store);
        let vf = sf.value(full.velocity(&sf, &obs, sf.constant(x.clone()), &t).unwrap().v);
        let vb = sb.value(base.velocity(&sb, &obs, sb.constant(x), &t).unwrap().v);
        for (a, b) in vf.data().iter().zip(vb.data()) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn full_velocity_path_gradients_match_differences() {
    let cfg = ModelConfig { sfx_layers: 1, ..tiny_cfg() };
    let d = dims();
    let mut store = ParamStore::<f64>::new();
    let model = VlaModel::new(&mut store, &cfg, &d, true, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    randomize_zeros(&mut store, &mut rng);
    let obs = ObsBatch::from_obs(&[random_obs(&mut rng, &d), random_obs(&mut rng, &d)]);
    let n = 2 * 3 * 7;
    let (x0, eps) = (randn(&mut rng, n), randn(&mut rng, n));
    let t = [0.35, 0.8];
    // Routing margin: every token's top probability must clear the runner-up.
    {
        let s = Session::inference(&store);
        let (_, out) = model.loss(&s, &obs, &x0, &eps, &t).unwrap();
        let fo = out.fusion.unwrap();
        for r in fo.force_routes.iter().chain(&fo.tactile_routes) {
            let mut p = r.probs.clone();
            p.sort_by(|a, b| b.total_cmp(a));
            assert!(p[0] - p[1] > 1e-3, "token too close to a routing boundary");
        }
    }
    let params: Vec<Tensor<f64>> = store.ids().map(|id| store.get(id).clone()).collect();
    let err = finite_diff_check(
        |g, vars| {
            let s = Session::prebound(g, &store, vars)?;
            Ok(model.loss(&s, &obs, &x0, &eps, &t)?.0)
        },
        &params,
        3e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn modal_projections_receive_gradient_after_one_step() {
    let cfg = tiny_cfg();
    let d = dims();
    let mut store = ParamStore::<f32>::new();
    let model = VlaModel::new(&mut store, &cfg, &d, true, &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
    let mut opt = OptimizerState::new(AdamWConfig { horizon: 10, ..AdamWConfig::default() }, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mode = model.mode.clone().unwrap();
    let frozen_before = store.checksum(|_, trainable| !trainable);
    let mut norms = vec![];
    for _ in 0..2 {
        let obs = ObsBatch::from_obs(&(0..4).map(|_| random_obs(&mut rng, &d)).collect::<Vec<_>>());
        let n = 4 * 3 * 7;
        let (x0, eps) = (randn(&mut rng, n), randn(&mut rng, n));
        let t: Vec<f64> = (0..4).map(|_| rng.gen()).collect();
        let s = Session::new(&store);
        let (loss, _) = model.loss(&s, &obs, &x0, &eps, &t).unwrap();
        let grads = s.grads(loss).unwrap();
        let norm = |id: dexmode_autodiff::ParamId| grads[id.index()].as_ref().map(|g| g.sq_norm()).unwrap_or(0.0);
        norms.push([norm(mode.proj_f.w), norm(mode.proj_f.b.unwrap()), norm(mode.proj_g.w), norm(mode.proj_g.b.unwrap())]);
        drop(s);
        opt.step(&mut store, &grads).unwrap();
    }
    assert!(norms[1].iter().all(|&n| n > 0.0), "{norms:?}");
    assert_eq!(store.checksum(|_, trainable| !trainable), frozen_before);
}

#[test]
fn tactile_reaches_only_hand_columns_without_attention_mixing() {
    let cfg = tiny_cfg();
    let d = dims();
    let mut store = ParamStore::<f64>::new();
    let mut model = VlaModel::new(&mut store, &cfg, &d, true, &mut ChaCha8Rng::seed_from_u64(16)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    randomize_zeros(&mut store, &mut rng);
    model.mode.as_mut().unwrap().attention_mixing = false;
    let o1 = random_obs(&mut rng, &d);
    let mut o2 = o1.clone();
    for v in &mut o2.tactile {
        *v += rng.gen_range(-1.0..1.0);
    }
    let x = Tensor::from_f64(vec![1, 3, 7], &randn(&mut rng, 21)).unwrap();
    let s = Session::inference(&store);
    let xv = s.constant(x);
    let v1 = s.value(model.velocity(&s, &ObsBatch::from_obs(&[o1]), xv, &[0.5]).unwrap().v);
    let v2 = s.value(model.velocity(&s, &ObsBatch::from_obs(&[o2]), xv, &[0.5]).unwrap().v);
    for h in 0..3 {
        for j in 0..7 {
            let (a, b) = (v1.data()[h * 7 + j], v2.data()[h * 7 + j]);
            if d.layout.hand.contains(&j) {
                assert_ne!(a, b);
            } else {
                assert_eq!(a, b);
            }
        }
    }
}
