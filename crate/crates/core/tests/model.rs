use cost_core::model::*;
use cost_core::Error;
use cost_tensor::{Rng, Tensor};

fn cfg(layers: usize) -> ModelConfig {
    ModelConfig { layers, dim: 16, heads: 2, video: [3, 3, 3], ..Default::default() }
}

fn setup(layers: usize) -> (Dit<f32>, Tensor<f32>) {
    let mut rng = Rng::new(21);
    let m = Dit::new(cfg(layers), &mut rng).unwrap();
    let x = rng.gaussian([2, 3, 3, 3, 4]).unwrap();
    (m, x)
}

#[test]
fn output_has_input_shape_and_is_deterministic() {
    let (m, x) = setup(3);
    let a = m.forward(&x, 0.5, &[0, 1], None, 0).unwrap();
    let b = m.forward(&x, 0.5, &[0, 1], None, 0).unwrap();
    assert_eq!(a.shape(), x.shape());
    assert_eq!(a, b);
}

#[test]
fn default_toy_model_fits_the_budget() {
    let c = ModelConfig::default();
    assert_eq!((c.layers, c.dim, c.heads), (12, 128, 4));
    let m: Dit<f32> = Dit::new(c.clone(), &mut Rng::new(0)).unwrap();
    assert_eq!(m.param_count(), c.param_count());
    assert!(m.param_count() <= PARAM_BUDGET);
}

#[test]
fn capture_every_layer_at_step_zero() {
    let (m, x) = setup(4);
    let mut hooks = HookRegistry::new();
    hooks.register_capture(&[0], &[0, 1, 2, 3]).unwrap();
    m.forward(&x, 1.0, &[0, 0], Some(&mut hooks), 0).unwrap();
    let states = hooks.drain();
    assert_eq!(states.len(), 4);
    for (l, h) in states.iter().enumerate() {
        assert_eq!(h.layer, l);
        assert_eq!(h.tokens.shape(), &[2, 27, 16]);
        // Spatial view is a pure reshape.
        assert_eq!(h.spatial().unwrap().data(), h.tokens.data());
        assert_eq!(h.spatial().unwrap().shape(), &[2, 3, 3, 3, 16]);
    }
}

#[test]
fn captures_match_a_direct_staged_rerun() {
    let (m, x) = setup(3);
    let mut hooks = HookRegistry::new();
    hooks.register_capture(&[5], &[0, 1, 2]).unwrap();
    m.forward(&x, 0.4, &[0, 1], Some(&mut hooks), 5).unwrap();
    let b = cost_tensor::Eager;
    let (mut h, ctx) = m.embed(&b, &x, &[0.4, 0.4], &[0, 1]).unwrap();
    for l in 0..3 {
        h = m.block(&b, l, &h, &ctx).unwrap();
        let got = hooks.take(5, l).unwrap();
        assert_eq!(got.tokens.data(), h.data());
    }
}

#[test]
fn captures_do_not_change_the_output() {
    let (m, x) = setup(3);
    let plain = m.forward(&x, 0.3, &[1, 1], None, 2).unwrap();
    let mut hooks = HookRegistry::new();
    hooks.register_capture(&[2], &[1]).unwrap();
    assert_eq!(m.forward(&x, 0.3, &[1, 1], Some(&mut hooks), 2).unwrap(), plain);
    // A step without requests records nothing.
    let mut other = HookRegistry::new();
    other.register_capture(&[7], &[1]).unwrap();
    m.forward(&x, 0.3, &[1, 1], Some(&mut other), 2).unwrap();
    assert_eq!(other.captured_len(), 0);
}

#[test]
fn replacing_with_the_captured_state_is_a_no_op() {
    let (m, x) = setup(3);
    let mut cap = HookRegistry::new();
    cap.register_capture(&[0], &[1]).unwrap();
    let plain = m.forward(&x, 0.7, &[0, 1], Some(&mut cap), 0).unwrap();
    let state = cap.take(0, 1).unwrap();
    let mut inj = HookRegistry::new();
    inj.inject(0, 1, Injection::Replace(state.tokens)).unwrap();
    assert_eq!(m.forward(&x, 0.7, &[0, 1], Some(&mut inj), 0).unwrap(), plain);
}

#[test]
fn injection_leaves_upstream_layers_untouched() {
    let (m, x) = setup(4);
    let mut clean = HookRegistry::new();
    clean.register_capture(&[0], &[0, 1, 2, 3]).unwrap();
    m.forward(&x, 0.5, &[0, 0], Some(&mut clean), 0).unwrap();
    let mut hit = HookRegistry::new();
    hit.register_capture(&[0], &[0, 1, 2, 3]).unwrap();
    hit.inject(0, 2, Injection::Replace(Tensor::zeros([2, 27, 16]).unwrap())).unwrap();
    m.forward(&x, 0.5, &[0, 0], Some(&mut hit), 0).unwrap();
    for l in 0..2 {
        assert_eq!(clean.take(0, l).unwrap().tokens, hit.take(0, l).unwrap().tokens);
    }
    // The capture at the injected layer sees the injected value.
    assert!(hit.take(0, 2).unwrap().tokens.data().iter().all(|v| *v == 0.0));
    assert_ne!(clean.take(0, 3).unwrap().tokens, hit.take(0, 3).unwrap().tokens);
}

#[test]
fn zeroing_the_last_layer_yields_the_head_of_zeros() {
    let (m, x) = setup(3);
    let plain = m.forward(&x, 0.5, &[0, 0], None, 0).unwrap();
    let mut hooks = HookRegistry::new();
    hooks.inject(0, 2, Injection::Replace(Tensor::zeros([2, 27, 16]).unwrap())).unwrap();
    let out = m.forward(&x, 0.5, &[0, 0], Some(&mut hooks), 0).unwrap();
    assert_ne!(out, plain);
    // Layer norm of a zero row is zero, so every token decodes to the head bias.
    let bias = m.head.bias.as_ref().unwrap().data().to_vec();
    for px in out.data().chunks(4) {
        for (a, b) in px.iter().zip(&bias) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn guidance_of_one_is_the_conditional_pass() {
    let (mut m, x) = setup(2);
    m.config.guidance_scale = 1.0;
    let cond = m.forward_pass(&x, 0.5, &[1, 0], None, 0).unwrap();
    assert_eq!(m.forward(&x, 0.5, &[1, 0], None, 0).unwrap(), cond);
    m.config.guidance_scale = 2.0;
    let guided = m.forward(&x, 0.5, &[1, 0], None, 0).unwrap();
    let null = m.config.null_task();
    let uncond = m.forward_pass(&x, 0.5, &[null, null], None, 0).unwrap();
    let expect = uncond.zip_map(&cond, "cfg", |u, c| u + 2.0 * (c - u)).unwrap();
    assert_eq!(guided, expect);
}

#[test]
fn hook_errors_are_reported() {
    let (m, x) = setup(3);
    let mut hooks = HookRegistry::new();
    hooks.register_capture(&[0], &[3]).unwrap();
    assert!(matches!(m.forward(&x, 0.5, &[0, 0], Some(&mut hooks), 0), Err(Error::Hook(_))));
    let mut dup = HookRegistry::new();
    dup.register_capture(&[0], &[1]).unwrap();
    assert!(dup.register_capture(&[0], &[1]).is_err());
    let mut clash = HookRegistry::new();
    clash.inject(0, 1, Injection::Replace(Tensor::zeros([2, 27, 16]).unwrap())).unwrap();
    assert!(clash.inject(0, 1, Injection::Replace(Tensor::zeros([2, 27, 16]).unwrap())).is_err());
    let mut wrong = HookRegistry::new();
    wrong.inject(0, 1, Injection::Replace(Tensor::zeros([1, 27, 16]).unwrap())).unwrap();
    assert!(m.forward(&x, 0.5, &[0, 0], Some(&mut wrong), 0).is_err());
}

#[test]
fn bad_inputs_are_rejected() {
    let (m, x) = setup(2);
    assert!(m.forward(&x, 0.5, &[0], None, 0).is_err());
    assert!(m.forward(&x, 0.5, &[0, 9], None, 0).is_err());
    let wrong: Tensor<f32> = Tensor::zeros([2, 3, 3, 3, 5]).unwrap();
    assert!(m.forward(&wrong, 0.5, &[0, 0], None, 0).is_err());
    assert!(m.timestep_embed(1.5).is_err());
    assert_eq!(m.timestep_embed(0.25).unwrap().shape(), &[16]);
}

#[test]
fn patchify_round_trips() {
    let x: Tensor<f32> = Rng::new(2).gaussian([2, 4, 6, 6, 3]).unwrap();
    for p in [[1, 1, 1], [2, 2, 2], [1, 3, 2]] {
        let (tokens, grid) = patchify(&x, p).unwrap();
        assert_eq!(tokens.shape(), &[2, grid.iter().product::<usize>(), p.iter().product::<usize>() * 3]);
        assert_eq!(unpatchify(&tokens, grid, p, 3).unwrap(), x);
    }
    assert!(patchify(&x, [3, 1, 1]).is_err());
}
