use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcdpt::decoder::{Decoder, DepthHead, FusionBlock, ResidualConvUnit};
use rcdpt::loss::{l1_loss, ValidMask};
use rcdpt::nn::{Builder, Ctx, ParamStore};
use rcdpt::tensor::{Sgd, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn residual_unit_with_zero_second_conv_is_identity() {
    let mut store = ParamStore::<f64>::new();
    let rcu = ResidualConvUnit::new(&mut Builder::new(&mut store, 1), "rcu", 4).unwrap();
    store.by_name_mut("rcu.conv2.weight").unwrap().data_mut().fill(0.0);
    let x = random(&[5, 6, 4], 2);
    let mut ctx = Ctx::new(&store);
    let v = ctx.input(x.clone());
    let y = rcu.forward(&mut ctx, v).unwrap();
    assert_eq!(ctx.value(y), &x);
}

#[test]
fn fusion_block_doubles_size_and_checks_skip() {
    let mut store = ParamStore::<f64>::new();
    let fb = FusionBlock::new(&mut Builder::new(&mut store, 3), 4).unwrap();
    let mut ctx = Ctx::new(&store);
    let deep = ctx.input(random(&[3, 5, 4], 4));
    let skip = ctx.input(random(&[3, 5, 4], 5));
    let y = fb.forward(&mut ctx, deep, Some(skip)).unwrap();
    assert_eq!(ctx.shape(y), &[6, 10, 4]);
    let bad = ctx.input(random(&[3, 4, 4], 6));
    assert!(fb.forward(&mut ctx, deep, Some(bad)).is_err());
}

#[test]
fn decoder_follows_rounded_pyramid_to_half_resolution() {
    // 48×48 input with ratios 4, 8, 16, 32: the coarsest level rounds up to 2×2
    let mut store = ParamStore::<f64>::new();
    let dec = Decoder::new(&mut Builder::new(&mut store, 7), 6, 4).unwrap();
    let mut ctx = Ctx::new(&store);
    let pyr: Vec<_> = [12, 6, 3, 2].iter().enumerate().map(|(i, &s)| ctx.input(random(&[s, s, 6], i as u64))).collect();
    let y = dec.forward(&mut ctx, &pyr, (24, 24)).unwrap();
    assert_eq!(ctx.shape(y), &[24, 24, 6]);
    assert!(dec.forward(&mut ctx, &pyr[..3], (24, 24)).is_err());
}

#[test]
fn fresh_head_predicts_the_initial_depth() {
    let mut store = ParamStore::<f32>::new();
    let head = DepthHead::new(&mut Builder::new(&mut store, 0), 8).unwrap();
    let mut ctx = Ctx::new(&store);
    let f = ctx.input(random(&[4, 5, 8], 1).cast());
    let y = head.forward(&mut ctx, f, (8, 10)).unwrap();
    assert_eq!(ctx.shape(y), &[8, 10, 1]);
    assert!(ctx.value(y).data().iter().all(|&d| (d as f64 - DepthHead::INITIAL_DEPTH).abs() < 1e-4));
}

#[test]
fn head_output_is_non_negative() {
    let mut store = ParamStore::<f64>::new();
    let head = DepthHead::new(&mut Builder::new(&mut store, 2), 8).unwrap();
    for t in store.tensors_mut() {
        *t = random(t.shape(), t.numel() as u64);
    }
    let mut ctx = Ctx::new(&store);
    let f = ctx.input(random(&[4, 4, 8], 3));
    let y = head.forward(&mut ctx, f, (8, 8)).unwrap();
    let v = ctx.value(y).data();
    assert!(v.iter().all(|&d| d >= 0.0));
    assert!(v.contains(&0.0) && v.iter().any(|&d| d > 0.0));
}

/// The head starts with zero output weights, so only those receive gradient
/// at first; after one update every head parameter does.
#[test]
fn l1_gradient_reaches_every_head_parameter_after_one_step() {
    let mut store = ParamStore::<f64>::new();
    let head = DepthHead::new(&mut Builder::new(&mut store, 4), 8).unwrap();
    let feat = random(&[4, 4, 8], 5);
    let target = Tensor::from_fn(&[8, 8, 1], |i| 5.0 + (i % 13) as f64);
    let mask = ValidMask::from_target(&target).unwrap();
    let grads = |store: &ParamStore<f64>| {
        let mut ctx = Ctx::new(store);
        let f = ctx.input(feat.clone());
        let y = head.forward(&mut ctx, f, (8, 8)).unwrap();
        let l = l1_loss(&mut ctx.tape, y, &target, &mask).unwrap();
        ctx.backward(l).unwrap()
    };
    let g0 = grads(&store);
    let nonzero = |g: &Tensor<f64>| g.data().iter().any(|&v| v != 0.0);
    for (n, g) in store.names().iter().zip(&g0) {
        assert_eq!(nonzero(g), n.starts_with("head.conv3"), "{n}");
    }
    store.accumulate_grads(&g0).unwrap();
    let names = store.names().to_vec();
    Sgd::new(0.9, 0.0).step_named(store.tensors_mut(), 1e-3, |i| names[i].clone()).unwrap();
    for (n, g) in names.iter().zip(&grads(&store)) {
        assert!(nonzero(g), "{n}");
    }
}
