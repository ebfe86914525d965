use disrom_core::disentangle::{reconstruction_loss, total_loss, LossWeights};
use disrom_core::models::{
    reparameterize, reparameterize_on, LatentOut, LayerKind, LayerShape, Model, ModelError, ModelSpec, Preset, Stage,
    Variant,
};
use disrom_core::nn::Activation;
use disrom_core::tensor::{grad_check, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random<T: disrom_core::tensor::Real>(seed: u64, shape: &[usize]) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::of(rng.random_range(-1.0..1.0))).collect()).unwrap()
}

fn outputs(rows: &[LayerShape]) -> Vec<Vec<usize>> {
    rows.iter().map(|r| r.output.clone()).collect()
}

fn v(s: &[usize]) -> Vec<usize> {
    s.to_vec()
}

#[test]
fn periodic_full_matches_its_reference_shapes() {
    let spec = ModelSpec::preset(Preset::PeriodicFull, Variant::Uae, 2);
    let model = Model::<f32>::build(&spec, 0).unwrap();
    let (enc, dec) = model.trace_shapes().unwrap();
    let want_enc = vec![
        v(&[300, 88, 2]),
        v(&[150, 44, 8]),
        v(&[76, 22, 16]),
        v(&[38, 12, 32]),
        v(&[20, 6, 64]),
        v(&[10, 4, 128]),
        v(&[5, 2, 256]),
        v(&[2560]),
        v(&[256]),
        v(&[2]),
    ];
    let want_dec = vec![
        v(&[256]),
        v(&[2560]),
        v(&[5, 2, 256]),
        v(&[10, 4, 128]),
        v(&[20, 6, 64]),
        v(&[38, 12, 32]),
        v(&[76, 22, 16]),
        v(&[150, 44, 8]),
        v(&[300, 88, 2]),
    ];
    assert_eq!(outputs(&enc), want_enc);
    assert_eq!(outputs(&dec), want_dec);
    assert_eq!(spec.layer_shapes(), (enc, dec));
}

#[test]
fn ditching_full_matches_its_reference_shapes() {
    let spec = ModelSpec::preset(Preset::DitchingFull, Variant::Uae, 10);
    let model = Model::<f32>::build(&spec, 0).unwrap();
    let (enc, dec) = model.trace_shapes().unwrap();
    let want_enc =
        vec![v(&[128, 128, 1]), v(&[64, 64, 8]), v(&[32, 32, 16]), v(&[16, 16, 32]), v(&[8, 8, 64]), v(&[4096]), v(&[10])];
    let want_dec = vec![v(&[4096]), v(&[8, 8, 64]), v(&[16, 16, 32]), v(&[32, 32, 16]), v(&[64, 64, 8]), v(&[128, 128, 1])];
    assert_eq!(outputs(&enc), want_enc);
    assert_eq!(outputs(&dec), want_dec);
    assert_eq!(dec[1].kind, LayerKind::Unflatten);
    assert_eq!(dec.last().unwrap().kind, LayerKind::ConvTranspose2d { out_channels: 1 });
}

#[test]
fn small_presets_follow_their_declared_shapes() {
    for preset in [Preset::PeriodicSmall, Preset::DitchingSmall, Preset::Toy] {
        for variant in [Variant::Plain, Variant::BetaVae] {
            let spec = ModelSpec::preset(preset, variant, 3);
            let model = Model::<f32>::build(&spec, 1).unwrap();
            assert_eq!(model.trace_shapes().unwrap(), spec.layer_shapes(), "{preset:?}");
        }
    }
    let small = ModelSpec::preset(Preset::PeriodicSmall, Variant::Plain, 2);
    assert_eq!(small.input, Stage::new(2, 64, 24));
    let channels: Vec<usize> = small.encoder_convs.iter().map(|s| s.channels).collect();
    assert_eq!(channels, [2, 4, 8, 16, 32, 64]);
}

#[test]
fn unreachable_shape_names_the_layer() {
    let mut spec = ModelSpec::preset(Preset::Toy, Variant::Plain, 2);
    spec.preset = Preset::Custom;
    spec.encoder_convs[1] = Stage::new(4, 4, 4);
    match Model::<f32>::build(&spec, 0) {
        Err(ModelError::UnreachableShape { layer, .. }) => assert_eq!(layer, "encoder.conv1"),
        other => panic!("expected an unreachable shape, got {other:?}"),
    }
}

#[test]
fn build_is_deterministic() {
    let spec = ModelSpec::preset(Preset::PeriodicSmall, Variant::BetaVae, 4);
    let a = Model::<f32>::build(&spec, 9).unwrap();
    let b = Model::<f32>::build(&spec, 9).unwrap();
    let bits = |m: &Model<f32>| m.params().iter().flat_map(|p| p.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&Model::<f32>::build(&spec, 10).unwrap()));
}

#[test]
fn encode_is_batch_independent_and_sized() {
    let spec = ModelSpec::preset(Preset::PeriodicSmall, Variant::Uae, 10);
    let model = Model::<f32>::build(&spec, 2).unwrap();
    let x8 = random::<f32>(3, &[8, 2, 64, 24]);
    let x1 = x8.slice_outer(0, 1).unwrap();
    let z8 = model.encode(&x8).unwrap().into_mean();
    let z1 = model.encode(&x1).unwrap().into_mean();
    assert_eq!(z8.shape(), &[8, 10]);
    assert_eq!(&z8.data()[..10], z1.data());
    assert!(model.encode(&random::<f32>(3, &[1, 1, 64, 24])).is_err());
}

#[test]
fn zeroed_dense_only_model_emits_its_bias() {
    let spec = ModelSpec {
        variant: Variant::Plain,
        latent_dim: 3,
        input: Stage::new(1, 4, 4),
        preset: Preset::Custom,
        activation: Activation::ELU,
        encoder_convs: vec![],
        encoder_hidden: vec![],
    };
    let mut model = Model::<f32>::build(&spec, 0).unwrap();
    for p in model.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let bias = [0.5f32, -1.0, 2.0];
    if let disrom_core::models::LatentHead::Point(head) = &mut model.head {
        head.bias.data_mut().copy_from_slice(&bias);
    }
    let z = model.encode(&random::<f32>(1, &[5, 1, 4, 4])).unwrap().into_mean();
    for row in z.data().chunks(3) {
        assert_eq!(row, bias);
    }
}

#[test]
fn reparameterize_examples() {
    let mu = random::<f64>(1, &[3, 2]);
    let lv = random::<f64>(2, &[3, 2]);
    let z = reparameterize(&mu, &lv, &Tensor::zeros(&[3, 2])).unwrap();
    assert_eq!(z, mu);
    let e = random::<f64>(3, &[3, 2]);
    let z = reparameterize(&mu, &Tensor::zeros(&[3, 2]), &e).unwrap();
    for i in 0..6 {
        assert!((z.data()[i] - mu.data()[i] - e.data()[i]).abs() < 1e-15);
    }

    let mut tape = Tape::new();
    let m = tape.leaf(mu.clone().requiring_grad());
    let l = tape.leaf(lv.clone().requiring_grad());
    let ev = tape.constant(e.clone());
    let z = reparameterize_on(&mut tape, m, l, ev).unwrap();
    let s = tape.sum(z, None).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(m).unwrap().iter().all(|&g| g == 1.0));
    assert!(tape.grad(ev).is_none());
    for i in 0..6 {
        let want = 0.5 * (0.5 * lv.data()[i]).exp() * e.data()[i];
        assert!((tape.grad(l).unwrap()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn forward_checks_eps_and_composes() {
    let plain = Model::<f32>::build(&ModelSpec::preset(Preset::Toy, Variant::Plain, 2), 0).unwrap();
    let x = random::<f32>(4, &[3, 2, 8, 8]);
    let (rec, latent) = plain.forward(&x, None).unwrap();
    assert_eq!(rec.shape(), x.shape());
    assert_eq!(rec, plain.decode(latent.mean()).unwrap());
    assert!(matches!(plain.forward(&x, Some(&Tensor::zeros(&[3, 2]))), Err(ModelError::Eps(_))));

    let vae = Model::<f32>::build(&ModelSpec::preset(Preset::Toy, Variant::BetaVae, 2), 0).unwrap();
    assert!(matches!(vae.forward(&x, None), Err(ModelError::Eps(_))));
    let (rec, latent) = vae.forward(&x, Some(&Tensor::zeros(&[3, 2]))).unwrap();
    assert!(matches!(latent, LatentOut::Gaussian { .. }));
    assert_eq!(rec, vae.reconstruct(&x).unwrap());
    let eps = random::<f32>(5, &[3, 2]);
    assert_eq!(vae.forward(&x, Some(&eps)).unwrap(), vae.forward(&x, Some(&eps)).unwrap());
}

#[test]
fn decode_permutes_with_its_batch() {
    let model = Model::<f32>::build(&ModelSpec::preset(Preset::Toy, Variant::Plain, 2), 0).unwrap();
    let z = random::<f32>(6, &[3, 2]);
    let perm = z.gather_outer(&[2, 0, 1]).unwrap();
    let a = model.decode(&z).unwrap();
    let b = model.decode(&perm).unwrap();
    assert_eq!(a.gather_outer(&[2, 0, 1]).unwrap(), b);
}

/// Loss of the toy model as a function of one flattened parameter tensor.
fn toy_loss_check(variant: Variant, param: usize, seed: u64) -> f64 {
    let spec = ModelSpec::preset(Preset::Toy, variant, 2);
    let model = Model::<f64>::build(&spec, seed).unwrap();
    let x = random::<f64>(seed + 100, &[4, 2, 8, 8]);
    let eps = random::<f64>(seed + 200, &[4, 2]);
    let weights = if variant == Variant::Plain { LossWeights::plain() } else { LossWeights::new(variant, 0.5).unwrap() };
    let target = model.params()[param].clone();
    grad_check(
        |tape, p| {
            let mut bound = model.bind_frozen(tape);
            bound.vars[param] = p;
            let xv = tape.constant(x.clone());
            let ev = variant.is_variational().then(|| tape.constant(eps.clone()));
            let out = model.forward_on(tape, &bound, xv, ev).map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            if variant == Variant::Plain {
                reconstruction_loss(tape, xv, out.reconstruction)
            } else {
                Ok(total_loss(tape, weights, xv, out.reconstruction, out.latent).unwrap().total)
            }
        },
        &target,
        1e-6,
    )
    .unwrap()
}

#[test]
fn end_to_end_gradient_on_the_toy_preset() {
    for variant in [Variant::Plain, Variant::Oae, Variant::Uae, Variant::BetaVae] {
        let n = Model::<f64>::build(&ModelSpec::preset(Preset::Toy, variant, 2), 0).unwrap().params().len();
        for param in 0..n {
            let err = toy_loss_check(variant, param, 3);
            assert!(err < 1e-2, "{variant} parameter {param}: {err}");
        }
    }
}
