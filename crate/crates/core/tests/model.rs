use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tassel_core::synth::synth_scene;
use tassel_core::train::{fit, prepare_all, sample_gradients, validate, Trainer};
use tassel_core::{
    ExemplarBox, ExemplarSet, Graph, Mode, ModelConfig, Raster, Sample, SynthConfig, TasselModel, Tensor, TrainConfig,
};

fn scenes(n: u64, seed: u64) -> Vec<Sample> {
    let cfg = SynthConfig { seed, ..SynthConfig::default() };
    (0..n).map(|i| synth_scene(&cfg, i).unwrap()).collect()
}

fn gradient_image(side: usize) -> Raster {
    let mut r = Raster::new(side, side);
    for y in 0..side {
        for x in 0..side {
            r.set_pixel(x, y, [x as f32 / side as f32, y as f32 / side as f32, 0.5]);
        }
    }
    r
}

#[test]
fn tiny_preset_token_counts() {
    let model = TasselModel::new(ModelConfig::tiny(), 0).unwrap();
    let image = gradient_image(128);
    let ex = ExemplarSet::build(&image, &[ExemplarBox::new(8.0, 8.0, 40.0, 40.0).unwrap()], 32).unwrap();
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &image, &ex, Mode::Infer, false).unwrap();
    assert_eq!((fwd.tokens.n_image, fwd.tokens.n_exemplar), (64, 4));
    assert_eq!(g.shape(fwd.tokens.tokens), &[68, 64]);
    assert_eq!(g.shape(fwd.encoded.features), &[8, 8, 65]);
}

#[test]
fn attention_rows_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.constant(Tensor::uniform(&[20, 13], 30.0, &mut rng));
    let p = g.softmax_rows(x, 1.0).unwrap();
    for row in g.value(p).data().chunks(13) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn exemplar_order_does_not_change_the_match_map() {
    let model = TasselModel::new(ModelConfig::tiny(), 2).unwrap();
    let s = &scenes(1, 2)[0];
    let (prepared, ex) = prepare_all(std::slice::from_ref(s), model.config()).unwrap();
    let image = &prepared[0].raster;
    let ex = &ex[0];
    assert!(ex.len() > 1);
    let mut perm = ex.clone();
    perm.boxes.reverse();
    perm.patches.reverse();
    perm.scale_maps.reverse();
    let a = model.predict(image, ex).unwrap();
    let b = model.predict(image, &perm).unwrap();
    for (x, y) in a.match_map.iter().zip(&b.match_map) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn magnitude_scales_the_match_map() {
    let model = TasselModel::new(ModelConfig::tiny(), 4).unwrap();
    let image = gradient_image(128);
    let mut ex = ExemplarSet::build(&image, &[ExemplarBox::new(0.0, 0.0, 32.0, 32.0).unwrap()], 32).unwrap();
    assert_eq!(ex.magnitude, 1.0);
    let one = model.predict(&image, &ex).unwrap().match_map;
    ex.magnitude = 4.0;
    let four = model.predict(&image, &ex).unwrap().match_map;
    assert!(one.iter().zip(&four).all(|(a, b)| 4.0 * a == *b));
}

#[test]
fn training_is_deterministic() {
    let cfg = ModelConfig::tiny();
    let (train, ex) = prepare_all(&scenes(12, 6), &cfg).unwrap();
    let run = || {
        let mut model = TasselModel::new(cfg.clone(), 6).unwrap();
        let tc = TrainConfig { epochs: 2, batch_size: 4, seed: 6, ..TrainConfig::tiny() };
        let mut trainer = Trainer::new(tc, &model, train.len()).unwrap();
        fit(&mut model, &mut trainer, (&train, &ex), (&[], &[]), &mut ()).unwrap();
        model
    };
    let (a, b) = (run(), run());
    assert_eq!(a.params().tensors(), b.params().tensors());
}

#[test]
fn a_few_epochs_reduce_validation_error() {
    let cfg = ModelConfig::tiny();
    let all = scenes(60, 7);
    let (train, trainx) = prepare_all(&all[..48], &cfg).unwrap();
    let (val, valx) = prepare_all(&all[48..], &cfg).unwrap();
    let mut model = TasselModel::new(cfg, 7).unwrap();
    let before = validate(&model, &val, &valx).unwrap().0;
    let tc = TrainConfig { epochs: 6, seed: 7, ..TrainConfig::tiny() };
    let mut trainer = Trainer::new(tc, &model, train.len()).unwrap();
    fit(&mut model, &mut trainer, (&train, &trainx), (&[], &[]), &mut ()).unwrap();
    let after = validate(&model, &val, &valx).unwrap().0;
    assert!(after < 0.75 * before, "val MAE {before} -> {after}");
}

#[test]
fn only_the_selected_branch_receives_gradient() {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = TasselModel::new(cfg.clone(), 9).unwrap();
    let image = gradient_image(128);
    for side in [12.0, 48.0, 100.0] {
        let x0 = rng.gen_range(0.0..(128.0 - side));
        let ex = ExemplarSet::build(&image, &[ExemplarBox::new(x0, 0.0, x0 + side, side).unwrap()], 32).unwrap();
        let selected = model.select(&ex);
        let (_, grads) = sample_gradients(&model, &TrainConfig::tiny(), &image, &[(60.0, 60.0)], &ex).unwrap();
        for b in 0..model.branch_count() {
            let touched = model
                .branch_slots(tassel_core::Branch(b))
                .iter()
                .any(|&slot| grads[slot].iter().any(|&v| v != 0.0));
            assert_eq!(touched, b == selected.index(), "side {side}, branch {b}");
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = TasselModel::new(ModelConfig::tiny(), 10).unwrap();
    model.save(&path, serde_json::json!({"note": "x"})).unwrap();
    let (back, extra) = TasselModel::load(&path).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.params().tensors(), model.params().tensors());
    assert_eq!(extra["note"], "x");
}
