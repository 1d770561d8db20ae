use pdfuse::data::{Dataset, PerturbProfile, SceneConfig};
use pdfuse::labels::{LabelMap, IGNORE};
use pdfuse::segnet::{
    argmax_labels, load_checkpoint, logits, predict, predict_probs, save_checkpoint, seg_loss, train,
    trace_csv, AdamW, FusionMode, LossWeights, PdSource, PredictOptions, SegNet, SegNetConfig,
    TrainConfig,
};
use pdfuse::{Error, Graph, ParamGroup, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss_of(logits: &Tensor<f64>, labels: &[LabelMap]) -> (f64, f64, f64, Vec<f64>) {
    let mut g = Graph::new();
    let x = g.variable(logits.clone()).unwrap();
    let loss = seg_loss(&mut g, x, labels, LossWeights::default()).unwrap();
    let total = g.value(loss.total).item();
    let grads = g.backward(loss.total).unwrap();
    (total, loss.ce, loss.dice, grads.get(x).unwrap().to_vec())
}

#[test]
fn uniform_logits_give_log_k_cross_entropy() {
    for k in [2usize, 3, 6] {
        let lm = LabelMap::new(2, 3, vec![0, 1, 0, 1, 1, 0]).unwrap();
        let (_, ce, _, _) = loss_of(&Tensor::zeros(&[1, k, 2, 3]), &[lm]);
        assert!((ce - (k as f64).ln()).abs() < 1e-12, "K={k}");
    }
}

#[test]
fn confident_correct_logits_saturate_to_zero() {
    let labels = vec![0u8, 2, 1, 2];
    let mut x = vec![-30.0; 3 * 4];
    for (p, &c) in labels.iter().enumerate() {
        x[c as usize * 4 + p] = 30.0;
    }
    let (total, ce, dice, _) = loss_of(&Tensor::from_f64(&[1, 3, 2, 2], &x).unwrap(), &[LabelMap::new(2, 2, labels).unwrap()]);
    assert!(ce < 1e-20 && dice.abs() < 1e-20 && total.abs() < 1e-20);
}

#[test]
fn hand_computed_two_pixel_case() {
    // pixel 0: logits (2, 0); pixel 1: logits (0, 1); both labelled 0
    let x = Tensor::from_f64(&[1, 2, 1, 2], &[2.0, 0.0, 0.0, 1.0]).unwrap();
    let (total, ce, dice, _) = loss_of(&x, &[LabelMap::new(1, 2, vec![0, 0]).unwrap()]);
    let e = std::f64::consts::E;
    let p0 = [e * e / (e * e + 1.0), 1.0 / (1.0 + e)];
    let want_ce = -(p0[0].ln() + p0[1].ln()) / 2.0;
    let sum0 = p0[0] + p0[1];
    let sum1 = 2.0 - sum0;
    // class 0 is in the target, class 1 is the argmax at pixel 1
    let d0 = (2.0 * sum0 + 1.0) / (sum0 + 2.0 + 1.0);
    let d1 = 1.0 / (sum1 + 1.0);
    let want_dice = 1.0 - (d0 + d1) / 2.0;
    assert!((ce - want_ce).abs() < 1e-12);
    assert!((dice - want_dice).abs() < 1e-12);
    assert!((total - want_ce - want_dice).abs() < 1e-12);
}

#[test]
fn loss_is_equivariant_under_class_relabeling() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (k, h, w) = (4usize, 5usize, 6usize);
    let perm = [2usize, 0, 3, 1];
    for _ in 0..5 {
        let x = Tensor::<f64>::randn(&[2, k, h, w], 2.0, &mut rng);
        let labels: Vec<LabelMap> = (0..2)
            .map(|_| {
                let d = (0..h * w)
                    .map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..k as u8) })
                    .collect();
                LabelMap::new(h, w, d).unwrap()
            })
            .collect();
        let mut px = vec![0.0; x.numel()];
        for b in 0..2 {
            for (c, &pc) in perm.iter().enumerate().take(k) {
                let (src, dst) = ((b * k + c) * h * w, (b * k + pc) * h * w);
                px[dst..dst + h * w].copy_from_slice(&x.data()[src..src + h * w]);
            }
        }
        let plabels: Vec<LabelMap> = labels
            .iter()
            .map(|l| {
                let d = l.data().iter().map(|&c| if c == IGNORE { c } else { perm[c as usize] as u8 }).collect();
                LabelMap::new(h, w, d).unwrap()
            })
            .collect();
        let (a, _, _, ga) = loss_of(&x, &labels);
        let (b, _, _, gb) = loss_of(&Tensor::from_f64(x.shape(), &px).unwrap(), &plabels);
        assert!((a - b).abs() < 1e-6);
        for bi in 0..2 {
            for (c, &pc) in perm.iter().enumerate().take(k) {
                for p in 0..h * w {
                    let (i, j) = ((bi * k + c) * h * w + p, (bi * k + pc) * h * w + p);
                    assert!((ga[i] - gb[j]).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn all_ignored_batch_gives_zero_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::ones(&[1, 3, 2, 2])).unwrap();
    let loss = seg_loss(&mut g, x, &[LabelMap::filled(2, 2, IGNORE)], LossWeights::default()).unwrap();
    assert!(loss.all_ignored);
    assert_eq!(g.value(loss.total).item(), 0.0);
}

#[test]
fn loss_rejects_mismatched_labels() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::zeros(&[1, 3, 2, 2])).unwrap();
    let wrong_shape = seg_loss(&mut g, x, &[LabelMap::filled(2, 3, 0)], LossWeights::default());
    assert!(matches!(wrong_shape, Err(Error::Dimension(_))));
    let out_of_range = seg_loss(&mut g, x, &[LabelMap::filled(2, 2, 3)], LossWeights::default());
    assert!(out_of_range.is_err());
}

#[test]
fn adamw_converges_on_convex_quadratic() {
    let target = [1.5, -2.0, 0.25, 3.0];
    let curvature = [1.0, 4.0, 0.5, 2.0];
    let mut store = ParamStore::<f64>::new();
    store.register("p", Tensor::zeros(&[4]), ParamGroup::Rest).unwrap();
    let mut opt = AdamW::new(0.0);
    for _ in 0..500 {
        let p = store.get_mut("p").unwrap();
        let (value, grad) = p.value_and_grad_mut();
        let grad = grad.unwrap();
        for i in 0..4 {
            grad[i] = 2.0 * curvature[i] * (value[i] - target[i]);
        }
        assert!(opt.step(&mut store, 0.05, 0.05));
    }
    let p = store.get("p").unwrap().data();
    let err = p.iter().zip(target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-3, "{err}");
    assert_eq!(opt.steps(), 500);
}

fn tiny_model(pd_source: PdSource, fusion: FusionMode) -> SegNetConfig {
    SegNetConfig {
        classes: 6,
        stem_widths: (4, 8),
        encoder_widths: (4, 8),
        unet_width: 4,
        fusion,
        pd_source,
        ..SegNetConfig::default()
    }
}

fn tiny_data(n_train: usize, n_test: usize) -> Dataset<f32> {
    let cfg = SceneConfig {
        image_size: 32,
        ..SceneConfig::default()
    };
    Dataset::generate(n_train, n_test, &cfg, &PerturbProfile::pseudo_trio()).unwrap()
}

#[test]
fn training_is_bitwise_deterministic() {
    let data = tiny_data(6, 2);
    let cfg = TrainConfig {
        model: tiny_model(PdSource::Pdam, FusionMode::Structured),
        iterations: 12,
        batch_size: 2,
        eval_interval: 6,
        seed: 3,
        ..TrainConfig::desk()
    };
    let a = train(&data.train, &data.test, &cfg).unwrap();
    let b = train(&data.train, &data.test, &cfg).unwrap();
    assert_eq!(a.params.to_bytes(""), b.params.to_bytes(""));
    assert_eq!(trace_csv(&a.trace), trace_csv(&b.trace));
    assert_eq!(a.trace.len(), 2);
    let c = train(&data.train, &data.test, &TrainConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(a.params.to_bytes(""), c.params.to_bytes(""));
}

#[test]
fn cross_entropy_falls_over_two_hundred_iterations() {
    let data = tiny_data(20, 0);
    let cfg = TrainConfig {
        model: tiny_model(PdSource::None, FusionMode::RgbOnly),
        iterations: 200,
        batch_size: 2,
        eval_interval: 20,
        ..TrainConfig::desk()
    };
    let run = train(&data.train, &[], &cfg).unwrap();
    run.check().unwrap();
    let (first, last) = (run.trace.first().unwrap(), run.trace.last().unwrap());
    assert!(last.ce < first.ce, "{} -> {}", first.ce, last.ce);
    assert!(run.trace.iter().all(|r| r.val_miou.is_none()));
}

#[test]
fn checkpoint_round_trip_keeps_params_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        model: tiny_model(PdSource::Single("smooth".into()), FusionMode::Manual { w_rgb: 0.95, w_pd: 0.05 }),
        seed: 12,
        ..TrainConfig::desk()
    };
    let net = SegNet::new(cfg.model.clone()).unwrap();
    let params = net.init_params::<f32>(1).unwrap();
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(&path, &params, &cfg).unwrap();
    let (back, echo) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(echo, cfg);
    assert_eq!(back.to_bytes(""), params.to_bytes(""));
}

fn constant_image(value: f64) -> Tensor<f64> {
    Tensor::full(&[1, 3, 32, 32], value)
}

#[test]
fn degenerate_scale_set_matches_single_pass() {
    let net = SegNet::new(tiny_model(PdSource::None, FusionMode::RgbOnly)).unwrap();
    let store = net.init_params::<f64>(5).unwrap();
    let rgb = Tensor::rand_uniform(&[1, 3, 32, 40], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
    let opts = PredictOptions { scales: vec![1.0], flip: false };
    let probs = predict_probs(&net, &store, &rgb, &[], &opts).unwrap();
    let raw = logits(&net, &store, &rgb, &[]).unwrap();
    assert_eq!(argmax_labels(&probs).unwrap(), argmax_labels(&raw).unwrap());
    assert_eq!(
        predict(&net, &store, &rgb, &[], &opts).unwrap(),
        predict(&net, &store, &rgb, &[], &PredictOptions::single_scale()).unwrap()
    );
    let ms = predict(&net, &store, &rgb, &[], &PredictOptions::multi_scale()).unwrap();
    assert_eq!((ms.height(), ms.width()), (32, 40));
}

#[test]
fn flip_averaging_of_symmetric_input_is_mirror_symmetric() {
    let net = SegNet::new(tiny_model(PdSource::Single("sharp".into()), FusionMode::Structured)).unwrap();
    let store = net.init_params::<f64>(8).unwrap();
    let half = Tensor::<f64>::rand_uniform(&[1, 3, 32, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
    let rgb = Tensor::concat(&[&half, &half.flip_w()], 3).unwrap();
    let pd = Tensor::concat(&[&half.narrow(1, 0, 1).unwrap(), &half.narrow(1, 0, 1).unwrap().flip_w()], 3).unwrap();
    let pd = Tensor::concat(&[&pd, &pd, &pd], 1).unwrap();
    assert_eq!(rgb.flip_w(), rgb);
    let opts = PredictOptions { scales: vec![1.0], flip: true };
    let probs = predict_probs(&net, &store, &rgb, std::slice::from_ref(&pd), &opts).unwrap();
    assert_eq!(probs.flip_w(), probs);

    // with every weight zeroed the network is flip-equivariant and flipping changes nothing
    let mut flat = store.clone();
    for p in flat.iter_mut().filter(|p| p.name.ends_with("weight")) {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    for p in flat.iter_mut().filter(|p| p.name.ends_with("bias")) {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let plain = predict(&net, &flat, &rgb, std::slice::from_ref(&pd), &PredictOptions::single_scale()).unwrap();
    assert_eq!(predict(&net, &flat, &rgb, &[pd], &opts).unwrap(), plain);
}

#[test]
fn constant_image_with_biased_head_is_labelled_by_the_bias() {
    let net = SegNet::new(tiny_model(PdSource::None, FusionMode::RgbOnly)).unwrap();
    for c in 0..6 {
        let mut store = net.init_params::<f64>(c as u64).unwrap();
        store.get_mut("head.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut("head.bias").unwrap().data_mut()[c] = 5.0;
        let pred = predict(&net, &store, &constant_image(0.4), &[], &PredictOptions::multi_scale()).unwrap();
        assert!(pred.data().iter().all(|&l| l as usize == c));
    }
}

#[test]
fn zero_depth_latent_reduces_structured_fusion_to_rgb_only() {
    let structured = SegNet::new(tiny_model(PdSource::Addition, FusionMode::Structured)).unwrap();
    let rgb_only = SegNet::new(tiny_model(PdSource::None, FusionMode::RgbOnly)).unwrap();
    let mut store = structured.init_params::<f64>(13).unwrap();
    for p in store.iter_mut().filter(|p| p.name.starts_with("pd_encoder.")) {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let shared = {
        let mut s = ParamStore::new();
        for p in store.iter().filter(|p| !p.name.starts_with("pd_encoder.")) {
            s.register(&p.name, p.tensor.clone(), p.group).unwrap();
        }
        s
    };
    assert_eq!(shared.num_scalars(None), rgb_only.init_params::<f64>(0).unwrap().num_scalars(None));
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let rgb = Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let maps: Vec<_> = (0..3).map(|_| Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng)).collect();
    let a = logits(&structured, &store, &rgb, &maps).unwrap();
    let b = logits(&rgb_only, &shared, &rgb, &[]).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn forward_shapes_and_zero_stem() {
    let net = SegNet::new(tiny_model(PdSource::Pdam, FusionMode::Structured)).unwrap();
    let store = net.init_params::<f64>(15).unwrap();
    let mut g = Graph::new();
    let rgb = g.constant(Tensor::zeros(&[2, 3, 32, 48])).unwrap();
    let z = net.stem(&mut g, &store, rgb).unwrap();
    assert_eq!(g.shape(z), &[2, 4, 4, 6]);
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    let maps: Vec<_> = (0..3).map(|_| g.constant(Tensor::full(&[2, 3, 32, 48], 0.5)).unwrap()).collect();
    let out = net.forward(&mut g, &store, rgb, &maps, 0).unwrap();
    assert_eq!(g.shape(out), &[2, 6, 32, 48]);
}

#[test]
fn forward_rejects_wrong_inputs() {
    let net = SegNet::new(tiny_model(PdSource::Pdam, FusionMode::Structured)).unwrap();
    let store = net.init_params::<f64>(16).unwrap();
    let mut g = Graph::new();
    let rgb = g.constant(Tensor::zeros(&[1, 3, 32, 32])).unwrap();
    let map = g.constant(Tensor::zeros(&[1, 3, 32, 32])).unwrap();
    assert!(matches!(net.forward(&mut g, &store, rgb, &[map], 0), Err(Error::Config(_))));
    let gray = g.constant(Tensor::zeros(&[1, 1, 32, 32])).unwrap();
    assert!(matches!(net.forward(&mut g, &store, gray, &[map, map, map], 0), Err(Error::Dimension(_))));
    assert!(SegNet::new(tiny_model(PdSource::None, FusionMode::Structured)).is_err());
    assert!(SegNet::new(tiny_model(PdSource::Addition, FusionMode::RgbOnly)).is_err());
}
