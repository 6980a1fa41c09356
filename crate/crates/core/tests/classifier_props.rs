use agkit::classifier::{
    aggregate, attended_pool, cls_step, train_cls, Aggregation, ClassifierConfig, Classifier, ClsTrainConfig, Pooling, WeightedSampler,
};
use agkit::nn::Ctx;
use agkit::optim::{Optimizer, OptimizerKind};
use agkit::synth::{gen_cls, ClsParams, ClsSample};
use agkit::tape::BnMode;
use agkit::{ParamStore, Shape, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(gated: bool, aggregation: Aggregation) -> ClassifierConfig {
    ClassifierConfig {
        widths: vec![4, 6, 8, 8],
        gated,
        aggregation,
        ..ClassifierConfig::default()
    }
}

fn data(n: usize, seed: u64) -> Vec<ClsSample> {
    let p = ClsParams {
        h: 32,
        w: 32,
        n_fg: 4,
        background_ratio: 0.5,
    };
    gen_cls(seed, 0, n, &p).unwrap()
}

fn batch(samples: &[ClsSample]) -> Tensor {
    Tensor::stack(&samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>()).unwrap()
}

fn logits(net: &Classifier, images: &Tensor, pooling: Pooling) -> Tensor {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&net.params, BnMode::Train);
    let x = tape.constant(images.clone());
    let out = net.forward(&mut tape, &mut ctx, x, pooling).unwrap();
    tape.value(out.logits).clone()
}

#[test]
fn uniform_attention_reproduces_the_average_pooled_baseline_bit_for_bit() {
    let images = batch(&data(4, 1));
    for agg in [Aggregation::ConcatFc, Aggregation::PerScaleMean, Aggregation::PerScaleMax, Aggregation::DeepSupFinetune] {
        let gated = Classifier::build(small(true, agg), 3).unwrap();
        let plain = Classifier::build(small(false, agg), 3).unwrap();
        assert_eq!(logits(&gated, &images, Pooling::Uniform), logits(&plain, &images, Pooling::Learned), "{agg:?}");
    }
}

fn pool(x: &Tensor, alpha: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let av = tape.constant(alpha.clone());
    let p = attended_pool(&mut tape, xv, av).unwrap();
    tape.value(p).clone()
}

#[test]
fn attended_pool_examples() {
    let sh = Shape::new(1, 2, 3, 4);
    let uniform = Tensor::full(Shape::new(1, 1, 3, 4), 1.0 / 12.0);
    let constant = Tensor::from_fn(sh, |_, c, _, _| 2.0 + c as f64);
    let p = pool(&constant, &uniform);
    assert!((p.data()[0] - 2.0).abs() < 1e-15 && (p.data()[1] - 3.0).abs() < 1e-15);
    let x = Tensor::from_fn(sh, |_, c, y, xx| (c * 100 + y * 4 + xx) as f64);
    let one_hot = Tensor::from_fn(Shape::new(1, 1, 3, 4), |_, _, y, xx| f64::from(u8::from((y, xx) == (2, 1))));
    assert_eq!(pool(&x, &one_hot).data(), &[9.0, 109.0]);
}

#[test]
fn zero_weights_give_the_bias() {
    let mut net = Classifier::build(small(true, Aggregation::ConcatFc), 5).unwrap();
    let w = net.params.get_mut("fc.w").unwrap();
    *w = Tensor::zeros(w.shape());
    *net.params.get_mut("fc.b").unwrap() = Tensor::new(Shape::new(1, 5, 1, 1), vec![0.5, -1.0, 2.0, 0.0, 3.0]).unwrap();
    let out = logits(&net, &batch(&data(3, 2)), Pooling::Learned);
    for n in 0..3 {
        let row: Vec<f64> = (0..5).map(|c| out.at(n, c, 0, 0)).collect();
        assert_eq!(row, vec![0.5, -1.0, 2.0, 0.0, 3.0]);
    }
}

#[test]
fn per_scale_max_takes_the_elementwise_maximum() {
    let mut store = ParamStore::new();
    store.trainable("head0.w", Tensor::new(Shape::new(1, 2, 1, 1), vec![1.0, -1.0]).unwrap());
    store.trainable("head0.b", Tensor::zeros(Shape::new(1, 2, 1, 1)));
    store.trainable("head1.w", Tensor::new(Shape::new(1, 2, 1, 1), vec![-1.0, 1.0]).unwrap());
    store.trainable("head1.b", Tensor::zeros(Shape::new(1, 2, 1, 1)));
    let ctx = Ctx::new(&store, BnMode::Eval);
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
    let (max, heads) = aggregate(&mut tape, &ctx, Aggregation::PerScaleMax, &[v, v]).unwrap();
    assert_eq!(tape.value(max).data(), &[1.0, 1.0]);
    assert_eq!(heads.len(), 2);
    let (mean, _) = aggregate(&mut tape, &ctx, Aggregation::PerScaleMean, &[v, v]).unwrap();
    assert_eq!(tape.value(mean).data(), &[0.0, 0.0]);
}

#[test]
fn fine_tuning_only_moves_the_concatenated_head() {
    let mut net = Classifier::build(small(true, Aggregation::DeepSupFinetune), 7).unwrap();
    let before = net.params.clone();
    let samples = data(8, 3);
    let refs: Vec<&ClsSample> = samples.iter().collect();
    let mut opt = Optimizer::new(OptimizerKind::nesterov(), 0.1);
    cls_step(&mut net, &mut opt, &refs, 2).unwrap();
    let mut moved = Vec::new();
    for (name, p) in net.params.iter() {
        if before.get(name).unwrap() != &p.value {
            moved.push(name.to_string());
        }
    }
    assert_eq!(moved, vec!["fc.w".to_string(), "fc.b".to_string()]);
    cls_step(&mut net, &mut opt, &refs, 1).unwrap();
    assert_ne!(net.params.get("stage0.0.conv.w").unwrap(), before.get("stage0.0.conv.w").unwrap());
}

#[test]
fn sampler_balances_background_and_foreground() {
    let labels: Vec<usize> = (0..1000).map(|i| if i < 900 { 0 } else if i < 950 { 1 } else { 2 }).collect();
    let sampler = WeightedSampler::new(&labels).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draws = 10_000;
    let mut counts = [0f64; 3];
    for _ in 0..draws {
        counts[labels[sampler.draw(&mut rng)]] += 1.0;
    }
    for (c, p) in [(0, 0.5), (1, 0.25), (2, 0.25)] {
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!((counts[c] - draws as f64 * p).abs() <= 3.0 * sd, "class {c}: {}", counts[c]);
    }
}

#[test]
fn overfits_one_batch() {
    let samples = data(8, 5);
    let refs: Vec<&ClsSample> = samples.iter().collect();
    let mut net = Classifier::build(small(true, Aggregation::ConcatFc), 2).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::nesterov(), 0.05);
    let mut last = f64::INFINITY;
    for _ in 0..300 {
        last = cls_step(&mut net, &mut opt, &refs, 1).unwrap();
        if last < 0.01 {
            break;
        }
    }
    assert!(last < 0.01, "loss {last}");
}

#[test]
fn training_is_deterministic() {
    let train = data(40, 6);
    let val = data(10, 7);
    let cfg = ClsTrainConfig {
        epochs: 2,
        batch_size: 8,
        augment: true,
        finetune_epochs: 1,
        ..ClsTrainConfig::default()
    };
    let run = || {
        let mut net = Classifier::build(small(true, Aggregation::DeepSupFinetune), 1).unwrap();
        let h = train_cls(&mut net, &train, &val, &cfg, |_, _| Ok(())).unwrap();
        (net, h)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(ha, hb);
    assert_eq!(ha.iter().map(|e| e.phase).collect::<Vec<_>>(), vec![1, 1, 2]);
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Attended pooling against an explicit loop.
    #[test]
    fn attended_pool_matches_loop(seed in any::<u64>(), c in 1usize..4, h in 1usize..6, w in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(Shape::new(2, c, h, w), -2.0, 2.0, &mut rng);
        let a = Tensor::uniform(Shape::new(2, 1, h, w), 0.0, 1.0, &mut rng);
        let got = pool(&x, &a);
        for n in 0..2 {
            for ch in 0..c {
                let mut want = 0.0;
                for y in 0..h {
                    for xx in 0..w {
                        want += a.at(n, 0, y, xx) * x.at(n, ch, y, xx);
                    }
                }
                prop_assert!((got.at(n, ch, 0, 0) - want).abs() < 1e-12);
            }
        }
    }
}
