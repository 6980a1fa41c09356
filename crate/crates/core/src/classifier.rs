//! Attention-gated classifier: a VGG-style extractor whose intermediate stages
//! are summarised by attention-weighted spatial averages, plus a global
//! average of the final stage, combined by a configurable aggregation head.

use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::gate::{apply_gate, gated_skip, AttentionGateParams, AttentionMap, GateConfig, GateVars, GridMode, Normalization, SubGateSharing};
use crate::metrics::{cls_metrics, MetricsRecord};
use crate::nn::{self, add_conv_block, add_linear, commit_stats, conv_block, linear, Ctx};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{derive_seed, rng_for, ParamStore};
use crate::synth::{Augmenter, ClsSample};
use crate::tape::{BnMode, Reduction, Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// One fully connected layer on the concatenated vectors.
    ConcatFc,
    /// A head per scale, logits averaged.
    PerScaleMean,
    /// A head per scale, elementwise maximum of logits.
    PerScaleMax,
    /// Heads per scale trained first, then a new concatenated head on a frozen extractor.
    DeepSupFinetune,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat-fc" => Ok(Aggregation::ConcatFc),
            "per-scale-mean" => Ok(Aggregation::PerScaleMean),
            "per-scale-max" => Ok(Aggregation::PerScaleMax),
            "deepsup-finetune" => Ok(Aggregation::DeepSupFinetune),
            other => Err(invalid("aggregation", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    /// Channel width of every stage; stages after the first start with a 2×2 max pool.
    pub widths: Vec<usize>,
    pub convs_per_stage: usize,
    /// Stage indices whose features are attention-pooled; all before the last stage.
    pub gated_stages: Vec<usize>,
    pub n_classes: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// When false the gated stages are plainly average-pooled.
    pub gated: bool,
    pub normalization: Normalization,
    pub grid: GridMode,
    pub aggregation: Aggregation,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            widths: vec![8, 16, 32, 64],
            convs_per_stage: 2,
            gated_stages: vec![1, 2],
            n_classes: 5,
            in_channels: 1,
            height: 32,
            width: 32,
            gated: true,
            normalization: Normalization::MinShift,
            grid: GridMode::UpToX,
            aggregation: Aggregation::ConcatFc,
        }
    }
}

impl ClassifierConfig {
    pub fn with_base_width(base: usize) -> Self {
        ClassifierConfig {
            widths: (0..4).map(|s| base << s).collect(),
            ..ClassifierConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.widths.len();
        if stages < 2 || self.widths.contains(&0) || self.convs_per_stage == 0 {
            return Err(invalid("classifier", "need ≥ 2 stages, positive widths and ≥ 1 conv per stage"));
        }
        if self.gated_stages.iter().any(|&s| s + 1 >= stages) {
            return Err(invalid("classifier", "gated stages must come before the final stage"));
        }
        if self.gated_stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("classifier", "gated stages must be strictly increasing"));
        }
        if self.n_classes < 2 || self.in_channels == 0 {
            return Err(invalid("classifier", "need ≥ 2 classes and ≥ 1 input channel"));
        }
        let f = 1 << (stages - 1);
        if self.height % f != 0 || self.width % f != 0 || self.height == 0 || self.width == 0 {
            return Err(invalid("classifier", format!("input {}x{} not divisible by {f}", self.height, self.width)));
        }
        Ok(())
    }

    pub fn gate_config(&self, stage: usize) -> GateConfig {
        let f_l = self.widths[stage];
        GateConfig {
            f_l,
            f_g: *self.widths.last().expect("validated"),
            f_int: (f_l / 2).max(1),
            sub_gates: 1,
            normalization: self.normalization,
            grid: self.grid,
            sharing: SubGateSharing::Shared,
        }
    }

    /// Lengths of the pooled vectors: one per gated stage, then the final stage.
    pub fn vector_dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.gated_stages.iter().map(|&s| self.widths[s]).collect();
        d.push(*self.widths.last().expect("validated"));
        d
    }

    fn scale_heads(&self) -> bool {
        self.aggregation != Aggregation::ConcatFc
    }

    fn concat_head(&self) -> bool {
        matches!(self.aggregation, Aggregation::ConcatFc | Aggregation::DeepSupFinetune)
    }
}

/// How the gated stages are pooled in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Learned,
    /// Attention frozen at the uniform map `1/(H·W)`.
    Uniform,
}

pub struct ClsForward {
    /// Final logits `(N, N_c, 1, 1)`.
    pub logits: Var,
    /// Per-scale logits (per-scale and deep-supervision modes only).
    pub scale_logits: Vec<Var>,
    pub maps: Vec<AttentionMap>,
    /// Pooled `(N, F, 1, 1)` vectors, gated stages first.
    pub vectors: Vec<Var>,
}

/// `Σ_i α_i x_i` over the spatial axes, one value per channel.
pub fn attended_pool(tape: &mut Tape, x: Var, alpha: Var) -> Result<Var> {
    let gated = apply_gate(tape, x, alpha)?;
    tape.reduce(Reduction::SpatialSum, gated)
}

fn stage(s: usize, i: usize) -> String {
    format!("stage{s}.{i}")
}

pub fn gate_prefix(s: usize) -> String {
    format!("gate{s}")
}

fn head_prefix(k: usize) -> String {
    format!("head{k}")
}

/// Combines pooled vectors into logits. Returns the final logits and, for the
/// per-scale modes, each scale's logits.
pub fn aggregate(tape: &mut Tape, ctx: &Ctx, mode: Aggregation, vectors: &[Var]) -> Result<(Var, Vec<Var>)> {
    if vectors.is_empty() {
        return Err(invalid("aggregate", "no vectors"));
    }
    let per_scale = |tape: &mut Tape| -> Result<Vec<Var>> {
        vectors
            .iter()
            .enumerate()
            .map(|(k, &v)| linear(tape, ctx, &head_prefix(k), v))
            .collect()
    };
    let concat_fc = |tape: &mut Tape| -> Result<Var> {
        let cat = tape.channel_concat(vectors)?;
        linear(tape, ctx, "fc", cat)
    };
    match mode {
        Aggregation::ConcatFc => Ok((concat_fc(tape)?, Vec::new())),
        Aggregation::PerScaleMean => {
            let heads = per_scale(tape)?;
            let mut sum = heads[0];
            for &h in &heads[1..] {
                sum = tape.add(sum, h)?;
            }
            Ok((tape.scale(sum, 1.0 / heads.len() as f64), heads))
        }
        Aggregation::PerScaleMax => {
            let heads = per_scale(tape)?;
            let mut m = heads[0];
            for &h in &heads[1..] {
                m = tape.maximum(m, h)?;
            }
            Ok((m, heads))
        }
        Aggregation::DeepSupFinetune => {
            let heads = per_scale(tape)?;
            Ok((concat_fc(tape)?, heads))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub cfg: ClassifierConfig,
    pub params: ParamStore,
}

impl Classifier {
    /// Parameters are drawn per name from `seed`, so gated and baseline models
    /// built with one seed share every non-gate weight.
    pub fn build(cfg: ClassifierConfig, seed: u64) -> Result<Classifier> {
        cfg.validate()?;
        let mut p = ParamStore::new();
        let mut c_in = cfg.in_channels;
        for (s, &f) in cfg.widths.iter().enumerate() {
            for i in 0..cfg.convs_per_stage {
                add_conv_block(&mut p, seed, &stage(s, i), if i == 0 { c_in } else { f }, f);
            }
            c_in = f;
        }
        if cfg.gated {
            for &s in &cfg.gated_stages {
                let prefix = gate_prefix(s);
                let gc = cfg.gate_config(s);
                let seed = derive_seed(seed, &prefix);
                let g = match cfg.normalization {
                    Normalization::MinShift => AttentionGateParams::init_min_shift(gc, seed)?,
                    _ => AttentionGateParams::init_passthrough(gc, seed)?,
                };
                g.register(&mut p, &prefix);
            }
        }
        let dims = cfg.vector_dims();
        if cfg.scale_heads() {
            for (k, &d) in dims.iter().enumerate() {
                add_linear(&mut p, seed, &head_prefix(k), d, cfg.n_classes);
            }
        }
        if cfg.concat_head() {
            add_linear(&mut p, seed, "fc", dims.iter().sum(), cfg.n_classes);
        }
        Ok(Classifier { cfg, params: p })
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &mut Ctx, x: Var, pooling: Pooling) -> Result<ClsForward> {
        let cfg = &self.cfg;
        let xs = tape.shape(x);
        if (xs.c, xs.h, xs.w) != (cfg.in_channels, cfg.height, cfg.width) {
            return Err(Error::ShapeMismatch {
                op: "classifier.forward",
                left: Shape::new(xs.n, cfg.in_channels, cfg.height, cfg.width),
                right: xs,
            });
        }
        let mut feats = Vec::with_capacity(cfg.widths.len());
        let mut h = x;
        for s in 0..cfg.widths.len() {
            if s > 0 {
                h = tape.max_pool2d(h, 2, 2)?;
            }
            for i in 0..cfg.convs_per_stage {
                h = conv_block(tape, ctx, &stage(s, i), h)?;
            }
            feats.push(h);
        }
        let g = *feats.last().expect("validated");
        let mut maps = Vec::new();
        let mut vectors = Vec::new();
        for &s in &cfg.gated_stages {
            let x = feats[s];
            let v = match (cfg.gated, pooling) {
                (true, Pooling::Learned) => {
                    let gv = GateVars::bind_with(ctx, tape, &gate_prefix(s), cfg.gate_config(s))?;
                    let (gated, map) = gated_skip(tape, x, g, &gv, s)?;
                    maps.push(map);
                    tape.reduce(Reduction::SpatialSum, gated)?
                }
                (true, Pooling::Uniform) => {
                    let sh = tape.shape(x);
                    let alpha = tape.constant(Tensor::full(Shape::new(sh.n, 1, sh.h, sh.w), 1.0 / sh.plane() as f64));
                    maps.push(AttentionMap { alpha, scale: s });
                    attended_pool(tape, x, alpha)?
                }
                (false, _) => tape.reduce(Reduction::GlobalAvgPool, x)?,
            };
            vectors.push(v);
        }
        vectors.push(tape.reduce(Reduction::GlobalAvgPool, g)?);
        let (logits, scale_logits) = aggregate(tape, ctx, cfg.aggregation, &vectors)?;
        Ok(ClsForward {
            logits,
            scale_logits,
            maps,
            vectors,
        })
    }

    /// Eval-mode class probabilities `(N, N_c, 1, 1)` and per-gate maps.
    pub fn predict(&self, images: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&self.params, BnMode::Eval);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &mut ctx, x, Pooling::Learned)?;
        let probs = nn::class_probs(&mut tape, out.logits)?;
        let maps = out.maps.iter().map(|m| tape.value(m.alpha).clone()).collect();
        Ok((tape.value(probs).clone(), maps))
    }
}

/// Draws background and foreground with equal probability, uniformly within
/// each pool.
#[derive(Clone, Debug)]
pub struct WeightedSampler {
    background: Vec<usize>,
    foreground: Vec<usize>,
}

impl WeightedSampler {
    pub fn new(labels: &[usize]) -> Result<Self> {
        let (background, foreground): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i] == 0);
        if background.is_empty() && foreground.is_empty() {
            return Err(invalid("sampler", "no samples"));
        }
        Ok(WeightedSampler { background, foreground })
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> usize {
        let pool = if self.foreground.is_empty() || (!self.background.is_empty() && rng.random_bool(0.5)) {
            &self.background
        } else {
            &self.foreground
        };
        pool[rng.random_range(0..pool.len())]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClsTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
    pub warm_lr: f64,
    pub warm_epochs: usize,
    pub lr: f64,
    /// Fraction of training after which the rate drops tenfold.
    pub decay_at: f64,
    /// Draws per epoch; defaults to the training-set size.
    pub samples_per_epoch: Option<usize>,
    pub augment: bool,
    /// Extra epochs for the concatenated head in deep-supervision mode.
    pub finetune_epochs: usize,
}

impl Default for ClsTrainConfig {
    fn default() -> Self {
        ClsTrainConfig {
            epochs: 10,
            batch_size: 32,
            seed: 0,
            momentum: 0.9,
            warm_lr: 0.01,
            warm_epochs: 2,
            lr: 0.1,
            decay_at: 0.6,
            samples_per_epoch: None,
            augment: false,
            finetune_epochs: 2,
        }
    }
}

impl ClsTrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warm_epochs {
            self.warm_lr
        } else if (epoch as f64) < self.decay_at * self.epochs as f64 {
            self.lr
        } else {
            self.lr * 0.1
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClsEpoch {
    pub epoch: usize,
    /// 1 for the main phase, 2 for deep-supervision fine-tuning.
    pub phase: u8,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<MetricsRecord>,
}

fn images(samples: &[&ClsSample]) -> Result<Tensor> {
    let imgs: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    Tensor::stack(&imgs)
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = tape.add(sum, t)?;
    }
    Ok(tape.scale(sum, 1.0 / terms.len() as f64))
}

/// One optimizer step. Phase 2 freezes everything except the concatenated head
/// and runs batch norm in eval mode.
pub fn cls_step(net: &mut Classifier, opt: &mut Optimizer, batch: &[&ClsSample], phase: u8) -> Result<f64> {
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let mut tape = Tape::new();
    let x = tape.constant(images(batch)?);
    let not_fc = |name: &str| !name.starts_with("fc.");
    let (loss, stats) = {
        let mut ctx = if phase == 2 {
            Ctx::new(&net.params, BnMode::Eval).with_frozen(&not_fc)
        } else {
            Ctx::new(&net.params, BnMode::Train)
        };
        let out = net.forward(&mut tape, &mut ctx, x, Pooling::Learned)?;
        let loss = if net.cfg.aggregation == Aggregation::DeepSupFinetune && phase == 1 {
            let terms = out
                .scale_logits
                .iter()
                .map(|&l| tape.cross_entropy(l, &labels))
                .collect::<Result<Vec<_>>>()?;
            mean_of(&mut tape, &terms)?
        } else {
            tape.cross_entropy(out.logits, &labels)?
        };
        (loss, ctx.into_stats())
    };
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let grads: Vec<(String, Tensor)> = grads.params(&tape).map(|(n, g)| (n.to_string(), g)).collect();
    if value.is_finite() {
        opt.step(&mut net.params, grads.iter().map(|(n, g)| (n.as_str(), g.clone())))?;
        commit_stats(&mut net.params, &stats)?;
    }
    Ok(value)
}

pub fn predict_classes(net: &Classifier, samples: &[ClsSample], chunk: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk.max(1)) {
        let refs: Vec<&ClsSample> = part.iter().collect();
        let (probs, _) = net.predict(&images(&refs)?)?;
        for n in 0..probs.shape().n {
            out.push(nn::argmax((0..probs.shape().c).map(|c| probs.at(n, c, 0, 0))));
        }
    }
    Ok(out)
}

pub fn evaluate_cls(net: &Classifier, samples: &[ClsSample]) -> Result<MetricsRecord> {
    let pred = predict_classes(net, samples, 64)?;
    let gt: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(cls_metrics(&pred, &gt, net.cfg.n_classes))
}

/// Nesterov SGD with the warm-start / step-decay schedule and the weighted
/// sampler. Deep-supervision aggregation adds `finetune_epochs` of phase 2.
pub fn train_cls(
    net: &mut Classifier,
    train: &[ClsSample],
    val: &[ClsSample],
    cfg: &ClsTrainConfig,
    mut on_epoch: impl FnMut(&Classifier, &ClsEpoch) -> Result<()>,
) -> Result<Vec<ClsEpoch>> {
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct < 2 || cfg.epochs == 0 || cfg.batch_size < 2 {
        return Err(invalid("train_cls", "need ≥ 2 classes in the data, ≥ 1 epoch and batch size ≥ 2"));
    }
    let sampler = WeightedSampler::new(&labels)?;
    let mut rng = rng_for(cfg.seed, "cls-sampler");
    let mut aug = Augmenter::new(derive_seed(cfg.seed, "cls-augment"), 2);
    let mut opt = Optimizer::new(OptimizerKind::SgdNesterov { momentum: cfg.momentum }, cfg.warm_lr);
    let draws = cfg.samples_per_epoch.unwrap_or(train.len());
    let finetune = if net.cfg.aggregation == Aggregation::DeepSupFinetune {
        cfg.finetune_epochs
    } else {
        0
    };
    let mut history = Vec::new();
    let mut ft_opt = Optimizer::new(OptimizerKind::SgdNesterov { momentum: cfg.momentum }, cfg.lr * 0.1);
    for epoch in 0..cfg.epochs + finetune {
        let phase = if epoch < cfg.epochs { 1 } else { 2 };
        let opt = if phase == 1 {
            opt.lr = cfg.lr_at(epoch);
            &mut opt
        } else {
            &mut ft_opt
        };
        let mut total = 0.0;
        let mut batches = 0;
        let mut left = draws;
        while left >= 2 {
            let n = left.min(cfg.batch_size);
            left -= n;
            let owned: Vec<ClsSample> = (0..n)
                .map(|_| {
                    let s = &train[sampler.draw(&mut rng)];
                    if cfg.augment {
                        aug.cls(s)
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let refs: Vec<&ClsSample> = owned.iter().collect();
            let loss = cls_step(net, opt, &refs, phase)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batches });
            }
            total += loss;
            batches += 1;
        }
        let rec = ClsEpoch {
            epoch,
            phase,
            lr: opt.lr,
            train_loss: total / batches.max(1) as f64,
            val: if val.is_empty() { None } else { Some(evaluate_cls(net, val)?) },
        };
        on_epoch(net, &rec)?;
        history.push(rec);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregation_parsing() {
        assert_eq!("per-scale-max".parse::<Aggregation>().unwrap(), Aggregation::PerScaleMax);
        assert!("softmax".parse::<Aggregation>().is_err());
    }

    #[test]
    fn schedule() {
        let c = ClsTrainConfig {
            epochs: 10,
            ..ClsTrainConfig::default()
        };
        let lrs: Vec<f64> = (0..10).map(|e| c.lr_at(e)).collect();
        assert_eq!(&lrs[..2], &[0.01, 0.01]);
        assert!(lrs[2..6].iter().all(|&l| l == 0.1));
        assert!(lrs[6..].iter().all(|&l| (l - 0.01).abs() < 1e-15));
    }

    #[test]
    fn validation() {
        let bad = ClassifierConfig {
            gated_stages: vec![3],
            ..ClassifierConfig::default()
        };
        assert!(Classifier::build(bad, 0).is_err());
        assert!(Classifier::build(ClassifierConfig::default(), 0).is_ok());
    }
}
