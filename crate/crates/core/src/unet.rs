//! 2D Attention U-Net with gated skip connections and deep supervision.

use rand::seq::SliceRandom;

use crate::error::{invalid, Error, Result};
use crate::gate::{apply_gate, gated_skip, AttentionGateParams, AttentionMap, GateConfig, GateVars, GridMode, Normalization, SubGateSharing};
use crate::metrics::{mean_records, seg_metrics, MetricsRecord};
use crate::nn::{self, add_conv_block, add_pixel_head, commit_stats, conv_block, pixel_head, Ctx};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{derive_seed, rng_for, ParamStore};
use crate::synth::{Augmenter, SegSample};
use crate::tape::{BnMode, Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Weight of the mean auxiliary Dice loss relative to the finest-scale loss.
pub const AUX_WEIGHT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    /// Number of scales including the bottleneck.
    pub depth: usize,
    pub base_filters: usize,
    /// Classes including background.
    pub n_classes: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Whether skip connections carry attention gates.
    pub gated: bool,
    pub normalization: Normalization,
    pub grid: GridMode,
    pub sub_gates: usize,
    pub sharing: SubGateSharing,
    pub deep_supervision: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 4,
            base_filters: 8,
            n_classes: 3,
            in_channels: 1,
            height: 32,
            width: 32,
            gated: true,
            normalization: Normalization::Sigmoid,
            grid: GridMode::UpToX,
            sub_gates: 1,
            sharing: SubGateSharing::Shared,
            deep_supervision: true,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.base_filters == 0 || self.n_classes < 2 || self.in_channels == 0 || self.sub_gates == 0 {
            return Err(invalid("unet", "need depth ≥ 2, filters ≥ 1, classes ≥ 2, channels ≥ 1, sub-gates ≥ 1"));
        }
        let f = 1 << (self.depth - 1);
        if self.height == 0 || self.width == 0 || self.height % f != 0 || self.width % f != 0 {
            return Err(invalid(
                "unet",
                format!("input {}x{} not divisible by 2^(depth-1) = {f}", self.height, self.width),
            ));
        }
        Ok(())
    }

    /// Feature channels at scale `s` (0 = finest).
    pub fn filters(&self, s: usize) -> usize {
        self.base_filters << s
    }

    pub fn gate_config(&self, s: usize) -> GateConfig {
        let f_l = self.filters(s);
        GateConfig {
            f_l,
            f_g: self.filters(s + 1),
            f_int: (f_l / 2).max(1),
            sub_gates: self.sub_gates,
            normalization: self.normalization,
            grid: self.grid,
            sharing: self.sharing,
        }
    }

    /// Scales (by index) that carry an auxiliary deep-supervision head.
    pub fn aux_scales(&self) -> Vec<usize> {
        if self.deep_supervision {
            (1..self.depth - 1).collect()
        } else {
            Vec::new()
        }
    }
}

/// How gate coefficients are produced in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateOverride {
    Learned,
    /// Every coefficient forced to the given value.
    Constant(f64),
}

pub struct SegForward {
    /// Finest-scale logits `(N, N_c, H, W)`.
    pub logits: Var,
    /// Auxiliary logits with their scale index.
    pub aux: Vec<(usize, Var)>,
    pub maps: Vec<AttentionMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub params: ParamStore,
}

fn enc(s: usize, i: usize) -> String {
    format!("enc{s}.{i}")
}

fn dec(s: usize, i: usize) -> String {
    format!("dec{s}.{i}")
}

pub fn gate_prefix(s: usize) -> String {
    format!("gate{s}")
}

impl UNet {
    /// Every parameter is drawn from a stream keyed by `(seed, name)`, so a gated
    /// and an ungated network built with one seed share all non-gate weights.
    pub fn build(cfg: UNetConfig, seed: u64) -> Result<UNet> {
        cfg.validate()?;
        let mut p = ParamStore::new();
        let mut c_in = cfg.in_channels;
        for s in 0..cfg.depth {
            let f = cfg.filters(s);
            add_conv_block(&mut p, seed, &enc(s, 0), c_in, f);
            add_conv_block(&mut p, seed, &enc(s, 1), f, f);
            c_in = f;
        }
        for s in (0..cfg.depth - 1).rev() {
            let f = cfg.filters(s);
            if cfg.gated {
                let gc = cfg.gate_config(s);
                let prefix = gate_prefix(s);
                AttentionGateParams::init_passthrough(gc, derive_seed(seed, &prefix))?.register(&mut p, &prefix);
            }
            let skip = if cfg.gated { f * cfg.sub_gates } else { f };
            add_conv_block(&mut p, seed, &dec(s, 0), skip + cfg.filters(s + 1), f);
            add_conv_block(&mut p, seed, &dec(s, 1), f, f);
        }
        add_pixel_head(&mut p, seed, "head", cfg.filters(0), cfg.n_classes);
        for s in cfg.aux_scales() {
            add_pixel_head(&mut p, seed, &format!("aux{s}"), cfg.filters(s), cfg.n_classes);
        }
        Ok(UNet { cfg, params: p })
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &mut Ctx, x: Var, gates: GateOverride) -> Result<SegForward> {
        let cfg = &self.cfg;
        let xs = tape.shape(x);
        if (xs.c, xs.h, xs.w) != (cfg.in_channels, cfg.height, cfg.width) {
            return Err(Error::ShapeMismatch {
                op: "unet.forward",
                left: Shape::new(xs.n, cfg.in_channels, cfg.height, cfg.width),
                right: xs,
            });
        }
        let mut feats = Vec::with_capacity(cfg.depth);
        let mut h = x;
        for s in 0..cfg.depth {
            if s > 0 {
                h = tape.max_pool2d(h, 2, 2)?;
            }
            h = conv_block(tape, ctx, &enc(s, 0), h)?;
            h = conv_block(tape, ctx, &enc(s, 1), h)?;
            feats.push(h);
        }
        let mut d = feats[cfg.depth - 1];
        let mut maps = Vec::new();
        let mut aux = Vec::new();
        for s in (0..cfg.depth - 1).rev() {
            let skip = feats[s];
            let ss = tape.shape(skip);
            let skip = if cfg.gated {
                match gates {
                    GateOverride::Learned => {
                        let gv = GateVars::bind_with(ctx, tape, &gate_prefix(s), cfg.gate_config(s))?;
                        let (gated, map) = gated_skip(tape, skip, d, &gv, s)?;
                        maps.push(map);
                        gated
                    }
                    GateOverride::Constant(v) => {
                        let alpha = tape.constant(Tensor::full(Shape::new(ss.n, cfg.sub_gates, ss.h, ss.w), v));
                        maps.push(AttentionMap { alpha, scale: s });
                        apply_gate(tape, skip, alpha)?
                    }
                }
            } else {
                skip
            };
            let up = tape.upsample_bilinear(d, ss.h, ss.w)?;
            let cat = tape.channel_concat(&[skip, up])?;
            d = conv_block(tape, ctx, &dec(s, 0), cat)?;
            d = conv_block(tape, ctx, &dec(s, 1), d)?;
            if s > 0 && cfg.aux_scales().contains(&s) {
                aux.push((s, pixel_head(tape, ctx, &format!("aux{s}"), d)?));
            }
        }
        let logits = pixel_head(tape, ctx, "head", d)?;
        maps.reverse();
        aux.reverse();
        Ok(SegForward { logits, aux, maps })
    }

    /// Eval-mode class probabilities `(N, N_c, H, W)` and per-gate maps (finest first).
    pub fn predict(&self, images: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&self.params, BnMode::Eval);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &mut ctx, x, GateOverride::Learned)?;
        let probs = nn::class_probs(&mut tape, out.logits)?;
        let maps = out.maps.iter().map(|m| tape.value(m.alpha).clone()).collect();
        Ok((tape.value(probs).clone(), maps))
    }
}

/// `(N, N_c, H, W)` one-hot encoding of row-major label maps.
pub fn one_hot(masks: &[&[usize]], n_classes: usize, h: usize, w: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(Shape::new(masks.len(), n_classes, h, w));
    for (n, m) in masks.iter().enumerate() {
        if m.len() != h * w {
            return Err(invalid("one_hot", format!("mask has {} labels, expected {}", m.len(), h * w)));
        }
        for (i, &l) in m.iter().enumerate() {
            if l >= n_classes {
                return Err(invalid("one_hot", format!("label {l} ≥ {n_classes}")));
            }
            *t.at_mut(n, l, i / w, i % w) = 1.0;
        }
    }
    Ok(t)
}

/// Label map downsampled by `factor` with a majority vote per window; ties go
/// to the smallest label.
pub fn majority_downsample(mask: &[usize], h: usize, w: usize, factor: usize, n_classes: usize) -> Vec<usize> {
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Vec::with_capacity(oh * ow);
    let mut counts = vec![0usize; n_classes];
    for y in 0..oh {
        for x in 0..ow {
            counts.fill(0);
            for dy in 0..factor {
                for dx in 0..factor {
                    counts[mask[(y * factor + dy) * w + x * factor + dx]] += 1;
                }
            }
            let mut best = 0;
            for (c, &k) in counts.iter().enumerate() {
                if k > counts[best] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Dice loss at the finest scale plus [`AUX_WEIGHT`] times the mean auxiliary
/// Dice loss against majority-downsampled targets.
pub fn seg_loss(tape: &mut Tape, cfg: &UNetConfig, out: &SegForward, masks: &[&[usize]]) -> Result<Var> {
    let (h, w) = (cfg.height, cfg.width);
    let probs = nn::class_probs(tape, out.logits)?;
    let target = one_hot(masks, cfg.n_classes, h, w)?;
    let main = tape.dice_loss(probs, &target)?;
    if out.aux.is_empty() {
        return Ok(main);
    }
    let mut terms = Vec::with_capacity(out.aux.len());
    for &(s, logits) in &out.aux {
        let f = 1 << s;
        let small: Vec<Vec<usize>> = masks
            .iter()
            .map(|m| majority_downsample(m, h, w, f, cfg.n_classes))
            .collect();
        let refs: Vec<&[usize]> = small.iter().map(Vec::as_slice).collect();
        let t = one_hot(&refs, cfg.n_classes, h / f, w / f)?;
        let p = nn::class_probs(tape, logits)?;
        terms.push(tape.dice_loss(p, &t)?);
    }
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = tape.add(sum, t)?;
    }
    let aux = tape.scale(sum, AUX_WEIGHT / terms.len() as f64);
    tape.add(main, aux)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub augment: bool,
    pub spacing_mm: f64,
    /// Learning-rate multiplier for attention-gate parameters.
    pub gate_lr_scale: f64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            epochs: 10,
            batch_size: 8,
            lr: 1e-4,
            seed: 0,
            augment: false,
            spacing_mm: 1.0,
            gate_lr_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean per-image metrics on the validation set.
    pub val: Option<MetricsRecord>,
}

fn batch_tensor(samples: &[&SegSample]) -> Result<Tensor> {
    let imgs: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    Tensor::stack(&imgs)
}

/// One optimizer step on a batch; returns the batch loss.
pub fn seg_step(net: &mut UNet, opt: &mut Optimizer, batch: &[&SegSample], gate_lr_scale: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(batch_tensor(batch)?);
    let mut ctx = Ctx::new(&net.params, BnMode::Train);
    let out = net.forward(&mut tape, &mut ctx, x, GateOverride::Learned)?;
    let masks: Vec<&[usize]> = batch.iter().map(|s| s.mask.as_slice()).collect();
    let loss = seg_loss(&mut tape, &net.cfg, &out, &masks)?;
    let value = tape.value(loss).data()[0];
    let stats = ctx.into_stats();
    let grads = tape.backward(loss)?;
    let grads: Vec<(String, Tensor)> = grads.params(&tape).map(|(n, g)| (n.to_string(), g)).collect();
    if value.is_finite() {
        let scale = |name: &str| if name.starts_with("gate") { gate_lr_scale } else { 1.0 };
        opt.step_scaled(&mut net.params, grads.iter().map(|(n, g)| (n.as_str(), g.clone())), scale)?;
        commit_stats(&mut net.params, &stats)?;
    }
    Ok(value)
}

/// Predicted label maps (eval mode) for `samples`, in chunks of `chunk`.
pub fn predict_labels(net: &UNet, samples: &[SegSample], chunk: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk.max(1)) {
        let refs: Vec<&SegSample> = part.iter().collect();
        let (probs, _) = net.predict(&batch_tensor(&refs)?)?;
        let s = probs.shape();
        for n in 0..s.n {
            out.push(
                (0..s.plane())
                    .map(|i| nn::argmax((0..s.c).map(|c| probs.plane(n, c)[i])))
                    .collect(),
            );
        }
    }
    Ok(out)
}

pub fn evaluate_seg(net: &UNet, samples: &[SegSample], spacing_mm: f64) -> Result<Option<MetricsRecord>> {
    let preds = predict_labels(net, samples, 16)?;
    let (h, w) = (net.cfg.height, net.cfg.width);
    let recs: Vec<MetricsRecord> = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| seg_metrics(p, &s.mask, h, w, net.cfg.n_classes, spacing_mm))
        .collect();
    Ok(mean_records(&recs))
}

/// Adam training with shuffled mini-batches (batches smaller than 2 are
/// dropped, batch norm needs two items). `on_epoch` runs after each epoch.
pub fn train_seg(
    net: &mut UNet,
    train: &[SegSample],
    val: &[SegSample],
    cfg: &SegTrainConfig,
    mut on_epoch: impl FnMut(&UNet, &SegEpoch) -> Result<()>,
) -> Result<Vec<SegEpoch>> {
    if train.len() < 2 || cfg.epochs == 0 || cfg.batch_size < 2 {
        return Err(invalid("train_seg", "need ≥ 2 samples, ≥ 1 epoch and batch size ≥ 2"));
    }
    let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.lr);
    let mut aug = Augmenter::new(derive_seed(cfg.seed, "seg-augment"), 2);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_for(cfg.seed, &format!("seg-epoch/{epoch}")));
        let mut total = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let owned: Vec<SegSample> = if cfg.augment {
                idx.iter().map(|&i| aug.seg(&train[i])).collect()
            } else {
                idx.iter().map(|&i| train[i].clone()).collect()
            };
            let refs: Vec<&SegSample> = owned.iter().collect();
            let loss = seg_step(net, &mut opt, &refs, cfg.gate_lr_scale)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            total += loss;
            batches += 1;
        }
        let rec = SegEpoch {
            epoch,
            train_loss: total / batches.max(1) as f64,
            val: if val.is_empty() { None } else { evaluate_seg(net, val, cfg.spacing_mm)? },
        };
        on_epoch(net, &rec)?;
        history.push(rec);
    }
    Ok(history)
}
