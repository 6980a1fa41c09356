//! Layer helpers shared by the networks: parameter registration and a forward
//! context that binds parameters and collects batch-norm statistics.

use indexmap::IndexMap;

use crate::error::Result;
use crate::params::{add_batch_norm, he_conv, linear_weights, ParamStore};
use crate::tape::{BnMode, RunningStats, SoftmaxAxis, Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Per-pass state: where parameters come from, the batch-norm mode, updated
/// running statistics (train mode), and which parameters are frozen.
pub struct Ctx<'a> {
    pub store: &'a ParamStore,
    pub mode: BnMode,
    stats: IndexMap<String, RunningStats>,
    frozen: Option<&'a dyn Fn(&str) -> bool>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, mode: BnMode) -> Self {
        Ctx {
            store,
            mode,
            stats: IndexMap::new(),
            frozen: None,
        }
    }

    /// Parameters for which `frozen` returns true are bound as constants.
    pub fn with_frozen(mut self, frozen: &'a dyn Fn(&str) -> bool) -> Self {
        self.frozen = Some(frozen);
        self
    }

    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        match self.frozen {
            Some(f) if f(name) => self.store.bind_frozen(tape, name),
            _ => self.store.bind(tape, name),
        }
    }

    pub fn batch_norm(&mut self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.bind(tape, &format!("{prefix}.gamma"))?;
        let beta = self.bind(tape, &format!("{prefix}.beta"))?;
        let mut stats = self.store.running_stats(prefix)?;
        let y = tape.batch_norm(x, gamma, beta, self.mode, &mut stats)?;
        if self.mode == BnMode::Train {
            self.stats.insert(prefix.to_string(), stats);
        }
        Ok(y)
    }

    /// Running statistics updated during this pass.
    pub fn into_stats(self) -> IndexMap<String, RunningStats> {
        self.stats
    }
}

pub fn commit_stats(store: &mut ParamStore, stats: &IndexMap<String, RunningStats>) -> Result<()> {
    for (prefix, s) in stats {
        store.set_running_stats(prefix, s)?;
    }
    Ok(())
}

/// 3×3 convolution without bias, batch norm, relu.
pub fn add_conv_block(store: &mut ParamStore, seed: u64, prefix: &str, c_in: usize, c_out: usize) {
    let name = format!("{prefix}.conv.w");
    store.trainable(name.clone(), he_conv(seed, &name, c_out, c_in, 3));
    add_batch_norm(store, &format!("{prefix}.bn"), c_out);
}

pub fn conv_block(tape: &mut Tape, ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let w = ctx.bind(tape, &format!("{prefix}.conv.w"))?;
    let y = tape.conv2d(x, w, None, 1, 1)?;
    let y = ctx.batch_norm(tape, &format!("{prefix}.bn"), y)?;
    Ok(tape.relu(y))
}

/// 1×1 convolution with bias (per-pixel classifier).
pub fn add_pixel_head(store: &mut ParamStore, seed: u64, prefix: &str, c_in: usize, c_out: usize) {
    let name = format!("{prefix}.w");
    store.trainable(name.clone(), he_conv(seed, &name, c_out, c_in, 1));
    store.trainable(format!("{prefix}.b"), Tensor::zeros(Shape::new(1, c_out, 1, 1)));
}

pub fn pixel_head(tape: &mut Tape, ctx: &Ctx, prefix: &str, x: Var) -> Result<Var> {
    let w = ctx.bind(tape, &format!("{prefix}.w"))?;
    let b = ctx.bind(tape, &format!("{prefix}.b"))?;
    tape.conv2d(x, w, Some(b), 1, 0)
}

/// Fully connected layer on `(N, F, 1, 1)` vectors.
pub fn add_linear(store: &mut ParamStore, seed: u64, prefix: &str, f_in: usize, f_out: usize) {
    let name = format!("{prefix}.w");
    store.trainable(name.clone(), linear_weights(seed, &name, f_in, f_out));
    store.trainable(format!("{prefix}.b"), Tensor::zeros(Shape::new(1, f_out, 1, 1)));
}

pub fn linear(tape: &mut Tape, ctx: &Ctx, prefix: &str, x: Var) -> Result<Var> {
    let w = ctx.bind(tape, &format!("{prefix}.w"))?;
    let b = ctx.bind(tape, &format!("{prefix}.b"))?;
    tape.linear(x, w, b)
}

pub fn class_probs(tape: &mut Tape, logits: Var) -> Result<Var> {
    tape.softmax(logits, SoftmaxAxis::Channel)
}

/// Index of the largest entry, first on ties.
pub fn argmax(v: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.into_iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}
