//! Additive attention gate.
//!
//! Scores are `q_i = ψᵀ relu(W_xᵀ x_i + W_gᵀ g_i + b_xg) + b_ψ`, computed with
//! 1×1 convolutions, normalized to coefficients `α` and used to scale the
//! activation map `x`. With `m > 1` sub-gates the gated output is the channel
//! concatenation `[α_1 ⊙ x, …, α_m ⊙ x]`.

use crate::error::{invalid, Error, Result};
use crate::params::{derive_seed, he_conv, rng_for, ParamStore};
use crate::tape::{SoftmaxAxis, Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    Sigmoid,
    Softmax,
    MinShift,
}

impl Normalization {
    pub fn sums_to_one(self) -> bool {
        !matches!(self, Normalization::Sigmoid)
    }
}

/// Where the compatibility score is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridMode {
    /// Upsample the gating signal to `x`'s grid, score there.
    UpToX,
    /// Window-average `x` down to the gating grid, score there, then bring the
    /// coefficients back up to `x`'s grid.
    DownToG,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubGateSharing {
    /// Sub-gates share `W_x`, `W_g`, `b_xg` and differ in their `ψ` column and `b_ψ`.
    Shared,
    /// Every sub-gate owns a full `F_int`-wide set of transforms.
    Separate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateConfig {
    pub f_l: usize,
    pub f_g: usize,
    pub f_int: usize,
    pub sub_gates: usize,
    pub normalization: Normalization,
    pub grid: GridMode,
    pub sharing: SubGateSharing,
}

impl GateConfig {
    pub fn new(f_l: usize, f_g: usize, f_int: usize, normalization: Normalization) -> Self {
        GateConfig {
            f_l,
            f_g,
            f_int,
            sub_gates: 1,
            normalization,
            grid: GridMode::UpToX,
            sharing: SubGateSharing::Shared,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.f_l == 0 || self.f_g == 0 || self.f_int == 0 || self.sub_gates == 0 {
            return Err(invalid("attention_gate", "channel counts and sub-gate count must be ≥ 1"));
        }
        Ok(())
    }

    /// Width of the hidden `relu(W_x x + W_g g + b)` layer.
    fn hidden(&self) -> usize {
        match self.sharing {
            SubGateSharing::Shared => self.f_int,
            SubGateSharing::Separate => self.f_int * self.sub_gates,
        }
    }

    /// Output channels after gating.
    pub fn out_channels(&self) -> usize {
        self.f_l * self.sub_gates
    }
}

/// The gate parameter set `{W_x, W_g, b_xg, ψ, b_ψ}` plus its configuration.
///
/// Shapes (as convolution kernels): `w_x` is `(hidden, F_l, 1, 1)`, `w_g` is
/// `(hidden, F_g, 1, 1)`, `b_xg` is `(1, hidden, 1, 1)`, `psi` is
/// `(m, F_int, 1, 1)` and `b_psi` is `(1, m, 1, 1)`, where `hidden` is `F_int`
/// for shared sub-gates and `m·F_int` for separate ones. Separate sub-gates keep
/// their `ψ` vectors back to back in a single `(1, m·F_int, 1, 1)` row.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGateParams {
    pub cfg: GateConfig,
    pub w_x: Tensor,
    pub w_g: Tensor,
    pub b_xg: Tensor,
    pub psi: Tensor,
    pub b_psi: Tensor,
}

/// Passthrough bias: `sigmoid(4) ≈ 0.982`.
pub const PASSTHROUGH_BIAS: f64 = 4.0;

const NAMES: [&str; 5] = ["w_x", "w_g", "b_xg", "psi", "b_psi"];

impl AttentionGateParams {
    pub fn zeros(cfg: GateConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden();
        Ok(AttentionGateParams {
            cfg,
            w_x: Tensor::zeros(Shape::new(h, cfg.f_l, 1, 1)),
            w_g: Tensor::zeros(Shape::new(h, cfg.f_g, 1, 1)),
            b_xg: Tensor::zeros(Shape::new(1, h, 1, 1)),
            psi: Tensor::zeros(match cfg.sharing {
                SubGateSharing::Shared => Shape::new(cfg.sub_gates, cfg.f_int, 1, 1),
                SubGateSharing::Separate => Shape::new(1, h, 1, 1),
            }),
            b_psi: Tensor::zeros(Shape::new(1, cfg.sub_gates, 1, 1)),
        })
    }

    /// Initialization at which the gate passes features through everywhere.
    ///
    /// `W_x`, `W_g` are He-normal, `b_xg = 0`, `ψ = 0`. In sigmoid mode
    /// `b_ψ = 4`, so `α = sigmoid(4)` at every pixel; in the sum-to-one modes
    /// `b_ψ = 0` and the constant scores give the exactly uniform map.
    pub fn init_passthrough(cfg: GateConfig, seed: u64) -> Result<Self> {
        let mut p = AttentionGateParams::zeros(cfg)?;
        let h = cfg.hidden();
        p.w_x = he_conv(seed, "gate.w_x", h, cfg.f_l, 1);
        p.w_g = he_conv(seed, "gate.w_g", h, cfg.f_g, 1);
        if cfg.normalization == Normalization::Sigmoid {
            p.b_psi = Tensor::full(p.b_psi.shape(), PASSTHROUGH_BIAS);
        }
        Ok(p)
    }

    /// Start for trainable min-shift gates. A spatially constant score hits the
    /// uniform fallback, whose gradient is zero, so `ψ = 0` would never move;
    /// here `ψ` is drawn with standard deviation `1/sqrt(F_int)`.
    pub fn init_min_shift(cfg: GateConfig, seed: u64) -> Result<Self> {
        let mut p = AttentionGateParams::init_passthrough(cfg, seed)?;
        let std = 1.0 / (cfg.f_int as f64).sqrt();
        p.psi = Tensor::normal(p.psi.shape(), std, &mut rng_for(seed, "gate.psi"));
        Ok(p)
    }

    /// Random parameters for testing (every entry non-zero).
    pub fn random(cfg: GateConfig, seed: u64) -> Result<Self> {
        let mut p = AttentionGateParams::zeros(cfg)?;
        let mut rng = rng_for(derive_seed(seed, "gate.random"), "gate");
        for t in [&mut p.w_x, &mut p.w_g, &mut p.b_xg, &mut p.psi, &mut p.b_psi] {
            *t = Tensor::uniform(t.shape(), -1.0, 1.0, &mut rng);
        }
        Ok(p)
    }

    fn tensors(&self) -> [&Tensor; 5] {
        [&self.w_x, &self.w_g, &self.b_xg, &self.psi, &self.b_psi]
    }

    /// Inserts the tensors into `store` as `{prefix}.w_x`, `{prefix}.w_g`, ….
    pub fn register(&self, store: &mut ParamStore, prefix: &str) {
        for (name, t) in NAMES.iter().zip(self.tensors()) {
            store.trainable(format!("{prefix}.{name}"), t.clone());
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str, cfg: GateConfig) -> Result<Self> {
        let reference = AttentionGateParams::zeros(cfg)?;
        let mut out = reference.clone();
        let slots = [&mut out.w_x, &mut out.w_g, &mut out.b_xg, &mut out.psi, &mut out.b_psi];
        for ((name, slot), want) in NAMES.iter().zip(slots).zip(reference.tensors()) {
            let key = format!("{prefix}.{name}");
            let t = store.get(&key)?;
            if t.shape() != want.shape() {
                return Err(Error::ParameterShape {
                    name: key,
                    expected: want.shape(),
                    actual: t.shape(),
                });
            }
            *slot = t.clone();
        }
        Ok(out)
    }

    /// Binds the parameters as named tape leaves (`{prefix}.w_x`, …).
    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> GateVars {
        let [w_x, w_g, b_xg, psi, b_psi] = self.tensors();
        GateVars {
            cfg: self.cfg,
            w_x: tape.param(&format!("{prefix}.w_x"), w_x),
            w_g: tape.param(&format!("{prefix}.w_g"), w_g),
            b_xg: tape.param(&format!("{prefix}.b_xg"), b_xg),
            psi: tape.param(&format!("{prefix}.psi"), psi),
            b_psi: tape.param(&format!("{prefix}.b_psi"), b_psi),
        }
    }
}

/// Gate parameters bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub cfg: GateConfig,
    pub w_x: Var,
    pub w_g: Var,
    pub b_xg: Var,
    pub psi: Var,
    pub b_psi: Var,
}

impl GateVars {
    /// Binds the gate stored under `prefix` in `store`.
    pub fn bind(store: &ParamStore, tape: &mut Tape, prefix: &str, cfg: GateConfig) -> Result<GateVars> {
        let names = NAMES.map(|n| format!("{prefix}.{n}"));
        Ok(GateVars {
            cfg,
            w_x: store.bind(tape, &names[0])?,
            w_g: store.bind(tape, &names[1])?,
            b_xg: store.bind(tape, &names[2])?,
            psi: store.bind(tape, &names[3])?,
            b_psi: store.bind(tape, &names[4])?,
        })
    }

    /// Binds a gate through a forward context (respecting frozen parameters).
    pub fn bind_with(ctx: &crate::nn::Ctx, tape: &mut Tape, prefix: &str, cfg: GateConfig) -> Result<GateVars> {
        Ok(GateVars {
            cfg,
            w_x: ctx.bind(tape, &format!("{prefix}.w_x"))?,
            w_g: ctx.bind(tape, &format!("{prefix}.w_g"))?,
            b_xg: ctx.bind(tape, &format!("{prefix}.b_xg"))?,
            psi: ctx.bind(tape, &format!("{prefix}.psi"))?,
            b_psi: ctx.bind(tape, &format!("{prefix}.b_psi"))?,
        })
    }
}

/// Attention coefficients with one channel per sub-gate, on `x`'s grid.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMap {
    pub alpha: Var,
    /// Index of the scale (skip connection or classifier stage) the map gates.
    pub scale: usize,
}

fn same_grid(a: Shape, b: Shape) -> bool {
    a.n == b.n && a.h == b.h && a.w == b.w
}

/// Raw scores `ψᵀ relu(W_xᵀ x + W_gᵀ g + b_xg) + b_ψ`, one channel per sub-gate.
/// `x` and `g` must already share a spatial grid.
pub fn compatibility(tape: &mut Tape, x: Var, g: Var, p: &GateVars) -> Result<Var> {
    let (xs, gs) = (tape.shape(x), tape.shape(g));
    if !same_grid(xs, gs) {
        return Err(Error::ShapeMismatch {
            op: "compatibility",
            left: xs,
            right: gs,
        });
    }
    let tx = tape.conv2d(x, p.w_x, Some(p.b_xg), 1, 0)?;
    let tg = tape.conv2d(g, p.w_g, None, 1, 0)?;
    let sum = tape.add(tx, tg)?;
    let hidden = tape.relu(sum);
    match p.cfg.sharing {
        SubGateSharing::Shared => tape.conv2d(hidden, p.psi, Some(p.b_psi), 1, 0),
        SubGateSharing::Separate => {
            let m = p.cfg.sub_gates;
            let f = p.cfg.f_int;
            let mut scores = Vec::with_capacity(m);
            for k in 0..m {
                let block = tape.slice_channels(hidden, k * f, f)?;
                let psi_k = tape.slice_channels(p.psi, k * f, f)?;
                let b_k = tape.slice_channels(p.b_psi, k, 1)?;
                scores.push(tape.conv2d(block, psi_k, Some(b_k), 1, 0)?);
            }
            tape.channel_concat(&scores)
        }
    }
}

/// Applies the normalization `σ_2` per channel per batch item over the spatial axes.
pub fn normalize(tape: &mut Tape, q: Var, mode: Normalization) -> Result<Var> {
    match mode {
        Normalization::Sigmoid => Ok(tape.sigmoid(q)),
        Normalization::Softmax => tape.softmax(q, SoftmaxAxis::Spatial),
        Normalization::MinShift => tape.min_shift(q),
    }
}

/// `α ⊙ x` for a single sub-gate, `[α_1 ⊙ x, …, α_m ⊙ x]` for `m > 1`.
pub fn apply_gate(tape: &mut Tape, x: Var, alpha: Var) -> Result<Var> {
    let (xs, s) = (tape.shape(x), tape.shape(alpha));
    if !same_grid(xs, s) {
        return Err(Error::ShapeMismatch {
            op: "apply_gate",
            left: xs,
            right: s,
        });
    }
    if s.c == 1 {
        tape.mul(x, alpha)
    } else {
        apply_sub_gates(tape, x, alpha)
    }
}

/// The general multi-dimensional path: slice each sub-gate, scale, concatenate.
pub fn apply_sub_gates(tape: &mut Tape, x: Var, alpha: Var) -> Result<Var> {
    let m = tape.shape(alpha).c;
    let mut parts = Vec::with_capacity(m);
    for k in 0..m {
        let a = tape.slice_channels(alpha, k, 1)?;
        parts.push(tape.mul(x, a)?);
    }
    tape.channel_concat(&parts)
}

/// Brings `a` to the `(h, w)` grid: bilinear when growing, integer-ratio window
/// averaging when shrinking, identity when equal.
pub fn resample_to_grid(tape: &mut Tape, a: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(a);
    if h == 0 || w == 0 {
        return Err(invalid("resample_to_grid", "target extents must be ≥ 1"));
    }
    if (s.h, s.w) == (h, w) {
        return Ok(a);
    }
    if h >= s.h && w >= s.w {
        return tape.upsample_bilinear(a, h, w);
    }
    if h <= s.h && w <= s.w && s.h % h == 0 && s.w % w == 0 {
        return tape.avg_pool2d(a, s.h / h, s.w / w);
    }
    Err(invalid(
        "resample_to_grid",
        format!("cannot resample {}x{} to {h}x{w}: downsampling needs integer ratios", s.h, s.w),
    ))
}

/// The full gate: resample, score, normalize, apply. Returns the gated features
/// and the coefficient map on `x`'s grid.
pub fn gated_skip(tape: &mut Tape, x: Var, g: Var, p: &GateVars, scale: usize) -> Result<(Var, AttentionMap)> {
    let (xs, gs) = (tape.shape(x), tape.shape(g));
    if gs.h > xs.h || gs.w > xs.w {
        return Err(invalid(
            "gated_skip",
            format!("gating grid {}x{} finer than features {}x{}", gs.h, gs.w, xs.h, xs.w),
        ));
    }
    let alpha = match p.cfg.grid {
        GridMode::UpToX => {
            let g_up = resample_to_grid(tape, g, xs.h, xs.w)?;
            let q = compatibility(tape, x, g_up, p)?;
            normalize(tape, q, p.cfg.normalization)?
        }
        GridMode::DownToG => {
            let x_down = resample_to_grid(tape, x, gs.h, gs.w)?;
            let q = compatibility(tape, x_down, g, p)?;
            if p.cfg.normalization.sums_to_one() {
                // resample scores, then normalize, so the map still sums to one
                let q_up = resample_to_grid(tape, q, xs.h, xs.w)?;
                normalize(tape, q_up, p.cfg.normalization)?
            } else {
                let a = normalize(tape, q, p.cfg.normalization)?;
                resample_to_grid(tape, a, xs.h, xs.w)?
            }
        }
    };
    let gated = apply_gate(tape, x, alpha)?;
    Ok((gated, AttentionMap { alpha, scale }))
}
