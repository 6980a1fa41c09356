//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default; unknown
//! or repeated keys are rejected with the offending line number.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use agkit::classifier::{Aggregation, ClassifierConfig, ClsTrainConfig};
use agkit::gate::{GridMode, Normalization, SubGateSharing};
use agkit::synth::{ClsParams, SegParams};
use agkit::unet::{SegTrainConfig, UNetConfig};
use agkit::wsl::LocalizeConfig;
use agkit::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Seg,
    Cls,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Model {
    Gated,
    Baseline,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub model: Model,
    pub seed: u64,
    pub out: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub augment: bool,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    // segmentation data and model
    pub contrast: f64,
    pub classes: usize,
    pub depth: usize,
    pub base_filters: usize,
    pub deep_supervision: bool,
    pub spacing_mm: f64,
    pub gate_lr_scale: f64,
    // classification data and model
    pub n_fg: usize,
    pub background_ratio: f64,
    pub base_width: usize,
    pub convs_per_stage: usize,
    pub aggregation: Aggregation,
    pub momentum: f64,
    pub warm_lr: f64,
    pub warm_epochs: usize,
    pub finetune_epochs: usize,
    // gates
    pub normalization: Normalization,
    pub grid: GridMode,
    pub sub_gates: usize,
    pub sharing: SubGateSharing,
    // localization and export
    pub tau: f64,
    pub blur: f64,
    pub export_count: usize,
}

impl RunConfig {
    /// Defaults for `task`; keys left out of a config file take these values.
    pub fn defaults(task: Task) -> Self {
        let seg = task == Task::Seg;
        RunConfig {
            task,
            model: Model::Gated,
            seed: 0,
            out: PathBuf::from("runs"),
            epochs: if seg { 25 } else { 10 },
            batch_size: if seg { 8 } else { 32 },
            lr: if seg { 1e-3 } else { 0.1 },
            augment: seg,
            n_train: if seg { 200 } else { 2000 },
            n_val: if seg { 50 } else { 500 },
            n_test: if seg { 50 } else { 500 },
            height: 32,
            width: 32,
            contrast: 0.25,
            classes: 3,
            depth: 3,
            base_filters: 8,
            deep_supervision: true,
            spacing_mm: 1.0,
            gate_lr_scale: if seg { 10.0 } else { 1.0 },
            n_fg: 4,
            background_ratio: 0.8,
            base_width: 4,
            convs_per_stage: 2,
            aggregation: Aggregation::ConcatFc,
            momentum: 0.9,
            warm_lr: 0.01,
            warm_epochs: 2,
            finetune_epochs: 2,
            normalization: if seg { Normalization::Sigmoid } else { Normalization::MinShift },
            grid: GridMode::UpToX,
            sub_gates: 1,
            sharing: SubGateSharing::Shared,
            tau: LocalizeConfig::default().tau,
            blur: LocalizeConfig::default().blur,
            export_count: 4,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(Error::Config {
                    line,
                    msg: "empty key or value".into(),
                });
            }
            if let Some((first, _)) = entries.insert(k.to_string(), (line, v.to_string())) {
                return Err(Error::Config {
                    line,
                    msg: format!("key `{k}` repeated (first set on line {first})"),
                });
            }
        }
        let mut r = Reader { entries };
        let task = match r.take("task")? {
            Some((_, v)) if v == "cls" => Task::Cls,
            Some((_, v)) if v == "seg" => Task::Seg,
            Some((line, v)) => {
                return Err(Error::Config {
                    line,
                    msg: format!("task must be `seg` or `cls`, got `{v}`"),
                })
            }
            None => Task::Seg,
        };
        let mut c = RunConfig::defaults(task);
        if let Some((line, v)) = r.take("model")? {
            c.model = match v.as_str() {
                "gated" => Model::Gated,
                "baseline" => Model::Baseline,
                _ => {
                    return Err(Error::Config {
                        line,
                        msg: format!("model must be `gated` or `baseline`, got `{v}`"),
                    })
                }
            };
        }
        r.set("seed", &mut c.seed)?;
        if let Some((_, v)) = r.take("out")? {
            c.out = PathBuf::from(v);
        }
        r.set("epochs", &mut c.epochs)?;
        r.set("batch_size", &mut c.batch_size)?;
        r.set("lr", &mut c.lr)?;
        r.set("augment", &mut c.augment)?;
        r.set("n_train", &mut c.n_train)?;
        r.set("n_val", &mut c.n_val)?;
        r.set("n_test", &mut c.n_test)?;
        r.set("height", &mut c.height)?;
        r.set("width", &mut c.width)?;
        r.set("contrast", &mut c.contrast)?;
        r.set("classes", &mut c.classes)?;
        r.set("depth", &mut c.depth)?;
        r.set("base_filters", &mut c.base_filters)?;
        r.set("deep_supervision", &mut c.deep_supervision)?;
        r.set("spacing_mm", &mut c.spacing_mm)?;
        r.set("gate_lr_scale", &mut c.gate_lr_scale)?;
        r.set("n_fg", &mut c.n_fg)?;
        r.set("background_ratio", &mut c.background_ratio)?;
        r.set("base_width", &mut c.base_width)?;
        r.set("convs_per_stage", &mut c.convs_per_stage)?;
        r.set_with("aggregation", &mut c.aggregation, |s| s.parse())?;
        r.set("momentum", &mut c.momentum)?;
        r.set("warm_lr", &mut c.warm_lr)?;
        r.set("warm_epochs", &mut c.warm_epochs)?;
        r.set("finetune_epochs", &mut c.finetune_epochs)?;
        r.set_with("normalization", &mut c.normalization, parse_normalization)?;
        r.set_with("grid", &mut c.grid, parse_grid)?;
        r.set("sub_gates", &mut c.sub_gates)?;
        r.set_with("sharing", &mut c.sharing, parse_sharing)?;
        r.set("tau", &mut c.tau)?;
        r.set("blur", &mut c.blur)?;
        r.set("export_count", &mut c.export_count)?;
        if let Some((k, (line, _))) = r.entries.into_iter().min_by_key(|(_, (l, _))| *l) {
            return Err(Error::Config {
                line,
                msg: format!("unknown key `{k}`"),
            });
        }
        c.validate()?;
        Ok(c)
    }

    /// Cross-field checks that do not belong to a single line.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| {
            Err(Error::InvalidArgument {
                op: "config",
                msg: msg.to_string(),
            })
        };
        if self.epochs == 0 || self.batch_size < 2 {
            return bad("need epochs ≥ 1 and batch_size ≥ 2");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.n_train < 2 {
            return bad("need n_train ≥ 2");
        }
        if !(0.0..=1.0).contains(&self.tau) || self.blur < 0.0 {
            return bad("tau must lie in [0, 1] and blur must be ≥ 0");
        }
        Ok(())
    }

    pub fn gated(&self) -> bool {
        self.model == Model::Gated
    }

    pub fn run_id(&self) -> String {
        let task = match self.task {
            Task::Seg => "seg",
            Task::Cls => "cls",
        };
        let model = match self.model {
            Model::Gated => "gated",
            Model::Baseline => "baseline",
        };
        format!("{task}-{model}-s{}", self.seed)
    }

    pub fn seg_params(&self) -> SegParams {
        SegParams {
            h: self.height,
            w: self.width,
            contrast: self.contrast,
            classes: self.classes,
        }
    }

    pub fn cls_params(&self) -> ClsParams {
        ClsParams {
            h: self.height,
            w: self.width,
            n_fg: self.n_fg,
            background_ratio: self.background_ratio,
        }
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            depth: self.depth,
            base_filters: self.base_filters,
            n_classes: self.classes,
            in_channels: 1,
            height: self.height,
            width: self.width,
            gated: self.gated(),
            normalization: self.normalization,
            grid: self.grid,
            sub_gates: self.sub_gates,
            sharing: self.sharing,
            deep_supervision: self.deep_supervision,
        }
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            convs_per_stage: self.convs_per_stage,
            n_classes: self.n_fg + 1,
            height: self.height,
            width: self.width,
            gated: self.gated(),
            normalization: self.normalization,
            grid: self.grid,
            aggregation: self.aggregation,
            ..ClassifierConfig::with_base_width(self.base_width)
        }
    }

    pub fn seg_train(&self) -> SegTrainConfig {
        SegTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            augment: self.augment,
            spacing_mm: self.spacing_mm,
            gate_lr_scale: self.gate_lr_scale,
        }
    }

    pub fn cls_train(&self) -> ClsTrainConfig {
        ClsTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            momentum: self.momentum,
            warm_lr: self.warm_lr,
            warm_epochs: self.warm_epochs,
            lr: self.lr,
            augment: self.augment,
            finetune_epochs: self.finetune_epochs,
            ..ClsTrainConfig::default()
        }
    }

    pub fn localize(&self) -> LocalizeConfig {
        LocalizeConfig {
            tau: self.tau,
            blur: self.blur,
        }
    }
}

struct Reader {
    entries: BTreeMap<String, (usize, String)>,
}

impl Reader {
    fn take(&mut self, key: &str) -> Result<Option<(usize, String)>> {
        Ok(self.entries.remove(key))
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        self.set_with(key, slot, |s| s.parse::<T>().map_err(|e| e.to_string()))
    }

    fn set_with<T, E: Display>(&mut self, key: &str, slot: &mut T, parse: impl Fn(&str) -> std::result::Result<T, E>) -> Result<()> {
        if let Some((line, v)) = self.take(key)? {
            *slot = parse(&v).map_err(|e| Error::Config {
                line,
                msg: format!("bad value `{v}` for `{key}`: {e}"),
            })?;
        }
        Ok(())
    }
}

fn parse_normalization(s: &str) -> std::result::Result<Normalization, String> {
    match s {
        "sigmoid" => Ok(Normalization::Sigmoid),
        "softmax" => Ok(Normalization::Softmax),
        "min-shift" => Ok(Normalization::MinShift),
        _ => Err("expected sigmoid, softmax or min-shift".into()),
    }
}

fn parse_grid(s: &str) -> std::result::Result<GridMode, String> {
    match s {
        "up-to-x" => Ok(GridMode::UpToX),
        "down-to-g" => Ok(GridMode::DownToG),
        _ => Err("expected up-to-x or down-to-g".into()),
    }
}

fn parse_sharing(s: &str) -> std::result::Result<SubGateSharing, String> {
    match s {
        "shared" => Ok(SubGateSharing::Shared),
        "separate" => Ok(SubGateSharing::Separate),
        _ => Err("expected shared or separate".into()),
    }
}
