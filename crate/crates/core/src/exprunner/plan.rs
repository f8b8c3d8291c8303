//! Experiment plans: a TOML description of the grid, its datasets and the
//! per-phase optimizer settings.
//!
//! ```toml
//! name = "desk"
//! seed = 0
//! pretrain_sizes = [0, 2000]
//! intermediate = "off"          # on | off | both
//! finetune_sizes = [100, 400]
//! runs_per_cell = 3
//!
//! [model]                        # ModelConfig fields; omitted ones keep defaults
//! image_size = 32
//!
//! [datasets.pretrain]
//! source = { synthetic = 2000 }  # or { folder = "imagenet/train" }
//! kind = "unlabeled"
//!
//! [datasets.finetune]
//! source = { folder = "pets" }
//! kind = "segmentation"
//!
//! [phases.pretrain]              # any PhaseConfig field, flattened
//! epochs = 10
//! milestones = [5, 8]
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::data::{DatasetKind, DatasetSpec, Source, HOLDOUT_SEED, HOLDOUT_SIZE};
use crate::error::{Error, Result};
use crate::metrics::AccuracyMode;
use crate::optim::{Phase, PhaseConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intermediate {
    On,
    #[default]
    Off,
    Both,
}

impl Intermediate {
    pub fn flags(self) -> &'static [bool] {
        match self {
            Intermediate::On => &[true],
            Intermediate::Off => &[false],
            Intermediate::Both => &[false, true],
        }
    }
}

/// Field-wise replacement of a phase's default settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseOverride {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub mask_ratio: Option<f64>,
    pub base_lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub decay_all: Option<bool>,
    pub milestones: Option<Vec<usize>>,
    pub gamma: Option<f64>,
}

impl PhaseOverride {
    pub fn apply(&self, mut cfg: PhaseConfig) -> PhaseConfig {
        macro_rules! set {
            ($($src:ident => $($dst:ident).+;)*) => {
                $(if let Some(v) = &self.$src { cfg.$($dst).+ = v.clone(); })*
            };
        }
        set! {
            epochs => epochs;
            batch_size => batch_size;
            mask_ratio => mask_ratio;
            base_lr => optim.base_lr;
            weight_decay => optim.weight_decay;
            beta1 => optim.beta1;
            beta2 => optim.beta2;
            eps => optim.eps;
            decay_all => optim.decay_all;
            milestones => schedule.milestones;
            gamma => schedule.gamma;
        }
        cfg
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseOverrides {
    #[serde(default)]
    pub pretrain: PhaseOverride,
    #[serde(default)]
    pub intermediate: PhaseOverride,
    #[serde(default)]
    pub finetune: PhaseOverride,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Datasets {
    /// Unlabeled pool that pre-training subsets are drawn from.
    pub pretrain: Option<DatasetSpec>,
    /// Classification set for the intermediate phase, used whole.
    pub intermediate: Option<DatasetSpec>,
    /// Segmentation corpus; the holdout is split off first and fine-tuning
    /// subsets come from the remainder.
    pub finetune: DatasetSpec,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_runs() -> usize {
    3
}
fn default_true() -> bool {
    true
}
fn default_holdout_size() -> usize {
    HOLDOUT_SIZE
}
fn default_holdout_seed() -> u64 {
    HOLDOUT_SEED
}
fn default_eval_batch() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub model: ModelConfig,
    pub pretrain_sizes: Vec<usize>,
    #[serde(default)]
    pub intermediate: Intermediate,
    pub finetune_sizes: Vec<usize>,
    #[serde(default = "default_runs")]
    pub runs_per_cell: usize,
    /// Base seed every run-level seed is derived from.
    #[serde(default)]
    pub seed: u64,
    /// When false, every run index reuses the run-0 initialization and
    /// pre-training; only later phases are reseeded.
    #[serde(default = "default_true")]
    pub reseed_pretrain: bool,
    #[serde(default = "default_holdout_size")]
    pub holdout_size: usize,
    #[serde(default = "default_holdout_seed")]
    pub holdout_seed: u64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default)]
    pub accuracy_mode: AccuracyMode,
    /// Also store the fine-tuned model of every cell.
    #[serde(default)]
    pub save_finetuned: bool,
    pub datasets: Datasets,
    #[serde(default)]
    pub phases: PhaseOverrides,
}

/// One grid cell and run index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub pretrain_size: usize,
    pub intermediate: bool,
    pub finetune_size: usize,
    pub run: usize,
}

impl fmt::Display for CellKey {
    /// `pretrain/on|off/finetune/run`, e.g. `2000/off/100/0`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let it = if self.intermediate { "on" } else { "off" };
        write!(f, "{}/{it}/{}/{}", self.pretrain_size, self.finetune_size, self.run)
    }
}

impl FromStr for CellKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Plan(format!("cell `{s}` is not pretrain/on|off/finetune/run"));
        let parts: Vec<&str> = s.split('/').collect();
        let [pt, it, ft, run] = parts[..] else {
            return Err(bad());
        };
        let num = |x: &str| x.parse::<usize>().map_err(|_| bad());
        let intermediate = match it {
            "on" => true,
            "off" => false,
            _ => return Err(bad()),
        };
        Ok(CellKey {
            pretrain_size: num(pt)?,
            intermediate,
            finetune_size: num(ft)?,
            run: num(run)?,
        })
    }
}

impl ExperimentPlan {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let plan: ExperimentPlan = toml::from_str(text).map_err(|e| Error::Plan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Plan(m) => Error::Plan(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let plan_err = |m: String| Err(Error::Plan(m));
        if self.runs_per_cell == 0 {
            return plan_err("runs_per_cell must be at least 1".into());
        }
        if self.pretrain_sizes.is_empty() || self.finetune_sizes.is_empty() {
            return plan_err("pretrain_sizes and finetune_sizes must be non-empty".into());
        }
        for (name, sizes) in [
            ("pretrain_sizes", &self.pretrain_sizes),
            ("finetune_sizes", &self.finetune_sizes),
        ] {
            let mut sorted = sizes.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != sizes.len() {
                return plan_err(format!("{name} has duplicate entries"));
            }
        }
        if self.finetune_sizes.contains(&0) {
            return plan_err("finetune sizes must be positive".into());
        }
        if self.eval_batch_size == 0 {
            return plan_err("eval_batch_size must be positive".into());
        }
        let expect = |spec: &Option<DatasetSpec>, kind: DatasetKind, needed: bool, phase: &str| -> Result<()> {
            match spec {
                None if needed => Err(Error::Plan(format!("datasets.{phase} is required by this grid"))),
                Some(s) if s.kind != kind => Err(Error::Plan(format!(
                    "datasets.{phase} must be of kind {kind:?}, got {:?}",
                    s.kind
                ))),
                _ => Ok(()),
            }
        };
        expect(
            &self.datasets.pretrain,
            DatasetKind::Unlabeled,
            self.pretrain_sizes.iter().any(|&n| n > 0),
            "pretrain",
        )?;
        expect(
            &self.datasets.intermediate,
            DatasetKind::Classification,
            self.intermediate != Intermediate::Off,
            "intermediate",
        )?;
        expect(
            &Some(self.datasets.finetune.clone()),
            DatasetKind::Segmentation,
            true,
            "finetune",
        )?;
        for phase in Phase::ALL {
            self.phase_config(phase).validate()?;
        }
        Ok(())
    }

    /// Defaults for `phase` with this plan's overrides applied.
    pub fn phase_config(&self, phase: Phase) -> PhaseConfig {
        let o = match phase {
            Phase::Pretrain => &self.phases.pretrain,
            Phase::Intermediate => &self.phases.intermediate,
            Phase::Finetune => &self.phases.finetune,
        };
        o.apply(PhaseConfig::defaults(phase))
    }

    /// Every cell in execution order: pre-train size, intermediate flag,
    /// fine-tune size, run index.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &pretrain_size in &self.pretrain_sizes {
            for &intermediate in self.intermediate.flags() {
                for &finetune_size in &self.finetune_sizes {
                    for run in 0..self.runs_per_cell {
                        out.push(CellKey {
                            pretrain_size,
                            intermediate,
                            finetune_size,
                            run,
                        });
                    }
                }
            }
        }
        out
    }

    /// Joins relative folder sources onto `root`.
    pub fn resolve_paths(&mut self, root: &Path) {
        let fix = |spec: &mut DatasetSpec| {
            if let Source::Folder(p) = &mut spec.source {
                if p.is_relative() {
                    *p = root.join(&*p);
                }
            }
        };
        if let Some(s) = &mut self.datasets.pretrain {
            fix(s);
        }
        if let Some(s) = &mut self.datasets.intermediate {
            fix(s);
        }
        fix(&mut self.datasets.finetune);
    }
}

/// Dataset prefix from the `DATA_ROOT` environment variable, if set.
pub fn data_root_from_env() -> Option<PathBuf> {
    std::env::var_os("DATA_ROOT").map(PathBuf::from)
}
