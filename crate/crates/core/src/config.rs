//! Run configuration: one TOML file with nested sections, validated field
//! by field before any compute starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, AttackKind, Prediction};
use crate::data::{load_idx, synth_blobs, Dataset};
use crate::error::{Error, Result};
use crate::eval::Setting;
use crate::nn::{ModelSpec, Profile};
use crate::training::TrainConfig;

/// Environment variable naming the root under which run directories are created.
pub const OUT_ENV: &str = "PSHIELD_OUT";
pub const DEFAULT_OUT_ROOT: &str = "pshield-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Warm-up only: CE for every epoch.
    CeOnly,
    #[default]
    Pcl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Idx,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub shape: Vec<usize>,
    pub spread: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 10,
            train_per_class: 40,
            eval_per_class: 10,
            shape: vec![1, 16, 16],
            spread: 0.25,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub eval_images: Option<PathBuf>,
    pub eval_labels: Option<PathBuf>,
    /// Deterministic subset sizes; `None` keeps everything.
    pub train_limit: Option<usize>,
    pub eval_limit: Option<usize>,
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub profile: Profile,
    /// Subset of the profile's tap indices; `None` keeps all.
    pub taps: Option<Vec<usize>>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            profile: Profile::Tiny,
            taps: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedCheckpoint {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub settings: Vec<Setting>,
    pub batch_size: usize,
    pub prediction: Prediction,
    pub source_checkpoint: Option<PathBuf>,
    pub source_epochs: usize,
    pub transfer: Vec<NamedCheckpoint>,
    pub sweep_kinds: Vec<AttackKind>,
    pub sweep_grid: Vec<f64>,
    pub probe_epsilon: f64,
    pub probe_draws: usize,
    pub probe_per_class: usize,
    /// Tap subsets for the ablation; `None` sweeps all of them.
    pub ablation_subsets: Option<Vec<Vec<usize>>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            settings: vec![Setting::White, Setting::Black],
            batch_size: 100,
            prediction: Prediction::Softmax,
            source_checkpoint: None,
            source_epochs: 2,
            transfer: Vec::new(),
            sweep_kinds: vec![AttackKind::Fgsm, AttackKind::Bim, AttackKind::Mim, AttackKind::Pgd],
            sweep_grid: vec![0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            probe_epsilon: 0.1,
            probe_draws: 200,
            probe_per_class: 5,
            ablation_subsets: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Run directory, relative to the output root unless absolute.
    pub out_dir: Option<PathBuf>,
    pub variant: Variant,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attacks: Vec<AttackConfig>,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: None,
            variant: Variant::Pcl,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            attacks: AttackKind::ALL
                .iter()
                .map(|&k| AttackConfig::new(k, 0.3))
                .collect(),
            eval: EvalConfig::default(),
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{name}: {msg}"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hash of the canonical serialization, embedded in every output header.
    pub fn hash(&self) -> String {
        crate::report::config_hash(&self.to_toml())
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        self.train
            .validate()
            .map_err(|e| field("train", e.to_string().trim_start_matches("configuration error: ")))?;
        for (i, a) in self.attacks.iter().enumerate() {
            a.validate()
                .map_err(|e| field(&format!("attacks[{i}]"), e.to_string().trim_start_matches("configuration error: ")))?;
        }
        let d = &self.data;
        match d.source {
            DataSource::Idx => {
                for (name, p) in [
                    ("data.train_images", &d.train_images),
                    ("data.train_labels", &d.train_labels),
                    ("data.eval_images", &d.eval_images),
                    ("data.eval_labels", &d.eval_labels),
                ] {
                    if p.is_none() {
                        return Err(field(name, "required when data.source = \"idx\""));
                    }
                }
            }
            DataSource::Synthetic => {
                let s = &d.synthetic;
                if s.classes < 2 {
                    return Err(field("data.synthetic.classes", "must be >= 2"));
                }
                if s.train_per_class == 0 || s.eval_per_class == 0 {
                    return Err(field("data.synthetic", "per-class counts must be >= 1"));
                }
                if s.shape.is_empty() || s.shape.contains(&0) {
                    return Err(field("data.synthetic.shape", format!("bad shape {:?}", s.shape)));
                }
                if !(s.spread >= 0.0) {
                    return Err(field("data.synthetic.spread", "must be >= 0"));
                }
            }
        }
        if d.train_limit == Some(0) || d.eval_limit == Some(0) {
            return Err(field("data", "train_limit and eval_limit must be >= 1"));
        }
        if let Some(taps) = &self.model.taps {
            if taps.windows(2).any(|w| w[1] <= w[0]) {
                return Err(field("model.taps", "must be strictly increasing"));
            }
        }
        let e = &self.eval;
        if e.batch_size == 0 {
            return Err(field("eval.batch_size", "must be >= 1"));
        }
        if e.settings.is_empty() {
            return Err(field("eval.settings", "must not be empty"));
        }
        if e.sweep_grid.first() != Some(&0.0) || e.sweep_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(field("eval.sweep_grid", "must start at 0 and increase strictly"));
        }
        if e.sweep_kinds.contains(&AttackKind::Cw) {
            return Err(field("eval.sweep_kinds", "C&W has no epsilon budget"));
        }
        if e.probe_draws < 100 {
            return Err(field("eval.probe_draws", "must be >= 100"));
        }
        if !(e.probe_epsilon >= 0.0) {
            return Err(field("eval.probe_epsilon", "must be >= 0"));
        }
        if e.probe_per_class == 0 {
            return Err(field("eval.probe_per_class", "must be >= 1"));
        }
        if e.source_epochs == 0 && e.source_checkpoint.is_none() {
            return Err(field("eval.source_epochs", "must be >= 1 without eval.source_checkpoint"));
        }
        Ok(())
    }

    /// Training configuration with the variant applied.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if self.variant == Variant::CeOnly {
            t.warmup_epochs = t.epochs;
        }
        t.seed = self.seed;
        t
    }

    /// Model spec for `input_shape` and `k` classes, with the configured tap subset.
    pub fn model_spec(&self, input_shape: &[usize], k: usize) -> Result<ModelSpec> {
        let spec = ModelSpec::cnn6(self.model.profile, input_shape, k);
        let spec = match &self.model.taps {
            None => spec,
            Some(sel) => {
                if let Some(&bad) = sel.iter().find(|&&t| t >= spec.taps.len()) {
                    return Err(field("model.taps", format!("tap {bad} does not exist ({} taps)", spec.taps.len())));
                }
                let taps = sel.iter().map(|&t| spec.taps[t].clone()).collect();
                spec.with_taps(taps)
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Loads (or synthesizes) the train and eval splits.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        let (train, eval) = match d.source {
            DataSource::Idx => {
                let need = |p: &Option<PathBuf>, name: &str| {
                    p.clone().ok_or_else(|| field(name, "required when data.source = \"idx\""))
                };
                let mut train = load_idx(&need(&d.train_images, "data.train_images")?, &need(&d.train_labels, "data.train_labels")?)?;
                let mut eval = load_idx(&need(&d.eval_images, "data.eval_images")?, &need(&d.eval_labels, "data.eval_labels")?)?;
                train.split = "train".into();
                eval.split = "eval".into();
                let k = train.num_classes.max(eval.num_classes);
                train.num_classes = k;
                eval.num_classes = k;
                (train, eval)
            }
            DataSource::Synthetic => {
                let s = &d.synthetic;
                let all = synth_blobs(s.classes, s.train_per_class + s.eval_per_class, &s.shape, s.spread, self.seed)?;
                let (mut train, mut eval) = all.split_at(s.classes * s.train_per_class)?;
                train.split = "train".into();
                eval.split = "eval".into();
                (train, eval)
            }
        };
        let cut = |ds: Dataset, n: Option<usize>, name: &str| match n {
            Some(n) if n < ds.len() => ds.subset(n, self.seed).map(|mut s| {
                s.split = name.into();
                s
            }),
            Some(n) if n > ds.len() => Err(Error::Range {
                requested: n,
                available: ds.len(),
            }),
            _ => Ok(ds),
        };
        Ok((cut(train, d.train_limit, "train")?, cut(eval, d.eval_limit, "eval")?))
    }

    /// Output directory: `--out` flag, else `out_dir` under `$PSHIELD_OUT`.
    pub fn out_dir(&self, flag: Option<&Path>, verb: &str) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        let root = std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
        match &self.out_dir {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => root.join(p),
            None => root.join(verb),
        }
    }

    /// Tiny end-to-end profile on synthetic blobs.
    pub fn repro_tiny() -> Self {
        RunConfig {
            data: DataConfig {
                source: DataSource::Synthetic,
                synthetic: SyntheticConfig {
                    train_per_class: 30,
                    shape: vec![1, 12, 12],
                    ..SyntheticConfig::default()
                },
                ..DataConfig::default()
            },
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 6,
                warmup_epochs: 2,
                batch_size: 32,
                lr: 0.02,
                decay_epochs: vec![5],
                adv_steps: 5,
                ..TrainConfig::default()
            },
            attacks: Self::attack_battery(0.3, 50),
            eval: EvalConfig {
                source_epochs: 5,
                sweep_grid: vec![0.0, 0.1, 0.2, 0.3, 0.6],
                probe_per_class: 3,
                ..EvalConfig::default()
            },
            ..RunConfig::default()
        }
    }

    /// Full-width CNN-6 on the MNIST IDX files in `dir`, 1000 eval samples. Takes hours on one core.
    pub fn repro_desk(dir: &Path) -> Self {
        RunConfig {
            data: DataConfig {
                source: DataSource::Idx,
                train_images: Some(dir.join("mnist-train-images-idx3-ubyte.gz")),
                train_labels: Some(dir.join("mnist-train-labels-idx1-ubyte.gz")),
                eval_images: Some(dir.join("mnist-eval-images-idx3-ubyte.gz")),
                eval_labels: Some(dir.join("mnist-eval-labels-idx1-ubyte.gz")),
                eval_limit: Some(1000),
                ..DataConfig::default()
            },
            model: ModelConfig {
                profile: Profile::Desk,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                lr: 0.02,
                ..TrainConfig::default()
            },
            attacks: Self::attack_battery(0.3, 1000),
            ..RunConfig::default()
        }
    }

    /// The five attacks at `epsilon`, with C&W at `c = 10` and `cw_iters` iterations.
    pub fn attack_battery(epsilon: f64, cw_iters: usize) -> Vec<AttackConfig> {
        AttackKind::ALL
            .iter()
            .map(|&k| {
                let mut a = AttackConfig::new(k, epsilon);
                if k == AttackKind::Cw {
                    a.iters = cw_iters;
                }
                a
            })
            .collect()
    }
}
