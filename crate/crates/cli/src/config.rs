//! JSON run configuration. Every field has a default; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mpsl_core::checkpoint::Checkpoint;
use mpsl_core::data::{load_idx, synthetic_blobs, BlobSpec, Dataset};
use mpsl_core::network::InitConfig;
use mpsl_core::neuron::LifConfig;
use mpsl_core::numerics::SeededRng;
use mpsl_core::plasticity::{DeltaMode, SbpParams};
use mpsl_core::trainer::{BatchMode, LambdaMode, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub timesteps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hebbian_lr_scale: f64,
    pub seed: u64,
    pub lambda_mode: LambdaModeCfg,
    /// Checkpoint supplying `λ` for frozen-learned runs.
    pub lambda_source: Option<PathBuf>,
    pub layers: Vec<usize>,
    pub lif: LifCfg,
    pub sbp: SbpCfg,
    pub init: InitCfg,
    pub delta_mode: DeltaModeCfg,
    pub batch_mode: BatchModeCfg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory holding the four standard IDX files.
    pub dir: PathBuf,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub blob_sigma: f64,
    pub data_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    #[serde(alias = "mnist", alias = "fashion-mnist")]
    Idx,
    Blobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaModeCfg {
    Fixed,
    Learnable,
    FrozenLearned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaModeCfg {
    Full,
    Increment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchModeCfg {
    Lockstep,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifCfg {
    pub v_th: f64,
    pub rho_m: f64,
    pub a: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SbpCfg {
    pub lambda_f: f64,
    pub lambda_p: f64,
    pub tau_w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitCfg {
    pub lambda: [f64; 3],
    pub eta: f64,
    pub beta: f64,
    pub plastic_scale: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            dataset: DatasetConfig::default(),
            timesteps: t.timesteps,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            hebbian_lr_scale: t.hebbian_lr_scale,
            seed: t.seed,
            lambda_mode: LambdaModeCfg::Learnable,
            lambda_source: None,
            layers: t.layers,
            lif: LifCfg::default(),
            sbp: SbpCfg::default(),
            init: InitCfg::default(),
            delta_mode: DeltaModeCfg::Full,
            batch_mode: BatchModeCfg::Lockstep,
        }
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Idx,
            dir: PathBuf::from("data/mnist"),
            train_limit: None,
            test_limit: None,
            classes: 10,
            dim: 16,
            train_per_class: 100,
            test_per_class: 50,
            blob_sigma: BlobSpec::default().sigma,
            data_seed: 7,
        }
    }
}

impl Default for LifCfg {
    fn default() -> Self {
        let l = LifConfig::default();
        Self {
            v_th: l.v_th,
            rho_m: l.rho_m,
            a: l.a,
            dt: l.dt,
        }
    }
}

impl Default for SbpCfg {
    fn default() -> Self {
        let s = SbpParams::default();
        Self {
            lambda_f: s.lambda_f,
            lambda_p: s.lambda_p,
            tau_w: s.tau_w,
        }
    }
}

impl Default for InitCfg {
    fn default() -> Self {
        let i = InitConfig::default();
        Self {
            lambda: i.lambda,
            eta: i.eta,
            beta: i.beta,
            plastic_scale: i.plastic_scale,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }

    /// Stable 64-bit digest of the canonical JSON form.
    pub fn hash(&self) -> u64 {
        let canon = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canon);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    /// Core training configuration; reads the `λ` source checkpoint when needed.
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let lambda_mode = match self.lambda_mode {
            LambdaModeCfg::Fixed => LambdaMode::Fixed,
            LambdaModeCfg::Learnable => LambdaMode::Learnable,
            LambdaModeCfg::FrozenLearned => LambdaMode::FrozenLearned,
        };
        let frozen_lambda = match (&self.lambda_source, lambda_mode) {
            (Some(p), LambdaMode::FrozenLearned) => {
                let ck = Checkpoint::load(p).map_err(|e| CliError::usage(format!("lambda_source: {e}")))?;
                Some(ck.net.layers.iter().map(|l| l.lambda).collect())
            }
            _ => None,
        };
        let cfg = TrainConfig {
            timesteps: self.timesteps,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            hebbian_lr_scale: self.hebbian_lr_scale,
            seed: self.seed,
            lambda_mode,
            frozen_lambda,
            lif: LifConfig {
                v_th: self.lif.v_th,
                rho_m: self.lif.rho_m,
                a: self.lif.a,
                dt: self.lif.dt,
            },
            sbp: SbpParams {
                lambda_f: self.sbp.lambda_f,
                lambda_p: self.sbp.lambda_p,
                tau_w: self.sbp.tau_w,
            },
            layers: self.layers.clone(),
            init: InitConfig {
                lambda: self.init.lambda,
                eta: self.init.eta,
                beta: self.init.beta,
                plastic_scale: self.init.plastic_scale,
            },
            delta_mode: match self.delta_mode {
                DeltaModeCfg::Full => DeltaMode::Full,
                DeltaModeCfg::Increment => DeltaMode::Increment,
            },
            batch_mode: match self.batch_mode {
                BatchModeCfg::Lockstep => BatchMode::Lockstep,
                BatchModeCfg::Sequential => BatchMode::Sequential,
            },
        };
        cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Training and test splits, trimmed to the configured limits.
    pub fn load_data(&self) -> Result<(Dataset, Dataset), CliError> {
        let d = &self.dataset;
        let (train, test) = match d.kind {
            DatasetKind::Idx => {
                let load = |img: &str, lab: &str| {
                    load_idx(&d.dir.join(img), &d.dir.join(lab))
                        .map_err(|e| CliError::usage(format!("dataset: {e}")))
                };
                (
                    load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?,
                    load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?,
                )
            }
            DatasetKind::Blobs => {
                let spec = BlobSpec {
                    sigma: d.blob_sigma,
                    ..BlobSpec::default()
                };
                let make = |stream, n| {
                    synthetic_blobs(&mut SeededRng::derive(d.data_seed, stream), n, d.classes, d.dim, &spec)
                        .map_err(|e| CliError::usage(format!("dataset: {e}")))
                };
                (make(0, d.train_per_class)?, make(1, d.test_per_class)?)
            }
        };
        let train = d.train_limit.map_or(train.clone(), |n| train.truncated(n));
        let test = d.test_limit.map_or(test.clone(), |n| test.truncated(n));
        if train.dim() != self.layers[0] {
            return Err(CliError::usage(format!(
                "layers[0] is {} but the dataset has {} inputs",
                self.layers[0],
                train.dim()
            )));
        }
        if train.num_classes > *self.layers.last().unwrap() {
            return Err(CliError::usage(format!(
                "output layer has {} units but the dataset has {} classes",
                self.layers.last().unwrap(),
                train.num_classes
            )));
        }
        Ok((train, test))
    }
}
