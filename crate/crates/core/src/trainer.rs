//! Batch training loop, evaluation and the fusion-coefficient ablation.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{cross_entropy, infer_batch, InitConfig, Network, PathMode};
use crate::neuron::LifConfig;
use crate::numerics::{DenseMatrix, SeededRng};
use crate::optim::{grad_vector, param_vector, set_param_vector, lr_scales, Adam};
use crate::plasticity::{DeltaMode, SbpParams};
use crate::tape::{backward, record_forward, Event, GradientSet, Tape};

/// RNG stream ids derived from the run seed.
pub const INIT_STREAM: u64 = 0;
pub const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LambdaMode {
    /// `λ` stays at its initial value.
    Fixed,
    #[default]
    Learnable,
    /// `λ` copied from an earlier learnable run, then held fixed.
    FrozenLearned,
}

impl LambdaMode {
    pub fn name(self) -> &'static str {
        match self {
            LambdaMode::Fixed => "fixed",
            LambdaMode::Learnable => "learnable",
            LambdaMode::FrozenLearned => "frozen-learned",
        }
    }
}

/// How the items of one batch share the plastic weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BatchMode {
    /// All items simulated together; `W2`/`W3` take the batch-mean increment
    /// every timestep.
    #[default]
    Lockstep,
    /// Items run one after another, each seeing the plastic state left by
    /// the previous one.
    Sequential,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub timesteps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier on `lr` for `η` and `β`.
    pub hebbian_lr_scale: f64,
    pub seed: u64,
    pub lambda_mode: LambdaMode,
    /// Per-layer `λ` for [`LambdaMode::FrozenLearned`].
    pub frozen_lambda: Option<Vec<[f64; 3]>>,
    pub lif: LifConfig,
    pub sbp: SbpParams,
    pub layers: Vec<usize>,
    pub init: InitConfig,
    pub delta_mode: DeltaMode,
    pub batch_mode: BatchMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            timesteps: 8,
            epochs: 5,
            batch_size: 100,
            lr: 1e-3,
            hebbian_lr_scale: 0.01,
            seed: 0,
            lambda_mode: LambdaMode::Learnable,
            frozen_lambda: None,
            lif: LifConfig::default(),
            sbp: SbpParams::default(),
            layers: vec![784, 256, 10],
            init: InitConfig::default(),
            delta_mode: DeltaMode::Full,
            batch_mode: BatchMode::Lockstep,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.timesteps < 1 {
            return bad("timesteps must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.hebbian_lr_scale >= 0.0 && self.hebbian_lr_scale.is_finite()) {
            return bad(format!("hebbian_lr_scale must be >= 0, got {}", self.hebbian_lr_scale));
        }
        if self.layers.len() < 2 || self.layers.contains(&0) {
            return bad(format!("layers must list >= 2 positive widths, got {:?}", self.layers));
        }
        if !self.init.plastic_scale.is_finite() || !self.init.eta.is_finite() || !self.init.beta.is_finite() {
            return bad("init values must be finite".into());
        }
        self.lif.validate()?;
        self.sbp.validate()?;
        match (self.lambda_mode, &self.frozen_lambda) {
            (LambdaMode::FrozenLearned, None) => {
                bad("lambda_mode frozen-learned requires a source checkpoint".into())
            }
            (LambdaMode::FrozenLearned, Some(l)) if l.len() != self.layers.len() - 1 => bad(format!(
                "source lambda has {} layers, config has {}",
                l.len(),
                self.layers.len() - 1
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lambda: Vec<[f64; 3]>,
    pub lambda_f: f64,
    pub lambda_p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: Network,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub shuffle_rng: SeededRng,
    scales: Vec<f64>,
    events: Option<Vec<Event>>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::derive(cfg.seed, INIT_STREAM);
        let mut init = cfg.init;
        if let (LambdaMode::FrozenLearned, Some(_)) = (cfg.lambda_mode, &cfg.frozen_lambda) {
            init.lambda = [0.0; 3];
        }
        let mut net = Network::init(&cfg.layers, cfg.lif, cfg.sbp, &init, &mut rng)?;
        net.delta_mode = cfg.delta_mode;
        if let (LambdaMode::FrozenLearned, Some(src)) = (cfg.lambda_mode, &cfg.frozen_lambda) {
            for (layer, l) in net.layers.iter_mut().zip(src) {
                layer.lambda = *l;
            }
        }
        let shuffle_rng = SeededRng::derive(cfg.seed, SHUFFLE_STREAM);
        Self::from_parts(cfg, net, None, 0, shuffle_rng)
    }

    /// Reassembles a trainer from saved state.
    pub fn from_parts(
        cfg: TrainConfig,
        net: Network,
        adam: Option<Adam>,
        epoch: usize,
        shuffle_rng: SeededRng,
    ) -> Result<Self> {
        cfg.validate()?;
        if net.sizes() != cfg.layers {
            return Err(Error::shape("Trainer", format!("{:?}", cfg.layers), format!("{:?}", net.sizes())));
        }
        let len = param_vector(&net).len();
        let adam = adam.unwrap_or_else(|| Adam::new(cfg.lr, len));
        if adam.m.len() != len {
            return Err(Error::shape("Trainer optimizer", len, adam.m.len()));
        }
        let scales = lr_scales(&net, cfg.lambda_mode == LambdaMode::Learnable, cfg.hebbian_lr_scale);
        Ok(Self {
            cfg,
            net,
            adam,
            epoch,
            shuffle_rng,
            scales,
            events: None,
        })
    }

    /// Starts collecting the scheduling event log.
    pub fn record_events(&mut self) {
        self.events = Some(Vec::new());
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        self.events.take().unwrap_or_default()
    }

    fn commit(&mut self, tape: &Tape) {
        for (l, layer) in self.net.layers.iter_mut().enumerate() {
            let (w2, w3, dw2) = tape.plastic_state(l);
            layer.w2 = w2.clone();
            layer.w3 = w3.clone();
            layer.dw2_last = dw2.clone();
        }
        if let Some(ev) = &mut self.events {
            ev.extend_from_slice(tape.events());
        }
    }

    /// One forward window, backward pass and optimizer step. Returns the
    /// batch-mean loss and the number of correct predictions.
    pub fn train_batch(&mut self, x: &DenseMatrix, labels: &[usize], batch_index: usize) -> Result<(f64, usize)> {
        let t = self.cfg.timesteps;
        let (loss, correct, grads) = match self.cfg.batch_mode {
            BatchMode::Lockstep => {
                let tape = record_forward(&self.net, x, labels, t)?;
                let g = backward(&tape, 1.0);
                self.commit(&tape);
                let correct = count_correct(&tape.predictions(), labels);
                (tape.loss(), correct, g)
            }
            BatchMode::Sequential => {
                let b = labels.len();
                let mut g = GradientSet::zeros(&self.net.sizes());
                let (mut loss, mut correct) = (0.0, 0);
                for i in 0..b {
                    let xi = DenseMatrix::from_vec(1, x.cols(), x.row(i).to_vec())?;
                    let tape = record_forward(&self.net, &xi, &labels[i..=i], t)?;
                    g.add_scaled(1.0 / b as f64, &backward(&tape, 1.0));
                    self.commit(&tape);
                    loss += tape.loss() / b as f64;
                    correct += count_correct(&tape.predictions(), &labels[i..=i]);
                }
                (loss, correct, g)
            }
        };
        if !loss.is_finite() || !grads.is_finite() || !self.net.is_finite() {
            return Err(Error::NonFinite {
                batch: batch_index,
                detail: format!("loss {loss}; {}", param_norms(&self.net)),
            });
        }
        let mut p = param_vector(&self.net);
        self.adam.update(&mut p, &grad_vector(&grads), &self.scales)?;
        set_param_vector(&mut self.net, &p)?;
        self.net.sbp.project();
        if let Some(ev) = &mut self.events {
            ev.push(Event::GradientStep);
        }
        Ok((loss, correct))
    }

    /// One pass over `data` in a freshly shuffled order.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        if data.dim() != self.net.input_dim() {
            return Err(Error::shape("train_epoch", self.net.input_dim(), data.dim()));
        }
        if data.num_classes > self.net.num_classes() {
            return Err(Error::shape("train_epoch classes", self.net.num_classes(), data.num_classes));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        self.shuffle_rng.shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (bi, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let (x, y) = data.batch(chunk);
            let (loss, c) = self.train_batch(&x, &y, bi)?;
            loss_sum += loss * chunk.len() as f64;
            correct += c;
        }
        self.epoch += 1;
        let n = data.len().max(1) as f64;
        Ok(EpochMetrics {
            epoch: self.epoch,
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
            lambda: self.net.layers.iter().map(|l| l.lambda).collect(),
            lambda_f: self.net.sbp.lambda_f,
            lambda_p: self.net.sbp.lambda_p,
        })
    }
}

fn count_correct(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count()
}

/// Frobenius norms of every parameter, for diagnostics.
pub fn param_norms(net: &Network) -> String {
    let mut parts = Vec::new();
    for (l, layer) in net.layers.iter().enumerate() {
        parts.push(format!(
            "layer {l}: |W1| {:.4e} |W2| {:.4e} |W3| {:.4e} lambda {:?} eta {:.4e} beta {:.4e}",
            layer.w1.frobenius_norm(),
            layer.w2.frobenius_norm(),
            layer.w3.frobenius_norm(),
            layer.lambda,
            layer.eta,
            layer.beta
        ));
    }
    parts.push(format!("lambda_f {:.4e} lambda_p {:.4e}", net.sbp.lambda_f, net.sbp.lambda_p));
    parts.join("; ")
}

pub const EVAL_CHUNK: usize = 1000;

/// Plasticity-free evaluation; `merged` selects single-matrix inference.
pub fn evaluate(net: &Network, data: &Dataset, timesteps: usize, merged: bool) -> Result<EvalMetrics> {
    let mode = if merged { PathMode::Merged } else { PathMode::ThreePath };
    let (mut loss, mut correct) = (0.0, 0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        let inf = infer_batch(net, &x, timesteps, mode)?;
        correct += count_correct(&inf.predictions(), &y);
        for (b, &label) in y.iter().enumerate() {
            loss += cross_entropy(inf.counts.row(b), label);
        }
    }
    let n = data.len().max(1) as f64;
    Ok(EvalMetrics {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// One training run of the ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub mode: LambdaMode,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

pub const ABLATION_MODES: [LambdaMode; 3] = [LambdaMode::Fixed, LambdaMode::Learnable, LambdaMode::FrozenLearned];

impl AblationReport {
    /// Seed-averaged curve for `mode`; `λ` is averaged too.
    pub fn mean_curve(&self, mode: LambdaMode) -> Vec<EpochMetrics> {
        let runs: Vec<&AblationRun> = self.runs.iter().filter(|r| r.mode == mode).collect();
        let Some(first) = runs.first() else {
            return Vec::new();
        };
        let k = runs.len() as f64;
        (0..first.epochs.len())
            .map(|e| {
                let rows: Vec<&EpochMetrics> = runs.iter().map(|r| &r.epochs[e]).collect();
                let mean = |f: &dyn Fn(&EpochMetrics) -> f64| rows.iter().map(|m| f(m)).sum::<f64>() / k;
                let lambda = (0..first.epochs[e].lambda.len())
                    .map(|l| {
                        let mut acc = [0.0; 3];
                        for r in &rows {
                            for (a, v) in acc.iter_mut().zip(r.lambda[l]) {
                                *a += v / k;
                            }
                        }
                        acc
                    })
                    .collect();
                EpochMetrics {
                    epoch: first.epochs[e].epoch,
                    loss: mean(&|m| m.loss),
                    accuracy: mean(&|m| m.accuracy),
                    lambda,
                    lambda_f: mean(&|m| m.lambda_f),
                    lambda_p: mean(&|m| m.lambda_p),
                }
            })
            .collect()
    }

    pub fn final_accuracy(&self, mode: LambdaMode) -> f64 {
        self.mean_curve(mode).last().map_or(f64::NAN, |m| m.accuracy)
    }

    /// Whether the learnable mean final train accuracy is at least the fixed one.
    pub fn learnable_beats_fixed(&self) -> bool {
        self.final_accuracy(LambdaMode::Learnable) >= self.final_accuracy(LambdaMode::Fixed)
    }
}

/// Runs fixed, learnable and frozen-learned training on `data` for every
/// seed. The frozen run for a seed takes its `λ` from the learnable run with
/// that seed and otherwise repeats it (same initialization and data order).
pub fn ablate_lambda(base: &TrainConfig, data: &Dataset, seeds: &[u64]) -> Result<AblationReport> {
    let mut runs = Vec::new();
    for &seed in seeds {
        let mut learned = None;
        for mode in [LambdaMode::Fixed, LambdaMode::Learnable, LambdaMode::FrozenLearned] {
            let cfg = TrainConfig {
                seed,
                lambda_mode: mode,
                frozen_lambda: if mode == LambdaMode::FrozenLearned { learned.clone() } else { None },
                ..base.clone()
            };
            let mut tr = Trainer::new(cfg)?;
            let epochs = (0..base.epochs)
                .map(|_| tr.train_epoch(data))
                .collect::<Result<Vec<_>>>()?;
            if mode == LambdaMode::Learnable {
                learned = Some(tr.net.layers.iter().map(|l| l.lambda).collect());
            }
            runs.push(AblationRun { mode, seed, epochs });
        }
    }
    Ok(AblationReport { runs })
}
