//! Layer stack, initialization and plasticity-free inference.

use crate::error::{Error, Result};
use crate::neuron::{fused_input, membrane_step, spike, EpisodeState, LifConfig};
use crate::numerics::{gemm, kaiming_uniform_init, matvec, DenseMatrix, DenseVector, SeededRng, Trans};
use crate::plasticity::{merge_weights, DeltaMode, MultiPathLayer, SbpParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub lambda: [f64; 3],
    pub eta: f64,
    pub beta: f64,
    /// Multiplier on the Kaiming bound for `W2`/`W3`.
    pub plastic_scale: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            lambda: [1.0 / 3.0; 3],
            eta: 1e-3,
            beta: -0.5,
            plastic_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<MultiPathLayer>,
    /// Global fraction factors and weight time constant.
    pub sbp: SbpParams,
    pub lif: LifConfig,
    pub delta_mode: DeltaMode,
}

impl Network {
    /// Random initialization for layer widths `sizes = [input, hidden.., classes]`.
    pub fn init(
        sizes: &[usize],
        lif: LifConfig,
        sbp: SbpParams,
        init: &InitConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        check_sizes(sizes)?;
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w1 = kaiming_uniform_init(rng, fan_in, fan_out, fan_in)?;
            let mut w2 = kaiming_uniform_init(rng, fan_in, fan_out, fan_in)?;
            let mut w3 = kaiming_uniform_init(rng, fan_in, fan_out, fan_in)?;
            w2.scale(init.plastic_scale);
            w3.scale(init.plastic_scale);
            layers.push(MultiPathLayer::from_parts(
                w1,
                w2,
                w3,
                init.lambda,
                init.eta,
                init.beta,
            )?);
        }
        Ok(Self {
            layers,
            sbp,
            lif,
            delta_mode: DeltaMode::default(),
        })
    }

    /// All three weight paths zero.
    pub fn zeroed(sizes: &[usize], lif: LifConfig, sbp: SbpParams, init: &InitConfig) -> Result<Self> {
        check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|p| {
                let z = DenseMatrix::zeros(p[1], p[0]);
                MultiPathLayer::from_parts(z.clone(), z.clone(), z, init.lambda, init.eta, init.beta)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            sbp,
            lif,
            delta_mode: DeltaMode::default(),
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].fan_in()];
        s.extend(self.layers.iter().map(|l| l.fan_out()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.w1.is_finite()
                && l.w2.is_finite()
                && l.w3.is_finite()
                && l.lambda.iter().all(|v| v.is_finite())
                && l.eta.is_finite()
                && l.beta.is_finite()
        }) && self.sbp.lambda_f.is_finite()
            && self.sbp.lambda_p.is_finite()
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::Config(format!(
            "layers must list at least two positive widths, got {sizes:?}"
        )));
    }
    Ok(())
}

/// How inference combines the three weight paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathMode {
    /// One matrix per layer from [`merge_weights`].
    Merged,
    /// `Σ λ_i W_i s` evaluated path by path.
    ThreePath,
}

/// Batched inference outputs; every matrix has one row per sample.
#[derive(Debug, Clone)]
pub struct Inference {
    /// Output spike counts over the window.
    pub counts: DenseMatrix,
    /// Output membrane potential summed over the window, used to break count ties.
    pub u_sum: DenseMatrix,
    /// Membrane potential of every layer at the last timestep.
    pub final_u: Vec<DenseMatrix>,
}

impl Inference {
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.counts.rows())
            .map(|r| predict_label(self.counts.row(r), self.u_sum.row(r)))
            .collect()
    }
}

/// Largest spike count, ties broken by summed potential, then lowest index.
pub fn predict_label(counts: &[f64], u_sum: &[f64]) -> usize {
    let mut best = 0;
    for c in 1..counts.len() {
        let better = counts[c] > counts[best]
            || (counts[c] == counts[best] && u_sum[c] > u_sum[best]);
        if better {
            best = c;
        }
    }
    best
}

/// Softmax cross-entropy of one row of logits against `label`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Forward simulation of a batch `x: [B × input]` with frozen weights.
///
/// Layers are processed one at a time over the whole window; with no
/// plasticity the result is identical to the timestep-major order.
pub fn infer_batch(net: &Network, x: &DenseMatrix, timesteps: usize, mode: PathMode) -> Result<Inference> {
    if x.cols() != net.input_dim() {
        return Err(Error::shape("infer_batch", net.input_dim(), x.cols()));
    }
    let b = x.rows();
    let lif = &net.lif;
    // Input drive is the same at every step.
    let mut inputs: Vec<DenseMatrix> = vec![x.clone()];
    let mut final_u = Vec::with_capacity(net.layers.len());
    let mut u_sum = DenseMatrix::zeros(b, 0);
    for (li, layer) in net.layers.iter().enumerate() {
        let n = layer.fan_out();
        let drive: Vec<DenseMatrix> = inputs
            .iter()
            .map(|s| layer_drive(layer, s, mode))
            .collect();
        let mut u = DenseMatrix::zeros(b, n);
        let mut s = DenseMatrix::zeros(b, n);
        let mut spikes = Vec::with_capacity(timesteps);
        let is_last = li + 1 == net.layers.len();
        let mut usum = DenseMatrix::zeros(b, n);
        for t in 0..timesteps {
            let i = if drive.len() == 1 { &drive[0] } else { &drive[t] };
            for ((uv, sv), iv) in u
                .as_mut_slice()
                .iter_mut()
                .zip(s.as_mut_slice().iter_mut())
                .zip(i.as_slice())
            {
                *uv = lif.integrate(*uv, *sv, *iv);
                *sv = lif.fire(*uv);
            }
            if is_last {
                usum.axpy(1.0, &u);
            }
            spikes.push(s.clone());
        }
        final_u.push(u);
        if is_last {
            u_sum = usum;
        }
        inputs = spikes;
    }
    let mut counts = DenseMatrix::zeros(b, net.num_classes());
    for s in &inputs {
        counts.axpy(1.0, s);
    }
    Ok(Inference {
        counts,
        u_sum,
        final_u,
    })
}

fn layer_drive(layer: &MultiPathLayer, s: &DenseMatrix, mode: PathMode) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(s.rows(), layer.fan_out());
    match mode {
        PathMode::Merged => {
            let w = merge_weights(layer);
            gemm(1.0, s, Trans::No, &w, Trans::Yes, 0.0, &mut out);
        }
        PathMode::ThreePath => {
            for (w, lambda) in layer.weights().into_iter().zip(layer.lambda) {
                gemm(lambda, s, Trans::No, w, Trans::Yes, 1.0, &mut out);
            }
        }
    }
    out
}

/// Single-sample simulation recording every `U`, `S` and `I`, weights frozen.
pub fn run_episode(net: &Network, x: &DenseVector, timesteps: usize, mode: PathMode) -> Result<EpisodeState> {
    if x.len() != net.input_dim() {
        return Err(Error::shape("run_episode", net.input_dim(), x.len()));
    }
    let merged: Vec<DenseMatrix> = net.layers.iter().map(merge_weights).collect();
    let mut state = EpisodeState::default();
    let mut u_prev: Vec<DenseVector> = net.layers.iter().map(|l| DenseVector::zeros(l.fan_out())).collect();
    let mut s_prev = u_prev.clone();
    for _ in 0..timesteps {
        let (mut us, mut ss, mut is) = (Vec::new(), Vec::new(), Vec::new());
        let mut below = x.clone();
        for (l, layer) in net.layers.iter().enumerate() {
            let i = match mode {
                PathMode::Merged => matvec(&merged[l], &below)?,
                PathMode::ThreePath => fused_input(layer, &below)?,
            };
            let u = membrane_step(&u_prev[l], &s_prev[l], &i, &net.lif)?;
            let s = spike(&u, &net.lif);
            below = s.clone();
            u_prev[l] = u.clone();
            s_prev[l] = s.clone();
            us.push(u);
            ss.push(s);
            is.push(i);
        }
        state.u.push(us);
        state.s.push(ss);
        state.i.push(is);
    }
    Ok(state)
}
