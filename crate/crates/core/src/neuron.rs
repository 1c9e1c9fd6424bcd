//! Leaky integrate-and-fire dynamics with soft reset and the rectangular
//! surrogate derivative used in place of the spike step's derivative.

use crate::error::{Error, Result};
use crate::numerics::{matvec, DenseVector};
use crate::plasticity::MultiPathLayer;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifConfig {
    /// Firing threshold.
    pub v_th: f64,
    /// Membrane decay factor in (0, 1].
    pub rho_m: f64,
    /// Width of the rectangular surrogate window.
    pub a: f64,
    /// Length of one simulation step.
    pub dt: f64,
}

impl Default for LifConfig {
    fn default() -> Self {
        Self {
            v_th: 0.3,
            rho_m: 0.5,
            a: 1.0,
            dt: 1.0,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_m > 0.0 && self.rho_m <= 1.0) {
            return Err(Error::Config(format!(
                "lif.rho_m must lie in (0, 1], got {}",
                self.rho_m
            )));
        }
        if !(self.v_th > 0.0) {
            return Err(Error::Config(format!("lif.v_th must be > 0, got {}", self.v_th)));
        }
        if !(self.a > 0.0) {
            return Err(Error::Config(format!("lif.a must be > 0, got {}", self.a)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("lif.dt must be > 0, got {}", self.dt)));
        }
        Ok(())
    }

    /// Heaviside spike: 1 when `u ≥ v_th`.
    #[inline]
    pub fn fire(&self, u: f64) -> f64 {
        if u >= self.v_th {
            1.0
        } else {
            0.0
        }
    }

    /// `(1/a)·1[|u − v_th| < a/2]`
    #[inline]
    pub fn surrogate(&self, u: f64) -> f64 {
        if (u - self.v_th).abs() < self.a / 2.0 {
            1.0 / self.a
        } else {
            0.0
        }
    }

    /// Soft-reset membrane update for one neuron.
    #[inline]
    pub fn integrate(&self, u_prev: f64, s_prev: f64, input: f64) -> f64 {
        self.rho_m * (u_prev - s_prev * self.v_th) + input
    }
}

/// Per-timestep, per-layer record of one simulated sample.
///
/// Indexing is `[t][layer]`, with `t = 0` the first simulated step.
#[derive(Debug, Clone, Default)]
pub struct EpisodeState {
    pub u: Vec<Vec<DenseVector>>,
    pub s: Vec<Vec<DenseVector>>,
    pub i: Vec<Vec<DenseVector>>,
}

impl EpisodeState {
    pub fn timesteps(&self) -> usize {
        self.u.len()
    }

    /// Output-layer spike counts summed over the window.
    pub fn output_counts(&self) -> DenseVector {
        let last = self.s[0].len() - 1;
        let mut counts = DenseVector::zeros(self.s[0][last].len());
        for step in &self.s {
            for (c, v) in counts.as_mut_slice().iter_mut().zip(step[last].iter()) {
                *c += v;
            }
        }
        counts
    }
}

/// `I = Σ_i λ_i · W_i s_prev` over the three weight paths.
pub fn fused_input(layer: &MultiPathLayer, s_prev: &DenseVector) -> Result<DenseVector> {
    if s_prev.len() != layer.fan_in() {
        return Err(Error::shape("fused_input", layer.fan_in(), s_prev.len()));
    }
    let mut out = DenseVector::zeros(layer.fan_out());
    for (w, lambda) in layer.weights().into_iter().zip(layer.lambda) {
        let part = matvec(w, s_prev)?;
        for (o, p) in out.as_mut_slice().iter_mut().zip(part.iter()) {
            *o += lambda * p;
        }
    }
    Ok(out)
}

/// `U = ρ_m·(U_prev − S_prev·V_th) + I`
pub fn membrane_step(
    u_prev: &DenseVector,
    s_prev: &DenseVector,
    input: &DenseVector,
    cfg: &LifConfig,
) -> Result<DenseVector> {
    if u_prev.len() != s_prev.len() || u_prev.len() != input.len() {
        return Err(Error::shape(
            "membrane_step",
            u_prev.len(),
            format!("{} / {}", s_prev.len(), input.len()),
        ));
    }
    Ok(u_prev
        .iter()
        .zip(s_prev.iter())
        .zip(input.iter())
        .map(|((&u, &s), &i)| cfg.integrate(u, s, i))
        .collect::<Vec<_>>()
        .into())
}

pub fn spike(u: &DenseVector, cfg: &LifConfig) -> DenseVector {
    u.iter().map(|&x| cfg.fire(x)).collect::<Vec<_>>().into()
}

pub fn surrogate_grad(u: &DenseVector, cfg: &LifConfig) -> DenseVector {
    u.iter().map(|&x| cfg.surrogate(x)).collect::<Vec<_>>().into()
}
