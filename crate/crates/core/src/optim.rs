//! Adam over the flattened gradient-trained parameters.

use crate::error::{Error, Result};
use crate::network::Network;
use crate::tape::GradientSet;

/// Flattened in the same order as [`GradientSet::entries`]: per layer `W1`
/// (row-major), `λ`, `η`, `β`; then `λ_f`, `λ_p`.
pub fn param_vector(net: &Network) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &net.layers {
        out.extend_from_slice(l.w1.as_slice());
        out.extend_from_slice(&l.lambda);
        out.push(l.eta);
        out.push(l.beta);
    }
    out.push(net.sbp.lambda_f);
    out.push(net.sbp.lambda_p);
    out
}

pub fn grad_vector(g: &GradientSet) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &g.layers {
        out.extend_from_slice(l.w1.as_slice());
        out.extend_from_slice(&l.lambda);
        out.push(l.eta);
        out.push(l.beta);
    }
    out.push(g.lambda_f);
    out.push(g.lambda_p);
    out
}

pub fn set_param_vector(net: &mut Network, p: &[f64]) -> Result<()> {
    let want = param_vector_len(net);
    if p.len() != want {
        return Err(Error::shape("set_param_vector", want, p.len()));
    }
    let mut off = 0;
    for l in &mut net.layers {
        let n = l.w1.as_slice().len();
        l.w1.as_mut_slice().copy_from_slice(&p[off..off + n]);
        off += n;
        l.lambda.copy_from_slice(&p[off..off + 3]);
        l.eta = p[off + 3];
        l.beta = p[off + 4];
        off += 5;
    }
    net.sbp.lambda_f = p[off];
    net.sbp.lambda_p = p[off + 1];
    Ok(())
}

pub fn param_vector_len(net: &Network) -> usize {
    net.layers.iter().map(|l| l.w1.as_slice().len() + 5).sum::<usize>() + 2
}

/// Per-entry learning-rate multipliers: `0` for `λ` when the fusion
/// coefficients are held fixed, `hebbian_scale` for `η` and `β`.
pub fn lr_scales(net: &Network, learn_lambda: bool, hebbian_scale: f64) -> Vec<f64> {
    let lambda = if learn_lambda { 1.0 } else { 0.0 };
    let mut out = Vec::with_capacity(param_vector_len(net));
    for l in &net.layers {
        out.extend(std::iter::repeat_n(1.0, l.w1.as_slice().len()));
        out.extend([lambda; 3]);
        out.extend([hebbian_scale; 2]);
    }
    out.extend([1.0, 1.0]);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One bias-corrected step on `params` with the step of entry `i` scaled
    /// by `scales[i]`. Entries with scale 0 are left alone and their moments
    /// stay at zero.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], scales: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || scales.len() != self.m.len() {
            return Err(Error::shape("Adam::update", self.m.len(), params.len()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            if scales[i] == 0.0 {
                continue;
            }
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= scales[i] * self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::InitConfig;
    use crate::neuron::LifConfig;
    use crate::numerics::SeededRng;
    use crate::plasticity::SbpParams;

    fn net() -> Network {
        let mut rng = SeededRng::new(4);
        Network::init(&[3, 4, 2], LifConfig::default(), SbpParams::default(), &InitConfig::default(), &mut rng)
            .unwrap()
    }

    #[test]
    fn flatten_round_trips() {
        let mut n = net();
        let mut p = param_vector(&n);
        assert_eq!(p.len(), param_vector_len(&n));
        assert_eq!(p.len(), 12 + 5 + 8 + 5 + 2);
        for (i, v) in p.iter_mut().enumerate() {
            *v = i as f64;
        }
        set_param_vector(&mut n, &p).unwrap();
        assert_eq!(param_vector(&n), p);
        assert_eq!(n.layers[0].lambda, [12.0, 13.0, 14.0]);
        assert_eq!(n.sbp.lambda_p, 31.0);
        assert!(set_param_vector(&mut n, &p[1..]).is_err());
    }

    #[test]
    fn gradient_layout_matches_entries() {
        let n = net();
        let mut g = GradientSet::zeros(&n.sizes());
        g.layers[1].eta = 7.0;
        g.lambda_f = 3.0;
        let flat = grad_vector(&g);
        let names: Vec<f64> = g.entries().into_iter().map(|e| e.2).collect();
        assert_eq!(flat, names);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias correction makes the first step exactly lr·sign(g) up to eps.
        let mut adam = Adam::new(0.1, 3);
        let mut p = vec![1.0, 1.0, 1.0];
        adam.update(&mut p, &[2.0, -0.5, 4.0], &[1.0, 1.0, 0.0]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-8);
        assert!((p[1] - 1.1).abs() < 1e-8);
        assert_eq!(p[2], 1.0);
        assert_eq!(adam.m[2], 0.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::new(0.05, 2);
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            adam.update(&mut p, &g, &[1.0, 1.0]).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn scales_hide_lambda_and_slow_hebbian() {
        let n = net();
        let s = hebbian_scales(&n);
        assert_eq!(s.iter().filter(|v| **v == 0.0).count(), 6);
        assert_eq!((s[12], s[14], s[15], s[16], s[11]), (0.0, 0.0, 0.01, 0.01, 1.0));
    }

    fn hebbian_scales(n: &Network) -> Vec<f64> {
        lr_scales(n, false, 0.01)
    }

    #[test]
    fn scaled_step_is_proportional() {
        let mut a = Adam::new(0.1, 2);
        let mut p = vec![0.0, 0.0];
        a.update(&mut p, &[1.0, 1.0], &[1.0, 0.25]).unwrap();
        assert!((p[1] / p[0] - 0.25).abs() < 1e-12);
    }
}
