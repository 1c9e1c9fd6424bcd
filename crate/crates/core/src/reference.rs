//! Independent gradient oracle: forward-mode dual numbers over plain nested
//! vectors, one full forward pass per scalar parameter.
//!
//! Nothing here is shared with [`crate::tape`]; the only common ground is the
//! model definition itself, including the convention that the spike step
//! propagates the rectangular surrogate derivative.

use std::ops::{Add, Mul, Sub};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::numerics::{DenseMatrix, EPS_DIV};
use crate::tape::{GradientSet, LayerGrads};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dual {
    v: f64,
    d: f64,
}

impl Dual {
    fn c(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }

    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual { v: e, d: e * self.d }
    }

    fn ln(self) -> Self {
        Dual {
            v: self.v.ln(),
            d: self.d / self.v,
        }
    }

    fn recip(self) -> Self {
        Dual {
            v: 1.0 / self.v,
            d: -self.d / (self.v * self.v),
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: self.d + o.d,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: self.d - o.d,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
        }
    }
}

type Mat = Vec<Vec<Dual>>;

fn to_mat(m: &DenseMatrix) -> Mat {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|&v| Dual::c(v)).collect())
        .collect()
}

fn sigmoid(x: Dual) -> Dual {
    let one = Dual::c(1.0);
    (one + Dual::c(0.0).sub(x).exp()).recip()
}

/// Which scalar carries the unit tangent.
#[derive(Debug, Clone, Copy)]
enum Seed {
    W1(usize, usize, usize),
    Lambda(usize, usize),
    Eta(usize),
    Beta(usize),
    LambdaF,
    LambdaP,
}

struct DualLayer {
    w1: Mat,
    w2: Mat,
    w3: Mat,
    lambda: [Dual; 3],
    eta: Dual,
    beta: Dual,
}

fn dual_loss(net: &Network, x: &DenseMatrix, labels: &[usize], timesteps: usize, seed: Seed) -> f64 {
    let lif = net.lif;
    let decay = (-lif.dt / net.sbp.tau_w).exp();
    let old_coef = match net.delta_mode {
        crate::plasticity::DeltaMode::Full => 1.0,
        crate::plasticity::DeltaMode::Increment => decay,
    };
    let bsz = x.rows();
    let mut lf = Dual::c(net.sbp.lambda_f);
    let mut lp = Dual::c(net.sbp.lambda_p);
    let mut layers: Vec<DualLayer> = net
        .layers
        .iter()
        .map(|l| DualLayer {
            w1: to_mat(&l.w1),
            w2: to_mat(&l.w2),
            w3: to_mat(&l.w3),
            lambda: [Dual::c(l.lambda[0]), Dual::c(l.lambda[1]), Dual::c(l.lambda[2])],
            eta: Dual::c(l.eta),
            beta: Dual::c(l.beta),
        })
        .collect();
    match seed {
        Seed::W1(l, j, i) => layers[l].w1[j][i].d = 1.0,
        Seed::Lambda(l, k) => layers[l].lambda[k].d = 1.0,
        Seed::Eta(l) => layers[l].eta.d = 1.0,
        Seed::Beta(l) => layers[l].beta.d = 1.0,
        Seed::LambdaF => lf.d = 1.0,
        Seed::LambdaP => lp.d = 1.0,
    }

    let n_layers = layers.len();
    let mut u: Vec<Mat> = layers
        .iter()
        .map(|l| vec![vec![Dual::c(0.0); l.w1.len()]; bsz])
        .collect();
    let mut s = u.clone();
    let mut counts = vec![vec![Dual::c(0.0); net.num_classes()]; bsz];
    let rho_m = Dual::c(lif.rho_m);
    let v_th = Dual::c(lif.v_th);

    for _t in 0..timesteps {
        let mut deltas: Vec<Mat> = Vec::with_capacity(n_layers);
        let mut below: Mat = (0..bsz)
            .map(|b| x.row(b).iter().map(|&v| Dual::c(v)).collect())
            .collect();
        for l in 0..n_layers {
            let layer = &mut layers[l];
            let out = layer.w1.len();
            let fan_in = layer.w1[0].len();
            for b in 0..bsz {
                for j in 0..out {
                    let mut acc = Dual::c(0.0);
                    for (k, w) in [&layer.w1, &layer.w2, &layer.w3].into_iter().enumerate() {
                        let mut dot = Dual::c(0.0);
                        for i in 0..fan_in {
                            dot = dot + w[j][i] * below[b][i];
                        }
                        acc = acc + layer.lambda[k] * dot;
                    }
                    let un = rho_m * (u[l][b][j] - s[l][b][j] * v_th) + acc;
                    u[l][b][j] = un;
                    let fired = if un.v >= lif.v_th { 1.0 } else { 0.0 };
                    let window = if (un.v - lif.v_th).abs() < lif.a / 2.0 {
                        1.0 / lif.a
                    } else {
                        0.0
                    };
                    s[l][b][j] = Dual {
                        v: fired,
                        d: window * un.d,
                    };
                }
            }
            let scale = layer.eta * Dual::c(1.0 / bsz as f64);
            let mut delta = vec![vec![Dual::c(0.0); fan_in]; out];
            for j in 0..out {
                for i in 0..fan_in {
                    let mut hebb = Dual::c(0.0);
                    for b in 0..bsz {
                        hebb = hebb + (sigmoid(u[l][b][j]) + layer.beta) * below[b][i];
                    }
                    let old = layer.w2[j][i];
                    let new = Dual::c(decay) * old + scale * hebb;
                    delta[j][i] = new - Dual::c(old_coef) * old;
                    layer.w2[j][i] = new;
                }
            }
            deltas.push(delta);
            below = s[l].clone();
        }
        for l in (0..n_layers).rev() {
            let out = layers[l].w3.len();
            let mut diag = vec![lf; out];
            if l + 1 < n_layers {
                let next = &deltas[l + 1];
                let mut col = vec![Dual::c(0.0); out];
                for row in next {
                    for k in 0..out {
                        col[k] = col[k] + row[k];
                    }
                }
                let mut total = Dual::c(0.0);
                for c in &col {
                    total = total + *c;
                }
                if total.v.abs() >= EPS_DIV {
                    let inv = total.recip();
                    for k in 0..out {
                        diag[k] = lf * (Dual::c(1.0) + lp * col[k] * inv);
                    }
                }
            }
            let layer = &mut layers[l];
            for j in 0..out {
                for i in 0..layer.w3[j].len() {
                    layer.w3[j][i] = Dual::c(decay) * layer.w3[j][i] + diag[j] * deltas[l][j][i];
                }
            }
        }
        for b in 0..bsz {
            for c in 0..counts[b].len() {
                counts[b][c] = counts[b][c] + s[n_layers - 1][b][c];
            }
        }
    }

    let mut total = Dual::c(0.0);
    for (b, &y) in labels.iter().enumerate() {
        let max = counts[b].iter().map(|z| z.v).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = Dual::c(0.0);
        for z in &counts[b] {
            sum = sum + (*z - Dual::c(max)).exp();
        }
        let lse = Dual::c(max) + sum.ln();
        total = total + lse - counts[b][y];
    }
    (total * Dual::c(1.0 / bsz as f64)).d
}

/// Gradients of the batch loss by forward-mode differentiation, one pass per
/// parameter. Meant for small networks.
pub fn reference_gradients(
    net: &Network,
    x: &DenseMatrix,
    labels: &[usize],
    timesteps: usize,
) -> Result<GradientSet> {
    if x.cols() != net.input_dim() || x.rows() != labels.len() || labels.is_empty() {
        return Err(Error::shape("reference_gradients", net.input_dim(), x.cols()));
    }
    if timesteps == 0 {
        return Err(Error::Config("timesteps must be >= 1".into()));
    }
    let go = |seed| dual_loss(net, x, labels, timesteps, seed);
    let mut layers = Vec::with_capacity(net.layers.len());
    for (l, layer) in net.layers.iter().enumerate() {
        let (rows, cols) = layer.w1.shape();
        let mut w1 = DenseMatrix::zeros(rows, cols);
        for j in 0..rows {
            for i in 0..cols {
                w1[(j, i)] = go(Seed::W1(l, j, i));
            }
        }
        layers.push(LayerGrads {
            w1,
            lambda: [go(Seed::Lambda(l, 0)), go(Seed::Lambda(l, 1)), go(Seed::Lambda(l, 2))],
            eta: go(Seed::Eta(l)),
            beta: go(Seed::Beta(l)),
        });
    }
    Ok(GradientSet {
        layers,
        lambda_f: go(Seed::LambdaF),
        lambda_p: go(Seed::LambdaP),
    })
}
