//! Reverse-mode differentiation over one simulated window.
//!
//! [`record_forward`] runs the full multi-path forward pass for a batch,
//! interleaving the Hebbian and SBP updates exactly as training does, and
//! records every step as a coarse-grained node (matrix-valued, batch-aware).
//! [`backward`] walks the nodes in reverse and returns gradients for every
//! gradient-trained parameter. The spike step's derivative is replaced by the
//! rectangular surrogate.
//!
//! `W2`/`W3` entering the window are constants; inside the window their
//! updates are differentiable, which is how `η`, `β`, `λ_f` and `λ_p` get
//! gradients.

use crate::error::{Error, Result};
use crate::network::Network;
use crate::neuron::LifConfig;
use crate::numerics::{gemm, DenseMatrix, Trans};
use crate::plasticity::{hebbian_step, modulation_diag, rho, rho_prime, sbp_step};

pub type NodeId = usize;

/// A gradient-trained parameter, by layer where applicable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Param {
    W1(usize),
    Lambda(usize),
    Eta(usize),
    Beta(usize),
    LambdaF,
    LambdaP,
}

/// Scheduling events emitted while recording, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    /// Membrane and spike computation of `layer` at step `t`.
    Forward { t: usize, layer: usize },
    /// `W2` update of `layer` at step `t`.
    Hebbian { t: usize, layer: usize },
    /// `W3` update of `layer` at step `t`.
    Sbp { t: usize, layer: usize },
    /// One optimizer step (appended by the trainer).
    GradientStep,
}

/// Spike nonlinearity used while recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpikeKind {
    #[default]
    Heaviside,
    /// Test double: `S = U` with unit derivative.
    Identity,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RecordOptions {
    pub spike: SpikeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf { param: Option<Param> },
    /// `s · (Σ λ_i W_i)ᵀ`
    Fuse { s: NodeId, w: [NodeId; 3], lambda: NodeId },
    /// `ρ_m (U_prev − V_th S_prev) + I`
    Membrane { u_prev: NodeId, s_prev: NodeId, input: NodeId },
    Spike { u: NodeId },
    /// `decay·W_prev + (η/B)(ρ(U)+β)ᵀ s`
    Hebbian { w_prev: NodeId, s: NodeId, u: NodeId, eta: NodeId, beta: NodeId },
    /// `new − old_coef·old`
    Delta { new: NodeId, old: NodeId, old_coef: f64 },
    /// SBP modulation diagonal `[1 × len]`.
    Modulation { next_delta: Option<NodeId>, lambda_f: NodeId, lambda_p: NodeId, len: usize },
    /// `decay·W_prev + diag(m)·Δ`
    Sbp { w_prev: NodeId, diag: NodeId, delta: NodeId },
    SpikeCount { spikes: Vec<NodeId> },
    /// Batch-mean softmax cross-entropy, `[1 × 1]`.
    SoftmaxXent { logits: NodeId, labels: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::Fuse { s, w, lambda } => vec![*s, w[0], w[1], w[2], *lambda],
            Op::Membrane { u_prev, s_prev, input } => vec![*u_prev, *s_prev, *input],
            Op::Spike { u } => vec![*u],
            Op::Hebbian { w_prev, s, u, eta, beta } => vec![*w_prev, *s, *u, *eta, *beta],
            Op::Delta { new, old, .. } => vec![*new, *old],
            Op::Modulation { next_delta, lambda_f, lambda_p, .. } => {
                let mut v = vec![*lambda_f, *lambda_p];
                v.extend(next_delta);
                v
            }
            Op::Sbp { w_prev, diag, delta } => vec![*w_prev, *diag, *delta],
            Op::SpikeCount { spikes } => spikes.clone(),
            Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
pub struct TapeNode {
    pub op: Op,
    pub requires_grad: bool,
}

/// Final plastic state of one layer at the end of a recorded window.
#[derive(Debug, Clone, Copy)]
pub struct PlasticNodes {
    pub w2: NodeId,
    pub w3: NodeId,
    pub dw2: NodeId,
}

#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<TapeNode>,
    values: Vec<DenseMatrix>,
    lif: LifConfig,
    decay: f64,
    spike: SpikeKind,
    events: Vec<Event>,
    params: Vec<(Param, NodeId)>,
    plastic: Vec<PlasticNodes>,
    counts: NodeId,
    loss: NodeId,
    output_u_sum: DenseMatrix,
    layer_sizes: Vec<usize>,
}

impl Tape {
    fn new(lif: LifConfig, decay: f64, spike: SpikeKind) -> Self {
        Self {
            nodes: Vec::new(),
            values: Vec::new(),
            lif,
            decay,
            spike,
            events: Vec::new(),
            params: Vec::new(),
            plastic: Vec::new(),
            counts: 0,
            loss: 0,
            output_u_sum: DenseMatrix::zeros(0, 0),
            layer_sizes: Vec::new(),
        }
    }

    fn leaf(&mut self, value: DenseMatrix, param: Option<Param>) -> NodeId {
        let id = self.nodes.len();
        if let Some(p) = param {
            self.params.push((p, id));
        }
        self.nodes.push(TapeNode {
            op: Op::Leaf { param },
            requires_grad: param.is_some(),
        });
        self.values.push(value);
        id
    }

    fn push(&mut self, op: Op) -> NodeId {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        let value = self.eval(&op, &self.values);
        let id = self.nodes.len();
        self.nodes.push(TapeNode { op, requires_grad });
        self.values.push(value);
        id
    }

    fn eval(&self, op: &Op, values: &[DenseMatrix]) -> DenseMatrix {
        let lif = &self.lif;
        match op {
            Op::Leaf { .. } => unreachable!("leaves are not evaluated"),
            Op::Fuse { s, w, lambda } => {
                let lam = values[*lambda].as_slice();
                let mut merged = values[w[0]].scaled(lam[0]);
                merged.axpy(lam[1], &values[w[1]]);
                merged.axpy(lam[2], &values[w[2]]);
                let s = &values[*s];
                let mut out = DenseMatrix::zeros(s.rows(), merged.rows());
                gemm(1.0, s, Trans::No, &merged, Trans::Yes, 0.0, &mut out);
                out
            }
            Op::Membrane { u_prev, s_prev, input } => {
                let (u, s, i) = (&values[*u_prev], &values[*s_prev], &values[*input]);
                let data = u
                    .as_slice()
                    .iter()
                    .zip(s.as_slice())
                    .zip(i.as_slice())
                    .map(|((&u, &s), &i)| lif.integrate(u, s, i))
                    .collect();
                DenseMatrix::from_vec(i.rows(), i.cols(), data).expect("membrane shape")
            }
            Op::Spike { u } => match self.spike {
                SpikeKind::Heaviside => values[*u].map(|x| lif.fire(x)),
                SpikeKind::Identity => values[*u].clone(),
            },
            Op::Hebbian { w_prev, s, u, eta, beta } => hebbian_step(
                &values[*w_prev],
                &values[*s],
                &values[*u],
                values[*eta].item(),
                values[*beta].item(),
                self.decay,
            ),
            Op::Delta { new, old, old_coef } => {
                let mut out = values[*new].clone();
                out.axpy(-old_coef, &values[*old]);
                out
            }
            Op::Modulation { next_delta, lambda_f, lambda_p, len } => {
                let m = modulation_diag(
                    next_delta.map(|id| &values[id]),
                    *len,
                    values[*lambda_f].item(),
                    values[*lambda_p].item(),
                )
                .expect("modulation shape checked at record time");
                DenseMatrix::row_vector(&m.diag)
            }
            Op::Sbp { w_prev, diag, delta } => sbp_step(
                &values[*w_prev],
                values[*diag].as_slice(),
                &values[*delta],
                self.decay,
            ),
            Op::SpikeCount { spikes } => {
                let mut out = values[spikes[0]].clone();
                for &s in &spikes[1..] {
                    out.axpy(1.0, &values[s]);
                }
                out
            }
            Op::SoftmaxXent { logits, labels } => {
                let z = &values[*logits];
                let total: f64 = labels
                    .iter()
                    .enumerate()
                    .map(|(b, &y)| crate::network::cross_entropy(z.row(b), y))
                    .sum();
                DenseMatrix::scalar(total / labels.len() as f64)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.values[id]
    }

    pub fn values(&self) -> &[DenseMatrix] {
        &self.values
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn lif(&self) -> &LifConfig {
        &self.lif
    }

    /// Overrides the neuron config used by [`backward`]; forward values are
    /// untouched. Exists for negative-control checks of the gradient oracle.
    pub fn set_lif(&mut self, lif: LifConfig) {
        self.lif = lif;
    }

    pub fn loss(&self) -> f64 {
        self.values[self.loss].item()
    }

    /// Output spike counts `[B × classes]`.
    pub fn counts(&self) -> &DenseMatrix {
        &self.values[self.counts]
    }

    /// Output membrane potential summed over the window `[B × classes]`.
    pub fn output_u_sum(&self) -> &DenseMatrix {
        &self.output_u_sum
    }

    pub fn predictions(&self) -> Vec<usize> {
        let (c, u) = (self.counts(), &self.output_u_sum);
        (0..c.rows())
            .map(|r| crate::network::predict_label(c.row(r), u.row(r)))
            .collect()
    }

    /// End-of-window `W2`, `W3` and last `ΔW2` of `layer`.
    pub fn plastic_state(&self, layer: usize) -> (&DenseMatrix, &DenseMatrix, &DenseMatrix) {
        let p = self.plastic[layer];
        (&self.values[p.w2], &self.values[p.w3], &self.values[p.dw2])
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Vec<DenseMatrix> {
        let mut out: Vec<DenseMatrix> = Vec::with_capacity(self.values.len());
        for (node, recorded) in self.nodes.iter().zip(&self.values) {
            let v = match node.op {
                Op::Leaf { .. } => recorded.clone(),
                ref op => self.eval(op, &out),
            };
            out.push(v);
        }
        out
    }
}

/// Records one window for a batch `x: [B × input]` with labels.
pub fn record_forward(net: &Network, x: &DenseMatrix, labels: &[usize], timesteps: usize) -> Result<Tape> {
    record_forward_with(net, x, labels, timesteps, RecordOptions::default())
}

pub fn record_forward_with(
    net: &Network,
    x: &DenseMatrix,
    labels: &[usize],
    timesteps: usize,
    opts: RecordOptions,
) -> Result<Tape> {
    if x.cols() != net.input_dim() {
        return Err(Error::shape("record_forward", net.input_dim(), x.cols()));
    }
    if x.rows() != labels.len() || labels.is_empty() {
        return Err(Error::shape("record_forward labels", x.rows(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= net.num_classes()) {
        return Err(Error::Config(format!(
            "label {bad} out of range for {} classes",
            net.num_classes()
        )));
    }
    if timesteps == 0 {
        return Err(Error::Config("timesteps must be >= 1".into()));
    }

    let lif = net.lif;
    let decay = net.sbp.decay(lif.dt);
    let old_coef = net.delta_mode.old_coefficient(decay);
    let b = x.rows();
    let n_layers = net.layers.len();
    let mut tape = Tape::new(lif, decay, opts.spike);
    tape.layer_sizes = net.sizes();

    let input = tape.leaf(x.clone(), None);
    let lambda_f = tape.leaf(DenseMatrix::scalar(net.sbp.lambda_f), Some(Param::LambdaF));
    let lambda_p = tape.leaf(DenseMatrix::scalar(net.sbp.lambda_p), Some(Param::LambdaP));

    struct LayerNodes {
        w1: NodeId,
        lambda: NodeId,
        eta: NodeId,
        beta: NodeId,
        w2: NodeId,
        w3: NodeId,
        dw2: NodeId,
        u: NodeId,
        s: NodeId,
    }
    let mut ln: Vec<LayerNodes> = Vec::with_capacity(n_layers);
    for (l, layer) in net.layers.iter().enumerate() {
        let w1 = tape.leaf(layer.w1.clone(), Some(Param::W1(l)));
        let lambda = tape.leaf(
            DenseMatrix::from_vec(1, 3, layer.lambda.to_vec())?,
            Some(Param::Lambda(l)),
        );
        let eta = tape.leaf(DenseMatrix::scalar(layer.eta), Some(Param::Eta(l)));
        let beta = tape.leaf(DenseMatrix::scalar(layer.beta), Some(Param::Beta(l)));
        let w2 = tape.leaf(layer.w2.clone(), None);
        let w3 = tape.leaf(layer.w3.clone(), None);
        let dw2 = tape.leaf(layer.dw2_last.clone(), None);
        let rest = tape.leaf(DenseMatrix::zeros(b, layer.fan_out()), None);
        ln.push(LayerNodes {
            w1,
            lambda,
            eta,
            beta,
            w2,
            w3,
            dw2,
            u: rest,
            s: rest,
        });
    }

    let mut output_spikes = Vec::with_capacity(timesteps);
    let mut u_sum = DenseMatrix::zeros(b, net.num_classes());
    for t in 0..timesteps {
        let mut below = input;
        for l in 0..n_layers {
            let n = &ln[l];
            let i = tape.push(Op::Fuse {
                s: below,
                w: [n.w1, n.w2, n.w3],
                lambda: n.lambda,
            });
            let u = tape.push(Op::Membrane {
                u_prev: n.u,
                s_prev: n.s,
                input: i,
            });
            let s = tape.push(Op::Spike { u });
            tape.events.push(Event::Forward { t, layer: l });

            let w2 = tape.push(Op::Hebbian {
                w_prev: n.w2,
                s: below,
                u,
                eta: n.eta,
                beta: n.beta,
            });
            let dw2 = tape.push(Op::Delta {
                new: w2,
                old: n.w2,
                old_coef,
            });
            tape.events.push(Event::Hebbian { t, layer: l });

            let n = &mut ln[l];
            n.u = u;
            n.s = s;
            n.w2 = w2;
            n.dw2 = dw2;
            below = s;
        }
        for l in (0..n_layers).rev() {
            let next_delta = ln.get(l + 1).map(|n| n.dw2);
            let diag = tape.push(Op::Modulation {
                next_delta,
                lambda_f,
                lambda_p,
                len: net.layers[l].fan_out(),
            });
            let w3 = tape.push(Op::Sbp {
                w_prev: ln[l].w3,
                diag,
                delta: ln[l].dw2,
            });
            ln[l].w3 = w3;
            tape.events.push(Event::Sbp { t, layer: l });
        }
        let top = &ln[n_layers - 1];
        output_spikes.push(top.s);
        u_sum.axpy(1.0, &tape.values[top.u]);
    }
    tape.counts = tape.push(Op::SpikeCount {
        spikes: output_spikes,
    });
    tape.loss = tape.push(Op::SoftmaxXent {
        logits: tape.counts,
        labels: labels.to_vec(),
    });
    tape.output_u_sum = u_sum;
    tape.plastic = ln
        .iter()
        .map(|n| PlasticNodes {
            w2: n.w2,
            w3: n.w3,
            dw2: n.dw2,
        })
        .collect();
    Ok(tape)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub w1: DenseMatrix,
    pub lambda: [f64; 3],
    pub eta: f64,
    pub beta: f64,
}

/// Gradients of the loss for every gradient-trained parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrads>,
    pub lambda_f: f64,
    pub lambda_p: f64,
}

impl GradientSet {
    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            layers: sizes
                .windows(2)
                .map(|p| LayerGrads {
                    w1: DenseMatrix::zeros(p[1], p[0]),
                    lambda: [0.0; 3],
                    eta: 0.0,
                    beta: 0.0,
                })
                .collect(),
            lambda_f: 0.0,
            lambda_p: 0.0,
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &GradientSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w1.axpy(alpha, &b.w1);
            for k in 0..3 {
                a.lambda[k] += alpha * b.lambda[k];
            }
            a.eta += alpha * b.eta;
            a.beta += alpha * b.beta;
        }
        self.lambda_f += alpha * other.lambda_f;
        self.lambda_p += alpha * other.lambda_p;
    }

    /// Every scalar with its parameter group and a readable name.
    pub fn entries(&self) -> Vec<(ParamGroup, String, f64)> {
        let mut out = Vec::new();
        for (l, g) in self.layers.iter().enumerate() {
            let cols = g.w1.cols();
            for (k, &v) in g.w1.as_slice().iter().enumerate() {
                out.push((ParamGroup::W1, format!("w1[{l}][{},{}]", k / cols, k % cols), v));
            }
            for (k, &v) in g.lambda.iter().enumerate() {
                out.push((ParamGroup::Lambda, format!("lambda[{l}][{k}]"), v));
            }
            out.push((ParamGroup::Eta, format!("eta[{l}]"), g.eta));
            out.push((ParamGroup::Beta, format!("beta[{l}]"), g.beta));
        }
        out.push((ParamGroup::LambdaF, "lambda_f".into(), self.lambda_f));
        out.push((ParamGroup::LambdaP, "lambda_p".into(), self.lambda_p));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|(_, _, v)| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    W1,
    Lambda,
    Eta,
    Beta,
    LambdaF,
    LambdaP,
}

impl std::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ParamGroup::W1 => "W1",
            ParamGroup::Lambda => "lambda",
            ParamGroup::Eta => "eta",
            ParamGroup::Beta => "beta",
            ParamGroup::LambdaF => "lambda_f",
            ParamGroup::LambdaP => "lambda_p",
        };
        f.write_str(s)
    }
}

fn accumulate(adj: &mut [Option<DenseMatrix>], id: NodeId, alpha: f64, g: &DenseMatrix) {
    match &mut adj[id] {
        Some(a) => a.axpy(alpha, g),
        slot @ None => *slot = Some(if alpha == 1.0 { g.clone() } else { g.scaled(alpha) }),
    }
}

fn accumulate_owned(adj: &mut [Option<DenseMatrix>], id: NodeId, g: DenseMatrix) {
    match &mut adj[id] {
        Some(a) => a.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_scalar(adj: &mut [Option<DenseMatrix>], id: NodeId, g: f64) {
    match &mut adj[id] {
        Some(a) => a.as_mut_slice()[0] += g,
        slot @ None => *slot = Some(DenseMatrix::scalar(g)),
    }
}

/// Reverse sweep from the loss, scaled by `loss_grad`.
pub fn backward(tape: &Tape, loss_grad: f64) -> GradientSet {
    let n = tape.nodes.len();
    let vals = &tape.values;
    let lif = tape.lif;
    let decay = tape.decay;
    let mut adj: Vec<Option<DenseMatrix>> = vec![None; n];
    adj[tape.loss] = Some(DenseMatrix::scalar(loss_grad));
    let rg = |id: NodeId| tape.nodes[id].requires_grad;

    for id in (0..n).rev() {
        if !tape.nodes[id].requires_grad {
            continue;
        }
        if matches!(tape.nodes[id].op, Op::Leaf { .. }) {
            continue;
        }
        let Some(g) = adj[id].take() else { continue };
        match &tape.nodes[id].op {
            Op::Leaf { .. } => unreachable!(),
            Op::Fuse { s, w, lambda } => {
                let sv = &vals[*s];
                let lam = vals[*lambda].as_slice();
                let need_outer = w.iter().any(|&wi| rg(wi)) || rg(*lambda);
                if need_outer {
                    let mut outer = DenseMatrix::zeros(g.cols(), sv.cols());
                    gemm(1.0, &g, Trans::Yes, sv, Trans::No, 0.0, &mut outer);
                    if rg(*lambda) {
                        let gl: Vec<f64> = w.iter().map(|&wi| outer.dot(&vals[wi])).collect();
                        accumulate_owned(&mut adj, *lambda, DenseMatrix::from_vec(1, 3, gl).unwrap());
                    }
                    for (k, &wi) in w.iter().enumerate() {
                        if rg(wi) {
                            accumulate(&mut adj, wi, lam[k], &outer);
                        }
                    }
                }
                if rg(*s) {
                    let mut merged = vals[w[0]].scaled(lam[0]);
                    merged.axpy(lam[1], &vals[w[1]]);
                    merged.axpy(lam[2], &vals[w[2]]);
                    let mut gs = DenseMatrix::zeros(g.rows(), merged.cols());
                    gemm(1.0, &g, Trans::No, &merged, Trans::No, 0.0, &mut gs);
                    accumulate_owned(&mut adj, *s, gs);
                }
            }
            Op::Membrane { u_prev, s_prev, input } => {
                if rg(*u_prev) {
                    accumulate(&mut adj, *u_prev, lif.rho_m, &g);
                }
                if rg(*s_prev) {
                    accumulate(&mut adj, *s_prev, -lif.rho_m * lif.v_th, &g);
                }
                if rg(*input) {
                    accumulate_owned(&mut adj, *input, g);
                }
            }
            Op::Spike { u } => {
                if rg(*u) {
                    let gu = match tape.spike {
                        SpikeKind::Heaviside => {
                            let uv = &vals[*u];
                            let data = g
                                .as_slice()
                                .iter()
                                .zip(uv.as_slice())
                                .map(|(&g, &x)| g * lif.surrogate(x))
                                .collect();
                            DenseMatrix::from_vec(g.rows(), g.cols(), data).unwrap()
                        }
                        SpikeKind::Identity => g,
                    };
                    accumulate_owned(&mut adj, *u, gu);
                }
            }
            Op::Hebbian { w_prev, s, u, eta, beta } => {
                if rg(*w_prev) {
                    accumulate(&mut adj, *w_prev, decay, &g);
                }
                let sv = &vals[*s];
                let uv = &vals[*u];
                let eta_v = vals[*eta].item();
                let beta_v = vals[*beta].item();
                let bsz = sv.rows() as f64;
                let needs_m = rg(*eta) || rg(*beta) || rg(*u);
                if needs_m {
                    // m[b,j] = Σ_i g[j,i] s[b,i]
                    let mut m = DenseMatrix::zeros(sv.rows(), g.rows());
                    gemm(1.0, sv, Trans::No, &g, Trans::Yes, 0.0, &mut m);
                    if rg(*eta) {
                        let ge: f64 = m
                            .as_slice()
                            .iter()
                            .zip(uv.as_slice())
                            .map(|(&mv, &x)| mv * (rho(x) + beta_v))
                            .sum();
                        accumulate_scalar(&mut adj, *eta, ge / bsz);
                    }
                    if rg(*beta) {
                        accumulate_scalar(&mut adj, *beta, eta_v * m.sum() / bsz);
                    }
                    if rg(*u) {
                        let scale = eta_v / bsz;
                        let data = m
                            .as_slice()
                            .iter()
                            .zip(uv.as_slice())
                            .map(|(&mv, &x)| scale * rho_prime(x) * mv)
                            .collect();
                        accumulate_owned(
                            &mut adj,
                            *u,
                            DenseMatrix::from_vec(m.rows(), m.cols(), data).unwrap(),
                        );
                    }
                }
                if rg(*s) {
                    let post = uv.map(|x| rho(x) + beta_v);
                    let mut gs = DenseMatrix::zeros(sv.rows(), sv.cols());
                    gemm(eta_v / bsz, &post, Trans::No, &g, Trans::No, 0.0, &mut gs);
                    accumulate_owned(&mut adj, *s, gs);
                }
            }
            Op::Delta { new, old, old_coef } => {
                if rg(*old) {
                    accumulate(&mut adj, *old, -old_coef, &g);
                }
                if rg(*new) {
                    accumulate_owned(&mut adj, *new, g);
                }
            }
            Op::Modulation { next_delta, lambda_f, lambda_p, .. } => {
                let lf = vals[*lambda_f].item();
                let lp = vals[*lambda_p].item();
                let gd = g.as_slice();
                let normalized = next_delta.and_then(|a| {
                    let cs = crate::numerics::colsum(&vals[a]);
                    let nz = crate::numerics::normalize_simplex(&cs);
                    (!nz.degenerate).then(|| (a, nz.values, cs.sum()))
                });
                match normalized {
                    None => {
                        if rg(*lambda_f) {
                            accumulate_scalar(&mut adj, *lambda_f, gd.iter().sum());
                        }
                    }
                    Some((a, nv, total)) => {
                        let nv = nv.as_slice();
                        if rg(*lambda_f) {
                            let v: f64 = gd.iter().zip(nv).map(|(g, n)| g * (1.0 + lp * n)).sum();
                            accumulate_scalar(&mut adj, *lambda_f, v);
                        }
                        if rg(*lambda_p) {
                            let v: f64 = gd.iter().zip(nv).map(|(g, n)| g * lf * n).sum();
                            accumulate_scalar(&mut adj, *lambda_p, v);
                        }
                        if rg(a) {
                            let gn: Vec<f64> = gd.iter().map(|g| g * lf * lp).collect();
                            let proj: f64 = gn.iter().zip(nv).map(|(g, n)| g * n).sum();
                            let gc: Vec<f64> = gn.iter().map(|g| (g - proj) / total).collect();
                            let av = &vals[a];
                            let mut ga = DenseMatrix::zeros(av.rows(), av.cols());
                            for r in 0..av.rows() {
                                ga.row_mut(r).copy_from_slice(&gc);
                            }
                            accumulate_owned(&mut adj, a, ga);
                        }
                    }
                }
            }
            Op::Sbp { w_prev, diag, delta } => {
                if rg(*w_prev) {
                    accumulate(&mut adj, *w_prev, decay, &g);
                }
                let dv = &vals[*delta];
                if rg(*diag) {
                    let gd: Vec<f64> = (0..g.rows())
                        .map(|j| g.row(j).iter().zip(dv.row(j)).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate_owned(&mut adj, *diag, DenseMatrix::from_vec(1, gd.len(), gd).unwrap());
                }
                if rg(*delta) {
                    let dg = vals[*diag].as_slice();
                    let mut gdelta = g;
                    for (j, &m) in dg.iter().enumerate() {
                        gdelta.row_mut(j).iter_mut().for_each(|v| *v *= m);
                    }
                    accumulate_owned(&mut adj, *delta, gdelta);
                }
            }
            Op::SpikeCount { spikes } => {
                for &s in spikes {
                    if rg(s) {
                        accumulate(&mut adj, s, 1.0, &g);
                    }
                }
            }
            Op::SoftmaxXent { logits, labels } => {
                if rg(*logits) {
                    let z = &vals[*logits];
                    let scale = g.item() / labels.len() as f64;
                    let mut gz = DenseMatrix::zeros(z.rows(), z.cols());
                    for (b, &y) in labels.iter().enumerate() {
                        let row = z.row(b);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for (c, o) in gz.row_mut(b).iter_mut().enumerate() {
                            let p = (row[c] - max).exp() / denom;
                            *o = scale * (p - if c == y { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate_owned(&mut adj, *logits, gz);
                }
            }
        }
    }

    let mut grads = GradientSet::zeros(&tape.layer_sizes);
    for &(param, id) in &tape.params {
        let Some(g) = adj[id].as_ref() else { continue };
        match param {
            Param::W1(l) => grads.layers[l].w1 = g.clone(),
            Param::Lambda(l) => grads.layers[l].lambda.copy_from_slice(g.as_slice()),
            Param::Eta(l) => grads.layers[l].eta = g.item(),
            Param::Beta(l) => grads.layers[l].beta = g.item(),
            Param::LambdaF => grads.lambda_f = g.item(),
            Param::LambdaP => grads.lambda_p = g.item(),
        }
    }
    grads
}
