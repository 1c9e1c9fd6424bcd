//! Randomized comparison of [`backward`] against [`reference_gradients`].

use std::collections::BTreeMap;

use crate::error::Result;
use crate::network::Network;
use crate::neuron::LifConfig;
use crate::numerics::{DenseMatrix, SeededRng};
use crate::plasticity::{MultiPathLayer, SbpParams};
use crate::reference::reference_gradients;
use crate::tape::{backward, record_forward, GradientSet, ParamGroup};

pub const GRADCHECK_TOLERANCE: f64 = 1e-6;
/// Denominator floor so near-zero gradients are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;
pub const GRADCHECK_TIMESTEPS: usize = 3;

/// `|a − b| / max(|a|, |b|, RELATIVE_FLOOR)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub trial: usize,
    pub seed: u64,
    pub name: String,
    pub tape: f64,
    pub reference: f64,
    pub error: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub trials: usize,
    /// Largest relative error per parameter group.
    pub group_max: BTreeMap<ParamGroup, f64>,
    /// The single worst entry over all trials.
    pub worst: Option<Mismatch>,
    /// First trial whose worst entry exceeded the tolerance.
    pub first_failure: Option<Mismatch>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }
}

/// A random two-layer network with at most 8 neurons per layer, sized so
/// most membrane potentials land inside the surrogate window.
pub fn random_small_network(rng: &mut SeededRng) -> Network {
    let sizes = [2 + rng.below(5), 2 + rng.below(7), 2 + rng.below(3)];
    let lif = LifConfig::default();
    let sbp = SbpParams {
        lambda_f: rng.uniform(0.1, 1.0),
        lambda_p: rng.uniform(0.1, 1.0),
        tau_w: 40.0,
    };
    let mut layers = Vec::new();
    for p in sizes.windows(2) {
        let (fan_in, fan_out) = (p[0], p[1]);
        let mut mat = |lo: f64, hi: f64| {
            let d = (0..fan_in * fan_out).map(|_| rng.uniform(lo, hi)).collect();
            DenseMatrix::from_vec(fan_out, fan_in, d).unwrap()
        };
        let w1 = mat(-1.0, 1.0);
        let w2 = mat(-0.5, 0.5);
        let w3 = mat(-0.5, 0.5);
        let lambda = [rng.uniform(0.1, 0.8), rng.uniform(0.1, 0.8), rng.uniform(0.1, 0.8)];
        let eta = rng.uniform(0.05, 0.5);
        let beta = rng.uniform(-0.5, 0.5);
        layers.push(MultiPathLayer::from_parts(w1, w2, w3, lambda, eta, beta).unwrap());
    }
    Network {
        layers,
        sbp,
        lif,
        delta_mode: Default::default(),
    }
}

fn compare(tape: &GradientSet, reference: &GradientSet) -> Vec<(ParamGroup, String, f64, f64, f64)> {
    tape.entries()
        .into_iter()
        .zip(reference.entries())
        .map(|((g, name, a), (_, _, b))| (g, name, a, b, relative_error(a, b)))
        .collect()
}

/// Runs `trials` independent comparisons. With `corrupt_surrogate` the tape's
/// backward pass uses a surrogate window 1.5× too wide (a negative control).
pub fn run_gradcheck(seed: u64, trials: usize, corrupt_surrogate: bool) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        trials,
        group_max: BTreeMap::new(),
        worst: None,
        first_failure: None,
    };
    for trial in 0..trials {
        let trial_seed = seed.wrapping_add(trial as u64);
        let mut rng = SeededRng::new(trial_seed);
        let net = random_small_network(&mut rng);
        let x = DenseMatrix::from_vec(
            1,
            net.input_dim(),
            (0..net.input_dim()).map(|_| rng.uniform(0.0, 1.0)).collect(),
        )?;
        let labels = [rng.below(net.num_classes())];

        let mut tape = record_forward(&net, &x, &labels, GRADCHECK_TIMESTEPS)?;
        if corrupt_surrogate {
            let mut lif = *tape.lif();
            lif.a *= 1.5;
            tape.set_lif(lif);
        }
        let fast = backward(&tape, 1.0);
        let slow = reference_gradients(&net, &x, &labels, GRADCHECK_TIMESTEPS)?;

        let mut trial_worst: Option<Mismatch> = None;
        for (group, name, a, b, err) in compare(&fast, &slow) {
            let slot = report.group_max.entry(group).or_insert(0.0);
            *slot = slot.max(err);
            if trial_worst.as_ref().is_none_or(|w| err > w.error) {
                trial_worst = Some(Mismatch {
                    trial,
                    seed: trial_seed,
                    name,
                    tape: a,
                    reference: b,
                    error: err,
                });
            }
        }
        if let Some(w) = trial_worst {
            if w.error > GRADCHECK_TOLERANCE && report.first_failure.is_none() {
                report.first_failure = Some(w.clone());
            }
            if report.worst.as_ref().is_none_or(|cur| w.error > cur.error) {
                report.worst = Some(w);
            }
        }
    }
    Ok(report)
}
