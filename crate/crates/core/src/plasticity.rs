//! Local (non-gradient) plasticity for the second and third weight paths and
//! the inference-time merge of all three paths.
//!
//! `W2` follows a decaying Hebbian rule driven by presynaptic spikes and a
//! bounded function of the postsynaptic potential. `W3` follows a
//! self-backpropagation rule: it accumulates this layer's own `ΔW2`, row-scaled
//! by a modulation vector built from the column totals of the next layer's
//! `ΔW2`.

use crate::error::{Error, Result};
use crate::numerics::{
    colsum, gemm, normalize_simplex, DenseMatrix, DenseVector, Normalized, Trans,
};

/// Bounded nonlinearity applied to postsynaptic potentials (logistic sigmoid).
#[inline]
pub fn rho(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Derivative of [`rho`].
#[inline]
pub fn rho_prime(x: f64) -> f64 {
    let s = rho(x);
    s * (1.0 - s)
}

/// What counts as the Hebbian weight change handed to the SBP rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeltaMode {
    /// `ΔW2 = W2_new − W2_old`, decay included.
    #[default]
    Full,
    /// `ΔW2 = W2_new − decay·W2_old`, the Hebbian increment alone.
    Increment,
}

impl DeltaMode {
    /// Coefficient on `W2_old` in the difference.
    pub fn old_coefficient(self, decay: f64) -> f64 {
        match self {
            DeltaMode::Full => 1.0,
            DeltaMode::Increment => decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SbpParams {
    pub lambda_f: f64,
    pub lambda_p: f64,
    /// Weight time constant shared by the Hebbian and SBP decay terms.
    pub tau_w: f64,
}

pub const FRACTION_MIN: f64 = 0.1;
pub const FRACTION_MAX: f64 = 1.0;

impl Default for SbpParams {
    fn default() -> Self {
        Self {
            lambda_f: 0.5,
            lambda_p: 0.5,
            tau_w: 40.0,
        }
    }
}

impl SbpParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_f", self.lambda_f), ("lambda_p", self.lambda_p)] {
            if !(FRACTION_MIN..=FRACTION_MAX).contains(&v) {
                return Err(Error::Config(format!(
                    "sbp.{name} must lie in [0.1, 1], got {v}"
                )));
            }
        }
        if !(self.tau_w > 0.0) {
            return Err(Error::Config(format!(
                "sbp.tau_w must be > 0, got {}",
                self.tau_w
            )));
        }
        Ok(())
    }

    /// `e^{−dt/τ_w}`
    pub fn decay(&self, dt: f64) -> f64 {
        (-dt / self.tau_w).exp()
    }

    /// Clamp both fraction factors back into `[0.1, 1]`.
    pub fn project(&mut self) {
        self.lambda_f = self.lambda_f.clamp(FRACTION_MIN, FRACTION_MAX);
        self.lambda_p = self.lambda_p.clamp(FRACTION_MIN, FRACTION_MAX);
    }
}

/// One fully-connected layer carrying a weight matrix per plasticity mechanism.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiPathLayer {
    /// Gradient-trained path.
    pub w1: DenseMatrix,
    /// Hebbian path.
    pub w2: DenseMatrix,
    /// Self-backpropagation path.
    pub w3: DenseMatrix,
    pub lambda: [f64; 3],
    /// Local learning rate of the Hebbian rule.
    pub eta: f64,
    /// Sliding threshold of the Hebbian rule.
    pub beta: f64,
    /// Most recent `ΔW2`.
    pub dw2_last: DenseMatrix,
}

impl MultiPathLayer {
    pub fn from_parts(
        w1: DenseMatrix,
        w2: DenseMatrix,
        w3: DenseMatrix,
        lambda: [f64; 3],
        eta: f64,
        beta: f64,
    ) -> Result<Self> {
        if w1.shape() != w2.shape() || w1.shape() != w3.shape() {
            return Err(Error::shape(
                "MultiPathLayer",
                format!("{:?}", w1.shape()),
                format!("{:?} / {:?}", w2.shape(), w3.shape()),
            ));
        }
        let dw2_last = DenseMatrix::zeros(w1.rows(), w1.cols());
        Ok(Self {
            w1,
            w2,
            w3,
            lambda,
            eta,
            beta,
            dw2_last,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.w1.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.w1.rows()
    }

    pub fn weights(&self) -> [&DenseMatrix; 3] {
        [&self.w1, &self.w2, &self.w3]
    }
}

/// Batch-mean Hebbian increment `(η/B) Σ_b (ρ(U_b) + β) ⊗ s_b`.
///
/// `s_in` is `[B × fan_in]`, `u` is `[B × fan_out]`; result is `[fan_out × fan_in]`.
pub fn hebbian_increment(s_in: &DenseMatrix, u: &DenseMatrix, eta: f64, beta: f64) -> DenseMatrix {
    assert_eq!(s_in.rows(), u.rows(), "hebbian batch size");
    let post = u.map(|x| rho(x) + beta);
    let mut out = DenseMatrix::zeros(u.cols(), s_in.cols());
    let b = s_in.rows().max(1) as f64;
    gemm(eta / b, &post, Trans::Yes, s_in, Trans::No, 0.0, &mut out);
    out
}

/// `decay·W2_prev + hebbian_increment(..)`
pub fn hebbian_step(
    w_prev: &DenseMatrix,
    s_in: &DenseMatrix,
    u: &DenseMatrix,
    eta: f64,
    beta: f64,
    decay: f64,
) -> DenseMatrix {
    let mut out = hebbian_increment(s_in, u, eta, beta);
    out.axpy(decay, w_prev);
    out
}

/// Applies the Hebbian rule to `layer.w2` for one sample and records `ΔW2`.
pub fn hebbian_update(
    layer: &mut MultiPathLayer,
    s_prev: &DenseVector,
    u: &DenseVector,
    params: &SbpParams,
    dt: f64,
    mode: DeltaMode,
) -> Result<()> {
    if s_prev.len() != layer.fan_in() {
        return Err(Error::shape("hebbian_update", layer.fan_in(), s_prev.len()));
    }
    if u.len() != layer.fan_out() {
        return Err(Error::shape("hebbian_update", layer.fan_out(), u.len()));
    }
    let decay = params.decay(dt);
    let new = hebbian_step(
        &layer.w2,
        &DenseMatrix::row_vector(s_prev),
        &DenseMatrix::row_vector(u),
        layer.eta,
        layer.beta,
        decay,
    );
    let mut delta = new.clone();
    delta.axpy(-mode.old_coefficient(decay), &layer.w2);
    layer.w2 = new;
    layer.dw2_last = delta;
    Ok(())
}

/// Diagonal of the SBP modulation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Modulation {
    pub diag: DenseVector,
    /// Column totals of the next layer's `ΔW2` summed to ~0, so the
    /// normalized signal was dropped.
    pub degenerate: bool,
}

/// `λ_f·(1 + λ_p·δ_n(colsum(A)))`, or `λ_f·1` when `A` is absent (top layer)
/// or its column totals are degenerate.
///
/// `len` is the fan-out of the layer being modulated.
pub fn modulation_diag(
    next_delta: Option<&DenseMatrix>,
    len: usize,
    lambda_f: f64,
    lambda_p: f64,
) -> Result<Modulation> {
    let Some(a) = next_delta else {
        return Ok(Modulation {
            diag: DenseVector::filled(len, lambda_f),
            degenerate: false,
        });
    };
    if a.cols() != len {
        return Err(Error::shape("sbp_modulation", len, a.cols()));
    }
    let Normalized { values, degenerate } = normalize_simplex(&colsum(a));
    let diag = values
        .iter()
        .map(|n| lambda_f * (1.0 + lambda_p * n))
        .collect::<Vec<_>>()
        .into();
    Ok(Modulation { diag, degenerate })
}

pub fn sbp_modulation(
    next_delta: Option<&DenseMatrix>,
    len: usize,
    params: &SbpParams,
) -> Result<Modulation> {
    modulation_diag(next_delta, len, params.lambda_f, params.lambda_p)
}

/// `decay·W3_prev + diag(m)·ΔW2`
pub fn sbp_step(
    w3_prev: &DenseMatrix,
    diag: &[f64],
    dw2: &DenseMatrix,
    decay: f64,
) -> DenseMatrix {
    assert_eq!(diag.len(), dw2.rows(), "sbp modulation length");
    let mut out = w3_prev.scaled(decay);
    for (j, &m) in diag.iter().enumerate() {
        for (o, d) in out.row_mut(j).iter_mut().zip(dw2.row(j)) {
            *o += m * d;
        }
    }
    out
}

/// Applies the SBP rule to `layer.w3` using the layer's own `dw2_last` and the
/// next layer's `ΔW2` (absent for the top layer).
pub fn sbp_update(
    layer: &mut MultiPathLayer,
    next_delta: Option<&DenseMatrix>,
    params: &SbpParams,
    dt: f64,
) -> Result<Modulation> {
    let m = sbp_modulation(next_delta, layer.fan_out(), params)?;
    layer.w3 = sbp_step(&layer.w3, m.diag.as_slice(), &layer.dw2_last, params.decay(dt));
    Ok(m)
}

/// `Σ_i λ_i·W_i`, the single matrix used for deployment.
pub fn merge_weights(layer: &MultiPathLayer) -> DenseMatrix {
    let mut out = layer.w1.scaled(layer.lambda[0]);
    out.axpy(layer.lambda[1], &layer.w2);
    out.axpy(layer.lambda[2], &layer.w3);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::fused_input;
    use crate::numerics::{kaiming_uniform_init, matvec, SeededRng};
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DenseVector {
        DenseVector::from(x)
    }

    fn zero_layer(out: usize, inp: usize) -> MultiPathLayer {
        let z = DenseMatrix::zeros(out, inp);
        MultiPathLayer::from_parts(z.clone(), z.clone(), z, [1.0 / 3.0; 3], 0.01, 0.0).unwrap()
    }

    /// Inverse logistic, so tests can pin ρ(U) to chosen values.
    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn hebbian_outer_product_example() {
        let mut l = zero_layer(2, 2);
        let params = SbpParams::default();
        let u = v(&[logit(0.6), logit(0.4)]);
        hebbian_update(&mut l, &v(&[1.0, 0.0]), &u, &params, 1.0, DeltaMode::Full).unwrap();
        let want = DenseMatrix::from_rows(&[&[0.006, 0.0], &[0.004, 0.0]]);
        assert!(l.w2.max_abs_diff(&want) < 1e-15);
        assert!(l.dw2_last.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn hebbian_without_presynaptic_activity_is_pure_decay() {
        let mut l = zero_layer(3, 2);
        l.w2 = DenseMatrix::from_rows(&[&[1.0, -2.0], &[0.5, 0.25], &[3.0, 0.0]]);
        let before = l.w2.clone();
        let params = SbpParams::default();
        hebbian_update(
            &mut l,
            &v(&[0.0, 0.0]),
            &v(&[0.1, 0.9, -3.0]),
            &params,
            1.0,
            DeltaMode::Full,
        )
        .unwrap();
        let d = params.decay(1.0);
        assert_eq!(l.w2, before.scaled(d));
    }

    #[test]
    fn decay_factors() {
        let p40 = SbpParams {
            tau_w: 40.0,
            ..SbpParams::default()
        };
        assert!((p40.decay(1.0) - 0.975310).abs() < 1e-6);
        let p200 = SbpParams {
            tau_w: 200.0,
            ..SbpParams::default()
        };
        assert!((p200.decay(1.0) - 0.995012).abs() < 1e-6);
    }

    #[test]
    fn increment_mode_excludes_decay() {
        let mut l = zero_layer(1, 1);
        l.w2 = DenseMatrix::from_rows(&[&[2.0]]);
        let params = SbpParams::default();
        hebbian_update(&mut l, &v(&[0.0]), &v(&[0.0]), &params, 1.0, DeltaMode::Increment)
            .unwrap();
        assert_eq!(l.dw2_last[(0, 0)], 0.0);
        let mut l2 = zero_layer(1, 1);
        l2.w2 = DenseMatrix::from_rows(&[&[2.0]]);
        hebbian_update(&mut l2, &v(&[0.0]), &v(&[0.0]), &params, 1.0, DeltaMode::Full).unwrap();
        assert!((l2.dw2_last[(0, 0)] - 2.0 * (params.decay(1.0) - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn modulation_examples() {
        let params = SbpParams {
            lambda_f: 0.5,
            lambda_p: 0.5,
            tau_w: 40.0,
        };
        let a = DenseMatrix::from_rows(&[&[1.0, 1.0], &[3.0, 1.0]]);
        let m = sbp_modulation(Some(&a), 2, &params).unwrap();
        assert!((m.diag[0] - 0.66667).abs() < 1e-5);
        assert!((m.diag[1] - 0.58333).abs() < 1e-5);

        let no_p = SbpParams {
            lambda_p: 0.0,
            ..params
        };
        let m = sbp_modulation(Some(&a), 2, &no_p).unwrap();
        assert_eq!(m.diag, v(&[0.5, 0.5]));

        let top = sbp_modulation(None, 3, &params).unwrap();
        assert_eq!(top.diag, v(&[0.5, 0.5, 0.5]));
    }

    #[test]
    fn degenerate_modulation_falls_back_to_lambda_f() {
        let params = SbpParams::default();
        let a = DenseMatrix::from_rows(&[&[1.0, -1.0], &[-1.0, 1.0]]);
        let m = sbp_modulation(Some(&a), 2, &params).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.diag, v(&[params.lambda_f, params.lambda_f]));
    }

    #[test]
    fn modulation_shape_mismatch_is_an_error() {
        let a = DenseMatrix::zeros(4, 3);
        assert!(sbp_modulation(Some(&a), 2, &SbpParams::default()).is_err());
    }

    #[test]
    fn sbp_examples() {
        let params = SbpParams::default();
        let mut l = zero_layer(2, 2);
        l.w3 = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let before = l.w3.clone();
        sbp_update(&mut l, None, &params, 1.0).unwrap();
        assert_eq!(l.w3, before.scaled(params.decay(1.0)));

        let out = sbp_step(
            &DenseMatrix::zeros(2, 2),
            &[0.66667, 0.58333],
            &DenseMatrix::identity(2),
            params.decay(1.0),
        );
        assert_eq!(out, DenseMatrix::from_rows(&[&[0.66667, 0.0], &[0.0, 0.58333]]));
    }

    #[test]
    fn merge_examples() {
        let m = DenseMatrix::from_rows(&[&[0.2, -0.7], &[1.1, 0.4]]);
        let third = 1.0 / 3.0;
        let l = MultiPathLayer::from_parts(m.clone(), m.clone(), m.clone(), [third; 3], 0.0, 0.0)
            .unwrap();
        assert!(merge_weights(&l).max_abs_diff(&m) < 1e-15);

        let mut l = zero_layer(2, 2);
        l.w1 = m.clone();
        l.w2 = DenseMatrix::filled(2, 2, 9.0);
        l.lambda = [1.0, 0.0, 0.0];
        assert_eq!(merge_weights(&l), m);

        let one = |x: f64| DenseMatrix::from_rows(&[&[x]]);
        let l = MultiPathLayer::from_parts(one(1.0), one(2.0), one(3.0), [0.5, 0.3, 0.2], 0.0, 0.0)
            .unwrap();
        assert!((merge_weights(&l)[(0, 0)] - 1.7).abs() < 1e-15);
    }

    #[test]
    fn hebbian_decay_fixed_point() {
        let mut rng = SeededRng::new(8);
        let mut l = zero_layer(3, 4);
        l.w2 = kaiming_uniform_init(&mut rng, 4, 3, 4).unwrap();
        let w0 = l.w2.clone();
        let params = SbpParams::default();
        let k = 25;
        for _ in 0..k {
            hebbian_update(&mut l, &DenseVector::zeros(4), &v(&[0.3, -0.2, 1.0]), &params, 1.0, DeltaMode::Full)
                .unwrap();
        }
        let want = w0.scaled((-(k as f64) / params.tau_w).exp());
        assert!(l.w2.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn from_parts_rejects_mismatched_shapes() {
        let r = MultiPathLayer::from_parts(
            DenseMatrix::zeros(2, 2),
            DenseMatrix::zeros(2, 3),
            DenseMatrix::zeros(2, 2),
            [1.0, 0.0, 0.0],
            0.0,
            0.0,
        );
        assert!(r.is_err());
    }

    proptest! {
        #[test]
        fn merged_matvec_equals_fused_input(
            w in prop::collection::vec(-1.0f64..1.0, 36),
            lambda in prop::array::uniform3(-1.0f64..1.0),
            x in prop::collection::vec(0.0f64..1.0, 4),
        ) {
            let m = |k: usize| DenseMatrix::from_vec(3, 4, w[k * 12..(k + 1) * 12].to_vec()).unwrap();
            let l = MultiPathLayer::from_parts(m(0), m(1), m(2), lambda, 0.01, 0.0).unwrap();
            let x = DenseVector::from(x);
            let merged = matvec(&merge_weights(&l), &x).unwrap();
            let fused = fused_input(&l, &x).unwrap();
            for j in 0..3 {
                prop_assert!((merged[j] - fused[j]).abs() <= 1e-9);
            }
        }

        #[test]
        fn modulation_within_bounds_for_nonnegative_totals(
            a in prop::collection::vec(0.0f64..5.0, 12),
            lf in 0.1f64..1.0, lp in 0.1f64..1.0,
        ) {
            let a = DenseMatrix::from_vec(3, 4, a).unwrap();
            let m = modulation_diag(Some(&a), 4, lf, lp).unwrap();
            for &d in m.diag.iter() {
                prop_assert!(d >= lf - 1e-15 && d <= lf * (1.0 + lp) + 1e-15);
            }
        }
    }
}
