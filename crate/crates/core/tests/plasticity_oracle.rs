use mpsl_core::numerics::{DenseMatrix, DenseVector, SeededRng};
use mpsl_core::plasticity::{hebbian_update, sbp_update, DeltaMode, MultiPathLayer, SbpParams};

type Rows = Vec<Vec<f64>>;

fn rand_rows(rng: &mut SeededRng, r: usize, c: usize) -> Rows {
    (0..r).map(|_| (0..c).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect()
}

fn to_dense(m: &Rows) -> DenseMatrix {
    let refs: Vec<&[f64]> = m.iter().map(|r| r.as_slice()).collect();
    DenseMatrix::from_rows(&refs)
}

fn max_diff(a: &DenseMatrix, b: &Rows) -> f64 {
    let mut worst = 0.0f64;
    for (j, row) in b.iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            worst = worst.max((a[(j, i)] - v).abs());
        }
    }
    worst
}

/// `W2[j][i] ← e^{−dt/τ}·W2[j][i] + η·s[i]·(1/(1+e^{−U[j]}) + β)`
fn hebbian_oracle(w2: &Rows, s: &[f64], u: &[f64], eta: f64, beta: f64, tau: f64, dt: f64) -> (Rows, Rows) {
    let d = (-dt / tau).exp();
    let mut new = w2.clone();
    let mut delta = w2.clone();
    for j in 0..w2.len() {
        for i in 0..w2[j].len() {
            new[j][i] = d * w2[j][i] + eta * s[i] * (1.0 / (1.0 + (-u[j]).exp()) + beta);
            delta[j][i] = new[j][i] - w2[j][i];
        }
    }
    (new, delta)
}

/// `W3[j][i] ← e^{−dt/τ}·W3[j][i] + m[j]·ΔW2[j][i]` with
/// `m[j] = λ_f·(1 + λ_p·c[j]/Σc)`, `c[j] = Σ_k ΔW2_next[k][j]`.
fn sbp_oracle(w3: &Rows, dw2: &Rows, next: Option<&Rows>, lf: f64, lp: f64, tau: f64, dt: f64) -> Rows {
    let d = (-dt / tau).exp();
    let n = w3.len();
    let mut m = vec![lf; n];
    if let Some(next) = next {
        let c: Vec<f64> = (0..n).map(|j| next.iter().map(|row| row[j]).sum()).collect();
        let total: f64 = c.iter().sum();
        if total.abs() >= 1e-8 {
            for j in 0..n {
                m[j] = lf * (1.0 + lp * c[j] / total);
            }
        }
    }
    let mut out = w3.clone();
    for j in 0..n {
        for i in 0..w3[j].len() {
            out[j][i] = d * w3[j][i] + m[j] * dw2[j][i];
        }
    }
    out
}

#[test]
fn hebbian_and_sbp_match_elementwise_oracle() {
    let mut rng = SeededRng::new(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (fan_in, fan_out, next_out) = (1 + rng.below(7), 1 + rng.below(7), 1 + rng.below(7));
        let params = SbpParams {
            lambda_f: rng.uniform(0.1, 1.0),
            lambda_p: rng.uniform(0.1, 1.0),
            tau_w: rng.uniform(5.0, 80.0),
        };
        let dt = rng.uniform(0.5, 2.0);
        let (w2, w3) = (rand_rows(&mut rng, fan_out, fan_in), rand_rows(&mut rng, fan_out, fan_in));
        let eta = rng.uniform(0.0, 0.5);
        let beta = rng.uniform(-1.0, 1.0);
        let s: Vec<f64> = (0..fan_in).map(|_| if rng.coin() { 1.0 } else { 0.0 }).collect();
        let u: Vec<f64> = (0..fan_out).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let next = rand_rows(&mut rng, next_out, fan_out);
        let top = rng.below(4) == 0;

        let mut layer = MultiPathLayer::from_parts(
            to_dense(&rand_rows(&mut rng, fan_out, fan_in)),
            to_dense(&w2),
            to_dense(&w3),
            [1.0 / 3.0; 3],
            eta,
            beta,
        )
        .unwrap();
        hebbian_update(&mut layer, &DenseVector::from(s.as_slice()), &DenseVector::from(u.as_slice()), &params, dt, DeltaMode::Full)
            .unwrap();
        let (want_w2, want_delta) = hebbian_oracle(&w2, &s, &u, eta, beta, params.tau_w, dt);
        worst = worst.max(max_diff(&layer.w2, &want_w2));
        worst = worst.max(max_diff(&layer.dw2_last, &want_delta));

        let next_dense = to_dense(&next);
        sbp_update(&mut layer, if top { None } else { Some(&next_dense) }, &params, dt).unwrap();
        let want_w3 = sbp_oracle(&w3, &want_delta, if top { None } else { Some(&next) }, params.lambda_f, params.lambda_p, params.tau_w, dt);
        worst = worst.max(max_diff(&layer.w3, &want_w3));
    }
    assert!(worst <= 1e-12, "max abs error {worst:e}");
}
