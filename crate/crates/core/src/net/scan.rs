//! Selective state-space scan with input-dependent step, input and output
//! projections.
//!
//! Per step `t` and channel `e`:
//!
//! ```text
//! Δ_t  = softplus(W_Δ x_t + b_Δ)            (per channel)
//! B_t  = W_B x_t + b_B,  C_t = W_C x_t + b_C (shared across channels)
//! h_t  = exp(Δ_t A) ⊙ h_{t-1} + Δ_t B_t x_t  (h_0 = 0)
//! y_t  = C_t · h_t + D x_t
//! ```
//!
//! `A` is kept strictly negative by storing `log(-A)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{gemm, sigmoid, softplus, Op};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsmParams {
    pub state_dim: usize,
    pub channels: usize,
    /// `log(-A)`, `[E][N]`.
    pub a_log: Vec<f64>,
    pub d_skip: Vec<f64>,
    /// `[N][E]`.
    pub w_b: Vec<f64>,
    pub b_b: Vec<f64>,
    /// `[N][E]`.
    pub w_c: Vec<f64>,
    pub b_c: Vec<f64>,
    /// `[E][E]`.
    pub w_dt: Vec<f64>,
    pub dt_bias: Vec<f64>,
}

impl SsmParams {
    pub fn zeros(channels: usize, state_dim: usize) -> Self {
        SsmParams {
            state_dim,
            channels,
            a_log: vec![0.0; channels * state_dim],
            d_skip: vec![0.0; channels],
            w_b: vec![0.0; state_dim * channels],
            b_b: vec![0.0; state_dim],
            w_c: vec![0.0; state_dim * channels],
            b_c: vec![0.0; state_dim],
            w_dt: vec![0.0; channels * channels],
            dt_bias: vec![0.0; channels],
        }
    }

    /// `A[e][n] = -(n+1)`, unit skip, small random projections and steps
    /// drawn log-uniformly from `[1e-3, 1e-1]`.
    pub fn init(channels: usize, state_dim: usize, rng: &mut impl Rng) -> Self {
        let mut p = SsmParams::zeros(channels, state_dim);
        for e in 0..channels {
            for n in 0..state_dim {
                p.a_log[e * state_dim + n] = ((n + 1) as f64).ln();
            }
        }
        p.d_skip.fill(1.0);
        let bound = 1.0 / (channels as f64).sqrt();
        for w in p.w_b.iter_mut().chain(p.w_c.iter_mut()) {
            *w = rng.gen_range(-bound..bound);
        }
        for w in p.w_dt.iter_mut() {
            *w = rng.gen_range(-bound..bound) * 0.1;
        }
        for b in p.dt_bias.iter_mut() {
            let dt: f64 = rng.gen_range((1e-3f64).ln()..(1e-1f64).ln()).exp();
            // Inverse softplus.
            *b = dt + (-(-dt).exp_m1()).ln();
        }
        p
    }

    pub fn a(&self, e: usize, n: usize) -> f64 {
        -self.a_log[e * self.state_dim + n].exp()
    }

    pub fn param_count(&self) -> usize {
        self.a_log.len()
            + self.d_skip.len()
            + self.w_b.len()
            + self.b_b.len()
            + self.w_c.len()
            + self.b_c.len()
            + self.w_dt.len()
            + self.dt_bias.len()
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &Vec<f64>); 8] {
        [
            ("a_log", &self.a_log),
            ("d_skip", &self.d_skip),
            ("w_b", &self.w_b),
            ("b_b", &self.b_b),
            ("w_c", &self.w_c),
            ("b_c", &self.b_c),
            ("w_dt", &self.w_dt),
            ("dt_bias", &self.dt_bias),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 8] {
        [
            ("a_log", &mut self.a_log),
            ("d_skip", &mut self.d_skip),
            ("w_b", &mut self.w_b),
            ("b_b", &mut self.b_b),
            ("w_c", &mut self.w_c),
            ("b_c", &mut self.b_c),
            ("w_dt", &mut self.w_dt),
            ("dt_bias", &mut self.dt_bias),
        ]
    }
}

/// A `t × E` sequence, row-major by step.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub steps: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Sequence {
    pub fn new(steps: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if steps == 0 || data.len() != steps * channels {
            return Err(Error::ShapeMismatch(format!(
                "sequence of {steps} steps × {channels} channels cannot hold {} values",
                data.len()
            )));
        }
        Ok(Sequence { steps, channels, data })
    }

    pub fn at(&self, t: usize, e: usize) -> f64 {
        self.data[t * self.channels + e]
    }
}

/// Runs the scan over one sequence.
pub fn selective_scan(x: &Sequence, params: &SsmParams) -> Result<Sequence> {
    if x.channels != params.channels {
        return Err(Error::ShapeMismatch(format!(
            "sequence has {} channels, params expect {}",
            x.channels, params.channels
        )));
    }
    // [t][e] → [e][t] with a single position.
    let mut planar = vec![0.0; x.data.len()];
    for t in 0..x.steps {
        for e in 0..x.channels {
            planar[e * x.steps + t] = x.at(t, e);
        }
    }
    let y = scan_forward(params, &planar, x.steps, 1, false).y;
    let mut data = vec![0.0; y.len()];
    for t in 0..x.steps {
        for e in 0..x.channels {
            data[t * x.channels + e] = y[e * x.steps + t];
        }
    }
    Sequence::new(x.steps, x.channels, data)
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct ScanTrace {
    /// Pre-softplus step, `[E][T·P]`.
    z_dt: Vec<f64>,
    /// `[E][T·P]`.
    delta: Vec<f64>,
    /// `[T·P][N]`.
    bt: Vec<f64>,
    /// `[T·P][N]`.
    ct: Vec<f64>,
    /// `[E][P][T][N]`.
    hs: Vec<f64>,
}

pub(crate) struct ScanOutput {
    pub y: Vec<f64>,
    pub trace: Option<ScanTrace>,
}

/// Scans `P` independent sequences at once. `x` is `[E][T][P]`.
pub(crate) fn scan_forward(p: &SsmParams, x: &[f64], steps: usize, positions: usize, keep: bool) -> ScanOutput {
    let (e_n, n_n) = (p.channels, p.state_dim);
    let tp = steps * positions;
    debug_assert_eq!(x.len(), e_n * tp);

    let mut z_dt = vec![0.0; e_n * tp];
    for (e, row) in z_dt.chunks_exact_mut(tp).enumerate() {
        row.fill(p.dt_bias[e]);
    }
    gemm(e_n, e_n, tp, 1.0, &p.w_dt, Op::N, x, Op::N, 1.0, &mut z_dt);
    let delta: Vec<f64> = z_dt.iter().map(|&z| softplus(z)).collect();

    let mut bt = vec![0.0; tp * n_n];
    let mut ct = vec![0.0; tp * n_n];
    for row in bt.chunks_exact_mut(n_n) {
        row.copy_from_slice(&p.b_b);
    }
    for row in ct.chunks_exact_mut(n_n) {
        row.copy_from_slice(&p.b_c);
    }
    gemm(tp, e_n, n_n, 1.0, x, Op::T, &p.w_b, Op::T, 1.0, &mut bt);
    gemm(tp, e_n, n_n, 1.0, x, Op::T, &p.w_c, Op::T, 1.0, &mut ct);

    let a: Vec<f64> = p.a_log.iter().map(|v| -v.exp()).collect();
    let mut y = vec![0.0; e_n * tp];
    let mut hs = if keep { vec![0.0; e_n * positions * steps * n_n] } else { Vec::new() };
    let mut h = vec![0.0; n_n];
    for e in 0..e_n {
        let a_e = &a[e * n_n..][..n_n];
        for pos in 0..positions {
            h.fill(0.0);
            for t in 0..steps {
                let idx = t * positions + pos;
                let d = delta[e * tp + idx];
                let xv = x[e * tp + idx];
                let b = &bt[idx * n_n..][..n_n];
                let c = &ct[idx * n_n..][..n_n];
                let mut acc = 0.0;
                for n in 0..n_n {
                    h[n] = (d * a_e[n]).exp() * h[n] + d * b[n] * xv;
                    acc += c[n] * h[n];
                }
                y[e * tp + idx] = acc + p.d_skip[e] * xv;
                if keep {
                    hs[((e * positions + pos) * steps + t) * n_n..][..n_n].copy_from_slice(&h);
                }
            }
        }
    }
    ScanOutput {
        y,
        trace: keep.then_some(ScanTrace { z_dt, delta, bt, ct, hs }),
    }
}

/// Backward of [`scan_forward`]. Returns `dL/dx` (`[E][T][P]`) and adds
/// parameter gradients into `grad` when given.
pub(crate) fn scan_backward(
    p: &SsmParams,
    x: &[f64],
    steps: usize,
    positions: usize,
    trace: &ScanTrace,
    dy: &[f64],
    grad: Option<&mut SsmParams>,
) -> Vec<f64> {
    let (e_n, n_n) = (p.channels, p.state_dim);
    let tp = steps * positions;
    let ScanTrace { z_dt, delta, bt, ct, hs } = trace;

    let a: Vec<f64> = p.a_log.iter().map(|v| -v.exp()).collect();
    let mut dx = vec![0.0; e_n * tp];
    let mut d_delta = vec![0.0; e_n * tp];
    let mut dbt = vec![0.0; tp * n_n];
    let mut dct = vec![0.0; tp * n_n];
    let mut da = vec![0.0; e_n * n_n];
    let mut d_skip = vec![0.0; e_n];
    let mut dh = vec![0.0; n_n];

    for e in 0..e_n {
        let a_e = &a[e * n_n..][..n_n];
        for pos in 0..positions {
            dh.fill(0.0);
            let base = (e * positions + pos) * steps;
            for t in (0..steps).rev() {
                let idx = t * positions + pos;
                let gy = dy[e * tp + idx];
                let d = delta[e * tp + idx];
                let xv = x[e * tp + idx];
                d_skip[e] += gy * xv;
                let mut gx = gy * p.d_skip[e];
                let mut gd = 0.0;
                let h_t = &hs[(base + t) * n_n..][..n_n];
                let b = &bt[idx * n_n..][..n_n];
                let c = &ct[idx * n_n..][..n_n];
                for n in 0..n_n {
                    dct[idx * n_n + n] += gy * h_t[n];
                    dh[n] += gy * c[n];
                    let h_prev = if t > 0 { hs[(base + t - 1) * n_n + n] } else { 0.0 };
                    let decay = (d * a_e[n]).exp();
                    let g_decay = dh[n] * h_prev;
                    gd += g_decay * decay * a_e[n] + dh[n] * b[n] * xv;
                    da[e * n_n + n] += g_decay * decay * d;
                    dbt[idx * n_n + n] += dh[n] * d * xv;
                    gx += dh[n] * d * b[n];
                    dh[n] *= decay;
                }
                d_delta[e * tp + idx] = gd;
                dx[e * tp + idx] += gx;
            }
        }
    }

    let dz: Vec<f64> = d_delta.iter().zip(z_dt).map(|(g, &z)| g * sigmoid(z)).collect();
    gemm(e_n, e_n, tp, 1.0, &p.w_dt, Op::T, &dz, Op::N, 1.0, &mut dx);
    gemm(e_n, n_n, tp, 1.0, &p.w_b, Op::T, &dbt, Op::T, 1.0, &mut dx);
    gemm(e_n, n_n, tp, 1.0, &p.w_c, Op::T, &dct, Op::T, 1.0, &mut dx);

    if let Some(g) = grad {
        gemm(e_n, tp, e_n, 1.0, &dz, Op::N, x, Op::T, 1.0, &mut g.w_dt);
        for (e, row) in dz.chunks_exact(tp).enumerate() {
            g.dt_bias[e] += row.iter().sum::<f64>();
        }
        gemm(n_n, tp, e_n, 1.0, &dbt, Op::T, x, Op::T, 1.0, &mut g.w_b);
        gemm(n_n, tp, e_n, 1.0, &dct, Op::T, x, Op::T, 1.0, &mut g.w_c);
        for row in dbt.chunks_exact(n_n) {
            for (acc, v) in g.b_b.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for row in dct.chunks_exact(n_n) {
            for (acc, v) in g.b_c.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for i in 0..e_n * n_n {
            g.a_log[i] += da[i] * a[i];
        }
        for e in 0..e_n {
            g.d_skip[e] += d_skip[e];
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(e: usize, n: usize, seed: u64) -> SsmParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = SsmParams::init(e, n, &mut rng);
        for (_, t) in p.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        p
    }

    /// Direct per-step evaluation of the recurrence, written independently of
    /// the batched kernel.
    fn naive(x: &Sequence, p: &SsmParams) -> Vec<f64> {
        let (e_n, n_n) = (p.channels, p.state_dim);
        let mut h = vec![vec![0.0; n_n]; e_n];
        let mut out = Vec::new();
        for t in 0..x.steps {
            let xt: Vec<f64> = (0..e_n).map(|e| x.at(t, e)).collect();
            let dot = |w: &[f64], row: usize, len: usize| (0..len).map(|j| w[row * len + j] * xt[j]).sum::<f64>();
            let b: Vec<f64> = (0..n_n).map(|n| dot(&p.w_b, n, e_n) + p.b_b[n]).collect();
            let c: Vec<f64> = (0..n_n).map(|n| dot(&p.w_c, n, e_n) + p.b_c[n]).collect();
            for e in 0..e_n {
                let z = dot(&p.w_dt, e, e_n) + p.dt_bias[e];
                let delta = (1.0 + z.exp()).ln();
                let mut y = p.d_skip[e] * xt[e];
                for n in 0..n_n {
                    let abar = (delta * p.a(e, n)).exp();
                    h[e][n] = abar * h[e][n] + delta * b[n] * xt[e];
                    y += c[n] * h[e][n];
                }
                out.push(y);
            }
        }
        out
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let p = random_params(3, 4, 1);
        let x = Sequence::new(5, 3, vec![0.0; 15]).unwrap();
        assert!(selective_scan(&x, &p).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_hand_example() {
        let mut p = SsmParams::zeros(1, 1);
        p.a_log[0] = 0.0; // A = -1
        p.w_b[0] = 1.0;
        p.w_c[0] = 1.0;
        // softplus(0) = ln 2
        let y = selective_scan(&Sequence::new(1, 1, vec![1.0]).unwrap(), &p).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((y.data[0] - ln2).abs() < 1e-9);
        assert!((y.data[0] - 0.6931).abs() < 1e-4);
        // Ā = exp(-ln 2) = 0.5
        assert!(((ln2 * p.a(0, 0)).exp() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn frozen_projection_is_linear() {
        let mut p = random_params(3, 4, 2);
        p.w_dt.fill(0.0);
        p.w_b.fill(0.0);
        p.w_c.fill(0.0);
        let data: Vec<f64> = (0..18).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = Sequence::new(6, 3, data.clone()).unwrap();
        let x2 = Sequence::new(6, 3, data.iter().map(|v| 2.0 * v).collect()).unwrap();
        let y = selective_scan(&x, &p).unwrap();
        let y2 = selective_scan(&x2, &p).unwrap();
        for (a, b) in y.data.iter().zip(&y2.data) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_recurrence() {
        for (i, &steps) in [1usize, 4, 12, 37].iter().enumerate() {
            let p = random_params(5, 3, 10 + i as u64);
            let data: Vec<f64> = (0..steps * 5).map(|k| ((k * 31 % 17) as f64 / 8.0) - 1.0).collect();
            let x = Sequence::new(steps, 5, data).unwrap();
            let got = selective_scan(&x, &p).unwrap();
            for (a, b) in got.data.iter().zip(naive(&x, &p)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch() {
        let p = SsmParams::zeros(2, 2);
        let x = Sequence::new(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(selective_scan(&x, &p), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn init_invariants() {
        let p = SsmParams::init(4, 3, &mut ChaCha8Rng::seed_from_u64(0));
        for e in 0..4 {
            for n in 0..3 {
                assert!((p.a(e, n) + (n + 1) as f64).abs() < 1e-12);
            }
        }
        for b in &p.dt_bias {
            let d = softplus(*b);
            assert!(d > 9e-4 && d < 0.11);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (e_n, n_n, steps, positions) = (3, 2, 4, 2);
        let p = random_params(e_n, n_n, 5);
        let x: Vec<f64> = (0..e_n * steps * positions).map(|k| (k as f64 * 0.37).cos()).collect();
        let probe: Vec<f64> = (0..x.len()).map(|k| (k as f64 * 0.53).sin()).collect();
        let loss = |p: &SsmParams, x: &[f64]| -> f64 {
            scan_forward(p, x, steps, positions, false).y.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let out = scan_forward(&p, &x, steps, positions, true);
        let mut grad = SsmParams::zeros(e_n, n_n);
        let dx = scan_backward(&p, &x, steps, positions, out.trace.as_ref().unwrap(), &probe, Some(&mut grad));
        let h = 1e-6;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-7, "dx[{i}] {fd} vs {}", dx[i]);
        }
        let names: Vec<&str> = p.tensors().iter().map(|(n, _)| *n).collect();
        for (ti, name) in names.iter().enumerate() {
            let len = p.tensors()[ti].1.len();
            for i in 0..len {
                let (mut pp, mut pm) = (p.clone(), p.clone());
                pp.tensors_mut()[ti].1[i] += h;
                pm.tensors_mut()[ti].1[i] -= h;
                let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
                let an = grad.tensors()[ti].1[i];
                assert!((fd - an).abs() < 1e-7, "{name}[{i}] {fd} vs {an}");
            }
        }
    }
}
