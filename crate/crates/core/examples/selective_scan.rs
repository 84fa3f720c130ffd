//! Runs the selective scan on a random sequence and compares it with a
//! plain per-step loop written out here.

use ptloss::net::{selective_scan, Sequence, SsmParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn main() -> ptloss::Result<()> {
    let (steps, channels, state) = (37, 6, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = SsmParams::init(channels, state, &mut rng);
    let data: Vec<f64> = (0..steps * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = Sequence::new(steps, channels, data)?;
    let y = selective_scan(&x, &params)?;

    let mut h = vec![0.0; channels * state];
    let mut worst: f64 = 0.0;
    for t in 0..steps {
        let xt: Vec<f64> = (0..channels).map(|e| x.at(t, e)).collect();
        let proj = |w: &[f64], b: &[f64], n: usize| b[n] + (0..channels).map(|e| w[n * channels + e] * xt[e]).sum::<f64>();
        for e in 0..channels {
            let z = params.dt_bias[e] + (0..channels).map(|k| params.w_dt[e * channels + k] * xt[k]).sum::<f64>();
            let delta = softplus(z);
            let mut out = params.d_skip[e] * xt[e];
            for n in 0..state {
                let b = proj(&params.w_b, &params.b_b, n);
                let c = proj(&params.w_c, &params.b_c, n);
                let hs = &mut h[e * state + n];
                *hs = (delta * params.a(e, n)).exp() * *hs + delta * b * xt[e];
                out += c * *hs;
            }
            worst = worst.max((out - y.at(t, e)).abs());
        }
    }
    println!("{steps} steps x {channels} channels, state {state}: max |scan - loop| = {worst:.3e}");
    Ok(())
}
