//! Barrier `w = P - P^{1+delta}`, `P = x_n / |x|^2`, against random
//! coefficient fields decaying like `|x|^{-1/2}`: radial sweep of
//! `a_ij D_ij w`, the radius beyond which it stays nonpositive, and an
//! independent random-point check past that radius.
//!
//! Run with `cargo run --release --example barrier -- [seed]`.

use halfspace_ma::linear::{barrier_radial_sweep, barrier_supersolution_check, CoefficientField};
use halfspace_ma::oracles::BarrierSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> halfspace_ma::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = BarrierSpec { delta: 0.2, s: 0.5, r1: 1.0 };
    println!("{:>6} {:>12} {:>14} {:>14}", "field", "R1", "sweep max", "random max");
    for trial in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(trial));
        let coeffs = CoefficientField::random_perturbation(2, spec.s, 0.5, 2.0, &mut rng)?;
        let sweep = barrier_radial_sweep(&coeffs, &spec, 1.0, 1e8, 1.05, 90)?;
        let Some(r1) = sweep.empirical_r1 else {
            println!("{trial:>6} {:>12}", "none");
            continue;
        };
        let beyond = sweep
            .radii
            .iter()
            .zip(&sweep.max_values)
            .filter(|(r, _)| **r >= r1)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let sample: Vec<Vec<f64>> = (0..1000)
            .map(|_| {
                let r = rng.gen_range(r1.ln()..1e8f64.ln()).exp();
                let t = rng.gen_range(1e-4..std::f64::consts::PI - 1e-4);
                vec![r * t.cos(), r * t.sin()]
            })
            .collect();
        let check = barrier_supersolution_check(&coeffs, &BarrierSpec { r1, ..spec }, &sample)?;
        println!("{trial:>6} {r1:>12.3e} {beyond:>14.3e} {:>14.3e}", check.max_value);
    }
    Ok(())
}
