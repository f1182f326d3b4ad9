//! Nondivergence operators with random coefficients: the gap below 1 on the
//! middle arc of a half annulus with data 1 on the arcs and 1/2 on the
//! bottom, and the approach to the bottom limit at infinity.
//!
//! Run with `cargo run --release --example interior_gap_sweep`.

use halfspace_ma::linear::{limit_at_infinity_experiment, strict_interior_bound_experiment, CoefficientField, LimitProblem};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> halfspace_ma::Result<()> {
    let id = strict_interior_bound_experiment(&CoefficientField::identity(2), 1.0, 0.5, 8)?;
    println!("identity: epsilon0 = {:.6}", id.epsilon0);
    let mut eps = Vec::new();
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + trial);
        let coeffs = CoefficientField::random_perturbation(2, 1.0, 0.5, 2.0, &mut rng)?;
        eps.push(strict_interior_bound_experiment(&coeffs, 1.0, 0.5, 8)?.epsilon0);
    }
    eps.sort_by(f64::total_cmp);
    println!(
        "20 random fields: epsilon0 min {:.4}, median {:.4}, max {:.4}",
        eps[0], eps[10], eps[19]
    );

    let bottom = |x: &[f64]| 1.0 / (1.0 + x[0].abs());
    let inner = |_: &[f64]| 1.0;
    let problem = LimitProblem {
        beta: 0.0,
        inner_radius: 1.0,
        bottom: &bottom,
        inner: &inner,
        cells: 64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let coeffs = CoefficientField::random_perturbation(2, 1.0, 0.5, 2.0, &mut rng)?;
    let rep = limit_at_infinity_experiment(&coeffs, &problem, &[2.0, 4.0, 8.0, 16.0, 32.0])?;
    println!("{:>8} {:>14}", "radius", "sup|u - 0|");
    for row in &rep.rows {
        println!("{:>8} {:>14.4e}", row.radius, row.sup_deviation);
    }
    println!("monotone: {}", rep.monotone);
    Ok(())
}
