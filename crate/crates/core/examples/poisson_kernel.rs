//! Linear Dirichlet problem for the Laplacian on the half annulus
//! `1 <= |x| <= 8` with the half-space Poisson kernel `x_n / |x|^n` as data:
//! second-order convergence, then the decay rates read off the exact kernel.
//!
//! Run with `cargo run --release --example poisson_kernel`.

use std::sync::Arc;

use halfspace_ma::asymptotics::{decay_exponent, DecayMode};
use halfspace_ma::linear::{solve_linear_dirichlet, CoefficientField, ExteriorRegion, RegionClass};
use halfspace_ma::oracles::poisson_rate_or_zero;
use halfspace_ma::{HalfGrid, ScalarField};

fn main() -> halfspace_ma::Result<()> {
    let data = |x: &[f64], _: RegionClass| poisson_rate_or_zero(x);
    let mut previous: Option<f64> = None;
    println!("{:>8} {:>12} {:>8}", "h", "sup error", "ratio");
    for h in [0.125, 0.0625, 0.03125] {
        let region = ExteriorRegion::annulus(Arc::new(HalfGrid::new(2, 8.0, 8.0, h)?), 1.0, 8.0)?;
        let u = solve_linear_dirichlet(&region, &CoefficientField::identity(2), &data)?;
        let g = region.grid();
        let err = (0..g.len())
            .filter(|&i| region.class(i) == RegionClass::Unknown)
            .map(|i| (u.get(i) - poisson_rate_or_zero(&g.coords(i))).abs())
            .fold(0.0, f64::max);
        let ratio = previous.map_or(String::from("-"), |p| format!("{:.3}", p / err));
        println!("{h:>8} {err:>12.4e} {ratio:>8}");
        previous = Some(err);
    }

    let kernel = ScalarField::from_fn(Arc::new(HalfGrid::new(2, 32.0, 32.0, 0.125)?), poisson_rate_or_zero)?;
    let d = std::f64::consts::FRAC_1_SQRT_2;
    for (name, mode) in [
        ("ray at 45 degrees", DecayMode::Ray(vec![d, d])),
        ("annulus sup", DecayMode::Annulus),
        ("bottom normalized", DecayMode::BottomNormalized),
    ] {
        let out = decay_exponent(&kernel, &mode, (2.0, 16.0))?;
        println!("{name:<18} slope {:?}", out.exponent());
    }
    Ok(())
}
