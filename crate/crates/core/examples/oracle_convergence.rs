//! Grid-refinement study of the Newton solver against the exact non-quadratic
//! solution `x1^2/(2(x2+1)) + (x2^3 + 3 x2^2)/6` of `det D^2 u = 1`.
//!
//! Run with `cargo run --release --example oracle_convergence`.

use std::sync::Arc;
use std::time::Instant;

use halfspace_ma::ma::solve_ma_dirichlet_detailed;
use halfspace_ma::oracles::nonquadratic_solution;
use halfspace_ma::{HalfGrid, SolverConfig, SourceTerm};

fn main() -> halfspace_ma::Result<()> {
    let exact = |x: &[f64]| nonquadratic_solution(x).map(|j| j.value).unwrap_or(f64::NAN);
    let mut previous: Option<f64> = None;
    println!("{:>8} {:>12} {:>8} {:>6} {:>8}", "h", "sup error", "ratio", "iters", "secs");
    for k in [16.0, 32.0, 64.0] {
        let start = Instant::now();
        let grid = Arc::new(HalfGrid::new(2, 2.0, 2.0, 1.0 / k)?);
        let sol = solve_ma_dirichlet_detailed(grid.clone(), &SourceTerm::unit(), &exact, &SolverConfig::default(), None)?;
        let err = (0..grid.len())
            .map(|i| (sol.field.get(i) - exact(&grid.coords(i))).abs())
            .fold(0.0, f64::max);
        let ratio = previous.map_or(String::from("-"), |p| format!("{:.3}", p / err));
        println!(
            "{:>8} {:>12.4e} {:>8} {:>6} {:>8.2}",
            format!("1/{k}"),
            err,
            ratio,
            sol.history.len() - 1,
            start.elapsed().as_secs_f64()
        );
        previous = Some(err);
    }
    Ok(())
}
