//! Sections `{u < M}` of a solved field: ellipsoid fits, the upper-triangular
//! normalization at each level and its convergence, with the non-quadratic
//! exact solution as a control whose normalizations drift.
//!
//! Run with `cargo run --release --example sections`.

use std::sync::Arc;

use halfspace_ma::asymptotics::{normalization_iteration, NormalizationTable};
use halfspace_ma::ma::solve_ma_dirichlet;
use halfspace_ma::oracles::nonquadratic_solution;
use halfspace_ma::{HalfGrid, QuadraticData, ScalarField, SolverConfig, SourceTerm};

fn print_table(name: &str, t: &NormalizationTable) {
    println!("{name}");
    println!("{:>8} {:>8} {:>10} {:>12}", "M", "nodes", "det T", "|T_k - T_k-1|");
    for row in &t.rows {
        let d = row.difference.map_or(String::from("-"), |d| format!("{d:.4e}"));
        println!("{:>8} {:>8} {:>10.5} {:>12}", row.level, row.section_nodes, row.det_t, d);
    }
    println!("violations {}, decreasing {}\n", t.violations, t.decreasing);
}

fn main() -> halfspace_ma::Result<()> {
    let levels: Vec<f64> = (3..=8).map(|k| 2f64.powi(k)).collect();
    let grid = Arc::new(HalfGrid::new(2, 32.0, 32.0, 0.25)?);
    let q = QuadraticData::half_norm_squared(2);
    let data = |x: &[f64]| q.eval(x);
    let u = solve_ma_dirichlet(grid, &SourceTerm::bump(5.0, 1.0)?, &data, &SolverConfig::default(), None)?;
    print_table("f = 1 + 5 on the unit half-ball", &normalization_iteration(&u, &levels)?);

    let control = Arc::new(HalfGrid::new(2, 64.0, 16.0, 0.25)?);
    let exact = ScalarField::from_fn(control, |x| nonquadratic_solution(x).map(|j| j.value).unwrap_or(f64::NAN))?;
    print_table("non-quadratic exact solution", &normalization_iteration(&exact, &levels)?);
    Ok(())
}
