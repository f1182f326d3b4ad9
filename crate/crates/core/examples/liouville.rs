//! Unit source with quadratic boundary data: every determinant-one quadratic
//! is reproduced to rounding, while a determinant-two quadratic is not.
//!
//! Run with `cargo run --release --example liouville`.

use halfspace_ma::exterior::liouville_test;
use halfspace_ma::{QuadraticData, SolverConfig};
use nalgebra::{DMatrix, DVector};

fn main() -> halfspace_ma::Result<()> {
    let shear = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
    let cases = [
        ("identity", DMatrix::identity(2, 2)),
        ("diag(2, 1/2)", DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5]))),
        ("sheared", shear.transpose() * &shear),
        ("diag(2, 1), det 2", DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]))),
    ];
    println!("{:<20} {:>8} {:>12} {:>7} {:>6}", "A", "det A", "sup|u-p|", "newton", "exact");
    for (name, a) in cases {
        let p = QuadraticData::from_hessian(a)?;
        let rep = liouville_test(&p, 8.0, 0.125, &SolverConfig::default())?;
        println!(
            "{:<20} {:>8.3} {:>12.3e} {:>7} {:>6}",
            name, rep.det_a, rep.sup_deviation, rep.newton_iterations, rep.passed
        );
    }
    Ok(())
}
