//! Scaling study of the comparison solution on sections: for each level `M`
//! the rescaled solution `û` is compared with the solution `ξ` of
//! `det D^2 ξ = 1` sharing its boundary values on `{û < 1}`.
//!
//! Run with `cargo run --release --example xi_scaling`.

use std::time::Instant;

use halfspace_ma::asymptotics::{xi_comparison_experiment, XiSetup};
use halfspace_ma::SourceTerm;

fn main() -> halfspace_ma::Result<()> {
    let start = Instant::now();
    let f = SourceTerm::bump(5.0, 0.5)?;
    let report = xi_comparison_experiment(&f, &[16.0, 64.0, 256.0], &XiSetup::default())?;
    println!("{:>6} {:>8} {:>14} {:>14}", "M", "nodes", "sup|û-ξ|", "|Dξ(0)|");
    for row in &report.rows {
        println!(
            "{:>6} {:>8} {:>14.4e} {:>14.4e}",
            row.level, row.section_nodes, row.sup_difference, row.gradient_at_origin
        );
    }
    println!("slope of sup|û-ξ| in M: {:?}", report.difference_slope);
    println!("slope of |Dξ(0)| in M:  {:?}", report.gradient_slope);
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
