//! Full exterior pipeline for `f = 1 + 5·1_{B_{1/2}}` with identity asymptote:
//! expanding-domain solves, far-field fit, decay rates of the remainder and
//! the section normalization, printed as the JSON stage report.
//!
//! Run with `cargo run --release --example expanding_domain`.

use std::time::Instant;

use halfspace_ma::exterior::{full_pipeline, PipelineOptions};
use halfspace_ma::{QuadraticData, SourceTerm};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let start = Instant::now();
    let f = SourceTerm::bump(5.0, 0.5)?;
    let q = QuadraticData::half_norm_squared(2);
    let report = full_pipeline(&f, &q, &PipelineOptions::default())?;
    for stage in &report.stages {
        println!("{:<26} {:?}", stage.name, stage.status);
    }
    println!("{}", serde_json::to_string_pretty(&report.slopes)?);
    println!("b_n = {:?}, bounds_ok = {}", report.b_n, report.bounds_ok);
    if std::env::args().any(|a| a == "--json") {
        println!("{}", serde_json::to_string_pretty(&report)?);
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
