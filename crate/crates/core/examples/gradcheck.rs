//! Finite-difference gradient checks for every differentiable op and the
//! composed network.
//!
//! ```text
//! cargo run --release --example gradcheck -- [seeds]
//! ```

use saccade::gradcheck_suite::{run_suite, GradOp};

fn main() -> saccade::Result<()> {
    let seeds = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let summaries = run_suite(&GradOp::SUITE, 0, seeds)?;
    for s in &summaries {
        println!("{s}");
    }

    // A deliberately wrong backward pass must be caught.
    let control = run_suite(&[GradOp::NegativeControl], 0, 1)?;
    println!("{}", control[0]);
    assert!(!control[0].passed);
    Ok(())
}
