//! Finite-difference check of one custom function, then the built-in
//! suites over every primitive and the composed model.
//!
//! Run with `cargo run --release --example gradient_check`.

use ndf_rec::gradcheck::{gradient_check, run_suites, TOLERANCE};
use ndf_rec::tensor::ShapeError;
use ndf_rec::{Tensor, Var};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // f(x) = sum(softmax(x) * log(sigmoid(x)))
    let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.8], vec![2.0, 0.1, -0.4]])?;
    let report = gradient_check(&x, |g, x| -> Result<Var, ShapeError> {
        let p = g.softmax(x);
        let s = g.sigmoid(x);
        let l = g.log(s);
        let y = g.mul(p, l)?;
        let y = g.reshape(y, &[1, 6])?;
        g.sum_axis(y, 1)
    })?;
    println!(
        "custom function: max relative error {:.2e}",
        report.max_rel_error
    );

    let mut failed = 0;
    for seed in 0..10 {
        for s in run_suites(seed)? {
            if !s.passes() {
                failed += 1;
                println!(
                    "seed {seed}: {} failed ({:.2e})",
                    s.name, s.report.max_rel_error
                );
            }
        }
    }
    println!("suites over 10 seeds: {failed} failures at tolerance {TOLERANCE:e}");
    Ok(())
}
