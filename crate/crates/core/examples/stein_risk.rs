//! Monte-Carlo risk of the raw latent column against its James-Stein
//! shrunk version, for a few column lengths and mean priors.
//!
//! Run with `cargo run --release --example stein_risk`.

use ndf_rec::alleviator::{stein_risk_trial, LatentBatch, MeanPrior, ShrinkOptions};
use ndf_rec::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("m\tprior\tmle\tjs\tjs/mle");
    for m in [5, 10, 50] {
        for (label, prior) in [
            ("origin", MeanPrior::Origin),
            ("normal(2)", MeanPrior::Normal { sd: 2.0 }),
        ] {
            let r = stein_risk_trial(1, m, 20_000, 1.0, prior)?;
            println!(
                "{m}\t{label}\t{:.3}\t{:.3}\t{:.3}",
                r.mle,
                r.js,
                r.js / r.mle
            );
        }
    }

    // One batch through the shrinkage, column by column.
    let z = Tensor::from_rows(&[
        vec![1.0, 3.0],
        vec![-1.0, 2.5],
        vec![1.0, 3.5],
        vec![1.0, 2.0],
    ])?;
    let (shrunk, report) = LatentBatch::new(z).js_shrink(ShrinkOptions::default());
    println!("factors {:?}", report.factors);
    println!("shrunk {:?}", shrunk.z.data());
    Ok(())
}
