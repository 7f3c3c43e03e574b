//! Degrees of freedom of reference regressors and forest regressors on
//! the MARSadd task, printed as a `model,depth,r,T,DoF` table.
//!
//! Run with `cargo run --release --example dof_study`. Uses few
//! replications; raise `R` for tighter estimates.

use ndf_rec::dof::{
    dof_forest_adapter, estimate_dof, format_table, DofRow, GlobalMean, LeastSquares, Regressor,
    SimulatedTask, TaskFunction,
};
use ndf_rec::ndf::ForestConfig;

const R: usize = 5;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let task = SimulatedTask::new(TaskFunction::MarsAdd, 200, 1.0, 1)?;
    let mut models: Vec<Box<dyn Regressor>> = vec![Box::new(GlobalMean), Box::new(LeastSquares)];
    for (depth, r) in [(1, 0.3), (3, 0.3), (5, 0.3), (5, 0.9)] {
        let forest = ForestConfig {
            trees: 16,
            depth,
            pruning_rate: r,
            seed: 2,
            ..ForestConfig::default()
        };
        models.push(Box::new(dof_forest_adapter(forest)?));
    }
    let mut rows = Vec::new();
    for m in &models {
        let est = estimate_dof(&task, m.as_ref(), R, 9)?;
        rows.push(DofRow {
            model: m.name(),
            shape: m.forest_shape(),
            dof: est.dof,
        });
    }
    print!("{}", format_table(&rows));
    Ok(())
}
