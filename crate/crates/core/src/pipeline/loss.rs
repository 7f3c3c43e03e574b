//! The merger of the two heads and the cross-entropy loss.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::ModelError;

/// Floor applied inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// `q * base + (1 - q) * ndf`.
pub fn merge(g: &mut Graph, base: Var, ndf: Var, q: f64) -> Result<Var, ModelError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(ModelError::MergeWeight(q));
    }
    let a = g.scale(base, q);
    let b = g.scale(ndf, 1.0 - q);
    Ok(g.add(a, b)?)
}

pub fn merge_vectors(base: &[f64], ndf: &[f64], q: f64) -> Result<Vec<f64>, ModelError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(ModelError::MergeWeight(q));
    }
    if base.len() != ndf.len() {
        return Err(crate::tensor::ShapeError::new("merge", &[base.len()], &[ndf.len()]).into());
    }
    Ok(base
        .iter()
        .zip(ndf)
        .map(|(&b, &n)| q * b + (1.0 - q) * n)
        .collect())
}

/// Mean of `-log(max(y_hat[target], floor))` over the rows of `y_hat`.
pub fn cross_entropy(g: &mut Graph, y_hat: Var, targets: &[usize]) -> Result<Var, ModelError> {
    let (rows, items) = (g.value(y_hat).rows(), g.value(y_hat).cols());
    if rows != targets.len() {
        return Err(
            crate::tensor::ShapeError::new("cross_entropy", &[rows], &[targets.len()]).into(),
        );
    }
    let mut onehot = Tensor::zeros(&[rows, items]);
    for (i, &t) in targets.iter().enumerate() {
        if t >= items {
            return Err(ModelError::TargetOutOfRange { target: t, items });
        }
        onehot.data_mut()[i * items + t] = 1.0;
    }
    let onehot = g.constant(onehot);
    let y = g.clamp_min(y_hat, PROB_FLOOR);
    let logs = g.log(y);
    let picked = g.mul(logs, onehot)?;
    let per_row = g.sum_axis(picked, 1)?;
    let total = g.sum_axis(per_row, 0)?;
    Ok(g.scale(total, -1.0 / rows as f64))
}

pub fn cross_entropy_value(y_hat: &[f64], target: usize) -> Result<f64, ModelError> {
    match y_hat.get(target) {
        Some(&p) => Ok(-p.max(PROB_FLOOR).ln()),
        None => Err(ModelError::TargetOutOfRange {
            target,
            items: y_hat.len(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_examples() {
        assert_eq!(
            merge_vectors(&[0.8, 0.2], &[0.2, 0.8], 0.5).unwrap(),
            vec![0.5, 0.5]
        );
        assert_eq!(
            merge_vectors(&[0.8, 0.2], &[0.2, 0.8], 1.0).unwrap(),
            vec![0.8, 0.2]
        );
        assert_eq!(
            merge_vectors(&[0.8, 0.2], &[0.2, 0.8], 0.0).unwrap(),
            vec![0.2, 0.8]
        );
        assert!(matches!(
            merge_vectors(&[1.0], &[1.0], -0.1),
            Err(ModelError::MergeWeight(_))
        ));
    }

    #[test]
    fn loss_examples() {
        assert!((cross_entropy_value(&[0.25; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(cross_entropy_value(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!((cross_entropy_value(&[0.9, 0.1], 1).unwrap() - 10f64.ln()).abs() < 1e-15);
        assert!(cross_entropy_value(&[0.5, 0.5], 2).is_err());
        assert!((cross_entropy_value(&[1.0, 0.0], 1).unwrap() + PROB_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn graph_loss_is_batch_mean() {
        let mut g = Graph::new();
        let y = g.constant(Tensor::from_rows(&[vec![0.25; 4], vec![0.1, 0.9, 0.0, 0.0]]).unwrap());
        let l = cross_entropy(&mut g, y, &[0, 0]).unwrap();
        let expected = (4f64.ln() + 10f64.ln()) / 2.0;
        assert!((g.value(l).data()[0] - expected).abs() < 1e-15);
        assert!(matches!(
            cross_entropy(&mut g, y, &[0, 4]),
            Err(ModelError::TargetOutOfRange {
                target: 4,
                items: 4
            })
        ));
    }
}
