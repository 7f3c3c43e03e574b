//! Top-k ranking metrics and the two-proportion z-test.

use std::fmt::Write as _;

use statrs::function::erf::erfc;

use super::SessionError;
use crate::tensor::Tensor;

/// 1-based rank of `target` under descending scores. Ties go to the lower
/// item index.
pub fn target_rank(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count()
}

/// Ranks of each row's target in a `cases x items` score matrix.
pub fn target_ranks(scores: &Tensor, targets: &[usize]) -> Vec<usize> {
    assert_eq!(scores.rows(), targets.len(), "one target per row");
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| target_rank(scores.row(i), t))
        .collect()
}

fn check_k(k: usize, items: usize) -> Result<(), SessionError> {
    if k > items || k == 0 {
        return Err(SessionError::KTooLarge { k, items });
    }
    Ok(())
}

/// Fraction of ranks within the top `k`.
pub fn hit_rate_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Mean of `1/rank`, counting ranks beyond `k` as zero.
pub fn mrr_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let total: f64 = ranks
        .iter()
        .filter(|&&r| r <= k)
        .map(|&r| 1.0 / r as f64)
        .sum();
    total / ranks.len() as f64
}

pub fn hit_rate_at_k(scores: &Tensor, targets: &[usize], k: usize) -> Result<f64, SessionError> {
    check_k(k, scores.cols())?;
    Ok(hit_rate_from_ranks(&target_ranks(scores, targets), k))
}

pub fn mrr_at_k(scores: &Tensor, targets: &[usize], k: usize) -> Result<f64, SessionError> {
    check_k(k, scores.cols())?;
    Ok(mrr_from_ranks(&target_ranks(scores, targets), k))
}

/// HR@k and MRR@k over one evaluation set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingReport {
    pub k: usize,
    pub cases: usize,
    pub hits: usize,
    pub hit_rate: f64,
    pub mrr: f64,
}

impl RankingReport {
    pub fn from_ranks(ranks: &[usize], k: usize) -> Self {
        Self {
            k,
            cases: ranks.len(),
            hits: ranks.iter().filter(|&&r| r <= k).count(),
            hit_rate: hit_rate_from_ranks(ranks, k),
            mrr: mrr_from_ranks(ranks, k),
        }
    }

    /// `metric<TAB>value` table followed by `HR@k=` / `MRR@k=` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::from("metric\tvalue\n");
        let _ = writeln!(out, "HR@{}\t{}", self.k, self.hit_rate);
        let _ = writeln!(out, "MRR@{}\t{}", self.k, self.mrr);
        let _ = writeln!(out, "cases\t{}", self.cases);
        let _ = writeln!(out, "HR@{}={}", self.k, self.hit_rate);
        let _ = writeln!(out, "MRR@{}={}", self.k, self.mrr);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZTest {
    pub z: f64,
    pub p_value: f64,
    /// Set when the pooled variance is zero; `z` is then 0 and `p_value` 1.
    pub degenerate: bool,
}

/// Pooled two-proportion z-test with a two-sided p-value.
pub fn two_proportion_z_test(
    hits_a: u64,
    n_a: u64,
    hits_b: u64,
    n_b: u64,
) -> Result<ZTest, SessionError> {
    if n_a == 0 || n_b == 0 || hits_a > n_a || hits_b > n_b {
        return Err(SessionError::Invalid(format!(
            "invalid proportions {hits_a}/{n_a} and {hits_b}/{n_b}"
        )));
    }
    let (na, nb) = (n_a as f64, n_b as f64);
    let (pa, pb) = (hits_a as f64 / na, hits_b as f64 / nb);
    let pooled = (hits_a + hits_b) as f64 / (na + nb);
    let var = pooled * (1.0 - pooled) * (1.0 / na + 1.0 / nb);
    if var <= 0.0 {
        return Ok(ZTest {
            z: 0.0,
            p_value: 1.0,
            degenerate: true,
        });
    }
    let z = (pa - pb) / var.sqrt();
    Ok(ZTest {
        z,
        p_value: erfc(z.abs() / std::f64::consts::SQRT_2),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_lower_index() {
        let scores = [0.2, 0.5, 0.5, 0.1];
        assert_eq!(target_rank(&scores, 1), 1);
        assert_eq!(target_rank(&scores, 2), 2);
        assert_eq!(target_rank(&scores, 0), 3);
    }

    #[test]
    fn k_boundary() {
        // Target 3 ranked 4th.
        let s = Tensor::from_rows(&[vec![0.4, 0.3, 0.2, 0.1, 0.0]]).unwrap();
        assert_eq!(hit_rate_at_k(&s, &[3], 4).unwrap(), 1.0);
        assert_eq!(hit_rate_at_k(&s, &[3], 3).unwrap(), 0.0);
        assert_eq!(mrr_at_k(&s, &[3], 4).unwrap(), 0.25);
        assert_eq!(mrr_at_k(&s, &[3], 3).unwrap(), 0.0);
        assert!(hit_rate_at_k(&s, &[3], 6).is_err());
    }

    #[test]
    fn identical_proportions() {
        let t = two_proportion_z_test(40, 100, 40, 100).unwrap();
        assert_eq!(t.z, 0.0);
        assert_eq!(t.p_value, 1.0);
    }

    #[test]
    fn degenerate_pooled_variance() {
        let t = two_proportion_z_test(0, 10, 0, 20).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.p_value, 1.0);
    }

    #[test]
    fn report_text_has_machine_lines() {
        let r = RankingReport::from_ranks(&[1, 2, 30], 20);
        let text = r.to_text();
        assert!(text.starts_with("metric\tvalue\n"));
        assert!(text.contains(&format!("HR@20={}", 2.0 / 3.0)));
        assert!(text.contains(&format!("MRR@20={}", 0.5)));
    }
}
