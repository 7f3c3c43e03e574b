//! Planted second-order Markov sessions.
//!
//! Items are split into two halves. The next click after `(a, b)` lands in
//! the half given by the XOR of the halves of `a` and `b`, so neither item
//! alone says which half. Inside that half, a block is picked by `b` alone
//! and an offset inside the block mixes both items. A predictor that scores
//! items additively in `a` and `b` can at best spread its mass over the
//! matching block in both halves; one that resolves the XOR can cover the
//! right block only.

use rand::Rng as _;

use super::{ItemVocabulary, Session, SessionDataset, SessionError};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub items: usize,
    pub sessions: usize,
    /// Probability that a generated click (including the target) is drawn
    /// uniformly instead of following the rule.
    pub noise: f64,
    /// Clicked items per session before the target, inclusive bounds.
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of sessions held out as the test split.
    pub test_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            items: 100,
            sessions: 2000,
            noise: 0.2,
            min_len: 2,
            max_len: 4,
            test_fraction: 0.2,
        }
    }
}

/// The planted next-item rule for the last two clicks `a`, `b`.
pub fn planted_rule(a: usize, b: usize, items: usize) -> usize {
    let half = items / 2;
    let side = usize::from(a >= half) ^ usize::from(b >= half);
    let block_size = (half / 3).max(1);
    let (oa, ob) = (a % half, b % half);
    let block = ob % 3;
    let within = (oa * 7 + ob) % block_size;
    side * half + block * block_size + within
}

/// Generates a dataset deterministically from `seed`.
pub fn generate_synthetic(
    seed: u64,
    cfg: &SyntheticConfig,
) -> Result<SessionDataset, SessionError> {
    if cfg.items < 10 {
        return Err(SessionError::Invalid(format!(
            "synthetic data needs at least 10 items, got {}",
            cfg.items
        )));
    }
    if cfg.min_len < 2 || cfg.max_len < cfg.min_len {
        return Err(SessionError::Invalid(format!(
            "session length bounds {}..={} must start at 2 or more",
            cfg.min_len, cfg.max_len
        )));
    }
    if !(0.0..=1.0).contains(&cfg.noise) || !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(SessionError::Invalid(
            "noise must lie in [0, 1] and test fraction in [0, 1)".into(),
        ));
    }
    let n = cfg.items;
    let mut rng = stream(seed, "synthetic");
    let mut sessions = Vec::with_capacity(cfg.sessions);
    for _ in 0..cfg.sessions {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut clicks = vec![rng.random_range(0..n), rng.random_range(0..n)];
        while clicks.len() < len + 1 {
            let next = if rng.random_bool(cfg.noise) {
                rng.random_range(0..n)
            } else {
                let k = clicks.len();
                planted_rule(clicks[k - 2], clicks[k - 1], n)
            };
            clicks.push(next);
        }
        let target = clicks.pop().expect("len >= 2");
        sessions.push(Session {
            items: clicks,
            target,
        });
    }
    let n_test = (cfg.sessions as f64 * cfg.test_fraction).round() as usize;
    let test = sessions.split_off(sessions.len() - n_test);
    Ok(SessionDataset {
        vocab: ItemVocabulary::identity(n),
        train: sessions,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_targets_follow_rule() {
        let cfg = SyntheticConfig {
            noise: 0.0,
            sessions: 300,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(3, &cfg).unwrap();
        for s in ds.train.iter().chain(&ds.test) {
            let k = s.items.len();
            assert_eq!(s.target, planted_rule(s.items[k - 2], s.items[k - 1], 100));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SyntheticConfig::default();
        assert_eq!(
            generate_synthetic(7, &cfg).unwrap(),
            generate_synthetic(7, &cfg).unwrap()
        );
        assert_ne!(
            generate_synthetic(7, &cfg).unwrap(),
            generate_synthetic(8, &cfg).unwrap()
        );
    }

    #[test]
    fn rule_stays_in_range() {
        for n in [10, 11, 57, 100] {
            for a in 0..n {
                for b in 0..n {
                    assert!(planted_rule(a, b, n) < n);
                }
            }
        }
    }

    #[test]
    fn half_depends_on_both_items() {
        let n = 100;
        // Flipping either item's half flips the target's half.
        let t = planted_rule(3, 4, n);
        assert!(t < 50);
        assert!(planted_rule(53, 4, n) >= 50);
        assert!(planted_rule(3, 54, n) >= 50);
        assert!(planted_rule(53, 54, n) < 50);
    }

    #[test]
    fn rejects_tiny_vocabulary() {
        let cfg = SyntheticConfig {
            items: 9,
            ..SyntheticConfig::default()
        };
        assert!(generate_synthetic(1, &cfg).is_err());
    }
}
