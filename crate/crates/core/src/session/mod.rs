//! Session datasets, synthetic generation and ranking metrics.

mod data;
pub mod metrics;
pub mod synthetic;

pub use data::{
    augment_prefixes, format_sessions, load_dataset_dir, load_sessions_str, parse_session_lines,
    prefixes, write_dataset_dir, ItemVocabulary, LoadReport, Session, SessionDataset, SessionError,
};
pub use metrics::{
    hit_rate_at_k, hit_rate_from_ranks, mrr_at_k, mrr_from_ranks, target_rank, target_ranks,
    two_proportion_z_test, RankingReport, ZTest,
};
pub use synthetic::{generate_synthetic, planted_rule, SyntheticConfig};
