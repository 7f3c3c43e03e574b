use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("dataset has no training sessions")]
    Empty,
    #[error("session must contain at least one item")]
    EmptySession,
    #[error("item {item} outside vocabulary of {items}")]
    OutOfRange { item: usize, items: usize },
    #[error("k = {k} exceeds the item count {items}")]
    KTooLarge { k: usize, items: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Bijection between raw item tokens and dense indices `0..len()`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ItemVocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl ItemVocabulary {
    /// Builds a vocabulary from tokens. Duplicates collapse; indices follow
    /// numeric order when every token is an unsigned integer, lexicographic
    /// order otherwise.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut uniq: Vec<&str> = tokens.into_iter().collect();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.iter().all(|t| t.parse::<u64>().is_ok()) {
            uniq.sort_by_key(|t| t.parse::<u64>().expect("checked numeric"));
        }
        let tokens: Vec<String> = uniq.into_iter().map(str::to_owned).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Tokens `"0"` .. `"n-1"` mapped to themselves.
    pub fn identity(n: usize) -> Self {
        let tokens: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        Self::from_tokens(tokens.iter().map(String::as_str))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }
}

/// Clicked items in order, and the item clicked next.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Session {
    pub items: Vec<usize>,
    pub target: usize,
}

impl Session {
    pub fn new(items: Vec<usize>, target: usize) -> Result<Self, SessionError> {
        if items.is_empty() {
            return Err(SessionError::EmptySession);
        }
        Ok(Self { items, target })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn last(&self) -> usize {
        *self.items.last().expect("sessions are non-empty")
    }

    pub fn validate(&self, items: usize) -> Result<(), SessionError> {
        if self.items.is_empty() {
            return Err(SessionError::EmptySession);
        }
        match self
            .items
            .iter()
            .chain([&self.target])
            .find(|&&i| i >= items)
        {
            Some(&item) => Err(SessionError::OutOfRange { item, items }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionDataset {
    pub vocab: ItemVocabulary,
    pub train: Vec<Session>,
    pub test: Vec<Session>,
}

/// What was discarded from the test split while loading.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub dropped_items: usize,
    pub dropped_sessions: usize,
}

impl SessionDataset {
    pub fn items(&self) -> usize {
        self.vocab.len()
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        if self.train.is_empty() {
            return Err(SessionError::Empty);
        }
        let n = self.items();
        self.train
            .iter()
            .chain(&self.test)
            .try_for_each(|s| s.validate(n))
    }
}

/// Splits session text into token lines. Each line holds the clicked items
/// followed by the target; `#` starts a comment line.
pub fn parse_session_lines(text: &str) -> Result<Vec<Vec<&str>>, SessionError> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        if tokens.len() < 2 {
            return Err(SessionError::Malformed {
                line: no + 1,
                reason: "need at least one item and a target".into(),
            });
        }
        out.push(tokens);
    }
    Ok(out)
}

/// Builds a dataset from train and test session text. The vocabulary comes
/// from the training split only; unknown test items are dropped, and a test
/// session is dropped when its target is unknown or no item survives.
pub fn load_sessions_str(
    train: &str,
    test: &str,
) -> Result<(SessionDataset, LoadReport), SessionError> {
    let train_lines = parse_session_lines(train)?;
    let test_lines = parse_session_lines(test)?;
    if train_lines.is_empty() {
        return Err(SessionError::Empty);
    }
    let vocab = ItemVocabulary::from_tokens(train_lines.iter().flatten().copied());
    let to_session = |tokens: &[&str]| {
        let (target, items) = tokens.split_last().expect("at least two tokens");
        Session {
            items: items
                .iter()
                .map(|t| vocab.index_of(t).expect("in vocab"))
                .collect(),
            target: vocab.index_of(target).expect("in vocab"),
        }
    };
    let train: Vec<Session> = train_lines.iter().map(|t| to_session(t)).collect();

    let mut report = LoadReport::default();
    let mut test_sessions = Vec::new();
    for tokens in &test_lines {
        let (target, items) = tokens.split_last().expect("at least two tokens");
        let known: Vec<usize> = items.iter().filter_map(|t| vocab.index_of(t)).collect();
        report.dropped_items += items.len() - known.len();
        match vocab.index_of(target) {
            Some(target) if !known.is_empty() => test_sessions.push(Session {
                items: known,
                target,
            }),
            _ => report.dropped_sessions += 1,
        }
    }
    let dataset = SessionDataset {
        vocab,
        train,
        test: test_sessions,
    };
    Ok((dataset, report))
}

fn read(path: &Path) -> Result<String, SessionError> {
    fs::read_to_string(path).map_err(|source| SessionError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads `train.txt` and `test.txt` from a directory.
pub fn load_dataset_dir(dir: &Path) -> Result<(SessionDataset, LoadReport), SessionError> {
    let train = read(&dir.join("train.txt"))?;
    let test_path = dir.join("test.txt");
    let test = if test_path.exists() {
        read(&test_path)?
    } else {
        String::new()
    };
    load_sessions_str(&train, &test)
}

/// Renders sessions in the session file format.
pub fn format_sessions(sessions: &[Session], vocab: &ItemVocabulary) -> String {
    let mut out = String::new();
    for s in sessions {
        for &i in &s.items {
            out.push_str(vocab.token(i));
            out.push(' ');
        }
        let _ = writeln!(out, "{}", vocab.token(s.target));
    }
    out
}

/// Writes `train.txt` and `test.txt` into `dir`.
pub fn write_dataset_dir(dataset: &SessionDataset, dir: &Path) -> Result<(), SessionError> {
    let io = |path: &Path, text: String| {
        fs::write(path, text).map_err(|source| SessionError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    fs::create_dir_all(dir).map_err(|source| SessionError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    io(
        &dir.join("train.txt"),
        format_sessions(&dataset.train, &dataset.vocab),
    )?;
    io(
        &dir.join("test.txt"),
        format_sessions(&dataset.test, &dataset.vocab),
    )
}

/// Expands every session into all of its next-click prefixes:
/// `[a, b, c] -> d` yields `[a] -> b`, `[a, b] -> c` and `[a, b, c] -> d`.
pub fn prefixes(sessions: &[Session]) -> Vec<Session> {
    let mut out = Vec::with_capacity(sessions.iter().map(Session::len).sum());
    for s in sessions {
        for cut in 1..s.items.len() {
            out.push(Session {
                items: s.items[..cut].to_vec(),
                target: s.items[cut],
            });
        }
        out.push(s.clone());
    }
    out
}

/// Prefix augmentation of the training split. The test split is left
/// as-is so every test case is a whole recorded session.
pub fn augment_prefixes(dataset: &SessionDataset) -> SessionDataset {
    SessionDataset {
        vocab: dataset.vocab.clone(),
        train: prefixes(&dataset.train),
        test: dataset.test.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(ds: &SessionDataset, s: &Session) -> (Vec<String>, String) {
        (
            s.items
                .iter()
                .map(|&i| ds.vocab.token(i).to_owned())
                .collect(),
            ds.vocab.token(s.target).to_owned(),
        )
    }

    #[test]
    fn last_token_is_target() {
        let (ds, _) = load_sessions_str("1 7 7 3\n", "").unwrap();
        let (items, target) = tokens(&ds, &ds.train[0]);
        assert_eq!(items, ["1", "7", "7"]);
        assert_eq!(target, "3");
        // Duplicate raw tokens share one index.
        assert_eq!(ds.train[0].items[1], ds.train[0].items[2]);
        assert_eq!(ds.items(), 3);
    }

    #[test]
    fn single_item_session() {
        let (ds, _) = load_sessions_str("5 2\n", "").unwrap();
        let (items, target) = tokens(&ds, &ds.train[0]);
        assert_eq!(items, ["5"]);
        assert_eq!(target, "2");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = load_sessions_str("# header\n1 2\n3\n", "").unwrap_err();
        assert!(matches!(err, SessionError::Malformed { line: 3, .. }));
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            load_sessions_str("# nothing\n", "1 2\n"),
            Err(SessionError::Empty)
        ));
    }

    #[test]
    fn unseen_test_items_dropped_and_counted() {
        let (ds, report) = load_sessions_str("1 2 3\n", "1 9 2\n9 2\n1 9\n").unwrap();
        assert_eq!(ds.test.len(), 1);
        assert_eq!(report.dropped_items, 2);
        assert_eq!(report.dropped_sessions, 2);
        let (items, target) = tokens(&ds, &ds.test[0]);
        assert_eq!(items, ["1"]);
        assert_eq!(target, "2");
    }

    #[test]
    fn prefix_augmentation() {
        let s = Session::new(vec![0, 1, 2], 3).unwrap();
        let out = prefixes(std::slice::from_ref(&s));
        assert_eq!(
            out,
            vec![
                Session::new(vec![0], 1).unwrap(),
                Session::new(vec![0, 1], 2).unwrap(),
                s
            ]
        );
        assert_eq!(prefixes(&[Session::new(vec![4], 5).unwrap()]).len(), 1);
    }

    #[test]
    fn numeric_tokens_sort_numerically() {
        let v = ItemVocabulary::from_tokens(["10", "9", "100", "9"]);
        assert_eq!(v.index_of("9"), Some(0));
        assert_eq!(v.index_of("10"), Some(1));
        assert_eq!(v.index_of("100"), Some(2));
    }
}
