//! Topic names, filters and wildcard matching.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopicError {
    #[error("empty topic")]
    Empty,
    #[error("topic name may not contain wildcards: {0:?}")]
    WildcardInName(String),
    #[error("'+' must occupy a whole level: {0:?}")]
    BadSingleLevel(String),
    #[error("'#' must be the last level on its own: {0:?}")]
    BadMultiLevel(String),
    #[error("topic contains NUL")]
    Nul,
}

pub fn validate_name(name: &str) -> Result<(), TopicError> {
    if name.is_empty() {
        return Err(TopicError::Empty);
    }
    if name.contains('\0') {
        return Err(TopicError::Nul);
    }
    if name.contains(['+', '#']) {
        return Err(TopicError::WildcardInName(name.into()));
    }
    Ok(())
}

pub fn validate_filter(filter: &str) -> Result<(), TopicError> {
    if filter.is_empty() {
        return Err(TopicError::Empty);
    }
    if filter.contains('\0') {
        return Err(TopicError::Nul);
    }
    let levels: Vec<&str> = filter.split('/').collect();
    for (i, l) in levels.iter().enumerate() {
        if l.contains('+') && *l != "+" {
            return Err(TopicError::BadSingleLevel(filter.into()));
        }
        if l.contains('#') && (*l != "#" || i + 1 != levels.len()) {
            return Err(TopicError::BadMultiLevel(filter.into()));
        }
    }
    Ok(())
}

/// Standard wildcard matching. Topics starting with `$` are not matched by
/// a leading wildcard.
pub fn topic_matches(filter: &str, topic: &str) -> Result<bool, TopicError> {
    validate_filter(filter)?;
    validate_name(topic)?;
    Ok(matches_unchecked(filter, topic))
}

/// Matching for a filter and name that are already known to be valid.
pub fn matches_unchecked(filter: &str, topic: &str) -> bool {
    if topic.starts_with('$') && filter.starts_with(['+', '#']) {
        return false;
    }
    let mut f = filter.split('/');
    let mut t = topic.split('/');
    loop {
        match (f.next(), t.next()) {
            (Some("#"), _) => return true,
            (Some("+"), Some(_)) => {}
            (Some(a), Some(b)) if a == b => {}
            (None, None) => return true,
            _ => return false,
        }
    }
}
