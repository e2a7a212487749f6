//! The two name-normalization schemes: `george_smith` and `george SMITH`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NormalizeError {
    #[error("{0} name is empty")]
    EmptyPart(&'static str),
    #[error("unknown normalization scheme `{0}` (expected underscore_lower or case_marked)")]
    UnknownScheme(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// `lower(first) + "_" + lower(last)`
    UnderscoreLower,
    /// `lower(first) + " " + UPPER(last)`
    CaseMarked,
}

impl Scheme {
    pub fn separator(self) -> char {
        match self {
            Scheme::UnderscoreLower => '_',
            Scheme::CaseMarked => ' ',
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::UnderscoreLower => "underscore_lower",
            Scheme::CaseMarked => "case_marked",
        }
    }

    pub fn apply(self, first: &str, last: &str) -> Result<NormalizedName, NormalizeError> {
        match self {
            Scheme::UnderscoreLower => normalize_underscore(first, last),
            Scheme::CaseMarked => normalize_case_marked(first, last),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = NormalizeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().replace('-', "_").as_str() {
            "underscore_lower" | "underscore" => Ok(Scheme::UnderscoreLower),
            "case_marked" | "mixed_case" => Ok(Scheme::CaseMarked),
            _ => Err(NormalizeError::UnknownScheme(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NormalizedName {
    text: String,
    scheme: Scheme,
}

impl NormalizedName {
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Word segments, split on the scheme's separator.
    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.text.split(self.scheme.separator())
    }

    /// Splits back into the two parts.
    pub fn parts(&self) -> (&str, &str) {
        self.text
            .split_once(self.scheme.separator())
            .expect("normalized names always contain the separator")
    }
}

impl fmt::Display for NormalizedName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Drops whitespace and any occurrence of the separator so each part is a
/// single segment.
fn squash(part: &str, separator: char) -> String {
    part.chars()
        .filter(|c| !c.is_whitespace() && *c != separator)
        .collect()
}

fn prepare(
    first: &str,
    last: &str,
    separator: char,
) -> Result<(String, String), NormalizeError> {
    let first = squash(first, separator);
    if first.is_empty() {
        return Err(NormalizeError::EmptyPart("first"));
    }
    let last = squash(last, separator);
    if last.is_empty() {
        return Err(NormalizeError::EmptyPart("last"));
    }
    Ok((first, last))
}

pub fn normalize_underscore(first: &str, last: &str) -> Result<NormalizedName, NormalizeError> {
    let (first, last) = prepare(first, last, '_')?;
    Ok(NormalizedName {
        text: format!("{}_{}", first.to_lowercase(), last.to_lowercase()),
        scheme: Scheme::UnderscoreLower,
    })
}

pub fn normalize_case_marked(first: &str, last: &str) -> Result<NormalizedName, NormalizeError> {
    let (first, last) = prepare(first, last, ' ')?;
    Ok(NormalizedName {
        text: format!("{} {}", first.to_lowercase(), last.to_uppercase()),
        scheme: Scheme::CaseMarked,
    })
}
