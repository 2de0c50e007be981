//! Static bearer-token table.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Submit,
    Read,
    Admin,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Submit => "submit",
            Scope::Read => "read",
            Scope::Admin => "admin",
        }
    }
}

/// An authenticated caller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Session {
    pub subject: String,
    pub scopes: BTreeSet<Scope>,
}

impl Session {
    pub fn allows(&self, scope: Scope) -> bool {
        self.scopes.contains(&scope)
    }
}

#[derive(Debug, Error)]
pub enum TokenFileError {
    #[error("cannot read token file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("token file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("token file: entry {index}: {message}")]
    Invalid { index: usize, message: String },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenFile {
    #[serde(default)]
    tokens: Vec<TokenEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenEntry {
    token: String,
    subject: String,
    scopes: Vec<Scope>,
}

#[derive(Debug, Clone, Default)]
pub struct TokenTable {
    sessions: BTreeMap<String, Session>,
}

impl TokenTable {
    pub fn parse(text: &str) -> Result<Self, TokenFileError> {
        let file: TokenFile = toml::from_str(text)?;
        if file.tokens.is_empty() {
            return Err(TokenFileError::Invalid {
                index: 0,
                message: "no tokens defined".into(),
            });
        }
        let mut sessions = BTreeMap::new();
        for (index, e) in file.tokens.into_iter().enumerate() {
            let bad = |message: &str| TokenFileError::Invalid {
                index,
                message: message.into(),
            };
            if e.token.trim().is_empty() {
                return Err(bad("empty token"));
            }
            if e.subject.trim().is_empty() {
                return Err(bad("empty subject"));
            }
            if e.scopes.is_empty() {
                return Err(bad("no scopes"));
            }
            let session = Session {
                subject: e.subject,
                scopes: e.scopes.into_iter().collect(),
            };
            if sessions.insert(e.token, session).is_some() {
                return Err(bad("duplicate token"));
            }
        }
        Ok(Self { sessions })
    }

    pub fn load(path: &Path) -> Result<Self, TokenFileError> {
        let text = std::fs::read_to_string(path).map_err(|source| TokenFileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn lookup(&self, token: &str) -> Option<&Session> {
        self.sessions.get(token)
    }
}
