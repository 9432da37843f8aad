//! Dotted field paths with optional bracket indices, e.g. `handshake.extensions[2].type`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::message::MessageError;

/// Index attached to a path segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Index {
    At(usize),
    /// `[*]`: matches every index. Only meaningful in patterns.
    Any,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Segment {
    pub name: String,
    pub index: Option<Index>,
}

impl Segment {
    pub fn named(name: impl Into<String>) -> Self {
        Segment {
            name: name.into(),
            index: None,
        }
    }

    pub fn indexed(name: impl Into<String>, index: usize) -> Self {
        Segment {
            name: name.into(),
            index: Some(Index::At(index)),
        }
    }
}

/// Address of a node inside a [`Message`](crate::message::Message).
///
/// The empty path addresses the root. Segment names may contain any character
/// except `.`, `[` and `]`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct FieldPath {
    segments: Vec<Segment>,
}

pub(crate) fn is_valid_name(name: &str) -> bool {
    !name.is_empty() && !name.contains(['.', '[', ']'])
}

impl FieldPath {
    pub fn root() -> Self {
        FieldPath::default()
    }

    pub fn parse(text: &str) -> Result<Self, MessageError> {
        let invalid = |why: &str| MessageError::InvalidPath {
            path: text.to_string(),
            reason: why.to_string(),
        };
        let text_trimmed = text.trim();
        if text_trimmed.is_empty() {
            return Ok(FieldPath::root());
        }
        let mut segments = Vec::new();
        for raw in text_trimmed.split('.') {
            let (name, index) = match raw.find('[') {
                None => (raw, None),
                Some(open) => {
                    if !raw.ends_with(']') {
                        return Err(invalid("unterminated index"));
                    }
                    let inner = &raw[open + 1..raw.len() - 1];
                    let index = if inner == "*" {
                        Index::Any
                    } else {
                        Index::At(
                            inner
                                .parse()
                                .map_err(|_| invalid("index is not a number"))?,
                        )
                    };
                    (&raw[..open], Some(index))
                }
            };
            if !is_valid_name(name) {
                return Err(invalid("empty or malformed segment"));
            }
            segments.push(Segment {
                name: name.to_string(),
                index,
            });
        }
        Ok(FieldPath { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn is_root(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn has_wildcard(&self) -> bool {
        self.segments.iter().any(|s| s.index == Some(Index::Any))
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn child(&self, segment: Segment) -> Self {
        let mut segments = self.segments.clone();
        segments.push(segment);
        FieldPath { segments }
    }

    pub fn parent(&self) -> Option<FieldPath> {
        if self.segments.is_empty() {
            return None;
        }
        Some(FieldPath {
            segments: self.segments[..self.segments.len() - 1].to_vec(),
        })
    }

    pub fn last(&self) -> Option<&Segment> {
        self.segments.last()
    }

    /// Same path with the index of the last segment replaced.
    pub fn with_last_index(&self, index: Option<Index>) -> Self {
        let mut out = self.clone();
        if let Some(last) = out.segments.last_mut() {
            last.index = index;
        }
        out
    }

    /// `true` if `self` is a prefix of `other` (or equal to it).
    pub fn is_prefix_of(&self, other: &FieldPath) -> bool {
        self.segments.len() <= other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|(a, b)| a == b)
    }

    /// Pattern match: a `[*]` segment in `self` matches any index (or none)
    /// in the concrete path.
    pub fn matches(&self, concrete: &FieldPath, case_insensitive: bool) -> bool {
        self.segments.len() == concrete.segments.len()
            && self.matches_prefix(concrete, case_insensitive)
    }

    /// Pattern match against the leading segments of `concrete`.
    pub fn matches_prefix(&self, concrete: &FieldPath, case_insensitive: bool) -> bool {
        if self.segments.len() > concrete.segments.len() {
            return false;
        }
        self.segments.iter().zip(&concrete.segments).all(|(p, c)| {
            let name_ok = if case_insensitive {
                p.name.eq_ignore_ascii_case(&c.name)
            } else {
                p.name == c.name
            };
            let index_ok = match (p.index, c.index) {
                (Some(Index::Any), _) => true,
                (a, b) => {
                    a == b
                        || (a.is_none() && b == Some(Index::At(0)))
                        || (b.is_none() && a == Some(Index::At(0)))
                }
            };
            name_ok && index_ok
        })
    }
}

impl fmt::Display for FieldPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, seg) in self.segments.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            f.write_str(&seg.name)?;
            match seg.index {
                Some(Index::At(n)) => write!(f, "[{n}]")?,
                Some(Index::Any) => f.write_str("[*]")?,
                None => {}
            }
        }
        Ok(())
    }
}

impl FromStr for FieldPath {
    type Err = MessageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FieldPath::parse(s)
    }
}

impl Serialize for FieldPath {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FieldPath {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        FieldPath::parse(&text).map_err(serde::de::Error::custom)
    }
}
