//! Value paths of the form `$`, `$.field`, `$[0].field`.
//!
//! Used for validation error locations, confidence lookup, and fault
//! injection targets.

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PathError {
    #[error("malformed value path `{0}`")]
    Malformed(String),
    #[error("path `{0}` not found in value")]
    NotFound(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Key(String),
    Index(usize),
}

/// A parsed value path rooted at `$`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValuePath {
    segments: Vec<Segment>,
}

impl ValuePath {
    pub fn parse(text: &str) -> Result<Self, PathError> {
        let rest = text
            .strip_prefix('$')
            .ok_or_else(|| PathError::Malformed(text.to_string()))?;
        let mut segments = Vec::new();
        let mut chars = rest.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '.' => {
                    let mut name = String::new();
                    while let Some(&n) = chars.peek() {
                        if n == '.' || n == '[' {
                            break;
                        }
                        name.push(n);
                        chars.next();
                    }
                    if name.is_empty() {
                        return Err(PathError::Malformed(text.to_string()));
                    }
                    segments.push(Segment::Key(name));
                }
                '[' => {
                    let mut digits = String::new();
                    loop {
                        match chars.next() {
                            Some(']') => break,
                            Some(d) if d.is_ascii_digit() => digits.push(d),
                            _ => return Err(PathError::Malformed(text.to_string())),
                        }
                    }
                    let idx = digits
                        .parse()
                        .map_err(|_| PathError::Malformed(text.to_string()))?;
                    segments.push(Segment::Index(idx));
                }
                _ => return Err(PathError::Malformed(text.to_string())),
            }
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn is_root(&self) -> bool {
        self.segments.is_empty()
    }

    /// First `.key` segment, if the path starts with one.
    pub fn leading_key(&self) -> Option<&str> {
        match self.segments.first() {
            Some(Segment::Key(k)) => Some(k),
            _ => None,
        }
    }

    /// Path with the first segment removed.
    pub fn tail(&self) -> ValuePath {
        ValuePath {
            segments: self.segments.iter().skip(1).cloned().collect(),
        }
    }

    /// Resolve the path against a value.
    pub fn get<'v>(&self, value: &'v Value) -> Option<&'v Value> {
        let mut cur = value;
        for seg in &self.segments {
            cur = match seg {
                Segment::Key(k) => cur.as_object()?.get(k)?,
                Segment::Index(i) => cur.as_array()?.get(*i)?,
            };
        }
        Some(cur)
    }

    /// Remove the field or element addressed by the path. The root itself
    /// cannot be removed.
    pub fn remove(&self, value: &mut Value) -> Result<Value, PathError> {
        let (last, parents) = self
            .segments
            .split_last()
            .ok_or_else(|| PathError::NotFound(self.to_string()))?;
        let mut cur = value;
        for seg in parents {
            cur = match seg {
                Segment::Key(k) => cur
                    .as_object_mut()
                    .and_then(|o| o.get_mut(k))
                    .ok_or_else(|| PathError::NotFound(self.to_string()))?,
                Segment::Index(i) => cur
                    .as_array_mut()
                    .and_then(|a| a.get_mut(*i))
                    .ok_or_else(|| PathError::NotFound(self.to_string()))?,
            };
        }
        match last {
            Segment::Key(k) => cur
                .as_object_mut()
                .and_then(|o| o.remove(k))
                .ok_or_else(|| PathError::NotFound(self.to_string())),
            Segment::Index(i) => {
                let arr = cur
                    .as_array_mut()
                    .ok_or_else(|| PathError::NotFound(self.to_string()))?;
                if *i < arr.len() {
                    Ok(arr.remove(*i))
                } else {
                    Err(PathError::NotFound(self.to_string()))
                }
            }
        }
    }
}

impl std::fmt::Display for ValuePath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "$")?;
        for seg in &self.segments {
            match seg {
                Segment::Key(k) => write!(f, ".{k}")?,
                Segment::Index(i) => write!(f, "[{i}]")?,
            }
        }
        Ok(())
    }
}

/// Build a child path string from a parent path string.
pub fn child_key(parent: &str, key: &str) -> String {
    format!("{parent}.{key}")
}

pub fn child_index(parent: &str, index: usize) -> String {
    format!("{parent}[{index}]")
}
