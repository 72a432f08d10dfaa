//! Line-oriented key-value dialect:
//!
//! ```text
//! # comment
//! [left]
//! fx 729.9077        # trailing comments are allowed
//! dist 0.0644 -0.2494 -0.6359 6.9078e-4 -0.0011
//! ```
//!
//! Each line is a key followed by whitespace-separated values. Sections may
//! repeat (scene files use one `[object]` section per cuboid); keys before
//! the first header belong to the unnamed section `""`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::FormatError;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub values: Vec<String>,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Section {
    pub name: String,
    pub entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Document {
    pub sections: Vec<Section>,
}

impl Document {
    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let mut doc = Document {
            sections: vec![Section::default()],
        };
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| FormatError::Syntax {
                    line: line_no,
                    message: "unterminated section header".into(),
                })?;
                let name = name.trim();
                if name.is_empty() || name.contains(char::is_whitespace) {
                    return Err(FormatError::Syntax {
                        line: line_no,
                        message: format!("bad section name `{name}`"),
                    });
                }
                doc.sections.push(Section {
                    name: name.to_string(),
                    entries: Vec::new(),
                });
                continue;
            }
            let mut tokens = line.split_whitespace();
            let key = tokens.next().expect("non-empty line").to_string();
            let values = tokens.map(str::to_string).collect();
            doc.sections
                .last_mut()
                .expect("root section")
                .entries
                .push(Entry {
                    key,
                    values,
                    line: line_no,
                });
        }
        Ok(doc)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// First section with this name.
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn require_section(&self, name: &str) -> Result<&Section, FormatError> {
        self.section(name).ok_or_else(|| FormatError::MissingKey {
            section: name.to_string(),
            key: "<section>".into(),
        })
    }

    pub fn sections_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Section> + 'a {
        self.sections.iter().filter(move |s| s.name == name)
    }
}

impl Section {
    /// Last entry with this key (later lines override earlier ones).
    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().rev().find(|e| e.key == key)
    }

    pub fn has(&self, key: &str) -> bool {
        self.get(key).is_some()
    }

    fn require(&self, key: &str) -> Result<&Entry, FormatError> {
        self.get(key).ok_or_else(|| FormatError::MissingKey {
            section: self.name.clone(),
            key: key.to_string(),
        })
    }

    pub fn values<T: FromStr>(&self, key: &str) -> Result<Vec<T>, FormatError> {
        let entry = self.require(key)?;
        entry
            .values
            .iter()
            .map(|v| {
                v.parse().map_err(|_| FormatError::Value {
                    key: key.to_string(),
                    message: format!("line {}: cannot parse `{v}`", entry.line),
                })
            })
            .collect()
    }

    /// Exactly `N` values.
    pub fn array<T: FromStr + Copy + Default, const N: usize>(
        &self,
        key: &str,
    ) -> Result<[T; N], FormatError> {
        let values: Vec<T> = self.values(key)?;
        if values.len() != N {
            return Err(FormatError::Value {
                key: key.to_string(),
                message: format!("expected {N} values, found {}", values.len()),
            });
        }
        let mut out = [T::default(); N];
        out.copy_from_slice(&values);
        Ok(out)
    }

    pub fn value<T: FromStr + Copy + Default>(&self, key: &str) -> Result<T, FormatError> {
        self.array::<T, 1>(key).map(|[v]| v)
    }

    pub fn value_or<T: FromStr + Copy + Default>(
        &self,
        key: &str,
        default: T,
    ) -> Result<T, FormatError> {
        if self.has(key) {
            self.value(key)
        } else {
            Ok(default)
        }
    }

    pub fn string(&self, key: &str) -> Result<String, FormatError> {
        let entry = self.require(key)?;
        if entry.values.is_empty() {
            return Err(FormatError::Value {
                key: key.to_string(),
                message: "expected a value".into(),
            });
        }
        Ok(entry.values.join(" "))
    }

    pub fn string_opt(&self, key: &str) -> Option<String> {
        self.get(key)
            .filter(|e| !e.values.is_empty())
            .map(|e| e.values.join(" "))
    }

    /// `true`/`false`/`1`/`0`/`yes`/`no`, defaulting when absent.
    pub fn flag_or(&self, key: &str, default: bool) -> Result<bool, FormatError> {
        let Some(entry) = self.get(key) else {
            return Ok(default);
        };
        match entry.values.first().map(String::as_str) {
            None | Some("true") | Some("1") | Some("yes") | Some("on") => Ok(true),
            Some("false") | Some("0") | Some("no") | Some("off") => Ok(false),
            Some(other) => Err(FormatError::Value {
                key: key.to_string(),
                message: format!("`{other}` is not a boolean"),
            }),
        }
    }
}

/// Builder for emitting documents in the same dialect.
#[derive(Debug, Default, Clone)]
pub struct Writer {
    out: String,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn comment(&mut self, text: &str) -> &mut Self {
        let _ = writeln!(self.out, "# {text}");
        self
    }

    pub fn section(&mut self, name: &str) -> &mut Self {
        if !self.out.is_empty() {
            self.out.push('\n');
        }
        let _ = writeln!(self.out, "[{name}]");
        self
    }

    pub fn entry<V: std::fmt::Display>(&mut self, key: &str, values: &[V]) -> &mut Self {
        self.out.push_str(key);
        for v in values {
            let _ = write!(self.out, " {v}");
        }
        self.out.push('\n');
        self
    }

    pub fn finish(&self) -> String {
        self.out.clone()
    }
}
