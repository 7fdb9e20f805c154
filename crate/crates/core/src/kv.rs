//! Sectioned `key = value` text, shared by manifests, run configs and
//! synthetic specs.
//!
//! ```text
//! # comment
//! name = demo
//! [subjects]
//! s1 = s1.csv
//! ```

use crate::error::ParseError;

/// One `key = value` line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Entries grouped by section, in file order. Keys before any header land in
/// the section named `""`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvDocument {
    pub source: String,
    pub sections: Vec<(String, Vec<Entry>)>,
}

impl KvDocument {
    pub fn parse(source: &str, text: &str) -> Result<Self, ParseError> {
        let mut doc = KvDocument {
            source: source.to_string(),
            sections: vec![(String::new(), Vec::new())],
        };
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ParseError::new(source, lineno, "unterminated section header"))?
                    .trim();
                if name.is_empty() {
                    return Err(ParseError::new(source, lineno, "empty section name"));
                }
                if doc.sections.iter().any(|(s, _)| s == name) {
                    return Err(ParseError::new(source, lineno, format!("section [{name}] repeated")));
                }
                doc.sections.push((name.to_string(), Vec::new()));
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ParseError::new(source, lineno, format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ParseError::new(source, lineno, "empty key"));
            }
            let entries = &mut doc.sections.last_mut().expect("root section").1;
            if entries.iter().any(|e| e.key == key) {
                return Err(ParseError::new(source, lineno, format!("duplicate key `{key}`")));
            }
            entries.push(Entry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line: lineno,
            });
        }
        Ok(doc)
    }

    pub fn section(&self, name: &str) -> Option<&[Entry]> {
        self.sections.iter().find(|(s, _)| s == name).map(|(_, e)| e.as_slice())
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&Entry> {
        self.section(section)?.iter().find(|e| e.key == key)
    }

    pub fn error(&self, line: usize, message: impl Into<String>) -> ParseError {
        ParseError::new(self.source.clone(), line, message)
    }

    /// Parses `key` in `section` with `FromStr`, if present.
    pub fn parse_value<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, ParseError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(section, key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse()
                .map(Some)
                .map_err(|err| self.error(e.line, format!("bad value for `{key}`: {err}"))),
        }
    }
}

/// Finds the candidate closest to `key` by Jaro-Winkler similarity, if any is
/// reasonably close.
pub fn nearest_key<'a>(key: &str, candidates: impl IntoIterator<Item = &'a str>) -> Option<String> {
    candidates
        .into_iter()
        .map(|c| (strsim::jaro_winkler(key, c), c))
        .filter(|(s, _)| *s > 0.7)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let doc = KvDocument::parse("t", "# c\nname = x\n\n[subjects]\ns1 = a.csv\n; c\ns2=b.csv\n").unwrap();
        assert_eq!(doc.get("", "name").unwrap().value, "x");
        let subs = doc.section("subjects").unwrap();
        assert_eq!(subs.len(), 2);
        assert_eq!(subs[1].key, "s2");
        assert_eq!(subs[1].line, 7);
    }

    #[test]
    fn malformed_lines_name_the_line() {
        let e = KvDocument::parse("m.ini", "a = 1\nbogus\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(e.to_string().starts_with("m.ini:2:"));
        assert!(KvDocument::parse("m", "[x\n").is_err());
        assert!(KvDocument::parse("m", "a=1\na=2\n").is_err());
        assert!(KvDocument::parse("m", "[x]\n[x]\n").is_err());
    }

    #[test]
    fn suggestion_finds_close_keys() {
        let keys = ["lr", "learning_rate", "batch_size"];
        assert_eq!(nearest_key("learningrate", keys).as_deref(), Some("learning_rate"));
        assert_eq!(nearest_key("zzzz", keys), None);
    }
}
