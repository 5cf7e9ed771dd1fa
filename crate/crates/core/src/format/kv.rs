//! Flat `key = value` text: one pair per line, `#` starts a comment.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str, source_name: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| {
            Error::format(source_name, format!("line {line}"), format!("expected `key = value`, got `{content}`"))
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::format(source_name, format!("line {line}"), "empty key"));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::format(
                source_name,
                format!("line {line}"),
                format!("duplicate key `{key}` (first set on line {})", prev.line),
            ));
        }
        out.push(Entry {
            line,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

pub fn render<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    }
    s
}

/// Parses an entry value, reporting the line on failure.
pub fn value<T: std::str::FromStr>(entry: &Entry, source_name: &str) -> Result<T> {
    entry.value.parse().map_err(|_| {
        Error::format(
            source_name,
            format!("line {}", entry.line),
            format!("invalid value `{}` for `{}`", entry.value, entry.key),
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let e = parse("# header\n\nk = 45  # neighbors\nfamily=uniform\n", "c").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].line, e[0].key.as_str(), e[0].value.as_str()), (3, "k", "45"));
        assert_eq!(e[1].value, "uniform");
    }

    #[test]
    fn reports_bad_lines() {
        let err = parse("a = 1\nnonsense\n", "cfg").unwrap_err();
        assert!(matches!(err, Error::Format { ref location, .. } if location == "line 2"));
        assert!(parse("a = 1\na = 2\n", "cfg").is_err());
        let e = parse("k = x\n", "cfg").unwrap();
        assert!(value::<usize>(&e[0], "cfg").is_err());
    }

    #[test]
    fn render_parses_back() {
        let text = render([("a", "1".to_string()), ("b", "two".to_string())]);
        let e = parse(&text, "r").unwrap();
        assert_eq!(e[1].value, "two");
    }
}
