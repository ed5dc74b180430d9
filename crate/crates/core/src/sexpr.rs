//! Minimal s-expression reader for BDDL/PDDL-style task files.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SExpr {
    Atom(String),
    Str(String),
    List(Vec<SExpr>),
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{message} at byte offset {offset}")]
pub struct SexprError {
    pub offset: usize,
    pub message: String,
}

impl SExpr {
    pub fn as_list(&self) -> Option<&[SExpr]> {
        match self {
            SExpr::List(items) => Some(items),
            _ => None,
        }
    }

    /// Atom text or string literal contents.
    pub fn as_text(&self) -> Option<&str> {
        match self {
            SExpr::Atom(s) | SExpr::Str(s) => Some(s),
            SExpr::List(_) => None,
        }
    }

    /// Head atom of a list, e.g. `define` for `(define ...)`.
    pub fn head(&self) -> Option<&str> {
        match self.as_list()?.first()? {
            SExpr::Atom(a) => Some(a),
            _ => None,
        }
    }

    /// Depth-first search for the first list whose head equals `name`
    /// (ASCII case-insensitive).
    pub fn find_list(&self, name: &str) -> Option<&[SExpr]> {
        if self.head().is_some_and(|h| h.eq_ignore_ascii_case(name)) {
            return self.as_list();
        }
        self.as_list()?.iter().find_map(|c| c.find_list(name))
    }
}

impl fmt::Display for SExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SExpr::Atom(a) => f.write_str(a),
            SExpr::Str(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")
            }
            SExpr::List(items) => {
                f.write_str("(")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" ")?;
                    }
                    write!(f, "{item}")?;
                }
                f.write_str(")")
            }
        }
    }
}

fn is_atom_char(c: u8) -> bool {
    !(c.is_ascii_whitespace() || matches!(c, b'(' | b')' | b'"' | b';'))
}

/// Parses every top-level expression in `src`.
pub fn parse_document(src: &str) -> Result<Vec<SExpr>, SexprError> {
    let bytes = src.as_bytes();
    let mut stack: Vec<(usize, Vec<SExpr>)> = Vec::new();
    let mut top = Vec::new();
    let mut i = 0;

    let push = |stack: &mut Vec<(usize, Vec<SExpr>)>, top: &mut Vec<SExpr>, e: SExpr| match stack.last_mut() {
        Some((_, items)) => items.push(e),
        None => top.push(e),
    };

    while i < bytes.len() {
        match bytes[i] {
            c if c.is_ascii_whitespace() => i += 1,
            b';' => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'(' => {
                stack.push((i, Vec::new()));
                i += 1;
            }
            b')' => {
                let Some((_, items)) = stack.pop() else {
                    return Err(SexprError { offset: i, message: "unbalanced ')'".into() });
                };
                push(&mut stack, &mut top, SExpr::List(items));
                i += 1;
            }
            b'"' => {
                let start = i;
                i += 1;
                let mut s = String::new();
                loop {
                    let Some(&c) = bytes.get(i) else {
                        return Err(SexprError { offset: start, message: "unterminated string literal".into() });
                    };
                    match c {
                        b'"' => break,
                        b'\\' if i + 1 < bytes.len() => {
                            let ch = src[i + 1..].chars().next().expect("in bounds");
                            s.push(ch);
                            i += 1 + ch.len_utf8();
                        }
                        _ => {
                            let ch = src[i..].chars().next().expect("in bounds");
                            s.push(ch);
                            i += ch.len_utf8();
                        }
                    }
                }
                i += 1;
                push(&mut stack, &mut top, SExpr::Str(s));
            }
            _ => {
                let start = i;
                while i < bytes.len() && is_atom_char(bytes[i]) {
                    i += 1;
                }
                push(&mut stack, &mut top, SExpr::Atom(src[start..i].to_string()));
            }
        }
    }
    if !stack.is_empty() {
        return Err(SexprError {
            offset: bytes.len(),
            message: format!("unbalanced '(' opened at byte {}", stack.last().map_or(0, |s| s.0)),
        });
    }
    Ok(top)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atom(s: &str) -> SExpr {
        SExpr::Atom(s.into())
    }

    #[test]
    fn parses_nested_lists_strings_and_comments() {
        let doc = parse_document("; header\n(define (problem x) ; trailing\n (:language \"a \\\"b\\\"\"))").unwrap();
        assert_eq!(
            doc,
            vec![SExpr::List(vec![
                atom("define"),
                SExpr::List(vec![atom("problem"), atom("x")]),
                SExpr::List(vec![atom(":language"), SExpr::Str("a \"b\"".into())]),
            ])]
        );
        assert_eq!(doc[0].find_list("problem").unwrap()[1], atom("x"));
    }

    #[test]
    fn unbalanced_offsets() {
        assert_eq!(parse_document("((").unwrap_err().offset, 2);
        assert_eq!(parse_document("(a))").unwrap_err().offset, 3);
        assert_eq!(parse_document("(a \"open").unwrap_err().offset, 3);
    }

    #[test]
    fn display_round_trips() {
        let src = "(define (problem p) (:objects a b - bowl) (:language \"put \\\\ it\") (:init (on a b)))";
        let doc = parse_document(src).unwrap();
        let printed: Vec<String> = doc.iter().map(|e| e.to_string()).collect();
        assert_eq!(parse_document(&printed.join("\n")).unwrap(), doc);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn expr() -> impl Strategy<Value = SExpr> {
            let leaf =
                prop_oneof!["[a-z:?_-][a-z0-9_-]{0,6}".prop_map(SExpr::Atom), "[ -~]{0,8}".prop_map(SExpr::Str),];
            leaf.prop_recursive(4, 32, 5, |inner| proptest::collection::vec(inner, 0..5).prop_map(SExpr::List))
        }

        proptest! {
            #[test]
            fn print_parse_round_trip(e in expr()) {
                let back = parse_document(&e.to_string()).unwrap();
                prop_assert_eq!(back, vec![e]);
            }
        }
    }
}
