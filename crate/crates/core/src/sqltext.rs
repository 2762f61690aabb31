//! Lightweight SQL lexing: enough to find keywords at a given nesting depth
//! and statement boundaries while skipping literals and comments.

/// A bare word (keyword or identifier) with its byte span and paren depth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word<'a> {
    pub text: &'a str,
    pub start: usize,
    pub depth: usize,
}

/// Lexical events produced by [`scan`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token<'a> {
    Word(Word<'a>),
    /// A `;` at paren depth 0, with its byte offset.
    Semicolon(usize),
}

fn skip_quoted(bytes: &[u8], mut i: usize, close: u8) -> usize {
    // `i` points just after the opening quote; doubled closers are escapes.
    while i < bytes.len() {
        if bytes[i] == close {
            if close != b']' && bytes.get(i + 1) == Some(&close) {
                i += 2;
                continue;
            }
            return i + 1;
        }
        i += 1;
    }
    bytes.len()
}

/// Scans `sql`, skipping string literals, quoted identifiers and comments.
pub fn scan(sql: &str) -> Vec<Token<'_>> {
    let bytes = sql.as_bytes();
    let mut tokens = Vec::new();
    let mut depth = 0usize;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b'\'' | b'"' | b'`' => i = skip_quoted(bytes, i + 1, b),
            b'[' => i = skip_quoted(bytes, i + 1, b']'),
            b'-' if bytes.get(i + 1) == Some(&b'-') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                i += 2;
                while i < bytes.len() && !(bytes[i] == b'*' && bytes.get(i + 1) == Some(&b'/')) {
                    i += 1;
                }
                i = (i + 2).min(bytes.len());
            }
            b'(' => {
                depth += 1;
                i += 1;
            }
            b')' => {
                depth = depth.saturating_sub(1);
                i += 1;
            }
            b';' => {
                if depth == 0 {
                    tokens.push(Token::Semicolon(i));
                }
                i += 1;
            }
            _ if b.is_ascii_alphanumeric() || b == b'_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                tokens.push(Token::Word(Word {
                    text: &sql[start..i],
                    start,
                    depth,
                }));
            }
            _ => i += 1,
        }
    }
    tokens
}

/// Whether `ORDER BY` appears outside literals and parentheses.
pub fn detect_order_by(sql: &str) -> bool {
    let words: Vec<Word<'_>> = scan(sql)
        .into_iter()
        .filter_map(|t| match t {
            Token::Word(w) => Some(w),
            Token::Semicolon(_) => None,
        })
        .collect();
    words.windows(2).any(|w| {
        w[0].depth == 0
            && w[1].depth == 0
            && w[0].text.eq_ignore_ascii_case("order")
            && w[1].text.eq_ignore_ascii_case("by")
    })
}

/// Byte offset just past the first top-level `;` at or after `from`.
pub fn statement_end(sql: &str, from: usize) -> Option<usize> {
    scan(&sql[from..]).into_iter().find_map(|t| match t {
        Token::Semicolon(i) => Some(from + i + 1),
        Token::Word(_) => None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_by_cases() {
        assert!(detect_order_by("SELECT a FROM t ORDER BY a"));
        assert!(detect_order_by("select a from t order\n  by a desc"));
        assert!(!detect_order_by(
            "SELECT a FROM t WHERE b IN (SELECT c FROM u ORDER BY c LIMIT 1)"
        ));
        assert!(!detect_order_by("SELECT 'ORDER BY' FROM t"));
        assert!(!detect_order_by("SELECT \"order\" FROM t -- ORDER BY x"));
        assert!(!detect_order_by("SELECT a FROM t /* order by a */"));
        assert!(!detect_order_by("SELECT a AS border, by FROM t"));
    }

    #[test]
    fn statement_end_skips_literals() {
        let s = "SELECT ';' FROM t; junk";
        assert_eq!(statement_end(s, 0), Some(18));
        assert_eq!(statement_end("SELECT 1", 0), None);
    }
}
