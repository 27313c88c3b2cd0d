//! Tokenizer for the expression language.

use std::fmt;

use super::ExprError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Number,
    Identifier,
    /// One of `+ - * / ^ =`.
    Operator,
    /// `(` or `)`.
    Paren,
    Comma,
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TokenKind::Number => "number",
            TokenKind::Identifier => "identifier",
            TokenKind::Operator => "operator",
            TokenKind::Paren => "paren",
            TokenKind::Comma => "comma",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    pub lexeme: String,
    /// 0-based byte offset of the first byte of the lexeme.
    pub offset: usize,
}

impl Token {
    pub(crate) fn is(&self, kind: TokenKind, lexeme: &str) -> bool {
        self.kind == kind && self.lexeme == lexeme
    }
}

/// Splits `source` into tokens. Whitespace separates tokens and is dropped.
pub fn tokenize(source: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = source.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let kind = match c {
            b'0'..=b'9' | b'.' => {
                i = scan_number(bytes, i)?;
                TokenKind::Number
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                TokenKind::Identifier
            }
            b'+' | b'-' | b'*' | b'/' | b'^' | b'=' => {
                i += 1;
                TokenKind::Operator
            }
            b'(' | b')' => {
                i += 1;
                TokenKind::Paren
            }
            b',' => {
                i += 1;
                TokenKind::Comma
            }
            _ => {
                let ch = source[start..].chars().next().unwrap_or('\u{FFFD}');
                return Err(ExprError::InvalidCharacter { offset: start, ch });
            }
        };
        tokens.push(Token {
            kind,
            lexeme: source[start..i].to_string(),
            offset: start,
        });
    }
    Ok(tokens)
}

/// Scans `digits [. digits] [(e|E) [+|-] digits]` starting at `start` and
/// returns the end offset. A leading `.` must be followed by a digit.
fn scan_number(bytes: &[u8], start: usize) -> Result<usize, ExprError> {
    let mut i = start;
    let digits = |i: &mut usize| {
        let s = *i;
        while *i < bytes.len() && bytes[*i].is_ascii_digit() {
            *i += 1;
        }
        *i - s
    };
    let mut mantissa = digits(&mut i);
    if i < bytes.len() && bytes[i] == b'.' {
        i += 1;
        mantissa += digits(&mut i);
    }
    if mantissa == 0 {
        return Err(ExprError::MalformedNumber { offset: start });
    }
    if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
        i += 1;
        let exponent_start = i;
        if i < bytes.len() && (bytes[i] == b'+' || bytes[i] == b'-') {
            i += 1;
        }
        if digits(&mut i) == 0 {
            return Err(ExprError::MalformedNumber { offset: exponent_start });
        }
    }
    // `2x` or `1.5.2` are not numbers followed by something else.
    if i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'.' || bytes[i] == b'_') {
        return Err(ExprError::MalformedNumber { offset: i });
    }
    Ok(i)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(src: &str) -> Vec<TokenKind> {
        tokenize(src).unwrap().into_iter().map(|t| t.kind).collect()
    }

    #[test]
    fn single_identifier() {
        let toks = tokenize("x").unwrap();
        assert_eq!(toks.len(), 1);
        assert_eq!(toks[0].kind, TokenKind::Identifier);
        assert_eq!(toks[0].lexeme, "x");
        assert_eq!(toks[0].offset, 0);
    }

    #[test]
    fn call_with_two_args() {
        use TokenKind::*;
        assert_eq!(
            kinds("max(x-1, 0)"),
            vec![Identifier, Paren, Identifier, Operator, Number, Comma, Number, Paren]
        );
    }

    #[test]
    fn double_sign_in_exponent_is_malformed() {
        assert_eq!(tokenize("1e--3"), Err(ExprError::MalformedNumber { offset: 2 }));
    }

    #[test]
    fn scientific_notation() {
        let toks = tokenize("1.5e-3 + 2E4 + .25").unwrap();
        let nums: Vec<_> = toks
            .iter()
            .filter(|t| t.kind == TokenKind::Number)
            .map(|t| t.lexeme.as_str())
            .collect();
        assert_eq!(nums, vec!["1.5e-3", "2E4", ".25"]);
    }

    #[test]
    fn invalid_character_reports_offset() {
        assert_eq!(
            tokenize("x + $"),
            Err(ExprError::InvalidCharacter { offset: 4, ch: '$' })
        );
        assert_eq!(tokenize("σ"), Err(ExprError::InvalidCharacter { offset: 0, ch: 'σ' }));
    }

    #[test]
    fn trailing_exponent_marker() {
        assert_eq!(tokenize("3e"), Err(ExprError::MalformedNumber { offset: 2 }));
        assert_eq!(tokenize("3x"), Err(ExprError::MalformedNumber { offset: 1 }));
        assert_eq!(tokenize("."), Err(ExprError::MalformedNumber { offset: 0 }));
    }

    #[test]
    fn offsets_increase_and_lexemes_cover_source() {
        let src = "  min( t*x ,  2.0e1)^y ";
        let toks = tokenize(src).unwrap();
        for w in toks.windows(2) {
            assert!(w[0].offset < w[1].offset);
        }
        let joined: String = toks.iter().map(|t| t.lexeme.as_str()).collect();
        let stripped: String = src.chars().filter(|c| !c.is_whitespace()).collect();
        assert_eq!(joined, stripped);
        for t in &toks {
            assert_eq!(&src[t.offset..t.offset + t.lexeme.len()], t.lexeme);
        }
    }
}
