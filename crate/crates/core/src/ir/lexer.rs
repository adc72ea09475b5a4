//! Splits one IR line into words, numbers, and punctuation.
//!
//! The same lexemes feed both the parser and the model tokenizer, so every
//! punctuation mark survives as its own token.

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Lexeme {
    /// Register names and keywords.
    Word(String),
    Number(u64),
    Punct(&'static str),
}

impl Lexeme {
    pub fn text(&self) -> String {
        match self {
            Lexeme::Word(w) => w.clone(),
            Lexeme::Number(n) => format!("{n:#x}"),
            Lexeme::Punct(p) => (*p).to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LexError {
    UnexpectedChar(char),
    NumberOverflow(String),
    BadNumber(String),
}

const PUNCT: [&str; 12] = [":=", "<<", ">>", "(", ")", ",", "+", "-", "*", "&", "|", "^"];

pub fn lex(line: &str) -> Result<Vec<Lexeme>, LexError> {
    let mut out = Vec::new();
    let bytes = line.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Lexeme::Word(line[start..i].to_string()));
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_alphanumeric() {
                i += 1;
            }
            out.push(Lexeme::Number(parse_number(&line[start..i])?));
            continue;
        }
        match PUNCT.iter().find(|p| line[i..].starts_with(**p)) {
            Some(p) => {
                out.push(Lexeme::Punct(p));
                i += p.len();
            }
            None => {
                let ch = line[i..].chars().next().unwrap_or(c);
                return Err(LexError::UnexpectedChar(ch));
            }
        }
    }
    Ok(out)
}

fn parse_number(s: &str) -> Result<u64, LexError> {
    let (digits, radix) = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => (h, 16),
        None => (s, 10),
    };
    if digits.is_empty() || !digits.chars().all(|c| c.is_digit(radix)) {
        return Err(LexError::BadNumber(s.to_string()));
    }
    u64::from_str_radix(digits, radix).map_err(|_| LexError::NumberOverflow(s.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation() {
        let l = lex("r2 := load(r15 + 0x8)").unwrap();
        let texts: Vec<_> = l.iter().map(Lexeme::text).collect();
        assert_eq!(texts, ["r2", ":=", "load", "(", "r15", "+", "0x8", ")"]);
    }

    #[test]
    fn shifts_are_single_tokens() {
        let l = lex("r1 := r1 << 0x2").unwrap();
        assert_eq!(l[3], Lexeme::Punct("<<"));
    }

    #[test]
    fn numbers() {
        assert_eq!(lex("17").unwrap(), [Lexeme::Number(17)]);
        assert_eq!(lex("0xffffffffffffffff").unwrap(), [Lexeme::Number(u64::MAX)]);
        assert!(matches!(lex("0x10000000000000000"), Err(LexError::NumberOverflow(_))));
        assert!(matches!(lex("12ab"), Err(LexError::BadNumber(_))));
        assert!(matches!(lex("r1 := $"), Err(LexError::UnexpectedChar('$'))));
    }
}
