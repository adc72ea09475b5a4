use std::fmt;

use thiserror::Error;

use super::lexer::{lex, LexError, Lexeme};
use super::{validate, BinOp, Dialect, Expr, Instruction, IrFunction, Operand, Register};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct ParseError {
    /// 1-based line number in the parsed text.
    pub line: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    UnexpectedChar(char),
    ConstantOverflow(String),
    BadNumber(String),
    UnknownRegister(String),
    UnknownOpcode(String),
    Syntax(String),
    BadHeader(String),
    Invalid(String),
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::UnexpectedChar(c) => write!(f, "unexpected character {c:?}"),
            ParseErrorKind::ConstantOverflow(s) => write!(f, "constant {s} does not fit in 64 bits"),
            ParseErrorKind::BadNumber(s) => write!(f, "malformed number {s}"),
            ParseErrorKind::UnknownRegister(s) => write!(f, "unknown register {s}"),
            ParseErrorKind::UnknownOpcode(s) => write!(f, "unknown opcode {s}"),
            ParseErrorKind::Syntax(s) => write!(f, "syntax error: {s}"),
            ParseErrorKind::BadHeader(s) => write!(f, "bad header: {s}"),
            ParseErrorKind::Invalid(s) => write!(f, "invalid function: {s}"),
        }
    }
}

impl From<LexError> for ParseErrorKind {
    fn from(e: LexError) -> Self {
        match e {
            LexError::UnexpectedChar(c) => ParseErrorKind::UnexpectedChar(c),
            LexError::NumberOverflow(s) => ParseErrorKind::ConstantOverflow(s),
            LexError::BadNumber(s) => ParseErrorKind::BadNumber(s),
        }
    }
}

/// Parses newline-separated instructions of `dialect`. The result has an
/// empty id; blank lines and `#` comments are skipped.
pub fn parse_function(text: &str, dialect: Dialect) -> Result<IrFunction, ParseError> {
    parse_body(text.lines().enumerate(), String::new(), dialect)
}

/// Parses an `.irfn` file: `fn <id> @<dialect>` followed by instructions.
pub fn parse_irfn(text: &str) -> Result<IrFunction, ParseError> {
    let mut lines = text.lines().enumerate().skip_while(|(_, l)| is_blank(l));
    let (idx, header) = lines.next().ok_or(ParseError {
        line: 1,
        kind: ParseErrorKind::BadHeader("empty file".into()),
    })?;
    let bad = |msg: &str| ParseError {
        line: idx + 1,
        kind: ParseErrorKind::BadHeader(msg.into()),
    };
    let mut parts = header.split_whitespace();
    if parts.next() != Some("fn") {
        return Err(bad("expected `fn <id> @<dialect>`"));
    }
    let id = parts.next().ok_or_else(|| bad("missing id"))?;
    let tag = parts
        .next()
        .and_then(|t| t.strip_prefix('@'))
        .ok_or_else(|| bad("missing @dialect"))?;
    let dialect = Dialect::from_tag(tag).ok_or_else(|| bad(&format!("unknown dialect {tag}")))?;
    if parts.next().is_some() {
        return Err(bad("trailing text"));
    }
    parse_body(lines, id.to_string(), dialect)
}

fn is_blank(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with('#')
}

fn parse_body<'a>(
    lines: impl Iterator<Item = (usize, &'a str)>,
    id: String,
    dialect: Dialect,
) -> Result<IrFunction, ParseError> {
    let mut instructions = Vec::new();
    let mut last_line = 0;
    for (idx, line) in lines {
        last_line = idx + 1;
        if is_blank(line) {
            continue;
        }
        let instr = parse_instruction(line, dialect).map_err(|kind| ParseError {
            line: idx + 1,
            kind,
        })?;
        instructions.push(instr);
    }
    let f = IrFunction {
        id,
        dialect,
        instructions,
    };
    if let Some(v) = validate(&f).into_iter().next() {
        return Err(ParseError {
            line: last_line.max(1),
            kind: ParseErrorKind::Invalid(v.to_string()),
        });
    }
    Ok(f)
}

/// Parses a single instruction line.
pub(crate) fn parse_instruction(line: &str, dialect: Dialect) -> Result<Instruction, ParseErrorKind> {
    let toks = lex(line)?;
    let mut p = Parser {
        toks: &toks,
        pos: 0,
        dialect,
    };
    let instr = p.instruction()?;
    if p.pos != toks.len() {
        return Err(ParseErrorKind::Syntax(format!(
            "unexpected trailing token {}",
            toks[p.pos].text()
        )));
    }
    Ok(instr)
}

struct Parser<'a> {
    toks: &'a [Lexeme],
    pos: usize,
    dialect: Dialect,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Lexeme> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Result<&Lexeme, ParseErrorKind> {
        let t = self
            .toks
            .get(self.pos)
            .ok_or_else(|| ParseErrorKind::Syntax("unexpected end of line".into()))?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, punct: &str) -> Result<(), ParseErrorKind> {
        match self.next()? {
            Lexeme::Punct(p) if *p == punct => Ok(()),
            other => Err(ParseErrorKind::Syntax(format!(
                "expected `{punct}`, found `{}`",
                other.text()
            ))),
        }
    }

    fn register(&self, word: &str) -> Result<Register, ParseErrorKind> {
        self.dialect
            .register(word)
            .ok_or_else(|| ParseErrorKind::UnknownRegister(word.to_string()))
    }

    fn instruction(&mut self) -> Result<Instruction, ParseErrorKind> {
        let kw = self.dialect.keywords();
        let word = match self.next()? {
            Lexeme::Word(w) => w.clone(),
            other => {
                return Err(ParseErrorKind::Syntax(format!(
                    "expected opcode or register, found `{}`",
                    other.text()
                )))
            }
        };
        if word == kw.ret {
            return Ok(Instruction::Ret);
        }
        if word == kw.nop {
            return Ok(Instruction::Nop);
        }
        if word == kw.jmp {
            let cond = self.expr()?;
            self.expect(",")?;
            let target = self.expr()?;
            return Ok(Instruction::Jmp { cond, target });
        }
        if word == kw.call {
            let target = self.expr()?;
            return Ok(Instruction::Call { target });
        }
        if word == kw.store {
            self.expect("(")?;
            let value = self.expr()?;
            self.expect(",")?;
            let addr = self.expr()?;
            self.expect(")")?;
            return Ok(Instruction::Store { value, addr });
        }
        if !matches!(self.peek(), Some(Lexeme::Punct(":="))) {
            return Err(if looks_like_register(&word) {
                ParseErrorKind::Syntax(format!("expected `:=` after {word}"))
            } else {
                ParseErrorKind::UnknownOpcode(word)
            });
        }
        let dst = self.register(&word)?;
        self.expect(":=")?;
        if matches!(self.peek(), Some(Lexeme::Word(w)) if w == kw.load) {
            self.pos += 1;
            self.expect("(")?;
            let addr = self.expr()?;
            self.expect(")")?;
            return Ok(Instruction::Load { dst, addr });
        }
        let src = self.expr()?;
        Ok(Instruction::Assign { dst, src })
    }

    fn expr(&mut self) -> Result<Expr, ParseErrorKind> {
        let lhs = match self.next()?.clone() {
            Lexeme::Number(n) => return Ok(Expr::Const(n)),
            Lexeme::Word(w) => self.register(&w)?,
            Lexeme::Punct(p) => {
                return Err(ParseErrorKind::Syntax(format!("expected operand, found `{p}`")))
            }
        };
        let op = match self.peek() {
            Some(tok) => match self.binop(tok) {
                Some(op) => op,
                None => return Ok(Expr::Reg(lhs)),
            },
            None => return Ok(Expr::Reg(lhs)),
        };
        self.pos += 1;
        let rhs = match self.next()?.clone() {
            Lexeme::Number(n) => Operand::Const(n),
            Lexeme::Word(w) => Operand::Reg(self.register(&w)?),
            Lexeme::Punct(p) => {
                return Err(ParseErrorKind::Syntax(format!("expected operand, found `{p}`")))
            }
        };
        Ok(Expr::BinOp { op, lhs, rhs })
    }

    fn binop(&self, tok: &Lexeme) -> Option<BinOp> {
        let kw = self.dialect.keywords();
        match tok {
            Lexeme::Punct(p) => kw.op_from(p),
            Lexeme::Word(w) => kw.op_from(w),
            Lexeme::Number(_) => None,
        }
    }
}

fn looks_like_register(word: &str) -> bool {
    Dialect::ALL.iter().any(|d| d.register(word).is_some())
}
