//! Recursive-descent parser.
//!
//! ```text
//! sum     := product (('+' | '-') product)*
//! product := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?          right associative
//! primary := number | var | func '(' sum (',' sum)* ')' | '(' sum ')'
//! ```

use super::{BinOp, Expr, Func, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: found {found}, expected one of {}", .expected.join(", "))]
    Syntax { offset: usize, found: String, expected: Vec<&'static str> },
    #[error("unknown identifier `{name}` at byte {offset}; declared variables are {}", .declared.join(", "))]
    UnknownIdentifier { name: String, offset: usize, declared: Vec<String> },
    #[error("function `{name}` at byte {offset} takes {expected} argument(s), got {got}")]
    Arity { name: &'static str, offset: usize, expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Op(c) => format!("`{c}`"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

const OPERAND: &[&str] = &["number", "variable", "function", "`(`", "`-`"];

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == b'.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text = &src[start..i];
            let v: f64 = text.parse().map_err(|_| ParseError::Syntax {
                offset: start,
                found: format!("malformed number `{text}`"),
                expected: vec!["number"],
            })?;
            out.push((Tok::Num(v), start));
        } else if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((Tok::Ident(src[start..i].to_string()), start));
        } else {
            let tok = match c {
                b'+' | b'-' | b'*' | b'/' | b'^' => Tok::Op(c as char),
                b'(' => Tok::LParen,
                b')' => Tok::RParen,
                b',' => Tok::Comma,
                _ => {
                    let ch = src[start..].chars().next().unwrap_or('?');
                    return Err(ParseError::Syntax {
                        offset: start,
                        found: format!("character `{ch}`"),
                        expected: OPERAND.to_vec(),
                    });
                }
            };
            out.push((tok, start));
            i += 1;
        }
    }
    out.push((Tok::End, src.len()));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: &[&'static str]) -> ParseError {
        ParseError::Syntax {
            offset: self.offset(),
            found: self.peek().describe(),
            expected: expected.to_vec(),
        }
    }

    fn sum(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek() {
                Tok::Op('+') => BinOp::Add,
                Tok::Op('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.product()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn product(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Op('*') => BinOp::Mul,
                Tok::Op('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek() == &Tok::Op('-') {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if self.peek() == &Tok::Op('^') {
            self.bump();
            let exponent = self.unary()?;
            return Ok(Expr::binary(BinOp::Pow, base, exponent));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::LParen => {
                self.bump();
                let inner = self.sum()?;
                self.expect_rparen()?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                let offset = self.offset();
                self.bump();
                if let Some(func) = Func::from_name(&name) {
                    return self.call(func, offset);
                }
                match Var::from_name(&name) {
                    Some(v) => Ok(Expr::Var(v)),
                    None => Err(ParseError::UnknownIdentifier {
                        name,
                        offset,
                        declared: vec!["t".into(), "x1..xn".into(), "u1..um".into()],
                    }),
                }
            }
            _ => Err(self.error(OPERAND)),
        }
    }

    fn call(&mut self, func: Func, offset: usize) -> Result<Expr, ParseError> {
        if self.peek() != &Tok::LParen {
            return Err(self.error(&["`(`"]));
        }
        self.bump();
        let mut args = vec![self.sum()?];
        while self.peek() == &Tok::Comma {
            self.bump();
            args.push(self.sum()?);
        }
        self.expect_rparen()?;
        if args.len() != func.arity() {
            return Err(ParseError::Arity {
                name: func.name(),
                offset,
                expected: func.arity(),
                got: args.len(),
            });
        }
        Ok(Expr::Call(func, args))
    }

    fn expect_rparen(&mut self) -> Result<(), ParseError> {
        if self.peek() == &Tok::RParen {
            self.bump();
            Ok(())
        } else {
            Err(self.error(&["`)`", "operator"]))
        }
    }
}

pub(super) fn parse(src: &str) -> Result<Expr, ParseError> {
    let mut p = Parser { toks: lex(src)?, pos: 0 };
    let e = p.sum()?;
    if p.peek() != &Tok::End {
        return Err(p.error(&["operator", "end of input"]));
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitespace_insensitive() {
        assert_eq!(parse("x1+ 2 *u1").unwrap(), parse("  x1 +2*  u1 ").unwrap());
    }

    #[test]
    fn implicit_multiplication_is_rejected() {
        match parse("2x1") {
            Err(ParseError::Syntax { offset, .. }) => assert_eq!(offset, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_error_reports_offset_and_expected() {
        match parse("x1 + ") {
            Err(ParseError::Syntax { offset, found, expected }) => {
                assert_eq!(offset, 5);
                assert_eq!(found, "end of input");
                assert!(expected.contains(&"number"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("(x1"), Err(ParseError::Syntax { offset: 3, .. })));
        assert!(matches!(parse("x1 $ 2"), Err(ParseError::Syntax { offset: 3, .. })));
    }

    #[test]
    fn unknown_identifiers() {
        match parse("y + 1") {
            Err(ParseError::UnknownIdentifier { name, offset, declared }) => {
                assert_eq!(name, "y");
                assert_eq!(offset, 0);
                assert!(!declared.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("x0"), Err(ParseError::UnknownIdentifier { .. })));
        assert!(matches!(parse("log(x1)"), Err(ParseError::UnknownIdentifier { .. })));
    }

    #[test]
    fn arity_is_checked() {
        assert!(matches!(parse("min(x1)"), Err(ParseError::Arity { expected: 2, got: 1, .. })));
        assert!(matches!(parse("sin(x1, x2)"), Err(ParseError::Arity { expected: 1, got: 2, .. })));
    }

    #[test]
    fn scientific_literals() {
        assert_eq!(parse("1e-6").unwrap(), Expr::Num(1e-6));
        assert_eq!(parse("2.5E+3").unwrap(), Expr::Num(2500.0));
        assert_eq!(parse(".5").unwrap(), Expr::Num(0.5));
    }
}
