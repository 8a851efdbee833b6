//! Recursive-descent parser for the expression DSL.
//!
//! Grammar, loosest to tightest binding:
//!   sum     := term (('+' | '-') term)*
//!   term    := unary (('*' | '/') unary)*
//!   unary   := '-' unary | power
//!   power   := primary ('^' unary)?          -- right-associative
//!   primary := number | ident | ident '(' args ')' | '(' sum ')'
//!
//! `quad(t, lower, upper, body)` introduces the bound variable `t` for its
//! body. Exponents must fold to a rational constant; general powers are
//! rejected with a hint to use exp/log. A unary minus applied directly to a
//! numeric literal folds into a negative literal so that printing and
//! parsing are mutually inverse.

use super::{Expr, ExprRef, Rational, Symbol};
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "parse error at byte {}: {}", self.position, self.message)
    }
}

impl std::error::Error for ParseError {}

fn err<T>(position: usize, message: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError {
        position,
        message: message.into(),
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Number { value: f64, text: String },
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

#[derive(Debug, Clone)]
struct SpannedTok {
    tok: Tok,
    pos: usize,
}

fn tokenize(src: &str) -> Result<Vec<SpannedTok>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let pos = i;
        match c {
            ' ' | '\t' | '\n' | '\r' => {
                i += 1;
            }
            '+' => {
                out.push(SpannedTok { tok: Tok::Plus, pos });
                i += 1;
            }
            '-' => {
                out.push(SpannedTok { tok: Tok::Minus, pos });
                i += 1;
            }
            '*' => {
                out.push(SpannedTok { tok: Tok::Star, pos });
                i += 1;
            }
            '/' => {
                out.push(SpannedTok { tok: Tok::Slash, pos });
                i += 1;
            }
            '^' => {
                out.push(SpannedTok { tok: Tok::Caret, pos });
                i += 1;
            }
            '(' => {
                out.push(SpannedTok { tok: Tok::LParen, pos });
                i += 1;
            }
            ')' => {
                out.push(SpannedTok { tok: Tok::RParen, pos });
                i += 1;
            }
            ',' => {
                out.push(SpannedTok { tok: Tok::Comma, pos });
                i += 1;
            }
            '0'..='9' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    if i >= bytes.len() || !bytes[i].is_ascii_digit() {
                        return err(i, "expected digits after decimal point");
                    }
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let value: f64 = text
                    .parse()
                    .map_err(|_| ParseError {
                        position: start,
                        message: format!("invalid numeric literal `{text}`"),
                    })?;
                out.push(SpannedTok {
                    tok: Tok::Number {
                        value,
                        text: text.to_string(),
                    },
                    pos: start,
                });
            }
            'a'..='z' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_lowercase() || bytes[i].is_ascii_digit())
                {
                    i += 1;
                }
                out.push(SpannedTok {
                    tok: Tok::Ident(src[start..i].to_string()),
                    pos: start,
                });
            }
            _ => return err(pos, format!("unexpected character `{c}`")),
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<SpannedTok>,
    cursor: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.cursor).map(|t| &t.tok)
    }

    fn pos(&self) -> usize {
        self.tokens
            .get(self.cursor)
            .map(|t| t.pos)
            .unwrap_or(self.end)
    }

    fn advance(&mut self) -> Option<SpannedTok> {
        let t = self.tokens.get(self.cursor).cloned();
        if t.is_some() {
            self.cursor += 1;
        }
        t
    }

    fn expect(&mut self, want: &Tok, what: &str) -> Result<(), ParseError> {
        match self.peek() {
            Some(t) if t == want => {
                self.advance();
                Ok(())
            }
            _ => err(self.pos(), format!("expected {what}")),
        }
    }

    fn parse_sum(&mut self) -> Result<ExprRef, ParseError> {
        let mut lhs = self.parse_term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.advance();
                    let rhs = self.parse_term()?;
                    lhs = ExprRef::new(Expr::Add(lhs, rhs));
                }
                Some(Tok::Minus) => {
                    self.advance();
                    let rhs = self.parse_term()?;
                    lhs = ExprRef::new(Expr::Sub(lhs, rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn parse_term(&mut self) -> Result<ExprRef, ParseError> {
        let mut lhs = self.parse_unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.advance();
                    let rhs = self.parse_unary()?;
                    lhs = ExprRef::new(Expr::Mul(lhs, rhs));
                }
                Some(Tok::Slash) => {
                    self.advance();
                    let rhs = self.parse_unary()?;
                    lhs = ExprRef::new(Expr::Div(lhs, rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn parse_unary(&mut self) -> Result<ExprRef, ParseError> {
        if matches!(self.peek(), Some(Tok::Minus)) {
            self.advance();
            // A minus directly on a literal becomes a negative literal.
            if let Some(Tok::Number { .. }) = self.peek() {
                let lit = self.parse_power()?;
                return Ok(match &*lit {
                    Expr::Number(v) => Expr::number(-v),
                    _ => ExprRef::new(Expr::Neg(lit)),
                });
            }
            let inner = self.parse_unary()?;
            return Ok(ExprRef::new(Expr::Neg(inner)));
        }
        self.parse_power()
    }

    fn parse_power(&mut self) -> Result<ExprRef, ParseError> {
        let base = self.parse_primary()?;
        if matches!(self.peek(), Some(Tok::Caret)) {
            self.advance();
            let exp_pos = self.pos();
            let exponent = self.parse_unary()?;
            let r = rational_of(&exponent).ok_or(ParseError {
                position: exp_pos,
                message: "exponent must be a rational constant; \
                          write general powers via exp/log"
                    .to_string(),
            })?;
            return Ok(ExprRef::new(Expr::Pow(base, r)));
        }
        Ok(base)
    }

    fn parse_primary(&mut self) -> Result<ExprRef, ParseError> {
        let pos = self.pos();
        match self.advance().map(|t| t.tok) {
            Some(Tok::Number { value, .. }) => Ok(Expr::number(value)),
            Some(Tok::LParen) => {
                let inner = self.parse_sum()?;
                self.expect(&Tok::RParen, "closing `)`")?;
                Ok(inner)
            }
            Some(Tok::Ident(name)) => {
                if matches!(self.peek(), Some(Tok::LParen)) {
                    self.advance();
                    self.parse_call(&name, pos)
                } else {
                    Ok(Expr::var(name.as_str()))
                }
            }
            Some(other) => err(pos, format!("unexpected token `{other:?}`")),
            None => err(pos, "unexpected end of input"),
        }
    }

    fn parse_call(&mut self, name: &str, name_pos: usize) -> Result<ExprRef, ParseError> {
        if name == "quad" {
            let bound_pos = self.pos();
            let bound = match self.advance().map(|t| t.tok) {
                Some(Tok::Ident(b)) => Symbol::new(&b),
                _ => return err(bound_pos, "quad expects a bound variable name first"),
            };
            self.expect(&Tok::Comma, "`,` after the bound variable")?;
            let lower = self.parse_sum()?;
            self.expect(&Tok::Comma, "`,` after the lower limit")?;
            let upper = self.parse_sum()?;
            self.expect(&Tok::Comma, "`,` after the upper limit")?;
            let body = self.parse_sum()?;
            self.expect(&Tok::RParen, "closing `)` of quad")?;
            return Ok(ExprRef::new(Expr::Integral {
                bound,
                lower,
                upper,
                body,
            }));
        }
        let arg = self.parse_sum()?;
        if matches!(self.peek(), Some(Tok::Comma)) {
            return err(self.pos(), format!("`{name}` takes exactly one argument"));
        }
        self.expect(&Tok::RParen, "closing `)`")?;
        let e = match name {
            "exp" => Expr::Exp(arg),
            "log" => Expr::Log(arg),
            "sin" => Expr::Sin(arg),
            "cos" => Expr::Cos(arg),
            "sqrt" => Expr::Sqrt(arg),
            _ => return err(name_pos, format!("unknown function `{name}`")),
        };
        Ok(ExprRef::new(e))
    }
}

/// Folds an exponent expression to an exact rational: literals (using their
/// source text, so `2.5` means 5/2), unary minus, and ratios of literals.
fn rational_of(e: &Expr) -> Option<Rational> {
    fn of_value(v: f64) -> Option<Rational> {
        // Literals re-derived from the stored f64: scale by powers of ten
        // until integral. Covers plain decimals; anything stranger is not a
        // legal exponent anyway.
        let mut num = v;
        let mut den = 1i64;
        for _ in 0..18 {
            if num.fract() == 0.0 && num.abs() < 1e15 {
                return Some(Rational::new(num as i64, den));
            }
            num *= 10.0;
            den = den.checked_mul(10)?;
        }
        None
    }
    match e {
        Expr::Number(v) => of_value(*v),
        Expr::Neg(inner) => rational_of(inner).map(|r| Rational::new(-r.num(), r.den())),
        Expr::Div(a, b) => {
            let ra = rational_of(a)?;
            let rb = rational_of(b)?;
            if rb.num() == 0 {
                return None;
            }
            Some(Rational::new(
                ra.num() * rb.den(),
                ra.den() * rb.num(),
            ))
        }
        _ => None,
    }
}

/// Parses a complete expression. The result is the unique parse under the
/// grammar's precedence rules; no simplification is applied.
pub fn parse_expr(src: &str) -> Result<ExprRef, ParseError> {
    let tokens = tokenize(src)?;
    let mut p = Parser {
        tokens,
        cursor: 0,
        end: src.len(),
    };
    let e = p.parse_sum()?;
    if p.cursor != p.tokens.len() {
        return err(p.pos(), "trailing input after expression");
    }
    e.check_structure().map_err(|se| ParseError {
        position: 0,
        message: se.to_string(),
    })?;
    Ok(e)
}
