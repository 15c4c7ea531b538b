//! Coefficient expressions: parsing, symbolic differentiation and point evaluation.
//!
//! Every coefficient function consumed by the toolkit (diffusion coefficients
//! `a`, `b`, `c`, the multi-dimensional fields `a_ij`, `b_i`) is represented as
//! an immutable [`Expr`] tree over constants, variables `x1..xd` (plain `x`
//! in one dimension), the arithmetic operators, integer powers, `exp`, `log`,
//! `min` and `max`.
//!
//! Differentiation is exact on the smooth fragment. `min`/`max` differentiate
//! to a flagged [`Expr::Piecewise`] node which downstream symbolic checks
//! treat as non-smooth.

use std::fmt;

use thiserror::Error;

pub mod poly;

pub use poly::Polynomial;

/// Parse or grammar error, with the byte offset where it occurred.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("{message} at offset {position}")]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

/// Runtime domain error during point evaluation.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("log of non-positive value {0}")]
    LogDomain(f64),
    #[error("zero raised to negative power {0}")]
    ZeroToNegativePower(i32),
    #[error("non-finite result")]
    NonFinite,
    #[error("variable x{} out of range for point of dimension {dim}", index + 1)]
    VarOutOfRange { index: usize, dim: usize },
}

/// Expression tree over constants and variables `x1..xd`.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Zero-based variable index (`x1` is `Var(0)`).
    Var(usize),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    /// Integer power; general real exponents are expressed via `exp`/`log`.
    Pow(Box<Expr>, i32),
    Exp(Box<Expr>),
    Log(Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
    /// `if lhs <= rhs { le } else { gt }`; produced by differentiating
    /// `min`/`max`, flagged as non-smooth by [`Expr::is_smooth`].
    Piecewise {
        lhs: Box<Expr>,
        rhs: Box<Expr>,
        le: Box<Expr>,
        gt: Box<Expr>,
    },
}

impl Expr {
    pub fn constant(v: f64) -> Expr {
        Expr::Const(v)
    }

    pub fn var(i: usize) -> Expr {
        Expr::Var(i)
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        Expr::Add(Box::new(a), Box::new(b))
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        Expr::Sub(Box::new(a), Box::new(b))
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        Expr::Mul(Box::new(a), Box::new(b))
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        Expr::Div(Box::new(a), Box::new(b))
    }

    pub fn pow(a: Expr, n: i32) -> Expr {
        Expr::Pow(Box::new(a), n)
    }

    /// 1 + highest variable index appearing in the tree (0 for constants).
    pub fn min_dim(&self) -> usize {
        match self {
            Expr::Const(_) => 0,
            Expr::Var(i) => i + 1,
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Min(a, b)
            | Expr::Max(a, b) => a.min_dim().max(b.min_dim()),
            Expr::Pow(a, _) | Expr::Exp(a) | Expr::Log(a) => a.min_dim(),
            Expr::Piecewise { lhs, rhs, le, gt } => lhs
                .min_dim()
                .max(rhs.min_dim())
                .max(le.min_dim())
                .max(gt.min_dim()),
        }
    }

    /// True when the tree contains no `min`/`max`/piecewise node, so that
    /// symbolic derivatives of any order exist.
    pub fn is_smooth(&self) -> bool {
        match self {
            Expr::Const(_) | Expr::Var(_) => true,
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.is_smooth() && b.is_smooth()
            }
            Expr::Pow(a, _) | Expr::Exp(a) | Expr::Log(a) => a.is_smooth(),
            Expr::Min(..) | Expr::Max(..) | Expr::Piecewise { .. } => false,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    pub fn is_one(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 1.0)
    }

    /// Evaluate at a point; the point dimension must cover every variable.
    pub fn evaluate(&self, point: &[f64]) -> Result<f64, EvalError> {
        let v = self.eval_inner(point)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite)
        }
    }

    fn eval_inner(&self, point: &[f64]) -> Result<f64, EvalError> {
        match self {
            Expr::Const(c) => Ok(*c),
            Expr::Var(i) => point.get(*i).copied().ok_or(EvalError::VarOutOfRange {
                index: *i,
                dim: point.len(),
            }),
            Expr::Add(a, b) => Ok(a.eval_inner(point)? + b.eval_inner(point)?),
            Expr::Sub(a, b) => Ok(a.eval_inner(point)? - b.eval_inner(point)?),
            Expr::Mul(a, b) => Ok(a.eval_inner(point)? * b.eval_inner(point)?),
            Expr::Div(a, b) => {
                let d = b.eval_inner(point)?;
                if d == 0.0 {
                    return Err(EvalError::DivisionByZero);
                }
                Ok(a.eval_inner(point)? / d)
            }
            Expr::Pow(a, n) => {
                let base = a.eval_inner(point)?;
                if base == 0.0 && *n < 0 {
                    return Err(EvalError::ZeroToNegativePower(*n));
                }
                Ok(base.powi(*n))
            }
            Expr::Exp(a) => Ok(a.eval_inner(point)?.exp()),
            Expr::Log(a) => {
                let v = a.eval_inner(point)?;
                if v <= 0.0 {
                    return Err(EvalError::LogDomain(v));
                }
                Ok(v.ln())
            }
            Expr::Min(a, b) => Ok(a.eval_inner(point)?.min(b.eval_inner(point)?)),
            Expr::Max(a, b) => Ok(a.eval_inner(point)?.max(b.eval_inner(point)?)),
            Expr::Piecewise { lhs, rhs, le, gt } => {
                if lhs.eval_inner(point)? <= rhs.eval_inner(point)? {
                    le.eval_inner(point)
                } else {
                    gt.eval_inner(point)
                }
            }
        }
    }

    /// Symbolic partial derivative with respect to variable `var`,
    /// canonically simplified.
    pub fn differentiate(&self, var: usize) -> Expr {
        self.diff_raw(var).simplify()
    }

    fn diff_raw(&self, var: usize) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(i) => Expr::Const(if *i == var { 1.0 } else { 0.0 }),
            Expr::Add(a, b) => Expr::add(a.diff_raw(var), b.diff_raw(var)),
            Expr::Sub(a, b) => Expr::sub(a.diff_raw(var), b.diff_raw(var)),
            Expr::Mul(a, b) => Expr::add(
                Expr::mul(a.diff_raw(var), (**b).clone()),
                Expr::mul((**a).clone(), b.diff_raw(var)),
            ),
            Expr::Div(a, b) => {
                // (a/b)' = a'/b - a b' / b^2
                Expr::sub(
                    Expr::div(a.diff_raw(var), (**b).clone()),
                    Expr::div(
                        Expr::mul((**a).clone(), b.diff_raw(var)),
                        Expr::pow((**b).clone(), 2),
                    ),
                )
            }
            Expr::Pow(a, n) => Expr::mul(
                Expr::mul(Expr::Const(f64::from(*n)), Expr::pow((**a).clone(), n - 1)),
                a.diff_raw(var),
            ),
            Expr::Exp(a) => Expr::mul(Expr::Exp(a.clone()), a.diff_raw(var)),
            Expr::Log(a) => Expr::div(a.diff_raw(var), (**a).clone()),
            Expr::Min(a, b) => Expr::Piecewise {
                lhs: a.clone(),
                rhs: b.clone(),
                le: Box::new(a.diff_raw(var)),
                gt: Box::new(b.diff_raw(var)),
            },
            Expr::Max(a, b) => Expr::Piecewise {
                lhs: a.clone(),
                rhs: b.clone(),
                le: Box::new(b.diff_raw(var)),
                gt: Box::new(a.diff_raw(var)),
            },
            Expr::Piecewise { lhs, rhs, le, gt } => Expr::Piecewise {
                lhs: lhs.clone(),
                rhs: rhs.clone(),
                le: Box::new(le.diff_raw(var)),
                gt: Box::new(gt.diff_raw(var)),
            },
        }
    }

    /// Derivative along a multi-index (`orders[i]` derivatives in variable `i`).
    pub fn differentiate_multi(&self, orders: &[u8]) -> Expr {
        let mut e = self.clone();
        for (var, &k) in orders.iter().enumerate() {
            for _ in 0..k {
                e = e.differentiate(var);
            }
        }
        e
    }

    /// Canonical simplification: constant folding, `±0` elimination,
    /// `×1`/`×0` elimination and power flattening. Nothing stronger; symbolic
    /// zero-testing beyond that is numeric (see the multi-d checks).
    pub fn simplify(&self) -> Expr {
        match self {
            Expr::Const(_) | Expr::Var(_) => self.clone(),
            Expr::Add(a, b) => {
                let (a, b) = (a.simplify(), b.simplify());
                match (&a, &b) {
                    (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
                    (Expr::Const(c), _) if *c == 0.0 => b,
                    (_, Expr::Const(c)) if *c == 0.0 => a,
                    _ => Expr::add(a, b),
                }
            }
            Expr::Sub(a, b) => {
                let (a, b) = (a.simplify(), b.simplify());
                match (&a, &b) {
                    (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
                    (_, Expr::Const(c)) if *c == 0.0 => a,
                    _ => Expr::sub(a, b),
                }
            }
            Expr::Mul(a, b) => {
                let (a, b) = (a.simplify(), b.simplify());
                match (&a, &b) {
                    (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
                    (Expr::Const(c), _) | (_, Expr::Const(c)) if *c == 0.0 => Expr::Const(0.0),
                    (Expr::Const(c), _) if *c == 1.0 => b,
                    (_, Expr::Const(c)) if *c == 1.0 => a,
                    _ => Expr::mul(a, b),
                }
            }
            Expr::Div(a, b) => {
                let (a, b) = (a.simplify(), b.simplify());
                match (&a, &b) {
                    (Expr::Const(x), Expr::Const(y)) if *y != 0.0 => Expr::Const(x / y),
                    (Expr::Const(c), _) if *c == 0.0 => Expr::Const(0.0),
                    (_, Expr::Const(c)) if *c == 1.0 => a,
                    _ => Expr::div(a, b),
                }
            }
            Expr::Pow(a, n) => {
                let a = a.simplify();
                match (&a, *n) {
                    (_, 0) => Expr::Const(1.0),
                    (_, 1) => a,
                    (Expr::Const(c), n) if !(*c == 0.0 && n < 0) => Expr::Const(c.powi(n)),
                    (Expr::Pow(inner, m), n) => Expr::Pow(inner.clone(), m * n).simplify(),
                    _ => Expr::pow(a, *n),
                }
            }
            Expr::Exp(a) => {
                let a = a.simplify();
                match &a {
                    Expr::Const(c) => Expr::Const(c.exp()),
                    _ => Expr::Exp(Box::new(a)),
                }
            }
            Expr::Log(a) => {
                let a = a.simplify();
                match &a {
                    Expr::Const(c) if *c > 0.0 => Expr::Const(c.ln()),
                    _ => Expr::Log(Box::new(a)),
                }
            }
            Expr::Min(a, b) => {
                let (a, b) = (a.simplify(), b.simplify());
                match (&a, &b) {
                    (Expr::Const(x), Expr::Const(y)) => Expr::Const(x.min(*y)),
                    _ => Expr::Min(Box::new(a), Box::new(b)),
                }
            }
            Expr::Max(a, b) => {
                let (a, b) = (a.simplify(), b.simplify());
                match (&a, &b) {
                    (Expr::Const(x), Expr::Const(y)) => Expr::Const(x.max(*y)),
                    _ => Expr::Max(Box::new(a), Box::new(b)),
                }
            }
            Expr::Piecewise { lhs, rhs, le, gt } => {
                let (lhs, rhs) = (lhs.simplify(), rhs.simplify());
                let (le, gt) = (le.simplify(), gt.simplify());
                if le == gt {
                    return le;
                }
                if let (Expr::Const(x), Expr::Const(y)) = (&lhs, &rhs) {
                    return if x <= y { le } else { gt };
                }
                Expr::Piecewise {
                    lhs: Box::new(lhs),
                    rhs: Box::new(rhs),
                    le: Box::new(le),
                    gt: Box::new(gt),
                }
            }
        }
    }

    /// Exact multivariate polynomial normalization, when the tree lies in the
    /// polynomial fragment (no division by non-constants, `exp`, `log`,
    /// `min`/`max`, or negative powers). Used as the oracle for symbolic
    /// operator identities on monomial test functions.
    pub fn to_polynomial(&self, dim: usize) -> Option<Polynomial> {
        match self {
            Expr::Const(c) => Some(Polynomial::constant(dim, *c)),
            Expr::Var(i) => {
                if *i < dim {
                    Some(Polynomial::variable(dim, *i))
                } else {
                    None
                }
            }
            Expr::Add(a, b) => Some(a.to_polynomial(dim)?.add(&b.to_polynomial(dim)?)),
            Expr::Sub(a, b) => Some(a.to_polynomial(dim)?.sub(&b.to_polynomial(dim)?)),
            Expr::Mul(a, b) => Some(a.to_polynomial(dim)?.mul(&b.to_polynomial(dim)?)),
            Expr::Div(a, b) => match b.simplify() {
                Expr::Const(c) if c != 0.0 => Some(a.to_polynomial(dim)?.scale(1.0 / c)),
                _ => None,
            },
            Expr::Pow(a, n) => {
                if *n < 0 {
                    return None;
                }
                Some(a.to_polynomial(dim)?.powi(*n as u32))
            }
            _ => None,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if *c < 0.0 {
                    write!(f, "({c})")
                } else {
                    write!(f, "{c}")
                }
            }
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, n) => {
                let needs_parens = !matches!(**a, Expr::Var(_) | Expr::Const(_));
                if needs_parens {
                    write!(f, "({a})")?;
                } else {
                    write!(f, "{a}")?;
                }
                if *n < 0 {
                    write!(f, "^({n})")
                } else {
                    write!(f, "^{n}")
                }
            }
            Expr::Exp(a) => write!(f, "exp({a})"),
            Expr::Log(a) => write!(f, "log({a})"),
            Expr::Min(a, b) => write!(f, "min({a}, {b})"),
            Expr::Max(a, b) => write!(f, "max({a}, {b})"),
            Expr::Piecewise { lhs, rhs, le, gt } => {
                write!(f, "piecewise({lhs} <= {rhs}, {le}, {gt})")
            }
        }
    }
}

/// Parse a coefficient expression over variables `x1..xd` (`x` allowed when
/// `dim == 1`). Standard precedence: `^` binds tightest, then unary minus,
/// then `*`/`/`, then `+`/`-`.
pub fn parse(text: &str, dim: usize) -> Result<Expr, ParseError> {
    let tokens = tokenize(text)?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        dim,
        input_len: text.len(),
    };
    let e = parser.parse_expr()?;
    if parser.pos < parser.tokens.len() {
        let tok = &parser.tokens[parser.pos];
        return Err(ParseError {
            position: tok.pos,
            message: format!("unexpected trailing input `{}`", tok.text),
        });
    }
    Ok(e.simplify())
}

#[derive(Debug, Clone)]
struct Token {
    text: String,
    pos: usize,
    kind: TokenKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum TokenKind {
    Number,
    Ident,
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

fn tokenize(text: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let start = i;
        match c {
            ' ' | '\t' | '\n' | '\r' => {
                i += 1;
            }
            '+' | '-' | '*' | '/' | '^' | '(' | ')' | ',' => {
                let kind = match c {
                    '+' => TokenKind::Plus,
                    '-' => TokenKind::Minus,
                    '*' => TokenKind::Star,
                    '/' => TokenKind::Slash,
                    '^' => TokenKind::Caret,
                    '(' => TokenKind::LParen,
                    ')' => TokenKind::RParen,
                    _ => TokenKind::Comma,
                };
                out.push(Token {
                    text: c.to_string(),
                    pos: start,
                    kind,
                });
                i += 1;
            }
            '0'..='9' | '.' => {
                let mut j = i;
                while j < bytes.len() && matches!(bytes[j] as char, '0'..='9' | '.') {
                    j += 1;
                }
                // scientific notation: 1e-3, 2.5E+4
                if j < bytes.len() && matches!(bytes[j] as char, 'e' | 'E') {
                    let mut k = j + 1;
                    if k < bytes.len() && matches!(bytes[k] as char, '+' | '-') {
                        k += 1;
                    }
                    if k < bytes.len() && (bytes[k] as char).is_ascii_digit() {
                        while k < bytes.len() && (bytes[k] as char).is_ascii_digit() {
                            k += 1;
                        }
                        j = k;
                    }
                }
                out.push(Token {
                    text: text[i..j].to_string(),
                    pos: start,
                    kind: TokenKind::Number,
                });
                i = j;
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let mut j = i;
                while j < bytes.len()
                    && matches!(bytes[j] as char, 'a'..='z' | 'A'..='Z' | '0'..='9' | '_')
                {
                    j += 1;
                }
                out.push(Token {
                    text: text[i..j].to_string(),
                    pos: start,
                    kind: TokenKind::Ident,
                });
                i = j;
            }
            _ => {
                return Err(ParseError {
                    position: start,
                    message: format!("unexpected character `{c}`"),
                })
            }
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    dim: usize,
    input_len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn eof_error(&self, expected: &str) -> ParseError {
        ParseError {
            position: self.input_len,
            message: format!("expected {expected}, found end of input"),
        }
    }

    fn expect(&mut self, kind: TokenKind, what: &str) -> Result<Token, ParseError> {
        match self.peek() {
            Some(t) if t.kind == kind => {
                let t = t.clone();
                self.pos += 1;
                Ok(t)
            }
            Some(t) => Err(ParseError {
                position: t.pos,
                message: format!("expected {what}, found `{}`", t.text),
            }),
            None => Err(self.eof_error(what)),
        }
    }

    fn parse_expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_term()?;
        while let Some(t) = self.peek() {
            match t.kind {
                TokenKind::Plus => {
                    self.pos += 1;
                    lhs = Expr::add(lhs, self.parse_term()?);
                }
                TokenKind::Minus => {
                    self.pos += 1;
                    lhs = Expr::sub(lhs, self.parse_term()?);
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn parse_term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_unary()?;
        while let Some(t) = self.peek() {
            match t.kind {
                TokenKind::Star => {
                    self.pos += 1;
                    lhs = Expr::mul(lhs, self.parse_unary()?);
                }
                TokenKind::Slash => {
                    self.pos += 1;
                    lhs = Expr::div(lhs, self.parse_unary()?);
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn parse_unary(&mut self) -> Result<Expr, ParseError> {
        if let Some(t) = self.peek() {
            if t.kind == TokenKind::Minus {
                self.pos += 1;
                let inner = self.parse_unary()?;
                return Ok(Expr::sub(Expr::Const(0.0), inner));
            }
        }
        self.parse_power()
    }

    fn parse_power(&mut self) -> Result<Expr, ParseError> {
        let base = self.parse_atom()?;
        if let Some(t) = self.peek() {
            if t.kind == TokenKind::Caret {
                self.pos += 1;
                let n = self.parse_int_exponent()?;
                return Ok(Expr::pow(base, n));
            }
        }
        Ok(base)
    }

    fn parse_int_exponent(&mut self) -> Result<i32, ParseError> {
        let mut negative = false;
        let mut parenthesized = false;
        if let Some(t) = self.peek() {
            if t.kind == TokenKind::LParen {
                self.pos += 1;
                parenthesized = true;
            }
        }
        if let Some(t) = self.peek() {
            if t.kind == TokenKind::Minus {
                self.pos += 1;
                negative = true;
            }
        }
        let tok = self.expect(TokenKind::Number, "integer exponent")?;
        let n: i32 = tok.text.parse().map_err(|_| ParseError {
            position: tok.pos,
            message: format!("exponent `{}` is not an integer", tok.text),
        })?;
        if parenthesized {
            self.expect(TokenKind::RParen, "`)`")?;
        }
        Ok(if negative { -n } else { n })
    }

    fn parse_atom(&mut self) -> Result<Expr, ParseError> {
        let tok = match self.peek() {
            Some(t) => t.clone(),
            None => return Err(self.eof_error("expression")),
        };
        match tok.kind {
            TokenKind::Number => {
                self.pos += 1;
                let v: f64 = tok.text.parse().map_err(|_| ParseError {
                    position: tok.pos,
                    message: format!("invalid number `{}`", tok.text),
                })?;
                Ok(Expr::Const(v))
            }
            TokenKind::LParen => {
                self.pos += 1;
                let e = self.parse_expr()?;
                self.expect(TokenKind::RParen, "`)`")?;
                Ok(e)
            }
            TokenKind::Ident => {
                self.pos += 1;
                match tok.text.as_str() {
                    "exp" => Ok(Expr::Exp(Box::new(self.parse_call_1()?))),
                    "log" | "ln" => Ok(Expr::Log(Box::new(self.parse_call_1()?))),
                    "min" => {
                        let (a, b) = self.parse_call_2()?;
                        Ok(Expr::Min(Box::new(a), Box::new(b)))
                    }
                    "max" => {
                        let (a, b) = self.parse_call_2()?;
                        Ok(Expr::Max(Box::new(a), Box::new(b)))
                    }
                    name => self.parse_variable(name, tok.pos),
                }
            }
            _ => Err(ParseError {
                position: tok.pos,
                message: format!("unexpected token `{}`", tok.text),
            }),
        }
    }

    fn parse_call_1(&mut self) -> Result<Expr, ParseError> {
        self.expect(TokenKind::LParen, "`(`")?;
        let e = self.parse_expr()?;
        self.expect(TokenKind::RParen, "`)`")?;
        Ok(e)
    }

    fn parse_call_2(&mut self) -> Result<(Expr, Expr), ParseError> {
        self.expect(TokenKind::LParen, "`(`")?;
        let a = self.parse_expr()?;
        self.expect(TokenKind::Comma, "`,`")?;
        let b = self.parse_expr()?;
        self.expect(TokenKind::RParen, "`)`")?;
        Ok((a, b))
    }

    fn parse_variable(&mut self, name: &str, pos: usize) -> Result<Expr, ParseError> {
        if name == "x" {
            if self.dim == 1 {
                return Ok(Expr::Var(0));
            }
            return Err(ParseError {
                position: pos,
                message: format!(
                    "plain `x` is only valid in dimension 1 (dim = {})",
                    self.dim
                ),
            });
        }
        if let Some(rest) = name.strip_prefix('x') {
            if let Ok(k) = rest.parse::<usize>() {
                if k >= 1 && k <= self.dim {
                    return Ok(Expr::Var(k - 1));
                }
                return Err(ParseError {
                    position: pos,
                    message: format!("variable `{name}` out of range for dimension {}", self.dim),
                });
            }
        }
        Err(ParseError {
            position: pos,
            message: format!("unknown identifier `{name}`"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(text: &str) -> Expr {
        parse(text, 1).unwrap()
    }

    #[test]
    fn parses_wright_fisher_coefficient() {
        let e = p("0.5*x*(1-x)");
        assert_eq!(e.evaluate(&[0.5]).unwrap(), 0.125);
        assert_eq!(e.evaluate(&[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn parses_constant_zero() {
        assert_eq!(p("0"), Expr::Const(0.0));
    }

    #[test]
    fn syntax_error_carries_position() {
        let err = parse("x+*2", 1).unwrap_err();
        assert_eq!(err.position, 2);
    }

    #[test]
    fn unknown_variable_is_rejected() {
        assert!(parse("x3", 2).is_err());
        assert!(parse("y", 1).is_err());
        assert!(parse("x", 2).is_err());
        assert!(parse("x2", 2).is_ok());
    }

    #[test]
    fn power_rule() {
        let e = p("x^2").differentiate(0);
        // 2 * x
        assert_eq!(e.evaluate(&[3.0]).unwrap(), 6.0);
        assert_eq!(e, Expr::mul(Expr::Const(2.0), Expr::Var(0)));
    }

    #[test]
    fn wright_fisher_derivative() {
        let e = p("0.5*x*(1-x)").differentiate(0);
        for x in [0.0, 0.25, 0.5, 0.9] {
            let expected = 0.5 - x;
            assert!((e.evaluate(&[x]).unwrap() - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_partial_of_product() {
        let e = parse("x1*x2", 2).unwrap().differentiate(1);
        assert_eq!(e.evaluate(&[3.0, 7.0]).unwrap(), 3.0);
    }

    #[test]
    fn domain_errors() {
        assert_eq!(p("1/x").evaluate(&[0.0]), Err(EvalError::DivisionByZero));
        assert!(matches!(
            p("log(x)").evaluate(&[-1.0]),
            Err(EvalError::LogDomain(_))
        ));
        assert_eq!(p("exp(0)").evaluate(&[0.0]).unwrap(), 1.0);
    }

    #[test]
    fn min_max_derivative_is_piecewise() {
        let d = p("min(x, x^2)").differentiate(0);
        assert!(!d.is_smooth());
        // on (0,1) the minimum is x^2, so the derivative there is 2x
        assert_eq!(d.evaluate(&[0.25]).unwrap(), 0.5);
        // beyond 1 the minimum is x itself
        assert_eq!(d.evaluate(&[2.0]).unwrap(), 1.0);
    }

    #[test]
    fn simplify_eliminates_units() {
        assert_eq!(p("x + 0"), Expr::Var(0));
        assert_eq!(p("1 * x"), Expr::Var(0));
        assert_eq!(p("0 * (1/x)"), Expr::Const(0.0));
        assert_eq!(p("x^1"), Expr::Var(0));
        assert_eq!(p("x^0"), Expr::Const(1.0));
        assert_eq!(p("(x^2)^3"), Expr::pow(Expr::Var(0), 6));
    }

    #[test]
    fn roundtrip_prints_and_reparses() {
        for src in [
            "0.5*x*(1-x)",
            "exp(-x^2) + log(2+x^2)",
            "min(x, 3) - max(x, -1)/2",
            "x^(-2) + 1e-3*x",
        ] {
            let e = p(src);
            let back = parse(&e.to_string(), 1).unwrap();
            assert_eq!(e, back, "round-trip failed for `{src}`");
        }
    }

    // Random smooth expressions for the derivative/finite-difference property.
    fn smooth_expr(depth: u32) -> BoxedStrategy<Expr> {
        let leaf = prop_oneof![
            (-3.0f64..3.0).prop_map(Expr::Const),
            (0usize..2).prop_map(Expr::Var),
        ];
        leaf.prop_recursive(depth, 32, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::add(a, b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::sub(a, b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::mul(a, b)),
                (inner.clone(), 2i32..4).prop_map(|(a, n)| Expr::pow(a, n)),
                inner
                    .clone()
                    .prop_map(|a| Expr::Exp(Box::new(Expr::mul(Expr::Const(0.25), a)))),
                // log over a strictly positive argument
                inner.clone().prop_map(|a| Expr::Log(Box::new(Expr::add(
                    Expr::Const(2.0),
                    Expr::pow(a, 2)
                )))),
            ]
        })
        .boxed()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn derivative_matches_central_difference(
            e in smooth_expr(3),
            x in -1.5f64..1.5,
            y in -1.5f64..1.5,
            var in 0usize..2,
        ) {
            let d = e.differentiate(var);
            let point = [x, y];
            let central = |step: f64| -> Option<f64> {
                let mut lo = point;
                let mut hi = point;
                lo[var] -= step;
                hi[var] += step;
                match (e.evaluate(&lo), e.evaluate(&hi)) {
                    (Ok(a), Ok(b)) if a.abs() < 1e4 && b.abs() < 1e4 => {
                        Some((b - a) / (2.0 * step))
                    }
                    _ => None,
                }
            };
            let g = match d.evaluate(&point) {
                Ok(v) if v.abs() < 1e4 => v,
                _ => return Ok(()), // property only claims well-scaled smooth points
            };
            let (fd, fd_coarse) = match (central(1e-5), central(2e-5)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Ok(()),
            };
            // the finite-difference oracle must itself be converged at this point
            prop_assume!((fd - fd_coarse).abs() <= 3e-7 * (1.0 + fd.abs()));
            prop_assert!(
                (g - fd).abs() <= 1e-6 * (1.0 + g.abs()),
                "symbolic {g} vs fd {fd} for {e}"
            );
        }

        #[test]
        fn print_parse_roundtrip(e in smooth_expr(3)) {
            let printed = e.to_string();
            let back = parse(&printed, 2).unwrap();
            prop_assert_eq!(e.simplify(), back);
        }
    }
}
