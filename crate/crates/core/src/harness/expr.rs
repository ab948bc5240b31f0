//! Coefficient expressions.
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | primary
//! primary := number | variable | function '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Variables are `x1..xm` (state), `y1..yd` (backward component) and
//! `z1..zq` (the row of `z` belonging to the component being evaluated).
//! Functions: `min(a, b)`, `max(a, b)`, `exp(a)`, `abs(a)`, `clamp(v, lo, hi)`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {column}: {message}")]
pub struct ParseError {
    pub message: String,
    /// One-based.
    pub line: usize,
    /// One-based, counted in characters.
    pub column: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarKind {
    X,
    Y,
    Z,
}

/// A variable reference with a zero-based index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    pub kind: VarKind,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Min,
    Max,
    Exp,
    Abs,
    Clamp,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "min" => Func::Min,
            "max" => Func::Max,
            "exp" => Func::Exp,
            "abs" => Func::Abs,
            "clamp" => Func::Clamp,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Min => "min",
            Func::Max => "max",
            Func::Exp => "exp",
            Func::Abs => "abs",
            Func::Clamp => "clamp",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            Func::Exp | Func::Abs => 1,
            Func::Clamp => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

impl Expr {
    /// Evaluates at `(x, y, z)`. Variables must be in range.
    pub fn eval(&self, x: &[f64], y: &[f64], z: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(v) => match v.kind {
                VarKind::X => x[v.index],
                VarKind::Y => y[v.index],
                VarKind::Z => z[v.index],
            },
            Expr::Neg(e) => -e.eval(x, y, z),
            Expr::Binary(op, a, b) => {
                let (a, b) = (a.eval(x, y, z), b.eval(x, y, z));
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                }
            }
            Expr::Call(f, args) => {
                let a = |k: usize| args[k].eval(x, y, z);
                match f {
                    Func::Min => a(0).min(a(1)),
                    Func::Max => a(0).max(a(1)),
                    Func::Exp => a(0).exp(),
                    Func::Abs => a(0).abs(),
                    Func::Clamp => {
                        let (v, lo, hi) = (a(0), a(1), a(2));
                        v.max(lo).min(hi)
                    }
                }
            }
        }
    }

    /// Evaluates an expression of the state only.
    pub fn eval_x(&self, x: &[f64]) -> f64 {
        self.eval(x, &[], &[])
    }

    pub fn uses(&self, kind: VarKind) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(v) => v.kind == kind,
            Expr::Neg(e) => e.uses(kind),
            Expr::Binary(_, a, b) => a.uses(kind) || b.uses(kind),
            Expr::Call(_, args) => args.iter().any(|a| a.uses(kind)),
        }
    }

    pub fn is_constant(&self) -> bool {
        !(self.uses(VarKind::X) || self.uses(VarKind::Y) || self.uses(VarKind::Z))
    }
}

impl fmt::Display for Expr {
    /// Fully parenthesized form that parses back to the same tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Var(v) => {
                let p = match v.kind {
                    VarKind::X => 'x',
                    VarKind::Y => 'y',
                    VarKind::Z => 'z',
                };
                write!(f, "{p}{}", v.index + 1)
            }
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Binary(op, a, b) => {
                let s = match op {
                    BinOp::Add => '+',
                    BinOp::Sub => '-',
                    BinOp::Mul => '*',
                    BinOp::Div => '/',
                };
                write!(f, "({a} {s} {b})")
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (k, a) in args.iter().enumerate() {
                    if k > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// Declared variable counts; `None` disallows the kind entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scope {
    pub x: Option<usize>,
    pub y: Option<usize>,
    pub z: Option<usize>,
}

impl Scope {
    /// Any index of any kind.
    pub const OPEN: Scope = Scope {
        x: Some(usize::MAX),
        y: Some(usize::MAX),
        z: Some(usize::MAX),
    };

    pub fn state(m: usize) -> Self {
        Scope {
            x: Some(m),
            y: None,
            z: None,
        }
    }

    pub fn driver(m: usize, d: usize, q: usize) -> Self {
        Scope {
            x: Some(m),
            y: Some(d),
            z: Some(q),
        }
    }
}

/// Parses with any `x`, `y`, `z` index allowed.
pub fn parse_expression(source: &str) -> Result<Expr, ParseError> {
    parse_in_scope(source, &Scope::OPEN)
}

pub fn parse_in_scope(source: &str, scope: &Scope) -> Result<Expr, ParseError> {
    let tokens = tokenize(source)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        scope: *scope,
    };
    let e = p.expr()?;
    match p.peek() {
        Tok::End => Ok(e),
        t => Err(p.error_here(format!("unexpected {} after expression", t.describe()))),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
    Comma,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier '{s}'"),
            Tok::Plus => "'+'".into(),
            Tok::Minus => "'-'".into(),
            Tok::Star => "'*'".into(),
            Tok::Slash => "'/'".into(),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::Comma => "','".into(),
            Tok::End => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    column: usize,
}

fn tokenize(source: &str) -> Result<Vec<Spanned>, ParseError> {
    let chars: Vec<char> = source.chars().collect();
    let mut out = Vec::new();
    let (mut line, mut column) = (1, 1);
    let mut k = 0;
    while k < chars.len() {
        let c = chars[k];
        let (tl, tc) = (line, column);
        if c == '\n' {
            line += 1;
            column = 1;
            k += 1;
            continue;
        }
        if c.is_whitespace() {
            column += 1;
            k += 1;
            continue;
        }
        let single = match c {
            '+' => Some(Tok::Plus),
            '-' => Some(Tok::Minus),
            '*' => Some(Tok::Star),
            '/' => Some(Tok::Slash),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(tok) = single {
            out.push(Spanned { tok, line: tl, column: tc });
            k += 1;
            column += 1;
            continue;
        }
        let start = k;
        if c.is_ascii_digit() || (c == '.' && chars.get(k + 1).is_some_and(|n| n.is_ascii_digit())) {
            while k < chars.len() && (chars[k].is_ascii_digit() || chars[k] == '.') {
                k += 1;
            }
            if k < chars.len() && (chars[k] == 'e' || chars[k] == 'E') {
                let mut j = k + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    k = j;
                    while k < chars.len() && chars[k].is_ascii_digit() {
                        k += 1;
                    }
                } else {
                    return Err(ParseError {
                        message: "malformed exponent in number".into(),
                        line: tl,
                        column: tc,
                    });
                }
            }
            let text: String = chars[start..k].iter().collect();
            let value: f64 = text.parse().map_err(|_| ParseError {
                message: format!("invalid number '{text}'"),
                line: tl,
                column: tc,
            })?;
            if !value.is_finite() {
                return Err(ParseError {
                    message: format!("number '{text}' is out of range"),
                    line: tl,
                    column: tc,
                });
            }
            column += k - start;
            out.push(Spanned {
                tok: Tok::Num(value),
                line: tl,
                column: tc,
            });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            while k < chars.len() && (chars[k].is_ascii_alphanumeric() || chars[k] == '_') {
                k += 1;
            }
            column += k - start;
            out.push(Spanned {
                tok: Tok::Ident(chars[start..k].iter().collect()),
                line: tl,
                column: tc,
            });
            continue;
        }
        return Err(ParseError {
            message: format!("unexpected character '{c}'"),
            line: tl,
            column: tc,
        });
    }
    out.push(Spanned {
        tok: Tok::End,
        line,
        column,
    });
    Ok(out)
}

struct Parser {
    tokens: Vec<Spanned>,
    pos: usize,
    scope: Scope,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn advance(&mut self) -> Spanned {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn error_at(t: &Spanned, message: String) -> ParseError {
        ParseError {
            message,
            line: t.line,
            column: t.column,
        }
    }

    fn error_here(&self, message: String) -> ParseError {
        Self::error_at(&self.tokens[self.pos], message)
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.advance();
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.advance();
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Tok::Minus {
            self.advance();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let t = self.advance();
        match &t.tok {
            Tok::Num(v) => Ok(Expr::Const(*v)),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect_rparen(&t)?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if *self.peek() == Tok::LParen {
                    let open = self.advance();
                    let func = Func::from_name(name)
                        .ok_or_else(|| Self::error_at(&t, format!("unknown function '{name}'")))?;
                    let mut args = Vec::new();
                    if *self.peek() != Tok::RParen {
                        args.push(self.expr()?);
                        while *self.peek() == Tok::Comma {
                            self.advance();
                            args.push(self.expr()?);
                        }
                    }
                    self.expect_rparen(&open)?;
                    if args.len() != func.arity() {
                        return Err(Self::error_at(
                            &t,
                            format!(
                                "{} expects {} argument{}, got {}",
                                func.name(),
                                func.arity(),
                                if func.arity() == 1 { "" } else { "s" },
                                args.len()
                            ),
                        ));
                    }
                    Ok(Expr::Call(func, args))
                } else {
                    self.variable(name, &t)
                }
            }
            Tok::End => Err(Self::error_at(&t, "unexpected end of input".into())),
            other => Err(Self::error_at(&t, format!("unexpected {}", other.describe()))),
        }
    }

    fn expect_rparen(&mut self, open: &Spanned) -> Result<(), ParseError> {
        match self.peek() {
            Tok::RParen => {
                self.advance();
                Ok(())
            }
            Tok::End => Err(Self::error_at(
                open,
                "unclosed '('".into(),
            )),
            t => Err(self.error_here(format!("expected ')' but found {}", t.describe()))),
        }
    }

    fn variable(&self, name: &str, t: &Spanned) -> Result<Expr, ParseError> {
        let unknown = || Self::error_at(t, format!("unknown identifier '{name}'"));
        if Func::from_name(name).is_some() {
            return Err(Self::error_at(t, format!("function '{name}' needs an argument list")));
        }
        let mut chars = name.chars();
        let kind = match chars.next() {
            Some('x') => VarKind::X,
            Some('y') => VarKind::Y,
            Some('z') => VarKind::Z,
            _ => return Err(unknown()),
        };
        let digits = chars.as_str();
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
            return Err(unknown());
        }
        let index: usize = digits.parse().map_err(|_| unknown())?;
        let limit = match kind {
            VarKind::X => self.scope.x,
            VarKind::Y => self.scope.y,
            VarKind::Z => self.scope.z,
        };
        match limit {
            Some(l) if index <= l => Ok(Expr::Var(Var { kind, index: index - 1 })),
            _ => Err(unknown()),
        }
    }
}
