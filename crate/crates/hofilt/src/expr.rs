//! A minimal expression language for model coefficients and test functions.
//!
//! Expressions are trees over the state variables `x1..x{d_x}`, real
//! constants, `+ - * / ^`, and the analytic primitives `sin`, `cos`, `exp`,
//! `tanh`. The tree is closed under symbolic differentiation, which is what
//! lets the operator calculus in [`crate::model`] stay exact at any order.
//!
//! Division is only allowed by nonzero constants and is stored as
//! multiplication by the reciprocal; there is no division node.

use std::fmt;
use thiserror::Error;

/// Expression tree node. Immutable once built; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// 1-based variable index (`x1` is `Var(1)`).
    Var(usize),
    Add(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    /// Non-negative integer power.
    Pow(Box<Expr>, u32),
    Neg(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
    Tanh(Box<Expr>),
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("syntax error at position {pos}: expected {expected}")]
    Syntax { pos: usize, expected: String },
    #[error("unknown variable `{name}` (model has d_x = {d_x})")]
    UnknownVariable { name: String, d_x: usize },
    #[error("exponent at position {pos} must be a non-negative integer constant")]
    NonIntegerExponent { pos: usize },
    #[error("division by zero constant at position {pos}")]
    DivisionByZero { pos: usize },
    #[error("division at position {pos} requires a nonzero constant divisor")]
    NonConstantDivisor { pos: usize },
}

impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn var(index: usize) -> Expr {
        Expr::Var(index)
    }

    /// Sum with constant folding and 0-absorption.
    pub fn add(a: Expr, b: Expr) -> Expr {
        match (a, b) {
            (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
            (Expr::Const(x), e) | (e, Expr::Const(x)) if x == 0.0 => e,
            // fold constants through one nested level
            (Expr::Const(x), Expr::Add(l, r)) | (Expr::Add(l, r), Expr::Const(x)) => {
                if let Expr::Const(y) = *l {
                    Expr::add(Expr::Const(x + y), *r)
                } else if let Expr::Const(y) = *r {
                    Expr::add(Expr::Const(x + y), *l)
                } else {
                    Expr::Add(Box::new(Expr::Const(x)), Box::new(Expr::Add(l, r)))
                }
            }
            (a, b) => Expr::Add(Box::new(a), Box::new(b)),
        }
    }

    /// Difference, stored as `a + (-b)`.
    pub fn sub(a: Expr, b: Expr) -> Expr {
        Expr::add(a, Expr::neg(b))
    }

    /// Product with constant folding, 0/1 absorption and light flattening.
    pub fn mul(a: Expr, b: Expr) -> Expr {
        // keep constants on the left so nested products fold
        let (a, b) = match (a, b) {
            (e, c @ Expr::Const(_)) => (c, e),
            other => other,
        };
        match (a, b) {
            (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
            (Expr::Const(x), _) if x == 0.0 => Expr::Const(0.0),
            (Expr::Const(x), e) if x == 1.0 => e,
            (Expr::Const(x), Expr::Mul(l, r)) => {
                if let Expr::Const(y) = *l {
                    Expr::mul(Expr::Const(x * y), *r)
                } else {
                    Expr::Mul(Box::new(Expr::Const(x)), Box::new(Expr::Mul(l, r)))
                }
            }
            (Expr::Const(x), Expr::Neg(e)) => Expr::mul(Expr::Const(-x), *e),
            (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
        }
    }

    pub fn pow(base: Expr, exponent: u32) -> Expr {
        match (base, exponent) {
            (_, 0) => Expr::Const(1.0),
            (e, 1) => e,
            (Expr::Const(c), k) => Expr::Const(c.powi(k as i32)),
            (e, k) => Expr::Pow(Box::new(e), k),
        }
    }

    pub fn neg(e: Expr) -> Expr {
        match e {
            Expr::Const(c) => Expr::Const(-c),
            Expr::Neg(inner) => *inner,
            e => Expr::Neg(Box::new(e)),
        }
    }

    pub fn sin(e: Expr) -> Expr {
        match e {
            Expr::Const(c) => Expr::Const(c.sin()),
            e => Expr::Sin(Box::new(e)),
        }
    }

    pub fn cos(e: Expr) -> Expr {
        match e {
            Expr::Const(c) => Expr::Const(c.cos()),
            e => Expr::Cos(Box::new(e)),
        }
    }

    pub fn exp(e: Expr) -> Expr {
        match e {
            Expr::Const(c) => Expr::Const(c.exp()),
            e => Expr::Exp(Box::new(e)),
        }
    }

    pub fn tanh(e: Expr) -> Expr {
        match e {
            Expr::Const(c) => Expr::Const(c.tanh()),
            e => Expr::Tanh(Box::new(e)),
        }
    }

    /// Largest variable index referenced, 0 if the expression is constant.
    pub fn max_var(&self) -> usize {
        match self {
            Expr::Const(_) => 0,
            Expr::Var(i) => *i,
            Expr::Add(a, b) | Expr::Mul(a, b) => a.max_var().max(b.max_var()),
            Expr::Pow(e, _)
            | Expr::Neg(e)
            | Expr::Sin(e)
            | Expr::Cos(e)
            | Expr::Exp(e)
            | Expr::Tanh(e) => e.max_var(),
        }
    }

    /// True if this is the literal constant zero (either sign).
    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    /// True if every variable occurrence sits inside `sin`, `cos` or `tanh`,
    /// so the expression is bounded over all of R^{d_x}. Conservative: `exp`
    /// and bare polynomials count as unbounded.
    pub fn is_syntactically_bounded(&self) -> bool {
        match self {
            Expr::Const(_) => true,
            Expr::Var(_) => false,
            Expr::Add(a, b) | Expr::Mul(a, b) => {
                a.is_syntactically_bounded() && b.is_syntactically_bounded()
            }
            Expr::Pow(e, _) | Expr::Neg(e) => e.is_syntactically_bounded(),
            Expr::Sin(_) | Expr::Cos(_) | Expr::Tanh(_) => true,
            Expr::Exp(e) => e.max_var() == 0,
        }
    }
}

/// Exact symbolic partial derivative with respect to `x{k}` (1-based).
///
/// The result is simplified by constant folding and 0/1 absorption only;
/// correctness is defined by [`eval`], not by canonical form.
pub fn diff(e: &Expr, k: usize) -> Expr {
    match e {
        Expr::Const(_) => Expr::Const(0.0),
        Expr::Var(i) => Expr::Const(if *i == k { 1.0 } else { 0.0 }),
        Expr::Add(a, b) => Expr::add(diff(a, k), diff(b, k)),
        Expr::Mul(a, b) => Expr::add(
            Expr::mul(diff(a, k), (**b).clone()),
            Expr::mul((**a).clone(), diff(b, k)),
        ),
        Expr::Pow(base, n) => {
            if *n == 0 {
                Expr::Const(0.0)
            } else {
                Expr::mul(
                    Expr::mul(Expr::Const(*n as f64), Expr::pow((**base).clone(), n - 1)),
                    diff(base, k),
                )
            }
        }
        Expr::Neg(inner) => Expr::neg(diff(inner, k)),
        Expr::Sin(inner) => Expr::mul(Expr::cos((**inner).clone()), diff(inner, k)),
        Expr::Cos(inner) => Expr::neg(Expr::mul(Expr::sin((**inner).clone()), diff(inner, k))),
        Expr::Exp(inner) => Expr::mul(Expr::exp((**inner).clone()), diff(inner, k)),
        Expr::Tanh(inner) => Expr::mul(
            Expr::sub(
                Expr::Const(1.0),
                Expr::pow(Expr::tanh((**inner).clone()), 2),
            ),
            diff(inner, k),
        ),
    }
}

/// Evaluate at a point. The tree is walked left-to-right so results are
/// bit-reproducible for a given tree shape.
pub fn eval(e: &Expr, x: &[f64]) -> f64 {
    match e {
        Expr::Const(c) => *c,
        Expr::Var(i) => x[*i - 1],
        Expr::Add(a, b) => eval(a, x) + eval(b, x),
        Expr::Mul(a, b) => eval(a, x) * eval(b, x),
        Expr::Pow(base, n) => eval(base, x).powi(*n as i32),
        Expr::Neg(inner) => -eval(inner, x),
        Expr::Sin(inner) => eval(inner, x).sin(),
        Expr::Cos(inner) => eval(inner, x).cos(),
        Expr::Exp(inner) => eval(inner, x).exp(),
        Expr::Tanh(inner) => eval(inner, x).tanh(),
    }
}

// ---------------------------------------------------------------------------
// compiled form

#[derive(Debug, Clone)]
enum OpCode {
    Const(f64),
    Var(usize),
    Add,
    Mul,
    Pow(u32),
    Neg,
    Sin,
    Cos,
    Exp,
    Tanh,
}

/// Flat postfix form of an [`Expr`] for hot evaluation loops. Evaluation
/// order matches the tree walk exactly, so results are bit-identical to
/// [`eval`].
#[derive(Debug, Clone)]
pub struct Program {
    code: Vec<OpCode>,
}

impl Program {
    pub fn compile(e: &Expr) -> Program {
        let mut code = Vec::new();
        fn emit(e: &Expr, code: &mut Vec<OpCode>) {
            match e {
                Expr::Const(c) => code.push(OpCode::Const(*c)),
                Expr::Var(i) => code.push(OpCode::Var(*i - 1)),
                Expr::Add(a, b) => {
                    emit(a, code);
                    emit(b, code);
                    code.push(OpCode::Add);
                }
                Expr::Mul(a, b) => {
                    emit(a, code);
                    emit(b, code);
                    code.push(OpCode::Mul);
                }
                Expr::Pow(a, n) => {
                    emit(a, code);
                    code.push(OpCode::Pow(*n));
                }
                Expr::Neg(a) => {
                    emit(a, code);
                    code.push(OpCode::Neg);
                }
                Expr::Sin(a) => {
                    emit(a, code);
                    code.push(OpCode::Sin);
                }
                Expr::Cos(a) => {
                    emit(a, code);
                    code.push(OpCode::Cos);
                }
                Expr::Exp(a) => {
                    emit(a, code);
                    code.push(OpCode::Exp);
                }
                Expr::Tanh(a) => {
                    emit(a, code);
                    code.push(OpCode::Tanh);
                }
            }
        }
        emit(e, &mut code);
        Program { code }
    }

    /// Evaluate with a caller-provided stack buffer (cleared on entry).
    pub fn eval(&self, x: &[f64], stack: &mut Vec<f64>) -> f64 {
        stack.clear();
        for op in &self.code {
            match op {
                OpCode::Const(c) => stack.push(*c),
                OpCode::Var(i) => stack.push(x[*i]),
                OpCode::Add => {
                    let b = stack.pop().unwrap();
                    let a = stack.pop().unwrap();
                    stack.push(a + b);
                }
                OpCode::Mul => {
                    let b = stack.pop().unwrap();
                    let a = stack.pop().unwrap();
                    stack.push(a * b);
                }
                OpCode::Pow(n) => {
                    let a = stack.pop().unwrap();
                    stack.push(a.powi(*n as i32));
                }
                OpCode::Neg => {
                    let a = stack.pop().unwrap();
                    stack.push(-a);
                }
                OpCode::Sin => {
                    let a = stack.pop().unwrap();
                    stack.push(a.sin());
                }
                OpCode::Cos => {
                    let a = stack.pop().unwrap();
                    stack.push(a.cos());
                }
                OpCode::Exp => {
                    let a = stack.pop().unwrap();
                    stack.push(a.exp());
                }
                OpCode::Tanh => {
                    let a = stack.pop().unwrap();
                    stack.push(a.tanh());
                }
            }
        }
        stack.pop().unwrap()
    }
}

// ---------------------------------------------------------------------------
// printing

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Parenthesization must preserve the tree through a reparse (see the
        // round-trip property test); when in doubt we add parens.
        fn atom(e: &Expr) -> bool {
            matches!(
                e,
                Expr::Var(_)
                    | Expr::Sin(_)
                    | Expr::Cos(_)
                    | Expr::Exp(_)
                    | Expr::Tanh(_)
            ) || matches!(e, Expr::Const(c) if *c >= 0.0)
        }
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(i) => write!(f, "x{i}"),
            Expr::Add(a, b) => {
                // left-associative reparse rebuilds an unparenthesized left Add
                if matches!(**a, Expr::Add(_, _)) || !needs_parens_add(a) {
                    write!(f, "{a}")?;
                } else {
                    write!(f, "({a})")?;
                }
                match &**b {
                    Expr::Neg(inner) => {
                        if needs_parens_add(inner) || matches!(**inner, Expr::Add(_, _)) {
                            write!(f, " - ({inner})")
                        } else {
                            write!(f, " - {inner}")
                        }
                    }
                    other if needs_parens_add(other) || matches!(other, Expr::Add(_, _)) => {
                        write!(f, " + ({other})")
                    }
                    other => write!(f, " + {other}"),
                }
            }
            Expr::Mul(a, b) => {
                if matches!(**a, Expr::Mul(_, _)) || atom(a) || matches!(**a, Expr::Pow(_, _)) {
                    write!(f, "{a}")?;
                } else {
                    write!(f, "({a})")?;
                }
                if atom(b) || matches!(**b, Expr::Pow(_, _)) {
                    write!(f, " * {b}")
                } else {
                    write!(f, " * ({b})")
                }
            }
            Expr::Pow(base, n) => {
                if atom(base) {
                    write!(f, "{base}^{n}")
                } else {
                    write!(f, "({base})^{n}")
                }
            }
            Expr::Neg(inner) => {
                if atom(inner) {
                    write!(f, "-{inner}")
                } else {
                    write!(f, "-({inner})")
                }
            }
            Expr::Sin(e) => write!(f, "sin({e})"),
            Expr::Cos(e) => write!(f, "cos({e})"),
            Expr::Exp(e) => write!(f, "exp({e})"),
            Expr::Tanh(e) => write!(f, "tanh({e})"),
        }
    }
}

fn needs_parens_add(e: &Expr) -> bool {
    // additions only; products, powers and unary forms survive a reparse
    matches!(e, Expr::Add(_, _))
}

/// Text form that [`parse`] accepts back; tree- and eval-preserving.
pub fn print(e: &Expr) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// parsing

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

struct Lexer {
    toks: Vec<(usize, Tok)>,
    end: usize,
}

fn lex(text: &str) -> Result<Lexer, ParseError> {
    let bytes = text.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                toks.push((i, Tok::Plus));
                i += 1;
            }
            '-' => {
                toks.push((i, Tok::Minus));
                i += 1;
            }
            '*' => {
                toks.push((i, Tok::Star));
                i += 1;
            }
            '/' => {
                toks.push((i, Tok::Slash));
                i += 1;
            }
            '^' => {
                toks.push((i, Tok::Caret));
                i += 1;
            }
            '(' => {
                toks.push((i, Tok::LParen));
                i += 1;
            }
            ')' => {
                toks.push((i, Tok::RParen));
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && matches!(bytes[i] as char, '0'..='9' | '.') {
                    i += 1;
                }
                // scientific suffix
                if i < bytes.len() && matches!(bytes[i] as char, 'e' | 'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && matches!(bytes[j] as char, '+' | '-') {
                        j += 1;
                    }
                    if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let lit = &text[start..i];
                let v: f64 = lit.parse().map_err(|_| ParseError::Syntax {
                    pos: start,
                    expected: "a numeric literal".into(),
                })?;
                toks.push((start, Tok::Num(v)));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && matches!(bytes[i] as char, 'a'..='z' | 'A'..='Z' | '0'..='9' | '_')
                {
                    i += 1;
                }
                toks.push((start, Tok::Ident(text[start..i].to_string())));
            }
            _ => {
                return Err(ParseError::Syntax {
                    pos: i,
                    expected: "an operator, number, variable or function".into(),
                })
            }
        }
    }
    Ok(Lexer {
        toks,
        end: text.len(),
    })
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
    d_x: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(p, _)| *p)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.bump();
                    let rhs = self.term()?;
                    acc = Expr::Add(Box::new(acc), Box::new(rhs));
                }
                Some(Tok::Minus) => {
                    self.bump();
                    let rhs = self.term()?;
                    acc = Expr::Add(Box::new(acc), Box::new(Expr::neg(rhs)));
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.bump();
                    let rhs = self.unary()?;
                    acc = Expr::Mul(Box::new(acc), Box::new(rhs));
                }
                Some(Tok::Slash) => {
                    let slash_pos = self.here();
                    self.bump();
                    let rhs = self.unary()?;
                    match const_value(&rhs) {
                        Some(c) if c != 0.0 => {
                            acc = Expr::Mul(Box::new(acc), Box::new(Expr::Const(1.0 / c)));
                        }
                        Some(_) => return Err(ParseError::DivisionByZero { pos: slash_pos }),
                        None => return Err(ParseError::NonConstantDivisor { pos: slash_pos }),
                    }
                }
                _ => return Ok(acc),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if matches!(self.peek(), Some(Tok::Minus)) {
            self.bump();
            let inner = self.unary()?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if matches!(self.peek(), Some(Tok::Caret)) {
            let caret_pos = self.here();
            self.bump();
            // exponent binds tighter than unary minus and is right-associative;
            // it must fold to a non-negative integer constant
            let exponent = self.unary()?;
            let k = match const_value(&exponent) {
                Some(c) if c >= 0.0 && c.fract() == 0.0 && c <= u32::MAX as f64 => c as u32,
                _ => return Err(ParseError::NonIntegerExponent { pos: caret_pos }),
            };
            return Ok(Expr::Pow(Box::new(base), k));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let pos = self.here();
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Expr::Const(v)),
            Some(Tok::LParen) => {
                let inner = self.expr()?;
                match self.bump() {
                    Some(Tok::RParen) => Ok(inner),
                    _ => Err(ParseError::Syntax {
                        pos: self.toks.get(self.pos - 1).map_or(self.end, |(p, _)| *p),
                        expected: "`)`".into(),
                    }),
                }
            }
            Some(Tok::Ident(name)) => match name.as_str() {
                "sin" | "cos" | "exp" | "tanh" => {
                    match self.bump() {
                        Some(Tok::LParen) => {}
                        _ => {
                            return Err(ParseError::Syntax {
                                pos: self.here(),
                                expected: format!("`(` after `{name}`"),
                            })
                        }
                    }
                    let arg = self.expr()?;
                    match self.bump() {
                        Some(Tok::RParen) => {}
                        _ => {
                            return Err(ParseError::Syntax {
                                pos: self.here(),
                                expected: "`)`".into(),
                            })
                        }
                    }
                    Ok(match name.as_str() {
                        "sin" => Expr::Sin(Box::new(arg)),
                        "cos" => Expr::Cos(Box::new(arg)),
                        "exp" => Expr::Exp(Box::new(arg)),
                        _ => Expr::Tanh(Box::new(arg)),
                    })
                }
                _ => {
                    if let Some(digits) = name.strip_prefix('x') {
                        if let Ok(idx) = digits.parse::<usize>() {
                            if idx >= 1 && idx <= self.d_x {
                                return Ok(Expr::Var(idx));
                            }
                        }
                    }
                    Err(ParseError::UnknownVariable {
                        name,
                        d_x: self.d_x,
                    })
                }
            },
            _ => Err(ParseError::Syntax {
                pos,
                expected: "a number, variable, function or `(`".into(),
            }),
        }
    }
}

/// Value of a variable-free subtree, used for exponent and divisor checks.
fn const_value(e: &Expr) -> Option<f64> {
    match e {
        Expr::Const(c) => Some(*c),
        Expr::Var(_) => None,
        Expr::Add(a, b) => Some(const_value(a)? + const_value(b)?),
        Expr::Mul(a, b) => Some(const_value(a)? * const_value(b)?),
        Expr::Pow(a, k) => Some(const_value(a)?.powi(*k as i32)),
        Expr::Neg(a) => Some(-const_value(a)?),
        Expr::Sin(a) => Some(const_value(a)?.sin()),
        Expr::Cos(a) => Some(const_value(a)?.cos()),
        Expr::Exp(a) => Some(const_value(a)?.exp()),
        Expr::Tanh(a) => Some(const_value(a)?.tanh()),
    }
}

/// Parse a formula over `x1..x{d_x}`.
///
/// Standard infix grammar; `^` is right-associative, binds tighter than unary
/// minus and only takes non-negative integer constant exponents. `a / c`
/// requires a nonzero constant divisor and is stored as `a * (1/c)`.
pub fn parse(text: &str, d_x: usize) -> Result<Expr, ParseError> {
    let lexer = lex(text)?;
    let mut p = Parser {
        toks: lexer.toks,
        pos: 0,
        end: lexer.end,
        d_x,
    };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(ParseError::Syntax {
            pos: p.here(),
            expected: "end of input".into(),
        });
    }
    Ok(e)
}
