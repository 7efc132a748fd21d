//! Coefficient expression language.
//!
//! A small arithmetic grammar over state variables `x1..xm` (or `x` when
//! `m = 1`) and control variables `u1..uk` (or `u`), with numeric literals,
//! `+ - * / ^`, and the functions `exp`, `log`, `sin`, `cos`, `sqrt`, `pow`.
//! Expressions are differentiated symbolically and compiled to a flat stack
//! program for evaluation in the simulation hot loops.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    /// `offset` is the 1-based character position of the offending token;
    /// end of input is reported as `len + 1`.
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("arity mismatch: expected {expected} entries, found {found}")]
    Arity { expected: usize, found: usize },
    #[error("domain error in `{subexpr}`: {reason}")]
    Domain { subexpr: String, reason: String },
    #[error("`{0}` must not depend on the control")]
    ControlDependent(String),
}

/// Unary functions of the grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Sqrt => "sqrt",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Exp => v.exp(),
            Func::Log => v.ln(),
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Sqrt => v.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

/// Declared variable names: the first `state_dim` are state components,
/// the remaining `control_dim` are control components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variables {
    names: Vec<String>,
    state_dim: usize,
    control_dim: usize,
}

impl Variables {
    /// `x`/`u` for one-dimensional parts, `x1..xm`/`u1..uk` otherwise.
    pub fn standard(state_dim: usize, control_dim: usize) -> Self {
        let mut names = Vec::with_capacity(state_dim + control_dim);
        if state_dim == 1 {
            names.push("x".to_string());
        } else {
            names.extend((1..=state_dim).map(|i| format!("x{i}")));
        }
        if control_dim == 1 {
            names.push("u".to_string());
        } else {
            names.extend((1..=control_dim).map(|i| format!("u{i}")));
        }
        Variables { names, state_dim, control_dim }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn state(&self, i: usize) -> usize {
        i
    }

    pub fn control(&self, i: usize) -> usize {
        self.state_dim + i
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        if let Some(i) = self.names.iter().position(|n| n == name) {
            return Some(i);
        }
        // `x1`/`u1` alias the scalar names.
        match name {
            "x1" if self.state_dim == 1 => Some(0),
            "u1" if self.control_dim == 1 => Some(self.state_dim),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    End,
}

struct Lexer {
    toks: Vec<(Tok, usize)>,
}

impl Lexer {
    fn new(src: &str) -> Result<Self, ExprError> {
        let chars: Vec<char> = src.chars().collect();
        let mut toks = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() {
                i += 1;
            } else if c.is_ascii_digit() || c == '.' {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                    let mut j = i + 1;
                    if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                        j += 1;
                    }
                    if j < chars.len() && chars[j].is_ascii_digit() {
                        i = j;
                        while i < chars.len() && chars[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text: String = chars[start..i].iter().collect();
                let value = text.parse::<f64>().map_err(|_| ExprError::Syntax {
                    offset: start + 1,
                    message: format!("malformed number `{text}`"),
                })?;
                toks.push((Tok::Num(value), start + 1));
            } else if c.is_alphabetic() || c == '_' {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                toks.push((Tok::Ident(chars[start..i].iter().collect()), start + 1));
            } else if "+-*/^(),[]".contains(c) {
                toks.push((Tok::Op(c), i + 1));
                i += 1;
            } else {
                return Err(ExprError::Syntax {
                    offset: i + 1,
                    message: format!("unexpected character `{c}`"),
                });
            }
        }
        toks.push((Tok::End, chars.len() + 1));
        Ok(Lexer { toks })
    }
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    vars: &'a Variables,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError::Syntax { offset: self.offset(), message: message.into() })
    }

    fn expect(&mut self, c: char) -> Result<(), ExprError> {
        if *self.peek() == Tok::Op(c) {
            self.bump();
            Ok(())
        } else {
            self.error(format!("expected `{c}`"))
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Tok::Op('+') => {
                    self.bump();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Tok::Op('-') => {
                    self.bump();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Tok::Op('*') => {
                    self.bump();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Tok::Op('/') => {
                    self.bump();
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if *self.peek() == Tok::Op('-') {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if *self.peek() == Tok::Op('+') {
            self.bump();
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if *self.peek() == Tok::Op('^') {
            self.bump();
            let exponent = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        let offset = self.offset();
        match self.bump() {
            Tok::Num(v) => Ok(Expr::Const(v)),
            Tok::Op('(') => {
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if *self.peek() == Tok::Op('(') {
                    self.bump();
                    if name == "pow" {
                        let a = self.expr()?;
                        self.expect(',')?;
                        let b = self.expr()?;
                        self.expect(')')?;
                        return Ok(Expr::Pow(Box::new(a), Box::new(b)));
                    }
                    let Some(func) = Func::from_name(&name) else {
                        return Err(ExprError::UnknownIdentifier { name, offset });
                    };
                    let arg = self.expr()?;
                    self.expect(')')?;
                    return Ok(Expr::Call(func, Box::new(arg)));
                }
                match self.vars.lookup(&name) {
                    Some(i) => Ok(Expr::Var(i)),
                    None => Err(ExprError::UnknownIdentifier { name, offset }),
                }
            }
            Tok::End => Err(ExprError::Syntax { offset, message: "unexpected end of input".into() }),
            Tok::Op(c) => Err(ExprError::Syntax { offset, message: format!("unexpected `{c}`") }),
        }
    }
}

/// Parses a single scalar expression.
pub fn parse(source: &str, vars: &Variables) -> Result<Expr, ExprError> {
    let mut p = Parser { toks: Lexer::new(source)?.toks, pos: 0, vars };
    let e = p.expr()?;
    if *p.peek() != Tok::End {
        return p.error("unexpected trailing input");
    }
    Ok(e)
}

/// Parses either a single expression or a bracketed, comma separated list.
pub fn parse_list(source: &str, vars: &Variables) -> Result<Vec<Expr>, ExprError> {
    let mut p = Parser { toks: Lexer::new(source)?.toks, pos: 0, vars };
    let mut items = Vec::new();
    if *p.peek() == Tok::Op('[') {
        p.bump();
        loop {
            items.push(p.expr()?);
            match p.peek() {
                Tok::Op(',') => {
                    p.bump();
                }
                Tok::Op(']') => {
                    p.bump();
                    break;
                }
                _ => return p.error("expected `,` or `]`"),
            }
        }
    } else {
        items.push(p.expr()?);
    }
    if *p.peek() != Tok::End {
        return p.error("unexpected trailing input");
    }
    Ok(items)
}

// ---------------------------------------------------------------------------
// Printing

/// Displays an expression with the variable names it was parsed against.
pub struct Printer<'a> {
    expr: &'a Expr,
    vars: &'a Variables,
}

impl Expr {
    pub fn display<'a>(&'a self, vars: &'a Variables) -> Printer<'a> {
        Printer { expr: self, vars }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(..) => 3,
            Expr::Pow(..) => 4,
            Expr::Const(c) if *c < 0.0 => 3,
            _ => 5,
        }
    }
}

fn write_expr(f: &mut fmt::Formatter<'_>, e: &Expr, vars: &Variables) -> fmt::Result {
    let wrap = |f: &mut fmt::Formatter<'_>, child: &Expr, min: u8| -> fmt::Result {
        if child.precedence() < min {
            write!(f, "(")?;
            write_expr(f, child, vars)?;
            write!(f, ")")
        } else {
            write_expr(f, child, vars)
        }
    };
    match e {
        Expr::Const(c) => write!(f, "{c}"),
        Expr::Var(i) => write!(f, "{}", vars.name(*i)),
        Expr::Neg(a) => {
            write!(f, "-")?;
            wrap(f, a, 4)
        }
        Expr::Add(a, b) => {
            wrap(f, a, 1)?;
            write!(f, " + ")?;
            wrap(f, b, 2)
        }
        Expr::Sub(a, b) => {
            wrap(f, a, 1)?;
            write!(f, " - ")?;
            wrap(f, b, 2)
        }
        Expr::Mul(a, b) => {
            wrap(f, a, 2)?;
            write!(f, "*")?;
            wrap(f, b, 3)
        }
        Expr::Div(a, b) => {
            wrap(f, a, 2)?;
            write!(f, "/")?;
            wrap(f, b, 3)
        }
        Expr::Pow(a, b) => {
            wrap(f, a, 5)?;
            write!(f, "^")?;
            wrap(f, b, 4)
        }
        Expr::Call(func, a) => {
            write!(f, "{}(", func.name())?;
            write_expr(f, a, vars)?;
            write!(f, ")")
        }
    }
}

impl fmt::Display for Printer<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(f, self.expr, self.vars)
    }
}

// ---------------------------------------------------------------------------
// Algebra

fn c(v: f64) -> Expr {
    Expr::Const(v)
}

fn bx(e: Expr) -> Box<Expr> {
    Box::new(e)
}

impl Expr {
    pub fn is_const(&self, v: f64) -> bool {
        matches!(self, Expr::Const(c) if *c == v)
    }

    pub fn is_zero(&self) -> bool {
        self.is_const(0.0)
    }

    /// True when the variable occurs anywhere in the tree.
    pub fn depends_on(&self, var: usize) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(i) => *i == var,
            Expr::Neg(a) | Expr::Call(_, a) => a.depends_on(var),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                a.depends_on(var) || b.depends_on(var)
            }
        }
    }

    pub fn sum(a: Expr, b: Expr) -> Expr {
        Expr::Add(bx(a), bx(b)).simplify()
    }

    pub fn product(a: Expr, b: Expr) -> Expr {
        Expr::Mul(bx(a), bx(b)).simplify()
    }

    /// Constant folding and the usual additive/multiplicative identities.
    pub fn simplify(&self) -> Expr {
        match self {
            Expr::Const(_) | Expr::Var(_) => self.clone(),
            Expr::Neg(a) => match a.simplify() {
                Expr::Const(v) => c(-v),
                Expr::Neg(inner) => *inner,
                s => Expr::Neg(bx(s)),
            },
            Expr::Add(a, b) => match (a.simplify(), b.simplify()) {
                (Expr::Const(x), Expr::Const(y)) => c(x + y),
                (s, t) if s.is_zero() => t,
                (s, t) if t.is_zero() => s,
                (s, Expr::Neg(t)) => Expr::Sub(bx(s), t),
                (s, t) => Expr::Add(bx(s), bx(t)),
            },
            Expr::Sub(a, b) => match (a.simplify(), b.simplify()) {
                (Expr::Const(x), Expr::Const(y)) => c(x - y),
                (s, t) if t.is_zero() => s,
                (s, t) if s.is_zero() => Expr::Neg(bx(t)).simplify(),
                (s, t) if s == t => c(0.0),
                (s, Expr::Neg(t)) => Expr::Add(bx(s), t),
                (s, t) => Expr::Sub(bx(s), bx(t)),
            },
            Expr::Mul(a, b) => match (a.simplify(), b.simplify()) {
                (Expr::Const(x), Expr::Const(y)) => c(x * y),
                (s, t) if s.is_zero() || t.is_zero() => c(0.0),
                (s, t) if s.is_const(1.0) => t,
                (s, t) if t.is_const(1.0) => s,
                (s, t) if s.is_const(-1.0) => Expr::Neg(bx(t)).simplify(),
                (s, t) if t.is_const(-1.0) => Expr::Neg(bx(s)).simplify(),
                (Expr::Const(x), Expr::Mul(l, r)) if matches!(*l, Expr::Const(_)) => {
                    let Expr::Const(y) = *l else { unreachable!() };
                    Expr::Mul(bx(c(x * y)), r).simplify()
                }
                (s, Expr::Const(y)) => Expr::Mul(bx(c(y)), bx(s)).simplify_shallow(),
                (s, t) => Expr::Mul(bx(s), bx(t)),
            },
            Expr::Div(a, b) => match (a.simplify(), b.simplify()) {
                (Expr::Const(x), Expr::Const(y)) if y != 0.0 => c(x / y),
                (s, t) if s.is_zero() && !t.is_zero() => c(0.0),
                (s, t) if t.is_const(1.0) => s,
                (s, t) => Expr::Div(bx(s), bx(t)),
            },
            Expr::Pow(a, b) => match (a.simplify(), b.simplify()) {
                (Expr::Const(x), Expr::Const(y)) if x.powf(y).is_finite() => c(x.powf(y)),
                (_, t) if t.is_zero() => c(1.0),
                (s, t) if t.is_const(1.0) => s,
                (s, t) => Expr::Pow(bx(s), bx(t)),
            },
            Expr::Call(func, a) => match a.simplify() {
                Expr::Const(x) if func.apply(x).is_finite() => c(func.apply(x)),
                s => Expr::Call(*func, bx(s)),
            },
        }
    }

    // Only used to move a constant factor to the left without re-walking.
    fn simplify_shallow(self) -> Expr {
        match self {
            Expr::Mul(l, r) => match (*l, *r) {
                (Expr::Const(x), Expr::Mul(a, b)) if matches!(*a, Expr::Const(_)) => {
                    let Expr::Const(y) = *a else { unreachable!() };
                    Expr::Mul(bx(c(x * y)), b)
                }
                (l, r) => Expr::Mul(bx(l), bx(r)),
            },
            e => e,
        }
    }

    /// Symbolic partial derivative with respect to variable `var`.
    pub fn derivative(&self, var: usize) -> Expr {
        self.raw_derivative(var).simplify()
    }

    fn raw_derivative(&self, var: usize) -> Expr {
        match self {
            Expr::Const(_) => c(0.0),
            Expr::Var(i) => c(if *i == var { 1.0 } else { 0.0 }),
            Expr::Neg(a) => Expr::Neg(bx(a.raw_derivative(var))),
            Expr::Add(a, b) => Expr::Add(bx(a.raw_derivative(var)), bx(b.raw_derivative(var))),
            Expr::Sub(a, b) => Expr::Sub(bx(a.raw_derivative(var)), bx(b.raw_derivative(var))),
            Expr::Mul(a, b) => Expr::Add(
                bx(Expr::Mul(bx(a.raw_derivative(var)), b.clone())),
                bx(Expr::Mul(a.clone(), bx(b.raw_derivative(var)))),
            ),
            Expr::Div(a, b) => Expr::Div(
                bx(Expr::Sub(
                    bx(Expr::Mul(bx(a.raw_derivative(var)), b.clone())),
                    bx(Expr::Mul(a.clone(), bx(b.raw_derivative(var)))),
                )),
                bx(Expr::Pow(b.clone(), bx(c(2.0)))),
            ),
            Expr::Pow(a, b) => {
                if !b.depends_on(var) {
                    // d(a^n) = n a^(n-1) a'
                    Expr::Mul(
                        bx(Expr::Mul(
                            b.clone(),
                            bx(Expr::Pow(a.clone(), bx(Expr::Sub(b.clone(), bx(c(1.0)))))),
                        )),
                        bx(a.raw_derivative(var)),
                    )
                } else {
                    // d(a^b) = a^b (b' log a + b a'/a)
                    Expr::Mul(
                        bx(self.clone()),
                        bx(Expr::Add(
                            bx(Expr::Mul(bx(b.raw_derivative(var)), bx(Expr::Call(Func::Log, a.clone())))),
                            bx(Expr::Div(bx(Expr::Mul(b.clone(), bx(a.raw_derivative(var)))), a.clone())),
                        )),
                    )
                }
            }
            Expr::Call(func, a) => {
                let inner = a.raw_derivative(var);
                let outer = match func {
                    Func::Exp => self.clone(),
                    Func::Log => Expr::Div(bx(c(1.0)), a.clone()),
                    Func::Sin => Expr::Call(Func::Cos, a.clone()),
                    Func::Cos => Expr::Neg(bx(Expr::Call(Func::Sin, a.clone()))),
                    Func::Sqrt => Expr::Div(bx(c(0.5)), bx(self.clone())),
                };
                Expr::Mul(bx(outer), bx(inner))
            }
        }
    }

    /// Tree-walking evaluation with domain checks; reports the offending
    /// subexpression on failure.
    pub fn eval_checked(&self, values: &[f64], vars: &Variables) -> Result<f64, ExprError> {
        let domain = |reason: &str| ExprError::Domain {
            subexpr: self.display(vars).to_string(),
            reason: reason.to_string(),
        };
        let v = match self {
            Expr::Const(v) => *v,
            Expr::Var(i) => values[*i],
            Expr::Neg(a) => -a.eval_checked(values, vars)?,
            Expr::Add(a, b) => a.eval_checked(values, vars)? + b.eval_checked(values, vars)?,
            Expr::Sub(a, b) => a.eval_checked(values, vars)? - b.eval_checked(values, vars)?,
            Expr::Mul(a, b) => a.eval_checked(values, vars)? * b.eval_checked(values, vars)?,
            Expr::Div(a, b) => {
                let num = a.eval_checked(values, vars)?;
                let den = b.eval_checked(values, vars)?;
                if den == 0.0 {
                    return Err(domain("division by zero"));
                }
                num / den
            }
            Expr::Pow(a, b) => {
                let base = a.eval_checked(values, vars)?;
                let exp = b.eval_checked(values, vars)?;
                if base == 0.0 && exp < 0.0 {
                    return Err(domain("zero raised to a negative power"));
                }
                if base < 0.0 && exp.fract() != 0.0 {
                    return Err(domain("negative base with non-integer exponent"));
                }
                base.powf(exp)
            }
            Expr::Call(func, a) => {
                let arg = a.eval_checked(values, vars)?;
                match func {
                    Func::Log if arg <= 0.0 => return Err(domain("log of non-positive value")),
                    Func::Sqrt if arg < 0.0 => return Err(domain("sqrt of negative value")),
                    _ => func.apply(arg),
                }
            }
        };
        if !v.is_finite() {
            return Err(domain("non-finite value"));
        }
        Ok(v)
    }
}

// ---------------------------------------------------------------------------
// Compilation

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    Var(usize),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Powi(i32),
    Call(Func),
}

const STACK: usize = 64;

/// Stack program compiled from an [`Expr`]; evaluation does not allocate.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    ops: Vec<Op>,
    depth: usize,
}

impl Program {
    pub fn compile(expr: &Expr) -> Program {
        let mut ops = Vec::new();
        emit(expr, &mut ops);
        let mut depth = 0usize;
        let mut max = 0usize;
        for op in &ops {
            match op {
                Op::Const(_) | Op::Var(_) => depth += 1,
                Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow => depth -= 1,
                _ => {}
            }
            max = max.max(depth);
        }
        Program { ops, depth: max }
    }

    /// Evaluates without domain checks; non-finite results propagate.
    #[inline]
    pub fn eval(&self, values: &[f64]) -> f64 {
        if let [op] = self.ops.as_slice() {
            return match op {
                Op::Const(v) => *v,
                Op::Var(i) => values[*i],
                _ => unreachable!(),
            };
        }
        if self.depth > STACK {
            let mut stack = vec![0.0f64; self.depth];
            return self.run(values, &mut stack);
        }
        let mut stack = [0.0f64; STACK];
        self.run(values, &mut stack)
    }

    #[inline]
    fn run(&self, values: &[f64], stack: &mut [f64]) -> f64 {
        let mut top = 0usize;
        for op in &self.ops {
            match *op {
                Op::Const(v) => {
                    stack[top] = v;
                    top += 1;
                }
                Op::Var(i) => {
                    stack[top] = values[i];
                    top += 1;
                }
                Op::Neg => stack[top - 1] = -stack[top - 1],
                Op::Powi(n) => stack[top - 1] = stack[top - 1].powi(n),
                Op::Call(f) => stack[top - 1] = f.apply(stack[top - 1]),
                bin => {
                    top -= 1;
                    let b = stack[top];
                    let a = stack[top - 1];
                    stack[top - 1] = match bin {
                        Op::Add => a + b,
                        Op::Sub => a - b,
                        Op::Mul => a * b,
                        Op::Div => a / b,
                        Op::Pow => a.powf(b),
                        _ => unreachable!(),
                    };
                }
            }
        }
        stack[0]
    }
}

fn emit(e: &Expr, ops: &mut Vec<Op>) {
    match e {
        Expr::Const(v) => ops.push(Op::Const(*v)),
        Expr::Var(i) => ops.push(Op::Var(*i)),
        Expr::Neg(a) => {
            emit(a, ops);
            ops.push(Op::Neg);
        }
        Expr::Call(f, a) => {
            emit(a, ops);
            ops.push(Op::Call(*f));
        }
        Expr::Pow(a, b) => {
            emit(a, ops);
            match **b {
                Expr::Const(n) if n.fract() == 0.0 && n.abs() <= 64.0 => ops.push(Op::Powi(n as i32)),
                _ => {
                    emit(b, ops);
                    ops.push(Op::Pow);
                }
            }
        }
        Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
            emit(a, ops);
            emit(b, ops);
            ops.push(match e {
                Expr::Add(..) => Op::Add,
                Expr::Sub(..) => Op::Sub,
                Expr::Mul(..) => Op::Mul,
                _ => Op::Div,
            });
        }
    }
}

/// An expression together with its compiled program.
#[derive(Debug, Clone, PartialEq)]
pub struct Scalar {
    pub expr: Expr,
    program: Program,
}

impl Scalar {
    pub fn new(expr: Expr) -> Self {
        let program = Program::compile(&expr);
        Scalar { expr, program }
    }

    #[inline]
    pub fn eval(&self, values: &[f64]) -> f64 {
        self.program.eval(values)
    }
}

/// Output shape of a coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    #[allow(clippy::len_without_is_empty)]
    pub fn len(self) -> usize {
        match self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }
}

/// A dense array of scalar expressions (row-major) with a declared shape.
///
/// `dims` is the full index shape; derivative arrays append one state index
/// per order of differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientExpr {
    dims: Vec<usize>,
    items: Vec<Scalar>,
}

impl CoefficientExpr {
    pub fn new(dims: Vec<usize>, exprs: Vec<Expr>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), exprs.len());
        CoefficientExpr { dims, items: exprs.into_iter().map(Scalar::new).collect() }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Scalar] {
        &self.items
    }

    pub fn expr(&self, flat: usize) -> &Expr {
        &self.items[flat].expr
    }

    /// True when every entry simplifies to the literal `0`.
    pub fn is_identically_zero(&self) -> bool {
        self.items.iter().all(|s| s.expr.is_zero())
    }

    pub fn depends_on(&self, var: usize) -> bool {
        self.items.iter().any(|s| s.expr.depends_on(var))
    }

    #[inline]
    pub fn eval_into(&self, values: &[f64], out: &mut [f64]) {
        for (o, s) in out.iter_mut().zip(&self.items) {
            *o = s.eval(values);
        }
    }

    pub fn eval(&self, values: &[f64]) -> Vec<f64> {
        self.items.iter().map(|s| s.eval(values)).collect()
    }

    #[inline]
    pub fn eval_scalar(&self, values: &[f64]) -> f64 {
        self.items[0].eval(values)
    }

    /// Evaluation with domain checks on every entry.
    pub fn eval_checked(&self, values: &[f64], vars: &Variables) -> Result<Vec<f64>, ExprError> {
        self.items.iter().map(|s| s.expr.eval_checked(values, vars)).collect()
    }

    /// Appends one state-index dimension: entry `[.., j]` is the partial
    /// derivative with respect to state component `j`.
    pub fn jacobian(&self, vars: &Variables) -> CoefficientExpr {
        let m = vars.state_dim();
        let mut exprs = Vec::with_capacity(self.items.len() * m);
        for s in &self.items {
            for j in 0..m {
                exprs.push(s.expr.derivative(vars.state(j)));
            }
        }
        let mut dims = self.dims.clone();
        dims.push(m);
        CoefficientExpr::new(dims, exprs)
    }
}

/// Parses a coefficient of the given shape.
pub fn parse_coefficient(source: &str, shape: Shape, vars: &Variables) -> Result<CoefficientExpr, ExprError> {
    let exprs = if shape == Shape::Scalar {
        vec![parse(source, vars)?]
    } else {
        parse_list(source, vars)?
    };
    if exprs.len() != shape.len() {
        return Err(ExprError::Arity { expected: shape.len(), found: exprs.len() });
    }
    let dims = match shape {
        Shape::Scalar => vec![],
        Shape::Vector(n) => vec![n],
        Shape::Matrix(r, c) => vec![r, c],
    };
    Ok(CoefficientExpr::new(dims, exprs.iter().map(Expr::simplify).collect()))
}

/// Derivative of `expr` with respect to the named variable, once or twice.
pub fn differentiate(expr: &Expr, wrt: &str, order: u8, vars: &Variables) -> Result<Expr, ExprError> {
    let var = vars
        .lookup(wrt)
        .ok_or_else(|| ExprError::UnknownIdentifier { name: wrt.to_string(), offset: 0 })?;
    match order {
        1 => Ok(expr.derivative(var)),
        2 => Ok(expr.derivative(var).derivative(var)),
        _ => Err(ExprError::Syntax { offset: 0, message: format!("unsupported derivative order {order}") }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn xu() -> Variables {
        Variables::standard(1, 1)
    }

    fn show(e: &Expr) -> String {
        e.display(&xu()).to_string()
    }

    #[test]
    fn parses_sum_of_variables() {
        let e = parse("x + u", &xu()).unwrap();
        assert_eq!(e, Expr::Add(bx(Expr::Var(0)), bx(Expr::Var(1))));
    }

    #[test]
    fn parses_single_variable() {
        assert_eq!(parse("u", &xu()).unwrap(), Expr::Var(1));
    }

    #[test]
    fn dangling_operator_reports_offset() {
        match parse("x*u +", &xu()) {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_identifier_is_rejected() {
        assert!(matches!(parse("x + y", &xu()), Err(ExprError::UnknownIdentifier { .. })));
        assert!(matches!(parse("tan(x)", &xu()), Err(ExprError::UnknownIdentifier { .. })));
    }

    #[test]
    fn arity_mismatch_is_rejected() {
        let err = parse_coefficient("[x, u]", Shape::Vector(3), &xu()).unwrap_err();
        assert_eq!(err, ExprError::Arity { expected: 3, found: 2 });
    }

    #[test]
    fn derivatives_simplify() {
        let v = xu();
        let e = parse("x + u", &v).unwrap();
        assert_eq!(show(&differentiate(&e, "x", 1, &v).unwrap()), "1");
        let e = parse("x*x", &v).unwrap();
        assert_eq!(show(&differentiate(&e, "x", 2, &v).unwrap()), "2");
        let e = parse("exp(x)*u", &v).unwrap();
        assert_eq!(show(&differentiate(&e, "x", 1, &v).unwrap()), "exp(x)*u");
    }

    #[test]
    fn derivative_matches_central_difference() {
        let v = xu();
        let e = parse("exp(x)*u", &v).unwrap();
        let d = e.derivative(0);
        let (x, u, h) = (0.3, 1.0, 1e-5);
        let p = Program::compile(&e);
        let fd = (p.eval(&[x + h, u]) - p.eval(&[x - h, u])) / (2.0 * h);
        let exact = Program::compile(&d).eval(&[x, u]);
        assert!(((fd - exact) / exact).abs() < 1e-8);
    }

    #[test]
    fn evaluates_examples() {
        let v = xu();
        let b = parse_coefficient("x+u", Shape::Scalar, &v).unwrap();
        assert_eq!(b.eval_scalar(&[1.0, 1.0]), 2.0);
        let s = parse_coefficient("u", Shape::Scalar, &v).unwrap();
        assert_eq!(s.eval_scalar(&[0.5, 2.0]), 2.0);
    }

    #[test]
    fn singularities_are_domain_errors() {
        let v = xu();
        let e = parse("1/x", &v).unwrap();
        match e.eval_checked(&[0.0, 1.0], &v) {
            Err(ExprError::Domain { subexpr, .. }) => assert_eq!(subexpr, "1/x"),
            other => panic!("unexpected {other:?}"),
        }
        let e = parse("2 + log(x)", &v).unwrap();
        match e.eval_checked(&[-1.0, 1.0], &v) {
            Err(ExprError::Domain { subexpr, .. }) => assert_eq!(subexpr, "log(x)"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn precedence_and_associativity() {
        let v = xu();
        let p = |s: &str| Program::compile(&parse(s, &v).unwrap()).eval(&[2.0, 3.0]);
        assert_eq!(p("1 - x - u"), -4.0);
        assert_eq!(p("x ^ u ^ 0"), 2.0);
        assert_eq!(p("-x^2"), -4.0);
        assert_eq!(p("u / x / x"), 0.75);
        assert_eq!(p("pow(x, u) + 1e-1"), 8.1);
        assert_eq!(p("2*(x + u)"), 10.0);
    }

    #[test]
    fn multi_dimensional_names() {
        let v = Variables::standard(2, 1);
        assert_eq!(v.lookup("x2"), Some(1));
        assert_eq!(v.lookup("u"), Some(2));
        assert!(parse("x", &v).is_err());
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0u32..100).prop_map(|n| Expr::Const(n as f64 / 4.0)),
            (0usize..2).prop_map(Expr::Var),
        ];
        leaf.prop_recursive(5, 48, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Expr::Neg(bx(a))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(bx(a), bx(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Sub(bx(a), bx(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(bx(a), bx(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Div(bx(a), bx(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Pow(bx(a), bx(b))),
                inner.clone().prop_map(|a| Expr::Call(Func::Exp, bx(a))),
                inner.prop_map(|a| Expr::Call(Func::Sin, bx(a))),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(e in arb_expr()) {
            let v = xu();
            let printed = e.display(&v).to_string();
            let reparsed = parse(&printed, &v).unwrap();
            prop_assert_eq!(&reparsed, &e);
            prop_assert_eq!(reparsed.display(&v).to_string(), printed);
        }

        #[test]
        fn compiled_matches_tree(e in arb_expr(), x in -2.0f64..2.0, u in 0.5f64..2.0) {
            let v = xu();
            if let Ok(tree) = e.eval_checked(&[x, u], &v) {
                let fast = Program::compile(&e).eval(&[x, u]);
                prop_assert!((tree - fast).abs() <= 1e-9 * (1.0 + tree.abs()));
            }
        }

        #[test]
        fn simplify_preserves_value(e in arb_expr(), x in -2.0f64..2.0, u in 0.5f64..2.0) {
            let v = xu();
            if let Ok(raw) = e.eval_checked(&[x, u], &v) {
                let s = Program::compile(&e.simplify()).eval(&[x, u]);
                prop_assert!((raw - s).abs() <= 1e-9 * (1.0 + raw.abs()));
            }
        }
    }
}
