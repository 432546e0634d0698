//! Small expression language for output maps and bound functions.
//!
//! Grammar (lowest to highest precedence): `+ -`, `* /`, unary `-`, `^`.
//! `^` is right-associative and its exponent must be a constant. Atoms are
//! numbers, `t`, `pi`, `x1..xn` (components of the first state block), named
//! parameters (substituted inline) and the calls `sin cos exp ln sqrt`.
//!
//! Derivatives are taken symbolically and the results are compiled to a
//! straight-line program with shared subexpressions.

use std::collections::HashMap;
use std::fmt;

use smallvec::SmallVec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        match name {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            "ln" => Some(Func::Ln),
            "sqrt" => Some(Func::Sqrt),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Sqrt => "sqrt",
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Exp => v.exp(),
            Func::Ln => v.ln(),
            Func::Sqrt => v.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    Time,
    /// Zero-based component of x1.
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, f64),
    Call(Func, Box<Expr>),
}

/// Differentiation variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    Time,
    Var(usize),
}

fn is_const(e: &Expr, v: f64) -> bool {
    matches!(e, Expr::Const(c) if *c == v)
}

// Simplifying constructors; they fold constants, so they are not the operator traits.
#[allow(clippy::should_implement_trait)]
impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn neg(a: Expr) -> Expr {
        match a {
            Expr::Const(c) => Expr::Const(-c),
            Expr::Neg(inner) => *inner,
            other => Expr::Neg(Box::new(other)),
        }
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        match (&a, &b) {
            (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
            _ if is_const(&a, 0.0) => b,
            _ if is_const(&b, 0.0) => a,
            _ => Expr::Add(Box::new(a), Box::new(b)),
        }
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        match (&a, &b) {
            (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
            _ if is_const(&b, 0.0) => a,
            _ if is_const(&a, 0.0) => Expr::neg(b),
            _ => Expr::Sub(Box::new(a), Box::new(b)),
        }
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        match (&a, &b) {
            (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
            _ if is_const(&a, 0.0) || is_const(&b, 0.0) => Expr::Const(0.0),
            _ if is_const(&a, 1.0) => b,
            _ if is_const(&b, 1.0) => a,
            _ if is_const(&a, -1.0) => Expr::neg(b),
            _ if is_const(&b, -1.0) => Expr::neg(a),
            _ => Expr::Mul(Box::new(a), Box::new(b)),
        }
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        match (&a, &b) {
            (Expr::Const(x), Expr::Const(y)) => Expr::Const(x / y),
            _ if is_const(&a, 0.0) => Expr::Const(0.0),
            _ if is_const(&b, 1.0) => a,
            _ => Expr::Div(Box::new(a), Box::new(b)),
        }
    }

    pub fn pow(a: Expr, c: f64) -> Expr {
        if c == 0.0 {
            return Expr::Const(1.0);
        }
        if c == 1.0 {
            return a;
        }
        match a {
            Expr::Const(x) => Expr::Const(powc(x, c)),
            other => Expr::Pow(Box::new(other), c),
        }
    }

    pub fn call(f: Func, a: Expr) -> Expr {
        match a {
            Expr::Const(x) => Expr::Const(f.apply(x)),
            other => Expr::Call(f, Box::new(other)),
        }
    }

    pub fn depends_on(&self, w: Wrt) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Time => w == Wrt::Time,
            Expr::Var(i) => w == Wrt::Var(*i),
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.depends_on(w),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.depends_on(w) || b.depends_on(w)
            }
        }
    }

    /// True if any `x` component appears.
    pub fn depends_on_state(&self) -> bool {
        match self {
            Expr::Const(_) | Expr::Time => false,
            Expr::Var(_) => true,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.depends_on_state(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.depends_on_state() || b.depends_on_state()
            }
        }
    }

    pub fn derivative(&self, w: Wrt) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Time => Expr::Const(if w == Wrt::Time { 1.0 } else { 0.0 }),
            Expr::Var(i) => Expr::Const(if w == Wrt::Var(*i) { 1.0 } else { 0.0 }),
            Expr::Neg(a) => Expr::neg(a.derivative(w)),
            Expr::Add(a, b) => Expr::add(a.derivative(w), b.derivative(w)),
            Expr::Sub(a, b) => Expr::sub(a.derivative(w), b.derivative(w)),
            Expr::Mul(a, b) => Expr::add(
                Expr::mul(a.derivative(w), (**b).clone()),
                Expr::mul((**a).clone(), b.derivative(w)),
            ),
            Expr::Div(a, b) => {
                let da = a.derivative(w);
                let db = b.derivative(w);
                Expr::sub(
                    Expr::div(da, (**b).clone()),
                    Expr::div(
                        Expr::mul((**a).clone(), db),
                        Expr::pow((**b).clone(), 2.0),
                    ),
                )
            }
            Expr::Pow(a, c) => Expr::mul(
                Expr::mul(Expr::Const(*c), Expr::pow((**a).clone(), c - 1.0)),
                a.derivative(w),
            ),
            Expr::Call(f, a) => {
                let da = a.derivative(w);
                let inner = (**a).clone();
                let outer = match f {
                    Func::Sin => Expr::call(Func::Cos, inner),
                    Func::Cos => Expr::neg(Expr::call(Func::Sin, inner)),
                    Func::Exp => Expr::call(Func::Exp, inner),
                    Func::Ln => return Expr::div(da, inner),
                    Func::Sqrt => {
                        return Expr::div(da, Expr::mul(Expr::Const(2.0), Expr::call(Func::Sqrt, inner)))
                    }
                };
                Expr::mul(outer, da)
            }
        }
    }

    pub fn compile(&self) -> Tape {
        Tape::build(&[self])
    }

    /// Direct tree-walking evaluation; the tape is the fast path.
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Time => t,
            Expr::Var(i) => x[*i],
            Expr::Neg(a) => -a.eval(t, x),
            Expr::Add(a, b) => a.eval(t, x) + b.eval(t, x),
            Expr::Sub(a, b) => a.eval(t, x) - b.eval(t, x),
            Expr::Mul(a, b) => a.eval(t, x) * b.eval(t, x),
            Expr::Div(a, b) => a.eval(t, x) / b.eval(t, x),
            Expr::Pow(a, c) => powc(a.eval(t, x), *c),
            Expr::Call(f, a) => f.apply(a.eval(t, x)),
        }
    }
}

fn powc(x: f64, c: f64) -> f64 {
    if c.fract() == 0.0 && c.abs() <= 64.0 {
        x.powi(c as i32)
    } else {
        x.powf(c)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if *c < 0.0 {
                    write!(f, "({c:?})")
                } else {
                    write!(f, "{c:?}")
                }
            }
            Expr::Time => write!(f, "t"),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, c) => {
                if *c < 0.0 {
                    write!(f, "({a} ^ ({c:?}))")
                } else {
                    write!(f, "({a} ^ {c:?})")
                }
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Node {
    Const(f64),
    Time,
    Var(usize),
    Neg(u32),
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Powi(u32, i32),
    Powf(u32, f64),
    Call(Func, u32),
}

impl Node {
    fn key(self) -> (u8, u64, u32, u32) {
        match self {
            Node::Const(c) => (0, c.to_bits(), 0, 0),
            Node::Time => (1, 0, 0, 0),
            Node::Var(i) => (2, i as u64, 0, 0),
            Node::Neg(a) => (3, 0, a, 0),
            Node::Add(a, b) => (4, 0, a, b),
            Node::Sub(a, b) => (5, 0, a, b),
            Node::Mul(a, b) => (6, 0, a, b),
            Node::Div(a, b) => (7, 0, a, b),
            Node::Powi(a, k) => (8, k as u64, a, 0),
            Node::Powf(a, c) => (9, c.to_bits(), a, 0),
            Node::Call(f, a) => (10, f as u64, a, 0),
        }
    }
}

/// Straight-line program for one or more expressions. Repeated subexpressions,
/// such as a time function shared by a value and its partials, are computed once.
#[derive(Clone, Debug, PartialEq)]
pub struct Tape {
    nodes: Vec<Node>,
    outputs: Vec<u32>,
}

struct Builder {
    nodes: Vec<Node>,
    seen: HashMap<(u8, u64, u32, u32), u32>,
}

impl Builder {
    fn intern(&mut self, n: Node) -> u32 {
        *self.seen.entry(n.key()).or_insert_with(|| {
            self.nodes.push(n);
            (self.nodes.len() - 1) as u32
        })
    }

    fn add(&mut self, e: &Expr) -> u32 {
        let n = match e {
            Expr::Const(c) => Node::Const(*c),
            Expr::Time => Node::Time,
            Expr::Var(i) => Node::Var(*i),
            Expr::Neg(a) => Node::Neg(self.add(a)),
            Expr::Add(a, b) => Node::Add(self.add(a), self.add(b)),
            Expr::Sub(a, b) => Node::Sub(self.add(a), self.add(b)),
            Expr::Mul(a, b) => Node::Mul(self.add(a), self.add(b)),
            Expr::Div(a, b) => Node::Div(self.add(a), self.add(b)),
            Expr::Pow(a, c) => {
                let a = self.add(a);
                if c.fract() == 0.0 && c.abs() <= 64.0 {
                    Node::Powi(a, *c as i32)
                } else {
                    Node::Powf(a, *c)
                }
            }
            Expr::Call(f, a) => Node::Call(*f, self.add(a)),
        };
        self.intern(n)
    }
}

impl Tape {
    /// One program whose outputs are `exprs`, in order.
    pub fn build(exprs: &[&Expr]) -> Tape {
        let mut b = Builder {
            nodes: Vec::new(),
            seen: HashMap::new(),
        };
        let outputs = exprs.iter().map(|e| b.add(e)).collect();
        Tape {
            nodes: b.nodes,
            outputs,
        }
    }

    pub fn outputs(&self) -> usize {
        self.outputs.len()
    }

    /// Writes every output into `out`, which must hold [`Tape::outputs`] values.
    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let mut reg: SmallVec<[f64; 96]> = SmallVec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match *node {
                Node::Const(c) => c,
                Node::Time => t,
                Node::Var(i) => x[i],
                Node::Neg(a) => -reg[a as usize],
                Node::Add(a, b) => reg[a as usize] + reg[b as usize],
                Node::Sub(a, b) => reg[a as usize] - reg[b as usize],
                Node::Mul(a, b) => reg[a as usize] * reg[b as usize],
                Node::Div(a, b) => reg[a as usize] / reg[b as usize],
                Node::Powi(a, k) => reg[a as usize].powi(k),
                Node::Powf(a, c) => reg[a as usize].powf(c),
                Node::Call(f, a) => f.apply(reg[a as usize]),
            };
            reg.push(v);
        }
        for (o, &i) in out.iter_mut().zip(&self.outputs) {
            *o = reg[i as usize];
        }
    }

    /// First output.
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        let mut out = [0.0];
        self.eval_into(t, x, &mut out);
        out[0]
    }

    pub fn is_constant_zero(&self) -> bool {
        self.outputs.len() == 1 && self.nodes[self.outputs[0] as usize] == Node::Const(0.0)
    }
}

/// Expression syntax error; `column` is 1-based within the source string.
#[derive(Clone, Debug, PartialEq)]
pub struct ExprError {
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ExprError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "column {}: {}", self.column, self.message)
    }
}

impl std::error::Error for ExprError {}

/// Names visible to the parser.
#[derive(Clone, Debug, Default)]
pub struct Symbols {
    /// Number of state components; `x1..x{n_vars}` are valid.
    pub n_vars: usize,
    pub params: HashMap<String, Expr>,
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == '.' {
            while i < bytes.len() && ((bytes[i] as char).is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
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
            let v: f64 = text.parse().map_err(|_| ExprError {
                column: start + 1,
                message: format!("malformed number `{text}`"),
            })?;
            out.push((Tok::Num(v), start));
        } else if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((Tok::Ident(src[start..i].to_string()), start));
        } else {
            let tok = match c {
                '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                _ => {
                    return Err(ExprError {
                        column: start + 1,
                        message: format!("unexpected character `{c}`"),
                    })
                }
            };
            i += c.len_utf8();
            out.push((tok, start));
        }
    }
    Ok(out)
}

/// Identifiers referenced by `src` (used to order parameter definitions).
pub fn identifiers(src: &str) -> Result<Vec<String>, ExprError> {
    Ok(tokenize(src)?
        .into_iter()
        .filter_map(|(t, _)| match t {
            Tok::Ident(s) => Some(s),
            _ => None,
        })
        .collect())
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
    syms: &'a Symbols,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn column(&self) -> usize {
        self.toks.get(self.pos).map(|(_, c)| *c).unwrap_or(self.end) + 1
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError {
            column: self.column(),
            message: message.into(),
        })
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if c == '+' {
                Expr::add(lhs, rhs)
            } else {
                Expr::sub(lhs, rhs)
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if c == '*' {
                Expr::mul(lhs, rhs)
            } else {
                Expr::div(lhs, rhs)
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Ok(Expr::neg(self.unary()?))
            }
            Some(Tok::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let col = self.column();
            let exp = self.unary()?;
            match exp {
                Expr::Const(c) => Ok(Expr::pow(base, c)),
                _ => Err(ExprError {
                    column: col,
                    message: "exponent must be a constant".into(),
                }),
            }
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        let Some((tok, col)) = self.toks.get(self.pos).cloned() else {
            return self.err("unexpected end of expression");
        };
        match tok {
            Tok::Num(v) => {
                self.pos += 1;
                Ok(Expr::Const(v))
            }
            Tok::LParen => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect_rparen()?;
                Ok(e)
            }
            Tok::Ident(name) => {
                self.pos += 1;
                if let Some(f) = Func::from_name(&name) {
                    if self.peek() != Some(&Tok::LParen) {
                        return self.err(format!("`{name}` must be called with parentheses"));
                    }
                    self.pos += 1;
                    let arg = self.expr()?;
                    self.expect_rparen()?;
                    return Ok(Expr::call(f, arg));
                }
                self.resolve(&name, col)
            }
            Tok::RParen => self.err("unexpected `)`"),
            Tok::Op(c) => self.err(format!("unexpected operator `{c}`")),
        }
    }

    fn resolve(&self, name: &str, col: usize) -> Result<Expr, ExprError> {
        if name == "t" {
            return Ok(Expr::Time);
        }
        if name == "pi" {
            return Ok(Expr::Const(std::f64::consts::PI));
        }
        if let Some(e) = self.syms.params.get(name) {
            return Ok(e.clone());
        }
        if let Some(idx) = name.strip_prefix('x').and_then(|s| s.parse::<usize>().ok()) {
            if idx >= 1 && idx <= self.syms.n_vars {
                return Ok(Expr::Var(idx - 1));
            }
            return Err(ExprError {
                column: col + 1,
                message: format!("`{name}` is out of range (state has {} components)", self.syms.n_vars),
            });
        }
        Err(ExprError {
            column: col + 1,
            message: format!("unknown identifier `{name}`"),
        })
    }

    fn expect_rparen(&mut self) -> Result<(), ExprError> {
        if self.peek() == Some(&Tok::RParen) {
            self.pos += 1;
            Ok(())
        } else {
            self.err("expected `)`")
        }
    }
}

pub fn parse(src: &str, syms: &Symbols) -> Result<Expr, ExprError> {
    let toks = tokenize(src)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end: src.len(),
        syms,
    };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return p.err("unexpected trailing input");
    }
    Ok(e)
}
