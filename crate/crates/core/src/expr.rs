//! Scalar expressions over named variables with exact first and second
//! derivatives.
//!
//! Parsing produces a tree; the tree is compiled once into a flat tape that
//! is evaluated forward-over-forward. Hessians are assembled on the upper
//! triangle and mirrored, so they are symmetric bit-for-bit.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Sqrt,
    Exp,
    Log,
    Sin,
    Cos,
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sqrt" => UnaryOp::Sqrt,
            "exp" => UnaryOp::Exp,
            "log" => UnaryOp::Log,
            "sin" => UnaryOp::Sin,
            "cos" => UnaryOp::Cos,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var(usize),
    Unary(UnaryOp, Box<Node>),
    Binary(BinaryOp, Box<Node>, Box<Node>),
    Pow(Box<Node>, u32),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("exponent at byte {offset} is not a non-negative integer literal")]
    NonIntegerExponent { offset: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{func} is undefined at argument {arg}")]
    Domain { func: &'static str, arg: f64 },
    #[error("evaluation produced a non-finite value")]
    NonFinite,
    #[error("point has length {found}, expected {expected}")]
    Dimension { expected: usize, found: usize },
}

/// Value, gradient and Hessian of a scalar expression at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBundle {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Instr {
    Const(f64),
    Var(usize),
    Unary(UnaryOp, usize),
    Binary(BinaryOp, usize, usize),
    Pow(usize, u32),
}

/// A parsed expression together with its compiled evaluation tape.
#[derive(Debug, Clone)]
pub struct Expression {
    root: Node,
    nvars: usize,
    tape: Vec<Instr>,
}

impl PartialEq for Expression {
    fn eq(&self, other: &Self) -> bool {
        self.nvars == other.nvars && self.root == other.root
    }
}

impl Expression {
    pub fn new(root: Node, nvars: usize) -> Result<Self, ParseError> {
        fn check(node: &Node, nvars: usize) -> Result<(), ParseError> {
            match node {
                Node::Var(i) if *i >= nvars => Err(ParseError::UnknownIdentifier {
                    name: format!("#{i}"),
                    offset: 0,
                }),
                Node::Unary(_, a) | Node::Pow(a, _) => check(a, nvars),
                Node::Binary(_, a, b) => {
                    check(a, nvars)?;
                    check(b, nvars)
                }
                _ => Ok(()),
            }
        }
        check(&root, nvars)?;
        let mut tape = Vec::new();
        compile(&root, &mut tape);
        Ok(Expression { root, nvars, tape })
    }

    pub fn constant(c: f64, nvars: usize) -> Self {
        Self::new(Node::Const(c), nvars).expect("constants reference no variables")
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    fn check_len(&self, x: &[f64]) -> Result<(), EvalError> {
        if x.len() != self.nvars {
            return Err(EvalError::Dimension { expected: self.nvars, found: x.len() });
        }
        Ok(())
    }

    /// Value only; cheap path used by the samplers.
    pub fn value(&self, x: &[f64]) -> Result<f64, EvalError> {
        self.check_len(x)?;
        let mut vals = Vec::with_capacity(self.tape.len());
        for ins in &self.tape {
            let v = match *ins {
                Instr::Const(c) => c,
                Instr::Var(i) => x[i],
                Instr::Unary(op, a) => unary_derivs(op, vals[a])?.0,
                Instr::Binary(op, a, b) => {
                    let (u, w) = (vals[a], vals[b]);
                    match op {
                        BinaryOp::Add => u + w,
                        BinaryOp::Sub => u - w,
                        BinaryOp::Mul => u * w,
                        BinaryOp::Div => u * reciprocal(w)?.0,
                    }
                }
                Instr::Pow(a, k) => vals[a].powi(k as i32),
            };
            vals.push(v);
        }
        let v = *vals.last().expect("tape is never empty");
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite)
        }
    }

    pub fn eval_bundle(&self, x: &[f64]) -> Result<EvalBundle, EvalError> {
        self.check_len(x)?;
        let n = self.nvars;
        let len = self.tape.len();
        let mut val = vec![0.0; len];
        let mut grad = vec![0.0; len * n];
        // Upper triangle only, packed row-major: (i, j) with i <= j.
        let tri = n * (n + 1) / 2;
        let mut hess = vec![0.0; len * tri];

        for (k, ins) in self.tape.iter().enumerate() {
            let (done, rest) = grad.split_at_mut(k * n);
            let g = &mut rest[..n];
            let (hdone, hrest) = hess.split_at_mut(k * tri);
            let h = &mut hrest[..tri];
            match *ins {
                Instr::Const(c) => val[k] = c,
                Instr::Var(i) => {
                    val[k] = x[i];
                    g[i] = 1.0;
                }
                Instr::Unary(op, a) => {
                    let (f, d1, d2) = unary_derivs(op, val[a])?;
                    val[k] = f;
                    chain(&done[a * n..(a + 1) * n], &hdone[a * tri..(a + 1) * tri], d1, d2, g, h, n);
                }
                Instr::Pow(a, p) => {
                    let u = val[a];
                    let (f, d1, d2) = match p {
                        0 => (1.0, 0.0, 0.0),
                        1 => (u, 1.0, 0.0),
                        _ => {
                            let pf = p as f64;
                            (u.powi(p as i32), pf * u.powi(p as i32 - 1), pf * (pf - 1.0) * u.powi(p as i32 - 2))
                        }
                    };
                    val[k] = f;
                    chain(&done[a * n..(a + 1) * n], &hdone[a * tri..(a + 1) * tri], d1, d2, g, h, n);
                }
                Instr::Binary(op, a, b) => {
                    let (ga, gb) = (&done[a * n..(a + 1) * n], &done[b * n..(b + 1) * n]);
                    let (ha, hb) = (&hdone[a * tri..(a + 1) * tri], &hdone[b * tri..(b + 1) * tri]);
                    let (u, w) = (val[a], val[b]);
                    match op {
                        BinaryOp::Add | BinaryOp::Sub => {
                            let s = if op == BinaryOp::Add { 1.0 } else { -1.0 };
                            val[k] = u + s * w;
                            for i in 0..n {
                                g[i] = ga[i] + s * gb[i];
                            }
                            for t in 0..tri {
                                h[t] = ha[t] + s * hb[t];
                            }
                        }
                        BinaryOp::Mul => {
                            val[k] = u * w;
                            product(u, ga, ha, w, gb, hb, g, h, n);
                        }
                        BinaryOp::Div => {
                            // u * r(w) with r = 1/w.
                            let (r, d1, d2) = reciprocal(w)?;
                            let mut gr = vec![0.0; n];
                            let mut hr = vec![0.0; tri];
                            chain(gb, hb, d1, d2, &mut gr, &mut hr, n);
                            val[k] = u * r;
                            product(u, ga, ha, r, &gr, &hr, g, h, n);
                        }
                    }
                }
            }
        }

        let last = len - 1;
        let value = val[last];
        let gradient = DVector::from_column_slice(&grad[last * n..(last + 1) * n]);
        let hp = &hess[last * tri..(last + 1) * tri];
        let mut hessian = DMatrix::zeros(n, n);
        let mut t = 0;
        for i in 0..n {
            for j in i..n {
                hessian[(i, j)] = hp[t];
                hessian[(j, i)] = hp[t];
                t += 1;
            }
        }
        if !value.is_finite() || gradient.iter().any(|v| !v.is_finite()) || hessian.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite);
        }
        Ok(EvalBundle { value, gradient, hessian })
    }

    /// Fully parenthesized rendering that re-parses to the same tree.
    pub fn render(&self, names: &[String]) -> String {
        let mut out = String::new();
        render_node(&self.root, names, &mut out);
        out
    }
}

fn compile(node: &Node, tape: &mut Vec<Instr>) -> usize {
    let ins = match node {
        Node::Const(c) => Instr::Const(*c),
        Node::Var(i) => Instr::Var(*i),
        Node::Unary(op, a) => {
            let a = compile(a, tape);
            Instr::Unary(*op, a)
        }
        Node::Binary(op, a, b) => {
            let a = compile(a, tape);
            let b = compile(b, tape);
            Instr::Binary(*op, a, b)
        }
        Node::Pow(a, k) => {
            let a = compile(a, tape);
            Instr::Pow(a, *k)
        }
    };
    tape.push(ins);
    tape.len() - 1
}

fn unary_derivs(op: UnaryOp, u: f64) -> Result<(f64, f64, f64), EvalError> {
    Ok(match op {
        UnaryOp::Neg => (-u, -1.0, 0.0),
        UnaryOp::Sqrt => {
            if !(u > 0.0) {
                return Err(EvalError::Domain { func: "sqrt", arg: u });
            }
            let s = u.sqrt();
            (s, 0.5 / s, -0.25 / (u * s))
        }
        UnaryOp::Log => {
            if !(u > 0.0) {
                return Err(EvalError::Domain { func: "log", arg: u });
            }
            (u.ln(), 1.0 / u, -1.0 / (u * u))
        }
        UnaryOp::Exp => {
            let e = u.exp();
            (e, e, e)
        }
        UnaryOp::Sin => (u.sin(), u.cos(), -u.sin()),
        UnaryOp::Cos => (u.cos(), -u.sin(), -u.cos()),
    })
}

fn reciprocal(w: f64) -> Result<(f64, f64, f64), EvalError> {
    if w == 0.0 {
        return Err(EvalError::NonFinite);
    }
    let r = 1.0 / w;
    Ok((r, -r * r, 2.0 * r * r * r))
}

// phi(a): grad = d1 ga, hess = d1 Ha + d2 ga ga^T
fn chain(ga: &[f64], ha: &[f64], d1: f64, d2: f64, g: &mut [f64], h: &mut [f64], n: usize) {
    for i in 0..n {
        g[i] = d1 * ga[i];
    }
    let mut t = 0;
    for i in 0..n {
        for j in i..n {
            h[t] = d1 * ha[t] + d2 * ga[i] * ga[j];
            t += 1;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn product(u: f64, ga: &[f64], ha: &[f64], w: f64, gb: &[f64], hb: &[f64], g: &mut [f64], h: &mut [f64], n: usize) {
    for i in 0..n {
        g[i] = u * gb[i] + w * ga[i];
    }
    let mut t = 0;
    for i in 0..n {
        for j in i..n {
            h[t] = u * hb[t] + w * ha[t] + (ga[i] * gb[j] + gb[i] * ga[j]);
            t += 1;
        }
    }
}

fn render_node(node: &Node, names: &[String], out: &mut String) {
    match node {
        Node::Const(c) => {
            if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) {
                out.push_str(&format!("(-{:?})", -c));
            } else {
                out.push_str(&format!("{c:?}"));
            }
        }
        Node::Var(i) => out.push_str(&names[*i]),
        Node::Unary(UnaryOp::Neg, a) => {
            out.push_str("(-");
            render_node(a, names, out);
            out.push(')');
        }
        Node::Unary(op, a) => {
            out.push_str(op.name());
            out.push('(');
            render_node(a, names, out);
            out.push(')');
        }
        Node::Binary(op, a, b) => {
            let sym = match op {
                BinaryOp::Add => " + ",
                BinaryOp::Sub => " - ",
                BinaryOp::Mul => " * ",
                BinaryOp::Div => " / ",
            };
            out.push('(');
            render_node(a, names, out);
            out.push_str(sym);
            render_node(b, names, out);
            out.push(')');
        }
        Node::Pow(a, k) => {
            out.push('(');
            render_node(a, names, out);
            out.push_str(&format!(")^{k}"));
        }
    }
}

// ---------------------------------------------------------------------------
// Parser

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64, bool),
    Ident(String),
    Op(u8),
    End,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn next(&mut self) -> Result<(Tok, usize), ParseError> {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        let Some(&c) = self.src.get(self.pos) else {
            return Ok((Tok::End, start));
        };
        if c.is_ascii_digit() || c == b'.' {
            let mut end = start;
            let mut integer = true;
            while end < self.src.len() && (self.src[end].is_ascii_digit() || self.src[end] == b'.') {
                integer &= self.src[end] != b'.';
                end += 1;
            }
            if end < self.src.len() && (self.src[end] == b'e' || self.src[end] == b'E') {
                let mut e = end + 1;
                if e < self.src.len() && (self.src[e] == b'+' || self.src[e] == b'-') {
                    e += 1;
                }
                if e < self.src.len() && self.src[e].is_ascii_digit() {
                    while e < self.src.len() && self.src[e].is_ascii_digit() {
                        e += 1;
                    }
                    end = e;
                    integer = false;
                }
            }
            let text = std::str::from_utf8(&self.src[start..end]).expect("ascii");
            let v: f64 = text.parse().map_err(|_| ParseError::Syntax {
                offset: start,
                message: format!("malformed number `{text}`"),
            })?;
            self.pos = end;
            return Ok((Tok::Num(v, integer), start));
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let mut end = start;
            while end < self.src.len() && (self.src[end].is_ascii_alphanumeric() || self.src[end] == b'_') {
                end += 1;
            }
            self.pos = end;
            let s = std::str::from_utf8(&self.src[start..end]).expect("ascii").to_string();
            return Ok((Tok::Ident(s), start));
        }
        if b"+-*/^()".contains(&c) {
            self.pos += 1;
            return Ok((Tok::Op(c), start));
        }
        Err(ParseError::Syntax { offset: start, message: format!("unexpected character `{}`", c as char) })
    }
}

struct Parser<'a> {
    lex: Lexer<'a>,
    tok: Tok,
    at: usize,
    names: &'a [String],
}

impl<'a> Parser<'a> {
    fn bump(&mut self) -> Result<(), ParseError> {
        let (t, at) = self.lex.next()?;
        self.tok = t;
        self.at = at;
        Ok(())
    }

    fn fail<T>(&self, message: &str) -> Result<T, ParseError> {
        let what = match &self.tok {
            Tok::End => "end of input".to_string(),
            Tok::Num(v, _) => format!("number {v}"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Op(c) => format!("`{}`", *c as char),
        };
        Err(ParseError::Syntax { offset: self.at, message: format!("{message}, found {what}") })
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        while let Tok::Op(c @ (b'+' | b'-')) = self.tok {
            self.bump()?;
            let rhs = self.term()?;
            let op = if c == b'+' { BinaryOp::Add } else { BinaryOp::Sub };
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.factor()?;
        while let Tok::Op(c @ (b'*' | b'/')) = self.tok {
            self.bump()?;
            let rhs = self.factor()?;
            let op = if c == b'*' { BinaryOp::Mul } else { BinaryOp::Div };
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Node, ParseError> {
        let negate = self.tok == Tok::Op(b'-');
        if negate {
            self.bump()?;
        }
        let mut base = self.atom()?;
        if self.tok == Tok::Op(b'^') {
            self.bump()?;
            match self.tok {
                Tok::Num(v, true) if v <= u32::MAX as f64 => {
                    base = Node::Pow(Box::new(base), v as u32);
                    self.bump()?;
                }
                _ => return Err(ParseError::NonIntegerExponent { offset: self.at }),
            }
        }
        Ok(if negate { Node::Unary(UnaryOp::Neg, Box::new(base)) } else { base })
    }

    fn atom(&mut self) -> Result<Node, ParseError> {
        match self.tok.clone() {
            Tok::Num(v, _) => {
                self.bump()?;
                Ok(Node::Const(v))
            }
            Tok::Ident(name) => {
                let at = self.at;
                self.bump()?;
                if self.tok == Tok::Op(b'(') {
                    let Some(op) = UnaryOp::from_name(&name) else {
                        return Err(ParseError::UnknownIdentifier { name, offset: at });
                    };
                    self.bump()?;
                    let inner = self.expr()?;
                    self.expect_close()?;
                    return Ok(Node::Unary(op, Box::new(inner)));
                }
                match self.names.iter().position(|n| *n == name) {
                    Some(i) => Ok(Node::Var(i)),
                    None => Err(ParseError::UnknownIdentifier { name, offset: at }),
                }
            }
            Tok::Op(b'(') => {
                self.bump()?;
                let inner = self.expr()?;
                self.expect_close()?;
                Ok(inner)
            }
            _ => self.fail("expected a number, identifier or `(`"),
        }
    }

    fn expect_close(&mut self) -> Result<(), ParseError> {
        if self.tok != Tok::Op(b')') {
            return self.fail("expected `)`");
        }
        self.bump()
    }
}

pub fn parse(text: &str, variables: &[String]) -> Result<Expression, ParseError> {
    let mut p = Parser { lex: Lexer { src: text.as_bytes(), pos: 0 }, tok: Tok::End, at: 0, names: variables };
    p.bump()?;
    let root = p.expr()?;
    if p.tok != Tok::End {
        return p.fail("expected an operator or end of input");
    }
    Expression::new(root, variables.len())
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = (0..self.nvars).map(|i| format!("x{}", i + 1)).collect();
        f.write_str(&self.render(&names))
    }
}
