//! Closed-form coefficient expressions.
//!
//! Coefficients, sources and boundary data are given as short formulas over
//! the torus variables `y1..yd` (or the physical variables `x1..xd`). The
//! grammar, from loosest to tightest binding:
//!
//! ```text
//! expr    = term { ("+" | "-") term } ;
//! term    = unary { ("*" | "/") unary } ;
//! unary   = "-" unary | power ;
//! power   = primary [ "^" unary ] ;            (* right associative *)
//! primary = number | "pi" | var | func "(" expr ")" | "(" expr ")" ;
//! var     = ("y" | "x") digit { digit } ;
//! func    = "sin" | "cos" | "exp" | "log" | "sqrt" | "tanh" ;
//! number  = digit { digit } [ "." { digit } ] [ ("e" | "E") [ "+" | "-" ] digit { digit } ] ;
//! ```
//!
//! Identifiers are case-sensitive and angles are in radians.

use std::fmt;

use thiserror::Error;

use crate::torus::{ScalarField, TorusGrid};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { offset: usize, name: String },
    #[error("variable `{name}` at byte {offset} is out of range for dimension {dim}")]
    VariableOutOfRange {
        offset: usize,
        name: String,
        dim: usize,
    },
    #[error("empty expression")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("domain error in `{op}` at byte {offset}: argument {arg}")]
    Domain {
        op: &'static str,
        offset: usize,
        arg: f64,
    },
    #[error("point has {got} coordinates, expression expects {expected}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Tanh,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "tanh" => Func::Tanh,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

/// Torus variables `y_i` and physical variables `x_i` are both 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    Y(usize),
    X(usize),
}

impl Var {
    pub fn index(self) -> usize {
        match self {
            Var::Y(i) | Var::X(i) => i,
        }
    }
}

#[derive(Debug, Clone)]
pub enum NodeKind {
    Const(f64),
    Pi,
    Var(Var),
    Neg(Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

/// A syntax tree node together with the byte offset it was parsed from.
#[derive(Debug, Clone)]
pub struct Node {
    pub kind: NodeKind,
    pub offset: usize,
}

impl Node {
    pub fn new(kind: NodeKind) -> Self {
        Node { kind, offset: 0 }
    }

    /// Structural equality, ignoring source offsets.
    pub fn same_shape(&self, other: &Node) -> bool {
        match (&self.kind, &other.kind) {
            (NodeKind::Const(a), NodeKind::Const(b)) => a.to_bits() == b.to_bits(),
            (NodeKind::Pi, NodeKind::Pi) => true,
            (NodeKind::Var(a), NodeKind::Var(b)) => a == b,
            (NodeKind::Neg(a), NodeKind::Neg(b)) => a.same_shape(b),
            (NodeKind::Binary(o1, l1, r1), NodeKind::Binary(o2, l2, r2)) => {
                o1 == o2 && l1.same_shape(l2) && r1.same_shape(r2)
            }
            (NodeKind::Call(f1, a1), NodeKind::Call(f2, a2)) => f1 == f2 && a1.same_shape(a2),
            _ => false,
        }
    }

    fn precedence(&self) -> u8 {
        match &self.kind {
            NodeKind::Binary(BinOp::Add | BinOp::Sub, ..) => 1,
            NodeKind::Binary(BinOp::Mul | BinOp::Div, ..) => 2,
            NodeKind::Neg(_) => 3,
            NodeKind::Binary(BinOp::Pow, ..) => 4,
            _ => 5,
        }
    }

    fn eval(&self, point: &[f64]) -> Result<f64, EvalError> {
        let v = match &self.kind {
            NodeKind::Const(c) => *c,
            NodeKind::Pi => std::f64::consts::PI,
            NodeKind::Var(v) => point[v.index() - 1],
            NodeKind::Neg(a) => -a.eval(point)?,
            NodeKind::Binary(op, l, r) => {
                let a = l.eval(point)?;
                let b = r.eval(point)?;
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(self.domain("/", b));
                        }
                        a / b
                    }
                    BinOp::Pow => {
                        let p = a.powf(b);
                        if p.is_nan() || (a == 0.0 && b < 0.0) {
                            return Err(self.domain("^", a));
                        }
                        p
                    }
                }
            }
            NodeKind::Call(f, arg) => {
                let x = arg.eval(point)?;
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Exp => x.exp(),
                    Func::Tanh => x.tanh(),
                    Func::Log => {
                        if x <= 0.0 {
                            return Err(self.domain("log", x));
                        }
                        x.ln()
                    }
                    Func::Sqrt => {
                        if x < 0.0 {
                            return Err(self.domain("sqrt", x));
                        }
                        x.sqrt()
                    }
                }
            }
        };
        Ok(v)
    }

    fn domain(&self, op: &'static str, arg: f64) -> EvalError {
        EvalError::Domain {
            op,
            offset: self.offset,
            arg,
        }
    }

    fn visit_vars(&self, out: &mut Vec<Var>) {
        match &self.kind {
            NodeKind::Var(v) => out.push(*v),
            NodeKind::Neg(a) | NodeKind::Call(_, a) => a.visit_vars(out),
            NodeKind::Binary(_, l, r) => {
                l.visit_vars(out);
                r.visit_vars(out);
            }
            NodeKind::Const(_) | NodeKind::Pi => {}
        }
    }

    fn write_child(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        if self.precedence() < min_prec {
            write!(f, "({self})")
        } else {
            write!(f, "{self}")
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            NodeKind::Const(c) => write!(f, "{c:?}"),
            NodeKind::Pi => f.write_str("pi"),
            NodeKind::Var(Var::Y(i)) => write!(f, "y{i}"),
            NodeKind::Var(Var::X(i)) => write!(f, "x{i}"),
            NodeKind::Neg(a) => {
                f.write_str("-")?;
                a.write_child(f, 3)
            }
            NodeKind::Binary(op, l, r) => {
                let (lp, rp) = match op {
                    BinOp::Add | BinOp::Sub => (1, 2),
                    BinOp::Mul | BinOp::Div => (2, 3),
                    BinOp::Pow => (5, 3),
                };
                l.write_child(f, lp)?;
                write!(f, " {} ", op.symbol())?;
                r.write_child(f, rp)
            }
            NodeKind::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

/// A parsed coefficient formula in `dim` variables.
#[derive(Debug, Clone)]
pub struct Expression {
    root: Node,
    dim: usize,
    source: String,
}

impl Expression {
    /// Wraps an already built tree, validating variable indices.
    pub fn from_tree(root: Node, dim: usize) -> Result<Self, ParseError> {
        let mut vars = Vec::new();
        root.visit_vars(&mut vars);
        if let Some(v) = vars.iter().find(|v| v.index() == 0 || v.index() > dim) {
            let name = match v {
                Var::Y(i) => format!("y{i}"),
                Var::X(i) => format!("x{i}"),
            };
            return Err(ParseError::VariableOutOfRange {
                offset: 0,
                name,
                dim,
            });
        }
        let source = root.to_string();
        Ok(Expression { root, dim, source })
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The text this expression was parsed from.
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn same_shape(&self, other: &Expression) -> bool {
        self.root.same_shape(&other.root)
    }

    pub fn uses_x(&self) -> bool {
        self.vars().iter().any(|v| matches!(v, Var::X(_)))
    }

    pub fn uses_y(&self) -> bool {
        self.vars().iter().any(|v| matches!(v, Var::Y(_)))
    }

    fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.root.visit_vars(&mut out);
        out
    }

    /// Evaluates at `point`; `y_i` and `x_i` both read `point[i - 1]`.
    pub fn evaluate(&self, point: &[f64]) -> Result<f64, EvalError> {
        if point.len() != self.dim {
            return Err(EvalError::Dimension {
                expected: self.dim,
                got: point.len(),
            });
        }
        self.root.eval(point)
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}

pub fn parse_expression(source: &str, dim: usize) -> Result<Expression, ParseError> {
    if source.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let mut p = Parser {
        src: source.as_bytes(),
        pos: 0,
        dim,
        depth: 0,
    };
    let root = p.expr()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.syntax(p.pos, "unexpected trailing input"));
    }
    Ok(Expression {
        root,
        dim,
        source: source.to_string(),
    })
}

// Nesting beyond this is rejected rather than risking stack exhaustion.
const MAX_DEPTH: usize = 256;

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    dim: usize,
    depth: usize,
}

impl Parser<'_> {
    fn syntax(&self, offset: usize, message: &str) -> ParseError {
        ParseError::Syntax {
            offset,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn enter(&mut self) -> Result<(), ParseError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(self.syntax(self.pos, "expression nested too deeply"));
        }
        Ok(())
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        self.enter()?;
        let mut lhs = self.term()?;
        while let Some(c @ (b'+' | b'-')) = self.peek() {
            let offset = self.pos;
            self.pos += 1;
            let rhs = self.term()?;
            let op = if c == b'+' { BinOp::Add } else { BinOp::Sub };
            lhs = Node {
                kind: NodeKind::Binary(op, Box::new(lhs), Box::new(rhs)),
                offset,
            };
        }
        self.depth -= 1;
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(c @ (b'*' | b'/')) = self.peek() {
            let offset = self.pos;
            self.pos += 1;
            let rhs = self.unary()?;
            let op = if c == b'*' { BinOp::Mul } else { BinOp::Div };
            lhs = Node {
                kind: NodeKind::Binary(op, Box::new(lhs), Box::new(rhs)),
                offset,
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node, ParseError> {
        if self.peek() == Some(b'-') {
            let offset = self.pos;
            self.pos += 1;
            self.enter()?;
            let inner = self.unary()?;
            self.depth -= 1;
            return Ok(Node {
                kind: NodeKind::Neg(Box::new(inner)),
                offset,
            });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.primary()?;
        if self.peek() == Some(b'^') {
            let offset = self.pos;
            self.pos += 1;
            self.enter()?;
            let exponent = self.unary()?;
            self.depth -= 1;
            return Ok(Node {
                kind: NodeKind::Binary(BinOp::Pow, Box::new(base), Box::new(exponent)),
                offset,
            });
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Node, ParseError> {
        let start = match self.peek() {
            None => return Err(self.syntax(self.pos, "unexpected end of input")),
            Some(_) => self.pos,
        };
        let c = self.src[start];
        if c == b'(' {
            self.pos += 1;
            let inner = self.expr()?;
            self.expect_close(start)?;
            return Ok(inner);
        }
        if c.is_ascii_digit() || c == b'.' {
            return self.number();
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let mut end = start;
            while end < self.src.len() && (self.src[end].is_ascii_alphanumeric() || self.src[end] == b'_') {
                end += 1;
            }
            // identifiers are ASCII by construction
            let name = std::str::from_utf8(&self.src[start..end]).unwrap_or_default();
            self.pos = end;
            return self.identifier(name, start);
        }
        Err(self.syntax(start, "expected a number, variable, function or `(`"))
    }

    fn expect_close(&mut self, open: usize) -> Result<(), ParseError> {
        if self.peek() == Some(b')') {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.syntax(self.pos, &format!("unclosed `(` opened at byte {open}")))
        }
    }

    fn identifier(&mut self, name: &str, offset: usize) -> Result<Node, ParseError> {
        if name == "pi" {
            return Ok(Node {
                kind: NodeKind::Pi,
                offset,
            });
        }
        if let Some(func) = Func::from_name(name) {
            if self.peek() != Some(b'(') {
                return Err(self.syntax(self.pos, &format!("expected `(` after `{name}`")));
            }
            let open = self.pos;
            self.pos += 1;
            let arg = self.expr()?;
            self.expect_close(open)?;
            return Ok(Node {
                kind: NodeKind::Call(func, Box::new(arg)),
                offset,
            });
        }
        let bytes = name.as_bytes();
        if bytes.len() >= 2 && (bytes[0] == b'y' || bytes[0] == b'x') && bytes[1..].iter().all(u8::is_ascii_digit) {
            let index: usize = name[1..].parse().unwrap_or(usize::MAX);
            if index == 0 || index > self.dim {
                return Err(ParseError::VariableOutOfRange {
                    offset,
                    name: name.to_string(),
                    dim: self.dim,
                });
            }
            let var = if bytes[0] == b'y' { Var::Y(index) } else { Var::X(index) };
            return Ok(Node {
                kind: NodeKind::Var(var),
                offset,
            });
        }
        Err(ParseError::UnknownIdentifier {
            offset,
            name: name.to_string(),
        })
    }

    fn number(&mut self) -> Result<Node, ParseError> {
        let start = self.pos;
        let s = self.src;
        let mut end = start;
        let digits = |end: &mut usize| {
            let from = *end;
            while *end < s.len() && s[*end].is_ascii_digit() {
                *end += 1;
            }
            *end - from
        };
        let mut count = digits(&mut end);
        if end < s.len() && s[end] == b'.' {
            end += 1;
            count += digits(&mut end);
        }
        if count == 0 {
            return Err(self.syntax(start, "malformed number"));
        }
        if end < s.len() && (s[end] == b'e' || s[end] == b'E') {
            let mut exp_end = end + 1;
            if exp_end < s.len() && (s[exp_end] == b'+' || s[exp_end] == b'-') {
                exp_end += 1;
            }
            if digits(&mut exp_end) == 0 {
                return Err(self.syntax(end, "malformed exponent"));
            }
            end = exp_end;
        }
        let text = std::str::from_utf8(&s[start..end]).unwrap_or_default();
        let value: f64 = text
            .parse()
            .map_err(|_| self.syntax(start, "malformed number"))?;
        if !value.is_finite() {
            return Err(self.syntax(start, "number out of range"));
        }
        self.pos = end;
        Ok(Node {
            kind: NodeKind::Const(value),
            offset: start,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SampleError {
    #[error("expression has dimension {expr}, grid has dimension {grid}")]
    Dimension { expr: usize, grid: usize },
    #[error("torus fields may only use y-variables")]
    PhysicalVariable,
    #[error("at node {node}: {source}")]
    Eval { node: usize, source: EvalError },
}

/// Samples `expr` at every node of `grid`.
pub fn sample_scalar(expr: &Expression, grid: &TorusGrid) -> Result<ScalarField, SampleError> {
    if expr.dim() != grid.dim() {
        return Err(SampleError::Dimension {
            expr: expr.dim(),
            grid: grid.dim(),
        });
    }
    if expr.uses_x() {
        return Err(SampleError::PhysicalVariable);
    }
    let values = (0..grid.len())
        .map(|node| {
            expr.evaluate(&grid.point(node))
                .map_err(|source| SampleError::Eval { node, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ScalarField::from_values(*grid, values).expect("one value per node"))
}
