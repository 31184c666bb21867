//! A small expression grammar for user-supplied scalar potentials.
//!
//! Grammar (whitespace is insignificant):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?                  (right-associative)
//! atom   := number | ident | ident '(' expr ')' | '(' expr ')'
//! number := digits ('.' digits)? (('e' | 'E') ('+' | '-')? digits)?
//! ```
//!
//! The function names `sin`, `cos`, `exp`, `ln` and `sqrt` are reserved;
//! any other identifier is a free variable bound at evaluation time.
//! Differentiation is exact on the tree, and pretty-printing inverts
//! parsing: `parse(pretty(e))` rebuilds `e` node for node.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Named scalar functions available in the grammar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FunKind {
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
}

impl FunKind {
    fn name(self) -> &'static str {
        match self {
            FunKind::Sin => "sin",
            FunKind::Cos => "cos",
            FunKind::Exp => "exp",
            FunKind::Ln => "ln",
            FunKind::Sqrt => "sqrt",
        }
    }

    fn from_name(name: &str) -> Option<FunKind> {
        Some(match name {
            "sin" => FunKind::Sin,
            "cos" => FunKind::Cos,
            "exp" => FunKind::Exp,
            "ln" => FunKind::Ln,
            "sqrt" => FunKind::Sqrt,
            _ => return None,
        })
    }
}

/// Expression tree node. Numeric literals are always non-negative; a
/// leading sign is represented by [`Node::Neg`], exactly as the parser
/// produces it, so printing and re-parsing preserve structure.
#[derive(Clone, Debug, PartialEq)]
enum Node {
    Num(f64),
    Var(String),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Neg(Box<Node>),
    Fun(FunKind, Box<Node>),
}

/// A parsed scalar expression over named variables.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialExpr {
    root: Node,
}

/// Parse an expression; see the module docs for the grammar.
pub fn parse_potential(text: &str) -> Result<PotentialExpr> {
    PotentialExpr::parse(text)
}

impl PotentialExpr {
    /// Parse an expression; see the module docs for the grammar.
    pub fn parse(text: &str) -> Result<PotentialExpr> {
        let mut p = Parser {
            bytes: text.as_bytes(),
            pos: 0,
        };
        p.skip_ws();
        if p.pos == p.bytes.len() {
            return Err(Error::Parse {
                offset: p.pos,
                expected: "an expression".into(),
            });
        }
        let root = p.expr()?;
        p.skip_ws();
        if p.pos != p.bytes.len() {
            return Err(Error::Parse {
                offset: p.pos,
                expected: "end of input or an operator".into(),
            });
        }
        Ok(PotentialExpr { root })
    }

    /// Evaluate with the given variable bindings. Returns a domain error
    /// for `ln` of a non-positive value, `sqrt` of a negative value,
    /// division by zero, or a power with a base outside the exponent's
    /// domain; unbound variables are invalid-argument errors.
    pub fn eval<S: Scalar>(&self, bindings: &[(&str, S)]) -> Result<S> {
        self.root.eval(bindings)
    }

    /// Evaluate, mapping every error to NaN. Lagrangian evaluation is
    /// infallible by contract; configuration guards reject undefined
    /// regions with typed errors before integration reaches them, and
    /// NaN propagation makes any remaining excursion fail loudly.
    pub fn eval_or_nan<S: Scalar>(&self, bindings: &[(&str, S)]) -> S {
        self.root
            .eval(bindings)
            .unwrap_or_else(|_| S::from_f64(f64::NAN))
    }

    /// Exact derivative with respect to `var`, as a new expression.
    pub fn derivative(&self, var: &str) -> PotentialExpr {
        PotentialExpr {
            root: self.root.derivative(var),
        }
    }

    /// The set of free variables.
    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.root.collect_vars(&mut out);
        out
    }

    /// Render to text that re-parses to the identical tree.
    pub fn pretty(&self) -> String {
        let mut out = String::new();
        self.root.fmt_prec(1, &mut out);
        out
    }
}

// ---------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    /// Consume `c` if it is next (after whitespace).
    fn eat(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Node::Add(lhs.into(), self.term()?.into());
            } else if self.eat(b'-') {
                lhs = Node::Sub(lhs.into(), self.term()?.into());
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Node::Mul(lhs.into(), self.unary()?.into());
            } else if self.eat(b'/') {
                lhs = Node::Div(lhs.into(), self.unary()?.into());
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat(b'-') {
            Ok(Node::Neg(self.unary()?.into()))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.eat(b'^') {
            // Right-associative; the exponent slot admits a leading sign.
            Ok(Node::Pow(base.into(), self.unary()?.into()))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Node> {
        self.skip_ws();
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if !self.eat(b')') {
                    return Err(Error::Parse {
                        offset: self.pos,
                        expected: "')'".into(),
                    });
                }
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self
                    .peek()
                    .is_some_and(|c| c.is_ascii_alphanumeric() || c == b'_')
                {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.bytes[start..self.pos])
                    .expect("identifier bytes are ASCII")
                    .to_owned();
                if self.eat(b'(') {
                    let Some(kind) = FunKind::from_name(&name) else {
                        return Err(Error::Parse {
                            offset: start,
                            expected: "a known function (sin, cos, exp, ln, sqrt)".into(),
                        });
                    };
                    let arg = self.expr()?;
                    if !self.eat(b')') {
                        return Err(Error::Parse {
                            offset: self.pos,
                            expected: "')'".into(),
                        });
                    }
                    Ok(Node::Fun(kind, arg.into()))
                } else {
                    Ok(Node::Var(name))
                }
            }
            _ => Err(Error::Parse {
                offset: self.pos,
                expected: "a number, an identifier, '(' or '-'".into(),
            }),
        }
    }

    fn number(&mut self) -> Result<Node> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.peek() == Some(b'.') {
            self.pos += 1;
            if !self.peek().is_some_and(|c| c.is_ascii_digit()) {
                return Err(Error::Parse {
                    offset: self.pos,
                    expected: "a digit after the decimal point".into(),
                });
            }
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1;
            }
        }
        if matches!(self.peek(), Some(b'e' | b'E')) {
            // Only commit to an exponent when digits follow; otherwise the
            // 'e' starts an identifier (e.g. "2e" is "2 * e"? no -- it is a
            // parse error downstream, but "2exp(x)" must not eat the 'e').
            let save = self.pos;
            self.pos += 1;
            if matches!(self.peek(), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if self.peek().is_some_and(|c| c.is_ascii_digit()) {
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
            } else {
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("number bytes are ASCII");
        let value: f64 = text.parse().map_err(|_| Error::Parse {
            offset: start,
            expected: "a valid number".into(),
        })?;
        Ok(Node::Num(value))
    }
}

// ---------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------

/// Exponents with magnitude at most this and integral value use repeated
/// multiplication, which is defined for any base (negative included).
const MAX_POWI: f64 = 64.0;

impl Node {
    fn eval<S: Scalar>(&self, bind: &[(&str, S)]) -> Result<S> {
        match self {
            Node::Num(c) => Ok(S::from_f64(*c)),
            Node::Var(name) => bind
                .iter()
                .find(|(n, _)| *n == name)
                .map(|&(_, v)| v)
                .ok_or_else(|| Error::Invalid(format!("unbound variable `{name}`"))),
            Node::Add(a, b) => Ok(a.eval(bind)? + b.eval(bind)?),
            Node::Sub(a, b) => Ok(a.eval(bind)? - b.eval(bind)?),
            Node::Mul(a, b) => Ok(a.eval(bind)? * b.eval(bind)?),
            Node::Div(a, b) => {
                let den = b.eval(bind)?;
                if den.value() == 0.0 {
                    return Err(Error::Domain {
                        what: "division by zero".into(),
                    });
                }
                Ok(a.eval(bind)? / den)
            }
            Node::Pow(f, g) => {
                let base = f.eval(bind)?;
                if let Some(c) = const_value(g) {
                    if c.fract() == 0.0 && c.abs() <= MAX_POWI {
                        if c < 0.0 && base.value() == 0.0 {
                            return Err(Error::Domain {
                                what: "zero base with a negative exponent".into(),
                            });
                        }
                        return Ok(base.powi(c as i32));
                    }
                }
                let expo = g.eval(bind)?;
                if base.value() <= 0.0 {
                    return Err(Error::Domain {
                        what: format!(
                            "power with non-positive base {} and non-integral exponent",
                            base.value()
                        ),
                    });
                }
                Ok(base.powf(expo))
            }
            Node::Neg(a) => Ok(-a.eval(bind)?),
            Node::Fun(kind, a) => {
                let x = a.eval(bind)?;
                match kind {
                    FunKind::Sin => Ok(x.sin()),
                    FunKind::Cos => Ok(x.cos()),
                    FunKind::Exp => Ok(x.exp()),
                    FunKind::Ln => {
                        if x.value() <= 0.0 {
                            Err(Error::Domain {
                                what: format!("ln of non-positive value {}", x.value()),
                            })
                        } else {
                            Ok(x.ln())
                        }
                    }
                    FunKind::Sqrt => {
                        if x.value() < 0.0 {
                            Err(Error::Domain {
                                what: format!("sqrt of negative value {}", x.value()),
                            })
                        } else {
                            Ok(x.sqrt())
                        }
                    }
                }
            }
        }
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Node::Num(_) => {}
            Node::Var(name) => {
                out.insert(name.clone());
            }
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b)
            | Node::Pow(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Node::Neg(a) | Node::Fun(_, a) => a.collect_vars(out),
        }
    }
}

/// The numeric value of a constant subtree (`Num` under any number of
/// leading signs), if it is one.
fn const_value(n: &Node) -> Option<f64> {
    match n {
        Node::Num(c) => Some(*c),
        Node::Neg(inner) => const_value(inner).map(|c| -c),
        _ => None,
    }
}

// ---------------------------------------------------------------------
// Differentiation (with light simplification)
// ---------------------------------------------------------------------

/// Literal node for a possibly-negative constant: negatives are wrapped
/// in `Neg` so literals stay non-negative.
fn const_node(c: f64) -> Node {
    if c < 0.0 {
        Node::Neg(Box::new(Node::Num(-c)))
    } else {
        Node::Num(c)
    }
}

fn is_zero(n: &Node) -> bool {
    matches!(n, Node::Num(c) if *c == 0.0)
}

fn is_one(n: &Node) -> bool {
    matches!(n, Node::Num(c) if *c == 1.0)
}

fn add(a: Node, b: Node) -> Node {
    if is_zero(&a) {
        return b;
    }
    if is_zero(&b) {
        return a;
    }
    if let (Node::Num(x), Node::Num(y)) = (&a, &b) {
        let s = x + y;
        if s.is_finite() {
            return Node::Num(s);
        }
    }
    Node::Add(a.into(), b.into())
}

fn sub(a: Node, b: Node) -> Node {
    if is_zero(&b) {
        return a;
    }
    if is_zero(&a) {
        return neg(b);
    }
    if let (Node::Num(x), Node::Num(y)) = (&a, &b) {
        let d = x - y;
        if d.is_finite() {
            return const_node(d);
        }
    }
    Node::Sub(a.into(), b.into())
}

fn mul(a: Node, b: Node) -> Node {
    if is_zero(&a) || is_zero(&b) {
        return Node::Num(0.0);
    }
    if is_one(&a) {
        return b;
    }
    if is_one(&b) {
        return a;
    }
    if let (Node::Num(x), Node::Num(y)) = (&a, &b) {
        let p = x * y;
        if p.is_finite() {
            return Node::Num(p);
        }
    }
    Node::Mul(a.into(), b.into())
}

fn div(a: Node, b: Node) -> Node {
    if is_zero(&a) {
        return Node::Num(0.0);
    }
    if is_one(&b) {
        return a;
    }
    Node::Div(a.into(), b.into())
}

fn neg(a: Node) -> Node {
    match a {
        Node::Num(c) if c == 0.0 => Node::Num(0.0),
        Node::Neg(inner) => *inner,
        other => Node::Neg(other.into()),
    }
}

fn powc(f: Node, c: f64) -> Node {
    if c == 1.0 {
        return f;
    }
    if c == 0.0 {
        return Node::Num(1.0);
    }
    Node::Pow(f.into(), const_node(c).into())
}

impl Node {
    fn derivative(&self, var: &str) -> Node {
        match self {
            Node::Num(_) => Node::Num(0.0),
            Node::Var(name) => {
                if name == var {
                    Node::Num(1.0)
                } else {
                    Node::Num(0.0)
                }
            }
            Node::Add(a, b) => add(a.derivative(var), b.derivative(var)),
            Node::Sub(a, b) => sub(a.derivative(var), b.derivative(var)),
            Node::Mul(a, b) => add(
                mul(a.derivative(var), (**b).clone()),
                mul((**a).clone(), b.derivative(var)),
            ),
            Node::Div(a, b) => div(
                sub(
                    mul(a.derivative(var), (**b).clone()),
                    mul((**a).clone(), b.derivative(var)),
                ),
                powc((**b).clone(), 2.0),
            ),
            Node::Pow(f, g) => {
                if let Some(c) = const_value(g) {
                    // d(f^c) = c f^(c-1) f'
                    mul(
                        mul(const_node(c), powc((**f).clone(), c - 1.0)),
                        f.derivative(var),
                    )
                } else {
                    // d(f^g) = f^g (g' ln f + g f'/f)
                    mul(
                        self.clone(),
                        add(
                            mul(g.derivative(var), Node::Fun(FunKind::Ln, f.clone())),
                            mul((**g).clone(), div(f.derivative(var), (**f).clone())),
                        ),
                    )
                }
            }
            Node::Neg(a) => neg(a.derivative(var)),
            Node::Fun(kind, a) => {
                let da = a.derivative(var);
                match kind {
                    FunKind::Sin => mul(Node::Fun(FunKind::Cos, a.clone()), da),
                    FunKind::Cos => neg(mul(Node::Fun(FunKind::Sin, a.clone()), da)),
                    FunKind::Exp => mul(Node::Fun(FunKind::Exp, a.clone()), da),
                    FunKind::Ln => div(da, (**a).clone()),
                    FunKind::Sqrt => div(
                        da,
                        mul(Node::Num(2.0), Node::Fun(FunKind::Sqrt, a.clone())),
                    ),
                }
            }
        }
    }
}

// ---------------------------------------------------------------------
// Printing
// ---------------------------------------------------------------------

impl Node {
    /// Binding strength; parentheses are inserted when a child's strength
    /// falls below what its grammatical slot requires.
    fn prec(&self) -> u8 {
        match self {
            Node::Add(..) | Node::Sub(..) => 1,
            Node::Mul(..) | Node::Div(..) => 2,
            Node::Neg(..) => 3,
            Node::Pow(..) => 4,
            Node::Num(_) | Node::Var(_) | Node::Fun(..) => 5,
        }
    }

    fn fmt_prec(&self, min: u8, out: &mut String) {
        let parens = self.prec() < min;
        if parens {
            out.push('(');
        }
        match self {
            Node::Num(c) => {
                let _ = write!(out, "{c}");
            }
            Node::Var(name) => out.push_str(name),
            Node::Add(a, b) => {
                a.fmt_prec(1, out);
                out.push('+');
                b.fmt_prec(2, out);
            }
            Node::Sub(a, b) => {
                a.fmt_prec(1, out);
                out.push('-');
                b.fmt_prec(2, out);
            }
            Node::Mul(a, b) => {
                a.fmt_prec(2, out);
                out.push('*');
                b.fmt_prec(3, out);
            }
            Node::Div(a, b) => {
                a.fmt_prec(2, out);
                out.push('/');
                b.fmt_prec(3, out);
            }
            Node::Pow(a, b) => {
                // Left child must be an atom ("(x^2)^3", "(-x)^2"); the
                // right child sits in the grammar's unary slot ("x^-1").
                a.fmt_prec(5, out);
                out.push('^');
                b.fmt_prec(3, out);
            }
            Node::Neg(a) => {
                out.push('-');
                a.fmt_prec(3, out);
            }
            Node::Fun(kind, a) => {
                out.push_str(kind.name());
                out.push('(');
                a.fmt_prec(1, out);
                out.push(')');
            }
        }
        if parens {
            out.push(')');
        }
    }
}
