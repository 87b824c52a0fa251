//! Scalar arithmetic expressions for user-supplied vector fields, Lyapunov
//! functions and class-K envelopes.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?
//! primary := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! `^` is right-associative and binds tighter than unary minus, so `-a^2`
//! is `-(a^2)` and `a^b^c` is `a^(b^c)`.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("unknown function `{name}` at byte {offset}")]
    UnknownFunction { name: String, offset: usize },
    #[error("function `{name}` takes {expected} argument(s), got {found}")]
    Arity {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("variable `{0}` is not bound")]
    Unbound(String),
    #[error("expected {expected} variable values, got {found}")]
    BindingCount { expected: usize, found: usize },
    #[error("non-finite intermediate value")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sqrt,
    Exp,
    Log,
    Abs,
    Min,
    Max,
    Sin,
    Cos,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sqrt" => Func::Sqrt,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sqrt => "sqrt",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::Sin => "sin",
            Func::Cos => "cos",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

/// Expression tree. Variables are stored as indices into the variable list
/// the expression was parsed against.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var(usize),
    Neg(Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

impl Node {
    pub fn eval(&self, vars: &[f64]) -> Result<f64, ExprError> {
        let v = match self {
            Node::Const(c) => *c,
            Node::Var(i) => vars[*i],
            Node::Neg(e) => -e.eval(vars)?,
            Node::Binary(op, l, r) => {
                let a = l.eval(vars)?;
                let b = r.eval(vars)?;
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(ExprError::DivisionByZero);
                        }
                        a / b
                    }
                    BinOp::Pow => power(a, b)?,
                }
            }
            Node::Call(f, args) => {
                let a = args[0].eval(vars)?;
                match f {
                    Func::Sqrt => {
                        if a < 0.0 {
                            return Err(ExprError::Domain(format!("sqrt of negative value {a}")));
                        }
                        a.sqrt()
                    }
                    Func::Exp => a.exp(),
                    Func::Log => {
                        if a <= 0.0 {
                            return Err(ExprError::Domain(format!("log of nonpositive value {a}")));
                        }
                        a.ln()
                    }
                    Func::Abs => a.abs(),
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Min => a.min(args[1].eval(vars)?),
                    Func::Max => a.max(args[1].eval(vars)?),
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ExprError::NonFinite)
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Node::Const(c) if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) => 3,
            Node::Const(_) | Node::Var(_) | Node::Call(..) => 5,
            Node::Neg(_) => 3,
            Node::Binary(BinOp::Add | BinOp::Sub, ..) => 1,
            Node::Binary(BinOp::Mul | BinOp::Div, ..) => 2,
            Node::Binary(BinOp::Pow, ..) => 4,
        }
    }

    fn write(&self, f: &mut fmt::Formatter<'_>, names: &[String], min_prec: u8) -> fmt::Result {
        let paren = self.precedence() < min_prec;
        if paren {
            f.write_str("(")?;
        }
        match self {
            Node::Const(c) => write!(f, "{c:?}")?,
            Node::Var(i) => f.write_str(&names[*i])?,
            Node::Neg(e) => {
                f.write_str("-")?;
                e.write(f, names, 3)?;
            }
            Node::Binary(op, l, r) => {
                let (sym, lp, rp) = match op {
                    BinOp::Add => ("+", 1, 2),
                    BinOp::Sub => ("-", 1, 2),
                    BinOp::Mul => ("*", 2, 3),
                    BinOp::Div => ("/", 2, 3),
                    BinOp::Pow => ("^", 5, 3),
                };
                l.write(f, names, lp)?;
                f.write_str(sym)?;
                r.write(f, names, rp)?;
            }
            Node::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    a.write(f, names, 0)?;
                }
                f.write_str(")")?;
            }
        }
        if paren {
            f.write_str(")")?;
        }
        Ok(())
    }
}

fn power(base: f64, exp: f64) -> Result<f64, ExprError> {
    if exp.fract() == 0.0 && exp.abs() <= 64.0 {
        let n = exp.abs() as u32;
        let mut acc = 1.0;
        let mut b = base;
        let mut k = n;
        while k > 0 {
            if k & 1 == 1 {
                acc *= b;
            }
            b *= b;
            k >>= 1;
        }
        if exp < 0.0 {
            if acc == 0.0 {
                return Err(ExprError::DivisionByZero);
            }
            acc = 1.0 / acc;
        }
        return Ok(acc);
    }
    if base > 0.0 {
        Ok((exp * base.ln()).exp())
    } else if base == 0.0 && exp > 0.0 {
        Ok(0.0)
    } else {
        Err(ExprError::Domain(format!("{base} raised to non-integer power {exp}")))
    }
}

/// A parsed expression together with the variable names it was parsed against.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    root: Node,
    vars: Vec<String>,
    source: String,
}

impl Expression {
    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn vars(&self) -> &[String] {
        &self.vars
    }

    /// The text this expression was parsed from.
    pub fn source(&self) -> &str {
        &self.source
    }

    /// Builds an expression directly from a tree.
    pub fn from_node(root: Node, vars: Vec<String>) -> Expression {
        let mut e = Expression {
            root,
            vars,
            source: String::new(),
        };
        e.source = e.to_string();
        e
    }

    /// Evaluates with positional bindings in the order of [`Expression::vars`].
    pub fn eval(&self, values: &[f64]) -> Result<f64, ExprError> {
        if values.len() != self.vars.len() {
            return Err(ExprError::BindingCount {
                expected: self.vars.len(),
                found: values.len(),
            });
        }
        self.root.eval(values)
    }

    pub fn eval_env(&self, env: &HashMap<&str, f64>) -> Result<f64, ExprError> {
        let values = self
            .vars
            .iter()
            .map(|v| {
                env.get(v.as_str())
                    .copied()
                    .ok_or_else(|| ExprError::Unbound(v.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.root.eval(&values)
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.write(f, &self.vars, 0)
    }
}

/// Parses `source` against the declared variable names.
pub fn parse<S: AsRef<str>>(source: &str, vars: &[S]) -> Result<Expression, ExprError> {
    let vars: Vec<String> = vars.iter().map(|v| v.as_ref().to_string()).collect();
    let mut p = Parser {
        src: source.as_bytes(),
        pos: 0,
        vars: &vars,
        depth: 0,
    };
    p.skip_ws();
    if p.pos == p.src.len() {
        return Err(p.error("empty expression"));
    }
    let root = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(Expression {
        root,
        vars,
        source: source.to_string(),
    })
}

const MAX_DEPTH: usize = 256;

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    vars: &'a [String],
    depth: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> ExprError {
        ExprError::Syntax {
            offset: self.pos,
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

    fn enter(&mut self) -> Result<(), ExprError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(self.error("expression nested too deeply"));
        }
        Ok(())
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        self.enter()?;
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinOp::Add,
                Some(b'-') => BinOp::Sub,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        self.depth -= 1;
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => BinOp::Mul,
                Some(b'/') => BinOp::Div,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            self.enter()?;
            let inner = self.unary()?;
            self.depth -= 1;
            return Ok(Node::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.primary()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            self.enter()?;
            let exp = self.unary()?;
            self.depth -= 1;
            return Ok(Node::Binary(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Node, ExprError> {
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.error("expected `)`"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.identifier(),
            Some(_) => Err(self.error("unexpected character")),
        }
    }

    fn number(&mut self) -> Result<Node, ExprError> {
        let start = self.pos;
        let s = self.src;
        let mut i = self.pos;
        while i < s.len() && s[i].is_ascii_digit() {
            i += 1;
        }
        if i < s.len() && s[i] == b'.' {
            i += 1;
            while i < s.len() && s[i].is_ascii_digit() {
                i += 1;
            }
        }
        if i < s.len() && (s[i] == b'e' || s[i] == b'E') {
            let mut j = i + 1;
            if j < s.len() && (s[j] == b'+' || s[j] == b'-') {
                j += 1;
            }
            if j < s.len() && s[j].is_ascii_digit() {
                while j < s.len() && s[j].is_ascii_digit() {
                    j += 1;
                }
                i = j;
            }
        }
        // The slice is ASCII by construction.
        let text = std::str::from_utf8(&s[start..i]).unwrap_or("");
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => {
                self.pos = i;
                Ok(Node::Const(v))
            }
            _ => Err(self.error("malformed number")),
        }
    }

    fn identifier(&mut self) -> Result<Node, ExprError> {
        let start = self.pos;
        let mut i = self.pos;
        while i < self.src.len() && (self.src[i].is_ascii_alphanumeric() || self.src[i] == b'_') {
            i += 1;
        }
        let name = std::str::from_utf8(&self.src[start..i]).unwrap_or("").to_string();
        self.pos = i;
        if self.peek() == Some(b'(') {
            let func = Func::from_name(&name).ok_or(ExprError::UnknownFunction {
                name: name.clone(),
                offset: start,
            })?;
            self.pos += 1;
            let mut args = Vec::new();
            if self.peek() != Some(b')') {
                loop {
                    args.push(self.expr()?);
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b')') => break,
                        _ => return Err(self.error("expected `,` or `)`")),
                    }
                }
            }
            self.pos += 1;
            if args.len() != func.arity() {
                return Err(ExprError::Arity {
                    name,
                    expected: func.arity(),
                    found: args.len(),
                });
            }
            return Ok(Node::Call(func, args));
        }
        match self.vars.iter().position(|v| *v == name) {
            Some(idx) => Ok(Node::Var(idx)),
            None => Err(ExprError::UnknownIdentifier { name, offset: start }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(v: f64) -> Box<Node> {
        Box::new(Node::Const(v))
    }

    #[test]
    fn water_tank_off_field_shape() {
        let e = parse("-0.2*sqrt(x1)", &["x1"]).unwrap();
        let expected = Node::Binary(
            BinOp::Mul,
            Box::new(Node::Neg(c(0.2))),
            Box::new(Node::Call(Func::Sqrt, vec![Node::Var(0)])),
        );
        assert_eq!(e.root(), &expected);
        assert_eq!(e.eval(&[4.0]).unwrap(), -0.4);
    }

    #[test]
    fn water_tank_on_field_shape() {
        let e = parse("0.1*(11-x1)", &["x1"]).unwrap();
        let expected = Node::Binary(
            BinOp::Mul,
            c(0.1),
            Box::new(Node::Binary(BinOp::Sub, c(11.0), Box::new(Node::Var(0)))),
        );
        assert_eq!(e.root(), &expected);
    }

    #[test]
    fn unary_plus_is_a_syntax_error() {
        let err = parse::<&str>("2*+3", &[]).unwrap_err();
        assert!(matches!(err, ExprError::Syntax { offset: 2, .. }), "{err:?}");
    }

    #[test]
    fn lyapunov_off_expression_value() {
        let e = parse("abs(exp(sqrt(x1))-exp(sqrt(x2)))", &["x1", "x2"]).unwrap();
        let v = e.eval(&[4.0, 1.0]).unwrap();
        let expected = 2f64.exp() - 1f64.exp();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 4.670774).abs() < 1e-6);
    }

    #[test]
    fn domain_errors_are_reported() {
        let e = parse("sqrt(x1)", &["x1"]).unwrap();
        assert!(matches!(e.eval(&[-1.0]), Err(ExprError::Domain(_))));
        let e = parse("log(x1)", &["x1"]).unwrap();
        assert!(matches!(e.eval(&[0.0]), Err(ExprError::Domain(_))));
        let e = parse("1/x1", &["x1"]).unwrap();
        assert_eq!(e.eval(&[0.0]), Err(ExprError::DivisionByZero));
    }

    #[test]
    fn precedence_and_associativity() {
        let v = |s: &str| parse::<&str>(s, &[]).unwrap().eval(&[]).unwrap();
        assert_eq!(v("-2^2"), -4.0);
        assert_eq!(v("2^3^2"), 512.0);
        assert_eq!(v("2^-1"), 0.5);
        assert_eq!(v("1-2-3"), -4.0);
        assert_eq!(v("8/4/2"), 1.0);
        assert_eq!(v("2+3*4"), 14.0);
        assert_eq!(v(" ( 2 + 3 ) * 4 "), 20.0);
        assert_eq!(v("max(1, min(5, 3))"), 3.0);
        assert_eq!(v("--3"), 3.0);
        assert!((v("2^0.5") - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn identifier_and_arity_errors() {
        assert!(matches!(
            parse("y + 1", &["x1"]),
            Err(ExprError::UnknownIdentifier { offset: 0, .. })
        ));
        assert!(matches!(
            parse("tan(x1)", &["x1"]),
            Err(ExprError::UnknownFunction { .. })
        ));
        assert!(matches!(
            parse("min(x1)", &["x1"]),
            Err(ExprError::Arity {
                expected: 2,
                found: 1,
                ..
            })
        ));
        assert!(matches!(parse::<&str>("", &[]), Err(ExprError::Syntax { .. })));
        assert!(matches!(parse::<&str>("1e999", &[]), Err(ExprError::Syntax { .. })));
        assert!(matches!(parse::<&str>("(1", &[]), Err(ExprError::Syntax { .. })));
    }

    #[test]
    fn env_evaluation() {
        let e = parse("x1*s", &["x1", "s"]).unwrap();
        let env = HashMap::from([("x1", 2.0), ("s", 3.0)]);
        assert_eq!(e.eval_env(&env).unwrap(), 6.0);
        let partial = HashMap::from([("x1", 2.0)]);
        assert_eq!(e.eval_env(&partial), Err(ExprError::Unbound("s".into())));
    }

    #[test]
    fn deep_nesting_is_rejected_not_overflowed() {
        let src = "(".repeat(10_000) + "1" + &")".repeat(10_000);
        assert!(parse::<&str>(&src, &[]).is_err());
        let src = "-".repeat(10_000) + "1";
        assert!(parse::<&str>(&src, &[]).is_err());
    }

    #[test]
    fn printing_round_trips() {
        for src in [
            "-0.2*sqrt(x1)",
            "0.1*(11-x1)",
            "x1-(x2-3)",
            "(x1^x2)^2",
            "-(x1*x2)",
            "x1/(x2*3)",
        ] {
            let e = parse(src, &["x1", "x2"]).unwrap();
            let printed = e.to_string();
            let again = parse(&printed, &["x1", "x2"]).unwrap();
            assert_eq!(again.root(), e.root(), "{src} -> {printed}");
            assert_eq!(again.to_string(), printed);
        }
    }
}
