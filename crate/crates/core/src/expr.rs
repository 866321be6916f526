//! Rate expressions: a small arithmetic language over the variables
//! `z` (weighted total population), `a` (age) and `x` (position).
//!
//! Grammar, lowest precedence first:
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := ('-' | '+') unary | power
//! power   := primary ('^' unary)?
//! primary := number | var | 'pi' | 'param:'name | func '(' args ')' | '(' expr ')'
//! ```
//!
//! `^` is right associative. Named parameters (`param:b0`) are resolved
//! against a parameter table at parse time and become constants.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// Free variables of a rate expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    Z,
    A,
    X,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Max,
    Min,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "sqrt" => Func::Sqrt,
            "max" => Func::Max,
            "min" => Func::Min,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Sqrt => "sqrt",
            Func::Max => "max",
            Func::Min => "min",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Max | Func::Min => 2,
            _ => 1,
        }
    }
}

/// Abstract syntax tree of a rate expression.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("column {column}: {message}")]
pub struct ParseError {
    /// 1-based character column in the source.
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("{0} evaluated outside its domain")]
    Domain(&'static str),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("cannot differentiate `{construct}` in z; supply the derivative explicitly")]
pub struct DiffError {
    pub construct: String,
}

/// A parsed rate expression together with its source text.
#[derive(Debug, Clone, PartialEq)]
pub struct RateExpression {
    source: String,
    ast: Expr,
}

impl RateExpression {
    pub fn parse(source: &str) -> Result<Self, ParseError> {
        Self::parse_with_params(source, &BTreeMap::new())
    }

    pub fn parse_with_params(
        source: &str,
        params: &BTreeMap<String, f64>,
    ) -> Result<Self, ParseError> {
        let ast = parse_expr(source, params)?;
        Ok(RateExpression {
            source: source.to_string(),
            ast,
        })
    }

    pub fn constant(value: f64) -> Self {
        let ast = Expr::Const(value);
        RateExpression {
            source: ast.to_string(),
            ast,
        }
    }

    pub fn from_ast(ast: Expr) -> Self {
        RateExpression {
            source: ast.to_string(),
            ast,
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn ast(&self) -> &Expr {
        &self.ast
    }

    #[inline]
    pub fn eval(&self, z: f64, a: f64, x: f64) -> Result<f64, EvalError> {
        self.ast.eval(z, a, x)
    }

    pub fn depends_on(&self, var: Var) -> bool {
        self.ast.depends_on(var)
    }

    /// Symbolic partial derivative with respect to `z`.
    pub fn differentiate_in_z(&self) -> Result<RateExpression, DiffError> {
        Ok(RateExpression::from_ast(self.ast.diff_z()?))
    }
}

impl fmt::Display for RateExpression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.ast)
    }
}

pub fn parse_rate_expression(source: &str) -> Result<RateExpression, ParseError> {
    RateExpression::parse(source)
}

pub fn differentiate_in_z(expr: &RateExpression) -> Result<RateExpression, DiffError> {
    expr.differentiate_in_z()
}

// ---------------------------------------------------------------------------
// Evaluation

impl Expr {
    pub fn eval(&self, z: f64, a: f64, x: f64) -> Result<f64, EvalError> {
        Ok(match self {
            Expr::Const(c) => *c,
            Expr::Var(Var::Z) => z,
            Expr::Var(Var::A) => a,
            Expr::Var(Var::X) => x,
            Expr::Neg(e) => -e.eval(z, a, x)?,
            Expr::Bin(op, l, r) => {
                let l = l.eval(z, a, x)?;
                let r = r.eval(z, a, x)?;
                match op {
                    BinOp::Add => l + r,
                    BinOp::Sub => l - r,
                    BinOp::Mul => l * r,
                    BinOp::Div => {
                        if r == 0.0 {
                            return Err(EvalError::DivisionByZero);
                        }
                        l / r
                    }
                    BinOp::Pow => {
                        let v = l.powf(r);
                        if v.is_nan() {
                            return Err(EvalError::Domain("^"));
                        }
                        v
                    }
                }
            }
            Expr::Call(func, args) => {
                let u = args[0].eval(z, a, x)?;
                match func {
                    Func::Exp => u.exp(),
                    Func::Log => {
                        if u <= 0.0 {
                            return Err(EvalError::Domain("log"));
                        }
                        u.ln()
                    }
                    Func::Sin => u.sin(),
                    Func::Cos => u.cos(),
                    Func::Sqrt => {
                        if u < 0.0 {
                            return Err(EvalError::Domain("sqrt"));
                        }
                        u.sqrt()
                    }
                    Func::Max => u.max(args[1].eval(z, a, x)?),
                    Func::Min => u.min(args[1].eval(z, a, x)?),
                }
            }
        })
    }

    pub fn depends_on(&self, var: Var) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(v) => *v == var,
            Expr::Neg(e) => e.depends_on(var),
            Expr::Bin(_, l, r) => l.depends_on(var) || r.depends_on(var),
            Expr::Call(_, args) => args.iter().any(|e| e.depends_on(var)),
        }
    }

    fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    fn diff_z(&self) -> Result<Expr, DiffError> {
        if !self.depends_on(Var::Z) {
            return Ok(Expr::Const(0.0));
        }
        Ok(match self {
            Expr::Var(_) => Expr::Const(1.0),
            Expr::Const(_) => unreachable!("constants do not depend on z"),
            Expr::Neg(e) => neg(e.diff_z()?),
            Expr::Bin(op, u, v) => {
                let du = u.diff_z()?;
                let dv = v.diff_z()?;
                let (u, v) = ((**u).clone(), (**v).clone());
                match op {
                    BinOp::Add => add(du, dv),
                    BinOp::Sub => sub(du, dv),
                    BinOp::Mul => add(mul(du, v), mul(u, dv)),
                    BinOp::Div => {
                        if !v.depends_on(Var::Z) {
                            div(du, v)
                        } else {
                            div(
                                sub(mul(du, v.clone()), mul(u, dv)),
                                pow(v, Expr::Const(2.0)),
                            )
                        }
                    }
                    BinOp::Pow => {
                        if !v.depends_on(Var::Z) {
                            // v * u^(v-1) * u'
                            let exponent = match v.as_const() {
                                Some(c) => Expr::Const(c - 1.0),
                                None => sub(v.clone(), Expr::Const(1.0)),
                            };
                            mul(mul(v, pow(u, exponent)), du)
                        } else if !u.depends_on(Var::Z) {
                            // u^v * log(u) * v'
                            mul(mul(pow(u.clone(), v), call(Func::Log, u)), dv)
                        } else {
                            // u^v * (v' log u + v u' / u)
                            mul(
                                pow(u.clone(), v.clone()),
                                add(
                                    mul(dv, call(Func::Log, u.clone())),
                                    div(mul(v, du), u),
                                ),
                            )
                        }
                    }
                }
            }
            Expr::Call(func, args) => match func {
                Func::Max | Func::Min => {
                    return Err(DiffError {
                        construct: func.name().to_string(),
                    })
                }
                Func::Exp => mul(self.clone(), args[0].diff_z()?),
                Func::Log => div(args[0].diff_z()?, args[0].clone()),
                Func::Sin => mul(call(Func::Cos, args[0].clone()), args[0].diff_z()?),
                Func::Cos => neg(mul(call(Func::Sin, args[0].clone()), args[0].diff_z()?)),
                Func::Sqrt => div(
                    args[0].diff_z()?,
                    mul(Expr::Const(2.0), self.clone()),
                ),
            },
        })
    }
}

// Constructors with constant folding of the trivial identities.

fn neg(e: Expr) -> Expr {
    match e {
        Expr::Const(c) => Expr::Const(-c),
        Expr::Neg(inner) => *inner,
        e => Expr::Neg(Box::new(e)),
    }
}

fn add(l: Expr, r: Expr) -> Expr {
    match (l.as_const(), r.as_const()) {
        (Some(a), Some(b)) => Expr::Const(a + b),
        (Some(0.0), _) => r,
        (_, Some(0.0)) => l,
        _ => Expr::Bin(BinOp::Add, Box::new(l), Box::new(r)),
    }
}

fn sub(l: Expr, r: Expr) -> Expr {
    match (l.as_const(), r.as_const()) {
        (Some(a), Some(b)) => Expr::Const(a - b),
        (Some(0.0), _) => neg(r),
        (_, Some(0.0)) => l,
        _ => Expr::Bin(BinOp::Sub, Box::new(l), Box::new(r)),
    }
}

fn mul(l: Expr, r: Expr) -> Expr {
    match (l.as_const(), r.as_const()) {
        (Some(a), Some(b)) => Expr::Const(a * b),
        (Some(0.0), _) | (_, Some(0.0)) => Expr::Const(0.0),
        (Some(1.0), _) => r,
        (_, Some(1.0)) => l,
        _ => Expr::Bin(BinOp::Mul, Box::new(l), Box::new(r)),
    }
}

fn div(l: Expr, r: Expr) -> Expr {
    match (l.as_const(), r.as_const()) {
        (Some(0.0), _) => Expr::Const(0.0),
        (_, Some(1.0)) => l,
        _ => Expr::Bin(BinOp::Div, Box::new(l), Box::new(r)),
    }
}

fn pow(l: Expr, r: Expr) -> Expr {
    match r.as_const() {
        Some(1.0) => l,
        Some(0.0) => Expr::Const(1.0),
        _ => Expr::Bin(BinOp::Pow, Box::new(l), Box::new(r)),
    }
}

fn call(func: Func, arg: Expr) -> Expr {
    Expr::Call(func, vec![arg])
}

// ---------------------------------------------------------------------------
// Printing

fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
        Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
        Expr::Neg(_) => 3,
        Expr::Bin(BinOp::Pow, ..) => 4,
        Expr::Const(c) if *c < 0.0 || c.is_sign_negative() => 3,
        _ => 5,
    }
}

fn write_const(f: &mut fmt::Formatter<'_>, c: f64) -> fmt::Result {
    if c.fract() == 0.0 && c.abs() < 1e15 {
        write!(f, "{}", c as i64)
    } else {
        write!(f, "{c:?}")
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &Expr, parens: bool) -> fmt::Result {
    if parens {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if c.is_sign_negative() && *c != 0.0 {
                    write!(f, "(")?;
                    write_const(f, *c)?;
                    write!(f, ")")
                } else {
                    write_const(f, c.abs())
                }
            }
            Expr::Var(Var::Z) => write!(f, "z"),
            Expr::Var(Var::A) => write!(f, "a"),
            Expr::Var(Var::X) => write!(f, "x"),
            Expr::Neg(e) => {
                write!(f, "-")?;
                write_child(f, e, precedence(e) < 3)
            }
            Expr::Bin(op, l, r) => {
                let p = precedence(self);
                let sym = match op {
                    BinOp::Add => " + ",
                    BinOp::Sub => " - ",
                    BinOp::Mul => " * ",
                    BinOp::Div => " / ",
                    BinOp::Pow => "^",
                };
                if *op == BinOp::Pow {
                    write_child(f, l, precedence(l) <= p)?;
                    write!(f, "{sym}")?;
                    write_child(f, r, precedence(r) < 3)
                } else {
                    write_child(f, l, precedence(l) < p)?;
                    write!(f, "{sym}")?;
                    write_child(f, r, precedence(r) <= p)
                }
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, arg) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{arg}")?;
                }
                write!(f, ")")
            }
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
    LParen,
    RParen,
    Comma,
}

fn tokenize(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut k = i + 1;
                if k < chars.len() && (chars[k] == '+' || chars[k] == '-') {
                    k += 1;
                }
                if k < chars.len() && chars[k].is_ascii_digit() {
                    while k < chars.len() && chars[k].is_ascii_digit() {
                        k += 1;
                    }
                    i = k;
                }
            }
            let text: String = chars[start..i].iter().collect();
            let value: f64 = text.parse().map_err(|_| ParseError {
                column: col,
                message: format!("malformed number `{text}`"),
            })?;
            if !value.is_finite() {
                return Err(ParseError {
                    column: col,
                    message: format!("number `{text}` is not finite"),
                });
            }
            out.push((Tok::Num(value), col));
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len()
                && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == ':')
            {
                i += 1;
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), col));
            continue;
        }
        let tok = match c {
            '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            ',' => Tok::Comma,
            _ => {
                return Err(ParseError {
                    column: col,
                    message: format!("unexpected character `{c}`"),
                })
            }
        };
        out.push((tok, col));
        i += 1;
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end_col: usize,
    params: &'a BTreeMap<String, f64>,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn col(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end_col, |(_, c)| *c)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(t, _)| t.clone());
        self.pos += 1;
        t
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            column: self.col(),
            message: message.into(),
        })
    }

    /// Error for a missing operand: points at the dangling operator.
    fn missing_operand<T>(&self) -> Result<T, ParseError> {
        let column = if self.pos > 0 && self.pos >= self.toks.len() {
            self.toks[self.pos - 1].1
        } else {
            self.col()
        };
        Err(ParseError {
            column,
            message: "expected an operand".into(),
        })
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek() {
            let op = if *c == '+' { BinOp::Add } else { BinOp::Sub };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek() {
            let op = if *c == '*' { BinOp::Mul } else { BinOp::Div };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Some(Tok::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let col = self.col();
        match self.next() {
            None => self.missing_operand_at_end(),
            Some(Tok::Num(v)) => Ok(Expr::Const(v)),
            Some(Tok::LParen) => {
                let inner = self.expr()?;
                match self.next() {
                    Some(Tok::RParen) => Ok(inner),
                    _ => Err(ParseError {
                        column: col,
                        message: "unbalanced parenthesis".into(),
                    }),
                }
            }
            Some(Tok::Ident(name)) => self.ident(name, col),
            Some(Tok::RParen) => Err(ParseError {
                column: col,
                message: "unexpected `)`".into(),
            }),
            Some(Tok::Comma) => Err(ParseError {
                column: col,
                message: "unexpected `,`".into(),
            }),
            Some(Tok::Op(c)) => Err(ParseError {
                column: col,
                message: format!("unexpected operator `{c}`"),
            }),
        }
    }

    fn missing_operand_at_end<T>(&mut self) -> Result<T, ParseError> {
        self.pos = self.toks.len();
        self.missing_operand()
    }

    fn ident(&mut self, name: String, col: usize) -> Result<Expr, ParseError> {
        match name.as_str() {
            "z" => return Ok(Expr::Var(Var::Z)),
            "a" => return Ok(Expr::Var(Var::A)),
            "x" => return Ok(Expr::Var(Var::X)),
            "pi" => return Ok(Expr::Const(std::f64::consts::PI)),
            _ => {}
        }
        if let Some(pname) = name.strip_prefix("param:") {
            return match self.params.get(pname) {
                Some(v) => Ok(Expr::Const(*v)),
                None => Err(ParseError {
                    column: col,
                    message: format!("unknown parameter `{pname}`"),
                }),
            };
        }
        let Some(func) = Func::from_name(&name) else {
            return Err(ParseError {
                column: col,
                message: format!("unknown identifier `{name}`"),
            });
        };
        if self.peek() != Some(&Tok::LParen) {
            return self.err(format!("expected `(` after `{name}`"));
        }
        self.pos += 1;
        let mut args = vec![self.expr()?];
        while self.peek() == Some(&Tok::Comma) {
            self.pos += 1;
            args.push(self.expr()?);
        }
        match self.next() {
            Some(Tok::RParen) => {}
            _ => {
                return Err(ParseError {
                    column: col,
                    message: format!("unbalanced parenthesis in call to `{name}`"),
                })
            }
        }
        if args.len() != func.arity() {
            return Err(ParseError {
                column: col,
                message: format!(
                    "`{name}` takes {} argument(s), got {}",
                    func.arity(),
                    args.len()
                ),
            });
        }
        Ok(Expr::Call(func, args))
    }
}

fn parse_expr(src: &str, params: &BTreeMap<String, f64>) -> Result<Expr, ParseError> {
    let toks = tokenize(src)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end_col: src.chars().count() + 1,
        params,
    };
    if p.toks.is_empty() {
        return p.err("empty expression");
    }
    let e = p.expr()?;
    if p.pos < p.toks.len() {
        return match p.peek() {
            Some(Tok::RParen) => p.err("unbalanced parenthesis"),
            _ => p.err("unexpected trailing input"),
        };
    }
    Ok(e)
}
