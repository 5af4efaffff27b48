//! Arithmetic expression language for user-defined fields.
//!
//! Grammar (binding from loosest to tightest): `+ -`, then `* /`, then unary
//! minus, then `^` (right associative, so `2^3^2 = 512` and `-x1^2 = -(x1^2)`).
//! Atoms are decimal literals, the constant `pi`, parenthesised expressions,
//! the function calls `exp sin cos abs sqrt min max indicator`, and role
//! variables `x1..x2`, `y1..y2`, `z1..z2`, `w1..w2`. Which roles are in scope
//! depends on where the expression is used (a kernel sees `x`/`y`, a
//! connectivity profile sees `z`/`w`, densities see `x` only); that check
//! happens at configuration time, not at parse time.
//!
//! `indicator(e)` is 1 when `e >= 0` and 0 otherwise. Expressions can be
//! differentiated symbolically with respect to one variable, which is how
//! kernel gradients are obtained; non-constant exponents are rejected there
//! because the function set has no logarithm.

use std::fmt;

use crate::error::ParseError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarRole {
    X,
    Y,
    Z,
    W,
}

impl VarRole {
    pub fn letter(self) -> char {
        match self {
            VarRole::X => 'x',
            VarRole::Y => 'y',
            VarRole::Z => 'z',
            VarRole::W => 'w',
        }
    }
}

/// A role variable such as `x1` or `w2`. `index` is zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    pub role: VarRole,
    pub index: usize,
}

impl Var {
    pub fn new(role: VarRole, index: usize) -> Self {
        Var { role, index }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.role.letter(), self.index + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Sin,
    Cos,
    Abs,
    Sqrt,
    Min,
    Max,
    Indicator,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
            Func::Min => "min",
            Func::Max => "max",
            Func::Indicator => "indicator",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "min" => Func::Min,
            "max" => Func::Max,
            "indicator" => Func::Indicator,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expression {
    Num(f64),
    Var(Var),
    Neg(Box<Expression>),
    Add(Box<Expression>, Box<Expression>),
    Sub(Box<Expression>, Box<Expression>),
    Mul(Box<Expression>, Box<Expression>),
    Div(Box<Expression>, Box<Expression>),
    Pow(Box<Expression>, Box<Expression>),
    Call(Func, Vec<Expression>),
}

/// Variable bindings for evaluation. Roles not in scope stay empty; reading
/// an unbound variable is a contract violation caught when the expression is
/// admitted, so evaluation itself is infallible.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalScope<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub w: &'a [f64],
}

impl<'a> EvalScope<'a> {
    pub fn x(x: &'a [f64]) -> Self {
        EvalScope {
            x,
            ..Default::default()
        }
    }

    pub fn xy(x: &'a [f64], y: &'a [f64]) -> Self {
        EvalScope {
            x,
            y,
            ..Default::default()
        }
    }

    pub fn zw(z: &'a [f64], w: &'a [f64]) -> Self {
        EvalScope {
            z,
            w,
            ..Default::default()
        }
    }

    fn get(&self, v: Var) -> f64 {
        let slot = match v.role {
            VarRole::X => self.x,
            VarRole::Y => self.y,
            VarRole::Z => self.z,
            VarRole::W => self.w,
        };
        debug_assert!(
            v.index < slot.len(),
            "variable {} out of scope; admission check missed it",
            v
        );
        slot.get(v.index).copied().unwrap_or(0.0)
    }
}

pub fn indicator_value(e: f64) -> f64 {
    if e >= 0.0 {
        1.0
    } else {
        0.0
    }
}

impl Expression {
    pub fn eval(&self, scope: &EvalScope<'_>) -> f64 {
        match self {
            Expression::Num(c) => *c,
            Expression::Var(v) => scope.get(*v),
            Expression::Neg(e) => -e.eval(scope),
            Expression::Add(a, b) => a.eval(scope) + b.eval(scope),
            Expression::Sub(a, b) => a.eval(scope) - b.eval(scope),
            Expression::Mul(a, b) => a.eval(scope) * b.eval(scope),
            Expression::Div(a, b) => a.eval(scope) / b.eval(scope),
            Expression::Pow(a, b) => a.eval(scope).powf(b.eval(scope)),
            Expression::Call(f, args) => {
                let a0 = args[0].eval(scope);
                match f {
                    Func::Exp => a0.exp(),
                    Func::Sin => a0.sin(),
                    Func::Cos => a0.cos(),
                    Func::Abs => a0.abs(),
                    Func::Sqrt => a0.sqrt(),
                    Func::Min => a0.min(args[1].eval(scope)),
                    Func::Max => a0.max(args[1].eval(scope)),
                    Func::Indicator => indicator_value(a0),
                }
            }
        }
    }

    /// All variables appearing in the expression, deduplicated.
    pub fn variables(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut Vec<Var>) {
        match self {
            Expression::Num(_) => {}
            Expression::Var(v) => {
                if !out.contains(v) {
                    out.push(*v);
                }
            }
            Expression::Neg(e) => e.collect_vars(out),
            Expression::Add(a, b)
            | Expression::Sub(a, b)
            | Expression::Mul(a, b)
            | Expression::Div(a, b)
            | Expression::Pow(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Expression::Call(_, args) => {
                for a in args {
                    a.collect_vars(out);
                }
            }
        }
    }

    /// Symbolic derivative with respect to `var`. Piecewise constructs
    /// (`abs`, `min`, `max`) differentiate to their almost-everywhere
    /// derivative; `indicator` differentiates to zero. Fails on `a^b` with a
    /// non-constant exponent since the language has no logarithm to express
    /// the result.
    pub fn derivative(&self, var: Var) -> Result<Expression, String> {
        use Expression as E;
        Ok(match self {
            E::Num(_) => E::Num(0.0),
            E::Var(v) => E::Num(if *v == var { 1.0 } else { 0.0 }),
            E::Neg(e) => neg(e.derivative(var)?),
            E::Add(a, b) => add(a.derivative(var)?, b.derivative(var)?),
            E::Sub(a, b) => sub_expr(a.derivative(var)?, b.derivative(var)?),
            E::Mul(a, b) => add(
                mul(a.derivative(var)?, (**b).clone()),
                mul((**a).clone(), b.derivative(var)?),
            ),
            E::Div(a, b) => {
                let num = sub_expr(
                    mul(a.derivative(var)?, (**b).clone()),
                    mul((**a).clone(), b.derivative(var)?),
                );
                div(num, mul((**b).clone(), (**b).clone()))
            }
            E::Pow(base, exponent) => match **exponent {
                E::Num(c) => {
                    // d(u^c) = c * u^(c-1) * u'
                    let du = base.derivative(var)?;
                    mul(
                        mul(E::Num(c), pow((**base).clone(), E::Num(c - 1.0))),
                        du,
                    )
                }
                _ => {
                    return Err(
                        "cannot differentiate a power with a non-constant exponent".to_string()
                    )
                }
            },
            E::Call(f, args) => {
                let u = args[0].clone();
                let du = args[0].derivative(var)?;
                match f {
                    Func::Exp => mul(E::Call(Func::Exp, vec![u]), du),
                    Func::Sin => mul(E::Call(Func::Cos, vec![u]), du),
                    Func::Cos => neg(mul(E::Call(Func::Sin, vec![u]), du)),
                    Func::Abs => mul(sign_of(u), du),
                    Func::Sqrt => div(du, mul(E::Num(2.0), E::Call(Func::Sqrt, vec![u]))),
                    Func::Indicator => E::Num(0.0),
                    Func::Min | Func::Max => {
                        let v = args[1].clone();
                        let dv = args[1].derivative(var)?;
                        // pick = 1 where the first argument wins the comparison
                        let pick = if *f == Func::Min {
                            E::Call(Func::Indicator, vec![sub_expr(v.clone(), u.clone())])
                        } else {
                            E::Call(Func::Indicator, vec![sub_expr(u.clone(), v.clone())])
                        };
                        add(
                            mul(pick.clone(), du),
                            mul(sub_expr(E::Num(1.0), pick), dv),
                        )
                    }
                }
            }
        })
    }
}

/// sign(u) expressed within the language: indicator(u) - indicator(-u).
/// Evaluates to 0 at u = 0, matching the subgradient convention for |u|.
fn sign_of(u: Expression) -> Expression {
    sub_expr(
        Expression::Call(Func::Indicator, vec![u.clone()]),
        Expression::Call(Func::Indicator, vec![neg(u)]),
    )
}

fn is_zero(e: &Expression) -> bool {
    matches!(e, Expression::Num(c) if *c == 0.0)
}

fn is_one(e: &Expression) -> bool {
    matches!(e, Expression::Num(c) if *c == 1.0)
}

fn neg(e: Expression) -> Expression {
    if is_zero(&e) {
        e
    } else {
        Expression::Neg(Box::new(e))
    }
}

fn add(a: Expression, b: Expression) -> Expression {
    if is_zero(&a) {
        b
    } else if is_zero(&b) {
        a
    } else {
        Expression::Add(Box::new(a), Box::new(b))
    }
}

fn sub_expr(a: Expression, b: Expression) -> Expression {
    if is_zero(&b) {
        a
    } else if is_zero(&a) {
        neg(b)
    } else {
        Expression::Sub(Box::new(a), Box::new(b))
    }
}

fn mul(a: Expression, b: Expression) -> Expression {
    if is_zero(&a) || is_zero(&b) {
        Expression::Num(0.0)
    } else if is_one(&a) {
        b
    } else if is_one(&b) {
        a
    } else {
        Expression::Mul(Box::new(a), Box::new(b))
    }
}

fn div(a: Expression, b: Expression) -> Expression {
    if is_zero(&a) {
        a
    } else if is_one(&b) {
        a
    } else {
        Expression::Div(Box::new(a), Box::new(b))
    }
}

fn pow(a: Expression, b: Expression) -> Expression {
    match &b {
        Expression::Num(c) if *c == 1.0 => a,
        Expression::Num(c) if *c == 0.0 => Expression::Num(1.0),
        _ => Expression::Pow(Box::new(a), Box::new(b)),
    }
}

// Precedence levels used by the printer; higher binds tighter.
const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;
const PREC_NEG: u8 = 3;
const PREC_POW: u8 = 4;
const PREC_ATOM: u8 = 5;

impl Expression {
    fn precedence(&self) -> u8 {
        match self {
            Expression::Add(..) | Expression::Sub(..) => PREC_ADD,
            Expression::Mul(..) | Expression::Div(..) => PREC_MUL,
            Expression::Neg(..) => PREC_NEG,
            Expression::Pow(..) => PREC_POW,
            Expression::Num(c) if *c < 0.0 => PREC_NEG,
            _ => PREC_ATOM,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        let prec = self.precedence();
        let parens = prec < min_prec;
        if parens {
            write!(f, "(")?;
        }
        match self {
            Expression::Num(c) => write!(f, "{}", c)?,
            Expression::Var(v) => write!(f, "{}", v)?,
            Expression::Neg(e) => {
                write!(f, "-")?;
                // operand printed one level above ^ so -x1^2 keeps meaning -(x1^2)
                e.fmt_prec(f, PREC_NEG + 1)?;
            }
            Expression::Add(a, b) => {
                a.fmt_prec(f, PREC_ADD)?;
                write!(f, " + ")?;
                b.fmt_prec(f, PREC_ADD + 1)?;
            }
            Expression::Sub(a, b) => {
                a.fmt_prec(f, PREC_ADD)?;
                write!(f, " - ")?;
                b.fmt_prec(f, PREC_ADD + 1)?;
            }
            Expression::Mul(a, b) => {
                a.fmt_prec(f, PREC_MUL)?;
                write!(f, "*")?;
                b.fmt_prec(f, PREC_MUL + 1)?;
            }
            Expression::Div(a, b) => {
                a.fmt_prec(f, PREC_MUL)?;
                write!(f, "/")?;
                b.fmt_prec(f, PREC_MUL + 1)?;
            }
            Expression::Pow(a, b) => {
                a.fmt_prec(f, PREC_ATOM)?;
                write!(f, "^")?;
                // right associative: the exponent reuses this level
                b.fmt_prec(f, PREC_NEG)?;
            }
            Expression::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    a.fmt_prec(f, PREC_ADD)?;
                }
                write!(f, ")")?;
            }
        }
        if parens {
            write!(f, ")")?;
        }
        Ok(())
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, PREC_ADD)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn tokens(mut self) -> Result<Vec<(usize, Token)>, ParseError> {
        let mut out = Vec::new();
        loop {
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos >= self.src.len() {
                break;
            }
            let start = self.pos;
            let c = self.src[self.pos];
            let tok = match c {
                b'+' => {
                    self.pos += 1;
                    Token::Plus
                }
                b'-' => {
                    self.pos += 1;
                    Token::Minus
                }
                b'*' => {
                    self.pos += 1;
                    Token::Star
                }
                b'/' => {
                    self.pos += 1;
                    Token::Slash
                }
                b'^' => {
                    self.pos += 1;
                    Token::Caret
                }
                b'(' => {
                    self.pos += 1;
                    Token::LParen
                }
                b')' => {
                    self.pos += 1;
                    Token::RParen
                }
                b',' => {
                    self.pos += 1;
                    Token::Comma
                }
                b'0'..=b'9' | b'.' => self.number(start)?,
                c if c.is_ascii_alphabetic() || c == b'_' => {
                    while self.pos < self.src.len()
                        && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
                    {
                        self.pos += 1;
                    }
                    Token::Ident(
                        std::str::from_utf8(&self.src[start..self.pos])
                            .expect("identifier bytes are ascii")
                            .to_string(),
                    )
                }
                other => {
                    return Err(ParseError::new(
                        start,
                        format!("unexpected character '{}'", other as char),
                    ))
                }
            };
            out.push((start, tok));
        }
        Ok(out)
    }

    fn number(&mut self, start: usize) -> Result<Token, ParseError> {
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.')
        {
            self.pos += 1;
        }
        // optional exponent part: e or E, optional sign, digits
        if self.pos < self.src.len() && (self.src[self.pos] == b'e' || self.src[self.pos] == b'E') {
            let mut probe = self.pos + 1;
            if probe < self.src.len() && (self.src[probe] == b'+' || self.src[probe] == b'-') {
                probe += 1;
            }
            if probe < self.src.len() && self.src[probe].is_ascii_digit() {
                self.pos = probe;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("number bytes are ascii");
        text.parse::<f64>()
            .map(Token::Num)
            .map_err(|_| ParseError::new(start, format!("malformed number '{}'", text)))
    }
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    cursor: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.cursor).map(|(_, t)| t)
    }

    fn pos(&self) -> usize {
        self.tokens
            .get(self.cursor)
            .map(|(p, _)| *p)
            .unwrap_or(self.end)
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.cursor).map(|(_, t)| t.clone());
        if t.is_some() {
            self.cursor += 1;
        }
        t
    }

    fn expect(&mut self, want: &Token, what: &str) -> Result<(), ParseError> {
        match self.peek() {
            Some(t) if t == want => {
                self.cursor += 1;
                Ok(())
            }
            _ => Err(ParseError::new(self.pos(), format!("expected {}", what))),
        }
    }

    fn sum(&mut self) -> Result<Expression, ParseError> {
        let mut lhs = self.product()?;
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.cursor += 1;
                    let rhs = self.product()?;
                    lhs = Expression::Add(Box::new(lhs), Box::new(rhs));
                }
                Some(Token::Minus) => {
                    self.cursor += 1;
                    let rhs = self.product()?;
                    lhs = Expression::Sub(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn product(&mut self) -> Result<Expression, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Token::Star) => {
                    self.cursor += 1;
                    let rhs = self.unary()?;
                    lhs = Expression::Mul(Box::new(lhs), Box::new(rhs));
                }
                Some(Token::Slash) => {
                    self.cursor += 1;
                    let rhs = self.unary()?;
                    lhs = Expression::Div(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expression, ParseError> {
        if matches!(self.peek(), Some(Token::Minus)) {
            self.cursor += 1;
            let inner = self.unary()?;
            return Ok(Expression::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expression, ParseError> {
        let base = self.atom()?;
        if matches!(self.peek(), Some(Token::Caret)) {
            self.cursor += 1;
            // exponent parses at unary level: right associativity and -
            let exponent = self.unary()?;
            return Ok(Expression::Pow(Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expression, ParseError> {
        let at = self.pos();
        match self.bump() {
            Some(Token::Num(c)) => Ok(Expression::Num(c)),
            Some(Token::LParen) => {
                let inner = self.sum()?;
                self.expect(&Token::RParen, "')'")?;
                Ok(inner)
            }
            Some(Token::Ident(name)) => self.ident(at, name),
            Some(tok) => Err(ParseError::new(at, format!("unexpected token {:?}", tok))),
            None => Err(ParseError::new(at, "unexpected end of input".to_string())),
        }
    }

    fn ident(&mut self, at: usize, name: String) -> Result<Expression, ParseError> {
        if name == "pi" {
            return Ok(Expression::Num(std::f64::consts::PI));
        }
        if let Some(func) = Func::from_name(&name) {
            self.expect(&Token::LParen, &format!("'(' after {}", name))?;
            let mut args = vec![self.sum()?];
            while matches!(self.peek(), Some(Token::Comma)) {
                self.cursor += 1;
                args.push(self.sum()?);
            }
            self.expect(&Token::RParen, "')'")?;
            if args.len() != func.arity() {
                return Err(ParseError::new(
                    at,
                    format!(
                        "{} takes {} argument{}, got {}",
                        name,
                        func.arity(),
                        if func.arity() == 1 { "" } else { "s" },
                        args.len()
                    ),
                ));
            }
            return Ok(Expression::Call(func, args));
        }
        if let Some(var) = parse_var_name(&name) {
            return Ok(Expression::Var(var));
        }
        Err(ParseError::new(
            at,
            format!(
                "unknown identifier '{}'; expected a number, pi, x1..x2/y1..y2/z1..z2/w1..w2, \
                 or one of exp sin cos abs sqrt min max indicator",
                name
            ),
        ))
    }
}

fn parse_var_name(name: &str) -> Option<Var> {
    let mut chars = name.chars();
    let head = chars.next()?;
    let role = match head {
        'x' => VarRole::X,
        'y' => VarRole::Y,
        'z' => VarRole::Z,
        'w' => VarRole::W,
        _ => return None,
    };
    let rest: String = chars.collect();
    let index: usize = rest.parse().ok()?;
    if index == 0 || index > 2 {
        return None;
    }
    Some(Var::new(role, index - 1))
}

/// Parse an expression from source text.
pub fn parse_expression(src: &str) -> Result<Expression, ParseError> {
    let tokens = Lexer::new(src).tokens()?;
    if tokens.is_empty() {
        return Err(ParseError::new(0, "empty expression".to_string()));
    }
    let end = src.len();
    let mut parser = Parser {
        tokens,
        cursor: 0,
        end,
    };
    let expr = parser.sum()?;
    if parser.cursor != parser.tokens.len() {
        return Err(ParseError::new(
            parser.pos(),
            "trailing input after expression".to_string(),
        ));
    }
    Ok(expr)
}
