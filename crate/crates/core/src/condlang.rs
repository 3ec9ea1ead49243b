//! A small, total expression language for conditional policies.
//!
//! Programs are pure boolean expressions over two namespaces: `params.*`,
//! bound when a policy is instantiated for a task, and `args.*`, resolved from
//! the request or the page when the governed action is attempted:
//!
//! ```text
//! args.totalAmount <= params.maxAmount
//! args.checkinDate == params.checkinDate && args.numGuests <= params.numGuests
//! !("api" in args.scopes)
//! ```
//!
//! Precedence, tightest first: unary `!`/`-`, additive `+`/`-`, comparisons
//! (`< <= > >= == != in`, non-associative), `&&`, `||`. Both sides of every
//! binary operator are always evaluated.
//!
//! Evaluation never fails: a missing binding, a type mismatch or an overflow
//! yields [`Verdict::DenyByError`].

use std::collections::BTreeSet;
use std::fmt;

use crate::value::{Amount, Value, ValueMap};

const MAX_SOURCE_LEN: usize = 8 * 1024;
const MAX_DEPTH: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConditionError {
    #[error("parse error at {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("unknown namespace `{namespace}` at {position}; expected `params` or `args`")]
    UnknownNamespace { position: usize, namespace: String },
}

impl ConditionError {
    pub fn position(&self) -> usize {
        match self {
            ConditionError::Parse { position, .. } | ConditionError::UnknownNamespace { position, .. } => {
                *position
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Namespace {
    Params,
    Args,
}

impl fmt::Display for Namespace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Namespace::Params => "params",
            Namespace::Args => "args",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Or,
    And,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    In,
    Add,
    Sub,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Or => "||",
            BinOp::And => "&&",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::In => "in",
            BinOp::Add => "+",
            BinOp::Sub => "-",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Lit(Value),
    Var(Namespace, String),
    Not(Box<Expr>),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

impl fmt::Display for Expr {
    /// Fully parenthesized rendering.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Lit(Value::String(s)) => write!(f, "{}", quote(s)),
            Expr::Lit(v) => write!(f, "{v}"),
            Expr::Var(ns, name) => write!(f, "{ns}.{name}"),
            Expr::Not(e) => write!(f, "(!{e})"),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Binary(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
        }
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Allow,
    Deny,
    DenyByError(String),
}

impl Verdict {
    pub fn is_allow(&self) -> bool {
        matches!(self, Verdict::Allow)
    }

    pub fn label(&self) -> &'static str {
        match self {
            Verdict::Allow => "allow",
            Verdict::Deny => "deny",
            Verdict::DenyByError(_) => "deny_by_error",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::DenyByError(reason) => write!(f, "deny_by_error({reason})"),
            v => f.write_str(v.label()),
        }
    }
}

/// A parsed condition, immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionProgram {
    pub name: String,
    pub source: String,
    pub ast: Expr,
}

impl ConditionProgram {
    pub fn parse(name: &str, source: &str) -> Result<ConditionProgram, ConditionError> {
        Ok(ConditionProgram {
            name: name.to_owned(),
            source: source.to_owned(),
            ast: parse_condition(source)?,
        })
    }

    /// Names referenced under `ns`.
    pub fn references(&self, ns: Namespace) -> BTreeSet<String> {
        fn walk(e: &Expr, ns: Namespace, out: &mut BTreeSet<String>) {
            match e {
                Expr::Var(n, name) if *n == ns => {
                    out.insert(name.clone());
                }
                Expr::Not(x) | Expr::Neg(x) => walk(x, ns, out),
                Expr::Binary(_, l, r) => {
                    walk(l, ns, out);
                    walk(r, ns, out);
                }
                _ => {}
            }
        }
        let mut out = BTreeSet::new();
        walk(&self.ast, ns, &mut out);
        out
    }

    pub fn evaluate(&self, params: &ValueMap, args: &ValueMap) -> Verdict {
        evaluate(&self.ast, params, args)
    }
}

pub fn evaluate(expr: &Expr, params: &ValueMap, args: &ValueMap) -> Verdict {
    match eval(expr, params, args) {
        Ok(Value::Bool(true)) => Verdict::Allow,
        Ok(Value::Bool(false)) => Verdict::Deny,
        Ok(other) => Verdict::DenyByError(format!("condition produced {} instead of a boolean", other.value_type())),
        Err(reason) => Verdict::DenyByError(reason),
    }
}

fn is_iso_date(s: &str) -> bool {
    let b = s.as_bytes();
    if b.len() != 10 || b[4] != b'-' || b[7] != b'-' {
        return false;
    }
    let digits = |r: std::ops::Range<usize>| b[r].iter().all(u8::is_ascii_digit);
    if !(digits(0..4) && digits(5..7) && digits(8..10)) {
        return false;
    }
    let year: u32 = s[0..4].parse().unwrap_or(0);
    let month: u32 = s[5..7].parse().unwrap_or(0);
    let day: u32 = s[8..10].parse().unwrap_or(0);
    let leap = (year % 4 == 0 && year % 100 != 0) || year % 400 == 0;
    let days = match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 if leap => 29,
        2 => 28,
        _ => return false,
    };
    (1..=days).contains(&day)
}

fn eval(expr: &Expr, params: &ValueMap, args: &ValueMap) -> Result<Value, String> {
    match expr {
        Expr::Lit(v) => Ok(v.clone()),
        Expr::Var(ns, name) => {
            let map = match ns {
                Namespace::Params => params,
                Namespace::Args => args,
            };
            map.get(name).cloned().ok_or_else(|| format!("missing {ns}.{name}"))
        }
        Expr::Not(e) => match eval(e, params, args)? {
            Value::Bool(b) => Ok(Value::Bool(!b)),
            v => Err(format!("`!` applied to {}", v.value_type())),
        },
        Expr::Neg(e) => match eval(e, params, args)? {
            Value::Number(a) => a
                .hundredths()
                .checked_neg()
                .map(|h| Value::Number(Amount::from_hundredths(h)))
                .ok_or_else(|| "numeric overflow".to_owned()),
            v => Err(format!("`-` applied to {}", v.value_type())),
        },
        Expr::Binary(op, l, r) => {
            let lv = eval(l, params, args)?;
            let rv = eval(r, params, args)?;
            binary(*op, lv, rv)
        }
    }
}

fn binary(op: BinOp, l: Value, r: Value) -> Result<Value, String> {
    use std::cmp::Ordering;
    let mismatch = |l: &Value, r: &Value| {
        format!(
            "`{}` cannot compare {} with {}",
            op.symbol(),
            l.value_type(),
            r.value_type()
        )
    };
    match op {
        BinOp::Or | BinOp::And => match (&l, &r) {
            (Value::Bool(a), Value::Bool(b)) => Ok(Value::Bool(if op == BinOp::Or { *a || *b } else { *a && *b })),
            _ => Err(mismatch(&l, &r)),
        },
        BinOp::Add | BinOp::Sub => match (&l, &r) {
            (Value::Number(a), Value::Number(b)) => {
                let h = if op == BinOp::Add {
                    a.hundredths().checked_add(b.hundredths())
                } else {
                    a.hundredths().checked_sub(b.hundredths())
                };
                h.map(|h| Value::Number(Amount::from_hundredths(h)))
                    .ok_or_else(|| "numeric overflow".to_owned())
            }
            _ => Err(mismatch(&l, &r)),
        },
        BinOp::Eq | BinOp::Ne => {
            if l.value_type() != r.value_type() {
                return Err(mismatch(&l, &r));
            }
            Ok(Value::Bool((l == r) == (op == BinOp::Eq)))
        }
        BinOp::In => match (&l, &r) {
            (Value::String(needle), Value::StringList(hay)) => Ok(Value::Bool(hay.contains(needle))),
            _ => Err(mismatch(&l, &r)),
        },
        BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
            let ord: Ordering = match (&l, &r) {
                (Value::Number(a), Value::Number(b)) => a.cmp(b),
                (Value::String(a), Value::String(b)) if is_iso_date(a) && is_iso_date(b) => a.cmp(b),
                _ => return Err(mismatch(&l, &r)),
            };
            Ok(Value::Bool(match op {
                BinOp::Lt => ord.is_lt(),
                BinOp::Le => ord.is_le(),
                BinOp::Gt => ord.is_gt(),
                _ => ord.is_ge(),
            }))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(Amount),
    Str(String),
    Bool(bool),
    Var(Namespace, String),
    LParen,
    RParen,
    Not,
    And,
    Or,
    Plus,
    Minus,
    Op(BinOp),
    Eof,
}

fn describe_tok(t: &Tok) -> String {
    match t {
        Tok::Num(a) => format!("number {a}"),
        Tok::Str(s) => format!("string {}", quote(s)),
        Tok::Bool(b) => b.to_string(),
        Tok::Var(ns, n) => format!("{ns}.{n}"),
        Tok::LParen => "`(`".into(),
        Tok::RParen => "`)`".into(),
        Tok::Not => "`!`".into(),
        Tok::And => "`&&`".into(),
        Tok::Or => "`||`".into(),
        Tok::Plus => "`+`".into(),
        Tok::Minus => "`-`".into(),
        Tok::Op(op) => format!("`{}`", op.symbol()),
        Tok::Eof => "end of input".into(),
    }
}

fn perr(position: usize, message: impl Into<String>) -> ConditionError {
    ConditionError::Parse {
        position,
        message: message.into(),
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ConditionError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let word_char = |b: u8| b.is_ascii_alphanumeric() || b == b'_';
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let two = |s: &str| src[i..].starts_with(s);
        let tok = if two("&&") {
            i += 2;
            Tok::And
        } else if two("||") {
            i += 2;
            Tok::Or
        } else if two("==") {
            i += 2;
            Tok::Op(BinOp::Eq)
        } else if two("!=") {
            i += 2;
            Tok::Op(BinOp::Ne)
        } else if two("<=") {
            i += 2;
            Tok::Op(BinOp::Le)
        } else if two(">=") {
            i += 2;
            Tok::Op(BinOp::Ge)
        } else {
            match c {
                b'(' => {
                    i += 1;
                    Tok::LParen
                }
                b')' => {
                    i += 1;
                    Tok::RParen
                }
                b'!' => {
                    i += 1;
                    Tok::Not
                }
                b'<' => {
                    i += 1;
                    Tok::Op(BinOp::Lt)
                }
                b'>' => {
                    i += 1;
                    Tok::Op(BinOp::Gt)
                }
                b'+' => {
                    i += 1;
                    Tok::Plus
                }
                b'-' => {
                    i += 1;
                    Tok::Minus
                }
                b'"' => {
                    i += 1;
                    let mut s = String::new();
                    loop {
                        let Some(ch) = src[i..].chars().next() else {
                            return Err(perr(start, "unterminated string"));
                        };
                        i += ch.len_utf8();
                        match ch {
                            '"' => break,
                            '\\' => {
                                let esc = src[i..].chars().next().ok_or_else(|| perr(start, "unterminated string"))?;
                                i += esc.len_utf8();
                                s.push(match esc {
                                    '"' => '"',
                                    '\\' => '\\',
                                    'n' => '\n',
                                    't' => '\t',
                                    other => return Err(perr(i - 2, format!("unknown escape `\\{other}`"))),
                                });
                            }
                            ch => s.push(ch),
                        }
                    }
                    Tok::Str(s)
                }
                b'0'..=b'9' => {
                    while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                        i += 1;
                    }
                    let text = &src[start..i];
                    let amount = Amount::parse_decimal(text)
                        .ok_or_else(|| perr(start, format!("invalid number `{text}` (at most two decimals)")))?;
                    Tok::Num(amount)
                }
                c if c.is_ascii_alphabetic() || c == b'_' => {
                    while i < bytes.len() && word_char(bytes[i]) {
                        i += 1;
                    }
                    let word = &src[start..i];
                    match word {
                        "true" => Tok::Bool(true),
                        "false" => Tok::Bool(false),
                        "in" => Tok::Op(BinOp::In),
                        _ => {
                            if bytes.get(i) != Some(&b'.') {
                                return Err(perr(
                                    start,
                                    format!("bare identifier `{word}`; use params.<name> or args.<name>"),
                                ));
                            }
                            let ns = match word {
                                "params" => Namespace::Params,
                                "args" => Namespace::Args,
                                _ => {
                                    return Err(ConditionError::UnknownNamespace {
                                        position: start,
                                        namespace: word.to_owned(),
                                    })
                                }
                            };
                            i += 1;
                            let name_start = i;
                            if i < bytes.len() && (bytes[i].is_ascii_alphabetic() || bytes[i] == b'_') {
                                while i < bytes.len() && word_char(bytes[i]) {
                                    i += 1;
                                }
                            }
                            if name_start == i {
                                return Err(perr(name_start, format!("expected a name after `{word}.`")));
                            }
                            Tok::Var(ns, src[name_start..i].to_owned())
                        }
                    }
                }
                _ => {
                    let ch = src[i..].chars().next().unwrap_or('?');
                    return Err(perr(start, format!("unexpected character `{ch}`")));
                }
            }
        };
        out.push((tok, start));
    }
    out.push((Tok::Eof, src.len()));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    depth: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn at(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn enter(&mut self) -> Result<(), ConditionError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(perr(self.at(), "expression nested too deeply"));
        }
        Ok(())
    }

    fn or_expr(&mut self) -> Result<Expr, ConditionError> {
        self.enter()?;
        let mut lhs = self.and_expr()?;
        while *self.peek() == Tok::Or {
            self.bump();
            self.enter()?;
            let rhs = self.and_expr()?;
            lhs = Expr::Binary(BinOp::Or, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Expr, ConditionError> {
        let mut lhs = self.cmp_expr()?;
        while *self.peek() == Tok::And {
            self.bump();
            self.enter()?;
            let rhs = self.cmp_expr()?;
            lhs = Expr::Binary(BinOp::And, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn cmp_expr(&mut self) -> Result<Expr, ConditionError> {
        let lhs = self.add_expr()?;
        if let Tok::Op(op) = *self.peek() {
            self.bump();
            let rhs = self.add_expr()?;
            if let Tok::Op(next) = self.peek() {
                return Err(perr(
                    self.at(),
                    format!("comparison `{}` cannot be chained; add parentheses", next.symbol()),
                ));
            }
            return Ok(Expr::Binary(op, Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn add_expr(&mut self) -> Result<Expr, ConditionError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            self.enter()?;
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ConditionError> {
        match self.peek() {
            Tok::Not => {
                self.bump();
                self.enter()?;
                Ok(Expr::Not(Box::new(self.unary()?)))
            }
            Tok::Minus => {
                self.bump();
                self.enter()?;
                match self.unary()? {
                    Expr::Lit(Value::Number(a)) => Ok(Expr::Lit(Value::Number(Amount::from_hundredths(-a.hundredths())))),
                    e => Ok(Expr::Neg(Box::new(e))),
                }
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Expr, ConditionError> {
        let at = self.at();
        match self.bump() {
            Tok::Num(a) => Ok(Expr::Lit(Value::Number(a))),
            Tok::Str(s) => Ok(Expr::Lit(Value::String(s))),
            Tok::Bool(b) => Ok(Expr::Lit(Value::Bool(b))),
            Tok::Var(ns, name) => Ok(Expr::Var(ns, name)),
            Tok::LParen => {
                self.enter()?;
                let inner = self.or_expr()?;
                if *self.peek() != Tok::RParen {
                    return Err(perr(
                        self.at(),
                        format!("expected `)`, found {}", describe_tok(self.peek())),
                    ));
                }
                self.bump();
                Ok(inner)
            }
            other => Err(perr(at, format!("expected an operand, found {}", describe_tok(&other)))),
        }
    }
}

/// Parses condition source into an expression tree.
pub fn parse_condition(source: &str) -> Result<Expr, ConditionError> {
    if source.trim().is_empty() {
        return Err(perr(0, "empty condition"));
    }
    if source.len() > MAX_SOURCE_LEN {
        return Err(perr(MAX_SOURCE_LEN, "condition too long"));
    }
    let mut p = Parser {
        toks: lex(source)?,
        pos: 0,
        depth: 0,
    };
    let expr = p.or_expr()?;
    if *p.peek() != Tok::Eof {
        return Err(perr(p.at(), format!("unexpected {}", describe_tok(p.peek()))));
    }
    Ok(expr)
}
