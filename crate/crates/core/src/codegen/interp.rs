//! A small interpreter for emitted kernels.
//!
//! It understands exactly the C subset the generator produces: typedefs,
//! one or more `void` kernels, declarations, assignments (`=`, `+=`, `-=`),
//! `if`/`else`, `for`, casts, `max`/`min`, the usual binary operators and the
//! ternary. Integer arithmetic follows C promotion and conversion rules with
//! two's complement wrapping; shifts outside the operand width are reported
//! as errors instead of being silently undefined. Kernels run serially as a
//! single work item, so grid-stride loops cover the whole range.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::fp16::fp16_round;
use crate::quant::RequantParams;

use super::KernelProgram;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ty {
    Int { bits: u32, signed: bool },
    F32,
    F16,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum V {
    I(i128, u32, bool),
    F(f64, bool),
}

fn err(msg: impl Into<String>) -> Error {
    Error::Interp(msg.into())
}

fn wrap(v: i128, bits: u32, signed: bool) -> i128 {
    let m = v & ((1i128 << bits) - 1);
    if signed && m >= 1i128 << (bits - 1) {
        m - (1i128 << bits)
    } else {
        m
    }
}

fn round_float(x: f64, half: bool) -> f64 {
    if half {
        fp16_round(x as f32) as f64
    } else {
        x as f32 as f64
    }
}

fn convert(v: V, ty: Ty) -> V {
    match (v, ty) {
        (V::I(x, _, _), Ty::Int { bits, signed }) => V::I(wrap(x, bits, signed), bits, signed),
        (V::F(x, _), Ty::Int { bits, signed }) => V::I(wrap(x.trunc() as i128, bits, signed), bits, signed),
        (V::I(x, _, _), Ty::F32) => V::F(round_float(x as f64, false), false),
        (V::I(x, _, _), Ty::F16) => V::F(round_float(x as f64, true), true),
        (V::F(x, _), Ty::F32) => V::F(round_float(x, false), false),
        (V::F(x, _), Ty::F16) => V::F(round_float(x, true), true),
    }
}

fn promote(v: V) -> V {
    match v {
        V::I(x, bits, _) if bits < 32 => V::I(x, 32, true),
        other => other,
    }
}

fn common(a: V, b: V) -> (V, V, Ty) {
    match (promote(a), promote(b)) {
        (V::F(x, hx), V::F(y, hy)) => {
            let half = hx && hy;
            (V::F(x, half), V::F(y, half), if half { Ty::F16 } else { Ty::F32 })
        }
        (V::F(x, h), i @ V::I(..)) => {
            let t = if h { Ty::F16 } else { Ty::F32 };
            (V::F(x, h), convert(i, t), t)
        }
        (i @ V::I(..), V::F(y, h)) => {
            let t = if h { Ty::F16 } else { Ty::F32 };
            (convert(i, t), V::F(y, h), t)
        }
        (a @ V::I(_, ba, sa), b @ V::I(_, bb, sb)) => {
            let t = if ba == bb {
                Ty::Int { bits: ba, signed: sa && sb }
            } else if ba > bb {
                Ty::Int { bits: ba, signed: sa }
            } else {
                Ty::Int { bits: bb, signed: sb }
            };
            (convert(a, t), convert(b, t), t)
        }
    }
}

fn truthy(v: V) -> bool {
    match v {
        V::I(x, ..) => x != 0,
        V::F(x, _) => x != 0.0,
    }
}

fn int_of(v: V) -> i128 {
    match v {
        V::I(x, ..) => x,
        V::F(x, _) => x.trunc() as i128,
    }
}

fn bool_val(b: bool) -> V {
    V::I(b as i128, 32, true)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(String),
    Str(String),
    P(&'static str),
}

const PUNCTS: [&str; 29] = [
    "<<", ">>", "<=", ">=", "==", "!=", "+=", "-=", "&&", "||", "(", ")", "{", "}", "[", "]", ";", ",", "=", "+", "-",
    "*", "/", "%", "<", ">", "?", ":", "!",
];

fn tokenize(src: &str) -> Result<Vec<Tok>> {
    let mut out = Vec::new();
    for line in src.lines() {
        if line.trim_start().starts_with('#') {
            continue;
        }
        let b = line.as_bytes();
        let mut i = 0;
        while i < b.len() {
            let c = b[i] as char;
            if c.is_whitespace() {
                i += 1;
            } else if c.is_ascii_alphabetic() || c == '_' {
                let s = i;
                while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_' || b[i] == b'.') {
                    i += 1;
                }
                out.push(Tok::Ident(line[s..i].to_string()));
            } else if c.is_ascii_digit() {
                let s = i;
                while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'.') {
                    i += 1;
                }
                out.push(Tok::Num(line[s..i].to_string()));
            } else if c == '"' {
                let s = i + 1;
                i += 1;
                while i < b.len() && b[i] != b'"' {
                    i += 1;
                }
                out.push(Tok::Str(line[s..i.min(b.len())].to_string()));
                i += 1;
            } else if let Some(p) = PUNCTS.iter().find(|p| line[i..].starts_with(**p)) {
                out.push(Tok::P(p));
                i += p.len();
            } else {
                return Err(err(format!("unexpected character '{c}'")));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
enum Expr {
    Lit(V),
    Var(String),
    Index(String, Box<Expr>),
    Cast(Ty, Box<Expr>),
    Neg(Box<Expr>),
    Not(Box<Expr>),
    Bin(&'static str, Box<Expr>, Box<Expr>),
    Cond(Box<Expr>, Box<Expr>, Box<Expr>),
    Call(String, Vec<Expr>),
}

#[derive(Debug, Clone)]
enum Target {
    Var(String),
    Index(String, Expr),
}

#[derive(Debug, Clone)]
enum Stmt {
    Decl(Ty, String, Expr),
    Assign(Target, &'static str, Expr),
    If(Expr, Vec<Stmt>, Vec<Stmt>),
    For(Box<Stmt>, Expr, Box<Stmt>, Vec<Stmt>),
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub ty: Ty,
    pub pointer: bool,
}

#[derive(Debug, Clone)]
struct Kernel {
    name: String,
    params: Vec<Param>,
    body: Vec<Stmt>,
}

struct Parser<'a> {
    toks: &'a [Tok],
    pos: usize,
    types: &'a HashMap<String, Ty>,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn peek_at(&self, k: usize) -> Option<&Tok> {
        self.toks.get(self.pos + k)
    }

    fn next(&mut self) -> Result<Tok> {
        let t = self.toks.get(self.pos).cloned().ok_or_else(|| err("unexpected end of source"))?;
        self.pos += 1;
        Ok(t)
    }

    fn is_p(&self, p: &str) -> bool {
        matches!(self.peek(), Some(Tok::P(q)) if *q == p)
    }

    fn eat(&mut self, p: &str) -> bool {
        if self.is_p(p) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, p: &str) -> Result<()> {
        if self.eat(p) {
            Ok(())
        } else {
            Err(err(format!("expected '{p}', found {:?}", self.peek())))
        }
    }

    fn ident(&mut self) -> Result<String> {
        match self.next()? {
            Tok::Ident(s) => Ok(s),
            t => Err(err(format!("expected identifier, found {t:?}"))),
        }
    }

    fn type_at(&self, k: usize) -> Option<Ty> {
        match self.peek_at(k) {
            Some(Tok::Ident(s)) => self.types.get(s).copied(),
            _ => None,
        }
    }

    fn block(&mut self) -> Result<Vec<Stmt>> {
        self.expect("{")?;
        let mut out = Vec::new();
        while !self.eat("}") {
            out.push(self.stmt()?);
        }
        Ok(out)
    }

    fn simple(&mut self) -> Result<Stmt> {
        if let Some(ty) = self.type_at(0) {
            if matches!(self.peek_at(1), Some(Tok::Ident(_))) {
                self.pos += 1;
                let name = self.ident()?;
                self.expect("=")?;
                return Ok(Stmt::Decl(ty, name, self.expr()?));
            }
        }
        let name = self.ident()?;
        let target = if self.eat("[") {
            let i = self.expr()?;
            self.expect("]")?;
            Target::Index(name, i)
        } else {
            Target::Var(name)
        };
        let op = match self.next()? {
            Tok::P(p @ ("=" | "+=" | "-=")) => p,
            t => return Err(err(format!("expected assignment, found {t:?}"))),
        };
        Ok(Stmt::Assign(target, op, self.expr()?))
    }

    fn stmt(&mut self) -> Result<Stmt> {
        match self.peek() {
            Some(Tok::Ident(k)) if k == "if" => {
                self.pos += 1;
                self.expect("(")?;
                let c = self.expr()?;
                self.expect(")")?;
                let then = self.block()?;
                let other = if matches!(self.peek(), Some(Tok::Ident(k)) if k == "else") {
                    self.pos += 1;
                    if matches!(self.peek(), Some(Tok::Ident(k)) if k == "if") {
                        vec![self.stmt()?]
                    } else {
                        self.block()?
                    }
                } else {
                    Vec::new()
                };
                Ok(Stmt::If(c, then, other))
            }
            Some(Tok::Ident(k)) if k == "for" => {
                self.pos += 1;
                self.expect("(")?;
                let init = self.simple()?;
                self.expect(";")?;
                let cond = self.expr()?;
                self.expect(";")?;
                let step = self.simple()?;
                self.expect(")")?;
                let body = self.block()?;
                Ok(Stmt::For(Box::new(init), cond, Box::new(step), body))
            }
            _ => {
                let s = self.simple()?;
                self.expect(";")?;
                Ok(s)
            }
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let c = self.binary(0)?;
        if self.eat("?") {
            let a = self.expr()?;
            self.expect(":")?;
            let b = self.expr()?;
            return Ok(Expr::Cond(Box::new(c), Box::new(a), Box::new(b)));
        }
        Ok(c)
    }

    fn binary(&mut self, level: usize) -> Result<Expr> {
        const LEVELS: [&[&str]; 7] =
            [&["||"], &["&&"], &["==", "!="], &["<", ">", "<=", ">="], &["<<", ">>"], &["+", "-"], &["*", "/", "%"]];
        if level == LEVELS.len() {
            return self.unary();
        }
        let mut lhs = self.binary(level + 1)?;
        loop {
            let op = match self.peek() {
                Some(Tok::P(p)) if LEVELS[level].contains(p) => *p,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.binary(level + 1)?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat("-") {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.eat("!") {
            return Ok(Expr::Not(Box::new(self.unary()?)));
        }
        if self.is_p("(") {
            if let Some(ty) = self.type_at(1) {
                if matches!(self.peek_at(2), Some(Tok::P(")"))) {
                    self.pos += 3;
                    return Ok(Expr::Cast(ty, Box::new(self.unary()?)));
                }
            }
            self.pos += 1;
            let e = self.expr()?;
            self.expect(")")?;
            return Ok(e);
        }
        match self.next()? {
            Tok::Num(s) => parse_number(&s).map(Expr::Lit),
            Tok::Ident(name) => {
                if self.eat("(") {
                    let mut args = Vec::new();
                    if !self.eat(")") {
                        loop {
                            args.push(self.expr()?);
                            if self.eat(")") {
                                break;
                            }
                            self.expect(",")?;
                        }
                    }
                    Ok(Expr::Call(name, args))
                } else if self.eat("[") {
                    let i = self.expr()?;
                    self.expect("]")?;
                    Ok(Expr::Index(name, Box::new(i)))
                } else {
                    Ok(Expr::Var(name))
                }
            }
            t => Err(err(format!("unexpected token {t:?}"))),
        }
    }
}

fn parse_number(s: &str) -> Result<V> {
    let body = s.trim_end_matches(['f', 'F', 'u', 'U', 'l', 'L']);
    if body.contains('.') || s.ends_with(['f', 'F']) {
        let x: f64 = body.parse().map_err(|_| err(format!("bad literal {s}")))?;
        Ok(V::F(round_float(x, false), false))
    } else {
        let x: i128 = body.parse().map_err(|_| err(format!("bad literal {s}")))?;
        let unsigned = s.contains(['u', 'U']);
        Ok(V::I(x, 32, !unsigned))
    }
}

fn base_types() -> HashMap<String, Ty> {
    let mut m = HashMap::new();
    let int = |bits, signed| Ty::Int { bits, signed };
    for (names, ty) in [
        (&["int8_t", "char", "signed char"][..], int(8, true)),
        (&["uint8_t", "uchar", "unsigned char"][..], int(8, false)),
        (&["int16_t", "short"][..], int(16, true)),
        (&["uint16_t", "ushort", "unsigned short"][..], int(16, false)),
        (&["int32_t", "int"][..], int(32, true)),
        (&["uint32_t", "uint", "unsigned int"][..], int(32, false)),
        (&["int64_t", "long", "long long"][..], int(64, true)),
        (&["uint64_t", "ulong", "unsigned long long"][..], int(64, false)),
        (&["float"][..], Ty::F32),
        (&["half"][..], Ty::F16),
    ] {
        for n in names {
            m.insert(n.to_string(), ty);
        }
    }
    m
}

/// A parsed program: its type aliases and kernels.
#[derive(Debug, Clone)]
pub struct Interpreter {
    types: HashMap<String, Ty>,
    kernels: Vec<Kernel>,
}

/// Kernel argument. Buffer elements are carried as `f64`, which holds every
/// 8/16-bit level and every binary16/binary32 value exactly.
#[derive(Debug, Clone, PartialEq)]
pub enum Arg {
    Int(i128),
    Float(f64),
    Buffer(Vec<f64>),
}

const QUALIFIERS: [&str; 5] = ["const", "__global", "__local", "__constant", "restrict"];

impl Interpreter {
    pub fn parse(source: &str) -> Result<Self> {
        let toks = tokenize(source)?;
        let mut types = base_types();
        let mut kernels = Vec::new();
        let mut i = 0;
        while i < toks.len() {
            match &toks[i] {
                Tok::Ident(k) if k == "typedef" => {
                    let end = toks[i..].iter().position(|t| *t == Tok::P(";")).ok_or_else(|| err("unterminated typedef"))? + i;
                    let words: Vec<&str> = toks[i + 1..end]
                        .iter()
                        .map(|t| match t {
                            Tok::Ident(s) => Ok(s.as_str()),
                            t => Err(err(format!("bad typedef token {t:?}"))),
                        })
                        .collect::<Result<_>>()?;
                    let (alias, base) = words.split_last().ok_or_else(|| err("empty typedef"))?;
                    let ty = *types.get(&base.join(" ")).ok_or_else(|| err(format!("unknown type '{}'", base.join(" "))))?;
                    types.entry(alias.to_string()).or_insert(ty);
                    i = end + 1;
                }
                Tok::Ident(name) if toks.get(i + 1) == Some(&Tok::P("(")) => {
                    let name = name.clone();
                    let close = toks[i..].iter().position(|t| *t == Tok::P(")")).ok_or_else(|| err("unterminated parameter list"))? + i;
                    let mut params = Vec::new();
                    for group in toks[i + 2..close].split(|t| *t == Tok::P(",")) {
                        if group.is_empty() {
                            continue;
                        }
                        let pointer = group.contains(&Tok::P("*"));
                        let words: Vec<&str> = group
                            .iter()
                            .filter_map(|t| match t {
                                Tok::Ident(s) if !QUALIFIERS.contains(&s.as_str()) => Some(s.as_str()),
                                _ => None,
                            })
                            .collect();
                        let (pname, base) = words.split_last().ok_or_else(|| err("empty parameter"))?;
                        let ty = *types.get(&base.join(" ")).ok_or_else(|| err(format!("unknown type '{}'", base.join(" "))))?;
                        params.push(Param { name: pname.to_string(), ty, pointer });
                    }
                    let mut p = Parser { toks: &toks, pos: close + 1, types: &types };
                    let body = p.block()?;
                    i = p.pos;
                    kernels.push(Kernel { name, params, body });
                }
                _ => i += 1,
            }
        }
        if kernels.is_empty() {
            return Err(err("no kernel found"));
        }
        Ok(Interpreter { types, kernels })
    }

    pub fn alias(&self, name: &str) -> Option<Ty> {
        self.types.get(name).copied()
    }

    pub fn params(&self, kernel: &str) -> Option<&[Param]> {
        self.kernels.iter().find(|k| k.name == kernel).map(|k| k.params.as_slice())
    }

    /// Runs `kernel` with positional `args`; buffers are updated in place.
    pub fn run(&self, kernel: &str, args: &mut [Arg]) -> Result<()> {
        let k = self.kernels.iter().find(|k| k.name == kernel).ok_or_else(|| err(format!("no kernel '{kernel}'")))?;
        if args.len() != k.params.len() {
            return Err(err(format!("{} expects {} arguments, got {}", k.name, k.params.len(), args.len())));
        }
        let mut env = Env { vars: HashMap::new(), bufs: HashMap::new(), steps: 0 };
        let mut slots = Vec::new();
        for (p, a) in k.params.iter().zip(args.iter_mut()) {
            match (p.pointer, a) {
                (true, Arg::Buffer(data)) => {
                    slots.push(p.name.clone());
                    env.bufs.insert(p.name.clone(), (p.ty, std::mem::take(data)));
                }
                (false, Arg::Int(x)) => {
                    env.vars.insert(p.name.clone(), (p.ty, convert(V::I(*x, 64, true), p.ty)));
                }
                (false, Arg::Float(x)) => {
                    env.vars.insert(p.name.clone(), (p.ty, convert(V::F(*x, false), p.ty)));
                }
                _ => return Err(err(format!("argument kind mismatch for '{}'", p.name))),
            }
        }
        let result = env.exec_all(&k.body);
        for (p, a) in k.params.iter().zip(args.iter_mut()) {
            if p.pointer {
                if let Some((_, data)) = env.bufs.remove(&p.name) {
                    *a = Arg::Buffer(data);
                }
            }
        }
        result
    }
}

const MAX_STEPS: u64 = 1 << 28;

struct Env {
    vars: HashMap<String, (Ty, V)>,
    bufs: HashMap<String, (Ty, Vec<f64>)>,
    steps: u64,
}

fn builtin_var(name: &str) -> Option<V> {
    match name {
        "blockIdx.x" | "threadIdx.x" => Some(V::I(0, 32, false)),
        "blockDim.x" | "gridDim.x" => Some(V::I(1, 32, false)),
        _ => None,
    }
}

fn load(ty: Ty, x: f64) -> V {
    match ty {
        Ty::Int { bits, signed } => V::I(x as i128, bits, signed),
        Ty::F32 => V::F(x, false),
        Ty::F16 => V::F(x, true),
    }
}

fn store(v: V) -> f64 {
    match v {
        V::I(x, ..) => x as f64,
        V::F(x, _) => x,
    }
}

impl Env {
    fn exec_all(&mut self, stmts: &[Stmt]) -> Result<()> {
        for s in stmts {
            self.exec(s)?;
        }
        Ok(())
    }

    fn exec(&mut self, s: &Stmt) -> Result<()> {
        self.steps += 1;
        if self.steps > MAX_STEPS {
            return Err(err("step limit exceeded"));
        }
        match s {
            Stmt::Decl(ty, name, e) => {
                let v = convert(self.eval(e)?, *ty);
                self.vars.insert(name.clone(), (*ty, v));
            }
            Stmt::Assign(target, op, e) => {
                let rhs = self.eval(e)?;
                let (ty, cur) = match target {
                    Target::Var(n) => *self.vars.get(n).ok_or_else(|| err(format!("undeclared '{n}'")))?,
                    Target::Index(n, i) => {
                        let idx = self.index(n, i)?;
                        let (ty, data) = &self.bufs[n];
                        (*ty, load(*ty, data[idx]))
                    }
                };
                let v = match *op {
                    "=" => rhs,
                    "+=" => binop("+", cur, rhs)?,
                    "-=" => binop("-", cur, rhs)?,
                    _ => unreachable!(),
                };
                let v = convert(v, ty);
                match target {
                    Target::Var(n) => {
                        self.vars.insert(n.clone(), (ty, v));
                    }
                    Target::Index(n, i) => {
                        let idx = self.index(n, i)?;
                        self.bufs.get_mut(n).expect("checked").1[idx] = store(v);
                    }
                }
            }
            Stmt::If(c, a, b) => {
                if truthy(self.eval(c)?) {
                    self.exec_all(a)?;
                } else {
                    self.exec_all(b)?;
                }
            }
            Stmt::For(init, cond, step, body) => {
                self.exec(init)?;
                while truthy(self.eval(cond)?) {
                    self.exec_all(body)?;
                    self.exec(step)?;
                }
            }
        }
        Ok(())
    }

    fn index(&mut self, name: &str, i: &Expr) -> Result<usize> {
        let idx = int_of(self.eval(i)?);
        let len = self.bufs.get(name).ok_or_else(|| err(format!("no buffer '{name}'")))?.1.len();
        if idx < 0 || idx as usize >= len {
            return Err(err(format!("{name}[{idx}] out of bounds ({len})")));
        }
        Ok(idx as usize)
    }

    fn eval(&mut self, e: &Expr) -> Result<V> {
        Ok(match e {
            Expr::Lit(v) => *v,
            Expr::Var(n) => match self.vars.get(n) {
                Some((_, v)) => *v,
                None => builtin_var(n).ok_or_else(|| err(format!("undeclared '{n}'")))?,
            },
            Expr::Index(n, i) => {
                let idx = self.index(n, i)?;
                let (ty, data) = &self.bufs[n];
                load(*ty, data[idx])
            }
            Expr::Cast(ty, x) => convert(self.eval(x)?, *ty),
            Expr::Neg(x) => match promote(self.eval(x)?) {
                V::I(v, bits, signed) => V::I(wrap(-v, bits, signed), bits, signed),
                V::F(v, h) => V::F(-v, h),
            },
            Expr::Not(x) => bool_val(!truthy(self.eval(x)?)),
            Expr::Bin(op, a, b) => {
                let a = self.eval(a)?;
                let b = self.eval(b)?;
                binop(op, a, b)?
            }
            Expr::Cond(c, a, b) => {
                let c = truthy(self.eval(c)?);
                let (a, b, _) = common(self.eval(a)?, self.eval(b)?);
                if c {
                    a
                } else {
                    b
                }
            }
            Expr::Call(name, args) => {
                let vals = args.iter().map(|a| self.eval(a)).collect::<Result<Vec<_>>>()?;
                match (name.as_str(), vals.as_slice()) {
                    ("max", [a, b]) | ("min", [a, b]) => {
                        let (a, b, _) = common(*a, *b);
                        let pick_a = match (a, b) {
                            (V::I(x, ..), V::I(y, ..)) => if name == "max" { x >= y } else { x <= y },
                            (V::F(x, _), V::F(y, _)) => if name == "max" { x >= y } else { x <= y },
                            _ => unreachable!("common type"),
                        };
                        if pick_a {
                            a
                        } else {
                            b
                        }
                    }
                    ("get_global_id", [_]) => V::I(0, 32, false),
                    ("get_global_size", [_]) => V::I(1, 32, false),
                    _ => return Err(err(format!("unknown function {name}/{}", vals.len()))),
                }
            }
        })
    }
}

fn binop(op: &str, a: V, b: V) -> Result<V> {
    if op == "<<" || op == ">>" {
        let (V::I(x, bits, signed), V::I(k, ..)) = (promote(a), promote(b)) else {
            return Err(err("shift of a non-integer"));
        };
        if k < 0 || k >= bits as i128 {
            return Err(err(format!("shift by {k} of a {bits}-bit value")));
        }
        let r = if op == "<<" { x << k } else { x >> k };
        return Ok(V::I(wrap(r, bits, signed), bits, signed));
    }
    if op == "&&" || op == "||" {
        let (x, y) = (truthy(a), truthy(b));
        return Ok(bool_val(if op == "&&" { x && y } else { x || y }));
    }
    let (a, b, ty) = common(a, b);
    Ok(match (a, b) {
        (V::I(x, bits, signed), V::I(y, ..)) => {
            let r = match op {
                "+" => x + y,
                "-" => x - y,
                "*" => x * y,
                "/" | "%" if y == 0 => return Err(err("division by zero")),
                "/" => x / y,
                "%" => x % y,
                "<" => return Ok(bool_val(x < y)),
                ">" => return Ok(bool_val(x > y)),
                "<=" => return Ok(bool_val(x <= y)),
                ">=" => return Ok(bool_val(x >= y)),
                "==" => return Ok(bool_val(x == y)),
                "!=" => return Ok(bool_val(x != y)),
                _ => return Err(err(format!("operator {op}"))),
            };
            V::I(wrap(r, bits, signed), bits, signed)
        }
        (V::F(x, _), V::F(y, _)) => {
            let r = match op {
                "+" => x + y,
                "-" => x - y,
                "*" => x * y,
                "/" => x / y,
                "<" => return Ok(bool_val(x < y)),
                ">" => return Ok(bool_val(x > y)),
                "<=" => return Ok(bool_val(x <= y)),
                ">=" => return Ok(bool_val(x >= y)),
                "==" => return Ok(bool_val(x == y)),
                "!=" => return Ok(bool_val(x != y)),
                _ => return Err(err(format!("operator {op} on floats"))),
            };
            convert(V::F(r, false), ty)
        }
        _ => unreachable!("common type"),
    })
}

/// Runs an emitted integer ReLU program over stored levels.
pub fn run_relu_quant(program: &KernelProgram, levels: &[u16], rq: &RequantParams) -> Result<Vec<u16>> {
    let interp = Interpreter::parse(&program.source)?;
    let mut args = vec![
        Arg::Int(levels.len() as i128),
        Arg::Buffer(levels.iter().map(|&l| l as f64).collect()),
        Arg::Buffer(vec![0.0; levels.len()]),
        Arg::Int(rq.shift_bits as i128),
        Arg::Int(rq.in_zero as i128),
        Arg::Int(rq.mult as i128),
        Arg::Int(rq.shift as i128),
        Arg::Int(rq.out_zero as i128),
        Arg::Int(rq.out_min as i128),
        Arg::Int(rq.out_max as i128),
    ];
    interp.run(&program.name, &mut args)?;
    match &args[2] {
        Arg::Buffer(out) => Ok(out.iter().map(|&v| v as u16).collect()),
        _ => unreachable!(),
    }
}

/// Runs an emitted float ReLU program. FP16 programs round inputs and
/// outputs to binary16.
pub fn run_relu_float(program: &KernelProgram, xs: &[f32], negative_slope: f32) -> Result<Vec<f32>> {
    let interp = Interpreter::parse(&program.source)?;
    let mut args = vec![
        Arg::Int(xs.len() as i128),
        Arg::Buffer(xs.iter().map(|&x| x as f64).collect()),
        Arg::Buffer(vec![0.0; xs.len()]),
        Arg::Float(negative_slope as f64),
    ];
    if interp.alias("Dtype") == Some(Ty::F16) {
        if let Arg::Buffer(b) = &mut args[1] {
            b.iter_mut().for_each(|v| *v = round_float(*v, true));
        }
    }
    interp.run(&program.name, &mut args)?;
    match &args[2] {
        Arg::Buffer(out) => Ok(out.iter().map(|&v| v as f32).collect()),
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codegen::{emit_relu_program, Dialect};
    use crate::dtype::DataType;
    use crate::fp16::fp16_round;
    use crate::ops::relu_quant_levels;
    use crate::quant::{estimate_params, scale_quant_vals};

    fn run_expr(decls: &str, expr: &str) -> Result<V> {
        let src = format!("void k(int64_t* out) {{ {decls} out[0] = 0; }}");
        let i = Interpreter::parse(&src)?;
        let mut env = Env { vars: HashMap::new(), bufs: HashMap::new(), steps: 0 };
        let mut args = vec![Arg::Buffer(vec![0.0])];
        i.run("k", &mut args)?;
        let toks = tokenize(expr)?;
        let mut p = Parser { toks: &toks, pos: 0, types: &i.types };
        let e = p.expr()?;
        env.eval(&e)
    }

    #[test]
    fn c_integer_semantics() {
        assert_eq!(run_expr("", "(int8_t)200").unwrap(), V::I(-56, 8, true));
        assert_eq!(run_expr("", "(uint8_t)-1").unwrap(), V::I(255, 8, false));
        // promotion to int before subtraction
        assert_eq!(run_expr("", "(uint8_t)3 - (uint8_t)5").unwrap(), V::I(-2, 32, true));
        assert_eq!(run_expr("", "(uint32_t)3 - 5").unwrap(), V::I(4294967294, 32, false));
        assert_eq!(run_expr("", "-7 / 2").unwrap(), V::I(-3, 32, true));
        assert_eq!(run_expr("", "-7 >> 1").unwrap(), V::I(-4, 32, true));
        assert_eq!(run_expr("", "(int64_t)1 << 40").unwrap(), V::I(1 << 40, 64, true));
        assert!(run_expr("", "1 << 32").is_err());
        assert!(run_expr("", "1 / 0").is_err());
        assert_eq!(run_expr("", "max((int16_t)-3, (int16_t)0)").unwrap(), V::I(0, 32, true));
        assert_eq!(run_expr("", "2 > 1 ? 10 : 20").unwrap(), V::I(10, 32, true));
    }

    #[test]
    fn float_relu_program_matches_reference() {
        let xs: Vec<f32> = (-20..20).map(|v| v as f32 * 0.37).collect();
        for dialect in [Dialect::OpenCl, Dialect::Cuda] {
            let p = emit_relu_program(DataType::Fp32, dialect).unwrap();
            let got = run_relu_float(&p, &xs, 0.1).unwrap();
            let want: Vec<f32> = xs.iter().map(|&x| if x > 0.0 { x } else { x * 0.1 }).collect();
            assert_eq!(got, want);

            let p = emit_relu_program(DataType::Fp16, dialect).unwrap();
            let got = run_relu_float(&p, &xs, 0.1).unwrap();
            let want: Vec<f32> = xs
                .iter()
                .map(|&x| {
                    let x = fp16_round(x);
                    fp16_round(if x > 0.0 { x } else { x * fp16_round(0.1) })
                })
                .collect();
            // OpenCL receives the slope as float, CUDA as half
            if dialect == Dialect::Cuda {
                assert_eq!(got, want);
            } else {
                let want32: Vec<f32> =
                    xs.iter().map(|&x| { let x = fp16_round(x); fp16_round(if x > 0.0 { x } else { x * 0.1 }) }).collect();
                assert_eq!(got, want32);
            }
        }
    }

    #[test]
    fn int_relu_program_matches_reference() {
        for dtype in [DataType::Int8Q, DataType::Int16Q] {
            let iq = estimate_params(-3.0, 5.0, dtype).unwrap();
            let oq = estimate_params(0.0, 5.0, dtype).unwrap();
            let rq = scale_quant_vals(&iq, &oq, crate::quant::operator_shift_bits(dtype)).unwrap().kernel_launch();
            let levels: Vec<u16> = (0..=255u16).map(|v| if dtype == DataType::Int16Q { v * 257 } else { v }).collect();
            for dialect in [Dialect::OpenCl, Dialect::Cuda] {
                let p = emit_relu_program(dtype, dialect).unwrap();
                assert_eq!(run_relu_quant(&p, &levels, &rq).unwrap(), relu_quant_levels(&levels, dtype, &rq).unwrap());
            }
        }
    }

    #[test]
    fn negative_residual_shift_branch() {
        let rq = RequantParams { shift_bits: 10, mult: 700, shift: -3, in_zero: 4, out_zero: 2, out_min: 0, out_max: 255 };
        let levels: Vec<u16> = (0..=255).collect();
        let p = emit_relu_program(DataType::Int8Q, Dialect::Cuda).unwrap();
        assert_eq!(run_relu_quant(&p, &levels, &rq).unwrap(), relu_quant_levels(&levels, DataType::Int8Q, &rq).unwrap());
    }

    #[test]
    fn malformed_sources() {
        assert!(Interpreter::parse("typedef foo bar;").is_err());
        assert!(Interpreter::parse("void k(int* a) { a[0] = ; }").is_err());
        let i = Interpreter::parse("void k(int* a) { a[3] = 1; }").unwrap();
        assert!(i.run("k", &mut [Arg::Buffer(vec![0.0])]).is_err());
        assert!(i.run("k", &mut [Arg::Int(1)]).is_err());
    }
}
