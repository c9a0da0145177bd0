//! Arithmetic expressions for user-defined fields.
//!
//! Grammar: numbers, `pi`, the variables `x`, `t`, `y` (= `y1`), `y1..yn`,
//! named parameters, `+ - * / ^`, parentheses and the functions `sin cos exp
//! ln sqrt atan tanh`. Expressions evaluate over any [`Scalar`], so custom
//! fields get exact jets.

use super::{DomainX, Rhs, Smooth, SystemError, SystemSpec};
use crate::jet::Scalar;
use std::collections::BTreeMap;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
    Atan,
    Tanh,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    /// Component of the state `z = (x, y1, ..)`.
    Var(usize),
    Time,
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    PowI(Box<Expr>, i32),
    PowF(Box<Expr>, f64),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl Expr {
    pub fn eval<S: Scalar>(&self, t: f64, z: &[S]) -> S {
        match self {
            Expr::Num(v) => S::cst(*v),
            Expr::Var(i) => z[*i],
            Expr::Time => S::cst(t),
            Expr::Neg(a) => -a.eval(t, z),
            Expr::Add(a, b) => a.eval(t, z) + b.eval(t, z),
            Expr::Sub(a, b) => a.eval(t, z) - b.eval(t, z),
            Expr::Mul(a, b) => a.eval(t, z) * b.eval(t, z),
            Expr::Div(a, b) => a.eval(t, z) / b.eval(t, z),
            Expr::PowI(a, n) => a.eval(t, z).powi(*n),
            Expr::PowF(a, p) => a.eval(t, z).powf(*p),
            Expr::Pow(a, b) => (b.eval(t, z) * a.eval(t, z).ln()).exp(),
            Expr::Call(f, a) => {
                let v = a.eval(t, z);
                match f {
                    Func::Sin => v.sin(),
                    Func::Cos => v.cos(),
                    Func::Exp => v.exp(),
                    Func::Ln => v.ln(),
                    Func::Sqrt => v.sqrt(),
                    Func::Atan => v.atan(),
                    Func::Tanh => v.tanh(),
                }
            }
        }
    }

    fn constant(&self) -> Option<f64> {
        match self {
            Expr::Num(v) => Some(*v),
            Expr::Neg(a) => a.constant().map(|v| -v),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn lex(src: &str) -> Result<Vec<Tok>, SystemError> {
    let mut out = Vec::new();
    let chars: Vec<char> = src.chars().collect();
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
            let s: String = chars[start..i].iter().collect();
            let v = s.parse::<f64>().map_err(|_| SystemError::Expr(format!("bad number `{s}`")))?;
            out.push(Tok::Num(v));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^()".contains(c) {
            out.push(Tok::Op(c));
            i += 1;
        } else {
            return Err(SystemError::Expr(format!("unexpected character `{c}`")));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Tok>,
    pos: usize,
    dim_y: usize,
    params: &'a BTreeMap<String, f64>,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Op(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn sum(&mut self) -> Result<Expr, SystemError> {
        let mut lhs = self.product()?;
        loop {
            if self.eat('+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.product()?));
            } else if self.eat('-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.product()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn product(&mut self) -> Result<Expr, SystemError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat('/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, SystemError> {
        if self.eat('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.eat('+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, SystemError> {
        let base = self.atom()?;
        if !self.eat('^') {
            return Ok(base);
        }
        let exp = self.unary()?;
        Ok(match exp.constant() {
            Some(p) if p.fract() == 0.0 && p.abs() < 64.0 => Expr::PowI(Box::new(base), p as i32),
            Some(p) => Expr::PowF(Box::new(base), p),
            None => Expr::Pow(Box::new(base), Box::new(exp)),
        })
    }

    fn atom(&mut self) -> Result<Expr, SystemError> {
        let tok = self.peek().cloned().ok_or_else(|| SystemError::Expr("unexpected end of expression".into()))?;
        self.pos += 1;
        match tok {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::Op('(') => {
                let e = self.sum()?;
                if !self.eat(')') {
                    return Err(SystemError::Expr("missing `)`".into()));
                }
                Ok(e)
            }
            Tok::Op(c) => Err(SystemError::Expr(format!("unexpected `{c}`"))),
            Tok::Ident(name) => {
                let func = match name.as_str() {
                    "sin" => Some(Func::Sin),
                    "cos" => Some(Func::Cos),
                    "exp" => Some(Func::Exp),
                    "ln" | "log" => Some(Func::Ln),
                    "sqrt" => Some(Func::Sqrt),
                    "atan" => Some(Func::Atan),
                    "tanh" => Some(Func::Tanh),
                    _ => None,
                };
                if let Some(f) = func {
                    if !self.eat('(') {
                        return Err(SystemError::Expr(format!("`{name}` needs an argument in parentheses")));
                    }
                    let arg = self.sum()?;
                    if !self.eat(')') {
                        return Err(SystemError::Expr("missing `)`".into()));
                    }
                    return Ok(Expr::Call(f, Box::new(arg)));
                }
                self.variable(&name)
            }
        }
    }

    fn variable(&self, name: &str) -> Result<Expr, SystemError> {
        match name {
            "x" => return Ok(Expr::Var(0)),
            "t" => return Ok(Expr::Time),
            "y" if self.dim_y >= 1 => return Ok(Expr::Var(1)),
            "pi" => return Ok(Expr::Num(std::f64::consts::PI)),
            _ => {}
        }
        if let Some(v) = self.params.get(name) {
            return Ok(Expr::Num(*v));
        }
        if let Some(idx) = name.strip_prefix('y').and_then(|s| s.parse::<usize>().ok()) {
            if idx >= 1 && idx <= self.dim_y {
                return Ok(Expr::Var(idx));
            }
        }
        Err(SystemError::Expr(format!("unknown name `{name}`")))
    }
}

/// Parses `src` for a state with `dim_y` vertical components.
pub fn parse(src: &str, dim_y: usize, params: &BTreeMap<String, f64>) -> Result<Expr, SystemError> {
    let mut p = Parser { toks: lex(src)?, pos: 0, dim_y, params };
    let e = p.sum()?;
    if p.pos != p.toks.len() {
        return Err(SystemError::Expr(format!("trailing input in `{src}`")));
    }
    Ok(e)
}

struct ExprField {
    exprs: Vec<Expr>,
}

impl Rhs for ExprField {
    fn dim(&self) -> usize {
        self.exprs.len()
    }
    fn rhs<S: Scalar>(&self, t: f64, z: &[S], out: &mut [S]) {
        for (o, e) in out.iter_mut().zip(&self.exprs) {
            *o = e.eval(t, z);
        }
    }
}

/// Builds a system from textual `v_X` and `v_Y` components.
pub fn expr_system(
    name: &str,
    domain: DomainX,
    vx: &str,
    vy: &[String],
    params: &BTreeMap<String, f64>,
) -> Result<SystemSpec, SystemError> {
    if vy.is_empty() {
        return Err(SystemError::Expr("at least one vertical component is required".into()));
    }
    let dim_y = vy.len();
    let mut exprs = vec![parse(vx, dim_y, params)?];
    for s in vy {
        exprs.push(parse(s, dim_y, params)?);
    }
    let mut spec = SystemSpec::new(name, domain, dim_y, Arc::new(Smooth(ExprField { exprs })));
    spec.params = params.clone();
    spec.epsilon = params.get("eps").copied().unwrap_or(0.0);
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::{Jet, Taylor3};

    fn ev(src: &str, x: f64, y: f64) -> f64 {
        let mut params = BTreeMap::new();
        params.insert("lam".to_string(), -2.0);
        parse(src, 1, &params).unwrap().eval(0.5, &[x, y])
    }

    #[test]
    fn precedence_and_functions() {
        assert_eq!(ev("1 + 2 * 3", 0.0, 0.0), 7.0);
        assert_eq!(ev("-2^2", 0.0, 0.0), -4.0);
        assert!((ev("2^3^2", 0.0, 0.0) - 512.0).abs() < 1e-12);
        assert_eq!(ev("(1 + 2) * 3", 0.0, 0.0), 9.0);
        assert!((ev("lam*y + 0.1*sin(x)", 1.0, 0.3) - (-0.6 + 0.1 * 1.0f64.sin())).abs() < 1e-15);
        assert!((ev("x^2.5", 2.0, 0.0) - 2.0f64.powf(2.5)).abs() < 1e-12);
        assert_eq!(ev("t", 0.0, 0.0), 0.5);
        assert!((ev("2e-1*pi", 0.0, 0.0) - 0.2 * std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn errors_name_the_problem() {
        let p = BTreeMap::new();
        assert!(matches!(parse("z + 1", 1, &p), Err(SystemError::Expr(m)) if m.contains("`z`")));
        assert!(parse("sin x", 1, &p).is_err());
        assert!(parse("(1 + 2", 1, &p).is_err());
        assert!(parse("1 2", 1, &p).is_err());
        assert!(parse("y3", 2, &p).is_err());
    }

    #[test]
    fn jets_flow_through_expressions() {
        let e = parse("x^3 + sin(x)", 0, &BTreeMap::new()).unwrap();
        let x: Taylor3 = Jet::variable(0.7, 1.0);
        let v = e.eval(0.0, &[x]);
        assert!((v.derivative(2) - (6.0 * 0.7 - 0.7f64.sin())).abs() < 1e-12);
        assert!((v.derivative(3) - (6.0 - 0.7f64.cos())).abs() < 1e-12);
    }
}
