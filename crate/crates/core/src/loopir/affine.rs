use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

/// `Σ coef·name + constant`, kept canonical (no zero coefficients) so that
/// structural equality is semantic equality.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct AffineExpr {
    pub terms: BTreeMap<String, i64>,
    pub constant: i64,
}

impl AffineExpr {
    pub fn constant(c: i64) -> Self {
        AffineExpr { terms: BTreeMap::new(), constant: c }
    }

    pub fn var(name: &str) -> Self {
        AffineExpr::term(name, 1)
    }

    pub fn term(name: &str, coef: i64) -> Self {
        let mut e = AffineExpr::constant(0);
        e.add_term(name, coef);
        e
    }

    pub fn add_term(&mut self, name: &str, coef: i64) {
        let c = self.terms.entry(name.to_string()).or_insert(0);
        *c += coef;
        if *c == 0 {
            self.terms.remove(name);
        }
    }

    pub fn coeff(&self, name: &str) -> i64 {
        self.terms.get(name).copied().unwrap_or(0)
    }

    pub fn uses(&self, name: &str) -> bool {
        self.terms.contains_key(name)
    }

    pub fn vars(&self) -> impl Iterator<Item = &str> {
        self.terms.keys().map(String::as_str)
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    /// Replaces `name` by `with`.
    pub fn substitute(&self, name: &str, with: &AffineExpr) -> AffineExpr {
        match self.terms.get(name) {
            None => self.clone(),
            Some(&c) => {
                let mut rest = self.clone();
                rest.terms.remove(name);
                rest + with.clone() * c
            }
        }
    }

    /// Substitutes every symbol that `env` knows, leaving the others.
    pub fn bind(&self, env: &BTreeMap<String, i64>) -> AffineExpr {
        let mut out = AffineExpr::constant(self.constant);
        for (n, &c) in &self.terms {
            match env.get(n) {
                Some(v) => out.constant += c * v,
                None => out.add_term(n, c),
            }
        }
        out
    }

    pub fn rename(&self, from: &str, to: &str) -> AffineExpr {
        self.substitute(from, &AffineExpr::var(to))
    }
}

impl Add for AffineExpr {
    type Output = AffineExpr;
    fn add(mut self, rhs: AffineExpr) -> AffineExpr {
        for (n, c) in rhs.terms {
            self.add_term(&n, c);
        }
        self.constant += rhs.constant;
        self
    }
}

impl Sub for AffineExpr {
    type Output = AffineExpr;
    fn sub(self, rhs: AffineExpr) -> AffineExpr {
        self + (-rhs)
    }
}

impl Neg for AffineExpr {
    type Output = AffineExpr;
    fn neg(self) -> AffineExpr {
        self * -1
    }
}

impl Mul<i64> for AffineExpr {
    type Output = AffineExpr;
    fn mul(self, k: i64) -> AffineExpr {
        if k == 0 {
            return AffineExpr::constant(0);
        }
        AffineExpr {
            terms: self.terms.into_iter().map(|(n, c)| (n, c * k)).collect(),
            constant: self.constant * k,
        }
    }
}

impl Add<i64> for AffineExpr {
    type Output = AffineExpr;
    fn add(mut self, k: i64) -> AffineExpr {
        self.constant += k;
        self
    }
}

impl fmt::Display for AffineExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (n, &c) in &self.terms {
            let (sign, mag) = if c < 0 { ("-", -c) } else { ("+", c) };
            if first {
                if c < 0 {
                    f.write_str("-")?;
                }
            } else {
                write!(f, " {sign} ")?;
            }
            if mag == 1 {
                write!(f, "{n}")?;
            } else {
                write!(f, "{mag}*{n}")?;
            }
            first = false;
        }
        if first {
            write!(f, "{}", self.constant)
        } else if self.constant > 0 {
            write!(f, " + {}", self.constant)
        } else if self.constant < 0 {
            write!(f, " - {}", -self.constant)
        } else {
            Ok(())
        }
    }
}

/// Integer expression over kernel parameters, used for derived dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SymExpr {
    Const(i64),
    Param(String),
    Add(Box<SymExpr>, Box<SymExpr>),
    Sub(Box<SymExpr>, Box<SymExpr>),
    Mul(Box<SymExpr>, Box<SymExpr>),
    /// Floor division; the divisor must evaluate positive.
    FloorDiv(Box<SymExpr>, Box<SymExpr>),
    Max(Box<SymExpr>, Box<SymExpr>),
}

impl SymExpr {
    pub fn param(n: &str) -> Self {
        SymExpr::Param(n.to_string())
    }

    pub fn add(a: SymExpr, b: SymExpr) -> Self {
        SymExpr::Add(Box::new(a), Box::new(b))
    }

    pub fn sub(a: SymExpr, b: SymExpr) -> Self {
        SymExpr::Sub(Box::new(a), Box::new(b))
    }

    pub fn mul(a: SymExpr, b: SymExpr) -> Self {
        SymExpr::Mul(Box::new(a), Box::new(b))
    }

    pub fn floor_div(a: SymExpr, b: SymExpr) -> Self {
        SymExpr::FloorDiv(Box::new(a), Box::new(b))
    }

    pub fn max(a: SymExpr, b: SymExpr) -> Self {
        SymExpr::Max(Box::new(a), Box::new(b))
    }

    /// Evaluates under `env`; `Err` carries the first unbound name.
    pub fn eval(&self, env: &BTreeMap<String, i64>) -> Result<i64, String> {
        Ok(match self {
            SymExpr::Const(c) => *c,
            SymExpr::Param(n) => *env.get(n).ok_or_else(|| n.clone())?,
            SymExpr::Add(a, b) => a.eval(env)? + b.eval(env)?,
            SymExpr::Sub(a, b) => a.eval(env)? - b.eval(env)?,
            SymExpr::Mul(a, b) => a.eval(env)? * b.eval(env)?,
            SymExpr::FloorDiv(a, b) => {
                let d = b.eval(env)?;
                if d <= 0 {
                    return Err(format!("non-positive divisor in {self}"));
                }
                a.eval(env)?.div_euclid(d)
            }
            SymExpr::Max(a, b) => a.eval(env)?.max(b.eval(env)?),
        })
    }
}

impl fmt::Display for SymExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SymExpr::Const(c) => write!(f, "{c}"),
            SymExpr::Param(n) => f.write_str(n),
            SymExpr::Add(a, b) => write!(f, "({a} + {b})"),
            SymExpr::Sub(a, b) => write!(f, "({a} - {b})"),
            SymExpr::Mul(a, b) => write!(f, "({a} * {b})"),
            SymExpr::FloorDiv(a, b) => write!(f, "({a} / {b})"),
            SymExpr::Max(a, b) => write!(f, "max({a}, {b})"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form_drops_zero_terms() {
        let a = AffineExpr::var("oy") * 2 + AffineExpr::var("ky") - AffineExpr::var("ky");
        assert_eq!(a, AffineExpr::term("oy", 2));
        assert_eq!(a.to_string(), "2*oy");
        let b = AffineExpr::var("x") - AffineExpr::var("PT") + (-3);
        assert_eq!(b.to_string(), "-PT + x - 3");
    }

    #[test]
    fn substitution_and_binding() {
        // x -> 4*xo + xi
        let e = AffineExpr::term("x", 3) + 1;
        let s = e.substitute("x", &(AffineExpr::term("xo", 4) + AffineExpr::var("xi")));
        assert_eq!(s.coeff("xo"), 12);
        assert_eq!(s.coeff("xi"), 3);
        let env = BTreeMap::from([("xo".to_string(), 2), ("xi".to_string(), 1)]);
        assert_eq!(s.bind(&env), AffineExpr::constant(28));
    }

    #[test]
    fn sym_eval() {
        let oh = SymExpr::add(
            SymExpr::floor_div(
                SymExpr::sub(SymExpr::param("H"), SymExpr::Const(5)),
                SymExpr::Const(1),
            ),
            SymExpr::Const(1),
        );
        let env = BTreeMap::from([("H".to_string(), 28)]);
        assert_eq!(oh.eval(&env), Ok(24));
        assert_eq!(oh.eval(&BTreeMap::new()), Err("H".to_string()));
    }
}
