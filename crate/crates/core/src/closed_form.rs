//! Exact analytic descriptors for forward curves.
//!
//! A [`ClosedForm`] is a finite sum of pieces, each either an
//! exponential-polynomial term `c·x^p·e^{-λx}` or an exponential-rational
//! piece `P(u)/(u + c)^n` with `u = e^{a x}` (the shape of the CIR forward
//! basis). Both kinds are closed under differentiation and right shifts, so
//! the generator `A = d/dx` and the semigroup `S(t)` act exactly on every
//! curve that carries a descriptor. Products and antiderivatives are exact
//! for exponential-polynomial sums and for rational pieces sharing one
//! denominator, when the integral has no logarithmic part.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Piece {
    /// `coeff · x^degree · e^{-decay·x}`
    Term { coeff: f64, degree: u32, decay: f64 },
    /// `Σ_k numer[k]·u^k / (u + offset)^power` with `u = e^{rate·x}`
    Rational {
        rate: f64,
        offset: f64,
        power: u32,
        numer: Vec<f64>,
    },
}

impl Piece {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Piece::Term { coeff, degree, decay } => {
                coeff * x.powi(*degree as i32) * (-decay * x).exp()
            }
            Piece::Rational { rate, offset, power, numer } => {
                // Divide numerator and denominator by u^power to keep the
                // exponentials bounded for large rate·x.
                let ax = rate * x;
                let denom = (1.0 + offset * (-ax).exp()).powi(*power as i32);
                let n = *power as f64;
                let num: f64 = numer
                    .iter()
                    .enumerate()
                    .map(|(k, p)| p * (ax * (k as f64 - n)).exp())
                    .sum();
                num / denom
            }
        }
    }

    fn is_zero(&self) -> bool {
        match self {
            Piece::Term { coeff, .. } => *coeff == 0.0,
            Piece::Rational { numer, .. } => numer.iter().all(|p| *p == 0.0),
        }
    }

    fn scaled(&self, s: f64) -> Piece {
        match self {
            Piece::Term { coeff, degree, decay } => Piece::Term {
                coeff: coeff * s,
                degree: *degree,
                decay: *decay,
            },
            Piece::Rational { rate, offset, power, numer } => Piece::Rational {
                rate: *rate,
                offset: *offset,
                power: *power,
                numer: numer.iter().map(|p| p * s).collect(),
            },
        }
    }

    fn derivative(&self) -> Vec<Piece> {
        match self {
            Piece::Term { coeff, degree, decay } => {
                let mut out = Vec::with_capacity(2);
                if *degree > 0 {
                    out.push(Piece::Term {
                        coeff: coeff * *degree as f64,
                        degree: degree - 1,
                        decay: *decay,
                    });
                }
                if *decay != 0.0 {
                    out.push(Piece::Term {
                        coeff: -coeff * decay,
                        degree: *degree,
                        decay: *decay,
                    });
                }
                out
            }
            Piece::Rational { rate, offset, power, numer } => {
                // d/dx = a·u·d/du;  d/du[P/(u+c)^n] = (P'(u+c) - nP)/(u+c)^{n+1}
                let n = *power as f64;
                let deg = numer.len();
                let mut inner = vec![0.0; deg + 1];
                for (k, p) in numer.iter().enumerate().skip(1) {
                    let dp = p * k as f64;
                    inner[k] += dp; // u·P'
                    inner[k - 1] += offset * dp; // c·P'
                }
                for (k, p) in numer.iter().enumerate() {
                    inner[k] -= n * p;
                }
                let mut q = vec![0.0; deg + 2];
                for (k, v) in inner.iter().enumerate() {
                    q[k + 1] = rate * v;
                }
                vec![Piece::Rational {
                    rate: *rate,
                    offset: *offset,
                    power: power + 1,
                    numer: q,
                }]
            }
        }
    }

    fn shifted(&self, t: f64) -> Vec<Piece> {
        match self {
            Piece::Term { coeff, degree, decay } => {
                let base = coeff * (-decay * t).exp();
                let p = *degree;
                (0..=p)
                    .map(|k| Piece::Term {
                        coeff: base * binomial(p, k) * t.powi((p - k) as i32),
                        degree: k,
                        decay: *decay,
                    })
                    .collect()
            }
            Piece::Rational { rate, offset, power, numer } => {
                let n = *power as f64;
                vec![Piece::Rational {
                    rate: *rate,
                    offset: offset * (-rate * t).exp(),
                    power: *power,
                    numer: numer
                        .iter()
                        .enumerate()
                        .map(|(k, p)| p * (rate * t * (k as f64 - n)).exp())
                        .collect(),
                }]
            }
        }
    }
}

fn piece_product(a: &Piece, b: &Piece) -> Option<Piece> {
    match (a, b) {
        (
            Piece::Term { coeff: c1, degree: d1, decay: l1 },
            Piece::Term { coeff: c2, degree: d2, decay: l2 },
        ) => Some(Piece::Term {
            coeff: c1 * c2,
            degree: d1 + d2,
            decay: l1 + l2,
        }),
        (r @ Piece::Rational { .. }, Piece::Term { coeff, degree: 0, decay })
        | (Piece::Term { coeff, degree: 0, decay }, r @ Piece::Rational { .. })
            if *decay == 0.0 =>
        {
            Some(r.scaled(*coeff))
        }
        (
            Piece::Rational { rate, offset, power, numer },
            Piece::Rational { rate: r2, offset: o2, power: p2, numer: n2 },
        ) if rate.to_bits() == r2.to_bits() && offset.to_bits() == o2.to_bits() => {
            let mut q = vec![0.0; numer.len() + n2.len() - 1];
            for (i, x) in numer.iter().enumerate() {
                for (j, y) in n2.iter().enumerate() {
                    q[i + j] += x * y;
                }
            }
            Some(Piece::Rational {
                rate: *rate,
                offset: *offset,
                power: power + p2,
                numer: q,
            })
        }
        _ => None,
    }
}

/// An antiderivative (up to a constant) of `P(u)/(u + c)^n`, `u = e^{ax}`.
/// With `dx = du/(a·u)` this needs `P(0) = 0`; writing `P(u)/u` in powers
/// of `v = u + c`, the `v^{n-1}` coefficient must vanish (it integrates to
/// a logarithm).
fn rational_antiderivative(rate: f64, offset: f64, power: u32, numer: &[f64]) -> Option<Piece> {
    if rate == 0.0 || numer.is_empty() {
        return None;
    }
    let scale = numer.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if numer[0].abs() > 1e-14 * scale {
        return None;
    }
    let m = &numer[1..];
    let e: Vec<f64> = (0..m.len())
        .map(|j| {
            (j..m.len())
                .map(|k| m[k] * binomial(k as u32, j as u32) * (-offset).powi((k - j) as i32))
                .sum()
        })
        .collect();
    let p = power as i64;
    let emax = e.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if p >= 1 && ((p - 1) as usize) < e.len() && e[(p - 1) as usize].abs() > 1e-12 * emax {
        return None;
    }
    // F = Σ_j f_j v^{j-n+1} written over (u + c)^P
    let big_p = power.saturating_sub(1) as i64;
    let mut out: Vec<f64> = Vec::new();
    for (j, ej) in e.iter().enumerate() {
        let expo = j as i64 - p + 1;
        if expo == 0 {
            continue;
        }
        let f = ej / (rate * expo as f64);
        let top = (expo + big_p) as u32;
        if out.len() < top as usize + 1 {
            out.resize(top as usize + 1, 0.0);
        }
        for i in 0..=top {
            out[i as usize] += f * binomial(top, i) * offset.powi((top - i) as i32);
        }
    }
    Some(Piece::Rational {
        rate,
        offset,
        power: big_p as u32,
        numer: out,
    })
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: u32) -> f64 {
    (1..=n).fold(1.0, |acc, i| acc * i as f64)
}

/// A finite sum of [`Piece`]s, kept in canonical form (like pieces merged,
/// zero pieces dropped).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClosedForm {
    pieces: Vec<Piece>,
}

impl ClosedForm {
    pub fn new(pieces: Vec<Piece>) -> Self {
        let mut cf = ClosedForm { pieces: Vec::new() };
        for p in pieces {
            cf.push(p);
        }
        cf
    }

    pub fn zero() -> Self {
        ClosedForm::default()
    }

    pub fn constant(c: f64) -> Self {
        ClosedForm::term(c, 0, 0.0)
    }

    pub fn term(coeff: f64, degree: u32, decay: f64) -> Self {
        ClosedForm::new(vec![Piece::Term { coeff, degree, decay }])
    }

    pub fn rational(rate: f64, offset: f64, power: u32, numer: Vec<f64>) -> Self {
        ClosedForm::new(vec![Piece::Rational {
            rate,
            offset,
            power,
            numer,
        }])
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn is_zero(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn is_exp_poly(&self) -> bool {
        self.pieces.iter().all(|p| matches!(p, Piece::Term { .. }))
    }

    fn push(&mut self, mut piece: Piece) {
        if piece.is_zero() {
            return;
        }
        if let Piece::Term { decay, .. } = &mut piece {
            // -0.0 and 0.0 must merge
            *decay += 0.0;
        }
        let slot = self.pieces.iter().position(|existing| match (existing, &piece) {
            (Piece::Term { degree, decay, .. }, Piece::Term { degree: d2, decay: l2, .. }) => {
                degree == d2 && decay.to_bits() == l2.to_bits()
            }
            (
                Piece::Rational { rate, offset, power, .. },
                Piece::Rational { rate: r2, offset: o2, power: p2, .. },
            ) => rate.to_bits() == r2.to_bits() && offset.to_bits() == o2.to_bits() && power == p2,
            _ => false,
        });
        let Some(i) = slot else {
            self.pieces.push(piece);
            return;
        };
        match (&mut self.pieces[i], piece) {
            (Piece::Term { coeff, .. }, Piece::Term { coeff: c2, .. }) => *coeff += c2,
            (Piece::Rational { numer, .. }, Piece::Rational { numer: n2, .. }) => {
                if numer.len() < n2.len() {
                    numer.resize(n2.len(), 0.0);
                }
                for (a, b) in numer.iter_mut().zip(&n2) {
                    *a += b;
                }
            }
            _ => unreachable!(),
        }
        if self.pieces[i].is_zero() {
            self.pieces.remove(i);
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.pieces.iter().map(|p| p.eval(x)).sum()
    }

    pub fn scaled(&self, s: f64) -> ClosedForm {
        if s == 0.0 {
            return ClosedForm::zero();
        }
        ClosedForm {
            pieces: self.pieces.iter().map(|p| p.scaled(s)).collect(),
        }
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &ClosedForm, b: f64) -> ClosedForm {
        let mut out = self.scaled(a);
        for p in &other.pieces {
            out.push(p.scaled(b));
        }
        out
    }

    pub fn derivative(&self) -> ClosedForm {
        ClosedForm::new(self.pieces.iter().flat_map(|p| p.derivative()).collect())
    }

    /// The right shift `x ↦ self(x + t)`.
    pub fn shifted(&self, t: f64) -> ClosedForm {
        ClosedForm::new(self.pieces.iter().flat_map(|p| p.shifted(t)).collect())
    }

    /// Pointwise product; `None` when some pair of pieces has no exact
    /// product (exponential terms times rational pieces, or rational pieces
    /// with different rate or offset).
    pub fn product(&self, other: &ClosedForm) -> Option<ClosedForm> {
        let mut out = ClosedForm::zero();
        for a in &self.pieces {
            for b in &other.pieces {
                out.push(piece_product(a, b)?);
            }
        }
        Some(out)
    }

    /// `x ↦ ∫_0^x self`; `None` when a rational piece has a logarithmic
    /// antiderivative.
    pub fn antiderivative(&self) -> Option<ClosedForm> {
        let mut out = ClosedForm::zero();
        for piece in &self.pieces {
            match *piece {
                Piece::Term { coeff, degree, decay } => {
                    if decay == 0.0 {
                        out.push(Piece::Term {
                            coeff: coeff / (degree + 1) as f64,
                            degree: degree + 1,
                            decay: 0.0,
                        });
                        continue;
                    }
                    // ∫_0^x t^p e^{-λt} dt = p!/λ^{p+1} (1 - e^{-λx} Σ_{k≤p} (λx)^k / k!)
                    let lead = coeff * factorial(degree) / decay.powi(degree as i32 + 1);
                    out.push(Piece::Term {
                        coeff: lead,
                        degree: 0,
                        decay: 0.0,
                    });
                    for k in 0..=degree {
                        out.push(Piece::Term {
                            coeff: -lead * decay.powi(k as i32) / factorial(k),
                            degree: k,
                            decay,
                        });
                    }
                }
                Piece::Rational { rate, offset, power, ref numer } => {
                    let f = rational_antiderivative(rate, offset, power, numer)?;
                    let f0 = f.eval(0.0);
                    out.push(f);
                    out.push(Piece::Term { coeff: -f0, degree: 0, decay: 0.0 });
                }
            }
        }
        Some(out)
    }

    /// Descriptor text, one `term = ...` or `rational = ...` line per piece.
    pub fn to_lines(&self) -> Vec<String> {
        self.pieces
            .iter()
            .map(|p| match p {
                Piece::Term { coeff, degree, decay } => {
                    format!("term = {coeff}, {degree}, {decay}")
                }
                Piece::Rational { rate, offset, power, numer } => {
                    let n: Vec<String> = numer.iter().map(|v| v.to_string()).collect();
                    format!("rational = {rate}, {offset}, {power}, {}", n.join(" "))
                }
            })
            .collect()
    }

    /// Parses one descriptor line (`key = value` with key `term` or `rational`).
    pub fn parse_piece(key: &str, value: &str) -> Result<Piece> {
        let fields: Vec<&str> = value.split(',').map(str::trim).collect();
        match key.trim() {
            "term" => {
                if fields.len() != 3 {
                    return Err(Error::Config(format!(
                        "term expects `coeff, poly_degree, decay_lambda`, got `{value}`"
                    )));
                }
                Ok(Piece::Term {
                    coeff: parse_f64(fields[0], "term coeff")?,
                    degree: fields[1].parse().map_err(|_| {
                        Error::Config(format!("term poly_degree `{}` is not a count", fields[1]))
                    })?,
                    decay: parse_f64(fields[2], "term decay_lambda")?,
                })
            }
            "rational" => {
                if fields.len() != 4 {
                    return Err(Error::Config(format!(
                        "rational expects `rate, offset, power, p0 p1 ...`, got `{value}`"
                    )));
                }
                let numer = fields[3]
                    .split_whitespace()
                    .map(|s| parse_f64(s, "rational numerator"))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Piece::Rational {
                    rate: parse_f64(fields[0], "rational rate")?,
                    offset: parse_f64(fields[1], "rational offset")?,
                    power: fields[2].parse().map_err(|_| {
                        Error::Config(format!("rational power `{}` is not a count", fields[2]))
                    })?,
                    numer,
                })
            }
            other => Err(Error::Config(format!("unknown descriptor key `{other}`"))),
        }
    }

    /// Parses descriptor text; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<ClosedForm> {
        let mut pieces = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected `key = value`, got `{line}`")))?;
            pieces.push(ClosedForm::parse_piece(k, v)?);
        }
        Ok(ClosedForm::new(pieces))
    }
}

pub(crate) fn parse_f64(s: &str, what: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{what}: `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::Config(format!("{what}: `{s}` is not finite")));
    }
    Ok(v)
}
