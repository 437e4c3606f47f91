//! Symmetry operator strings ("-y+1/2, x-y, z") as exact affine maps.
//!
//! Constants are kept as arbitrary-precision rationals while the expression
//! is evaluated, then converted to f64 once, so "1/3" lands on the nearest
//! float instead of accumulating parse-order rounding.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SymOp {
    pub rot: [[f64; 3]; 3],
    pub trans: [f64; 3],
}

impl SymOp {
    pub fn apply(&self, frac: &[f64; 3]) -> [f64; 3] {
        let mut out = self.trans;
        for (j, row) in self.rot.iter().enumerate() {
            for (i, r) in row.iter().enumerate() {
                out[j] += r * frac[i];
            }
        }
        out
    }
}

pub(crate) fn parse(op: &str) -> Result<SymOp, String> {
    let parts: Vec<&str> = op.split(',').collect();
    if parts.len() != 3 {
        return Err(format!(
            "expected 3 comma-separated components, found {}",
            parts.len()
        ));
    }
    let mut rot = [[0.0; 3]; 3];
    let mut trans = [0.0; 3];
    for (j, part) in parts.iter().enumerate() {
        let (coeffs, t) = parse_component(part)?;
        for i in 0..3 {
            rot[j][i] = to_f64(&coeffs[i])?;
        }
        trans[j] = to_f64(&t)?;
    }
    Ok(SymOp { rot, trans })
}

fn to_f64(r: &BigRational) -> Result<f64, String> {
    r.to_f64()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("constant {r} does not fit in a float"))
}

/// One component is a sum of signed terms; a term is a rational constant, a
/// variable, or both ("x", "-y", "1/2", "0.25", "2x", "1/2*z").
fn parse_component(s: &str) -> Result<([BigRational; 3], BigRational), String> {
    let chars: Vec<char> = s.chars().filter(|c| !c.is_whitespace()).collect();
    let mut coeffs = [
        BigRational::zero(),
        BigRational::zero(),
        BigRational::zero(),
    ];
    let mut trans = BigRational::zero();
    if chars.is_empty() {
        return Err("empty component".into());
    }
    let mut i = 0;
    while i < chars.len() {
        let mut negative = false;
        while i < chars.len() && (chars[i] == '+' || chars[i] == '-') {
            if chars[i] == '-' {
                negative = !negative;
            }
            i += 1;
        }
        if i >= chars.len() {
            return Err("dangling sign".into());
        }
        let mut constant = None;
        if chars[i].is_ascii_digit() || chars[i] == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            let mut value = parse_decimal(&chars[start..i].iter().collect::<String>())?;
            if i < chars.len() && chars[i] == '/' {
                i += 1;
                let dstart = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                if dstart == i {
                    return Err("missing denominator".into());
                }
                let den: BigInt = chars[dstart..i]
                    .iter()
                    .collect::<String>()
                    .parse()
                    .map_err(|_| "bad denominator".to_string())?;
                if den.is_zero() {
                    return Err("zero denominator".into());
                }
                value /= BigRational::from_integer(den);
            }
            if i < chars.len() && chars[i] == '*' {
                i += 1;
            }
            constant = Some(value);
        }
        let axis = match chars.get(i).map(|c| c.to_ascii_lowercase()) {
            Some('x') => Some(0),
            Some('y') => Some(1),
            Some('z') => Some(2),
            _ => None,
        };
        let had_constant = constant.is_some();
        // A bare variable carries coefficient 1.
        let mut value = constant.unwrap_or_else(BigRational::one);
        if negative {
            value = -value;
        }
        match axis {
            Some(a) => {
                coeffs[a] += value;
                i += 1;
            }
            None if chars.get(i).is_none_or(|c| *c == '+' || *c == '-') => {
                // Constant term (or end of input).
                if !had_constant {
                    return Err("term with neither constant nor variable".into());
                }
                trans += value;
            }
            None => {
                return Err(format!("unexpected character '{}'", chars[i]));
            }
        }
    }
    Ok((coeffs, trans))
}

/// "12", "0.5", ".5", "12.": digits with an optional decimal point,
/// converted exactly (fraction digits become a power-of-ten denominator).
fn parse_decimal(s: &str) -> Result<BigRational, String> {
    if s.matches('.').count() > 1 {
        return Err(format!("malformed constant '{s}'"));
    }
    let (int_part, frac_part) = match s.find('.') {
        Some(p) => (&s[..p], &s[p + 1..]),
        None => (s, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(format!("malformed constant '{s}'"));
    }
    let mut value = if int_part.is_empty() {
        BigRational::zero()
    } else {
        let n: BigInt = int_part.parse().map_err(|_| format!("bad integer '{int_part}'"))?;
        BigRational::from_integer(n)
    };
    if !frac_part.is_empty() {
        let num: BigInt = frac_part
            .parse()
            .map_err(|_| format!("bad fraction '{frac_part}'"))?;
        let den = BigInt::from(10).pow(frac_part.len() as u32);
        value += BigRational::new(num, den);
    }
    Ok(value)
}
