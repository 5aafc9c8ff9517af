//! Exact-rational Cook–Toom construction of 1-D minimal-filtering transforms.
//!
//! For `m` outputs of an `r`-tap correlation over `n = m + r - 1` inputs, the
//! linear convolution of a degree `r-1` and a degree `m-1` polynomial is
//! evaluated at `n - 1` finite points plus the point at infinity and
//! interpolated back. Transposing that algorithm with respect to the data
//! argument yields the correlation form `y = Sᵀ[(G w) ⊙ (F x)]`, with
//!
//! * `G` (n×r): evaluation of the filter polynomial,
//! * `S` (n×m): evaluation of the data polynomial,
//! * `F` (n×n): transpose of the inverse Vandermonde (interpolation) matrix.
//!
//! Each row of `F` is then normalised to unit max-norm and the matching row of
//! `G` absorbs the scale, which keeps the input transform integral for the
//! usual point sets.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};

pub type Rational = BigRational;

/// Dense matrix over exact rationals, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RationalMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Rational>,
}

impl RationalMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Rational::zero(); rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> &Rational {
        &self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: Rational) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c).clone());
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = Rational::zero();
                for k in 0..self.cols {
                    acc += self.get(i, k) * other.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|v| v.to_f64().expect("rational entry fits in f64"))
            .collect()
    }
}

/// Transform matrices of one `(r, n)` basis over exact rationals.
#[derive(Clone, Debug)]
pub struct RationalBasis {
    pub r: usize,
    pub n: usize,
    pub f: RationalMatrix,
    pub g: RationalMatrix,
    pub s: RationalMatrix,
    pub points: Vec<Rational>,
}

pub fn rational(num: i64, den: i64) -> Rational {
    Rational::new(BigInt::from(num), BigInt::from(den))
}

/// Conventional interpolation points for the supported bases.
pub fn default_points(r: usize, n: usize) -> Option<Vec<Rational>> {
    let ints = |v: &[i64]| v.iter().map(|&k| rational(k, 1)).collect::<Vec<_>>();
    match (r, n) {
        (3, 4) => Some(ints(&[0, 1, -1])),
        (3, 6) => Some(ints(&[0, 1, -1, 2, -2])),
        (5, 8) => Some(vec![
            rational(0, 1),
            rational(1, 1),
            rational(-1, 1),
            rational(2, 1),
            rational(-2, 1),
            rational(1, 2),
            rational(-1, 2),
        ]),
        _ => None,
    }
}

/// Evaluation matrix with `len` columns: finite rows `[1, p, p², …]`, then
/// the infinity row selecting the leading coefficient.
fn evaluation(points: &[Rational], len: usize) -> RationalMatrix {
    let rows = points.len() + 1;
    let mut out = RationalMatrix::zeros(rows, len);
    for (k, p) in points.iter().enumerate() {
        let mut pow = Rational::one();
        for c in 0..len {
            out.set(k, c, pow.clone());
            pow *= p;
        }
    }
    out.set(rows - 1, len - 1, Rational::one());
    out
}

fn invert(mut a: RationalMatrix) -> Result<RationalMatrix> {
    let n = a.rows;
    let mut inv = RationalMatrix::zeros(n, n);
    for i in 0..n {
        inv.set(i, i, Rational::one());
    }
    for col in 0..n {
        let pivot = (col..n)
            .find(|&r| !a.get(r, col).is_zero())
            .ok_or_else(|| Error::Construction("singular interpolation matrix".into()))?;
        if pivot != col {
            for c in 0..n {
                a.data.swap(pivot * n + c, col * n + c);
                inv.data.swap(pivot * n + c, col * n + c);
            }
        }
        let p = a.get(col, col).clone();
        for c in 0..n {
            let v = a.get(col, c) / &p;
            a.set(col, c, v);
            let v = inv.get(col, c) / &p;
            inv.set(col, c, v);
        }
        for r in 0..n {
            if r == col || a.get(r, col).is_zero() {
                continue;
            }
            let k = a.get(r, col).clone();
            for c in 0..n {
                let v = a.get(r, c) - &k * a.get(col, c);
                a.set(r, c, v);
                let v = inv.get(r, c) - &k * inv.get(col, c);
                inv.set(r, c, v);
            }
        }
    }
    Ok(inv)
}

/// Builds `F`, `G`, `S` for filter side `r` and tile side `n` from the given
/// finite interpolation points (`n - 1` of them, pairwise distinct).
pub fn construct(r: usize, n: usize, points: &[Rational]) -> Result<RationalBasis> {
    if r == 0 || n < r {
        return Err(Error::Construction(format!("need n >= r >= 1, got r={r}, n={n}")));
    }
    let m = n - r + 1;
    if points.len() + 1 != n {
        return Err(Error::Construction(format!(
            "(r={r}, n={n}) needs {} finite points, got {}",
            n - 1,
            points.len()
        )));
    }
    for (i, p) in points.iter().enumerate() {
        if points[..i].contains(p) {
            return Err(Error::Construction(format!("repeated interpolation point {p}")));
        }
    }

    let vandermonde = evaluation(points, n);
    let mut f = invert(vandermonde)?.transpose();
    let mut g = evaluation(points, r);
    let s = evaluation(points, m);

    for k in 0..n {
        let scale = (0..n)
            .map(|c| f.get(k, c).abs())
            .max()
            .filter(|v| !v.is_zero())
            .ok_or_else(|| Error::Construction("zero row in input transform".into()))?;
        for c in 0..n {
            let v = f.get(k, c) / &scale;
            f.set(k, c, v);
        }
        for c in 0..r {
            let v = g.get(k, c) * &scale;
            g.set(k, c, v);
        }
    }

    Ok(RationalBasis {
        r,
        n,
        f,
        g,
        s,
        points: points.to_vec(),
    })
}

impl RationalBasis {
    /// `Sᵀ((G w Gᵀ) ⊙ (F x Fᵀ))S` evaluated exactly.
    pub fn tile_output(&self, w: &RationalMatrix, x: &RationalMatrix) -> RationalMatrix {
        let wd = self.g.matmul(w).matmul(&self.g.transpose());
        let xd = self.f.matmul(x).matmul(&self.f.transpose());
        let mut prod = RationalMatrix::zeros(self.n, self.n);
        for i in 0..prod.data.len() {
            prod.data[i] = &wd.data[i] * &xd.data[i];
        }
        self.s.transpose().matmul(&prod).matmul(&self.s)
    }
}
