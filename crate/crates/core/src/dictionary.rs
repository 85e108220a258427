//! Degree-two trial functions: column enumeration, monomial and tensorized
//! Legendre rows, dictionary assembly over bursts, and coefficient transforms
//! between bases and coordinate frames.
//!
//! Columns are ordered `Const`, `Lin(0..n)`, then `Quad(i, j)` for `i <= j`
//! in lexicographic order. Indices are zero-based; labels are one-based.

use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::Burst;
use crate::linalg::Matrix;
use crate::{Error, Result};

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

/// One column of the quadratic dictionary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BasisIndex {
    Const,
    Lin(usize),
    /// Always stored with `i <= j`; build through [`BasisIndex::quad`].
    Quad(usize, usize),
}

impl BasisIndex {
    pub fn quad(i: usize, j: usize) -> Self {
        if i <= j {
            BasisIndex::Quad(i, j)
        } else {
            BasisIndex::Quad(j, i)
        }
    }

    /// Position in the full dictionary for dimension `n`.
    pub fn position(self, n: usize) -> usize {
        match self {
            BasisIndex::Const => 0,
            BasisIndex::Lin(i) => 1 + i,
            BasisIndex::Quad(i, j) => 1 + n + i * n - i * (i.saturating_sub(1)) / 2 - i + j,
        }
    }

    pub fn from_position(pos: usize, n: usize) -> Option<Self> {
        if pos == 0 {
            return Some(BasisIndex::Const);
        }
        if pos <= n {
            return Some(BasisIndex::Lin(pos - 1));
        }
        let mut rem = pos - 1 - n;
        for i in 0..n {
            let len = n - i;
            if rem < len {
                return Some(BasisIndex::Quad(i, i + rem));
            }
            rem -= len;
        }
        None
    }

    pub fn degree(self) -> usize {
        match self {
            BasisIndex::Const => 0,
            BasisIndex::Lin(_) => 1,
            BasisIndex::Quad(..) => 2,
        }
    }

    fn max_variable(self) -> Option<usize> {
        match self {
            BasisIndex::Const => None,
            BasisIndex::Lin(i) => Some(i),
            BasisIndex::Quad(_, j) => Some(j),
        }
    }
}

impl fmt::Display for BasisIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            BasisIndex::Const => write!(f, "1"),
            BasisIndex::Lin(i) => write!(f, "x{}", i + 1),
            BasisIndex::Quad(i, j) if i == j => write!(f, "x{}^2", i + 1),
            BasisIndex::Quad(i, j) => write!(f, "x{}*x{}", i + 1, j + 1),
        }
    }
}

impl std::str::FromStr for BasisIndex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("not a basis label: {s:?}"));
        let var = |t: &str| -> Result<usize> {
            t.strip_prefix('x')
                .and_then(|d| d.parse::<usize>().ok())
                .filter(|&k| k >= 1)
                .map(|k| k - 1)
                .ok_or_else(bad)
        };
        if s == "1" {
            Ok(BasisIndex::Const)
        } else if let Some(v) = s.strip_suffix("^2") {
            let i = var(v)?;
            Ok(BasisIndex::Quad(i, i))
        } else if let Some((a, b)) = s.split_once('*') {
            Ok(BasisIndex::quad(var(a)?, var(b)?))
        } else {
            Ok(BasisIndex::Lin(var(s)?))
        }
    }
}

/// Number of monomials of `n` variables up to degree two.
pub fn num_columns(n: usize) -> usize {
    (n * n + 3 * n + 2) / 2
}

pub fn all_columns(n: usize) -> Vec<BasisIndex> {
    let mut cols = Vec::with_capacity(num_columns(n));
    cols.push(BasisIndex::Const);
    cols.extend((0..n).map(BasisIndex::Lin));
    for i in 0..n {
        cols.extend((i..n).map(|j| BasisIndex::Quad(i, j)));
    }
    cols
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Basis {
    Monomial,
    Legendre,
}

/// Coordinate-wise affine map of the box `[lo, hi]` onto `[-1, 1]^n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl AffineTransform {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Shape(format!(
                "box bounds have lengths {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        if let Some(i) = (0..lo.len()).find(|&i| !(hi[i] > lo[i]) || !lo[i].is_finite() || !hi[i].is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "box coordinate {i} has zero or negative width ([{}, {}])",
                lo[i], hi[i]
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn uniform(n: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; n], vec![hi; n])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    /// Velocity chain factor `2 / (hi_i - lo_i)`; also the slope of the map.
    #[inline]
    pub fn scale(&self, i: usize) -> f64 {
        2.0 / (self.hi[i] - self.lo[i])
    }

    #[inline]
    pub fn offset(&self, i: usize) -> f64 {
        -1.0 - self.scale(i) * self.lo[i]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| self.scale(i) * v + self.offset(i))
            .collect()
    }

    pub fn is_identity(&self) -> bool {
        self.lo.iter().all(|&l| l == -1.0) && self.hi.iter().all(|&h| h == 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Frame {
    Original,
    UnitBox(AffineTransform),
}

#[inline]
pub fn eval_column(basis: Basis, idx: BasisIndex, x: &[f64]) -> f64 {
    match (basis, idx) {
        (_, BasisIndex::Const) => 1.0,
        (Basis::Monomial, BasisIndex::Lin(i)) => x[i],
        (Basis::Monomial, BasisIndex::Quad(i, j)) => x[i] * x[j],
        (Basis::Legendre, BasisIndex::Lin(i)) => SQRT3 * x[i],
        (Basis::Legendre, BasisIndex::Quad(i, j)) if i == j => {
            SQRT5 * (3.0 * x[i] * x[i] - 1.0) / 2.0
        }
        (Basis::Legendre, BasisIndex::Quad(i, j)) => 3.0 * x[i] * x[j],
    }
}

fn full_row(basis: Basis, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut row = Vec::with_capacity(num_columns(n));
    row.push(1.0);
    row.extend((0..n).map(|i| eval_column(basis, BasisIndex::Lin(i), x)));
    for i in 0..n {
        row.extend((i..n).map(|j| eval_column(basis, BasisIndex::Quad(i, j), x)));
    }
    row
}

/// `(1, x_i, x_i x_j)` in column order.
pub fn monomial_row(x: &[f64]) -> Vec<f64> {
    full_row(Basis::Monomial, x)
}

/// Tensorized orthonormal Legendre polynomials of degree at most two.
pub fn legendre_row(x: &[f64]) -> Vec<f64> {
    full_row(Basis::Legendre, x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowSelection {
    AllSamples,
    InitialOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowMeta {
    pub burst: usize,
    pub sample: usize,
}

#[derive(Clone, Debug)]
pub struct DictionaryMatrix {
    pub values: Matrix,
    pub basis: Basis,
    pub columns: Vec<BasisIndex>,
    pub rows_meta: Vec<RowMeta>,
    pub frame: Frame,
}

impl DictionaryMatrix {
    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }
}

/// Evaluates the requested dictionary columns on every selected burst sample.
///
/// Rows are burst-major, then sample-major. With a transform, states are
/// mapped into the unit box before evaluation and each velocity coordinate is
/// multiplied by its chain factor, so the returned `V` is the velocity in the
/// transformed frame.
pub fn assemble_dictionary(
    bursts: &[Burst],
    basis: Basis,
    columns: Option<&[BasisIndex]>,
    rows: RowSelection,
    transform: Option<&AffineTransform>,
) -> Result<(DictionaryMatrix, Matrix)> {
    let first = bursts
        .first()
        .ok_or_else(|| Error::InvalidArgument("no bursts to assemble".into()))?;
    let n = first.states.cols();
    let m = first.states.rows();
    for b in bursts {
        if b.states.shape() != (m, n) {
            return Err(Error::Shape(format!(
                "burst {} has {}x{} states, expected {m}x{n}",
                b.index,
                b.states.rows(),
                b.states.cols()
            )));
        }
        match &b.velocities {
            None => return Err(Error::IncompleteBurst(b.index)),
            Some(v) if v.shape() != (m, n) => {
                return Err(Error::Shape(format!(
                    "burst {} velocities are {}x{}, expected {m}x{n}",
                    b.index,
                    v.rows(),
                    v.cols()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(t) = transform {
        if t.dim() != n {
            return Err(Error::Shape(format!(
                "transform has dimension {}, data has {n}",
                t.dim()
            )));
        }
    }
    let columns: Vec<BasisIndex> = match columns {
        Some(c) => {
            if let Some(bad) = c.iter().find(|b| b.max_variable().is_some_and(|v| v >= n)) {
                return Err(Error::InvalidArgument(format!(
                    "column {bad} out of range for n = {n}"
                )));
            }
            c.to_vec()
        }
        None => all_columns(n),
    };

    let per_burst = match rows {
        RowSelection::AllSamples => m,
        RowSelection::InitialOnly => 1,
    };
    let rows_meta: Vec<RowMeta> = bursts
        .iter()
        .enumerate()
        .flat_map(|(k, _)| (0..per_burst).map(move |i| RowMeta { burst: k, sample: i }))
        .collect();

    let ncols = columns.len();
    let mut values = Matrix::zeros(rows_meta.len(), ncols);
    let mut velocities = Matrix::zeros(rows_meta.len(), n);

    let fill = |(r, (arow, vrow)): (usize, (&mut [f64], &mut [f64]))| {
        let meta = rows_meta[r];
        let burst = &bursts[meta.burst];
        let x = burst.states.row(meta.sample);
        let v = burst
            .velocities
            .as_ref()
            .expect("checked above")
            .row(meta.sample);
        let y;
        let x = match transform {
            Some(t) => {
                y = t.forward(x);
                for (i, (dst, &src)) in vrow.iter_mut().zip(v).enumerate() {
                    *dst = t.scale(i) * src;
                }
                y.as_slice()
            }
            None => {
                vrow.copy_from_slice(v);
                x
            }
        };
        for (dst, &c) in arow.iter_mut().zip(&columns) {
            *dst = eval_column(basis, c, x);
        }
    };

    if ncols > 0 {
        values
            .as_mut_slice()
            .par_chunks_exact_mut(ncols)
            .zip(velocities.as_mut_slice().par_chunks_exact_mut(n))
            .enumerate()
            .for_each(fill);
    } else {
        velocities
            .as_mut_slice()
            .par_chunks_exact_mut(n)
            .enumerate()
            .for_each(|(r, vrow)| fill((r, (&mut [], vrow))));
    }

    let frame = match transform {
        Some(t) => Frame::UnitBox(t.clone()),
        None => Frame::Original,
    };
    Ok((
        DictionaryMatrix {
            values,
            basis,
            columns,
            rows_meta,
            frame,
        },
        velocities,
    ))
}

/// Columns involving only the variables in the periodic window of width `ell`
/// centred on component `j`, in dictionary order.
pub fn localized_columns(j: usize, ell: usize, n: usize) -> Result<Vec<BasisIndex>> {
    if ell.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "window width must be odd, got {ell}"
        )));
    }
    if ell == 0 || ell > n || j >= n {
        return Err(Error::InvalidArgument(format!(
            "window {ell} around component {j} does not fit n = {n}"
        )));
    }
    let half = (ell - 1) / 2;
    let mut vars: Vec<usize> = (0..ell).map(|k| (j + n - half + k) % n).collect();
    vars.sort_unstable();
    let mut cols = Vec::with_capacity(num_columns(ell));
    cols.push(BasisIndex::Const);
    cols.extend(vars.iter().map(|&i| BasisIndex::Lin(i)));
    for (a, &i) in vars.iter().enumerate() {
        cols.extend(vars[a..].iter().map(|&k| BasisIndex::Quad(i, k)));
    }
    Ok(cols)
}

struct ColumnLookup(HashMap<BasisIndex, usize>);

impl ColumnLookup {
    fn new(columns: &[BasisIndex]) -> Self {
        Self(columns.iter().enumerate().map(|(p, &c)| (c, p)).collect())
    }

    fn get(&self, idx: BasisIndex) -> Result<usize> {
        self.0.get(&idx).copied().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "column set is not closed under the transform: {idx} missing"
            ))
        })
    }
}

/// Re-expresses the same polynomial in the other basis.
///
/// `columns` labels the entries of `c`; it must contain every lower-order term
/// a conversion can spill into (the full column list and localized windows
/// both qualify).
pub fn change_basis(
    columns: &[BasisIndex],
    c: &[f64],
    from: Basis,
    to: Basis,
) -> Result<Vec<f64>> {
    if columns.len() != c.len() {
        return Err(Error::Shape(format!(
            "{} coefficients for {} columns",
            c.len(),
            columns.len()
        )));
    }
    if from == to {
        return Ok(c.to_vec());
    }
    let lookup = ColumnLookup::new(columns);
    let konst = columns.iter().position(|&b| b == BasisIndex::Const);
    let mut out = vec![0.0; c.len()];
    for (p, (&idx, &a)) in columns.iter().zip(c).enumerate() {
        if a == 0.0 {
            continue;
        }
        match (from, idx) {
            (_, BasisIndex::Const) => out[p] += a,
            (Basis::Monomial, BasisIndex::Lin(_)) => out[p] += a / SQRT3,
            (Basis::Legendre, BasisIndex::Lin(_)) => out[p] += a * SQRT3,
            (Basis::Monomial, BasisIndex::Quad(i, j)) if i == j => {
                out[p] += a * 2.0 / (3.0 * SQRT5);
                out[konst.map_or_else(|| lookup.get(BasisIndex::Const), Ok)?] += a / 3.0;
            }
            (Basis::Legendre, BasisIndex::Quad(i, j)) if i == j => {
                out[p] += a * 1.5 * SQRT5;
                out[konst.map_or_else(|| lookup.get(BasisIndex::Const), Ok)?] -= a * SQRT5 / 2.0;
            }
            (Basis::Monomial, BasisIndex::Quad(..)) => out[p] += a / 3.0,
            (Basis::Legendre, BasisIndex::Quad(..)) => out[p] += a * 3.0,
        }
    }
    Ok(out)
}

/// Rewrites a monomial polynomial `g` fitted in unit-box coordinates as the
/// polynomial `f(x) = g(forward(x)) / scale(component)` in original
/// coordinates, i.e. the right-hand side for `component` in the original frame.
pub fn pullback_affine(
    columns: &[BasisIndex],
    c: &[f64],
    transform: &AffineTransform,
    component: usize,
) -> Result<Vec<f64>> {
    if columns.len() != c.len() {
        return Err(Error::Shape(format!(
            "{} coefficients for {} columns",
            c.len(),
            columns.len()
        )));
    }
    if component >= transform.dim() {
        return Err(Error::InvalidArgument(format!(
            "component {component} outside transform of dimension {}",
            transform.dim()
        )));
    }
    if let Some(bad) = columns
        .iter()
        .find(|b| b.max_variable().is_some_and(|v| v >= transform.dim()))
    {
        return Err(Error::Shape(format!("column {bad} exceeds transform dimension")));
    }
    let lookup = ColumnLookup::new(columns);
    let inv = 1.0 / transform.scale(component);
    let mut out = vec![0.0; c.len()];
    for (p, (&idx, &a)) in columns.iter().zip(c).enumerate() {
        if a == 0.0 {
            continue;
        }
        match idx {
            BasisIndex::Const => out[p] += a,
            BasisIndex::Lin(i) => {
                let (s, o) = (transform.scale(i), transform.offset(i));
                out[p] += a * s;
                out[lookup.get(BasisIndex::Const)?] += a * o;
            }
            BasisIndex::Quad(i, j) => {
                let (si, oi) = (transform.scale(i), transform.offset(i));
                let (sj, oj) = (transform.scale(j), transform.offset(j));
                out[p] += a * si * sj;
                if i == j {
                    out[lookup.get(BasisIndex::Lin(i))?] += 2.0 * a * si * oi;
                } else {
                    out[lookup.get(BasisIndex::Lin(i))?] += a * si * oj;
                    out[lookup.get(BasisIndex::Lin(j))?] += a * oi * sj;
                }
                out[lookup.get(BasisIndex::Const)?] += a * oi * oj;
            }
        }
    }
    for v in &mut out {
        *v *= inv;
    }
    Ok(out)
}

/// Evaluates `Σ c_k φ_k(x)` for the given basis and column labels.
pub fn evaluate_polynomial(basis: Basis, columns: &[BasisIndex], c: &[f64], x: &[f64]) -> f64 {
    columns
        .iter()
        .zip(c)
        .map(|(&idx, &a)| a * eval_column(basis, idx, x))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn column_counts() {
        assert_eq!(num_columns(50), 1326);
        assert_eq!(num_columns(200), 20301);
        assert_eq!(num_columns(1), 3);
        assert_eq!(all_columns(7).len(), num_columns(7));
    }

    #[test]
    fn positions_round_trip() {
        let n = 9;
        for (p, idx) in all_columns(n).into_iter().enumerate() {
            assert_eq!(idx.position(n), p, "{idx}");
            assert_eq!(BasisIndex::from_position(p, n), Some(idx));
        }
        assert_eq!(BasisIndex::from_position(num_columns(n), n), None);
    }

    #[test]
    fn labels_parse_back() {
        for idx in all_columns(4) {
            assert_eq!(idx.to_string().parse::<BasisIndex>().unwrap(), idx);
        }
        assert!("y3".parse::<BasisIndex>().is_err());
        assert!("x0".parse::<BasisIndex>().is_err());
    }

    #[test]
    fn monomial_rows() {
        assert_eq!(monomial_row(&[2.0, 3.0]), vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
        assert_eq!(monomial_row(&[-1.0]), vec![1.0, -1.0, 1.0]);
        let z = monomial_row(&[0.0; 4]);
        assert_eq!(z[0], 1.0);
        assert!(z[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn legendre_rows() {
        let r = legendre_row(&[1.0]);
        assert_abs_diff_eq!(r[1], 3f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(r[2], 5f64.sqrt(), epsilon = 1e-15);
        let r = legendre_row(&[0.0]);
        assert_eq!(r[0], 1.0);
        assert_eq!(r[1], 0.0);
        assert_abs_diff_eq!(r[2], -(5f64.sqrt()) / 2.0, epsilon = 1e-15);
        let r = legendre_row(&[1.0, 1.0]);
        assert_eq!(r[BasisIndex::Quad(0, 1).position(2)], 3.0);
        assert!(r.iter().all(|v| v.abs() <= 3.0));
    }

    #[test]
    fn localized_window_sizes() {
        let cols = localized_columns(0, 3, 5).unwrap();
        assert_eq!(cols.len(), 10);
        assert!(cols.contains(&BasisIndex::Lin(4)));
        assert!(cols.contains(&BasisIndex::Quad(1, 4)));
        assert!(!cols.contains(&BasisIndex::Lin(2)));
        assert_eq!(localized_columns(17, 11, 1000).unwrap().len(), 78);
        assert_eq!(localized_columns(2, 7, 7).unwrap(), all_columns(7));
        assert!(localized_columns(0, 4, 10).is_err());
    }

    #[test]
    fn change_basis_examples() {
        let cols = all_columns(1);
        let l = change_basis(&cols, &[0.0, 0.0, 1.0], Basis::Monomial, Basis::Legendre).unwrap();
        assert_abs_diff_eq!(l[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l[2], 2.0 / (3.0 * 5f64.sqrt()), epsilon = 1e-15);

        let cols = all_columns(3);
        let mut c = vec![0.0; cols.len()];
        c[1] = 2.0;
        c[3] = -1.5;
        let l = change_basis(&cols, &c, Basis::Monomial, Basis::Legendre).unwrap();
        assert_abs_diff_eq!(l[1], 2.0 / 3f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(l[3], -1.5 / 3f64.sqrt(), epsilon = 1e-15);
        assert_eq!(l.iter().filter(|v| **v != 0.0).count(), 2);
    }

    #[test]
    fn pullback_examples() {
        let cols = all_columns(1);
        let id = AffineTransform::uniform(1, -1.0, 1.0).unwrap();
        let c = [0.3, -0.7, 1.1];
        assert_eq!(pullback_affine(&cols, &c, &id, 0).unwrap(), c.to_vec());

        let unit = AffineTransform::uniform(1, 0.0, 1.0).unwrap();
        let f = pullback_affine(&cols, &[0.0, 1.0, 0.0], &unit, 0).unwrap();
        assert_abs_diff_eq!(f[0], -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(f[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f[2], 0.0, epsilon = 1e-15);

        let f = pullback_affine(&cols, &[0.0, 0.0, 1.0], &unit, 0).unwrap();
        assert_abs_diff_eq!(f[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(f[1], -2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f[2], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(AffineTransform::uniform(3, 1.0, 1.0).is_err());
        assert!(AffineTransform::new(vec![0.0], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn transform_maps_corners() {
        let t = AffineTransform::new(vec![0.0, -3.0], vec![1.0, 5.0]).unwrap();
        assert_eq!(t.forward(&[0.0, -3.0]), vec![-1.0, -1.0]);
        assert_eq!(t.forward(&[1.0, 5.0]), vec![1.0, 1.0]);
    }
}
