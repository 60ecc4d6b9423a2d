//! Dense real matrices and general (non-symmetric) eigenvalue spectra.
//!
//! The eigen solver balances the matrix, reduces it to upper Hessenberg
//! form with Householder reflections and then runs the Francis double-shift
//! QR iteration, so complex-conjugate pairs come out without complex
//! arithmetic.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("QR iteration did not converge after {iterations} iterations ({remaining} eigenvalues left)")]
    Convergence { iterations: usize, remaining: usize },
}

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows * cols != data.len() {
            return Err(LinalgError::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        let m = Self { rows, cols, data };
        m.check_finite()?;
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(LinalgError::Dimension("ragged rows".into()));
        }
        Self::from_vec(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn check_finite(&self) -> Result<(), LinalgError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(k) => Err(LinalgError::NonFinite {
                row: k / self.cols.max(1),
                col: k % self.cols.max(1),
            }),
            None => Ok(()),
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    /// `y = M x`
    pub fn mat_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "mat_vec: length mismatch");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `y = Mᵀ v`
    pub fn tr_mat_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows, "tr_mat_vec: length mismatch");
        let mut y = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi != 0.0 {
                axpy(vi, self.row(i), &mut y);
            }
        }
        y
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a != 0.0 {
                    axpy(a, other.row(k), out.row_mut(i));
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn scaled(&self, c: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// Multiplies row `i` by `factors[i]`, i.e. `diag(factors) · M`.
    pub fn scale_rows(&self, factors: &[f64]) -> DenseMatrix {
        assert_eq!(factors.len(), self.rows);
        let mut out = self.clone();
        for (i, &f) in factors.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= f);
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// A single eigenvalue `re + i·im`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
}

impl Eigenvalue {
    pub fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    pub fn modulus(&self) -> f64 {
        self.re.hypot(self.im)
    }
}

/// All eigenvalues of a square matrix, sorted by descending modulus.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub values: Vec<Eigenvalue>,
}

impl ComplexSpectrum {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spectral_radius(&self) -> f64 {
        self.values.first().map_or(0.0, Eigenvalue::modulus)
    }

    pub fn fraction_outside_unit_circle(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        let outside = self.values.iter().filter(|e| e.modulus() > 1.0).count();
        outside as f64 / self.values.len() as f64
    }

    pub fn sum(&self) -> Eigenvalue {
        self.values.iter().fold(Eigenvalue::new(0.0, 0.0), |acc, e| {
            Eigenvalue::new(acc.re + e.re, acc.im + e.im)
        })
    }
}

/// Computes every eigenvalue of a square real matrix.
pub fn eig_spectrum(m: &DenseMatrix) -> Result<ComplexSpectrum, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::Dimension(format!(
            "eigenvalues need a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    m.check_finite()?;
    let n = m.rows();
    if n == 0 {
        return Ok(ComplexSpectrum { values: Vec::new() });
    }

    let mut h = OneBased::from_matrix(m);
    h.balance();
    h.reduce_to_hessenberg();
    let mut values = h.hessenberg_qr(100 * n)?;
    values.sort_by(|a, b| {
        b.modulus()
            .total_cmp(&a.modulus())
            .then(b.re.total_cmp(&a.re))
            .then(b.im.total_cmp(&a.im))
    });
    Ok(ComplexSpectrum { values })
}

pub fn spectral_radius(m: &DenseMatrix) -> Result<f64, LinalgError> {
    Ok(eig_spectrum(m)?.spectral_radius())
}

/// Square work array indexed from 1, following the classic EISPACK layout
/// so the QR sweep below keeps its well-known index arithmetic.
struct OneBased {
    n: usize,
    a: Vec<f64>,
}

impl OneBased {
    fn from_matrix(m: &DenseMatrix) -> Self {
        let n = m.rows();
        let mut a = vec![0.0; (n + 1) * (n + 1)];
        for i in 0..n {
            for j in 0..n {
                a[(i + 1) * (n + 1) + j + 1] = m[(i, j)];
            }
        }
        Self { n, a }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * (self.n + 1) + j]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * (self.n + 1) + j] = v;
    }

    #[inline]
    fn sub(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * (self.n + 1) + j] -= v;
    }

    /// Diagonal similarity scaling by powers of two so that row and column
    /// norms are comparable.
    fn balance(&mut self) {
        const RADIX: f64 = 2.0;
        let sqrdx = RADIX * RADIX;
        let n = self.n;
        let mut done = false;
        while !done {
            done = true;
            for i in 1..=n {
                let mut r = 0.0;
                let mut c = 0.0;
                for j in 1..=n {
                    if j != i {
                        c += self.at(j, i).abs();
                        r += self.at(i, j).abs();
                    }
                }
                if c != 0.0 && r != 0.0 {
                    let mut g = r / RADIX;
                    let mut f = 1.0;
                    let s = c + r;
                    while c < g {
                        f *= RADIX;
                        c *= sqrdx;
                    }
                    g = r * RADIX;
                    while c > g {
                        f /= RADIX;
                        c /= sqrdx;
                    }
                    if (c + r) / f < 0.95 * s {
                        done = false;
                        let g = 1.0 / f;
                        for j in 1..=n {
                            let v = self.at(i, j) * g;
                            self.set(i, j, v);
                        }
                        for j in 1..=n {
                            let v = self.at(j, i) * f;
                            self.set(j, i, v);
                        }
                    }
                }
            }
        }
    }

    /// Householder reduction to upper Hessenberg form.
    fn reduce_to_hessenberg(&mut self) {
        let n = self.n;
        let mut ort = vec![0.0; n + 1];
        for m in 2..n {
            let scale: f64 = (m..=n).map(|i| self.at(i, m - 1).abs()).sum();
            if scale == 0.0 {
                continue;
            }
            let mut h = 0.0;
            for i in (m..=n).rev() {
                ort[i] = self.at(i, m - 1) / scale;
                h += ort[i] * ort[i];
            }
            let mut g = h.sqrt();
            if ort[m] > 0.0 {
                g = -g;
            }
            h -= ort[m] * g;
            ort[m] -= g;

            for j in m..=n {
                let f: f64 = (m..=n).rev().map(|i| ort[i] * self.at(i, j)).sum::<f64>() / h;
                for i in m..=n {
                    self.sub(i, j, f * ort[i]);
                }
            }
            for i in 1..=n {
                let f: f64 = (m..=n).rev().map(|j| ort[j] * self.at(i, j)).sum::<f64>() / h;
                for j in m..=n {
                    self.sub(i, j, f * ort[j]);
                }
            }
            self.set(m, m - 1, scale * g);
            for i in m + 1..=n {
                self.set(i, m - 1, 0.0);
            }
        }
    }

    /// Francis double-shift QR on the Hessenberg matrix; destroys it.
    fn hessenberg_qr(&mut self, max_iterations: usize) -> Result<Vec<Eigenvalue>, LinalgError> {
        let n = self.n;
        let mut wr = vec![0.0; n + 1];
        let mut wi = vec![0.0; n + 1];

        let mut anorm = 0.0;
        for i in 1..=n {
            for j in i.saturating_sub(1).max(1)..=n {
                anorm += self.at(i, j).abs();
            }
        }

        let mut total = 0usize;
        let mut nn = n;
        let mut t = 0.0;
        while nn >= 1 {
            let mut its = 0usize;
            let mut l;
            loop {
                // Look for a single small subdiagonal element.
                l = nn;
                while l >= 2 {
                    let mut s = self.at(l - 1, l - 1).abs() + self.at(l, l).abs();
                    if s == 0.0 {
                        s = anorm;
                    }
                    if self.at(l, l - 1).abs() + s == s {
                        self.set(l, l - 1, 0.0);
                        break;
                    }
                    l -= 1;
                }
                let mut x = self.at(nn, nn);
                if l == nn {
                    wr[nn] = x + t;
                    wi[nn] = 0.0;
                    nn -= 1;
                    break;
                }
                let mut y = self.at(nn - 1, nn - 1);
                let mut w = self.at(nn, nn - 1) * self.at(nn - 1, nn);
                if l == nn - 1 {
                    let p = 0.5 * (y - x);
                    let q = p * p + w;
                    let mut z = q.abs().sqrt();
                    x += t;
                    if q >= 0.0 {
                        z = p + z.copysign(p);
                        wr[nn - 1] = x + z;
                        wr[nn] = x + z;
                        if z != 0.0 {
                            wr[nn] = x - w / z;
                        }
                        wi[nn - 1] = 0.0;
                        wi[nn] = 0.0;
                    } else {
                        wr[nn - 1] = x + p;
                        wr[nn] = x + p;
                        wi[nn - 1] = -z;
                        wi[nn] = z;
                    }
                    nn -= 2;
                    break;
                }

                if total >= max_iterations {
                    return Err(LinalgError::Convergence {
                        iterations: total,
                        remaining: nn,
                    });
                }
                if its > 0 && its % 10 == 0 {
                    // Exceptional shift.
                    t += x;
                    for i in 1..=nn {
                        self.sub(i, i, x);
                    }
                    let s = self.at(nn, nn - 1).abs() + self.at(nn - 1, nn - 2).abs();
                    x = 0.75 * s;
                    y = x;
                    w = -0.4375 * s * s;
                }
                its += 1;
                total += 1;

                // Look for two consecutive small subdiagonal elements.
                let mut m = nn - 2;
                let (mut p, mut q, mut r);
                loop {
                    let z = self.at(m, m);
                    let rr = x - z;
                    let ss = y - z;
                    p = (rr * ss - w) / self.at(m + 1, m) + self.at(m, m + 1);
                    q = self.at(m + 1, m + 1) - z - rr - ss;
                    r = self.at(m + 2, m + 1);
                    let s = p.abs() + q.abs() + r.abs();
                    p /= s;
                    q /= s;
                    r /= s;
                    if m == l {
                        break;
                    }
                    let u = self.at(m, m - 1).abs() * (q.abs() + r.abs());
                    let v = p.abs() * (self.at(m - 1, m - 1).abs() + z.abs() + self.at(m + 1, m + 1).abs());
                    if u + v == v {
                        break;
                    }
                    m -= 1;
                }
                for i in m + 2..=nn {
                    self.set(i, i - 2, 0.0);
                    if i != m + 2 {
                        self.set(i, i - 3, 0.0);
                    }
                }

                // Double QR step on rows l..nn and columns m..nn.
                for k in m..nn {
                    if k != m {
                        p = self.at(k, k - 1);
                        q = self.at(k + 1, k - 1);
                        r = if k != nn - 1 { self.at(k + 2, k - 1) } else { 0.0 };
                        x = p.abs() + q.abs() + r.abs();
                        if x != 0.0 {
                            p /= x;
                            q /= x;
                            r /= x;
                        }
                    }
                    let s = (p * p + q * q + r * r).sqrt().copysign(p);
                    if s == 0.0 {
                        continue;
                    }
                    if k == m {
                        if l != m {
                            let v = -self.at(k, k - 1);
                            self.set(k, k - 1, v);
                        }
                    } else {
                        self.set(k, k - 1, -s * x);
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    let z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..=nn {
                        let mut pp = self.at(k, j) + q * self.at(k + 1, j);
                        if k != nn - 1 {
                            pp += r * self.at(k + 2, j);
                            self.sub(k + 2, j, pp * z);
                        }
                        self.sub(k + 1, j, pp * y);
                        self.sub(k, j, pp * x);
                    }
                    let mmin = if nn < k + 3 { nn } else { k + 3 };
                    for i in l..=mmin {
                        let mut pp = x * self.at(i, k) + y * self.at(i, k + 1);
                        if k != nn - 1 {
                            pp += z * self.at(i, k + 2);
                            self.sub(i, k + 2, pp * r);
                        }
                        self.sub(i, k + 1, pp * q);
                        self.sub(i, k, pp);
                    }
                }
                if l >= nn - 1 {
                    break;
                }
            }
        }

        Ok((1..=n).map(|i| Eigenvalue::new(wr[i], wi[i])).collect())
    }
}
