//! Dense complex linear algebra for small quantum registers.
//!
//! Matrices are row-major `Vec<C64>`. Dimensions stay small (a few hundred at
//! most) so plain triple loops are fast enough and keep the code auditable.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Largest number of entries `kron` will allocate.
pub const KRON_MAX_ENTRIES: usize = 1 << 20;
/// Trace and residual tolerance.
pub const HERMITIAN_TOL: f64 = 1e-10;
/// Entrywise Hermiticity tolerance for `eigh` input, relative to the largest entry.
pub const EIGH_HERMITIAN_TOL: f64 = 1e-12;
/// Eigenvalues of a density operator in `[-NEG_EIGEN_TOL, 0)` are clamped.
pub const NEG_EIGEN_TOL: f64 = 1e-10;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![ZERO; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = ONE;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = C64::new(*v, 0.0);
        }
        m
    }

    /// `|a><b|`
    pub fn outer(a: &[C64], b: &[C64]) -> Self {
        Self::from_fn(a.len(), b.len(), |i, j| a[i] * b[j].conj())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: C64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: C64) {
        self.data[i * self.cols + j] += v;
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i).conj())
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn scale(&self, s: C64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn scale_real(&self, s: f64) -> Self {
        self.scale(C64::new(s, 0.0))
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: C64, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (n, m, p) = (self.rows, self.cols, other.cols);
        let mut out = vec![ZERO; n * p];
        for i in 0..n {
            let row = &mut out[i * p..(i + 1) * p];
            for k in 0..m {
                let a = self.data[i * m + k];
                if a == ZERO {
                    continue;
                }
                let orow = &other.data[k * p..(k + 1) * p];
                for (o, b) in row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        Ok(Self { rows: n, cols: p, data: out })
    }

    pub fn apply(&self, v: &[C64]) -> Result<Vec<C64>> {
        if v.len() != self.cols {
            return Err(Error::Dimension(format!("vector of {} for {} columns", v.len(), self.cols)));
        }
        Ok((0..self.rows)
            .map(|i| self.data[i * self.cols..(i + 1) * self.cols].iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `<a|M|b>`
    pub fn sandwich(&self, a: &[C64], b: &[C64]) -> Result<C64> {
        let mb = self.apply(b)?;
        Ok(a.iter().zip(&mb).map(|(x, y)| x.conj() * y).sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn hermitian_deviation(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let n = self.rows;
        let mut dev = 0.0f64;
        for i in 0..n {
            for j in i..n {
                dev = dev.max((self.get(i, j) - self.get(j, i).conj()).norm());
            }
        }
        dev
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermitian_deviation() <= tol
    }

    /// `(M + M^dagger) / 2`
    pub fn symmetrized(&self) -> Self {
        let n = self.rows;
        Self::from_fn(n, n, |i, j| (self.get(i, j) + self.get(j, i).conj()) * 0.5)
    }

    pub fn kron(&self, other: &Self) -> Result<Self> {
        let rows = self.rows * other.rows;
        let cols = self.cols * other.cols;
        let entries = rows.saturating_mul(cols);
        if entries > KRON_MAX_ENTRIES {
            return Err(Error::TooLarge { entries, cap: KRON_MAX_ENTRIES });
        }
        let mut out = Self::zeros(rows, cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let a = self.get(i, j);
                if a == ZERO {
                    continue;
                }
                for k in 0..other.rows {
                    for l in 0..other.cols {
                        out.set(i * other.rows + k, j * other.cols + l, a * other.get(k, l));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Partial trace over a bipartite `d1 x d2` system. `keep` is 0 or 1.
    pub fn partial_trace(&self, d1: usize, d2: usize, keep: usize) -> Result<Self> {
        if !self.is_square() || self.rows != d1 * d2 {
            return Err(Error::Dimension(format!(
                "partial trace of {}x{} over {d1}x{d2}",
                self.rows, self.cols
            )));
        }
        let n = self.rows;
        match keep {
            0 => Ok(Self::from_fn(d1, d1, |i, j| {
                (0..d2).map(|k| self.data[(i * d2 + k) * n + j * d2 + k]).sum()
            })),
            1 => Ok(Self::from_fn(d2, d2, |i, j| {
                (0..d1).map(|k| self.data[(k * d2 + i) * n + k * d2 + j]).sum()
            })),
            _ => Err(Error::InvalidParameter(format!("keep index {keep} for two subsystems"))),
        }
    }

    /// Sum of singular values, for Hermitian input.
    pub fn trace_norm_hermitian(&self) -> Result<f64> {
        Ok(eigh(self)?.values.iter().map(|v| v.abs()).sum())
    }

    fn to_nalgebra(&self) -> DMatrix<C64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j))
    }

    fn from_nalgebra(m: &DMatrix<C64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    pub fn column(&self, j: usize) -> Vec<C64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }
}

/// Ascending eigenvalues with eigenvectors stored as columns.
#[derive(Clone, Debug)]
pub struct Eigh {
    pub values: Vec<f64>,
    pub vectors: ComplexMatrix,
}

impl Eigh {
    pub fn vector(&self, k: usize) -> Vec<C64> {
        self.vectors.column(k)
    }
}

/// Hermitian eigendecomposition. The input is symmetrized first and the
/// residual `max_k ||H v_k - lambda_k v_k||` is checked against the scale
/// of the matrix.
pub fn eigh(h: &ComplexMatrix) -> Result<Eigh> {
    if !h.is_square() {
        return Err(Error::Dimension(format!("eigh of {}x{}", h.rows, h.cols)));
    }
    let scale = h.max_abs().max(1.0);
    let dev = h.hermitian_deviation();
    if dev > EIGH_HERMITIAN_TOL * scale {
        return Err(Error::NotHermitian(dev));
    }
    let n = h.rows;
    if n == 0 {
        return Ok(Eigh { values: vec![], vectors: ComplexMatrix::zeros(0, 0) });
    }
    let sym = h.symmetrized();
    let dec = sym.to_nalgebra().symmetric_eigen();
    let raw = ComplexMatrix::from_nalgebra(&dec.eigenvectors);
    let tol = HERMITIAN_TOL * scale * (n as f64).sqrt();
    let first = sorted_eigh(&sym, dec.eigenvalues.as_slice(), &raw)?;
    if first.1 <= tol {
        return Ok(first.0);
    }
    // the implicit QR step occasionally stalls on clustered complex spectra
    let (values, vectors) = jacobi_eigh(&sym);
    let second = sorted_eigh(&sym, &values, &vectors)?;
    if second.1 > tol {
        return Err(Error::EigenResidual(first.1.min(second.1)));
    }
    Ok(second.0)
}

fn sorted_eigh(sym: &ComplexMatrix, values: &[f64], vectors: &ComplexMatrix) -> Result<(Eigh, f64)> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let values: Vec<f64> = order.iter().map(|&k| values[k]).collect();
    let vectors = ComplexMatrix::from_fn(n, n, |i, j| vectors.get(i, order[j]));
    let hv = sym.matmul(&vectors)?;
    let mut residual = 0.0f64;
    for (k, lam) in values.iter().enumerate() {
        let r: f64 = (0..n).map(|i| (hv.get(i, k) - vectors.get(i, k) * lam).norm_sqr()).sum::<f64>().sqrt();
        residual = residual.max(r);
    }
    Ok((Eigh { values, vectors }, residual))
}

/// Cyclic complex Jacobi rotations.
fn jacobi_eigh(h: &ComplexMatrix) -> (Vec<f64>, ComplexMatrix) {
    let n = h.rows;
    let mut a = h.clone();
    let mut v = ComplexMatrix::identity(n);
    let total = a.frobenius_norm().max(f64::MIN_POSITIVE);
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a.get(i, j).norm_sqr()).sum();
        if off.sqrt() <= 1e-15 * total {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let b = a.get(p, q);
                let mag = b.norm();
                if mag <= 1e-300 {
                    continue;
                }
                let phase = b / mag;
                let theta = (a.get(q, q).re - a.get(p, p).re) / (2.0 * mag);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // columns p, q of U: (c, -s e^{-i phi}), (s, c e^{-i phi})
                let u_pp = C64::new(c, 0.0);
                let u_pq = C64::new(s, 0.0);
                let u_qp = -phase.conj() * s;
                let u_qq = phase.conj() * c;
                for k in 0..n {
                    let (akp, akq) = (a.get(k, p), a.get(k, q));
                    a.set(k, p, akp * u_pp + akq * u_qp);
                    a.set(k, q, akp * u_pq + akq * u_qq);
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, vkp * u_pp + vkq * u_qp);
                    v.set(k, q, vkp * u_pq + vkq * u_qq);
                }
                for k in 0..n {
                    let (apk, aqk) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, u_pp.conj() * apk + u_qp.conj() * aqk);
                    a.set(q, k, u_pq.conj() * apk + u_qq.conj() * aqk);
                }
                a.set(p, q, ZERO);
                a.set(q, p, ZERO);
            }
        }
    }
    ((0..n).map(|i| a.get(i, i).re).collect(), v)
}

/// `exp(-i t H)` for Hermitian `H`.
pub fn herm_exp(h: &ComplexMatrix, t: f64) -> Result<ComplexMatrix> {
    let e = eigh(h)?;
    let n = h.rows();
    let phases: Vec<C64> = e.values.iter().map(|v| C64::from_polar(1.0, -t * v)).collect();
    Ok(ComplexMatrix::from_fn(n, n, |i, j| {
        (0..n).map(|k| e.vectors.get(i, k) * phases[k] * e.vectors.get(j, k).conj()).sum()
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PureState {
    amps: Vec<C64>,
}

impl PureState {
    /// Normalizes the input; errors on a zero vector.
    pub fn new(amps: Vec<C64>) -> Result<Self> {
        let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if !(norm > 1e-300) || !norm.is_finite() {
            return Err(Error::ZeroNorm);
        }
        Ok(Self { amps: amps.into_iter().map(|a| a / norm).collect() })
    }

    pub fn basis(dim: usize, k: usize) -> Self {
        let mut amps = vec![ZERO; dim];
        amps[k] = ONE;
        Self { amps }
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        loop {
            let amps: Vec<C64> = (0..dim)
                .map(|_| C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
                .collect();
            if let Ok(s) = Self::new(amps) {
                return s;
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amps(&self) -> &[C64] {
        &self.amps
    }

    pub fn into_amps(self) -> Vec<C64> {
        self.amps
    }

    /// `<self|other>`
    pub fn inner(&self, other: &Self) -> C64 {
        inner(&self.amps, &other.amps)
    }

    pub fn projector(&self) -> ComplexMatrix {
        ComplexMatrix::outer(&self.amps, &self.amps)
    }

    pub fn expectation(&self, op: &ComplexMatrix) -> Result<C64> {
        op.sandwich(&self.amps, &self.amps)
    }

    pub fn with_phase(&self, phase: C64) -> Self {
        Self { amps: self.amps.iter().map(|a| a * phase).collect() }
    }
}

pub fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm(a: &[C64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

pub fn fidelity_pure(a: &PureState, b: &PureState) -> f64 {
    a.inner(b).norm_sqr()
}

/// Validated density operator: Hermitian, unit trace, positive semidefinite.
#[derive(Clone, Debug)]
pub struct DensityOperator {
    m: ComplexMatrix,
}

impl DensityOperator {
    pub fn new(m: ComplexMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension(format!("density operator {}x{}", m.rows(), m.cols())));
        }
        let dev = m.hermitian_deviation();
        if dev > HERMITIAN_TOL {
            return Err(Error::NotHermitian(dev));
        }
        let tr = m.trace();
        if (tr.re - 1.0).abs() > HERMITIAN_TOL || tr.im.abs() > HERMITIAN_TOL {
            return Err(Error::InvalidDensity(format!("trace {tr}")));
        }
        let e = eigh(&m)?;
        let min = e.values.first().copied().unwrap_or(0.0);
        if min < -NEG_EIGEN_TOL {
            return Err(Error::InvalidDensity(format!("negative eigenvalue {min:e}")));
        }
        Ok(Self { m: m.symmetrized() })
    }

    /// Divides by the trace before validating.
    pub fn normalized(m: ComplexMatrix) -> Result<Self> {
        let tr = m.trace().re;
        if !(tr > 0.0) {
            return Err(Error::InvalidDensity(format!("trace {tr} cannot be normalized")));
        }
        Self::new(m.scale_real(1.0 / tr))
    }

    pub fn from_pure(psi: &PureState) -> Self {
        Self { m: psi.projector() }
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self { m: ComplexMatrix::identity(dim).scale_real(1.0 / dim as f64) }
    }

    pub fn mixture(parts: &[(f64, &DensityOperator)]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidParameter("empty mixture".into()))?;
        let d = first.1.dim();
        let mut acc = ComplexMatrix::zeros(d, d);
        for (w, rho) in parts {
            if *w < 0.0 {
                return Err(Error::InvalidParameter(format!("negative mixture weight {w}")));
            }
            acc.axpy(C64::new(*w, 0.0), rho.matrix())?;
        }
        Self::new(acc)
    }

    /// Skips validation. Callers guarantee the invariants up to rounding.
    pub(crate) fn from_matrix_unchecked(m: ComplexMatrix) -> Self {
        Self { m }
    }

    pub fn dim(&self) -> usize {
        self.m.rows()
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.m
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.m
    }

    /// Spectrum with small negative eigenvalues clamped to zero.
    pub fn spectrum(&self) -> Result<Eigh> {
        let mut e = eigh(&self.m)?;
        for v in &mut e.values {
            if *v < 0.0 {
                if *v < -NEG_EIGEN_TOL {
                    return Err(Error::InvalidDensity(format!("negative eigenvalue {v:e}")));
                }
                *v = 0.0;
            }
        }
        Ok(e)
    }

    pub fn expectation(&self, op: &ComplexMatrix) -> Result<C64> {
        Ok(op.matmul(&self.m)?.trace())
    }

    pub fn purity(&self) -> f64 {
        self.m.data().iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn fidelity_with_pure(&self, psi: &PureState) -> Result<f64> {
        Ok(self.m.sandwich(psi.amps(), psi.amps())?.re)
    }

    pub fn kron(&self, other: &Self) -> Result<Self> {
        Ok(Self { m: self.m.kron(&other.m)? })
    }
}

/// `(1/2) ||a - b||_1`
pub fn trace_distance(a: &DensityOperator, b: &DensityOperator) -> Result<f64> {
    Ok(0.5 * a.matrix().sub(b.matrix())?.trace_norm_hermitian()?)
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}
