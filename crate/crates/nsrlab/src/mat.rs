//! Dense row-major matrices and the small set of linear-algebra
//! primitives the rest of the crate is built on.
//!
//! Deliberately minimal: no eigensolver, no SVD, no complex numbers, no
//! sparse formats. Spectral quantities are exposed only through
//! [`spectral_norm`] (power iteration on the Gram matrix) and
//! [`spectral_radius`] (Gelfand's formula). Matrix powers are cached in
//! a ladder because every intermediate power is needed by the lifted
//! horizon maps anyway.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
///
/// Serializes as `{"rows": r, "cols": c, "data": [row-major entries]}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct MatRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl<'de> Deserialize<'de> for Mat {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let repr = MatRepr::deserialize(de)?;
        Mat::new(repr.rows, repr.cols, repr.data).map_err(serde::de::Error::custom)
    }
}

impl Mat {
    /// Builds a matrix from row-major data, validating shape and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Dim(format!("matrix dimensions must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Dim(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{rows}x{cols} matrix data")));
        }
        Ok(Self { rows, cols, data })
    }

    /// All-zeros matrix. Panics on zero dimensions (internal misuse).
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero matrix dimension");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Identity matrix of order `n`.
    pub fn eye(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds entry-wise from `f(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    /// Diagonal matrix from the given entries.
    pub fn from_diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = d[i];
        }
        m
    }

    /// Column vector (n x 1) from a slice.
    pub fn col_vec(v: &[f64]) -> Self {
        Self { rows: v.len(), cols: 1, data: v.to_vec() }
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

    /// Row-major backing slice.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub(crate) fn add_at(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] += v;
    }

    /// Row `r` as a slice.
    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Elementwise sum. Panics on shape mismatch (validated call sites).
    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    /// Elementwise difference. Panics on shape mismatch.
    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "sub shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    /// Matrix product. Panics on inner-dimension mismatch.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out.data[i * n..(i + 1) * n];
            for (p, &a_ip) in a_row.iter().enumerate() {
                if a_ip == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for j in 0..n {
                    o_row[j] += a_ip * b_row[j];
                }
            }
        }
        out
    }

    /// Matrix-vector product. Panics on dimension mismatch.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(v) {
                acc += a * b;
            }
            out[i] = acc;
        }
        out
    }

    /// Trace. Panics if not square.
    pub fn trace(&self) -> f64 {
        assert!(self.is_square(), "trace of non-square matrix");
        (0..self.rows).map(|i| self.data[i * self.cols + i]).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius inner product `<A, B> = sum_ij A_ij B_ij`.
    pub fn frob_inner(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "frob_inner shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Diagonal entries. Panics if not square.
    pub fn diag(&self) -> Vec<f64> {
        assert!(self.is_square(), "diag of non-square matrix");
        (0..self.rows).map(|i| self.data[i * self.cols + i]).collect()
    }

    /// Kronecker product `self (x) other`.
    pub fn kron(&self, other: &Mat) -> Mat {
        let (p, q) = (other.rows, other.cols);
        let mut out = Mat::zeros(self.rows * p, self.cols * q);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let a_ij = self.data[i * self.cols + j];
                if a_ij == 0.0 {
                    continue;
                }
                for r in 0..p {
                    for c in 0..q {
                        out.data[(i * p + r) * out.cols + (j * q + c)] = a_ij * other.data[r * q + c];
                    }
                }
            }
        }
        out
    }

    /// Contiguous sub-block `[r0..r0+nr) x [c0..c0+nc)`.
    pub fn block(&self, r0: usize, c0: usize, nr: usize, nc: usize) -> Mat {
        assert!(r0 + nr <= self.rows && c0 + nc <= self.cols, "block out of range");
        Mat::from_fn(nr, nc, |r, c| self.data[(r0 + r) * self.cols + (c0 + c)])
    }

    /// Writes `src` into the block starting at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, src: &Mat) {
        assert!(r0 + src.rows <= self.rows && c0 + src.cols <= self.cols, "set_block out of range");
        for r in 0..src.rows {
            for c in 0..src.cols {
                self.data[(r0 + r) * self.cols + (c0 + c)] = src.data[r * src.cols + c];
            }
        }
    }
}

/// Symmetric part `(M + M^T)/2`. Errors if `M` is not square.
pub fn sym(m: &Mat) -> Result<Mat> {
    if !m.is_square() {
        return Err(Error::Dim(format!(
            "symmetric part of non-square {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    let n = m.rows();
    Ok(Mat::from_fn(n, n, |r, c| 0.5 * (m.get(r, c) + m.get(c, r))))
}

/// Ladder of matrix powers `[F^0, F^1, ..., F^up_to]`.
///
/// Each rung is one multiply by `F`; the whole ladder is materialized
/// because the lifted horizon maps consume every intermediate power.
pub fn powers(f: &Mat, up_to: usize) -> Result<Vec<Mat>> {
    if !f.is_square() {
        return Err(Error::Dim(format!("powers of non-square {}x{} matrix", f.rows(), f.cols())));
    }
    let mut ladder = Vec::with_capacity(up_to + 1);
    ladder.push(Mat::eye(f.rows()));
    for k in 1..=up_to {
        let next = ladder[k - 1].matmul(f);
        ladder.push(next);
    }
    Ok(ladder)
}

/// Largest singular value via power iteration on the Gram matrix.
///
/// Starts from the normalized all-ones vector; if the Rayleigh quotient
/// stagnates at zero while the matrix is nonzero (start vector in the
/// null space), retries once from a fixed perturbed start. Stops when
/// the Rayleigh estimate is stable to a relative `tol` over three
/// consecutive iterations, with a hard iteration cap.
pub fn spectral_norm(m: &Mat, tol: f64) -> f64 {
    if m.data.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    // Work with the smaller Gram matrix of M^T M and M M^T.
    let gram = if m.cols <= m.rows {
        m.transpose().matmul(m)
    } else {
        m.matmul(&m.transpose())
    };
    let n = gram.rows();
    let tol = if tol > 0.0 { tol } else { 1e-12 };

    let run = |start: &[f64]| -> f64 {
        let mut v = start.to_vec();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= norm;
        }
        let mut lambda = 0.0f64;
        let mut stable = 0u32;
        for _ in 0..50_000 {
            let w = gram.matvec(&v);
            // Rayleigh quotient; v is unit length.
            let rq: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
            let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if wn == 0.0 {
                return 0.0; // start vector is in the null space
            }
            for (x, y) in v.iter_mut().zip(&w) {
                *x = y / wn;
            }
            if (rq - lambda).abs() <= tol * rq.abs().max(f64::MIN_POSITIVE) {
                stable += 1;
                if stable >= 3 {
                    lambda = rq;
                    break;
                }
            } else {
                stable = 0;
            }
            lambda = rq;
        }
        lambda.max(0.0)
    };

    let mut lambda = run(&vec![1.0; n]);
    if lambda == 0.0 {
        // One deterministic perturbation retry: graded start vector.
        let start: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * (i + 1) as f64).collect();
        lambda = run(&start);
    }
    lambda.sqrt()
}

/// Spectral-radius estimate from Gelfand's formula.
///
/// Computes the norm-of-power estimates `||F^k||_2^(1/k)` and
/// `||F^2k||_2^(1/2k)` and applies one Richardson extrapolation in
/// `1/k` (`2 ln r_2k - ln r_k`), which cancels the leading
/// `O(ln k / k)` defect of the raw Gelfand value on defective matrices
/// and is exact for normal ones. `k` below 32 is clamped up to 32 (the
/// estimate is too crude below that). Powers are computed by repeated
/// squaring with magnitude renormalization so that unstable systems at
/// large `k` do not overflow; the accumulated log-scale is folded back
/// into the root.
pub fn spectral_radius(f: &Mat, k: usize) -> Result<f64> {
    if !f.is_square() {
        return Err(Error::Dim(format!(
            "spectral radius of non-square {}x{} matrix",
            f.rows(),
            f.cols()
        )));
    }
    let k = k.max(32);
    let mut base = f.clone();
    let mut base_log = 0.0f64;
    let mut acc: Option<(Mat, f64)> = None;
    let mut e = k;
    loop {
        if e & 1 == 1 {
            acc = Some(match acc {
                None => (base.clone(), base_log),
                Some((m, l)) => {
                    let mut prod = m.matmul(&base);
                    let mut log = l + base_log;
                    renormalize(&mut prod, &mut log);
                    (prod, log)
                }
            });
        }
        e >>= 1;
        if e == 0 {
            break;
        }
        base = base.matmul(&base);
        base_log *= 2.0;
        renormalize(&mut base, &mut base_log);
    }
    let (pk, log_k) = acc.expect("k >= 32");
    let norm_k = spectral_norm(&pk, 1e-13);
    if norm_k == 0.0 {
        return Ok(0.0);
    }
    let mut p2k = pk.matmul(&pk);
    let mut log_2k = 2.0 * log_k;
    renormalize(&mut p2k, &mut log_2k);
    let norm_2k = spectral_norm(&p2k, 1e-13);
    if norm_2k == 0.0 {
        return Ok(0.0); // nilpotent beyond k
    }
    let ln_rk = (norm_k.ln() + log_k) / k as f64;
    let ln_r2k = (norm_2k.ln() + log_2k) / (2 * k) as f64;
    Ok((2.0 * ln_r2k - ln_rk).exp())
}

fn renormalize(m: &mut Mat, log_scale: &mut f64) {
    let s = m.max_abs();
    if s > 1e100 || (s > 0.0 && s < 1e-100) {
        let inv = 1.0 / s;
        for v in m.data.iter_mut() {
            *v *= inv;
        }
        *log_scale += s.ln();
    }
}

/// Diagonal covariance: per-coordinate variances, all required to be
/// finite and nonnegative at construction.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct DiagCov {
    vars: Vec<f64>,
}

impl<'de> Deserialize<'de> for DiagCov {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let vars = Vec::<f64>::deserialize(de)?;
        DiagCov::new(vars).map_err(serde::de::Error::custom)
    }
}

impl DiagCov {
    pub fn new(vars: Vec<f64>) -> Result<Self> {
        if vars.is_empty() {
            return Err(Error::Dim("diagonal covariance must have at least one entry".into()));
        }
        if vars.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("diagonal covariance".into()));
        }
        if let Some(v) = vars.iter().find(|v| **v < 0.0) {
            return Err(Error::NotPsd { what: "diagonal covariance".into(), min_eig: *v });
        }
        Ok(Self { vars })
    }

    /// Isotropic covariance `var * I_dim`.
    pub fn isotropic(dim: usize, var: f64) -> Result<Self> {
        Self::new(vec![var; dim])
    }

    pub fn dim(&self) -> usize {
        self.vars.len()
    }

    #[inline]
    pub fn var(&self, i: usize) -> f64 {
        self.vars[i]
    }

    pub fn vars(&self) -> &[f64] {
        &self.vars
    }

    /// Per-coordinate inverse variances; errors if any variance is zero.
    pub fn inv_vars(&self) -> Result<Vec<f64>> {
        if let Some(v) = self.vars.iter().find(|v| **v <= 0.0) {
            return Err(Error::NotPositiveDefinite {
                what: "diagonal covariance".into(),
                detail: format!("variance entry {v} is not strictly positive"),
            });
        }
        Ok(self.vars.iter().map(|v| 1.0 / v).collect())
    }

    pub fn sqrt_vars(&self) -> Vec<f64> {
        self.vars.iter().map(|v| v.sqrt()).collect()
    }

    pub fn trace(&self) -> f64 {
        self.vars.iter().sum()
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_diag(&self.vars)
    }
}

/// Smallest eigenvalue of a symmetric matrix via cyclic Jacobi sweeps.
///
/// Used only for PSD validation at construction time; not part of the
/// public surface. Runs at most `max_sweeps` full sweeps or until the
/// off-diagonal mass is negligible.
pub(crate) fn jacobi_min_eigenvalue(a: &Mat, max_sweeps: usize) -> f64 {
    assert!(a.is_square());
    let n = a.rows();
    let mut m = a.clone();
    let scale = m.max_abs().max(1.0);
    for _ in 0..max_sweeps {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m.get(p, q).abs();
            }
        }
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= 1e-18 * scale {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                // Stable rotation: t = sign(theta) / (|theta| + sqrt(theta^2 + 1)).
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
            }
        }
    }
    (0..n).map(|i| m.get(i, i)).fold(f64::INFINITY, f64::min)
}

/// PSD floor used by system constructors.
pub(crate) const PSD_FLOOR: f64 = -1e-10;

/// Validates that `a` is symmetric positive semidefinite up to the
/// crate-wide floor, returning its symmetrized form.
///
/// Fast accept: if the Gershgorin lower bound of the symmetrized matrix
/// already clears the floor, no eigenvalue computation is needed.
/// Otherwise the smallest eigenvalue is found with up to 64 cyclic
/// Jacobi sweeps.
pub(crate) fn validate_psd(name: &str, a: &Mat) -> Result<Mat> {
    let s = sym(a).map_err(|_| {
        Error::Dim(format!("{name} must be square, got {}x{}", a.rows(), a.cols()))
    })?;
    let n = s.rows();
    let mut gersh = f64::INFINITY;
    for i in 0..n {
        let mut radius = 0.0;
        for j in 0..n {
            if j != i {
                radius += s.get(i, j).abs();
            }
        }
        gersh = gersh.min(s.get(i, i) - radius);
    }
    if gersh >= PSD_FLOOR {
        return Ok(s);
    }
    let min_eig = jacobi_min_eigenvalue(&s, 64);
    if min_eig < PSD_FLOOR {
        return Err(Error::NotPsd { what: name.into(), min_eig });
    }
    Ok(s)
}

/// Lower-triangular factor `L` with `A ~ L L^T` for a PSD matrix,
/// tolerating semidefinite rank deficiency by zeroing null pivots.
/// Used for sampling from full covariances; inputs are PSD-validated
/// upstream, so a materially negative pivot is a caller bug.
pub(crate) fn cholesky_semidefinite(a: &Mat) -> Mat {
    assert!(a.is_square());
    let n = a.rows();
    let scale = a.max_abs().max(1.0);
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if d <= 1e-13 * scale {
            // Null direction: leave the column zero.
            continue;
        }
        let ljj = d.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut v = a.get(i, j);
            for k in 0..j {
                v -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, v / ljj);
        }
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_against_hand_computed_product() {
        let a = Mat::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Mat::new(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Mat::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn kron_of_identities_is_identity() {
        let k = Mat::eye(2).kron(&Mat::eye(3));
        assert_eq!(k, Mat::eye(6));
    }

    #[test]
    fn new_rejects_bad_shapes_and_nonfinite() {
        assert!(Mat::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Mat::new(0, 2, vec![]).is_err());
        assert!(Mat::new(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn json_roundtrip_preserves_shape_and_data() {
        let a = Mat::new(2, 2, vec![1.0, 2.5, -3.0, 4.0]).unwrap();
        let s = serde_json::to_string(&a).unwrap();
        assert!(s.contains("\"rows\":2"));
        let b: Mat = serde_json::from_str(&s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn json_rejects_inconsistent_length() {
        let bad = r#"{"rows":2,"cols":2,"data":[1.0,2.0,3.0]}"#;
        assert!(serde_json::from_str::<Mat>(bad).is_err());
    }

    #[test]
    fn spectral_norm_of_zero_matrix_is_zero() {
        assert_eq!(spectral_norm(&Mat::zeros(3, 4), 1e-12), 0.0);
    }

    #[test]
    fn spectral_norm_of_diagonal_is_max_abs_entry() {
        let m = Mat::from_diag(&[3.0, -5.0]);
        let s = spectral_norm(&m, 1e-12);
        assert!((s - 5.0).abs() < 1e-9, "got {s}");
    }

    #[test]
    fn spectral_norm_of_unit_rank_one_is_one() {
        // u v^T with unit u, v.
        let u = [0.6, 0.8];
        let v = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt()];
        let m = Mat::from_fn(2, 2, |r, c| u[r] * v[c]);
        let s = spectral_norm(&m, 1e-12);
        assert!((s - 1.0).abs() < 1e-9, "got {s}");
    }

    #[test]
    fn spectral_norm_recovers_when_start_vector_is_in_null_space() {
        // M^T M has eigenvector (1,1) with eigenvalue 0: M = [1 -1; 0 0] has
        // Gram [[1,-1],[-1,1]], all-ones start maps to zero.
        let m = Mat::new(2, 2, vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let s = spectral_norm(&m, 1e-12);
        assert!((s - 2f64.sqrt()).abs() < 1e-9, "got {s}");
    }

    #[test]
    fn spectral_radius_examples() {
        let d = Mat::from_diag(&[0.5, 0.2]);
        let r = spectral_radius(&d, 64).unwrap();
        assert!((r - 0.5).abs() < 1e-6, "diagonal: got {r}");

        let phi = 0.3f64;
        let rot = Mat::new(2, 2, vec![phi.cos(), -phi.sin(), phi.sin(), phi.cos()]).unwrap();
        let r = spectral_radius(&rot, 256).unwrap();
        assert!((r - 1.0).abs() < 1e-3, "rotation: got {r}");

        let jordan = Mat::new(2, 2, vec![1.05, 0.1, 0.0, 1.05]).unwrap();
        let r = spectral_radius(&jordan, 256).unwrap();
        assert!((r - 1.05).abs() < 1e-2, "jordan-like: got {r}");
    }

    #[test]
    fn spectral_radius_survives_extreme_growth_without_overflow() {
        let m = Mat::from_diag(&[50.0, 1.0]);
        let r = spectral_radius(&m, 512).unwrap();
        assert!((r - 50.0).abs() / 50.0 < 1e-10, "got {r}");
    }

    #[test]
    fn powers_ladder_matches_repeated_multiplication() {
        let f = Mat::new(2, 2, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let ladder = powers(&f, 5).unwrap();
        assert_eq!(ladder[0], Mat::eye(2));
        let mut acc = Mat::eye(2);
        for p in ladder.iter().take(6) {
            assert_eq!(p, &acc);
            acc = acc.matmul(&f);
        }
    }

    #[test]
    fn jacobi_min_eigenvalue_on_known_spectrum() {
        // Symmetric with eigenvalues 1 and 3: [[2,1],[1,2]].
        let a = Mat::new(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let min = jacobi_min_eigenvalue(&a, 64);
        assert!((min - 1.0).abs() < 1e-10, "got {min}");
    }

    #[test]
    fn validate_psd_accepts_psd_and_rejects_indefinite() {
        let ok = Mat::new(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        assert!(validate_psd("Q", &ok).is_ok());
        let bad = Mat::new(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        match validate_psd("Q", &bad) {
            Err(Error::NotPsd { min_eig, .. }) => assert!((min_eig + 1.0).abs() < 1e-9),
            other => panic!("expected NotPsd, got {other:?}"),
        }
    }

    #[test]
    fn cholesky_semidefinite_reconstructs_psd_and_handles_rank_deficiency() {
        let a = Mat::new(2, 2, vec![4.0, 2.0, 2.0, 2.0]).unwrap();
        let l = cholesky_semidefinite(&a);
        let r = l.matmul(&l.transpose());
        assert!(r.sub(&a).max_abs() < 1e-12);

        // Rank-1: outer product of (1, 2).
        let a = Mat::new(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        let l = cholesky_semidefinite(&a);
        let r = l.matmul(&l.transpose());
        assert!(r.sub(&a).max_abs() < 1e-12);
    }
}
