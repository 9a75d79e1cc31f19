//! Preconditioner factors on matrix Lie groups.
//!
//! The preconditioner is `P = QᵀQ`. `Q` is never stored dense on the update
//! path; it lives in one of a few sparse group representations:
//!
//! - `Diagonal`: positive diagonal matrices over the flattened parameter.
//! - `UpperTriangular`: invertible upper triangular with positive diagonal.
//! - `Kronecker`: `Q = Q2 ⊗ Q1` acting on a matrix parameter, `Q1` on rows
//!   and `Q2` on columns, each factor itself diagonal, upper triangular, or
//!   diagonal-plus-last-column.
//! - `ScalingNormalization`: Kronecker with diagonal `Q1` and
//!   diagonal-plus-last-column `Q2` (scales output features, normalizes
//!   augmented input features).
//! - `ScalingWhitening`: Kronecker with diagonal `Q1` and upper triangular
//!   `Q2` (scales output features, whitens augmented input features).
//!
//! The stochastic relative gradient of the criterion `uᵀPu + vᵀP⁻¹v` under a
//! multiplicative perturbation `δQ = E·Q` is
//! `R = 2·proj(Q u uᵀ Qᵀ − Q⁻ᵀ v vᵀ Q⁻¹)`, projected onto the group's
//! tangent pattern, and `Q` is updated as `Q ← (I − μ₀·R/‖R‖)·Q` with the
//! max-abs norm. With `μ₀ < 1` every factor's diagonal keeps its sign, so
//! the iteration never leaves the group. Nothing here inverts a matrix:
//! `Q⁻ᵀv` is a triangular or sparse solve.
//!
//! A `QFactor` is exclusively owned by one optimizer instance and never
//! shared internally; read-only snapshots (`as_dense`, serialization) may be
//! taken between updates. All operations are deterministic in their inputs.

use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::matrix::{kron, kron_reshape, vec_mat, Matrix, Vector};

/// Densification cap for [`QFactor::as_dense`].
pub const DENSE_CAP: usize = 4096;

/// Kronecker rebalance period, in preconditioner updates.
const REBALANCE_PERIOD: u64 = 100;

/// Sparse structure of one Kronecker factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    Diagonal,
    UpperTriangular,
    /// Nonzeros only on the diagonal and the last column.
    DiagLastCol,
}

impl FactorKind {
    fn name(self) -> &'static str {
        match self {
            FactorKind::Diagonal => "diagonal",
            FactorKind::UpperTriangular => "triangular",
            FactorKind::DiagLastCol => "diaglastcol",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "diagonal" => Ok(FactorKind::Diagonal),
            "triangular" => Ok(FactorKind::UpperTriangular),
            "diaglastcol" => Ok(FactorKind::DiagLastCol),
            other => Err(Error::InvalidGroup { reason: format!("unknown factor kind `{other}`") }),
        }
    }
}

/// The Lie group a preconditioner lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    /// Positive diagonal over the flattened parameter.
    Diagonal,
    /// Upper triangular with positive diagonal over the flattened parameter.
    UpperTriangular,
    /// Kronecker with diagonal row factor and diagonal-plus-last-column
    /// column factor.
    ScalingNormalization,
    /// Kronecker with diagonal row factor and upper triangular column factor.
    ScalingWhitening,
    /// General two-factor Kronecker product; factors are non-Kronecker kinds.
    Kronecker { row: FactorKind, col: FactorKind },
}

impl GroupKind {
    /// Kronecker factor kinds for the matrix-shaped groups, `None` for the
    /// flattened vector groups.
    fn factors(self) -> Option<(FactorKind, FactorKind)> {
        match self {
            GroupKind::Diagonal | GroupKind::UpperTriangular => None,
            GroupKind::ScalingNormalization => Some((FactorKind::Diagonal, FactorKind::DiagLastCol)),
            GroupKind::ScalingWhitening => Some((FactorKind::Diagonal, FactorKind::UpperTriangular)),
            GroupKind::Kronecker { row, col } => Some((row, col)),
        }
    }

    pub fn name(self) -> String {
        match self {
            GroupKind::Diagonal => "diagonal".into(),
            GroupKind::UpperTriangular => "triangular".into(),
            GroupKind::ScalingNormalization => "scalenorm".into(),
            GroupKind::ScalingWhitening => "scalewhiten".into(),
            GroupKind::Kronecker { row, col } => format!("kron:{}:{}", row.name(), col.name()),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "diagonal" => Ok(GroupKind::Diagonal),
            "triangular" => Ok(GroupKind::UpperTriangular),
            "scalenorm" => Ok(GroupKind::ScalingNormalization),
            "scalewhiten" => Ok(GroupKind::ScalingWhitening),
            other => {
                if let Some(rest) = other.strip_prefix("kron:") {
                    let mut it = rest.splitn(2, ':');
                    let row = it.next().unwrap_or("");
                    let col = it.next().ok_or_else(|| Error::InvalidGroup {
                        reason: format!("kron group needs two factors, got `{other}`"),
                    })?;
                    Ok(GroupKind::Kronecker { row: FactorKind::parse(row)?, col: FactorKind::parse(col)? })
                } else {
                    Err(Error::InvalidGroup { reason: format!("unknown group `{other}`") })
                }
            }
        }
    }
}

/// One structured factor; the storage holds exactly the entries the group's
/// sparsity pattern admits.
#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    /// Diagonal entries.
    Diagonal(Vec<f64>),
    /// Row-major packed upper triangle: row i holds columns i..n.
    UpperTriangular { n: usize, packed: Vec<f64> },
    /// Diagonal `d` (length n) and last-column entries `col` for rows
    /// `0..n-1`.
    DiagLastCol { d: Vec<f64>, col: Vec<f64> },
}

fn triu_len(n: usize) -> usize {
    n * (n + 1) / 2
}

fn triu_idx(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j && j < n);
    i * (2 * n - i + 1) / 2 + (j - i)
}

impl Factor {
    fn identity(kind: FactorKind, n: usize, alpha: f64) -> Factor {
        match kind {
            FactorKind::Diagonal => Factor::Diagonal(vec![alpha; n]),
            FactorKind::UpperTriangular => {
                let mut packed = vec![0.0; triu_len(n)];
                for i in 0..n {
                    packed[triu_idx(n, i, i)] = alpha;
                }
                Factor::UpperTriangular { n, packed }
            }
            FactorKind::DiagLastCol => {
                Factor::DiagLastCol { d: vec![alpha; n], col: vec![0.0; n.saturating_sub(1)] }
            }
        }
    }

    pub fn kind(&self) -> FactorKind {
        match self {
            Factor::Diagonal(_) => FactorKind::Diagonal,
            Factor::UpperTriangular { .. } => FactorKind::UpperTriangular,
            Factor::DiagLastCol { .. } => FactorKind::DiagLastCol,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Factor::Diagonal(d) => d.len(),
            Factor::UpperTriangular { n, .. } => *n,
            Factor::DiagLastCol { d, .. } => d.len(),
        }
    }

    fn diag(&self, i: usize) -> f64 {
        match self {
            Factor::Diagonal(d) => d[i],
            Factor::UpperTriangular { n, packed } => packed[triu_idx(*n, i, i)],
            Factor::DiagLastCol { d, .. } => d[i],
        }
    }

    fn zero_diag_row(&self) -> Option<usize> {
        (0..self.dim()).find(|&i| self.diag(i) == 0.0)
    }

    pub fn to_dense(&self) -> Matrix {
        let n = self.dim();
        match self {
            Factor::Diagonal(d) => Matrix::diag(d),
            Factor::UpperTriangular { n, packed } => {
                Matrix::from_fn(*n, *n, |i, j| if i <= j { packed[triu_idx(*n, i, j)] } else { 0.0 })
            }
            Factor::DiagLastCol { d, col } => Matrix::from_fn(n, n, |i, j| {
                if i == j {
                    d[i]
                } else if j == n - 1 {
                    col[i]
                } else {
                    0.0
                }
            }),
        }
    }

    /// All stored entries, in canonical order.
    pub fn entries(&self) -> Vec<f64> {
        match self {
            Factor::Diagonal(d) => d.clone(),
            Factor::UpperTriangular { packed, .. } => packed.clone(),
            Factor::DiagLastCol { d, col } => {
                let mut out = d.clone();
                out.extend_from_slice(col);
                out
            }
        }
    }

    fn from_entries(kind: FactorKind, n: usize, entries: &[f64]) -> Result<Factor> {
        match kind {
            FactorKind::Diagonal => {
                if entries.len() != n {
                    return Err(Error::InvalidData { expected: n, got: entries.len() });
                }
                Ok(Factor::Diagonal(entries.to_vec()))
            }
            FactorKind::UpperTriangular => {
                if entries.len() != triu_len(n) {
                    return Err(Error::InvalidData { expected: triu_len(n), got: entries.len() });
                }
                Ok(Factor::UpperTriangular { n, packed: entries.to_vec() })
            }
            FactorKind::DiagLastCol => {
                let want = n + n.saturating_sub(1);
                if entries.len() != want {
                    return Err(Error::InvalidData { expected: want, got: entries.len() });
                }
                Ok(Factor::DiagLastCol { d: entries[..n].to_vec(), col: entries[n..].to_vec() })
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        match self {
            Factor::Diagonal(d) => d.iter().fold(0.0, |m, x| f64::max(m, x.abs())),
            Factor::UpperTriangular { packed, .. } => {
                packed.iter().fold(0.0, |m, x| f64::max(m, x.abs()))
            }
            Factor::DiagLastCol { d, col } => {
                d.iter().chain(col).fold(0.0, |m, x| f64::max(m, x.abs()))
            }
        }
    }

    #[cfg(test)]
    fn frobenius_dot(&self, other: &Factor) -> f64 {
        self.entries().iter().zip(other.entries()).map(|(a, b)| a * b).sum()
    }

    fn scale_all(&mut self, c: f64) {
        match self {
            Factor::Diagonal(d) => d.iter_mut().for_each(|x| *x *= c),
            Factor::UpperTriangular { packed, .. } => packed.iter_mut().for_each(|x| *x *= c),
            Factor::DiagLastCol { d, col } => {
                d.iter_mut().for_each(|x| *x *= c);
                col.iter_mut().for_each(|x| *x *= c);
            }
        }
    }

    /// `F · x`.
    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        debug_assert_eq!(x.len(), n);
        match self {
            Factor::Diagonal(d) => d.iter().zip(x).map(|(a, b)| a * b).collect(),
            Factor::UpperTriangular { n, packed } => {
                let mut y = vec![0.0; *n];
                for i in 0..*n {
                    let base = triu_idx(*n, i, i);
                    let mut acc = 0.0;
                    for j in i..*n {
                        acc += packed[base + (j - i)] * x[j];
                    }
                    y[i] = acc;
                }
                y
            }
            Factor::DiagLastCol { d, col } => {
                let mut y = vec![0.0; n];
                let last = x[n - 1];
                for i in 0..n - 1 {
                    y[i] = d[i] * x[i] + col[i] * last;
                }
                y[n - 1] = d[n - 1] * last;
                y
            }
        }
    }

    /// `Fᵀ · x`.
    fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        debug_assert_eq!(x.len(), n);
        match self {
            Factor::Diagonal(d) => d.iter().zip(x).map(|(a, b)| a * b).collect(),
            Factor::UpperTriangular { n, packed } => {
                let mut y = vec![0.0; *n];
                for i in 0..*n {
                    let base = triu_idx(*n, i, i);
                    let xi = x[i];
                    if xi == 0.0 {
                        continue;
                    }
                    for j in i..*n {
                        y[j] += packed[base + (j - i)] * xi;
                    }
                }
                y
            }
            Factor::DiagLastCol { d, col } => {
                let mut y = vec![0.0; n];
                for i in 0..n - 1 {
                    y[i] = d[i] * x[i];
                }
                let mut acc = d[n - 1] * x[n - 1];
                for i in 0..n - 1 {
                    acc += col[i] * x[i];
                }
                y[n - 1] = acc;
                y
            }
        }
    }

    /// Solves `F y = x` by back substitution or sparse elimination.
    fn solve(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        match self {
            Factor::Diagonal(d) => d.iter().zip(x).map(|(a, b)| b / a).collect(),
            Factor::UpperTriangular { n, packed } => {
                let mut y = x.to_vec();
                for i in (0..*n).rev() {
                    let base = triu_idx(*n, i, i);
                    let mut acc = y[i];
                    for j in i + 1..*n {
                        acc -= packed[base + (j - i)] * y[j];
                    }
                    y[i] = acc / packed[base];
                }
                y
            }
            Factor::DiagLastCol { d, col } => {
                let mut y = vec![0.0; n];
                y[n - 1] = x[n - 1] / d[n - 1];
                for i in 0..n - 1 {
                    y[i] = (x[i] - col[i] * y[n - 1]) / d[i];
                }
                y
            }
        }
    }

    /// Solves `Fᵀ y = x`.
    fn solve_t(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        match self {
            Factor::Diagonal(d) => d.iter().zip(x).map(|(a, b)| b / a).collect(),
            Factor::UpperTriangular { n, packed } => {
                let mut y = x.to_vec();
                for i in 0..*n {
                    let mut acc = y[i];
                    for j in 0..i {
                        acc -= packed[triu_idx(*n, j, i)] * y[j];
                    }
                    y[i] = acc / packed[triu_idx(*n, i, i)];
                }
                y
            }
            Factor::DiagLastCol { d, col } => {
                let mut y = vec![0.0; n];
                for i in 0..n - 1 {
                    y[i] = x[i] / d[i];
                }
                let mut acc = x[n - 1];
                for i in 0..n - 1 {
                    acc -= col[i] * y[i];
                }
                y[n - 1] = acc / d[n - 1];
                y
            }
        }
    }

    /// Applies a vector op column by column.
    fn apply_cols(&self, x: &Matrix, op: impl Fn(&Factor, &[f64]) -> Vec<f64>) -> Matrix {
        let (r, c) = x.shape();
        debug_assert_eq!(r, self.dim());
        let mut out = Matrix::zeros(r, c);
        let mut buf = vec![0.0; r];
        for j in 0..c {
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = x.get(i, j);
            }
            let y = op(self, &buf);
            for (i, val) in y.iter().enumerate() {
                out.set(i, j, *val);
            }
        }
        out
    }

    fn left_mul(&self, x: &Matrix) -> Matrix {
        self.apply_cols(x, Factor::matvec)
    }

    fn left_mul_t(&self, x: &Matrix) -> Matrix {
        self.apply_cols(x, Factor::matvec_t)
    }

    fn left_solve_t(&self, x: &Matrix) -> Matrix {
        self.apply_cols(x, Factor::solve_t)
    }

    /// Structured product `self · other`; each pattern is closed under
    /// multiplication, so the result stays in storage form.
    fn mul_structured(&self, other: &Factor) -> Factor {
        match (self, other) {
            (Factor::Diagonal(a), Factor::Diagonal(b)) => {
                Factor::Diagonal(a.iter().zip(b).map(|(x, y)| x * y).collect())
            }
            (Factor::UpperTriangular { n, packed: a }, Factor::UpperTriangular { packed: b, .. }) => {
                let n = *n;
                let mut out = vec![0.0; triu_len(n)];
                for i in 0..n {
                    for j in i..n {
                        let mut acc = 0.0;
                        for k in i..=j {
                            acc += a[triu_idx(n, i, k)] * b[triu_idx(n, k, j)];
                        }
                        out[triu_idx(n, i, j)] = acc;
                    }
                }
                Factor::UpperTriangular { n, packed: out }
            }
            (Factor::DiagLastCol { d: ad, col: ac }, Factor::DiagLastCol { d: bd, col: bc }) => {
                let n = ad.len();
                let mut d = vec![0.0; n];
                let mut col = vec![0.0; n.saturating_sub(1)];
                for i in 0..n {
                    d[i] = ad[i] * bd[i];
                }
                for i in 0..n.saturating_sub(1) {
                    col[i] = ad[i] * bc[i] + ac[i] * bd[n - 1];
                }
                Factor::DiagLastCol { d, col }
            }
            _ => unreachable!("mismatched factor kinds"),
        }
    }

    /// `I − s·R` in the factor's own pattern.
    fn identity_minus_scaled(r: &Factor, s: f64) -> Factor {
        match r {
            Factor::Diagonal(d) => Factor::Diagonal(d.iter().map(|x| 1.0 - s * x).collect()),
            Factor::UpperTriangular { n, packed } => {
                let mut out: Vec<f64> = packed.iter().map(|x| -s * x).collect();
                for i in 0..*n {
                    out[triu_idx(*n, i, i)] += 1.0;
                }
                Factor::UpperTriangular { n: *n, packed: out }
            }
            Factor::DiagLastCol { d, col } => Factor::DiagLastCol {
                d: d.iter().map(|x| 1.0 - s * x).collect(),
                col: col.iter().map(|x| -s * x).collect(),
            },
        }
    }
}

/// Projected Gram difference over rows: `2·pattern(A·Aᵀ − B·Bᵀ)`.
fn gram_rows_projected(a: &Matrix, b: &Matrix, kind: FactorKind) -> Factor {
    let m = a.rows();
    let dot_rows = |x: &Matrix, i: usize, j: usize| -> f64 {
        x.row(i).iter().zip(x.row(j)).map(|(p, q)| p * q).sum()
    };
    project_pattern(m, kind, |i, j| 2.0 * (dot_rows(a, i, j) - dot_rows(b, i, j)))
}

/// Projected Gram difference over columns: `2·pattern(Aᵀ·A − Bᵀ·B)`.
fn gram_cols_projected(a: &Matrix, b: &Matrix, kind: FactorKind) -> Factor {
    let n = a.cols();
    let dot_cols = |x: &Matrix, i: usize, j: usize| -> f64 {
        (0..x.rows()).map(|r| x.get(r, i) * x.get(r, j)).sum()
    };
    project_pattern(n, kind, |i, j| 2.0 * (dot_cols(a, i, j) - dot_cols(b, i, j)))
}

fn project_pattern(n: usize, kind: FactorKind, entry: impl Fn(usize, usize) -> f64) -> Factor {
    match kind {
        FactorKind::Diagonal => Factor::Diagonal((0..n).map(|i| entry(i, i)).collect()),
        FactorKind::UpperTriangular => {
            let mut packed = vec![0.0; triu_len(n)];
            for i in 0..n {
                for j in i..n {
                    packed[triu_idx(n, i, j)] = entry(i, j);
                }
            }
            Factor::UpperTriangular { n, packed }
        }
        FactorKind::DiagLastCol => Factor::DiagLastCol {
            d: (0..n).map(|i| entry(i, i)).collect(),
            col: (0..n.saturating_sub(1)).map(|i| entry(i, n - 1)).collect(),
        },
    }
}

/// Relative gradient of the preconditioner criterion, in the same structured
/// storage as the factor(s) it updates.
#[derive(Debug, Clone)]
pub enum RelativeGradient {
    Single(Factor),
    Pair { row: Factor, col: Factor },
}

impl RelativeGradient {
    /// Max-abs norm over all stored entries.
    pub fn norm(&self) -> f64 {
        match self {
            RelativeGradient::Single(f) => f.max_abs(),
            RelativeGradient::Pair { row, col } => row.max_abs().max(col.max_abs()),
        }
    }

    /// Flips the sign of every entry; hook for the selftest's
    /// mutation-style descent check.
    pub fn negated(&self) -> RelativeGradient {
        let neg = |f: &Factor| {
            let mut g = f.clone();
            g.scale_all(-1.0);
            g
        };
        match self {
            RelativeGradient::Single(f) => RelativeGradient::Single(neg(f)),
            RelativeGradient::Pair { row, col } => RelativeGradient::Pair { row: neg(row), col: neg(col) },
        }
    }
}

/// Structured storage of the group element `Q` preconditioning one parameter
/// tensor, with `P = QᵀQ`.
#[derive(Debug, Clone, PartialEq)]
pub struct QFactor {
    kind: GroupKind,
    shape: (usize, usize),
    form: QForm,
}

#[derive(Debug, Clone, PartialEq)]
enum QForm {
    Single(Factor),
    Pair { row: Factor, col: Factor, update_count: u64 },
}

impl QFactor {
    /// `Q = α·I` in the group's representation. Kronecker kinds start each
    /// factor at `√α·I`, so the densified `Q` is still `α·I`.
    pub fn init(kind: GroupKind, shape: (usize, usize), alpha: f64) -> Result<QFactor> {
        if !(alpha > 0.0) {
            return Err(Error::OutOfRange { what: "initial scale alpha", value: alpha });
        }
        let (rows, cols) = shape;
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidGroup { reason: format!("empty parameter shape {rows}x{cols}") });
        }
        let form = match kind.factors() {
            None => {
                let n = rows * cols;
                let fk = match kind {
                    GroupKind::Diagonal => FactorKind::Diagonal,
                    GroupKind::UpperTriangular => FactorKind::UpperTriangular,
                    _ => unreachable!(),
                };
                QForm::Single(Factor::identity(fk, n, alpha))
            }
            Some((rk, ck)) => QForm::Pair {
                row: Factor::identity(rk, rows, alpha.sqrt()),
                col: Factor::identity(ck, cols, alpha.sqrt()),
                update_count: 0,
            },
        };
        Ok(QFactor { kind, shape, form })
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    /// Flattened dimension the densified `Q` acts on.
    pub fn total_dim(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    fn check_shape(&self, g: &Matrix, what: &str) -> Result<()> {
        if g.shape() != self.shape {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "{what}: expected {}x{}, got {}x{}",
                    self.shape.0,
                    self.shape.1,
                    g.rows(),
                    g.cols()
                ),
            });
        }
        Ok(())
    }

    fn check_nonsingular(&self) -> Result<()> {
        match &self.form {
            QForm::Single(f) => {
                if let Some(row) = f.zero_diag_row() {
                    return Err(Error::SingularFactor { row });
                }
            }
            QForm::Pair { row, col, .. } => {
                if let Some(r) = row.zero_diag_row() {
                    return Err(Error::SingularFactor { row: r });
                }
                if let Some(r) = col.zero_diag_row() {
                    return Err(Error::SingularFactor { row: r });
                }
            }
        }
        Ok(())
    }

    /// Applies the preconditioner: `QᵀQ·g` for the flattened kinds,
    /// `Q1ᵀQ1 · G · Q2ᵀQ2` for the Kronecker kinds. Linear in `g`.
    ///
    /// ```
    /// use psgd_core::lie_groups::{GroupKind, QFactor};
    /// use psgd_core::matrix::Matrix;
    ///
    /// // Q = 0.5·I, so P = QᵀQ scales by 0.25.
    /// let q = QFactor::init(GroupKind::UpperTriangular, (3, 1), 0.5)?;
    /// let g = Matrix::new(3, 1, vec![4.0, -8.0, 0.0])?;
    /// assert_eq!(q.precondition(&g)?.as_slice(), &[1.0, -2.0, 0.0]);
    /// # Ok::<(), psgd_core::Error>(())
    /// ```
    pub fn precondition(&self, g: &Matrix) -> Result<Matrix> {
        self.check_shape(g, "precondition")?;
        match &self.form {
            QForm::Single(f) => {
                let x = vec_mat(g);
                let qx = f.matvec(x.as_slice());
                let pqx = f.matvec_t(&qx);
                kron_reshape(&Vector::from_vec_unchecked(pqx), self.shape.0, self.shape.1)
            }
            QForm::Pair { row, col, .. } => {
                // Q1ᵀ(Q1·G), then the right factor applied through transposes.
                let t = row.left_mul_t(&row.left_mul(g));
                let tt = col.left_mul_t(&col.left_mul(&t.transpose()));
                Ok(tt.transpose())
            }
        }
    }

    /// Applies `Q` itself to a flattened vector; diagnostics and tests.
    pub fn apply_q(&self, g: &Matrix) -> Result<Matrix> {
        self.check_shape(g, "apply_q")?;
        match &self.form {
            QForm::Single(f) => {
                let qx = f.matvec(vec_mat(g).as_slice());
                kron_reshape(&Vector::from_vec_unchecked(qx), self.shape.0, self.shape.1)
            }
            QForm::Pair { row, col, .. } => {
                let t = row.left_mul(g);
                Ok(col.left_mul(&t.transpose()).transpose())
            }
        }
    }

    /// Applies `P⁻¹ = Q⁻¹Q⁻ᵀ` through solves; diagnostics and tests.
    pub fn apply_p_inverse(&self, g: &Matrix) -> Result<Matrix> {
        self.check_shape(g, "apply_p_inverse")?;
        self.check_nonsingular()?;
        match &self.form {
            QForm::Single(f) => {
                let qt = f.solve_t(vec_mat(g).as_slice());
                let out = f.solve(&qt);
                kron_reshape(&Vector::from_vec_unchecked(out), self.shape.0, self.shape.1)
            }
            QForm::Pair { row, col, .. } => {
                // (Q1ᵀQ1)⁻¹ G (Q2ᵀQ2)⁻¹ via four factor solves.
                let t = row.apply_cols(&row.left_solve_t(g), Factor::solve);
                let tt = col.apply_cols(&col.left_solve_t(&t.transpose()), Factor::solve);
                Ok(tt.transpose())
            }
        }
    }

    /// Stochastic relative gradient of `uᵀPu + vᵀP⁻¹v` with respect to the
    /// multiplicative perturbation `δQ = E·Q`, projected onto the group's
    /// tangent pattern. For the Newton-type criterion `u` is `Ĥv`; for the
    /// Fisher-type criterion `u` is `ĝ + λv`.
    pub fn relative_gradient(&self, u: &Matrix, v: &Matrix) -> Result<RelativeGradient> {
        self.check_shape(u, "relative_gradient u")?;
        self.check_shape(v, "relative_gradient v")?;
        self.check_nonsingular()?;
        match &self.form {
            QForm::Single(f) => {
                let a = f.matvec(vec_mat(u).as_slice());
                let b = f.solve_t(vec_mat(v).as_slice());
                let n = a.len();
                let am = Matrix::from_vec_unchecked(n, 1, a);
                let bm = Matrix::from_vec_unchecked(n, 1, b);
                Ok(RelativeGradient::Single(gram_rows_projected(&am, &bm, f.kind())))
            }
            QForm::Pair { row, col, .. } => {
                // A = Q1·U·Q2ᵀ and B = Q1⁻ᵀ·V·Q2⁻¹, built from factor-level
                // products and solves.
                let a = col.left_mul(&row.left_mul(u).transpose()).transpose();
                let b = col.left_solve_t(&row.left_solve_t(v).transpose()).transpose();
                Ok(RelativeGradient::Pair {
                    row: gram_rows_projected(&a, &b, row.kind()),
                    col: gram_cols_projected(&a, &b, col.kind()),
                })
            }
        }
    }

    /// Normalized relative-gradient step `Q ← (I − μ₀·R/‖R‖)·Q`. Kronecker
    /// factors are each normalized by their own max-abs norm and both are
    /// updated per call. A zero-norm gradient leaves the factor unchanged.
    pub fn update_q(&mut self, r: &RelativeGradient, mu0: f64) -> Result<()> {
        if !(mu0 > 0.0 && mu0 < 1.0) {
            return Err(Error::OutOfRange { what: "preconditioner step size mu0", value: mu0 });
        }
        match (&mut self.form, r) {
            (QForm::Single(f), RelativeGradient::Single(rf)) => {
                let norm = rf.max_abs();
                if norm > 0.0 {
                    *f = Factor::identity_minus_scaled(rf, mu0 / norm).mul_structured(f);
                }
            }
            (QForm::Pair { row, col, update_count }, RelativeGradient::Pair { row: rr, col: rc }) => {
                let rn = rr.max_abs();
                if rn > 0.0 {
                    *row = Factor::identity_minus_scaled(rr, mu0 / rn).mul_structured(row);
                }
                let cn = rc.max_abs();
                if cn > 0.0 {
                    *col = Factor::identity_minus_scaled(rc, mu0 / cn).mul_structured(col);
                }
                *update_count += 1;
                if *update_count % REBALANCE_PERIOD == 0 {
                    rebalance(row, col);
                }
            }
            _ => {
                return Err(Error::ShapeMismatch {
                    context: "relative gradient does not match the factor structure".into(),
                })
            }
        }
        Ok(())
    }

    /// Densified `Q`; Kronecker kinds densify as `Q2 ⊗ Q1`, matching the
    /// column-stacking `vec` convention.
    pub fn as_dense(&self) -> Result<Matrix> {
        let dim = self.total_dim();
        if dim > DENSE_CAP {
            return Err(Error::DimensionCap { dim, cap: DENSE_CAP });
        }
        Ok(match &self.form {
            QForm::Single(f) => f.to_dense(),
            QForm::Pair { row, col, .. } => kron(&col.to_dense(), &row.to_dense()),
        })
    }

    /// Densified `P = QᵀQ`; test oracle.
    pub fn dense_p(&self) -> Result<Matrix> {
        let q = self.as_dense()?;
        Ok(q.transpose().matmul(&q))
    }

    /// True when every stored diagonal entry is strictly positive.
    pub fn diagonals_positive(&self) -> bool {
        let check = |f: &Factor| (0..f.dim()).all(|i| f.diag(i) > 0.0);
        match &self.form {
            QForm::Single(f) => check(f),
            QForm::Pair { row, col, .. } => check(row) && check(col),
        }
    }

    /// Stored entries per factor, for tests and diagnostics.
    pub fn factor_entries(&self) -> Vec<Vec<f64>> {
        match &self.form {
            QForm::Single(f) => vec![f.entries()],
            QForm::Pair { row, col, .. } => vec![row.entries(), col.entries()],
        }
    }

    /// Replaces the stored entries, keeping kind and shape. Entries are in
    /// the canonical order of [`QFactor::factor_entries`].
    pub fn set_factor_entries(&mut self, entries: &[Vec<f64>]) -> Result<()> {
        match &mut self.form {
            QForm::Single(f) => {
                if entries.len() != 1 {
                    return Err(Error::InvalidData { expected: 1, got: entries.len() });
                }
                *f = Factor::from_entries(f.kind(), f.dim(), &entries[0])?;
            }
            QForm::Pair { row, col, .. } => {
                if entries.len() != 2 {
                    return Err(Error::InvalidData { expected: 2, got: entries.len() });
                }
                *row = Factor::from_entries(row.kind(), row.dim(), &entries[0])?;
                *col = Factor::from_entries(col.kind(), col.dim(), &entries[1])?;
            }
        }
        Ok(())
    }

    /// Serializes to flat key-value entries under `prefix`.
    pub fn to_kv(&self, prefix: &str, doc: &mut KvDoc) {
        doc.push(format!("{prefix}.group"), self.kind.name());
        doc.push(format!("{prefix}.shape"), format!("{},{}", self.shape.0, self.shape.1));
        match &self.form {
            QForm::Single(f) => {
                doc.push_f64_list(format!("{prefix}.q"), &f.entries());
            }
            QForm::Pair { row, col, update_count } => {
                doc.push_f64_list(format!("{prefix}.q1"), &row.entries());
                doc.push_f64_list(format!("{prefix}.q2"), &col.entries());
                doc.push_u64(format!("{prefix}.updates"), *update_count);
            }
        }
    }

    /// Restores a factor written by [`QFactor::to_kv`]; exact round trip.
    pub fn from_kv(prefix: &str, doc: &KvDoc) -> Result<QFactor> {
        let kind = GroupKind::parse(doc.require(&format!("{prefix}.group"))?)?;
        let shape_s = doc.require(&format!("{prefix}.shape"))?;
        let mut it = shape_s.split(',');
        let parse_dim = |tok: Option<&str>| -> Result<usize> {
            tok.and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Parse { line: 0, message: format!("bad shape `{shape_s}`") })
        };
        let rows = parse_dim(it.next())?;
        let cols = parse_dim(it.next())?;
        let form = match kind.factors() {
            None => {
                let entries = doc.get_f64_list(&format!("{prefix}.q"))?;
                let fk = match kind {
                    GroupKind::Diagonal => FactorKind::Diagonal,
                    GroupKind::UpperTriangular => FactorKind::UpperTriangular,
                    _ => unreachable!(),
                };
                QForm::Single(Factor::from_entries(fk, rows * cols, &entries)?)
            }
            Some((rk, ck)) => {
                let q1 = doc.get_f64_list(&format!("{prefix}.q1"))?;
                let q2 = doc.get_f64_list(&format!("{prefix}.q2"))?;
                QForm::Pair {
                    row: Factor::from_entries(rk, rows, &q1)?,
                    col: Factor::from_entries(ck, cols, &q2)?,
                    update_count: doc.get_u64(&format!("{prefix}.updates"))?,
                }
            }
        };
        let q = QFactor { kind, shape: (rows, cols), form };
        q.check_nonsingular()?;
        if !q.diagonals_positive() {
            return Err(Error::InvalidGroup {
                reason: format!("{prefix}: deserialized factor has a non-positive diagonal"),
            });
        }
        Ok(q)
    }
}

/// Evens out the Kronecker scale ambiguity (`Q1 → cQ1, Q2 → Q2/c` leaves `P`
/// unchanged) with a power-of-two ratio, so the densified `P` stays
/// bit-for-bit identical.
fn rebalance(row: &mut Factor, col: &mut Factor) {
    let rn = row.max_abs();
    let cn = col.max_abs();
    if rn == 0.0 || cn == 0.0 {
        return;
    }
    let e = (0.5 * (cn.log2() - rn.log2())).round();
    if e == 0.0 || !e.is_finite() {
        return;
    }
    let c = e.exp2();
    row.scale_all(c);
    col.scale_all(1.0 / c);
}
