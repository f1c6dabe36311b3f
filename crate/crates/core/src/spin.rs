//! Angular-momentum operators and small dense Hermitian eigendecomposition.
//!
//! Matrices are ordered in the `|I, m>` basis with `m = I, I-1, ..., -I`, so
//! `iz` is diagonal and descending. All operators are in units of hbar.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

/// Largest spin quantum number the artifact handles (2I+1 = 10).
pub const MAX_TWICE_SPIN: u32 = 9;

/// A half-integer spin quantum number, stored as `2I`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Spin(u32);

impl Spin {
    pub fn from_twice(twice: u32) -> Result<Self> {
        if twice == 0 || twice > MAX_TWICE_SPIN {
            return Err(Error::invalid(format!(
                "spin 2I = {twice} outside supported range 1..={MAX_TWICE_SPIN}"
            )));
        }
        Ok(Spin(twice))
    }

    pub fn new(value: f64) -> Result<Self> {
        let twice = 2.0 * value;
        if !value.is_finite() || value <= 0.0 || (twice - twice.round()).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "spin {value} is not a positive half-integer"
            )));
        }
        Self::from_twice(twice.round() as u32)
    }

    pub fn twice(self) -> u32 {
        self.0
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 2.0
    }

    pub fn dim(self) -> usize {
        self.0 as usize + 1
    }

    /// I(I+1)
    pub fn casimir(self) -> f64 {
        let i = self.value();
        i * (i + 1.0)
    }
}

impl TryFrom<f64> for Spin {
    type Error = Error;
    fn try_from(value: f64) -> Result<Self> {
        Spin::new(value)
    }
}

impl From<Spin> for f64 {
    fn from(s: Spin) -> f64 {
        s.value()
    }
}

impl std::fmt::Display for Spin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0 % 2 == 0 {
            write!(f, "{}", self.0 / 2)
        } else {
            write!(f, "{}/2", self.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpinOperators {
    pub spin: Spin,
    pub ix: CMatrix,
    pub iy: CMatrix,
    pub iz: CMatrix,
}

impl SpinOperators {
    /// Ladder-operator construction of ix, iy, iz.
    pub fn new(spin: Spin) -> Self {
        let d = spin.dim();
        let i = spin.value();
        let m = |k: usize| i - k as f64;

        let mut raise = CMatrix::zeros(d, d);
        for k in 1..d {
            // <m+1| I+ |m> = sqrt(I(I+1) - m(m+1)), with m+1 at row k-1
            let mk = m(k);
            raise[(k - 1, k)] = Complex64::new((spin.casimir() - mk * (mk + 1.0)).sqrt(), 0.0);
        }
        let lower = raise.adjoint();
        let ix = (&raise + &lower).map(|z| z * 0.5);
        let iy = (&raise - &lower).map(|z| z * Complex64::new(0.0, -0.5));
        let iz = CMatrix::from_fn(d, d, |r, c| {
            if r == c {
                Complex64::new(m(r), 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        SpinOperators { spin, ix, iy, iz }
    }

    pub fn dim(&self) -> usize {
        self.spin.dim()
    }

    pub fn identity(&self) -> CMatrix {
        CMatrix::identity(self.dim(), self.dim())
    }

    /// n . I for a real 3-vector n.
    pub fn project(&self, n: [f64; 3]) -> CMatrix {
        self.ix.map(|z| z * n[0]) + self.iy.map(|z| z * n[1]) + self.iz.map(|z| z * n[2])
    }

    /// Operators of a frame whose z axis has polar angle `theta` and azimuth
    /// `phi` relative to the laboratory axes (the lab frame turned by `theta`
    /// about y, then by `phi` about z).
    pub fn principal_frame(&self, theta: f64, phi: f64) -> SpinOperators {
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        SpinOperators {
            spin: self.spin,
            ix: self.project([ct * cp, ct * sp, -st]),
            iy: self.project([-sp, cp, 0.0]),
            iz: self.project([st * cp, st * sp, ct]),
        }
    }
}

/// Shorthand for [`SpinOperators::new`] taking the spin as a number.
pub fn spin_operators(spin: f64) -> Result<SpinOperators> {
    Ok(SpinOperators::new(Spin::new(spin)?))
}

/// exp(-i angle n.I)
pub fn rotation_unitary(ops: &SpinOperators, axis: [f64; 3], angle: f64) -> Result<CMatrix> {
    let n = unit_axis(axis)?;
    let generator = ops.project(n);
    let es = eigendecompose(&generator)?;
    let phases = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        ops.dim(),
        es.eigenvalues
            .iter()
            .map(|&e| Complex64::from_polar(1.0, -angle * e)),
    ));
    Ok(&es.eigenvectors * phases * es.eigenvectors.adjoint())
}

/// Conjugates each operator by R = exp(-i angle n.I), returning R I R^dagger.
pub fn rotate_operator(ops: &SpinOperators, axis: [f64; 3], angle: f64) -> Result<SpinOperators> {
    let r = rotation_unitary(ops, axis, angle)?;
    let rd = r.adjoint();
    let conj = |m: &CMatrix| &r * m * &rd;
    Ok(SpinOperators {
        spin: ops.spin,
        ix: conj(&ops.ix),
        iy: conj(&ops.iy),
        iz: conj(&ops.iz),
    })
}

fn unit_axis(axis: [f64; 3]) -> Result<[f64; 3]> {
    let norm = axis.iter().map(|a| a * a).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::invalid("rotation axis must be a nonzero finite vector"));
    }
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "rotation axis must be a unit vector (|n| = {norm})"
        )));
    }
    Ok(axis)
}

#[derive(Clone, Debug)]
pub struct EigenSystem {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Column k belongs to eigenvalue k.
    pub eigenvectors: CMatrix,
}

impl EigenSystem {
    /// V^dagger O V
    pub fn to_eigenbasis(&self, op: &CMatrix) -> CMatrix {
        self.eigenvectors.adjoint() * op * &self.eigenvectors
    }

    pub fn reconstruct(&self) -> CMatrix {
        let lambda = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            self.eigenvalues.len(),
            self.eigenvalues.iter().map(|&e| Complex64::new(e, 0.0)),
        ));
        &self.eigenvectors * lambda * self.eigenvectors.adjoint()
    }
}

pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn eigendecompose(h: &CMatrix) -> Result<EigenSystem> {
    if !h.is_square() {
        return Err(Error::invalid(format!(
            "matrix is {}x{}, expected square",
            h.nrows(),
            h.ncols()
        )));
    }
    let scale = max_abs(h).max(1.0);
    let asym = max_abs(&(h - h.adjoint()));
    if !(asym <= 1e-9 * scale) {
        return Err(Error::invalid(format!(
            "matrix is not Hermitian (max |H - H^dagger| = {asym:e})"
        )));
    }
    // symmetrise so the solver sees an exactly Hermitian input
    let herm = (h + h.adjoint()).map(|z| z * 0.5);
    let d = herm.nrows();
    let eig = SymmetricEigen::new(herm);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let eigenvectors = CMatrix::from_fn(d, d, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(EigenSystem {
        eigenvalues,
        eigenvectors,
    })
}
