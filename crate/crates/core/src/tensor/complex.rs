//! Complex matrices as pairs of real tape values.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Degree of the Taylor polynomial used inside scaling-and-squaring.
const TAYLOR_DEGREE: usize = 12;
/// Scaled argument norm that triggers no further halving.
const SCALED_NORM_BOUND: f64 = 0.5;
/// Largest tolerated |h_ij - h_ji| for a Hamiltonian.
pub(crate) const HERMITIAN_TOL: f64 = 1e-10;

/// `re + i·im`, both recorded on the same tape.
#[derive(Debug, Clone, Copy)]
pub struct ComplexMatrix<'t> {
    pub re: Var<'t>,
    pub im: Var<'t>,
}

/// Plain (untaped) complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexValue {
    pub re: Tensor,
    pub im: Tensor,
}

impl<'t> ComplexMatrix<'t> {
    pub fn new(re: Var<'t>, im: Var<'t>) -> Self {
        assert_eq!(
            re.shape(),
            im.shape(),
            "contract violation: real and imaginary parts differ in shape"
        );
        ComplexMatrix { re, im }
    }

    pub fn identity(tape: &'t Tape, n: usize) -> Self {
        ComplexMatrix {
            re: tape.constant(Tensor::eye(n)),
            im: tape.constant(Tensor::zeros(&[n, n])),
        }
    }

    pub fn value(&self) -> ComplexValue {
        ComplexValue {
            re: self.re.value(),
            im: self.im.value(),
        }
    }

    /// Elementwise squared modulus `re² + im²`.
    pub fn abs_squared(&self) -> Var<'t> {
        self.re * self.re + self.im * self.im
    }
}

/// Complex product `(Ar·Br − Ai·Bi) + i(Ar·Bi + Ai·Br)`.
pub fn cmatmul<'t>(a: &ComplexMatrix<'t>, b: &ComplexMatrix<'t>) -> ComplexMatrix<'t> {
    ComplexMatrix {
        re: a.re.matmul(b.re) - a.im.matmul(b.im),
        im: a.re.matmul(b.im) + a.im.matmul(b.re),
    }
}

/// `U(t) = exp(−iHt)` for a real symmetric `H` by scaling and squaring.
///
/// With `M = H·t/2^s` (smallest `s` giving `‖M‖∞ ≤ 0.5`), the series
/// `exp(−iM) = Σ (−i)^k M^k / k!` splits into real even and odd parts
/// `C − iS`, so only real matrix powers are taped before the `s` complex
/// squarings.
pub fn cexpm_minus_iht<'t>(h: Var<'t>, t: f64) -> Result<ComplexMatrix<'t>> {
    let hv = h.value();
    let shape = hv.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Contract(format!(
            "exp(-iHt) needs a square matrix, got {shape:?}"
        )));
    }
    if !t.is_finite() {
        return Err(Error::Contract(format!("exp(-iHt) needs a finite time, got {t}")));
    }
    if !hv.is_finite() {
        return Err(Error::numeric("quantum walk", "Hamiltonian has non-finite entries"));
    }
    let asym = hv.asymmetry();
    if asym > HERMITIAN_TOL {
        return Err(Error::Contract(format!(
            "Hamiltonian is not symmetric (max |h_ij - h_ji| = {asym:e})"
        )));
    }
    let n = shape[0];
    let tape = h.tape();
    let norm = hv.inf_norm() * t.abs();
    let mut squarings = 0u32;
    while norm / 2f64.powi(squarings as i32) > SCALED_NORM_BOUND {
        squarings += 1;
    }
    let m = h.scale(t / 2f64.powi(squarings as i32));

    let mut even = tape.constant(Tensor::eye(n));
    let mut odd = m;
    let mut power = m;
    let mut factorial = 1.0;
    for k in 2..=TAYLOR_DEGREE {
        power = power.matmul(m);
        factorial *= k as f64;
        // (−i)^k: k ≡ 0 → +1, 1 → −i, 2 → −1, 3 → +i (mod 4)
        let sign = if (k / 2) % 2 == 0 { 1.0 } else { -1.0 };
        let term = power.scale(sign / factorial);
        if k % 2 == 0 {
            even = even + term;
        } else {
            odd = odd + term;
        }
    }
    let mut u = ComplexMatrix {
        re: even,
        im: -odd,
    };
    for _ in 0..squarings {
        u = cmatmul(&u, &u);
    }
    Ok(u)
}

impl ComplexValue {
    pub fn identity(n: usize) -> Self {
        ComplexValue {
            re: Tensor::eye(n),
            im: Tensor::zeros(&[n, n]),
        }
    }

    pub fn matmul(&self, other: &ComplexValue) -> ComplexValue {
        let rr = self.re.matmul(&other.re);
        let ii = self.im.matmul(&other.im);
        let ri = self.re.matmul(&other.im);
        let ir = self.im.matmul(&other.re);
        let shape = rr.shape().to_vec();
        let sub: Vec<f64> = rr.data().iter().zip(ii.data()).map(|(a, b)| a - b).collect();
        let add: Vec<f64> = ri.data().iter().zip(ir.data()).map(|(a, b)| a + b).collect();
        ComplexValue {
            re: Tensor::new(&shape, sub),
            im: Tensor::new(&shape, add),
        }
    }

    pub fn conj_transpose(&self) -> ComplexValue {
        ComplexValue {
            re: self.re.transpose(),
            im: self.im.transpose().map(|v| -v),
        }
    }

    pub fn max_abs_diff(&self, other: &ComplexValue) -> f64 {
        self.re.max_abs_diff(&other.re).max(self.im.max_abs_diff(&other.im))
    }

    /// `max |(U·U†) − I|` over entries.
    pub fn unitarity_defect(&self) -> f64 {
        let n = self.re.rows();
        self.matmul(&self.conj_transpose())
            .max_abs_diff(&ComplexValue::identity(n))
    }
}
