//! Degree-2 truncated Taylor values ("jets") in up to three seed directions.
//!
//! A [`Jet2`] carries a value, its first derivatives along each seed
//! direction, and the upper triangle of the symmetric matrix of second
//! derivatives. Pairs `(i, j)` with `i <= j` are packed row by row.

use serde::{Deserialize, Serialize};

pub const MAX_DIM: usize = 3;
pub const MAX_HESS: usize = MAX_DIM * (MAX_DIM + 1) / 2;

/// Packed index of the pair `(i, j)` for a jet of dimension `dim`.
#[inline]
pub fn hess_index(dim: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    debug_assert!(j < dim);
    // row i starts at sum_{r<i} (dim - r)
    i * dim - i * i.saturating_sub(1) / 2 + (j - i)
}

/// All packed pairs for a given dimension, in storage order.
pub fn hess_pairs(dim: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(dim * (dim + 1) / 2);
    for i in 0..dim {
        for j in i..dim {
            out.push((i, j));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jet2 {
    pub value: f64,
    pub grad: [f64; MAX_DIM],
    pub hess: [f64; MAX_HESS],
    dim: u8,
}

impl Jet2 {
    pub fn constant(dim: usize, value: f64) -> Self {
        assert!(dim <= MAX_DIM, "jet dimension {dim} exceeds {MAX_DIM}");
        Self {
            value,
            grad: [0.0; MAX_DIM],
            hess: [0.0; MAX_HESS],
            dim: dim as u8,
        }
    }

    pub fn seed(dim: usize, value: f64, index: usize) -> Self {
        let mut j = Self::constant(dim, value);
        j.grad[index] = 1.0;
        j
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(dim, 0.0)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    #[inline]
    pub fn hess_len(&self) -> usize {
        let d = self.dim();
        d * (d + 1) / 2
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad[..self.dim()]
    }

    pub fn hess(&self) -> &[f64] {
        &self.hess[..self.hess_len()]
    }

    #[inline]
    pub fn second(&self, i: usize, j: usize) -> f64 {
        self.hess[hess_index(self.dim(), i, j)]
    }

    pub fn set_second(&mut self, i: usize, j: usize, v: f64) {
        let k = hess_index(self.dim(), i, j);
        self.hess[k] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad().iter().all(|v| v.is_finite())
            && self.hess().iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.value == 0.0
            && self.grad().iter().all(|&v| v == 0.0)
            && self.hess().iter().all(|&v| v == 0.0)
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut r = *self;
        r.value += o.value;
        for k in 0..self.dim() {
            r.grad[k] += o.grad[k];
        }
        for k in 0..self.hess_len() {
            r.hess[k] += o.hess[k];
        }
        r
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.add(&o.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut r = *self;
        r.value *= c;
        for k in 0..self.dim() {
            r.grad[k] *= c;
        }
        for k in 0..self.hess_len() {
            r.hess[k] *= c;
        }
        r
    }

    /// `self += c * o`, used for adjoint accumulation.
    pub fn axpy(&mut self, c: f64, o: &Self) {
        self.value += c * o.value;
        for k in 0..self.dim() {
            self.grad[k] += c * o.grad[k];
        }
        for k in 0..self.hess_len() {
            self.hess[k] += c * o.hess[k];
        }
    }

    pub fn mul(&self, o: &Self) -> Self {
        let d = self.dim();
        let mut r = Self::zero(d);
        r.value = self.value * o.value;
        for i in 0..d {
            r.grad[i] = self.grad[i] * o.value + self.value * o.grad[i];
        }
        let mut k = 0;
        for i in 0..d {
            for j in i..d {
                r.hess[k] = self.hess[k] * o.value
                    + self.grad[i] * o.grad[j]
                    + self.grad[j] * o.grad[i]
                    + self.value * o.hess[k];
                k += 1;
            }
        }
        r
    }

    /// Compose with a scalar function given its value and first two
    /// derivatives at `self.value`.
    pub fn compose(&self, f0: f64, f1: f64, f2: f64) -> Self {
        let d = self.dim();
        let mut r = Self::zero(d);
        r.value = f0;
        for i in 0..d {
            r.grad[i] = f1 * self.grad[i];
        }
        let mut k = 0;
        for i in 0..d {
            for j in i..d {
                r.hess[k] = f1 * self.hess[k] + f2 * self.grad[i] * self.grad[j];
                k += 1;
            }
        }
        r
    }

    /// Adjoint of [`Jet2::compose`]: given the output adjoint `ybar` and the
    /// derivatives `f1, f2, f3` at the input value, returns the input adjoint.
    pub fn compose_adjoint(&self, f1: f64, f2: f64, f3: f64, ybar: &Self) -> Self {
        let d = self.dim();
        let mut x = Self::zero(d);
        x.value = f1 * ybar.value;
        for i in 0..d {
            x.value += f2 * ybar.grad[i] * self.grad[i];
            x.grad[i] = f1 * ybar.grad[i];
        }
        let mut k = 0;
        for i in 0..d {
            for j in i..d {
                let yb = ybar.hess[k];
                if yb != 0.0 {
                    x.value += yb * (f2 * self.hess[k] + f3 * self.grad[i] * self.grad[j]);
                    x.grad[i] += yb * f2 * self.grad[j];
                    x.grad[j] += yb * f2 * self.grad[i];
                    x.hess[k] = f1 * yb;
                }
                k += 1;
            }
        }
        x
    }

    /// Adjoint of [`Jet2::mul`] with respect to `self`, given the other
    /// factor `o`.
    pub fn mul_adjoint(o: &Self, ybar: &Self) -> Self {
        let d = o.dim();
        let mut a = Self::zero(d);
        a.value = ybar.value * o.value;
        for i in 0..d {
            a.value += ybar.grad[i] * o.grad[i];
            a.grad[i] = ybar.grad[i] * o.value;
        }
        let mut k = 0;
        for i in 0..d {
            for j in i..d {
                let yb = ybar.hess[k];
                a.value += yb * o.hess[k];
                a.grad[i] += yb * o.grad[j];
                a.grad[j] += yb * o.grad[i];
                a.hess[k] = yb * o.value;
                k += 1;
            }
        }
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_indices_are_row_major_upper_triangle() {
        assert_eq!(hess_index(3, 0, 0), 0);
        assert_eq!(hess_index(3, 0, 2), 2);
        assert_eq!(hess_index(3, 1, 1), 3);
        assert_eq!(hess_index(3, 2, 1), 4);
        assert_eq!(hess_index(3, 2, 2), 5);
        assert_eq!(hess_index(2, 1, 1), 2);
        assert_eq!(hess_index(1, 0, 0), 0);
        for d in 1..=3 {
            for (k, (i, j)) in hess_pairs(d).into_iter().enumerate() {
                assert_eq!(hess_index(d, i, j), k);
            }
        }
    }

    #[test]
    fn square_of_seed() {
        let x = Jet2::seed(1, 3.0, 0);
        let y = x.mul(&x);
        assert_eq!(y.value, 9.0);
        assert_eq!(y.grad(), &[6.0]);
        assert_eq!(y.hess(), &[2.0]);
    }
}
