//! Complex 2×2 matrices and two-component vectors.
//!
//! The mode systems in this crate are all 2×2; a tiny dedicated type keeps
//! the hot loops allocation-free and the algebra explicit.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Sub};

pub type C64 = Complex64;

/// Row-major complex 2×2 matrix `[[a, b], [c, d]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat2 {
    pub a: C64,
    pub b: C64,
    pub c: C64,
    pub d: C64,
}

impl Mat2 {
    pub const fn new(a: C64, b: C64, c: C64, d: C64) -> Self {
        Mat2 { a, b, c, d }
    }

    pub fn identity() -> Self {
        Mat2::new(C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(1.0, 0.0))
    }

    pub fn zero() -> Self {
        let z = C64::new(0.0, 0.0);
        Mat2::new(z, z, z, z)
    }

    pub fn from_real(a: f64, b: f64, c: f64, d: f64) -> Self {
        Mat2::new(C64::new(a, 0.0), C64::new(b, 0.0), C64::new(c, 0.0), C64::new(d, 0.0))
    }

    pub fn diag(a: C64, d: C64) -> Self {
        Mat2::new(a, C64::new(0.0, 0.0), C64::new(0.0, 0.0), d)
    }

    pub fn det(&self) -> C64 {
        self.a * self.d - self.b * self.c
    }

    pub fn trace(&self) -> C64 {
        self.a + self.d
    }

    pub fn scale(&self, s: C64) -> Self {
        Mat2::new(self.a * s, self.b * s, self.c * s, self.d * s)
    }

    pub fn inv(&self) -> Option<Mat2> {
        let det = self.det();
        if det.norm() == 0.0 {
            return None;
        }
        let inv_det = det.inv();
        Some(Mat2::new(
            self.d * inv_det,
            -self.b * inv_det,
            -self.c * inv_det,
            self.a * inv_det,
        ))
    }

    pub fn mul_vec(&self, v: &[C64; 2]) -> [C64; 2] {
        [self.a * v[0] + self.b * v[1], self.c * v[0] + self.d * v[1]]
    }

    pub fn frobenius_norm(&self) -> f64 {
        (self.a.norm_sqr() + self.b.norm_sqr() + self.c.norm_sqr() + self.d.norm_sqr()).sqrt()
    }

    /// Spectral norm (largest singular value), closed form for 2×2.
    pub fn op_norm(&self) -> f64 {
        let f2 = self.a.norm_sqr() + self.b.norm_sqr() + self.c.norm_sqr() + self.d.norm_sqr();
        let det2 = self.det().norm_sqr();
        let disc = (f2 * f2 - 4.0 * det2).max(0.0);
        (0.5 * (f2 + disc.sqrt())).sqrt()
    }

    pub fn conj_transpose(&self) -> Mat2 {
        Mat2::new(self.a.conj(), self.c.conj(), self.b.conj(), self.d.conj())
    }

    pub fn is_finite(&self) -> bool {
        [self.a, self.b, self.c, self.d]
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

impl Mul for Mat2 {
    type Output = Mat2;
    fn mul(self, rhs: Mat2) -> Mat2 {
        Mat2::new(
            self.a * rhs.a + self.b * rhs.c,
            self.a * rhs.b + self.b * rhs.d,
            self.c * rhs.a + self.d * rhs.c,
            self.c * rhs.b + self.d * rhs.d,
        )
    }
}

impl Add for Mat2 {
    type Output = Mat2;
    fn add(self, rhs: Mat2) -> Mat2 {
        Mat2::new(self.a + rhs.a, self.b + rhs.b, self.c + rhs.c, self.d + rhs.d)
    }
}

impl Sub for Mat2 {
    type Output = Mat2;
    fn sub(self, rhs: Mat2) -> Mat2 {
        Mat2::new(self.a - rhs.a, self.b - rhs.b, self.c - rhs.c, self.d - rhs.d)
    }
}

pub fn vec2_norm(v: &[C64; 2]) -> f64 {
    (v[0].norm_sqr() + v[1].norm_sqr()).sqrt()
}

pub fn vec2_norm_sqr(v: &[C64; 2]) -> f64 {
    v[0].norm_sqr() + v[1].norm_sqr()
}
